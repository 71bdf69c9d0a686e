//! Losses, metrics, the training loop and evaluation.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::datasets::{LabeledSet, WindowDataset};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::model::{FieldKind, FilterInit, FodeModel, ModelConfig, Normalizer};
use crate::odeint::SolverConfig;
use crate::pipeline::{batch_loss, loss_and_grads, predict_batch, predict_logits, Targets};

/// Mean of squared element differences.
pub fn mse_loss(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(FodeError::shape(
            "mse",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if pred.is_empty() {
        return Err(FodeError::EmptyInput);
    }
    let s: f64 = pred.as_slice().iter().zip(target.as_slice()).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

pub const MAPE_EPS: f64 = 1e-8;

/// Mean absolute percentage error over elements with `|target| > eps`.
pub fn mape(pred: &Matrix, target: &Matrix, eps: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(FodeError::shape(
            "mape",
            format!("{:?}", target.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    if !(eps > 0.0) {
        return Err(FodeError::InvalidArgument("mape eps must be > 0".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, t) in pred.as_slice().iter().zip(target.as_slice()) {
        if t.abs() > eps {
            sum += (p - t).abs() / t.abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(FodeError::UndefinedMetric("every target is below the MAPE threshold".into()));
    }
    Ok(100.0 * sum / n as f64)
}

/// `−log softmax(logits)[class]`.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(FodeError::InvalidArgument(format!(
            "class {class} out of range for {} logits",
            logits.len()
        )));
    }
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    Ok(lse - logits[class])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

impl FromStr for LossKind {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "cross_entropy" | "cross-entropy" => Ok(LossKind::CrossEntropy),
            _ => Err(FodeError::UnknownVariant {
                kind: "loss",
                value: s.into(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Windowed,
    Rollout,
}

impl FromStr for EvalMode {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "windowed" => Ok(EvalMode::Windowed),
            "rollout" => Ok(EvalMode::Rollout),
            _ => Err(FodeError::UnknownVariant {
                kind: "eval mode",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Windowed => "windowed",
            EvalMode::Rollout => "rollout",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Used for gradients and the per-epoch test loss. `rk4` unrolls on
    /// the tape, `dopri5` uses the adjoint solve.
    pub solver: SolverConfig,
    /// Used for final metrics.
    pub eval_solver: SolverConfig,
    pub loss: LossKind,
    pub model_kind: FieldKind,
    pub use_filter: bool,
    pub k_init: FilterInit,
    pub hidden: usize,
    pub time_input: bool,
    /// Standardise channels with statistics of the training inputs.
    pub normalize: bool,
    pub snapshot_k: bool,
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            solver: SolverConfig::rk4(8),
            eval_solver: SolverConfig::default(),
            loss: LossKind::Mse,
            model_kind: FieldKind::Fode,
            use_filter: true,
            k_init: FilterInit::Uniform,
            hidden: 16,
            time_input: false,
            normalize: true,
            snapshot_k: false,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FodeError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(FodeError::Config("lr must be > 0".into()));
        }
        if self.hidden == 0 {
            return Err(FodeError::Config("hidden must be >= 1".into()));
        }
        self.solver.validate().map_err(|e| FodeError::Config(format!("solver: {e}")))?;
        self.eval_solver
            .validate()
            .map_err(|e| FodeError::Config(format!("eval solver: {e}")))?;
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Model architecture implied by this config for `N × C` windows.
    pub fn model_config(&self, window_len: usize, channels: usize, classes: Option<usize>) -> ModelConfig {
        ModelConfig {
            kind: self.model_kind,
            window_len,
            channels,
            hidden: self.hidden,
            use_filter: self.use_filter,
            k_init: self.k_init,
            time_input: self.time_input,
            classes,
        }
    }
}

/// Supervision in owned form.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Windows(Matrix),
    Classes(Vec<usize>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Windows(m) => m.rows(),
            Labels::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_targets(&self) -> Targets<'_> {
        match self {
            Labels::Windows(m) => Targets::Windows(m),
            Labels::Classes(c) => Targets::Classes(c),
        }
    }

    fn gather(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Windows(m) => {
                let mut data = Vec::with_capacity(idx.len() * m.cols());
                for &i in idx {
                    data.extend_from_slice(m.row(i));
                }
                Labels::Windows(Matrix::from_vec(idx.len(), m.cols(), data).expect("gather shape"))
            }
            Labels::Classes(c) => Labels::Classes(idx.iter().map(|&i| c[i]).collect()),
        }
    }
}

/// Flattened, normalised inputs (`B × (N·C)`) with their supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub labels: Labels,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    fn gather(&self, idx: &[usize]) -> Split {
        let c = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        Split {
            inputs: Matrix::from_vec(idx.len(), c, data).expect("gather shape"),
            labels: self.labels.gather(idx),
        }
    }
}

/// Training-ready data: normalised train/test splits plus the normaliser
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub train: Split,
    pub test: Split,
    pub window_len: usize,
    pub channels: usize,
    pub classes: Option<usize>,
    pub normalizer: Option<Normalizer>,
}

fn flatten(items: &[Matrix], norm: Option<&Normalizer>) -> Result<Matrix> {
    let mapped: Vec<Matrix> = match norm {
        Some(n) => items.iter().map(|m| n.normalize(m)).collect(),
        None => items.to_vec(),
    };
    let refs: Vec<&Matrix> = mapped.iter().collect();
    Matrix::stack_flat(&refs)
}

impl TrainData {
    /// Forecasting data from windows. Input and target windows must have
    /// the same length.
    pub fn from_windows(ds: &WindowDataset, normalize: bool) -> Result<Self> {
        let Some(first) = ds.inputs.first() else {
            return Err(FodeError::EmptyInput);
        };
        let (n, c) = first.shape();
        if ds.targets[0].shape() != (n, c) {
            return Err(FodeError::shape(
                "target window",
                format!("{n}x{c}"),
                format!("{:?}", ds.targets[0].shape()),
            ));
        }
        if ds.n_train() == 0 {
            return Err(FodeError::InvalidArgument("training split is empty".into()));
        }
        let (tr_in, tr_out) = ds.train();
        let (te_in, te_out) = ds.test();
        let normalizer = if normalize {
            Some(Normalizer::fit(&tr_in.iter().collect::<Vec<_>>())?)
        } else {
            None
        };
        let nr = normalizer.as_ref();
        Ok(TrainData {
            train: Split {
                inputs: flatten(tr_in, nr)?,
                labels: Labels::Windows(flatten(tr_out, nr)?),
            },
            test: Split {
                inputs: flatten(te_in, nr)?,
                labels: Labels::Windows(flatten(te_out, nr)?),
            },
            window_len: n,
            channels: c,
            classes: None,
            normalizer,
        })
    }

    /// Classification data: the first `⌊train_frac·len⌋` sequences train.
    pub fn from_labeled(set: &LabeledSet, train_frac: f64, normalize: bool) -> Result<Self> {
        let Some(first) = set.sequences.first() else {
            return Err(FodeError::EmptyInput);
        };
        let (n, c) = first.shape();
        if set.sequences.iter().any(|s| s.shape() != (n, c)) {
            return Err(FodeError::InvalidArgument("labeled sequences differ in length".into()));
        }
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(FodeError::InvalidArgument("train_frac must lie in (0, 1)".into()));
        }
        let split = (train_frac * set.sequences.len() as f64).floor() as usize;
        if split == 0 {
            return Err(FodeError::InvalidArgument("training split is empty".into()));
        }
        let normalizer = if normalize {
            Some(Normalizer::fit(&set.sequences[..split].iter().collect::<Vec<_>>())?)
        } else {
            None
        };
        let nr = normalizer.as_ref();
        Ok(TrainData {
            train: Split {
                inputs: flatten(&set.sequences[..split], nr)?,
                labels: Labels::Classes(set.labels[..split].to_vec()),
            },
            test: Split {
                inputs: flatten(&set.sequences[split..], nr)?,
                labels: Labels::Classes(set.labels[split..].to_vec()),
            },
            window_len: n,
            channels: c,
            classes: Some(set.n_classes()),
            normalizer,
        })
    }

    /// A freshly initialised model for this data under `cfg`.
    pub fn init_model(&self, cfg: &TrainConfig) -> Result<FodeModel> {
        let mut m = FodeModel::new(cfg.model_config(self.window_len, self.channels, self.classes), cfg.seed)?;
        m.normalizer = self.normalizer.clone();
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub seconds: Vec<f64>,
    /// `K` at the start of each epoch, when requested.
    #[serde(skip)]
    pub k_snapshots: Vec<Matrix>,
    pub lr_halvings: usize,
    pub best_epoch: Option<usize>,
    pub initial_train_loss: Option<f64>,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,test_loss,seconds")?;
        for e in 0..self.epochs() {
            let test = self.test_loss.get(e).copied().unwrap_or(f64::NAN);
            writeln!(w, "{e},{:?},{:?},{:?}", self.train_loss[e], test, self.seconds[e])?;
        }
        Ok(())
    }

    pub fn write_k_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,row,col,value")?;
        for (e, k) in self.k_snapshots.iter().enumerate() {
            for r in 0..k.rows() {
                for c in 0..k.cols() {
                    writeln!(w, "{e},{r},{c},{:?}", k[(r, c)])?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub model: FodeModel,
    /// Parameters with the lowest per-epoch test loss (the final model
    /// when the test split is empty).
    pub best: FodeModel,
    pub history: TrainHistory,
}

fn split_loss(model: &FodeModel, split: &Split, solver: &SolverConfig) -> Result<f64> {
    batch_loss(model, &split.inputs, split.labels.as_targets(), solver)
}

/// Mean loss over `split`, evaluated in chunks of `chunk` rows.
pub fn mean_loss(model: &FodeModel, split: &Split, solver: &SolverConfig, chunk: usize) -> Result<f64> {
    if split.is_empty() {
        return Err(FodeError::EmptyInput);
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut total = 0.0;
    for c in idx.chunks(chunk.max(1)) {
        total += split_loss(model, &split.gather(c), solver)? * c.len() as f64;
    }
    Ok(total / split.len() as f64)
}

/// Mini-batch Adam over the perceptron, the filter and (if present) the
/// classification head.
pub fn train(model_init: &FodeModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(FodeError::InvalidArgument("training split is empty".into()));
    }
    match (&data.train.labels, cfg.loss) {
        (Labels::Windows(_), LossKind::Mse) | (Labels::Classes(_), LossKind::CrossEntropy) => {}
        _ => return Err(FodeError::Config("loss does not match the dataset's supervision".into())),
    }
    let mut model = model_init.clone();
    model.validate()?;
    let mut adam_cfg = cfg.adam();
    let mut adam = AdamState::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let have_test = !data.test.is_empty();
    let eval_chunk = 256;

    if cfg.epochs > 0 {
        history.initial_train_loss = Some(mean_loss(&model, &data.train, &cfg.solver, eval_chunk)?);
    }

    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch = 0;
    while epoch < cfg.epochs {
        let started = Instant::now();
        let (saved_model, saved_adam, saved_rng) = (model.clone(), adam.clone(), rng.clone());
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut restart = false;
        for batch in order.chunks(cfg.batch_size) {
            let b = data.train.gather(batch);
            let (loss, grads) = loss_and_grads(&model, &b.inputs, b.labels.as_targets(), &cfg.solver)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(FodeError::Diverged {
                    epoch,
                    reason: format!("non-finite loss {loss}"),
                    last_good: Box::new(saved_model),
                });
            }
            if loss > cfg.divergence_threshold && history.lr_halvings == 0 {
                restart = true;
                break;
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam, &adam_cfg)?;
            sum += loss * batch.len() as f64;
        }
        if restart {
            model = saved_model;
            adam = saved_adam;
            rng = saved_rng;
            adam_cfg.lr /= 2.0;
            history.lr_halvings += 1;
            continue;
        }
        if cfg.snapshot_k {
            history.k_snapshots.push(saved_model.filter_k.clone());
        }
        history.train_loss.push(sum / data.train.len() as f64);
        if have_test {
            let test = mean_loss(&model, &data.test, &cfg.solver, eval_chunk)?;
            history.test_loss.push(test);
            if test < best_loss {
                best_loss = test;
                best = model.clone();
                history.best_epoch = Some(epoch);
            }
        }
        history.seconds.push(started.elapsed().as_secs_f64());
        epoch += 1;
    }
    if !have_test {
        best = model.clone();
    }
    Ok(TrainOutcome { model, best, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mape: f64,
    pub n_test: usize,
}

/// Predicted windows in original units for every test pair.
pub fn predict_test_windows(model: &FodeModel, data: &TrainData, solver: &SolverConfig) -> Result<Vec<Matrix>> {
    let pred = predict_batch(model, &data.test.inputs, solver)?;
    let (n, c) = (data.window_len, data.channels);
    (0..pred.rows())
        .map(|r| {
            let w = Matrix::from_vec(n, c, pred.row(r).to_vec())?;
            Ok(match &model.normalizer {
                Some(nm) => nm.denormalize(&w),
                None => w,
            })
        })
        .collect()
}

/// Metrics in original units for forecasting data.
///
/// `windowed` predicts every test window from its true input. `rollout`
/// starts from the first test input and feeds each prediction back as the
/// next input, stepping one full window at a time, until the series ends.
pub fn evaluate(model: &FodeModel, ds: &WindowDataset, mode: EvalMode, solver: &SolverConfig) -> Result<Metrics> {
    if ds.n_test() == 0 {
        return Err(FodeError::InvalidArgument("test split is empty".into()));
    }
    let (te_in, te_out) = ds.test();
    let (preds, targets): (Vec<Matrix>, Vec<Matrix>) = match mode {
        EvalMode::Windowed => {
            let norm_in: Vec<Matrix> = te_in
                .iter()
                .map(|w| match &model.normalizer {
                    Some(n) => n.normalize(w),
                    None => w.clone(),
                })
                .collect();
            let x = Matrix::stack_flat(&norm_in.iter().collect::<Vec<_>>())?;
            let pred = predict_batch(model, &x, solver)?;
            let (n, c) = (model.window_len(), model.channels());
            let preds = (0..pred.rows())
                .map(|r| {
                    let w = Matrix::from_vec(n, c, pred.row(r).to_vec())?;
                    Ok(match &model.normalizer {
                        Some(nm) => nm.denormalize(&w),
                        None => w,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (preds, te_out.to_vec())
        }
        EvalMode::Rollout => {
            let n = te_in[0].rows();
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            let mut current = te_in[0].clone();
            let mut i = 0;
            while i < te_out.len() {
                let p = crate::pipeline::predict_window(model, &current, solver)?;
                preds.push(p.clone());
                targets.push(te_out[i].clone());
                current = p;
                i += n;
            }
            (preds, targets)
        }
    };
    let pred = Matrix::stack_flat(&preds.iter().collect::<Vec<_>>())?;
    let target = Matrix::stack_flat(&targets.iter().collect::<Vec<_>>())?;
    Ok(Metrics {
        mse: mse_loss(&pred, &target)?,
        mape: mape(&pred, &target, MAPE_EPS)?,
        n_test: ds.n_test(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub cross_entropy: f64,
    pub accuracy: f64,
    pub n_test: usize,
}

pub fn evaluate_classifier(model: &FodeModel, data: &TrainData, solver: &SolverConfig) -> Result<ClassMetrics> {
    let Labels::Classes(labels) = &data.test.labels else {
        return Err(FodeError::InvalidArgument("data has no class labels".into()));
    };
    if labels.is_empty() {
        return Err(FodeError::InvalidArgument("test split is empty".into()));
    }
    let logits = predict_logits(model, &data.test.inputs, solver)?;
    let mut ce = 0.0;
    let mut correct = 0usize;
    for (r, &l) in labels.iter().enumerate() {
        let row = logits.row(r);
        ce += cross_entropy(row, l)?;
        let arg = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        correct += usize::from(arg == l);
    }
    Ok(ClassMetrics {
        cross_entropy: ce / labels.len() as f64,
        accuracy: correct as f64 / labels.len() as f64,
        n_test: labels.len(),
    })
}
