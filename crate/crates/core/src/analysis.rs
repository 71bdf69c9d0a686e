//! Lipschitz certification, hidden-state spectrograms and filter reports.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, GradCheckReport};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::model::{FieldKind, FodeModel};
use crate::odeint::{solve_sampled, SolverConfig};
use crate::pipeline::loss_and_grads;
use crate::spectral::{half_len, stft, Spectrogram};
use crate::trainer::{TrainHistory, TrainData};

pub const POWER_ITERATIONS: usize = 30;
pub const SPECTRAL_NORM_INFLATION: f64 = 1.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub l_fft: f64,
    pub l_ifft: f64,
    pub l_pack: f64,
    pub l_unpack: f64,
    pub l_g: f64,
    pub l_f_bound: f64,
    pub empirical_max_ratio: f64,
    pub n_pairs: usize,
}

impl LipschitzReport {
    pub fn passed(&self) -> bool {
        self.l_f_bound >= self.empirical_max_ratio
    }
}

/// Largest singular value by power iteration on `AᵀA`, starting from a
/// fixed pseudo-random vector. Always a lower estimate of the exact value.
pub fn power_iteration_norm(a: &Matrix, steps: usize) -> f64 {
    let (m, n) = a.shape();
    if m == 0 || n == 0 || a.max_abs() == 0.0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut av = vec![0.0; m];
    let mut sigma = 0.0;
    for _ in 0..steps.max(1) {
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            break;
        }
        v.iter_mut().for_each(|x| *x /= nv);
        for (r, o) in av.iter_mut().enumerate() {
            *o = a.row(r).iter().zip(&v).map(|(w, x)| w * x).sum();
        }
        sigma = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &s) in av.iter().enumerate() {
            for (x, w) in v.iter_mut().zip(a.row(r)) {
                *x += w * s;
            }
        }
    }
    if sigma > 0.0 {
        sigma = v.iter().map(|x| x * x).sum::<f64>().sqrt() / sigma;
    }
    sigma
}

/// Spectral norm bound used for the perceptron: power iteration with a
/// fixed relative inflation.
pub fn spectral_norm_bound(a: &Matrix) -> f64 {
    SPECTRAL_NORM_INFLATION * power_iteration_norm(a, POWER_ITERATIONS)
}

/// Upper bound on the field's Lipschitz constant in `x` (Frobenius norm on
/// the `N × C` state). Empirical fields are left at zero.
///
/// The spectral chain contributes `‖FFT‖ = √N` (unnormalised forward
/// transform), `‖IFFT‖ = 1/√N`, `1` for packing (a coordinate selection of
/// the half spectrum) and `√2` for the reconstruction (every bin other
/// than DC and Nyquist appears twice in the full spectrum). For `N = 2`
/// every bin is self-paired, so the reconstruction constant is 1.
pub fn lipschitz_bound(model: &FodeModel) -> Result<LipschitzReport> {
    model.validate()?;
    let n = model.window_len();
    let mlp = &model.mlp;
    let w1 = if model.config.time_input {
        let cols = mlp.w1.cols() - 1;
        Matrix::from_fn(mlp.w1.rows(), cols, |r, c| mlp.w1[(r, c)])
    } else {
        mlp.w1.clone()
    };
    let l_g = spectral_norm_bound(&w1) * spectral_norm_bound(&mlp.w2) * spectral_norm_bound(&mlp.w3);
    let (l_fft, l_ifft, l_pack, l_unpack) = match model.config.kind {
        FieldKind::Fode => {
            let paired = half_len(n) > if n % 2 == 0 { 2 } else { 1 };
            let unpack = if paired { 2f64.sqrt() } else { 1.0 };
            ((n as f64).sqrt(), 1.0 / (n as f64).sqrt(), 1.0, unpack)
        }
        FieldKind::Node => (1.0, 1.0, 1.0, 1.0),
    };
    Ok(LipschitzReport {
        l_fft,
        l_ifft,
        l_pack,
        l_unpack,
        l_g,
        l_f_bound: l_ifft * l_unpack * l_g * l_pack * l_fft,
        empirical_max_ratio: 0.0,
        n_pairs: 0,
    })
}

/// Max of `‖f(x) − f(x+δ)‖ / ‖δ‖` over `n_pairs` random pairs at `t = 0`.
/// Base points are standard normal; `δ` has a uniformly random direction
/// and length uniform in `(0, radius]`.
pub fn empirical_lipschitz(model: &FodeModel, n_pairs: usize, radius: f64, seed: u64) -> Result<f64> {
    if n_pairs == 0 {
        return Err(FodeError::InvalidArgument("n_pairs must be >= 1".into()));
    }
    if !(radius > 0.0) {
        return Err(FodeError::InvalidArgument("radius must be > 0".into()));
    }
    let d = model.state_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(n_pairs, d, |_, _| rng.sample(StandardNormal));
    let mut y = x.clone();
    for r in 0..n_pairs {
        let dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let len = radius * (1.0 - rng.gen::<f64>());
        for (v, u) in y.row_mut(r).iter_mut().zip(&dir) {
            *v += len * u / norm;
        }
    }
    let (fx, fy) = (model.field_batch(&x, 0.0)?, model.field_batch(&y, 0.0)?);
    let mut best = 0.0f64;
    for r in 0..n_pairs {
        let num: f64 = fx.row(r).iter().zip(fy.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = x.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b).powi(2)).sum();
        if den > 0.0 {
            best = best.max((num / den).sqrt());
        }
    }
    Ok(best)
}

/// Bound plus empirical check in one report.
pub fn lipschitz_report(model: &FodeModel, n_pairs: usize, radius: f64, seed: u64) -> Result<LipschitzReport> {
    let mut r = lipschitz_bound(model)?;
    r.empirical_max_ratio = empirical_lipschitz(model, n_pairs, radius, seed)?;
    r.n_pairs = n_pairs;
    Ok(r)
}

pub const SPECTROGRAM_SAMPLES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub samples: usize,
    pub window_len: usize,
    pub hop: usize,
    /// Window row of the tracked state entry.
    pub row: Option<usize>,
    pub channel: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig {
            samples: SPECTROGRAM_SAMPLES,
            window_len: crate::spectral::DEFAULT_STFT_WINDOW,
            hop: crate::spectral::DEFAULT_STFT_HOP,
            row: None,
            channel: 0,
        }
    }
}

/// The trajectory of one state entry, `x(t)[row, channel]`, on a uniform
/// grid of `cfg.samples` points over `[solver.t0, solver.t1]`. `window`
/// is in model units. The row defaults to the last window row.
pub fn hidden_trajectory(
    model: &FodeModel,
    window: &Matrix,
    solver: &SolverConfig,
    cfg: &SpectrogramConfig,
) -> Result<Vec<f64>> {
    let (n, c) = (model.window_len(), model.channels());
    window.ensure_shape("spectrogram window", n, c)?;
    let row = cfg.row.unwrap_or(n - 1);
    if row >= n || cfg.channel >= c {
        return Err(FodeError::InvalidArgument(format!(
            "state entry ({row}, {}) outside {n}x{c}",
            cfg.channel
        )));
    }
    if cfg.samples < 2 {
        return Err(FodeError::InvalidArgument("need at least 2 samples".into()));
    }
    let span = solver.t1 - solver.t0;
    let times: Vec<f64> = (0..cfg.samples)
        .map(|i| solver.t0 + span * i as f64 / (cfg.samples - 1) as f64)
        .collect();
    let x0 = window.clone().reshaped(1, model.state_dim())?;
    let res = solve_sampled(|t, s| model.field_batch(s, t), &x0, &times, solver)?;
    let traj = res.trajectory.unwrap_or_default();
    Ok(traj.iter().map(|(_, s)| s[(0, row * c + cfg.channel)]).collect())
}

/// One spectrogram per checkpoint of the tracked state entry.
pub fn hidden_spectrogram(
    checkpoints: &[FodeModel],
    window: &Matrix,
    solver: &SolverConfig,
    cfg: &SpectrogramConfig,
) -> Result<Vec<Spectrogram>> {
    let Some(first) = checkpoints.first() else {
        return Err(FodeError::EmptyInput);
    };
    for m in checkpoints {
        m.validate()?;
        if m.config != first.config {
            return Err(FodeError::InvalidArgument("checkpoints differ in architecture".into()));
        }
    }
    checkpoints
        .iter()
        .map(|m| stft(&hidden_trajectory(m, window, solver, cfg)?, cfg.window_len, cfg.hop))
        .collect()
}

/// Shannon entropy (nats) of the bin energies summed over frames and
/// normalised to a distribution; 0 for an all-zero spectrogram.
pub fn spectral_entropy(s: &Spectrogram) -> f64 {
    let mut energy = vec![0.0; s.n_bins()];
    for f in 0..s.n_frames() {
        for (e, m) in energy.iter_mut().zip(s.frames.row(f)) {
            *e += m * m;
        }
    }
    let total: f64 = energy.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    -energy
        .iter()
        .filter(|&&e| e > 0.0)
        .map(|e| {
            let p = e / total;
            p * p.ln()
        })
        .sum::<f64>()
}

/// `epoch,row,col,value,train_loss` for every recorded filter snapshot.
pub fn k_evolution_report<W: Write>(history: &TrainHistory, mut w: W) -> Result<usize> {
    if history.k_snapshots.is_empty() {
        return Err(FodeError::InvalidArgument("history has no filter snapshots".into()));
    }
    writeln!(w, "epoch,row,col,value,train_loss")?;
    let mut rows = 0;
    for (e, k) in history.k_snapshots.iter().enumerate() {
        let loss = history.train_loss.get(e).copied().unwrap_or(f64::NAN);
        for r in 0..k.rows() {
            for c in 0..k.cols() {
                writeln!(w, "{e},{r},{c},{:?},{loss:?}", k[(r, c)])?;
                rows += 1;
            }
        }
    }
    Ok(rows)
}

/// Central-difference check of the full training loss on the first
/// training pair of `data`, over every model tensor.
pub fn loss_gradcheck(model: &FodeModel, data: &TrainData, solver: &SolverConfig, eps: f64) -> Result<GradCheckReport> {
    if data.train.is_empty() {
        return Err(FodeError::EmptyInput);
    }
    let x = Matrix::from_vec(1, data.train.inputs.cols(), data.train.inputs.row(0).to_vec())?;
    let labels = match &data.train.labels {
        crate::trainer::Labels::Windows(m) => crate::trainer::Labels::Windows(Matrix::from_vec(1, m.cols(), m.row(0).to_vec())?),
        crate::trainer::Labels::Classes(c) => crate::trainer::Labels::Classes(vec![c[0]]),
    };
    pair_gradcheck(model, &x, &labels, solver, eps)
}

/// Central-difference check of the loss on a single input row.
pub fn pair_gradcheck(
    model: &FodeModel,
    x: &Matrix,
    labels: &crate::trainer::Labels,
    solver: &SolverConfig,
    eps: f64,
) -> Result<GradCheckReport> {
    let params: Vec<Matrix> = model.params().into_iter().cloned().collect();
    let targets = labels.as_targets();
    let mut work = model.clone();
    grad_check(
        |ps| {
            work.set_params(ps)?;
            loss_and_grads(&work, x, targets, solver)
        },
        &params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MlpParams;
    use crate::model::{info_len, ModelConfig};

    fn identity_model(n: usize, c: usize) -> FodeModel {
        let f = info_len(n, c);
        let cfg = ModelConfig {
            hidden: f,
            ..ModelConfig::forecasting(FieldKind::Fode, n, c)
        };
        let mut m = FodeModel::zeroed(cfg).unwrap();
        m.mlp = MlpParams::shifted_identity(f, 1e3);
        m
    }

    #[test]
    fn zero_model_bound_and_ratio_are_zero() {
        let m = FodeModel::zeroed(ModelConfig::forecasting(FieldKind::Fode, 10, 3)).unwrap();
        assert_eq!(lipschitz_bound(&m).unwrap().l_f_bound, 0.0);
        assert_eq!(empirical_lipschitz(&m, 50, 1.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn identity_chain() {
        let m = identity_model(4, 1);
        let r = lipschitz_report(&m, 200, 0.5, 3).unwrap();
        assert_eq!((r.l_fft, r.l_ifft, r.l_pack), (2.0, 0.5, 1.0));
        assert!((r.l_g - 1.01f64.powi(3)).abs() < 1e-9);
        assert!((r.l_f_bound - 2f64.sqrt() * 1.01f64.powi(3)).abs() < 1e-9);
        assert!((r.empirical_max_ratio - 1.0).abs() < 1e-9);
        assert!(r.passed());
    }

    /// A perceptron that copies the DC coefficient into the real part of
    /// bin 1 turns a constant signal into a cosine of twice its norm per
    /// bin pair, so the reconstruction's √2 is attained.
    #[test]
    fn reconstruction_factor_is_attained() {
        let n = 4;
        let f = info_len(n, 1);
        let mut m = identity_model(n, 1);
        let mut p = Matrix::zeros(f, f);
        p[(1, 0)] = 1.0;
        m.mlp.w3 = p;
        m.mlp.b3 = Matrix::zeros(1, f);
        m.mlp.b1 = Matrix::zeros(1, f);
        let x = Matrix::filled(1, n, 1.0);
        let fx = m.field_batch(&x, 0.0).unwrap();
        let f0 = m.field_batch(&Matrix::zeros(1, n), 0.0).unwrap();
        let num = fx.as_slice().iter().zip(f0.as_slice()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let observed = num / x.frobenius_norm();
        assert!((observed - 2f64.sqrt()).abs() < 1e-12);
        let bound = lipschitz_bound(&m).unwrap();
        assert!(bound.l_f_bound >= observed);
        assert!(bound.l_f_bound / bound.l_unpack < observed);
    }

    #[test]
    fn random_models_respect_bound() {
        for seed in 0..8 {
            for kind in [FieldKind::Fode, FieldKind::Node] {
                let m = FodeModel::new(ModelConfig::forecasting(kind, 10, 3), seed).unwrap();
                let r = lipschitz_report(&m, 300, 1.0, seed).unwrap();
                assert!(r.l_f_bound.is_finite() && r.l_f_bound > 0.0);
                assert!(r.passed(), "{kind} seed {seed}: {r:?}");
            }
        }
    }

    #[test]
    fn power_iteration_hits_known_norms() {
        let d = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, -5.0]]);
        assert!((power_iteration_norm(&d, 30) - 5.0).abs() < 1e-12);
        assert_eq!(power_iteration_norm(&Matrix::zeros(3, 4), 30), 0.0);
    }

    #[test]
    fn zero_model_spectrogram_is_constant() {
        let m = FodeModel::zeroed(ModelConfig::forecasting(FieldKind::Fode, 10, 3)).unwrap();
        let w = Matrix::from_fn(10, 3, |r, c| (r + c) as f64 * 0.1);
        let s = hidden_spectrogram(&[m.clone(), m], &w, &SolverConfig::rk4(8), &SpectrogramConfig::default()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0], s[1]);
        let sp = &s[0];
        assert_eq!(sp.n_frames(), (128 - 64) / 16 + 1);
        for f in 0..sp.n_frames() {
            assert_eq!(sp.frames.row(f), sp.frames.row(0));
            assert!(sp.frames.row(f)[2..].iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn mismatched_checkpoints_rejected() {
        let a = FodeModel::zeroed(ModelConfig::forecasting(FieldKind::Fode, 10, 3)).unwrap();
        let b = FodeModel::zeroed(ModelConfig::forecasting(FieldKind::Node, 10, 3)).unwrap();
        let w = Matrix::zeros(10, 3);
        assert!(hidden_spectrogram(&[a, b], &w, &SolverConfig::rk4(2), &SpectrogramConfig::default()).is_err());
    }

    #[test]
    fn k_report_counts_rows() {
        let h = TrainHistory {
            train_loss: vec![1.0, 0.5, 0.25],
            k_snapshots: vec![Matrix::zeros(10, 3); 3],
            ..TrainHistory::default()
        };
        let mut buf = Vec::new();
        assert_eq!(k_evolution_report(&h, &mut buf).unwrap(), 90);
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 91);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,0,0.0,1.0"));
        assert!(k_evolution_report(&TrainHistory::default(), Vec::new()).is_err());
    }
}
