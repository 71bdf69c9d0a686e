//! Synthetic series, windowing, and CSV import/export.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::odeint::{solve_sampled, SolverConfig};

/// Uniformly sampled multichannel series.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    /// `len(t) × C`.
    pub values: Matrix,
    pub names: Vec<String>,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, values: Matrix, names: Vec<String>) -> Result<Self> {
        if t.is_empty() {
            return Err(FodeError::EmptyInput);
        }
        if values.rows() != t.len() {
            return Err(FodeError::shape("series rows", t.len(), values.rows()));
        }
        if names.len() != values.cols() {
            return Err(FodeError::shape("channel names", values.cols(), names.len()));
        }
        if !values.is_finite() || t.iter().any(|v| !v.is_finite()) {
            return Err(FodeError::NonFinite("time series".into()));
        }
        if t.len() > 1 {
            let dt = (t[t.len() - 1] - t[0]) / (t.len() - 1) as f64;
            if !(dt > 0.0) {
                return Err(FodeError::InvalidArgument("time grid must increase".into()));
            }
            let tol = 1e-12 * t[t.len() - 1].abs().max(t[0].abs()).max(1.0);
            for w in t.windows(2) {
                if ((w[1] - w[0]) - dt).abs() > tol {
                    return Err(FodeError::InvalidArgument(format!(
                        "time grid is not uniform near t={}",
                        w[0]
                    )));
                }
            }
        }
        Ok(TimeSeries { t, values, names })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..start+len` as a `len × C` matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        let c = self.channels();
        Matrix::from_vec(len, c, self.values.as_slice()[start * c..(start + len) * c].to_vec())
            .expect("slice within bounds")
    }

    /// Writes `t,<names...>` CSV. Values use the shortest representation
    /// that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,{}", self.names.join(","))?;
        for (i, t) in self.t.iter().enumerate() {
            write!(w, "{t:?}")?;
            for v in self.values.row(i) {
                write!(w, ",{v:?}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    #[serde(rename = "periodic3d-a")]
    Periodic3dA,
    #[serde(rename = "periodic3d-b")]
    Periodic3dB,
    #[serde(rename = "unstable-oscillator")]
    UnstableOscillator,
    #[serde(rename = "forced-vibration")]
    ForcedVibration,
    #[serde(rename = "lotka-volterra")]
    LotkaVolterra,
    #[serde(rename = "glycolytic")]
    Glycolytic,
}

impl System {
    pub const ALL: [System; 6] = [
        System::Periodic3dA,
        System::Periodic3dB,
        System::UnstableOscillator,
        System::ForcedVibration,
        System::LotkaVolterra,
        System::Glycolytic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Periodic3dA => "periodic3d-a",
            System::Periodic3dB => "periodic3d-b",
            System::UnstableOscillator => "unstable-oscillator",
            System::ForcedVibration => "forced-vibration",
            System::LotkaVolterra => "lotka-volterra",
            System::Glycolytic => "glycolytic",
        }
    }

    /// Generates the series. `amp` applies to the periodic systems,
    /// `noise_sigma` and `seed` to the unstable oscillator.
    pub fn generate(self, amp: f64, noise_sigma: f64, seed: u64) -> Result<TimeSeries> {
        match self {
            System::Periodic3dA => gen_periodic3d(Variant::A, amp),
            System::Periodic3dB => gen_periodic3d(Variant::B, amp),
            System::UnstableOscillator => gen_unstable_oscillator(noise_sigma, seed),
            System::ForcedVibration => gen_forced_vibration(),
            System::LotkaVolterra => gen_lotka_volterra(),
            System::Glycolytic => gen_glycolytic(),
        }
    }
}

impl FromStr for System {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| FodeError::UnknownVariant {
                kind: "system",
                value: s.into(),
            })
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + i as f64 * step).collect()
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Three channels on 1000 points over `[0, 20]`.
pub fn gen_periodic3d(variant: Variant, amp: f64) -> Result<TimeSeries> {
    if !(amp >= 0.0) {
        return Err(FodeError::InvalidArgument("amp must be >= 0".into()));
    }
    let t = linspace(0.0, 20.0, 1000);
    let values = Matrix::from_fn(t.len(), 3, |i, c| {
        let t = t[i];
        let hs = amp * (20.0 * t).sin();
        let hc = amp * (20.0 * t).cos();
        match (variant, c) {
            (Variant::A, 0) => t.sin() + hs,
            (Variant::A, 1) => t.cos() + hc,
            (Variant::A, _) => (2.0 * t).sin() + hs,
            (Variant::B, 0) => (2.0 * t).sin() + hs,
            (Variant::B, 1) => (2.0 * t).cos() + hc,
            (Variant::B, _) => (5.0 * t).cos() + hs,
        }
    });
    TimeSeries::new(t, values, names(&["x", "y", "z"]))
}

pub fn unstable_oscillator_clean(t: f64) -> f64 {
    0.1 * (0.5 * t).exp() * ((std::f64::consts::PI * t + 1.0).cos() + (std::f64::consts::PI * t - 1.0).sin())
}

/// Growing oscillation plus seeded Gaussian noise, `t = 0, 0.01, … ≤ 2π`.
pub fn gen_unstable_oscillator(noise_sigma: f64, seed: u64) -> Result<TimeSeries> {
    if !(noise_sigma >= 0.0) {
        return Err(FodeError::InvalidArgument("noise sigma must be >= 0".into()));
    }
    let n = (2.0 * std::f64::consts::PI / 0.01).floor() as usize + 1;
    let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| FodeError::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Matrix::from_fn(n, 1, |i, _| {
        let eta = if noise_sigma > 0.0 { normal.sample(&mut rng) } else { 0.0 };
        unstable_oscillator_clean(t[i]) + eta
    });
    TimeSeries::new(t, values, names(&["x"]))
}

const GEN_RTOL: f64 = 1e-10;
const GEN_ATOL: f64 = 1e-12;

fn integrate<F>(field: F, x0: &[f64], t: Vec<f64>, rtol: f64, channel_names: &[&str]) -> Result<TimeSeries>
where
    F: Fn(f64, &[f64]) -> Vec<f64>,
{
    let cfg = SolverConfig {
        max_steps: 1_000_000,
        ..SolverConfig::dopri5(rtol, GEN_ATOL)
    };
    let x = Matrix::row_vector(x0.to_vec());
    let r = solve_sampled(|tt, s| Ok(Matrix::row_vector(field(tt, s.as_slice()))), &x, &t, &cfg)?;
    let traj = r.trajectory.expect("sampled solve records trajectory");
    let c = x0.len();
    let data: Vec<f64> = traj.iter().flat_map(|(_, s)| s.as_slice().to_vec()).collect();
    TimeSeries::new(t, Matrix::from_vec(traj.len(), c, data)?, names(channel_names))
}

pub fn forced_vibration_field(t: f64, s: &[f64]) -> Vec<f64> {
    let (zeta, wn, f0, omega) = (-0.1, 2.0 * std::f64::consts::PI, 0.1, 4.0);
    vec![s[1], -2.0 * zeta * wn * s[1] - wn * wn * s[0] + f0 * (omega * t).cos()]
}

pub fn lotka_volterra_field(_: f64, s: &[f64]) -> Vec<f64> {
    let (alpha, beta, gamma, delta) = (0.1, 0.02, 0.3, 0.01);
    vec![alpha * s[0] - beta * s[0] * s[1], delta * s[0] * s[1] - gamma * s[1]]
}

pub fn glycolytic_field(_: f64, s: &[f64]) -> Vec<f64> {
    let (a, b) = (0.75, 0.1);
    let q = s[0] * s[1] * s[1];
    vec![a - b * s[0] - q, b * s[0] - s[1] + q]
}

/// `(x, v)` on `t = 0, 0.01, …, 5`.
pub fn gen_forced_vibration() -> Result<TimeSeries> {
    gen_forced_vibration_with(GEN_RTOL)
}

pub fn gen_forced_vibration_with(rtol: f64) -> Result<TimeSeries> {
    let t: Vec<f64> = (0..=500).map(|i| i as f64 * 0.01).collect();
    integrate(forced_vibration_field, &[0.5, 0.0], t, rtol, &["x", "v"])
}

/// Prey/predator on 500 points over `[0, 100]`.
pub fn gen_lotka_volterra() -> Result<TimeSeries> {
    gen_lotka_volterra_with(GEN_RTOL)
}

pub fn gen_lotka_volterra_with(rtol: f64) -> Result<TimeSeries> {
    integrate(lotka_volterra_field, &[40.0, 2.0], linspace(0.0, 100.0, 500), rtol, &["x", "y"])
}

/// Substrate/product on 1000 points over `[0, 100]`.
pub fn gen_glycolytic() -> Result<TimeSeries> {
    gen_glycolytic_with(GEN_RTOL)
}

pub fn gen_glycolytic_with(rtol: f64) -> Result<TimeSeries> {
    integrate(glycolytic_field, &[1.0, 1.0], linspace(0.0, 100.0, 1000), rtol, &["x1", "x2"])
}

/// Paired input/target windows with a chronological split.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    pub inputs: Vec<Matrix>,
    pub targets: Vec<Matrix>,
    /// Source row where each pair's input starts.
    pub starts: Vec<usize>,
    /// Pairs `0..split_index` are train, the rest test.
    pub split_index: usize,
}

impl WindowDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn n_train(&self) -> usize {
        self.split_index
    }

    pub fn n_test(&self) -> usize {
        self.len() - self.split_index
    }

    pub fn train(&self) -> (&[Matrix], &[Matrix]) {
        (&self.inputs[..self.split_index], &self.targets[..self.split_index])
    }

    pub fn test(&self) -> (&[Matrix], &[Matrix]) {
        (&self.inputs[self.split_index..], &self.targets[self.split_index..])
    }
}

/// Stride-1 windows; the first `⌊train_frac·count⌋` are train.
pub fn window_split(series: &TimeSeries, in_len: usize, out_len: usize, train_frac: f64) -> Result<WindowDataset> {
    if in_len == 0 || out_len == 0 {
        return Err(FodeError::InvalidArgument("window lengths must be >= 1".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(FodeError::InvalidArgument("train_frac must lie in (0, 1)".into()));
    }
    let total = in_len + out_len;
    if series.len() < total {
        return Err(FodeError::TooShort {
            needed: total,
            got: series.len(),
        });
    }
    let count = series.len() - total + 1;
    let split_index = (train_frac * count as f64).floor() as usize;
    let inputs = (0..count).map(|i| series.slice_rows(i, in_len)).collect();
    let targets = (0..count).map(|i| series.slice_rows(i + in_len, out_len)).collect();
    Ok(WindowDataset {
        inputs,
        targets,
        starts: (0..count).collect(),
        split_index,
    })
}

/// Sequences with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    /// Each sequence is `len × 1`.
    pub sequences: Vec<Matrix>,
    pub labels: Vec<usize>,
    /// Distinct label values in ascending order; `labels` index into it.
    pub classes: Vec<i64>,
}

impl LabeledSet {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CsvData {
    Series(TimeSeries),
    Labeled(LabeledSet),
}

fn parse_cell(cell: &str, line: usize) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| FodeError::Csv {
        line,
        msg: format!("non-numeric cell `{}`", cell.trim()),
    })
}

/// Parses CSV text. Without a label column every column except `t`
/// becomes a channel (a missing `t` column gets `0, 1, …`). With a label
/// column each row is one univariate sequence formed by the remaining
/// non-`t` columns, and the label cell must be an integer.
pub fn parse_csv(text: &str, label_column: Option<&str>) -> Result<CsvData> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(FodeError::Csv {
            line: 1,
            msg: "missing header".into(),
        });
    };
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if cols.iter().any(|c| c.is_empty()) {
        return Err(FodeError::Csv {
            line: 1,
            msg: "empty column name in header".into(),
        });
    }
    if cols.iter().all(|c| c.parse::<f64>().is_ok()) {
        return Err(FodeError::Csv {
            line: 1,
            msg: "missing header (first row is numeric)".into(),
        });
    }
    let t_idx = cols.iter().position(|c| c == "t");
    let label_idx = match label_column {
        Some(name) => Some(cols.iter().position(|c| c == name).ok_or_else(|| FodeError::Csv {
            line: 1,
            msg: format!("no column named `{name}`"),
        })?),
        None => None,
    };
    let value_idx: Vec<usize> = (0..cols.len()).filter(|&i| Some(i) != t_idx && Some(i) != label_idx).collect();
    if value_idx.is_empty() {
        return Err(FodeError::Csv {
            line: 1,
            msg: "no value columns".into(),
        });
    }

    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (i, l) in lines {
        let cells: Vec<&str> = l.split(',').collect();
        if cells.len() != cols.len() {
            return Err(FodeError::Csv {
                line: i + 1,
                msg: format!("expected {} cells, found {}", cols.len(), cells.len()),
            });
        }
        rows.push((i + 1, cells));
    }
    if rows.is_empty() {
        return Err(FodeError::EmptyInput);
    }

    match label_idx {
        None => {
            let mut t = Vec::with_capacity(rows.len());
            let mut data = Vec::with_capacity(rows.len() * value_idx.len());
            for (r, (line, cells)) in rows.iter().enumerate() {
                t.push(match t_idx {
                    Some(ti) => parse_cell(cells[ti], *line)?,
                    None => r as f64,
                });
                for &j in &value_idx {
                    data.push(parse_cell(cells[j], *line)?);
                }
            }
            let values = Matrix::from_vec(rows.len(), value_idx.len(), data)?;
            let names = value_idx.iter().map(|&j| cols[j].clone()).collect();
            Ok(CsvData::Series(TimeSeries::new(t, values, names)?))
        }
        Some(li) => {
            let mut raw_labels = Vec::with_capacity(rows.len());
            let mut sequences = Vec::with_capacity(rows.len());
            for (line, cells) in &rows {
                let v = parse_cell(cells[li], *line)?;
                if v.fract() != 0.0 || !v.is_finite() {
                    return Err(FodeError::Csv {
                        line: *line,
                        msg: format!("label `{}` is not an integer", cells[li].trim()),
                    });
                }
                raw_labels.push(v as i64);
                let seq = value_idx
                    .iter()
                    .map(|&j| parse_cell(cells[j], *line))
                    .collect::<Result<Vec<_>>>()?;
                sequences.push(Matrix::from_vec(seq.len(), 1, seq)?);
            }
            let mut classes = raw_labels.clone();
            classes.sort_unstable();
            classes.dedup();
            let labels = raw_labels
                .iter()
                .map(|l| classes.binary_search(l).expect("label present"))
                .collect();
            Ok(CsvData::Labeled(LabeledSet {
                sequences,
                labels,
                classes,
            }))
        }
    }
}

/// Reads a CSV file; see [`parse_csv`].
pub fn load_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<CsvData> {
    parse_csv(&fs::read_to_string(path)?, label_column)
}

/// Reads a CSV file that must be an unlabeled series.
pub fn load_series_csv(path: impl AsRef<Path>) -> Result<TimeSeries> {
    match load_csv(path, None)? {
        CsvData::Series(s) => Ok(s),
        CsvData::Labeled(_) => unreachable!("no label column requested"),
    }
}
