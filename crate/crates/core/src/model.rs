//! The Fourier-domain vector field, the element-wise output filter, and
//! the plain time-domain baseline field.
//!
//! A state is an `N × C` window (N time steps, C channels). On the tape a
//! batch of states is a `B × (N·C)` matrix whose rows are windows
//! flattened row-major, so element `(n, c)` sits at column `n·C + c`.
//!
//! The Fourier field runs, per channel, a real FFT along the time axis,
//! packs the half spectrum as `[re(0..=N/2), im(0..=N/2)]`, concatenates
//! channels, maps the result through the perceptron, unpacks it back into
//! half spectra (zeroing the imaginary parts that must vanish for a real
//! signal) and inverts the FFT.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{MlpParams, MlpVars, RowLinearMap, Tape, Var};
use crate::error::{FodeError, Result};
use crate::matrix::Matrix;
use crate::spectral::{half_len, irfft_half_with_residue, rfft_half, FftPlan, HalfSpectrum};

/// Length of the packed real/imaginary vector for `c` channels of length `n`.
pub fn info_len(n: usize, c: usize) -> usize {
    c * 2 * half_len(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Fode,
    Node,
}

impl FromStr for FieldKind {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fode" => Ok(FieldKind::Fode),
            "node" => Ok(FieldKind::Node),
            _ => Err(FodeError::UnknownVariant {
                kind: "model kind",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Fode => "fode",
            FieldKind::Node => "node",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterInit {
    Zeros,
    Ones,
    Uniform,
    Xavier,
}

impl FilterInit {
    pub const ALL: [FilterInit; 4] = [
        FilterInit::Zeros,
        FilterInit::Ones,
        FilterInit::Uniform,
        FilterInit::Xavier,
    ];

    pub fn code(self) -> u8 {
        match self {
            FilterInit::Zeros => 0,
            FilterInit::Ones => 1,
            FilterInit::Uniform => 2,
            FilterInit::Xavier => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl FromStr for FilterInit {
    type Err = FodeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(FilterInit::Zeros),
            "ones" => Ok(FilterInit::Ones),
            "uniform" => Ok(FilterInit::Uniform),
            "xavier" => Ok(FilterInit::Xavier),
            _ => Err(FodeError::UnknownVariant {
                kind: "filter init scheme",
                value: s.into(),
            }),
        }
    }
}

impl fmt::Display for FilterInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterInit::Zeros => "zeros",
            FilterInit::Ones => "ones",
            FilterInit::Uniform => "uniform",
            FilterInit::Xavier => "xavier",
        })
    }
}

/// `N × C` filter matrix. `Uniform` draws from U(0, 1); `Xavier` from
/// U(−a, a) with `a = √(6/(N+C))`.
pub fn init_filter(n: usize, c: usize, scheme: FilterInit, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match scheme {
        FilterInit::Zeros => Matrix::zeros(n, c),
        FilterInit::Ones => Matrix::filled(n, c, 1.0),
        FilterInit::Uniform => Matrix::from_fn(n, c, |_, _| rng.gen::<f64>()),
        FilterInit::Xavier => {
            let a = (6.0 / (n + c) as f64).sqrt();
            Matrix::from_fn(n, c, |_, _| rng.gen_range(-a..a))
        }
    }
}

/// Element-wise product `K ⊙ x`.
pub fn apply_filter(k: &Matrix, x: &Matrix) -> Result<Matrix> {
    if k.shape() != x.shape() {
        return Err(FodeError::shape(
            "apply_filter",
            format!("{:?}", k.shape()),
            format!("{:?}", x.shape()),
        ));
    }
    let mut out = x.clone();
    for (o, &kv) in out.as_mut_slice().iter_mut().zip(k.as_slice()) {
        *o *= kv;
    }
    Ok(out)
}

/// Per channel: real parts of all retained bins, then imaginary parts;
/// channels concatenated in order.
pub fn pack_info(spectra: &[HalfSpectrum]) -> Result<Vec<f64>> {
    let Some(first) = spectra.first() else {
        return Err(FodeError::EmptyInput);
    };
    let n = first.full_length();
    let mut out = Vec::with_capacity(info_len(n, spectra.len()));
    for s in spectra {
        if s.full_length() != n {
            return Err(FodeError::shape("pack_info lengths", n, s.full_length()));
        }
        out.extend(s.values().iter().map(|v| v.re));
        out.extend(s.values().iter().map(|v| v.im));
    }
    Ok(out)
}

/// Inverse layout of [`pack_info`]; imaginary parts of bin 0 and (even
/// `n`) the Nyquist bin are set to zero so the spectra describe real
/// signals.
pub fn unpack_info(z: &[f64], n: usize, c: usize) -> Result<Vec<HalfSpectrum>> {
    if n < 2 {
        return Err(FodeError::TooShort { needed: 2, got: n });
    }
    if z.len() != info_len(n, c) {
        return Err(FodeError::shape("unpack_info", info_len(n, c), z.len()));
    }
    let h = half_len(n);
    z.chunks(2 * h)
        .map(|chunk| {
            let mut values: Vec<Complex64> =
                (0..h).map(|k| Complex64::new(chunk[k], chunk[h + k])).collect();
            zero_self_conjugate_bins(&mut values, n);
            HalfSpectrum::new(values, n)
        })
        .collect()
}

fn zero_self_conjugate_bins(values: &mut [Complex64], n: usize) {
    values[0].im = 0.0;
    if n % 2 == 0 {
        values[n / 2].im = 0.0;
    }
}

/// Per-row `x ↦ pack(rfft_half(x[:, c]) for c)` as a tape map.
pub struct SpectralPack {
    n: usize,
    c: usize,
    plan: FftPlan,
    /// `2h × n` real matrix of the per-channel map, for small `n`.
    dense: Option<Vec<f64>>,
}

/// Per-row `z ↦ irfft_half(unpack(z))` as a tape map. Its `apply`
/// reports the largest imaginary part discarded by the inverse FFT (zero
/// on the dense path, which is real by construction).
pub struct SpectralUnpack {
    n: usize,
    c: usize,
    plan: FftPlan,
    /// `n × 2h` real matrix of the per-channel map, for small `n`.
    dense: Option<Vec<f64>>,
}

/// Largest window length for which the spectral maps are applied as
/// dense per-channel matrices instead of FFTs.
pub const DENSE_SPECTRAL_MAX: usize = 64;

/// Row-major `out_dim × in_dim` matrix of a one-channel map, built by
/// applying it to unit vectors.
fn tabulate(in_dim: usize, out_dim: usize, f: impl Fn(&Matrix, &mut Matrix)) -> Vec<f64> {
    let eye = Matrix::identity(in_dim);
    let mut cols = Matrix::zeros(in_dim, out_dim);
    f(&eye, &mut cols);
    cols.transpose().into_vec()
}

/// `out[., base_o + j·so] += Σ_i m[j][i] · inp[., base_i + i·si]` for each
/// channel of every row.
#[allow(clippy::too_many_arguments)]
fn dense_rows(
    m: &[f64],
    rows_m: usize,
    cols_m: usize,
    input: &Matrix,
    output: &mut Matrix,
    c: usize,
    in_index: impl Fn(usize, usize) -> usize,
    out_index: impl Fn(usize, usize) -> usize,
) {
    let mut buf = vec![0.0; cols_m];
    for r in 0..input.rows() {
        let x = input.row(r);
        let out = output.row_mut(r);
        for ch in 0..c {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = x[in_index(ch, i)];
            }
            for j in 0..rows_m {
                let row = &m[j * cols_m..(j + 1) * cols_m];
                let v: f64 = row.iter().zip(&buf).map(|(a, b)| a * b).sum();
                out[out_index(ch, j)] += v;
            }
        }
    }
}

/// Transposed form of [`dense_rows`].
#[allow(clippy::too_many_arguments)]
fn dense_rows_t(
    m: &[f64],
    rows_m: usize,
    cols_m: usize,
    grad_out: &Matrix,
    grad_in: &mut Matrix,
    c: usize,
    in_index: impl Fn(usize, usize) -> usize,
    out_index: impl Fn(usize, usize) -> usize,
) {
    let mut acc = vec![0.0; cols_m];
    for r in 0..grad_out.rows() {
        let g = grad_out.row(r);
        let gi = grad_in.row_mut(r);
        for ch in 0..c {
            acc.fill(0.0);
            for j in 0..rows_m {
                let gj = g[out_index(ch, j)];
                if gj == 0.0 {
                    continue;
                }
                let row = &m[j * cols_m..(j + 1) * cols_m];
                for (a, w) in acc.iter_mut().zip(row) {
                    *a += w * gj;
                }
            }
            for (i, a) in acc.iter().enumerate() {
                gi[in_index(ch, i)] += a;
            }
        }
    }
}

impl SpectralPack {
    pub fn new(n: usize, c: usize) -> Result<Self> {
        Self::with_dense(n, c, n <= DENSE_SPECTRAL_MAX)
    }

    /// Forces the FFT path (`dense = false`) or the dense path.
    pub fn with_dense(n: usize, c: usize, dense: bool) -> Result<Self> {
        if n < 2 {
            return Err(FodeError::TooShort { needed: 2, got: n });
        }
        let mut p = SpectralPack {
            n,
            c: 1,
            plan: FftPlan::new(n)?,
            dense: None,
        };
        if dense {
            let m = tabulate(n, 2 * half_len(n), |i, o| {
                p.fft_apply(i, o);
            });
            p.dense = Some(m);
        }
        p.c = c;
        Ok(p)
    }
}

impl SpectralUnpack {
    pub fn new(n: usize, c: usize) -> Result<Self> {
        Self::with_dense(n, c, n <= DENSE_SPECTRAL_MAX)
    }

    pub fn with_dense(n: usize, c: usize, dense: bool) -> Result<Self> {
        if n < 2 {
            return Err(FodeError::TooShort { needed: 2, got: n });
        }
        let mut u = SpectralUnpack {
            n,
            c: 1,
            plan: FftPlan::new(n)?,
            dense: None,
        };
        if dense {
            let m = tabulate(2 * half_len(n), n, |i, o| {
                u.fft_apply(i, o);
            });
            u.dense = Some(m);
        }
        u.c = c;
        Ok(u)
    }
}

const CZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

impl SpectralPack {
    fn fft_apply(&self, input: &Matrix, output: &mut Matrix) -> f64 {
        let (n, c, h) = (self.n, self.c, half_len(self.n));
        let mut buf = vec![CZERO; n];
        let mut spec = vec![CZERO; n];
        for r in 0..input.rows() {
            let x = input.row(r);
            let out = output.row_mut(r);
            for ch in 0..c {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(x[i * c + ch], 0.0);
                }
                self.plan.transform(&buf, &mut spec, false);
                zero_self_conjugate_bins(&mut spec, n);
                let base = ch * 2 * h;
                for k in 0..h {
                    out[base + k] = spec[k].re;
                    out[base + h + k] = spec[k].im;
                }
            }
        }
        0.0
    }

    fn fft_adjoint(&self, grad_out: &Matrix, grad_in: &mut Matrix) {
        let (n, c, h) = (self.n, self.c, half_len(self.n));
        let mut buf = vec![CZERO; n];
        let mut back = vec![CZERO; n];
        for r in 0..grad_out.rows() {
            let g = grad_out.row(r);
            let gx = grad_in.row_mut(r);
            for ch in 0..c {
                let base = ch * 2 * h;
                buf.fill(CZERO);
                for k in 0..h {
                    buf[k] = Complex64::new(g[base + k], g[base + h + k]);
                }
                // Transpose of the truncated forward DFT: N · Re(IDFT).
                self.plan.transform(&buf, &mut back, true);
                for (i, v) in back.iter().enumerate() {
                    gx[i * c + ch] += n as f64 * v.re;
                }
            }
        }
    }
}

impl RowLinearMap for SpectralPack {
    fn in_dim(&self) -> usize {
        self.n * self.c
    }

    fn out_dim(&self) -> usize {
        info_len(self.n, self.c)
    }

    fn name(&self) -> &'static str {
        "spectral pack"
    }

    fn apply(&self, input: &Matrix, output: &mut Matrix) -> f64 {
        let (c, h) = (self.c, half_len(self.n));
        match &self.dense {
            Some(m) => {
                dense_rows(m, 2 * h, self.n, input, output, c, |ch, i| i * c + ch, |ch, j| ch * 2 * h + j);
                0.0
            }
            None => self.fft_apply(input, output),
        }
    }

    fn adjoint(&self, grad_out: &Matrix, grad_in: &mut Matrix) {
        let (c, h) = (self.c, half_len(self.n));
        match &self.dense {
            Some(m) => dense_rows_t(m, 2 * h, self.n, grad_out, grad_in, c, |ch, i| i * c + ch, |ch, j| ch * 2 * h + j),
            None => self.fft_adjoint(grad_out, grad_in),
        }
    }
}
impl SpectralUnpack {
    fn fft_apply(&self, input: &Matrix, output: &mut Matrix) -> f64 {
        let (n, c, h) = (self.n, self.c, half_len(self.n));
        let mut full = vec![CZERO; n];
        let mut time = vec![CZERO; n];
        let mut residue = 0.0f64;
        for r in 0..input.rows() {
            let z = input.row(r);
            let out = output.row_mut(r);
            for ch in 0..c {
                let base = ch * 2 * h;
                for k in 0..h {
                    full[k] = Complex64::new(z[base + k], z[base + h + k]);
                }
                zero_self_conjugate_bins(&mut full[..h], n);
                for k in 1..h {
                    if n - k > k {
                        full[n - k] = full[k].conj();
                    }
                }
                self.plan.transform(&full, &mut time, true);
                for (i, v) in time.iter().enumerate() {
                    out[i * c + ch] = v.re;
                    residue = residue.max(v.im.abs());
                }
            }
        }
        residue
    }

    fn fft_adjoint(&self, grad_out: &Matrix, grad_in: &mut Matrix) {
        let (n, c, h) = (self.n, self.c, half_len(self.n));
        let mut buf = vec![CZERO; n];
        let mut spec = vec![CZERO; n];
        let inv_n = 1.0 / n as f64;
        for r in 0..grad_out.rows() {
            let g = grad_out.row(r);
            let gz = grad_in.row_mut(r);
            for ch in 0..c {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = Complex64::new(g[i * c + ch], 0.0);
                }
                self.plan.transform(&buf, &mut spec, false);
                let base = ch * 2 * h;
                for k in 0..h {
                    let self_paired = k == 0 || (n % 2 == 0 && k == n / 2);
                    let weight = if self_paired { inv_n } else { 2.0 * inv_n };
                    gz[base + k] += weight * spec[k].re;
                    if !self_paired {
                        gz[base + h + k] += weight * spec[k].im;
                    }
                }
            }
        }
    }
}

impl RowLinearMap for SpectralUnpack {
    fn in_dim(&self) -> usize {
        info_len(self.n, self.c)
    }

    fn out_dim(&self) -> usize {
        self.n * self.c
    }

    fn name(&self) -> &'static str {
        "spectral unpack"
    }

    fn apply(&self, input: &Matrix, output: &mut Matrix) -> f64 {
        let (c, h) = (self.c, half_len(self.n));
        match &self.dense {
            Some(m) => {
                dense_rows(m, self.n, 2 * h, input, output, c, |ch, j| ch * 2 * h + j, |ch, i| i * c + ch);
                0.0
            }
            None => self.fft_apply(input, output),
        }
    }

    fn adjoint(&self, grad_out: &Matrix, grad_in: &mut Matrix) {
        let (c, h) = (self.c, half_len(self.n));
        match &self.dense {
            Some(m) => dense_rows_t(m, self.n, 2 * h, grad_out, grad_in, c, |ch, j| ch * 2 * h + j, |ch, i| i * c + ch),
            None => self.fft_adjoint(grad_out, grad_in),
        }
    }
}

/// Per-channel standardisation fitted on training data.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits channel means and standard deviations over all rows of the
    /// given `N × C` windows. Zero-variance channels get unit scale.
    pub fn fit(windows: &[&Matrix]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(FodeError::EmptyInput);
        };
        let c = first.cols();
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for w in windows {
            for r in 0..w.rows() {
                for (j, &v) in w.row(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Applies to any matrix whose column index modulo C is the channel,
    /// which covers both `N × C` windows and flattened `B × (N·C)` rows.
    pub fn normalize(&self, x: &Matrix) -> Matrix {
        let c = self.channels();
        let mut out = x.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let ch = (i % x.cols()) % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }

    pub fn denormalize(&self, x: &Matrix) -> Matrix {
        let c = self.channels();
        let mut out = x.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            let ch = (i % x.cols()) % c;
            *v = *v * self.std[ch] + self.mean[ch];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: FieldKind,
    pub window_len: usize,
    pub channels: usize,
    pub hidden: usize,
    pub use_filter: bool,
    pub k_init: FilterInit,
    /// Append the solver time to the perceptron input.
    pub time_input: bool,
    /// Number of classes for a classification head, if any.
    pub classes: Option<usize>,
}

impl ModelConfig {
    pub fn forecasting(kind: FieldKind, window_len: usize, channels: usize) -> Self {
        ModelConfig {
            kind,
            window_len,
            channels,
            hidden: 16,
            use_filter: true,
            k_init: FilterInit::Uniform,
            time_input: false,
            classes: None,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.window_len * self.channels
    }

    /// Perceptron input and output widths.
    pub fn mlp_dims(&self) -> (usize, usize) {
        let f = match self.kind {
            FieldKind::Fode => info_len(self.window_len, self.channels),
            FieldKind::Node => self.state_dim(),
        };
        (f + usize::from(self.time_input), f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(FodeError::InvalidArgument(
                "channels and hidden width must be >= 1".into(),
            ));
        }
        if self.window_len < 2 {
            return Err(FodeError::TooShort {
                needed: 2,
                got: self.window_len,
            });
        }
        if self.classes == Some(0) {
            return Err(FodeError::InvalidArgument("classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Linear readout for classification: logits from the channel-mean of the
/// filtered final state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub w: Matrix,
    pub b: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FodeModel {
    pub config: ModelConfig,
    pub mlp: MlpParams,
    /// `N × C`.
    pub filter_k: Matrix,
    pub head: Option<ClassifierHead>,
    pub normalizer: Option<Normalizer>,
}

/// Tape handles for one registration of a model's parameters.
#[derive(Clone)]
pub struct ModelVars {
    pub mlp: MlpVars,
    /// `1 × (N·C)` row, broadcast over the batch.
    pub k: Var,
    pub head: Option<(Var, Var)>,
    pack: Option<Arc<SpectralPack>>,
    unpack: Option<Arc<SpectralUnpack>>,
}

impl ModelVars {
    /// Parameter handles in [`FodeModel::params`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut v = self.mlp.all().to_vec();
        v.push(self.k);
        if let Some((w, b)) = self.head {
            v.push(w);
            v.push(b);
        }
        v
    }
}

impl FodeModel {
    /// Xavier-initialised perceptron (zero biases) and a filter drawn per
    /// `config.k_init`; fully determined by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f_in, f_out) = config.mlp_dims();
        let mlp = MlpParams::xavier(f_in, config.hidden, f_out, &mut rng);
        let head = config.classes.map(|k| ClassifierHead {
            w: crate::autodiff::xavier_uniform(k, config.window_len, &mut rng),
            b: Matrix::zeros(1, k),
        });
        let filter_k = init_filter(
            config.window_len,
            config.channels,
            config.k_init,
            seed ^ 0x5DEE_CE66_D1CE_4E5B,
        );
        Ok(FodeModel {
            config,
            mlp,
            filter_k,
            head,
            normalizer: None,
        })
    }

    /// Model with an all-zero perceptron (and filter per `k_init`).
    pub fn zeroed(config: ModelConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        for t in m.mlp.tensors_mut() {
            *t = Matrix::zeros(t.rows(), t.cols());
        }
        Ok(m)
    }

    pub fn window_len(&self) -> usize {
        self.config.window_len
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.mlp.validate()?;
        let (f_in, f_out) = self.config.mlp_dims();
        self.mlp.w1.ensure_shape("mlp w1", self.config.hidden, f_in)?;
        self.mlp.w3.ensure_shape("mlp w3", f_out, self.config.hidden)?;
        self.filter_k
            .ensure_shape("filter K", self.config.window_len, self.config.channels)?;
        if !self.filter_k.is_finite() {
            return Err(FodeError::NonFinite("filter K".into()));
        }
        match (&self.head, self.config.classes) {
            (None, None) => {}
            (Some(h), Some(k)) => {
                h.w.ensure_shape("head w", k, self.config.window_len)?;
                h.b.ensure_shape("head b", 1, k)?;
            }
            _ => return Err(FodeError::Checkpoint("head/classes mismatch".into())),
        }
        if let Some(n) = &self.normalizer {
            if n.channels() != self.config.channels {
                return Err(FodeError::shape("normalizer", self.config.channels, n.channels()));
            }
            if n.std.len() != n.mean.len() || n.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                return Err(FodeError::InvalidArgument("normalizer scales must be finite and > 0".into()));
            }
        }
        Ok(())
    }

    /// Trainable tensors: perceptron (w1, b1, w2, b2, w3, b3), filter K,
    /// then the head (w, b) if present.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut v: Vec<&Matrix> = self.mlp.tensors().to_vec();
        v.push(&self.filter_k);
        if let Some(h) = &self.head {
            v.push(&h.w);
            v.push(&h.b);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v: Vec<&mut Matrix> = self.mlp.tensors_mut().into_iter().collect();
        v.push(&mut self.filter_k);
        if let Some(h) = &mut self.head {
            v.push(&mut h.w);
            v.push(&mut h.b);
        }
        v
    }

    pub fn param_names(&self) -> Vec<&'static str> {
        let mut v = vec!["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "mlp.w3", "mlp.b3", "filter_k"];
        if self.head.is_some() {
            v.extend(["head.w", "head.b"]);
        }
        v
    }

    /// Replaces all trainable tensors (same order and shapes as `params`).
    pub fn set_params(&mut self, values: &[Matrix]) -> Result<()> {
        let mut slots = self.params_mut();
        if slots.len() != values.len() {
            return Err(FodeError::shape("set_params", slots.len(), values.len()));
        }
        for (slot, v) in slots.iter_mut().zip(values) {
            if slot.shape() != v.shape() {
                return Err(FodeError::shape(
                    "set_params",
                    format!("{:?}", slot.shape()),
                    format!("{:?}", v.shape()),
                ));
            }
            **slot = v.clone();
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> Result<ModelVars> {
        let mlp = self.mlp.register(tape);
        let k_row = self.filter_k.clone().reshaped(1, self.state_dim())?;
        let k = tape.leaf(k_row);
        let head = self
            .head
            .as_ref()
            .map(|h| (tape.leaf(h.w.clone()), tape.leaf(h.b.clone())));
        let (pack, unpack) = match self.config.kind {
            FieldKind::Fode => (
                Some(Arc::new(SpectralPack::new(self.window_len(), self.channels())?)),
                Some(Arc::new(SpectralUnpack::new(self.window_len(), self.channels())?)),
            ),
            FieldKind::Node => (None, None),
        };
        Ok(ModelVars {
            mlp,
            k,
            head,
            pack,
            unpack,
        })
    }

    /// Batched field evaluation on a fresh tape: `x` is `B × (N·C)`.
    pub fn field_batch(&self, x: &Matrix, t: f64) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let out = vector_field(&mut tape, self, &vars, xv, t)?;
        Ok(tape.value(out).clone())
    }
}

thread_local! {
    static FIELD_EVALS: Cell<[u64; 2]> = const { Cell::new([0, 0]) };
}

/// Number of `(fourier, time-domain)` field evaluations recorded on the
/// current thread.
pub fn field_eval_counts() -> (u64, u64) {
    let c = FIELD_EVALS.with(|c| c.get());
    (c[0], c[1])
}

/// The one place the field kind is dispatched on. `x` is `B × (N·C)`.
pub fn vector_field(
    tape: &mut Tape,
    model: &FodeModel,
    vars: &ModelVars,
    x: Var,
    t: f64,
) -> Result<Var> {
    let cols = tape.value(x).cols();
    if cols != model.state_dim() {
        return Err(FodeError::shape("vector field state", model.state_dim(), cols));
    }
    let slot = match model.config.kind {
        FieldKind::Fode => 0,
        FieldKind::Node => 1,
    };
    FIELD_EVALS.with(|c| {
        let mut v = c.get();
        v[slot] += 1;
        c.set(v);
    });
    match model.config.kind {
        FieldKind::Fode => fourier_field(tape, model, vars, x, t),
        FieldKind::Node => time_domain_field(tape, model, vars, x, t),
    }
}

fn fourier_field(tape: &mut Tape, model: &FodeModel, vars: &ModelVars, x: Var, t: f64) -> Result<Var> {
    let (pack, unpack) = match (&vars.pack, &vars.unpack) {
        (Some(p), Some(u)) => (p.clone(), u.clone()),
        _ => return Err(FodeError::InvalidArgument("model vars lack spectral maps".into())),
    };
    let info = tape.map(x, pack)?;
    let input = if model.config.time_input {
        tape.append_const(info, t)
    } else {
        info
    };
    let z = vars.mlp.forward(tape, input)?;
    tape.map(z, unpack)
}

fn time_domain_field(tape: &mut Tape, model: &FodeModel, vars: &ModelVars, x: Var, t: f64) -> Result<Var> {
    let input = if model.config.time_input {
        tape.append_const(x, t)
    } else {
        x
    };
    vars.mlp.forward(tape, input)
}

/// Output of the step-by-step reference evaluation of the Fourier field.
#[derive(Debug, Clone)]
pub struct FieldEvaluation {
    /// `N × C`.
    pub field: Matrix,
    /// Largest imaginary magnitude discarded by the inverse FFTs.
    pub imag_residue: f64,
}

/// Evaluates the Fourier field on one `N × C` state through the spectral
/// functions one stage at a time (rfft per channel, pack, perceptron,
/// unpack, irfft).
pub fn fode_vector_field(model: &FodeModel, x: &Matrix, t: f64) -> Result<FieldEvaluation> {
    let (n, c) = (model.window_len(), model.channels());
    if model.config.kind != FieldKind::Fode {
        return Err(FodeError::InvalidArgument("model is not a Fourier field".into()));
    }
    x.ensure_shape("fode_vector_field state", n, c)?;
    let spectra = (0..c)
        .map(|ch| rfft_half(&x.column(ch)))
        .collect::<Result<Vec<_>>>()?;
    let mut info = pack_info(&spectra)?;
    if model.config.time_input {
        info.push(t);
    }
    let mut tape = Tape::new();
    let (_, _, z) = crate::autodiff::mlp_forward(&model.mlp, &Matrix::row_vector(info), &mut tape)?;
    let spectra = unpack_info(tape.value(z).as_slice(), n, c)?;
    let mut field = Matrix::zeros(n, c);
    let mut residue = 0.0f64;
    for (ch, s) in spectra.iter().enumerate() {
        let (col, r) = irfft_half_with_residue(s);
        residue = residue.max(r);
        for (i, v) in col.into_iter().enumerate() {
            field[(i, ch)] = v;
        }
    }
    Ok(FieldEvaluation {
        field,
        imag_residue: residue,
    })
}

/// Time-domain baseline field on one `N × C` state.
pub fn node_vector_field(model: &FodeModel, x: &Matrix, t: f64) -> Result<Matrix> {
    if model.config.kind != FieldKind::Node {
        return Err(FodeError::InvalidArgument("model is not a time-domain field".into()));
    }
    x.ensure_shape("node_vector_field state", model.window_len(), model.channels())?;
    let flat = x.clone().reshaped(1, model.state_dim())?;
    model
        .field_batch(&flat, t)?
        .reshaped(model.window_len(), model.channels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(n: usize, ch: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, ch, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn pack_info_layout() {
        let s = HalfSpectrum::new(vec![c(1.0, 0.0), c(2.0, 3.0), c(4.0, 0.0)], 4).unwrap();
        assert_eq!(pack_info(&[s.clone()]).unwrap(), vec![1.0, 2.0, 4.0, 0.0, 3.0, 0.0]);
        let zero = HalfSpectrum::new(vec![c(0.0, 0.0); 3], 4).unwrap();
        assert!(pack_info(&[zero.clone(), zero]).unwrap().iter().all(|&v| v == 0.0));
        let other = HalfSpectrum::new(vec![c(0.0, 0.0); 3], 5).unwrap();
        assert!(pack_info(&[s, other]).is_err());
        assert!(pack_info(&[]).is_err());
    }

    #[test]
    fn unpack_info_enforces_symmetry() {
        let got = unpack_info(&[1.0, 2.0, 4.0, 9.0, 3.0, 7.0], 4, 1).unwrap();
        assert_eq!(got[0].values(), &[c(1.0, 0.0), c(2.0, 3.0), c(4.0, 0.0)]);
        let zero = unpack_info(&[0.0; 12], 4, 2).unwrap();
        assert!(zero.iter().all(|s| s.values().iter().all(|v| v.norm() == 0.0)));
        assert!(unpack_info(&[0.0; 5], 4, 1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [4, 7, 10] {
            let z: Vec<f64> = (0..info_len(n, 3)).map(|_| rng.gen_range(-5.0..5.0)).collect();
            for s in unpack_info(&z, n, 3).unwrap() {
                let (_, residue) = irfft_half_with_residue(&s);
                assert!(residue < 1e-12);
            }
        }
    }

    #[test]
    fn pack_unpack_round_trip() {
        let s = HalfSpectrum::new(vec![c(1.5, 0.0), c(-2.0, 0.25), c(0.5, -1.0), c(3.0, 2.0)], 7)
            .unwrap();
        let t = HalfSpectrum::new(vec![c(0.0, 0.0), c(1.0, 1.0), c(2.0, 2.0), c(3.0, 3.0)], 7)
            .unwrap();
        let back = unpack_info(&pack_info(&[s.clone(), t.clone()]).unwrap(), 7, 2).unwrap();
        assert_eq!(back, vec![s, t]);
    }

    #[test]
    fn filter_examples() {
        let x = Matrix::from_rows(&[&[1.0, 5.0], &[4.0, 2.0]]);
        assert_eq!(apply_filter(&Matrix::filled(2, 2, 1.0), &x).unwrap(), x);
        assert_eq!(apply_filter(&Matrix::zeros(2, 2), &x).unwrap(), Matrix::zeros(2, 2));
        let k = Matrix::from_rows(&[&[2.0, 0.0], &[1.0, 3.0]]);
        assert_eq!(
            apply_filter(&k, &x).unwrap(),
            Matrix::from_rows(&[&[2.0, 0.0], &[4.0, 6.0]])
        );
        assert!(apply_filter(&Matrix::zeros(1, 2), &x).is_err());
    }

    #[test]
    fn filter_init_schemes() {
        assert!(init_filter(5, 3, FilterInit::Zeros, 1).as_slice().iter().all(|&v| v == 0.0));
        assert!(init_filter(5, 3, FilterInit::Ones, 1).as_slice().iter().all(|&v| v == 1.0));
        let u = init_filter(10, 3, FilterInit::Uniform, 42);
        assert!(u.as_slice().iter().all(|&v| (0.0..1.0).contains(&v)));
        assert_eq!(u, init_filter(10, 3, FilterInit::Uniform, 42));
        assert_ne!(u, init_filter(10, 3, FilterInit::Uniform, 43));
        let a = (6.0f64 / 13.0).sqrt();
        let x = init_filter(10, 3, FilterInit::Xavier, 42);
        assert!(x.as_slice().iter().all(|&v| v.abs() < a));
        assert!("gaussian".parse::<FilterInit>().is_err());
        assert_eq!("xavier".parse::<FilterInit>().unwrap(), FilterInit::Xavier);
    }

    #[test]
    fn zero_mlp_gives_zero_field() {
        let cfg = ModelConfig::forecasting(FieldKind::Fode, 10, 3);
        let m = FodeModel::zeroed(cfg).unwrap();
        let x = random_state(10, 3, 1);
        assert_eq!(fode_vector_field(&m, &x, 0.0).unwrap().field, Matrix::zeros(10, 3));
        let node = FodeModel::zeroed(ModelConfig::forecasting(FieldKind::Node, 10, 3)).unwrap();
        assert_eq!(node_vector_field(&node, &x, 0.0).unwrap(), Matrix::zeros(10, 3));
    }

    fn identity_model(kind: FieldKind, n: usize, ch: usize) -> FodeModel {
        let cfg = ModelConfig::forecasting(kind, n, ch);
        let f = cfg.mlp_dims().1;
        let mut m = FodeModel::zeroed(ModelConfig { hidden: f, ..cfg }).unwrap();
        m.mlp = MlpParams::shifted_identity(f, 1e3);
        m
    }

    #[test]
    fn identity_mlp_returns_state() {
        for n in [4, 9, 10, 16] {
            let m = identity_model(FieldKind::Fode, n, 2);
            let x = random_state(n, 2, n as u64);
            let out = fode_vector_field(&m, &x, 0.3).unwrap();
            assert!(out.field.max_abs_diff(&x) < 1e-10, "n={n}");
            assert!(out.imag_residue < 1e-12);
        }
        let node = identity_model(FieldKind::Node, 6, 2);
        let x = random_state(6, 2, 3).map(f64::abs);
        assert!(node_vector_field(&node, &x, 0.0).unwrap().max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn tape_field_matches_stagewise_reference() {
        for (n, ch, seed) in [(10, 3, 1u64), (8, 2, 2), (7, 1, 3)] {
            let mut m = FodeModel::new(ModelConfig::forecasting(FieldKind::Fode, n, ch), seed).unwrap();
            m.mlp.b1 = Matrix::filled(1, 16, 0.1);
            let x = random_state(n, ch, seed + 10);
            let reference = fode_vector_field(&m, &x, 0.0).unwrap();
            assert!(reference.field.is_finite());
            assert!(reference.imag_residue < 1e-12);
            let fast = m
                .field_batch(&x.clone().reshaped(1, n * ch).unwrap(), 0.0)
                .unwrap()
                .reshaped(n, ch)
                .unwrap();
            assert!(fast.max_abs_diff(&reference.field) < 1e-12);
        }
    }

    #[test]
    fn wrong_state_shape_rejected() {
        let m = FodeModel::new(ModelConfig::forecasting(FieldKind::Fode, 10, 3), 0).unwrap();
        assert!(fode_vector_field(&m, &Matrix::zeros(10, 2), 0.0).is_err());
        assert!(m.field_batch(&Matrix::zeros(2, 29), 0.0).is_err());
        let node = FodeModel::new(ModelConfig::forecasting(FieldKind::Node, 10, 3), 0).unwrap();
        assert!(node_vector_field(&node, &Matrix::zeros(3, 10), 0.0).is_err());
    }

    /// Transposes of the spectral maps, checked entry by entry against the
    /// dense matrix of `apply`.
    #[test]
    fn spectral_adjoints_are_transposes() {
        for ((n, ch), dense) in [(4, 1), (5, 2), (10, 3), (16, 1)].into_iter().flat_map(|s| [(s, true), (s, false)]) {
            let maps: [Box<dyn RowLinearMap>; 2] = [
                Box::new(SpectralPack::with_dense(n, ch, dense).unwrap()),
                Box::new(SpectralUnpack::with_dense(n, ch, dense).unwrap()),
            ];
            for map in maps {
                let (di, d_o) = (map.in_dim(), map.out_dim());
                let probe = Matrix::identity(di);
                let mut dense = Matrix::zeros(di, d_o);
                map.apply(&probe, &mut dense); // row i = A e_i
                let probe_t = Matrix::identity(d_o);
                let mut adj = Matrix::zeros(d_o, di);
                map.adjoint(&probe_t, &mut adj); // row j = Aᵀ e_j
                assert!(adj.max_abs_diff(&dense.transpose()) < 1e-12, "{} n={n}", map.name());
            }
        }
    }

    #[test]
    fn dense_spectral_maps_match_fft_path() {
        for (n, ch) in [(2, 1), (7, 3), (10, 3), (33, 2)] {
            let x = random_state(5, n * ch, 11);
            let z = random_state(5, info_len(n, ch), 12);
            let (pd, pf) = (SpectralPack::with_dense(n, ch, true).unwrap(), SpectralPack::with_dense(n, ch, false).unwrap());
            let (ud, uf) = (SpectralUnpack::with_dense(n, ch, true).unwrap(), SpectralUnpack::with_dense(n, ch, false).unwrap());
            let run = |m: &dyn RowLinearMap, x: &Matrix| {
                let mut o = Matrix::zeros(x.rows(), m.out_dim());
                m.apply(x, &mut o);
                o
            };
            assert!(run(&pd, &x).max_abs_diff(&run(&pf, &x)) < 1e-12);
            assert!(run(&ud, &z).max_abs_diff(&run(&uf, &z)) < 1e-12);
        }
    }

    #[test]
    fn field_gradient_matches_finite_differences() {
        for kind in [FieldKind::Fode, FieldKind::Node] {
            let mut m = FodeModel::new(ModelConfig::forecasting(kind, 10, 3), 17).unwrap();
            m.mlp.b1 = Matrix::filled(1, 16, 0.05);
            let x0 = random_state(2, 30, 5);
            let target = random_state(2, 30, 6);
            let mut params: Vec<Matrix> = m.mlp.tensors().into_iter().cloned().collect();
            params.push(x0);
            let report = grad_check(
                |ps| {
                    let mut mm = m.clone();
                    for (slot, v) in mm.mlp.tensors_mut().into_iter().zip(ps) {
                        *slot = v.clone();
                    }
                    let mut tape = Tape::new();
                    let vars = mm.register(&mut tape)?;
                    let x = tape.leaf(ps[6].clone());
                    let f = vector_field(&mut tape, &mm, &vars, x, 0.0)?;
                    let loss = tape.mse(f, &target)?;
                    let g = tape.backward(loss, &Matrix::filled(1, 1, 1.0))?;
                    let mut grads: Vec<Matrix> =
                        vars.mlp.all().iter().map(|&v| g.wrt(&tape, v)).collect();
                    grads.push(g.wrt(&tape, x));
                    Ok((tape.value(loss)[(0, 0)], grads))
                },
                &params,
                1e-6,
            )
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "{kind}: {report:?}");
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let w = Matrix::from_rows(&[&[1.0, 10.0], &[3.0, 10.0]]);
        let n = Normalizer::fit(&[&w]).unwrap();
        assert_eq!(n.mean, vec![2.0, 10.0]);
        assert_eq!(n.std, vec![1.0, 1.0]);
        let z = n.normalize(&w);
        assert_eq!(z, Matrix::from_rows(&[&[-1.0, 0.0], &[1.0, 0.0]]));
        assert!(n.denormalize(&z).max_abs_diff(&w) < 1e-15);
    }
}
