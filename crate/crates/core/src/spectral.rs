//! Discrete Fourier transforms and the short-time Fourier transform.
//!
//! Conventions: the forward transform is unnormalized,
//! `X[k] = Σ x[n]·exp(−i2πkn/N)`, and the inverse carries the `1/N`
//! factor. Power-of-two lengths use an iterative radix-2 transform; other
//! lengths fall back to the direct O(N²) sum over a cached twiddle table.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;

use crate::error::{FodeError, Result};
use crate::matrix::Matrix;

/// Number of non-redundant bins of a length-`n` real signal.
#[inline]
pub fn half_len(n: usize) -> usize {
    n / 2 + 1
}

/// Direct evaluation of the DFT sum. Slow; used as the reference the fast
/// transform is tested against.
pub fn dft_naive(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    if n == 0 {
        return Err(FodeError::EmptyInput);
    }
    let out = (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let angle = -2.0 * PI * ((k * j) % n) as f64 / n as f64;
                    v * Complex64::from_polar(1.0, angle)
                })
                .sum()
        })
        .collect();
    Ok(out)
}

/// Forward DFT.
pub fn fft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    plan.transform(x, &mut out, false);
    Ok(out)
}

/// Inverse DFT, including the `1/N` factor.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let plan = FftPlan::new(x.len())?;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    plan.transform(x, &mut out, true);
    Ok(out)
}

/// Precomputed twiddles (and bit-reversal table for power-of-two sizes).
///
/// The table is built so that `w[N−j]` is exactly `conj(w[j])` and the
/// quarter-turn entries are exact, which keeps the imaginary residue of
/// inverse transforms of conjugate-symmetric spectra at rounding level.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    twiddles: Vec<Complex64>,
    bitrev: Option<Vec<usize>>,
}

impl FftPlan {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(FodeError::EmptyInput);
        }
        let mut twiddles = vec![Complex64::new(1.0, 0.0); n];
        for j in 1..=n / 2 {
            let angle = -2.0 * PI * j as f64 / n as f64;
            let (s, c) = angle.sin_cos();
            twiddles[j] = Complex64::new(c, s);
        }
        if n % 2 == 0 {
            twiddles[n / 2] = Complex64::new(-1.0, 0.0);
        }
        if n % 4 == 0 {
            twiddles[n / 4] = Complex64::new(0.0, -1.0);
        }
        for j in n / 2 + 1..n {
            twiddles[j] = twiddles[n - j].conj();
        }

        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
                .collect()
        });

        Ok(FftPlan {
            n,
            twiddles,
            bitrev,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Writes the forward (or inverse, scaled by `1/N`) transform of
    /// `input` into `output`. Both slices must have the plan's length.
    pub fn transform(&self, input: &[Complex64], output: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(input.len(), n);
        assert_eq!(output.len(), n);
        let tw = |j: usize| {
            let w = self.twiddles[j];
            if inverse {
                w.conj()
            } else {
                w
            }
        };

        match &self.bitrev {
            Some(rev) => {
                for (i, &r) in rev.iter().enumerate() {
                    output[r] = input[i];
                }
                let mut len = 2;
                while len <= n {
                    let half = len / 2;
                    let stride = n / len;
                    for start in (0..n).step_by(len) {
                        for j in 0..half {
                            let w = tw(j * stride);
                            let u = output[start + j];
                            let v = output[start + j + half] * w;
                            output[start + j] = u + v;
                            output[start + j + half] = u - v;
                        }
                    }
                    len <<= 1;
                }
            }
            None => {
                for (k, out) in output.iter_mut().enumerate() {
                    let mut acc = Complex64::new(0.0, 0.0);
                    let mut idx = 0;
                    for &v in input {
                        acc += v * tw(idx);
                        idx += k;
                        if idx >= n {
                            idx -= n;
                        }
                    }
                    *out = acc;
                }
            }
        }

        if inverse {
            let scale = 1.0 / n as f64;
            for v in output.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Bins `0..=N/2` of the DFT of a real length-`N` signal.
#[derive(Debug, Clone, PartialEq)]
pub struct HalfSpectrum {
    values: Vec<Complex64>,
    full_length: usize,
}

impl HalfSpectrum {
    /// Validates the realness constraints: bin 0 and (for even `N`) the
    /// Nyquist bin must have zero imaginary part.
    pub fn new(values: Vec<Complex64>, full_length: usize) -> Result<Self> {
        if full_length < 2 {
            return Err(FodeError::TooShort {
                needed: 2,
                got: full_length,
            });
        }
        if values.len() != half_len(full_length) {
            return Err(FodeError::shape(
                "HalfSpectrum::new",
                half_len(full_length),
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(FodeError::NonFinite("half spectrum".into()));
        }
        if values[0].im != 0.0 {
            return Err(FodeError::InvalidSpectrum(format!(
                "bin 0 has imaginary part {}",
                values[0].im
            )));
        }
        if full_length % 2 == 0 && values[full_length / 2].im != 0.0 {
            return Err(FodeError::InvalidSpectrum(format!(
                "Nyquist bin has imaginary part {}",
                values[full_length / 2].im
            )));
        }
        Ok(HalfSpectrum {
            values,
            full_length,
        })
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn full_length(&self) -> usize {
        self.full_length
    }

    /// Rebuilds all `N` bins using `X[N−k] = conj(X[k])`.
    pub fn to_full(&self) -> Vec<Complex64> {
        let n = self.full_length;
        let mut full = vec![Complex64::new(0.0, 0.0); n];
        full[..self.values.len()].copy_from_slice(&self.values);
        for k in 1..self.values.len() {
            if n - k > k {
                full[n - k] = self.values[k].conj();
            }
        }
        full
    }
}

pub fn rfft_half(x: &[f64]) -> Result<HalfSpectrum> {
    let n = x.len();
    if n < 2 {
        return Err(FodeError::TooShort { needed: 2, got: n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(FodeError::NonFinite("rfft_half input".into()));
    }
    let input: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut full = fft(&input)?;
    full.truncate(half_len(n));
    // Exactly zero for real input; rounding in the butterflies can leave
    // a few ulps behind.
    full[0].im = 0.0;
    if n % 2 == 0 {
        full[n / 2].im = 0.0;
    }
    HalfSpectrum::new(full, n)
}

pub fn irfft_half(z: &HalfSpectrum) -> Vec<f64> {
    let (x, residue) = irfft_half_with_residue(z);
    let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    debug_assert!(
        residue <= 1e-12 * scale,
        "imaginary residue {residue:e} after inverse transform"
    );
    x
}

/// Inverse of [`rfft_half`], also reporting the largest imaginary part
/// that was discarded.
pub fn irfft_half_with_residue(z: &HalfSpectrum) -> (Vec<f64>, f64) {
    let full = z.to_full();
    let plan = FftPlan::new(full.len()).expect("full_length >= 2");
    let mut out = vec![Complex64::new(0.0, 0.0); full.len()];
    plan.transform(&full, &mut out, true);
    let residue = out.iter().fold(0.0f64, |m, v| m.max(v.im.abs()));
    (out.into_iter().map(|v| v.re).collect(), residue)
}

/// Magnitude spectrogram: one row per frame, one column per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: Matrix,
    pub window_len: usize,
    pub hop: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_bins(&self) -> usize {
        self.frames.cols()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "frame,bin,magnitude")?;
        for f in 0..self.frames.rows() {
            for (b, m) in self.frames.row(f).iter().enumerate() {
                writeln!(w, "{f},{b},{m}")?;
            }
        }
        Ok(())
    }
}

/// Periodic Hann window of length `m`.
pub fn hann(m: usize) -> Vec<f64> {
    (0..m)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / m as f64).cos())
        .collect()
}

pub const DEFAULT_STFT_WINDOW: usize = 64;
pub const DEFAULT_STFT_HOP: usize = 16;

/// Hann-windowed STFT magnitudes, frames starting every `hop` samples.
pub fn stft(x: &[f64], window_len: usize, hop: usize) -> Result<Spectrogram> {
    if hop == 0 {
        return Err(FodeError::InvalidArgument("hop must be >= 1".into()));
    }
    if window_len < 2 {
        return Err(FodeError::InvalidArgument("window_len must be >= 2".into()));
    }
    if window_len > x.len() {
        return Err(FodeError::TooShort {
            needed: window_len,
            got: x.len(),
        });
    }
    let window = hann(window_len);
    let n_frames = (x.len() - window_len) / hop + 1;
    let bins = half_len(window_len);
    let mut frames = Matrix::zeros(n_frames, bins);
    let mut buf = vec![0.0; window_len];
    for f in 0..n_frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = x[start + i] * window[i];
        }
        let spec = rfft_half(&buf)?;
        for (dst, v) in frames.row_mut(f).iter_mut().zip(spec.values()) {
            *dst = v.norm();
        }
    }
    Ok(Spectrogram {
        frames,
        window_len,
        hop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
        a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
    }

    fn random_complex(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn dft_naive_examples() {
        assert!(dft_naive(&[]).is_err());
        let zeros = dft_naive(&[c(0.0, 0.0); 4]).unwrap();
        assert!(zeros.iter().all(|v| v.norm() == 0.0));

        let constant = dft_naive(&[c(2.5, -1.0); 6]).unwrap();
        assert!((constant[0] - c(15.0, -6.0)).norm() < 1e-12);
        assert!(constant[1..].iter().all(|v| v.norm() < 1e-12));

        let x: Vec<_> = [1.0, 2.0, 3.0, 4.0].iter().map(|&v| c(v, 0.0)).collect();
        let got = dft_naive(&x).unwrap();
        let want = [c(10.0, 0.0), c(-2.0, 2.0), c(-2.0, 0.0), c(-2.0, -2.0)];
        assert!(max_err(&got, &want) < 1e-12);
    }

    #[test]
    fn fft_matches_naive_up_to_64() {
        for n in 1..=64 {
            let x = random_complex(n, n as u64);
            let err = max_err(&fft(&x).unwrap(), &dft_naive(&x).unwrap());
            assert!(err < 1e-10, "n={n} err={err:e}");
        }
    }

    #[test]
    fn impulse_gives_flat_spectrum() {
        for n in [1, 5, 8, 16] {
            let mut x = vec![c(0.0, 0.0); n];
            x[0] = c(1.0, 0.0);
            assert!(fft(&x).unwrap().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
        }
    }

    #[test]
    fn ifft_examples() {
        let zero = ifft(&[c(0.0, 0.0); 7]).unwrap();
        assert!(zero.iter().all(|v| v.norm() == 0.0));
        let mut dc = vec![c(0.0, 0.0); 8];
        dc[0] = c(8.0, 0.0);
        assert!(ifft(&dc).unwrap().iter().all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
        for n in [3, 8, 10, 32, 100] {
            let x = random_complex(n, 99 + n as u64);
            let back = ifft(&fft(&x).unwrap()).unwrap();
            assert!(max_err(&back, &x) < 1e-12);
        }
    }

    #[test]
    fn rfft_half_cosine_and_constant() {
        let x: Vec<f64> = (0..8).map(|n| (2.0 * PI * n as f64 / 8.0).cos()).collect();
        let h = rfft_half(&x).unwrap();
        assert_eq!(h.values().len(), 5);
        for (k, v) in h.values().iter().enumerate() {
            let want = if k == 1 { c(4.0, 0.0) } else { c(0.0, 0.0) };
            assert!((v - want).norm() < 1e-12, "bin {k}: {v}");
        }
        let h = rfft_half(&[3.0; 5]).unwrap();
        assert!((h.values()[0] - c(15.0, 0.0)).norm() < 1e-12);
        assert!(h.values()[1..].iter().all(|v| v.norm() < 1e-12));
        assert!(rfft_half(&[1.0]).is_err());
    }

    #[test]
    fn irfft_half_examples() {
        let zero = HalfSpectrum::new(vec![c(0.0, 0.0); 5], 8).unwrap();
        assert!(irfft_half(&zero).iter().all(|&v| v == 0.0));

        let mut dc = vec![c(0.0, 0.0); 5];
        dc[0] = c(8.0, 0.0);
        let ones = irfft_half(&HalfSpectrum::new(dc, 8).unwrap());
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [8, 10, 16, 100] {
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (back, residue) = irfft_half_with_residue(&rfft_half(&x).unwrap());
            assert!(residue < 1e-12);
            let err = back.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-12, "n={n} err={err:e}");
        }
    }

    #[test]
    fn half_spectrum_rejects_bad_symmetry_slots() {
        let mut v = vec![c(0.0, 0.0); 3];
        v[0].im = 0.5;
        assert!(matches!(HalfSpectrum::new(v, 4), Err(FodeError::InvalidSpectrum(_))));
        let mut v = vec![c(0.0, 0.0); 3];
        v[2].im = 0.5;
        assert!(HalfSpectrum::new(v.clone(), 4).is_err());
        // N = 5 has no Nyquist bin; the last retained bin may be complex.
        assert!(HalfSpectrum::new(v, 5).is_ok());
        assert!(HalfSpectrum::new(vec![c(0.0, 0.0); 2], 4).is_err());
    }

    #[test]
    fn stft_frame_count_and_errors() {
        let x = vec![0.0; 1000];
        let s = stft(&x, 64, 16).unwrap();
        assert_eq!(s.n_frames(), 59);
        assert_eq!(s.n_bins(), 33);
        assert!(s.frames.as_slice().iter().all(|&v| v == 0.0));
        assert!(stft(&x[..10], 64, 16).is_err());
        assert!(stft(&x, 64, 0).is_err());
    }

    #[test]
    fn stft_bin_centred_sinusoid_peaks_in_one_bin() {
        // Bin 5 of a 64-point frame.
        let x: Vec<f64> = (0..512)
            .map(|n| (2.0 * PI * 5.0 * n as f64 / 64.0).sin())
            .collect();
        let s = stft(&x, 64, 16).unwrap();
        for f in 0..s.n_frames() {
            let row = s.frames.row(f);
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                .unwrap();
            assert_eq!(argmax, 5);
        }
        // Oracle on the first frame: windowed frame through the naive DFT.
        let w = hann(64);
        let frame: Vec<_> = (0..64).map(|n| c(x[n] * w[n], 0.0)).collect();
        let naive = dft_naive(&frame).unwrap();
        for b in 0..33 {
            assert!((s.frames[(0, b)] - naive[b].norm()).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn parseval_and_linearity(
            xs in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..200),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let x: Vec<_> = xs.iter().map(|&(r, i)| c(r, i)).collect();
            let y: Vec<_> = xs.iter().rev().map(|&(r, i)| c(i, -r)).collect();
            let n = x.len() as f64;
            let fx = fft(&x).unwrap();
            let time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
            let freq: f64 = fx.iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
            prop_assert!((time - freq).abs() <= 1e-10 * time.max(1e-300));

            let fy = fft(&y).unwrap();
            let mix: Vec<_> = x.iter().zip(&y).map(|(u, v)| u * a + v * b).collect();
            let lhs = fft(&mix).unwrap();
            let rhs: Vec<_> = fx.iter().zip(&fy).map(|(u, v)| u * a + v * b).collect();
            prop_assert!(max_err(&lhs, &rhs) < 1e-10);
        }

        #[test]
        fn real_input_is_conjugate_symmetric(xs in proptest::collection::vec(-5.0f64..5.0, 2..128)) {
            let x: Vec<_> = xs.iter().map(|&v| c(v, 0.0)).collect();
            let n = x.len();
            let fx = fft(&x).unwrap();
            for k in 1..n {
                prop_assert!((fx[n - k] - fx[k].conj()).norm() < 1e-12);
            }
            let back = irfft_half(&rfft_half(&xs).unwrap());
            for (a, b) in back.iter().zip(&xs) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
