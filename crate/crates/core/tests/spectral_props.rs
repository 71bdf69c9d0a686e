use fode::model::{info_len, pack_info, unpack_info};
use fode::spectral::{dft_naive, fft, half_len, ifft, irfft_half, rfft_half, stft};
use num_complex::Complex64;
use proptest::prelude::*;

fn complex_vec(max_len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..=max_len)
        .prop_map(|v| v.into_iter().map(|(re, im)| Complex64::new(re, im)).collect())
}

fn max_err(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fft_agrees_with_direct_sum(x in complex_vec(128)) {
        let scale = x.iter().map(|v| v.norm()).sum::<f64>().max(1.0);
        prop_assert!(max_err(&fft(&x).unwrap(), &dft_naive(&x).unwrap()) / scale < 1e-12);
    }

    #[test]
    fn inverse_undoes_forward(x in complex_vec(128)) {
        let back = ifft(&fft(&x).unwrap()).unwrap();
        prop_assert!(max_err(&back, &x) < 1e-12);
    }

    #[test]
    fn parseval(x in complex_vec(128)) {
        let n = x.len() as f64;
        let time: f64 = x.iter().map(|v| v.norm_sqr()).sum();
        let freq: f64 = fft(&x).unwrap().iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
        prop_assert!((time - freq).abs() <= 1e-10 * time.max(1e-300));
    }

    #[test]
    fn real_round_trip(x in prop::collection::vec(-5.0f64..5.0, 2..=100)) {
        let z = rfft_half(&x).unwrap();
        prop_assert_eq!(z.values().len(), half_len(x.len()));
        let back = irfft_half(&z);
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }

    #[test]
    fn pack_round_trips_real_spectra(n in 2usize..40, c in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let spectra: Vec<_> = (0..c)
            .map(|_| rfft_half(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap())
            .collect();
        let z = pack_info(&spectra).unwrap();
        prop_assert_eq!(z.len(), info_len(n, c));
        let back = unpack_info(&z, n, c).unwrap();
        prop_assert_eq!(back, spectra);
    }

    #[test]
    fn stft_frame_count(len in 64usize..600, hop in 1usize..40) {
        let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.3).sin()).collect();
        let s = stft(&x, 64, hop).unwrap();
        prop_assert_eq!(s.n_frames(), (len - 64) / hop + 1);
        prop_assert_eq!(s.n_bins(), 33);
    }
}

#[test]
fn spec_example_and_every_length() {
    let x: Vec<Complex64> = [1.0, 2.0, 3.0, 4.0].iter().map(|&r| Complex64::new(r, 0.0)).collect();
    let want = [
        Complex64::new(10.0, 0.0),
        Complex64::new(-2.0, 2.0),
        Complex64::new(-2.0, 0.0),
        Complex64::new(-2.0, -2.0),
    ];
    assert!(max_err(&fft(&x).unwrap(), &want) < 1e-12);
    for n in 1..=128 {
        let x: Vec<Complex64> = (0..n).map(|i| Complex64::new((i as f64).cos(), (i as f64 * 0.7).sin())).collect();
        assert!(max_err(&fft(&x).unwrap(), &dft_naive(&x).unwrap()) < 1e-10, "n = {n}");
    }
}
