//! Property tests for the analysis/synthesis and metric invariants.

use num_complex::Complex64;
use proptest::prelude::*;

use stws_core::attention::{feature_dim, pack_row, pack_stats_row, unpack_row};
use stws_core::metrics;
use stws_core::stft::{self, StftConfig};
use stws_core::wiener;

fn speech_config() -> StftConfig {
    StftConfig::speech_16k()
}

fn rel_rms(a: &[f64], b: &[f64]) -> f64 {
    let err: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let refe: f64 = b.iter().map(|x| x * x).sum();
    if refe == 0.0 {
        0.0
    } else {
        (err / refe).sqrt()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stft_roundtrip_reconstructs_interior(
        signal in prop::collection::vec(-1.0f64..1.0, 8_000..12_000)
    ) {
        let cfg = speech_config();
        let spec = stft::stft(&signal, &cfg).unwrap();
        let rec = stft::istft(&spec).unwrap();
        prop_assert_eq!(rec.len(), signal.len());
        let lo = cfg.window_len;
        let hi = signal.len() - cfg.window_len;
        let err = rel_rms(&rec[lo..hi], &signal[lo..hi]);
        prop_assert!(err <= 1e-6, "interior reconstruction error {}", err);
    }

    #[test]
    fn stft_is_linear(
        x in prop::collection::vec(-1.0f64..1.0, 2_000..3_000),
        y_seed in 0u64..1_000,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        use rand::prelude::*;
        let cfg = speech_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(y_seed);
        let y: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let sx = stft::stft(&x, &cfg).unwrap();
        let sy = stft::stft(&y, &cfg).unwrap();
        let sc = stft::stft(&combo, &cfg).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..sc.data().len() {
            let lin = a * sx.data()[i] + b * sy.data()[i];
            num += (sc.data()[i] - lin).norm_sqr();
            den += lin.norm_sqr().max(1e-30);
        }
        prop_assert!((num / den).sqrt() <= 1e-10);
    }

    #[test]
    fn pack_roundtrip_is_exact(
        m in 1usize..5,
        values in prop::collection::vec(-10.0f64..10.0, 12),
    ) {
        let taps: Vec<Complex64> = (0..m)
            .map(|i| Complex64::new(values[i % 12], values[(i + 5) % 12]))
            .collect();
        let d = Complex64::new(values[10], values[11]);
        let mut row = vec![0.0; feature_dim(m)];
        pack_row(&taps, d, &mut row);
        let mut mat = vec![Complex64::default(); m * m];
        let mut vect = vec![Complex64::default(); m];
        unpack_row(&row, m, &mut mat, &mut vect);
        let mut row2 = vec![0.0; feature_dim(m)];
        pack_stats_row(&mat, &vect, &mut row2);
        prop_assert_eq!(row, row2);
    }

    #[test]
    fn sisnr_scale_invariance(
        seed in 0u64..10_000,
        alpha in prop::sample::select(vec![-7.5f64, -0.3, 0.04, 2.0, 900.0]),
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s: Vec<f64> = (0..1_500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let e: Vec<f64> = (0..1_500).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = metrics::sisnr_db(&s, &e).unwrap();
        let scaled: Vec<f64> = e.iter().map(|v| v * alpha).collect();
        let got = metrics::sisnr_db(&s, &scaled).unwrap();
        prop_assert!((got - base).abs() <= 1e-8, "{} vs {}", got, base);
    }

    #[test]
    fn spectral_losses_nonnegative_and_ordered(
        seed in 0u64..10_000,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = speech_config();
        let frames = 3;
        let bins = cfg.num_bins();
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            let data: Vec<Complex64> = (0..frames * bins)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            stws_core::stft::Spectrogram::from_parts(data, frames, frames * cfg.hop, cfg.clone())
                .unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let mag = metrics::mag_loss(&a, &b, 0.5).unwrap();
        let ri = metrics::ri_loss(&a, &b, 0.5).unwrap();
        prop_assert!(mag >= 0.0 && ri >= 0.0);
        prop_assert!(ri + 1e-12 >= mag, "ri {} < mag {}", ri, mag);
        prop_assert_eq!(metrics::mag_loss(&a, &a, 0.5).unwrap(), 0.0);
        prop_assert_eq!(metrics::ri_loss(&a, &a, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn ridge_regularization_shrinks_monotonically(
        seed in 0u64..10_000,
        eps_lo in 0.0f64..0.5,
        eps_gap in 1e-3f64..2.0,
    ) {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cfg = StftConfig {
            sample_rate: 16_000,
            window_len: 8,
            hop: 4,
            window: stws_core::stft::WindowKind::Hamming,
            fft_size: 8,
        };
        let frames = 10;
        let data: Vec<Complex64> = (0..frames * cfg.num_bins())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let x_spec =
            stws_core::stft::Spectrogram::from_parts(data, frames, frames * 4, cfg.clone()).unwrap();
        let d_data: Vec<Complex64> = (0..frames * cfg.num_bins())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let d_spec =
            stws_core::stft::Spectrogram::from_parts(d_data, frames, frames * 4, cfg).unwrap();
        let x = stft::unfold(&x_spec, 3).unwrap();
        let stats = wiener::accumulate_stats(&x, &d_spec, 6).unwrap();
        let norm = |eps: f64| {
            let h = wiener::solve(&stats, eps).unwrap();
            h.data().iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
        };
        prop_assert!(norm(eps_lo) + 1e-9 >= norm(eps_lo + eps_gap));
    }
}
