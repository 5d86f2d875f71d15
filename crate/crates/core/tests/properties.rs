use proptest::prelude::*;

use cadunet::autodiff::Tape;
use cadunet::complex::{mag_softmax_phase_keep, ComplexBatch};
use cadunet::eval::si_sdr;
use cadunet::network::{estimate_sources, Model, UNetConfig};
use cadunet::stft::{CodecConfig, StftCodec};
use cadunet::training::{AdamConfig, AdamState, Checkpoint};
use cadunet::Tensor;

fn signal(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut s = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(&[n, c], |_| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let n: f64 = b.iter().map(|y| y * y).sum();
    (d / n).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stft_round_trip_any_length(bins in prop::sample::select(vec![8usize, 16, 64]), extra in 0usize..500, c in 1usize..4, seed: u64) {
        let cfg = CodecConfig::for_bins(bins);
        let codec = StftCodec::<f64>::new(cfg).unwrap();
        let x = signal(cfg.window_len + extra, c, seed);
        let y = codec.istft(&codec.stft(&x).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(rel_err(y.data(), x.data()) < 1e-12);
    }

    #[test]
    fn speech_and_noise_spectra_sum_to_mixture(seed in 0u64..1000, scale in 0.01f64..10.0) {
        let mut cfg = UNetConfig::tiny();
        cfg.freq_bins = 16;
        cfg.frames = 16;
        let model = Model::<f64>::new(cfg, seed).unwrap();
        let codec = StftCodec::<f64>::new(CodecConfig::for_bins(16)).unwrap();
        let n = codec.config().samples_for_frames(16).unwrap();
        let y = signal(n, cfg.channels, seed).map(|v| v * scale);
        let spec = codec.stft(&y).unwrap();
        let masks = model.masks(&spec).unwrap();
        let (s, nz) = estimate_sources(&spec, &masks).unwrap();
        let sum: Vec<f64> = s.full().data().iter().zip(nz.full().data()).map(|(a, b)| a + b).collect();
        prop_assert!(rel_err(&sum, spec.full().data()) < 1e-12);
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(seed: u64, gain in 1e-3f64..1e3, mix in 0.0f64..1.0) {
        let r = signal(256, 1, seed);
        let noise = signal(256, 1, seed ^ 1);
        let e: Vec<f64> = r.data().iter().zip(noise.data()).map(|(a, b)| a + mix * b).collect();
        let scaled: Vec<f64> = e.iter().map(|v| v * gain).collect();
        let a = si_sdr(&e, r.data()).unwrap();
        let b = si_sdr(&scaled, r.data()).unwrap();
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn magnitude_softmax_columns_are_normalised(f in 1usize..4, c in 1usize..7, seed: u64, scale in 0.0f64..50.0) {
        let x = signal(f * c * c, 2, seed).map(|v| v * scale);
        let mut tape = Tape::<f64>::new();
        let re = tape.constant(Tensor::from_fn(&[f, c, c], |i| x.data()[2 * i]));
        let im = tape.constant(Tensor::from_fn(&[f, c, c], |i| x.data()[2 * i + 1]));
        let w = mag_softmax_phase_keep(&mut tape, ComplexBatch { re, im }).unwrap();
        let (wr, wi) = (tape.value(w.re), tape.value(w.im));
        for fi in 0..f {
            for col in 0..c {
                let s: f64 = (0..c).map(|row| wr.at(&[fi, row, col]).hypot(wi.at(&[fi, row, col]))).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_bytes_round_trip(seed: u64, step in 0u64..1_000_000, alpha in prop::option::of(0.1f64..100.0)) {
        let model = Model::<f32>::new(UNetConfig::tiny(), seed).unwrap();
        let adam = AdamState::new(AdamConfig::default(), model.params());
        let ckpt = Checkpoint { model, codec: CodecConfig::for_bins(64), alpha, step, rng: None, adam };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.step, step);
        prop_assert_eq!(back.alpha, alpha);
    }
}
