mod common;

use std::f64::consts::PI;

use proptest::prelude::*;
use radarllm_core::data::{segment_echoes, synthesize_scene, Complex, Label, ObservationVector, SceneParams};
use radarllm_core::features::{
    self as f, extract_all, patch, unpatch, FeatureConfig, FeatureSet, SampleFeatures, WindowKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_feature_matches_its_direct_oracle() {
    for (name, err) in common::feature_oracle_errors(7, 50) {
        assert!(err < 1e-9, "{name}: max abs err {err}");
    }
}

#[test]
fn parseval_holds_for_spectrum() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for n in [1, 7, 64, 512, 1000] {
        let x = common::random_signal(&mut r, n);
        let lhs: f64 = f::doppler_amplitude_spectrum(&x).iter().map(|v| v * v).sum();
        let rhs: f64 = x.iter().map(|z| z.norm_sqr()).sum();
        assert!((lhs - rhs).abs() < 1e-9 * rhs.max(1.0), "N={n}: {lhs} vs {rhs}");
    }
}

#[test]
fn phase_rotation_shifts_doppler_phase() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = common::random_signal(&mut r, 128);
    let theta = 0.7;
    let rot: Vec<Complex> = x.iter().map(|z| z * Complex::from_polar(1.0, theta)).collect();
    let a = f::doppler_phase(&x);
    let b = f::doppler_phase(&rot);
    for (p, q) in a.iter().zip(&b) {
        assert!(common::angle_diff(q - p, theta) < 1e-9);
    }
}

#[test]
fn stft_localizes_an_aligned_tone() {
    let (n, omega, k0) = (256, 64, 9);
    let x: Vec<Complex> = (0..n)
        .map(|t| Complex::from_polar(1.0, 2.0 * PI * (k0 * t) as f64 / omega as f64))
        .collect();
    let w = WindowKind::Rectangular.coefficients(32);
    let s = f::stft(&x, &w, 8, omega).unwrap();
    for m in 0..s.frames {
        let best = (0..omega).max_by(|&a, &b| s.at(a, m).norm().total_cmp(&s.at(b, m).norm())).unwrap();
        assert_eq!(best, k0);
    }
    let z = f::stft(&vec![Complex::new(0.0, 0.0); n], &w, 8, omega).unwrap();
    assert!(z.data.iter().all(|v| v.norm() == 0.0));
}

fn vector(values: Vec<Complex>) -> ObservationVector {
    ObservationVector {
        values,
        label: Label::Clutter,
        sample_id: 0,
        time_index: 1,
    }
}

#[test]
fn extract_all_lengths_and_zero_signal() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let fs = extract_all(&vector(common::random_signal(&mut r, 512)), &FeatureConfig::default()).unwrap();
    assert!(fs.channels().iter().all(|c| c.len() == 512));
    assert_eq!(fs.concat().len(), 2560);

    let z = extract_all(&vector(vec![Complex::new(0.0, 0.0); 512]), &FeatureConfig::default()).unwrap();
    assert!(z.ip.iter().all(|&v| v == 0.0));
    assert!(z.amp.iter().all(|&v| v == 0.0));
    assert!(z.dse.iter().all(|&v| v == 0.0));
    assert!(z.sms.iter().all(|&v| (v + 120.0).abs() < 1e-12));
}

fn circular_bin_distance(a: usize, b: usize, n: usize) -> usize {
    let d = a.abs_diff(b);
    d.min(n - d)
}

#[test]
fn sms_peak_tracks_generator_doppler() {
    let p = SceneParams {
        n_pulses: 4096,
        prf_hz: 1000.0,
        clutter_power: 1.0,
        target_amplitude: 3.0,
        target_doppler_hz: 187.0,
        doppler_jitter_hz: 1.0,
        seed: 21,
        ..Default::default()
    };
    let (target, clutter) = synthesize_scene(&p).unwrap();
    let expected = ((p.target_doppler_hz / p.prf_hz) * 512.0).round() as usize % 512;
    let cfg = FeatureConfig::default();
    let mut clutter_hits = 0;
    let windows = segment_echoes(&target, 512, 512).unwrap();
    for v in &windows {
        let s = extract_all(v, &cfg).unwrap().sms;
        let peak = (0..512).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert!(circular_bin_distance(peak, expected, 512) <= 2, "peak {peak} vs {expected}");
    }
    for v in segment_echoes(&clutter, 512, 512).unwrap() {
        let s = extract_all(&v, &cfg).unwrap().sms;
        let peak = (0..512).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        clutter_hits += usize::from(circular_bin_distance(peak, expected, 512) <= 2);
    }
    assert!(clutter_hits < windows.len());
}

#[test]
fn default_patch_geometry() {
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let fs = extract_all(&vector(common::random_signal(&mut r, 512)), &FeatureConfig::default()).unwrap();
    let s = SampleFeatures { sample_id: 9, label: Label::Target, features: fs };
    let b = patch(std::slice::from_ref(&s), 48).unwrap();
    assert_eq!(b.k, 55);
    assert_eq!(unpatch(&b), vec![s]);
}

fn arbitrary_features(n: usize, seed: u64) -> FeatureSet {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let ch = |r: &mut ChaCha8Rng| (0..n).map(|_| rand::Rng::random_range(r, -5.0..5.0)).collect();
    FeatureSet::from_channels([ch(&mut r), ch(&mut r), ch(&mut r), ch(&mut r), ch(&mut r)])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn patch_round_trip_is_exact(n in 1usize..300, l in 1usize..100, seed in any::<u64>()) {
        let samples: Vec<SampleFeatures> = (0..3)
            .map(|i| SampleFeatures { sample_id: i, label: Label::Clutter, features: arbitrary_features(n, seed ^ i) })
            .collect();
        let b = patch(&samples, l).unwrap();
        prop_assert_eq!(b.k, 5 * n.div_ceil(l));
        for i in 0..b.len() {
            for t in 0..b.k {
                let o = b.origin[t];
                let valid = (n - o.patch * l).min(l);
                let tok = &b.sample(i)[t * l..(t + 1) * l];
                prop_assert!(tok[valid..].iter().all(|&v| v == 0.0));
            }
        }
        prop_assert_eq!(unpatch(&b), samples);
    }

    #[test]
    fn phase_and_amplitude_ranges(re in prop::collection::vec(-10.0f64..10.0, 1..64), im_seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(im_seed);
        let x: Vec<Complex> = re.iter().map(|&a| Complex::new(a, rand::Rng::random_range(&mut r, -10.0..10.0))).collect();
        for v in f::instantaneous_phase(&x).into_iter().chain(f::doppler_phase(&x)) {
            prop_assert!(v > -PI && v <= PI);
        }
        prop_assert!(f::amplitude(&x).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dse_sum_bounded_by_log_n(spec in prop::collection::vec(0.0f64..5.0, 1..200)) {
        prop_assume!(spec.iter().sum::<f64>() > 0.0);
        let d = f::doppler_spectrum_entropy(&spec).unwrap();
        let total: f64 = d.iter().sum();
        prop_assert!(d.iter().all(|&v| v >= 0.0));
        prop_assert!(total <= (spec.len() as f64).ln() + 1e-12);
    }
}
