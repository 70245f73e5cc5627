use cessl::model::LEADS;
use cessl::numeric::{Matrix, SeededRng};
use cessl::signal::{
    apply_weak, cutmix, cutmix_at, cutmix_window, draw_weak_transform, pad_and_normalize, preprocess,
    weak_augment, RawRecording, Recording, WeakTransform, NOISE_SNR_DB, TARGET_RATE,
};
use proptest::prelude::*;

fn raw(n: usize, seed: u64) -> RawRecording {
    let mut rng = SeededRng::new(seed);
    let m = Matrix::from_fn(LEADS, n, |c, _| 3.0 * c as f64 + 2.0 * rng.standard_normal());
    RawRecording::new("r", m, TARGET_RATE).unwrap()
}

fn labeled(l: usize, seed: u64, label: Vec<f64>) -> Recording {
    let mut rng = SeededRng::new(seed);
    Recording {
        id: format!("r{seed}"),
        signal: Matrix::random_normal(LEADS, l, 1.0, &mut rng),
        label: Some(label),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalization_is_idempotent(n in 8usize..300, l in 8usize..300, seed in any::<u64>()) {
        let once = pad_and_normalize(&raw(n, seed), l).unwrap().recording;
        let span = n.min(l);
        let real = Matrix::from_fn(LEADS, span, |c, j| once.signal.get(c, j));
        let twice = pad_and_normalize(&RawRecording::new("r", real, TARGET_RATE).unwrap(), l).unwrap().recording;
        prop_assert!(twice.signal.max_abs_diff(&once.signal) <= 1e-9);
        for c in 0..LEADS {
            let row = &once.signal.row(c)[..span];
            let m = row.iter().sum::<f64>() / span as f64;
            let sd = (row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / span as f64).sqrt();
            prop_assert!(m.abs() <= 1e-6 && (sd - 1.0).abs() <= 1e-6);
            prop_assert!(once.signal.row(c)[span..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cutmix_conserves_length_and_shape(l in 4usize..200, lambda in 0.0f64..=1.0, seed in any::<u64>()) {
        let a = labeled(l, seed, vec![1.0, 0.0, 1.0]);
        let b = labeled(l, seed ^ 1, vec![0.0, 0.0, 1.0]);
        let w = cutmix_window(lambda, l);
        let start = SeededRng::new(seed).below(l - w + 1);
        let mixed = cutmix_at(&a, &b, lambda, start).unwrap();
        prop_assert_eq!(mixed.signal.shape(), (LEADS, l));
        // a keeps L - w samples, b donates w
        let from_b = (0..l).filter(|&j| mixed.signal.get(0, j) == b.signal.get(0, j) && mixed.signal.get(0, j) != a.signal.get(0, j)).count();
        prop_assert_eq!(from_b + (l - w), l);
        for c in 0..LEADS {
            prop_assert_eq!(&mixed.signal.row(c)[start..start + w], &b.signal.row(c)[start..start + w]);
            prop_assert_eq!(&mixed.signal.row(c)[..start], &a.signal.row(c)[..start]);
            prop_assert_eq!(&mixed.signal.row(c)[start + w..], &a.signal.row(c)[start + w..]);
        }
        let y = mixed.label.unwrap();
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(y[1], 0.0);
        prop_assert_eq!(y[2], 1.0);
    }

    #[test]
    fn augmentations_keep_shape(l in 16usize..256, seed in any::<u64>()) {
        let u = labeled(l, seed, vec![0.0, 1.0]);
        let mut rng = SeededRng::new(seed);
        prop_assert_eq!(weak_augment(&u, TARGET_RATE, &mut rng).unwrap().signal.shape(), (LEADS, l));
        let v = labeled(l, seed ^ 5, vec![1.0, 1.0]);
        prop_assert_eq!(cutmix(&u, &v, 1.0, &mut rng).unwrap().signal.shape(), (LEADS, l));
        let t = draw_weak_transform(l, &mut rng).unwrap();
        prop_assert_eq!(apply_weak(&u, t, TARGET_RATE, &mut rng).unwrap().signal.shape(), (LEADS, l));
    }
}

#[test]
fn noise_transform_hits_target_snr() {
    let l = 20_000;
    let u = labeled(l, 3, vec![0.0]);
    let mut rng = SeededRng::new(4);
    let noisy = apply_weak(&u, WeakTransform::Noise { snr_db: NOISE_SNR_DB }, TARGET_RATE, &mut rng).unwrap();
    for c in 0..LEADS {
        let s: f64 = u.signal.row(c).iter().map(|v| v * v).sum();
        let n: f64 = noisy.signal.row(c).iter().zip(u.signal.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
        let snr = 10.0 * (s / n).log10();
        assert!((snr - 30.0).abs() <= 1.0, "channel {c}: {snr} dB");
    }
}

#[test]
fn preprocessing_yields_twelve_normalized_leads() {
    let mut rng = SeededRng::new(8);
    let n = 2500;
    let m = Matrix::from_fn(LEADS, n, |c, i| {
        (2.0 * std::f64::consts::PI * 7.0 * i as f64 / 500.0).sin() * (1.0 + c as f64) + 0.1 * rng.standard_normal()
    });
    let rec = RawRecording::new("x", m, 500.0).unwrap();
    let out = preprocess(&rec, TARGET_RATE, 2048).unwrap();
    assert!(out.flat_channels.is_empty());
    assert_eq!(out.recording.signal.shape(), (LEADS, 2048));
    let real = 2000;
    for c in 0..LEADS {
        let row = &out.recording.signal.row(c)[..real];
        let m = row.iter().sum::<f64>() / real as f64;
        assert!(m.abs() <= 1e-6);
        assert!(out.recording.signal.row(c)[real..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn constant_channel_becomes_zeros() {
    let mut m = Matrix::random_normal(LEADS, 64, 1.0, &mut SeededRng::new(1));
    m.row_mut(4).fill(2.5);
    let out = pad_and_normalize(&RawRecording::new("c", m, TARGET_RATE).unwrap(), 64).unwrap();
    assert_eq!(out.flat_channels, vec![4]);
    assert!(out.recording.signal.row(4).iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_channel_count_rejected() {
    assert!(RawRecording::new("x", Matrix::zeros(11, 10), TARGET_RATE).is_err());
    let a = labeled(10, 1, vec![1.0]);
    let b = labeled(12, 2, vec![1.0]);
    assert!(cutmix_at(&a, &b, 0.5, 0).is_err());
    let unlabeled = Recording { label: None, ..a.clone() };
    assert!(cutmix_at(&unlabeled, &a, 0.5, 0).is_err());
}
