mod common;

use cessl::adapter::{init_adapter, AdaptedWeight, WeightMode, DEFAULT_SIGMA};
use cessl::metrics::bce_with_logits;
use cessl::model::BnMode;
use cessl::numeric::{matmul, Matrix, SeededRng};
use cessl::trainer::AdamW;
use proptest::prelude::*;

#[test]
fn baked_model_matches_adapter_eval_path() {
    for seed in 0..5 {
        let mut m = common::trained_micro(seed, 2, 0.25);
        let (x, _) = common::batch(&common::micro(), 3, &mut SeededRng::new(seed));
        let adapter_path = m.forward_eval(&x, 3).unwrap();
        m.bake();
        assert!(m.is_merged());
        assert!(m.forward_eval(&x, 3).unwrap().max_abs_diff(&adapter_path) <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn merge_is_base_plus_scaled_product(d1 in 2usize..7, d2 in 2usize..7, p in 0.0f64..0.95, seed in any::<u64>()) {
        let mut rng = SeededRng::new(seed);
        let r = 2;
        let mut w = init_adapter(Matrix::random_normal(d1, d2, 1.0, &mut rng), r, p, 0.5, &mut rng).unwrap();
        *w.lora_b_mut().unwrap() = Matrix::random_normal(d1, r, 1.0, &mut rng);
        let ba = matmul(w.lora_b().unwrap(), w.lora_a().unwrap()).unwrap();
        let expected = w.base().add(&ba.scale(1.0 - p)).unwrap();
        prop_assert!(w.merge().w.max_abs_diff(&expected) <= 1e-12);
        let x = Matrix::random_normal(d2, 3, 1.0, &mut rng);
        let y = w.gated_forward(&x, &mut rng, false).unwrap();
        prop_assert!(y.max_abs_diff(&matmul(&expected, &x).unwrap()) <= 1e-12);
    }
}

#[test]
fn gated_outputs_average_to_the_merged_output() {
    for seed in 0..3 {
        let z = common::gated_mean_zscore(seed, 100_000);
        assert!(z <= 5.0, "seed {seed}: {z}");
    }
}

#[test]
fn merged_loss_is_below_the_gate_average() {
    for seed in 0..5 {
        let (merged, mean, se) = common::jensen_sample(seed, 1000);
        assert!(merged <= mean + 3.0 * se, "seed {seed}: {merged} vs {mean} ± {se}");
    }
}

#[test]
fn base_weights_survive_training_steps() {
    let mut m = common::fresh_micro(3, 2, 0.3);
    m.set_bn_mode(BnMode::TrainSupervised);
    let before = m.base_fingerprints();
    let cfg = common::micro();
    let mut rng = SeededRng::new(4);
    let mut opt = AdamW::new(1e-2, (0.9, 0.999), 1e-8, 0.01);
    let frozen: Vec<String> = m
        .weights()
        .into_iter()
        .filter(|(_, w)| w.mode() != WeightMode::Full)
        .map(|(n, _)| n)
        .collect();
    for _ in 0..25 {
        let (x, y) = common::batch(&cfg, 3, &mut rng);
        m.zero_grad();
        m.begin_step(Some(&mut rng));
        let logits = m.forward_train(&x, 3, None, true).unwrap();
        let (_, g) = bce_with_logits(&logits, &y).unwrap();
        m.backward(&g, false).unwrap();
        opt.step(&mut m).unwrap();
    }
    let after = m.base_fingerprints();
    for (name, h) in &before {
        if frozen.contains(name) {
            let now = after.iter().find(|(n, _)| n == name).unwrap().1;
            assert_eq!(*h, now, "{name} changed");
        }
    }
    // the adapters did move
    assert!(m.weights().iter().any(|(_, w)| w.lora_b().is_some_and(|b| b.max_abs() > 0.0)));
}

#[test]
fn init_moments_follow_sigma() {
    let mut rng = SeededRng::new(21);
    let w = init_adapter(Matrix::zeros(300, 400), 200, 0.2, DEFAULT_SIGMA, &mut rng).unwrap();
    let a = w.lora_a().unwrap();
    let n = a.len() as f64;
    let mean = a.sum() / n;
    let sd = (a.frobenius_sq() / n - mean * mean).sqrt();
    assert!(mean.abs() < 5.0 * DEFAULT_SIGMA / n.sqrt());
    assert!((sd - DEFAULT_SIGMA).abs() < 5.0 * DEFAULT_SIGMA / (2.0 * n).sqrt());
    assert_eq!(w.lora_b().unwrap().max_abs(), 0.0);
    assert_eq!(w.trainable_params(), 200 * 700);
}

fn chi_square(counts: &[f64], expected: &[f64]) -> f64 {
    counts.iter().zip(expected).map(|(o, e)| (o - e) * (o - e) / e).sum()
}

#[test]
fn gates_are_independent_across_layers_and_steps() {
    let p = 0.3;
    let mut m = common::fresh_micro(5, 2, p);
    let mut rng = SeededRng::new(6);
    let steps = 20_000;
    let mut across = [0.0; 4];
    let mut over_time = [0.0; 4];
    let mut prev: Option<bool> = None;
    for _ in 0..steps {
        m.begin_step(Some(&mut rng));
        let g = m.gates();
        let (a, b) = (g[0].1, g[g.len() - 1].1);
        across[usize::from(a) * 2 + usize::from(b)] += 1.0;
        if let Some(pa) = prev {
            over_time[usize::from(pa) * 2 + usize::from(a)] += 1.0;
        }
        prev = Some(a);
    }
    let q = 1.0 - p;
    let cell = |n: f64| [p * p * n, p * q * n, q * p * n, q * q * n];
    // 3 degrees of freedom; 16.27 is the 0.999 quantile
    assert!(chi_square(&across, &cell(steps as f64)) < 16.27);
    assert!(chi_square(&over_time, &cell(steps as f64 - 1.0)) < 16.27);
}

#[test]
fn frozen_and_full_weights_have_no_adapter() {
    let w = AdaptedWeight::frozen(Matrix::filled(3, 3, 1.0));
    assert_eq!(w.trainable_params(), 0);
    assert!(w.lora_a().is_none());
    let mut rng = SeededRng::new(0);
    assert!(init_adapter(Matrix::zeros(3, 3), 4, 0.2, 0.02, &mut rng).is_err());
    assert!(init_adapter(Matrix::zeros(3, 3), 2, 1.0, 0.02, &mut rng).is_err());
}
