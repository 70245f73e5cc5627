#![allow(dead_code)]

pub mod metric_oracles;

use cessl::data::{generate_synthetic, SynthConfig};
use cessl::model::{AdapterPolicy, Backbone, BackboneConfig};
use cessl::numeric::{Matrix, SeededRng};
use cessl::signal::Recording;

pub fn micro() -> BackboneConfig {
    BackboneConfig {
        n_conv: 2,
        n_att: 1,
        n_cls: 1,
        channels: 4,
        hidden: 4,
        heads: 2,
        conv_kernel: 3,
        conv_stride: 2,
        seq_len: 12,
        num_classes: 3,
        leads: 2,
    }
}

/// Micro backbone with rank-`r` adapters and zero `B`.
pub fn fresh_micro(seed: u64, r: usize, p: f64) -> Backbone {
    let mut rng = SeededRng::new(seed);
    let mut m = Backbone::new(micro(), &mut rng).unwrap();
    m.attach_adapters(r, p, 0.3, AdapterPolicy::default(), &mut rng).unwrap();
    m
}

/// Like [`fresh_micro`] but with random `B` so adapters change the output.
pub fn trained_micro(seed: u64, r: usize, p: f64) -> Backbone {
    let mut m = fresh_micro(seed, r, p);
    let mut rng = SeededRng::new(seed ^ 0xB);
    for (_, w) in m.weights_mut() {
        if let Some(b) = w.lora_b_mut() {
            *b = Matrix::random_normal(b.rows(), b.cols(), 0.3, &mut rng);
        }
    }
    m
}

/// Random signals (`leads x n·L`) and multi-hot targets (`n x C`).
pub fn batch(cfg: &BackboneConfig, n: usize, rng: &mut SeededRng) -> (Matrix, Matrix) {
    let x = Matrix::random_normal(cfg.leads, n * cfg.seq_len, 1.0, rng);
    let y = Matrix::from_fn(n, cfg.num_classes, |_, _| f64::from(u8::from(rng.bernoulli(0.4))));
    (x, y)
}

/// Preprocessed synthetic recordings with labels attached.
pub fn synthetic(n: usize, classes: usize, len: usize, seed: u64) -> Vec<Recording> {
    generate_synthetic(&SynthConfig::new(n, classes, len, seed))
        .unwrap()
        .recordings(len)
        .unwrap()
}

/// Toy config shortened to `len` samples.
pub fn short_toy(classes: usize, len: usize) -> BackboneConfig {
    BackboneConfig {
        seq_len: len,
        ..BackboneConfig::toy(classes)
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// BCE at the merged weights and the mean and standard error of BCE over
/// `draws` sampled gate configurations, all on one batch with frozen
/// batch-norm statistics.
pub fn jensen_sample(seed: u64, draws: usize) -> (f64, f64, f64) {
    use cessl::metrics::bce_with_logits;
    use cessl::model::BnMode;
    let mut m = trained_micro(seed, 2, 0.4);
    m.set_bn_mode(BnMode::Eval);
    let cfg = micro();
    let mut rng = SeededRng::new(seed ^ 0x7E);
    let (x, y) = batch(&cfg, 4, &mut rng);
    let merged = bce_with_logits(&m.forward_eval(&x, 4).unwrap(), &y).unwrap().0;
    let losses: Vec<f64> = (0..draws)
        .map(|_| {
            m.begin_step(Some(&mut rng));
            bce_with_logits(&m.forward_train(&x, 4, None, false).unwrap(), &y).unwrap().0
        })
        .collect();
    let n = draws as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n - 1.0);
    (merged, mean, (var / n).sqrt())
}

/// Largest per-entry z-score of the Monte-Carlo mean of gated outputs of one
/// adapted layer against its merged output.
pub fn gated_mean_zscore(seed: u64, draws: usize) -> f64 {
    use cessl::adapter::AdaptedWeight;
    let mut rng = SeededRng::new(seed);
    let mut w = AdaptedWeight::full(Matrix::random_normal(5, 4, 1.0, &mut rng));
    w.attach_adapter(2, 0.3, 0.5, &mut rng).unwrap();
    *w.lora_b_mut().unwrap() = Matrix::random_normal(5, 2, 1.0, &mut rng);
    let x = Matrix::random_normal(4, 3, 1.0, &mut rng);
    let merged = w.gated_forward(&x, &mut rng, false).unwrap();
    let mut sum = Matrix::zeros(5, 3);
    let mut sq = Matrix::zeros(5, 3);
    for _ in 0..draws {
        let y = w.gated_forward(&x, &mut rng, true).unwrap();
        sum.axpy(1.0, &y).unwrap();
        sq.axpy(1.0, &y.map(|v| v * v)).unwrap();
    }
    let n = draws as f64;
    (0..merged.len())
        .map(|k| {
            let mean = sum.data()[k] / n;
            let var = (sq.data()[k] / n - mean * mean).max(0.0) * n / (n - 1.0);
            (mean - merged.data()[k]).abs() / (var / n).sqrt()
        })
        .fold(0.0, f64::max)
}
