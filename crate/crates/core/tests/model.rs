mod common;

use cessl::model::{pooled_stats, AttentionBlock, BnMode, ConvBlock, Provenance, SemiBn};
use cessl::numeric::{finite_diff_gradient, tensor_rel_error, Matrix, SeededRng, FD_STEP};
use cessl::param::Param;
use proptest::prelude::*;

fn dot(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn params(f: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Param))) -> Vec<(String, Matrix, Matrix)> {
    let mut out = Vec::new();
    f(&mut |name, p| out.push((name.to_string(), p.value.clone(), p.grad.clone())));
    out
}

fn set_param(f: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Param)), target: &str, v: &Matrix) {
    f(&mut |name, p| {
        if name == target {
            p.value = v.clone();
        }
    });
}

fn conv_loss(blk: &ConvBlock, x: &Matrix, probe: &Matrix) -> f64 {
    let mut b = blk.clone();
    for w in b.weights_mut() {
        w.begin_step();
    }
    dot(&b.forward_train((x, 2), None, 32, false).unwrap().0, probe)
}

#[test]
fn conv_block_gradients_on_two_records_of_twelve_leads() {
    let mut rng = SeededRng::new(31);
    let mut blk = ConvBlock::new(12, 8, 7, 2, &mut rng).unwrap();
    blk.bn.mode = BnMode::TrainSupervised;
    let x = Matrix::random_normal(12, 2 * 32, 1.0, &mut rng);
    let probe = Matrix::random_normal(8, 2 * 16, 1.0, &mut rng);

    let mut g = blk.clone();
    for w in g.weights_mut() {
        w.begin_step();
    }
    g.forward_train((&x, 2), None, 32, false).unwrap();
    assert!(g.kink_distance().unwrap() > 1e-3, "input straddles a kink; pick another seed");
    let (dx, _) = g.backward(&probe, None, true).unwrap();
    for w in g.weights_mut() {
        w.finish_backward().unwrap();
    }
    let fd = finite_diff_gradient(|v| conv_loss(&blk, v, &probe), &x, FD_STEP).unwrap();
    assert!(tensor_rel_error(&dx.unwrap(), &fd, 1e-7) <= 1e-6);

    for (name, value, grad) in params(&mut |f| g.visit_trainable("conv", f)) {
        let fd = finite_diff_gradient(
            |v| {
                let mut c = blk.clone();
                set_param(&mut |f| c.visit_trainable("conv", f), &name, v);
                conv_loss(&c, &x, &probe)
            },
            &value,
            FD_STEP,
        )
        .unwrap();
        let err = tensor_rel_error(&grad, &fd, 1e-7);
        assert!(err <= 1e-6, "{name}: {err:e}");
    }
}

fn att_loss(blk: &AttentionBlock, x: &Matrix, probe: &Matrix) -> f64 {
    let mut b = blk.clone();
    for (_, w) in b.named_weights_mut() {
        w.begin_step();
    }
    dot(&b.forward_train(x, 1, 3, Provenance::Labeled).unwrap(), probe)
}

#[test]
fn attention_gradients_on_three_tokens_two_heads() {
    let mut rng = SeededRng::new(17);
    let blk = AttentionBlock::new(8, 2, &mut rng).unwrap();
    let x = Matrix::random_normal(3, 8, 1.0, &mut rng);
    let probe = Matrix::random_normal(3, 8, 1.0, &mut rng);
    let mut g = blk.clone();
    for (_, w) in g.named_weights_mut() {
        w.begin_step();
    }
    g.forward_train(&x, 1, 3, Provenance::Labeled).unwrap();
    let dx = g.backward(&probe).unwrap();
    for (_, w) in g.named_weights_mut() {
        w.finish_backward().unwrap();
    }
    let fd = finite_diff_gradient(|v| att_loss(&blk, v, &probe), &x, FD_STEP).unwrap();
    assert!(tensor_rel_error(&dx, &fd, 1e-7) <= 1e-6);
    for (name, value, grad) in params(&mut |f| g.visit_trainable("att", f)) {
        let fd = finite_diff_gradient(
            |v| {
                let mut c = blk.clone();
                set_param(&mut |f| c.visit_trainable("att", f), &name, v);
                att_loss(&c, &x, &probe)
            },
            &value,
            FD_STEP,
        )
        .unwrap();
        let err = tensor_rel_error(&grad, &fd, 1e-7);
        assert!(err <= 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn zero_input_gives_zero_pre_activation() {
    let mut rng = SeededRng::new(2);
    let blk = ConvBlock::new(12, 8, 7, 2, &mut rng).unwrap();
    let z = blk.convolve(blk.kernel.base(), &Matrix::zeros(12, 3 * 40), 3, 40).unwrap();
    assert_eq!(z.shape(), (8, 3 * 20));
    assert!(z.data().iter().all(|&v| v == 0.0));
}

/// Weighted moments over the concatenated columns, each labeled column
/// weighted γ/cols_b and each unlabeled column (1−γ)/cols_u.
fn weighted_moments(l: &Matrix, nb: usize, u: &Matrix, nu: usize) -> (Vec<f64>, Vec<f64>) {
    let gamma = nb as f64 / (nb + nu) as f64;
    let (wl, wu) = (gamma / l.cols() as f64, (1.0 - gamma) / u.cols() as f64);
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for c in 0..l.rows() {
        let cols = l.row(c).iter().map(|&v| (wl, v)).chain(u.row(c).iter().map(|&v| (wu, v)));
        let m: f64 = cols.clone().map(|(w, v)| w * v).sum();
        let var: f64 = cols.map(|(w, v)| w * (v - m) * (v - m)).sum();
        means.push(m);
        vars.push(var);
    }
    (means, vars)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn pooled_statistics_match_weighted_moments(
        c in 1usize..6, len in 1usize..9, nb in 1usize..6, nu in 1usize..6, seed in any::<u64>()
    ) {
        let mut rng = SeededRng::new(seed);
        let l = Matrix::random_normal(c, nb * len, 1.0, &mut rng);
        let u = Matrix::random_normal(c, nu * len, 2.0, &mut rng).map(|v| v + 0.7);
        let s = pooled_stats(&l, nb, Some((&u, nu))).unwrap();
        let (m, v) = weighted_moments(&l, nb, &u, nu);
        prop_assert!((s.gamma - nb as f64 / (nb + nu) as f64).abs() == 0.0);
        for k in 0..c {
            prop_assert!((s.mean[k] - m[k]).abs() <= 1e-12);
            prop_assert!((s.var[k] - v[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn unlabeled_rows_never_reach_attention_or_head(nb in 1usize..4, nu in 1usize..5, steps in 1usize..4, seed in any::<u64>()) {
        let mut m = common::fresh_micro(seed, 2, 0.3);
        m.set_bn_mode(BnMode::TrainSemi);
        let cfg = common::micro();
        let mut rng = SeededRng::new(seed ^ 9);
        for _ in 0..steps {
            let (xl, _) = common::batch(&cfg, nb, &mut rng);
            let (xu, _) = common::batch(&cfg, nu, &mut rng);
            m.begin_step(Some(&mut rng));
            let logits = m.forward_train(&xl, nb, Some((&xu, nu)), true).unwrap();
            m.backward(&logits, false).unwrap();
        }
        let log = m.provenance();
        prop_assert_eq!(log.unlabeled_rows, 0);
        prop_assert!(log.labeled_rows > 0);
    }
}

#[test]
fn equal_batch_sizes_give_half_gamma_and_concatenated_mean() {
    let mut rng = SeededRng::new(4);
    let l = Matrix::random_normal(3, 4 * 5, 1.0, &mut rng);
    let u = Matrix::random_normal(3, 4 * 5, 1.0, &mut rng);
    let s = pooled_stats(&l, 4, Some((&u, 4))).unwrap();
    assert_eq!(s.gamma, 0.5);
    for c in 0..3 {
        let all: f64 = l.row(c).iter().chain(u.row(c)).sum::<f64>() / 40.0;
        assert!((s.mean[c] - all).abs() <= 1e-12);
    }
}

#[test]
fn duplicated_unlabeled_batch_equals_supervised_normalization() {
    let mut rng = SeededRng::new(12);
    let x = Matrix::random_normal(4, 3 * 6, 1.0, &mut rng);
    let mut semi = SemiBn::new(4);
    semi.mode = BnMode::TrainSemi;
    let mut sup = SemiBn::new(4);
    let (a, _) = semi.forward_train(&x, 3, Some((&x, 3)), true).unwrap();
    let (b, _) = sup.forward_train(&x, 3, None, true).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-12);
}

#[test]
fn gates_on_with_eval_statistics_is_a_pure_function() {
    let mut m = common::trained_micro(8, 2, 0.4);
    m.set_bn_mode(BnMode::Eval);
    m.force_gates(true);
    let cfg = common::micro();
    let (x, _) = common::batch(&cfg, 3, &mut SeededRng::new(1));
    let mut a = m.clone();
    a.begin_step(Some(&mut SeededRng::new(100)));
    let ya = a.forward_train(&x, 3, None, true).unwrap();
    let mut b = m.clone();
    b.begin_step(Some(&mut SeededRng::new(200)));
    let yb = b.forward_train(&x, 3, None, true).unwrap();
    assert_eq!(ya, yb);
    assert_eq!(m.forward_eval(&x, 3).unwrap(), m.forward_eval(&x, 3).unwrap());
}
