use cessl::Error;
use cessl::metrics::{bce_with_logits, sigmoid};
use cessl::numeric::{
    finite_diff_gradient, matmul, max_rel_error, Matrix, SeededRng, FD_STEP,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, 1.0, &mut SeededRng::new(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_is_associative(m in 1usize..9, k in 1usize..9, l in 1usize..9, n in 1usize..9, seed in any::<u64>()) {
        let a = matrix(m, k, seed);
        let b = matrix(k, l, seed ^ 1);
        let c = matrix(l, n, seed ^ 2);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = a.max_abs() * b.max_abs() * c.max_abs() * (k * l) as f64;
        prop_assert!(left.max_abs_diff(&right) <= 1e-9 * scale.max(1.0));
    }

    #[test]
    fn quadratics_differentiate_to_1e_10(n in 1usize..6, seed in any::<u64>()) {
        // f(x) = ½ xᵀQx + bᵀx + c, gradient ½(Q + Qᵀ)x + b
        let q = matrix(n, n, seed);
        let b = matrix(n, 1, seed ^ 3);
        let x = matrix(n, 1, seed ^ 4);
        let f = |v: &Matrix| {
            let qv = matmul(&q, v).unwrap();
            0.5 * v.data().iter().zip(qv.data()).map(|(a, b)| a * b).sum::<f64>()
                + v.data().iter().zip(b.data()).map(|(a, b)| a * b).sum::<f64>()
                + 1.5
        };
        let sym = q.add(&q.transpose()).unwrap().scale(0.5);
        let exact = matmul(&sym, &x).unwrap().add(&b).unwrap();
        let fd = finite_diff_gradient(f, &x, 1e-4).unwrap();
        prop_assert!(fd.max_abs_diff(&exact) <= 1e-10 * (1.0 + exact.max_abs()));
    }

    #[test]
    fn public_results_stay_finite(r in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
        let a = matrix(r, c, seed);
        prop_assert_eq!(a.len(), r * c);
        prop_assert!(a.all_finite());
        prop_assert!(matmul(&a, &a.transpose()).unwrap().all_finite());
    }
}

#[test]
fn rng_stream_is_pinned() {
    // Values fixed once so any change to the generator is caught across runs.
    let mut rng = SeededRng::new(42);
    let first: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
    let mut again = SeededRng::new(42);
    assert_eq!(first, (0..4).map(|_| again.next_u64()).collect::<Vec<_>>());
    assert_eq!(first, PINNED);
}

const PINNED: [u64; 4] = [4178418447715145737, 4410739922618931473, 14034899209665866285, 9736923071240364268];

#[test]
fn derived_streams_differ() {
    let a: Vec<u64> = (0..8).map(|s| SeededRng::derive(7, s).next_u64()).collect();
    let mut uniq = a.clone();
    uniq.sort();
    uniq.dedup();
    assert_eq!(uniq.len(), a.len());
    assert_eq!(SeededRng::new(7).fork(3).next_u64(), SeededRng::derive(7, 3).next_u64());
}

#[test]
fn uniform_and_normal_moments() {
    let mut rng = SeededRng::new(9);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let u = rng.uniform01();
        assert!((0.0..1.0).contains(&u));
        s += u;
    }
    // Var(U) = 1/12
    let se = (1.0f64 / 12.0 / n as f64).sqrt();
    assert!((s / n as f64 - 0.5).abs() < 5.0 * se);
    s = 0.0;
    for _ in 0..n {
        let z = rng.draw_normal(1.0, 2.0).unwrap();
        s += z;
        s2 += z * z;
    }
    let mean = s / n as f64;
    let var = s2 / n as f64 - mean * mean;
    assert!((mean - 1.0).abs() < 5.0 * 2.0 / (n as f64).sqrt());
    // SE of the variance estimate is about σ²·sqrt(2/n)
    assert!((var - 4.0).abs() < 5.0 * 4.0 * (2.0 / n as f64).sqrt());
}

#[test]
fn bce_of_linear_logits_backward_matches_differences() {
    let mut rng = SeededRng::new(11);
    let x = Matrix::random_normal(4, 3, 1.0, &mut rng);
    let w = Matrix::random_normal(3, 3, 0.7, &mut rng);
    let y = Matrix::from_fn(4, 3, |i, j| ((i + j) % 2) as f64);
    let loss = |w: &Matrix| bce_with_logits(&matmul(&x, w).unwrap(), &y).unwrap().0;
    let (_, g_logits) = bce_with_logits(&matmul(&x, &w).unwrap(), &y).unwrap();
    let analytic = matmul(&x.transpose(), &g_logits).unwrap();
    let fd = finite_diff_gradient(loss, &w, FD_STEP).unwrap();
    assert!(max_rel_error(&analytic, &fd, 1e-8) <= 1e-6);
    assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
}

#[test]
fn non_finite_objective_names_the_entry() {
    let x = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let err = finite_diff_gradient(|v| if v.get(1, 0) != 3.0 { f64::NAN } else { 0.0 }, &x, 1e-5).unwrap_err();
    assert!(matches!(err, Error::Oracle { row: 1, col: 0, .. }), "{err}");
}
