//! Finite-difference audit of every hand-written backward pass.
//!
//! Each layer is built at a small random shape, its trainable tensors are
//! perturbed away from their initial values, and the analytic gradients of
//! a random linear probe of its outputs are compared with extrapolated
//! central differences. Inputs are redrawn until no leaky-ReLU input lies
//! near its kink. The error of a tensor is its largest entry deviation
//! relative to the tensor's largest entry.

use serde::{Deserialize, Serialize};

use crate::adapter::AdaptedWeight;
use crate::error::Result;
use crate::metrics::bce_with_logits;
use crate::model::attention::{AttentionBlock, Provenance};
use crate::model::batchnorm::{BnMode, SemiBn};
use crate::model::conv::ConvBlock;
use crate::model::head::ClassifierHead;
use crate::model::{AdapterPolicy, Backbone, BackboneConfig};
use crate::numeric::{finite_diff_gradient_extrapolated, tensor_rel_error, Matrix, SeededRng};
use crate::param::ParamFn;

/// Largest tolerated relative error.
pub const GRADCHECK_TOL: f64 = 1e-6;
/// Absolute floor of the error scale, per unit of `1 + |loss|`. Central
/// differences carry absolute noise of order `eps·|loss|/h`, so tensors
/// whose gradient is far below that are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// Minimum distance of any leaky-ReLU input from zero.
const KINK_MARGIN: f64 = 1e-2;
const MAX_REDRAWS: usize = 200;

/// Coarse step of the extrapolated central differences.
const GRADCHECK_STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub layer: String,
    pub tensor: String,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn worst(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:<28} {:>12}  result\n", "layer", "tensor", "max_rel_err");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<10} {:<28} {:>12.3e}  {}\n",
                r.layer,
                r.tensor,
                r.max_rel_error,
                if r.pass { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

trait Subject: Clone {
    fn loss(&mut self, inputs: &[Matrix]) -> Result<f64>;
    /// Forward and backward; returns the input gradients and leaves
    /// parameter gradients in place.
    fn grads(&mut self, inputs: &[Matrix]) -> Result<Vec<Matrix>>;
    fn visit(&mut self, f: &mut ParamFn<'_>);
    /// Distance of the nearest leaky-ReLU input from zero after `loss`.
    fn kink_gap(&self) -> f64 {
        f64::INFINITY
    }
}

/// Redraws inputs until a forward pass keeps every leaky-ReLU input at
/// least `KINK_MARGIN` from zero, so no difference straddles a kink.
fn smooth_inputs<S: Subject>(
    case: &S,
    rng: &mut SeededRng,
    mut draw: impl FnMut(&mut SeededRng) -> Vec<Matrix>,
) -> Result<Vec<Matrix>> {
    let mut inputs = draw(rng);
    for _ in 0..MAX_REDRAWS {
        let mut probe = case.clone();
        probe.loss(&inputs)?;
        if probe.kink_gap() >= KINK_MARGIN {
            break;
        }
        inputs = draw(rng);
    }
    Ok(inputs)
}

fn probe_sum(y: &Matrix, p: &Matrix) -> Result<f64> {
    Ok(y.hadamard(p)?.sum())
}

fn check<S: Subject>(
    layer: &str,
    subject: &S,
    inputs: &[Matrix],
    input_names: &[&str],
    corrupt: bool,
) -> Result<Vec<GradRow>> {
    let mut s = subject.clone();
    let mut analytic: Vec<(String, Matrix)> = input_names
        .iter()
        .map(|n| n.to_string())
        .zip(s.grads(inputs)?)
        .collect();
    s.visit(&mut |name, p| analytic.push((name.to_string(), p.grad.clone())));

    let floor = GRADCHECK_FLOOR * (1.0 + subject.clone().loss(inputs)?.abs());
    let mut rows = Vec::new();
    for (i, (name, grad)) in analytic.iter().enumerate() {
        let numeric = if i < input_names.len() {
            finite_diff_gradient_extrapolated(
                |m| {
                    let mut xs = inputs.to_vec();
                    xs[i] = m.clone();
                    subject.clone().loss(&xs).unwrap_or(f64::NAN)
                },
                &inputs[i],
                GRADCHECK_STEP,
            )?
        } else {
            let mut v0 = None;
            subject.clone().visit(&mut |n, p| {
                if n == name {
                    v0 = Some(p.value.clone());
                }
            });
            let v0 = v0.expect("visited tensor");
            finite_diff_gradient_extrapolated(
                |m| {
                    let mut c = subject.clone();
                    c.visit(&mut |n, p| {
                        if n == name {
                            p.value = m.clone();
                        }
                    });
                    c.loss(inputs).unwrap_or(f64::NAN)
                },
                &v0,
                GRADCHECK_STEP,
            )?
        };
        let grad = if corrupt { grad.scale(1.0 + 1e-3) } else { grad.clone() };
        let err = tensor_rel_error(&grad, &numeric, floor);
        rows.push(GradRow {
            layer: layer.to_string(),
            tensor: name.clone(),
            max_rel_error: err,
            pass: err <= GRADCHECK_TOL,
        });
    }
    Ok(rows)
}

fn jitter<S: Subject>(s: &mut S, rng: &mut SeededRng, std: f64) {
    s.visit(&mut |_, p| {
        for v in p.value.data_mut() {
            *v += std * rng.standard_normal();
        }
    });
}

#[derive(Clone)]
struct AdapterCase {
    w: AdaptedWeight,
    probe: Matrix,
}

impl Subject for AdapterCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        let y = self.w.gated_forward(&x[0], &mut SeededRng::new(0), true)?;
        probe_sum(&y, &self.probe)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        self.w.gated_forward(&x[0], &mut SeededRng::new(0), true)?;
        Ok(vec![self.w.gated_backward(&self.probe, &x[0])?.grad_x])
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.w.visit_trainable("", f);
    }
}

#[derive(Clone)]
struct BnCase {
    bn: SemiBn,
    n: (usize, usize),
    probes: (Matrix, Matrix),
}

impl BnCase {
    fn unlabeled(&self) -> bool {
        self.bn.mode == BnMode::TrainSemi
    }
}

impl Subject for BnCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        let u = self.unlabeled().then(|| (&x[1], self.n.1));
        let (yl, yu) = self.bn.forward_train(&x[0], self.n.0, u, false)?;
        let mut s = probe_sum(&yl, &self.probes.0)?;
        if let Some(yu) = yu {
            s += probe_sum(&yu, &self.probes.1)?;
        }
        Ok(s)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        let u = self.unlabeled().then(|| (&x[1], self.n.1));
        self.bn.forward_train(&x[0], self.n.0, u, false)?;
        let gu = self.unlabeled().then_some(&self.probes.1);
        let (dl, du) = self.bn.backward(&self.probes.0, gu)?;
        Ok(std::iter::once(dl).chain(du).collect())
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.bn.visit_trainable("bn", f);
    }
}

#[derive(Clone)]
struct ConvCase {
    blk: ConvBlock,
    n: (usize, usize),
    len: usize,
    probes: (Matrix, Matrix),
}

impl Subject for ConvCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        for w in self.blk.weights_mut() {
            w.begin_step();
        }
        let (yl, yu) = self.blk.forward_train((&x[0], self.n.0), Some((&x[1], self.n.1)), self.len, false)?;
        Ok(probe_sum(&yl, &self.probes.0)? + probe_sum(&yu.expect("unlabeled output"), &self.probes.1)?)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        for w in self.blk.weights_mut() {
            w.begin_step();
        }
        self.blk
            .forward_train((&x[0], self.n.0), Some((&x[1], self.n.1)), self.len, false)?;
        let (dl, du) = self.blk.backward(&self.probes.0, Some(&self.probes.1), true)?;
        for w in self.blk.weights_mut() {
            w.finish_backward()?;
        }
        Ok(dl.into_iter().chain(du).collect())
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.blk.visit_trainable("conv", f);
    }

    fn kink_gap(&self) -> f64 {
        self.blk.kink_distance().unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone)]
struct AttCase {
    blk: AttentionBlock,
    n: usize,
    t: usize,
    probe: Matrix,
}

impl Subject for AttCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        for (_, w) in self.blk.named_weights_mut() {
            w.begin_step();
        }
        let y = self.blk.forward_train(&x[0], self.n, self.t, Provenance::Labeled)?;
        probe_sum(&y, &self.probe)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        for (_, w) in self.blk.named_weights_mut() {
            w.begin_step();
        }
        self.blk.forward_train(&x[0], self.n, self.t, Provenance::Labeled)?;
        let gx = self.blk.backward(&self.probe)?;
        for (_, w) in self.blk.named_weights_mut() {
            w.finish_backward()?;
        }
        Ok(vec![gx])
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.blk.visit_trainable("att", f);
    }
}

#[derive(Clone)]
struct HeadCase {
    head: ClassifierHead,
    t: usize,
    probe: Matrix,
}

impl Subject for HeadCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        for (_, w) in self.head.named_weights_mut() {
            w.begin_step();
        }
        let y = self.head.forward_train(&x[0], self.t, Provenance::Labeled)?;
        probe_sum(&y, &self.probe)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        for (_, w) in self.head.named_weights_mut() {
            w.begin_step();
        }
        self.head.forward_train(&x[0], self.t, Provenance::Labeled)?;
        let gx = self.head.backward(&self.probe)?;
        for (_, w) in self.head.named_weights_mut() {
            w.finish_backward()?;
        }
        Ok(vec![gx])
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.head.visit_trainable("head", f);
    }

    fn kink_gap(&self) -> f64 {
        self.head.kink_distance().unwrap_or(f64::INFINITY)
    }
}

#[derive(Clone)]
struct BceCase {
    targets: Matrix,
}

impl Subject for BceCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        Ok(bce_with_logits(&x[0], &self.targets)?.0)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        Ok(vec![bce_with_logits(&x[0], &self.targets)?.1])
    }

    fn visit(&mut self, _: &mut ParamFn<'_>) {}
}

#[derive(Clone)]
struct BackboneCase {
    m: Backbone,
    n: (usize, usize),
    targets: Matrix,
}

impl Subject for BackboneCase {
    fn loss(&mut self, x: &[Matrix]) -> Result<f64> {
        self.m.begin_step(None);
        let z = self.m.forward_train(&x[0], self.n.0, Some((&x[1], self.n.1)), false)?;
        Ok(bce_with_logits(&z, &self.targets)?.0)
    }

    fn grads(&mut self, x: &[Matrix]) -> Result<Vec<Matrix>> {
        self.m.begin_step(None);
        let z = self.m.forward_train(&x[0], self.n.0, Some((&x[1], self.n.1)), false)?;
        let g = bce_with_logits(&z, &self.targets)?.1;
        Ok(self.m.backward(&g, true)?.into_iter().collect())
    }

    fn visit(&mut self, f: &mut ParamFn<'_>) {
        self.m.visit_trainable(f);
    }

    fn kink_gap(&self) -> f64 {
        let convs = self.m.convs.iter().filter_map(|c| c.kink_distance());
        convs.chain(self.m.head.kink_distance()).fold(f64::INFINITY, f64::min)
    }
}

/// Micro backbone used by the whole-network row.
pub fn micro_config() -> BackboneConfig {
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

/// Runs every layer's check at one seed. `corrupt` names a layer whose
/// analytic gradients are deliberately skewed (negative control).
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<GradReport> {
    let mut rng = SeededRng::new(seed);
    let rn = |r: usize, c: usize, rng: &mut SeededRng| Matrix::random_normal(r, c, 1.0, rng);
    let mut rows = Vec::new();
    let bad = |name: &str| corrupt == Some(name);

    let (d1, d2, r, cols) = (3 + rng.below(4), 2 + rng.below(4), 2, 1 + rng.below(3));
    let mut w = AdaptedWeight::full(rn(d1, d2, &mut rng));
    w.attach_adapter(r, 0.3, 0.5, &mut rng)?;
    w.force_active(true);
    let mut case = AdapterCase {
        w,
        probe: rn(d1, cols, &mut rng),
    };
    jitter(&mut case, &mut rng, 0.5);
    let x = rn(d2, cols, &mut rng);
    rows.extend(check("adapter", &case, &[x], &["input"], bad("adapter"))?);

    for (label, mode) in [("semi_bn", BnMode::TrainSemi), ("bn", BnMode::TrainSupervised)] {
        let (c, len, nl, nu) = (1 + rng.below(3), 4 + rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let mut bn = SemiBn::new(c);
        bn.mode = mode;
        let mut case = BnCase {
            bn,
            n: (nl, nu),
            probes: (rn(c, nl * len, &mut rng), rn(c, nu * len, &mut rng)),
        };
        jitter(&mut case, &mut rng, 0.5);
        let inputs = [rn(c, nl * len, &mut rng), Matrix::random_normal(c, nu * len, 1.5, &mut rng)];
        let names: &[&str] = if mode == BnMode::TrainSemi {
            &["labeled", "unlabeled"]
        } else {
            &["labeled"]
        };
        rows.extend(check(label, &case, &inputs, names, bad(label))?);
    }

    let (ci, co, len, nl, nu) = (1 + rng.below(3), 2 + rng.below(3), 6 + rng.below(5), 1 + rng.below(2), 1 + rng.below(3));
    let mut blk = ConvBlock::new(ci, co, 3, 2, &mut rng)?;
    blk.bn.mode = BnMode::TrainSemi;
    blk.kernel.set_frozen();
    blk.kernel.attach_adapter(2, 0.2, 0.5, &mut rng)?;
    blk.kernel.force_active(true);
    let out = blk.out_len(len);
    let mut case = ConvCase {
        blk,
        n: (nl, nu),
        len,
        probes: (rn(co, nl * out, &mut rng), rn(co, nu * out, &mut rng)),
    };
    jitter(&mut case, &mut rng, 0.3);
    let inputs = smooth_inputs(&case, &mut rng, |rng| vec![rn(ci, nl * len, rng), rn(ci, nu * len, rng)])?;
    rows.extend(check("conv", &case, &inputs, &["labeled", "unlabeled"], bad("conv"))?);

    let (heads, n, t) = (1 + rng.below(2), 1 + rng.below(2), 2 + rng.below(3));
    let width = 4 * heads;
    let mut blk = AttentionBlock::new(width, heads, &mut rng)?;
    for (i, (_, w)) in blk.named_weights_mut().into_iter().enumerate() {
        if i % 2 == 0 {
            w.set_frozen();
            w.attach_adapter(2, 0.2, 0.5, &mut rng)?;
            w.force_active(true);
        }
    }
    let mut case = AttCase {
        blk,
        n,
        t,
        probe: rn(n * t, width, &mut rng),
    };
    jitter(&mut case, &mut rng, 0.3);
    rows.extend(check("attention", &case, &[rn(n * t, width, &mut rng)], &["input"], bad("attention"))?);

    let (width, n, t, classes) = (2 + rng.below(3), 1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
    let mut head = ClassifierHead::new(width, 1, classes, &mut rng)?;
    for (_, w) in head.named_weights_mut() {
        if w.d1() >= 2 && w.d2() >= 2 && w.d1() != classes {
            w.set_frozen();
            w.attach_adapter(2, 0.2, 0.5, &mut rng)?;
            w.force_active(true);
        }
    }
    let mut case = HeadCase {
        head,
        t,
        probe: rn(n, classes, &mut rng),
    };
    jitter(&mut case, &mut rng, 0.3);
    let inputs = smooth_inputs(&case, &mut rng, |rng| vec![rn(n * t, width, rng)])?;
    rows.extend(check("head", &case, &inputs, &["input"], bad("head"))?);

    let (n, c) = (1 + rng.below(4), 2 + rng.below(3));
    let targets = Matrix::from_fn(n, c, |_, _| rng.uniform01());
    let case = BceCase { targets };
    rows.extend(check("bce", &case, &[Matrix::random_normal(n, c, 2.0, &mut rng)], &["logits"], bad("bce"))?);

    let cfg = micro_config();
    let mut m = Backbone::new(cfg.clone(), &mut rng)?;
    m.attach_adapters(2, 0.3, 0.5, AdapterPolicy::default(), &mut rng)?;
    m.set_bn_mode(BnMode::TrainSemi);
    m.begin_step(Some(&mut rng));
    let (nl, nu) = (2, 3);
    let mut case = BackboneCase {
        m,
        n: (nl, nu),
        targets: Matrix::from_fn(nl, cfg.num_classes, |_, _| f64::from(u8::from(rng.bernoulli(0.5)))),
    };
    jitter(&mut case, &mut rng, 0.1);
    let inputs = smooth_inputs(&case, &mut rng, |rng| {
        vec![
            rn(cfg.leads, nl * cfg.seq_len, rng),
            rn(cfg.leads, nu * cfg.seq_len, rng),
        ]
    })?;
    rows.extend(check("backbone", &case, &inputs, &["labeled"], bad("backbone"))?);

    Ok(GradReport { seed, rows })
}
