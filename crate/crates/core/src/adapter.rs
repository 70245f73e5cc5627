//! Low-rank adapters with random per-step deactivation.
//!
//! An adapted weight keeps its base matrix `W0` frozen and learns a pair
//! `B (d1 x r)`, `A (r x d2)`. During training one Bernoulli gate `δ` is drawn
//! per weight per step (`δ = 1` iff `z >= p`, `z ~ U(0,1)`) and the layer
//! computes `(W0 + δ·BA)·x`. At inference the expectation over the gate is
//! folded into a single matrix, `W0 + (1 - p)·BA`.
//!
//! Backward passes accumulate the outer product `G = Σ dy·xᵀ` for the step
//! and convert it once per step: `∂B = δ·G·Aᵀ`, `∂A = δ·Bᵀ·G`. `W0` never
//! receives a gradient in adapter mode.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::{matmul, matmul_nt, matmul_nt_acc, matmul_tn, matmul_tn_acc, Matrix, SeededRng};
use crate::param::{join, Param, ParamFn};

/// Default standard deviation for `A` at (re)initialization.
pub const DEFAULT_SIGMA: f64 = 0.02;

/// How a weight matrix participates in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Fixed base, no adapter.
    Frozen,
    /// Base matrix trained directly.
    Full,
    /// Frozen base plus a gated low-rank pair.
    Adapter,
    /// Adapter folded into the base; no longer trainable.
    Merged,
}

#[derive(Clone, Debug, PartialEq)]
struct LowRank {
    a: Param,
    b: Param,
}

/// A base matrix with an optional low-rank adapter.
#[derive(Clone, Debug)]
pub struct AdaptedWeight {
    base: Param,
    lora: Option<LowRank>,
    p: f64,
    mode: WeightMode,
    gate: bool,
    force_active: bool,
    step_weight: Option<Matrix>,
    outer: Option<Matrix>,
    pending: bool,
}

/// The inference-time matrix `W0 + (1 - p)·BA`.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedWeight {
    pub w: Matrix,
}

/// Per-call gradients returned by [`AdaptedWeight::gated_backward`].
#[derive(Clone, Debug)]
pub struct AdapterGrads {
    pub grad_a: Matrix,
    pub grad_b: Matrix,
    pub grad_x: Matrix,
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract(format!("deactivation probability must lie in [0, 1), got {p}")));
    }
    Ok(())
}

/// Fresh adapter on `w0`: `A ~ N(0, sigma²)`, `B = 0`.
pub fn init_adapter(w0: Matrix, r: usize, p: f64, sigma: f64, rng: &mut SeededRng) -> Result<AdaptedWeight> {
    let mut w = AdaptedWeight::frozen(w0);
    w.attach_adapter(r, p, sigma, rng)?;
    Ok(w)
}

impl AdaptedWeight {
    pub fn frozen(w0: Matrix) -> Self {
        Self {
            base: Param {
                grad: Matrix::zeros(0, 0),
                value: w0,
            },
            lora: None,
            p: 0.0,
            mode: WeightMode::Frozen,
            gate: true,
            force_active: false,
            step_weight: None,
            outer: None,
            pending: false,
        }
    }

    pub fn full(w0: Matrix) -> Self {
        let mut w = Self::frozen(w0);
        w.set_full();
        w
    }

    pub fn d1(&self) -> usize {
        self.base.value.rows()
    }

    pub fn d2(&self) -> usize {
        self.base.value.cols()
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn rank(&self) -> usize {
        self.lora.as_ref().map_or(0, |l| l.a.value.rows())
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Gate drawn for the current step.
    pub fn last_gate(&self) -> bool {
        self.gate
    }

    pub fn base(&self) -> &Matrix {
        &self.base.value
    }

    pub fn lora_a(&self) -> Option<&Matrix> {
        self.lora.as_ref().map(|l| &l.a.value)
    }

    pub fn lora_b(&self) -> Option<&Matrix> {
        self.lora.as_ref().map(|l| &l.b.value)
    }

    pub fn grad_a(&self) -> Option<&Matrix> {
        self.lora.as_ref().map(|l| &l.a.grad)
    }

    pub fn grad_b(&self) -> Option<&Matrix> {
        self.lora.as_ref().map(|l| &l.b.grad)
    }

    pub fn base_grad(&self) -> Option<&Matrix> {
        (self.mode == WeightMode::Full).then_some(&self.base.grad)
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.mode, WeightMode::Full | WeightMode::Adapter)
    }

    pub fn set_full(&mut self) {
        self.lora = None;
        self.mode = WeightMode::Full;
        self.base.grad = Matrix::zeros(self.d1(), self.d2());
    }

    pub fn set_frozen(&mut self) {
        self.lora = None;
        self.mode = WeightMode::Frozen;
        self.base.grad = Matrix::zeros(0, 0);
    }

    /// Replaces any existing adapter with a fresh one of rank `r`.
    pub fn attach_adapter(&mut self, r: usize, p: f64, sigma: f64, rng: &mut SeededRng) -> Result<()> {
        check_p(p)?;
        if r == 0 {
            return Err(contract("adapter rank must be >= 1"));
        }
        if !(sigma > 0.0) {
            return Err(contract(format!("adapter init sigma must be > 0, got {sigma}")));
        }
        let max_rank = self.d1().min(self.d2());
        if r > max_rank {
            return Err(contract(format!(
                "adapter rank {r} exceeds min({}, {}) = {max_rank}",
                self.d1(),
                self.d2()
            )));
        }
        if self.mode == WeightMode::Merged {
            return Err(Error::State("cannot attach an adapter to a merged weight".into()));
        }
        let a = Matrix::random_normal(r, self.d2(), sigma, rng);
        self.lora = Some(LowRank {
            a: Param::new(a),
            b: Param::new(Matrix::zeros(self.d1(), r)),
        });
        self.p = p;
        self.mode = WeightMode::Adapter;
        self.base.grad = Matrix::zeros(0, 0);
        self.gate = true;
        self.pending = false;
        Ok(())
    }

    pub fn set_p(&mut self, p: f64) -> Result<()> {
        check_p(p)?;
        self.p = p;
        Ok(())
    }

    /// Overrides the gate for every step until cleared (used by the one-shot
    /// importance pass, which needs a gradient on every `B`).
    pub fn force_active(&mut self, on: bool) {
        self.force_active = on;
        if on {
            self.gate = true;
        }
    }

    /// Draws `z ~ U(0,1)` and records `δ = [z >= p]`.
    pub fn draw_gate(&mut self, rng: &mut SeededRng) -> bool {
        let z = rng.uniform01();
        self.gate = self.force_active || z >= self.p;
        self.gate
    }

    fn adapter_product(&self) -> Option<Matrix> {
        let l = self.lora.as_ref()?;
        Some(matmul(&l.b.value, &l.a.value).expect("adapter factors are conformant"))
    }

    /// `W0 + (1 - p)·BA` without modifying the adapter.
    pub fn merge(&self) -> MergedWeight {
        let mut w = self.base.value.clone();
        if self.mode == WeightMode::Adapter {
            if let Some(ba) = self.adapter_product() {
                w.axpy(1.0 - self.p, &ba).expect("same shape");
            }
        }
        MergedWeight { w }
    }

    /// Folds the adapter into the base for good.
    pub fn bake(&mut self) {
        if self.mode == WeightMode::Adapter {
            self.base.value = self.merge().w;
        }
        self.lora = None;
        self.mode = WeightMode::Merged;
        self.base.grad = Matrix::zeros(0, 0);
        self.step_weight = None;
        self.outer = None;
        self.pending = false;
    }

    /// Weight applied during the current training step.
    pub fn training_weight(&self) -> Matrix {
        match (&self.mode, self.gate) {
            (WeightMode::Adapter, true) => {
                let mut w = self.base.value.clone();
                w.axpy(1.0, &self.adapter_product().expect("adapter present")).expect("same shape");
                w
            }
            _ => self.base.value.clone(),
        }
    }

    /// Weight applied at inference.
    pub fn eval_weight(&self) -> Matrix {
        self.merge().w
    }

    /// Fixes the weight for this step; subsequent `apply_*` calls use it.
    pub fn begin_step(&mut self) {
        self.step_weight = Some(self.training_weight());
        self.outer = None;
        self.pending = true;
    }

    /// Matrix fixed by the last `begin_step`.
    pub fn step_weight(&self) -> Result<&Matrix> {
        self.step_weight
            .as_ref()
            .ok_or_else(|| Error::State("adapted weight used before begin_step".into()))
    }

    /// `W·x` for column-major activations (`x`: d2 x n).
    pub fn apply_cols(&self, x: &Matrix) -> Result<Matrix> {
        matmul(self.step_weight()?, x)
    }

    /// `x·Wᵀ` for row-major activations (`x`: n x d2).
    pub fn apply_rows(&self, x: &Matrix) -> Result<Matrix> {
        matmul_nt(x, self.step_weight()?)
    }

    /// Whether this step's backward needs the weight outer product.
    pub fn needs_weight_grad(&self) -> bool {
        match self.mode {
            WeightMode::Full => true,
            WeightMode::Adapter => self.gate,
            _ => false,
        }
    }

    fn outer_mut(&mut self) -> &mut Matrix {
        let (d1, d2) = (self.d1(), self.d2());
        self.outer.get_or_insert_with(|| Matrix::zeros(d1, d2))
    }

    /// Accumulates `dy·xᵀ` (column layout).
    pub fn accumulate_cols(&mut self, dy: &Matrix, x: &Matrix) -> Result<()> {
        if self.needs_weight_grad() {
            matmul_nt_acc(self.outer_mut(), dy, x)?;
        }
        Ok(())
    }

    /// Accumulates `dyᵀ·x` (row layout).
    pub fn accumulate_rows(&mut self, dy: &Matrix, x: &Matrix) -> Result<()> {
        if self.needs_weight_grad() {
            matmul_tn_acc(self.outer_mut(), dy, x)?;
        }
        Ok(())
    }

    /// `Wᵀ·dy` (column layout).
    pub fn input_grad_cols(&self, dy: &Matrix) -> Result<Matrix> {
        matmul_tn(self.step_weight()?, dy)
    }

    /// `dy·W` (row layout).
    pub fn input_grad_rows(&self, dy: &Matrix) -> Result<Matrix> {
        matmul(dy, self.step_weight()?)
    }

    /// Converts the accumulated outer product into parameter gradients.
    pub fn finish_backward(&mut self) -> Result<()> {
        if !self.pending {
            return Err(Error::State("backward without a matching forward".into()));
        }
        self.pending = false;
        let Some(g) = self.outer.take() else {
            return Ok(());
        };
        match self.mode {
            WeightMode::Full => self.base.grad.axpy(1.0, &g)?,
            WeightMode::Adapter if self.gate => {
                let l = self.lora.as_mut().expect("adapter present");
                let gb = matmul_nt(&g, &l.a.value)?;
                let ga = matmul_tn(&l.b.value, &g)?;
                l.b.grad.axpy(1.0, &gb)?;
                l.a.grad.axpy(1.0, &ga)?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Single-call forward: draws the gate when training, otherwise applies
    /// the merged weight.
    pub fn gated_forward(&mut self, x: &Matrix, rng: &mut SeededRng, training: bool) -> Result<Matrix> {
        if x.rows() != self.d2() {
            return Err(contract(format!(
                "adapted weight expects {} input rows, got {}x{}",
                self.d2(),
                x.rows(),
                x.cols()
            )));
        }
        if training {
            self.draw_gate(rng);
            self.begin_step();
            self.apply_cols(x)
        } else {
            matmul(&self.eval_weight(), x)
        }
    }

    /// Gradients for one `gated_forward` call; they are also accumulated into
    /// the adapter's parameter gradients.
    pub fn gated_backward(&mut self, grad_out: &Matrix, x: &Matrix) -> Result<AdapterGrads> {
        if !self.pending {
            return Err(Error::State("gated_backward without a matching gated_forward".into()));
        }
        if self.mode != WeightMode::Adapter {
            return Err(Error::State("gated_backward on a weight without an adapter".into()));
        }
        let (ga0, gb0) = {
            let l = self.lora.as_ref().expect("adapter present");
            (l.a.grad.clone(), l.b.grad.clone())
        };
        let grad_x = self.input_grad_cols(grad_out)?;
        self.accumulate_cols(grad_out, x)?;
        self.finish_backward()?;
        let l = self.lora.as_ref().expect("adapter present");
        Ok(AdapterGrads {
            grad_a: l.a.grad.sub(&ga0)?,
            grad_b: l.b.grad.sub(&gb0)?,
            grad_x,
        })
    }

    pub fn zero_grad(&mut self) {
        if let Some(l) = self.lora.as_mut() {
            l.a.zero_grad();
            l.b.zero_grad();
        }
        if self.mode == WeightMode::Full {
            self.base.zero_grad();
        }
    }

    /// Number of trainable scalars: `r·(d1 + d2)` with an adapter, `d1·d2`
    /// when trained directly, 0 otherwise.
    pub fn trainable_params(&self) -> usize {
        match self.mode {
            WeightMode::Adapter => self.rank() * (self.d1() + self.d2()),
            WeightMode::Full => self.d1() * self.d2(),
            _ => 0,
        }
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        match self.mode {
            WeightMode::Full => f(&join(prefix, "weight"), &mut self.base),
            WeightMode::Adapter => {
                let l = self.lora.as_mut().expect("adapter present");
                f(&join(prefix, "lora_a"), &mut l.a);
                f(&join(prefix, "lora_b"), &mut l.b);
            }
            _ => {}
        }
    }

    /// Stored tensors, in checkpoint order.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Matrix)> {
        let mut out = vec![(join(prefix, "weight"), &self.base.value)];
        if let Some(l) = &self.lora {
            out.push((join(prefix, "lora_a"), &l.a.value));
            out.push((join(prefix, "lora_b"), &l.b.value));
        }
        out
    }

    /// Restores one tensor by its local name (`weight`, `lora_a`, `lora_b`).
    pub(crate) fn load_tensor(&mut self, local: &str, value: Matrix) -> Result<()> {
        let slot = match local {
            "weight" => &mut self.base.value,
            "lora_a" => &mut self.lora.as_mut().ok_or_else(|| Error::Data("lora_a without adapter".into()))?.a.value,
            "lora_b" => &mut self.lora.as_mut().ok_or_else(|| Error::Data("lora_b without adapter".into()))?.b.value,
            other => return Err(Error::Data(format!("unknown weight tensor {other}"))),
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                name: local.to_string(),
                expected: slot.shape(),
                found: value.shape(),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Restores adapter metadata before tensors are loaded.
    pub(crate) fn restore_layout(&mut self, mode: WeightMode, rank: usize, p: f64) -> Result<()> {
        check_p(p)?;
        match mode {
            WeightMode::Frozen => self.set_frozen(),
            WeightMode::Full => self.set_full(),
            WeightMode::Merged => {
                self.set_frozen();
                self.mode = WeightMode::Merged;
            }
            WeightMode::Adapter => {
                if rank == 0 || rank > self.d1().min(self.d2()) {
                    return Err(Error::Data(format!("invalid stored adapter rank {rank}")));
                }
                self.lora = Some(LowRank {
                    a: Param::new(Matrix::zeros(rank, self.d2())),
                    b: Param::new(Matrix::zeros(self.d1(), rank)),
                });
                self.mode = WeightMode::Adapter;
                self.base.grad = Matrix::zeros(0, 0);
            }
        }
        self.p = p;
        Ok(())
    }

    /// Bit-exact fingerprint of the base matrix.
    pub fn base_fingerprint(&self) -> u64 {
        fingerprint(&self.base.value)
    }

    /// Direct write access for tests and importance probes.
    pub fn lora_b_mut(&mut self) -> Option<&mut Matrix> {
        self.lora.as_mut().map(|l| &mut l.b.value)
    }

    pub fn lora_a_mut(&mut self) -> Option<&mut Matrix> {
        self.lora.as_mut().map(|l| &mut l.a.value)
    }

    #[cfg(test)]
    pub(crate) fn base_mut(&mut self) -> &mut Matrix {
        &mut self.base.value
    }
}

/// Bit-level hash of a matrix's shape and contents.
pub fn fingerprint(m: &Matrix) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    m.shape().hash(&mut h);
    for v in m.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}
