//! One-shot rank allocation.
//!
//! Before the first optimizer step every `B` is zero, so the gradient of the
//! loss with respect to `A` vanishes and the step-0 update of `BA` reduces to
//! `-η·(∂L/∂B)·A`. The importance of a base weight is the squared norm of that
//! update masked by the weight itself, `‖((∂L/∂B)·A) ⊙ W0‖²`. The top
//! `round(n·c)` weights keep rank `r`, the rest drop to `r/2`, and every
//! adapter is re-initialized at its allocated rank.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::WeightMode;
use crate::error::{contract, Error, Result};
use crate::metrics::bce_with_logits;
use crate::model::{Backbone, BnMode};
use crate::numeric::{matmul, Matrix, SeededRng};

/// Largest `|∂L/∂A|` tolerated at step 0.
pub const GRAD_A_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub weight_id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankPlan {
    ranks: BTreeMap<String, usize>,
    initial_r: usize,
    c: f64,
}

impl RankPlan {
    pub fn ranks(&self) -> &BTreeMap<String, usize> {
        &self.ranks
    }

    pub fn initial_r(&self) -> usize {
        self.initial_r
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ranks.get(id).copied()
    }

    /// Number of weights kept at the full rank.
    pub fn top_k(&self) -> usize {
        self.ranks.values().filter(|&&r| r == self.initial_r).count()
    }
}

/// `‖(grad_b·a) ⊙ w0‖²` for one weight.
pub fn importance_formula(grad_b: &Matrix, a: &Matrix, w0: &Matrix) -> Result<f64> {
    let update = matmul(grad_b, a)?;
    if update.shape() != w0.shape() {
        return Err(contract("importance factors do not match the base weight"));
    }
    Ok(update.data().iter().zip(w0.data()).map(|(u, w)| (u * w) * (u * w)).sum())
}

/// A labeled batch: signals (`leads x n·L`), count, multi-hot targets (`n x C`).
#[derive(Clone, Copy, Debug)]
pub struct LabeledBatch<'a> {
    pub x: &'a Matrix,
    pub n: usize,
    pub y: &'a Matrix,
}

/// Scores every adapted weight from a single forward/backward pass per batch,
/// with all gates forced on and batch-norm running statistics untouched.
/// With several batches the gradients are those of the pooled mean loss.
pub fn estimate_importance(model: &mut Backbone, batches: &[LabeledBatch<'_>]) -> Result<Vec<ImportanceScore>> {
    if model.optimizer_steps() > 0 {
        return Err(Error::State("one-shot window closed: an optimizer step was already taken".into()));
    }
    if batches.is_empty() {
        return Err(contract("importance estimation needs a labeled batch"));
    }
    for (id, w) in model.weights() {
        if w.mode() == WeightMode::Adapter && w.lora_b().is_some_and(|b| b.max_abs() != 0.0) {
            return Err(Error::State(format!("adapter {id} is not fresh (B != 0)")));
        }
    }
    let total: usize = batches.iter().map(|b| b.n).sum();
    let saved_mode = model.bn_mode();
    model.zero_grad();
    model.force_gates(true);
    model.set_bn_mode(BnMode::TrainSupervised);
    let pass = (|| -> Result<()> {
        for b in batches {
            model.begin_step(None);
            let logits = model.forward_train(b.x, b.n, None, false)?;
            let (loss, grad) = bce_with_logits(&logits, b.y)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss {loss} in importance pass")));
            }
            model.backward(&grad.scale(b.n as f64 / total as f64), false)?;
        }
        Ok(())
    })();
    model.force_gates(false);
    if let Some(mode) = saved_mode {
        model.set_bn_mode(mode);
    }
    pass?;

    let mut scores = Vec::new();
    for (id, w) in model.weights() {
        if w.mode() != WeightMode::Adapter {
            continue;
        }
        let (ga, gb, a) = match (w.grad_a(), w.grad_b(), w.lora_a()) {
            (Some(ga), Some(gb), Some(a)) => (ga, gb, a),
            _ => return Err(Error::State(format!("adapter {id} lost its factors"))),
        };
        let worst = ga.max_abs();
        if !(worst <= GRAD_A_TOL) {
            return Err(Error::Numerical(format!("dL/dA for {id} is {worst:e} at step 0, expected 0")));
        }
        let score = importance_formula(gb, a, w.base())?;
        if !score.is_finite() {
            return Err(Error::Numerical(format!("non-finite importance for {id}")));
        }
        scores.push(ImportanceScore { weight_id: id, score });
    }
    model.zero_grad();
    Ok(scores)
}

/// `round(n·c)` with halves rounded up.
pub fn top_count(n: usize, c: f64) -> usize {
    ((n as f64 * c) + 0.5).floor() as usize
}

/// Top-`round(n·c)` weights by score keep rank `r`, the rest get `r/2`.
/// Equal scores are ordered by ascending identifier.
pub fn allocate(scores: &[ImportanceScore], r: usize, c: f64) -> Result<RankPlan> {
    if r < 2 || r % 2 != 0 {
        return Err(contract(format!("rank must be even and >= 2, got {r}")));
    }
    if !(c > 0.0 && c <= 1.0) {
        return Err(contract(format!("c must lie in (0, 1], got {c}")));
    }
    let mut seen = BTreeSet::new();
    for s in scores {
        if !seen.insert(s.weight_id.as_str()) {
            return Err(contract(format!("duplicate weight id {}", s.weight_id)));
        }
        if !(s.score >= 0.0) || !s.score.is_finite() {
            return Err(contract(format!("invalid score {} for {}", s.score, s.weight_id)));
        }
    }
    let mut order: Vec<&ImportanceScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.weight_id.cmp(&b.weight_id)));
    let k = top_count(scores.len(), c);
    let ranks = order
        .iter()
        .enumerate()
        .map(|(i, s)| (s.weight_id.clone(), if i < k { r } else { r / 2 }))
        .collect();
    Ok(RankPlan { ranks, initial_r: r, c })
}

/// Re-initializes every adapter at its planned rank (fresh `A`, zero `B`).
pub fn apply_plan(model: &mut Backbone, plan: &RankPlan, sigma: f64, rng: &mut SeededRng) -> Result<()> {
    let ids: BTreeSet<String> = model.adapter_ids().into_iter().collect();
    let planned: BTreeSet<String> = plan.ranks.keys().cloned().collect();
    if ids != planned {
        let missing: Vec<_> = ids.difference(&planned).cloned().collect();
        let extra: Vec<_> = planned.difference(&ids).cloned().collect();
        return Err(contract(format!(
            "plan does not match adapted weights (missing {missing:?}, unknown {extra:?})"
        )));
    }
    for (id, w) in model.weights_mut() {
        if let Some(&rank) = plan.ranks.get(&id) {
            let p = w.p();
            w.attach_adapter(rank, p, sigma, rng)?;
        }
    }
    Ok(())
}
