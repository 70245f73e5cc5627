//! Multi-label binary cross-entropy and the evaluation suite: ranking loss,
//! coverage, mean average precision, macro AUC, macro F-beta and macro G-beta.
//!
//! Conventions:
//! - ranking loss counts a (positive, negative) pair as mis-ordered when the
//!   negative scores at least as high as the positive; samples with no
//!   positive or no negative label contribute 0 but stay in the mean.
//! - coverage counts, per sample, how many labels score at least as high as
//!   the worst-scored positive (0 for samples without positives).
//! - AUC is the trapezoidal area under the ROC step curve, which gives tied
//!   (positive, negative) pairs half credit.
//! - average precision sums precision at each distinct score threshold,
//!   weighted by the recall gained there.
//! - classes without positives (or, for AUC, without negatives) are left out
//!   of the macro averages and reported through `log::warn!`.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numeric::Matrix;

/// Probability floor/ceiling applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Scores and ground truth for N samples over C classes.
#[derive(Clone, Debug)]
pub struct PredictionSet {
    probs: Matrix,
    truths: Matrix,
}

impl PredictionSet {
    pub fn new(probs: Matrix, truths: Matrix) -> Result<Self> {
        if probs.shape() != truths.shape() {
            return Err(contract(format!(
                "prediction shape {:?} does not match truth shape {:?}",
                probs.shape(),
                truths.shape()
            )));
        }
        if !probs.all_finite() {
            return Err(contract("predictions contain non-finite values"));
        }
        if truths.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(contract("targets must lie in [0, 1]"));
        }
        Ok(Self { probs, truths })
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn truths(&self) -> &Matrix {
        &self.truths
    }

    pub fn samples(&self) -> usize {
        self.probs.rows()
    }

    pub fn classes(&self) -> usize {
        self.probs.cols()
    }

    fn is_pos(&self, i: usize, c: usize) -> bool {
        self.truths.get(i, c) >= 0.5
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (1.0 - y) * (1.0 - p).ln() + y * p.ln()
}

/// Mean multi-label BCE over all `N * C` entries.
pub fn bce_loss(preds: &PredictionSet) -> f64 {
    let n = preds.probs.len();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = preds
        .probs
        .data()
        .iter()
        .zip(preds.truths.data())
        .map(|(&p, &y)| bce_term(p, y))
        .sum();
    -s / n as f64
}

/// BCE of `sigmoid(logits)` against (possibly soft) targets, together with
/// the gradient with respect to the logits, `(p - y) / (N * C)`.
pub fn bce_with_logits(logits: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if logits.shape() != targets.shape() {
        return Err(contract(format!(
            "bce: logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let n = logits.len().max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut s = 0.0;
    for ((g, &z), &y) in grad
        .data_mut()
        .iter_mut()
        .zip(logits.data())
        .zip(targets.data())
    {
        let p = sigmoid(z);
        s += bce_term(p, y);
        *g = (p - y) / n;
    }
    Ok((-s / n, grad))
}

/// Diagonal of the BCE Hessian with respect to each logit, `σ(z)(1 − σ(z))`.
pub fn hessian_diag_check(logits: &Matrix) -> Matrix {
    logits.map(|z| {
        let p = sigmoid(z);
        p * (1.0 - p)
    })
}

/// A macro-averaged score together with the classes that were left out.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroScore {
    pub value: f64,
    pub excluded: Vec<usize>,
}

fn macro_over(
    preds: &PredictionSet,
    name: &str,
    mut per_class: impl FnMut(usize) -> Option<f64>,
) -> MacroScore {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut excluded = Vec::new();
    for c in 0..preds.classes() {
        match per_class(c) {
            Some(v) => {
                sum += v;
                used += 1;
            }
            None => excluded.push(c),
        }
    }
    if !excluded.is_empty() {
        log::warn!("{name}: classes {excluded:?} are degenerate and excluded from the macro average");
    }
    MacroScore {
        value: if used == 0 { 0.0 } else { sum / used as f64 },
        excluded,
    }
}

fn class_column(preds: &PredictionSet, c: usize) -> Vec<(f64, bool)> {
    (0..preds.samples())
        .map(|i| (preds.probs.get(i, c), preds.is_pos(i, c)))
        .collect()
}

/// Descending-score order with tie groups: yields (tp_in_group, fp_in_group).
fn tie_groups(mut col: Vec<(f64, bool)>) -> Vec<(usize, usize)> {
    col.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let mut i = 0;
    while i < col.len() {
        let s = col[i].0;
        let (mut tp, mut fp) = (0, 0);
        while i < col.len() && col[i].0 == s {
            if col[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push((tp, fp));
    }
    out
}

pub fn ranking_loss(preds: &PredictionSet) -> f64 {
    let n = preds.samples();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut row: Vec<(f64, bool)> = (0..preds.classes())
            .map(|c| (preds.probs.get(i, c), preds.is_pos(i, c)))
            .collect();
        let n_pos = row.iter().filter(|r| r.1).count();
        let n_neg = row.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        // Ascending sweep: every negative is mis-ordered against each positive
        // scoring at or below it.
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut pos_at_or_below = 0usize;
        let mut bad = 0usize;
        let mut j = 0;
        while j < row.len() {
            let s = row[j].0;
            let start = j;
            while j < row.len() && row[j].0 == s {
                if row[j].1 {
                    pos_at_or_below += 1;
                }
                j += 1;
            }
            let negs_here = row[start..j].iter().filter(|r| !r.1).count();
            bad += negs_here * pos_at_or_below;
        }
        total += bad as f64 / (n_pos * n_neg) as f64;
    }
    total / n as f64
}

pub fn coverage(preds: &PredictionSet) -> f64 {
    let n = preds.samples();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let row = preds.probs.row(i);
        let worst = (0..preds.classes())
            .filter(|&c| preds.is_pos(i, c))
            .map(|c| row[c])
            .fold(f64::INFINITY, f64::min);
        if worst.is_finite() {
            total += row.iter().filter(|&&s| s >= worst).count() as f64;
        }
    }
    total / n as f64
}

fn average_precision(col: Vec<(f64, bool)>) -> Option<f64> {
    let n_pos = col.iter().filter(|c| c.1).count();
    if n_pos == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for (gtp, gfp) in tie_groups(col) {
        tp += gtp;
        fp += gfp;
        if gtp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            ap += gtp as f64 / n_pos as f64 * precision;
        }
    }
    Some(ap)
}

pub fn map_detailed(preds: &PredictionSet) -> MacroScore {
    macro_over(preds, "map", |c| average_precision(class_column(preds, c)))
}

pub fn map(preds: &PredictionSet) -> f64 {
    map_detailed(preds).value
}

fn roc_auc(col: Vec<(f64, bool)>) -> Option<f64> {
    let n_pos = col.iter().filter(|c| c.1).count();
    let n_neg = col.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    for (gtp, gfp) in tie_groups(col) {
        let (tp0, fp0) = (tp, fp);
        tp += gtp;
        fp += gfp;
        // Trapezoid between (fp0, tp0) and (fp, tp) in count space.
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
    }
    Some(area / (n_pos * n_neg) as f64)
}

pub fn macro_auc_detailed(preds: &PredictionSet) -> MacroScore {
    macro_over(preds, "macro_auc", |c| roc_auc(class_column(preds, c)))
}

pub fn macro_auc(preds: &PredictionSet) -> f64 {
    macro_auc_detailed(preds).value
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Confusion {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn confusion(preds: &PredictionSet, c: usize, threshold: f64) -> Confusion {
    let mut out = Confusion::default();
    for i in 0..preds.samples() {
        let predicted = preds.probs.get(i, c) >= threshold;
        match (predicted, preds.is_pos(i, c)) {
            (true, true) => out.tp += 1,
            (true, false) => out.fp += 1,
            (false, true) => out.fn_ += 1,
            (false, false) => {}
        }
    }
    out
}

pub fn macro_fbeta_detailed(preds: &PredictionSet, beta: f64, threshold: f64) -> MacroScore {
    let b2 = beta * beta;
    macro_over(preds, "macro_fbeta", |c| {
        let k = confusion(preds, c, threshold);
        if k.tp + k.fn_ == 0 {
            return None;
        }
        let tp = k.tp as f64;
        Some((1.0 + b2) * tp / ((1.0 + b2) * tp + b2 * k.fn_ as f64 + k.fp as f64))
    })
}

pub fn macro_fbeta(preds: &PredictionSet, beta: f64, threshold: f64) -> f64 {
    macro_fbeta_detailed(preds, beta, threshold).value
}

pub fn macro_gbeta_detailed(preds: &PredictionSet, beta: f64, threshold: f64) -> MacroScore {
    macro_over(preds, "macro_gbeta", |c| {
        let k = confusion(preds, c, threshold);
        if k.tp + k.fn_ == 0 {
            return None;
        }
        let tp = k.tp as f64;
        Some(tp / (tp + k.fp as f64 + beta * k.fn_ as f64))
    })
}

pub fn macro_gbeta(preds: &PredictionSet, beta: f64, threshold: f64) -> f64 {
    macro_gbeta_detailed(preds, beta, threshold).value
}

/// β used for the F and G scores in every report.
pub const REPORT_BETA: f64 = 2.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// One evaluation run: the six metrics plus efficiency counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub ranking_loss: f64,
    pub coverage: f64,
    pub map: f64,
    pub macro_auc: f64,
    pub macro_g2: f64,
    pub macro_f2: f64,
    pub time_per_iter_ms: f64,
    pub trainable_params: u64,
}

impl MetricsReport {
    pub fn evaluate(preds: &PredictionSet, threshold: f64) -> Self {
        Self {
            ranking_loss: ranking_loss(preds),
            coverage: coverage(preds),
            map: map(preds),
            macro_auc: macro_auc(preds),
            macro_g2: macro_gbeta(preds, REPORT_BETA, threshold),
            macro_f2: macro_fbeta(preds, REPORT_BETA, threshold),
            time_per_iter_ms: 0.0,
            trainable_params: 0,
        }
    }

    pub const KEYS: [&'static str; 8] = [
        "ranking_loss",
        "coverage",
        "map",
        "macro_auc",
        "macro_g2",
        "macro_f2",
        "time_per_iter_ms",
        "trainable_params",
    ];
}
