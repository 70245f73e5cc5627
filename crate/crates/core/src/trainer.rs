//! Semi-supervised adaptation loop, AdamW, early stopping and timing.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::DEFAULT_SIGMA;
use crate::error::{contract, Error, Result};
use crate::metrics::{bce_with_logits, MetricsReport, PredictionSet, DEFAULT_THRESHOLD};
use crate::model::{pack_batch, AdapterPolicy, Backbone, BnMode};
use crate::numeric::{Matrix, SeededRng};
use crate::param::Param;
use crate::rankalloc::{allocate, apply_plan, estimate_importance, LabeledBatch, RankPlan};
use crate::signal::{cutmix, weak_augment, Recording, CUTMIX_ALPHA, TARGET_RATE};

/// Where the unlabeled batch of each step comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnlabeledSource {
    /// Independently cycled unlabeled pool, weakly augmented.
    #[default]
    Pool,
    /// The step's (augmented) labeled batch itself.
    Mirror,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub p: f64,
    pub r: usize,
    pub c: f64,
    pub sigma: f64,
    pub max_iters: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub freeze_first_k_conv: usize,
    pub seed: u64,
    /// Pool labeled and unlabeled activations for batch-norm statistics.
    pub semi_bn: bool,
    pub unlabeled_source: UnlabeledSource,
    pub cutmix: bool,
    pub sample_rate: f64,
    pub threshold: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            labeled_batch: 64,
            unlabeled_batch: 64,
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            p: 0.2,
            r: 16,
            c: 0.5,
            sigma: DEFAULT_SIGMA,
            max_iters: 5000,
            eval_every: 50,
            patience: 10,
            freeze_first_k_conv: 0,
            seed: 0,
            semi_bn: true,
            unlabeled_source: UnlabeledSource::Pool,
            cutmix: true,
            sample_rate: TARGET_RATE,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be > 0 and weight_decay >= 0".into());
        }
        if !(0.0..1.0).contains(&self.p) {
            return bad(format!("p must lie in [0, 1), got {}", self.p));
        }
        if self.r < 2 || self.r % 2 != 0 {
            return bad(format!("rank must be even and >= 2, got {}", self.r));
        }
        if !(self.c > 0.0 && self.c <= 1.0) {
            return bad(format!("c must lie in (0, 1], got {}", self.c));
        }
        if !(self.sigma > 0.0) {
            return bad("sigma must be > 0".into());
        }
        if self.max_iters == 0 || self.eval_every == 0 || self.patience == 0 {
            return bad("max_iters, eval_every and patience must be >= 1".into());
        }
        if !(self.sample_rate > 0.0) || !(0.0..=1.0).contains(&self.threshold) {
            return bad("sample_rate must be > 0 and threshold in [0, 1]".into());
        }
        Ok(())
    }

    /// No gating, uniform rank: plain LoRA.
    pub fn is_degenerate(&self) -> bool {
        self.p == 0.0 && self.c == 1.0
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// Adam with decoupled weight decay. State is created lazily, only for
/// tensors that are actually visited as trainable.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: BTreeMap<String, Moments>,
    allocations: usize,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            eps,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
            allocations: 0,
        }
    }

    pub fn from_config(cfg: &TrainerConfig) -> Self {
        Self::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Number of moment buffers ever allocated.
    pub fn allocations(&self) -> usize {
        self.allocations
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    /// Scalars held in moment buffers.
    pub fn state_len(&self) -> usize {
        self.state.values().map(|s| s.m.len() + s.v.len()).sum()
    }

    pub fn begin(&mut self) {
        self.step += 1;
    }

    /// Updates one parameter with the current step's bias correction.
    pub fn update(&mut self, name: &str, p: &mut Param) -> Result<()> {
        if self.step == 0 {
            return Err(Error::State("optimizer update before begin".into()));
        }
        if p.grad.shape() != p.value.shape() {
            return Err(contract(format!("gradient of {name} does not match its parameter")));
        }
        let (b1, b2) = self.betas;
        let st = match self.state.get_mut(name) {
            Some(s) => s,
            None => {
                self.allocations += 1;
                let (r, c) = p.value.shape();
                self.state.entry(name.to_string()).or_insert(Moments {
                    m: Matrix::zeros(r, c),
                    v: Matrix::zeros(r, c),
                })
            }
        };
        if st.m.shape() != p.value.shape() {
            return Err(contract(format!("optimizer state of {name} changed shape")));
        }
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let ms = st.m.data_mut();
        let vs = st.v.data_mut();
        for (((w, &g), m), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(ms.iter_mut())
            .zip(vs.iter_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *w = *w * decay - self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    /// One step over every trainable tensor of the model.
    pub fn step(&mut self, model: &mut Backbone) -> Result<()> {
        self.begin();
        let mut err = None;
        model.visit_trainable(&mut |name, p| {
            if err.is_none() {
                if let Err(e) = self.update(name, p) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => {
                model.record_optimizer_step();
                Ok(())
            }
        }
    }
}

/// Freezes the first `k` conv blocks (CE-SSL-F).
pub fn freeze_conv_blocks(model: &mut Backbone, k: usize) -> Result<()> {
    model.freeze_conv_blocks(k)
}

/// Index stream that reshuffles at every epoch boundary.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: SeededRng,
}

impl Cycler {
    fn new(n: usize, rng: SeededRng) -> Self {
        let mut c = Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        };
        c.refill();
        c
    }

    fn refill(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        (0..k)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.refill();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Named random streams of a run.
mod stream {
    pub const LABELED: u64 = 1;
    pub const UNLABELED: u64 = 2;
    pub const CUTMIX: u64 = 3;
    pub const WEAK: u64 = 4;
    pub const GATES: u64 = 5;
    pub const ALLOC: u64 = 6;
}

fn labels_of(recs: &[&Recording]) -> Result<Matrix> {
    let rows = recs
        .iter()
        .map(|r| {
            r.label
                .clone()
                .ok_or_else(|| contract(format!("record {} has no label", r.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let c = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != c) {
        return Err(contract("label widths differ"));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Packs recordings into a model input and the matching target matrix.
pub fn batch_of(recs: &[&Recording]) -> Result<(Matrix, Matrix)> {
    let x = pack_batch(&recs.iter().map(|r| &r.signal).collect::<Vec<_>>())?;
    Ok((x, labels_of(recs)?))
}

/// Probabilities of the model on a dataset, in chunks.
pub fn predict(model: &Backbone, data: &[Recording]) -> Result<Matrix> {
    let c = model.config().num_classes;
    let mut out = Vec::with_capacity(data.len() * c);
    for chunk in data.chunks(64) {
        let x = pack_batch(&chunk.iter().map(|r| &r.signal).collect::<Vec<_>>())?;
        out.extend_from_slice(model.predict_proba(&x, chunk.len())?.data());
    }
    Matrix::from_vec(data.len(), c, out)
}

/// Full metric report of the model on a labeled dataset.
pub fn evaluate(model: &Backbone, data: &[Recording], threshold: f64) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(contract("evaluation set is empty"));
    }
    let probs = predict(model, data)?;
    let truths = labels_of(&data.iter().collect::<Vec<_>>())?;
    if truths.cols() != probs.cols() {
        return Err(Error::Data(format!(
            "dataset has {} classes, model has {}",
            truths.cols(),
            probs.cols()
        )));
    }
    Ok(MetricsReport::evaluate(&PredictionSet::new(probs, truths)?, threshold))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<MetricsReport>,
    pub elapsed_ms: f64,
}

pub fn log_jsonl(log: &[LogEntry]) -> Result<String> {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e)?);
        s.push('\n');
    }
    Ok(s)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Backbone,
    pub plan: Option<RankPlan>,
    pub report: MetricsReport,
    pub log: Vec<LogEntry>,
    pub best_iteration: usize,
    pub iterations: usize,
    pub stopped_early: bool,
    /// Validation report of the model as it stood after the last iteration.
    pub final_report: MetricsReport,
}

/// Whether a step trains adapters or the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Adapt,
    Pretrain,
}

/// Per-step machinery shared by training and benchmarking.
struct Stepper<'a> {
    cfg: &'a TrainerConfig,
    kind: Kind,
    labeled: &'a [Recording],
    unlabeled: &'a [Recording],
    lab: Cycler,
    unl: Option<Cycler>,
    cutmix_rng: SeededRng,
    weak_rng: SeededRng,
    gate_rng: SeededRng,
    opt: AdamW,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a TrainerConfig, kind: Kind, labeled: &'a [Recording], unlabeled: &'a [Recording]) -> Self {
        let seed = cfg.seed;
        let uses_pool = kind == Kind::Adapt && cfg.semi_bn && cfg.unlabeled_source == UnlabeledSource::Pool;
        Self {
            cfg,
            kind,
            labeled,
            unlabeled,
            lab: Cycler::new(labeled.len(), SeededRng::derive(seed, stream::LABELED)),
            unl: uses_pool.then(|| Cycler::new(unlabeled.len(), SeededRng::derive(seed, stream::UNLABELED))),
            cutmix_rng: SeededRng::derive(seed, stream::CUTMIX),
            weak_rng: SeededRng::derive(seed, stream::WEAK),
            gate_rng: SeededRng::derive(seed, stream::GATES),
            opt: AdamW::from_config(cfg),
        }
    }

    fn labeled_batch(&mut self) -> Result<(Matrix, Matrix, usize)> {
        let idx = self.lab.take(self.cfg.labeled_batch);
        let recs: Vec<&Recording> = idx.iter().map(|&i| &self.labeled[i]).collect();
        if !self.cfg.cutmix {
            let (x, y) = batch_of(&recs)?;
            return Ok((x, y, recs.len()));
        }
        let mut partner: Vec<usize> = (0..recs.len()).collect();
        self.cutmix_rng.shuffle(&mut partner);
        let mixed = recs
            .iter()
            .zip(&partner)
            .map(|(a, &j)| cutmix(a, recs[j], CUTMIX_ALPHA, &mut self.cutmix_rng))
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = batch_of(&mixed.iter().collect::<Vec<_>>())?;
        Ok((x, y, mixed.len()))
    }

    fn unlabeled_batch(&mut self) -> Result<Option<(Matrix, usize)>> {
        let Some(cyc) = self.unl.as_mut() else {
            return Ok(None);
        };
        let idx = cyc.take(self.cfg.unlabeled_batch);
        let aug = idx
            .iter()
            .map(|&i| weak_augment(&self.unlabeled[i], self.cfg.sample_rate, &mut self.weak_rng))
            .collect::<Result<Vec<_>>>()?;
        let x = pack_batch(&aug.iter().map(|r| &r.signal).collect::<Vec<_>>())?;
        Ok(Some((x, aug.len())))
    }

    /// One full iteration; returns the training loss.
    fn run(&mut self, model: &mut Backbone, iteration: usize) -> Result<f64> {
        let (x, y, n_b) = self.labeled_batch()?;
        let pooled = self.unlabeled_batch()?;
        let unl = match (self.kind, self.cfg.semi_bn, self.cfg.unlabeled_source) {
            (Kind::Adapt, true, UnlabeledSource::Mirror) => Some((&x, n_b)),
            (Kind::Adapt, true, UnlabeledSource::Pool) => pooled.as_ref().map(|(u, n)| (u, *n)),
            _ => None,
        };
        model.zero_grad();
        model.begin_step(Some(&mut self.gate_rng));
        let logits = model.forward_train(&x, n_b, unl, true)?;
        let (loss, grad) = bce_with_logits(&logits, &y)?;
        if !loss.is_finite() {
            return Err(non_finite(model, iteration, loss));
        }
        model.backward(&grad, false)?;
        self.opt.step(model)?;
        Ok(loss)
    }
}

fn non_finite(model: &mut Backbone, iteration: usize, loss: f64) -> Error {
    let mut norms = Vec::new();
    model.visit_trainable(&mut |name, p| {
        norms.push(format!("{name}={:.3e}", p.value.frobenius_sq().sqrt()));
    });
    log::error!("non-finite loss {loss} at iteration {iteration}; {}", norms.join(" "));
    Error::Numerical(format!(
        "non-finite loss {loss} at iteration {iteration}; parameter norms: {}",
        norms.join(" ")
    ))
}

fn check_data(labeled: &[Recording], val: &[Recording]) -> Result<()> {
    if labeled.is_empty() {
        return Err(contract("labeled set is empty"));
    }
    if val.is_empty() {
        return Err(contract("validation set is empty"));
    }
    Ok(())
}

fn prepare_bn(model: &mut Backbone, cfg: &TrainerConfig, kind: Kind) {
    let semi = kind == Kind::Adapt && cfg.semi_bn;
    model.set_bn_mode(if semi { BnMode::TrainSemi } else { BnMode::TrainSupervised });
}

/// Labeled batches for the one-shot importance pass: the first
/// `labeled_batch` records in dataset order.
fn importance_batch(labeled: &[Recording], n: usize) -> Result<(Matrix, Matrix, usize)> {
    let recs: Vec<&Recording> = labeled.iter().take(n).collect();
    let (x, y) = batch_of(&recs)?;
    Ok((x, y, recs.len()))
}

/// Freezing, one-shot importance, allocation and adapter re-initialization.
pub fn prepare_adaptation(model: &mut Backbone, labeled: &[Recording], cfg: &TrainerConfig) -> Result<RankPlan> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(contract("labeled set is empty"));
    }
    if model.adapter_ids().is_empty() {
        return Err(Error::State("model carries no adapters".into()));
    }
    freeze_conv_blocks(model, cfg.freeze_first_k_conv)?;
    model.set_p(cfg.p)?;
    let (x, y, n) = importance_batch(labeled, cfg.labeled_batch)?;
    let scores = estimate_importance(model, &[LabeledBatch { x: &x, n, y: &y }])?;
    let plan = allocate(&scores, cfg.r, cfg.c)?;
    apply_plan(model, &plan, cfg.sigma, &mut SeededRng::derive(cfg.seed, stream::ALLOC))?;
    Ok(plan)
}

/// Attaches fresh rank-`r` adapters with the configured policy.
pub fn attach_fresh_adapters(model: &mut Backbone, cfg: &TrainerConfig, policy: AdapterPolicy) -> Result<()> {
    let mut rng = SeededRng::derive(cfg.seed, 0);
    model.attach_adapters(cfg.r, cfg.p, cfg.sigma, policy, &mut rng)
}

fn train_loop(
    mut model: Backbone,
    labeled: &[Recording],
    unlabeled: &[Recording],
    val: &[Recording],
    cfg: &TrainerConfig,
    kind: Kind,
    plan: Option<RankPlan>,
) -> Result<TrainOutcome> {
    prepare_bn(&mut model, cfg, kind);
    if kind == Kind::Adapt && cfg.semi_bn && cfg.unlabeled_source == UnlabeledSource::Pool && unlabeled.is_empty() {
        return Err(contract("unlabeled set is empty"));
    }
    let start = Instant::now();
    let mut stepper = Stepper::new(cfg, kind, labeled, unlabeled);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Backbone, MetricsReport)> = None;
    let mut bad_evals = 0;
    let mut stopped_early = false;
    let mut last_report = None;
    let mut it = 0;
    while it < cfg.max_iters {
        it += 1;
        let loss = stepper.run(&mut model, it)?;
        let due = it % cfg.eval_every == 0 || it == cfg.max_iters;
        let val_report = if due {
            let rep = evaluate(&model, val, cfg.threshold)?;
            let score = rep.macro_f2;
            if best.as_ref().is_none_or(|(b, ..)| score > *b) {
                best = Some((score, it, model.clone(), rep.clone()));
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
            last_report = Some(rep.clone());
            Some(rep)
        } else {
            None
        };
        log.push(LogEntry {
            iteration: it,
            loss,
            val: val_report,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if due && bad_evals >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let final_report = last_report.ok_or_else(|| Error::State("training ended without a validation pass".into()))?;
    let (_, best_iteration, mut model, mut report) =
        best.ok_or_else(|| Error::State("training ended without a validation pass".into()))?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    report.time_per_iter_ms = elapsed / it as f64;
    report.trainable_params = model.trainable_param_count() as u64;
    if kind == Kind::Adapt {
        model.bake();
    }
    model.set_bn_mode(BnMode::Eval);
    Ok(TrainOutcome {
        model,
        plan,
        report,
        log,
        best_iteration,
        iterations: it,
        stopped_early,
        final_report,
    })
}

/// The full adaptation run: one-shot allocation, the semi-supervised loop
/// with early stopping on validation macro F2, and the final merge.
pub fn run_cessl(
    mut model: Backbone,
    labeled: &[Recording],
    unlabeled: &[Recording],
    val: &[Recording],
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(labeled, val)?;
    let plan = prepare_adaptation(&mut model, labeled, cfg)?;
    train_loop(model, labeled, unlabeled, val, cfg, Kind::Adapt, Some(plan))
}

/// Plain supervised training of every weight (no adapters, no unlabeled
/// data). Rank and gate settings are ignored.
pub fn pretrain(model: Backbone, labeled: &[Recording], val: &[Recording], cfg: &TrainerConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(labeled, val)?;
    if !model.adapter_ids().is_empty() {
        return Err(Error::State("pretraining expects a model without adapters".into()));
    }
    train_loop(model, labeled, &[], val, cfg, Kind::Pretrain, None)
}

/// Median wall-clock milliseconds of one adaptation iteration, measured on
/// a copy of the model after the one-shot allocation. The first five
/// iterations are warm-up and discarded.
pub fn benchmark_iteration(
    model: &Backbone,
    labeled: &[Recording],
    unlabeled: &[Recording],
    cfg: &TrainerConfig,
    iters: usize,
) -> Result<BenchResult> {
    if iters < 20 {
        return Err(contract(format!("benchmark needs at least 20 iterations, got {iters}")));
    }
    let mut model = model.clone();
    prepare_adaptation(&mut model, labeled, cfg)?;
    prepare_bn(&mut model, cfg, Kind::Adapt);
    let trainable_params = model.trainable_param_count();
    let adapter_params = model.adapter_param_count();
    let mut stepper = Stepper::new(cfg, Kind::Adapt, labeled, unlabeled);
    let mut samples = Vec::with_capacity(iters);
    for it in 1..=iters {
        let t0 = Instant::now();
        stepper.run(&mut model, it)?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    samples.drain(..5);
    Ok(BenchResult {
        median_ms: median(&samples),
        samples,
        trainable_params,
        adapter_params,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    pub median_ms: f64,
    pub samples: Vec<f64>,
    pub trainable_params: usize,
    pub adapter_params: usize,
}

impl BenchResult {
    /// Coefficient of variation of the kept samples.
    pub fn cv(&self) -> f64 {
        let n = self.samples.len() as f64;
        let m = self.samples.iter().sum::<f64>() / n;
        let var = self.samples.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / n;
        var.sqrt() / m
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
