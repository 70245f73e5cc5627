//! The backbone: strided convolution blocks, self-attention blocks over the
//! resulting time tokens, and a pooled classification head. Every layer has a
//! hand-written backward pass.

pub mod attention;
pub mod batchnorm;
pub mod conv;
pub mod head;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdaptedWeight, WeightMode};
use crate::error::{contract, Error, Result};
use crate::metrics::sigmoid;
use crate::numeric::{Matrix, SeededRng};
use crate::param::{join, Param, ParamFn};

pub use attention::{AttentionBlock, LayerNorm, Provenance, ProvenanceLog};
pub use batchnorm::{pooled_stats, semibn_forward, BatchStats, BnMode, SemiBn};
pub use conv::{conv_geometry, ConvBlock};
pub use head::ClassifierHead;

pub const LEADS: usize = 12;
const POS_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub n_conv: usize,
    pub n_att: usize,
    pub n_cls: usize,
    pub channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub conv_stride: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub leads: usize,
}

impl BackboneConfig {
    /// Small configuration used for tests and desk-scale runs.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            n_conv: 3,
            n_att: 2,
            n_cls: 1,
            channels: 32,
            hidden: 32,
            heads: 4,
            conv_kernel: 7,
            conv_stride: 2,
            seq_len: 512,
            num_classes,
            leads: LEADS,
        }
    }

    /// The base backbone size.
    pub fn base(num_classes: usize) -> Self {
        Self {
            n_att: 8,
            channels: 256,
            hidden: 256,
            heads: 16,
            seq_len: 5000,
            ..Self::toy(num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_conv", self.n_conv),
            ("n_att", self.n_att),
            ("n_cls", self.n_cls),
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("conv_kernel", self.conv_kernel),
            ("conv_stride", self.conv_stride),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("leads", self.leads),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.channels != self.hidden {
            return Err(Error::Config(format!(
                "conv channels {} must equal attention width {}",
                self.channels, self.hidden
            )));
        }
        Ok(())
    }

    /// Number of time tokens entering the attention blocks.
    pub fn tokens(&self) -> usize {
        (0..self.n_conv).fold(self.seq_len, |len, _| conv_geometry(len, self.conv_kernel, self.conv_stride).0)
    }
}

/// Concatenates recordings (`leads x len` each) into `leads x (n·len)`.
pub fn pack_batch(records: &[&Matrix]) -> Result<Matrix> {
    let first = records.first().ok_or_else(|| contract("empty batch"))?;
    let (c, len) = first.shape();
    let mut out = Matrix::zeros(c, records.len() * len);
    for (s, r) in records.iter().enumerate() {
        if r.shape() != (c, len) {
            return Err(contract(format!("batch member {s} is {:?}, expected {:?}", r.shape(), (c, len))));
        }
        for ch in 0..c {
            out.row_mut(ch)[s * len..(s + 1) * len].copy_from_slice(r.row(ch));
        }
    }
    Ok(out)
}

/// Channel-by-time conv output (`hidden x n·t`) to token rows (`n·t x hidden`)
/// plus the positional embedding (`t x hidden`).
pub fn tokenize(conv_out: &Matrix, n: usize, pos: &Matrix) -> Result<Matrix> {
    let (t, hidden) = pos.shape();
    if conv_out.rows() != hidden {
        return Err(Error::Config(format!(
            "conv output has {} channels but tokens are {hidden} wide",
            conv_out.rows()
        )));
    }
    if conv_out.cols() != n * t {
        return Err(contract(format!("expected {} time steps, got {}", n * t, conv_out.cols())));
    }
    Ok(Matrix::from_fn(n * t, hidden, |row, h| conv_out.get(h, row) + pos.get(row % t, h)))
}

/// Which weights receive adapters when switching to adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterPolicy {
    /// Adapt the head's hidden layers; otherwise they are trained directly.
    pub adapt_head: bool,
}

impl Default for AdapterPolicy {
    fn default() -> Self {
        Self { adapt_head: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightLayout {
    pub name: String,
    pub mode: WeightMode,
    pub rank: usize,
    pub p: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounters {
    pub forward: u64,
    pub backward: u64,
}

#[derive(Clone, Debug)]
struct StepState {
    n: usize,
}

enum Slot<'a> {
    Weight(&'a mut AdaptedWeight),
    Bn(&'a mut SemiBn),
    Ln(&'a mut LayerNorm),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    pub convs: Vec<ConvBlock>,
    pub pos: Param,
    pub atts: Vec<AttentionBlock>,
    pub head: ClassifierHead,
    counters: PassCounters,
    optimizer_steps: u64,
    step: Option<StepState>,
}

impl Backbone {
    /// Randomly initialized backbone with every weight trained directly.
    pub fn new(cfg: BackboneConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(cfg.n_conv);
        for i in 0..cfg.n_conv {
            let inp = if i == 0 { cfg.leads } else { cfg.channels };
            convs.push(ConvBlock::new(inp, cfg.channels, cfg.conv_kernel, cfg.conv_stride, rng)?);
        }
        let pos = Param::new(Matrix::random_normal(cfg.tokens(), cfg.hidden, POS_STD, rng));
        let atts = (0..cfg.n_att)
            .map(|_| AttentionBlock::new(cfg.hidden, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = ClassifierHead::new(cfg.hidden, cfg.n_cls, cfg.num_classes, rng)?;
        Ok(Self {
            cfg,
            convs,
            pos,
            atts,
            head,
            counters: PassCounters::default(),
            optimizer_steps: 0,
            step: None,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn tokens(&self) -> usize {
        self.pos.value.rows()
    }

    pub fn counters(&self) -> PassCounters {
        self.counters
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }

    pub fn record_optimizer_step(&mut self) {
        self.optimizer_steps += 1;
    }

    /// Rows of unlabeled provenance seen by the attention blocks and head.
    pub fn provenance(&self) -> ProvenanceLog {
        let mut log = self.head.provenance;
        for a in &self.atts {
            log.labeled_rows += a.provenance.labeled_rows;
            log.unlabeled_rows += a.provenance.unlabeled_rows;
        }
        log
    }

    /// Every weight matrix with its identifier, in a fixed order.
    pub fn weights_mut(&mut self) -> Vec<(String, &mut AdaptedWeight)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut c.kernel));
            if let Some(s) = c.skip.as_mut() {
                out.push((format!("conv{i}.skip"), s));
            }
        }
        for (i, a) in self.atts.iter_mut().enumerate() {
            for (name, w) in a.named_weights_mut() {
                out.push((format!("att{i}.{name}"), w));
            }
        }
        for (name, w) in self.head.named_weights_mut() {
            out.push((format!("head.{name}"), w));
        }
        out
    }

    pub fn weights(&self) -> Vec<(String, &AdaptedWeight)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &c.kernel));
            if let Some(s) = c.skip.as_ref() {
                out.push((format!("conv{i}.skip"), s));
            }
        }
        for (i, a) in self.atts.iter().enumerate() {
            for (name, w) in a.named_weights() {
                out.push((format!("att{i}.{name}"), w));
            }
        }
        for (i, d) in self.head.hidden.iter().enumerate() {
            out.push((format!("head.fc{i}"), &d.weight));
        }
        out.push(("head.out".into(), &self.head.out.weight));
        out
    }

    pub fn weight_mut(&mut self, id: &str) -> Option<&mut AdaptedWeight> {
        self.weights_mut().into_iter().find(|(n, _)| n == id).map(|(_, w)| w)
    }

    /// Identifiers of weights currently carrying an adapter.
    pub fn adapter_ids(&self) -> Vec<String> {
        self.weights()
            .into_iter()
            .filter(|(_, w)| w.mode() == WeightMode::Adapter)
            .map(|(n, _)| n)
            .collect()
    }

    /// Switches to adaptation: conv kernels, attention projections and (per
    /// policy) head hidden layers get fresh rank-`r` adapters; the input
    /// projection shortcut is frozen; the output layer stays directly trained.
    /// The optimizer step count restarts at zero.
    pub fn attach_adapters(
        &mut self,
        r: usize,
        p: f64,
        sigma: f64,
        policy: AdapterPolicy,
        rng: &mut SeededRng,
    ) -> Result<()> {
        let frozen = self.frozen_blocks();
        for (id, w) in self.weights_mut() {
            let block = id
                .strip_prefix("conv")
                .and_then(|r| r.split_once('.'))
                .and_then(|(i, _)| i.parse::<usize>().ok());
            if block.is_some_and(|i| i < frozen) {
                continue;
            }
            if id.ends_with(".skip") {
                w.set_frozen();
            } else if id == "head.out" || (id.starts_with("head.") && !policy.adapt_head) {
                w.set_full();
            } else {
                if w.mode() == WeightMode::Merged {
                    w.set_frozen();
                }
                w.attach_adapter(r, p, sigma, rng)?;
            }
        }
        self.optimizer_steps = 0;
        Ok(())
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        for c in self.convs.iter_mut().filter(|c| !c.is_frozen()) {
            c.bn.mode = mode;
        }
    }

    pub fn bn_mode(&self) -> Option<BnMode> {
        self.convs.iter().find(|c| !c.is_frozen()).map(|c| c.bn.mode)
    }

    pub fn frozen_blocks(&self) -> usize {
        self.convs.iter().take_while(|c| c.is_frozen()).count()
    }

    /// Freezes the first `k` conv blocks entirely.
    pub fn freeze_conv_blocks(&mut self, k: usize) -> Result<()> {
        if k > self.convs.len() {
            return Err(contract(format!("cannot freeze {k} of {} conv blocks", self.convs.len())));
        }
        for c in self.convs.iter_mut().take(k) {
            c.freeze();
        }
        Ok(())
    }

    pub fn force_gates(&mut self, on: bool) {
        for (_, w) in self.weights_mut() {
            w.force_active(on);
        }
    }

    pub fn set_p(&mut self, p: f64) -> Result<()> {
        for (_, w) in self.weights_mut() {
            if w.mode() == WeightMode::Adapter {
                w.set_p(p)?;
            }
        }
        Ok(())
    }

    /// Draws one gate per adapted weight (in identifier order) and fixes the
    /// step weights. Without a generator the gates keep their last value.
    pub fn begin_step(&mut self, mut gates: Option<&mut SeededRng>) {
        for (_, w) in self.weights_mut() {
            if let (Some(rng), WeightMode::Adapter) = (gates.as_deref_mut(), w.mode()) {
                w.draw_gate(rng);
            }
            w.begin_step();
        }
    }

    /// Active/inactive gate of every adapted weight for the current step.
    pub fn gates(&self) -> Vec<(String, bool)> {
        self.weights()
            .into_iter()
            .filter(|(_, w)| w.mode() == WeightMode::Adapter)
            .map(|(n, w)| (n, w.last_gate()))
            .collect()
    }

    fn check_input(&self, x: &Matrix, n: usize) -> Result<()> {
        if n == 0 || x.rows() != self.cfg.leads || x.cols() != n * self.cfg.seq_len {
            return Err(contract(format!(
                "backbone expects {} x (n·{}), got {} x {} for n={n}",
                self.cfg.leads,
                self.cfg.seq_len,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Training forward (after `begin_step`). The unlabeled batch only
    /// contributes batch-norm statistics inside the conv blocks and is
    /// released before the attention blocks.
    pub fn forward_train(
        &mut self,
        labeled: &Matrix,
        n_b: usize,
        unlabeled: Option<(&Matrix, usize)>,
        update_running: bool,
    ) -> Result<Matrix> {
        self.check_input(labeled, n_b)?;
        if let Some((u, n_u)) = unlabeled {
            self.check_input(u, n_u)?;
        }
        let mut len = self.cfg.seq_len;
        let mut xl = labeled.clone();
        let mut xu = unlabeled.map(|(u, _)| u.clone());
        let n_u = unlabeled.map_or(0, |(_, n)| n);
        for c in self.convs.iter_mut() {
            let (yl, yu) = c.forward_train((&xl, n_b), xu.as_ref().map(|u| (u, n_u)), len, update_running)?;
            xl = yl;
            xu = yu;
            len = c.out_len(len);
        }
        drop(xu);
        let t = self.tokens();
        let mut h = tokenize(&xl, n_b, &self.pos.value)?;
        for a in self.atts.iter_mut() {
            h = a.forward_train(&h, n_b, t, Provenance::Labeled)?;
        }
        let logits = self.head.forward_train(&h, t, Provenance::Labeled)?;
        self.counters.forward += 1;
        self.step = Some(StepState { n: n_b });
        Ok(logits)
    }

    /// Backward from logit gradients. Completes the step's weight gradients;
    /// returns the labeled input gradient when requested and reachable.
    pub fn backward(&mut self, grad_logits: &Matrix, want_input: bool) -> Result<Option<Matrix>> {
        let st = self
            .step
            .take()
            .ok_or_else(|| Error::State("backbone backward without forward".into()))?;
        let t = self.tokens();
        let mut g = self.head.backward(grad_logits)?;
        for a in self.atts.iter_mut().rev() {
            g = a.backward(&g)?;
        }
        let hidden = self.cfg.hidden;
        let pg = self.pos.grad.data_mut();
        let mut gc = Matrix::zeros(hidden, st.n * t);
        for row in 0..st.n * t {
            let src = g.row(row);
            let tt = row % t;
            for h in 0..hidden {
                gc.set(h, row, src[h]);
                pg[tt * hidden + h] += src[h];
            }
        }
        let first = self.frozen_blocks();
        let mut gl = Some(gc);
        let mut gu: Option<Matrix> = None;
        for (i, c) in self.convs.iter_mut().enumerate().rev() {
            if i < first {
                break;
            }
            let need = i > first || want_input;
            let g_in = gl.take().ok_or_else(|| Error::State("missing conv gradient".into()))?;
            let (dl, du) = c.backward(&g_in, gu.as_ref(), need)?;
            gl = dl;
            gu = du;
        }
        for (_, w) in self.weights_mut() {
            w.finish_backward()?;
        }
        self.counters.backward += 1;
        Ok(if want_input && first == 0 { gl } else { None })
    }

    /// Inference logits with merged weights and running statistics.
    pub fn forward_eval(&self, x: &Matrix, n: usize) -> Result<Matrix> {
        self.check_input(x, n)?;
        let mut len = self.cfg.seq_len;
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward_eval(&h, n, len)?;
            len = c.out_len(len);
        }
        let t = self.tokens();
        let mut h = tokenize(&h, n, &self.pos.value)?;
        for a in &self.atts {
            h = a.forward_eval(&h, n, t)?;
        }
        self.head.forward_eval(&h, t)
    }

    pub fn predict_proba(&self, x: &Matrix, n: usize) -> Result<Matrix> {
        Ok(self.forward_eval(x, n)?.map(sigmoid))
    }

    pub fn zero_grad(&mut self) {
        for c in self.convs.iter_mut() {
            c.zero_grad();
        }
        self.pos.zero_grad();
        for a in self.atts.iter_mut() {
            a.zero_grad();
        }
        self.head.zero_grad();
    }

    /// Visits every trainable tensor (adapters, directly trained weights,
    /// norms, positional embedding, biases) in a fixed order.
    pub fn visit_trainable(&mut self, f: &mut ParamFn<'_>) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            if !c.is_frozen() {
                c.visit_trainable(&format!("conv{i}"), f);
            }
        }
        f("pos_embedding", &mut self.pos);
        for (i, a) in self.atts.iter_mut().enumerate() {
            a.visit_trainable(&format!("att{i}"), f);
        }
        self.head.visit_trainable("head", f);
    }

    pub fn trainable_param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_trainable(&mut |_, p| n += p.numel());
        n
    }

    /// Adapter scalars only: `Σ r·(d1 + d2)`.
    pub fn adapter_param_count(&self) -> usize {
        self.weights()
            .iter()
            .filter(|(_, w)| w.mode() == WeightMode::Adapter)
            .map(|(_, w)| w.trainable_params())
            .sum()
    }

    /// Scalars in every stored parameter tensor (running statistics excluded).
    pub fn total_param_count(&self) -> usize {
        let weights: usize = self.weights().iter().map(|(_, w)| w.d1() * w.d2()).sum();
        let bn: usize = self.convs.iter().map(|c| 2 * c.bn.channels()).sum();
        let ln: usize = self.atts.iter().map(|a| 4 * a.width()).sum();
        let bias: usize = self.head.hidden.iter().map(|d| d.bias.numel()).sum::<usize>() + self.head.out.bias.numel();
        weights + bn + ln + bias + self.pos.numel()
    }

    /// Folds every adapter into its base weight.
    pub fn bake(&mut self) {
        for (_, w) in self.weights_mut() {
            if w.mode() == WeightMode::Adapter {
                w.bake();
            }
        }
    }

    pub fn is_merged(&self) -> bool {
        self.weights().iter().all(|(_, w)| w.mode() != WeightMode::Adapter)
    }

    pub fn base_fingerprints(&self) -> Vec<(String, u64)> {
        self.weights()
            .into_iter()
            .map(|(n, w)| (n, w.base_fingerprint()))
            .collect()
    }

    pub fn weight_layouts(&self) -> Vec<WeightLayout> {
        self.weights()
            .into_iter()
            .map(|(name, w)| WeightLayout {
                name,
                mode: w.mode(),
                rank: w.rank(),
                p: w.p(),
            })
            .collect()
    }

    pub fn restore_layouts(&mut self, layouts: &[WeightLayout]) -> Result<()> {
        let mut ws = self.weights_mut();
        if ws.len() != layouts.len() {
            return Err(Error::Data(format!(
                "checkpoint lists {} weights, model has {}",
                layouts.len(),
                ws.len()
            )));
        }
        for ((name, w), l) in ws.iter_mut().zip(layouts) {
            if *name != l.name {
                return Err(Error::Data(format!("checkpoint weight {} where {name} was expected", l.name)));
            }
            w.restore_layout(l.mode, l.rank, l.p)?;
        }
        Ok(())
    }

    /// Every stored tensor, including running statistics, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            let p = format!("conv{i}");
            out.extend(c.kernel.tensors(&join(&p, "kernel")).into_iter().map(|(n, m)| (n, m.clone())));
            if let Some(s) = &c.skip {
                out.extend(s.tensors(&join(&p, "skip")).into_iter().map(|(n, m)| (n, m.clone())));
            }
            out.extend(c.bn.tensors(&join(&p, "bn")));
        }
        out.push(("pos_embedding".into(), self.pos.value.clone()));
        for (i, a) in self.atts.iter().enumerate() {
            let p = format!("att{i}");
            for (ln, norm) in [("ln1", &a.ln1), ("ln2", &a.ln2)] {
                out.push((format!("{p}.{ln}.gain"), norm.gain.value.clone()));
                out.push((format!("{p}.{ln}.bias"), norm.bias.value.clone()));
            }
            for (name, w) in a.named_weights() {
                out.extend(w.tensors(&join(&p, name)).into_iter().map(|(n, m)| (n, m.clone())));
            }
        }
        for (i, d) in self.head.hidden.iter().enumerate() {
            let p = format!("head.fc{i}");
            out.extend(d.weight.tensors(&p).into_iter().map(|(n, m)| (n, m.clone())));
            out.push((join(&p, "bias"), d.bias.value.clone()));
        }
        out.extend(self.head.out.weight.tensors("head.out").into_iter().map(|(n, m)| (n, m.clone())));
        out.push(("head.out.bias".into(), self.head.out.bias.value.clone()));
        out
    }

    fn slot(&mut self, owner: &str) -> Option<Slot<'_>> {
        if let Some(rest) = owner.strip_prefix("conv") {
            let (idx, part) = rest.split_once('.')?;
            let c = self.convs.get_mut(idx.parse::<usize>().ok()?)?;
            return match part {
                "kernel" => Some(Slot::Weight(&mut c.kernel)),
                "skip" => c.skip.as_mut().map(Slot::Weight),
                "bn" => Some(Slot::Bn(&mut c.bn)),
                _ => None,
            };
        }
        if let Some(rest) = owner.strip_prefix("att") {
            let (idx, part) = rest.split_once('.')?;
            let a = self.atts.get_mut(idx.parse::<usize>().ok()?)?;
            return match part {
                "ln1" => Some(Slot::Ln(&mut a.ln1)),
                "ln2" => Some(Slot::Ln(&mut a.ln2)),
                _ => a
                    .named_weights_mut()
                    .into_iter()
                    .find(|(n, _)| *n == part)
                    .map(|(_, w)| Slot::Weight(w)),
            };
        }
        None
    }

    /// Restores one tensor by its checkpoint name.
    pub fn load_named_tensor(&mut self, name: &str, value: Matrix) -> Result<()> {
        let unknown = || Error::Data(format!("unknown tensor {name}"));
        let check = |slot: &Matrix, value: &Matrix| -> Result<()> {
            if slot.shape() != value.shape() {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: slot.shape(),
                    found: value.shape(),
                });
            }
            Ok(())
        };
        if name == "pos_embedding" {
            check(&self.pos.value, &value)?;
            self.pos.value = value;
            return Ok(());
        }
        let (owner, local) = name.rsplit_once('.').ok_or_else(unknown)?;
        if let Some(rest) = owner.strip_prefix("head.") {
            let dense = if rest == "out" {
                &mut self.head.out
            } else {
                let i: usize = rest.strip_prefix("fc").and_then(|s| s.parse().ok()).ok_or_else(unknown)?;
                self.head.hidden.get_mut(i).ok_or_else(unknown)?
            };
            if local == "bias" {
                check(&dense.bias.value, &value)?;
                dense.bias.value = value;
                return Ok(());
            }
            return dense.weight.load_tensor(local, value);
        }
        match self.slot(owner).ok_or_else(unknown)? {
            Slot::Weight(w) => w.load_tensor(local, value),
            Slot::Bn(bn) => bn.load_tensor(local, value),
            Slot::Ln(ln) => {
                let p = match local {
                    "gain" => &mut ln.gain,
                    "bias" => &mut ln.bias,
                    _ => return Err(unknown()),
                };
                check(&p.value, &value)?;
                p.value = value;
                Ok(())
            }
        }
    }
}
