//! Mean-pooled token features through fully connected layers to logits.

use crate::adapter::AdaptedWeight;
use crate::error::{contract, Error, Result};
use crate::model::attention::{Provenance, ProvenanceLog};
use crate::model::conv::DEFAULT_NEGATIVE_SLOPE;
use crate::numeric::{matmul_nt, Matrix, SeededRng};
use crate::param::{join, Param, ParamFn};

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: AdaptedWeight,
    pub bias: Param,
}

impl Dense {
    fn new(out: usize, inp: usize, rng: &mut SeededRng) -> Self {
        Self {
            weight: AdaptedWeight::full(Matrix::random_normal(out, inp, (1.0 / inp as f64).sqrt(), rng)),
            bias: Param::new(Matrix::zeros(1, out)),
        }
    }

    fn add_bias(&self, y: &mut Matrix) {
        let b = self.bias.value.data();
        for r in 0..y.rows() {
            for (v, bv) in y.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }

    fn eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = matmul_nt(x, &self.weight.eval_weight())?;
        self.add_bias(&mut y);
        Ok(y)
    }

    fn train(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = self.weight.apply_rows(x)?;
        self.add_bias(&mut y);
        Ok(y)
    }

    fn backward(&mut self, g: &Matrix, x: &Matrix) -> Result<Matrix> {
        self.weight.accumulate_rows(g, x)?;
        let bg = self.bias.grad.data_mut();
        for r in 0..g.rows() {
            for (b, v) in bg.iter_mut().zip(g.row(r)) {
                *b += v;
            }
        }
        self.weight.input_grad_rows(g)
    }

    fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.weight.visit_trainable(prefix, f);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Debug)]
struct HeadCache {
    t: usize,
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub hidden: Vec<Dense>,
    pub out: Dense,
    negative_slope: f64,
    pub provenance: ProvenanceLog,
    cache: Option<HeadCache>,
}

/// Per-recording mean over `t` consecutive token rows.
pub fn mean_pool(x: &Matrix, t: usize) -> Result<Matrix> {
    if t == 0 || x.rows() % t != 0 {
        return Err(contract(format!("cannot pool {} rows in groups of {t}", x.rows())));
    }
    let n = x.rows() / t;
    let mut out = Matrix::zeros(n, x.cols());
    for s in 0..n {
        let dst = out.row_mut(s);
        for i in 0..t {
            for (d, v) in dst.iter_mut().zip(x.row(s * t + i)) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= t as f64;
        }
    }
    Ok(out)
}

impl ClassifierHead {
    pub fn new(width: usize, n_hidden: usize, classes: usize, rng: &mut SeededRng) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let hidden = (0..n_hidden).map(|_| Dense::new(width, width, rng)).collect();
        Ok(Self {
            hidden,
            out: Dense::new(classes, width, rng),
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            provenance: ProvenanceLog::default(),
            cache: None,
        })
    }

    pub fn classes(&self) -> usize {
        self.out.weight.d1()
    }

    fn act(&self, m: &Matrix) -> Matrix {
        let s = self.negative_slope;
        m.map(|v| if v > 0.0 { v } else { s * v })
    }

    pub fn forward_eval(&self, tokens: &Matrix, t: usize) -> Result<Matrix> {
        let mut x = mean_pool(tokens, t)?;
        for d in &self.hidden {
            x = self.act(&d.eval(&x)?);
        }
        self.out.eval(&x)
    }

    /// Logits for the labeled batch.
    pub fn forward_train(&mut self, tokens: &Matrix, t: usize, provenance: Provenance) -> Result<Matrix> {
        let mut x = mean_pool(tokens, t)?;
        self.provenance.record(provenance, x.rows());
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        for d in &self.hidden {
            let z = d.train(&x)?;
            inputs.push(x);
            x = self.act(&z);
            pre.push(z);
        }
        let logits = self.out.train(&x)?;
        inputs.push(x);
        self.cache = Some(HeadCache { t, inputs, pre });
        Ok(logits)
    }

    /// Smallest |pre-activation| seen by the last training forward.
    pub fn kink_distance(&self) -> Option<f64> {
        let c = self.cache.as_ref()?;
        Some(c.pre.iter().flat_map(|z| z.data()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    /// Returns the gradient with respect to the token rows.
    pub fn backward(&mut self, g_logits: &Matrix) -> Result<Matrix> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::State("head backward without forward".into()))?;
        let k = self.hidden.len();
        let mut g = self.out.backward(g_logits, &c.inputs[k])?;
        for i in (0..k).rev() {
            let s = self.negative_slope;
            g = g.zip_with(&c.pre[i], |gv, z| if z > 0.0 { gv } else { s * gv })?;
            g = self.hidden[i].backward(&g, &c.inputs[i])?;
        }
        let n = g.rows();
        let mut gt = Matrix::zeros(n * c.t, g.cols());
        let inv = 1.0 / c.t as f64;
        for s in 0..n {
            for i in 0..c.t {
                for (d, v) in gt.row_mut(s * c.t + i).iter_mut().zip(g.row(s)) {
                    *d = v * inv;
                }
            }
        }
        Ok(gt)
    }

    pub fn named_weights_mut(&mut self) -> Vec<(String, &mut AdaptedWeight)> {
        let mut v: Vec<(String, &mut AdaptedWeight)> = self
            .hidden
            .iter_mut()
            .enumerate()
            .map(|(i, d)| (format!("fc{i}"), &mut d.weight))
            .collect();
        v.push(("out".into(), &mut self.out.weight));
        v
    }

    pub fn zero_grad(&mut self) {
        for d in self.hidden.iter_mut().chain(std::iter::once(&mut self.out)) {
            d.weight.zero_grad();
            d.bias.zero_grad();
        }
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        for (i, d) in self.hidden.iter_mut().enumerate() {
            d.visit_trainable(&join(prefix, &format!("fc{i}")), f);
        }
        self.out.visit_trainable(&join(prefix, "out"), f);
    }
}
