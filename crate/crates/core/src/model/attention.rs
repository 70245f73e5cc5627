//! Pre-norm transformer block over token rows (`(n·T) x H`).

use serde::{Deserialize, Serialize};

use crate::adapter::AdaptedWeight;
use crate::error::{contract, Error, Result};
use crate::numeric::{gemm_block, matmul_nt, Block, Matrix, SeededRng};
use crate::param::{join, Param, ParamFn};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// `tanh` through one `exp`; much cheaper than the libm routine.
fn fast_tanh(y: f64) -> f64 {
    if y.abs() > 20.0 {
        return y.signum();
    }
    let e = (2.0 * y).exp();
    (e - 1.0) / (e + 1.0)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = fast_tanh(GELU_C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Which batch a forward pass came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Labeled,
    Unlabeled,
}

/// Rows seen by a layer, split by provenance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceLog {
    pub labeled_rows: u64,
    pub unlabeled_rows: u64,
}

impl ProvenanceLog {
    pub fn record(&mut self, p: Provenance, rows: usize) {
        match p {
            Provenance::Labeled => self.labeled_rows += rows as u64,
            Provenance::Unlabeled => self.unlabeled_rows += rows as u64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Param,
    pub bias: Param,
    cache: Option<(Matrix, Vec<f64>)>,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Param::new(Matrix::filled(1, width, 1.0)),
            bias: Param::new(Matrix::zeros(1, width)),
            cache: None,
        }
    }

    fn normalize(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
        let h = self.gain.value.cols();
        if x.cols() != h {
            return Err(contract(format!("layer norm over {h} features got {} columns", x.cols())));
        }
        let mut xhat = Matrix::zeros(x.rows(), h);
        let mut y = Matrix::zeros(x.rows(), h);
        let mut inv = Vec::with_capacity(x.rows());
        let (g, b) = (self.gain.value.data(), self.bias.value.data());
        for r in 0..x.rows() {
            let row = x.row(r);
            let m = row.iter().sum::<f64>() / h as f64;
            let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / h as f64;
            let is = 1.0 / (v + LN_EPS).sqrt();
            inv.push(is);
            let xr = xhat.row_mut(r);
            for j in 0..h {
                xr[j] = (row[j] - m) * is;
            }
            let yr = y.row_mut(r);
            for j in 0..h {
                yr[j] = g[j] * xhat.get(r, j) + b[j];
            }
        }
        Ok((xhat, inv, y))
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.normalize(x)?.2)
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let (xhat, inv, y) = self.normalize(x)?;
        self.cache = Some((xhat, inv));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Matrix) -> Result<Matrix> {
        let (xhat, inv) = self
            .cache
            .take()
            .ok_or_else(|| Error::State("layer norm backward without forward".into()))?;
        let h = xhat.cols();
        let g = self.gain.value.data().to_vec();
        let mut dx = Matrix::zeros(dy.rows(), h);
        for r in 0..dy.rows() {
            let (dyr, xr) = (dy.row(r), xhat.row(r));
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..h {
                let d = dyr[j] * g[j];
                m1 += d;
                m2 += d * xr[j];
                self.gain.grad.data_mut()[j] += dyr[j] * xr[j];
                self.bias.grad.data_mut()[j] += dyr[j];
            }
            m1 /= h as f64;
            m2 /= h as f64;
            let out = dx.row_mut(r);
            for j in 0..h {
                out[j] = inv[r] * (dyr[j] * g[j] - m1 - xr[j] * m2);
            }
        }
        Ok(dx)
    }

    pub fn zero_grad(&mut self) {
        self.gain.zero_grad();
        self.bias.zero_grad();
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        f(&join(prefix, "gain"), &mut self.gain);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

fn head(m: &Matrix, s: usize, t: usize, h: usize, dh: usize) -> Block<'_> {
    Block::new(m, s * t, h * dh, t, dh)
}

fn softmax_rows(m: &mut Matrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

#[derive(Clone, Debug)]
struct AttCache {
    n: usize,
    t: usize,
    h1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    mixed: Matrix,
    h2: Matrix,
    u: Matrix,
    m: Matrix,
}

struct Weights<'a> {
    q: &'a Matrix,
    k: &'a Matrix,
    v: &'a Matrix,
    proj: &'a Matrix,
    mlp_in: &'a Matrix,
    mlp_out: &'a Matrix,
}

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub ln1: LayerNorm,
    pub q: AdaptedWeight,
    pub k: AdaptedWeight,
    pub v: AdaptedWeight,
    pub proj: AdaptedWeight,
    pub ln2: LayerNorm,
    pub mlp_in: AdaptedWeight,
    pub mlp_out: AdaptedWeight,
    heads: usize,
    pub provenance: ProvenanceLog,
    cache: Option<AttCache>,
}

impl AttentionBlock {
    pub fn new(width: usize, heads: usize, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || width == 0 || width % heads != 0 {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        let std = (1.0 / width as f64).sqrt();
        let mut sq = || AdaptedWeight::full(Matrix::random_normal(width, width, std, rng));
        let (q, k, v, proj) = (sq(), sq(), sq(), sq());
        let mlp_in = AdaptedWeight::full(Matrix::random_normal(4 * width, width, std, rng));
        let mlp_out = AdaptedWeight::full(Matrix::random_normal(width, 4 * width, (1.0 / (4 * width) as f64).sqrt(), rng));
        Ok(Self {
            ln1: LayerNorm::new(width),
            q,
            k,
            v,
            proj,
            ln2: LayerNorm::new(width),
            mlp_in,
            mlp_out,
            heads,
            provenance: ProvenanceLog::default(),
            cache: None,
        })
    }

    pub fn width(&self) -> usize {
        self.q.d1()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

}

fn run(
    heads: usize,
    w: &Weights<'_>,
    x: &Matrix,
    n: usize,
    t: usize,
    h1: Matrix,
    ln2: &mut dyn FnMut(&Matrix) -> Result<Matrix>,
) -> Result<(Matrix, AttCache)> {
        let width = w.q.rows();
        if x.cols() != width || x.rows() != n * t {
            return Err(contract(format!("attention expects {} x {width}, got {} x {}", n * t, x.rows(), x.cols())));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = matmul_nt(&h1, w.q)?;
        let k = matmul_nt(&h1, w.k)?;
        let v = matmul_nt(&h1, w.v)?;
        let mut mixed = Matrix::zeros(n * t, width);
        let mut probs = Vec::with_capacity(n * heads);
        for s in 0..n {
            for h in 0..heads {
                let mut p = Matrix::zeros(t, t);
                gemm_block(head(&q, s, t, h, dh), head(&k, s, t, h, dh).t(), 0.0, &mut p, 0, 0);
                for v in p.data_mut() {
                    *v *= scale;
                }
                softmax_rows(&mut p);
                gemm_block(Block::new(&p, 0, 0, t, t), head(&v, s, t, h, dh), 0.0, &mut mixed, s * t, h * dh);
                probs.push(p);
            }
        }
        let mut x2 = matmul_nt(&mixed, w.proj)?;
        x2.axpy(1.0, x)?;
        let h2 = ln2(&x2)?;
        let u = matmul_nt(&h2, w.mlp_in)?;
        let m = u.map(gelu);
        let mut out = matmul_nt(&m, w.mlp_out)?;
        out.axpy(1.0, &x2)?;
        Ok((
            out,
            AttCache {
                n,
                t,
                h1,
                q,
                k,
                v,
                probs,
                mixed,
                h2,
                u,
                m,
            },
        ))
}

impl AttentionBlock {
    /// Inference forward with merged weights.
    pub fn forward_eval(&self, x: &Matrix, n: usize, t: usize) -> Result<Matrix> {
        let ws = [&self.q, &self.k, &self.v, &self.proj, &self.mlp_in, &self.mlp_out].map(|w| w.eval_weight());
        let w = Weights {
            q: &ws[0],
            k: &ws[1],
            v: &ws[2],
            proj: &ws[3],
            mlp_in: &ws[4],
            mlp_out: &ws[5],
        };
        let h1 = self.ln1.forward_eval(x)?;
        Ok(run(self.heads, &w, x, n, t, h1, &mut |z| self.ln2.forward_eval(z))?.0)
    }

    pub fn forward_train(&mut self, x: &Matrix, n: usize, t: usize, provenance: Provenance) -> Result<Matrix> {
        let h1 = self.ln1.forward_train(x)?;
        let w = Weights {
            q: self.q.step_weight()?,
            k: self.k.step_weight()?,
            v: self.v.step_weight()?,
            proj: self.proj.step_weight()?,
            mlp_in: self.mlp_in.step_weight()?,
            mlp_out: self.mlp_out.step_weight()?,
        };
        let ln2 = &mut self.ln2;
        let (out, cache) = run(self.heads, &w, x, n, t, h1, &mut |z| ln2.forward_train(z))?;
        self.provenance.record(provenance, x.rows());
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn backward(&mut self, g: &Matrix) -> Result<Matrix> {
        let c = self
            .cache
            .take()
            .ok_or_else(|| Error::State("attention backward without forward".into()))?;
        let width = self.width();
        let dh = width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();

        self.mlp_out.accumulate_rows(g, &c.m)?;
        let gm = self.mlp_out.input_grad_rows(g)?;
        let gu = gm.zip_with(&c.u, |a, u| a * gelu_grad(u))?;
        self.mlp_in.accumulate_rows(&gu, &c.h2)?;
        let gh2 = self.mlp_in.input_grad_rows(&gu)?;
        let mut gx2 = self.ln2.backward(&gh2)?;
        gx2.axpy(1.0, g)?;

        self.proj.accumulate_rows(&gx2, &c.mixed)?;
        let gmix = self.proj.input_grad_rows(&gx2)?;
        let mut gq = Matrix::zeros(c.n * c.t, width);
        let mut gk = Matrix::zeros(c.n * c.t, width);
        let mut gv = Matrix::zeros(c.n * c.t, width);
        let (t, mut dp, mut ds) = (c.t, Matrix::zeros(c.t, c.t), Matrix::zeros(c.t, c.t));
        for s in 0..c.n {
            for h in 0..self.heads {
                let p = &c.probs[s * self.heads + h];
                let go = head(&gmix, s, t, h, dh);
                gemm_block(go, head(&c.v, s, t, h, dh).t(), 0.0, &mut dp, 0, 0);
                gemm_block(Block::new(p, 0, 0, t, t).t(), go, 0.0, &mut gv, s * t, h * dh);
                for i in 0..t {
                    let (pr, dr) = (p.row(i), dp.row(i));
                    let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    let out = ds.row_mut(i);
                    for j in 0..t {
                        out[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                let dsb = Block::new(&ds, 0, 0, t, t);
                gemm_block(dsb, head(&c.k, s, t, h, dh), 0.0, &mut gq, s * t, h * dh);
                gemm_block(dsb.t(), head(&c.q, s, t, h, dh), 0.0, &mut gk, s * t, h * dh);
            }
        }
        self.q.accumulate_rows(&gq, &c.h1)?;
        self.k.accumulate_rows(&gk, &c.h1)?;
        self.v.accumulate_rows(&gv, &c.h1)?;
        let mut gh1 = self.q.input_grad_rows(&gq)?;
        gh1.axpy(1.0, &self.k.input_grad_rows(&gk)?)?;
        gh1.axpy(1.0, &self.v.input_grad_rows(&gv)?)?;
        let mut gx = self.ln1.backward(&gh1)?;
        gx.axpy(1.0, &gx2)?;
        Ok(gx)
    }

    /// Adapted projections in a fixed order with their local names.
    pub fn named_weights_mut(&mut self) -> [(&'static str, &mut AdaptedWeight); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("proj", &mut self.proj),
            ("mlp_in", &mut self.mlp_in),
            ("mlp_out", &mut self.mlp_out),
        ]
    }

    pub fn named_weights(&self) -> [(&'static str, &AdaptedWeight); 6] {
        [
            ("q", &self.q),
            ("k", &self.k),
            ("v", &self.v),
            ("proj", &self.proj),
            ("mlp_in", &self.mlp_in),
            ("mlp_out", &self.mlp_out),
        ]
    }

    pub fn zero_grad(&mut self) {
        for (_, w) in self.named_weights_mut() {
            w.zero_grad();
        }
        self.ln1.zero_grad();
        self.ln2.zero_grad();
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.ln1.visit_trainable(&join(prefix, "ln1"), f);
        self.ln2.visit_trainable(&join(prefix, "ln2"), f);
        for (name, w) in self.named_weights_mut() {
            w.visit_trainable(&join(prefix, name), f);
        }
    }
}
