//! Batch normalization whose training statistics can pool a labeled and an
//! unlabeled batch.
//!
//! With `N_B` labeled and `N_U` unlabeled recordings and `γ = N_B/(N_B+N_U)`:
//!
//! ```text
//! μ  = γ·mean(x_b) + (1-γ)·mean(x_u)
//! σ² = γ·mean((x_b-μ)²) + (1-γ)·mean((x_u-μ)²)
//! ```
//!
//! Each part's contribution is computed from its own mean and central
//! variance, `mean((x-μ)²) = var + (mean-μ)²`, so identical halves reproduce
//! the supervised statistics exactly.
//!
//! Both halves are normalized with the pooled statistics. The gradient flows
//! through the statistics into both halves, which is the exact gradient of BN
//! over the concatenated batch.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::numeric::Matrix;
use crate::param::{join, Param, ParamFn};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    TrainSemi,
    TrainSupervised,
    Eval,
}

/// Per-channel statistics used for one training forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Labeled share γ; 1 when no unlabeled batch took part.
    pub gamma: f64,
}

fn channel_moments(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.cols() as f64;
    let mut means = Vec::with_capacity(x.rows());
    let mut vars = Vec::with_capacity(x.rows());
    for c in 0..x.rows() {
        let row = x.row(c);
        let m = row.iter().sum::<f64>() / n;
        let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        means.push(m);
        vars.push(v);
    }
    (means, vars)
}

/// Pooled statistics over labeled activations (`C x cols_b`) and optional
/// unlabeled activations (`C x cols_u`), weighted by recording counts.
pub fn pooled_stats(
    labeled: &Matrix,
    n_b: usize,
    unlabeled: Option<(&Matrix, usize)>,
) -> Result<BatchStats> {
    if n_b == 0 || labeled.cols() == 0 {
        return Err(contract("batch normalization needs at least one labeled recording"));
    }
    let (ml, vl) = channel_moments(labeled);
    let Some((u, n_u)) = unlabeled else {
        return Ok(BatchStats {
            mean: ml,
            var: vl,
            gamma: 1.0,
        });
    };
    if n_u == 0 || u.cols() == 0 {
        return Err(contract("semi-supervised statistics need at least one unlabeled recording"));
    }
    if u.rows() != labeled.rows() {
        return Err(contract(format!(
            "labeled/unlabeled channel mismatch: {} vs {}",
            labeled.rows(),
            u.rows()
        )));
    }
    let gamma = n_b as f64 / (n_b + n_u) as f64;
    let (mu, vu) = channel_moments(u);
    let mut mean = Vec::with_capacity(ml.len());
    let mut var = Vec::with_capacity(ml.len());
    for c in 0..ml.len() {
        let m = gamma * ml[c] + (1.0 - gamma) * mu[c];
        let dl = ml[c] - m;
        let du = mu[c] - m;
        mean.push(m);
        var.push(gamma * (vl[c] + dl * dl) + (1.0 - gamma) * (vu[c] + du * du));
    }
    Ok(BatchStats { mean, var, gamma })
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat_l: Matrix,
    xhat_u: Option<Matrix>,
    inv_std: Vec<f64>,
    w_l: f64,
    w_u: f64,
    eval: bool,
}

/// Semi-supervised batch-normalization layer over the rows (channels) of
/// column-major activations.
#[derive(Clone, Debug)]
pub struct SemiBn {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
    trainable: bool,
    last_stats: Option<BatchStats>,
    cache: Option<BnCache>,
}

impl SemiBn {
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Param::new(Matrix::filled(channels, 1, 1.0)),
            shift: Param::new(Matrix::zeros(channels, 1)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::TrainSupervised,
            trainable: true,
            last_stats: None,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.trainable = on;
    }

    /// Statistics of the most recent training forward.
    pub fn last_stats(&self) -> Option<&BatchStats> {
        self.last_stats.as_ref()
    }

    fn check_channels(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.channels() {
            return Err(contract(format!(
                "batch norm over {} channels got {} rows",
                self.channels(),
                x.rows()
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &Matrix, mean: &[f64], inv_std: &[f64]) -> (Matrix, Matrix) {
        let mut xhat = Matrix::zeros(x.rows(), x.cols());
        let mut y = Matrix::zeros(x.rows(), x.cols());
        for c in 0..x.rows() {
            let (s, b) = (self.scale.value.get(c, 0), self.shift.value.get(c, 0));
            let (m, is) = (mean[c], inv_std[c]);
            for ((xh, yv), &v) in xhat.row_mut(c).iter_mut().zip(y.row_mut(c).iter_mut()).zip(x.row(c)) {
                *xh = (v - m) * is;
                *yv = s * *xh + b;
            }
        }
        (xhat, y)
    }

    /// Inference path using running statistics; never mutates the layer.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        self.check_channels(x)?;
        let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        Ok(self.normalize(x, &self.running_mean, &inv).1)
    }

    /// Training forward. Returns normalized labeled and (when given) unlabeled
    /// activations. In `Eval` mode running statistics are used and nothing is
    /// updated, but a cache is kept so gradients can still pass through.
    pub fn forward_train(
        &mut self,
        labeled: &Matrix,
        n_b: usize,
        unlabeled: Option<(&Matrix, usize)>,
        update_running: bool,
    ) -> Result<(Matrix, Option<Matrix>)> {
        self.check_channels(labeled)?;
        if let Some((u, _)) = unlabeled {
            self.check_channels(u)?;
        }
        let (mean, inv_std, w_l, w_u, eval) = match self.mode {
            BnMode::Eval => {
                let inv: Vec<f64> = self.running_var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                (self.running_mean.clone(), inv, 0.0, 0.0, true)
            }
            BnMode::TrainSupervised | BnMode::TrainSemi => {
                let pooled = match self.mode {
                    BnMode::TrainSemi => {
                        if unlabeled.is_none() {
                            return Err(contract("train-semi batch norm requires an unlabeled batch"));
                        }
                        unlabeled
                    }
                    _ => {
                        if unlabeled.is_some() {
                            return Err(contract("supervised batch norm was given an unlabeled batch"));
                        }
                        None
                    }
                };
                let stats = pooled_stats(labeled, n_b, pooled)?;
                let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
                let w_l = stats.gamma / labeled.cols() as f64;
                let w_u = pooled.map_or(0.0, |(u, _)| (1.0 - stats.gamma) / u.cols() as f64);
                if update_running {
                    let m = self.momentum;
                    for c in 0..self.channels() {
                        self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * stats.mean[c];
                        self.running_var[c] = (1.0 - m) * self.running_var[c] + m * stats.var[c];
                    }
                }
                let mean = stats.mean.clone();
                self.last_stats = Some(stats);
                (mean, inv, w_l, w_u, false)
            }
        };
        let (xhat_l, y_l) = self.normalize(labeled, &mean, &inv_std);
        let (xhat_u, y_u) = match unlabeled {
            Some((u, _)) => {
                let (xh, y) = self.normalize(u, &mean, &inv_std);
                (Some(xh), Some(y))
            }
            None => (None, None),
        };
        self.cache = Some(BnCache {
            xhat_l,
            xhat_u,
            inv_std,
            w_l,
            w_u,
            eval,
        });
        Ok((y_l, y_u))
    }

    /// Backward through the last training forward. Accumulates scale/shift
    /// gradients (when trainable) and returns input gradients for each half.
    pub fn backward(&mut self, g_l: &Matrix, g_u: Option<&Matrix>) -> Result<(Matrix, Option<Matrix>)> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("batch norm backward without forward".into()))?;
        if g_l.shape() != cache.xhat_l.shape() {
            return Err(contract("batch norm gradient shape mismatch"));
        }
        let channels = self.channels();
        let mut sum_g = vec![0.0; channels];
        let mut sum_gx = vec![0.0; channels];
        let mut accumulate = |g: &Matrix, xh: &Matrix| {
            for c in 0..channels {
                let (mut sg, mut sgx) = (0.0, 0.0);
                for (gv, xv) in g.row(c).iter().zip(xh.row(c)) {
                    sg += gv;
                    sgx += gv * xv;
                }
                sum_g[c] += sg;
                sum_gx[c] += sgx;
            }
        };
        accumulate(g_l, &cache.xhat_l);
        let zero_u;
        let g_u = match (&cache.xhat_u, g_u) {
            (Some(xh), Some(g)) => {
                accumulate(g, xh);
                Some(g)
            }
            (Some(xh), None) => {
                zero_u = Matrix::zeros(xh.rows(), xh.cols());
                Some(&zero_u)
            }
            (None, _) => None,
        };
        if self.trainable {
            for c in 0..channels {
                self.scale.grad.data_mut()[c] += sum_gx[c];
                self.shift.grad.data_mut()[c] += sum_g[c];
            }
        }
        let input_grad = |g: &Matrix, xh: &Matrix, w: f64| {
            let mut dx = Matrix::zeros(g.rows(), g.cols());
            for c in 0..channels {
                let k = self.scale.value.get(c, 0) * cache.inv_std[c];
                let (a, b) = if cache.eval { (0.0, 0.0) } else { (w * sum_g[c], w * sum_gx[c]) };
                for ((d, &gv), &xv) in dx.row_mut(c).iter_mut().zip(g.row(c)).zip(xh.row(c)) {
                    *d = k * (gv - a - xv * b);
                }
            }
            dx
        };
        let dx_l = input_grad(g_l, &cache.xhat_l, cache.w_l);
        let dx_u = match (g_u, &cache.xhat_u) {
            (Some(g), Some(xh)) => Some(input_grad(g, xh, cache.w_u)),
            _ => None,
        };
        Ok((dx_l, dx_u))
    }

    pub fn zero_grad(&mut self) {
        self.scale.zero_grad();
        self.shift.zero_grad();
    }

    pub fn trainable_params(&self) -> usize {
        if self.trainable {
            2 * self.channels()
        } else {
            0
        }
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        if self.trainable {
            f(&join(prefix, "scale"), &mut self.scale);
            f(&join(prefix, "shift"), &mut self.shift);
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, Matrix)> {
        let c = self.channels();
        vec![
            (join(prefix, "scale"), self.scale.value.clone()),
            (join(prefix, "shift"), self.shift.value.clone()),
            (join(prefix, "running_mean"), Matrix::from_vec(c, 1, self.running_mean.clone()).expect("shape")),
            (join(prefix, "running_var"), Matrix::from_vec(c, 1, self.running_var.clone()).expect("shape")),
        ]
    }

    pub(crate) fn load_tensor(&mut self, local: &str, value: Matrix) -> Result<()> {
        let expected = (self.channels(), 1);
        if value.shape() != expected {
            return Err(Error::Shape {
                name: local.to_string(),
                expected,
                found: value.shape(),
            });
        }
        match local {
            "scale" => self.scale.value = value,
            "shift" => self.shift.value = value,
            "running_mean" => self.running_mean = value.into_vec(),
            "running_var" => self.running_var = value.into_vec(),
            other => return Err(Error::Data(format!("unknown batch norm tensor {other}"))),
        }
        Ok(())
    }
}

/// Forward of the labeled half only: statistics pool both halves, the
/// unlabeled activations are dropped once they have been counted.
pub fn semibn_forward(
    bn: &mut SemiBn,
    labeled: &Matrix,
    n_b: usize,
    unlabeled: Option<(&Matrix, usize)>,
) -> Result<Matrix> {
    if bn.mode == BnMode::Eval {
        return bn.forward_eval(labeled);
    }
    Ok(bn.forward_train(labeled, n_b, unlabeled, true)?.0)
}
