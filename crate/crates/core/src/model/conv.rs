//! Strided 1-D convolution block: conv, batch norm, leaky ReLU, residual.
//!
//! Activations are `channels x (n·len)`, column `s·len + t` holding time step
//! `t` of recording `s`.

use crate::adapter::AdaptedWeight;
use crate::error::{contract, Error, Result};
use crate::model::batchnorm::{BnMode, SemiBn};
use crate::numeric::{matmul, Matrix, SeededRng};
use crate::param::{join, ParamFn};

pub const DEFAULT_NEGATIVE_SLOPE: f64 = 0.01;

/// Output length and left padding of a "same" strided convolution.
pub fn conv_geometry(len: usize, width: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + width).saturating_sub(len);
    (out, total / 2)
}

/// Unfolds `x` (`c x n·len`) into `(c·width) x (n·out)` patches.
pub fn im2col(x: &Matrix, n: usize, len: usize, width: usize, stride: usize) -> Matrix {
    let c = x.rows();
    let (out, pad) = conv_geometry(len, width, stride);
    let mut cols = Matrix::zeros(c * width, n * out);
    for ch in 0..c {
        let src = x.row(ch);
        for j in 0..width {
            let dst = cols.row_mut(ch * width + j);
            for s in 0..n {
                for t in 0..out {
                    let pos = (t * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dst[s * out + t] = src[s * len + pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im(cols: &Matrix, c: usize, n: usize, len: usize, width: usize, stride: usize) -> Matrix {
    let (out, pad) = conv_geometry(len, width, stride);
    let mut x = Matrix::zeros(c, n * len);
    for ch in 0..c {
        for j in 0..width {
            let src = cols.row(ch * width + j).to_vec();
            let dst = x.row_mut(ch);
            for s in 0..n {
                for t in 0..out {
                    let pos = (t * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dst[s * len + pos as usize] += src[s * out + t];
                    }
                }
            }
        }
    }
    x
}

fn subsample(x: &Matrix, n: usize, len: usize, stride: usize, out: usize) -> Matrix {
    Matrix::from_fn(x.rows(), n * out, |r, col| {
        let (s, t) = (col / out, col % out);
        x.get(r, s * len + t * stride)
    })
}

fn scatter_subsample(dst: &mut Matrix, g: &Matrix, n: usize, len: usize, stride: usize, out: usize) {
    for r in 0..g.rows() {
        let src = g.row(r);
        let row = dst.row_mut(r);
        for s in 0..n {
            for t in 0..out {
                row[s * len + t * stride] += src[s * out + t];
            }
        }
    }
}

#[derive(Clone, Debug)]
struct BranchCache {
    n: usize,
    len: usize,
    cols: Matrix,
    pre: Matrix,
    skip_in: Matrix,
}

#[derive(Clone, Debug)]
struct ConvCache {
    labeled: BranchCache,
    unlabeled: Option<BranchCache>,
}

#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub kernel: AdaptedWeight,
    /// Strided 1x1 projection; `None` means an identity shortcut.
    pub skip: Option<AdaptedWeight>,
    pub bn: SemiBn,
    in_ch: usize,
    out_ch: usize,
    width: usize,
    stride: usize,
    negative_slope: f64,
    frozen: bool,
    cache: Option<ConvCache>,
}

impl ConvBlock {
    /// He-initialized block. A projection shortcut is created whenever the
    /// channel count changes.
    pub fn new(in_ch: usize, out_ch: usize, width: usize, stride: usize, rng: &mut SeededRng) -> Result<Self> {
        if in_ch == 0 || out_ch == 0 || width == 0 || stride == 0 {
            return Err(Error::Config("conv block dimensions must be positive".into()));
        }
        let fan_in = (in_ch * width) as f64;
        let kernel = AdaptedWeight::full(Matrix::random_normal(out_ch, in_ch * width, (2.0 / fan_in).sqrt(), rng));
        let skip = (in_ch != out_ch)
            .then(|| AdaptedWeight::full(Matrix::random_normal(out_ch, in_ch, (1.0 / in_ch as f64).sqrt(), rng)));
        Ok(Self {
            kernel,
            skip,
            bn: SemiBn::new(out_ch),
            in_ch,
            out_ch,
            width,
            stride,
            negative_slope: DEFAULT_NEGATIVE_SLOPE,
            frozen: false,
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_len(&self, len: usize) -> usize {
        conv_geometry(len, self.width, self.stride).0
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_negative_slope(&mut self, slope: f64) -> Result<()> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!("negative slope must lie in (0, 1), got {slope}")));
        }
        self.negative_slope = slope;
        Ok(())
    }

    /// Freezes every weight and switches batch norm to running statistics.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.kernel.bake();
        self.kernel.set_frozen();
        if let Some(s) = self.skip.as_mut() {
            s.bake();
            s.set_frozen();
        }
        self.bn.mode = BnMode::Eval;
        self.bn.set_trainable(false);
        self.cache = None;
    }

    fn check_input(&self, x: &Matrix, n: usize, len: usize) -> Result<()> {
        if x.rows() != self.in_ch || x.cols() != n * len || n == 0 || len == 0 {
            return Err(contract(format!(
                "conv block expects {} x {}, got {} x {}",
                self.in_ch,
                n * len,
                x.rows(),
                x.cols()
            )));
        }
        Ok(())
    }

    /// Smallest |pre-activation| seen by the last training forward.
    pub fn kink_distance(&self) -> Option<f64> {
        let c = self.cache.as_ref()?;
        let branches = std::iter::once(&c.labeled).chain(c.unlabeled.as_ref());
        Some(branches.flat_map(|b| b.pre.data()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
    }

    fn leaky(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            self.negative_slope * v
        }
    }

    /// The convolution stage alone with an explicit kernel.
    pub fn convolve(&self, w: &Matrix, x: &Matrix, n: usize, len: usize) -> Result<Matrix> {
        self.check_input(x, n, len)?;
        matmul(w, &im2col(x, n, len, self.width, self.stride))
    }

    /// Inference forward with merged weights and running statistics.
    pub fn forward_eval(&self, x: &Matrix, n: usize, len: usize) -> Result<Matrix> {
        self.check_input(x, n, len)?;
        let out = self.out_len(len);
        let z = matmul(&self.kernel.eval_weight(), &im2col(x, n, len, self.width, self.stride))?;
        let a = self.bn.forward_eval(&z)?;
        let sk = subsample(x, n, len, self.stride, out);
        let sk = match &self.skip {
            Some(w) => matmul(&w.eval_weight(), &sk)?,
            None => sk,
        };
        a.zip_with(&sk, |v, s| self.leaky(v) + s)
    }

    /// Training forward over the labeled batch and, optionally, an unlabeled
    /// batch that shares the normalization statistics.
    pub fn forward_train(
        &mut self,
        labeled: (&Matrix, usize),
        unlabeled: Option<(&Matrix, usize)>,
        len: usize,
        update_running: bool,
    ) -> Result<(Matrix, Option<Matrix>)> {
        if self.frozen {
            let yl = self.forward_eval(labeled.0, labeled.1, len)?;
            let yu = unlabeled.map(|(x, n)| self.forward_eval(x, n, len)).transpose()?;
            return Ok((yl, yu));
        }
        let out = self.out_len(len);
        let prep = |blk: &Self, x: &Matrix, n: usize| -> Result<(Matrix, Matrix)> {
            blk.check_input(x, n, len)?;
            let cols = im2col(x, n, len, blk.width, blk.stride);
            let z = blk.kernel.apply_cols(&cols)?;
            Ok((cols, z))
        };
        let (cols_l, z_l) = prep(self, labeled.0, labeled.1)?;
        let pu = unlabeled.map(|(x, n)| prep(self, x, n)).transpose()?;
        let (a_l, a_u) = self.bn.forward_train(
            &z_l,
            labeled.1,
            pu.as_ref().zip(unlabeled).map(|((_, z), (_, n))| (z, n)),
            update_running,
        )?;
        let finish = |blk: &Self, x: &Matrix, n: usize, a: &Matrix| -> Result<(Matrix, Matrix)> {
            let sk_in = subsample(x, n, len, blk.stride, out);
            let sk = match &blk.skip {
                Some(w) => w.apply_cols(&sk_in)?,
                None => sk_in.clone(),
            };
            Ok((a.zip_with(&sk, |v, s| blk.leaky(v) + s)?, sk_in))
        };
        let (y_l, sk_l) = finish(self, labeled.0, labeled.1, &a_l)?;
        let mut y_u = None;
        let mut cache_u = None;
        if let (Some((x, n)), Some((cols, _)), Some(a)) = (unlabeled, pu, a_u) {
            let (y, sk) = finish(self, x, n, &a)?;
            y_u = Some(y);
            cache_u = Some(BranchCache {
                n,
                len,
                cols,
                pre: a,
                skip_in: sk,
            });
        }
        self.cache = Some(ConvCache {
            labeled: BranchCache {
                n: labeled.1,
                len,
                cols: cols_l,
                pre: a_l,
                skip_in: sk_l,
            },
            unlabeled: cache_u,
        });
        Ok((y_l, y_u))
    }

    /// Backward through the last training forward. `g_u` may be absent when
    /// the unlabeled output fed nothing downstream; its statistics still
    /// carry gradient. Input gradients are returned only when requested.
    pub fn backward(
        &mut self,
        g_l: &Matrix,
        g_u: Option<&Matrix>,
        want_input: bool,
    ) -> Result<(Option<Matrix>, Option<Matrix>)> {
        if self.frozen {
            return Err(Error::State("backward through a frozen conv block".into()));
        }
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv backward without forward".into()))?;
        let slope = self.negative_slope;
        let act_grad = |g: &Matrix, pre: &Matrix| g.zip_with(pre, |gv, a| if a > 0.0 { gv } else { slope * gv });
        let ga_l = act_grad(g_l, &cache.labeled.pre)?;
        let ga_u = match (g_u, &cache.unlabeled) {
            (Some(g), Some(c)) => Some(act_grad(g, &c.pre)?),
            _ => None,
        };
        let (gz_l, gz_u) = self.bn.backward(&ga_l, ga_u.as_ref())?;

        let mut branch = |gz: &Matrix, g: Option<&Matrix>, c: &BranchCache| -> Result<Option<Matrix>> {
            self.kernel.accumulate_cols(gz, &c.cols)?;
            if let (Some(w), Some(g)) = (self.skip.as_mut(), g) {
                w.accumulate_cols(g, &c.skip_in)?;
            }
            if !want_input {
                return Ok(None);
            }
            let dcols = self.kernel.input_grad_cols(gz)?;
            let mut dx = col2im(&dcols, self.in_ch, c.n, c.len, self.width, self.stride);
            if let Some(g) = g {
                let out = conv_geometry(c.len, self.width, self.stride).0;
                let ds = match &self.skip {
                    Some(w) => w.input_grad_cols(g)?,
                    None => g.clone(),
                };
                scatter_subsample(&mut dx, &ds, c.n, c.len, self.stride, out);
            }
            Ok(Some(dx))
        };
        let dx_l = branch(&gz_l, Some(g_l), &cache.labeled)?;
        let dx_u = match (gz_u, &cache.unlabeled) {
            (Some(gz), Some(c)) => branch(&gz, g_u, c)?,
            _ => None,
        };
        Ok((dx_l, dx_u))
    }

    pub fn weights_mut(&mut self) -> Vec<&mut AdaptedWeight> {
        let mut v = vec![&mut self.kernel];
        if let Some(s) = self.skip.as_mut() {
            v.push(s);
        }
        v
    }

    pub fn zero_grad(&mut self) {
        for w in self.weights_mut() {
            w.zero_grad();
        }
        self.bn.zero_grad();
    }

    pub fn visit_trainable(&mut self, prefix: &str, f: &mut ParamFn<'_>) {
        self.kernel.visit_trainable(&join(prefix, "kernel"), f);
        if let Some(s) = self.skip.as_mut() {
            s.visit_trainable(&join(prefix, "skip"), f);
        }
        self.bn.visit_trainable(&join(prefix, "bn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_gradient, max_rel_error};

    #[test]
    fn geometry_halves_length() {
        assert_eq!(conv_geometry(512, 7, 2), (256, 2));
        assert_eq!(conv_geometry(5, 3, 1), (5, 1));
        assert_eq!(conv_geometry(7, 7, 2), (4, 3));
    }

    #[test]
    fn im2col_matches_direct_convolution() {
        let mut rng = SeededRng::new(5);
        let (c, o, n, len, k, st) = (3, 4, 2, 11, 5, 2);
        let x = Matrix::random_normal(c, n * len, 1.0, &mut rng);
        let w = Matrix::random_normal(o, c * k, 1.0, &mut rng);
        let blk = ConvBlock::new(c, o, k, st, &mut rng).unwrap();
        let y = blk.convolve(&w, &x, n, len).unwrap();
        let (out, pad) = conv_geometry(len, k, st);
        for s in 0..n {
            for oc in 0..o {
                for t in 0..out {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for j in 0..k {
                            let pos = (t * st + j) as isize - pad as isize;
                            if pos >= 0 && (pos as usize) < len {
                                acc += w.get(oc, ic * k + j) * x.get(ic, s * len + pos as usize);
                            }
                        }
                    }
                    assert!((y.get(oc, s * out + t) - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = SeededRng::new(6);
        let (c, len, k) = (3, 9, 7);
        let blk = ConvBlock::new(c, c, k, 1, &mut rng).unwrap();
        let w = Matrix::from_fn(c, c * k, |o, col| if col == o * k + k / 2 { 1.0 } else { 0.0 });
        let x = Matrix::from_fn(c, len, |r, t| 0.5 + (r * len + t) as f64);
        assert_eq!(blk.convolve(&w, &x, 1, len).unwrap(), x);
    }

    #[test]
    fn col2im_is_adjoint() {
        let mut rng = SeededRng::new(7);
        let (c, n, len, k, st) = (2, 3, 10, 7, 2);
        let x = Matrix::random_normal(c, n * len, 1.0, &mut rng);
        let out = conv_geometry(len, k, st).0;
        let g = Matrix::random_normal(c * k, n * out, 1.0, &mut rng);
        let lhs = im2col(&x, n, len, k, st).hadamard(&g).unwrap().sum();
        let rhs = x.hadamard(&col2im(&g, c, n, len, k, st)).unwrap().sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn loss(blk: &ConvBlock, xl: &Matrix, xu: &Matrix, pl: &Matrix, len: usize) -> f64 {
        let mut b = blk.clone();
        for w in b.weights_mut() {
            w.begin_step();
        }
        let (yl, _) = b.forward_train((xl, 2), Some((xu, 3)), len, false).unwrap();
        yl.hadamard(pl).unwrap().sum()
    }

    #[test]
    fn semi_block_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(8);
        let (c, o, len) = (2, 3, 8);
        let mut blk = ConvBlock::new(c, o, 3, 2, &mut rng).unwrap();
        blk.bn.mode = BnMode::TrainSemi;
        blk.bn.shift.value = Matrix::random_normal(o, 1, 0.5, &mut rng);
        let xl = Matrix::random_normal(c, 2 * len, 1.0, &mut rng);
        let xu = Matrix::random_normal(c, 3 * len, 1.0, &mut rng);
        let out = blk.out_len(len);
        let pl = Matrix::random_normal(o, 2 * out, 1.0, &mut rng);

        let mut b = blk.clone();
        for w in b.weights_mut() {
            w.begin_step();
        }
        b.forward_train((&xl, 2), Some((&xu, 3)), len, false).unwrap();
        let (dl, du) = b.backward(&pl, None, true).unwrap();
        for w in b.weights_mut() {
            w.finish_backward().unwrap();
        }

        let fl = finite_diff_gradient(|m| loss(&blk, m, &xu, &pl, len), &xl, 1e-5).unwrap();
        let fu = finite_diff_gradient(|m| loss(&blk, &xl, m, &pl, len), &xu, 1e-5).unwrap();
        assert!(max_rel_error(&dl.unwrap(), &fl, 1e-7) < 1e-6);
        assert!(max_rel_error(&du.unwrap(), &fu, 1e-7) < 1e-6);

        let fk = finite_diff_gradient(
            |m| {
                let mut c2 = blk.clone();
                *c2.kernel.base_mut() = m.clone();
                loss(&c2, &xl, &xu, &pl, len)
            },
            blk.kernel.base(),
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(b.kernel.base_grad().unwrap(), &fk, 1e-7) < 1e-6);

        let skip0 = blk.skip.as_ref().unwrap().base().clone();
        let fs = finite_diff_gradient(
            |m| {
                let mut c2 = blk.clone();
                *c2.skip.as_mut().unwrap().base_mut() = m.clone();
                loss(&c2, &xl, &xu, &pl, len)
            },
            &skip0,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(b.skip.as_ref().unwrap().base_grad().unwrap(), &fs, 1e-7) < 1e-6);
    }
}
