//! Layer kernels with explicit forward caches and backward passes.
//!
//! Activations for a batch of `n` sequences of `t` steps are stacked into
//! `n * t` rows, sample-major. Batch normalization is the only layer that
//! mixes samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::matrix::Matrix;

pub const BN_EPS: f64 = 1e-5;

/// Whether batch normalization uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BatchNorm {
    pub gamma: Matrix,
    pub beta: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Matrix::zeros(1, channels);
        gamma.fill(1.0);
        BatchNorm {
            gamma,
            beta: Matrix::zeros(1, channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.cols()
    }

    pub fn forward(&self, x: &Matrix, stats: &RunningStats, mode: Mode) -> (Matrix, BnCache) {
        let c = self.channels();
        assert_eq!(x.cols(), c, "batch-norm width");
        let m = x.rows() as f64;
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for r in x.iter_rows() {
                    for (a, v) in mean.iter_mut().zip(r) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m);
                let mut var = vec![0.0; c];
                for r in x.iter_rows() {
                    for ((a, v), mu) in var.iter_mut().zip(r).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|a| *a /= m);
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + BN_EPS)).collect();
        let mut xhat = x.clone();
        let mut y = Matrix::zeros(x.rows(), c);
        for i in 0..x.rows() {
            let xr = xhat.row_mut(i);
            for j in 0..c {
                xr[j] = (xr[j] - mean[j]) * inv_std[j];
            }
            let yr = y.row_mut(i);
            for j in 0..c {
                yr[j] = self.gamma.data()[j] * xr[j] + self.beta.data()[j];
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    pub fn backward(&self, dy: &Matrix, cache: &BnCache, grad: &mut BatchNorm) -> Matrix {
        let c = self.channels();
        let rows = dy.rows();
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        let mut dxhat = Matrix::zeros(rows, c);
        for i in 0..rows {
            let (dyr, xr) = (dy.row(i), cache.xhat.row(i));
            let dxr = dxhat.row_mut(i);
            for j in 0..c {
                grad.gamma.data_mut()[j] += dyr[j] * xr[j];
                grad.beta.data_mut()[j] += dyr[j];
                dxr[j] = dyr[j] * self.gamma.data()[j];
                sum_dxhat[j] += dxr[j];
                sum_dxhat_xhat[j] += dxr[j] * xr[j];
            }
        }
        match cache.mode {
            Mode::Eval => {
                for i in 0..rows {
                    for (j, v) in dxhat.row_mut(i).iter_mut().enumerate() {
                        *v *= cache.inv_std[j];
                    }
                }
                dxhat
            }
            Mode::Train => {
                let m = rows as f64;
                let mut dx = Matrix::zeros(rows, c);
                for i in 0..rows {
                    let (dxh, xr) = (dxhat.row(i), cache.xhat.row(i));
                    let out = dx.row_mut(i);
                    for j in 0..c {
                        out[j] = cache.inv_std[j] / m * (m * dxh[j] - sum_dxhat[j] - xr[j] * sum_dxhat_xhat[j]);
                    }
                }
                dx
            }
        }
    }
}

/// 1-D convolution over time with "same" padding. For even kernels the
/// extra zero goes on the right.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Conv1d {
    /// `(kernel * in_channels) x out_channels`; row `k * in + f` is tap `k`, input channel `f`.
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Matrix,
}

impl Conv1d {
    fn pad_left(kernel: usize) -> usize {
        (kernel - 1) / 2
    }

    fn im2col(x: &Matrix, steps: usize, kernel: usize) -> Matrix {
        let f = x.cols();
        let n = x.rows() / steps;
        let pad = Self::pad_left(kernel);
        let mut cols = Matrix::zeros(x.rows(), kernel * f);
        for s in 0..n {
            for t in 0..steps {
                let row = cols.row_mut(s * steps + t);
                for k in 0..kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src >= 0 && (src as usize) < steps {
                        row[k * f..(k + 1) * f].copy_from_slice(x.row(s * steps + src as usize));
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Matrix, steps: usize, kernel: usize) -> (Matrix, ConvCache) {
        assert_eq!(self.weight.rows(), kernel * x.cols(), "conv weight shape");
        let cols = Self::im2col(x, steps, kernel);
        let mut y = cols.matmul(&self.weight);
        y.add_row_broadcast(&self.bias);
        (y, ConvCache { cols })
    }

    pub fn backward(&self, dy: &Matrix, cache: &ConvCache, steps: usize, kernel: usize, grad: &mut Conv1d) -> Matrix {
        cache.cols.accumulate_tn(dy, &mut grad.weight);
        dy.accumulate_col_sums(&mut grad.bias);
        let dcols = dy.matmul_nt(&self.weight);
        let f = self.weight.rows() / kernel;
        let n = dy.rows() / steps;
        let pad = Self::pad_left(kernel);
        let mut dx = Matrix::zeros(dy.rows(), f);
        for s in 0..n {
            for t in 0..steps {
                let drow = dcols.row(s * steps + t);
                for k in 0..kernel {
                    let src = t as isize + k as isize - pad as isize;
                    if src >= 0 && (src as usize) < steps {
                        let out = dx.row_mut(s * steps + src as usize);
                        for (o, v) in out.iter_mut().zip(&drow[k * f..(k + 1) * f]) {
                            *o += v;
                        }
                    }
                }
            }
        }
        dx
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(dy: &Matrix, y: &Matrix) -> Matrix {
    let mut dx = dy.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(y.data()) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Max pooling with window 2 and stride 2 over time. Because every sequence
/// has even length, the pooled pairs are consecutive rows of the stack.
pub fn maxpool2(x: &Matrix) -> (Matrix, Vec<bool>) {
    let c = x.cols();
    let mut y = Matrix::zeros(x.rows() / 2, c);
    // true when the second row of the pair won
    let mut second = vec![false; y.len()];
    for r in 0..y.rows() {
        let (a, b) = (x.row(2 * r), x.row(2 * r + 1));
        let out = y.row_mut(r);
        for j in 0..c {
            if b[j] > a[j] {
                out[j] = b[j];
                second[r * c + j] = true;
            } else {
                out[j] = a[j];
            }
        }
    }
    (y, second)
}

pub fn maxpool2_backward(dy: &Matrix, second: &[bool]) -> Matrix {
    let c = dy.cols();
    let mut dx = Matrix::zeros(dy.rows() * 2, c);
    for r in 0..dy.rows() {
        for j in 0..c {
            let target = if second[r * c + j] { 2 * r + 1 } else { 2 * r };
            dx.set(target, j, dy.get(r, j));
        }
    }
    dx
}

/// One direction of an LSTM. Gate column blocks are ordered input, forget,
/// cell, output.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Lstm {
    pub wx: Matrix,
    pub wh: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
struct LstmStep {
    x: Matrix,
    h_prev: Matrix,
    c_prev: Matrix,
    /// activated gates, `n x 4h`
    gates: Matrix,
    tanh_c: Matrix,
}

#[derive(Debug, Clone)]
pub struct LstmCache {
    steps: Vec<LstmStep>,
    reverse: bool,
}

fn gather_step(x: &Matrix, n: usize, steps: usize, t: usize) -> Matrix {
    let mut out = Matrix::zeros(n, x.cols());
    for s in 0..n {
        out.row_mut(s).copy_from_slice(x.row(s * steps + t));
    }
    out
}

fn scatter_step(out: &mut Matrix, src: &Matrix, n: usize, steps: usize, t: usize) {
    for s in 0..n {
        out.row_mut(s * steps + t).copy_from_slice(src.row(s));
    }
}

impl Lstm {
    pub fn hidden(&self) -> usize {
        self.wh.rows()
    }

    /// Runs over `steps` timesteps (backwards in time when `reverse`) and
    /// returns the hidden state at every step, aligned with the input rows.
    pub fn forward(&self, x: &Matrix, steps: usize, reverse: bool) -> (Matrix, LstmCache) {
        let h = self.hidden();
        let n = x.rows() / steps;
        let mut out = Matrix::zeros(x.rows(), h);
        let mut h_prev = Matrix::zeros(n, h);
        let mut c_prev = Matrix::zeros(n, h);
        let mut cache = LstmCache {
            steps: Vec::with_capacity(steps),
            reverse,
        };
        for i in 0..steps {
            let t = if reverse { steps - 1 - i } else { i };
            let xt = gather_step(x, n, steps, t);
            let mut gates = xt.matmul(&self.wx);
            gates.add_assign(&h_prev.matmul(&self.wh));
            gates.add_row_broadcast(&self.bias);
            let mut c = Matrix::zeros(n, h);
            let mut tanh_c = Matrix::zeros(n, h);
            let mut h_new = Matrix::zeros(n, h);
            for s in 0..n {
                let g = gates.row_mut(s);
                for j in 0..h {
                    g[j] = math::sigmoid(g[j]);
                    g[h + j] = math::sigmoid(g[h + j]);
                    g[2 * h + j] = math::tanh(g[2 * h + j]);
                    g[3 * h + j] = math::sigmoid(g[3 * h + j]);
                }
                for j in 0..h {
                    let cv = g[h + j] * c_prev.get(s, j) + g[j] * g[2 * h + j];
                    let tc = math::tanh(cv);
                    c.set(s, j, cv);
                    tanh_c.set(s, j, tc);
                    h_new.set(s, j, g[3 * h + j] * tc);
                }
            }
            scatter_step(&mut out, &h_new, n, steps, t);
            cache.steps.push(LstmStep {
                x: xt,
                h_prev,
                c_prev,
                gates,
                tanh_c,
            });
            h_prev = h_new;
            c_prev = c;
        }
        (out, cache)
    }

    pub fn backward(&self, dout: &Matrix, cache: &LstmCache, steps: usize, grad: &mut Lstm) -> Matrix {
        let h = self.hidden();
        let n = dout.rows() / steps;
        let mut dx = Matrix::zeros(dout.rows(), self.wx.rows());
        let mut dh_next = Matrix::zeros(n, h);
        let mut dc_next = Matrix::zeros(n, h);
        for i in (0..steps).rev() {
            let t = if cache.reverse { steps - 1 - i } else { i };
            let st = &cache.steps[i];
            let mut dh = gather_step(dout, n, steps, t);
            dh.add_assign(&dh_next);
            let mut dpre = Matrix::zeros(n, 4 * h);
            let mut dc_prev = Matrix::zeros(n, h);
            for s in 0..n {
                let g = st.gates.row(s);
                let d = dpre.row_mut(s);
                for j in 0..h {
                    let (ig, fg, cg, og) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
                    let tc = st.tanh_c.get(s, j);
                    let dhv = dh.get(s, j);
                    let dc = dc_next.get(s, j) + dhv * og * (1.0 - tc * tc);
                    d[j] = dc * cg * ig * (1.0 - ig);
                    d[h + j] = dc * st.c_prev.get(s, j) * fg * (1.0 - fg);
                    d[2 * h + j] = dc * ig * (1.0 - cg * cg);
                    d[3 * h + j] = dhv * tc * og * (1.0 - og);
                    dc_prev.set(s, j, dc * fg);
                }
            }
            st.x.accumulate_tn(&dpre, &mut grad.wx);
            st.h_prev.accumulate_tn(&dpre, &mut grad.wh);
            dpre.accumulate_col_sums(&mut grad.bias);
            scatter_step(&mut dx, &dpre.matmul_nt(&self.wx), n, steps, t);
            dh_next = dpre.matmul_nt(&self.wh);
            dc_next = dc_prev;
        }
        dx
    }
}

/// Plain multi-head self-attention: per-head scaled dot-product attention
/// over the timesteps of each sample, heads concatenated and projected.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    concat: Matrix,
    /// softmax weights, indexed `sample * heads + head`, each `steps x steps`
    pub probs: Vec<Matrix>,
    heads: usize,
}

impl AttentionLayer {
    pub fn width(&self) -> usize {
        self.wq.rows()
    }

    pub fn forward(&self, x: &Matrix, steps: usize, heads: usize) -> Result<(Matrix, AttentionCache)> {
        let d = self.width();
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if x.cols() != d || steps == 0 || x.rows() % steps != 0 {
            return Err(Error::Shape(format!(
                "attention input {}x{} does not fit width {d} and {steps} steps",
                x.rows(),
                x.cols()
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let n = x.rows() / steps;
        let q = x.matmul(&self.wq);
        let k = x.matmul(&self.wk);
        let v = x.matmul(&self.wv);
        let mut concat = Matrix::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(n * heads);
        for s in 0..n {
            for hd in 0..heads {
                let c0 = hd * dh;
                let mut p = Matrix::zeros(steps, steps);
                for i in 0..steps {
                    let qi = &q.row(s * steps + i)[c0..c0 + dh];
                    let row = p.row_mut(i);
                    for j in 0..steps {
                        row[j] = math::dot(qi, &k.row(s * steps + j)[c0..c0 + dh]) * scale;
                    }
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0.0;
                    for w in row.iter_mut() {
                        *w = math::exp(*w - max);
                        sum += *w;
                    }
                    row.iter_mut().for_each(|w| *w /= sum);
                }
                for i in 0..steps {
                    let out = &mut concat.row_mut(s * steps + i)[c0..c0 + dh];
                    for j in 0..steps {
                        let w = p.get(i, j);
                        for (o, vv) in out.iter_mut().zip(&v.row(s * steps + j)[c0..c0 + dh]) {
                            *o += w * vv;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let y = concat.matmul(&self.wo);
        Ok((
            y,
            AttentionCache {
                x: x.clone(),
                q,
                k,
                v,
                concat,
                probs,
                heads,
            },
        ))
    }

    pub fn backward(&self, dy: &Matrix, cache: &AttentionCache, steps: usize, grad: &mut AttentionLayer) -> Matrix {
        let d = self.width();
        let heads = cache.heads;
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let n = dy.rows() / steps;
        cache.concat.accumulate_tn(dy, &mut grad.wo);
        let dconcat = dy.matmul_nt(&self.wo);
        let mut dq = Matrix::zeros(dy.rows(), d);
        let mut dk = Matrix::zeros(dy.rows(), d);
        let mut dv = Matrix::zeros(dy.rows(), d);
        let mut dp = Matrix::zeros(steps, steps);
        for s in 0..n {
            for hd in 0..heads {
                let c0 = hd * dh;
                let p = &cache.probs[s * heads + hd];
                // dP = dO vᵀ, dv = Pᵀ dO
                for i in 0..steps {
                    let doi = &dconcat.row(s * steps + i)[c0..c0 + dh];
                    for j in 0..steps {
                        let vj = &cache.v.row(s * steps + j)[c0..c0 + dh];
                        dp.set(i, j, math::dot(doi, vj));
                        let w = p.get(i, j);
                        let dvj = &mut dv.row_mut(s * steps + j)[c0..c0 + dh];
                        for (a, b) in dvj.iter_mut().zip(doi) {
                            *a += w * b;
                        }
                    }
                }
                // softmax backward, then through the scaled scores
                for i in 0..steps {
                    let pr = p.row(i);
                    let inner: f64 = (0..steps).map(|j| pr[j] * dp.get(i, j)).sum();
                    for j in 0..steps {
                        let ds = pr[j] * (dp.get(i, j) - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.row(s * steps + j)[c0..c0 + dh];
                        let qi = &cache.q.row(s * steps + i)[c0..c0 + dh];
                        for (a, b) in dq.row_mut(s * steps + i)[c0..c0 + dh].iter_mut().zip(kj) {
                            *a += ds * b;
                        }
                        for (a, b) in dk.row_mut(s * steps + j)[c0..c0 + dh].iter_mut().zip(qi) {
                            *a += ds * b;
                        }
                    }
                }
            }
        }
        cache.x.accumulate_tn(&dq, &mut grad.wq);
        cache.x.accumulate_tn(&dk, &mut grad.wk);
        cache.x.accumulate_tn(&dv, &mut grad.wv);
        let mut dx = dq.matmul_nt(&self.wq);
        dx.add_assign(&dk.matmul_nt(&self.wk));
        dx.add_assign(&dv.matmul_nt(&self.wv));
        dx
    }
}

/// Fully connected layer followed by L2 normalization of each output row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Embedding {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    input: Matrix,
    output: Matrix,
    norms: Vec<f64>,
}

impl Embedding {
    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, EmbeddingCache)> {
        if input.cols() != self.weight.rows() {
            return Err(Error::Shape(format!(
                "embedding expects width {}, got {}",
                self.weight.rows(),
                input.cols()
            )));
        }
        let mut z = input.matmul(&self.weight);
        z.add_row_broadcast(&self.bias);
        let mut norms = Vec::with_capacity(z.rows());
        for i in 0..z.rows() {
            let nrm = math::norm(z.row(i));
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::Normalization);
            }
            z.row_mut(i).iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        Ok((
            z.clone(),
            EmbeddingCache {
                input: input.clone(),
                output: z,
                norms,
            },
        ))
    }

    pub fn backward(&self, dg: &Matrix, cache: &EmbeddingCache, grad: &mut Embedding) -> Matrix {
        let mut dz = Matrix::zeros(dg.rows(), dg.cols());
        for i in 0..dg.rows() {
            let g = cache.output.row(i);
            let d = dg.row(i);
            let proj = math::dot(g, d);
            for (j, out) in dz.row_mut(i).iter_mut().enumerate() {
                *out = (d[j] - g[j] * proj) / cache.norms[i];
            }
        }
        cache.input.accumulate_tn(&dz, &mut grad.weight);
        dz.accumulate_col_sums(&mut grad.bias);
        dz.matmul_nt(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_routes_gradient_to_winner() {
        let x = Matrix::from_vec(4, 1, vec![1.0, 3.0, 5.0, 2.0]).unwrap();
        let (y, sel) = maxpool2(&x);
        assert_eq!(y.data(), &[3.0, 5.0]);
        let dx = maxpool2_backward(&Matrix::from_vec(2, 1, vec![1.0, 2.0]).unwrap(), &sel);
        assert_eq!(dx.data(), &[0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn same_padding_keeps_length() {
        let conv = Conv1d {
            weight: Matrix::zeros(2, 3),
            bias: Matrix::zeros(1, 3),
        };
        let x = Matrix::zeros(6, 1);
        let (y, _) = conv.forward(&x, 3, 2);
        assert_eq!(y.shape(), (6, 3));
    }

    #[test]
    fn attention_rejects_indivisible_width() {
        let layer = AttentionLayer {
            wq: Matrix::zeros(6, 6),
            wk: Matrix::zeros(6, 6),
            wv: Matrix::zeros(6, 6),
            wo: Matrix::zeros(6, 6),
        };
        assert!(matches!(
            layer.forward(&Matrix::zeros(2, 6), 2, 4),
            Err(Error::Config(_))
        ));
    }
}
