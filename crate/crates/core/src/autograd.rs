//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Images are `[N, C, H, W]` arrays. Convolution weights use the
//! `[C_out, C_in, k, k]` layout, transposed-convolution weights
//! `[C_in, C_out, k, k]`, biases are 1-D. Scalar losses are 0-d arrays.

use ndarray::{linalg::general_mat_mul, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::error::{Error, Result};
use crate::spectral::spectral_mse_with_grad;

pub type Tensor = ArrayD<f64>;

/// Logits are clamped to this magnitude before entering logs.
pub const LOGIT_CLAMP: f64 = 30.0;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    InstanceNorm { x: Var, xhat: Tensor, inv_std: Vec<f64> },
    LeakyRelu { x: Var, slope: f64 },
    Sigmoid { x: Var },
    Concat { parts: Vec<Var> },
    BandLinear { x: Var, matrix: Vec<Vec<f64>> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    AddScalar { x: Var },
    SpatialMean { x: Var },
    Scale { x: Var, factor: f64 },
    MeanAbs { x: Var },
    MeanSquare { x: Var },
    BceWithLogits { x: Var, target: f64 },
    SpectralMse { x: Var, grad: Tensor },
    WeightedSum { terms: Vec<(Var, f64)> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Tape of values and the operations that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => Err(Error::contract(format!("expected a 4-D tensor, got shape {s:?}"))),
    }
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Unfolds one `[c, h, w]` sample into `[c*k*k, ho*wo]` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize) -> Vec<f64> {
    let cols = ho * wo;
    let mut out = vec![0.0; c * k * k * cols];
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &x[(ch * h + ii as usize) * w..(ch * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatters patch columns back onto a `[c, h, w]` sample.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, out: &mut [f64]) {
    let n = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ch * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            out[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// `c += a · b` (or with transposes) on row-major slices.
fn gemm(a: ArrayView2<f64>, b: ArrayView2<f64>, c: &mut [f64], beta: f64) {
    let (m, n) = (a.nrows(), b.ncols());
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm output shape");
    general_mat_mul(1.0, &a, &b, beta, &mut cv);
}

fn view2(data: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), data).expect("view shape")
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.first().expect("non-empty tensor")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = dims4(self.value(x))?;
        let (cout, wcin, k, k2) = dims4(self.value(w))?;
        if wcin != cin || k != k2 {
            return Err(Error::contract(format!(
                "conv weight expects {wcin} input bands, got {cin}"
            )));
        }
        let (ho, wo) = match (conv_out_len(h, k, stride, pad), conv_out_len(wd, k, stride, pad)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(Error::contract(format!(
                    "input {h}x{wd} is smaller than the {k}x{k} kernel allows"
                )))
            }
        };
        let xs = self.value(x).as_slice().unwrap();
        let ws = self.value(w).as_slice().unwrap();
        let bs = self.value(b).as_slice().unwrap();
        let kk = cin * k * k;
        let mut out = vec![0.0; n * cout * ho * wo];
        for s in 0..n {
            let cols = im2col(&xs[s * cin * h * wd..(s + 1) * cin * h * wd], cin, h, wd, k, stride, pad, ho, wo);
            let dst = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.fill(bs[co]);
            }
            gemm(view2(ws, cout, kk), view2(&cols, kk, ho * wo), dst, 1.0);
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, cout, ho, wo]), out).unwrap();
        Ok(self.push(value, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = dims4(self.value(x))?;
        let (wcin, cout, k, _) = dims4(self.value(w))?;
        if wcin != cin {
            return Err(Error::contract(format!(
                "transposed conv weight expects {wcin} input bands, got {cin}"
            )));
        }
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::contract("transposed conv output would be empty"))?;
        let wo = ((wd - 1) * stride + k)
            .checked_sub(2 * pad)
            .ok_or_else(|| Error::contract("transposed conv output would be empty"))?;
        let xs = self.value(x).as_slice().unwrap();
        let ws = self.value(w).as_slice().unwrap();
        let bs = self.value(b).as_slice().unwrap();
        let kk = cout * k * k;
        let mut out = vec![0.0; n * cout * ho * wo];
        let mut cols = vec![0.0; kk * h * wd];
        for s in 0..n {
            gemm(
                view2(ws, cin, kk).t(),
                view2(&xs[s * cin * h * wd..(s + 1) * cin * h * wd], cin, h * wd),
                &mut cols,
                0.0,
            );
            let dst = &mut out[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            col2im(&cols, cout, ho, wo, k, stride, pad, h, wd, dst);
            for (co, plane) in dst.chunks_mut(ho * wo).enumerate() {
                plane.iter_mut().for_each(|v| *v += bs[co]);
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, cout, ho, wo]), out).unwrap();
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// Per-sample, per-channel normalization over the spatial plane, no affine.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let plane = h * w;
        let xs = self.value(x).as_slice().unwrap();
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (src, dst) in xs.chunks(plane).zip(xhat.chunks_mut(plane)) {
            let mean = src.iter().sum::<f64>() / plane as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
            inv_std.push(inv);
        }
        let xhat = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), xhat).unwrap();
        Ok(self.push(xhat.clone(), Op::InstanceNorm { x, xhat, inv_std }))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid { x })
    }

    /// Concatenation along the band axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = dims4(self.value(parts[0]))?;
        let mut total = 0;
        for &p in parts {
            let (n, c, h, w) = dims4(self.value(p))?;
            if (n, h, w) != (first.0, first.2, first.3) {
                return Err(Error::contract("concat inputs disagree on batch or spatial size"));
            }
            total += c;
        }
        let (n, _, h, w) = first;
        let mut out = Vec::with_capacity(n * total * h * w);
        for s in 0..n {
            for &p in parts {
                let c = self.value(p).shape()[1];
                let src = self.value(p).as_slice().unwrap();
                out.extend_from_slice(&src[s * c * h * w..(s + 1) * c * h * w]);
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, total, h, w]), out).unwrap();
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }))
    }

    /// Per-pixel linear band mixing: `out[o] = Σ_i matrix[o][i] · x[i]`.
    pub fn band_linear(&mut self, x: Var, matrix: Vec<Vec<f64>>) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        if matrix.iter().any(|row| row.len() != c) {
            return Err(Error::contract(format!(
                "band mixing matrix expects {} bands, got {c}",
                matrix.first().map_or(0, Vec::len)
            )));
        }
        let plane = h * w;
        let xs = self.value(x).as_slice().unwrap();
        let co = matrix.len();
        let mut out = vec![0.0; n * co * plane];
        for s in 0..n {
            for (o, row) in matrix.iter().enumerate() {
                let dst = &mut out[(s * co + o) * plane..(s * co + o + 1) * plane];
                for (i, &m) in row.iter().enumerate() {
                    if m == 0.0 {
                        continue;
                    }
                    let src = &xs[(s * c + i) * plane..(s * c + i + 1) * plane];
                    if m == 1.0 {
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                    } else {
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += m * v);
                    }
                }
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, co, h, w]), out).unwrap();
        Ok(self.push(value, Op::BandLinear { x, matrix }))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::contract(format!(
                "shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).mapv(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    /// Global average pooling: `[N, C, H, W]` → `[N, C, 1, 1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let xs = self.value(x).as_slice().unwrap();
        let out: Vec<f64> = xs.chunks(h * w).map(|p| p.iter().sum::<f64>() / (h * w) as f64).collect();
        let value = Tensor::from_shape_vec(IxDyn(&[n, c, 1, 1]), out).unwrap();
        Ok(self.push(value, Op::SpatialMean { x }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).mapv(|v| v * factor);
        self.push(value, Op::Scale { x, factor })
    }

    fn push_scalar(&mut self, v: f64, op: Op) -> Var {
        self.push(Tensor::from_elem(IxDyn(&[]), v), op)
    }

    /// Mean of |x| over every element.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64;
        self.push_scalar(v, Op::MeanAbs { x })
    }

    /// Mean of x² over every element.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        self.push_scalar(v, Op::MeanSquare { x })
    }

    /// Mean binary cross-entropy of clamped logits against a constant
    /// target in {0, 1}.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Var {
        let t = self.value(x);
        let total: f64 = t
            .iter()
            .map(|&z| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                target * softplus(-z) + (1.0 - target) * softplus(z)
            })
            .sum();
        let v = total / t.len() as f64;
        self.push_scalar(v, Op::BceWithLogits { x, target })
    }

    /// Batch-mean spectral MSE between each sample's normalized cumulative
    /// profile and `reference`.
    pub fn spectral_mse(&mut self, x: Var, reference: &[f64]) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x))?;
        let xs = self.value(x).as_slice().unwrap();
        let per = c * h * w;
        let mut total = 0.0;
        let mut grad = vec![0.0; xs.len()];
        for s in 0..n {
            let (loss, g) = spectral_mse_with_grad(&xs[s * per..(s + 1) * per], c, h, w, reference)?;
            total += loss / n as f64;
            for (d, gv) in grad[s * per..(s + 1) * per].iter_mut().zip(g) {
                *d = gv / n as f64;
            }
        }
        let grad = Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), grad).unwrap();
        Ok(self.push_scalar(total, Op::SpectralMse { x, grad }))
    }

    /// Σ weight·term over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(t, wgt)| wgt * self.scalar(t)).sum();
        self.push_scalar(v, Op::WeightedSum { terms: terms.to_vec() })
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_elem(self.nodes[root.0].value.raw_dim(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv2d_backward(*x, *w, &g, *stride, *pad);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::ConvTranspose2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = self.conv_transpose2d_backward(*x, *w, &g, *stride, *pad);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::InstanceNorm { x, xhat, inv_std } => {
                    let shape = xhat.shape();
                    let plane = shape[2] * shape[3];
                    let gs = g.as_slice().unwrap();
                    let xh = xhat.as_slice().unwrap();
                    let mut dx = vec![0.0; gs.len()];
                    for (k, inv) in inv_std.iter().enumerate() {
                        let r = k * plane..(k + 1) * plane;
                        let (gp, xp) = (&gs[r.clone()], &xh[r.clone()]);
                        let sum_g: f64 = gp.iter().sum();
                        let sum_gx: f64 = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                        let m = plane as f64;
                        for ((d, gv), xv) in dx[r].iter_mut().zip(gp).zip(xp) {
                            *d = inv / m * (m * gv - sum_g - xv * sum_gx);
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_shape_vec(xhat.raw_dim(), dx).unwrap());
                }
                Op::LeakyRelu { x, slope } => {
                    let mut dx = g;
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v <= 0.0 {
                            *d *= slope
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    let mut dx = g;
                    dx.zip_mut_with(&node.value, |d, &s| *d *= s * (1.0 - s));
                    acc(&mut grads, *x, dx);
                }
                Op::Concat { parts } => {
                    let shape = g.shape().to_vec();
                    let (n, total, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                    let gs = g.as_slice().unwrap();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        let mut part = Vec::with_capacity(n * c * h * w);
                        for s in 0..n {
                            let start = (s * total + offset) * h * w;
                            part.extend_from_slice(&gs[start..start + c * h * w]);
                        }
                        offset += c;
                        acc(&mut grads, p, Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), part).unwrap());
                    }
                }
                Op::BandLinear { x, matrix } => {
                    let xv = self.value(*x);
                    let (n, c, h, w) = dims4(xv).unwrap();
                    let plane = h * w;
                    let co = matrix.len();
                    let gs = g.as_slice().unwrap();
                    let mut dx = vec![0.0; xv.len()];
                    for s in 0..n {
                        for (o, row) in matrix.iter().enumerate() {
                            let src = &gs[(s * co + o) * plane..(s * co + o + 1) * plane];
                            for (i, &m) in row.iter().enumerate() {
                                if m != 0.0 {
                                    let dst = &mut dx[(s * c + i) * plane..(s * c + i + 1) * plane];
                                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += m * v);
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap());
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::AddScalar { x } => acc(&mut grads, *x, g),
                Op::SpatialMean { x } => {
                    let xv = self.value(*x);
                    let (_, _, h, w) = dims4(xv).unwrap();
                    let gs = g.as_slice().unwrap();
                    let mut dx = vec![0.0; xv.len()];
                    for (plane, gv) in dx.chunks_mut(h * w).zip(gs) {
                        plane.fill(gv / (h * w) as f64);
                    }
                    acc(&mut grads, *x, Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap());
                }
                Op::Scale { x, factor } => acc(&mut grads, *x, g.mapv(|v| v * factor)),
                Op::MeanAbs { x } => {
                    let xv = self.value(*x);
                    let s = g.first().copied().unwrap() / xv.len() as f64;
                    acc(&mut grads, *x, xv.mapv(|v| s * v.signum() * (v != 0.0) as u8 as f64));
                }
                Op::MeanSquare { x } => {
                    let xv = self.value(*x);
                    let s = 2.0 * g.first().copied().unwrap() / xv.len() as f64;
                    acc(&mut grads, *x, xv.mapv(|v| s * v));
                }
                Op::BceWithLogits { x, target } => {
                    let xv = self.value(*x);
                    let s = g.first().copied().unwrap() / xv.len() as f64;
                    let dx = xv.mapv(|z| {
                        if z.abs() > LOGIT_CLAMP {
                            0.0
                        } else {
                            s * (sigmoid(z) - target)
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::SpectralMse { x, grad } => {
                    let s = g.first().copied().unwrap();
                    acc(&mut grads, *x, grad.mapv(|v| s * v));
                }
                Op::WeightedSum { terms } => {
                    let s = g.first().copied().unwrap();
                    for &(t, wgt) in terms {
                        acc(&mut grads, t, Tensor::from_elem(IxDyn(&[]), s * wgt));
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = dims4(xv).unwrap();
        let (cout, _, k, _) = dims4(wv).unwrap();
        let (_, _, ho, wo) = dims4(g).unwrap();
        let kk = cin * k * k;
        let (xs, ws, gs) = (xv.as_slice().unwrap(), wv.as_slice().unwrap(), g.as_slice().unwrap());
        let mut dx = vec![0.0; xs.len()];
        let mut dw = vec![0.0; ws.len()];
        let mut db = vec![0.0; cout];
        let mut dcols = vec![0.0; kk * ho * wo];
        for s in 0..n {
            let xin = &xs[s * cin * h * wd..(s + 1) * cin * h * wd];
            let gout = &gs[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            let cols = im2col(xin, cin, h, wd, k, stride, pad, ho, wo);
            gemm(view2(gout, cout, ho * wo), view2(&cols, kk, ho * wo).t(), &mut dw, 1.0);
            gemm(view2(ws, cout, kk).t(), view2(gout, cout, ho * wo), &mut dcols, 0.0);
            col2im(&dcols, cin, h, wd, k, stride, pad, ho, wo, &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd]);
            for (co, plane) in gout.chunks(ho * wo).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        (
            Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap(),
            Tensor::from_shape_vec(wv.raw_dim(), dw).unwrap(),
            Tensor::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
        )
    }

    fn conv_transpose2d_backward(&self, x: Var, w: Var, g: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor, Tensor) {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, wd) = dims4(xv).unwrap();
        let (_, cout, k, _) = dims4(wv).unwrap();
        let (_, _, ho, wo) = dims4(g).unwrap();
        let kk = cout * k * k;
        let (xs, ws, gs) = (xv.as_slice().unwrap(), wv.as_slice().unwrap(), g.as_slice().unwrap());
        let mut dx = vec![0.0; xs.len()];
        let mut dw = vec![0.0; ws.len()];
        let mut db = vec![0.0; cout];
        for s in 0..n {
            let xin = &xs[s * cin * h * wd..(s + 1) * cin * h * wd];
            let gout = &gs[s * cout * ho * wo..(s + 1) * cout * ho * wo];
            // the output gradient unfolded on the input grid
            let gcols = im2col(gout, cout, ho, wo, k, stride, pad, h, wd);
            gemm(view2(ws, cin, kk), view2(&gcols, kk, h * wd), &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd], 0.0);
            gemm(view2(xin, cin, h * wd), view2(&gcols, kk, h * wd).t(), &mut dw, 1.0);
            for (co, plane) in gout.chunks(ho * wo).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
        (
            Tensor::from_shape_vec(xv.raw_dim(), dx).unwrap(),
            Tensor::from_shape_vec(wv.raw_dim(), dw).unwrap(),
            Tensor::from_shape_vec(IxDyn(&[cout]), db).unwrap(),
        )
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Packs `[C, H, W]` sample buffers into one `[N, C, H, W]` tensor.
pub fn batch_tensor(samples: &[Vec<f64>], c: usize, h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    for s in samples {
        assert_eq!(s.len(), c * h * w, "sample size mismatch");
        data.extend_from_slice(s);
    }
    Tensor::from_shape_vec(IxDyn(&[samples.len(), c, h, w]), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(root)/d(input) for a graph builder.
    fn check<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.leaf(t.clone())).collect();
            let root = build(&mut g, &vars);
            (g.scalar(root), g, vars, root)
        };
        let (_, g, vars, root) = eval(&inputs);
        let grads = g.backward(root);
        let eps = 1e-6;
        let (mut num2, mut diff2, mut ana2) = (0.0f64, 0.0f64, 0.0f64);
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].raw_dim()));
            for j in 0..inputs[i].len() {
                let mut plus = inputs.clone();
                plus[i].as_slice_mut().unwrap()[j] += eps;
                let mut minus = inputs.clone();
                minus[i].as_slice_mut().unwrap()[j] -= eps;
                let num = (eval(&plus).0 - eval(&minus).0) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[j];
                num2 += num * num;
                ana2 += a * a;
                diff2 += (num - a).powi(2);
            }
        }
        let rel = diff2.sqrt() / num2.sqrt().max(ana2.sqrt()).max(1e-12);
        assert!(rel < 1e-6, "relative gradient error {rel}");
    }

    #[test]
    fn conv_output_size() {
        assert_eq!(conv_out_len(64, 4, 2, 1), Some(32));
        assert_eq!(conv_out_len(8, 4, 1, 1), Some(7));
        assert_eq!(conv_out_len(1, 4, 1, 1), None);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x.clone()), g.leaf(w.clone()), g.leaf(b.clone()));
        let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[1, 3, 3, 3]);
        for co in 0..3 {
            for oi in 0..3 {
                for oj in 0..3 {
                    let mut acc = b[[co]];
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ii = (oi * 2 + ki) as isize - 1;
                                let jj = (oj * 2 + kj) as isize - 1;
                                if (0..5).contains(&ii) && (0..5).contains(&jj) {
                                    acc += w[[co, ci, ki, kj]] * x[[0, ci, ii as usize, jj as usize]];
                                }
                            }
                        }
                    }
                    assert!((out[[0, co, oi, oj]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&[2, 2, 6, 6], &mut rng), random(&[3, 2, 4, 4], &mut rng), random(&[3], &mut rng)];
        check(inputs, |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            let y = g.add_scalar(y, 0.3);
            g.mean_square(y)
        });
    }

    #[test]
    fn conv_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&[2, 3, 3, 3], &mut rng), random(&[3, 2, 4, 4], &mut rng), random(&[2], &mut rng)];
        check(inputs, |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], 2, 1).unwrap();
            assert_eq!(g.value(y).shape(), &[2, 2, 6, 6]);
            let y = g.add_scalar(y, -0.2);
            g.mean_square(y)
        });
    }

    #[test]
    fn norm_activation_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&[2, 2, 3, 4], &mut rng), random(&[2, 1, 3, 4], &mut rng)];
        check(inputs, |g, v| {
            let a = g.instance_norm(v[0]).unwrap();
            let a = g.leaky_relu(a, 0.2);
            let b = g.sigmoid(v[1]);
            let pooled = g.spatial_mean(b).unwrap();
            let pooled = g.mean_square(pooled);
            let c = g.concat(&[a, b]).unwrap();
            let m = g.band_linear(c, vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.25]]).unwrap();
            let s = g.scale(m, 0.7);
            let l1 = g.mean_abs(s);
            let l2 = g.mean_square(c);
            g.weighted_sum(&[(l1, 1.5), (l2, 0.5), (pooled, 2.0)])
        });
    }

    #[test]
    fn bce_gradients_and_values() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::zeros(IxDyn(&[1, 1, 2, 2])));
        let l = g.bce_with_logits(z, 1.0);
        assert!((g.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&[1, 1, 3, 3], &mut rng).mapv(|v| 3.0 * v)], |g, v| {
            let a = g.bce_with_logits(v[0], 1.0);
            let b = g.bce_with_logits(v[0], 0.0);
            let d = g.sub(a, b).unwrap();
            g.scale(d, 1.0)
        });
    }
}
