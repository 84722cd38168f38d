//! Operation tape and reverse-mode sweep.

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value per update.
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    Sigmoid(Var),
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Concat(Var, Var),
    SliceChannels { x: Var, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MseLoss(Var, Var),
    Map { x: Var, df: fn(f64) -> f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records executed operations in order; `backward` consumes it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::InvalidInput(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

fn plane_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Rows `(c, ky, kx)` of shifted input planes, zero outside the image.
fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, pad: usize, cols: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            let (y0, y1) = plane_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let (x0, x1) = plane_range(w, dx);
                let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                row.fill(0.0);
                for y in y0..y1 {
                    let src = &x[c * hw + (y as isize + dy) as usize * w..][..w];
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates the rows back onto the input planes.
fn col2im(cols: &[f64], ci: usize, h: usize, w: usize, k: usize, pad: usize, x: &mut [f64]) {
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..k {
            let dy = ky as isize - pad as isize;
            let (y0, y1) = plane_range(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad as isize;
                let (x0, x1) = plane_range(w, dx);
                let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                for y in y0..y1 {
                    let dst = &mut x[c * hw + (y as isize + dy) as usize * w..][..w];
                    let dst = &mut dst[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                    for (a, &v) in dst.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *a += v;
                    }
                }
            }
        }
    }
}

/// `c += op(a) · op(b)` for row-major `op(a)`: m×k and `op(b)`: k×n, where
/// `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides address only the checked m×k, k×n and m×n extents.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1);
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        let value = Tensor { shape, data, requires_grad, grad: None };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].value.requires_grad)
    }

    /// Records a leaf. Its gradient is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.data, t.shape, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.data, t.shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Stride-1 convolution over `[batch, in, h, w]` with kernel
    /// `[out, in, k, k]` and bias `[out]`. The input is zero-padded by
    /// `(k - 1) / 2` before and the remainder after each spatial axis, so the
    /// output keeps the input size.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [nb, ci, h, wd] = self.value(x).dims4()?;
        let [co, wci, k, k2] = self.value(w).dims4()?;
        if wci != ci || k != k2 || k == 0 {
            return Err(shape_err("conv2d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [co] {
            return Err(shape_err("conv2d bias", self.shape(b), &[co]));
        }
        let pad = (k - 1) / 2;
        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let hw = h * wd;
        let kk = ci * k * k;
        let mut cols = vec![0.0; kk * hw];
        let mut out = vec![0.0; nb * co * hw];
        for n in 0..nb {
            im2col(&xd[n * ci * hw..][..ci * hw], ci, h, wd, k, pad, &mut cols);
            let op = &mut out[n * co * hw..][..co * hw];
            for (o, plane) in op.chunks_exact_mut(hw).enumerate() {
                plane.fill(bd[o]);
            }
            gemm(co, kk, hw, wdat, false, &cols, false, op);
        }
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, vec![nb, co, h, wd], Op::Conv2d { x, w, b, pad }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), Op::Sigmoid(x), rg)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 4]> {
        let dims = self.value(x).dims4()?;
        if self.shape(gamma) != [dims[1]] || self.shape(beta) != [dims[1]] {
            return Err(shape_err("batch_norm affine", self.shape(gamma), &[dims[1]]));
        }
        Ok(dims)
    }

    /// Per-channel normalisation with batch statistics (biased variance over
    /// batch and space). Updates the running mean and variance in place.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
    ) -> Result<Var> {
        let [nb, c, h, w] = self.check_bn(x, gamma, beta)?;
        if running_mean.data.len() != c || running_var.data.len() != c {
            return Err(shape_err("batch_norm running stats", &running_mean.shape, &[c]));
        }
        let hw = h * w;
        let count = (nb * hw) as f64;
        let xd = self.data(x);
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let planes = || (0..nb).flat_map(move |n| xd[(n * c + ch) * hw..][..hw].iter());
            let mean = planes().sum::<f64>() / count;
            let var = planes().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            let is = 1.0 / (var + BATCH_NORM_EPS).sqrt();
            inv_std[ch] = is;
            for n in 0..nb {
                let base = (n * c + ch) * hw;
                for (o, &v) in xhat[base..base + hw].iter_mut().zip(&xd[base..base + hw]) {
                    *o = (v - mean) * is;
                }
            }
            running_mean.data[ch] = BATCH_NORM_MOMENTUM * running_mean.data[ch] + (1.0 - BATCH_NORM_MOMENTUM) * mean;
            running_var.data[ch] = BATCH_NORM_MOMENTUM * running_var.data[ch] + (1.0 - BATCH_NORM_MOMENTUM) * var;
        }
        let out = affine_channels(&xhat, c, hw, self.data(gamma), self.data(beta));
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, vec![nb, c, h, w], Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg))
    }

    /// Per-channel normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
    ) -> Result<Var> {
        let [nb, c, h, w] = self.check_bn(x, gamma, beta)?;
        if running_mean.data.len() != c || running_var.data.len() != c {
            return Err(shape_err("batch_norm running stats", &running_mean.shape, &[c]));
        }
        let hw = h * w;
        let mean = running_mean.data.clone();
        let inv_std: Vec<f64> = running_var.data.iter().map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()).collect();
        let xhat: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                (v - mean[ch]) * inv_std[ch]
            })
            .collect();
        let out = affine_channels(&xhat, c, hw, self.data(gamma), self.data(beta));
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, vec![nb, c, h, w], Op::BatchNormEval { x, gamma, beta, mean, inv_std }, rg))
    }

    /// 2×2 max pooling with stride 2; ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [nb, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidInput(format!("max_pool2 needs even spatial dims, got {h}×{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(nb * c * oh * ow);
        let mut argmax = Vec::with_capacity(nb * c * oh * ow);
        for plane in 0..nb * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xo;
                    for cand in [best + 1, best + w, best + w + 1] {
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, vec![nb, c, oh, ow], Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [nb, c, h, w] = self.value(x).dims4()?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = self.data(x);
        let mut out = vec![0.0; nb * c * oh * ow];
        for plane in 0..nb * c {
            for y in 0..oh {
                let src = &xd[plane * h * w + (y / 2) * w..][..w];
                let dst = &mut out[plane * oh * ow + y * ow..][..ow];
                for (xo, d) in dst.iter_mut().enumerate() {
                    *d = src[xo / 2];
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, vec![nb, c, oh, ow], Op::Upsample2(x), rg))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if na != nb || ha != hb || wa != wb {
            return Err(shape_err("concat", self.shape(a), self.shape(b)));
        }
        let hw = ha * wa;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            out.extend_from_slice(&ad[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&bd[n * cb * hw..(n + 1) * cb * hw]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, vec![na, ca + cb, ha, wa], Op::Concat(a, b), rg))
    }

    /// Channels `start..start + count`.
    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let [nb, c, h, w] = self.value(x).dims4()?;
        if count == 0 || start + count > c {
            return Err(Error::InvalidInput(format!("channel slice {start}..{} of {c}", start + count)));
        }
        let hw = h * w;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(nb * count * hw);
        for n in 0..nb {
            out.extend_from_slice(&xd[(n * c + start) * hw..(n * c + start + count) * hw]);
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, vec![nb, count, h, w], Op::SliceChannels { x, start }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, self.shape(a).to_vec(), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        let rg = self.needs(&[x]);
        self.push(out, self.shape(x).to_vec(), op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, f, Op::Map { x, df })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.needs(&[x]);
        self.push(vec![s], Vec::new(), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.needs(&[x]);
        self.push(vec![m], Vec::new(), Op::Mean(x), rg)
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse_loss", self.shape(a), self.shape(b)));
        }
        let n = self.data(a).len() as f64;
        let s = self.data(a).iter().zip(self.data(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![s], Vec::new(), Op::MseLoss(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every leaf that
    /// requires them are summed over all uses.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::InvalidInput(format!("backward needs a scalar loss, got shape {:?}", lv.shape)));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if !nodes[loss.0].value.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.value.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        for (g, n) in grads.iter_mut().zip(&nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn affine_channels(xhat: &[f64], c: usize, hw: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    xhat.iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / hw) % c;
            gamma[ch] * v + beta[ch]
        })
        .collect()
}

/// Mutable gradient buffer of `v`, allocated on first use; `None` when `v`
/// takes no gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].value.requires_grad {
        return None;
    }
    let len = nodes[v.0].value.data.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn elementwise(nodes: &[Node], grads: &mut [Option<Vec<f64>>], x: Var, g: &[f64], d: impl Fn(usize) -> f64) {
    if let Some(gx) = slot(nodes, grads, x) {
        for (i, (a, gi)) in gx.iter_mut().zip(g).enumerate() {
            *a += gi * d(i);
        }
    }
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Conv2d { x, w, b, pad } => {
            let [nb, ci, h, wd] = val(x).dims4().expect("recorded shape");
            let [co, _, k, _] = val(w).dims4().expect("recorded shape");
            let hw = h * wd;
            if let Some(gb) = slot(nodes, grads, b) {
                for n in 0..nb {
                    for o in 0..co {
                        gb[o] += g[(n * co + o) * hw..][..hw].iter().sum::<f64>();
                    }
                }
            }
            let xd = &val(x).data;
            let wdat = &val(w).data;
            let kk = ci * k * k;
            let mut cols = vec![0.0; kk * hw];
            if let Some(gw) = slot(nodes, grads, w) {
                for n in 0..nb {
                    im2col(&xd[n * ci * hw..][..ci * hw], ci, h, wd, k, pad, &mut cols);
                    gemm(co, hw, kk, &g[n * co * hw..][..co * hw], false, &cols, true, gw);
                }
            }
            if let Some(gx) = slot(nodes, grads, x) {
                for n in 0..nb {
                    cols.fill(0.0);
                    gemm(kk, co, hw, wdat, true, &g[n * co * hw..][..co * hw], false, &mut cols);
                    col2im(&cols, ci, h, wd, k, pad, &mut gx[n * ci * hw..][..ci * hw]);
                }
            }
        }
        &Op::Sigmoid(x) => elementwise(nodes, grads, x, g, |i| out.data[i] * (1.0 - out.data[i])),
        Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
            let [nb, c, h, w] = val(*x).dims4().expect("recorded shape");
            let hw = h * w;
            let count = (nb * hw) as f64;
            let gam = &val(*gamma).data;
            let mut sum_g = vec![0.0; c];
            let mut sum_gx = vec![0.0; c];
            for (idx, (&gi, &xh)) in g.iter().zip(xhat).enumerate() {
                let ch = (idx / hw) % c;
                sum_g[ch] += gi;
                sum_gx[ch] += gi * xh;
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                for (idx, a) in gx.iter_mut().enumerate() {
                    let ch = (idx / hw) % c;
                    *a += gam[ch] * inv_std[ch] / count * (count * g[idx] - sum_g[ch] - xhat[idx] * sum_gx[ch]);
                }
            }
        }
        Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
            let [_, c, h, w] = val(*x).dims4().expect("recorded shape");
            let hw = h * w;
            let xd = &val(*x).data;
            let gam = &val(*gamma).data;
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (idx, &gi) in g.iter().enumerate() {
                    let ch = (idx / hw) % c;
                    gg[ch] += gi * (xd[idx] - mean[ch]) * inv_std[ch];
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for (idx, &gi) in g.iter().enumerate() {
                    gb[(idx / hw) % c] += gi;
                }
            }
            elementwise(nodes, grads, *x, g, |idx| {
                let ch = (idx / hw) % c;
                gam[ch] * inv_std[ch]
            });
        }
        Op::MaxPool2 { x, argmax } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    gx[src] += gi;
                }
            }
        }
        &Op::Upsample2(x) => {
            let [_, _, h, w] = val(x).dims4().expect("recorded shape");
            let (oh, ow) = (2 * h, 2 * w);
            if let Some(gx) = slot(nodes, grads, x) {
                for (idx, &gi) in g.iter().enumerate() {
                    let plane = idx / (oh * ow);
                    let y = (idx / ow) % oh;
                    let xo = idx % ow;
                    gx[plane * h * w + (y / 2) * w + xo / 2] += gi;
                }
            }
        }
        &Op::Concat(a, b) => {
            let [nb, ca, h, w] = val(a).dims4().expect("recorded shape");
            let cb = val(b).shape[1];
            let hw = h * w;
            for n in 0..nb {
                let base = n * (ca + cb) * hw;
                if let Some(ga) = slot(nodes, grads, a) {
                    ga[n * ca * hw..(n + 1) * ca * hw]
                        .iter_mut()
                        .zip(&g[base..base + ca * hw])
                        .for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    gb[n * cb * hw..(n + 1) * cb * hw]
                        .iter_mut()
                        .zip(&g[base + ca * hw..base + (ca + cb) * hw])
                        .for_each(|(p, q)| *p += q);
                }
            }
        }
        &Op::SliceChannels { x, start } => {
            let [nb, c, h, w] = val(x).dims4().expect("recorded shape");
            let count = out.shape[1];
            let hw = h * w;
            if let Some(gx) = slot(nodes, grads, x) {
                for n in 0..nb {
                    gx[(n * c + start) * hw..(n * c + start + count) * hw]
                        .iter_mut()
                        .zip(&g[n * count * hw..(n + 1) * count * hw])
                        .for_each(|(p, q)| *p += q);
                }
            }
        }
        &Op::Add(a, b) => {
            elementwise(nodes, grads, a, g, |_| 1.0);
            elementwise(nodes, grads, b, g, |_| 1.0);
        }
        &Op::Sub(a, b) => {
            elementwise(nodes, grads, a, g, |_| 1.0);
            elementwise(nodes, grads, b, g, |_| -1.0);
        }
        &Op::Mul(a, b) => {
            let (ad, bd) = (&val(a).data, &val(b).data);
            elementwise(nodes, grads, a, g, |i| bd[i]);
            elementwise(nodes, grads, b, g, |i| ad[i]);
        }
        &Op::Scale(x, c) => elementwise(nodes, grads, x, g, |_| c),
        &Op::Exp(x) => elementwise(nodes, grads, x, g, |i| out.data[i]),
        &Op::Sin(x) => {
            let xd = &val(x).data;
            elementwise(nodes, grads, x, g, |i| xd[i].cos())
        }
        &Op::Cos(x) => {
            let xd = &val(x).data;
            elementwise(nodes, grads, x, g, |i| -xd[i].sin())
        }
        &Op::Square(x) => {
            let xd = &val(x).data;
            elementwise(nodes, grads, x, g, |i| 2.0 * xd[i])
        }
        &Op::Map { x, df } => {
            let xd = &val(x).data;
            elementwise(nodes, grads, x, g, |i| df(xd[i]))
        }
        &Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        &Op::Mean(x) => {
            let n = val(x).data.len() as f64;
            if let Some(gx) = slot(nodes, grads, x) {
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
        &Op::MseLoss(a, b) => {
            let (ad, bd) = (&val(a).data, &val(b).data);
            let n = ad.len() as f64;
            let scale = 2.0 * g[0] / n;
            if let Some(ga) = slot(nodes, grads, a) {
                ga.iter_mut().enumerate().for_each(|(i, p)| *p += scale * (ad[i] - bd[i]));
            }
            if let Some(gb) = slot(nodes, grads, b) {
                gb.iter_mut().enumerate().for_each(|(i, p)| *p -= scale * (ad[i] - bd[i]));
            }
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mse_against_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]).with_grad());
        let zero = tape.constant(t(&[1], &[0.0]));
        let loss = tape.mse_loss(x, zero).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 9.0);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[0.0]).with_grad());
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data, vec![0.5]);
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[0.25]);
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.square(x);
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn fan_out_gradients_sum() {
        // d/dx (x·x + x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap(), &[4.0, -3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[2.0]).with_grad());
        let c = tape.constant(t(&[1], &[5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let data: Vec<f64> = (0..20).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 4, 5], &data));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).shape, vec![1, 1, 4, 5]);
        assert_eq!(tape.value(y).data, data);
    }

    #[test]
    fn conv_two_by_two_pads_after() {
        // bottom-right taps read zero padding on the last row and column
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, b).unwrap();
        assert_eq!(tape.value(y).data, vec![10.5, 6.5, 7.5, 4.5]);
    }

    #[test]
    fn batch_norm_train_standardises() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|v| ((v * 37 % 11) as f64).sin() * 10.0 + 1.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 4, 4], &data));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let mut rm = Tensor::zeros(&[3]);
        let mut rv = Tensor::full(&[3], 1.0);
        let y = tape.batch_norm_train(x, gamma, beta, &mut rm, &mut rv).unwrap();
        let out = &tape.value(y).data;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| out[(n * 3 + ch) * 16..][..16].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6, "{var}");
        }
        assert!(rm.data.iter().all(|v| *v != 0.0));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 2], &[3.0, 5.0]));
        let gamma = tape.constant(t(&[1], &[2.0]));
        let beta = tape.constant(t(&[1], &[1.0]));
        let mean = t(&[1], &[1.0]);
        let var = t(&[1], &[4.0 - BATCH_NORM_EPS]);
        let y = tape.batch_norm_eval(x, gamma, beta, &mean, &var).unwrap();
        let out = &tape.value(y).data;
        assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn max_pool_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 4], &[1.0, 7.0, 2.0, 2.0, 3.0, 0.0, 2.0, -1.0]).with_grad());
        let y = tape.max_pool2(x).unwrap();
        assert_eq!(tape.value(y).data, vec![7.0, 2.0]);
        let w = tape.constant(t(&[1, 1, 1, 2], &[0.25, 4.0]));
        let p = tape.mul(y, w).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        let gx = g.get(x).unwrap();
        // the tie between the 2.0 entries goes to the first
        assert_eq!(gx, &[0.0, 0.25, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(gx.iter().sum::<f64>(), 4.25);
    }

    #[test]
    fn max_pool_rejects_odd_sizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(tape.max_pool2(x).is_err());
    }

    #[test]
    fn upsample_concat_slice() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let up = tape.upsample2(a).unwrap();
        assert_eq!(tape.value(up).data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        let b = tape.constant(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let cat = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(cat).shape, vec![1, 2, 1, 2]);
        let back = tape.slice_channels(cat, 1, 1).unwrap();
        assert_eq!(tape.value(back).data, vec![3.0, 4.0]);
    }
}
