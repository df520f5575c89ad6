//! Reverse-mode differentiation over a linear operation record.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the record from the loss back to the first node, so adjoints are
//! replayed in exact reverse order of recording. Nodes whose inputs carry no
//! gradient are recorded for their values but skipped on the way back.

use crate::error::{Error, Result};

use super::tensor::{Tensor, matmul_nt_acc, matmul_tn_acc};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Tanh(Var),
    Silu(Var),
    Abs(Var),
    RotatePairs { x: Var, cos_sin: Vec<(f64, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros when `v` was not on the path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    /// Stacks `n` copies of a single-row tensor. This is the only way a row
    /// vector meets a matrix; there is no implicit broadcasting.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        if r != 1 {
            return Err(Error::dim("repeat_rows", format!("expected one row, got {r}")));
        }
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let v = Tensor::new(&[n, c], data)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::RepeatRows(a), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.data()[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(&[r, len], data)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.dims2()?;
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {r}")));
        }
        let v = Tensor::new(&[len, c], src.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceRows(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row count {r} vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(&[rows, total], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("col count {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(&[rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(a);
        self.push(v, Op::Mean(a), ng)
    }

    /// Row-wise softmax restricted to `visible` entries (row-major, same
    /// shape as `logits`). Masked entries come out exactly zero.
    pub fn masked_softmax(&mut self, logits: Var, visible: &[bool]) -> Result<Var> {
        let v = masked_softmax_value(self.value(logits), visible)?;
        let ng = self.ng(logits);
        Ok(self.push(v, Op::MaskedSoftmax(logits), ng))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src.data()[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * is;
            }
        }
        let v = Tensor::new(&[r, c], xhat.clone())?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::LayerNorm { x, xhat, inv_std }, ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * sigmoid(x));
        let ng = self.ng(a);
        self.push(v, Op::Silu(a), ng)
    }

    /// `|x|`, with derivative `sign(x)` and 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(v, Op::Abs(a), ng)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Rotates channel pairs `(2c, 2c+1)` of every row. `angles` holds one
    /// angle per row and pair, row-major.
    pub fn rotate_pairs(&mut self, x: Var, angles: &[f64]) -> Result<Var> {
        let src = self.value(x);
        let (r, c) = src.dims2()?;
        if c % 2 != 0 || angles.len() != r * c / 2 {
            return Err(Error::dim(
                "rotate_pairs",
                format!("{r}x{c} with {} angles", angles.len()),
            ));
        }
        let cos_sin: Vec<(f64, f64)> = angles.iter().map(|a| (a.cos(), a.sin())).collect();
        let out = rotate(src.data(), &cos_sin, r, c, false);
        let v = Tensor::new(&[r, c], out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::RotatePairs { x, cos_sin }, ng))
    }

    /// Reverse sweep from a scalar `loss`, seeded with 1.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Rank { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| axpy(d, g, 1.0));
                self.acc(grads, *b, |d| axpy(d, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, |d| axpy(d, g, *s)),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| axpy(d, g, 1.0)),
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().expect("rank 2");
                let n = val(*b).dims2().expect("rank 2").1;
                let (va, vb) = (val(*a).data(), val(*b).data());
                self.acc(grads, *a, |d| matmul_nt_acc(g, vb, d, m, n, k));
                self.acc(grads, *b, |d| matmul_tn_acc(va, g, d, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = val(*a).dims2().expect("rank 2");
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let c = val(*a).len();
                self.acc(grads, *a, |d| {
                    for row in g.chunks(c) {
                        axpy(d, row, 1.0);
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).dims2().expect("rank 2");
                let len = node.value.cols();
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        axpy(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len], 1.0);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let c = val(*a).cols();
                let n = g.len();
                self.acc(grads, *a, |d| axpy(&mut d[start * c..start * c + n], g, 1.0));
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut off = 0;
                for p in parts {
                    let w = val(*p).cols();
                    self.acc(grads, *p, |d| {
                        for i in 0..rows {
                            axpy(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = val(*p).len();
                    self.acc(grads, *p, |d| axpy(d, &g[off..off + n], 1.0));
                    off += n;
                }
            }
            Op::Sum(a) => self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                self.acc(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MaskedSoftmax(a) => {
                let (r, c) = node.value.dims2().expect("rank 2");
                let y = node.value.data();
                self.acc(grads, *a, |d| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let (r, c) = val(*x).dims2().expect("rank 2");
                self.acc(grads, *x, |d| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xr = &xhat[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[i * c + j] += inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Silu(a) => {
                let x = val(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = sigmoid(x[i]);
                        d[i] += g[i] * s * (1.0 + x[i] * (1.0 - s));
                    }
                });
            }
            Op::Abs(a) => {
                let x = val(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        let s = if x[i] > 0.0 {
                            1.0
                        } else if x[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += g[i] * s;
                    }
                });
            }
            Op::RotatePairs { x, cos_sin } => {
                let (r, c) = val(*x).dims2().expect("rank 2");
                let back = rotate(g, cos_sin, r, c, true);
                self.acc(grads, *x, |d| axpy(d, &back, 1.0));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.needs_grad {
            return;
        }
        let buf = grads[target.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rotate(x: &[f64], cos_sin: &[(f64, f64)], r: usize, c: usize, inverse: bool) -> Vec<f64> {
    let half = c / 2;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for p in 0..half {
            let (co, mut si) = cos_sin[i * half + p];
            if inverse {
                si = -si;
            }
            let (a, b) = (x[i * c + 2 * p], x[i * c + 2 * p + 1]);
            out[i * c + 2 * p] = a * co - b * si;
            out[i * c + 2 * p + 1] = a * si + b * co;
        }
    }
    out
}

/// Value-only masked softmax shared by the tape op and inference paths.
pub fn masked_softmax_value(logits: &Tensor, visible: &[bool]) -> Result<Tensor> {
    let (r, c) = logits.dims2()?;
    if visible.len() != r * c {
        return Err(Error::dim(
            "masked_softmax",
            format!("mask has {} entries for {r}x{c} logits", visible.len()),
        ));
    }
    let x = logits.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let vis = &visible[i * c..(i + 1) * c];
        let row = &x[i * c..(i + 1) * c];
        let max = row
            .iter()
            .zip(vis)
            .filter(|(_, v)| **v)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateMask { row: i });
        }
        let mut total = 0.0;
        for j in 0..c {
            if vis[j] {
                let e = (row[j] - max).exp();
                out[i * c + j] = e;
                total += e;
            }
        }
        for j in 0..c {
            out[i * c + j] /= total;
        }
    }
    Tensor::new(&[r, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::diffcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0, 3.0]), true);
        let sq = t.square(x).unwrap();
        let f = t.sum(sq);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]), true);
        let c = t.constant(Tensor::scalar(3.0));
        let f = t.scale(c, 2.0);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::Rank { .. })));
    }

    #[test]
    fn softmax_examples() {
        let s = masked_softmax_value(&Tensor::row(&[0.0, 0.0]), &[true, true]).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = masked_softmax_value(&Tensor::row(&[2f64.ln(), 0.0]), &[true, true]).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let s = masked_softmax_value(&Tensor::row(&[5.0, 100.0]), &[true, false]).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let e = masked_softmax_value(&Tensor::zeros(&[2, 2]), &[true, false, false, false]);
        assert!(matches!(e, Err(Error::DegenerateMask { row: 1 })));
    }

    #[test]
    fn matmul_softmax_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let mask: Vec<bool> = (0..15).map(|i| i % 4 != 3).collect();
        let err = grad_check(
            |t, p| {
                let m = t.matmul(p[0], p[1])?;
                let s = t.masked_softmax(m, &mask)?;
                let wv = t.constant(w.clone());
                let prod = t.mul(s, wv)?;
                Ok(t.sum(prod))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error {err}");
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let r = Tensor::randn(&[1, 4], 1.0, &mut rng);
        let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64).collect();
        let err = grad_check(
            |t, p| {
                let x = p[0];
                let rr = t.repeat_rows(p[1], 3)?;
                let y = t.add(x, rr)?;
                let y = t.layer_norm(y, 1e-5)?;
                let y = t.rotate_pairs(y, &angles)?;
                let a = t.slice_cols(y, 0, 2)?;
                let b = t.slice_cols(y, 2, 2)?;
                let c = t.concat_cols(&[b, a])?;
                let d = t.tanh(c);
                let e = t.silu(d);
                let tr = t.transpose(e)?;
                let top = t.slice_rows(tr, 0, 2)?;
                let bottom = t.slice_rows(tr, 2, 2)?;
                let st = t.concat_rows(&[bottom, top])?;
                let f = t.sub(st, tr)?;
                let f = t.scale(f, 0.7);
                let f = t.add_scalar(f, 0.1);
                let f = t.reshape(f, &[3, 4])?;
                let sq = t.mul(f, x)?;
                let m = t.mean(sq);
                let s = t.sum(e);
                let s = t.scale(s, 0.01);
                Ok(t.add(m, s)?)
            },
            &[x, r],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "relative error {err}");
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let (alpha, beta) = (0.7, -1.3);
        let build = |t: &mut Tape, x: Var, which: u8| -> Var {
            let f = {
                let s = t.tanh(x);
                t.sum(s)
            };
            let g = {
                let sq = t.square(x).unwrap();
                t.mean(sq)
            };
            match which {
                0 => f,
                1 => g,
                _ => {
                    let a = t.scale(f, alpha);
                    let b = t.scale(g, beta);
                    t.add(a, b).unwrap()
                }
            }
        };
        let grad = |which| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone(), true);
            let l = build(&mut t, x, which);
            t.backward(l).unwrap().wrt(x)
        };
        let (gf, gg, gc) = (grad(0), grad(1), grad(2));
        for i in 0..gc.len() {
            let expect = alpha * gf.data()[i] + beta * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            rows in prop::collection::vec(prop::collection::vec((-50.0f64..50.0, any::<bool>()), 1..10), 1..6)
        ) {
            let c = rows.iter().map(Vec::len).min().unwrap();
            let mut logits = Vec::new();
            let mut vis = Vec::new();
            for r in &rows {
                for (j, &(l, v)) in r[..c].iter().enumerate() {
                    logits.push(l);
                    vis.push(v || j == 0);
                }
            }
            let t = Tensor::new(&[rows.len(), c], logits).unwrap();
            let p = masked_softmax_value(&t, &vis).unwrap();
            for i in 0..rows.len() {
                let mut s = 0.0;
                for j in 0..c {
                    if vis[i * c + j] {
                        s += p.at(i, j);
                    } else {
                        prop_assert_eq!(p.at(i, j), 0.0);
                    }
                }
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }
}
