use super::ops::{self, LayerNormOut};
use super::Tensor;
use crate::ctc::{self, LabelSeq};
use crate::{Error, Result};

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
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Unfold { x: Var, kernel: usize, stride: usize },
    Sum(Var),
    Ctc { x: Var, grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the index order is a valid
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of the last backward passes, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = ops::check_matmul(self.value(a), self.value(b))?;
        let data = ops::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Dimension {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = vx.last_dim();
        if vx.rank() != 2 || vb.shape() != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let mut data = vx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(vb.data()).for_each(|(o, b)| *o += b);
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let vx = self.value(x);
        let out = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v * s).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = ops::gelu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = ops::softmax(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let out = ops::log_softmax(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = ops::check_layer_norm(vx, vg, vb, eps)?;
        let LayerNormOut { y, xhat, rstd } = ops::layer_norm_raw(vx.data(), d, vg.data(), vb.data(), eps);
        let out = Tensor::new(vx.shape().to_vec(), y)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, op, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = match vx.shape() {
            [m, n] if start + len <= *n && len > 0 => (*m, *n),
            s => {
                return Err(Error::Precondition(format!(
                    "slice_cols {start}..{} out of range for {s:?}",
                    start + len
                )))
            }
        };
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let n = match vx.shape() {
            [m, n] if start + len <= *m && len > 0 => *n,
            s => {
                return Err(Error::Precondition(format!(
                    "slice_rows {start}..{} out of range for {s:?}",
                    start + len
                )))
            }
        };
        let out = Tensor::new(vec![len, n], vx.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.value(p).shape()[0],
            None => return Err(Error::Precondition("concat_cols of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.value(p).shape() {
                [r, c] if *r == m => widths.push(*c),
                s => {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        left: vec![m],
                        right: s.to_vec(),
                    })
                }
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Sliding windows over the rows of a `T×C` matrix: output row `o` is
    /// rows `o*stride .. o*stride + kernel` flattened, `⌊(T−kernel)/stride⌋+1` rows.
    pub fn unfold(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let vx = self.value(x);
        let (t, c) = match vx.shape() {
            [t, c] => (*t, *c),
            s => return Err(Error::Precondition(format!("unfold expects a matrix, got {s:?}"))),
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::Precondition("unfold kernel and stride must be >= 1".into()));
        }
        if t < kernel {
            return Err(Error::SequenceTooShort { frames: t });
        }
        let (data, out_t) = ops::unfold_raw(vx.data(), c, kernel, stride);
        let out = Tensor::new(vec![out_t, kernel * c], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unfold { x, kernel, stride }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// CTC negative log-likelihood of `target` under per-frame log-probabilities `x` (`T×(V+1)`).
    pub fn ctc_loss(&mut self, x: Var, target: &LabelSeq) -> Result<Var> {
        let vx = self.value(x);
        let out = ctc::ctc_forward_backward(vx, target)?;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(out.loss), Op::Ctc { x, grad: out.grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        g[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = g[i].take() else { continue };
            self.propagate(i, &dy, &mut g);
            g[i] = Some(dy);
        }

        for (i, gi) in g.into_iter().enumerate() {
            if let Some(gi) = gi {
                if !self.nodes[i].requires_grad {
                    continue;
                }
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, dy: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let n = nodes[v.0].value.numel();
                    let $buf: &mut Vec<f64> = g[v.0].get_or_insert_with(|| vec![0.0; n]);
                    $body
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                with_grad!(*a, |da| { ops::matmul_grad_a(dy, vb.data(), da, m, k, n) });
                with_grad!(*b, |db| { ops::matmul_grad_b(va.data(), dy, db, m, k, n) });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |d| { d.iter_mut().zip(dy).for_each(|(o, x)| *o += x) });
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                with_grad!(*a, |d| {
                    for j in 0..d.len() {
                        d[j] += dy[j] * vb[j];
                    }
                });
                with_grad!(*b, |d| {
                    for j in 0..d.len() {
                        d[j] += dy[j] * va[j];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                with_grad!(*x, |d| { d.iter_mut().zip(dy).for_each(|(o, v)| *o += v) });
                with_grad!(*bias, |d| {
                    let n = d.len();
                    for row in dy.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |d| { d.iter_mut().zip(dy).for_each(|(o, v)| *o += v * s) });
            }
            Op::Transpose(x) => {
                let shape = nodes[x.0].value.shape();
                let (m, n) = (shape[0], shape[1]);
                with_grad!(*x, |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += dy[c * m + r];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                with_grad!(*x, |d| {
                    for j in 0..d.len() {
                        d[j] += dy[j] * ops::gelu_derivative(vx[j]);
                    }
                });
            }
            Op::Relu(x) => {
                let vx = nodes[x.0].value.data();
                with_grad!(*x, |d| {
                    for j in 0..d.len() {
                        if vx[j] > 0.0 {
                            d[j] += dy[j];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                with_grad!(*x, |d| {
                    for r in 0..y.len() / n {
                        let (yr, dyr) = (&y[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[r * n + j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                with_grad!(*x, |d| {
                    for r in 0..y.len() / n {
                        let (yr, dyr) = (&y[r * n..(r + 1) * n], &dy[r * n..(r + 1) * n]);
                        let total: f64 = dyr.iter().sum();
                        for j in 0..n {
                            d[r * n + j] += dyr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = nodes[gamma.0].value.data();
                let dim = gv.len();
                let rows = xhat.len() / dim;
                with_grad!(*x, |d| {
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..rows {
                        let base = r * dim;
                        for j in 0..dim {
                            dxhat[j] = dy[base + j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dx = (0..dim).map(|j| dxhat[j] * xhat[base + j]).sum::<f64>() / dim as f64;
                        for j in 0..dim {
                            d[base + j] += rstd[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                });
                with_grad!(*gamma, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += dy[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                });
                with_grad!(*beta, |d| {
                    for r in 0..rows {
                        for j in 0..dim {
                            d[j] += dy[r * dim + j];
                        }
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let n = nodes[x.0].value.last_dim();
                let len = node.value.last_dim();
                with_grad!(*x, |d| {
                    for (r, row) in dy.chunks_exact(len).enumerate() {
                        let dst = &mut d[r * n + start..r * n + start + len];
                        dst.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = node.value.last_dim();
                with_grad!(*x, |d| {
                    let dst = &mut d[start * n..start * n + dy.len()];
                    dst.iter_mut().zip(dy).for_each(|(o, v)| *o += v);
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.last_dim();
                    with_grad!(p, |d| {
                        for (r, row) in dy.chunks_exact(n).enumerate() {
                            let src = &row[offset..offset + w];
                            d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    });
                    offset += w;
                }
            }
            Op::Unfold { x, kernel, stride } => {
                let c = nodes[x.0].value.last_dim();
                let width = kernel * c;
                with_grad!(*x, |d| {
                    for (o, row) in dy.chunks_exact(width).enumerate() {
                        let dst = &mut d[o * stride * c..(o * stride + kernel) * c];
                        dst.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |d| { d.iter_mut().for_each(|o| *o += dy[0]) });
            }
            Op::Ctc { x, grad } => {
                with_grad!(*x, |d| {
                    d.iter_mut().zip(grad).for_each(|(o, v)| *o += dy[0] * v)
                });
            }
        }
    }
}
