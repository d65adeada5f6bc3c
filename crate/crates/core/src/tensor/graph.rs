use super::element::{gemm, Element, Layout};
use super::{sigmoid, Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_transposed: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: T },
    MulLastBroadcast { x: Var, gate: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<T> },
    Activation { x: Var, kind: Activation },
    Sigmoid { x: Var },
    SwapLast2 { x: Var },
    Conv1d { x: Var, kernel: Var, geom: ConvGeom, cols: Vec<T> },
    Gather { table: Var, indices: Vec<usize>, padding: Option<usize> },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    MaskedMeanPool { x: Var, mask: Vec<bool> },
    SliceRows { x: Var, start: usize },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T> },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    len_in: usize,
    len_out: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::MulLastBroadcast { .. } => "mul_last_broadcast",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Activation { .. } => "activation",
            Op::Sigmoid { .. } => "sigmoid",
            Op::SwapLast2 { .. } => "swap_last2",
            Op::Conv1d { .. } => "conv1d",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::MaskedMeanPool { .. } => "masked_mean_pool",
            Op::SliceRows { .. } => "slice_rows",
            Op::Sum { .. } => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::MulLastBroadcast { x, gate } => vec![*x, *gate],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv1d { x, kernel, .. } => vec![*x, *kernel],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Activation { x, .. }
            | Op::Sigmoid { x }
            | Op::SwapLast2 { x }
            | Op::Reshape { x }
            | Op::MaskedMeanPool { x, .. }
            | Op::SliceRows { x, .. }
            | Op::Sum { x } => vec![*x],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op<T>,
}

/// Tape of values produced by one forward pass.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
    macs: u64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backward_done: false,
            macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by matmul and conv nodes so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient. `None` for values the loss does not reach.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad mirrors value shape"),
            None => Tensor::zeros(shape),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let inputs = op.inputs();
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if cfg!(debug_assertions) && !value.is_finite() {
            let inputs_finite = inputs.iter().all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(!inputs_finite, "{} produced non-finite output from finite inputs", op.name());
        }
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ----------------------------------------------------------------- ops

    /// Matrix product. `a` may carry leading batch axes (`[..., k]`), which
    /// are flattened into rows; `b` must be `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` stored as `[n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_transposed: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let op = if b_transposed { "matmul_nt" } else { "matmul" };
        if sb.len() != 2 {
            return Err(Error::dim(op, format!("rhs must be rank 2, got {sb:?} (lhs {sa:?})")));
        }
        let k = *sa.last().unwrap();
        let (kb, n) = if b_transposed { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::dim(op, format!("inner dimensions differ: lhs {sa:?}, rhs {sb:?}")));
        }
        let m = self.value(a).numel() / k;
        let mut out = vec![T::zero(); m * n];
        let lb = if b_transposed { Layout::Transposed } else { Layout::Normal };
        gemm(m, k, n, self.data(a), Layout::Normal, self.data(b), lb, &mut out, false);
        self.macs += (m * k * n) as u64;
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, b_transposed }))
    }

    /// Adds a `[n]` bias to every row of `x: [..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match last axis of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let b = self.data(bias).to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o = *o + *bb;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.data(b)) {
            *o = f(*o, *y);
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let factor = T::of(factor);
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    /// `x: [..., D]` times `gate: [..., 1]`, broadcasting the gate along the last axis.
    pub fn mul_last_broadcast(&mut self, x: Var, gate: Var) -> Result<Var> {
        let sx = self.shape(x);
        let sg = self.shape(gate);
        if sx.len() != sg.len() || sx[..sx.len() - 1] != sg[..sg.len() - 1] || *sg.last().unwrap() != 1 {
            return Err(Error::dim(
                "mul_last_broadcast",
                format!("gate {sg:?} cannot broadcast over {sx:?}"),
            ));
        }
        let d = self.value(x).last_dim();
        let g = self.data(gate).to_vec();
        let mut out = self.value(x).clone();
        for (row, gv) in out.data_mut().chunks_mut(d).zip(&g) {
            row.iter_mut().for_each(|v| *v = *v * *gv);
        }
        Ok(self.push(out, Op::MulLastBroadcast { x, gate }))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance, then applies the affine `gamma`/`beta` (both `[D]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d < 2 {
            return Err(Error::dim("layer_norm", format!("last axis of {:?} must be >= 2", self.shape(x))));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::dim(
                    "layer_norm",
                    format!("{name} {:?} does not match last axis of {:?}", self.shape(p), self.shape(x)),
                ));
            }
        }
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut out = self.value(x).clone();
        let rows = out.numel() / d;
        let mut stats = Vec::with_capacity(2 * rows);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dt;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / dt;
            let rstd = T::one() / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            stats.push(mean);
            stats.push(rstd);
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = kind.apply(*v));
        self.push(out, Op::Activation { x, kind })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid { x })
    }

    /// Swaps the last two axes: `[..., a, b] -> [..., b, a]`.
    pub fn swap_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("swap_last2", format!("rank of {shape:?} must be >= 2")));
        }
        let r = shape.len();
        let (a, b) = (shape[r - 2], shape[r - 1]);
        let out = transpose_blocks(self.data(x), a, b);
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SwapLast2 { x }))
    }

    /// 1-D convolution along the sequence axis of `x: [L, C_in]` or
    /// `[B, L, C_in]` with a dense `kernel: [K, C_in, C_out]`.
    ///
    /// Output length is `floor((L + 2·padding − K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, len_in, c_in) = match sx.as_slice() {
            [l, c] => (1, *l, *c),
            [b, l, c] => (*b, *l, *c),
            _ => return Err(Error::dim("conv1d", format!("input {sx:?} must be [L, C] or [B, L, C]"))),
        };
        if sk.len() != 3 || sk[1] != c_in {
            return Err(Error::dim("conv1d", format!("kernel {sk:?} incompatible with input {sx:?}")));
        }
        let (k, c_out) = (sk[0], sk[2]);
        if k % 2 == 0 {
            return Err(Error::dim("conv1d", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv1d", "stride must be positive"));
        }
        let len_out = conv_output_len(len_in, k, stride, padding).ok_or(Error::SequenceTooShort {
            len: len_in,
            kernel: k,
            padding,
            stride,
        })?;
        let geom = ConvGeom {
            batch,
            len_in,
            len_out,
            c_in,
            c_out,
            kernel: k,
            stride,
            padding,
        };
        let xd = self.data(x);
        let width = k * c_in;
        let mut cols = vec![T::zero(); batch * len_out * width];
        for bi in 0..batch {
            for j in 0..len_out {
                let row = &mut cols[(bi * len_out + j) * width..][..width];
                for tap in 0..k {
                    let pos = (j * stride + tap) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < len_in {
                        let src = &xd[(bi * len_in + pos as usize) * c_in..][..c_in];
                        row[tap * c_in..][..c_in].copy_from_slice(src);
                    }
                }
            }
        }
        let rows = batch * len_out;
        let mut out = vec![T::zero(); rows * c_out];
        gemm(rows, width, c_out, &cols, Layout::Normal, self.data(kernel), Layout::Normal, &mut out, false);
        self.macs += (rows * width * c_out) as u64;
        let shape = if sx.len() == 2 { vec![len_out, c_out] } else { vec![batch, len_out, c_out] };
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv1d { x, kernel, geom, cols }))
    }

    /// Row lookup: `table: [V, d]` -> `[indices.len(), d]`. Rows equal to
    /// `padding` come out as zeros and receive no gradient.
    pub fn gather(&mut self, table: Var, indices: &[usize], padding: Option<usize>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dim("gather", format!("table {st:?} must be rank 2")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(pos) = indices.iter().position(|&i| i >= v) {
            return Err(Error::dim(
                "gather",
                format!("index {} at position {pos} out of range for table {st:?}", indices[pos]),
            ));
        }
        let td = self.data(table);
        let mut out = vec![T::zero(); indices.len() * d];
        for (row, &i) in out.chunks_mut(d).zip(indices) {
            if Some(i) != padding {
                row.copy_from_slice(&td[i * d..][..d]);
            }
        }
        let value = Tensor::new([indices.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
                padding,
            },
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "needs at least one input"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat", format!("leading axes {:?} vs {:?}", s, self.shape(*first))));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![T::zero(); rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for r in 0..rows {
                out[r * total + offset..][..w].copy_from_slice(&src[r * w..][..w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.data(x).to_vec();
        let value = Tensor::new(shape.to_vec(), data)
            .map_err(|_| Error::dim("reshape", format!("cannot view {:?} as {shape:?}", self.shape(x))))?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Mean over the positions of `x: [B, L, D]` where `mask: [B·L]` is set.
    /// A row with no set positions pools to zeros.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(Error::dim(
                "masked_mean_pool",
                format!("input {s:?} with mask of length {}", mask.len()),
            ));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let m = &mask[bi * l..][..l];
            let count = m.iter().filter(|&&on| on).count();
            if count == 0 {
                log::debug!("masked_mean_pool: row {bi} is fully masked");
                continue;
            }
            let inv = T::one() / T::of(count as f64);
            let acc = &mut out[bi * d..][..d];
            for (t, _) in m.iter().enumerate().filter(|(_, &on)| on) {
                for (a, v) in acc.iter_mut().zip(&xd[(bi * l + t) * d..][..d]) {
                    *a = *a + *v;
                }
            }
            acc.iter_mut().for_each(|a| *a = *a * inv);
        }
        Ok(self.push(
            Tensor::new([b, d], out)?,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Rows `start..` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start >= s[0] {
            return Err(Error::dim("slice_rows", format!("cannot take rows {start}.. of {s:?}")));
        }
        let data = self.data(x)[start * s[1]..].to_vec();
        Ok(self.push(Tensor::new([s[0] - start, s[1]], data)?, Op::SliceRows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().fold(T::zero(), |s, &v| s + v);
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean softmax cross-entropy of `logits: [B, V]` against `targets`
    /// over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?}, {} targets, mask of length {}", targets.len(), mask.len()),
            ));
        }
        let (b, v) = (s[0], s[1]);
        if let Some(&t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v).map(|(t, _)| t) {
            return Err(Error::Contract(format!("target {t} outside vocabulary of {v}")));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::Contract("cross-entropy over an all-masked batch".into()));
        }
        let ld = self.data(logits);
        let mut probs = vec![T::zero(); b * v];
        let mut total = T::zero();
        for r in 0..b {
            if !mask[r] {
                continue;
            }
            let row = &ld[r * v..][..v];
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let p = &mut probs[r * v..][..v];
            let mut z = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                z = z + *pi;
            }
            p.iter_mut().for_each(|pi| *pi = *pi / z);
            total = total + (max + z.ln() - row[targets[r]]);
        }
        let loss = total / T::of(valid as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    // ------------------------------------------------------------ backward

    /// Propagates d(loss)/d(value) to every value the loss depends on.
    ///
    /// A graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State("backward already ran on this graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.numel());
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_transposed } => {
                let sb = self.shape(*b);
                let k = self.value(*a).last_dim();
                let n = node.value.last_dim();
                let m = self.value(*a).numel() / k;
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    // dA = dY · Bᵀ, with B stored [k, n] (or [n, k] when transposed).
                    let lb = if *b_transposed { Layout::Normal } else { Layout::Transposed };
                    gemm(m, n, k, gy, Layout::Normal, self.data(*b), lb, &mut ga, false);
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); sb[0] * sb[1]];
                    if *b_transposed {
                        // dB [n, k] = dYᵀ · A
                        gemm(n, m, k, gy, Layout::Transposed, self.data(*a), Layout::Normal, &mut gb, false);
                    } else {
                        // dB [k, n] = Aᵀ · dY
                        gemm(k, m, n, self.data(*a), Layout::Transposed, gy, Layout::Normal, &mut gb, false);
                    }
                    out.push((*b, gb));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let n = node.value.last_dim();
                    let mut gb = vec![T::zero(); n];
                    for row in gy.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, g)| *a = *a + *g);
                    }
                    out.push((*bias, gb));
                }
                if self.wants(*x) {
                    out.push((*x, gy.to_vec()));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::Sub { a, b } => {
                out.push((*a, gy.to_vec()));
                if self.wants(*b) {
                    out.push((*b, gy.iter().map(|&g| -g).collect()));
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    out.push((*a, gy.iter().zip(self.data(*b)).map(|(&g, &y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.iter().zip(self.data(*a)).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Scale { x, factor } => {
                out.push((*x, gy.iter().map(|&g| g * *factor).collect()));
            }
            Op::MulLastBroadcast { x, gate } => {
                let d = node.value.last_dim();
                let gv = self.data(*gate);
                if self.wants(*x) {
                    let mut gx = gy.to_vec();
                    for (row, g) in gx.chunks_mut(d).zip(gv) {
                        row.iter_mut().for_each(|v| *v = *v * *g);
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gate) {
                    let xv = self.data(*x);
                    let gg = gy
                        .chunks(d)
                        .zip(xv.chunks(d))
                        .map(|(gr, xr)| gr.iter().zip(xr).fold(T::zero(), |s, (&a, &b)| s + a * b))
                        .collect();
                    out.push((*gate, gg));
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let d = node.value.last_dim();
                let dt = T::of(d as f64);
                let xv = self.data(*x);
                let g = self.data(*gamma);
                let mut gx = vec![T::zero(); xv.len()];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (xr, gr)) in xv.chunks(d).zip(gy.chunks(d)).enumerate() {
                    let (mean, rstd) = (stats[2 * r], stats[2 * r + 1]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * g[j];
                        ggamma[j] = ggamma[j] + gr[j] * xhat[j];
                        gbeta[j] = gbeta[j] + gr[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[j];
                    }
                    let gxr = &mut gx[r * d..][..d];
                    for j in 0..d {
                        gxr[j] = rstd * (dxhat[j] - sum_dxhat / dt - xhat[j] * sum_dxhat_xhat / dt);
                    }
                }
                out.push((*x, gx));
                out.push((*gamma, ggamma));
                out.push((*beta, gbeta));
            }
            Op::Activation { x, kind } => {
                let gx = gy
                    .iter()
                    .zip(self.data(*x))
                    .map(|(&g, &v)| g * kind.derivative(v))
                    .collect();
                out.push((*x, gx));
            }
            Op::Sigmoid { x } => {
                let gx = gy
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                out.push((*x, gx));
            }
            Op::SwapLast2 { x } => {
                // Output is [..., b, a]; transposing each block back restores [..., a, b].
                let s = node.value.shape();
                let r = s.len();
                out.push((*x, transpose_blocks(gy, s[r - 2], s[r - 1])));
            }
            Op::Conv1d { x, kernel, geom, cols } => {
                let ConvGeom {
                    batch,
                    len_in,
                    len_out,
                    c_in,
                    c_out,
                    kernel: k,
                    stride,
                    padding,
                } = *geom;
                let width = k * c_in;
                let rows = batch * len_out;
                if self.wants(*kernel) {
                    let mut gk = vec![T::zero(); width * c_out];
                    gemm(width, rows, c_out, cols, Layout::Transposed, gy, Layout::Normal, &mut gk, false);
                    out.push((*kernel, gk));
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); rows * width];
                    gemm(rows, c_out, width, gy, Layout::Normal, self.data(*kernel), Layout::Transposed, &mut gcols, false);
                    let mut gx = vec![T::zero(); batch * len_in * c_in];
                    for bi in 0..batch {
                        for j in 0..len_out {
                            let row = &gcols[(bi * len_out + j) * width..][..width];
                            for tap in 0..k {
                                let pos = (j * stride + tap) as isize - padding as isize;
                                if pos >= 0 && (pos as usize) < len_in {
                                    let dst = &mut gx[(bi * len_in + pos as usize) * c_in..][..c_in];
                                    for (a, g) in dst.iter_mut().zip(&row[tap * c_in..][..c_in]) {
                                        *a = *a + *g;
                                    }
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
            }
            Op::Gather { table, indices, padding } => {
                let d = node.value.last_dim();
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (row, &i) in gy.chunks(d).zip(indices) {
                    if Some(i) == *padding {
                        continue;
                    }
                    for (a, g) in gt[i * d..][..d].iter_mut().zip(row) {
                        *a = *a + *g;
                    }
                }
                out.push((*table, gt));
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.wants(p) {
                        let mut gp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            gp[r * w..][..w].copy_from_slice(&gy[r * total + offset..][..w]);
                        }
                        out.push((p, gp));
                    }
                    offset += w;
                }
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::MaskedMeanPool { x, mask } => {
                let s = self.shape(*x);
                let (b, l, d) = (s[0], s[1], s[2]);
                let mut gx = vec![T::zero(); b * l * d];
                for bi in 0..b {
                    let m = &mask[bi * l..][..l];
                    let count = m.iter().filter(|&&on| on).count();
                    if count == 0 {
                        continue;
                    }
                    let inv = T::one() / T::of(count as f64);
                    let g = &gy[bi * d..][..d];
                    for (t, _) in m.iter().enumerate().filter(|(_, &on)| on) {
                        for (a, gv) in gx[(bi * l + t) * d..][..d].iter_mut().zip(g) {
                            *a = *gv * inv;
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::SliceRows { x, start } => {
                let d = node.value.last_dim();
                let mut gx = vec![T::zero(); self.value(*x).numel()];
                gx[start * d..].copy_from_slice(gy);
                out.push((*x, gx));
            }
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let valid = mask.iter().filter(|&&m| m).count();
                let scale = gy[0] / T::of(valid as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (r, &on) in mask.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    let row = &mut gl[r * v..][..v];
                    for (g, &p) in row.iter_mut().zip(&probs[r * v..][..v]) {
                        *g = p * scale;
                    }
                    row[targets[r]] = row[targets[r]] - scale;
                }
                out.push((*logits, gl));
            }
        }
        out
    }
}

/// Output length of a 1-D convolution, or `None` when it would be < 1.
pub fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Transposes every trailing `[a, b]` block of `data` into `[b, a]`.
fn transpose_blocks<T: Copy>(data: &[T], a: usize, b: usize) -> Vec<T> {
    let block = a * b;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(block) {
        for j in 0..b {
            for i in 0..a {
                out.push(chunk[i * b + j]);
            }
        }
    }
    out
}
