//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes are created in execution order, so walking the
//! tape backwards from the root is a valid reverse topological order.
//! A graph supports exactly one backward pass; calling it again is a
//! contract error rather than a silent accumulation.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, split_axis};
use super::{NumericsError, Real, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One sequence inside a row-stacked batch, as seen by [`Graph::attention`].
/// Rows `start..start+len` belong to the sequence; only the first `valid`
/// rows are attendable keys (the rest are padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulScalar(Var, Var),
    AddConst(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        base: Var,
        rows: Vec<usize>,
        src: Var,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    L2Normalize {
        input: Var,
        axis: usize,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Log(Var),
    Exp(Var),
    Attention {
        qkv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf, or `None` when it did not require gradients or
    /// did not influence the root.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of a leaf, materializing zeros where nothing flowed.
    pub fn get_or_zeros(&self, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn matrix(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn check_axis(&self, var: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(var).len() {
            return Err(shape_err(
                op,
                format!("axis {axis} out of range for shape {:?}", self.shape(var)),
            ));
        }
        Ok(())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("({m}×{k}) · ({k2}×{n})")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_nt")?;
        let (n, k2) = self.matrix(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("({m}×{k}) · ({n}×{k2})ᵀ")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "transpose")?;
        let x = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    /// Adds a row vector `b` (length = columns of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.matrix(a, "add_row")?;
        if self.shape(b) != [c] {
            return Err(shape_err(
                "add_row",
                format!("row vector {:?} against {r}×{c}", self.shape(b)),
            ));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(value, Op::AddRow(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let value = self.map(a, |x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Multiplication by a single-element variable broadcast over `a`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(shape_err(
                "mul_scalar",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let c = self.value(s).item();
        let value = self.map(a, |x| x * c);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    /// Adds a constant tensor of identical shape (no gradient to it).
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err(
                "add_const",
                format!("{:?} vs {:?}", self.shape(a), c.shape()),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::AddConst(a), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(a, axis, "slice")?;
        let shape = self.shape(a).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} outside extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let begin = (o * full + start) * inner;
            out.extend_from_slice(&src[begin..begin + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(value, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    /// Also serves as a general row gather.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.matrix(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(shape_err("gather_rows", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(shape_err(
                "gather_rows",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(&[ids.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Copy of `base` with row `rows[i]` overwritten by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, rows: &[usize], src: Var) -> Result<Var> {
        let (r, c) = self.matrix(base, "replace_rows")?;
        let (sr, sc) = self.matrix(src, "replace_rows")?;
        if sc != c || sr != rows.len() {
            return Err(shape_err(
                "replace_rows",
                format!("{sr}×{sc} source for {} rows of width {c}", rows.len()),
            ));
        }
        let mut seen = vec![false; r];
        for &row in rows {
            if row >= r || std::mem::replace(&mut seen[row], true) {
                return Err(shape_err(
                    "replace_rows",
                    format!("row {row} out of range or repeated"),
                ));
            }
        }
        let mut out = self.value(base).data().to_vec();
        let s = self.value(src);
        for (i, &row) in rows.iter().enumerate() {
            out[row * c..(row + 1) * c].copy_from_slice(s.row(i));
        }
        let value = Tensor::new(&[r, c], out)?;
        Ok(self.push(
            value,
            Op::ReplaceRows {
                base,
                rows: rows.to_vec(),
                src,
            },
            &[base, src],
        ))
    }

    fn softmax_values(&self, a: Var, axis: usize, log: bool) -> Tensor<T> {
        let shape = self.shape(a);
        let (outer, len, inner) = split_axis(shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                if log {
                    let lse = sum.ln();
                    for j in 0..len {
                        out[idx(j)] = x[idx(j)] - max - lse;
                    }
                } else {
                    for j in 0..len {
                        out[idx(j)] = out[idx(j)] / sum;
                    }
                }
            }
        }
        Tensor::new(shape, out).expect("shape preserved")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let value = self.softmax_values(a, axis, false);
        Ok(self.push(value, Op::Softmax { input: a, axis }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let value = self.softmax_values(a, axis, true);
        Ok(self.push(value, Op::LogSoftmax { input: a, axis }, &[a]))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} for width {c}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64(LN_EPS);
        let n = T::from_f64(c as f64);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let value = self.map(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Scales each slice along `axis` to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "l2_normalize")?;
        let shape = self.shape(a).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut norms = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mut ss = T::zero();
                for j in 0..len {
                    ss += x[idx(j)] * x[idx(j)];
                }
                let norm = ss.sqrt();
                if !(norm > T::zero()) || !norm.is_finite() {
                    return Err(NumericsError::Degenerate {
                        op: "l2_normalize",
                        detail: format!("slice {} has norm {norm}", o * inner + i),
                    });
                }
                norms[o * inner + i] = norm;
                for j in 0..len {
                    out[idx(j)] = x[idx(j)] / norm;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::L2Normalize {
                input: a,
                axis,
                norms,
            },
            &[a],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.ln());
        self.push(value, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.exp());
        self.push(value, Op::Exp(a), &[a])
    }

    /// Multi-head scaled dot-product attention over row-stacked sequences.
    ///
    /// `qkv` is `rows × 3d` holding queries, keys and values side by side.
    /// Attention never crosses segment boundaries, and keys at positions
    /// `>= valid` inside a segment are masked out.
    pub fn attention(&mut self, qkv: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (rows, width) = self.matrix(qkv, "attention")?;
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(shape_err(
                "attention",
                format!("width {width} not divisible into 3×{heads} heads"),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.valid == 0 || s.valid > s.len {
                return Err(shape_err(
                    "attention",
                    format!("segment {s:?} does not tile the rows contiguously"),
                ));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(shape_err(
                "attention",
                format!("segments cover {covered} of {rows} rows"),
            ));
        }
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let x = self.value(qkv).data();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len * s.valid).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for s in segments {
            for h in 0..heads {
                for i in 0..s.len {
                    let qi = (s.start + i) * width + h * dh;
                    let q = &x[qi..qi + dh];
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in 0..s.valid {
                        let kj = (s.start + j) * width + d + h * dh;
                        let v = dot(q, &x[kj..kj + dh]) * scale;
                        max = max.max(v);
                        scores.push(v);
                    }
                    let mut sum = T::zero();
                    for v in scores.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    let o = &mut out[(s.start + i) * d + h * dh..(s.start + i) * d + (h + 1) * dh];
                    for (j, v) in scores.iter().enumerate() {
                        let p = *v / sum;
                        probs.push(p);
                        let vj = (s.start + j) * width + 2 * d + h * dh;
                        axpy(p, &x[vj..vj + dh], o);
                    }
                }
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Reverse pass from a scalar root. Consumes the graph.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if !self.value(root).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let seed = Tensor::full(self.shape(root), T::one());
        self.backward_from(root, &seed)
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_from(&mut self, root: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(NumericsError::Contract(
                "backward called twice on the same graph".into(),
            ));
        }
        if seed.shape() != self.shape(root) {
            return Err(shape_err(
                "backward",
                format!("seed {:?} for root {:?}", seed.shape(), self.shape(root)),
            ));
        }
        self.consumed = true;
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(seed.data().to_vec());
        }
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            grads: leaf_grads,
            shapes,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        // Lazily-allocated gradient slot of an input, or None if it is frozen.
        fn slot<'a, T: Real>(
            nodes: &[Node<T>],
            grads: &'a mut [Option<Vec<T>>],
            v: Var,
        ) -> Option<&'a mut [T]> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let len = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
        }
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().1;
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nt(m, n, k, g, val(*b), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(k, m, n, val(*a), g, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().0;
                if let Some(ga) = slot(nodes, grads, *a) {
                    gemm_nn(m, n, k, g, val(*b), ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gemm_tn(n, m, k, g, val(*a), gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[a.0].value.dims2();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(T::one(), g, gb);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(T::one(), g, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    axpy(-T::one(), g, gb);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(T::one(), g, ga);
                }
                let c = nodes[b.0].value.numel();
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(*c, g, ga);
                }
            }
            Op::MulScalar(a, s) => {
                let c = nodes[s.0].value.item();
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(c, g, ga);
                }
                if let Some(gs) = slot(nodes, grads, *s) {
                    gs[0] += dot(g, val(*a));
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    axpy(T::one(), g, ga);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = nodes[v.0].value.shape()[*axis];
                    if let Some(gv) = slot(nodes, grads, *v) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            axpy(T::one(), &g[src..src + len * inner], &mut gv[dst..dst + len * inner]);
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = split_axis(nodes[input.0].value.shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gi) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        axpy(T::one(), &g[src..src + len * inner], &mut gi[dst..dst + len * inner]);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = nodes[table.0].value.dims2().1;
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(T::one(), &g[i * c..(i + 1) * c], &mut gt[id * c..(id + 1) * c]);
                    }
                }
            }
            Op::ReplaceRows { base, rows, src } => {
                let c = node.value.dims2().1;
                if let Some(gb) = slot(nodes, grads, *base) {
                    // Overwritten rows of the base receive no gradient.
                    let mut replaced = vec![false; node.value.dims2().0];
                    for &r in rows {
                        replaced[r] = true;
                    }
                    for (r, skip) in replaced.into_iter().enumerate() {
                        if !skip {
                            axpy(T::one(), &g[r * c..(r + 1) * c], &mut gb[r * c..(r + 1) * c]);
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(T::one(), &g[r * c..(r + 1) * c], &mut gs[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..len {
                                gi[idx(j)] += y[idx(j)] * (g[idx(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += g[idx(j)];
                            }
                            for j in 0..len {
                                gi[idx(j)] += g[idx(j)] - y[idx(j)].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = node.value.dims2();
                let gw = val(*gain);
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for row in g.chunks_exact(c) {
                        axpy(T::one(), row, gb);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let n = T::from_f64(c as f64);
                    for i in 0..r {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let gh = g[i * c + j] * gw[j];
                            m1 += gh;
                            m2 += gh * xhat[i * c + j];
                        }
                        m1 = m1 / n;
                        m2 = m2 / n;
                        for j in 0..c {
                            let gh = g[i * c + j] * gw[j];
                            gx[i * c + j] += inv_std[i] * (gh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let c = T::from_f64(GELU_C);
                    let k = T::from_f64(GELU_A);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let d = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *o += gi * d;
                    }
                }
            }
            Op::L2Normalize { input, axis, norms } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(gi) = slot(nodes, grads, *input) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * len + j) * inner + i;
                            let mut s = T::zero();
                            for j in 0..len {
                                s += y[idx(j)] * g[idx(j)];
                            }
                            let norm = norms[o * inner + i];
                            for j in 0..len {
                                gi[idx(j)] += (g[idx(j)] - y[idx(j)] * s) / norm;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                let n = T::from_f64(nodes[a.0].value.numel() as f64);
                if let Some(ga) = slot(nodes, grads, *a) {
                    let v = g[0] / n;
                    for o in ga.iter_mut() {
                        *o += v;
                    }
                }
            }
            Op::Log(a) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gi / x;
                    }
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &gi), &yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi;
                    }
                }
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let width = nodes[qkv.0].value.dims2().1;
                let d = width / 3;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let x = val(*qkv);
                let Some(gx) = slot(nodes, grads, *qkv) else { return };
                let mut offset = 0;
                let mut dp = Vec::new();
                for s in segments {
                    for h in 0..*heads {
                        for i in 0..s.len {
                            let p = &probs[offset..offset + s.valid];
                            offset += s.valid;
                            let go = &g[(s.start + i) * d + h * dh..(s.start + i) * d + (h + 1) * dh];
                            dp.clear();
                            let mut acc = T::zero();
                            for (j, &pj) in p.iter().enumerate() {
                                let vj = (s.start + j) * width + 2 * d + h * dh;
                                let v = dot(go, &x[vj..vj + dh]);
                                acc += pj * v;
                                dp.push(v);
                            }
                            let qi = (s.start + i) * width + h * dh;
                            for (j, &pj) in p.iter().enumerate() {
                                let ds = pj * (dp[j] - acc) * scale;
                                let kj = (s.start + j) * width + d + h * dh;
                                let vj = kj + d;
                                // dV_j += p_ij · dO_i
                                axpy(pj, go, &mut gx[vj..vj + dh]);
                                if ds != T::zero() {
                                    // dQ_i += ds · K_j ; dK_j += ds · Q_i
                                    for t in 0..dh {
                                        let kv = x[kj + t];
                                        let qv = x[qi + t];
                                        gx[qi + t] += ds * kv;
                                        gx[kj + t] += ds * qv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
