use super::{c, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Affine { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, factor: Vec<T> },
    AddConst { a: Var },
    Scale { a: Var, s: T },
    Relu { a: Var },
    Gelu { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum { a: Var },
    Mean { a: Var },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    MergeRows { base: Var, parts: Vec<(Var, Vec<usize>)>, replaced: Vec<bool> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward pass. A tape is single-threaded and
/// owns every intermediate; independent tapes share nothing.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// d(loss)/d(var). Leaves the loss does not depend on get zeros.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads[var.0].as_deref()
    }
}

/// View of a shape as `[outer, axis, inner]` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// For each output element of `permute(shape, perm)`, the flat index of the
/// source element.
fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let src_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let Some((&inner, outer_shape)) = out_shape.split_last() else {
        index.push(0);
        return index;
    };
    let inner_stride = src_strides[perm[perm.len() - 1]];
    let mut counter = vec![0usize; outer_shape.len()];
    for _ in 0..numel / inner {
        let base: usize = counter.iter().zip(perm).map(|(&i, &p)| i * src_strides[p]).sum();
        index.extend((0..inner).map(|j| base + j * inner_stride));
        for ax in (0..counter.len()).rev() {
            counter[ax] += 1;
            if counter[ax] < outer_shape[ax] {
                break;
            }
            counter[ax] = 0;
        }
    }
    index
}

// ½(1 + tanh u) = σ(2u), which needs a single `exp`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let inner = c::<T>(GELU_SCALE) * (x + c::<T>(GELU_COEF) * x * x * x);
    T::one() / (T::one() + (-(inner + inner)).exp())
}

fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let d_inner = c::<T>(GELU_SCALE) * (T::one() + c::<T>(3.0 * GELU_COEF) * x * x);
    s + c::<T>(2.0) * x * s * (T::one() - s) * d_inner
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `a`: gradients do not flow back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.data(a), (k as isize, 1), self.data(b), (n as isize, 1), T::zero(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product `[B, m, k] · [B, k, n]`, or `[B, m, k] · [B, n, k]ᵀ`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &db[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// `x · wᵀ + b` over the trailing axis of `x`, with `w: [out, in]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || *sx.last().unwrap() != sw[1] {
            return Err(Error::shape("affine", &sx, &sw));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(Error::shape("affine", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).rows();
        let mut out = vec![T::zero(); rows * out_dim];
        if let Some(b) = b {
            let bias = self.data(b);
            for row in out.chunks_mut(out_dim) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            rows,
            in_dim,
            out_dim,
            self.data(x),
            (in_dim as isize, 1),
            self.data(w),
            (1, in_dim as isize),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Affine { x, w, b }, &inputs))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds `bias: [d]` to every trailing-axis row of `a: [..., d]`. This is
    /// the only broadcasting the engine supports.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.value(a).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(a), self.shape(bias)));
        }
        let mut value = self.value(a).clone();
        let b = self.data(bias).to_vec();
        for row in value.data_mut().chunks_mut(d) {
            add_into(row, &b);
        }
        Ok(self.push(value, Op::AddBias { a, bias }, &[a, bias]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("multiply", a, b)?;
        let value = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Elementwise product with a constant of the same shape (masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(a).numel() {
            return Err(Error::shape("mul_const", self.shape(a), &[factor.len()]));
        }
        let data = self.data(a).iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::MulConst { a, factor }, &[a]))
    }

    /// Adds a constant of the same shape (noise, attention masks).
    pub fn add_const(&mut self, a: Var, offset: &[T]) -> Result<Var> {
        if offset.len() != self.value(a).numel() {
            return Err(Error::shape("add_const", self.shape(a), &[offset.len()]));
        }
        let data = self.data(a).iter().zip(offset).map(|(&x, &o)| x + o).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddConst { a }, &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.map(a, |x| x * s);
        self.push(value, Op::Scale { a, s }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu { a }, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map(a, gelu);
        self.push(value, Op::Gelu { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.tanh());
        self.push(value, Op::Tanh { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.exp());
        self.push(value, Op::Exp { a }, &[a])
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let d = value.last_dim();
        for row in value.data_mut().chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        self.push(value, Op::Softmax { a }, &[a])
    }

    /// Layer normalization over the trailing axis followed by the elementwise
    /// affine `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::shape("layernorm", self.shape(x), self.shape(p)));
            }
        }
        let rows = self.value(x).rows();
        let eps = c::<T>(LAYERNORM_EPS);
        let dn = c::<T>(d as f64);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.data(x).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            xhat.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out = xhat.chunks(d).flat_map(|row| row.iter().zip(g).zip(b).map(|((&h, &g), &b)| h * g + b)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = c::<T>(self.value(a).numel() as f64);
        let total: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(total / n), Op::Mean { a }, &[a])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = c::<T>(self.value(a).numel() as f64);
        let total: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { a, b }, &[a, b]))
    }

    /// Mean softmax cross-entropy over the rows of `logits: [..., C]` whose
    /// target is present. Rows with `None` are masked out; an all-masked
    /// batch has loss 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let classes = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= classes) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = T::zero();
        let mut count = 0usize;
        for (row, target) in self.data(logits).chunks(classes).zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
            if let Some(t) = target {
                total += lse - row[*t];
                count += 1;
            }
        }
        let loss = if count == 0 { T::zero() } else { total / c::<T>(count as f64) };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        ))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for &v in &inputs[1..] {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total_axis: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// `a[..., start..start + len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, extent, inner) = split_axis(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * extent * inner + start * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { a, axis, start }, &[a]))
    }

    /// Rows of `table: [V, d]` selected by `ids`, shaped `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", &shape, &[ids.len()]));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::invalid("embedding", format!("id {bad} out of range for table {shape:?}")));
        }
        if ids.is_empty() {
            return Err(Error::invalid("embedding", "empty id list"));
        }
        let d = shape[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid("permute", format!("{perm:?} for shape {shape:?}")));
        }
        let index = permute_index(&shape, perm);
        let src = self.data(a);
        let out = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(perm.iter().map(|&p| shape[p]).collect::<Vec<_>>(), out)?;
        Ok(self.push(value, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    /// Selects trailing-axis rows of `a` (viewed as `[rows, d]`).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let d = self.value(a).last_dim();
        let n = self.value(a).rows();
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::invalid("gather_rows", format!("rows must be a non-empty subset of 0..{n}")));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { a, rows: rows.to_vec() }, &[a]))
    }

    /// Copy of `base` (viewed as `[rows, d]`) with some rows replaced: each
    /// `(part, rows)` writes row `i` of `part` to row `rows[i]`. A row may be
    /// replaced at most once. The result has the shape of `base`.
    pub fn merge_rows(&mut self, base: Var, parts: Vec<(Var, Vec<usize>)>) -> Result<Var> {
        let d = self.value(base).last_dim();
        let n = self.value(base).rows();
        let mut replaced = vec![false; n];
        let mut out = self.data(base).to_vec();
        let mut inputs = vec![base];
        for (part, rows) in &parts {
            let ps = self.shape(*part);
            if ps.len() != 2 || ps[1] != d || ps[0] != rows.len() {
                return Err(Error::shape("merge_rows", self.shape(base), ps));
            }
            let src = self.data(*part);
            for (i, &r) in rows.iter().enumerate() {
                if r >= n || std::mem::replace(&mut replaced[r], true) {
                    return Err(Error::invalid("merge_rows", format!("row {r} out of range or replaced twice")));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&src[i * d..(i + 1) * d]);
            }
            inputs.push(*part);
        }
        let value = Tensor::new(self.shape(base).to_vec(), out)?;
        Ok(self.push(value, Op::MergeRows { base, parts, replaced }, &inputs))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let numel = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); numel]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(slot) = self.grad_slot(grads, v) {
            f(slot);
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    T::gemm(m, n, k, g, (n as isize, 1), db, (1, n as isize), T::one(), ga)
                });
                self.accumulate(grads, *b, |gb| {
                    T::gemm(k, m, n, da, (1, k as isize), g, (n as isize, 1), T::one(), gb)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..batch {
                        let bs = &db[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ, where B is [k, n] (or stored [n, k]).
                        let strides = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            (n as isize, 1),
                            bs,
                            strides,
                            T::one(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..batch {
                        let as_ = &da[i * m * k..(i + 1) * m * k];
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(Bstored)[n, k] = dCᵀ · A
                            T::gemm(n, m, k, gs, (1, n as isize), as_, (k as isize, 1), T::one(), out);
                        } else {
                            T::gemm(k, m, n, as_, (1, k as isize), gs, (n as isize, 1), T::one(), out);
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (out_dim, in_dim) = (self.shape(*w)[0], self.shape(*w)[1]);
                let rows = self.value(*x).rows();
                let (dx, dw) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *x, |gx| {
                    T::gemm(rows, out_dim, in_dim, g, (out_dim as isize, 1), dw, (in_dim as isize, 1), T::one(), gx)
                });
                self.accumulate(grads, *w, |gw| {
                    T::gemm(out_dim, rows, in_dim, g, (1, out_dim as isize), dx, (in_dim as isize, 1), T::one(), gw)
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in g.chunks(out_dim) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddBias { a, bias } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= *s;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(db) {
                        *d += s * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(da) {
                        *d += s * x;
                    }
                });
            }
            Op::MulConst { a, factor } => self.accumulate(grads, *a, |ga| {
                for ((d, &s), &f) in ga.iter_mut().zip(g).zip(factor) {
                    *d += s * f;
                }
            }),
            Op::AddConst { a } | Op::Reshape { a } => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Scale { a, s } => self.accumulate(grads, *a, |ga| {
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x * *s;
                }
            }),
            Op::Relu { a } => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(da) {
                        if x > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            Op::Gelu { a } => {
                let da = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(da) {
                        *d += s * gelu_grad(x);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &t) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * (T::one() - t * t);
                    }
                });
            }
            Op::Exp { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((d, &s), &e) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * e;
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let dim = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((gr, yr), out) in g.chunks(dim).zip(y.chunks(dim)).zip(ga.chunks_mut(dim)) {
                        let dot: T = gr.iter().zip(yr).map(|(&s, &p)| s * p).sum();
                        for ((d, &s), &p) in out.iter_mut().zip(gr).zip(yr) {
                            *d += p * (s - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = node.value.last_dim();
                let dn = c::<T>(d as f64);
                let gam = self.data(*gamma);
                self.accumulate(grads, *x, |gx| {
                    for (((gr, xr), out), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).zip(rstd) {
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for ((&s, &h), &gm) in gr.iter().zip(xr).zip(gam) {
                            let dxh = s * gm;
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * h;
                        }
                        mean_dxhat /= dn;
                        mean_dxhat_xhat /= dn;
                        for (((o, &s), &h), &gm) in out.iter_mut().zip(gr).zip(xr).zip(gam) {
                            *o += r * (s * gm - mean_dxhat - h * mean_dxhat_xhat);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &s), &h) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += s * h;
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Sum { a } => self.accumulate(grads, *a, |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Mean { a } => {
                let n = c::<T>(self.value(*a).numel() as f64);
                self.accumulate(grads, *a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g[0] / n;
                    }
                });
            }
            Op::Mse { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let scale = c::<T>(2.0) * g[0] / c::<T>(da.len() as f64);
                self.accumulate(grads, *a, |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(da).zip(db) {
                        *d += scale * (x - y);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(da).zip(db) {
                        *d -= scale * (x - y);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if *count == 0 {
                    return;
                }
                let classes = self.value(*logits).last_dim();
                let scale = g[0] / c::<T>(*count as f64);
                self.accumulate(grads, *logits, |gl| {
                    for ((out, p), t) in gl.chunks_mut(classes).zip(probs.chunks(classes)).zip(targets) {
                        let Some(t) = t else { continue };
                        for (j, (o, &pj)) in out.iter_mut().zip(p).enumerate() {
                            let onehot = if j == *t { T::one() } else { T::zero() };
                            *o += scale * (pj - onehot);
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            let src = o * total * inner + offset;
                            add_into(&mut gv[o * len..(o + 1) * len], &g[src..src + len]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, extent, inner) = split_axis(self.shape(*a), *axis);
                let len = node.value.shape()[*axis] * inner;
                self.accumulate(grads, *a, |ga| {
                    for o in 0..outer {
                        let off = o * extent * inner + start * inner;
                        add_into(&mut ga[off..off + len], &g[o * len..(o + 1) * len]);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (row, &i) in g.chunks(d).zip(ids) {
                        add_into(&mut gt[i * d..(i + 1) * d], row);
                    }
                });
            }
            Op::Permute { a, perm } => {
                let index = permute_index(self.shape(*a), perm);
                self.accumulate(grads, *a, |ga| {
                    for (&src, &s) in index.iter().zip(g) {
                        ga[src] += s;
                    }
                });
            }
            Op::GatherRows { a, rows } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for (row, &r) in g.chunks(d).zip(rows) {
                        add_into(&mut ga[r * d..(r + 1) * d], row);
                    }
                });
            }
            Op::MergeRows { base, parts, replaced } => {
                let d = node.value.last_dim();
                self.accumulate(grads, *base, |gb| {
                    for ((out, row), &rep) in gb.chunks_mut(d).zip(g.chunks(d)).zip(replaced) {
                        if !rep {
                            add_into(out, row);
                        }
                    }
                });
                for (part, rows) in parts {
                    self.accumulate(grads, *part, |gp| {
                        for (out, &r) in gp.chunks_mut(d).zip(rows) {
                            add_into(out, &g[r * d..(r + 1) * d]);
                        }
                    });
                }
            }
        }
    }
}
