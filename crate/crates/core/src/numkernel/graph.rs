//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] borrows the parameter tensors and records every operation in
//! creation order, which is also a topological order. [`Graph::backward`]
//! walks the tape in reverse exactly once.

use std::sync::Arc;

use rand::Rng;

use super::{KernelError, Real, Result, Tensor};

/// Additive surrogate for negative infinity used on disallowed attention
/// scores. `exp` of it underflows to exactly zero in both precisions.
pub const MASK_NEG: f64 = -1e9;

/// How a boolean permission matrix is applied inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskApplication {
    /// Add a large negative constant to disallowed scores before the
    /// softmax: disallowed weights become zero and rows renormalize.
    #[default]
    PreSoftmax,
    /// Softmax over the full row, then multiply by the mask. Rows are left
    /// unnormalized.
    PostMultiply,
}

/// Handle to a value on the tape (parameter, constant or op result).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Real> {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        m: usize,
        b_batched: bool,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MaskedSoftmax {
        x: Var,
        allow: Arc<[bool]>,
        mode: MaskApplication,
        // Unmasked softmax values for the post-multiply mode.
        soft: Option<Vec<T>>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LayerNormBias {
        inner: Var,
        bias: Var,
    },
    Gelu(Var),
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Single-writer computation graph over borrowed parameters.
pub struct Graph<'p, T: Real> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &'static str, detail: String) -> KernelError {
    KernelError::Shape { op, detail }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite(op))
    }
}

// out[n,m] += a[n,k] * b[k,m]
fn mm_acc<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

// out[n,m] += a[n,k] * b[m,k]^T
fn mm_nt_acc<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

// out[k,m] += a[n,k]^T * b[n,m]
fn mm_tn_acc<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * m..(i + 1) * m];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn param(&self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter index out of range");
        Var(index)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        if v.0 < self.params.len() {
            &self.params[v.0]
        } else {
            &self.nodes[v.0 - self.params.len()].value
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.params.len() + self.nodes.len() - 1)
    }

    fn op_of(&self, v: Var) -> Option<&Op<T>> {
        v.0.checked_sub(self.params.len()).map(|i| &self.nodes[i].op)
    }

    /// Records a constant leaf (input data). Gradients still flow into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite("constant", &value)?;
        Ok(self.push(value, Op::Leaf))
    }

    /// Row lookup: `table[ids[r], :]` for every `r`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(shape_err("gather", format!("table must be rank 2, got {:?}", t.shape())));
        }
        let (rows, width) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(KernelError::OutOfRange {
                    op: "gather",
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), width], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        check_finite("add", &out)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let w = xv.last_dim();
        if bv.len() != w {
            return Err(shape_err("add_bias", format!("bias {:?} vs input {:?}", bv.shape(), xv.shape())));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(w) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        check_finite("add_bias", &out)?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        check_finite("mul", &out)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        check_finite("scale", &out)?;
        Ok(self.push(out, Op::Scale(x, k)))
    }

    /// Matrix product. Supports `[n,k]x[k,m]`, batched `[b,n,k]x[b,k,m]` and
    /// `[b,n,k]x[k,m]` with the right operand shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (batch, n, k, b_batched) = match (x.rank(), y.rank()) {
            (2, 2) => (1, x.shape()[0], x.shape()[1], false),
            (3, 2) => (1, x.shape()[0] * x.shape()[1], x.shape()[2], false),
            (3, 3) => {
                if x.shape()[0] != y.shape()[0] {
                    return Err(shape_err("matmul", format!("batch {:?} vs {:?}", x.shape(), y.shape())));
                }
                (x.shape()[0], x.shape()[1], x.shape()[2], true)
            }
            _ => {
                return Err(shape_err("matmul", format!("unsupported ranks {:?} x {:?}", x.shape(), y.shape())));
            }
        };
        let (yk, m) = if b_batched {
            (y.shape()[1], y.shape()[2])
        } else {
            (y.shape()[0], y.shape()[1])
        };
        if yk != k {
            return Err(shape_err("matmul", format!("inner extents {:?} x {:?}", x.shape(), y.shape())));
        }
        let mut data = vec![T::ZERO; batch * n * m];
        for bi in 0..batch {
            let ys = if b_batched { &y.data()[bi * k * m..(bi + 1) * k * m] } else { y.data() };
            mm_acc(
                &x.data()[bi * n * k..(bi + 1) * n * k],
                ys,
                n,
                k,
                m,
                &mut data[bi * n * m..(bi + 1) * n * m],
            );
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let out = Tensor::new(shape, data)?;
        check_finite("matmul", &out)?;
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                b_batched,
            },
        ))
    }

    /// `a[n,k] x b[m,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[1] {
            return Err(shape_err("matmul_nt", format!("{:?} x {:?}^T", x.shape(), y.shape())));
        }
        let (n, k, m) = (x.shape()[0], x.shape()[1], y.shape()[0]);
        let mut data = vec![T::ZERO; n * m];
        mm_nt_acc(x.data(), y.data(), n, k, m, &mut data);
        let out = Tensor::new(vec![n, m], data)?;
        check_finite("matmul_nt", &out)?;
        Ok(self.push(out, Op::MatMulNt { a, b }))
    }

    /// Columns `start..start + width` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || start + width > xv.shape()[1] {
            return Err(shape_err("slice_cols", format!("{:?}[:, {}..{}]", xv.shape(), start, start + width)));
        }
        let rows = xv.shape()[0];
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let out = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let rows = self.value(*first).shape()[0];
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[0] != rows {
                return Err(shape_err("concat_cols", format!("part {:?} vs {} rows", v.shape(), rows)));
            }
            width += v.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row-wise softmax restricted to the entries where `allow` is true.
    pub fn masked_softmax(&mut self, x: Var, allow: Arc<[bool]>, mode: MaskApplication) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || allow.len() != xv.len() {
            return Err(shape_err(
                "masked_softmax",
                format!("scores {:?} with {} mask entries", xv.shape(), allow.len()),
            ));
        }
        let w = xv.last_dim();
        let neg = T::from_f64(MASK_NEG);
        let mut out = vec![T::ZERO; xv.len()];
        let mut soft = match mode {
            MaskApplication::PreSoftmax => None,
            MaskApplication::PostMultiply => Some(vec![T::ZERO; xv.len()]),
        };
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let allow_row = &allow[r * w..(r + 1) * w];
            if !allow_row.iter().any(|&a| a) {
                return Err(KernelError::DegenerateRow { row: r });
            }
            let o = &mut out[r * w..(r + 1) * w];
            match mode {
                MaskApplication::PreSoftmax => {
                    let mut max = neg + neg;
                    for (j, &s) in row.iter().enumerate() {
                        let z = if allow_row[j] { s } else { s + neg };
                        o[j] = z;
                        max = max.max(z);
                    }
                    let mut total = T::ZERO;
                    for v in o.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in o.iter_mut() {
                        *v = *v / total;
                    }
                }
                MaskApplication::PostMultiply => {
                    let s_row = &mut soft.as_mut().unwrap()[r * w..(r + 1) * w];
                    let max = row.iter().copied().fold(row[0], T::max);
                    let mut total = T::ZERO;
                    for (sv, &s) in s_row.iter_mut().zip(row) {
                        *sv = (s - max).exp();
                        total += *sv;
                    }
                    for j in 0..w {
                        s_row[j] = s_row[j] / total;
                        o[j] = if allow_row[j] { s_row[j] } else { T::ZERO };
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        check_finite("masked_softmax", &out)?;
        Ok(self.push(out, Op::MaskedSoftmax { x, allow, mode, soft }))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance, then
    /// applies `gain` and `bias`. Rows with zero spread normalize to zeros.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || eps.is_nan() {
            return Err(KernelError::Config(format!("layer_norm epsilon must be positive, got {eps}")));
        }
        let xv = self.value(x);
        let w = xv.last_dim();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != w || bv.len() != w {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} vs input {:?}", gv.shape(), bv.shape(), xv.shape()),
            ));
        }
        let eps = T::from_f64(eps);
        let n = T::from_usize(w);
        let rows = xv.rows();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut inv_std = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[r] = is;
            if row.iter().all(|&v| v == row[0]) {
                // zero spread: leave xhat at zero
            } else {
                for (h, &v) in xhat[r * w..(r + 1) * w].iter_mut().zip(row) {
                    *h = (v - mean) * is;
                }
            }
            for j in 0..w {
                out[r * w + j] = xhat[r * w + j] * gv.data()[j];
            }
        }
        let scaled = Tensor::new(xv.shape().to_vec(), out)?;
        let inner = self.push(scaled, Op::LayerNorm { x, gain, xhat, inv_std });
        let mut shifted = self.value(inner).clone();
        let bias_data = self.value(bias).data().to_vec();
        for row in shifted.data_mut().chunks_mut(w) {
            for (o, &b) in row.iter_mut().zip(&bias_data) {
                *o += b;
            }
        }
        check_finite("layer_norm", &shifted)?;
        Ok(self.push(shifted, Op::LayerNormBias { inner, bias }))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out = self
            .value(x)
            .map(|v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()));
        check_finite("gelu", &out)?;
        Ok(self.push(out, Op::Gelu(x)))
    }

    /// Inverted dropout; `rate == 0` records an identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(KernelError::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let xv = self.value(x);
        let scale: Vec<T> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, scale }))
    }

    /// Mean over unmasked positions of `-log softmax(logits[p])[targets[p]]`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() || targets.len() != mask.len() {
            return Err(shape_err(
                "cross_entropy_masked",
                format!("logits {:?}, {} targets, {} mask entries", lv.shape(), targets.len(), mask.len()),
            ));
        }
        let vocab = lv.shape()[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(KernelError::EmptyLoss);
        }
        let mut probs = vec![T::ZERO; lv.len()];
        let mut total = T::ZERO;
        for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= vocab {
                return Err(KernelError::OutOfRange {
                    op: "cross_entropy_masked",
                    index: t,
                    extent: vocab,
                });
            }
            let row = lv.row(p);
            let max = row.iter().copied().fold(row[0], T::max);
            let pr = &mut probs[p * vocab..(p + 1) * vocab];
            let mut z = T::ZERO;
            for (q, &v) in pr.iter_mut().zip(row) {
                *q = (v - max).exp();
                z += *q;
            }
            for q in pr.iter_mut() {
                *q = *q / z;
            }
            total += max + z.ln() - row[t];
        }
        let loss = Tensor::scalar(total / T::from_usize(count));
        check_finite("cross_entropy_masked", &loss)?;
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        check_finite("sum", &out)?;
        Ok(self.push(out, Op::Sum(x)))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(KernelError::NonScalarRoot(rv.shape().to_vec()));
        }
        let total = self.params.len() + self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..total).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), T::ONE));

        for id in (self.params.len()..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id - self.params.len()];
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            num_params: self.params.len(),
            grads,
        })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let width = t.shape()[1];
                let mut dt = Tensor::zeros(t.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (d, &s) in dt.data_mut()[id * width..(id + 1) * width].iter_mut().zip(src) {
                        *d += s;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Add(a, b) => {
                accumulate_ref(grads, *a, g);
                accumulate_ref(grads, *b, g);
            }
            Op::AddBias(x, bias) => {
                accumulate_ref(grads, *x, g);
                let bv = self.value(*bias);
                let w = bv.len();
                let mut db = Tensor::zeros(bv.shape());
                for row in g.data().chunks(w) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = Tensor::new(
                    av.shape().to_vec(),
                    g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect(),
                )
                .expect("shape");
                let db = Tensor::new(
                    bv.shape().to_vec(),
                    g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect(),
                )
                .expect("shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(x, k) => {
                let k = *k;
                accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::MatMul {
                a,
                b,
                batch,
                n,
                k,
                m,
                b_batched,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, n, k, m) = (*batch, *n, *k, *m);
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for bi in 0..batch {
                    let gs = &g.data()[bi * n * m..(bi + 1) * n * m];
                    let as_ = &av.data()[bi * n * k..(bi + 1) * n * k];
                    let (bs, dbs) = if *b_batched {
                        (
                            &bv.data()[bi * k * m..(bi + 1) * k * m],
                            &mut db.data_mut()[bi * k * m..(bi + 1) * k * m],
                        )
                    } else {
                        (bv.data(), db.data_mut())
                    };
                    mm_nt_acc(gs, bs, n, m, k, &mut da.data_mut()[bi * n * k..(bi + 1) * n * k]);
                    mm_tn_acc(as_, gs, n, k, m, dbs);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MatMulNt { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                mm_acc(g.data(), bv.data(), n, m, k, da.data_mut());
                mm_tn_acc(g.data(), av.data(), n, m, k, db.data_mut());
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let width = g.shape()[1];
                let mut dx = Tensor::zeros(xv.shape());
                for r in 0..rows {
                    dx.data_mut()[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (rows, width) = (pv.shape()[0], pv.shape()[1]);
                    let mut dp = Tensor::zeros(pv.shape());
                    for r in 0..rows {
                        dp.data_mut()[r * width..(r + 1) * width]
                            .copy_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    offset += width;
                    accumulate(grads, p, dp);
                }
            }
            Op::MaskedSoftmax { x, allow, mode, soft } => {
                let y = &node.value;
                let w = y.last_dim();
                let mut dx = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let gr = g.row(r);
                    let d = &mut dx.data_mut()[r * w..(r + 1) * w];
                    match mode {
                        MaskApplication::PreSoftmax => {
                            let yr = y.row(r);
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..w {
                                d[j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        MaskApplication::PostMultiply => {
                            let sr = &soft.as_ref().unwrap()[r * w..(r + 1) * w];
                            let ar = &allow[r * w..(r + 1) * w];
                            let ds: Vec<T> = (0..w).map(|j| if ar[j] { gr[j] } else { T::ZERO }).collect();
                            let dot: T = sr.iter().zip(&ds).map(|(&a, &b)| a * b).sum();
                            for j in 0..w {
                                d[j] = sr[j] * (ds[j] - dot);
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gain, xhat, inv_std } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let w = xv.last_dim();
                let n = T::from_usize(w);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = Tensor::zeros(gv.shape());
                for r in 0..xv.rows() {
                    let gr = g.row(r);
                    let hr = &xhat[r * w..(r + 1) * w];
                    let mut sum_d = T::ZERO;
                    let mut sum_dh = T::ZERO;
                    let dh: Vec<T> = (0..w)
                        .map(|j| {
                            dg.data_mut()[j] += gr[j] * hr[j];
                            let v = gr[j] * gv.data()[j];
                            sum_d += v;
                            sum_dh += v * hr[j];
                            v
                        })
                        .collect();
                    let scale = inv_std[r] / n;
                    for j in 0..w {
                        dx.data_mut()[r * w + j] = scale * (n * dh[j] - sum_d - hr[j] * sum_dh);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gain, dg);
            }
            Op::LayerNormBias { inner, bias } => {
                accumulate_ref(grads, *inner, g);
                let w = self.value(*bias).len();
                let mut db = Tensor::zeros(self.value(*bias).shape());
                for row in g.data().chunks(w) {
                    for (d, &v) in db.data_mut().iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *bias, db);
            }
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_a = T::from_f64(3.0 * GELU_A);
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let d = half * (T::ONE + t) + half * v * (T::ONE - t * t) * c * (T::ONE + three_a * v * v);
                        gv * d
                    })
                    .collect();
                accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data).expect("shape"));
            }
            Op::Dropout { x, scale } => {
                let data = g.data().iter().zip(scale).map(|(&v, &s)| v * s).collect();
                accumulate(grads, *x, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let lv = self.value(*logits);
                let vocab = lv.shape()[1];
                let k = g.item() / T::from_usize(*count);
                let mut dl = Tensor::zeros(lv.shape());
                for (p, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let d = &mut dl.data_mut()[p * vocab..(p + 1) * vocab];
                    for (dv, &pv) in d.iter_mut().zip(&probs[p * vocab..(p + 1) * vocab]) {
                        *dv = pv * k;
                    }
                    d[t] -= k;
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
        }
    }

    /// True when `v` was produced by [`Graph::constant`] or is a parameter.
    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.op_of(v), None | Some(Op::Leaf))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_ref<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Result of a backward sweep: gradients for every value on the tape.
pub struct Gradients<T: Real> {
    num_params: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients in parameter order; unused parameters get zeros.
    pub fn into_param_grads(mut self, params: &[Tensor<T>]) -> Vec<Tensor<T>> {
        assert_eq!(params.len(), self.num_params);
        params
            .iter()
            .enumerate()
            .map(|(i, p)| self.grads[i].take().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }
}
