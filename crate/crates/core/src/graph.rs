//! Tape-style compute graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Only 2-D
//! tensors flow through the row/column ops; bias-add and scalar scale are the
//! only broadcasts.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::scalar::Scalar;
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor, TensorError, TensorResult};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

/// Handle to a node in one specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddBias(usize, usize),
    Scale(usize, F),
    Gelu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<F>,
        inv_std: Vec<F>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    MeanRows(usize),
    MeanAll(usize),
    SumAll(usize),
    SmoothL1 {
        x: usize,
        target: Vec<F>,
    },
    Hinge(usize),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanRows(_) => "mean_rows",
            Op::MeanAll(_) => "mean_all",
            Op::SumAll(_) => "sum_all",
            Op::SmoothL1 { .. } => "smooth_l1",
            Op::Hinge(_) => "hinge",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// A single forward/backward pass. Not shared across threads; build one graph
/// per pass.
pub struct Graph<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    backward_done: bool,
    check_finite: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the per-op NaN/Inf scan (on by default in debug builds).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    /// Gradient accumulated by [`Graph::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        assert_eq!(v.graph, self.id, "variable from another graph");
        let g = self.grads.get(v.idx)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.idx].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn idx(&self, v: Var) -> TensorResult<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> TensorResult<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn dims2(&self, i: usize, op: &'static str) -> TensorResult<(usize, usize)> {
        self.nodes[i].value.matrix_dims(op)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ia, "matmul")?;
        let (k2, n) = self.dims2(ib, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", ia, ib));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(ia, "matmul_nt")?;
        let (n, k2) = self.dims2(ib, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", ia, ib));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt_acc(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMulNT(ia, ib), &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia, "transpose")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push(value, Op::Transpose(ia), &[ia])
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let data = self.zip(ia, ib, |x, y| x + y);
        let value = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        self.push(value, Op::Add(ia, ib), &[ia, ib])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let (ia, ib) = self.same_shape("sub", a, b)?;
        let data = self.zip(ia, ib, |x, y| x - y);
        let value = Tensor::new(self.nodes[ia].value.shape().to_vec(), data)?;
        self.push(value, Op::Sub(ia, ib), &[ia, ib])
    }

    /// `x + bias` where `bias` has the last extent of `x` and is repeated over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let d = self.nodes[ix].value.last_dim();
        if self.nodes[ib].value.shape() != [d] {
            return Err(self.mismatch("add_bias", ix, ib));
        }
        let b = self.nodes[ib].value.data();
        let data: Vec<F> = self.nodes[ix]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| v + b[k % d])
            .collect();
        let value = Tensor::new(self.nodes[ix].value.shape().to_vec(), data)?;
        self.push(value, Op::AddBias(ix, ib), &[ix, ib])
    }

    pub fn scale(&mut self, a: Var, c: F) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|v| v * c);
        self.push(value, Op::Scale(ia, c), &[ia])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(gelu);
        self.push(value, Op::Gelu(ia), &[ia])
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia, "softmax_rows")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![r, c], out)?;
        self.push(value, Op::SoftmaxRows(ia), &[ia])
    }

    /// Normalizes over the last extent, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> TensorResult<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let d = self.nodes[ix].value.last_dim();
        if self.nodes[ig].value.shape() != [d] {
            return Err(self.mismatch("layer_norm", ix, ig));
        }
        if self.nodes[ib].value.shape() != [d] {
            return Err(self.mismatch("layer_norm", ix, ib));
        }
        let src = self.nodes[ix].value.data();
        let rows = src.len() / d;
        let eps = F::from_real(LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_real(d as f64);
        let gain_v = self.nodes[ig].value.data();
        let bias_v = self.nodes[ib].value.data();
        let mut normalized = vec![F::zero(); src.len()];
        let mut inv_std = vec![F::zero(); rows];
        let mut out = vec![F::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let inv = F::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let xh = (row[c] - mean) * inv;
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * gain_v[c] + bias_v[c];
            }
        }
        let value = Tensor::new(self.nodes[ix].value.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
                normalized,
                inv_std,
            },
            &[ix, ig, ib],
        )
    }

    /// Stacks 2-D inputs along rows; all inputs share the column extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::NoInputs { op: "concat_rows" });
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<TensorResult<Vec<_>>>()?;
        let (_, cols) = self.dims2(ids[0], "concat_rows")?;
        let mut rows = 0;
        for &i in &ids {
            let (r, c) = self.dims2(i, "concat_rows")?;
            if c != cols {
                return Err(self.mismatch("concat_rows", ids[0], i));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &i in &ids {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(value, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                start,
                end: start + len,
                extent: r,
            });
        }
        let data = self.nodes[ia].value.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        self.push(value, Op::SliceRows { src: ia, start }, &[ia])
    }

    /// Inverse of [`Graph::concat_rows`]: splits into consecutive row blocks.
    pub fn split_rows(&mut self, a: Var, sizes: &[usize]) -> TensorResult<Vec<Var>> {
        let ia = self.idx(a)?;
        let (r, _) = self.dims2(ia, "split_rows")?;
        let total: usize = sizes.iter().sum();
        if total != r {
            return Err(TensorError::OutOfRange {
                op: "split_rows",
                start: 0,
                end: total,
                extent: r,
            });
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_rows(a, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Joins 2-D inputs side by side; all inputs share the row extent.
    pub fn concat_cols(&mut self, parts: &[Var]) -> TensorResult<Var> {
        if parts.is_empty() {
            return Err(TensorError::NoInputs { op: "concat_cols" });
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<TensorResult<Vec<_>>>()?;
        let (rows, _) = self.dims2(ids[0], "concat_cols")?;
        let mut cols = 0;
        for &i in &ids {
            let (r, c) = self.dims2(i, "concat_cols")?;
            if r != rows {
                return Err(self.mismatch("concat_cols", ids[0], i));
            }
            cols += c;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &ids {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(value, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                end: start + len,
                extent: c,
            });
        }
        let src = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        self.push(value, Op::SliceCols { src: ia, start }, &[ia])
    }

    /// Mean over the leading axis: `r×c → 1×c`.
    pub fn mean_rows(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let (r, c) = self.dims2(ia, "mean_rows")?;
        let src = self.nodes[ia].value.data();
        let mut out = vec![F::zero(); c];
        for i in 0..r {
            for (o, &v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o = *o + v;
            }
        }
        let inv = F::one() / F::from_real(r as f64);
        out.iter_mut().for_each(|o| *o = *o * inv);
        let value = Tensor::new(vec![1, c], out)?;
        self.push(value, Op::MeanRows(ia), &[ia])
    }

    /// Mean over every element, yielding shape `[1]`.
    pub fn mean_all(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        let m = t.data().iter().copied().sum::<F>() / F::from_real(t.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(ia), &[ia])
    }

    pub fn sum_all(&mut self, a: Var) -> TensorResult<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::SumAll(ia), &[ia])
    }

    /// Element-wise Smooth-L1 of `x` against fixed targets.
    pub fn smooth_l1(&mut self, x: Var, target: &[F]) -> TensorResult<Var> {
        let ix = self.idx(x)?;
        let xs = &self.nodes[ix].value;
        if xs.numel() != target.len() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                lhs: xs.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let value = Tensor::new(
            xs.shape().to_vec(),
            xs.data()
                .iter()
                .zip(target)
                .map(|(&s, &y)| smooth_l1_value(y - s))
                .collect(),
        )?;
        self.push(
            value,
            Op::SmoothL1 {
                x: ix,
                target: target.to_vec(),
            },
            &[ix],
        )
    }

    /// Element-wise `max(0, 1 - x)`.
    pub fn hinge(&mut self, x: Var) -> TensorResult<Var> {
        let ix = self.idx(x)?;
        let one = F::one();
        let value = self.nodes[ix].value.map(|v| (one - v).max(F::zero()));
        self.push(value, Op::Hinge(ix), &[ix])
    }

    /// Affine map `x · w + b` with `w: din×dout`, `b: dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> TensorResult<Var> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> TensorResult<()> {
        let il = self.idx(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[il].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[il].value.shape().to_vec(),
            });
        }
        if !self.nodes[il].requires_grad {
            return Err(TensorError::Detached);
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![F::one()]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[*a].value.matrix_dims("matmul").expect("2-D");
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    // dA = dC · Bᵀ
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt_acc(g, self.nodes[*b].value.data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · dC
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn_acc(self.nodes[*a].value.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNT(a, b) => {
                // C = A·Bᵀ, A: m×k, B: n×k
                let (m, k) = self.nodes[*a].value.matrix_dims("matmul_nt").expect("2-D");
                let n = node.value.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_acc(g, self.nodes[*b].value.data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if self.wants(*b) {
                    let mut db = vec![F::zero(); n * k];
                    gemm_tn_acc(g, self.nodes[*a].value.data(), &mut db, m, n, k);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut da = vec![F::zero(); r * c];
                for x in 0..r {
                    for y in 0..c {
                        da[y * r + x] = g[x * c + y];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Add(a, b) => {
                self.acc_if(grads, *a, g);
                self.acc_if(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc_if(grads, *a, g);
                if self.wants(*b) {
                    let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::AddBias(x, b) => {
                self.acc_if(grads, *x, g);
                if self.wants(*b) {
                    let d = self.nodes[*b].value.numel();
                    let mut db = vec![F::zero(); d];
                    for (k, &v) in g.iter().enumerate() {
                        db[k % d] = db[k % d] + v;
                    }
                    accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<F> = g.iter().map(|&v| v * *c).collect();
                accumulate(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                let da: Vec<F> = x.iter().zip(g).map(|(&xv, &gv)| gv * gelu_grad(xv)).collect();
                accumulate(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let c = node.value.shape()[1];
                let mut da = vec![F::zero(); out.len()];
                for (r, (y, gy)) in out.chunks(c).zip(g.chunks(c)).enumerate() {
                    let dot: F = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        da[r * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let d = self.nodes[*gain].value.numel();
                let gain_v = self.nodes[*gain].value.data();
                if self.wants(*bias) {
                    let mut db = vec![F::zero(); d];
                    for (k, &v) in g.iter().enumerate() {
                        db[k % d] = db[k % d] + v;
                    }
                    accumulate(grads, *bias, &db);
                }
                if self.wants(*gain) {
                    let mut dg = vec![F::zero(); d];
                    for (k, (&v, &xh)) in g.iter().zip(normalized).enumerate() {
                        dg[k % d] = dg[k % d] + v * xh;
                    }
                    accumulate(grads, *gain, &dg);
                }
                if self.wants(*x) {
                    let df = F::from_real(d as f64);
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &normalized[r * d..(r + 1) * d];
                        let dxh: Vec<F> = gr.iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                        let sum_dxh: F = dxh.iter().copied().sum();
                        let sum_dxh_xh: F = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for c in 0..d {
                            dx[r * d + c] = inv / df * (df * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh);
                        }
                    }
                    accumulate(grads, *x, &dx);
                }
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &src in ids {
                    let n = self.nodes[src].value.numel();
                    self.acc_if(grads, src, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::SliceRows { src, start } => {
                if self.wants(*src) {
                    let c = node.value.shape()[1];
                    let mut da = vec![F::zero(); self.nodes[*src].value.numel()];
                    da[start * c..start * c + g.len()].copy_from_slice(g);
                    accumulate(grads, *src, &da);
                }
            }
            Op::ConcatCols(ids) => {
                let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                let mut offset = 0;
                for &src in ids {
                    let w = self.nodes[src].value.shape()[1];
                    if self.wants(src) {
                        let mut da = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            da.extend_from_slice(&g[r * cols + offset..r * cols + offset + w]);
                        }
                        accumulate(grads, src, &da);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                if self.wants(*src) {
                    let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
                    let c = self.nodes[*src].value.shape()[1];
                    let mut da = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        da[r * c + start..r * c + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    accumulate(grads, *src, &da);
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.nodes[*a].value.matrix_dims("mean_rows").expect("2-D");
                let inv = F::one() / F::from_real(r as f64);
                let mut da = vec![F::zero(); r * c];
                for row in da.chunks_mut(c) {
                    for (d, &gv) in row.iter_mut().zip(g) {
                        *d = gv * inv;
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.numel();
                let v = g[0] / F::from_real(n as f64);
                accumulate(grads, *a, &vec![v; n]);
            }
            Op::SumAll(a) => {
                let n = self.nodes[*a].value.numel();
                accumulate(grads, *a, &vec![g[0]; n]);
            }
            Op::SmoothL1 { x, target } => {
                let xs = self.nodes[*x].value.data();
                let da: Vec<F> = xs
                    .iter()
                    .zip(target)
                    .zip(g)
                    .map(|((&s, &y), &gv)| gv * smooth_l1_grad_wrt_pred(y - s))
                    .collect();
                accumulate(grads, *x, &da);
            }
            Op::Hinge(x) => {
                let xs = self.nodes[*x].value.data();
                let da: Vec<F> = xs
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v < F::one() { -gv } else { F::zero() })
                    .collect();
                accumulate(grads, *x, &da);
            }
        }
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn acc_if(&self, grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
        if self.wants(i) {
            accumulate(grads, i, g);
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> TensorResult<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].value.shape() != self.nodes[ib].value.shape() {
            return Err(self.mismatch(op, ia, ib));
        }
        Ok((ia, ib))
    }

    fn zip(&self, ia: usize, ib: usize, f: impl Fn(F, F) -> F) -> Vec<F> {
        self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.nodes[a].value.shape().to_vec(),
            rhs: self.nodes[b].value.shape().to_vec(),
        }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Vec<F>>], i: usize, g: &[F]) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a = *a + v),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

pub(crate) fn softmax_row<F: Scalar>(src: &[F], dst: &mut [F]) {
    let max = src.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum = sum + *d;
    }
    let inv = F::one() / sum;
    dst.iter_mut().for_each(|d| *d = *d * inv);
}

fn gelu<F: Scalar>(x: F) -> F {
    let k = F::from_real((2.0 / std::f64::consts::PI).sqrt());
    let c = F::from_real(GELU_COEF);
    let half = F::from_real(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let k = F::from_real((2.0 / std::f64::consts::PI).sqrt());
    let c = F::from_real(GELU_COEF);
    let half = F::from_real(0.5);
    let three = F::from_real(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x)
}

/// Smooth-L1 of a residual `r = y - s`.
pub(crate) fn smooth_l1_value<F: Scalar>(r: F) -> F {
    let a = r.abs();
    if a < F::one() {
        F::from_real(0.5) * r * r
    } else {
        a - F::from_real(0.5)
    }
}

/// d/ds of Smooth-L1(y - s) given the residual `r = y - s`.
fn smooth_l1_grad_wrt_pred<F: Scalar>(r: F) -> F {
    if r.abs() < F::one() {
        -r
    } else if r > F::zero() {
        -F::one()
    } else {
        F::one()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let ii = g.matmul(i, i).unwrap();
        assert_eq!(g.value(ii), &Tensor::identity(2));

        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(t(&[vec![1.0], vec![1.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_large_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -1000.0]]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            assert!((v.at(0, c) - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v.at(1, 0), 1.0);
        assert!(v.at(1, 1) < 1e-300 || v.at(1, 1) == 0.0);
        assert!(v.is_finite());
    }

    #[test]
    fn layer_norm_constant_row_and_zero_gain() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![3.0; 4]]));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, one, zero).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        let x2 = g.constant(t(&[vec![1.0, -2.0, 5.0, 0.5]]));
        let bias = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let y2 = g.layer_norm(x2, zero, bias).unwrap();
        assert_eq!(g.value(y2).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1.0, -2.0, 3.0]]));
        let w = g.constant(Tensor::identity(3));
        let b0 = g.constant(Tensor::zeros(&[3]));
        let y = g.linear(x, w, b0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap());
        let y2 = g.linear(z, w, b).unwrap();
        assert_eq!(g.value(y2).data(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_split_round_trip_and_routing() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_fn(&[3, 2], |k| k as f64 * 0.37));
        let b = g.param(Tensor::from_fn(&[3, 2], |k| -(k as f64) * 1.1));
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[6, 2]);
        let parts = g.split_rows(c, &[3, 3]).unwrap();
        assert_eq!(g.value(parts[0]), g.value(a));
        assert_eq!(g.value(parts[1]), g.value(b));
        let s = g.sum_all(c).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.grad(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn concat_rows_rejects_mismatched_cols() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let b = g.constant(Tensor::zeros(&[3, 4]));
        assert!(g.concat_rows(&[a, b]).is_err());
        assert!(g.concat_cols(&[a, b]).is_ok());
    }

    #[test]
    fn mean_sub_and_mean_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[vec![1.0, 2.0, 3.0]]));
        let m = g.mean_all(x).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
        let z = g.sub(x, x).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        g.backward(m).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn backward_error_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[vec![1.0, 2.0]]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar { .. })));
        let c = g.constant(t(&[vec![1.0, 2.0]]));
        let sc = g.sum_all(c).unwrap();
        assert!(matches!(g.backward(sc), Err(TensorError::Detached)));
        let s = g.sum_all(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));

        let mut other = Graph::<f64>::new();
        let y = other.param(t(&[vec![1.0]]));
        assert!(matches!(g.sum_all(y), Err(TensorError::ForeignVar)));
    }

    #[test]
    fn non_finite_detection() {
        let mut g = Graph::<f64>::new();
        g.set_check_finite(true);
        let x = g.constant(t(&[vec![f64::MAX, f64::MAX]]));
        let y = g.add(x, x);
        assert!(matches!(y, Err(TensorError::NonFinite { op: "add" })));
    }

    #[test]
    fn hinge_subgradient_is_zero_at_one() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[vec![1.0, 0.5, 2.0]]));
        let h = g.hinge(x).unwrap();
        let s = g.sum_all(h).unwrap();
        assert_eq!(g.value(s).data(), &[0.5]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, -1.0, 0.0]);
    }
}
