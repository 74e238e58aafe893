use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, Ix1, Ix2};
use rayon::prelude::*;
use thiserror::Error;

use crate::{kernels, Scalar};

const LAYER_NORM_EPS: f64 = 1e-5;
const PAR_CE_THRESHOLD: usize = 1 << 20;
const CE_ROW_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("token id {id} out of range for table of {rows} rows")]
    IdOutOfRange { id: u32, rows: usize },
    #[error("no positions to gather")]
    EmptyPositions,
    #[error("pooling mask has no valid positions")]
    AllInvalidMask,
    #[error("cross-entropy over zero examples")]
    EmptyBatch,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: u32, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape")]
    BackwardAlreadyRan,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef {
    pub(crate) index: usize,
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Mul,
    Sigmoid,
    Relu,
    Gelu,
    Softmax,
    Sum,
    LayerNorm,
    DepthwiseConv { scored: bool },
    Linear,
    MatmulNt,
    AddRowVec,
    EmbeddingLookup { ids: Vec<u32> },
    GatherRows { rows: Vec<usize> },
    ConcatRows { sizes: Vec<usize> },
    ZeroRows { valid: Vec<bool> },
    MaxPoolSeq { argmax: Vec<usize> },
    MeanPoolSeq { valid: Vec<bool> },
    CrossEntropy { targets: Vec<u32>, row_lse: Vec<T> },
}

struct Node<T: Scalar> {
    value: Arc<ArrayD<T>>,
    parents: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Record of a forward computation; replaying it in reverse accumulates
/// gradients. A tape belongs to one training thread at a time; tensors are
/// immutable once written by their producing op.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, r: TensorRef) -> Option<&ArrayD<T>> {
        self.grads.get(r.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, r: TensorRef) -> Option<ArrayD<T>> {
        self.grads.get_mut(r.index).and_then(|g| g.take())
    }
}

fn view2<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<Ix2>().expect("2-d tensor")
}

fn accumulate<T: Scalar>(slot: &mut Option<ArrayD<T>>, contrib: ArrayD<T>) {
    match slot {
        Some(g) => *g += &contrib,
        None => *slot = Some(contrib),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, r: TensorRef) -> &ArrayD<T> {
        &self.nodes[r.index].value
    }

    pub fn scalar_value(&self, r: TensorRef) -> T {
        let v = self.value(r);
        assert_eq!(v.len(), 1, "expected scalar node");
        *v.iter().next().unwrap()
    }

    fn push(
        &mut self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        op: Op<T>,
        requires_grad: bool,
        name: Option<String>,
    ) -> TensorRef {
        #[cfg(debug_assertions)]
        {
            debug_assert!(
                value.iter().all(|v| v.is_finite()),
                "non-finite value produced by a forward op"
            );
        }
        self.nodes.push(Node { value: Arc::new(value), parents, op, requires_grad, name });
        TensorRef { index: self.nodes.len() - 1 }
    }

    /// Leaf holding an owned value.
    pub fn leaf(&mut self, value: ArrayD<T>, requires_grad: bool) -> TensorRef {
        self.push(value, Vec::new(), Op::Leaf, requires_grad, None)
    }

    /// Named parameter leaf; shares storage with the caller.
    pub fn param(&mut self, name: &str, value: Arc<ArrayD<T>>) -> TensorRef {
        #[cfg(debug_assertions)]
        debug_assert!(value.iter().all(|v| v.is_finite()), "non-finite parameter {name}");
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            op: Op::Leaf,
            requires_grad: true,
            name: Some(name.to_string()),
        });
        TensorRef { index: self.nodes.len() - 1 }
    }

    /// Constant leaf that never receives gradients.
    pub fn constant(&mut self, value: ArrayD<T>) -> TensorRef {
        self.leaf(value, false)
    }

    pub fn name(&self, r: TensorRef) -> Option<&str> {
        self.nodes[r.index].name.as_deref()
    }

    fn any_grad(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = va + vb;
        let parents = vec![a.index, b.index];
        let rg = self.any_grad(&parents);
        self.push(out, parents, Op::Add, rg, None)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = va * vb;
        let parents = vec![a.index, b.index];
        let rg = self.any_grad(&parents);
        self.push(out, parents, Op::Mul, rg, None)
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).mapv(kernels::sigmoid);
        let rg = self.nodes[a.index].requires_grad;
        self.push(out, vec![a.index], Op::Sigmoid, rg, None)
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.nodes[a.index].requires_grad;
        self.push(out, vec![a.index], Op::Relu, rg, None)
    }

    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let out = self.value(a).mapv(kernels::gelu);
        let rg = self.nodes[a.index].requires_grad;
        self.push(out, vec![a.index], Op::Gelu, rg, None)
    }

    /// Softmax over a 1-d vector, or over each row of a 2-d tensor.
    pub fn softmax(&mut self, a: TensorRef) -> TensorRef {
        let v = self.value(a);
        let mut out: ArrayD<T> = v.clone();
        match out.ndim() {
            1 => kernels::softmax_slice_inplace(out.as_slice_mut().expect("standard layout")),
            2 => {
                let cols = out.shape()[1];
                for row in out.as_slice_mut().expect("standard layout").chunks_mut(cols) {
                    kernels::softmax_slice_inplace(row);
                }
            }
            n => panic!("softmax expects rank 1 or 2, got rank {n}"),
        }
        let rg = self.nodes[a.index].requires_grad;
        self.push(out, vec![a.index], Op::Softmax, rg, None)
    }

    /// Sum of all elements, as a 1-element tensor.
    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s = self.value(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.nodes[a.index].requires_grad;
        self.push(ArrayD::from_elem(vec![1], s), vec![a.index], Op::Sum, rg, None)
    }

    /// Per-row layer normalization (mean 0, variance 1 before gain/bias,
    /// epsilon 1e-5).
    pub fn layer_norm(&mut self, x: TensorRef, gain: TensorRef, bias: TensorRef) -> TensorRef {
        let xv = view2(self.value(x));
        let g = self.value(gain).view().into_dimensionality::<Ix1>().expect("1-d gain");
        let b = self.value(bias).view().into_dimensionality::<Ix1>().expect("1-d bias");
        let out = kernels::layer_norm_rows(
            xv,
            g.as_slice().expect("standard layout"),
            b.as_slice().expect("standard layout"),
            LAYER_NORM_EPS,
        );
        let parents = vec![x.index, gain.index, bias.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::LayerNorm, rg, None)
    }

    /// Depthwise convolution over an (N x d) sequence with a (d x k) kernel
    /// block. With `scored`, each kernel row is softmax-normalized first.
    pub fn scored_depthwise_conv(&mut self, x: TensorRef, w: TensorRef, scored: bool) -> TensorRef {
        let xv = view2(self.value(x));
        let wv = view2(self.value(w));
        assert_eq!(xv.ncols(), wv.nrows(), "conv: channels mismatch");
        let alpha = kernels::conv_scores(wv, scored);
        let out = kernels::depthwise_conv(xv, alpha.view());
        let parents = vec![x.index, w.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::DepthwiseConv { scored }, rg, None)
    }

    /// `x (n x a) . w (a x b) + bias (b)`.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: TensorRef) -> TensorRef {
        let xv = view2(self.value(x));
        let wv = view2(self.value(w));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().expect("1-d bias");
        assert_eq!(xv.ncols(), wv.nrows(), "linear: inner dims");
        assert_eq!(wv.ncols(), bv.len(), "linear: bias width");
        let mut out = kernels::matmul(xv, wv);
        out += &bv;
        let parents = vec![x.index, w.index, b.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::Linear, rg, None)
    }

    /// `x (m x d) . w (v x d) transposed` -> (m x v); used by the tied
    /// output head.
    pub fn matmul_nt(&mut self, x: TensorRef, w: TensorRef) -> TensorRef {
        let xv = view2(self.value(x));
        let wv = view2(self.value(w));
        assert_eq!(xv.ncols(), wv.ncols(), "matmul_nt: inner dims");
        let out = kernels::matmul(xv, wv.t());
        let parents = vec![x.index, w.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::MatmulNt, rg, None)
    }

    /// Broadcast-add a row vector to every row.
    pub fn add_row_vec(&mut self, x: TensorRef, v: TensorRef) -> TensorRef {
        let xv = view2(self.value(x));
        let vv = self.value(v).view().into_dimensionality::<Ix1>().expect("1-d vector");
        assert_eq!(xv.ncols(), vv.len(), "add_row_vec: width mismatch");
        let out = &xv + &vv;
        let parents = vec![x.index, v.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::AddRowVec, rg, None)
    }

    /// Row `i` of the output equals `table[ids[i]]`; the gradient scatters
    /// into the looked-up rows only.
    pub fn embedding_lookup(
        &mut self,
        table: TensorRef,
        ids: &[u32],
    ) -> Result<TensorRef, TensorError> {
        let tv = view2(self.value(table));
        let rows = tv.nrows();
        let d = tv.ncols();
        let mut out = Array2::<T>::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            if id as usize >= rows {
                return Err(TensorError::IdOutOfRange { id, rows });
            }
            out.row_mut(i).assign(&tv.row(id as usize));
        }
        let parents = vec![table.index];
        let rg = self.any_grad(&parents);
        Ok(self.push(
            out.into_dyn(),
            parents,
            Op::EmbeddingLookup { ids: ids.to_vec() },
            rg,
            None,
        ))
    }

    pub fn gather_rows(&mut self, x: TensorRef, rows: &[usize]) -> Result<TensorRef, TensorError> {
        if rows.is_empty() {
            return Err(TensorError::EmptyPositions);
        }
        let xv = view2(self.value(x));
        let n = xv.nrows();
        let mut out = Array2::<T>::zeros((rows.len(), xv.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            assert!(r < n, "gather_rows: row {r} out of {n}");
            out.row_mut(i).assign(&xv.row(r));
        }
        let parents = vec![x.index];
        let rg = self.any_grad(&parents);
        Ok(self.push(out.into_dyn(), parents, Op::GatherRows { rows: rows.to_vec() }, rg, None))
    }

    /// Stack 2-d parts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorRef]) -> TensorRef {
        assert!(!parts.is_empty(), "concat_rows: no parts");
        let d = view2(self.value(parts[0])).ncols();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let v = view2(self.value(p));
            assert_eq!(v.ncols(), d, "concat_rows: width mismatch");
            sizes.push(v.nrows());
            total += v.nrows();
        }
        let mut out = Array2::<T>::zeros((total, d));
        let mut at = 0usize;
        for &p in parts {
            let v = view2(self.value(p));
            out.slice_mut(ndarray::s![at..at + v.nrows(), ..]).assign(&v);
            at += v.nrows();
        }
        let parents: Vec<usize> = parts.iter().map(|p| p.index).collect();
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::ConcatRows { sizes }, rg, None)
    }

    /// Zero the rows whose mask entry is false.
    pub fn zero_rows(&mut self, x: TensorRef, valid: &[bool]) -> TensorRef {
        let xv = view2(self.value(x));
        assert_eq!(valid.len(), xv.nrows(), "zero_rows: mask length");
        let mut out = xv.to_owned();
        for (t, &ok) in valid.iter().enumerate() {
            if !ok {
                out.row_mut(t).fill(T::zero());
            }
        }
        let parents = vec![x.index];
        let rg = self.any_grad(&parents);
        self.push(out.into_dyn(), parents, Op::ZeroRows { valid: valid.to_vec() }, rg, None)
    }

    /// Max over valid rows; output shape (1 x d).
    pub fn max_pool_seq(&mut self, x: TensorRef, valid: &[bool]) -> Result<TensorRef, TensorError> {
        let xv = view2(self.value(x));
        let (out, argmax) =
            kernels::max_pool_rows(xv, valid).ok_or(TensorError::AllInvalidMask)?;
        let d = out.len();
        let parents = vec![x.index];
        let rg = self.any_grad(&parents);
        Ok(self.push(
            out.into_shape_with_order(vec![1, d]).unwrap().into_dyn(),
            parents,
            Op::MaxPoolSeq { argmax },
            rg,
            None,
        ))
    }

    /// Mean over valid rows; output shape (1 x d).
    pub fn mean_pool_seq(
        &mut self,
        x: TensorRef,
        valid: &[bool],
    ) -> Result<TensorRef, TensorError> {
        let xv = view2(self.value(x));
        let out = kernels::mean_pool_rows(xv, valid).ok_or(TensorError::AllInvalidMask)?;
        let d = out.len();
        let parents = vec![x.index];
        let rg = self.any_grad(&parents);
        Ok(self.push(
            out.into_shape_with_order(vec![1, d]).unwrap().into_dyn(),
            parents,
            Op::MeanPoolSeq { valid: valid.to_vec() },
            rg,
            None,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, log-sum-exp
    /// stabilized. Output is a 1-element tensor.
    pub fn cross_entropy(
        &mut self,
        logits: TensorRef,
        targets: &[u32],
    ) -> Result<TensorRef, TensorError> {
        if targets.is_empty() {
            return Err(TensorError::EmptyBatch);
        }
        let lv = view2(self.value(logits));
        let (m, classes) = lv.dim();
        assert_eq!(m, targets.len(), "cross_entropy: rows vs targets");
        for &t in targets {
            if t as usize >= classes {
                return Err(TensorError::TargetOutOfRange { target: t, classes });
            }
        }
        let lc = lv.as_standard_layout();
        let ls = lc.as_slice().expect("standard layout");
        let mut row_lse = vec![T::zero(); m];
        let mut loss = T::zero();
        for (i, row) in ls.chunks(classes).enumerate() {
            let lse = kernels::row_logsumexp(row);
            row_lse[i] = lse;
            loss = loss + lse - row[targets[i] as usize];
        }
        loss = loss / T::from_f64(m as f64);
        let parents = vec![logits.index];
        let rg = self.any_grad(&parents);
        Ok(self.push(
            ArrayD::from_elem(vec![1], loss),
            parents,
            Op::CrossEntropy { targets: targets.to_vec(), row_lse },
            rg,
            None,
        ))
    }

    /// Populate gradients for every node reachable from `loss` that
    /// requires them. Running backward a second time on the same tape is an
    /// error.
    pub fn backward(&mut self, loss: TensorRef) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRan);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss { shape: loss_shape });
        }
        self.backward_done = true;

        let mut grads: Vec<Option<ArrayD<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.index] = Some(ArrayD::from_elem(loss_shape, T::one()));

        for idx in (0..=loss.index).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let contribs = self.op_backward(idx, &g);
            for (parent, contrib) in contribs {
                if self.nodes[parent].requires_grad {
                    accumulate(&mut grads[parent], contrib);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn op_backward(&self, idx: usize, g: &ArrayD<T>) -> Vec<(usize, ArrayD<T>)> {
        let node = &self.nodes[idx];
        let parents = &node.parents;
        let pv = |i: usize| -> &ArrayD<T> { &self.nodes[parents[i]].value };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![(parents[0], g.clone()), (parents[1], g.clone())],
            Op::Mul => vec![
                (parents[0], g * pv(1)),
                (parents[1], g * pv(0)),
            ],
            Op::Sigmoid => {
                let y: &ArrayD<T> = &node.value;
                let dx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gv, &yv| gv * yv * (T::one() - yv));
                vec![(parents[0], dx)]
            }
            Op::Relu => {
                let x = pv(0);
                let dx = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| if xv > T::zero() { gv } else { T::zero() });
                vec![(parents[0], dx)]
            }
            Op::Gelu => {
                let x = pv(0);
                let dx = ndarray::Zip::from(g)
                    .and(x)
                    .map_collect(|&gv, &xv| gv * kernels::gelu_deriv(xv));
                vec![(parents[0], dx)]
            }
            Op::Softmax => {
                let y: &ArrayD<T> = &node.value;
                let mut dx = y.clone();
                match y.ndim() {
                    1 => {
                        let dot = y.iter().zip(g.iter()).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                        ndarray::Zip::from(&mut dx).and(g).for_each(|d, &gv| {
                            *d = *d * (gv - dot);
                        });
                    }
                    _ => {
                        let cols = y.shape()[1];
                        let ys = y.as_slice().expect("standard layout");
                        let gsl = g.as_slice().expect("standard layout");
                        let ds = dx.as_slice_mut().expect("standard layout");
                        for ((yrow, grow), drow) in
                            ys.chunks(cols).zip(gsl.chunks(cols)).zip(ds.chunks_mut(cols))
                        {
                            let mut dot = T::zero();
                            for (y_i, g_i) in yrow.iter().zip(grow.iter()) {
                                dot = dot + *y_i * *g_i;
                            }
                            for (d, g_i) in drow.iter_mut().zip(grow.iter()) {
                                *d = *d * (*g_i - dot);
                            }
                        }
                    }
                }
                vec![(parents[0], dx)]
            }
            Op::Sum => {
                let g0 = *g.iter().next().unwrap();
                vec![(parents[0], ArrayD::from_elem(pv(0).shape().to_vec(), g0))]
            }
            Op::LayerNorm => {
                let x = view2(pv(0));
                let gain = pv(1).view().into_dimensionality::<Ix1>().unwrap();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let (n, d) = x.dim();
                let eps = T::from_f64(LAYER_NORM_EPS);
                let dn = T::from_f64(d as f64);
                let mut dx = Array2::<T>::zeros((n, d));
                let mut dgain = Array1::<T>::zeros(d);
                let mut dbias = Array1::<T>::zeros(d);
                for t in 0..n {
                    let xr = x.row(t);
                    let gr = gv.row(t);
                    let mut mean = T::zero();
                    for &v in xr {
                        mean = mean + v;
                    }
                    mean = mean / dn;
                    let mut var = T::zero();
                    for &v in xr {
                        let c = v - mean;
                        var = var + c * c;
                    }
                    var = var / dn;
                    let inv = T::one() / (var + eps).sqrt();
                    // dy = g * gain; dx = inv*(dy - mean(dy) - xh*mean(dy*xh))
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let xh = (xr[c] - mean) * inv;
                        let dy = gr[c] * gain[c];
                        m1 = m1 + dy;
                        m2 = m2 + dy * xh;
                        dgain[c] = dgain[c] + gr[c] * xh;
                        dbias[c] = dbias[c] + gr[c];
                    }
                    m1 = m1 / dn;
                    m2 = m2 / dn;
                    let mut dxr = dx.row_mut(t);
                    for c in 0..d {
                        let xh = (xr[c] - mean) * inv;
                        let dy = gr[c] * gain[c];
                        dxr[c] = inv * (dy - m1 - xh * m2);
                    }
                }
                vec![
                    (parents[0], dx.into_dyn()),
                    (parents[1], dgain.into_dyn()),
                    (parents[2], dbias.into_dyn()),
                ]
            }
            Op::DepthwiseConv { scored } => {
                let x = view2(pv(0));
                let w = view2(pv(1));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let k = w.ncols();
                let alpha = kernels::conv_scores(w, *scored);
                let dx = kernels::depthwise_conv_backward_x(gv, alpha.view());
                let v = kernels::depthwise_conv_score_grad(gv, x, k);
                let dw = if *scored {
                    // chain through the row softmax: dw = alpha * (v - <alpha, v>)
                    let mut dw = Array2::<T>::zeros(w.dim());
                    for c in 0..w.nrows() {
                        let ar = alpha.row(c);
                        let vr = v.row(c);
                        let mut dot = T::zero();
                        for i in 0..k {
                            dot = dot + ar[i] * vr[i];
                        }
                        let mut dr = dw.row_mut(c);
                        for i in 0..k {
                            dr[i] = ar[i] * (vr[i] - dot);
                        }
                    }
                    dw
                } else {
                    v
                };
                vec![(parents[0], dx.into_dyn()), (parents[1], dw.into_dyn())]
            }
            Op::Linear => {
                let x = view2(pv(0));
                let w = view2(pv(1));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = kernels::matmul(gv, w.t());
                let dw = kernels::matmul(x.t(), gv);
                let db = gv.sum_axis(ndarray::Axis(0));
                vec![
                    (parents[0], dx.into_dyn()),
                    (parents[1], dw.into_dyn()),
                    (parents[2], db.into_dyn()),
                ]
            }
            Op::MatmulNt => {
                let x = view2(pv(0));
                let w = view2(pv(1));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dx = kernels::matmul(gv, w);
                let dw = kernels::matmul(gv.t(), x);
                vec![(parents[0], dx.into_dyn()), (parents[1], dw.into_dyn())]
            }
            Op::AddRowVec => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dv = gv.sum_axis(ndarray::Axis(0));
                vec![(parents[0], g.clone()), (parents[1], dv.into_dyn())]
            }
            Op::EmbeddingLookup { ids } => {
                let table = view2(pv(0));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = Array2::<T>::zeros(table.dim());
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id as usize);
                    row += &gv.row(i);
                }
                vec![(parents[0], dt.into_dyn())]
            }
            Op::GatherRows { rows } => {
                let x = view2(pv(0));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros(x.dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut row = dx.row_mut(r);
                    row += &gv.row(i);
                }
                vec![(parents[0], dx.into_dyn())]
            }
            Op::ConcatRows { sizes } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut out = Vec::with_capacity(sizes.len());
                let mut at = 0usize;
                for (pi, &sz) in sizes.iter().enumerate() {
                    let part = gv.slice(ndarray::s![at..at + sz, ..]).to_owned();
                    out.push((parents[pi], part.into_dyn()));
                    at += sz;
                }
                out
            }
            Op::ZeroRows { valid } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = gv.to_owned();
                for (t, &ok) in valid.iter().enumerate() {
                    if !ok {
                        dx.row_mut(t).fill(T::zero());
                    }
                }
                vec![(parents[0], dx.into_dyn())]
            }
            Op::MaxPoolSeq { argmax } => {
                let x = view2(pv(0));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<T>::zeros(x.dim());
                for (c, &t) in argmax.iter().enumerate() {
                    dx[[t, c]] = gv[[0, c]];
                }
                vec![(parents[0], dx.into_dyn())]
            }
            Op::MeanPoolSeq { valid } => {
                let x = view2(pv(0));
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let count = valid.iter().filter(|&&v| v).count();
                let inv = T::one() / T::from_f64(count as f64);
                let mut dx = Array2::<T>::zeros(x.dim());
                for (t, &ok) in valid.iter().enumerate() {
                    if ok {
                        for c in 0..x.ncols() {
                            dx[[t, c]] = gv[[0, c]] * inv;
                        }
                    }
                }
                vec![(parents[0], dx.into_dyn())]
            }
            Op::CrossEntropy { targets, row_lse } => {
                let logits = view2(pv(0));
                let (m, classes) = logits.dim();
                let g0 = *g.iter().next().unwrap();
                let scale = g0 / T::from_f64(m as f64);
                let lc = logits.as_standard_layout();
                let ls = lc.as_slice().expect("standard layout");
                let mut dx = Array2::<T>::zeros((m, classes));
                let ds = dx.as_slice_mut().expect("standard layout");
                let work = |(i, (drow, lrow)): (usize, (&mut [T], &[T]))| {
                    let lse = row_lse[i];
                    for c in 0..classes {
                        drow[c] = (lrow[c] - lse).exp() * scale;
                    }
                    drow[targets[i] as usize] = drow[targets[i] as usize] - scale;
                };
                if m * classes >= PAR_CE_THRESHOLD {
                    ds.par_chunks_mut(CE_ROW_CHUNK * classes)
                        .zip(ls.par_chunks(CE_ROW_CHUNK * classes))
                        .enumerate()
                        .for_each(|(chunk_i, (dchunk, lchunk))| {
                            for (j, pair) in dchunk
                                .chunks_mut(classes)
                                .zip(lchunk.chunks(classes))
                                .enumerate()
                            {
                                work((chunk_i * CE_ROW_CHUNK + j, pair));
                            }
                        });
                } else {
                    for (i, pair) in ds.chunks_mut(classes).zip(ls.chunks(classes)).enumerate() {
                        work((i, pair));
                    }
                }
                vec![(parents[0], dx.into_dyn())]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn leaf2(tape: &mut Tape<f64>, a: Array2<f64>) -> TensorRef {
        tape.leaf(a.into_dyn(), true)
    }

    #[test]
    fn softmax_hand_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![1.0f64.ln(), 3.0f64.ln()].into_dyn(), false);
        let y = tape.softmax(x);
        let v = tape.value(y);
        assert!((v[0] - 0.25).abs() < 1e-12);
        assert!((v[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![0.0].into_dyn(), false);
        let y = tape.sigmoid(x);
        assert!((tape.value(y)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gelu_of_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(array![0.0].into_dyn(), false);
        let y = tape.gelu(x);
        assert_eq!(tape.value(y)[0], 0.0);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.5, -2.0], [0.25, 7.0]]);
        let ones = tape.constant(ArrayD::from_elem(vec![2, 2], 1.0));
        let y = tape.mul(x, ones);
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn embedding_lookup_repeats_rows_and_scatters_counts() {
        let mut tape = Tape::<f64>::new();
        let table = leaf2(&mut tape, array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let out = tape.embedding_lookup(table, &[0, 0]).unwrap();
        let v = view2(tape.value(out)).to_owned();
        assert_eq!(v.row(0), v.row(1));

        let s = tape.sum(out);
        let mut grads = tape.backward(s).unwrap();
        let gt = grads.take(table).unwrap();
        // row 0 looked up twice, rows 1 and 2 never
        assert_eq!(gt[[0, 0]], 2.0);
        assert_eq!(gt[[1, 0]], 0.0);
        assert_eq!(gt[[2, 1]], 0.0);
    }

    #[test]
    fn embedding_lookup_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = leaf2(&mut tape, array![[1.0, 2.0], [3.0, 4.0]]);
        let err = tape.embedding_lookup(table, &[2]).unwrap_err();
        assert!(matches!(err, TensorError::IdOutOfRange { id: 2, rows: 2 }));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::<f64>::new();
        let logits = leaf2(&mut tape, Array2::zeros((3, 4)));
        let loss = tape.cross_entropy(logits, &[0, 1, 2]).unwrap();
        assert!((tape.scalar_value(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_logit_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let mut l = Array2::zeros((1, 8));
        l[[0, 3]] = 30.0;
        let logits = leaf2(&mut tape, l);
        let loss = tape.cross_entropy(logits, &[3]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_is_mean_over_examples() {
        let la = array![[2.0, -1.0, 0.5]];
        let lb = array![[0.0, 3.0, -2.0]];
        let mut t1 = Tape::<f64>::new();
        let r = t1.leaf(la.clone().into_dyn(), false);
        let ra = t1.cross_entropy(r, &[0]).unwrap();
        let a = t1.scalar_value(ra);
        let mut t2 = Tape::<f64>::new();
        let r = t2.leaf(lb.clone().into_dyn(), false);
        let rb = t2.cross_entropy(r, &[2]).unwrap();
        let b = t2.scalar_value(rb);

        let mut t3 = Tape::<f64>::new();
        let mut both = Array2::zeros((2, 3));
        both.row_mut(0).assign(&la.row(0));
        both.row_mut(1).assign(&lb.row(0));
        let r = t3.leaf(both.into_dyn(), false);
        let rc = t3.cross_entropy(r, &[0, 2]).unwrap();
        assert!((t3.scalar_value(rc) - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0, 2.0], [3.0, 4.0]]);
        let s = tape.sum(x);
        let mut grads = tape.backward(s).unwrap();
        assert_eq!(grads.take(x).unwrap(), ArrayD::from_elem(vec![2, 2], 1.0));
    }

    #[test]
    fn backward_of_sum_square_is_two_x() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0, -2.0], [0.5, 4.0]]);
        let sq = tape.mul(x, x);
        let s = tape.sum(sq);
        let mut grads = tape.backward(s).unwrap();
        let g = grads.take(x).unwrap();
        let expect = array![[2.0, -4.0], [1.0, 8.0]].into_dyn();
        assert_eq!(g, expect);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0]]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::BackwardAlreadyRan)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0, 2.0]]);
        assert!(matches!(
            tape.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn conv_near_one_hot_kernel_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0], [2.0], [3.0], [4.0]]);
        let w = leaf2(&mut tape, array![[20.0, 0.0]]);
        let y = tape.scored_depthwise_conv(x, w, true);
        let v = view2(tape.value(y)).to_owned();
        for t in 0..4 {
            assert!((v[[t, 0]] - (t as f64 + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = leaf2(&mut tape, array![[1.0, 5.0], [3.0, 2.0]]);
        let p = tape.max_pool_seq(x, &[true, true]).unwrap();
        assert_eq!(view2(tape.value(p)).row(0).to_vec(), vec![3.0, 5.0]);

        let c = leaf2(&mut tape, array![[2.5, -1.0], [2.5, -1.0], [2.5, -1.0]]);
        let m = tape.mean_pool_seq(c, &[true, true, true]).unwrap();
        assert_eq!(view2(tape.value(m)).row(0).to_vec(), vec![2.5, -1.0]);

        assert!(matches!(
            tape.max_pool_seq(x, &[false, false]),
            Err(TensorError::AllInvalidMask)
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(
                ArrayD::from_shape_fn(vec![6, 3], |ix| (ix[0] * 3 + ix[1]) as f32 * 0.37 - 1.0),
                true,
            );
            let w = tape.leaf(ArrayD::from_shape_fn(vec![3, 2], |ix| (ix[0] + ix[1]) as f32 * 0.11), true);
            let c = tape.scored_depthwise_conv(x, w, true);
            let s = tape.sigmoid(c);
            let y = tape.mul(c, s);
            tape.value(y).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
