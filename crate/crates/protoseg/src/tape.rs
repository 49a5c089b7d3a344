//! Reverse-mode autodiff on a flat tape.
//!
//! Nodes hold dense `ArrayD` values; each recorded op stores the parent ids
//! plus whatever it needs for the backward pass. The op set is exactly what
//! the prototype/loss pipeline requires: convolution, relu, row gathering and
//! averaging, cosine building blocks (row normalization, A·Bᵀ), grouped max,
//! softmax, masked negative log-likelihood, entropy, and the boundary
//! penalty. Discrete decisions (cluster assignments, predicted labels) are
//! made outside the tape and enter ops as constants, so gradients flow only
//! through the continuous parts.

use ndarray::{concatenate, Array1, Array2, Array3, ArrayD, ArrayViewD, Axis, Ix1, Ix2, Ix3, IxDyn};

use crate::scalar::Real;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(pub(crate) usize);

/// Per-node gradient store produced by [`Tape::backward`].
pub struct Grads<T: Real> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Grads<T> {
    fn new(n: usize) -> Self {
        Grads { slots: (0..n).map(|_| None).collect() }
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.slots[id.0].take()
    }

    /// Zero-initialized gradient slot; backward ops add their contribution
    /// into it in place.
    fn slot_mut(&mut self, id: NodeId, shape: &[usize]) -> &mut ArrayD<T> {
        let slot = &mut self.slots[id.0];
        if slot.is_none() {
            *slot = Some(ArrayD::zeros(IxDyn(shape)));
        }
        let arr = slot.as_mut().unwrap();
        debug_assert_eq!(arr.shape(), shape);
        arr
    }

    fn add_assign(&mut self, id: NodeId, contribution: ArrayViewD<'_, T>) {
        let slot = self.slot_mut(id, contribution.shape());
        *slot += &contribution;
    }
}

trait Backward<T: Real> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>);
}

pub struct Tape<T: Real> {
    values: Vec<ArrayD<T>>,
    backs: Vec<Option<Box<dyn Backward<T>>>>,
    needs: Vec<bool>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { values: Vec::new(), backs: Vec::new(), needs: Vec::new(), grad_enabled: true }
    }

    /// Tape that records values only; no backward structures are kept, which
    /// makes pure inference cheaper.
    pub fn no_grad() -> Self {
        Tape { values: Vec::new(), backs: Vec::new(), needs: Vec::new(), grad_enabled: false }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    /// Value of a zero-dimensional (scalar) node.
    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.values[id.0].len(), 1);
        *self.values[id.0].first().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<T>, needs: bool, back: Option<Box<dyn Backward<T>>>) -> NodeId {
        let needs = needs && self.grad_enabled;
        self.values.push(value);
        self.backs.push(if needs { back } else { None });
        self.needs.push(needs);
        NodeId(self.values.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    /// Differentiable input (parameters, feature leaves under test).
    pub fn leaf(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, true, None)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.push(value, false, None)
    }

    /// Backpropagates from a scalar node; returns per-node gradients. Leaf
    /// gradients stay in the store, interior ones are consumed as the sweep
    /// passes them.
    pub fn backward(&self, root: NodeId) -> Grads<T> {
        assert!(self.grad_enabled, "backward on a no-grad tape");
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        let mut grads = Grads::new(self.values.len());
        *grads.slot_mut(root, self.values[root.0].shape()) += T::one();
        for i in (0..=root.0).rev() {
            if self.backs[i].is_some() {
                if let Some(g) = grads.slots[i].take() {
                    self.backs[i].as_ref().unwrap().apply(&g, &self.values, &mut grads);
                }
            }
        }
        grads
    }

    // ---- ops ----

    /// 3x3 convolution, zero padding 1 ("same"), given stride. `x` is
    /// (C_in, H, W), `w` is (C_out, C_in, 3, 3), `b` is (C_out,). Output is
    /// (C_out, ceil(H/stride), ceil(W/stride)).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        assert!(stride == 1 || stride == 2, "conv stride must be 1 or 2");
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().expect("conv input (C,H,W)");
        let wv = self.values[w.0].view().into_dimensionality::<ndarray::Ix4>().expect("conv weight");
        let bv = self.values[b.0].view().into_dimensionality::<Ix1>().expect("conv bias");
        let (c_out, c_in) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(wv.shape()[2], 3);
        assert_eq!(wv.shape()[3], 3);
        assert_eq!(xv.shape()[0], c_in, "conv channel mismatch");
        assert_eq!(bv.len(), c_out);
        let (cols, ho, wo) = im2col(&xv, stride);
        let w_mat = wv.into_shape_with_order((c_out, c_in * 9)).expect("contiguous weight");
        let mut out = w_mat.dot(&cols);
        out += &bv.view().insert_axis(Axis(1));
        let out = out.into_shape_with_order((c_out, ho, wo)).unwrap().into_dyn();
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let back = ConvBack {
            x,
            w,
            b,
            stride,
            cols,
            x_dims: (c_in, xv.shape()[1], xv.shape()[2]),
            out_dims: (c_out, ho, wo),
        };
        self.push(out, needs, Some(Box::new(back)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].mapv(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(ReluBack { x })))
    }

    /// (C, h, w) feature volume to a (h*w, C) row matrix, row-major in (h, w).
    pub fn chw_to_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw input");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let permuted = xv.permuted_axes([1, 2, 0]);
        let out = permuted
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((h * w, c))
            .unwrap()
            .into_dyn();
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(ChwRowsBack { x, dims: (c, h, w) })))
    }

    /// Vertically concatenates row matrices of equal width.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts
            .iter()
            .map(|p| self.values[p.0].view().into_dimensionality::<Ix2>().expect("row matrix"))
            .collect();
        let out = concatenate(Axis(0), &views).expect("concat widths").into_dyn();
        let spans: Vec<(NodeId, usize)> =
            parts.iter().zip(&views).map(|(p, v)| (*p, v.shape()[0])).collect();
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(out, needs, Some(Box::new(ConcatBack { spans })))
    }

    /// Weighted sum of selected rows: `out = sum_i weights[i] * x[rows[i], :]`.
    pub fn rows_weighted_sum(&mut self, x: NodeId, rows: Vec<usize>, weights: Vec<T>) -> NodeId {
        assert_eq!(rows.len(), weights.len());
        assert!(!rows.is_empty(), "weighted sum over empty row set");
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().expect("row matrix");
        let d = xv.shape()[1];
        let mut out = Array1::<T>::zeros(d);
        for (&r, &w) in rows.iter().zip(&weights) {
            out.scaled_add(w, &xv.row(r));
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Some(Box::new(RowsWeightedBack { x, rows, weights })))
    }

    /// Stacks P vector nodes of dimension D into a (P, D) matrix.
    pub fn stack_rows(&mut self, vecs: &[NodeId]) -> NodeId {
        assert!(!vecs.is_empty());
        let views: Vec<_> = vecs
            .iter()
            .map(|v| {
                self.values[v.0]
                    .view()
                    .into_dimensionality::<Ix1>()
                    .expect("vector node")
                    .insert_axis(Axis(0))
            })
            .collect();
        let out = concatenate(Axis(0), &views).expect("stack dims").into_dyn();
        let needs = vecs.iter().any(|v| self.needs(*v));
        self.push(out, needs, Some(Box::new(StackBack { parts: vecs.to_vec() })))
    }

    /// L2-normalizes each row; zero-norm rows map to zero (their gradient is
    /// likewise zero).
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().expect("row matrix");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n > T::zero() {
                row.mapv_inplace(|v| v / n);
            } else {
                row.fill(T::zero());
            }
        }
        let needs = self.needs(x);
        let id = self.push(out.into_dyn(), needs, None);
        if self.needs[id.0] {
            self.backs[id.0] = Some(Box::new(NormalizeBack { x, out: id }));
        }
        id
    }

    /// `a` (M, K) times `b` (N, K) transposed: output (M, N).
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix a");
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().expect("matrix b");
        assert_eq!(av.shape()[1], bv.shape()[1], "inner dims");
        let out = av.dot(&bv.t()).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Some(Box::new(MatmulNtBack { a, b })))
    }

    /// Max over consecutive column groups of width `group`: (N, G*group) to
    /// (N, G). Ties resolve to the lowest index.
    pub fn group_max_cols(&mut self, x: NodeId, group: usize) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().expect("row matrix");
        let (n, cols) = (xv.shape()[0], xv.shape()[1]);
        assert!(group > 0 && cols % group == 0, "group must divide columns");
        let g = cols / group;
        let mut out = Array2::<T>::zeros((n, g));
        let mut arg = vec![0u32; n * g];
        for i in 0..n {
            for gi in 0..g {
                let base = gi * group;
                let mut best = xv[[i, base]];
                let mut best_j = 0u32;
                for j in 1..group {
                    let v = xv[[i, base + j]];
                    if v > best {
                        best = v;
                        best_j = j as u32;
                    }
                }
                out[[i, gi]] = best;
                arg[i * g + gi] = best_j;
            }
        }
        let needs = self.needs(x);
        self.push(out.into_dyn(), needs, Some(Box::new(GroupMaxBack { x, group, arg })))
    }

    /// Elementwise `mul * x + add`.
    pub fn affine(&mut self, x: NodeId, mul: T, add: T) -> NodeId {
        let out = self.values[x.0].mapv(|v| mul * v + add);
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(AffineBack { x, mul })))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let out = &self.values[a.0] + &self.values[b.0];
        let needs = self.needs(a) || self.needs(b);
        self.push(out, needs, Some(Box::new(AddBack { a, b })))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().expect("row matrix");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().fold(T::neg_infinity(), |acc, v| acc.max(*v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.iter().copied().sum::<T>();
            row.mapv_inplace(|v| v / s);
        }
        let needs = self.needs(x);
        let id = self.push(out.into_dyn(), needs, None);
        if self.needs[id.0] {
            self.backs[id.0] = Some(Box::new(SoftmaxBack { x, out: id }));
        }
        id
    }

    /// Mean negative log-likelihood over labeled rows:
    /// `-norm * sum_i ln(max(probs[i, labels[i]], eps))`, skipping rows whose
    /// label equals `ignore`.
    pub fn masked_nll(
        &mut self,
        probs: NodeId,
        labels: Vec<u8>,
        ignore: u8,
        norm: T,
        eps: T,
    ) -> NodeId {
        let pv = self.values[probs.0].view().into_dimensionality::<Ix2>().expect("probs");
        assert_eq!(pv.shape()[0], labels.len());
        let mut total = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let p = pv[[i, l as usize]];
            total += p.max(eps).ln();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), -norm * total);
        let needs = self.needs(probs);
        self.push(out, needs, Some(Box::new(NllBack { probs, labels, ignore, norm, eps })))
    }

    /// Per-row sum over the half-open column range `lo..hi`.
    pub fn select_sum_cols(&mut self, x: NodeId, lo: usize, hi: usize) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix2>().expect("row matrix");
        assert!(lo < hi && hi <= xv.shape()[1]);
        let out = xv.slice(ndarray::s![.., lo..hi]).sum_axis(Axis(1)).into_dyn();
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(SelColsBack { x, lo, hi })))
    }

    /// Total-variation style boundary penalty on a flat (h*w,) map: the
    /// reduction over pixels of sqrt(dx^2 + dy^2 + eps) with forward
    /// differences and zero gradient past the last row/column.
    pub fn boundary(&mut self, x: NodeId, h: usize, w: usize, eps: T, mean: bool) -> NodeId {
        let xv = self.values[x.0].view().into_dimensionality::<Ix1>().expect("flat map");
        assert_eq!(xv.len(), h * w);
        let scale = if mean { T::one() / T::from_f64((h * w) as f64) } else { T::one() };
        let mut total = T::zero();
        for i in 0..h {
            for j in 0..w {
                let v = xv[i * w + j];
                let gx = if j + 1 < w { xv[i * w + j + 1] - v } else { T::zero() };
                let gy = if i + 1 < h { xv[(i + 1) * w + j] - v } else { T::zero() };
                total += (gx * gx + gy * gy + eps).sqrt();
            }
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total * scale);
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(BoundaryBack { x, h, w, eps, scale })))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x.0].len();
        assert!(n > 0);
        let inv = T::one() / T::from_f64(n as f64);
        let total = self.values[x.0].iter().copied().sum::<T>() * inv;
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let needs = self.needs(x);
        self.push(out, needs, Some(Box::new(MeanBack { x, inv })))
    }

    /// Weighted sum of scalar nodes plus a bias; the workhorse for composing
    /// loss totals.
    pub fn linear_comb(&mut self, terms: &[(NodeId, T)], bias: T) -> NodeId {
        let mut total = bias;
        for (id, c) in terms {
            total += *c * self.scalar_value(*id);
        }
        let out = ArrayD::from_elem(IxDyn(&[]), total);
        let needs = terms.iter().any(|(id, _)| self.needs(*id));
        self.push(out, needs, Some(Box::new(LinCombBack { terms: terms.to_vec() })))
    }

    /// Mean Shannon entropy over rows of a probability matrix (natural log).
    pub fn entropy_mean(&mut self, probs: NodeId, eps: T) -> NodeId {
        let pv = self.values[probs.0].view().into_dimensionality::<Ix2>().expect("probs");
        let n = pv.shape()[0];
        assert!(n > 0);
        let inv = T::one() / T::from_f64(n as f64);
        let mut total = T::zero();
        for &p in pv.iter() {
            total += p * p.max(eps).ln();
        }
        let out = ArrayD::from_elem(IxDyn(&[]), -total * inv);
        let needs = self.needs(probs);
        self.push(out, needs, Some(Box::new(EntropyBack { probs, eps, inv })))
    }
}

// ---- backward implementations ----

fn im2col<T: Real>(x: &ndarray::ArrayView3<'_, T>, stride: usize) -> (Array2<T>, usize, usize) {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h - 1) / stride + 1;
    let wo = (w - 1) / stride + 1;
    let mut cols = Array2::<T>::zeros((c_in * 9, ho * wo));
    for c in 0..c_in {
        for di in 0..3usize {
            for dj in 0..3usize {
                let row = c * 9 + di * 3 + dj;
                for i in 0..ho {
                    let si = (i * stride + di) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + dj) as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        cols[[row, i * wo + j]] = x[[c, si as usize, sj as usize]];
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im<T: Real>(
    dcols: &Array2<T>,
    dims: (usize, usize, usize),
    stride: usize,
    ho: usize,
    wo: usize,
) -> Array3<T> {
    let (c_in, h, w) = dims;
    let mut dx = Array3::<T>::zeros((c_in, h, w));
    for c in 0..c_in {
        for di in 0..3usize {
            for dj in 0..3usize {
                let row = c * 9 + di * 3 + dj;
                for i in 0..ho {
                    let si = (i * stride + di) as isize - 1;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let sj = (j * stride + dj) as isize - 1;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        dx[[c, si as usize, sj as usize]] += dcols[[row, i * wo + j]];
                    }
                }
            }
        }
    }
    dx
}

struct ConvBack<T: Real> {
    x: NodeId,
    w: NodeId,
    b: NodeId,
    stride: usize,
    cols: Array2<T>,
    x_dims: (usize, usize, usize),
    out_dims: (usize, usize, usize),
}

impl<T: Real> Backward<T> for ConvBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let (c_out, ho, wo) = self.out_dims;
        let (c_in, _, _) = self.x_dims;
        let gmat = grad.view().into_shape_with_order((c_out, ho * wo)).unwrap();
        let db = gmat.sum_axis(Axis(1));
        grads.add_assign(self.b, db.into_dyn().view());
        let dw = gmat.dot(&self.cols.t());
        grads.add_assign(
            self.w,
            dw.into_shape_with_order((c_out, c_in, 3, 3)).unwrap().into_dyn().view(),
        );
        let w_mat =
            values[self.w.0].view().into_shape_with_order((c_out, c_in * 9)).unwrap();
        let dcols = w_mat.t().dot(&gmat);
        let dx = col2im(&dcols, self.x_dims, self.stride, ho, wo);
        grads.add_assign(self.x, dx.into_dyn().view());
    }
}

struct ReluBack {
    x: NodeId,
}

impl<T: Real> Backward<T> for ReluBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let xv = &values[self.x.0];
        let slot = grads.slot_mut(self.x, xv.shape());
        ndarray::Zip::from(slot).and(grad).and(xv).for_each(|s, &g, &x| {
            if x > T::zero() {
                *s += g;
            }
        });
    }
}

struct ChwRowsBack {
    x: NodeId,
    dims: (usize, usize, usize),
}

impl<T: Real> Backward<T> for ChwRowsBack {
    fn apply(&self, grad: &ArrayD<T>, _values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let (c, h, w) = self.dims;
        let g = grad.view().into_shape_with_order((h, w, c)).unwrap();
        let g_chw = g.permuted_axes([2, 0, 1]);
        let slot = grads.slot_mut(self.x, &[c, h, w]);
        *slot += &g_chw.into_dyn();
    }
}

struct ConcatBack {
    spans: Vec<(NodeId, usize)>,
}

impl<T: Real> Backward<T> for ConcatBack {
    fn apply(&self, grad: &ArrayD<T>, _values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let mut row = 0;
        for (id, n) in &self.spans {
            let piece = g.slice(ndarray::s![row..row + n, ..]);
            grads.add_assign(*id, piece.into_dyn());
            row += n;
        }
    }
}

struct RowsWeightedBack<T: Real> {
    x: NodeId,
    rows: Vec<usize>,
    weights: Vec<T>,
}

impl<T: Real> Backward<T> for RowsWeightedBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix1>().unwrap();
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut slot2 = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for (&r, &w) in self.rows.iter().zip(&self.weights) {
            slot2.row_mut(r).scaled_add(w, &g);
        }
    }
}

struct StackBack {
    parts: Vec<NodeId>,
}

impl<T: Real> Backward<T> for StackBack {
    fn apply(&self, grad: &ArrayD<T>, _values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        for (p, id) in self.parts.iter().enumerate() {
            grads.add_assign(*id, g.row(p).into_dyn());
        }
    }
}

struct NormalizeBack {
    x: NodeId,
    out: NodeId,
}

impl<T: Real> Backward<T> for NormalizeBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let xv = values[self.x.0].view().into_dimensionality::<Ix2>().unwrap();
        let yv = values[self.out.0].view().into_dimensionality::<Ix2>().unwrap();
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut dx = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for r in 0..xv.shape()[0] {
            let n = xv.row(r).iter().map(|v| *v * *v).sum::<T>().sqrt();
            if n == T::zero() {
                continue;
            }
            let y = yv.row(r);
            let gr = g.row(r);
            let dot = gr.iter().zip(y.iter()).map(|(a, b)| *a * *b).sum::<T>();
            let mut row = dx.row_mut(r);
            for k in 0..row.len() {
                row[k] += (gr[k] - y[k] * dot) / n;
            }
        }
    }
}

struct MatmulNtBack {
    a: NodeId,
    b: NodeId,
}

impl<T: Real> Backward<T> for MatmulNtBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let av = values[self.a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = values[self.b.0].view().into_dimensionality::<Ix2>().unwrap();
        grads.add_assign(self.a, g.dot(&bv).into_dyn().view());
        grads.add_assign(self.b, g.t().dot(&av).into_dyn().view());
    }
}

struct GroupMaxBack {
    x: NodeId,
    group: usize,
    arg: Vec<u32>,
}

impl<T: Real> Backward<T> for GroupMaxBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let (n, gc) = (g.shape()[0], g.shape()[1]);
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut dx = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for i in 0..n {
            for gi in 0..gc {
                let j = self.arg[i * gc + gi] as usize;
                dx[[i, gi * self.group + j]] += g[[i, gi]];
            }
        }
    }
}

struct AffineBack<T: Real> {
    x: NodeId,
    mul: T,
}

impl<T: Real> Backward<T> for AffineBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        slot.zip_mut_with(grad, |s, &g| *s += self.mul * g);
    }
}

struct AddBack {
    a: NodeId,
    b: NodeId,
}

impl<T: Real> Backward<T> for AddBack {
    fn apply(&self, grad: &ArrayD<T>, _values: &[ArrayD<T>], grads: &mut Grads<T>) {
        grads.add_assign(self.a, grad.view());
        grads.add_assign(self.b, grad.view());
    }
}

struct SoftmaxBack {
    x: NodeId,
    out: NodeId,
}

impl<T: Real> Backward<T> for SoftmaxBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix2>().unwrap();
        let y = values[self.out.0].view().into_dimensionality::<Ix2>().unwrap();
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut dx = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for r in 0..y.shape()[0] {
            let yr = y.row(r);
            let gr = g.row(r);
            let s = yr.iter().zip(gr.iter()).map(|(a, b)| *a * *b).sum::<T>();
            let mut row = dx.row_mut(r);
            for k in 0..row.len() {
                row[k] += yr[k] * (gr[k] - s);
            }
        }
    }
}

struct NllBack<T: Real> {
    probs: NodeId,
    labels: Vec<u8>,
    ignore: u8,
    norm: T,
    eps: T,
}

impl<T: Real> Backward<T> for NllBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let go = *grad.first().unwrap();
        let pv = values[self.probs.0].view().into_dimensionality::<Ix2>().unwrap();
        let shape = values[self.probs.0].shape().to_vec();
        let slot = grads.slot_mut(self.probs, &shape);
        let mut dp = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for (i, &l) in self.labels.iter().enumerate() {
            if l == self.ignore {
                continue;
            }
            let p = pv[[i, l as usize]];
            if p >= self.eps {
                dp[[i, l as usize]] -= go * self.norm / p;
            }
        }
    }
}

struct SelColsBack {
    x: NodeId,
    lo: usize,
    hi: usize,
}

impl<T: Real> Backward<T> for SelColsBack {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let g = grad.view().into_dimensionality::<Ix1>().unwrap();
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut dx = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for i in 0..g.len() {
            for k in self.lo..self.hi {
                dx[[i, k]] += g[i];
            }
        }
    }
}

struct BoundaryBack<T: Real> {
    x: NodeId,
    h: usize,
    w: usize,
    eps: T,
    scale: T,
}

impl<T: Real> Backward<T> for BoundaryBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let go = *grad.first().unwrap() * self.scale;
        let xv = values[self.x.0].view().into_dimensionality::<Ix1>().unwrap();
        let (h, w) = (self.h, self.w);
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        let mut dx = slot.view_mut().into_dimensionality::<Ix1>().unwrap();
        for i in 0..h {
            for j in 0..w {
                let v = xv[i * w + j];
                let gx = if j + 1 < w { xv[i * w + j + 1] - v } else { T::zero() };
                let gy = if i + 1 < h { xv[(i + 1) * w + j] - v } else { T::zero() };
                let t = (gx * gx + gy * gy + self.eps).sqrt();
                let c = go / t;
                if j + 1 < w {
                    dx[i * w + j + 1] += c * gx;
                    dx[i * w + j] -= c * gx;
                }
                if i + 1 < h {
                    dx[(i + 1) * w + j] += c * gy;
                    dx[i * w + j] -= c * gy;
                }
            }
        }
    }
}

struct MeanBack<T: Real> {
    x: NodeId,
    inv: T,
}

impl<T: Real> Backward<T> for MeanBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let go = *grad.first().unwrap() * self.inv;
        let shape = values[self.x.0].shape().to_vec();
        let slot = grads.slot_mut(self.x, &shape);
        slot.mapv_inplace(|v| v + go);
    }
}

struct LinCombBack<T: Real> {
    terms: Vec<(NodeId, T)>,
}

impl<T: Real> Backward<T> for LinCombBack<T> {
    fn apply(&self, grad: &ArrayD<T>, _values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let go = *grad.first().unwrap();
        for (id, c) in &self.terms {
            let slot = grads.slot_mut(*id, &[]);
            *slot.first_mut().unwrap() += go * *c;
        }
    }
}

struct EntropyBack<T: Real> {
    probs: NodeId,
    eps: T,
    inv: T,
}

impl<T: Real> Backward<T> for EntropyBack<T> {
    fn apply(&self, grad: &ArrayD<T>, values: &[ArrayD<T>], grads: &mut Grads<T>) {
        let go = *grad.first().unwrap();
        let pv = values[self.probs.0].view().into_dimensionality::<Ix2>().unwrap();
        let shape = values[self.probs.0].shape().to_vec();
        let slot = grads.slot_mut(self.probs, &shape);
        let mut dp = slot.view_mut().into_dimensionality::<Ix2>().unwrap();
        for i in 0..pv.shape()[0] {
            for k in 0..pv.shape()[1] {
                let p = pv[[i, k]];
                let pc = p.max(self.eps);
                let mut d = pc.ln();
                if p >= self.eps {
                    d += T::one();
                }
                dp[[i, k]] -= go * self.inv * d;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use ndarray::{arr1, arr2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Uniform away from zero, for ops with kinks at zero.
    fn rand_array_offset(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let v = rng.random::<f64>() * 0.8 + 0.2;
            if rng.random::<f64>() < 0.5 {
                -v
            } else {
                v
            }
        })
    }

    fn naive_conv(
        x: &ndarray::Array3<f64>,
        w: &Array4<f64>,
        b: &Array1<f64>,
        stride: usize,
    ) -> ndarray::Array3<f64> {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = w.shape()[0];
        let ho = (h - 1) / stride + 1;
        let wo = (wd - 1) / stride + 1;
        let mut out = ndarray::Array3::<f64>::zeros((c_out, ho, wo));
        for co in 0..c_out {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..c_in {
                        for di in 0..3usize {
                            for dj in 0..3usize {
                                let si = (i * stride + di) as isize - 1;
                                let sj = (j * stride + dj) as isize - 1;
                                if si >= 0 && si < h as isize && sj >= 0 && sj < wd as isize {
                                    acc += x[[ci, si as usize, sj as usize]]
                                        * w[[co, ci, di, dj]];
                                }
                            }
                        }
                    }
                    out[[co, i, j]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive_loop() {
        let mut r = rng(11);
        for &stride in &[1usize, 2] {
            let x = rand_array(&[2, 5, 6], &mut r);
            let w = rand_array(&[3, 2, 3, 3], &mut r);
            let b = rand_array(&[3], &mut r);
            let mut t = Tape::<f64>::new();
            let xn = t.leaf(x.clone());
            let wn = t.leaf(w.clone());
            let bn = t.leaf(b.clone());
            let out = t.conv2d(xn, wn, bn, stride);
            let expect = naive_conv(
                &x.into_dimensionality().unwrap(),
                &w.into_dimensionality().unwrap(),
                &b.into_dimensionality().unwrap(),
                stride,
            );
            let got = t.value(out).view().into_dimensionality::<Ix3>().unwrap();
            assert_eq!(got.shape(), expect.shape());
            for (a, b) in got.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng(12);
        for &stride in &[1usize, 2] {
            let inputs =
                vec![rand_array(&[2, 5, 5], &mut r), rand_array(&[3, 2, 3, 3], &mut r), rand_array(&[3], &mut r)];
            let mut t = Tape::<f64>::new();
            let xn = t.leaf(inputs[0].clone());
            let wn = t.leaf(inputs[1].clone());
            let bn = t.leaf(inputs[2].clone());
            let out = t.conv2d(xn, wn, bn, stride);
            let loss = t.mean_all(out);
            let grads = t.backward(loss);
            let analytic = vec![
                Some(grads.get(xn).unwrap().clone()),
                Some(grads.get(wn).unwrap().clone()),
                Some(grads.get(bn).unwrap().clone()),
            ];
            let mut f = |inp: &[ArrayD<f64>]| {
                let mut t = Tape::<f64>::new();
                let xn = t.leaf(inp[0].clone());
                let wn = t.leaf(inp[1].clone());
                let bn = t.leaf(inp[2].clone());
                let out = t.conv2d(xn, wn, bn, stride);
                let loss = t.mean_all(out);
                t.scalar_value(loss)
            };
            check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-7, 1e-10, None).unwrap();
        }
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut r = rng(13);
        let inputs = vec![rand_array_offset(&[4, 5], &mut r)];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(inputs[0].clone());
        let y = t.relu(x);
        let loss = t.mean_all(y);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(x).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inp[0].clone());
            let y = t.relu(x);
            let loss = t.mean_all(y);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-9, 1e-12, None).unwrap();
    }

    #[test]
    fn chw_to_rows_layout_and_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            ndarray::Array3::from_shape_fn((2, 2, 3), |(c, i, j)| (c * 100 + i * 10 + j) as f64)
                .into_dyn(),
        );
        let rows = t.chw_to_rows(x);
        let v = t.value(rows).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(v.shape(), &[6, 2]);
        // pixel (i=1, j=2) is row 5; channel 1 value is 112
        assert_eq!(v[[5, 0]], 12.0);
        assert_eq!(v[[5, 1]], 112.0);

        let mut r = rng(14);
        let inputs = vec![rand_array(&[3, 4, 2], &mut r)];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(inputs[0].clone());
        let rows = t.chw_to_rows(x);
        let sq = t.matmul_nt(rows, rows);
        let loss = t.mean_all(sq);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(x).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inp[0].clone());
            let rows = t.chw_to_rows(x);
            let sq = t.matmul_nt(rows, rows);
            let loss = t.mean_all(sq);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-8, 1e-10, None).unwrap();
    }

    #[test]
    fn concat_stack_weighted_sum_gradients() {
        let mut r = rng(15);
        let inputs = vec![rand_array(&[3, 4], &mut r), rand_array(&[2, 4], &mut r)];
        let build = |t: &mut Tape<f64>, a: NodeId, b: NodeId| {
            let cat = t.concat_rows(&[a, b]);
            let v1 = t.rows_weighted_sum(cat, vec![0, 2, 4], vec![0.5, 0.25, 0.25]);
            let v2 = t.rows_weighted_sum(cat, vec![1, 3], vec![0.7, 0.3]);
            let m = t.stack_rows(&[v1, v2]);
            let sim = t.matmul_nt(m, m);
            t.mean_all(sim)
        };
        let mut t = Tape::<f64>::new();
        let a = t.leaf(inputs[0].clone());
        let b = t.leaf(inputs[1].clone());
        let loss = build(&mut t, a, b);
        let grads = t.backward(loss);
        let analytic =
            vec![Some(grads.get(a).unwrap().clone()), Some(grads.get(b).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(inp[0].clone());
            let b = t.leaf(inp[1].clone());
            let loss = build(&mut t, a, b);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-8, 1e-10, None).unwrap();
    }

    #[test]
    fn normalize_rows_unit_norm_and_gradient() {
        let mut r = rng(16);
        let inputs = vec![rand_array_offset(&[4, 3], &mut r)];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(inputs[0].clone());
        let y = t.normalize_rows(x);
        for row in t.value(y).view().into_dimensionality::<Ix2>().unwrap().rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let probe = t.constant(rand_array(&[4, 3], &mut r));
        let stretched = t.add(y, probe);
        let sim = t.matmul_nt(stretched, stretched);
        let loss = t.mean_all(sim);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(x).unwrap().clone())];
        let probe_vals = t.value(probe).clone();
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inp[0].clone());
            let y = t.normalize_rows(x);
            let probe = t.constant(probe_vals.clone());
            let stretched = t.add(y, probe);
            let sim = t.matmul_nt(stretched, stretched);
            let loss = t.mean_all(sim);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-7, 1e-10, None).unwrap();
    }

    #[test]
    fn normalize_rows_zero_row_maps_to_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[0.0, 0.0], [3.0, 4.0]]).into_dyn());
        let y = t.normalize_rows(x);
        let v = t.value(y).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(v[[0, 0]], 0.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] - 0.6).abs() < 1e-12);
        assert!((v[[1, 1]] - 0.8).abs() < 1e-12);
        let loss = t.mean_all(y);
        let grads = t.backward(loss);
        let g = grads.get(x).unwrap();
        assert_eq!(g[[0, 0]], 0.0);
    }

    #[test]
    fn matmul_nt_matches_dot_and_gradient() {
        let mut r = rng(17);
        let inputs = vec![rand_array(&[3, 4], &mut r), rand_array(&[5, 4], &mut r)];
        let mut t = Tape::<f64>::new();
        let a = t.leaf(inputs[0].clone());
        let b = t.leaf(inputs[1].clone());
        let c = t.matmul_nt(a, b);
        let av = inputs[0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = inputs[1].view().into_dimensionality::<Ix2>().unwrap();
        let expect = av.dot(&bv.t());
        let got = t.value(c).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert!(got.iter().zip(expect.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
        let loss = t.mean_all(c);
        let grads = t.backward(loss);
        let analytic =
            vec![Some(grads.get(a).unwrap().clone()), Some(grads.get(b).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let a = t.leaf(inp[0].clone());
            let b = t.leaf(inp[1].clone());
            let c = t.matmul_nt(a, b);
            let loss = t.mean_all(c);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-8, 1e-10, None).unwrap();
    }

    #[test]
    fn group_max_selects_and_routes_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[1.0, 5.0, 3.0, 2.0], [7.0, 1.0, 0.0, 9.0]]).into_dyn());
        let m = t.group_max_cols(x, 2);
        let v = t.value(m).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(v, arr2(&[[5.0, 3.0], [7.0, 9.0]]));
        let loss = t.mean_all(m);
        let grads = t.backward(loss);
        let g = grads.get(x).unwrap().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(g, arr2(&[[0.0, 0.25, 0.25, 0.0], [0.25, 0.0, 0.0, 0.25]]));
    }

    #[test]
    fn group_max_tie_takes_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[2.0, 2.0, 1.0, 1.0]]).into_dyn());
        let m = t.group_max_cols(x, 4);
        let loss = t.mean_all(m);
        let grads = t.backward(loss);
        let g = grads.get(x).unwrap().view().into_dimensionality::<Ix2>().unwrap().to_owned();
        assert_eq!(g, arr2(&[[1.0, 0.0, 0.0, 0.0]]));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_gradient() {
        let mut r = rng(18);
        let inputs = vec![rand_array(&[5, 3], &mut r)];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(inputs[0].clone());
        let y = t.softmax_rows(x);
        for row in t.value(y).view().into_dimensionality::<Ix2>().unwrap().rows() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let w = t.constant(rand_array(&[5, 3], &mut r));
        let prod = t.add(y, w);
        let sq = t.matmul_nt(prod, prod);
        let loss = t.mean_all(sq);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(x).unwrap().clone())];
        let wv = t.value(w).clone();
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inp[0].clone());
            let y = t.softmax_rows(x);
            let w = t.constant(wv.clone());
            let prod = t.add(y, w);
            let sq = t.matmul_nt(prod, prod);
            let loss = t.mean_all(sq);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-7, 1e-10, None).unwrap();
    }

    #[test]
    fn masked_nll_value_and_gradient() {
        // Two labeled rows and one ignored; hand value.
        let probs = arr2(&[[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]).into_dyn();
        let labels = vec![0u8, 1, 255];
        let mut t = Tape::<f64>::new();
        let p = t.leaf(probs.clone());
        let loss = t.masked_nll(p, labels.clone(), 255, 0.25, 1e-8);
        let expect = -0.25 * (0.7f64.ln() + 0.8f64.ln());
        assert!((t.scalar_value(loss) - expect).abs() < 1e-12);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(p).unwrap().clone())];
        let inputs = vec![probs];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let p = t.leaf(inp[0].clone());
            let loss = t.masked_nll(p, labels.clone(), 255, 0.25, 1e-8);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-9, 1e-12, None).unwrap();
    }

    #[test]
    fn select_sum_cols_gradient() {
        let mut r = rng(19);
        let inputs = vec![rand_array(&[4, 3], &mut r)];
        let mut t = Tape::<f64>::new();
        let x = t.leaf(inputs[0].clone());
        let s = t.select_sum_cols(x, 1, 3);
        let loss = t.mean_all(s);
        let grads = t.backward(loss);
        let analytic = vec![Some(grads.get(x).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inp[0].clone());
            let s = t.select_sum_cols(x, 1, 3);
            let loss = t.mean_all(s);
            t.scalar_value(loss)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-9, 1e-12, None).unwrap();
    }

    #[test]
    fn boundary_gradient_on_smooth_map() {
        let mut r = rng(20);
        let inputs = vec![rand_array(&[12], &mut r)];
        for &mean in &[true, false] {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(inputs[0].clone());
            let loss = t.boundary(x, 3, 4, 1e-8, mean);
            let grads = t.backward(loss);
            let analytic = vec![Some(grads.get(x).unwrap().clone())];
            let mut f = |inp: &[ArrayD<f64>]| {
                let mut t = Tape::<f64>::new();
                let x = t.leaf(inp[0].clone());
                let loss = t.boundary(x, 3, 4, 1e-8, mean);
                t.scalar_value(loss)
            };
            check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-7, 1e-10, None).unwrap();
        }
    }

    #[test]
    fn entropy_mean_uniform_is_ln_k_and_gradient() {
        let mut t = Tape::<f64>::new();
        let p = t.leaf(arr2(&[[0.25; 4], [0.25; 4]]).into_dyn());
        let h = t.entropy_mean(p, 1e-8);
        assert!((t.scalar_value(h) - 4.0f64.ln()).abs() < 1e-12);

        let probs = arr2(&[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]]).into_dyn();
        let inputs = vec![probs];
        let mut t = Tape::<f64>::new();
        let p = t.leaf(inputs[0].clone());
        let h = t.entropy_mean(p, 1e-8);
        let grads = t.backward(h);
        let analytic = vec![Some(grads.get(p).unwrap().clone())];
        let mut f = |inp: &[ArrayD<f64>]| {
            let mut t = Tape::<f64>::new();
            let p = t.leaf(inp[0].clone());
            let h = t.entropy_mean(p, 1e-8);
            t.scalar_value(h)
        };
        check_gradients(&mut f, &inputs, &analytic, 1e-6, 1e-9, 1e-12, None).unwrap();
    }

    #[test]
    fn linear_comb_and_shared_node_accumulation() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[]), 3.0));
        let double = t.add(x, x);
        let loss = t.linear_comb(&[(double, 0.5), (x, 2.0)], 1.0);
        assert!((t.scalar_value(loss) - (0.5 * 6.0 + 2.0 * 3.0 + 1.0)).abs() < 1e-12);
        let grads = t.backward(loss);
        // d/dx (0.5 * 2x + 2x + 1) = 3
        assert!((grads.get(x).unwrap().first().unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn no_grad_tape_produces_same_values() {
        let mut r = rng(21);
        let x = rand_array(&[2, 6, 6], &mut r);
        let w = rand_array(&[4, 2, 3, 3], &mut r);
        let b = rand_array(&[4], &mut r);
        let run = |t: &mut Tape<f64>| {
            let xn = t.leaf(x.clone());
            let wn = t.leaf(w.clone());
            let bn = t.leaf(b.clone());
            let c = t.conv2d(xn, wn, bn, 2);
            let a = t.relu(c);
            let rows = t.chw_to_rows(a);
            let nrm = t.normalize_rows(rows);
            let sim = t.matmul_nt(nrm, nrm);
            let loss = t.mean_all(sim);
            t.scalar_value(loss)
        };
        let mut with = Tape::<f64>::new();
        let mut without = Tape::<f64>::no_grad();
        let a = run(&mut with);
        let b2 = run(&mut without);
        assert_eq!(a.to_bits(), b2.to_bits());
    }

    #[test]
    fn boundary_half_plane_sum_value() {
        // Left half ones, right half zeros on 4x4: four unit steps.
        let mut vals = vec![0.0f64; 16];
        for i in 0..4 {
            vals[i * 4] = 1.0;
            vals[i * 4 + 1] = 1.0;
        }
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[16]), vals).unwrap());
        let loss = t.boundary(x, 4, 4, 1e-8, false);
        assert!((t.scalar_value(loss) - 4.0).abs() < 2e-3);
    }

    #[test]
    fn arr1_helper_used() {
        // Arrays of rank 1 flow through rows_weighted_sum as expected.
        let mut t = Tape::<f64>::new();
        let x = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let v = t.rows_weighted_sum(x, vec![0, 1], vec![0.5, 0.5]);
        let got = t.value(v).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        assert_eq!(got, arr1(&[2.0, 3.0]));
    }
}
