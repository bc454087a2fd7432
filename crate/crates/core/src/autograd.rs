//! Reverse-mode differentiation over a recorded operation graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves created with
//! [`Graph::param`] receive gradients; leaves created with [`Graph::input`]
//! are constants, and any subgraph that depends only on constants is skipped
//! during the backward sweep.

use crate::error::{shape_err, Result};
use crate::kernels::{self, Window3};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window3,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    AxisMean {
        x: Var,
        keep: usize,
    },
    CoordGate {
        x: Var,
        gd: Var,
        gh: Var,
        gw: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    Resize {
        x: Var,
        src: [usize; 2],
    },
    Add(Var, Var),
    Scale(Var, T),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GroupMean {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    CosineMatrix {
        q: Var,
        p: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Triplet {
        a: Var,
        p: Var,
        n: Var,
        alpha: T,
    },
    SumSquares(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation tape. Values are computed eagerly as nodes are added.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn dims5(s: &[usize]) -> Result<[usize; 5]> {
    if s.len() != 5 {
        return shape_err(format!("expected a 5-d activation, got {:?}", s));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window3) -> Result<Var> {
        let xs = dims5(self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 || ws[1] != xs[1] || ws[2..] != win.kernel[..] {
            return shape_err(format!("conv3d weight {:?} for input {:?}", ws, xs));
        }
        if win.output_dims([xs[2], xs[3], xs[4]]).is_none() {
            return shape_err(format!("conv3d window {:?} does not fit {:?}", win, xs));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err("conv3d bias length");
            }
        }
        let (y, od) = kernels::conv3d_forward(
            self.value(x).data(),
            xs,
            self.value(w).data(),
            ws[0],
            b.map(|b| self.value(b).data()),
            &win,
        );
        let value = Tensor::from_vec(&[xs[0], ws[0], od[0], od[1], od[2]], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(value, Op::Conv3d { x, w, b, win }, tracked))
    }

    pub fn max_pool3d(&mut self, x: Var, win: Window3) -> Result<Var> {
        let xs = dims5(self.shape(x))?;
        if win.output_dims([xs[2], xs[3], xs[4]]).is_none() {
            return shape_err(format!("pool window {:?} does not fit {:?}", win, xs));
        }
        let (y, od, argmax) = kernels::maxpool3d_forward(self.value(x).data(), xs, &win);
        let value = Tensor::from_vec(&[xs[0], xs[1], od[0], od[1], od[2]], y)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::MaxPool3d { x, argmax }, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() || v.is_nan() { v } else { T::zero() });
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Sigmoid(x), tracked)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let tracked = self.tracked(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).narrow(axis, start, len)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Mean over all spatial axes of `(N, C, D, H, W)` except `keep`.
    pub fn axis_mean(&mut self, x: Var, keep: usize) -> Result<Var> {
        let xs = dims5(self.shape(x))?;
        if !(2..=4).contains(&keep) {
            return shape_err(format!("axis_mean keeps a spatial axis, got {}", keep));
        }
        let y = kernels::axis_mean(self.value(x).data(), xs, keep);
        let value = Tensor::from_vec(&[xs[0], xs[1], xs[keep]], y)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::AxisMean { x, keep }, tracked))
    }

    /// Multiplies `x` by the outer product of three positional gates.
    pub fn coord_gate(&mut self, x: Var, gd: Var, gh: Var, gw: Var) -> Result<Var> {
        let xs = dims5(self.shape(x))?;
        for (g, axis) in [(gd, 2), (gh, 3), (gw, 4)] {
            if self.shape(g) != [xs[0], xs[1], xs[axis]] {
                return shape_err(format!("gate {:?} for input {:?}", self.shape(g), xs));
            }
        }
        let y = kernels::coord_gate(
            self.value(x).data(),
            xs,
            self.value(gd).data(),
            self.value(gh).data(),
            self.value(gw).data(),
        );
        let value = Tensor::from_vec(&xs, y)?;
        let tracked = self.tracked(&[x, gd, gh, gw]);
        Ok(self.push(value, Op::CoordGate { x, gd, gh, gw }, tracked))
    }

    /// `y = x · Wᵀ + b` for `x: (N, F)`, `W: (O, F)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear {:?} x {:?}", xs, ws));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * o];
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x).data(),
            (f as isize, 1),
            self.value(w).data(),
            (1, f as isize),
            T::zero(),
            &mut y,
            (o as isize, 1),
        );
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return shape_err("linear bias length");
            }
            let bv = self.value(b).data();
            for row in y.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(a, &c)| *a += c);
            }
        }
        let value = Tensor::from_vec(&[n, o], y)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let tracked = self.tracked(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    /// Per-channel `x · scale[c] + shift[c]` on axis 1 with fixed coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || xs[1] != scale.len() || xs[1] != shift.len() {
            return shape_err(format!("channel affine over {:?}", xs));
        }
        let inner: usize = xs[2..].iter().product();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(inner).enumerate() {
            let c = i % xs[1];
            chunk.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            tracked,
        ))
    }

    /// Bilinear resize of the trailing two axes.
    pub fn resize(&mut self, x: Var, dst: [usize; 2]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("resize needs at least two axes");
        }
        let src = [xs[xs.len() - 2], xs[xs.len() - 1]];
        let slices = xs[..xs.len() - 2].iter().product();
        let y = kernels::resize_bilinear(self.value(x).data(), slices, src, dst);
        let mut shape = xs.clone();
        let k = shape.len();
        shape[k - 2] = dst[0];
        shape[k - 1] = dst[1];
        let value = Tensor::from_vec(&shape, y)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(value, Op::Resize { x, src }, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).scale(s);
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Scale(x, s), tracked)
    }

    /// Gathers entries of the leading axis.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let n = src.dim(0);
        let inner = src.len() / n.max(1);
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return shape_err(format!("row {} of {}", r, n));
            }
            data.extend_from_slice(&src.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::from_vec(&shape, data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean of the rows of `x: (M, E)` listed in each group, giving `(G, E)`.
    /// Rows are accumulated in ascending list order.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let src = self.value(x);
        if src.ndim() != 2 {
            return shape_err("group_mean expects (M, E)");
        }
        let (m, e) = (src.dim(0), src.dim(1));
        let mut data = vec![T::zero(); groups.len() * e];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return shape_err(format!("group {} is empty", g));
            }
            let dst = &mut data[g * e..(g + 1) * e];
            for &r in rows {
                if r >= m {
                    return shape_err(format!("row {} of {}", r, m));
                }
                dst.iter_mut()
                    .zip(&src.data()[r * e..(r + 1) * e])
                    .for_each(|(a, &b)| *a += b);
            }
            let inv = T::one() / T::from_usize_lossy(rows.len());
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_vec(&[groups.len(), e], data)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            value,
            Op::GroupMean {
                x,
                groups: groups.to_vec(),
            },
            tracked,
        ))
    }

    /// Cosine similarity between every row of `q: (M, E)` and `p: (G, E)`.
    pub fn cosine_matrix(&mut self, q: Var, p: Var) -> Result<Var> {
        let (qv, pv) = (self.value(q), self.value(p));
        if qv.ndim() != 2 || pv.ndim() != 2 || qv.dim(1) != pv.dim(1) {
            return shape_err(format!("cosine {:?} vs {:?}", qv.shape(), pv.shape()));
        }
        let (m, g, e) = (qv.dim(0), pv.dim(0), qv.dim(1));
        let qn = row_norms(qv.data(), e);
        let pn = row_norms(pv.data(), e);
        if qn.iter().chain(&pn).any(|&n| n == T::zero()) {
            return Err(crate::error::Error::InvalidArgument(
                "cosine similarity of a zero vector".into(),
            ));
        }
        let mut data = Vec::with_capacity(m * g);
        for i in 0..m {
            let qi = &qv.data()[i * e..(i + 1) * e];
            for j in 0..g {
                let pj = &pv.data()[j * e..(j + 1) * e];
                data.push(dot(qi, pj) / (qn[i] * pn[j]));
            }
        }
        let value = Tensor::from_vec(&[m, g], data)?;
        let tracked = self.tracked(&[q, p]);
        Ok(self.push(value, Op::CosineMatrix { q, p }, tracked))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.dim(0) != labels.len() {
            return shape_err(format!(
                "cross entropy logits {:?} for {} labels",
                lv.shape(),
                labels.len()
            ));
        }
        let (m, c) = (lv.dim(0), lv.dim(1));
        let mut probs = Vec::with_capacity(m * c);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return shape_err(format!("label {} of {} classes", y, c));
            }
            let row = softmax(&lv.data()[i * c..(i + 1) * c]);
            loss -= row[y].max(T::of(1e-12)).ln();
            probs.extend(row);
        }
        let value = Tensor::scalar(loss / T::from_usize_lossy(m.max(1)));
        let tracked = self.tracked(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            tracked,
        ))
    }

    /// `Σ_rows max(‖a−p‖² − ‖a−n‖² + alpha, 0)` over `(B, E)` embeddings.
    pub fn triplet(&mut self, a: Var, p: Var, n: Var, alpha: T) -> Result<Var> {
        let (av, pv, nv) = (self.value(a), self.value(p), self.value(n));
        if av.shape() != pv.shape() || av.shape() != nv.shape() || av.ndim() != 2 {
            return shape_err("triplet embeddings must share a (B, E) shape");
        }
        let e = av.dim(1);
        let mut loss = T::zero();
        for r in 0..av.dim(0) {
            let s = r * e..(r + 1) * e;
            let dp = sq_dist(&av.data()[s.clone()], &pv.data()[s.clone()]);
            let dn = sq_dist(&av.data()[s.clone()], &nv.data()[s]);
            let h = dp - dn + alpha;
            if h > T::zero() || h.is_nan() {
                loss += h;
            }
        }
        let value = Tensor::scalar(loss);
        let tracked = self.tracked(&[a, p, n]);
        Ok(self.push(value, Op::Triplet { a, p, n, alpha }, tracked))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum_sq());
        let tracked = self.tracked(&[x]);
        self.push(value, Op::SumSquares(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / T::from_usize_lossy(v.len().max(1)));
        let tracked = self.tracked(&[x]);
        self.push(value, Op::Mean(x), tracked)
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return shape_err("backward needs a scalar root");
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            for (v, gv) in self.node_backward(node, &g)? {
                if !self.nodes[v.0].tracked {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv),
                    slot => *slot = Some(gv),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, win } => {
                let xs = dims5(self.shape(*x))?;
                let wv = self.value(*w);
                let need_x = self.nodes[x.0].tracked;
                let (gx, gw, gb) = kernels::conv3d_backward(
                    self.value(*x).data(),
                    xs,
                    wv.data(),
                    wv.dim(0),
                    win,
                    g.data(),
                    need_x,
                );
                if let Some(gx) = gx {
                    out.push((*x, Tensor::from_vec(&xs, gx)?));
                }
                out.push((*w, Tensor::from_vec(wv.shape(), gw)?));
                if let Some(b) = b {
                    out.push((*b, Tensor::from_vec(&[wv.dim(0)], gb)?));
                }
            }
            Op::MaxPool3d { x, argmax } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let d = gx.data_mut();
                for (&i, &gv) in argmax.iter().zip(g.data()) {
                    d[i] += gv;
                }
                out.push((*x, gx));
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s))?;
                out.push((*x, gx));
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    out.push((p, g.narrow(*axis, start, len)?));
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let full = self.shape(*x).to_vec();
                let len = g.dim(*axis);
                let mut pieces = Vec::new();
                if *start > 0 {
                    let mut s = full.clone();
                    s[*axis] = *start;
                    pieces.push(Tensor::zeros(&s));
                }
                pieces.push(g.clone());
                let rest = full[*axis] - start - len;
                if rest > 0 {
                    let mut s = full.clone();
                    s[*axis] = rest;
                    pieces.push(Tensor::zeros(&s));
                }
                let refs: Vec<&Tensor<T>> = pieces.iter().collect();
                out.push((*x, Tensor::concat(&refs, *axis)?));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::AxisMean { x, keep } => {
                let xs = dims5(self.shape(*x))?;
                let gx = kernels::axis_mean_backward(g.data(), xs, *keep);
                out.push((*x, Tensor::from_vec(&xs, gx)?));
            }
            Op::CoordGate { x, gd, gh, gw } => {
                let xs = dims5(self.shape(*x))?;
                let (a, b, c, d) = kernels::coord_gate_backward(
                    self.value(*x).data(),
                    xs,
                    self.value(*gd).data(),
                    self.value(*gh).data(),
                    self.value(*gw).data(),
                    g.data(),
                );
                out.push((*x, Tensor::from_vec(&xs, a)?));
                out.push((*gd, Tensor::from_vec(self.shape(*gd), b)?));
                out.push((*gh, Tensor::from_vec(self.shape(*gh), c)?));
                out.push((*gw, Tensor::from_vec(self.shape(*gw), d)?));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, f, o) = (xv.dim(0), xv.dim(1), wv.dim(0));
                if self.nodes[x.0].tracked {
                    let mut gx = vec![T::zero(); n * f];
                    T::gemm(
                        n,
                        o,
                        f,
                        T::one(),
                        g.data(),
                        (o as isize, 1),
                        wv.data(),
                        (f as isize, 1),
                        T::zero(),
                        &mut gx,
                        (f as isize, 1),
                    );
                    out.push((*x, Tensor::from_vec(&[n, f], gx)?));
                }
                let mut gw = vec![T::zero(); o * f];
                T::gemm(
                    o,
                    n,
                    f,
                    T::one(),
                    g.data(),
                    (1, o as isize),
                    xv.data(),
                    (f as isize, 1),
                    T::zero(),
                    &mut gw,
                    (f as isize, 1),
                );
                out.push((*w, Tensor::from_vec(&[o, f], gw)?));
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, &c)| *a += c);
                    }
                    out.push((*b, Tensor::from_vec(&[o], gb)?));
                }
            }
            Op::ChannelAffine { x, scale } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let c = xs[1];
                let mut gx = g.clone();
                for (i, chunk) in gx.data_mut().chunks_mut(inner).enumerate() {
                    let s = scale[i % c];
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                out.push((*x, gx));
            }
            Op::Resize { x, src } => {
                let xs = self.shape(*x);
                let k = g.ndim();
                let dst = [g.dim(k - 2), g.dim(k - 1)];
                let slices = xs[..xs.len() - 2].iter().product();
                let gx = kernels::resize_bilinear_backward(g.data(), slices, *src, dst);
                out.push((*x, Tensor::from_vec(xs, gx)?));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(x, s) => out.push((*x, g.scale(*s))),
            Op::SelectRows { x, rows } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let inner = g.len() / rows.len().max(1);
                let d = gx.data_mut();
                for (k, &r) in rows.iter().enumerate() {
                    d[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                        .for_each(|(a, &b)| *a += b);
                }
                out.push((*x, gx));
            }
            Op::GroupMean { x, groups } => {
                let mut gx = Tensor::zeros(self.shape(*x));
                let e = g.dim(1);
                let d = gx.data_mut();
                for (k, rows) in groups.iter().enumerate() {
                    let inv = T::one() / T::from_usize_lossy(rows.len());
                    for &r in rows {
                        d[r * e..(r + 1) * e]
                            .iter_mut()
                            .zip(&g.data()[k * e..(k + 1) * e])
                            .for_each(|(a, &b)| *a += b * inv);
                    }
                }
                out.push((*x, gx));
            }
            Op::CosineMatrix { q, p } => {
                let (qv, pv) = (self.value(*q), self.value(*p));
                let (m, gn, e) = (qv.dim(0), pv.dim(0), qv.dim(1));
                let qn = row_norms(qv.data(), e);
                let pn = row_norms(pv.data(), e);
                let mut gq = vec![T::zero(); m * e];
                let mut gp = vec![T::zero(); gn * e];
                for i in 0..m {
                    let qi = &qv.data()[i * e..(i + 1) * e];
                    for j in 0..gn {
                        let gij = g.data()[i * gn + j];
                        if gij == T::zero() {
                            continue;
                        }
                        let pj = &pv.data()[j * e..(j + 1) * e];
                        let s = node.value.data()[i * gn + j];
                        let inv = T::one() / (qn[i] * pn[j]);
                        let sq = s / (qn[i] * qn[i]);
                        let sp = s / (pn[j] * pn[j]);
                        for k in 0..e {
                            gq[i * e + k] += gij * (pj[k] * inv - qi[k] * sq);
                            gp[j * e + k] += gij * (qi[k] * inv - pj[k] * sp);
                        }
                    }
                }
                out.push((*q, Tensor::from_vec(&[m, e], gq)?));
                out.push((*p, Tensor::from_vec(&[gn, e], gp)?));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.shape(*logits)[1];
                let m = labels.len();
                let scale = g.data()[0] / T::from_usize_lossy(m.max(1));
                let mut gl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * c + y] -= T::one();
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, Tensor::from_vec(&[m, c], gl)?));
            }
            Op::Triplet { a, p, n, alpha } => {
                let (av, pv, nv) = (self.value(*a), self.value(*p), self.value(*n));
                let e = av.dim(1);
                let gs = g.data()[0];
                let mut ga = vec![T::zero(); av.len()];
                let mut gp = vec![T::zero(); av.len()];
                let mut gn = vec![T::zero(); av.len()];
                let two = T::of(2.0);
                for r in 0..av.dim(0) {
                    let s = r * e..(r + 1) * e;
                    let (ar, pr, nr) = (&av.data()[s.clone()], &pv.data()[s.clone()], &nv.data()[s]);
                    // Zero subgradient at and below the hinge.
                    if sq_dist(ar, pr) - sq_dist(ar, nr) + *alpha <= T::zero() {
                        continue;
                    }
                    for k in 0..e {
                        let i = r * e + k;
                        ga[i] = gs * two * (nr[k] - pr[k]);
                        gp[i] = gs * two * (pr[k] - ar[k]);
                        gn[i] = gs * two * (ar[k] - nr[k]);
                    }
                }
                let shape = av.shape().to_vec();
                out.push((*a, Tensor::from_vec(&shape, ga)?));
                out.push((*p, Tensor::from_vec(&shape, gp)?));
                out.push((*n, Tensor::from_vec(&shape, gn)?));
            }
            Op::SumSquares(x) => {
                let gs = g.data()[0] * T::of(2.0);
                out.push((*x, self.value(*x).scale(gs)));
            }
            Op::Mean(x) => {
                let v = self.value(*x);
                let gs = g.data()[0] / T::from_usize_lossy(v.len().max(1));
                out.push((*x, Tensor::full(v.shape(), gs)));
            }
        }
        Ok(out)
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn row_norms<T: Scalar>(data: &[T], e: usize) -> Vec<T> {
    data.chunks(e).map(|r| dot(r, r).sqrt()).collect()
}

/// Max-shifted softmax of one row.
pub fn softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let ex: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = ex.iter().copied().sum();
    ex.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += eps;
            let mut m = x.clone();
            m.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{} vs {}", x, y);
        }
    }

    fn seq(shape: &[usize], k: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * k).sin())
    }

    #[test]
    fn cosine_matrix_gradient() {
        let q0 = seq(&[3, 4], 0.7);
        let p0 = seq(&[2, 4], 1.3);
        let f = |q: &Tensor<f64>| {
            let mut g = Graph::new();
            let qv = g.input(q.clone());
            let pv = g.input(p0.clone());
            let c = g.cosine_matrix(qv, pv).unwrap();
            g.value(c).sum_sq()
        };
        let mut g = Graph::new();
        let qv = g.param(q0.clone());
        let pv = g.param(p0.clone());
        let c = g.cosine_matrix(qv, pv).unwrap();
        let loss = g.sum_squares(c);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(qv).unwrap().clone();
        close(&analytic, &numeric_grad(&f, &q0), 1e-6);
    }

    #[test]
    fn cross_entropy_gradient() {
        let l0 = seq(&[4, 3], 0.9);
        let labels = [0, 2, 1, 1];
        let f = |l: &Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.input(l.clone());
            let c = g.cross_entropy(v, &labels).unwrap();
            g.value(c).data()[0]
        };
        let mut g = Graph::new();
        let v = g.param(l0.clone());
        let c = g.cross_entropy(v, &labels).unwrap();
        let grads = g.backward(c).unwrap();
        close(grads.get(v).unwrap(), &numeric_grad(&f, &l0), 1e-7);
    }

    #[test]
    fn coordinate_gate_gradient() {
        let x0 = seq(&[1, 2, 2, 3, 2], 0.31);
        let f = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let d = g.axis_mean(xv, 2).unwrap();
            let h = g.axis_mean(xv, 3).unwrap();
            let w = g.axis_mean(xv, 4).unwrap();
            let (d, h, w) = (g.sigmoid(d), g.sigmoid(h), g.sigmoid(w));
            let y = g.coord_gate(xv, d, h, w).unwrap();
            let s = g.sum_squares(y);
            g.value(s).data()[0]
        };
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let d = g.axis_mean(xv, 2).unwrap();
        let h = g.axis_mean(xv, 3).unwrap();
        let w = g.axis_mean(xv, 4).unwrap();
        let (d, h, w) = (g.sigmoid(d), g.sigmoid(h), g.sigmoid(w));
        let y = g.coord_gate(xv, d, h, w).unwrap();
        let s = g.sum_squares(y);
        let grads = g.backward(s).unwrap();
        close(grads.get(xv).unwrap(), &numeric_grad(&f, &x0), 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[2], 1.0));
        let w = g.param(Tensor::full(&[2], 3.0));
        let y = g.add(x, w).unwrap();
        let s = g.sum_squares(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get(w).unwrap().data(), &[8.0, 8.0]);
    }
}
