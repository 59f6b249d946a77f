//! Reverse-mode autodiff tape over `ndarray` tensors.
//!
//! A [`Tape`] owns a flat vector of nodes; every operation appends a node and
//! returns a [`Var`] handle. `backward` walks the tape in reverse and leaves
//! gradients on the nodes that requested them. Loss functions with awkward
//! index structure (per-class reductions, prototype softmax) are fused ops
//! with hand-derived adjoints; each one is validated against central finite
//! differences in the test suite.
//!
//! All math is `f64`: the oracle-equivalence and finite-difference gates in
//! the test suite run at tolerances that single precision cannot hold.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// (N,K) x (K,M)
    Matmul(Var, Var),
    /// (N,D) + (D,)
    AddBias2d(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatChannels(Var, Var),
    SliceChannels(Var, usize, usize),
    Reshape(Var),
    MeanAll(Var),
    /// Per-row renormalization of paired-real symbol frames to unit average
    /// complex power. `m` is the number of complex symbols per row.
    PowerNormalizeFrames(Var, usize),
    /// y[r] = scale[r] * x[r] + offset[r]; scale/offset are constants.
    RowAffine { x: Var, scale: Vec<f64> },
    /// Mean cross-entropy of softmax(logits) against integer labels.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
    },
    /// Prototype-softmax invariance loss, see `losses`.
    InvariantProto {
        z: Var,
        protos: Array2<f64>,
        rows: Vec<usize>,
    },
    /// Per-class hinge on the within-class standard deviation of z.
    VariantHinge {
        z: Var,
        rows: Vec<usize>,
        num_groups: usize,
        eps: f64,
    },
    /// Sum over classes of per-class mean of per-sample mean squared error.
    PerClassMse {
        xhat: Var,
        x: ArrayD<f64>,
        rows: Vec<usize>,
        num_groups: usize,
    },
    /// Sum over classes of per-class mean of diagonal-Gaussian KL
    /// (mu1,lv1) || (mu2,lv2), with the second distribution held constant.
    PerClassGaussKl {
        mu1: Var,
        lv1: Var,
        mu2: Array2<f64>,
        lv2: Array2<f64>,
        rows: Vec<usize>,
        num_groups: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
    grad: Option<ArrayD<f64>>,
}

/// Reverse-mode tape. Build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    /// Gradient left on a leaf (or any watched node) by `backward`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Re-enters a value as a constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.wants(a) || self.wants(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.wants(a) || self.wants(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.wants(a) || self.wants(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        let ng = self.wants(a);
        let _ = k;
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn mul_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        let ng = self.wants(a);
        self.push(v, Op::MulScalar(a, k), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        let ng = self.wants(a) || self.wants(b);
        self.push(v, Op::Matmul(a, b), ng)
    }

    pub fn add_bias2d(&mut self, x: Var, b: Var) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let v = (&xv + &bv).into_dyn();
        let ng = self.wants(x) || self.wants(b);
        self.push(v, Op::AddBias2d(x, b), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let out = conv2d_forward(&xv, &wv, &bv, stride, pad);
        let ng = self.wants(x) || self.wants(w) || self.wants(b);
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let v = xv[[ni, ci, i, j]];
                        out[[ni, ci, 2 * i, 2 * j]] = v;
                        out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                        out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                        out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                    }
                }
            }
        }
        let ng = self.wants(x);
        self.push(out.into_dyn(), Op::UpsampleNearest2x(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|a| a.max(0.0));
        let ng = self.wants(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|a| 1.0 / (1.0 + (-a).exp()));
        let ng = self.wants(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(f64::exp);
        let ng = self.wants(x);
        self.push(v, Op::Exp(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[x.0].value.mapv(|a| a.clamp(lo, hi));
        let ng = self.wants(x);
        self.push(v, Op::Clamp(x, lo, hi), ng)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = as4(&self.nodes[a.0].value);
        let bv = as4(&self.nodes[b.0].value);
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()])
            .unwrap()
            .as_standard_layout()
            .into_owned();
        let ng = self.wants(a) || self.wants(b);
        self.push(v.into_dyn(), Op::ConcatChannels(a, b), ng)
    }

    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value);
        let v = xv.slice(ndarray::s![.., from..to, .., ..]).to_owned();
        let ng = self.wants(x);
        self.push(v.into_dyn(), Op::SliceChannels(x, from, to), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let ng = self.wants(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let m = self.nodes[x.0].value.mean().unwrap();
        let ng = self.wants(x);
        self.push(scalar_arr(m), Op::MeanAll(x), ng)
    }

    pub fn power_normalize_frames(&mut self, x: Var, m: usize) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let p: f64 = row.iter().map(|v| v * v).sum();
            if p > 0.0 {
                let gamma = (m as f64 / p).sqrt();
                row.mapv_inplace(|v| v * gamma);
            }
        }
        let ng = self.wants(x);
        self.push(out.into_dyn(), Op::PowerNormalizeFrames(x, m), ng)
    }

    pub fn row_affine(&mut self, x: Var, scale: Vec<f64>, offset: Array2<f64>) -> Var {
        let xv = as2(&self.nodes[x.0].value);
        assert_eq!(xv.nrows(), scale.len());
        assert_eq!(xv.dim(), offset.dim());
        let mut out = offset.clone();
        for (r, row) in xv.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                out[[r, c]] += scale[r] * v;
            }
        }
        let ng = self.wants(x);
        self.push(out.into_dyn(), Op::RowAffine { x, scale }, ng)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = as2(&self.nodes[logits.0].value);
        let val = cross_entropy_value(&lv.to_owned(), labels);
        let ng = self.wants(logits);
        self.push(
            scalar_arr(val),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() },
            ng,
        )
    }

    /// `z`: (N,D) flattened invariant representations; `protos`: (P,D) one row
    /// per class present in the batch; `rows[i]`: prototype row of sample i.
    pub fn invariant_proto_loss(&mut self, z: Var, protos: Array2<f64>, rows: &[usize]) -> Var {
        let zv = as2(&self.nodes[z.0].value).to_owned();
        let val = invariant_proto_value(&zv, &protos, rows);
        let ng = self.wants(z);
        self.push(
            scalar_arr(val),
            Op::InvariantProto { z, protos, rows: rows.to_vec() },
            ng,
        )
    }

    /// `z`: (N,D); `rows[i]`: class-group index of sample i in `0..num_groups`.
    pub fn variant_hinge_loss(&mut self, z: Var, rows: &[usize], num_groups: usize, eps: f64) -> Var {
        let zv = as2(&self.nodes[z.0].value).to_owned();
        let val = variant_hinge_value(&zv, rows, num_groups, eps);
        let ng = self.wants(z);
        self.push(
            scalar_arr(val),
            Op::VariantHinge { z, rows: rows.to_vec(), num_groups, eps },
            ng,
        )
    }

    pub fn per_class_mse(&mut self, xhat: Var, x: ArrayD<f64>, rows: &[usize], num_groups: usize) -> Var {
        let xh = &self.nodes[xhat.0].value;
        assert_eq!(xh.shape(), x.shape());
        let val = per_class_mse_value(xh, &x, rows, num_groups);
        let ng = self.wants(xhat);
        self.push(
            scalar_arr(val),
            Op::PerClassMse { xhat, x, rows: rows.to_vec(), num_groups },
            ng,
        )
    }

    pub fn per_class_gauss_kl(
        &mut self,
        mu1: Var,
        lv1: Var,
        mu2: Array2<f64>,
        lv2: Array2<f64>,
        rows: &[usize],
        num_groups: usize,
    ) -> Var {
        let m1 = as2(&self.nodes[mu1.0].value).to_owned();
        let l1 = as2(&self.nodes[lv1.0].value).to_owned();
        let val = per_class_gauss_kl_value(&m1, &l1, &mu2, &lv2, rows, num_groups);
        let ng = self.wants(mu1) || self.wants(lv1);
        self.push(
            scalar_arr(val),
            Op::PerClassGaussKl { mu1, lv1, mu2, lv2, rows: rows.to_vec(), num_groups },
            ng,
        )
    }

    /// Accumulates `dL/dnode` for every node that needs a gradient, starting
    /// from scalar node `loss`.
    pub fn backward(&mut self, loss: Var) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward from non-scalar");
        self.nodes[loss.0].grad = Some(scalar_arr(1.0));

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            // Leaves keep their gradient for the caller; everything else is
            // consumed while propagating to parents.
            let g = match self.nodes[id].op {
                Op::Leaf => continue,
                _ => self.nodes[id].grad.take().unwrap(),
            };
            self.propagate(id, g);
        }
    }

    fn accumulate(&mut self, v: Var, delta: ArrayD<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, g: ArrayD<f64>) {
        // The op is moved out structurally via references; clone vars only.
        match &self.nodes[id].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, -g);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = &g * &self.nodes[b.0].value;
                let gb = &g * &self.nodes[a.0].value;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.accumulate(a, g);
            }
            Op::MulScalar(a, k) => {
                let (a, k) = (*a, *k);
                self.accumulate(a, g * k);
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let gm = as2(&g).to_owned();
                let av = as2(&self.nodes[a.0].value).to_owned();
                let bv = as2(&self.nodes[b.0].value).to_owned();
                self.accumulate(a, gm.dot(&bv.t()).into_dyn());
                self.accumulate(b, av.t().dot(&gm).into_dyn());
            }
            Op::AddBias2d(x, b) => {
                let (x, b) = (*x, *b);
                let gm = as2(&g).sum_axis(Axis(0));
                self.accumulate(x, g);
                self.accumulate(b, gm.into_dyn());
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                let xv = as4(&self.nodes[x.0].value).to_owned();
                let wv = as4(&self.nodes[w.0].value).to_owned();
                let gv = as4(&g).to_owned();
                let (gx, gw, gb) = conv2d_backward(&xv, &wv, &gv, stride, pad);
                self.accumulate(x, gx.into_dyn());
                self.accumulate(w, gw.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::UpsampleNearest2x(x) => {
                let x = *x;
                let gv = as4(&g);
                let (n, c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..h {
                            for j in 0..w {
                                gx[[ni, ci, i, j]] = gv[[ni, ci, 2 * i, 2 * j]]
                                    + gv[[ni, ci, 2 * i + 1, 2 * j]]
                                    + gv[[ni, ci, 2 * i, 2 * j + 1]]
                                    + gv[[ni, ci, 2 * i + 1, 2 * j + 1]];
                            }
                        }
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::Relu(x) => {
                let x = *x;
                let mask = self.nodes[x.0].value.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                self.accumulate(x, g * mask);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let y = &self.nodes[id].value;
                let dy = y * &(1.0 - y);
                self.accumulate(x, g * dy);
            }
            Op::Exp(x) => {
                let x = *x;
                let y = self.nodes[id].value.clone();
                self.accumulate(x, g * y);
            }
            Op::Clamp(x, lo, hi) => {
                let (x, lo, hi) = (*x, *lo, *hi);
                let mask = self.nodes[x.0]
                    .value
                    .mapv(|a| if a > lo && a < hi { 1.0 } else { 0.0 });
                self.accumulate(x, g * mask);
            }
            Op::ConcatChannels(a, b) => {
                let (a, b) = (*a, *b);
                let ca = self.nodes[a.0].value.shape()[1];
                let gv = as4(&g);
                let ga = gv.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
                let gb = gv.slice(ndarray::s![.., ca.., .., ..]).to_owned();
                self.accumulate(a, ga.into_dyn());
                self.accumulate(b, gb.into_dyn());
            }
            Op::SliceChannels(x, from, to) => {
                let (x, from, to) = (*x, *from, *to);
                let mut gx = ArrayD::<f64>::zeros(self.nodes[x.0].value.raw_dim());
                {
                    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    gx4.slice_mut(ndarray::s![.., from..to, .., ..]).assign(&as4(&g));
                }
                self.accumulate(x, gx);
            }
            Op::Reshape(x) => {
                let x = *x;
                let shape = self.nodes[x.0].value.raw_dim();
                let gx = g.into_shape_with_order(shape).unwrap();
                self.accumulate(x, gx);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let n = self.nodes[x.0].value.len() as f64;
                let gs = g.iter().next().copied().unwrap() / n;
                let gx = ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs);
                self.accumulate(x, gx);
            }
            Op::PowerNormalizeFrames(x, m) => {
                let (x, m) = (*x, *m);
                let xv = as2(&self.nodes[x.0].value).to_owned();
                let gv = as2(&g).to_owned();
                let mut gx = Array2::<f64>::zeros(xv.dim());
                for r in 0..xv.nrows() {
                    let row = xv.row(r);
                    let grow = gv.row(r);
                    let p: f64 = row.iter().map(|v| v * v).sum();
                    if p <= 0.0 {
                        continue;
                    }
                    let gamma = (m as f64 / p).sqrt();
                    let dot: f64 = grow.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..xv.ncols() {
                        gx[[r, c]] = gamma * grow[c] - (gamma / p) * dot * row[c];
                    }
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::RowAffine { x, scale } => {
                let x = *x;
                let scale = scale.clone();
                let gv = as2(&g).to_owned();
                let mut gx = gv;
                for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                    row.mapv_inplace(|v| v * scale[r]);
                }
                self.accumulate(x, gx.into_dyn());
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let logits = *logits;
                let labels = labels.clone();
                let lv = as2(&self.nodes[logits.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let n = lv.nrows() as f64;
                let mut gx = Array2::<f64>::zeros(lv.dim());
                for (i, row) in lv.rows().into_iter().enumerate() {
                    let p = softmax_row(row.as_slice().unwrap());
                    for (c, pv) in p.iter().enumerate() {
                        let onehot = if c == labels[i] { 1.0 } else { 0.0 };
                        gx[[i, c]] = gs * (pv - onehot) / n;
                    }
                }
                self.accumulate(logits, gx.into_dyn());
            }
            Op::InvariantProto { z, protos, rows } => {
                let z = *z;
                let protos = protos.clone();
                let rows = rows.clone();
                let zv = as2(&self.nodes[z.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let gz = invariant_proto_grad(&zv, &protos, &rows);
                self.accumulate(z, (gz * gs).into_dyn());
            }
            Op::VariantHinge { z, rows, num_groups, eps } => {
                let (z, num_groups, eps) = (*z, *num_groups, *eps);
                let rows = rows.clone();
                let zv = as2(&self.nodes[z.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let gz = variant_hinge_grad(&zv, &rows, num_groups, eps);
                self.accumulate(z, (gz * gs).into_dyn());
            }
            Op::PerClassMse { xhat, x, rows, num_groups } => {
                let xhat = *xhat;
                let num_groups = *num_groups;
                let x = x.clone();
                let rows = rows.clone();
                let xh = self.nodes[xhat.0].value.clone();
                let gs = g.iter().next().copied().unwrap();
                let counts = group_counts(&rows, num_groups);
                let dpix: f64 = xh.len() as f64 / xh.shape()[0] as f64;
                let mut gx = &xh - &x;
                let n = xh.shape()[0];
                let per = xh.len() / n;
                let flat = gx.as_slice_mut().unwrap();
                for (i, &r) in rows.iter().enumerate() {
                    let w = gs * 2.0 / (counts[r] as f64 * dpix);
                    for v in flat[i * per..(i + 1) * per].iter_mut() {
                        *v *= w;
                    }
                }
                self.accumulate(xhat, gx);
            }
            Op::PerClassGaussKl { mu1, lv1, mu2, lv2, rows, num_groups } => {
                let (mu1, lv1, num_groups) = (*mu1, *lv1, *num_groups);
                let mu2 = mu2.clone();
                let lv2 = lv2.clone();
                let rows = rows.clone();
                let m1 = as2(&self.nodes[mu1.0].value).to_owned();
                let l1 = as2(&self.nodes[lv1.0].value).to_owned();
                let gs = g.iter().next().copied().unwrap();
                let counts = group_counts(&rows, num_groups);
                let mut gmu = Array2::<f64>::zeros(m1.dim());
                let mut glv = Array2::<f64>::zeros(l1.dim());
                for i in 0..m1.nrows() {
                    let w = gs / counts[rows[i]] as f64;
                    for d in 0..m1.ncols() {
                        let inv_v2 = (-lv2[[i, d]]).exp();
                        gmu[[i, d]] = w * (m1[[i, d]] - mu2[[i, d]]) * inv_v2;
                        glv[[i, d]] = w * (-0.5 + 0.5 * (l1[[i, d]]).exp() * inv_v2);
                    }
                }
                self.accumulate(mu1, gmu.into_dyn());
                self.accumulate(lv1, glv.into_dyn());
            }
        }
    }
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected rank-2 tensor")
}

fn as4(a: &ArrayD<f64>) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected rank-4 tensor")
}

pub fn scalar_arr(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn group_counts(rows: &[usize], num_groups: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_groups];
    for &r in rows {
        counts[r] += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// convolution kernels
// ---------------------------------------------------------------------------

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Lowers (N,C,H,W) to a (C*k*k, N*Ho*Wo) patch matrix. The transposed
/// layout lets each (channel, kernel-offset) row be filled with contiguous
/// or strided slice copies instead of per-element indexing.
fn im2col_t(x: &ndarray::ArrayView4<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * k * k, n * ho * wo));
    let xs = x.as_standard_layout();
    let xflat = xs.as_slice().unwrap();
    let cflat = cols.as_slice_mut().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = ci * k * k + ki * k + kj;
                let out_base = r * row_len;
                for ni in 0..n {
                    let img_base = (ni * c + ci) * h * w;
                    for oi in 0..ho {
                        let src_i = (oi * stride + ki) as isize - pad as isize;
                        if src_i < 0 || src_i as usize >= h {
                            continue;
                        }
                        let src_row = img_base + src_i as usize * w;
                        let dst = out_base + ni * ho * wo + oi * wo;
                        if stride == 1 {
                            // src_j = oj + kj - pad, clipped to [0, w)
                            let oj0 = pad.saturating_sub(kj);
                            let oj1 = (w + pad - kj).min(wo);
                            if oj0 < oj1 {
                                let sj0 = oj0 + kj - pad;
                                cflat[dst + oj0..dst + oj1]
                                    .copy_from_slice(&xflat[src_row + sj0..src_row + sj0 + (oj1 - oj0)]);
                            }
                        } else {
                            for oj in 0..wo {
                                let src_j = (oj * stride + kj) as isize - pad as isize;
                                if src_j >= 0 && (src_j as usize) < w {
                                    cflat[dst + oj] = xflat[src_row + src_j as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col_t`]: scatter-adds patch rows back into (N,C,H,W).
#[allow(clippy::too_many_arguments)]
fn col2im_t(
    cols: &Array2<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(w, k, stride, pad);
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    let oflat = out.as_slice_mut().unwrap();
    let cstd = cols.as_standard_layout();
    let cflat = cstd.as_slice().unwrap();
    let row_len = n * ho * wo;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = ci * k * k + ki * k + kj;
                let in_base = r * row_len;
                for ni in 0..n {
                    let img_base = (ni * c + ci) * h * w;
                    for oi in 0..ho {
                        let src_i = (oi * stride + ki) as isize - pad as isize;
                        if src_i < 0 || src_i as usize >= h {
                            continue;
                        }
                        let dst_row = img_base + src_i as usize * w;
                        let src = in_base + ni * ho * wo + oi * wo;
                        if stride == 1 {
                            let oj0 = pad.saturating_sub(kj);
                            let oj1 = (w + pad - kj).min(wo);
                            if oj0 < oj1 {
                                let sj0 = oj0 + kj - pad;
                                for (d, v) in oflat[dst_row + sj0..dst_row + sj0 + (oj1 - oj0)]
                                    .iter_mut()
                                    .zip(&cflat[src + oj0..src + oj1])
                                {
                                    *d += v;
                                }
                            }
                        } else {
                            for oj in 0..wo {
                                let src_j = (oj * stride + kj) as isize - pad as isize;
                                if src_j >= 0 && (src_j as usize) < w {
                                    oflat[dst_row + src_j as usize] += cflat[src + oj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_forward(
    x: &ndarray::ArrayView4<f64>,
    w: &ndarray::ArrayView4<f64>,
    b: &ndarray::ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, _c, h, wd) = x.dim();
    let (cout, cin, k, _k2) = w.dim();
    assert_eq!(_c, cin, "conv2d: channel mismatch");
    let ho = conv_out_dim(h, k, stride, pad);
    let wo = conv_out_dim(wd, k, stride, pad);
    let cols = im2col_t(x, k, stride, pad);
    let wmat = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
    let out_mat = wmat.dot(&cols); // (Cout, N*Ho*Wo)
    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    {
        let oflat = out.as_slice_mut().unwrap();
        let om = out_mat.as_slice().unwrap();
        let hw = ho * wo;
        for co in 0..cout {
            let bias = b[co];
            for ni in 0..n {
                let dst = (ni * cout + co) * hw;
                let src = co * n * hw + ni * hw;
                for j in 0..hw {
                    oflat[dst + j] = om[src + j] + bias;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Array4<f64>,
    w: &Array4<f64>,
    grad_out: &Array4<f64>,
    stride: usize,
    pad: usize,
) -> (Array4<f64>, Array4<f64>, Array1<f64>) {
    let (n, c, h, wd) = x.dim();
    let (cout, cin, k, _k2) = w.dim();
    let (_, _, ho, wo) = grad_out.dim();
    // (Cout, N*Ho*Wo) gather
    let mut gmat = Array2::<f64>::zeros((cout, n * ho * wo));
    {
        let gm = gmat.as_slice_mut().unwrap();
        let gstd = grad_out.as_standard_layout();
        let go = gstd.as_slice().unwrap();
        let hw = ho * wo;
        for co in 0..cout {
            for ni in 0..n {
                let dst = co * n * hw + ni * hw;
                let src = (ni * cout + co) * hw;
                gm[dst..dst + hw].copy_from_slice(&go[src..src + hw]);
            }
        }
    }
    let cols = im2col_t(&x.view(), k, stride, pad);
    let wmat = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
    let gw_mat = gmat.dot(&cols.t()); // (Cout, Cin*k*k)
    let gw = gw_mat.into_shape_with_order((cout, cin, k, k)).unwrap();
    let gb = gmat.sum_axis(Axis(1));
    let gcols = wmat.t().dot(&gmat); // (Cin*k*k, N*Ho*Wo)
    let gx = col2im_t(&gcols, n, c, h, wd, k, stride, pad);
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// fused loss forwards (shared with the public loss functions)
// ---------------------------------------------------------------------------

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / s).collect()
}

pub(crate) fn cross_entropy_value(logits: &Array2<f64>, labels: &[usize]) -> f64 {
    assert_eq!(logits.nrows(), labels.len());
    let n = logits.nrows();
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        let r = row.as_slice().unwrap();
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - r[labels[i]];
    }
    total / n as f64
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Row sums S[p][q] = sum over samples of prototype-group p of
/// exp(cos(z_i, proto_q)); the per-sample count cancels in the ratio.
fn proto_exp_sums(z: &Array2<f64>, protos: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let p = protos.nrows();
    let mut s = Array2::<f64>::zeros((p, p));
    for (i, zr) in z.rows().into_iter().enumerate() {
        for q in 0..p {
            let sim = cosine(zr.as_slice().unwrap(), protos.row(q).as_slice().unwrap());
            s[[rows[i], q]] += sim.exp();
        }
    }
    s
}

pub(crate) fn invariant_proto_value(z: &Array2<f64>, protos: &Array2<f64>, rows: &[usize]) -> f64 {
    let s = proto_exp_sums(z, protos, rows);
    let p = protos.nrows();
    let mut loss = 0.0;
    for c in 0..p {
        let den: f64 = (0..p).map(|q| s[[c, q]]).sum();
        if den > 0.0 {
            loss -= s[[c, c]] / den;
        }
    }
    loss
}

fn invariant_proto_grad(z: &Array2<f64>, protos: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let p = protos.nrows();
    let s = proto_exp_sums(z, protos, rows);
    let dens: Vec<f64> = (0..p).map(|c| (0..p).map(|q| s[[c, q]]).sum()).collect();
    let mut gz = Array2::<f64>::zeros(z.dim());
    let proto_norms: Vec<f64> = (0..p)
        .map(|q| protos.row(q).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (i, zr) in z.rows().into_iter().enumerate() {
        let c = rows[i];
        let zn: f64 = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
        for q in 0..p {
            let sim = cosine(zr.as_slice().unwrap(), protos.row(q).as_slice().unwrap());
            let e = sim.exp();
            // dL/dS[c][q]
            let dl_ds = if dens[c] > 0.0 {
                let delta = if q == c { 1.0 } else { 0.0 };
                -(delta * dens[c] - s[[c, c]]) / (dens[c] * dens[c])
            } else {
                0.0
            };
            if dl_ds == 0.0 {
                continue;
            }
            let coef = dl_ds * e;
            for d in 0..z.ncols() {
                let dsim = protos[[q, d]] / (zn * proto_norms[q]) - sim * zr[d] / (zn * zn);
                gz[[i, d]] += coef * dsim;
            }
        }
    }
    gz
}

/// Within-class variance: mean over class members of the dimension-averaged
/// squared deviation from the class mean.
fn group_variances(z: &Array2<f64>, rows: &[usize], num_groups: usize) -> (Vec<f64>, Vec<usize>, Array2<f64>) {
    let d = z.ncols();
    let counts = group_counts(rows, num_groups);
    let mut means = Array2::<f64>::zeros((num_groups, d));
    for (i, zr) in z.rows().into_iter().enumerate() {
        for dd in 0..d {
            means[[rows[i], dd]] += zr[dd];
        }
    }
    for gidx in 0..num_groups {
        if counts[gidx] > 0 {
            let inv = 1.0 / counts[gidx] as f64;
            for dd in 0..d {
                means[[gidx, dd]] *= inv;
            }
        }
    }
    let mut vars = vec![0.0; num_groups];
    for (i, zr) in z.rows().into_iter().enumerate() {
        let gidx = rows[i];
        let mut sq = 0.0;
        for dd in 0..d {
            let dv = zr[dd] - means[[gidx, dd]];
            sq += dv * dv;
        }
        vars[gidx] += sq / d as f64;
    }
    for gidx in 0..num_groups {
        if counts[gidx] > 0 {
            vars[gidx] /= counts[gidx] as f64;
        }
    }
    (vars, counts, means)
}

pub(crate) fn variant_hinge_value(z: &Array2<f64>, rows: &[usize], num_groups: usize, eps: f64) -> f64 {
    let (vars, counts, _) = group_variances(z, rows, num_groups);
    let mut total = 0.0;
    let mut active = 0usize;
    for gidx in 0..num_groups {
        if counts[gidx] >= 2 {
            active += 1;
            total += (1.0 - (vars[gidx] + eps).sqrt()).max(0.0);
        }
    }
    if active == 0 {
        0.0
    } else {
        total / active as f64
    }
}

fn variant_hinge_grad(z: &Array2<f64>, rows: &[usize], num_groups: usize, eps: f64) -> Array2<f64> {
    let (vars, counts, means) = group_variances(z, rows, num_groups);
    let d = z.ncols() as f64;
    let active = counts.iter().filter(|&&c| c >= 2).count();
    let mut gz = Array2::<f64>::zeros(z.dim());
    if active == 0 {
        return gz;
    }
    for (i, zr) in z.rows().into_iter().enumerate() {
        let gidx = rows[i];
        if counts[gidx] < 2 {
            continue;
        }
        let hinge_open = 1.0 - (vars[gidx] + eps).sqrt() > 0.0;
        if !hinge_open {
            continue;
        }
        // dL/dVar = -1/(2 sqrt(Var+eps) * active); dVar/dz_i = 2 (z_i - mu) / (n d)
        let dv = -1.0 / (2.0 * (vars[gidx] + eps).sqrt() * active as f64);
        let coef = dv * 2.0 / (counts[gidx] as f64 * d);
        for dd in 0..z.ncols() {
            gz[[i, dd]] += coef * (zr[dd] - means[[gidx, dd]]);
        }
    }
    gz
}

pub(crate) fn per_class_mse_value(xhat: &ArrayD<f64>, x: &ArrayD<f64>, rows: &[usize], num_groups: usize) -> f64 {
    let n = xhat.shape()[0];
    let per = xhat.len() / n;
    let counts = group_counts(rows, num_groups);
    let xh = xhat.as_slice().unwrap();
    let xs = x.as_slice().unwrap();
    let mut per_class = vec![0.0; num_groups];
    for i in 0..n {
        let mut sq = 0.0;
        for j in i * per..(i + 1) * per {
            let dv = xh[j] - xs[j];
            sq += dv * dv;
        }
        per_class[rows[i]] += sq / per as f64;
    }
    let mut total = 0.0;
    for gidx in 0..num_groups {
        if counts[gidx] > 0 {
            total += per_class[gidx] / counts[gidx] as f64;
        }
    }
    total
}

/// KL( N(mu1, e^{lv1}) || N(mu2, e^{lv2}) ) summed over dimensions.
pub(crate) fn gauss_kl_row(mu1: &[f64], lv1: &[f64], mu2: &[f64], lv2: &[f64]) -> f64 {
    let mut kl = 0.0;
    for d in 0..mu1.len() {
        let v1 = lv1[d].exp();
        let inv_v2 = (-lv2[d]).exp();
        let dm = mu1[d] - mu2[d];
        kl += 0.5 * (lv2[d] - lv1[d]) + 0.5 * (v1 + dm * dm) * inv_v2 - 0.5;
    }
    kl
}

pub(crate) fn per_class_gauss_kl_value(
    mu1: &Array2<f64>,
    lv1: &Array2<f64>,
    mu2: &Array2<f64>,
    lv2: &Array2<f64>,
    rows: &[usize],
    num_groups: usize,
) -> f64 {
    let counts = group_counts(rows, num_groups);
    let mut per_class = vec![0.0; num_groups];
    for i in 0..mu1.nrows() {
        per_class[rows[i]] += gauss_kl_row(
            mu1.row(i).as_slice().unwrap(),
            lv1.row(i).as_slice().unwrap(),
            mu2.row(i).as_slice().unwrap(),
            lv2.row(i).as_slice().unwrap(),
        );
    }
    let mut total = 0.0;
    for gidx in 0..num_groups {
        if counts[gidx] > 0 {
            total += per_class[gidx] / counts[gidx] as f64;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{fill_gaussian, stream};
    use ndarray::IxDyn;

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = stream(seed, "graph-test", 0);
        let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
        fill_gaussian(&mut rng, a.as_slice_mut().unwrap());
        a
    }

    /// Central finite-difference check of d(scalar out)/d(input) for a graph
    /// builder `f` applied to a single perturbed input tensor.
    fn fd_check<F>(input: ArrayD<f64>, f: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let out = f(&mut tape, x);
        tape.backward(out);
        let analytic = tape.grad(x).expect("no gradient").clone();

        let h = 1e-5;
        let flat_len = input.len();
        let idxs: Vec<usize> = if flat_len <= 12 {
            (0..flat_len).collect()
        } else {
            (0..12).map(|k| k * flat_len / 12).collect()
        };
        for &j in &idxs {
            let mut plus = input.clone();
            plus.as_slice_mut().unwrap()[j] += h;
            let mut minus = input.clone();
            minus.as_slice_mut().unwrap()[j] -= h;
            let mut tp = Tape::new();
            let xp = tp.param(plus);
            let op = f(&mut tp, xp);
            let fp = tp.scalar(op);
            let mut tm = Tape::new();
            let xm = tm.param(minus);
            let om = f(&mut tm, xm);
            let fm = tm.scalar(om);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            assert!(
                (a - numeric).abs() / denom < tol,
                "fd mismatch at {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn fd_elementwise_chain() {
        fd_check(randn(&[3, 4], 1), |t, x| {
            let r = t.relu(x);
            let s = t.sigmoid(r);
            let e = t.exp(s);
            let k = t.mul_scalar(e, 0.3);
            t.mean_all(k)
        }, 1e-5);
    }

    #[test]
    fn fd_matmul_bias() {
        let w = randn(&[4, 5], 2);
        let b = randn(&[5], 3);
        fd_check(randn(&[3, 4], 4), move |t, x| {
            let wv = t.param(w.clone());
            let bv = t.param(b.clone());
            let y = t.matmul(x, wv);
            let y = t.add_bias2d(y, bv);
            let y = t.relu(y);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn fd_matmul_weight_grad() {
        let x = randn(&[3, 4], 5);
        fd_check(randn(&[4, 5], 6), move |t, w| {
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, w);
            let y = t.sigmoid(y);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn fd_conv_input_and_weight() {
        let w = randn(&[3, 2, 3, 3], 7);
        let b = randn(&[3], 8);
        // input gradient
        fd_check(randn(&[2, 2, 6, 6], 9), {
            let w = w.clone();
            let b = b.clone();
            move |t, x| {
                let wv = t.param(w.clone());
                let bv = t.param(b.clone());
                let y = t.conv2d(x, wv, bv, 2, 1);
                let y = t.relu(y);
                t.mean_all(y)
            }
        }, 1e-5);
        // weight gradient
        let x = randn(&[2, 2, 6, 6], 10);
        fd_check(w, move |t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.param(b.clone());
            let y = t.conv2d(xv, wv, bv, 1, 1);
            t.mean_all(y)
        }, 1e-5);
    }

    #[test]
    fn fd_upsample_concat_slice() {
        fd_check(randn(&[2, 4, 4, 4], 11), |t, x| {
            let up = t.upsample_nearest2x(x);
            let a = t.slice_channels(up, 0, 2);
            let b = t.slice_channels(up, 2, 4);
            let cat = t.concat_channels(a, b);
            let flat = t.reshape(cat, &[2, 4 * 8 * 8]);
            t.mean_all(flat)
        }, 1e-5);
    }

    #[test]
    fn fd_power_normalize() {
        fd_check(randn(&[3, 8], 12), |t, x| {
            let y = t.power_normalize_frames(x, 4);
            let sq = t.mul(y, y);
            let m = t.mean_all(sq);
            // add a non-symmetric term so the gradient is not trivially zero
            let first = t.reshape(y, &[24]);
            let s = t.mean_all(first);
            let s3 = t.mul_scalar(s, 3.0);
            t.add(m, s3)
        }, 1e-5);
    }

    #[test]
    fn power_normalize_unit_mean_power() {
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[5, 16], 13));
        let y = tape.power_normalize_frames(x, 8);
        let yv = y;
        let v = tape.value(yv);
        let rows = v.view().into_dimensionality::<Ix2>().unwrap();
        for row in rows.rows() {
            let p: f64 = row.iter().map(|a| a * a).sum::<f64>() / 8.0;
            assert!((p - 1.0).abs() < 1e-9, "mean power {p}");
        }
    }

    #[test]
    fn fd_row_affine() {
        let scale = vec![1.0, 0.0, 1.0];
        let offset = as_arr2(randn(&[3, 6], 14));
        fd_check(randn(&[3, 6], 15), move |t, x| {
            let y = t.row_affine(x, scale.clone(), offset.clone());
            let sq = t.mul(y, y);
            t.mean_all(sq)
        }, 1e-5);
    }

    #[test]
    fn fd_cross_entropy() {
        let labels = vec![0usize, 2, 1, 2];
        fd_check(randn(&[4, 3], 16), move |t, x| {
            t.softmax_cross_entropy(x, &labels)
        }, 1e-5);
    }

    #[test]
    fn fd_invariant_proto() {
        let protos = as_arr2(randn(&[3, 10], 17));
        let rows = vec![0usize, 1, 2, 0, 1, 2, 0];
        fd_check(randn(&[7, 10], 18), move |t, z| {
            t.invariant_proto_loss(z, protos.clone(), &rows)
        }, 1e-4);
    }

    #[test]
    fn fd_variant_hinge() {
        let rows = vec![0usize, 0, 1, 1, 1, 0];
        fd_check(randn(&[6, 8], 19), move |t, z| {
            t.variant_hinge_loss(z, &rows, 2, 1e-4)
        }, 1e-4);
    }

    #[test]
    fn fd_per_class_mse() {
        let x = randn(&[5, 2, 3, 3], 20);
        let rows = vec![0usize, 1, 0, 1, 1];
        fd_check(randn(&[5, 2, 3, 3], 21), move |t, xh| {
            let s = t.sigmoid(xh);
            t.per_class_mse(s, x.clone(), &rows, 2)
        }, 1e-5);
    }

    #[test]
    fn fd_per_class_kl_mu_and_lv() {
        let mu2 = as_arr2(randn(&[4, 6], 22));
        let lv2 = as_arr2(randn(&[4, 6], 23)) * 0.3;
        let rows = vec![0usize, 1, 1, 0];
        let lv1 = randn(&[4, 6], 24) * 0.3;
        // gradient w.r.t. mu1
        fd_check(randn(&[4, 6], 25), {
            let mu2 = mu2.clone();
            let lv2 = lv2.clone();
            let lv1 = lv1.clone();
            let rows = rows.clone();
            move |t, mu| {
                let lv = t.constant(lv1.clone());
                t.per_class_gauss_kl(mu, lv, mu2.clone(), lv2.clone(), &rows, 2)
            }
        }, 1e-5);
        // gradient w.r.t. lv1
        let mu1 = randn(&[4, 6], 26);
        fd_check(randn(&[4, 6], 27).mapv(|v| v * 0.3), move |t, lv| {
            let mu = t.constant(mu1.clone());
            t.per_class_gauss_kl(mu, lv, mu2.clone(), lv2.clone(), &rows, 2)
        }, 1e-5);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(randn(&[2, 2], 28));
        let d = tape.detach(x);
        let y = tape.mul(d, d);
        let out = tape.mean_all(y);
        tape.backward(out);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn kl_identical_gaussians_is_zero() {
        let mu = randn(&[3, 4], 29);
        let lv = randn(&[3, 4], 30);
        let mut tape = Tape::new();
        let m = tape.param(mu.clone());
        let l = tape.param(lv.clone());
        let kl = tape.per_class_gauss_kl(m, l, as_arr2(mu), as_arr2(lv), &[0, 0, 0], 1);
        assert!(tape.scalar(kl).abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift_is_half_per_dim() {
        let n = 2;
        let d = 5;
        let mu1 = ArrayD::zeros(IxDyn(&[n, d]));
        let lv = ArrayD::zeros(IxDyn(&[n, d]));
        let mu2 = Array2::from_elem((n, d), 1.0);
        let lv2 = Array2::zeros((n, d));
        let mut tape = Tape::new();
        let m = tape.param(mu1);
        let l = tape.param(lv);
        let kl = tape.per_class_gauss_kl(m, l, mu2, lv2, &[0, 0], 1);
        // 0.5 per dimension, d dims, one class, mean over its 2 samples
        assert!((tape.scalar(kl) - 0.5 * d as f64).abs() < 1e-12);
    }

    fn as_arr2(a: ArrayD<f64>) -> Array2<f64> {
        a.into_dimensionality::<Ix2>().unwrap()
    }
}
