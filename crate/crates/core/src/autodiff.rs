//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1x1`. Nodes are appended to a
//! [`Graph`] in evaluation order, so reverse creation order is a valid
//! topological order for the backward sweep.
//!
//! Sequence tensors of shape `B x W x T` are carried as `(B*T) x W` matrices
//! whose row `b*T + t` holds patient `b` at step `t`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Affine(NodeId, f64),
    Recip(NodeId),
    Square(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols(NodeId, usize),
    Reshape(NodeId),
    ExpandRows(NodeId, usize),
    GroupSumRows(NodeId, usize),
    SumAll(NodeId),
    L2NormalizeRows(NodeId),
    RowNormalize(NodeId),
    Threshold {
        sim: NodeId,
        phi: NodeId,
        keep: Array2<f64>,
        steepness: f64,
        zero_diag: bool,
    },
    MaskedLogSumExp(NodeId, Array2<f64>),
    FeatureFfn {
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build a forward pass by calling the op methods, then call
/// [`Graph::backward`] on a scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, NodeId)>,
}

const NORM_EPS: f64 = 1e-12;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = match op {
            Op::Param => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, &[])
    }

    /// Leaf bound to a trainable parameter. Repeated calls reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.param_nodes.iter().find(|(p, _)| *p == id) {
            return node;
        }
        let node = self.push(store.get(id).clone(), Op::Param, &[]);
        self.param_nodes.push((id, node));
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let v = av.dot(bv);
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).t().as_standard_layout().into_owned();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mul");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `a + row`, with `row` of shape `1 x n` broadcast down the rows.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert!(rv.nrows() == 1 && rv.ncols() == av.ncols(), "add_row");
        let v = av + rv;
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    /// `a * col`, with `col` of shape `m x 1` broadcast across the columns.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (av, cv) = (self.value(a), self.value(col));
        assert!(cv.ncols() == 1 && cv.nrows() == av.nrows(), "mul_col");
        let v = av * cv;
        self.push(v, Op::MulCol(a, col), &[a, col])
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(a).mapv(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale), &[a])
    }

    pub fn scale(&mut self, a: NodeId, scale: f64) -> NodeId {
        self.affine(a, scale, 0.0)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(v, Op::LogSoftmaxRows(a), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.nrows(), bv.nrows(), "concat_cols");
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("concat");
        self.push(v, Op::ConcatCols(a, b), &[a, b])
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = reshape_array(self.value(a), rows, cols);
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Repeats every row `times` times: `m x n -> (m*times) x n`.
    pub fn expand_rows(&mut self, a: NodeId, times: usize) -> NodeId {
        let v = expand_rows_array(self.value(a).view(), times);
        self.push(v, Op::ExpandRows(a, times), &[a])
    }

    /// Sums consecutive groups of `group` rows: `(m*group) x n -> m x n`.
    pub fn group_sum_rows(&mut self, a: NodeId, group: usize) -> NodeId {
        let v = group_sum_rows_array(self.value(a).view(), group);
        self.push(v, Op::GroupSumRows(a, group), &[a])
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let norm = row.dot(&row).sqrt().max(NORM_EPS);
            row.mapv_inplace(|x| x / norm);
        }
        self.push(v, Op::L2NormalizeRows(a), &[a])
    }

    /// Divides every row by its sum.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::RowNormalize(a), &[a])
    }

    /// Hard threshold `sim * keep` with `keep = [sim > phi]` (and `sim > 0`),
    /// optionally forcing the diagonal to zero. The backward pass routes the
    /// hard mask to `sim` and a sigmoid surrogate of the given steepness to `phi`.
    pub fn threshold(
        &mut self,
        sim: NodeId,
        phi: NodeId,
        steepness: f64,
        zero_diag: bool,
    ) -> NodeId {
        let phi_v = self.scalar(phi);
        let sv = self.value(sim);
        let mut keep = sv.mapv(|x| if x > phi_v && x > 0.0 { 1.0 } else { 0.0 });
        if zero_diag {
            keep.diag_mut().fill(0.0);
        }
        let v = sv * &keep;
        self.push(
            v,
            Op::Threshold {
                sim,
                phi,
                keep,
                steepness,
                zero_diag,
            },
            &[sim, phi],
        )
    }

    /// Row-wise `log(sum_j mask_ij * exp(x_ij))`, shape `m x 1`.
    /// Rows with an empty mask evaluate to 0 and receive no gradient.
    pub fn masked_logsumexp(&mut self, a: NodeId, mask: Array2<f64>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.dim(), mask.dim(), "masked_logsumexp");
        let mut out = Array2::zeros((av.nrows(), 1));
        for (i, (row, mrow)) in av.rows().into_iter().zip(mask.rows()).enumerate() {
            out[[i, 0]] = masked_lse(row.iter().copied(), mrow.iter().copied());
        }
        self.push(out, Op::MaskedLogSumExp(a, mask), &[a])
    }

    /// Per-feature scalar-to-vector feed-forward net, one hidden ReLU layer.
    ///
    /// `x: R x N`, `w1, b1: N x H`, `w2: (N*H) x O`, `b2: N x O`; output `R x (N*O)`
    /// with column `i*O + k` holding output unit `k` of feature `i`.
    pub fn feature_ffn(
        &mut self,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> NodeId {
        let (n, h, o) = self.ffn_dims(x, w1, b1, w2, b2);
        let xv = self.value(x).as_standard_layout();
        let (w1v, b1v) = (
            self.value(w1).as_standard_layout(),
            self.value(b1).as_standard_layout(),
        );
        let (w2v, b2v) = (
            self.value(w2).as_standard_layout(),
            self.value(b2).as_standard_layout(),
        );
        let (xs, w1s, b1s) = (slice(&xv), slice(&w1v), slice(&b1v));
        let (w2s, b2s) = (slice(&w2v), slice(&b2v));
        let rows = xv.nrows();
        let mut out = vec![0.0; rows * n * o];
        let mut hidden = vec![0.0; h];
        for r in 0..rows {
            for i in 0..n {
                let xi = xs[r * n + i];
                for j in 0..h {
                    hidden[j] = (xi * w1s[i * h + j] + b1s[i * h + j]).max(0.0);
                }
                let dst = &mut out[(r * n + i) * o..(r * n + i + 1) * o];
                dst.copy_from_slice(&b2s[i * o..(i + 1) * o]);
                for (j, &hj) in hidden.iter().enumerate() {
                    if hj > 0.0 {
                        let w = &w2s[(i * h + j) * o..(i * h + j + 1) * o];
                        for k in 0..o {
                            dst[k] += hj * w[k];
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((rows, n * o), out).expect("ffn output shape");
        self.push(
            out,
            Op::FeatureFfn { x, w1, b1, w2, b2 },
            &[x, w1, b1, w2, b2],
        )
    }

    fn ffn_dims(
        &self,
        x: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> (usize, usize, usize) {
        let n = self.value(x).ncols();
        let (n1, h) = self.value(w1).dim();
        let (n2, o) = self.value(b2).dim();
        assert!(
            n1 == n && n2 == n && self.value(b1).dim() == (n, h),
            "feature_ffn feature counts"
        );
        assert_eq!(self.value(w2).dim(), (n * h, o), "feature_ffn w2");
        (n, h, o)
    }

    /// Pre-activation of feature `i`'s hidden layer, `R x H`.
    fn ffn_pre(&self, x: NodeId, w1: NodeId, b1: NodeId, i: usize, h: usize) -> Array2<f64> {
        let xi = self.value(x).column(i).insert_axis(Axis(1));
        let w = self.value(w1).row(i).insert_axis(Axis(0));
        debug_assert_eq!(w.ncols(), h);
        let mut pre = xi.dot(&w);
        pre += &self.value(b1).row(i);
        pre
    }

    /// On/off state of every piecewise-linear decision in the tape (ReLU
    /// units, including the hidden layers of `feature_ffn`, and threshold
    /// masks). Two evaluations with equal patterns lie on the same smooth
    /// piece of the function.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => out.extend(node.value.iter().map(|&v| v > 0.0)),
                Op::Threshold { keep, .. } => out.extend(keep.iter().map(|&k| k > 0.0)),
                Op::FeatureFfn { x, w1, b1, .. } => {
                    let h = self.value(*w1).ncols();
                    for i in 0..self.value(*x).ncols() {
                        out.extend(self.ffn_pre(*x, *w1, *b1, i, h).iter().map(|&p| p > 0.0));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a `1x1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = &grads[node.0] {
                params.push((pid, g.clone()));
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |id: NodeId, delta: Array2<f64>| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.nodes[a.0].needs_grad {
                    acc(*a, g.dot(&bv.t()));
                }
                if self.nodes[b.0].needs_grad {
                    acc(*b, av.t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                acc(*a, g * self.value(*b));
                acc(*b, g * self.value(*a));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                acc(*a, g * self.value(*col));
                let dc = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                acc(*col, dc);
            }
            Op::Affine(a, scale) => acc(*a, g * *scale),
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, -(g * y * y));
            }
            Op::Square(a) => acc(*a, g * self.value(*a) * 2.0),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv * dot);
                }
                acc(*a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g.clone();
                for ((mut drow, grow), yrow) in d.rows_mut().into_iter().zip(g.rows()).zip(y.rows())
                {
                    let total = grow.sum();
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|dv, &yv| *dv -= yv.exp() * total);
                }
                acc(*a, d);
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).ncols();
                acc(*a, g.slice(s![.., ..na]).to_owned());
                acc(*b, g.slice(s![.., na..]).to_owned());
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                acc(*a, d);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(*a, reshape_array(g, r, c));
            }
            Op::ExpandRows(a, times) => acc(*a, group_sum_rows_array(g.view(), *times)),
            Op::GroupSumRows(a, group) => acc(*a, expand_rows_array(g.view(), *group)),
            Op::SumAll(a) => acc(*a, Array2::from_elem(self.shape(*a), g[[0, 0]])),
            Op::L2NormalizeRows(a) => {
                let av = self.value(*a);
                let y = &node.value;
                let mut d = Array2::zeros(av.dim());
                for r in 0..av.nrows() {
                    let arow = av.row(r);
                    let norm = arow.dot(&arow).sqrt();
                    let grow = g.row(r);
                    let mut drow = d.row_mut(r);
                    if norm > NORM_EPS {
                        let yrow = y.row(r);
                        let proj = yrow.dot(&grow);
                        Zip::from(&mut drow)
                            .and(&grow)
                            .and(&yrow)
                            .for_each(|dv, &gv, &yv| *dv = (gv - yv * proj) / norm);
                    } else {
                        drow.assign(&grow.mapv(|gv| gv / NORM_EPS));
                    }
                }
                acc(*a, d);
            }
            Op::RowNormalize(a) => {
                let av = self.value(*a);
                let y = &node.value;
                let mut d = Array2::zeros(av.dim());
                for r in 0..av.nrows() {
                    let sum = av.row(r).sum();
                    let proj = g.row(r).dot(&y.row(r));
                    let mut drow = d.row_mut(r);
                    Zip::from(&mut drow)
                        .and(&g.row(r))
                        .for_each(|dv, &gv| *dv = (gv - proj) / sum);
                }
                acc(*a, d);
            }
            Op::Threshold {
                sim,
                phi,
                keep,
                steepness,
                zero_diag,
            } => {
                acc(*sim, g * keep);
                if self.nodes[phi.0].needs_grad {
                    let phi_v = self.scalar(*phi);
                    let sv = self.value(*sim);
                    let mut dphi = 0.0;
                    for ((r, c), &x) in sv.indexed_iter() {
                        if *zero_diag && r == c {
                            continue;
                        }
                        let s = sigmoid(steepness * (x - phi_v));
                        dphi += g[[r, c]] * x * (-steepness * s * (1.0 - s));
                    }
                    acc(*phi, Array2::from_elem((1, 1), dphi));
                }
            }
            Op::MaskedLogSumExp(a, mask) => {
                let av = self.value(*a);
                let mut d = Array2::zeros(av.dim());
                for r in 0..av.nrows() {
                    if mask.row(r).sum() == 0.0 {
                        continue;
                    }
                    let out = node.value[[r, 0]];
                    let gr = g[[r, 0]];
                    for c in 0..av.ncols() {
                        if mask[[r, c]] != 0.0 {
                            d[[r, c]] = gr * (av[[r, c]] - out).exp();
                        }
                    }
                }
                acc(*a, d);
            }
            Op::FeatureFfn { x, w1, b1, w2, b2 } => {
                let (n, h, o) = self.ffn_dims(*x, *w1, *b1, *w2, *b2);
                let xv = self.value(*x).as_standard_layout();
                let w1v = self.value(*w1).as_standard_layout();
                let b1v = self.value(*b1).as_standard_layout();
                let w2v = self.value(*w2).as_standard_layout();
                let gv = g.as_standard_layout();
                let (xs, w1s, b1s, w2s, gs) = (
                    slice(&xv),
                    slice(&w1v),
                    slice(&b1v),
                    slice(&w2v),
                    slice(&gv),
                );
                let rows = xv.nrows();
                let x_grad = self.nodes[x.0].needs_grad;
                let mut dx = vec![0.0; if x_grad { rows * n } else { 0 }];
                let mut dw1 = vec![0.0; n * h];
                let mut db1 = vec![0.0; n * h];
                let mut dw2 = vec![0.0; n * h * o];
                let mut db2 = vec![0.0; n * o];
                for r in 0..rows {
                    for i in 0..n {
                        let xi = xs[r * n + i];
                        let gi = &gs[(r * n + i) * o..(r * n + i + 1) * o];
                        for k in 0..o {
                            db2[i * o + k] += gi[k];
                        }
                        let mut dxi = 0.0;
                        for j in 0..h {
                            let p = xi * w1s[i * h + j] + b1s[i * h + j];
                            if p <= 0.0 {
                                continue;
                            }
                            let row = (i * h + j) * o;
                            let mut dp = 0.0;
                            for k in 0..o {
                                dw2[row + k] += p * gi[k];
                                dp += gi[k] * w2s[row + k];
                            }
                            db1[i * h + j] += dp;
                            dw1[i * h + j] += dp * xi;
                            dxi += dp * w1s[i * h + j];
                        }
                        if x_grad {
                            dx[r * n + i] = dxi;
                        }
                    }
                }
                let mat = |r: usize, c: usize, v: Vec<f64>| {
                    Array2::from_shape_vec((r, c), v).expect("ffn grad shape")
                };
                if x_grad {
                    acc(*x, mat(rows, n, dx));
                }
                acc(*w1, mat(n, h, dw1));
                acc(*b1, mat(n, h, db1));
                acc(*w2, mat(n * h, o, dw2));
                acc(*b2, mat(n, o, db2));
            }
        }
    }
}

fn slice<'a>(a: &'a ndarray::CowArray<'_, f64, ndarray::Ix2>) -> &'a [f64] {
    a.as_slice().expect("standard layout")
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    params: Vec<(ParamId, Array2<f64>)>,
}

impl Gradients {
    /// Gradient with respect to an arbitrary node, if it was reached.
    pub fn node(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Array2<f64>)] {
        &self.params
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn masked_lse(
    values: impl Iterator<Item = f64> + Clone,
    mask: impl Iterator<Item = f64> + Clone,
) -> f64 {
    let max = values
        .clone()
        .zip(mask.clone())
        .filter(|(_, m)| *m != 0.0)
        .fold(f64::NEG_INFINITY, |acc, (v, _)| acc.max(v));
    if max == f64::NEG_INFINITY {
        return 0.0;
    }
    let sum: f64 = values
        .zip(mask)
        .filter(|(_, m)| *m != 0.0)
        .map(|(v, _)| (v - max).exp())
        .sum();
    max + sum.ln()
}

pub(crate) fn reshape_array(a: &Array2<f64>, rows: usize, cols: usize) -> Array2<f64> {
    assert_eq!(
        a.len(),
        rows * cols,
        "reshape {:?} -> ({rows}, {cols})",
        a.dim()
    );
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("standard layout")
}

pub(crate) fn expand_rows_array(a: ArrayView2<f64>, times: usize) -> Array2<f64> {
    let (m, n) = a.dim();
    let mut out = Array2::zeros((m * times, n));
    for (b, row) in a.rows().into_iter().enumerate() {
        for t in 0..times {
            out.row_mut(b * times + t).assign(&row);
        }
    }
    out
}

pub(crate) fn group_sum_rows_array(a: ArrayView2<f64>, group: usize) -> Array2<f64> {
    let (rows, n) = a.dim();
    assert_eq!(
        rows % group,
        0,
        "group_sum_rows: {rows} rows not divisible by {group}"
    );
    let mut out = Array2::zeros((rows / group, n));
    for (r, row) in a.rows().into_iter().enumerate() {
        let mut o = out.row_mut(r / group);
        o += &row;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut g = Graph::new();
        let an = g.param(&store, a);
        let b = g.constant(array![[0.5], [-1.0]]);
        let c = g.matmul(an, b);
        let loss = g.sum_all(c);
        let grads = g.backward(loss);
        assert_eq!(grads.param(a).unwrap(), &array![[0.5, -1.0], [0.5, -1.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_logsumexp_single_entry_is_exact() {
        let mut g = Graph::new();
        let x = g.constant(array![[0.3, 7.25]]);
        let out = g.masked_logsumexp(x, array![[0.0, 1.0]]);
        assert_eq!(g.scalar(out), 7.25);
    }

    #[test]
    fn expand_and_group_sum_are_adjoint() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let e = expand_rows_array(a.view(), 3);
        assert_eq!(e.nrows(), 6);
        assert_eq!(group_sum_rows_array(e.view(), 3), a * 3.0);
    }

    #[test]
    fn threshold_keeps_only_entries_above_phi() {
        let mut g = Graph::new();
        let sim = g.constant(array![[1.0, 0.6], [0.5, 0.9]]);
        let phi = g.constant(array![[0.56]]);
        let out = g.threshold(sim, phi, 50.0, false);
        assert_eq!(g.value(out), &array![[1.0, 0.6], [0.0, 0.9]]);
    }
}
