//! Similar-patient graph: static-feature concatenation, the batch similarity
//! matrix, learned-threshold sparsification, two-layer graph convolution and
//! the gated fusion of self and neighbour representations.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// `e' e'^T / D^2`.
    ScaledDot,
    /// Inner products of l2-normalized rows.
    #[default]
    Cosine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GcnNorm {
    /// `D^-1 (Lambda' + I)`.
    #[default]
    SelfLoops,
    /// The thresholded similarity as is.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphOptions {
    pub similarity: Similarity,
    pub gcn_norm: GcnNorm,
    pub zero_diag: bool,
    /// Slope of the sigmoid surrogate used for the threshold gradient.
    pub steepness: f64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            similarity: Similarity::Cosine,
            gcn_norm: GcnNorm::SelfLoops,
            zero_diag: false,
            steepness: 50.0,
        }
    }
}

/// Dense projection of the static feature vector, shared by every variant.
#[derive(Clone, Copy, Debug)]
pub struct StaticParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl StaticParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        static_width: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (static_width.max(1) as f64).sqrt();
        Self {
            w: store.add_uniform("static.w", (static_width, width), bound, rng),
            b: store.add_zeros("static.b", (1, width)),
        }
    }

    /// `B x d_g` static embedding.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, x_base: &Array2<f64>) -> Result<NodeId> {
        let w = g.param(store, self.w);
        if x_base.ncols() != g.shape(w).0 {
            return Err(Error::Shape(format!(
                "static vector has width {}, expected {}",
                x_base.ncols(),
                g.shape(w).0
            )));
        }
        let x = g.constant(x_base.clone());
        let b = g.param(store, self.b);
        let e = g.matmul(x, w);
        Ok(g.add_row(e, b))
    }
}

/// Appends the static embedding to a pooled `B x Nd` representation.
pub fn concat_static(g: &mut Graph, pooled: NodeId, e_base: NodeId) -> Result<NodeId> {
    if g.shape(pooled).0 != g.shape(e_base).0 {
        return Err(Error::Shape("pooled and static rows differ".into()));
    }
    Ok(g.concat_cols(pooled, e_base))
}

/// Appends the static embedding to every step of a `(B*T) x Nd` sequence.
pub fn concat_static_seq(
    g: &mut Graph,
    seq: NodeId,
    e_base: NodeId,
    horizon: usize,
) -> Result<NodeId> {
    if g.shape(seq).0 != g.shape(e_base).0 * horizon {
        return Err(Error::Shape("sequence and static rows differ".into()));
    }
    let expanded = g.expand_rows(e_base, horizon);
    Ok(g.concat_cols(seq, expanded))
}

#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub width: usize,
    pub phi: ParamId,
    pub gcn_w1: ParamId,
    pub gcn_w2: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub gate_self_w: ParamId,
    pub gate_self_b: ParamId,
    pub gate_nbr_w: ParamId,
    pub gate_nbr_b: ParamId,
}

impl GraphParams {
    /// `width` is the per-node (per-step for sequences) representation width `D`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        width: usize,
        hidden: (usize, usize),
        phi_init: f64,
        rng: &mut R,
    ) -> Self {
        let (h1, h2) = hidden;
        let b = |fan: usize| 1.0 / (fan as f64).sqrt();
        Self {
            width,
            phi: store.add("graph.phi", Array2::from_elem((1, 1), phi_init)),
            gcn_w1: store.add_uniform("graph.gcn_w1", (width, h1), b(width), rng),
            gcn_w2: store.add_uniform("graph.gcn_w2", (h1, h2), b(h1), rng),
            proj_w: store.add_uniform("graph.proj_w", (h2, width), b(h2), rng),
            proj_b: store.add_zeros("graph.proj_b", (1, width)),
            gate_self_w: store.add_uniform("graph.gate_self_w", (width, 1), b(width), rng),
            gate_self_b: store.add_zeros("graph.gate_self_b", (1, 1)),
            gate_nbr_w: store.add_uniform("graph.gate_nbr_w", (h2, 1), b(h2), rng),
            gate_nbr_b: store.add_zeros("graph.gate_nbr_b", (1, 1)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SimilarityGraph {
    /// `B x B` similarity.
    pub lambda: NodeId,
    /// `B x B` after the learned threshold.
    pub sparse: NodeId,
    /// `B x B` propagation matrix.
    pub adjacency: NodeId,
}

/// Builds the batch graph from the `B x D` patient vectors.
pub fn build_graph(
    g: &mut Graph,
    store: &ParamStore,
    p: &GraphParams,
    opts: &GraphOptions,
    nodes: NodeId,
) -> Result<SimilarityGraph> {
    let (b, width) = g.shape(nodes);
    if b < 2 {
        return Err(Error::InvalidInput(format!(
            "the similarity graph needs at least 2 patients in a batch, got {b}"
        )));
    }
    let lambda = match opts.similarity {
        Similarity::ScaledDot => {
            let t = g.transpose(nodes);
            let s = g.matmul(nodes, t);
            g.scale(s, 1.0 / (width as f64).powi(2))
        }
        Similarity::Cosine => {
            let z = g.l2_normalize_rows(nodes);
            let t = g.transpose(z);
            g.matmul(z, t)
        }
    };
    let phi = g.param(store, p.phi);
    let sparse = g.threshold(lambda, phi, opts.steepness, opts.zero_diag);
    let adjacency = match opts.gcn_norm {
        GcnNorm::SelfLoops => {
            let eye = g.constant(Array2::eye(b));
            let with_loops = g.add(sparse, eye);
            g.row_normalize(with_loops)
        }
        GcnNorm::Raw => sparse,
    };
    Ok(SimilarityGraph {
        lambda,
        sparse,
        adjacency,
    })
}

/// Two graph-convolution layers, `relu(A relu(A X W1) W2)`.
///
/// With `horizon = Some(T)` the input is a `(B*T) x D` sequence and each
/// patient's whole sequence is propagated as one node; output `(B*T) x h2`.
pub fn gcn(
    g: &mut Graph,
    store: &ParamStore,
    p: &GraphParams,
    adjacency: NodeId,
    x: NodeId,
    horizon: Option<usize>,
) -> Result<NodeId> {
    let b = g.shape(adjacency).0;
    let t = horizon.unwrap_or(1);
    let (rows, width) = g.shape(x);
    if rows != b * t || width != p.width {
        return Err(Error::Shape(format!(
            "gcn input {rows}x{width} does not match {b} patients x {t} steps x {}",
            p.width
        )));
    }
    let propagate = |g: &mut Graph, h: NodeId| -> NodeId {
        if t == 1 {
            return g.matmul(adjacency, h);
        }
        let (r, c) = g.shape(h);
        let flat = g.reshape(h, b, t * c);
        let mixed = g.matmul(adjacency, flat);
        g.reshape(mixed, r, c)
    };
    let (w1, w2) = (g.param(store, p.gcn_w1), g.param(store, p.gcn_w2));
    let h = propagate(g, x);
    let h = g.matmul(h, w1);
    let h = g.relu(h);
    let h = propagate(g, h);
    let h = g.matmul(h, w2);
    Ok(g.relu(h))
}

#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub output: NodeId,
    pub gamma: NodeId,
    pub eta: NodeId,
}

/// Gated combination `gamma * x + eta * proj(neigh)` with
/// `gamma + eta = 1` per row.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    p: &GraphParams,
    x: NodeId,
    neigh: NodeId,
) -> Result<Fused> {
    if g.shape(x).0 != g.shape(neigh).0 {
        return Err(Error::Shape(
            "fusion inputs have different row counts".into(),
        ));
    }
    let (ws, bs) = (g.param(store, p.gate_self_w), g.param(store, p.gate_self_b));
    let (wn, bn) = (g.param(store, p.gate_nbr_w), g.param(store, p.gate_nbr_b));
    let gs = g.matmul(x, ws);
    let gs = g.add_row(gs, bs);
    let gs = g.sigmoid(gs);
    let gn = g.matmul(neigh, wn);
    let gn = g.add_row(gn, bn);
    let gn = g.sigmoid(gn);
    let total = g.add(gs, gn);
    let inv = g.recip(total);
    let gamma = g.mul(gs, inv);
    let eta = g.affine(gamma, -1.0, 1.0);
    let (pw, pb) = (g.param(store, p.proj_w), g.param(store, p.proj_b));
    let projected = g.matmul(neigh, pw);
    let projected = g.add_row(projected, pb);
    let a = g.mul_col(x, gamma);
    let c = g.mul_col(projected, eta);
    Ok(Fused {
        output: g.add(a, c),
        gamma,
        eta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(width: usize, phi: f64) -> (ParamStore, GraphParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GraphParams::init(&mut store, width, (5, 4), phi, &mut rng);
        (store, p)
    }

    #[test]
    fn static_concat_widths() {
        let mut g = Graph::new();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sp = StaticParams::init(&mut store, 3, 2, &mut rng);
        let eb = sp.embed(&mut g, &store, &Array2::ones((4, 3))).unwrap();
        let pooled = g.constant(Array2::zeros((4, 6)));
        let c = concat_static(&mut g, pooled, eb).unwrap();
        assert_eq!(g.shape(c), (4, 8));
        let seq = g.constant(Array2::zeros((4 * 5, 6)));
        let cs = concat_static_seq(&mut g, seq, eb, 5).unwrap();
        assert_eq!(g.shape(cs), (20, 8));
        assert_eq!(
            g.value(cs).row(7).slice(ndarray::s![6..]),
            g.value(eb).row(1)
        );
        assert!(sp.embed(&mut g, &store, &Array2::ones((4, 2))).is_err());
    }

    #[test]
    fn scaled_dot_hand_example() {
        let (store, p) = setup(2, 0.2);
        let opts = GraphOptions {
            similarity: Similarity::ScaledDot,
            gcn_norm: GcnNorm::Raw,
            ..Default::default()
        };
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let sg = build_graph(&mut g, &store, &p, &opts, x).unwrap();
        let expected = array![[0.25, 0.25, 0.0], [0.25, 0.25, 0.0], [0.0, 0.0, 0.25]];
        assert_eq!(g.value(sg.lambda), &expected);
        assert_eq!(g.value(sg.sparse), &expected);
    }

    #[test]
    fn threshold_above_every_entry_empties_graph() {
        let (store, p) = setup(2, 0.3);
        let opts = GraphOptions {
            similarity: Similarity::ScaledDot,
            ..Default::default()
        };
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let sg = build_graph(&mut g, &store, &p, &opts, x).unwrap();
        assert!(g.value(sg.sparse).iter().all(|&v| v == 0.0));
        assert_eq!(g.value(sg.adjacency), &Array2::<f64>::eye(3));
    }

    #[test]
    fn cosine_similarity_is_bounded_and_symmetric() {
        let (store, p) = setup(3, 0.5);
        let mut g = Graph::new();
        let x = g.constant(array![
            [1.0, 2.0, -1.0],
            [0.5, 0.1, 0.0],
            [-3.0, 1.0, 2.0],
            [0.0, 0.0, 1.0]
        ]);
        let sg = build_graph(&mut g, &store, &p, &GraphOptions::default(), x).unwrap();
        let l = g.value(sg.lambda);
        for i in 0..4 {
            assert!((l[[i, i]] - 1.0).abs() < 1e-12);
            for j in 0..4 {
                assert!(l[[i, j]].abs() <= 1.0 + 1e-12);
                assert_eq!(l[[i, j]], l[[j, i]]);
            }
        }
        let a = g.value(sg.adjacency);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_diag_option_removes_self_edges() {
        let (store, p) = setup(2, 0.1);
        let opts = GraphOptions {
            zero_diag: true,
            gcn_norm: GcnNorm::Raw,
            ..Default::default()
        };
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]]);
        let sg = build_graph(&mut g, &store, &p, &opts, x).unwrap();
        assert!(g.value(sg.sparse).diag().iter().all(|&v| v == 0.0));
        assert!(g.value(sg.sparse)[[0, 1]] > 0.9);
    }

    #[test]
    fn single_patient_batch_is_rejected() {
        let (store, p) = setup(2, 0.5);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 0.0]]);
        assert!(build_graph(&mut g, &store, &p, &GraphOptions::default(), x).is_err());
    }

    #[test]
    fn identity_adjacency_acts_per_patient() {
        let (store, p) = setup(3, 0.5);
        let mut g = Graph::new();
        let eye = g.constant(Array2::eye(2));
        let x = g.constant(array![[1.0, -1.0, 0.5], [2.0, 0.0, 1.0]]);
        let out = gcn(&mut g, &store, &p, eye, x, None).unwrap();
        let w1 = store.get(p.gcn_w1);
        let w2 = store.get(p.gcn_w2);
        let expected = g
            .value(x)
            .dot(w1)
            .mapv(|v: f64| v.max(0.0))
            .dot(w2)
            .mapv(|v: f64| v.max(0.0));
        for (a, b) in g.value(out).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_gcn_matches_per_step_propagation() {
        let (store, p) = setup(2, 0.5);
        let adj = array![[0.6, 0.4], [0.3, 0.7]];
        let (b, t) = (2, 3);
        let xs = Array2::from_shape_fn((b * t, 2), |(r, c)| ((r * 2 + c) as f64 * 0.37).sin());
        let mut g = Graph::new();
        let a = g.constant(adj.clone());
        let x = g.constant(xs.clone());
        let out = gcn(&mut g, &store, &p, a, x, Some(t)).unwrap();
        for step in 0..t {
            let xt = Array2::from_shape_fn((b, 2), |(k, c)| xs[[k * t + step, c]]);
            let h = adj
                .dot(&xt)
                .dot(store.get(p.gcn_w1))
                .mapv(|v: f64| v.max(0.0));
            let h = adj
                .dot(&h)
                .dot(store.get(p.gcn_w2))
                .mapv(|v: f64| v.max(0.0));
            for k in 0..b {
                for c in 0..h.ncols() {
                    assert!((g.value(out)[[k * t + step, c]] - h[[k, c]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gates_are_convex() {
        let (store, p) = setup(3, 0.5);
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -1.0, 0.5], [2.0, 0.0, 1.0], [0.0, 0.0, 0.0]]);
        let n = g.constant(Array2::from_shape_fn((3, 4), |(r, c)| (r + c) as f64 * 0.3));
        let f = fuse(&mut g, &store, &p, x, n).unwrap();
        for (gm, et) in g.value(f.gamma).iter().zip(g.value(f.eta).iter()) {
            assert!(*gm > 0.0 && *gm < 1.0);
            assert!((gm + et - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.shape(f.output), (3, 3));
    }
}
