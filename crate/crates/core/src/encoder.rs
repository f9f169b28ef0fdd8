//! Personalized patient representation: per-feature value and interval
//! embeddings, the attention-based cross module, and temporal attention
//! pooling.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Per-feature scalar-to-vector network: `x -> W2 relu(w1 x + b1) + b2`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FfnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_features: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Self {
        let hb = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), (n_features, hidden), 1.0, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), (n_features, hidden), hb, rng),
            w2: store.add_uniform(format!("{prefix}.w2"), (n_features * hidden, out), hb, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), (n_features, out)),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let (w1, b1, w2, b2) = (
            g.param(store, self.w1),
            g.param(store, self.b1),
            g.param(store, self.w2),
            g.param(store, self.b2),
        );
        g.feature_ffn(x, w1, b1, w2, b2)
    }
}

/// Applies a shared `d x d` map to every `d`-wide feature block of `x`.
pub fn blockwise(g: &mut Graph, x: NodeId, w: NodeId, d: usize) -> NodeId {
    let (rows, width) = g.shape(x);
    let flat = g.reshape(x, rows * width / d, d);
    let mixed = g.matmul(flat, w);
    g.reshape(mixed, rows, width)
}

/// `W_v . ev + W_t . et + b` applied blockwise.
pub fn mix(
    g: &mut Graph,
    ev: NodeId,
    et: NodeId,
    w_v: NodeId,
    w_t: NodeId,
    bias: NodeId,
    d: usize,
) -> NodeId {
    let (rows, width) = g.shape(ev);
    let n = width / d;
    let a = g.reshape(ev, rows * n, d);
    let a = g.matmul(a, w_v);
    let b = g.reshape(et, rows * n, d);
    let b = g.matmul(b, w_t);
    let sum = g.add(a, b);
    let sum = g.add_row(sum, bias);
    g.reshape(sum, rows, width)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub n_features: usize,
    pub d: usize,
    /// `N x d`, one vector per feature.
    pub feature_table: ParamId,
    pub value_ffn: FfnParams,
    pub time_ffn: FfnParams,
    pub w_v: ParamId,
    pub w_t: ParamId,
    pub b_mix: ParamId,
    /// `Nd x 1` kernel reducing each row of the cross-attention matrix to a score.
    pub conv_kernel: ParamId,
    pub pool_w: ParamId,
    pub pool_b: ParamId,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_features: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let nd = n_features * d;
        let bnd = 1.0 / (nd as f64).sqrt();
        Self {
            n_features,
            d,
            feature_table: store.add_uniform("encoder.feature_table", (n_features, d), bd, rng),
            value_ffn: FfnParams::init(store, "encoder.value_ffn", n_features, d, d, rng),
            time_ffn: FfnParams::init(store, "encoder.time_ffn", n_features, d, d, rng),
            w_v: store.add_uniform("encoder.w_v", (d, d), bd, rng),
            w_t: store.add_uniform("encoder.w_t", (d, d), bd, rng),
            b_mix: store.add_zeros("encoder.b_mix", (1, d)),
            conv_kernel: store.add_uniform("encoder.conv_kernel", (nd, 1), bnd, rng),
            pool_w: store.add_uniform("encoder.pool_w", (nd, 1), bnd, rng),
            pool_b: store.add_zeros("encoder.pool_b", (1, 1)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// Feature table flattened to `1 x Nd`; broadcast over time.
    pub feature: NodeId,
    /// `(B*T) x Nd`.
    pub value: NodeId,
    /// `(B*T) x Nd`.
    pub time: NodeId,
}

/// Value and interval embeddings; column block `i` depends only on feature `i`.
pub fn embed_triplets(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    batch: &Batch,
) -> Result<Embeddings> {
    if batch.n_features != p.n_features {
        return Err(Error::Shape(format!(
            "batch has {} features, encoder expects {}",
            batch.n_features, p.n_features
        )));
    }
    if batch
        .values
        .iter()
        .chain(batch.delta.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let values = g.constant(batch.values.clone());
    let delta = g.constant(batch.delta.clone());
    let value = p.value_ffn.apply(g, store, values);
    let time = p.time_ffn.apply(g, store, delta);
    let table = g.param(store, p.feature_table);
    let feature = g.reshape(table, 1, p.n_features * p.d);
    Ok(Embeddings {
        feature,
        value,
        time,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    /// `(B*T) x Nd` mixed embedding.
    pub e_tilde: NodeId,
    /// `B x Nd`, softmax over the feature-dimension axis.
    pub alpha: NodeId,
    /// `(B*T) x Nd`, `alpha (broadcast over T) * e_tilde`.
    pub seq: NodeId,
}

/// Cross-attention weighting of the mixed embedding.
///
/// Per patient, `E = e_f . e_tilde^T / sqrt(d)` with `e_f` the feature table
/// repeated over time, so `E[a, c] = e_f[a] * sum_t e_tilde[c, t] / sqrt(d)`.
/// The convolution reduces each row of `E` with a learned kernel `k`; that
/// row score equals `e_f[a] * (s . k) / sqrt(d)` with `s = sum_t e_tilde`,
/// which is how it is evaluated here.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    emb: &Embeddings,
    horizon: usize,
) -> Result<CrossAttention> {
    let nd = p.n_features * p.d;
    if g.shape(emb.value) != g.shape(emb.time)
        || g.shape(emb.value).1 != nd
        || g.shape(emb.feature) != (1, nd)
    {
        return Err(Error::Shape("cross_attention inputs disagree".into()));
    }
    let (w_v, w_t, b) = (
        g.param(store, p.w_v),
        g.param(store, p.w_t),
        g.param(store, p.b_mix),
    );
    let e_tilde = mix(g, emb.value, emb.time, w_v, w_t, b, p.d);
    let summed = g.group_sum_rows(e_tilde, horizon);
    let kernel = g.param(store, p.conv_kernel);
    let z = g.matmul(summed, kernel);
    let scores = g.matmul(z, emb.feature);
    let scores = g.scale(scores, 1.0 / (p.d as f64).sqrt());
    let alpha = g.softmax_rows(scores);
    let alpha_t = g.expand_rows(alpha, horizon);
    let seq = g.mul(alpha_t, e_tilde);
    Ok(CrossAttention {
        e_tilde,
        alpha,
        seq,
    })
}

/// Explicit `Nd x Nd` cross-attention matrix for one patient
/// (`e_tilde` given as `Nd x T`). Used for inspection and tests.
pub fn cross_attention_matrix(
    feature: &Array1<f64>,
    e_tilde: &Array2<f64>,
    d: usize,
) -> Array2<f64> {
    let t = e_tilde.ncols();
    let expanded = Array2::from_shape_fn((feature.len(), t), |(a, _)| feature[a]);
    expanded.dot(&e_tilde.t()) / (d as f64).sqrt()
}

#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// `B x T`, softmax over time.
    pub beta: NodeId,
    /// `B x Nd`.
    pub pooled: NodeId,
}

pub fn temporal_pool(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    seq: NodeId,
    horizon: usize,
) -> Result<Pooled> {
    if horizon == 0 {
        return Err(Error::InvalidInput(
            "cannot pool over zero time steps".into(),
        ));
    }
    let (rows, _) = g.shape(seq);
    let b = rows / horizon;
    let (w, bias) = (g.param(store, p.pool_w), g.param(store, p.pool_b));
    let logits = g.matmul(seq, w);
    let logits = g.add_row(logits, bias);
    let logits = g.reshape(logits, b, horizon);
    let beta = g.softmax_rows(logits);
    let beta_col = g.reshape(beta, rows, 1);
    let weighted = g.mul_col(seq, beta_col);
    let pooled = g.group_sum_rows(weighted, horizon);
    Ok(Pooled { beta, pooled })
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub embeddings: Embeddings,
    pub attention: CrossAttention,
    pub pooled: Pooled,
}

pub fn encode(
    g: &mut Graph,
    store: &ParamStore,
    p: &EncoderParams,
    batch: &Batch,
) -> Result<EncoderOutput> {
    let embeddings = embed_triplets(g, store, p, batch)?;
    let attention = cross_attention(g, store, p, &embeddings, batch.horizon)?;
    let pooled = temporal_pool(g, store, p, attention.seq, batch.horizon)?;
    Ok(EncoderOutput {
        embeddings,
        attention,
        pooled,
    })
}
