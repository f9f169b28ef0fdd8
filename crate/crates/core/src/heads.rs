//! Output heads: mortality classifier and the neighbour-informed imputation
//! head.

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::batch::Batch;
use crate::encoder::{mix, FfnParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassifierParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_uniform("classifier.w", (width, 2), 1.0 / (width as f64).sqrt(), rng),
            b: store.add_zeros("classifier.b", (1, 2)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    pub logits: NodeId,
    /// `B x 2` class probabilities.
    pub probs: NodeId,
}

/// Inverted dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    if rate <= 0.0 {
        return Array2::ones(shape);
    }
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

/// Linear classifier on the fused representation. `dropout` is applied to the
/// input when given (training only).
pub fn classify(
    g: &mut Graph,
    store: &ParamStore,
    p: &ClassifierParams,
    x: NodeId,
    dropout: Option<&Array2<f64>>,
) -> Result<Prediction> {
    let x = match dropout {
        Some(mask) => {
            if mask.dim() != g.shape(x) {
                return Err(Error::Shape("dropout mask shape".into()));
            }
            let m = g.constant(mask.clone());
            g.mul(x, m)
        }
        None => x,
    };
    let (w, b) = (g.param(store, p.w), g.param(store, p.b));
    let logits = g.matmul(x, w);
    let logits = g.add_row(logits, b);
    let probs = g.softmax_rows(logits);
    Ok(Prediction { logits, probs })
}

#[derive(Clone, Copy, Debug)]
pub struct ImputeParams {
    pub d: usize,
    pub last_value: FfnParams,
    pub last_delta: FfnParams,
    pub next_value: FfnParams,
    pub next_delta: FfnParams,
    pub last_wv: ParamId,
    pub last_wt: ParamId,
    pub last_b: ParamId,
    pub next_wv: ParamId,
    pub next_wt: ParamId,
    pub next_b: ParamId,
    /// `D x N` map from the fused representation.
    pub w_self: ParamId,
    /// `2Nd x N` map from the neighbour context.
    pub w_ctx: ParamId,
    pub b_out: ParamId,
}

impl ImputeParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        n_features: usize,
        d: usize,
        hidden: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let bd = 1.0 / (d as f64).sqrt();
        let ctx = 2 * n_features * d;
        Self {
            d,
            last_value: FfnParams::init(store, "impute.last_value", n_features, hidden, d, rng),
            last_delta: FfnParams::init(store, "impute.last_delta", n_features, hidden, d, rng),
            next_value: FfnParams::init(store, "impute.next_value", n_features, hidden, d, rng),
            next_delta: FfnParams::init(store, "impute.next_delta", n_features, hidden, d, rng),
            last_wv: store.add_uniform("impute.last_wv", (d, d), bd, rng),
            last_wt: store.add_uniform("impute.last_wt", (d, d), bd, rng),
            last_b: store.add_zeros("impute.last_b", (1, d)),
            next_wv: store.add_uniform("impute.next_wv", (d, d), bd, rng),
            next_wt: store.add_uniform("impute.next_wt", (d, d), bd, rng),
            next_b: store.add_zeros("impute.next_b", (1, d)),
            w_self: store.add_uniform(
                "impute.w_self",
                (width, n_features),
                1.0 / (width as f64).sqrt(),
                rng,
            ),
            w_ctx: store.add_uniform(
                "impute.w_ctx",
                (ctx, n_features),
                1.0 / (ctx as f64).sqrt(),
                rng,
            ),
            b_out: store.add_zeros("impute.b_out", (1, n_features)),
        }
    }
}

/// `(B*T) x 2Nd` context from the nearest observed neighbours in time.
pub fn neighbor_context(
    g: &mut Graph,
    store: &ParamStore,
    p: &ImputeParams,
    batch: &Batch,
) -> NodeId {
    let mut side =
        |values: &Array2<f64>, deltas: &Array2<f64>, fv: &FfnParams, fd: &FfnParams, wv, wt, b| {
            let v = g.constant(values.clone());
            let dl = g.constant(deltas.clone());
            let ev = fv.apply(g, store, v);
            let ed = fd.apply(g, store, dl);
            let (wv, wt, b) = (g.param(store, wv), g.param(store, wt), g.param(store, b));
            mix(g, ev, ed, wv, wt, b, p.d)
        };
    let last = side(
        &batch.v_last,
        &batch.delta_last,
        &p.last_value,
        &p.last_delta,
        p.last_wv,
        p.last_wt,
        p.last_b,
    );
    let next = side(
        &batch.v_next,
        &batch.delta_next,
        &p.next_value,
        &p.next_delta,
        p.next_wv,
        p.next_wt,
        p.next_b,
    );
    g.concat_cols(last, next)
}

/// `(B*T) x N` reconstruction from the fused sequence and neighbour context.
pub fn impute(
    g: &mut Graph,
    store: &ParamStore,
    p: &ImputeParams,
    fused: NodeId,
    context: NodeId,
) -> Result<NodeId> {
    if g.shape(fused).0 != g.shape(context).0 {
        return Err(Error::Shape(
            "fused sequence and context rows differ".into(),
        ));
    }
    let (ws, wc, b) = (
        g.param(store, p.w_self),
        g.param(store, p.w_ctx),
        g.param(store, p.b_out),
    );
    let a = g.matmul(fused, ws);
    let c = g.matmul(context, wc);
    let sum = g.add(a, c);
    Ok(g.add_row(sum, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorize::PatientTensor;
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ClassifierParams::init(&mut store, 4, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(array![
            [1.0, 2.0, 3.0, 4.0],
            [-1.0, 0.0, 0.0, 9.0],
            [0.0, 0.0, 0.0, 0.0]
        ]);
        let pred = classify(&mut g, &store, &p, x, None).unwrap();
        for row in g.value(pred.probs).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_is_inverted_and_rate_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask((100, 50), 0.1, &mut rng);
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / 5000.0;
        assert!((kept - 0.9).abs() < 0.02);
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.9).abs() < 1e-15));
        assert_eq!(
            dropout_mask((3, 3), 0.0, &mut rng),
            Array2::<f64>::ones((3, 3))
        );
    }

    #[test]
    fn imputation_shape_and_time_locality() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, d, t) = (3, 2, 4);
        let p = ImputeParams::init(&mut store, n, d, 5, 7, &mut rng);
        let mask = array![
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0]
        ];
        let values = array![
            [0.5, 0.0, -1.0, 0.0],
            [0.0, 2.0, 0.0, 0.3],
            [1.0, 1.0, 1.0, 1.0]
        ];
        let pt = PatientTensor::from_grid(values, mask, 1.0, Array1::zeros(2), 1).unwrap();
        let batch = Batch::from_patients(&[&pt, &pt]).unwrap();
        let mut g = Graph::new();
        let ctx = neighbor_context(&mut g, &store, &p, &batch);
        assert_eq!(g.shape(ctx), (2 * t, 2 * n * d));
        let fused = g.constant(Array2::zeros((2 * t, 7)));
        let out = impute(&mut g, &store, &p, fused, ctx).unwrap();
        assert_eq!(g.shape(out), (2 * t, n));
        // identical patients give identical reconstructions
        let v = g.value(out);
        for r in 0..t {
            assert_eq!(v.row(r), v.row(t + r));
        }
    }
}
