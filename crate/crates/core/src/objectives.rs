//! Training objectives: masked reconstruction error, cross-entropy,
//! supervised and unsupervised contrastive losses, and the time-series
//! augmentations that feed the unsupervised loss.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensorize::PatientTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupConVariant {
    /// Each anchor term is weighted by `1 / B_y` (class size, anchor
    /// included) and the terms are summed.
    #[default]
    ClassWeighted,
    /// Mean over positives of `-log p(positive)`, averaged over anchors.
    Standard,
}

/// `sum m (v - v_hat)^2 / sum m`.
pub fn masked_mse(
    g: &mut Graph,
    v_hat: NodeId,
    target: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<NodeId> {
    if g.shape(v_hat) != target.dim() || target.dim() != mask.dim() {
        return Err(Error::Shape("masked_mse operands differ in shape".into()));
    }
    let count = mask.sum();
    if count <= 0.0 {
        return Err(Error::Degenerate("masked MSE over an empty mask".into()));
    }
    let t = g.constant(target.clone());
    let m = g.constant(mask.clone());
    let diff = g.sub(v_hat, t);
    let sq = g.square(diff);
    let masked = g.mul(sq, m);
    let total = g.sum_all(masked);
    Ok(g.scale(total, 1.0 / count))
}

/// Mean negative log-likelihood of binary labels under `B x 2` logits.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
    let (b, k) = g.shape(logits);
    if b != labels.len() || k != 2 || b == 0 {
        return Err(Error::Shape(format!(
            "cross_entropy: logits {b}x{k}, {} labels",
            labels.len()
        )));
    }
    let onehot = Array2::from_shape_fn(
        (b, 2),
        |(i, c)| if labels[i] as usize == c { 1.0 } else { 0.0 },
    );
    let logp = g.log_softmax_rows(logits);
    let y = g.constant(onehot);
    let picked = g.mul(logp, y);
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / b as f64))
}

fn similarity_logits(g: &mut Graph, z: NodeId, temperature: f64) -> Result<NodeId> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let zn = g.l2_normalize_rows(z);
    let t = g.transpose(zn);
    let s = g.matmul(zn, t);
    Ok(g.scale(s, 1.0 / temperature))
}

fn not_self(b: usize) -> Array2<f64> {
    Array2::from_shape_fn((b, b), |(i, j)| if i == j { 0.0 } else { 1.0 })
}

/// Supervised contrastive loss over the rows of `z` (normalized internally).
///
/// Anchors whose class has no other member in the batch are skipped; a batch
/// in which no anchor has a positive is an error.
pub fn supcon_loss(
    g: &mut Graph,
    z: NodeId,
    labels: &[u8],
    temperature: f64,
    variant: SupConVariant,
) -> Result<NodeId> {
    let b = labels.len();
    if g.shape(z).0 != b {
        return Err(Error::Shape("supcon: rows and labels differ".into()));
    }
    let mut class_size = [0usize; 2];
    for &y in labels {
        class_size[y as usize] += 1;
    }
    let valid: Vec<bool> = labels.iter().map(|&y| class_size[y as usize] > 1).collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Degenerate(
            "no anchor in the batch has a same-label partner; use a larger batch".into(),
        ));
    }
    let s = similarity_logits(g, z, temperature)?;
    let positives = Array2::from_shape_fn((b, b), |(i, j)| {
        if i != j && labels[i] == labels[j] && valid[i] {
            1.0
        } else {
            0.0
        }
    });
    let lse_all = g.masked_logsumexp(s, not_self(b));
    match variant {
        SupConVariant::ClassWeighted => {
            let lse_pos = g.masked_logsumexp(s, positives);
            let diff = g.sub(lse_pos, lse_all);
            let w = Array2::from_shape_fn((b, 1), |(i, _)| {
                if valid[i] {
                    1.0 / class_size[labels[i] as usize] as f64
                } else {
                    0.0
                }
            });
            let w = g.constant(w);
            let weighted = g.mul(diff, w);
            let total = g.sum_all(weighted);
            Ok(g.scale(total, -1.0))
        }
        SupConVariant::Standard => {
            let counts: Vec<f64> = positives.rows().into_iter().map(|r| r.sum()).collect();
            let pos_w = Array2::from_shape_fn((b, b), |(i, j)| {
                if positives[[i, j]] > 0.0 {
                    1.0 / counts[i]
                } else {
                    0.0
                }
            });
            let pw = g.constant(pos_w);
            let pos_mean = g.mul(s, pw);
            let pos_total = g.sum_all(pos_mean);
            let anchor_w = Array2::from_shape_fn((b, 1), |(i, _)| if valid[i] { 1.0 } else { 0.0 });
            let aw = g.constant(anchor_w);
            let lse = g.mul(lse_all, aw);
            let lse_total = g.sum_all(lse);
            let diff = g.sub(lse_total, pos_total);
            Ok(g.scale(diff, 1.0 / n_valid as f64))
        }
    }
}

/// NT-Xent over `2B` rows where rows `2k` and `2k + 1` are two views of the
/// same series.
pub fn ntxent_loss(g: &mut Graph, z: NodeId, temperature: f64) -> Result<NodeId> {
    let rows = g.shape(z).0;
    if rows == 0 || !rows.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "nt-xent needs an even number of views, got {rows}"
        )));
    }
    let s = similarity_logits(g, z, temperature)?;
    let partner =
        Array2::from_shape_fn((rows, rows), |(i, j)| if j == (i ^ 1) { 1.0 } else { 0.0 });
    let lse_all = g.masked_logsumexp(s, not_self(rows));
    let p = g.constant(partner);
    let pos = g.mul(s, p);
    let pos_total = g.sum_all(pos);
    let lse_total = g.sum_all(lse_all);
    let diff = g.sub(lse_total, pos_total);
    Ok(g.scale(diff, 1.0 / rows as f64))
}

/// `lambda * task + (1 - lambda) * contrastive`; with `lambda = 1` the
/// contrastive term is not needed.
pub fn composite(
    g: &mut Graph,
    task: NodeId,
    contrastive: Option<NodeId>,
    lambda: f64,
) -> Result<NodeId> {
    match contrastive {
        Some(c) => {
            let a = g.scale(task, lambda);
            let b = g.scale(c, 1.0 - lambda);
            Ok(g.add(a, b))
        }
        None if lambda == 1.0 => Ok(task),
        None => Err(Error::Config(format!(
            "lambda = {lambda} needs a contrastive term"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    /// Cyclic shift: `v'[t] = v[(t + n) mod T]`.
    Shift(usize),
    Reverse,
}

impl Augmentation {
    pub fn sample<R: Rng + ?Sized>(horizon: usize, rng: &mut R) -> Self {
        let max_shift = (horizon / 4).max(1);
        if horizon < 2 || rng.random_bool(0.5) {
            Augmentation::Reverse
        } else {
            Augmentation::Shift(rng.random_range(1..=max_shift))
        }
    }
}

fn permute_columns(a: &Array2<f64>, source: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.dim(), |(i, t)| a[[i, source[t]]])
}

/// Applies an augmentation to values, mask and intervals together and
/// recomputes the neighbour recurrences for the new ordering.
pub fn augment(p: &PatientTensor, aug: Augmentation) -> Result<PatientTensor> {
    let t = p.horizon();
    let source: Vec<usize> = match aug {
        Augmentation::Shift(n) => (0..t).map(|s| (s + n) % t).collect(),
        Augmentation::Reverse => (0..t).rev().collect(),
    };
    let values = permute_columns(&p.values, &source);
    let mask = permute_columns(&p.mask, &source);
    // the step gap is uniform on the grid, so the reordered series keeps it
    let bin_width = if t > 1 { p.delta[[0, 1]] } else { 1.0 };
    PatientTensor::from_grid(values, mask, bin_width, Array1::clone(&p.x_base), p.label)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn lse(xs: &[f64]) -> f64 {
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    }

    #[test]
    fn masked_mse_hand_example() {
        let mut g = Graph::new();
        let v_hat = g.constant(array![[1.0, 2.0], [3.0, 5.0]]);
        let target = array![[1.5, 0.0], [3.0, 4.0]];
        let mask = array![[1.0, 0.0], [1.0, 1.0]];
        let l = masked_mse(&mut g, v_hat, &target, &mask).unwrap();
        assert!((g.scalar(l) - (0.25 + 0.0 + 1.0) / 3.0).abs() < 1e-15);
        assert!(masked_mse(&mut g, v_hat, &target, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log2() {
        let mut g = Graph::new();
        let logits = g.constant(Array2::zeros((3, 2)));
        let l = cross_entropy(&mut g, logits, &[0, 1, 1]).unwrap();
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn supcon_two_by_two_example() {
        // normalized embeddings: both class-0 rows equal, class-1 rows equal
        let mut g = Graph::new();
        let z = g.constant(array![[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [0.0, 3.0]]);
        let tau = 0.5;
        let l = supcon_loss(&mut g, z, &[0, 0, 1, 1], tau, SupConVariant::ClassWeighted).unwrap();
        // per anchor: log p = 2 - log(e^2 + 2)
        let per = (1.0 / tau) - lse(&[1.0 / tau, 0.0, 0.0]);
        assert!((g.scalar(l) - (-4.0 * 0.5 * per)).abs() < 1e-12);
        let ls = supcon_loss(&mut g, z, &[0, 0, 1, 1], tau, SupConVariant::Standard).unwrap();
        assert!((g.scalar(ls) + per).abs() < 1e-12);
    }

    #[test]
    fn supcon_skips_singleton_classes_and_rejects_no_positive() {
        let mut g = Graph::new();
        let z = g.constant(array![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]);
        assert!(supcon_loss(&mut g, z, &[0, 0, 1], 0.1, SupConVariant::ClassWeighted).is_ok());
        let z2 = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let err = supcon_loss(&mut g, z2, &[0, 1], 0.1, SupConVariant::ClassWeighted).unwrap_err();
        assert!(err.to_string().contains("larger batch"));
    }

    #[test]
    fn ntxent_single_pair_is_zero() {
        let mut g = Graph::new();
        let z = g.constant(array![[1.0, 0.3], [-0.2, 1.0]]);
        let l = ntxent_loss(&mut g, z, 0.07).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn ntxent_matches_direct_formula() {
        let zs = array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0], [-0.6, 0.8]];
        let tau = 0.2;
        let mut g = Graph::new();
        let z = g.constant(zs.clone());
        let l = ntxent_loss(&mut g, z, tau).unwrap();
        let mut expected = 0.0;
        for i in 0..4 {
            let others: Vec<f64> = (0..4)
                .filter(|&j| j != i)
                .map(|j| zs.row(i).dot(&zs.row(j)) / tau)
                .collect();
            expected += -(zs.row(i).dot(&zs.row(i ^ 1)) / tau) + lse(&others);
        }
        assert!((g.scalar(l) - expected / 4.0).abs() < 1e-12);
    }

    #[test]
    fn composite_with_lambda_one_is_the_task_loss() {
        let mut g = Graph::new();
        let task = g.constant(array![[0.7]]);
        let c = g.constant(array![[3.0]]);
        let l = composite(&mut g, task, None, 1.0).unwrap();
        assert_eq!(g.scalar(l), 0.7);
        let l = composite(&mut g, task, Some(c), 0.8).unwrap();
        assert!((g.scalar(l) - (0.8 * 0.7 + 0.2 * 3.0)).abs() < 1e-15);
        assert!(composite(&mut g, task, None, 0.8).is_err());
    }

    fn sample_patient() -> PatientTensor {
        let mask = array![[1.0, 0.0, 0.0, 1.0, 1.0], [0.0, 1.0, 0.0, 0.0, 1.0]];
        let values = array![[0.5, 0.0, 0.0, -1.0, 2.0], [0.0, 1.5, 0.0, 0.0, -0.5]];
        PatientTensor::from_grid(values, mask, 1.0, Array1::from(vec![1.0]), 1).unwrap()
    }

    #[test]
    fn reverse_twice_restores_values_and_mask() {
        let p = sample_patient();
        let r = augment(
            &augment(&p, Augmentation::Reverse).unwrap(),
            Augmentation::Reverse,
        )
        .unwrap();
        assert_eq!(r.values, p.values);
        assert_eq!(r.mask, p.mask);
        // neighbours swap roles under reversal
        let once = augment(&p, Augmentation::Reverse).unwrap();
        assert_eq!(once.v_last[[0, 1]], p.v_next[[0, 3]]);
    }

    #[test]
    fn shift_is_cyclic() {
        let p = sample_patient();
        let s = augment(&p, Augmentation::Shift(2)).unwrap();
        for t in 0..5 {
            assert_eq!(s.values.column(t), p.values.column((t + 2) % 5));
            assert_eq!(s.mask.column(t), p.mask.column((t + 2) % 5));
        }
        let full = augment(&s, Augmentation::Shift(3)).unwrap();
        assert_eq!(full.values, p.values);
        assert_eq!(full.delta, p.delta);
    }
}
