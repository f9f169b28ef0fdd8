//! Fixed-grid tensor representation of irregular event streams.
//!
//! Events are binned hourly (last value wins inside a bin), standardized per
//! feature with training-split statistics, and expanded into the interval and
//! neighbouring-value matrices used by the encoder and the imputation head.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed `(feature, value, time)` triplet of a patient.
#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub feature_id: usize,
    /// Hours since admission.
    pub time: f64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticRecord {
    pub patient_id: String,
    pub age: f64,
    pub sex: String,
    pub ethnicity: String,
    pub diagnosis: String,
}

/// Per-patient matrices, each `N x T` (feature rows, time columns).
#[derive(Clone, Debug, PartialEq)]
pub struct PatientTensor {
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    pub delta: Array2<f64>,
    pub delta_last: Array2<f64>,
    pub delta_next: Array2<f64>,
    pub v_last: Array2<f64>,
    pub v_next: Array2<f64>,
    pub x_base: Array1<f64>,
    pub label: u8,
}

impl PatientTensor {
    /// Builds all derived matrices from standardized values and the mask.
    pub fn from_grid(
        values: Array2<f64>,
        mask: Array2<f64>,
        bin_width: f64,
        x_base: Array1<f64>,
        label: u8,
    ) -> Result<Self> {
        let intervals = compute_intervals(&mask, bin_width)?;
        Self::from_parts(values, mask, intervals.delta, x_base, label)
    }

    /// Builds the recurrences from an explicit `delta` matrix.
    pub fn from_parts(
        values: Array2<f64>,
        mask: Array2<f64>,
        delta: Array2<f64>,
        x_base: Array1<f64>,
        label: u8,
    ) -> Result<Self> {
        let intervals = intervals_from_delta(&mask, delta)?;
        let (v_last, v_next) = compute_neighbor_values(&values, &mask)?;
        Ok(Self {
            values,
            mask,
            delta: intervals.delta,
            delta_last: intervals.delta_last,
            delta_next: intervals.delta_next,
            v_last,
            v_next,
            x_base,
            label,
        })
    }

    pub fn n_features(&self) -> usize {
        self.values.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }
}

/// Train / validation / test patient ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Output of [`bin_events`]: values are 0 where the mask is 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Binned {
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    /// Events at or beyond the horizon, dropped.
    pub rejected: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervals {
    pub delta: Array2<f64>,
    pub delta_last: Array2<f64>,
    pub delta_next: Array2<f64>,
}

/// Category vocabularies plus the age range used for min-max scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticVocab {
    pub sex: Vec<String>,
    pub ethnicity: Vec<String>,
    pub diagnosis: Vec<String>,
    pub age_min: f64,
    pub age_max: f64,
}

impl StaticVocab {
    /// Sorted vocabularies over the given records.
    pub fn from_records(records: &[StaticRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidInput("no static records".into()));
        }
        let collect = |f: fn(&StaticRecord) -> &str| {
            let mut v: Vec<String> = records.iter().map(|r| f(r).to_string()).collect();
            v.sort();
            v.dedup();
            v
        };
        let (mut age_min, mut age_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for r in records {
            if !r.age.is_finite() {
                return Err(Error::NonFinite(format!("age of patient {}", r.patient_id)));
            }
            age_min = age_min.min(r.age);
            age_max = age_max.max(r.age);
        }
        Ok(Self {
            sex: collect(|r| &r.sex),
            ethnicity: collect(|r| &r.ethnicity),
            diagnosis: collect(|r| &r.diagnosis),
            age_min,
            age_max,
        })
    }

    /// Length `g` of the encoded static vector.
    pub fn width(&self) -> usize {
        self.sex.len() + self.ethnicity.len() + self.diagnosis.len() + 1
    }
}

/// Per-feature standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Mean and population standard deviation over observed cells.
    /// Features never observed (or constant) get mean 0 / std 1 as needed.
    pub fn from_grids<'a>(
        grids: impl IntoIterator<Item = (&'a Array2<f64>, &'a Array2<f64>)>,
        n: usize,
    ) -> Self {
        let mut sum = vec![0.0; n];
        let mut sum_sq = vec![0.0; n];
        let mut count = vec![0usize; n];
        for (values, mask) in grids {
            for ((i, t), &v) in values.indexed_iter() {
                if mask[[i, t]] == 1.0 {
                    sum[i] += v;
                    sum_sq[i] += v * v;
                    count[i] += 1;
                }
            }
        }
        let mut mean = vec![0.0; n];
        let mut std = vec![1.0; n];
        for i in 0..n {
            if count[i] > 0 {
                let c = count[i] as f64;
                mean[i] = sum[i] / c;
                let var = (sum_sq[i] / c - mean[i] * mean[i]).max(0.0);
                if var > 1e-12 {
                    std[i] = var.sqrt();
                }
            }
        }
        Self { mean, std }
    }

    pub fn standardize(&self, feature: usize, raw: f64) -> f64 {
        (raw - self.mean[feature]) / self.std[feature]
    }

    pub fn destandardize(&self, feature: usize, z: f64) -> f64 {
        z * self.std[feature] + self.mean[feature]
    }
}

/// Bins one patient's events onto an hourly grid of `horizon_hours` columns,
/// keeping the last value (by time, then input order) in each bin.
pub fn bin_events(
    events: &[EventRecord],
    n_features: usize,
    horizon_hours: usize,
) -> Result<Binned> {
    let mut values = Array2::zeros((n_features, horizon_hours));
    let mut mask = Array2::zeros((n_features, horizon_hours));
    let mut latest: Array2<f64> = Array2::from_elem((n_features, horizon_hours), f64::NEG_INFINITY);
    let mut rejected = 0;
    for e in events {
        if e.feature_id >= n_features {
            return Err(Error::UnknownFeature {
                id: e.feature_id,
                n: n_features,
            });
        }
        if !e.value.is_finite() || !e.time.is_finite() {
            return Err(Error::NonFinite(format!(
                "event of patient {} at feature {}",
                e.patient_id, e.feature_id
            )));
        }
        if e.time < 0.0 {
            return Err(Error::InvalidInput(format!(
                "negative event time {} for patient {}",
                e.time, e.patient_id
            )));
        }
        if e.time >= horizon_hours as f64 {
            rejected += 1;
            continue;
        }
        let t = e.time.floor() as usize;
        let cell = [e.feature_id, t];
        if e.time >= latest[cell] {
            latest[cell] = e.time;
            values[cell] = e.value;
            mask[cell] = 1.0;
        }
    }
    Ok(Binned {
        values,
        mask,
        rejected,
    })
}

fn check_binary(mask: &Array2<f64>) -> Result<()> {
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::InvalidInput("mask must be binary".into()));
    }
    Ok(())
}

/// Interval matrices on a regular grid: `delta[., 0] = 0`, `bin_width` elsewhere.
pub fn compute_intervals(mask: &Array2<f64>, bin_width: f64) -> Result<Intervals> {
    if bin_width.is_nan() || bin_width <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let (n, t) = mask.dim();
    let mut delta = Array2::from_elem((n, t), bin_width);
    if t > 0 {
        delta.column_mut(0).fill(0.0);
    }
    intervals_from_delta(mask, delta)
}

/// Time since the last and until the next observation, from a given `delta`.
///
/// `delta_last[., 0] = 0` and `delta_next[., T-1] = 0`.
pub fn intervals_from_delta(mask: &Array2<f64>, delta: Array2<f64>) -> Result<Intervals> {
    check_binary(mask)?;
    if mask.dim() != delta.dim() {
        return Err(Error::Shape(format!(
            "mask {:?} vs delta {:?}",
            mask.dim(),
            delta.dim()
        )));
    }
    let (n, t) = mask.dim();
    let mut delta_last = Array2::zeros((n, t));
    let mut delta_next = Array2::zeros((n, t));
    for i in 0..n {
        for s in 1..t {
            delta_last[[i, s]] = if mask[[i, s - 1]] == 1.0 {
                delta[[i, s]]
            } else {
                delta[[i, s]] + delta_last[[i, s - 1]]
            };
        }
        for s in (0..t.saturating_sub(1)).rev() {
            delta_next[[i, s]] = if mask[[i, s + 1]] == 1.0 {
                delta[[i, s + 1]]
            } else {
                delta[[i, s + 1]] + delta_next[[i, s + 1]]
            };
        }
    }
    Ok(Intervals {
        delta,
        delta_last,
        delta_next,
    })
}

/// Last and next observed values, 0 at the open boundaries.
pub fn compute_neighbor_values(
    values: &Array2<f64>,
    mask: &Array2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if values.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "values {:?} vs mask {:?}",
            values.dim(),
            mask.dim()
        )));
    }
    check_binary(mask)?;
    let (n, t) = values.dim();
    let mut last = Array2::zeros((n, t));
    let mut next = Array2::zeros((n, t));
    for i in 0..n {
        for s in 1..t {
            last[[i, s]] = if mask[[i, s - 1]] == 1.0 {
                values[[i, s - 1]]
            } else {
                last[[i, s - 1]]
            };
        }
        for s in (0..t.saturating_sub(1)).rev() {
            next[[i, s]] = if mask[[i, s + 1]] == 1.0 {
                values[[i, s + 1]]
            } else {
                next[[i, s + 1]]
            };
        }
    }
    Ok((last, next))
}

/// One-hot sex, ethnicity and diagnosis blocks followed by min-max scaled age.
pub fn encode_static(record: &StaticRecord, vocab: &StaticVocab) -> Result<Array1<f64>> {
    let mut out = Array1::zeros(vocab.width());
    let mut offset = 0;
    for (field, value, list) in [
        ("sex", &record.sex, &vocab.sex),
        ("ethnicity", &record.ethnicity, &vocab.ethnicity),
        ("diagnosis", &record.diagnosis, &vocab.diagnosis),
    ] {
        let pos = list
            .iter()
            .position(|c| c == value)
            .ok_or_else(|| Error::OutOfVocabulary {
                field: field.to_string(),
                value: value.clone(),
            })?;
        out[offset + pos] = 1.0;
        offset += list.len();
    }
    let range = vocab.age_max - vocab.age_min;
    out[offset] = if range > 0.0 {
        (record.age - vocab.age_min) / range
    } else {
        0.0
    };
    Ok(out)
}

/// Seeded 70/15/15 split; validation and test sizes are floored, the
/// remainder goes to training.
pub fn split_cohort(ids: &[String], seed: u64) -> Result<CohortSplit> {
    if ids.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "need at least 10 patients to split, got {}",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.sort();
    shuffled.dedup();
    if shuffled.len() != ids.len() {
        return Err(Error::InvalidInput("duplicate patient ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_val = n * 15 / 100;
    let n_test = n * 15 / 100;
    let n_train = n - n_val - n_test;
    let mut train = shuffled[..n_train].to_vec();
    let mut validation = shuffled[n_train..n_train + n_val].to_vec();
    let mut test = shuffled[n_train + n_val..].to_vec();
    train.sort();
    validation.sort();
    test.sort();
    Ok(CohortSplit {
        train,
        validation,
        test,
    })
}

/// Options controlling cohort tensorization.
#[derive(Clone, Debug)]
pub struct TensorizeOptions {
    pub horizon_hours: usize,
    pub split_seed: u64,
}

impl Default for TensorizeOptions {
    fn default() -> Self {
        Self {
            horizon_hours: 48,
            split_seed: 0,
        }
    }
}

/// A whole cohort in tensor form together with everything needed to
/// interpret it (vocabularies, statistics, split).
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCohort {
    pub patient_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub horizon: usize,
    pub patients: Vec<PatientTensor>,
    pub split: CohortSplit,
    pub stats: FeatureStats,
    pub vocab: StaticVocab,
    pub rejected_events: usize,
}

impl TensorCohort {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn static_width(&self) -> usize {
        self.vocab.width()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.patient_ids
            .binary_search_by(|p| p.as_str().cmp(id))
            .ok()
    }

    /// Indices (into `patients`) of the given split ids.
    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index_of(id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown patient id {id}")))
            })
            .collect()
    }
}

/// Tensorizes a cohort. Patients are ordered by id; every patient needs a
/// static record and a label.
pub fn tensorize_cohort(
    feature_names: Vec<String>,
    events: &[EventRecord],
    statics: &[StaticRecord],
    labels: &BTreeMap<String, u8>,
    opts: &TensorizeOptions,
) -> Result<TensorCohort> {
    let n = feature_names.len();
    let horizon = opts.horizon_hours;
    if horizon == 0 {
        return Err(Error::InvalidInput("horizon must be positive".into()));
    }
    let static_map: BTreeMap<&str, &StaticRecord> =
        statics.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    let patient_ids: Vec<String> = labels.keys().cloned().collect();
    for id in &patient_ids {
        if !static_map.contains_key(id.as_str()) {
            return Err(Error::InvalidInput(format!(
                "patient {id} has no static record"
            )));
        }
    }
    let mut by_patient: BTreeMap<&str, Vec<EventRecord>> = BTreeMap::new();
    for e in events {
        if !labels.contains_key(&e.patient_id) {
            return Err(Error::InvalidInput(format!(
                "events for unlabeled patient {}",
                e.patient_id
            )));
        }
        by_patient
            .entry(e.patient_id.as_str())
            .or_default()
            .push(e.clone());
    }

    let split = split_cohort(&patient_ids, opts.split_seed)?;
    let vocab = StaticVocab::from_records(statics)?;

    let mut binned = Vec::with_capacity(patient_ids.len());
    let mut rejected = 0;
    for id in &patient_ids {
        let evs = by_patient
            .get(id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        let b = bin_events(evs, n, horizon)?;
        rejected += b.rejected;
        binned.push(b);
    }
    if rejected > 0 {
        log::warn!("dropped {rejected} events at or beyond the {horizon} h horizon");
    }

    let train_set: std::collections::BTreeSet<&str> =
        split.train.iter().map(String::as_str).collect();
    let stats = FeatureStats::from_grids(
        patient_ids
            .iter()
            .zip(&binned)
            .filter(|(id, _)| train_set.contains(id.as_str()))
            .map(|(_, b)| (&b.values, &b.mask)),
        n,
    );

    let mut patients = Vec::with_capacity(patient_ids.len());
    for (id, b) in patient_ids.iter().zip(binned) {
        let mut values = b.values;
        for ((i, _), v) in values.indexed_iter_mut() {
            *v = stats.standardize(i, *v);
        }
        values *= &b.mask;
        let x_base = encode_static(static_map[id.as_str()], &vocab)?;
        patients.push(PatientTensor::from_grid(
            values, b.mask, 1.0, x_base, labels[id],
        )?);
    }

    Ok(TensorCohort {
        patient_ids,
        feature_names,
        horizon,
        patients,
        split,
        stats,
        vocab,
        rejected_events: rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ev(f: usize, t: f64, v: f64) -> EventRecord {
        EventRecord {
            patient_id: "p".into(),
            feature_id: f,
            time: t,
            value: v,
        }
    }

    #[test]
    fn last_value_in_bin_wins() {
        let b = bin_events(&[ev(0, 0.5, 5.0), ev(0, 0.9, 6.0)], 1, 2).unwrap();
        assert_eq!(b.values.row(0).to_vec(), vec![6.0, 0.0]);
        assert_eq!(b.mask.row(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn equal_times_keep_input_order() {
        let b = bin_events(&[ev(0, 0.5, 5.0), ev(0, 0.5, 6.0)], 1, 1).unwrap();
        assert_eq!(b.values[[0, 0]], 6.0);
    }

    #[test]
    fn empty_events_give_empty_mask() {
        let b = bin_events(&[], 3, 24).unwrap();
        assert_eq!(b.mask.dim(), (3, 24));
        assert!(b.mask.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn forty_eight_hour_grid() {
        let b = bin_events(&[ev(1, 47.99, 1.0)], 2, 48).unwrap();
        assert_eq!(b.values.ncols(), 48);
        assert_eq!(b.mask[[1, 47]], 1.0);
    }

    #[test]
    fn events_past_horizon_are_counted() {
        let b = bin_events(&[ev(0, 2.0, 1.0), ev(0, 7.5, 1.0), ev(0, 1.0, 3.0)], 1, 2).unwrap();
        assert_eq!(b.rejected, 2);
        assert_eq!(b.mask.sum(), 1.0);
    }

    #[test]
    fn unknown_feature_is_an_error() {
        let err = bin_events(&[ev(4, 0.0, 1.0)], 2, 4).unwrap_err();
        assert!(matches!(err, Error::UnknownFeature { id: 4, n: 2 }));
    }

    #[test]
    fn interval_recurrences_hand_trace() {
        let m = array![[1.0, 0.0, 0.0, 1.0]];
        let iv = intervals_from_delta(&m, array![[0.0, 1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(iv.delta_last.row(0).to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(iv.delta_next.row(0).to_vec(), vec![3.0, 2.0, 1.0, 0.0]);
        let iv2 = compute_intervals(&m, 1.0).unwrap();
        assert_eq!(iv, iv2);
    }

    #[test]
    fn fully_observed_intervals() {
        let m = Array2::ones((2, 5));
        let iv = compute_intervals(&m, 2.0).unwrap();
        for t in 1..5 {
            assert_eq!(iv.delta_last[[0, t]], iv.delta[[0, t]]);
        }
        for t in 0..4 {
            assert_eq!(iv.delta_next[[1, t]], iv.delta[[1, t + 1]]);
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        assert!(compute_intervals(&array![[0.5, 1.0]], 1.0).is_err());
        assert!(compute_intervals(&array![[0.0, 1.0]], 0.0).is_err());
    }

    #[test]
    fn neighbor_values_hand_trace() {
        let v = array![[5.0, 0.0, 0.0, 7.0]];
        let m = array![[1.0, 0.0, 0.0, 1.0]];
        let (last, next) = compute_neighbor_values(&v, &m).unwrap();
        assert_eq!(last.row(0).to_vec(), vec![0.0, 5.0, 5.0, 5.0]);
        assert_eq!(next.row(0).to_vec(), vec![7.0, 7.0, 7.0, 0.0]);
    }

    #[test]
    fn neighbor_values_without_observations() {
        let v = array![[3.0, 4.0, 5.0]];
        let (last, next) = compute_neighbor_values(&v, &Array2::zeros((1, 3))).unwrap();
        assert!(last.iter().chain(next.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn neighbor_values_shape_mismatch() {
        assert!(compute_neighbor_values(&Array2::zeros((2, 3)), &Array2::zeros((3, 2))).is_err());
    }

    fn vocab() -> StaticVocab {
        StaticVocab {
            sex: vec!["F".into(), "M".into()],
            ethnicity: vec!["a".into(), "b".into(), "c".into()],
            diagnosis: vec!["x".into(), "y".into()],
            age_min: 20.0,
            age_max: 80.0,
        }
    }

    fn record(age: f64, sex: &str) -> StaticRecord {
        StaticRecord {
            patient_id: "p".into(),
            age,
            sex: sex.into(),
            ethnicity: "b".into(),
            diagnosis: "y".into(),
        }
    }

    #[test]
    fn static_encoding_layout() {
        let v = vocab();
        let x = encode_static(&record(20.0, "M"), &v).unwrap();
        assert_eq!(x.len(), 2 + 3 + 2 + 1);
        assert_eq!(x.len(), v.width());
        assert_eq!(x.slice(ndarray::s![0..2]).sum(), 1.0);
        assert_eq!(x[1], 1.0);
        assert_eq!(x[7], 0.0);
        assert_eq!(encode_static(&record(80.0, "F"), &v).unwrap()[7], 1.0);
    }

    #[test]
    fn static_encoding_rejects_unknown_category() {
        let err = encode_static(&record(30.0, "X"), &vocab()).unwrap_err();
        assert!(err.to_string().contains("sex"));
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:04}")).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_cohort(&ids(100), 7).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (70, 15, 15)
        );
        let s = split_cohort(&ids(20), 7).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (14, 3, 3)
        );
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let a = split_cohort(&ids(57), 3).unwrap();
        assert_eq!(a, split_cohort(&ids(57), 3).unwrap());
        let mut all: Vec<String> = a
            .train
            .iter()
            .chain(&a.validation)
            .chain(&a.test)
            .cloned()
            .collect();
        all.sort();
        assert_eq!(all, ids(57));
        assert_ne!(a, split_cohort(&ids(57), 4).unwrap());
    }

    #[test]
    fn split_needs_ten_patients() {
        assert!(split_cohort(&ids(9), 0).is_err());
    }
}
