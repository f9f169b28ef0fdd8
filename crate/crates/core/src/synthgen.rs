//! Synthetic cohorts with planted patient subgroups.
//!
//! Each patient belongs to one of `K` clusters. A cluster owns a smooth mean
//! curve per feature (a random low-order Fourier mixture); a patient's latent
//! trajectory is that curve plus a smooth personal offset plus noise. Mortality
//! depends on the cluster and on a trajectory summary. Missingness is applied
//! afterwards, optionally not at random: extreme values are deleted more often.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio;
use crate::error::{Error, Result};
use crate::tensorize::{
    tensorize_cohort, EventRecord, StaticRecord, TensorCohort, TensorizeOptions,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_features: usize,
    pub horizon: usize,
    pub n_clusters: usize,
    pub missing_rate: f64,
    pub mnar_strength: f64,
    pub mortality_base_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patients: 500,
            n_features: 6,
            horizon: 24,
            n_clusters: 4,
            missing_rate: 0.3,
            mnar_strength: 1.0,
            mortality_base_rate: 0.2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_patients == 0 || self.n_features == 0 || self.horizon == 0 || self.n_clusters == 0
        {
            return bad("n_patients, n_features, horizon and n_clusters must be positive".into());
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!(
                "missing_rate must be in [0, 1), got {}",
                self.missing_rate
            ));
        }
        if !(self.mnar_strength >= 0.0 && self.mnar_strength.is_finite()) {
            return bad(format!(
                "mnar_strength must be >= 0, got {}",
                self.mnar_strength
            ));
        }
        if !(self.mortality_base_rate > 0.0 && self.mortality_base_rate < 1.0) {
            return bad(format!(
                "mortality_base_rate must be in (0, 1), got {}",
                self.mortality_base_rate
            ));
        }
        Ok(())
    }
}

/// Clinical-looking name, mean and spread of the first few features.
const FEATURES: [(&str, f64, f64); 10] = [
    ("heart_rate", 86.0, 15.0),
    ("systolic_bp", 121.0, 18.0),
    ("diastolic_bp", 63.0, 11.0),
    ("resp_rate", 19.0, 4.5),
    ("spo2", 96.5, 2.4),
    ("temperature", 36.9, 0.7),
    ("glucose", 138.0, 38.0),
    ("mean_bp", 79.0, 12.0),
    ("ph", 7.39, 0.06),
    ("fio2", 0.45, 0.12),
];

const SEXES: [&str; 2] = ["F", "M"];
const ETHNICITIES: [&str; 5] = ["asian", "black", "hispanic", "other", "white"];
const DIAGNOSES: [&str; 6] = [
    "cardiac",
    "neurologic",
    "renal",
    "respiratory",
    "sepsis",
    "trauma",
];

const HARMONICS: usize = 4;
const PERSONAL_OFFSET_SD: f64 = 0.3;
const PERSONAL_WAVE_SD: f64 = 0.2;
const NOISE_SD: f64 = 0.15;

fn feature_spec(i: usize) -> (String, f64, f64) {
    match FEATURES.get(i) {
        Some(&(name, mean, sd)) => (name.to_string(), mean, sd),
        None => (format!("feature_{i:02}"), 50.0, 10.0),
    }
}

fn patient_id(p: usize) -> String {
    format!("P{p:05}")
}

/// A generated cohort. `events` are what a hospital would have recorded;
/// `shadow` holds the deleted ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCohort {
    pub feature_names: Vec<String>,
    pub horizon: usize,
    pub events: Vec<EventRecord>,
    pub shadow: Vec<EventRecord>,
    pub statics: Vec<StaticRecord>,
    pub labels: BTreeMap<String, u8>,
    /// Planted cluster per patient, in patient-id order.
    pub clusters: Vec<usize>,
    /// Noise-free-ish latent z-trajectory per patient (`N x T`, standardized units).
    pub latent: Vec<ndarray::Array2<f64>>,
}

impl SynthCohort {
    /// Tensorizes the observed events on a one-hour grid spanning the horizon.
    pub fn tensorize(&self, split_seed: u64) -> Result<TensorCohort> {
        tensorize_cohort(
            self.feature_names.clone(),
            &self.events,
            &self.statics,
            &self.labels,
            &TensorizeOptions {
                horizon_hours: self.horizon,
                split_seed,
            },
        )
    }
}

struct ClusterCurves {
    level: Vec<f64>,
    amp: Vec<[f64; HARMONICS]>,
    phase: Vec<[f64; HARMONICS]>,
    risk: f64,
}

impl ClusterCurves {
    fn sample(rng: &mut ChaCha8Rng, n: usize) -> Self {
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut level = Vec::with_capacity(n);
        let mut amp = Vec::with_capacity(n);
        let mut phase = Vec::with_capacity(n);
        for _ in 0..n {
            level.push(std.sample(rng));
            let mut a = [0.0; HARMONICS];
            let mut ph = [0.0; HARMONICS];
            for h in 0..HARMONICS {
                a[h] = std.sample(rng) * 0.9 / (h as f64 + 1.0).sqrt();
                ph[h] = rng.random_range(0.0..2.0 * PI);
            }
            amp.push(a);
            phase.push(ph);
        }
        let risk = std.sample(rng) * 1.5;
        Self {
            level,
            amp,
            phase,
            risk,
        }
    }

    fn mean(&self, i: usize, t: f64, horizon: f64) -> f64 {
        let mut v = self.level[i];
        for h in 0..HARMONICS {
            let f = (h + 1) as f64;
            v += self.amp[i][h] * (2.0 * PI * f * t / horizon + self.phase[i][h]).sin();
        }
        v
    }
}

/// Complete (pre-missingness) cohort: one event per feature per hour.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let n = cfg.n_features;
    let horizon = cfg.horizon;
    let specs: Vec<(String, f64, f64)> = (0..n).map(feature_spec).collect();

    let mut shared = ChaCha8Rng::seed_from_u64(cfg.seed);
    shared.set_stream(0);
    let clusters_curves: Vec<ClusterCurves> = (0..cfg.n_clusters)
        .map(|_| ClusterCurves::sample(&mut shared, n))
        .collect();

    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let mut events = Vec::new();
    let mut statics = Vec::with_capacity(cfg.n_patients);
    let mut clusters = Vec::with_capacity(cfg.n_patients);
    let mut latent = Vec::with_capacity(cfg.n_patients);
    let mut risks = Vec::with_capacity(cfg.n_patients);
    let mut draws = Vec::with_capacity(cfg.n_patients);

    for p in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(p as u64 + 1);
        let id = patient_id(p);
        let k = rng.random_range(0..cfg.n_clusters);
        let curves = &clusters_curves[k];

        let mut z = ndarray::Array2::zeros((n, horizon));
        for i in 0..n {
            let offset = std.sample(&mut rng) * PERSONAL_OFFSET_SD;
            let wave = std.sample(&mut rng) * PERSONAL_WAVE_SD;
            let wave_phase = rng.random_range(0.0..2.0 * PI);
            for t in 0..horizon {
                let tf = t as f64;
                let smooth = curves.mean(i, tf, horizon as f64)
                    + offset
                    + wave * (2.0 * PI * tf / horizon as f64 + wave_phase).sin();
                z[[i, t]] = smooth;
                let noisy = smooth + std.sample(&mut rng) * NOISE_SD;
                let (_, mean, sd) = &specs[i];
                let jitter: f64 = rng.random_range(0.0..0.999);
                events.push(EventRecord {
                    patient_id: id.clone(),
                    feature_id: i,
                    time: tf + jitter,
                    value: mean + sd * noisy,
                });
            }
        }

        let summary_rows = n.min(2);
        let summary = z
            .slice(ndarray::s![..summary_rows, ..])
            .mean()
            .unwrap_or(0.0);
        risks.push(curves.risk + 0.8 * summary);
        draws.push(rng.random::<f64>());

        let age = (62.0
            + 6.0 * (k as f64 - (cfg.n_clusters as f64 - 1.0) / 2.0)
            + std.sample(&mut rng) * 12.0)
            .clamp(18.0, 95.0);
        let sex = SEXES[rng.random_range(0..SEXES.len())];
        let ethnicity = ETHNICITIES[rng.random_range(0..ETHNICITIES.len())];
        let diagnosis = if rng.random::<f64>() < 0.7 {
            DIAGNOSES[k % DIAGNOSES.len()]
        } else {
            DIAGNOSES[rng.random_range(0..DIAGNOSES.len())]
        };
        statics.push(StaticRecord {
            patient_id: id,
            age: (age * 10.0).round() / 10.0,
            sex: sex.to_string(),
            ethnicity: ethnicity.to_string(),
            diagnosis: diagnosis.to_string(),
        });
        clusters.push(k);
        latent.push(z);
    }

    let intercept = calibrate_intercept(&risks, cfg.mortality_base_rate);
    let labels = risks
        .iter()
        .zip(&draws)
        .enumerate()
        .map(|(p, (&r, &u))| {
            (
                patient_id(p),
                u8::from(u < crate::autodiff::sigmoid(intercept + r)),
            )
        })
        .collect();

    Ok(SynthCohort {
        feature_names: specs.into_iter().map(|s| s.0).collect(),
        horizon,
        events,
        shadow: Vec::new(),
        statics,
        labels,
        clusters,
        latent,
    })
}

/// Intercept `b` with `mean(sigmoid(b + risk)) = rate`, by bisection.
fn calibrate_intercept(risks: &[f64], rate: f64) -> f64 {
    let mean_prob = |b: f64| {
        risks
            .iter()
            .map(|&r| crate::autodiff::sigmoid(b + r))
            .sum::<f64>()
            / risks.len() as f64
    };
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Deletes each event independently. The deletion log-odds are
/// `logit(missing_rate) + mnar_strength * (|z| - mean|z|)` where `z` is the
/// event value standardized per feature over the cohort. Deleted events are
/// moved to `shadow`.
pub fn apply_missingness(
    mut cohort: SynthCohort,
    missing_rate: f64,
    mnar_strength: f64,
    seed: u64,
) -> Result<SynthCohort> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!(
            "missing_rate must be in [0, 1), got {missing_rate}"
        )));
    }
    if !(mnar_strength >= 0.0 && mnar_strength.is_finite()) {
        return Err(Error::Config(format!(
            "mnar_strength must be >= 0, got {mnar_strength}"
        )));
    }
    if missing_rate == 0.0 {
        return Ok(cohort);
    }
    let n = cohort.feature_names.len();
    let mut sum = vec![0.0f64; n];
    let mut sum_sq = vec![0.0f64; n];
    let mut count = vec![0.0f64; n];
    for e in &cohort.events {
        sum[e.feature_id] += e.value;
        sum_sq[e.feature_id] += e.value * e.value;
        count[e.feature_id] += 1.0;
    }
    let mean: Vec<f64> = (0..n).map(|i| sum[i] / count[i].max(1.0)).collect();
    let sd: Vec<f64> = (0..n)
        .map(|i| {
            let var = sum_sq[i] / count[i].max(1.0) - mean[i] * mean[i];
            if var > 1e-12 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut abs_z_mean = vec![0.0; n];
    for e in &cohort.events {
        abs_z_mean[e.feature_id] += ((e.value - mean[e.feature_id]) / sd[e.feature_id]).abs();
    }
    for i in 0..n {
        abs_z_mean[i] /= count[i].max(1.0);
    }

    let base = (missing_rate / (1.0 - missing_rate)).ln();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut kept = Vec::with_capacity(cohort.events.len());
    for e in cohort.events.drain(..) {
        let z = ((e.value - mean[e.feature_id]) / sd[e.feature_id]).abs();
        let p = crate::autodiff::sigmoid(base + mnar_strength * (z - abs_z_mean[e.feature_id]));
        if rng.random::<f64>() < p {
            cohort.shadow.push(e);
        } else {
            kept.push(e);
        }
    }
    cohort.events = kept;
    Ok(cohort)
}

/// Generates and applies the configured missingness.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCohort> {
    let full = generate_cohort(cfg)?;
    apply_missingness(full, cfg.missing_rate, cfg.mnar_strength, cfg.seed)
}

/// Writes `events.csv`, `statics.csv`, `labels.csv`, `shadow_events.csv` and
/// `clusters.csv` into `dir`.
pub fn write_cohort_csvs(cohort: &SynthCohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    dataio::write_events(
        &dir.join("events.csv"),
        &dataio::records_to_rows(&cohort.events, &cohort.feature_names),
    )?;
    dataio::write_events(
        &dir.join("shadow_events.csv"),
        &dataio::records_to_rows(&cohort.shadow, &cohort.feature_names),
    )?;
    dataio::write_statics(&dir.join("statics.csv"), &cohort.statics)?;
    dataio::write_labels(&dir.join("labels.csv"), &cohort.labels)?;
    let mut wtr = csv::Writer::from_path(dir.join("clusters.csv"))?;
    wtr.write_record(["patient_id", "cluster"])?;
    for (s, k) in cohort.statics.iter().zip(&cohort.clusters) {
        wtr.write_record([s.patient_id.as_str(), &k.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: 100,
            n_features: 3,
            horizon: 12,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn patient_count_and_labels() {
        let c = generate_cohort(&small(1)).unwrap();
        assert_eq!(c.labels.len(), 100);
        assert_eq!(c.statics.len(), 100);
        assert_eq!(c.events.len(), 100 * 3 * 12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        write_cohort_csvs(&synthesize(&small(5)).unwrap(), dir_a.path()).unwrap();
        write_cohort_csvs(&synthesize(&small(5)).unwrap(), dir_b.path()).unwrap();
        for f in [
            "events.csv",
            "statics.csv",
            "labels.csv",
            "shadow_events.csv",
            "clusters.csv",
        ] {
            let a = std::fs::read(dir_a.path().join(f)).unwrap();
            let b = std::fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
    }

    #[test]
    fn single_cluster_has_no_subgroups() {
        let cfg = SynthConfig {
            n_clusters: 1,
            mnar_strength: 0.0,
            ..small(2)
        };
        let c = generate_cohort(&cfg).unwrap();
        assert!(c.clusters.iter().all(|&k| k == 0));
    }

    #[test]
    fn zero_rate_deletes_nothing() {
        let c = generate_cohort(&small(3)).unwrap();
        let total = c.events.len();
        let d = apply_missingness(c, 0.0, 2.0, 9).unwrap();
        assert_eq!(d.events.len(), total);
        assert!(d.shadow.is_empty());
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let c = generate_cohort(&small(3)).unwrap();
        assert!(apply_missingness(c.clone(), 1.0, 0.0, 0).is_err());
        assert!(apply_missingness(c, -0.1, 0.0, 0).is_err());
    }

    #[test]
    fn mcar_observed_fraction() {
        // 10^4 cells; binomial sd of the kept fraction is ~0.0046, so 0.02 is > 4 sd.
        let cfg = SynthConfig {
            n_patients: 100,
            n_features: 4,
            horizon: 25,
            ..small(11)
        };
        let c = generate_cohort(&cfg).unwrap();
        assert_eq!(c.events.len(), 10_000);
        let d = apply_missingness(c, 0.3, 0.0, 4).unwrap();
        let frac = d.events.len() as f64 / 10_000.0;
        assert!((frac - 0.7).abs() <= 0.02, "observed fraction {frac}");
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig {
            missing_rate: 1.0,
            ..small(0)
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            mortality_base_rate: 0.0,
            ..small(0)
        }
        .validate()
        .is_err());
        assert!(SynthConfig {
            n_clusters: 0,
            ..small(0)
        }
        .validate()
        .is_err());
        assert!(small(0).validate().is_ok());
    }
}
