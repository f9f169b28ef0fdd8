//! Tensor container: a safetensors file of named little-endian `f64` arrays
//! with a single `meta` header entry holding a JSON document.
//!
//! Cohort archives carry `v, m, delta, delta_last, delta_next, v_last, v_next`
//! as `[P, N, T]`, `x_base` as `[P, g]` and `y` as `[P]`; a sidecar
//! `<name>.json` next to the archive stores ids, vocabularies, normalization
//! statistics and the split.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorize::{CohortSplit, FeatureStats, PatientTensor, StaticVocab, TensorCohort};

pub const COHORT_FORMAT: &str = "stratimpute-cohort/1";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_array2(a: &Array2<f64>) -> Self {
        Self {
            shape: vec![a.nrows(), a.ncols()],
            data: a.as_standard_layout().iter().copied().collect(),
        }
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        match self.shape.as_slice() {
            [r, c] => Array2::from_shape_vec((*r, *c), self.data.clone())
                .map_err(|e| Error::Archive(e.to_string())),
            other => Err(Error::Archive(format!(
                "expected a 2-d array, got shape {other:?}"
            ))),
        }
    }
}

/// Named arrays plus a JSON metadata string.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorArchive {
    pub arrays: BTreeMap<String, NamedArray>,
    pub meta: String,
}

impl TensorArchive {
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.into(), NamedArray { shape, data });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing array {name:?}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let bytes: Vec<(String, Vec<u8>)> = self
            .arrays
            .iter()
            .map(|(name, a)| {
                (
                    name.clone(),
                    a.data.iter().flat_map(|v| v.to_le_bytes()).collect(),
                )
            })
            .collect();
        let mut views = Vec::with_capacity(bytes.len());
        for ((name, buf), a) in bytes.iter().zip(self.arrays.values()) {
            views.push((
                name.clone(),
                TensorView::new(Dtype::F64, a.shape.clone(), buf)?,
            ));
        }
        let mut header = HashMap::new();
        header.insert("meta".to_string(), self.meta.clone());
        Ok(safetensors::serialize(views, Some(header))?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, metadata) = SafeTensors::read_metadata(bytes)?;
        let meta = metadata
            .metadata()
            .as_ref()
            .and_then(|m| m.get("meta").cloned())
            .unwrap_or_default();
        let st = SafeTensors::deserialize(bytes)?;
        let mut arrays = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F64 {
                return Err(Error::Archive(format!("array {name:?} is not f64")));
            }
            let data = view
                .data()
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.insert(
                name,
                NamedArray {
                    shape: view.shape().to_vec(),
                    data,
                },
            );
        }
        Ok(Self { arrays, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Sidecar of a cohort archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortSidecar {
    pub format: String,
    pub patient_ids: Vec<String>,
    pub feature_names: Vec<String>,
    pub horizon: usize,
    pub split: CohortSplit,
    pub stats: FeatureStats,
    pub vocab: StaticVocab,
    pub rejected_events: usize,
}

pub fn sidecar_path(archive: &Path) -> PathBuf {
    archive.with_extension("json")
}

const GRID_ARRAYS: [&str; 7] = [
    "v",
    "m",
    "delta",
    "delta_last",
    "delta_next",
    "v_last",
    "v_next",
];

fn grid_of<'a>(p: &'a PatientTensor, name: &str) -> &'a Array2<f64> {
    match name {
        "v" => &p.values,
        "m" => &p.mask,
        "delta" => &p.delta,
        "delta_last" => &p.delta_last,
        "delta_next" => &p.delta_next,
        "v_last" => &p.v_last,
        "v_next" => &p.v_next,
        _ => unreachable!("unknown grid {name}"),
    }
}

pub fn cohort_to_archive(cohort: &TensorCohort) -> Result<(TensorArchive, CohortSidecar)> {
    let p = cohort.patients.len();
    let n = cohort.n_features();
    let t = cohort.horizon;
    let g = cohort.static_width();
    let mut archive = TensorArchive::default();
    for name in GRID_ARRAYS {
        let mut data = Vec::with_capacity(p * n * t);
        for patient in &cohort.patients {
            data.extend(grid_of(patient, name).iter().copied());
        }
        archive.insert(name, vec![p, n, t], data);
    }
    let mut x = Vec::with_capacity(p * g);
    for patient in &cohort.patients {
        x.extend(patient.x_base.iter().copied());
    }
    archive.insert("x_base", vec![p, g], x);
    archive.insert(
        "y",
        vec![p],
        cohort.patients.iter().map(|p| p.label as f64).collect(),
    );
    let sidecar = CohortSidecar {
        format: COHORT_FORMAT.to_string(),
        patient_ids: cohort.patient_ids.clone(),
        feature_names: cohort.feature_names.clone(),
        horizon: t,
        split: cohort.split.clone(),
        stats: cohort.stats.clone(),
        vocab: cohort.vocab.clone(),
        rejected_events: cohort.rejected_events,
    };
    archive.meta = serde_json::to_string(&serde_json::json!({
        "format": COHORT_FORMAT,
        "patients": p,
        "features": n,
        "horizon": t,
        "static_width": g,
    }))?;
    Ok((archive, sidecar))
}

pub fn archive_to_cohort(archive: &TensorArchive, sidecar: CohortSidecar) -> Result<TensorCohort> {
    let p = sidecar.patient_ids.len();
    let n = sidecar.feature_names.len();
    let t = sidecar.horizon;
    let g = sidecar.vocab.width();
    let mut grids: BTreeMap<&str, Vec<Array2<f64>>> = BTreeMap::new();
    for name in GRID_ARRAYS {
        let a = archive.get(name)?;
        if a.shape != [p, n, t] {
            return Err(Error::Archive(format!(
                "array {name} has shape {:?}, sidecar implies {:?}",
                a.shape,
                [p, n, t]
            )));
        }
        let full = ndarray::Array3::from_shape_vec((p, n, t), a.data.clone())
            .map_err(|e| Error::Archive(e.to_string()))?;
        grids.insert(name, full.outer_iter().map(|v| v.to_owned()).collect());
    }
    let x = archive.get("x_base")?;
    if x.shape != [p, g] {
        return Err(Error::Archive(format!(
            "x_base has shape {:?}, expected {:?}",
            x.shape,
            [p, g]
        )));
    }
    let x = Array2::from_shape_vec((p, g), x.data.clone())
        .map_err(|e| Error::Archive(e.to_string()))?;
    let y = archive.get("y")?;
    if y.shape != [p] {
        return Err(Error::Archive(format!(
            "y has shape {:?}, expected [{p}]",
            y.shape
        )));
    }
    let mut take = |name: &str| {
        grids
            .get_mut(name)
            .expect("present")
            .drain(..)
            .collect::<Vec<_>>()
    };
    let (v, m, d, dl, dn, vl, vn) = (
        take("v"),
        take("m"),
        take("delta"),
        take("delta_last"),
        take("delta_next"),
        take("v_last"),
        take("v_next"),
    );
    let mut patients = Vec::with_capacity(p);
    for (i, (((((((values, mask), delta), delta_last), delta_next), v_last), v_next), xrow)) in v
        .into_iter()
        .zip(m)
        .zip(d)
        .zip(dl)
        .zip(dn)
        .zip(vl)
        .zip(vn)
        .zip(x.axis_iter(Axis(0)))
        .enumerate()
    {
        patients.push(PatientTensor {
            values,
            mask,
            delta,
            delta_last,
            delta_next,
            v_last,
            v_next,
            x_base: Array1::from(xrow.to_vec()),
            label: y.data[i] as u8,
        });
    }
    Ok(TensorCohort {
        patient_ids: sidecar.patient_ids,
        feature_names: sidecar.feature_names,
        horizon: t,
        patients,
        split: sidecar.split,
        stats: sidecar.stats,
        vocab: sidecar.vocab,
        rejected_events: sidecar.rejected_events,
    })
}

pub fn save_cohort(cohort: &TensorCohort, path: &Path) -> Result<()> {
    let (archive, sidecar) = cohort_to_archive(cohort)?;
    archive.save(path)?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_cohort(path: &Path) -> Result<TensorCohort> {
    if !path.exists() {
        return Err(Error::Archive(format!(
            "data archive {} not found",
            path.display()
        )));
    }
    let archive = TensorArchive::load(path)?;
    let sidecar: CohortSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if sidecar.format != COHORT_FORMAT {
        return Err(Error::Archive(format!(
            "unsupported cohort format {:?}",
            sidecar.format
        )));
    }
    archive_to_cohort(&archive, sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_bytes_round_trip_exactly() {
        let mut a = TensorArchive::default();
        a.insert("b", vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]);
        a.insert("a", vec![3], vec![1.0, 2.0, 3.0]);
        a.meta = "{\"k\":1}".into();
        let bytes = a.to_bytes().unwrap();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(
            back.get("b").unwrap().data[1].to_bits(),
            (-0.0f64).to_bits()
        );
    }

    #[test]
    fn missing_array_is_an_error() {
        assert!(TensorArchive::default().get("v").is_err());
    }
}
