use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensorize::PatientTensor;

/// `B` patients stacked in the row layout used by the network: every
/// time-indexed matrix is `(B*T) x N` with row `b*T + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub n_features: usize,
    pub horizon: usize,
    pub values: Array2<f64>,
    pub mask: Array2<f64>,
    pub delta: Array2<f64>,
    pub delta_last: Array2<f64>,
    pub delta_next: Array2<f64>,
    pub v_last: Array2<f64>,
    pub v_next: Array2<f64>,
    pub x_base: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn from_patients(patients: &[&PatientTensor]) -> Result<Self> {
        let first = patients
            .first()
            .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (n, t) = first.values.dim();
        let g = first.x_base.len();
        let b = patients.len();
        let stack = |pick: fn(&PatientTensor) -> &Array2<f64>| -> Result<Array2<f64>> {
            let mut out = Array2::zeros((b * t, n));
            for (k, p) in patients.iter().enumerate() {
                let m = pick(p);
                if m.dim() != (n, t) {
                    return Err(Error::Shape(format!(
                        "patient {k} has grid {:?}, batch expects {:?}",
                        m.dim(),
                        (n, t)
                    )));
                }
                out.slice_mut(ndarray::s![k * t..(k + 1) * t, ..])
                    .assign(&m.t());
            }
            Ok(out)
        };
        let values = stack(|p| &p.values)?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch values".into()));
        }
        let mut x_base = Array2::zeros((b, g));
        for (k, p) in patients.iter().enumerate() {
            if p.x_base.len() != g {
                return Err(Error::Shape(format!(
                    "patient {k} static width {} != {g}",
                    p.x_base.len()
                )));
            }
            x_base.row_mut(k).assign(&p.x_base);
        }
        Ok(Self {
            size: b,
            n_features: n,
            horizon: t,
            values,
            mask: stack(|p| &p.mask)?,
            delta: stack(|p| &p.delta)?,
            delta_last: stack(|p| &p.delta_last)?,
            delta_next: stack(|p| &p.delta_next)?,
            v_last: stack(|p| &p.v_last)?,
            v_next: stack(|p| &p.v_next)?,
            x_base,
            labels: patients.iter().map(|p| p.label).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.size * self.horizon
    }

    /// `N x T` slice of a stacked matrix for patient `b`.
    pub fn patient_grid(&self, stacked: &Array2<f64>, b: usize) -> Array2<f64> {
        stacked
            .slice(ndarray::s![b * self.horizon..(b + 1) * self.horizon, ..])
            .t()
            .to_owned()
    }
}
