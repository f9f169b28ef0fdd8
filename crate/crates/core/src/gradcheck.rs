//! Central-difference verification of the analytic gradients of a model's
//! training loss.

use crate::autodiff::Graph;
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::model::{Model, TrainInputs};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Step actually used; smaller than requested when the probes at the
    /// requested step fell on different sides of a ReLU or threshold kink.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub requested_step: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    /// Entries that needed a reduced step.
    pub fn reduced(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.step < self.requested_step)
            .count()
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn probe(model: &Model, batch: &Batch, train: TrainInputs) -> Result<(f64, Vec<bool>)> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, batch, Some(train))?;
    let l = f.losses.expect("training forward has losses").total;
    Ok((g.scalar(l), g.activation_pattern()))
}

const MIN_STEP: f64 = 1e-7;

/// Compares every scalar parameter's analytic gradient with
/// `(L(w + h) - L(w - h)) / 2h`. Parameters named in `exclude` are skipped
/// (the graph threshold, whose gradient is a surrogate of a step function).
///
/// The difference quotient is only meaningful when both probes stay on the
/// base point's smooth piece. When a probe flips a ReLU unit or a graph edge,
/// the step is divided by 10 until it no longer does (down to `1e-7`).
pub fn check_gradients(
    model: &Model,
    batch: &Batch,
    train: TrainInputs,
    step: f64,
    floor: f64,
    exclude: &[&str],
) -> Result<GradCheckReport> {
    let mut g = Graph::new();
    let f = model.forward(&mut g, batch, Some(train))?;
    let loss = f
        .losses
        .ok_or_else(|| Error::InvalidInput("gradient check needs a training forward".into()))?
        .total;
    let grads = g.backward(loss);
    let pattern = g.activation_pattern();
    let mut probed = model.clone();
    let mut entries = Vec::new();
    for id in model.store.ids() {
        if exclude.contains(&model.store.name(id)) {
            continue;
        }
        let shape = model.store.get(id).dim();
        let analytic = grads
            .param(id)
            .cloned()
            .unwrap_or_else(|| ndarray::Array2::zeros(shape));
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let orig = model.store.get(id)[[r, c]];
                let mut h = step;
                let numeric = loop {
                    probed.store.get_mut(id)[[r, c]] = orig + h;
                    let (up, up_pattern) = probe(&probed, batch, train)?;
                    probed.store.get_mut(id)[[r, c]] = orig - h;
                    let (down, down_pattern) = probe(&probed, batch, train)?;
                    probed.store.get_mut(id)[[r, c]] = orig;
                    let smooth = up_pattern == pattern && down_pattern == pattern;
                    if smooth || h / 10.0 < MIN_STEP {
                        break (up - down) / (2.0 * h);
                    }
                    h /= 10.0;
                };
                let a = analytic[[r, c]];
                entries.push(GradCheckEntry {
                    param: model.store.name(id).to_string(),
                    index: (r, c),
                    analytic: a,
                    numeric,
                    rel_err: relative_error(a, numeric, floor),
                    step: h,
                });
            }
        }
    }
    Ok(GradCheckReport {
        entries,
        requested_step: step,
    })
}
