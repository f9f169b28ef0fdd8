//! Evaluation metrics and report formatting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve from average ranks (ties count one half).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks are kept doubled so that tie averages stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u64;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += avg2 * positives;
        i = j + 1;
    }
    let p = pos as u64;
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / 2.0 / (pos as f64 * neg as f64))
}

/// Average precision: `sum_k (R_k - R_{k-1}) P_k` over distinct score
/// thresholds taken in decreasing order.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_scores(scores, labels)?;
    if pos == 0 {
        return Err(Error::Degenerate(
            "AUPRC needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_tp = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        tp += group_tp;
        seen += j - i + 1;
        if group_tp > 0 {
            ap += (group_tp as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j + 1;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputationMetrics {
    pub mae: f64,
    pub mre: f64,
    pub cells: usize,
}

/// MAE and MRE over paired raw-unit values.
pub fn imputation_errors(predicted: &[f64], truth: &[f64]) -> Result<ImputationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Degenerate("no evaluation cells".into()));
    }
    let abs_err: f64 = predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum();
    let abs_truth: f64 = truth.iter().map(|t| t.abs()).sum();
    if abs_truth == 0.0 {
        return Err(Error::Degenerate(
            "MRE is undefined when every target is zero".into(),
        ));
    }
    Ok(ImputationMetrics {
        mae: abs_err / predicted.len() as f64,
        mre: abs_err / abs_truth,
        cells: predicted.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub patients: usize,
}

pub fn prediction_metrics(scores: &[f64], labels: &[u8]) -> Result<PredictionMetrics> {
    Ok(PredictionMetrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        patients: scores.len(),
    })
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Degenerate("no values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub variant: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub imputation: Option<ImputationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prediction: Option<PredictionMetrics>,
}

impl EvalReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(m) = &self.imputation {
            out.push(("mae", m.mae));
            out.push(("mre", m.mre));
        }
        if let Some(m) = &self.prediction {
            out.push(("auroc", m.auroc));
            out.push(("auprc", m.auprc));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{} / {} / {}\n", self.task, self.variant, self.split);
        for (name, v) in self.values() {
            let _ = writeln!(s, "  {name:<6} {v:.4}");
        }
        s
    }
}

/// One row of an ablation table: per-metric mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub runs: usize,
    pub metrics: Vec<(String, f64, f64)>,
}

pub fn aggregate(variant: &str, reports: &[EvalReport]) -> Result<AggregateRow> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Degenerate("no runs to aggregate".into()))?;
    let names: Vec<&str> = first.values().iter().map(|(n, _)| *n).collect();
    let mut metrics = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let vals: Vec<f64> = reports.iter().map(|r| r.values()[k].1).collect();
        let (m, s) = mean_std(&vals)?;
        metrics.push((name.to_string(), m, s));
    }
    Ok(AggregateRow {
        variant: variant.to_string(),
        runs: reports.len(),
        metrics,
    })
}

pub fn format_table(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let Some(first) = rows.first() else {
        return s;
    };
    let _ = write!(s, "{:<16}", "variant");
    for (name, _, _) in &first.metrics {
        let _ = write!(s, " {:>18}", name);
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{:<16}", row.variant);
        for (_, m, sd) in &row.metrics {
            let _ = write!(s, " {:>18}", format!("{m:.4} ± {sd:.4}"));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_examples() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert!(auroc(&[0.2, 0.3], &[1, 1]).is_err());
    }

    #[test]
    fn auprc_hand_examples() {
        let ap = auprc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((ap - (0.5 * 1.0 + 0.5 * (2.0 / 3.0))).abs() < 1e-15);
        assert_eq!(auprc(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        // one tie group holding everything: precision is the prevalence
        assert_eq!(auprc(&[0.5; 4], &[1, 0, 0, 0]).unwrap(), 0.25);
        assert!(auprc(&[0.5, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn imputation_errors_hand_example() {
        let m = imputation_errors(&[1.0, 2.0, 4.0], &[1.5, 2.0, 2.0]).unwrap();
        assert!((m.mae - 2.5 / 3.0).abs() < 1e-15);
        assert!((m.mre - 2.5 / 5.5).abs() < 1e-15);
        assert!(imputation_errors(&[1.0], &[0.0]).is_err());
        assert!(imputation_errors(&[], &[]).is_err());
    }

    #[test]
    fn mean_std_uses_sample_deviation() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]).unwrap(), (7.0, 0.0));
    }

    #[test]
    fn table_lists_metrics_in_fixed_order() {
        let r = EvalReport {
            task: "prediction".into(),
            variant: "full".into(),
            split: "test".into(),
            imputation: None,
            prediction: Some(PredictionMetrics {
                auroc: 0.8,
                auprc: 0.4,
                patients: 10,
            }),
        };
        let t = r.to_table();
        assert!(t.find("auroc").unwrap() < t.find("auprc").unwrap());
        let row = aggregate("full", &[r.clone(), r]).unwrap();
        assert_eq!(row.metrics[0], ("auroc".to_string(), 0.8, 0.0));
        assert!(format_table(&[row]).contains("0.8000 ± 0.0000"));
    }
}
