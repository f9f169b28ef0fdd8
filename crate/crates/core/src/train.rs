//! Training loop, inference and evaluation.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::heads::dropout_mask;
use crate::metrics::{imputation_errors, prediction_metrics, EvalReport};
use crate::model::{Model, ModelConfig, Task, TrainInputs, Variant};
use crate::objectives::{augment, Augmentation};
use crate::optim::Adam;
use crate::tensorize::{PatientTensor, TensorCohort};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables
    /// early stopping.
    pub patience: usize,
    pub seed: u64,
    pub repeats: usize,
    /// Fraction of each patient's observed cells hidden for imputation
    /// evaluation.
    pub holdout_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: 0.0023,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            seed: 0,
            repeats: 10,
            holdout_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Dropout = 2,
    Augment = 3,
    Holdout = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Cohort ready for a run: visible tensors (held-out cells removed for the
/// imputation task) and the held-out cells themselves.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub task: Task,
    pub visible: Vec<PatientTensor>,
    /// Held-out `(feature, step)` cells per patient.
    pub eval_cells: Vec<Vec<(usize, usize)>>,
    /// Standardized values before hiding, the imputation targets.
    pub truth: Vec<Array2<f64>>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl Prepared {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Hides `round(fraction * observed)` randomly chosen observed cells of a
/// patient and rebuilds the derived matrices.
pub fn hold_out<R: rand::Rng + ?Sized>(
    p: &PatientTensor,
    fraction: f64,
    rng: &mut R,
) -> Result<(PatientTensor, Vec<(usize, usize)>)> {
    let observed: Vec<(usize, usize)> = p
        .mask
        .indexed_iter()
        .filter(|(_, &m)| m == 1.0)
        .map(|(ix, _)| ix)
        .collect();
    let k = (fraction * observed.len() as f64).round() as usize;
    let mut cells: Vec<(usize, usize)> = rand::seq::index::sample(rng, observed.len(), k)
        .into_iter()
        .map(|i| observed[i])
        .collect();
    cells.sort_unstable();
    let mut mask = p.mask.clone();
    let mut values = p.values.clone();
    for &(i, t) in &cells {
        mask[[i, t]] = 0.0;
        values[[i, t]] = 0.0;
    }
    let visible =
        PatientTensor::from_parts(values, mask, p.delta.clone(), p.x_base.clone(), p.label)?;
    Ok((visible, cells))
}

pub fn prepare(cohort: &TensorCohort, cfg: &TrainConfig) -> Result<Prepared> {
    let task = cfg.model.task;
    let (visible, eval_cells) = match task {
        Task::Prediction => (
            cohort.patients.clone(),
            vec![Vec::new(); cohort.patients.len()],
        ),
        Task::Imputation => {
            let mut rng = stream_rng(cfg.seed, Stream::Holdout);
            let mut visible = Vec::with_capacity(cohort.patients.len());
            let mut cells = Vec::with_capacity(cohort.patients.len());
            for p in &cohort.patients {
                let (v, c) = hold_out(p, cfg.holdout_fraction, &mut rng)?;
                visible.push(v);
                cells.push(c);
            }
            (visible, cells)
        }
    };
    Ok(Prepared {
        task,
        visible,
        eval_cells,
        truth: cohort.patients.iter().map(|p| p.values.clone()).collect(),
        train: cohort.indices(&cohort.split.train)?,
        val: cohort.indices(&cohort.split.validation)?,
        test: cohort.indices(&cohort.split.test)?,
    })
}

/// Training batches: shuffled, last incomplete batch dropped. A training set
/// smaller than one batch forms a single batch.
pub fn train_batches<R: rand::Rng + ?Sized>(
    indices: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    order.shuffle(rng);
    if order.len() < batch_size {
        return if order.is_empty() {
            Vec::new()
        } else {
            vec![order]
        };
    }
    order.chunks_exact(batch_size).map(|c| c.to_vec()).collect()
}

/// Inference batches in index order; a trailing single patient joins the
/// previous batch so every batch can form a graph.
pub fn eval_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = indices.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub contrastive_loss: Option<f64>,
    /// Validation AUPRC (prediction) or held-out MSE (imputation).
    pub val_metric: Option<f64>,
}

/// RNG stream positions at the end of training.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub shuffle: String,
    pub dropout: String,
    pub augment: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept (1-based; 0 = initial parameters).
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub streams: StreamState,
}

fn patients_at<'a>(data: &'a Prepared, idx: &[usize]) -> Vec<&'a PatientTensor> {
    idx.iter().map(|&i| &data.visible[i]).collect()
}

pub fn train(cohort: &TensorCohort, data: &Prepared, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let mut model = Model::new(
        cfg.model.clone(),
        cohort.n_features(),
        cohort.static_width(),
        cfg.seed,
    )?;
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut shuffle = stream_rng(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(cfg.seed, Stream::Dropout);
    let mut augment_rng = stream_rng(cfg.seed, Stream::Augment);
    let paired = cfg.model.task == Task::Imputation && cfg.model.uses_contrastive();
    let horizon = cohort.horizon;

    let mut best_score = validation_score(&model, data, cfg)?;
    let mut best = (model.store.clone(), adam.clone(), 0usize);
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        epochs_run = epoch;
        let (mut loss_sum, mut task_sum, mut con_sum, mut n) = (0.0, 0.0, 0.0, 0.0);
        for idx in train_batches(&data.train, cfg.batch_size, &mut shuffle) {
            let originals = patients_at(data, &idx);
            let batch = if paired {
                let mut views = Vec::with_capacity(2 * originals.len());
                for p in &originals {
                    views.push((*p).clone());
                    views.push(augment(p, Augmentation::sample(horizon, &mut augment_rng))?);
                }
                Batch::from_patients(&views.iter().collect::<Vec<_>>())?
            } else {
                Batch::from_patients(&originals)?
            };
            let mask = (cfg.model.task == Task::Prediction && cfg.model.dropout > 0.0).then(|| {
                dropout_mask(
                    (batch.size, model.width()),
                    cfg.model.dropout,
                    &mut dropout_rng,
                )
            });
            let mut g = Graph::new();
            let f = model.forward(
                &mut g,
                &batch,
                Some(TrainInputs {
                    dropout: mask.as_ref(),
                    paired,
                }),
            )?;
            let losses = f.losses.expect("training forward has losses");
            let total = g.scalar(losses.total);
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {total} at epoch {epoch}; lower the learning rate"
                )));
            }
            let grads = g.backward(losses.total);
            adam.step(&mut model.store, &grads);
            loss_sum += total;
            task_sum += g.scalar(losses.task);
            con_sum += losses.contrastive.map_or(0.0, |c| g.scalar(c));
            n += 1.0;
        }
        let score = validation_score(&model, data, cfg)?;
        log::debug!("epoch {epoch}: loss {:.6} val {score:?}", loss_sum / n);
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n,
            task_loss: task_sum / n,
            contrastive_loss: cfg.model.uses_contrastive().then_some(con_sum / n),
            val_metric: score.map(|s| s.abs()),
        });
        match (score, best_score) {
            (Some(s), Some(b)) if s <= b => {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
            (Some(_), _) | (None, _) => {
                best_score = score;
                best = (model.store.clone(), adam.clone(), epoch);
                since_best = 0;
            }
        }
    }
    let (store, optimizer, best_epoch) = best;
    model.store = store;
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        best_epoch,
        epochs_run,
        streams: StreamState {
            shuffle: shuffle.get_word_pos().to_string(),
            dropout: dropout_rng.get_word_pos().to_string(),
            augment: augment_rng.get_word_pos().to_string(),
        },
    })
}

/// Higher is better: AUPRC for prediction, negative held-out MSE for
/// imputation. `None` when the validation split cannot be scored.
fn validation_score(model: &Model, data: &Prepared, cfg: &TrainConfig) -> Result<Option<f64>> {
    if data.val.len() < 2 {
        return Ok(None);
    }
    match cfg.model.task {
        Task::Prediction => {
            let scores = predict_proba(model, data, &data.val, cfg.batch_size)?;
            let labels: Vec<u8> = data.val.iter().map(|&i| data.visible[i].label).collect();
            Ok(crate::metrics::auprc(&scores, &labels).ok())
        }
        Task::Imputation => {
            let grids = impute_patients(model, data, &data.val, cfg.batch_size)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for (k, &i) in data.val.iter().enumerate() {
                for &(f, t) in &data.eval_cells[i] {
                    sum += (grids[k][[f, t]] - truth_value(data, i, f, t)).powi(2);
                    count += 1;
                }
            }
            Ok((count > 0).then(|| -sum / count as f64))
        }
    }
}

fn truth_value(data: &Prepared, patient: usize, f: usize, t: usize) -> f64 {
    data.truth[patient][[f, t]]
}

/// Positive-class probability for each listed patient.
pub fn predict_proba(
    model: &Model,
    data: &Prepared,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for idx in eval_batches(indices, batch_size) {
        let batch = Batch::from_patients(&patients_at(data, &idx))?;
        let mut g = Graph::new();
        let f = model.forward(&mut g, &batch, None)?;
        let probs = g.value(
            f.probs
                .ok_or_else(|| Error::Config("model is not a prediction model".into()))?,
        );
        out.extend(probs.column(1).iter().copied());
    }
    Ok(out)
}

/// Standardized `N x T` reconstructions for each listed patient.
pub fn impute_patients(
    model: &Model,
    data: &Prepared,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for idx in eval_batches(indices, batch_size) {
        let batch = Batch::from_patients(&patients_at(data, &idx))?;
        let mut g = Graph::new();
        let f = model.forward(&mut g, &batch, None)?;
        let v_hat = g.value(
            f.v_hat
                .ok_or_else(|| Error::Config("model is not an imputation model".into()))?,
        );
        for b in 0..batch.size {
            out.push(batch.patient_grid(v_hat, b));
        }
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model,
    cohort: &TensorCohort,
    data: &Prepared,
    split: Split,
    batch_size: usize,
) -> Result<EvalReport> {
    let idx = data.indices(split);
    if idx.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} split is empty",
            split.name()
        )));
    }
    let task = model.config.task;
    let mut report = EvalReport {
        task: task.name().into(),
        variant: model.config.variant.name().into(),
        split: split.name().into(),
        imputation: None,
        prediction: None,
    };
    match task {
        Task::Prediction => {
            let scores = predict_proba(model, data, idx, batch_size)?;
            let labels: Vec<u8> = idx.iter().map(|&i| data.visible[i].label).collect();
            report.prediction = Some(prediction_metrics(&scores, &labels)?);
        }
        Task::Imputation => {
            let grids = impute_patients(model, data, idx, batch_size)?;
            let (mut pred, mut truth) = (Vec::new(), Vec::new());
            for (k, &i) in idx.iter().enumerate() {
                for &(f, t) in &data.eval_cells[i] {
                    pred.push(cohort.stats.destandardize(f, grids[k][[f, t]]));
                    truth.push(cohort.stats.destandardize(f, truth_value(data, i, f, t)));
                }
            }
            report.imputation = Some(imputation_errors(&pred, &truth)?);
        }
    }
    Ok(report)
}

/// Trains and evaluates the three variants over `repeats` seeds starting at
/// `cfg.seed`; returns one list of test reports per variant.
pub fn ablate(cohort: &TensorCohort, cfg: &TrainConfig) -> Result<Vec<(Variant, Vec<EvalReport>)>> {
    let mut out: Vec<(Variant, Vec<EvalReport>)> =
        Variant::ALL.iter().map(|&v| (v, Vec::new())).collect();
    for r in 0..cfg.repeats as u64 {
        for (variant, reports) in out.iter_mut() {
            let mut run = cfg.clone();
            run.seed = cfg.seed + r;
            run.model.variant = *variant;
            let data = prepare(cohort, &run)?;
            let outcome = train(cohort, &data, &run)?;
            reports.push(evaluate(
                &outcome.model,
                cohort,
                &data,
                Split::Test,
                run.batch_size,
            )?);
        }
    }
    Ok(out)
}
