//! End-to-end network for one task: encoder, optional similar-patient graph,
//! and the task head, with the composite training objective.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::batch::Batch;
use crate::encoder::{encode, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::{classify, impute, neighbor_context, ClassifierParams, ImputeParams};
use crate::objectives::{
    composite, cross_entropy, masked_mse, ntxent_loss, supcon_loss, SupConVariant,
};
use crate::params::ParamStore;
use crate::stratgraph::{
    build_graph, concat_static, concat_static_seq, fuse, gcn, GraphOptions, GraphParams,
    SimilarityGraph, StaticParams,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Imputation,
    Prediction,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Imputation => "imputation",
            Task::Prediction => "prediction",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    NoGraph,
    NoContrastive,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoGraph, Variant::NoContrastive];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoGraph => "no_graph",
            Variant::NoContrastive => "no_contrastive",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub task: Task,
    pub variant: Variant,
    /// Per-feature embedding width `d`.
    pub embed_dim: usize,
    /// Width of the static-feature embedding.
    pub static_dim: usize,
    pub gcn_hidden: (usize, usize),
    /// Hidden width of the neighbour-context networks.
    pub neighbor_dim: usize,
    pub phi_init: f64,
    pub graph: GraphOptions,
    pub temperature: f64,
    pub lambda: f64,
    pub supcon: SupConVariant,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Imputation,
            variant: Variant::Full,
            embed_dim: 3,
            static_dim: 8,
            gcn_hidden: (34, 55),
            neighbor_dim: 28,
            phi_init: 0.56,
            graph: GraphOptions::default(),
            temperature: 0.07,
            lambda: 0.8,
            supcon: SupConVariant::ClassWeighted,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("static_dim", self.static_dim),
            ("gcn_hidden.0", self.gcn_hidden.0),
            ("gcn_hidden.1", self.gcn_hidden.1),
            ("neighbor_dim", self.neighbor_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.phi_init.is_finite() {
            return Err(Error::Config("phi_init must be finite".into()));
        }
        Ok(())
    }

    /// Weight of the task loss; the contrastive term is dropped entirely in
    /// the `no_contrastive` variant.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::NoContrastive => 1.0,
            _ => self.lambda,
        }
    }

    pub fn uses_graph(&self) -> bool {
        self.variant != Variant::NoGraph
    }

    pub fn uses_contrastive(&self) -> bool {
        self.effective_lambda() < 1.0
    }
}

/// How often the graph stages ran during a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardStats {
    pub similarity_evals: usize,
    pub gcn_evals: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: NodeId,
    pub task: NodeId,
    pub contrastive: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Fused representation: `B x D` for prediction, `(B*T) x D` for imputation.
    pub fused: NodeId,
    pub graph: Option<SimilarityGraph>,
    /// GCN output, same row layout as `fused`.
    pub neighbors: Option<NodeId>,
    pub gamma: Option<NodeId>,
    pub probs: Option<NodeId>,
    pub v_hat: Option<NodeId>,
    pub losses: Option<Losses>,
    pub stats: ForwardStats,
}

/// Training-only inputs of a forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainInputs<'a> {
    /// Dropout mask for the classifier input (prediction).
    pub dropout: Option<&'a Array2<f64>>,
    /// Patients `2k` and `2k + 1` are an original and its augmented view
    /// (imputation with the contrastive term).
    pub paired: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub n_features: usize,
    pub static_width: usize,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub statics: StaticParams,
    pub graph: Option<GraphParams>,
    pub classifier: Option<ClassifierParams>,
    pub imputer: Option<ImputeParams>,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        n_features: usize,
        static_width: usize,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_features == 0 {
            return Err(Error::Config("model needs at least one feature".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let encoder = EncoderParams::init(&mut store, n_features, d, &mut rng);
        let statics = StaticParams::init(&mut store, static_width, config.static_dim, &mut rng);
        let width = n_features * d + config.static_dim;
        let graph = config.uses_graph().then(|| {
            GraphParams::init(
                &mut store,
                width,
                config.gcn_hidden,
                config.phi_init,
                &mut rng,
            )
        });
        let (classifier, imputer) = match config.task {
            Task::Prediction => (
                Some(ClassifierParams::init(&mut store, width, &mut rng)),
                None,
            ),
            Task::Imputation => (
                None,
                Some(ImputeParams::init(
                    &mut store,
                    n_features,
                    d,
                    config.neighbor_dim,
                    width,
                    &mut rng,
                )),
            ),
        };
        Ok(Self {
            config,
            n_features,
            static_width,
            store,
            encoder,
            statics,
            graph,
            classifier,
            imputer,
        })
    }

    /// Width `D = N*d + d_g` of the fused representation.
    pub fn width(&self) -> usize {
        self.n_features * self.config.embed_dim + self.config.static_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        train: Option<TrainInputs>,
    ) -> Result<Forward> {
        let store = &self.store;
        let cfg = &self.config;
        let t = batch.horizon;
        let enc = encode(g, store, &self.encoder, batch)?;
        let e_base = self.statics.embed(g, store, &batch.x_base)?;
        let pooled = concat_static(g, enc.pooled.pooled, e_base)?;
        let mut stats = ForwardStats::default();

        let (fused, graph, neighbors, gamma) = match (&self.graph, cfg.task) {
            (None, Task::Prediction) => (pooled, None, None, None),
            (None, Task::Imputation) => (
                concat_static_seq(g, enc.attention.seq, e_base, t)?,
                None,
                None,
                None,
            ),
            (Some(gp), task) => {
                let sg = build_graph(g, store, gp, &cfg.graph, pooled)?;
                stats.similarity_evals += 1;
                let (x, horizon) = match task {
                    Task::Prediction => (pooled, None),
                    Task::Imputation => {
                        (concat_static_seq(g, enc.attention.seq, e_base, t)?, Some(t))
                    }
                };
                let neigh = gcn(g, store, gp, sg.adjacency, x, horizon)?;
                stats.gcn_evals += 1;
                let f = fuse(g, store, gp, x, neigh)?;
                (f.output, Some(sg), Some(neigh), Some(f.gamma))
            }
        };

        let lambda = cfg.effective_lambda();
        match cfg.task {
            Task::Prediction => {
                let cp = self
                    .classifier
                    .as_ref()
                    .expect("prediction model has a classifier");
                let dropout = train.and_then(|ti| ti.dropout);
                let pred = classify(g, store, cp, fused, dropout)?;
                let losses = match train {
                    None => None,
                    Some(_) => {
                        let task = cross_entropy(g, pred.logits, &batch.labels)?;
                        let contrastive = if cfg.uses_contrastive() {
                            Some(supcon_loss(
                                g,
                                fused,
                                &batch.labels,
                                cfg.temperature,
                                cfg.supcon,
                            )?)
                        } else {
                            None
                        };
                        Some(Losses {
                            total: composite(g, task, contrastive, lambda)?,
                            task,
                            contrastive,
                        })
                    }
                };
                Ok(Forward {
                    fused,
                    graph,
                    neighbors,
                    gamma,
                    probs: Some(pred.probs),
                    v_hat: None,
                    losses,
                    stats,
                })
            }
            Task::Imputation => {
                let ip = self
                    .imputer
                    .as_ref()
                    .expect("imputation model has an imputer");
                let context = neighbor_context(g, store, ip, batch);
                let v_hat = impute(g, store, ip, fused, context)?;
                let losses = match train {
                    None => None,
                    Some(ti) => {
                        let mut mask = batch.mask.clone();
                        if ti.paired {
                            if !batch.size.is_multiple_of(2) {
                                return Err(Error::Shape(
                                    "paired batch must have an even size".into(),
                                ));
                            }
                            for b in (1..batch.size).step_by(2) {
                                mask.slice_mut(ndarray::s![b * t..(b + 1) * t, ..])
                                    .fill(0.0);
                            }
                        }
                        let task = masked_mse(g, v_hat, &batch.values, &mask)?;
                        let contrastive = if ti.paired && cfg.uses_contrastive() {
                            let summed = g.group_sum_rows(fused, t);
                            let mean = g.scale(summed, 1.0 / t as f64);
                            Some(ntxent_loss(g, mean, cfg.temperature)?)
                        } else {
                            None
                        };
                        Some(Losses {
                            total: composite(g, task, contrastive, lambda)?,
                            task,
                            contrastive,
                        })
                    }
                };
                Ok(Forward {
                    fused,
                    graph,
                    neighbors,
                    gamma,
                    probs: None,
                    v_hat: Some(v_hat),
                    losses,
                    stats,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorize::PatientTensor;
    use ndarray::Array1;
    use rand::Rng;

    fn patients(b: usize, n: usize, t: usize, seed: u64) -> Vec<PatientTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..b)
            .map(|k| {
                let mask = Array2::from_shape_fn((n, t), |_| {
                    if rng.random::<f64>() < 0.7 {
                        1.0
                    } else {
                        0.0
                    }
                });
                let values = Array2::from_shape_fn((n, t), |_| rng.random_range(-2.0..2.0)) * &mask;
                let x = Array1::from_shape_fn(3, |_| rng.random::<f64>());
                PatientTensor::from_grid(values, mask, 1.0, x, (k % 2) as u8).unwrap()
            })
            .collect()
    }

    fn batch(ps: &[PatientTensor]) -> Batch {
        Batch::from_patients(&ps.iter().collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn no_graph_variant_never_builds_the_graph() {
        for task in [Task::Prediction, Task::Imputation] {
            let cfg = ModelConfig {
                task,
                variant: Variant::NoGraph,
                ..Default::default()
            };
            let m = Model::new(cfg, 3, 3, 0).unwrap();
            assert!(m.graph.is_none());
            assert!(m.store.id("graph.phi").is_none());
            let b = batch(&patients(4, 3, 5, 1));
            let mut g = Graph::new();
            let train = TrainInputs {
                dropout: None,
                paired: task == Task::Imputation,
            };
            let f = m.forward(&mut g, &b, Some(train)).unwrap();
            assert_eq!(f.stats, ForwardStats::default());
            assert!(f.graph.is_none());
            let expected_rows = if task == Task::Prediction { 4 } else { 20 };
            assert_eq!(g.shape(f.fused), (expected_rows, m.width()));
        }
    }

    #[test]
    fn full_variant_runs_graph_once() {
        let m = Model::new(ModelConfig::default(), 3, 3, 0).unwrap();
        let b = batch(&patients(4, 3, 5, 2));
        let mut g = Graph::new();
        let f = m.forward(&mut g, &b, None).unwrap();
        assert_eq!(
            f.stats,
            ForwardStats {
                similarity_evals: 1,
                gcn_evals: 1
            }
        );
        assert!(f.losses.is_none());
        assert_eq!(g.shape(f.v_hat.unwrap()), (20, 3));
    }

    #[test]
    fn no_contrastive_loss_is_the_task_loss() {
        let cfg = ModelConfig {
            task: Task::Prediction,
            variant: Variant::NoContrastive,
            ..Default::default()
        };
        let m = Model::new(cfg, 3, 3, 0).unwrap();
        let b = batch(&patients(6, 3, 4, 3));
        let mut g = Graph::new();
        let f = m.forward(&mut g, &b, Some(TrainInputs::default())).unwrap();
        let l = f.losses.unwrap();
        assert!(l.contrastive.is_none());
        assert_eq!(g.scalar(l.total), g.scalar(l.task));
    }

    #[test]
    fn composite_matches_components() {
        let cfg = ModelConfig {
            task: Task::Prediction,
            ..Default::default()
        };
        let m = Model::new(cfg, 3, 3, 0).unwrap();
        let b = batch(&patients(6, 3, 4, 4));
        let mut g = Graph::new();
        let l = m
            .forward(&mut g, &b, Some(TrainInputs::default()))
            .unwrap()
            .losses
            .unwrap();
        let expected = 0.8 * g.scalar(l.task) + 0.2 * g.scalar(l.contrastive.unwrap());
        assert!((g.scalar(l.total) - expected).abs() < 1e-12);
    }

    #[test]
    fn paired_imputation_scores_only_original_views() {
        let m = Model::new(ModelConfig::default(), 3, 3, 0).unwrap();
        let b = batch(&patients(4, 3, 4, 5));
        let mut g = Graph::new();
        let f = m
            .forward(
                &mut g,
                &b,
                Some(TrainInputs {
                    dropout: None,
                    paired: true,
                }),
            )
            .unwrap();
        let l = f.losses.unwrap();
        let v_hat = g.value(f.v_hat.unwrap());
        let (mut sum, mut count) = (0.0, 0.0);
        for patient in [0, 2] {
            for r in patient * 4..(patient + 1) * 4 {
                for c in 0..3 {
                    if b.mask[[r, c]] == 1.0 {
                        sum += (v_hat[[r, c]] - b.values[[r, c]]).powi(2);
                        count += 1.0;
                    }
                }
            }
        }
        assert!((g.scalar(l.task) - sum / count).abs() < 1e-12);
        assert!(g.scalar(l.contrastive.unwrap()).is_finite());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("bogus".parse::<Variant>().is_err());
    }
}
