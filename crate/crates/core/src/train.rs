//! Training loop, evaluation reports and checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{validation, Error, Result};
use crate::fusion::{total_loss, LossParts};
use crate::io::{read_json, write_json};
use crate::metrics::{mean_metrics, score_series, MetricOptions, SeriesMetrics};
use crate::model::{ModelConfig, PreparedSample, VetimeModel};
use crate::params::{Gradients, ParamStore, TensorRecord};
use crate::series::MultivariateSeries;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; the window losses are unstable without it.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 10,
            patience: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub metrics: MetricOptions,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            metrics: MetricOptions::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.encoder.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        if o.batch_size == 0 || o.max_epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("invalid moment parameters".into()));
        }
        if o.max_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store.ids().map(|id| Array2::zeros(store.get(id).dim())).collect();
        Self {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let lr = self.cfg.learning_rate;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= lr * (update + c.weight_decay * *p);
                });
        }
    }
}

/// Per-epoch training summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub parts: LossParts,
    pub val_vus_pr: Option<f64>,
    /// Mean total loss of every optimizer step in this epoch.
    pub step_losses: Vec<f64>,
}

/// Saved parameters plus the run that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    /// Epoch (0-based) whose parameters are stored.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    pub params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Self = read_json(path)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(validation(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c)
    }

    /// Rebuilds the model and loads the stored parameters.
    pub fn model(&self) -> Result<VetimeModel> {
        let mut m = VetimeModel::new(self.config.model.clone())?;
        m.store.load_records(&self.params)?;
        Ok(m)
    }

    /// Serialized form; byte-identical across identical runs.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn require_labels(set: &[MultivariateSeries], what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(validation(format!("{what} set is empty")));
    }
    if let Some(i) = set.iter().position(|s| s.labels.is_none()) {
        return Err(validation(format!("{what} series {i} has no labels")));
    }
    Ok(())
}

/// Loss and gradient of one sample.
pub fn sample_gradients(model: &VetimeModel, s: &PreparedSample) -> Result<(f64, LossParts, Gradients)> {
    let mut t = Tape::new(&model.store);
    let fv = model.forward(&mut t, s, true)?;
    let (loss, parts) = model.loss(&mut t, s, &fv)?;
    Ok((t.scalar(loss), parts, t.backward(loss)))
}

/// Mean validation VUS-PR of the current parameters.
fn validation_score(model: &VetimeModel, val: &[PreparedSample], opts: &MetricOptions) -> Result<f64> {
    let mut total = 0.0;
    for s in val {
        let inf = model.infer_prepared(s)?;
        let labels = s.labels.as_deref().expect("validated labels");
        total += crate::metrics::vus_pr(&inf.scores, labels, opts.max_buffer)?;
    }
    Ok(total / val.len() as f64)
}

/// Trains with early stopping on mean validation VUS-PR and returns the best
/// checkpoint. An empty validation set trains for `max_epochs` and keeps the
/// final parameters.
pub fn train(cfg: &RunConfig, train_set: &[MultivariateSeries], val_set: &[MultivariateSeries]) -> Result<Checkpoint> {
    cfg.validate()?;
    require_labels(train_set, "training")?;
    if !val_set.is_empty() {
        require_labels(val_set, "validation")?;
    }
    let mut model = VetimeModel::new(cfg.model.clone())?;
    let train_s = train_set.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let val_s = val_set.iter().map(|s| model.prepare(s)).collect::<Result<Vec<_>>>()?;
    let mut opt = AdamW::new(&cfg.optimizer, &model.store);
    let o = &cfg.optimizer;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    for epoch in 0..o.max_epochs {
        let mut order: Vec<usize> = (0..train_s.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut epoch_parts = LossParts::default();
        let mut epoch_loss = 0.0;
        let mut step_losses = Vec::new();
        for batch in order.chunks(o.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Gradients::zeros_like(&model.store);
            let mut parts = LossParts::default();
            for &i in batch {
                let (_, p, g) = sample_gradients(&model, &train_s[i])?;
                grads.add_scaled(&g, scale);
                parts.add_scaled(&p, scale);
            }
            let loss = total_loss(&parts, &model.config.loss_weights, step)?;
            if let Some(clip) = o.max_grad_norm {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            opt.step(&mut model.store, &grads);
            step += 1;
            step_losses.push(loss);
            let w = batch.len() as f64 / train_s.len() as f64;
            epoch_loss += w * loss;
            epoch_parts.add_scaled(&parts, w);
        }
        let val = if val_s.is_empty() {
            None
        } else {
            Some(validation_score(&model, &val_s, &cfg.metrics)?)
        };
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss,
            parts: epoch_parts,
            val_vus_pr: val,
            step_losses,
        });
        // Without a validation set the latest epoch always wins.
        let improved = match (val, &best) {
            (Some(v), Some(b)) => v > b.0,
            _ => true,
        };
        if improved {
            best = Some((val.unwrap_or(f64::NAN), epoch, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= o.patience {
            break;
        }
    }
    let (_, epoch, store) = best.expect("at least one epoch");
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        epoch,
        history,
        params: store.to_records(),
    })
}

/// Metrics of one evaluated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub index: usize,
    pub positive_fraction: f64,
    pub metrics: SeriesMetrics,
}

/// Per-series metrics and their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub series: Vec<SeriesReport>,
    pub mean: SeriesMetrics,
    /// Fraction of positive labels over the whole set.
    pub positive_prior: f64,
}

/// Scores every series (labels are only used for the metrics).
pub fn evaluate(model: &VetimeModel, set: &[MultivariateSeries], opts: &MetricOptions) -> Result<EvalReport> {
    require_labels(set, "evaluation")?;
    let mut series = Vec::with_capacity(set.len());
    let (mut pos, mut tot) = (0usize, 0usize);
    for (index, s) in set.iter().enumerate() {
        let unlabeled = MultivariateSeries::new(s.variables().to_vec(), None)?;
        let inf = model.infer(&unlabeled)?;
        let labels = s.labels.as_deref().expect("validated labels");
        let p = labels.iter().filter(|&&y| y == 1).count();
        pos += p;
        tot += labels.len();
        series.push(SeriesReport {
            index,
            positive_fraction: p as f64 / labels.len() as f64,
            metrics: score_series(&inf.scores, labels, opts)?,
        });
    }
    let all: Vec<SeriesMetrics> = series.iter().map(|r| r.metrics).collect();
    Ok(EvalReport {
        mean: mean_metrics(&all),
        series,
        positive_prior: pos as f64 / tot as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;
    use crate::synthetic::{generate_all, GeneratorConfig};

    fn tiny_run() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                encoder: EncoderConfig {
                    depth: 1,
                    heads: 2,
                    model_dim: 8,
                    ffn_dim: 16,
                    visual_patch: 32,
                    seed: 5,
                },
                patch_size: 16,
                max_patches: 8,
                init_std: 0.1,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                batch_size: 2,
                max_epochs: 3,
                patience: 4,
                ..Default::default()
            },
            ..Default::default()
        }
        .with_seed(5)
    }

    fn data(n: usize, seed: u64) -> Vec<MultivariateSeries> {
        let cfg = GeneratorConfig {
            n_series: n,
            length_range: [64, 128],
            anomaly_rate: 0.08,
            seed,
            ..Default::default()
        };
        generate_all(&cfg).unwrap().into_iter().map(|g| g.series.into()).collect()
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 2), 1.0));
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        let mut t = Tape::new(&store);
        let w = t.param(id);
        let l = t.sum_all(w);
        let g = t.backward(l);
        opt.step(&mut store, &g);
        for &v in store.get(id).iter() {
            assert!((v - 0.9).abs() < 1e-6);
        }
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = ParamStore::new();
        let id = store.add("w", Array2::from_elem((1, 1), 2.0));
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(&cfg, &store);
        let grads = Gradients::from_vec(vec![Some(Array2::zeros((1, 1)))]);
        opt.step(&mut store, &grads);
        assert!((store.get(id)[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn patience_zero_runs_one_epoch() {
        let mut cfg = tiny_run();
        cfg.optimizer.patience = 0;
        let ck = train(&cfg, &data(4, 1), &data(2, 2)).unwrap();
        assert_eq!(ck.history.len(), 1);
        assert_eq!(ck.epoch, 0);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let cfg = tiny_run();
        let (tr, va) = (data(4, 1), data(2, 2));
        let a = train(&cfg, &tr, &va).unwrap();
        let b = train(&cfg, &tr, &va).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        a.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, a);
        let m1 = a.model().unwrap();
        let m2 = back.model().unwrap();
        let s = &va[0];
        assert_eq!(m1.infer(s).unwrap(), m2.infer(s).unwrap());
        let r1 = evaluate(&m1, &va, &cfg.metrics).unwrap();
        assert_eq!(r1, evaluate(&m2, &va, &cfg.metrics).unwrap());
        assert_eq!(r1.series.len(), 2);
    }

    #[test]
    fn unlabeled_or_empty_sets_rejected() {
        let cfg = tiny_run();
        let mut tr = data(2, 1);
        assert!(train(&cfg, &[], &tr).is_err());
        tr[0].labels = None;
        assert!(train(&cfg, &tr, &data(1, 3)).is_err());
    }

    #[test]
    fn empty_validation_keeps_final_epoch() {
        let cfg = tiny_run();
        let ck = train(&cfg, &data(2, 1), &[]).unwrap();
        assert_eq!(ck.history.len(), cfg.optimizer.max_epochs);
        assert_eq!(ck.epoch, cfg.optimizer.max_epochs - 1);
        assert!(ck.history.iter().all(|h| h.val_vus_pr.is_none()));
    }

    #[test]
    fn bad_checkpoint_version_rejected() {
        let cfg = tiny_run();
        let mut ck = train(
            &RunConfig {
                optimizer: OptimizerConfig {
                    max_epochs: 1,
                    ..cfg.optimizer.clone()
                },
                ..cfg
            },
            &data(2, 1),
            &data(1, 2),
        )
        .unwrap();
        ck.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
