//! The full detector: temporal and visual paths, alignment, window
//! contrast, expert routing and the two heads.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    direct_pool_operator, multivariate_alignment_operators, TemporalizeOptions, Temporalizer,
};
use crate::autograd::{Tape, Var};
use crate::contrast::{
    instance_awcl_loss, AnomalyFusion, ContrastTerms, DualCrossAttention, Similarity, DEFAULT_TAU,
};
use crate::encoders::{image_patches, EncoderConfig, TemporalEncoder, VisualEncoder};
use crate::error::{validation, Error, Result};
use crate::fusion::{
    bce_on_tape, entropy_on_tape, fuse_on_tape, mse_on_tape, FusionMode, Head, LossParts, LossWeights,
    Router, RouterWeights,
};
use crate::imaging::{convert_multivariate, render, CanvasImage, GammaCoefficients, ImagingStrategy, DEFAULT_KERNEL};
use crate::nn::Linear;
use crate::params::{Initializer, ParamStore};
use crate::series::{
    instance_normalize, patchify, point_labels_to_patch_labels, MultivariateSeries, NormStats,
    PatchLabels, Series, DEFAULT_NORM_EPS, DEFAULT_PATCH_SIZE,
};

/// Variants of the visual-token alignment step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentMode {
    /// Geometry-aware pooling and interpolation, positional encoding,
    /// projection and self-attention.
    #[default]
    Full,
    /// Mean-pool the flattened tokens straight to the patch count, then project.
    Direct,
    /// Full alignment without the positional encoding.
    NoPosEnc,
    /// Full alignment without the self-attention layer.
    NoAttention,
}

/// Architectural switches used for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    pub imaging: ImagingStrategy,
    pub alignment: AlignmentMode,
    /// Cross attention plus the window losses; when off the anomaly features
    /// are a feed-forward map of the concatenated temporal and visual features.
    pub awcl: bool,
    pub intra: bool,
    pub inter: bool,
    pub fusion: FusionMode,
    pub recon_head: bool,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            imaging: ImagingStrategy::Full,
            alignment: AlignmentMode::Full,
            awcl: true,
            intra: true,
            inter: true,
            fusion: FusionMode::Router,
            recon_head: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub patch_size: usize,
    /// Longest supported series, in patches.
    pub max_patches: usize,
    pub kernel: usize,
    pub init_std: f64,
    pub tau: f64,
    pub similarity: Similarity,
    pub loss_weights: LossWeights,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            max_patches: 64,
            kernel: DEFAULT_KERNEL,
            init_std: 0.02,
            tau: DEFAULT_TAU,
            similarity: Similarity::default(),
            loss_weights: LossWeights::default(),
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.patch_size == 0 || self.max_patches == 0 || self.kernel == 0 {
            return Err(Error::Config("patch size, max patches and kernel must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        let w = self.loss_weights;
        if !(w.lambda_aw >= 0.0 && w.lambda_e >= 0.0 && w.lambda_aw.is_finite() && w.lambda_e.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init std must be positive".into()));
        }
        Ok(())
    }

    pub fn max_len(&self) -> usize {
        self.patch_size * self.max_patches
    }
}

/// Per-variable model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableInput {
    pub normalized: Vec<f64>,
    pub stats: NormStats,
    pub tokens: Array2<f64>,
    /// `N_TS x N_V` visual alignment operator.
    pub align: Array2<f64>,
}

/// Everything the model needs for one series, computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub len: usize,
    pub n_patches: usize,
    pub variables: Vec<VariableInput>,
    /// Flattened canvas patches, `N_V x (p*p*3)`.
    pub image_patches: Array2<f64>,
    pub labels: Option<Vec<u8>>,
    pub patch_labels: Option<PatchLabels>,
}

/// The canvas image the model sees for `ms` (built from the normalized
/// variables).
pub fn input_image(cfg: &ModelConfig, ms: &MultivariateSeries) -> Result<CanvasImage> {
    let normalized = ms
        .variables()
        .iter()
        .map(|v| instance_normalize(v, DEFAULT_NORM_EPS).map(|(s, _)| s))
        .collect::<Result<Vec<_>>>()?;
    render_normalized(cfg, normalized)
}

fn render_normalized(cfg: &ModelConfig, normalized: Vec<Series>) -> Result<CanvasImage> {
    let vp = cfg.encoder.visual_patch;
    if normalized.len() == 1 {
        return render(&normalized[0], vp, cfg.kernel, cfg.ablations.imaging);
    }
    if cfg.ablations.imaging != ImagingStrategy::Full {
        return Err(Error::Config(
            "multivariate series only support the full imaging strategy".into(),
        ));
    }
    let n_vars = normalized.len();
    let nm = MultivariateSeries::new(normalized, None)?;
    convert_multivariate(&nm, &GammaCoefficients::spaced(n_vars), vp, cfg.kernel)
}

/// Normalizes, renders and patchifies a series for the model.
pub fn prepare(cfg: &ModelConfig, ms: &MultivariateSeries) -> Result<PreparedSample> {
    let len = ms.len();
    if len < cfg.patch_size {
        return Err(validation(format!(
            "series length {len} is shorter than the patch size {}",
            cfg.patch_size
        )));
    }
    if len > cfg.max_len() {
        return Err(validation(format!(
            "series length {len} exceeds the supported maximum {}",
            cfg.max_len()
        )));
    }
    let mut normalized = Vec::with_capacity(ms.n_vars());
    for v in ms.variables() {
        normalized.push(instance_normalize(v, DEFAULT_NORM_EPS)?);
    }
    let vp = cfg.encoder.visual_patch;
    let img = render_normalized(cfg, normalized.iter().map(|(s, _)| s.clone()).collect())?;
    let patches = image_patches(&img, vp)?;
    let n_tokens = patches.nrows();
    let n_patches = len.div_ceil(cfg.patch_size);
    let ops = match cfg.ablations.alignment {
        AlignmentMode::Direct => vec![direct_pool_operator(n_tokens, n_patches); ms.n_vars()],
        _ => multivariate_alignment_operators(n_tokens, n_patches, ms.n_vars())?,
    };
    let variables = normalized
        .into_iter()
        .zip(ops)
        .map(|((s, stats), align)| {
            Ok(VariableInput {
                tokens: patchify(&s, cfg.patch_size)?.tokens,
                normalized: s.into_values(),
                stats,
                align,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let patch_labels = ms
        .labels
        .as_deref()
        .map(|l| point_labels_to_patch_labels(l, cfg.patch_size))
        .transpose()?;
    Ok(PreparedSample {
        len,
        n_patches,
        variables,
        image_patches: patches,
        labels: ms.labels.clone(),
        patch_labels,
    })
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `L x 1` anomaly probabilities (mean over variables).
    pub score: Var,
    /// Per-variable `L x 1` reconstructions of the normalized input.
    pub recon: Vec<Var>,
    /// Per-variable `2N x 3` routing weights.
    pub router: Vec<Var>,
    /// Window contrastive loss, averaged over variables.
    pub awcl: Option<Var>,
}

/// Model parameters and sub-modules.
#[derive(Debug, Clone)]
pub struct VetimeModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub temporal: TemporalEncoder,
    pub visual: VisualEncoder,
    pub temporalizer: Temporalizer,
    pub cross: Option<DualCrossAttention>,
    pub anomaly: AnomalyFusion,
    pub router: Option<Router>,
    pub concat: Option<[Linear; 2]>,
    pub detect: Head,
    pub reconstruct: Option<Head>,
}

impl VetimeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.encoder.seed, config.init_std);
        let e = &config.encoder;
        let d = e.model_dim;
        let ab = config.ablations;
        let temporal = TemporalEncoder::new(&mut store, &mut init, e, config.patch_size, config.max_patches)?;
        let visual = VisualEncoder::new(&mut store, &mut init, e)?;
        let temporalizer = Temporalizer::new(&mut store, &mut init, d, d, e.heads, config.max_patches);
        let cross = ab.awcl.then(|| DualCrossAttention::new(&mut store, &mut init, d, e.ffn_dim));
        let anomaly = AnomalyFusion::new(&mut store, &mut init, d, e.ffn_dim);
        let router = (ab.fusion == FusionMode::Router).then(|| Router::new(&mut store, &mut init, d));
        let concat = (ab.fusion == FusionMode::Concat).then(|| {
            [
                Linear::new(&mut store, &mut init, "fusion.concat_detect", 3 * d, d, true),
                Linear::new(&mut store, &mut init, "fusion.concat_recon", 3 * d, d, true),
            ]
        });
        let detect = Head::new(&mut store, &mut init, "head.detect", d, config.patch_size, 2);
        let reconstruct = ab
            .recon_head
            .then(|| Head::new(&mut store, &mut init, "head.recon", d, config.patch_size, 1));
        Ok(Self {
            config,
            store,
            temporal,
            visual,
            temporalizer,
            cross,
            anomaly,
            router,
            concat,
            detect,
            reconstruct,
        })
    }

    pub fn prepare(&self, ms: &MultivariateSeries) -> Result<PreparedSample> {
        prepare(&self.config, ms)
    }

    /// Builds the forward graph. Window losses are only built when
    /// `with_losses` is set and the sample carries labels.
    pub fn forward(&self, t: &mut Tape, s: &PreparedSample, with_losses: bool) -> Result<ForwardVars> {
        let ab = self.config.ablations;
        let patches = t.constant(s.image_patches.clone());
        let f_v0 = self.visual.forward(t, patches);
        let opts = match ab.alignment {
            AlignmentMode::Full => TemporalizeOptions::default(),
            AlignmentMode::Direct => TemporalizeOptions {
                positional: false,
                attention: false,
            },
            AlignmentMode::NoPosEnc => TemporalizeOptions {
                positional: false,
                attention: true,
            },
            AlignmentMode::NoAttention => TemporalizeOptions {
                positional: true,
                attention: false,
            },
        };
        let terms = ContrastTerms {
            intra: ab.intra,
            inter: ab.inter,
        };
        let mut scores = Vec::new();
        let mut recon = Vec::new();
        let mut router = Vec::new();
        let mut awcl = Vec::new();
        for var in &s.variables {
            let tokens = t.constant(var.tokens.clone());
            let f_ts = self.temporal.forward(t, tokens)?;
            let op = t.constant(var.align.clone());
            let f_hat = t.matmul(op, f_v0);
            let f_v = self.temporalizer.forward(t, f_hat, opts)?;
            let f_a = match &self.cross {
                Some(cross) => {
                    let (z_ts, z_v) = cross.forward(t, f_ts, f_v)?;
                    if with_losses {
                        if let Some(pl) = &s.patch_labels {
                            let c = &self.config;
                            if let Some(l) = instance_awcl_loss(t, z_ts, z_v, pl, c.tau, c.similarity, terms) {
                                awcl.push(l);
                            }
                        }
                    }
                    self.anomaly.forward(t, z_ts, z_v)
                }
                None => self.anomaly.forward(t, f_ts, f_v),
            };
            let [f_ad, f_rec] = match ab.fusion {
                FusionMode::Router => {
                    let r = self.router.as_ref().expect("router built for router fusion");
                    let w = r.forward(t, f_a);
                    router.push(w);
                    fuse_on_tape(t, w, [f_ts, f_v, f_a])
                }
                FusionMode::Concat => {
                    let cat = t.concat_cols(&[f_ts, f_v, f_a]);
                    let c = self.concat.as_ref().expect("concat maps built");
                    [c[0].forward(t, cat), c[1].forward(t, cat)]
                }
                FusionMode::Add => {
                    let a = t.add(f_ts, f_v);
                    let sum = t.add(a, f_a);
                    [sum, sum]
                }
            };
            scores.push(self.detect.detect(t, f_ad, s.len));
            if let Some(h) = &self.reconstruct {
                recon.push(h.reconstruct(t, f_rec, s.len));
            }
        }
        let n = s.variables.len() as f64;
        let score = if scores.len() == 1 {
            scores[0]
        } else {
            let terms: Vec<(Var, f64)> = scores.iter().map(|&v| (v, 1.0 / n)).collect();
            weighted_matrix_sum(t, &terms)
        };
        // Variables without valid windows contribute zero to the mean.
        let awcl = (!awcl.is_empty()).then(|| {
            let terms: Vec<(Var, f64)> = awcl.iter().map(|&v| (v, 1.0 / n)).collect();
            t.weighted_sum(&terms)
        });
        Ok(ForwardVars {
            score,
            recon,
            router,
            awcl,
        })
    }

    /// Total training loss on the tape and its parts.
    pub fn loss(&self, t: &mut Tape, s: &PreparedSample, fv: &ForwardVars) -> Result<(Var, LossParts)> {
        let labels = s
            .labels
            .as_deref()
            .ok_or_else(|| validation("training samples need labels"))?;
        let w = self.config.loss_weights;
        let n = s.variables.len() as f64;
        let bce = bce_on_tape(t, fv.score, labels);
        let mut terms = vec![(bce, 1.0)];
        let mut parts = LossParts {
            bce: t.scalar(bce),
            ..Default::default()
        };
        for (v, &r) in s.variables.iter().zip(&fv.recon) {
            let m = mse_on_tape(t, r, &v.normalized);
            parts.mse += t.scalar(m) / n;
            terms.push((m, 1.0 / n));
        }
        if let Some(a) = fv.awcl {
            parts.awcl = t.scalar(a);
            terms.push((a, w.lambda_aw));
        }
        for &r in &fv.router {
            let e = entropy_on_tape(t, r);
            parts.entropy += t.scalar(e) / n;
            terms.push((e, w.lambda_e / n));
        }
        Ok((t.weighted_sum(&terms), parts))
    }

    /// Scores and reconstructions for one series without building losses.
    pub fn infer(&self, ms: &MultivariateSeries) -> Result<Inference> {
        let s = self.prepare(ms)?;
        self.infer_prepared(&s)
    }

    pub fn infer_prepared(&self, s: &PreparedSample) -> Result<Inference> {
        let mut t = Tape::new(&self.store);
        let fv = self.forward(&mut t, s, false)?;
        let scores = t.value(fv.score).iter().copied().collect();
        let reconstruction = fv
            .recon
            .iter()
            .zip(&s.variables)
            .map(|(&r, v)| {
                let vals: Vec<f64> = t.value(r).iter().copied().collect();
                if v.stats.is_degenerate() {
                    vals.iter().map(|_| v.stats.mean).collect()
                } else {
                    vals.iter().map(|x| x * v.stats.std + v.stats.mean).collect()
                }
            })
            .collect();
        let router = fv
            .router
            .iter()
            .map(|&r| RouterWeights::from_rows(t.value(r)))
            .collect();
        Ok(Inference {
            scores,
            reconstruction,
            router,
        })
    }
}

fn weighted_matrix_sum(t: &mut Tape, terms: &[(Var, f64)]) -> Var {
    let mut acc = t.scale(terms[0].0, terms[0].1);
    for &(v, w) in &terms[1..] {
        let s = t.scale(v, w);
        acc = t.add(acc, s);
    }
    acc
}

/// Output of zero-shot scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    /// Anomaly probability per timestep.
    pub scores: Vec<f64>,
    /// Per-variable reconstruction on the input scale.
    pub reconstruction: Vec<Vec<f64>>,
    /// Per-variable routing weights (empty without router fusion).
    pub router: Vec<RouterWeights>,
}
