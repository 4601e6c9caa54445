//! Trainable visual (ViT-style) and temporal transformer encoders.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::imaging::{CanvasImage, CANVAS};
use crate::nn::{LayerNorm, Linear, TransformerBlock};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::series::PatchGrid;

/// An `N x D` token feature matrix with an optional gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub grad: Option<Array2<f64>>,
}

impl FeatureMatrix {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values, grad: None }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub visual_patch: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            visual_patch: 16,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.visual_patch == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if CANVAS % self.visual_patch != 0 {
            return Err(Error::Config(format!(
                "visual patch {} does not divide {CANVAS}",
                self.visual_patch
            )));
        }
        Ok(())
    }

    /// Visual token grid edge `g` (tokens form a `g x g` grid).
    pub fn grid(&self) -> usize {
        CANVAS / self.visual_patch
    }
}

/// Flattens non-overlapping `p x p` canvas patches into rows (row-major patch
/// order, pixel order row/column/channel). Pixels are scaled to `[-1, 1]`.
pub fn image_patches(img: &CanvasImage, visual_patch: usize) -> Result<Array2<f64>> {
    if visual_patch == 0 || CANVAS % visual_patch != 0 {
        return Err(Error::Config(format!(
            "visual patch {visual_patch} does not divide {CANVAS}"
        )));
    }
    let g = CANVAS / visual_patch;
    let p = visual_patch;
    Ok(Array2::from_shape_fn((g * g, p * p * 3), |(tok, k)| {
        let (gi, gj) = (tok / g, tok % g);
        let (pi, rest) = (k / (p * 3), k % (p * 3));
        let (pj, ch) = (rest / 3, rest % 3);
        img.pixels[[gi * p + pi, gj * p + pj, ch]] / 127.5 - 1.0
    }))
}

/// Fixed 2D sinusoidal positional encodings for a `g x g` grid: the first half
/// of the channels encodes the row, the second half the column.
pub fn sincos_2d(g: usize, dim: usize) -> Array2<f64> {
    let half = dim / 2;
    let enc = |pos: usize, k: usize, width: usize| -> f64 {
        let pair = (k / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / width.max(1) as f64);
        let a = pos as f64 * freq;
        if k % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    Array2::from_shape_fn((g * g, dim), |(tok, c)| {
        let (row, col) = (tok / g, tok % g);
        if c < half {
            enc(row, c, half)
        } else {
            enc(col, c - half, dim - half)
        }
    })
}

/// Patch embedding, fixed positional encoding and pre-norm attention blocks.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    pub patch_embed: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub pos: Array2<f64>,
    pub visual_patch: usize,
}

impl VisualEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.visual_patch;
        let patch_embed = Linear::new(store, init, "visual.patch_embed", p * p * 3, cfg.model_dim, true);
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("visual.block{i}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                )
            })
            .collect();
        Ok(Self {
            patch_embed,
            blocks,
            pos: sincos_2d(cfg.grid(), cfg.model_dim),
            visual_patch: p,
        })
    }

    /// Encodes pre-extracted patch rows (see [`image_patches`]); output `N_V x D_V`.
    pub fn forward(&self, t: &mut Tape, patches: Var) -> Var {
        let x = self.patch_embed.forward(t, patches);
        let pos = t.constant(self.pos.clone());
        let mut x = t.add(x, pos);
        for b in &self.blocks {
            x = b.forward(t, x);
        }
        x
    }

    pub fn encode(&self, store: &ParamStore, img: &CanvasImage) -> Result<FeatureMatrix> {
        let mut t = Tape::new(store);
        let patches = t.constant(image_patches(img, self.visual_patch)?);
        let out = self.forward(&mut t, patches);
        Ok(FeatureMatrix::new(t.value(out).clone()))
    }
}

/// Patch embedding, learnable positional encoding, transformer blocks and a
/// final layer norm.
#[derive(Debug, Clone)]
pub struct TemporalEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub max_tokens: usize,
}

impl TemporalEncoder {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        cfg: &EncoderConfig,
        patch_size: usize,
        max_tokens: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = Linear::new(store, init, "temporal.embed", patch_size, cfg.model_dim, true);
        let pos = store.add("temporal.pos", init.trunc_normal(max_tokens, cfg.model_dim));
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("temporal.block{i}"),
                    cfg.model_dim,
                    cfg.heads,
                    cfg.ffn_dim,
                )
            })
            .collect();
        let norm = LayerNorm::new(store, "temporal.norm", cfg.model_dim);
        Ok(Self {
            embed,
            pos,
            blocks,
            norm,
            max_tokens,
        })
    }

    /// Encodes `N_TS x patch_size` tokens into `N_TS x D_TS` features.
    pub fn forward(&self, t: &mut Tape, tokens: Var) -> Result<Var> {
        let n = t.shape(tokens).0;
        if n > self.max_tokens {
            return Err(Error::Validation(format!(
                "{n} temporal patches exceed the configured maximum {}",
                self.max_tokens
            )));
        }
        let x = self.embed.forward(t, tokens);
        let pos = t.param(self.pos);
        let pos = t.slice_rows(pos, 0, n);
        let mut x = t.add(x, pos);
        for b in &self.blocks {
            x = b.forward(t, x);
        }
        Ok(self.norm.forward(t, x))
    }

    pub fn encode(&self, store: &ParamStore, grid: &PatchGrid) -> Result<FeatureMatrix> {
        let mut t = Tape::new(store);
        let tokens = t.constant(grid.tokens.clone());
        let out = self.forward(&mut t, tokens)?;
        Ok(FeatureMatrix::new(t.value(out).clone()))
    }
}
