//! Run configuration file and command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vetime_core::contrast::Similarity;
use vetime_core::fusion::FusionMode;
use vetime_core::imaging::ImagingStrategy;
use vetime_core::model::AlignmentMode;
use vetime_core::train::RunConfig;

/// Default file locations a config may carry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

/// A single JSON file: every `RunConfig` field (all optional) plus `paths`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default)]
    pub paths: Paths,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
            }
        }
    }
}

/// Parses a kebab-case enum value through its serde representation.
pub fn kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Architecture switches for ablation runs.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelFlags {
    /// Drop the cross-attention branch and the window contrastive losses.
    #[arg(long)]
    pub disable_awcl: bool,
    /// Skip the single-patch (intra-window) contrastive loss.
    #[arg(long)]
    pub disable_intra: bool,
    /// Skip the multi-patch (inter-window) contrastive loss.
    #[arg(long)]
    pub disable_inter: bool,
    /// Expert fusion: router, concat or add.
    #[arg(long, value_parser = kebab::<FusionMode>)]
    pub fusion: Option<FusionMode>,
    /// Train without the reconstruction head.
    #[arg(long)]
    pub no_recon_head: bool,
    /// Imaging strategy: full, line-plot, single-channel, no-folding or no-scaling.
    #[arg(long, value_parser = kebab::<ImagingStrategy>)]
    pub imaging: Option<ImagingStrategy>,
    /// Visual token alignment: full, direct, no-pos-enc or no-attention.
    #[arg(long, value_parser = kebab::<AlignmentMode>)]
    pub pta: Option<AlignmentMode>,
    /// Similarity in the window losses: cosine or dot.
    #[arg(long, value_parser = kebab::<Similarity>)]
    pub similarity: Option<Similarity>,
}

/// Optimizer overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct OptimFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
}

/// Applies overrides; the seed (flag or `VETIME_SEED`) wins over the file.
pub fn apply(run: &mut RunConfig, model: &ModelFlags, optim: &OptimFlags, seed: Option<u64>) {
    let ab = &mut run.model.ablations;
    if model.disable_awcl {
        ab.awcl = false;
    }
    if model.disable_intra {
        ab.intra = false;
    }
    if model.disable_inter {
        ab.inter = false;
    }
    if model.no_recon_head {
        ab.recon_head = false;
    }
    if let Some(f) = model.fusion {
        ab.fusion = f;
    }
    if let Some(i) = model.imaging {
        ab.imaging = i;
    }
    if let Some(a) = model.pta {
        ab.alignment = a;
    }
    if let Some(s) = model.similarity {
        run.model.similarity = s;
    }
    let o = &mut run.optimizer;
    if let Some(e) = optim.epochs {
        o.max_epochs = e;
    }
    if let Some(lr) = optim.learning_rate {
        o.learning_rate = lr;
    }
    if let Some(b) = optim.batch_size {
        o.batch_size = b;
    }
    if let Some(p) = optim.patience {
        o.patience = p;
    }
    if let Some(s) = seed {
        *run = run.clone().with_seed(s);
    }
}
