//! Loading series files and directories.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vetime_core::io::read_series_csv;
use vetime_core::series::MultivariateSeries;
use vetime_core::synthetic::Manifest;

/// Series files of a dataset directory: the manifest order when
/// `manifest.json` exists, otherwise every `*.csv` sorted by name.
pub fn dataset_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("manifest.json").is_file() {
        return Ok(Manifest::read(dir)?.paths(dir));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{} holds no series files", dir.display());
    }
    Ok(files)
}

pub fn load_series(path: &Path) -> Result<MultivariateSeries> {
    read_series_csv(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<MultivariateSeries>> {
    dataset_files(dir)?.iter().map(|p| load_series(p)).collect()
}
