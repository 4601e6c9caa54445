//! Seeded synthetic series with injected point and context anomalies.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};
use crate::io::{write_json, write_series_csv};
use crate::series::{LabeledSeries, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    Dip,
    LevelShift,
    SeasonalShift,
    TrendBreak,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 5] = [
        AnomalyKind::Spike,
        AnomalyKind::Dip,
        AnomalyKind::LevelShift,
        AnomalyKind::SeasonalShift,
        AnomalyKind::TrendBreak,
    ];

    pub fn is_point(self) -> bool {
        matches!(self, AnomalyKind::Spike | AnomalyKind::Dip)
    }

    /// Inclusive span bounds for a series of length `len`.
    fn span_bounds(self, len: usize) -> (usize, usize) {
        if self.is_point() {
            (1, 3)
        } else {
            let lo = ((len as f64 * 0.05).ceil() as usize).max(2);
            let hi = ((len as f64 * 0.15).floor() as usize).max(lo);
            (lo, hi)
        }
    }
}

/// Ranges of the base signal parameters, drawn per series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseConfig {
    pub amplitude: [f64; 2],
    pub period: [f64; 2],
    /// Per-step slope.
    pub slope: [f64; 2],
    pub noise_std: f64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            amplitude: [0.5, 2.0],
            period: [12.0, 64.0],
            slope: [-0.002, 0.002],
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub n_series: usize,
    pub length_range: [usize; 2],
    pub base: BaseConfig,
    pub anomaly_rate: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_series: 64,
            length_range: [256, 1024],
            base: BaseConfig::default(),
            anomaly_rate: 0.05,
            anomaly_kinds: AnomalyKind::ALL.to_vec(),
            seed: 0,
        }
    }
}

fn ordered(r: [f64; 2], what: &str) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
        return Err(validation(format!("{what} range must be finite and ordered, got {r:?}")));
    }
    Ok(())
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.length_range;
        if lo < 64 || lo > hi {
            return Err(validation(format!(
                "length range must satisfy 64 <= min <= max, got {lo}..{hi}"
            )));
        }
        if !(0.0..=0.5).contains(&self.anomaly_rate) {
            return Err(validation(format!(
                "anomaly rate must be in [0, 0.5], got {}",
                self.anomaly_rate
            )));
        }
        if self.anomaly_rate > 0.0 && self.anomaly_kinds.is_empty() {
            return Err(validation("a positive anomaly rate needs at least one anomaly kind"));
        }
        ordered(self.base.amplitude, "amplitude")?;
        ordered(self.base.period, "period")?;
        ordered(self.base.slope, "slope")?;
        if self.base.period[0] <= 0.0 {
            return Err(validation("period must be positive"));
        }
        if !(self.base.noise_std > 0.0 && self.base.noise_std.is_finite()) {
            return Err(validation("noise std must be positive"));
        }
        Ok(())
    }
}

/// One injected anomaly, `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub end: usize,
}

/// A generated series with the signal before injection and the inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSeries {
    pub series: LabeledSeries,
    pub clean: Vec<f64>,
    pub anomalies: Vec<InjectedAnomaly>,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn sign(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}

/// Generates series `index`; deterministic in `(cfg.seed, index)`.
pub fn generate_series(cfg: &GeneratorConfig, index: usize) -> Result<GeneratedSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let len = rng.random_range(cfg.length_range[0]..=cfg.length_range[1]);
    let amp = uniform(&mut rng, cfg.base.amplitude);
    let period = uniform(&mut rng, cfg.base.period);
    let slope = uniform(&mut rng, cfg.base.slope);
    let phase = rng.random_range(0.0..2.0 * PI);
    let sigma = cfg.base.noise_std;
    let noise = Normal::new(0.0, sigma).map_err(|e| validation(e.to_string()))?;
    let clean: Vec<f64> = (0..len)
        .map(|t| {
            let t = t as f64;
            amp * (2.0 * PI * t / period + phase).sin() + slope * t + noise.sample(&mut rng)
        })
        .collect();
    let mut values = clean.clone();
    let mut labels = vec![0u8; len];
    let mut anomalies: Vec<InjectedAnomaly> = Vec::new();

    if cfg.anomaly_rate > 0.0 {
        let target = ((cfg.anomaly_rate * len as f64).round() as usize).max(1);
        let cap = (1.5 * target as f64).floor() as usize;
        let mut mass = 0;
        let mut attempts = 0;
        while mass < target && attempts < 200 {
            attempts += 1;
            let room = cap.saturating_sub(mass);
            let fits: Vec<AnomalyKind> = cfg
                .anomaly_kinds
                .iter()
                .copied()
                .filter(|k| k.span_bounds(len).0 <= room)
                .collect();
            if fits.is_empty() {
                break;
            }
            let kind = fits[rng.random_range(0..fits.len())];
            let (lo, hi) = kind.span_bounds(len);
            let span = rng.random_range(lo..=hi.min(room).max(lo));
            let start = rng.random_range(0..=len - span);
            let end = start + span;
            // Keep one normal point between anomalies so runs stay distinct.
            let clash = anomalies
                .iter()
                .any(|a| start < a.end + 1 && a.start < end + 1);
            if clash {
                continue;
            }
            inject(&mut rng, kind, &mut values, start, end, amp, period, phase, sigma);
            labels[start..end].fill(1);
            mass += span;
            anomalies.push(InjectedAnomaly { kind, start, end });
        }
        anomalies.sort_by_key(|a| a.start);
    }
    Ok(GeneratedSeries {
        series: LabeledSeries::new(Series::new(values)?, labels)?,
        clean,
        anomalies,
    })
}

#[allow(clippy::too_many_arguments)]
fn inject(
    rng: &mut ChaCha8Rng,
    kind: AnomalyKind,
    x: &mut [f64],
    start: usize,
    end: usize,
    amp: f64,
    period: f64,
    phase: f64,
    sigma: f64,
) {
    let span = (end - start) as f64;
    match kind {
        AnomalyKind::Spike | AnomalyKind::Dip => {
            let dir = if kind == AnomalyKind::Spike { 1.0 } else { -1.0 };
            for v in &mut x[start..end] {
                *v += dir * (5.0 * sigma + amp * rng.random_range(1.0..2.0));
            }
        }
        AnomalyKind::LevelShift => {
            let shift = sign(rng) * (3.0 * sigma + amp * rng.random_range(0.5..1.0));
            for v in &mut x[start..end] {
                *v += shift;
            }
        }
        AnomalyKind::SeasonalShift => {
            let new_period = period * rng.random_range(0.25..0.5);
            let new_amp = amp * rng.random_range(1.2..2.0);
            for (t, v) in x.iter_mut().enumerate().take(end).skip(start) {
                let t = t as f64;
                *v += new_amp * (2.0 * PI * t / new_period + phase).sin()
                    - amp * (2.0 * PI * t / period + phase).sin();
            }
        }
        AnomalyKind::TrendBreak => {
            let total = sign(rng) * (3.0 * sigma + amp * rng.random_range(1.0..2.0));
            for (k, v) in x[start..end].iter_mut().enumerate() {
                *v += total * (k + 1) as f64 / span;
            }
        }
    }
}

/// One manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub path: PathBuf,
    pub length: usize,
    pub anomaly_points: usize,
    pub anomalies: Vec<InjectedAnomaly>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GeneratorConfig,
    pub series: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        crate::io::read_json(&dir.join("manifest.json"))
    }

    /// Absolute paths of the listed series files.
    pub fn paths(&self, dir: &Path) -> Vec<PathBuf> {
        self.series.iter().map(|e| dir.join(&e.path)).collect()
    }
}

/// Generates every series in memory.
pub fn generate_all(cfg: &GeneratorConfig) -> Result<Vec<GeneratedSeries>> {
    (0..cfg.n_series).map(|i| generate_series(cfg, i)).collect()
}

/// Writes `series_XXXX.csv` files plus `manifest.json` into `out_dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut entries = Vec::with_capacity(cfg.n_series);
    for i in 0..cfg.n_series {
        let g = generate_series(cfg, i)?;
        let name = PathBuf::from(format!("series_{i:04}.csv"));
        write_series_csv(&out_dir.join(&name), &g.series)?;
        entries.push(ManifestEntry {
            index: i,
            path: name,
            length: g.series.len(),
            anomaly_points: g.series.labels.iter().map(|&y| y as usize).sum(),
            anomalies: g.anomalies,
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        series: entries,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}
