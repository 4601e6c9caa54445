//! Reversible series-to-image conversion.
//!
//! A series is decomposed into trend and remainder, the three signals are
//! min-max mapped into the R/G/B channels, folded by an estimated period into
//! a `(T_fold, n_cols, 3)` grid and finally resized onto a square canvas:
//! linear interpolation along the time (horizontal) axis, row replication
//! along the period (vertical) axis. Every step is recorded in a [`FoldPlan`]
//! so the raw channel can be pulled back to the original series.
//!
//! Grid orientation: rows hold within-period phase, columns hold successive
//! periods.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{validation, Error, Result};
use crate::series::{MultivariateSeries, Series};

/// Canvas edge length in pixels.
pub const CANVAS: usize = 224;
/// Default moving-average kernel for trend extraction.
pub const DEFAULT_KERNEL: usize = 25;
/// Autocorrelation value a lag must reach to count as a period.
pub const ACF_THRESHOLD: f64 = 0.3;

const MID_INTENSITY: f64 = 128.0;
const MAX_INTENSITY: f64 = 255.0;

/// Trend/remainder split of a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub raw: Vec<f64>,
    pub trend: Vec<f64>,
    pub remainder: Vec<f64>,
    pub kernel: usize,
}

/// Centered moving average with edge replication; remainder is the residual.
pub fn decompose_trend_remainder(s: &Series, kernel: usize) -> Result<Decomposition> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(validation(format!(
            "moving-average kernel must be odd and positive, got {kernel}"
        )));
    }
    let x = s.values();
    let n = x.len();
    let half = (kernel / 2) as isize;
    let trend: Vec<f64> = (0..n as isize)
        .map(|t| {
            let sum: f64 = (-half..=half)
                .map(|k| x[(t + k).clamp(0, n as isize - 1) as usize])
                .sum();
            sum / kernel as f64
        })
        .collect();
    let remainder = x.iter().zip(&trend).map(|(a, b)| a - b).collect();
    Ok(Decomposition {
        raw: x.to_vec(),
        trend,
        remainder,
        kernel,
    })
}

/// Affine map used by one channel: `p = (v - min) / (max - min) * 255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRange {
    pub min: f64,
    pub max: f64,
}

impl ChannelRange {
    fn of(values: &[f64]) -> Self {
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        Self { min, max }
    }

    pub fn is_constant(&self) -> bool {
        !(self.max > self.min)
    }

    pub fn encode(&self, v: f64) -> f64 {
        if self.is_constant() {
            MID_INTENSITY
        } else {
            (v - self.min) / (self.max - self.min) * MAX_INTENSITY
        }
    }

    pub fn decode(&self, p: f64) -> f64 {
        if self.is_constant() {
            self.min
        } else {
            p / MAX_INTENSITY * (self.max - self.min) + self.min
        }
    }
}

/// A `1 x L x 3` intensity row (R = raw, G = trend, B = remainder).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRow {
    pub intensities: Vec<[f64; 3]>,
    /// One range per variable and channel; a univariate row has one entry.
    pub ranges: Vec<[ChannelRange; 3]>,
    /// Gamma exponent per variable (1.0 when uncorrected).
    pub gammas: Vec<f64>,
}

impl RgbRow {
    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.intensities.iter().map(|p| p[ch]).collect()
    }
}

/// Independently min-max scales raw, trend and remainder into `[0, 255]`.
/// Constant channels map to 128.
pub fn intensity_map(d: &Decomposition) -> RgbRow {
    let ranges = [
        ChannelRange::of(&d.raw),
        ChannelRange::of(&d.trend),
        ChannelRange::of(&d.remainder),
    ];
    let intensities = (0..d.raw.len())
        .map(|t| {
            [
                ranges[0].encode(d.raw[t]),
                ranges[1].encode(d.trend[t]),
                ranges[2].encode(d.remainder[t]),
            ]
        })
        .collect();
    RgbRow {
        intensities,
        ranges: vec![ranges],
        gammas: vec![1.0],
    }
}

/// Unbiased autocorrelation at `lag`, normalized by the population variance.
/// `None` when the series has zero variance.
pub fn autocorrelation(x: &[f64], lag: usize) -> Option<f64> {
    let n = x.len();
    if lag >= n {
        return None;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if !(var > 1e-18) {
        return None;
    }
    let cov = (0..n - lag)
        .map(|t| (x[t] - mean) * (x[t + lag] - mean))
        .sum::<f64>()
        / (n - lag) as f64;
    Some(cov / var)
}

/// Rounds `t` up to a multiple of `patch`, adjusted to stay within `max(patch, len)`.
fn snap_to_patch(t: usize, patch: usize, len: usize) -> usize {
    let up = t.max(1).div_ceil(patch) * patch;
    if up <= len.max(patch) {
        return up;
    }
    let down = (len / patch) * patch;
    if down >= patch {
        down
    } else {
        patch
    }
}

fn sqrt_fallback(len: usize) -> usize {
    (len as f64).sqrt().ceil() as usize
}

/// Folding period: the strongest autocorrelation lag in `[2, L/2]` if it reaches
/// [`ACF_THRESHOLD`], otherwise `ceil(sqrt(L))`; then snapped to a multiple of
/// `visual_patch`.
pub fn estimate_fold_period(s: &Series, visual_patch: usize) -> usize {
    let x = s.values();
    let n = x.len();
    let visual_patch = visual_patch.max(1);
    if n < 4 {
        return visual_patch;
    }
    let mut best: Option<(usize, f64)> = None;
    for lag in 2..=n / 2 {
        let Some(r) = autocorrelation(x, lag) else {
            return snap_to_patch(sqrt_fallback(n), visual_patch, n);
        };
        // Ties (within roundoff) resolve to the smallest lag.
        match best {
            Some((_, b)) if r <= b + 1e-9 * b.abs().max(1.0) => {}
            _ => best = Some((lag, r)),
        }
    }
    let raw = match best {
        Some((lag, r)) if r >= ACF_THRESHOLD => lag,
        _ => sqrt_fallback(n),
    };
    snap_to_patch(raw, visual_patch, n)
}

/// Period used when adaptive folding is disabled.
pub fn fixed_fold_period(len: usize, visual_patch: usize) -> usize {
    if len < 4 {
        return visual_patch.max(1);
    }
    snap_to_patch(sqrt_fallback(len), visual_patch.max(1), len)
}

/// Vertical (period-axis) resampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VerticalScale {
    /// Canvas row `i` copies grid row `source_rows[i]`.
    Replicate { source_rows: Vec<usize> },
    /// Canvas row `i` averages grid rows `[start, end)`; used when `T_fold > 224`.
    Pool { bounds: Vec<(usize, usize)> },
    /// Linear interpolation (dimension-aware scaling disabled).
    Linear { taps: Vec<Tap> },
}

/// One output sample of a 1D linear resampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub left: usize,
    pub right: usize,
    /// Weight of `right`; `left` receives `1 - w_right`.
    pub w_right: f64,
}

/// How the canvas was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    Folded,
    LinePlot,
}

/// Geometry and intensity metadata needed to invert a conversion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub layout: Layout,
    /// Length of the folded row (`N_v * L` for multivariate input).
    pub row_len: usize,
    pub n_vars: usize,
    pub t_fold: usize,
    pub n_cols: usize,
    pub pad_len_fold: usize,
    pub canvas: usize,
    pub v_scale: VerticalScale,
    pub h_scale: Vec<Tap>,
    pub ranges: Vec<[ChannelRange; 3]>,
    pub gammas: Vec<f64>,
}

impl FoldPlan {
    /// Per-variable length before concatenation.
    pub fn var_len(&self) -> usize {
        self.row_len / self.n_vars.max(1)
    }
}

/// A `224 x 224 x 3` float image plus its plan.
#[derive(Debug, Clone, PartialEq)]
pub struct CanvasImage {
    pub pixels: Array3<f64>,
    pub plan: FoldPlan,
}

/// Folded intensity grid: `(T_fold, n_cols, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldedGrid {
    pub cells: Array3<f64>,
    pub t_fold: usize,
    pub n_cols: usize,
    pub pad_len: usize,
    pub row_len: usize,
}

/// Column-major fold: `grid[r][c] = row[c * T + r]`. Missing trailing cells take
/// the per-channel mean of the last `T` observed values.
pub fn fold(row: &RgbRow, t_fold: usize) -> Result<FoldedGrid> {
    if t_fold == 0 {
        return Err(validation("fold period must be at least 1"));
    }
    let len = row.len();
    if len == 0 {
        return Err(validation("cannot fold an empty row"));
    }
    let n_cols = len.div_ceil(t_fold);
    let tail = &row.intensities[len.saturating_sub(t_fold)..];
    let mut fill = [0.0; 3];
    for p in tail {
        for ch in 0..3 {
            fill[ch] += p[ch];
        }
    }
    for f in &mut fill {
        *f /= tail.len() as f64;
    }
    let cells = Array3::from_shape_fn((t_fold, n_cols, 3), |(r, c, ch)| {
        row.intensities
            .get(c * t_fold + r)
            .map_or(fill[ch], |p| p[ch])
    });
    Ok(FoldedGrid {
        cells,
        t_fold,
        n_cols,
        pad_len: n_cols * t_fold - len,
        row_len: len,
    })
}

/// Inverse of [`fold`] on the first `row_len` entries.
pub fn unfold(grid: &FoldedGrid) -> Vec<[f64; 3]> {
    (0..grid.row_len)
        .map(|i| {
            let (c, r) = (i / grid.t_fold, i % grid.t_fold);
            [
                grid.cells[[r, c, 0]],
                grid.cells[[r, c, 1]],
                grid.cells[[r, c, 2]],
            ]
        })
        .collect()
}

/// Half-pixel-centred linear resampling taps from `src` samples to `dst`.
pub fn linear_taps(src: usize, dst: usize) -> Vec<Tap> {
    (0..dst)
        .map(|j| {
            let x = ((j as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let left = x.floor() as usize;
            let right = (left + 1).min(src - 1);
            Tap {
                left,
                right,
                w_right: if right == left { 0.0 } else { x - left as f64 },
            }
        })
        .collect()
}

fn replicate_rows(src: usize, dst: usize) -> Vec<usize> {
    (0..dst).map(|i| i * src / dst).collect()
}

fn pool_bounds(src: usize, dst: usize) -> Vec<(usize, usize)> {
    (0..dst)
        .map(|i| (i * src / dst, ((i + 1) * src / dst).max(i * src / dst + 1)))
        .collect()
}

fn resample_vertical(cells: &Array3<f64>, v: &VerticalScale, canvas: usize) -> Array3<f64> {
    let (_, cols, chans) = cells.dim();
    Array3::from_shape_fn((canvas, cols, chans), |(i, c, ch)| match v {
        VerticalScale::Replicate { source_rows } => cells[[source_rows[i], c, ch]],
        VerticalScale::Pool { bounds } => {
            let (a, b) = bounds[i];
            (a..b).map(|r| cells[[r, c, ch]]).sum::<f64>() / (b - a) as f64
        }
        VerticalScale::Linear { taps } => {
            let t = taps[i];
            cells[[t.left, c, ch]] * (1.0 - t.w_right) + cells[[t.right, c, ch]] * t.w_right
        }
    })
}

fn resample_horizontal(cells: &Array3<f64>, taps: &[Tap]) -> Array3<f64> {
    let (rows, _, chans) = cells.dim();
    Array3::from_shape_fn((rows, taps.len(), chans), |(r, j, ch)| {
        let t = taps[j];
        cells[[r, t.left, ch]] * (1.0 - t.w_right) + cells[[r, t.right, ch]] * t.w_right
    })
}

fn make_plan(grid: &FoldedGrid, row: &RgbRow, n_vars: usize, v_scale: VerticalScale) -> FoldPlan {
    FoldPlan {
        layout: Layout::Folded,
        row_len: grid.row_len,
        n_vars,
        t_fold: grid.t_fold,
        n_cols: grid.n_cols,
        pad_len_fold: grid.pad_len,
        canvas: CANVAS,
        v_scale,
        h_scale: linear_taps(grid.n_cols, CANVAS),
        ranges: row.ranges.clone(),
        gammas: row.gammas.clone(),
    }
}

/// Resizes a folded grid onto the canvas. `T_fold > 224` switches the vertical
/// axis to average pooling; `plan` supplies the intensity metadata to carry.
pub fn scale_to_canvas(grid: &FoldedGrid, row: &RgbRow, n_vars: usize) -> CanvasImage {
    let v_scale = if grid.t_fold <= CANVAS {
        VerticalScale::Replicate {
            source_rows: replicate_rows(grid.t_fold, CANVAS),
        }
    } else {
        VerticalScale::Pool {
            bounds: pool_bounds(grid.t_fold, CANVAS),
        }
    };
    scale_with(grid, row, n_vars, v_scale)
}

/// Uniform linear resize on both axes (dimension-aware scaling disabled).
pub fn scale_uniform(grid: &FoldedGrid, row: &RgbRow, n_vars: usize) -> CanvasImage {
    let v_scale = VerticalScale::Linear {
        taps: linear_taps(grid.t_fold, CANVAS),
    };
    scale_with(grid, row, n_vars, v_scale)
}

fn scale_with(grid: &FoldedGrid, row: &RgbRow, n_vars: usize, v_scale: VerticalScale) -> CanvasImage {
    let plan = make_plan(grid, row, n_vars, v_scale);
    let tall = resample_vertical(&grid.cells, &plan.v_scale, CANVAS);
    let pixels = resample_horizontal(&tall, &plan.h_scale);
    CanvasImage { pixels, plan }
}

/// Imaging variants, including the ablated renderings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImagingStrategy {
    #[default]
    Full,
    /// 1-pixel line plot on a white canvas.
    LinePlot,
    /// Raw series replicated into all three channels.
    SingleChannel,
    /// Fixed `ceil(sqrt(L))` period instead of autocorrelation.
    NoFolding,
    /// Plain linear resize on both axes.
    NoScaling,
}

/// Full conversion: decompose, intensity map, estimate period, fold, scale.
pub fn convert(s: &Series, visual_patch: usize, kernel: usize) -> Result<CanvasImage> {
    render(s, visual_patch, kernel, ImagingStrategy::Full)
}

/// Conversion with an explicit fold period.
pub fn convert_with_period(s: &Series, t_fold: usize, kernel: usize) -> Result<CanvasImage> {
    let row = intensity_map(&decompose_trend_remainder(s, kernel)?);
    let grid = fold(&row, t_fold)?;
    Ok(scale_to_canvas(&grid, &row, 1))
}

/// Renders a series under the given imaging strategy.
pub fn render(
    s: &Series,
    visual_patch: usize,
    kernel: usize,
    strategy: ImagingStrategy,
) -> Result<CanvasImage> {
    check_visual_patch(visual_patch)?;
    match strategy {
        ImagingStrategy::LinePlot => return Ok(line_plot(s)),
        ImagingStrategy::SingleChannel => {
            let d = decompose_trend_remainder(s, kernel)?;
            let single = Decomposition {
                trend: d.raw.clone(),
                remainder: d.raw.clone(),
                ..d
            };
            let row = intensity_map(&single);
            let t = estimate_fold_period(s, visual_patch);
            return Ok(scale_to_canvas(&fold(&row, t)?, &row, 1));
        }
        _ => {}
    }
    let row = intensity_map(&decompose_trend_remainder(s, kernel)?);
    let t = match strategy {
        ImagingStrategy::NoFolding => fixed_fold_period(s.len(), visual_patch),
        _ => estimate_fold_period(s, visual_patch),
    };
    let grid = fold(&row, t)?;
    Ok(match strategy {
        ImagingStrategy::NoScaling => scale_uniform(&grid, &row, 1),
        _ => scale_to_canvas(&grid, &row, 1),
    })
}

pub(crate) fn check_visual_patch(visual_patch: usize) -> Result<()> {
    if visual_patch == 0 || CANVAS % visual_patch != 0 {
        return Err(Error::Config(format!(
            "visual patch {visual_patch} must divide the canvas size {CANVAS}"
        )));
    }
    Ok(())
}

/// Per-variable gamma exponents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaCoefficients(pub Vec<f64>);

impl GammaCoefficients {
    /// `gamma_v = 0.5 + v / N_v`.
    pub fn spaced(n_vars: usize) -> Self {
        Self(
            (0..n_vars)
                .map(|v| 0.5 + v as f64 / n_vars as f64)
                .collect(),
        )
    }

    pub fn ones(n_vars: usize) -> Self {
        Self(vec![1.0; n_vars])
    }
}

fn gamma_correct(p: f64, gamma: f64) -> f64 {
    MAX_INTENSITY * (p / MAX_INTENSITY).powf(gamma)
}

/// Builds the gamma-corrected composite row of all variables, concatenated in time.
pub fn multivariate_row(
    ms: &MultivariateSeries,
    gammas: &GammaCoefficients,
    kernel: usize,
) -> Result<(RgbRow, Vec<f64>)> {
    if gammas.0.len() != ms.n_vars() {
        return Err(validation(format!(
            "{} gamma coefficients for {} variables",
            gammas.0.len(),
            ms.n_vars()
        )));
    }
    if let Some(g) = gammas.0.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(validation(format!("gamma must be positive, got {g}")));
    }
    let mut intensities = Vec::with_capacity(ms.len() * ms.n_vars());
    let mut ranges = Vec::with_capacity(ms.n_vars());
    let mut raw = Vec::with_capacity(ms.len() * ms.n_vars());
    for (var, &gamma) in ms.variables().iter().zip(&gammas.0) {
        let row = intensity_map(&decompose_trend_remainder(var, kernel)?);
        intensities.extend(
            row.intensities
                .iter()
                .map(|p| p.map(|c| gamma_correct(c, gamma))),
        );
        ranges.push(row.ranges[0]);
        raw.extend_from_slice(var.values());
    }
    Ok((
        RgbRow {
            intensities,
            ranges,
            gammas: gammas.0.clone(),
        },
        raw,
    ))
}

/// Multivariate composite heatmap, folded and scaled like the univariate path.
/// The fold period is estimated on the concatenated raw values.
pub fn convert_multivariate(
    ms: &MultivariateSeries,
    gammas: &GammaCoefficients,
    visual_patch: usize,
    kernel: usize,
) -> Result<CanvasImage> {
    check_visual_patch(visual_patch)?;
    let (row, raw) = multivariate_row(ms, gammas, kernel)?;
    let t = estimate_fold_period(&Series::new(raw)?, visual_patch);
    let grid = fold(&row, t)?;
    Ok(scale_to_canvas(&grid, &row, ms.n_vars()))
}

/// Draws the series as a black 1-pixel polyline on a white canvas.
pub fn line_plot(s: &Series) -> CanvasImage {
    let x = s.values();
    let n = x.len();
    let range = ChannelRange::of(x);
    let row_of = |v: f64| -> usize {
        if range.is_constant() {
            CANVAS / 2
        } else {
            ((1.0 - (v - range.min) / (range.max - range.min)) * (CANVAS - 1) as f64).round()
                as usize
        }
    };
    let sample = |j: usize| -> f64 {
        if n == 1 {
            return x[0];
        }
        let t = j as f64 * (n - 1) as f64 / (CANVAS - 1) as f64;
        let i = (t.floor() as usize).min(n - 2);
        let w = t - i as f64;
        x[i] * (1.0 - w) + x[i + 1] * w
    };
    let mut pixels = Array3::from_elem((CANVAS, CANVAS, 3), MAX_INTENSITY);
    let mut prev = row_of(sample(0));
    for j in 0..CANVAS {
        let cur = row_of(sample(j));
        let (lo, hi) = (prev.min(cur), prev.max(cur));
        for r in lo..=hi {
            for ch in 0..3 {
                pixels[[r, j, ch]] = 0.0;
            }
        }
        prev = cur;
    }
    let plan = FoldPlan {
        layout: Layout::LinePlot,
        row_len: n,
        n_vars: 1,
        t_fold: 1,
        n_cols: n,
        pad_len_fold: 0,
        canvas: CANVAS,
        v_scale: VerticalScale::Replicate {
            source_rows: vec![0; CANVAS],
        },
        h_scale: linear_taps(n, CANVAS),
        ranges: vec![[range; 3]],
        gammas: vec![1.0],
    };
    CanvasImage { pixels, plan }
}

/// Solves `A x = b` for symmetric positive definite `A` (in place Cholesky).
fn cholesky_solve(mut a: Array2<f64>, mut b: Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 1e-12) {
            return Err(Error::Internal("horizontal resampling is not invertible".into()));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in j + 1..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    let m = b.ncols();
    for c in 0..m {
        for i in 0..n {
            let mut v = b[[i, c]];
            for k in 0..i {
                v -= a[[i, k]] * b[[k, c]];
            }
            b[[i, c]] = v / a[[i, i]];
        }
        for i in (0..n).rev() {
            let mut v = b[[i, c]];
            for k in i + 1..n {
                v -= a[[k, i]] * b[[k, c]];
            }
            b[[i, c]] = v / a[[i, i]];
        }
    }
    Ok(b)
}

/// Inverts the canvas geometry back to the folded grid.
///
/// Vertical replication is undone by block averaging and horizontal
/// interpolation by least squares on the stored taps. Pooled or linearly
/// resampled vertical axes are not invertible.
pub fn pull_back_grid(img: &CanvasImage) -> Result<FoldedGrid> {
    let plan = &img.plan;
    if plan.layout != Layout::Folded {
        return Err(validation("line-plot canvases carry no invertible geometry"));
    }
    let VerticalScale::Replicate { source_rows } = &plan.v_scale else {
        return Err(validation("vertical axis was not replicated; cannot invert"));
    };
    let (t, n) = (plan.t_fold, plan.n_cols);
    if n > plan.canvas {
        return Err(validation("horizontal axis was downsampled; cannot invert"));
    }
    // Rows: average each replication block.
    let mut rows = Array3::<f64>::zeros((t, plan.canvas, 3));
    let mut counts = vec![0usize; t];
    for (i, &src) in source_rows.iter().enumerate() {
        counts[src] += 1;
        for j in 0..plan.canvas {
            for ch in 0..3 {
                rows[[src, j, ch]] += img.pixels[[i, j, ch]];
            }
        }
    }
    for (r, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(Error::Internal(format!("grid row {r} has no canvas rows")));
        }
        rows.index_axis_mut(ndarray::Axis(0), r)
            .mapv_inplace(|v| v / c as f64);
    }
    // Columns: least squares against the interpolation matrix.
    let mut w = Array2::<f64>::zeros((plan.canvas, n));
    for (j, tap) in plan.h_scale.iter().enumerate() {
        w[[j, tap.left]] += 1.0 - tap.w_right;
        w[[j, tap.right]] += tap.w_right;
    }
    let wtw = w.t().dot(&w);
    // Right-hand side: one column per (row, channel).
    let mut rhs = Array2::<f64>::zeros((plan.canvas, t * 3));
    for r in 0..t {
        for ch in 0..3 {
            for j in 0..plan.canvas {
                rhs[[j, r * 3 + ch]] = rows[[r, j, ch]];
            }
        }
    }
    let sol = cholesky_solve(wtw, w.t().dot(&rhs))?;
    let cells = Array3::from_shape_fn((t, n, 3), |(r, c, ch)| sol[[c, r * 3 + ch]]);
    Ok(FoldedGrid {
        cells,
        t_fold: t,
        n_cols: n,
        pad_len: plan.pad_len_fold,
        row_len: plan.row_len,
    })
}

/// Recovers channel `ch` of variable `var` in original units.
pub fn pull_back_channel(img: &CanvasImage, var: usize, ch: usize) -> Result<Vec<f64>> {
    let plan = &img.plan;
    if var >= plan.n_vars || ch >= 3 {
        return Err(validation("variable or channel out of range"));
    }
    let row = unfold(&pull_back_grid(img)?);
    let len = plan.var_len();
    let range = plan.ranges[var][ch];
    let gamma = plan.gammas[var];
    Ok(row[var * len..(var + 1) * len]
        .iter()
        .map(|p| {
            let q = p[ch].clamp(0.0, MAX_INTENSITY);
            range.decode(MAX_INTENSITY * (q / MAX_INTENSITY).powf(1.0 / gamma))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn series(v: Vec<f64>) -> Series {
        Series::new(v).unwrap()
    }

    fn sine(len: usize, period: f64) -> Series {
        series(
            (0..len)
                .map(|t| (2.0 * std::f64::consts::PI * t as f64 / period).sin())
                .collect(),
        )
    }

    fn row_of(values: &[f64]) -> RgbRow {
        RgbRow {
            intensities: values.iter().map(|&v| [v, v + 100.0, -v]).collect(),
            ranges: vec![[ChannelRange { min: 0.0, max: 1.0 }; 3]],
            gammas: vec![1.0],
        }
    }

    #[test]
    fn decomposition_edge_cases() {
        let d = decompose_trend_remainder(&series(vec![3.0; 40]), 25).unwrap();
        assert!(d.trend.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(d.remainder.iter().all(|&v| v.abs() < 1e-12));

        let s = sine(50, 7.0);
        let d = decompose_trend_remainder(&s, 1).unwrap();
        assert_eq!(d.trend, s.values());
        assert!(d.remainder.iter().all(|&v| v == 0.0));
        assert!(decompose_trend_remainder(&s, 4).is_err());
        assert!(decompose_trend_remainder(&s, 0).is_err());
    }

    #[test]
    fn decomposition_reconstructs_on_random_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let len = rng.random_range(1..300);
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = decompose_trend_remainder(&series(v.clone()), 25).unwrap();
            for t in 0..len {
                assert!((d.trend[t] + d.remainder[t] - v[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn intensity_endpoints_and_constant_channel() {
        let d = Decomposition {
            raw: vec![0.0, 1.0],
            trend: vec![2.0, 2.0],
            remainder: vec![-1.0, 1.0],
            kernel: 1,
        };
        let row = intensity_map(&d);
        assert_eq!(row.channel(0), vec![0.0, 255.0]);
        assert_eq!(row.channel(1), vec![128.0, 128.0]);
    }

    #[test]
    fn intensity_preserves_order() {
        let s = series((0..64).map(|t| (t as f64).powf(1.3)).collect());
        let row = intensity_map(&decompose_trend_remainder(&s, 25).unwrap());
        let r = row.channel(0);
        assert!(r.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(r[0], 0.0);
        assert_eq!(r[63], 255.0);
    }

    /// Brute-force period search, written independently of the estimator.
    fn brute_force_period(x: &[f64]) -> Option<usize> {
        let n = x.len();
        let mean: f64 = x.iter().sum::<f64>() / n as f64;
        let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
        let var: f64 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let mut scored: Vec<(usize, f64)> = (2..=n / 2)
            .map(|lag| {
                let mut acc = 0.0;
                for t in 0..n - lag {
                    acc += c[t] * c[t + lag];
                }
                (lag, acc / (n - lag) as f64 / var)
            })
            .collect();
        let max = scored.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        scored.retain(|p| p.1 >= max - 1e-9);
        scored.first().filter(|p| p.1 >= 0.3).map(|p| p.0)
    }

    #[test]
    fn sine_period_matches_brute_force() {
        let s = sine(256, 32.0);
        assert_eq!(brute_force_period(s.values()), Some(32));
        assert_eq!(estimate_fold_period(&s, 16), 32);
    }

    #[test]
    fn noise_falls_back_to_sqrt() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = rand_distr::StandardNormal;
        let v: Vec<f64> = (0..100).map(|_| rng.sample::<f64, _>(normal)).collect();
        assert_eq!(brute_force_period(&v), None);
        assert_eq!(estimate_fold_period(&series(v), 16), 16);
    }

    #[test]
    fn constant_and_short_series_fallbacks() {
        assert_eq!(estimate_fold_period(&series(vec![1.0; 50]), 16), 16);
        assert_eq!(estimate_fold_period(&series(vec![1.0, 2.0, 3.0]), 16), 16);
    }

    #[test]
    fn fold_index_arithmetic_and_padding() {
        let row = row_of(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let g = fold(&row, 3).unwrap();
        assert_eq!(g.n_cols, 2);
        assert_eq!(g.pad_len, 0);
        let col = |c: usize| (0..3).map(|r| g.cells[[r, c, 0]]).collect::<Vec<_>>();
        assert_eq!(col(0), vec![0.0, 1.0, 2.0]);
        assert_eq!(col(1), vec![3.0, 4.0, 5.0]);

        let row = row_of(&[0.0, 1.0, 2.0, 3.0, 4.0]);
        let g = fold(&row, 3).unwrap();
        assert_eq!(g.pad_len, 1);
        assert_abs_diff_eq!(g.cells[[2, 1, 0]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cells[[2, 1, 1]], 103.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.cells[[2, 1, 2]], -3.0, epsilon = 1e-12);
    }

    #[test]
    fn canvas_vertical_replication_blocks() {
        let row = row_of(&(0..224).map(f64::from).collect::<Vec<_>>());
        let g = fold(&row, 112).unwrap();
        let img = scale_to_canvas(&g, &row, 1);
        let VerticalScale::Replicate { source_rows } = &img.plan.v_scale else {
            panic!("expected replication");
        };
        for r in 0..112 {
            assert_eq!(source_rows.iter().filter(|&&s| s == r).count(), 2);
        }
        // Blocks never differ by more than one row.
        let g = fold(&row, 48).unwrap();
        let img = scale_to_canvas(&g, &row, 1);
        let VerticalScale::Replicate { source_rows } = &img.plan.v_scale else {
            panic!("expected replication");
        };
        let sizes: Vec<usize> = (0..48)
            .map(|r| source_rows.iter().filter(|&&s| s == r).count())
            .collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn identity_horizontal_when_width_matches() {
        let taps = linear_taps(224, 224);
        for (j, t) in taps.iter().enumerate() {
            assert_eq!(t.left, j);
            assert_eq!(t.w_right, 0.0);
        }
    }

    #[test]
    fn taps_weights_sum_to_one() {
        for n in [1, 3, 7, 100, 224, 500] {
            for t in linear_taps(n, 224) {
                assert!(t.left < n && t.right < n);
                assert!((0.0..=1.0).contains(&t.w_right));
            }
        }
    }

    #[test]
    fn piecewise_linear_row_survives_resample() {
        // Evaluate the interpolation weights directly: upsampling a grid row by an
        // integer factor and pulling it back must recover it.
        for n in [1, 2, 4, 7, 8, 14, 16, 28, 32, 56, 112, 224] {
            let src: Vec<f64> = (0..n)
                .map(|c| if c < n / 2 { c as f64 } else { (n - c) as f64 * 0.5 })
                .collect();
            let row = row_of(&src);
            let g = fold(&row, 1).unwrap();
            let img = scale_to_canvas(&g, &row, 1);
            // Interior samples are exact linear blends of neighbors.
            for (j, tap) in img.plan.h_scale.iter().enumerate() {
                let expect = src[tap.left] * (1.0 - tap.w_right) + src[tap.right] * tap.w_right;
                assert!((img.pixels[[0, j, 0]] - expect).abs() < 1e-12);
            }
            let back = unfold(&pull_back_grid(&img).unwrap());
            for c in 0..n {
                assert!((back[c][0] - src[c]).abs() < 1e-6, "n={n} c={c}");
            }
        }
    }

    #[test]
    fn tall_fold_pools_vertically() {
        let row = row_of(&(0..900).map(|v| v as f64 / 900.0).collect::<Vec<_>>());
        let g = fold(&row, 450).unwrap();
        let img = scale_to_canvas(&g, &row, 1);
        assert!(matches!(img.plan.v_scale, VerticalScale::Pool { .. }));
        assert!(pull_back_grid(&img).is_err());
    }

    #[test]
    fn convert_shape_range_and_determinism() {
        let s = sine(300, 24.0);
        let a = convert(&s, 16, DEFAULT_KERNEL).unwrap();
        let b = convert(&s, 16, DEFAULT_KERNEL).unwrap();
        assert_eq!(a.pixels.dim(), (224, 224, 3));
        assert!(a.pixels.iter().all(|&p| (0.0..=255.0).contains(&p)));
        assert_eq!(a, b);
        assert!(convert(&s, 15, DEFAULT_KERNEL).is_err());
    }

    #[test]
    fn convert_round_trips_raw_channel() {
        let s = sine(250, 32.0);
        let img = convert_with_period(&s, 32, DEFAULT_KERNEL).unwrap();
        assert_eq!(img.plan.n_cols, 8);
        let back = pull_back_channel(&img, 0, 0).unwrap();
        for (a, b) in back.iter().zip(s.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn multivariate_reduces_to_univariate() {
        let s = sine(200, 20.0);
        let ms = MultivariateSeries::new(vec![s.clone()], None).unwrap();
        let a = convert_multivariate(&ms, &GammaCoefficients::ones(1), 16, 25).unwrap();
        let b = convert(&s, 16, 25).unwrap();
        assert_eq!(a.pixels, b.pixels);
    }

    #[test]
    fn multivariate_row_is_concatenated_and_gamma_identity() {
        let a = sine(100, 10.0);
        let b = series((0..100).map(|t| t as f64).collect());
        let ms = MultivariateSeries::new(vec![a.clone(), b], None).unwrap();
        let (row, _) = multivariate_row(&ms, &GammaCoefficients::ones(2), 25).unwrap();
        assert_eq!(row.len(), 200);
        let uni = intensity_map(&decompose_trend_remainder(&a, 25).unwrap());
        assert_eq!(&row.intensities[..100], &uni.intensities[..]);

        let (g, _) = multivariate_row(&ms, &GammaCoefficients(vec![2.0, 0.5]), 25).unwrap();
        let p = uni.intensities[3][0];
        assert_abs_diff_eq!(g.intensities[3][0], 255.0 * (p / 255.0).powi(2), epsilon = 1e-9);
        assert!(multivariate_row(&ms, &GammaCoefficients(vec![1.0]), 25).is_err());
        assert!(multivariate_row(&ms, &GammaCoefficients(vec![1.0, -1.0]), 25).is_err());
    }

    #[test]
    fn multivariate_pull_back_inverts_gamma() {
        let a = sine(112, 16.0);
        let b = series((0..112).map(|t| (t as f64 * 0.1).cos() + 0.01 * t as f64).collect());
        let ms = MultivariateSeries::new(vec![a.clone(), b.clone()], None).unwrap();
        let img = convert_multivariate(&ms, &GammaCoefficients::spaced(2), 16, 25).unwrap();
        for (var, s) in [(0, &a), (1, &b)] {
            let back = pull_back_channel(&img, var, 0).unwrap();
            for (x, y) in back.iter().zip(s.values()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn line_plot_is_white_with_black_trace() {
        let img = line_plot(&sine(100, 25.0));
        assert_eq!(img.plan.layout, Layout::LinePlot);
        for j in 0..CANVAS {
            let dark = (0..CANVAS).filter(|&r| img.pixels[[r, j, 0]] == 0.0).count();
            assert!(dark >= 1);
        }
        assert!(img.pixels.iter().all(|&p| p == 0.0 || p == 255.0));
    }

    #[test]
    fn ablated_strategies_render() {
        let s = sine(400, 40.0);
        for st in [
            ImagingStrategy::SingleChannel,
            ImagingStrategy::NoFolding,
            ImagingStrategy::NoScaling,
            ImagingStrategy::LinePlot,
        ] {
            let img = render(&s, 16, 25, st).unwrap();
            assert_eq!(img.pixels.dim(), (224, 224, 3));
            assert!(img.pixels.iter().all(|&p| (-1e-9..=255.0 + 1e-9).contains(&p)));
        }
        let single = render(&s, 16, 25, ImagingStrategy::SingleChannel).unwrap();
        assert_eq!(
            single.pixels.index_axis(ndarray::Axis(2), 0),
            single.pixels.index_axis(ndarray::Axis(2), 2)
        );
    }

    proptest! {
        #[test]
        fn fold_unfold_bijection(v in prop::collection::vec(0f64..255.0, 1..500), t in 1usize..64) {
            let row = row_of(&v);
            let back = unfold(&fold(&row, t).unwrap());
            prop_assert_eq!(back, row.intensities);
        }

        #[test]
        fn period_is_patch_multiple(v in prop::collection::vec(-3f64..3.0, 1..400)) {
            let len = v.len();
            let t = estimate_fold_period(&series(v), 16);
            prop_assert!(t % 16 == 0 && t >= 16);
            prop_assert!(t <= len.max(16));
        }
    }
}
