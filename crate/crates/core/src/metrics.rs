//! Point-wise, event-aware, affiliation and volume-under-surface metrics.

use serde::{Deserialize, Serialize};

use crate::error::{validation, Result};

/// `[start, end)` interval of consecutive anomalous timestamps.
pub type Event = (usize, usize);

/// Precision, recall and their harmonic mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { precision, recall, f1 }
    }
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(validation(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(validation("scores must be finite"));
    }
    Ok(())
}

fn f1_from_counts(tp: usize, n_pred: usize, n_pos: usize) -> F1Score {
    if n_pred == 0 && n_pos == 0 {
        return F1Score::from_pr(1.0, 1.0);
    }
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_pos == 0 { 0.0 } else { tp as f64 / n_pos as f64 };
    F1Score::from_pr(p, r)
}

/// Point-wise F1 of the prediction `score >= threshold`. A series with no
/// positives and no predictions scores 1.
pub fn standard_f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<F1Score> {
    check_lengths(scores, labels)?;
    let mut tp = 0;
    let mut n_pred = 0;
    for (&s, &y) in scores.iter().zip(labels) {
        if s >= threshold {
            n_pred += 1;
            tp += (y == 1) as usize;
        }
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    Ok(f1_from_counts(tp, n_pred, n_pos))
}

/// Result of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestF1 {
    pub threshold: f64,
    pub score: F1Score,
}

/// Score indices sorted by descending score, grouped by equal values.
fn descending_groups(scores: &[f64]) -> Vec<(f64, Vec<usize>)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out: Vec<(f64, Vec<usize>)> = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some((v, g)) if *v == scores[i] => g.push(i),
            _ => out.push((scores[i], vec![i])),
        }
    }
    out
}

/// Best point-wise F1 over every distinct score used as threshold; ties go to
/// the smallest threshold.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<BestF1> {
    check_lengths(scores, labels)?;
    if scores.is_empty() {
        return Err(validation("cannot sweep thresholds over an empty series"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let mut tp = 0;
    let mut n_pred = 0;
    let mut best: Option<BestF1> = None;
    for (v, group) in descending_groups(scores) {
        n_pred += group.len();
        tp += group.iter().filter(|&&i| labels[i] == 1).count();
        let s = f1_from_counts(tp, n_pred, n_pos);
        if best.is_none_or(|b| s.f1 >= b.score.f1) {
            best = Some(BestF1 { threshold: v, score: s });
        }
    }
    Ok(best.expect("non-empty"))
}

/// Maximal runs of positive labels.
pub fn events_from_labels(labels: &[u8]) -> Vec<Event> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &y) in labels.iter().enumerate() {
        match (y == 1, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, labels.len()));
    }
    out
}

/// Maximal runs of `score >= threshold`.
pub fn events_from_scores(scores: &[f64], threshold: f64) -> Vec<Event> {
    let bin: Vec<u8> = scores.iter().map(|&s| (s >= threshold) as u8).collect();
    events_from_labels(&bin)
}

fn overlap(a: Event, events: &[Event]) -> usize {
    events
        .iter()
        .map(|&(s, e)| e.min(a.1).saturating_sub(s.max(a.0)))
        .sum()
}

/// Weight of detecting an event at all, versus covering it.
pub const EXISTENCE_WEIGHT: f64 = 0.5;

/// Event-aware F1. Each true event earns half credit for being touched and
/// half for the fraction covered; each predicted event earns its fraction
/// inside true events.
pub fn f1_t(scores: &[f64], labels: &[u8], threshold: f64) -> Result<F1Score> {
    check_lengths(scores, labels)?;
    let gt = events_from_labels(labels);
    let pred = events_from_scores(scores, threshold);
    Ok(f1_t_events(&pred, &gt))
}

pub fn f1_t_events(pred: &[Event], gt: &[Event]) -> F1Score {
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return F1Score::from_pr(1.0, 1.0),
        (true, false) | (false, true) => return F1Score::from_pr(0.0, 0.0),
        _ => {}
    }
    let recall = gt
        .iter()
        .map(|&g| {
            let o = overlap(g, pred);
            let exists = if o > 0 { 1.0 } else { 0.0 };
            EXISTENCE_WEIGHT * exists + (1.0 - EXISTENCE_WEIGHT) * o as f64 / (g.1 - g.0) as f64
        })
        .sum::<f64>()
        / gt.len() as f64;
    let precision = pred
        .iter()
        .map(|&p| overlap(p, gt) as f64 / (p.1 - p.0) as f64)
        .sum::<f64>()
        / pred.len() as f64;
    F1Score::from_pr(precision, recall)
}

fn validate_events(events: &[Event], len: usize, what: &str) -> Result<()> {
    let mut prev_end = 0;
    for (k, &(s, e)) in events.iter().enumerate() {
        if s >= e || e > len || (k > 0 && s <= prev_end) {
            return Err(validation(format!(
                "{what} events must be sorted, disjoint, non-adjacent and inside [0, {len})"
            )));
        }
        prev_end = e;
    }
    Ok(())
}

/// Affiliation zones: zone `j` is the `[a, b)` range of points closer to
/// event `j` than to any other (ties to the earlier event).
pub fn affiliation_zones(gt: &[Event], len: usize) -> Vec<(usize, usize)> {
    let mut zones = Vec::with_capacity(gt.len());
    let mut a = 0;
    for j in 0..gt.len() {
        let b = match gt.get(j + 1) {
            // x belongs to j iff x - (e - 1) <= s_next - x.
            Some(&(s_next, _)) => (s_next + gt[j].1 - 1) / 2 + 1,
            None => len,
        };
        zones.push((a, b));
        a = b;
    }
    zones
}

fn dist_to_event(x: usize, (s, e): Event) -> usize {
    if x < s {
        s - x
    } else if x >= e {
        x + 1 - e
    } else {
        0
    }
}

/// Points of zone `(a, b)` at distance at least `d` from `event`.
fn zone_count_from_event((a, b): (usize, usize), (s, e): Event, d: usize) -> usize {
    if d == 0 {
        return b - a;
    }
    let left = s - a;
    let right = b - e;
    (left + 1).saturating_sub(d) + (right + 1).saturating_sub(d)
}

/// Points of zone `(a, b)` at distance at least `d` from point `x`.
fn zone_count_from_point((a, b): (usize, usize), x: usize, d: usize) -> usize {
    if d == 0 {
        return b - a;
    }
    let below = if x >= d { (x - d + 1).min(b).saturating_sub(a) } else { 0 };
    let above = b.saturating_sub(a.max(x + d));
    below + above
}

/// Affiliation precision, recall and F1 over integer timestamps.
///
/// Inside each zone, a predicted point's precision is the share of zone points
/// lying at least as far from the true event, and a true point's recall is the
/// share of zone points lying at least as far from it as the nearest predicted
/// point in the zone. Precision averages over zones holding predictions,
/// recall over all zones.
pub fn affiliation_f1(pred: &[Event], gt: &[Event], len: usize) -> Result<F1Score> {
    if gt.is_empty() {
        return Err(validation("affiliation needs at least one true event"));
    }
    validate_events(gt, len, "true")?;
    validate_events(pred, len, "predicted")?;
    if pred.is_empty() {
        return Ok(F1Score::from_pr(0.0, 0.0));
    }
    let mut is_pred = vec![false; len];
    for &(s, e) in pred {
        is_pred[s..e].fill(true);
    }
    let zones = affiliation_zones(gt, len);
    let mut p_sum = 0.0;
    let mut p_zones = 0usize;
    let mut r_sum = 0.0;
    for (&zone, &event) in zones.iter().zip(gt) {
        let (a, b) = zone;
        let size = (b - a) as f64;
        let preds: Vec<usize> = (a..b).filter(|&x| is_pred[x]).collect();
        if preds.is_empty() {
            continue;
        }
        let prec = preds
            .iter()
            .map(|&p| zone_count_from_event(zone, event, dist_to_event(p, event)) as f64 / size)
            .sum::<f64>()
            / preds.len() as f64;
        p_sum += prec;
        p_zones += 1;
        // Nearest predicted point via a two-pointer walk over the sorted list.
        let mut k = 0;
        let mut rec = 0.0;
        for x in event.0..event.1 {
            while k + 1 < preds.len() && preds[k + 1] <= x {
                k += 1;
            }
            let mut d = preds[k].abs_diff(x);
            if let Some(&q) = preds.get(k + 1) {
                d = d.min(q.abs_diff(x));
            }
            rec += zone_count_from_point(zone, x, d) as f64 / size;
        }
        r_sum += rec / (event.1 - event.0) as f64;
    }
    Ok(F1Score::from_pr(p_sum / p_zones as f64, r_sum / gt.len() as f64))
}

/// Default largest buffer: `min(L / 20, 16)`.
pub fn default_max_buffer(len: usize) -> usize {
    (len / 20).min(16)
}

/// Labels softened by a linear ramp of `buffer` points on each side of every
/// event: `1 - d / (buffer + 1)` at distance `d`.
pub fn soft_labels(labels: &[u8], buffer: usize) -> Vec<f64> {
    let mut out: Vec<f64> = labels.iter().map(|&y| y as f64).collect();
    for (s, e) in events_from_labels(labels) {
        for d in 1..=buffer {
            let v = 1.0 - d as f64 / (buffer + 1) as f64;
            if s >= d {
                out[s - d] = out[s - d].max(v);
            }
            if e - 1 + d < labels.len() {
                out[e - 1 + d] = out[e - 1 + d].max(v);
            }
        }
    }
    out
}

/// Step-wise area under the precision-recall curve where precision counts
/// soft label mass and recall counts true positives.
fn area_under_pr(groups: &[(f64, Vec<usize>)], soft: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let mut mass = 0.0;
    let mut tp = 0usize;
    let mut n_pred = 0usize;
    let mut prev_r = 0.0;
    let mut area = 0.0;
    for (_, g) in groups {
        n_pred += g.len();
        for &i in g {
            mass += soft[i];
            tp += (labels[i] == 1) as usize;
        }
        let r = tp as f64 / n_pos;
        area += (r - prev_r) * (mass / n_pred as f64);
        prev_r = r;
    }
    area
}

/// Mean area under the precision-recall curve over buffers `0..=max_buffer`.
/// A series without positives scores 0.
pub fn vus_pr(scores: &[f64], labels: &[u8], max_buffer: Option<usize>) -> Result<f64> {
    check_lengths(scores, labels)?;
    if !labels.contains(&1) {
        return Ok(0.0);
    }
    let max_buffer = max_buffer.unwrap_or_else(|| default_max_buffer(labels.len()));
    let groups = descending_groups(scores);
    let total: f64 = (0..=max_buffer)
        .map(|l| area_under_pr(&groups, &soft_labels(labels, l), labels))
        .sum();
    Ok(total / (max_buffer + 1) as f64)
}

/// Area under the precision-recall curve (no buffer).
pub fn auc_pr(scores: &[f64], labels: &[u8]) -> Result<f64> {
    vus_pr(scores, labels, Some(0))
}

/// All four metrics for one scored series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    /// Best-threshold point-wise F1.
    pub standard_f1: f64,
    pub f1_t: f64,
    /// Absent when the series has no true events.
    pub affiliation_f1: Option<f64>,
    pub vus_pr: f64,
}

/// Evaluation settings shared across series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricOptions {
    pub event_threshold: f64,
    pub max_buffer: Option<usize>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            event_threshold: 0.5,
            max_buffer: None,
        }
    }
}

pub fn score_series(scores: &[f64], labels: &[u8], opts: &MetricOptions) -> Result<SeriesMetrics> {
    let gt = events_from_labels(labels);
    let affiliation_f1 = if gt.is_empty() {
        None
    } else {
        let pred = events_from_scores(scores, opts.event_threshold);
        Some(affiliation_f1(&pred, &gt, labels.len())?.f1)
    };
    Ok(SeriesMetrics {
        standard_f1: best_f1(scores, labels)?.score.f1,
        f1_t: f1_t(scores, labels, opts.event_threshold)?.f1,
        affiliation_f1,
        vus_pr: vus_pr(scores, labels, opts.max_buffer)?,
    })
}

/// Means of each metric over a collection (affiliation over series that
/// define it).
pub fn mean_metrics(all: &[SeriesMetrics]) -> SeriesMetrics {
    let n = all.len().max(1) as f64;
    let aff: Vec<f64> = all.iter().filter_map(|m| m.affiliation_f1).collect();
    SeriesMetrics {
        standard_f1: all.iter().map(|m| m.standard_f1).sum::<f64>() / n,
        f1_t: all.iter().map(|m| m.f1_t).sum::<f64>() / n,
        affiliation_f1: (!aff.is_empty()).then(|| aff.iter().sum::<f64>() / aff.len() as f64),
        vus_pr: all.iter().map(|m| m.vus_pr).sum::<f64>() / n,
    }
}
