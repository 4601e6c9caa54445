//! Cross-modal attention and anomaly-window contrastive learning.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{validation, Result};
use crate::nn::{attend, FeedForward, Linear};
use crate::params::{Initializer, ParamStore};
use crate::series::PatchLabels;

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;

/// Single-head cross attention with bias-free square projections.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, name: &str, dim: usize) -> Self {
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, false),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, false),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, false),
        }
    }

    /// Queries come from `query`, keys and values from `context`. Returns the
    /// output and the attention weights.
    pub fn forward(&self, t: &mut Tape, query: Var, context: Var) -> (Var, Var) {
        let q = self.q.forward(t, query);
        let k = self.k.forward(t, context);
        let v = self.v.forward(t, context);
        attend(t, q, k, v)
    }
}

/// Temporal and visual features attending to each other, each followed by a
/// residual feed-forward layer.
#[derive(Debug, Clone)]
pub struct DualCrossAttention {
    pub ts_from_v: CrossAttention,
    pub v_from_ts: CrossAttention,
    pub ffn_ts: FeedForward,
    pub ffn_v: FeedForward,
    pub dim: usize,
}

impl DualCrossAttention {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, dim: usize, ffn_dim: usize) -> Self {
        Self {
            ts_from_v: CrossAttention::new(store, init, "awcl.ts_from_v", dim),
            v_from_ts: CrossAttention::new(store, init, "awcl.v_from_ts", dim),
            ffn_ts: FeedForward::new(store, init, "awcl.ffn_ts", dim, ffn_dim, dim),
            ffn_v: FeedForward::new(store, init, "awcl.ffn_v", dim, ffn_dim, dim),
            dim,
        }
    }

    /// Returns `(Z_TS, Z_V)`.
    pub fn forward(&self, t: &mut Tape, f_ts: Var, f_v: Var) -> Result<(Var, Var)> {
        let (a, b) = (t.shape(f_ts), t.shape(f_v));
        if a != b || a.1 != self.dim {
            return Err(validation(format!(
                "cross attention needs matching {}-dim inputs, got {a:?} and {b:?}",
                self.dim
            )));
        }
        let (z_ts0, _) = self.ts_from_v.forward(t, f_ts, f_v);
        let (z_v0, _) = self.v_from_ts.forward(t, f_v, f_ts);
        let f = self.ffn_ts.forward(t, z_ts0);
        let z_ts = t.add(z_ts0, f);
        let f = self.ffn_v.forward(t, z_v0);
        let z_v = t.add(z_v0, f);
        Ok((z_ts, z_v))
    }
}

/// Point-like (one patch) or context (several patches) anomaly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    Short,
    Long,
}

/// A patch span holding one anomaly run plus normal context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnomalyWindow {
    pub start: usize,
    pub end: usize,
    pub anomaly_start: usize,
    pub anomaly_end: usize,
    pub kind: WindowKind,
}

impl AnomalyWindow {
    pub fn anomaly_len(&self) -> usize {
        self.anomaly_end - self.anomaly_start
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Normal patch indices inside the window.
    pub fn context(&self) -> impl Iterator<Item = usize> + '_ {
        (self.start..self.anomaly_start).chain(self.anomaly_end..self.end)
    }
}

/// Maximal runs of `value` in `flags` as `[start, end)`.
pub(crate) fn runs(flags: &[u8], value: u8) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < flags.len() {
        if flags[i] == value {
            let s = i;
            while i < flags.len() && flags[i] == value {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// One window per anomaly run, extended with up to `L_a` context patches split
/// evenly (extra patch to the right). A side that runs out of room borrows from
/// the other, with no side exceeding `ceil(L_a/2) + 1`. Windows never overlap
/// each other or a neighbouring run.
pub fn build_anomaly_windows(pl: &PatchLabels) -> Vec<AnomalyWindow> {
    let rs = runs(&pl.flags, 1);
    let n = pl.flags.len();
    let mut out: Vec<AnomalyWindow> = Vec::with_capacity(rs.len());
    for (i, &(s, e)) in rs.iter().enumerate() {
        let la = e - s;
        let left_lim = out.last().map_or(0, |w| w.end);
        let right_lim = rs.get(i + 1).map_or(n, |r| r.0);
        let (avail_l, avail_r) = (s - left_lim, right_lim - e);
        let cap = la.div_ceil(2) + 1;
        let want_l = la / 2;
        let want_r = la - want_l;
        let mut left = want_l.min(avail_l);
        let mut right = want_r.min(avail_r);
        if left < want_l {
            right = (want_r + want_l - left).min(avail_r).min(cap.max(want_r));
        } else if right < want_r {
            left = (want_l + want_r - right).min(avail_l).min(cap.max(want_l));
        }
        out.push(AnomalyWindow {
            start: s - left,
            end: e + right,
            anomaly_start: s,
            anomaly_end: e,
            kind: if la == 1 { WindowKind::Short } else { WindowKind::Long },
        });
    }
    out
}

/// Normal windows: maximal patch runs outside every anomaly window, chunked
/// to at most `chunk` patches.
pub fn normal_windows(n_patches: usize, windows: &[AnomalyWindow], chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    let mut covered = vec![0u8; n_patches];
    for w in windows {
        covered[w.start..w.end].fill(1);
    }
    let mut out = Vec::new();
    for (s, e) in runs(&covered, 0) {
        let mut a = s;
        while a < e {
            let b = (a + chunk).min(e);
            out.push((a, b));
            a = b;
        }
    }
    out
}

/// Similarity used inside the window losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Raw dot product.
    Dot,
    /// Dot product of L2-normalized features.
    #[default]
    Cosine,
}

const NORM_EPS: f64 = 1e-12;

/// Rows scaled to unit L2 norm.
pub fn l2_normalize_rows(t: &mut Tape, x: Var) -> Var {
    let d = t.shape(x).1;
    let sq = t.square(x);
    let ones = t.constant(Array2::ones((d, 1)));
    let norm2 = t.matmul(sq, ones);
    let shifted = t.affine(norm2, 1.0, NORM_EPS);
    let log = t.log(shifted);
    let half = t.scale(log, -0.5);
    let inv = t.exp(half);
    t.mul_col(x, inv)
}

/// Similarities of each row of `rows` with the single row `anchor` (`k x 1`).
fn similarities(t: &mut Tape, rows: Var, anchor: Var, sim: Similarity) -> Var {
    match sim {
        Similarity::Dot => t.matmul_t(rows, anchor),
        Similarity::Cosine => {
            let r = l2_normalize_rows(t, rows);
            let a = l2_normalize_rows(t, anchor);
            t.matmul_t(r, a)
        }
    }
}

/// `-log(exp(pos/tau) / sum_k exp(neg_k/tau))` on tape; `negs` is a column
/// of similarities.
fn contrast(t: &mut Tape, pos: Var, negs: Var, tau: f64) -> Var {
    let p = t.scale(pos, 1.0 / tau);
    let n = t.scale(negs, 1.0 / tau);
    let lse = t.logsumexp(n);
    t.sub(lse, p)
}

/// Intra-window loss for a short window: the visual feature at the anomaly is
/// the anchor, its temporal counterpart the positive and the window's normal
/// temporal features the negatives. `None` when the window has no negatives.
pub fn intra_window_loss(
    t: &mut Tape,
    z_v: Var,
    z_ts: Var,
    w: &AnomalyWindow,
    tau: f64,
    sim: Similarity,
) -> Option<Var> {
    let negs: Vec<usize> = w.context().collect();
    if negs.is_empty() {
        return None;
    }
    let a = w.anomaly_start;
    let anchor = t.slice_rows(z_v, a, a + 1);
    let pos = t.slice_rows(z_ts, a, a + 1);
    let pos = similarities(t, pos, anchor, sim);
    let neg_feats = t.gather_rows(z_ts, &negs);
    let sims = similarities(t, neg_feats, anchor, sim);
    Some(contrast(t, pos, sims, tau))
}

/// Inter-window loss for a long window: pooled temporal anchor, pooled visual
/// positive, pooled visual normal windows as negatives. `None` without normal
/// windows.
pub fn inter_window_loss(
    t: &mut Tape,
    z_ts: Var,
    z_v: Var,
    w: &AnomalyWindow,
    normals: &[(usize, usize)],
    tau: f64,
    sim: Similarity,
) -> Option<Var> {
    if normals.is_empty() {
        return None;
    }
    let pooled = |t: &mut Tape, x: Var, s: usize, e: usize| {
        let r = t.slice_rows(x, s, e);
        t.mean_rows(r)
    };
    let anchor = pooled(t, z_ts, w.start, w.end);
    let pos = pooled(t, z_v, w.start, w.end);
    let pos = similarities(t, pos, anchor, sim);
    let negs: Vec<Var> = normals.iter().map(|&(s, e)| pooled(t, z_v, s, e)).collect();
    let negs = t.concat_rows(&negs);
    let sims = similarities(t, negs, anchor, sim);
    Some(contrast(t, pos, sims, tau))
}

/// Which window losses are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastTerms {
    pub intra: bool,
    pub inter: bool,
}

impl Default for ContrastTerms {
    fn default() -> Self {
        Self {
            intra: true,
            inter: true,
        }
    }
}

/// Per-instance loss: mean intra loss over valid short windows plus mean
/// inter loss over valid long windows. `None` when nothing contributes.
pub fn instance_awcl_loss(
    t: &mut Tape,
    z_ts: Var,
    z_v: Var,
    pl: &PatchLabels,
    tau: f64,
    sim: Similarity,
    terms: ContrastTerms,
) -> Option<Var> {
    let windows = build_anomaly_windows(pl);
    let mut short = Vec::new();
    let mut long = Vec::new();
    for w in &windows {
        match w.kind {
            WindowKind::Short if terms.intra => {
                if let Some(l) = intra_window_loss(t, z_v, z_ts, w, tau, sim) {
                    short.push(l);
                }
            }
            WindowKind::Long if terms.inter => {
                let normals = normal_windows(pl.len(), &windows, w.len());
                if let Some(l) = inter_window_loss(t, z_ts, z_v, w, &normals, tau, sim) {
                    long.push(l);
                }
            }
            _ => {}
        }
    }
    let mut parts = Vec::new();
    for group in [short, long] {
        let n = group.len() as f64;
        parts.extend(group.into_iter().map(|v| (v, 1.0 / n)));
    }
    (!parts.is_empty()).then(|| t.weighted_sum(&parts))
}

/// Mean of per-instance losses; instances without valid windows count as 0.
pub fn batch_awcl_loss(instance_losses: &[Option<f64>]) -> f64 {
    if instance_losses.is_empty() {
        return 0.0;
    }
    instance_losses.iter().map(|l| l.unwrap_or(0.0)).sum::<f64>() / instance_losses.len() as f64
}

/// `F_A = FFN([Z_TS; Z_V])`.
#[derive(Debug, Clone)]
pub struct AnomalyFusion {
    pub ffn: FeedForward,
}

impl AnomalyFusion {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, dim: usize, ffn_dim: usize) -> Self {
        Self {
            ffn: FeedForward::new(store, init, "awcl.fuse", 2 * dim, ffn_dim, dim),
        }
    }

    pub fn forward(&self, t: &mut Tape, z_ts: Var, z_v: Var) -> Var {
        let cat = t.concat_cols(&[z_ts, z_v]);
        self.ffn.forward(t, cat)
    }
}
