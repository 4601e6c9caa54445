//! Direct, unoptimized reference implementations of the evaluation metrics.
//! Each follows the textbook definition with plain loops so it can be checked
//! against the library implementation value for value.

/// Label softened by distance to the nearest positive point.
fn soft_label(labels: &[u8], i: usize, buffer: usize) -> f64 {
    let mut best: f64 = 0.0;
    for (j, &y) in labels.iter().enumerate() {
        if y == 1 {
            let d = i.abs_diff(j) as f64;
            best = best.max(1.0 - d / (buffer as f64 + 1.0));
        }
    }
    best
}

/// Volume under the PR surface by a threshold by buffer double loop.
pub fn vus_pr(scores: &[f64], labels: &[u8], max_buffer: usize) -> f64 {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut total = 0.0;
    for l in 0..=max_buffer {
        let soft: Vec<f64> = (0..labels.len()).map(|i| soft_label(labels, i, l)).collect();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &thr in &thresholds {
            let mut mass = 0.0;
            let mut tp = 0;
            let mut n_pred = 0;
            for i in 0..scores.len() {
                if scores[i] >= thr {
                    n_pred += 1;
                    mass += soft[i];
                    if labels[i] == 1 {
                        tp += 1;
                    }
                }
            }
            let recall = tp as f64 / n_pos as f64;
            area += (recall - prev_recall) * mass / n_pred as f64;
            prev_recall = recall;
        }
        total += area;
    }
    total / (max_buffer + 1) as f64
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Point-wise F1 at one threshold.
pub fn point_f1(scores: &[f64], labels: &[u8], thr: f64) -> f64 {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= thr).collect();
    let tp = pred.iter().zip(labels).filter(|(&p, &y)| p && y == 1).count() as f64;
    let n_pred = pred.iter().filter(|&&p| p).count() as f64;
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    if n_pred == 0.0 && n_pos == 0.0 {
        return 1.0;
    }
    let p = if n_pred > 0.0 { tp / n_pred } else { 0.0 };
    let r = if n_pos > 0.0 { tp / n_pos } else { 0.0 };
    f1(p, r)
}

/// Best point-wise F1 over every threshold taken from the scores.
pub fn best_point_f1(scores: &[f64], labels: &[u8]) -> f64 {
    let mut best = 0.0f64;
    for &thr in scores {
        best = best.max(point_f1(scores, labels, thr));
    }
    best
}

/// Maximal runs of `true`.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let s = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

/// Event-aware F1 computed from point masks: half credit for touching a true
/// event, half for its covered fraction; precision is each predicted event's
/// fraction inside true events.
pub fn f1_t(pred: &[bool], truth: &[bool]) -> f64 {
    let gt = runs(truth);
    let pe = runs(pred);
    if gt.is_empty() && pe.is_empty() {
        return 1.0;
    }
    if gt.is_empty() || pe.is_empty() {
        return 0.0;
    }
    let mut recall = 0.0;
    for &(s, e) in &gt {
        let covered = (s..e).filter(|&i| pred[i]).count();
        let touched = if covered > 0 { 1.0 } else { 0.0 };
        recall += 0.5 * touched + 0.5 * covered as f64 / (e - s) as f64;
    }
    recall /= gt.len() as f64;
    let mut precision = 0.0;
    for &(s, e) in &pe {
        let inside = (s..e).filter(|&i| truth[i]).count();
        precision += inside as f64 / (e - s) as f64;
    }
    precision /= pe.len() as f64;
    f1(precision, recall)
}

fn dist_to(x: usize, (s, e): (usize, usize)) -> usize {
    (s..e).map(|y| x.abs_diff(y)).min().unwrap()
}

/// Affiliation F1 by enumeration: every point joins the nearest true event
/// (ties to the earlier one); precision and recall are survival fractions of
/// distances within that zone.
pub fn affiliation_f1(pred: &[bool], truth: &[bool]) -> f64 {
    let gt = runs(truth);
    assert!(!gt.is_empty());
    let len = truth.len();
    let zone_of: Vec<usize> = (0..len)
        .map(|x| {
            let mut best = 0;
            for j in 1..gt.len() {
                if dist_to(x, gt[j]) < dist_to(x, gt[best]) {
                    best = j;
                }
            }
            best
        })
        .collect();
    if !pred.contains(&true) {
        return 0.0;
    }
    let mut p_sum = 0.0;
    let mut p_zones = 0;
    let mut r_sum = 0.0;
    for (j, &event) in gt.iter().enumerate() {
        let zone: Vec<usize> = (0..len).filter(|&x| zone_of[x] == j).collect();
        let preds: Vec<usize> = zone.iter().copied().filter(|&x| pred[x]).collect();
        if preds.is_empty() {
            continue;
        }
        let size = zone.len() as f64;
        let mut prec = 0.0;
        for &p in &preds {
            let d = dist_to(p, event);
            prec += zone.iter().filter(|&&y| dist_to(y, event) >= d).count() as f64 / size;
        }
        p_sum += prec / preds.len() as f64;
        p_zones += 1;
        let mut rec = 0.0;
        for x in event.0..event.1 {
            let d = preds.iter().map(|&p| p.abs_diff(x)).min().unwrap();
            rec += zone.iter().filter(|&&y| y.abs_diff(x) >= d).count() as f64 / size;
        }
        r_sum += rec / (event.1 - event.0) as f64;
    }
    f1(p_sum / p_zones as f64, r_sum / gt.len() as f64)
}
