//! Central finite-difference gradient checks over a whole parameter store.

use vetime_core::params::{Gradients, ParamId, ParamStore};

/// Gradient magnitude below which the central differences are dominated by
/// roundoff; smaller groups are compared on absolute error.
pub const NOISE_FLOOR: f64 = 1e-5;

/// Error of one parameter group.
#[derive(Debug, Clone)]
pub struct GroupError {
    pub name: String,
    pub rel: f64,
}

/// Compares analytic gradients with five-point central differences of `loss` on up to `per_group`
/// entries of every parameter (the largest analytic entries plus a spread of
/// others). Returns the per-group norm-relative errors.
pub fn check_groups(
    store: &mut ParamStore,
    per_group: usize,
    h: f64,
    loss: impl Fn(&ParamStore) -> (f64, Gradients),
) -> Vec<GroupError> {
    let (_, grads) = loss(store);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        let analytic = match grads.get(id) {
            Some(g) => g.clone(),
            None => ndarray::Array2::zeros(store.get(id).dim()),
        };
        let flat: Vec<f64> = analytic.iter().copied().collect();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()));
        let top = per_group.div_ceil(2).min(order.len());
        let mut picks: Vec<usize> = order[..top].to_vec();
        let stride = (flat.len() / per_group.max(1)).max(1);
        for k in (0..flat.len()).step_by(stride) {
            if picks.len() >= per_group.min(flat.len()) {
                break;
            }
            if !picks.contains(&k) {
                picks.push(k);
            }
        }
        let cols = store.get(id).ncols();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &k in &picks {
            let (r, c) = (k / cols, k % cols);
            let orig = store.get(id)[[r, c]];
            let mut at = |dx: f64| {
                store.get_mut(id)[[r, c]] = orig + dx;
                loss(store).0
            };
            let (f1, f_1, f2, f_2) = (at(h), at(-h), at(2.0 * h), at(-2.0 * h));
            store.get_mut(id)[[r, c]] = orig;
            let num = (8.0 * (f1 - f_1) - (f2 - f_2)) / (12.0 * h);
            let a = flat[k];
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        let rel = diff2.sqrt() / denom.max(NOISE_FLOOR);
        out.push(GroupError {
            name: store.name(id).to_string(),
            rel,
        });
    }
    out
}
