//! Task-adaptive expert routing, prediction heads and training losses.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Initializer, ParamId, ParamStore};

/// Number of expert feature sources (temporal, visual, anomaly-enhanced).
pub const N_EXPERTS: usize = 3;
/// Number of tasks (detection, reconstruction).
pub const N_TASKS: usize = 2;
/// Probability clamp used by the BCE loss.
pub const PROB_EPS: f64 = 1e-7;

/// Per-patch MLP producing expert logits for both tasks, plus a shared
/// per-(expert, task) bias.
#[derive(Debug, Clone)]
pub struct Router {
    pub hidden: Linear,
    pub out: Linear,
    pub b_task: ParamId,
}

impl Router {
    pub fn new(store: &mut ParamStore, init: &mut Initializer, dim: usize) -> Self {
        Self {
            hidden: Linear::new(store, init, "router.hidden", dim, dim, true),
            out: Linear::new(store, init, "router.out", dim, N_EXPERTS * N_TASKS, true),
            b_task: store.add("router.b_task", Array2::zeros((1, N_EXPERTS * N_TASKS))),
        }
    }

    /// Softmaxed weights as a `2N x 3` matrix; row `2i + t` holds patch `i`,
    /// task `t`.
    pub fn forward(&self, t: &mut Tape, f_a: Var) -> Var {
        let n = t.shape(f_a).0;
        let h = self.hidden.forward(t, f_a);
        let h = t.gelu(h);
        let logits = self.out.forward(t, h);
        let b = t.param(self.b_task);
        let logits = t.add_row(logits, b);
        let logits = t.reshape(logits, n * N_TASKS, N_EXPERTS);
        t.softmax_rows(logits)
    }
}

/// Routing weights indexed `[patch][expert][task]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterWeights {
    pub w: Vec<[[f64; N_TASKS]; N_EXPERTS]>,
}

impl RouterWeights {
    /// From the `2N x 3` router output layout.
    pub fn from_rows(rows: &Array2<f64>) -> Self {
        let n = rows.nrows() / N_TASKS;
        let w = (0..n)
            .map(|i| {
                let mut cell = [[0.0; N_TASKS]; N_EXPERTS];
                for (m, c) in cell.iter_mut().enumerate() {
                    for (task, v) in c.iter_mut().enumerate() {
                        *v = rows[[i * N_TASKS + task, m]];
                    }
                }
                cell
            })
            .collect();
        Self { w }
    }

    /// Softmax over experts of raw `[patch][expert][task]` logits.
    pub fn from_logits(logits: &[[[f64; N_TASKS]; N_EXPERTS]]) -> Self {
        let rows = Array2::from_shape_fn((logits.len() * N_TASKS, N_EXPERTS), |(r, m)| {
            logits[r / N_TASKS][m][r % N_TASKS]
        });
        Self::from_rows(&softmax_rows(&rows))
    }

    pub fn n_patches(&self) -> usize {
        self.w.len()
    }
}

/// Mean negative entropy of the routing distributions (`sum w ln w / 2N`).
pub fn entropy_regularizer(w: &RouterWeights) -> f64 {
    let s: f64 = w
        .w
        .iter()
        .flat_map(|c| c.iter().flatten())
        .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
        .sum();
    s / (N_TASKS * w.n_patches()) as f64
}

/// Tape version of [`entropy_regularizer`] on the `2N x 3` router output.
pub fn entropy_on_tape(t: &mut Tape, rows: Var) -> Var {
    let n = t.shape(rows).0 as f64;
    let e = t.xlogx(rows);
    let s = t.sum_all(e);
    t.scale(s, 1.0 / n)
}

/// Routes the three experts into one feature matrix per task.
pub fn fuse_on_tape(t: &mut Tape, rows: Var, experts: [Var; N_EXPERTS]) -> [Var; N_TASKS] {
    let n = t.shape(rows).0 / N_TASKS;
    std::array::from_fn(|task| {
        let idx: Vec<usize> = (0..n).map(|i| i * N_TASKS + task).collect();
        let wt = t.gather_rows(rows, &idx);
        let terms: Vec<Var> = experts
            .iter()
            .enumerate()
            .map(|(m, &f)| {
                let col = t.slice_cols(wt, m, m + 1);
                t.mul_col(f, col)
            })
            .collect();
        let ab = t.add(terms[0], terms[1]);
        t.add(ab, terms[2])
    })
}

/// Plain version of the routed fusion, returning `(F_AD, F_Rec)`.
pub fn fuse(
    w: &RouterWeights,
    f_ts: &Array2<f64>,
    f_v: &Array2<f64>,
    f_a: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let experts = [f_ts, f_v, f_a];
    let mut out = [Array2::zeros(f_ts.dim()), Array2::zeros(f_ts.dim())];
    for (task, o) in out.iter_mut().enumerate() {
        for (i, mut row) in o.rows_mut().into_iter().enumerate() {
            for (m, f) in experts.iter().enumerate() {
                row.scaled_add(w.w[i][m][task], &f.row(i));
            }
        }
    }
    let [ad, rec] = out;
    (ad, rec)
}

/// How the three experts are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Router,
    /// Per-task linear map of the concatenated experts.
    Concat,
    /// Unweighted sum of the experts.
    Add,
}

/// Fixed-width projection of each token to `patch_size * k` values, unrolled
/// into a per-timestep `(N * patch_size) x k` matrix and cut to `len` rows.
pub fn project_tokens_to_length(t: &mut Tape, proj: &Linear, f: Var, k: usize, len: usize) -> Var {
    let n = t.shape(f).0;
    let y = proj.forward(t, f);
    let per = proj.out_dim / k;
    let y = t.reshape(y, n * per, k);
    t.slice_rows(y, 0, len)
}

/// GELU hidden layer followed by a token projection.
#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub proj: Linear,
    pub outputs: usize,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        dim: usize,
        patch_size: usize,
        outputs: usize,
    ) -> Self {
        Self {
            hidden: Linear::new(store, init, &format!("{name}.hidden"), dim, dim, true),
            proj: Linear::new(store, init, &format!("{name}.proj"), dim, patch_size * outputs, true),
            outputs,
        }
    }

    fn raw(&self, t: &mut Tape, f: Var, len: usize) -> Var {
        let h = self.hidden.forward(t, f);
        let h = t.gelu(h);
        project_tokens_to_length(t, &self.proj, h, self.outputs, len)
    }

    /// Anomaly probabilities (`len x 1`) from two-class logits.
    pub fn detect(&self, t: &mut Tape, f: Var, len: usize) -> Var {
        let logits = self.raw(t, f, len);
        let p = t.softmax_rows(logits);
        t.slice_cols(p, 1, 2)
    }

    /// Reconstruction (`len x 1`).
    pub fn reconstruct(&self, t: &mut Tape, f: Var, len: usize) -> Var {
        self.raw(t, f, len)
    }
}

/// Mean binary cross-entropy of probabilities against 0/1 labels.
pub fn bce_on_tape(t: &mut Tape, p: Var, labels: &[u8]) -> Var {
    let y = Array2::from_shape_fn((labels.len(), 1), |(i, _)| labels[i] as f64);
    let not_y = y.mapv(|v| 1.0 - v);
    let p = t.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let q = t.affine(p, -1.0, 1.0);
    let lp = t.log(p);
    let lq = t.log(q);
    let y = t.constant(y);
    let not_y = t.constant(not_y);
    let a = t.mul(lp, y);
    let b = t.mul(lq, not_y);
    let s = t.add(a, b);
    let m = t.mean_all(s);
    t.scale(m, -1.0)
}

/// Mean squared error against a fixed target.
pub fn mse_on_tape(t: &mut Tape, x_hat: Var, target: &[f64]) -> Var {
    let x = t.constant(Array2::from_shape_vec((target.len(), 1), target.to_vec()).expect("column"));
    let d = t.sub(x_hat, x);
    let d = t.square(d);
    t.mean_all(d)
}

pub fn bce_loss(p: &[f64], labels: &[u8]) -> f64 {
    let s: f64 = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            if y == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    -s / p.len() as f64
}

pub fn mse_loss(x_hat: &[f64], target: &[f64]) -> f64 {
    x_hat.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x_hat.len() as f64
}

/// Weights of the auxiliary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_aw: f64,
    pub lambda_e: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_aw: 0.1,
            lambda_e: 0.2,
        }
    }
}

/// Individual loss terms of one sample or batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub bce: f64,
    pub mse: f64,
    pub awcl: f64,
    pub entropy: f64,
}

impl LossParts {
    pub fn add_scaled(&mut self, other: &LossParts, s: f64) {
        self.bce += s * other.bce;
        self.mse += s * other.mse;
        self.awcl += s * other.awcl;
        self.entropy += s * other.entropy;
    }
}

/// `BCE + MSE + lambda_aw * AWCL + lambda_e * entropy`; a non-finite term is
/// reported with every part.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: usize) -> Result<f64> {
    let total = parts.bce + parts.mse + weights.lambda_aw * parts.awcl + weights.lambda_e * parts.entropy;
    let all = [parts.bce, parts.mse, parts.awcl, parts.entropy, total];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!(
                "bce={} mse={} awcl={} entropy={} total={total}",
                parts.bce, parts.mse, parts.awcl, parts.entropy
            ),
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn router(dim: usize, seed: u64) -> (ParamStore, Router) {
        let mut store = ParamStore::new();
        let r = Router::new(&mut store, &mut Initializer::new(seed, 0.5), dim);
        (store, r)
    }

    fn route(store: &ParamStore, r: &Router, f: Array2<f64>) -> RouterWeights {
        let mut t = Tape::new(store);
        let x = t.constant(f);
        let w = r.forward(&mut t, x);
        RouterWeights::from_rows(t.value(w))
    }

    #[test]
    fn zero_router_is_uniform() {
        let (mut store, r) = router(4, 1);
        r.out.zero(&mut store);
        let w = route(&store, &r, Array2::ones((5, 4)));
        for c in &w.w {
            for m in c {
                for &v in m {
                    assert!((v - 1.0 / 3.0).abs() < 1e-15);
                }
            }
        }
        assert!((entropy_regularizer(&w) + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn detection_bias_only_moves_detection_weights() {
        let (mut store, r) = router(4, 1);
        r.out.zero(&mut store);
        // Logit order per patch: task 0 experts 0..3, then task 1.
        store.get_mut(r.b_task).as_slice_mut().unwrap()[..3].copy_from_slice(&[10.0, -10.0, -10.0]);
        let w = route(&store, &r, Array2::ones((2, 4)));
        for c in &w.w {
            assert!(c[0][0] > 0.9999 && c[1][0] < 1e-4 && c[2][0] < 1e-4);
            for m in c {
                assert!((m[1] - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_hot_entropy_is_zero() {
        let w = RouterWeights {
            w: vec![[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]; 3],
        };
        assert_eq!(entropy_regularizer(&w), 0.0);
    }

    #[test]
    fn fuse_uniform_is_mean_and_one_hot_selects() {
        let a = Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64);
        let b = Array2::from_shape_fn((3, 2), |(i, j)| (i * j) as f64 - 1.0);
        let c = Array2::from_elem((3, 2), 2.0);
        let uni = RouterWeights {
            w: vec![[[1.0 / 3.0; 2]; 3]; 3],
        };
        let (ad, rec) = fuse(&uni, &a, &b, &c);
        let mean = (&a + &b + &c) / 3.0;
        assert!((&ad - &mean).iter().all(|v| v.abs() < 1e-12));
        assert!((&rec - &mean).iter().all(|v| v.abs() < 1e-12));
        let hot = RouterWeights {
            w: vec![[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]; 3],
        };
        let (ad, rec) = fuse(&hot, &a, &b, &c);
        assert_eq!(ad, a);
        assert_eq!(rec, c);
    }

    #[test]
    fn tape_fuse_matches_plain() {
        let (store, r) = router(3, 4);
        let f = Array2::from_shape_fn((4, 3), |(i, j)| ((i * 3 + j) as f64).cos());
        let e: Vec<Array2<f64>> = (0..3)
            .map(|k| Array2::from_shape_fn((4, 3), |(i, j)| ((i + j * k) as f64 * 0.7).sin()))
            .collect();
        let mut t = Tape::new(&store);
        let x = t.constant(f);
        let rows = r.forward(&mut t, x);
        let vars = [t.constant(e[0].clone()), t.constant(e[1].clone()), t.constant(e[2].clone())];
        let [ad, rec] = fuse_on_tape(&mut t, rows, vars);
        let w = RouterWeights::from_rows(t.value(rows));
        let (pad, prec) = fuse(&w, &e[0], &e[1], &e[2]);
        assert!((t.value(ad) - &pad).iter().all(|v| v.abs() < 1e-12));
        assert!((t.value(rec) - &prec).iter().all(|v| v.abs() < 1e-12));
        let ent = entropy_on_tape(&mut t, rows);
        assert!((t.scalar(ent) - entropy_regularizer(&w)).abs() < 1e-12);
    }

    #[test]
    fn equal_logits_give_half() {
        let mut store = ParamStore::new();
        let head = Head::new(&mut store, &mut Initializer::new(2, 0.3), "det", 4, 8, 2);
        head.proj.zero(&mut store);
        let mut t = Tape::new(&store);
        let x = t.constant(Array2::ones((3, 4)));
        let p = head.detect(&mut t, x, 20);
        assert_eq!(t.shape(p), (20, 1));
        assert!(t.value(p).iter().all(|&v| v == 0.5));
        let bce = bce_on_tape(&mut t, p, &[1; 20]);
        assert!((t.scalar(bce) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((bce_loss(&[0.5, 0.5, 0.5], &[1, 0, 1]) - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&[0.9, 0.1], &[1, 0]) - 0.10536051565782628).abs() < 1e-12);
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = t.constant(Array2::from_shape_vec((2, 1), vec![0.9, 0.1]).unwrap());
        let b = bce_on_tape(&mut t, p, &[1, 0]);
        assert!((t.scalar(b) - 0.10536051565782628).abs() < 1e-12);
        let m = mse_on_tape(&mut t, p, &[1.0, 0.0]);
        assert!((t.scalar(m) - 0.01).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights_and_errors() {
        let parts = LossParts {
            bce: 0.5,
            mse: 0.25,
            awcl: 2.0,
            entropy: -1.0,
        };
        let zero = LossWeights {
            lambda_aw: 0.0,
            lambda_e: 0.0,
        };
        assert_eq!(total_loss(&parts, &zero, 0).unwrap(), 0.75);
        let d = LossWeights::default();
        let base = total_loss(&parts, &d, 0).unwrap();
        let double = LossWeights {
            lambda_aw: 0.2,
            ..d
        };
        assert!((total_loss(&parts, &double, 0).unwrap() - base - 0.2).abs() < 1e-12);
        let bad = LossParts {
            mse: f64::NAN,
            ..parts
        };
        assert!(matches!(total_loss(&bad, &d, 7), Err(Error::NonFiniteLoss { step: 7, .. })));
    }

    proptest! {
        #[test]
        fn router_rows_are_simplexes(seed in 0u64..1000, scale in 0.1f64..5.0) {
            let (store, r) = router(3, seed);
            let f = Array2::from_shape_fn((4, 3), |(i, j)| scale * ((seed as usize + i * 7 + j) as f64).sin());
            let w = route(&store, &r, f);
            for c in &w.w {
                for task in 0..2 {
                    let s: f64 = (0..3).map(|m| c[m][task]).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    prop_assert!((0..3).all(|m| c[m][task] >= 0.0));
                }
            }
            let e = entropy_regularizer(&w);
            prop_assert!(e >= -3f64.ln() - 1e-12 && e <= 0.0);
        }

        #[test]
        fn shift_invariance(logit in -5f64..5.0, shift in -20f64..20.0) {
            let base = [[[logit, 0.0], [0.3, 1.0], [-1.0, 2.0]]];
            let mut shifted = base;
            for m in 0..3 {
                shifted[0][m][0] += shift;
            }
            let a = RouterWeights::from_logits(&base);
            let b = RouterWeights::from_logits(&shifted);
            for m in 0..3 {
                for task in 0..2 {
                    prop_assert!((a.w[0][m][task] - b.w[0][m][task]).abs() < 1e-12);
                }
            }
        }
    }
}
