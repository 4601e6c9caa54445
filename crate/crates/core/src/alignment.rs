//! Maps visual tokens back onto the temporal patch axis.
//!
//! Visual tokens of a `g x g` canvas grid are interpolated along the time
//! (column) axis to `N_TS` positions and mean-pooled over the period (row)
//! axis, then re-temporalized with a learnable positional encoding, a
//! `D_V -> D_TS` projection and one residual self-attention layer.

use ndarray::Array2;

use crate::autograd::{Tape, Var};
use crate::error::{validation, Error, Result};
use crate::imaging::FoldPlan;
use crate::nn::{LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Initializer, ParamId, ParamStore};

/// Endpoint-aligned linear interpolation weights from `src` to `dst` samples
/// (`dst x src`); the first and last source samples land on the first and last
/// outputs.
pub fn interpolation_weights(src: usize, dst: usize) -> Array2<f64> {
    let mut w = Array2::zeros((dst, src));
    for k in 0..dst {
        let x = if dst == 1 || src == 1 {
            (src - 1) as f64 / 2.0
        } else {
            k as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let left = (x.floor() as usize).min(src - 1);
        let right = (left + 1).min(src - 1);
        let frac = x - left as f64;
        w[[k, left]] += 1.0 - frac;
        if right != left {
            w[[k, right]] += frac;
        } else {
            w[[k, left]] += frac;
        }
    }
    w
}

fn grid_side(n_tokens: usize) -> Result<usize> {
    let g = (n_tokens as f64).sqrt().round() as usize;
    if g * g != n_tokens || g == 0 {
        return Err(Error::Internal(format!(
            "{n_tokens} visual tokens do not form a square grid"
        )));
    }
    Ok(g)
}

/// Linear operator (`N_TS x g^2`) that pools token rows and interpolates the
/// columns `[col_start, col_end)` onto `n_ts` positions.
fn span_operator(g: usize, col_start: usize, col_end: usize, n_ts: usize) -> Array2<f64> {
    let span = col_end - col_start;
    let interp = interpolation_weights(span, n_ts);
    let mut op = Array2::zeros((n_ts, g * g));
    for k in 0..n_ts {
        for c in 0..span {
            let w = interp[[k, c]];
            if w == 0.0 {
                continue;
            }
            for r in 0..g {
                op[[k, r * g + col_start + c]] += w / g as f64;
            }
        }
    }
    op
}

/// Alignment operator for the univariate path.
pub fn alignment_operator(n_tokens: usize, n_ts: usize) -> Result<Array2<f64>> {
    let g = grid_side(n_tokens)?;
    Ok(span_operator(g, 0, g, n_ts))
}

/// One alignment operator per variable; the token columns are split into
/// `n_vars` equal spans.
pub fn multivariate_alignment_operators(
    n_tokens: usize,
    n_ts: usize,
    n_vars: usize,
) -> Result<Vec<Array2<f64>>> {
    let g = grid_side(n_tokens)?;
    if n_vars == 0 || g % n_vars != 0 {
        return Err(validation(format!(
            "{g} token columns cannot be split into {n_vars} equal variable spans"
        )));
    }
    let span = g / n_vars;
    Ok((0..n_vars)
        .map(|v| span_operator(g, v * span, (v + 1) * span, n_ts))
        .collect())
}

/// Adaptive mean pooling of the flattened token sequence into `n_ts` rows
/// (alignment disabled).
pub fn direct_pool_operator(n_tokens: usize, n_ts: usize) -> Array2<f64> {
    let mut op = Array2::zeros((n_ts, n_tokens));
    for k in 0..n_ts {
        let a = k * n_tokens / n_ts;
        let b = ((k + 1) * n_tokens).div_ceil(n_ts).max(a + 1).min(n_tokens);
        for j in a..b {
            op[[k, j]] = 1.0 / (b - a) as f64;
        }
    }
    op
}

/// Aligns `N_V x D_V` visual tokens to `N_TS x D_V`.
pub fn align_visual_tokens(f_v0: &Array2<f64>, plan: &FoldPlan, n_ts: usize) -> Result<Array2<f64>> {
    let _ = plan;
    Ok(alignment_operator(f_v0.nrows(), n_ts)?.dot(f_v0))
}

/// Per-variable aligned tokens for a composite multivariate canvas.
pub fn align_visual_tokens_multivariate(
    f_v0: &Array2<f64>,
    plan: &FoldPlan,
    n_ts: usize,
) -> Result<Vec<Array2<f64>>> {
    Ok(multivariate_alignment_operators(f_v0.nrows(), n_ts, plan.n_vars)?
        .iter()
        .map(|op| op.dot(f_v0))
        .collect())
}

/// Switches for the alignment ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalizeOptions {
    pub positional: bool,
    pub attention: bool,
}

impl Default for TemporalizeOptions {
    fn default() -> Self {
        Self {
            positional: true,
            attention: true,
        }
    }
}

/// `F_V = P + Attn(LN(P))` with `P = Project(F_hat + E_POS)`.
#[derive(Debug, Clone)]
pub struct Temporalizer {
    pub e_pos: ParamId,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub max_tokens: usize,
}

impl Temporalizer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        visual_dim: usize,
        temporal_dim: usize,
        heads: usize,
        max_tokens: usize,
    ) -> Self {
        Self {
            e_pos: store.add("align.e_pos", init.trunc_normal(max_tokens, visual_dim)),
            proj: Linear::new(store, init, "align.proj", visual_dim, temporal_dim, true),
            norm: LayerNorm::new(store, "align.norm", temporal_dim),
            attn: MultiHeadAttention::new(store, init, "align.attn", temporal_dim, heads),
            max_tokens,
        }
    }

    pub fn forward(&self, t: &mut Tape, f_hat: Var, opts: TemporalizeOptions) -> Result<Var> {
        let n = t.shape(f_hat).0;
        if n > self.max_tokens {
            return Err(validation(format!(
                "{n} aligned tokens exceed the configured maximum {}",
                self.max_tokens
            )));
        }
        let x = if opts.positional {
            let pos = t.param(self.e_pos);
            let pos = t.slice_rows(pos, 0, n);
            t.add(f_hat, pos)
        } else {
            f_hat
        };
        let p = self.proj.forward(t, x);
        if !opts.attention {
            return Ok(p);
        }
        let h = self.norm.forward(t, p);
        let a = self.attn.forward(t, h, h);
        Ok(t.add(p, a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{convert, Layout, VerticalScale};
    use crate::series::Series;

    fn plan(n_vars: usize) -> FoldPlan {
        FoldPlan {
            layout: Layout::Folded,
            row_len: 64 * n_vars,
            n_vars,
            t_fold: 16,
            n_cols: 4 * n_vars,
            pad_len_fold: 0,
            canvas: 224,
            v_scale: VerticalScale::Replicate { source_rows: vec![] },
            h_scale: vec![],
            ranges: vec![],
            gammas: vec![],
        }
    }

    #[test]
    fn constant_tokens_stay_constant() {
        let v = [0.5, -1.0, 2.0];
        let f = Array2::from_shape_fn((196, 3), |(_, c)| v[c]);
        let out = align_visual_tokens(&f, &plan(1), 9).unwrap();
        assert_eq!(out.nrows(), 9);
        for r in out.rows() {
            for c in 0..3 {
                assert!((r[c] - v[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_count_gives_column_means() {
        let f = Array2::from_shape_fn((16, 2), |(i, c)| (i * 3 + c) as f64);
        let out = align_visual_tokens(&f, &plan(1), 4).unwrap();
        for col in 0..4 {
            for c in 0..2 {
                let mean = (0..4).map(|r| f[[r * 4 + col, c]]).sum::<f64>() / 4.0;
                assert!((out[[col, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        let (a, b, c, d) = (1.0, 4.0, 3.0, 10.0);
        let f = Array2::from_shape_vec((4, 1), vec![a, b, c, d]).unwrap();
        let out = align_visual_tokens(&f, &plan(1), 3).unwrap();
        let m0 = (a + c) / 2.0;
        let m1 = (b + d) / 2.0;
        let expect = [m0, (m0 + m1) / 2.0, m1];
        for k in 0..3 {
            assert!((out[[k, 0]] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn non_square_token_count_is_internal_error() {
        let f = Array2::zeros((10, 2));
        assert!(matches!(
            align_visual_tokens(&f, &plan(1), 3),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn multivariate_splits_columns() {
        let f = Array2::from_shape_fn((196, 2), |(i, c)| ((i % 14) * 2 + c) as f64);
        let one = align_visual_tokens_multivariate(&f, &plan(1), 5).unwrap();
        assert_eq!(one[0], align_visual_tokens(&f, &plan(1), 5).unwrap());
        let two = align_visual_tokens_multivariate(&f, &plan(2), 5).unwrap();
        assert_eq!(two.len(), 2);
        // Variable 0 only sees columns 0..7, variable 1 columns 7..14.
        assert!((two[0][[0, 0]] - 0.0).abs() < 1e-12);
        assert!((two[0][[4, 0]] - 12.0).abs() < 1e-12);
        assert!((two[1][[0, 0]] - 14.0).abs() < 1e-12);
        assert!(align_visual_tokens_multivariate(&f, &plan(3), 5).is_err());
    }

    #[test]
    fn direct_pool_rows_are_averages() {
        let op = direct_pool_operator(196, 10);
        for r in op.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_rows_sum_to_one() {
        for (s, d) in [(1, 5), (14, 1), (14, 3), (14, 64), (7, 7)] {
            let w = interpolation_weights(s, d);
            for r in w.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    fn temporalizer(dim: usize) -> (ParamStore, Temporalizer) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(8, 0.3);
        let t = Temporalizer::new(&mut store, &mut init, dim, dim, 2, 32);
        (store, t)
    }

    #[test]
    fn temporalize_identity_configuration() {
        let (mut store, tz) = temporalizer(4);
        store.get_mut(tz.e_pos).fill(0.0);
        *store.get_mut(tz.proj.weight) = Array2::eye(4);
        store.get_mut(tz.proj.bias.unwrap()).fill(0.0);
        tz.attn.out.zero(&mut store);
        let f_hat = Array2::from_shape_fn((6, 4), |(i, j)| (i as f64 - j as f64) * 0.3);
        let mut t = Tape::new(&store);
        let x = t.constant(f_hat.clone());
        let y = tz.forward(&mut t, x, TemporalizeOptions::default()).unwrap();
        assert_eq!(t.value(y), &f_hat);
    }

    #[test]
    fn e_pos_gradient_matches_finite_differences() {
        let (mut store, tz) = temporalizer(4);
        let f_hat = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let eval = |store: &ParamStore| {
            let mut t = Tape::new(store);
            let x = t.constant(f_hat.clone());
            let y = tz.forward(&mut t, x, TemporalizeOptions::default()).unwrap();
            let w = t.constant(Array2::from_shape_fn((5, 4), |(i, j)| (i + 2 * j) as f64 * 0.1 - 0.3));
            let p = t.mul(y, w);
            let l = t.sum_all(p);
            (t.scalar(l), t.backward(l))
        };
        let (_, g) = eval(&store);
        let analytic = g.get(tz.e_pos).unwrap().clone();
        let h = 1e-6;
        for r in 0..5 {
            for c in 0..4 {
                let orig = store.get(tz.e_pos)[[r, c]];
                store.get_mut(tz.e_pos)[[r, c]] = orig + h;
                let fp = eval(&store).0;
                store.get_mut(tz.e_pos)[[r, c]] = orig - h;
                let fm = eval(&store).0;
                store.get_mut(tz.e_pos)[[r, c]] = orig;
                let num = (fp - fm) / (2.0 * h);
                let a = analytic[[r, c]];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-8) < 1e-4);
            }
            // Rows beyond N_TS never receive gradient.
            assert!(analytic.row(r).iter().all(|v| v.is_finite()));
        }
        assert!(analytic.rows().into_iter().skip(5).all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn full_conversion_alignment_is_deterministic() {
        let s = Series::new((0..320).map(|t| (t as f64 / 9.0).sin()).collect()).unwrap();
        let img = convert(&s, 16, 25).unwrap();
        let f = Array2::from_shape_fn((196, 3), |(i, c)| img.pixels[[i / 14 * 16, i % 14 * 16, c]]);
        let a = align_visual_tokens(&f, &img.plan, 20).unwrap();
        let b = align_visual_tokens(&f, &img.plan, 20).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.nrows(), 20);
    }
}
