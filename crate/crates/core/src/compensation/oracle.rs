//! Numerical minimizer of the compensation objective, used to cross-check
//! the closed form. It only ever evaluates [`ChannelData::objective`].

use super::{ChannelData, CompensationError, PreparedPair, Regularization, Result};

const REFINE_ITERATIONS: usize = 200;

/// Dense grid search over `[0, c_max]` with `grid` intervals per channel,
/// followed by golden-section refinement around the best grid point.
///
/// `c_max = 2·max(1, ‖W_j‖/‖Ŵ_j‖)`, which bounds the unconstrained minimizer
/// by Cauchy-Schwarz. A channel whose objective is constant over the grid
/// returns `1`.
pub fn oracle_minimize(pair: &PreparedPair, reg: &Regularization, grid: usize) -> Result<Vec<f64>> {
    if grid == 0 {
        return Err(CompensationError::Argument(
            "grid resolution must be positive".into(),
        ));
    }
    Ok(pair
        .channels
        .iter()
        .map(|ch| minimize_channel(ch, reg, grid))
        .collect())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn minimize_channel(ch: &ChannelData, reg: &Regularization, grid: usize) -> f64 {
    let q = norm(&ch.quantized);
    let ratio = if q > 0.0 { norm(&ch.original) / q } else { 1.0 };
    let c_max = 2.0 * ratio.max(1.0);
    let step = c_max / grid as f64;

    let f = |c: f64| ch.objective(c, reg);
    let values: Vec<f64> = (0..=grid).map(|i| f(i as f64 * step)).collect();
    let (best, lo_val, hi_val) = values.iter().enumerate().fold(
        (0usize, f64::INFINITY, f64::NEG_INFINITY),
        |(b, lo, hi), (i, &v)| {
            let b = if v < values[b] { i } else { b };
            (b, lo.min(v), hi.max(v))
        },
    );
    if lo_val == hi_val {
        return 1.0;
    }

    let mut a = best.saturating_sub(1) as f64 * step;
    let mut b = ((best + 1).min(grid)) as f64 * step;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..REFINE_ITERATIONS {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2);
        }
        if b - a < 1e-12 {
            break;
        }
    }
    let mid = 0.5 * (a + b);
    // Endpoints of the bracket (including the c = 0 boundary) stay candidates.
    [mid, a, b, best as f64 * step]
        .into_iter()
        .fold((mid, f(mid)), |(bc, bv), c| {
            let v = f(c);
            if v < bv {
                (c, v)
            } else {
                (bc, bv)
            }
        })
        .0
}
