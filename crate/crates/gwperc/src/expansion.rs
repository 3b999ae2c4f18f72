//! Expansion martingales M_n^{(i)} assembled from subset statistics.
//!
//! M_n^{(i)} = mu^i sum_j (-1)^{j+1} sum_{d=j}^{i} p_c^d r_{j,d} X_n^{(j,i-d)},
//! a martingale in n with mean r_i whose limit is the i-th Taylor
//! coefficient of the quenched survival function at p_c.

use rayon::prelude::*;
use serde::Serialize;

use crate::annealed::{composition_constants, expansion_coefficients, CompositionConstants, ExpansionCoefficients};
use crate::error::{Error, Result};
use crate::gwtree::{sample_tree, SampledTree};
use crate::offspring::{binom_f64, OffspringDistribution};
use crate::subsetstats::{mean_se, predictable_increment, root_grid, Grid, SubsetStatTable};
use crate::sum::Compensated;

pub const DEFAULT_ORDER_CAP: usize = 6;
pub const DEFAULT_WINDOW_DELTA: f64 = 0.25;

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionMartingale {
    pub order: usize,
    /// `m[n][i - 1]` is M_n^{(i)}.
    pub m: Vec<Vec<f64>>,
}

impl ExpansionMartingale {
    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.m[n][i - 1]
    }

    pub fn n_max(&self) -> usize {
        self.m.len() - 1
    }
}

fn check_caps(j_cap: usize, k_cap: usize, coeffs: &ExpansionCoefficients, order: usize) -> Result<()> {
    if order == 0 {
        return Err(Error::InvalidInput("order must be at least 1".into()));
    }
    if j_cap < order || k_cap + 1 < order {
        return Err(Error::CapOverflow { need_j: order, need_k: order - 1 });
    }
    if coeffs.k < order {
        return Err(Error::InvalidInput(format!("coefficients of order {} cannot build order {order}", coeffs.k)));
    }
    Ok(())
}

/// M^{(1)}, ..., M^{(order)} from one level's table.
pub fn martingale_from_grid(grid: &Grid, coeffs: &ExpansionCoefficients, order: usize) -> Result<Vec<f64>> {
    check_caps(grid.j_cap, grid.k_cap, coeffs, order)?;
    let pc = coeffs.p_c;
    let mu = 1.0 / pc;
    Ok((1..=order)
        .map(|i| {
            let mut acc = Compensated::default();
            for j in 1..=i {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                for d in j..=i {
                    acc.add(sign * pc.powi(d as i32) * coeffs.power(j, d) * grid.get(j, i - d));
                }
            }
            mu.powi(i as i32) * acc.value()
        })
        .collect())
}

pub fn expansion_martingale(stats: &SubsetStatTable, coeffs: &ExpansionCoefficients, order: usize) -> Result<ExpansionMartingale> {
    check_caps(stats.j_cap, stats.k_cap, coeffs, order)?;
    let m = stats.x.iter().map(|g| martingale_from_grid(g, coeffs, order)).collect::<Result<_>>()?;
    Ok(ExpansionMartingale { order, m })
}

/// Largest |lhs - rhs| over 1 <= a, b <= i of the identity
/// sum_{d,j} (-1)^{j-1} p_c^d r_{j,d} c_{j,a} C(j, b-d) = (-1)^{a+1} p_c^b r_{a,b}.
pub fn verify_constants_identity(dist: &OffspringDistribution, i: usize) -> Result<f64> {
    let coeffs = expansion_coefficients(dist, i)?;
    let consts = composition_constants(dist, i)?;
    Ok(constants_identity_residual(&coeffs, &consts, i))
}

pub fn constants_identity_residual(coeffs: &ExpansionCoefficients, consts: &CompositionConstants, i: usize) -> f64 {
    let pc = coeffs.p_c;
    let mut worst: f64 = 0.0;
    for a in 1..=i {
        for b in 1..=i {
            let mut lhs = Compensated::default();
            for d in 1..=b {
                for j in 1..=i {
                    let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                    lhs.add(sign * pc.powi(d as i32) * coeffs.power(j, d) * consts.get(j, a) * binom_f64(j, b - d));
                }
            }
            let sign = if a % 2 == 1 { 1.0 } else { -1.0 };
            let rhs = sign * pc.powi(b as i32) * coeffs.power(a, b);
            worst = worst.max((lhs.value() - rhs).abs());
        }
    }
    worst
}

/// Predictable part of M_{n+1}^{(i)} - M_n^{(i)}, which should vanish identically.
pub fn predictable_part(xn: &Grid, coeffs: &ExpansionCoefficients, consts: &CompositionConstants, order: usize) -> Result<Vec<f64>> {
    let da = predictable_increment(xn, consts);
    martingale_from_grid(&da, coeffs, order)
}

/// E[M_1^{(i)}] from E[X_1^{(j,k)}] = C(j,k) c_{j,1}.
pub fn first_step_mean(coeffs: &ExpansionCoefficients, consts: &CompositionConstants, order: usize) -> Result<Vec<f64>> {
    let mut grid = Grid::zeros(order, order.saturating_sub(1));
    for j in 1..=order {
        for k in 0..order {
            grid.set(j, k, binom_f64(j, k) * consts.get(j, 1));
        }
    }
    martingale_from_grid(&grid, coeffs, order)
}

/// sum_i M_{n_max}^{(i)} eps^i
pub fn predict_quenched_survival(mart: &ExpansionMartingale, eps: f64) -> f64 {
    predict_at_level(mart, mart.n_max(), eps)
}

pub fn predict_at_level(mart: &ExpansionMartingale, n: usize, eps: f64) -> f64 {
    mart.m[n].iter().rev().fold(0.0, |acc, m| (acc + m) * eps)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WindowedPrediction {
    pub value: f64,
    /// Level actually used.
    pub level: usize,
    /// ceil(eps^-delta) exceeded the stored depth.
    pub clamped: bool,
}

/// Prediction from M_{n(eps)} with n(eps) = ceil(eps^-delta).
pub fn predict_windowed(mart: &ExpansionMartingale, eps: f64, delta: f64) -> WindowedPrediction {
    let want = eps.powf(-delta).ceil() as usize;
    let level = want.min(mart.n_max());
    WindowedPrediction { value: predict_at_level(mart, level, eps), level, clamped: want > mart.n_max() }
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMean {
    pub n: usize,
    pub i: usize,
    pub mean: f64,
    pub se: f64,
    pub target: f64,
}

/// Mean of M_n^{(i)} over trees with seeds `first_seed .. first_seed + count`.
pub fn ensemble_martingale_means(
    dist: &OffspringDistribution,
    first_seed: u64,
    count: usize,
    levels: &[usize],
    order: usize,
) -> Result<Vec<EnsembleMean>> {
    let coeffs = expansion_coefficients(dist, order)?;
    let depth = levels.iter().copied().max().unwrap_or(0);
    let per_tree: Vec<Vec<Vec<f64>>> = (0..count as u64)
        .into_par_iter()
        .map(|s| {
            let tree = sample_tree(dist, depth, first_seed + s)?;
            levels
                .iter()
                .map(|&n| martingale_from_grid(&root_grid(&tree, n, order, order - 1)?, &coeffs, order))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (li, &n) in levels.iter().enumerate() {
        for i in 1..=order {
            let vals: Vec<f64> = per_tree.iter().map(|t| t[li][i - 1]).collect();
            let (mean, se) = mean_se(&vals);
            out.push(EnsembleMean { n, i, mean, se, target: coeffs.r(i) });
        }
    }
    Ok(out)
}

/// Mean of M_{n+1}^{(i)} - M_n^{(i)} over one-level extensions of a frozen tree.
pub fn frozen_martingale_increments(tree: &SampledTree, order: usize, reps: usize) -> Result<Vec<(f64, f64)>> {
    let n = tree.depth();
    let coeffs = expansion_coefficients(tree.dist(), order)?;
    let base = martingale_from_grid(&root_grid(tree, n, order, order - 1)?, &coeffs, order)?;
    let draws: Vec<Vec<f64>> = (1..=reps as u64)
        .into_par_iter()
        .map(|salt| {
            let ext = tree.extend_one_level(salt)?;
            martingale_from_grid(&root_grid(&ext, n + 1, order, order - 1)?, &coeffs, order)
        })
        .collect::<Result<_>>()?;
    Ok((0..order)
        .map(|i| {
            let vals: Vec<f64> = draws.iter().map(|d| d[i] - base[i]).collect();
            mean_se(&vals)
        })
        .collect())
}
