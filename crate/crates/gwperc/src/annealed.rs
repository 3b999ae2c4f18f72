//! Annealed survival and the constants of its expansion at criticality.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::offspring::{binom_u64, factorial, OffspringDistribution};

/// Below this distance from p_c the truncated expansion replaces the solver.
pub const NEAR_CRITICAL: f64 = 1e-8;

pub const DEFAULT_TOL: f64 = 1e-13;

const BRACKET_WIDTH: f64 = 1e-3;
const NEWTON_CAP: usize = 100;

/// s - (1 - phi(1 - p s)), with 1 - (1-x)^n evaluated without cancellation.
fn residual(dist: &OffspringDistribution, p: f64, s: f64) -> f64 {
    let x = p * s;
    let log_keep = (-x).ln_1p();
    let hit: f64 = dist
        .pmf()
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(n, &w)| -w * (n as f64 * log_keep).exp_m1())
        .sum();
    s - hit
}

/// Annealed survival probability g(p): the root of s = 1 - phi(1 - p s) in (0, 1].
pub fn annealed_survival(dist: &OffspringDistribution, p: f64, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    if !(p <= 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} exceeds 1")));
    }
    let pc = dist.critical_parameter();
    if p <= pc {
        return Ok(0.0);
    }
    if p - pc < NEAR_CRITICAL {
        return near_critical(dist, p - pc);
    }
    let mut hi = 1.0;
    if residual(dist, p, hi) <= 0.0 {
        return Ok(1.0);
    }
    let mut lo = tol;
    while residual(dist, p, lo) >= 0.0 && lo > 1e-300 {
        hi = lo;
        lo *= 1e-3;
    }
    while hi - lo >= BRACKET_WIDTH {
        let mid = 0.5 * (lo + hi);
        if residual(dist, p, mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // F(p, .) is convex, so Newton from the right end of the bracket descends monotonically.
    let mut s = hi;
    for _ in 0..NEWTON_CAP {
        let f = residual(dist, p, s);
        let slope = 1.0 - p * dist.pgf(1, 1.0 - p * s)?;
        if slope <= 0.0 {
            break;
        }
        let step = f / slope;
        s -= step;
        if step.abs() <= 4.0 * f64::EPSILON * s.abs() {
            break;
        }
    }
    let res = residual(dist, p, s).abs();
    if res < tol && s > 0.0 && s <= 1.0 {
        Ok(s)
    } else {
        Err(Error::NonConvergence { residual: res })
    }
}

fn near_critical(dist: &OffspringDistribution, eps: f64) -> Result<f64> {
    let avail = dist.max_exact_moment();
    if avail < 2 {
        return Err(Error::MomentUnavailable { needed: 2, available: avail });
    }
    let k = (avail - 1).min(3);
    let coeffs = expansion_coefficients(dist, k)?;
    Ok(coeffs.evaluate(eps))
}

/// K = 2 / (p_c^3 phi''(1)), the slope of g at p_c.
pub fn critical_slope(dist: &OffspringDistribution) -> Result<f64> {
    let pc = dist.critical_parameter();
    let phi2 = dist.pgf(2, 1.0)?;
    if phi2 == 0.0 {
        return Err(Error::InvalidDistribution("phi''(1) = 0".into()));
    }
    Ok(2.0 / (pc.powi(3) * phi2))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionCoefficients {
    pub p_c: f64,
    pub k: usize,
    /// r_1, ..., r_k
    pub r: Vec<f64>,
    /// `powers[m-1][j-1]` is r_{m,j}.
    pub powers: Vec<Vec<f64>>,
}

impl ExpansionCoefficients {
    pub fn r(&self, j: usize) -> f64 {
        self.r[j - 1]
    }

    pub fn power(&self, m: usize, j: usize) -> f64 {
        if m == 0 || j < m || j > self.k {
            0.0
        } else {
            self.powers[m - 1][j - 1]
        }
    }

    pub fn evaluate(&self, eps: f64) -> f64 {
        self.r.iter().rev().fold(0.0, |acc, r| (acc + r) * eps)
    }

    pub fn evaluate_power(&self, m: usize, eps: f64) -> f64 {
        (1..=self.k).rev().fold(0.0, |acc, j| (acc + self.power(m, j)) * eps)
    }
}

/// Product of two power series truncated above degree `top`; index = degree.
pub(crate) fn mul_trunc(a: &[f64], b: &[f64], top: usize) -> Vec<f64> {
    let mut out = vec![0.0; top + 1];
    for (i, &x) in a.iter().enumerate().take(top + 1) {
        if x == 0.0 {
            continue;
        }
        for (j, &y) in b.iter().enumerate().take(top + 1 - i) {
            out[i + j] += x * y;
        }
    }
    out
}

/// `base^1 ... base^count`, each truncated above degree `top`.
fn series_powers(base: &[f64], count: usize, top: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut cur = base.iter().copied().chain(std::iter::repeat(0.0)).take(top + 1).collect::<Vec<_>>();
    for _ in 0..count {
        let next = mul_trunc(&cur, base, top);
        out.push(cur);
        cur = next;
    }
    out
}

/// r_1..r_k by the composition recursion, and the power table r_{m,j}.
pub fn expansion_coefficients(dist: &OffspringDistribution, k: usize) -> Result<ExpansionCoefficients> {
    if k == 0 {
        return Err(Error::InvalidInput("expansion order must be at least 1".into()));
    }
    if k + 1 > dist.max_exact_moment() {
        return Err(Error::MomentUnavailable { needed: k + 1, available: dist.max_exact_moment() });
    }
    let pc = dist.critical_parameter();
    let phi2 = dist.pgf(2, 1.0)?;
    let taylor: Vec<f64> = (0..=k + 1)
        .map(|l| dist.pgf(l, 1.0).map(|d| d / factorial(l)))
        .collect::<Result<_>>()?;
    let mut r = vec![0.0; k + 1];
    r[1] = critical_slope(dist)?;
    let scale = 2.0 / (pc * pc * phi2);
    for j in 2..=k {
        // r_j is still zero here, so the power sums skip the composition (j).
        let pows = series_powers(&r[..j], j, j);
        let mut total = 0.0;
        for len in 1..=j {
            let sign = if len % 2 == 0 { 1.0 } else { -1.0 };
            for weight in len..=j {
                let gap = j - weight;
                if gap > len + 1 {
                    continue;
                }
                let s = pows[len - 1][weight];
                if s == 0.0 {
                    continue;
                }
                let c = binom_u64(len + 1, gap) as f64;
                total += s * c * pc.powi((weight + len + 1 - j) as i32) * sign * taylor[len + 1];
            }
        }
        r[j] = scale * total;
    }
    let powers = series_powers(&r, k, k).into_iter().map(|row| row[1..].to_vec()).collect();
    Ok(ExpansionCoefficients { p_c: pc, k, r: r[1..].to_vec(), powers })
}

/// c_{j,i} = p_c^j times the sum over compositions of j into i parts of products of m_r.
#[derive(Debug, Clone, Serialize)]
pub struct CompositionConstants {
    pub j_max: usize,
    c: Vec<Vec<f64>>,
}

impl CompositionConstants {
    pub fn get(&self, j: usize, i: usize) -> f64 {
        if i == 0 || j == 0 || i > j || j > self.j_max {
            0.0
        } else {
            self.c[j][i]
        }
    }
}

pub fn composition_constants(dist: &OffspringDistribution, j_max: usize) -> Result<CompositionConstants> {
    if j_max > dist.max_exact_moment() {
        return Err(Error::MomentUnavailable { needed: j_max, available: dist.max_exact_moment() });
    }
    let pc = dist.critical_parameter();
    let mut moments = vec![0.0; j_max + 1];
    for (r, slot) in moments.iter_mut().enumerate().skip(1) {
        *slot = dist.factorial_moment(r)?;
    }
    let pows = series_powers(&moments, j_max, j_max);
    let mut c = vec![vec![0.0; j_max + 1]; j_max + 1];
    for j in 1..=j_max {
        for i in 1..=j {
            c[j][i] = pc.powi(j as i32) * pows[i - 1][j];
        }
    }
    Ok(CompositionConstants { j_max, c })
}

/// All compositions of `weight` into `parts` positive parts, in lexicographic order.
pub fn compositions(weight: usize, parts: usize) -> Vec<Vec<usize>> {
    fn go(weight: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 0 {
            if weight == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        if weight < parts {
            return;
        }
        for first in 1..=weight - (parts - 1) {
            prefix.push(first);
            go(weight - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    go(weight, parts, &mut Vec::new(), &mut out);
    out
}

fn supercritical(dist: &OffspringDistribution, p: f64) -> Result<()> {
    let pc = dist.critical_parameter();
    if p > pc && p <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("p = {p} outside (p_c, 1] = ({pc}, 1]")))
    }
}

/// A_p = p phi'(1 - p g(p)).
pub fn single_child_prob(dist: &OffspringDistribution, p: f64) -> Result<f64> {
    supercritical(dist, p)?;
    let g = annealed_survival(dist, p, DEFAULT_TOL)?;
    Ok(p * dist.pgf(1, 1.0 - p * g)?)
}

/// g_2(p) = g(p) (1 - A_p), the probability the surviving cluster branches at the root.
pub fn annealed_branch_prob(dist: &OffspringDistribution, p: f64) -> Result<f64> {
    if p <= dist.critical_parameter() {
        return Ok(0.0);
    }
    let g = annealed_survival(dist, p, DEFAULT_TOL)?;
    let a = single_child_prob(dist, p)?;
    Ok(g * (1.0 - a))
}

/// Offspring pgf of the surviving cluster conditioned on survival.
pub fn thinned_pgf(dist: &OffspringDistribution, p: f64, z: f64) -> Result<f64> {
    supercritical(dist, p)?;
    let g = annealed_survival(dist, p, DEFAULT_TOL)?;
    let at = |x: f64| dist.pgf(0, x);
    Ok((at(1.0 - p * g * (1.0 - z))? - at(1.0 - p * g)?) / g)
}
