//! Subset statistics X_n^{(j,k)} of a tree and their Doob decomposition.
//!
//! X_n^{(j,k)} sums C(m, k) p_c^m over j-subsets of level n, where m is the
//! number of edges of the smallest rooted subtree containing the subset.

use rayon::prelude::*;
use serde::Serialize;

use crate::annealed::{composition_constants, CompositionConstants};
use crate::error::{Error, Result};
use crate::gwtree::SampledTree;
use crate::offspring::{binom_f64, factorial, OffspringDistribution};
use crate::sum::{compensated_sum, Compensated};

pub const BRUTE_FORCE_BUDGET: f64 = 1e7;

/// A (J+1) x (Kc+1) array indexed by (j, k); row j = 0 is the empty subset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    pub j_cap: usize,
    pub k_cap: usize,
    v: Vec<f64>,
}

impl Grid {
    pub fn zeros(j_cap: usize, k_cap: usize) -> Self {
        Self { j_cap, k_cap, v: vec![0.0; (j_cap + 1) * (k_cap + 1)] }
    }

    fn unit(j_cap: usize, k_cap: usize) -> Self {
        let mut g = Self::zeros(j_cap, k_cap);
        g.v[0] = 1.0;
        g
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.v[j * (self.k_cap + 1) + k]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, x: f64) {
        self.v[j * (self.k_cap + 1) + k] = x;
    }
}

fn leaf_table(j_cap: usize, k_cap: usize) -> Vec<f64> {
    let mut t = vec![0.0; (j_cap + 1) * (k_cap + 1)];
    t[0] = 1.0;
    if j_cap >= 1 {
        t[k_cap + 1] = 1.0;
    }
    t
}

/// Pass a table up one edge: m -> m + 1 for every nonempty subset.
fn lift(s: &[f64], pc: f64, j_cap: usize, k_cap: usize, out: &mut [f64]) {
    let w = k_cap + 1;
    out.iter_mut().for_each(|x| *x = 0.0);
    out[0] = 1.0;
    for j in 1..=j_cap {
        for k in 0..=k_cap {
            let prev = if k > 0 { s[j * w + k - 1] } else { 0.0 };
            out[j * w + k] = pc * (s[j * w + k] + prev);
        }
    }
}

/// acc <- acc * b, convolving in j and multiplying polynomials in k.
fn combine(acc: &mut [f64], b: &[f64], j_cap: usize, k_cap: usize, scratch: &mut [f64]) {
    let w = k_cap + 1;
    scratch.iter_mut().for_each(|x| *x = 0.0);
    for j1 in 0..=j_cap {
        for k1 in 0..=k_cap {
            let a = acc[j1 * w + k1];
            if a == 0.0 {
                continue;
            }
            for j2 in 0..=j_cap - j1 {
                for k2 in 0..=k_cap - k1 {
                    scratch[(j1 + j2) * w + k1 + k2] += a * b[j2 * w + k2];
                }
            }
        }
    }
    acc.copy_from_slice(scratch);
}

/// Root table for level n of a stored tree.
pub fn root_grid(tree: &SampledTree, n: usize, j_cap: usize, k_cap: usize) -> Result<Grid> {
    if n > tree.depth() {
        return Err(Error::InvalidInput(format!("level {n} beyond tree depth {}", tree.depth())));
    }
    if j_cap == 0 {
        return Err(Error::InvalidInput("J must be at least 1".into()));
    }
    let pc = tree.dist().critical_parameter();
    let w = (j_cap + 1) * (k_cap + 1);
    let leaf = leaf_table(j_cap, k_cap);
    let mut below: Vec<f64> = leaf.repeat(tree.population(n));
    for level in (0..n).rev() {
        let count = tree.population(level);
        let mut here = vec![0.0; count * w];
        here.par_chunks_mut(w).enumerate().for_each_init(
            || (vec![0.0; w], vec![0.0; w]),
            |(lifted, scratch), (i, acc)| {
                acc[0] = 1.0;
                for c in tree.children(level, i) {
                    lift(&below[c * w..(c + 1) * w], pc, j_cap, k_cap, lifted);
                    combine(acc, lifted, j_cap, k_cap, scratch);
                }
            },
        );
        below = here;
    }
    Ok(Grid { j_cap, k_cap, v: below })
}

/// Root table for level n of the deterministic `arity`-ary tree, where every
/// vertex of a level carries the same table.
pub fn root_grid_regular(arity: usize, n: usize, j_cap: usize, k_cap: usize) -> Grid {
    let pc = 1.0 / arity as f64;
    let w = (j_cap + 1) * (k_cap + 1);
    let mut table = leaf_table(j_cap, k_cap);
    let mut lifted = vec![0.0; w];
    let mut scratch = vec![0.0; w];
    for _ in 0..n {
        lift(&table, pc, j_cap, k_cap, &mut lifted);
        let mut acc = Grid::unit(j_cap, k_cap).v;
        for _ in 0..arity {
            combine(&mut acc, &lifted, j_cap, k_cap, &mut scratch);
        }
        table = acc;
    }
    Grid { j_cap, k_cap, v: table }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetStatTable {
    pub j_cap: usize,
    pub k_cap: usize,
    /// `x[n]` holds X_n^{(j,k)}.
    pub x: Vec<Grid>,
}

impl SubsetStatTable {
    pub fn n_max(&self) -> usize {
        self.x.len() - 1
    }

    pub fn get(&self, n: usize, j: usize, k: usize) -> f64 {
        self.x[n].get(j, k)
    }

    pub fn require(&self, j: usize, k: usize) -> Result<()> {
        if j > self.j_cap || k > self.k_cap {
            Err(Error::CapOverflow { need_j: j, need_k: k })
        } else {
            Ok(())
        }
    }
}

/// X_n^{(j,k)} for every n up to `n_max`, j <= J, k <= Kc.
pub fn subset_stats(tree: &SampledTree, n_max: usize, j_cap: usize, k_cap: usize) -> Result<SubsetStatTable> {
    let x = (0..=n_max).map(|n| root_grid(tree, n, j_cap, k_cap)).collect::<Result<_>>()?;
    Ok(SubsetStatTable { j_cap, k_cap, x })
}

pub fn subset_stats_regular(arity: usize, n_max: usize, j_cap: usize, k_cap: usize) -> SubsetStatTable {
    let x = (0..=n_max).map(|n| root_grid_regular(arity, n, j_cap, k_cap)).collect();
    SubsetStatTable { j_cap, k_cap, x }
}

/// Direct enumeration of j-subsets of each level, sizing spanning subtrees
/// from consecutive meets in left-to-right order.
pub fn brute_force_subset_stats(tree: &SampledTree, n_max: usize, j_cap: usize, k_cap: usize) -> Result<SubsetStatTable> {
    if n_max > tree.depth() {
        return Err(Error::InvalidInput(format!("level {n_max} beyond tree depth {}", tree.depth())));
    }
    let pc = tree.dist().critical_parameter();
    let mut parent: Vec<Vec<usize>> = vec![vec![]];
    for level in 1..=n_max {
        let mut p = vec![0; tree.population(level)];
        for i in 0..tree.population(level - 1) {
            for c in tree.children(level - 1, i) {
                p[c] = i;
            }
        }
        parent.push(p);
    }
    let mut x = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let size = tree.population(n);
        let subsets: f64 = (1..=j_cap).map(|j| binom_f64(size, j)).sum();
        if subsets > BRUTE_FORCE_BUDGET {
            return Err(Error::Budget(format!("{subsets} subsets at level {n}")));
        }
        let meet = |a: usize, b: usize| -> usize {
            let (mut a, mut b, mut level) = (a, b, n);
            while a != b {
                a = parent[level][a];
                b = parent[level][b];
                level -= 1;
            }
            level
        };
        let mut grid = Grid::zeros(j_cap, k_cap);
        let mut sums = vec![vec![Compensated::default(); k_cap + 1]; j_cap + 1];
        let mut chosen = Vec::with_capacity(j_cap);
        fn rec(
            start: usize,
            edges: usize,
            size: usize,
            chosen: &mut Vec<usize>,
            sums: &mut [Vec<Compensated>],
            meet: &dyn Fn(usize, usize) -> usize,
            n: usize,
            pc: f64,
        ) {
            let j_cap = sums.len() - 1;
            for v in start..size {
                let m = match chosen.last() {
                    None => n,
                    Some(&prev) => edges + n - meet(prev, v),
                };
                chosen.push(v);
                let j = chosen.len();
                let weight = pc.powi(m as i32);
                for (k, slot) in sums[j].iter_mut().enumerate() {
                    slot.add(binom_f64(m, k) * weight);
                }
                if j < j_cap {
                    rec(v + 1, m, size, chosen, sums, meet, n, pc);
                }
                chosen.pop();
            }
        }
        rec(0, 0, size, &mut chosen, &mut sums, &meet, n, pc);
        for (j, row) in sums.iter().enumerate().skip(1) {
            for (k, s) in row.iter().enumerate() {
                grid.set(j, k, s.value());
            }
        }
        grid.set(0, 0, 1.0);
        x.push(grid);
    }
    Ok(SubsetStatTable { j_cap, k_cap, x })
}

#[derive(Debug, Clone, Serialize)]
pub struct DoobParts {
    /// `delta_a[n]` is A_n - A_{n-1}; `delta_a[0]` is zero.
    pub delta_a: Vec<Grid>,
    pub y: Vec<Grid>,
}

/// Predictable increment A_{n+1} - A_n computed from level-n values alone.
pub fn predictable_increment(xn: &Grid, consts: &CompositionConstants) -> Grid {
    let mut out = Grid::zeros(xn.j_cap, xn.k_cap);
    for j in 1..=xn.j_cap {
        for k in 0..=xn.k_cap {
            let mut acc = Compensated::default();
            acc.add(-xn.get(j, k));
            for i in 1..=j {
                let c = consts.get(j, i);
                for d in 0..=k {
                    acc.add(c * binom_f64(j, k - d) * xn.get(i, d));
                }
            }
            out.set(j, k, acc.value());
        }
    }
    out
}

pub fn doob_decomposition(stats: &SubsetStatTable, dist: &OffspringDistribution) -> Result<DoobParts> {
    let consts = composition_constants(dist, stats.j_cap)?;
    Ok(doob_with_constants(stats, &consts))
}

pub fn doob_with_constants(stats: &SubsetStatTable, consts: &CompositionConstants) -> DoobParts {
    let (jc, kc) = (stats.j_cap, stats.k_cap);
    let mut delta_a = vec![Grid::zeros(jc, kc)];
    for n in 1..=stats.n_max() {
        delta_a.push(predictable_increment(&stats.x[n - 1], consts));
    }
    // Y from the explicit sum, which uses c_{j,j} = 1 implicitly.
    let mut running = vec![Compensated::default(); (jc + 1) * (kc + 1)];
    let mut y = Vec::with_capacity(stats.n_max() + 1);
    for n in 0..=stats.n_max() {
        let mut grid = Grid::zeros(jc, kc);
        for j in 1..=jc {
            for k in 0..=kc {
                grid.set(j, k, stats.get(n, j, k) - running[j * (kc + 1) + k].value());
            }
        }
        y.push(grid);
        let xm = &stats.x[n];
        for j in 1..=jc {
            for k in 0..=kc {
                let slot = &mut running[j * (kc + 1) + k];
                for d in 0..k {
                    slot.add(binom_f64(j, k - d) * xm.get(j, d));
                }
                for i in 1..j {
                    let c = consts.get(j, i);
                    for d in 0..=k {
                        slot.add(c * binom_f64(j, k - d) * xm.get(i, d));
                    }
                }
            }
        }
    }
    DoobParts { delta_a, y }
}

/// Largest |X - Y - sum dA| relative to the size of the terms involved.
pub fn doob_identity_residual(stats: &SubsetStatTable, parts: &DoobParts) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 1..=stats.j_cap {
        for k in 0..=stats.k_cap {
            let mut a = Compensated::default();
            for n in 0..=stats.n_max() {
                a.add(parts.delta_a[n].get(j, k));
                let x = stats.get(n, j, k);
                let y = parts.y[n].get(j, k);
                let scale = x.abs().max(y.abs()).max(a.value().abs()).max(f64::MIN_POSITIVE);
                worst = worst.max((x - compensated_sum([y, a.value()])).abs() / scale);
            }
        }
    }
    worst
}

/// c'_{j,k}, the growth constants of X_n^{(j,k)} / (n^{j+k-1} W).
pub fn growth_constants(consts: &CompositionConstants, j_cap: usize, k_cap: usize) -> Vec<Vec<f64>> {
    let mut c = vec![vec![0.0; k_cap + 1]; j_cap + 1];
    for k in 0..=k_cap {
        c[1][k] = 1.0 / factorial(k);
    }
    for j in 2..=j_cap {
        let cj = consts.get(j, j - 1);
        for k in 0..=k_cap {
            let prev = if k > 0 { j as f64 * c[j][k - 1] } else { 0.0 };
            c[j][k] = (prev + cj * c[j - 1][k]) / (j + k - 1) as f64;
        }
    }
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct IncrementMean {
    pub j: usize,
    pub k: usize,
    pub mean: f64,
    pub se: f64,
}

/// Monte Carlo mean of Y_{n+1} - Y_n over independent one-level extensions
/// of a tree frozen at its full depth n.
pub fn frozen_increment_means(tree: &SampledTree, j_cap: usize, k_cap: usize, reps: usize) -> Result<Vec<IncrementMean>> {
    let n = tree.depth();
    let consts = composition_constants(tree.dist(), j_cap)?;
    let xn = root_grid(tree, n, j_cap, k_cap)?;
    let da = predictable_increment(&xn, &consts);
    let draws: Vec<Grid> = (1..=reps as u64)
        .into_par_iter()
        .map(|salt| {
            let ext = tree.extend_one_level(salt)?;
            root_grid(&ext, n + 1, j_cap, k_cap)
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::new();
    for j in 1..=j_cap {
        for k in 0..=k_cap {
            let vals: Vec<f64> = draws.iter().map(|x| x.get(j, k) - xn.get(j, k) - da.get(j, k)).collect();
            let (mean, se) = mean_se(&vals);
            out.push(IncrementMean { j, k, mean, se });
        }
    }
    Ok(out)
}

pub(crate) fn mean_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = compensated_sum(vals.iter().copied()) / n;
    let var = compensated_sum(vals.iter().map(|v| (v - mean) * (v - mean))) / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}
