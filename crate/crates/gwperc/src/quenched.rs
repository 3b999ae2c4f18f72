//! Quenched survival on a fixed tree: exact finite-depth values, Monte Carlo
//! percolation and the branching depth behind the Russo-type derivative.

use rayon::prelude::*;
use serde::Serialize;

use crate::annealed::single_child_prob;
use crate::error::{Error, Result};
use crate::gwtree::{replicate_key, replicate_uniform, TreeView};
use crate::offspring::OffspringDistribution;
use crate::sum::Compensated;

pub const DEFAULT_FD_STEP: f64 = 1e-3;
/// Target for A_p^{n/2} when choosing a truncation depth.
pub const DEPTH_RULE_TARGET: f64 = 1e-4;

const CHUNK: u64 = 2048;

/// P_T[root connected to level n] for several p at once, by the backward
/// recursion q_v = 1 - prod_children (1 - p q_u) with q = 1 on level n.
pub fn survival_multi<T: TreeView>(tree: &T, ps: &[f64], n: usize) -> Vec<f64> {
    assert!(n <= tree.depth(), "level {n} beyond tree depth {}", tree.depth());
    let np = ps.len();
    if n == 0 {
        return vec![1.0; np];
    }
    let root = tree.root();
    // factor contributed by a child at level n-1 with d children: 1 - p (1 - (1-p)^d)
    let max_deg = 64;
    let mut frontier = vec![0.0; (max_deg + 1) * np];
    for d in 0..=max_deg {
        for (pi, &p) in ps.iter().enumerate() {
            frontier[d * np + pi] = 1.0 - p * (1.0 - (1.0 - p).powi(d as i32));
        }
    }
    let frontier_factor = |d: usize, pi: usize| -> f64 {
        if d <= max_deg {
            frontier[d * np + pi]
        } else {
            let p = ps[pi];
            1.0 - p * (1.0 - (1.0 - p).powi(d as i32))
        }
    };
    if n == 1 {
        let d = tree.degree(0, root);
        return (0..np).map(|pi| 1.0 - (1.0 - ps[pi]).powi(d as i32)).collect();
    }
    let frames = n - 1;
    let mut node = vec![root; frames];
    let mut deg = vec![0usize; frames];
    let mut next = vec![0usize; frames];
    let mut prod = vec![1.0; frames * np];
    let mut level = 0;
    deg[0] = tree.degree(0, root);
    loop {
        if next[level] < deg[level] {
            let c = tree.child(level, node[level], next[level]);
            next[level] += 1;
            let cl = level + 1;
            if cl == n - 1 {
                let d = tree.degree(cl, c);
                let row = &mut prod[level * np..(level + 1) * np];
                for (pi, slot) in row.iter_mut().enumerate() {
                    *slot *= frontier_factor(d, pi);
                }
            } else {
                level = cl;
                node[cl] = c;
                deg[cl] = tree.degree(cl, c);
                next[cl] = 0;
                prod[cl * np..(cl + 1) * np].iter_mut().for_each(|x| *x = 1.0);
            }
        } else {
            if level == 0 {
                return prod[..np].iter().map(|x| 1.0 - x).collect();
            }
            let (upper, lower) = prod.split_at_mut(level * np);
            let parent = &mut upper[(level - 1) * np..];
            for pi in 0..np {
                let q = 1.0 - lower[pi];
                parent[pi] *= 1.0 - ps[pi] * q;
            }
            level -= 1;
        }
    }
}

pub fn survival_to_depth<T: TreeView>(tree: &T, p: f64, n: usize) -> f64 {
    survival_multi(tree, &[p], n)[0]
}

/// Same recursion on the deterministic `arity`-ary tree.
pub fn survival_to_depth_regular(arity: usize, p: f64, n: usize) -> f64 {
    (0..n).fold(1.0, |q, _| 1.0 - (1.0 - p * q).powi(arity as i32))
}

#[derive(Debug, Clone, Serialize)]
pub struct SurvivalCurve {
    pub depth: usize,
    pub points: Vec<(f64, f64)>,
}

pub fn quenched_curve<T: TreeView>(tree: &T, grid: &[f64], n: usize) -> Result<SurvivalCurve> {
    if let Some(&bad) = grid.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidInput(format!("grid point {bad} outside (0, 1]")));
    }
    let values = survival_multi(tree, grid, n);
    Ok(SurvivalCurve { depth: n, points: grid.iter().copied().zip(values).collect() })
}

/// Percolation of one replicate: vertex uniforms are hashed from the
/// replicate key and the vertex key, so every p sees the same coupling.
pub(crate) struct Replicate<'a, T: TreeView> {
    pub tree: &'a T,
    pub key: u64,
    pub n: usize,
    stack: Vec<(T::Node, usize, usize, usize)>,
}

impl<'a, T: TreeView> Replicate<'a, T> {
    pub fn new(tree: &'a T, n: usize) -> Self {
        Self { tree, key: 0, n, stack: Vec::with_capacity(n + 1) }
    }

    pub fn reset(&mut self, mc_seed: u64, rep: u64) {
        self.key = replicate_key(mc_seed, rep);
    }

    #[inline]
    pub fn uniform(&self, level: usize, v: T::Node) -> f64 {
        replicate_uniform(self.key, self.tree.key(level, v))
    }

    /// Whether v, assumed reached, connects to level n inside its own subtree.
    pub fn reaches(&mut self, v: T::Node, level: usize, p: f64) -> bool {
        if level == self.n {
            return true;
        }
        self.stack.clear();
        self.stack.push((v, level, 0, self.tree.degree(level, v)));
        while let Some(top) = self.stack.last_mut() {
            if top.2 < top.3 {
                let (node, lvl, i) = (top.0, top.1, top.2);
                top.2 += 1;
                let c = self.tree.child(lvl, node, i);
                let cl = lvl + 1;
                if self.uniform(cl, c) <= p {
                    if cl == self.n {
                        return true;
                    }
                    let d = self.tree.degree(cl, c);
                    self.stack.push((c, cl, 0, d));
                }
            } else {
                self.stack.pop();
            }
        }
        false
    }

    /// Open children of v that reach level n, stopping after `limit`.
    pub fn surviving_children(&mut self, v: T::Node, level: usize, p: f64, limit: usize, out: &mut Vec<T::Node>) {
        out.clear();
        if level >= self.n {
            return;
        }
        for i in 0..self.tree.degree(level, v) {
            let c = self.tree.child(level, v, i);
            if self.uniform(level + 1, c) <= p && self.reaches(c, level + 1, p) {
                out.push(c);
                if out.len() >= limit {
                    return;
                }
            }
        }
    }

    /// Length of the walk from the root while exactly one child survives;
    /// `None` when the root does not reach level n.
    pub fn branching_depth(&mut self, p: f64) -> Option<usize> {
        let mut v = self.tree.root();
        let mut kids = Vec::with_capacity(2);
        for level in 0..self.n {
            self.surviving_children(v, level, p, 2, &mut kids);
            match kids.len() {
                0 => return None,
                1 => v = kids[0],
                _ => return Some(level),
            }
        }
        Some(self.n)
    }
}

/// Ordered, scheduling-independent sums of per-replicate vectors.
pub(crate) fn replicate_sums<const K: usize, T, F>(tree: &T, n: usize, mc_seed: u64, reps: u64, f: F) -> [f64; K]
where
    T: TreeView,
    F: Fn(&mut Replicate<'_, T>) -> [f64; K] + Sync,
{
    let v = replicate_sums_dyn(tree, n, mc_seed, reps, K, |w, out| out.copy_from_slice(&f(w)));
    std::array::from_fn(|k| v[k])
}

/// Variant of [`replicate_sums`] for a width known only at run time; `f`
/// overwrites its output slice for every replicate.
pub(crate) fn replicate_sums_dyn<T, F>(tree: &T, n: usize, mc_seed: u64, reps: u64, width: usize, f: F) -> Vec<f64>
where
    T: TreeView,
    F: Fn(&mut Replicate<'_, T>, &mut [f64]) + Sync,
{
    let chunks = reps.div_ceil(CHUNK);
    let parts: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut walker = Replicate::new(tree, n);
            let mut acc = vec![Compensated::default(); width];
            let mut out = vec![0.0; width];
            for rep in c * CHUNK..((c + 1) * CHUNK).min(reps) {
                walker.reset(mc_seed, rep);
                f(&mut walker, &mut out);
                for (a, &x) in acc.iter_mut().zip(&out) {
                    a.add(x);
                }
            }
            acc.iter().map(|a| a.value()).collect()
        })
        .collect();
    let mut total = vec![Compensated::default(); width];
    for part in parts {
        for (t, x) in total.iter_mut().zip(part) {
            t.add(x);
        }
    }
    total.iter().map(|t| t.value()).collect()
}

pub(crate) fn se_from_sums(sum: f64, sum_sq: f64, reps: u64) -> (f64, f64) {
    let n = reps as f64;
    let mean = sum / n;
    let var = ((sum_sq - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub se: f64,
    pub reps: u64,
}

pub fn mc_survival<T: TreeView>(tree: &T, p: f64, n: usize, reps: u64, mc_seed: u64) -> Result<McEstimate> {
    check_mc(tree, n, reps)?;
    let [hits] = replicate_sums(tree, n, mc_seed, reps, |w| {
        let root = w.tree.root();
        [if w.reaches(root, 0, p) { 1.0 } else { 0.0 }]
    });
    let estimate = hits / reps as f64;
    let se = (estimate * (1.0 - estimate) / reps as f64).sqrt();
    Ok(McEstimate { estimate, se, reps })
}

fn check_mc<T: TreeView>(tree: &T, n: usize, reps: u64) -> Result<()> {
    if n > tree.depth() {
        return Err(Error::InvalidInput(format!("level {n} beyond tree depth {}", tree.depth())));
    }
    if reps == 0 {
        return Err(Error::InvalidInput("at least one replicate is required".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BranchingDepth {
    /// Mean of |B_p^{(n)}| with the convention 0 off survival.
    pub estimate: f64,
    pub se: f64,
    pub survivals: u64,
    pub reps: u64,
    /// No replicate survived, so the estimate carries no information.
    pub undefined: bool,
}

pub fn mc_branching_depth<T: TreeView>(tree: &T, p: f64, n: usize, reps: u64, mc_seed: u64) -> Result<BranchingDepth> {
    check_mc(tree, n, reps)?;
    let [sum, sum_sq, surv] = replicate_sums(tree, n, mc_seed, reps, |w| match w.branching_depth(p) {
        Some(b) => [b as f64, (b * b) as f64, 1.0],
        None => [0.0, 0.0, 0.0],
    });
    let (estimate, se) = se_from_sums(sum, sum_sq, reps);
    let survivals = surv as u64;
    Ok(BranchingDepth { estimate, se, survivals, reps, undefined: survivals == 0 })
}

/// Smallest n with A_p^{n/2} below the depth-rule target.
pub fn default_depth(dist: &OffspringDistribution, p: f64) -> Result<usize> {
    let a = single_child_prob(dist, p)?;
    if a <= 0.0 {
        return Ok(1);
    }
    Ok(((2.0 * DEPTH_RULE_TARGET.ln() / a.ln()).floor() as usize + 1).max(1))
}

#[derive(Debug, Clone, Serialize)]
pub struct RussoReport {
    pub p: f64,
    pub depth: usize,
    pub fd_derivative: f64,
    pub russo_estimate: f64,
    pub se: f64,
    /// Richardson estimate of the central-difference bias, |FD_2h - FD_h| / 3.
    pub discretization: f64,
    pub survivals: u64,
    pub pass: bool,
}

/// Compare the central difference of the exact g_n with p^{-1} E|B_p^{(n)}|.
pub fn russo_check<T: TreeView>(tree: &T, p: f64, n: usize, h: f64, reps: u64, mc_seed: u64) -> Result<RussoReport> {
    if !(p - 2.0 * h > 0.0 && p + 2.0 * h <= 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} with step {h} leaves (0, 1]")));
    }
    let g = survival_multi(tree, &[p - 2.0 * h, p - h, p + h, p + 2.0 * h], n);
    let fd = (g[2] - g[1]) / (2.0 * h);
    let fd2 = (g[3] - g[0]) / (4.0 * h);
    let b = mc_branching_depth(tree, p, n, reps, mc_seed)?;
    let russo = b.estimate / p;
    let se = b.se / p;
    Ok(RussoReport {
        p,
        depth: n,
        fd_derivative: fd,
        russo_estimate: russo,
        se,
        discretization: (fd2 - fd).abs() / 3.0,
        survivals: b.survivals,
        pass: !b.undefined && (fd - russo).abs() <= 3.0 * se,
    })
}
