//! Collapsed trees, edge-weight monomials and their expectations under
//! percolation, plus the symbolic derivative of a monomial expectation.
//!
//! Trees are ordered and stored in preorder, so the edge above vertex `v`
//! has index `v - 1`; monomials list exponents in that order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gwtree::{SampledTree, TreeView};
use crate::offspring::binom_u64;
use crate::quenched::{replicate_sums_dyn, se_from_sums, Replicate};

/// Fraction of indeterminate replicates above which an estimate is flagged.
pub const INDETERMINATE_WARNING: f64 = 0.01;
/// Largest edge count enumerated by [`exact_monomial_expectation`].
pub const EXACT_EDGE_LIMIT: usize = 22;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OrderedTree {
    kids: Vec<Vec<usize>>,
}

/// Nested form used for parsing and editing.
#[derive(Debug, Clone, Default)]
struct Nested {
    exp: u32,
    kids: Vec<Nested>,
}

impl Nested {
    fn leaf(exp: u32) -> Self {
        Self { exp, kids: Vec::new() }
    }

    fn at_mut(&mut self, path: &[usize]) -> &mut Nested {
        path.iter().fold(self, |node, &i| &mut node.kids[i])
    }

    fn at(&self, path: &[usize]) -> &Nested {
        path.iter().fold(self, |node, &i| &node.kids[i])
    }

    fn paths(&self) -> Vec<Vec<usize>> {
        fn walk(n: &Nested, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            out.push(cur.clone());
            for (i, k) in n.kids.iter().enumerate() {
                cur.push(i);
                walk(k, cur, out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }
}

impl OrderedTree {
    /// Single vertex.
    pub fn root_only() -> Self {
        Self { kids: vec![Vec::new()] }
    }

    fn from_nested(n: &Nested) -> (Self, Vec<u32>) {
        fn walk(n: &Nested, kids: &mut Vec<Vec<usize>>, exps: &mut Vec<u32>) -> usize {
            let id = kids.len();
            kids.push(Vec::new());
            if id > 0 {
                exps.push(n.exp);
            }
            for k in &n.kids {
                let c = walk(k, kids, exps);
                kids[id].push(c);
            }
            id
        }
        let mut kids = Vec::new();
        let mut exps = Vec::new();
        walk(n, &mut kids, &mut exps);
        (Self { kids }, exps)
    }

    fn to_nested(&self, exps: &[u32]) -> Nested {
        fn walk(t: &OrderedTree, v: usize, exps: &[u32]) -> Nested {
            Nested {
                exp: if v == 0 { 0 } else { exps[v - 1] },
                kids: t.kids[v].iter().map(|&c| walk(t, c, exps)).collect(),
            }
        }
        walk(self, 0, exps)
    }

    pub fn vertex_count(&self) -> usize {
        self.kids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.kids.len() - 1
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.kids[v]
    }

    pub fn is_leaf(&self, v: usize) -> bool {
        self.kids[v].is_empty()
    }

    pub fn leaves(&self) -> Vec<usize> {
        (0..self.kids.len()).filter(|&v| self.is_leaf(v)).collect()
    }

    /// Edges on the longest root-to-leaf path.
    pub fn height(&self) -> usize {
        fn walk(t: &OrderedTree, v: usize) -> usize {
            t.kids[v].iter().map(|&c| 1 + walk(t, c)).max().unwrap_or(0)
        }
        walk(self, 0)
    }

    /// Parenthesis encoding, e.g. `(()())` for a root with two leaves.
    pub fn to_parens(&self) -> String {
        fn walk(t: &OrderedTree, v: usize, out: &mut String) {
            out.push('(');
            for &c in &t.kids[v] {
                walk(t, c, out);
            }
            out.push(')');
        }
        let mut s = String::new();
        walk(self, 0, &mut s);
        s
    }

    fn parse_nested(text: &str) -> Result<Nested> {
        let bytes: Vec<u8> = text.bytes().filter(|b| !b.is_ascii_whitespace()).collect();
        let bad = |msg: &str| Error::InvalidInput(format!("tree {text:?}: {msg}"));
        if bytes.first() != Some(&b'(') {
            return Err(bad("must start with '('"));
        }
        let mut stack: Vec<Nested> = Vec::new();
        let mut done: Option<Nested> = None;
        for &b in &bytes {
            if done.is_some() {
                return Err(bad("trailing characters"));
            }
            match b {
                b'(' => stack.push(Nested::default()),
                b')' => {
                    let node = stack.pop().ok_or_else(|| bad("unbalanced ')'"))?;
                    match stack.last_mut() {
                        Some(parent) => parent.kids.push(node),
                        None => done = Some(node),
                    }
                }
                _ => return Err(bad("only '(' and ')' are allowed")),
            }
        }
        done.ok_or_else(|| bad("unbalanced '('"))
    }
}

impl fmt::Display for OrderedTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_parens())
    }
}

impl FromStr for OrderedTree {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(Self::from_nested(&Self::parse_nested(s)?).0)
    }
}

/// Ordered tree in which no vertex other than the root has exactly one child.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CollapsedTree(OrderedTree);

impl CollapsedTree {
    pub fn new(tree: OrderedTree) -> Result<Self> {
        if let Some(v) = (1..tree.vertex_count()).find(|&v| tree.kids[v].len() == 1) {
            return Err(Error::InvalidInput(format!("vertex {v} of {tree} has exactly one child")));
        }
        Ok(Self(tree))
    }

    /// One edge from the root.
    pub fn single_edge() -> Self {
        Self("(())".parse().unwrap())
    }

    /// Root with two leaf children.
    pub fn cherry() -> Self {
        Self("(()())".parse().unwrap())
    }

    pub fn tree(&self) -> &OrderedTree {
        &self.0
    }
}

impl std::ops::Deref for CollapsedTree {
    type Target = OrderedTree;
    fn deref(&self) -> &OrderedTree {
        &self.0
    }
}

impl fmt::Display for CollapsedTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for CollapsedTree {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::new(s.parse()?)
    }
}

/// Exponents on the edges of a collapsed tree, in preorder edge order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Monomial(Vec<u32>);

impl Monomial {
    pub fn new(tree: &OrderedTree, exps: Vec<u32>) -> Result<Self> {
        if exps.len() != tree.edge_count() {
            return Err(Error::InvalidInput(format!(
                "monomial has {} exponents but {tree} has {} edges",
                exps.len(),
                tree.edge_count()
            )));
        }
        Ok(Self(exps))
    }

    pub fn zero(tree: &OrderedTree) -> Self {
        Self(vec![0; tree.edge_count()])
    }

    pub fn exponents(&self) -> &[u32] {
        &self.0
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().sum()
    }

    /// Parse `"1,0,2"`; the empty string is the monomial on no edges.
    pub fn parse(tree: &OrderedTree, text: &str) -> Result<Self> {
        let exps = if text.trim().is_empty() {
            Vec::new()
        } else {
            text.split(',')
                .map(|t| t.trim().parse::<u32>().map_err(|_| Error::InvalidInput(format!("bad exponent {t:?}"))))
                .collect::<Result<Vec<_>>>()?
        };
        Self::new(tree, exps)
    }

    /// The product of d(e)^F(e).
    pub fn value(&self, weights: &[u32]) -> f64 {
        self.0.iter().zip(weights).map(|(&f, &d)| (d as f64).powi(f as i32)).product()
    }
}

impl fmt::Display for Monomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|e| e.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Contract every unary path of `tree`; the weights are the path lengths.
pub fn collapse(tree: &OrderedTree) -> (CollapsedTree, Vec<u32>) {
    fn walk(t: &OrderedTree, v: usize) -> Nested {
        let kids = t.kids[v]
            .iter()
            .map(|&c| {
                let (mut end, mut d) = (c, 1);
                while t.kids[end].len() == 1 {
                    end = t.kids[end][0];
                    d += 1;
                }
                Nested { exp: d, ..walk(t, end) }
            })
            .collect();
        Nested { exp: 0, kids }
    }
    let (t, weights) = OrderedTree::from_nested(&walk(tree, 0));
    (CollapsedTree(t), weights)
}

/// Percolation cluster restricted to vertices joined to level n, with the
/// level-n vertices marked as truncated.
#[derive(Debug, Clone)]
pub struct SurvivorTree {
    pub tree: OrderedTree,
    pub truncated: Vec<bool>,
}

struct Sv {
    kids: Vec<Sv>,
    truncated: bool,
}

fn survivor_with<T: TreeView>(tree: &T, n: usize, open: &dyn Fn(usize, T::Node) -> bool) -> Option<SurvivorTree> {
    fn build<T: TreeView>(t: &T, v: T::Node, level: usize, n: usize, open: &dyn Fn(usize, T::Node) -> bool) -> Option<Sv> {
        if level == n {
            return Some(Sv { kids: Vec::new(), truncated: true });
        }
        let kids: Vec<Sv> = (0..t.degree(level, v))
            .filter_map(|i| {
                let c = t.child(level, v, i);
                if open(level + 1, c) {
                    build(t, c, level + 1, n, open)
                } else {
                    None
                }
            })
            .collect();
        (!kids.is_empty()).then_some(Sv { kids, truncated: false })
    }
    fn flatten(s: &Sv, kids: &mut Vec<Vec<usize>>, trunc: &mut Vec<bool>) -> usize {
        let id = kids.len();
        kids.push(Vec::new());
        trunc.push(s.truncated);
        for k in &s.kids {
            let c = flatten(k, kids, trunc);
            kids[id].push(c);
        }
        id
    }
    let root = build(tree, tree.root(), 0, n, open)?;
    let (mut kids, mut truncated) = (Vec::new(), Vec::new());
    flatten(&root, &mut kids, &mut truncated);
    Some(SurvivorTree { tree: OrderedTree { kids }, truncated })
}

/// Survivor tree of one Monte Carlo replicate, built vertex by vertex.
/// Exponential in the depth; intended for small trees and cross-checks.
pub fn survivor_tree<T: TreeView>(tree: &T, p: f64, n: usize, mc_seed: u64, rep: u64) -> Option<SurvivorTree> {
    let mut w = Replicate::new(tree, n);
    w.reset(mc_seed, rep);
    survivor_with(tree, n, &|level, v| w.uniform(level, v) <= p)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchOutcome {
    Matched(Vec<u32>),
    NoMatch,
    /// The survivor tree ends before the match can be decided.
    Indeterminate,
}

/// Find the initial subtree of `survivor` whose collapse is `v`.
pub fn match_initial_subtree(survivor: Option<&SurvivorTree>, v: &CollapsedTree) -> MatchOutcome {
    let Some(s) = survivor else {
        return MatchOutcome::NoMatch;
    };
    let mut weights = vec![0u32; v.edge_count()];
    let (mut miss, mut indet) = (false, false);
    let mut stack = vec![(0usize, 0usize)];
    while let Some((vv, sv)) = stack.pop() {
        if s.truncated[sv] {
            indet = true;
            continue;
        }
        let kids = s.tree.children(sv);
        let want = v.children(vv);
        let ok = if want.is_empty() { kids.len() >= 2 } else { kids.len() == want.len() };
        if !ok {
            miss = true;
            break;
        }
        for (&vc, &sc) in want.iter().zip(kids) {
            let (mut end, mut d) = (sc, 1);
            while !s.truncated[end] && s.tree.children(end).len() == 1 {
                end = s.tree.children(end)[0];
                d += 1;
            }
            weights[vc - 1] = d;
            stack.push((vc, end));
        }
    }
    if miss {
        MatchOutcome::NoMatch
    } else if indet {
        MatchOutcome::Indeterminate
    } else {
        MatchOutcome::Matched(weights)
    }
}

/// One coefficient times a monomial expectation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Term {
    pub coeff: i64,
    #[serde(serialize_with = "display_ser")]
    pub tree: CollapsedTree,
    #[serde(serialize_with = "display_ser")]
    pub mono: Monomial,
}

fn display_ser<T: fmt::Display, S: serde::Serializer>(x: &T, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(x)
}

impl Term {
    fn from_nested(coeff: i64, n: &Nested) -> Self {
        let (t, exps) = OrderedTree::from_nested(n);
        Term { coeff, tree: CollapsedTree(t), mono: Monomial(exps) }
    }
}

/// Terms of p d/dp E⟨T_p, V, F⟩ before merging.
pub fn derivative_expansion(v: &CollapsedTree, f: &Monomial) -> Result<Vec<Term>> {
    if v.edge_count() == 0 {
        return Err(Error::InvalidInput("derivative expansion needs at least one edge".into()));
    }
    if f.0.len() != v.edge_count() {
        return Err(Error::InvalidInput("monomial does not match tree".into()));
    }
    let base = v.to_nested(&f.0);
    let paths = base.paths();
    let mut out = Vec::new();
    // raise one exponent
    for path in paths.iter().filter(|p| !p.is_empty()) {
        let mut t = base.clone();
        t.at_mut(path).exp += 1;
        out.push(Term::from_nested(1, &t));
    }
    // a leaf gains two children, one of them weighted
    for path in paths.iter().filter(|p| base.at(p).kids.is_empty()) {
        for j in 0..2 {
            let mut t = base.clone();
            t.at_mut(path).kids = vec![Nested::leaf((j == 0) as u32), Nested::leaf((j == 1) as u32)];
            out.push(Term::from_nested(1, &t));
        }
    }
    // an edge is split by a new side branch; d^f = (d0 + d1)^f
    for path in paths.iter().filter(|p| !p.is_empty()) {
        let (parent, idx) = (&path[..path.len() - 1], path[path.len() - 1]);
        let f_e = base.at(path).exp;
        for left in [true, false] {
            for a in 0..=f_e {
                let mut t = base.clone();
                let slot = t.at_mut(parent);
                let mut lower = slot.kids[idx].clone();
                lower.exp = f_e - a;
                let new = Nested::leaf(1);
                let kids = if left { vec![new, lower] } else { vec![lower, new] };
                slot.kids[idx] = Nested { exp: a, kids };
                out.push(Term::from_nested(-(binom_u64(f_e as usize, a as usize) as i64), &t));
            }
        }
    }
    // an interior vertex gains a weighted leaf at any position
    for path in paths.iter().filter(|p| !base.at(p).kids.is_empty()) {
        for s in 0..=base.at(path).kids.len() {
            let mut t = base.clone();
            t.at_mut(path).kids.insert(s, Nested::leaf(1));
            out.push(Term::from_nested(-1, &t));
        }
    }
    Ok(out)
}

/// Combine equal (tree, monomial) pairs and drop zero coefficients.
pub fn merge_terms(terms: &[Term]) -> Vec<Term> {
    let mut acc: BTreeMap<(CollapsedTree, Monomial), i64> = BTreeMap::new();
    for t in terms {
        *acc.entry((t.tree.clone(), t.mono.clone())).or_default() += t.coeff;
    }
    acc.into_iter()
        .filter(|&(_, c)| c != 0)
        .map(|((tree, mono), coeff)| Term { coeff, tree, mono })
        .collect()
}

/// p^{-p_power} times a signed combination of monomial expectations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Expression {
    pub p_power: u32,
    pub terms: Vec<Term>,
}

impl Expression {
    pub fn monomial(v: &CollapsedTree, f: &Monomial) -> Self {
        Self { p_power: 0, terms: vec![Term { coeff: 1, tree: v.clone(), mono: f.clone() }] }
    }

    /// d/dp, using d/dp p^{-k} = -k p^{-k-1}.
    pub fn differentiate(&self) -> Result<Self> {
        let k = self.p_power as i64;
        let mut all = Vec::new();
        for t in &self.terms {
            if k != 0 {
                all.push(Term { coeff: -k * t.coeff, ..t.clone() });
            }
            for d in derivative_expansion(&t.tree, &t.mono)? {
                all.push(Term { coeff: t.coeff * d.coeff, ..d });
            }
        }
        Ok(Self { p_power: self.p_power + 1, terms: merge_terms(&all) })
    }

    pub fn max_height(&self) -> usize {
        self.terms.iter().map(|t| t.tree.height()).max().unwrap_or(0)
    }
}

/// The k-th derivative of E⟨T_p, V, F⟩ as an expression.
pub fn iterated_expansion(v: &CollapsedTree, f: &Monomial, k: usize) -> Result<Expression> {
    let mut e = Expression::monomial(v, f);
    for _ in 0..k {
        e = e.differentiate()?;
    }
    Ok(e)
}

/// Collapsed survivor tree of one replicate, expanded to a fixed collapsed
/// height. Matching every term against it avoids re-walking the tree.
#[derive(Default)]
struct Skeleton {
    alive: bool,
    nodes: Vec<SkNode>,
    edges: Vec<SkEdge>,
}

#[derive(Clone, Copy)]
struct SkNode {
    count: usize,
    truncated: bool,
    first: usize,
    len: usize,
}

#[derive(Clone, Copy)]
struct SkEdge {
    d: u32,
    node: usize,
}

enum Value {
    Number(f64),
    Indeterminate,
}

struct SkeletonBuilder<N> {
    kids: Vec<N>,
    row: Vec<N>,
    queue: Vec<(usize, N, usize, usize)>,
    stack: Vec<(usize, usize)>,
}

impl<N: Copy> SkeletonBuilder<N> {
    fn new() -> Self {
        Self { kids: Vec::new(), row: Vec::new(), queue: Vec::new(), stack: Vec::new() }
    }

    fn follow<T: TreeView<Node = N>>(&mut self, w: &mut Replicate<'_, T>, mut c: N, mut level: usize, p: f64) -> (N, usize, u32, usize, bool) {
        let mut d = 1;
        loop {
            if level == w.n {
                return (c, level, d, 0, true);
            }
            w.surviving_children(c, level, p, 2, &mut self.kids);
            if self.kids.len() == 1 {
                c = self.kids[0];
                level += 1;
                d += 1;
            } else {
                return (c, level, d, self.kids.len(), false);
            }
        }
    }

    fn build<T: TreeView<Node = N>>(&mut self, sk: &mut Skeleton, w: &mut Replicate<'_, T>, p: f64, height: usize) {
        sk.nodes.clear();
        sk.edges.clear();
        let root = w.tree.root();
        if w.n == 0 {
            sk.alive = true;
            sk.nodes.push(SkNode { count: 0, truncated: true, first: 0, len: 0 });
            return;
        }
        sk.alive = w.reaches(root, 0, p);
        if !sk.alive {
            return;
        }
        sk.nodes.push(SkNode { count: 0, truncated: false, first: 0, len: 0 });
        self.queue.clear();
        self.queue.push((0, root, 0, 0));
        let mut qi = 0;
        while qi < self.queue.len() {
            let (ni, v, level, depth) = self.queue[qi];
            qi += 1;
            w.surviving_children(v, level, p, usize::MAX, &mut self.row);
            let row = std::mem::take(&mut self.row);
            sk.nodes[ni].count = row.len();
            sk.nodes[ni].first = sk.edges.len();
            sk.nodes[ni].len = row.len();
            for &c in &row {
                let (end, el, d, count, truncated) = self.follow(w, c, level + 1, p);
                let id = sk.nodes.len();
                sk.nodes.push(SkNode { count, truncated, first: 0, len: 0 });
                sk.edges.push(SkEdge { d, node: id });
                if !truncated && depth + 1 < height {
                    self.queue.push((id, end, el, depth + 1));
                }
            }
            self.row = row;
        }
    }

    fn eval(&mut self, sk: &Skeleton, v: &CollapsedTree, f: &Monomial) -> Value {
        if !sk.alive {
            return Value::Number(0.0);
        }
        let mut prod = 1.0;
        let mut indet = false;
        self.stack.clear();
        self.stack.push((0, 0));
        while let Some((vv, sn)) = self.stack.pop() {
            let node = sk.nodes[sn];
            if node.truncated {
                indet = true;
                continue;
            }
            let want = v.children(vv);
            if want.is_empty() {
                if node.count < 2 {
                    return Value::Number(0.0);
                }
                continue;
            }
            if node.count != want.len() {
                return Value::Number(0.0);
            }
            debug_assert_eq!(node.len, want.len(), "skeleton too shallow");
            for (i, &vc) in want.iter().enumerate() {
                let e = sk.edges[node.first + i];
                prod *= (e.d as f64).powi(f.0[vc - 1] as i32);
                self.stack.push((vc, e.node));
            }
        }
        if indet {
            Value::Indeterminate
        } else {
            Value::Number(prod)
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonomialEstimate {
    pub estimate: f64,
    pub se: f64,
    pub reps: u64,
    pub indeterminate: u64,
    pub warning: bool,
}

impl MonomialEstimate {
    fn from_sums(sum: f64, sum_sq: f64, indet: f64, reps: u64) -> Self {
        let (estimate, se) = se_from_sums(sum, sum_sq, reps);
        let indeterminate = indet as u64;
        Self { estimate, se, reps, indeterminate, warning: indeterminate as f64 > INDETERMINATE_WARNING * reps as f64 }
    }
}

fn check_mc<T: TreeView>(tree: &T, p: f64, n: usize, reps: u64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} outside (0, 1]")));
    }
    if n > tree.depth() {
        return Err(Error::InvalidInput(format!("level {n} beyond tree depth {}", tree.depth())));
    }
    if reps < 2 {
        return Err(Error::InvalidInput("at least two replicates are required".into()));
    }
    Ok(())
}

/// Monte Carlo estimate of E_T⟨T_p, V, F⟩ with survival read at level n.
/// Indeterminate replicates score 0 and are counted.
pub fn mc_monomial_expectation<T: TreeView>(
    tree: &T,
    v: &CollapsedTree,
    f: &Monomial,
    p: f64,
    n: usize,
    reps: u64,
    mc_seed: u64,
) -> Result<MonomialEstimate> {
    let e = mc_expression(tree, &Expression::monomial(v, f), p, n, reps, mc_seed)?;
    Ok(e)
}

/// Monte Carlo estimate of an expression, summed per replicate so the
/// standard error accounts for correlation between terms.
pub fn mc_expression<T: TreeView>(tree: &T, expr: &Expression, p: f64, n: usize, reps: u64, mc_seed: u64) -> Result<MonomialEstimate> {
    check_mc(tree, p, n, reps)?;
    let height = expr.max_height().max(1);
    let scale = p.powi(-(expr.p_power as i32));
    let sums = replicate_sums_dyn(tree, n, mc_seed, reps, 3, |w, out| {
        let mut b = SkeletonBuilder::new();
        let mut sk = Skeleton::default();
        b.build(&mut sk, w, p, height);
        let mut x = 0.0;
        let mut indet = false;
        for t in &expr.terms {
            match b.eval(&sk, &t.tree, &t.mono) {
                Value::Number(y) => x += t.coeff as f64 * y,
                Value::Indeterminate => indet = true,
            }
        }
        let x = if indet { 0.0 } else { x * scale };
        out.copy_from_slice(&[x, x * x, indet as u8 as f64]);
    });
    Ok(MonomialEstimate::from_sums(sums[0], sums[1], sums[2], reps))
}

#[derive(Debug, Clone, Serialize)]
pub struct DerivativeReport {
    pub tree: String,
    pub monomial: String,
    pub p: f64,
    pub h: f64,
    pub depth: usize,
    pub reps: u64,
    pub terms: usize,
    /// Central difference with step h of the coupled estimates.
    pub finite_difference: f64,
    pub finite_difference_se: f64,
    /// p^{-1} times the signed sum over the expansion.
    pub expansion: f64,
    pub expansion_se: f64,
    /// Standard error of the per-replicate difference of the two sides.
    pub combined_se: f64,
    /// Richardson estimate of the central-difference bias.
    pub discretization: f64,
    pub indeterminate: u64,
    pub pass: bool,
}

/// Check d/dp E⟨T_p, V, F⟩ against the expansion for several (V, F) at once;
/// the survivor skeletons at p, p ± h and p ± 2h are shared by all cases.
#[allow(clippy::too_many_arguments)]
pub fn verify_derivative_identities<T: TreeView>(
    tree: &T,
    cases: &[(CollapsedTree, Monomial)],
    p: f64,
    h: f64,
    n: usize,
    reps: u64,
    mc_seed: u64,
) -> Result<Vec<DerivativeReport>> {
    check_mc(tree, p, n, reps)?;
    if !(h > 0.0 && p - 2.0 * h > 0.0 && p + 2.0 * h <= 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} with step {h} leaves (0, 1]")));
    }
    let expansions: Vec<Vec<Term>> = cases
        .iter()
        .map(|(v, f)| derivative_expansion(v, f).map(|t| merge_terms(&t)))
        .collect::<Result<_>>()?;
    let height = cases
        .iter()
        .map(|(v, _)| v.height())
        .chain(expansions.iter().flatten().map(|t| t.tree.height()))
        .max()
        .unwrap_or(1);
    let ps = [p - 2.0 * h, p - h, p, p + h, p + 2.0 * h];
    const W: usize = 9;
    let sums = replicate_sums_dyn(tree, n, mc_seed, reps, W * cases.len(), |w, out| {
        let mut b = SkeletonBuilder::new();
        let mut sks: [Skeleton; 5] = Default::default();
        for (sk, &q) in sks.iter_mut().zip(&ps) {
            b.build(sk, w, q, height);
        }
        for (ci, (v, f)) in cases.iter().enumerate() {
            let mut indet = false;
            let mut side = [0.0; 5];
            for (k, sk) in sks.iter().enumerate() {
                if k == 2 {
                    continue;
                }
                match b.eval(sk, v, f) {
                    Value::Number(y) => side[k] = y,
                    Value::Indeterminate => indet = true,
                }
            }
            let mut rhs = 0.0;
            for t in &expansions[ci] {
                match b.eval(&sks[2], &t.tree, &t.mono) {
                    Value::Number(y) => rhs += t.coeff as f64 * y,
                    Value::Indeterminate => indet = true,
                }
            }
            let (fd, fd2, rhs) = if indet {
                (0.0, 0.0, 0.0)
            } else {
                ((side[3] - side[1]) / (2.0 * h), (side[4] - side[0]) / (4.0 * h), rhs / p)
            };
            let diff = fd - rhs;
            out[ci * W..(ci + 1) * W].copy_from_slice(&[fd, fd * fd, fd2, rhs, rhs * rhs, diff, diff * diff, indet as u8 as f64, 0.0]);
        }
    });
    Ok(cases
        .iter()
        .enumerate()
        .map(|(ci, (v, f))| {
            let s = &sums[ci * W..(ci + 1) * W];
            let (fd, fd_se) = se_from_sums(s[0], s[1], reps);
            let fd2 = s[2] / reps as f64;
            let (rhs, rhs_se) = se_from_sums(s[3], s[4], reps);
            let (diff, diff_se) = se_from_sums(s[5], s[6], reps);
            let discretization = (fd2 - fd).abs() / 3.0;
            DerivativeReport {
                tree: v.to_string(),
                monomial: f.to_string(),
                p,
                h,
                depth: n,
                reps,
                terms: expansions[ci].len(),
                finite_difference: fd,
                finite_difference_se: fd_se,
                expansion: rhs,
                expansion_se: rhs_se,
                combined_se: diff_se,
                discretization,
                indeterminate: s[7] as u64,
                pass: diff.abs() <= 3.0 * diff_se + discretization,
            }
        })
        .collect())
}

#[allow(clippy::too_many_arguments)]
pub fn verify_derivative_identity<T: TreeView>(
    tree: &T,
    v: &CollapsedTree,
    f: &Monomial,
    p: f64,
    h: f64,
    n: usize,
    reps: u64,
    mc_seed: u64,
) -> Result<DerivativeReport> {
    let mut r = verify_derivative_identities(tree, &[(v.clone(), f.clone())], p, h, n, reps, mc_seed)?;
    Ok(r.remove(0))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ExactMonomial {
    pub value: f64,
    pub indeterminate_prob: f64,
}

/// E_T⟨T_p, V, F⟩ by enumerating every open/closed pattern of the edges
/// down to level n. Indeterminate patterns contribute 0.
pub fn exact_monomial_expectation(tree: &SampledTree, v: &CollapsedTree, f: &Monomial, p: f64, n: usize) -> Result<ExactMonomial> {
    if n > tree.depth() {
        return Err(Error::InvalidInput(format!("level {n} beyond tree depth {}", tree.depth())));
    }
    let mut offset = vec![0usize; n + 2];
    for level in 1..=n {
        offset[level + 1] = offset[level] + tree.population(level);
    }
    let edges = offset[n + 1];
    if edges > EXACT_EDGE_LIMIT {
        return Err(Error::Budget(format!("{edges} edges exceed the enumeration limit {EXACT_EDGE_LIMIT}")));
    }
    let mut value = 0.0;
    let mut indet = 0.0;
    for mask in 0u64..(1u64 << edges) {
        let open_count = mask.count_ones() as i32;
        let prob = p.powi(open_count) * (1.0 - p).powi(edges as i32 - open_count);
        let surv = survivor_with(tree, n, &|level, i| mask >> (offset[level] + i) & 1 == 1);
        match match_initial_subtree(surv.as_ref(), v) {
            MatchOutcome::Matched(w) => value += prob * f.value(&w),
            MatchOutcome::NoMatch => {}
            MatchOutcome::Indeterminate => indet += prob,
        }
    }
    Ok(ExactMonomial { value, indeterminate_prob: indet })
}

/// Edge weights of V matched in one replicate, for distributional checks.
pub fn matched_weights<T: TreeView>(tree: &T, v: &CollapsedTree, p: f64, n: usize, mc_seed: u64, rep: u64) -> MatchOutcome {
    let mut w = Replicate::new(tree, n);
    w.reset(mc_seed, rep);
    let mut b = SkeletonBuilder::new();
    let mut sk = Skeleton::default();
    b.build(&mut sk, &mut w, p, v.height().max(1));
    if !sk.alive {
        return MatchOutcome::NoMatch;
    }
    let mut weights = vec![0u32; v.edge_count()];
    let probe = Monomial(vec![0; v.edge_count()]);
    match b.eval(&sk, v, &probe) {
        Value::Indeterminate => return MatchOutcome::Indeterminate,
        Value::Number(x) if x == 0.0 => return MatchOutcome::NoMatch,
        Value::Number(_) => {}
    }
    let mut stack = vec![(0usize, 0usize)];
    while let Some((vv, sn)) = stack.pop() {
        let node = sk.nodes[sn];
        for (i, &vc) in v.children(vv).iter().enumerate() {
            let e = sk.edges[node.first + i];
            weights[vc - 1] = e.d;
            stack.push((vc, e.node));
        }
    }
    MatchOutcome::Matched(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gwtree::{sample_tree, LazyTree};
    use crate::offspring::OffspringDistribution;

    fn mix13() -> OffspringDistribution {
        OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)]).unwrap()
    }

    /// Path of length `d` ending in `tail`.
    fn path(d: usize, tail: &str) -> String {
        let mut s = String::new();
        for _ in 1..d {
            s.push('(');
        }
        s.push_str(tail);
        for _ in 1..d {
            s.push(')');
        }
        s
    }

    #[test]
    fn parens_round_trip() {
        for text in ["()", "(())", "(()())", "((()())()(()()))"] {
            let t: OrderedTree = text.parse().unwrap();
            assert_eq!(t.to_string(), text);
        }
        assert!("(()".parse::<OrderedTree>().is_err());
        assert!("())".parse::<OrderedTree>().is_err());
        assert!("(x)".parse::<OrderedTree>().is_err());
        assert!("(()(()))".parse::<CollapsedTree>().is_err());
        assert!("(())".parse::<CollapsedTree>().is_ok());
        let cherry = CollapsedTree::cherry();
        assert_eq!(cherry.leaves(), vec![1, 2]);
        assert_eq!(cherry.height(), 1);
        assert!(Monomial::parse(&cherry, "1").is_err());
        assert_eq!(Monomial::parse(&cherry, "1, 0").unwrap().degree(), 1);
    }

    #[test]
    fn collapse_examples() {
        let bare: OrderedTree = path(6, "()").parse().unwrap();
        assert_eq!(bare.edge_count(), 5);
        let (c, w) = collapse(&bare);
        assert_eq!(c.to_string(), "(())");
        assert_eq!(w, vec![5]);

        for text in ["(()())", "(())", "((()())())", "((()()())(()()))"] {
            let v: OrderedTree = text.parse().unwrap();
            let (c, w) = collapse(&v);
            assert_eq!(c.tree(), &v);
            assert!(w.iter().all(|&d| d == 1));
            let (again, w2) = collapse(c.tree());
            assert_eq!(again, c);
            assert!(w2.iter().all(|&d| d == 1));
        }
    }

    #[test]
    fn worked_monomial_example() {
        // root -2- a; a branches three ways: a path of 3 to a cherry whose
        // left leg has length 2, a middle cherry, and a rightmost leaf at 2
        let left = path(3, &format!("({}())", path(2, "()")));
        let tree = format!("({})", path(2, &format!("({left}(()())(()))")));
        let t: OrderedTree = tree.parse().unwrap();
        let (v, w) = collapse(&t);
        assert_eq!(v.to_string(), "(((()())(()())()))");
        assert_eq!(v.edge_count(), 8);
        // preorder edges: root, left, left-left, left-right, mid, mid-l, mid-r, right
        assert_eq!(w, vec![2, 3, 2, 1, 1, 1, 1, 2]);
        let f = Monomial::new(&v, vec![1, 1, 1, 0, 0, 0, 0, 3]).unwrap();
        assert_eq!(f.value(&w), 96.0);
    }

    #[test]
    fn single_edge_counts() {
        let v1 = CollapsedTree::single_edge();
        let f1 = Monomial::new(&v1, vec![1]).unwrap();
        let terms = derivative_expansion(&v1, &f1).unwrap();
        assert_eq!(terms.len(), 9);
        for t in &terms {
            assert_eq!(t.mono.degree(), 2);
            assert!(t.tree.edge_count() <= 3);
        }
        let merged = merge_terms(&terms);
        let shown: Vec<(i64, String, String)> = merged.iter().map(|t| (t.coeff, t.tree.to_string(), t.mono.to_string())).collect();
        assert_eq!(
            shown,
            vec![
                (1, "(())".into(), "2".into()),
                (-2, "((()()))".into(), "0,1,1".into()),
                (-2, "(()())".into(), "1,1".into()),
            ]
        );
        let cherry = CollapsedTree::cherry();
        let zero = Monomial::zero(&cherry);
        let terms = derivative_expansion(&cherry, &zero).unwrap();
        assert_eq!(terms.len(), 13);
        assert!(terms.iter().all(|t| t.mono.degree() == 1 && t.tree.edge_count() <= 4));
    }

    #[test]
    fn expansion_respects_degree_and_size() {
        for (text, exps) in [("((()())())", vec![2u32, 0, 1, 3]), ("(()()())", vec![0, 0, 0]), ("(())", vec![3])] {
            let v: CollapsedTree = text.parse().unwrap();
            let f = Monomial::new(&v, exps).unwrap();
            for t in derivative_expansion(&v, &f).unwrap() {
                assert_eq!(t.mono.degree(), f.degree() + 1);
                assert!(t.tree.edge_count() <= v.edge_count() + 2);
                assert!(CollapsedTree::new(t.tree.tree().clone()).is_ok());
            }
        }
        assert!(derivative_expansion(&"()".parse().unwrap(), &Monomial(vec![])).is_err());
    }

    /// Closed forms on the binary tree, where each matched edge is
    /// geometric: root edge P(d = k) = A^k (1 - A), others A^{k-1} (1 - A).
    fn binary_closed(v: &CollapsedTree, f: &Monomial, p: f64) -> f64 {
        let g = (2.0 * p - 1.0) / (p * p);
        let a = 2.0 - 2.0 * p;
        let moment = |e: u32| -> f64 {
            // E d^e for d geometric on {1, 2, ...} with success 1 - a
            (1..4000).map(|k| (k as f64).powi(e as i32) * a.powi(k - 1) * (1.0 - a)).sum()
        };
        let mut x = g;
        for vv in 0..v.vertex_count() {
            let k = v.children(vv).len();
            if vv == 0 {
                x *= match k {
                    0 => 1.0 - a,
                    1 => a,
                    2 => 1.0 - a,
                    _ => 0.0,
                };
            } else if k > 2 {
                x = 0.0;
            }
            for &c in v.children(vv) {
                x *= moment(f.0[c - 1]);
            }
        }
        x
    }

    #[test]
    fn binary_derivative_identity_in_closed_form() {
        let p = 0.75;
        let v1 = CollapsedTree::single_edge();
        let f1 = Monomial::new(&v1, vec![1]).unwrap();
        let expr = iterated_expansion(&v1, &f1, 1).unwrap();
        let rhs: f64 = expr.terms.iter().map(|t| t.coeff as f64 * binary_closed(&t.tree, &t.mono, p)).sum::<f64>() / p;
        let lhs = (2.0 * p - 4.0) / p.powi(3);
        assert!((lhs + 5.925_925_925_925_926).abs() < 1e-12);
        assert!((rhs - lhs).abs() < 1e-9, "{rhs} vs {lhs}");
        // second derivative of p g'(p) = (2 - 2p) / p^2 is (12 - 4p) / p^4
        let second = iterated_expansion(&v1, &f1, 2).unwrap();
        let rhs2: f64 =
            second.terms.iter().map(|t| t.coeff as f64 * binary_closed(&t.tree, &t.mono, p)).sum::<f64>() / p.powi(2);
        assert!((rhs2 - (12.0 - 4.0 * p) / p.powi(4)).abs() < 1e-8, "{rhs2}");
        // cherry with F = 0: D = g (1 - A), derivative of (2p - 1)(2p - 1) / p^2
        let cherry = CollapsedTree::cherry();
        let zero = Monomial::zero(&cherry);
        let e = iterated_expansion(&cherry, &zero, 1).unwrap();
        let rhs: f64 = e.terms.iter().map(|t| t.coeff as f64 * binary_closed(&t.tree, &t.mono, p)).sum::<f64>() / p;
        let h = 1e-5;
        let d = |q: f64| (2.0 * q - 1.0).powi(2) / (q * q);
        assert!((rhs - (d(p + h) - d(p - h)) / (2.0 * h)).abs() < 1e-7);
    }

    #[test]
    fn skeleton_matches_explicit_route() {
        let d = mix13();
        let t = sample_tree(&d, 7, 11).unwrap();
        let shapes: Vec<CollapsedTree> =
            ["(())", "(()())", "(()()())", "((()())())", "((()()))", "()"].iter().map(|s| s.parse().unwrap()).collect();
        for rep in 0..400 {
            let surv = survivor_tree(&t, 0.7, 7, 3, rep);
            for v in &shapes {
                let explicit = match_initial_subtree(surv.as_ref(), v);
                let fast = matched_weights(&t, v, 0.7, 7, 3, rep);
                assert_eq!(explicit, fast, "rep {rep}, V = {v}");
            }
        }
    }

    #[test]
    fn mc_matches_exact_enumeration() {
        let d = mix13();
        let mut checked = 0;
        for seed in 0..40 {
            let t = sample_tree(&d, 3, seed).unwrap();
            let edges: usize = (1..=3).map(|l| t.population(l)).sum();
            if edges > 14 || edges < 6 {
                continue;
            }
            for (text, exps) in [("(())", vec![1u32]), ("(()())", vec![0, 0]), ("(()()())", vec![1, 0, 2])] {
                let v: CollapsedTree = text.parse().unwrap();
                let f = Monomial::new(&v, exps).unwrap();
                let exact = exact_monomial_expectation(&t, &v, &f, 0.8, 3).unwrap();
                let mc = mc_monomial_expectation(&t, &v, &f, 0.8, 3, 40_000, seed).unwrap();
                let tol = 4.0 * mc.se.max(1e-12);
                assert!((mc.estimate - exact.value).abs() <= tol, "seed {seed} {text}: {} vs {}", mc.estimate, exact.value);
            }
            checked += 1;
            if checked == 4 {
                break;
            }
        }
        assert_eq!(checked, 4);
    }

    #[test]
    fn single_edge_is_branching_depth() {
        let d = mix13();
        let t = LazyTree::new(&d, 5, 30);
        let v1 = CollapsedTree::single_edge();
        let f1 = Monomial::new(&v1, vec![1]).unwrap();
        let mono = mc_monomial_expectation(&t, &v1, &f1, 0.75, 30, 20_000, 9).unwrap();
        let b = crate::quenched::mc_branching_depth(&t, 0.75, 30, 20_000, 9).unwrap();
        let slack = 30.0 * mono.indeterminate as f64 / 20_000.0 + 1e-12;
        assert!((mono.estimate - b.estimate).abs() <= slack, "{} vs {}", mono.estimate, b.estimate);
        // the second edge-free monomial is the single-child probability times g
        let zero = Monomial::new(&v1, vec![0]).unwrap();
        let z = mc_monomial_expectation(&t, &v1, &zero, 0.75, 30, 20_000, 9).unwrap();
        assert!(z.estimate > 0.0 && z.estimate < 1.0);
    }

    #[test]
    fn binary_tree_mc_agrees_with_closed_form() {
        let bin = OffspringDistribution::binary();
        let t = LazyTree::new(&bin, 0, 40);
        let v1 = CollapsedTree::single_edge();
        let f1 = Monomial::new(&v1, vec![1]).unwrap();
        let r = verify_derivative_identity(&t, &v1, &f1, 0.75, 0.01, 40, 200_000, 4).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.expansion + 5.925_925_925_925_926).abs() < 4.0 * r.expansion_se, "{r:?}");
    }

    #[test]
    fn weights_are_geometric_over_the_ensemble() {
        let d = mix13();
        let p = 0.75;
        let a = crate::annealed::single_child_prob(&d, p).unwrap();
        let n = crate::quenched::default_depth(&d, p).unwrap();
        let v1 = CollapsedTree::single_edge();
        let mut samples = Vec::new();
        let mut seed = 0;
        while samples.len() < 10_000 {
            let t = LazyTree::new(&d, seed, n);
            if let MatchOutcome::Matched(w) = matched_weights(&t, &v1, p, n, 77, 0) {
                samples.push(w[0]);
            }
            seed += 1;
        }
        let total = samples.len() as f64;
        let mut ks: f64 = 0.0;
        for k in 1..60u32 {
            let emp = samples.iter().filter(|&&x| x <= k).count() as f64 / total;
            let cdf = 1.0 - a.powi(k as i32);
            ks = ks.max((emp - cdf).abs());
        }
        // 1% critical value of the Kolmogorov-Smirnov statistic
        assert!(ks < 1.628 / total.sqrt(), "KS = {ks}");
        let mean = samples.iter().map(|&x| x as f64).sum::<f64>() / total;
        assert!((mean - 1.0 / (1.0 - a)).abs() < 0.05);
    }

    #[test]
    fn verify_is_thread_independent() {
        let d = mix13();
        let t = LazyTree::new(&d, 2, 20);
        let cases = vec![(CollapsedTree::single_edge(), Monomial(vec![1])), (CollapsedTree::cherry(), Monomial(vec![0, 0]))];
        let a = verify_derivative_identities(&t, &cases, 0.8, 0.01, 20, 5000, 1).unwrap();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| verify_derivative_identities(&t, &cases, 0.8, 0.01, 20, 5000, 1).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.finite_difference.to_bits(), y.finite_difference.to_bits());
            assert_eq!(x.expansion.to_bits(), y.expansion.to_bits());
        }
    }
}
