//! Galton-Watson trees on the Ulam-Harris skeleton.
//!
//! Every vertex carries a key derived from the seed and its address, and
//! both its offspring count and its percolation uniform are pure functions
//! of that key. A [`SampledTree`] stores the keys level by level; a
//! [`LazyTree`] recomputes them on demand for trees too large to store.

use std::io::{Read, Write};
use std::ops::Range;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::offspring::OffspringDistribution;

pub const POPULATION_CAP: u64 = 100_000_000;

const DEG_SALT: u64 = 0x6a09_e667_f3bc_c908;
const U_SALT: u64 = 0xbb67_ae85_84ca_a73b;
const REP_SALT: u64 = 0x3c6e_f372_fe94_f82b;
const MAGIC: &[u8; 4] = b"GWT1";

/// splitmix64 finalizer.
#[inline]
pub fn mix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform on [0, 1) from the top 53 bits.
#[inline]
pub fn unit(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[inline]
pub fn root_key(seed: u64) -> u64 {
    mix(seed)
}

#[inline]
pub fn child_key(parent: u64, i: usize) -> u64 {
    mix(parent ^ mix(i as u64 + 1))
}

#[inline]
pub fn degree_uniform(key: u64) -> f64 {
    unit(mix(key ^ DEG_SALT))
}

#[inline]
pub fn vertex_uniform(key: u64) -> f64 {
    unit(mix(key ^ U_SALT))
}

/// Key of one Monte Carlo replicate; independent of the tree's own stream.
#[inline]
pub fn replicate_key(mc_seed: u64, rep: u64) -> u64 {
    mix(mix(mc_seed ^ REP_SALT) ^ mix(rep))
}

#[inline]
pub fn replicate_uniform(rep_key: u64, vertex_key: u64) -> f64 {
    unit(mix(rep_key ^ vertex_key))
}

/// Ulam-Harris address: the 0-based child index at each step from the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct VertexId(pub Vec<u32>);

impl VertexId {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, i: u32) -> Self {
        let mut path = self.0.clone();
        path.push(i);
        Self(path)
    }

    pub fn key(&self, seed: u64) -> u64 {
        self.0.iter().fold(root_key(seed), |k, &i| child_key(k, i as usize))
    }

    /// Depth of the last common ancestor.
    pub fn meet_depth(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).take_while(|(a, b)| a == b).count()
    }
}

/// Read access shared by stored and lazily generated trees.
pub trait TreeView: Sync {
    type Node: Copy + Send + Sync;
    fn root(&self) -> Self::Node;
    fn depth(&self) -> usize;
    fn degree(&self, level: usize, v: Self::Node) -> usize;
    fn child(&self, level: usize, v: Self::Node, i: usize) -> Self::Node;
    fn key(&self, level: usize, v: Self::Node) -> u64;
}

#[derive(Debug, Clone, Default)]
struct Level {
    deg: Vec<u32>,
    u: Vec<f64>,
    key: Vec<u64>,
    /// Prefix sums of `deg`: children of vertex i are `first[i]..first[i+1]`.
    first: Vec<usize>,
}

impl Level {
    fn from_keys(dist: &OffspringDistribution, key: Vec<u64>, salt: u64) -> Self {
        let (deg, u): (Vec<u32>, Vec<f64>) = key
            .par_iter()
            .map(|&k| (dist.sample(degree_uniform(k ^ salt)) as u32, vertex_uniform(k)))
            .unzip();
        let mut first = Vec::with_capacity(deg.len() + 1);
        let mut acc = 0usize;
        first.push(0);
        for &d in &deg {
            acc += d as usize;
            first.push(acc);
        }
        Self { deg, u, key, first }
    }

    fn child_keys(&self, salt: u64) -> Vec<u64> {
        let mut out = Vec::with_capacity(*self.first.last().unwrap_or(&0));
        for (&k, &d) in self.key.iter().zip(&self.deg) {
            out.extend((0..d as usize).map(|i| child_key(k ^ salt, i)));
        }
        out
    }
}

/// A Galton-Watson tree stored breadth-first to a fixed depth.
#[derive(Debug, Clone)]
pub struct SampledTree {
    dist: OffspringDistribution,
    seed: u64,
    levels: Vec<Level>,
}

/// Sample to `depth` with the default population cap.
pub fn sample_tree(dist: &OffspringDistribution, depth: usize, seed: u64) -> Result<SampledTree> {
    SampledTree::sample(dist, depth, seed, POPULATION_CAP)
}

impl SampledTree {
    pub fn sample(dist: &OffspringDistribution, depth: usize, seed: u64, cap: u64) -> Result<Self> {
        let mut levels = vec![Level::from_keys(dist, vec![root_key(seed)], 0)];
        let mut total = 1u64;
        for level in 1..=depth {
            let prev = levels.last().unwrap();
            let size = *prev.first.last().unwrap() as u64;
            total += size;
            if total > cap {
                return Err(Error::PopulationCap { level, population: total });
            }
            let keys = prev.child_keys(0);
            levels.push(Level::from_keys(dist, keys, 0));
        }
        Ok(Self { dist: dist.clone(), seed, levels })
    }

    /// The same tree with the deepest level's offspring redrawn under `salt`
    /// and one more level attached. `salt = 0` is the ordinary continuation.
    pub fn extend_one_level(&self, salt: u64) -> Result<Self> {
        let mut levels = self.levels.clone();
        let last = levels.pop().unwrap();
        let redrawn = Level::from_keys(&self.dist, last.key, salt);
        let total: u64 = levels.iter().map(|l| l.key.len() as u64).sum::<u64>()
            + redrawn.key.len() as u64
            + *redrawn.first.last().unwrap() as u64;
        if total > POPULATION_CAP {
            return Err(Error::PopulationCap { level: self.depth() + 1, population: total });
        }
        let keys = redrawn.child_keys(salt);
        levels.push(redrawn);
        levels.push(Level::from_keys(&self.dist, keys, 0));
        Ok(Self { dist: self.dist.clone(), seed: self.seed, levels })
    }

    pub fn dist(&self) -> &OffspringDistribution {
        &self.dist
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    /// Z_n, the number of vertices at `level`.
    pub fn population(&self, level: usize) -> usize {
        self.levels[level].key.len()
    }

    pub fn degree(&self, level: usize, i: usize) -> usize {
        self.levels[level].deg[i] as usize
    }

    pub fn uniform(&self, level: usize, i: usize) -> f64 {
        self.levels[level].u[i]
    }

    pub fn key(&self, level: usize, i: usize) -> u64 {
        self.levels[level].key[i]
    }

    /// Indices at `level + 1` of the children of vertex `i` at `level`.
    pub fn children(&self, level: usize, i: usize) -> Range<usize> {
        let f = &self.levels[level].first;
        f[i]..f[i + 1]
    }

    pub fn locate(&self, id: &VertexId) -> Option<(usize, usize)> {
        let mut idx = 0usize;
        for (level, &c) in id.0.iter().enumerate() {
            if level >= self.depth() || c as usize >= self.degree(level, idx) {
                return None;
            }
            idx = self.levels[level].first[idx] + c as usize;
        }
        Some((id.depth(), idx))
    }

    /// W_n = Z_n / mu^n at the deepest stored level.
    pub fn martingale_limit_estimate(&self) -> f64 {
        let n = self.depth();
        self.population(n) as f64 / self.dist.mean().powi(n as i32)
    }

    pub fn martingale_at(&self, level: usize) -> f64 {
        self.population(level) as f64 / self.dist.mean().powi(level as i32)
    }

    /// Open marking per level: v is open iff every non-root vertex on its
    /// ancestral line, itself included, has U <= p.
    pub fn percolate(&self, p: f64, depth: usize) -> Vec<Vec<bool>> {
        let depth = depth.min(self.depth());
        let mut out = vec![vec![true]];
        for level in 1..=depth {
            let parent = &out[level - 1];
            let prev = &self.levels[level - 1];
            let cur = &self.levels[level];
            let mut marks = vec![false; cur.key.len()];
            for (i, &open) in parent.iter().enumerate() {
                if open {
                    for c in prev.first[i]..prev.first[i + 1] {
                        marks[c] = cur.u[c] <= p;
                    }
                }
            }
            out.push(marks);
        }
        out
    }

    /// Binary dump: "GWT1", seed, depth, distribution JSON, then per level a
    /// count and (deg, U bits) pairs, all little-endian.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&(self.depth() as u32).to_le_bytes())?;
        let json = self.dist.to_json();
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(json.as_bytes())?;
        for level in &self.levels {
            w.write_all(&(level.key.len() as u64).to_le_bytes())?;
            for (&d, &u) in level.deg.iter().zip(&level.u) {
                w.write_all(&d.to_le_bytes())?;
                w.write_all(&u.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf)?;
            Ok(buf)
        }
        if &take::<4, _>(&mut r)? != MAGIC {
            return Err(Error::InvalidInput("not a GWT1 dump".into()));
        }
        let seed = u64::from_le_bytes(take(&mut r)?);
        let depth = u32::from_le_bytes(take(&mut r)?) as usize;
        let json_len = u32::from_le_bytes(take(&mut r)?) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let json = String::from_utf8(json).map_err(|e| Error::InvalidInput(e.to_string()))?;
        let dist = OffspringDistribution::from_json(&json)?;
        let mut levels: Vec<Level> = Vec::with_capacity(depth + 1);
        let mut keys = vec![root_key(seed)];
        for level in 0..=depth {
            let count = u64::from_le_bytes(take(&mut r)?) as usize;
            if count != keys.len() {
                return Err(Error::InvalidInput(format!("level {level} has {count} vertices, expected {}", keys.len())));
            }
            let mut deg = Vec::with_capacity(count);
            let mut u = Vec::with_capacity(count);
            for _ in 0..count {
                deg.push(u32::from_le_bytes(take(&mut r)?));
                u.push(f64::from_bits(u64::from_le_bytes(take(&mut r)?)));
            }
            let mut first = vec![0usize];
            for &d in &deg {
                first.push(first.last().unwrap() + d as usize);
            }
            let lvl = Level { deg, u, key: keys, first };
            keys = lvl.child_keys(0);
            levels.push(lvl);
        }
        Ok(Self { dist, seed, levels })
    }
}

impl TreeView for SampledTree {
    type Node = usize;

    fn root(&self) -> usize {
        0
    }

    fn depth(&self) -> usize {
        SampledTree::depth(self)
    }

    #[inline]
    fn degree(&self, level: usize, v: usize) -> usize {
        self.levels[level].deg[v] as usize
    }

    #[inline]
    fn child(&self, level: usize, v: usize, i: usize) -> usize {
        self.levels[level].first[v] + i
    }

    #[inline]
    fn key(&self, level: usize, v: usize) -> u64 {
        self.levels[level].key[v]
    }
}

/// The same tree as [`SampledTree`] for the same seed, generated on demand.
#[derive(Debug, Clone, Copy)]
pub struct LazyTree<'a> {
    pub dist: &'a OffspringDistribution,
    pub seed: u64,
    pub depth: usize,
}

impl<'a> LazyTree<'a> {
    pub fn new(dist: &'a OffspringDistribution, seed: u64, depth: usize) -> Self {
        Self { dist, seed, depth }
    }

    /// Z_0, ..., Z_depth by depth-first counting, without storing the tree.
    pub fn population_profile(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.depth + 1];
        fn walk(t: &LazyTree, key: u64, level: usize, counts: &mut [u64]) {
            counts[level] += 1;
            if level == t.depth {
                return;
            }
            let d = t.dist.sample(degree_uniform(key));
            if level + 1 == t.depth {
                counts[level + 1] += d as u64;
                return;
            }
            for i in 0..d {
                walk(t, child_key(key, i), level + 1, counts);
            }
        }
        walk(self, root_key(self.seed), 0, &mut counts);
        counts
    }
}

impl TreeView for LazyTree<'_> {
    type Node = u64;

    fn root(&self) -> u64 {
        root_key(self.seed)
    }

    fn depth(&self) -> usize {
        self.depth
    }

    #[inline]
    fn degree(&self, _level: usize, v: u64) -> usize {
        self.dist.sample(degree_uniform(v))
    }

    #[inline]
    fn child(&self, _level: usize, v: u64, i: usize) -> u64 {
        child_key(v, i)
    }

    #[inline]
    fn key(&self, _level: usize, v: u64) -> u64 {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mix13() -> OffspringDistribution {
        OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)]).unwrap()
    }

    #[test]
    fn binary_tree_is_full() {
        let t = sample_tree(&OffspringDistribution::binary(), 10, 99).unwrap();
        for n in 0..=10 {
            assert_eq!(t.population(n), 1 << n);
            assert_eq!(t.martingale_at(n), 1.0);
        }
        assert_eq!(t.martingale_limit_estimate(), 1.0);
    }

    #[test]
    fn depth_zero_is_root_only() {
        let t = sample_tree(&mix13(), 0, 5).unwrap();
        assert_eq!(t.depth(), 0);
        assert_eq!(t.population(0), 1);
    }

    #[test]
    fn level_sizes_add_up() {
        let t = sample_tree(&mix13(), 12, 7).unwrap();
        for n in 1..=12 {
            let s: usize = (0..t.population(n - 1)).map(|i| t.degree(n - 1, i)).sum();
            assert_eq!(s, t.population(n));
        }
    }

    #[test]
    fn three_children_gives_w_one_and_a_half() {
        let d = mix13();
        let seed = (0..).find(|&s| sample_tree(&d, 1, s).unwrap().population(1) == 3).unwrap();
        assert_eq!(sample_tree(&d, 1, seed).unwrap().martingale_limit_estimate(), 1.5);
    }

    #[test]
    fn population_cap_is_reported() {
        let err = SampledTree::sample(&OffspringDistribution::binary(), 20, 1, 1000).unwrap_err();
        assert!(matches!(err, Error::PopulationCap { level: 9, .. }), "{err}");
    }

    #[test]
    fn lazy_and_stored_agree() {
        let d = mix13();
        let t = sample_tree(&d, 9, 1234).unwrap();
        let lazy = LazyTree::new(&d, 1234, 9);
        let profile = lazy.population_profile();
        for n in 0..=9 {
            assert_eq!(profile[n], t.population(n) as u64);
        }
        // walk a few addresses through both
        let id = VertexId(vec![0, 0, 0]);
        if let Some((lvl, idx)) = t.locate(&id) {
            assert_eq!(t.key(lvl, idx), id.key(1234));
            assert_eq!(t.uniform(lvl, idx), vertex_uniform(id.key(1234)));
        }
        let mut v = TreeView::root(&lazy);
        let mut i = 0usize;
        for level in 0..9 {
            assert_eq!(TreeView::degree(&lazy, level, v), TreeView::degree(&t, level, i));
            assert_eq!(TreeView::key(&lazy, level, v), TreeView::key(&t, level, i));
            let last = TreeView::degree(&t, level, i) - 1;
            v = TreeView::child(&lazy, level, v, last);
            i = TreeView::child(&t, level, i, last);
        }
    }

    #[test]
    fn extension_with_zero_salt_is_continuation() {
        let d = mix13();
        let short = sample_tree(&d, 6, 42).unwrap();
        let long = sample_tree(&d, 7, 42).unwrap();
        let ext = short.extend_one_level(0).unwrap();
        for n in 0..=7 {
            assert_eq!(ext.population(n), long.population(n));
        }
        let other = short.extend_one_level(17).unwrap();
        for n in 0..=6 {
            assert_eq!(other.population(n), short.population(n));
        }
    }

    #[test]
    fn dump_round_trip() {
        let t = sample_tree(&mix13(), 8, 3).unwrap();
        let mut buf = Vec::new();
        t.write_dump(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"GWT1");
        let back = SampledTree::read_dump(buf.as_slice()).unwrap();
        assert_eq!(back.depth(), 8);
        for n in 0..=8 {
            for i in 0..t.population(n) {
                assert_eq!(back.degree(n, i), t.degree(n, i));
                assert_eq!(back.uniform(n, i).to_bits(), t.uniform(n, i).to_bits());
                assert_eq!(back.key(n, i), t.key(n, i));
            }
        }
        assert!(SampledTree::read_dump(&b"XXXX"[..]).is_err());
    }

    #[test]
    fn percolation_extremes() {
        let t = sample_tree(&mix13(), 8, 11).unwrap();
        assert!(t.percolate(1.0, 8).iter().all(|l| l.iter().all(|&o| o)));
        let marks = t.percolate(0.0, 8);
        assert!(marks[0][0]);
        assert!(marks[1..].iter().all(|l| l.iter().all(|&o| !o)));
    }

    #[test]
    fn uniform_in_unit_interval() {
        for x in [0u64, 1, u64::MAX, 1 << 63] {
            let u = unit(x);
            assert!((0.0..1.0).contains(&u));
        }
    }

    proptest! {
        #[test]
        fn coupling_is_monotone(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let t = sample_tree(&mix13(), 7, seed).unwrap();
            let small = t.percolate(lo, 7);
            let big = t.percolate(hi, 7);
            for (ls, lb) in small.iter().zip(&big) {
                for (&s, &b) in ls.iter().zip(lb) {
                    prop_assert!(!s || b);
                }
            }
        }

        #[test]
        fn regeneration_is_bit_identical(seed in any::<u64>()) {
            let d = mix13();
            let a = sample_tree(&d, 6, seed).unwrap();
            let b = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap()
                .install(|| sample_tree(&d, 6, seed).unwrap());
            for n in 0..=6 {
                prop_assert_eq!(a.population(n), b.population(n));
                for i in 0..a.population(n) {
                    prop_assert_eq!(a.uniform(n, i).to_bits(), b.uniform(n, i).to_bits());
                    prop_assert_eq!(a.degree(n, i), b.degree(n, i));
                }
            }
        }
    }
}
