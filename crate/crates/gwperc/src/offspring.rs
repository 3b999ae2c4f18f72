//! Offspring laws with no death and their generating-function calculus.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Tail mass allowed to leak out of a factorial moment by truncation.
pub const TRUNCATION_TAIL: f64 = 1e-10;

const SUM_TOL: f64 = 1e-12;

/// Largest derivative order ever reported as exact for a truncated family.
const MAX_TRUNCATED_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DistSpec {
    Finite {
        #[serde(with = "pmf_keys")]
        pmf: Vec<(usize, f64)>,
    },
    Geometric {
        q: f64,
        truncate: usize,
    },
}

mod pmf_keys {
    use super::*;
    use serde::de::Error as _;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(pmf: &[(usize, f64)], s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<(String, f64)> = pmf.iter().map(|&(n, p)| (n.to_string(), p)).collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<(usize, f64)>, D::Error> {
        let raw: Vec<(Value, f64)> = Vec::deserialize(d)?;
        raw.into_iter()
            .map(|(k, p)| {
                let n = match &k {
                    Value::String(s) => s.trim().parse::<usize>().map_err(D::Error::custom)?,
                    Value::Number(x) => x
                        .as_u64()
                        .ok_or_else(|| D::Error::custom(format!("bad offspring count {x}")))?
                        as usize,
                    other => return Err(D::Error::custom(format!("bad offspring count {other}"))),
                };
                Ok((n, p))
            })
            .collect()
    }
}

/// A supercritical offspring law on {1, 2, ...} stored as a finite pmf.
#[derive(Debug, Clone)]
pub struct OffspringDistribution {
    spec: DistSpec,
    /// `pmf[n]` is P(Z = n); `pmf[0]` is always zero.
    pmf: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
    max_exact_moment: usize,
}

impl OffspringDistribution {
    pub fn finite(pairs: &[(usize, f64)]) -> Result<Self> {
        let spec = DistSpec::Finite { pmf: pairs.to_vec() };
        let top = pairs.iter().map(|&(n, _)| n).max().ok_or_else(|| Error::InvalidDistribution("empty pmf".into()))?;
        let mut pmf = vec![0.0; top + 1];
        for &(n, p) in pairs {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!("P(Z={n}) = {p} is not a probability")));
            }
            pmf[n] += p;
        }
        if pmf[0] != 0.0 {
            return Err(Error::InvalidDistribution("P(Z=0) must be 0".into()));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        Self::build(spec, pmf, usize::MAX)
    }

    /// Geometric law p_n = (1-q) q^(n-1) on {1, ..., truncate}, renormalized.
    pub fn geometric(q: f64, truncate: usize) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidDistribution(format!("geometric ratio {q} outside (0,1)")));
        }
        if truncate < 2 {
            return Err(Error::InvalidDistribution("geometric truncation must be at least 2".into()));
        }
        let mut pmf = vec![0.0; truncate + 1];
        for (n, slot) in pmf.iter_mut().enumerate().skip(1) {
            *slot = (1.0 - q) * q.powi(n as i32 - 1);
        }
        let kept: f64 = pmf.iter().sum();
        for x in pmf.iter_mut() {
            *x /= kept;
        }
        let max_exact = geometric_exact_order(q, truncate);
        Self::build(DistSpec::Geometric { q, truncate }, pmf, max_exact)
    }

    /// The deterministic d-ary law, p_d = 1.
    pub fn regular(d: usize) -> Result<Self> {
        Self::finite(&[(d, 1.0)])
    }

    pub fn binary() -> Self {
        Self::regular(2).expect("binary law is valid")
    }

    pub fn from_spec(spec: &DistSpec) -> Result<Self> {
        match spec {
            DistSpec::Finite { pmf } => Self::finite(pmf),
            DistSpec::Geometric { q, truncate } => Self::geometric(*q, *truncate),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: DistSpec = serde_json::from_str(text).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
        Self::from_spec(&spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("spec serializes")
    }

    fn build(spec: DistSpec, pmf: Vec<f64>, max_exact_moment: usize) -> Result<Self> {
        let mean: f64 = pmf.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
        if !mean.is_finite() {
            return Err(Error::InvalidDistribution("infinite mean".into()));
        }
        if mean <= 1.0 {
            return Err(Error::Subcritical(mean));
        }
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Self { spec, pmf, cdf, mean, max_exact_moment })
    }

    pub fn spec(&self) -> &DistSpec {
        &self.spec
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    pub fn max_degree(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn max_exact_moment(&self) -> usize {
        self.max_exact_moment
    }

    /// Single-atom law, i.e. every vertex has the same number of children.
    pub fn regular_arity(&self) -> Option<usize> {
        let mut atoms = self.pmf.iter().enumerate().filter(|(_, &p)| p > 0.0);
        match (atoms.next(), atoms.next()) {
            (Some((d, _)), None) => Some(d),
            _ => None,
        }
    }

    fn check_order(&self, order: usize) -> Result<()> {
        if order > self.max_exact_moment {
            Err(Error::MomentUnavailable { needed: order, available: self.max_exact_moment })
        } else {
            Ok(())
        }
    }

    /// `order`-th derivative of the pgf at `z`.
    pub fn pgf(&self, order: usize, z: f64) -> Result<f64> {
        self.check_order(order)?;
        let mut total = 0.0;
        for (n, &p) in self.pmf.iter().enumerate().skip(order.max(1)) {
            if p == 0.0 {
                continue;
            }
            total += p * falling(n, order) * z.powi((n - order) as i32);
        }
        Ok(total)
    }

    /// m_r = E C(Z, r).
    pub fn factorial_moment(&self, r: usize) -> Result<f64> {
        self.check_order(r)?;
        Ok(self.pmf.iter().enumerate().skip(r).map(|(n, &p)| p * binom_f64(n, r)).sum())
    }

    pub fn critical_parameter(&self) -> f64 {
        1.0 / self.mean
    }

    /// Inverse-CDF draw: the smallest n with CDF(n) > u.
    pub fn sample(&self, u: f64) -> usize {
        let idx = self.cdf.partition_point(|&c| c <= u);
        idx.min(self.max_degree()).max(1)
    }
}

fn geometric_exact_order(q: f64, truncate: usize) -> usize {
    let mut best = 0;
    for r in 1..=MAX_TRUNCATED_ORDER {
        let mut tail = 0.0;
        let mut n = truncate + 1;
        loop {
            let term = (1.0 - q) * q.powi(n as i32 - 1) * binom_f64(n, r);
            tail += term;
            if term < 1e-30 * tail.max(1e-300) || n > truncate + 20_000 {
                break;
            }
            n += 1;
        }
        if tail < TRUNCATION_TAIL {
            best = r;
        } else {
            break;
        }
    }
    best
}

/// n (n-1) ... (n-k+1)
pub fn falling(n: usize, k: usize) -> f64 {
    (0..k).map(|i| (n - i) as f64).product()
}

pub fn binom_f64(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Exact binomial coefficient; panics on overflow, which cannot happen below n = 60.
pub fn binom_u64(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    u64::try_from(acc).expect("binomial fits in u64")
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}
