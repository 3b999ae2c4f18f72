//! Command-line front end. Data goes to stdout or `--out`, diagnostics to
//! stderr. Exit codes: 0 success, 1 failed suite or runtime error, 2 bad input.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::annealed::{critical_slope, expansion_coefficients};
use crate::collapsed::{
    derivative_expansion, mc_monomial_expectation, merge_terms, verify_derivative_identities, CollapsedTree, Monomial,
    MonomialEstimate, Term,
};
use crate::error::{Error, Result};
use crate::expansion::{expansion_martingale, first_step_mean, predictable_part, verify_constants_identity, ensemble_martingale_means};
use crate::gwtree::{sample_tree, LazyTree};
use crate::offspring::OffspringDistribution;
use crate::quenched::{default_depth, mc_survival, russo_check, survival_multi, DEFAULT_FD_STEP};
use crate::subsetstats::{doob_decomposition, doob_identity_residual, subset_stats, subset_stats_regular, SubsetStatTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const THREADS_ENV: &str = "GWPERC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "gwperc", version, about = "Percolation on Galton-Watson trees")]
struct Cli {
    /// Write data here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; falls back to GWPERC_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug)]
struct DistArg {
    /// Offspring distribution JSON file.
    #[arg(long)]
    dist: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Annealed expansion coefficients at p_c (JSON).
    Coeffs {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, default_value_t = 3)]
        order: usize,
    },
    /// Subset statistics with their Doob decomposition (CSV).
    Stats {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        jmax: usize,
        #[arg(long, default_value_t = 3)]
        kmax: usize,
    },
    /// Expansion martingales level by level (CSV).
    Martingale {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        depth: usize,
        #[arg(long, default_value_t = 3)]
        order: usize,
    },
    /// Quenched survival to a fixed level over a p grid (CSV).
    Survival {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        depth: usize,
        /// "start:stop:step", a comma list, or one value.
        #[arg(long)]
        p: String,
        /// Monte Carlo replicates per grid point.
        #[arg(long)]
        mc: Option<u64>,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
    },
    /// Finite difference of g_n against p^{-1} E|B_p| (JSON).
    Russo {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the A_p depth rule.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        h: f64,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
    },
    /// Monomial expectation on a collapsed tree and its derivative terms (JSON).
    Collapsed {
        #[command(flatten)]
        dist: DistArg,
        /// Collapsed tree as nested parentheses.
        #[arg(long)]
        v: String,
        /// Exponents in preorder edge order, comma separated.
        #[arg(long, default_value = "")]
        f: String,
        #[arg(long)]
        p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
    },
    /// Run a property suite; exits 1 if any check fails (CSV).
    Verify {
        #[command(flatten)]
        dist: DistArg,
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, default_value_t = 0.75)]
        p: f64,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        reps: Option<u64>,
        #[arg(long, default_value_t = 0)]
        mc_seed: u64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Suite {
    Constants,
    Martingale,
    Expansion,
    Russo,
    Collapsed,
}

/// Parse `argv` (program name first) and run; returns the exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => match s.trim().parse::<usize>() {
                Ok(t) => Some(t),
                Err(_) => {
                    let _ = writeln!(stderr, "error: {THREADS_ENV}={s:?} is not a thread count");
                    return EXIT_USAGE;
                }
            },
            Err(_) => None,
        },
    };
    let result = match threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| execute(&cli.cmd)),
            Err(e) => Err(Error::InvalidInput(format!("thread pool: {e}"))),
        },
        None => execute(&cli.cmd),
    };
    match result {
        Ok(outcome) => {
            let written = match &cli.out {
                Some(path) => std::fs::write(path, &outcome.data),
                None => stdout.write_all(outcome.data.as_bytes()),
            };
            if let Err(e) = written {
                let _ = writeln!(stderr, "error: {e}");
                return EXIT_FAILURE;
            }
            if outcome.failed {
                let _ = writeln!(stderr, "suite failed");
                EXIT_FAILURE
            } else {
                EXIT_OK
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidDistribution(_)
        | Error::InvalidInput(_)
        | Error::Subcritical(_)
        | Error::MomentUnavailable { .. }
        | Error::CapOverflow { .. }
        | Error::Io(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

struct Outcome {
    data: String,
    failed: bool,
}

impl Outcome {
    fn data(data: String) -> Self {
        Self { data, failed: false }
    }
}

fn load(path: &Path) -> Result<OffspringDistribution> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    OffspringDistribution::from_json(&text)
}

fn json<T: Serialize>(x: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(x).map_err(|e| Error::InvalidInput(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Inclusive grid from "a:b:step", "a,b,c" or "a".
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad number {t:?} in grid")));
    let grid = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::InvalidInput(format!("grid {spec:?} is not start:stop:step")));
        }
        let (a, b, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
        if !(step > 0.0) || b < a {
            return Err(Error::InvalidInput(format!("grid {spec:?} is empty")));
        }
        let count = ((b - a) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| a + i as f64 * step).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty p grid".into()));
    }
    if let Some(bad) = grid.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::InvalidInput(format!("grid value {bad} outside (0, 1]")));
    }
    Ok(grid)
}

fn stats_table(dist: &OffspringDistribution, seed: u64, depth: usize, j: usize, k: usize) -> Result<SubsetStatTable> {
    match dist.regular_arity() {
        Some(d) => Ok(subset_stats_regular(d, depth, j, k)),
        None => subset_stats(&sample_tree(dist, depth, seed)?, depth, j, k),
    }
}

fn resolve_depth(dist: &OffspringDistribution, p: f64, depth: Option<usize>) -> Result<usize> {
    match depth {
        Some(n) => Ok(n),
        None => default_depth(dist, p),
    }
}

#[derive(Serialize)]
struct CoeffsOut {
    p_c: f64,
    #[serde(rename = "K")]
    k: f64,
    r: Vec<f64>,
    powers: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct CollapsedOut {
    tree: String,
    monomial: String,
    p: f64,
    depth: usize,
    #[serde(flatten)]
    estimate: MonomialEstimate,
    derivative_terms: Vec<Term>,
}

fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Coeffs { dist, order } => {
            let d = load(&dist.dist)?;
            let c = expansion_coefficients(&d, *order)?;
            let out = CoeffsOut {
                p_c: c.p_c,
                k: critical_slope(&d)?,
                r: (1..=*order).map(|j| c.r(j)).collect(),
                powers: c.powers.clone(),
            };
            Ok(Outcome::data(json(&out)?))
        }
        Command::Stats { dist, seed, depth, jmax, kmax } => {
            let d = load(&dist.dist)?;
            if *jmax == 0 {
                return Err(Error::InvalidInput("jmax must be at least 1".into()));
            }
            let stats = stats_table(&d, *seed, *depth, *jmax, *kmax)?;
            let parts = doob_decomposition(&stats, &d)?;
            let mut s = String::from("n,j,k,X,Y,deltaA\n");
            for n in 0..=stats.n_max() {
                for j in 1..=*jmax {
                    for k in 0..=*kmax {
                        let _ = writeln!(s, "{n},{j},{k},{},{},{}", stats.get(n, j, k), parts.y[n].get(j, k), parts.delta_a[n].get(j, k));
                    }
                }
            }
            Ok(Outcome::data(s))
        }
        Command::Martingale { dist, seed, depth, order } => {
            let d = load(&dist.dist)?;
            if *order == 0 {
                return Err(Error::InvalidInput("order must be at least 1".into()));
            }
            let coeffs = expansion_coefficients(&d, *order)?;
            let stats = stats_table(&d, *seed, *depth, *order, order - 1)?;
            let m = expansion_martingale(&stats, &coeffs, *order)?;
            let mut s = String::from("n,i,M\n");
            for n in 0..=m.n_max() {
                for i in 1..=*order {
                    let _ = writeln!(s, "{n},{i},{}", m.get(n, i));
                }
            }
            Ok(Outcome::data(s))
        }
        Command::Survival { dist, seed, depth, p, mc, mc_seed } => {
            let d = load(&dist.dist)?;
            let grid = parse_grid(p)?;
            let tree = LazyTree::new(&d, *seed, *depth);
            let exact = survival_multi(&tree, &grid, *depth);
            let mut s = String::from("p,g_exact,g_mc,se\n");
            for (&q, g) in grid.iter().zip(exact) {
                match mc {
                    Some(reps) => {
                        let e = mc_survival(&tree, q, *depth, *reps, *mc_seed)?;
                        let _ = writeln!(s, "{q},{g},{},{}", e.estimate, e.se);
                    }
                    None => {
                        let _ = writeln!(s, "{q},{g},,");
                    }
                }
            }
            Ok(Outcome::data(s))
        }
        Command::Russo { dist, seed, depth, p, h, reps, mc_seed } => {
            let d = load(&dist.dist)?;
            let n = resolve_depth(&d, *p, *depth)?;
            let tree = LazyTree::new(&d, *seed, n);
            let r = russo_check(&tree, *p, n, *h, *reps, *mc_seed)?;
            Ok(Outcome::data(json(&r)?))
        }
        Command::Collapsed { dist, v, f, p, seed, depth, reps, mc_seed } => {
            let d = load(&dist.dist)?;
            let v: CollapsedTree = v.parse()?;
            let f = Monomial::parse(&v, f)?;
            let n = resolve_depth(&d, *p, *depth)?;
            let tree = LazyTree::new(&d, *seed, n);
            let estimate = mc_monomial_expectation(&tree, &v, &f, *p, n, *reps, *mc_seed)?;
            let derivative_terms = if v.edge_count() > 0 { merge_terms(&derivative_expansion(&v, &f)?) } else { Vec::new() };
            let out = CollapsedOut { tree: v.to_string(), monomial: f.to_string(), p: *p, depth: n, estimate, derivative_terms };
            Ok(Outcome::data(json(&out)?))
        }
        Command::Verify { dist, suite, order, seed, depth, p, h, reps, mc_seed } => {
            let d = load(&dist.dist)?;
            let checks = run_suite(&d, *suite, *order, *seed, *depth, *p, *h, *reps, *mc_seed)?;
            let mut s = String::from("suite,check,value,tolerance,pass\n");
            let name = format!("{suite:?}").to_lowercase();
            for c in &checks {
                let _ = writeln!(s, "{name},{},{},{},{}", c.name, c.value, c.tolerance, c.pass);
            }
            Ok(Outcome { data: s, failed: checks.iter().any(|c| !c.pass) })
        }
    }
}

struct Check {
    name: String,
    value: f64,
    tolerance: f64,
    pass: bool,
}

impl Check {
    fn below(name: String, value: f64, tolerance: f64) -> Self {
        Self { name, value, tolerance, pass: value.is_finite() && value.abs() < tolerance }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_suite(
    d: &OffspringDistribution,
    suite: Suite,
    order: usize,
    seed: u64,
    depth: Option<usize>,
    p: f64,
    h: Option<f64>,
    reps: Option<u64>,
    mc_seed: u64,
) -> Result<Vec<Check>> {
    if order == 0 {
        return Err(Error::InvalidInput("order must be at least 1".into()));
    }
    let mut checks = Vec::new();
    match suite {
        Suite::Constants => {
            for i in 1..=order {
                checks.push(Check::below(format!("constants_identity_i{i}"), verify_constants_identity(d, i)?, 1e-9));
            }
        }
        Suite::Martingale => {
            let n = depth.unwrap_or(10);
            let stats = stats_table(d, seed, n, order, order)?;
            let parts = doob_decomposition(&stats, d)?;
            checks.push(Check::below("doob_identity".into(), doob_identity_residual(&stats, &parts), 1e-10));
            let count = reps.unwrap_or(2000) as usize;
            for m in ensemble_martingale_means(d, seed, count, &[n], order)? {
                let z = (m.mean - m.target) / m.se.max(f64::MIN_POSITIVE);
                let ok = m.se == 0.0 && (m.mean - m.target).abs() < 1e-9 * m.target.abs().max(1.0);
                checks.push(Check {
                    name: format!("mean_M{}_n{}_sigmas", m.i, m.n),
                    value: if m.se == 0.0 { 0.0 } else { z },
                    tolerance: 3.0,
                    pass: ok || z.abs() <= 3.0,
                });
            }
        }
        Suite::Expansion => {
            let coeffs = expansion_coefficients(d, order)?;
            let consts = crate::annealed::composition_constants(d, order)?;
            for (i, m) in first_step_mean(&coeffs, &consts, order)?.into_iter().enumerate() {
                let r = coeffs.r(i + 1);
                checks.push(Check::below(format!("first_step_mean_i{}", i + 1), (m - r) / r.abs().max(1.0), 1e-9));
            }
            let n = depth.unwrap_or(10);
            let stats = stats_table(d, seed, n, order, order - 1)?;
            let mut worst: f64 = 0.0;
            for level in 0..=n {
                let mart = crate::expansion::martingale_from_grid(&stats.x[level], &coeffs, order)?;
                let scale = mart.iter().fold(1.0f64, |a, x| a.max(x.abs()));
                for x in predictable_part(&stats.x[level], &coeffs, &consts, order)? {
                    worst = worst.max(x.abs() / scale);
                }
            }
            checks.push(Check::below("predictable_part".into(), worst, 1e-9));
        }
        Suite::Russo => {
            let n = resolve_depth(d, p, depth)?;
            let tree = LazyTree::new(d, seed, n);
            let r = russo_check(&tree, p, n, h.unwrap_or(DEFAULT_FD_STEP), reps.unwrap_or(100_000), mc_seed)?;
            checks.push(Check {
                name: "russo_sigmas".into(),
                value: (r.fd_derivative - r.russo_estimate) / r.se,
                tolerance: 3.0,
                pass: r.pass,
            });
        }
        Suite::Collapsed => {
            let n = resolve_depth(d, p, depth)?;
            let tree = LazyTree::new(d, seed, n);
            let cases = vec![
                (CollapsedTree::single_edge(), Monomial::new(&CollapsedTree::single_edge(), vec![1])?),
                (CollapsedTree::cherry(), Monomial::zero(&CollapsedTree::cherry())),
            ];
            let reports = verify_derivative_identities(&tree, &cases, p, h.unwrap_or(0.01), n, reps.unwrap_or(100_000), mc_seed)?;
            for r in reports {
                checks.push(Check {
                    name: format!("derivative_{}_{}", r.tree, r.monomial.replace(',', ";")),
                    value: (r.finite_difference - r.expansion).abs(),
                    tolerance: 3.0 * r.combined_se + r.discretization,
                    pass: r.pass,
                });
            }
        }
    }
    Ok(checks)
}
