// Quenched survival curves: exact finite-depth values and Monte Carlo.
//
// cargo run --example survival

use gwperc::annealed::{annealed_survival, DEFAULT_TOL};
use gwperc::gwtree::LazyTree;
use gwperc::quenched::{mc_survival, quenched_curve};
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let d = OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?;
    let n = 18;
    let grid: Vec<f64> = (0..6).map(|i| 0.6 + 0.06 * i as f64).collect();
    println!("p      annealed  seed0     seed1     seed1 MC");
    let c0 = quenched_curve(&LazyTree::new(&d, 0, n), &grid, n)?;
    let t1 = LazyTree::new(&d, 1, n);
    let c1 = quenched_curve(&t1, &grid, n)?;
    for ((&p, (_, g0)), (_, g1)) in grid.iter().zip(&c0.points).zip(&c1.points) {
        let mc = mc_survival(&t1, p, n, 20_000, 3)?;
        println!(
            "{p:.2}   {:.5}   {g0:.5}   {g1:.5}   {:.4} +- {:.4}",
            annealed_survival(&d, p, DEFAULT_TOL)?,
            mc.estimate,
            mc.se
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
