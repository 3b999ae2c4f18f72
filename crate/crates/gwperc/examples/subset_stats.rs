// Subset statistics of a sampled tree, checked against brute force, and
// their Doob decomposition.
//
// cargo run --example subset_stats

use gwperc::gwtree::sample_tree;
use gwperc::subsetstats::{brute_force_subset_stats, doob_decomposition, doob_identity_residual, subset_stats};
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let d = OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?;
    let tree = sample_tree(&d, 5, 7)?;
    let dp = subset_stats(&tree, 5, 3, 2)?;
    let bf = brute_force_subset_stats(&tree, 5, 3, 2)?;
    println!("Z_n = {:?}", (0..=5).map(|n| tree.population(n)).collect::<Vec<_>>());
    println!("n  j  k  X (DP)        X (enumeration)");
    for n in [1, 3, 5] {
        for j in 1..=3 {
            for k in 0..=2 {
                println!("{n}  {j}  {k}  {:<13.6} {:.6}", dp.get(n, j, k), bf.get(n, j, k));
            }
        }
    }
    let parts = doob_decomposition(&dp, &d)?;
    println!("X = Y + sum dA, worst relative residual {:.2e}", doob_identity_residual(&dp, &parts));
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
