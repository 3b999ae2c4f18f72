// Expansion martingales on one tree, and their ensemble means against r_i.
//
// cargo run --example martingale

use gwperc::annealed::expansion_coefficients;
use gwperc::expansion::{ensemble_martingale_means, expansion_martingale, predict_windowed, DEFAULT_WINDOW_DELTA};
use gwperc::gwtree::sample_tree;
use gwperc::subsetstats::subset_stats;
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let d = OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?;
    let coeffs = expansion_coefficients(&d, 3)?;
    let tree = sample_tree(&d, 12, 42)?;
    let m = expansion_martingale(&subset_stats(&tree, 12, 3, 2)?, &coeffs, 3)?;
    println!("seed 42, W_12 = {:.4}", tree.martingale_limit_estimate());
    for n in [2, 4, 8, 12] {
        println!("  n {n:>2}: M = ({:.4}, {:.4}, {:.4})", m.get(n, 1), m.get(n, 2), m.get(n, 3));
    }
    let w = predict_windowed(&m, 0.02, DEFAULT_WINDOW_DELTA);
    println!("  g(T, p_c + 0.02) ~ {:.5} (level {}{})", w.value, w.level, if w.clamped { ", clamped" } else { "" });

    println!("ensemble over 500 trees:");
    for e in ensemble_martingale_means(&d, 0, 500, &[6], 3)? {
        println!("  i {}: mean {:+.4} +- {:.4}, r_i = {:+.4}", e.i, e.mean, e.se, e.target);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
