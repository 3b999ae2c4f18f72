// Derivative of quenched survival through the branching depth.
//
// cargo run --example russo

use gwperc::gwtree::LazyTree;
use gwperc::quenched::russo_check;
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let d = OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?;
    let n = 20;
    let tree = LazyTree::new(&d, 5, n);
    for p in [0.65, 0.75, 0.85] {
        let r = russo_check(&tree, p, n, 1e-3, 20_000, 1)?;
        println!(
            "p {p}: finite difference {:.4}, p^-1 E|B| = {:.4} +- {:.4}  ({})",
            r.fd_derivative,
            r.russo_estimate,
            r.se,
            if r.pass { "agree" } else { "disagree" }
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
