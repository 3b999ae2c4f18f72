// Sample a tree, percolate it, and round-trip it through the binary dump.
//
// cargo run --example tree_dump

use gwperc::gwtree::{sample_tree, SampledTree};
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let d = OffspringDistribution::geometric(0.5, 60)?;
    let tree = sample_tree(&d, 8, 3)?;
    let open = tree.percolate(0.7, 8);
    for n in 0..=8 {
        let reached = open[n].iter().filter(|&&o| o).count();
        println!("level {n}: {:>4} vertices, {:>4} reached at p = 0.7", tree.population(n), reached);
    }
    let mut bytes = Vec::new();
    tree.write_dump(&mut bytes)?;
    let back = SampledTree::read_dump(bytes.as_slice())?;
    let same = (0..=8).all(|n| (0..tree.population(n)).all(|i| tree.key(n, i) == back.key(n, i) && tree.uniform(n, i) == back.uniform(n, i)));
    println!("dump: {} bytes, round trip identical: {same}", bytes.len());
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
