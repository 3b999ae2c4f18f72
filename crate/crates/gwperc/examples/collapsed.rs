// Collapsed trees: the collapsing map, the derivative expansion, and a
// Monte Carlo check of the derivative identity.
//
// cargo run --example collapsed

use gwperc::collapsed::{collapse, derivative_expansion, merge_terms, verify_derivative_identity, CollapsedTree, Monomial, OrderedTree};
use gwperc::gwtree::LazyTree;
use gwperc::quenched::default_depth;
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let t: OrderedTree = "(((()(()))()))".parse()?;
    let (v, w) = collapse(&t);
    println!("{t} collapses to {v} with edge weights {w:?}");

    let v1 = CollapsedTree::single_edge();
    let f1 = Monomial::new(&v1, vec![1])?;
    let raw = derivative_expansion(&v1, &f1)?;
    println!("d/dp of E<T_p, {v1}, {f1}>: {} raw terms, merged:", raw.len());
    for term in merge_terms(&raw) {
        println!("  {:+} x E<T_p, {}, {}>", term.coeff, term.tree, term.mono);
    }

    let d = OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?;
    let p = 0.75;
    let n = default_depth(&d, p)?;
    let tree = LazyTree::new(&d, 1, n);
    let r = verify_derivative_identity(&tree, &v1, &f1, p, 0.01, n, 50_000, 2)?;
    println!(
        "seed 1, p {p}: finite difference {:.3} +- {:.3}, expansion {:.3} +- {:.3}",
        r.finite_difference, r.finite_difference_se, r.expansion, r.expansion_se
    );
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
