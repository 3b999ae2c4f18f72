// Annealed survival near criticality and its expansion coefficients.
//
// cargo run --example coeffs

use gwperc::annealed::{annealed_survival, critical_slope, expansion_coefficients, single_child_prob, DEFAULT_TOL};
use gwperc::{OffspringDistribution, Result};

pub fn run() -> Result<()> {
    let laws = [
        ("binary", OffspringDistribution::binary()),
        ("geometric q=1/2", OffspringDistribution::geometric(0.5, 60)?),
        ("p1=p3=1/2", OffspringDistribution::finite(&[(1, 0.5), (3, 0.5)])?),
    ];
    for (name, d) in &laws {
        let c = expansion_coefficients(d, 3)?;
        let r: Vec<f64> = (1..=3).map(|j| c.r(j)).collect();
        println!("{name}: p_c = {:.6}, K = {:.6}, r = {r:.4?}", c.p_c, critical_slope(d)?);
        for eps in [0.04, 0.02, 0.01] {
            let p = c.p_c + eps;
            let g = annealed_survival(d, p, DEFAULT_TOL)?;
            println!(
                "  eps {eps:<5} g {g:.8}  series {:.8}  A_p {:.6}",
                c.evaluate(eps),
                single_child_prob(d, p)?
            );
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<()> {
    run()
}
