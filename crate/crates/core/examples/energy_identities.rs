//! Integral identities on SM for a compactly supported function: the Pestov
//! identity, the structural relation between its rearrangements, and the
//! expansion of the mixed norm.

use geotomo::bundlecalc::{SmQuadrature, SmQuadratureSpec};
use geotomo::geometry::MetricChart;
use geotomo::identities::{energy_terms, ineq10_expansion, pestov_residual, random_compact_function, structural_relation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> geotomo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let chart = MetricChart::conformal(2, 1.0, "0.2*x1 - 0.1*x2^2")?;
    let quad = SmQuadrature::new(&chart, &SmQuadratureSpec::default_for(2))?;
    println!("quadrature: {} phase points", quad.len());
    let u = random_compact_function(&mut rng, &chart)?;

    let t = energy_terms(&chart, &u, &quad)?;
    println!("|X grad_v u|^2 = {:.8}\n|grad_v X u|^2 = {:.8}\n(R grad_v u, grad_v u) = {:.8}\n|Xu|^2 = {:.8}", t.x_vgrad, t.vgrad_x, t.curvature, t.x_norm);
    let p = pestov_residual(&chart, &u, &quad, 1e-3)?;
    println!("Pestov: relative residual {:.2e} (pass {})", p.relative_residual, p.pass);
    let s = structural_relation(&chart, &u, 2, &quad, 1e-12)?;
    println!("r4 + r7 + r8 (m = 2): relative {:.2e} (pass {})", s.relative_residual, s.pass);
    let e = ineq10_expansion(&chart, &u, 0.5, &quad, 1e-10)?;
    println!("mixed norm, gamma = 1/2: direct {:.8}, expansion {:.8}", e.term("direct").unwrap(), e.term("expansion").unwrap());
    Ok(())
}
