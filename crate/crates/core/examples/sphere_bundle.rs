//! Calculus on the unit sphere bundle: the commutator formulas at a point,
//! and eigenvalues of the vertical Laplacian on spherical harmonics.

use geotomo::bundlecalc::{commutator_residuals, eval, vertical_laplacian, ExprFunction};
use geotomo::geometry::MetricChart;
use geotomo::identities::{random_compact_function, random_compact_section};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> geotomo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let chart = MetricChart::sphere_cap(2, 0.6, 1.0)?;
    let u = random_compact_function(&mut rng, &chart)?;
    let z = random_compact_section(&mut rng, &chart)?;
    let x = [0.1, -0.2];
    let v = chart.normalize(&x, &[0.6, 0.8]);
    let names = [
        "[X, grad_v] = -grad_h",
        "[X, grad_h] = R grad_v",
        "div_h grad_v - div_v grad_h = (d-1) X",
        "[X, div_v] = -div_h",
        "[X, div_h] = div_v R",
    ];
    for (n, r) in names.iter().zip(commutator_residuals(&chart, &u, &z, &x, &v)?) {
        println!("{n:<40} residual {r:.2e}");
    }

    // Euclidean disk, d = 2: v1^2 - v2^2 has degree 2, eigenvalue 4
    let flat = MetricChart::euclidean(2, 1.0);
    let w = ExprFunction::parse(2, "v1^2 - v2^2")?;
    let lap = vertical_laplacian(w.clone());
    let v = [0.6, 0.8];
    println!("\nDelta(v1^2 - v2^2) / (v1^2 - v2^2) = {:.12}", eval(&flat, lap.as_ref(), &[0.0, 0.0], &v)? / eval(&flat, w.as_ref(), &[0.0, 0.0], &v)?);
    Ok(())
}
