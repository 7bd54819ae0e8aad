//! β-conjugate points: the thresholds β⁽¹⁾ ≥ β⁽²⁾ and the first conjugate
//! times on a constant-curvature cap, where they equal π/√(βK).

use geotomo::geodesics::{beta_thresholds, conjugate_scan, first_conjugate_times, PhasePoint};
use geotomo::geometry::MetricChart;
use geotomo::xray::{influx_fan, FanSpec};

fn main() -> geotomo::Result<()> {
    println!("{:>3} {:>3} {:>10} {:>10}", "d", "m", "beta1", "beta2");
    for (d, m) in [(2, 1), (2, 2), (2, 3), (3, 2), (3, 4)] {
        let (b1, b2) = beta_thresholds(d, m)?;
        println!("{d:>3} {m:>3} {:>10} {:>10}", b1.to_string(), b2.to_string());
    }

    let cap = MetricChart::sphere_cap_with_max_length(2, 3.0, 1.0)?;
    let r = cap.radius();
    let p = PhasePoint::unit(&cap, vec![r, 0.0], vec![-1.0, 0.0]);
    let betas = [0.0, 1.0, 1.5, 1.6, 2.0];
    println!("\nsphere cap, longest geodesic 3.0:");
    for (b, t) in betas.iter().zip(first_conjugate_times(&cap, &p, &betas, 1e-3)?) {
        match t {
            Some(t) => println!("  beta = {b}: t = {t:.6} (pi/sqrt(beta) = {:.6})", std::f64::consts::PI / b.sqrt()),
            None => println!("  beta = {b}: free"),
        }
    }

    let hyp = MetricChart::hyperbolic(2, 0.8, 1.0)?;
    let rays = influx_fan(&hyp, &FanSpec::new(16, 16, 1e-3))?;
    for rep in conjugate_scan(&hyp, &[2.0, 10.0], &rays, 1e-3)? {
        println!("hyperbolic, beta = {}: free = {} over {} rays", rep.beta, rep.free, rep.n_rays);
    }
    Ok(())
}
