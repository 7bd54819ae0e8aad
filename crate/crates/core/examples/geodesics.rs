//! Geodesic flow on the built-in charts: exit times of a diameter, the
//! simplicity probe, and a flowed phase point.

use geotomo::geodesics::{default_dt, exit_time, flow, simplicity_probe, PhasePoint};
use geotomo::geometry::MetricChart;
use geotomo::xray::FanSpec;

fn main() -> geotomo::Result<()> {
    let charts = [
        MetricChart::euclidean(2, 1.0),
        MetricChart::scaled(2, 1.0, 2.0)?,
        MetricChart::conformal(2, 1.0, "0.2*x1 - 0.1*x2^2")?,
        MetricChart::sphere_cap(2, 0.6, 1.0)?,
        MetricChart::hyperbolic(2, 0.8, 1.0)?,
        MetricChart::sphere_cap(3, 0.5, 1.0)?,
    ];
    println!("{:<12} {:>3} {:>10} {:>8}", "metric", "d", "tau(diam)", "simple");
    for c in &charts {
        let d = c.dim();
        let mut x = vec![0.0; d];
        x[0] = c.radius();
        let mut w = vec![0.0; d];
        w[0] = -1.0;
        let p = PhasePoint::unit(c, x, w);
        let tau = exit_time(c, &p)?;
        let probe = simplicity_probe(c, &FanSpec::new(12, 12, 1e-3), default_dt(c));
        println!("{:<12} {:>3} {:>10.6} {:>8}", c.name(), d, tau, probe.pass());
    }

    let c = &charts[3];
    let p = PhasePoint::unit(c, vec![0.1, -0.2], vec![1.0, 0.5]);
    let q = flow(c, &p, 0.3, default_dt(c))?;
    println!("\nsphere cap: flow for t = 0.3 from {:?}\n  x = {:?}\n  v = {:?}  (|v|_g = {:.12})", p.x, q.x, q.v, q.speed(c));
    Ok(())
}
