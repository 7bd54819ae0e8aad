//! Solenoidal/potential decomposition `f = f^s + d^s p` with `p = 0` on the
//! boundary, for a field with a known decomposition.

use std::sync::Arc;

use geotomo::expr::Expr;
use geotomo::geometry::MetricChart;
use geotomo::inversion::relative_l2_error;
use geotomo::tensorfield::{helmholtz_decompose, Combination, DsymField, ExprTensorField, FieldRef, HelmholtzOptions};

fn main() -> geotomo::Result<()> {
    let chart = MetricChart::euclidean(2, 1.0);
    let psi = Expr::parse("x1^3*x2 - x2^2")?;
    let fs: FieldRef = Arc::new(ExprTensorField::stream(&psi, 2)?);
    let h = ExprTensorField::parse(2, 1, &["(1 - x1^2 - x2^2)*x2", "(1 - x1^2 - x2^2)*(1 + x1)"])?;
    let f: FieldRef = Arc::new(Combination::new(vec![(1.0, fs.clone()), (1.0, Arc::new(DsymField::new(Arc::new(h))) as FieldRef)])?);

    for (label, opts) in [("polynomial basis", HelmholtzOptions::polynomial(2, 6)), ("B-spline basis", HelmholtzOptions::default_for(2))] {
        let res = helmholtz_decompose(&chart, f.clone(), &opts)?;
        let err = relative_l2_error(&chart, res.solenoidal.clone(), fs.clone(), 1.0 / 24.0)?;
        let r = &res.report;
        println!(
            "{label}: {} unknowns, {} iterations, |f^s| = {:.6}, |d^s p| = {:.6}, |div f^s|/|f| = {:.2e}, error vs known f^s = {err:.2e}",
            r.unknowns, r.iterations, r.solenoidal_norm, r.potential_norm, r.relative_divergence
        );
    }

    let sphere = MetricChart::sphere_cap(2, 0.6, 1.0)?;
    let g: FieldRef = Arc::new(ExprTensorField::parse(2, 1, &["1 + x2", "x1*x2"])?);
    let res = helmholtz_decompose(&sphere, g, &HelmholtzOptions::polynomial(2, 8))?;
    println!("sphere cap, m = 1: |div f^s|/|f| = {:.2e}", res.report.relative_divergence);
    Ok(())
}
