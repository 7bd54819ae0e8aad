use std::sync::Arc;

use geotomo::geometry::MetricChart;
use geotomo::inversion::{reconstruct_solenoidal, relative_l2_error, sinjectivity_experiment, ExperimentSpec, InversionOptions, InversionProblem};
use geotomo::tensorfield::{Combination, DsymField, ExprTensorField, FieldRef, HelmholtzOptions};
use geotomo::xray::{FanSpec, RayDataSet};

#[test]
fn m2_solenoidal_plus_potential_round_trip() {
    let c = MetricChart::euclidean(2, 1.0);
    let psi = geotomo::expr::Expr::parse("x1^3*x2 - 0.5*x2^2 + 0.3*x1*x2^2").unwrap();
    let fs: FieldRef = Arc::new(ExprTensorField::stream(&psi, 2).unwrap());
    let h = ExprTensorField::parse(2, 1, &["(1 - x1^2 - x2^2)*(1 + x2)", "(1 - x1^2 - x2^2)*x1*x2"]).unwrap();
    let pot: FieldRef = Arc::new(DsymField::new(Arc::new(h)));
    let f = Combination::new(vec![(1.0, fs.clone()), (1.0, pot.clone())]).unwrap();
    let data = RayDataSet::synthesize(&c, &f, FanSpec::new(64, 64, 1e-3), 1e-2).unwrap();
    let opts = InversionOptions { certify: true, helmholtz: Some(HelmholtzOptions::polynomial(2, 8)), ..InversionOptions::default() };
    let rec = reconstruct_solenoidal(&c, &InversionProblem::new(&c, data, opts).unwrap()).unwrap();
    let err = relative_l2_error(&c, rec.solenoidal.clone(), fs, 1.0 / 24.0).unwrap();
    assert!(err < 0.1, "{err}");
    let cert = rec.certificates.unwrap();
    assert!(cert.simple && cert.conjugate.unwrap().free);
}

#[test]
fn noise_degrades_gracefully_and_certificate_is_attached() {
    let c = MetricChart::euclidean(2, 1.0);
    let base = ExperimentSpec { m: 1, trials: 3, potential_trial: false, seed: 21, ..ExperimentSpec::default() };
    let clean = sinjectivity_experiment(&c, &base).unwrap();
    let noisy = sinjectivity_experiment(&c, &ExperimentSpec { noise: 0.01, ..base.clone() }).unwrap();
    assert!(clean.median_error < 0.1);
    // the added error stays within a few times the noise level
    assert!(noisy.median_error < clean.median_error + 5.0 * 0.01, "{} vs {}", noisy.median_error, clean.median_error);
    assert!(clean.certificates.conjugate.as_ref().unwrap().free);
    assert_eq!(clean.trials.len(), 3);
}
