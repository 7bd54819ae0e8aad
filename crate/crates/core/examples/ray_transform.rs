//! Geodesic ray transform of tensor fields: synthesize fan data, check the
//! gauge invariance `I_m(d^s h) = 0`, and write CSV with a JSON sidecar.

use std::sync::Arc;

use geotomo::geometry::MetricChart;
use geotomo::tensorfield::{DsymField, ExprTensorField};
use geotomo::xray::{FanSpec, RayDataSet};

fn main() -> geotomo::Result<()> {
    let chart = MetricChart::conformal(2, 1.0, "0.2*x1 - 0.1*x2^2")?;
    let fan = FanSpec::new(32, 32, 1e-3);

    let f = ExprTensorField::parse(2, 2, &["1 + x1*x2", "sin(x1)", "exp(-x2^2)"])?;
    let data = RayDataSet::synthesize(&chart, &f, fan, 1e-2)?;
    let vals = data.values();
    let rms = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
    println!("I_2 f over {} rays: rms {rms:.6}", vals.len());

    let h = ExprTensorField::parse(2, 1, &["(1 - x1^2 - x2^2)*exp(x1)", "(1 - x1^2 - x2^2)*x1*x2"])?;
    let grad = DsymField::new(Arc::new(h));
    let gauge = RayDataSet::synthesize(&chart, &grad, fan, 1e-2)?;
    let max = gauge.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    println!("I_2 d^s h: max |value| {max:.3e}");

    let dir = std::env::temp_dir().join("geotomo-ray-transform");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("rays.csv");
    data.write(&path)?;
    let back = RayDataSet::read(&path)?;
    println!("wrote {} and read back {} records (bit-exact: {})", path.display(), back.records.len(), back == data);
    Ok(())
}
