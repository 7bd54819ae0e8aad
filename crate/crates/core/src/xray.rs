//! Geodesic ray transform, transport solutions, influx fans, ray data files
//! and the discrete forward/backprojection pair on grid fields.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesics::{geodesic_path, GeodesicPath, PhasePoint};
use crate::geometry::MetricChart;
use crate::linalg::CsrMatrix;
use crate::tensorfield::{contract, index_set, GridSpec, GridTensorField, TensorField};

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Discretization of the influx boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FanSpec {
    pub n_boundary: usize,
    pub n_directions: usize,
    /// Angular distance (radians) kept from glancing directions.
    pub margin: f64,
}

impl Default for FanSpec {
    fn default() -> Self {
        FanSpec { n_boundary: 32, n_directions: 32, margin: 1e-3 }
    }
}

impl FanSpec {
    pub fn new(n_boundary: usize, n_directions: usize, margin: f64) -> Self {
        FanSpec { n_boundary, n_directions, margin }
    }

    pub fn len(&self) -> usize {
        self.n_boundary * self.n_directions
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n` boundary points: equally spaced angles in `d = 2`, a Fibonacci
/// lattice in `d = 3`.
pub fn boundary_points(chart: &MetricChart, n: usize) -> Vec<Vec<f64>> {
    let r = chart.radius();
    (0..n)
        .map(|i| {
            if chart.dim() == 2 {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                vec![r * a.cos(), r * a.sin()]
            } else {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let s = (1.0 - z * z).max(0.0).sqrt();
                let a = GOLDEN_ANGLE * i as f64;
                vec![r * s * a.cos(), r * s * a.sin(), r * z]
            }
        })
        .collect()
}

/// g-unit outward normal at a boundary point.
pub fn outward_normal(chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
    let d = chart.dim();
    let ginv = chart.inverse_metric(x)?;
    let n: Vec<f64> = (0..d).map(|i| (0..d).map(|j| ginv[i * d + j] * x[j]).sum()).collect();
    Ok(chart.normalize(x, &n))
}

/// Boundary points times inward directions. In `d = 2` the directions make
/// angles `α_j = −A + (j + ½)·2A/n` with the inward normal, `A = π/2 − margin`;
/// in `d = 3` polar angles have `cos θ_j = 1 − (j/n)(1 − cos A)` with golden-angle
/// azimuths.
pub fn influx_fan(chart: &MetricChart, fan: &FanSpec) -> Result<Vec<PhasePoint>> {
    if fan.n_boundary == 0 || fan.n_directions == 0 {
        return Err(Error::Input("fan counts must be at least 1".into()));
    }
    if !(fan.margin > 0.0 && fan.margin < std::f64::consts::FRAC_PI_2) {
        return Err(Error::Input(format!("fan margin must lie in (0, π/2), got {}", fan.margin)));
    }
    let d = chart.dim();
    let big_a = std::f64::consts::FRAC_PI_2 - fan.margin;
    let nd = fan.n_directions as f64;
    let mut out = Vec::with_capacity(fan.len());
    for x in boundary_points(chart, fan.n_boundary) {
        let nu = outward_normal(chart, &x)?;
        let frame = chart.complement_frame(&x, &nu)?;
        for j in 0..fan.n_directions {
            let v: Vec<f64> = if d == 2 {
                let a = -big_a + (j as f64 + 0.5) * 2.0 * big_a / nd;
                (0..d).map(|i| -a.cos() * nu[i] + a.sin() * frame[0][i]).collect()
            } else {
                let ct = 1.0 - (j as f64 / nd) * (1.0 - big_a.cos());
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                let ph = GOLDEN_ANGLE * j as f64;
                (0..d).map(|i| -ct * nu[i] + st * (ph.cos() * frame[0][i] + ph.sin() * frame[1][i])).collect()
            };
            out.push(PhasePoint::unit(chart, x.clone(), v));
        }
    }
    Ok(out)
}

/// Quadrature nodes `(weight, φ_t(p))` on `[0, τ]`: composite Simpson on the
/// uniform samples (3/8 rule on the last three intervals when their count is
/// odd) plus Simpson on the final partial step with an RK4 midpoint.
pub fn path_quadrature(chart: &MetricChart, path: &GeodesicPath) -> Vec<(f64, PhasePoint)> {
    let h = path.dt;
    let k = path.points.len() - 1;
    let mut w = vec![0.0; k + 1];
    let simpson = |w: &mut [f64], a: usize, b: usize| {
        let mut i = a;
        while i + 2 <= b {
            w[i] += h / 3.0;
            w[i + 1] += 4.0 * h / 3.0;
            w[i + 2] += h / 3.0;
            i += 2;
        }
    };
    let mut out = Vec::with_capacity(k + 3);
    let mut extra = Vec::new();
    match k {
        0 => {}
        1 => {
            w[0] += h / 6.0;
            w[1] += h / 6.0;
            extra.push((4.0 * h / 6.0, path.advance(chart, 0, 0.5 * h)));
        }
        _ if k % 2 == 0 => simpson(&mut w, 0, k),
        _ => {
            simpson(&mut w, 0, k - 3);
            let c = 3.0 * h / 8.0;
            w[k - 3] += c;
            w[k - 2] += 3.0 * c;
            w[k - 1] += 3.0 * c;
            w[k] += c;
        }
    }
    let tail = path.tau - path.last_sample_time();
    if tail > 0.0 {
        w[k] += tail / 6.0;
        extra.push((4.0 * tail / 6.0, path.advance(chart, k, 0.5 * tail)));
        extra.push((tail / 6.0, path.exit.clone()));
    }
    for (wi, p) in w.into_iter().zip(&path.points) {
        out.push((wi, p.clone()));
    }
    out.extend(extra);
    out
}

fn integrate(chart: &MetricChart, f: &dyn TensorField, path: &GeodesicPath) -> Result<f64> {
    let mut acc = 0.0;
    for (w, p) in path_quadrature(chart, path) {
        let comps = f.components(chart, &p.x)?;
        acc += w * contract(&comps, f.dim(), f.order(), &p.v);
    }
    Ok(acc)
}

fn check_field(chart: &MetricChart, f: &dyn TensorField) -> Result<()> {
    if f.dim() != chart.dim() {
        return Err(Error::Input(format!("field dimension {} differs from chart dimension {}", f.dim(), chart.dim())));
    }
    Ok(())
}

/// `I_m f(x, v) = ∫_0^τ f(φ_t(x, v)) dt`.
pub fn ray_transform(chart: &MetricChart, f: &dyn TensorField, p: &PhasePoint, dt: f64) -> Result<f64> {
    check_field(chart, f)?;
    let path = geodesic_path(chart, p, dt)?;
    integrate(chart, f, &path)
}

/// The transport solution `u(x, v) = ∫_0^{τ(x,v)} f(φ_t(x, v)) dt`, which
/// satisfies `Xu = −f` with `u = 0` on the outflow boundary.
pub fn transport_solution(chart: &MetricChart, f: &dyn TensorField, p: &PhasePoint, dt: f64) -> Result<f64> {
    ray_transform(chart, f, p, dt)
}

/// Transforms of several fields over the same rays (one trace per ray).
pub fn ray_transform_many(chart: &MetricChart, fields: &[&dyn TensorField], rays: &[PhasePoint], dt: f64) -> Result<Vec<Vec<f64>>> {
    for f in fields {
        check_field(chart, *f)?;
    }
    let per_ray: Vec<Result<Vec<f64>>> = rays
        .par_iter()
        .map(|p| {
            let path = geodesic_path(chart, p, dt)?;
            fields.iter().map(|f| integrate(chart, *f, &path)).collect()
        })
        .collect();
    per_ray.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RayMetadata {
    pub metric: String,
    pub dim: usize,
    pub radius: f64,
    pub m: usize,
    pub dt: f64,
    pub fan: FanSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayRecord {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayDataSet {
    pub meta: RayMetadata,
    pub records: Vec<RayRecord>,
}

impl RayDataSet {
    /// Samples `I_m f` over the fan described by `meta`.
    pub fn synthesize(chart: &MetricChart, f: &dyn TensorField, fan: FanSpec, dt: f64) -> Result<Self> {
        let rays = influx_fan(chart, &fan)?;
        let values = ray_transform_many(chart, &[f], &rays, dt)?;
        let records = rays.into_iter().zip(values).map(|(p, v)| RayRecord { x: p.x, v: p.v, value: v[0] }).collect();
        let meta = RayMetadata { metric: chart.name().to_string(), dim: chart.dim(), radius: chart.radius(), m: f.order(), dt, fan };
        Ok(RayDataSet { meta, records })
    }

    pub fn values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.value).collect()
    }

    pub fn rays(&self) -> Vec<PhasePoint> {
        self.records.iter().map(|r| PhasePoint::new(r.x.clone(), r.v.clone())).collect()
    }

    /// Checks that every record lies on the influx boundary of `chart`.
    pub fn validate(&self, chart: &MetricChart) -> Result<()> {
        let d = chart.dim();
        if self.meta.dim != d || (self.meta.radius - chart.radius()).abs() > 1e-12 * chart.radius() {
            return Err(Error::Input("ray data was produced for a different chart".into()));
        }
        let bound = -self.meta.fan.margin.sin() * (1.0 - 1e-9);
        for (i, r) in self.records.iter().enumerate() {
            if r.x.len() != d || r.v.len() != d {
                return Err(Error::Input(format!("record {i} has wrong dimension")));
            }
            let nx = crate::geometry::norm_e(&r.x);
            if (nx - chart.radius()).abs() > 1e-10 {
                return Err(Error::Input(format!("record {i} is not on the boundary (|x| = {nx})")));
            }
            let nu = outward_normal(chart, &r.x)?;
            if chart.inner(&r.x, &r.v, &nu) >= bound {
                return Err(Error::Input(format!("record {i} is not inward within the margin")));
            }
        }
        Ok(())
    }

    /// Sidecar path for a CSV path (`data.csv` → `data.json`).
    pub fn sidecar_path(csv: &Path) -> PathBuf {
        csv.with_extension("json")
    }

    /// Writes `path` (CSV, shortest round-trip float formatting) and its JSON sidecar.
    pub fn write(&self, path: &Path) -> Result<()> {
        let (csv, sidecar) = self.to_bytes()?;
        fs::write(path, csv)?;
        fs::write(Self::sidecar_path(path), sidecar)?;
        Ok(())
    }

    /// The CSV table and JSON sidecar as bytes.
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Vec<u8>)> {
        let d = self.meta.dim;
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
        header.extend((1..=d).map(|i| format!("v{i}")));
        header.push("value".into());
        w.write_record(&header)?;
        for r in &self.records {
            let row: Vec<String> = r.x.iter().chain(&r.v).chain(std::iter::once(&r.value)).map(|v| format!("{v:?}")).collect();
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok((bytes, (serde_json::to_string_pretty(&self.meta)? + "\n").into_bytes()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta: RayMetadata = serde_json::from_slice(&fs::read(Self::sidecar_path(path))?)?;
        let d = meta.dim;
        let mut reader = csv::Reader::from_reader(fs::File::open(path)?);
        let header = reader.headers()?.clone();
        if header.len() != 2 * d + 1 {
            return Err(Error::Input(format!("expected {} columns, found {}", 2 * d + 1, header.len())));
        }
        let mut records = Vec::new();
        for (line, row) in reader.records().enumerate() {
            let row = row?;
            let vals = row
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Input(format!("row {}: bad number `{s}`", line + 1))))
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != 2 * d + 1 {
                return Err(Error::Input(format!("row {} has {} fields", line + 1, vals.len())));
            }
            records.push(RayRecord { x: vals[..d].to_vec(), v: vals[d..2 * d].to_vec(), value: vals[2 * d] });
        }
        Ok(RayDataSet { meta, records })
    }
}

/// Discrete ray transform of multilinear grid fields; row `i` integrates
/// over ray `i` with the same quadrature as [`ray_transform`].
#[derive(Debug, Clone)]
pub struct RayOperator {
    pub grid: GridSpec,
    pub m: usize,
    pub rays: Vec<PhasePoint>,
    pub matrix: CsrMatrix,
}

impl RayOperator {
    pub fn new(chart: &MetricChart, grid: GridSpec, m: usize, rays: Vec<PhasePoint>, dt: f64) -> Result<Self> {
        if grid.dim != chart.dim() {
            return Err(Error::Input("grid and chart dimensions differ".into()));
        }
        let d = grid.dim;
        let set = index_set(d, m);
        let nc = set.len();
        let ncols = grid.n_nodes() * nc;
        let rows: Vec<Result<Vec<(usize, f64)>>> = rays
            .par_iter()
            .map(|p| {
                let path = geodesic_path(chart, p, dt)?;
                let mut entries = Vec::new();
                for (w, q) in path_quadrature(chart, &path) {
                    let mono: Vec<f64> = set.list.iter().zip(&set.mult).map(|(idx, k)| k * idx.iter().map(|&i| q.v[i]).product::<f64>()).collect();
                    for (node, wn) in grid.interpolation(&q.x) {
                        if wn == 0.0 {
                            continue;
                        }
                        for (c, mc) in mono.iter().enumerate() {
                            entries.push((node * nc + c, w * wn * mc));
                        }
                    }
                }
                Ok(entries)
            })
            .collect();
        let mut matrix = CsrMatrix::new(ncols);
        for r in rows {
            matrix.push_row(&r?);
        }
        Ok(RayOperator { grid, m, rays, matrix })
    }

    pub fn forward(&self, f: &GridTensorField) -> Result<Vec<f64>> {
        if f.grid != self.grid || f.order != self.m {
            return Err(Error::Input("grid field does not match the ray operator".into()));
        }
        Ok(self.matrix.mul_vec(&f.values))
    }

    /// `Aᵀ d`: the exact transpose of [`RayOperator::forward`].
    pub fn backproject(&self, data: &RayDataSet) -> Result<GridTensorField> {
        if data.meta.m != self.m || data.meta.dim != self.grid.dim || data.records.len() != self.rays.len() {
            return Err(Error::Input("ray data does not match the ray operator".into()));
        }
        for (r, p) in data.records.iter().zip(&self.rays) {
            let close = r.x.iter().zip(&p.x).chain(r.v.iter().zip(&p.v)).all(|(a, b)| (a - b).abs() <= 1e-12);
            if !close {
                return Err(Error::Input("ray data geometry does not match the ray operator".into()));
            }
        }
        Ok(self.backproject_values(&data.values()))
    }

    pub fn backproject_values(&self, values: &[f64]) -> GridTensorField {
        GridTensorField { grid: self.grid.clone(), order: self.m, values: self.matrix.tr_mul_vec(values) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Expr;
    use crate::geodesics::exit_time;
    use crate::linalg::dot;
    use crate::tensorfield::{random_potential, DsymField, ExprTensorField};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn fan_shapes() {
        let c = MetricChart::euclidean(2, 1.0);
        let one = influx_fan(&c, &FanSpec::new(1, 1, 1e-3)).unwrap();
        assert_eq!(one.len(), 1);
        assert_relative_eq!(one[0].v[0], -1.0, epsilon = 1e-14);
        assert!(one[0].v[1].abs() < 1e-14);
        for chart in [MetricChart::euclidean(2, 1.0), MetricChart::sphere_cap(3, 0.7, 1.0).unwrap()] {
            let fan = FanSpec::new(7, 5, 0.05);
            let rays = influx_fan(&chart, &fan).unwrap();
            assert_eq!(rays.len(), 35);
            for p in &rays {
                let nu = outward_normal(&chart, &p.x).unwrap();
                assert!(chart.inner(&p.x, &p.v, &nu) < -(0.05f64).sin());
                assert!((p.speed(&chart) - 1.0).abs() < 1e-12);
            }
        }
        assert!(influx_fan(&c, &FanSpec::new(0, 1, 1e-3)).is_err());
    }

    #[test]
    fn length_and_gradient_transforms() {
        let c = MetricChart::euclidean(2, 1.0);
        let one = ExprTensorField::scalar(2, Expr::c(1.0)).unwrap();
        let p = PhasePoint::new(vec![1.0, 0.0], vec![-1.0, 0.0]);
        assert_relative_eq!(ray_transform(&c, &one, &p, 1e-3).unwrap(), 2.0, epsilon = 1e-9);
        let q = PhasePoint::unit(&c, vec![0.2, -0.3], vec![0.3, 0.7]);
        assert_relative_eq!(transport_solution(&c, &one, &q, 1e-3).unwrap(), exit_time(&c, &q).unwrap(), epsilon = 1e-9);
        let out = PhasePoint::new(vec![1.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(transport_solution(&c, &one, &out, 1e-3).unwrap(), 0.0);
        let psi = Arc::new(ExprTensorField::scalar(2, Expr::parse("(1 - x1^2 - x2^2)*exp(x1)").unwrap()).unwrap());
        let grad = DsymField::new(psi);
        for p in influx_fan(&c, &FanSpec::new(5, 5, 1e-3)).unwrap() {
            let v = ray_transform(&c, &grad, &p, 1e-3).unwrap();
            assert!(v.abs() < 1e-9, "{v} {p:?}");
        }
    }

    #[test]
    fn gauge_invariance_on_a_curved_chart() {
        let c = MetricChart::hyperbolic(2, 0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = Arc::new(random_potential(&mut rng, 2, 1, 2, 0.5).unwrap());
        let f = DsymField::new(h);
        let rays = influx_fan(&c, &FanSpec::new(6, 6, 1e-3)).unwrap();
        let vals = ray_transform_many(&c, &[&f], &rays, 1e-3 * 0.5).unwrap();
        assert!(vals.iter().all(|v| v[0].abs() < 1e-9));
    }

    #[test]
    fn simpson_converges_at_fourth_order() {
        let c = MetricChart::sphere_cap(2, 0.8, 1.0).unwrap();
        let f = ExprTensorField::parse(2, 2, &["exp(x1)", "x2", "cos(x1*x2)"]).unwrap();
        let p = influx_fan(&c, &FanSpec::new(3, 3, 0.1)).unwrap()[4].clone();
        let reference = ray_transform(&c, &f, &p, 2.5e-4).unwrap();
        let e1 = (ray_transform(&c, &f, &p, 0.04).unwrap() - reference).abs();
        let e2 = (ray_transform(&c, &f, &p, 0.02).unwrap() - reference).abs();
        assert!(e2 * 8.0 <= e1, "{e1} {e2}");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let c = MetricChart::conformal(2, 1.0, "0.1*x1").unwrap();
        let f = ExprTensorField::parse(2, 1, &["x2", "sin(x1)"]).unwrap();
        let data = RayDataSet::synthesize(&c, &f, FanSpec::new(4, 3, 1e-3), 1e-2).unwrap();
        data.validate(&c).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rays.csv");
        data.write(&path).unwrap();
        let back = RayDataSet::read(&path).unwrap();
        assert_eq!(back, data);
        assert!(RayDataSet::read(&dir.path().join("missing.csv")).is_err());
    }

    #[test]
    fn backprojection_is_the_adjoint() {
        let c = MetricChart::euclidean(2, 1.0);
        let grid = GridSpec::new(2, 1.0, 9).unwrap();
        let rays = influx_fan(&c, &FanSpec::new(6, 4, 1e-3)).unwrap();
        let op = RayOperator::new(&c, grid.clone(), 2, rays, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut f = GridTensorField::zeros(grid, 2);
        f.values.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        let d: Vec<f64> = (0..op.rays.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = dot(&op.forward(&f).unwrap(), &d);
        let rhs = dot(&f.values, &op.backproject_values(&d).values);
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        assert!(op.backproject_values(&vec![0.0; d.len()]).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matrix_rows_match_the_field_transform() {
        let c = MetricChart::euclidean(2, 1.0);
        let grid = GridSpec::new(2, 1.0, 11).unwrap();
        let f = ExprTensorField::parse(2, 1, &["x1*x2 + 1", "x2^2"]).unwrap();
        let gf = GridTensorField::sample(&c, &f, grid.clone()).unwrap();
        let rays = influx_fan(&c, &FanSpec::new(3, 3, 1e-3)).unwrap();
        let op = RayOperator::new(&c, grid, 1, rays.clone(), 0.01).unwrap();
        let a = op.forward(&gf).unwrap();
        for (p, v) in rays.iter().zip(a) {
            assert_relative_eq!(ray_transform(&c, &gf, p, 0.01).unwrap(), v, epsilon = 1e-12);
        }
    }
}
