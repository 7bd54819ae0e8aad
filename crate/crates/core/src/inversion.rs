//! Regularized least-squares reconstruction of the solenoidal part of a
//! tensor field from geodesic ray data.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::expr::Expr;
use crate::geodesics::{beta_thresholds_f64, is_beta_conjugate_free, simplicity_probe, ConjugateReport, SimplicityReport};
use crate::geometry::{LocalGeometry, MetricChart, MetricFamily};
use crate::jet::{self, Jet};
use crate::linalg::{self, dot, norm2, CsrMatrix, SolveLog};
use crate::tensorfield::{
    divergence_jets, helmholtz_decompose, index_set, norm_quadrature, random_field, random_polynomial, random_potential, tensor_norm,
    Combination, DsymField, ExprTensorField, FieldRef, GridSpec, GridTensorField, HelmholtzOptions, HelmholtzReport,
};
use crate::xray::{FanSpec, RayDataSet, RayOperator};
use crate::{Error, Result};

/// Tolerance of the dot-product test run before every solve.
pub const ADJOINT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionOptions {
    /// Nodes per axis of the reconstruction grid.
    pub grid_n: usize,
    /// Fixed regularization weight; `None` uses `alpha_factor · λ_max(AᵀA)`.
    pub alpha: Option<f64>,
    pub alpha_factor: f64,
    pub power_steps: usize,
    /// Relative normal-equation residual at which the solve stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Per-ray data level treated as quadrature noise: the solve also stops
    /// once the residual drops below `tol · data_floor · sqrt(λ_max · rays)`.
    pub data_floor: f64,
    /// Projection used to report the solenoidal part (`m >= 1`).
    pub helmholtz: Option<HelmholtzOptions>,
    /// Run the simplicity probe and the conjugate-point scan at `β⁽²⁾`.
    pub certify: bool,
}

impl Default for InversionOptions {
    fn default() -> Self {
        InversionOptions { grid_n: 32, alpha: None, alpha_factor: 1e-3, power_steps: 20, tol: 1e-6, max_iter: 3000, data_floor: 1e-6, helmholtz: None, certify: true }
    }
}

#[derive(Debug, Clone)]
pub struct InversionProblem {
    pub data: RayDataSet,
    pub grid: GridSpec,
    pub options: InversionOptions,
}

impl InversionProblem {
    pub fn new(chart: &MetricChart, data: RayDataSet, options: InversionOptions) -> Result<Self> {
        data.validate(chart)?;
        if data.meta.metric != chart.name() {
            return Err(Error::Input(format!("ray data was produced on `{}`, not `{}`", data.meta.metric, chart.name())));
        }
        if data.records.is_empty() {
            return Err(Error::Input("ray data set is empty".into()));
        }
        if !(options.tol > 0.0) || options.max_iter == 0 {
            return Err(Error::Config("inversion needs tol > 0 and max_iter > 0".into()));
        }
        if !(options.data_floor >= 0.0) {
            return Err(Error::Config("data_floor must be nonnegative".into()));
        }
        if options.alpha.is_some_and(|a| !(a >= 0.0)) || !(options.alpha_factor >= 0.0) {
            return Err(Error::Config("regularization weight must be nonnegative".into()));
        }
        let grid = GridSpec::new(chart.dim(), chart.radius(), options.grid_n)?;
        Ok(InversionProblem { data, grid, options })
    }

    pub fn m(&self) -> usize {
        self.data.meta.m
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Certificates {
    pub simplicity: SimplicityReport,
    pub simple: bool,
    /// Scan at `β⁽²⁾(d, m)`; absent for `m = 0`.
    pub conjugate: Option<ConjugateReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionLog {
    pub alpha: f64,
    pub lambda_max: f64,
    pub adjoint_error: f64,
    pub iterations: usize,
    pub converged: bool,
    pub residuals: Vec<f64>,
    /// `‖A f − data‖ / ‖data‖` for the raw grid solution.
    pub relative_misfit: f64,
}

impl InversionLog {
    /// `iter,residual` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "residual"])?;
        for (i, r) in self.residuals.iter().enumerate() {
            w.write_record([i.to_string(), format!("{r:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub struct Reconstruction {
    /// Minimizer over grid fields, before projection.
    pub raw: GridTensorField,
    /// `f̂ = f^s` (equal to `raw` for `m = 0`).
    pub solenoidal: FieldRef,
    pub helmholtz: Option<HelmholtzReport>,
    pub log: InversionLog,
    pub certificates: Option<Certificates>,
}

/// Serialized form: grid spec plus nodal component arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub metric: String,
    pub grid: GridSpec,
    pub order: usize,
    pub raw: Vec<f64>,
    /// Nodal samples of the solenoidal part.
    pub solenoidal: Vec<f64>,
    pub helmholtz: Option<HelmholtzReport>,
    pub log: InversionLog,
    pub certificates: Option<Certificates>,
}

impl Reconstruction {
    pub fn to_file(&self, chart: &MetricChart) -> Result<ReconstructionFile> {
        let sampled = GridTensorField::sample(chart, self.solenoidal.as_ref(), self.raw.grid.clone())?;
        Ok(ReconstructionFile {
            metric: chart.name().to_string(),
            grid: self.raw.grid.clone(),
            order: self.raw.order,
            raw: self.raw.values.clone(),
            solenoidal: sampled.values,
            helmholtz: self.helmholtz.clone(),
            log: self.log.clone(),
            certificates: self.certificates.clone(),
        })
    }

    /// Writes `reconstruction.json` and `convergence.csv` into `dir`.
    pub fn write(&self, chart: &MetricChart, dir: &Path) -> Result<()> {
        let file = self.to_file(chart)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("reconstruction.json"), serde_json::to_string_pretty(&file)?)?;
        self.log.write_csv(&dir.join("convergence.csv"))
    }
}

/// Discretized `δ` (or the gradient for `m = 0`) of the multilinear grid
/// field at the centers of cells inside the chart, each row weighted by
/// the square root of the cell volume so that `|D f|²` approximates the
/// `L²` norm.
pub fn divergence_operator(chart: &MetricChart, grid: &GridSpec, m: usize) -> Result<CsrMatrix> {
    let d = grid.dim;
    let nc = index_set(d, m).len();
    let h = grid.spacing();
    let ncell = grid.n - 1;
    let cells: Vec<Vec<usize>> = (0..ncell.pow(d as u32))
        .map(|flat| {
            let mut rem = flat;
            (0..d)
                .map(|_| {
                    let i = rem % ncell;
                    rem /= ncell;
                    i
                })
                .collect()
        })
        .collect();
    let rows: Vec<Result<Vec<Vec<(usize, f64)>>>> = cells
        .par_iter()
        .map(|cell| {
            let xc: Vec<f64> = cell.iter().map(|&i| -grid.radius + (i as f64 + 0.5) * h).collect();
            if crate::geometry::norm_e(&xc) >= chart.radius() {
                return Ok(Vec::new());
            }
            let geo = LocalGeometry::new(chart, &xc, d, 1)?;
            let s = jet::space(d);
            let xs: Vec<Jet> = (0..d).map(|i| Jet::variable(s, 1, i, xc[i])).collect();
            let weights = grid.interpolation_jets(&xs);
            let scale = (h.powi(d as i32) * geo.sqrt_det).sqrt();
            let nout = if m == 0 { d } else { index_set(d, m - 1).len() };
            let mut out = vec![Vec::new(); nout];
            for (node, w) in &weights {
                for c in 0..nc {
                    let col = node * nc + c;
                    let image: Vec<f64> = if m == 0 {
                        (0..d).map(|j| w.partial(j)).collect()
                    } else {
                        let mut f = vec![Jet::constant(s, 1, 0.0); nc];
                        f[c] = w.clone();
                        divergence_jets(d, m, &f, &geo.gamma, &geo.ginv, 0).iter().map(Jet::value).collect()
                    };
                    for (row, v) in out.iter_mut().zip(image) {
                        if v != 0.0 {
                            row.push((col, scale * v));
                        }
                    }
                }
            }
            Ok(out)
        })
        .collect();
    let mut matrix = CsrMatrix::new(grid.n_nodes() * nc);
    for r in rows {
        for row in r? {
            matrix.push_row(&row);
        }
    }
    Ok(matrix)
}

/// Relative dot-product defect `|⟨Ax, y⟩ − ⟨x, Aᵀy⟩| / (|Ax||y| + |x||Aᵀy|)`
/// on seeded random vectors.
pub fn adjoint_defect(a: &CsrMatrix, nrows: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..a.ncols).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..nrows).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ax = a.mul_vec(&x);
    let aty = a.tr_mul_vec(&y);
    let scale = norm2(&ax) * norm2(&y) + norm2(&x) * norm2(&aty);
    if scale == 0.0 {
        0.0
    } else {
        (dot(&ax, &y) - dot(&x, &aty)).abs() / scale
    }
}

pub fn certify(chart: &MetricChart, m: usize, fan: &FanSpec, dt: f64) -> Result<Certificates> {
    let simplicity = simplicity_probe(chart, fan, dt);
    let conjugate = if m == 0 {
        None
    } else {
        let (_, b2) = beta_thresholds_f64(chart.dim(), m)?;
        Some(is_beta_conjugate_free(chart, b2, fan, dt)?)
    };
    let simple = simplicity.pass();
    Ok(Certificates { simplicity, simple, conjugate })
}

/// Minimizes `|A f − data|² + α|D f|²` over grid fields by conjugate
/// residuals on the normal equations, then projects onto solenoidal fields.
pub fn reconstruct_solenoidal(chart: &MetricChart, problem: &InversionProblem) -> Result<Reconstruction> {
    let opts = &problem.options;
    let m = problem.m();
    let meta = &problem.data.meta;
    let certificates = if opts.certify { Some(certify(chart, m, &meta.fan, meta.dt)?) } else { None };

    let op = RayOperator::new(chart, problem.grid.clone(), m, problem.data.rays(), meta.dt)?;
    let reg = divergence_operator(chart, &problem.grid, m)?;
    let adjoint_error = adjoint_defect(&op.matrix, op.rays.len(), 17).max(adjoint_defect(&reg, reg.nrows, 18));
    if adjoint_error > ADJOINT_TOLERANCE {
        return Err(Error::Consistency(format!("discrete adjoint defect {adjoint_error:e} exceeds {ADJOINT_TOLERANCE:e}")));
    }

    let n = op.matrix.ncols;
    let gram = |v: &[f64]| op.matrix.tr_mul_vec(&op.matrix.mul_vec(v));
    let lambda_max = linalg::power_iteration(&gram, n, opts.power_steps);
    let alpha = opts.alpha.unwrap_or(opts.alpha_factor * lambda_max);
    let normal = |v: &[f64]| {
        let mut out = gram(v);
        if alpha > 0.0 {
            let r = reg.tr_mul_vec(&reg.mul_vec(v));
            out.iter_mut().zip(r).for_each(|(o, ri)| *o += alpha * ri);
        }
        out
    };
    let data = problem.data.values();
    let b = op.matrix.tr_mul_vec(&data);
    let floor = opts.data_floor * (lambda_max * data.len() as f64).sqrt();
    let bn = norm2(&b);
    let tol = if bn > 0.0 { opts.tol * (floor / bn).max(1.0) } else { opts.tol };
    let (x, solve) = linalg::conjugate_residual(&normal, &b, tol, opts.max_iter);
    check_monotone(&solve)?;
    linalg::require_converged(&solve)?;

    let misfit: Vec<f64> = op.matrix.mul_vec(&x).iter().zip(&data).map(|(a, b)| a - b).collect();
    let dn = norm2(&data);
    let log = InversionLog {
        alpha,
        lambda_max,
        adjoint_error,
        iterations: solve.iterations,
        converged: solve.converged,
        relative_misfit: if dn > 0.0 { norm2(&misfit) / dn } else { norm2(&misfit) },
        residuals: solve.residuals,
    };
    let raw = GridTensorField { grid: problem.grid.clone(), order: m, values: x };
    let raw_ref: FieldRef = Arc::new(raw.clone());
    let (solenoidal, helmholtz) = if m == 0 {
        (raw_ref, None)
    } else {
        let hopts = opts.helmholtz.clone().unwrap_or_else(|| HelmholtzOptions::default_for(chart.dim()));
        let h = helmholtz_decompose(chart, raw_ref, &hopts)?;
        (h.solenoidal, Some(h.report))
    };
    Ok(Reconstruction { raw, solenoidal, helmholtz, log, certificates })
}

fn check_monotone(log: &SolveLog) -> Result<()> {
    for w in log.residuals.windows(2) {
        if w[1] > w[0] * (1.0 + 1e-12) {
            return Err(Error::Solver { iterations: log.iterations, residual: w[1], history: log.residuals.clone() });
        }
    }
    Ok(())
}

/// `‖a − b‖ / ‖b‖` over the chart (`‖a‖` if `b = 0`).
pub fn relative_l2_error(chart: &MetricChart, a: FieldRef, b: FieldRef, spacing: f64) -> Result<f64> {
    let quad = norm_quadrature(chart, spacing)?;
    let nb = tensor_norm(chart, b.as_ref(), &quad)?;
    let diff = Combination::difference(a, b)?;
    let nd = tensor_norm(chart, &diff, &quad)?;
    Ok(if nb > 0.0 { nd / nb } else { nd })
}

/// Adds Gaussian noise with standard deviation `level · rms(data)`.
pub fn add_noise(data: &mut RayDataSet, level: f64, seed: u64) {
    if level <= 0.0 || data.records.is_empty() {
        return;
    }
    let rms = (data.records.iter().map(|r| r.value * r.value).sum::<f64>() / data.records.len() as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in &mut data.records {
        let z: f64 = rng.sample(StandardNormal);
        r.value += level * rms * z;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub m: usize,
    pub trials: usize,
    /// Relative noise level on the data.
    pub noise: f64,
    pub fan: FanSpec,
    pub dt: f64,
    /// Polynomial degree of the random ingredients.
    pub degree: usize,
    /// Append one trial whose input is purely potential.
    pub potential_trial: bool,
    pub seed: u64,
    pub options: InversionOptions,
    /// Cell size of the rule used for the error norms.
    pub error_spacing: f64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            m: 1,
            trials: 5,
            noise: 0.0,
            fan: FanSpec::new(64, 64, 1e-3),
            dt: 1e-2,
            degree: 3,
            potential_trial: true,
            seed: 0,
            options: InversionOptions { certify: false, ..InversionOptions::default() },
            error_spacing: 1.0 / 24.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub potential_only: bool,
    pub solenoidal_norm: f64,
    pub potential_norm: f64,
    /// `‖f̂ − f^s‖ / ‖f^s‖`; for potential-only trials `‖f̂‖ / ‖d^s h‖`.
    pub solenoidal_error: f64,
    pub data_norm: f64,
    pub iterations: usize,
    pub relative_misfit: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub metric: String,
    pub spec: ExperimentSpec,
    pub certificates: Certificates,
    pub trials: Vec<TrialRecord>,
    /// Median solenoidal error over the trials with a solenoidal part.
    pub median_error: f64,
    pub max_error: f64,
    /// Largest reconstruction-to-input ratio over potential-only trials.
    pub potential_suppression: Option<f64>,
}

/// A field with a known decomposition `f^s + d^s h`, `h = 0` on the boundary.
pub struct KnownField {
    pub field: FieldRef,
    pub solenoidal: FieldRef,
    pub potential: FieldRef,
}

/// Random field with known solenoidal part. On the flat disk the solenoidal
/// part comes from a stream function; elsewhere it is the polynomial-basis
/// Helmholtz projection of a random polynomial field.
pub fn random_known_field<R: Rng>(rng: &mut R, chart: &MetricChart, m: usize, degree: usize, potential_only: bool) -> Result<KnownField> {
    let (d, r) = (chart.dim(), chart.radius());
    if m == 0 {
        let e = random_polynomial(rng, d, degree, r);
        let f: FieldRef = Arc::new(ExprTensorField::scalar(d, e)?);
        let zero: FieldRef = Arc::new(ExprTensorField::scalar(d, Expr::c(0.0))?);
        return Ok(KnownField { field: f.clone(), solenoidal: f, potential: zero });
    }
    let h = random_potential(rng, d, m - 1, degree, r)?;
    let potential: FieldRef = Arc::new(DsymField::new(Arc::new(h)));
    let zero: FieldRef = Arc::new(ExprTensorField::new(d, m, vec![Expr::c(0.0); index_set(d, m).len()])?);
    let solenoidal: FieldRef = if potential_only {
        zero
    } else if d == 2 && m <= 2 && matches!(chart.family(), MetricFamily::Euclidean) {
        Arc::new(ExprTensorField::stream(&random_polynomial(rng, d, degree + m, r), m)?)
    } else {
        let f: FieldRef = Arc::new(random_field(rng, d, m, degree, r)?);
        helmholtz_decompose(chart, f, &HelmholtzOptions::polynomial(d, degree + 4))?.solenoidal
    };
    let field: FieldRef = Arc::new(Combination::new(vec![(1.0, solenoidal.clone()), (1.0, potential.clone())])?);
    Ok(KnownField { field, solenoidal, potential })
}

/// Round trips of random fields through synthesis, optional noise and
/// reconstruction, with the conjugate-point certificate at `β⁽²⁾` attached.
pub fn sinjectivity_experiment(chart: &MetricChart, spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let certificates = certify(chart, spec.m, &spec.fan, spec.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut kinds = vec![false; spec.trials];
    if spec.potential_trial && spec.m > 0 {
        kinds.push(true);
    }
    let mut trials = Vec::with_capacity(kinds.len());
    for (i, &potential_only) in kinds.iter().enumerate() {
        let known = random_known_field(&mut rng, chart, spec.m, spec.degree, potential_only)?;
        let mut data = RayDataSet::synthesize(chart, known.field.as_ref(), spec.fan, spec.dt)?;
        add_noise(&mut data, spec.noise, spec.seed.wrapping_add(1000 + i as u64));
        let data_norm = norm2(&data.values());
        let problem = InversionProblem::new(chart, data, spec.options.clone())?;
        let rec = reconstruct_solenoidal(chart, &problem)?;
        let quad = norm_quadrature(chart, spec.error_spacing)?;
        let solenoidal_norm = tensor_norm(chart, known.solenoidal.as_ref(), &quad)?;
        let potential_norm = tensor_norm(chart, known.potential.as_ref(), &quad)?;
        let solenoidal_error = if potential_only {
            tensor_norm(chart, rec.solenoidal.as_ref(), &quad)? / potential_norm
        } else {
            relative_l2_error(chart, rec.solenoidal.clone(), known.solenoidal.clone(), spec.error_spacing)?
        };
        trials.push(TrialRecord {
            trial: i,
            potential_only,
            solenoidal_norm,
            potential_norm,
            solenoidal_error,
            data_norm,
            iterations: rec.log.iterations,
            relative_misfit: rec.log.relative_misfit,
        });
    }
    let mut errs: Vec<f64> = trials.iter().filter(|t| !t.potential_only).map(|t| t.solenoidal_error).collect();
    errs.sort_by(f64::total_cmp);
    let median_error = median(&errs);
    let max_error = errs.last().copied().unwrap_or(f64::NAN);
    let potential_suppression = trials.iter().filter(|t| t.potential_only).map(|t| t.solenoidal_error).reduce(f64::max);
    Ok(ExperimentReport { metric: chart.name().to_string(), spec: spec.clone(), certificates, trials, median_error, max_error, potential_suppression })
}

fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfield::TensorField;
    use crate::xray::RayDataSet;

    fn small_fan() -> FanSpec {
        FanSpec::new(24, 24, 1e-3)
    }

    fn quick() -> InversionOptions {
        InversionOptions { grid_n: 12, certify: false, helmholtz: Some(HelmholtzOptions::polynomial(2, 6)), ..InversionOptions::default() }
    }

    #[test]
    fn divergence_operator_matches_continuous_divergence_of_linear_fields() {
        // a multilinear interpolant reproduces bilinear fields exactly
        let c = MetricChart::euclidean(2, 1.0);
        let grid = GridSpec::new(2, 1.0, 9).unwrap();
        let f = ExprTensorField::parse(2, 1, &["x1*x2 + 2*x1", "3*x2 - x1"]).unwrap();
        // nodal values straight from the formula, also outside the disk
        let mut gf = GridTensorField::zeros(grid.clone(), 1);
        for k in 0..grid.n_nodes() {
            let v = f.components(&c, &grid.node(k)).unwrap();
            gf.values[2 * k..2 * k + 2].copy_from_slice(&v);
        }
        let d = divergence_operator(&c, &grid, 1).unwrap();
        let h = grid.spacing();
        let vals = d.mul_vec(&gf.values);
        let mut k = 0;
        for j in 0..8 {
            for i in 0..8 {
                let x = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
                if x[0].hypot(x[1]) >= 1.0 {
                    continue;
                }
                let exact = (x[1] + 2.0 + 3.0) * h;
                assert!((vals[k] - exact).abs() < 1e-12, "{} {}", vals[k], exact);
                k += 1;
            }
        }
        assert_eq!(k, vals.len());
        assert!(adjoint_defect(&d, d.nrows, 3) < 1e-14);
    }

    #[test]
    fn zero_data_gives_zero_field() {
        let c = MetricChart::euclidean(2, 1.0);
        let zero = ExprTensorField::parse(2, 1, &["0", "0"]).unwrap();
        let data = RayDataSet::synthesize(&c, &zero, small_fan(), 2e-2).unwrap();
        let p = InversionProblem::new(&c, data, quick()).unwrap();
        let rec = reconstruct_solenoidal(&c, &p).unwrap();
        assert!(rec.raw.values.iter().all(|v| *v == 0.0));
        assert_eq!(rec.log.iterations, 0);
    }

    #[test]
    fn residual_log_is_monotone_and_metadata_is_checked() {
        let c = MetricChart::euclidean(2, 1.0);
        let f = ExprTensorField::parse(2, 0, &["exp(-4*(x1^2 + x2^2))"]).unwrap();
        let data = RayDataSet::synthesize(&c, &f, small_fan(), 2e-2).unwrap();
        let other = MetricChart::sphere_cap(2, 1.0, 0.5).unwrap();
        assert!(InversionProblem::new(&other, data.clone(), quick()).is_err());
        let p = InversionProblem::new(&c, data, quick()).unwrap();
        let rec = reconstruct_solenoidal(&c, &p).unwrap();
        assert!(rec.log.converged);
        assert!(rec.log.residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        assert!(rec.log.adjoint_error < ADJOINT_TOLERANCE);
        let dir = tempfile::tempdir().unwrap();
        rec.write(&c, dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
        assert!(text.starts_with("iter,residual\n0,"));
        let file: ReconstructionFile = serde_json::from_slice(&fs::read(dir.path().join("reconstruction.json")).unwrap()).unwrap();
        assert_eq!(file.raw.len(), 144);
    }

    #[test]
    fn noise_is_seeded() {
        let c = MetricChart::euclidean(2, 1.0);
        let f = ExprTensorField::parse(2, 0, &["1"]).unwrap();
        let mut a = RayDataSet::synthesize(&c, &f, FanSpec::new(4, 4, 1e-3), 2e-2).unwrap();
        let mut b = a.clone();
        add_noise(&mut a, 0.01, 5);
        add_noise(&mut b, 0.01, 5);
        assert_eq!(a.values(), b.values());
    }
}
