//! Experiment configuration and the command runners behind the `geotomo`
//! binary. Every command computes its outputs in memory first and writes
//! them only after all computation succeeded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundlecalc::{SmQuadrature, SmQuadratureSpec};
use crate::expr::Expr;
use crate::geodesics::{beta_thresholds_f64, conjugate_scan, default_dt, default_max_time, exit_time_with, is_beta_conjugate_free, simplicity_probe};
use crate::geometry::{MetricChart, MetricFamily};
use crate::identities::{self, IdentityReport};
use crate::inversion::{self, InversionOptions, InversionProblem};
use crate::tensorfield::{
    helmholtz_decompose, index_set, norm_quadrature, random_field, tensor_norm, DsymField, ExprTensorField, FieldRef, GridSpec, GridTensorField,
    HelmholtzOptions,
};
use crate::xray::{influx_fan, FanSpec, RayDataSet};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub metric: MetricConfig,
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub fields: BTreeMap<String, FieldConfig>,
    #[serde(default)]
    pub fan: FanSpec,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub seed: u64,
    pub transform: Option<TransformConfig>,
    pub verify: Option<VerifyConfig>,
    pub conjugate: Option<ConjugateConfig>,
    pub invert: Option<InvertConfig>,
    pub decompose: Option<DecomposeConfig>,
    pub tau: Option<TauConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub family: String,
    #[serde(default)]
    pub params: MetricParams,
    /// Chart radius; may be omitted when `params.max_length` fixes a sphere cap.
    pub radius: Option<f64>,
    pub dim: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricParams {
    pub c: Option<f64>,
    pub lambda: Option<String>,
    pub k: Option<f64>,
    pub max_length: Option<f64>,
    pub components: Option<Vec<String>>,
}

/// Named field definitions; components follow the lexicographic order of
/// sorted index tuples (`f11, f12, f22` for a 2-tensor in 2D).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Components { order: Option<usize>, components: Vec<String> },
    /// `d^s h` for the `(m−1)`-tensor `h` with the given components.
    Potential { components: Vec<String> },
    /// Divergence-free Euclidean field of a stream function (`d = 2`, `m ∈ {1, 2}`).
    Stream { psi: String },
    /// Random polynomial field of order `m` drawn from the config seed.
    Random { degree: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadratureConfig {
    /// Geodesic integration step (default `1e-3 R`).
    pub dt: Option<f64>,
    /// Sphere-bundle rule for the integral identities.
    pub sm: Option<SmQuadratureSpec>,
    /// Nodes per axis of reconstruction grids.
    pub grid: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    #[serde(default = "default_field")]
    pub field: String,
}

fn default_field() -> String {
    "f".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Commutators,
    Pestov,
    Divfree,
    Estf,
    Structural,
    Jacobi,
    Theorem2,
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| Error::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    /// Random SM samples for the pointwise suites.
    pub samples: usize,
    /// Random functions (or sections) per integral suite.
    pub functions: usize,
    /// Also rerun the first Pestov function on the 4× refined rule and
    /// require the residual to shrink by 4.
    pub refine: bool,
    /// Field for `divfree` and `estf`; a random order-`m` field when absent.
    pub field: Option<String>,
    /// β for `jacobi`; `β⁽²⁾(d, m)` when absent.
    pub beta: Option<f64>,
    pub d_range: [usize; 2],
    pub m_range: [usize; 2],
    pub thresholds: Thresholds,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            suites: vec![Suite::Structural],
            samples: 500,
            functions: 3,
            refine: false,
            field: None,
            beta: None,
            d_range: [2, 10],
            m_range: [1, 10],
            thresholds: Thresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub commutators: f64,
    pub pestov: f64,
    pub structural: f64,
    pub divfree: f64,
    pub divergence: f64,
    pub estf: f64,
    pub jacobi: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            commutators: 1e-7,
            pestov: identities::QUADRATURE_THRESHOLD,
            structural: identities::ALGEBRAIC_THRESHOLD,
            divfree: 1e-7,
            divergence: 1e-9,
            estf: 1e-6,
            jacobi: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConjugateConfig {
    pub betas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertConfig {
    /// Ray data CSV (with its JSON sidecar); relative to the config file.
    pub data: Option<PathBuf>,
    /// Field to synthesize data from when `data` is absent.
    pub field: String,
    /// Known solenoidal part, for error reporting.
    pub truth: Option<String>,
    /// Relative Gaussian noise added to synthesized data.
    pub noise: f64,
    /// The run fails (exit 1) if the error against `truth` exceeds this.
    pub max_error: Option<f64>,
    pub options: InversionOptions,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig { data: None, field: default_field(), truth: None, noise: 0.0, max_error: None, options: InversionOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecomposeConfig {
    pub field: String,
    pub helmholtz: Option<HelmholtzOptions>,
}

impl Default for DecomposeConfig {
    fn default() -> Self {
        DecomposeConfig { field: default_field(), helmholtz: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauConfig {}

impl ExperimentConfig {
    /// Reads and validates a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(inv) = cfg.invert.as_mut() {
            if let Some(p) = inv.data.as_mut() {
                if p.is_relative() {
                    *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds every named field and the chart, so that malformed input
    /// surfaces before any computation.
    pub fn validate(&self) -> Result<()> {
        let chart = self.chart()?;
        if self.fan.n_boundary == 0 || self.fan.n_directions == 0 || !(self.fan.margin >= 0.0 && self.fan.margin < 1.5) {
            return Err(Error::Config(format!("invalid fan {:?}", self.fan)));
        }
        if self.dt(&chart).is_nan() || self.dt(&chart) <= 0.0 {
            return Err(Error::Config("quadrature.dt must be positive".into()));
        }
        for name in self.fields.keys() {
            self.field(&chart, name)?;
        }
        if let Some(v) = &self.verify {
            if v.d_range[0] > v.d_range[1] || v.m_range[0] > v.m_range[1] {
                return Err(Error::Config("verify ranges must be increasing".into()));
            }
            if let Some(f) = &v.field {
                self.require_field(f)?;
            }
        }
        if let Some(c) = &self.conjugate {
            if c.betas.iter().any(|b| !(*b >= 0.0)) {
                return Err(Error::Config("conjugate betas must be nonnegative".into()));
            }
        }
        if let Some(t) = &self.transform {
            self.require_field(&t.field)?;
        }
        if let Some(i) = &self.invert {
            if i.data.is_none() {
                self.require_field(&i.field)?;
            }
            if let Some(t) = &i.truth {
                self.require_field(t)?;
            }
            if !(i.noise >= 0.0) {
                return Err(Error::Config("invert.noise must be nonnegative".into()));
            }
        }
        if let Some(d) = &self.decompose {
            self.require_field(&d.field)?;
        }
        Ok(())
    }

    fn require_field(&self, name: &str) -> Result<()> {
        if self.fields.contains_key(name) {
            Ok(())
        } else {
            Err(Error::Config(format!("field `{name}` is not defined")))
        }
    }

    pub fn chart(&self) -> Result<MetricChart> {
        let mc = &self.metric;
        let p = &mc.params;
        let allowed: &[&str] = match mc.family.as_str() {
            "euclidean" => &[],
            "scaled" => &["c"],
            "conformal" => &["lambda"],
            "sphere_cap" => &["k", "max_length"],
            "hyperbolic" => &["k"],
            "custom" => &["components"],
            other => return Err(Error::Config(format!("unknown metric family `{other}`"))),
        };
        let given = [("c", p.c.is_some()), ("lambda", p.lambda.is_some()), ("k", p.k.is_some()), ("max_length", p.max_length.is_some()), ("components", p.components.is_some())];
        for (key, set) in given {
            if set && !allowed.contains(&key) {
                return Err(Error::Config(format!("metric family `{}` takes no parameter `{key}`", mc.family)));
            }
        }
        let d = mc.dim;
        if mc.family == "sphere_cap" {
            if let Some(len) = p.max_length {
                if mc.radius.is_some() {
                    return Err(Error::Config("give either radius or params.max_length for a sphere cap".into()));
                }
                return MetricChart::sphere_cap_with_max_length(d, len, p.k.unwrap_or(1.0));
            }
        }
        let r = mc.radius.ok_or_else(|| Error::Config("metric.radius is required".into()))?;
        let family = match mc.family.as_str() {
            "euclidean" => MetricFamily::Euclidean,
            "scaled" => MetricFamily::Scaled { c: need(p.c, "c")? },
            "conformal" => MetricFamily::Conformal { lambda: Expr::parse(&need(p.lambda.clone(), "lambda")?)? },
            "sphere_cap" => MetricFamily::SphereCap { k: p.k.unwrap_or(1.0) },
            "hyperbolic" => MetricFamily::Hyperbolic { k: p.k.unwrap_or(1.0) },
            _ => MetricFamily::Custom { components: need(p.components.clone(), "components")?.iter().map(|s| Expr::parse(s)).collect::<Result<_>>()? },
        };
        MetricChart::new(d, r, family)
    }

    pub fn dt(&self, chart: &MetricChart) -> f64 {
        self.quadrature.dt.unwrap_or_else(|| default_dt(chart))
    }

    pub fn sm_spec(&self, chart: &MetricChart) -> SmQuadratureSpec {
        self.quadrature.sm.clone().unwrap_or_else(|| SmQuadratureSpec::default_for(chart.dim()))
    }

    pub fn field(&self, chart: &MetricChart, name: &str) -> Result<FieldRef> {
        let def = self.fields.get(name).ok_or_else(|| Error::Config(format!("field `{name}` is not defined")))?;
        let d = chart.dim();
        let m = self.m;
        let parse = |comps: &[String]| comps.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>();
        let f: FieldRef = match def {
            FieldConfig::Components { order, components } => {
                let order = order.unwrap_or(m);
                check_count(name, components.len(), index_set(d, order).len())?;
                Arc::new(ExprTensorField::new(d, order, parse(components)?)?)
            }
            FieldConfig::Potential { components } => {
                if m == 0 {
                    return Err(Error::Config(format!("field `{name}`: potential fields need m >= 1")));
                }
                check_count(name, components.len(), index_set(d, m - 1).len())?;
                Arc::new(DsymField::new(Arc::new(ExprTensorField::new(d, m - 1, parse(components)?)?)))
            }
            FieldConfig::Stream { psi } => {
                if d != 2 {
                    return Err(Error::Config(format!("field `{name}`: stream fields need d = 2")));
                }
                Arc::new(ExprTensorField::stream(&Expr::parse(psi)?, m).map_err(|e| Error::Config(format!("field `{name}`: {e}")))?)
            }
            FieldConfig::Random { degree } => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
                Arc::new(random_field(&mut rng, d, m, *degree, chart.radius())?)
            }
        };
        Ok(f)
    }
}

fn need<T>(v: Option<T>, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("metric parameter `{key}` is required")))
}

fn check_count(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Config(format!("field `{name}` needs {want} components, found {got}")))
    }
}

/// FNV-1a, so that each named random field gets its own stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf29ce484222325, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Transform,
    Verify,
    Conjugate,
    Invert,
    Decompose,
    Tau,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Transform => "transform",
            Command::Verify => "verify",
            Command::Conjugate => "conjugate",
            Command::Invert => "invert",
            Command::Decompose => "decompose",
            Command::Tau => "tau",
        }
    }
}

/// Files produced by a command, not yet written.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub files: Vec<(String, Vec<u8>)>,
    /// One-line human summary.
    pub message: String,
}

impl Outcome {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }

    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

pub fn run(cmd: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let chart = cfg.chart()?;
    match cmd {
        Command::Transform => cmd_transform(cfg, &chart),
        Command::Verify => cmd_verify(cfg, &chart),
        Command::Conjugate => cmd_conjugate(cfg, &chart),
        Command::Invert => cmd_invert(cfg, &chart),
        Command::Decompose => cmd_decompose(cfg, &chart),
        Command::Tau => cmd_tau(cfg, &chart),
    }
}

#[derive(Serialize)]
struct TransformSummary<'a> {
    metric: &'a str,
    m: usize,
    field: &'a str,
    rays: usize,
    max_abs_value: f64,
    dt: f64,
}

pub fn cmd_transform(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let block = cfg.transform.clone().unwrap_or(TransformConfig { field: default_field() });
    let f = cfg.field(chart, &block.field)?;
    let data = RayDataSet::synthesize(chart, f.as_ref(), cfg.fan, cfg.dt(chart))?;
    let max_abs_value = data.records.iter().fold(0.0f64, |a, r| a.max(r.value.abs()));
    let (csv, sidecar) = data.to_bytes()?;
    let summary = TransformSummary { metric: chart.name(), m: f.order(), field: &block.field, rays: data.records.len(), max_abs_value, dt: cfg.dt(chart) };
    Ok(Outcome {
        pass: true,
        message: format!("transform: {} rays, max |value| = {max_abs_value:e}", data.records.len()),
        files: vec![("rays.csv".into(), csv), ("rays.json".into(), sidecar), ("summary.json".into(), json_bytes(&summary)?)],
    })
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum SuiteEntry {
    Identity(IdentityReport),
    Divfree(identities::DivfreeReport),
    Theorem2(identities::Theorem2Result),
    Refinement { name: String, coarse: f64, refined: f64, ratio: f64, pass: bool },
}

impl SuiteEntry {
    fn pass(&self) -> bool {
        match self {
            SuiteEntry::Identity(r) => r.pass,
            SuiteEntry::Divfree(r) => r.pass,
            SuiteEntry::Theorem2(r) => r.pass,
            SuiteEntry::Refinement { pass, .. } => *pass,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub entries: Vec<SuiteEntry>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub metric: String,
    pub dim: usize,
    pub m: usize,
    pub pass: bool,
    pub suites: Vec<SuiteReport>,
}

pub fn cmd_verify(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let v = cfg.verify.clone().unwrap_or_default();
    let mut suites = Vec::new();
    for &suite in &v.suites {
        let entries = run_suite(cfg, chart, &v, suite)?;
        let pass = entries.iter().all(SuiteEntry::pass);
        suites.push(SuiteReport { suite, pass, entries });
    }
    let pass = suites.iter().all(|s| s.pass);
    let failed: Vec<String> = suites.iter().filter(|s| !s.pass).map(|s| format!("{:?}", s.suite).to_lowercase()).collect();
    let report = VerifyReport { metric: chart.name().into(), dim: chart.dim(), m: cfg.m, pass, suites };
    let message = if pass { "verify: pass".to_string() } else { format!("verify: FAIL ({})", failed.join(", ")) };
    Ok(Outcome { pass, message, files: vec![("verify.json".into(), json_bytes(&report)?)] })
}

fn run_suite(cfg: &ExperimentConfig, chart: &MetricChart, v: &VerifyConfig, suite: Suite) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let th = &v.thresholds;
    let sm = || SmQuadrature::new(chart, &cfg.sm_spec(chart));
    let mut out = Vec::new();
    match suite {
        Suite::Commutators => {
            for i in 0..v.functions {
                let u = identities::random_compact_function(&mut rng, chart)?;
                let z = identities::random_compact_section(&mut rng, chart)?;
                out.push(SuiteEntry::Identity(identities::commutator_suite(chart, &u, &z, v.samples, cfg.seed + i as u64, th.commutators)?));
            }
        }
        Suite::Pestov => {
            let quad = sm()?;
            let mut first = None;
            for _ in 0..v.functions {
                let u = identities::random_compact_function(&mut rng, chart)?;
                let rep = identities::pestov_residual(chart, &u, &quad, th.pestov)?;
                if first.is_none() {
                    first = Some((u, rep.relative_residual.abs()));
                }
                out.push(SuiteEntry::Identity(rep));
            }
            if let (true, Some((u, coarse))) = (v.refine, first) {
                let fine = SmQuadrature::new(chart, &quad.spec.refined(chart.dim()))?;
                let refined = identities::pestov_residual(chart, &u, &fine, th.pestov)?.relative_residual.abs();
                let ratio = if refined > 0.0 { coarse / refined } else { f64::INFINITY };
                // residuals already at roundoff cannot shrink further
                let pass = ratio >= 4.0 || coarse < 1e-12;
                out.push(SuiteEntry::Refinement { name: "pestov refinement".into(), coarse, refined, ratio, pass });
            }
        }
        Suite::Structural => {
            let quad = sm()?;
            for _ in 0..v.functions {
                let u = identities::random_compact_function(&mut rng, chart)?;
                out.push(SuiteEntry::Identity(identities::structural_relation(chart, &u, cfg.m.max(1), &quad, th.structural)?));
            }
        }
        Suite::Divfree => {
            let f = suite_field(cfg, chart, v, &mut rng)?;
            out.push(SuiteEntry::Divfree(identities::divfree_identity_pointwise(chart, f, v.samples, cfg.seed, th.divergence, th.divfree)?));
        }
        Suite::Estf => {
            let quad = sm()?;
            let f = suite_field(cfg, chart, v, &mut rng)?;
            out.push(SuiteEntry::Identity(identities::estf_check(chart, f, &quad, th.estf)?));
        }
        Suite::Jacobi => {
            let quad = sm()?;
            let beta = match v.beta {
                Some(b) => b,
                None => beta_thresholds_f64(chart.dim(), cfg.m.max(1))?.1,
            };
            let cert = is_beta_conjugate_free(chart, beta, &cfg.fan, cfg.dt(chart))?;
            for _ in 0..v.functions {
                let z = identities::random_compact_section(&mut rng, chart)?;
                out.push(SuiteEntry::Identity(identities::jacobi_positivity(chart, &z, beta, Some(&cert), &quad, th.jacobi)?));
            }
        }
        Suite::Theorem2 => {
            for d in v.d_range[0]..=v.d_range[1] {
                for m in v.m_range[0]..=v.m_range[1] {
                    let grid = identities::default_gamma_grid(d, m);
                    out.push(SuiteEntry::Theorem2(identities::theorem2_scalar_minimizer(d, m, &grid)?));
                }
            }
        }
    }
    Ok(out)
}

fn suite_field(cfg: &ExperimentConfig, chart: &MetricChart, v: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<FieldRef> {
    match &v.field {
        Some(name) => cfg.field(chart, name),
        None => Ok(Arc::new(random_field(rng, chart.dim(), cfg.m, 3, chart.radius())?)),
    }
}

#[derive(Serialize)]
struct ConjugateOutput {
    metric: String,
    rays: usize,
    simplicity: crate::geodesics::SimplicityReport,
    simple: bool,
    reports: Vec<crate::geodesics::ConjugateReport>,
}

pub fn cmd_conjugate(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let betas = match &cfg.conjugate {
        Some(c) => c.betas.clone(),
        None => {
            let m = cfg.m.max(1);
            let (b1, b2) = beta_thresholds_f64(chart.dim(), m)?;
            vec![b1, b2]
        }
    };
    let dt = cfg.dt(chart);
    let rays = influx_fan(chart, &cfg.fan)?;
    let reports = conjugate_scan(chart, &betas, &rays, dt)?;
    let simplicity = simplicity_probe(chart, &cfg.fan, dt);
    let simple = simplicity.pass();
    let message = reports
        .iter()
        .map(|r| match r.t_conj {
            Some(t) if !r.free => format!("β={}: conjugate at t={t:.6}", r.beta),
            _ => format!("β={}: free", r.beta),
        })
        .collect::<Vec<_>>()
        .join("; ");
    let out = ConjugateOutput { metric: chart.name().into(), rays: rays.len(), simplicity, simple, reports };
    Ok(Outcome { pass: true, message: format!("conjugate: {message}"), files: vec![("conjugate.json".into(), json_bytes(&out)?)] })
}

#[derive(Serialize)]
struct InvertSummary {
    metric: String,
    m: usize,
    rays: usize,
    data_norm: f64,
    iterations: usize,
    converged: bool,
    alpha: f64,
    relative_misfit: f64,
    adjoint_error: f64,
    reconstruction_norm: f64,
    solenoidal_error: Option<f64>,
    pass: bool,
}

pub fn cmd_invert(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let block = cfg.invert.clone().unwrap_or_default();
    let mut options = block.options.clone();
    if let Some(n) = cfg.quadrature.grid {
        options.grid_n = n;
    }
    let data = match &block.data {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Input(format!("data file {} does not exist", path.display())));
            }
            RayDataSet::read(path)?
        }
        None => {
            let f = cfg.field(chart, &block.field)?;
            let mut d = RayDataSet::synthesize(chart, f.as_ref(), cfg.fan, cfg.dt(chart))?;
            inversion::add_noise(&mut d, block.noise, cfg.seed);
            d
        }
    };
    if data.meta.m != cfg.m {
        return Err(Error::Config(format!("data has m = {}, config has m = {}", data.meta.m, cfg.m)));
    }
    let rays = data.records.len();
    let data_norm = crate::linalg::norm2(&data.values());
    let problem = InversionProblem::new(chart, data, options)?;
    let rec = inversion::reconstruct_solenoidal(chart, &problem)?;
    let quad = norm_quadrature(chart, 1.0 / 24.0)?;
    let reconstruction_norm = tensor_norm(chart, rec.solenoidal.as_ref(), &quad)?;
    let solenoidal_error = match &block.truth {
        Some(name) => Some(inversion::relative_l2_error(chart, rec.solenoidal.clone(), cfg.field(chart, name)?, 1.0 / 24.0)?),
        None => None,
    };
    let pass = match (block.max_error, solenoidal_error) {
        (Some(max), Some(e)) => e <= max,
        _ => true,
    };
    let file = rec.to_file(chart)?;
    let mut conv = csv::Writer::from_writer(Vec::new());
    conv.write_record(["iter", "residual"])?;
    for (i, r) in rec.log.residuals.iter().enumerate() {
        conv.write_record([i.to_string(), format!("{r:e}")])?;
    }
    let conv = conv.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let summary = InvertSummary {
        metric: chart.name().into(),
        m: cfg.m,
        rays,
        data_norm,
        iterations: rec.log.iterations,
        converged: rec.log.converged,
        alpha: rec.log.alpha,
        relative_misfit: rec.log.relative_misfit,
        adjoint_error: rec.log.adjoint_error,
        reconstruction_norm,
        solenoidal_error,
        pass,
    };
    let message = match solenoidal_error {
        Some(e) => format!("invert: {} iterations, solenoidal error {e:.3e}", rec.log.iterations),
        None => format!("invert: {} iterations, |f^s| = {reconstruction_norm:.3e}", rec.log.iterations),
    };
    Ok(Outcome {
        pass,
        message,
        files: vec![
            ("reconstruction.json".into(), json_bytes(&file)?),
            ("convergence.csv".into(), conv),
            ("summary.json".into(), json_bytes(&summary)?),
        ],
    })
}

#[derive(Serialize)]
struct DecomposeOutput {
    metric: String,
    field: String,
    report: crate::tensorfield::HelmholtzReport,
    grid: GridSpec,
    /// Nodal samples of `f^s` and `d^s p`.
    solenoidal: Vec<f64>,
    potential: Vec<f64>,
}

pub fn cmd_decompose(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let block = cfg.decompose.clone().unwrap_or_default();
    let f = cfg.field(chart, &block.field)?;
    let opts = block.helmholtz.clone().unwrap_or_else(|| HelmholtzOptions::default_for(chart.dim()));
    let h = helmholtz_decompose(chart, f, &opts)?;
    let grid = GridSpec::new(chart.dim(), chart.radius(), cfg.quadrature.grid.unwrap_or(32))?;
    let grad: FieldRef = Arc::new(DsymField::new(h.potential.clone()));
    let solenoidal = GridTensorField::sample(chart, h.solenoidal.as_ref(), grid.clone())?.values;
    let potential = GridTensorField::sample(chart, grad.as_ref(), grid.clone())?.values;
    let message = format!("decompose: |f^s| = {:.6e}, |d^s p| = {:.6e}, |δf^s|/|f| = {:.3e}", h.report.solenoidal_norm, h.report.potential_norm, h.report.relative_divergence);
    let out = DecomposeOutput { metric: chart.name().into(), field: block.field, report: h.report, grid, solenoidal, potential };
    Ok(Outcome { pass: true, message, files: vec![("decompose.json".into(), json_bytes(&out)?)] })
}

pub fn cmd_tau(cfg: &ExperimentConfig, chart: &MetricChart) -> Result<Outcome> {
    let rays = influx_fan(chart, &cfg.fan)?;
    let dt = cfg.dt(chart);
    let tmax = default_max_time(chart);
    let taus: Vec<Result<f64>> = {
        use rayon::prelude::*;
        rays.par_iter().map(|p| exit_time_with(chart, p, dt, tmax)).collect()
    };
    let d = chart.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend((1..=d).map(|i| format!("v{i}")));
    header.push("tau".into());
    w.write_record(&header)?;
    let mut max_tau = 0.0f64;
    for (p, t) in rays.iter().zip(taus) {
        let t = t?;
        max_tau = max_tau.max(t);
        let row: Vec<String> = p.x.iter().chain(&p.v).chain(std::iter::once(&t)).map(|v| format!("{v:?}")).collect();
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(Outcome { pass: true, message: format!("tau: {} rays, max τ = {max_tau:.6}", rays.len()), files: vec![("tau.csv".into(), bytes)] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig> {
        let c: ExperimentConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(r#"{"metric": {"family": "euclidean", "radius": 1, "dim": 2}, "bogus": 1}"#).is_err());
        assert!(parse(r#"{"metric": {"family": "euclidean", "radius": 1, "dim": 2, "x": 0}}"#).is_err());
        assert!(parse(r#"{"metric": {"family": "euclidean", "radius": 1, "dim": 2, "params": {"k": 1}}}"#).is_err());
        assert!(parse(r#"{"metric": {"family": "torus", "radius": 1, "dim": 2}}"#).is_err());
        let ok = parse(r#"{"metric": {"family": "sphere_cap", "params": {"k": 1, "max_length": 3}, "dim": 2}}"#).unwrap();
        assert!((ok.chart().unwrap().radius() - (0.75f64).tan()).abs() < 1e-12);
    }

    #[test]
    fn fields_are_checked_up_front() {
        let base = r#"{"metric": {"family": "euclidean", "radius": 1, "dim": 2}, "m": 1, "fields": FIELDS}"#;
        let bad = [
            r#"{"f": {"kind": "components", "components": ["x1"]}}"#,
            r#"{"f": {"kind": "components", "components": ["x1 +", "1"]}}"#,
            r#"{"f": {"kind": "potential", "components": ["x1", "x2"]}}"#,
        ];
        for b in bad {
            assert!(parse(&base.replace("FIELDS", b)).is_err(), "{b}");
        }
        let good = parse(&base.replace("FIELDS", r#"{"h": {"kind": "potential", "components": ["(1 - x1^2 - x2^2)*x1"]}, "s": {"kind": "stream", "psi": "x1^2*x2"}}"#)).unwrap();
        let chart = good.chart().unwrap();
        assert_eq!(good.field(&chart, "h").unwrap().order(), 1);
        assert_eq!(good.field(&chart, "s").unwrap().components(&chart, &[0.5, 0.25]).unwrap(), vec![0.25, -0.25]);
    }

    #[test]
    fn tau_matches_chord_lengths() {
        let cfg = parse(r#"{"metric": {"family": "euclidean", "radius": 1, "dim": 2}, "fan": {"n_boundary": 4, "n_directions": 3, "margin": 0.01}}"#).unwrap();
        let out = run(Command::Tau, &cfg).unwrap();
        let text = String::from_utf8(out.files[0].1.clone()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "x1,x2,v1,v2,tau");
        for l in lines {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            // chord from x along v in the unit disk: -2 x·v
            let chord = -2.0 * (v[0] * v[2] + v[1] * v[3]);
            assert!((v[4] - chord).abs() < 1e-8, "{l}");
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("theorem2".parse::<Suite>().unwrap(), Suite::Theorem2);
        assert!("nope".parse::<Suite>().is_err());
    }
}
