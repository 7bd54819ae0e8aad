//! Quadrature checks of the energy identities on the sphere bundle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundlecalc::{
    curvature, eval, hgrad, vgrad, x_scalar, x_section, ExprFunction, FunctionCombination, SectionCombination, SectionRef,
    SmQuadrature, SmQuadratureSpec, SmRef, TensorFunction,
};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geodesics::{beta_thresholds_f64, ConjugateReport};
use crate::geometry::MetricChart;
use crate::jet::Jet;
use crate::tensorfield::{boundary_weight, degree_decompose, DivergenceField, FieldRef, TensorField};

/// Default pass threshold for quadrature identities.
pub const QUADRATURE_THRESHOLD: f64 = 1e-3;
/// Default pass threshold for relations that hold term by term.
pub const ALGEBRAIC_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub name: String,
    pub terms: Vec<Term>,
    pub residual: f64,
    /// `|residual|` over the largest `|term|` (zero when every term vanishes).
    pub relative_residual: f64,
    pub quadrature: Option<SmQuadratureSpec>,
    pub threshold: f64,
    pub pass: bool,
}

impl IdentityReport {
    fn new(name: &str, terms: Vec<(&str, f64)>, residual: f64, quadrature: Option<&SmQuadratureSpec>, threshold: f64) -> Self {
        let scale = terms.iter().fold(0.0f64, |a, t| a.max(t.1.abs()));
        let relative_residual = if scale > 0.0 { residual.abs() / scale } else { residual.abs() };
        IdentityReport {
            name: name.to_string(),
            terms: terms.into_iter().map(|(n, v)| Term { name: n.to_string(), value: v }).collect(),
            residual,
            relative_residual,
            quadrature: quadrature.cloned(),
            threshold,
            pass: relative_residual < threshold,
        }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }
}

/// The cutoff `((R² − |x|²)/R²)³`: it and its first two derivatives vanish on ∂M.
pub fn cutoff(chart: &MetricChart) -> Expr {
    boundary_weight(chart.dim(), chart.radius(), 3)
}

/// `cutoff · u` as a function on SM.
pub fn compactly_supported(chart: &MetricChart, u: Expr) -> Result<SmRef> {
    ExprFunction::new(chart.dim(), cutoff(chart) * u)
}

/// Checks that `u` and its first derivatives vanish on ∂(SM) by sampling
/// boundary points and directions.
pub fn check_compact_support(chart: &MetricChart, u: &dyn crate::bundlecalc::SmFunction) -> Result<()> {
    let d = chart.dim();
    let r = chart.radius();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut interior = 0.0f64;
    for _ in 0..32 {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5 * r..0.5 * r)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = chart.normalize(&x, &w);
        interior = interior.max(eval(chart, u, &x, &v)?.abs());
    }
    let tol = 1e-10 * interior.max(1.0);
    for (x, v) in boundary_samples(chart, &mut rng) {
        let pt = crate::bundlecalc::SmPoint::new(chart, &x, &v, u.need(1))?;
        let j = u.jet(&pt, 1);
        let worst = (0..2 * d).map(|i| j.partial(i).abs()).fold(j.value().abs(), f64::max);
        if worst > tol {
            return Err(Error::Precondition(format!(
                "function is not compactly supported: |u| or |∂u| = {worst:e} at boundary point {x:?}"
            )));
        }
    }
    Ok(())
}

fn boundary_samples(chart: &MetricChart, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = chart.dim();
    let mut out = Vec::new();
    for _ in 0..64 {
        let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        x.iter_mut().for_each(|a| *a *= chart.radius() / n);
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = chart.normalize(&x, &w);
        out.push((x, v));
    }
    out
}

/// The five squared norms and pairings entering the energy identities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTerms {
    /// `‖∇_v X u‖²`
    pub vgrad_x: f64,
    /// `‖X ∇_v u‖²`
    pub x_vgrad: f64,
    /// `(R ∇_v u, ∇_v u)`
    pub curvature: f64,
    /// `‖X u‖²`
    pub x_norm: f64,
    /// `‖∇_h u‖²`
    pub hgrad: f64,
}

pub fn energy_terms(chart: &MetricChart, u: &SmRef, quad: &SmQuadrature) -> Result<EnergyTerms> {
    let xu = x_scalar(u.clone());
    let vu = vgrad(u.clone());
    let a = vgrad(xu.clone());
    let b = x_section(vu.clone());
    let c = curvature(vu.clone());
    let h = hgrad(u.clone());
    let need = [a.need(0), b.need(0), c.need(0), h.need(0), xu.need(0)].into_iter().max().unwrap();
    let vals = |z: &SectionRef, pt: &crate::bundlecalc::SmPoint| z.jets(pt, 0).iter().map(Jet::value).collect::<Vec<f64>>();
    let r = quad.integrate(chart, need, 5, &|pt| {
        let (av, bv, cv, vv, hv) = (vals(&a, pt), vals(&b, pt), vals(&c, pt), vals(&vu, pt), vals(&h, pt));
        let x = xu.jet(pt, 0).value();
        vec![pt.inner(&av, &av), pt.inner(&bv, &bv), pt.inner(&cv, &vv), x * x, pt.inner(&hv, &hv)]
    })?;
    Ok(EnergyTerms { vgrad_x: r[0], x_vgrad: r[1], curvature: r[2], x_norm: r[3], hgrad: r[4] })
}

impl EnergyTerms {
    fn named(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("|grad_v X u|^2", self.vgrad_x),
            ("|X grad_v u|^2", self.x_vgrad),
            ("(R grad_v u, grad_v u)", self.curvature),
            ("|X u|^2", self.x_norm),
            ("|grad_h u|^2", self.hgrad),
        ]
    }

    /// `‖∇_vXu‖² − ‖X∇_vu‖² + (R∇_vu,∇_vu) − (d−1)‖Xu‖²`.
    pub fn r4(&self, d: usize) -> f64 {
        self.vgrad_x - self.x_vgrad + self.curvature - (d as f64 - 1.0) * self.x_norm
    }

    /// `‖X∇_vu‖² − ‖∇_vXu‖² − ‖∇_hu‖² − 2m‖Xu‖²`.
    pub fn r7(&self, m: usize) -> f64 {
        self.x_vgrad - self.vgrad_x - self.hgrad - 2.0 * m as f64 * self.x_norm
    }

    /// `‖∇_hu‖² + (d−1+2m)‖Xu‖² − (R∇_vu,∇_vu)`.
    pub fn r8(&self, d: usize, m: usize) -> f64 {
        self.hgrad + (d as f64 - 1.0 + 2.0 * m as f64) * self.x_norm - self.curvature
    }
}

/// Residual of the Pestov identity for a function supported in the interior.
pub fn pestov_residual(chart: &MetricChart, u: &SmRef, quad: &SmQuadrature, threshold: f64) -> Result<IdentityReport> {
    check_compact_support(chart, u.as_ref())?;
    let t = energy_terms(chart, u, quad)?;
    let mut terms = t.named();
    terms.pop();
    Ok(IdentityReport::new("pestov", terms, t.r4(chart.dim()), Some(&quad.spec), threshold))
}

/// `r4 + r7 + r8`, which vanishes identically in the computed terms.
pub fn structural_relation(chart: &MetricChart, u: &SmRef, m: usize, quad: &SmQuadrature, threshold: f64) -> Result<IdentityReport> {
    let t = energy_terms(chart, u, quad)?;
    let d = chart.dim();
    let (r4, r7, r8) = (t.r4(d), t.r7(m), t.r8(d, m));
    let mut terms = t.named();
    terms.extend([("r4", r4), ("r7", r7), ("r8", r8)]);
    Ok(IdentityReport::new("structural", terms, r4 + r7 + r8, Some(&quad.spec), threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivfreeReport {
    pub samples: usize,
    pub max_divergence: f64,
    pub max_residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

/// Random interior points of SM, at most `0.95 R` from the center.
pub fn random_sm_samples(chart: &MetricChart, n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let d = chart.dim();
    let r = chart.radius();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
        if x.iter().map(|a| a * a).sum::<f64>().sqrt() >= 0.95 * r {
            continue;
        }
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if w.iter().map(|a| a * a).sum::<f64>() < 1e-6 {
            continue;
        }
        let v = chart.normalize(&x, &w);
        out.push((x, v));
    }
    out
}

/// Max over random samples of `|div_h ∇_v f + m X f|` for a divergence-free
/// field. Fails with a precondition error if `max |δf| ≥ divergence_tol`.
pub fn divfree_identity_pointwise(
    chart: &MetricChart,
    f: FieldRef,
    samples: usize,
    seed: u64,
    divergence_tol: f64,
    threshold: f64,
) -> Result<DivfreeReport> {
    let m = f.order();
    let pts = random_sm_samples(chart, samples, seed);
    let mut max_div = 0.0f64;
    if m > 0 {
        let div = DivergenceField::new(f.clone())?;
        for (x, _) in &pts {
            let c = div.components(chart, x)?;
            max_div = c.iter().fold(max_div, |a, b| a.max(b.abs()));
        }
        if max_div >= divergence_tol {
            return Err(Error::Precondition(format!("field is not divergence-free: max |δf| = {max_div:e}")));
        }
    }
    let u = TensorFunction::new(f);
    let expr = FunctionCombination::new(vec![(1.0, crate::bundlecalc::hdiv(vgrad(u.clone()))), (m as f64, x_scalar(u))]);
    let mut max_res = 0.0f64;
    for (x, v) in &pts {
        max_res = max_res.max(eval(chart, expr.as_ref(), x, v)?.abs());
    }
    Ok(DivfreeReport { samples, max_divergence: max_div, max_residual: max_res, threshold, pass: max_res < threshold })
}

/// `‖∇_v f‖²` against `Σ_k (m−2k)(m−2k+d−2)‖f_{m−2k}‖²` and the bound
/// `m(m+d−2)‖f‖²`. Passes when the two sides agree to `threshold` and the
/// bound holds.
pub fn estf_check(chart: &MetricChart, f: FieldRef, quad: &SmQuadrature, threshold: f64) -> Result<IdentityReport> {
    let d = chart.dim();
    let m = f.order();
    let u = TensorFunction::new(f.clone());
    let vu = vgrad(u.clone());
    let pieces: Vec<SmRef> = degree_decompose(f).into_iter().map(TensorFunction::new).collect();
    let need = pieces.iter().map(|p| p.need(0)).chain([vu.need(0), u.need(0)]).max().unwrap();
    let n = pieces.len();
    let r = quad.integrate(chart, need, 2 + n, &|pt| {
        let z: Vec<f64> = vu.jets(pt, 0).iter().map(Jet::value).collect();
        let fv = u.jet(pt, 0).value();
        let mut out = vec![pt.inner(&z, &z), fv * fv];
        for p in &pieces {
            let a = p.jet(pt, 0).value();
            out.push(a * a);
        }
        out
    })?;
    let grad = r[0];
    let norm = r[1];
    let mut sum = 0.0;
    for k in 0..n {
        let l = (m - 2 * k) as f64;
        sum += l * (l + d as f64 - 2.0) * r[2 + k];
    }
    let bound = (m * (m + d - 2)) as f64 * norm;
    let mut rep = IdentityReport::new(
        "estf",
        vec![("|grad_v f|^2", grad), ("eigenvalue sum", sum), ("bound", bound), ("|f|^2", norm)],
        grad - sum,
        Some(&quad.spec),
        threshold,
    );
    rep.pass &= grad <= bound * (1.0 + 1e-9) + 1e-14;
    Ok(rep)
}

/// `‖XZ‖² − β(RZ, Z)` for a section supported in the interior. Requires a
/// conjugate-point certificate showing the chart is free of β'-conjugate
/// points for some β' ≥ β. Passes when the value is at least `−tol` times the
/// largest term and strictly positive for nonzero `Z`.
pub fn jacobi_positivity(
    chart: &MetricChart,
    z: &SectionRef,
    beta: f64,
    certificate: Option<&ConjugateReport>,
    quad: &SmQuadrature,
    tol: f64,
) -> Result<IdentityReport> {
    match certificate {
        None => return Err(Error::Precondition("β-conjugate-point check has not been run".into())),
        Some(c) if !c.free || c.beta < beta => {
            return Err(Error::Precondition(format!(
                "conjugate-point certificate (β = {}, free = {}) does not cover β = {beta}",
                c.beta, c.free
            )))
        }
        _ => {}
    }
    let xz = x_section(z.clone());
    let rz = curvature(z.clone());
    let need = xz.need(0).max(rz.need(0));
    let r = quad.integrate(chart, need, 3, &|pt| {
        let zv: Vec<f64> = z.jets(pt, 0).iter().map(Jet::value).collect();
        let a: Vec<f64> = xz.jets(pt, 0).iter().map(Jet::value).collect();
        let c: Vec<f64> = rz.jets(pt, 0).iter().map(Jet::value).collect();
        vec![pt.inner(&a, &a), pt.inner(&c, &zv), pt.inner(&zv, &zv)]
    })?;
    let value = r[0] - beta * r[1];
    let scale = r[0].abs().max((beta * r[1]).abs());
    let mut rep = IdentityReport::new(
        "jacobi",
        vec![("|XZ|^2", r[0]), ("(RZ, Z)", r[1]), ("|Z|^2", r[2])],
        value,
        Some(&quad.spec),
        tol,
    );
    rep.relative_residual = if scale > 0.0 { value / scale } else { 0.0 };
    rep.pass = rep.relative_residual >= -tol && (r[2] == 0.0 || value > 0.0);
    Ok(rep)
}

/// `β_{d,m}(γ) = 1 + (m(m+d−2) − d + 1) / (2mγ − γ²m(m+d−2) + 2m + d − 1)`.
pub fn beta_dm(d: usize, m: usize, gamma: f64) -> f64 {
    let (d, m) = (d as f64, m as f64);
    1.0 + (m * (m + d - 2.0) - d + 1.0) / denominator(d, m, gamma)
}

fn denominator(d: f64, m: f64, gamma: f64) -> f64 {
    2.0 * m * gamma - gamma * gamma * m * (m + d - 2.0) + 2.0 * m + d - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Result {
    pub d: usize,
    pub m: usize,
    pub gamma: f64,
    pub beta: f64,
    pub expected_gamma: f64,
    pub expected_beta: f64,
    pub pass: bool,
}

/// Minimizes `β_{d,m}` over `grid`, then refines by successive parabolic
/// interpolation around the best grid point. The objective is `1 + c/D(γ)`
/// with `c ≥ 0`; the search runs on `−D`, which has the same minimizer when
/// `c > 0` and still picks a point when `c = 0` (m = 1, where `β ≡ 1`).
pub fn theorem2_scalar_minimizer(d: usize, m: usize, grid: &[f64]) -> Result<Theorem2Result> {
    if d < 2 || m < 1 || grid.len() < 3 {
        return Err(Error::Input(format!("need d >= 2, m >= 1 and at least 3 grid points (d = {d}, m = {m})")));
    }
    let (df, mf) = (d as f64, m as f64);
    if let Some(g) = grid.iter().find(|&&g| !(denominator(df, mf, g) > 0.0)) {
        return Err(Error::Range(format!("β_{{d,m}} denominator is not positive at γ = {g} (d = {d}, m = {m})")));
    }
    let obj = |g: f64| -denominator(df, mf, g);
    let best = (0..grid.len()).min_by(|&i, &j| obj(grid[i]).total_cmp(&obj(grid[j]))).unwrap();
    let i = best.clamp(1, grid.len() - 2);
    let mut pts = [grid[i - 1], grid[i], grid[i + 1]];
    let mut gamma = grid[best];
    for _ in 0..20 {
        let [a, b, c] = pts;
        let (fa, fb, fc) = (obj(a), obj(b), obj(c));
        let num = (b - a).powi(2) * (fb - fc) - (b - c).powi(2) * (fb - fa);
        let den = (b - a) * (fb - fc) - (b - c) * (fb - fa);
        if den == 0.0 {
            break;
        }
        let next = b - 0.5 * num / den;
        if !(next > a && next < c) {
            break;
        }
        let done = (next - gamma).abs() < 1e-15;
        gamma = next;
        if done {
            break;
        }
        // keep the bracket around the new point
        pts = if next < b { [a, next, b] } else { [b, next, c] };
    }
    let (_, b2) = beta_thresholds_f64(d, m)?;
    let expected_gamma = 1.0 / (mf + df - 2.0);
    let beta = beta_dm(d, m, gamma);
    let pass = (gamma - expected_gamma).abs() < 1e-8 && (beta - b2).abs() < 1e-8;
    Ok(Theorem2Result { d, m, gamma, beta, expected_gamma, expected_beta: b2, pass })
}

/// 2001 points on `[0, 0.999 γ₊]`, where `γ₊` is the positive root of the
/// denominator of `β_{d,m}`.
pub fn default_gamma_grid(d: usize, m: usize) -> Vec<f64> {
    let (d, m) = (d as f64, m as f64);
    let a = m * (m + d - 2.0);
    let root = (2.0 * m + (4.0 * m * m + 4.0 * a * (2.0 * m + d - 1.0)).sqrt()) / (2.0 * a);
    (0..=2000).map(|i| 0.999 * root * i as f64 / 2000.0).collect()
}

/// `‖γ∇_vXu + ∇_hu‖²` directly and through its bilinear expansion.
pub fn ineq10_expansion(chart: &MetricChart, u: &SmRef, gamma: f64, quad: &SmQuadrature, threshold: f64) -> Result<IdentityReport> {
    let a = vgrad(x_scalar(u.clone()));
    let h = hgrad(u.clone());
    let sum = SectionCombination::new(vec![(gamma, a.clone()), (1.0, h.clone())]);
    let need = a.need(0).max(h.need(0)).max(sum.need(0));
    let r = quad.integrate(chart, need, 4, &|pt| {
        let av: Vec<f64> = a.jets(pt, 0).iter().map(Jet::value).collect();
        let hv: Vec<f64> = h.jets(pt, 0).iter().map(Jet::value).collect();
        let sv: Vec<f64> = sum.jets(pt, 0).iter().map(Jet::value).collect();
        vec![pt.inner(&sv, &sv), pt.inner(&av, &av), pt.inner(&hv, &hv), pt.inner(&av, &hv)]
    })?;
    let expansion = gamma * gamma * r[1] + r[2] + 2.0 * gamma * r[3];
    let mut rep = IdentityReport::new(
        "ineq10",
        vec![("direct", r[0]), ("expansion", expansion), ("|grad_v X u|^2", r[1]), ("|grad_h u|^2", r[2]), ("pairing", r[3])],
        r[0] - expansion,
        Some(&quad.spec),
        threshold,
    );
    rep.pass &= r[0] >= 0.0;
    Ok(rep)
}

/// Pointwise commutator residuals over random samples; the report's residual
/// is the largest one seen.
pub fn commutator_suite(chart: &MetricChart, u: &SmRef, z: &SectionRef, samples: usize, seed: u64, threshold: f64) -> Result<IdentityReport> {
    let mut worst = [0.0f64; 5];
    for (x, v) in random_sm_samples(chart, samples, seed) {
        let r = crate::bundlecalc::commutator_residuals(chart, u, z, &x, &v)?;
        for (w, e) in worst.iter_mut().zip(r) {
            *w = w.max(e);
        }
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let terms = vec![
        ("[X,grad_v] + grad_h", worst[0]),
        ("[X,grad_h] - R grad_v", worst[1]),
        ("div_h grad_v - div_v grad_h - (d-1)X", worst[2]),
        ("[X,div_v] + div_h", worst[3]),
        ("[X,div_h] - div_v R", worst[4]),
    ];
    let mut rep = IdentityReport::new("commutators", terms, max, None, threshold);
    rep.relative_residual = max;
    rep.pass = max < threshold;
    Ok(rep)
}

/// Convenience: a random smooth function on SM, cut off near ∂M.
pub fn random_compact_function<R: Rng>(rng: &mut R, chart: &MetricChart) -> Result<SmRef> {
    let e = crate::bundlecalc::random_sm_expr(rng, chart.dim(), chart.radius(), 2, 2);
    compactly_supported(chart, e)
}

/// Convenience: a random section cut off near ∂M.
pub fn random_compact_section<R: Rng>(rng: &mut R, chart: &MetricChart) -> Result<SectionRef> {
    let d = chart.dim();
    let w = cutoff(chart);
    let comps = (0..d).map(|_| w.clone() * crate::bundlecalc::random_sm_expr(rng, d, chart.radius(), 1, 1)).collect();
    crate::bundlecalc::ProjectedSection::new(d, comps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use crate::bundlecalc::ProjectedSection;
    use crate::geodesics::is_beta_conjugate_free;
    use crate::quadrature::SpatialRule;
    use crate::tensorfield::{random_field, ExprTensorField};
    use crate::xray::FanSpec;

    fn field(f: impl TensorField + 'static) -> FieldRef {
        Arc::new(f)
    }

    fn quad(chart: &MetricChart) -> SmQuadrature {
        SmQuadrature::new(chart, &SmQuadratureSpec::default_for(chart.dim())).unwrap()
    }

    #[test]
    fn pestov_on_flat_disk() {
        let chart = MetricChart::euclidean(2, 1.0);
        let u = compactly_supported(&chart, Expr::parse("v1").unwrap()).unwrap();
        let rep = pestov_residual(&chart, &u, &quad(&chart), QUADRATURE_THRESHOLD).unwrap();
        assert!(rep.relative_residual < 1e-4, "{rep:?}");
        let zero = ExprFunction::parse(2, "0").unwrap();
        let rep = pestov_residual(&chart, &zero, &quad(&chart), QUADRATURE_THRESHOLD).unwrap();
        assert_eq!(rep.residual, 0.0);
        assert!(rep.pass);
    }

    #[test]
    fn pestov_requires_compact_support() {
        let chart = MetricChart::euclidean(2, 1.0);
        let u = ExprFunction::parse(2, "x1*v2").unwrap();
        assert!(matches!(pestov_residual(&chart, &u, &quad(&chart), 1e-3), Err(Error::Precondition(_))));
    }

    #[test]
    fn structural_relation_is_exact_without_hypotheses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chart = MetricChart::sphere_cap(2, 0.8, 1.0).unwrap();
        let spec = SmQuadratureSpec { spatial: SpatialRule::Polar { radial: 4, angular: 8 }, angles: 16, ..SmQuadratureSpec::default_for(2) };
        let q = SmQuadrature::new(&chart, &spec).unwrap();
        for m in 1..4 {
            let u = ExprFunction::new(2, crate::bundlecalc::random_sm_expr(&mut rng, 2, chart.radius(), 2, 2)).unwrap();
            let rep = structural_relation(&chart, &u, m, &q, ALGEBRAIC_THRESHOLD).unwrap();
            assert!(rep.pass, "{rep:?}");
        }
    }

    #[test]
    fn divfree_identity_for_stream_fields() {
        let chart = MetricChart::euclidean(2, 1.0);
        let psi = Expr::parse("(1 - x1^2 - x2^2)^2").unwrap();
        let f1 = field(ExprTensorField::stream(&psi, 1).unwrap());
        let rep = divfree_identity_pointwise(&chart, f1, 100, 1, 1e-8, 1e-8).unwrap();
        assert!(rep.pass, "{rep:?}");
        let psi = Expr::parse("sin(x1)*x2").unwrap();
        let f2 = field(ExprTensorField::stream(&psi, 2).unwrap());
        let rep = divfree_identity_pointwise(&chart, f2, 100, 2, 1e-8, 1e-7).unwrap();
        assert!(rep.pass, "{rep:?}");
        let f0 = field(ExprTensorField::parse(2, 0, &["x1^2 + x2"]).unwrap());
        let rep = divfree_identity_pointwise(&chart, f0, 20, 3, 1e-8, 1e-14).unwrap();
        assert_eq!(rep.max_residual, 0.0);
        let bad = field(ExprTensorField::parse(2, 1, &["x1", "0"]).unwrap());
        assert!(matches!(divfree_identity_pointwise(&chart, bad, 10, 4, 1e-8, 1e-7), Err(Error::Precondition(_))));
    }

    #[test]
    fn estf_examples() {
        let chart = MetricChart::conformal(2, 1.0, "0.2*x1*x2").unwrap();
        let spec = SmQuadratureSpec { spatial: SpatialRule::Polar { radial: 4, angular: 8 }, ..SmQuadratureSpec::default_for(2) };
        let q = SmQuadrature::new(&chart, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for m in 1..=4 {
            let f = field(random_field(&mut rng, 2, m, 2, 1.0).unwrap());
            let rep = estf_check(&chart, f, &q, 1e-6).unwrap();
            assert!(rep.pass, "{rep:?}");
            if m == 1 {
                // (m−2k)(m−2k+d−2) = 1 for m = 1, d = 2
                assert!((rep.term("|grad_v f|^2").unwrap() - rep.term("|f|^2").unwrap()).abs() < 1e-9 * rep.term("|f|^2").unwrap());
            }
        }
        let flat = MetricChart::euclidean(2, 1.0);
        let q = SmQuadrature::new(&flat, &spec).unwrap();
        let trace_free = field(ExprTensorField::parse(2, 2, &["x1 + 1", "x2", "-x1 - 1"]).unwrap());
        let rep = estf_check(&flat, trace_free, &q, 1e-6).unwrap();
        let (g, b) = (rep.term("|grad_v f|^2").unwrap(), rep.term("bound").unwrap());
        assert!((g - b).abs() < 1e-6 * b);
        let identity = field(ExprTensorField::parse(2, 2, &["1", "0", "1"]).unwrap());
        let rep = estf_check(&flat, identity, &q, 1e-6).unwrap();
        assert!(rep.term("|grad_v f|^2").unwrap().abs() < 1e-20);
    }

    #[test]
    fn jacobi_positivity_needs_certificate() {
        let chart = MetricChart::sphere_cap(2, 0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random_compact_section(&mut rng, &chart).unwrap();
        let q = quad(&chart);
        assert!(matches!(jacobi_positivity(&chart, &z, 1.5, None, &q, 1e-8), Err(Error::Precondition(_))));
        let cert = is_beta_conjugate_free(&chart, 1.5, &FanSpec::new(8, 8, 1e-3), 1e-2).unwrap();
        assert!(cert.free);
        let rep = jacobi_positivity(&chart, &z, 1.5, Some(&cert), &q, 1e-8).unwrap();
        assert!(rep.pass, "{rep:?}");
        let zero = ProjectedSection::new(2, vec![Expr::c(0.0), Expr::c(0.0)]).unwrap();
        let rep = jacobi_positivity(&chart, &zero, 1.5, Some(&cert), &q, 1e-8).unwrap();
        assert!(rep.pass && rep.residual == 0.0);
    }

    #[test]
    fn theorem2_closed_forms() {
        let r = theorem2_scalar_minimizer(2, 2, &default_gamma_grid(2, 2)).unwrap();
        assert!(r.pass && (r.gamma - 0.5).abs() < 1e-8 && (r.beta - 1.5).abs() < 1e-8);
        let r = theorem2_scalar_minimizer(3, 2, &default_gamma_grid(3, 2)).unwrap();
        assert!(r.pass && (r.beta - 1.6).abs() < 1e-8);
        for d in 2..=10 {
            for m in 1..=10 {
                assert!(theorem2_scalar_minimizer(d, m, &default_gamma_grid(d, m)).unwrap().pass, "d={d} m={m}");
            }
        }
        let r = theorem2_scalar_minimizer(2, 1, &default_gamma_grid(2, 1)).unwrap();
        assert!(r.pass && r.beta == 1.0);
        let bad: Vec<f64> = (0..10).map(|i| i as f64 * 10.0).collect();
        assert!(matches!(theorem2_scalar_minimizer(2, 2, &bad), Err(Error::Range(_))));
    }

    #[test]
    fn ineq10_bilinear_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let chart = MetricChart::hyperbolic(2, 0.8, 1.0).unwrap();
        let spec = SmQuadratureSpec { spatial: SpatialRule::Polar { radial: 4, angular: 8 }, angles: 16, ..SmQuadratureSpec::default_for(2) };
        let q = SmQuadrature::new(&chart, &spec).unwrap();
        let u = random_compact_function(&mut rng, &chart).unwrap();
        let rep = ineq10_expansion(&chart, &u, 0.5, &q, 1e-10).unwrap();
        assert!(rep.pass, "{rep:?}");
        let rep = ineq10_expansion(&chart, &u, 0.0, &q, 1e-10).unwrap();
        assert!((rep.term("direct").unwrap() - rep.term("|grad_h u|^2").unwrap()).abs() < 1e-12 * rep.term("direct").unwrap());
    }
}
