//! Single-chart Riemannian geometry on a closed ball in `R^d`.
//!
//! Index conventions: `g[i * d + j] = g_{ij}`; Christoffel symbols are stored
//! as `gamma[(l * d + j) * d + k] = Γ^l_{jk}`; the curvature tensor as
//! `riem[((i * d + j) * d + k) * d + l] = R^i_{jkl}` with
//! `R(∂_k, ∂_l)∂_j = R^i_{jkl} ∂_i`, so `R(w, v)v = R^i_{jkl} v^j w^k v^l`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::jet::{self, Jet, Real};

/// Closed-form metric families.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricFamily {
    Euclidean,
    /// `g = c δ`.
    Scaled { c: f64 },
    /// `g = exp(2 λ(x)) δ`.
    Conformal { lambda: Expr },
    /// Constant curvature `k > 0`: `g = 4 δ / (1 + k |x|^2)^2`.
    SphereCap { k: f64 },
    /// Constant curvature `-k`: `g = 4 δ / (1 - k |x|^2)^2`, needs `radius < 1/sqrt(k)`.
    Hyperbolic { k: f64 },
    /// Upper-triangular components `g11, g12, .., g1d, g22, ..` as expressions.
    Custom { components: Vec<Expr> },
}

impl MetricFamily {
    pub fn name(&self) -> &'static str {
        match self {
            MetricFamily::Euclidean => "euclidean",
            MetricFamily::Scaled { .. } => "scaled",
            MetricFamily::Conformal { .. } => "conformal",
            MetricFamily::SphereCap { .. } => "sphere_cap",
            MetricFamily::Hyperbolic { .. } => "hyperbolic",
            MetricFamily::Custom { .. } => "custom",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DerivativeMode {
    Algorithmic,
    CentralDifference { step: f64 },
}

#[derive(Debug, Clone)]
pub struct MetricChart {
    dim: usize,
    radius: f64,
    family: MetricFamily,
    derivative_mode: DerivativeMode,
    diameter: f64,
}

/// Matrix of `w ↦ R(w, v)v` on `{v}^⊥` in a g-orthonormal frame.
#[derive(Debug, Clone)]
pub struct CurvatureOperator {
    /// Frame vectors (coordinate components), each g-orthonormal and g-orthogonal to `v`.
    pub frame: Vec<Vec<f64>>,
    /// Row-major `(d-1) x (d-1)` matrix `M_ab = <e_a, R(e_b, v)v>_g`.
    pub matrix: Vec<f64>,
}

impl CurvatureOperator {
    pub fn size(&self) -> usize {
        self.frame.len()
    }

    pub fn asymmetry(&self) -> f64 {
        let n = self.size();
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                worst = worst.max((self.matrix[a * n + b] - self.matrix[b * n + a]).abs());
            }
        }
        worst
    }
}

impl MetricChart {
    pub fn new(dim: usize, radius: f64, family: MetricFamily) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::Input(format!("chart dimension must be 2 or 3, got {dim}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Input(format!("chart radius must be positive, got {radius}")));
        }
        match &family {
            MetricFamily::Scaled { c } if *c <= 0.0 => {
                return Err(Error::Input(format!("scaled metric needs c > 0, got {c}")));
            }
            MetricFamily::SphereCap { k } if *k <= 0.0 => {
                return Err(Error::Input(format!("sphere cap needs k > 0, got {k}")));
            }
            MetricFamily::Hyperbolic { k } => {
                if *k <= 0.0 || radius * k.sqrt() >= 1.0 {
                    return Err(Error::Input(format!("hyperbolic chart needs k > 0 and radius < 1/sqrt(k) (k = {k}, radius = {radius})")));
                }
            }
            MetricFamily::Conformal { lambda } => lambda.check_dim(dim)?,
            MetricFamily::Custom { components } => {
                if components.len() != dim * (dim + 1) / 2 {
                    return Err(Error::Input(format!("custom metric needs {} components", dim * (dim + 1) / 2)));
                }
                for c in components {
                    c.check_dim(dim)?;
                }
            }
            _ => {}
        }
        let mut chart = MetricChart { dim, radius, family, derivative_mode: DerivativeMode::Algorithmic, diameter: 0.0 };
        chart.diameter = chart.estimate_diameter()?;
        Ok(chart)
    }

    pub fn euclidean(dim: usize, radius: f64) -> Self {
        MetricChart::new(dim, radius, MetricFamily::Euclidean).expect("valid euclidean chart")
    }

    pub fn scaled(dim: usize, radius: f64, c: f64) -> Result<Self> {
        MetricChart::new(dim, radius, MetricFamily::Scaled { c })
    }

    pub fn conformal(dim: usize, radius: f64, lambda: &str) -> Result<Self> {
        MetricChart::new(dim, radius, MetricFamily::Conformal { lambda: Expr::parse(lambda)? })
    }

    pub fn sphere_cap(dim: usize, radius: f64, k: f64) -> Result<Self> {
        MetricChart::new(dim, radius, MetricFamily::SphereCap { k })
    }

    /// Sphere cap of curvature `k` whose longest geodesic (a diameter through
    /// the centre) has length `len`.
    pub fn sphere_cap_with_max_length(dim: usize, len: f64, k: f64) -> Result<Self> {
        let radius = (len * k.sqrt() / 4.0).tan() / k.sqrt();
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Input(format!("no sphere cap of curvature {k} has maximal geodesic length {len}")));
        }
        MetricChart::sphere_cap(dim, radius, k)
    }

    pub fn hyperbolic(dim: usize, radius: f64, k: f64) -> Result<Self> {
        MetricChart::new(dim, radius, MetricFamily::Hyperbolic { k })
    }

    pub fn with_derivative_mode(mut self, mode: DerivativeMode) -> Self {
        self.derivative_mode = mode;
        self
    }

    /// Central-difference mode with the default step `1e-5 * radius`.
    pub fn central_difference(self) -> Self {
        let step = 1e-5 * self.radius;
        self.with_derivative_mode(DerivativeMode::CentralDifference { step })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn family(&self) -> &MetricFamily {
        &self.family
    }

    pub fn name(&self) -> &'static str {
        self.family.name()
    }

    pub fn derivative_mode(&self) -> DerivativeMode {
        self.derivative_mode
    }

    /// Upper bound on the length of any curve joining two chart points along a
    /// coordinate chord; used to bound integration times.
    pub fn diameter_estimate(&self) -> f64 {
        self.diameter
    }

    fn estimate_diameter(&self) -> Result<f64> {
        // sup of sqrt(λ_max(g)) over radial samples times the Euclidean diameter
        let mut worst: f64 = 0.0;
        let n = 64;
        for i in 0..=n {
            let r = self.radius * i as f64 / n as f64;
            for axis in 0..self.dim {
                let mut x = vec![0.0; self.dim];
                x[axis] = r;
                let g = self.metric_unchecked(&x);
                let eig = SymmetricEigen::new(DMatrix::from_row_slice(self.dim, self.dim, &g)).eigenvalues;
                let lmin = eig.min();
                if !(lmin > 0.0) {
                    return Err(Error::Geometry(format!("metric is not positive definite at {x:?}")));
                }
                worst = worst.max(eig.max().sqrt());
            }
        }
        Ok(2.0 * self.radius * worst)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        norm_e(x) <= self.radius * (1.0 + 1e-12)
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Input(format!("point has {} coordinates, chart dimension is {}", x.len(), self.dim)));
        }
        if !self.contains(x) {
            return Err(Error::Domain { point: x.to_vec(), radius: self.radius });
        }
        Ok(())
    }

    /// Scalar factor `φ` with `g = φ δ`, for the conformally flat families.
    pub fn conformal_factor<T: Real>(&self, x: &[T]) -> Option<T> {
        let r2 = || {
            let mut s = x[0].lift(0.0);
            for xi in x {
                s = s + xi.clone() * xi.clone();
            }
            s
        };
        match &self.family {
            MetricFamily::Euclidean => Some(x[0].lift(1.0)),
            MetricFamily::Scaled { c } => Some(x[0].lift(*c)),
            MetricFamily::Conformal { lambda } => Some((lambda.eval(x, &[]) * 2.0).exp()),
            MetricFamily::SphereCap { k } => Some((r2() * *k + 1.0).powi(-2) * 4.0),
            MetricFamily::Hyperbolic { k } => Some((r2() * (-*k) + 1.0).powi(-2) * 4.0),
            MetricFamily::Custom { .. } => None,
        }
    }

    /// Full metric matrix (row-major) for any scalar type; no domain check.
    pub fn metric_generic<T: Real>(&self, x: &[T]) -> Vec<T> {
        let d = self.dim;
        if let Some(phi) = self.conformal_factor(x) {
            let zero = x[0].lift(0.0);
            let mut g = vec![zero; d * d];
            for i in 0..d {
                g[i * d + i] = phi.clone();
            }
            return g;
        }
        let MetricFamily::Custom { components } = &self.family else { unreachable!() };
        let mut g = vec![x[0].lift(0.0); d * d];
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                let v = components[idx].eval(x, &[]);
                g[i * d + j] = v.clone();
                g[j * d + i] = v;
                idx += 1;
            }
        }
        g
    }

    fn metric_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.metric_generic(x)
    }

    /// `g_{ij}(x)`, row-major; errors if `x` is outside the chart.
    pub fn metric(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.metric_unchecked(x))
    }

    pub fn inverse_metric(&self, x: &[f64]) -> Result<Vec<f64>> {
        let g = self.metric(x)?;
        invert_small(&g, self.dim).ok_or_else(|| Error::Geometry(format!("singular metric at {x:?}")))
    }

    pub fn inner(&self, x: &[f64], a: &[f64], b: &[f64]) -> f64 {
        let g = self.metric_unchecked(x);
        quad(&g, a, b, self.dim)
    }

    pub fn norm(&self, x: &[f64], v: &[f64]) -> f64 {
        self.inner(x, v, v).sqrt()
    }

    /// Rescales `v` to unit g-length.
    pub fn normalize(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let n = self.norm(x, v);
        v.iter().map(|c| c / n).collect()
    }

    /// Metric derivatives `∂_k g_{ij}` (index `(i*d+j)*d+k`) by the configured mode.
    pub fn metric_derivatives(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_point(x)?;
        Ok(self.metric_derivatives_unchecked(x))
    }

    fn metric_derivatives_unchecked(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim;
        match self.derivative_mode {
            DerivativeMode::Algorithmic => {
                let s = jet::space(d);
                let xs = jet::seeds(s, 1, x);
                let gj = self.metric_generic(&xs);
                let g: Vec<f64> = gj.iter().map(|e| e.value()).collect();
                let mut dg = vec![0.0; d * d * d];
                for ij in 0..d * d {
                    for k in 0..d {
                        dg[ij * d + k] = gj[ij].partial(k);
                    }
                }
                (g, dg)
            }
            DerivativeMode::CentralDifference { step } => {
                let g = self.metric_unchecked(x);
                let mut dg = vec![0.0; d * d * d];
                for k in 0..d {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[k] += step;
                    xm[k] -= step;
                    let gp = self.metric_unchecked(&xp);
                    let gm = self.metric_unchecked(&xm);
                    for ij in 0..d * d {
                        dg[ij * d + k] = (gp[ij] - gm[ij]) / (2.0 * step);
                    }
                }
                (g, dg)
            }
        }
    }

    /// Christoffel symbols `Γ^l_{jk}` at `x`.
    pub fn christoffel(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.christoffel_unchecked(x)
    }

    fn christoffel_unchecked(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (g, dg) = self.metric_derivatives_unchecked(x);
        let d = self.dim;
        cholesky(&g, d).ok_or_else(|| Error::Geometry(format!("metric is not positive definite at {x:?}")))?;
        let ginv = invert_small(&g, d).ok_or_else(|| Error::Geometry(format!("singular metric at {x:?}")))?;
        let mut gamma = vec![0.0; d * d * d];
        for l in 0..d {
            for j in 0..d {
                for k in j..d {
                    let mut s = 0.0;
                    for p in 0..d {
                        s += ginv[l * d + p] * (dg[(p * d + k) * d + j] + dg[(p * d + j) * d + k] - dg[(j * d + k) * d + p]);
                    }
                    gamma[(l * d + j) * d + k] = 0.5 * s;
                    gamma[(l * d + k) * d + j] = 0.5 * s;
                }
            }
        }
        Ok(gamma)
    }

    /// `∇φ/φ` for `g = φ δ`; `None` for non-conformal families.
    fn log_conformal_gradient(&self, x: &[f64]) -> Option<[f64; 3]> {
        let d = self.dim;
        let r2: f64 = x.iter().map(|a| a * a).sum();
        let mut grad = [0.0f64; 3];
        match &self.family {
            MetricFamily::Euclidean | MetricFamily::Scaled { .. } => {}
            MetricFamily::SphereCap { k } => {
                let s = -4.0 * k / (1.0 + k * r2);
                for i in 0..d {
                    grad[i] = s * x[i];
                }
            }
            MetricFamily::Hyperbolic { k } => {
                let s = 4.0 * k / (1.0 - k * r2);
                for i in 0..d {
                    grad[i] = s * x[i];
                }
            }
            MetricFamily::Conformal { lambda } => {
                let s = jet::space(d);
                let xs = jet::seeds(s, 1, x);
                let l = lambda.eval(&xs, &[]);
                for i in 0..d {
                    grad[i] = 2.0 * l.partial(i);
                }
            }
            MetricFamily::Custom { .. } => return None,
        }
        Some(grad)
    }

    /// `Γ^l_{jk} a^j b^k`, with a closed form for conformally flat families;
    /// no domain check.
    pub fn christoffel_contract(&self, x: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match self.log_conformal_gradient(x) {
            Some(grad) => {
                let ab: f64 = (0..d).map(|i| a[i] * b[i]).sum();
                let ag: f64 = (0..d).map(|i| a[i] * grad[i]).sum();
                let bg: f64 = (0..d).map(|i| b[i] * grad[i]).sum();
                for l in 0..d {
                    out[l] = 0.5 * (a[l] * bg + b[l] * ag - ab * grad[l]);
                }
            }
            None => {
                let gamma = self.christoffel_unchecked(x).unwrap_or_else(|_| vec![f64::NAN; d * d * d]);
                for l in 0..d {
                    let mut s = 0.0;
                    for j in 0..d {
                        for k in 0..d {
                            s += gamma[(l * d + j) * d + k] * a[j] * b[k];
                        }
                    }
                    out[l] = s;
                }
            }
        }
    }

    /// Geodesic acceleration `-Γ^l_{jk} v^j v^k`; no domain check.
    pub fn geodesic_acceleration(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        self.christoffel_contract(x, v, v, out);
        out[..self.dim].iter_mut().for_each(|o| *o = -*o);
    }

    /// Sectional curvature for the constant-curvature families.
    pub fn constant_curvature(&self) -> Option<f64> {
        match &self.family {
            MetricFamily::Euclidean | MetricFamily::Scaled { .. } => Some(0.0),
            MetricFamily::SphereCap { k } => Some(*k),
            MetricFamily::Hyperbolic { k } => Some(-*k),
            _ => None,
        }
    }

    /// `R(w, v)v` at `x`; no domain check.
    pub fn curvature_apply(&self, x: &[f64], w: &[f64], v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        if let Some(k) = self.constant_curvature() {
            if k == 0.0 {
                return vec![0.0; d];
            }
            let g = self.metric_unchecked(x);
            let vv = quad(&g, v, v, d);
            let wv = quad(&g, w, v, d);
            return (0..d).map(|i| k * (vv * w[i] - wv * v[i])).collect();
        }
        match self.riemann_unchecked(x) {
            Ok(r) => apply_curvature(&r, w, v, d),
            Err(_) => vec![f64::NAN; d],
        }
    }

    /// Curvature tensor `R^i_{jkl}` at `x`.
    pub fn riemann(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        self.riemann_unchecked(x)
    }

    fn riemann_unchecked(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim;
        match self.derivative_mode {
            DerivativeMode::Algorithmic => {
                let local = LocalGeometry::new(self, x, d, 2)?;
                Ok(local.riemann.iter().map(|r| r.value()).collect())
            }
            DerivativeMode::CentralDifference { step } => {
                let gamma = self.christoffel_unchecked(x)?;
                let mut dgamma = vec![0.0; d * d * d * d];
                for m in 0..d {
                    let mut xp = x.to_vec();
                    let mut xm = x.to_vec();
                    xp[m] += step;
                    xm[m] -= step;
                    // stencil points may poke past the boundary; the formula is smooth there
                    let gp = self.christoffel_unchecked(&xp)?;
                    let gm = self.christoffel_unchecked(&xm)?;
                    for idx in 0..d * d * d {
                        dgamma[idx * d + m] = (gp[idx] - gm[idx]) / (2.0 * step);
                    }
                }
                Ok(riemann_from(&gamma, &dgamma, d))
            }
        }
    }

    /// g-orthonormal basis of `T_xM` from the inverse Cholesky factor; column `a`
    /// is `basis[a]`.
    pub fn orthonormal_basis(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let g = self.metric(x)?;
        orthonormal_basis_of(&g, self.dim).ok_or_else(|| Error::Geometry(format!("metric is not positive definite at {x:?}")))
    }

    /// g-orthonormal frame of `{v}^⊥` (v must be unit).
    pub fn complement_frame(&self, x: &[f64], v: &[f64]) -> Result<Vec<Vec<f64>>> {
        let g = self.metric(x)?;
        let d = self.dim;
        let basis = orthonormal_basis_of(&g, d).ok_or_else(|| Error::Geometry(format!("metric is not positive definite at {x:?}")))?;
        let mut order: Vec<usize> = (0..d).collect();
        let align: Vec<f64> = basis.iter().map(|b| quad(&g, b, v, d).abs()).collect();
        // least aligned first; ties broken by index (stable sort)
        order.sort_by(|&a, &b| align[a].partial_cmp(&align[b]).unwrap());
        let mut frame: Vec<Vec<f64>> = vec![v.to_vec()];
        for &i in &order {
            if frame.len() == d {
                break;
            }
            let mut w = basis[i].clone();
            for e in &frame {
                let c = quad(&g, &w, e, d);
                for (wi, ei) in w.iter_mut().zip(e) {
                    *wi -= c * ei;
                }
            }
            let n = quad(&g, &w, &w, d).sqrt();
            if n < 1e-8 {
                continue;
            }
            w.iter_mut().for_each(|c| *c /= n);
            frame.push(w);
        }
        if frame.len() != d {
            return Err(Error::Geometry("could not complete an orthonormal frame".into()));
        }
        frame.remove(0);
        Ok(frame)
    }

    /// `w ↦ R(w, v)v` on `{v}^⊥`.
    pub fn curvature_operator(&self, x: &[f64], v: &[f64]) -> Result<CurvatureOperator> {
        self.check_point(x)?;
        let norm = self.norm(x, v);
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Normalization { norm });
        }
        let d = self.dim;
        let riem = self.riemann(x)?;
        let g = self.metric_unchecked(x);
        let frame = self.complement_frame(x, v)?;
        let n = frame.len();
        let images: Vec<Vec<f64>> = frame.iter().map(|w| apply_curvature(&riem, w, v, d)).collect();
        let mut matrix = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                matrix[a * n + b] = quad(&g, &frame[a], &images[b], d);
            }
        }
        Ok(CurvatureOperator { frame, matrix })
    }
}

/// `R(w, v)v` from the curvature tensor.
pub fn apply_curvature(riem: &[f64], w: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    s += riem[((i * d + j) * d + k) * d + l] * v[j] * w[k] * v[l];
                }
            }
        }
        *o = s;
    }
    out
}

/// `R^i_{jkl} = ∂_kΓ^i_{lj} − ∂_lΓ^i_{kj} + Γ^i_{kp}Γ^p_{lj} − Γ^i_{lp}Γ^p_{kj}` with
/// `dgamma[((i*d+j)*d+k)*d+m] = ∂_m Γ^i_{jk}`.
fn riemann_from(gamma: &[f64], dgamma: &[f64], d: usize) -> Vec<f64> {
    let gm = |i: usize, j: usize, k: usize| gamma[(i * d + j) * d + k];
    let dgm = |i: usize, j: usize, k: usize, m: usize| dgamma[((i * d + j) * d + k) * d + m];
    let mut r = vec![0.0; d * d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    let mut s = dgm(i, l, j, k) - dgm(i, k, j, l);
                    for p in 0..d {
                        s += gm(i, k, p) * gm(p, l, j) - gm(i, l, p) * gm(p, k, j);
                    }
                    r[((i * d + j) * d + k) * d + l] = s;
                }
            }
        }
    }
    r
}

pub(crate) fn quad(g: &[f64], a: &[f64], b: &[f64], d: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += g[i * d + j] * a[i] * b[j];
        }
    }
    s
}

pub(crate) fn norm_e(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Lower Cholesky factor (row-major) or `None` if not positive definite.
pub(crate) fn cholesky(g: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = g[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Columns of `L^{-T}` where `g = L L^T`: a g-orthonormal basis.
pub(crate) fn orthonormal_basis_of(g: &[f64], d: usize) -> Option<Vec<Vec<f64>>> {
    let l = cholesky(g, d)?;
    // solve L^T b_a = e_a by back substitution
    let mut basis = Vec::with_capacity(d);
    for a in 0..d {
        let mut b = vec![0.0; d];
        for i in (0..d).rev() {
            let mut s = if i == a { 1.0 } else { 0.0 };
            for k in i + 1..d {
                s -= l[k * d + i] * b[k];
            }
            b[i] = s / l[i * d + i];
        }
        basis.push(b);
    }
    Some(basis)
}

/// Inverse of a small dense matrix by cofactors (d ≤ 3) for any scalar type.
pub fn invert_small<T: Real>(a: &[T], d: usize) -> Option<Vec<T>> {
    match d {
        1 => {
            if a[0].value() == 0.0 {
                return None;
            }
            Some(vec![a[0].lift(1.0) / a[0].clone()])
        }
        2 => {
            let det = a[0].clone() * a[3].clone() - a[1].clone() * a[2].clone();
            if det.value() == 0.0 {
                return None;
            }
            let inv = det.lift(1.0) / det;
            Some(vec![a[3].clone() * inv.clone(), -a[1].clone() * inv.clone(), -a[2].clone() * inv.clone(), a[0].clone() * inv])
        }
        3 => {
            let m = |i: usize, j: usize| a[i * 3 + j].clone();
            let cof = |i0: usize, i1: usize, j0: usize, j1: usize| m(i0, j0) * m(i1, j1) - m(i0, j1) * m(i1, j0);
            let c00 = cof(1, 2, 1, 2);
            let c01 = -cof(1, 2, 0, 2);
            let c02 = cof(1, 2, 0, 1);
            let det = m(0, 0) * c00.clone() + m(0, 1) * c01.clone() + m(0, 2) * c02.clone();
            if det.value() == 0.0 {
                return None;
            }
            let inv = det.lift(1.0) / det;
            let c10 = -cof(0, 2, 1, 2);
            let c11 = cof(0, 2, 0, 2);
            let c12 = -cof(0, 2, 0, 1);
            let c20 = cof(0, 1, 1, 2);
            let c21 = -cof(0, 1, 0, 2);
            let c22 = cof(0, 1, 0, 1);
            // inverse = adj / det, adj = cofactor^T
            let out = [c00, c10, c20, c01, c11, c21, c02, c12, c22];
            Some(out.into_iter().map(|c| c * inv.clone()).collect())
        }
        _ => {
            let n = d;
            let mut cols = Vec::with_capacity(n * n);
            for j in 0..n {
                let mut e = vec![a[0].lift(0.0); n];
                e[j] = a[0].lift(1.0);
                cols.push(jet::solve_dense(a.to_vec(), e, n)?);
            }
            let mut out = vec![a[0].lift(0.0); n * n];
            for j in 0..n {
                for i in 0..n {
                    out[i * n + j] = cols[j][i].clone();
                }
            }
            Some(out)
        }
    }
}

/// Metric quantities at one spatial point as jets in the first `dim`
/// variables of an `nvars`-variable space (extra variables are fiber
/// coordinates the geometry does not depend on).
#[derive(Debug, Clone)]
pub struct LocalGeometry {
    pub dim: usize,
    pub x: Vec<f64>,
    /// Jet order of `g` and `ginv`.
    pub g_order: usize,
    pub g: Vec<Jet>,
    pub ginv: Vec<Jet>,
    /// `Γ^l_{jk}` at order `g_order - 1`.
    pub gamma: Vec<Jet>,
    /// `Γ_j = Γ^k_{jk}` at order `g_order - 1`.
    pub gamma_trace: Vec<Jet>,
    /// `R^i_{jkl}` at order `g_order - 2` (empty if `g_order < 2`).
    pub riemann: Vec<Jet>,
    /// `sqrt(det g)` at the base point.
    pub sqrt_det: f64,
}

impl LocalGeometry {
    pub fn new(chart: &MetricChart, x: &[f64], nvars: usize, g_order: usize) -> Result<Self> {
        let d = chart.dim;
        assert!(nvars >= d);
        let s = jet::space(nvars);
        let xs: Vec<Jet> = (0..d).map(|i| Jet::variable(s, g_order, i, x[i])).collect();
        let g = chart.metric_generic(&xs);
        let gv: Vec<f64> = g.iter().map(|e| e.value()).collect();
        let l = cholesky(&gv, d).ok_or_else(|| Error::Geometry(format!("metric is not positive definite at {x:?}")))?;
        let sqrt_det: f64 = (0..d).map(|i| l[i * d + i]).product();
        let ginv = invert_small(&g, d).ok_or_else(|| Error::Geometry(format!("singular metric at {x:?}")))?;
        let mut gamma = Vec::new();
        let mut gamma_trace = Vec::new();
        let mut riemann = Vec::new();
        if g_order >= 1 {
            let o = g_order - 1;
            // dg[(i*d+j)*d+k] = ∂_k g_ij
            let mut dg = Vec::with_capacity(d * d * d);
            for ij in 0..d * d {
                for k in 0..d {
                    dg.push(g[ij].d(k));
                }
            }
            let ginv_t: Vec<Jet> = ginv.iter().map(|e| e.truncated(o)).collect();
            let zero = Jet::constant(s, o, 0.0);
            gamma = vec![zero.clone(); d * d * d];
            for l in 0..d {
                for j in 0..d {
                    for k in j..d {
                        let mut acc = zero.clone();
                        for p in 0..d {
                            let t = &(&dg[(p * d + k) * d + j] + &dg[(p * d + j) * d + k]) - &dg[(j * d + k) * d + p];
                            acc.add_product(&ginv_t[l * d + p], &t);
                        }
                        acc *= 0.5;
                        gamma[(l * d + j) * d + k] = acc.clone();
                        gamma[(l * d + k) * d + j] = acc;
                    }
                }
            }
            for j in 0..d {
                let mut acc = zero.clone();
                for k in 0..d {
                    acc += &gamma[(k * d + j) * d + k];
                }
                gamma_trace.push(acc);
            }
            if g_order >= 2 {
                let o2 = g_order - 2;
                let gt: Vec<Jet> = gamma.iter().map(|e| e.truncated(o2)).collect();
                let gm = |i: usize, j: usize, k: usize| &gt[(i * d + j) * d + k];
                let zero2 = Jet::constant(s, o2, 0.0);
                riemann = vec![zero2.clone(); d * d * d * d];
                for i in 0..d {
                    for j in 0..d {
                        for k in 0..d {
                            for l in 0..d {
                                let mut acc = &gamma[(i * d + l) * d + j].d(k) - &gamma[(i * d + k) * d + j].d(l);
                                for p in 0..d {
                                    acc.add_product(gm(i, k, p), gm(p, l, j));
                                    let t = gm(i, l, p) * gm(p, k, j);
                                    acc -= &t;
                                }
                                riemann[((i * d + j) * d + k) * d + l] = acc;
                            }
                        }
                    }
                }
            }
        }
        Ok(LocalGeometry { dim: d, x: x.to_vec(), g_order, g, ginv, gamma, gamma_trace, riemann, sqrt_det })
    }

    pub fn g_value(&self) -> Vec<f64> {
        self.g.iter().map(|e| e.value()).collect()
    }

    pub fn ginv_value(&self) -> Vec<f64> {
        self.ginv.iter().map(|e| e.value()).collect()
    }

    pub fn gamma_value(&self) -> Vec<f64> {
        self.gamma.iter().map(|e| e.value()).collect()
    }

    pub fn riemann_value(&self) -> Vec<f64> {
        self.riemann.iter().map(|e| e.value()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_point(rng: &mut ChaCha8Rng, d: usize, r: f64) -> Vec<f64> {
        loop {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
            if norm_e(&x) < 0.95 * r {
                return x;
            }
        }
    }

    fn random_unit(chart: &MetricChart, rng: &mut ChaCha8Rng, x: &[f64]) -> Vec<f64> {
        let v: Vec<f64> = (0..chart.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        chart.normalize(x, &v)
    }

    fn builtins(d: usize) -> Vec<MetricChart> {
        vec![
            MetricChart::euclidean(d, 1.0),
            MetricChart::scaled(d, 1.0, 2.5).unwrap(),
            MetricChart::conformal(d, 1.0, "0.3*x1 - 0.2*x2^2 + 0.1*sin(x1*x2)").unwrap(),
            MetricChart::sphere_cap(d, 0.8, 1.0).unwrap(),
            MetricChart::hyperbolic(d, 0.5, 1.0).unwrap(),
            MetricChart::new(
                d,
                1.0,
                MetricFamily::Custom {
                    components: if d == 2 {
                        vec![Expr::parse("2 + x1^2").unwrap(), Expr::parse("0.3*x1*x2").unwrap(), Expr::parse("1.5 + 0.2*sin(x2)").unwrap()]
                    } else {
                        ["2 + x1^2", "0.3*x1*x2", "0.1*x3", "1.5 + 0.2*sin(x2)", "0.2*x1", "1 + x3^2"]
                            .iter()
                            .map(|s| Expr::parse(s).unwrap())
                            .collect()
                    },
                },
            )
            .unwrap(),
        ]
    }

    /// Christoffels straight from the textbook formula with nested central differences.
    fn fd_christoffel(chart: &MetricChart, x: &[f64], h: f64) -> Vec<f64> {
        let d = chart.dim();
        let g = chart.metric_generic(x);
        let ginv = invert_small(&g, d).unwrap();
        let dg = |i: usize, j: usize, k: usize| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += h;
            xm[k] -= h;
            (chart.metric_generic(&xp)[i * d + j] - chart.metric_generic(&xm)[i * d + j]) / (2.0 * h)
        };
        let mut out = vec![0.0; d * d * d];
        for l in 0..d {
            for j in 0..d {
                for k in 0..d {
                    let mut s = 0.0;
                    for p in 0..d {
                        s += 0.5 * ginv[l * d + p] * (dg(p, k, j) + dg(p, j, k) - dg(j, k, p));
                    }
                    out[(l * d + j) * d + k] = s;
                }
            }
        }
        out
    }

    #[test]
    fn euclidean_christoffels_vanish() {
        let c = MetricChart::euclidean(3, 1.0);
        assert!(c.christoffel(&[0.1, 0.2, -0.3]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn conformal_exponential_christoffels() {
        let c = MetricChart::conformal(2, 1.0, "x1").unwrap();
        let x = [0.3, -0.4];
        let fd = fd_christoffel(&c, &x, 1e-5);
        let g = c.christoffel(&x).unwrap();
        let at = |l: usize, j: usize, k: usize| g[(l * 2 + j) * 2 + k];
        assert_relative_eq!(at(0, 0, 0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(at(0, 1, 1), -1.0, epsilon = 1e-12);
        assert_relative_eq!(at(1, 0, 1), 1.0, epsilon = 1e-12);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn sphere_cap_christoffels_vanish_at_origin() {
        let c = MetricChart::sphere_cap(2, 1.0, 1.0).unwrap();
        let fd = fd_christoffel(&c, &[0.0, 0.0], 1e-5);
        assert!(fd.iter().all(|g| g.abs() < 1e-9));
        assert!(c.christoffel(&[0.0, 0.0]).unwrap().iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn inverse_metric_is_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in [2, 3] {
            for chart in builtins(d) {
                for _ in 0..20 {
                    let x = random_point(&mut rng, d, chart.radius());
                    let g = chart.metric(&x).unwrap();
                    let gi = chart.inverse_metric(&x).unwrap();
                    for i in 0..d {
                        for k in 0..d {
                            let s: f64 = (0..d).map(|j| gi[i * d + j] * g[j * d + k]).sum();
                            let e = if i == k { 1.0 } else { 0.0 };
                            assert!((s - e).abs() < 1e-12, "{}", chart.name());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn algorithmic_and_central_difference_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in [2, 3] {
            for chart in builtins(d) {
                let cd = chart.clone().central_difference();
                for _ in 0..20 {
                    let x = random_point(&mut rng, d, chart.radius());
                    let a = chart.christoffel(&x).unwrap();
                    let b = cd.christoffel(&x).unwrap();
                    for (p, q) in a.iter().zip(&b) {
                        assert!((p - q).abs() < 1e-6, "{}: {p} vs {q}", chart.name());
                    }
                    let mut acc = vec![0.0; d];
                    let v = random_unit(&chart, &mut rng, &x);
                    chart.geodesic_acceleration(&x, &v, &mut acc);
                    for l in 0..d {
                        let s: f64 = (0..d).flat_map(|j| (0..d).map(move |k| (j, k))).map(|(j, k)| a[(l * d + j) * d + k] * v[j] * v[k]).sum();
                        assert!((acc[l] + s).abs() < 1e-12, "{}", chart.name());
                    }
                }
            }
        }
    }

    #[test]
    fn curvature_operator_is_symmetric_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [2, 3] {
            for chart in builtins(d) {
                for _ in 0..100 {
                    let x = random_point(&mut rng, d, chart.radius());
                    let v = random_unit(&chart, &mut rng, &x);
                    let op = chart.curvature_operator(&x, &v).unwrap();
                    assert!(op.asymmetry() < 1e-9, "{}", chart.name());
                    for e in &op.frame {
                        assert!(chart.inner(&x, e, &v).abs() < 1e-12);
                        assert_relative_eq!(chart.norm(&x, e), 1.0, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_curvature_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for chart in [MetricChart::euclidean(3, 1.0), MetricChart::scaled(2, 1.0, 4.0).unwrap()] {
            let x = random_point(&mut rng, chart.dim(), 1.0);
            let v = random_unit(&chart, &mut rng, &x);
            let op = chart.curvature_operator(&x, &v).unwrap();
            assert!(op.matrix.iter().all(|m| m.abs() < 1e-14));
        }
    }

    #[test]
    fn sphere_cap_curvature_operator_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [2, 3] {
            let chart = MetricChart::sphere_cap(d, 0.9, 1.0).unwrap();
            for _ in 0..100 {
                let x = random_point(&mut rng, d, 0.9);
                let v = random_unit(&chart, &mut rng, &x);
                let op = chart.curvature_operator(&x, &v).unwrap();
                let n = op.size();
                let mut m = DMatrix::from_row_slice(n, n, &op.matrix);
                m -= DMatrix::identity(n, n);
                assert!(m.norm() < 1e-6);
            }
            // same from the finite-difference mode
            let cd = chart.clone().central_difference();
            let x = [0.2, -0.3, 0.1];
            let x = &x[..d];
            let v = chart.normalize(x, &[1.0, 0.5, -0.2][..d]);
            let op = cd.curvature_operator(x, &v).unwrap();
            for a in 0..d - 1 {
                for b in 0..d - 1 {
                    let e = if a == b { 1.0 } else { 0.0 };
                    assert!((op.matrix[a * (d - 1) + b] - e).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn hyperbolic_curvature_is_minus_k() {
        let chart = MetricChart::hyperbolic(3, 0.5, 2.0).unwrap();
        let x = [0.1, 0.2, -0.1];
        let v = chart.normalize(&x, &[0.3, -1.0, 0.4]);
        let op = chart.curvature_operator(&x, &v).unwrap();
        assert_relative_eq!(op.matrix[0], -2.0, epsilon = 1e-10);
        assert_relative_eq!(op.matrix[3], -2.0, epsilon = 1e-10);
        assert!(op.matrix[1].abs() < 1e-10);
    }

    #[test]
    fn errors_are_reported() {
        let c = MetricChart::euclidean(2, 1.0);
        assert!(matches!(c.christoffel(&[1.5, 0.0]), Err(Error::Domain { .. })));
        assert!(matches!(c.curvature_operator(&[0.0, 0.0], &[2.0, 0.0]), Err(Error::Normalization { .. })));
        assert!(MetricChart::hyperbolic(2, 1.0, 1.0).is_err());
        let bad = MetricChart::new(2, 1.0, MetricFamily::Custom { components: vec![Expr::c(1.0), Expr::c(2.0), Expr::c(1.0)] });
        assert!(matches!(bad, Err(Error::Geometry(_))));
    }

    #[test]
    fn sphere_cap_max_length_radius() {
        let c = MetricChart::sphere_cap_with_max_length(2, 2.0, 1.0).unwrap();
        assert_relative_eq!(c.radius(), 0.5f64.tan(), epsilon = 1e-14);
    }
}
