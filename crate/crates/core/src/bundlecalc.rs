//! Differential operators on the unit sphere bundle in local coordinates.
//!
//! A function `u` on SM is handled through its degree-0 homogeneous extension
//! `U(x, y) = u(x, y/|y|_g)`, evaluated as a jet in the `2d` variables `(x, y)`
//! about a point `(x, v)` with `|v|_g = 1`. Every operator below maps
//! homogeneous extensions to homogeneous extensions, so a composition only asks
//! its inner operand for a jet one order higher.

use std::cell::RefCell;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::{orthonormal_basis_of, LocalGeometry, MetricChart};
use crate::jet::Jet;
use crate::quadrature::{BallQuadrature, FiberRule, SpatialRule};
use crate::tensorfield::{contract, FieldRef};

/// A point of SM with jets of the fiber coordinates and of the metric.
#[derive(Debug, Clone)]
pub struct SmPoint {
    geo: Arc<LocalGeometry>,
    v: Vec<f64>,
    y: Vec<Jet>,
    ynorm: Jet,
    /// Jets already computed at this point, keyed by operator address.
    cache: RefCell<Vec<(usize, usize, Vec<Jet>)>>,
}

impl SmPoint {
    /// Jets up to `order` (metric included) at `(x, v)`; `v` must be g-unit.
    pub fn new(chart: &MetricChart, x: &[f64], v: &[f64], order: usize) -> Result<Self> {
        chart.check_point(x)?;
        let geo = LocalGeometry::new(chart, x, 2 * chart.dim(), order)?;
        Self::with_geometry(Arc::new(geo), v)
    }

    /// Shares precomputed geometry (in `2d` variables) between fiber points.
    pub fn with_geometry(geo: Arc<LocalGeometry>, v: &[f64]) -> Result<Self> {
        let d = geo.dim;
        let order = geo.g_order;
        let s = geo.g[0].space();
        if s.nvars() != 2 * d || v.len() != d {
            return Err(Error::Input("sphere-bundle point needs 2d jet variables and a d-vector".into()));
        }
        let y: Vec<Jet> = (0..d).map(|i| Jet::variable(s, order, d + i, v[i])).collect();
        let mut q = Jet::constant(s, order, 0.0);
        for i in 0..d {
            for j in 0..d {
                q.add_product(&geo.g[i * d + j], &(&y[i] * &y[j]));
            }
        }
        let norm = q.value().sqrt();
        if (norm - 1.0).abs() > 1e-10 {
            return Err(Error::Normalization { norm });
        }
        Ok(SmPoint { v: v.to_vec(), y, ynorm: q.sqrt(), geo, cache: RefCell::new(Vec::new()) })
    }

    pub fn dim(&self) -> usize {
        self.geo.dim
    }

    pub fn x(&self) -> &[f64] {
        &self.geo.x
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// Highest jet order available at this point.
    pub fn order(&self) -> usize {
        self.geo.g_order
    }

    pub fn geometry(&self) -> &LocalGeometry {
        &self.geo
    }

    /// `g_x(a, b)` at the base point.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let d = self.dim();
        let mut s = 0.0;
        for i in 0..d {
            for j in 0..d {
                s += self.geo.g[i * d + j].value() * a[i] * b[j];
            }
        }
        s
    }

    fn memo_section(&self, key: usize, k: usize, f: impl FnOnce() -> Vec<Jet>) -> Vec<Jet> {
        let hit = self.cache.borrow().iter().find(|e| e.0 == key && e.1 >= k).map(|e| e.2.iter().map(|j| j.truncated(k)).collect());
        if let Some(v) = hit {
            return v;
        }
        let v = f();
        self.cache.borrow_mut().push((key, k, v.clone()));
        v
    }

    fn memo_fn(&self, key: usize, k: usize, f: impl FnOnce() -> Jet) -> Jet {
        self.memo_section(key, k, || vec![f()]).swap_remove(0)
    }

    fn check_order(&self, k: usize) {
        assert!(k <= self.order(), "jet order {k} requested at a point built for order {}", self.order());
    }

    fn xs(&self, k: usize) -> Vec<Jet> {
        let s = self.geo.g[0].space();
        (0..self.dim()).map(|i| Jet::variable(s, k, i, self.geo.x[i])).collect()
    }

    fn y(&self, k: usize) -> Vec<Jet> {
        self.check_order(k);
        self.y.iter().map(|e| e.truncated(k)).collect()
    }

    fn ynorm(&self, k: usize) -> Jet {
        self.ynorm.truncated(k)
    }

    /// `y / |y|_g`.
    fn yhat(&self, k: usize) -> Vec<Jet> {
        let inv = self.ynorm(k).recip();
        self.y(k).iter().map(|e| e * &inv).collect()
    }

    fn ginv(&self, k: usize) -> Vec<Jet> {
        self.geo.ginv.iter().map(|e| e.truncated(k)).collect()
    }

    fn g(&self, k: usize) -> Vec<Jet> {
        self.geo.g.iter().map(|e| e.truncated(k)).collect()
    }

    /// `Γ^l_{jm} y^m`, stored at `l*d + j`.
    fn gamma_y(&self, k: usize) -> Vec<Jet> {
        let d = self.dim();
        assert!(k < self.order(), "Christoffel jets of order {k} need metric order {}", k + 1);
        let y = self.y(k);
        let s = self.geo.g[0].space();
        let mut out = Vec::with_capacity(d * d);
        for l in 0..d {
            for j in 0..d {
                let mut acc = Jet::constant(s, k, 0.0);
                for (m, ym) in y.iter().enumerate() {
                    acc.add_product(&self.geo.gamma[(l * d + j) * d + m], ym);
                }
                out.push(acc);
            }
        }
        out
    }

    fn gamma_trace(&self, k: usize) -> Vec<Jet> {
        self.geo.gamma_trace.iter().map(|e| e.truncated(k)).collect()
    }

    fn riemann(&self, k: usize) -> Vec<Jet> {
        assert!(k + 2 <= self.order(), "curvature jets of order {k} need metric order {}", k + 2);
        self.geo.riemann.iter().map(|e| e.truncated(k)).collect()
    }
}

/// `δ_j U = ∂_{x^j}U − Γ^l_{jm} y^m ∂_{y^l}U`; `u` has order `k + 1`.
fn delta(u: &Jet, gy: &[Jet], j: usize, d: usize) -> Jet {
    let mut out = u.d(j);
    for l in 0..d {
        let t = &gy[l * d + j] * &u.d(d + l);
        out -= &t;
    }
    out
}

/// A function on SM.
pub trait SmFunction: Send + Sync {
    /// Jet order the point must carry to evaluate this function at order `k`.
    fn need(&self, k: usize) -> usize;
    /// Jet of the homogeneous extension at order `k`.
    fn jet(&self, pt: &SmPoint, k: usize) -> Jet;
}

/// A section of the bundle `N` (vectors orthogonal to `v`).
pub trait Section: Send + Sync {
    fn need(&self, k: usize) -> usize;
    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet>;
}

pub type SmRef = Arc<dyn SmFunction>;
pub type SectionRef = Arc<dyn Section>;

/// Closed-form `u(x, v)` with `v` written as `v1..vd`.
#[derive(Debug, Clone)]
pub struct ExprFunction {
    expr: Expr,
}

impl ExprFunction {
    pub fn new(dim: usize, expr: Expr) -> Result<SmRef> {
        expr.check_dim(dim)?;
        Ok(Arc::new(ExprFunction { expr }))
    }

    pub fn parse(dim: usize, src: &str) -> Result<SmRef> {
        Self::new(dim, Expr::parse(src)?)
    }
}

impl SmFunction for ExprFunction {
    fn need(&self, k: usize) -> usize {
        k
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            self.expr.eval(&pt.xs(k), &pt.yhat(k))
        })
    }
}

/// `f(x, v) = f_{i_1..i_m}(x) v^{i_1}..v^{i_m}` for a symmetric tensor field.
pub struct TensorFunction {
    field: FieldRef,
}

impl TensorFunction {
    pub fn new(field: FieldRef) -> SmRef {
        Arc::new(TensorFunction { field })
    }
}

impl SmFunction for TensorFunction {
    fn need(&self, k: usize) -> usize {
        k.max(self.field.required_g_order(k))
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            let comps = self.field.component_jets(pt.geometry(), k);
            contract(&comps, self.field.dim(), self.field.order(), &pt.yhat(k))
        })
    }
}

/// `Σ c_i u_i`.
pub struct FunctionCombination {
    terms: Vec<(f64, SmRef)>,
}

impl FunctionCombination {
    pub fn new(terms: Vec<(f64, SmRef)>) -> SmRef {
        Arc::new(FunctionCombination { terms })
    }
}

impl SmFunction for FunctionCombination {
    fn need(&self, k: usize) -> usize {
        self.terms.iter().map(|(_, u)| u.need(k)).max().unwrap_or(k)
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            let s = pt.geometry().g[0].space();
            let mut acc = Jet::constant(s, k, 0.0);
            for (c, u) in &self.terms {
                acc.axpy(*c, &u.jet(pt, k));
            }
            acc
        })
    }
}

/// `X u`, the geodesic vector field.
pub struct XScalar {
    u: SmRef,
}

pub fn x_scalar(u: SmRef) -> SmRef {
    Arc::new(XScalar { u })
}

impl SmFunction for XScalar {
    fn need(&self, k: usize) -> usize {
        self.u.need(k + 1).max(k + 1)
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let u = self.u.jet(pt, k + 1);
            let gy = pt.gamma_y(k);
            let y = pt.y(k);
            let mut acc = Jet::constant(u.space(), k, 0.0);
            for (j, yj) in y.iter().enumerate() {
                acc.add_product(yj, &delta(&u, &gy, j, d));
            }
            &acc / &pt.ynorm(k)
        })
    }
}

/// `∇_v u = g^{kl} ∂_{y^l} U` on SM.
pub struct Vgrad {
    u: SmRef,
}

pub fn vgrad(u: SmRef) -> SectionRef {
    Arc::new(Vgrad { u })
}

impl Section for Vgrad {
    fn need(&self, k: usize) -> usize {
        self.u.need(k + 1).max(k)
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let u = self.u.jet(pt, k + 1);
            let du: Vec<Jet> = (0..d).map(|l| u.d(d + l)).collect();
            let ginv = pt.ginv(k);
            let n = pt.ynorm(k);
            (0..d)
                .map(|a| {
                    let mut acc = Jet::constant(u.space(), k, 0.0);
                    for (l, dl) in du.iter().enumerate() {
                        acc.add_product(&ginv[a * d + l], dl);
                    }
                    &acc * &n
                })
                .collect()
        })
    }
}

/// `∇_h u = δ^j u − (v^k δ_k u) v^j`.
pub struct Hgrad {
    u: SmRef,
}

pub fn hgrad(u: SmRef) -> SectionRef {
    Arc::new(Hgrad { u })
}

impl Section for Hgrad {
    fn need(&self, k: usize) -> usize {
        self.u.need(k + 1).max(k + 1)
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let u = self.u.jet(pt, k + 1);
            let gy = pt.gamma_y(k);
            let du: Vec<Jet> = (0..d).map(|l| delta(&u, &gy, l, d)).collect();
            let y = pt.y(k);
            let n = pt.ynorm(k);
            let n2 = &n * &n;
            let mut s = Jet::constant(u.space(), k, 0.0);
            for (ym, dm) in y.iter().zip(&du) {
                s.add_product(ym, dm);
            }
            let s = &s / &n2;
            let ginv = pt.ginv(k);
            (0..d)
                .map(|a| {
                    let mut acc = Jet::constant(u.space(), k, 0.0);
                    for (l, dl) in du.iter().enumerate() {
                        acc.add_product(&ginv[a * d + l], dl);
                    }
                    let t = &s * &y[a];
                    acc -= &t;
                    acc
                })
                .collect()
        })
    }
}

/// Covariant derivative of a section along the geodesic flow.
pub struct XSection {
    z: SectionRef,
}

pub fn x_section(z: SectionRef) -> SectionRef {
    Arc::new(XSection { z })
}

impl Section for XSection {
    fn need(&self, k: usize) -> usize {
        self.z.need(k + 1).max(k + 1)
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let z = self.z.jets(pt, k + 1);
            let gy = pt.gamma_y(k);
            let y = pt.y(k);
            let n = pt.ynorm(k);
            (0..d)
                .map(|j| {
                    let mut acc = Jet::constant(n.space(), k, 0.0);
                    for (i, yi) in y.iter().enumerate() {
                        acc.add_product(yi, &delta(&z[j], &gy, i, d));
                    }
                    for (m, zm) in z.iter().enumerate() {
                        acc.add_product(&gy[j * d + m], &zm.truncated(k));
                    }
                    &acc / &n
                })
                .collect()
        })
    }
}

/// `div_v Z = ∂_{y^j} Z^j` (times `|y|` to keep the extension homogeneous).
pub struct Vdiv {
    z: SectionRef,
}

pub fn vdiv(z: SectionRef) -> SmRef {
    Arc::new(Vdiv { z })
}

impl SmFunction for Vdiv {
    fn need(&self, k: usize) -> usize {
        self.z.need(k + 1).max(k)
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let z = self.z.jets(pt, k + 1);
            let mut acc = Jet::constant(z[0].space(), k, 0.0);
            for (j, zj) in z.iter().enumerate() {
                acc += &zj.d(d + j);
            }
            &acc * &pt.ynorm(k)
        })
    }
}

/// `div_h Z = (δ_j + Γ_j) Z^j`.
pub struct Hdiv {
    z: SectionRef,
}

pub fn hdiv(z: SectionRef) -> SmRef {
    Arc::new(Hdiv { z })
}

impl SmFunction for Hdiv {
    fn need(&self, k: usize) -> usize {
        self.z.need(k + 1).max(k + 1)
    }

    fn jet(&self, pt: &SmPoint, k: usize) -> Jet {
        pt.memo_fn(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let z = self.z.jets(pt, k + 1);
            let gy = pt.gamma_y(k);
            let gt = pt.gamma_trace(k);
            let mut acc = Jet::constant(z[0].space(), k, 0.0);
            for (j, zj) in z.iter().enumerate() {
                acc += &delta(zj, &gy, j, d);
                acc.add_product(&gt[j], &zj.truncated(k));
            }
            acc
        })
    }
}

/// `Z ↦ R(Z, v)v`.
pub struct Curvature {
    z: SectionRef,
}

pub fn curvature(z: SectionRef) -> SectionRef {
    Arc::new(Curvature { z })
}

impl Section for Curvature {
    fn need(&self, k: usize) -> usize {
        self.z.need(k).max(k + 2)
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let z = self.z.jets(pt, k);
            let r = pt.riemann(k);
            let y = pt.y(k);
            let n = pt.ynorm(k);
            let inv = (&n * &n).recip();
            // w^{ik} = R^i_{jkl} y^j y^l
            (0..d)
                .map(|i| {
                    let mut acc = Jet::constant(n.space(), k, 0.0);
                    for (kk, zk) in z.iter().enumerate() {
                        let mut w = Jet::constant(n.space(), k, 0.0);
                        for j in 0..d {
                            for l in 0..d {
                                w.add_product(&r[((i * d + j) * d + kk) * d + l], &(&y[j] * &y[l]));
                            }
                        }
                        acc.add_product(&w, zk);
                    }
                    &acc * &inv
                })
                .collect()
        })
    }
}

/// `Δ = −div_v ∇_v`.
pub fn vertical_laplacian(u: SmRef) -> SmRef {
    FunctionCombination::new(vec![(-1.0, vdiv(vgrad(u)))])
}

/// Section built from closed-form components `W^j(x, v)`, projected onto
/// `{v}^⊥` so that it is tangent by construction.
#[derive(Debug, Clone)]
pub struct ProjectedSection {
    comps: Vec<Expr>,
}

impl ProjectedSection {
    pub fn new(dim: usize, comps: Vec<Expr>) -> Result<SectionRef> {
        if comps.len() != dim {
            return Err(Error::Input(format!("section needs {dim} components, got {}", comps.len())));
        }
        for c in &comps {
            c.check_dim(dim)?;
        }
        Ok(Arc::new(ProjectedSection { comps }))
    }
}

impl Section for ProjectedSection {
    fn need(&self, k: usize) -> usize {
        k
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let d = pt.dim();
            let xs = pt.xs(k);
            let yh = pt.yhat(k);
            let w: Vec<Jet> = self.comps.iter().map(|c| c.eval(&xs, &yh)).collect();
            let g = pt.g(k);
            let mut s = Jet::constant(yh[0].space(), k, 0.0);
            for a in 0..d {
                for b in 0..d {
                    s.add_product(&g[a * d + b], &(&w[a] * &yh[b]));
                }
            }
            w.iter().zip(&yh).map(|(wa, ya)| wa - &(&s * ya)).collect()
        })
    }
}

/// `Σ c_i Z_i`.
pub struct SectionCombination {
    terms: Vec<(f64, SectionRef)>,
}

impl SectionCombination {
    pub fn new(terms: Vec<(f64, SectionRef)>) -> SectionRef {
        Arc::new(SectionCombination { terms })
    }
}

impl Section for SectionCombination {
    fn need(&self, k: usize) -> usize {
        self.terms.iter().map(|(_, z)| z.need(k)).max().unwrap_or(k)
    }

    fn jets(&self, pt: &SmPoint, k: usize) -> Vec<Jet> {
        pt.memo_section(self as *const Self as *const () as usize, k, || {
            let s = pt.geometry().g[0].space();
            let mut acc = vec![Jet::constant(s, k, 0.0); pt.dim()];
            for (c, z) in &self.terms {
                for (a, zj) in acc.iter_mut().zip(z.jets(pt, k)) {
                    a.axpy(*c, &zj);
                }
            }
            acc
        })
    }
}

/// `u(x, v)`.
pub fn eval(chart: &MetricChart, u: &dyn SmFunction, x: &[f64], v: &[f64]) -> Result<f64> {
    let pt = SmPoint::new(chart, x, v, u.need(0))?;
    Ok(u.jet(&pt, 0).value())
}

/// `Z(x, v)`, checking that the result is orthogonal to `v`.
pub fn eval_section(chart: &MetricChart, z: &dyn Section, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let pt = SmPoint::new(chart, x, v, z.need(0))?;
    let out: Vec<f64> = z.jets(&pt, 0).iter().map(Jet::value).collect();
    let tangency = pt.inner(&out, v).abs();
    let scale = 1.0 + pt.inner(&out, &out).sqrt();
    if tangency > 1e-8 * scale {
        return Err(Error::Consistency(format!("section has component {tangency:e} along v at x = {x:?}")));
    }
    Ok(out)
}

/// Pointwise residuals of the five commutator formulas at `(x, v)`:
/// `[X,∇_v]u + ∇_h u`, `[X,∇_h]u − R∇_v u`, `div_h∇_v u − div_v∇_h u − (d−1)Xu`,
/// `[X,div_v]Z + div_h Z`, `[X,div_h]Z − div_v RZ`. Section residuals are g-norms.
///
/// The last sign is the one forced by taking `L²` adjoints of `[X,∇_h] = R∇_v`
/// (`X* = −X`, `∇_h* = −div_h`, `∇_v* = −div_v`, `R` symmetric).
pub fn commutator_residuals(chart: &MetricChart, u: &SmRef, z: &SectionRef, x: &[f64], v: &[f64]) -> Result<[f64; 5]> {
    let d = chart.dim() as f64;
    let xu = x_scalar(u.clone());
    let c1 = SectionCombination::new(vec![(1.0, x_section(vgrad(u.clone()))), (-1.0, vgrad(xu.clone())), (1.0, hgrad(u.clone()))]);
    let c2 = SectionCombination::new(vec![(1.0, x_section(hgrad(u.clone()))), (-1.0, hgrad(xu.clone())), (-1.0, curvature(vgrad(u.clone())))]);
    let c3 = FunctionCombination::new(vec![(1.0, hdiv(vgrad(u.clone()))), (-1.0, vdiv(hgrad(u.clone()))), (-(d - 1.0), xu)]);
    let c4 = FunctionCombination::new(vec![(1.0, x_scalar(vdiv(z.clone()))), (-1.0, vdiv(x_section(z.clone()))), (1.0, hdiv(z.clone()))]);
    let c5 = FunctionCombination::new(vec![(1.0, x_scalar(hdiv(z.clone()))), (-1.0, hdiv(x_section(z.clone()))), (-1.0, vdiv(curvature(z.clone())))]);
    let need = [c1.need(0), c2.need(0), c3.need(0), c4.need(0), c5.need(0)].into_iter().max().unwrap();
    let pt = SmPoint::new(chart, x, v, need)?;
    let snorm = |z: Vec<Jet>| {
        let w: Vec<f64> = z.iter().map(Jet::value).collect();
        pt.inner(&w, &w).sqrt()
    };
    Ok([snorm(c1.jets(&pt, 0)), snorm(c2.jets(&pt, 0)), c3.jet(&pt, 0).value().abs(), c4.jet(&pt, 0).value().abs(), c5.jet(&pt, 0).value().abs()])
}

/// Resolution of the product quadrature on SM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmQuadratureSpec {
    pub spatial: SpatialRule,
    /// Fiber angles for `d = 2`.
    pub angles: usize,
    /// Gauss–Legendre polar nodes for `d = 3`.
    pub polar: usize,
    /// Uniform azimuths for `d = 3`.
    pub azimuth: usize,
    /// Rotation of the fiber parametrization.
    #[serde(default)]
    pub offset: f64,
}

impl SmQuadratureSpec {
    pub fn default_for(dim: usize) -> Self {
        let spatial = if dim == 2 {
            SpatialRule::Cartesian { spacing: 1.0 / 8.0, gauss_points: 2, depth: 2 }
        } else {
            SpatialRule::Cartesian { spacing: 1.0 / 4.0, gauss_points: 2, depth: 1 }
        };
        SmQuadratureSpec { spatial, angles: 64, polar: 16, azimuth: 32, offset: 0.0 }
    }

    /// Four times as many spatial and fiber samples.
    pub fn refined(&self, dim: usize) -> Self {
        let spatial = match self.spatial {
            SpatialRule::Cartesian { spacing, gauss_points, depth } => {
                SpatialRule::Cartesian { spacing: spacing / 4f64.powf(1.0 / dim as f64), gauss_points, depth }
            }
            SpatialRule::Polar { radial, angular } => {
                // d = 2: 2 × 2; d = 3: radial and both sphere directions grow by 4^{1/3}
                if dim == 2 {
                    SpatialRule::Polar { radial: 2 * radial, angular: 2 * angular }
                } else {
                    let f = 4f64.powf(1.0 / 3.0);
                    SpatialRule::Polar { radial: (radial as f64 * f).round() as usize, angular: (angular as f64 * f).round() as usize }
                }
            }
        };
        SmQuadratureSpec { spatial, angles: 4 * self.angles, polar: 2 * self.polar, azimuth: 2 * self.azimuth, offset: self.offset }
    }
}

/// Product quadrature: spatial rule times a fiber rule in a g-orthonormal frame.
#[derive(Debug, Clone)]
pub struct SmQuadrature {
    pub spec: SmQuadratureSpec,
    pub spatial: BallQuadrature,
    pub fiber: FiberRule,
}

impl SmQuadrature {
    pub fn new(chart: &MetricChart, spec: &SmQuadratureSpec) -> Result<Self> {
        let spatial = spec.spatial.build(chart.dim(), chart.radius())?;
        let fiber = FiberRule::new(chart.dim(), spec.angles, spec.polar, spec.azimuth, spec.offset)?;
        if spatial.is_empty() || fiber.weights.is_empty() {
            return Err(Error::Input("empty sphere-bundle quadrature".into()));
        }
        Ok(SmQuadrature { spec: spec.clone(), spatial, fiber })
    }

    pub fn len(&self) -> usize {
        self.spatial.len() * self.fiber.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integrates `n` quantities over SM with jets of order `need` at every
    /// point. Per-point sums are computed in parallel and reduced in point order.
    pub fn integrate(
        &self,
        chart: &MetricChart,
        need: usize,
        n: usize,
        f: &(dyn Fn(&SmPoint) -> Vec<f64> + Sync),
    ) -> Result<Vec<f64>> {
        let d = chart.dim();
        let partial: Vec<Result<Vec<f64>>> = (0..self.spatial.len())
            .into_par_iter()
            .map(|p| {
                let x = &self.spatial.points[p];
                let geo = Arc::new(LocalGeometry::new(chart, x, 2 * d, need)?);
                let frame = orthonormal_basis_of(&geo.g_value(), d)
                    .ok_or_else(|| Error::Geometry(format!("metric is not positive definite at {x:?}")))?;
                let mut acc = vec![0.0; n];
                for (dir, w) in self.fiber.dirs.iter().zip(&self.fiber.weights) {
                    let mut v = vec![0.0; d];
                    for (a, e) in frame.iter().enumerate() {
                        for (vi, ei) in v.iter_mut().zip(e) {
                            *vi += dir[a] * ei;
                        }
                    }
                    let pt = SmPoint::with_geometry(geo.clone(), &v)?;
                    for (ai, vi) in acc.iter_mut().zip(f(&pt)) {
                        *ai += w * vi;
                    }
                }
                let scale = self.spatial.weights[p] * geo.sqrt_det;
                acc.iter_mut().for_each(|a| *a *= scale);
                Ok(acc)
            })
            .collect();
        let mut total = vec![0.0; n];
        for r in partial {
            for (t, a) in total.iter_mut().zip(r?) {
                *t += a;
            }
        }
        Ok(total)
    }
}

/// `(u, w)` on `L²(SM)`.
pub fn l2_inner_sm(chart: &MetricChart, u: &dyn SmFunction, w: &dyn SmFunction, quad: &SmQuadrature) -> Result<f64> {
    let need = u.need(0).max(w.need(0));
    Ok(quad.integrate(chart, need, 1, &|pt| vec![u.jet(pt, 0).value() * w.jet(pt, 0).value()])?[0])
}

/// `(Z, W)` on `L²(N)` with the pointwise inner product `g_x`.
pub fn l2_inner_sections(chart: &MetricChart, z: &dyn Section, w: &dyn Section, quad: &SmQuadrature) -> Result<f64> {
    let need = z.need(0).max(w.need(0));
    Ok(quad.integrate(chart, need, 1, &|pt| {
        let a: Vec<f64> = z.jets(pt, 0).iter().map(Jet::value).collect();
        let b: Vec<f64> = w.jets(pt, 0).iter().map(Jet::value).collect();
        vec![pt.inner(&a, &b)]
    })?[0])
}

/// Random polynomial in `x` (degree `x_degree`, scaled to the chart) times
/// random polynomials in `v` (degree `v_degree`).
pub fn random_sm_expr<R: Rng>(rng: &mut R, dim: usize, radius: f64, x_degree: usize, v_degree: usize) -> Expr {
    let mut out = Expr::c(0.0);
    for mono in monomials(dim, v_degree) {
        let mut vpart = Expr::c(1.0);
        for (i, &e) in mono.iter().enumerate() {
            if e > 0 {
                vpart = vpart * Expr::v(i).powi(e as i32);
            }
        }
        let xpart = crate::tensorfield::random_polynomial(rng, dim, x_degree, radius);
        out = out + xpart * vpart;
    }
    out
}

fn monomials(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut e = vec![0usize; dim];
    loop {
        if e.iter().sum::<usize>() <= degree {
            out.push(e.clone());
        }
        let mut i = 0;
        loop {
            if i == dim {
                return out;
            }
            e[i] += 1;
            if e[i] <= degree {
                break;
            }
            e[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesics::{flow, PhasePoint};
    use crate::tensorfield::{boundary_weight, random_field, ExprTensorField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn charts2() -> Vec<MetricChart> {
        vec![
            MetricChart::euclidean(2, 1.0),
            MetricChart::conformal(2, 1.0, "exp(0.3*x1 - 0.2*x2^2)").unwrap(),
            MetricChart::sphere_cap(2, 0.8, 1.0).unwrap(),
            MetricChart::hyperbolic(2, 0.8, 1.0).unwrap(),
        ]
    }

    fn random_sample(rng: &mut ChaCha8Rng, chart: &MetricChart) -> (Vec<f64>, Vec<f64>) {
        let d = chart.dim();
        let r = chart.radius();
        loop {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-r..r)).collect();
            if x.iter().map(|a| a * a).sum::<f64>().sqrt() < 0.95 * r {
                let w: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                return (x.clone(), chart.normalize(&x, &w));
            }
        }
    }

    #[test]
    fn degree_zero_extension_is_scale_invariant() {
        let chart = MetricChart::conformal(2, 1.0, "exp(0.3*x1)").unwrap();
        let u = Expr::parse("x1*v1^3 + cos(v2)*x2").unwrap();
        let f = ExprFunction::new(2, u.clone()).unwrap();
        let x = [0.2, -0.3];
        let v = chart.normalize(&x, &[0.6, 0.8]);
        let pt = SmPoint::new(&chart, &x, &v, 2).unwrap();
        let j = f.jet(&pt, 2);
        // Euler: y·∂_y U = 0 and the value matches the closed form
        let euler: f64 = (0..2).map(|i| v[i] * j.partial(2 + i)).sum();
        assert!(euler.abs() < 1e-12);
        assert!((j.value() - u.eval_f64(&x, &v)).abs() < 1e-12);
    }

    #[test]
    fn x_on_tensor_matches_flow_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for chart in charts2() {
            let f: FieldRef = Arc::new(random_field(&mut rng, 2, 2, 2, chart.radius()).unwrap());
            let u = TensorFunction::new(f.clone());
            let xu = x_scalar(u.clone());
            for _ in 0..5 {
                let (x, v) = random_sample(&mut rng, &chart);
                let h = 1e-4;
                let p = PhasePoint::new(x.clone(), v.clone());
                let a = flow(&chart, &p, h, h / 4.0).unwrap();
                let b = flow(&chart, &p, -h, h / 4.0).unwrap();
                let fd = (eval(&chart, u.as_ref(), &a.x, &a.v).unwrap() - eval(&chart, u.as_ref(), &b.x, &b.v).unwrap()) / (2.0 * h);
                let exact = eval(&chart, xu.as_ref(), &x, &v).unwrap();
                assert!((fd - exact).abs() < 1e-6, "{}: {fd} vs {exact}", chart.name());
            }
        }
    }

    #[test]
    fn x_section_matches_covariant_flow_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let chart = MetricChart::conformal(2, 1.0, "exp(0.3*x1 - 0.2*x2^2)").unwrap();
        let z = ProjectedSection::new(2, vec![Expr::parse("x1*v2 + x2^2").unwrap(), Expr::parse("v1*v2 - x1").unwrap()]).unwrap();
        let xz = x_section(z.clone());
        for _ in 0..5 {
            let (x, v) = random_sample(&mut rng, &chart);
            let h = 1e-4;
            let p = PhasePoint::new(x.clone(), v.clone());
            let a = flow(&chart, &p, h, h / 4.0).unwrap();
            let b = flow(&chart, &p, -h, h / 4.0).unwrap();
            let za = eval_section(&chart, z.as_ref(), &a.x, &a.v).unwrap();
            let zb = eval_section(&chart, z.as_ref(), &b.x, &b.v).unwrap();
            let z0 = eval_section(&chart, z.as_ref(), &x, &v).unwrap();
            // D_t Z = dZ/dt + Γ(v, Z)
            let gamma = chart.christoffel(&x).unwrap();
            let exact = eval_section(&chart, xz.as_ref(), &x, &v).unwrap();
            for l in 0..2 {
                let mut g = 0.0;
                for j in 0..2 {
                    for k in 0..2 {
                        g += gamma[(l * 2 + j) * 2 + k] * v[j] * z0[k];
                    }
                }
                let fd = (za[l] - zb[l]) / (2.0 * h) + g;
                assert!((fd - exact[l]).abs() < 1e-6, "{fd} vs {}", exact[l]);
            }
        }
    }

    #[test]
    fn gradients_are_tangent_and_trivial_cases_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for chart in charts2() {
            let u = ExprFunction::new(2, random_sm_expr(&mut rng, 2, chart.radius(), 2, 3)).unwrap();
            let base = ExprFunction::parse(2, "x1^2*x2 + sin(x1)").unwrap();
            let one = ExprFunction::parse(2, "1").unwrap();
            for _ in 0..50 {
                let (x, v) = random_sample(&mut rng, &chart);
                for z in [vgrad(u.clone()), hgrad(u.clone()), x_section(vgrad(u.clone())), curvature(hgrad(u.clone()))] {
                    eval_section(&chart, z.as_ref(), &x, &v).unwrap();
                }
                let zv = eval_section(&chart, vgrad(base.clone()).as_ref(), &x, &v).unwrap();
                assert!(zv.iter().all(|c| c.abs() < 1e-13));
                assert!(eval(&chart, x_scalar(one.clone()).as_ref(), &x, &v).unwrap().abs() < 1e-13);
                assert!(eval(&chart, vertical_laplacian(base.clone()).as_ref(), &x, &v).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euclidean_gradients_match_closed_forms() {
        let chart = MetricChart::euclidean(2, 1.0);
        let u = ExprFunction::parse(2, "x1^2*x2 + x2").unwrap();
        let c = ExprFunction::parse(2, "v1").unwrap();
        for k in 0..8 {
            let t = 0.3 + k as f64 * 0.7;
            let x = [0.3, -0.2];
            let v = [t.cos(), t.sin()];
            let grad = [2.0 * x[0] * x[1], x[0] * x[0] + 1.0];
            let dot = grad[0] * v[0] + grad[1] * v[1];
            let h = eval_section(&chart, hgrad(u.clone()).as_ref(), &x, &v).unwrap();
            for i in 0..2 {
                assert!((h[i] - (grad[i] - dot * v[i])).abs() < 1e-13);
            }
            assert!((eval(&chart, x_scalar(u.clone()).as_ref(), &x, &v).unwrap() - dot).abs() < 1e-13);
            let zv = eval_section(&chart, vgrad(c.clone()).as_ref(), &x, &v).unwrap();
            assert!((zv[0] * zv[0] + zv[1] * zv[1] - t.sin().powi(2)).abs() < 1e-13);
        }
    }

    #[test]
    fn vertical_laplacian_eigenfunctions() {
        let chart = MetricChart::conformal(2, 1.0, "0.2*x1").unwrap();
        // cos(3θ) in a g-orthonormal frame: g = exp(0.4 x1) δ, v = exp(-0.2 x1)(cos θ, sin θ)
        let cos3 = ExprFunction::parse(2, "4*(v1*exp(0.2*x1))^3 - 3*v1*exp(0.2*x1)").unwrap();
        let lap = vertical_laplacian(cos3.clone());
        for k in 0..6 {
            let t = 0.1 + k as f64;
            let x = [0.3, 0.1];
            let v = chart.normalize(&x, &[t.cos(), t.sin()]);
            let a = eval(&chart, lap.as_ref(), &x, &v).unwrap();
            let b = eval(&chart, cos3.as_ref(), &x, &v).unwrap();
            assert!((a - 9.0 * b).abs() < 1e-10, "{a} vs {}", 9.0 * b);
        }
        let chart3 = MetricChart::conformal(3, 1.0, "exp(0.2*x3)").unwrap();
        // degree-2 harmonic v1*v2 on the 2-sphere of a conformal metric: eigenvalue 2·3 = 6
        let h = ExprFunction::parse(3, "v1*v2").unwrap();
        let lap = vertical_laplacian(h.clone());
        let x = [0.1, 0.2, -0.3];
        let v = chart3.normalize(&x, &[0.3, -0.5, 0.7]);
        let a = eval(&chart3, lap.as_ref(), &x, &v).unwrap();
        let b = eval(&chart3, h.as_ref(), &x, &v).unwrap();
        assert!((a - 6.0 * b).abs() < 1e-10);
    }

    #[test]
    fn commutators_hold_on_every_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut charts = charts2();
        charts.push(MetricChart::conformal(3, 1.0, "exp(0.2*x1 + 0.1*x2*x3)").unwrap());
        for chart in charts {
            let d = chart.dim();
            let u = ExprFunction::new(d, random_sm_expr(&mut rng, d, chart.radius(), 2, 2)).unwrap();
            let comps = (0..d).map(|_| random_sm_expr(&mut rng, d, chart.radius(), 2, 1)).collect();
            let z = ProjectedSection::new(d, comps).unwrap();
            for _ in 0..20 {
                let (x, v) = random_sample(&mut rng, &chart);
                let r = commutator_residuals(&chart, &u, &z, &x, &v).unwrap();
                assert!(r.iter().all(|e| *e < 1e-9), "{}: {r:?}", chart.name());
            }
        }
    }

    #[test]
    fn opposite_sign_of_last_commutator_fails_on_curved_metrics() {
        let chart = MetricChart::sphere_cap(2, 0.8, 1.0).unwrap();
        let z = ProjectedSection::new(2, vec![Expr::parse("x1*v2 + v1^2").unwrap(), Expr::parse("x2 - v1*v2").unwrap()]).unwrap();
        let x = [0.1, 0.3];
        let v = chart.normalize(&x, &[0.6, -0.8]);
        let lhs = FunctionCombination::new(vec![(1.0, x_scalar(hdiv(z.clone()))), (-1.0, hdiv(x_section(z.clone())))]);
        let a = eval(&chart, lhs.as_ref(), &x, &v).unwrap();
        let b = eval(&chart, vdiv(curvature(z.clone())).as_ref(), &x, &v).unwrap();
        assert!((a - b).abs() < 1e-10);
        assert!((a + b).abs() > 1e-3);
    }

    #[test]
    fn inner_products_on_sm() {
        let chart = MetricChart::euclidean(2, 1.0);
        let spec = SmQuadratureSpec { spatial: SpatialRule::Polar { radial: 8, angular: 16 }, ..SmQuadratureSpec::default_for(2) };
        let quad = SmQuadrature::new(&chart, &spec).unwrap();
        let one = ExprFunction::parse(2, "1").unwrap();
        let vol = l2_inner_sm(&chart, one.as_ref(), one.as_ref(), &quad).unwrap();
        assert!((vol - 2.0 * PI * PI).abs() < 1e-4 * vol);
        let c = ExprFunction::parse(2, "v1").unwrap();
        let s = ExprFunction::parse(2, "v2").unwrap();
        assert!(l2_inner_sm(&chart, c.as_ref(), s.as_ref(), &quad).unwrap().abs() < 1e-10);
        // unit section orthogonal to v: |Z| = 1
        let z = ProjectedSection::new(2, vec![Expr::parse("-v2").unwrap(), Expr::parse("v1").unwrap()]).unwrap();
        let zz = l2_inner_sections(&chart, z.as_ref(), z.as_ref(), &quad).unwrap();
        assert!((zz - 2.0 * PI * PI).abs() < 1e-4 * vol);
    }

    #[test]
    fn adjointness_and_frame_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let chart = MetricChart::conformal(2, 0.9, "0.3*x1 - 0.2*x2^2").unwrap();
        let w3 = boundary_weight(2, chart.radius(), 3);
        let u = ExprFunction::new(2, w3.clone() * random_sm_expr(&mut rng, 2, chart.radius(), 2, 2)).unwrap();
        let comps = (0..2).map(|_| random_sm_expr(&mut rng, 2, chart.radius(), 1, 2)).collect();
        let z = ProjectedSection::new(2, comps).unwrap();
        // polar rule: cut Cartesian cells limit the horizontal pairing to ~1e-4
        let spec = SmQuadratureSpec { spatial: SpatialRule::Polar { radial: 12, angular: 32 }, ..SmQuadratureSpec::default_for(2) };
        let quad = SmQuadrature::new(&chart, &spec).unwrap();
        let a = l2_inner_sections(&chart, vgrad(u.clone()).as_ref(), z.as_ref(), &quad).unwrap();
        let b = l2_inner_sm(&chart, u.as_ref(), vdiv(z.clone()).as_ref(), &quad).unwrap();
        assert!((a + b).abs() < 1e-6 * a.abs().max(b.abs()), "{a} {b}");
        let a = l2_inner_sections(&chart, hgrad(u.clone()).as_ref(), z.as_ref(), &quad).unwrap();
        let b = l2_inner_sm(&chart, u.as_ref(), hdiv(z.clone()).as_ref(), &quad).unwrap();
        assert!((a + b).abs() < 1e-6 * a.abs().max(b.abs()), "{a} {b}");
        let rotated = SmQuadrature::new(&chart, &SmQuadratureSpec { offset: 0.37, ..spec }).unwrap();
        let p = l2_inner_sm(&chart, u.as_ref(), u.as_ref(), &quad).unwrap();
        let q = l2_inner_sm(&chart, u.as_ref(), u.as_ref(), &rotated).unwrap();
        assert!((p - q).abs() < 1e-8 * p);
    }

    #[test]
    fn trace_free_part_is_an_eigenfunction() {
        let chart = MetricChart::conformal(2, 1.0, "exp(0.3*x1)").unwrap();
        let f = ExprTensorField::parse(2, 2, &["x1 + 1", "x2", "x1*x2 - 2"]).unwrap();
        let pieces = crate::tensorfield::degree_decompose(Arc::new(f));
        let f2 = TensorFunction::new(pieces[0].clone());
        let lap = vertical_laplacian(f2.clone());
        let x = [0.2, -0.4];
        for k in 0..5 {
            let t = k as f64 * 1.1;
            let v = chart.normalize(&x, &[t.cos(), t.sin()]);
            let a = eval(&chart, lap.as_ref(), &x, &v).unwrap();
            let b = eval(&chart, f2.as_ref(), &x, &v).unwrap();
            assert!((a - 4.0 * b).abs() < 1e-9);
        }
    }
}
