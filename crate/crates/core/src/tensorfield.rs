//! Symmetric covariant tensor fields on the chart.
//!
//! Components are stored once per nondecreasing multi-index. A field hands out
//! its components as jets in the spatial variables of a [`LocalGeometry`], so
//! derived fields (`d^s h`, `δf`, degree components) compose with exact
//! derivatives.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::{LocalGeometry, MetricChart};
use crate::jet::{self, Jet, Real};
use crate::linalg::{self, CsrMatrix};
use crate::quadrature::{BallQuadrature, CellRule, SpatialRule};

/// Largest tensor order with a precomputed index set.
pub const MAX_TENSOR_ORDER: usize = 10;

/// Nondecreasing multi-indices of length `order` over `0..dim`, in
/// lexicographic order, with their permutation counts.
#[derive(Debug)]
pub struct IndexSet {
    pub dim: usize,
    pub order: usize,
    pub list: Vec<Vec<usize>>,
    pub mult: Vec<f64>,
    /// Storage slot of every full index, flattened row-major over `dim^order`.
    full_to_storage: Vec<usize>,
}

impl IndexSet {
    fn build(dim: usize, order: usize) -> Self {
        let mut list = Vec::new();
        let mut cur = Vec::with_capacity(order);
        fn rec(dim: usize, order: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == order {
                out.push(cur.clone());
                return;
            }
            for i in start..dim {
                cur.push(i);
                rec(dim, order, i, cur, out);
                cur.pop();
            }
        }
        rec(dim, order, 0, &mut cur, &mut list);
        let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
        let mult = list
            .iter()
            .map(|idx| {
                let mut counts = [0usize; 3];
                for &i in idx {
                    counts[i] += 1;
                }
                fact(order) / counts.iter().map(|&c| fact(c)).product::<f64>()
            })
            .collect();
        let mut set = IndexSet { dim, order, list, mult, full_to_storage: Vec::new() };
        let total = dim.pow(order as u32);
        let mut f2s = Vec::with_capacity(total);
        for flat in 0..total {
            let mut idx = full_index(flat, dim, order);
            idx.sort_unstable();
            f2s.push(set.position_sorted(&idx));
        }
        set.full_to_storage = f2s;
        set
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    fn position_sorted(&self, idx: &[usize]) -> usize {
        self.list.binary_search_by(|probe| probe.as_slice().cmp(idx)).expect("index within range")
    }

    /// Storage slot of an arbitrary (unsorted) multi-index.
    pub fn position(&self, idx: &[usize]) -> usize {
        let mut s: SmallVec<[usize; 12]> = SmallVec::from_slice(idx);
        s.sort_unstable();
        self.position_sorted(&s)
    }

    /// Storage slot of the monomial with exponent vector `exps`.
    pub fn position_exps(&self, exps: &[u8]) -> usize {
        let mut s: SmallVec<[usize; 12]> = SmallVec::new();
        for (i, &e) in exps.iter().enumerate() {
            for _ in 0..e {
                s.push(i);
            }
        }
        self.position_sorted(&s)
    }

    pub fn exps(&self, slot: usize) -> [u8; 3] {
        let mut e = [0u8; 3];
        for &i in &self.list[slot] {
            e[i] += 1;
        }
        e
    }

    pub fn full_to_storage(&self) -> &[usize] {
        &self.full_to_storage
    }
}

fn full_index(mut flat: usize, dim: usize, order: usize) -> Vec<usize> {
    let mut idx = vec![0; order];
    for s in (0..order).rev() {
        idx[s] = flat % dim;
        flat /= dim;
    }
    idx
}

/// Shared index set for `dim ∈ {1,2,3}` and `order <= MAX_TENSOR_ORDER`.
pub fn index_set(dim: usize, order: usize) -> &'static IndexSet {
    static SETS: OnceLock<Vec<Vec<IndexSet>>> = OnceLock::new();
    assert!((1..=3).contains(&dim) && order <= MAX_TENSOR_ORDER, "unsupported tensor shape d={dim} m={order}");
    let sets = SETS.get_or_init(|| (1..=3).map(|d| (0..=MAX_TENSOR_ORDER).map(|m| IndexSet::build(d, m)).collect()).collect());
    &sets[dim - 1][order]
}

/// `f(x, v) = f_{i1..im} v^{i1}..v^{im}` from stored components.
pub fn contract<T: Real>(comps: &[T], dim: usize, order: usize, v: &[T]) -> T {
    let set = index_set(dim, order);
    let mut acc = v[0].lift(0.0);
    for (slot, idx) in set.list.iter().enumerate() {
        let mut term = comps[slot].clone() * set.mult[slot];
        for &i in idx {
            term = term * v[i].clone();
        }
        acc = acc + term;
    }
    acc
}

/// `<a, b>_g` for two order-`m` tensors in storage form, indices raised with `ginv`.
pub fn tensor_inner_at(dim: usize, order: usize, a: &[f64], b: &[f64], ginv: &[f64]) -> f64 {
    let set = index_set(dim, order);
    let f2s = set.full_to_storage();
    let mut raised: Vec<f64> = f2s.iter().map(|&s| a[s]).collect();
    let total = raised.len();
    // raise one index at a time; stride of index s is dim^(order-1-s)
    for s in 0..order {
        let stride = dim.pow((order - 1 - s) as u32);
        let mut next = vec![0.0; total];
        for (flat, out) in next.iter_mut().enumerate() {
            let i = (flat / stride) % dim;
            let base = flat - i * stride;
            *out = (0..dim).map(|j| ginv[i * dim + j] * raised[base + j * stride]).sum();
        }
        raised = next;
    }
    raised.iter().zip(f2s).map(|(r, &s)| r * b[s]).sum()
}

/// Symmetrizes a full row-major `dim^order` array.
pub fn symmetrize_full(dim: usize, order: usize, t: &[f64]) -> Vec<f64> {
    let set = index_set(dim, order);
    let mut sums = vec![0.0; set.len()];
    let mut counts = vec![0.0; set.len()];
    for (flat, &s) in set.full_to_storage().iter().enumerate() {
        sums[s] += t[flat];
        counts[s] += 1.0;
    }
    set.full_to_storage().iter().map(|&s| sums[s] / counts[s]).collect()
}

/// Expands storage form to a full row-major array.
pub fn expand_full(dim: usize, order: usize, comps: &[f64]) -> Vec<f64> {
    index_set(dim, order).full_to_storage().iter().map(|&s| comps[s]).collect()
}

fn x_jets(geo: &LocalGeometry, order: usize) -> Vec<Jet> {
    let s = geo.g[0].space();
    (0..geo.dim).map(|i| Jet::variable(s, order, i, geo.x[i])).collect()
}

/// A symmetric covariant tensor field.
pub trait TensorField: Send + Sync {
    fn dim(&self) -> usize;
    fn order(&self) -> usize;

    /// Metric jet order needed to produce components at jet order `order`.
    fn required_g_order(&self, order: usize) -> usize;

    /// Stored components as jets of order `order` in the variables of `geo`,
    /// which must carry metric jets of order `required_g_order(order)` or more.
    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet>;

    fn components(&self, chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
        let geo = LocalGeometry::new(chart, x, self.dim(), self.required_g_order(0))?;
        Ok(self.component_jets(&geo, 0).iter().map(Jet::value).collect())
    }
}

pub type FieldRef = Arc<dyn TensorField>;

/// `f(x, v)` for `(x, v)` on the sphere bundle.
pub fn evaluate_on_sphere(chart: &MetricChart, f: &dyn TensorField, x: &[f64], v: &[f64]) -> Result<f64> {
    if f.dim() != chart.dim() || v.len() != chart.dim() || x.len() != chart.dim() {
        return Err(Error::Input(format!("field of dimension {} evaluated in a {}-dimensional chart", f.dim(), chart.dim())));
    }
    let comps = f.components(chart, x)?;
    Ok(contract(&comps, f.dim(), f.order(), v))
}

/// One component, addressed by any permutation of its multi-index.
pub fn component(chart: &MetricChart, f: &dyn TensorField, x: &[f64], idx: &[usize]) -> Result<f64> {
    if idx.len() != f.order() || idx.iter().any(|&i| i >= f.dim()) {
        return Err(Error::Input(format!("index {idx:?} does not address an order-{} tensor", f.order())));
    }
    let comps = f.components(chart, x)?;
    Ok(comps[index_set(f.dim(), f.order()).position(idx)])
}

/// Field given by closed-form component expressions in storage order.
#[derive(Debug, Clone)]
pub struct ExprTensorField {
    dim: usize,
    order: usize,
    comps: Vec<Expr>,
}

impl ExprTensorField {
    pub fn new(dim: usize, order: usize, comps: Vec<Expr>) -> Result<Self> {
        if !(2..=3).contains(&dim) || order > MAX_TENSOR_ORDER {
            return Err(Error::Input(format!("unsupported tensor shape d={dim} m={order}")));
        }
        let n = index_set(dim, order).len();
        if comps.len() != n {
            return Err(Error::Input(format!("order-{order} field in d={dim} needs {n} components, got {}", comps.len())));
        }
        for c in &comps {
            c.check_dim(dim)?;
            if c.v_arity() > 0 {
                return Err(Error::Input(format!("component `{c}` depends on fiber coordinates")));
            }
        }
        Ok(ExprTensorField { dim, order, comps })
    }

    pub fn parse(dim: usize, order: usize, comps: &[&str]) -> Result<Self> {
        let exprs = comps.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>>>()?;
        Self::new(dim, order, exprs)
    }

    pub fn from_fn(dim: usize, order: usize, f: impl Fn(&[usize]) -> Expr) -> Result<Self> {
        let comps = index_set(dim, order).list.iter().map(|idx| f(idx)).collect();
        Self::new(dim, order, comps)
    }

    pub fn scalar(dim: usize, e: Expr) -> Result<Self> {
        Self::new(dim, 0, vec![e])
    }

    pub fn exprs(&self) -> &[Expr] {
        &self.comps
    }

    /// Divergence-free fields of a stream function `ψ` in `d = 2` (Euclidean
    /// chart): `(∂₂ψ, −∂₁ψ)` for `m = 1` and `(∂₂²ψ, −∂₁∂₂ψ, ∂₁²ψ)` for `m = 2`.
    pub fn stream(psi: &Expr, order: usize) -> Result<Self> {
        match order {
            1 => Self::new(2, 1, vec![psi.diff_x(1), -psi.diff_x(0)]),
            2 => {
                let p1 = psi.diff_x(0);
                let p2 = psi.diff_x(1);
                Self::new(2, 2, vec![p2.diff_x(1), -p1.diff_x(1), p1.diff_x(0)])
            }
            _ => Err(Error::Input(format!("stream construction is defined for m = 1, 2, not {order}"))),
        }
    }
}

impl TensorField for ExprTensorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn order(&self) -> usize {
        self.order
    }

    fn required_g_order(&self, _order: usize) -> usize {
        0
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let xs = x_jets(geo, order);
        self.comps.iter().map(|e| e.eval(&xs, &[])).collect()
    }

    fn components(&self, _chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.comps.iter().map(|e| e.eval_f64(x, &[])).collect())
    }
}

/// Unsymmetrized tensor with closed-form entries, row-major over `dim^order`.
#[derive(Debug, Clone)]
pub struct RawTensorField {
    pub dim: usize,
    pub order: usize,
    pub entries: Vec<Expr>,
}

/// `σT`: average over all index permutations.
pub fn symmetrize(t: &RawTensorField) -> Result<ExprTensorField> {
    let set = index_set(t.dim, t.order);
    if t.entries.len() != t.dim.pow(t.order as u32) {
        return Err(Error::Input(format!("raw tensor needs {} entries", t.dim.pow(t.order as u32))));
    }
    let mut sums: Vec<Expr> = vec![Expr::c(0.0); set.len()];
    let mut counts = vec![0.0; set.len()];
    for (flat, &s) in set.full_to_storage().iter().enumerate() {
        sums[s] = std::mem::replace(&mut sums[s], Expr::c(0.0)) + t.entries[flat].clone();
        counts[s] += 1.0;
    }
    let comps = sums.into_iter().zip(counts).map(|(e, c)| e / Expr::c(c)).collect();
    ExprTensorField::new(t.dim, t.order, comps)
}

/// `Σ c_k f_k`.
#[derive(Clone)]
pub struct Combination {
    pub terms: Vec<(f64, FieldRef)>,
}

impl Combination {
    pub fn new(terms: Vec<(f64, FieldRef)>) -> Result<Self> {
        let first = terms.first().ok_or_else(|| Error::Input("empty combination".into()))?;
        let (d, m) = (first.1.dim(), first.1.order());
        if terms.iter().any(|(_, f)| f.dim() != d || f.order() != m) {
            return Err(Error::Input("combined fields must share dimension and order".into()));
        }
        Ok(Combination { terms })
    }

    pub fn difference(a: FieldRef, b: FieldRef) -> Result<Self> {
        Self::new(vec![(1.0, a), (-1.0, b)])
    }
}

impl TensorField for Combination {
    fn dim(&self) -> usize {
        self.terms[0].1.dim()
    }

    fn order(&self) -> usize {
        self.terms[0].1.order()
    }

    fn required_g_order(&self, order: usize) -> usize {
        self.terms.iter().map(|(_, f)| f.required_g_order(order)).max().unwrap_or(0)
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let mut acc: Option<Vec<Jet>> = None;
        for (c, f) in &self.terms {
            let part = f.component_jets(geo, order);
            match acc.as_mut() {
                None => acc = Some(part.iter().map(|j| j.scale(*c)).collect()),
                Some(a) => a.iter_mut().zip(&part).for_each(|(a, p)| a.axpy(*c, p)),
            }
        }
        acc.unwrap()
    }

    fn components(&self, chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc: Option<Vec<f64>> = None;
        for (c, f) in &self.terms {
            let part = f.components(chart, x)?;
            match acc.as_mut() {
                None => acc = Some(part.iter().map(|v| c * v).collect()),
                Some(a) => a.iter_mut().zip(&part).for_each(|(a, p)| *a += c * p),
            }
        }
        Ok(acc.unwrap())
    }
}

/// `(d^s h)_I` from jets of `h` (order `k + 1`) and `Γ` (order `k`).
fn dsym_jets(dim: usize, m: usize, h: &[Jet], gamma: &[Jet], k: usize) -> Vec<Jet> {
    let out = index_set(dim, m);
    let inn = index_set(dim, m - 1);
    let hk: Vec<Jet> = h.iter().map(|j| j.truncated(k)).collect();
    let s = h[0].space();
    let mut result = Vec::with_capacity(out.len());
    let mut rest: SmallVec<[usize; 12]> = SmallVec::new();
    for idx in &out.list {
        let mut acc = Jet::constant(s, k, 0.0);
        for sidx in 0..m {
            let j = idx[sidx];
            rest.clear();
            rest.extend(idx.iter().enumerate().filter(|&(t, _)| t != sidx).map(|(_, &a)| a));
            acc += &h[inn.position(&rest)].d(j);
            for t in 0..m - 1 {
                let saved = rest[t];
                for p in 0..dim {
                    rest[t] = p;
                    let gm = &gamma[(p * dim + j) * dim + saved];
                    let prod = gm.mul_ref(&hk[inn.position(&rest)]);
                    acc -= &prod;
                }
                rest[t] = saved;
            }
        }
        acc *= 1.0 / m as f64;
        result.push(acc);
    }
    result
}

/// `(δf)_J = g^{jl} f_{Jj;l}` from jets of `f` (order `k + 1`), `Γ` and `g^{-1}` (order `k`).
pub(crate) fn divergence_jets(dim: usize, m: usize, f: &[Jet], gamma: &[Jet], ginv: &[Jet], k: usize) -> Vec<Jet> {
    let inn = index_set(dim, m);
    let out = index_set(dim, m - 1);
    let fk: Vec<Jet> = f.iter().map(|j| j.truncated(k)).collect();
    let s = f[0].space();
    let mut result = Vec::with_capacity(out.len());
    let mut full: SmallVec<[usize; 12]> = SmallVec::new();
    for idx in &out.list {
        let mut acc = Jet::constant(s, k, 0.0);
        for j in 0..dim {
            full.clear();
            full.extend_from_slice(idx);
            full.push(j);
            for l in 0..dim {
                // f_{K;l} = ∂_l f_K − Σ_t Γ^p_{l K_t} f_{K[t→p]}
                let mut cov = f[inn.position(&full)].d(l);
                for t in 0..m {
                    let saved = full[t];
                    for p in 0..dim {
                        full[t] = p;
                        let prod = gamma[(p * dim + l) * dim + saved].mul_ref(&fk[inn.position(&full)]);
                        cov -= &prod;
                    }
                    full[t] = saved;
                }
                acc.add_product(&ginv[j * dim + l], &cov);
            }
        }
        result.push(acc);
    }
    result
}

/// `d^s h = σ∇h`.
#[derive(Clone)]
pub struct DsymField {
    pub inner: FieldRef,
}

impl DsymField {
    pub fn new(inner: FieldRef) -> Self {
        DsymField { inner }
    }
}

impl TensorField for DsymField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn order(&self) -> usize {
        self.inner.order() + 1
    }

    fn required_g_order(&self, order: usize) -> usize {
        self.inner.required_g_order(order + 1).max(order + 1)
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let h = self.inner.component_jets(geo, order + 1);
        dsym_jets(self.dim(), self.order(), &h, &geo.gamma, order)
    }
}

/// `δf`, the covariant divergence.
#[derive(Clone)]
pub struct DivergenceField {
    pub inner: FieldRef,
}

impl DivergenceField {
    pub fn new(inner: FieldRef) -> Result<Self> {
        if inner.order() == 0 {
            return Err(Error::Input("divergence needs an order >= 1 field".into()));
        }
        Ok(DivergenceField { inner })
    }
}

impl TensorField for DivergenceField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn order(&self) -> usize {
        self.inner.order() - 1
    }

    fn required_g_order(&self, order: usize) -> usize {
        self.inner.required_g_order(order + 1).max(order + 1)
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let f = self.inner.component_jets(geo, order + 1);
        divergence_jets(self.dim(), self.inner.order(), &f, &geo.gamma, &geo.ginv, order)
    }
}

// ---------------------------------------------------------------------------
// degree decomposition

/// Monomial coefficients `c_I = mult(I) f_I` of the polynomial `f(x, ·)`.
fn to_poly<T: Real>(comps: &[T], dim: usize, m: usize) -> Vec<T> {
    let set = index_set(dim, m);
    comps.iter().zip(&set.mult).map(|(c, &k)| c.clone() * k).collect()
}

fn from_poly<T: Real>(poly: &[T], dim: usize, m: usize) -> Vec<T> {
    let set = index_set(dim, m);
    poly.iter().zip(&set.mult).map(|(c, &k)| c.clone() * (1.0 / k)).collect()
}

/// `g^{ij} ∂_i ∂_j P` for a homogeneous polynomial of degree `n >= 2`.
fn poly_laplacian<T: Real>(p: &[T], dim: usize, n: usize, ginv: &[T]) -> Vec<T> {
    let src = index_set(dim, n);
    let dst = index_set(dim, n - 2);
    let mut out: Vec<T> = vec![p[0].lift(0.0); dst.len()];
    for (slot, c) in p.iter().enumerate() {
        let e = src.exps(slot);
        for i in 0..dim {
            for j in 0..dim {
                let coef = if i == j {
                    (e[i] as f64) * (e[i] as f64 - 1.0)
                } else {
                    e[i] as f64 * e[j] as f64
                };
                if coef == 0.0 {
                    continue;
                }
                let mut t = e;
                t[i] -= 1;
                t[j] -= 1;
                let k = dst.position_exps(&t[..dim]);
                out[k] = out[k].clone() + ginv[i * dim + j].clone() * c.clone() * coef;
            }
        }
    }
    out
}

/// `q P` with `q = g_{ij} v^i v^j`.
fn poly_times_q<T: Real>(p: &[T], dim: usize, n: usize, g: &[T]) -> Vec<T> {
    let src = index_set(dim, n);
    let dst = index_set(dim, n + 2);
    let mut out: Vec<T> = vec![g[0].lift(0.0); dst.len()];
    for (slot, c) in p.iter().enumerate() {
        let e = src.exps(slot);
        for i in 0..dim {
            for j in 0..dim {
                let mut t = e;
                t[i] += 1;
                t[j] += 1;
                let k = dst.position_exps(&t[..dim]);
                out[k] = out[k].clone() + g[i * dim + j].clone() * c.clone();
            }
        }
    }
    out
}

/// Splits a degree-`n` polynomial into `q^k H_{n-2k}` with `H` harmonic for
/// `g^{ij}∂_i∂_j`; piece `k` is returned as a degree-`n` polynomial.
fn harmonic_pieces<T: Real>(p: &[T], dim: usize, n: usize, g: &[T], ginv: &[T]) -> Vec<Vec<T>> {
    if n < 2 {
        return vec![p.to_vec()];
    }
    let lower = index_set(dim, n - 2).len();
    // columns: Δ(q v^β) for the monomial basis of degree n−2
    let mut a: Vec<T> = vec![p[0].lift(0.0); lower * lower];
    for beta in 0..lower {
        let mut e: Vec<T> = vec![p[0].lift(0.0); lower];
        e[beta] = p[0].lift(1.0);
        let col = poly_laplacian(&poly_times_q(&e, dim, n - 2, g), dim, n, ginv);
        for (row, v) in col.into_iter().enumerate() {
            a[row * lower + beta] = v;
        }
    }
    let rhs = poly_laplacian(p, dim, n, ginv);
    let q = jet::solve_dense(a, rhs, lower).expect("Δ∘q is invertible on homogeneous polynomials");
    let qq = poly_times_q(&q, dim, n - 2, g);
    let h: Vec<T> = p.iter().zip(&qq).map(|(a, b)| a.clone() - b.clone()).collect();
    let mut out = vec![h];
    for piece in harmonic_pieces(&q, dim, n - 2, g, ginv) {
        out.push(poly_times_q(&piece, dim, n - 2, g));
    }
    out
}

/// Degree components `f_{m-2k}` (as order-`m` tensors) from stored components.
pub fn degree_pieces<T: Real>(comps: &[T], dim: usize, m: usize, g: &[T], ginv: &[T]) -> Vec<Vec<T>> {
    let poly = to_poly(comps, dim, m);
    harmonic_pieces(&poly, dim, m, g, ginv).iter().map(|p| from_poly(p, dim, m)).collect()
}

/// The piece `f_{m-2k}` of the degree decomposition, an order-`m` tensor
/// whose restriction to each fiber is a spherical harmonic of degree `m − 2k`.
#[derive(Clone)]
pub struct DegreeComponentField {
    pub inner: FieldRef,
    pub k: usize,
}

impl TensorField for DegreeComponentField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn order(&self) -> usize {
        self.inner.order()
    }

    fn required_g_order(&self, order: usize) -> usize {
        self.inner.required_g_order(order).max(order)
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let f = self.inner.component_jets(geo, order);
        let g: Vec<Jet> = geo.g.iter().map(|j| j.truncated(order)).collect();
        let ginv: Vec<Jet> = geo.ginv.iter().map(|j| j.truncated(order)).collect();
        degree_pieces(&f, self.dim(), self.order(), &g, &ginv).swap_remove(self.k)
    }
}

/// `[f_m, f_{m-2}, ...]`; the pieces sum to `f`.
pub fn degree_decompose(f: FieldRef) -> Vec<FieldRef> {
    (0..=f.order() / 2).map(|k| Arc::new(DegreeComponentField { inner: f.clone(), k }) as FieldRef).collect()
}

// ---------------------------------------------------------------------------
// grid fields

/// Uniform nodes `-R + i·h`, `i = 0..n`, on each axis of the box `[-R, R]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub radius: f64,
    pub n: usize,
}

impl GridSpec {
    pub fn new(dim: usize, radius: f64, n: usize) -> Result<Self> {
        if n < 2 || !(radius > 0.0) || !(2..=3).contains(&dim) {
            return Err(Error::Input(format!("invalid grid: d={dim}, radius={radius}, n={n}")));
        }
        Ok(GridSpec { dim, radius, n })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.radius / (self.n - 1) as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn node(&self, flat: usize) -> Vec<f64> {
        let h = self.spacing();
        let mut rem = flat;
        (0..self.dim)
            .map(|_| {
                let i = rem % self.n;
                rem /= self.n;
                -self.radius + i as f64 * h
            })
            .collect()
    }

    fn locate(&self, xa: f64) -> (usize, f64) {
        let h = self.spacing();
        let s = (xa + self.radius) / h;
        let c = (s.floor().max(0.0) as usize).min(self.n - 2);
        (c, s - c as f64)
    }

    /// Multilinear interpolation weights `(node, weight)` at `x`.
    pub fn interpolation(&self, x: &[f64]) -> SmallVec<[(usize, f64); 8]> {
        let cells: SmallVec<[(usize, f64); 3]> = x.iter().map(|&a| self.locate(a)).collect();
        let mut out = SmallVec::new();
        for corner in 0..(1usize << self.dim) {
            let mut flat = 0;
            let mut w = 1.0;
            let mut stride = 1;
            for (a, &(c, t)) in cells.iter().enumerate() {
                let up = corner >> a & 1 == 1;
                flat += (c + up as usize) * stride;
                w *= if up { t } else { 1.0 - t };
                stride *= self.n;
            }
            out.push((flat, w));
        }
        out
    }

    pub(crate) fn interpolation_jets(&self, x: &[Jet]) -> Vec<(usize, Jet)> {
        let h = self.spacing();
        let cells: Vec<(usize, Jet)> = x
            .iter()
            .map(|a| {
                let (c, _) = self.locate(a.value());
                let t = (a.clone() + (self.radius - c as f64 * h)) * (1.0 / h);
                (c, t)
            })
            .collect();
        let mut out = Vec::with_capacity(1 << self.dim);
        for corner in 0..(1usize << self.dim) {
            let mut flat = 0;
            let mut w = x[0].lift(1.0);
            let mut stride = 1;
            for (a, (c, t)) in cells.iter().enumerate() {
                let up = corner >> a & 1 == 1;
                flat += (c + up as usize) * stride;
                w = if up { w.mul_ref(t) } else { w.mul_ref(&(-t.clone() + 1.0)) };
                stride *= self.n;
            }
            out.push((flat, w));
        }
        out
    }
}

/// Multilinearly interpolated nodal field; `values[node * ncomp + slot]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTensorField {
    pub grid: GridSpec,
    pub order: usize,
    pub values: Vec<f64>,
}

impl GridTensorField {
    pub fn zeros(grid: GridSpec, order: usize) -> Self {
        let n = grid.n_nodes() * index_set(grid.dim, order).len();
        GridTensorField { grid, order, values: vec![0.0; n] }
    }

    pub fn n_components(&self) -> usize {
        index_set(self.grid.dim, self.order).len()
    }

    /// Nodal samples of `f`; nodes outside the chart take the value at the
    /// nearest chart point.
    pub fn sample(chart: &MetricChart, f: &dyn TensorField, grid: GridSpec) -> Result<Self> {
        let order = f.order();
        let nc = index_set(grid.dim, order).len();
        let r = chart.radius();
        let per_node: Vec<Result<Vec<f64>>> = (0..grid.n_nodes())
            .into_par_iter()
            .map(|k| {
                let mut x = grid.node(k);
                let nx = crate::geometry::norm_e(&x);
                if nx > r {
                    x.iter_mut().for_each(|a| *a *= r / nx * (1.0 - 1e-12));
                }
                f.components(chart, &x)
            })
            .collect();
        let mut values = Vec::with_capacity(grid.n_nodes() * nc);
        for v in per_node {
            values.extend(v?);
        }
        Ok(GridTensorField { grid, order, values })
    }
}

impl TensorField for GridTensorField {
    fn dim(&self) -> usize {
        self.grid.dim
    }

    fn order(&self) -> usize {
        self.order
    }

    fn required_g_order(&self, _order: usize) -> usize {
        0
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let xs = x_jets(geo, order);
        let nc = self.n_components();
        let s = xs[0].space();
        let mut out = vec![Jet::constant(s, order, 0.0); nc];
        for (node, w) in self.grid.interpolation_jets(&xs) {
            for (c, o) in out.iter_mut().enumerate() {
                o.axpy(self.values[node * nc + c], &w);
            }
        }
        out
    }

    fn components(&self, _chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
        let nc = self.n_components();
        let mut out = vec![0.0; nc];
        for (node, w) in self.grid.interpolation(x) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += w * self.values[node * nc + c];
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Helmholtz decomposition

/// Scalar trial functions for the potential, all multiplied by
/// `w(x) = (R² − |x|²)/R²` so they vanish on the boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialBasis {
    /// Tensor-product cubic B-splines; `spacing` is the knot spacing as a
    /// fraction of the chart radius.
    Bspline { spacing: f64 },
    /// Products of Legendre polynomials in `x/R` of total degree `<= degree`.
    Polynomial { degree: usize },
}

#[derive(Debug, Clone)]
pub struct ScalarBasis {
    dim: usize,
    radius: f64,
    kind: BasisKind,
}

#[derive(Debug, Clone)]
enum BasisKind {
    // `map[flat]` expresses a tensor-product spline in the active unknowns
    Bspline { cells: usize, h: f64, map: Vec<Vec<(usize, f64)>>, active: usize },
    Polynomial { degree: usize, exps: Vec<[usize; 3]> },
}

impl ScalarBasis {
    pub fn new(dim: usize, radius: f64, spec: &PotentialBasis) -> Result<Self> {
        let kind = match *spec {
            PotentialBasis::Bspline { spacing } => {
                if !(spacing > 0.0 && spacing <= 1.0) {
                    return Err(Error::Input(format!("B-spline spacing must lie in (0, 1], got {spacing}")));
                }
                let cells = (2.0 / spacing).round().max(1.0) as usize;
                let h = 2.0 * radius / cells as f64;
                let (map, active) = extended_splines(dim, radius, cells, h);
                BasisKind::Bspline { cells, h, map, active }
            }
            PotentialBasis::Polynomial { degree } => {
                let mut exps = Vec::new();
                for total in 0..=degree {
                    for a in (0..=total).rev() {
                        if dim == 2 {
                            exps.push([a, total - a, 0]);
                        } else {
                            for b in (0..=total - a).rev() {
                                exps.push([a, b, total - a - b]);
                            }
                        }
                    }
                }
                BasisKind::Polynomial { degree, exps }
            }
        };
        Ok(ScalarBasis { dim, radius, kind })
    }

    pub fn len(&self) -> usize {
        match &self.kind {
            BasisKind::Bspline { active, .. } => *active,
            BasisKind::Polynomial { exps, .. } => exps.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nonzero weighted basis values at `x`.
    pub fn local<T: Real>(&self, x: &[T]) -> Vec<(usize, T)> {
        let r2 = self.radius * self.radius;
        let mut w = x[0].lift(r2);
        for a in x {
            w = w - a.clone() * a.clone();
        }
        let w = w * (1.0 / r2);
        match &self.kind {
            BasisKind::Bspline { cells, h, map, .. } => {
                let per_axis: Vec<(usize, [T; 4])> = x
                    .iter()
                    .map(|a| {
                        let s = (a.value() + self.radius) / h;
                        let c = (s.floor().max(0.0) as usize).min(cells - 1);
                        let t = (a.clone() + (self.radius - c as f64 * h)) * (1.0 / h);
                        (c, cubic_bspline(&t))
                    })
                    .collect();
                let nb = cells + 3;
                let span = 4usize.pow(self.dim as u32);
                let mut prods = Vec::with_capacity(span);
                let mut terms: Vec<(usize, f64, usize)> = Vec::with_capacity(span);
                for combo in 0..span {
                    let mut rem = combo;
                    let mut flat = 0;
                    let mut stride = 1;
                    let mut val = w.lift(1.0);
                    for (c, b) in &per_axis {
                        let k = rem % 4;
                        rem /= 4;
                        flat += (c + k) * stride;
                        stride *= nb;
                        val = val * b[k].clone();
                    }
                    terms.extend(map[flat].iter().map(|&(i, e)| (i, e, combo)));
                    prods.push(val);
                }
                terms.sort_unstable_by_key(|t| t.0);
                let mut out: Vec<(usize, T)> = Vec::new();
                for group in terms.chunk_by(|a, b| a.0 == b.0) {
                    let mut acc = prods[group[0].2].clone() * group[0].1;
                    for &(_, e, j) in &group[1..] {
                        acc = acc + prods[j].clone() * e;
                    }
                    out.push((group[0].0, acc * w.clone()));
                }
                out
            }
            BasisKind::Polynomial { degree, exps } => {
                let leg: Vec<Vec<T>> = x.iter().map(|a| legendre(&(a.clone() * (1.0 / self.radius)), *degree)).collect();
                exps.iter()
                    .enumerate()
                    .map(|(k, e)| {
                        let mut val = w.clone();
                        for (a, l) in leg.iter().enumerate() {
                            val = val * l[e[a]].clone();
                        }
                        (k, val)
                    })
                    .collect()
            }
        }
    }
}

// Weighted extended B-splines. Splines whose support holds a cell lying
// wholly inside the ball are inner and carry an unknown each. The remaining
// splines that still meet the ball are outer: their coefficients are barely
// determined, so each is folded into the nearest 4^d array of inner splines
// with Lagrange extrapolation weights, which keeps cubic reproduction.
fn extended_splines(dim: usize, radius: f64, cells: usize, h: f64) -> (Vec<Vec<(usize, f64)>>, usize) {
    let nb = cells + 3;
    let total = nb.pow(dim as u32);
    let unflat = |flat: usize| -> Vec<usize> { (0..dim).map(|a| flat / nb.pow(a as u32) % nb).collect() };
    let support = |j: usize| (j.saturating_sub(3), j.min(cells - 1));
    let cell_far = |c: usize| {
        let lo = -radius + c as f64 * h;
        lo.abs().max((lo + h).abs())
    };
    let mut inner = vec![false; total];
    let mut meets = vec![false; total];
    for (flat, (inn, met)) in inner.iter_mut().zip(meets.iter_mut()).enumerate() {
        let js = unflat(flat);
        let mut far2 = 0.0;
        let mut near2 = 0.0;
        for &j in &js {
            let (lo, hi) = support(j);
            let d = (lo..=hi).map(cell_far).fold(f64::INFINITY, f64::min);
            far2 += d * d;
            let (a, b) = (-radius + lo as f64 * h, -radius + (hi + 1) as f64 * h);
            let n = 0f64.clamp(a, b);
            near2 += n * n;
        }
        *inn = far2 < radius * radius;
        *met = near2 < radius * radius;
    }
    let mut position = vec![usize::MAX; total];
    let mut active = 0;
    for (flat, &inn) in inner.iter().enumerate() {
        if inn {
            position[flat] = active;
            active += 1;
        }
    }
    let mut map = vec![Vec::new(); total];
    let span = 4usize.pow(dim as u32);
    let inner_js: Vec<Vec<usize>> = (0..total).filter(|&f| inner[f]).map(unflat).collect();
    for flat in 0..total {
        if inner[flat] {
            map[flat].push((position[flat], 1.0));
            continue;
        }
        if !meets[flat] {
            continue;
        }
        let js = unflat(flat);
        let dist2 = |k: &[usize]| -> f64 { k.iter().zip(&js).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum() };
        // candidate arrays: those containing one of the nearest inner indices
        let Some(best) = inner_js.iter().map(|k| dist2(k)).min_by(|a, b| a.total_cmp(b)) else { continue };
        let mut choice: Option<(f64, Vec<usize>)> = None;
        for k in inner_js.iter().filter(|k| dist2(k) <= best + 2.0) {
            for off in 0..span {
                let lows: Option<Vec<usize>> = (0..dim).map(|a| k[a].checked_sub(off / 4usize.pow(a as u32) % 4)).collect();
                let Some(lows) = lows else { continue };
                if lows.iter().any(|&l| l + 3 >= nb) {
                    continue;
                }
                let all_inner = (0..span).all(|q| {
                    let f: usize = (0..dim).map(|a| (lows[a] + q / 4usize.pow(a as u32) % 4) * nb.pow(a as u32)).sum();
                    inner[f]
                });
                if !all_inner {
                    continue;
                }
                let centre: f64 = lows.iter().zip(&js).map(|(&l, &j)| (l as f64 + 1.5 - j as f64).powi(2)).sum();
                if choice.as_ref().is_none_or(|(c, _)| centre < *c) {
                    choice = Some((centre, lows));
                }
            }
        }
        let Some((_, lows)) = choice else { continue };
        for q in 0..span {
            let mut e = 1.0;
            let mut f = 0;
            for a in 0..dim {
                let i = lows[a] + q / 4usize.pow(a as u32) % 4;
                for mu in lows[a]..lows[a] + 4 {
                    if mu != i {
                        e *= (js[a] as f64 - mu as f64) / (i as f64 - mu as f64);
                    }
                }
                f += i * nb.pow(a as u32);
            }
            map[flat].push((position[f], e));
        }
    }
    (map, active)
}

fn cubic_bspline<T: Real>(t: &T) -> [T; 4] {
    let one = t.lift(1.0);
    let u = one.clone() - t.clone();
    let t2 = t.clone() * t.clone();
    let t3 = t2.clone() * t.clone();
    [
        u.clone() * u.clone() * u * (1.0 / 6.0),
        (t3.clone() * 3.0 - t2.clone() * 6.0 + 4.0) * (1.0 / 6.0),
        (t3.clone() * -3.0 + t2 * 3.0 + t.clone() * 3.0 + 1.0) * (1.0 / 6.0),
        t3 * (1.0 / 6.0),
    ]
}

fn legendre<T: Real>(s: &T, n: usize) -> Vec<T> {
    let mut p = vec![s.lift(1.0)];
    if n >= 1 {
        p.push(s.clone());
    }
    for k in 1..n {
        let next = (s.clone() * p[k].clone() * (2 * k + 1) as f64 - p[k - 1].clone() * k as f64) * (1.0 / (k + 1) as f64);
        p.push(next);
    }
    p
}

/// `Σ_b Σ_c coeffs[b * ncomp + c] ψ_b e_c`, a potential of order `order`.
#[derive(Debug, Clone)]
pub struct BasisTensorField {
    pub dim: usize,
    pub order: usize,
    pub basis: Arc<ScalarBasis>,
    pub coeffs: Vec<f64>,
}

impl TensorField for BasisTensorField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn order(&self) -> usize {
        self.order
    }

    fn required_g_order(&self, _order: usize) -> usize {
        0
    }

    fn component_jets(&self, geo: &LocalGeometry, order: usize) -> Vec<Jet> {
        let xs = x_jets(geo, order);
        let nc = index_set(self.dim, self.order).len();
        let s = xs[0].space();
        let mut out = vec![Jet::constant(s, order, 0.0); nc];
        for (b, val) in self.basis.local(&xs) {
            for (c, o) in out.iter_mut().enumerate() {
                let k = self.coeffs[b * nc + c];
                if k != 0.0 {
                    o.axpy(k, &val);
                }
            }
        }
        out
    }

    fn components(&self, _chart: &MetricChart, x: &[f64]) -> Result<Vec<f64>> {
        let nc = index_set(self.dim, self.order).len();
        let mut out = vec![0.0; nc];
        for (b, val) in self.basis.local(x) {
            for (c, o) in out.iter_mut().enumerate() {
                *o += self.coeffs[b * nc + c] * val;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HelmholtzOptions {
    pub basis: PotentialBasis,
    pub quadrature: SpatialRule,
    pub tol: f64,
    pub max_iter: usize,
    /// Cell size (fraction of radius) of the rule used for the report norms.
    pub report_spacing: f64,
}

impl HelmholtzOptions {
    pub fn default_for(dim: usize) -> Self {
        if dim == 2 {
            HelmholtzOptions {
                basis: PotentialBasis::Bspline { spacing: 1.0 / 32.0 },
                quadrature: SpatialRule::Cartesian { spacing: 1.0 / 32.0, gauss_points: 5, depth: 3 },
                tol: 1e-10,
                max_iter: 20000,
                report_spacing: 1.0 / 24.0,
            }
        } else {
            HelmholtzOptions {
                basis: PotentialBasis::Bspline { spacing: 1.0 / 8.0 },
                quadrature: SpatialRule::Polar { radial: 32, angular: 64 },
                tol: 1e-10,
                max_iter: 20000,
                report_spacing: 1.0 / 8.0,
            }
        }
    }

    /// Polynomial potentials of the given degree with a polar rule that
    /// integrates the normal equations of polynomial fields exactly.
    pub fn polynomial(dim: usize, degree: usize) -> Self {
        HelmholtzOptions {
            basis: PotentialBasis::Polynomial { degree },
            quadrature: SpatialRule::Polar { radial: degree + 8, angular: 2 * degree + 18 },
            ..Self::default_for(dim)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HelmholtzReport {
    pub iterations: usize,
    pub unknowns: usize,
    pub field_norm: f64,
    pub solenoidal_norm: f64,
    pub potential_norm: f64,
    /// `‖δf^s‖_{L²}`.
    pub divergence_norm: f64,
    pub relative_divergence: f64,
}

pub struct HelmholtzResult {
    pub solenoidal: FieldRef,
    /// The potential `p` with `f = f^s + d^s p`.
    pub potential: Arc<BasisTensorField>,
    pub report: HelmholtzReport,
}

/// Frame transform `T̃_A = Σ_I S[A][I] T_I` to components in a g-orthonormal frame.
fn frame_transform(dim: usize, m: usize, frame: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let set = index_set(dim, m);
    let f2s = set.full_to_storage();
    let n = set.len();
    let mut s = vec![vec![0.0; n]; n];
    for (a, aidx) in set.list.iter().enumerate() {
        for (flat, &slot) in f2s.iter().enumerate() {
            let idx = full_index(flat, dim, m);
            let mut prod = 1.0;
            for (t, &i) in idx.iter().enumerate() {
                prod *= frame[aidx[t]][i];
            }
            s[a][slot] += prod;
        }
    }
    s
}

/// Linear map `(p, ∂p) ↦ d^s p` at a point, as plain numbers.
fn dsym_values(dim: usize, m: usize, p: &[f64], dp: &[f64], gamma: &[f64]) -> Vec<f64> {
    let out = index_set(dim, m);
    let inn = index_set(dim, m - 1);
    let mut result = Vec::with_capacity(out.len());
    let mut rest: SmallVec<[usize; 12]> = SmallVec::new();
    for idx in &out.list {
        let mut acc = 0.0;
        for sidx in 0..m {
            let j = idx[sidx];
            rest.clear();
            rest.extend(idx.iter().enumerate().filter(|&(t, _)| t != sidx).map(|(_, &a)| a));
            acc += dp[inn.position(&rest) * dim + j];
            for t in 0..m - 1 {
                let saved = rest[t];
                for q in 0..dim {
                    rest[t] = q;
                    acc -= gamma[(q * dim + j) * dim + saved] * p[inn.position(&rest)];
                }
                rest[t] = saved;
            }
        }
        result.push(acc / m as f64);
    }
    result
}

/// Weighted `L²` inner product of two fields of the same order over `quad`.
pub fn tensor_inner(chart: &MetricChart, a: &dyn TensorField, b: &dyn TensorField, quad: &BallQuadrature) -> Result<f64> {
    let (d, m) = (a.dim(), a.order());
    if b.dim() != d || b.order() != m {
        return Err(Error::Input("inner product of fields with different shapes".into()));
    }
    let g_order = a.required_g_order(0).max(b.required_g_order(0));
    let parts: Vec<Result<f64>> = quad
        .points
        .par_iter()
        .zip(&quad.weights)
        .map(|(x, w)| {
            let geo = LocalGeometry::new(chart, x, d, g_order)?;
            let fa: Vec<f64> = a.component_jets(&geo, 0).iter().map(Jet::value).collect();
            let fb: Vec<f64> = b.component_jets(&geo, 0).iter().map(Jet::value).collect();
            Ok(w * geo.sqrt_det * tensor_inner_at(d, m, &fa, &fb, &geo.ginv_value()))
        })
        .collect();
    let mut acc = 0.0;
    for p in parts {
        acc += p?;
    }
    Ok(acc)
}

pub fn tensor_norm(chart: &MetricChart, f: &dyn TensorField, quad: &BallQuadrature) -> Result<f64> {
    Ok(tensor_inner(chart, f, f, quad)?.max(0.0).sqrt())
}

/// Default quadrature for field norms at cell size `spacing · radius`.
pub fn norm_quadrature(chart: &MetricChart, spacing: f64) -> Result<BallQuadrature> {
    let depth = if chart.dim() == 2 { 3 } else { 1 };
    BallQuadrature::new(chart.dim(), chart.radius(), spacing * chart.radius(), CellRule::Gauss(2), depth)
}

/// `f = f^s + d^s p` with `p|∂M = 0`: `p` minimizes `‖f − d^s p‖²` over the
/// trial space, by preconditioned CG on the normal equations.
pub fn helmholtz_decompose(chart: &MetricChart, f: FieldRef, opts: &HelmholtzOptions) -> Result<HelmholtzResult> {
    let (d, m) = (f.dim(), f.order());
    if m == 0 {
        return Err(Error::Input("Helmholtz decomposition needs m >= 1".into()));
    }
    if d != chart.dim() {
        return Err(Error::Input("field and chart dimensions differ".into()));
    }
    let basis = Arc::new(ScalarBasis::new(d, chart.radius(), &opts.basis)?);
    let quad = opts.quadrature.build(d, chart.radius())?;
    let out_set = index_set(d, m);
    let nc_out = out_set.len();
    let nc_in = index_set(d, m - 1).len();
    let ncols = basis.len() * nc_in;
    let g_order = f.required_g_order(0).max(1);

    let chunk = 256;
    let pieces: Vec<Result<(CsrMatrix, Vec<f64>)>> = quad
        .points
        .par_chunks(chunk)
        .zip(quad.weights.par_chunks(chunk))
        .map(|(pts, wts)| {
            let mut a = CsrMatrix::new(ncols);
            let mut rhs = Vec::with_capacity(pts.len() * nc_out);
            for (x, &w) in pts.iter().zip(wts) {
                let geo = LocalGeometry::new(chart, x, d, g_order)?;
                let gamma = geo.gamma_value();
                let frame = chart.orthonormal_basis(x)?;
                let s = frame_transform(d, m, &frame);
                let scale: Vec<f64> = out_set.mult.iter().map(|k| (w * geo.sqrt_det * k).sqrt()).collect();
                let fv: Vec<f64> = f.component_jets(&geo, 0).iter().map(Jet::value).collect();
                // images of unit potentials and unit potential gradients, in frame components
                let mut unit_p = Vec::with_capacity(nc_in);
                let mut unit_dp = Vec::with_capacity(nc_in * d);
                for c in 0..nc_in {
                    let mut p = vec![0.0; nc_in];
                    p[c] = 1.0;
                    unit_p.push(apply_rows(&s, &dsym_values(d, m, &p, &vec![0.0; nc_in * d], &gamma)));
                    for j in 0..d {
                        let mut dp = vec![0.0; nc_in * d];
                        dp[c * d + j] = 1.0;
                        unit_dp.push(apply_rows(&s, &dsym_values(d, m, &vec![0.0; nc_in], &dp, &gamma)));
                    }
                }
                let s1 = jet::space(d);
                let xs: Vec<Jet> = (0..d).map(|i| Jet::variable(s1, 1, i, x[i])).collect();
                let local = basis.local(&xs);
                let ft = apply_rows(&s, &fv);
                let mut row = Vec::with_capacity(local.len() * nc_in);
                for a_slot in 0..nc_out {
                    row.clear();
                    for (b, val) in &local {
                        let psi = val.value();
                        for c in 0..nc_in {
                            let mut e = psi * unit_p[c][a_slot];
                            for j in 0..d {
                                e += val.partial(j) * unit_dp[c * d + j][a_slot];
                            }
                            if e != 0.0 {
                                row.push((b * nc_in + c, scale[a_slot] * e));
                            }
                        }
                    }
                    a.push_row(&row);
                    rhs.push(scale[a_slot] * ft[a_slot]);
                }
            }
            Ok((a, rhs))
        })
        .collect();
    let mut a = CsrMatrix::new(ncols);
    let mut b = Vec::new();
    for p in pieces {
        let (pa, pb) = p?;
        a.append(&pa);
        b.extend(pb);
    }
    let atb = a.tr_mul_vec(&b);
    let normal = |v: &[f64]| a.tr_mul_vec(&a.mul_vec(v));
    let (coeffs, log) = linalg::pcg(&normal, &atb, &a.column_norms_sq(), opts.tol, opts.max_iter);
    linalg::require_converged(&log)?;

    let potential = Arc::new(BasisTensorField { dim: d, order: m - 1, basis, coeffs });
    let grad: FieldRef = Arc::new(DsymField::new(potential.clone()));
    let solenoidal: FieldRef = Arc::new(Combination::difference(f.clone(), grad.clone())?);
    let rq = norm_quadrature(chart, opts.report_spacing)?;
    let field_norm = tensor_norm(chart, f.as_ref(), &rq)?;
    let solenoidal_norm = tensor_norm(chart, solenoidal.as_ref(), &rq)?;
    let potential_norm = tensor_norm(chart, grad.as_ref(), &rq)?;
    let div = DivergenceField::new(solenoidal.clone())?;
    let divergence_norm = tensor_norm(chart, &div, &rq)?;
    let report = HelmholtzReport {
        iterations: log.iterations,
        unknowns: ncols,
        field_norm,
        solenoidal_norm,
        potential_norm,
        divergence_norm,
        relative_divergence: if field_norm > 0.0 { divergence_norm / field_norm } else { 0.0 },
    };
    Ok(HelmholtzResult { solenoidal, potential, report })
}

fn apply_rows(s: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    s.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

// ---------------------------------------------------------------------------
// random fields

/// Random polynomial `Σ c_α x^α / R^|α|` of total degree `<= degree`, coefficients in `[-1, 1]`.
pub fn random_polynomial<R: Rng>(rng: &mut R, dim: usize, degree: usize, radius: f64) -> Expr {
    let mut e = Expr::c(0.0);
    for total in 0..=degree {
        let set = index_set(dim, total);
        for idx in &set.list {
            let c: f64 = rng.random_range(-1.0..1.0);
            let mut term = Expr::c(c / radius.powi(total as i32));
            for &i in idx {
                term = term * Expr::x(i);
            }
            e = e + term;
        }
    }
    e
}

/// `((R² − |x|²)/R²)^power` as an expression.
pub fn boundary_weight(dim: usize, radius: f64, power: i32) -> Expr {
    let mut r2 = Expr::c(0.0);
    for i in 0..dim {
        r2 = r2 + Expr::x(i).powi(2);
    }
    ((Expr::c(radius * radius) - r2) / Expr::c(radius * radius)).powi(power)
}

/// Random symmetric field with polynomial components.
pub fn random_field<R: Rng>(rng: &mut R, dim: usize, order: usize, degree: usize, radius: f64) -> Result<ExprTensorField> {
    let n = index_set(dim, order).len();
    let comps = (0..n).map(|_| random_polynomial(rng, dim, degree, radius)).collect();
    ExprTensorField::new(dim, order, comps)
}

/// Random potential vanishing on the boundary (each component carries `w(x)`).
pub fn random_potential<R: Rng>(rng: &mut R, dim: usize, order: usize, degree: usize, radius: f64) -> Result<ExprTensorField> {
    let n = index_set(dim, order).len();
    let w = boundary_weight(dim, radius, 1);
    let comps = (0..n).map(|_| w.clone() * random_polynomial(rng, dim, degree, radius)).collect();
    ExprTensorField::new(dim, order, comps)
}
