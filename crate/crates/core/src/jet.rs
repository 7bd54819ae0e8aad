//! Forward-mode automatic differentiation with truncated multivariate Taylor
//! polynomials ("jets").
//!
//! A [`Jet`] of order `N` in `n` variables stores the Taylor coefficients of a
//! function about a base point, for every monomial of total degree `<= N`.
//! Order 1 jets are ordinary dual numbers; higher orders play the role of
//! nested duals without the exponential blow-up in the number of evaluations.
//!
//! Coefficients are stored in graded order, so a jet of order `k` is a prefix
//! of the same jet at order `k + 1`. Arithmetic between jets of different
//! orders truncates to the smaller one; differentiation lowers the order by
//! one.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::OnceLock;

use smallvec::SmallVec;

/// Highest supported truncation order.
pub const MAX_ORDER: usize = 4;
/// Highest supported number of independent variables.
pub const MAX_VARS: usize = 6;

type Exps = [u8; MAX_VARS];

/// Monomial bookkeeping shared by every jet with the same number of variables.
#[derive(Debug)]
pub struct JetSpace {
    nvars: usize,
    exps: Vec<Exps>,
    degree: Vec<u8>,
    len_by_order: [usize; MAX_ORDER + 1],
    mul: Vec<(u16, u16, u16)>,
    mul_len_by_order: [usize; MAX_ORDER + 1],
    deriv: Vec<Vec<(u16, u16, f64)>>,
    deriv_len_by_order: Vec<[usize; MAX_ORDER + 1]>,
}

impl JetSpace {
    fn build(nvars: usize) -> Self {
        let mut exps: Vec<Exps> = Vec::new();
        for deg in 0..=MAX_ORDER {
            let mut cur = [0u8; MAX_VARS];
            enumerate(nvars, 0, deg, &mut cur, &mut exps);
        }
        let degree: Vec<u8> = exps.iter().map(|e| e.iter().sum()).collect();
        let mut len_by_order = [0usize; MAX_ORDER + 1];
        for (o, slot) in len_by_order.iter_mut().enumerate() {
            *slot = degree.iter().filter(|&&d| d as usize <= o).count();
        }
        let index_of = |e: &Exps| exps.iter().position(|x| x == e).unwrap();

        let mut mul = Vec::new();
        for i in 0..exps.len() {
            for j in 0..exps.len() {
                if (degree[i] + degree[j]) as usize > MAX_ORDER {
                    continue;
                }
                let mut e = [0u8; MAX_VARS];
                for v in 0..MAX_VARS {
                    e[v] = exps[i][v] + exps[j][v];
                }
                mul.push((i as u16, j as u16, index_of(&e) as u16));
            }
        }
        mul.sort_by_key(|&(_, _, k)| degree[k as usize]);
        let mut mul_len_by_order = [0usize; MAX_ORDER + 1];
        for (o, slot) in mul_len_by_order.iter_mut().enumerate() {
            *slot = mul.iter().filter(|&&(_, _, k)| degree[k as usize] as usize <= o).count();
        }

        let mut deriv = Vec::with_capacity(nvars);
        let mut deriv_len_by_order = Vec::with_capacity(nvars);
        for var in 0..nvars {
            let mut entries = Vec::new();
            for (src, e) in exps.iter().enumerate() {
                if e[var] == 0 {
                    continue;
                }
                let mut d = *e;
                d[var] -= 1;
                entries.push((src as u16, index_of(&d) as u16, e[var] as f64));
            }
            entries.sort_by_key(|&(_, dst, _)| degree[dst as usize]);
            let mut lens = [0usize; MAX_ORDER + 1];
            for (o, slot) in lens.iter_mut().enumerate() {
                *slot = entries.iter().filter(|&&(_, dst, _)| degree[dst as usize] as usize <= o).count();
            }
            deriv.push(entries);
            deriv_len_by_order.push(lens);
        }

        JetSpace { nvars, exps, degree, len_by_order, mul, mul_len_by_order, deriv, deriv_len_by_order }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Number of coefficients of a jet of the given order.
    pub fn len(&self, order: usize) -> usize {
        self.len_by_order[order]
    }

    /// Position of the monomial with the given exponents, if representable.
    pub fn index(&self, exps: &[u8]) -> Option<usize> {
        let mut e = [0u8; MAX_VARS];
        e[..exps.len()].copy_from_slice(exps);
        self.exps.iter().position(|x| *x == e)
    }

    pub fn exponents(&self, idx: usize) -> &[u8] {
        &self.exps[idx][..self.nvars]
    }

    pub fn degree(&self, idx: usize) -> usize {
        self.degree[idx] as usize
    }
}

fn enumerate(nvars: usize, var: usize, remaining: usize, cur: &mut Exps, out: &mut Vec<Exps>) {
    if var + 1 == nvars {
        cur[var] = remaining as u8;
        out.push(*cur);
        cur[var] = 0;
        return;
    }
    for k in (0..=remaining).rev() {
        cur[var] = k as u8;
        enumerate(nvars, var + 1, remaining - k, cur, out);
    }
    cur[var] = 0;
}

static SPACES: [OnceLock<JetSpace>; MAX_VARS + 1] = [
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
    OnceLock::new(),
];

/// The shared monomial table for `nvars` independent variables.
pub fn space(nvars: usize) -> &'static JetSpace {
    assert!((1..=MAX_VARS).contains(&nvars), "jet spaces support 1..={MAX_VARS} variables");
    SPACES[nvars].get_or_init(|| JetSpace::build(nvars))
}

type Coeffs = SmallVec<[f64; 16]>;

/// Truncated Taylor polynomial about a base point.
#[derive(Clone)]
pub struct Jet {
    space: &'static JetSpace,
    order: u8,
    c: Coeffs,
}

impl std::fmt::Debug for Jet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Jet").field("nvars", &self.space.nvars).field("order", &self.order).field("c", &self.c).finish()
    }
}

impl Jet {
    pub fn constant(space: &'static JetSpace, order: usize, value: f64) -> Self {
        assert!(order <= MAX_ORDER);
        let mut c: Coeffs = SmallVec::from_elem(0.0, space.len(order));
        c[0] = value;
        Jet { space, order: order as u8, c }
    }

    /// The independent variable `var`, valued `value` at the base point.
    pub fn variable(space: &'static JetSpace, order: usize, var: usize, value: f64) -> Self {
        assert!(var < space.nvars);
        let mut j = Jet::constant(space, order, value);
        if order >= 1 {
            // degree-1 monomials follow the constant in lexicographically descending order
            j.c[1 + var] = 1.0;
        }
        j
    }

    pub fn space(&self) -> &'static JetSpace {
        self.space
    }

    pub fn order(&self) -> usize {
        self.order as usize
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c
    }

    /// Coefficient of the monomial with the given exponents (zero when truncated away).
    pub fn coeff(&self, exps: &[u8]) -> f64 {
        match self.space.index(exps) {
            Some(i) if i < self.c.len() => self.c[i],
            _ => 0.0,
        }
    }

    /// First partial derivative at the base point.
    pub fn partial(&self, var: usize) -> f64 {
        if self.order == 0 {
            panic!("order-0 jet carries no derivative information");
        }
        self.c[1 + var]
    }

    /// Second partial derivative at the base point.
    pub fn second_partial(&self, a: usize, b: usize) -> f64 {
        assert!(self.order >= 2, "order-2 jet required");
        let mut e = [0u8; MAX_VARS];
        e[a] += 1;
        e[b] += 1;
        let c = self.coeff(&e[..self.space.nvars]);
        if a == b {
            2.0 * c
        } else {
            c
        }
    }

    pub fn truncated(&self, order: usize) -> Jet {
        assert!(order <= self.order as usize, "cannot raise jet order from {} to {order}", self.order);
        Jet { space: self.space, order: order as u8, c: SmallVec::from_slice(&self.c[..self.space.len(order)]) }
    }

    pub fn lift(&self, value: f64) -> Jet {
        Jet::constant(self.space, self.order as usize, value)
    }

    /// Partial derivative with respect to `var`; the result has order one less.
    pub fn d(&self, var: usize) -> Jet {
        assert!(self.order >= 1, "cannot differentiate an order-0 jet");
        let out_order = self.order as usize - 1;
        let mut c: Coeffs = SmallVec::from_elem(0.0, self.space.len(out_order));
        let n = self.space.deriv_len_by_order[var][out_order];
        for &(src, dst, f) in &self.space.deriv[var][..n] {
            c[dst as usize] = f * self.c[src as usize];
        }
        Jet { space: self.space, order: out_order as u8, c }
    }

    fn check(&self, other: &Jet) {
        debug_assert!(std::ptr::eq(self.space, other.space), "jets from different spaces");
    }

    pub fn mul_ref(&self, other: &Jet) -> Jet {
        self.check(other);
        let order = self.order.min(other.order) as usize;
        let mut c: Coeffs = SmallVec::from_elem(0.0, self.space.len(order));
        let n = self.space.mul_len_by_order[order];
        let a = &self.c;
        let b = &other.c;
        for &(i, j, k) in &self.space.mul[..n] {
            c[k as usize] += a[i as usize] * b[j as usize];
        }
        Jet { space: self.space, order: order as u8, c }
    }

    pub fn add_ref(&self, other: &Jet) -> Jet {
        self.check(other);
        let order = self.order.min(other.order) as usize;
        let len = self.space.len(order);
        let c = self.c[..len].iter().zip(&other.c[..len]).map(|(a, b)| a + b).collect();
        Jet { space: self.space, order: order as u8, c }
    }

    pub fn sub_ref(&self, other: &Jet) -> Jet {
        self.check(other);
        let order = self.order.min(other.order) as usize;
        let len = self.space.len(order);
        let c = self.c[..len].iter().zip(&other.c[..len]).map(|(a, b)| a - b).collect();
        Jet { space: self.space, order: order as u8, c }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet { space: self.space, order: self.order, c: self.c.iter().map(|a| a * s).collect() }
    }

    /// `self += s * other`, truncating to the lower order.
    pub fn axpy(&mut self, s: f64, other: &Jet) {
        self.check(other);
        if other.order < self.order {
            self.order = other.order;
            self.c.truncate(self.space.len(other.order as usize));
        }
        for (a, b) in self.c.iter_mut().zip(&other.c) {
            *a += s * b;
        }
    }

    /// `self += a * b`.
    pub fn add_product(&mut self, a: &Jet, b: &Jet) {
        let order = self.order.min(a.order).min(b.order) as usize;
        if order < self.order as usize {
            self.order = order as u8;
            self.c.truncate(self.space.len(order));
        }
        let n = self.space.mul_len_by_order[order];
        for &(i, j, k) in &self.space.mul[..n] {
            self.c[k as usize] += a.c[i as usize] * b.c[j as usize];
        }
    }

    /// Compose with a univariate function given its Taylor coefficients
    /// `f^(k)(a0) / k!` at the base value, `k = 0..=order`.
    fn compose(&self, taylor: &[f64]) -> Jet {
        let order = self.order as usize;
        let mut delta = self.clone();
        delta.c[0] = 0.0;
        let mut r = self.lift(taylor[order]);
        for k in (0..order).rev() {
            r = r.mul_ref(&delta);
            r.c[0] += taylor[k];
        }
        r
    }

    pub fn recip(&self) -> Jet {
        let a0 = self.value();
        let n = self.order as usize;
        let inv = 1.0 / a0;
        let mut t = [0.0; MAX_ORDER + 1];
        let mut p = inv;
        for (k, tk) in t.iter_mut().enumerate().take(n + 1) {
            *tk = if k % 2 == 0 { p } else { -p };
            p *= inv;
        }
        self.compose(&t[..=n])
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cyc = [s, c, -s, -c];
        self.compose(&factorial_scaled(|k| cyc[k % 4], self.order as usize))
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cyc = [c, -s, -c, s];
        self.compose(&factorial_scaled(|k| cyc[k % 4], self.order as usize))
    }

    pub fn exp(&self) -> Jet {
        let e = self.value().exp();
        self.compose(&factorial_scaled(|_| e, self.order as usize))
    }

    pub fn ln(&self) -> Jet {
        let a0 = self.value();
        let n = self.order as usize;
        let mut t = [0.0; MAX_ORDER + 1];
        t[0] = a0.ln();
        for (k, tk) in t.iter_mut().enumerate().take(n + 1).skip(1) {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            *tk = sign / (k as f64 * a0.powi(k as i32));
        }
        self.compose(&t[..=n])
    }

    /// Real power via the generalized binomial series.
    pub fn powf(&self, p: f64) -> Jet {
        let a0 = self.value();
        let n = self.order as usize;
        let mut t = [0.0; MAX_ORDER + 1];
        let mut binom = 1.0;
        for (k, tk) in t.iter_mut().enumerate().take(n + 1) {
            *tk = binom * a0.powf(p - k as f64);
            binom *= (p - k as f64) / (k as f64 + 1.0);
        }
        self.compose(&t[..=n])
    }

    pub fn powi(&self, p: i32) -> Jet {
        match p {
            0 => self.lift(1.0),
            1 => self.clone(),
            2 => self.mul_ref(self),
            p if p < 0 => self.powi(-p).recip(),
            p => {
                let half = self.powi(p / 2);
                let sq = half.mul_ref(&half);
                if p % 2 == 1 {
                    sq.mul_ref(self)
                } else {
                    sq
                }
            }
        }
    }

    pub fn sqrt(&self) -> Jet {
        self.powf(0.5)
    }
}

fn factorial_scaled(f: impl Fn(usize) -> f64, n: usize) -> [f64; MAX_ORDER + 1] {
    let mut t = [0.0; MAX_ORDER + 1];
    let mut fact = 1.0;
    for (k, tk) in t.iter_mut().enumerate().take(n + 1) {
        if k > 0 {
            fact *= k as f64;
        }
        *tk = f(k) / fact;
    }
    t
}

macro_rules! forward_binop {
    ($tr:ident, $m:ident, $imp:ident) => {
        impl $tr<Jet> for Jet {
            type Output = Jet;
            fn $m(self, rhs: Jet) -> Jet {
                self.$imp(&rhs)
            }
        }
        impl<'a> $tr<&'a Jet> for Jet {
            type Output = Jet;
            fn $m(self, rhs: &'a Jet) -> Jet {
                self.$imp(rhs)
            }
        }
        impl<'a> $tr<&'a Jet> for &'a Jet {
            type Output = Jet;
            fn $m(self, rhs: &'a Jet) -> Jet {
                self.$imp(rhs)
            }
        }
    };
}

forward_binop!(Add, add, add_ref);
forward_binop!(Sub, sub, sub_ref);
forward_binop!(Mul, mul, mul_ref);

impl Div<Jet> for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self.mul_ref(&rhs.recip())
    }
}

impl<'a> Div<&'a Jet> for &'a Jet {
    type Output = Jet;
    fn div(self, rhs: &'a Jet) -> Jet {
        self.mul_ref(&rhs.recip())
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for a in self.c.iter_mut() {
            *a = -*a;
        }
        self
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, rhs: f64) -> Jet {
        self.c[0] += rhs;
        self
    }
}

impl Sub<f64> for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: f64) -> Jet {
        self.c[0] -= rhs;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(mut self, rhs: f64) -> Jet {
        for a in self.c.iter_mut() {
            *a *= rhs;
        }
        self
    }
}

impl Div<f64> for Jet {
    type Output = Jet;
    fn div(self, rhs: f64) -> Jet {
        self * (1.0 / rhs)
    }
}

impl AddAssign<&Jet> for Jet {
    fn add_assign(&mut self, rhs: &Jet) {
        self.axpy(1.0, rhs);
    }
}

impl SubAssign<&Jet> for Jet {
    fn sub_assign(&mut self, rhs: &Jet) {
        self.axpy(-1.0, rhs);
    }
}

impl MulAssign<f64> for Jet {
    fn mul_assign(&mut self, rhs: f64) {
        for a in self.c.iter_mut() {
            *a *= rhs;
        }
    }
}

/// Scalar arithmetic shared by plain floats and jets, so closed-form
/// expressions and metrics can be evaluated either way.
pub trait Real:
    Clone
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Mul<f64, Output = Self>
{
    /// A constant living in the same space (and at the same order) as `self`.
    fn lift(&self, c: f64) -> Self;
    fn value(&self) -> f64;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn powi(&self, p: i32) -> Self;
    fn powf(&self, p: f64) -> Self;
}

impl Real for f64 {
    fn lift(&self, c: f64) -> f64 {
        c
    }
    fn value(&self) -> f64 {
        *self
    }
    fn sin(&self) -> f64 {
        f64::sin(*self)
    }
    fn cos(&self) -> f64 {
        f64::cos(*self)
    }
    fn exp(&self) -> f64 {
        f64::exp(*self)
    }
    fn ln(&self) -> f64 {
        f64::ln(*self)
    }
    fn sqrt(&self) -> f64 {
        f64::sqrt(*self)
    }
    fn powi(&self, p: i32) -> f64 {
        f64::powi(*self, p)
    }
    fn powf(&self, p: f64) -> f64 {
        f64::powf(*self, p)
    }
}

impl Real for Jet {
    fn lift(&self, c: f64) -> Jet {
        Jet::lift(self, c)
    }
    fn value(&self) -> f64 {
        Jet::value(self)
    }
    fn sin(&self) -> Jet {
        Jet::sin(self)
    }
    fn cos(&self) -> Jet {
        Jet::cos(self)
    }
    fn exp(&self) -> Jet {
        Jet::exp(self)
    }
    fn ln(&self) -> Jet {
        Jet::ln(self)
    }
    fn sqrt(&self) -> Jet {
        Jet::sqrt(self)
    }
    fn powi(&self, p: i32) -> Jet {
        Jet::powi(self, p)
    }
    fn powf(&self, p: f64) -> Jet {
        Jet::powf(self, p)
    }
}

/// Seeds `values.len()` independent variables at the given base point.
pub fn seeds(space: &'static JetSpace, order: usize, values: &[f64]) -> Vec<Jet> {
    values.iter().enumerate().map(|(i, &v)| Jet::variable(space, order, i, v)).collect()
}

/// Solves a small dense linear system with jet (or float) entries by Gaussian
/// elimination, pivoting on the base values. `a` is row-major `n x n`.
pub fn solve_dense<T: Real>(mut a: Vec<T>, mut b: Vec<T>, n: usize) -> Option<Vec<T>> {
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i * n + col].value().abs().partial_cmp(&a[j * n + col].value().abs()).unwrap()
        })?;
        if a[pivot * n + col].value().abs() < 1e-300 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            b.swap(pivot, col);
        }
        let inv = a[col * n + col].lift(1.0) / a[col * n + col].clone();
        for row in col + 1..n {
            let factor = a[row * n + col].clone() * inv.clone();
            for k in col..n {
                let t = a[row * n + k].clone() - factor.clone() * a[col * n + k].clone();
                a[row * n + k] = t;
            }
            let t = b[row].clone() - factor * b[col].clone();
            b[row] = t;
        }
    }
    let mut x: Vec<T> = b.clone();
    for row in (0..n).rev() {
        let mut acc = b[row].clone();
        for k in row + 1..n {
            acc = acc - a[row * n + k].clone() * x[k].clone();
        }
        x[row] = acc / a[row * n + row].clone();
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn monomial_counts() {
        let s = space(4);
        assert_eq!(s.len(0), 1);
        assert_eq!(s.len(1), 5);
        assert_eq!(s.len(2), 15);
        assert_eq!(s.len(3), 35);
        let s6 = space(6);
        assert_eq!(s6.len(3), 84);
    }

    #[test]
    fn variable_layout_matches_index() {
        let s = space(3);
        for v in 0..3 {
            let mut e = [0u8; 3];
            e[v] = 1;
            assert_eq!(s.index(&e), Some(1 + v));
        }
    }

    #[test]
    fn product_rule_and_second_derivatives() {
        let s = space(2);
        let x = Jet::variable(s, 3, 0, 0.7);
        let y = Jet::variable(s, 3, 1, -0.3);
        // f = x^2 y + sin(x y)
        let f = &(&x * &x) * &y + (&x * &y).sin();
        let (a, b) = (0.7f64, -0.3f64);
        assert_relative_eq!(f.value(), a * a * b + (a * b).sin(), epsilon = 1e-14);
        assert_relative_eq!(f.partial(0), 2.0 * a * b + b * (a * b).cos(), epsilon = 1e-14);
        assert_relative_eq!(f.partial(1), a * a + a * (a * b).cos(), epsilon = 1e-14);
        assert_relative_eq!(f.second_partial(0, 1), 2.0 * a + (a * b).cos() - a * b * (a * b).sin(), epsilon = 1e-13);
        assert_relative_eq!(f.second_partial(0, 0), 2.0 * b - b * b * (a * b).sin(), epsilon = 1e-13);
    }

    #[test]
    fn derivative_lowers_order() {
        let s = space(2);
        let x = Jet::variable(s, 2, 0, 1.5);
        let f = x.powi(3);
        let df = f.d(0);
        assert_eq!(df.order(), 1);
        assert_relative_eq!(df.value(), 3.0 * 1.5 * 1.5, epsilon = 1e-14);
        assert_relative_eq!(df.partial(0), 6.0 * 1.5, epsilon = 1e-14);
    }

    #[test]
    fn elementary_functions_match_closed_forms() {
        let s = space(1);
        let x = Jet::variable(s, 4, 0, 0.4);
        let checks: [(Jet, [f64; 5]); 3] = [
            (x.exp(), [0.4f64.exp(); 5]),
            (x.ln(), [0.4f64.ln(), 1.0 / 0.4, -1.0 / 0.16, 2.0 / 0.064, -6.0 / 0.0256]),
            (x.sqrt(), [
                0.4f64.sqrt(),
                0.5 * 0.4f64.powf(-0.5),
                -0.25 * 0.4f64.powf(-1.5),
                0.375 * 0.4f64.powf(-2.5),
                -0.9375 * 0.4f64.powf(-3.5),
            ]),
        ];
        for (jet, derivs) in checks.iter() {
            let mut fact = 1.0;
            for (k, d) in derivs.iter().enumerate() {
                if k > 0 {
                    fact *= k as f64;
                }
                assert_relative_eq!(jet.coeffs()[k] * fact, *d, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn recip_and_division() {
        let s = space(2);
        let x = Jet::variable(s, 2, 0, 2.0);
        let y = Jet::variable(s, 2, 1, 3.0);
        let q = &x / &y;
        assert_relative_eq!(q.value(), 2.0 / 3.0);
        assert_relative_eq!(q.partial(0), 1.0 / 3.0);
        assert_relative_eq!(q.partial(1), -2.0 / 9.0);
        assert_relative_eq!(q.second_partial(1, 1), 4.0 / 27.0, epsilon = 1e-14);
    }

    #[test]
    fn mixed_order_truncates() {
        let s = space(2);
        let a = Jet::variable(s, 3, 0, 1.0);
        let b = Jet::variable(s, 1, 1, 2.0);
        assert_eq!((&a * &b).order(), 1);
        assert_eq!((&a + &b).order(), 1);
    }

    #[test]
    fn dense_solve_with_jets() {
        let s = space(1);
        let t = Jet::variable(s, 2, 0, 0.5);
        // [[2, t], [t, 1]] x = [1, 0]
        let a = vec![t.lift(2.0), t.clone(), t.clone(), t.lift(1.0)];
        let b = vec![t.lift(1.0), t.lift(0.0)];
        let x = solve_dense(a, b, 2).unwrap();
        // x0 = 1/(2 - t^2)
        let expect = 1.0 / (2.0 - 0.25);
        assert_relative_eq!(x[0].value(), expect, epsilon = 1e-14);
        assert_relative_eq!(x[0].partial(0), 2.0 * 0.5 * expect * expect, epsilon = 1e-13);
    }

    proptest::proptest! {
        #[test]
        fn jet_gradient_matches_central_difference(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            let f = |x: f64, y: f64| (x * y).exp() * (x - 2.0 * y).cos() / (2.0 + x * x);
            let s = space(2);
            let x = Jet::variable(s, 1, 0, a);
            let y = Jet::variable(s, 1, 1, b);
            let j = (&x * &y).exp() * (&x - &(y.clone() * 2.0)).cos() / ((&x * &x) + 2.0);
            let h = 1e-6;
            let fd0 = (f(a + h, b) - f(a - h, b)) / (2.0 * h);
            let fd1 = (f(a, b + h) - f(a, b - h)) / (2.0 * h);
            proptest::prop_assert!((j.partial(0) - fd0).abs() < 1e-7);
            proptest::prop_assert!((j.partial(1) - fd1).abs() < 1e-7);
        }
    }
}
