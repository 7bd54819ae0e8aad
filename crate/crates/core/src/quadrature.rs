//! Quadrature rules on the chart ball and on the fibers of the sphere bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on `[-1, 1]` (Newton iteration on `P_n`).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { z } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pnm1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        nodes[n - 1 - i] = z;
        weights[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (nodes, weights)
}

/// How interior Cartesian cells are integrated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRule {
    Midpoint,
    Gauss(usize),
}

/// Weighted points covering the ball `|x| <= radius` (Euclidean volume weights).
#[derive(Debug, Clone)]
pub struct BallQuadrature {
    pub dim: usize,
    pub radius: f64,
    pub spacing: f64,
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl BallQuadrature {
    /// Cartesian cells of side `spacing` aligned with the origin. Cells inside
    /// the ball use `rule`. In the plane a cell cut by the circle once is split
    /// into a polygon and a circular segment, each with a Gauss rule of the
    /// order of `rule` (at least two points). Other cut
    /// cells are subdivided `depth` times, interior pieces use `rule` and each
    /// leaf still cut gets a single point weighted by an estimate of its
    /// covered fraction.
    pub fn new(dim: usize, radius: f64, spacing: f64, rule: CellRule, depth: usize) -> Result<Self> {
        if !(spacing > 0.0) || spacing > 2.0 * radius {
            return Err(Error::Input(format!("quadrature spacing {spacing} is invalid for radius {radius}")));
        }
        let n = (radius / spacing).ceil() as i64;
        let (gn, gw) = match rule {
            CellRule::Midpoint => (vec![0.0], vec![2.0]),
            CellRule::Gauss(k) => gauss_legendre(k),
        };
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut idx = vec![-n; dim];
        loop {
            let lo: Vec<f64> = idx.iter().map(|&i| i as f64 * spacing).collect();
            let (near, far) = cell_extent(&lo, spacing);
            if far <= radius {
                push_tensor_rule(&lo, spacing, &gn, &gw, &mut points, &mut weights);
            } else if near < radius && !(dim == 2 && cut_cell_2d(&lo, spacing, radius, &mut points, &mut weights, gn.len().max(2))) {
                let mut out = Leaves { gn: &gn, gw: &gw, points: &mut points, weights: &mut weights };
                subdivide(&lo, spacing, radius, depth, &mut out);
            }
            // odometer increment
            let mut k = 0;
            loop {
                if k == dim {
                    return if points.is_empty() {
                        Err(Error::Input("empty quadrature set".into()))
                    } else {
                        Ok(BallQuadrature { dim, radius, spacing, points, weights })
                    };
                }
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = -n;
                k += 1;
            }
        }
    }

    /// Product rule in polar coordinates; exact for polynomials of moderate
    /// degree on the whole ball.
    pub fn polar(dim: usize, radius: f64, radial: usize, angular: usize) -> Result<Self> {
        if radial == 0 || angular == 0 {
            return Err(Error::Input("polar quadrature needs radial and angular samples".into()));
        }
        let (z, wz) = gauss_legendre(radial);
        let sphere = FiberRule::new(dim, angular, (angular / 2).max(1), angular, 0.0)?;
        let mut points = Vec::with_capacity(radial * sphere.dirs.len());
        let mut weights = Vec::with_capacity(points.capacity());
        for (zi, wi) in z.iter().zip(&wz) {
            let r = 0.5 * radius * (zi + 1.0);
            let wr = 0.5 * radius * wi * r.powi(dim as i32 - 1);
            for (dir, wd) in sphere.dirs.iter().zip(&sphere.weights) {
                points.push(dir.iter().map(|c| r * c).collect());
                weights.push(wr * wd);
            }
        }
        Ok(BallQuadrature { dim, radius, spacing: radius / radial as f64, points, weights })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Distances from the origin to the nearest and farthest points of a cell.
fn cell_extent(lo: &[f64], h: f64) -> (f64, f64) {
    let mut near = 0.0;
    let mut far = 0.0;
    for &a in lo {
        let b = a + h;
        let n = if a > 0.0 {
            a
        } else if b < 0.0 {
            -b
        } else {
            0.0
        };
        let f = a.abs().max(b.abs());
        near += n * n;
        far += f * f;
    }
    (near.sqrt(), far.sqrt())
}

fn push_tensor_rule(lo: &[f64], h: f64, gn: &[f64], gw: &[f64], points: &mut Vec<Vec<f64>>, weights: &mut Vec<f64>) {
    let d = lo.len();
    let k = gn.len();
    let total = k.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        let mut p = Vec::with_capacity(d);
        let mut w = 1.0;
        for &l in lo.iter() {
            let i = rem % k;
            rem /= k;
            p.push(l + 0.5 * h * (gn[i] + 1.0));
            w *= 0.5 * h * gw[i];
        }
        points.push(p);
        weights.push(w);
    }
}

// Gauss rule on the part of a square cell inside the disk when the circle
// crosses the cell boundary exactly twice; false leaves the cell untouched.
fn cut_cell_2d(lo: &[f64], h: f64, radius: f64, points: &mut Vec<Vec<f64>>, weights: &mut Vec<f64>, k: usize) -> bool {
    let corners = [[lo[0], lo[1]], [lo[0] + h, lo[1]], [lo[0] + h, lo[1] + h], [lo[0], lo[1] + h]];
    let r2 = radius * radius;
    let on = |p: &[f64; 2]| (p[0] * p[0] + p[1] * p[1] - r2).abs() <= 1e-12 * r2;
    let inside = |p: &[f64; 2]| p[0] * p[0] + p[1] * p[1] <= r2;
    let mut poly: Vec<[f64; 2]> = Vec::with_capacity(6);
    let mut crossings = Vec::with_capacity(2);
    for e in 0..4 {
        let (a, b) = (corners[e], corners[(e + 1) % 4]);
        if on(&a) {
            crossings.push(a);
        }
        if inside(&a) || on(&a) {
            poly.push(a);
        }
        // |a + t (b - a)|² = R², t in (0, 1)
        let dv = [b[0] - a[0], b[1] - a[1]];
        let qa = dv[0] * dv[0] + dv[1] * dv[1];
        let qb = 2.0 * (a[0] * dv[0] + a[1] * dv[1]);
        let qc = a[0] * a[0] + a[1] * a[1] - radius * radius;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc <= 0.0 {
            continue;
        }
        let sq = disc.sqrt();
        let mut ts = [(-qb - sq) / (2.0 * qa), (-qb + sq) / (2.0 * qa)];
        ts.sort_by(f64::total_cmp);
        for t in ts {
            let p = [a[0] + t * dv[0], a[1] + t * dv[1]];
            // crossings at corners were recorded with the corner
            if t > 0.0 && t < 1.0 && !(t < 0.5 && on(&a) || t >= 0.5 && on(&b)) {
                poly.push(p);
                crossings.push(p);
            }
        }
    }
    if crossings.len() != 2 {
        return false;
    }
    let (gx, gw) = gauss_legendre(k);
    // polygon: fan of triangles from its first vertex, Duffy-collapsed squares
    for i in 1..poly.len().saturating_sub(1) {
        let (a, b, c) = (poly[0], poly[i], poly[i + 1]);
        let det = ((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])).abs();
        for (u, wu) in gx.iter().zip(&gw) {
            let u = 0.5 * (u + 1.0);
            for (v, wv) in gx.iter().zip(&gw) {
                let v = 0.5 * (v + 1.0);
                points.push((0..2).map(|j| a[j] + u * (b[j] - a[j]) + u * v * (c[j] - b[j])).collect());
                weights.push(0.25 * wu * wv * u * det);
            }
        }
    }
    // circular segment between the chord and the arc, in polar coordinates;
    // the chord is not polynomial in the angle so the rule gets more points
    let (gx, gw) = gauss_legendre(k + 1);
    let t1 = crossings[0][1].atan2(crossings[0][0]);
    let mut t2 = crossings[1][1].atan2(crossings[1][0]);
    if t2 - t1 > std::f64::consts::PI {
        t2 -= std::f64::consts::TAU;
    } else if t1 - t2 > std::f64::consts::PI {
        t2 += std::f64::consts::TAU;
    }
    let (mid, half) = (0.5 * (t1 + t2), 0.5 * (t2 - t1).abs());
    let d0 = radius * half.cos();
    for (p, wp) in gx.iter().zip(&gw) {
        let phi = half * p;
        let rho = d0 / phi.cos();
        for (q, wq) in gx.iter().zip(&gw) {
            let r = rho + 0.5 * (q + 1.0) * (radius - rho);
            let th = mid + phi;
            points.push(vec![r * th.cos(), r * th.sin()]);
            weights.push(half * wp * 0.5 * (radius - rho) * wq * r);
        }
    }
    true
}

struct Leaves<'a> {
    gn: &'a [f64],
    gw: &'a [f64],
    points: &'a mut Vec<Vec<f64>>,
    weights: &'a mut Vec<f64>,
}

fn subdivide(lo: &[f64], h: f64, radius: f64, depth: usize, out: &mut Leaves) {
    let d = lo.len();
    let (near, far) = cell_extent(lo, h);
    if near >= radius {
        return;
    }
    if far <= radius {
        push_tensor_rule(lo, h, out.gn, out.gw, out.points, out.weights);
        return;
    }
    if depth == 0 {
        let c: Vec<f64> = lo.iter().map(|a| a + 0.5 * h).collect();
        let r = c.iter().map(|a| a * a).sum::<f64>().sqrt();
        // covered fraction of a cell cut by a locally flat boundary
        let width: f64 = if r > 0.0 { c.iter().map(|a| (a / r).abs()).sum::<f64>() * h } else { h };
        let frac = (0.5 + (radius - r) / width).clamp(0.0, 1.0);
        if frac > 0.0 {
            // move the point to the middle of the covered radial strip
            let target = if frac < 1.0 { 0.5 * (r - 0.5 * width + radius) } else { r };
            let p: Vec<f64> = c.iter().map(|a| if r > 0.0 { a * target / r } else { *a }).collect();
            out.points.push(p);
            out.weights.push(frac * h.powi(d as i32));
        }
        return;
    }
    let half = 0.5 * h;
    for corner in 0..(1usize << d) {
        let sub: Vec<f64> = (0..d).map(|k| lo[k] + if corner >> k & 1 == 1 { half } else { 0.0 }).collect();
        subdivide(&sub, half, radius, depth - 1, out);
    }
}

/// Spatial rule for integrals over the chart ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpatialRule {
    /// Cartesian cells of side `spacing · radius`, cut cells subdivided `depth`
    /// times (see [`BallQuadrature::new`]).
    Cartesian {
        spacing: f64,
        gauss_points: usize,
        #[serde(default = "default_depth")]
        depth: usize,
    },
    /// Gauss–Legendre in the radius times a sphere rule with `angular` azimuths.
    Polar { radial: usize, angular: usize },
}

impl SpatialRule {
    pub fn build(&self, dim: usize, radius: f64) -> Result<BallQuadrature> {
        match *self {
            SpatialRule::Cartesian { spacing, gauss_points, depth } => {
                let rule = if gauss_points <= 1 { CellRule::Midpoint } else { CellRule::Gauss(gauss_points) };
                BallQuadrature::new(dim, radius, spacing * radius, rule, depth)
            }
            SpatialRule::Polar { radial, angular } => BallQuadrature::polar(dim, radius, radial, angular),
        }
    }
}

fn default_depth() -> usize {
    3
}

/// Quadrature on the unit sphere `S^{d-1}` (directions and weights summing
/// to the sphere's area).
#[derive(Debug, Clone)]
pub struct FiberRule {
    pub dim: usize,
    pub dirs: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl FiberRule {
    /// `d = 2`: `n` equally spaced angles starting at `offset` (trapezoid);
    /// `d = 3`: Gauss–Legendre in the polar cosine (`n_polar`) times `n_azimuth`
    /// uniform azimuths starting at `offset`.
    pub fn new(dim: usize, n_angles: usize, n_polar: usize, n_azimuth: usize, offset: f64) -> Result<Self> {
        let tau = std::f64::consts::TAU;
        match dim {
            2 => {
                if n_angles == 0 {
                    return Err(Error::Input("fiber rule needs at least one angle".into()));
                }
                let w = tau / n_angles as f64;
                let dirs = (0..n_angles)
                    .map(|k| {
                        let t = offset + tau * k as f64 / n_angles as f64;
                        vec![t.cos(), t.sin()]
                    })
                    .collect();
                Ok(FiberRule { dim, dirs, weights: vec![w; n_angles] })
            }
            3 => {
                if n_polar == 0 || n_azimuth == 0 {
                    return Err(Error::Input("fiber rule needs polar and azimuthal samples".into()));
                }
                let (z, wz) = gauss_legendre(n_polar);
                let mut dirs = Vec::new();
                let mut weights = Vec::new();
                for (zi, wi) in z.iter().zip(&wz) {
                    let s = (1.0 - zi * zi).sqrt();
                    for k in 0..n_azimuth {
                        let p = offset + tau * k as f64 / n_azimuth as f64;
                        dirs.push(vec![s * p.cos(), s * p.sin(), *zi]);
                        weights.push(wi * tau / n_azimuth as f64);
                    }
                }
                Ok(FiberRule { dim, dirs, weights })
            }
            _ => Err(Error::Input(format!("unsupported fiber dimension {dim}"))),
        }
    }

    pub fn area(&self) -> f64 {
        self.weights.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        for n in 1..8 {
            let (x, w) = gauss_legendre(n);
            for p in 0..2 * n {
                let q: f64 = x.iter().zip(&w).map(|(a, b)| b * a.powi(p as i32)).sum();
                let exact = if p % 2 == 1 { 0.0 } else { 2.0 / (p as f64 + 1.0) };
                assert!((q - exact).abs() < 1e-13, "n={n} p={p}");
            }
        }
    }

    #[test]
    fn ball_volumes() {
        let q = BallQuadrature::new(2, 1.0, 1.0 / 32.0, CellRule::Midpoint, 4).unwrap();
        assert!((q.volume() / std::f64::consts::PI - 1.0).abs() < 1e-12, "{}", q.volume());
        assert!(q.points.iter().all(|p| p[0].hypot(p[1]) <= 1.0 + 1e-12));
        let q = BallQuadrature::new(3, 0.7, 0.7 / 12.0, CellRule::Gauss(2), 3).unwrap();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.343;
        assert!((q.volume() / exact - 1.0).abs() < 1e-3);
        assert!(q.points.iter().all(|p| p.iter().map(|a| a * a).sum::<f64>().sqrt() <= 0.7 + 1e-12));
        assert!(BallQuadrature::new(2, 1.0, -1.0, CellRule::Midpoint, 0).is_err());
        let p = SpatialRule::Polar { radial: 4, angular: 8 }.build(3, 0.7).unwrap();
        assert!((p.volume() / exact - 1.0).abs() < 1e-13);
        let s: f64 = p.points.iter().zip(&p.weights).map(|(x, w)| w * x[0] * x[0] * x[2] * x[2]).sum();
        assert!((s - 4.0 * std::f64::consts::PI * 0.7f64.powi(7) / 105.0).abs() < 1e-13);
    }

    #[test]
    fn interior_gauss_rule_is_exact_for_polynomials() {
        // ∫_{|x|<1} x1^2 x2^2 = π/24
        for (spacing, tol) in [(1.0 / 16.0, 1e-10), (0.3, 1e-7)] {
            let q = BallQuadrature::new(2, 1.0, spacing, CellRule::Gauss(3), 5).unwrap();
            let s: f64 = q.points.iter().zip(&q.weights).map(|(p, w)| w * p[0] * p[0] * p[1] * p[1]).sum();
            assert!((s - std::f64::consts::PI / 24.0).abs() < tol, "{spacing}: {s}");
        }
        // ∫_{|x|<1} x1^2 = 4π/15 in d = 3, cut cells subdivided
        let q = BallQuadrature::new(3, 1.0, 1.0 / 8.0, CellRule::Gauss(3), 4).unwrap();
        let s: f64 = q.points.iter().zip(&q.weights).map(|(p, w)| w * p[0] * p[0]).sum();
        assert!((s - 4.0 * std::f64::consts::PI / 15.0).abs() < 1e-3, "{s}");
    }

    #[test]
    fn fiber_rules_integrate_harmonics() {
        let f = FiberRule::new(2, 64, 0, 0, 0.3).unwrap();
        assert_relative_eq!(f.area(), std::f64::consts::TAU, epsilon = 1e-14);
        let s: f64 = f.dirs.iter().zip(&f.weights).map(|(v, w)| w * v[0] * v[1]).sum();
        assert!(s.abs() < 1e-14);
        let f = FiberRule::new(3, 0, 16, 32, 0.0).unwrap();
        assert_relative_eq!(f.area(), 4.0 * std::f64::consts::PI, epsilon = 1e-13);
        let s: f64 = f.dirs.iter().zip(&f.weights).map(|(v, w)| w * v[2] * v[2]).sum();
        assert_relative_eq!(s, 4.0 * std::f64::consts::PI / 3.0, epsilon = 1e-13);
    }
}
