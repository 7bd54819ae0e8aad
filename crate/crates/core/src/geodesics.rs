//! Geodesic flow on the unit sphere bundle, exit times, β-Jacobi fields and
//! conjugate-point scans.

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm_e, quad, MetricChart};
use crate::xray::{influx_fan, FanSpec};

/// A point of the unit sphere bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

impl PhasePoint {
    pub fn new(x: Vec<f64>, v: Vec<f64>) -> Self {
        PhasePoint { x, v }
    }

    /// Builds a phase point, rescaling `v` to unit length.
    pub fn unit(chart: &MetricChart, x: Vec<f64>, v: Vec<f64>) -> Self {
        let v = chart.normalize(&x, &v);
        PhasePoint { x, v }
    }

    pub fn reversed(&self) -> Self {
        PhasePoint { x: self.x.clone(), v: self.v.iter().map(|c| -c).collect() }
    }

    pub fn speed(&self, chart: &MetricChart) -> f64 {
        chart.norm(&self.x, &self.v)
    }
}

/// Default integration step, `1e-3` of the chart radius.
pub fn default_dt(chart: &MetricChart) -> f64 {
    1e-3 * chart.radius()
}

/// Default maximal integration time before a geodesic is declared trapped.
pub fn default_max_time(chart: &MetricChart) -> f64 {
    10.0 * chart.diameter_estimate()
}

fn check_unit(chart: &MetricChart, p: &PhasePoint) -> Result<()> {
    chart.check_point(&p.x)?;
    if p.v.len() != chart.dim() {
        return Err(Error::Input(format!("velocity has {} components, chart dimension is {}", p.v.len(), chart.dim())));
    }
    let norm = p.speed(chart);
    if (norm - 1.0).abs() > 1e-8 {
        return Err(Error::Normalization { norm });
    }
    Ok(())
}

/// One classical RK4 step of the geodesic equation, followed by rescaling
/// `v` to unit g-length.
pub fn rk4_step(chart: &MetricChart, x: &[f64], v: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let d = chart.dim();
    let mut a1 = [0.0; 3];
    let mut a2 = [0.0; 3];
    let mut a3 = [0.0; 3];
    let mut a4 = [0.0; 3];
    let mut xt = [0.0; 3];
    let mut vt = [0.0; 3];
    chart.geodesic_acceleration(x, v, &mut a1);
    for i in 0..d {
        xt[i] = x[i] + 0.5 * h * v[i];
        vt[i] = v[i] + 0.5 * h * a1[i];
    }
    let v2 = vt;
    chart.geodesic_acceleration(&xt[..d], &v2[..d], &mut a2);
    for i in 0..d {
        xt[i] = x[i] + 0.5 * h * v2[i];
        vt[i] = v[i] + 0.5 * h * a2[i];
    }
    let v3 = vt;
    chart.geodesic_acceleration(&xt[..d], &v3[..d], &mut a3);
    for i in 0..d {
        xt[i] = x[i] + h * v3[i];
        vt[i] = v[i] + h * a3[i];
    }
    let v4 = vt;
    chart.geodesic_acceleration(&xt[..d], &v4[..d], &mut a4);
    let mut xn = vec![0.0; d];
    let mut vn = vec![0.0; d];
    for i in 0..d {
        xn[i] = x[i] + h / 6.0 * (v[i] + 2.0 * v2[i] + 2.0 * v3[i] + v4[i]);
        vn[i] = v[i] + h / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
    }
    let n = chart.norm(&xn, &vn);
    vn.iter_mut().for_each(|c| *c /= n);
    (xn, vn)
}

/// `φ_t(p)`, integrated with `ceil(|t|/dt)` equal steps. Negative `t` flows backwards.
pub fn flow(chart: &MetricChart, p: &PhasePoint, t: f64, dt: f64) -> Result<PhasePoint> {
    check_unit(chart, p)?;
    if t == 0.0 {
        return Ok(p.clone());
    }
    let n = (t.abs() / dt).ceil().max(1.0) as usize;
    let h = t / n as f64;
    let r = chart.radius();
    let mut x = p.x.clone();
    let mut v = p.v.clone();
    for _ in 0..n {
        let (xn, vn) = rk4_step(chart, &x, &v, h);
        if norm_e(&xn) > r * (1.0 + 1e-9) {
            let start = if t > 0.0 { p.clone() } else { p.reversed() };
            let exit_time = exit_time_with(chart, &start, dt, default_max_time(chart))?;
            return Err(Error::Exit { exit_time, requested: t.abs() });
        }
        x = xn;
        v = vn;
    }
    Ok(PhasePoint { x, v })
}

/// Exit time `τ(x, v)` with the default step and trapping bound.
pub fn exit_time(chart: &MetricChart, p: &PhasePoint) -> Result<f64> {
    exit_time_with(chart, p, default_dt(chart), default_max_time(chart))
}

pub fn exit_time_with(chart: &MetricChart, p: &PhasePoint, dt: f64, max_time: f64) -> Result<f64> {
    Ok(trace(chart, p, dt, max_time, false)?.tau)
}

/// A sampled geodesic: `points[k]` is `φ_{k dt}(p)` for `k dt <= τ`, and
/// `exit` is `φ_τ(p)`.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    pub dt: f64,
    pub points: Vec<PhasePoint>,
    pub tau: f64,
    pub exit: PhasePoint,
}

impl GeodesicPath {
    /// Time of the last uniform sample.
    pub fn last_sample_time(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.dt
    }

    /// `φ_{t_k + h}(p)` for a sample index `k` and `0 <= h <= dt`, by one RK4 step.
    pub fn advance(&self, chart: &MetricChart, k: usize, h: f64) -> PhasePoint {
        let p = &self.points[k];
        let (x, v) = rk4_step(chart, &p.x, &p.v, h);
        PhasePoint { x, v }
    }
}

/// Integrates from `p` until the geodesic leaves the chart.
pub fn geodesic_path(chart: &MetricChart, p: &PhasePoint, dt: f64) -> Result<GeodesicPath> {
    trace(chart, p, dt, default_max_time(chart), true)
}

fn trace(chart: &MetricChart, p: &PhasePoint, dt: f64, max_time: f64, keep: bool) -> Result<GeodesicPath> {
    check_unit(chart, p)?;
    if !(dt > 0.0) {
        return Err(Error::Input(format!("step size must be positive, got {dt}")));
    }
    let r = chart.radius();
    let f = |x: &[f64]| norm_e(x) - r;
    let outward: f64 = p.x.iter().zip(&p.v).map(|(a, b)| a * b).sum();
    let on_boundary = f(&p.x) >= -1e-12 * r;
    let mut points = Vec::new();
    if on_boundary && outward >= 0.0 {
        points.push(p.clone());
        return Ok(GeodesicPath { dt, points, tau: 0.0, exit: p.clone() });
    }
    let mut x = p.x.clone();
    let mut v = p.v.clone();
    let mut t = 0.0;
    let mut k = 0usize;
    if keep {
        points.push(p.clone());
    }
    loop {
        let (xn, vn) = rk4_step(chart, &x, &v, dt);
        if f(&xn) > 0.0 {
            // bisection on the size of a single step from the last inside sample
            let (mut lo, mut hi) = (0.0, dt);
            while hi - lo > 1e-10 * r.max(1.0) {
                let mid = 0.5 * (lo + hi);
                let (xm, _) = rk4_step(chart, &x, &v, mid);
                if f(&xm) > 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let h = 0.5 * (lo + hi);
            let (xe, ve) = rk4_step(chart, &x, &v, h);
            if !keep {
                points.push(PhasePoint { x, v });
            }
            return Ok(GeodesicPath { dt, points, tau: t + h, exit: PhasePoint { x: xe, v: ve } });
        }
        k += 1;
        t = k as f64 * dt;
        x = xn;
        v = vn;
        if keep {
            points.push(PhasePoint { x: x.clone(), v: v.clone() });
        }
        if t > max_time {
            return Err(Error::Trapped { max_time });
        }
    }
}

/// Sampled solution of `D_t^2 J + β R(J, γ') γ' = 0`.
#[derive(Debug, Clone)]
pub struct JacobiField {
    pub beta: f64,
    pub times: Vec<f64>,
    /// Coordinate components of `J(t)`.
    pub components: Vec<Vec<f64>>,
    /// `|J(t)|_g`.
    pub norms: Vec<f64>,
}

impl JacobiField {
    /// First time after `t_min` at which `|J|_g` has a zero, by sign tracking
    /// of the transverse component when `J` stays normal.
    pub fn first_zero(&self, t_min: f64) -> Option<f64> {
        for k in 1..self.norms.len() - 1 {
            let (a, b, c) = (self.norms[k - 1], self.norms[k], self.norms[k + 1]);
            if self.times[k] <= t_min || !(b <= a && b <= c) {
                continue;
            }
            if let Some(t) = v_zero(a, b, c, self.times[k], self.times[k + 1] - self.times[k]) {
                return Some(t);
            }
        }
        None
    }
}

/// Parallel frame and transverse Jacobi data integrated alongside a geodesic.
struct FrameState {
    n: usize,
    nb: usize,
}

impl FrameState {
    // layout: x(d) v(d) frame(n*d) then per beta: Y(n*n) Y'(n*n)
    fn len(&self, d: usize) -> usize {
        2 * d + self.n * d + self.nb * 2 * self.n * self.n
    }
}

fn frame_rhs(chart: &MetricChart, fs: &FrameState, betas: &[f64], s: &[f64], out: &mut [f64]) {
    let d = chart.dim();
    let n = fs.n;
    let x = &s[..d];
    let v = &s[d..2 * d];
    out[..d].copy_from_slice(v);
    let mut tmp = [0.0; 3];
    chart.geodesic_acceleration(x, v, &mut tmp);
    out[d..2 * d].copy_from_slice(&tmp[..d]);
    let frame = &s[2 * d..2 * d + n * d];
    for a in 0..n {
        chart.christoffel_contract(x, v, &frame[a * d..(a + 1) * d], &mut tmp);
        for l in 0..d {
            out[2 * d + a * d + l] = -tmp[l];
        }
    }
    // M_ab = <e_a, R(e_b, v)v>
    let g = chart.metric_generic(x);
    let images: Vec<Vec<f64>> = (0..n).map(|b| chart.curvature_apply(x, &frame[b * d..(b + 1) * d], v)).collect();
    let mut m = vec![0.0; n * n];
    for a in 0..n {
        for b in 0..n {
            m[a * n + b] = quad(&g, &frame[a * d..(a + 1) * d], &images[b], d);
        }
    }
    let base = 2 * d + n * d;
    for (ib, beta) in betas.iter().enumerate() {
        let off = base + ib * 2 * n * n;
        let y = &s[off..off + n * n];
        let yd = &s[off + n * n..off + 2 * n * n];
        for idx in 0..n * n {
            out[off + idx] = yd[idx];
        }
        // Y'' = -β M Y
        for a in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += m[a * n + b] * y[b * n + c];
                }
                out[off + n * n + a * n + c] = -beta * acc;
            }
        }
    }
}

fn rk4_vec(f: &dyn Fn(&[f64], &mut [f64]), s: &mut [f64], h: f64) {
    let len = s.len();
    let mut k1 = vec![0.0; len];
    let mut k2 = vec![0.0; len];
    let mut k3 = vec![0.0; len];
    let mut k4 = vec![0.0; len];
    let mut tmp = vec![0.0; len];
    f(s, &mut k1);
    for i in 0..len {
        tmp[i] = s[i] + 0.5 * h * k1[i];
    }
    f(&tmp, &mut k2);
    for i in 0..len {
        tmp[i] = s[i] + 0.5 * h * k2[i];
    }
    f(&tmp, &mut k3);
    for i in 0..len {
        tmp[i] = s[i] + h * k3[i];
    }
    f(&tmp, &mut k4);
    for i in 0..len {
        s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Restores unit speed and g-orthonormality of the transported frame.
fn renormalize(chart: &MetricChart, n: usize, s: &mut [f64]) {
    let d = chart.dim();
    let x = s[..d].to_vec();
    let g = chart.metric_generic(&x);
    let vn = quad(&g, &s[d..2 * d], &s[d..2 * d], d).sqrt();
    s[d..2 * d].iter_mut().for_each(|c| *c /= vn);
    let v = s[d..2 * d].to_vec();
    for a in 0..n {
        let mut w = s[2 * d + a * d..2 * d + (a + 1) * d].to_vec();
        let c = quad(&g, &w, &v, d);
        for l in 0..d {
            w[l] -= c * v[l];
        }
        for b in 0..a {
            let e = &s[2 * d + b * d..2 * d + (b + 1) * d];
            let c = quad(&g, &w, e, d);
            for l in 0..d {
                w[l] -= c * e[l];
            }
        }
        let nw = quad(&g, &w, &w, d).sqrt();
        for l in 0..d {
            s[2 * d + a * d + l] = w[l] / nw;
        }
    }
}

fn initial_frame_state(chart: &MetricChart, p: &PhasePoint, betas: &[f64]) -> Result<(FrameState, Vec<f64>)> {
    let d = chart.dim();
    let n = d - 1;
    let fs = FrameState { n, nb: betas.len() };
    let frame = chart.complement_frame(&p.x, &p.v)?;
    let mut s = vec![0.0; fs.len(d)];
    s[..d].copy_from_slice(&p.x);
    s[d..2 * d].copy_from_slice(&p.v);
    for a in 0..n {
        s[2 * d + a * d..2 * d + (a + 1) * d].copy_from_slice(&frame[a]);
    }
    Ok((fs, s))
}

/// Integrates the β-Jacobi equation along `path` from `J(0) = j0`, `J'(0) = j0dot`.
pub fn beta_jacobi(chart: &MetricChart, path: &GeodesicPath, beta: f64, j0: &[f64], j0dot: &[f64]) -> Result<JacobiField> {
    let d = chart.dim();
    if path.points.len() < 3 {
        return Err(Error::Input(format!("path has {} samples; at least two steps are needed", path.points.len())));
    }
    if j0.len() != d || j0dot.len() != d {
        return Err(Error::Input("Jacobi initial data must have chart dimension".into()));
    }
    let p0 = &path.points[0];
    let (fs, mut s) = initial_frame_state(chart, p0, &[beta])?;
    let n = fs.n;
    let g0 = chart.metric(&p0.x)?;
    let frame0: Vec<Vec<f64>> = (0..n).map(|a| s[2 * d + a * d..2 * d + (a + 1) * d].to_vec()).collect();
    // tangential part a(t) = a0 + t a1; transverse part via Y: y(t) = Y(t) y0' + Z(t) y0
    let a0 = quad(&g0, j0, &p0.v, d);
    let a1 = quad(&g0, j0dot, &p0.v, d);
    let y0: Vec<f64> = frame0.iter().map(|e| quad(&g0, j0, e, d)).collect();
    let y1: Vec<f64> = frame0.iter().map(|e| quad(&g0, j0dot, e, d)).collect();
    // single "beta slot" carrying y (column 0) and y' instead of a full matrix
    let base = 2 * d + n * d;
    for a in 0..n {
        s[base + a * n] = y0[a];
        s[base + n * n + a * n] = y1[a];
    }
    let betas = [beta];
    let rhs = |st: &[f64], out: &mut [f64]| frame_rhs(chart, &fs, &betas, st, out);
    let mut times = Vec::with_capacity(path.points.len());
    let mut components = Vec::with_capacity(path.points.len());
    let mut norms = Vec::with_capacity(path.points.len());
    let mut record = |t: f64, st: &[f64]| {
        let x = &st[..d];
        let v = &st[d..2 * d];
        let a = a0 + t * a1;
        let mut j: Vec<f64> = v.iter().map(|c| a * c).collect();
        for b in 0..n {
            let yb = st[base + b * n];
            for l in 0..d {
                j[l] += yb * st[2 * d + b * d + l];
            }
        }
        let g = chart.metric_generic(x);
        norms.push(quad(&g, &j, &j, d).sqrt());
        components.push(j);
        times.push(t);
    };
    record(0.0, &s);
    for k in 1..path.points.len() {
        rk4_vec(&rhs, &mut s, path.dt);
        renormalize(chart, n, &mut s);
        record(k as f64 * path.dt, &s);
    }
    Ok(JacobiField { beta, times, components, norms })
}

/// Outcome of a β-conjugate-point scan over a fan of geodesics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateReport {
    pub beta: f64,
    pub free: bool,
    /// Index (in fan order) of the ray with the earliest conjugate point.
    pub worst_ray: Option<usize>,
    /// Earliest conjugate time found.
    pub t_conj: Option<f64>,
    pub n_rays: usize,
}

/// Zero of `|f|` from three samples around a local minimum, assuming `f` is
/// locally linear through a root; `None` when the samples look like a
/// positive minimum.
fn v_zero(a: f64, b: f64, c: f64, tb: f64, dt: f64) -> Option<f64> {
    if b == 0.0 {
        return Some(tb);
    }
    let (near, far, sign) = if a > c { (c, a, 1.0) } else { (a, c, -1.0) };
    let slope = (b + near) / dt;
    let predicted_far = 2.0 * b + near;
    if (far - predicted_far).abs() <= 0.05 * (far + near) && slope > 0.0 {
        Some(tb + sign * b / slope)
    } else {
        None
    }
}

fn det_small(m: &[f64], n: usize) -> f64 {
    match n {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            let mat = nalgebra::DMatrix::from_row_slice(n, n, m);
            mat.determinant()
        }
    }
}

fn min_singular(m: &[f64], n: usize) -> f64 {
    if n == 1 {
        return m[0].abs();
    }
    let mat = nalgebra::DMatrix::from_row_slice(n, n, m);
    mat.singular_values().min()
}

/// First conjugate time along one geodesic for each β, or `None` if free up to exit.
pub fn first_conjugate_times(chart: &MetricChart, p: &PhasePoint, betas: &[f64], dt: f64) -> Result<Vec<Option<f64>>> {
    let d = chart.dim();
    let tau = exit_time_with(chart, p, dt, default_max_time(chart))?;
    let (fs, mut s) = initial_frame_state(chart, p, betas)?;
    let n = fs.n;
    let base = 2 * d + n * d;
    for ib in 0..betas.len() {
        let off = base + ib * 2 * n * n;
        for a in 0..n {
            s[off + n * n + a * n + a] = 1.0;
        }
    }
    let rhs = |st: &[f64], out: &mut [f64]| frame_rhs(chart, &fs, betas, st, out);
    let steps = (tau / dt).floor() as usize;
    let mut out: Vec<Option<f64>> = vec![None; betas.len()];
    // rolling history of (det, sigma_min) per beta
    let mut hist: Vec<Vec<(f64, f64)>> = vec![Vec::with_capacity(3); betas.len()];
    let step_to = |s: &mut Vec<f64>, h: f64| {
        rk4_vec(&rhs, s, h);
        renormalize(chart, n, s);
    };
    let mut t = 0.0;
    for k in 1..=steps + 1 {
        let h = if k <= steps { dt } else { tau - steps as f64 * dt };
        if h <= 0.0 {
            break;
        }
        step_to(&mut s, h);
        t += h;
        for (ib, slot) in out.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let off = base + ib * 2 * n * n;
            let y = &s[off..off + n * n];
            let det = det_small(y, n);
            let smin = min_singular(y, n);
            let hst = &mut hist[ib];
            if det.abs() < 1e-10 {
                *slot = Some(t);
                continue;
            }
            if let Some(&(dprev, _)) = hst.last() {
                if dprev.signum() != det.signum() {
                    // linear interpolation of det over the last step
                    *slot = Some(t - h + h * dprev / (dprev - det));
                    continue;
                }
            }
            hst.push((det, smin));
            if hst.len() > 3 {
                hst.remove(0);
            }
            if hst.len() == 3 && h == dt {
                let (a, b, c) = (hst[0].1, hst[1].1, hst[2].1);
                if b <= a && b <= c {
                    // even-order zero of det: the smallest singular value touches zero
                    if let Some(tz) = v_zero(a, b, c, t - dt, dt) {
                        *slot = Some(tz);
                    }
                }
            }
        }
        if out.iter().all(|o| o.is_some()) {
            break;
        }
    }
    Ok(out)
}

/// Scans the fan for β-conjugate points, one report per β.
pub fn conjugate_scan(chart: &MetricChart, betas: &[f64], fan: &[PhasePoint], dt: f64) -> Result<Vec<ConjugateReport>> {
    for &b in betas {
        if !(b >= 0.0) {
            return Err(Error::Input(format!("β must be nonnegative, got {b}")));
        }
    }
    let per_ray: Vec<Result<Vec<Option<f64>>>> = fan.par_iter().map(|p| first_conjugate_times(chart, p, betas, dt)).collect();
    let mut reports: Vec<ConjugateReport> =
        betas.iter().map(|&beta| ConjugateReport { beta, free: true, worst_ray: None, t_conj: None, n_rays: fan.len() }).collect();
    for (ray, res) in per_ray.into_iter().enumerate() {
        let times = res?;
        for (rep, t) in reports.iter_mut().zip(times) {
            if let Some(t) = t {
                if rep.t_conj.is_none_or(|cur| t < cur) {
                    rep.t_conj = Some(t);
                    rep.worst_ray = Some(ray);
                    rep.free = false;
                }
            }
        }
    }
    Ok(reports)
}

/// `is_beta_conjugate_free` over an influx fan.
pub fn is_beta_conjugate_free(chart: &MetricChart, beta: f64, fan: &FanSpec, dt: f64) -> Result<ConjugateReport> {
    let rays = influx_fan(chart, fan)?;
    Ok(conjugate_scan(chart, &[beta], &rays, dt)?.remove(0))
}

/// `(β⁽¹⁾, β⁽²⁾) = (m(d+m)/(d+2m-1), m(d+m-1)/(d+2m-2))`, exactly.
pub fn beta_thresholds(d: i64, m: i64) -> Result<(Ratio<i64>, Ratio<i64>)> {
    if d < 2 || m < 1 {
        return Err(Error::Input(format!("thresholds need d >= 2 and m >= 1 (d = {d}, m = {m})")));
    }
    Ok((Ratio::new(m * (d + m), d + 2 * m - 1), Ratio::new(m * (d + m - 1), d + 2 * m - 2)))
}

pub fn beta_thresholds_f64(d: usize, m: usize) -> Result<(f64, f64)> {
    let (b1, b2) = beta_thresholds(d as i64, m as i64)?;
    Ok((ratio_f64(b1), ratio_f64(b2)))
}

pub(crate) fn ratio_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimplicityReport {
    pub convexity: CheckOutcome,
    /// Smallest sampled second fundamental form value `II(w, w)` for unit `w`.
    pub min_second_fundamental_form: f64,
    pub conjugate_free: CheckOutcome,
    pub non_trapping: CheckOutcome,
}

impl SimplicityReport {
    pub fn pass(&self) -> bool {
        self.convexity.pass && self.conjugate_free.pass && self.non_trapping.pass
    }
}

/// Second fundamental form `II(w, w)` of the boundary sphere at `x` (|x| = radius)
/// for a g-unit tangent `w`, positive for a convex boundary.
pub fn second_fundamental_form(chart: &MetricChart, x: &[f64], w: &[f64]) -> f64 {
    let d = chart.dim();
    // ρ = R² − |x|²: ∂ρ = −2x, Hess ρ = −2δ − Γ^k_ij ∂_kρ
    let mut gw = [0.0; 3];
    chart.christoffel_contract(x, w, w, &mut gw);
    let ww: f64 = w.iter().map(|c| c * c).sum();
    let hess = -2.0 * ww + 2.0 * (0..d).map(|k| gw[k] * x[k]).sum::<f64>();
    let ginv = chart.inverse_metric(x).unwrap_or_else(|_| vec![f64::NAN; d * d]);
    let drho: Vec<f64> = x.iter().map(|c| -2.0 * c).collect();
    let norm = quad(&ginv, &drho, &drho, d).sqrt();
    -hess / norm
}

/// Partial simplicity checks: boundary convexity, absence of ordinary
/// conjugate points and of trapped geodesics on the fan. Never errors.
pub fn simplicity_probe(chart: &MetricChart, fan: &FanSpec, dt: f64) -> SimplicityReport {
    let d = chart.dim();
    let boundary = crate::xray::boundary_points(chart, fan.n_boundary.max(8));
    let mut min_ii = f64::INFINITY;
    for x in &boundary {
        let nu: Vec<f64> = x.clone();
        let unit_nu = chart.normalize(x, &nu);
        if let Ok(frame) = chart.complement_frame(x, &unit_nu) {
            let n_dir = if d == 2 { 1 } else { 8 };
            for j in 0..n_dir {
                let w: Vec<f64> = if d == 2 {
                    frame[0].clone()
                } else {
                    let a = std::f64::consts::PI * j as f64 / n_dir as f64;
                    (0..d).map(|l| a.cos() * frame[0][l] + a.sin() * frame[1][l]).collect()
                };
                min_ii = min_ii.min(second_fundamental_form(chart, x, &w));
            }
        }
    }
    let convexity = CheckOutcome { pass: min_ii > 1e-12, detail: format!("min II(w,w) = {min_ii:.6e}") };
    let rays = influx_fan(chart, fan).unwrap_or_default();
    let mut trapped = 0usize;
    for p in &rays {
        if let Err(Error::Trapped { .. }) = exit_time_with(chart, p, dt, default_max_time(chart)) {
            trapped += 1;
        }
    }
    let non_trapping = CheckOutcome { pass: trapped == 0, detail: format!("{trapped} of {} rays trapped", rays.len()) };
    let conjugate_free = if trapped > 0 {
        CheckOutcome { pass: false, detail: "skipped: trapped geodesics present".into() }
    } else {
        match conjugate_scan(chart, &[1.0], &rays, dt) {
            Ok(r) if r[0].free => CheckOutcome { pass: true, detail: format!("{} rays free of conjugate points", rays.len()) },
            Ok(r) => CheckOutcome {
                pass: false,
                detail: format!("conjugate point on ray {:?} at t = {:?}", r[0].worst_ray, r[0].t_conj),
            },
            Err(e) => CheckOutcome { pass: false, detail: e.to_string() },
        }
    };
    SimplicityReport { convexity, min_second_fundamental_form: min_ii, conjugate_free, non_trapping }
}
