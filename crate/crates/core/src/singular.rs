//! Singular-regime integrals: planar convex-curve comparisons, the exact
//! circle integral with its logarithmic bound, the chord/distance bound, the
//! 3D static grazing integral over incoming directions, and the dynamical
//! (time) singular integral along backward trajectories.

use crate::billiard::backward_exit;
use crate::error::{Error, Result};
use crate::geometry::ConvexObstacle;
use crate::quad::{self, GaussRule, QuadratureReport};
use crate::rng::orthogonal_unit;
use crate::{bracket, unit_or_zero, Vec3};
use rayon::prelude::*;
use std::sync::Arc;

/// A smooth convex graph f on [0, s_max] with f(0) = 0, f'(0) = 0, used for
/// the planar comparison lemmas. The curvature floor is supplied explicitly
/// since the relevant regime is a neighborhood of the grazing point.
#[derive(Clone)]
pub struct PlanarConvexGraph {
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub df: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub curvature: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub k_min: f64,
    pub s_max: f64,
}

impl PlanarConvexGraph {
    /// f(s) = a s^2 with curvature 2a at the origin.
    pub fn parabola(a: f64, s_max: f64) -> Self {
        PlanarConvexGraph {
            f: Arc::new(move |s| a * s * s),
            df: Arc::new(move |s| 2.0 * a * s),
            curvature: Arc::new(move |s| 2.0 * a / (1.0 + 4.0 * a * a * s * s).powf(1.5)),
            k_min: 2.0 * a,
            s_max,
        }
    }

    /// Quarter circle of radius r: f(s) = r - sqrt(r^2 - s^2).
    pub fn circle(r: f64) -> Self {
        PlanarConvexGraph {
            f: Arc::new(move |s| r - (r * r - s * s).max(0.0).sqrt()),
            df: Arc::new(move |s| s / (r * r - s * s).max(1e-300).sqrt()),
            curvature: Arc::new(move |_| 1.0 / r),
            k_min: 1.0 / r,
            s_max: r * (1.0 - 1e-9),
        }
    }

    /// Checks k = f'' / (1 + f'^2)^{3/2} against the callback by central
    /// differences on f'.
    pub fn curvature_consistent(&self, tol: f64) -> bool {
        let h = 1e-6;
        for i in 1..40 {
            let s = self.s_max * i as f64 / 41.0;
            let fpp = ((self.df)(s + h) - (self.df)(s - h)) / (2.0 * h);
            let fp = (self.df)(s);
            let k = fpp / (1.0 + fp * fp).powf(1.5);
            if (k - (self.curvature)(s)).abs() > tol * (1.0 + k.abs()) {
                return false;
            }
        }
        true
    }
}

/// Cosine of the specular incidence angle at the intersections of the curve
/// (and its comparison circle) with the descending line of slope -tan(delta).
#[derive(Debug, Clone, Copy)]
pub enum AngleCompareResult {
    Found { a_p: f64, a_q: f64, p: f64, q: f64 },
    NoIntersection,
}

/// Locate the intersections of the curve and of the comparison circle
/// (curvature k_min / 2) with g(s) = (x1 - s) tan(delta), and evaluate the
/// incidence cosine at each.
pub fn angle_compare(curve: &PlanarConvexGraph, x1: f64, delta: f64) -> Result<AngleCompareResult> {
    if !(x1 > 0.0) || !(delta > 0.0 && delta < std::f64::consts::FRAC_PI_2) {
        return Err(Error::invalid("require x1 > 0 and delta in (0, pi/2)"));
    }
    let tan_d = delta.tan();
    let g = move |s: f64| (x1 - s) * tan_d;
    let km = curve.k_min / 2.0;
    let circle = PlanarConvexGraph::circle(1.0 / km);

    let p = intersect(&*curve.f, &g, curve.s_max.min(x1));
    let q = intersect(&*circle.f, &g, circle.s_max.min(x1));
    let (Some(p), Some(q)) = (p, q) else {
        return Ok(AngleCompareResult::NoIntersection);
    };
    let cosine = |fp: f64| (fp * delta.cos() + delta.sin()) / (1.0 + fp * fp).sqrt();
    Ok(AngleCompareResult::Found {
        a_p: cosine((curve.df)(p)),
        a_q: cosine((circle.df)(q)),
        p,
        q,
    })
}

/// Largest tested value of x1 tan(delta) below which the circle incidence
/// cosine stays below the curve's, scanning decades downward.
pub fn angle_threshold(curve: &PlanarConvexGraph, x1: f64) -> f64 {
    let mut holds_from = f64::NAN;
    for i in 0..33 {
        let w = 10f64.powf(-0.25 * i as f64 - 1.0);
        let delta = (w / x1).atan();
        match angle_compare(curve, x1, delta) {
            Ok(AngleCompareResult::Found { a_p, a_q, .. }) if a_q <= a_p + 1e-12 => {
                if holds_from.is_nan() {
                    holds_from = w;
                }
            }
            _ => holds_from = f64::NAN,
        }
    }
    holds_from
}

fn intersect(
    f: &(dyn Fn(f64) -> f64 + Send + Sync),
    g: &dyn Fn(f64) -> f64,
    s_hi: f64,
) -> Option<f64> {
    let h = |s: f64| f(s) - g(s);
    if h(0.0) >= 0.0 {
        return None;
    }
    let mut hi = s_hi;
    if h(hi) < 0.0 {
        return None;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Closest point of the graph to (x1, 0) and the slope of the connecting
/// segment, by golden section plus Newton polish.
pub fn closest_point_slope(curve: &PlanarConvexGraph, x1: f64) -> Result<(f64, f64)> {
    if !(x1 > 0.0) {
        return Err(Error::invalid("x1 must be positive"));
    }
    let d2 = |s: f64| {
        let fs = (curve.f)(s);
        (s - x1) * (s - x1) + fs * fs
    };
    let hi = curve.s_max.min(x1);
    let (mut p, _) = crate::shift::golden_max(&|s| -d2(s), 0.0, hi, 80);
    // Newton polish on the stationarity condition (s - x1) + f f' = 0.
    for _ in 0..20 {
        let fs = (curve.f)(p);
        let fp = (curve.df)(p);
        let h = 1e-7;
        let grad = (p - x1) + fs * fp;
        let gpp = ((p + h - x1) + (curve.f)(p + h) * (curve.df)(p + h)
            - ((p - h - x1) + (curve.f)(p - h) * (curve.df)(p - h)))
            / (2.0 * h);
        if gpp.abs() < 1e-300 {
            break;
        }
        let next = (p - grad / gpp).clamp(0.0, hi);
        if (next - p).abs() < 1e-15 * (1.0 + p.abs()) {
            p = next;
            break;
        }
        p = next;
    }
    if p > x1 {
        return Err(Error::domain(format!("closest point {p} beyond the base abscissa {x1}")));
    }
    let slope = (curve.f)(p) / (x1 - p).max(1e-300);
    Ok((p, slope))
}

/// Minimum of slope * x1 over a sweep of base abscissae: the empirical
/// x1-independent floor of the approach angle.
pub fn grazing_slope_floor(curve: &PlanarConvexGraph, x1_list: &[f64]) -> Result<f64> {
    let mut floor = f64::INFINITY;
    for &x1 in x1_list {
        let (_, slope) = closest_point_slope(curve, x1)?;
        floor = floor.min(slope * x1);
    }
    Ok(floor)
}

/// Circle grazing integral and the exact mid-computation identity.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CircleGrazingIntegral {
    pub quad: QuadratureReport,
    pub bound: f64,
    pub identity_value: f64,
    pub identity_expected: f64,
    pub alpha_g: f64,
}

/// Integral over the upper half of the grazing angle range of the inverse
/// transversal component on a circle of radius R seen from distance `dist`,
/// together with the closed-form identity that the computation evaluates
/// exactly.
pub fn circle_grazing_integral(r: f64, dist: f64) -> Result<CircleGrazingIntegral> {
    if !(dist > 0.0) || !(r > 0.0) {
        return Err(Error::invalid("require R > 0 and dist > 0"));
    }
    let x = r + dist;
    let alpha_g = (r / x).asin();
    // Integrand 1/sqrt(R^2 - |x|^2 sin^2 u); vanishing denominator at the
    // grazing endpoint, removed by u = alpha_g - w^2.
    let f = |u: f64| {
        let q = r * r - x * x * u.sin().powi(2);
        1.0 / q.max(1e-300).sqrt()
    };
    let sub = |w: f64| 2.0 * w * f(alpha_g - w * w);
    let quad = quad::adaptive(&sub, 0.0, (alpha_g / 2.0).sqrt(), 1e-12, 1e-10, 45)?;
    let bound = (1.0 / r) * (1.0 + 2.0 * r / dist).ln();

    // Identity: int_0^{alpha_g} sin(t)/sqrt(R^2/|x|^2 - sin^2 t) dt
    //         = (1/2) ln(1 + 2R/(|x| - R)).
    let ratio2 = (r / x) * (r / x);
    let g = |t: f64| {
        let q = ratio2 - t.sin().powi(2);
        t.sin() / q.max(1e-300).sqrt()
    };
    let gsub = |w: f64| 2.0 * w * g(alpha_g - w * w);
    let identity_value = quad::adaptive(&gsub, 0.0, alpha_g.sqrt(), 1e-12, 1e-10, 45)?.value;
    let identity_expected = 0.5 * (1.0 + 2.0 * r / (x - r)).ln();
    Ok(CircleGrazingIntegral { quad, bound, identity_value, identity_expected, alpha_g })
}

/// Chord bound comparison: ln(1 + 2R/d) vs 2 ln(1 + 2 sqrt(3) R / l) with
/// l = sqrt(d (d + 2R)) the distance to the grazing point.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct ChordBound {
    pub lhs: f64,
    pub rhs: f64,
    pub chord: f64,
}

pub fn chord_bound_check(r: f64, dist: f64) -> Result<ChordBound> {
    if !(dist > 0.0) || !(r > 0.0) {
        return Err(Error::invalid("require R > 0 and dist > 0"));
    }
    let l = (dist * (dist + 2.0 * r)).sqrt();
    Ok(ChordBound {
        lhs: (1.0 + 2.0 * r / dist).ln(),
        rhs: 2.0 * (1.0 + 2.0 * 3.0_f64.sqrt() * r / l).ln(),
        chord: l,
    })
}

/// Quadrature configuration for the static grazing integral.
#[derive(Debug, Clone)]
pub struct SingularIntegralConfig {
    /// Kernel constant in exp(-c |u-v|^2 / 2).
    pub c: f64,
    /// Constant materializing the indicator d(x) <= c_dom (2 R_b + <u>).
    pub c_dom: f64,
    pub phi_nodes: usize,
    pub w_nodes: usize,
    pub radial_nodes: usize,
}

impl Default for SingularIntegralConfig {
    fn default() -> Self {
        SingularIntegralConfig {
            c: 0.125,
            c_dom: 4.0,
            phi_nodes: 32,
            w_nodes: 16,
            radial_nodes: 16,
        }
    }
}

impl SingularIntegralConfig {
    /// Scale node counts from a total budget hint.
    pub fn with_budget(budget: usize) -> Self {
        let scale = (budget as f64 / 16_384.0).sqrt().max(0.5);
        let d = SingularIntegralConfig::default();
        SingularIntegralConfig {
            phi_nodes: ((d.phi_nodes as f64 * scale) as usize).max(8),
            w_nodes: ((d.w_nodes as f64 * scale) as usize).max(8),
            radial_nodes: ((d.radial_nodes as f64 * scale) as usize).max(8),
            ..d
        }
    }

    /// Doubled resolution in every direction, for stability checks.
    pub fn refined(&self) -> Self {
        SingularIntegralConfig {
            c: self.c,
            c_dom: self.c_dom,
            phi_nodes: self.phi_nodes * 2,
            w_nodes: self.w_nodes * 2,
            radial_nodes: self.radial_nodes * 2,
        }
    }
}

/// Static grazing integral over incoming directions that reach the obstacle:
/// the kernel pair exp(-c|u-v|^2/2)/|u-v| + |u-v| exp(-|u|^2/8) times
/// |u|^{-k}, divided by the transversal component |grad xi(x_b) . u_hat|,
/// restricted to hitting directions with the distance indicator on.
///
/// Evaluated in the spherical frame centered at x with the z-axis from the
/// closest boundary point toward x, using the w^2 substitution at the
/// per-azimuth grazing angle. Returns the report and the reference bound
/// C_k (<v> + <v>^{1-k}) (ln(1 + 1/d) + 1) with C_k = 1/(2-k) + 1.
pub fn static_singular_integral(
    obstacle: &ConvexObstacle,
    x: Vec3,
    v: Vec3,
    k: f64,
    config: &SingularIntegralConfig,
) -> Result<(QuadratureReport, f64)> {
    if k >= 2.0 {
        return Err(Error::invalid("require k < 2"));
    }
    let (d, closest) = obstacle.distance_to_boundary(x)?;
    if d <= 0.0 {
        return Err(Error::domain("static integral requires d(x) > 0"));
    }
    let ez = unit_or_zero(&(x - closest.position));
    let ex = orthogonal_unit(&ez);
    let ey = ez.cross(&ex);
    let rb = obstacle.bounding_radius();

    let ck = 1.0 / (2.0 - k) + 1.0;
    let bound =
        ck * (bracket(&v) + bracket(&v).powf(1.0 - k)) * ((1.0 + 1.0 / d).ln() + 1.0);

    let umax = v.norm() + 28.0;
    let w_rule = GaussRule::legendre(config.w_nodes);
    let r_rule = GaussRule::legendre(config.radial_nodes);

    let phi_results: Vec<(f64, f64, usize)> = (0..config.phi_nodes)
        .into_par_iter()
        .map(|ip| {
            let phi = 2.0 * std::f64::consts::PI * ip as f64 / config.phi_nodes as f64;
            let azim = phi.cos() * ex + phi.sin() * ey;
            let dir = |theta: f64| theta.sin() * azim + theta.cos() * ez;
            let hits = |theta: f64| {
                backward_exit(obstacle, x, dir(theta)).map(|i| i.is_hit()).unwrap_or(false)
            };
            if !hits(0.0) {
                return (0.0, 0.0, 0);
            }
            // Grazing angle for this azimuth by bisection.
            let mut hi = std::f64::consts::FRAC_PI_2 + 0.3;
            while hits(hi) {
                hi += 0.2;
                if hi >= std::f64::consts::PI - 1e-3 {
                    break;
                }
            }
            let mut lo = 0.0;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if hits(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let theta_g = lo;
            let mut nodes = 0usize;
            // theta = theta_g - w^2 over three panels in w.
            let w_max = theta_g.sqrt();
            let mut acc = 0.0;
            let mut err = 0.0;
            for (pl, pr) in [(0.0, 0.3), (0.3, 0.7), (0.7, 1.0)] {
                for (w, wt) in w_rule.mapped(pl * w_max, pr * w_max) {
                    let theta = theta_g - w * w;
                    let u_hat = dir(theta);
                    let Ok(info) = backward_exit(obstacle, x, u_hat) else { continue };
                    let Some(b) = info.hit() else { continue };
                    let graze = b.grad.dot(&u_hat).abs().max(1e-300);
                    let (radial, rerr, rn) =
                        radial_integral(&u_hat, &v, k, config, umax, d, rb, &r_rule);
                    nodes += rn + 1;
                    acc += wt * 2.0 * w * theta.sin() / graze * radial;
                    err += wt * 2.0 * w * theta.sin() / graze * rerr;
                }
            }
            (acc, err, nodes)
        })
        .collect();

    let dphi = 2.0 * std::f64::consts::PI / config.phi_nodes as f64;
    let mut report = QuadratureReport::zero();
    for (v_phi, e_phi, n_phi) in phi_results {
        report.value += dphi * v_phi;
        report.abs_error_est += dphi * e_phi;
        report.nodes += n_phi;
    }
    Ok((report, bound))
}

/// Radial integral of the kernel pair times r^{2-k} along one direction.
#[allow(clippy::too_many_arguments)]
fn radial_integral(
    u_hat: &Vec3,
    v: &Vec3,
    k: f64,
    config: &SingularIntegralConfig,
    umax: f64,
    d: f64,
    rb: f64,
    rule: &GaussRule,
) -> (f64, f64, usize) {
    let r_star = u_hat.dot(v);
    let rho2 = (v.norm_squared() - r_star * r_star).max(0.0);
    let c = config.c;
    let f = |r: f64| {
        let du = ((r - r_star) * (r - r_star) + rho2).sqrt();
        let k1 = (-0.5 * c * du * du).exp() / du.max(1e-300);
        let k2 = du * (-r * r / 8.0).exp();
        let indicator = d <= config.c_dom * (2.0 * rb + (1.0 + r * r).sqrt());
        if indicator {
            (k1 + k2) * r.powf(2.0 - k)
        } else {
            0.0
        }
    };
    // Panel breakpoints around the kernel peak.
    let mut brk = vec![0.0, umax];
    for b in [r_star - 2.0, r_star - 0.5, r_star, r_star + 0.5, r_star + 2.0] {
        if b > 1e-12 && b < umax {
            brk.push(b);
        }
    }
    brk.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut acc = 0.0;
    let mut err = 0.0;
    let mut nodes = 0usize;
    for win in brk.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        if hi - lo < 1e-14 {
            continue;
        }
        if lo == 0.0 {
            // r = q^2 removes the r^{1-k}-type endpoint behavior at 0.
            let g = |q: f64| 2.0 * q * f(q * q);
            for (q, wt) in rule.mapped(0.0, hi.sqrt()) {
                acc += wt * g(q);
                nodes += 1;
            }
        } else if rho2 < 0.0625 && (lo - r_star).abs() < 2.1 && (hi - r_star).abs() < 2.1 {
            // Close pass of the kernel point singularity: adaptive refinement.
            if let Ok(rep) = quad::adaptive(&f, lo, hi, 1e-12, 1e-7, 30) {
                acc += rep.value;
                err += rep.abs_error_est;
                nodes += rep.nodes;
            }
        } else {
            for (r, wt) in rule.mapped(lo, hi) {
                acc += wt * f(r);
                nodes += 1;
            }
        }
    }
    (acc, err, nodes)
}

/// Result of the dynamical (time) singular integral.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DynamicalIntegral {
    pub quad: QuadratureReport,
    pub bound_near: f64,
    /// Defined when d(x) >= eps holds.
    pub bound_far: Option<f64>,
}

/// Time integral of exp(-varpi <v>^2 (t-s)) ln(1 + 1/d(X(s))) along the
/// backward characteristic, refined around the bounce time where the
/// distance vanishes quadratically in s - t_1.
pub fn dynamical_singular_integral(
    obstacle: &ConvexObstacle,
    t: f64,
    x: Vec3,
    v: Vec3,
    varpi: f64,
    eps: f64,
) -> Result<DynamicalIntegral> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid("require 0 < t <= 1"));
    }
    if !(varpi > 1.0) {
        return Err(Error::invalid("require varpi > 1"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("require eps in (0, 1)"));
    }
    let info = backward_exit(obstacle, x, v)?;
    let br = bracket(&v);
    let decay = varpi * br * br;
    let integrand = |s: f64| {
        let p = crate::billiard::trajectory_from_bounce(&info, t, x, v, s);
        let dist = boundary_distance(obstacle, p.position);
        (-decay * (t - s)).exp() * (1.0 + 1.0 / dist.max(1e-300)).ln()
    };
    let mut panels: Vec<f64> = vec![0.0, t];
    if let Some(t1) = info.t1(t) {
        if t1 > 0.0 && t1 < t {
            panels.push(t1);
            // Graded sub-panels flanking the log singularity.
            for w in [1e-3, 1e-2, 1e-1] {
                let lo = t1 - w;
                let hi = t1 + w;
                if lo > 0.0 {
                    panels.push(lo);
                }
                if hi < t {
                    panels.push(hi);
                }
            }
        }
    }
    panels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    panels.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut quad_total = QuadratureReport::zero();
    for win in panels.windows(2) {
        let rep = quad::adaptive(&integrand, win[0], win[1], 1e-10, 1e-8, 40)?;
        quad_total.merge(&rep);
    }
    let speed = v.norm();
    let bound_near = if speed > 0.0 {
        ((1.0 + decay / speed).ln() + 1.0) / decay
    } else {
        f64::INFINITY
    };
    let (dx, _) = obstacle.distance_to_boundary(x)?;
    let bound_far = if dx >= eps {
        Some((1.0 + 1.0 / eps).ln() / (varpi.sqrt() * br))
    } else {
        None
    };
    Ok(DynamicalIntegral { quad: quad_total, bound_near, bound_far })
}

/// Distance to the boundary, tolerant of round-off that puts a trajectory
/// point a hair inside the body: first-order |xi| / |grad xi| there.
pub fn boundary_distance(obstacle: &ConvexObstacle, p: Vec3) -> f64 {
    match obstacle.distance_to_boundary(p) {
        Ok((d, _)) => d,
        Err(_) => {
            let (xi, grad, _) = obstacle.levelset_unchecked(p);
            xi.abs() / grad.norm().max(1e-300)
        }
    }
}
