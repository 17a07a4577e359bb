//! Shifted-coordinate machinery: the shifted position and velocity, the
//! straight/circular interpolation paths between them, the tangency
//! parameters where the backward ray grazes the obstacle, the specular
//! singularity along the path, and the averaged inverse singularities with
//! their indicator logic.

use crate::billiard::{backward_exit, Bounce};
use crate::error::{Error, Result};
use crate::geometry::ConvexObstacle;
use crate::quad::{self, QuadratureReport};
use crate::{unit_or_zero, Mat3, Vec3};

/// Default constant materializing "d(x) is at most of order <v>" indicators.
pub const C_DOM_DEFAULT: f64 = 4.0;

const PAR_TOL: f64 = 1e-12;
const QUAD_ABS_TOL: f64 = 1e-10;
const QUAD_REL_TOL: f64 = 1e-8;
const QUAD_MAX_DEPTH: usize = 40;

/// Straight shift path between the shifted position and the base position.
///
/// `x - xtilde` is orthogonal to `v`; `xtilde - xbar` is parallel to `v`.
/// The tangency parameters live on the extended line through the path and
/// may fall outside [0, 1].
#[derive(Debug, Clone)]
pub struct ShiftFrame {
    pub x: Vec3,
    pub xbar: Vec3,
    pub v: Vec3,
    pub xtilde: Vec3,
    pub degenerate: bool,
    pub tau_minus: Option<f64>,
    pub tau_plus: Option<f64>,
}

impl ShiftFrame {
    /// Path point, (1 - tau) xtilde + tau x.
    #[inline]
    pub fn path(&self, tau: f64) -> Vec3 {
        (1.0 - tau) * self.xtilde + tau * self.x
    }

    /// Constant path velocity x - xtilde.
    #[inline]
    pub fn direction(&self) -> Vec3 {
        self.x - self.xtilde
    }

    fn hits(&self, obstacle: &ConvexObstacle, tau: f64) -> bool {
        let p = self.path(tau);
        if obstacle.xi(p) >= 0.0 {
            return true;
        }
        backward_exit(obstacle, p, self.v).map(|i| i.is_hit()).unwrap_or(false)
    }

    pub(crate) fn exit(&self, obstacle: &ConvexObstacle, tau: f64) -> Option<Bounce> {
        backward_exit(obstacle, self.path(tau), self.v).ok().and_then(|i| i.hit().copied())
    }
}

/// Circular-arc shift path between the shifted and base velocities, with
/// `zeta` offset: the arc runs from vtilde + zeta to v + zeta at constant
/// speed |v + zeta|.
#[derive(Debug, Clone)]
pub struct VelocityShiftFrame {
    pub x: Vec3,
    pub v: Vec3,
    pub vbar: Vec3,
    pub zeta: Vec3,
    pub vtilde: Vec3,
    /// Angle between v + zeta and vbar + zeta.
    pub theta: f64,
    /// Orthonormal frame [a, a_perp, a x b] whose first two columns span the
    /// rotation plane; the arc is |v+zeta| (a cos(tau theta) + a_perp sin(tau theta)).
    pub rotation: Mat3,
    pub degenerate: bool,
    pub tau_minus: Option<f64>,
    pub tau_plus: Option<f64>,
}

impl VelocityShiftFrame {
    /// Arc point v(tau), with |v(tau)| = |v + zeta| for all tau.
    #[inline]
    pub fn arc(&self, tau: f64) -> Vec3 {
        if self.degenerate {
            return self.v + self.zeta;
        }
        let speed = (self.v + self.zeta).norm();
        let ang = tau * self.theta;
        speed * (self.rotation.column(0) * ang.cos() + self.rotation.column(1) * ang.sin())
    }

    /// Unit tangent of the arc at tau.
    #[inline]
    pub fn arc_tangent(&self, tau: f64) -> Vec3 {
        let ang = tau * self.theta;
        (self.rotation.column(1) * ang.cos() - self.rotation.column(0) * ang.sin()).into()
    }

    pub(crate) fn exit(&self, obstacle: &ConvexObstacle, tau: f64) -> Option<Bounce> {
        backward_exit(obstacle, self.x, self.arc(tau)).ok().and_then(|i| i.hit().copied())
    }
}

/// Averaged inverse specular singularity: the three interval contributions
/// with their indicator states and the aggregate quadrature report.
#[derive(Debug, Clone)]
pub struct SingularAverage {
    pub value: f64,
    pub pieces: [f64; 3],
    pub active_indicators: [bool; 3],
    pub quadrature: QuadratureReport,
}

impl SingularAverage {
    fn zero() -> Self {
        SingularAverage {
            value: 0.0,
            pieces: [0.0; 3],
            active_indicators: [false; 3],
            quadrature: QuadratureReport::zero(),
        }
    }
}

/// LHS/RHS comparison of the averaging lemma and its corollary for one frame.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AveragingBoundReport {
    /// Partial integral of the inverse singularity from the lower tangency
    /// to a sample parameter.
    pub lemma_lhs: f64,
    pub lemma_rhs: f64,
    pub lemma_ratio: f64,
    /// Full averaged inverse singularity and its endpoint bound.
    pub avg_value: f64,
    pub avg_bound: f64,
    pub avg_ratio: f64,
    pub c_dom: f64,
    pub distance_indicator: bool,
}

/// Construct the position shift frame.
///
/// The shifted position is xbar + ((x - xbar).v_hat) v_hat. When x - xbar is
/// parallel or anti-parallel to v (within 1e-12 relative) the construction
/// degenerates and the shifted position is x itself.
pub fn build_shift_frame(
    x: Vec3,
    xbar: Vec3,
    v: Vec3,
    obstacle: &ConvexObstacle,
) -> Result<ShiftFrame> {
    if !obstacle.in_domain(x) || !obstacle.in_domain(xbar) {
        return Err(Error::domain("shift frame endpoints must lie in the exterior domain"));
    }
    let diff = x - xbar;
    let m = diff.norm() * v.norm();
    let degenerate = m == 0.0 || {
        let c = diff.dot(&v);
        (m - c.abs()).abs() <= PAR_TOL * m
    };
    let xtilde = if degenerate {
        x
    } else {
        let vh = v / v.norm();
        xbar + diff.dot(&vh) * vh
    };
    let mut frame =
        ShiftFrame { x, xbar, v, xtilde, degenerate, tau_minus: None, tau_plus: None };

    // Path validity: xi is concave along the segment, so its maximum is
    // unimodal; locate it by golden section.
    if !degenerate {
        let f = |tau: f64| obstacle.xi(frame.path(tau));
        let (tau_max, xi_max) = golden_max(&f, 0.0, 1.0, 80);
        if xi_max > 0.0 {
            return Err(Error::PathInvalid { tau: tau_max });
        }
        let (lo, hi) = match line_scan_window(obstacle, frame.xtilde, frame.direction(), v) {
            Some(w) => w,
            None => return Ok(frame),
        };
        if let Some((tm, tp)) = locate_hit_interval(&|tau| frame.hits(obstacle, tau), lo, hi, 2048)
        {
            frame.tau_minus = Some(tm);
            frame.tau_plus = Some(tp);
        }
    }
    Ok(frame)
}

/// Construct the velocity shift frame.
///
/// vtilde + zeta has the direction of vbar + zeta and the length of
/// v + zeta. Degenerates (vtilde = v) when v + zeta and vbar + zeta are
/// parallel or anti-parallel within 1e-12 relative.
pub fn build_velocity_frame(
    x: Vec3,
    v: Vec3,
    vbar: Vec3,
    zeta: Vec3,
    obstacle: &ConvexObstacle,
) -> Result<VelocityShiftFrame> {
    let w = v + zeta;
    let wb = vbar + zeta;
    let (nw, nwb) = (w.norm(), wb.norm());
    if nw == 0.0 || nwb == 0.0 {
        return Err(Error::invalid("v + zeta and vbar + zeta must be nonzero"));
    }
    if !obstacle.in_domain(x) {
        return Err(Error::domain("base point must lie in the exterior domain"));
    }
    let cosang = (w.dot(&wb) / (nw * nwb)).clamp(-1.0, 1.0);
    let degenerate = (1.0 - cosang.abs()) <= PAR_TOL;
    if degenerate {
        return Ok(VelocityShiftFrame {
            x,
            v,
            vbar,
            zeta,
            vtilde: v,
            theta: 0.0,
            rotation: Mat3::identity(),
            degenerate: true,
            tau_minus: None,
            tau_plus: None,
        });
    }
    let a = wb / nwb;
    let b = w / nw;
    let theta = cosang.acos();
    let a_perp = unit_or_zero(&(b - cosang * a));
    let third = unit_or_zero(&a.cross(&b));
    let rotation = Mat3::from_columns(&[a, a_perp, third]);
    let vtilde = nw * a - zeta;
    let mut frame = VelocityShiftFrame {
        x,
        v,
        vbar,
        zeta,
        vtilde,
        theta,
        rotation,
        degenerate: false,
        tau_minus: None,
        tau_plus: None,
    };

    // Scan the full direction circle; the hit set is a single arc shorter
    // than half the circle. Anchor the located arc to the branch nearest
    // the [0, theta] sector of the frame.
    let n_scan = 2048;
    let circle = 2.0 * std::f64::consts::PI;
    let speed = nw;
    let rot = frame.rotation;
    let dir_hits = |ang: f64| -> bool {
        let u: Vec3 = (rot.column(0) * ang.cos() + rot.column(1) * ang.sin()).into();
        backward_exit(obstacle, x, speed * u).map(|i| i.is_hit()).unwrap_or(false)
    };
    let flags: Vec<bool> =
        (0..n_scan).map(|i| dir_hits(circle * i as f64 / n_scan as f64)).collect();
    let first_miss = flags.iter().position(|h| !h);
    let any_hit = flags.iter().any(|h| *h);
    if let (Some(start), true) = (first_miss, any_hit) {
        let base = circle * start as f64 / n_scan as f64;
        if let Some((am, ap)) = locate_hit_interval(&|d| dir_hits(base + d), 0.0, circle, n_scan) {
            let mut lo = base + am;
            let mut hi = base + ap;
            let target = 0.5 * theta;
            let k = ((target - 0.5 * (lo + hi)) / circle).round();
            lo += k * circle;
            hi += k * circle;
            frame.tau_minus = Some(lo / theta);
            frame.tau_plus = Some(hi / theta);
        }
    }
    Ok(frame)
}

/// Specular singularity of the position path at parameter tau:
/// (-grad xi(x_b) . v) / |path_dir_hat . grad xi(x_b)|.
pub fn specular_singularity_sp(
    frame: &ShiftFrame,
    tau: f64,
    obstacle: &ConvexObstacle,
) -> Result<f64> {
    let dir = frame.direction();
    let dn = dir.norm();
    if dn == 0.0 {
        return Err(Error::invalid("degenerate frame has a zero-length singular path"));
    }
    let Some(b) = frame.exit(obstacle, tau) else {
        return Err(Error::NoHit { tau });
    };
    let numer = -b.grazing;
    debug_assert!(numer >= -1e-12 * b.grad.norm() * frame.v.norm().max(1.0));
    let denom = (dir.dot(&b.grad) / dn).abs();
    if denom < 1e-14 {
        return Err(Error::DegenerateDirection { value: denom });
    }
    Ok(numer / denom)
}

/// Specular singularity of the velocity arc at parameter tau, with the
/// extra backward exit time in the denominator.
pub fn specular_singularity_vel(
    frame: &VelocityShiftFrame,
    tau: f64,
    obstacle: &ConvexObstacle,
) -> Result<f64> {
    if frame.degenerate {
        return Err(Error::invalid("degenerate frame has a zero-length singular arc"));
    }
    let Some(b) = frame.exit(obstacle, tau) else {
        return Err(Error::NoHit { tau });
    };
    let numer = -b.grazing;
    let tangent = frame.arc_tangent(tau);
    let denom = b.time * tangent.dot(&b.grad).abs();
    if denom < 1e-14 {
        return Err(Error::DegenerateDirection { value: denom });
    }
    Ok(numer / denom)
}

/// Averaged inverse specular singularity for the position path.
pub fn averaged_singularity_sp(
    frame: &ShiftFrame,
    t: f64,
    obstacle: &ConvexObstacle,
    nodes: usize,
) -> Result<SingularAverage> {
    if nodes < 16 {
        return Err(Error::invalid("at least 16 quadrature nodes required"));
    }
    if frame.degenerate {
        return Ok(SingularAverage::zero());
    }
    let inv = |tau: f64| match specular_singularity_sp(frame, tau, obstacle) {
        Ok(s) if s > 0.0 => 1.0 / s,
        _ => 0.0,
    };
    let tb = |tau: f64| frame.exit(obstacle, tau).map(|b| b.time);
    averaged_inverse(&inv, &tb, frame.tau_minus, frame.tau_plus, t, nodes)
}

/// Averaged inverse specular singularity for the velocity arc.
pub fn averaged_singularity_vel(
    frame: &VelocityShiftFrame,
    t: f64,
    obstacle: &ConvexObstacle,
    nodes: usize,
) -> Result<SingularAverage> {
    if nodes < 16 {
        return Err(Error::invalid("at least 16 quadrature nodes required"));
    }
    if frame.degenerate {
        return Ok(SingularAverage::zero());
    }
    let inv = |tau: f64| match specular_singularity_vel(frame, tau, obstacle) {
        Ok(s) if s > 0.0 => 1.0 / s,
        _ => 0.0,
    };
    let tb = |tau: f64| frame.exit(obstacle, tau).map(|b| b.time);
    averaged_inverse(&inv, &tb, frame.tau_minus, frame.tau_plus, t, nodes)
}

/// Compare the partial average of the inverse singularity against its
/// endpoint bound, and the full average against the corollary bound, for a
/// position frame.
pub fn averaging_bound_check_sp(
    frame: &ShiftFrame,
    t: f64,
    obstacle: &ConvexObstacle,
    c_dom: f64,
) -> Result<AveragingBoundReport> {
    let avg = averaged_singularity_sp(frame, t, obstacle, 64)?;
    let (mut lemma_lhs, mut lemma_rhs) = (0.0, 0.0);
    if let (Some(tm), Some(tp)) = (frame.tau_minus, frame.tau_plus) {
        // Sample parameter strictly inside the hit band.
        let tau_star = tm + 0.9 * (tp - tm);
        if let Some(b) = frame.exit(obstacle, tau_star) {
            let inv = |tau: f64| match specular_singularity_sp(frame, tau, obstacle) {
                Ok(s) if s > 0.0 => 1.0 / s,
                _ => 0.0,
            };
            let g = |u: f64| 2.0 * u * inv(tm + u * u);
            let report = quad::adaptive(
                &g,
                0.0,
                (tau_star - tm).max(0.0).sqrt(),
                QUAD_ABS_TOL,
                QUAD_REL_TOL,
                QUAD_MAX_DEPTH,
            )?;
            lemma_lhs = report.value;
            lemma_rhs = (tau_star - tm) / b.grazing.abs().max(1e-300);
        }
    }
    let bracket_v = (1.0 + frame.v.norm_squared()).sqrt();
    let (dist, _) = obstacle.distance_to_boundary(frame.x)?;
    let indicator = dist <= c_dom * bracket_v;
    let speed = frame.v.norm();
    let mut avg_bound = 0.0;
    if indicator && speed > 0.0 {
        let vh = frame.v / speed;
        let mut acc = 0.0;
        if let Ok(info) = backward_exit(obstacle, frame.x, frame.v) {
            if let Some(b) = info.hit() {
                acc += 1.0 / vh.dot(&b.grad).abs().max(1e-300);
            }
        }
        if let Ok(info) = backward_exit(obstacle, frame.xtilde, frame.v) {
            if let Some(b) = info.hit() {
                acc += 1.0 / vh.dot(&b.grad).abs().max(1e-300);
            }
        }
        avg_bound = acc / speed;
    }
    Ok(AveragingBoundReport {
        lemma_lhs,
        lemma_rhs,
        lemma_ratio: safe_ratio(lemma_lhs, lemma_rhs),
        avg_value: avg.value,
        avg_bound,
        avg_ratio: safe_ratio(avg.value, avg_bound),
        c_dom,
        distance_indicator: indicator,
    })
}

/// Velocity-frame version of the averaging bound comparison.
pub fn averaging_bound_check_vel(
    frame: &VelocityShiftFrame,
    t: f64,
    obstacle: &ConvexObstacle,
    c_dom: f64,
) -> Result<AveragingBoundReport> {
    let avg = averaged_singularity_vel(frame, t, obstacle, 64)?;
    let (mut lemma_lhs, mut lemma_rhs) = (0.0, 0.0);
    if let (Some(tm), Some(tp)) = (frame.tau_minus, frame.tau_plus) {
        let tau_star = tm + 0.9 * (tp - tm);
        if let Some(b) = frame.exit(obstacle, tau_star) {
            let inv = |tau: f64| match specular_singularity_vel(frame, tau, obstacle) {
                Ok(s) if s > 0.0 => 1.0 / s,
                _ => 0.0,
            };
            let g = |u: f64| 2.0 * u * inv(tm + u * u);
            let report = quad::adaptive(
                &g,
                0.0,
                (tau_star - tm).max(0.0).sqrt(),
                QUAD_ABS_TOL,
                QUAD_REL_TOL,
                QUAD_MAX_DEPTH,
            )?;
            lemma_lhs = report.value;
            let speed = (frame.v + frame.zeta).norm();
            // Smallest |v(tau)| t_b over the band, sampled coarsely.
            let mut min_vtb = f64::INFINITY;
            for k in 0..=64 {
                let tau = tm + (tp - tm) * k as f64 / 64.0;
                if let Some(bb) = frame.exit(obstacle, tau) {
                    min_vtb = min_vtb.min(speed * bb.time);
                }
            }
            if !min_vtb.is_finite() {
                min_vtb = 0.0;
            }
            lemma_rhs = (tau_star - tm) / b.grazing.abs().max(1e-300) / speed * (1.0 + min_vtb);
        }
    }
    let speed = (frame.v + frame.zeta).norm();
    let bracket_w = (1.0 + speed * speed).sqrt();
    let (dist, _) = obstacle.distance_to_boundary(frame.x)?;
    let indicator = dist <= c_dom * bracket_w;
    let mut avg_bound = 0.0;
    if indicator && speed > 0.0 {
        let radial = if dist <= c_dom { 1.0 / (speed * speed) } else { 1.0 / speed };
        let mut acc = 0.0;
        for w in [frame.v + frame.zeta, frame.vtilde + frame.zeta] {
            let wn = w.norm();
            if wn == 0.0 {
                continue;
            }
            if let Ok(info) = backward_exit(obstacle, frame.x, w) {
                if let Some(b) = info.hit() {
                    acc += 1.0 / (w / wn).dot(&b.grad).abs().max(1e-300);
                }
            }
        }
        avg_bound = radial * acc;
    }
    Ok(AveragingBoundReport {
        lemma_lhs,
        lemma_rhs,
        lemma_ratio: safe_ratio(lemma_lhs, lemma_rhs),
        avg_value: avg.value,
        avg_bound,
        avg_ratio: safe_ratio(avg.value, avg_bound),
        c_dom,
        distance_indicator: indicator,
    })
}

fn safe_ratio(lhs: f64, rhs: f64) -> f64 {
    if lhs == 0.0 {
        0.0
    } else if rhs == 0.0 {
        f64::INFINITY
    } else {
        lhs / rhs
    }
}

/// Shared evaluation of the three averaged-integral pieces over [0,1],
/// [tau_-, 1], and [0, tau_-].
fn averaged_inverse(
    inv_s: &dyn Fn(f64) -> f64,
    tb: &dyn Fn(f64) -> Option<f64>,
    tau_minus: Option<f64>,
    tau_plus: Option<f64>,
    t: f64,
    nodes: usize,
) -> Result<SingularAverage> {
    let mut out = SingularAverage::zero();
    let (Some(tm), Some(tp)) = (tau_minus, tau_plus) else {
        return Ok(out);
    };
    let tm_in_unit = (0.0..=1.0).contains(&tm);
    let mut intervals: [Option<(f64, f64)>; 3] = [Some((0.0, 1.0)), None, None];
    if tm_in_unit {
        intervals[1] = Some((tm, 1.0));
        intervals[2] = Some((0.0, tm));
    }
    for (slot, iv) in intervals.into_iter().enumerate() {
        let Some((a, b)) = iv else { continue };
        if b - a < 1e-14 {
            continue;
        }
        // Indicator 1: finite exit time on the whole sub-interval, i.e. the
        // sub-interval sits inside the (closed) hit band.
        let tol = 1e-9 * (tp - tm).max(1e-6);
        let finite_all = tm - tol <= a && b <= tp + tol;
        if !finite_all {
            continue;
        }
        // Indicator 2: the smallest exit time over the sub-interval is <= t.
        let min_tb = min_exit_time(tb, a.max(tm + 1e-12), b.min(tp - 1e-12));
        let active = min_tb.map(|m| m <= t).unwrap_or(false);
        if !active {
            continue;
        }
        out.active_indicators[slot] = true;
        let sing_left = (a - tm).abs() <= tol;
        let sing_right = (b - tp).abs() <= tol;
        let report = integrate_inverse(inv_s, a, b, sing_left, sing_right, nodes)?;
        out.pieces[slot] = report.value / (b - a);
        out.quadrature.merge(&report);
    }
    out.value = out.pieces.iter().sum();
    Ok(out)
}

/// Minimum of the exit time over [a, b]: 256-node scan plus golden-section
/// refinement around the best node.
fn min_exit_time(tb: &dyn Fn(f64) -> Option<f64>, a: f64, b: f64) -> Option<f64> {
    if !(b > a) {
        return None;
    }
    let n = 256;
    let mut best = (f64::INFINITY, a);
    for i in 0..=n {
        let tau = a + (b - a) * i as f64 / n as f64;
        if let Some(v) = tb(tau) {
            if v < best.0 {
                best = (v, tau);
            }
        }
    }
    if !best.0.is_finite() {
        return None;
    }
    let h = (b - a) / n as f64;
    let lo = (best.1 - h).max(a);
    let hi = (best.1 + h).min(b);
    let f = |tau: f64| tb(tau).unwrap_or(f64::INFINITY);
    let (_, refined) = golden_max(&|tau| -f(tau), lo, hi, 60);
    Some(best.0.min(-refined))
}

/// Integrate 1/S over [a, b] with the u^2 endpoint substitution wherever the
/// interval abuts a tangency (the integrand grows like an inverse square
/// root there).
fn integrate_inverse(
    inv_s: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    sing_left: bool,
    sing_right: bool,
    nodes: usize,
) -> Result<QuadratureReport> {
    let panels = (nodes / 16).max(1);
    let run = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| -> Result<QuadratureReport> {
        let mut total = QuadratureReport::zero();
        for i in 0..panels {
            let l = lo + (hi - lo) * i as f64 / panels as f64;
            let r = lo + (hi - lo) * (i + 1) as f64 / panels as f64;
            let rep = quad::adaptive(&|x| f(x), l, r, QUAD_ABS_TOL, QUAD_REL_TOL, QUAD_MAX_DEPTH)?;
            total.merge(&rep);
        }
        Ok(total)
    };
    match (sing_left, sing_right) {
        (true, true) => {
            let mid = 0.5 * (a + b);
            let from_left = |u: f64| 2.0 * u * inv_s(a + u * u);
            let from_right = |u: f64| 2.0 * u * inv_s(b - u * u);
            let mut rep = run(&from_left, 0.0, (mid - a).sqrt())?;
            rep.merge(&run(&from_right, 0.0, (b - mid).sqrt())?);
            Ok(rep)
        }
        (true, false) => {
            let g = |u: f64| 2.0 * u * inv_s(a + u * u);
            run(&g, 0.0, (b - a).sqrt())
        }
        (false, true) => {
            let g = |u: f64| 2.0 * u * inv_s(b - u * u);
            run(&g, 0.0, (b - a).sqrt())
        }
        (false, false) => run(&|tau| inv_s(tau), a, b),
    }
}

/// Golden-section maximum of a unimodal function; returns (argmax, max).
pub(crate) fn golden_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    (mid, f(mid))
}

/// Window of line parameters that can possibly produce a hit: where the
/// component of the path point orthogonal to `v` stays within the bounding
/// ball (with margin).
fn line_scan_window(
    obstacle: &ConvexObstacle,
    origin: Vec3,
    dir: Vec3,
    v: Vec3,
) -> Option<(f64, f64)> {
    let vh = unit_or_zero(&v);
    let perp = |p: Vec3| p - p.dot(&vh) * vh;
    let c0 = perp(origin);
    let c1 = perp(dir);
    let r = obstacle.bounding_radius() * 1.05 + 1e-9;
    let a = c1.norm_squared();
    if a == 0.0 {
        return None;
    }
    let bq = 2.0 * c0.dot(&c1);
    let cq = c0.norm_squared() - r * r;
    let disc = bq * bq - 4.0 * a * cq;
    if disc <= 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let lo = (-bq - sq) / (2.0 * a);
    let hi = (-bq + sq) / (2.0 * a);
    let w = hi - lo;
    Some((lo - 0.05 * w, hi + 0.05 * w))
}

/// Locate the hit interval of a boolean predicate on [lo, hi] whose true-set
/// is a single interval compactly inside the window. Transition points are
/// bisected to f64 exhaustion.
fn locate_hit_interval(
    hits: &dyn Fn(f64) -> bool,
    lo: f64,
    hi: f64,
    n_scan: usize,
) -> Option<(f64, f64)> {
    let node = |i: usize| lo + (hi - lo) * i as f64 / n_scan as f64;
    let flags: Vec<bool> = (0..=n_scan).map(|i| hits(node(i))).collect();
    let first = flags.iter().position(|h| *h)?;
    let last = flags.iter().rposition(|h| *h)?;
    let bisect = |mut miss: f64, mut hit: f64| -> f64 {
        for _ in 0..128 {
            let mid = 0.5 * (miss + hit);
            if mid == miss || mid == hit {
                break;
            }
            if hits(mid) {
                hit = mid;
            } else {
                miss = mid;
            }
        }
        hit
    };
    let tm = if first == 0 { lo } else { bisect(node(first - 1), node(first)) };
    let tp = if last == n_scan { hi } else { bisect(node(last + 1), node(last)) };
    Some((tm, tp))
}
