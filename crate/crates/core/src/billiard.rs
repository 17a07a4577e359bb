//! Backward exit time and position for the exterior billiard, specular
//! reflection, the one-bounce characteristic (X(s; t, x, v), V(s; t, x, v)),
//! and the exact derivatives of the exit data.

use crate::error::{Error, Result};
use crate::geometry::{ConvexObstacle, BOUNDARY_TOL};
use crate::{Mat3, Vec3};
use rayon::prelude::*;

/// Normalized quadratic discriminants below this classify the ray as a
/// tangential touch, which counts as no entry.
pub const TANGENT_DISC_TOL: f64 = 1e-14;

/// Relative floor on the grazing measure below which the closed-form exit
/// derivatives refuse to evaluate.
pub const GRAZING_FLOOR_REL: f64 = 1e-9;

/// Exit data of a backward ray that reaches the obstacle.
#[derive(Debug, Clone, Copy)]
pub struct Bounce {
    /// Backward exit time t_b > 0 (0 for a launch off the boundary itself).
    pub time: f64,
    /// Exit position on the boundary.
    pub point: Vec3,
    /// Unit normal grad xi / |grad xi| at the exit position.
    pub normal: Vec3,
    /// Level-set gradient at the exit position.
    pub grad: Vec3,
    /// Grazing measure v . grad xi(x_b); <= 0 for a backward hit.
    pub grazing: f64,
}

/// Backward exit data; `Miss` encodes t_b = infinity (and t_1 = -infinity)
/// as a tagged case, never as a float infinity in arithmetic.
#[derive(Debug, Clone, Copy)]
pub enum BounceInfo {
    Hit(Bounce),
    Miss,
}

impl BounceInfo {
    #[inline]
    pub fn is_hit(&self) -> bool {
        matches!(self, BounceInfo::Hit(_))
    }

    #[inline]
    pub fn hit(&self) -> Option<&Bounce> {
        match self {
            BounceInfo::Hit(b) => Some(b),
            BounceInfo::Miss => None,
        }
    }

    /// Exit time as an Option.
    #[inline]
    pub fn time(&self) -> Option<f64> {
        self.hit().map(|b| b.time)
    }

    /// Bounce time t_1 = t - t_b, None when the ray misses.
    #[inline]
    pub fn t1(&self, t: f64) -> Option<f64> {
        self.hit().map(|b| t - b.time)
    }
}

/// State of the backward characteristic at an intermediate time.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryPoint {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Whether `s` lies on the pre-bounce side (s <= t_1).
    pub bounced: bool,
}

/// The five derivative blocks of the exit data.
#[derive(Debug, Clone)]
pub struct ExitDerivatives {
    pub grad_x_tb: Vec3,
    pub grad_v_tb: Vec3,
    pub grad_x_xb: Mat3,
    pub grad_v_xb: Mat3,
    /// Derivative of x -> n(x_b(x, v)).
    pub grad_x_n: Mat3,
}

/// Smallest s > 0 with xi(x - s v) = 0, or `Miss` when the backward ray
/// never reaches the obstacle.
pub fn backward_exit(obstacle: &ConvexObstacle, x: Vec3, v: Vec3) -> Result<BounceInfo> {
    let speed2 = v.norm_squared();
    if speed2 == 0.0 || !speed2.is_finite() {
        return Err(Error::invalid("velocity must be nonzero and finite"));
    }
    let (xi, grad_x, _) = obstacle.levelset(x)?;
    if xi > BOUNDARY_TOL {
        return Err(Error::domain(format!("launch point inside obstacle: xi = {xi}")));
    }
    if xi.abs() <= BOUNDARY_TOL {
        // Launch exactly on the boundary: a backward-entering ray bounces
        // immediately; otherwise it never returns (convexity).
        let g = v.dot(&grad_x);
        if g < 0.0 {
            return Ok(BounceInfo::Hit(make_bounce(obstacle, 0.0, x, v)));
        }
        return Ok(BounceInfo::Miss);
    }
    match obstacle {
        ConvexObstacle::Sphere { center, radius } => {
            let rel = x - center;
            quadric_exit(obstacle, x, v, rel.dot(&v), speed2, rel.norm_squared() - radius * radius)
        }
        ConvexObstacle::Ellipsoid { center, semi_axes } => {
            let rel = x - center;
            let inv2 = Vec3::new(
                1.0 / (semi_axes.x * semi_axes.x),
                1.0 / (semi_axes.y * semi_axes.y),
                1.0 / (semi_axes.z * semi_axes.z),
            );
            let a = v.x * v.x * inv2.x + v.y * v.y * inv2.y + v.z * v.z * inv2.z;
            let d = rel.x * v.x * inv2.x + rel.y * v.y * inv2.y + rel.z * v.z * inv2.z;
            let e = rel.x * rel.x * inv2.x + rel.y * rel.y * inv2.y + rel.z * rel.z * inv2.z;
            quadric_exit(obstacle, x, v, d, a, e - 1.0)
        }
        ConvexObstacle::Custom(_) => march_exit(obstacle, x, v),
    }
}

/// Entry root of s^2 * a - 2 s * d + c0 = 0 (c0 > 0 outside the body).
fn quadric_exit(
    obstacle: &ConvexObstacle,
    x: Vec3,
    v: Vec3,
    d: f64,
    a: f64,
    c0: f64,
) -> Result<BounceInfo> {
    // Normalized discriminant (d/a)^2 - c0/a, in squared-length units.
    let dn = d / a;
    let disc = dn * dn - c0 / a;
    if disc < TANGENT_DISC_TOL || d <= 0.0 {
        return Ok(BounceInfo::Miss);
    }
    let time = dn - disc.sqrt();
    if time <= 0.0 {
        return Ok(BounceInfo::Miss);
    }
    let point = x - time * v;
    Ok(BounceInfo::Hit(make_bounce(obstacle, time, point, v)))
}

/// Coarse marching with a chord bound, then safeguarded Newton–bisection.
fn march_exit(obstacle: &ConvexObstacle, x: Vec3, v: Vec3) -> Result<BounceInfo> {
    let rb = obstacle.bounding_radius();
    let speed = v.norm();
    // Range of s where |x - s v| <= rb + margin; outside it no hit is possible.
    let margin = 1e-9 * (1.0 + rb);
    let reach = rb + margin;
    let b = x.dot(&v);
    let disc = b * b - speed * speed * (x.norm_squared() - reach * reach);
    if disc <= 0.0 {
        return Ok(BounceInfo::Miss);
    }
    let sq = disc.sqrt();
    let s_lo = ((b - sq) / (speed * speed)).max(0.0);
    let s_hi = (b + sq) / (speed * speed);
    if s_hi <= 0.0 {
        return Ok(BounceInfo::Miss);
    }
    let step = rb / 64.0 / speed;
    let mut s_prev = s_lo;
    let mut xi_prev = obstacle.xi(x - s_prev * v);
    if xi_prev >= 0.0 {
        // Numerically on the boundary at the window edge; treat as tangent.
        return Ok(BounceInfo::Miss);
    }
    let mut s = s_lo;
    let mut found: Option<(f64, f64)> = None;
    while s < s_hi {
        s = (s + step).min(s_hi);
        let xi = obstacle.xi(x - s * v);
        if xi >= 0.0 {
            found = Some((s_prev, s));
            break;
        }
        s_prev = s;
        xi_prev = xi;
    }
    let _ = xi_prev;
    let Some((mut lo, mut hi)) = found else {
        return Ok(BounceInfo::Miss);
    };
    // Safeguarded Newton on g(s) = xi(x - s v) inside the bracket [lo, hi].
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let p = x - s * v;
        let (xi, grad, _) = obstacle.levelset_unchecked(p);
        let tol = 1e-12 * (1.0 + grad.norm() * speed);
        if xi.abs() <= tol {
            return Ok(BounceInfo::Hit(make_bounce(obstacle, s, p, v)));
        }
        if xi < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let slope = -v.dot(&grad);
        let newton = if slope != 0.0 { s - xi / slope } else { f64::NAN };
        s = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < f64::EPSILON * (1.0 + hi.abs()) {
            break;
        }
    }
    let p = x - s * v;
    Ok(BounceInfo::Hit(make_bounce(obstacle, s, p, v)))
}

fn make_bounce(obstacle: &ConvexObstacle, time: f64, point: Vec3, v: Vec3) -> Bounce {
    let (_, grad, _) = obstacle.levelset_unchecked(point);
    let gn = grad.norm();
    Bounce { time, point, normal: grad / gn, grad, grazing: v.dot(&grad) }
}

/// Specular reflection (I - 2 n n^T) v across a unit normal.
pub fn specular_reflect(v: Vec3, n: Vec3) -> Result<Vec3> {
    if (n.norm() - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("normal must be unit length, |n| = {}", n.norm())));
    }
    Ok(v - 2.0 * v.dot(&n) * n)
}

/// Backward characteristic at time s in [0, t]: straight motion after the
/// bounce time t_1 = t - t_b, reflected ray before it, straight everywhere
/// when the ray misses.
pub fn trajectory_eval(
    obstacle: &ConvexObstacle,
    t: f64,
    x: Vec3,
    v: Vec3,
    s: f64,
) -> Result<TrajectoryPoint> {
    if !(0.0..=t).contains(&s) {
        return Err(Error::invalid(format!("s = {s} outside [0, {t}]")));
    }
    let info = backward_exit(obstacle, x, v)?;
    Ok(trajectory_from_bounce(&info, t, x, v, s))
}

/// Same as [`trajectory_eval`] with a precomputed backward exit.
pub fn trajectory_from_bounce(
    info: &BounceInfo,
    t: f64,
    x: Vec3,
    v: Vec3,
    s: f64,
) -> TrajectoryPoint {
    match info {
        BounceInfo::Miss => {
            TrajectoryPoint { position: x - (t - s) * v, velocity: v, bounced: false }
        }
        BounceInfo::Hit(b) => {
            let t1 = t - b.time;
            if s > t1 {
                TrajectoryPoint { position: x - (t - s) * v, velocity: v, bounced: false }
            } else {
                let rv = v - 2.0 * v.dot(&b.normal) * b.normal;
                TrajectoryPoint { position: b.point - (t1 - s) * rv, velocity: rv, bounced: true }
            }
        }
    }
}

/// Trace a batch of phase points in parallel; results in input order.
pub fn trace_batch(
    obstacle: &ConvexObstacle,
    t: f64,
    points: &[(Vec3, Vec3)],
    s: f64,
) -> Result<Vec<TrajectoryPoint>> {
    points
        .par_iter()
        .map(|&(x, v)| trajectory_eval(obstacle, t, x, v, s))
        .collect()
}

/// Closed-form derivatives of the exit data with respect to x and v.
pub fn exit_time_derivatives(
    obstacle: &ConvexObstacle,
    x: Vec3,
    v: Vec3,
) -> Result<ExitDerivatives> {
    let info = backward_exit(obstacle, x, v)?;
    let Some(b) = info.hit() else {
        return Err(Error::domain("backward ray misses the obstacle"));
    };
    exit_derivatives_from_bounce(obstacle, b, v)
}

/// Derivative blocks from precomputed bounce data. Refuses near-grazing
/// states, where the formulas blow up like 1 / |grad xi . v_hat|.
pub fn exit_derivatives_from_bounce(
    obstacle: &ConvexObstacle,
    b: &Bounce,
    v: Vec3,
) -> Result<ExitDerivatives> {
    let floor = GRAZING_FLOOR_REL * b.grad.norm() * v.norm();
    if b.grazing.abs() < floor {
        return Err(Error::NearGrazing { grazing: b.grazing, floor });
    }
    let (_, grad, hess) = obstacle.levelset_unchecked(b.point);
    let gv = grad.dot(&v);
    let grad_x_tb = grad / gv;
    let grad_v_tb = -b.time * grad_x_tb;
    let grad_x_xb = Mat3::identity() - (v * grad.transpose()) / gv;
    let grad_v_xb = -b.time * grad_x_xb;
    let n = b.normal;
    let proj = Mat3::identity() - n * n.transpose();
    let grad_x_n = (proj * hess / grad.norm()) * grad_x_xb;
    Ok(ExitDerivatives { grad_x_tb, grad_v_tb, grad_x_xb, grad_v_xb, grad_x_n })
}

/// Construct a near-grazing launch: a velocity whose backward ray barely
/// hits the obstacle, located by bisecting the hit/miss cone between the
/// axis toward the obstacle and a perpendicular direction.
///
/// Returns the hit-side velocity direction and its bounce data. The grazing
/// measure at the returned direction is as small as f64 bisection allows
/// (about 1e-8 in scaled units; the measure varies like the square root of
/// the cone angle, so machine epsilon in the angle floors it there).
pub fn grazing_direction(
    obstacle: &ConvexObstacle,
    x: Vec3,
    perp: Vec3,
) -> Result<(Vec3, Bounce)> {
    let axis = obstacle.interior_point() - x;
    let an = axis.norm();
    if an == 0.0 {
        return Err(Error::invalid("launch point coincides with the interior point"));
    }
    let a = axis / an;
    let mut w = perp - perp.dot(&a) * a;
    let wn = w.norm();
    if wn < 1e-12 {
        return Err(Error::invalid("perpendicular hint parallel to the axis"));
    }
    w /= wn;
    // Backward ray direction d(theta) = cos(theta) a + sin(theta) w; the
    // launch velocity is v = -d.
    let dir = |theta: f64| -> Vec3 { theta.cos() * a + theta.sin() * w };
    let hits = |theta: f64| -> bool {
        backward_exit(obstacle, x, -dir(theta)).map(|i| i.is_hit()).unwrap_or(false)
    };
    if !hits(0.0) {
        return Err(Error::domain("axis direction does not hit the obstacle"));
    }
    let mut lo = 0.0_f64;
    let mut hi = std::f64::consts::FRAC_PI_2;
    while hits(hi) {
        hi += 0.3;
        if hi > std::f64::consts::PI {
            return Err(Error::domain("could not bracket the grazing cone"));
        }
    }
    for _ in 0..128 {
        let mid = 0.5 * (lo + hi);
        if hits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let v = -dir(lo);
    let info = backward_exit(obstacle, x, v)?;
    let b = info.hit().ok_or_else(|| Error::domain("grazing bisection lost the hit"))?;
    Ok((v, *b))
}
