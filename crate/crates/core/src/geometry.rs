//! Level-set description of the uniformly convex obstacle and derived
//! geometric quantities: normals, distance to the boundary, the uniform
//! convexity constant, and planar slices of the boundary.
//!
//! Sign convention: `xi > 0` strictly inside the obstacle, `xi = 0` on its
//! boundary, `xi < 0` in the exterior domain.

use crate::error::{Error, Result};
use crate::rng;
use crate::{Mat3, Vec3};

use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Points with |xi| below this are treated as lying on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-10;

/// Level-set callbacks for a user-supplied obstacle. Analytic gradient and
/// Hessian are required; finite differencing is test-only.
#[derive(Clone)]
pub struct CustomLevelSet {
    pub eval: Arc<dyn Fn(Vec3) -> (f64, Vec3, Mat3) + Send + Sync>,
    pub bounding_radius: f64,
    pub theta_omega: f64,
    pub interior_point: Vec3,
}

impl std::fmt::Debug for CustomLevelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomLevelSet")
            .field("bounding_radius", &self.bounding_radius)
            .field("theta_omega", &self.theta_omega)
            .field("interior_point", &self.interior_point)
            .finish()
    }
}

/// A uniformly convex obstacle, described by its level set.
#[derive(Debug, Clone)]
pub enum ConvexObstacle {
    /// xi = r^2 - |x - c|^2 (quadratic, exact Hessian -2 I).
    Sphere { center: Vec3, radius: f64 },
    /// xi = 1 - sum_i (x_i - c_i)^2 / a_i^2.
    Ellipsoid { center: Vec3, semi_axes: Vec3 },
    Custom(CustomLevelSet),
}

/// A point of the obstacle boundary with its unit normal.
///
/// The normal follows the level-set convention n = grad xi / |grad xi| and
/// therefore points *into* the obstacle.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryPoint {
    pub position: Vec3,
    pub normal: Vec3,
    pub grad_norm: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum ObstacleJson {
    Sphere { center: [f64; 3], radius: f64 },
    Ellipsoid { center: [f64; 3], semi_axes: [f64; 3] },
}

impl ConvexObstacle {
    pub fn unit_sphere() -> Self {
        ConvexObstacle::Sphere { center: Vec3::zeros(), radius: 1.0 }
    }

    /// Parse an obstacle description from JSON. Custom obstacles are
    /// registered programmatically only.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ObstacleJson =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("obstacle JSON: {e}")))?;
        let obstacle = match spec {
            ObstacleJson::Sphere { center, radius } => {
                if radius <= 0.0 {
                    return Err(Error::Config("sphere radius must be positive".into()));
                }
                ConvexObstacle::Sphere { center: Vec3::from(center), radius }
            }
            ObstacleJson::Ellipsoid { center, semi_axes } => {
                if semi_axes.iter().any(|a| *a <= 0.0) {
                    return Err(Error::Config("ellipsoid semi-axes must be positive".into()));
                }
                ConvexObstacle::Ellipsoid {
                    center: Vec3::from(center),
                    semi_axes: Vec3::from(semi_axes),
                }
            }
        };
        Ok(obstacle)
    }

    pub fn to_json(&self) -> Result<String> {
        let spec = match self {
            ConvexObstacle::Sphere { center, radius } => {
                ObstacleJson::Sphere { center: [center.x, center.y, center.z], radius: *radius }
            }
            ConvexObstacle::Ellipsoid { center, semi_axes } => ObstacleJson::Ellipsoid {
                center: [center.x, center.y, center.z],
                semi_axes: [semi_axes.x, semi_axes.y, semi_axes.z],
            },
            ConvexObstacle::Custom(_) => {
                return Err(Error::Config("custom obstacles have no JSON form".into()))
            }
        };
        serde_json::to_string(&spec).map_err(|e| Error::Config(e.to_string()))
    }

    /// Smallest R with the obstacle contained in the origin-centered ball of
    /// radius R.
    pub fn bounding_radius(&self) -> f64 {
        match self {
            ConvexObstacle::Sphere { center, radius } => center.norm() + radius,
            ConvexObstacle::Ellipsoid { center, semi_axes } => {
                center.norm() + semi_axes.max()
            }
            ConvexObstacle::Custom(c) => c.bounding_radius,
        }
    }

    /// Declared uniform convexity constant theta.
    pub fn theta_omega(&self) -> f64 {
        match self {
            ConvexObstacle::Sphere { .. } => 2.0,
            ConvexObstacle::Ellipsoid { semi_axes, .. } => {
                let a = semi_axes.max();
                2.0 / (a * a)
            }
            ConvexObstacle::Custom(c) => c.theta_omega,
        }
    }

    /// A point strictly inside the obstacle.
    pub fn interior_point(&self) -> Vec3 {
        match self {
            ConvexObstacle::Sphere { center, .. } => *center,
            ConvexObstacle::Ellipsoid { center, .. } => *center,
            ConvexObstacle::Custom(c) => c.interior_point,
        }
    }

    /// Level set, gradient, Hessian at `x`.
    pub fn levelset(&self, x: Vec3) -> Result<(f64, Vec3, Mat3)> {
        if !(x.x.is_finite() && x.y.is_finite() && x.z.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        Ok(self.levelset_unchecked(x))
    }

    #[inline]
    pub(crate) fn levelset_unchecked(&self, x: Vec3) -> (f64, Vec3, Mat3) {
        match self {
            ConvexObstacle::Sphere { center, radius } => {
                let d = x - center;
                let xi = radius * radius - d.norm_squared();
                let grad = -2.0 * d;
                let hess = Mat3::from_diagonal_element(-2.0);
                (xi, grad, hess)
            }
            ConvexObstacle::Ellipsoid { center, semi_axes } => {
                let d = x - center;
                let inv2 = Vec3::new(
                    1.0 / (semi_axes.x * semi_axes.x),
                    1.0 / (semi_axes.y * semi_axes.y),
                    1.0 / (semi_axes.z * semi_axes.z),
                );
                let xi = 1.0 - d.x * d.x * inv2.x - d.y * d.y * inv2.y - d.z * d.z * inv2.z;
                let grad = Vec3::new(-2.0 * d.x * inv2.x, -2.0 * d.y * inv2.y, -2.0 * d.z * inv2.z);
                let hess = Mat3::from_diagonal(&Vec3::new(
                    -2.0 * inv2.x,
                    -2.0 * inv2.y,
                    -2.0 * inv2.z,
                ));
                (xi, grad, hess)
            }
            ConvexObstacle::Custom(c) => (c.eval)(x),
        }
    }

    /// Level set value only.
    #[inline]
    pub fn xi(&self, x: Vec3) -> f64 {
        self.levelset_unchecked(x).0
    }

    /// True when `x` lies in the closed exterior domain.
    #[inline]
    pub fn in_domain(&self, x: Vec3) -> bool {
        self.xi(x) <= BOUNDARY_TOL
    }

    /// Boundary data (unit normal, gradient norm) at a point with |xi| small.
    pub fn boundary_point(&self, x: Vec3) -> Result<BoundaryPoint> {
        let (xi, grad, _) = self.levelset(x)?;
        if xi.abs() > 1e-6 {
            return Err(Error::domain(format!("point not on boundary: xi = {xi}")));
        }
        let grad_norm = grad.norm();
        if grad_norm == 0.0 {
            return Err(Error::domain("vanishing level-set gradient on boundary"));
        }
        Ok(BoundaryPoint { position: x, normal: grad / grad_norm, grad_norm })
    }

    /// Distance from an exterior point to the boundary and the closest
    /// boundary point. Closed form for the sphere, Newton on the projection
    /// system (with a segment-bisection start) otherwise.
    pub fn distance_to_boundary(&self, x: Vec3) -> Result<(f64, BoundaryPoint)> {
        let (xi, _, _) = self.levelset(x)?;
        if xi > BOUNDARY_TOL {
            return Err(Error::domain(format!("point inside obstacle: xi = {xi}")));
        }
        if xi.abs() <= BOUNDARY_TOL {
            return Ok((0.0, self.boundary_point(x)?));
        }
        if let ConvexObstacle::Sphere { center, radius } = self {
            let d = x - center;
            let n = d.norm();
            let closest = center + d * (radius / n);
            return Ok((n - radius, self.boundary_point(closest)?));
        }
        self.project_to_boundary(x)
    }

    /// Newton iteration on the first-order conditions of
    /// min |x - y| subject to xi(y) = 0, started from the boundary crossing
    /// of the segment x -> interior point.
    fn project_to_boundary(&self, x: Vec3) -> Result<(f64, BoundaryPoint)> {
        let inner = self.interior_point();
        let y0 = self.bisect_segment(x, inner)?;
        let (_, g0, _) = self.levelset_unchecked(y0);
        // x - y = mu * (-grad xi) with mu > 0 at the optimum.
        let mut y = y0;
        let mut mu = (x - y0).norm() / g0.norm().max(1e-300);
        let scale = 1.0 + x.norm();
        let mut residual = f64::INFINITY;
        for _ in 0..200 {
            let (xi, g, h) = self.levelset_unchecked(y);
            let r_vec = y - x - mu * g;
            residual = r_vec.norm() + xi.abs();
            if residual <= 1e-12 * scale {
                break;
            }
            // Linearize [y - x - mu g; xi] = 0 in (y, mu).
            let a = Mat3::identity() - h * mu;
            let mut m = nalgebra::Matrix4::<f64>::zeros();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-g));
            m.fixed_view_mut::<1, 3>(3, 0).copy_from(&g.transpose());
            let rhs = nalgebra::Vector4::new(-r_vec.x, -r_vec.y, -r_vec.z, -xi);
            let step = m.lu().solve(&rhs).ok_or_else(|| {
                Error::domain("singular projection system in distance computation")
            })?;
            let mut damp = 1.0;
            loop {
                let y_new = y + damp * Vec3::new(step.x, step.y, step.z);
                let mu_new = mu + damp * step.w;
                let (xi_n, g_n, _) = self.levelset_unchecked(y_new);
                let r_new = (y_new - x - mu_new * g_n).norm() + xi_n.abs();
                if r_new < residual || damp < 1e-4 {
                    y = y_new;
                    mu = mu_new;
                    break;
                }
                damp *= 0.5;
            }
        }
        if residual > 1e-8 * scale {
            return Err(Error::domain(format!(
                "boundary projection did not converge (residual {residual})"
            )));
        }
        Ok(((x - y).norm(), self.boundary_point(y)?))
    }

    /// Boundary crossing of the segment from `outside` (xi < 0) to `inside`
    /// (xi > 0), by bisection.
    pub(crate) fn bisect_segment(&self, outside: Vec3, inside: Vec3) -> Result<Vec3> {
        let xo = self.xi(outside);
        let xi_in = self.xi(inside);
        if xo >= 0.0 || xi_in <= 0.0 {
            return Err(Error::domain("segment endpoints do not straddle the boundary"));
        }
        let mut lo = 0.0_f64; // outside
        let mut hi = 1.0_f64; // inside
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let p = outside + (inside - outside) * mid;
            let v = self.xi(p);
            if v.abs() <= BOUNDARY_TOL {
                return Ok(p);
            }
            if v < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-16 {
                break;
            }
        }
        Ok(outside + (inside - outside) * (0.5 * (lo + hi)))
    }

    /// Sample boundary points and random directions; returns the smallest
    /// observed value of zeta . (-hess) zeta over unit zeta.
    pub fn verify_uniform_convexity(&self, n_samples: usize, seed: u64) -> Result<f64> {
        if n_samples == 0 {
            return Err(Error::invalid("n_samples must be >= 1"));
        }
        let mut rng = rng::substream(seed, 0);
        let inner = self.interior_point();
        let mut theta_est = f64::INFINITY;
        for _ in 0..n_samples {
            let dir = rng::unit_vector(&mut rng);
            let far = inner + dir * (2.0 * self.bounding_radius() + 1.0);
            if self.xi(far) >= 0.0 {
                continue;
            }
            let b = self.bisect_segment(far, inner)?;
            let (_, _, hess) = self.levelset_unchecked(b);
            let zeta = rng::unit_vector(&mut rng);
            let value = -(zeta.dot(&(hess * zeta)));
            if value < 0.0 {
                return Err(Error::ConvexityViolation { x: b, zeta, value });
            }
            theta_est = theta_est.min(value);
        }
        Ok(theta_est)
    }

    /// Intersect the boundary with the plane through `base` spanned by
    /// `span1`, `span2`. Default angular resolution; see
    /// [`ConvexObstacle::planar_slice_with_samples`].
    pub fn planar_slice(&self, base: Vec3, span1: Vec3, span2: Vec3) -> Result<PlanarSlice> {
        self.planar_slice_with_samples(base, span1, span2, 512)
    }

    pub fn planar_slice_with_samples(
        &self,
        base: Vec3,
        span1: Vec3,
        span2: Vec3,
        samples: usize,
    ) -> Result<PlanarSlice> {
        let e1 = span1 / span1.norm();
        let mut e2 = span2 - span2.dot(&e1) * e1;
        let n2 = e2.norm();
        if !n2.is_finite() || n2 < 1e-12 * span2.norm().max(1.0) {
            return Err(Error::invalid("span vectors are linearly dependent"));
        }
        e2 /= n2;
        let plane_normal = e1.cross(&e2);

        // The slice of the obstacle lives inside the projection of its
        // bounding ball onto the plane.
        let rb = self.bounding_radius();
        let a0 = -base.dot(&e1);
        let b0 = -base.dot(&e2);
        let center_dist2 = (base + a0 * e1 + b0 * e2).norm_squared();
        if center_dist2 > rb * rb {
            return Ok(PlanarSlice::Empty);
        }
        let disk_r = (rb * rb - center_dist2).sqrt();

        // Scan for an interior point of the 2D section.
        let grid = 96;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for i in 0..grid {
            for j in 0..grid {
                let a = a0 + disk_r * (2.0 * (i as f64 + 0.5) / grid as f64 - 1.0);
                let b = b0 + disk_r * (2.0 * (j as f64 + 0.5) / grid as f64 - 1.0);
                let v = self.xi(base + a * e1 + b * e2);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        if best.0 <= 0.0 {
            return Ok(PlanarSlice::Empty);
        }
        let c2d = Vec3::new(best.1, best.2, 0.0);
        let plane_point = |a: f64, b: f64| base + a * e1 + b * e2;

        let mut points = Vec::with_capacity(samples);
        let mut curvature = Vec::with_capacity(samples);
        let mut n_par = Vec::with_capacity(samples);
        for k in 0..samples {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / samples as f64;
            let (ca, sa) = (phi.cos(), phi.sin());
            // Radial bisection out of the interior point.
            let mut lo = 0.0_f64;
            let mut hi = 2.0 * disk_r + 1.0;
            debug_assert!(self.xi(plane_point(c2d.x + hi * ca, c2d.y + hi * sa)) < 0.0);
            for _ in 0..128 {
                let mid = 0.5 * (lo + hi);
                let v = self.xi(plane_point(c2d.x + mid * ca, c2d.y + mid * sa));
                if v > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let r = 0.5 * (lo + hi);
            let p = plane_point(c2d.x + r * ca, c2d.y + r * sa);
            let (_, grad, hess) = self.levelset_unchecked(p);

            // Curvature of the implicit planar curve g(a,b) = xi(base + a e1 + b e2).
            let ga = grad.dot(&e1);
            let gb = grad.dot(&e2);
            let gaa = e1.dot(&(hess * e1));
            let gab = e1.dot(&(hess * e2));
            let gbb = e2.dot(&(hess * e2));
            let denom = (ga * ga + gb * gb).powf(1.5);
            let k2d = (gaa * gb * gb - 2.0 * gab * ga * gb + gbb * ga * ga).abs() / denom;

            let n = grad / grad.norm();
            let proj = n - n.dot(&plane_normal) * plane_normal;
            points.push(p);
            curvature.push(k2d);
            n_par.push(proj.norm());
        }

        let min_n = n_par.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_n = n_par.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(PlanarSlice::Curve(PlanarCurve {
            points,
            curvature,
            n_par,
            min_n_par: min_n,
            max_n_par: max_n,
        }))
    }
}

/// Result of slicing the obstacle with a plane. An empty or single-point
/// intersection is a valid outcome, not an error.
#[derive(Debug, Clone)]
pub enum PlanarSlice {
    Curve(PlanarCurve),
    Empty,
}

/// Closed convex section curve with per-point curvature and projected normal.
#[derive(Debug, Clone)]
pub struct PlanarCurve {
    pub points: Vec<Vec3>,
    pub curvature: Vec<f64>,
    /// |n_par| where n_par = (I - q q^T) n is the in-plane part of the normal.
    pub n_par: Vec<f64>,
    pub min_n_par: f64,
    pub max_n_par: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn custom_ellipsoid() -> ConvexObstacle {
        // Same shape as Ellipsoid { semi_axes: (1,2,3) } but through callbacks.
        ConvexObstacle::Custom(CustomLevelSet {
            eval: Arc::new(move |x: Vec3| {
                let inv2 = Vec3::new(1.0, 1.0 / 4.0, 1.0 / 9.0);
                let xi = 1.0 - x.x * x.x * inv2.x - x.y * x.y * inv2.y - x.z * x.z * inv2.z;
                let grad =
                    Vec3::new(-2.0 * x.x * inv2.x, -2.0 * x.y * inv2.y, -2.0 * x.z * inv2.z);
                let hess = Mat3::from_diagonal(&(-2.0 * inv2));
                (xi, grad, hess)
            }),
            bounding_radius: 3.0,
            theta_omega: 2.0 / 9.0,
            interior_point: Vec3::zeros(),
        })
    }

    #[test]
    fn levelset_unit_sphere_values() {
        let s = ConvexObstacle::unit_sphere();
        let (xi, grad, hess) = s.levelset(Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(xi, -3.0);
        assert_relative_eq!(grad.x, -4.0);
        assert_relative_eq!(hess[(0, 0)], -2.0);
        assert_relative_eq!(hess[(1, 1)], -2.0);
        // Boundary point.
        assert!(s.xi(Vec3::new(1.0, 0.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn levelset_rejects_non_finite() {
        let s = ConvexObstacle::unit_sphere();
        assert!(s.levelset(Vec3::new(f64::NAN, 0.0, 0.0)).is_err());
    }

    #[test]
    fn custom_ellipsoid_gradient_matches_finite_differences() {
        let e = custom_ellipsoid();
        let x = Vec3::new(0.0, 0.0, 3.0);
        let (xi, grad, _) = e.levelset(x).unwrap();
        assert!(xi.abs() < 1e-14);
        // Central differences, h = 1e-5.
        let h = 1e-5;
        for i in 0..3 {
            let mut dp = x;
            let mut dm = x;
            dp[i] += h;
            dm[i] -= h;
            let fd = (e.xi(dp) - e.xi(dm)) / (2.0 * h);
            assert!((grad[i] - fd).abs() < 1e-8, "component {i}: {} vs {}", grad[i], fd);
        }
        // grad at (0,0,3) is (0,0,-2/9)*3 = (0,0,-2/3)
        assert_relative_eq!(grad.z, -2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_sphere_closed_form() {
        let s = ConvexObstacle::unit_sphere();
        let (d, bp) = s.distance_to_boundary(Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
        assert_relative_eq!(bp.position.x, 1.0, epsilon = 1e-12);
        let (d2, _) = s.distance_to_boundary(Vec3::new(0.0, 0.0, 5.0)).unwrap();
        assert_relative_eq!(d2, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn distance_rejects_interior_point() {
        let s = ConvexObstacle::unit_sphere();
        assert!(matches!(
            s.distance_to_boundary(Vec3::new(0.1, 0.0, 0.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn distance_ellipsoid_beats_dense_sampling() {
        let e = ConvexObstacle::Ellipsoid {
            center: Vec3::zeros(),
            semi_axes: Vec3::new(1.0, 2.0, 3.0),
        };
        let x = Vec3::new(5.0, 0.0, 0.0);
        let (d, bp) = e.distance_to_boundary(x).unwrap();
        // Dense boundary sampling oracle.
        let n_theta = 1000;
        let n_phi = 1000;
        let mut best = f64::INFINITY;
        for i in 0..n_theta {
            let th = std::f64::consts::PI * (i as f64 + 0.5) / n_theta as f64;
            for j in 0..n_phi {
                let ph = 2.0 * std::f64::consts::PI * j as f64 / n_phi as f64;
                let y = Vec3::new(
                    th.sin() * ph.cos(),
                    2.0 * th.sin() * ph.sin(),
                    3.0 * th.cos(),
                );
                best = best.min((x - y).norm());
            }
        }
        assert!((d - best).abs() < 1e-4, "newton {d} vs sampled {best}");
        // Alignment: x - closest parallel to the outward direction -grad.
        let dirn = (x - bp.position).normalize();
        let angle = dirn.dot(&(-bp.normal)).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-8, "angle {angle}");
    }

    #[test]
    fn convexity_sphere_exact() {
        let s = ConvexObstacle::unit_sphere();
        let theta = s.verify_uniform_convexity(64, 11).unwrap();
        assert_relative_eq!(theta, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn convexity_ellipsoid_lower_bound() {
        let e = ConvexObstacle::Ellipsoid {
            center: Vec3::zeros(),
            semi_axes: Vec3::new(1.0, 2.0, 3.0),
        };
        let theta = e.verify_uniform_convexity(512, 5).unwrap();
        assert!(theta >= 2.0 / 9.0 - 1e-12);
        assert!(theta >= 0.9 * e.theta_omega());
    }

    #[test]
    fn convexity_saddle_reports_witness() {
        let saddle = ConvexObstacle::Custom(CustomLevelSet {
            eval: Arc::new(|x: Vec3| {
                // xi = 1 - x^2 - y^2 + z^2: Hessian has a negative convexity direction.
                let xi = 1.0 - x.x * x.x - x.y * x.y + x.z * x.z;
                let grad = Vec3::new(-2.0 * x.x, -2.0 * x.y, 2.0 * x.z);
                let hess = Mat3::from_diagonal(&Vec3::new(-2.0, -2.0, 2.0));
                (xi, grad, hess)
            }),
            bounding_radius: 2.0,
            theta_omega: 2.0,
            interior_point: Vec3::zeros(),
        });
        let mut saw_violation = false;
        for seed in 0..20 {
            if let Err(Error::ConvexityViolation { value, .. }) =
                saddle.verify_uniform_convexity(256, seed)
            {
                assert!(value < 0.0);
                saw_violation = true;
                break;
            }
        }
        assert!(saw_violation);
    }

    #[test]
    fn slice_sphere_equator_and_cap() {
        let s = ConvexObstacle::unit_sphere();
        let sl = s.planar_slice(Vec3::zeros(), Vec3::x(), Vec3::y()).unwrap();
        let PlanarSlice::Curve(c) = sl else { panic!("expected curve") };
        for (k, n) in c.curvature.iter().zip(c.n_par.iter()) {
            assert!((k - 1.0).abs() < 1e-6, "curvature {k}");
            assert!((n - 1.0).abs() < 1e-6, "n_par {n}");
        }

        let sl = s
            .planar_slice(Vec3::new(0.0, 0.0, 0.5), Vec3::x(), Vec3::y())
            .unwrap();
        let PlanarSlice::Curve(c) = sl else { panic!("expected curve") };
        let r_expect = (3.0_f64).sqrt() / 2.0;
        for p in &c.points {
            let r = (p.x * p.x + p.y * p.y).sqrt();
            assert!((r - r_expect).abs() < 1e-6);
        }
        assert!((c.min_n_par - r_expect).abs() < 1e-6);
        assert!((c.max_n_par - r_expect).abs() < 1e-6);
    }

    #[test]
    fn slice_missing_plane_is_empty() {
        let s = ConvexObstacle::unit_sphere();
        let sl = s.planar_slice(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::y()).unwrap();
        assert!(matches!(sl, PlanarSlice::Empty));
    }

    #[test]
    fn slice_ellipsoid_off_axis_ratio_bracket() {
        let e = ConvexObstacle::Ellipsoid {
            center: Vec3::zeros(),
            semi_axes: Vec3::new(1.0, 2.0, 3.0),
        };
        let sl = e
            .planar_slice_with_samples(Vec3::new(0.2, 0.1, 0.4), Vec3::x(), Vec3::new(0.3, 1.0, 0.5), 4096)
            .unwrap();
        let PlanarSlice::Curve(c) = sl else { panic!("expected curve") };
        assert!(c.min_n_par > 0.0);
        assert!(c.max_n_par / c.min_n_par < 50.0);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let s = ConvexObstacle::from_json(r#"{"kind":"sphere","center":[0,0,0],"radius":1.0}"#)
            .unwrap();
        assert!(matches!(s, ConvexObstacle::Sphere { .. }));
        let text = s.to_json().unwrap();
        assert!(ConvexObstacle::from_json(&text).is_ok());
        assert!(ConvexObstacle::from_json(
            r#"{"kind":"sphere","center":[0,0,0],"radius":1.0,"bogus":3}"#
        )
        .is_err());
        assert!(ConvexObstacle::from_json(r#"{"kind":"sphere","center":[0,0,0],"radius":-1}"#)
            .is_err());
    }

    #[test]
    fn gradient_hessian_fd_consistency_random_points() {
        let shapes = [
            ConvexObstacle::unit_sphere(),
            ConvexObstacle::Ellipsoid {
                center: Vec3::new(0.1, -0.2, 0.05),
                semi_axes: Vec3::new(0.8, 1.1, 0.6),
            },
        ];
        let mut rng = rng::substream(42, 0);
        for shape in &shapes {
            for _ in 0..100 {
                let x = Vec3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                );
                let (_, grad, hess) = shape.levelset(x).unwrap();
                let h = 1e-6;
                for i in 0..3 {
                    let mut dp = x;
                    let mut dm = x;
                    dp[i] += h;
                    dm[i] -= h;
                    let fd = (shape.xi(dp) - shape.xi(dm)) / (2.0 * h);
                    assert!(
                        (grad[i] - fd).abs() / (1.0 + grad[i].abs()) < 1e-6,
                        "grad mismatch"
                    );
                }
                let h2 = 1e-4;
                for i in 0..3 {
                    for j in 0..3 {
                        let mut pp = x;
                        pp[i] += h2;
                        pp[j] += h2;
                        let mut pm = x;
                        pm[i] += h2;
                        pm[j] -= h2;
                        let mut mp = x;
                        mp[i] -= h2;
                        mp[j] += h2;
                        let mut mm = x;
                        mm[i] -= h2;
                        mm[j] -= h2;
                        let fd = (shape.xi(pp) - shape.xi(pm) - shape.xi(mp) + shape.xi(mm))
                            / (4.0 * h2 * h2);
                        assert!(
                            (hess[(i, j)] - fd).abs() / (1.0 + hess[(i, j)].abs()) < 1e-4,
                            "hess mismatch"
                        );
                    }
                }
                // Hessian symmetry within 1e-12.
                assert!((hess - hess.transpose()).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn distance_no_boundary_sample_beats_minimum() {
        let e = ConvexObstacle::Ellipsoid {
            center: Vec3::zeros(),
            semi_axes: Vec3::new(1.0, 2.0, 3.0),
        };
        let mut rng = rng::substream(9, 0);
        let x = Vec3::new(3.5, 1.0, -2.0);
        let (d, _) = e.distance_to_boundary(x).unwrap();
        for _ in 0..1000 {
            let th: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let ph: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let y = Vec3::new(
                th.sin() * ph.cos(),
                2.0 * th.sin() * ph.sin(),
                3.0 * th.cos(),
            );
            assert!(d <= (x - y).norm() + 1e-6);
        }
    }
}
