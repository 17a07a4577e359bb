//! Numerical toolkit for billiard flow in the exterior of a uniformly convex
//! obstacle: backward exit times, specular reflection, grazing-singularity
//! functionals and their averages, singular-regime quadrature, Hölder-exponent
//! estimation, and a desk-scale mild-formulation Boltzmann solver.
//!
//! Everything is dimensionless. The obstacle is described by a level set
//! `xi` with `xi > 0` inside the body, `xi = 0` on its boundary, and
//! `xi < 0` in the exterior domain where all dynamics take place.

pub mod accept;
pub mod billiard;
pub mod error;
pub mod geometry;
pub mod holder;
pub mod kinetic;
pub mod quad;
pub mod rng;
pub mod shift;
pub mod singular;

pub use error::{Error, Result};

/// 3-vector used for positions and velocities.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix used for Hessians and Jacobians.
pub type Mat3 = nalgebra::Matrix3<f64>;

/// `sqrt(1 + |v|^2)`, the Japanese bracket of a velocity.
#[inline]
pub fn bracket(v: &Vec3) -> f64 {
    (1.0 + v.norm_squared()).sqrt()
}

/// Unit vector of `v`, or zero when `v = 0`.
#[inline]
pub fn unit_or_zero(v: &Vec3) -> Vec3 {
    let n = v.norm();
    if n == 0.0 {
        Vec3::zeros()
    } else {
        v / n
    }
}
