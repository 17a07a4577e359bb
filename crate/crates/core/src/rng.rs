//! Seeded randomness. Every sweep derives an independent sub-stream from
//! (seed, stream index) by counter splitting, so results are reproducible
//! regardless of iteration order or thread count.

use crate::Vec3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent RNG for sub-stream `stream` of `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform point on the unit sphere.
pub fn unit_vector<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n2 = v.norm_squared();
        if n2 > 1e-6 && n2 <= 1.0 {
            return v / n2.sqrt();
        }
    }
}

/// Standard normal sample by Box–Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// 3-vector of independent standard normals.
pub fn normal_vector<R: Rng>(rng: &mut R) -> Vec3 {
    Vec3::new(standard_normal(rng), standard_normal(rng), standard_normal(rng))
}

/// Any unit vector orthogonal to `v` (|v| > 0).
pub fn orthogonal_unit(v: &Vec3) -> Vec3 {
    let a = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let w = v.cross(&a);
    w / w.norm()
}
