//! One-dimensional quadrature: a 15-point Gauss–Kronrod kernel with an
//! adaptive bisection driver, and Gauss–Legendre / Gauss–Hermite rules
//! computed by Golub–Welsch.

use crate::{Error, Result};
use nalgebra::DMatrix;
use serde::Serialize;
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// Outcome of a quadrature evaluation.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct QuadratureReport {
    pub value: f64,
    pub abs_error_est: f64,
    pub nodes: usize,
    pub subdivisions: usize,
}

impl QuadratureReport {
    pub fn zero() -> Self {
        QuadratureReport { value: 0.0, abs_error_est: 0.0, nodes: 0, subdivisions: 0 }
    }

    pub fn merge(&mut self, other: &QuadratureReport) {
        self.value += other.value;
        self.abs_error_est += other.abs_error_est;
        self.nodes += other.nodes;
        self.subdivisions += other.subdivisions;
    }
}

// 15-point Kronrod abscissae on [0, 1] side (symmetric), Gauss-7 embedded.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144838258730,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];

const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];

const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

/// One Gauss–Kronrod 15(7) panel on [a, b]; returns (value, error estimate).
fn qk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);

    let mut res_kronrod = fc * WGK[7];
    let mut res_gauss = fc * WG[3];
    let mut res_abs = res_kronrod.abs();
    let mut fv = [0.0_f64; 15];
    fv[7] = fc;

    for j in 0..7 {
        let x = half * XGK[j];
        let f1 = f(center - x);
        let f2 = f(center + x);
        fv[j] = f1;
        fv[14 - j] = f2;
        res_kronrod += WGK[j] * (f1 + f2);
        res_abs += WGK[j] * (f1.abs() + f2.abs());
        if j % 2 == 1 {
            res_gauss += WG[j / 2] * (f1 + f2);
        }
    }

    let mean = res_kronrod * 0.5;
    let mut res_asc = WGK[7] * (fc - mean).abs();
    for j in 0..7 {
        res_asc += WGK[j] * ((fv[j] - mean).abs() + (fv[14 - j] - mean).abs());
    }

    let value = res_kronrod * half;
    res_abs *= half.abs();
    res_asc *= half.abs();

    let mut err = ((res_kronrod - res_gauss) * half).abs();
    if res_asc != 0.0 && err != 0.0 {
        err = res_asc * (200.0 * err / res_asc).powf(1.5).min(1.0);
    }
    if res_abs > f64::MIN_POSITIVE / (50.0 * f64::EPSILON) {
        err = err.max(50.0 * f64::EPSILON * res_abs);
    }
    (value, err)
}

/// Adaptive Gauss–Kronrod integration of `f` over [a, b].
///
/// Worst-interval-first refinement against a global error budget. Fails only
/// when the budget is missed by three orders of magnitude after `max_depth`
/// bisection levels.
pub fn adaptive<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_depth: usize,
) -> Result<QuadratureReport> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::invalid("non-finite quadrature interval"));
    }
    if a == b {
        return Ok(QuadratureReport::zero());
    }
    struct Panel {
        lo: f64,
        hi: f64,
        value: f64,
        err: f64,
        depth: usize,
    }
    let (v0, e0) = qk15(f, a, b);
    let mut panels = vec![Panel { lo: a, hi: b, value: v0, err: e0, depth: 0 }];
    let mut nodes = 15usize;
    let mut subdivisions = 0usize;
    loop {
        let total_value: f64 = panels.iter().map(|p| p.value).sum();
        let total_err: f64 = panels.iter().map(|p| p.err).sum();
        let budget = abs_tol.max(rel_tol * total_value.abs());
        if total_err <= budget {
            break;
        }
        // Refine the splittable panel with the largest error.
        let Some(worst) = panels
            .iter()
            .enumerate()
            .filter(|(_, p)| p.depth < max_depth && p.hi - p.lo > f64::EPSILON * p.hi.abs().max(1.0))
            .max_by(|a, b| a.1.err.partial_cmp(&b.1.err).unwrap())
            .map(|(i, _)| i)
        else {
            // Nothing left to split.
            if total_err > 1e3 * budget {
                let p = panels.iter().max_by(|a, b| a.err.partial_cmp(&b.err).unwrap()).unwrap();
                return Err(Error::QuadratureNonConvergence { lo: p.lo, hi: p.hi, err: p.err });
            }
            break;
        };
        let Panel { lo, hi, depth, .. } = panels[worst];
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = qk15(f, lo, mid);
        let (v2, e2) = qk15(f, mid, hi);
        nodes += 30;
        subdivisions += 1;
        panels[worst] = Panel { lo, hi: mid, value: v1, err: e1, depth: depth + 1 };
        panels.push(Panel { lo: mid, hi, value: v2, err: e2, depth: depth + 1 });
        if subdivisions > 20_000 {
            break;
        }
    }
    Ok(QuadratureReport {
        value: panels.iter().map(|p| p.value).sum(),
        abs_error_est: panels.iter().map(|p| p.err).sum(),
        nodes,
        subdivisions,
    })
}

/// Nodes and weights of a one-dimensional Gauss rule.
#[derive(Debug, Clone)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(diag: &[f64], off: &[f64], moment0: f64) -> GaussRule {
    let n = diag.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i + 1 < n {
            m[(i, i + 1)] = off[i];
            m[(i + 1, i)] = off[i];
        }
    }
    let eig = m.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let w = moment0 * eig.eigenvectors[(0, i)].powi(2);
            (eig.eigenvalues[i], w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    GaussRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    }
}

fn rule_cache() -> &'static Mutex<HashMap<(u8, usize), GaussRule>> {
    static CACHE: OnceLock<Mutex<HashMap<(u8, usize), GaussRule>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

impl GaussRule {
    /// Gauss–Legendre rule on [-1, 1].
    pub fn legendre(n: usize) -> GaussRule {
        assert!(n >= 1);
        if let Some(r) = rule_cache().lock().unwrap().get(&(0, n)) {
            return r.clone();
        }
        let diag = vec![0.0; n];
        let off: Vec<f64> = (1..n)
            .map(|i| {
                let i = i as f64;
                i / (4.0 * i * i - 1.0).sqrt()
            })
            .collect();
        let rule = golub_welsch(&diag, &off, 2.0);
        rule_cache().lock().unwrap().insert((0, n), rule.clone());
        rule
    }

    /// Gauss–Hermite rule for the weight exp(-t^2) on the whole line.
    pub fn hermite(n: usize) -> GaussRule {
        assert!(n >= 1);
        if let Some(r) = rule_cache().lock().unwrap().get(&(1, n)) {
            return r.clone();
        }
        let diag = vec![0.0; n];
        let off: Vec<f64> = (1..n).map(|i| (i as f64 / 2.0).sqrt()).collect();
        let rule = golub_welsch(&diag, &off, std::f64::consts::PI.sqrt());
        rule_cache().lock().unwrap().insert((1, n), rule.clone());
        rule
    }

    /// Map the rule from [-1, 1] to [a, b]; only meaningful for Legendre.
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(self.weights.iter())
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }
}

/// Fixed composite Gauss–Legendre integral of `f` over [a, b].
pub fn gauss_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, n: usize) -> f64 {
    let rule = GaussRule::legendre(n);
    rule.mapped(a, b).map(|(x, w)| w * f(x)).sum()
}
