//! The large-`m` rate function of the lumped posterior and the geometry of
//! its ridge.
//!
//! With `k = m·(a, b, c, d)` the lumped weight behaves like `exp(m·g(a,b,c,d))`
//! where `g` is a signed sum of binary entropies. `g` is constant and
//! critical on the two-parameter surface `k(u, v)`; transversally it decays
//! quadratically with two strictly negative Hessian eigenvalues.

use nalgebra::{Matrix4, SymmetricEigen};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Upper corners of the normalized box `[0,3/10]×[0,7/10]×[0,3/5]×[0,2/5]`.
pub const BOX: [f64; 4] = [0.3, 0.7, 0.6, 0.4];

/// Normalized coordinates `(a, b, c, d) = k / m`.
pub type NormCoords = [f64; 4];

const BOX_SLACK: f64 = 1e-12;

/// Ridge coordinates with `u ∈ (0, 3/10)` and `v ∈ (3/5, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurfaceParam {
    pub u: f64,
    pub v: f64,
}

impl SurfaceParam {
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(u > 0.0 && u < 0.3 && v > 0.6 && v < 1.0) {
            return Err(Error::Domain(format!("(u, v) = ({u}, {v}) outside (0,3/10)x(3/5,1)")));
        }
        Ok(SurfaceParam { u, v })
    }

    fn margin(&self) -> f64 {
        self.u.min(0.3 - self.u).min(self.v - 0.6).min(1.0 - self.v)
    }
}

/// `exp` of the binary entropy; 1 at both endpoints, 2 at one half.
pub fn h_entropy(x: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!("h is defined on [0,1], got {x}")));
    }
    Ok(ln_h(x).exp())
}

/// Binary entropy in nats, clamped to 0 at and beyond the endpoints.
#[inline]
pub fn ln_h(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        0.0
    } else {
        -x * x.ln() - (1.0 - x) * (1.0 - x).ln()
    }
}

/// `d/dx ln h(x)`.
#[inline]
fn dln_h(x: f64) -> f64 {
    ((1.0 - x) / x).ln()
}

/// `d²/dx² ln h(x)`.
#[inline]
fn d2ln_h(x: f64) -> f64 {
    -1.0 / (x * (1.0 - x))
}

/// The nine entropy terms as (weight, linear form) pairs: `g = Σ w · ln h(ℓ·p)`.
const TERMS: [(f64, [f64; 4]); 9] = [
    (2.0, [0.5, 0.5, 0.5, 0.5]),
    (0.3, [10.0 / 3.0, 0.0, 0.0, 0.0]),
    (0.7, [0.0, 10.0 / 7.0, 0.0, 0.0]),
    (0.6, [0.0, 0.0, 5.0 / 3.0, 0.0]),
    (0.4, [0.0, 0.0, 0.0, 2.5]),
    (-0.9, [10.0 / 9.0, 0.0, 10.0 / 9.0, 0.0]),
    (-1.1, [0.0, 10.0 / 11.0, 0.0, 10.0 / 11.0]),
    (-1.0, [1.0, 1.0, 0.0, 0.0]),
    (-1.0, [0.0, 0.0, 1.0, 1.0]),
];

#[inline]
fn dot(l: &[f64; 4], p: &NormCoords) -> f64 {
    l[0] * p[0] + l[1] * p[1] + l[2] * p[2] + l[3] * p[3]
}

fn check_box(p: &NormCoords) -> Result<()> {
    for i in 0..4 {
        if !(p[i] >= -BOX_SLACK && p[i] <= BOX[i] + BOX_SLACK) {
            return Err(Error::Domain(format!("{p:?} outside the normalized box")));
        }
    }
    Ok(())
}

fn check_interior(p: &NormCoords) -> Result<()> {
    for (_, l) in TERMS.iter() {
        let x = dot(l, p);
        if !(x > 0.0 && x < 1.0) {
            return Err(Error::Domain(format!("{p:?} is not an interior point")));
        }
    }
    Ok(())
}

pub(crate) fn g_unchecked(p: NormCoords) -> f64 {
    TERMS.iter().map(|(w, l)| w * ln_h(dot(l, &p))).sum()
}

/// The rate function `g = lim (1/m) ln π_L(m·p)` up to an additive constant.
pub fn g_value(p: NormCoords) -> Result<f64> {
    check_box(&p)?;
    Ok(g_unchecked(p))
}

/// `g` with the d-term written as `5/2 · ln h(2d/5)`. Kept only to quantify
/// how far that form is from the true limit.
pub fn g_value_printed_variant(p: NormCoords) -> Result<f64> {
    check_box(&p)?;
    Ok(g_unchecked(p) - 0.4 * ln_h(2.5 * p[3]) + 2.5 * ln_h(0.4 * p[3]))
}

/// Analytic gradient, e.g. `∂g/∂a = L(t) + L(10a/3) − L(10(a+c)/9) − L(a+b)`
/// with `L(x) = ln((1−x)/x)` and `t = (a+b+c+d)/2`.
pub fn g_gradient(p: NormCoords) -> Result<[f64; 4]> {
    check_interior(&p)?;
    let mut grad = [0.0; 4];
    for (w, l) in TERMS.iter() {
        let s = w * dln_h(dot(l, &p));
        for i in 0..4 {
            grad[i] += s * l[i];
        }
    }
    Ok(grad)
}

/// Exact Hessian of `g` from `d²/dx² ln h = −1/(x(1−x))`.
pub fn hessian_analytic(p: NormCoords) -> Result<Matrix4<f64>> {
    check_interior(&p)?;
    let mut h = Matrix4::zeros();
    for (w, l) in TERMS.iter() {
        let s = w * d2ln_h(dot(l, &p));
        for i in 0..4 {
            for j in 0..4 {
                h[(i, j)] += s * l[i] * l[j];
            }
        }
    }
    Ok(h)
}

/// Logarithm of the low-order correction between the lumped weight and
/// `exp(m·g)`, built from `s(x) = sqrt((x+1/m)(1−x+1/m))`.
pub fn log_s_ratio(m: u32, p: NormCoords) -> f64 {
    let inv = 1.0 / m as f64;
    let ln_s = |x: f64| 0.5 * ((x + inv) * (1.0 - x + inv)).ln();
    let [a, b, c, d] = p;
    ln_s(10.0 * (a + c) / 9.0) + ln_s(10.0 * (b + d) / 11.0) + ln_s(a + b) + ln_s(c + d)
        - 3.0 * ln_s((a + b + c + d) / 2.0)
        - ln_s(10.0 * a / 3.0)
        - ln_s(10.0 * b / 7.0)
        - ln_s(5.0 * c / 3.0)
        - ln_s(2.5 * d)
}

/// Point of the ridge at `(u, v)`.
pub fn surface_point(s: SurfaceParam) -> Result<NormCoords> {
    let SurfaceParam { u, v } = s;
    if !(v > u) {
        return Err(Error::Domain(format!("surface needs v > u, got u = {u}, v = {v}")));
    }
    let w = v - u;
    Ok([
        u * (v - 0.3) / w,
        (1.0 - u) * (v - 0.3) / w,
        u * (v - 0.6) / w,
        (1.0 - u) * (v - 0.6) / w,
    ])
}

/// Tangent vectors `∂k/∂u`, `∂k/∂v` of the ridge.
pub fn surface_tangents(s: SurfaceParam) -> ([f64; 4], [f64; 4]) {
    let SurfaceParam { u, v } = s;
    let w = v - u;
    let w2 = w * w;
    let du = [
        (v - 0.3) * v / w2,
        -(v - 0.3) * (1.0 - v) / w2,
        (v - 0.6) * v / w2,
        -(v - 0.6) * (1.0 - v) / w2,
    ];
    let dv = [
        u * (0.3 - u) / w2,
        (1.0 - u) * (0.3 - u) / w2,
        u * (0.6 - u) / w2,
        (1.0 - u) * (0.6 - u) / w2,
    ];
    (du, dv)
}

/// The same ridge parametrized by its `a` and `d` coordinates.
pub fn surface_point_ad(a: f64, d: f64) -> Result<NormCoords> {
    if !(a > 0.0 && a < 0.3 && d > 0.0 && d < 0.4) {
        return Err(Error::Domain(format!("(a, d) = ({a}, {d}) outside (0,3/10)x(0,2/5)")));
    }
    let r = 16.0 * a * a + a * (24.0 - 144.0 * d) + 9.0 * (d + 1.0) * (d + 1.0);
    if r < 0.0 {
        return Err(Error::Domain(format!("negative discriminant at (a, d) = ({a}, {d})")));
    }
    let sr = r.sqrt();
    let den = -176.0 * a + 162.0 * d - 6.0 + 26.0 * sr;
    if den.abs() < 1e-14 {
        return Err(Error::Domain(format!("vanishing denominator at (a, d) = ({a}, {d})")));
    }
    let b = (-10.0 * a + 3.0 * d + 3.0 + sr) * (4.0 * a + 17.0 * d + 3.0 + sr) / den;
    let c = -(4.0 * a - 9.0 * d + 3.0 - sr) * (16.0 * a + 3.0 * d + 3.0 - sr) / den;
    Ok([a, b, c, d])
}

/// `r(a, d)` under the square root of the `(a, d)` parametrization.
pub fn surface_discriminant(a: f64, d: f64) -> f64 {
    16.0 * a * a + a * (24.0 - 144.0 * d) + 9.0 * (d + 1.0) * (d + 1.0)
}

/// Step used for finite differences on the ridge.
pub const FD_STEP: f64 = 1e-4;

/// Central-difference Hessian of `g` with one Richardson extrapolation.
/// The step shrinks when `p` is close to the edge of the box.
pub fn hessian_fd(p: NormCoords) -> Result<Matrix4<f64>> {
    check_interior(&p)?;
    let margin = TERMS
        .iter()
        .map(|(_, l)| {
            let x = dot(l, &p);
            let norm: f64 = l.iter().sum();
            x.min(1.0 - x) / norm
        })
        .fold(f64::INFINITY, f64::min);
    let h = FD_STEP.min(margin / 20.0);
    let at = |di: usize, si: f64, dj: usize, sj: f64, step: f64| {
        let mut q = p;
        q[di] += si * step;
        q[dj] += sj * step;
        g_unchecked(q)
    };
    let raw = |step: f64| {
        let g0 = g_unchecked(p);
        let mut m = Matrix4::zeros();
        for i in 0..4 {
            m[(i, i)] = (at(i, 1.0, i, 0.0, step) - 2.0 * g0 + at(i, -1.0, i, 0.0, step)) / (step * step);
            for j in i + 1..4 {
                let v = (at(i, 1.0, j, 1.0, step) - at(i, 1.0, j, -1.0, step) - at(i, -1.0, j, 1.0, step)
                    + at(i, -1.0, j, -1.0, step))
                    / (4.0 * step * step);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    };
    Ok((raw(h / 2.0) * 4.0 - raw(h)) / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HessianMethod {
    FiniteDifference,
    /// `(α₀ ∓ √β₀)/δ` with the appendix polynomials as printed.
    ClosedForm,
    /// The printed form divided by [`closed_form_scale`].
    ClosedFormRescaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HessianResult {
    pub lambda1: f64,
    pub lambda2: f64,
    /// The two smallest-magnitude eigenvalues (zero for closed forms).
    pub zero_residuals: [f64; 2],
}

/// Minimal distance from the edge of `(0,3/10)×(3/5,1)` for eigenvalue work.
pub const EIGEN_MARGIN: f64 = 1e-3;

pub fn hessian_eigen(s: SurfaceParam, method: HessianMethod) -> Result<HessianResult> {
    if s.margin() < EIGEN_MARGIN {
        return Err(Error::Domain(format!(
            "(u, v) = ({}, {}) closer than {EIGEN_MARGIN} to the boundary",
            s.u, s.v
        )));
    }
    match method {
        HessianMethod::FiniteDifference => {
            let hm = hessian_fd(surface_point(s)?)?;
            Ok(split_spectrum(hm))
        }
        HessianMethod::ClosedForm | HessianMethod::ClosedFormRescaled => {
            let (u, v) = (s.u, s.v);
            let a0 = alpha0(u, v);
            let b0 = beta0(u, v);
            if b0 < 0.0 {
                return Err(Error::Domain(format!("beta0 = {b0:e} < 0 at (u, v) = ({u}, {v})")));
            }
            let mut den = delta(u, v);
            if method == HessianMethod::ClosedFormRescaled {
                den *= closed_form_scale(u, v);
            }
            let l1 = (a0 - b0.sqrt()) / den;
            let l2 = (a0 + b0.sqrt()) / den;
            Ok(HessianResult {
                lambda1: l1.min(l2),
                lambda2: l1.max(l2),
                zero_residuals: [0.0, 0.0],
            })
        }
    }
}

/// Sorts a 4×4 symmetric spectrum into two near-zero and two remaining eigenvalues.
pub fn split_spectrum(hm: Matrix4<f64>) -> HessianResult {
    let mut ev: Vec<f64> = SymmetricEigen::new(hm).eigenvalues.iter().copied().collect();
    ev.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    HessianResult {
        lambda1: ev[2].min(ev[3]),
        lambda2: ev[2].max(ev[3]),
        zero_residuals: [ev[0], ev[1]],
    }
}

/// `δ = u(3/10−u)(9/20−u)(v−9/20)(v−3/5)(1−v)`.
pub fn delta(u: f64, v: f64) -> f64 {
    u * (0.3 - u) * (0.45 - u) * (v - 0.45) * (v - 0.6) * (1.0 - v)
}

/// Ratio between the printed closed-form eigenvalues and the Hessian of `g`:
/// `10⁶ · v (3/5 − u)(1 − u)(v − 3/10)`.
pub fn closed_form_scale(u: f64, v: f64) -> f64 {
    1e6 * v * (0.6 - u) * (1.0 - u) * (v - 0.3)
}

// ---------------------------------------------------------------------------
// Appendix polynomials.

/// `(coefficient, power of u, power of v)`.
type Term = (i64, u32, u32);

const P_ALPHA: [Term; 23] = [
    (80000, 4, 4), (-152000, 4, 3), (-152000, 3, 4), (90000, 4, 2), (252400, 3, 3),
    (90000, 2, 4), (-18000, 4, 1), (-122220, 3, 2), (-122220, 2, 3), (-18000, 1, 4),
    (12420, 3, 1), (27738, 2, 2), (12420, 1, 3), (3240, 3, 0), (16182, 2, 1),
    (16182, 1, 2), (3240, 0, 3), (-6156, 2, 0), (-15633, 1, 1), (-6156, 0, 2),
    (3645, 1, 0), (3645, 0, 1), (-729, 0, 0),
];

const P_BETA: [Term; 75] = [
    (6400000000, 8, 8), (-24320000000, 8, 7), (-24320000000, 7, 8), (37504000000, 8, 6),
    (93568000000, 7, 7), (37504000000, 6, 8), (-30240000000, 8, 5), (-146374400000, 7, 6),
    (-146374400000, 6, 7), (-30240000000, 5, 8), (13572000000, 8, 4), (120018240000, 7, 5),
    (233005760000, 6, 6), (120018240000, 5, 7), (13572000000, 4, 8), (-3240000000, 8, 3),
    (-54971856000, 7, 4), (-195046704000, 6, 5), (-195046704000, 5, 6), (-54971856000, 4, 7),
    (-3240000000, 3, 8), (324000000, 8, 2), (13500432000, 7, 3), (91833066000, 6, 4),
    (167842288800, 5, 5), (91833066000, 4, 6), (13500432000, 3, 7), (324000000, 2, 8),
    (-1432080000, 7, 2), (-23668200000, 6, 3), (-82693612080, 5, 4), (-82693612080, 4, 5),
    (-23668200000, 3, 6), (-1432080000, 2, 7), (11664000, 7, 1), (2901646800, 6, 2),
    (23482334160, 5, 3), (44511382260, 4, 4), (23482334160, 3, 5), (2901646800, 2, 6),
    (11664000, 1, 7), (-127720800, 6, 1), (-3799373040, 5, 2), (-15209217720, 4, 3),
    (-15209217720, 3, 4), (-3799373040, 2, 5), (-127720800, 1, 6), (10497600, 6, 0),
    (408414960, 5, 1), (3551084388, 4, 2), (6965123256, 3, 3), (3551084388, 2, 4),
    (408414960, 1, 5), (10497600, 0, 6), (-39890880, 5, 0), (-606551328, 4, 1),
    (-2281385088, 3, 2), (-2281385088, 2, 3), (-606551328, 1, 4), (-39890880, 0, 5),
    (61515936, 4, 0), (485146584, 3, 1), (933840981, 2, 2), (485146584, 1, 3),
    (61515936, 0, 4), (-49601160, 3, 0), (-218074518, 2, 1), (-218074518, 1, 2),
    (-49601160, 0, 3), (22261473, 2, 0), (52435512, 1, 1), (22261473, 0, 2),
    (-5314410, 1, 0), (-5314410, 0, 1), (531441, 0, 0),
];

/// Double-double number: `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

impl Dd {
    pub(crate) const fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub(crate) fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn two_sum(a: f64, b: f64) -> Dd {
        let s = a + b;
        let bb = s - a;
        let e = (a - (s - bb)) + (b - bb);
        Dd { hi: s, lo: e }
    }

    fn quick(a: f64, b: f64) -> Dd {
        let s = a + b;
        Dd { hi: s, lo: b - (s - a) }
    }

    pub(crate) fn add(self, o: Dd) -> Dd {
        let s = Dd::two_sum(self.hi, o.hi);
        let t = Dd::two_sum(self.lo, o.lo);
        let r = Dd::quick(s.hi, s.lo + t.hi);
        Dd::quick(r.hi, r.lo + t.lo)
    }

    pub(crate) fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub(crate) fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub(crate) fn mul(self, o: Dd) -> Dd {
        let p = self.hi * o.hi;
        let e = self.hi.mul_add(o.hi, -p);
        Dd::quick(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub(crate) fn div_f64(self, b: f64) -> Dd {
        let q1 = self.hi / b;
        let r = self.sub(Dd::from(q1).mul(Dd::from(b)));
        let q2 = r.hi / b;
        Dd::quick(q1, q2)
    }
}

fn powers(x: Dd, n: usize) -> Vec<Dd> {
    let mut p = vec![Dd::from(1.0); n + 1];
    for i in 1..=n {
        p[i] = p[i - 1].mul(x);
    }
    p
}

fn poly_dd(terms: &[Term], u: Dd, v: Dd) -> Dd {
    let pu = powers(u, 8);
    let pv = powers(v, 8);
    terms.iter().fold(Dd::from(0.0), |acc, &(c, i, j)| {
        acc.add(Dd::from(c as f64).mul(pu[i as usize]).mul(pv[j as usize]))
    })
}

fn poly_f64(terms: &[Term], u: f64, v: f64, du: u32, dv: u32) -> f64 {
    let fall = |n: u32, k: u32| -> f64 { (0..k).map(|t| (n - t) as f64).product() };
    terms
        .iter()
        .filter(|&&(_, i, j)| i >= du && j >= dv)
        .map(|&(c, i, j)| {
            c as f64 * fall(i, du) * fall(j, dv) * u.powi((i - du) as i32) * v.powi((j - dv) as i32)
        })
        .sum()
}

/// Appendix `α₀(u, v) = (25/2)(v−u)² · P_α(u, v)`.
pub fn alpha0(u: f64, v: f64) -> f64 {
    12.5 * (v - u) * (v - u) * poly_dd(&P_ALPHA, Dd::from(u), Dd::from(v)).to_f64()
}

/// Appendix `β₀(u, v) = (25/2)²(v−u)⁴ · P_β(u, v)`.
pub fn beta0(u: f64, v: f64) -> f64 {
    156.25 * (v - u).powi(4) * poly_dd(&P_BETA, Dd::from(u), Dd::from(v)).to_f64()
}

/// `α = −10⁻⁶ α₀/(v−u)²` in double-double.
fn alpha_norm_dd(u: Dd, v: Dd) -> Dd {
    poly_dd(&P_ALPHA, u, v).mul(Dd::from(-12.5)).div_f64(1e6)
}

/// `β = 10⁻¹² β₀/(v−u)⁴` in double-double.
fn beta_norm_dd(u: Dd, v: Dd) -> Dd {
    poly_dd(&P_BETA, u, v).mul(Dd::from(156.25)).div_f64(1e12)
}

/// `(3/10)⁴(2/5)⁴`: the Jacobian factor that turns `α(3w/10, 1−2z/5)` into a
/// function with the stated slopes at the origin.
pub const GAMMA_SCALE: f64 = 0.00020736;

fn wz_to_uv_dd(w: f64, z: f64) -> (Dd, Dd) {
    let u = Dd::from(w).mul(Dd::from(3.0)).div_f64(10.0);
    let v = Dd::from(1.0).sub(Dd::from(2.0 * z).div_f64(5.0));
    (u, v)
}

/// `γ(w, z) = α(3w/10, 1−2z/5) / ((3/10)⁴(2/5)⁴)`.
pub fn gamma(w: f64, z: f64) -> f64 {
    let (u, v) = wz_to_uv_dd(w, z);
    alpha_norm_dd(u, v).to_f64() / GAMMA_SCALE
}

fn gamma_fast(w: f64, z: f64) -> f64 {
    -12.5e-6 * poly_f64(&P_ALPHA, 0.3 * w, 1.0 - 0.4 * z, 0, 0) / GAMMA_SCALE
}

/// `(∂γ/∂w, ∂γ/∂z)` from the polynomial derivative.
pub fn gamma_gradient(w: f64, z: f64) -> [f64; 2] {
    let (u, v) = (0.3 * w, 1.0 - 0.4 * z);
    let k = -12.5e-6 / GAMMA_SCALE;
    [
        k * 0.3 * poly_f64(&P_ALPHA, u, v, 1, 0),
        k * -0.4 * poly_f64(&P_ALPHA, u, v, 0, 1),
    ]
}

/// `(γ_ww, γ_wz, γ_zz)`.
pub fn gamma_second(w: f64, z: f64) -> [f64; 3] {
    let (u, v) = (0.3 * w, 1.0 - 0.4 * z);
    let k = -12.5e-6 / GAMMA_SCALE;
    [
        k * 0.09 * poly_f64(&P_ALPHA, u, v, 2, 0),
        k * -0.12 * poly_f64(&P_ALPHA, u, v, 1, 1),
        k * 0.16 * poly_f64(&P_ALPHA, u, v, 0, 2),
    ]
}

/// `ξ = α² − β` at `(3w/10, 1−2z/5)`, unscaled `α`.
pub fn xi_direct(w: f64, z: f64) -> f64 {
    let (u, v) = wz_to_uv_dd(w, z);
    let a = alpha_norm_dd(u, v);
    a.mul(a).sub(beta_norm_dd(u, v)).to_f64()
}

fn h_wz_dd(w: Dd, z: Dd) -> Dd {
    let c = |x: f64| Dd::from(x);
    let w2 = w.mul(w);
    let z2 = z.mul(z);
    c(1744.0).mul(w2).mul(z2)
        .sub(c(4760.0).mul(w2).mul(z))
        .sub(c(5280.0).mul(w).mul(z2))
        .add(c(3475.0).mul(w2))
        .add(c(13800.0).mul(w).mul(z))
        .add(c(4400.0).mul(z2))
        .sub(c(9750.0).mul(w))
        .sub(c(11000.0).mul(z))
        .add(c(8125.0))
}

/// The quartic factor `h(w, z)` of `ξ`.
pub fn h_wz(w: f64, z: f64) -> f64 {
    h_wz_dd(Dd::from(w), Dd::from(z)).to_f64()
}

/// Factored form of `ξ`.
pub fn xi_product(w: f64, z: f64) -> f64 {
    let (wd, zd) = (Dd::from(w), Dd::from(z));
    let one = Dd::from(1.0);
    let lin = |a: f64, b: f64, x: Dd| Dd::from(a).sub(Dd::from(b).mul(x));
    let fw = wd.mul(one.sub(wd)).mul(lin(3.0, 2.0, wd)).mul(lin(2.0, 1.0, wd)).mul(lin(10.0, 3.0, wd));
    let fz = zd.mul(one.sub(zd)).mul(lin(11.0, 8.0, zd)).mul(lin(7.0, 4.0, zd)).mul(lin(5.0, 2.0, zd));
    Dd::from(729.0)
        .div_f64(1.25e15)
        .mul(fw)
        .mul(fz)
        .mul(h_wz_dd(wd, zd))
        .to_f64()
}

#[derive(Debug, Clone, Serialize)]
pub struct SubCheck {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
    pub point: Option<[f64; 2]>,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct AppendixReport {
    pub checks: Vec<SubCheck>,
    pub all_passed: bool,
}

impl AppendixReport {
    pub fn get(&self, name: &str) -> Option<&SubCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AppendixConfig {
    pub mesh: usize,
    pub xi_points: usize,
    pub seed: u64,
}

impl Default for AppendixConfig {
    fn default() -> Self {
        AppendixConfig { mesh: 2000, xi_points: 10_000, seed: 1 }
    }
}

fn check(name: &str, passed: bool, value: f64, threshold: f64, point: Option<[f64; 2]>, detail: String) -> SubCheck {
    SubCheck { name: name.into(), passed, value, threshold, point, detail }
}

/// Runs the numerical side of the positivity argument for `α` and `α² − β`.
pub fn appendix_checks() -> AppendixReport {
    appendix_checks_with(AppendixConfig::default())
}

pub fn appendix_checks_with(cfg: AppendixConfig) -> AppendixReport {
    let mut checks = Vec::new();
    let n = cfg.mesh;
    let step = 1.0 / n as f64;
    let corner = n / 20;

    // (1) zeros and mesh positivity of γ.
    let g00 = gamma(0.0, 0.0);
    let g11 = gamma(1.0, 1.0);
    checks.push(check(
        "gamma_zeros",
        g00.abs() < 1e-12 && g11.abs() < 1e-12,
        g00.abs().max(g11.abs()),
        1e-12,
        None,
        format!("gamma(0,0) = {g00:e}, gamma(1,1) = {g11:e}"),
    ));

    let rows: Vec<(f64, [f64; 2], f64, [f64; 2], f64, [f64; 2])> = (0..=n)
        .into_par_iter()
        .map(|i| {
            let w = i as f64 * step;
            let mut outside = (f64::INFINITY, [w, 0.0]);
            let mut inside = (f64::INFINITY, [w, 0.0]);
            let mut grad = (0.0f64, [w, 0.0]);
            for j in 0..=n {
                let z = j as f64 * step;
                let in_low = i <= corner && j <= corner;
                let in_high = i >= n - corner && j >= n - corner;
                let val = gamma_fast(w, z);
                if in_low || in_high {
                    if (i, j) != (0, 0) && (i, j) != (n, n) && val < inside.0 {
                        inside = (val, [w, z]);
                    }
                } else if val < outside.0 {
                    outside = (val, [w, z]);
                }
                let gr = gamma_gradient(w, z);
                let gmax = gr[0].abs().max(gr[1].abs());
                if gmax > grad.0 {
                    grad = (gmax, [w, z]);
                }
            }
            (outside.0, outside.1, inside.0, inside.1, grad.0, grad.1)
        })
        .collect();
    let (mut out_min, mut out_at) = (f64::INFINITY, [0.0; 2]);
    let (mut in_min, mut in_at) = (f64::INFINITY, [0.0; 2]);
    let (mut gmax, mut g_at) = (0.0f64, [0.0; 2]);
    for r in &rows {
        if r.0 < out_min {
            out_min = r.0;
            out_at = r.1;
        }
        if r.2 < in_min {
            in_min = r.2;
            in_at = r.3;
        }
        if r.4 > gmax {
            gmax = r.4;
            g_at = r.5;
        }
    }
    checks.push(check(
        "gamma_mesh_min",
        out_min >= 0.038,
        out_min,
        0.038,
        Some(out_at),
        format!("minimum of gamma on the {n}x{n} mesh outside the corner squares"),
    ));
    checks.push(check(
        "gamma_corner_positive",
        in_min > 0.0,
        in_min,
        0.0,
        Some(in_at),
        "gamma on mesh points inside the corner squares, corners excluded".into(),
    ));

    // (2) slopes at the origin by Richardson-extrapolated central differences.
    let fd = |f: &dyn Fn(f64) -> f64| {
        let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
        (4.0 * d(5e-5) - d(1e-4)) / 3.0
    };
    let gw = fd(&|h| gamma(h, 0.0));
    let gz = fd(&|h| gamma(0.0, h));
    let (ew, ez) = (9625.0 / 384.0, 1625.0 / 64.0);
    let rel = ((gw - ew) / ew).abs().max(((gz - ez) / ez).abs());
    checks.push(check(
        "gamma_slopes_origin",
        rel < 1e-6,
        rel,
        1e-6,
        Some([0.0, 0.0]),
        format!("d/dw = {gw:.12} (expect 9625/384), d/dz = {gz:.12} (expect 1625/64)"),
    ));

    // (3) factored form of ξ.
    let mut rng = stream_rng(cfg.seed, 0);
    let mut worst = (0.0f64, [0.0; 2]);
    for _ in 0..cfg.xi_points {
        let w: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let z: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let a = xi_direct(w, z);
        let b = xi_product(w, z);
        let e = ((a - b) / b).abs();
        if e > worst.0 {
            worst = (e, [w, z]);
        }
    }
    let mid = ((xi_direct(0.5, 0.5) - xi_product(0.5, 0.5)) / xi_product(0.5, 0.5)).abs();
    checks.push(check(
        "xi_factorization",
        worst.0 <= 1e-12 && mid <= 1e-12,
        worst.0.max(mid),
        1e-12,
        Some(worst.1),
        format!("{} random points plus (0.5, 0.5)", cfg.xi_points),
    ));

    // (4) h(1, z).
    let mut worst = (0.0f64, 0.0);
    for i in 0..=1000 {
        let z = i as f64 / 1000.0;
        let direct = h_wz(1.0, z);
        let printed = 864.0 * z * z - 1960.0 * z + 1850.0;
        let e = ((direct - printed) / printed).abs();
        if e > worst.0 {
            worst = (e, z);
        }
    }
    checks.push(check(
        "h_one_z_identity",
        worst.0 <= 1e-12,
        worst.0,
        1e-12,
        Some([1.0, worst.1]),
        "h(1,z) against 864z^2-1960z+1850".into(),
    ));

    // (5) h > 0 on the unit square.
    let (mut hmin, mut h_at) = (f64::INFINITY, [0.0; 2]);
    for i in 0..=n {
        for j in 0..=n {
            let (w, z) = (i as f64 * step, j as f64 * step);
            let v = 1744.0 * w * w * z * z - 4760.0 * w * w * z - 5280.0 * w * z * z + 3475.0 * w * w
                + 13800.0 * w * z + 4400.0 * z * z - 9750.0 * w - 11000.0 * z + 8125.0;
            if v < hmin {
                hmin = v;
                h_at = [w, z];
            }
        }
    }
    checks.push(check("h_positive", hmin > 0.0, hmin, 0.0, Some(h_at), "minimum of h(w,z) on the mesh".into()));

    // (6) no real roots of the quadratics behind r(z).
    let num = [2640.0, -6900.0, 4875.0];
    let den = [1744.0, -4760.0, 3475.0];
    let diff = [num[0] - den[0], num[1] - den[1], num[2] - den[2]];
    let disc = |q: [f64; 3]| q[1] * q[1] - 4.0 * q[0] * q[2];
    let worst_disc = disc(num).max(disc(den)).max(disc(diff));
    let positive_at_zero = num[2] > 0.0 && den[2] > 0.0 && diff[2] > 0.0;
    checks.push(check(
        "r_no_real_roots",
        worst_disc < 0.0 && positive_at_zero,
        worst_disc,
        0.0,
        None,
        format!("discriminants {}, {}, {}", disc(num), disc(den), disc(diff)),
    ));

    // (7) first-derivative bound used for the mesh argument.
    checks.push(check(
        "gamma_gradient_bound",
        gmax <= 48.0,
        gmax,
        48.0,
        Some(g_at),
        "max |partial derivative| of gamma on the mesh".into(),
    ));

    // (8) second-derivative bound on the lower corner square.
    let (mut smax, mut s_at) = (0.0f64, [0.0; 2]);
    for i in 0..=200 {
        for j in 0..=200 {
            let (w, z) = (i as f64 / 4000.0, j as f64 / 4000.0);
            let s = gamma_second(w, z);
            let v = s.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if v > smax {
                smax = v;
                s_at = [w, z];
            }
        }
    }
    checks.push(check(
        "gamma_second_bound",
        smax <= 163.0,
        smax,
        163.0,
        Some(s_at),
        "max |second partial| of gamma on [0,1/20]^2".into(),
    ));

    let all_passed = checks.iter().all(|c| c.passed);
    AppendixReport { checks, all_passed }
}
