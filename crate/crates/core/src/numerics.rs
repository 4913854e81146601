//! Special functions and the scalar Gamma-shape solver.
//!
//! Digamma, trigamma and log-gamma shift their argument upward with the
//! usual recurrences until it exceeds [`ASYMPTOTIC_FROM`], then evaluate an
//! asymptotic series in `1/x`.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

const ASYMPTOTIC_FROM: f64 = 10.0;

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn check_positive(function: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            function,
            value: x,
            reason: "requires a finite positive argument",
        })
    }
}

/// ψ(x) = d/dx ln Γ(x) for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc -= 1.0 / x;
        x += 1.0;
    }
    // B_2k / (2k) for k = 1..7
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 120.0,
        1.0 / 252.0,
        -1.0 / 240.0,
        1.0 / 132.0,
        -691.0 / 32760.0,
        1.0 / 12.0,
    ];
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    for c in C.iter().rev() {
        series = (series + c) * inv2;
    }
    acc + x.ln() - 0.5 / x - series
}

/// ψ′(x) for x > 0.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(trigamma_unchecked(x))
}

pub(crate) fn trigamma_unchecked(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < ASYMPTOTIC_FROM {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    // B_2k for k = 1..7, multiplying x^-(2k+1)
    const B: [f64; 7] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
    ];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for b in B.iter().rev() {
        series = (series + b) * inv2;
    }
    acc + inv + 0.5 * inv2 + series * inv
}

/// ln Γ(x) for x > 0.
pub fn ln_gamma(x: f64) -> Result<f64> {
    check_positive("ln_gamma", x)?;
    Ok(ln_gamma_unchecked(x))
}

pub(crate) fn ln_gamma_unchecked(mut x: f64) -> f64 {
    let mut shift = 1.0;
    while x < ASYMPTOTIC_FROM {
        shift *= x;
        x += 1.0;
    }
    // B_2k / (2k (2k-1)) for k = 1..7
    const C: [f64; 7] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
    ];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    for c in C.iter().rev() {
        series = series * inv2 + c;
    }
    (x - 0.5) * x.ln() - x + 0.5 * LN_2PI + series * inv - shift.ln()
}

/// ln Γ_d(a) = d(d−1)/4 · ln π + Σ_{i=1..d} ln Γ(a + (1−i)/2).
pub fn log_multivariate_gamma(d: usize, a: f64) -> Result<f64> {
    if d == 0 {
        return Err(Error::invalid("log_multivariate_gamma: dimension must be >= 1"));
    }
    let bound = (d as f64 - 1.0) / 2.0;
    if !a.is_finite() || a <= bound {
        return Err(Error::Domain {
            function: "log_multivariate_gamma",
            value: a,
            reason: "requires a > (d-1)/2",
        });
    }
    let df = d as f64;
    let mut acc = df * (df - 1.0) / 4.0 * PI.ln();
    for i in 1..=d {
        acc += ln_gamma_unchecked(a + (1.0 - i as f64) / 2.0);
    }
    Ok(acc)
}

/// Log of the Wishart normalizer `B(Ψ, ν) = |Ψ|^{−ν/2} / (2^{νd/2} Γ_d(ν/2))`.
pub fn wishart_log_b(scale: &DMatrix<f64>, dof: f64, dim: usize) -> Result<f64> {
    if scale.nrows() != dim || scale.ncols() != dim {
        return Err(Error::DimensionMismatch {
            context: "wishart_log_b scale",
            expected: dim,
            found: scale.nrows(),
        });
    }
    if !dof.is_finite() || dof <= dim as f64 - 1.0 {
        return Err(Error::Domain {
            function: "wishart_log_b",
            value: dof,
            reason: "degrees of freedom must exceed d-1",
        });
    }
    let logdet = linalg::logdet_spd(scale, "Wishart scale")?;
    Ok(wishart_log_b_from_logdet(logdet, dof, dim))
}

pub(crate) fn wishart_log_b_from_logdet(logdet: f64, dof: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let mut lmg = d * (d - 1.0) / 4.0 * PI.ln();
    for i in 1..=dim {
        lmg += ln_gamma_unchecked(dof / 2.0 + (1.0 - i as f64) / 2.0);
    }
    -(dof * d / 2.0) * std::f64::consts::LN_2 - lmg - dof / 2.0 * logdet
}

const SHAPE_MIN: f64 = 1e-6;
const SHAPE_MAX: f64 = 1e8;
const SHAPE_TOL: f64 = 1e-10;
pub const SHAPE_MAX_ITER: usize = 100;

/// Solves `ψ(a) − ln a + ln d − c = 0` for the Gamma shape `a`, given the
/// average log-moment `c` and average moment `d_mean`.
///
/// Newton iterations run on `ln a`, so every iterate stays positive; iterates
/// are additionally clamped to `[1e-6, 1e8]`.
pub fn solve_gamma_shape(c: f64, d_mean: f64, a_init: f64) -> Result<f64> {
    check_positive("solve_gamma_shape mean", d_mean)?;
    check_positive("solve_gamma_shape initial shape", a_init)?;
    if !c.is_finite() {
        return Err(Error::Domain {
            function: "solve_gamma_shape",
            value: c,
            reason: "log-moment must be finite",
        });
    }
    let ln_d = d_mean.ln();
    // ψ(a) − ln a < 0 for every a > 0.
    if c >= ln_d {
        return Err(Error::NoRoot { c, ln_d });
    }
    let residual = |a: f64| digamma_unchecked(a) - a.ln() + ln_d - c;

    let mut a = a_init.clamp(SHAPE_MIN, SHAPE_MAX);
    let mut f = residual(a);
    for _ in 0..SHAPE_MAX_ITER {
        if f.abs() < SHAPE_TOL {
            // one more step to reach working precision
            let polished = newton_log_step(a, f);
            let fp = residual(polished);
            return Ok(if fp.abs() <= f.abs() { polished } else { a });
        }
        a = newton_log_step(a, f);
        f = residual(a);
    }
    if f.abs() < SHAPE_TOL {
        return Ok(a);
    }
    Err(Error::NonConvergence {
        solver: "solve_gamma_shape",
        iterations: SHAPE_MAX_ITER,
        residual: f,
    })
}

fn newton_log_step(a: f64, f: f64) -> f64 {
    let slope = trigamma_unchecked(a) * a - 1.0;
    (a * (-f / slope).exp()).clamp(SHAPE_MIN, SHAPE_MAX)
}
