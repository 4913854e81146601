//! Variational lower bound, term by term.
//!
//! Terms suffixed `_entropy_neg` are `E_q[ln q]`; they enter the total with
//! a minus sign. Constants are kept so that each (prior, entropy) pair is a
//! negative KL divergence.

use std::fmt;

use nalgebra::DMatrix;

use crate::data::SuffStats;
use crate::engine::VariationalState;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::{PriorConfig, VPrior, WPrior};
use crate::numerics::{digamma_unchecked, ln_gamma_unchecked, wishart_log_b_from_logdet, LN_2PI};
use crate::posterior::{
    expected_alpha, expected_w, y_aggregates, QAlpha, QVtilde, VMoments, WMoments, YAggregates, QW, QY,
};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboBreakdown {
    pub data_term: f64,
    pub y_prior: f64,
    pub y_entropy_neg: f64,
    pub v_prior: f64,
    pub alpha_prior: f64,
    pub alpha_entropy_neg: f64,
    pub mu_prior: f64,
    pub w_prior: f64,
    pub w_entropy_neg: f64,
    pub v_entropy_neg: f64,
    pub total: f64,
}

impl ElboBreakdown {
    pub const TERM_NAMES: [&'static str; 10] = [
        "data_term",
        "y_prior",
        "y_entropy_neg",
        "v_prior",
        "alpha_prior",
        "alpha_entropy_neg",
        "mu_prior",
        "w_prior",
        "w_entropy_neg",
        "v_entropy_neg",
    ];

    pub fn terms(&self) -> [f64; 10] {
        [
            self.data_term,
            self.y_prior,
            self.y_entropy_neg,
            self.v_prior,
            self.alpha_prior,
            self.alpha_entropy_neg,
            self.mu_prior,
            self.w_prior,
            self.w_entropy_neg,
            self.v_entropy_neg,
        ]
    }

    /// Signed sum of the terms, always accumulated in the same order.
    pub fn signed_sum(&self) -> f64 {
        self.data_term + self.y_prior - self.y_entropy_neg + self.v_prior + self.alpha_prior
            - self.alpha_entropy_neg
            + self.mu_prior
            - self.v_entropy_neg
            + self.w_prior
            - self.w_entropy_neg
    }

    fn finish(mut self) -> Result<Self> {
        for (name, value) in Self::TERM_NAMES.iter().zip(self.terms()) {
            if !value.is_finite() {
                return Err(Error::NonFinite { term: name, value });
            }
        }
        self.total = self.signed_sum();
        Ok(self)
    }
}

impl fmt::Display for ElboBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, value) in Self::TERM_NAMES.iter().zip(self.terms()) {
            writeln!(f, "{name}={value:.16e}")?;
        }
        write!(f, "total={:.16e}", self.total)
    }
}

/// `E_q[ln P(Φ | Y, Ṽ, W)]`.
pub fn elbo_data_term(
    stats: &SuffStats,
    agg: &YAggregates,
    qv: &QVtilde,
    vmom: &VMoments,
    wm: &WMoments,
) -> f64 {
    let n = stats.count;
    if n == 0.0 {
        return 0.0;
    }
    let d = stats.dim() as f64;
    let vt_w = qv.mean().transpose() * &wm.wbar;
    0.5 * n * wm.logdet - 0.5 * n * d * LN_2PI - 0.5 * linalg::trace_of_product(&wm.wbar, &stats.second)
        + linalg::trace_of_product(&vt_w, &agg.c)
        - 0.5 * linalg::trace_of_product(&vmom.evt_w_vt, &agg.r_ytilde)
}

/// `(E[ln P(Y)], E[ln q(Y)])`.
pub fn elbo_y_terms(qy: &QY) -> (f64, f64) {
    let m = qy.len() as f64;
    let ny = qy.ny() as f64;
    let mut tr = 0.0;
    let mut logdets = 0.0;
    for g in qy.speakers() {
        tr += g.covariance().trace() + g.mean().norm_squared();
        logdets += g.logdet_precision();
    }
    (
        -0.5 * m * ny * LN_2PI - 0.5 * tr,
        -0.5 * m * ny * (LN_2PI + 1.0) + 0.5 * logdets,
    )
}

/// Loading, ARD and mean terms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VTerms {
    pub v_prior: f64,
    pub alpha_prior: f64,
    pub alpha_entropy_neg: f64,
    pub mu_prior: f64,
    pub v_entropy_neg: f64,
}

pub fn elbo_v_terms(qv: &QVtilde, qalpha: Option<&QAlpha>, prior: &PriorConfig) -> Result<VTerms> {
    let d = qv.dim();
    let ny = qv.ny();
    let k = (ny + 1) as f64;
    let v_entropy_neg =
        -0.5 * d as f64 * k * (LN_2PI + 1.0) + 0.5 * qv.rows().iter().map(|g| g.logdet_precision()).sum::<f64>();
    match &prior.v_prior {
        VPrior::Ard {
            a_alpha,
            b_alpha,
            mu0,
            beta,
            ..
        } => {
            let qa = qalpha.ok_or_else(|| Error::invalid("ARD prior needs q(alpha)"))?;
            check_dim("q(alpha) rates", ny, qa.b.len())?;
            check_dim("mu0", d, mu0.len())?;
            let m = VMoments::compute(qv, &DMatrix::identity(d, d))?;
            let (ea, ela) = expected_alpha(qa);
            let v_prior = -0.5 * (ny * d) as f64 * LN_2PI + 0.5 * d as f64 * ela.sum()
                - 0.5 * ea.dot(&m.evq_sq);
            let alpha_prior = ny as f64 * (a_alpha * b_alpha.ln() - ln_gamma_unchecked(*a_alpha))
                + (a_alpha - 1.0) * ela.sum()
                - b_alpha * ea.sum();
            let alpha_entropy_neg = gamma_entropy_neg(qa.a, qa.b.iter().copied());
            let mu = qv.mu_mean();
            let var = qv.mu_variance();
            let mut mu_prior = -0.5 * d as f64 * LN_2PI;
            for r in 0..d {
                let diff = mu[r] - mu0[r];
                mu_prior += 0.5 * beta[r].ln() - 0.5 * beta[r] * (var[r] + diff * diff);
            }
            Ok(VTerms {
                v_prior,
                alpha_prior,
                alpha_entropy_neg,
                mu_prior,
                v_entropy_neg,
            })
        }
        VPrior::Rows(rows) => {
            check_dim("row priors", d, rows.len())?;
            let mut v_prior = -0.5 * d as f64 * k * LN_2PI;
            for (r, (g, p)) in qv.rows().iter().zip(rows).enumerate() {
                check_dim("row prior length", ny + 1, p.mean.len())?;
                let logdet = linalg::logdet_spd(&p.precision, &format!("row prior precision {r}"))?;
                let diff = g.mean() - &p.mean;
                v_prior += 0.5 * logdet
                    - 0.5 * linalg::trace_of_product(&p.precision, g.covariance())
                    - 0.5 * diff.dot(&(&p.precision * &diff));
            }
            Ok(VTerms {
                v_prior,
                v_entropy_neg,
                ..VTerms::default()
            })
        }
    }
}

/// `Σ_j E_q[ln Gamma(x_j | a, b_j)]`.
fn gamma_entropy_neg(a: f64, rates: impl Iterator<Item = f64>) -> f64 {
    let base = (a - 1.0) * digamma_unchecked(a) - a - ln_gamma_unchecked(a);
    rates.map(|b| base + b.ln()).sum()
}

/// `Σ_j E_q[ln Gamma(x_j | a, b_j)]` under a prior with shape `a`, rates `b_j`,
/// where the posterior gives `E[x_j]` and `E[ln x_j]`.
fn gamma_cross(a: f64, rates: impl Iterator<Item = f64>, ex: &[f64], elnx: &[f64]) -> f64 {
    let lg = ln_gamma_unchecked(a);
    rates
        .zip(ex.iter().zip(elnx))
        .map(|(b, (e, l))| a * b.ln() - lg + (a - 1.0) * l - b * e)
        .sum()
}

/// `(E[ln P(W)], E[ln q(W)])`.
pub fn elbo_w_terms(qw: &QW, wm: &WMoments, prior: &PriorConfig, d: usize) -> Result<(f64, f64)> {
    let df = d as f64;
    match (qw, &prior.w_prior) {
        (QW::Wishart { psi, nu }, w_prior) => {
            let logdet_psi = linalg::logdet_spd(psi, "q(W) scale")?;
            let entropy_neg = wishart_log_b_from_logdet(logdet_psi, *nu, d) + 0.5 * (nu - df - 1.0) * wm.logdet
                - 0.5 * nu * df;
            let prior_term = match w_prior {
                WPrior::NonInformative => -0.5 * (df + 1.0) * wm.logdet,
                WPrior::Wishart { psi0, nu: nu0 } => {
                    let f0 = linalg::SpdFactor::new(psi0, "Psi0")?;
                    wishart_log_b_from_logdet(f0.logdet, *nu0, d) + 0.5 * (nu0 - df - 1.0) * wm.logdet
                        - 0.5 * nu * linalg::trace_of_product(&f0.inverse, psi)
                }
                _ => return Err(Error::invalid("Wishart posterior with a Gamma prior")),
            };
            Ok((prior_term, entropy_neg))
        }
        (QW::GammaDiag { a, b }, WPrior::GammaDiagonal { a: a0, b: b0 }) => {
            check_dim("q(W) rates", d, b.len())?;
            let psi = digamma_unchecked(*a);
            let ex: Vec<f64> = b.iter().map(|br| a / br).collect();
            let elnx: Vec<f64> = b.iter().map(|br| psi - br.ln()).collect();
            Ok((
                gamma_cross(*a0, b0.iter().copied(), &ex, &elnx),
                gamma_entropy_neg(*a, b.iter().copied()),
            ))
        }
        (QW::GammaIso { a, b }, WPrior::GammaIsotropic { a: a0, b: b0 }) => {
            let ex = a / b;
            let elnx = digamma_unchecked(*a) - b.ln();
            Ok((
                gamma_cross(*a0, std::iter::once(*b0), &[ex], &[elnx]),
                gamma_entropy_neg(*a, std::iter::once(*b)),
            ))
        }
        _ => Err(Error::invalid("q(W) arm does not match the precision prior")),
    }
}

/// Full bound for a state.
pub fn elbo_total(state: &VariationalState, stats: &SuffStats, prior: &PriorConfig) -> Result<ElboBreakdown> {
    let d = stats.dim();
    check_dim("q(V) rows", d, state.qv.dim())?;
    let wm = expected_w(&state.qw, d)?;
    let agg = y_aggregates(&state.qy, stats)?;
    let vmom = VMoments::compute(&state.qv, &wm.wbar)?;
    let (y_prior, y_entropy_neg) = elbo_y_terms(&state.qy);
    let v = elbo_v_terms(&state.qv, state.qalpha.as_ref(), prior)?;
    let (w_prior, w_entropy_neg) = elbo_w_terms(&state.qw, &wm, prior, d)?;
    ElboBreakdown {
        data_term: elbo_data_term(stats, &agg, &state.qv, &vmom, &wm),
        y_prior,
        y_entropy_neg,
        v_prior: v.v_prior,
        alpha_prior: v.alpha_prior,
        alpha_entropy_neg: v.alpha_entropy_neg,
        mu_prior: v.mu_prior,
        w_prior,
        w_entropy_neg,
        v_entropy_neg: v.v_entropy_neg,
        total: 0.0,
    }
    .finish()
}
