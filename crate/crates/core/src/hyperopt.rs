//! Empirical-Bayes updates of the prior hyperparameters.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::model::Variant;
use crate::numerics::solve_gamma_shape;
use crate::posterior::QVtilde;

pub const BETA_MIN: f64 = 1e-8;
pub const BETA_MAX: f64 = 1e12;

/// Shape and rate maximizing `Σ_j E[ln Gamma(x_j | a, b)]` given the
/// posterior moments `E[ln x_j]`, `E[x_j]`.
fn gamma_hyper(eln: &[f64], e: &[f64], a_init: f64) -> Result<(f64, f64)> {
    if eln.is_empty() || eln.len() != e.len() {
        return Err(Error::invalid("gamma hyperparameter moments must be non-empty and aligned"));
    }
    let n = eln.len() as f64;
    let c = eln.iter().sum::<f64>() / n;
    let d_mean = e.iter().sum::<f64>() / n;
    let a = solve_gamma_shape(c, d_mean, a_init)?;
    Ok((a, a / d_mean))
}

pub fn optimize_alpha_hyper(elnalpha: &DVector<f64>, ealpha: &DVector<f64>, a_alpha: f64) -> Result<(f64, f64)> {
    gamma_hyper(elnalpha.as_slice(), ealpha.as_slice(), a_alpha)
}

/// `(a_w, b_w)` for the Gamma precision arms. Isotropic variants pass a
/// single moment pair.
pub fn optimize_w_hyper(elnw: &DVector<f64>, ew: &DVector<f64>, a_w: f64, variant: Variant) -> Result<(f64, f64)> {
    match variant {
        Variant::GammaDiagonal | Variant::GaussVGammaDiagonal => {}
        Variant::GammaIsotropic | Variant::GaussVGammaIsotropic => check_dim("isotropic moments", 1, elnw.len())?,
        _ => return Err(Error::invalid(format!("{variant} has no Gamma precision prior"))),
    }
    gamma_hyper(elnw.as_slice(), ew.as_slice(), a_w)
}

/// `μ₀ = E[μ]`, `β_r⁻¹ = Var[μ_r]` (averaged over rows when isotropic),
/// clamped to `[BETA_MIN, BETA_MAX]`.
pub fn optimize_mu_prior(qv: &QVtilde, isotropic: bool) -> (DVector<f64>, DVector<f64>) {
    let mu0 = qv.mu_mean();
    let var = qv.mu_variance();
    let clamp = |v: f64| (1.0 / v).clamp(BETA_MIN, BETA_MAX);
    let beta = if isotropic {
        DVector::from_element(var.len(), clamp(var.mean()))
    } else {
        var.map(clamp)
    };
    (mu0, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::digamma;
    use nalgebra::DMatrix;

    fn moments(a: f64, b: f64, n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, digamma(a).unwrap() - b.ln()),
            DVector::from_element(n, a / b),
        )
    }

    #[test]
    fn alpha_recovers_generating_gamma() {
        let (l, e) = moments(3.0, 2.0, 4);
        let (a, b) = optimize_alpha_hyper(&l, &e, 1.0).unwrap();
        assert!((a - 3.0).abs() < 1e-9 && (b - 2.0).abs() < 1e-9);
        let (l, e) = moments(1.0, 1.0, 2);
        let (a, b) = optimize_alpha_hyper(&l, &e, 0.1).unwrap();
        assert!((a - 1.0).abs() < 1e-9 && (b - 1.0).abs() < 1e-9);
    }

    #[test]
    fn w_recovers_and_gates_variant() {
        let (l, e) = moments(2.0, 5.0, 3);
        let (a, b) = optimize_w_hyper(&l, &e, 1.0, Variant::GammaDiagonal).unwrap();
        assert!((a - 2.0).abs() < 1e-9 && (b - 5.0).abs() < 1e-9);
        let (l, e) = moments(7.0, 1.0, 1);
        let (a, b) = optimize_w_hyper(&l, &e, 1.0, Variant::GammaIsotropic).unwrap();
        assert!((a - 7.0).abs() < 1e-8 && (b - 1.0).abs() < 1e-8);
        assert!(optimize_w_hyper(&l, &e, 1.0, Variant::WishartInformative).is_err());
    }

    #[test]
    fn mixed_columns_are_a_local_maximum() {
        let l = DVector::from_vec(vec![-0.3, 0.8, -2.0]);
        let e = DVector::from_vec(vec![1.2, 3.0, 0.4]);
        let (a, b) = optimize_alpha_hyper(&l, &e, 1.0).unwrap();
        let obj = |a: f64, b: f64| -> f64 {
            let lg = crate::numerics::ln_gamma(a).unwrap();
            l.iter().zip(e.iter()).map(|(l, e)| a * b.ln() - lg + (a - 1.0) * l - b * e).sum()
        };
        let best = obj(a, b);
        for (da, db) in [(1.01, 1.0), (0.99, 1.0), (1.0, 1.01), (1.0, 0.99)] {
            assert!(obj(a * da, b * db) <= best);
        }
    }

    #[test]
    fn mu_prior_caps_degenerate_variance() {
        let rows = vec![
            crate::posterior::Gaussian::new(DVector::from_vec(vec![0.0, 2.0]), &DMatrix::identity(2, 2), "r").unwrap(),
            crate::posterior::Gaussian::new(DVector::from_vec(vec![0.0, -1.0]), &(DMatrix::identity(2, 2) * 1e20), "r")
                .unwrap(),
        ];
        let qv = QVtilde::from_rows(rows).unwrap();
        let (mu0, beta) = optimize_mu_prior(&qv, false);
        assert_eq!(mu0.as_slice(), &[2.0, -1.0]);
        assert!((beta[0] - 1.0).abs() < 1e-14);
        assert_eq!(beta[1], BETA_MAX);
    }
}
