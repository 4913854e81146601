//! SPLDA parameters, prior configurations and the conditional data
//! log-likelihood `ln P(Φ_i | y_i, μ, V, W)` in its equivalent forms.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::data::{CenteredStats, SpeakerStats};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::numerics::LN_2PI;

/// Point parameters `(μ, V, W)` of `φ = μ + V y + ε`, `ε ~ N(0, W⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

impl ModelParams {
    pub fn new(mu: DVector<f64>, v: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        check_dim("loading rows", d, v.nrows())?;
        check_dim("precision rows", d, w.nrows())?;
        check_dim("precision cols", d, w.ncols())?;
        if v.ncols() == 0 {
            return Err(Error::invalid("speaker factor dimension must be >= 1"));
        }
        if (&w - w.transpose()).amax() > 1e-12 * w.amax().max(1.0) {
            return Err(Error::NotPositiveDefinite("within-class precision (asymmetric)".into()));
        }
        linalg::cholesky(&w, "within-class precision")?;
        Ok(ModelParams { mu, v, w })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn ny(&self) -> usize {
        self.v.ncols()
    }

    pub fn augmented(&self) -> AugmentedLoading {
        AugmentedLoading::new(&self.v, &self.mu)
    }
}

/// `Ṽ = [V μ]`, paired with `ỹ = (y, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLoading(DMatrix<f64>);

impl AugmentedLoading {
    pub fn new(v: &DMatrix<f64>, mu: &DVector<f64>) -> Self {
        let mut m = DMatrix::zeros(v.nrows(), v.ncols() + 1);
        m.columns_mut(0, v.ncols()).copy_from(v);
        m.set_column(v.ncols(), mu);
        AugmentedLoading(m)
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.ncols() < 2 {
            return Err(Error::invalid("augmented loading needs at least two columns"));
        }
        Ok(AugmentedLoading(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn ny(&self) -> usize {
        self.0.ncols() - 1
    }

    pub fn loading(&self) -> DMatrix<f64> {
        self.0.columns(0, self.ny()).into_owned()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.0.column(self.ny()).into_owned()
    }
}

/// The seven prior schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Gaussian-Gamma ARD prior on `V`, Gaussian on `μ`, Wishart on `W`.
    WishartInformative,
    /// As above with the improper `|W|^{-(d+1)/2}` prior.
    WishartNonInformative,
    /// ARD prior on `V`, independent Gamma on each diagonal entry of `W`.
    GammaDiagonal,
    /// ARD prior on `V`, `W = w I` with a Gamma prior on `w`.
    GammaIsotropic,
    /// Per-row Gaussian prior on `Ṽ`, Wishart on `W`.
    GaussVWishart,
    /// Per-row Gaussian prior on `Ṽ`, per-row Gamma on diagonal `W`.
    GaussVGammaDiagonal,
    /// Per-row Gaussian prior on `Ṽ`, isotropic Gamma `W`.
    GaussVGammaIsotropic,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::WishartInformative,
        Variant::WishartNonInformative,
        Variant::GammaDiagonal,
        Variant::GammaIsotropic,
        Variant::GaussVWishart,
        Variant::GaussVGammaDiagonal,
        Variant::GaussVGammaIsotropic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::WishartInformative => "V1-Wishart-informative",
            Variant::WishartNonInformative => "V1-Wishart-noninformative",
            Variant::GammaDiagonal => "V2-Gamma-diagonal",
            Variant::GammaIsotropic => "V2-Gamma-isotropic",
            Variant::GaussVWishart => "V3-GaussV-Wishart",
            Variant::GaussVGammaDiagonal => "V4-GaussV-Gamma-diagonal",
            Variant::GaussVGammaIsotropic => "V4-GaussV-Gamma-isotropic",
        }
    }

    pub fn tag(self) -> u8 {
        Variant::ALL.iter().position(|&v| v == self).unwrap() as u8
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Variant::ALL
            .get(tag as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown variant tag {tag}")))
    }

    /// ARD prior on `V` (and hence a `q(α)` factor).
    pub fn has_ard(self) -> bool {
        matches!(
            self,
            Variant::WishartInformative
                | Variant::WishartNonInformative
                | Variant::GammaDiagonal
                | Variant::GammaIsotropic
        )
    }

    pub fn has_wishart(self) -> bool {
        matches!(
            self,
            Variant::WishartInformative | Variant::WishartNonInformative | Variant::GaussVWishart
        )
    }

    pub fn is_isotropic_w(self) -> bool {
        matches!(self, Variant::GammaIsotropic | Variant::GaussVGammaIsotropic)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

/// Gaussian prior `N(mean, precision⁻¹)` on one row of `Ṽ`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowPrior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
}

/// Prior over the loading matrix `Ṽ = [V μ]`.
#[derive(Debug, Clone, PartialEq)]
pub enum VPrior {
    /// `α_q ~ Gamma(a_alpha, b_alpha)`, `v_q | α_q ~ N(0, α_q⁻¹ I)`,
    /// `μ ~ N(mu0, diag(beta)⁻¹)`.
    Ard {
        a_alpha: f64,
        b_alpha: f64,
        mu0: DVector<f64>,
        beta: DVector<f64>,
        beta_isotropic: bool,
    },
    /// Independent full-covariance Gaussian per row.
    Rows(Vec<RowPrior>),
}

/// Prior over the within-class precision `W`.
#[derive(Debug, Clone, PartialEq)]
pub enum WPrior {
    Wishart { psi0: DMatrix<f64>, nu: f64 },
    NonInformative,
    /// One shape and a per-row rate; the diagonal ARD variant keeps every
    /// rate equal.
    GammaDiagonal { a: f64, b: DVector<f64> },
    GammaIsotropic { a: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    pub variant: Variant,
    pub v_prior: VPrior,
    pub w_prior: WPrior,
}

/// Shape and rate of the broad Gamma priors used by default.
pub const BROAD_GAMMA: f64 = 1e-3;

impl PriorConfig {
    /// Broad default priors for an ARD variant: `a = b = 10⁻³` on `α` and on
    /// Gamma `W`, `μ ~ N(0, 10³ I)`, `Ψ₀ = I`, `ν_d = d`.
    pub fn broad(variant: Variant, d: usize) -> Result<Self> {
        if !variant.has_ard() {
            return Err(Error::invalid(format!(
                "{variant} takes its priors from a previously trained model"
            )));
        }
        let v_prior = VPrior::Ard {
            a_alpha: BROAD_GAMMA,
            b_alpha: BROAD_GAMMA,
            mu0: DVector::zeros(d),
            beta: DVector::from_element(d, BROAD_GAMMA),
            beta_isotropic: true,
        };
        let w_prior = match variant {
            Variant::WishartInformative => WPrior::Wishart {
                psi0: DMatrix::identity(d, d),
                nu: d as f64,
            },
            Variant::WishartNonInformative => WPrior::NonInformative,
            Variant::GammaDiagonal => WPrior::GammaDiagonal {
                a: BROAD_GAMMA,
                b: DVector::from_element(d, BROAD_GAMMA),
            },
            _ => WPrior::GammaIsotropic {
                a: BROAD_GAMMA,
                b: BROAD_GAMMA,
            },
        };
        let p = PriorConfig {
            variant,
            v_prior,
            w_prior,
        };
        p.validate(d, None)?;
        Ok(p)
    }

    /// Checks positivity constraints and that the prior arms match the
    /// variant. `ny` is checked against row priors when given.
    pub fn validate(&self, d: usize, ny: Option<usize>) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite and positive, got {x}")))
            }
        };
        match (&self.v_prior, self.variant.has_ard()) {
            (
                VPrior::Ard {
                    a_alpha,
                    b_alpha,
                    mu0,
                    beta,
                    ..
                },
                true,
            ) => {
                positive("a_alpha", *a_alpha)?;
                positive("b_alpha", *b_alpha)?;
                check_dim("mu0", d, mu0.len())?;
                check_dim("beta", d, beta.len())?;
                for &b in beta.iter() {
                    positive("beta", b)?;
                }
            }
            (VPrior::Rows(rows), false) => {
                check_dim("row priors", d, rows.len())?;
                for (r, row) in rows.iter().enumerate() {
                    let k = row.mean.len();
                    if let Some(ny) = ny {
                        check_dim("row prior length", ny + 1, k)?;
                    }
                    check_dim("row prior precision", k, row.precision.nrows())?;
                    check_dim("row prior precision", k, row.precision.ncols())?;
                    linalg::cholesky(&row.precision, &format!("row prior precision {r}"))?;
                }
            }
            _ => {
                return Err(Error::invalid(format!(
                    "loading prior does not match variant {}",
                    self.variant
                )))
            }
        }
        match (&self.w_prior, self.variant) {
            (
                WPrior::Wishart { psi0, nu },
                Variant::WishartInformative | Variant::GaussVWishart,
            ) => {
                check_dim("Psi0", d, psi0.nrows())?;
                check_dim("Psi0", d, psi0.ncols())?;
                if !(nu.is_finite() && *nu > d as f64 - 1.0) {
                    return Err(Error::invalid(format!(
                        "Wishart prior dof must exceed d-1 = {}, got {nu}",
                        d - 1
                    )));
                }
                linalg::cholesky(psi0, "Psi0")?;
            }
            (WPrior::NonInformative, Variant::WishartNonInformative) => {}
            (
                WPrior::GammaDiagonal { a, b },
                Variant::GammaDiagonal | Variant::GaussVGammaDiagonal,
            ) => {
                positive("a_w", *a)?;
                check_dim("b_w", d, b.len())?;
                for &x in b.iter() {
                    positive("b_w", x)?;
                }
            }
            (
                WPrior::GammaIsotropic { a, b },
                Variant::GammaIsotropic | Variant::GaussVGammaIsotropic,
            ) => {
                positive("a_w", *a)?;
                positive("b_w", *b)?;
            }
            _ => {
                return Err(Error::invalid(format!(
                    "precision prior does not match variant {}",
                    self.variant
                )))
            }
        }
        Ok(())
    }
}

fn ln_det_w_over_2pi(w: &DMatrix<f64>) -> Result<f64> {
    let d = w.nrows() as f64;
    Ok(linalg::logdet_spd(w, "within-class precision")? - d * LN_2PI)
}

/// Centered form:
/// `(N_i/2) ln|W/2π| − ½ tr(W S̄_i) + yᵀVᵀW F̄_i − (N_i/2) yᵀVᵀWV y`.
pub fn conditional_loglik(
    stats: &CenteredStats,
    speaker: usize,
    count: f64,
    y: &DVector<f64>,
    params: &ModelParams,
) -> Result<f64> {
    check_dim("speaker factor", params.ny(), y.len())?;
    let f = stats
        .first
        .get(speaker)
        .ok_or_else(|| Error::invalid(format!("no statistics for speaker {speaker}")))?;
    let s = &stats.second[speaker];
    check_dim("centered statistics", params.dim(), f.len())?;
    let w = &params.w;
    let vy = &params.v * y;
    let lead = 0.5 * count * ln_det_w_over_2pi(w)?;
    Ok(lead - 0.5 * linalg::trace_of_product(w, s) + vy.dot(&(w * f))
        - 0.5 * count * vy.dot(&(w * &vy)))
}

/// Augmented form on raw statistics:
/// `(N_i/2) ln|W/2π| − ½ tr(W S_i) + ỹᵀṼᵀW F_i − (N_i/2) ỹᵀṼᵀWṼỹ`.
pub fn conditional_loglik_augmented(
    stats: &SpeakerStats,
    ytilde: &DVector<f64>,
    vtilde: &AugmentedLoading,
    w: &DMatrix<f64>,
) -> Result<f64> {
    check_dim("augmented factor", vtilde.ny() + 1, ytilde.len())?;
    check_dim("statistics", vtilde.matrix().nrows(), stats.first.len())?;
    if ytilde[ytilde.len() - 1] != 1.0 {
        return Err(Error::invalid("last entry of the augmented factor must be 1"));
    }
    if stats.count == 0.0 {
        return Ok(0.0);
    }
    let m = vtilde.matrix() * ytilde;
    let lead = 0.5 * stats.count * ln_det_w_over_2pi(w)?;
    Ok(lead - 0.5 * linalg::trace_of_product(w, &stats.second) + m.dot(&(w * &stats.first))
        - 0.5 * stats.count * m.dot(&(w * &m)))
}

/// Sum of per-observation Gaussian log-densities.
pub fn conditional_loglik_direct(
    rows: &[DVector<f64>],
    y: &DVector<f64>,
    params: &ModelParams,
) -> Result<f64> {
    let mean = &params.mu + &params.v * y;
    let lead = 0.5 * ln_det_w_over_2pi(&params.w)?;
    Ok(rows
        .iter()
        .map(|x| {
            let e = x - &mean;
            lead - 0.5 * e.dot(&(&params.w * &e))
        })
        .sum())
}

/// Trace form on raw statistics with `μ` and `V` kept apart:
/// `(N_i/2) ln|W/2π| − ½ tr(W(S_i − 2F_iμᵀ + N_iμμᵀ − 2(F_i − N_iμ)yᵀVᵀ + N_i V y yᵀVᵀ))`.
pub fn conditional_loglik_trace(
    stats: &SpeakerStats,
    y: &DVector<f64>,
    params: &ModelParams,
) -> Result<f64> {
    let n = stats.count;
    let mu = &params.mu;
    let vy = &params.v * y;
    let mut inner = stats.second.clone();
    inner.ger(-2.0, &stats.first, mu, 1.0);
    inner.ger(n, mu, mu, 1.0);
    let centered = &stats.first - mu * n;
    inner.ger(-2.0, &centered, &vy, 1.0);
    inner.ger(n, &vy, &vy, 1.0);
    Ok(0.5 * n * ln_det_w_over_2pi(&params.w)? - 0.5 * linalg::trace_of_product(&params.w, &inner))
}

/// Augmented trace form:
/// `(N_i/2) ln|W/2π| − ½ tr(W(S_i − 2F_iỹᵀṼᵀ + N_i Ṽỹỹᵀ Ṽᵀ))`.
pub fn conditional_loglik_augmented_trace(
    stats: &SpeakerStats,
    ytilde: &DVector<f64>,
    vtilde: &AugmentedLoading,
    w: &DMatrix<f64>,
) -> Result<f64> {
    let n = stats.count;
    let m = vtilde.matrix() * ytilde;
    let mut inner = stats.second.clone();
    inner.ger(-2.0, &stats.first, &m, 1.0);
    inner.ger(n, &m, &m, 1.0);
    Ok(0.5 * n * ln_det_w_over_2pi(w)? - 0.5 * linalg::trace_of_product(w, &inner))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::center;
    use crate::data::SuffStats;

    fn scalar_params(v: f64) -> ModelParams {
        ModelParams::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, v),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn one_obs(x: f64) -> SuffStats {
        let mut s = SpeakerStats::zeros(1);
        s.push(&DVector::from_element(1, x));
        SuffStats::from_speakers(vec![s], 1)
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = scalar_params(0.0);
        let st = one_obs(0.0);
        let c = center(&st, &p.mu).unwrap();
        let ll = conditional_loglik(&c, 0, 1.0, &DVector::from_element(1, 3.7), &p).unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn zero_residual() {
        let p = scalar_params(1.0);
        let st = one_obs(1.0);
        let c = center(&st, &p.mu).unwrap();
        let ll = conditional_loglik(&c, 0, 1.0, &DVector::from_element(1, 1.0), &p).unwrap();
        assert!((ll + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn augmented_edge_cases() {
        let p = ModelParams::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 1, &[0.5, -1.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let mut s = SpeakerStats::zeros(2);
        s.push(&DVector::from_vec(vec![0.2, 1.1]));
        s.push(&DVector::from_vec(vec![-0.4, 0.3]));
        let yt = DVector::from_vec(vec![0.0, 1.0]);
        let aug = conditional_loglik_augmented(&s, &yt, &p.augmented(), &p.w).unwrap();
        let c = center(&SuffStats::from_speakers(vec![s.clone()], 2), &p.mu).unwrap();
        let cen = conditional_loglik(&c, 0, 2.0, &DVector::zeros(1), &p).unwrap();
        assert!((aug - cen).abs() < 1e-12);

        let empty = SpeakerStats::zeros(2);
        assert_eq!(conditional_loglik_augmented(&empty, &yt, &p.augmented(), &p.w).unwrap(), 0.0);

        let bad = DVector::from_vec(vec![0.0, 0.5]);
        assert!(conditional_loglik_augmented(&s, &bad, &p.augmented(), &p.w).is_err());
    }

    #[test]
    fn non_pd_precision_rejected() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelParams::new(DVector::zeros(2), DMatrix::zeros(2, 1), w).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_tag(v.tag()).unwrap(), v);
        }
        assert!("V5".parse::<Variant>().is_err());
    }

    #[test]
    fn prior_arms_must_match_variant() {
        let mut p = PriorConfig::broad(Variant::GammaDiagonal, 3).unwrap();
        p.w_prior = WPrior::NonInformative;
        assert!(p.validate(3, None).is_err());
        assert!(PriorConfig::broad(Variant::GaussVWishart, 3).is_err());
        let mut p = PriorConfig::broad(Variant::WishartInformative, 3).unwrap();
        p.w_prior = WPrior::Wishart {
            psi0: DMatrix::identity(3, 3),
            nu: 1.5,
        };
        assert!(p.validate(3, None).is_err());
    }
}
