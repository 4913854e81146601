//! Coordinate-ascent updates and the outer fit loop.
//!
//! Every update is the exact maximizer of the bound in its factor given the
//! others, so the bound never decreases between sweeps with fixed
//! hyperparameters and `κ = 1`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::{accumulate, Dataset, SpeakerPartition, SuffStats};
use crate::elbo::{elbo_data_term, elbo_total, elbo_y_terms, ElboBreakdown};
use crate::error::{check_dim, Error, Result};
use crate::hyperopt;
use crate::linalg::{self, SpdFactor};
use crate::model::{ModelParams, PriorConfig, VPrior, Variant, WPrior};
use crate::posterior::{
    expected_alpha, expected_vrvt, expected_w, y_aggregates, Gaussian, QAlpha, QVtilde, VMoments, WMoments,
    YAggregates, QW, QY,
};
use crate::synth::SplitMix64;

/// `q(Y) q(Ṽ) q(W) q(α)`; `qalpha` is present exactly for the ARD variants.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub variant: Variant,
    pub qy: QY,
    pub qv: QVtilde,
    pub qw: QW,
    pub qalpha: Option<QAlpha>,
    pub iteration: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealStep {
    pub kappa: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub ny: usize,
    pub max_iterations: usize,
    pub elbo_rel_tol: f64,
    /// Run in order; `κ = 1` once exhausted.
    pub annealing: Vec<AnnealStep>,
    /// Every k-th iteration; 0 disables.
    pub hyperopt_every: usize,
    /// Every k-th iteration; 0 disables.
    pub mindiv_every: usize,
    pub seed: u64,
    /// Rotate the data onto the within-class eigenbasis (V2 variants only).
    pub whiten: bool,
    /// Use this rotation instead of estimating one, e.g. when adapting a
    /// whitened model.
    pub rotation: Option<DMatrix<f64>>,
}

impl FitConfig {
    pub fn new(ny: usize) -> Self {
        FitConfig {
            ny,
            max_iterations: 500,
            elbo_rel_tol: 1e-7,
            annealing: Vec::new(),
            hyperopt_every: 0,
            mindiv_every: 0,
            seed: 0,
            whiten: false,
            rotation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ny == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if !(self.elbo_rel_tol.is_finite() && self.elbo_rel_tol > 0.0) {
            return Err(Error::invalid("ELBO tolerance must be positive"));
        }
        for s in &self.annealing {
            if !(s.kappa > 0.0 && s.kappa <= 1.0) {
                return Err(Error::invalid(format!("annealing kappa {} outside (0, 1]", s.kappa)));
            }
        }
        Ok(())
    }

    /// `κ` used at 1-based iteration `t`.
    pub fn kappa_at(&self, t: usize) -> f64 {
        let mut end = 0;
        for s in &self.annealing {
            end += s.iterations;
            if t <= end {
                return s.kappa;
            }
        }
        1.0
    }

    fn annealing_len(&self) -> usize {
        self.annealing.iter().map(|s| s.iterations).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Bound after initialization and the first `q(Y)` update.
    pub initial: ElboBreakdown,
    /// One entry per iteration performed.
    pub trace: Vec<ElboBreakdown>,
    /// `κ` used at each iteration.
    pub kappas: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `E[α_q]`, ARD variants only.
    pub expected_alpha: Option<DVector<f64>>,
    /// Columns with `E[α_q]` below ten times the prior mean of `α`.
    pub effective_rank: Option<usize>,
}

impl FitReport {
    pub fn final_elbo(&self) -> &ElboBreakdown {
        self.trace.last().unwrap_or(&self.initial)
    }
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub state: VariationalState,
    pub params: ModelParams,
    pub report: FitReport,
    /// Prior after any hyperparameter updates.
    pub prior: PriorConfig,
    /// Whitening rotation `U`; the state lives in the rotated space `Uᵀφ`.
    pub rotation: Option<DMatrix<f64>>,
}

fn anneal_gaussian(g: Gaussian, kappa: f64) -> Result<Gaussian> {
    if kappa == 1.0 {
        return Ok(g);
    }
    Gaussian::new(g.mean().clone(), &(g.precision() * kappa), "annealed precision")
}

fn anneal_gamma(a: f64, kappa: f64) -> f64 {
    kappa * (a - 1.0) + 1.0
}

fn anneal_qw(qw: QW, kappa: f64, d: usize) -> Result<QW> {
    if kappa == 1.0 {
        return Ok(qw);
    }
    Ok(match qw {
        QW::Wishart { psi, nu } => {
            let excess = kappa * (nu - d as f64 - 1.0);
            if excess + 1.0 <= 0.0 {
                return Err(Error::Domain {
                    function: "anneal_qw",
                    value: kappa,
                    reason: "annealed Wishart needs kappa(nu-d-1)+1 > 0",
                });
            }
            QW::Wishart {
                psi: psi / kappa,
                nu: excess + d as f64 + 1.0,
            }
        }
        QW::GammaDiag { a, b } => QW::GammaDiag {
            a: anneal_gamma(a, kappa),
            b: b * kappa,
        },
        QW::GammaIso { a, b } => QW::GammaIso {
            a: anneal_gamma(a, kappa),
            b: b * kappa,
        },
    })
}

fn anneal_qalpha(qa: QAlpha, kappa: f64) -> QAlpha {
    if kappa == 1.0 {
        return qa;
    }
    QAlpha {
        a: anneal_gamma(qa.a, kappa),
        b: qa.b * kappa,
    }
}

/// Tempers every factor of a state computed at `κ = 1`.
pub fn apply_annealing(state: &VariationalState, kappa: f64) -> Result<VariationalState> {
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(Error::invalid(format!("annealing kappa {kappa} outside (0, 1]")));
    }
    if kappa == 1.0 {
        return Ok(state.clone());
    }
    let qy = QY::from_gaussians(
        state
            .qy
            .speakers()
            .iter()
            .map(|g| anneal_gaussian(g.clone(), kappa))
            .collect::<Result<_>>()?,
        state.qy.ny(),
    );
    let qv = QVtilde::from_rows(
        state
            .qv
            .rows()
            .iter()
            .map(|g| anneal_gaussian(g.clone(), kappa))
            .collect::<Result<_>>()?,
    )?;
    Ok(VariationalState {
        qy,
        qv,
        qw: anneal_qw(state.qw.clone(), kappa, state.qv.dim())?,
        qalpha: state.qalpha.clone().map(|q| anneal_qalpha(q, kappa)),
        kappa,
        ..state.clone()
    })
}

/// `L_yi = I + N_i E[VᵀWV]`, `ȳ_i = L_yi⁻¹(V̄ᵀW̄F_i − N_i E[VᵀWμ])`.
pub fn update_qy(stats: &SuffStats, qv: &QVtilde, wm: &WMoments, kappa: f64) -> Result<QY> {
    check_dim("q(V) rows", stats.dim(), qv.dim())?;
    let ny = qv.ny();
    let vm = VMoments::compute(qv, &wm.wbar)?;
    let evtwv = vm.evtwv();
    let evtwmu = vm.evtwmu();
    let vtw = qv.loading_mean().transpose() * &wm.wbar;
    let eye = DMatrix::<f64>::identity(ny, ny);
    let speakers = stats
        .speakers
        .iter()
        .map(|s| {
            let l = &eye + &evtwv * s.count;
            let rhs = &vtw * &s.first - &evtwmu * s.count;
            let f = SpdFactor::with_retry(&l, "q(y) precision")?;
            let mean = f.solve(&rhs);
            anneal_gaussian(Gaussian::from_factor(mean, f), kappa)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QY::from_gaussians(speakers, ny))
}

/// Prior precision `P_r` and natural mean `P_r m_r` of each row.
fn row_priors(prior: &PriorConfig, qalpha: Option<&QAlpha>, d: usize, ny: usize) -> Result<Vec<(DMatrix<f64>, DVector<f64>)>> {
    match &prior.v_prior {
        VPrior::Ard { mu0, beta, .. } => {
            let qa = qalpha.ok_or_else(|| Error::invalid("ARD prior needs q(alpha)"))?;
            check_dim("q(alpha) rates", ny, qa.b.len())?;
            let (ea, _) = expected_alpha(qa);
            Ok((0..d)
                .map(|r| {
                    let mut diag = DVector::zeros(ny + 1);
                    diag.rows_mut(0, ny).copy_from(&ea);
                    diag[ny] = beta[r];
                    let mut h = DVector::zeros(ny + 1);
                    h[ny] = beta[r] * mu0[r];
                    (DMatrix::from_diagonal(&diag), h)
                })
                .collect())
        }
        VPrior::Rows(rows) => {
            check_dim("row priors", d, rows.len())?;
            rows.iter()
                .map(|p| {
                    check_dim("row prior length", ny + 1, p.mean.len())?;
                    Ok((p.precision.clone(), &p.precision * &p.mean))
                })
                .collect()
        }
    }
}

fn update_rows(
    agg: &YAggregates,
    wbar: &DMatrix<f64>,
    prior: &PriorConfig,
    current: &QVtilde,
    qalpha: Option<&QAlpha>,
    kappa: f64,
    coupled: bool,
) -> Result<QVtilde> {
    let d = current.dim();
    let ny = current.ny();
    check_dim("W mean", d, wbar.nrows())?;
    check_dim("C rows", d, agg.c.nrows())?;
    check_dim("C columns", ny + 1, agg.c.ncols())?;
    let priors = row_priors(prior, qalpha, d, ny)?;
    let mut out = current.clone();
    for (r, (p, h)) in priors.into_iter().enumerate() {
        let w_rr = wbar[(r, r)];
        let l = p + &agg.r_ytilde * w_rr;
        let mut rhs = h + agg.c.row(r).transpose() * w_rr;
        if coupled {
            let mut cross = DVector::zeros(ny + 1);
            for s in (0..d).filter(|&s| s != r) {
                let w_rs = wbar[(r, s)];
                if w_rs != 0.0 {
                    rhs += agg.c.row(s).transpose() * w_rs;
                    cross += out.mean().row(s).transpose() * w_rs;
                }
            }
            rhs -= &agg.r_ytilde * cross;
        }
        let f = SpdFactor::with_retry(&l, "q(v) precision")?;
        let mean = f.solve(&rhs);
        out.replace_row(r, anneal_gaussian(Gaussian::from_factor(mean, f), kappa)?);
    }
    Ok(out)
}

/// Gauss-Seidel sweep over rows in ascending order, full `W̄` (V1, V3).
pub fn update_qvtilde_coupled(
    agg: &YAggregates,
    wbar: &DMatrix<f64>,
    prior: &PriorConfig,
    current: &QVtilde,
    qalpha: Option<&QAlpha>,
    kappa: f64,
) -> Result<QVtilde> {
    update_rows(agg, wbar, prior, current, qalpha, kappa, true)
}

/// Independent rows, diagonal `W̄` (V2, V4).
pub fn update_qvtilde_factored(
    agg: &YAggregates,
    wbar: &DMatrix<f64>,
    prior: &PriorConfig,
    current: &QVtilde,
    qalpha: Option<&QAlpha>,
    kappa: f64,
) -> Result<QVtilde> {
    update_rows(agg, wbar, prior, current, qalpha, kappa, false)
}

/// `a′ = a_α + d/2`, `b′_q = b_α + ½E[v_qᵀv_q]`.
pub fn update_qalpha(qv: &QVtilde, prior: &PriorConfig, kappa: f64) -> Result<QAlpha> {
    let VPrior::Ard { a_alpha, b_alpha, .. } = &prior.v_prior else {
        return Err(Error::invalid("q(alpha) exists only under the ARD prior"));
    };
    let ny = qv.ny();
    let mut sq = DVector::<f64>::zeros(ny);
    for g in qv.rows() {
        for q in 0..ny {
            sq[q] += g.covariance()[(q, q)] + g.mean()[q] * g.mean()[q];
        }
    }
    let qa = QAlpha {
        a: a_alpha + 0.5 * qv.dim() as f64,
        b: sq.map(|s| b_alpha + 0.5 * s),
    };
    Ok(anneal_qalpha(qa, kappa))
}

/// `K = S − C V̄̃ᵀ − V̄̃ Cᵀ + E[Ṽ R̃ Ṽᵀ]`.
pub fn residual_scatter(stats: &SuffStats, agg: &YAggregates, qv: &QVtilde) -> Result<DMatrix<f64>> {
    let cv = &agg.c * qv.mean().transpose();
    let k = linalg::symmetrize(&(&stats.second - &cv - cv.transpose() + expected_vrvt(qv, &agg.r_ytilde)?));
    let norm = k.norm();
    if norm > 0.0 {
        let min = SymmetricEigen::new(k.clone()).eigenvalues.min();
        if min < -1e-8 * norm {
            return Err(Error::NotPositiveDefinite(format!(
                "residual scatter K (eigenvalue {min:e})"
            )));
        }
    }
    Ok(k)
}

pub fn update_qw(stats: &SuffStats, agg: &YAggregates, qv: &QVtilde, prior: &PriorConfig, kappa: f64) -> Result<QW> {
    let d = stats.dim();
    let n = stats.count;
    let k = residual_scatter(stats, agg, qv)?;
    let qw = match &prior.w_prior {
        WPrior::NonInformative => {
            if n <= d as f64 {
                return Err(Error::invalid(format!(
                    "non-informative Wishart prior requires N > d (N = {n}, d = {d})"
                )));
            }
            QW::Wishart {
                psi: SpdFactor::with_retry(&k, "residual scatter K")?.inverse,
                nu: n,
            }
        }
        WPrior::Wishart { psi0, nu } => {
            let p0 = linalg::inverse_spd(psi0, "Psi0")?;
            QW::Wishart {
                psi: SpdFactor::with_retry(&(p0 + k), "q(W) inverse scale")?.inverse,
                nu: nu + n,
            }
        }
        WPrior::GammaDiagonal { a, b } => QW::GammaDiag {
            a: a + 0.5 * n,
            b: DVector::from_fn(d, |r, _| b[r] + 0.5 * k[(r, r)].max(0.0)),
        },
        WPrior::GammaIsotropic { a, b } => QW::GammaIso {
            a: a + 0.5 * n * d as f64,
            b: b + 0.5 * k.trace().max(0.0),
        },
    };
    anneal_qw(qw, kappa, d)
}

/// Re-standardizes the pooled latent posterior to zero mean and identity
/// second moment, moving `(μ_y, Σ_y)` into the loading rows.
pub fn minimum_divergence(qy: &QY, qv: &QVtilde) -> Result<(QY, QVtilde)> {
    let m = qy.len();
    if m < 2 {
        return Err(Error::invalid("minimum divergence needs at least two speakers"));
    }
    let ny = qy.ny();
    check_dim("q(V) latent size", ny, qv.ny())?;
    let mut mu_y = DVector::zeros(ny);
    let mut second = DMatrix::zeros(ny, ny);
    for g in qy.speakers() {
        mu_y += g.mean();
        second += g.second_moment();
    }
    mu_y /= m as f64;
    second /= m as f64;
    let sigma = linalg::symmetrize(&(second - &mu_y * mu_y.transpose()));
    let lc = linalg::cholesky(&sigma, "pooled latent covariance")?.l();
    let lc_inv = lc
        .clone()
        .solve_lower_triangular(&DMatrix::identity(ny, ny))
        .ok_or_else(|| Error::NotPositiveDefinite("pooled latent covariance".into()))?;

    // ỹ = J ỹ′ with J = [[Lc, μ_y], [0, 1]]
    let mut j = DMatrix::identity(ny + 1, ny + 1);
    j.view_mut((0, 0), (ny, ny)).copy_from(&lc);
    j.view_mut((0, ny), (ny, 1)).copy_from(&mu_y);
    let mut j_inv = DMatrix::identity(ny + 1, ny + 1);
    j_inv.view_mut((0, 0), (ny, ny)).copy_from(&lc_inv);
    j_inv.view_mut((0, ny), (ny, 1)).copy_from(&(-(&lc_inv * &mu_y)));

    let rows = qv
        .rows()
        .iter()
        .map(|g| {
            Gaussian::new(
                j.transpose() * g.mean(),
                &(&j_inv * g.precision() * j_inv.transpose()),
                "transformed q(v) precision",
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let speakers = qy
        .speakers()
        .iter()
        .map(|g| {
            Gaussian::new(
                &lc_inv * (g.mean() - &mu_y),
                &(lc.transpose() * g.precision() * &lc),
                "transformed q(y) precision",
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((QY::from_gaussians(speakers, ny), QVtilde::from_rows(rows)?))
}

fn gaussian_identity(mean: DVector<f64>) -> Gaussian {
    let k = mean.len();
    Gaussian::new(mean, &DMatrix::identity(k, k), "identity").expect("identity is positive definite")
}

/// Starting point of the fit; `q(Y)` is left at its prior.
pub fn initialize(stats: &SuffStats, prior: &PriorConfig, ny: usize, seed: u64) -> Result<VariationalState> {
    let d = stats.dim();
    let n = stats.count;
    let variant = prior.variant;
    let qy = QY::prior(stats.num_speakers(), ny);
    match &prior.v_prior {
        VPrior::Rows(rows) => {
            let qv = QVtilde::new(
                rows.iter().map(|r| r.mean.clone()).collect(),
                rows.iter().map(|r| r.precision.clone()).collect(),
            )?;
            check_dim("row prior length", ny + 1, qv.ny() + 1)?;
            let qw = match &prior.w_prior {
                WPrior::Wishart { psi0, nu } => QW::Wishart {
                    psi: psi0.clone(),
                    nu: *nu,
                },
                WPrior::GammaDiagonal { a, b } => QW::GammaDiag { a: *a, b: b.clone() },
                WPrior::GammaIsotropic { a, b } => QW::GammaIso { a: *a, b: *b },
                WPrior::NonInformative => {
                    return Err(Error::invalid("row priors need a proper precision prior"))
                }
            };
            Ok(VariationalState {
                variant,
                qy,
                qv,
                qw,
                qalpha: None,
                iteration: 0,
                kappa: 1.0,
            })
        }
        VPrior::Ard { a_alpha, b_alpha, .. } => {
            if n <= 0.0 {
                return Err(Error::invalid("training needs at least one vector"));
            }
            if matches!(prior.w_prior, WPrior::NonInformative) && n <= d as f64 {
                return Err(Error::invalid(format!(
                    "non-informative Wishart prior requires N > d (N = {n}, d = {d})"
                )));
            }
            let mean = stats.mean();
            let total = linalg::symmetrize(&((&stats.second - &mean * mean.transpose() * n) / n));
            let mut sw = stats.within_scatter() / n;
            if sw.trace() <= 1e-3 * total.trace() {
                sw = total.clone();
            }
            if total.trace() <= 0.0 {
                // a single distinct vector: no scale information at all
                sw = DMatrix::identity(d, d);
            }
            let jitter = 1e-6 * sw.trace().max(total.trace()) / d as f64;
            for r in 0..d {
                sw[(r, r)] += jitter;
            }
            let scale = 0.5 * (total.trace().max(0.0) / (d * ny) as f64).sqrt();
            let mut rng = SplitMix64::new(seed);
            let rows = (0..d)
                .map(|r| {
                    let mut m = DVector::zeros(ny + 1);
                    for q in 0..ny {
                        m[q] = scale * rng.next_normal();
                    }
                    m[ny] = mean[r];
                    gaussian_identity(m)
                })
                .collect();
            let qv = QVtilde::from_rows(rows)?;
            let qw = match &prior.w_prior {
                WPrior::NonInformative => QW::Wishart {
                    psi: linalg::inverse_spd(&sw, "within-class covariance")? / n,
                    nu: n,
                },
                WPrior::Wishart { nu, .. } => QW::Wishart {
                    psi: linalg::inverse_spd(&sw, "within-class covariance")? / (nu + n),
                    nu: nu + n,
                },
                WPrior::GammaDiagonal { a, .. } => {
                    let a = a + 0.5 * n;
                    QW::GammaDiag {
                        a,
                        b: DVector::from_fn(d, |r, _| a * sw[(r, r)]),
                    }
                }
                WPrior::GammaIsotropic { a, .. } => {
                    let a = a + 0.5 * n * d as f64;
                    QW::GammaIso {
                        a,
                        b: a * sw.trace() / d as f64,
                    }
                }
            };
            Ok(VariationalState {
                variant,
                qy,
                qv,
                qw,
                qalpha: Some(QAlpha::new(*a_alpha, DVector::from_element(ny, *b_alpha))?),
                iteration: 0,
                kappa: 1.0,
            })
        }
    }
}

fn is_coupled(variant: Variant) -> bool {
    matches!(
        variant,
        Variant::WishartInformative | Variant::WishartNonInformative | Variant::GaussVWishart
    )
}

/// One sweep `q(Ṽ) → q(W) → q(α) → q(Y)` at temperature `κ`.
pub fn sweep(state: &mut VariationalState, stats: &SuffStats, prior: &PriorConfig, kappa: f64) -> Result<()> {
    let d = stats.dim();
    let wm = expected_w(&state.qw, d)?;
    let agg = y_aggregates(&state.qy, stats)?;
    state.qv = if is_coupled(state.variant) {
        update_qvtilde_coupled(&agg, &wm.wbar, prior, &state.qv, state.qalpha.as_ref(), kappa)?
    } else {
        update_qvtilde_factored(&agg, &wm.wbar, prior, &state.qv, state.qalpha.as_ref(), kappa)?
    };
    state.qw = update_qw(stats, &agg, &state.qv, prior, kappa)?;
    if state.variant.has_ard() {
        state.qalpha = Some(update_qalpha(&state.qv, prior, kappa)?);
    }
    let wm = expected_w(&state.qw, d)?;
    state.qy = update_qy(stats, &state.qv, &wm, kappa)?;
    state.kappa = kappa;
    Ok(())
}

/// Empirical-Bayes step on the hyperparameters the variant exposes.
pub fn optimize_hyperparameters(state: &VariationalState, prior: &PriorConfig) -> Result<PriorConfig> {
    let mut out = prior.clone();
    if let (
        VPrior::Ard {
            a_alpha,
            b_alpha,
            mu0,
            beta,
            beta_isotropic,
        },
        Some(qa),
    ) = (&mut out.v_prior, state.qalpha.as_ref())
    {
        let (ea, ela) = expected_alpha(qa);
        (*a_alpha, *b_alpha) = hyperopt::optimize_alpha_hyper(&ela, &ea, *a_alpha)?;
        (*mu0, *beta) = hyperopt::optimize_mu_prior(&state.qv, *beta_isotropic);
    }
    match (&mut out.w_prior, &state.qw, state.variant) {
        (WPrior::GammaDiagonal { a, b }, QW::GammaDiag { a: aq, b: bq }, Variant::GammaDiagonal) => {
            let psi = crate::numerics::digamma(*aq)?;
            let eln = bq.map(|x| psi - x.ln());
            let e = bq.map(|x| aq / x);
            let (na, nb) = hyperopt::optimize_w_hyper(&eln, &e, *a, state.variant)?;
            *a = na;
            b.fill(nb);
        }
        (WPrior::GammaIsotropic { a, b }, QW::GammaIso { a: aq, b: bq }, Variant::GammaIsotropic) => {
            let eln = DVector::from_element(1, crate::numerics::digamma(*aq)? - bq.ln());
            let e = DVector::from_element(1, aq / bq);
            (*a, *b) = hyperopt::optimize_w_hyper(&eln, &e, *a, state.variant)?;
        }
        _ => {}
    }
    Ok(out)
}

/// Eigenvectors of the within-class covariance.
pub fn whitening_rotation(stats: &SuffStats) -> Result<DMatrix<f64>> {
    if stats.count <= 0.0 {
        return Err(Error::invalid("whitening needs data"));
    }
    let sw = stats.within_scatter() / stats.count;
    let eig = SymmetricEigen::new(sw);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    Ok(DMatrix::from_fn(stats.dim(), stats.dim(), |i, j| eig.eigenvectors[(i, order[j])]))
}

fn rotate_prior(prior: &PriorConfig, u: &DMatrix<f64>) -> PriorConfig {
    let mut out = prior.clone();
    if let VPrior::Ard { mu0, .. } = &mut out.v_prior {
        *mu0 = u.transpose() * &*mu0;
    }
    out
}

fn unrotate_prior(prior: &PriorConfig, u: &DMatrix<f64>) -> PriorConfig {
    let mut out = prior.clone();
    if let VPrior::Ard { mu0, .. } = &mut out.v_prior {
        *mu0 = u * &*mu0;
    }
    out
}

/// Point estimate `(E[μ], E[V], E[W])`, mapped back through `rotation`.
pub fn point_estimate(state: &VariationalState, rotation: Option<&DMatrix<f64>>) -> Result<ModelParams> {
    let wbar = expected_w(&state.qw, state.qv.dim())?.wbar;
    let (mu, v) = (state.qv.mu_mean(), state.qv.loading_mean());
    match rotation {
        Some(u) => ModelParams::new(u * mu, u * v, linalg::symmetrize(&(u * wbar * u.transpose()))),
        None => ModelParams::new(mu, v, wbar),
    }
}

pub fn fit(dataset: &Dataset, partition: &SpeakerPartition, prior: &PriorConfig, config: &FitConfig) -> Result<FitOutput> {
    fit_stats(&accumulate(dataset, partition)?, prior, config)
}

pub fn fit_stats(stats: &SuffStats, prior: &PriorConfig, config: &FitConfig) -> Result<FitOutput> {
    config.validate()?;
    prior.validate(stats.dim(), Some(config.ny))?;
    let rotation = if let Some(u) = &config.rotation {
        check_dim("rotation", stats.dim(), u.nrows())?;
        check_dim("rotation", stats.dim(), u.ncols())?;
        Some(u.clone())
    } else if config.whiten {
        if !matches!(prior.variant, Variant::GammaDiagonal | Variant::GammaIsotropic) {
            return Err(Error::invalid("whitening applies to the V2 variants only"));
        }
        Some(whitening_rotation(stats)?)
    } else {
        None
    };
    let (stats, mut prior) = match &rotation {
        Some(u) => (stats.rotate(u), rotate_prior(prior, u)),
        None => (stats.clone(), prior.clone()),
    };
    let d = stats.dim();

    let mut state = initialize(&stats, &prior, config.ny, config.seed)?;
    let kappa0 = config.kappa_at(1);
    state.qy = update_qy(&stats, &state.qv, &expected_w(&state.qw, d)?, kappa0)?;
    state.kappa = kappa0;
    let initial = elbo_total(&state, &stats, &prior)?;

    let mut trace = Vec::new();
    let mut kappas = Vec::new();
    let mut converged = false;
    let mut previous = initial.total;
    for t in 1..=config.max_iterations {
        let kappa = config.kappa_at(t);
        sweep(&mut state, &stats, &prior, kappa)?;
        if config.hyperopt_every > 0 && t % config.hyperopt_every == 0 {
            prior = optimize_hyperparameters(&state, &prior)?;
        }
        if config.mindiv_every > 0 && t % config.mindiv_every == 0 && state.qy.len() >= 2 {
            let (qy, qv) = minimum_divergence(&state.qy, &state.qv)?;
            state.qv = qv;
            state.qy = qy;
            state.qy = update_qy(&stats, &state.qv, &expected_w(&state.qw, d)?, kappa)?;
        }
        state.iteration = t;
        let e = elbo_total(&state, &stats, &prior)?;
        trace.push(e);
        kappas.push(kappa);
        let change = (e.total - previous).abs();
        previous = e.total;
        if t > config.annealing_len() && change <= config.elbo_rel_tol * e.total.abs() {
            converged = true;
            break;
        }
    }

    let (expected, effective_rank) = match (&state.qalpha, &prior.v_prior) {
        (Some(qa), VPrior::Ard { a_alpha, b_alpha, .. }) => {
            let (ea, _) = expected_alpha(qa);
            let threshold = 10.0 * a_alpha / b_alpha;
            let rank = ea.iter().filter(|&&x| x < threshold).count();
            (Some(ea), Some(rank))
        }
        _ => (None, None),
    };
    let params = point_estimate(&state, rotation.as_ref())?;
    let prior = match &rotation {
        Some(u) => unrotate_prior(&prior, u),
        None => prior,
    };
    Ok(FitOutput {
        params,
        report: FitReport {
            initial,
            iterations: trace.len(),
            trace,
            kappas,
            converged,
            expected_alpha: expected,
            effective_rank,
        },
        state,
        prior,
        rotation,
    })
}

/// Refreshes `q(Y)` for new statistics under a frozen `q(Ṽ) q(W) q(α)` and
/// evaluates the full bound. `rotation` is the model's whitening transform.
pub fn evaluate(
    variant: Variant,
    qv: &QVtilde,
    qw: &QW,
    qalpha: Option<&QAlpha>,
    stats: &SuffStats,
    prior: &PriorConfig,
    rotation: Option<&DMatrix<f64>>,
) -> Result<(VariationalState, ElboBreakdown)> {
    let (stats, prior) = match rotation {
        Some(u) => (stats.rotate(u), rotate_prior(prior, u)),
        None => (stats.clone(), prior.clone()),
    };
    let wm = expected_w(qw, stats.dim())?;
    let state = VariationalState {
        variant,
        qy: update_qy(&stats, qv, &wm, 1.0)?,
        qv: qv.clone(),
        qw: qw.clone(),
        qalpha: qalpha.cloned(),
        iteration: 0,
        kappa: 1.0,
    };
    let e = elbo_total(&state, &stats, &prior)?;
    Ok((state, e))
}

/// Bound on `ln p(Φ | q(Ṽ), q(W))` for held-out data: the data term plus
/// `−KL(q(Y) ‖ p(Y))` with `q(Y)` optimized.
pub fn heldout_bound(qv: &QVtilde, qw: &QW, stats: &SuffStats) -> Result<f64> {
    let wm = expected_w(qw, stats.dim())?;
    let qy = update_qy(stats, qv, &wm, 1.0)?;
    let agg = y_aggregates(&qy, stats)?;
    let vmom = VMoments::compute(qv, &wm.wbar)?;
    let (yp, ye) = elbo_y_terms(&qy);
    Ok(elbo_data_term(stats, &agg, qv, &vmom, &wm) + yp - ye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpeakerStats;
    use crate::model::RowPrior;

    fn stats_1d(count: f64, first: f64, second: f64) -> SuffStats {
        let s = SpeakerStats {
            count,
            first: DVector::from_element(1, first),
            second: DMatrix::from_element(1, 1, second),
        };
        SuffStats::from_speakers(vec![s], 1)
    }

    fn point_qv(rows: &[&[f64]]) -> QVtilde {
        QVtilde::new(
            rows.iter().map(|r| DVector::from_row_slice(r)).collect(),
            rows.iter().map(|r| DMatrix::identity(r.len(), r.len()) * 1e18).collect(),
        )
        .unwrap()
    }

    fn unit_w(d: usize) -> WMoments {
        WMoments {
            wbar: DMatrix::identity(d, d),
            logdet: 0.0,
        }
    }

    #[test]
    fn qy_conjugate_example() {
        let qv = point_qv(&[&[1.0, 0.0]]);
        let qy = update_qy(&stats_1d(4.0, 8.0, 20.0), &qv, &unit_w(1), 1.0).unwrap();
        let g = qy.speaker(0);
        assert!((g.precision()[(0, 0)] - 5.0).abs() < 1e-12);
        assert!((g.mean()[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn qy_prior_for_empty_speaker() {
        let qv = point_qv(&[&[1.0, 0.3]]);
        let qy = update_qy(&stats_1d(0.0, 0.0, 0.0), &qv, &unit_w(1), 1.0).unwrap();
        assert_eq!(qy.speaker(0).mean()[0], 0.0);
        assert_eq!(qy.speaker(0).precision()[(0, 0)], 1.0);
    }

    #[test]
    fn qy_least_squares_limit() {
        let qv = point_qv(&[&[2.0, 1.0], &[-1.0, 0.5]]);
        let n = 1e4;
        let y = 0.7;
        let x = DVector::from_vec(vec![2.0 * y + 1.0, -y + 0.5]);
        let s = SpeakerStats {
            count: n,
            first: &x * n,
            second: &x * x.transpose() * n,
        };
        let st = SuffStats::from_speakers(vec![s], 2);
        let qy = update_qy(&st, &qv, &unit_w(2), 1.0).unwrap();
        assert!((qy.speaker(0).mean()[0] - y).abs() < 1e-3);
    }

    fn v1_prior(d: usize, w: WPrior) -> PriorConfig {
        PriorConfig {
            variant: Variant::WishartInformative,
            v_prior: VPrior::Ard {
                a_alpha: 1e-3,
                b_alpha: 1e-3,
                mu0: DVector::from_fn(d, |r, _| r as f64 - 0.5),
                beta: DVector::from_fn(d, |r, _| 1.0 + r as f64),
                beta_isotropic: false,
            },
            w_prior: w,
        }
    }

    fn agg_random(d: usize, ny: usize, seed: u64) -> YAggregates {
        let mut rng = SplitMix64::new(seed);
        let a = DMatrix::from_fn(ny + 1, ny + 3, |_, _| rng.next_normal());
        let mut r = &a * a.transpose();
        r[(ny, ny)] += 4.0;
        YAggregates {
            c: DMatrix::from_fn(d, ny + 1, |_, _| rng.next_normal()),
            r_ytilde: r,
            rho_y: DMatrix::identity(ny, ny),
        }
    }

    #[test]
    fn coupled_equals_factored_for_diagonal_w() {
        let (d, ny) = (3, 2);
        let prior = v1_prior(d, WPrior::NonInformative);
        let qa = QAlpha::new(2.0, DVector::from_vec(vec![1.0, 3.0])).unwrap();
        let agg = agg_random(d, ny, 5);
        let wbar = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let cur = point_qv(&[&[0.1, 0.2, 0.3], &[0.0, 1.0, 0.0], &[1.0, 1.0, 1.0]]);
        let a = update_qvtilde_coupled(&agg, &wbar, &prior, &cur, Some(&qa), 1.0).unwrap();
        let b = update_qvtilde_factored(&agg, &wbar, &prior, &cur, Some(&qa), 1.0).unwrap();
        assert!((a.mean() - b.mean()).amax() < 1e-14);
    }

    #[test]
    fn prior_recovered_without_data() {
        let (d, ny) = (2, 1);
        let prior = v1_prior(d, WPrior::NonInformative);
        let qa = QAlpha::new(2.0, DVector::from_vec(vec![4.0])).unwrap();
        let agg = YAggregates {
            c: DMatrix::zeros(d, ny + 1),
            r_ytilde: DMatrix::zeros(ny + 1, ny + 1),
            rho_y: DMatrix::zeros(ny, ny),
        };
        let wbar = DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]);
        let cur = point_qv(&[&[3.0, 3.0], &[-1.0, 2.0]]);
        let out = update_qvtilde_coupled(&agg, &wbar, &prior, &cur, Some(&qa), 1.0).unwrap();
        assert!((out.mean() - DMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.0, 0.5])).amax() < 1e-14);
        assert!((out.row(1).precision() - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]))).amax() < 1e-14);

        let rows = vec![
            RowPrior {
                mean: DVector::from_vec(vec![0.4, 0.1]),
                precision: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            };
            2
        ];
        let p3 = PriorConfig {
            variant: Variant::GaussVWishart,
            v_prior: VPrior::Rows(rows.clone()),
            w_prior: WPrior::Wishart {
                psi0: DMatrix::identity(2, 2),
                nu: 3.0,
            },
        };
        let out = update_qvtilde_coupled(&agg, &wbar, &p3, &cur, None, 1.0).unwrap();
        assert!((out.row(0).mean() - &rows[0].mean).amax() < 1e-14);
        assert!((out.row(0).precision() - &rows[0].precision).amax() < 1e-14);
    }

    #[test]
    fn factored_one_dimensional_direct_solve() {
        let prior = PriorConfig {
            variant: Variant::GammaIsotropic,
            v_prior: VPrior::Ard {
                a_alpha: 1.0,
                b_alpha: 1.0,
                mu0: DVector::from_element(1, 2.0),
                beta: DVector::from_element(1, 0.5),
                beta_isotropic: true,
            },
            w_prior: WPrior::GammaIsotropic { a: 1.0, b: 1.0 },
        };
        let qa = QAlpha::new(3.0, DVector::from_element(1, 1.5)).unwrap();
        let agg = YAggregates {
            c: DMatrix::from_row_slice(1, 2, &[1.5, 4.0]),
            r_ytilde: DMatrix::from_row_slice(2, 2, &[2.5, 1.0, 1.0, 3.0]),
            rho_y: DMatrix::identity(1, 1),
        };
        let wbar = DMatrix::from_element(1, 1, 2.0);
        let cur = point_qv(&[&[0.0, 0.0]]);
        let out = update_qvtilde_factored(&agg, &wbar, &prior, &cur, Some(&qa), 1.0).unwrap();
        // L = diag(2, 0.5) + 2 R~ = [[7, 2], [2, 6.5]], rhs = (3, 1 + 8) = (3, 9)
        let det = 7.0 * 6.5 - 4.0;
        let expect = [(6.5 * 3.0 - 2.0 * 9.0) / det, (7.0 * 9.0 - 2.0 * 3.0) / det];
        assert!((out.mean()[(0, 0)] - expect[0]).abs() < 1e-14);
        assert!((out.mean()[(0, 1)] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn qalpha_substitution() {
        let rows = vec![gaussian_identity(DVector::zeros(2)); 10];
        let mut qv = QVtilde::from_rows(rows).unwrap();
        for r in 0..10 {
            qv.set_row(r, DVector::from_vec(if r == 0 { vec![1.0, 0.0] } else { vec![0.0, 0.0] }), &(DMatrix::identity(2, 2) * 10.0))
                .unwrap();
        }
        // E[v_qᵀv_q] = 10·0.1 + 1 = 2
        let prior = v1_prior(10, WPrior::NonInformative);
        let qa = update_qalpha(&qv, &prior, 1.0).unwrap();
        assert!((qa.a - 5.001).abs() < 1e-12);
        assert!((qa.b[0] - 1.001).abs() < 1e-12);
    }

    #[test]
    fn qw_ml_limit() {
        // d = 1, K = 5, N = 10, no loading: Ψ = 0.2, ν = 10
        let st = stats_1d(10.0, 0.0, 5.0);
        let qv = point_qv(&[&[0.0, 0.0]]);
        let agg = YAggregates {
            c: DMatrix::zeros(1, 2),
            r_ytilde: DMatrix::zeros(2, 2),
            rho_y: DMatrix::zeros(1, 1),
        };
        let mut prior = v1_prior(1, WPrior::NonInformative);
        prior.variant = Variant::WishartNonInformative;
        let QW::Wishart { psi, nu } = update_qw(&st, &agg, &qv, &prior, 1.0).unwrap() else {
            panic!()
        };
        assert!((psi[(0, 0)] - 0.2).abs() < 1e-14);
        assert_eq!(nu, 10.0);
        let st = stats_1d(1.0, 0.0, 5.0);
        assert!(update_qw(&st, &agg, &qv, &prior, 1.0).is_err());
    }

    #[test]
    fn annealing_rules() {
        let qw = anneal_qw(
            QW::Wishart {
                psi: DMatrix::identity(2, 2),
                nu: 5.0,
            },
            0.5,
            2,
        )
        .unwrap();
        let QW::Wishart { psi, nu } = qw else { panic!() };
        assert_eq!(nu, 4.0);
        assert_eq!(psi[(0, 0)], 2.0);
        let g = anneal_gaussian(gaussian_identity(DVector::zeros(2)), 0.5).unwrap();
        assert!((g.covariance()[(1, 1)] - 2.0).abs() < 1e-15);
        let qa = anneal_qalpha(QAlpha::new(3.0, DVector::from_element(1, 4.0)).unwrap(), 0.5);
        assert_eq!((qa.a, qa.b[0]), (2.0, 2.0));
    }

    #[test]
    fn schedule_lookup() {
        let mut c = FitConfig::new(1);
        c.annealing = vec![
            AnnealStep {
                kappa: 0.25,
                iterations: 2,
            },
            AnnealStep {
                kappa: 0.5,
                iterations: 1,
            },
        ];
        let k: Vec<f64> = (1..=5).map(|t| c.kappa_at(t)).collect();
        assert_eq!(k, vec![0.25, 0.25, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn mindiv_identity_and_shift() {
        // speakers at ±1 → μ_y = 0, Σ_y = 1 (precision → 0 limit avoided by exact moments)
        let qy = QY::new(
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, -1.0)],
            vec![DMatrix::from_element(1, 1, 1e300); 2],
            1,
        )
        .unwrap();
        let qv = point_qv(&[&[2.0, 1.0]]);
        let (qy2, qv2) = minimum_divergence(&qy, &qv).unwrap();
        assert!((qv2.mean() - qv.mean()).amax() < 1e-12);
        assert!((qy2.speaker(0).mean()[0] - 1.0).abs() < 1e-12);

        let qy = QY::new(
            vec![DVector::from_element(1, 4.0), DVector::from_element(1, 2.0)],
            vec![DMatrix::from_element(1, 1, 1e300); 2],
            1,
        )
        .unwrap();
        let (_, qv2) = minimum_divergence(&qy, &qv).unwrap();
        // μ_y = 3, Σ_y = 1: μ shifts by V̄ μ_y
        assert!((qv2.mean()[(0, 1)] - 7.0).abs() < 1e-12);
        assert!(minimum_divergence(&QY::prior(1, 1), &qv).is_err());
    }
}
