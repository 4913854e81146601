//! Factored variational posterior `q(Y) Π_r q(ṽ′_r) q(W) q(α)` and the
//! expectations every update and lower-bound term consumes.
//!
//! Gaussian factors are stored as (mean, precision). Covariances and
//! log-determinants are derived on every write and cannot be set directly.

use nalgebra::{DMatrix, DVector};

use crate::data::SuffStats;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, SpdFactor};
use crate::numerics::digamma_unchecked;

/// A Gaussian given by mean and precision, with cached covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    factor: SpdFactor,
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, precision: &DMatrix<f64>, what: &str) -> Result<Self> {
        check_dim("Gaussian precision", mean.len(), precision.nrows())?;
        check_dim("Gaussian precision", mean.len(), precision.ncols())?;
        let factor = SpdFactor::new(&linalg::symmetrize(precision), what)?;
        Ok(Gaussian { mean, factor })
    }

    pub(crate) fn from_factor(mean: DVector<f64>, factor: SpdFactor) -> Self {
        Gaussian { mean, factor }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.factor.matrix
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.factor.inverse
    }

    pub fn logdet_precision(&self) -> f64 {
        self.factor.logdet
    }

    /// `Σ + m mᵀ`
    pub fn second_moment(&self) -> DMatrix<f64> {
        let mut s = self.factor.inverse.clone();
        s.ger(1.0, &self.mean, &self.mean, 1.0);
        s
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.factor.matrix == other.factor.matrix
    }
}

/// `q(Y) = Π_i N(y_i | ȳ_i, L_yi⁻¹)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QY {
    ny: usize,
    speakers: Vec<Gaussian>,
}

impl QY {
    pub fn new(means: Vec<DVector<f64>>, precisions: Vec<DMatrix<f64>>, ny: usize) -> Result<Self> {
        check_dim("q(Y) precisions", means.len(), precisions.len())?;
        let speakers = means
            .into_iter()
            .zip(precisions.iter())
            .enumerate()
            .map(|(i, (m, l))| {
                check_dim("q(Y) mean", ny, m.len())?;
                Gaussian::new(m, l, &format!("q(y_{i}) precision"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(QY { ny, speakers })
    }

    /// Every speaker at the standard-normal prior.
    pub fn prior(num_speakers: usize, ny: usize) -> Self {
        let g = Gaussian::new(DVector::zeros(ny), &DMatrix::identity(ny, ny), "identity")
            .expect("identity is positive definite");
        QY {
            ny,
            speakers: vec![g; num_speakers],
        }
    }

    pub(crate) fn from_gaussians(speakers: Vec<Gaussian>, ny: usize) -> Self {
        QY { ny, speakers }
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn speaker(&self, i: usize) -> &Gaussian {
        &self.speakers[i]
    }

    pub fn speakers(&self) -> &[Gaussian] {
        &self.speakers
    }

    pub fn set_speaker(&mut self, i: usize, mean: DVector<f64>, precision: &DMatrix<f64>) -> Result<()> {
        check_dim("q(Y) mean", self.ny, mean.len())?;
        self.speakers[i] = Gaussian::new(mean, precision, "q(y) precision")?;
        Ok(())
    }
}

/// `Π_r N(ṽ′_r | v̄′_r, L_Ṽr⁻¹)` over the rows of `Ṽ = [V μ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QVtilde {
    rows: Vec<Gaussian>,
    mean: DMatrix<f64>,
}

impl QVtilde {
    pub fn new(means: Vec<DVector<f64>>, precisions: Vec<DMatrix<f64>>) -> Result<Self> {
        check_dim("q(V) precisions", means.len(), precisions.len())?;
        let rows = means
            .into_iter()
            .zip(precisions.iter())
            .enumerate()
            .map(|(r, (m, l))| Gaussian::new(m, l, &format!("q(v_{r}) precision")))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub(crate) fn from_rows(rows: Vec<Gaussian>) -> Result<Self> {
        let k = rows.first().map(Gaussian::dim).ok_or_else(|| Error::invalid("q(V) needs at least one row"))?;
        if k < 2 {
            return Err(Error::invalid("q(V) rows need at least two entries"));
        }
        let mut mean = DMatrix::zeros(rows.len(), k);
        for (r, g) in rows.iter().enumerate() {
            check_dim("q(V) row length", k, g.dim())?;
            mean.set_row(r, &g.mean().transpose());
        }
        Ok(QVtilde { rows, mean })
    }

    pub fn dim(&self) -> usize {
        self.rows.len()
    }

    pub fn ny(&self) -> usize {
        self.mean.ncols() - 1
    }

    pub fn row(&self, r: usize) -> &Gaussian {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Gaussian] {
        &self.rows
    }

    /// `E[Ṽ]`, rows stacked.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    pub fn loading_mean(&self) -> DMatrix<f64> {
        self.mean.columns(0, self.ny()).into_owned()
    }

    /// `E[μ]`, the last column of `E[Ṽ]`.
    pub fn mu_mean(&self) -> DVector<f64> {
        self.mean.column(self.ny()).into_owned()
    }

    /// `Var[μ_r]` for every row.
    pub fn mu_variance(&self) -> DVector<f64> {
        let k = self.ny();
        DVector::from_iterator(self.dim(), self.rows.iter().map(|g| g.covariance()[(k, k)]))
    }

    pub fn set_row(&mut self, r: usize, mean: DVector<f64>, precision: &DMatrix<f64>) -> Result<()> {
        check_dim("q(V) row length", self.ny() + 1, mean.len())?;
        let g = Gaussian::new(mean, precision, "q(v) precision")?;
        self.replace_row(r, g);
        Ok(())
    }

    pub(crate) fn replace_row(&mut self, r: usize, g: Gaussian) {
        self.mean.set_row(r, &g.mean().transpose());
        self.rows[r] = g;
    }
}

/// `q(α) = Π_q Gamma(α_q | a′, b′_q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QAlpha {
    pub a: f64,
    pub b: DVector<f64>,
}

impl QAlpha {
    pub fn new(a: f64, b: DVector<f64>) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) || b.iter().any(|&x| !(x.is_finite() && x > 0.0)) {
            return Err(Error::invalid("q(alpha) shape and rates must be positive"));
        }
        Ok(QAlpha { a, b })
    }
}

/// Posterior over the within-class precision.
#[derive(Debug, Clone, PartialEq)]
pub enum QW {
    Wishart { psi: DMatrix<f64>, nu: f64 },
    GammaDiag { a: f64, b: DVector<f64> },
    GammaIso { a: f64, b: f64 },
}

/// `E[W]` and `E[ln|W|]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WMoments {
    pub wbar: DMatrix<f64>,
    pub logdet: f64,
}

pub fn expected_w(qw: &QW, d: usize) -> Result<WMoments> {
    match qw {
        QW::Wishart { psi, nu } => {
            check_dim("Wishart scale", d, psi.nrows())?;
            if !(nu.is_finite() && *nu > d as f64 - 1.0) {
                return Err(Error::Domain {
                    function: "expected_w",
                    value: *nu,
                    reason: "Wishart dof must exceed d-1",
                });
            }
            let logdet_psi = linalg::logdet_spd(psi, "q(W) scale")?;
            let mut e = d as f64 * std::f64::consts::LN_2 + logdet_psi;
            for i in 1..=d {
                e += digamma_unchecked((nu + 1.0 - i as f64) / 2.0);
            }
            Ok(WMoments {
                wbar: psi * *nu,
                logdet: e,
            })
        }
        QW::GammaDiag { a, b } => {
            check_dim("Gamma rates", d, b.len())?;
            let psi_a = digamma_unchecked(*a);
            Ok(WMoments {
                wbar: DMatrix::from_diagonal(&b.map(|br| a / br)),
                logdet: b.iter().map(|br| psi_a - br.ln()).sum(),
            })
        }
        QW::GammaIso { a, b } => Ok(WMoments {
            wbar: DMatrix::identity(d, d) * (a / b),
            logdet: d as f64 * (digamma_unchecked(*a) - b.ln()),
        }),
    }
}

/// `E[α_q]` and `E[ln α_q]`.
pub fn expected_alpha(qa: &QAlpha) -> (DVector<f64>, DVector<f64>) {
    let psi = digamma_unchecked(qa.a);
    (qa.b.map(|b| qa.a / b), qa.b.map(|b| psi - b.ln()))
}

/// Speaker-factor aggregates over all speakers.
#[derive(Debug, Clone, PartialEq)]
pub struct YAggregates {
    /// `C = Σ_i F_i E[ỹ_i]ᵀ`, `d × (n_y+1)`.
    pub c: DMatrix<f64>,
    /// `R̃ = Σ_i N_i E[ỹ_i ỹ_iᵀ]`.
    pub r_ytilde: DMatrix<f64>,
    /// `Ρ = Σ_i E[y_i y_iᵀ]`.
    pub rho_y: DMatrix<f64>,
}

/// `E[ỹỹᵀ] = [[E[yyᵀ], E[y]], [E[y]ᵀ, 1]]`.
pub fn augmented_second_moment(g: &Gaussian) -> DMatrix<f64> {
    let ny = g.dim();
    let mut m = DMatrix::zeros(ny + 1, ny + 1);
    m.view_mut((0, 0), (ny, ny)).copy_from(&g.second_moment());
    for q in 0..ny {
        m[(q, ny)] = g.mean()[q];
        m[(ny, q)] = g.mean()[q];
    }
    m[(ny, ny)] = 1.0;
    m
}

pub fn augmented_mean(g: &Gaussian) -> DVector<f64> {
    let ny = g.dim();
    let mut m = DVector::from_element(ny + 1, 1.0);
    m.rows_mut(0, ny).copy_from(g.mean());
    m
}

pub fn y_aggregates(qy: &QY, stats: &SuffStats) -> Result<YAggregates> {
    check_dim("q(Y) speakers", stats.num_speakers(), qy.len())?;
    let d = stats.dim();
    let ny = qy.ny();
    let mut c = DMatrix::zeros(d, ny + 1);
    let mut r = DMatrix::zeros(ny + 1, ny + 1);
    let mut rho = DMatrix::zeros(ny, ny);
    for (g, s) in qy.speakers().iter().zip(&stats.speakers) {
        let m = augmented_mean(g);
        c.ger(1.0, &s.first, &m, 1.0);
        let second = augmented_second_moment(g);
        r += &second * s.count;
        rho += second.view((0, 0), (ny, ny));
    }
    Ok(YAggregates {
        c,
        r_ytilde: r,
        rho_y: rho,
    })
}

/// Second-order moments of `Ṽ` under `q(Ṽ)`, with `W̄ = E[W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VMoments {
    /// `E[ṼᵀWṼ] = Σ_r w̄_rr Σ_Ṽr + V̄̃ᵀW̄V̄̃`; blocks give `E[VᵀWV]` and `E[VᵀWμ]`.
    pub evt_w_vt: DMatrix<f64>,
    /// `E[v_qᵀ v_q]`, loading columns only.
    pub evq_sq: DVector<f64>,
    /// `E[ṼᵀṼ] = Σ_r Σ_Ṽr + V̄̃ᵀV̄̃`.
    pub evt_vt: DMatrix<f64>,
}

impl VMoments {
    pub fn compute(qv: &QVtilde, wbar: &DMatrix<f64>) -> Result<Self> {
        check_dim("W mean", qv.dim(), wbar.nrows())?;
        let k = qv.ny() + 1;
        let vm = qv.mean();
        let mut evt_w_vt = vm.transpose() * wbar * vm;
        let mut evt_vt = vm.transpose() * vm;
        for (r, g) in qv.rows().iter().enumerate() {
            evt_w_vt += g.covariance() * wbar[(r, r)];
            evt_vt += g.covariance();
        }
        let evq_sq = DVector::from_iterator(k - 1, (0..k - 1).map(|q| evt_vt[(q, q)]));
        Ok(VMoments {
            evt_w_vt: linalg::symmetrize(&evt_w_vt),
            evq_sq,
            evt_vt: linalg::symmetrize(&evt_vt),
        })
    }

    /// `E[VᵀWV]`
    pub fn evtwv(&self) -> DMatrix<f64> {
        let ny = self.evq_sq.len();
        self.evt_w_vt.view((0, 0), (ny, ny)).into_owned()
    }

    /// `E[VᵀWμ]`
    pub fn evtwmu(&self) -> DVector<f64> {
        let ny = self.evq_sq.len();
        self.evt_w_vt.view((0, ny), (ny, 1)).column(0).into_owned()
    }
}

/// `ρ_r = Σ_ij (R̃ ∘ Σ_Ṽr)_ij`, the per-row covariance correction.
pub fn rho(qv: &QVtilde, r_ytilde: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(
        qv.dim(),
        qv.rows().iter().map(|g| r_ytilde.component_mul(g.covariance()).sum()),
    )
}

/// `E[Ṽ R̃ Ṽᵀ] = V̄̃ R̃ V̄̃ᵀ + diag(ρ)`; row covariances are independent across rows.
pub fn expected_vrvt(qv: &QVtilde, r_ytilde: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim("R~ size", qv.ny() + 1, r_ytilde.nrows())?;
    let vm = qv.mean();
    let mut out = vm * r_ytilde * vm.transpose();
    for (r, x) in rho(qv, r_ytilde).iter().enumerate() {
        out[(r, r)] += x;
    }
    Ok(linalg::symmetrize(&out))
}

/// Everything at once, for callers that have both `W̄` and `R̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratics {
    pub evtwv: DMatrix<f64>,
    pub evtwmu: DVector<f64>,
    pub evrvt: DMatrix<f64>,
    pub rho: DVector<f64>,
    pub evq_sq: DVector<f64>,
    pub evtv: DMatrix<f64>,
}

pub fn expected_quadratics(qv: &QVtilde, wbar: &DMatrix<f64>, r_ytilde: &DMatrix<f64>) -> Result<Quadratics> {
    let m = VMoments::compute(qv, wbar)?;
    Ok(Quadratics {
        evtwv: m.evtwv(),
        evtwmu: m.evtwmu(),
        evrvt: expected_vrvt(qv, r_ytilde)?,
        rho: rho(qv, r_ytilde),
        evq_sq: m.evq_sq,
        evtv: m.evt_vt,
    })
}
