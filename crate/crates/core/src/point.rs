//! Variational inference with point estimates of `μ`, `V` and `W`.
//!
//! The posterior factorizes as `q(Y, Y_d) q(θ) q(π_θ)`. The model parameters
//! and the Dirichlet concentration `τ₀` are re-estimated by maximizing the
//! lower bound, with the labelled set down-weighted by `η`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Result, SpldaError};
use crate::linalg::{self, augment};
use crate::model::{accumulate_stats, Dataset, SecondOrder, SpldaModel, SuffStats};
use crate::special::{digamma, ln_dirichlet_norm, ln_gamma, trigamma};

/// Gaussian posterior `q(y_i) = N(ȳ_i, L_i⁻¹)` of one speaker factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerPosterior {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub cov: DMatrix<f64>,
    /// `E[y yᵀ] = L⁻¹ + ȳȳᵀ`
    pub second_moment: DMatrix<f64>,
    pub ln_det_precision: f64,
}

impl SpeakerPosterior {
    pub fn from_precision(mean: DVector<f64>, precision: DMatrix<f64>) -> Result<Self> {
        let precision = linalg::symmetrized(precision);
        let chol = linalg::cholesky(&precision, "speaker posterior precision")?;
        let cov = linalg::symmetrized(chol.inverse());
        let second_moment = linalg::symmetrized(&cov + &mean * mean.transpose());
        Ok(Self {
            ln_det_precision: linalg::ln_det(&chol),
            mean,
            precision,
            cov,
            second_moment,
        })
    }

    /// Standard normal prior `N(0, I)`.
    pub fn prior(ny: usize) -> Self {
        Self {
            mean: DVector::zeros(ny),
            precision: DMatrix::identity(ny, ny),
            cov: DMatrix::identity(ny, ny),
            second_moment: DMatrix::identity(ny, ny),
            ln_det_precision: 0.0,
        }
    }

    /// Degenerate posterior concentrated at `mean`. Its entropy is undefined,
    /// so it can only seed an update, never enter the lower bound.
    pub fn point_mass(mean: DVector<f64>) -> Self {
        let ny = mean.len();
        Self {
            precision: DMatrix::from_diagonal_element(ny, ny, f64::INFINITY),
            cov: DMatrix::zeros(ny, ny),
            second_moment: &mean * mean.transpose(),
            ln_det_precision: f64::INFINITY,
            mean,
        }
    }

    pub fn ny(&self) -> usize {
        self.mean.len()
    }

    /// `E[ỹ] = [ȳ; 1]`.
    pub fn aug_mean(&self) -> DVector<f64> {
        augment(&self.mean)
    }

    /// `E[ỹỹᵀ] = [[E[yyᵀ], ȳ], [ȳᵀ, 1]]`.
    pub fn aug_second_moment(&self) -> DMatrix<f64> {
        let ny = self.ny();
        let mut m = DMatrix::zeros(ny + 1, ny + 1);
        m.view_mut((0, 0), (ny, ny)).copy_from(&self.second_moment);
        for k in 0..ny {
            m[(k, ny)] = self.mean[k];
            m[(ny, k)] = self.mean[k];
        }
        m[(ny, ny)] = 1.0;
        m
    }
}

/// Soft assignments `r_ji` of i-vectors to speakers and the log `ϱ_ji` they
/// were normalized from.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub r: DMatrix<f64>,
    pub log_rho: DMatrix<f64>,
}

impl Responsibilities {
    /// Wraps a row-stochastic matrix; `log_rho` is set to `ln r`.
    pub fn from_matrix(r: DMatrix<f64>) -> Result<Self> {
        crate::model::validate_responsibilities(&r, 1e-9)?;
        let log_rho = r.map(f64::ln);
        Ok(Self { r, log_rho })
    }

    pub fn one_hot(labels: &[usize], m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(SpldaError::InvalidInput(format!("label {bad} out of range [0, {m})")));
        }
        let r = DMatrix::from_fn(labels.len(), m, |j, i| if labels[j] == i { 1.0 } else { 0.0 });
        Self::from_matrix(r)
    }

    pub fn n_speakers(&self) -> usize {
        self.r.ncols()
    }

    pub fn counts(&self) -> Vec<f64> {
        (0..self.r.ncols()).map(|i| self.r.column(i).sum()).collect()
    }

    /// Hard labels by argmax; ties go to the lowest speaker index.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.r.nrows())
            .map(|j| {
                let row = self.r.row(j);
                let mut best = 0;
                for i in 1..row.len() {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// `q(π_θ) = Dir(τ)` with cached `E[ln π_i] = ψ(τ_i) − ψ(Στ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletPosterior {
    pub tau: DVector<f64>,
    pub e_ln_pi: DVector<f64>,
}

impl DirichletPosterior {
    pub fn new(tau: DVector<f64>) -> Result<Self> {
        if tau.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(SpldaError::InvalidInput("Dirichlet parameters must be positive".into()));
        }
        let total = digamma(tau.sum());
        let e_ln_pi = tau.map(|t| digamma(t) - total);
        Ok(Self { tau, e_ln_pi })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Hyperparameters shared by both inference variants.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Symmetric Dirichlet concentration.
    pub tau0: f64,
    /// Weight of the labelled set in parameter estimation, in (0, 1].
    pub eta: f64,
    /// Fixed annealing parameter used when no schedule is active.
    pub kappa: f64,
    /// Prior mean of `μ` (Bayesian variant).
    pub mu0: Option<DVector<f64>>,
    /// Prior precisions of `μ` per dimension (Bayesian variant).
    pub beta: Option<DVector<f64>>,
    pub a_alpha: f64,
    pub b_alpha: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau0: 1.0,
            eta: 1.0,
            kappa: 1.0,
            mu0: None,
            beta: None,
            a_alpha: 1e-3,
            b_alpha: 1e-3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0) {
            return Err(SpldaError::InvalidInput(format!("tau0 must be > 0, got {}", self.tau0)));
        }
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(SpldaError::InvalidInput(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(SpldaError::InvalidInput(format!("kappa must be in (0, 1], got {}", self.kappa)));
        }
        if !(self.a_alpha > 0.0 && self.b_alpha > 0.0) {
            return Err(SpldaError::InvalidInput("a_alpha and b_alpha must be > 0".into()));
        }
        Ok(())
    }
}

/// Full variational state of the point-estimate variant.
#[derive(Debug, Clone, PartialEq)]
pub struct PointState {
    pub resp: Responsibilities,
    pub dir: DirichletPosterior,
    pub unsup: Vec<SpeakerPosterior>,
    pub sup: Vec<SpeakerPosterior>,
}

impl PointState {
    /// State with the given responsibilities, prior speaker posteriors and
    /// `q(π)` already consistent with the counts.
    pub fn from_responsibilities(resp: Responsibilities, ny: usize, m_d: usize, hyper: &Hyperparams, kappa: f64) -> Result<Self> {
        let dir = update_q_pi(&resp.counts(), hyper.tau0, kappa)?;
        let m = resp.n_speakers();
        Ok(Self {
            resp,
            dir,
            unsup: vec![SpeakerPosterior::prior(ny); m],
            sup: vec![SpeakerPosterior::prior(ny); m_d],
        })
    }

    pub fn n_speakers(&self) -> usize {
        self.resp.n_speakers()
    }
}

/// Sums `C̃ = Σ_i F_i E[ỹ_i]ᵀ`, `R̃ = Σ_i N_i E[ỹ_iỹ_iᵀ]` and `N = Σ_i N_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Accumulators {
    pub c: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub n: f64,
}

impl Accumulators {
    pub fn zeros(d: usize, ny: usize) -> Self {
        Self {
            c: DMatrix::zeros(d, ny + 1),
            r: DMatrix::zeros(ny + 1, ny + 1),
            n: 0.0,
        }
    }

    pub fn from_stats(stats: &SuffStats, posts: &[SpeakerPosterior]) -> Result<Self> {
        if stats.n_speakers() != posts.len() {
            return Err(shape_err("accumulators", stats.n_speakers(), posts.len()));
        }
        let ny = posts.first().map(|p| p.ny()).unwrap_or(0);
        let mut acc = Self::zeros(stats.dim(), ny);
        for (i, p) in posts.iter().enumerate() {
            acc.c += &stats.f[i] * p.aug_mean().transpose();
            acc.r += p.aug_second_moment() * stats.n[i];
        }
        acc.n = stats.n_total;
        Ok(acc)
    }

    /// `self + η·other`.
    pub fn weighted_sum(&self, other: &Accumulators, eta: f64) -> Accumulators {
        Accumulators {
            c: &self.c + &other.c * eta,
            r: linalg::symmetrized(&self.r + &other.r * eta),
            n: self.n + other.n * eta,
        }
    }

    pub fn scale(&self, s: f64) -> Accumulators {
        Accumulators {
            c: &self.c * s,
            r: &self.r * s,
            n: self.n * s,
        }
    }
}

/// `tr(A B)` without forming the product.
pub(crate) fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

pub(crate) fn is_one(kappa: f64) -> bool {
    kappa == 1.0
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 && kappa <= 1.0 {
        Ok(())
    } else {
        Err(SpldaError::InvalidInput(format!("kappa must be in (0, 1], got {kappa}")))
    }
}

/// Posterior of every speaker factor given centered statistics.
///
/// `L = I + N_i VᵀWV`, `ȳ = L⁻¹ VᵀW F̄_i`; the returned precision is `κL`.
pub fn update_q_y(stats: &SuffStats, model: &SpldaModel, kappa: f64) -> Result<Vec<SpeakerPosterior>> {
    check_kappa(kappa)?;
    let centered = stats
        .centered
        .as_ref()
        .ok_or_else(|| SpldaError::InvalidInput("update_q_y needs centered statistics".into()))?;
    let ny = model.ny();
    let vtw = model.v().transpose() * model.w();
    let vtwv = model.vtwv();
    let eye = DMatrix::<f64>::identity(ny, ny);
    stats
        .n
        .iter()
        .zip(&centered.fbar)
        .map(|(&n, fbar)| {
            let l = &eye + &vtwv * n;
            let rhs = &vtw * fbar;
            gaussian_posterior(l, rhs, kappa)
        })
        .collect()
}

pub(crate) fn gaussian_posterior(l: DMatrix<f64>, rhs: DVector<f64>, kappa: f64) -> Result<SpeakerPosterior> {
    let l = linalg::symmetrized(l);
    let chol = linalg::cholesky(&l, "speaker posterior precision")?;
    let mean = chol.solve(&rhs);
    let precision = if is_one(kappa) { l } else { l * kappa };
    SpeakerPosterior::from_precision(mean, precision)
}

/// Unnormalized log responsibilities `ln ϱ_ji` for the point model.
pub fn log_rho_point(
    phi: &DMatrix<f64>,
    posts: &[SpeakerPosterior],
    model: &SpldaModel,
    dir: &DirichletPosterior,
) -> Result<DMatrix<f64>> {
    let (n, m) = (phi.nrows(), posts.len());
    if dir.len() != m {
        return Err(shape_err("update_q_theta Dirichlet", m, dir.len()));
    }
    if phi.ncols() != model.dim() {
        return Err(shape_err("update_q_theta i-vectors", model.dim(), phi.ncols()));
    }
    let w = model.w();
    let vtwv = model.vtwv();
    let mut x = phi.clone();
    for j in 0..n {
        let mut row = x.row_mut(j);
        row -= model.mu().transpose();
    }
    let wx = &x * w;
    let ld = 0.5 * model.ln_det_w_2pi();
    let base: Vec<f64> = (0..n).map(|j| ld - 0.5 * wx.row(j).dot(&x.row(j))).collect();
    // (W V ȳ_i) stacked as columns
    let ybar = DMatrix::from_fn(model.ny(), m, |k, i| posts[i].mean[k]);
    let proj = wx * (model.v() * ybar);
    let spk: Vec<f64> = posts
        .iter()
        .enumerate()
        .map(|(i, p)| -0.5 * trace_prod(&vtwv, &p.second_moment) + dir.e_ln_pi[i])
        .collect();
    Ok(DMatrix::from_fn(n, m, |j, i| base[j] + proj[(j, i)] + spk[i]))
}

/// Row-wise tempered softmax `r_ji = ϱ_ji^κ / Σ_i ϱ_ji^κ` in log space.
pub fn normalize_log_rho(log_rho: DMatrix<f64>, kappa: f64) -> Result<Responsibilities> {
    check_kappa(kappa)?;
    let (n, m) = log_rho.shape();
    let mut r = DMatrix::zeros(n, m);
    for j in 0..n {
        let row: Vec<f64> = log_rho.row(j).iter().map(|&v| if is_one(kappa) { v } else { kappa * v }).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(SpldaError::Degenerate(format!(
                "every log responsibility of i-vector {j} is -inf or NaN"
            )));
        }
        let mut total = 0.0;
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            r[(j, i)] = e;
            total += e;
        }
        for i in 0..m {
            r[(j, i)] /= total;
        }
    }
    Ok(Responsibilities { r, log_rho })
}

/// Responsibilities update for the point model.
pub fn update_q_theta(
    phi: &DMatrix<f64>,
    posts: &[SpeakerPosterior],
    model: &SpldaModel,
    dir: &DirichletPosterior,
    kappa: f64,
) -> Result<Responsibilities> {
    normalize_log_rho(log_rho_point(phi, posts, model, dir)?, kappa)
}

/// `τ_i = κ(E[N_i] + τ₀ − 1) + 1`, which is `E[N_i] + τ₀` at κ = 1.
pub fn update_q_pi(counts: &[f64], tau0: f64, kappa: f64) -> Result<DirichletPosterior> {
    check_kappa(kappa)?;
    if !(tau0 > 0.0) {
        return Err(SpldaError::InvalidInput(format!("tau0 must be > 0, got {tau0}")));
    }
    if let Some(bad) = counts.iter().find(|&&c| !(c >= 0.0)) {
        return Err(SpldaError::InvalidInput(format!("negative expected count {bad}")));
    }
    let tau: Vec<f64> = counts
        .iter()
        .map(|&n| if is_one(kappa) { n + tau0 } else { kappa * (n + tau0 - 1.0) + 1.0 })
        .collect();
    if let Some(t) = tau.iter().find(|&&t| t <= 0.0) {
        return Err(SpldaError::InvalidInput(format!(
            "annealed Dirichlet parameter {t} is not positive; raise kappa or tau0"
        )));
    }
    DirichletPosterior::new(DVector::from_vec(tau))
}

/// Named terms of the lower bound and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboBreakdown {
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

impl ElboBreakdown {
    pub(crate) fn from_terms(terms: Vec<(&'static str, f64)>) -> Self {
        let total = terms.iter().map(|(_, v)| v).sum();
        Self { terms, total }
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

pub mod terms {
    pub const DATA: &str = "E[ln P(Phi|Y,theta)]";
    pub const PRIOR_Y: &str = "E[ln P(Y)]";
    pub const THETA: &str = "E[ln P(theta|pi)]";
    pub const PRIOR_PI: &str = "E[ln P(pi)]";
    pub const DATA_SUP: &str = "E[ln P(Phi_d|Y_d)]";
    pub const PRIOR_Y_SUP: &str = "E[ln P(Y_d)]";
    pub const ENT_Y: &str = "-E[ln q(Y)]";
    pub const ENT_THETA: &str = "-E[ln q(theta)]";
    pub const ENT_PI: &str = "-E[ln q(pi)]";
    pub const ENT_Y_SUP: &str = "-E[ln q(Y_d)]";
    pub const PRIOR_V: &str = "E[ln P(V|alpha)]";
    pub const PRIOR_ALPHA: &str = "E[ln P(alpha)]";
    pub const PRIOR_MU: &str = "E[ln P(mu)]";
    pub const PRIOR_W: &str = "E[ln P(W)]";
    pub const ENT_V: &str = "-E[ln q(Vtilde)]";
    pub const ENT_ALPHA: &str = "-E[ln q(alpha)]";
    pub const ENT_W: &str = "-E[ln q(W)]";
}

/// `E[ln P(Y)] = −(M n_y/2) ln 2π − ½ Σ tr E[yyᵀ]`.
pub(crate) fn prior_y_term(posts: &[SpeakerPosterior]) -> f64 {
    let ny = posts.first().map(|p| p.ny()).unwrap_or(0) as f64;
    -(posts.len() as f64) * ny / 2.0 * (2.0 * PI).ln() - 0.5 * posts.iter().map(|p| p.second_moment.trace()).sum::<f64>()
}

/// `−E[ln q(Y)] = (M n_y/2)(ln 2π + 1) − ½ Σ ln|L_i|`.
pub(crate) fn entropy_y_term(posts: &[SpeakerPosterior]) -> Result<f64> {
    let ny = posts.first().map(|p| p.ny()).unwrap_or(0) as f64;
    let mut ld = 0.0;
    for p in posts {
        if !p.ln_det_precision.is_finite() {
            return Err(SpldaError::NotPositiveDefinite { what: "speaker posterior precision" });
        }
        ld += p.ln_det_precision;
    }
    Ok(posts.len() as f64 * ny / 2.0 * ((2.0 * PI).ln() + 1.0) - 0.5 * ld)
}

/// The four terms involving `θ` and `π_θ`, in the order
/// `E[ln P(θ|π)]`, `E[ln P(π)]`, `−E[ln q(θ)]`, `−E[ln q(π)]`.
pub(crate) fn mixture_terms(resp: &Responsibilities, dir: &DirichletPosterior, tau0: f64) -> [f64; 4] {
    let m = dir.len();
    if m == 0 {
        return [0.0; 4];
    }
    let counts = resp.counts();
    let theta: f64 = counts.iter().zip(dir.e_ln_pi.iter()).map(|(n, e)| n * e).sum();
    let sum_e: f64 = dir.e_ln_pi.sum();
    let ln_c0 = ln_gamma(m as f64 * tau0) - m as f64 * ln_gamma(tau0);
    let prior = ln_c0 + (tau0 - 1.0) * sum_e;
    let ent_theta = -resp.r.iter().filter(|&&r| r > 0.0).map(|&r| r * r.ln()).sum::<f64>();
    let ln_c = ln_dirichlet_norm(dir.tau.as_slice());
    let q_pi = ln_c + dir.tau.iter().zip(dir.e_ln_pi.iter()).map(|(t, e)| (t - 1.0) * e).sum::<f64>();
    [theta, prior, ent_theta, -q_pi]
}

/// `(N/2) ln|W/2π| − ½ tr(W(S − 2C̃Ṽᵀ + ṼR̃Ṽᵀ))`.
pub(crate) fn data_term_point(model: &SpldaModel, scatter: &DMatrix<f64>, acc: &Accumulators) -> f64 {
    let vt = model.vtilde();
    let cv = &acc.c * vt.transpose();
    let inner = scatter - cv * 2.0 + &vt * &acc.r * vt.transpose();
    0.5 * acc.n * model.ln_det_w_2pi() - 0.5 * trace_prod(model.w(), &inner)
}

/// Unsupervised and supervised accumulators for the current state.
pub fn state_accumulators(data: &Dataset, state: &PointState) -> Result<(Accumulators, Accumulators)> {
    let ny = state
        .unsup
        .first()
        .or(state.sup.first())
        .map(|p| p.ny())
        .unwrap_or(0);
    let stats = accumulate_stats(&state.resp.r, data.phi(), SecondOrder::None)?;
    let acc = if state.unsup.is_empty() {
        Accumulators::zeros(data.dim(), ny)
    } else {
        Accumulators::from_stats(&stats, &state.unsup)?
    };
    let acc_d = if state.sup.is_empty() {
        Accumulators::zeros(data.dim(), ny)
    } else {
        Accumulators::from_stats(data.sup_stats(), &state.sup)?
    };
    Ok((acc, acc_d))
}

/// The ten-term lower bound of the point variant (labelled terms unweighted).
pub fn elbo_point(data: &Dataset, state: &PointState, model: &SpldaModel, hyper: &Hyperparams) -> Result<ElboBreakdown> {
    let (acc, acc_d) = state_accumulators(data, state)?;
    let [theta, prior_pi, ent_theta, ent_pi] = mixture_terms(&state.resp, &state.dir, hyper.tau0);
    Ok(ElboBreakdown::from_terms(vec![
        (terms::DATA, data_term_point(model, data.unsup_scatter(), &acc)),
        (terms::PRIOR_Y, prior_y_term(&state.unsup)),
        (terms::THETA, theta),
        (terms::PRIOR_PI, prior_pi),
        (terms::DATA_SUP, data_term_point(model, data.sup_scatter(), &acc_d)),
        (terms::PRIOR_Y_SUP, prior_y_term(&state.sup)),
        (terms::ENT_Y, entropy_y_term(&state.unsup)?),
        (terms::ENT_THETA, ent_theta),
        (terms::ENT_PI, ent_pi),
        (terms::ENT_Y_SUP, entropy_y_term(&state.sup)?),
    ]))
}

/// Model-dependent part of the bound with the labelled set weighted by `η`:
/// `E[ln P(Φ|Y,θ)] + η E[ln P(Φ_d|Y_d)]`.
pub fn mstep_objective(data: &Dataset, state: &PointState, model: &SpldaModel, eta: f64) -> Result<f64> {
    let (acc, acc_d) = state_accumulators(data, state)?;
    Ok(data_term_point(model, data.unsup_scatter(), &acc) + eta * data_term_point(model, data.sup_scatter(), &acc_d))
}

/// Solves `Ṽ R̃′ = C̃′` with `C̃′ = C̃ + ηC̃_d`, `R̃′ = R̃ + ηR̃_d`.
pub fn mstep_v(acc: &Accumulators, acc_d: &Accumulators, eta: f64) -> Result<DMatrix<f64>> {
    let tot = acc.weighted_sum(acc_d, eta);
    let cond = linalg::condition_estimate(&tot.r);
    if !(cond < 1e13) {
        return Err(SpldaError::Singular { what: "R̃′", condition: cond });
    }
    let chol = linalg::cholesky(&tot.r, "R̃′")?;
    // R̃′ Ṽᵀ = C̃′ᵀ
    Ok(chol.solve(&tot.c.transpose()).transpose())
}

/// `W⁻¹ = (K + Kᵀ) / (2(E[N] + ηN_d))` with
/// `K = E[S] + ηS_d − 2C̃′Ṽᵀ + ṼR̃′Ṽᵀ`.
pub fn mstep_w(
    scatter: &DMatrix<f64>,
    scatter_d: &DMatrix<f64>,
    acc: &Accumulators,
    acc_d: &Accumulators,
    vtilde: &DMatrix<f64>,
    eta: f64,
) -> Result<DMatrix<f64>> {
    let d = scatter.nrows();
    let tot = acc.weighted_sum(acc_d, eta);
    if !(tot.n > d as f64) {
        return Err(SpldaError::Degenerate(format!(
            "effective count {} must exceed the dimension {d} to estimate W",
            tot.n
        )));
    }
    let k = residual_scatter(scatter, scatter_d, &tot, vtilde, eta);
    let cov = (&k + k.transpose()) / (2.0 * tot.n);
    let chol = linalg::cholesky(&cov, "within-class covariance (K + Kᵀ)/2N′")?;
    Ok(linalg::symmetrized(chol.inverse()))
}

/// `K = E[S] + ηS_d − 2C̃′Ṽᵀ + ṼR̃′Ṽᵀ` from already weighted accumulators.
pub fn residual_scatter(
    scatter: &DMatrix<f64>,
    scatter_d: &DMatrix<f64>,
    tot: &Accumulators,
    vtilde: &DMatrix<f64>,
    eta: f64,
) -> DMatrix<f64> {
    scatter + scatter_d * eta - &tot.c * vtilde.transpose() * 2.0 + vtilde * &tot.r * vtilde.transpose()
}

/// Outcome of a scalar Newton solve.
#[derive(Debug, Clone, PartialEq)]
pub struct NewtonResult {
    pub value: f64,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub warning: Option<String>,
}

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 100;

/// Newton iterations on `t = ln x` for a monotone `f(x)`, falling back to
/// bisection whenever a step leaves the current sign bracket. `fprime_t`
/// is `df/dt = x f′(x)`. The iterate is clamped to `x_max`.
pub(crate) fn log_newton(
    f: impl Fn(f64) -> f64,
    fprime_t: impl Fn(f64) -> f64,
    x0: f64,
    x_max: f64,
) -> NewtonResult {
    let mut t = x0.max(1e-300).ln();
    let t_max = x_max.ln();
    t = t.min(t_max);
    let (mut t_pos, mut t_neg) = (None::<f64>, None::<f64>);
    let mut best = (f64::INFINITY, t);
    for it in 0..NEWTON_MAX_ITER {
        let x = t.exp();
        let fx = f(x);
        if fx.abs() < best.0 {
            best = (fx.abs(), t);
        }
        if fx.abs() < NEWTON_TOL {
            return NewtonResult { value: x, residual: fx.abs(), iterations: it, converged: true, warning: None };
        }
        if fx > 0.0 {
            t_pos = Some(t);
        } else {
            t_neg = Some(t);
        }
        let slope = fprime_t(x);
        let mut next = t - fx / slope;
        if !next.is_finite() {
            next = t;
        }
        // limit blind steps to a factor e^5 in x
        next = next.clamp(t - 5.0, t + 5.0);
        if let (Some(a), Some(b)) = (t_pos, t_neg) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
        }
        if next >= t_max {
            if t >= t_max {
                return NewtonResult {
                    value: x_max,
                    residual: f(x_max).abs(),
                    iterations: it + 1,
                    converged: false,
                    warning: Some(format!("solution exceeds {x_max:e}; clamped")),
                };
            }
            next = t_max;
        }
        t = next;
    }
    let x = best.1.exp();
    NewtonResult {
        value: x,
        residual: best.0,
        iterations: NEWTON_MAX_ITER,
        converged: false,
        warning: Some(format!("no convergence after {NEWTON_MAX_ITER} iterations; returning best iterate")),
    }
}

/// Maximizes the bound over `τ₀`: root of `ψ(Mτ₀) − ψ(τ₀) + g` with
/// `g = (1/M) Σ E[ln π_i]`.
pub fn mstep_tau0(e_ln_pi: &[f64], tau0_init: f64) -> Result<NewtonResult> {
    let m = e_ln_pi.len();
    if m < 2 {
        return Err(SpldaError::InvalidInput("tau0 estimation needs at least two speakers".into()));
    }
    if !(tau0_init > 0.0) {
        return Err(SpldaError::InvalidInput("tau0 start must be > 0".into()));
    }
    let mf = m as f64;
    let g = e_ln_pi.iter().sum::<f64>() / mf;
    if !(g < 0.0) {
        return Err(SpldaError::InvalidInput(format!("mean E[ln pi] must be negative, got {g}")));
    }
    let f = |x: f64| digamma(mf * x) - digamma(x) + g;
    let fp = |x: f64| x * (mf * trigamma(mf * x) - trigamma(x));
    Ok(log_newton(f, fp, tau0_init, 1e10))
}

/// Result of the minimum-divergence step: the transformed model and the
/// affine map `y = μ_y + T y′` it absorbed.
#[derive(Debug, Clone, PartialEq)]
pub struct MinDivergence {
    pub model: SpldaModel,
    pub shift: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl MinDivergence {
    /// Expresses a posterior over `y` in the new coordinates `y′ = T⁻¹(y − μ_y)`.
    pub fn transform_posterior(&self, p: &SpeakerPosterior) -> Result<SpeakerPosterior> {
        let t = &self.factor;
        let mean = t
            .solve_lower_triangular(&(&p.mean - &self.shift))
            .ok_or(SpldaError::Singular { what: "minimum-divergence factor", condition: f64::INFINITY })?;
        let precision = t.transpose() * &p.precision * t;
        SpeakerPosterior::from_precision(mean, precision)
    }
}

/// Re-standardizes the speaker-factor prior: fits `N(μ_y, Σ_y)` to the
/// posteriors and folds it into `μ′ = μ + Vμ_y`, `V′ = V T` with `TTᵀ = Σ_y`
/// (lower Cholesky factor).
pub fn min_divergence(
    unsup: &[SpeakerPosterior],
    sup: &[SpeakerPosterior],
    model: &SpldaModel,
    eta: f64,
) -> Result<MinDivergence> {
    let ny = model.ny();
    let weight = unsup.len() as f64 + eta * sup.len() as f64;
    if !(weight > 0.0) {
        return Err(SpldaError::InvalidInput("minimum divergence needs at least one speaker".into()));
    }
    let mut sum = DVector::zeros(ny);
    let mut rho = DMatrix::zeros(ny, ny);
    for p in unsup {
        sum += &p.mean;
        rho += &p.second_moment;
    }
    let mut sum_d = DVector::zeros(ny);
    let mut rho_d = DMatrix::zeros(ny, ny);
    for p in sup {
        sum_d += &p.mean;
        rho_d += &p.second_moment;
    }
    let shift = (sum + sum_d * eta) / weight;
    let sigma = linalg::symmetrized((rho + rho_d * eta) / weight - &shift * shift.transpose());
    let factor = linalg::lower_factor(&sigma, "speaker factor covariance Σ_y")?;
    let mu = model.mu() + model.v() * &shift;
    let v = model.v() * &factor;
    Ok(MinDivergence {
        model: SpldaModel::new(mu, v, model.w().clone())?,
        shift,
        factor,
    })
}

/// One coordinate-ascent sweep `q(Y, Y_d) → q(θ) → q(π)`.
pub fn sweep_point(data: &Dataset, state: &mut PointState, model: &SpldaModel, hyper: &Hyperparams, kappa: f64) -> Result<()> {
    refresh_q_y(data, state, model, kappa)?;
    state.resp = update_q_theta(data.phi(), &state.unsup, model, &state.dir, kappa)?;
    state.dir = update_q_pi(&state.resp.counts(), hyper.tau0, kappa)?;
    Ok(())
}

/// Recomputes `q(Y)` and `q(Y_d)` from the current responsibilities.
pub fn refresh_q_y(data: &Dataset, state: &mut PointState, model: &SpldaModel, kappa: f64) -> Result<()> {
    let mut stats = accumulate_stats(&state.resp.r, data.phi(), SecondOrder::None)?;
    stats.center(model.mu())?;
    state.unsup = update_q_y(&stats, model, kappa)?;
    let mut sup = data.sup_stats().clone();
    sup.center(model.mu())?;
    state.sup = update_q_y(&sup, model, kappa)?;
    Ok(())
}

/// `Ṽ` then `W` M-steps from the current posteriors.
pub fn mstep_model(data: &Dataset, state: &PointState, eta: f64) -> Result<SpldaModel> {
    let (acc, acc_d) = state_accumulators(data, state)?;
    mstep_from_accumulators(data, &acc, &acc_d, eta)
}

pub(crate) fn mstep_from_accumulators(data: &Dataset, acc: &Accumulators, acc_d: &Accumulators, eta: f64) -> Result<SpldaModel> {
    let vt = mstep_v(acc, acc_d, eta)?;
    let w = mstep_w(data.unsup_scatter(), data.sup_scatter(), acc, acc_d, &vt, eta)?;
    SpldaModel::from_vtilde(&vt, w)
}
