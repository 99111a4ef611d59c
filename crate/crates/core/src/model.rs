//! The SPLDA generative model `φ = μ + V y + ε`, i-vector datasets and
//! sufficient statistics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{shape_err, Result, SpldaError};
use crate::linalg::{self, Chol};

/// Point parameters of a simplified PLDA model.
///
/// `w` is the within-class precision. It is symmetrized on construction and
/// its Cholesky factor is cached.
#[derive(Debug, Clone)]
pub struct SpldaModel {
    mu: DVector<f64>,
    v: DMatrix<f64>,
    w: DMatrix<f64>,
    w_chol: Chol,
}

impl PartialEq for SpldaModel {
    fn eq(&self, other: &Self) -> bool {
        self.mu == other.mu && self.v == other.v && self.w == other.w
    }
}

impl SpldaModel {
    pub fn new(mu: DVector<f64>, v: DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if v.nrows() != d {
            return Err(shape_err("SpldaModel::new V", format!("{d} rows"), v.nrows()));
        }
        if v.ncols() == 0 || v.ncols() > d {
            return Err(SpldaError::InvalidInput(format!(
                "speaker factor dimension must be in [1, {d}], got {}",
                v.ncols()
            )));
        }
        if w.nrows() != d || w.ncols() != d {
            return Err(shape_err("SpldaModel::new W", format!("{d}x{d}"), format!("{}x{}", w.nrows(), w.ncols())));
        }
        if mu.iter().chain(v.iter()).chain(w.iter()).any(|x| !x.is_finite()) {
            return Err(SpldaError::InvalidInput("model contains non-finite values".into()));
        }
        let w = linalg::symmetrized(w);
        let w_chol = linalg::cholesky(&w, "within-class precision W")?;
        Ok(Self { mu, v, w, w_chol })
    }

    /// Builds a model from `Ṽ = [V | μ]`.
    pub fn from_vtilde(vtilde: &DMatrix<f64>, w: DMatrix<f64>) -> Result<Self> {
        let ny = vtilde.ncols().saturating_sub(1);
        let v = vtilde.columns(0, ny).into_owned();
        let mu = vtilde.column(ny).into_owned();
        Self::new(mu, v, w)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn ny(&self) -> usize {
        self.v.ncols()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn w_chol(&self) -> &Chol {
        &self.w_chol
    }

    /// `Ṽ = [V | μ]`, a d×(n_y+1) matrix.
    pub fn vtilde(&self) -> DMatrix<f64> {
        let (d, ny) = (self.dim(), self.ny());
        let mut vt = DMatrix::zeros(d, ny + 1);
        vt.columns_mut(0, ny).copy_from(&self.v);
        vt.column_mut(ny).copy_from(&self.mu);
        vt
    }

    pub fn ln_det_w(&self) -> f64 {
        linalg::ln_det(&self.w_chol)
    }

    /// `ln|W / 2π|`.
    pub fn ln_det_w_2pi(&self) -> f64 {
        self.ln_det_w() - self.dim() as f64 * (2.0 * PI).ln()
    }

    /// `VᵀWV`.
    pub fn vtwv(&self) -> DMatrix<f64> {
        linalg::symmetrized(self.v.transpose() * &self.w * &self.v)
    }

    /// `W⁻¹`.
    pub fn w_inverse(&self) -> DMatrix<f64> {
        linalg::symmetrized(self.w_chol.inverse())
    }

    /// Marginal distribution of a single i-vector: `(μ, VVᵀ + W⁻¹)`.
    pub fn marginal_params(&self) -> (DVector<f64>, DMatrix<f64>) {
        let cov = linalg::symmetrized(&self.v * self.v.transpose() + self.w_inverse());
        (self.mu.clone(), cov)
    }
}

/// Labelled (supervised) and unlabelled i-vector collections.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    phi: DMatrix<f64>,
    phi_d: DMatrix<f64>,
    labels_d: Vec<usize>,
    n_speakers_d: usize,
    sup_stats: SuffStats,
    unsup_scatter: DMatrix<f64>,
}

impl Dataset {
    pub fn new(phi: DMatrix<f64>, phi_d: DMatrix<f64>, labels_d: Vec<usize>) -> Result<Self> {
        let d = phi_d.ncols().max(phi.ncols());
        if phi.ncols() != d && phi.nrows() > 0 {
            return Err(shape_err("Dataset unsupervised i-vectors", format!("{d} columns"), phi.ncols()));
        }
        if phi_d.ncols() != d && phi_d.nrows() > 0 {
            return Err(shape_err("Dataset supervised i-vectors", format!("{d} columns"), phi_d.ncols()));
        }
        if labels_d.len() != phi_d.nrows() {
            return Err(shape_err("Dataset labels", phi_d.nrows(), labels_d.len()));
        }
        if phi.iter().chain(phi_d.iter()).any(|x| !x.is_finite()) {
            return Err(SpldaError::InvalidInput("i-vectors contain NaN or Inf".into()));
        }
        let n_speakers_d = labels_d.iter().map(|&l| l + 1).max().unwrap_or(0);
        let mut seen = vec![false; n_speakers_d];
        for &l in &labels_d {
            seen[l] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SpldaError::InvalidInput(format!(
                "supervised speaker {missing} has no i-vectors (labels must be dense in [0, {n_speakers_d}))"
            )));
        }
        let phi = if phi.nrows() == 0 { DMatrix::zeros(0, d) } else { phi };
        let phi_d = if phi_d.nrows() == 0 { DMatrix::zeros(0, d) } else { phi_d };
        let sup_stats = SuffStats::from_labels(&labels_d, n_speakers_d, &phi_d, SecondOrder::Global)?;
        let unsup_scatter = phi.transpose() * &phi;
        Ok(Self {
            phi,
            phi_d,
            labels_d,
            n_speakers_d,
            sup_stats,
            unsup_scatter,
        })
    }

    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn phi_d(&self) -> &DMatrix<f64> {
        &self.phi_d
    }

    pub fn labels_d(&self) -> &[usize] {
        &self.labels_d
    }

    pub fn n_unsup(&self) -> usize {
        self.phi.nrows()
    }

    pub fn n_sup(&self) -> usize {
        self.phi_d.nrows()
    }

    pub fn n_speakers_d(&self) -> usize {
        self.n_speakers_d
    }

    /// Hard statistics of the supervised set, including the global `S_d`.
    pub fn sup_stats(&self) -> &SuffStats {
        &self.sup_stats
    }

    /// `E[S] = Σ_j φ_j φ_jᵀ` of the unsupervised set; independent of the
    /// responsibilities because each row sums to one.
    pub fn unsup_scatter(&self) -> &DMatrix<f64> {
        &self.unsup_scatter
    }

    pub fn sup_scatter(&self) -> &DMatrix<f64> {
        self.sup_stats.s.as_ref().expect("supervised scatter is always accumulated")
    }
}

/// Which second-order statistics to accumulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondOrder {
    None,
    /// Only the global `S = Σ_i S_i`.
    Global,
    /// Global `S` and every per-speaker `S_i`.
    PerSpeaker,
}

/// Centered statistics with respect to a mean `mu`.
#[derive(Debug, Clone, PartialEq)]
pub struct Centered {
    pub mu: DVector<f64>,
    pub fbar: Vec<DVector<f64>>,
    pub fbar_total: DVector<f64>,
    pub sbar: Option<DMatrix<f64>>,
    pub sbar_spk: Option<Vec<DMatrix<f64>>>,
}

/// Zeroth, first and second order statistics per speaker plus global sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: Vec<f64>,
    pub f: Vec<DVector<f64>>,
    pub n_total: f64,
    pub f_total: DVector<f64>,
    pub s: Option<DMatrix<f64>>,
    pub s_spk: Option<Vec<DMatrix<f64>>>,
    pub centered: Option<Centered>,
}

/// Statistics of a single speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerStats {
    pub n: f64,
    pub f: DVector<f64>,
    pub s: Option<DMatrix<f64>>,
    pub fbar: Option<DVector<f64>>,
    pub sbar: Option<DMatrix<f64>>,
}

impl SuffStats {
    pub fn n_speakers(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f_total.len()
    }

    /// Hard statistics from integer labels in `[0, m)`.
    pub fn from_labels(labels: &[usize], m: usize, phi: &DMatrix<f64>, order: SecondOrder) -> Result<Self> {
        if labels.len() != phi.nrows() {
            return Err(shape_err("from_labels", phi.nrows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(SpldaError::InvalidInput(format!("label {bad} out of range [0, {m})")));
        }
        let d = phi.ncols();
        let mut n = vec![0.0; m];
        let mut f = vec![DVector::zeros(d); m];
        let mut s_spk = matches!(order, SecondOrder::PerSpeaker).then(|| vec![DMatrix::zeros(d, d); m]);
        for (j, &l) in labels.iter().enumerate() {
            let x = linalg::row_vec(phi, j);
            n[l] += 1.0;
            f[l] += &x;
            if let Some(s) = s_spk.as_mut() {
                s[l].ger(1.0, &x, &x, 1.0);
            }
        }
        let s = match order {
            SecondOrder::None => None,
            _ => Some(phi.transpose() * phi),
        };
        Ok(Self::assemble(n, f, d, s, s_spk))
    }

    fn assemble(
        n: Vec<f64>,
        f: Vec<DVector<f64>>,
        d: usize,
        s: Option<DMatrix<f64>>,
        s_spk: Option<Vec<DMatrix<f64>>>,
    ) -> Self {
        let n_total = n.iter().sum();
        let f_total = f.iter().fold(DVector::zeros(d), |acc, fi| acc + fi);
        Self {
            n,
            f,
            n_total,
            f_total,
            s,
            s_spk,
            centered: None,
        }
    }

    /// Fills the centered statistics `F̄_i = F_i − N_i μ` and
    /// `S̄_i = S_i − μF_iᵀ − F_iμᵀ + N_i μμᵀ`.
    pub fn center(&mut self, mu: &DVector<f64>) -> Result<()> {
        let d = self.dim();
        if mu.len() != d {
            return Err(shape_err("center_stats mu", d, mu.len()));
        }
        let fbar: Vec<DVector<f64>> = self.n.iter().zip(&self.f).map(|(&n, f)| f - mu * n).collect();
        let fbar_total = fbar.iter().fold(DVector::zeros(d), |acc, x| acc + x);
        let center_scatter = |s: &DMatrix<f64>, f: &DVector<f64>, n: f64| {
            let mf = mu * f.transpose();
            linalg::symmetrized(s - &mf - mf.transpose() + (mu * mu.transpose()) * n)
        };
        let sbar = self.s.as_ref().map(|s| center_scatter(s, &self.f_total, self.n_total));
        let sbar_spk = self.s_spk.as_ref().map(|ss| {
            ss.iter()
                .zip(self.n.iter().zip(&self.f))
                .map(|(s, (&n, f))| center_scatter(s, f, n))
                .collect()
        });
        self.centered = Some(Centered {
            mu: mu.clone(),
            fbar,
            fbar_total,
            sbar,
            sbar_spk,
        });
        Ok(())
    }

    pub fn speaker(&self, i: usize) -> SpeakerStats {
        SpeakerStats {
            n: self.n[i],
            f: self.f[i].clone(),
            s: self.s_spk.as_ref().map(|s| s[i].clone()),
            fbar: self.centered.as_ref().map(|c| c.fbar[i].clone()),
            sbar: self.centered.as_ref().and_then(|c| c.sbar_spk.as_ref().map(|s| s[i].clone())),
        }
    }
}

/// Soft statistics `N_i = Σ_j r_ji`, `F_i = Σ_j r_ji φ_j` (and optionally the
/// second-order ones) from an N×M responsibility matrix.
pub fn accumulate_stats(resp: &DMatrix<f64>, phi: &DMatrix<f64>, order: SecondOrder) -> Result<SuffStats> {
    if resp.nrows() != phi.nrows() {
        return Err(shape_err(
            "accumulate_stats",
            format!("responsibilities with {} rows", phi.nrows()),
            format!("{}x{}", resp.nrows(), resp.ncols()),
        ));
    }
    validate_responsibilities(resp, 1e-9)?;
    let (m, d) = (resp.ncols(), phi.ncols());
    let n: Vec<f64> = (0..m).map(|i| resp.column(i).sum()).collect();
    // F = Rᵀ Φ, one row per speaker
    let ft = resp.transpose() * phi;
    let f: Vec<DVector<f64>> = (0..m).map(|i| ft.row(i).transpose()).collect();
    let s = match order {
        SecondOrder::None => None,
        _ => Some(phi.transpose() * phi),
    };
    let s_spk = matches!(order, SecondOrder::PerSpeaker).then(|| {
        (0..m)
            .map(|i| {
                let weighted = DMatrix::from_fn(phi.nrows(), d, |j, k| phi[(j, k)] * resp[(j, i)]);
                linalg::symmetrized(phi.transpose() * weighted)
            })
            .collect()
    });
    Ok(SuffStats::assemble(n, f, d, s, s_spk))
}

pub(crate) fn validate_responsibilities(resp: &DMatrix<f64>, tol: f64) -> Result<()> {
    for j in 0..resp.nrows() {
        let row = resp.row(j);
        if let Some(bad) = row.iter().find(|&&x| !(x >= 0.0)) {
            return Err(SpldaError::InvalidInput(format!("negative or NaN responsibility {bad} in row {j}")));
        }
        if row.iter().any(|&x| x > 1.0 + tol) {
            return Err(SpldaError::InvalidInput(format!("responsibility above 1 in row {j}")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > tol {
            return Err(SpldaError::InvalidInput(format!("responsibility row {j} sums to {s}")));
        }
    }
    Ok(())
}

/// `ln P(Φ_i | y_i)` from centered statistics:
/// `(N/2)ln|W/2π| − ½tr(W S̄) + yᵀVᵀW F̄ − (N/2) yᵀVᵀWV y`.
pub fn cond_loglik(stats: &SpeakerStats, y: &DVector<f64>, model: &SpldaModel) -> Result<f64> {
    let (fbar, sbar) = match (&stats.fbar, &stats.sbar) {
        (Some(f), Some(s)) => (f, s),
        _ => {
            return Err(SpldaError::InvalidInput(
                "cond_loglik needs centered per-speaker statistics".into(),
            ))
        }
    };
    check_dims(model, fbar.len(), y.len())?;
    if stats.n == 0.0 {
        return Ok(0.0);
    }
    let w = model.w();
    let vy = model.v() * y;
    let tr_ws = w.component_mul(sbar).sum();
    let lin = vy.dot(&(w * fbar));
    let quad = vy.dot(&(w * &vy));
    Ok(0.5 * stats.n * model.ln_det_w_2pi() - 0.5 * tr_ws + lin - 0.5 * stats.n * quad)
}

/// Same log-likelihood through the augmented form
/// `(N/2)ln|W/2π| − ½tr(W(S − 2Fỹᵀ Ṽᵀ + N Ṽỹỹᵀ Ṽᵀ))` on raw statistics.
pub fn cond_loglik_augmented(stats: &SpeakerStats, y: &DVector<f64>, model: &SpldaModel) -> Result<f64> {
    let s = stats
        .s
        .as_ref()
        .ok_or_else(|| SpldaError::InvalidInput("augmented form needs per-speaker S_i".into()))?;
    check_dims(model, stats.f.len(), y.len())?;
    if stats.n == 0.0 {
        return Ok(0.0);
    }
    let vy = model.vtilde() * linalg::augment(y);
    let fv = &stats.f * vy.transpose();
    let inner = s - &fv - fv.transpose() + (&vy * vy.transpose()) * stats.n;
    Ok(0.5 * stats.n * model.ln_det_w_2pi() - 0.5 * model.w().component_mul(&inner).sum())
}

fn check_dims(model: &SpldaModel, d: usize, ny: usize) -> Result<()> {
    if d != model.dim() {
        return Err(shape_err("statistics dimension", model.dim(), d));
    }
    if ny != model.ny() {
        return Err(shape_err("speaker factor dimension", model.ny(), ny));
    }
    Ok(())
}

/// Log density of `N(x; mean, cov)` via Cholesky.
pub fn gaussian_log_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let c = linalg::cholesky(cov, "covariance")?;
    let diff = x - mean;
    let z = c.l().solve_lower_triangular(&diff).expect("triangular solve");
    Ok(-0.5 * (x.len() as f64 * (2.0 * PI).ln() + linalg::ln_det(&c) + z.norm_squared()))
}
