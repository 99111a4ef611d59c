//! Synthetic data from the SPLDA generative model, verification scoring and
//! the independent oracles used by the test suites.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};

use crate::error::{shape_err, Result, SpldaError};
use crate::linalg;
use crate::model::{Dataset, SpldaModel};

/// Number of i-vectors drawn per speaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PerSpeaker {
    Fixed(usize),
    /// Uniform on the inclusive range.
    Range(usize, usize),
}

impl PerSpeaker {
    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            PerSpeaker::Fixed(n) => n,
            PerSpeaker::Range(lo, hi) => rng.random_range(lo..=hi),
        }
    }

    fn min(&self) -> usize {
        match *self {
            PerSpeaker::Fixed(n) => n,
            PerSpeaker::Range(lo, _) => lo,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelSource {
    /// `V` has i.i.d. `N(0, s²/n_y)` entries so that each dimension has
    /// between-speaker standard deviation about `eigen_scale`; `W⁻¹` is
    /// diagonal with variances `noise_scale²·u`, `u ~ U(0.5, 1.5)`.
    Random { eigen_scale: f64, noise_scale: f64 },
    Provided(SpldaModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub d: usize,
    pub ny: usize,
    /// Speakers in the unlabelled set.
    pub m_true: usize,
    pub per_speaker: PerSpeaker,
    /// Speakers in the labelled set, disjoint from the unlabelled ones.
    pub sup_speakers: usize,
    pub sup_per_speaker: PerSpeaker,
    pub model: ModelSource,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.ny == 0 || self.ny > self.d {
            return Err(SpldaError::InvalidInput(format!(
                "need 1 <= n_y <= d, got d={} n_y={}",
                self.d, self.ny
            )));
        }
        if self.m_true == 0 && self.sup_speakers == 0 {
            return Err(SpldaError::InvalidInput("no speakers requested".into()));
        }
        for p in [self.per_speaker, self.sup_per_speaker] {
            if let PerSpeaker::Range(lo, hi) = p {
                if lo > hi {
                    return Err(SpldaError::InvalidInput(format!("empty per-speaker range {lo}..{hi}")));
                }
            }
        }
        if self.per_speaker.min() == 0 && self.m_true > 0 || self.sup_per_speaker.min() == 0 && self.sup_speakers > 0 {
            return Err(SpldaError::InvalidInput("speakers need at least one i-vector".into()));
        }
        match &self.model {
            ModelSource::Random { eigen_scale, noise_scale } => {
                if !(*eigen_scale >= 0.0 && *noise_scale >= 0.0) {
                    return Err(SpldaError::InvalidInput("scales must be non-negative".into()));
                }
            }
            ModelSource::Provided(m) => {
                if m.dim() != self.d || m.ny() != self.ny {
                    return Err(shape_err("provided model", format!("d={} n_y={}", self.d, self.ny), format!("d={} n_y={}", m.dim(), m.ny())));
                }
            }
        }
        Ok(())
    }
}

/// Generated data together with the ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub dataset: Dataset,
    /// Speaker of each unlabelled i-vector.
    pub true_labels: Vec<usize>,
    pub model: SpldaModel,
}

/// Smallest noise variance stored in a generated model; a zero noise scale
/// still produces exact duplicates.
const MIN_NOISE_VAR: f64 = 1e-12;

fn random_model(d: usize, ny: usize, eigen: f64, noise: f64, rng: &mut ChaCha8Rng) -> Result<(SpldaModel, DVector<f64>)> {
    let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let v = DMatrix::from_fn(d, ny, |_, _| rng.sample::<f64, _>(StandardNormal) * eigen / (ny as f64).sqrt());
    let sd = DVector::from_fn(d, |_, _| noise * rng.random_range(0.5..1.5_f64).sqrt());
    let w = DMatrix::from_diagonal(&sd.map(|s| 1.0 / (s * s).max(MIN_NOISE_VAR)));
    Ok((SpldaModel::new(mu, v, w)?, sd))
}

/// Draws labelled and unlabelled i-vectors from `φ = μ + V y + ε`.
pub fn generate(spec: &SynthSpec) -> Result<Synthetic> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (model, noise_factor) = match &spec.model {
        ModelSource::Random { eigen_scale, noise_scale } => {
            let (m, sd) = random_model(spec.d, spec.ny, *eigen_scale, *noise_scale, &mut rng)?;
            (m, NoiseFactor::Diagonal(sd))
        }
        ModelSource::Provided(m) => {
            let l = linalg::lower_factor(&m.w_inverse(), "W⁻¹")?;
            (m.clone(), NoiseFactor::Full(l))
        }
    };
    let draw_speakers = |m: usize, per: PerSpeaker, rng: &mut ChaCha8Rng| {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..m {
            let y = DVector::from_fn(spec.ny, |_, _| rng.sample::<f64, _>(StandardNormal));
            let center = model.mu() + model.v() * y;
            for _ in 0..per.draw(rng) {
                let z = DVector::from_fn(spec.d, |_, _| rng.sample::<f64, _>(StandardNormal));
                rows.push(&center + noise_factor.apply(&z));
                labels.push(i);
            }
        }
        (rows, labels)
    };
    let (sup_rows, labels_d) = draw_speakers(spec.sup_speakers, spec.sup_per_speaker, &mut rng);
    let (unsup_rows, true_labels) = draw_speakers(spec.m_true, spec.per_speaker, &mut rng);
    let stack = |rows: &[DVector<f64>]| DMatrix::from_fn(rows.len(), spec.d, |j, k| rows[j][k]);
    let dataset = Dataset::new(stack(&unsup_rows), stack(&sup_rows), labels_d)?;
    Ok(Synthetic { dataset, true_labels, model })
}

enum NoiseFactor {
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

impl NoiseFactor {
    fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            NoiseFactor::Diagonal(sd) => sd.component_mul(z),
            NoiseFactor::Full(l) => l * z,
        }
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio for pairs of
/// i-vectors, with the two Gaussian joint densities factorized once.
#[derive(Debug, Clone)]
pub struct PairScorer {
    mu: DVector<f64>,
    same: Cholesky<f64, nalgebra::Dyn>,
    single: Cholesky<f64, nalgebra::Dyn>,
    constant: f64,
}

impl PairScorer {
    pub fn new(model: &SpldaModel) -> Result<Self> {
        let d = model.dim();
        let b = model.v() * model.v().transpose();
        let t = &b + model.w_inverse();
        let mut joint = DMatrix::zeros(2 * d, 2 * d);
        joint.view_mut((0, 0), (d, d)).copy_from(&t);
        joint.view_mut((d, d), (d, d)).copy_from(&t);
        joint.view_mut((0, d), (d, d)).copy_from(&b);
        joint.view_mut((d, 0), (d, d)).copy_from(&b);
        let same = linalg::cholesky(&linalg::symmetrized(joint), "same-speaker pair covariance")?;
        let single = linalg::cholesky(&linalg::symmetrized(t), "marginal covariance")?;
        // Gaussian constants: −½ln|Σ_same| + ½·2·ln|Σ_single| (the 2π terms cancel)
        let constant = -0.5 * linalg::ln_det(&same) + linalg::ln_det(&single);
        Ok(Self { mu: model.mu().clone(), same, single, constant })
    }

    pub fn score(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let d = self.mu.len();
        let xa = a - &self.mu;
        let xb = b - &self.mu;
        let mut x = DVector::zeros(2 * d);
        x.rows_mut(0, d).copy_from(&xa);
        x.rows_mut(d, d).copy_from(&xb);
        let q_same = x.dot(&self.same.solve(&x));
        let q_a = xa.dot(&self.single.solve(&xa));
        let q_b = xb.dot(&self.single.solve(&xb));
        self.constant - 0.5 * q_same + 0.5 * (q_a + q_b)
    }

    /// Symmetric matrix of scores between all rows of `phi`.
    pub fn score_matrix(&self, phi: &DMatrix<f64>) -> DMatrix<f64> {
        let n = phi.nrows();
        let rows: Vec<DVector<f64>> = (0..n).map(|j| linalg::row_vec(phi, j)).collect();
        let mut s = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self.score(&rows[i], &rows[j]);
                s[(i, j)] = v;
                s[(j, i)] = v;
            }
        }
        s
    }
}

/// `ln p(φ_a, φ_b | same speaker) − ln p(φ_a) − ln p(φ_b)`.
pub fn pairwise_llr(model: &SpldaModel, phi_a: &DVector<f64>, phi_b: &DVector<f64>) -> Result<f64> {
    if phi_a.len() != model.dim() || phi_b.len() != model.dim() {
        return Err(shape_err("pairwise_llr", model.dim(), phi_a.len().max(phi_b.len())));
    }
    Ok(PairScorer::new(model)?.score(phi_a, phi_b))
}

/// Central-difference gradient of `objective` at `params`.
pub fn fd_gradient(objective: &dyn Fn(&[f64]) -> Result<f64>, params: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(SpldaError::InvalidInput("finite-difference step must be > 0".into()));
    }
    let mut x = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for k in 0..params.len() {
        let h = step * params[k].abs().max(1.0);
        x[k] = params[k] + h;
        let fp = objective(&x)?;
        x[k] = params[k] - h;
        let fm = objective(&x)?;
        x[k] = params[k];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(SpldaError::Degenerate(format!("objective not finite while probing coordinate {k}")));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest finite-difference gradient component at a claimed stationary
/// point, relative to the scale `max(|f|, 1) / max(‖x‖∞, 1)`.
pub fn fd_gradient_check(objective: &dyn Fn(&[f64]) -> Result<f64>, params: &[f64], step: f64) -> Result<f64> {
    let f0 = objective(params)?;
    if !f0.is_finite() {
        return Err(SpldaError::Degenerate("objective not finite at the evaluation point".into()));
    }
    let grad = fd_gradient(objective, params, step)?;
    let xmax = params.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let scale = f0.abs().max(1.0) / xmax;
    Ok(grad.iter().fold(0.0_f64, |m, g| m.max(g.abs())) / scale)
}

/// Agreement between a predicted and a reference partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub ari: f64,
    pub purity: f64,
    /// Counts indexed by (predicted cluster, true cluster) in order of first
    /// appearance.
    pub confusion: Vec<Vec<usize>>,
}

fn dense_ids(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = HashMap::new();
    let ids = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

fn choose2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting and majority-vote purity.
pub fn clustering_metrics(pred: &[usize], truth: &[usize]) -> Result<MetricReport> {
    if pred.len() != truth.len() {
        return Err(shape_err("clustering_metrics", truth.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(SpldaError::InvalidInput("empty labelling".into()));
    }
    let (p, np) = dense_ids(pred);
    let (t, nt) = dense_ids(truth);
    let mut confusion = vec![vec![0usize; nt]; np];
    for (a, b) in p.iter().zip(&t) {
        confusion[*a][*b] += 1;
    }
    let n = pred.len();
    let sum_ij: f64 = confusion.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = confusion.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..nt).map(|k| choose2(confusion.iter().map(|row| row[k]).sum())).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if max_index - expected == 0.0 { 1.0 } else { (sum_ij - expected) / (max_index - expected) };
    let purity = confusion.iter().map(|row| *row.iter().max().unwrap_or(&0)).sum::<usize>() as f64 / n as f64;
    Ok(MetricReport { ari, purity, confusion })
}

/// Distributions the Monte-Carlo oracle can sample.
#[derive(Debug, Clone, PartialEq)]
pub enum DistSpec {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    /// Independent Gaussian rows; draws are matrices.
    RowGaussians { means: DMatrix<f64>, covs: Vec<DMatrix<f64>> },
    /// `Wishart(K⁻¹, dof)`; draws are matrices.
    Wishart { k: DMatrix<f64>, dof: f64 },
    Dirichlet { tau: DVector<f64> },
    /// Independent `Gamma(shape, rate_q)` per component.
    Gamma { shape: f64, rate: DVector<f64> },
    /// Independent components drawn jointly.
    Product(Vec<DistSpec>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Draw {
    Vector(DVector<f64>),
    Matrix(DMatrix<f64>),
    Product(Vec<Draw>),
}

impl Draw {
    pub fn vector(&self) -> Result<&DVector<f64>> {
        match self {
            Draw::Vector(v) => Ok(v),
            _ => Err(SpldaError::InvalidInput("integrand expected a vector draw".into())),
        }
    }

    pub fn matrix(&self) -> Result<&DMatrix<f64>> {
        match self {
            Draw::Matrix(m) => Ok(m),
            _ => Err(SpldaError::InvalidInput("integrand expected a matrix draw".into())),
        }
    }

    pub fn part(&self, i: usize) -> Result<&Draw> {
        match self {
            Draw::Product(parts) => parts
                .get(i)
                .ok_or_else(|| SpldaError::InvalidInput(format!("product draw has no component {i}"))),
            _ => Err(SpldaError::InvalidInput("integrand expected a product draw".into())),
        }
    }
}

enum Sampler {
    Gaussian { mean: DVector<f64>, l: DMatrix<f64> },
    Rows { means: DMatrix<f64>, ls: Vec<DMatrix<f64>> },
    Wishart { l: DMatrix<f64>, dof: f64 },
    Dirichlet(Vec<Gamma<f64>>),
    Gamma(Vec<Gamma<f64>>),
    Product(Vec<Sampler>),
}

/// Lower factor of a PSD covariance; zero blocks are allowed.
fn psd_factor(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if cov.iter().all(|&v| v == 0.0) {
        return Ok(DMatrix::zeros(cov.nrows(), cov.ncols()));
    }
    linalg::lower_factor(cov, "sampling covariance")
}

impl Sampler {
    fn build(spec: &DistSpec) -> Result<Self> {
        let bad = |m: &str| Err(SpldaError::InvalidInput(format!("unsupported distribution: {m}")));
        Ok(match spec {
            DistSpec::Gaussian { mean, cov } => {
                if cov.shape() != (mean.len(), mean.len()) {
                    return bad("Gaussian covariance shape");
                }
                Sampler::Gaussian { mean: mean.clone(), l: psd_factor(cov)? }
            }
            DistSpec::RowGaussians { means, covs } => {
                if covs.len() != means.nrows() || covs.iter().any(|c| c.shape() != (means.ncols(), means.ncols())) {
                    return bad("row covariance shapes");
                }
                Sampler::Rows { means: means.clone(), ls: covs.iter().map(psd_factor).collect::<Result<_>>()? }
            }
            DistSpec::Wishart { k, dof } => {
                if !(*dof > k.nrows() as f64 - 1.0) {
                    return bad("Wishart degrees of freedom must exceed d - 1");
                }
                let scale = linalg::spd_inverse(k, "Wishart K")?;
                Sampler::Wishart { l: linalg::lower_factor(&scale, "Wishart scale")?, dof: *dof }
            }
            DistSpec::Dirichlet { tau } => {
                if tau.is_empty() {
                    return bad("empty Dirichlet");
                }
                let g = tau
                    .iter()
                    .map(|&t| Gamma::new(t, 1.0).map_err(|e| SpldaError::InvalidInput(e.to_string())))
                    .collect::<Result<_>>()?;
                Sampler::Dirichlet(g)
            }
            DistSpec::Gamma { shape, rate } => {
                let g = rate
                    .iter()
                    .map(|&r| Gamma::new(*shape, 1.0 / r).map_err(|e| SpldaError::InvalidInput(e.to_string())))
                    .collect::<Result<_>>()?;
                Sampler::Gamma(g)
            }
            DistSpec::Product(parts) => {
                if parts.is_empty() {
                    return bad("empty product");
                }
                Sampler::Product(parts.iter().map(Sampler::build).collect::<Result<_>>()?)
            }
        })
    }

    fn normal_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        match self {
            Sampler::Gaussian { mean, l } => Draw::Vector(mean + l * Self::normal_vec(mean.len(), rng)),
            Sampler::Rows { means, ls } => {
                let mut m = means.clone();
                for (r, l) in ls.iter().enumerate() {
                    let z = l * Self::normal_vec(means.ncols(), rng);
                    for c in 0..means.ncols() {
                        m[(r, c)] += z[c];
                    }
                }
                Draw::Matrix(m)
            }
            Sampler::Wishart { l, dof } => {
                // Bartlett decomposition
                let d = l.nrows();
                let mut a = DMatrix::zeros(d, d);
                for i in 0..d {
                    let chi = ChiSquared::new(dof - i as f64).expect("validated degrees of freedom");
                    a[(i, i)] = chi.sample(rng).sqrt();
                    for j in 0..i {
                        a[(i, j)] = rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let la = l * a;
                Draw::Matrix(&la * la.transpose())
            }
            Sampler::Dirichlet(gs) => {
                let x: Vec<f64> = gs.iter().map(|g| g.sample(rng)).collect();
                let s: f64 = x.iter().sum();
                Draw::Vector(DVector::from_iterator(x.len(), x.into_iter().map(|v| v / s)))
            }
            Sampler::Gamma(gs) => Draw::Vector(DVector::from_iterator(gs.len(), gs.iter().map(|g| g.sample(rng)))),
            Sampler::Product(parts) => Draw::Product(parts.iter().map(|p| p.draw(rng)).collect()),
        }
    }
}

/// Monte-Carlo estimate of `E[g(x)]` with its standard error, per output
/// component of the integrand.
pub fn mc_expectation_oracle(
    dist: &DistSpec,
    integrand: &dyn Fn(&Draw) -> Result<Vec<f64>>,
    n_draws: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_draws < 2 {
        return Err(SpldaError::InvalidInput("need at least two draws".into()));
    }
    let sampler = Sampler::build(dist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean: Vec<f64> = Vec::new();
    let mut m2: Vec<f64> = Vec::new();
    for n in 1..=n_draws {
        let g = integrand(&sampler.draw(&mut rng))?;
        if n == 1 {
            mean = vec![0.0; g.len()];
            m2 = vec![0.0; g.len()];
        } else if g.len() != mean.len() {
            return Err(shape_err("integrand output", mean.len(), g.len()));
        }
        // Welford update
        for (k, v) in g.iter().enumerate() {
            let delta = v - mean[k];
            mean[k] += delta / n as f64;
            m2[k] += delta * (v - mean[k]);
        }
    }
    let nf = n_draws as f64;
    Ok(mean.into_iter().zip(m2).map(|(m, s)| (m, (s / (nf - 1.0) / nf).sqrt())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> SynthSpec {
        SynthSpec {
            d: 3,
            ny: 2,
            m_true: 4,
            per_speaker: PerSpeaker::Fixed(5),
            sup_speakers: 3,
            sup_per_speaker: PerSpeaker::Range(2, 4),
            model: ModelSource::Random { eigen_scale: 2.0, noise_scale: 1.0 },
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec(3)).unwrap(), generate(&spec(3)).unwrap());
        assert_ne!(generate(&spec(3)).unwrap().dataset, generate(&spec(4)).unwrap().dataset);
    }

    #[test]
    fn zero_noise_duplicates_rows() {
        let mut s = spec(1);
        s.model = ModelSource::Random { eigen_scale: 1.0, noise_scale: 0.0 };
        let g = generate(&s).unwrap();
        let phi = g.dataset.phi();
        for j in 1..phi.nrows() {
            if g.true_labels[j] == g.true_labels[j - 1] {
                assert_eq!(phi.row(j), phi.row(j - 1));
            }
        }
    }

    #[test]
    fn counts_follow_spec() {
        let g = generate(&spec(9)).unwrap();
        assert_eq!(g.dataset.n_unsup(), 20);
        assert_eq!(g.true_labels.len(), 20);
        assert!((6..=12).contains(&g.dataset.n_sup()));
        assert_eq!(g.dataset.n_speakers_d(), 3);
    }

    #[test]
    fn llr_zero_without_speaker_subspace() {
        let model = SpldaModel::new(DVector::zeros(2), DMatrix::zeros(2, 1), DMatrix::identity(2, 2)).unwrap();
        let a = DVector::from_vec(vec![0.3, -1.0]);
        let b = DVector::from_vec(vec![2.0, 0.5]);
        assert!(pairwise_llr(&model, &a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn llr_positive_for_identical_pair() {
        let model = SpldaModel::new(DVector::zeros(2), DMatrix::identity(2, 1) * 3.0, DMatrix::identity(2, 2)).unwrap();
        let a = DVector::from_vec(vec![0.0, 0.0]);
        assert!(pairwise_llr(&model, &a, &a).unwrap() > 0.0);
    }

    #[test]
    fn ari_examples() {
        let m = clustering_metrics(&[0, 0, 1, 1, 2], &[5, 5, 7, 7, 9]).unwrap();
        assert_eq!((m.ari, m.purity), (1.0, 1.0));
        let one = clustering_metrics(&[0; 6], &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!(one.ari.abs() < 1e-15);
        assert!(clustering_metrics(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn ari_hand_pair_count() {
        // pred {0,1,2},{3,4}; truth {0,1},{2,3,4}
        // n_ij: [[2,1],[0,2]] → Σ C(n_ij,2) = 1 + 0 + 0 + 1 = 2
        // rows: C(3,2)+C(2,2) = 4; cols: C(2,2)+C(3,2) = 4; C(5,2) = 10
        // expected = 1.6, max = 4 → ARI = 0.4 / 2.4
        let m = clustering_metrics(&[0, 0, 0, 1, 1], &[0, 0, 1, 1, 1]).unwrap();
        assert!((m.ari - 0.4 / 2.4).abs() < 1e-15);
        assert!((m.purity - 0.8).abs() < 1e-15);
    }

    #[test]
    fn fd_check_on_quadratic() {
        let c = [1.5, -2.0, 0.25];
        let f = |x: &[f64]| -> Result<f64> { Ok(-0.5 * x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + 3.0) };
        assert!(fd_gradient_check(&f, &c, 1e-5).unwrap() < 1e-10);
        let off = [1.6, -2.0, 0.25];
        assert!(fd_gradient_check(&f, &off, 1e-5).unwrap() > 1e-3);
    }

    #[test]
    fn mc_simple_means() {
        let dir = DistSpec::Dirichlet { tau: DVector::from_vec(vec![2.0, 2.0]) };
        let est = mc_expectation_oracle(&dir, &|x| Ok(vec![x.vector()?[0]]), 20_000, 1).unwrap();
        assert!((est[0].0 - 0.5).abs() < 3.0 * est[0].1);
        let gam = DistSpec::Gamma { shape: 3.0, rate: DVector::from_vec(vec![2.0]) };
        let est = mc_expectation_oracle(&gam, &|x| Ok(vec![x.vector()?[0]]), 20_000, 2).unwrap();
        assert!((est[0].0 - 1.5).abs() < 3.0 * est[0].1);
    }

    #[test]
    fn mc_rejects_bad_specs() {
        let w = DistSpec::Wishart { k: DMatrix::identity(3, 3), dof: 1.0 };
        assert!(mc_expectation_oracle(&w, &|_| Ok(vec![0.0]), 10, 0).is_err());
        let g = DistSpec::Gaussian { mean: DVector::zeros(2), cov: DMatrix::identity(2, 2) };
        assert!(mc_expectation_oracle(&g, &|x| Ok(vec![x.matrix()?[(0, 0)]]), 10, 0).is_err());
    }
}
