//! Adaptation runs: initialization, annealing, pruning and merging of
//! speakers, and the sampling hybrid.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::bayes::{self, BayesState};
use crate::error::{shape_err, Result, SpldaError};
use crate::model::{accumulate_stats, Dataset, SecondOrder, SpldaModel, SuffStats};
use crate::point::{
    self, elbo_point, min_divergence, mstep_from_accumulators, mstep_model, mstep_tau0, refresh_q_y, sweep_point,
    update_q_pi, update_q_theta, update_q_y, Accumulators, Hyperparams, PointState, Responsibilities,
    SpeakerPosterior,
};
use crate::synth::PairScorer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Point,
    Bayes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Ahc,
    RandomY,
    Oracle,
    UniformPi,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Anneal {
    Off,
    /// `κ` starts at `kappa0` and is multiplied by `growth` after every
    /// iteration, capped at 1.
    Schedule { kappa0: f64, growth: f64 },
}

impl Anneal {
    pub const DEFAULT_SCHEDULE: Anneal = Anneal::Schedule { kappa0: 0.2, growth: 1.25 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleStrategy {
    BestSample,
    AverageAccumulators,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerConfig {
    pub k: usize,
    pub strategy: SampleStrategy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub m_init: usize,
    pub init_method: InitMethod,
    /// Labels for [`InitMethod::Oracle`].
    pub oracle_labels: Option<Vec<usize>>,
    pub anneal: Anneal,
    pub prune_merge: bool,
    /// Speakers with fewer expected i-vectors are pruned.
    pub prune_threshold: f64,
    /// Cosine similarity of responsibility columns above which speakers merge.
    pub merge_threshold: f64,
    pub prune_every: usize,
    /// After threshold pruning and merging, also try removing each remaining
    /// speaker, smallest first, keeping removals that do not lower the bound.
    pub elbo_elimination: bool,
    /// Relative lower-bound change for convergence; 0 disables early stopping.
    pub elbo_tol: f64,
    pub max_iter: usize,
    pub eta: f64,
    /// Annealing parameter used when the schedule is off.
    pub kappa: f64,
    pub sampler: Option<SamplerConfig>,
    pub seed: u64,
    /// Re-estimate `μ`, `V`, `W` (point variant).
    pub update_model: bool,
    pub min_divergence: bool,
    pub optimize_tau0: bool,
    pub optimize_alpha: bool,
    pub optimize_mu: bool,
    pub isotropic_beta: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Point,
            m_init: 10,
            init_method: InitMethod::Ahc,
            oracle_labels: None,
            anneal: Anneal::Off,
            prune_merge: false,
            prune_threshold: 0.5,
            merge_threshold: 0.95,
            prune_every: 5,
            elbo_elimination: true,
            elbo_tol: 1e-7,
            max_iter: 200,
            eta: 1.0,
            kappa: 1.0,
            sampler: None,
            seed: 0,
            update_model: true,
            min_divergence: true,
            optimize_tau0: false,
            optimize_alpha: false,
            optimize_mu: false,
            isotropic_beta: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpldaError::Config(m));
        if self.m_init == 0 {
            return bad("m_init must be >= 1".into());
        }
        if let Anneal::Schedule { kappa0, growth } = self.anneal {
            if !(kappa0 > 0.0 && kappa0 <= 1.0) {
                return bad(format!("kappa0 must be in (0, 1], got {kappa0}"));
            }
            if !(growth >= 1.0) {
                return bad(format!("growth must be >= 1, got {growth}"));
            }
        }
        if !(self.prune_threshold >= 0.0 && self.merge_threshold >= 0.0) {
            return bad("thresholds must be >= 0".into());
        }
        if self.prune_every == 0 || self.max_iter == 0 {
            return bad("prune_every and max_iter must be >= 1".into());
        }
        if !(self.elbo_tol >= 0.0) {
            return bad("elbo_tol must be >= 0".into());
        }
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return bad(format!("eta must be in [0, 1], got {}", self.eta));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return bad(format!("kappa must be in (0, 1], got {}", self.kappa));
        }
        if let Some(s) = self.sampler {
            if s.k == 0 {
                return bad("sampler needs K >= 1".into());
            }
            if self.variant != Variant::Point {
                return bad("the sampling hybrid is only available for variant=point".into());
            }
        }
        Ok(())
    }

    fn initial_kappa(&self) -> f64 {
        match self.anneal {
            Anneal::Off => self.kappa,
            Anneal::Schedule { kappa0, .. } => kappa0,
        }
    }
}

/// One row of the lower-bound trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub elbo: f64,
    pub m: usize,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Prune,
    Merge,
    /// Removal of a speaker above the prune threshold, tested on the bound.
    Eliminate,
}

/// A structural change that was attempted on the speaker set.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub iter: usize,
    pub action: Action,
    /// Speaker columns involved, in the numbering before the change.
    pub columns: Vec<usize>,
    pub accepted: bool,
    pub elbo_before: f64,
    pub elbo_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalState {
    Point(PointState),
    Bayes(BayesState),
}

impl FinalState {
    pub fn latent(&self) -> &PointState {
        match self {
            FinalState::Point(s) => s,
            FinalState::Bayes(s) => &s.latent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub trace: Vec<TraceRow>,
    /// Hard labels of the unlabelled i-vectors.
    pub labels: Vec<usize>,
    pub model: SpldaModel,
    pub state: FinalState,
    /// Hyperparameters at the end of the run, including optimized ones.
    pub hyper: Hyperparams,
    pub events: Vec<Event>,
    pub warnings: Vec<String>,
    pub converged: bool,
}

impl RunReport {
    pub fn final_elbo(&self) -> f64 {
        self.trace.last().map(|r| r.elbo).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn final_m(&self) -> usize {
        self.state.latent().n_speakers()
    }
}

/// Average-linkage agglomerative clustering on a similarity matrix, cut at
/// `m` clusters. Clusters are numbered by their smallest member.
pub fn average_linkage(scores: &DMatrix<f64>, m: usize) -> Result<Vec<usize>> {
    let n = scores.nrows();
    if scores.ncols() != n {
        return Err(shape_err("average_linkage", "square matrix", format!("{}x{}", n, scores.ncols())));
    }
    if m == 0 {
        return Err(SpldaError::InvalidInput("cannot cut into zero clusters".into()));
    }
    let mut sim = scores.clone();
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|j| vec![j]).collect();
    let mut clusters = n;
    while clusters > m {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && sim[(i, j)] > best.0 {
                    best = (sim[(i, j)], i, j);
                }
            }
        }
        let (_, a, b) = best;
        if best.0 == f64::NEG_INFINITY {
            break;
        }
        // Lance-Williams update for average linkage
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if active[k] && k != a && k != b {
                let v = (na * sim[(a, k)] + nb * sim[(b, k)]) / (na + nb);
                sim[(a, k)] = v;
                sim[(k, a)] = v;
            }
        }
        size[a] += size[b];
        active[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        clusters -= 1;
    }
    let mut groups: Vec<&Vec<usize>> = members.iter().filter(|g| !g.is_empty()).collect();
    groups.sort_by_key(|g| *g.iter().min().unwrap());
    let mut labels = vec![0; n];
    for (c, g) in groups.iter().enumerate() {
        for &j in g.iter() {
            labels[j] = c;
        }
    }
    Ok(labels)
}

/// Initial responsibilities of the unlabelled i-vectors.
pub fn init_responsibilities(data: &Dataset, model: &SpldaModel, cfg: &RunConfig, hyper: &Hyperparams, kappa: f64) -> Result<Responsibilities> {
    let n = data.n_unsup();
    let m = cfg.m_init;
    if model.dim() != data.dim() {
        return Err(shape_err("initial model", data.dim(), model.dim()));
    }
    match cfg.init_method {
        InitMethod::Oracle => {
            let labels = cfg
                .oracle_labels
                .as_ref()
                .ok_or_else(|| SpldaError::Config("oracle initialization requested without labels".into()))?;
            if labels.len() != n {
                return Err(shape_err("oracle labels", n, labels.len()));
            }
            let m = labels.iter().max().map(|l| l + 1).unwrap_or(m);
            Responsibilities::one_hot(labels, m)
        }
        InitMethod::UniformPi => Responsibilities::from_matrix(DMatrix::from_element(n, m, 1.0 / m as f64)),
        InitMethod::Ahc => {
            let scores = PairScorer::new(model)?.score_matrix(data.phi());
            let labels = average_linkage(&scores, m)?;
            Responsibilities::one_hot(&labels, m)
        }
        InitMethod::RandomY => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let posts: Vec<SpeakerPosterior> = (0..m)
                .map(|_| {
                    SpeakerPosterior::point_mass(DVector::from_fn(model.ny(), |_, _| rng.sample::<f64, _>(StandardNormal)))
                })
                .collect();
            let dir = update_q_pi(&vec![0.0; m], hyper.tau0, kappa)?;
            update_q_theta(data.phi(), &posts, model, &dir, kappa)
        }
    }
}

/// Hard assignments drawn from the responsibilities and their statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub labels: Vec<usize>,
    pub stats: SuffStats,
}

/// Draws `k` categorical assignments of every i-vector. Sample `s` uses
/// stream `s` of a ChaCha generator seeded with `seed`.
pub fn sampled_statistics(resp: &Responsibilities, phi: &DMatrix<f64>, k: usize, seed: u64) -> Result<Vec<Sample>> {
    if resp.r.nrows() != phi.nrows() {
        return Err(shape_err("sampled_statistics", phi.nrows(), resp.r.nrows()));
    }
    if k == 0 {
        return Err(SpldaError::InvalidInput("need at least one sample".into()));
    }
    let m = resp.n_speakers();
    (0..k)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let labels: Vec<usize> = (0..resp.r.nrows())
                .map(|j| {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let row = resp.r.row(j);
                    let mut pick = m - 1;
                    for i in 0..m {
                        acc += row[i];
                        if u < acc {
                            pick = i;
                            break;
                        }
                    }
                    // never land on a zero-probability tail column
                    while row[pick] == 0.0 && pick > 0 {
                        pick -= 1;
                    }
                    pick
                })
                .collect();
            let stats = SuffStats::from_labels(&labels, m, phi, SecondOrder::None)?;
            Ok(Sample { labels, stats })
        })
        .collect()
}

/// Accumulators chosen by the sampling strategy, with the per-sample lower
/// bounds when they were evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledOutcome {
    pub acc: Accumulators,
    pub acc_d: Accumulators,
    pub elbos: Vec<f64>,
    pub chosen: Option<usize>,
}

pub fn apply_sampling(
    data: &Dataset,
    state: &PointState,
    model: &SpldaModel,
    hyper: &Hyperparams,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<SampledOutcome> {
    let samples = sampled_statistics(&state.resp, data.phi(), cfg.k, seed)?;
    let m = state.n_speakers();
    let per_sample: Vec<(Accumulators, f64)> = samples
        .par_iter()
        .map(|s| {
            let mut centered = s.stats.clone();
            centered.center(model.mu())?;
            let posts = update_q_y(&centered, model, 1.0)?;
            let acc = Accumulators::from_stats(&s.stats, &posts)?;
            let elbo = if cfg.strategy == SampleStrategy::BestSample {
                let resp = Responsibilities::one_hot(&s.labels, m)?;
                let dir = update_q_pi(&resp.counts(), hyper.tau0, 1.0)?;
                let st = PointState { resp, dir, unsup: posts, sup: state.sup.clone() };
                elbo_point(data, &st, model, hyper)?.total
            } else {
                f64::NAN
            };
            Ok((acc, elbo))
        })
        .collect::<Result<_>>()?;
    let (_, acc_d) = point::state_accumulators(data, state)?;
    match cfg.strategy {
        SampleStrategy::BestSample => {
            let elbos: Vec<f64> = per_sample.iter().map(|(_, e)| *e).collect();
            let mut best = 0;
            for (i, e) in elbos.iter().enumerate() {
                if *e > elbos[best] {
                    best = i;
                }
            }
            Ok(SampledOutcome { acc: per_sample[best].0.clone(), acc_d, elbos, chosen: Some(best) })
        }
        SampleStrategy::AverageAccumulators => {
            let mut sum = Accumulators::zeros(data.dim(), model.ny());
            for (a, _) in &per_sample {
                sum = sum.weighted_sum(a, 1.0);
            }
            Ok(SampledOutcome { acc: sum.scale(1.0 / cfg.k as f64), acc_d, elbos: Vec::new(), chosen: None })
        }
    }
}

/// The operations a run needs from either variant.
trait Engine: Clone {
    fn latent(&self) -> &PointState;
    fn latent_mut(&mut self) -> &mut PointState;
    fn hyper(&self) -> &Hyperparams;
    fn iterate(&mut self, data: &Dataset, cfg: &RunConfig, kappa: f64, iter: usize, warnings: &mut Vec<String>) -> Result<()>;
    /// `q(Y, Y_d)` then `q(π)` after a structural change.
    fn refresh(&mut self, data: &Dataset, kappa: f64) -> Result<()>;
    fn elbo(&self, data: &Dataset) -> Result<f64>;
    fn model(&self) -> Result<SpldaModel>;
    fn into_state(self) -> FinalState;
}

#[derive(Clone)]
struct PointEngine {
    state: PointState,
    model: SpldaModel,
    hyper: Hyperparams,
}

fn optimize_tau0(hyper: &mut Hyperparams, latent: &PointState, warnings: &mut Vec<String>, iter: usize) -> Result<()> {
    if latent.n_speakers() < 2 {
        return Ok(());
    }
    let res = mstep_tau0(latent.dir.e_ln_pi.as_slice(), hyper.tau0)?;
    if let Some(w) = &res.warning {
        warnings.push(format!("iteration {iter}: tau0 update: {w}"));
    }
    hyper.tau0 = res.value;
    Ok(())
}

impl Engine for PointEngine {
    fn latent(&self) -> &PointState {
        &self.state
    }

    fn latent_mut(&mut self) -> &mut PointState {
        &mut self.state
    }

    fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    fn iterate(&mut self, data: &Dataset, cfg: &RunConfig, kappa: f64, iter: usize, warnings: &mut Vec<String>) -> Result<()> {
        sweep_point(data, &mut self.state, &self.model, &self.hyper, kappa)?;
        if cfg.update_model {
            self.model = match &cfg.sampler {
                Some(s) => {
                    let seed = cfg.seed.wrapping_add((iter as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                    let out = apply_sampling(data, &self.state, &self.model, &self.hyper, s, seed)?;
                    mstep_from_accumulators(data, &out.acc, &out.acc_d, self.hyper.eta)?
                }
                None => mstep_model(data, &self.state, self.hyper.eta)?,
            };
            if cfg.min_divergence {
                let md = min_divergence(&self.state.unsup, &self.state.sup, &self.model, self.hyper.eta)?;
                for p in self.state.unsup.iter_mut().chain(self.state.sup.iter_mut()) {
                    *p = md.transform_posterior(p)?;
                }
                self.model = md.model;
            }
        }
        if cfg.optimize_tau0 {
            optimize_tau0(&mut self.hyper, &self.state, warnings, iter)?;
        }
        Ok(())
    }

    fn refresh(&mut self, data: &Dataset, kappa: f64) -> Result<()> {
        refresh_q_y(data, &mut self.state, &self.model, kappa)?;
        self.state.dir = update_q_pi(&self.state.resp.counts(), self.hyper.tau0, kappa)?;
        Ok(())
    }

    fn elbo(&self, data: &Dataset) -> Result<f64> {
        Ok(elbo_point(data, &self.state, &self.model, &self.hyper)?.total)
    }

    fn model(&self) -> Result<SpldaModel> {
        Ok(self.model.clone())
    }

    fn into_state(self) -> FinalState {
        FinalState::Point(self.state)
    }
}

#[derive(Clone)]
struct BayesEngine {
    state: BayesState,
    hyper: Hyperparams,
}

impl Engine for BayesEngine {
    fn latent(&self) -> &PointState {
        &self.state.latent
    }

    fn latent_mut(&mut self) -> &mut PointState {
        &mut self.state.latent
    }

    fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    fn iterate(&mut self, data: &Dataset, cfg: &RunConfig, kappa: f64, iter: usize, warnings: &mut Vec<String>) -> Result<()> {
        bayes::sweep_bayes(data, &mut self.state, &self.hyper, kappa)?;
        if cfg.optimize_alpha {
            let (a, b, res) = bayes::optimize_hyper_alpha(&self.state.alpha, self.hyper.a_alpha)?;
            if let Some(w) = res.warning {
                warnings.push(format!("iteration {iter}: alpha hyperparameter update: {w}"));
            }
            self.hyper.a_alpha = a;
            self.hyper.b_alpha = b;
        }
        if cfg.optimize_mu {
            let (mu0, beta) = bayes::optimize_hyper_mu(&self.state.rows, cfg.isotropic_beta);
            self.hyper.mu0 = Some(mu0);
            self.hyper.beta = Some(beta);
        }
        if cfg.optimize_tau0 {
            optimize_tau0(&mut self.hyper, &self.state.latent, warnings, iter)?;
        }
        Ok(())
    }

    fn refresh(&mut self, data: &Dataset, kappa: f64) -> Result<()> {
        bayes::refresh_q_y_bayes(data, &mut self.state, kappa)?;
        self.state.latent.dir = update_q_pi(&self.state.latent.resp.counts(), self.hyper.tau0, kappa)?;
        Ok(())
    }

    fn elbo(&self, data: &Dataset) -> Result<f64> {
        Ok(bayes::elbo_bayes(data, &self.state, &self.hyper)?.total)
    }

    fn model(&self) -> Result<SpldaModel> {
        bayes::mean_model(&self.state)
    }

    fn into_state(self) -> FinalState {
        FinalState::Bayes(self.state)
    }
}

/// Columns whose expected count is treated as exactly empty.
const EMPTY_COUNT: f64 = 1e-10;

fn remove_column(resp: &Responsibilities, col: usize) -> Result<Responsibilities> {
    let (n, m) = resp.r.shape();
    let keep: Vec<usize> = (0..m).filter(|&i| i != col).collect();
    let mut r = DMatrix::zeros(n, m - 1);
    for j in 0..n {
        let rest = 1.0 - resp.r[(j, col)];
        for (c, &i) in keep.iter().enumerate() {
            r[(j, c)] = resp.r[(j, i)];
        }
        if rest > 1e-12 {
            let total: f64 = r.row(j).sum();
            for c in 0..m - 1 {
                r[(j, c)] /= total;
            }
        } else {
            // the row lived entirely on the removed speaker
            let logs: Vec<f64> = keep.iter().map(|&i| resp.log_rho[(j, i)]).collect();
            let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max.is_finite() {
                let e: Vec<f64> = logs.iter().map(|v| (v - max).exp()).collect();
                let s: f64 = e.iter().sum();
                for c in 0..m - 1 {
                    r[(j, c)] = e[c] / s;
                }
            } else {
                for c in 0..m - 1 {
                    r[(j, c)] = 1.0 / (m - 1) as f64;
                }
            }
        }
    }
    let log_rho = DMatrix::from_fn(n, m - 1, |j, c| resp.log_rho[(j, keep[c])]);
    Ok(Responsibilities { r, log_rho })
}

/// Merges column `b` into column `a`.
fn merge_columns(resp: &Responsibilities, a: usize, b: usize) -> Responsibilities {
    let (n, m) = resp.r.shape();
    let keep: Vec<usize> = (0..m).filter(|&i| i != b).collect();
    let r = DMatrix::from_fn(n, m - 1, |j, c| {
        let i = keep[c];
        if i == a {
            resp.r[(j, a)] + resp.r[(j, b)]
        } else {
            resp.r[(j, i)]
        }
    });
    let log_rho = DMatrix::from_fn(n, m - 1, |j, c| {
        let i = keep[c];
        if i == a {
            let (x, y) = (resp.log_rho[(j, a)], resp.log_rho[(j, b)]);
            let hi = x.max(y);
            if hi == f64::NEG_INFINITY {
                hi
            } else {
                hi + ((x - hi).exp() + (y - hi).exp()).ln()
            }
        } else {
            resp.log_rho[(j, i)]
        }
    });
    Responsibilities { r, log_rho }
}

fn cosine(r: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let (ca, cb) = (r.column(a), r.column(b));
    let denom = ca.norm() * cb.norm();
    if denom == 0.0 {
        0.0
    } else {
        ca.dot(&cb) / denom
    }
}

/// Tries a new set of responsibilities; keeps it when the refreshed bound
/// does not drop by more than `elbo_tol` relative.
fn try_restructure<E: Engine>(
    engine: &mut E,
    data: &Dataset,
    new_resp: Responsibilities,
    kappa: f64,
    cfg: &RunConfig,
    force: bool,
) -> Result<(bool, f64, f64)> {
    let before = engine.elbo(data)?;
    let backup = engine.clone();
    engine.latent_mut().resp = new_resp;
    engine.refresh(data, kappa)?;
    let after = engine.elbo(data)?;
    let ok = force || after >= before - cfg.elbo_tol * before.abs();
    if !ok {
        *engine = backup;
    }
    Ok((ok, before, after))
}

fn prune_and_merge_engine<E: Engine>(engine: &mut E, data: &Dataset, cfg: &RunConfig, kappa: f64, iter: usize) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    if data.n_unsup() == 0 || engine.latent().n_speakers() <= 1 {
        return Ok(events);
    }
    let counts = engine.latent().resp.counts();
    if counts.iter().all(|&c| c < cfg.prune_threshold) {
        return Err(SpldaError::Config(format!(
            "prune_threshold {} would remove every speaker",
            cfg.prune_threshold
        )));
    }
    // stable identities so rejected candidates are not retried
    let mut ids: Vec<usize> = (0..counts.len()).collect();
    let mut rejected_prune: Vec<usize> = Vec::new();
    let mut rejected_merge: Vec<(usize, usize)> = Vec::new();
    loop {
        let resp = engine.latent().resp.clone();
        let m = resp.n_speakers();
        if m <= 1 {
            break;
        }
        let counts = resp.counts();
        let mut prune: Option<usize> = None;
        for i in 0..m {
            let small = counts[i] < cfg.prune_threshold || counts[i] <= EMPTY_COUNT;
            if small && !rejected_prune.contains(&ids[i]) && prune.is_none_or(|p| counts[i] < counts[p]) {
                prune = Some(i);
            }
        }
        if let Some(i) = prune {
            let force = counts[i] <= EMPTY_COUNT;
            let (ok, before, after) = try_restructure(engine, data, remove_column(&resp, i)?, kappa, cfg, force)?;
            events.push(Event { iter, action: Action::Prune, columns: vec![i], accepted: ok, elbo_before: before, elbo_after: after });
            if ok {
                ids.remove(i);
            } else {
                rejected_prune.push(ids[i]);
            }
            continue;
        }
        let mut merge: Option<(f64, usize, usize)> = None;
        for a in 0..m {
            for b in (a + 1)..m {
                let c = cosine(&resp.r, a, b);
                if c > cfg.merge_threshold && !rejected_merge.contains(&(ids[a], ids[b])) && merge.is_none_or(|(best, _, _)| c > best) {
                    merge = Some((c, a, b));
                }
            }
        }
        if let Some((_, a, b)) = merge {
            let (ok, before, after) = try_restructure(engine, data, merge_columns(&resp, a, b), kappa, cfg, false)?;
            events.push(Event { iter, action: Action::Merge, columns: vec![a, b], accepted: ok, elbo_before: before, elbo_after: after });
            if ok {
                ids.remove(b);
            } else {
                rejected_merge.push((ids[a], ids[b]));
            }
            continue;
        }
        if !cfg.elbo_elimination {
            break;
        }
        let Some(i) = (0..m).filter(|&i| !rejected_prune.contains(&ids[i])).min_by(|&a, &b| counts[a].total_cmp(&counts[b])) else {
            break;
        };
        let (ok, before, after) = try_restructure(engine, data, remove_column(&resp, i)?, kappa, cfg, false)?;
        // rejected eliminations are routine and not reported
        if ok {
            events.push(Event { iter, action: Action::Eliminate, columns: vec![i], accepted: true, elbo_before: before, elbo_after: after });
            ids.remove(i);
        } else {
            rejected_prune.push(ids[i]);
        }
    }
    Ok(events)
}

/// Prunes and merges speakers of a point-variant state; see [`run_adaptation`].
pub fn prune_and_merge(
    data: &Dataset,
    state: PointState,
    model: &SpldaModel,
    hyper: &Hyperparams,
    cfg: &RunConfig,
    kappa: f64,
    iter: usize,
) -> Result<(PointState, Vec<Event>)> {
    let mut engine = PointEngine { state, model: model.clone(), hyper: hyper.clone() };
    let events = prune_and_merge_engine(&mut engine, data, cfg, kappa, iter)?;
    Ok((engine.state, events))
}

fn state_summary(s: &PointState) -> String {
    let counts: Vec<String> = s.resp.counts().iter().map(|c| format!("{c:.3}")).collect();
    format!("M={} counts=[{}] tau=[{}]", s.n_speakers(), counts.join(" "), s.dir.tau.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>().join(" "))
}

fn run_engine<E: Engine>(mut engine: E, data: &Dataset, cfg: &RunConfig, kappa0: f64) -> Result<RunReport> {
    let mut kappa = kappa0;
    let mut trace: Vec<TraceRow> = Vec::new();
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    let mut converged = false;
    for iter in 1..=cfg.max_iter {
        engine.iterate(data, cfg, kappa, iter, &mut warnings)?;
        let elbo = engine.elbo(data)?;
        if !elbo.is_finite() {
            return Err(SpldaError::Degenerate(format!(
                "lower bound is {elbo} at iteration {iter}; state: {}",
                state_summary(engine.latent())
            )));
        }
        let m = engine.latent().n_speakers();
        let settled = match trace.last() {
            Some(prev) => {
                cfg.elbo_tol > 0.0
                    && kappa == 1.0
                    && prev.kappa == 1.0
                    && prev.m == m
                    && (elbo - prev.elbo).abs() <= cfg.elbo_tol * elbo.abs()
            }
            None => false,
        };
        trace.push(TraceRow { iter, elbo, m, kappa });
        let mut changed = false;
        if cfg.prune_merge && (iter % cfg.prune_every == 0 || settled) {
            let ev = prune_and_merge_engine(&mut engine, data, cfg, kappa, iter)?;
            changed = ev.iter().any(|e| e.accepted);
            events.extend(ev);
        }
        if settled && !changed {
            converged = true;
            break;
        }
        if let Anneal::Schedule { growth, .. } = cfg.anneal {
            kappa = (kappa * growth).min(1.0);
        }
    }
    let labels = engine.latent().resp.hard_labels();
    let model = engine.model()?;
    let hyper = engine.hyper().clone();
    Ok(RunReport { trace, labels, model, state: engine.into_state(), hyper, events, warnings, converged })
}

/// Full adaptation run. `cfg.eta` and `cfg.kappa` take precedence over the
/// corresponding fields of `hyper`.
pub fn run_adaptation(data: &Dataset, model_init: &SpldaModel, hyper: &Hyperparams, cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    if model_init.dim() != data.dim() {
        return Err(shape_err("initial model dimension", data.dim(), model_init.dim()));
    }
    let mut hyper = hyper.clone();
    hyper.eta = cfg.eta;
    hyper.kappa = cfg.kappa;
    hyper.validate()?;
    let kappa0 = cfg.initial_kappa();
    let resp = init_responsibilities(data, model_init, cfg, &hyper, kappa0)?;
    match cfg.variant {
        Variant::Point => {
            let state = PointState::from_responsibilities(resp, model_init.ny(), data.n_speakers_d(), &hyper, kappa0)?;
            run_engine(PointEngine { state, model: model_init.clone(), hyper }, data, cfg, kappa0)
        }
        Variant::Bayes => {
            let hyper = bayes::with_bayes_defaults(&hyper, data)?;
            let state = bayes::init_from_point(data, model_init, resp, &hyper, kappa0)?;
            run_engine(BayesEngine { state, hyper }, data, cfg, kappa0)
        }
    }
}

/// Runs at several initial speaker counts in parallel and keeps the one with
/// the highest final lower bound.
pub fn select_speaker_count(
    data: &Dataset,
    model_init: &SpldaModel,
    hyper: &Hyperparams,
    cfg: &RunConfig,
    candidates: &[usize],
) -> Result<(usize, Vec<(usize, RunReport)>)> {
    if candidates.is_empty() {
        return Err(SpldaError::InvalidInput("no candidate speaker counts".into()));
    }
    let runs: Vec<(usize, RunReport)> = candidates
        .par_iter()
        .map(|&m| {
            let mut c = cfg.clone();
            c.m_init = m;
            run_adaptation(data, model_init, hyper, &c).map(|r| (m, r))
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (i, (_, r)) in runs.iter().enumerate() {
        if r.final_elbo() > runs[best].1.final_elbo() {
            best = i;
        }
    }
    Ok((runs[best].0, runs))
}

/// Supervised maximum-likelihood SPLDA by EM on labelled i-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedFit {
    pub model: SpldaModel,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Initial model from labelled data: global mean, between-class principal
/// directions and within-class covariance.
pub fn initial_supervised_model(phi_d: &DMatrix<f64>, labels_d: &[usize], ny: usize) -> Result<SpldaModel> {
    let (n, d) = phi_d.shape();
    if ny == 0 || ny > d {
        return Err(SpldaError::InvalidInput(format!("n_y must be in [1, {d}], got {ny}")));
    }
    if n <= d {
        return Err(SpldaError::InvalidInput(format!(
            "need more labelled i-vectors than dimensions to estimate W (N_d = {n}, d = {d})"
        )));
    }
    let m = labels_d.iter().max().map(|l| l + 1).unwrap_or(0);
    let stats = SuffStats::from_labels(labels_d, m, phi_d, SecondOrder::None)?;
    let mu = &stats.f_total / stats.n_total;
    let mut sb = DMatrix::zeros(d, d);
    let mut sw = DMatrix::zeros(d, d);
    for i in 0..m {
        if stats.n[i] == 0.0 {
            continue;
        }
        let mi = &stats.f[i] / stats.n[i];
        let dm = &mi - &mu;
        sb += &dm * dm.transpose() * stats.n[i];
    }
    for j in 0..n {
        let l = labels_d[j];
        let x = phi_d.row(j).transpose() - &stats.f[l] / stats.n[l];
        sw += &x * x.transpose();
    }
    sb /= n as f64;
    sw /= n as f64;
    let eig = crate::linalg::symmetrized(sb).symmetric_eigen();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let floor = 1e-6 * sw.trace().max(1e-300) / d as f64;
    let v = DMatrix::from_fn(d, ny, |r, q| {
        let k = order[q];
        eig.eigenvectors[(r, k)] * eig.eigenvalues[k].max(floor).sqrt()
    });
    let w = crate::linalg::spd_inverse(&crate::linalg::symmetrized(sw), "within-class covariance")?;
    SpldaModel::new(mu, v, w)
}

pub fn train_supervised(phi_d: &DMatrix<f64>, labels_d: &[usize], ny: usize, max_iter: usize, tol: f64) -> Result<SupervisedFit> {
    let d = phi_d.ncols();
    let mut model = initial_supervised_model(phi_d, labels_d, ny)?;
    let data = Dataset::new(DMatrix::zeros(0, d), phi_d.clone(), labels_d.to_vec())?;
    let hyper = Hyperparams::default();
    let resp = Responsibilities { r: DMatrix::zeros(0, 0), log_rho: DMatrix::zeros(0, 0) };
    let mut state = PointState::from_responsibilities(resp, ny, data.n_speakers_d(), &hyper, 1.0)?;
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        refresh_q_y(&data, &mut state, &model, 1.0)?;
        model = mstep_model(&data, &state, 1.0)?;
        let md = min_divergence(&state.unsup, &state.sup, &model, 1.0)?;
        for p in state.sup.iter_mut() {
            *p = md.transform_posterior(p)?;
        }
        model = md.model;
        let elbo = elbo_point(&data, &state, &model, &hyper)?.total;
        let done = trace.last().is_some_and(|&prev: &f64| (elbo - prev).abs() <= tol * elbo.abs());
        trace.push(elbo);
        if done {
            converged = true;
            break;
        }
    }
    Ok(SupervisedFit { model, trace, converged })
}

/// Hard-assignment statistics of the unlabelled set for the given labels.
pub fn hard_stats(phi: &DMatrix<f64>, labels: &[usize], m: usize) -> Result<SuffStats> {
    let resp = Responsibilities::one_hot(labels, m)?;
    accumulate_stats(&resp.r, phi, SecondOrder::None)
}
