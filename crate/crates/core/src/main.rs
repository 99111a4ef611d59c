use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use splda_adapt::bayes::elbo_bayes;
use splda_adapt::control::{run_adaptation, train_supervised, FinalState, RunReport};
use splda_adapt::io::{self, ConfigFile, ModelFile};
use splda_adapt::point::elbo_point;
use splda_adapt::synth::{clustering_metrics, generate, ModelSource, PerSpeaker, SynthSpec};
use splda_adapt::{Dataset, Result, SpldaError};

#[derive(Parser)]
#[command(name = "splda-adapt", version, about = "Variational Bayes adaptation of SPLDA models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic i-vectors from a random SPLDA model.
    Synth(SynthArgs),
    /// Train a model by supervised EM on labelled i-vectors.
    Train(TrainArgs),
    /// Adapt a model with labelled and unlabelled i-vectors.
    Adapt(AdaptArgs),
    /// Compare predicted and true labels.
    Eval(EvalArgs),
    /// Rerun an adaptation and print every lower-bound term of the final state.
    ElboAudit(RunInputs),
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// key=value file with the same settings as the flags below.
    #[arg(long, conflicts_with_all = ["d", "ny", "speakers", "per_speaker", "sup_speakers", "sup_per_speaker", "eigen_scale", "noise_scale", "seed"])]
    spec: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    /// Speakers in the unlabelled set.
    #[arg(long)]
    speakers: Option<usize>,
    /// `N` or `LO-HI`.
    #[arg(long)]
    per_speaker: Option<String>,
    #[arg(long)]
    sup_speakers: Option<usize>,
    #[arg(long)]
    sup_per_speaker: Option<String>,
    #[arg(long)]
    eigen_scale: Option<f64>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes <prefix>.phi, .phi_d, .labels_d, .true_labels and .true_model.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    ivectors: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    ny: usize,
    #[arg(long)]
    out_model: PathBuf,
    /// Write the lower bound of every iteration here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct RunInputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, requires = "sup_labels")]
    sup_ivectors: Option<PathBuf>,
    #[arg(long, requires = "sup_ivectors")]
    sup_labels: Option<PathBuf>,
    #[arg(long)]
    unsup_ivectors: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `eta` from the config file.
    #[arg(long)]
    eta: Option<f64>,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Labels for `init=oracle`.
    #[arg(long)]
    oracle_labels: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    #[command(flatten)]
    inputs: RunInputs,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_labels: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred_labels: PathBuf,
    #[arg(long)]
    true_labels: PathBuf,
}

/// Tags an error with the flag whose file caused it.
fn flag<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| SpldaError::InvalidInput(format!("--{name}: {e}")))
}

fn per_speaker(s: &str) -> Result<PerSpeaker> {
    let bad = || SpldaError::Config(format!("per-speaker count must be N or LO-HI, got {s:?}"));
    match s.split_once('-') {
        Some((lo, hi)) => Ok(PerSpeaker::Range(lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?)),
        None => Ok(PerSpeaker::Fixed(s.trim().parse().map_err(|_| bad())?)),
    }
}

fn value<T: std::str::FromStr>(v: &str, line: usize) -> Result<T> {
    v.parse().map_err(|_| SpldaError::Parse { line, msg: format!("bad value {v:?}") })
}

fn synth_spec(args: &SynthArgs) -> Result<SynthSpec> {
    let mut a = args.clone();
    if let Some(path) = &args.spec {
        for (i, raw) in io::read_text(path)?.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpldaError::Parse { line: i + 1, msg: format!("expected key=value, found {line:?}") })?;
            let v = v.trim().to_string();
            let line = i + 1;
            match k.trim() {
                "d" => a.d = Some(value(&v, line)?),
                "ny" => a.ny = Some(value(&v, line)?),
                "speakers" => a.speakers = Some(value(&v, line)?),
                "per_speaker" => a.per_speaker = Some(v),
                "sup_speakers" => a.sup_speakers = Some(value(&v, line)?),
                "sup_per_speaker" => a.sup_per_speaker = Some(v),
                "eigen_scale" => a.eigen_scale = Some(value(&v, line)?),
                "noise_scale" => a.noise_scale = Some(value(&v, line)?),
                "seed" => a.seed = Some(value(&v, line)?),
                other => return Err(SpldaError::Parse { line, msg: format!("unknown key {other:?}") }),
            }
        }
    }
    let missing = |n: &str| SpldaError::Config(format!("synth needs {n}"));
    Ok(SynthSpec {
        d: a.d.ok_or_else(|| missing("d"))?,
        ny: a.ny.ok_or_else(|| missing("ny"))?,
        m_true: a.speakers.ok_or_else(|| missing("speakers"))?,
        per_speaker: per_speaker(a.per_speaker.as_deref().unwrap_or("10"))?,
        sup_speakers: a.sup_speakers.unwrap_or(0),
        sup_per_speaker: per_speaker(a.sup_per_speaker.as_deref().unwrap_or("10"))?,
        model: ModelSource::Random { eigen_scale: a.eigen_scale.unwrap_or(5.0), noise_scale: a.noise_scale.unwrap_or(1.0) },
        seed: a.seed.unwrap_or(0),
    })
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let spec = synth_spec(args)?;
    let g = generate(&spec)?;
    let p = &args.out_prefix;
    io::save_matrix(&with_suffix(p, ".phi"), g.dataset.phi())?;
    io::save_matrix(&with_suffix(p, ".phi_d"), g.dataset.phi_d())?;
    io::save_labels(&with_suffix(p, ".labels_d"), g.dataset.labels_d())?;
    io::save_labels(&with_suffix(p, ".true_labels"), &g.true_labels)?;
    io::save_model(&with_suffix(p, ".true_model"), &ModelFile::point(g.model.clone()))?;
    println!("unsupervised {} x {}", g.dataset.n_unsup(), g.dataset.dim());
    println!("supervised {} x {}", g.dataset.n_sup(), g.dataset.dim());
    println!("speakers {} unlabelled, {} labelled", spec.m_true, spec.sup_speakers);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let phi = flag("ivectors", io::load_matrix(&args.ivectors))?;
    let labels = flag("labels", io::load_labels_for(&args.labels, phi.nrows()))?;
    let fit = train_supervised(&phi, &labels, args.ny, args.max_iter, args.tol)?;
    io::save_model(&args.out_model, &ModelFile::point(fit.model))?;
    if let Some(path) = &args.trace {
        let text: String = fit.trace.iter().enumerate().map(|(i, e)| format!("{} {e:.16e}\n", i + 1)).collect();
        io::write_text(path, &text)?;
    }
    println!("iterations {} converged {}", fit.trace.len(), fit.converged);
    Ok(())
}

struct Loaded {
    data: Dataset,
    model: ModelFile,
    config: ConfigFile,
}

fn load_inputs(a: &RunInputs) -> Result<Loaded> {
    let (model, warnings) = flag("model", io::load_model(&a.model))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    let phi = flag("unsup-ivectors", io::load_matrix(&a.unsup_ivectors))?;
    let (phi_d, labels_d) = match (&a.sup_ivectors, &a.sup_labels) {
        (Some(x), Some(l)) => {
            let phi_d = flag("sup-ivectors", io::load_matrix(x))?;
            let labels = flag("sup-labels", io::load_labels_for(l, phi_d.nrows()))?;
            (phi_d, labels)
        }
        _ => (DMatrix::zeros(0, phi.ncols()), Vec::new()),
    };
    let mut config = match &a.config {
        Some(p) => flag("config", io::load_config(p))?,
        None => ConfigFile::default(),
    };
    if let Some(eta) = a.eta {
        config.run.eta = eta;
    }
    if let Some(seed) = a.seed {
        config.run.seed = seed;
    }
    if let Some(p) = &a.oracle_labels {
        config.run.oracle_labels = Some(flag("oracle-labels", io::load_labels_for(p, phi.nrows()))?);
    }
    config.run.validate()?;
    let data = Dataset::new(phi, phi_d, labels_d)?;
    if model.model.dim() != data.dim() {
        return Err(SpldaError::InvalidInput(format!(
            "model dimension {} does not match i-vector dimension {}",
            model.model.dim(),
            data.dim()
        )));
    }
    Ok(Loaded { data, model, config })
}

fn run(l: &Loaded) -> Result<RunReport> {
    run_adaptation(&l.data, &l.model.model, &l.config.hyper, &l.config.run)
}

fn cmd_adapt(args: &AdaptArgs) -> Result<()> {
    let l = load_inputs(&args.inputs)?;
    let report = run(&l)?;
    let out = match &report.state {
        FinalState::Point(_) => ModelFile::point(report.model.clone()),
        FinalState::Bayes(s) => ModelFile::from_bayes(s, report.model.clone(), &report.hyper),
    };
    io::save_model(&args.out_model, &out)?;
    io::save_labels(&args.out_labels, &report.labels)?;
    io::write_text(&args.out_report, &io::format_report(&report, &l.config.run))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("iterations {} speakers {} elbo {:.10e}", report.trace.len(), report.final_m(), report.final_elbo());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let pred = flag("pred-labels", io::load_labels(&args.pred_labels))?;
    let truth = flag("true-labels", io::load_labels(&args.true_labels))?;
    let m = clustering_metrics(&pred, &truth)?;
    println!("ARI {:.6}", m.ari);
    println!("PURITY {:.6}", m.purity);
    Ok(())
}

fn cmd_audit(args: &RunInputs) -> Result<()> {
    let l = load_inputs(args)?;
    let report = run(&l)?;
    let breakdown = match &report.state {
        FinalState::Point(s) => elbo_point(&l.data, s, &report.model, &report.hyper)?,
        FinalState::Bayes(s) => elbo_bayes(&l.data, s, &report.hyper)?,
    };
    print!("{}", io::format_elbo_table(&breakdown));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ElboAudit(a) => cmd_audit(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
