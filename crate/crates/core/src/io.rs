//! Text file formats: i-vector matrices, labels, models, run
//! configuration and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::bayes::{AlphaPosterior, BayesState, RowPosteriorVtilde, WishartPosterior};
use crate::control::{Action, Anneal, InitMethod, RunConfig, RunReport, SampleStrategy, SamplerConfig, Variant};
use crate::error::{shape_err, Result, SpldaError};
use crate::model::SpldaModel;
use crate::point::{ElboBreakdown, Hyperparams};

/// Asymmetry of a loaded `W` tolerated without a warning.
pub const SYMMETRY_TOL: f64 = 1e-12;

fn parse_err(line: usize, msg: impl Into<String>) -> SpldaError {
    SpldaError::Parse { line, msg: msg.into() }
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| SpldaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SpldaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Non-empty lines with their 1-based numbers.
struct Lines<'a> {
    inner: std::iter::Peekable<Box<dyn Iterator<Item = (usize, &'a str)> + 'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        let it: Box<dyn Iterator<Item = (usize, &'a str)> + 'a> =
            Box::new(text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty()));
        Self { inner: it.peekable(), last: 0 }
    }

    fn next(&mut self) -> Result<(usize, &'a str)> {
        match self.inner.next() {
            Some((n, l)) => {
                self.last = n;
                Ok((n, l))
            }
            None => Err(parse_err(self.last + 1, "unexpected end of file")),
        }
    }

    fn peek(&mut self) -> Option<&'a str> {
        self.inner.peek().map(|(_, l)| *l)
    }

    fn expect(&mut self, keyword: &str) -> Result<()> {
        let (n, l) = self.next()?;
        if l != keyword {
            return Err(parse_err(n, format!("expected {keyword}, found {l:?}")));
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        match self.inner.next() {
            Some((n, l)) => Err(parse_err(n, format!("trailing content {l:?}"))),
            None => Ok(()),
        }
    }
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| parse_err(line, format!("not a number: {tok:?}")))
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse::<usize>().map_err(|_| parse_err(line, format!("not a non-negative integer: {tok:?}")))
}

/// Seventeen significant digits, enough to round-trip any double.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_matrix_body(out: &mut String, m: &DMatrix<f64>) {
    let _ = writeln!(out, "IVEC {} {}", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| fmt_f64(m[(r, c)])).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
}

fn read_matrix_body(lines: &mut Lines) -> Result<DMatrix<f64>> {
    let (n, header) = lines.next()?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "IVEC" {
        return Err(parse_err(n, format!("expected \"IVEC <rows> <cols>\", found {header:?}")));
    }
    let (rows, cols) = (parse_usize(toks[1], n)?, parse_usize(toks[2], n)?);
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        let (n, l) = lines.next()?;
        let vals: Vec<&str> = l.split_whitespace().collect();
        if vals.len() != cols {
            return Err(parse_err(n, format!("expected {cols} values, found {}", vals.len())));
        }
        for (c, v) in vals.iter().enumerate() {
            m[(r, c)] = parse_f64(v, n)?;
        }
    }
    Ok(m)
}

pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut s = String::new();
    write_matrix_body(&mut s, m);
    s
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = Lines::new(text);
    let m = read_matrix_body(&mut lines)?;
    lines.finish()?;
    Ok(m)
}

pub fn save_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_text(path, &format_matrix(m))
}

pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix(&read_text(path)?)
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn parse_labels(text: &str) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_usize(l.trim(), i + 1))
        .collect()
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_text(path, &format_labels(labels))
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    parse_labels(&read_text(path)?)
}

/// Labels whose length must match `rows`.
pub fn load_labels_for(path: &Path, rows: usize) -> Result<Vec<usize>> {
    let labels = load_labels(path)?;
    if labels.len() != rows {
        return Err(SpldaError::InvalidInput(format!(
            "{} has {} labels but the i-vector file has {rows} rows",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Posterior factors of the Bayesian variant stored alongside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesSection {
    pub rows: RowPosteriorVtilde,
    pub alpha: AlphaPosterior,
    pub wishart: WishartPosterior,
    pub hyper: Hyperparams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: SpldaModel,
    pub bayes: Option<BayesSection>,
}

impl ModelFile {
    pub fn point(model: SpldaModel) -> Self {
        Self { model, bayes: None }
    }

    pub fn from_bayes(state: &BayesState, model: SpldaModel, hyper: &Hyperparams) -> Self {
        Self {
            model,
            bayes: Some(BayesSection {
                rows: state.rows.clone(),
                alpha: state.alpha.clone(),
                wishart: state.wishart.clone(),
                hyper: hyper.clone(),
            }),
        }
    }
}

fn named(out: &mut String, name: &str, m: &DMatrix<f64>) {
    let _ = writeln!(out, "{name}");
    write_matrix_body(out, m);
}

fn read_named(lines: &mut Lines, name: &str) -> Result<DMatrix<f64>> {
    lines.expect(name)?;
    read_matrix_body(lines)
}

fn row_of(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

fn optional_row(v: &Option<DVector<f64>>) -> DMatrix<f64> {
    v.as_ref().map(row_of).unwrap_or_else(|| DMatrix::zeros(0, 0))
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(shape_err(what, format!("{rows}x{cols}"), format!("{}x{}", m.nrows(), m.ncols())));
    }
    Ok(())
}

pub fn format_model(file: &ModelFile) -> String {
    let m = &file.model;
    let mut out = String::new();
    let _ = writeln!(out, "SPLDA {} {}", m.dim(), m.ny());
    named(&mut out, "MU", &row_of(m.mu()));
    named(&mut out, "V", m.v());
    named(&mut out, "W", m.w());
    if let Some(b) = &file.bayes {
        let _ = writeln!(out, "BAYES");
        named(&mut out, "ROWS_MEAN", &b.rows.mean);
        let k = b.rows.ny() + 1;
        let mut stacked = DMatrix::zeros(k * b.rows.precision.len(), k);
        for (r, p) in b.rows.precision.iter().enumerate() {
            stacked.view_mut((r * k, 0), (k, k)).copy_from(p);
        }
        named(&mut out, "ROWS_PRECISION", &stacked);
        named(&mut out, "ALPHA_A", &DMatrix::from_element(1, 1, b.alpha.a));
        named(&mut out, "ALPHA_B", &row_of(&b.alpha.b));
        named(&mut out, "WISHART_K", &b.wishart.k);
        named(&mut out, "WISHART_DOF", &DMatrix::from_element(1, 1, b.wishart.dof));
        let h = &b.hyper;
        named(&mut out, "HYPER_SCALARS", &DMatrix::from_row_slice(1, 5, &[h.tau0, h.eta, h.kappa, h.a_alpha, h.b_alpha]));
        named(&mut out, "MU0", &optional_row(&h.mu0));
        named(&mut out, "BETA", &optional_row(&h.beta));
    }
    out
}

fn read_optional_row(lines: &mut Lines, name: &'static str, d: usize) -> Result<Option<DVector<f64>>> {
    let m = read_named(lines, name)?;
    if m.is_empty() {
        return Ok(None);
    }
    check_shape(&m, 1, d, name)?;
    Ok(Some(DVector::from_row_slice(m.as_slice())))
}

/// Parses a model file. Returns the warnings raised while loading, such as a
/// re-symmetrized `W`.
pub fn parse_model(text: &str) -> Result<(ModelFile, Vec<String>)> {
    let mut lines = Lines::new(text);
    let (n, header) = lines.next()?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    if toks.len() != 3 || toks[0] != "SPLDA" {
        return Err(parse_err(n, format!("expected \"SPLDA <d> <n_y>\", found {header:?}")));
    }
    let (d, ny) = (parse_usize(toks[1], n)?, parse_usize(toks[2], n)?);
    let mu = read_named(&mut lines, "MU")?;
    check_shape(&mu, 1, d, "MU")?;
    let v = read_named(&mut lines, "V")?;
    check_shape(&v, d, ny, "V")?;
    let w = read_named(&mut lines, "W")?;
    check_shape(&w, d, d, "W")?;
    let mut warnings = Vec::new();
    let asym = (&w - w.transpose()).amax();
    if asym > SYMMETRY_TOL {
        let msg = format!("W is asymmetric by {asym:.3e}; using its symmetric part");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let w = crate::linalg::symmetrized(w);
    let model = SpldaModel::new(DVector::from_row_slice(mu.as_slice()), v, w)?;
    let bayes = if lines.peek() == Some("BAYES") {
        lines.expect("BAYES")?;
        let k = ny + 1;
        let mean = read_named(&mut lines, "ROWS_MEAN")?;
        check_shape(&mean, d, k, "ROWS_MEAN")?;
        let stacked = read_named(&mut lines, "ROWS_PRECISION")?;
        check_shape(&stacked, d * k, k, "ROWS_PRECISION")?;
        let precision = (0..d).map(|r| stacked.view((r * k, 0), (k, k)).into_owned()).collect();
        let rows = RowPosteriorVtilde::from_rows(mean, precision)?;
        let a = read_named(&mut lines, "ALPHA_A")?;
        check_shape(&a, 1, 1, "ALPHA_A")?;
        let b = read_named(&mut lines, "ALPHA_B")?;
        check_shape(&b, 1, ny, "ALPHA_B")?;
        let alpha = AlphaPosterior::new(a[(0, 0)], DVector::from_row_slice(b.as_slice()))?;
        let wk = read_named(&mut lines, "WISHART_K")?;
        check_shape(&wk, d, d, "WISHART_K")?;
        let dof = read_named(&mut lines, "WISHART_DOF")?;
        check_shape(&dof, 1, 1, "WISHART_DOF")?;
        let wishart = if dof[(0, 0)].is_infinite() {
            WishartPosterior::point_mass(model.w())?
        } else {
            WishartPosterior::new(wk, dof[(0, 0)])?
        };
        let s = read_named(&mut lines, "HYPER_SCALARS")?;
        check_shape(&s, 1, 5, "HYPER_SCALARS")?;
        let mu0 = read_optional_row(&mut lines, "MU0", d)?;
        let beta = read_optional_row(&mut lines, "BETA", d)?;
        let hyper = Hyperparams {
            tau0: s[(0, 0)],
            eta: s[(0, 1)],
            kappa: s[(0, 2)],
            mu0,
            beta,
            a_alpha: s[(0, 3)],
            b_alpha: s[(0, 4)],
        };
        Some(BayesSection { rows, alpha, wishart, hyper })
    } else {
        None
    };
    lines.finish()?;
    Ok((ModelFile { model, bayes }, warnings))
}

pub fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_text(path, &format_model(file))
}

pub fn load_model(path: &Path) -> Result<(ModelFile, Vec<String>)> {
    parse_model(&read_text(path)?)
}

/// Run configuration plus the prior settings a config file may override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub run: RunConfig,
    pub hyper: Hyperparams,
}


fn parse_bool(v: &str, line: usize) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(parse_err(line, format!("expected a boolean, found {v:?}"))),
    }
}

/// Applies one `key=value` setting.
pub fn apply_setting(cfg: &mut ConfigFile, key: &str, value: &str, line: usize) -> Result<()> {
    let run = &mut cfg.run;
    let f = || parse_f64(value, line);
    let u = || parse_usize(value, line);
    let schedule = |run: &RunConfig| match run.anneal {
        Anneal::Schedule { kappa0, growth } => (kappa0, growth),
        Anneal::Off => match Anneal::DEFAULT_SCHEDULE {
            Anneal::Schedule { kappa0, growth } => (kappa0, growth),
            Anneal::Off => unreachable!(),
        },
    };
    match key {
        "variant" => {
            run.variant = match value {
                "point" => Variant::Point,
                "bayes" => Variant::Bayes,
                _ => return Err(parse_err(line, format!("variant must be point or bayes, found {value:?}"))),
            }
        }
        "m_init" => run.m_init = u()?,
        "init" => {
            run.init_method = match value {
                "ahc" => InitMethod::Ahc,
                "random" => InitMethod::RandomY,
                "oracle" => InitMethod::Oracle,
                "uniform" => InitMethod::UniformPi,
                _ => return Err(parse_err(line, format!("init must be ahc, random, oracle or uniform, found {value:?}"))),
            }
        }
        "anneal" => {
            run.anneal = if parse_bool(value, line)? {
                let (kappa0, growth) = schedule(run);
                Anneal::Schedule { kappa0, growth }
            } else {
                Anneal::Off
            }
        }
        "kappa0" | "growth" => {
            let (mut kappa0, mut growth) = schedule(run);
            if key == "kappa0" {
                kappa0 = f()?;
            } else {
                growth = f()?;
            }
            if matches!(run.anneal, Anneal::Schedule { .. }) {
                run.anneal = Anneal::Schedule { kappa0, growth };
            } else {
                return Err(parse_err(line, format!("{key} needs anneal=on earlier in the file")));
            }
        }
        "prune_merge" => run.prune_merge = parse_bool(value, line)?,
        "prune_threshold" => run.prune_threshold = f()?,
        "merge_threshold" => run.merge_threshold = f()?,
        "prune_every" => run.prune_every = u()?,
        "elbo_elimination" => run.elbo_elimination = parse_bool(value, line)?,
        "elbo_tol" => run.elbo_tol = f()?,
        "max_iter" => run.max_iter = u()?,
        "eta" => run.eta = f()?,
        "kappa" => run.kappa = f()?,
        "sampler_k" => {
            let k = u()?;
            run.sampler = if k == 0 {
                None
            } else {
                Some(SamplerConfig { k, strategy: run.sampler.map(|s| s.strategy).unwrap_or(SampleStrategy::BestSample) })
            }
        }
        "sampler_strategy" => {
            let strategy = match value {
                "best_sample" => SampleStrategy::BestSample,
                "average_accumulators" => SampleStrategy::AverageAccumulators,
                _ => return Err(parse_err(line, format!("unknown sampler strategy {value:?}"))),
            };
            match &mut run.sampler {
                Some(s) => s.strategy = strategy,
                None => return Err(parse_err(line, "sampler_strategy needs sampler_k earlier in the file")),
            }
        }
        "seed" => run.seed = value.parse().map_err(|_| parse_err(line, format!("bad seed {value:?}")))?,
        "update_model" => run.update_model = parse_bool(value, line)?,
        "min_divergence" => run.min_divergence = parse_bool(value, line)?,
        "optimize_tau0" => run.optimize_tau0 = parse_bool(value, line)?,
        "optimize_alpha" => run.optimize_alpha = parse_bool(value, line)?,
        "optimize_mu" => run.optimize_mu = parse_bool(value, line)?,
        "isotropic_beta" => run.isotropic_beta = parse_bool(value, line)?,
        "tau0" => cfg.hyper.tau0 = f()?,
        "a_alpha" => cfg.hyper.a_alpha = f()?,
        "b_alpha" => cfg.hyper.b_alpha = f()?,
        _ => return Err(parse_err(line, format!("unknown configuration key {key:?}"))),
    }
    Ok(())
}

/// Flat `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<ConfigFile> {
    let mut cfg = ConfigFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| parse_err(i + 1, format!("expected key=value, found {line:?}")))?;
        apply_setting(&mut cfg, k.trim(), v.trim(), i + 1)?;
    }
    cfg.run.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    parse_config(&read_text(path)?)
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Point => "point",
        Variant::Bayes => "bayes",
    }
}

fn init_name(i: InitMethod) -> &'static str {
    match i {
        InitMethod::Ahc => "ahc",
        InitMethod::RandomY => "random",
        InitMethod::Oracle => "oracle",
        InitMethod::UniformPi => "uniform",
    }
}

/// Line-oriented report: `# key value` header lines, then one
/// `iter elbo M kappa` row per iteration.
pub fn format_report(report: &RunReport, cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut h = |k: &str, v: String| {
        let _ = writeln!(out, "# {k} {v}");
    };
    h("variant", variant_name(cfg.variant).into());
    h("init", init_name(cfg.init_method).into());
    h("m_init", cfg.m_init.to_string());
    h("eta", fmt_f64(cfg.eta));
    h("kappa", fmt_f64(cfg.kappa));
    match cfg.anneal {
        Anneal::Off => h("anneal", "off".into()),
        Anneal::Schedule { kappa0, growth } => h("anneal", format!("{} {}", fmt_f64(kappa0), fmt_f64(growth))),
    }
    h("prune_merge", cfg.prune_merge.to_string());
    h("seed", cfg.seed.to_string());
    h("tau0", fmt_f64(report.hyper.tau0));
    h("iterations", report.trace.len().to_string());
    h("converged", report.converged.to_string());
    h("final_m", report.final_m().to_string());
    h("final_elbo", fmt_f64(report.final_elbo()));
    for e in &report.events {
        let action = match e.action {
            Action::Prune => "prune",
            Action::Merge => "merge",
            Action::Eliminate => "eliminate",
        };
        let cols: Vec<String> = e.columns.iter().map(|c| c.to_string()).collect();
        h(
            "event",
            format!(
                "{} {action} {} {} {} {}",
                e.iter,
                cols.join(","),
                if e.accepted { "accepted" } else { "rejected" },
                fmt_f64(e.elbo_before),
                fmt_f64(e.elbo_after)
            ),
        );
    }
    for w in &report.warnings {
        h("warning", w.clone());
    }
    let _ = writeln!(out, "iter elbo M kappa");
    for r in &report.trace {
        let _ = writeln!(out, "{} {} {} {}", r.iter, fmt_f64(r.elbo), r.m, fmt_f64(r.kappa));
    }
    out
}

/// Parsed report: header entries (repeatable keys keep every value) and
/// `(iter, elbo, M, kappa)` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFile {
    pub header: BTreeMap<String, Vec<String>>,
    pub rows: Vec<(usize, f64, usize, f64)>,
}

impl ReportFile {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.header.get(key).and_then(|v| v.first()).map(|s| s.as_str())
    }
}

pub fn parse_report(text: &str) -> Result<ReportFile> {
    let mut header: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut in_body = false;
    for (i, l) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(rest) = l.strip_prefix("# ") {
            if in_body {
                return Err(parse_err(n, "header line after the trace"));
            }
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            header.entry(k.to_string()).or_default().push(v.to_string());
        } else if l.trim() == "iter elbo M kappa" {
            in_body = true;
        } else if !l.trim().is_empty() {
            let t: Vec<&str> = l.split_whitespace().collect();
            if !in_body || t.len() != 4 {
                return Err(parse_err(n, format!("malformed trace row {l:?}")));
            }
            rows.push((parse_usize(t[0], n)?, parse_f64(t[1], n)?, parse_usize(t[2], n)?, parse_f64(t[3], n)?));
        }
    }
    Ok(ReportFile { header, rows })
}

/// One line per lower-bound term followed by the total.
pub fn format_elbo_table(b: &ElboBreakdown) -> String {
    let mut out = String::new();
    for (name, v) in &b.terms {
        let _ = writeln!(out, "{name:<24} {}", fmt_f64(*v));
    }
    let _ = writeln!(out, "{:<24} {}", "total", fmt_f64(b.total));
    out
}
