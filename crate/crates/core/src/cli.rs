//! Command-line interface: CSV ingestion, JSON configuration with flag
//! overrides, and the `fit` / `simulate` / `select-k` / `test-exogeneity`
//! commands with machine-readable outputs.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{
    validate, Family, FitResult, KRule, Link, ModelSpec, PanelDataset, Treatment, WeightModel,
};
use crate::inference::{significance_label, wald_pvalue, SeReport};
use crate::sim::{Estimator, ScenarioConfig, StudyOptions};
use crate::{comparators, em, inference, sim, Error, Result};

/// Column roles mapping CSV headers into a panel.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub id: String,
    pub time: Option<String>,
    pub response: String,
    /// Covariate columns; `a*b` derives an interaction of two columns.
    /// Empty selects every column other than id/time/response.
    pub covariates: Vec<String>,
}

/// Parse a panel CSV (header row, '.' decimals, ',' separator).
pub fn ingest_csv(path: &Path, roles: &ColumnRoles) -> Result<PanelDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: missing header row", path.display())));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{}' not found in header", name)))
    };
    let id_idx = col(&roles.id)?;
    let time_idx = roles.time.as_ref().map(|t| col(t)).transpose()?;
    let y_idx = col(&roles.response)?;

    // Either explicit covariates (with possible a*b interactions) or every
    // remaining column.
    enum Source {
        Plain(usize),
        Interaction(usize, usize),
    }
    let mut names = Vec::new();
    let mut sources = Vec::new();
    if roles.covariates.is_empty() {
        for (j, h) in headers.iter().enumerate() {
            if j != id_idx && Some(j) != time_idx && j != y_idx {
                names.push(h.clone());
                sources.push(Source::Plain(j));
            }
        }
    } else {
        for c in &roles.covariates {
            if let Some((a, b)) = c.split_once('*') {
                sources.push(Source::Interaction(col(a.trim())?, col(b.trim())?));
            } else {
                sources.push(Source::Plain(col(c)?));
            }
            names.push(c.clone());
        }
    }

    let parse_num = |field: &str, line: usize, colname: &str| -> Result<f64> {
        field.parse::<f64>().map_err(|_| {
            Error::Data(format!(
                "line {}: column '{}': unparseable numeric value '{}'",
                line, colname, field
            ))
        })
    };

    let mut ids = Vec::new();
    let mut time = Vec::new();
    let mut y = Vec::new();
    let mut rows = Vec::new();
    let mut seen: HashMap<(String, i64), usize> = HashMap::new();
    for (rec_idx, record) in reader.records().enumerate() {
        let record = record?;
        let line = rec_idx + 2; // header is line 1
        let get = |j: usize| -> Result<&str> {
            record.get(j).ok_or_else(|| {
                Error::Data(format!("line {}: missing cell in column {}", line, headers[j]))
            })
        };
        let id = get(id_idx)?.to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("line {}: empty id", line)));
        }
        let t = match time_idx {
            Some(j) => {
                let raw = get(j)?;
                raw.parse::<f64>()
                    .map(|v| v.round() as i64)
                    .map_err(|_| {
                        Error::Data(format!(
                            "line {}: column '{}': unparseable time value '{}'",
                            line,
                            roles.time.as_deref().unwrap_or("time"),
                            raw
                        ))
                    })?
            }
            None => rec_idx as i64,
        };
        if time_idx.is_some() {
            if let Some(prev) = seen.insert((id.clone(), t), line) {
                return Err(Error::Data(format!(
                    "line {}: duplicate (id, time) pair ('{}', {}) first seen at line {}",
                    line, id, t, prev
                )));
            }
        }
        y.push(parse_num(get(y_idx)?, line, &roles.response)?);
        let mut row = Vec::with_capacity(sources.len());
        for (s, name) in sources.iter().zip(&names) {
            match s {
                Source::Plain(j) => row.push(parse_num(get(*j)?, line, name)?),
                Source::Interaction(a, b) => {
                    let va = parse_num(get(*a)?, line, name)?;
                    let vb = parse_num(get(*b)?, line, name)?;
                    row.push(va * vb);
                }
            }
        }
        ids.push(id);
        time.push(t);
        rows.push(row);
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    PanelDataset::from_observations(ids, time, y, rows, names)
}

/// Resolved run configuration: JSON config file keys overridden by CLI flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub id_col: Option<String>,
    pub time_col: Option<String>,
    pub response: Option<String>,
    pub covariates: Option<Vec<String>>,
    pub weight_covariates: Option<Vec<String>>,
    pub family: Option<String>,
    pub link: Option<String>,
    pub treatment: Option<String>,
    pub k: Option<usize>,
    pub k_rule: Option<String>,
    pub k_max: Option<usize>,
    pub starts: Option<usize>,
    pub seed: Option<u64>,
    pub em_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub quadrature_nodes: Option<usize>,
    pub polish: Option<bool>,
    // simulate
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub t: Option<usize>,
    pub b: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub mu_x: Option<f64>,
    pub r_x: Option<f64>,
    pub sigma_u: Option<f64>,
    pub sigma_e: Option<f64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    fn merge_flags(&mut self, flags: &CommonFlags) {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f.clone(); } )* };
        }
        take!(
            input,
            id_col,
            time_col,
            response,
            family,
            link,
            treatment,
            k,
            k_rule,
            k_max,
            starts,
            seed,
            em_tol,
            max_iter,
            quadrature_nodes,
            scenario,
            n,
            t,
            b,
            mu_x,
            r_x,
            sigma_u,
            sigma_e,
            out
        );
        if let Some(c) = &flags.covariates {
            self.covariates = Some(split_list(c));
        }
        if let Some(c) = &flags.weight_covariates {
            self.weight_covariates = Some(split_list(c));
        }
        if let Some(e) = &flags.estimators {
            self.estimators = Some(split_list(e));
        }
        if flags.no_polish {
            self.polish = Some(false);
        }
    }

    fn family(&self) -> Result<Family> {
        match self.family.as_deref().map(|s| s.to_ascii_lowercase()).as_deref() {
            Some("gaussian") => Ok(Family::Gaussian),
            Some("bernoulli") => Ok(Family::Bernoulli),
            Some(other) => Err(Error::Config(format!("unknown family '{}'", other))),
            None => Err(Error::Config("missing --family (gaussian|bernoulli)".into())),
        }
    }

    fn link(&self, family: Family) -> Result<Link> {
        match self.link.as_deref().map(|s| s.to_ascii_lowercase()).as_deref() {
            Some("identity") => Ok(Link::Identity),
            Some("logit") => Ok(Link::Logit),
            Some("probit") => Ok(Link::Probit),
            Some(other) => Err(Error::Config(format!("unknown link '{}'", other))),
            None => Ok(match family {
                Family::Gaussian => Link::Identity,
                Family::Bernoulli => Link::Logit,
            }),
        }
    }

    fn treatment(&self) -> Result<Treatment> {
        match self.treatment.as_deref().map(|s| s.to_ascii_uppercase()).as_deref() {
            Some("FM") => Ok(Treatment::Fm),
            Some("FMQP") => Ok(Treatment::FmQp),
            Some("COV") => Ok(Treatment::Cov),
            Some("PAR") => Ok(Treatment::Par),
            Some("PARQP") => Ok(Treatment::ParQp),
            Some("FE") => Ok(Treatment::Fe),
            Some("FEBC") => Err(Error::Config(
                "treatment FEbc is not implemented: the bias correction is out of scope; see the README"
                    .into(),
            )),
            Some(other) => Err(Error::Config(format!("unknown treatment '{}'", other))),
            None => Ok(Treatment::Fm),
        }
    }

    fn model_spec(&self) -> Result<ModelSpec> {
        let family = self.family()?;
        let link = self.link(family)?;
        let treatment = self.treatment()?;
        let mut spec = ModelSpec::new(family, link, treatment);
        spec.k_rule = match (&self.k, self.k_rule.as_deref().map(|s| s.to_ascii_lowercase())) {
            (Some(k), None) => KRule::Fixed(*k),
            (None, Some(rule)) => match rule.as_str() {
                "lik" | "lik_threshold" => KRule::LikThreshold,
                "aic" => KRule::Aic,
                "bic" => KRule::Bic,
                other => return Err(Error::Config(format!("unknown k-rule '{}'", other))),
            },
            (Some(_), Some(_)) => {
                return Err(Error::Config("--k and --k-rule are mutually exclusive".into()));
            }
            (None, None) => KRule::Fixed(1),
        };
        if let Some(km) = self.k_max {
            spec.k_max = km;
        }
        if let Some(s) = self.starts {
            spec.n_starts = s;
        }
        if let Some(s) = self.seed {
            spec.seed = s;
        }
        if let Some(v) = self.em_tol {
            spec.em_tol = v;
        }
        if let Some(v) = self.max_iter {
            spec.max_iter = v;
        }
        if let Some(v) = self.quadrature_nodes {
            spec.quadrature_nodes = v;
        }
        if let Some(v) = self.polish {
            spec.polish = v;
        }
        spec.weight_covariates = self.weight_covariates.clone();
        Ok(spec)
    }

    fn load_data(&self) -> Result<PanelDataset> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("missing --input CSV path".into()))?;
        let roles = ColumnRoles {
            id: self
                .id_col
                .clone()
                .ok_or_else(|| Error::Config("missing --id-col".into()))?,
            time: self.time_col.clone(),
            response: self
                .response
                .clone()
                .ok_or_else(|| Error::Config("missing --response".into()))?,
            covariates: self.covariates.clone().unwrap_or_default(),
        };
        ingest_csv(input, &roles)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&out)?;
        Ok(out)
    }

    fn scenario_config(&self) -> Result<ScenarioConfig> {
        let family = self.family()?;
        let scenario = sim::Scenario::parse(
            self.scenario
                .as_deref()
                .ok_or_else(|| Error::Config("missing --scenario".into()))?,
        )?;
        let n = self.n.ok_or_else(|| Error::Config("missing --n".into()))?;
        let t = self.t.ok_or_else(|| Error::Config("missing --t".into()))?;
        let b = self.b.ok_or_else(|| Error::Config("missing --b".into()))?;
        let mut cfg = ScenarioConfig::new(family, scenario, n, t, b, self.seed.unwrap_or(0));
        if let Some(v) = self.mu_x {
            cfg.hyper.mu_x = v;
        }
        if let Some(v) = self.r_x {
            cfg.hyper.r_x = v;
        }
        if let Some(v) = self.sigma_u {
            cfg.hyper.sigma_u = v;
        }
        if let Some(v) = self.sigma_e {
            cfg.hyper.sigma_e = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

#[derive(Debug, Clone, Args, Default)]
struct CommonFlags {
    /// JSON configuration; every flag below overrides its key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    id_col: Option<String>,
    #[arg(long)]
    time_col: Option<String>,
    #[arg(long)]
    response: Option<String>,
    /// Comma-separated covariate columns; `a*b` adds an interaction.
    #[arg(long)]
    covariates: Option<String>,
    /// Comma-separated columns entering the mixture-weight model (COV).
    #[arg(long)]
    weight_covariates: Option<String>,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    treatment: Option<String>,
    /// Fixed number of components.
    #[arg(long)]
    k: Option<usize>,
    /// K selection rule: lik | aic | bic.
    #[arg(long)]
    k_rule: Option<String>,
    #[arg(long)]
    k_max: Option<usize>,
    /// EM starts per K.
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    em_tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    quadrature_nodes: Option<usize>,
    /// Disable the quasi-Newton refinement of the EM optimum.
    #[arg(long, default_value_t = false)]
    no_polish: bool,
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    /// Comma-separated estimators, e.g. FM:lik,COV:lik,PARQP,FE.
    #[arg(long)]
    estimators: Option<String>,
    #[arg(long)]
    mu_x: Option<f64>,
    #[arg(long)]
    r_x: Option<f64>,
    #[arg(long)]
    sigma_u: Option<f64>,
    #[arg(long)]
    sigma_e: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(
    name = "mixpanel",
    about = "Finite-mixture random-intercept regression for longitudinal data",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one model to a CSV panel.
    Fit(CommonFlags),
    /// Run a simulation study and write the bias/ASE/sd grid.
    Simulate(CommonFlags),
    /// Fit K = 1..k_max and report all selection rules.
    SelectK(CommonFlags),
    /// Mundlak-Wald exogeneity test.
    TestExogeneity(CommonFlags),
}

fn resolve_config(flags: &CommonFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?
        }
        None => RunConfig::default(),
    };
    cfg.merge_flags(flags);
    Ok(cfg)
}

/// Entry point used by `main` and the integration tests. Returns the process
/// exit code: 0 success, 1 usage, 2 data error, 3 estimation failure.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Fit(flags) => resolve_config(flags).and_then(cmd_fit),
        Command::Simulate(flags) => resolve_config(flags).and_then(cmd_simulate),
        Command::SelectK(flags) => resolve_config(flags).and_then(cmd_select_k),
        Command::TestExogeneity(flags) => resolve_config(flags).and_then(cmd_test_exogeneity),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let payload = json!({ "error": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{}", payload);
            e.exit_code()
        }
    }
}

fn init_thread_pool() {
    if let Ok(v) = std::env::var("MIXPANEL_THREADS") {
        if let Ok(nthreads) = v.parse::<usize>() {
            if nthreads >= 1 {
                // Ignored if a global pool already exists.
                let _ = rayon::ThreadPoolBuilder::new().num_threads(nthreads).build_global();
            }
        }
    }
}

fn family_label(f: Family) -> &'static str {
    match f {
        Family::Gaussian => "gaussian",
        Family::Bernoulli => "bernoulli",
    }
}

fn timestamp() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Format with six significant digits for the human tables.
fn sig6(x: f64) -> String {
    if !x.is_finite() || x == 0.0 {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let dec = (5 - mag).max(0) as usize;
    format!("{:.*}", dec, x)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

struct EstimateRow {
    term: String,
    estimate: f64,
    se_observed: Option<f64>,
    se_sandwich: Option<f64>,
}

fn estimate_rows(fit: &FitResult, weight_names: &[String]) -> Vec<EstimateRow> {
    match &fit.se {
        Some(se) => se
            .terms
            .iter()
            .map(|t| EstimateRow {
                term: t.term.clone(),
                estimate: t.estimate,
                se_observed: Some(t.se_observed),
                se_sandwich: Some(t.se_sandwich),
            })
            .collect(),
        None => {
            // Natural terms without uncertainty (SE computation unavailable).
            let mut rows: Vec<EstimateRow> = fit
                .beta_names
                .iter()
                .zip(fit.params.beta.iter())
                .map(|(n, v)| EstimateRow {
                    term: n.clone(),
                    estimate: *v,
                    se_observed: None,
                    se_sandwich: None,
                })
                .collect();
            let k = fit.params.k();
            if k >= 2 {
                for c in 0..k {
                    rows.push(EstimateRow {
                        term: format!("zeta{}", c + 1),
                        estimate: fit.params.zeta[c],
                        se_observed: None,
                        se_sandwich: None,
                    });
                }
                match &fit.params.weights {
                    WeightModel::Constant(pi) => {
                        for c in 0..k - 1 {
                            rows.push(EstimateRow {
                                term: format!("pi{}", c + 1),
                                estimate: pi[c],
                                se_observed: None,
                                se_sandwich: None,
                            });
                        }
                    }
                    WeightModel::Logistic(g) => {
                        for l in 0..g.nrows() {
                            for j in 0..g.ncols() {
                                let term = if j == 0 {
                                    format!("w:comp{}:intercept", l + 1)
                                } else {
                                    format!("w:comp{}:{}", l + 1, weight_names[j - 1])
                                };
                                rows.push(EstimateRow {
                                    term,
                                    estimate: g[(l, j)],
                                    se_observed: None,
                                    se_sandwich: None,
                                });
                            }
                        }
                    }
                }
            }
            if let Some(su) = fit.sigma_u {
                rows.push(EstimateRow {
                    term: "sigma_u".into(),
                    estimate: su,
                    se_observed: None,
                    se_sandwich: None,
                });
            }
            if let Some(s) = fit.params.sigma_e {
                rows.push(EstimateRow {
                    term: "sigma_e".into(),
                    estimate: s,
                    se_observed: None,
                    se_sandwich: None,
                });
            }
            rows
        }
    }
}

fn write_estimates_csv(path: &Path, rows: &[EstimateRow]) -> Result<()> {
    let mut out = String::from("term,estimate,se_observed,se_sandwich,significance\n");
    for r in rows {
        let (seo, ses) = (
            r.se_observed.map(|v| format!("{v}")).unwrap_or_default(),
            r.se_sandwich.map(|v| format!("{v}")).unwrap_or_default(),
        );
        let p = r.se_sandwich.or(r.se_observed).map(|se| wald_pvalue(r.estimate, se));
        let label = p.map(significance_label).unwrap_or("");
        out.push_str(&format!("{},{},{},{},{}\n", r.term, r.estimate, seo, ses, label));
    }
    write_text(path, &out)
}

fn params_json(fit: &FitResult) -> serde_json::Value {
    let beta: serde_json::Map<String, serde_json::Value> = fit
        .beta_names
        .iter()
        .zip(fit.params.beta.iter())
        .map(|(n, v)| (n.clone(), json!(v)))
        .collect();
    let weights = match &fit.params.weights {
        WeightModel::Constant(pi) => json!({ "constant": pi.as_slice() }),
        WeightModel::Logistic(g) => {
            let rows: Vec<Vec<f64>> = (0..g.nrows())
                .map(|l| (0..g.ncols()).map(|j| g[(l, j)]).collect())
                .collect();
            json!({ "logistic": rows })
        }
    };
    json!({
        "beta": beta,
        "zeta": fit.params.zeta.as_slice(),
        "weights": weights,
        "sigma_e": fit.params.sigma_e,
        "sigma_u": fit.sigma_u,
    })
}

fn model_json(cfg: &RunConfig, spec: &ModelSpec, fit: &FitResult) -> serde_json::Value {
    json!({
        "command": "fit",
        "config": cfg,
        "seed": spec.seed,
        "timestamp": timestamp(),
        "model": {
            "family": spec.family,
            "link": spec.link,
            "treatment": spec.treatment,
            "k": fit.params.k(),
            "npar": fit.npar,
            "loglik": fit.loglik,
            "aic": fit.aic,
            "bic": fit.bic,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "start_index": fit.start_index,
            "flags": fit.flags,
            "k_path": fit.k_path,
            "params": params_json(fit),
            "se": fit.se.as_ref().map(|s| json!({
                "reliable": s.reliable,
                "condition_number": s.condition_number,
                "min_eigenvalue": s.min_eigenvalue,
                "terms": s.terms,
            })),
        },
    })
}

fn print_qp_table(rows: &[EstimateRow]) {
    println!("{:<24} {:>12} {:>12} {:>12}  sig", "Within", "estimate", "se(obs)", "se(sand)");
    for r in rows.iter().filter(|r| r.term.starts_with("within:")) {
        print_row(r, "within:");
    }
    println!("{:<24}", "Between");
    for r in rows.iter().filter(|r| r.term.starts_with("between:")) {
        print_row(r, "between:");
    }
    let rest: Vec<&EstimateRow> = rows
        .iter()
        .filter(|r| !r.term.starts_with("within:") && !r.term.starts_with("between:"))
        .collect();
    if !rest.is_empty() {
        println!("{:<24}", "Other");
        for r in rest {
            print_row(r, "");
        }
    }
}

fn print_row(r: &EstimateRow, strip: &str) {
    let name = r.term.strip_prefix(strip).unwrap_or(&r.term);
    let p = r.se_sandwich.or(r.se_observed).map(|se| wald_pvalue(r.estimate, se));
    println!(
        "{:<24} {:>12} {:>12} {:>12}  {}",
        name,
        sig6(r.estimate),
        r.se_observed.map(sig6).unwrap_or_default(),
        r.se_sandwich.map(sig6).unwrap_or_default(),
        p.map(significance_label).unwrap_or("")
    );
}

fn print_prior_table(fit: &FitResult, weight_names: &[String]) {
    let k = fit.params.k();
    let gamma = match &fit.params.weights {
        WeightModel::Logistic(g) => g,
        _ => return,
    };
    println!("Prior probability model (reference component {k}):");
    print!("{:<16}", "Variable");
    for c in 0..k {
        print!(" {:>12}", format!("Comp.{}", c + 1));
    }
    println!();
    print!("{:<16}", "Location");
    for c in 0..k {
        print!(" {:>12}", sig6(fit.params.zeta[c]));
    }
    println!();
    let mut labels = vec!["Intercept".to_string()];
    labels.extend(weight_names.iter().cloned());
    for (j, label) in labels.iter().enumerate() {
        print!("{:<16}", label);
        for l in 0..k - 1 {
            print!(" {:>12}", sig6(gamma[(l, j)]));
        }
        println!(" {:>12}", "");
    }
}

fn frame_weight_names(data: &PanelDataset, spec: &ModelSpec) -> Vec<String> {
    em::build_frame(data, spec).map(|f| f.weight_names).unwrap_or_default()
}

fn cmd_fit(cfg: RunConfig) -> Result<()> {
    let data = cfg.load_data()?;
    let spec = cfg.model_spec()?;
    validate(&data, &spec)?;
    let out = cfg.out_dir()?;

    let (fit, weight_names) = match spec.treatment {
        Treatment::Fm | Treatment::FmQp | Treatment::Cov => {
            let mut fit = em::fit(&data, &spec)?;
            match inference::mixture_se(&data, &spec, &fit) {
                Ok(se) => fit.se = Some(se),
                Err(Error::NotAtOptimum { grad_norm }) => {
                    fit.flags.push(format!("se_skipped_score:{:.3e}", grad_norm));
                }
                Err(e) => return Err(e),
            }
            let wn = frame_weight_names(&data, &spec);
            (fit, wn)
        }
        Treatment::Par | Treatment::ParQp => (comparators::agh_fit(&data, &spec)?, Vec::new()),
        Treatment::Fe => (fe_as_fit(&data, &spec)?, Vec::new()),
    };

    let rows = estimate_rows(&fit, &weight_names);
    write_estimates_csv(&out.join("estimates.csv"), &rows)?;
    let doc = model_json(&cfg, &spec, &fit);
    write_text(&out.join("model.json"), &serde_json::to_string_pretty(&doc)?)?;

    println!(
        "fit: treatment {:?}, K = {}, loglik = {}, AIC = {}, BIC = {}, converged = {}",
        spec.treatment,
        fit.params.k(),
        sig6(fit.loglik),
        sig6(fit.aic),
        sig6(fit.bic),
        fit.converged
    );
    if matches!(spec.treatment, Treatment::FmQp | Treatment::ParQp) {
        print_qp_table(&rows);
    } else if spec.treatment == Treatment::Cov && fit.params.k() >= 2 {
        print_prior_table(&fit, &weight_names);
    } else {
        for r in &rows {
            print_row(r, "");
        }
    }
    if !fit.flags.is_empty() {
        println!("flags: {}", fit.flags.join("; "));
    }
    Ok(())
}

/// Wrap the fixed-effect estimators in the common result shape.
fn fe_as_fit(data: &PanelDataset, spec: &ModelSpec) -> Result<FitResult> {
    match spec.family {
        Family::Gaussian => {
            let fe = comparators::fe_gaussian_fit(data)?;
            let p = fe.coef.len();
            let terms = fe
                .names
                .iter()
                .zip(fe.coef.iter().zip(fe.se.iter()))
                .map(|(n, (c, s))| crate::inference::SeTerm {
                    term: n.clone(),
                    estimate: *c,
                    se_observed: *s,
                    se_sandwich: *s,
                })
                .collect();
            let se = SeReport {
                terms,
                vcov_observed: nalgebra::DMatrix::zeros(p, p),
                vcov_sandwich: nalgebra::DMatrix::zeros(p, p),
                condition_number: f64::NAN,
                min_eigenvalue: f64::NAN,
                reliable: true,
            };
            Ok(FitResult {
                params: crate::data::MixtureParams {
                    beta: fe.coef.clone(),
                    zeta: DVector::from_element(1, 0.0),
                    weights: WeightModel::Constant(DVector::from_element(1, 1.0)),
                    sigma_e: Some(fe.sigma),
                },
                beta_names: fe.names.clone(),
                loglik: f64::NAN,
                // Within effects only; the residual scale is a dof-corrected
                // by-product, not a counted parameter.
                npar: p,
                aic: f64::NAN,
                bic: f64::NAN,
                tau: nalgebra::DMatrix::from_element(data.n_units(), 1, 1.0),
                se: Some(se),
                converged: true,
                iterations: 1,
                k_path: Vec::new(),
                start_index: 0,
                sigma_u: None,
                flags: vec!["fe_within_only".into()],
            })
        }
        Family::Bernoulli => {
            let fe = comparators::fe_probit_fit(data)?;
            let p = fe.coef.len();
            let terms = fe
                .names
                .iter()
                .zip(fe.coef.iter().zip(fe.se.iter()))
                .map(|(n, (c, s))| crate::inference::SeTerm {
                    term: n.clone(),
                    estimate: *c,
                    se_observed: *s,
                    se_sandwich: *s,
                })
                .collect();
            let se = SeReport {
                terms,
                vcov_observed: nalgebra::DMatrix::zeros(p, p),
                vcov_sandwich: nalgebra::DMatrix::zeros(p, p),
                condition_number: f64::NAN,
                min_eigenvalue: f64::NAN,
                reliable: fe.converged && !fe.separation,
            };
            let mut flags = vec![format!("fe_dropped_units:{}", fe.dropped_units)];
            if fe.separation {
                flags.push("fe_separation".into());
            }
            Ok(FitResult {
                params: crate::data::MixtureParams {
                    beta: fe.coef.clone(),
                    zeta: DVector::from_element(1, 0.0),
                    weights: WeightModel::Constant(DVector::from_element(1, 1.0)),
                    sigma_e: None,
                },
                beta_names: fe.names.clone(),
                loglik: fe.loglik,
                npar: p,
                aic: f64::NAN,
                bic: f64::NAN,
                tau: nalgebra::DMatrix::from_element(data.n_units(), 1, 1.0),
                se: Some(se),
                converged: fe.converged,
                iterations: fe.loglik_path.len(),
                k_path: Vec::new(),
                start_index: 0,
                sigma_u: None,
                flags,
            })
        }
    }
}

fn cmd_simulate(cfg: RunConfig) -> Result<()> {
    let scenario_cfg = cfg.scenario_config()?;
    let out = cfg.out_dir()?;
    let estimators: Vec<Estimator> = match &cfg.estimators {
        Some(list) => list.iter().map(|s| Estimator::parse(s)).collect::<Result<_>>()?,
        None => {
            let mut base = vec![
                Estimator::Fm(sim::Criterion::Lik),
                Estimator::FmQp(sim::Criterion::Lik),
                Estimator::Cov(sim::Criterion::Lik),
                Estimator::Par,
                Estimator::ParQp,
            ];
            if scenario_cfg.family == Family::Bernoulli {
                base.push(Estimator::Fe);
            }
            base
        }
    };
    let mut opts = StudyOptions::default();
    if let Some(s) = cfg.starts {
        opts.n_starts = s;
    }
    if let Some(km) = cfg.k_max {
        opts.k_max = km;
    }
    if let Some(v) = cfg.em_tol {
        opts.em_tol = v;
    }
    if let Some(v) = cfg.max_iter {
        opts.max_iter = v;
    }
    if let Some(v) = cfg.quadrature_nodes {
        opts.quadrature_nodes = v;
    }
    if let Some(v) = cfg.polish {
        opts.polish = v;
    }

    let result = sim::run_study(&scenario_cfg, &estimators, &opts)?;

    let mut csv_text =
        String::from("scenario,family,n,T,B_effective,estimator,criterion,coef,ASE,bias,sd\n");
    for row in &result.metrics.rows {
        csv_text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            scenario_cfg.scenario.label(),
            family_label(scenario_cfg.family),
            scenario_cfg.n,
            scenario_cfg.t,
            row.b_effective,
            row.estimator,
            row.criterion,
            row.coef,
            row.ase,
            row.bias,
            row.sd.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    write_text(&out.join("metrics.csv"), &csv_text)?;

    let study = json!({
        "command": "simulate",
        "config": cfg,
        "scenario": scenario_cfg,
        "options": opts,
        "timestamp": timestamp(),
        "warnings": result.warnings,
        "replicates": result.replicates,
    });
    write_text(&out.join("study.json"), &serde_json::to_string_pretty(&study)?)?;

    println!(
        "{:<8} {:<6} {:<6} {:>12} {:>12} {:>12} {:>6}",
        "est", "crit", "coef", "ASE", "bias", "sd", "B_eff"
    );
    for row in &result.metrics.rows {
        println!(
            "{:<8} {:<6} {:<6} {:>12} {:>12} {:>12} {:>6}",
            row.estimator,
            row.criterion,
            row.coef,
            sig6(row.ase),
            sig6(row.bias),
            row.sd.map(sig6).unwrap_or_default(),
            row.b_effective
        );
    }
    for w in &result.warnings {
        eprintln!("warning: {}", w);
    }
    Ok(())
}

fn cmd_select_k(cfg: RunConfig) -> Result<()> {
    let data = cfg.load_data()?;
    let mut spec = cfg.model_spec()?;
    if matches!(spec.k_rule, KRule::Fixed(_)) {
        spec.k_rule = KRule::Bic;
    }
    validate(&data, &spec)?;
    let out = cfg.out_dir()?;

    let fits = em::fit_k_path(&data, &spec, spec.k_max, false)?;
    let lik_idx = em::pick_by_lik_threshold(&fits);
    let aic_idx = (0..fits.len())
        .min_by(|&a, &b| fits[a].aic.partial_cmp(&fits[b].aic).unwrap())
        .unwrap();
    let bic_idx = (0..fits.len())
        .min_by(|&a, &b| fits[a].bic.partial_cmp(&fits[b].bic).unwrap())
        .unwrap();

    let mut text = String::from("K,loglik,npar,AIC,BIC,selected_by_lik,selected_by_aic,selected_by_bic\n");
    for (i, f) in fits.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.params.k(),
            f.loglik,
            f.npar,
            f.aic,
            f.bic,
            i == lik_idx,
            i == aic_idx,
            i == bic_idx
        ));
    }
    write_text(&out.join("kpath.csv"), &text)?;

    println!(
        "{:>3} {:>14} {:>6} {:>14} {:>14}  lik aic bic",
        "K", "loglik", "npar", "AIC", "BIC"
    );
    for (i, f) in fits.iter().enumerate() {
        println!(
            "{:>3} {:>14} {:>6} {:>14} {:>14}  {:>3} {:>3} {:>3}",
            f.params.k(),
            sig6(f.loglik),
            f.npar,
            sig6(f.aic),
            sig6(f.bic),
            if i == lik_idx { "*" } else { "" },
            if i == aic_idx { "*" } else { "" },
            if i == bic_idx { "*" } else { "" },
        );
    }
    Ok(())
}

fn cmd_test_exogeneity(cfg: RunConfig) -> Result<()> {
    let data = cfg.load_data()?;
    let spec = cfg.model_spec()?;
    validate(&data, &spec)?;
    let out = cfg.out_dir()?;
    let (wald, df, pvalue) = inference::mundlak_exogeneity_test(&data, &spec)?;
    let doc = json!({
        "command": "test-exogeneity",
        "config": cfg,
        "timestamp": timestamp(),
        "wald": wald,
        "df": df,
        "pvalue": pvalue,
    });
    write_text(&out.join("exogeneity.json"), &serde_json::to_string_pretty(&doc)?)?;
    println!(
        "Mundlak-Wald exogeneity test: W = {}, df = {}, p = {}{}",
        sig6(wald),
        df,
        sig6(pvalue),
        significance_label(pvalue)
    );
    Ok(())
}
