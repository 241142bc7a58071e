//! Data-generating processes for the simulation scenarios and a seeded
//! replication runner that measures bias, average squared error, and the
//! sampling standard deviation of every estimator.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Family, KRule, Link, ModelSpec, PanelDataset, ParamLayout, Treatment};
use crate::numeric::{self, derive_rng};
use crate::{comparators, em, inference, Error, Result};

/// Simulation scenario for the random-effect / covariate dependence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Gaussian random effects, cor(u, x) drawn from (0, 0.2].
    S1_1,
    /// Gaussian random effects, cor(u, x) drawn from (0.2, 0.5].
    S1_2,
    /// Gaussian random effects, cor(u, x) drawn from (0.5, 0.8].
    S1_3,
    /// u = exp(g0 + g1 xbar) + e.
    S2,
    /// Discrete u with multinomial-logit masses in xbar.
    S3,
    /// u = g0 + g1 max_t(x) + e (Bernoulli only).
    S4,
}

impl Scenario {
    pub fn rho_interval(self) -> Option<(f64, f64)> {
        match self {
            Scenario::S1_1 => Some((0.0, 0.2)),
            Scenario::S1_2 => Some((0.2, 0.5)),
            Scenario::S1_3 => Some((0.5, 0.8)),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "S1_1" | "1.1" => Ok(Scenario::S1_1),
            "S1_2" | "1.2" => Ok(Scenario::S1_2),
            "S1_3" | "1.3" => Ok(Scenario::S1_3),
            "S2" | "2" => Ok(Scenario::S2),
            "S3" | "3" => Ok(Scenario::S3),
            "S4" | "4" => Ok(Scenario::S4),
            other => Err(Error::Config(format!("unknown scenario '{}'", other))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Scenario::S1_1 => "S1_1",
            Scenario::S1_2 => "S1_2",
            Scenario::S1_3 => "S1_3",
            Scenario::S2 => "S2",
            Scenario::S3 => "S3",
            Scenario::S4 => "S4",
        }
    }
}

/// Scenario constants. The regression-coefficient ranges and the S3
/// constants are fixed by the study design; the covariate moments and noise
/// scales are configurable defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioHyper {
    pub beta0_range: (f64, f64),
    pub beta1_range: (f64, f64),
    /// Covariate mean.
    pub mu_x: f64,
    /// Constant intra-unit covariate correlation; S1 needs rho_max^2 <= r_x.
    pub r_x: f64,
    /// Random-effect scale (S1).
    pub sigma_u: f64,
    /// Gaussian response noise SD.
    pub sigma_e: f64,
    pub s2_gamma: (f64, f64),
    pub s4_gamma: (f64, f64),
    pub s3_zeta: [f64; 3],
    pub s3_phi0: [f64; 3],
    pub s3_phi1: [f64; 3],
}

impl Default for ScenarioHyper {
    fn default() -> Self {
        ScenarioHyper {
            beta0_range: (-0.6, -0.2),
            beta1_range: (0.25, 0.75),
            mu_x: 0.0,
            r_x: 0.64,
            sigma_u: 1.0,
            sigma_e: 1.0,
            s2_gamma: (0.0, 1.0),
            s4_gamma: (0.0, 1.0),
            s3_zeta: [-2.0, 0.0, 1.0],
            s3_phi0: [0.0, 0.5, -3.5],
            s3_phi1: [0.0, -3.5, 3.0],
        }
    }
}

/// Full definition of one simulation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub family: Family,
    pub scenario: Scenario,
    pub n: usize,
    pub t: usize,
    /// Number of replicates.
    pub b: usize,
    pub seed: u64,
    #[serde(default)]
    pub hyper: ScenarioHyper,
}

impl ScenarioConfig {
    pub fn new(family: Family, scenario: Scenario, n: usize, t: usize, b: usize, seed: u64) -> Self {
        ScenarioConfig { family, scenario, n, t, b, seed, hyper: ScenarioHyper::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 || self.b == 0 {
            return Err(Error::Config("n, T, and B must all be >= 1".into()));
        }
        if self.scenario == Scenario::S4 && self.family != Family::Bernoulli {
            return Err(Error::Config("scenario S4 is defined for the Bernoulli case only".into()));
        }
        if !(0.0..1.0).contains(&self.hyper.r_x) {
            return Err(Error::Config("covariate correlation r_x must lie in [0, 1)".into()));
        }
        if let Some((lo, hi)) = self.scenario.rho_interval() {
            if !(-1.0 < lo && hi < 1.0) {
                return Err(Error::Config("rho interval must sit inside (-1, 1)".into()));
            }
            if hi > self.hyper.r_x.sqrt() + 1e-12 {
                return Err(Error::Config(format!(
                    "infeasible rho/r_x pair: max rho {} needs r_x >= {} (shared-factor construction)",
                    hi,
                    hi * hi
                )));
            }
        }
        Ok(())
    }

    /// Response link implied by the family (identity / probit).
    pub fn link(&self) -> Link {
        match self.family {
            Family::Gaussian => Link::Identity,
            Family::Bernoulli => Link::Probit,
        }
    }
}

/// Covariates plus the shared unit factor the S1 construction reuses.
#[derive(Debug, Clone)]
pub struct CovariateDraw {
    /// n x T covariate values.
    pub x: DMatrix<f64>,
    /// Common unit factor a_i.
    pub factor: DVector<f64>,
}

/// Draw covariates with unit variances and constant intra-unit correlation
/// r_x through the one-factor representation
/// `x_it = mu + sqrt(r_x) a_i + sqrt(1 - r_x) e_it`.
pub fn draw_covariates(
    n: usize,
    t: usize,
    mu_x: f64,
    r_x: f64,
    rng: &mut ChaCha8Rng,
) -> CovariateDraw {
    let sa = r_x.sqrt();
    let se = (1.0 - r_x).sqrt();
    let mut x = DMatrix::zeros(n, t);
    let mut factor = DVector::zeros(n);
    for i in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        factor[i] = a;
        for j in 0..t {
            let e: f64 = rng.sample(StandardNormal);
            x[(i, j)] = mu_x + sa * a + se * e;
        }
    }
    CovariateDraw { x, factor }
}

/// Draw the unit random effects for a scenario. `rho` must be supplied for
/// the S1 sub-scenarios (drawn per replicate by the caller).
pub fn draw_random_effects(
    scenario: Scenario,
    draw: &CovariateDraw,
    hyper: &ScenarioHyper,
    rho: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<DVector<f64>> {
    let n = draw.x.nrows();
    let t = draw.x.ncols();
    let xbar = DVector::from_fn(n, |i, _| draw.x.row(i).sum() / t as f64);
    let mut u = DVector::zeros(n);
    match scenario {
        Scenario::S1_1 | Scenario::S1_2 | Scenario::S1_3 => {
            let rho = rho.ok_or_else(|| Error::Config("S1 needs a rho draw".into()))?;
            let lambda = rho / hyper.r_x.sqrt();
            if lambda.abs() > 1.0 {
                return Err(Error::Config(format!(
                    "rho {} infeasible for r_x {} (lambda {})",
                    rho, hyper.r_x, lambda
                )));
            }
            let resid = (1.0 - lambda * lambda).sqrt();
            for i in 0..n {
                let v: f64 = rng.sample(StandardNormal);
                u[i] = hyper.sigma_u * (lambda * draw.factor[i] + resid * v);
            }
        }
        Scenario::S2 => {
            for i in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                u[i] = (hyper.s2_gamma.0 + hyper.s2_gamma.1 * xbar[i]).exp() + e;
            }
        }
        Scenario::S3 => {
            for i in 0..n {
                let logits: Vec<f64> = (0..3)
                    .map(|k| hyper.s3_phi0[k] + hyper.s3_phi1[k] * xbar[i])
                    .collect();
                let lp = numeric::log_softmax(&logits);
                let draw_u: f64 = rng.gen();
                let mut cum = 0.0;
                let mut comp = 2;
                for (k, l) in lp.iter().enumerate() {
                    cum += l.exp();
                    if draw_u <= cum {
                        comp = k;
                        break;
                    }
                }
                u[i] = hyper.s3_zeta[comp];
            }
        }
        Scenario::S4 => {
            for i in 0..n {
                let e: f64 = rng.sample(StandardNormal);
                let xmax = draw.x.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                u[i] = hyper.s4_gamma.0 + hyper.s4_gamma.1 * xmax + e;
            }
        }
    }
    Ok(u)
}

/// One generated replicate.
#[derive(Debug, Clone)]
pub struct GeneratedSample {
    pub data: PanelDataset,
    pub beta0: f64,
    pub beta1: f64,
    pub rho: Option<f64>,
}

/// Generate replicate `b` of a scenario. Deterministic in
/// `(cfg.seed, replicate)` regardless of thread schedule.
pub fn generate_sample(cfg: &ScenarioConfig, replicate: usize) -> Result<GeneratedSample> {
    let mut rng = derive_rng(cfg.seed, &[2, replicate as u64]);
    let h = &cfg.hyper;
    let beta0 = h.beta0_range.0 + (h.beta0_range.1 - h.beta0_range.0) * rng.gen::<f64>();
    let beta1 = h.beta1_range.0 + (h.beta1_range.1 - h.beta1_range.0) * rng.gen::<f64>();
    let rho = cfg
        .scenario
        .rho_interval()
        .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>());

    let draw = draw_covariates(cfg.n, cfg.t, h.mu_x, h.r_x, &mut rng);
    let u = draw_random_effects(cfg.scenario, &draw, h, rho, &mut rng)?;

    let mut ids = Vec::with_capacity(cfg.n * cfg.t);
    let mut time = Vec::with_capacity(cfg.n * cfg.t);
    let mut y = Vec::with_capacity(cfg.n * cfg.t);
    let mut rows = Vec::with_capacity(cfg.n * cfg.t);
    for i in 0..cfg.n {
        for tt in 0..cfg.t {
            let eta = beta0 + beta1 * draw.x[(i, tt)] + u[i];
            let resp = match cfg.family {
                Family::Gaussian => {
                    let e: f64 = rng.sample(StandardNormal);
                    eta + h.sigma_e * e
                }
                Family::Bernoulli => {
                    let p = crate::families::normal_cdf(eta);
                    if rng.gen::<f64>() < p {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            ids.push(format!("u{i}"));
            time.push(tt as i64);
            rows.push(vec![draw.x[(i, tt)]]);
            y.push(resp);
        }
    }
    let data = PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()])?;
    Ok(GeneratedSample { data, beta0, beta1, rho })
}

/// K-selection criterion used by the mixture estimators in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Lik,
    Aic,
    Bic,
}

impl Criterion {
    pub fn label(self) -> &'static str {
        match self {
            Criterion::Lik => "lik",
            Criterion::Aic => "aic",
            Criterion::Bic => "bic",
        }
    }
    fn k_rule(self) -> KRule {
        match self {
            Criterion::Lik => KRule::LikThreshold,
            Criterion::Aic => KRule::Aic,
            Criterion::Bic => KRule::Bic,
        }
    }
}

/// Estimator requested from the study runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Estimator {
    Fm(Criterion),
    FmQp(Criterion),
    Cov(Criterion),
    Par,
    ParQp,
    Fe,
}

impl Estimator {
    pub fn label(self) -> String {
        match self {
            Estimator::Fm(c) => format!("FM:{}", c.label()),
            Estimator::FmQp(c) => format!("FMQP:{}", c.label()),
            Estimator::Cov(c) => format!("COV:{}", c.label()),
            Estimator::Par => "PAR".to_string(),
            Estimator::ParQp => "PARQP".to_string(),
            Estimator::Fe => "FE".to_string(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Fm(_) => "FM",
            Estimator::FmQp(_) => "FMQP",
            Estimator::Cov(_) => "COV",
            Estimator::Par => "PAR",
            Estimator::ParQp => "PARQP",
            Estimator::Fe => "FE",
        }
    }

    pub fn criterion(self) -> Option<Criterion> {
        match self {
            Estimator::Fm(c) | Estimator::FmQp(c) | Estimator::Cov(c) => Some(c),
            _ => None,
        }
    }

    /// Parse labels like `FM:lik`, `COV:bic`, `PARQP`, `FE`.
    pub fn parse(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        if upper == "FEBC" {
            return Err(Error::Config(
                "FEbc (bias-corrected fixed effects) is not implemented: the correction is out \
                 of scope for this tool; see the README"
                    .into(),
            ));
        }
        let (name, crit) = match upper.split_once(':') {
            Some((n, c)) => (n.to_string(), Some(c.to_string())),
            None => (upper.clone(), None),
        };
        let criterion = match crit.as_deref() {
            None => Criterion::Lik,
            Some("LIK") => Criterion::Lik,
            Some("AIC") => Criterion::Aic,
            Some("BIC") => Criterion::Bic,
            Some(other) => {
                return Err(Error::Config(format!("unknown K criterion '{}'", other)));
            }
        };
        match name.as_str() {
            "FM" => Ok(Estimator::Fm(criterion)),
            "FMQP" => Ok(Estimator::FmQp(criterion)),
            "COV" => Ok(Estimator::Cov(criterion)),
            "PAR" => Ok(Estimator::Par),
            "PARQP" => Ok(Estimator::ParQp),
            "FE" => Ok(Estimator::Fe),
            other => Err(Error::Config(format!("unknown estimator '{}'", other))),
        }
    }
}

/// Tuning shared by every fit inside a study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOptions {
    pub n_starts: usize,
    pub k_max: usize,
    pub em_tol: f64,
    pub max_iter: usize,
    pub quadrature_nodes: usize,
    pub polish: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        StudyOptions {
            n_starts: 5,
            k_max: 6,
            em_tol: 1e-8,
            max_iter: 500,
            quadrature_nodes: 15,
            polish: true,
        }
    }
}

/// One estimator outcome inside one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorRecord {
    pub estimator: String,
    pub converged: bool,
    pub k: usize,
    pub loglik: f64,
    pub beta1_hat: Option<f64>,
    pub beta0_hat: Option<f64>,
    /// Max-abs standardized numerical score at the reported optimum.
    pub score_max: Option<f64>,
    pub flags: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub beta0: f64,
    pub beta1: f64,
    pub rho: Option<f64>,
    pub fits: Vec<EstimatorRecord>,
}

/// One metrics row: (estimator, criterion, coefficient).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: String,
    pub criterion: String,
    pub coef: String,
    pub ase: f64,
    pub bias: f64,
    pub sd: Option<f64>,
    pub b_effective: usize,
}

/// Bias/ASE/sd grid over estimators.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyResult {
    pub metrics: MetricsTable,
    pub replicates: Vec<ReplicateRecord>,
    pub warnings: Vec<String>,
}

fn spec_for(cfg: &ScenarioConfig, est: Estimator, opts: &StudyOptions, replicate: usize) -> ModelSpec {
    let treatment = match est {
        Estimator::Fm(_) => Treatment::Fm,
        Estimator::FmQp(_) => Treatment::FmQp,
        Estimator::Cov(_) => Treatment::Cov,
        Estimator::Par => Treatment::Par,
        Estimator::ParQp => Treatment::ParQp,
        Estimator::Fe => Treatment::Fe,
    };
    let mut spec = ModelSpec::new(cfg.family, cfg.link(), treatment);
    spec.k_rule = est.criterion().map(|c| c.k_rule()).unwrap_or(KRule::Fixed(1));
    spec.k_max = opts.k_max;
    spec.em_tol = opts.em_tol;
    spec.max_iter = opts.max_iter;
    spec.n_starts = opts.n_starts;
    spec.quadrature_nodes = opts.quadrature_nodes;
    spec.polish = opts.polish;
    // Start jitter varies across replicates but not across schedules.
    spec.seed = cfg.seed ^ (replicate as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    spec
}

fn fit_one(
    cfg: &ScenarioConfig,
    est: Estimator,
    opts: &StudyOptions,
    sample: &GeneratedSample,
    replicate: usize,
) -> EstimatorRecord {
    let label = est.label();
    let spec = spec_for(cfg, est, opts, replicate);
    let outcome = (|| -> Result<EstimatorRecord> {
        match est {
            Estimator::Fe => match cfg.family {
                Family::Gaussian => {
                    let fe = comparators::fe_gaussian_fit(&sample.data)?;
                    let j = fe.names.iter().position(|n| n == "x");
                    Ok(EstimatorRecord {
                        estimator: label.clone(),
                        converged: true,
                        k: 0,
                        loglik: f64::NAN,
                        beta1_hat: j.map(|j| fe.coef[j]),
                        beta0_hat: None,
                        score_max: Some(0.0),
                        flags: Vec::new(),
                        error: None,
                    })
                }
                Family::Bernoulli => {
                    let fe = comparators::fe_probit_fit(&sample.data)?;
                    let j = fe.names.iter().position(|n| n == "x");
                    let mut flags = vec![format!("fe_dropped_units:{}", fe.dropped_units)];
                    if fe.separation {
                        flags.push("fe_separation".into());
                    }
                    Ok(EstimatorRecord {
                        estimator: label.clone(),
                        converged: fe.converged,
                        k: 0,
                        loglik: fe.loglik,
                        beta1_hat: j.map(|j| fe.coef[j]),
                        beta0_hat: None,
                        score_max: Some(if fe.converged { 0.0 } else { f64::NAN }),
                        flags,
                        error: None,
                    })
                }
            },
            Estimator::Par | Estimator::ParQp => {
                let fit = comparators::agh_fit(&sample.data, &spec)?;
                let slope_name = if est == Estimator::ParQp { "within:x" } else { "x" };
                let score = comparators::agh_score_max(&sample.data, &spec, &fit).ok();
                Ok(EstimatorRecord {
                    estimator: label.clone(),
                    converged: fit.converged,
                    k: 1,
                    loglik: fit.loglik,
                    beta1_hat: fit.coef(slope_name),
                    beta0_hat: fit.coef("intercept"),
                    score_max: score,
                    flags: fit.flags.clone(),
                    error: None,
                })
            }
            _ => {
                let fit = em::fit(&sample.data, &spec)?;
                let slope_name = if matches!(est, Estimator::FmQp(_)) { "within:x" } else { "x" };
                let score = mixture_score_max(&sample.data, &spec, &fit).ok();
                Ok(EstimatorRecord {
                    estimator: label.clone(),
                    converged: fit.converged,
                    k: fit.params.k(),
                    loglik: fit.loglik,
                    beta1_hat: fit.coef(slope_name),
                    beta0_hat: None,
                    score_max: score,
                    flags: fit.flags.clone(),
                    error: None,
                })
            }
        }
    })();
    outcome.unwrap_or_else(|e| EstimatorRecord {
        estimator: label,
        converged: false,
        k: 0,
        loglik: f64::NAN,
        beta1_hat: None,
        beta0_hat: None,
        score_max: None,
        flags: Vec::new(),
        error: Some(e.to_string()),
    })
}

/// Standardized score check of a mixture fit at its reported optimum.
pub fn mixture_score_max(
    data: &PanelDataset,
    spec: &ModelSpec,
    fit: &crate::data::FitResult,
) -> Result<f64> {
    let frame = em::build_frame(data, spec)?;
    let k = fit.params.k();
    let design = em::design_for_k(&frame, k);
    let weight_x = if k >= 2 { frame.weight_x.as_ref() } else { None };
    let layout = ParamLayout::of(&fit.params);
    let theta = layout.pack(&fit.params);
    let model = inference::MixtureModel { design: &design, fl: frame.fl, weight_x, layout };
    Ok(inference::standardized_score_max(&model, &theta))
}

/// Run every estimator over B replicates and aggregate the error metrics for
/// the slope (and the intercept where it has a direct counterpart).
///
/// Replicates execute in parallel; each owns an RNG stream keyed by
/// `(seed, replicate)`, so the output is schedule-independent.
pub fn run_study(
    cfg: &ScenarioConfig,
    estimators: &[Estimator],
    opts: &StudyOptions,
) -> Result<StudyResult> {
    cfg.validate()?;
    if estimators.is_empty() {
        return Err(Error::Config("estimator list is empty".into()));
    }

    let replicates: Vec<ReplicateRecord> = (0..cfg.b)
        .into_par_iter()
        .map(|b| -> Result<ReplicateRecord> {
            let sample = generate_sample(cfg, b)?;
            let fits = estimators
                .iter()
                .map(|&est| fit_one(cfg, est, opts, &sample, b))
                .collect();
            Ok(ReplicateRecord {
                replicate: b,
                beta0: sample.beta0,
                beta1: sample.beta1,
                rho: sample.rho,
                fits,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (e_idx, &est) in estimators.iter().enumerate() {
        let mut err1 = Vec::new();
        let mut err0 = Vec::new();
        let mut failures = 0usize;
        for rec in &replicates {
            let fit = &rec.fits[e_idx];
            match fit.beta1_hat {
                Some(b1) if fit.error.is_none() => {
                    err1.push(b1 - rec.beta1);
                    if let Some(b0) = fit.beta0_hat {
                        err0.push(b0 - rec.beta0);
                    }
                }
                _ => failures += 1,
            }
        }
        if failures * 5 > cfg.b {
            warnings.push(format!(
                "estimator {} failed in {}/{} replicates",
                est.label(),
                failures,
                cfg.b
            ));
        }
        let criterion = est.criterion().map(|c| c.label().to_string()).unwrap_or_default();
        if !err1.is_empty() {
            rows.push(metric_row(est.name(), &criterion, "beta1", &err1));
        }
        if !err0.is_empty() {
            rows.push(metric_row(est.name(), &criterion, "beta0", &err0));
        }
    }

    Ok(StudyResult { metrics: MetricsTable { rows }, replicates, warnings })
}

fn metric_row(estimator: &str, criterion: &str, coef: &str, errors: &[f64]) -> MetricRow {
    let bias = numeric::mean(errors);
    let ase = numeric::mean(&errors.iter().map(|e| e * e).collect::<Vec<_>>());
    let sd = numeric::sample_sd(errors);
    MetricRow {
        estimator: estimator.to_string(),
        criterion: criterion.to_string(),
        coef: coef.to_string(),
        ase,
        bias,
        sd,
        b_effective: errors.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(family: Family, scenario: Scenario, n: usize, t: usize, b: usize) -> ScenarioConfig {
        ScenarioConfig::new(family, scenario, n, t, b, 20240)
    }

    #[test]
    fn covariate_moments_match_construction() {
        // r_x = 0.5: cross-time correlation near 0.5, unit variances.
        let mut rng = derive_rng(7, &[0]);
        let draw = draw_covariates(5000, 4, 0.0, 0.5, &mut rng);
        for t in 0..4 {
            let col: Vec<f64> = (0..5000).map(|i| draw.x[(i, t)]).collect();
            let sd = numeric::sample_sd(&col).unwrap();
            assert!((sd * sd - 1.0).abs() < 0.05, "var {}", sd * sd);
        }
        let c01 = sample_corr(
            &(0..5000).map(|i| draw.x[(i, 0)]).collect::<Vec<_>>(),
            &(0..5000).map(|i| draw.x[(i, 1)]).collect::<Vec<_>>(),
        );
        assert!((c01 - 0.5).abs() < 0.05, "corr {}", c01);

        // r_x = 0: independent columns.
        let mut rng0 = derive_rng(7, &[1]);
        let draw0 = draw_covariates(2000, 3, 0.0, 0.0, &mut rng0);
        let c = sample_corr(
            &(0..2000).map(|i| draw0.x[(i, 0)]).collect::<Vec<_>>(),
            &(0..2000).map(|i| draw0.x[(i, 2)]).collect::<Vec<_>>(),
        );
        assert!(c.abs() < 0.1, "corr {}", c);
    }

    fn sample_corr(a: &[f64], b: &[f64]) -> f64 {
        let ma = numeric::mean(a);
        let mb = numeric::mean(b);
        let mut num = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for i in 0..a.len() {
            num += (a[i] - ma) * (b[i] - mb);
            va += (a[i] - ma) * (a[i] - ma);
            vb += (b[i] - mb) * (b[i] - mb);
        }
        num / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn s1_correlation_is_structural() {
        let hyper = ScenarioHyper::default(); // r_x = 0.64
        let mut rng = derive_rng(11, &[3]);
        let draw = draw_covariates(5000, 6, 0.0, hyper.r_x, &mut rng);
        let u = draw_random_effects(Scenario::S1_3, &draw, &hyper, Some(0.6), &mut rng).unwrap();
        for t in 0..6 {
            let xt: Vec<f64> = (0..5000).map(|i| draw.x[(i, t)]).collect();
            let uv: Vec<f64> = u.iter().cloned().collect();
            let c = sample_corr(&uv, &xt);
            assert!((c - 0.6).abs() < 0.05, "t={t}: corr {c}");
        }

        // rho = 0: independence.
        let mut rng0 = derive_rng(11, &[4]);
        let draw0 = draw_covariates(5000, 3, 0.0, hyper.r_x, &mut rng0);
        let u0 = draw_random_effects(Scenario::S1_1, &draw0, &hyper, Some(0.0), &mut rng0).unwrap();
        let xt: Vec<f64> = (0..5000).map(|i| draw0.x[(i, 0)]).collect();
        let c = sample_corr(&u0.iter().cloned().collect::<Vec<_>>(), &xt);
        assert!(c.abs() < 0.05, "corr {c}");
    }

    #[test]
    fn s3_component_probabilities_at_zero_mean() {
        // softmax(0, 0.5, -3.5) = (0.373285, 0.615443, 0.011272).
        let hyper = ScenarioHyper::default();
        let logits: Vec<f64> =
            (0..3).map(|k| hyper.s3_phi0[k] + hyper.s3_phi1[k] * 0.0).collect();
        let lp = numeric::log_softmax(&logits);
        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        assert!((probs[0] - 0.3732849440803858).abs() < 1e-12);
        assert!((probs[1] - 0.61544282733744).abs() < 1e-12);
        assert!((probs[2] - 0.011272228582174132).abs() < 1e-12);
        // Against the coarser reported rounding.
        assert!((probs[0] - 0.3733).abs() < 1e-3);
        assert!((probs[1] - 0.6155).abs() < 1e-3);
        assert!((probs[2] - 0.0113).abs() < 1e-3);
    }

    #[test]
    fn generated_samples_are_bit_reproducible() {
        let c = cfg(Family::Gaussian, Scenario::S1_2, 20, 4, 3);
        let a = generate_sample(&c, 1).unwrap();
        let b = generate_sample(&c, 1).unwrap();
        assert_eq!(a.beta0.to_bits(), b.beta0.to_bits());
        assert_eq!(a.beta1.to_bits(), b.beta1.to_bits());
        assert!(a
            .data
            .y()
            .iter()
            .zip(b.data.y().iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c2 = generate_sample(&c, 2).unwrap();
        assert!(a.data.y()[0].to_bits() != c2.data.y()[0].to_bits());
    }

    #[test]
    fn bernoulli_balance_at_zero_predictor() {
        let mut c = cfg(Family::Bernoulli, Scenario::S1_1, 1000, 10, 1);
        c.hyper.beta0_range = (0.0, 0.0);
        c.hyper.beta1_range = (0.0, 0.0);
        c.hyper.sigma_u = 0.0;
        let s = generate_sample(&c, 0).unwrap();
        let mean = s.data.y().iter().sum::<f64>() / s.data.n_obs() as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn noiseless_gaussian_limit_reproduces_eta() {
        let mut c = cfg(Family::Gaussian, Scenario::S1_1, 15, 3, 1);
        c.hyper.sigma_u = 0.0; // u identically zero
        c.hyper.sigma_e = 0.0;
        let s = generate_sample(&c, 0).unwrap();
        let b0 = s.beta0;
        let b1 = s.beta1;
        for r in 0..s.data.n_obs() {
            let eta = b0 + b1 * s.data.x()[(r, 0)];
            assert!((s.data.y()[r] - eta).abs() < 1e-14);
        }
    }

    #[test]
    fn s4_requires_bernoulli() {
        let c = cfg(Family::Gaussian, Scenario::S4, 10, 2, 1);
        assert!(c.validate().is_err());
        let c2 = cfg(Family::Bernoulli, Scenario::S4, 10, 2, 1);
        assert!(c2.validate().is_ok());
    }

    #[test]
    fn infeasible_rho_rx_pair_is_rejected() {
        let mut c = cfg(Family::Gaussian, Scenario::S1_3, 10, 2, 1);
        c.hyper.r_x = 0.3; // sqrt = 0.55 < 0.8
        assert!(c.validate().is_err());
    }

    #[test]
    fn estimator_labels_round_trip() {
        for label in ["FM:lik", "FMQP:aic", "COV:bic", "PAR", "PARQP", "FE"] {
            let e = Estimator::parse(label).unwrap();
            assert_eq!(e.label().to_ascii_uppercase(), label.to_ascii_uppercase());
        }
        let err = Estimator::parse("FEbc").unwrap_err();
        assert!(err.to_string().contains("out of scope"));
    }

    #[test]
    fn metric_identity_holds() {
        let errors = [0.1, -0.2, 0.05, 0.3, -0.07];
        let row = metric_row("FM", "lik", "beta1", &errors);
        let b = errors.len() as f64;
        let sd = row.sd.unwrap();
        let ase_identity = row.bias * row.bias + sd * sd * (b - 1.0) / b;
        assert!((row.ase - ase_identity).abs() < 1e-10);

        // B = 1: sd absent, ASE = bias^2.
        let row1 = metric_row("FM", "lik", "beta1", &[0.25]);
        assert!(row1.sd.is_none());
        assert!((row1.ase - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn smoke_study_runs_all_estimator_kinds() {
        let c = cfg(Family::Gaussian, Scenario::S1_1, 30, 4, 2);
        let opts = StudyOptions { n_starts: 2, k_max: 2, ..Default::default() };
        let res = run_study(
            &c,
            &[Estimator::Fm(Criterion::Bic), Estimator::Par, Estimator::Fe],
            &opts,
        )
        .unwrap();
        assert_eq!(res.replicates.len(), 2);
        // One beta1 row per estimator plus PAR's beta0 row.
        assert!(res.metrics.rows.len() >= 3);
        for row in &res.metrics.rows {
            assert!(row.b_effective <= 2);
            assert!(row.ase.is_finite());
        }
    }
}
