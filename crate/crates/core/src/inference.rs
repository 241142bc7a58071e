//! Likelihood evaluation, numerical observed/sandwich information, standard
//! errors on the natural parameter scale, posterior classification, and the
//! Mundlak exogeneity Wald test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data::{FitResult, MixtureParams, ModelSpec, PanelDataset, ParamLayout};
use crate::em::{self, ModelFrame};
use crate::families::FamilyLink;
use crate::numeric::{self, KahanSum};
use crate::{Error, Result};

/// Relative step for the observed-information central differences.
const HESS_STEP: f64 = 1e-4;
/// Relative step for score checks and per-unit scores.
const SCORE_STEP: f64 = 1e-5;

/// Marginal mixture log-likelihood evaluated directly from the parameters
/// (log-sum-exp stabilized). Independent of the E-step code path.
pub fn mixture_loglik(
    design: &PanelDataset,
    params: &MixtureParams,
    fl: FamilyLink,
    weight_x: Option<&DMatrix<f64>>,
) -> f64 {
    let mut acc = KahanSum::new();
    for i in 0..design.n_units() {
        acc.add(mixture_unit_loglik(design, params, fl, weight_x, i));
    }
    acc.value()
}

/// One unit's contribution to the marginal mixture log-likelihood.
pub fn mixture_unit_loglik(
    design: &PanelDataset,
    params: &MixtureParams,
    fl: FamilyLink,
    weight_x: Option<&DMatrix<f64>>,
    i: usize,
) -> f64 {
    let k = params.k();
    let p = params.beta.len();
    let wrow: Option<Vec<f64>> = weight_x.map(|w| w.row(i).iter().cloned().collect());
    let log_pi = params.unit_log_weights(wrow.as_deref());
    let sigma = params.sigma_e;
    let mut lw = vec![0.0; k];
    for c in 0..k {
        let mut s = log_pi[c];
        for r in design.unit_range(i) {
            let mut eta = params.zeta[c];
            for j in 0..p {
                eta += design.x()[(r, j)] * params.beta[j];
            }
            s += fl.log_density(design.y()[r], eta, sigma);
        }
        lw[c] = s;
    }
    numeric::logsumexp(&lw)
}

/// Marginal log-likelihood of a mixture fit under its spec (applies the
/// treatment the same way fitting does).
pub fn marginal_loglik(
    data: &PanelDataset,
    params: &MixtureParams,
    spec: &ModelSpec,
) -> Result<f64> {
    let frame = em::build_frame(data, spec)?;
    let design = em::design_for_k(&frame, params.k());
    let weight_x = if params.k() >= 2 { frame.weight_x.as_ref() } else { None };
    Ok(mixture_loglik(&design, params, frame.fl, weight_x))
}

/// A model exposing per-unit log-likelihood contributions on an unconstrained
/// parameter vector. The information matrices are built by numerical
/// differentiation of these contributions.
pub trait LoglikModel: Sync {
    fn dim(&self) -> usize;
    fn n_units(&self) -> usize;
    fn unit_loglik(&self, theta: &DVector<f64>, i: usize) -> f64;
    fn total_loglik(&self, theta: &DVector<f64>) -> f64 {
        let mut acc = KahanSum::new();
        for i in 0..self.n_units() {
            acc.add(self.unit_loglik(theta, i));
        }
        acc.value()
    }
}

/// Mixture likelihood on the unconstrained scale.
pub struct MixtureModel<'a> {
    pub design: &'a PanelDataset,
    pub fl: FamilyLink,
    pub weight_x: Option<&'a DMatrix<f64>>,
    pub layout: ParamLayout,
}

impl LoglikModel for MixtureModel<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }
    fn n_units(&self) -> usize {
        self.design.n_units()
    }
    fn unit_loglik(&self, theta: &DVector<f64>, i: usize) -> f64 {
        let params = self.layout.unpack(theta);
        mixture_unit_loglik(self.design, &params, self.fl, self.weight_x, i)
    }
    fn total_loglik(&self, theta: &DVector<f64>) -> f64 {
        let params = self.layout.unpack(theta);
        mixture_loglik(self.design, &params, self.fl, self.weight_x)
    }
}

/// Max-abs component of the numerical score on the standardized scale
/// (central differences, step 1e-5 relative to max(1, |theta_j|)).
pub fn standardized_score_max(model: &dyn LoglikModel, theta: &DVector<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for j in 0..theta.len() {
        let s = theta[j].abs().max(1.0);
        let h = SCORE_STEP * s;
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        let d = (model.total_loglik(&up) - model.total_loglik(&dn)) / (2.0 * SCORE_STEP);
        worst = worst.max(d.abs());
    }
    worst
}

/// Negative numerical Hessian of the total log-likelihood (observed
/// information), central differences with step `1e-4 * max(1, |theta_j|)`.
pub fn observed_information(model: &dyn LoglikModel, theta: &DVector<f64>) -> DMatrix<f64> {
    let d = theta.len();
    let h: Vec<f64> = (0..d).map(|j| HESS_STEP * theta[j].abs().max(1.0)).collect();
    let f0 = model.total_loglik(theta);
    let mut hess = DMatrix::zeros(d, d);
    for j in 0..d {
        // Diagonal: (f(+2h) - 2 f + f(-2h)) / (4 h^2).
        let mut up = theta.clone();
        up[j] += 2.0 * h[j];
        let mut dn = theta.clone();
        dn[j] -= 2.0 * h[j];
        hess[(j, j)] =
            (model.total_loglik(&up) - 2.0 * f0 + model.total_loglik(&dn)) / (4.0 * h[j] * h[j]);
        for l in j + 1..d {
            let mut pp = theta.clone();
            pp[j] += h[j];
            pp[l] += h[l];
            let mut pm = theta.clone();
            pm[j] += h[j];
            pm[l] -= h[l];
            let mut mp = theta.clone();
            mp[j] -= h[j];
            mp[l] += h[l];
            let mut mm = theta.clone();
            mm[j] -= h[j];
            mm[l] -= h[l];
            let v = (model.total_loglik(&pp) - model.total_loglik(&pm)
                - model.total_loglik(&mp)
                + model.total_loglik(&mm))
                / (4.0 * h[j] * h[l]);
            hess[(j, l)] = v;
            hess[(l, j)] = v;
        }
    }
    -hess
}

/// Per-unit numerical scores stacked into the outer-product matrix
/// J = sum_i s_i s_i'.
pub fn score_outer_product(model: &dyn LoglikModel, theta: &DVector<f64>) -> DMatrix<f64> {
    let d = theta.len();
    let n = model.n_units();
    // Unit scores in deterministic order, then one sequential reduce.
    let mut scores = vec![DVector::zeros(d); n];
    for (i, si) in scores.iter_mut().enumerate() {
        for j in 0..d {
            let h = SCORE_STEP * theta[j].abs().max(1.0);
            let mut up = theta.clone();
            up[j] += h;
            let mut dn = theta.clone();
            dn[j] -= h;
            si[j] = (model.unit_loglik(&up, i) - model.unit_loglik(&dn, i)) / (2.0 * h);
        }
    }
    let mut jmat = DMatrix::zeros(d, d);
    for si in &scores {
        for a in 0..d {
            for b in a..d {
                jmat[(a, b)] += si[a] * si[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            jmat[(a, b)] = jmat[(b, a)];
        }
    }
    jmat
}

/// Standard errors of one reported term.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeTerm {
    pub term: String,
    pub estimate: f64,
    pub se_observed: f64,
    pub se_sandwich: f64,
}

/// Observed/sandwich covariance report on the natural parameter scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeReport {
    pub terms: Vec<SeTerm>,
    pub vcov_observed: DMatrix<f64>,
    pub vcov_sandwich: DMatrix<f64>,
    /// Condition number of the observed information.
    pub condition_number: f64,
    pub min_eigenvalue: f64,
    /// False when the observed information was not positive definite.
    pub reliable: bool,
}

/// Generic SE computation: numerically differentiate the model around
/// `theta`, then delta-map to the natural scale through `natural_jac`
/// (rows = natural terms, cols = unconstrained coordinates).
pub fn se_from_model(
    model: &dyn LoglikModel,
    theta: &DVector<f64>,
    natural_jac: &DMatrix<f64>,
    natural_estimates: &[f64],
    term_names: &[String],
) -> Result<SeReport> {
    let grad_max = standardized_score_max(model, theta);
    if grad_max > 0.1 {
        return Err(Error::NotAtOptimum { grad_norm: grad_max });
    }

    let info = observed_information(model, theta);
    let sym = nalgebra::SymmetricEigen::new(info.clone());
    let min_eig = sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_eig = sym.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let reliable = min_eig > 0.0;
    let condition_number =
        if min_eig.abs() > 0.0 { (max_eig / min_eig).abs() } else { f64::INFINITY };

    // Inverse through the eigendecomposition; small/negative eigenvalues are
    // floored so a flagged-unreliable report still carries magnitudes.
    let floor = max_eig.abs().max(1e-300) * 1e-12;
    let dim = theta.len();
    let mut inv_diag = DMatrix::zeros(dim, dim);
    for (j, &l) in sym.eigenvalues.iter().enumerate() {
        inv_diag[(j, j)] = 1.0 / l.max(floor);
    }
    let hinv = &sym.eigenvectors * inv_diag * sym.eigenvectors.transpose();

    let jmat = score_outer_product(model, theta);
    let sandwich = &hinv * &jmat * &hinv;

    let vcov_observed = natural_jac * &hinv * natural_jac.transpose();
    let vcov_sandwich = natural_jac * &sandwich * natural_jac.transpose();

    let terms = term_names
        .iter()
        .enumerate()
        .map(|(j, name)| SeTerm {
            term: name.clone(),
            estimate: natural_estimates[j],
            se_observed: vcov_observed[(j, j)].max(0.0).sqrt(),
            se_sandwich: vcov_sandwich[(j, j)].max(0.0).sqrt(),
        })
        .collect();

    Ok(SeReport {
        terms,
        vcov_observed,
        vcov_sandwich,
        condition_number,
        min_eigenvalue: min_eig,
        reliable,
    })
}

/// Natural-scale terms of a mixture fit: design coefficients, locations,
/// masses (pi_1..pi_{K-1}) or weight-model coefficients, sigma_e.
fn mixture_natural_map(
    params: &MixtureParams,
    layout: &ParamLayout,
    beta_names: &[String],
    weight_names: &[String],
) -> (DMatrix<f64>, Vec<f64>, Vec<String>) {
    let d = layout.dim();
    let p = layout.p;
    let k = layout.k;
    let mut jac = DMatrix::zeros(d, d);
    let mut estimates = Vec::with_capacity(d);
    let mut names = Vec::with_capacity(d);

    for j in 0..p {
        jac[(j, j)] = 1.0;
        estimates.push(params.beta[j]);
        names.push(beta_names[j].clone());
    }
    let mut row = p;
    let mut col = p;
    if k >= 2 {
        for c in 0..k {
            jac[(row + c, col + c)] = 1.0;
            estimates.push(params.zeta[c]);
            names.push(format!("zeta{}", c + 1));
        }
        row += k;
        col += k;
        match (&params.weights, layout.q) {
            (crate::data::WeightModel::Constant(pi), None) => {
                // d pi_a / d alpha_b = pi_a (delta_ab - pi_b), b = 1..K-1.
                for a in 0..k - 1 {
                    for b in 0..k - 1 {
                        let delta = if a == b { 1.0 } else { 0.0 };
                        jac[(row + a, col + b)] = pi[a] * (delta - pi[b]);
                    }
                    estimates.push(pi[a]);
                    names.push(format!("pi{}", a + 1));
                }
                row += k - 1;
                col += k - 1;
            }
            (crate::data::WeightModel::Logistic(g), Some(q)) => {
                for l in 0..k - 1 {
                    for j in 0..q + 1 {
                        jac[(row, col)] = 1.0;
                        estimates.push(g[(l, j)]);
                        names.push(if j == 0 {
                            format!("w:comp{}:intercept", l + 1)
                        } else {
                            format!("w:comp{}:{}", l + 1, weight_names[j - 1])
                        });
                        row += 1;
                        col += 1;
                    }
                }
            }
            _ => unreachable!("layout/weight-model mismatch"),
        }
    }
    if let Some(s) = params.sigma_e {
        // d sigma / d ln sigma = sigma.
        jac[(row, col)] = s;
        estimates.push(s);
        names.push("sigma_e".to_string());
    }
    (jac, estimates, names)
}

/// Observed + sandwich standard errors for a mixture fit.
pub fn mixture_se(data: &PanelDataset, spec: &ModelSpec, fit: &FitResult) -> Result<SeReport> {
    let frame = em::build_frame(data, spec)?;
    mixture_se_frame(&frame, fit)
}

pub(crate) fn mixture_se_frame(frame: &ModelFrame, fit: &FitResult) -> Result<SeReport> {
    let k = fit.params.k();
    let design = em::design_for_k(frame, k);
    let weight_x = if k >= 2 { frame.weight_x.as_ref() } else { None };
    let layout = ParamLayout::of(&fit.params);
    let theta = layout.pack(&fit.params);
    let model = MixtureModel { design: &design, fl: frame.fl, weight_x, layout };
    let (jac, estimates, names) =
        mixture_natural_map(&fit.params, &layout, &fit.beta_names, &frame.weight_names);
    se_from_model(&model, &theta, &jac, &estimates, &names)
}

/// MAP component labels (1-based); ties break toward the lower index.
pub fn classify(tau: &DMatrix<f64>) -> Vec<usize> {
    (0..tau.nrows())
        .map(|i| {
            let mut best = 0;
            let mut best_v = tau[(i, 0)];
            for c in 1..tau.ncols() {
                if tau[(i, c)] > best_v {
                    best_v = tau[(i, c)];
                    best = c;
                }
            }
            best + 1
        })
        .collect()
}

/// Mundlak exogeneity Wald test: fit the mean-augmented model with the
/// parametric random-intercept comparator, test all `mean:` coefficients
/// jointly against zero with the sandwich covariance.
///
/// Returns `(wald statistic, df, p-value)`.
pub fn mundlak_exogeneity_test(data: &PanelDataset, spec: &ModelSpec) -> Result<(f64, usize, f64)> {
    let augmented = crate::decomp::mundlak_augment(data)?;
    let mut par_spec = spec.clone();
    par_spec.treatment = crate::data::Treatment::Par;
    let fit = crate::comparators::agh_fit(&augmented, &par_spec)?;
    let se = fit
        .se
        .as_ref()
        .ok_or_else(|| Error::Estimation("comparator fit carries no covariance".into()))?;

    let delta_idx: Vec<usize> = fit
        .beta_names
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("mean:"))
        .map(|(j, _)| j)
        .collect();
    let df = delta_idx.len();
    if df == 0 {
        return Err(Error::Estimation("no time-varying covariates to test".into()));
    }
    let delta = DVector::from_fn(df, |r, _| fit.params.beta[delta_idx[r]]);
    let mut v = DMatrix::zeros(df, df);
    for (a, &ja) in delta_idx.iter().enumerate() {
        for (b, &jb) in delta_idx.iter().enumerate() {
            v[(a, b)] = se.vcov_sandwich[(ja, jb)];
        }
    }
    let vinv = v
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Estimation("singular covariance block in the exogeneity test".into()))?;
    let wald = (delta.transpose() * vinv * delta)[(0, 0)];
    let chi = ChiSquared::new(df as f64)
        .map_err(|e| Error::Estimation(format!("chi-square df error: {e}")))?;
    let pvalue = 1.0 - chi.cdf(wald.max(0.0));
    Ok((wald, df, pvalue))
}

/// Two-sided normal p-value for estimate/se.
pub fn wald_pvalue(estimate: f64, se: f64) -> f64 {
    if !(se > 0.0) {
        return f64::NAN;
    }
    let z = (estimate / se).abs();
    2.0 * (1.0 - crate::families::normal_cdf(z))
}

/// Significance label: `**` for p <= 0.05, `*` for 0.05 < p <= 0.10.
pub fn significance_label(p: f64) -> &'static str {
    if p.is_nan() {
        ""
    } else if p <= 0.05 {
        "**"
    } else if p <= 0.10 {
        "*"
    } else {
        ""
    }
}
