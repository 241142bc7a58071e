//! Reference estimators: parametric Gaussian random-intercept models fitted
//! by adaptive Gauss-Hermite quadrature (Par, ParQp) and the fixed-effect
//! estimators (demeaned OLS, probit with unit dummies).

use nalgebra::{DMatrix, DVector};

use crate::data::{
    information_criteria, Family, FitResult, MixtureParams, ModelSpec, PanelDataset, Treatment,
    WeightModel,
};
use crate::decomp;
use crate::em;
use crate::families::{weighted_glm_fit, FamilyLink, GlmOptions};
use crate::inference::{se_from_model, LoglikModel};
use crate::numeric::{self, logsumexp, BfgsOptions, KahanSum};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Gauss-Hermite rule transformed to N(0,1) expectation form:
/// `E[h(U)] ~= sum_q weights[q] * h(nodes[q])` for U ~ N(0,1).
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub nodes: DVector<f64>,
    pub weights: DVector<f64>,
}

impl QuadratureRule {
    /// Build the Q-point rule by the Golub-Welsch eigendecomposition of the
    /// Hermite Jacobi matrix.
    pub fn gauss_hermite(q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::Config("quadrature needs at least 2 nodes".into()));
        }
        let mut jacobi = DMatrix::zeros(q, q);
        for j in 1..q {
            let b = (j as f64 / 2.0).sqrt();
            jacobi[(j - 1, j)] = b;
            jacobi[(j, j - 1)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..q)
            .map(|j| {
                let node = eig.eigenvalues[j];
                let w = eig.eigenvectors[(0, j)].powi(2);
                (node, w)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        // Physicists' nodes scale by sqrt(2); eigvec first components squared
        // already sum to one, which is the N(0,1) normalization.
        let nodes = DVector::from_fn(q, |j, _| pairs[j].0 * std::f64::consts::SQRT_2);
        let weights = DVector::from_fn(q, |j, _| pairs[j].1);
        Ok(QuadratureRule { nodes, weights })
    }
}

/// Per-unit adaptive Gauss-Hermite marginal log-likelihood machinery.
struct AghProblem<'a> {
    design: &'a PanelDataset,
    fl: FamilyLink,
    quad: &'a QuadratureRule,
}

impl AghProblem<'_> {
    /// log integral of prod_t f(y_it | eta_it + sigma_u u) phi(u) du for one
    /// unit, recentered at the posterior mode with Laplace curvature.
    fn unit_loglik(&self, eta: &DVector<f64>, sigma_u: f64, sigma_e: Option<f64>, i: usize) -> f64 {
        let range = self.design.unit_range(i);
        let y = self.design.y();

        // h(u) = sum_t log f(y | eta + sigma_u u) + log phi(u).
        let h = |u: f64| -> f64 {
            let mut s = -0.5 * u * u - 0.5 * LN_2PI;
            for r in range.clone() {
                s += self.fl.log_density(y[r], eta[r] + sigma_u * u, sigma_e);
            }
            s
        };

        let (mode, curv) = if self.fl.family == Family::Gaussian {
            // Quadratic h: closed-form mode and curvature.
            let se2 = sigma_e.unwrap().powi(2);
            let mut sr = 0.0;
            let mut t = 0.0;
            for r in range.clone() {
                sr += y[r] - eta[r];
                t += 1.0;
            }
            let c = 1.0 + t * sigma_u * sigma_u / se2;
            (sigma_u * sr / (se2 * c), c)
        } else {
            let mut u = 0.0;
            for _ in 0..40 {
                let mut h1 = -u;
                let mut h2 = -1.0;
                for r in range.clone() {
                    let e = eta[r] + sigma_u * u;
                    h1 += sigma_u * self.fl.score_eta(y[r], e, None);
                    h2 += sigma_u * sigma_u * self.fl.curvature_eta(y[r], e, None);
                }
                if h1.abs() < 1e-11 {
                    break;
                }
                let mut step = -h1 / h2;
                if step.abs() > 5.0 {
                    step = step.signum() * 5.0;
                }
                // h is concave but a full Newton step can overshoot.
                let h_now = h(u);
                let mut scale = 1.0;
                for _ in 0..20 {
                    if h(u + step * scale) >= h_now - 1e-14 {
                        break;
                    }
                    scale *= 0.5;
                }
                u += step * scale;
            }
            let mut h2 = -1.0;
            for r in range.clone() {
                let e = eta[r] + sigma_u * u;
                h2 += sigma_u * sigma_u * self.fl.curvature_eta(y[r], e, None);
            }
            (u, (-h2).max(1e-8))
        };

        let scale = curv.powf(-0.5);
        let q = self.quad.nodes.len();
        let mut terms = Vec::with_capacity(q);
        for j in 0..q {
            let node = self.quad.nodes[j];
            let u = mode + scale * node;
            terms.push(self.quad.weights[j].ln() + h(u) + 0.5 * node * node);
        }
        logsumexp(&terms) + scale.ln() + 0.5 * LN_2PI
    }

    fn total_loglik(&self, beta: &DVector<f64>, sigma_u: f64, sigma_e: Option<f64>) -> f64 {
        let eta = self.design.x() * beta;
        let mut acc = KahanSum::new();
        for i in 0..self.design.n_units() {
            acc.add(self.unit_loglik(&eta, sigma_u, sigma_e, i));
        }
        acc.value()
    }
}

/// AGH likelihood on the unconstrained scale `[beta | ln sigma_u | ln sigma_e]`.
pub struct AghModel<'a> {
    design: &'a PanelDataset,
    fl: FamilyLink,
    quad: QuadratureRule,
    gaussian: bool,
}

impl AghModel<'_> {
    fn split(&self, theta: &DVector<f64>) -> (DVector<f64>, f64, Option<f64>) {
        let p = self.design.n_covariates();
        let beta = DVector::from_fn(p, |j, _| theta[j]);
        let sigma_u = theta[p].exp();
        let sigma_e = if self.gaussian { Some(theta[p + 1].exp()) } else { None };
        (beta, sigma_u, sigma_e)
    }
}

impl LoglikModel for AghModel<'_> {
    fn dim(&self) -> usize {
        self.design.n_covariates() + 1 + usize::from(self.gaussian)
    }
    fn n_units(&self) -> usize {
        self.design.n_units()
    }
    fn unit_loglik(&self, theta: &DVector<f64>, i: usize) -> f64 {
        let (beta, su, se) = self.split(theta);
        let problem = AghProblem { design: self.design, fl: self.fl, quad: &self.quad };
        let eta = self.design.x() * &beta;
        problem.unit_loglik(&eta, su, se, i)
    }
    fn total_loglik(&self, theta: &DVector<f64>) -> f64 {
        let (beta, su, se) = self.split(theta);
        let problem = AghProblem { design: self.design, fl: self.fl, quad: &self.quad };
        problem.total_loglik(&beta, su, se)
    }
}

/// Fit the parametric Gaussian random-intercept model by adaptive
/// Gauss-Hermite quadrature; `ParQp` runs on the QP-transformed design.
pub fn agh_fit(data: &PanelDataset, spec: &ModelSpec) -> Result<FitResult> {
    if !matches!(spec.treatment, Treatment::Par | Treatment::ParQp) {
        return Err(Error::Config("agh_fit expects treatment Par or ParQp".into()));
    }
    let frame = em::build_frame(data, spec)?;
    let design = &frame.design;
    let fl = frame.fl;
    let gaussian = fl.family == Family::Gaussian;
    let p = design.n_covariates();
    let n = design.n_units();

    // GLM start plus a moment-based start for the random-effect scale.
    let ones = DVector::from_element(design.n_obs(), 1.0);
    let off = DVector::zeros(design.n_obs());
    let glm = weighted_glm_fit(design.y(), design.x(), &ones, &off, fl, &GlmOptions::default())?;
    let eta0 = design.x() * &glm.coef;
    let mut rbar = vec![0.0; n];
    let mut rss = 0.0;
    for i in 0..n {
        let range = design.unit_range(i);
        let t = range.len() as f64;
        let mut s = 0.0;
        for r in range {
            let mu = fl.mean(eta0[r]);
            let md = fl.mean_deriv(eta0[r]).max(1e-10);
            s += (design.y()[r] - mu) / md;
            rss += (design.y()[r] - mu) * (design.y()[r] - mu);
        }
        rbar[i] = s / t;
    }
    let sigma_u0 = numeric::sample_sd(&rbar).unwrap_or(0.5).max(0.05);
    let sigma_e0 = (rss / design.n_obs() as f64).sqrt().max(1e-3);

    let dim = p + 1 + usize::from(gaussian);
    let mut theta0 = DVector::zeros(dim);
    for j in 0..p {
        theta0[j] = glm.coef[j];
    }
    theta0[p] = sigma_u0.ln();
    if gaussian {
        theta0[p + 1] = sigma_e0.ln();
    }

    let quad = QuadratureRule::gauss_hermite(spec.quadrature_nodes)?;
    let model = AghModel { design, fl, quad, gaussian };
    let res = numeric::bfgs_maximize(
        |t| model.total_loglik(t),
        theta0,
        &BfgsOptions { max_iter: 400, grad_tol: 1e-6, fd_step: 1e-5 },
    );

    let (beta, sigma_u, sigma_e) = model.split(&res.theta);
    let mut flags = Vec::new();
    if sigma_u < 1e-4 {
        flags.push("boundary_sigma_u".to_string());
    }
    if !res.converged {
        flags.push(format!("quasi_newton_gradient:{:.3e}", res.grad_norm));
    }

    // Natural scale: beta identity, sigmas via exp.
    let mut jac = DMatrix::zeros(dim, dim);
    let mut estimates = Vec::with_capacity(dim);
    let mut names: Vec<String> = design.covariate_names().to_vec();
    for j in 0..p {
        jac[(j, j)] = 1.0;
        estimates.push(beta[j]);
    }
    jac[(p, p)] = sigma_u;
    estimates.push(sigma_u);
    names.push("sigma_u".to_string());
    if gaussian {
        jac[(p + 1, p + 1)] = sigma_e.unwrap();
        estimates.push(sigma_e.unwrap());
        names.push("sigma_e".to_string());
    }
    let se = match se_from_model(&model, &res.theta, &jac, &estimates, &names) {
        Ok(report) => Some(report),
        Err(Error::NotAtOptimum { grad_norm }) => {
            flags.push(format!("se_skipped_score:{:.3e}", grad_norm));
            None
        }
        Err(e) => return Err(e),
    };

    let npar = dim;
    let (aic, bic) = information_criteria(res.value, npar, n);
    Ok(FitResult {
        params: MixtureParams {
            beta,
            zeta: DVector::from_element(1, 0.0),
            weights: WeightModel::Constant(DVector::from_element(1, 1.0)),
            sigma_e,
        },
        beta_names: design.covariate_names().to_vec(),
        loglik: res.value,
        npar,
        aic,
        bic,
        tau: DMatrix::from_element(n, 1, 1.0),
        se,
        converged: res.converged,
        iterations: res.iterations,
        k_path: Vec::new(),
        start_index: 0,
        sigma_u: Some(sigma_u),
        flags,
    })
}

/// Standardized score check of a comparator fit at its reported optimum.
pub fn agh_score_max(data: &PanelDataset, spec: &ModelSpec, fit: &FitResult) -> Result<f64> {
    let frame = em::build_frame(data, spec)?;
    let gaussian = frame.fl.family == Family::Gaussian;
    let quad = QuadratureRule::gauss_hermite(spec.quadrature_nodes)?;
    let model = AghModel { design: &frame.design, fl: frame.fl, quad, gaussian };
    let sigma_u = fit.sigma_u.ok_or_else(|| Error::Config("fit has no sigma_u".into()))?;
    let p = frame.design.n_covariates();
    let mut theta = DVector::zeros(model.dim());
    for j in 0..p {
        theta[j] = fit.params.beta[j];
    }
    theta[p] = sigma_u.max(1e-300).ln();
    if gaussian {
        theta[p + 1] = fit.params.sigma_e.unwrap().ln();
    }
    Ok(crate::inference::standardized_score_max(&model, &theta))
}

/// Evaluate the AGH marginal log-likelihood of an existing comparator fit
/// with an arbitrary node count (quadrature self-consistency checks).
pub fn agh_loglik_at(
    data: &PanelDataset,
    spec: &ModelSpec,
    fit: &FitResult,
    q: usize,
) -> Result<f64> {
    let frame = em::build_frame(data, spec)?;
    let fl = frame.fl;
    let quad = QuadratureRule::gauss_hermite(q)?;
    let problem = AghProblem { design: &frame.design, fl, quad: &quad };
    let sigma_u = fit.sigma_u.ok_or_else(|| Error::Config("fit has no sigma_u".into()))?;
    Ok(problem.total_loglik(&fit.params.beta, sigma_u, fit.params.sigma_e))
}

/// Fixed-effects (within) estimator for Gaussian panels.
#[derive(Debug, Clone)]
pub struct FeGaussianFit {
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    pub sigma: f64,
}

/// OLS of demeaned y on demeaned time-varying covariates.
pub fn fe_gaussian_fit(data: &PanelDataset) -> Result<FeGaussianFit> {
    let src = data.without_intercept();
    let varying = decomp::time_varying_columns(&src);
    if varying.is_empty() {
        return Err(Error::Estimation(
            "no time-varying covariates: nothing estimable within".into(),
        ));
    }
    let means = decomp::unit_means(&src);
    let n_obs = src.n_obs();
    let p = varying.len();
    let mut xd = DMatrix::zeros(n_obs, p);
    let mut yd = DVector::zeros(n_obs);
    let mut ybar = vec![0.0; src.n_units()];
    for i in 0..src.n_units() {
        let range = src.unit_range(i);
        let t = range.len() as f64;
        let mut s = 0.0;
        for r in range {
            s += src.y()[r];
        }
        ybar[i] = s / t;
    }
    for r in 0..n_obs {
        let u = src.obs_unit()[r];
        yd[r] = src.y()[r] - ybar[u];
        for (jj, &j) in varying.iter().enumerate() {
            xd[(r, jj)] = src.x()[(r, j)] - means[(u, j)];
        }
    }
    let xtx = xd.transpose() * &xd;
    let xty = xd.transpose() * &yd;
    let chol = xtx.clone().cholesky().ok_or_else(|| Error::Singular {
        columns: varying.clone(),
        detail: "demeaned design is rank deficient".into(),
    })?;
    let coef = chol.solve(&xty);
    let resid = &yd - &xd * &coef;
    let dof = (n_obs.saturating_sub(src.n_units() + p)).max(1);
    let sigma2 = resid.dot(&resid) / dof as f64;
    let cov = chol.inverse() * sigma2;
    let se = DVector::from_fn(p, |j, _| cov[(j, j)].max(0.0).sqrt());
    let names = varying.iter().map(|&j| src.covariate_names()[j].clone()).collect();
    Ok(FeGaussianFit { names, coef, se, sigma: sigma2.sqrt() })
}

/// Fixed-effects probit fit (unit-dummy intercepts).
#[derive(Debug, Clone)]
pub struct FeProbitFit {
    pub names: Vec<String>,
    pub coef: DVector<f64>,
    pub se: DVector<f64>,
    /// Units removed because their responses were all 0 or all 1.
    pub dropped_units: usize,
    pub converged: bool,
    pub separation: bool,
    pub loglik: f64,
    /// Ascent trace of the Newton iterations.
    pub loglik_path: Vec<f64>,
}

/// Joint Newton ML over (beta, per-unit intercepts) for Bernoulli probit
/// panels. Units with constant responses are dropped (their intercept sits at
/// +-infinity); the unit-intercept block is eliminated by its Schur
/// complement so each step solves only a p x p system.
pub fn fe_probit_fit(data: &PanelDataset) -> Result<FeProbitFit> {
    let fl = FamilyLink::new(Family::Bernoulli, crate::data::Link::Probit)?;
    let src = data.without_intercept();
    let varying = decomp::time_varying_columns(&src);
    if varying.is_empty() {
        return Err(Error::Estimation(
            "no time-varying covariates: nothing estimable within".into(),
        ));
    }

    let mut retained = Vec::new();
    for i in 0..src.n_units() {
        let range = src.unit_range(i);
        let s: f64 = range.clone().map(|r| src.y()[r]).sum();
        if s > 0.0 && s < range.len() as f64 {
            retained.push(i);
        }
    }
    let dropped_units = src.n_units() - retained.len();
    if retained.is_empty() {
        return Err(Error::Estimation("every unit has a constant response".into()));
    }

    let m = retained.len();
    let p = varying.len();
    let mut beta = DVector::zeros(p);
    let mut alpha = DVector::zeros(m);
    for (ii, &i) in retained.iter().enumerate() {
        let range = src.unit_range(i);
        let t = range.len() as f64;
        let s: f64 = range.clone().map(|r| src.y()[r]).sum();
        // Smoothed empirical rate on the probit scale.
        let rate = (s + 0.5) / (t + 1.0);
        alpha[ii] = crate::families::normal_cdf_inv(rate);
    }

    let ll = |beta: &DVector<f64>, alpha: &DVector<f64>| -> f64 {
        let mut acc = KahanSum::new();
        for (ii, &i) in retained.iter().enumerate() {
            for r in src.unit_range(i) {
                let mut e = alpha[ii];
                for (jj, &j) in varying.iter().enumerate() {
                    e += src.x()[(r, j)] * beta[jj];
                }
                acc.add(fl.log_density(src.y()[r], e, None));
            }
        }
        acc.value()
    };

    let mut obj = ll(&beta, &alpha);
    let mut loglik_path = vec![obj];
    let mut converged = false;
    for _ in 0..100 {
        let mut a_block = DMatrix::<f64>::zeros(p, p);
        let mut g_beta = DVector::<f64>::zeros(p);
        let mut b_rows = DMatrix::<f64>::zeros(m, p);
        let mut d_diag = DVector::<f64>::zeros(m);
        let mut g_alpha = DVector::<f64>::zeros(m);
        for (ii, &i) in retained.iter().enumerate() {
            for r in src.unit_range(i) {
                let mut e = alpha[ii];
                for (jj, &j) in varying.iter().enumerate() {
                    e += src.x()[(r, j)] * beta[jj];
                }
                let mu = fl.mean(e);
                let md = fl.mean_deriv(e);
                let v = fl.variance(mu);
                let w = if md < 1e-280 || v < 1e-280 { 0.0 } else { md * md / v };
                let s = fl.score_eta(src.y()[r], e, None);
                for (jj, &j) in varying.iter().enumerate() {
                    let xj = src.x()[(r, j)];
                    g_beta[jj] += s * xj;
                    b_rows[(ii, jj)] += w * xj;
                    for (jj2, &j2) in varying.iter().enumerate().skip(jj) {
                        a_block[(jj, jj2)] += w * xj * src.x()[(r, j2)];
                    }
                }
                d_diag[ii] += w;
                g_alpha[ii] += s;
            }
        }
        for a in 0..p {
            for b in 0..a {
                a_block[(a, b)] = a_block[(b, a)];
            }
        }
        let gnorm = numeric::max_abs(&g_beta).max(numeric::max_abs(&g_alpha));
        if gnorm <= 1e-8 {
            converged = true;
            break;
        }
        // Schur complement on the unit-intercept block.
        let mut schur = a_block.clone();
        let mut rhs = g_beta.clone();
        for ii in 0..m {
            let d = d_diag[ii].max(1e-12);
            for a in 0..p {
                rhs[a] -= b_rows[(ii, a)] * g_alpha[ii] / d;
                for b in 0..p {
                    schur[(a, b)] -= b_rows[(ii, a)] * b_rows[(ii, b)] / d;
                }
            }
        }
        let d_beta = schur.clone().cholesky().map(|c| c.solve(&rhs)).ok_or_else(|| {
            Error::Singular { columns: vec![], detail: "FE probit information singular".into() }
        })?;
        let mut d_alpha = DVector::zeros(m);
        for ii in 0..m {
            let d = d_diag[ii].max(1e-12);
            let mut bd = 0.0;
            for a in 0..p {
                bd += b_rows[(ii, a)] * d_beta[a];
            }
            d_alpha[ii] = (g_alpha[ii] - bd) / d;
        }

        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let nb = &beta + &d_beta * step;
            let na = &alpha + &d_alpha * step;
            let cand = ll(&nb, &na);
            if cand.is_finite() && cand >= obj - 1e-12 {
                beta = nb;
                alpha = na;
                obj = cand;
                loglik_path.push(obj);
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }

    let separation = numeric::max_abs(&beta) > 30.0 || alpha.iter().any(|a| a.abs() > 30.0);

    // beta covariance from the inverse Schur complement at the optimum.
    let mut a_block = DMatrix::<f64>::zeros(p, p);
    let mut b_rows = DMatrix::<f64>::zeros(m, p);
    let mut d_diag = DVector::<f64>::zeros(m);
    for (ii, &i) in retained.iter().enumerate() {
        for r in src.unit_range(i) {
            let mut e = alpha[ii];
            for (jj, &j) in varying.iter().enumerate() {
                e += src.x()[(r, j)] * beta[jj];
            }
            let mu = fl.mean(e);
            let md = fl.mean_deriv(e);
            let v = fl.variance(mu);
            let w = if md < 1e-280 || v < 1e-280 { 0.0 } else { md * md / v };
            for (jj, &j) in varying.iter().enumerate() {
                b_rows[(ii, jj)] += w * src.x()[(r, j)];
                for (jj2, &j2) in varying.iter().enumerate().skip(jj) {
                    a_block[(jj, jj2)] += w * src.x()[(r, j)] * src.x()[(r, j2)];
                }
            }
            d_diag[ii] += w;
        }
    }
    for a in 0..p {
        for b in 0..a {
            a_block[(a, b)] = a_block[(b, a)];
        }
    }
    for ii in 0..m {
        let d = d_diag[ii].max(1e-12);
        for a in 0..p {
            for b in 0..p {
                a_block[(a, b)] -= b_rows[(ii, a)] * b_rows[(ii, b)] / d;
            }
        }
    }
    let se = match a_block.cholesky() {
        Some(c) => {
            let inv = c.inverse();
            DVector::from_fn(p, |j, _| inv[(j, j)].max(0.0).sqrt())
        }
        None => DVector::from_element(p, f64::NAN),
    };

    let names = varying.iter().map(|&j| src.covariate_names()[j].clone()).collect();
    Ok(FeProbitFit {
        names,
        coef: beta,
        se,
        dropped_units,
        converged,
        separation,
        loglik: obj,
        loglik_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{KRule, Link};

    #[test]
    fn quadrature_moments_match_standard_normal() {
        let rule = QuadratureRule::gauss_hermite(15).unwrap();
        let wsum: f64 = rule.weights.iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        // Nodes symmetric about zero.
        for j in 0..rule.nodes.len() {
            let mirror = rule.nodes[rule.nodes.len() - 1 - j];
            assert!((rule.nodes[j] + mirror).abs() < 1e-10);
        }
        let expect = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0];
        for (m, &target) in expect.iter().enumerate() {
            let got: f64 = (0..rule.nodes.len())
                .map(|j| rule.weights[j] * rule.nodes[j].powi(m as i32))
                .sum();
            assert!((got - target).abs() < 1e-10, "moment {m}: {got}");
        }
    }

    fn simulated_gaussian_panel(n: usize, t: usize, seed: u64) -> PanelDataset {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::numeric::derive_rng(seed, &[42]);
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for i in 0..n {
            let u: f64 = rng.sample::<f64, _>(StandardNormal) * 0.8;
            for tt in 0..t {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                ids.push(format!("u{i}"));
                time.push(tt as i64);
                rows.push(vec![x]);
                y.push(-0.4 + 0.5 * x + u + 0.9 * e);
            }
        }
        PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()]).unwrap()
    }

    /// Closed-form marginal loglik of the Gaussian random-intercept model
    /// (exchangeable covariance), used as the quadrature oracle.
    fn exchangeable_normal_loglik(
        data: &PanelDataset,
        beta: &DVector<f64>,
        intercept: f64,
        sigma_u: f64,
        sigma_e: f64,
    ) -> f64 {
        let mut total = 0.0;
        for i in 0..data.n_units() {
            let range = data.unit_range(i);
            let t = range.len();
            let mut r = Vec::with_capacity(t);
            for row in range {
                let mut e = intercept;
                for j in 0..data.n_covariates() {
                    e += data.x()[(row, j)] * beta[j];
                }
                r.push(data.y()[row] - e);
            }
            // Sigma = sigma_u^2 J + sigma_e^2 I: Sherman-Morrison quadratic
            // form and the matching determinant identity.
            let se2 = sigma_e * sigma_e;
            let su2 = sigma_u * sigma_u;
            let sr: f64 = r.iter().sum();
            let srr: f64 = r.iter().map(|v| v * v).sum();
            let denom = se2 + t as f64 * su2;
            let quad = srr / se2 - su2 * sr * sr / (se2 * denom);
            let logdet = (t as f64 - 1.0) * se2.ln() + denom.ln();
            total += -0.5 * (t as f64) * LN_2PI - 0.5 * logdet - 0.5 * quad;
        }
        total
    }

    #[test]
    fn agh_matches_closed_form_gaussian_marginal() {
        let data = simulated_gaussian_panel(40, 5, 3);
        let mut spec = ModelSpec::new(Family::Gaussian, Link::Identity, Treatment::Par);
        spec.k_rule = KRule::Fixed(1);
        let fit = agh_fit(&data, &spec).unwrap();
        assert!(fit.converged, "flags: {:?}", fit.flags);

        let names = fit.beta_names.clone();
        let icol = names.iter().position(|n| n == "intercept").unwrap();
        let slopes: Vec<usize> = (0..names.len()).filter(|&j| j != icol).collect();
        let beta = DVector::from_fn(slopes.len(), |j, _| fit.params.beta[slopes[j]]);
        let oracle = exchangeable_normal_loglik(
            &data,
            &beta,
            fit.params.beta[icol],
            fit.sigma_u.unwrap(),
            fit.params.sigma_e.unwrap(),
        );
        assert!(
            (fit.loglik - oracle).abs() < 1e-6,
            "agh {} vs closed form {}",
            fit.loglik,
            oracle
        );
    }

    #[test]
    fn agh_with_zero_sigma_u_reduces_to_glm() {
        let data = simulated_gaussian_panel(25, 4, 9);
        let spec = ModelSpec::new(Family::Gaussian, Link::Identity, Treatment::Par);
        let frame = em::build_frame(&data, &spec).unwrap();
        let quad = QuadratureRule::gauss_hermite(15).unwrap();
        let problem = AghProblem { design: &frame.design, fl: frame.fl, quad: &quad };
        let beta = DVector::from_vec(vec![-0.3, 0.45]);
        let sigma_e = 0.95;
        let agh = problem.total_loglik(&beta, 0.0, Some(sigma_e));
        let eta = frame.design.x() * &beta;
        let direct: f64 = (0..frame.design.n_obs())
            .map(|r| frame.fl.log_density(frame.design.y()[r], eta[r], Some(sigma_e)))
            .sum();
        assert!((agh - direct).abs() < 1e-9, "{agh} vs {direct}");
    }

    #[test]
    fn fe_gaussian_matches_hand_ols() {
        // n = 2, T = 2 demeaned closed form: slope = sum(dx*dy)/sum(dx^2).
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![0, 1, 0, 1],
            vec![1.0, 2.4, 3.0, 5.2],
            vec![vec![0.0], vec![1.0], vec![1.0], vec![3.0]],
            vec!["x".into()],
        )
        .unwrap();
        let fit = fe_gaussian_fit(&data).unwrap();
        // Demeaned: unit a dx = (-0.5, 0.5), dy = (-0.7, 0.7); unit b
        // dx = (-1, 1), dy = (-1.1, 1.1).
        let expect = (0.35 + 0.35 + 1.1 + 1.1) / (0.25 + 0.25 + 1.0 + 1.0);
        assert!((fit.coef[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn fe_gaussian_rejects_time_invariant_only_design() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into()],
            vec![0, 1],
            vec![1.0, 2.0],
            vec![vec![3.0], vec![3.0]],
            vec!["z".into()],
        )
        .unwrap();
        assert!(fe_gaussian_fit(&data).is_err());
    }

    #[test]
    fn fe_probit_drops_constant_response_units() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let mut rng = crate::numeric::derive_rng(17, &[5]);
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for i in 0..60 {
            let u: f64 = rng.sample::<f64, _>(StandardNormal) * 0.7;
            for t in 0..6 {
                let x: f64 = rng.sample(StandardNormal);
                ids.push(format!("u{i}"));
                time.push(t);
                rows.push(vec![x]);
                let pr = crate::families::normal_cdf(-0.2 + 0.6 * x + u);
                y.push(if rng.gen::<f64>() < pr { 1.0 } else { 0.0 });
            }
        }
        // One all-ones unit.
        for t in 0..6 {
            ids.push("const".into());
            time.push(t);
            rows.push(vec![0.1 * t as f64]);
            y.push(1.0);
        }
        let data = PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()]).unwrap();
        let fit = fe_probit_fit(&data).unwrap();
        assert!(fit.dropped_units >= 1);
        assert!(fit.converged, "gradient did not vanish");
        // Ascent property of the Newton path.
        for w in fit.loglik_path.windows(2) {
            assert!(w[1] >= w[0] - 1e-10);
        }
        // Slope in a sane neighbourhood of the truth (incidental-parameter
        // bias pushes it upward).
        assert!(fit.coef[0] > 0.3 && fit.coef[0] < 1.2, "{}", fit.coef[0]);
    }
}
