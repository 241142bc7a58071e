//! EM estimation of finite-mixture random-intercept GLMs: plain mixtures,
//! mixtures on the QP design, and covariate-dependent mixture weights, with
//! multi-start, K selection, and an optional quasi-Newton polish of the
//! winning start.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::{
    information_criteria, Family, FitResult, KPathEntry, KRule, MixtureParams, ModelSpec,
    PanelDataset, ParamLayout, Treatment, WeightModel,
};
use crate::decomp::{self, DecomposedDesign};
use crate::families::{weighted_glm_fit, FamilyLink, GlmOptions};
use crate::numeric::{self, derive_rng, logsumexp, KahanSum};
use crate::{Error, Result};

/// A component collapses when its posterior column mass drops below this.
const COLLAPSE_TOL: f64 = 1e-10;
/// Slack allowed on the EM ascent property.
const MONOTONICITY_SLACK: f64 = 1e-8;
/// Inner IRLS iterations per Bernoulli M-step (generalized EM).
const INNER_IRLS_CAP: usize = 25;

/// Treatment-applied design plus the weight-model covariates.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    /// Design with an intercept column present.
    pub design: PanelDataset,
    /// `[1 | selected unit means]`, n x (q+1); `None` for constant weights.
    pub weight_x: Option<DMatrix<f64>>,
    /// Names of the q weight covariates.
    pub weight_names: Vec<String>,
    pub fl: FamilyLink,
    pub qp: Option<DecomposedDesign>,
}

impl ModelFrame {
    pub fn q(&self) -> usize {
        self.weight_x.as_ref().map_or(0, |w| w.ncols() - 1)
    }
}

/// Apply the endogeneity treatment and assemble the weight-model covariates.
pub fn build_frame(data: &PanelDataset, spec: &ModelSpec) -> Result<ModelFrame> {
    let fl = FamilyLink::new(spec.family, spec.link)?;
    let (design, qp) = match spec.treatment {
        Treatment::FmQp | Treatment::ParQp => {
            let (d, info) = decomp::qp_transform(data)?;
            (d, Some(info))
        }
        _ => (data.with_intercept(), None),
    };

    let (weight_x, weight_names) = if spec.treatment == Treatment::Cov {
        let base = data.without_intercept();
        // `Some([])` requests an intercept-only weight model (constrained
        // slopes); `None` defaults to the unit means of time-varying columns.
        let cols: Vec<usize> = match &spec.weight_covariates {
            Some(names) => {
                let mut idx = Vec::new();
                for name in names {
                    let j = base
                        .covariate_names()
                        .iter()
                        .position(|n| n == name)
                        .ok_or_else(|| {
                            Error::Config(format!("weight covariate '{}' not in design", name))
                        })?;
                    idx.push(j);
                }
                idx
            }
            None => {
                let cols = decomp::time_varying_columns(&base);
                if cols.is_empty() {
                    return Err(Error::Config(
                        "COV needs at least one weight covariate (none are time-varying)".into(),
                    ));
                }
                cols
            }
        };
        let means = decomp::unit_means(&base);
        let n = base.n_units();
        let mut w = DMatrix::zeros(n, cols.len() + 1);
        for i in 0..n {
            w[(i, 0)] = 1.0;
            for (jj, &j) in cols.iter().enumerate() {
                w[(i, jj + 1)] = means[(i, j)];
            }
        }
        let names = cols.iter().map(|&j| base.covariate_names()[j].clone()).collect();
        (Some(w), names)
    } else {
        (None, Vec::new())
    };

    Ok(ModelFrame { design, weight_x, weight_names, fl, qp })
}

/// Design actually entering the linear predictor for a K-component fit: the
/// intercept column is absorbed into the locations when K >= 2.
pub fn design_for_k(frame: &ModelFrame, k: usize) -> PanelDataset {
    if k >= 2 {
        frame.design.without_intercept()
    } else {
        frame.design.clone()
    }
}

/// E-step output.
#[derive(Debug, Clone)]
pub struct EStep {
    /// n x K posterior membership probabilities.
    pub tau: DMatrix<f64>,
    pub loglik: f64,
}

/// Posterior membership probabilities and the marginal log-likelihood at the
/// current parameters. `data` must match `params.beta` column-wise.
pub fn e_step(
    data: &PanelDataset,
    params: &MixtureParams,
    fl: FamilyLink,
    weight_x: Option<&DMatrix<f64>>,
) -> Result<EStep> {
    let n = data.n_units();
    let k = params.k();
    let comp_ll = component_logliks(data, params, fl);

    let mut tau = DMatrix::zeros(n, k);
    let mut total = KahanSum::new();
    let mut lw = vec![0.0; k];
    let mut wrow: Vec<f64> = Vec::new();
    for i in 0..n {
        let log_pi = match weight_x {
            Some(w) => {
                wrow.clear();
                wrow.extend(w.row(i).iter());
                params.unit_log_weights(Some(&wrow))
            }
            None => params.unit_log_weights(None),
        };
        for c in 0..k {
            lw[c] = log_pi[c] + comp_ll[(i, c)];
        }
        let lse = logsumexp(&lw);
        if !lse.is_finite() {
            return Err(Error::Estimation(format!(
                "non-finite likelihood contribution at unit {} ('{}')",
                i,
                data.unit_ids()[i]
            )));
        }
        for c in 0..k {
            tau[(i, c)] = (lw[c] - lse).exp();
        }
        total.add(lse);
    }
    Ok(EStep { tau, loglik: total.value() })
}

/// Per-unit, per-component conditional log-likelihoods (n x K).
fn component_logliks(data: &PanelDataset, params: &MixtureParams, fl: FamilyLink) -> DMatrix<f64> {
    let n = data.n_units();
    let k = params.k();
    let eta = data.x() * &params.beta;
    let mut out = DMatrix::zeros(n, k);

    if fl.family == Family::Gaussian {
        // sum_t (r - zeta)^2 expands in (sum r, sum r^2); one pass over rows.
        let sigma = params.sigma_e.expect("gaussian mixture needs sigma");
        let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        for i in 0..n {
            let mut sr = 0.0;
            let mut srr = 0.0;
            let range = data.unit_range(i);
            let t = range.len() as f64;
            for r in range {
                let res = data.y()[r] - eta[r];
                sr += res;
                srr += res * res;
            }
            for c in 0..k {
                let z = params.zeta[c];
                out[(i, c)] = t * ln_norm - (srr - 2.0 * z * sr + t * z * z) * inv2s2;
            }
        }
    } else {
        for i in 0..n {
            for r in data.unit_range(i) {
                for c in 0..k {
                    out[(i, c)] += fl.log_density(data.y()[r], eta[r] + params.zeta[c], None);
                }
            }
        }
    }
    out
}

/// Per-fit cache of design cross-products used by the Gaussian M-step.
struct GaussCache {
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    /// Unit-level covariate sums, n x p.
    unit_sx: DMatrix<f64>,
    /// Unit-level response sums.
    unit_sy: DVector<f64>,
    unit_t: Vec<f64>,
}

impl GaussCache {
    fn new(data: &PanelDataset) -> Self {
        let n = data.n_units();
        let p = data.n_covariates();
        let x = data.x();
        let y = data.y();
        let xtx = x.transpose() * x;
        let xty = x.transpose() * y;
        let mut unit_sx = DMatrix::zeros(n, p);
        let mut unit_sy = DVector::zeros(n);
        let mut unit_t = vec![0.0; n];
        for i in 0..n {
            let range = data.unit_range(i);
            unit_t[i] = range.len() as f64;
            for r in range {
                unit_sy[i] += y[r];
                for j in 0..p {
                    unit_sx[(i, j)] += x[(r, j)];
                }
            }
        }
        GaussCache { xtx, xty, unit_sx, unit_sy, unit_t }
    }
}

/// Joint update of the shared slopes and the component locations.
///
/// Solves the weighted score equations of the K-fold expanded design
/// `[X | component indicators]` in one weighted GLM: exactly for the identity
/// link, by warm-started IRLS capped at `inner_cap` iterations otherwise
/// (generalized EM). Returns `(beta, zeta, separation)`.
pub fn m_step_locations_beta(
    data: &PanelDataset,
    tau: &DMatrix<f64>,
    fl: FamilyLink,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
    inner_cap: usize,
) -> Result<(DVector<f64>, DVector<f64>, bool)> {
    let k = tau.ncols();
    check_collapse(tau)?;
    if k == 1 {
        // Ordinary GLM of y on the full design.
        let w = DVector::from_element(data.n_obs(), 1.0);
        let off = DVector::zeros(data.n_obs());
        let fit = weighted_glm_fit(
            data.y(),
            data.x(),
            &w,
            &off,
            fl,
            &GlmOptions {
                max_iter: inner_cap,
                init: warm.map(|(b, _)| b.clone()),
                ..Default::default()
            },
        )?;
        return Ok((fit.coef, DVector::from_element(1, 0.0), fit.separation));
    }
    if fl.family == Family::Gaussian {
        let cache = GaussCache::new(data);
        let (beta, zeta) = gaussian_locations(data, tau, &cache)?;
        Ok((beta, zeta, false))
    } else {
        bernoulli_locations(data, tau, fl, warm, inner_cap)
    }
}

fn check_collapse(tau: &DMatrix<f64>) -> Result<()> {
    for c in 0..tau.ncols() {
        let mass: f64 = tau.column(c).iter().sum();
        if mass < COLLAPSE_TOL {
            return Err(Error::ComponentCollapse(c));
        }
    }
    Ok(())
}

fn gaussian_locations(
    data: &PanelDataset,
    tau: &DMatrix<f64>,
    cache: &GaussCache,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let p = data.n_covariates();
    let k = tau.ncols();
    let n = data.n_units();
    let dim = p + k;
    let mut m = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);

    m.view_mut((0, 0), (p, p)).copy_from(&cache.xtx);
    rhs.rows_mut(0, p).copy_from(&cache.xty);
    for c in 0..k {
        let mut d = 0.0;
        let mut b = 0.0;
        let mut a = DVector::zeros(p);
        for i in 0..n {
            let t = tau[(i, c)];
            if t == 0.0 {
                continue;
            }
            d += t * cache.unit_t[i];
            b += t * cache.unit_sy[i];
            for j in 0..p {
                a[j] += t * cache.unit_sx[(i, j)];
            }
        }
        for j in 0..p {
            m[(j, p + c)] = a[j];
            m[(p + c, j)] = a[j];
        }
        m[(p + c, p + c)] = d;
        rhs[p + c] = b;
    }

    let sol = m.clone().cholesky().map(|ch| ch.solve(&rhs)).ok_or_else(|| Error::Singular {
        columns: vec![],
        detail: "expanded design normal equations not positive definite".into(),
    })?;
    let beta = DVector::from_fn(p, |j, _| sol[j]);
    let zeta = DVector::from_fn(k, |c, _| sol[p + c]);
    Ok((beta, zeta))
}

fn bernoulli_locations(
    data: &PanelDataset,
    tau: &DMatrix<f64>,
    fl: FamilyLink,
    warm: Option<(&DVector<f64>, &DVector<f64>)>,
    inner_cap: usize,
) -> Result<(DVector<f64>, DVector<f64>, bool)> {
    let p = data.n_covariates();
    let k = tau.ncols();
    let n_obs = data.n_obs();
    let dim = p + k;
    let x = data.x();
    let y = data.y();
    let obs_unit = data.obs_unit();

    let mut beta = warm.map(|(b, _)| b.clone()).unwrap_or_else(|| DVector::zeros(p));
    let mut zeta = warm.map(|(_, z)| z.clone()).unwrap_or_else(|| DVector::zeros(k));

    let q_loc = |beta: &DVector<f64>, zeta: &DVector<f64>| -> f64 {
        let eta = x * beta;
        let mut acc = KahanSum::new();
        for r in 0..n_obs {
            let u = obs_unit[r];
            for c in 0..k {
                let t = tau[(u, c)];
                if t != 0.0 {
                    acc.add(t * fl.log_density(y[r], eta[r] + zeta[c], None));
                }
            }
        }
        acc.value()
    };

    let mut obj = q_loc(&beta, &zeta);
    for _ in 0..inner_cap {
        let eta = x * &beta;
        let mut m = DMatrix::zeros(dim, dim);
        let mut rhs = DVector::zeros(dim);
        let mut grad = DVector::zeros(dim);
        for r in 0..n_obs {
            let u = obs_unit[r];
            let xr = x.row(r);
            for c in 0..k {
                let t = tau[(u, c)];
                if t == 0.0 {
                    continue;
                }
                let e = eta[r] + zeta[c];
                let mu = fl.mean(e);
                let md = fl.mean_deriv(e);
                let v = fl.variance(mu);
                let s = t * fl.score_eta(y[r], e, None);
                // Saturated cells contribute score but no curvature.
                let (w, z) = if md < 1e-280 || v < 1e-280 {
                    (0.0, 0.0)
                } else {
                    (t * md * md / v, e + (y[r] - mu) / md)
                };
                for a in 0..p {
                    let xa = xr[a];
                    let wxa = w * xa;
                    rhs[a] += wxa * z;
                    grad[a] += s * xa;
                    for b in a..p {
                        m[(a, b)] += wxa * xr[b];
                    }
                    m[(a, p + c)] += wxa;
                }
                m[(p + c, p + c)] += w;
                rhs[p + c] += w * z;
                grad[p + c] += s;
            }
        }
        for a in 0..dim {
            for b in 0..a {
                m[(a, b)] = m[(b, a)];
            }
        }
        if numeric::max_abs(&grad) <= 1e-10 {
            break;
        }
        let sol = m.clone().cholesky().map(|ch| ch.solve(&rhs)).ok_or_else(|| Error::Singular {
            columns: vec![],
            detail: "expanded Bernoulli normal equations not positive definite".into(),
        })?;
        let prop_beta = DVector::from_fn(p, |j, _| sol[j]);
        let prop_zeta = DVector::from_fn(k, |c, _| sol[p + c]);

        // Step halving towards the IRLS proposal keeps Q non-decreasing.
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cb = &beta + (&prop_beta - &beta) * step;
            let cz = &zeta + (&prop_zeta - &zeta) * step;
            let cand = q_loc(&cb, &cz);
            if cand.is_finite() && cand >= obj - 1e-12 {
                beta = cb;
                zeta = cz;
                obj = cand;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let separation = numeric::max_abs(&beta).max(numeric::max_abs(&zeta)) > 30.0;
    Ok((beta, zeta, separation))
}

/// ML update of the Gaussian residual SD given locations and slopes.
pub fn m_step_sigma(
    data: &PanelDataset,
    tau: &DMatrix<f64>,
    beta: &DVector<f64>,
    zeta: &DVector<f64>,
) -> Result<f64> {
    let eta = data.x() * beta;
    let k = zeta.len();
    let mut acc = KahanSum::new();
    for i in 0..data.n_units() {
        let mut sr = 0.0;
        let mut srr = 0.0;
        let range = data.unit_range(i);
        let t = range.len() as f64;
        for r in range {
            let res = data.y()[r] - eta[r];
            sr += res;
            srr += res * res;
        }
        for c in 0..k {
            let z = zeta[c];
            acc.add(tau[(i, c)] * (srr - 2.0 * z * sr + t * z * z));
        }
    }
    let sig2 = acc.value() / data.n_obs() as f64;
    if sig2 < 1e-10 {
        return Err(Error::DegenerateSigma(sig2));
    }
    Ok(sig2.sqrt())
}

/// Closed-form update of constant mixture masses.
pub fn m_step_weights_constant(tau: &DMatrix<f64>) -> DVector<f64> {
    let n = tau.nrows() as f64;
    DVector::from_fn(tau.ncols(), |c, _| tau.column(c).iter().sum::<f64>() / n)
}

/// Outcome of the multinomial-logit weight update.
#[derive(Debug, Clone)]
pub struct LogitWeightsFit {
    pub gamma: DMatrix<f64>,
    pub separation: bool,
    /// True when the ridge-stabilized refit replaced the plain solution.
    pub ridged: bool,
}

fn logit_weight_objective(tau: &DMatrix<f64>, wx: &DMatrix<f64>, gamma: &DMatrix<f64>) -> f64 {
    let k = tau.ncols();
    let n = tau.nrows();
    let mut acc = KahanSum::new();
    let mut logits = vec![0.0; k];
    for i in 0..n {
        for l in 0..k - 1 {
            let mut s = 0.0;
            for j in 0..wx.ncols() {
                s += gamma[(l, j)] * wx[(i, j)];
            }
            logits[l] = s;
        }
        logits[k - 1] = 0.0;
        let lp = numeric::log_softmax(&logits);
        for c in 0..k {
            acc.add(tau[(i, c)] * lp[c]);
        }
    }
    acc.value()
}

/// Hard box on each weight coefficient. Beyond this the component
/// probabilities are numerically saturated and the surface degenerates into
/// floating-point steps; a binding box is reported as separation.
const GAMMA_BOX: f64 = 30.0;

fn clamp_gamma(g: &mut DMatrix<f64>) {
    for v in g.iter_mut() {
        *v = v.clamp(-GAMMA_BOX, GAMMA_BOX);
    }
}

fn logit_weights_newton(
    tau: &DMatrix<f64>,
    wx: &DMatrix<f64>,
    init: &DMatrix<f64>,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let k = tau.ncols();
    let n = tau.nrows();
    let qp1 = wx.ncols();
    let dim = (k - 1) * qp1;
    let mut gamma = init.clone();
    clamp_gamma(&mut gamma);
    let penalized = |g: &DMatrix<f64>| {
        logit_weight_objective(tau, wx, g) - ridge * g.iter().map(|v| v * v).sum::<f64>()
    };
    let mut obj = penalized(&gamma);

    for _ in 0..100 {
        // Score and negated Hessian of the weighted multinomial loglik.
        let mut grad = DVector::zeros(dim);
        let mut neg_h = DMatrix::zeros(dim, dim);
        let mut logits = vec![0.0; k];
        for i in 0..n {
            for l in 0..k - 1 {
                let mut s = 0.0;
                for j in 0..qp1 {
                    s += gamma[(l, j)] * wx[(i, j)];
                }
                logits[l] = s;
            }
            logits[k - 1] = 0.0;
            let lp = numeric::log_softmax(&logits);
            for l in 0..k - 1 {
                let pi_l = lp[l].exp();
                let resid = tau[(i, l)] - pi_l;
                for j in 0..qp1 {
                    grad[l * qp1 + j] += resid * wx[(i, j)];
                }
                for mc in l..k - 1 {
                    let pi_m = lp[mc].exp();
                    let cov = pi_l * (if l == mc { 1.0 - pi_m } else { -pi_m });
                    for j in 0..qp1 {
                        for j2 in 0..qp1 {
                            neg_h[(l * qp1 + j, mc * qp1 + j2)] += cov * wx[(i, j)] * wx[(i, j2)];
                        }
                    }
                }
            }
        }
        // Mirror the block upper triangle.
        for l in 0..k - 1 {
            for mc in 0..l {
                for j in 0..qp1 {
                    for j2 in 0..qp1 {
                        neg_h[(l * qp1 + j, mc * qp1 + j2)] =
                            neg_h[(mc * qp1 + j2, l * qp1 + j)];
                    }
                }
            }
        }
        if ridge > 0.0 {
            for l in 0..k - 1 {
                for j in 0..qp1 {
                    grad[l * qp1 + j] -= 2.0 * ridge * gamma[(l, j)];
                }
            }
            for d in 0..dim {
                neg_h[(d, d)] += 2.0 * ridge;
            }
        }
        if numeric::max_abs(&grad) <= 1e-8 {
            break;
        }
        let diag_max = (0..dim).map(|d| neg_h[(d, d)]).fold(0.0_f64, f64::max);
        for d in 0..dim {
            neg_h[(d, d)] += 1e-10 * diag_max.max(1.0);
        }
        // Near-empty components leave flat directions; if the information
        // still fails to factor, keep the current gamma (the update is
        // optional for the EM ascent).
        let dir = match neg_h.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => break,
        };

        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut cand = gamma.clone();
            for l in 0..k - 1 {
                for j in 0..qp1 {
                    cand[(l, j)] += step * dir[l * qp1 + j];
                }
            }
            // Projected step: the box keeps the surface numerically smooth.
            clamp_gamma(&mut cand);
            let cand_obj = penalized(&cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 {
                gamma = cand;
                obj = cand_obj;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(gamma)
}

/// Weighted multinomial-logit update of the mixture-weight coefficients.
/// Fractional responses `tau`; reference component K pinned at zero. On
/// separation a ridge-stabilized refit is attempted and kept only if it does
/// not lower the weight-block objective (EM ascent is preserved either way).
pub fn m_step_weights_logit(
    tau: &DMatrix<f64>,
    weight_x: &DMatrix<f64>,
    warm: Option<&DMatrix<f64>>,
) -> Result<LogitWeightsFit> {
    let k = tau.ncols();
    let qp1 = weight_x.ncols();
    let zero = DMatrix::zeros(k - 1, qp1);
    let init = warm.unwrap_or(&zero);
    let gamma = logit_weights_newton(tau, weight_x, init, 0.0)?;
    let separation = gamma.iter().fold(0.0_f64, |m, v| m.max(v.abs())) >= GAMMA_BOX - 1e-6;
    if !separation {
        return Ok(LogitWeightsFit { gamma, separation: false, ridged: false });
    }
    let ridged = logit_weights_newton(tau, weight_x, &zero, 1e-6)?;
    let plain_obj = logit_weight_objective(tau, weight_x, &gamma);
    let ridged_obj = logit_weight_objective(tau, weight_x, &ridged);
    let warm_obj = logit_weight_objective(tau, weight_x, init);
    if ridged_obj >= warm_obj && ridged_obj > plain_obj {
        Ok(LogitWeightsFit { gamma: ridged, separation: true, ridged: true })
    } else {
        Ok(LogitWeightsFit { gamma, separation: true, ridged: false })
    }
}

/// Deterministic starting point for a K-component fit.
///
/// Start 0 anchors the locations at quantiles of the per-unit mean working
/// residuals of the K = 1 GLM; later starts jitter locations and slopes.
pub fn initialize(
    frame: &ModelFrame,
    spec: &ModelSpec,
    k: usize,
    start_index: usize,
) -> Result<MixtureParams> {
    let design = &frame.design;
    let fl = frame.fl;
    let n = design.n_units();
    let w = DVector::from_element(design.n_obs(), 1.0);
    let off = DVector::zeros(design.n_obs());
    let glm = weighted_glm_fit(design.y(), design.x(), &w, &off, fl, &GlmOptions::default())?;

    let eta = design.x() * &glm.coef;
    let mut rbar = vec![0.0; n];
    let mut rss = 0.0;
    let intercept = design.intercept_col().map_or(0.0, |c| glm.coef[c]);
    for i in 0..n {
        let range = design.unit_range(i);
        let t = range.len() as f64;
        let mut s = 0.0;
        for r in range {
            let mu = fl.mean(eta[r]);
            let md = fl.mean_deriv(eta[r]).max(1e-10);
            let wr = (design.y()[r] - mu) / md;
            s += wr;
            rss += (design.y()[r] - mu) * (design.y()[r] - mu);
        }
        rbar[i] = intercept + s / t;
    }

    if k == 1 {
        let sigma = if fl.family == Family::Gaussian {
            Some((rss / design.n_obs() as f64).sqrt().max(1e-8))
        } else {
            None
        };
        return Ok(MixtureParams {
            beta: glm.coef,
            zeta: DVector::from_element(1, 0.0),
            weights: WeightModel::Constant(DVector::from_element(1, 1.0)),
            sigma_e: sigma,
        });
    }

    let mut sorted = rbar.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut zeta = DVector::from_fn(k, |c, _| {
        numeric::quantile(&sorted, (c + 1) as f64 / (k + 1) as f64)
    });

    // Slopes only; the intercept is absorbed into the locations.
    let slope_cols: Vec<usize> = (0..design.n_covariates())
        .filter(|&j| design.intercept_col() != Some(j))
        .collect();
    let mut beta = DVector::from_fn(slope_cols.len(), |j, _| glm.coef[slope_cols[j]]);

    if start_index > 0 {
        let mut rng = derive_rng(spec.seed, &[1, k as u64, start_index as u64]);
        let sd_r = numeric::sample_sd(&rbar).unwrap_or(0.0).max(1e-3);
        for c in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            zeta[c] += 0.1 * sd_r * z;
        }
        for j in 0..beta.len() {
            let z: f64 = rng.sample(StandardNormal);
            beta[j] += 0.1 * (beta[j].abs() + 0.1) * z;
        }
    }
    // Canonical ascending order also at the start.
    let mut zv: Vec<f64> = zeta.iter().cloned().collect();
    zv.sort_by(|a, b| a.partial_cmp(b).unwrap());
    zeta = DVector::from_vec(zv);

    let weights = match &frame.weight_x {
        None => WeightModel::Constant(DVector::from_element(k, 1.0 / k as f64)),
        Some(wx) => WeightModel::Logistic(DMatrix::zeros(k - 1, wx.ncols())),
    };
    let sigma_e = if fl.family == Family::Gaussian {
        Some((rss / design.n_obs() as f64).sqrt().max(1e-8))
    } else {
        None
    };
    Ok(MixtureParams { beta, zeta, weights, sigma_e })
}

/// State of one EM run: final parameters, posteriors, and the ascent trace.
#[derive(Debug, Clone)]
pub struct EmState {
    pub params: MixtureParams,
    pub tau: DMatrix<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    pub flags: Vec<String>,
    /// Log-likelihood after every E-step (non-decreasing up to 1e-8 slack).
    pub history: Vec<f64>,
}

fn drop_component(params: &MixtureParams, dead: usize) -> MixtureParams {
    let k = params.k();
    let keep: Vec<usize> = (0..k).filter(|&c| c != dead).collect();
    let zeta = DVector::from_fn(k - 1, |c, _| params.zeta[keep[c]]);
    let weights = match &params.weights {
        WeightModel::Constant(pi) => {
            let mut v = DVector::from_fn(k - 1, |c, _| pi[keep[c]]);
            let s: f64 = v.iter().sum();
            if s > 0.0 {
                v /= s;
            } else {
                v.fill(1.0 / (k - 1) as f64);
            }
            WeightModel::Constant(v)
        }
        WeightModel::Logistic(g) => {
            // Rebuild the full coefficient matrix (reference row zero), drop
            // the dead row, re-reference against the new last row.
            let qp1 = g.ncols();
            let mut full = DMatrix::zeros(k, qp1);
            for l in 0..k - 1 {
                for j in 0..qp1 {
                    full[(l, j)] = g[(l, j)];
                }
            }
            let mut kept = DMatrix::zeros(k - 1, qp1);
            for (row, &c) in keep.iter().enumerate() {
                for j in 0..qp1 {
                    kept[(row, j)] = full[(c, j)];
                }
            }
            let last = kept.row(k - 2).into_owned();
            let mut rerefd = DMatrix::zeros(k - 2, qp1);
            for row in 0..k - 2 {
                for j in 0..qp1 {
                    rerefd[(row, j)] = kept[(row, j)] - last[j];
                }
            }
            WeightModel::Logistic(rerefd)
        }
    };
    MixtureParams { beta: params.beta.clone(), zeta, weights, sigma_e: params.sigma_e }
}

/// Run one EM start to convergence (no polish).
pub fn run_em_start(
    frame: &ModelFrame,
    spec: &ModelSpec,
    k_req: usize,
    start_index: usize,
) -> Result<EmState> {
    let mut params = initialize(frame, spec, k_req, start_index)?;
    let design = design_for_k(frame, k_req);
    let fl = frame.fl;
    let weight_x = frame.weight_x.as_ref();
    let sd_y = numeric::sample_sd(design.y().as_slice()).unwrap_or(1.0).max(1e-12);
    let sigma_floor = 1e-6 * sd_y;

    let mut flags = Vec::new();
    let mut history = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    let mut tau = DMatrix::zeros(design.n_units(), params.k());
    let mut loglik = f64::NEG_INFINITY;

    for iter in 0..spec.max_iter {
        iterations = iter + 1;
        let wx = if params.k() >= 2 { weight_x } else { None };
        let es = e_step(&design, &params, fl, wx)?;
        history.push(es.loglik);
        if es.loglik < prev_ll - MONOTONICITY_SLACK {
            flags.push(format!(
                "monotonicity_violation:start{}:iter{}:drop{:.3e}",
                start_index,
                iter,
                prev_ll - es.loglik
            ));
        }
        tau = es.tau;
        loglik = es.loglik;
        if (es.loglik - prev_ll).abs() < spec.em_tol {
            converged = true;
            break;
        }
        prev_ll = es.loglik;

        match m_step_locations_beta(
            &design,
            &tau,
            fl,
            Some((&params.beta, &params.zeta)),
            INNER_IRLS_CAP,
        ) {
            Ok((beta, zeta, separation)) => {
                params.beta = beta;
                params.zeta = zeta;
                if separation {
                    let flag = format!("separation:start{}", start_index);
                    if !flags.contains(&flag) {
                        flags.push(flag);
                    }
                }
            }
            Err(Error::ComponentCollapse(dead)) => {
                let new_k = params.k() - 1;
                flags.push(format!(
                    "component_collapse:start{}:k{}->{}",
                    start_index,
                    params.k(),
                    new_k
                ));
                if new_k == 0 {
                    return Err(Error::Estimation("all components collapsed".into()));
                }
                params = drop_component(&params, dead);
                prev_ll = f64::NEG_INFINITY;
                continue;
            }
            Err(e) => return Err(e),
        }

        if fl.family == Family::Gaussian {
            match m_step_sigma(&design, &tau, &params.beta, &params.zeta) {
                Ok(s) => {
                    if s < sigma_floor {
                        params.sigma_e = Some(sigma_floor);
                        flags.push(format!("sigma_floored:start{}", start_index));
                    } else {
                        params.sigma_e = Some(s);
                    }
                }
                Err(Error::DegenerateSigma(_)) => {
                    params.sigma_e = Some(sigma_floor);
                    flags.push(format!("sigma_degenerate:start{}", start_index));
                }
                Err(e) => return Err(e),
            }
        }

        if params.k() >= 2 {
            let use_logistic = matches!(params.weights, WeightModel::Logistic(_));
            if use_logistic {
                let wx = weight_x.expect("logistic weights need covariates");
                let warm = match &params.weights {
                    WeightModel::Logistic(g) => g.clone(),
                    _ => unreachable!(),
                };
                let fit = m_step_weights_logit(&tau, wx, Some(&warm))?;
                if fit.ridged {
                    let flag = format!("weights_ridged:start{}", start_index);
                    if !flags.contains(&flag) {
                        flags.push(flag);
                    }
                }
                params.weights = WeightModel::Logistic(fit.gamma);
            } else {
                params.weights = WeightModel::Constant(m_step_weights_constant(&tau));
            }
        }
    }

    if !converged {
        // Sync posteriors with the final parameters.
        let wx = if params.k() >= 2 { weight_x } else { None };
        let es = e_step(&design, &params, fl, wx)?;
        tau = es.tau;
        loglik = es.loglik;
        history.push(loglik);
    }

    Ok(EmState { params, tau, loglik, iterations, converged, flags, history })
}

/// Reorder the components so the locations are ascending; permutes the
/// posterior columns and remaps the weight model accordingly.
fn canonicalize(params: &mut MixtureParams, tau: &mut DMatrix<f64>) {
    let k = params.k();
    if k <= 1 {
        return;
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| params.zeta[a].partial_cmp(&params.zeta[b]).unwrap());
    if order.iter().enumerate().all(|(i, &o)| i == o) {
        return;
    }
    let zeta = DVector::from_fn(k, |c, _| params.zeta[order[c]]);
    let old_tau = tau.clone();
    for c in 0..k {
        tau.set_column(c, &old_tau.column(order[c]));
    }
    let weights = match &params.weights {
        WeightModel::Constant(pi) => {
            WeightModel::Constant(DVector::from_fn(k, |c, _| pi[order[c]]))
        }
        WeightModel::Logistic(g) => {
            let qp1 = g.ncols();
            let mut full = DMatrix::zeros(k, qp1);
            for l in 0..k - 1 {
                for j in 0..qp1 {
                    full[(l, j)] = g[(l, j)];
                }
            }
            // Permute rows, then subtract the new reference row (the last).
            let mut permuted = DMatrix::zeros(k, qp1);
            for c in 0..k {
                for j in 0..qp1 {
                    permuted[(c, j)] = full[(order[c], j)];
                }
            }
            let mut out = DMatrix::zeros(k - 1, qp1);
            for l in 0..k - 1 {
                for j in 0..qp1 {
                    out[(l, j)] = permuted[(l, j)] - permuted[(k - 1, j)];
                }
            }
            WeightModel::Logistic(out)
        }
    };
    params.zeta = zeta;
    params.weights = weights;
}

/// Fit a K-component mixture with multi-start EM. Starts run independently
/// (deterministic given `(seed, K, start)`); the highest log-likelihood wins,
/// ties broken toward the lowest start index.
pub fn fit_em(data: &PanelDataset, spec: &ModelSpec, k: usize) -> Result<FitResult> {
    let frame = build_frame(data, spec)?;
    fit_em_frame(&frame, spec, k)
}

/// Per-iteration log-likelihood trace of a single EM start (no polish).
/// Diagnostic surface for ascent checks.
pub fn em_history(
    data: &PanelDataset,
    spec: &ModelSpec,
    k: usize,
    start_index: usize,
) -> Result<Vec<f64>> {
    let frame = build_frame(data, spec)?;
    let out = run_em_start(&frame, spec, k, start_index)?;
    Ok(out.history)
}

pub(crate) fn fit_em_frame(frame: &ModelFrame, spec: &ModelSpec, k: usize) -> Result<FitResult> {
    if k == 0 {
        return Err(Error::Validation("K must be >= 1".into()));
    }
    let n_starts = if k == 1 { 1 } else { spec.n_starts };
    let outcomes: Vec<(usize, Result<EmState>)> = (0..n_starts)
        .into_par_iter()
        .map(|s| (s, run_em_start(frame, spec, k, s)))
        .collect();

    let mut best: Option<(usize, EmState)> = None;
    let mut failures = Vec::new();
    for (s, out) in outcomes {
        match out {
            Ok(o) => {
                let better = match &best {
                    None => true,
                    // Ties (within 1e-10) go to the earlier start index;
                    // outcomes arrive in start order.
                    Some((_, b)) => o.loglik > b.loglik + 1e-10,
                };
                if better {
                    best = Some((s, o));
                }
            }
            Err(e) => failures.push(format!("start {}: {}", s, e)),
        }
    }
    let (start_index, mut win) = best.ok_or_else(|| {
        Error::Estimation(format!("all {} starts failed: {}", n_starts, failures.join("; ")))
    })?;
    if !failures.is_empty() {
        win.flags.push(format!("failed_starts:{}", failures.len()));
    }

    let k_eff = win.params.k();
    let design = design_for_k(frame, k_eff);
    let weight_x = if k_eff >= 2 { frame.weight_x.as_ref() } else { None };

    // Quasi-Newton polish of the winning start sharpens the score at the
    // optimum; skipped while the variance sits on its degeneracy floor.
    let sd_y = numeric::sample_sd(design.y().as_slice()).unwrap_or(1.0).max(1e-12);
    let degenerate = win
        .params
        .sigma_e
        .map(|s| s <= 2e-6 * sd_y)
        .unwrap_or(false);
    if spec.polish && !degenerate {
        let layout = ParamLayout::of(&win.params);
        let theta0 = layout.pack(&win.params);
        // Weight coefficients are evaluated inside their box: beyond it the
        // surface saturates into floating-point steps the line search must
        // not wander into.
        let obj = |theta: &DVector<f64>| {
            let mut p = layout.unpack(theta);
            if let WeightModel::Logistic(g) = &mut p.weights {
                clamp_gamma(g);
            }
            crate::inference::mixture_loglik(&design, &p, frame.fl, weight_x)
        };
        let opts = numeric::BfgsOptions { max_iter: 200, grad_tol: 1e-6, fd_step: 1e-6 };
        let mut res = numeric::bfgs_maximize(&obj, theta0, &opts);
        if !res.converged {
            // Fresh curvature estimate from the stalled point.
            res = numeric::bfgs_maximize(&obj, res.theta.clone(), &opts);
        }
        if res.value > win.loglik {
            let mut polished = layout.unpack(&res.theta);
            if let WeightModel::Logistic(g) = &mut polished.weights {
                clamp_gamma(g);
            }
            win.params = polished;
            let es = e_step(&design, &win.params, frame.fl, weight_x)?;
            win.tau = es.tau;
            win.loglik = es.loglik;
            win.history.push(es.loglik);
        }
        if res.converged {
            // Score-level convergence subsumes the EM increment criterion.
            win.converged = true;
        } else {
            win.flags.push("polish_incomplete".to_string());
        }
    }

    // A weight model pinned at its box is a separated (boundary) solution,
    // not an interior optimum.
    if let WeightModel::Logistic(g) = &win.params.weights {
        if g.iter().any(|v| v.abs() >= GAMMA_BOX - 1e-6) {
            if !win.flags.iter().any(|f| f == "weights_separation") {
                win.flags.push("weights_separation".to_string());
            }
            win.converged = false;
        }
    }

    canonicalize(&mut win.params, &mut win.tau);

    let p_used = design.n_covariates();
    let npar = spec.npar(k_eff, p_used, frame.q());
    let (aic, bic) = information_criteria(win.loglik, npar, design.n_units());
    Ok(FitResult {
        params: win.params,
        beta_names: design.covariate_names().to_vec(),
        loglik: win.loglik,
        npar,
        aic,
        bic,
        tau: win.tau,
        se: None,
        converged: win.converged,
        iterations: win.iterations,
        k_path: Vec::new(),
        start_index,
        sigma_u: None,
        flags: win.flags,
    })
}

/// Fit K = 1..k_max (optionally stopping early once the likelihood-increment
/// rule triggers) and return the per-K fits.
pub fn fit_k_path(
    data: &PanelDataset,
    spec: &ModelSpec,
    k_max: usize,
    stop_on_threshold: bool,
) -> Result<Vec<FitResult>> {
    let frame = build_frame(data, spec)?;
    let mut fits: Vec<FitResult> = Vec::new();
    for k in 1..=k_max {
        let fit = fit_em_frame(&frame, spec, k)?;
        if stop_on_threshold && k >= 2 {
            let prev = &fits[fits.len() - 1];
            let eps = 1e-7 * prev.npar as f64;
            if fit.loglik - prev.loglik < eps {
                fits.push(fit);
                break;
            }
        }
        fits.push(fit);
    }
    Ok(fits)
}

fn path_entries(fits: &[FitResult]) -> Vec<KPathEntry> {
    fits.iter()
        .map(|f| KPathEntry {
            k: f.params.k(),
            loglik: f.loglik,
            npar: f.npar,
            aic: f.aic,
            bic: f.bic,
        })
        .collect()
}

/// Index into `fits` chosen by the likelihood-increment rule:
/// stop at K as soon as loglik(K+1) - loglik(K) < 1e-7 * npar(K).
pub fn pick_by_lik_threshold(fits: &[FitResult]) -> usize {
    for i in 0..fits.len().saturating_sub(1) {
        let eps = 1e-7 * fits[i].npar as f64;
        if fits[i + 1].loglik - fits[i].loglik < eps {
            return i;
        }
    }
    fits.len() - 1
}

/// Search K = 1..k_max under the spec's K rule.
pub fn select_k(data: &PanelDataset, spec: &ModelSpec) -> Result<FitResult> {
    let rule = spec.k_rule;
    if matches!(rule, KRule::Fixed(_)) {
        return Err(Error::Config("select_k requires a non-fixed K rule".into()));
    }
    let stop_early = rule == KRule::LikThreshold;
    let fits = fit_k_path(data, spec, spec.k_max, stop_early)?;
    let entries = path_entries(&fits);

    let chosen = match rule {
        KRule::LikThreshold => {
            let idx = pick_by_lik_threshold(&fits);
            let triggered = idx + 1 < fits.len();
            let mut fit = fits[idx].clone();
            if !triggered {
                fit.flags.push("k_max_reached_without_threshold".to_string());
            }
            fit
        }
        KRule::Aic => {
            let idx = (0..fits.len())
                .min_by(|&a, &b| fits[a].aic.partial_cmp(&fits[b].aic).unwrap())
                .unwrap();
            fits[idx].clone()
        }
        KRule::Bic => {
            let idx = (0..fits.len())
                .min_by(|&a, &b| fits[a].bic.partial_cmp(&fits[b].bic).unwrap())
                .unwrap();
            fits[idx].clone()
        }
        KRule::Fixed(_) => unreachable!(),
    };
    let mut out = chosen;
    out.k_path = entries;
    Ok(out)
}

/// Dispatch a mixture fit under the spec's K rule.
pub fn fit(data: &PanelDataset, spec: &ModelSpec) -> Result<FitResult> {
    match spec.k_rule {
        KRule::Fixed(k) => fit_em(data, spec, k),
        _ => select_k(data, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Link;

    fn fl_gauss() -> FamilyLink {
        FamilyLink::new(Family::Gaussian, Link::Identity).unwrap()
    }

    fn spec_gauss() -> ModelSpec {
        ModelSpec::new(Family::Gaussian, Link::Identity, Treatment::Fm)
    }

    fn tiny_panel() -> PanelDataset {
        // Single unit, single obs: y = 0, no covariates beyond intercept.
        PanelDataset::from_observations(
            vec!["u".into()],
            vec![0],
            vec![0.0],
            vec![vec![]],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn e_step_single_component_is_trivial() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "b".into()],
            vec![0, 0],
            vec![1.0, 2.0],
            vec![vec![1.0], vec![1.0]],
            vec!["one".into()],
        )
        .unwrap();
        let params = MixtureParams {
            beta: DVector::from_element(1, 1.5),
            zeta: DVector::from_element(1, 0.0),
            weights: WeightModel::Constant(DVector::from_element(1, 1.0)),
            sigma_e: Some(1.0),
        };
        let es = e_step(&data, &params, fl_gauss(), None).unwrap();
        assert!((es.tau[(0, 0)] - 1.0).abs() < 1e-15);
        let direct: f64 = [1.0_f64, 2.0]
            .iter()
            .map(|&y| fl_gauss().log_density(y, 1.5, Some(1.0)))
            .sum();
        assert!((es.loglik - direct).abs() < 1e-12);
    }

    #[test]
    fn e_step_symmetric_two_components() {
        // y = 0 at zeta = (-1, 1): both components equally likely; the
        // mixture density collapses to phi(1).
        let data = tiny_panel();
        let params = MixtureParams {
            beta: DVector::zeros(0),
            zeta: DVector::from_vec(vec![-1.0, 1.0]),
            weights: WeightModel::Constant(DVector::from_element(2, 0.5)),
            sigma_e: Some(1.0),
        };
        let es = e_step(&data, &params, fl_gauss(), None).unwrap();
        assert!((es.tau[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((es.tau[(0, 1)] - 0.5).abs() < 1e-12);
        assert!((es.loglik - (-1.4189385332046727)).abs() < 1e-10);
    }

    #[test]
    fn e_step_identical_components_split_posteriors() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into()],
            vec![0, 1],
            vec![0.3, -0.2],
            vec![vec![0.1], vec![0.4]],
            vec!["x".into()],
        )
        .unwrap();
        let params = MixtureParams {
            beta: DVector::from_element(1, 0.7),
            zeta: DVector::from_vec(vec![0.2, 0.2]),
            weights: WeightModel::Constant(DVector::from_element(2, 0.5)),
            sigma_e: Some(0.9),
        };
        let es = e_step(&data, &params, fl_gauss(), None).unwrap();
        assert!((es.tau[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn m_step_hard_assignment_matches_per_group_ols() {
        // Hard assignments with a common slope in both groups: the joint fit
        // reproduces what two separate per-group OLS regressions give.
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![0, 1, 0, 1],
            vec![0.5, 2.5, 5.5, 7.5],
            vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]],
            vec!["x".into()],
        )
        .unwrap();
        let mut tau = DMatrix::zeros(2, 2);
        tau[(0, 0)] = 1.0;
        tau[(1, 1)] = 1.0;
        let (beta, zeta, _) = m_step_locations_beta(&data, &tau, fl_gauss(), None, 25).unwrap();
        // Oracle: OLS of (0.5, 2.5) on (0, 1) and of (5.5, 7.5) on (0, 1)
        // give intercepts 0.5 and 5.5 with slope 2 in both groups.
        assert!((beta[0] - 2.0).abs() < 1e-10);
        assert!((zeta[0] - 0.5).abs() < 1e-10);
        assert!((zeta[1] - 5.5).abs() < 1e-10);
    }

    #[test]
    fn m_step_collapse_signal_on_empty_component() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "b".into()],
            vec![0, 0],
            vec![1.0, 2.0],
            vec![vec![1.0], vec![2.0]],
            vec!["x".into()],
        )
        .unwrap();
        let mut tau = DMatrix::zeros(2, 2);
        tau[(0, 0)] = 1.0;
        tau[(1, 0)] = 1.0;
        let err = m_step_locations_beta(&data, &tau, fl_gauss(), None, 25).unwrap_err();
        assert!(matches!(err, Error::ComponentCollapse(1)));
    }

    #[test]
    fn m_step_sigma_direct_arithmetic() {
        // Two units, hard assignment, residuals +-1 in each group.
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![0, 1, 0, 1],
            vec![-1.0, 1.0, 9.0, 11.0],
            vec![vec![], vec![], vec![], vec![]],
            vec![],
        )
        .unwrap();
        let mut tau = DMatrix::zeros(2, 2);
        tau[(0, 0)] = 1.0;
        tau[(1, 1)] = 1.0;
        let beta = DVector::zeros(0);
        let zeta = DVector::from_vec(vec![0.0, 10.0]);
        let s = m_step_sigma(&data, &tau, &beta, &zeta).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // Exact fit: degenerate signal.
        let data_exact = PanelDataset::from_observations(
            vec!["a".into(), "b".into()],
            vec![0, 0],
            vec![0.0, 10.0],
            vec![vec![], vec![]],
            vec![],
        )
        .unwrap();
        let mut tau1 = DMatrix::zeros(2, 2);
        tau1[(0, 0)] = 1.0;
        tau1[(1, 1)] = 1.0;
        let err = m_step_sigma(&data_exact, &tau1, &beta, &zeta).unwrap_err();
        assert!(matches!(err, Error::DegenerateSigma(_)));
    }

    #[test]
    fn constant_weights_are_column_means() {
        let tau = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let pi = m_step_weights_constant(&tau);
        assert!((pi[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((pi[1] - 1.0 / 3.0).abs() < 1e-15);

        let tau2 = DMatrix::from_row_slice(2, 2, &[0.3, 0.7, 0.3, 0.7]);
        let pi2 = m_step_weights_constant(&tau2);
        assert!((pi2[0] - 0.3).abs() < 1e-15);

        let tau3 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pi3 = m_step_weights_constant(&tau3);
        assert!((pi3[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn logit_weights_recover_known_model() {
        // tau generated from a K = 2 logistic model in xbar: gamma = (0, 1)
        // for component 1 (reference component 2 at zero).
        let n = 400;
        let mut wx = DMatrix::zeros(n, 2);
        let mut tau = DMatrix::zeros(n, 2);
        for i in 0..n {
            let xb = -2.0 + 4.0 * (i as f64) / (n as f64 - 1.0);
            wx[(i, 0)] = 1.0;
            wx[(i, 1)] = xb;
            let p1 = 1.0 / (1.0 + (-xb).exp());
            tau[(i, 0)] = p1;
            tau[(i, 1)] = 1.0 - p1;
        }
        let fit = m_step_weights_logit(&tau, &wx, None).unwrap();
        assert!(!fit.separation);
        assert!(fit.gamma[(0, 0)].abs() < 1e-6, "{}", fit.gamma[(0, 0)]);
        assert!((fit.gamma[(0, 1)] - 1.0).abs() < 1e-6, "{}", fit.gamma[(0, 1)]);
    }

    #[test]
    fn logit_weights_intercept_only_match_constant_masses() {
        let tau = DMatrix::from_row_slice(
            4,
            3,
            &[0.6, 0.3, 0.1, 0.2, 0.5, 0.3, 0.4, 0.4, 0.2, 0.5, 0.2, 0.3],
        );
        let wx = DMatrix::from_element(4, 1, 1.0); // q = 0
        let fit = m_step_weights_logit(&tau, &wx, None).unwrap();
        let pi = m_step_weights_constant(&tau);
        // softmax of the intercepts reproduces the closed-form masses.
        let logits = [fit.gamma[(0, 0)], fit.gamma[(1, 0)], 0.0];
        let lp = crate::numeric::log_softmax(&logits);
        for c in 0..3 {
            assert!((lp[c].exp() - pi[c]).abs() < 1e-8, "component {c}");
        }
    }

    #[test]
    fn logit_weights_no_signal_gives_zero_slopes() {
        let tau = DMatrix::from_row_slice(4, 2, &[0.7, 0.3, 0.7, 0.3, 0.7, 0.3, 0.7, 0.3]);
        let mut wx = DMatrix::zeros(4, 2);
        for i in 0..4 {
            wx[(i, 0)] = 1.0;
            wx[(i, 1)] = i as f64 - 1.5;
        }
        let fit = m_step_weights_logit(&tau, &wx, None).unwrap();
        assert!(fit.gamma[(0, 1)].abs() < 1e-6);
        assert!((fit.gamma[(0, 0)] - (0.7f64 / 0.3).ln()).abs() < 1e-6);
    }

    #[test]
    fn initialize_is_deterministic_and_spreads_quantiles() {
        // Two well-separated groups of unit means.
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for i in 0..10 {
            for t in 0..3 {
                ids.push(format!("u{i}"));
                time.push(t);
                y.push(if i < 5 { -4.0 } else { 4.0 });
                rows.push(vec![t as f64 * 0.5]);
            }
        }
        let data =
            PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()]).unwrap();
        let spec = spec_gauss();
        let frame = build_frame(&data, &spec).unwrap();
        let p0 = initialize(&frame, &spec, 2, 0).unwrap();
        let p1 = initialize(&frame, &spec, 2, 0).unwrap();
        assert_eq!(p0.zeta, p1.zeta);
        assert!(p0.zeta[0] < 0.0 && p0.zeta[1] > 0.0, "{:?}", p0.zeta);
        // Jittered starts differ from start 0 but are reproducible.
        let j1 = initialize(&frame, &spec, 2, 3).unwrap();
        let j2 = initialize(&frame, &spec, 2, 3).unwrap();
        assert_eq!(j1.zeta, j2.zeta);
        assert_ne!(j1.zeta, p0.zeta);

        // K = 1 is the plain GLM on every start index (no jitter).
        let g0 = initialize(&frame, &spec, 1, 0).unwrap();
        let g3 = initialize(&frame, &spec, 1, 3).unwrap();
        assert_eq!(g0.beta, g3.beta);
        assert_eq!(g0.zeta.len(), 1);
        assert_eq!(g0.zeta[0], 0.0);
    }

    #[test]
    fn fit_em_k1_equals_closed_form_ols() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into(), "b".into(), "b".into(), "c".into()],
            vec![0, 1, 0, 1, 0],
            vec![1.1, 1.9, 3.2, 4.1, 4.8],
            vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            vec!["x".into()],
        )
        .unwrap();
        let mut spec = spec_gauss();
        spec.polish = false;
        let fit = fit_em(&data, &spec, 1).unwrap();

        // Closed-form OLS with intercept.
        let x = DMatrix::from_fn(5, 2, |r, c| if c == 0 { 1.0 } else { data.x()[(r, 0)] });
        let y = data.y().clone();
        let xtx = x.transpose() * &x;
        let b = xtx.try_inverse().unwrap() * x.transpose() * &y;
        assert!((fit.params.beta[0] - b[0]).abs() < 1e-8);
        assert!((fit.params.beta[1] - b[1]).abs() < 1e-8);
        let resid = &y - &x * &b;
        let sig = (resid.dot(&resid) / 5.0).sqrt();
        assert!((fit.params.sigma_e.unwrap() - sig).abs() < 1e-8);
        assert_eq!(fit.npar, 3);
    }

    #[test]
    fn fit_em_recovers_two_well_separated_components() {
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        let mut rng = derive_rng(99, &[7]);
        for i in 0..40 {
            let center = if i % 2 == 0 { -3.0 } else { 3.0 };
            for t in 0..4 {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                ids.push(format!("u{i}"));
                time.push(t);
                rows.push(vec![x]);
                y.push(center + 0.5 * x + 0.3 * e);
            }
        }
        let data =
            PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()]).unwrap();
        let mut spec = spec_gauss();
        spec.n_starts = 3;
        spec.seed = 11;
        let fit = fit_em(&data, &spec, 2).unwrap();
        assert!(fit.converged);
        assert!((fit.params.zeta[0] + 3.0).abs() < 0.3, "{:?}", fit.params.zeta);
        assert!((fit.params.zeta[1] - 3.0).abs() < 0.3);
        assert!((fit.params.beta[0] - 0.5).abs() < 0.1);
        // Posterior rows sum to one.
        for i in 0..fit.tau.nrows() {
            let s: f64 = fit.tau.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-10);
        }
        // zeta sorted ascending.
        assert!(fit.params.zeta[0] <= fit.params.zeta[1]);
    }

    #[test]
    fn loglik_history_is_monotone() {
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        let mut rng = derive_rng(5, &[3]);
        for i in 0..30 {
            let center = if i % 3 == 0 { -2.0 } else { 1.0 };
            for t in 0..3 {
                let x: f64 = rng.sample(StandardNormal);
                let e: f64 = rng.sample(StandardNormal);
                ids.push(format!("u{i}"));
                time.push(t);
                rows.push(vec![x]);
                y.push(center + 0.4 * x + 0.5 * e);
            }
        }
        let data =
            PanelDataset::from_observations(ids, time, y, rows, vec!["x".into()]).unwrap();
        let spec = spec_gauss();
        let frame = build_frame(&data, &spec).unwrap();
        let out = run_em_start(&frame, &spec, 3, 0).unwrap();
        for w in out.history.windows(2) {
            assert!(w[1] >= w[0] - MONOTONICITY_SLACK, "{} -> {}", w[0], w[1]);
        }
        assert!(out.flags.iter().all(|f| !f.contains("monotonicity")));
    }
}
