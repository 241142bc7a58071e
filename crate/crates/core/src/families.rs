//! Exponential-family log-densities, link functions, and the weighted GLM
//! solver every M-step and comparator is built on.

use nalgebra::{DMatrix, DVector};

use crate::data::{Family, Link};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;
const SQRT_2: f64 = std::f64::consts::SQRT_2;
/// Linear predictor clamps beyond which tail probabilities saturate.
const LOGIT_CLAMP: f64 = 35.0;
const PROBIT_CLAMP: f64 = 8.0;

// Rational Chebyshev approximations for erf/erfc (Cody, Math. Comp. 1969);
// relative error below 1.2e-16 in double precision.
const ERF_A: [f64; 5] = [
    3.16112374387056560e0,
    1.13864154151050156e2,
    3.77485237685302021e2,
    3.20937758913846947e3,
    1.85777706184603153e-1,
];
const ERF_B: [f64; 4] = [
    2.36012909523441209e1,
    2.44024637934444173e2,
    1.28261652607737228e3,
    2.84423683343917062e3,
];
const ERF_C: [f64; 9] = [
    5.64188496988670089e-1,
    8.88314979438837594e0,
    6.61191906371416295e1,
    2.98635138197400131e2,
    8.81952221241769090e2,
    1.71204761263407058e3,
    2.05107837782607147e3,
    1.23033935479799725e3,
    2.15311535474403846e-8,
];
const ERF_D: [f64; 8] = [
    1.57449261107098347e1,
    1.17693950891312499e2,
    5.37181101862009858e2,
    1.62138957456669019e3,
    3.29079923573345963e3,
    4.36261909014324716e3,
    3.43936767414372164e3,
    1.23033935480374942e3,
];
const ERF_P: [f64; 6] = [
    3.05326634961232344e-1,
    3.60344899949804439e-1,
    1.25781726111229246e-1,
    1.60837851487422766e-2,
    6.58749161529837803e-4,
    1.63153871373020978e-2,
];
const ERF_Q: [f64; 5] = [
    2.56852019228982242e0,
    1.87295284992346047e0,
    5.27905102951428412e-1,
    6.05183413124413191e-2,
    2.33520497626869185e-3,
];
const INV_SQRT_PI: f64 = 5.6418958354775628695e-1;

fn erf_small(x: f64) -> f64 {
    // |x| <= 0.46875.
    let ysq = if x.abs() > 1e-300 { x * x } else { 0.0 };
    let mut xnum = ERF_A[4] * ysq;
    let mut xden = ysq;
    for i in 0..3 {
        xnum = (xnum + ERF_A[i]) * ysq;
        xden = (xden + ERF_B[i]) * ysq;
    }
    x * (xnum + ERF_A[3]) / (xden + ERF_B[3])
}

fn erfc_positive(ax: f64) -> f64 {
    // erfc on [0.46875, inf); the exp argument is split to keep full
    // precision in exp(-ax^2).
    if ax <= 4.0 {
        let mut xnum = ERF_C[8] * ax;
        let mut xden = ax;
        for i in 0..7 {
            xnum = (xnum + ERF_C[i]) * ax;
            xden = (xden + ERF_D[i]) * ax;
        }
        let r = (xnum + ERF_C[7]) / (xden + ERF_D[7]);
        let ysq = (ax * 16.0).trunc() / 16.0;
        let del = (ax - ysq) * (ax + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else if ax < 26.6 {
        let ysq = 1.0 / (ax * ax);
        let mut xnum = ERF_P[5] * ysq;
        let mut xden = ysq;
        for i in 0..4 {
            xnum = (xnum + ERF_P[i]) * ysq;
            xden = (xden + ERF_Q[i]) * ysq;
        }
        let mut r = ysq * (xnum + ERF_P[4]) / (xden + ERF_Q[4]);
        r = (INV_SQRT_PI - r) / ax;
        let ysq = (ax * 16.0).trunc() / 16.0;
        let del = (ax - ysq) * (ax + ysq);
        (-ysq * ysq).exp() * (-del).exp() * r
    } else {
        0.0
    }
}

/// Complementary error function (double precision, Cody's approximation).
pub fn erfc(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 0.46875 {
        1.0 - erf_small(x)
    } else if x > 0.0 {
        erfc_positive(ax)
    } else {
        2.0 - erfc_positive(ax)
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    if x.abs() <= 0.46875 {
        erf_small(x)
    } else if x > 0.0 {
        1.0 - erfc_positive(x)
    } else {
        erfc_positive(-x) - 1.0
    }
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x - 0.5 * LN_2PI).exp()
}

/// log Phi(x), stable into the lower tail.
#[inline]
pub fn log_normal_cdf(x: f64) -> f64 {
    if x < -1.0 {
        // erfc keeps full precision here; Phi underflows only below ~ -37.
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        // ln(1 - Phi(-x)) via log1p for accuracy near 1.
        (-(0.5 * erfc(x / SQRT_2))).ln_1p()
    }
}

/// Standard normal quantile function.
pub fn normal_cdf_inv(p: f64) -> f64 {
    use statrs::distribution::ContinuousCDF;
    let norm = statrs::distribution::Normal::new(0.0, 1.0).expect("standard normal");
    norm.inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16))
}

/// Inverse Mills ratio phi(x)/Phi(x), stable for large negative x.
#[inline]
pub fn mills_ratio(x: f64) -> f64 {
    if x < -30.0 {
        // Asymptotic expansion of the Gaussian tail.
        let z2 = x * x;
        -x / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2))
    } else {
        (normal_pdf(x).ln() - log_normal_cdf(x)).exp()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// A response family paired with a link function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FamilyLink {
    pub family: Family,
    pub link: Link,
}

impl FamilyLink {
    pub fn new(family: Family, link: Link) -> Result<Self> {
        match (family, link) {
            (Family::Gaussian, Link::Identity)
            | (Family::Bernoulli, Link::Logit)
            | (Family::Bernoulli, Link::Probit) => Ok(FamilyLink { family, link }),
            _ => Err(Error::Validation(format!(
                "link/family mismatch: {:?} link with {:?} family",
                link, family
            ))),
        }
    }

    /// Mean function g^{-1}(eta).
    #[inline]
    pub fn mean(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => eta,
            Link::Logit => sigmoid(eta),
            Link::Probit => normal_cdf(eta),
        }
    }

    /// d mu / d eta.
    #[inline]
    pub fn mean_deriv(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => 1.0,
            Link::Logit => {
                let m = sigmoid(eta);
                m * (1.0 - m)
            }
            Link::Probit => normal_pdf(eta),
        }
    }

    /// Variance function V(mu) (unit dispersion).
    #[inline]
    pub fn variance(&self, mu: f64) -> f64 {
        match self.family {
            Family::Gaussian => 1.0,
            Family::Bernoulli => (mu * (1.0 - mu)).max(1e-300),
        }
    }

    /// Log density of one observation at linear predictor `eta`.
    /// `sigma` must be supplied iff the family is Gaussian.
    #[inline]
    pub fn log_density(&self, y: f64, eta: f64, sigma: Option<f64>) -> f64 {
        match self.family {
            Family::Gaussian => {
                let s = sigma.expect("gaussian log_density needs sigma");
                let r = (y - eta) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * r * r
            }
            Family::Bernoulli => match self.link {
                Link::Logit => {
                    // y ln m + (1-y) ln(1-m) in log1p form.
                    let e = eta.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                    if y > 0.5 {
                        log_sigmoid(e)
                    } else {
                        log_sigmoid(-e)
                    }
                }
                Link::Probit => {
                    let e = eta.clamp(-PROBIT_CLAMP, PROBIT_CLAMP);
                    if y > 0.5 {
                        log_normal_cdf(e)
                    } else {
                        log_normal_cdf(-e)
                    }
                }
                Link::Identity => unreachable!("rejected by FamilyLink::new"),
            },
        }
    }

    /// Score of the log density with respect to eta.
    #[inline]
    pub fn score_eta(&self, y: f64, eta: f64, sigma: Option<f64>) -> f64 {
        match (self.family, self.link) {
            (Family::Gaussian, _) => {
                let s = sigma.expect("gaussian score needs sigma");
                (y - eta) / (s * s)
            }
            (Family::Bernoulli, Link::Logit) => y - sigmoid(eta),
            (Family::Bernoulli, Link::Probit) => {
                let e = eta.clamp(-PROBIT_CLAMP, PROBIT_CLAMP);
                if y > 0.5 {
                    mills_ratio(e)
                } else {
                    -mills_ratio(-e)
                }
            }
            _ => unreachable!(),
        }
    }

    /// Second derivative of the log density with respect to eta (observed).
    #[inline]
    pub fn curvature_eta(&self, y: f64, eta: f64, sigma: Option<f64>) -> f64 {
        match (self.family, self.link) {
            (Family::Gaussian, _) => {
                let s = sigma.expect("gaussian curvature needs sigma");
                -1.0 / (s * s)
            }
            (Family::Bernoulli, Link::Logit) => {
                let m = sigmoid(eta);
                -m * (1.0 - m)
            }
            (Family::Bernoulli, Link::Probit) => {
                let e = eta.clamp(-PROBIT_CLAMP, PROBIT_CLAMP);
                if y > 0.5 {
                    let r = mills_ratio(e);
                    -r * (e + r)
                } else {
                    let r = mills_ratio(-e);
                    -r * (r - e)
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Options for [`weighted_glm_fit`].
#[derive(Debug, Clone)]
pub struct GlmOptions {
    pub max_iter: usize,
    /// Max-abs score tolerance.
    pub tol: f64,
    /// Warm start coefficients.
    pub init: Option<DVector<f64>>,
}

impl Default for GlmOptions {
    fn default() -> Self {
        GlmOptions { max_iter: 50, tol: 1e-10, init: None }
    }
}

/// Weighted GLM fit.
#[derive(Debug, Clone)]
pub struct GlmFit {
    pub coef: DVector<f64>,
    pub converged: bool,
    /// Quasi-separation flag (|coef| ran beyond 30 on a Bernoulli fit).
    pub separation: bool,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Weighted log-likelihood at `coef` (sigma = 1 for Gaussian).
    pub objective: f64,
}

fn weighted_objective(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    offset: &DVector<f64>,
    fl: FamilyLink,
    beta: &DVector<f64>,
) -> f64 {
    let eta = x * beta + offset;
    let sigma = if fl.family == Family::Gaussian { Some(1.0) } else { None };
    let mut acc = crate::numeric::KahanSum::new();
    for j in 0..y.len() {
        if w[j] != 0.0 {
            acc.add(w[j] * fl.log_density(y[j], eta[j], sigma));
        }
    }
    acc.value()
}

fn score_vector(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    offset: &DVector<f64>,
    fl: FamilyLink,
    beta: &DVector<f64>,
) -> DVector<f64> {
    let eta = x * beta + offset;
    let sigma = if fl.family == Family::Gaussian { Some(1.0) } else { None };
    let mut g = DVector::zeros(x.ncols());
    for j in 0..y.len() {
        if w[j] != 0.0 {
            let s = w[j] * fl.score_eta(y[j], eta[j], sigma);
            for c in 0..x.ncols() {
                g[c] += s * x[(j, c)];
            }
        }
    }
    g
}

/// Solve the weighted normal equations `(X' diag(w) X) b = X' diag(w) z`.
/// On rank deficiency the collinear columns are identified with a
/// column-pivoted QR of the weighted design.
fn solve_weighted_ls(
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwz = DVector::zeros(p);
    for j in 0..x.nrows() {
        let wj = w[j];
        if wj == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(j, a)];
            if xa == 0.0 {
                continue;
            }
            let wxa = wj * xa;
            xtwz[a] += wxa * z[j];
            for b in a..p {
                xtwx[(a, b)] += wxa * x[(j, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    match xtwx.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&xtwz)),
        None => {
            // Identify the dependent columns of sqrt(w)*X.
            let mut xs = x.clone();
            for j in 0..x.nrows() {
                let s = w[j].max(0.0).sqrt();
                for c in 0..p {
                    xs[(j, c)] *= s;
                }
            }
            let qr = xs.col_piv_qr();
            let r = qr.r();
            // Track where each original column landed under the pivoting.
            let mut idx = nalgebra::RowDVector::from_fn(p, |_, c| c as f64);
            qr.p().permute_columns(&mut idx);
            let scale = r[(0, 0)].abs().max(1e-300);
            let mut bad = Vec::new();
            for c in 0..p {
                if c >= r.nrows() || r[(c, c)].abs() < 1e-10 * scale {
                    bad.push(idx[c] as usize);
                }
            }
            bad.sort_unstable();
            Err(Error::Singular {
                columns: bad,
                detail: "weighted normal equations are not positive definite".into(),
            })
        }
    }
}

/// Maximize `sum_j w_j log f(y_j | offset_j + x_j' beta)`.
///
/// Identity link solves the weighted least squares directly; logit/probit run
/// Fisher-scoring IRLS with step-halving so the objective never decreases.
pub fn weighted_glm_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    w: &DVector<f64>,
    offset: &DVector<f64>,
    fl: FamilyLink,
    opts: &GlmOptions,
) -> Result<GlmFit> {
    let n = y.len();
    if x.nrows() != n || w.len() != n || offset.len() != n {
        return Err(Error::Validation("weighted_glm_fit: dimension mismatch".into()));
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) {
        return Err(Error::Validation("weighted_glm_fit: weights sum to zero".into()));
    }
    if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Validation("weighted_glm_fit: negative or non-finite weight".into()));
    }

    if fl.link == Link::Identity {
        let z = y - offset;
        let coef = solve_weighted_ls(x, w, &z)?;
        let g = score_vector(y, x, w, offset, fl, &coef);
        let grad_norm = crate::numeric::max_abs(&g);
        let objective = weighted_objective(y, x, w, offset, fl, &coef);
        return Ok(GlmFit { coef, converged: true, separation: false, iterations: 1, grad_norm, objective });
    }

    let p = x.ncols();
    let mut beta = opts.init.clone().unwrap_or_else(|| DVector::zeros(p));
    let mut obj = weighted_objective(y, x, w, offset, fl, &beta);
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let eta = x * &beta + offset;
        let mut wj = DVector::zeros(n);
        let mut z = DVector::zeros(n);
        for j in 0..n {
            if w[j] == 0.0 {
                continue;
            }
            let mu = fl.mean(eta[j]);
            let md = fl.mean_deriv(eta[j]);
            let v = fl.variance(mu);
            // A saturated observation (mu at 0 or 1 in floating point)
            // carries no curvature; skipping it avoids 0/0 weight blowups.
            if md < 1e-280 || v < 1e-280 {
                continue;
            }
            wj[j] = w[j] * md * md / v;
            z[j] = (eta[j] - offset[j]) + (y[j] - mu) / md;
        }
        let proposal = match solve_weighted_ls(x, &wj, &z) {
            Ok(b) => b,
            // Working weights can underflow to zero once a separated fit
            // saturates; keep the current coefficients and stop.
            Err(Error::Singular { .. }) if iter > 0 => break,
            Err(e) => return Err(e),
        };

        // Step-halving keeps the weighted objective non-decreasing.
        let mut step = 1.0;
        let mut accepted = beta.clone();
        let mut accepted_obj = obj;
        for _ in 0..30 {
            let cand = &beta + (&proposal - &beta) * step;
            let cand_obj = weighted_objective(y, x, w, offset, fl, &cand);
            if cand_obj.is_finite() && cand_obj >= obj - 1e-12 {
                accepted = cand;
                accepted_obj = cand_obj;
                break;
            }
            step *= 0.5;
        }
        beta = accepted;
        obj = accepted_obj;

        let g = score_vector(y, x, w, offset, fl, &beta);
        grad_norm = crate::numeric::max_abs(&g);
        if grad_norm <= opts.tol {
            break;
        }
    }

    let separation = crate::numeric::max_abs(&beta) > 30.0;
    let converged = grad_norm <= opts.tol || separation;
    Ok(GlmFit { coef: beta, converged, separation, iterations, grad_norm, objective: obj })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LOG_PHI_1: f64 = -1.4189385332046727;

    fn fl(family: Family, link: Link) -> FamilyLink {
        FamilyLink::new(family, link).unwrap()
    }

    #[test]
    fn gaussian_log_density_at_zero() {
        let g = fl(Family::Gaussian, Link::Identity);
        // -0.5 log(2 pi)
        assert!((g.log_density(0.0, 0.0, Some(1.0)) + 0.9189385332046727).abs() < 1e-12);
        assert!((g.log_density(0.0, 1.0, Some(1.0)) - LOG_PHI_1).abs() < 1e-12);
    }

    #[test]
    fn logit_log_density_symmetric_point() {
        let b = fl(Family::Bernoulli, Link::Logit);
        assert!((b.log_density(1.0, 0.0, None) - 0.5_f64.ln()).abs() < 1e-12);
        assert!((b.log_density(0.0, 0.0, None) - 0.5_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probit_log_density_matches_cdf_table_value() {
        let b = fl(Family::Bernoulli, Link::Probit);
        // Phi(1.959964) = 0.975: log density of a success is ln 0.975.
        let got = b.log_density(1.0, 1.959964, None);
        assert!((got - (-0.025317807984289897)).abs() < 1e-6, "{got}");
    }

    #[test]
    fn probit_cdf_accuracy_on_grid() {
        // Reference values computed with 40-digit arithmetic; the spec bound
        // is absolute error <= 1e-12 over [-8, 8].
        let reference = [
            (-8.0, 6.220960574271784e-16),
            (-5.5, 1.8989562465887718e-08),
            (-4.0, 3.1671241833119924e-05),
            (-2.0, 0.02275013194817921),
            (-1.0, 0.15865525393145705),
            (-0.3, 0.3820885778110474),
            (0.0, 0.5),
            (0.5, 0.6914624612740131),
            (1.0, 0.8413447460685429),
            (1.959964, 0.9750000009035577),
            (3.0, 0.9986501019683699),
            (6.0, 0.9999999990134123),
            (8.0, 0.9999999999999993),
        ];
        for (x, expect) in reference {
            let got = normal_cdf(x);
            assert!((got - expect).abs() <= 1e-13, "Phi({x}) = {got:e} vs {expect:e}");
        }
        // Complementarity across the grid.
        for i in 0..=160 {
            let x = -8.0 + 0.1 * i as f64;
            let p = normal_cdf(x);
            assert!((p + normal_cdf(-x) - 1.0).abs() < 1e-14);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn log_density_concave_in_eta() {
        // Second central difference non-positive on a grid (up to noise).
        for link in [Link::Identity, Link::Logit, Link::Probit] {
            let family = if link == Link::Identity { Family::Gaussian } else { Family::Bernoulli };
            let f = fl(family, link);
            let sigma = if family == Family::Gaussian { Some(1.3) } else { None };
            for y in [0.0, 1.0] {
                let h = 1e-4;
                let mut eta = -5.0;
                while eta <= 5.0 {
                    let d2 = f.log_density(y, eta + h, sigma) - 2.0 * f.log_density(y, eta, sigma)
                        + f.log_density(y, eta - h, sigma);
                    assert!(d2 / (h * h) <= 1e-8, "link {link:?} y {y} eta {eta}: {d2}");
                    eta += 0.25;
                }
            }
        }
    }

    #[test]
    fn probit_curvature_matches_finite_difference() {
        let b = fl(Family::Bernoulli, Link::Probit);
        for y in [0.0, 1.0] {
            for eta in [-3.0, -0.7, 0.0, 1.3, 4.0] {
                let h = 1e-5;
                let fd = (b.log_density(y, eta + h, None) - 2.0 * b.log_density(y, eta, None)
                    + b.log_density(y, eta - h, None))
                    / (h * h);
                let an = b.curvature_eta(y, eta, None);
                assert!((fd - an).abs() < 1e-4, "y {y} eta {eta}: fd {fd} an {an}");
            }
        }
    }

    #[test]
    fn wls_recovers_weighted_mean() {
        let g = fl(Family::Gaussian, Link::Identity);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x = DMatrix::from_element(3, 1, 1.0);
        let w = DVector::from_element(3, 1.0);
        let off = DVector::zeros(3);
        let fit = weighted_glm_fit(&y, &x, &w, &off, g, &GlmOptions::default()).unwrap();
        assert!((fit.coef[0] - 2.0).abs() < 1e-12);

        // Zero weight drops the middle point: mean of (1, 3) = 2.
        let y2 = DVector::from_vec(vec![1.0, 5.0, 3.0]);
        let w2 = DVector::from_vec(vec![1.0, 0.0, 1.0]);
        let fit2 = weighted_glm_fit(&y2, &x, &w2, &off, g, &GlmOptions::default()).unwrap();
        assert!((fit2.coef[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn logit_intercept_matches_log_odds() {
        let b = fl(Family::Bernoulli, Link::Logit);
        let y = DVector::from_vec(vec![1.0, 1.0, 1.0, 0.0]);
        let x = DMatrix::from_element(4, 1, 1.0);
        let w = DVector::from_element(4, 1.0);
        let off = DVector::zeros(4);
        let fit = weighted_glm_fit(&y, &x, &w, &off, b, &GlmOptions::default()).unwrap();
        assert!(fit.converged);
        assert!((fit.coef[0] - 3.0_f64.ln()).abs() < 1e-8, "{}", fit.coef[0]);
    }

    #[test]
    fn converged_fit_has_tiny_finite_difference_score() {
        let b = fl(Family::Bernoulli, Link::Probit);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
        let x = DMatrix::from_fn(6, 2, |r, c| if c == 0 { 1.0 } else { r as f64 - 2.5 });
        let w = DVector::from_vec(vec![1.0, 0.5, 2.0, 1.0, 1.5, 1.0]);
        let off = DVector::from_fn(6, |r, _| 0.1 * r as f64);
        let fit = weighted_glm_fit(&y, &x, &w, &off, b, &GlmOptions::default()).unwrap();
        assert!(fit.converged);
        // Finite differences of the weighted objective around the optimum.
        let h = 1e-6;
        for c in 0..2 {
            let mut up = fit.coef.clone();
            up[c] += h;
            let mut dn = fit.coef.clone();
            dn[c] -= h;
            let fd = (weighted_objective(&y, &x, &w, &off, b, &up)
                - weighted_objective(&y, &x, &w, &off, b, &dn))
                / (2.0 * h);
            assert!(fd.abs() < 1e-8 + 1e-6, "score along {c}: {fd}");
        }
    }

    #[test]
    fn fit_invariant_to_weight_rescaling() {
        let b = fl(Family::Bernoulli, Link::Logit);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0, 1.0]);
        let x = DMatrix::from_fn(5, 2, |r, c| if c == 0 { 1.0 } else { (r as f64).sin() });
        let w1 = DVector::from_vec(vec![1.0, 2.0, 0.5, 1.5, 1.0]);
        let w2 = &w1 * 7.25;
        let off = DVector::zeros(5);
        let f1 = weighted_glm_fit(&y, &x, &w1, &off, b, &GlmOptions::default()).unwrap();
        let f2 = weighted_glm_fit(&y, &x, &w2, &off, b, &GlmOptions::default()).unwrap();
        assert!((&f1.coef - &f2.coef).amax() < 1e-10);
    }

    #[test]
    fn collinear_columns_are_named() {
        let g = fl(Family::Gaussian, Link::Identity);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        // Column 2 = 2 * column 1.
        let x = DMatrix::from_fn(4, 3, |r, c| match c {
            0 => 1.0,
            1 => r as f64,
            _ => 2.0 * r as f64,
        });
        let w = DVector::from_element(4, 1.0);
        let off = DVector::zeros(4);
        let err = weighted_glm_fit(&y, &x, &w, &off, g, &GlmOptions::default()).unwrap_err();
        match err {
            Error::Singular { columns, .. } => {
                assert!(columns.contains(&1) || columns.contains(&2), "{columns:?}");
            }
            other => panic!("expected Singular, got {other}"),
        }
    }

    #[test]
    fn separation_is_flagged_not_an_error() {
        let b = fl(Family::Bernoulli, Link::Logit);
        // Perfectly separated data.
        let y = DVector::from_vec(vec![0.0, 0.0, 1.0, 1.0]);
        let x = DMatrix::from_fn(4, 2, |r, c| if c == 0 { 1.0 } else { r as f64 - 1.5 });
        let w = DVector::from_element(4, 1.0);
        let off = DVector::zeros(4);
        let fit = weighted_glm_fit(&y, &x, &w, &off, b, &GlmOptions { max_iter: 200, ..Default::default() }).unwrap();
        assert!(fit.separation);
    }
}
