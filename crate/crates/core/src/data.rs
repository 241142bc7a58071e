//! Domain data model: longitudinal samples, model specifications, and fit
//! results shared by every estimator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Response family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Bernoulli,
}

/// Link function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Probit,
}

/// How covariate/random-effect dependence is treated.
///
/// * `Fm`    — plain finite-mixture random intercept.
/// * `FmQp`  — finite mixture on the within/between (QP) design.
/// * `Cov`   — finite mixture with covariate-dependent weights.
/// * `Par`   — parametric Gaussian random intercept (adaptive quadrature).
/// * `ParQp` — `Par` on the QP design.
/// * `Fe`    — fixed effects (demeaning for Gaussian, unit dummies for probit).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Treatment {
    Fm,
    FmQp,
    Cov,
    Par,
    ParQp,
    Fe,
}

impl Treatment {
    pub fn is_mixture(self) -> bool {
        matches!(self, Treatment::Fm | Treatment::FmQp | Treatment::Cov)
    }
}

/// Rule for choosing the number of mixture components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KRule {
    /// Use exactly this number of components.
    Fixed(usize),
    /// Stop at K once loglik(K+1) - loglik(K) < 1e-7 * npar(K).
    LikThreshold,
    Aic,
    Bic,
}

/// Full model specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    pub treatment: Treatment,
    pub k_rule: KRule,
    /// Largest K tried when `k_rule` is not `Fixed`.
    pub k_max: usize,
    /// Covariates entering the weight model (`Cov` only). `None` selects the
    /// unit means of all time-varying design columns.
    pub weight_covariates: Option<Vec<String>>,
    /// Absolute log-likelihood change that stops the EM.
    pub em_tol: f64,
    pub max_iter: usize,
    pub n_starts: usize,
    pub seed: u64,
    /// Gauss-Hermite node count for the parametric comparators.
    pub quadrature_nodes: usize,
    /// Quasi-Newton refinement of the winning EM start, sharpening the
    /// score at the reported optimum.
    pub polish: bool,
}

impl ModelSpec {
    pub fn new(family: Family, link: Link, treatment: Treatment) -> Self {
        ModelSpec {
            family,
            link,
            treatment,
            k_rule: KRule::Fixed(1),
            k_max: 6,
            weight_covariates: None,
            em_tol: 1e-8,
            max_iter: 500,
            n_starts: 10,
            seed: 0,
            quadrature_nodes: 15,
            polish: true,
        }
    }

    /// Number of free parameters of a fitted mixture with `K` components,
    /// `p` design columns and `q` weight covariates.
    ///
    /// `p` counts the columns the linear predictor actually uses: for K = 1
    /// that includes the intercept; for K >= 2 the intercept is absorbed by
    /// the component locations and `p` counts slopes only.
    pub fn npar(&self, k: usize, p: usize, q: usize) -> usize {
        let sigma = usize::from(self.family == Family::Gaussian);
        if k == 1 {
            return p + sigma;
        }
        let weights = match self.treatment {
            Treatment::Cov => (k - 1) * (q + 1),
            _ => k - 1,
        };
        p + k + weights + sigma
    }
}

/// An unbalanced longitudinal sample stored observation-major with a unit
/// index; observations of a unit are contiguous and sorted by time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    obs_unit: Vec<usize>,
    unit_offsets: Vec<usize>,
    y: DVector<f64>,
    x: DMatrix<f64>,
    covariate_names: Vec<String>,
    time_index: Vec<i64>,
    intercept_col: Option<usize>,
}

impl PanelDataset {
    /// Build a panel from per-observation records. Units keep their first
    /// appearance order and are re-indexed 0..n-1; observations are sorted by
    /// time within unit (stable).
    pub fn from_observations(
        ids: Vec<String>,
        time: Vec<i64>,
        y: Vec<f64>,
        x_rows: Vec<Vec<f64>>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n_obs = ids.len();
        if n_obs == 0 {
            return Err(Error::Validation("empty panel: no observations".into()));
        }
        if time.len() != n_obs || y.len() != n_obs || x_rows.len() != n_obs {
            return Err(Error::Validation(format!(
                "inconsistent lengths: ids {}, time {}, y {}, x {}",
                n_obs,
                time.len(),
                y.len(),
                x_rows.len()
            )));
        }
        let p = covariate_names.len();
        for (i, row) in x_rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::Validation(format!(
                    "row {} has {} covariates, expected {}",
                    i,
                    row.len(),
                    p
                )));
            }
        }

        // First-appearance unit order.
        let mut unit_ids: Vec<String> = Vec::new();
        let mut unit_of: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for id in &ids {
            if !unit_of.contains_key(id.as_str()) {
                unit_of.insert(id.as_str(), unit_ids.len());
                unit_ids.push(id.clone());
            }
        }
        let n = unit_ids.len();

        let mut order: Vec<usize> = (0..n_obs).collect();
        order.sort_by_key(|&i| (unit_of[ids[i].as_str()], time[i]));

        let mut obs_unit = Vec::with_capacity(n_obs);
        let mut yy = Vec::with_capacity(n_obs);
        let mut tt = Vec::with_capacity(n_obs);
        let mut x = DMatrix::zeros(n_obs, p);
        for (r, &i) in order.iter().enumerate() {
            obs_unit.push(unit_of[ids[i].as_str()]);
            yy.push(y[i]);
            tt.push(time[i]);
            for j in 0..p {
                x[(r, j)] = x_rows[i][j];
            }
        }
        let mut unit_offsets = vec![0usize; n + 1];
        for &u in &obs_unit {
            unit_offsets[u + 1] += 1;
        }
        for i in 0..n {
            unit_offsets[i + 1] += unit_offsets[i];
        }

        Ok(PanelDataset {
            unit_ids,
            obs_unit,
            unit_offsets,
            y: DVector::from_vec(yy),
            x,
            covariate_names,
            time_index: tt,
            intercept_col: None,
        })
    }

    /// Construct directly from pre-grouped parts (internal transforms).
    pub(crate) fn from_parts(
        unit_ids: Vec<String>,
        obs_unit: Vec<usize>,
        unit_offsets: Vec<usize>,
        y: DVector<f64>,
        x: DMatrix<f64>,
        covariate_names: Vec<String>,
        time_index: Vec<i64>,
        intercept_col: Option<usize>,
    ) -> Self {
        PanelDataset {
            unit_ids,
            obs_unit,
            unit_offsets,
            y,
            x,
            covariate_names,
            time_index,
            intercept_col,
        }
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn obs_unit(&self) -> &[usize] {
        &self.obs_unit
    }

    /// Observation range (contiguous) of unit `i`.
    pub fn unit_range(&self, i: usize) -> std::ops::Range<usize> {
        self.unit_offsets[i]..self.unit_offsets[i + 1]
    }

    pub fn t_i(&self, i: usize) -> usize {
        self.unit_offsets[i + 1] - self.unit_offsets[i]
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn time_index(&self) -> &[i64] {
        &self.time_index
    }

    pub fn intercept_col(&self) -> Option<usize> {
        self.intercept_col
    }

    /// True iff all units share the same number of occasions.
    pub fn balanced(&self) -> bool {
        let t0 = self.t_i(0);
        (1..self.n_units()).all(|i| self.t_i(i) == t0)
    }

    /// Copy with an intercept column of ones prepended (no-op if present).
    pub fn with_intercept(&self) -> PanelDataset {
        if self.intercept_col.is_some() {
            return self.clone();
        }
        let n_obs = self.n_obs();
        let p = self.n_covariates();
        let mut x = DMatrix::zeros(n_obs, p + 1);
        for r in 0..n_obs {
            x[(r, 0)] = 1.0;
            for j in 0..p {
                x[(r, j + 1)] = self.x[(r, j)];
            }
        }
        let mut names = vec!["intercept".to_string()];
        names.extend(self.covariate_names.iter().cloned());
        let mut out = self.clone();
        out.x = x;
        out.covariate_names = names;
        out.intercept_col = Some(0);
        out
    }

    /// Copy keeping only the selected design columns.
    pub fn select_columns(&self, cols: &[usize]) -> PanelDataset {
        let n_obs = self.n_obs();
        let mut x = DMatrix::zeros(n_obs, cols.len());
        let mut names = Vec::with_capacity(cols.len());
        let mut intercept = None;
        for (jj, &j) in cols.iter().enumerate() {
            for r in 0..n_obs {
                x[(r, jj)] = self.x[(r, j)];
            }
            names.push(self.covariate_names[j].clone());
            if self.intercept_col == Some(j) {
                intercept = Some(jj);
            }
        }
        let mut out = self.clone();
        out.x = x;
        out.covariate_names = names;
        out.intercept_col = intercept;
        out
    }

    /// Copy without the intercept column (no-op if absent).
    pub fn without_intercept(&self) -> PanelDataset {
        match self.intercept_col {
            None => self.clone(),
            Some(ic) => {
                let cols: Vec<usize> = (0..self.n_covariates()).filter(|&j| j != ic).collect();
                self.select_columns(&cols)
            }
        }
    }

    /// Copy with every unit duplicated (fresh ids for the copies). Used by
    /// scaling checks on the information matrix.
    pub fn duplicate_units(&self) -> PanelDataset {
        let n = self.n_units();
        let mut ids = Vec::new();
        let mut time = Vec::new();
        let mut y = Vec::new();
        let mut rows = Vec::new();
        for copy in 0..2 {
            for i in 0..n {
                for r in self.unit_range(i) {
                    ids.push(format!("{}#{}", self.unit_ids[i], copy));
                    time.push(self.time_index[r]);
                    y.push(self.y[r]);
                    rows.push(self.x.row(r).iter().cloned().collect());
                }
            }
        }
        let mut out =
            PanelDataset::from_observations(ids, time, y, rows, self.covariate_names.clone())
                .expect("duplicate of a valid panel is valid");
        out.intercept_col = self.intercept_col;
        out
    }
}

/// Validate a dataset/specification pair. Returns normally iff all joint
/// invariants hold.
pub fn validate(data: &PanelDataset, spec: &ModelSpec) -> Result<()> {
    for i in 0..data.n_units() {
        if data.t_i(i) == 0 {
            return Err(Error::Validation(format!(
                "unit '{}' has zero observations",
                data.unit_ids()[i]
            )));
        }
    }
    for (r, v) in data.y().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation(format!("non-finite response at row {}", r)));
        }
    }
    for r in 0..data.n_obs() {
        for j in 0..data.n_covariates() {
            if !data.x()[(r, j)].is_finite() {
                return Err(Error::Validation(format!(
                    "non-finite covariate '{}' at row {}",
                    data.covariate_names()[j],
                    r
                )));
            }
        }
    }
    match (spec.family, spec.link) {
        (Family::Gaussian, Link::Identity) => {}
        (Family::Bernoulli, Link::Logit) | (Family::Bernoulli, Link::Probit) => {}
        (f, l) => {
            return Err(Error::Validation(format!(
                "link/family mismatch: {:?} link with {:?} family",
                l, f
            )));
        }
    }
    if spec.family == Family::Bernoulli {
        for (r, v) in data.y().iter().enumerate() {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::Validation(format!(
                    "non-binary response {} at row {} under Bernoulli family",
                    v, r
                )));
            }
        }
    }
    if let KRule::Fixed(k) = spec.k_rule {
        if k == 0 {
            return Err(Error::Validation("K must be >= 1".into()));
        }
    } else {
        if spec.k_max == 0 {
            return Err(Error::Validation("k_max must be >= 1".into()));
        }
        if spec.treatment == Treatment::Cov && spec.k_max < 2 {
            return Err(Error::Validation(
                "COV with a searched K requires k_max >= 2".into(),
            ));
        }
    }
    if spec.n_starts == 0 || spec.max_iter == 0 {
        return Err(Error::Validation("n_starts and max_iter must be >= 1".into()));
    }
    if !(spec.em_tol > 0.0) {
        return Err(Error::Validation("em_tol must be positive".into()));
    }
    if spec.quadrature_nodes < 2 {
        return Err(Error::Validation("quadrature_nodes must be >= 2".into()));
    }
    Ok(())
}

/// Mixture weight parameterization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum WeightModel {
    /// Shared masses on the K-simplex.
    Constant(DVector<f64>),
    /// Multinomial-logit weights: row l (l = 1..K-1) holds the coefficients
    /// of component l on [1 | weight covariates]; component K is the
    /// reference with an implicit zero row.
    Logistic(DMatrix<f64>),
}

/// Parameters of a fitted mixture (or degenerate K = 1 GLM).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureParams {
    pub beta: DVector<f64>,
    /// Component locations, sorted ascending. `[0]` when K = 1.
    pub zeta: DVector<f64>,
    pub weights: WeightModel,
    /// Residual SD (Gaussian only).
    pub sigma_e: Option<f64>,
}

impl MixtureParams {
    pub fn k(&self) -> usize {
        self.zeta.len()
    }

    /// Mixture weights for unit `i` given its weight covariate row (with
    /// leading 1). Constant weights ignore the row.
    pub fn unit_log_weights(&self, weight_row: Option<&[f64]>) -> Vec<f64> {
        match &self.weights {
            WeightModel::Constant(pi) => pi.iter().map(|p| p.max(1e-300).ln()).collect(),
            WeightModel::Logistic(gamma) => {
                let row = weight_row.expect("logistic weights need covariates");
                let k = self.k();
                let mut logits = vec![0.0; k];
                for l in 0..k - 1 {
                    let mut s = 0.0;
                    for (j, &v) in row.iter().enumerate() {
                        s += gamma[(l, j)] * v;
                    }
                    logits[l] = s;
                }
                crate::numeric::log_softmax(&logits)
            }
        }
    }
}

/// Bijection between a `MixtureParams` value and an unconstrained real
/// vector: beta | zeta (K >= 2) | weight block | ln sigma_e.
///
/// Constant weights map to the (K-1)-dimensional multinomial logit
/// `ln(pi_k / pi_K)`; logistic weights are already free. The layout dimension
/// equals the free-parameter count of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub p: usize,
    pub k: usize,
    /// Weight covariate count (logistic weights only).
    pub q: Option<usize>,
    pub gaussian: bool,
}

impl ParamLayout {
    pub fn of(params: &MixtureParams) -> Self {
        let q = match &params.weights {
            WeightModel::Constant(_) => None,
            WeightModel::Logistic(g) => Some(g.ncols() - 1),
        };
        ParamLayout {
            p: params.beta.len(),
            k: params.k(),
            q,
            gaussian: params.sigma_e.is_some(),
        }
    }

    pub fn dim(&self) -> usize {
        let sigma = usize::from(self.gaussian);
        if self.k == 1 {
            return self.p + sigma;
        }
        let weights = match self.q {
            None => self.k - 1,
            Some(q) => (self.k - 1) * (q + 1),
        };
        self.p + self.k + weights + sigma
    }

    pub fn pack(&self, params: &MixtureParams) -> DVector<f64> {
        let mut theta = Vec::with_capacity(self.dim());
        theta.extend(params.beta.iter());
        if self.k >= 2 {
            theta.extend(params.zeta.iter());
            match &params.weights {
                WeightModel::Constant(pi) => {
                    let ref_lp = pi[self.k - 1].max(1e-300).ln();
                    for k in 0..self.k - 1 {
                        theta.push(pi[k].max(1e-300).ln() - ref_lp);
                    }
                }
                WeightModel::Logistic(g) => {
                    for l in 0..g.nrows() {
                        for j in 0..g.ncols() {
                            theta.push(g[(l, j)]);
                        }
                    }
                }
            }
        }
        if let Some(s) = params.sigma_e {
            theta.push(s.ln());
        }
        DVector::from_vec(theta)
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> MixtureParams {
        assert_eq!(theta.len(), self.dim());
        let beta = DVector::from_fn(self.p, |j, _| theta[j]);
        let mut pos = self.p;
        let (zeta, weights) = if self.k == 1 {
            (DVector::from_element(1, 0.0), WeightModel::Constant(DVector::from_element(1, 1.0)))
        } else {
            let zeta = DVector::from_fn(self.k, |k, _| theta[pos + k]);
            pos += self.k;
            let weights = match self.q {
                None => {
                    let mut logits = vec![0.0; self.k];
                    for k in 0..self.k - 1 {
                        logits[k] = theta[pos + k];
                    }
                    let lp = crate::numeric::log_softmax(&logits);
                    WeightModel::Constant(DVector::from_fn(self.k, |k, _| lp[k].exp()))
                }
                Some(q) => {
                    let mut g = DMatrix::zeros(self.k - 1, q + 1);
                    for l in 0..self.k - 1 {
                        for j in 0..q + 1 {
                            g[(l, j)] = theta[pos];
                            pos += 1;
                        }
                    }
                    WeightModel::Logistic(g)
                }
            };
            (zeta, weights)
        };
        let sigma_e = if self.gaussian { Some(theta[theta.len() - 1].exp()) } else { None };
        MixtureParams { beta, zeta, weights, sigma_e }
    }

    /// Human-readable names for each packed coordinate.
    pub fn names(&self, beta_names: &[String], weight_names: &[String]) -> Vec<String> {
        let mut out: Vec<String> = beta_names.to_vec();
        if self.k >= 2 {
            for k in 0..self.k {
                out.push(format!("zeta{}", k + 1));
            }
            match self.q {
                None => {
                    for k in 0..self.k - 1 {
                        out.push(format!("logit_pi{}", k + 1));
                    }
                }
                Some(q) => {
                    for l in 0..self.k - 1 {
                        out.push(format!("w:comp{}:intercept", l + 1));
                        for j in 0..q {
                            out.push(format!("w:comp{}:{}", l + 1, weight_names[j]));
                        }
                    }
                }
            }
        }
        if self.gaussian {
            out.push("log_sigma_e".to_string());
        }
        out
    }
}

/// Per-K summary recorded during a K search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KPathEntry {
    pub k: usize,
    pub loglik: f64,
    pub npar: usize,
    pub aic: f64,
    pub bic: f64,
}

/// Method tag for a standard-error column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    Observed,
    Sandwich,
}

/// Converged estimation result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MixtureParams,
    /// Names of the design columns `params.beta` refers to.
    pub beta_names: Vec<String>,
    pub loglik: f64,
    pub npar: usize,
    pub aic: f64,
    pub bic: f64,
    /// n x K posterior membership probabilities.
    pub tau: DMatrix<f64>,
    pub se: Option<crate::inference::SeReport>,
    pub converged: bool,
    pub iterations: usize,
    pub k_path: Vec<KPathEntry>,
    pub start_index: usize,
    /// Random-effect SD of the parametric comparators.
    pub sigma_u: Option<f64>,
    pub flags: Vec<String>,
}

impl FitResult {
    /// Estimate of the named design coefficient, if present.
    pub fn coef(&self, name: &str) -> Option<f64> {
        self.beta_names
            .iter()
            .position(|n| n == name)
            .map(|j| self.params.beta[j])
    }
}

/// Information criteria from (loglik, npar, n units).
pub fn information_criteria(loglik: f64, npar: usize, n_units: usize) -> (f64, f64) {
    let aic = -2.0 * loglik + 2.0 * npar as f64;
    let bic = -2.0 * loglik + (n_units as f64).ln() * npar as f64;
    (aic, bic)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_gaussian() -> PanelDataset {
        PanelDataset::from_observations(
            vec!["a".into(), "a".into(), "b".into(), "b".into()],
            vec![1, 2, 1, 2],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![0.5], vec![1.5], vec![2.5], vec![3.5]],
            vec!["x".into()],
        )
        .unwrap()
    }

    fn gaussian_spec() -> ModelSpec {
        ModelSpec::new(Family::Gaussian, Link::Identity, Treatment::Fm)
    }

    #[test]
    fn validate_accepts_well_formed_gaussian_panel() {
        validate(&toy_gaussian(), &gaussian_spec()).unwrap();
    }

    #[test]
    fn validate_rejects_non_binary_bernoulli_response() {
        let data = PanelDataset::from_observations(
            vec!["a".into(), "a".into()],
            vec![1, 2],
            vec![0.5, 1.0],
            vec![vec![0.0], vec![1.0]],
            vec!["x".into()],
        )
        .unwrap();
        let spec = ModelSpec::new(Family::Bernoulli, Link::Logit, Treatment::Fm);
        let err = validate(&data, &spec).unwrap_err();
        assert!(err.to_string().contains("non-binary response"));
    }

    #[test]
    fn validate_rejects_link_family_mismatch() {
        let spec = ModelSpec::new(Family::Bernoulli, Link::Identity, Treatment::Fm);
        let err = validate(&toy_gaussian(), &spec).unwrap_err();
        assert!(err.to_string().contains("link/family mismatch"));
    }

    #[test]
    fn npar_matches_direct_counts() {
        let spec = gaussian_spec();
        // p = 1 slope, K = 3: 1 + 3 + 2 + 1.
        assert_eq!(spec.npar(3, 1, 0), 7);
        // K = 1 GLM with p = 2 including the intercept: 2 + sigma.
        assert_eq!(spec.npar(1, 2, 0), 3);
        let cov = ModelSpec::new(Family::Bernoulli, Link::Probit, Treatment::Cov);
        // 1 + 3 + 2*(1+1), no sigma.
        assert_eq!(cov.npar(3, 1, 1), 8);
    }

    #[test]
    fn npar_strictly_increasing_in_k() {
        for treatment in [Treatment::Fm, Treatment::FmQp, Treatment::Cov] {
            for family in [Family::Gaussian, Family::Bernoulli] {
                let link = if family == Family::Gaussian { Link::Identity } else { Link::Probit };
                let spec = ModelSpec::new(family, link, treatment);
                let mut prev = spec.npar(1, 3, 2);
                for k in 2..8 {
                    let cur = spec.npar(k, 3, 2);
                    assert!(cur > prev, "{treatment:?} K={k}");
                    prev = cur;
                }
            }
        }
    }

    #[test]
    fn panel_groups_and_sorts_observations() {
        let data = PanelDataset::from_observations(
            vec!["b".into(), "a".into(), "b".into(), "a".into(), "a".into()],
            vec![2, 5, 1, 4, 6],
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![vec![1.0]; 5],
            vec!["x".into()],
        )
        .unwrap();
        assert_eq!(data.n_units(), 2);
        assert_eq!(data.unit_ids(), &["b".to_string(), "a".to_string()]);
        assert_eq!(data.t_i(0), 2);
        assert_eq!(data.t_i(1), 3);
        // Unit b sorted by time: y = (3, 1); unit a: (4, 2, 5).
        assert_eq!(data.y()[0], 3.0);
        assert_eq!(data.y()[1], 1.0);
        assert_eq!(data.y()[2], 4.0);
        assert!(!data.balanced());
    }

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let data = toy_gaussian();
        let json = serde_json::to_string(&data).unwrap();
        let back: PanelDataset = serde_json::from_str(&json).unwrap();
        assert_eq!(back.n_obs(), data.n_obs());
        assert_eq!(back.n_units(), data.n_units());
        assert!(back
            .y()
            .iter()
            .zip(data.y().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back
            .x()
            .iter()
            .zip(data.x().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn with_intercept_is_idempotent() {
        let d = toy_gaussian().with_intercept();
        assert_eq!(d.intercept_col(), Some(0));
        assert_eq!(d.n_covariates(), 2);
        let d2 = d.with_intercept();
        assert_eq!(d2.n_covariates(), 2);
        let slopes = d.without_intercept();
        assert_eq!(slopes.n_covariates(), 1);
        assert_eq!(slopes.covariate_names(), &["x".to_string()]);
    }
}
