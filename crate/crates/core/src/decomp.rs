//! Covariate decompositions: the auxiliary-regression (Mundlak) mean
//! augmentation and the within/between (QP) reparameterization.

use nalgebra::DMatrix;

use crate::data::PanelDataset;
use crate::Result;

/// Within-unit variance below this over *every* unit classifies a column as
/// time-invariant.
const TIME_INVARIANT_TOL: f64 = 1e-12;

/// Book-keeping attached to a QP-transformed design.
#[derive(Debug, Clone)]
pub struct DecomposedDesign {
    /// Column indices of the transformed design holding within deviations.
    pub within_cols: Vec<usize>,
    /// Column indices holding unit means (incl. time-invariant covariates).
    pub between_cols: Vec<usize>,
    /// Original names of columns detected constant within every unit.
    pub time_invariant: Vec<String>,
    pub warnings: Vec<String>,
}

/// Per-unit covariate means: row i = (1/T_i) sum_t x_it.
pub fn unit_means(data: &PanelDataset) -> DMatrix<f64> {
    let n = data.n_units();
    let p = data.n_covariates();
    let mut m = DMatrix::zeros(n, p);
    for i in 0..n {
        let range = data.unit_range(i);
        let t = range.len() as f64;
        for r in range {
            for j in 0..p {
                m[(i, j)] += data.x()[(r, j)];
            }
        }
        for j in 0..p {
            m[(i, j)] /= t;
        }
    }
    m
}

/// Indices of columns that vary within at least one unit.
pub fn time_varying_columns(data: &PanelDataset) -> Vec<usize> {
    let means = unit_means(data);
    (0..data.n_covariates())
        .filter(|&j| !column_is_time_invariant(data, &means, j))
        .collect()
}

fn column_is_time_invariant(data: &PanelDataset, means: &DMatrix<f64>, j: usize) -> bool {
    for i in 0..data.n_units() {
        let mut ss = 0.0;
        let range = data.unit_range(i);
        let t = range.len() as f64;
        for r in range {
            let d = data.x()[(r, j)] - means[(i, j)];
            ss += d * d;
        }
        if ss / t >= TIME_INVARIANT_TOL {
            return false;
        }
    }
    true
}

fn offsets_of(data: &PanelDataset) -> Vec<usize> {
    let mut offs = Vec::with_capacity(data.n_units() + 1);
    offs.push(0);
    for i in 0..data.n_units() {
        offs.push(data.unit_range(i).end);
    }
    offs
}

/// QP (within/between) transform.
///
/// The returned design is `[intercept | within deviations of time-varying
/// columns | unit means of all columns]`; time-invariant covariates appear
/// only in the between block. The intercept itself is never decomposed.
pub fn qp_transform(data: &PanelDataset) -> Result<(PanelDataset, DecomposedDesign)> {
    let src = data.without_intercept();
    let means = unit_means(&src);
    let p = src.n_covariates();
    let n_obs = src.n_obs();

    let mut time_invariant = Vec::new();
    let mut varying = Vec::new();
    for j in 0..p {
        if column_is_time_invariant(&src, &means, j) {
            time_invariant.push(src.covariate_names()[j].clone());
        } else {
            varying.push(j);
        }
    }

    let p_out = 1 + varying.len() + p;
    let mut x = DMatrix::zeros(n_obs, p_out);
    let mut names = Vec::with_capacity(p_out);
    names.push("intercept".to_string());
    let mut within_cols = Vec::new();
    let mut between_cols = Vec::new();

    for r in 0..n_obs {
        x[(r, 0)] = 1.0;
    }
    for (slot, &j) in varying.iter().enumerate() {
        let c = 1 + slot;
        within_cols.push(c);
        names.push(format!("within:{}", src.covariate_names()[j]));
        for r in 0..n_obs {
            let u = src.obs_unit()[r];
            x[(r, c)] = src.x()[(r, j)] - means[(u, j)];
        }
    }
    for j in 0..p {
        let c = 1 + varying.len() + j;
        between_cols.push(c);
        names.push(format!("between:{}", src.covariate_names()[j]));
        for r in 0..n_obs {
            let u = src.obs_unit()[r];
            x[(r, c)] = means[(u, j)];
        }
    }

    let mut warnings = Vec::new();
    for (c, name) in names.iter().enumerate().skip(1) {
        let mean: f64 = (0..n_obs).map(|r| x[(r, c)]).sum::<f64>() / n_obs as f64;
        let var: f64 = (0..n_obs).map(|r| (x[(r, c)] - mean).powi(2)).sum::<f64>() / n_obs as f64;
        if var < TIME_INVARIANT_TOL {
            warnings.push(format!(
                "column '{}' is constant across the sample (collinear with the intercept)",
                name
            ));
        }
    }

    let out = PanelDataset::from_parts(
        src.unit_ids().to_vec(),
        src.obs_unit().to_vec(),
        offsets_of(&src),
        src.y().clone(),
        x,
        names,
        src.time_index().to_vec(),
        Some(0),
    );
    Ok((out, DecomposedDesign { within_cols, between_cols, time_invariant, warnings }))
}

/// Mundlak augmentation: the original design plus `mean:`-tagged unit means
/// of the time-varying columns. An equivalent reparameterization of the QP
/// design: the coefficient on `x` is the within effect and the coefficient on
/// `mean:x` is the between-minus-within contrast.
pub fn mundlak_augment(data: &PanelDataset) -> Result<PanelDataset> {
    let src = data.without_intercept();
    let means = unit_means(&src);
    let varying = time_varying_columns(&src);
    let p = src.n_covariates();
    let n_obs = src.n_obs();

    let mut x = DMatrix::zeros(n_obs, p + varying.len());
    let mut names: Vec<String> = src.covariate_names().to_vec();
    for r in 0..n_obs {
        for j in 0..p {
            x[(r, j)] = src.x()[(r, j)];
        }
    }
    for (slot, &j) in varying.iter().enumerate() {
        let c = p + slot;
        names.push(format!("mean:{}", src.covariate_names()[j]));
        for r in 0..n_obs {
            let u = src.obs_unit()[r];
            x[(r, c)] = means[(u, j)];
        }
    }

    Ok(PanelDataset::from_parts(
        src.unit_ids().to_vec(),
        src.obs_unit().to_vec(),
        offsets_of(&src),
        src.y().clone(),
        x,
        names,
        src.time_index().to_vec(),
        None,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn panel(ids: &[&str], time: &[i64], y: &[f64], xcols: Vec<(&str, Vec<f64>)>) -> PanelDataset {
        let names: Vec<String> = xcols.iter().map(|(n, _)| n.to_string()).collect();
        let rows: Vec<Vec<f64>> = (0..y.len())
            .map(|r| xcols.iter().map(|(_, c)| c[r]).collect())
            .collect();
        PanelDataset::from_observations(
            ids.iter().map(|s| s.to_string()).collect(),
            time.to_vec(),
            y.to_vec(),
            rows,
            names,
        )
        .unwrap()
    }

    #[test]
    fn unit_means_basic_arithmetic() {
        let d = panel(
            &["a", "a", "b", "b"],
            &[1, 2, 1, 2],
            &[0.0; 4],
            vec![("x", vec![1.0, 3.0, 3.0, 5.0])],
        );
        let m = unit_means(&d);
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(1, 0)], 4.0);

        // Degenerate T_i = 1 mean is the single row.
        let d1 = panel(&["a"], &[1], &[0.0], vec![("x", vec![7.5])]);
        assert_eq!(unit_means(&d1)[(0, 0)], 7.5);
    }

    #[test]
    fn qp_transform_single_unit() {
        let d = panel(&["a", "a"], &[1, 2], &[0.0, 0.0], vec![("x", vec![1.0, 3.0])]);
        let (t, info) = qp_transform(&d).unwrap();
        assert_eq!(t.covariate_names(), &["intercept", "within:x", "between:x"]);
        assert_eq!(t.x()[(0, 1)], -1.0);
        assert_eq!(t.x()[(1, 1)], 1.0);
        assert_eq!(t.x()[(0, 2)], 2.0);
        assert_eq!(t.x()[(1, 2)], 2.0);
        assert!(info.time_invariant.is_empty());
    }

    #[test]
    fn time_invariant_column_moves_wholly_between() {
        let d = panel(
            &["a", "a", "b", "b"],
            &[1, 2, 1, 2],
            &[0.0; 4],
            vec![("x", vec![1.0, 2.0, 0.0, 4.0]), ("z", vec![1.0, 1.0, 0.0, 0.0])],
        );
        let (t, info) = qp_transform(&d).unwrap();
        assert_eq!(info.time_invariant, vec!["z".to_string()]);
        assert_eq!(
            t.covariate_names(),
            &["intercept", "within:x", "between:x", "between:z"]
        );
    }

    #[test]
    fn within_plus_between_reconstructs_original() {
        let d = panel(
            &["a", "a", "a", "b", "b"],
            &[1, 2, 3, 1, 2],
            &[0.0; 5],
            vec![("x", vec![0.3, -1.2, 2.7, 5.0, 4.1])],
        );
        let (t, info) = qp_transform(&d).unwrap();
        let wc = info.within_cols[0];
        let bc = info.between_cols[0];
        for r in 0..d.n_obs() {
            let rebuilt = t.x()[(r, wc)] + t.x()[(r, bc)];
            assert!((rebuilt - d.x()[(r, 0)]).abs() <= 1e-14);
        }
        // Within columns have exactly zero unit-level sums.
        for i in 0..d.n_units() {
            let s: f64 = d.unit_range(i).map(|r| t.x()[(r, wc)]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn globally_constant_column_warns() {
        let d = panel(
            &["a", "a", "b", "b"],
            &[1, 2, 1, 2],
            &[0.0; 4],
            vec![("x", vec![1.0, 2.0, 3.0, 4.0]), ("c", vec![2.0, 2.0, 2.0, 2.0])],
        );
        let (_, info) = qp_transform(&d).unwrap();
        assert!(info.warnings.iter().any(|w| w.contains("between:c")));
    }

    #[test]
    fn mundlak_appends_mean_columns() {
        let d = panel(
            &["a", "a", "b", "b"],
            &[1, 2, 1, 2],
            &[0.0; 4],
            vec![("x", vec![1.0, 3.0, 2.0, 6.0])],
        );
        let m = mundlak_augment(&d).unwrap();
        assert_eq!(m.covariate_names(), &["x", "mean:x"]);
        assert_eq!(m.x()[(0, 1)], 2.0);
        assert_eq!(m.x()[(2, 1)], 4.0);
    }
}
