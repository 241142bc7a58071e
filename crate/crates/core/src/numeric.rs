//! Small numeric helpers shared across the estimators.

use nalgebra::DVector;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Numerically stable log-sum-exp.
#[inline]
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Compensated (Kahan) accumulator; keeps reductions stable to ~1e-16
/// regardless of summation order.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    carry: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let y = value - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Sum of a slice with compensated accumulation.
pub fn kahan_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = KahanSum::new();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent RNG stream from a master seed and a tag path
/// (e.g. `[replicate]`, `[k, start]`). Streams with distinct tag paths are
/// statistically independent and reproducible across thread schedules.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_add(1).wrapping_mul(0xff51_afd7_ed55_8ccd);
        out = splitmix64(&mut state);
    }
    ChaCha8Rng::seed_from_u64(out)
}

/// Empirical quantile with linear interpolation on the sorted sample.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Log-probabilities of a softmax over `logits` (stable).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&g| g - lse).collect()
}

/// Sample standard deviation (n-1 divisor); `None` for fewer than 2 points.
pub fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = kahan_sum(values.iter().copied()) / n;
    let ss = kahan_sum(values.iter().map(|v| (v - mean) * (v - mean)));
    Some((ss / (n - 1.0)).sqrt())
}

/// Mean of a slice (compensated).
pub fn mean(values: &[f64]) -> f64 {
    kahan_sum(values.iter().copied()) / values.len() as f64
}

/// Max-abs entry of a vector.
pub fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, &x| m.max(x.abs()))
}

/// Options for the quasi-Newton maximizer.
#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when the max-abs numerical gradient falls below this.
    pub grad_tol: f64,
    /// Relative central-difference step for the gradient.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 200, grad_tol: 1e-6, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub theta: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Central-difference gradient with per-coordinate step `h_j = fd * max(1, |theta_j|)`.
pub fn numerical_gradient<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    theta: &DVector<f64>,
    fd: f64,
) -> DVector<f64> {
    let d = theta.len();
    let mut g = DVector::zeros(d);
    for j in 0..d {
        let h = fd * theta[j].abs().max(1.0);
        let mut up = theta.clone();
        up[j] += h;
        let mut dn = theta.clone();
        dn[j] -= h;
        g[j] = (f(&up) - f(&dn)) / (2.0 * h);
    }
    g
}

/// BFGS maximization with numerical gradients and backtracking Armijo line
/// search. The objective never decreases across accepted steps.
pub fn bfgs_maximize<F: Fn(&DVector<f64>) -> f64>(
    f: F,
    theta0: DVector<f64>,
    opts: &BfgsOptions,
) -> BfgsResult {
    let d = theta0.len();
    let mut theta = theta0;
    let mut value = f(&theta);
    let mut grad = numerical_gradient(&f, &theta, opts.fd_step);
    let mut hinv = nalgebra::DMatrix::<f64>::identity(d, d);
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let gnorm = max_abs(&grad);
        if gnorm <= opts.grad_tol {
            return BfgsResult { theta, value, grad_norm: gnorm, iterations: iter, converged: true };
        }

        let mut dir = &hinv * &grad;
        if dir.dot(&grad) <= 0.0 {
            hinv = nalgebra::DMatrix::identity(d, d);
            dir = grad.clone();
        }

        // Backtracking ascent line search.
        let slope = dir.dot(&grad);
        let mut step = 1.0;
        let mut accepted = false;
        let mut new_theta = theta.clone();
        let mut new_value = value;
        for _ in 0..50 {
            let cand = &theta + &dir * step;
            let cand_val = f(&cand);
            if cand_val.is_finite() && cand_val >= value + 1e-4 * step * slope {
                new_theta = cand;
                new_value = cand_val;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No ascent available along this direction.
            let gnorm = max_abs(&grad);
            return BfgsResult {
                theta,
                value,
                grad_norm: gnorm,
                iterations,
                converged: gnorm <= opts.grad_tol,
            };
        }

        let new_grad = numerical_gradient(&f, &new_theta, opts.fd_step);
        let s = &new_theta - &theta;
        // Gradient change of the *negated* objective, matching the standard
        // minimization update.
        let yv = &grad - &new_grad;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = nalgebra::DMatrix::<f64>::identity(d, d);
            let left = &i - &s * yv.transpose() * rho;
            let right = &i - &yv * s.transpose() * rho;
            hinv = &left * hinv * &right + &s * s.transpose() * rho;
        }
        theta = new_theta;
        value = new_value;
        grad = new_grad;
    }

    let gnorm = max_abs(&grad);
    BfgsResult { theta, value, grad_norm: gnorm, iterations, converged: gnorm <= opts.grad_tol }
}
