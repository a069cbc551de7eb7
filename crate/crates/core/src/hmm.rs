//! Reference hidden Markov model over anchor states with Gaussian emissions.
//!
//! Emission means are the anchor box coordinates and are frozen: EM updates
//! only the transition matrix and the covariances. All forward/backward
//! arithmetic is in log space with per-step renormalization; the model is
//! meant for desk-scale state counts (a few hundred at most).

use nalgebra::{Cholesky, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnchorGrid, AnchorRecipe, PyramidConfig};

const LN_2PI: f64 = 1.8378770664093453;
const DEFAULT_COV_REG: f64 = 1e-6;
const SPD_MIN_EIGENVALUE: f64 = 1e-8;

/// Gaussian-emission HMM with frozen means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    /// Row-stochastic transition matrix, row-major `n x n`.
    pub transition: Vec<f64>,
    /// Initial state distribution. Uniform by default: a categorical prior
    /// is required and uniform is the least-informative choice.
    pub pi: Vec<f64>,
    /// Emission means, one 4-vector per state; never updated.
    pub means: Vec<[f64; 4]>,
    /// Emission covariances, one symmetric positive-definite 4x4 per state.
    pub covariances: Vec<[[f64; 4]; 4]>,
}

/// Ordered box observations; one 4-vector per frame.
pub type ObservationSequence = Vec<[f64; 4]>;

impl HmmModel {
    pub fn n_states(&self) -> usize {
        self.means.len()
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.transition[i * self.n_states() + j]
    }

    /// Uniform-transition, uniform-prior model with isotropic covariances.
    pub fn with_uniform_start(means: Vec<[f64; 4]>, sigma: f64) -> Result<Self> {
        let n = means.len();
        if n == 0 {
            return Err(Error::InvalidInput("model needs at least one state".into()));
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "initial sigma must be positive, got {sigma}"
            )));
        }
        let mut cov = [[0.0; 4]; 4];
        for d in 0..4 {
            cov[d][d] = sigma * sigma;
        }
        let model = HmmModel {
            transition: vec![1.0 / n as f64; n * n],
            pi: vec![1.0 / n as f64; n],
            means,
            covariances: vec![cov; n],
        };
        model.validate()?;
        Ok(model)
    }

    /// One state per cell of a single `side x side` level; means are the
    /// cell boxes themselves.
    pub fn cell_grid_model(side: u32, sigma: f64) -> Result<Self> {
        let cfg = PyramidConfig::single_level(side, 1, 1);
        let grid = AnchorGrid::build(&cfg, &AnchorRecipe::cell_extent())?;
        let means: Vec<[f64; 4]> = (0..side * side)
            .map(|c| grid.anchor(0, c, 0).corners())
            .collect();
        HmmModel::with_uniform_start(means, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 {
            return Err(Error::InvalidInput("model has no states".into()));
        }
        if self.transition.len() != n * n || self.pi.len() != n || self.covariances.len() != n {
            return Err(Error::InvalidInput("model field lengths disagree".into()));
        }
        for i in 0..n {
            let row: f64 = self.transition[i * n..(i + 1) * n].iter().sum();
            if (row - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "transition row {i} sums to {row}, expected 1"
                )));
            }
        }
        let pi_sum: f64 = self.pi.iter().sum();
        if (pi_sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "initial distribution sums to {pi_sum}, expected 1"
            )));
        }
        for (i, cov) in self.covariances.iter().enumerate() {
            let m = Matrix4::from_fn(|r, c| cov[r][c]);
            let eig = m.symmetric_eigenvalues();
            let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if min_eig < SPD_MIN_EIGENVALUE {
                return Err(Error::InvalidInput(format!(
                    "covariance of state {i} is not positive-definite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(())
    }

    fn emission_factors(&self) -> Result<Vec<(Cholesky<f64, nalgebra::U4>, f64)>> {
        self.covariances
            .iter()
            .enumerate()
            .map(|(i, cov)| {
                let m = Matrix4::from_fn(|r, c| cov[r][c]);
                let chol = Cholesky::new(m).ok_or_else(|| {
                    Error::InvalidInput(format!("covariance of state {i} failed factorization"))
                })?;
                let logdet = 2.0 * (0..4).map(|d| chol.l()[(d, d)].ln()).sum::<f64>();
                Ok((chol, logdet))
            })
            .collect()
    }

    /// Per-state Gaussian log-densities of one observation.
    fn log_likelihoods(
        &self,
        factors: &[(Cholesky<f64, nalgebra::U4>, f64)],
        obs: &[f64; 4],
        out: &mut [f64],
    ) {
        let x = Vector4::from_column_slice(obs);
        for (i, (chol, logdet)) in factors.iter().enumerate() {
            let d = x - Vector4::from_column_slice(&self.means[i]);
            let z = chol.l().solve_lower_triangular(&d).expect("triangular L");
            out[i] = -0.5 * (z.dot(&z) + logdet + 4.0 * LN_2PI);
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn validate_sequence(obs: &[[f64; 4]]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::InvalidInput("empty observation sequence".into()));
    }
    for (t, o) in obs.iter().enumerate() {
        if o.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite observation at step {t}"
            )));
        }
    }
    Ok(())
}

struct LogForward {
    /// Normalized log filtering distributions, one row per step.
    log_alpha: Vec<Vec<f64>>,
    /// Total log-likelihood of the sequence.
    log_likelihood: f64,
}

fn log_forward(
    model: &HmmModel,
    factors: &[(Cholesky<f64, nalgebra::U4>, f64)],
    obs: &[[f64; 4]],
) -> Result<LogForward> {
    let n = model.n_states();
    let log_a: Vec<f64> = model.transition.iter().map(|&v| v.ln()).collect();
    let mut ll = vec![0.0; n];
    let mut log_alpha = Vec::with_capacity(obs.len());
    let mut total = 0.0;
    let mut scratch = vec![0.0; n];

    for (t, o) in obs.iter().enumerate() {
        model.log_likelihoods(factors, o, &mut ll);
        let mut row = vec![0.0; n];
        if t == 0 {
            for i in 0..n {
                row[i] = model.pi[i].ln() + ll[i];
            }
        } else {
            let prev: &Vec<f64> = &log_alpha[t - 1];
            for (j, item) in row.iter_mut().enumerate() {
                for i in 0..n {
                    scratch[i] = prev[i] + log_a[i * n + j];
                }
                *item = log_sum_exp(&scratch) + ll[j];
            }
        }
        let norm = log_sum_exp(&row);
        if !norm.is_finite() {
            return Err(Error::EmissionUnderflow { step: t });
        }
        for v in row.iter_mut() {
            *v -= norm;
        }
        total += norm;
        log_alpha.push(row);
    }
    Ok(LogForward {
        log_alpha,
        log_likelihood: total,
    })
}

/// Filtering posteriors `P(state at t | observations up to t)` for every
/// step. Each returned row is a probability vector.
pub fn forward_filter(model: &HmmModel, obs: &[[f64; 4]]) -> Result<Vec<Vec<f64>>> {
    model.validate()?;
    validate_sequence(obs)?;
    let factors = model.emission_factors()?;
    let fwd = log_forward(model, &factors, obs)?;
    Ok(fwd
        .log_alpha
        .into_iter()
        .map(|row| {
            let mut p: Vec<f64> = row.into_iter().map(f64::exp).collect();
            let s: f64 = p.iter().sum();
            for v in p.iter_mut() {
                *v /= s;
            }
            p
        })
        .collect())
}

/// Most probable state after the last observation of the prefix, and the
/// frozen mean box of that state. Ties break to the lowest state id.
pub fn predict_state(model: &HmmModel, obs_prefix: &[[f64; 4]]) -> Result<(usize, [f64; 4])> {
    let posteriors = forward_filter(model, obs_prefix)?;
    let last = posteriors.last().expect("nonempty sequence");
    let mut best = 0;
    for (i, &p) in last.iter().enumerate() {
        if p > last[best] {
            best = i;
        }
    }
    Ok((best, model.means[best]))
}

#[derive(Debug, Clone, Copy)]
pub struct EmOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Ridge added to every covariance after each M-step so states that
    /// captured no responsibility mass cannot go singular.
    pub cov_reg: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 20,
            tol: 1e-6,
            cov_reg: DEFAULT_COV_REG,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: HmmModel,
    /// Total data log-likelihood per iteration, evaluated under the
    /// parameters at the start of the iteration.
    pub log_likelihood: Vec<f64>,
}

/// Baum-Welch with frozen means: only the transition matrix and the
/// emission covariances are re-estimated.
pub fn em_fit(model: &HmmModel, sequences: &[ObservationSequence], opts: EmOptions) -> Result<EmFit> {
    model.validate()?;
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no observation sequences".into()));
    }
    for seq in sequences {
        validate_sequence(seq)?;
    }

    let n = model.n_states();
    let mut current = model.clone();
    let mut history = Vec::new();

    for _ in 0..opts.max_iters {
        let factors = current.emission_factors()?;
        let log_a: Vec<f64> = current.transition.iter().map(|&v| v.ln()).collect();

        let mut xi_acc = vec![0.0; n * n];
        let mut gamma_acc = vec![0.0; n];
        let mut outer_acc = vec![Matrix4::<f64>::zeros(); n];
        let mut total_ll = 0.0;

        for seq in sequences {
            let t_len = seq.len();
            let fwd = log_forward(&current, &factors, seq)?;
            total_ll += fwd.log_likelihood;

            // emission log-densities per step, reused by backward and xi
            let mut ll = vec![vec![0.0; n]; t_len];
            for (t, o) in seq.iter().enumerate() {
                current.log_likelihoods(&factors, o, &mut ll[t]);
            }

            // backward in log space, renormalized per step; the per-step
            // constants cancel in the gamma/xi normalizations below
            let mut log_beta = vec![vec![0.0; n]; t_len];
            let mut scratch = vec![0.0; n];
            for t in (0..t_len - 1).rev() {
                for i in 0..n {
                    for j in 0..n {
                        scratch[j] = log_a[i * n + j] + ll[t + 1][j] + log_beta[t + 1][j];
                    }
                    log_beta[t][i] = log_sum_exp(&scratch);
                }
                let shift = log_sum_exp(&log_beta[t]);
                if !shift.is_finite() {
                    return Err(Error::EmissionUnderflow { step: t });
                }
                for v in log_beta[t].iter_mut() {
                    *v -= shift;
                }
            }

            for t in 0..t_len {
                let mut gamma: Vec<f64> = (0..n)
                    .map(|i| (fwd.log_alpha[t][i] + log_beta[t][i]).exp())
                    .collect();
                let gs: f64 = gamma.iter().sum();
                for v in gamma.iter_mut() {
                    *v /= gs;
                }
                let x = Vector4::from_column_slice(&seq[t]);
                for i in 0..n {
                    gamma_acc[i] += gamma[i];
                    let d = x - Vector4::from_column_slice(&current.means[i]);
                    outer_acc[i] += gamma[i] * d * d.transpose();
                }

                if t + 1 < t_len {
                    let mut xi = vec![0.0; n * n];
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..n {
                        for j in 0..n {
                            let v = fwd.log_alpha[t][i]
                                + log_a[i * n + j]
                                + ll[t + 1][j]
                                + log_beta[t + 1][j];
                            xi[i * n + j] = v;
                            m = m.max(v);
                        }
                    }
                    let mut sum = 0.0;
                    for v in xi.iter_mut() {
                        *v = (*v - m).exp();
                        sum += *v;
                    }
                    for (acc, v) in xi_acc.iter_mut().zip(&xi) {
                        *acc += v / sum;
                    }
                }
            }
        }

        history.push(total_ll);

        // M-step: transition rows with mass are re-estimated, empty rows keep
        // their previous values so the matrix stays stochastic
        let mut new_a = current.transition.clone();
        for i in 0..n {
            let row_sum: f64 = xi_acc[i * n..(i + 1) * n].iter().sum();
            if row_sum > 0.0 {
                for j in 0..n {
                    new_a[i * n + j] = xi_acc[i * n + j] / row_sum;
                }
            }
        }

        let mut new_cov = current.covariances.clone();
        for i in 0..n {
            let mut m = if gamma_acc[i] > 1e-12 {
                outer_acc[i] / gamma_acc[i]
            } else {
                Matrix4::from_fn(|r, c| current.covariances[i][r][c])
            };
            for d in 0..4 {
                m[(d, d)] += opts.cov_reg;
            }
            for r in 0..4 {
                for c in 0..4 {
                    new_cov[i][r][c] = 0.5 * (m[(r, c)] + m[(c, r)]);
                }
            }
        }

        current.transition = new_a;
        current.covariances = new_cov;

        if history.len() >= 2 {
            let k = history.len();
            if (history[k - 1] - history[k - 2]).abs() < opts.tol {
                break;
            }
        }
    }

    Ok(EmFit {
        model: current,
        log_likelihood: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle: P(q_t = i | o_1..t) by enumerating every state
    /// path, in linear space. Only feasible for tiny N and T.
    fn brute_force_posterior(model: &HmmModel, obs: &[[f64; 4]], t: usize) -> Vec<f64> {
        let n = model.n_states();
        let factors = model.emission_factors().unwrap();
        let mut lik = vec![vec![0.0; n]; t + 1];
        for s in 0..=t {
            let mut row = vec![0.0; n];
            model.log_likelihoods(&factors, &obs[s], &mut row);
            for i in 0..n {
                lik[s][i] = row[i].exp();
            }
        }
        let mut mass = vec![0.0; n];
        let paths = n.pow(t as u32 + 1);
        for code in 0..paths {
            let mut c = code;
            let mut path = Vec::with_capacity(t + 1);
            for _ in 0..=t {
                path.push(c % n);
                c /= n;
            }
            let mut w = model.pi[path[0]] * lik[0][path[0]];
            for s in 1..=t {
                w *= model.a(path[s - 1], path[s]) * lik[s][path[s]];
            }
            mass[path[t]] += w;
        }
        let total: f64 = mass.iter().sum();
        mass.iter().map(|&v| v / total).collect()
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize) -> HmmModel {
        let mut transition = vec![0.0; n * n];
        for i in 0..n {
            let mut row: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= s;
            }
            transition[i * n..(i + 1) * n].copy_from_slice(&row);
        }
        let means: Vec<[f64; 4]> = (0..n)
            .map(|_| {
                let x = rng.random::<f64>() * 0.7;
                let y = rng.random::<f64>() * 0.7;
                [x, y, x + 0.2, y + 0.2]
            })
            .collect();
        let sigma = 0.05 + rng.random::<f64>() * 0.1;
        let mut cov = [[0.0; 4]; 4];
        for d in 0..4 {
            cov[d][d] = sigma * sigma;
        }
        HmmModel {
            transition,
            pi: vec![1.0 / n as f64; n],
            means,
            covariances: vec![cov; n],
        }
    }

    fn random_obs(rng: &mut ChaCha8Rng, t: usize) -> Vec<[f64; 4]> {
        (0..t)
            .map(|_| {
                let x = rng.random::<f64>() * 0.7;
                let y = rng.random::<f64>() * 0.7;
                [x, y, x + 0.2, y + 0.2]
            })
            .collect()
    }

    #[test]
    fn single_state_posterior_is_one() {
        let model = HmmModel::with_uniform_start(vec![[0.1, 0.1, 0.3, 0.3]], 0.1).unwrap();
        let obs = vec![[0.1, 0.1, 0.3, 0.3]; 5];
        let post = forward_filter(&model, &obs).unwrap();
        for row in post {
            assert_eq!(row, vec![1.0]);
        }
        let (state, mean) = predict_state(&model, &obs).unwrap();
        assert_eq!(state, 0);
        assert_eq!(mean, [0.1, 0.1, 0.3, 0.3]);
    }

    #[test]
    fn separated_two_state_model_locks_onto_observed_state() {
        let means = vec![[0.1, 0.1, 0.2, 0.2], [0.7, 0.7, 0.9, 0.9]];
        let mut model = HmmModel::with_uniform_start(means, 0.01).unwrap();
        // near-identity transitions
        model.transition = vec![0.999, 0.001, 0.001, 0.999];
        let obs = vec![[0.1, 0.1, 0.2, 0.2]; 4];
        let post = forward_filter(&model, &obs).unwrap();
        for row in &post {
            assert!(row[0] > 0.999, "posterior {row:?}");
        }
        let (state, _) = predict_state(&model, &obs).unwrap();
        assert_eq!(state, 0);
    }

    #[test]
    fn forward_matches_brute_force_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..=4);
            let t = rng.random_range(1..=6);
            let model = random_model(&mut rng, n);
            let obs = random_obs(&mut rng, t);
            let post = forward_filter(&model, &obs).unwrap();
            for step in 0..t {
                let oracle = brute_force_posterior(&model, &obs, step);
                for i in 0..n {
                    assert_abs_diff_eq!(post[step][i], oracle[i], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn posteriors_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 5);
        let obs = random_obs(&mut rng, 30);
        for row in forward_filter(&model, &obs).unwrap() {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn em_loglik_non_decreasing_and_means_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, 3);
        let sequences: Vec<_> = (0..4).map(|_| random_obs(&mut rng, 12)).collect();
        let fit = em_fit(
            &model,
            &sequences,
            EmOptions {
                max_iters: 10,
                tol: 0.0,
                ..EmOptions::default()
            },
        )
        .unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-6, "log-likelihood dipped: {w:?}");
        }
        for (a, b) in model.means.iter().zip(&fit.model.means) {
            for d in 0..4 {
                assert_eq!(a[d].to_bits(), b[d].to_bits());
            }
        }
        fit.model.validate().unwrap();
    }

    #[test]
    fn em_recovers_dominant_switching_structure() {
        // two well-separated states with a strong 0 -> 1 -> 0 alternation
        let means = vec![[0.1, 0.1, 0.2, 0.2], [0.7, 0.7, 0.8, 0.8]];
        let start = HmmModel::with_uniform_start(means.clone(), 0.05).unwrap();
        let mut sequences = Vec::new();
        for _ in 0..10 {
            let seq: Vec<[f64; 4]> = (0..20)
                .map(|t| if t % 2 == 0 { means[0] } else { means[1] })
                .collect();
            sequences.push(seq);
        }
        let fit = em_fit(&start, &sequences, EmOptions::default()).unwrap();
        let a = &fit.model;
        assert!(a.a(0, 1) > a.a(0, 0), "row 0: {:?}", &a.transition[..2]);
        assert!(a.a(1, 0) > a.a(1, 1), "row 1: {:?}", &a.transition[2..]);
    }

    #[test]
    fn unresponsible_state_keeps_spd_covariance() {
        // third state far away never sees an observation
        let means = vec![[0.1, 0.1, 0.2, 0.2], [0.7, 0.7, 0.8, 0.8], [0.4, 0.9, 0.5, 1.0]];
        let start = HmmModel::with_uniform_start(means.clone(), 0.02).unwrap();
        let sequences = vec![vec![means[0]; 8], vec![means[1]; 8]];
        let fit = em_fit(&start, &sequences, EmOptions::default()).unwrap();
        fit.model.validate().unwrap();
    }

    #[test]
    fn empty_inputs_rejected() {
        let model = HmmModel::with_uniform_start(vec![[0.0, 0.0, 1.0, 1.0]], 0.1).unwrap();
        assert!(forward_filter(&model, &[]).is_err());
        assert!(em_fit(&model, &[], EmOptions::default()).is_err());
    }
}
