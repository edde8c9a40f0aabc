//! Covariance matrix adaptation evolution strategy, used to adapt the
//! router gradient-free in the few-shot setting and exposed as a
//! standalone minimizer. 64-bit only; the search spaces here are tiny.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::data::{encode_example, AdaptationSplit, EncodedExample};
use crate::error::{Error, Result};
use crate::model::TransformerWeights;
use crate::rng::SeedRng;
use crate::router::{routed_task_loss, softmax_f64, RouterMode, RouterParams, SkillLibrary};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest eigenvalue the covariance is allowed to reach.
pub const EIGEN_FLOOR: f64 = 1e-14;

/// Standard population size for dimension `n`.
pub fn default_lambda(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

/// Search-space bounds. The pipeline keeps router adaptation inside this
/// window by construction; the standalone API enforces it.
pub const MIN_DIM: usize = 3;
pub const MAX_DIM: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaConfig {
    pub dim: usize,
    /// Population per generation; `None` picks the standard default.
    pub lambda: Option<usize>,
    pub m0: Vec<f64>,
    pub sigma0: f64,
    pub max_evals: usize,
    /// Stop early once the best fitness reaches this; `-inf` disables.
    pub target_fitness: f64,
    pub seed: u64,
}

impl CmaConfig {
    /// Zero-centered start with the standard population.
    pub fn for_dim(dim: usize) -> Self {
        CmaConfig {
            dim,
            lambda: None,
            m0: vec![0.0; dim],
            sigma0: 0.5,
            max_evals: 3000,
            target_fitness: f64::NEG_INFINITY,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, reason: String| {
            Err(Error::ConfigValidation {
                path: path.into(),
                reason,
            })
        };
        if self.dim < MIN_DIM || self.dim > MAX_DIM {
            return fail("dim", format!("{} outside {MIN_DIM}..={MAX_DIM}", self.dim));
        }
        if let Some(l) = self.lambda {
            if l < 2 {
                return fail("lambda", format!("{l} below 2"));
            }
        }
        if self.m0.len() != self.dim {
            return fail("m0", format!("length {} for dimension {}", self.m0.len(), self.dim));
        }
        if self.m0.iter().any(|x| !x.is_finite()) {
            return fail("m0", "non-finite entry".into());
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return fail("sigma0", format!("{} not a finite positive step size", self.sigma0));
        }
        if self.max_evals == 0 {
            return fail("max_evals", "zero".into());
        }
        Ok(())
    }
}

/// Strategy constants derived from (n, lambda) once per run.
#[derive(Clone, Debug)]
pub struct CmaParams {
    pub n: usize,
    pub lambda: usize,
    pub mu: usize,
    /// Positive recombination weights, non-increasing, summing to 1.
    pub weights: Vec<f64>,
    pub mu_eff: f64,
    pub c_sigma: f64,
    pub d_sigma: f64,
    pub c_c: f64,
    pub c1: f64,
    pub c_mu: f64,
    pub chi_n: f64,
}

impl CmaParams {
    pub fn new(n: usize, lambda: usize) -> Self {
        let mu = lambda / 2;
        let base = ((lambda as f64 + 1.0) / 2.0).ln();
        let mut weights: Vec<f64> = (1..=mu).map(|i| base - (i as f64).ln()).collect();
        let sum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= sum;
        }
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c1 = 2.0 / ((nf + 1.3) * (nf + 1.3) + mu_eff);
        let c_mu = (1.0 - c1)
            .min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0) * (nf + 2.0) + mu_eff));
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        CmaParams {
            n,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvector columns, eigenvalues), or None past `max_sweeps`.
fn jacobi_eigen(a: &Tensor<f64>, max_sweeps: usize) -> Option<(Tensor<f64>, Vec<f64>)> {
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Tensor::<f64>::eye(n);
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off.sqrt() <= 1e-13 * (1.0 + m.frob_norm()) {
            let vals = (0..n).map(|i| m.get(i, i)).collect();
            return Some((v, vals));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let tau = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    None
}

/// Full optimizer state between ask/tell calls.
#[derive(Clone, Debug)]
pub struct CmaState {
    pub params: CmaParams,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub cov: Tensor<f64>,
    pub p_sigma: Vec<f64>,
    pub p_c: Vec<f64>,
    /// Eigenvector columns of `cov`.
    eig_vectors: Tensor<f64>,
    /// Eigenvalues of `cov`, floored at [`EIGEN_FLOOR`].
    eig_values: Vec<f64>,
    pub generation: u64,
    /// Covariance resets forced by a failed eigendecomposition.
    pub resets: usize,
    rng: SeedRng,
}

impl CmaState {
    pub fn new(cfg: &CmaConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.dim;
        let lambda = cfg.lambda.unwrap_or_else(|| default_lambda(n));
        if lambda < 2 {
            return Err(Error::ConfigValidation {
                path: "lambda".into(),
                reason: format!("{lambda} below 2"),
            });
        }
        Ok(CmaState {
            params: CmaParams::new(n, lambda),
            mean: cfg.m0.clone(),
            sigma: cfg.sigma0,
            cov: Tensor::eye(n),
            p_sigma: vec![0.0; n],
            p_c: vec![0.0; n],
            eig_vectors: Tensor::eye(n),
            eig_values: vec![1.0; n],
            generation: 0,
            resets: 0,
            rng: SeedRng::new(cfg.seed).derive("cma"),
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eig_values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eig_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sample one generation: x_i = m + sigma * B diag(sqrt(eig)) z_i.
    pub fn ask(&mut self) -> Vec<Vec<f64>> {
        let n = self.params.n;
        let mut out = Vec::with_capacity(self.params.lambda);
        for _ in 0..self.params.lambda {
            let z: Vec<f64> = (0..n).map(|_| self.rng.normal()).collect();
            let mut x = self.mean.clone();
            for j in 0..n {
                let mut yj = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    yj += self.eig_vectors.get(j, k) * self.eig_values[k].sqrt() * zk;
                }
                x[j] += self.sigma * yj;
            }
            out.push(x);
        }
        out
    }

    /// Rank-based update of mean, paths, covariance and step size.
    /// NaN fitness ranks worst. Ties keep sampling order.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) -> Result<()> {
        let p = &self.params;
        let (n, lambda, mu) = (p.n, p.lambda, p.mu);
        if candidates.len() != lambda || fitnesses.len() != lambda {
            return Err(Error::Contract(format!(
                "tell got {} candidates and {} fitnesses for population {lambda}",
                candidates.len(),
                fitnesses.len()
            )));
        }
        if let Some(bad) = candidates.iter().find(|c| c.len() != n) {
            return Err(Error::Contract(format!(
                "candidate of dimension {} in a {n}-dimensional search",
                bad.len()
            )));
        }

        let mut order: Vec<usize> = (0..lambda).collect();
        order.sort_by(|&a, &b| cmp_fitness(fitnesses[a], fitnesses[b]));

        // Steps in sigma units, relative to the pre-update mean.
        let selected: Vec<Vec<f64>> = order[..mu]
            .iter()
            .map(|&i| {
                (0..n)
                    .map(|j| (candidates[i][j] - self.mean[j]) / self.sigma)
                    .collect()
            })
            .collect();
        let mut y_w = vec![0.0; n];
        for (w, y) in p.weights.iter().zip(&selected) {
            for j in 0..n {
                y_w[j] += w * y[j];
            }
        }
        for j in 0..n {
            self.mean[j] += self.sigma * y_w[j];
        }

        // Whitened mean step for the step-size path.
        let mut bty = vec![0.0; n];
        for k in 0..n {
            let mut dot = 0.0;
            for j in 0..n {
                dot += self.eig_vectors.get(j, k) * y_w[j];
            }
            bty[k] = dot / self.eig_values[k].sqrt();
        }
        let mut c_inv_sqrt_y = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for (k, b) in bty.iter().enumerate() {
                acc += self.eig_vectors.get(j, k) * b;
            }
            c_inv_sqrt_y[j] = acc;
        }
        let cs = p.c_sigma;
        let path_scale = (cs * (2.0 - cs) * p.mu_eff).sqrt();
        for j in 0..n {
            self.p_sigma[j] = (1.0 - cs) * self.p_sigma[j] + path_scale * c_inv_sqrt_y[j];
        }
        let ps_norm = self.p_sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        let gen1 = (self.generation + 1) as f64;
        let unbias = (1.0 - (1.0 - cs).powf(2.0 * gen1)).sqrt();
        let h_sigma = if ps_norm / unbias < (1.4 + 2.0 / (n as f64 + 1.0)) * p.chi_n {
            1.0
        } else {
            0.0
        };

        let cc = p.c_c;
        let pc_scale = (cc * (2.0 - cc) * p.mu_eff).sqrt();
        for j in 0..n {
            self.p_c[j] = (1.0 - cc) * self.p_c[j] + h_sigma * pc_scale * y_w[j];
        }

        let delta_h = (1.0 - h_sigma) * cc * (2.0 - cc);
        let keep = 1.0 - p.c1 - p.c_mu;
        let mut cov = Tensor::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut rank_mu = 0.0;
                for (w, y) in p.weights.iter().zip(&selected) {
                    rank_mu += w * y[i] * y[j];
                }
                let v = (keep + p.c1 * delta_h) * self.cov.get(i, j)
                    + p.c1 * self.p_c[i] * self.p_c[j]
                    + p.c_mu * rank_mu;
                cov.set(i, j, v);
            }
        }
        // Exact symmetry before decomposing.
        for i in 0..n {
            for j in (i + 1)..n {
                let s = 0.5 * (cov.get(i, j) + cov.get(j, i));
                cov.set(i, j, s);
                cov.set(j, i, s);
            }
        }

        self.sigma *= ((cs / p.d_sigma) * (ps_norm / p.chi_n - 1.0)).exp();

        let decomposed = if cov.has_non_finite() {
            None
        } else {
            jacobi_eigen(&cov, 60)
        };
        match decomposed {
            Some((vectors, values)) => {
                let floored: Vec<f64> = values.iter().map(|&v| v.max(EIGEN_FLOOR)).collect();
                // Rebuild so the stored covariance honors the floor.
                let mut rebuilt = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in i..n {
                        let mut acc = 0.0;
                        for (k, ev) in floored.iter().enumerate() {
                            acc += vectors.get(i, k) * ev * vectors.get(j, k);
                        }
                        rebuilt.set(i, j, acc);
                        rebuilt.set(j, i, acc);
                    }
                }
                self.cov = rebuilt;
                self.eig_vectors = vectors;
                self.eig_values = floored;
            }
            None => {
                self.cov = Tensor::eye(n);
                self.eig_vectors = Tensor::eye(n);
                self.eig_values = vec![1.0; n];
                self.resets += 1;
            }
        }
        self.generation += 1;
        Ok(())
    }
}

fn cmp_fitness(a: f64, b: f64) -> Ordering {
    match (a.is_nan(), b.is_nan()) {
        (true, true) => Ordering::Equal,
        (true, false) => Ordering::Greater,
        (false, true) => Ordering::Less,
        (false, false) => a.partial_cmp(&b).unwrap(),
    }
}

/// One generation of the optimization history.
#[derive(Clone, Debug, PartialEq)]
pub struct GenRow {
    pub generation: u64,
    pub evals: u64,
    pub f_best: f64,
    pub sigma: f64,
    pub min_eig: f64,
    pub max_eig: f64,
}

/// Render history rows as CSV with a header.
pub fn cma_log_csv(rows: &[GenRow]) -> String {
    let mut out = String::from("generation,evals,f_best,sigma,min_eig,max_eig\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.generation, r.evals, r.f_best, r.sigma, r.min_eig, r.max_eig
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct CmaResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evals: u64,
    pub history: Vec<GenRow>,
}

/// Ask/tell loop until the evaluation budget or the fitness target is hit.
/// The best-ever candidate is kept regardless of later generations.
pub fn minimize(mut f: impl FnMut(&[f64]) -> f64, cfg: &CmaConfig) -> Result<CmaResult> {
    let mut state = CmaState::new(cfg)?;
    let mut x_best = cfg.m0.clone();
    let mut f_best = f64::INFINITY;
    let mut evals = 0u64;
    let mut history = Vec::new();
    while evals < cfg.max_evals as u64 && f_best > cfg.target_fitness {
        let candidates = state.ask();
        let fitnesses: Vec<f64> = candidates
            .iter()
            .map(|x| {
                evals += 1;
                f(x)
            })
            .collect();
        for (x, &fx) in candidates.iter().zip(&fitnesses) {
            if !fx.is_nan() && fx < f_best {
                f_best = fx;
                x_best = x.clone();
            }
        }
        state.tell(&candidates, &fitnesses)?;
        history.push(GenRow {
            generation: state.generation,
            evals,
            f_best,
            sigma: state.sigma,
            min_eig: state.min_eigenvalue(),
            max_eig: state.max_eigenvalue(),
        });
    }
    Ok(CmaResult {
        x_best,
        f_best,
        evals,
        history,
    })
}

/// Few-shot gate search schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub tau: f64,
    pub sigma0: f64,
    pub max_evals: usize,
    pub target_fitness: f64,
    pub lambda: Option<usize>,
    pub seed: u64,
}

impl FewShotConfig {
    pub fn desk_default() -> Self {
        FewShotConfig {
            tau: 1.0,
            sigma0: 0.5,
            max_evals: 3000,
            target_fitness: f64::NEG_INFINITY,
            lambda: None,
            seed: 0,
        }
    }
}

/// Adapt the gate on a handful of examples with no gradients anywhere:
/// fitness is the routed task loss, searched over logits and bias jointly.
/// A single-skill library short-circuits, since every gate gives the same
/// mixture.
pub fn adapt_fewshot<T: Scalar>(
    base: &TransformerWeights<T>,
    lib: &SkillLibrary<T>,
    split: &AdaptationSplit,
    cfg: &FewShotConfig,
) -> Result<(RouterParams<T>, CmaResult)> {
    if lib.config() != &base.config {
        return Err(Error::Contract(
            "skill library targets a different base configuration".into(),
        ));
    }
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(Error::ConfigValidation {
            path: "tau".into(),
            reason: format!("{} not a finite positive temperature", cfg.tau),
        });
    }
    let encoded: Vec<EncodedExample> = split
        .adaptation
        .iter()
        .map(|e| encode_example(e, base.config.max_seq_len))
        .collect::<Result<_>>()?;
    if encoded.is_empty() {
        return Err(Error::Contract("adapt_fewshot with an empty adaptation set".into()));
    }

    let k = lib.len();
    let root = SeedRng::new(cfg.seed);
    let mut init_rng = root.derive("router-init");
    let init = RouterParams::<T>::init(RouterMode::Static, k, lib.feature_width(), cfg.tau, &mut init_rng)?;
    if k == 1 {
        let f_best = routed_task_loss(base, lib, &[1.0], &encoded)?;
        return Ok((
            init,
            CmaResult {
                x_best: Vec::new(),
                f_best,
                evals: 0,
                history: Vec::new(),
            },
        ));
    }

    let dim = 2 * k;
    if dim > MAX_DIM {
        return Err(Error::ConfigValidation {
            path: "skills".into(),
            reason: format!("{k} skills put the search at dimension {dim}, beyond {MAX_DIM}"),
        });
    }
    let cma_cfg = CmaConfig {
        dim,
        lambda: cfg.lambda,
        m0: vec![0.0; dim],
        sigma0: cfg.sigma0,
        max_evals: cfg.max_evals,
        target_fitness: cfg.target_fitness,
        seed: root.derive("search").seed(),
    };
    let fitness = |x: &[f64]| -> f64 {
        let e: Vec<f64> = (0..k).map(|i| x[i] + x[k + i]).collect();
        let r = softmax_f64(&e, cfg.tau);
        routed_task_loss(base, lib, &r, &encoded).unwrap_or(f64::NAN)
    };
    let result = minimize(fitness, &cma_cfg)?;

    let params = RouterParams {
        mode: RouterMode::Static,
        a: Tensor::from_fn(1, k, |_, i| T::from_f64(result.x_best[i])),
        b: Tensor::from_fn(1, k, |_, i| T::from_f64(result.x_best[k + i])),
        tau: cfg.tau,
    };
    Ok((params, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adalora::SkillAdapter;
    use crate::data::InstructionExample;
    use crate::model::ModelConfig;
    use crate::tape::backward_count;

    fn sphere(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn config_enforces_dimension_window() {
        assert!(CmaConfig::for_dim(2).validate().is_err());
        assert!(CmaConfig::for_dim(101).validate().is_err());
        assert!(CmaConfig::for_dim(3).validate().is_ok());
        assert!(CmaConfig::for_dim(100).validate().is_ok());
    }

    #[test]
    fn params_match_published_defaults() {
        let p = CmaParams::new(12, default_lambda(12));
        assert_eq!(p.lambda, 11);
        assert_eq!(p.mu, 5);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in p.weights.windows(2) {
            assert!(w[0] >= w[1]);
        }
        assert!(p.weights.iter().all(|&w| w > 0.0));
        assert!(p.c1 > 0.0 && p.c_mu > 0.0 && p.c1 + p.c_mu < 1.0);
        // chi_n approximates E||N(0,I)|| = sqrt(2) Gamma((n+1)/2) / Gamma(n/2).
        assert!((p.chi_n - 3.3929).abs() < 1e-3);
    }

    #[test]
    fn ask_with_zero_sigma_returns_the_mean() {
        let mut cfg = CmaConfig::for_dim(4);
        cfg.m0 = vec![1.0, -2.0, 0.5, 3.0];
        let mut state = CmaState::new(&cfg).unwrap();
        state.sigma = 0.0;
        for x in state.ask() {
            assert_eq!(x, cfg.m0);
        }
    }

    #[test]
    fn ask_sample_mean_matches_distribution_mean() {
        let mut cfg = CmaConfig::for_dim(4);
        cfg.m0 = vec![3.7, -1.2, 0.0, 5.5];
        cfg.sigma0 = 1.0;
        cfg.seed = 12;
        let mut state = CmaState::new(&cfg).unwrap();
        let draws = 100_000;
        let mut sums = vec![0.0; 4];
        let mut count = 0usize;
        while count < draws {
            for x in state.ask() {
                for j in 0..4 {
                    sums[j] += x[j];
                }
                count += 1;
            }
        }
        for j in 0..4 {
            let mean = sums[j] / count as f64;
            let se = 1.0 / (count as f64).sqrt();
            assert!(
                (mean - cfg.m0[j]).abs() < 4.0 * se,
                "coordinate {j}: sample mean {mean} vs {}",
                cfg.m0[j]
            );
        }
    }

    #[test]
    fn ask_is_deterministic_per_seed() {
        let cfg = CmaConfig::for_dim(5);
        let mut a = CmaState::new(&cfg).unwrap();
        let mut b = CmaState::new(&cfg).unwrap();
        assert_eq!(a.ask(), b.ask());
        assert_eq!(a.ask(), b.ask());
    }

    #[test]
    fn equal_fitness_recombines_in_sampling_order() {
        let cfg = CmaConfig::for_dim(4);
        let mut state = CmaState::new(&cfg).unwrap();
        let mean_before = state.mean.clone();
        let sigma = state.sigma;
        let candidates = state.ask();
        let fitnesses = vec![7.0; state.params.lambda];
        let weights = state.params.weights.clone();
        let mu = state.params.mu;
        state.tell(&candidates, &fitnesses).unwrap();
        for j in 0..4 {
            let mut want = mean_before[j];
            for (w, c) in weights.iter().zip(&candidates[..mu]) {
                want += sigma * w * ((c[j] - mean_before[j]) / sigma);
            }
            assert!((state.mean[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_fitness_ranks_worst() {
        let cfg = CmaConfig::for_dim(4);
        let mut with_nan = CmaState::new(&cfg).unwrap();
        let mut clean = CmaState::new(&cfg).unwrap();
        let candidates = with_nan.ask();
        let _ = clean.ask();
        let lam = with_nan.params.lambda;
        // NaN on the best-looking slots must not change selection relative
        // to giving those slots terrible finite fitness.
        let mut f_nan: Vec<f64> = (0..lam).map(|i| i as f64).collect();
        let mut f_bad = f_nan.clone();
        f_nan[0] = f64::NAN;
        f_bad[0] = 1e300;
        with_nan.tell(&candidates, &f_nan).unwrap();
        clean.tell(&candidates, &f_bad).unwrap();
        assert_eq!(with_nan.mean, clean.mean);
    }

    #[test]
    fn covariance_stays_symmetric_pd_under_random_fitness() {
        let cfg = CmaConfig::for_dim(5);
        let mut state = CmaState::new(&cfg).unwrap();
        let mut frng = SeedRng::new(77);
        for gen in 0..1000 {
            let candidates = state.ask();
            let fitnesses: Vec<f64> = candidates.iter().map(|_| frng.normal()).collect();
            state.tell(&candidates, &fitnesses).unwrap();
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(state.cov.get(i, j), state.cov.get(j, i), "gen {gen}");
                }
            }
            assert!(state.min_eigenvalue() >= EIGEN_FLOOR, "gen {gen}");
            assert!(state.max_eigenvalue().is_finite(), "gen {gen}");
        }
    }

    #[test]
    fn mean_converges_to_a_fixed_optimum() {
        let target = [0.3, -0.7, 1.1, 0.0];
        let mut cfg = CmaConfig::for_dim(4);
        cfg.seed = 5;
        let mut state = CmaState::new(&cfg).unwrap();
        for _ in 0..200 {
            let candidates = state.ask();
            let fitnesses: Vec<f64> = candidates
                .iter()
                .map(|x| {
                    x.iter()
                        .zip(&target)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            state.tell(&candidates, &fitnesses).unwrap();
        }
        for (m, t) in state.mean.iter().zip(&target) {
            assert!((m - t).abs() < 1e-3, "mean {m} vs target {t}");
        }
    }

    #[test]
    fn sphere_reaches_deep_precision() {
        let mut cfg = CmaConfig::for_dim(12);
        cfg.m0 = vec![3.0; 12];
        cfg.max_evals = 6000;
        cfg.target_fitness = 1e-12;
        let result = minimize(sphere, &cfg).unwrap();
        assert!(
            result.f_best < 1e-10,
            "sphere best {} after {} evals",
            result.f_best,
            result.evals
        );
        assert!(result.evals <= 6000);
    }

    #[test]
    fn translated_sphere_recovers_the_center() {
        let c: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.5).collect();
        let mut cfg = CmaConfig::for_dim(12);
        cfg.m0 = vec![3.0; 12];
        cfg.max_evals = 6000;
        cfg.target_fitness = 1e-12;
        let shifted = |x: &[f64]| -> f64 {
            x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let result = minimize(shifted, &cfg).unwrap();
        assert!(result.f_best < 1e-10, "best {}", result.f_best);
        for (x, want) in result.x_best.iter().zip(&c) {
            assert!((x - want).abs() < 1e-5);
        }
    }

    #[test]
    fn rosenbrock_six_dimensional() {
        let rosen = |x: &[f64]| -> f64 {
            x.windows(2)
                .map(|w| 100.0 * (w[1] - w[0] * w[0]).powi(2) + (1.0 - w[0]).powi(2))
                .sum()
        };
        let mut cfg = CmaConfig::for_dim(6);
        cfg.max_evals = 30_000;
        cfg.target_fitness = 1e-8;
        let result = minimize(rosen, &cfg).unwrap();
        assert!(
            result.f_best < 1e-6,
            "rosenbrock best {} after {} evals",
            result.f_best,
            result.evals
        );
    }

    #[test]
    fn trajectory_is_invariant_to_monotone_fitness_transforms() {
        // Short run keeps fitness values large enough that exp() cannot
        // round distinct values together and manufacture ties.
        let mut cfg = CmaConfig::for_dim(6);
        cfg.m0 = vec![2.0; 6];
        cfg.max_evals = 400;
        let plain = minimize(sphere, &cfg).unwrap();
        let warped = minimize(|x| sphere(x).exp(), &cfg).unwrap();
        assert_eq!(plain.x_best, warped.x_best);
        assert_eq!(plain.history.len(), warped.history.len());
        for (a, b) in plain.history.iter().zip(&warped.history) {
            assert_eq!(a.sigma, b.sigma);
            assert_eq!(b.f_best, a.f_best.exp());
        }
    }

    #[test]
    fn history_best_never_increases() {
        let chaotic = |x: &[f64]| ((x[0] * 131.7).sin() + (x[1] * 71.3).cos()) * 10.0 + sphere(x);
        let mut cfg = CmaConfig::for_dim(3);
        cfg.max_evals = 1500;
        let result = minimize(chaotic, &cfg).unwrap();
        for w in result.history.windows(2) {
            assert!(w[1].f_best <= w[0].f_best);
        }
    }

    fn micro_config() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 260,
            max_seq_len: 32,
            tied_head: false,
        }
    }

    fn micro_library(k: usize) -> SkillLibrary<f64> {
        let skills = (0..k)
            .map(|i| {
                let mut rng = SeedRng::new(300 + i as u64);
                let mut a =
                    SkillAdapter::init(&format!("s{i}"), &micro_config(), 2, 0.0, &mut rng).unwrap();
                let mut lam = rng.derive("lam");
                for t in a.triplets.iter_mut() {
                    t.singular = Tensor::randn(1, 2, 0.4, &mut lam);
                }
                a
            })
            .collect();
        SkillLibrary::new(skills).unwrap()
    }

    fn tiny_split() -> AdaptationSplit {
        let mk = |s: &str| InstructionExample {
            context: String::new(),
            query: format!("echo {s}"),
            answer: s.to_string(),
            skill_tag: None,
            meta: format!("e-{s}"),
        };
        AdaptationSplit {
            adaptation: vec![mk("ab"), mk("cd")],
            test: vec![mk("ef")],
        }
    }

    #[test]
    fn single_skill_library_short_circuits() {
        let mut rng = SeedRng::new(41);
        let base = TransformerWeights::<f64>::init(micro_config(), &mut rng).unwrap();
        let lib = micro_library(1);
        let before = backward_count();
        let (params, result) = adapt_fewshot(&base, &lib, &tiny_split(), &FewShotConfig::desk_default()).unwrap();
        assert_eq!(backward_count(), before);
        assert_eq!(result.evals, 0);
        assert!(result.history.is_empty());
        assert!(result.f_best.is_finite());
        // Matches the seeded initialization that gradient adaptation would
        // also start from.
        let mut want_rng = SeedRng::new(0).derive("router-init");
        let want =
            RouterParams::<f64>::init(RouterMode::Static, 1, 6, 1.0, &mut want_rng).unwrap();
        assert!(params.a.bit_eq(&want.a) && params.b.bit_eq(&want.b));
    }

    #[test]
    fn fewshot_touches_no_gradients_and_improves_fitness() {
        let mut rng = SeedRng::new(42);
        let base = TransformerWeights::<f64>::init(micro_config(), &mut rng).unwrap();
        let lib = micro_library(2);
        let split = tiny_split();
        let cfg = FewShotConfig {
            max_evals: 60,
            ..FewShotConfig::desk_default()
        };
        let before = backward_count();
        let (params, result) = adapt_fewshot(&base, &lib, &split, &cfg).unwrap();
        assert_eq!(backward_count(), before, "few-shot adaptation ran a backward pass");
        assert!(result.evals >= 60 - default_lambda(4) as u64 && result.evals <= 60 + default_lambda(4) as u64);
        assert!(result.f_best.is_finite());
        params.validate(2, 6).unwrap();
        // The returned parameters reproduce the best fitness seen.
        let e: Vec<f64> = (0..2)
            .map(|i| params.a.get(0, i) + params.b.get(0, i))
            .collect();
        let r = softmax_f64(&e, cfg.tau);
        let encoded: Vec<EncodedExample> = split
            .adaptation
            .iter()
            .map(|e| encode_example(e, micro_config().max_seq_len).unwrap())
            .collect();
        let loss = routed_task_loss(&base, &lib, &r, &encoded).unwrap();
        assert!((loss - result.f_best).abs() < 1e-10);
    }
}
