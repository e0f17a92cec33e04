//! Adaptive Metropolis-within-Gibbs sampling of the posterior, with
//! multi-chain orchestration and the usual diagnostics.
//!
//! ```
//! use mcar::model::{CountPanel, HyperParams, ProximitySpec};
//! use mcar::sampler::{run_chains, ChainConfig};
//!
//! let observed: Vec<u64> = (0..24).map(|i| 8 + i % 5).collect();
//! let panel = CountPanel::new(1, vec!["a".into(), "b".into()], 2000, observed, vec![9.0; 24], vec![])?;
//! let config = ChainConfig { n_chains: 2, n_iterations: 400, burn_in: 200, thin: 10, ..ChainConfig::desk(7) };
//! let samples = run_chains(&panel, &ProximitySpec::neighborhood(), &HyperParams::default(), &config)?;
//! assert_eq!(samples.draws.len(), 2 * 20);
//! # Ok::<(), mcar::Error>(())
//! ```

mod chain;
mod diagnostics;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{parameter_names, CountPanel, HyperParams, ModelState, ProximitySpec};

pub use diagnostics::{dic, dic_from_deviances, rhat, Dic, RHAT_THRESHOLD};

/// Blocks held fixed at their initial values. Used for reduced models.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenBlocks {
    pub alpha: bool,
    pub phi: bool,
    pub s: bool,
    pub lambda: bool,
    pub rho: bool,
    pub sigma: bool,
    pub gamma: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_chains: usize,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Explicit per-chain seeds; when absent chain `c` uses `seed + c`.
    pub chain_seeds: Option<Vec<u64>>,
    pub adapt_window: usize,
    pub target_accept: f64,
    /// Target for the 12-dimensional φ blocks.
    pub target_accept_vector: f64,
    /// Holds ρ at this value instead of sampling it.
    pub fixed_rho: Option<f64>,
    pub frozen: FrozenBlocks,
}

impl ChainConfig {
    /// 500,000 iterations, 300,000 burn-in, every 100th draw, 5 chains.
    pub fn full(seed: u64) -> Self {
        Self {
            n_chains: 5,
            n_iterations: 500_000,
            burn_in: 300_000,
            thin: 100,
            seed,
            chain_seeds: None,
            adapt_window: 50,
            target_accept: 0.44,
            target_accept_vector: 0.234,
            fixed_rho: None,
            frozen: FrozenBlocks::default(),
        }
    }

    /// 50,000 iterations, 30,000 burn-in, every 20th draw, 5 chains.
    pub fn desk(seed: u64) -> Self {
        Self { n_iterations: 50_000, burn_in: 30_000, thin: 20, ..Self::full(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_chains == 0 {
            return fail("n_chains must be at least 1".into());
        }
        if self.burn_in >= self.n_iterations {
            return fail(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            ));
        }
        if self.thin == 0 {
            return fail("thin must be at least 1".into());
        }
        if self.adapt_window == 0 {
            return fail("adapt_window must be at least 1".into());
        }
        for (name, t) in [("target_accept", self.target_accept), ("target_accept_vector", self.target_accept_vector)] {
            if !(t > 0.0 && t < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {t}"));
            }
        }
        if let Some(rho) = self.fixed_rho {
            if !(rho > 0.0 && rho < 1.0) {
                return fail(format!("fixed_rho must lie in (0, 1), got {rho}"));
            }
        }
        if let Some(seeds) = &self.chain_seeds {
            if seeds.len() != self.n_chains {
                return fail(format!("{} chain seeds given for {} chains", seeds.len(), self.n_chains));
            }
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.n_iterations - self.burn_in) / self.thin
    }

    pub fn seeds(&self) -> Vec<u64> {
        match &self.chain_seeds {
            Some(s) => s.clone(),
            None => (0..self.n_chains as u64).map(|c| self.seed.wrapping_add(c)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub chain: usize,
    pub iteration: usize,
    pub state: ModelState,
}

/// Retained draws of every chain, chain by chain.
#[derive(Clone, Debug)]
pub struct PosteriorSamples {
    pub years: usize,
    pub viruses: usize,
    pub n_chains: usize,
    pub seeds: Vec<u64>,
    pub draws: Vec<Draw>,
    /// Mean post-burn-in acceptance rate per block across chains.
    pub accept_rates: BTreeMap<String, f64>,
    /// Per-chain post-burn-in acceptance rates.
    pub chain_accept_rates: Vec<BTreeMap<String, f64>>,
    /// R-hat per scalar parameter; `None` for one chain or a constant parameter.
    pub rhat: Vec<(String, Option<f64>)>,
}

impl PosteriorSamples {
    /// Builds the summary from raw draws; used by the sampler and by readers of
    /// saved draws.
    pub fn from_draws(years: usize, viruses: usize, seeds: Vec<u64>, draws: Vec<Draw>) -> Self {
        let n_chains = seeds.len();
        let mut samples = Self {
            years,
            viruses,
            n_chains,
            seeds,
            draws,
            accept_rates: BTreeMap::new(),
            chain_accept_rates: Vec::new(),
            rhat: Vec::new(),
        };
        samples.rhat = samples.compute_rhat();
        samples
    }

    pub fn states(&self) -> impl Iterator<Item = &ModelState> {
        self.draws.iter().map(|d| &d.state)
    }

    /// Values of one scalar parameter (in [`parameter_names`] order) per chain.
    pub fn parameter_by_chain(&self, index: usize) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n_chains];
        for d in &self.draws {
            out[d.chain].push(d.state.flatten()[index]);
        }
        out
    }

    fn compute_rhat(&self) -> Vec<(String, Option<f64>)> {
        let names = parameter_names(self.years, self.viruses);
        let mut columns = vec![vec![Vec::new(); self.n_chains]; names.len()];
        for d in &self.draws {
            for (k, x) in d.state.flatten().into_iter().enumerate() {
                columns[k][d.chain].push(x);
            }
        }
        names.into_iter().zip(columns).map(|(n, c)| (n, rhat(&c))).collect()
    }

    /// Parameters whose R-hat exceeds [`RHAT_THRESHOLD`].
    pub fn rhat_flags(&self) -> Vec<&str> {
        self.rhat
            .iter()
            .filter(|(_, r)| r.is_some_and(|r| r > RHAT_THRESHOLD))
            .map(|(n, _)| n.as_str())
            .collect()
    }
}

fn check_inputs(_panel: &CountPanel, spec: &ProximitySpec, hyper: &HyperParams, config: &ChainConfig) -> Result<()> {
    config.validate()?;
    spec.validate()?;
    hyper.validate()
}

/// Runs chain `chain_index` of `config` and returns `(iteration, state)` pairs
/// of the retained draws.
pub fn run_chain(
    panel: &CountPanel,
    spec: &ProximitySpec,
    hyper: &HyperParams,
    config: &ChainConfig,
    chain_index: usize,
) -> Result<Vec<(usize, ModelState)>> {
    check_inputs(panel, spec, hyper, config)?;
    let seed = *config
        .seeds()
        .get(chain_index)
        .ok_or_else(|| Error::Config(format!("chain index {chain_index} out of range")))?;
    Ok(chain::Chain::new(panel, spec, hyper, config, seed)?.run().draws)
}

/// Runs all chains in parallel. Draw values depend only on the seeds, never on
/// the number of worker threads.
pub fn run_chains(
    panel: &CountPanel,
    spec: &ProximitySpec,
    hyper: &HyperParams,
    config: &ChainConfig,
) -> Result<PosteriorSamples> {
    check_inputs(panel, spec, hyper, config)?;
    let seeds = config.seeds();
    for (i, a) in seeds.iter().enumerate() {
        if seeds[..i].contains(a) {
            log::warn!("chain {} reuses seed {a}; its draws will duplicate an earlier chain", i + 1);
        }
    }
    let outputs = seeds
        .par_iter()
        .map(|&seed| Ok(chain::Chain::new(panel, spec, hyper, config, seed)?.run()))
        .collect::<Result<Vec<_>>>()?;

    let mut draws = Vec::with_capacity(config.n_chains * config.draws_per_chain());
    let mut chain_accept_rates = Vec::new();
    let mut totals: BTreeMap<String, f64> = BTreeMap::new();
    for (c, out) in outputs.into_iter().enumerate() {
        draws.extend(out.draws.into_iter().map(|(iteration, state)| Draw { chain: c, iteration, state }));
        let rates: BTreeMap<String, f64> = out.accept_rates.into_iter().collect();
        for (k, r) in &rates {
            *totals.entry(k.clone()).or_default() += r / config.n_chains as f64;
        }
        chain_accept_rates.push(rates);
    }
    let mut samples = PosteriorSamples::from_draws(panel.years(), panel.viruses(), seeds, draws);
    samples.accept_rates = totals;
    samples.chain_accept_rates = chain_accept_rates;
    let flagged = samples.rhat_flags();
    if !flagged.is_empty() {
        log::warn!("{} parameters have R-hat above {RHAT_THRESHOLD}: {}", flagged.len(), flagged.join(", "));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{log_likelihood, ModelState};

    fn small_config(seed: u64) -> ChainConfig {
        ChainConfig { n_chains: 3, n_iterations: 600, burn_in: 300, thin: 10, ..ChainConfig::desk(seed) }
    }

    fn panel(years: usize, viruses: usize) -> CountPanel {
        let n = 12 * years * viruses;
        let observed: Vec<u64> = (0..n).map(|i| 4 + (i * 7 % 11) as u64).collect();
        let expected: Vec<f64> = (0..n).map(|i| 5.0 + (i % 3) as f64).collect();
        let names = (0..viruses).map(|v| format!("v{v}")).collect();
        CountPanel::new(years, names, 2000, observed, expected, vec![]).unwrap()
    }

    #[test]
    fn config_invariants() {
        assert!(ChainConfig::desk(1).validate().is_ok());
        assert!(ChainConfig::full(1).validate().is_ok());
        let bad = [
            ChainConfig { burn_in: 50_000, ..ChainConfig::desk(1) },
            ChainConfig { thin: 0, ..ChainConfig::desk(1) },
            ChainConfig { n_chains: 0, ..ChainConfig::desk(1) },
            ChainConfig { fixed_rho: Some(1.0), ..ChainConfig::desk(1) },
            ChainConfig { chain_seeds: Some(vec![1]), ..ChainConfig::desk(1) },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
        let p = panel(1, 1);
        let c = ChainConfig { burn_in: 600, ..small_config(1) };
        assert!(run_chains(&p, &ProximitySpec::neighborhood(), &HyperParams::default(), &c).is_err());
    }

    #[test]
    fn draw_count_and_retained_iterations() {
        let p = panel(2, 2);
        let c = ChainConfig { n_iterations: 605, ..small_config(3) };
        let s = run_chains(&p, &ProximitySpec::neighborhood(), &HyperParams::default(), &c).unwrap();
        assert_eq!(s.draws.len(), 3 * 30);
        let iters: Vec<usize> = s.draws.iter().filter(|d| d.chain == 0).map(|d| d.iteration).collect();
        assert_eq!(iters.first(), Some(&310));
        assert_eq!(iters.last(), Some(&600));
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let p = panel(2, 2);
        let spec = ProximitySpec::autoregressive();
        let a = run_chain(&p, &spec, &HyperParams::default(), &small_config(9), 0).unwrap();
        let b = run_chain(&p, &spec, &HyperParams::default(), &small_config(9), 0).unwrap();
        assert_eq!(a, b);
        let c = run_chain(&p, &spec, &HyperParams::default(), &small_config(9), 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_seeds_give_identical_chains() {
        let p = panel(1, 2);
        let c = ChainConfig { chain_seeds: Some(vec![4, 4, 5]), ..small_config(0) };
        let s = run_chains(&p, &ProximitySpec::neighborhood(), &HyperParams::default(), &c).unwrap();
        let by = |k| s.draws.iter().filter(|d| d.chain == k).map(|d| d.state.clone()).collect::<Vec<_>>();
        assert_eq!(by(0), by(1));
        assert_ne!(by(0), by(2));
    }

    #[test]
    fn thread_count_does_not_change_draws() {
        let p = panel(2, 2);
        let spec = ProximitySpec::neighborhood();
        let c = small_config(21);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_chains(&p, &spec, &HyperParams::default(), &c).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(one.draws, four.draws);
    }

    #[test]
    fn single_chain_rhat_is_not_applicable() {
        let p = panel(1, 2);
        let c = ChainConfig { n_chains: 1, ..small_config(2) };
        let s = run_chains(&p, &ProximitySpec::neighborhood(), &HyperParams::default(), &c).unwrap();
        assert!(s.rhat.iter().all(|(_, r)| r.is_none()));
    }

    #[test]
    fn draws_respect_support() {
        let p = panel(3, 3);
        let spec = ProximitySpec::autoregressive();
        let s = run_chains(&p, &spec, &HyperParams::default(), &small_config(5)).unwrap();
        for st in s.states() {
            assert!(st.s.iter().all(|&x| x > 0.0 && x < 1.0));
            assert!(st.lambda > 0.0 && st.lambda < 1.0);
            assert!(st.rho > 0.0 && st.rho < 1.0);
            assert!(st.sigma.iter().all(|&x| x > 0.0));
            assert!(log_likelihood(st, &p).is_finite());
        }
        assert!(s.accept_rates.values().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn frozen_blocks_stay_at_initial_values() {
        let p = panel(2, 2);
        let frozen = FrozenBlocks { phi: true, gamma: true, ..Default::default() };
        let c = ChainConfig { frozen, fixed_rho: Some(0.3), ..small_config(1) };
        let s = run_chains(&p, &ProximitySpec::autoregressive(), &HyperParams::default(), &c).unwrap();
        let init = ModelState::initial(&p);
        for st in s.states() {
            assert_eq!(st.phi, init.phi);
            assert_eq!(st.gamma, init.gamma);
            assert_eq!(st.rho, 0.3);
        }
        assert!(!s.accept_rates.contains_key("rho"));
    }

    /// V = T = 1 with φ held at 0: the α marginal is known by quadrature.
    #[test]
    fn alpha_posterior_matches_quadrature() {
        let observed: Vec<u64> = vec![20, 25, 18, 22, 30, 19, 21, 24, 17, 23, 26, 20];
        let expected = vec![22.0; 12];
        let p = CountPanel::new(1, vec!["a".into()], 2000, observed.clone(), expected.clone(), vec![]).unwrap();
        let frozen = FrozenBlocks { phi: true, s: true, lambda: true, rho: true, sigma: true, gamma: true, alpha: false };
        let c = ChainConfig { n_chains: 4, n_iterations: 25_000, burn_in: 5_000, thin: 5, frozen, ..ChainConfig::desk(13) };
        let s = run_chains(&p, &ProximitySpec::neighborhood(), &HyperParams::default(), &c).unwrap();
        let alphas: Vec<f64> = s.states().map(|st| st.alpha[0]).collect();
        let mean = alphas.iter().sum::<f64>() / alphas.len() as f64;
        let sd = (alphas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / alphas.len() as f64).sqrt();

        let (ys, es) = (observed.iter().sum::<u64>() as f64, expected.iter().sum::<f64>());
        let log_post = |a: f64| ys * a - es * a.exp() - 0.5 * (a / 10.0).powi(2);
        let grid: Vec<f64> = (0..4001).map(|i| -0.5 + i as f64 * 0.00025).collect();
        let lp: Vec<f64> = grid.iter().map(|&a| log_post(a)).collect();
        let top = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lp.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let q_mean = grid.iter().zip(&w).map(|(a, w)| a * w).sum::<f64>() / z;
        let q_sd = (grid.iter().zip(&w).map(|(a, w)| (a - q_mean).powi(2) * w).sum::<f64>() / z).sqrt();

        // thinned draws are close to independent; allow for residual autocorrelation
        let se = q_sd / (alphas.len() as f64 / 4.0).sqrt();
        assert!((mean - q_mean).abs() < 3.0 * se, "mean {mean} vs {q_mean} (se {se})");
        assert!((sd / q_sd - 1.0).abs() < 0.1, "sd {sd} vs {q_sd}");
    }
}
