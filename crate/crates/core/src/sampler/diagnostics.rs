use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_likelihood, CountPanel, ModelState};

use super::PosteriorSamples;

pub const RHAT_THRESHOLD: f64 = 1.1;

/// Gelman–Rubin potential scale reduction factor.
///
/// `None` with fewer than two chains, fewer than two draws per chain, or when
/// every chain is constant. Chains of unequal length are truncated to the
/// shortest.
pub fn rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains.iter().map(Vec::len).min()?;
    let m = chains.len();
    if m < 2 || n < 2 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| c[..n].iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c[..n].iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w <= 0.0 {
        return None;
    }
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Some((var_plus / w).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean of α and φ.
    pub deviance_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
}

pub fn dic_from_deviances(deviances: &[f64], deviance_at_mean: f64) -> Dic {
    let mean_deviance = deviances.iter().sum::<f64>() / deviances.len() as f64;
    let p_d = mean_deviance - deviance_at_mean;
    Dic { mean_deviance, deviance_at_mean, p_d, dic: mean_deviance + p_d }
}

/// Deviance information criterion with `D(θ) = −2 log p(Y | θ)`.
pub fn dic(samples: &PosteriorSamples, panel: &CountPanel) -> Result<Dic> {
    const MIN_DRAWS: usize = 10;
    let n = samples.draws.len();
    if n < MIN_DRAWS {
        return Err(Error::TooFewDraws { needed: MIN_DRAWS, have: n });
    }
    let deviances: Vec<f64> = samples.states().map(|s| -2.0 * log_likelihood(s, panel)).collect();
    let first = &samples.draws[0].state;
    let mut mean = ModelState { alpha: vec![0.0; first.alpha.len()], phi: vec![0.0; first.phi.len()], ..first.clone() };
    for s in samples.states() {
        mean.alpha.iter_mut().zip(&s.alpha).for_each(|(a, x)| *a += x / n as f64);
        mean.phi.iter_mut().zip(&s.phi).for_each(|(a, x)| *a += x / n as f64);
    }
    let at_mean = -2.0 * log_likelihood(&mean, panel);
    if !at_mean.is_finite() {
        return Err(Error::NonFiniteDensity(at_mean));
    }
    Ok(dic_from_deviances(&deviances, at_mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::Draw;

    #[test]
    fn dic_by_hand() {
        let d = dic_from_deviances(&[10.0, 14.0], 11.0);
        assert_eq!((d.mean_deviance, d.p_d, d.dic), (12.0, 1.0, 13.0));
    }

    #[test]
    fn identical_draws_have_zero_effective_parameters() {
        let panel = CountPanel::new(1, vec!["a".into()], 2000, vec![3; 12], vec![2.5; 12], vec![]).unwrap();
        let mut st = ModelState::initial(&panel);
        st.phi[3] = 0.2;
        let draws = (0..12).map(|i| Draw { chain: 0, iteration: i, state: st.clone() }).collect();
        let samples = PosteriorSamples::from_draws(1, 1, vec![1], draws);
        let d = dic(&samples, &panel).unwrap();
        assert!(d.p_d.abs() < 1e-9);
        assert!((d.dic - -2.0 * log_likelihood(&st, &panel)).abs() < 1e-9);
    }

    #[test]
    fn dic_needs_ten_draws() {
        let panel = CountPanel::new(1, vec!["a".into()], 2000, vec![3; 12], vec![2.5; 12], vec![]).unwrap();
        let st = ModelState::initial(&panel);
        let draws = (0..9).map(|i| Draw { chain: 0, iteration: i, state: st.clone() }).collect();
        let samples = PosteriorSamples::from_draws(1, 1, vec![1], draws);
        assert!(matches!(dic(&samples, &panel), Err(Error::TooFewDraws { needed: 10, have: 9 })));
    }

    #[test]
    fn rhat_hand_example() {
        // means 2 and 4, within-chain variances 1 and 1, n = 3
        let chains = vec![vec![1.0, 2.0, 3.0], vec![3.0, 4.0, 5.0]];
        // B = 3 * 2 = 6, W = 1, var+ = 2/3 + 2 = 8/3
        assert!((rhat(&chains).unwrap() - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(rhat(&chains[..1]), None);
        assert_eq!(rhat(&[vec![1.0; 5], vec![1.0; 5]]), None);
    }

    #[test]
    fn rhat_near_one_for_iid_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let chains: Vec<Vec<f64>> =
            (0..4).map(|_| (0..2000).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).collect();
        let r = rhat(&chains).unwrap();
        assert!((r - 1.0).abs() < 0.01, "{r}");
    }
}
