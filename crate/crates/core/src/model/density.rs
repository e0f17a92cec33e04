use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::{cholesky_factor, DenseMatrix, LowerTriangularMatrix};

use super::{build_omega, proximity_matrix, CountPanel, HyperParams, ModelState, ProximitySpec, MONTHS};

/// `log Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

pub(crate) fn poisson_log_pmf(y: u64, mean: f64) -> f64 {
    let y = y as f64;
    let ln_fact = ln_gamma(y + 1.0);
    if y == 0.0 {
        -mean
    } else {
        y * mean.ln() - mean - ln_fact
    }
}

/// Poisson log-likelihood of the observed counts with `RR = exp(α_v + φ_mtv)`.
pub fn log_likelihood(state: &ModelState, panel: &CountPanel) -> f64 {
    let v_count = panel.viruses();
    panel
        .observed()
        .iter()
        .zip(panel.expected())
        .zip(&state.phi)
        .enumerate()
        .map(|(i, ((&y, &e), &phi))| poisson_log_pmf(y, e * (state.alpha[i % v_count] + phi).exp()))
        .sum()
}

/// `RR_mtv = exp(α_v + φ_mtv)` in the panel's cell layout.
pub fn relative_risks(state: &ModelState) -> Vec<f64> {
    let v_count = state.viruses();
    state.phi.iter().enumerate().map(|(i, phi)| (state.alpha[i % v_count] + phi).exp()).collect()
}

/// Λ⁻¹ = ΣΓΓᵀΣ for diagonal `sigma` and lower-triangular `gamma`.
pub fn covariance_from_cholesky(sigma: &[f64], gamma: &LowerTriangularMatrix) -> DenseMatrix {
    let n = sigma.len();
    assert_eq!(gamma.dim(), n, "sigma and gamma dimensions differ");
    DenseMatrix::from_fn(n, n, |i, j| {
        let g: f64 = (0..=i.min(j)).map(|k| gamma.get(i, k) * gamma.get(j, k)).sum();
        sigma[i] * sigma[j] * g
    })
}

/// The MCAR prior `φ_t | φ_{t−1} ~ MVN(s ∘ φ_{t−1}, [Ω ⊗ Λ]⁻¹)` for fixed Ω and Λ.
///
/// Λ⁻¹ is held through its Cholesky factor `ΣΓ`, and Ω through its own, so
/// quadratic forms and log-determinants never need an inverse.
#[derive(Clone, Debug)]
pub struct McarPrior {
    omega: DenseMatrix,
    omega_factor: LowerTriangularMatrix,
    cov_factor: LowerTriangularMatrix,
}

impl McarPrior {
    pub fn new(state: &ModelState, spec: &ProximitySpec) -> Result<Self> {
        let w = proximity_matrix(spec, state.rho)?;
        let omega = build_omega(&w, state.lambda)?;
        Self::from_parts(omega, state.covariance_factor())
    }

    /// From Ω and the Cholesky factor of the between-virus covariance.
    pub fn from_parts(omega: DenseMatrix, cov_factor: LowerTriangularMatrix) -> Result<Self> {
        let omega_factor = cholesky_factor(&omega)?;
        Ok(Self { omega, omega_factor, cov_factor })
    }

    pub fn omega(&self) -> &DenseMatrix {
        &self.omega
    }

    pub fn omega_factor(&self) -> &LowerTriangularMatrix {
        &self.omega_factor
    }

    pub fn cov_factor(&self) -> &LowerTriangularMatrix {
        &self.cov_factor
    }

    pub fn viruses(&self) -> usize {
        self.cov_factor.dim()
    }

    /// `log det Ω`.
    pub fn omega_log_det(&self) -> f64 {
        self.omega_factor.gram_log_det()
    }

    /// Log normalizing constant of one year's density:
    /// `−(12V/2) log 2π + (V/2) log det Ω + (12/2) log det Λ`.
    pub fn year_log_normalizer(&self) -> f64 {
        let v = self.viruses() as f64;
        let m = MONTHS as f64;
        -0.5 * m * v * (2.0 * PI).ln() + 0.5 * v * self.omega_log_det()
            - 0.5 * m * self.cov_factor.gram_log_det()
    }

    /// `rᵀ (Ω ⊗ Λ) r` for a month-major residual of length `12V`.
    pub fn year_quadratic(&self, residual: &[f64]) -> f64 {
        let v_count = self.viruses();
        debug_assert_eq!(residual.len(), MONTHS * v_count);
        // z_m = (ΣΓ)⁻¹ r_m, so r_mᵀ Λ r_m' = z_m · z_m'
        let z: Vec<Vec<f64>> = residual.chunks(v_count).map(|r| self.cov_factor.solve(r)).collect();
        let mut quad = 0.0;
        for m in 0..MONTHS {
            for k in 0..MONTHS {
                let o = self.omega[(m, k)];
                if o != 0.0 {
                    quad += o * crate::linalg::dot(&z[m], &z[k]);
                }
            }
        }
        quad
    }

    /// Log prior density of all years of `phi`, the first year centred at zero.
    pub fn log_density(&self, phi: &[f64], s: &[f64]) -> f64 {
        let block = MONTHS * self.viruses();
        let years = phi.len() / block;
        let norm = self.year_log_normalizer();
        (0..years)
            .map(|t| {
                let r = year_residual(phi, s, t);
                norm - 0.5 * self.year_quadratic(&r)
            })
            .sum()
    }
}

/// `φ_t − s ∘ φ_{t−1}` (or `φ_0` for the first year), month-major.
pub(crate) fn year_residual(phi: &[f64], s: &[f64], t: usize) -> Vec<f64> {
    let v_count = s.len();
    let block = MONTHS * v_count;
    let current = &phi[t * block..(t + 1) * block];
    if t == 0 {
        return current.to_vec();
    }
    let previous = &phi[(t - 1) * block..t * block];
    current
        .iter()
        .zip(previous)
        .enumerate()
        .map(|(i, (c, p))| c - s[i % v_count] * p)
        .collect()
}

/// Sum over years of the MCAR log prior density of `φ`.
pub fn log_prior_phi(state: &ModelState, spec: &ProximitySpec) -> Result<f64> {
    let prior = McarPrior::new(state, spec)?;
    Ok(prior.log_density(&state.phi, &state.s))
}

fn normal_log_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * (2.0 * PI).ln() - sd.ln() - 0.5 * z * z
}

fn gamma_log_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

fn uniform_log_pdf(x: f64, bounds: super::Bounds) -> f64 {
    if bounds.contains(x) {
        -(bounds.hi - bounds.lo).ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log prior density of every non-φ parameter; `−∞` outside the support.
pub fn log_prior_params(state: &ModelState, hyper: &HyperParams) -> f64 {
    let mut lp = 0.0;
    for &a in &state.alpha {
        lp += normal_log_pdf(a, hyper.alpha_prior_mean, hyper.alpha_prior_sd);
    }
    let v = state.viruses();
    for i in 0..v {
        for j in 0..i {
            lp += normal_log_pdf(state.gamma.get(i, j), 0.0, hyper.gamma_entry_prior_sd);
        }
    }
    for &sd in &state.sigma {
        lp += gamma_log_pdf(sd, hyper.sigma_prior_shape, hyper.sigma_prior_rate);
    }
    for &s in &state.s {
        lp += uniform_log_pdf(s, hyper.s_bounds);
    }
    lp += uniform_log_pdf(state.lambda, hyper.lambda_bounds);
    lp += uniform_log_pdf(state.rho, hyper.rho_bounds);
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// Unnormalized log posterior; `−∞` when the state is outside the support
/// or implies an invalid precision.
pub fn log_posterior(
    state: &ModelState,
    panel: &CountPanel,
    spec: &ProximitySpec,
    hyper: &HyperParams,
) -> f64 {
    let lp = log_prior_params(state, hyper);
    if lp == f64::NEG_INFINITY || !(state.lambda < 1.0) || !(state.rho > 0.0 && state.rho < 1.0) {
        return f64::NEG_INFINITY;
    }
    match log_prior_phi(state, spec) {
        Ok(phi) => lp + phi + log_likelihood(state, panel),
        Err(_) => f64::NEG_INFINITY,
    }
}

/// One draw from `MVN(mean, [Ω ⊗ Λ]⁻¹)` in month-major order.
///
/// Uses the factored covariance `Ω⁻¹ ⊗ Λ⁻¹`: with `E` a 12 x V standard
/// normal matrix, `Z = L_Ω⁻ᵀ E L_Cᵀ` has exactly this distribution.
pub fn sample_mcar<R: Rng + ?Sized>(
    mean: &[f64],
    omega_factor: &LowerTriangularMatrix,
    cov_factor: &LowerTriangularMatrix,
    rng: &mut R,
) -> Vec<f64> {
    let v_count = cov_factor.dim();
    let months = omega_factor.dim();
    assert_eq!(mean.len(), months * v_count);
    let mut y = vec![0.0; months * v_count];
    for m in 0..months {
        let e: Vec<f64> = (0..v_count).map(|_| rng.sample(StandardNormal)).collect();
        for v in 0..v_count {
            y[m * v_count + v] = (0..=v).map(|k| cov_factor.get(v, k) * e[k]).sum();
        }
    }
    let mut out = mean.to_vec();
    for v in 0..v_count {
        let col: Vec<f64> = (0..months).map(|m| y[m * v_count + v]).collect();
        let z = omega_factor.solve_transpose(&col);
        for m in 0..months {
            out[m * v_count + v] += z[m];
        }
    }
    out
}
