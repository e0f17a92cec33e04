//! The Bayesian model: Poisson counts whose log relative risks carry a
//! multivariate conditional-autoregressive (MCAR) random effect.
//!
//! Cells are indexed by month `m` (0..12), year `t` (0..T) and virus `v`
//! (0..V). Every per-cell table in this crate uses the same flat layout,
//! `(t * 12 + m) * V + v`: within a year the vector is month-major with the
//! viruses of one month contiguous, which is the ordering under which the
//! precision `kron(Ω, Λ)` applies literally.

mod density;
mod proximity;

use serde::{Deserialize, Serialize};

pub use density::{
    covariance_from_cholesky, ln_gamma, log_likelihood, log_posterior, log_prior_params,
    log_prior_phi, relative_risks, sample_mcar, McarPrior,
};
pub use proximity::{
    build_omega, build_w_autoregressive, build_w_neighborhood, month_distance, proximity_matrix,
};

use crate::error::{Error, Result};
use crate::linalg::LowerTriangularMatrix;

pub const MONTHS: usize = 12;

/// Flat index of cell `(m, t, v)` in a panel with `n_viruses` viruses.
#[inline]
pub fn cell_index(m: usize, t: usize, v: usize, n_viruses: usize) -> usize {
    (t * MONTHS + m) * n_viruses + v
}

/// Observed and expected monthly counts for `T` years and `V` viruses.
#[derive(Clone, Debug, PartialEq)]
pub struct CountPanel {
    years: usize,
    viruses: usize,
    first_year: i32,
    virus_names: Vec<String>,
    observed: Vec<u64>,
    expected: Vec<f64>,
    n_tested: Vec<u64>,
}

impl CountPanel {
    /// Validates shapes and that every expected count is strictly positive.
    ///
    /// Tables use the layout of [`cell_index`]. `n_tested` may be empty, in
    /// which case it is recorded as all zeros.
    pub fn new(
        years: usize,
        virus_names: Vec<String>,
        first_year: i32,
        observed: Vec<u64>,
        expected: Vec<f64>,
        n_tested: Vec<u64>,
    ) -> Result<Self> {
        let viruses = virus_names.len();
        if years == 0 || viruses == 0 {
            return Err(Error::Dimension("panel needs at least one year and one virus".into()));
        }
        let cells = MONTHS * years * viruses;
        if observed.len() != cells || expected.len() != cells {
            return Err(Error::Dimension(format!(
                "panel of 12x{years}x{viruses} needs {cells} cells, got {} observed and {} expected",
                observed.len(),
                expected.len()
            )));
        }
        let n_tested = if n_tested.is_empty() { vec![0; cells] } else { n_tested };
        if n_tested.len() != cells {
            return Err(Error::Dimension("n_tested table has the wrong size".into()));
        }
        if let Some(i) = expected.iter().position(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Schema(format!(
                "expected count at cell {i} is {} (must be strictly positive)",
                expected[i]
            )));
        }
        Ok(Self { years, viruses, first_year, virus_names, observed, expected, n_tested })
    }

    pub fn years(&self) -> usize {
        self.years
    }

    pub fn viruses(&self) -> usize {
        self.viruses
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn virus_names(&self) -> &[String] {
        &self.virus_names
    }

    pub fn observed(&self) -> &[u64] {
        &self.observed
    }

    pub fn expected(&self) -> &[f64] {
        &self.expected
    }

    pub fn n_tested(&self) -> &[u64] {
        &self.n_tested
    }

    pub fn observed_at(&self, m: usize, t: usize, v: usize) -> u64 {
        self.observed[cell_index(m, t, v, self.viruses)]
    }

    pub fn expected_at(&self, m: usize, t: usize, v: usize) -> f64 {
        self.expected[cell_index(m, t, v, self.viruses)]
    }

    pub fn n_cells(&self) -> usize {
        self.observed.len()
    }

    /// The first `years` years of the panel.
    pub fn truncate_years(&self, years: usize) -> Result<Self> {
        if years == 0 || years > self.years {
            return Err(Error::Config(format!(
                "cannot cut a {}-year panel to {years} years",
                self.years
            )));
        }
        let cells = MONTHS * years * self.viruses;
        Self::new(
            years,
            self.virus_names.clone(),
            self.first_year,
            self.observed[..cells].to_vec(),
            self.expected[..cells].to_vec(),
            self.n_tested[..cells].to_vec(),
        )
    }

    /// Reorders viruses so that new virus `k` is old virus `perm[k]`.
    pub fn permute_viruses(&self, perm: &[usize]) -> Self {
        let v = self.viruses;
        let remap = |old: &dyn Fn(usize) -> usize| -> Vec<usize> {
            (0..self.n_cells()).map(|i| old(i)).collect()
        };
        let src = remap(&|i| (i / v) * v + perm[i % v]);
        Self {
            years: self.years,
            viruses: v,
            first_year: self.first_year,
            virus_names: perm.iter().map(|&p| self.virus_names[p].clone()).collect(),
            observed: src.iter().map(|&i| self.observed[i]).collect(),
            expected: src.iter().map(|&i| self.expected[i]).collect(),
            n_tested: src.iter().map(|&i| self.n_tested[i]).collect(),
        }
    }
}

/// Which proximity matrix `W` links the months.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProximityKind {
    /// `w_ij = 1` for months within `neighbor_order` of each other.
    Neighborhood,
    /// `w_ij = ρ^d_ij` for month distance `d_ij`.
    Autoregressive,
}

impl std::str::FromStr for ProximityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "neigh" | "neighborhood" | "neighbourhood" => Ok(Self::Neighborhood),
            "auto" | "autoregressive" => Ok(Self::Autoregressive),
            other => Err(Error::Config(format!("unknown proximity kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProximitySpec {
    pub kind: ProximityKind,
    pub neighbor_order: usize,
    pub circular: bool,
}

impl ProximitySpec {
    pub fn neighborhood() -> Self {
        Self { kind: ProximityKind::Neighborhood, neighbor_order: 3, circular: true }
    }

    pub fn autoregressive() -> Self {
        Self { kind: ProximityKind::Autoregressive, neighbor_order: 3, circular: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.neighbor_order) {
            return Err(Error::Config(format!(
                "neighbor_order must be in [1, 5], got {}",
                self.neighbor_order
            )));
        }
        Ok(())
    }
}

impl Default for ProximitySpec {
    fn default() -> Self {
        Self::neighborhood()
    }
}

/// Closed interval `[lo, hi]` carrying a uniform prior.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }
}

/// Prior hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha_prior_mean: f64,
    pub alpha_prior_sd: f64,
    pub sigma_prior_shape: f64,
    pub sigma_prior_rate: f64,
    pub gamma_entry_prior_sd: f64,
    pub s_bounds: Bounds,
    pub lambda_bounds: Bounds,
    pub rho_bounds: Bounds,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            alpha_prior_mean: 0.0,
            alpha_prior_sd: 10.0,
            sigma_prior_shape: 1.0,
            sigma_prior_rate: 1.0,
            gamma_entry_prior_sd: 1.0,
            s_bounds: Bounds::UNIT,
            lambda_bounds: Bounds::UNIT,
            rho_bounds: Bounds::UNIT,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha_prior_sd", self.alpha_prior_sd),
            ("sigma_prior_shape", self.sigma_prior_shape),
            ("sigma_prior_rate", self.sigma_prior_rate),
            ("gamma_entry_prior_sd", self.gamma_entry_prior_sd),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {value}")));
            }
        }
        for (name, b) in [("s", self.s_bounds), ("lambda", self.lambda_bounds), ("rho", self.rho_bounds)]
        {
            if !(b.lo < b.hi) || b.lo < 0.0 || b.hi > 1.0 {
                return Err(Error::Config(format!(
                    "{name} bounds must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                    b.lo, b.hi
                )));
            }
        }
        Ok(())
    }
}

/// All latent parameters of the model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    /// Per-virus intercepts.
    pub alpha: Vec<f64>,
    /// Random effects in [`cell_index`] layout.
    pub phi: Vec<f64>,
    /// Year-to-year autocorrelation per virus.
    pub s: Vec<f64>,
    /// Monthly smoothing.
    pub lambda: f64,
    /// Decay of the autoregressive proximity weights.
    pub rho: f64,
    /// Diagonal of Σ.
    pub sigma: Vec<f64>,
    /// Unit-diagonal lower-triangular Γ.
    pub gamma: LowerTriangularMatrix,
}

impl ModelState {
    /// `α = 0`, `φ = 0`, `s = λ = ρ = 0.5`, `Σ = Γ = I`.
    pub fn neutral(years: usize, viruses: usize) -> Self {
        Self {
            alpha: vec![0.0; viruses],
            phi: vec![0.0; MONTHS * years * viruses],
            s: vec![0.5; viruses],
            lambda: 0.5,
            rho: 0.5,
            sigma: vec![1.0; viruses],
            gamma: LowerTriangularMatrix::identity(viruses),
        }
    }

    /// Moment-matched start: `α_v = log(ΣY / ΣE)`, everything else neutral.
    pub fn initial(panel: &CountPanel) -> Self {
        let v_count = panel.viruses();
        let mut state = Self::neutral(panel.years(), v_count);
        for v in 0..v_count {
            let (mut y, mut e) = (0.0, 0.0);
            for i in (v..panel.n_cells()).step_by(v_count) {
                y += panel.observed()[i] as f64;
                e += panel.expected()[i];
            }
            // keep the start finite when a virus was never observed
            state.alpha[v] = (y.max(0.5) / e).ln();
        }
        state
    }

    pub fn viruses(&self) -> usize {
        self.alpha.len()
    }

    pub fn years(&self) -> usize {
        self.phi.len() / (MONTHS * self.viruses())
    }

    pub fn phi_at(&self, m: usize, t: usize, v: usize) -> f64 {
        self.phi[cell_index(m, t, v, self.viruses())]
    }

    /// Λ⁻¹ = ΣΓΓᵀΣ.
    pub fn covariance(&self) -> crate::linalg::DenseMatrix {
        covariance_from_cholesky(&self.sigma, &self.gamma)
    }

    /// ΣΓ, which is the Cholesky factor of Λ⁻¹.
    pub fn covariance_factor(&self) -> LowerTriangularMatrix {
        let n = self.viruses();
        let mut l = LowerTriangularMatrix::identity(n);
        for i in 0..n {
            for j in 0..=i {
                l.set(i, j, self.sigma[i] * self.gamma.get(i, j));
            }
        }
        l
    }

    pub fn check_shapes(&self, panel: &CountPanel) -> Result<()> {
        let v = panel.viruses();
        if self.alpha.len() != v
            || self.s.len() != v
            || self.sigma.len() != v
            || self.gamma.dim() != v
            || self.phi.len() != panel.n_cells()
        {
            return Err(Error::Dimension(format!(
                "state does not match a 12x{}x{} panel",
                panel.years(),
                v
            )));
        }
        Ok(())
    }

    /// Reorders viruses so that new virus `k` is old virus `perm[k]`.
    ///
    /// Γ is re-derived from the permuted covariance so the result is again a
    /// unit-diagonal Cholesky parameterization of the same Λ⁻¹.
    pub fn permute_viruses(&self, perm: &[usize]) -> Result<Self> {
        let v = self.viruses();
        let cov = self.covariance();
        let permuted = crate::linalg::DenseMatrix::from_fn(v, v, |i, j| cov[(perm[i], perm[j])]);
        let l = crate::linalg::cholesky_factor(&permuted)?;
        let sigma: Vec<f64> = l.diagonal();
        let mut gamma = LowerTriangularMatrix::identity(v);
        for i in 0..v {
            for j in 0..i {
                gamma.set(i, j, l.get(i, j) / sigma[i]);
            }
        }
        let phi = (0..self.phi.len()).map(|i| self.phi[(i / v) * v + perm[i % v]]).collect();
        Ok(Self {
            alpha: perm.iter().map(|&p| self.alpha[p]).collect(),
            phi,
            s: perm.iter().map(|&p| self.s[p]).collect(),
            lambda: self.lambda,
            rho: self.rho,
            sigma,
            gamma,
        })
    }

    /// All scalar parameters in the order of [`parameter_names`].
    pub fn flatten(&self) -> Vec<f64> {
        let v = self.viruses();
        let mut out = Vec::with_capacity(parameter_count(self.years(), v));
        out.extend(&self.alpha);
        out.extend(&self.phi);
        out.extend(&self.s);
        out.push(self.lambda);
        out.push(self.rho);
        out.extend(&self.sigma);
        for i in 1..v {
            for j in 0..i {
                out.push(self.gamma.get(i, j));
            }
        }
        out
    }

    /// Inverse of [`ModelState::flatten`].
    pub fn from_flat(years: usize, viruses: usize, values: &[f64]) -> Result<Self> {
        if values.len() != parameter_count(years, viruses) {
            return Err(Error::Dimension(format!(
                "expected {} parameters for 12x{years}x{viruses}, got {}",
                parameter_count(years, viruses),
                values.len()
            )));
        }
        let cells = MONTHS * years * viruses;
        let mut it = values.iter().copied();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let alpha = take(viruses);
        let phi = take(cells);
        let s = take(viruses);
        let lr = take(2);
        let sigma = take(viruses);
        let lower = take(viruses * (viruses - 1) / 2);
        let mut gamma = LowerTriangularMatrix::identity(viruses);
        let mut k = 0;
        for i in 1..viruses {
            for j in 0..i {
                gamma.set(i, j, lower[k]);
                k += 1;
            }
        }
        Ok(Self { alpha, phi, s, lambda: lr[0], rho: lr[1], sigma, gamma })
    }
}

pub fn parameter_count(years: usize, viruses: usize) -> usize {
    viruses * 3 + MONTHS * years * viruses + 2 + viruses * (viruses - 1) / 2
}

/// Column names of flattened states, with 1-based indices:
/// `alpha[v]`, `phi[m,t,v]`, `s[v]`, `lambda`, `rho`, `sigma[v]`, `gamma[i,j]` (i > j).
pub fn parameter_names(years: usize, viruses: usize) -> Vec<String> {
    let mut names: Vec<String> = (1..=viruses).map(|v| format!("alpha[{v}]")).collect();
    for t in 1..=years {
        for m in 1..=MONTHS {
            for v in 1..=viruses {
                names.push(format!("phi[{m},{t},{v}]"));
            }
        }
    }
    names.extend((1..=viruses).map(|v| format!("s[{v}]")));
    names.push("lambda".into());
    names.push("rho".into());
    names.extend((1..=viruses).map(|v| format!("sigma[{v}]")));
    for i in 2..=viruses {
        for j in 1..i {
            names.push(format!("gamma[{i},{j}]"));
        }
    }
    names
}
