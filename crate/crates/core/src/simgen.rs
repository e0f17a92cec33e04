//! Synthetic multi-virus surveillance data with known relative risks and a
//! known between-virus covariance.
//!
//! A simulation runs the full pipeline: individual episodes with covariates,
//! logistic infection probabilities including a seasonal month effect, the
//! expected-count fit, an MCAR draw of the random effects, and observed
//! counts built from `RR · E`.
//!
//! ```
//! use mcar::simgen::{scenario_three_virus, simulate};
//!
//! let mut scenario = scenario_three_virus();
//! scenario.n_years = 1;
//! scenario.samples_per_month = 40;
//! let out = simulate(&scenario, 7)?;
//! assert_eq!(out.panel.n_cells(), 12 * 3);
//! # Ok::<(), mcar::Error>(())
//! ```

use chrono::NaiveDate;
use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expected::{
    logistic, run_expected_pipeline, EpisodeRecord, EpisodeSet, ExpectedPipeline, LogisticOptions,
    Severity, Sex, TestResult,
};
use crate::linalg::{cholesky_factor, DenseMatrix};
use crate::model::{build_omega, cell_index, proximity_matrix, sample_mcar, CountPanel, ProximitySpec, MONTHS};

/// Floor substituted for expected counts in cells where nothing was tested.
pub const EXPECTED_FLOOR: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservedMode {
    /// `Y = round(RR · E)`.
    Product,
    /// `Y ~ Poisson(RR · E)`.
    Poisson,
}

/// One component of the age mixture: uniform over `lo..=hi` years.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeBand {
    pub lo: u32,
    pub hi: u32,
    pub weight: f64,
}

/// Marginal distributions of the patient covariates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    pub age_bands: Vec<AgeBand>,
    pub male_share: f64,
    pub hospital_share: f64,
}

impl Default for Demographics {
    fn default() -> Self {
        Self {
            age_bands: vec![
                AgeBand { lo: 0, hi: 5, weight: 0.5 },
                AgeBand { lo: 6, hi: 64, weight: 0.3 },
                AgeBand { lo: 65, hi: 90, weight: 0.2 },
            ],
            male_share: 0.5,
            hospital_share: 0.4,
        }
    }
}

impl Demographics {
    fn validate(&self) -> Result<()> {
        if self.age_bands.is_empty() || self.age_bands.iter().any(|b| b.lo > b.hi || !(b.weight >= 0.0)) {
            return Err(Error::Config("age bands need lo <= hi and non-negative weights".into()));
        }
        if !(self.age_bands.iter().map(|b| b.weight).sum::<f64>() > 0.0) {
            return Err(Error::Config("age band weights sum to zero".into()));
        }
        for (name, p) in [("male_share", self.male_share), ("hospital_share", self.hospital_share)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }

    fn sample_age<R: Rng>(&self, rng: &mut R) -> u32 {
        let total: f64 = self.age_bands.iter().map(|b| b.weight).sum();
        let mut u = rng.random::<f64>() * total;
        for b in &self.age_bands {
            if u < b.weight {
                return rng.random_range(b.lo..=b.hi);
            }
            u -= b.weight;
        }
        let last = self.age_bands.last().unwrap();
        rng.random_range(last.lo..=last.hi)
    }
}

/// `amplitude · cos(2π (m − peak) / 12)` for 0-based months.
pub fn cosine_season(peak_month: usize, amplitude: f64) -> [f64; MONTHS] {
    std::array::from_fn(|m| {
        amplitude * (2.0 * std::f64::consts::PI * (m as f64 - peak_month as f64) / MONTHS as f64).cos()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub name: String,
    pub n_viruses: usize,
    pub n_years: usize,
    pub first_year: i32,
    pub samples_per_month: usize,
    /// Month effects on the log-odds of infection, one row per virus.
    pub seasonal_effects: Vec<[f64; MONTHS]>,
    /// True between-virus covariance, row-major.
    pub true_cov: Vec<Vec<f64>>,
    pub s_true: Vec<f64>,
    pub lambda_true: f64,
    /// Only used by the autoregressive proximity.
    pub rho_true: f64,
    pub alpha_true: Vec<f64>,
    /// Standard deviation of the age, sex and severity log-odds coefficients.
    pub coef_sd: f64,
    pub proximity: ProximitySpec,
    pub observed_mode: ObservedMode,
    pub demographics: Demographics,
    /// When false the random effects are fixed at zero.
    pub random_effects: bool,
}

impl SimScenario {
    pub fn virus_names(&self) -> Vec<String> {
        (1..=self.n_viruses).map(|v| format!("virus{v}")).collect()
    }

    pub fn true_cov_matrix(&self) -> DenseMatrix {
        DenseMatrix::from_rows(&self.true_cov)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.n_viruses;
        if v == 0 || self.n_years == 0 || self.samples_per_month == 0 {
            return Err(Error::Config("scenario needs at least one virus, year and sample".into()));
        }
        let shapes = [
            ("seasonal_effects", self.seasonal_effects.len()),
            ("true_cov", self.true_cov.len()),
            ("s_true", self.s_true.len()),
            ("alpha_true", self.alpha_true.len()),
        ];
        for (name, len) in shapes {
            if len != v {
                return Err(Error::Dimension(format!("{name} has {len} rows for {v} viruses")));
            }
        }
        if self.true_cov.iter().any(|r| r.len() != v) {
            return Err(Error::Dimension("true_cov must be square".into()));
        }
        let cov = self.true_cov_matrix();
        cov.check_symmetric()?;
        cholesky_factor(&cov)?;
        if self.s_true.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::Config("s_true entries must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.lambda_true) || !(self.rho_true > 0.0 && self.rho_true < 1.0) {
            return Err(Error::Config("lambda_true must lie in [0, 1) and rho_true in (0, 1)".into()));
        }
        if !(self.coef_sd >= 0.0) {
            return Err(Error::Config(format!("coef_sd must be non-negative, got {}", self.coef_sd)));
        }
        self.proximity.validate()?;
        self.demographics.validate()
    }
}

fn unit_cov_with(v: usize, entries: &[(usize, usize, f64)]) -> Vec<Vec<f64>> {
    let mut cov: Vec<Vec<f64>> = (0..v).map(|i| (0..v).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for &(i, j, x) in entries {
        cov[i][j] = x;
        cov[j][i] = x;
    }
    cov
}

/// Three viruses over four years: a winter virus and a summer virus with
/// covariance −0.5, and an aseasonal virus independent of both.
pub fn scenario_three_virus() -> SimScenario {
    SimScenario {
        name: "three-virus".into(),
        n_viruses: 3,
        n_years: 4,
        first_year: 2001,
        samples_per_month: 200,
        seasonal_effects: vec![cosine_season(0, 1.0), cosine_season(6, 1.0), [0.0; MONTHS]],
        true_cov: unit_cov_with(3, &[(0, 1, -0.5)]),
        s_true: vec![0.5; 3],
        lambda_true: 0.5,
        rho_true: 0.5,
        alpha_true: vec![0.0; 3],
        coef_sd: 0.1,
        proximity: ProximitySpec::neighborhood(),
        observed_mode: ObservedMode::Product,
        demographics: Demographics::default(),
        random_effects: true,
    }
}

/// Five viruses over fifteen years with covariances −0.5 between viruses 1
/// and 2 and 0.5 between viruses 4 and 5; viruses 4 and 5 peak in autumn.
pub fn scenario_five_virus() -> SimScenario {
    SimScenario {
        name: "five-virus".into(),
        n_viruses: 5,
        n_years: 15,
        seasonal_effects: vec![
            cosine_season(0, 1.0),
            cosine_season(6, 1.0),
            [0.0; MONTHS],
            cosine_season(9, 1.0),
            cosine_season(9, 1.0),
        ],
        true_cov: unit_cov_with(5, &[(0, 1, -0.5), (3, 4, 0.5)]),
        s_true: vec![0.5; 5],
        alpha_true: vec![0.0; 5],
        ..scenario_three_virus()
    }
}

/// Looks a preset up by name (`three-virus` or `five-virus`).
pub fn preset(name: &str) -> Result<SimScenario> {
    match name {
        "three-virus" => Ok(scenario_three_virus()),
        "five-virus" => Ok(scenario_five_virus()),
        other => Err(Error::Config(format!("unknown preset {other:?}; use three-virus or five-virus"))),
    }
}

/// Per-virus log-odds coefficients of the simulated infection model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub intercept: f64,
    /// Per decade of age.
    pub age_decade: f64,
    pub male: f64,
    pub hospital: f64,
}

/// Everything a simulation produced, truth included.
#[derive(Clone, Debug)]
pub struct SimOutput {
    pub scenario: SimScenario,
    pub seed: u64,
    pub records: Vec<EpisodeRecord>,
    pub coefficients: Vec<Coefficients>,
    pub pipeline: ExpectedPipeline,
    pub panel: CountPanel,
    /// Relative risks in panel cell layout.
    pub true_rr: Vec<f64>,
    pub true_phi: Vec<f64>,
}

/// Serializable ground truth for scoring a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub seed: u64,
    pub scenario: SimScenario,
    pub viruses: Vec<String>,
    pub coefficients: Vec<Coefficients>,
    /// `(month, year, virus)` 1-based, with relative risk and random effect.
    pub cells: Vec<TruthCell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthCell {
    pub month: usize,
    pub year: usize,
    pub virus: usize,
    pub rr: f64,
    pub phi: f64,
}

impl SimOutput {
    pub fn truth(&self) -> Truth {
        let v_count = self.scenario.n_viruses;
        let mut cells = Vec::with_capacity(self.true_rr.len());
        for t in 0..self.scenario.n_years {
            for m in 0..MONTHS {
                for v in 0..v_count {
                    let i = cell_index(m, t, v, v_count);
                    cells.push(TruthCell { month: m + 1, year: t + 1, virus: v + 1, rr: self.true_rr[i], phi: self.true_phi[i] });
                }
            }
        }
        Truth {
            seed: self.seed,
            scenario: self.scenario.clone(),
            viruses: self.scenario.virus_names(),
            coefficients: self.coefficients.clone(),
            cells,
        }
    }
}

/// Draws `φ` year by year from the MCAR conditional of `scenario`.
pub fn draw_random_effects<R: Rng>(scenario: &SimScenario, rng: &mut R) -> Result<Vec<f64>> {
    let v_count = scenario.n_viruses;
    let block = MONTHS * v_count;
    let w = proximity_matrix(&scenario.proximity, scenario.rho_true)?;
    let omega_factor = cholesky_factor(&build_omega(&w, scenario.lambda_true)?)?;
    let cov_factor = cholesky_factor(&scenario.true_cov_matrix())?;
    let mut phi = Vec::with_capacity(block * scenario.n_years);
    let mut mean = vec![0.0; block];
    for _ in 0..scenario.n_years {
        let year = sample_mcar(&mean, &omega_factor, &cov_factor, rng);
        mean = year.iter().enumerate().map(|(i, x)| scenario.s_true[i % v_count] * x).collect();
        phi.extend(year);
    }
    Ok(phi)
}

pub fn simulate(scenario: &SimScenario, seed: u64) -> Result<SimOutput> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v_count = scenario.n_viruses;

    let coef = Normal::new(0.0, scenario.coef_sd).map_err(|e| Error::Config(e.to_string()))?;
    let coefficients: Vec<Coefficients> = (0..v_count)
        .map(|_| Coefficients {
            intercept: 0.0,
            age_decade: coef.sample(&mut rng),
            male: coef.sample(&mut rng),
            hospital: coef.sample(&mut rng),
        })
        .collect();

    let demo = &scenario.demographics;
    let male = Bernoulli::new(demo.male_share).map_err(|e| Error::Config(e.to_string()))?;
    let hospital = Bernoulli::new(demo.hospital_share).map_err(|e| Error::Config(e.to_string()))?;
    let mut records = Vec::with_capacity(scenario.n_years * MONTHS * scenario.samples_per_month);
    for t in 0..scenario.n_years {
        let year = scenario.first_year + t as i32;
        for m in 0..MONTHS {
            for i in 0..scenario.samples_per_month {
                let date = NaiveDate::from_ymd_opt(year, m as u32 + 1, 1 + (i % 28) as u32)
                    .ok_or_else(|| Error::Config(format!("year {year} out of range")))?;
                let age = demo.sample_age(&mut rng);
                let sex = if male.sample(&mut rng) { Sex::Male } else { Sex::Female };
                let severity = if hospital.sample(&mut rng) { Severity::Hospital } else { Severity::Gp };
                let results = coefficients
                    .iter()
                    .zip(&scenario.seasonal_effects)
                    .map(|(c, season)| {
                        let eta = c.intercept
                            + c.age_decade * age as f64 / 10.0
                            + if sex == Sex::Male { c.male } else { 0.0 }
                            + if severity == Severity::Hospital { c.hospital } else { 0.0 }
                            + season[m];
                        if rng.random::<f64>() < logistic(eta) {
                            TestResult::Positive
                        } else {
                            TestResult::Negative
                        }
                    })
                    .collect();
                records.push(EpisodeRecord {
                    patient_id: format!("S{year}{:02}{i:05}", m + 1),
                    date,
                    age,
                    sex,
                    severity,
                    results,
                });
            }
        }
    }

    let set = EpisodeSet::new(scenario.virus_names(), records)?;
    let pipeline = run_expected_pipeline(&set, &LogisticOptions::default())?;
    for model in pipeline.models.iter().filter(|m| !m.converged()) {
        log::warn!("expected-count fit for {} did not converge", model.virus);
    }
    let expected = pipeline.expected.floored(EXPECTED_FLOOR);

    let true_phi = if scenario.random_effects {
        draw_random_effects(scenario, &mut rng)?
    } else {
        vec![0.0; expected.len()]
    };
    let true_rr: Vec<f64> = true_phi
        .iter()
        .enumerate()
        .map(|(i, phi)| (scenario.alpha_true[i % v_count] + phi).exp())
        .collect();
    let observed = true_rr
        .iter()
        .zip(&expected)
        .map(|(rr, e)| -> Result<u64> {
            let mean = rr * e;
            Ok(match scenario.observed_mode {
                ObservedMode::Product => mean.round() as u64,
                ObservedMode::Poisson => {
                    Poisson::new(mean).map_err(|err| Error::Config(err.to_string()))?.sample(&mut rng) as u64
                }
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let panel = CountPanel::new(
        scenario.n_years,
        scenario.virus_names(),
        scenario.first_year,
        observed,
        expected,
        pipeline.n_tested.clone(),
    )?;
    Ok(SimOutput {
        scenario: scenario.clone(),
        seed,
        records: set.records().to_vec(),
        coefficients,
        pipeline,
        panel,
        true_rr,
        true_phi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::kronecker;

    fn small(mut s: SimScenario) -> SimScenario {
        s.n_years = 2;
        s.samples_per_month = 60;
        s
    }

    #[test]
    fn three_virus_preset() {
        let s = scenario_three_virus();
        let cov = s.true_cov_matrix();
        assert_eq!((s.n_viruses, s.n_years, s.samples_per_month), (3, 4, 200));
        assert_eq!(cov[(0, 1)], -0.5);
        assert_eq!(cov[(0, 2)], 0.0);
        assert_eq!(cov[(1, 2)], 0.0);
        assert!(s.s_true.iter().all(|&x| x == 0.5) && s.lambda_true == 0.5);
        // winter peak, summer peak, flat
        assert_eq!(s.seasonal_effects[0][0], 1.0);
        assert!((s.seasonal_effects[1][6] - 1.0).abs() < 1e-12);
        assert!(s.seasonal_effects[2].iter().all(|&x| x == 0.0));
        s.validate().unwrap();
    }

    #[test]
    fn five_virus_preset() {
        let s = scenario_five_virus();
        let cov = s.true_cov_matrix();
        assert_eq!(s.n_years, 15);
        assert_eq!(cov[(3, 4)], 0.5);
        assert_eq!(cov[(0, 1)], -0.5);
        for v in [0, 1, 3, 4] {
            assert_eq!(cov[(2, v)], 0.0);
        }
        assert!(s.seasonal_effects[3][9] > 0.99 && s.seasonal_effects[4][9] > 0.99);
        s.validate().unwrap();
        assert!(preset("seven-virus").is_err());
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = scenario_three_virus();
        s.true_cov[0][1] = 2.0;
        s.true_cov[1][0] = 2.0;
        assert!(s.validate().is_err());
        let mut s = scenario_three_virus();
        s.s_true.pop();
        assert!(matches!(s.validate(), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_random_effects_reproduce_expected_counts() {
        let mut s = small(scenario_three_virus());
        s.random_effects = false;
        let out = simulate(&s, 3).unwrap();
        for (y, e) in out.panel.observed().iter().zip(out.panel.expected()) {
            assert_eq!(*y, e.round() as u64);
        }
        assert!(out.true_rr.iter().all(|&r| r == 1.0));
    }

    #[test]
    fn simulation_is_deterministic() {
        let s = small(scenario_three_virus());
        let a = simulate(&s, 11).unwrap();
        let b = simulate(&s, 11).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.true_phi, b.true_phi);
        let c = simulate(&s, 12).unwrap();
        assert_ne!(a.true_phi, c.true_phi);
    }

    #[test]
    fn product_mode_log_ratio_tracks_random_effects() {
        let out = simulate(&small(scenario_three_virus()), 5).unwrap();
        for i in 0..out.panel.n_cells() {
            let (y, e) = (out.panel.observed()[i] as f64, out.panel.expected()[i]);
            assert!((y - out.true_rr[i] * e).abs() <= 0.5 + 1e-9);
        }
        assert!(out.panel.expected().iter().all(|&e| e > 0.0));
        assert_eq!(out.panel.n_tested().iter().sum::<u64>(), 2 * 12 * 60 * 3);
    }

    #[test]
    fn poisson_mode_is_near_the_mean() {
        let mut s = small(scenario_three_virus());
        s.observed_mode = ObservedMode::Poisson;
        let out = simulate(&s, 8).unwrap();
        let total_y: f64 = out.panel.observed().iter().map(|&y| y as f64).sum();
        let total_mu: f64 = out.true_rr.iter().zip(out.panel.expected()).map(|(r, e)| r * e).sum();
        assert!((total_y - total_mu).abs() < 4.0 * total_mu.sqrt());
    }

    #[test]
    fn simulated_positivity_follows_season() {
        let s = small(scenario_three_virus());
        let out = simulate(&s, 2).unwrap();
        let p = &out.pipeline.probs;
        assert!(p.get(0, 0) > p.get(6, 0));
        assert!(p.get(6, 1) > p.get(0, 1));
    }

    #[test]
    fn truth_has_one_cell_per_panel_cell() {
        let out = simulate(&small(scenario_three_virus()), 1).unwrap();
        let truth = out.truth();
        assert_eq!(truth.cells.len(), out.panel.n_cells());
        let json = serde_json::to_string(&truth).unwrap();
        let back: Truth = serde_json::from_str(&json).unwrap();
        assert_eq!(back, truth);
    }

    /// Innovations of one year share the covariance `kron(Ω, Λ)⁻¹`.
    #[test]
    fn random_effect_covariance_matches_kronecker() {
        let mut s = scenario_three_virus();
        s.n_viruses = 2;
        s.n_years = 1;
        s.true_cov = vec![vec![1.0, -0.5], vec![-0.5, 1.0]];
        s.s_true = vec![0.5; 2];
        s.alpha_true = vec![0.0; 2];
        s.seasonal_effects.truncate(2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        let dim = 24;
        let mut acc = vec![0.0; dim * dim];
        for _ in 0..n {
            let x = draw_random_effects(&s, &mut rng).unwrap();
            for i in 0..dim {
                for j in 0..dim {
                    acc[i * dim + j] += x[i] * x[j] / n as f64;
                }
            }
        }
        let w = proximity_matrix(&s.proximity, s.rho_true).unwrap();
        let omega = build_omega(&w, s.lambda_true).unwrap();
        let omega_inv = nalgebra::DMatrix::from_row_slice(12, 12, omega.as_slice()).try_inverse().unwrap();
        let omega_inv = DenseMatrix::from_vec(12, 12, omega_inv.transpose().as_slice().to_vec()).unwrap();
        let truth = kronecker(&omega_inv, &s.true_cov_matrix());
        for i in 0..dim {
            let rel = (acc[i * dim + i] - truth[(i, i)]).abs() / truth[(i, i)];
            assert!(rel < 0.05, "variance {i}: {} vs {}", acc[i * dim + i], truth[(i, i)]);
        }
        // virus 1 / virus 2 within the same month
        for m in 0..12 {
            let (a, b) = (2 * m, 2 * m + 1);
            let rel = (acc[a * dim + b] - truth[(a, b)]).abs() / truth[(a, b)].abs();
            assert!(rel < 0.1, "covariance month {m}: {} vs {}", acc[a * dim + b], truth[(a, b)]);
        }
    }
}
