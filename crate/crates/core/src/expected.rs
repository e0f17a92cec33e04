//! Expected counts from individual-level test episodes.
//!
//! Per virus, a logistic regression of test positivity on age, sex,
//! severity, month and a ridge-penalized year factor gives stratum-level
//! probabilities. Averaging those over the empirical (age, sex, severity,
//! year) mix gives one standardized probability per month, and the expected
//! count of a cell is the number tested times that probability.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_factor, DenseMatrix};
use crate::model::{cell_index, MONTHS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Severity {
    Gp,
    Hospital,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestResult {
    Positive,
    Negative,
    NotTested,
}

impl TestResult {
    pub fn is_tested(self) -> bool {
        self != TestResult::NotTested
    }

    /// Result of an episode built from several samples: positive if any
    /// sample was positive, negative if tested and never positive.
    fn merge(self, other: TestResult) -> TestResult {
        use TestResult::*;
        match (self, other) {
            (Positive, _) | (_, Positive) => Positive,
            (Negative, _) | (_, Negative) => Negative,
            _ => NotTested,
        }
    }
}

/// One test episode (or one raw sample, before aggregation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub patient_id: String,
    pub date: NaiveDate,
    pub age: u32,
    pub sex: Sex,
    pub severity: Severity,
    /// One entry per virus, in the order of the owning [`EpisodeSet`].
    pub results: Vec<TestResult>,
}

impl EpisodeRecord {
    /// 0-based month.
    pub fn month(&self) -> usize {
        self.date.month0() as usize
    }
}

/// Episodes together with the virus labels their results refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSet {
    viruses: Vec<String>,
    records: Vec<EpisodeRecord>,
    first_year: i32,
    years: usize,
}

impl EpisodeSet {
    pub fn new(viruses: Vec<String>, records: Vec<EpisodeRecord>) -> Result<Self> {
        if viruses.is_empty() {
            return Err(Error::Schema("episode data names no viruses".into()));
        }
        if records.is_empty() {
            return Err(Error::Schema("episode data has no records".into()));
        }
        for (i, r) in records.iter().enumerate() {
            if r.results.len() != viruses.len() {
                return Err(Error::MalformedRecord {
                    line: i + 2,
                    reason: format!("expected {} results, got {}", viruses.len(), r.results.len()),
                });
            }
            if !r.results.iter().any(|x| x.is_tested()) {
                return Err(Error::MalformedRecord {
                    line: i + 2,
                    reason: "no virus tested".into(),
                });
            }
        }
        let first_year = records.iter().map(|r| r.date.year()).min().unwrap();
        let last_year = records.iter().map(|r| r.date.year()).max().unwrap();
        Ok(Self { viruses, records, first_year, years: (last_year - first_year + 1) as usize })
    }

    pub fn viruses(&self) -> &[String] {
        &self.viruses
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn first_year(&self) -> i32 {
        self.first_year
    }

    pub fn years(&self) -> usize {
        self.years
    }

    pub fn virus_index(&self, name: &str) -> Result<usize> {
        self.viruses
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::Config(format!("unknown virus {name:?}")))
    }

    fn year_index(&self, r: &EpisodeRecord) -> usize {
        (r.date.year() - self.first_year) as usize
    }

    /// Episodes tested for each virus, in panel cell layout.
    pub fn n_tested_table(&self) -> Vec<u64> {
        self.count_table(|r| r.is_tested())
    }

    /// Positive episodes for each virus, in panel cell layout.
    pub fn positive_table(&self) -> Vec<u64> {
        self.count_table(|r| r == TestResult::Positive)
    }

    fn count_table(&self, keep: impl Fn(TestResult) -> bool) -> Vec<u64> {
        let v_count = self.viruses.len();
        let mut table = vec![0; MONTHS * self.years * v_count];
        for r in &self.records {
            let (m, t) = (r.month(), self.year_index(r));
            for (v, &res) in r.results.iter().enumerate() {
                if keep(res) {
                    table[cell_index(m, t, v, v_count)] += 1;
                }
            }
        }
        table
    }
}

/// Merges each patient's samples taken within `window_days` of the first
/// sample of the current episode into a single episode.
///
/// The episode keeps the date, age, sex and severity of its first sample; a
/// virus is positive if any merged sample was positive. Output is ordered
/// by date, then patient id.
pub fn aggregate_episodes(samples: &[EpisodeRecord], window_days: i64) -> Result<Vec<EpisodeRecord>> {
    if window_days < 1 {
        return Err(Error::Config(format!("window_days must be at least 1, got {window_days}")));
    }
    let mut by_patient: BTreeMap<&str, Vec<&EpisodeRecord>> = BTreeMap::new();
    for s in samples {
        by_patient.entry(s.patient_id.as_str()).or_default().push(s);
    }
    let mut episodes = Vec::new();
    for (_, mut recs) in by_patient {
        recs.sort_by_key(|r| r.date);
        let mut current: Option<EpisodeRecord> = None;
        for r in recs {
            match current.as_mut() {
                Some(ep) if (r.date - ep.date).num_days() <= window_days => {
                    if ep.results.len() != r.results.len() {
                        return Err(Error::Dimension("samples disagree on virus count".into()));
                    }
                    for (a, b) in ep.results.iter_mut().zip(&r.results) {
                        *a = a.merge(*b);
                    }
                }
                _ => {
                    if let Some(done) = current.replace(r.clone()) {
                        episodes.push(done);
                    }
                }
            }
        }
        episodes.extend(current);
    }
    episodes.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.patient_id.cmp(&b.patient_id)));
    Ok(episodes)
}

/// How age enters the regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgeCoding {
    /// A single slope in years.
    Linear,
    /// Indicators for `age >= edge` bands; ages below the first edge are the reference.
    Bands(Vec<u32>),
}

/// Whether month is a covariate of one per-virus model, or each month gets its own model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MonthModel {
    Factor,
    PerMonth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    /// L2 penalty on the year coefficients: `−(ridge_year / 2) Σ b_t²` is added
    /// to the log-likelihood.
    pub ridge_year: f64,
    pub age: AgeCoding,
    pub month_model: MonthModel,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        Self {
            ridge_year: 1.0,
            age: AgeCoding::Linear,
            month_model: MonthModel::Factor,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

/// Covariate layout shared by fitting and prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Design {
    pub age: AgeCoding,
    pub month_factor: bool,
    pub years: usize,
}

impl Design {
    pub fn terms(&self) -> Vec<String> {
        let mut terms = vec!["intercept".to_string()];
        match &self.age {
            AgeCoding::Linear => terms.push("age".into()),
            AgeCoding::Bands(edges) => terms.extend(edges.iter().map(|e| format!("age>={e}"))),
        }
        terms.push("sex:male".into());
        terms.push("severity:hospital".into());
        if self.month_factor {
            terms.extend((2..=MONTHS).map(|m| format!("month:{m}")));
        }
        terms.extend((1..=self.years).map(|t| format!("year:{t}")));
        terms
    }

    pub fn len(&self) -> usize {
        self.terms().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Covariate row for one stratum; `month` and `year` are 0-based.
    pub fn row(&self, age: u32, sex: Sex, severity: Severity, month: usize, year: usize) -> Vec<f64> {
        let mut x = vec![1.0];
        match &self.age {
            AgeCoding::Linear => x.push(age as f64),
            AgeCoding::Bands(edges) => {
                x.extend(edges.iter().map(|&e| if age >= e { 1.0 } else { 0.0 }))
            }
        }
        x.push(if sex == Sex::Male { 1.0 } else { 0.0 });
        x.push(if severity == Severity::Hospital { 1.0 } else { 0.0 });
        if self.month_factor {
            x.extend((1..MONTHS).map(|m| if m == month { 1.0 } else { 0.0 }));
        }
        x.extend((0..self.years).map(|t| if t == year { 1.0 } else { 0.0 }));
        x
    }

    /// Per-term penalty: `ridge` on year terms, zero elsewhere.
    pub fn penalty(&self, ridge: f64) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| if i >= n - self.years { ridge } else { 0.0 }).collect()
    }
}

/// A fitted logistic regression for one virus (and one month under [`MonthModel::PerMonth`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub virus: String,
    /// 0-based month this fit is restricted to, if any.
    pub month: Option<usize>,
    pub design: Design,
    pub terms: Vec<String>,
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Largest absolute component of the penalized score at the solution.
    pub score_residual: f64,
}

impl LogisticFit {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.terms.iter().position(|t| t == term).map(|i| self.coefficients[i])
    }

    pub fn predict(&self, age: u32, sex: Sex, severity: Severity, month: usize, year: usize) -> f64 {
        let x = self.design.row(age, sex, severity, month, year);
        logistic(crate::linalg::dot(&x, &self.coefficients))
    }
}

/// All logistic fits for one virus: one under `Factor`, twelve under `PerMonth`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirusModel {
    pub virus: String,
    pub fits: Vec<LogisticFit>,
}

impl VirusModel {
    pub fn converged(&self) -> bool {
        self.fits.iter().all(|f| f.converged)
    }

    fn fit_for_month(&self, month: usize) -> &LogisticFit {
        if self.fits.len() == 1 {
            &self.fits[0]
        } else {
            &self.fits[month]
        }
    }

    pub fn predict(&self, age: u32, sex: Sex, severity: Severity, month: usize, year: usize) -> f64 {
        self.fit_for_month(month).predict(age, sex, severity, month, year)
    }
}

pub(crate) fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Result of a penalized IRLS run.
#[derive(Clone, Debug, PartialEq)]
pub struct IrlsOutcome {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_residual: f64,
}

/// Coefficient magnitude treated as divergence (complete or quasi-complete separation).
const DIVERGENCE_BOUND: f64 = 50.0;

/// Penalized Bernoulli log-likelihood `Σ [y η − log(1 + e^η)] − ½ Σ pen_j β_j²`.
pub fn penalized_log_likelihood(x: &DenseMatrix, y: &[f64], penalty: &[f64], beta: &[f64]) -> f64 {
    let ll: f64 = (0..x.rows())
        .map(|i| {
            let eta = crate::linalg::dot(x.row(i), beta);
            // log(1 + e^η) without overflow
            let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
            y[i] * eta - softplus
        })
        .sum();
    ll - 0.5 * penalty.iter().zip(beta).map(|(p, b)| p * b * b).sum::<f64>()
}

/// Newton–Raphson (iteratively reweighted least squares) for penalized
/// logistic regression, with step halving when the objective would drop.
///
/// Returns `None` when the coefficients run off to infinity.
pub fn irls(
    x: &DenseMatrix,
    y: &[f64],
    penalty: &[f64],
    max_iterations: usize,
    tolerance: f64,
) -> Option<IrlsOutcome> {
    let (n, p) = (x.rows(), x.cols());
    assert_eq!(y.len(), n);
    assert_eq!(penalty.len(), p);
    let mut beta = vec![0.0; p];
    let mut objective = penalized_log_likelihood(x, y, penalty, &beta);
    let mut iterations = 0;
    loop {
        // score and penalized information
        let mut score: Vec<f64> = penalty.iter().zip(&beta).map(|(pen, b)| -pen * b).collect();
        let mut info = DenseMatrix::from_diagonal(penalty);
        for i in 0..n {
            let row = x.row(i);
            let mu = logistic(crate::linalg::dot(row, &beta));
            let w = mu * (1.0 - mu);
            let resid = y[i] - mu;
            for j in 0..p {
                if row[j] == 0.0 {
                    continue;
                }
                score[j] += row[j] * resid;
                let wj = w * row[j];
                for k in 0..=j {
                    info[(j, k)] += wj * row[k];
                }
            }
        }
        for j in 0..p {
            for k in 0..j {
                info[(k, j)] = info[(j, k)];
            }
        }
        let residual = score.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let step = match cholesky_factor(&info) {
            Ok(l) => l.gram_solve(&score),
            // weights collapsed: information is singular
            Err(_) => return None,
        };
        // Under separation the score vanishes while Newton steps stay O(1),
        // so a small score alone is not convergence.
        let step_size = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if residual < tolerance && step_size < 1e-4 {
            return Some(IrlsOutcome { coefficients: beta, converged: true, iterations, score_residual: residual });
        }
        if iterations >= max_iterations {
            return Some(IrlsOutcome { coefficients: beta, converged: false, iterations, score_residual: residual });
        }
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            let value = penalized_log_likelihood(x, y, penalty, &trial);
            if value >= objective - 1e-12 * objective.abs().max(1.0) {
                beta = trial;
                objective = value;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        iterations += 1;
        if !accepted {
            // no ascent direction left at machine precision
            continue;
        }
        if beta.iter().any(|b| !b.is_finite() || b.abs() > DIVERGENCE_BOUND) {
            return None;
        }
    }
}

/// Fits the model of [`LogisticOptions`] for one virus.
pub fn fit_logistic(set: &EpisodeSet, virus: &str, options: &LogisticOptions) -> Result<VirusModel> {
    let v = set.virus_index(virus)?;
    if !(options.ridge_year > 0.0) {
        return Err(Error::Config("ridge_year must be positive".into()));
    }
    let months: Vec<Option<usize>> = match options.month_model {
        MonthModel::Factor => vec![None],
        MonthModel::PerMonth => (0..MONTHS).map(Some).collect(),
    };
    let design = Design {
        age: options.age.clone(),
        month_factor: options.month_model == MonthModel::Factor,
        years: set.years(),
    };
    let mut fits = Vec::with_capacity(months.len());
    for month in months {
        let rows: Vec<&EpisodeRecord> = set
            .records()
            .iter()
            .filter(|r| r.results[v].is_tested() && month.map_or(true, |m| r.month() == m))
            .collect();
        let positives = rows.iter().filter(|r| r.results[v] == TestResult::Positive).count();
        if positives == 0 || positives == rows.len() {
            return Err(Error::InsufficientData {
                virus: virus.to_string(),
                reason: format!(
                    "{positives} positive of {} tested{}",
                    rows.len(),
                    month.map_or(String::new(), |m| format!(" in month {}", m + 1))
                ),
            });
        }
        let p = design.len();
        let mut data = Vec::with_capacity(rows.len() * p);
        for r in &rows {
            data.extend(design.row(r.age, r.sex, r.severity, r.month(), set.year_index(r)));
        }
        let x = DenseMatrix::from_vec(rows.len(), p, data)?;
        let y: Vec<f64> = rows
            .iter()
            .map(|r| if r.results[v] == TestResult::Positive { 1.0 } else { 0.0 })
            .collect();
        let outcome = irls(&x, &y, &design.penalty(options.ridge_year), options.max_iterations, options.tolerance)
            .ok_or_else(|| Error::Separation { virus: virus.to_string(), iterations: options.max_iterations })?;
        fits.push(LogisticFit {
            virus: virus.to_string(),
            month,
            design: design.clone(),
            terms: design.terms(),
            coefficients: outcome.coefficients,
            converged: outcome.converged,
            iterations: outcome.iterations,
            score_residual: outcome.score_residual,
        });
    }
    Ok(VirusModel { virus: virus.to_string(), fits })
}

/// Standardized monthly probabilities, one column per virus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizedProbs {
    pub viruses: Vec<String>,
    /// `p_s[m][v]`.
    pub p_s: Vec<Vec<f64>>,
}

impl StandardizedProbs {
    pub fn from_columns(viruses: Vec<String>, columns: &[[f64; MONTHS]]) -> Self {
        let p_s = (0..MONTHS).map(|m| columns.iter().map(|c| c[m]).collect()).collect();
        Self { viruses, p_s }
    }

    pub fn get(&self, month: usize, virus: usize) -> f64 {
        self.p_s[month][virus]
    }
}

/// Predicted probability averaged over the empirical (age, sex, severity, year)
/// strata of the episodes tested for this virus, separately for each month.
///
/// Strata weights are their counts across all months, so every month is
/// standardized to the same population.
pub fn standardize(model: &VirusModel, set: &EpisodeSet) -> Result<[f64; MONTHS]> {
    let v = set.virus_index(&model.virus)?;
    let mut strata: BTreeMap<(u32, Sex, Severity, usize), u64> = BTreeMap::new();
    let mut per_month = [0u64; MONTHS];
    for r in set.records().iter().filter(|r| r.results[v].is_tested()) {
        *strata.entry((r.age, r.sex, r.severity, set.year_index(r))).or_default() += 1;
        per_month[r.month()] += 1;
    }
    if let Some(m) = per_month.iter().position(|&n| n == 0) {
        return Err(Error::EmptyMonth { virus: model.virus.clone(), month: m + 1 });
    }
    let total: u64 = strata.values().sum();
    let mut out = [0.0; MONTHS];
    for (m, slot) in out.iter_mut().enumerate() {
        let weighted: f64 = strata
            .iter()
            .map(|(&(age, sex, sev, year), &n)| n as f64 * model.predict(age, sex, sev, m, year))
            .sum();
        *slot = weighted / total as f64;
    }
    Ok(out)
}

/// Expected counts `E_mtv = N_mtv · p̂ˢ_mv`, with cells where nothing was tested flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedCounts {
    pub years: usize,
    pub viruses: usize,
    pub values: Vec<f64>,
    /// `(month, year, virus)` (0-based) of cells with `N_mtv = 0`.
    pub zero_cells: Vec<(usize, usize, usize)>,
}

impl ExpectedCounts {
    /// Replaces non-positive expected counts by `floor`, logging each replacement.
    pub fn floored(&self, floor: f64) -> Vec<f64> {
        let mut values = self.values.clone();
        for &(m, t, v) in &self.zero_cells {
            log::warn!(
                "no tests for virus {} in month {}, year {}: expected count floored at {floor}",
                v + 1,
                m + 1,
                t + 1
            );
            values[cell_index(m, t, v, self.viruses)] = floor;
        }
        values
    }
}

pub fn expected_panel(probs: &StandardizedProbs, n_tested: &[u64], years: usize) -> Result<ExpectedCounts> {
    let v_count = probs.viruses.len();
    if n_tested.len() != MONTHS * years * v_count {
        return Err(Error::Dimension("n_tested table does not match 12 x years x viruses".into()));
    }
    let mut values = vec![0.0; n_tested.len()];
    let mut zero_cells = Vec::new();
    for t in 0..years {
        for m in 0..MONTHS {
            for v in 0..v_count {
                let i = cell_index(m, t, v, v_count);
                values[i] = n_tested[i] as f64 * probs.get(m, v);
                if n_tested[i] == 0 {
                    zero_cells.push((m, t, v));
                }
            }
        }
    }
    Ok(ExpectedCounts { years, viruses: v_count, values, zero_cells })
}

/// Fits, standardization and expected counts for every virus in `set`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpectedPipeline {
    pub models: Vec<VirusModel>,
    pub probs: StandardizedProbs,
    pub n_tested: Vec<u64>,
    pub expected: ExpectedCounts,
}

pub fn run_expected_pipeline(set: &EpisodeSet, options: &LogisticOptions) -> Result<ExpectedPipeline> {
    let mut models = Vec::new();
    let mut columns = Vec::new();
    for virus in set.viruses() {
        let model = fit_logistic(set, virus, options)?;
        columns.push(standardize(&model, set)?);
        models.push(model);
    }
    let probs = StandardizedProbs::from_columns(set.viruses().to_vec(), &columns);
    let n_tested = set.n_tested_table();
    let expected = expected_panel(&probs, &n_tested, set.years())?;
    Ok(ExpectedPipeline { models, probs, n_tested, expected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn record(id: &str, d: NaiveDate, results: Vec<TestResult>) -> EpisodeRecord {
        EpisodeRecord {
            patient_id: id.into(),
            date: d,
            age: 30,
            sex: Sex::Female,
            severity: Severity::Gp,
            results,
        }
    }

    use TestResult::{Negative as Neg, NotTested as Nt, Positive as Pos};

    #[test]
    fn samples_within_window_merge() {
        let samples = vec![
            record("p1", date(2010, 1, 1), vec![Neg, Neg]),
            record("p1", date(2010, 1, 11), vec![Pos, Nt]),
        ];
        let eps = aggregate_episodes(&samples, 30).unwrap();
        assert_eq!(eps.len(), 1);
        assert_eq!(eps[0].results, vec![Pos, Neg]);
        assert_eq!(eps[0].date, date(2010, 1, 1));
    }

    #[test]
    fn samples_outside_window_stay_separate() {
        let samples = vec![
            record("p1", date(2010, 1, 1), vec![Neg]),
            record("p1", date(2010, 2, 10), vec![Pos]),
        ];
        let eps = aggregate_episodes(&samples, 30).unwrap();
        assert_eq!(eps.len(), 2);
        let single = aggregate_episodes(&samples[..1], 30).unwrap();
        assert_eq!(single, vec![samples[0].clone()]);
        assert!(aggregate_episodes(&samples, 0).is_err());
    }

    #[test]
    fn window_is_anchored_at_first_sample() {
        // 20 + 20 days: third sample is 40 days after the episode start
        let samples = vec![
            record("p", date(2010, 1, 1), vec![Neg]),
            record("p", date(2010, 1, 21), vec![Neg]),
            record("p", date(2010, 2, 10), vec![Pos]),
            record("q", date(2010, 1, 5), vec![Pos]),
        ];
        let eps = aggregate_episodes(&samples, 30).unwrap();
        assert_eq!(eps.len(), 3);
        assert_eq!(eps.iter().filter(|e| e.patient_id == "p").count(), 2);
    }

    #[test]
    fn balanced_intercept_only_fit() {
        let x = DenseMatrix::from_fn(100, 1, |_, _| 1.0);
        let y: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let out = irls(&x, &y, &[0.0], 100, 1e-8).unwrap();
        assert!(out.converged);
        assert!(out.coefficients[0].abs() < 1e-6);
        assert!((logistic(out.coefficients[0]) - 0.5).abs() < 1e-6);
    }

    // Brute-force oracle: nested grid refinement of the penalized log-likelihood.
    fn grid_maximize(x: &DenseMatrix, y: &[f64], penalty: &[f64]) -> (f64, f64) {
        let (mut c0, mut c1, mut half) = (0.0, 0.0, 8.0);
        for _ in 0..12 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            let steps = 40;
            for i in 0..=steps {
                for j in 0..=steps {
                    let b0 = c0 - half + 2.0 * half * i as f64 / steps as f64;
                    let b1 = c1 - half + 2.0 * half * j as f64 / steps as f64;
                    let v = penalized_log_likelihood(x, y, penalty, &[b0, b1]);
                    if v > best.0 {
                        best = (v, b0, b1);
                    }
                }
            }
            (c0, c1) = (best.1, best.2);
            half /= 4.0;
        }
        (c0, c1)
    }

    #[test]
    fn irls_matches_grid_search_on_four_points() {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        let datasets: [(&[f64], [f64; 2]); 4] = [
            (&[0.0, 1.0, 1.0, 1.0], [0.0, 1.0]),
            (&[0.0, 1.0, 1.0, 0.0], [0.0, 0.0]),
            (&[0.0, 0.0, 1.0, 1.0], [0.5, 0.5]),
            (&[1.0, 1.0, 0.0, 1.0], [0.2, 2.0]),
        ];
        for (y, penalty) in datasets {
            let out = irls(&x, y, &penalty, 100, 1e-10).unwrap();
            assert!(out.converged);
            let (g0, g1) = grid_maximize(&x, y, &penalty);
            assert!((out.coefficients[0] - g0).abs() < 1e-3, "{y:?}: {:?} vs {g0}", out.coefficients);
            assert!((out.coefficients[1] - g1).abs() < 1e-3, "{y:?}: {:?} vs {g1}", out.coefficients);
        }
    }

    #[test]
    fn separated_data_without_penalty_diverges() {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 1.0]]);
        assert!(irls(&x, &[0.0, 0.0, 1.0, 1.0], &[0.0, 0.0], 100, 1e-8).is_none());
    }

    fn synthetic_set(seed: u64, years: usize, per_month: usize) -> EpisodeSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for t in 0..years {
            for m in 0..12 {
                for k in 0..per_month {
                    let age = rng.random_range(0..80);
                    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
                    let severity = if rng.random_bool(0.4) { Severity::Hospital } else { Severity::Gp };
                    let eta = -0.5 + 0.01 * age as f64 + 0.8 * ((m as f64) * std::f64::consts::PI / 6.0).cos();
                    let p = logistic(eta + 0.2 * t as f64);
                    let r1 = if rng.random_bool(p) { Pos } else { Neg };
                    let r2 = if rng.random_bool(0.3) { Pos } else if k % 7 == 0 { Nt } else { Neg };
                    records.push(EpisodeRecord {
                        patient_id: format!("{t}-{m}-{k}"),
                        date: date(2001 + t as i32, m as u32 + 1, 1 + (k % 28) as u32),
                        age,
                        sex,
                        severity,
                        results: vec![r1, r2],
                    });
                }
            }
        }
        EpisodeSet::new(vec!["a".into(), "b".into()], records).unwrap()
    }

    #[test]
    fn factor_fit_converges_and_reports_terms() {
        let set = synthetic_set(1, 3, 60);
        let model = fit_logistic(&set, "a", &LogisticOptions::default()).unwrap();
        assert_eq!(model.fits.len(), 1);
        let fit = &model.fits[0];
        assert!(fit.converged && fit.score_residual < 1e-8);
        assert_eq!(fit.terms.len(), 1 + 1 + 2 + 11 + 3);
        assert!(fit.coefficient("age").unwrap() > 0.0);
        assert!(fit.coefficient("month:7").unwrap() < 0.0);
    }

    #[test]
    fn per_month_fits() {
        let set = synthetic_set(2, 3, 60);
        let opts = LogisticOptions { month_model: MonthModel::PerMonth, ..Default::default() };
        let model = fit_logistic(&set, "a", &opts).unwrap();
        assert_eq!(model.fits.len(), 12);
        assert!(model.converged());
        let probs = standardize(&model, &set).unwrap();
        assert!(probs[0] > probs[6]);
    }

    #[test]
    fn empty_class_is_insufficient() {
        let recs = (1..=5).map(|d| record(&format!("{d}"), date(2001, 1, d), vec![Pos])).collect();
        let set = EpisodeSet::new(vec!["a".into()], recs).unwrap();
        assert!(matches!(
            fit_logistic(&set, "a", &LogisticOptions::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn infinite_ridge_removes_year_effects() {
        let set = synthetic_set(3, 3, 40);
        let strong = LogisticOptions { ridge_year: 1e12, tolerance: 1e-6, ..Default::default() };
        let fit = &fit_logistic(&set, "a", &strong).unwrap().fits[0];
        for t in 1..=3 {
            assert!(fit.coefficient(&format!("year:{t}")).unwrap().abs() < 1e-6);
        }
        // compare to the same model with no year terms at all
        let design = Design { age: AgeCoding::Linear, month_factor: true, years: 0 };
        let rows: Vec<_> = set.records().iter().filter(|r| r.results[0].is_tested()).collect();
        let mut data = Vec::new();
        for r in &rows {
            data.extend(design.row(r.age, r.sex, r.severity, r.month(), 0));
        }
        let x = DenseMatrix::from_vec(rows.len(), design.len(), data).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| if r.results[0] == Pos { 1.0 } else { 0.0 }).collect();
        let plain = irls(&x, &y, &vec![0.0; design.len()], 100, 1e-9).unwrap();
        for (a, b) in plain.coefficients.iter().zip(&fit.coefficients) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    fn fixed_model(coefs: Vec<f64>, design: Design) -> VirusModel {
        VirusModel {
            virus: "a".into(),
            fits: vec![LogisticFit {
                virus: "a".into(),
                month: None,
                terms: design.terms(),
                design,
                coefficients: coefs,
                converged: true,
                iterations: 0,
                score_residual: 0.0,
            }],
        }
    }

    #[test]
    fn standardization_cases() {
        let design = Design { age: AgeCoding::Linear, month_factor: false, years: 1 };
        // single stratum: the plain prediction
        let recs: Vec<_> = (0..12)
            .map(|m| record(&format!("{m}"), date(2001, m + 1, 3), vec![Pos]))
            .collect();
        let set = EpisodeSet::new(vec!["a".into()], recs).unwrap();
        let model = fixed_model(vec![-1.0, 0.01, 0.0, 0.0, 0.0], design.clone());
        let p = standardize(&model, &set).unwrap();
        let direct = logistic(-1.0 + 0.3);
        assert!(p.iter().all(|&x| (x - direct).abs() < 1e-15));

        // two equal strata at 0.2 and 0.4
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut recs = Vec::new();
        for m in 0..12u32 {
            for k in 0..5 {
                let mut a = record(&format!("f{m}{k}"), date(2001, m + 1, 3), vec![Neg]);
                a.sex = Sex::Female;
                let mut b = a.clone();
                b.patient_id = format!("m{m}{k}");
                b.sex = Sex::Male;
                recs.push(a);
                recs.push(b);
            }
        }
        let set = EpisodeSet::new(vec!["a".into()], recs).unwrap();
        let b0 = logit(0.2) - 0.3;
        let model = fixed_model(vec![b0, 0.01, logit(0.4) - logit(0.2), 0.0, 0.0], design);
        let p = standardize(&model, &set).unwrap();
        assert!(p.iter().all(|&x| (x - 0.3).abs() < 1e-12));
    }

    #[test]
    fn standardization_is_a_convex_combination_and_order_free() {
        let set = synthetic_set(4, 2, 30);
        let model = fit_logistic(&set, "a", &LogisticOptions::default()).unwrap();
        let p = standardize(&model, &set).unwrap();
        for (m, &pm) in p.iter().enumerate() {
            let preds: Vec<f64> = set
                .records()
                .iter()
                .map(|r| model.predict(r.age, r.sex, r.severity, m, set.year_index(r)))
                .collect();
            let lo = preds.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = preds.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(lo <= pm && pm <= hi && pm > 0.0 && pm < 1.0);
        }
        let mut shuffled = set.records().to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(8));
        let reordered = EpisodeSet::new(set.viruses().to_vec(), shuffled).unwrap();
        assert_eq!(standardize(&model, &reordered).unwrap(), p);
    }

    #[test]
    fn empty_month_is_reported() {
        let recs = vec![
            record("1", date(2001, 1, 1), vec![Pos]),
            record("2", date(2001, 2, 1), vec![Neg]),
        ];
        let set = EpisodeSet::new(vec!["a".into()], recs).unwrap();
        let design = Design { age: AgeCoding::Linear, month_factor: true, years: 1 };
        let model = fixed_model(vec![0.0; design.len()], design);
        assert!(matches!(standardize(&model, &set), Err(Error::EmptyMonth { month: 3, .. })));
    }

    #[test]
    fn expected_counts_are_products() {
        let probs = StandardizedProbs::from_columns(vec!["a".into(), "b".into()], &[[0.1; 12], [0.1; 12]]);
        let n = vec![200u64; 12 * 2 * 2];
        let e = expected_panel(&probs, &n, 2).unwrap();
        assert!(e.values.iter().all(|&x| (x - 20.0).abs() < 1e-12));
        assert!(e.zero_cells.is_empty());
        let doubled: Vec<u64> = n.iter().map(|x| 2 * x).collect();
        let e2 = expected_panel(&probs, &doubled, 2).unwrap();
        for (a, b) in e.values.iter().zip(&e2.values) {
            assert_eq!(2.0 * a, *b);
        }
        let mut n = n;
        n[cell_index(4, 1, 1, 2)] = 0;
        let e = expected_panel(&probs, &n, 2).unwrap();
        assert_eq!(e.zero_cells, vec![(4, 1, 1)]);
        assert_eq!(e.floored(0.5)[cell_index(4, 1, 1, 2)], 0.5);
    }

    #[test]
    fn tested_and_positive_tables() {
        let set = synthetic_set(5, 2, 10);
        let tested = set.n_tested_table();
        let pos = set.positive_table();
        assert_eq!(tested.len(), 12 * 2 * 2);
        assert!(tested.iter().step_by(2).all(|&n| n == 10));
        assert!(pos.iter().zip(&tested).all(|(p, n)| p <= n));
    }
}
