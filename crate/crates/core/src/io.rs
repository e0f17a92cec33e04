//! CSV readers and writers for episodes, panels, expected counts, posterior
//! draws and reports.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a file
//! read back reproduces the values exactly and repeated runs are
//! byte-identical.

use std::io::{Read, Write};

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::expected::{EpisodeRecord, ExpectedPipeline, Severity, Sex, TestResult};
use crate::inference::{CovarianceReport, RelativeRiskSummary, YearCut};
use crate::model::{cell_index, parameter_names, CountPanel, ModelState, MONTHS};
use crate::sampler::{Draw, PosteriorSamples};

const EPISODE_FIXED: [&str; 5] = ["patient_id", "date", "age", "sex", "severity"];
const PANEL_HEADER: [&str; 6] = ["month", "year", "virus", "observed", "expected", "n_tested"];

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn header(rdr: &mut csv::Reader<impl Read>) -> Result<Vec<String>> {
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

fn malformed(line: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRecord { line, reason: reason.into() }
}

fn parse_field<T: std::str::FromStr>(value: &str, line: usize, column: &str) -> Result<T> {
    value.parse().map_err(|_| malformed(line, format!("cannot parse {column} value {value:?}")))
}

/// Reads an episode CSV: `patient_id, date, age, sex, severity`, then one
/// column per virus holding `pos`, `neg` or `nt`. Returns the virus names and
/// the records.
pub fn read_episodes<R: Read>(r: R) -> Result<(Vec<String>, Vec<EpisodeRecord>)> {
    let mut rdr = reader(r);
    let head = header(&mut rdr)?;
    if head.len() <= EPISODE_FIXED.len() || head[..EPISODE_FIXED.len()] != EPISODE_FIXED {
        return Err(Error::Schema(format!(
            "episode header must start with {} and name at least one virus",
            EPISODE_FIXED.join(",")
        )));
    }
    let viruses = head[EPISODE_FIXED.len()..].to_vec();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row?;
        if row.len() != head.len() {
            return Err(malformed(line, format!("expected {} fields, got {}", head.len(), row.len())));
        }
        let date = NaiveDate::parse_from_str(&row[1], "%Y-%m-%d")
            .map_err(|_| malformed(line, format!("invalid date {:?}", &row[1])))?;
        let sex = match &row[3] {
            "F" => Sex::Female,
            "M" => Sex::Male,
            other => return Err(malformed(line, format!("unknown sex code {other:?}"))),
        };
        let severity = match &row[4] {
            "GP" => Severity::Gp,
            "HOSP" => Severity::Hospital,
            other => return Err(malformed(line, format!("unknown severity code {other:?}"))),
        };
        let results = row
            .iter()
            .skip(EPISODE_FIXED.len())
            .map(|x| match x {
                "pos" => Ok(TestResult::Positive),
                "neg" => Ok(TestResult::Negative),
                "nt" => Ok(TestResult::NotTested),
                other => Err(malformed(line, format!("unknown result code {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(EpisodeRecord {
            patient_id: row[0].to_string(),
            date,
            age: parse_field(&row[2], line, "age")?,
            sex,
            severity,
            results,
        });
    }
    Ok((viruses, records))
}

pub fn write_episodes<W: Write>(w: W, viruses: &[String], records: &[EpisodeRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(EPISODE_FIXED.iter().copied().chain(viruses.iter().map(String::as_str)))?;
    for r in records {
        let mut row = vec![
            r.patient_id.clone(),
            r.date.format("%Y-%m-%d").to_string(),
            r.age.to_string(),
            match r.sex {
                Sex::Female => "F",
                Sex::Male => "M",
            }
            .into(),
            match r.severity {
                Severity::Gp => "GP",
                Severity::Hospital => "HOSP",
            }
            .into(),
        ];
        row.extend(r.results.iter().map(|x| {
            match x {
                TestResult::Positive => "pos",
                TestResult::Negative => "neg",
                TestResult::NotTested => "nt",
            }
            .to_string()
        }));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a panel with one row per cell, ordered by year, month, virus.
pub fn write_panel<W: Write>(w: W, panel: &CountPanel) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(PANEL_HEADER)?;
    let v_count = panel.viruses();
    for t in 0..panel.years() {
        for m in 0..MONTHS {
            for v in 0..v_count {
                let i = cell_index(m, t, v, v_count);
                let n_tested = panel.n_tested().get(i).map(u64::to_string).unwrap_or_default();
                wtr.write_record([
                    (m + 1).to_string(),
                    (panel.first_year() + t as i32).to_string(),
                    panel.virus_names()[v].clone(),
                    panel.observed()[i].to_string(),
                    panel.expected()[i].to_string(),
                    n_tested,
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a panel CSV. Every (month, year, virus) cell must appear exactly
/// once; viruses keep their order of first appearance. `n_tested` may be left
/// blank in every row.
pub fn read_panel<R: Read>(r: R) -> Result<CountPanel> {
    let mut rdr = reader(r);
    let head = header(&mut rdr)?;
    if head != PANEL_HEADER {
        return Err(Error::Schema(format!("panel header must be {}", PANEL_HEADER.join(","))));
    }
    struct Row {
        month: usize,
        year: i32,
        virus: String,
        observed: u64,
        expected: f64,
        n_tested: Option<u64>,
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
        if rec.len() != PANEL_HEADER.len() {
            return Err(Error::Schema(format!("line {line}: expected 6 fields, got {}", rec.len())));
        }
        let month: usize = parse_field(&rec[0], line, "month")?;
        if !(1..=MONTHS).contains(&month) {
            return Err(malformed(line, format!("month {month} outside 1..12")));
        }
        rows.push(Row {
            month,
            year: parse_field(&rec[1], line, "year")?,
            virus: rec[2].to_string(),
            observed: parse_field(&rec[3], line, "observed")?,
            expected: parse_field(&rec[4], line, "expected")?,
            n_tested: if rec[5].is_empty() { None } else { Some(parse_field(&rec[5], line, "n_tested")?) },
        });
    }
    if rows.is_empty() {
        return Err(Error::Schema("panel has no rows".into()));
    }
    let mut viruses: Vec<String> = Vec::new();
    for r in &rows {
        if !viruses.contains(&r.virus) {
            viruses.push(r.virus.clone());
        }
    }
    let first_year = rows.iter().map(|r| r.year).min().unwrap();
    let last_year = rows.iter().map(|r| r.year).max().unwrap();
    let years = (last_year - first_year + 1) as usize;
    let v_count = viruses.len();
    let n = MONTHS * years * v_count;
    if rows.len() != n {
        return Err(Error::Schema(format!(
            "panel has {} rows, expected {n} (12 months x {years} years x {v_count} viruses)",
            rows.len()
        )));
    }
    let blank_n = rows.iter().all(|r| r.n_tested.is_none());
    if !blank_n && rows.iter().any(|r| r.n_tested.is_none()) {
        return Err(Error::Schema("n_tested must be given in every row or in none".into()));
    }
    let mut seen = vec![false; n];
    let mut observed = vec![0; n];
    let mut expected = vec![0.0; n];
    let mut n_tested = if blank_n { Vec::new() } else { vec![0; n] };
    for (k, r) in rows.iter().enumerate() {
        let v = viruses.iter().position(|x| *x == r.virus).unwrap();
        let i = cell_index(r.month - 1, (r.year - first_year) as usize, v, v_count);
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Schema(format!("line {}: duplicate cell", k + 2)));
        }
        observed[i] = r.observed;
        expected[i] = r.expected;
        if let Some(x) = r.n_tested {
            n_tested[i] = x;
        }
    }
    CountPanel::new(years, viruses, first_year, observed, expected, n_tested)
}

/// Expected counts with their standardized probabilities, one row per cell.
pub fn write_expected<W: Write>(w: W, pipeline: &ExpectedPipeline, first_year: i32) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["month", "year", "virus", "n_tested", "p_standardized", "expected"])?;
    let e = &pipeline.expected;
    for t in 0..e.years {
        for m in 0..MONTHS {
            for v in 0..e.viruses {
                let i = cell_index(m, t, v, e.viruses);
                wtr.write_record([
                    (m + 1).to_string(),
                    (first_year + t as i32).to_string(),
                    pipeline.probs.viruses[v].clone(),
                    pipeline.n_tested[i].to_string(),
                    pipeline.probs.get(m, v).to_string(),
                    e.values[i].to_string(),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// One row per retained draw: `chain, iteration`, then every scalar parameter.
/// Chains and iterations are 1-based in the file.
pub fn write_draws<W: Write>(w: W, samples: &PosteriorSamples) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let names = parameter_names(samples.years, samples.viruses);
    wtr.write_record(["chain", "iteration"].into_iter().chain(names.iter().map(String::as_str)))?;
    for d in &samples.draws {
        let mut row = vec![(d.chain + 1).to_string(), d.iteration.to_string()];
        row.extend(d.state.flatten().iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a draws CSV. Dimensions are recovered from the column names.
pub fn read_draws<R: Read>(r: R) -> Result<PosteriorSamples> {
    let mut rdr = reader(r);
    let head = header(&mut rdr)?;
    if head.len() < 2 || head[0] != "chain" || head[1] != "iteration" {
        return Err(Error::Schema("draws header must start with chain,iteration".into()));
    }
    let viruses = head.iter().filter(|h| h.starts_with("alpha[")).count();
    let phis = head.iter().filter(|h| h.starts_with("phi[")).count();
    if viruses == 0 || phis % (MONTHS * viruses) != 0 {
        return Err(Error::Schema("draws columns do not describe a whole panel".into()));
    }
    let years = phis / (MONTHS * viruses);
    let names = parameter_names(years, viruses);
    if head[2..] != names[..] {
        return Err(Error::Schema("draws columns are not in the expected order".into()));
    }
    let mut draws = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Schema(format!("line {line}: {e}")))?;
        if rec.len() != head.len() {
            return Err(Error::Schema(format!("line {line}: expected {} fields", head.len())));
        }
        let chain: usize = parse_field(&rec[0], line, "chain")?;
        if chain == 0 {
            return Err(malformed(line, "chains are numbered from 1"));
        }
        let values = rec.iter().skip(2).map(|x| parse_field(x, line, "parameter")).collect::<Result<Vec<f64>>>()?;
        draws.push(Draw {
            chain: chain - 1,
            iteration: parse_field(&rec[1], line, "iteration")?,
            state: ModelState::from_flat(years, viruses, &values)?,
        });
    }
    let n_chains = draws.iter().map(|d| d.chain + 1).max().unwrap_or(0);
    Ok(PosteriorSamples::from_draws(years, viruses, vec![0; n_chains], draws))
}

fn pair_label(names: &[String], a: usize, b: usize) -> String {
    format!("{}:{}", names[a - 1], names[b - 1])
}

/// Flat covariance table: `pair, ci_low, ci_high, p_raw, p_adjusted, significant`.
pub fn write_covariance_report<W: Write>(w: W, report: &CovarianceReport, names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["pair", "ci_low", "ci_high", "p_raw", "p_adjusted", "significant"])?;
    for p in &report.pairs {
        wtr.write_record([
            pair_label(names, p.virus_a, p.virus_b),
            p.ci_low.to_string(),
            p.ci_high.to_string(),
            p.p_raw.to_string(),
            p.p_adjusted.to_string(),
            p.significant.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// The same table with a leading `years` column, one block per cut.
pub fn write_rolling_report<W: Write>(w: W, cuts: &[YearCut], names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["years", "pair", "posterior_mean", "ci_low", "ci_high", "p_raw", "p_adjusted", "significant"])?;
    for cut in cuts {
        for p in &cut.report.pairs {
            wtr.write_record([
                cut.years.to_string(),
                pair_label(names, p.virus_a, p.virus_b),
                p.posterior_mean.to_string(),
                p.ci_low.to_string(),
                p.ci_high.to_string(),
                p.p_raw.to_string(),
                p.p_adjusted.to_string(),
                p.significant.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Plot-ready relative risks: `month, year, virus, mean_rr, ci_low, ci_high`.
pub fn write_relative_risks<W: Write>(
    w: W,
    rows: &[RelativeRiskSummary],
    names: &[String],
    first_year: i32,
) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["month", "year", "virus", "mean_rr", "ci_low", "ci_high"])?;
    for r in rows {
        wtr.write_record([
            r.month.to_string(),
            (first_year + r.year as i32 - 1).to_string(),
            names[r.virus - 1].clone(),
            r.mean.to_string(),
            r.ci_low.to_string(),
            r.ci_high.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{scenario_three_virus, simulate};

    fn small_sim() -> crate::simgen::SimOutput {
        let mut s = scenario_three_virus();
        s.n_years = 2;
        s.samples_per_month = 30;
        simulate(&s, 4).unwrap()
    }

    #[test]
    fn episodes_round_trip() {
        let out = small_sim();
        let names = out.scenario.virus_names();
        let mut buf = Vec::new();
        write_episodes(&mut buf, &names, &out.records).unwrap();
        let (viruses, records) = read_episodes(&buf[..]).unwrap();
        assert_eq!(viruses, names);
        assert_eq!(records, out.records);
    }

    #[test]
    fn bad_episode_codes_are_malformed() {
        let text = "patient_id,date,age,sex,severity,rsv\np1,2001-01-03,4,F,ICU,pos\n";
        assert!(matches!(read_episodes(text.as_bytes()), Err(Error::MalformedRecord { line: 2, .. })));
        let text = "patient_id,date,age,sex,severity,rsv\np1,2001-13-03,4,F,GP,pos\n";
        assert!(matches!(read_episodes(text.as_bytes()), Err(Error::MalformedRecord { line: 2, .. })));
        let text = "patient_id,date,age,sex,severity\n";
        assert!(matches!(read_episodes(text.as_bytes()), Err(Error::Schema(_))));
    }

    #[test]
    fn panel_round_trip() {
        let out = small_sim();
        let mut buf = Vec::new();
        write_panel(&mut buf, &out.panel).unwrap();
        assert_eq!(read_panel(&buf[..]).unwrap(), out.panel);
    }

    #[test]
    fn truncated_panel_is_a_schema_error() {
        let out = small_sim();
        let mut buf = Vec::new();
        write_panel(&mut buf, &out.panel).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(read_panel(cut.as_bytes()), Err(Error::Schema(_))));
        let dup = format!("{text}1,2001,virus1,3,2.5,10\n");
        assert!(read_panel(dup.as_bytes()).is_err());
    }

    #[test]
    fn draws_round_trip() {
        use crate::model::{HyperParams, ProximitySpec};
        use crate::sampler::{run_chains, ChainConfig};
        let out = small_sim();
        let config = ChainConfig { n_chains: 2, n_iterations: 200, burn_in: 100, thin: 10, ..ChainConfig::desk(1) };
        let samples = run_chains(&out.panel, &ProximitySpec::neighborhood(), &HyperParams::default(), &config).unwrap();
        let mut buf = Vec::new();
        write_draws(&mut buf, &samples).unwrap();
        let back = read_draws(&buf[..]).unwrap();
        assert_eq!(back.draws, samples.draws);
        assert_eq!(back.rhat, samples.rhat);
        let mut again = Vec::new();
        write_draws(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }
}
