use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mcar::expected::{
    aggregate_episodes, run_expected_pipeline, AgeCoding, EpisodeSet, LogisticOptions, MonthModel,
};
use mcar::inference::{covariance_report, relative_risk_summary, rolling_year_reports};
use mcar::io;
use mcar::model::{CountPanel, HyperParams, ProximityKind, ProximitySpec};
use mcar::sampler::{dic, run_chains, ChainConfig};
use mcar::simgen::{self, ObservedMode, SimScenario, EXPECTED_FLOOR};

use crate::settings::{Failure, Layers, Outcome};
use crate::{ExpectedArgs, FitArgs, ReportArgs, SamplerArgs, SimulateArgs};

pub const EPISODES_CSV: &str = "episodes.csv";
pub const PANEL_CSV: &str = "panel.csv";
pub const TRUTH_JSON: &str = "truth.json";
pub const EXPECTED_CSV: &str = "expected.csv";
pub const EXPECTED_FIT_JSON: &str = "expected_fit.json";
pub const DRAWS_CSV: &str = "draws.csv";
pub const COVARIANCE_JSON: &str = "covariance.json";
pub const COVARIANCE_CSV: &str = "covariance.csv";
pub const RELATIVE_RISKS_CSV: &str = "relative_risks.csv";
pub const ROLLING_CSV: &str = "rolling.csv";
pub const ROLLING_JSON: &str = "rolling.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Written next to the outputs of every command.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest<S, R> {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub created_unix: u64,
    pub runtime_seconds: f64,
    pub settings: S,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub results: R,
}

fn manifest_name(command: &str) -> String {
    format!("{command}_manifest.json")
}

fn hash_input(path: &Path) -> Outcome<InputFile> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
    Ok(InputFile { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(&bytes)) })
}

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::config(format!("cannot open {}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Outcome<BufWriter<File>> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", path.display())))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Outcome {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn output_dir(layers: &Layers, flag: Option<PathBuf>) -> Outcome<PathBuf> {
    let out: PathBuf = layers.required(flag, "out")?;
    std::fs::create_dir_all(&out)
        .map_err(|e| Failure::config(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn finish<S: Serialize, R: Serialize>(
    out: &Path,
    command: &str,
    started: Instant,
    settings: S,
    inputs: Vec<InputFile>,
    outputs: Vec<&str>,
    results: R,
) -> Outcome {
    let name = manifest_name(command);
    let mut outputs: Vec<String> = outputs.iter().map(|s| s.to_string()).collect();
    outputs.push(name.clone());
    let manifest = Manifest {
        tool: "mcar".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        runtime_seconds: started.elapsed().as_secs_f64(),
        settings,
        inputs,
        outputs: outputs.clone(),
        results,
    };
    write_json(out, &name, &manifest)?;
    for o in &outputs {
        println!("wrote {}", out.join(o).display());
    }
    Ok(())
}

fn parse_observed_mode(s: &str) -> Outcome<ObservedMode> {
    match s {
        "product" => Ok(ObservedMode::Product),
        "poisson" => Ok(ObservedMode::Poisson),
        other => Err(Failure::config(format!("observed_mode must be product or poisson, got {other:?}"))),
    }
}

#[derive(Debug, Serialize)]
struct SimulateSettings {
    seed: u64,
    preset: Option<String>,
    scenario_file: Option<String>,
    scenario: SimScenario,
}

pub fn simulate(a: &SimulateArgs, l: &Layers) -> Outcome {
    let started = Instant::now();
    let seed = l.or(a.seed, "seed", 1)?;
    let scenario_file: Option<PathBuf> = l.opt(a.scenario.clone(), "scenario")?;
    let preset: Option<String> = l.opt(a.preset.clone(), "preset")?;
    let mut inputs = Vec::new();
    let mut scenario = match (&scenario_file, &preset) {
        (Some(_), Some(_)) => return Err(Failure::config("give either --preset or --scenario, not both")),
        (Some(path), None) => {
            inputs.push(hash_input(path)?);
            serde_json::from_reader(open(path)?)
                .map_err(|e| Failure::config(format!("scenario {}: {e}", path.display())))?
        }
        (None, p) => simgen::preset(p.as_deref().unwrap_or("three-virus"))?,
    };
    if let Some(years) = l.opt(a.years, "years")? {
        scenario.n_years = years;
    }
    if let Some(n) = l.opt(a.samples_per_month, "samples_per_month")? {
        scenario.samples_per_month = n;
    }
    if let Some(mode) = l.opt::<String>(a.observed_mode.clone(), "observed_mode")? {
        scenario.observed_mode = parse_observed_mode(&mode)?;
    }
    if let Some(kind) = l.parsed::<ProximityKind>(a.proximity.clone(), "proximity")? {
        scenario.proximity.kind = kind;
    }
    scenario.validate()?;
    let out = output_dir(l, a.out.clone())?;

    let sim = simgen::simulate(&scenario, seed)?;
    let names = scenario.virus_names();
    io::write_episodes(create(&out, EPISODES_CSV)?, &names, &sim.records)?;
    io::write_panel(create(&out, PANEL_CSV)?, &sim.panel)?;
    write_json(&out, TRUTH_JSON, &sim.truth())?;

    let settings = SimulateSettings {
        seed,
        preset: if scenario_file.is_none() { Some(preset.unwrap_or_else(|| "three-virus".into())) } else { None },
        scenario_file: scenario_file.map(|p| p.display().to_string()),
        scenario,
    };
    let results = serde_json::json!({
        "viruses": names,
        "years": sim.panel.years(),
        "episodes": sim.records.len(),
    });
    finish(&out, "simulate", started, settings, inputs, vec![EPISODES_CSV, PANEL_CSV, TRUTH_JSON], results)
}

#[derive(Debug, Serialize)]
struct ExpectedSettings {
    episodes: String,
    aggregate: bool,
    window_days: i64,
    logistic: LogisticOptions,
    expected_floor: f64,
    allow_nonconverged: bool,
}

fn parse_age(bands: Option<String>) -> Outcome<AgeCoding> {
    let Some(text) = bands else {
        return Ok(AgeCoding::Linear);
    };
    let edges = text
        .split(',')
        .map(|s| s.trim().parse::<u32>().map_err(|_| Failure::config(format!("age_bands: bad edge {s:?}"))))
        .collect::<Outcome<Vec<_>>>()?;
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Failure::config("age_bands must be strictly increasing"));
    }
    Ok(AgeCoding::Bands(edges))
}

pub fn expected(a: &ExpectedArgs, l: &Layers) -> Outcome {
    let started = Instant::now();
    let episodes: PathBuf = l.required(a.episodes.clone(), "episodes")?;
    let aggregate = l.switch(a.aggregate, "aggregate")?;
    let window_days = l.or(a.window_days, "window_days", 30)?;
    let month_model = match l.opt::<String>(a.month_model.clone(), "month_model")?.as_deref() {
        None | Some("factor") => MonthModel::Factor,
        Some("per-month") | Some("per_month") => MonthModel::PerMonth,
        Some(other) => return Err(Failure::config(format!("month_model must be factor or per-month, got {other:?}"))),
    };
    let logistic = LogisticOptions {
        ridge_year: l.or(a.ridge_year, "ridge_year", LogisticOptions::default().ridge_year)?,
        age: parse_age(l.opt(a.age_bands.clone(), "age_bands")?)?,
        month_model,
        ..LogisticOptions::default()
    };
    if !(logistic.ridge_year >= 0.0) {
        return Err(Failure::config("ridge_year must be non-negative"));
    }
    let expected_floor = l.or(a.expected_floor, "expected_floor", EXPECTED_FLOOR)?;
    if !(expected_floor > 0.0) {
        return Err(Failure::config("expected_floor must be positive"));
    }
    let allow_nonconverged = l.switch(a.allow_nonconverged, "allow_nonconverged")?;
    let inputs = vec![hash_input(&episodes)?];
    let out = output_dir(l, a.out.clone())?;

    let (viruses, mut records) = io::read_episodes(open(&episodes)?)?;
    if aggregate {
        records = aggregate_episodes(&records, window_days)?;
    }
    let set = EpisodeSet::new(viruses.clone(), records)?;
    let pipeline = run_expected_pipeline(&set, &logistic)?;
    let failed: Vec<&str> = pipeline.models.iter().filter(|m| !m.converged()).map(|m| m.virus.as_str()).collect();
    if !failed.is_empty() {
        let msg = format!("logistic fit did not converge for {}", failed.join(", "));
        if !allow_nonconverged {
            return Err(Failure::preprocessing(format!("{msg} (rerun with --allow-nonconverged to keep it)")));
        }
        log::warn!("{msg}");
    }
    let panel = CountPanel::new(
        set.years(),
        viruses,
        set.first_year(),
        set.positive_table(),
        pipeline.expected.floored(expected_floor),
        pipeline.n_tested.clone(),
    )?;
    io::write_expected(create(&out, EXPECTED_CSV)?, &pipeline, set.first_year())?;
    io::write_panel(create(&out, PANEL_CSV)?, &panel)?;
    let fits = serde_json::json!({
        "models": pipeline.models,
        "standardized_probabilities": pipeline.probs,
        "zero_cells": pipeline.expected.zero_cells,
    });
    write_json(&out, EXPECTED_FIT_JSON, &fits)?;

    let settings = ExpectedSettings {
        episodes: episodes.display().to_string(),
        aggregate,
        window_days,
        logistic,
        expected_floor,
        allow_nonconverged,
    };
    let results = serde_json::json!({
        "episodes": set.records().len(),
        "years": set.years(),
        "first_year": set.first_year(),
        "nonconverged": failed,
        "zero_cells": pipeline.expected.zero_cells.len(),
    });
    finish(&out, "expected", started, settings, inputs, vec![EXPECTED_CSV, PANEL_CSV, EXPECTED_FIT_JSON], results)
}

/// Everything needed to rerun a fit; also read back by `report --by-year`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitSettings {
    pub panel: String,
    pub proximity: ProximitySpec,
    pub hyper: HyperParams,
    pub chain: ChainConfig,
}

fn sampler_settings(a: &SamplerArgs, l: &Layers) -> Outcome<(ProximitySpec, ChainConfig)> {
    let seed = l.or(a.seed, "seed", 1)?;
    let mut chain = match l.opt::<String>(a.profile.clone(), "profile")?.as_deref() {
        None | Some("desk") => ChainConfig::desk(seed),
        Some("full") => ChainConfig::full(seed),
        Some(other) => return Err(Failure::config(format!("profile must be desk or full, got {other:?}"))),
    };
    chain.n_chains = l.or(a.chains, "chains", chain.n_chains)?;
    chain.n_iterations = l.or(a.iterations, "iterations", chain.n_iterations)?;
    chain.burn_in = l.or(a.burn_in, "burn_in", chain.burn_in)?;
    chain.thin = l.or(a.thin, "thin", chain.thin)?;
    chain.adapt_window = l.or(a.adapt_window, "adapt_window", chain.adapt_window)?;
    chain.fixed_rho = l.opt(a.fix_rho, "fix_rho")?;

    let kind = l.parsed::<ProximityKind>(a.proximity.clone(), "proximity")?.unwrap_or(ProximityKind::Neighborhood);
    let mut spec = match kind {
        ProximityKind::Neighborhood => ProximitySpec::neighborhood(),
        ProximityKind::Autoregressive => ProximitySpec::autoregressive(),
    };
    spec.neighbor_order = l.or(a.neighbor_order, "neighbor_order", spec.neighbor_order)?;
    if chain.fixed_rho.is_some() && kind != ProximityKind::Autoregressive {
        return Err(Failure::config("--fix-rho only applies to the autoregressive proximity"));
    }
    chain.validate()?;
    spec.validate()?;
    Ok((spec, chain))
}

pub fn fit(a: &FitArgs, l: &Layers) -> Outcome {
    let started = Instant::now();
    let panel_path: PathBuf = l.required(a.panel.clone(), "panel")?;
    let (proximity, chain) = sampler_settings(&a.sampler, l)?;
    let inputs = vec![hash_input(&panel_path)?];
    let panel = io::read_panel(open(&panel_path)?)?;
    let out = output_dir(l, a.out.clone())?;
    let hyper = HyperParams::default();

    let samples = run_chains(&panel, &proximity, &hyper, &chain).map_err(|e| match Failure::from(e) {
        f if f.code == 2 => f,
        f => Failure::inference(f.message),
    })?;
    let dic = dic(&samples, &panel).map_err(|e| Failure::inference(e.to_string()))?;
    io::write_draws(create(&out, DRAWS_CSV)?, &samples)?;

    let rhat: serde_json::Map<String, serde_json::Value> =
        samples.rhat.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect();
    let results = serde_json::json!({
        "viruses": panel.virus_names(),
        "first_year": panel.first_year(),
        "years": panel.years(),
        "seeds": samples.seeds,
        "draws": samples.draws.len(),
        "dic": dic,
        "accept_rates": samples.accept_rates,
        "rhat": rhat,
        "rhat_above_threshold": samples.rhat_flags(),
    });
    println!("DIC {:.2} (mean deviance {:.2}, pD {:.2})", dic.dic, dic.mean_deviance, dic.p_d);
    let settings = FitSettings { panel: panel_path.display().to_string(), proximity, hyper, chain };
    finish(&out, "fit", started, settings, inputs, vec![DRAWS_CSV], results)
}

#[derive(Debug, Serialize)]
struct ReportSettings {
    draws: String,
    panel: Option<String>,
    level: f64,
    fdr: f64,
    by_year: Option<FitSettings>,
}

#[derive(Deserialize)]
struct FitManifestView {
    settings: FitSettings,
    results: FitResultsView,
}

#[derive(Deserialize)]
struct FitResultsView {
    viruses: Vec<String>,
    first_year: i32,
}

pub fn report(a: &ReportArgs, l: &Layers) -> Outcome {
    let started = Instant::now();
    let draws_path: PathBuf = l.required(a.draws.clone(), "draws")?;
    let panel_path: Option<PathBuf> = l.opt(a.panel.clone(), "panel")?;
    let manifest_path: Option<PathBuf> = l.opt(a.fit_manifest.clone(), "fit_manifest")?;
    let level = l.or(a.level, "level", 0.95)?;
    let fdr = l.or(a.fdr, "fdr", 0.05)?;
    if !(level > 0.0 && level < 1.0) || !(fdr > 0.0 && fdr < 1.0) {
        return Err(Failure::config("level and fdr must lie in (0, 1)"));
    }
    let by_year = l.switch(a.by_year, "by_year")?;

    let mut inputs = vec![hash_input(&draws_path)?];
    let panel = match &panel_path {
        Some(p) => {
            inputs.push(hash_input(p)?);
            Some(io::read_panel(open(p)?)?)
        }
        None => None,
    };
    let fit_manifest: Option<FitManifestView> = match &manifest_path {
        Some(p) => {
            inputs.push(hash_input(p)?);
            Some(serde_json::from_reader(open(p)?).map_err(|e| Failure::config(format!("fit manifest: {e}")))?)
        }
        None => None,
    };
    let rerun = if by_year {
        if panel.is_none() {
            return Err(Failure::config("--by-year needs --panel"));
        }
        Some(match &fit_manifest {
            Some(m) => m.settings.clone(),
            None => {
                let (proximity, chain) = sampler_settings(&a.sampler, l)?;
                FitSettings {
                    panel: panel_path.as_ref().unwrap().display().to_string(),
                    proximity,
                    hyper: HyperParams::default(),
                    chain,
                }
            }
        })
    } else {
        None
    };
    let out = output_dir(l, a.out.clone())?;

    let samples = io::read_draws(open(&draws_path)?)?;
    if samples.draws.is_empty() {
        return Err(Failure::inference(format!("{} holds no draws", draws_path.display())));
    }
    let (names, first_year) = match (&panel, &fit_manifest) {
        (Some(p), _) => (p.virus_names().to_vec(), p.first_year()),
        (None, Some(m)) => (m.results.viruses.clone(), m.results.first_year),
        (None, None) => ((1..=samples.viruses).map(|v| format!("virus{v}")).collect(), 1),
    };
    if names.len() != samples.viruses || panel.as_ref().is_some_and(|p| p.years() != samples.years) {
        return Err(Failure::config("draws do not match the panel dimensions"));
    }

    let cov = covariance_report(&samples, level, fdr).map_err(|e| Failure::inference(e.to_string()))?;
    let rr = relative_risk_summary(&samples, level).map_err(|e| Failure::inference(e.to_string()))?;
    write_json(&out, COVARIANCE_JSON, &cov)?;
    io::write_covariance_report(create(&out, COVARIANCE_CSV)?, &cov, &names)?;
    io::write_relative_risks(create(&out, RELATIVE_RISKS_CSV)?, &rr, &names, first_year)?;
    for p in &cov.pairs {
        println!(
            "{}:{}  mean {:+.3}  {:.0}% CI ({:+.3}, {:+.3})  p {:.4}  adjusted {:.4}{}",
            names[p.virus_a - 1],
            names[p.virus_b - 1],
            p.posterior_mean,
            level * 100.0,
            p.ci_low,
            p.ci_high,
            p.p_raw,
            p.p_adjusted,
            if p.significant { "  *" } else { "" }
        );
    }
    let mut outputs = vec![COVARIANCE_JSON, COVARIANCE_CSV, RELATIVE_RISKS_CSV];

    let mut trajectory = Vec::new();
    if let (Some(settings), Some(panel)) = (&rerun, &panel) {
        let cuts: Vec<usize> = (1..=panel.years()).collect();
        let reports =
            rolling_year_reports(panel, &settings.proximity, &settings.hyper, &settings.chain, &cuts, level, fdr)
                .map_err(|e| Failure::inference(e.to_string()))?;
        io::write_rolling_report(create(&out, ROLLING_CSV)?, &reports, &names)?;
        write_json(&out, ROLLING_JSON, &reports)?;
        for cut in &reports {
            let sig: Vec<String> = cut
                .report
                .significant_pairs()
                .iter()
                .map(|&(a, b)| format!("{}:{}", names[a - 1], names[b - 1]))
                .collect();
            println!("years 1..{:<3} significant: {}", cut.years, if sig.is_empty() { "none".into() } else { sig.join(", ") });
            trajectory.push(serde_json::json!({ "years": cut.years, "significant": sig }));
        }
        outputs.extend([ROLLING_CSV, ROLLING_JSON]);
    }

    let significant: Vec<String> = cov
        .significant_pairs()
        .iter()
        .map(|&(a, b)| format!("{}:{}", names[a - 1], names[b - 1]))
        .collect();
    let settings = ReportSettings {
        draws: draws_path.display().to_string(),
        panel: panel_path.map(|p| p.display().to_string()),
        level,
        fdr,
        by_year: rerun,
    };
    let results = serde_json::json!({
        "draws": samples.draws.len(),
        "significant": significant,
        "by_year": trajectory,
    });
    finish(&out, "report", started, settings, inputs, outputs, results)
}
