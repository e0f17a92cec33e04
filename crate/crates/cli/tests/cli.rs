use std::path::Path;
use std::process::{Command, Output};

fn mcar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcar")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mcar(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

const SHORT: &[&str] = &["--chains", "2", "--iterations", "600", "--burn-in", "300", "--thin", "10"];

#[test]
fn simulate_writes_full_panels_and_creates_the_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let three = dir.path().join("nested/three");
    ok(&["simulate", "--preset", "three-virus", "--seed", "1", "--out", s(&three)]);
    assert_eq!(data_rows(&three.join("panel.csv")).len(), 12 * 4 * 3);
    for f in ["episodes.csv", "truth.json", "simulate_manifest.json"] {
        assert!(three.join(f).exists(), "{f}");
    }
    let five = dir.path().join("five");
    ok(&["simulate", "--preset", "five-virus", "--seed", "1", "--samples-per-month", "40", "--out", s(&five)]);
    assert_eq!(data_rows(&five.join("panel.csv")).len(), 12 * 15 * 5);
}

#[test]
fn expected_reproduces_the_simulated_expected_counts() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let exp = dir.path().join("exp");
    ok(&["simulate", "--seed", "2", "--out", s(&sim)]);
    ok(&["expected", "--episodes", s(&sim.join("episodes.csv")), "--out", s(&exp)]);
    let a = data_rows(&sim.join("panel.csv"));
    let b = data_rows(&exp.join("panel.csv"));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        let fa: Vec<&str> = ra.split(',').collect();
        let fb: Vec<&str> = rb.split(',').collect();
        assert_eq!(fa[..3], fb[..3]);
        let ea: f64 = fa[4].parse().unwrap();
        let eb: f64 = fb[4].parse().unwrap();
        assert!((ea - eb).abs() <= 1e-9, "{ra} vs {rb}");
    }
}

#[test]
fn unknown_severity_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let episodes = dir.path().join("episodes.csv");
    std::fs::write(
        &episodes,
        "patient_id,date,age,sex,severity,rsv\np1,2001-01-03,4,F,GP,pos\np2,2001-01-05,30,M,ICU,neg\n",
    )
    .unwrap();
    let out = mcar(&["expected", "--episodes", s(&episodes), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn truncated_panel_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--seed", "1", "--out", s(&sim)]);
    let text = std::fs::read_to_string(sim.join("panel.csv")).unwrap();
    let cut: Vec<&str> = text.lines().take(40).collect();
    let panel = dir.path().join("short.csv");
    std::fs::write(&panel, cut.join("\n") + "\n").unwrap();
    let out = mcar(&["fit", "--panel", s(&panel), "--out", s(&dir.path().join("fit"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_and_unknown_settings_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mcar(&["simulate"]).status.code(), Some(2));
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seeed = 3\n").unwrap();
    let out = mcar(&["--config", s(&cfg), "simulate", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = mcar(&["simulate", "--preset", "nine-virus", "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fix_rho_is_recorded_and_needs_the_autoregressive_proximity() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--seed", "1", "--out", s(&sim)]);
    let panel = sim.join("panel.csv");
    let fit = dir.path().join("fit");
    let mut args = vec!["fit", "--panel", s(&panel), "--out", s(&fit), "--proximity", "auto", "--fix-rho", "0.5"];
    args.extend_from_slice(SHORT);
    ok(&args);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit.join("fit_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["settings"]["chain"]["fixed_rho"], 0.5);
    assert_eq!(manifest["settings"]["proximity"]["kind"], "autoregressive");
    let mut rdr = csv::Reader::from_path(fit.join("draws.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "rho").unwrap();
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[col].parse::<f64>().unwrap(), 0.5);
    }

    let out = mcar(&["fit", "--panel", s(&panel), "--out", s(&fit), "--fix-rho", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_draws_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let draws = dir.path().join("draws.csv");
    let mut header = vec!["chain".to_string(), "iteration".into(), "alpha[1]".into()];
    header.extend((1..=12).map(|m| format!("\"phi[{m},1,1]\"")));
    header.extend(["s[1]", "lambda", "rho", "sigma[1]"].map(String::from));
    std::fs::write(&draws, header.join(",") + "\n").unwrap();
    let out = mcar(&["report", "--draws", s(&draws), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let sim = dir.path().join(format!("sim{tag}"));
        let fit = dir.path().join(format!("fit{tag}"));
        let rep = dir.path().join(format!("rep{tag}"));
        ok(&["simulate", "--seed", "5", "--out", s(&sim)]);
        let panel = sim.join("panel.csv");
        let mut args = vec!["fit", "--panel", s(&panel), "--out", s(&fit), "--seed", "9"];
        args.extend_from_slice(SHORT);
        ok(&args);
        ok(&["report", "--draws", s(&fit.join("draws.csv")), "--panel", s(&panel), "--out", s(&rep)]);
        (sim, fit, rep)
    };
    let (s1, f1, r1) = run("a");
    let (s2, f2, r2) = run("b");
    let same = |a: &Path, b: &Path| assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap(), "{a:?}");
    for f in ["episodes.csv", "panel.csv", "truth.json"] {
        same(&s1.join(f), &s2.join(f));
    }
    same(&f1.join("draws.csv"), &f2.join("draws.csv"));
    for f in ["covariance.json", "covariance.csv", "relative_risks.csv"] {
        same(&r1.join(f), &r2.join(f));
    }
}

#[test]
fn config_file_supplies_settings_and_by_year_reuses_the_fit() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 4\nyears = 2\nchains = 2\niterations = 400\nburn_in = 200\nthin = 10\n").unwrap();
    ok(&["--config", s(&cfg), "simulate", "--out", s(&sim)]);
    assert_eq!(data_rows(&sim.join("panel.csv")).len(), 12 * 2 * 3);
    let fit = dir.path().join("fit");
    ok(&["--config", s(&cfg), "fit", "--panel", s(&sim.join("panel.csv")), "--out", s(&fit)]);
    let rep = dir.path().join("rep");
    ok(&[
        "report",
        "--draws",
        s(&fit.join("draws.csv")),
        "--panel",
        s(&sim.join("panel.csv")),
        "--fit-manifest",
        s(&fit.join("fit_manifest.json")),
        "--by-year",
        "--out",
        s(&rep),
    ]);
    let rolling = data_rows(&rep.join("rolling.csv"));
    assert_eq!(rolling.len(), 2 * 3);
    assert!(rolling[0].starts_with("1,virus1:virus2,"));
    assert_eq!(data_rows(&rep.join("relative_risks.csv")).len(), 12 * 2 * 3);
}
