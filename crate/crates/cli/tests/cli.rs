//! Runs the `ivjump` binary end to end on a small simulated market.

use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
# small planted-effect market
sim.days = 21
sim.schedule = morning
sim.jump_days = 9
sim.latest = 10:00
sim.jump_mean = 0.006
sim.a0 = 0.5
sim.a1 = 0.3
sim.h = 5
cutoff = 10:00
windows = 5, 30
redraw_windows = 30
bootstrap_draws = 300
redraws = 10
";

fn ivjump(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ivjump"))
        .args(["--config", dir.join("cfg.txt").to_str().unwrap()])
        .args(["--out", dir.join("out").to_str().unwrap()])
        .args(args)
        .env_remove("IVJUMP_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, stage: &str) -> String {
    let out = ivjump(dir, &[stage]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{stage} failed: {stderr}");
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), CONFIG).unwrap();
    dir
}

#[test]
fn stages_run_end_to_end() {
    let dir = setup();
    let d = dir.path();
    let out = d.join("out");
    assert!(ok(d, "simulate").starts_with("simulate: 21 days, 9 planted jumps"));
    assert!(ok(d, "detect").starts_with("detect: 21 days"));
    // Surfaces run on demand when their dumps are missing.
    let printed = ok(d, "eventstudy");
    assert!(printed.contains("surfaces: ") && printed.contains("eventstudy: "), "{printed}");

    let report = std::fs::read_to_string(out.join("regressions.csv")).unwrap();
    let mut lines = report.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let betan = header.iter().position(|h| *h == "betan").unwrap();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert!(!rows.is_empty());
    for row in &rows {
        assert!(row[betan].parse::<f64>().unwrap().is_finite());
    }
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("sim.days = 21\n") && resolved.contains("windows = 5,30\n"));

    // Idempotence: unchanged inputs give byte-identical artifacts.
    let first = std::fs::read(out.join("regressions.csv")).unwrap();
    ok(d, "eventstudy");
    assert_eq!(first, std::fs::read(out.join("regressions.csv")).unwrap());

    assert!(ok(d, "pca").starts_with("pca: 3m explained"));
    assert!(out.join("loadings.csv").is_file() && out.join("scores_3m.csv").is_file());
    assert!(ok(d, "robustness").starts_with("robustness: "));
    assert!(out.join("redraws.csv").is_file());

    ok(d, "plot");
    let svg = out.join("plots").join("curves_atm-iv_3m_exclude.svg");
    let chart = std::fs::read(&svg).unwrap();
    let text = String::from_utf8(chart.clone()).unwrap();
    assert_eq!(text.matches("<polyline").count(), 3);
    assert!(text.contains("<polygon"));
    assert!(out.join("plots").join("loadings_9m.svg").is_file());
    ok(d, "plot");
    assert_eq!(chart, std::fs::read(&svg).unwrap());
}

#[test]
fn unknown_subcommand_exits_with_usage() {
    let dir = setup();
    let out = ivjump(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_names_stage_and_file() {
    let dir = setup();
    let out = ivjump(dir.path(), &["detect"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detect") && err.contains("underlying.csv"), "{err}");
}

#[test]
fn bad_config_line_is_reported() {
    let dir = setup();
    std::fs::write(dir.path().join("cfg.txt"), "alpha = 0.01\nbogus = 1\n").unwrap();
    let out = ivjump(dir.path(), &["simulate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2: unknown key `bogus`"));
}

#[test]
fn seed_override_reaches_every_seed() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_ivjump"))
        .args(["--out", dir.path().join("out").to_str().unwrap(), "plot"])
        .env("IVJUMP_SEED", "77")
        .output()
        .unwrap();
    // No tables yet, but the resolved configuration is echoed first.
    assert!(!out.status.success());
    let resolved = std::fs::read_to_string(dir.path().join("out").join("config.resolved")).unwrap();
    for key in ["sim.seed", "bootstrap_seed", "reference_seed", "redraw_seed"] {
        assert!(resolved.contains(&format!("{key} = 77\n")), "{key}");
    }
}

#[test]
fn plot_checks_schemas_and_tolerates_missing_band() {
    let dir = setup();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let mut table = String::from("minute,pos_mean,neg_mean,ref_mean,band_lo,band_hi\n");
    for m in 0..=60 {
        table.push_str(&format!("{m},{},{},0,,\n", -0.01 * f64::from(m), 0.01 * f64::from(m)));
    }
    std::fs::write(out.join("curves_atm-iv_3m_include.csv"), &table).unwrap();
    let run = ivjump(dir.path(), &["plot"]);
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("band omitted"));
    let svg = std::fs::read_to_string(out.join("plots").join("curves_atm-iv_3m_include.svg")).unwrap();
    assert!(!svg.contains("<polygon") && svg.matches("<polyline").count() == 3);

    std::fs::write(out.join("curves_atm-iv_6m_include.csv"), "minute,mean\n0,1\n").unwrap();
    let run = ivjump(dir.path(), &["plot"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("expected columns"));
}
