use std::fs;
use std::path::Path;
use std::process::Command;

use smkt::commands::{self, linspace, set_variable};
use smkt::emit::{emit_outputs, read_json, Format};
use smkt::scenario::{bundled, load_scenario, parse_scenario, ScenarioError, BUNDLED};

fn smkt() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smkt"))
}

fn via_fig3_text() -> &'static str {
    BUNDLED.iter().find(|(n, _)| *n == "via_fig3").unwrap().1
}

#[test]
fn bundled_scenarios_load() {
    for (name, _) in BUNDLED {
        let sc = bundled(name).unwrap();
        assert_eq!(sc.meta.name, name);
    }
    let sc = bundled("via_fig3").unwrap();
    assert_eq!(sc.params.population, 8000);
    assert_eq!(sc.params.n_csp(), 3);
    assert_eq!(sc.params.pu_cap, 4.0);
    assert_eq!(sc.initial_strategy.mno.pu, 3.9);
    assert_eq!(sc.initial_strategy.csps[1].bandwidth, 2e6);
    assert_eq!([2.0, 5.0, 4.0], [0, 1, 2].map(|k| sc.params.csps[k].overhead));
    assert_eq!(sc.agent.payoff_scale, 20.0);
}

#[test]
fn theta_outside_box_is_rejected() {
    let text = via_fig3_text().replacen("theta = 0.0", "theta = 1.5", 1);
    match parse_scenario(&text, Path::new("bad.scenario")) {
        Err(ScenarioError::Validation { problems, .. }) => {
            assert!(problems.iter().any(|p| p.contains("initial_strategy") && p.contains("theta")), "{problems:?}");
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn empty_and_malformed_files_are_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.scenario");
    fs::write(&empty, "").unwrap();
    assert!(matches!(load_scenario(&empty), Err(ScenarioError::Parse { .. })));
    let junk = dir.path().join("junk.scenario");
    fs::write(&junk, "[meta]\nname = \"x\"\nunknown_key = 1\n").unwrap();
    assert!(matches!(load_scenario(&junk), Err(ScenarioError::Parse { .. })));
    assert!(matches!(load_scenario(&dir.path().join("missing")), Err(ScenarioError::Io { .. })));
}

#[test]
fn three_state_trajectory_gives_three_rows() {
    let mut sc = bundled("via_fig3").unwrap();
    sc.ode.t_max = 0.02;
    sc.ode.convergence_tol = 0.0;
    let art = commands::evolve(&sc).unwrap();
    assert_eq!(art.trajectories[0].states.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_outputs(&art, dir.path(), Format::Csv).unwrap();
    let mut rd = csv::Reader::from_path(&paths[0]).unwrap();
    let header = rd.headers().unwrap().clone();
    assert_eq!(&header[0], "time");
    assert_eq!(rd.records().count(), 3);
}

#[test]
fn json_round_trip() {
    let mut sc = bundled("via_fig3").unwrap();
    sc.ode.t_max = 0.5;
    let art = commands::evolve(&sc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_outputs(&art, dir.path(), Format::Json).unwrap();
    assert_eq!(paths[0].file_name().unwrap(), "via_fig3_evolve.json");
    let back = read_json(&paths[0]).unwrap();
    assert_eq!(back, art);
}

#[test]
fn ne_trace_has_one_column_per_quantity_and_is_reproducible() {
    let sc = bundled("via_fig3").unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = Vec::new();
    for d in &dirs {
        let art = commands::ne(&sc).unwrap();
        let paths = emit_outputs(&art, d.path(), Format::Csv).unwrap();
        bytes.push(fs::read(&paths[0]).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.pop().unwrap()).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 21);
    assert_eq!(header[0], "iteration");
    assert_eq!(header[20], "budget_violation");
}

#[test]
fn sweep_variables() {
    let mut sc = bundled("sponsorship_2csp").unwrap();
    set_variable(&mut sc, "theta2", 0.4).unwrap();
    assert_eq!(sc.initial_strategy.csps[1].theta, 0.4);
    assert!(set_variable(&mut sc, "theta3", 0.4).is_err());
    assert!(set_variable(&mut sc, "population", 10.5).is_err());
    assert!(set_variable(&mut sc, "gamma", 1.0).is_err());
    assert_eq!(linspace(0.0, 1.0, 5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    let (art, failures) = commands::sweep(&sc, "pu", &linspace(0.5, 2.0, 4)).unwrap();
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(art.tables[0].rows.len(), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = smkt().arg("validate").output().unwrap();
    assert_eq!(out.status.code(), Some(0));

    let bad = dir.path().join("bad.scenario");
    fs::write(&bad, via_fig3_text().replacen("theta = 0.0", "theta = 1.5", 1)).unwrap();
    let out = smkt().args(["validate", "--scenario"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("theta"));

    let out = smkt().args(["evolve", "--scenario", "via_fig3", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("via_fig3_evolve.csv").exists());

    let out = smkt().args(["sweep", "--scenario", "via_fig3", "--sweep-var", "pu", "--sweep-range", "1:2"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
