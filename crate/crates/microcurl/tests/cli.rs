//! End-to-end checks of the command-line contract: subcommands, exit
//! codes, config rejection, field-export layout, and bitwise determinism
//! of reports and CSVs.

use std::path::Path;

use microcurl::cli_io::{export_fields, parse_config, run_command};
use microcurl::solver::RunState;

fn run(args: &[&str]) -> i32 {
    let argv: Vec<String> = std::iter::once("microcurl".to_string())
        .chain(args.iter().map(|s| s.to_string()))
        .collect();
    run_command(&argv)
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.cfg");
    std::fs::write(
        &path,
        "[variant]\nmodel = PC_ISO\n[grid]\nn = 5\nh = 0.25\ngamma_d = zmin,zmax\n\
         [material]\nh_chi = 50.0\nl_c = 0.1\nk2 = 0.5\nsigma0 = 0.1\n\
         [load]\nscenario = shear_layer\nsteps = 4\namplitude = 0.2\n\
         [solver]\ntol_outer = 1e-9\ntol_cg = 1e-12\n",
    )
    .unwrap();
    path
}

#[test]
fn run_produces_report_and_field_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out = tmp.path().join("out");
    let code = run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.join("report.json").is_file());
    assert!(out.join("timing.txt").is_file());
    for f in ["u_step0004.csv", "chi_step0004.csv", "p_step0004.csv", "eta_step0004.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    // the report must be valid JSON with per-step records
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 4);
    assert_eq!(report["completed"], serde_json::Value::Bool(true));
}

#[test]
fn run_twice_is_bitwise_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path());
    let out1 = tmp.path().join("a");
    let out2 = tmp.path().join("b");
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]), 0);
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out2.to_str().unwrap()]), 0);
    for f in ["report.json", "u_step0004.csv", "chi_step0004.csv", "p_step0004.csv", "eta_step0004.csv"] {
        let a = std::fs::read(out1.join(f)).unwrap();
        let b = std::fs::read(out2.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
}

#[test]
fn export_layout_contract() {
    // zero state: files of zeros with the documented headers; 8^3 grid
    // gives 512 data rows per nodal field file; re-export is bitwise equal
    let text = "[variant]\nmodel = PC_ISO\n[grid]\nn = 8\nh = 0.125\ngamma_d = zmin,zmax\n\
                [material]\nsigma0 = 0.1\nk2 = 0.5\n";
    let parsed = parse_config(text).unwrap();
    let state = RunState::zero(&parsed.scenario);
    let tmp = tempfile::tempdir().unwrap();
    export_fields(&parsed.scenario, &state, tmp.path(), 0).unwrap();

    let u = std::fs::read_to_string(tmp.path().join("u_step0000.csv")).unwrap();
    let mut lines = u.lines();
    assert_eq!(lines.next().unwrap(), "x,y,z,u1,u2,u3");
    assert_eq!(lines.clone().count(), 512);
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert_eq!(cols[3], "0");
        assert_eq!(cols[4], "0");
        assert_eq!(cols[5], "0");
    }
    let chi = std::fs::read_to_string(tmp.path().join("chi_step0000.csv")).unwrap();
    assert!(chi.starts_with("x,y,z,chi11,chi12,chi13,chi21,chi22,chi23,chi31,chi32,chi33\n"));
    let p = std::fs::read_to_string(tmp.path().join("p_step0000.csv")).unwrap();
    assert!(p.starts_with("x,y,z,p11,p12,p13,p21,p22,p23,p31,p32,p33\n"));
    let eta = std::fs::read_to_string(tmp.path().join("eta_step0000.csv")).unwrap();
    assert!(eta.starts_with("x,y,z,eta\n"));

    // deterministic re-export
    let before = std::fs::read(tmp.path().join("u_step0000.csv")).unwrap();
    export_fields(&parsed.scenario, &state, tmp.path(), 0).unwrap();
    let after = std::fs::read(tmp.path().join("u_step0000.csv")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn crystal_export_has_slip_columns() {
    let text = "[variant]\nmodel = SC_ISO\n[grid]\nn = 4\nh = 0.25\ngamma_d = zmin,zmax\n\
                [material]\nsigma0 = 0.1\nk2 = 0.5\n";
    let parsed = parse_config(text).unwrap();
    let state = RunState::zero(&parsed.scenario);
    let tmp = tempfile::tempdir().unwrap();
    export_fields(&parsed.scenario, &state, tmp.path(), 2).unwrap();
    let eta = std::fs::read_to_string(tmp.path().join("eta_step0002.csv")).unwrap();
    assert!(eta.starts_with("x,y,z,eta1,eta2,"));
    assert!(eta.lines().next().unwrap().ends_with("eta12"));
    let gamma = std::fs::read_to_string(tmp.path().join("gamma_step0002.csv")).unwrap();
    assert!(gamma.starts_with("x,y,z,gamma1,"));
}

#[test]
fn validation_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.cfg");
    std::fs::write(&bad, "[variant]\nmodel = PC_ISO\n[material]\nmu = -1\nsigma0 = 0.1\n").unwrap();
    let out = tmp.path().join("out");
    let code = run(&["run", "--config", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code, 1);

    // unknown subcommand / flags are validation failures as well
    assert_eq!(run(&["frobnicate"]), 1);
}

#[test]
fn verify_korn_empty_gamma_d_exits_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("empty.cfg");
    std::fs::write(
        &cfg,
        "[variant]\nmodel = PC_ISO\n[grid]\nn = 5\nh = 0.25\ngamma_d = none\n\
         [material]\nsigma0 = 0.1\n[load]\nscenario = none\n",
    )
    .unwrap();
    let code = run(&["verify", "korn", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 3, "empty Gamma_D must expose the zero mode and exit 3");
}

#[test]
fn verify_korn_one_face_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("face.cfg");
    std::fs::write(
        &cfg,
        "[variant]\nmodel = PC_ISO\n[grid]\nn = 5\nh = 0.25\ngamma_d = xmin\n\
         [material]\nsigma0 = 0.1\n[load]\nscenario = uniaxial\n",
    )
    .unwrap();
    assert_eq!(run(&["verify", "korn", "--config", cfg.to_str().unwrap()]), 0);
}

#[test]
fn point_test_exits_zero_within_tolerance() {
    assert_eq!(run(&["point-test", "--variant", "PC_ISO", "--trials", "50", "--seed", "7"]), 0);
    assert_eq!(run(&["point-test", "--variant", "NOPE"]), 1);
}

#[test]
fn sweep_hchi_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.cfg");
    std::fs::write(
        &cfg,
        "[variant]\nmodel = PC_ISO\n[grid]\nn = 4\nh = 0.25\ngamma_d = zmin,zmax\n\
         [material]\nl_c = 0.1\nk2 = 0.5\nsigma0 = 0.1\n\
         [load]\nscenario = shear_layer\nsteps = 3\namplitude = 0.2\n\
         [solver]\ntol_outer = 1e-9\n",
    )
    .unwrap();
    let out = tmp.path().join("gaps.csv");
    let code = run(&[
        "sweep",
        "hchi",
        "--config",
        cfg.to_str().unwrap(),
        "--values",
        "10,40",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let table = std::fs::read_to_string(&out).unwrap();
    assert!(table.starts_with("h_chi,gap\n"));
    assert_eq!(table.lines().count(), 3);
}

#[test]
fn probe_uniqueness_small_case() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("uniq.cfg");
    std::fs::write(
        &cfg,
        "[variant]\nmodel = PC_ISO\n[grid]\nn = 4\nh = 0.25\ngamma_d = zmin,zmax\n\
         [material]\nh_chi = 50.0\nl_c = 0.1\nk2 = 0.5\nsigma0 = 0.1\n\
         [load]\nscenario = shear_layer\nsteps = 3\namplitude = 0.2\n\
         [solver]\ntol_outer = 1e-11\ntol_cg = 1e-13\n",
    )
    .unwrap();
    assert_eq!(run(&["probe", "uniqueness", "--config", cfg.to_str().unwrap(), "--seed", "5"]), 0);
}
