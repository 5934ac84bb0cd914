//! Integration tests for the runner surface: config validation, exit-code
//! mapping, reproducibility, CSV schemas and the dry-run plan.

use std::path::PathBuf;
use tamd_lab::cli::{describe, run, ExperimentConfig, RunOptions};
use tamd_lab::TamdError;

fn tmpdir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("tamdlab_cli_{tag}"));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

const FE: &str = r#"
[potential]
kind = "separable"
v = [{ freq = 1, cos_amp = 1.0, sin_amp = 0.0 }]
w = [{ freq = 1, cos_amp = 1.0, sin_amp = 0.0 }]

[params]
beta = 1.0
beta_bar = 1.0
delta = 1.0

[grid]
n_q = 32
n_z = 32

[experiment]
kind = "fe"
"#;

#[test]
fn fe_profile_matches_shifted_cosine() {
    let cfg = ExperimentConfig::from_toml_str(FE).unwrap();
    let dir = tmpdir("fe");
    let files = run(&cfg, &RunOptions { output_dir: dir, include_q: false }).unwrap();
    let text = std::fs::read_to_string(&files[0]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "z,A,A1,A2,Z");
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        let (z, a) = (cols[0], cols[1]);
        let expect = (std::f64::consts::TAU * z).cos() + 0.235914;
        assert!((a - expect).abs() < 1e-5, "A({z}) = {a}, expected {expect}");
    }
}

#[test]
fn malformed_key_fails_before_writing_output() {
    let bad = FE.replace("beta = 1.0", "betta = 1.0\nbeta = 1.0");
    let err = ExperimentConfig::from_toml_str(&bad).unwrap_err();
    assert!(err.to_string().contains("betta"));
    assert_eq!(err.exit_code(), 2);
    // nothing was created anywhere: config never validated
    match err {
        TamdError::Config(_) => {}
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn sample_run_is_reproducible_and_honors_include_q() {
    let text = FE.replace("kind = \"fe\"", "kind = \"sample\"\nobservables = [\"cos_z\", \"z_moment(1)\"]")
        + "\n[params.extra]\n";
    // the appended empty table must be rejected
    assert!(ExperimentConfig::from_toml_str(&text).is_err());

    let text = FE.replace(
        "kind = \"fe\"",
        "kind = \"sample\"\nobservables = [\"cos_z\", \"z_moment(1)\"]",
    );
    let mut cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    cfg.params.n_steps = 20_000;

    let d1 = tmpdir("sample1");
    let d2 = tmpdir("sample2");
    let f1 = run(&cfg, &RunOptions { output_dir: d1, include_q: false }).unwrap();
    let f2 = run(&cfg, &RunOptions { output_dir: d2, include_q: false }).unwrap();
    let t1 = std::fs::read_to_string(&f1[0]).unwrap();
    let t2 = std::fs::read_to_string(&f2[0]).unwrap();
    assert_eq!(t1, t2, "identical config + seed must give byte-identical CSV");

    let header = t1.lines().next().unwrap();
    assert_eq!(header, "t,z,obs_cos_z,obs_z_moment(1)");

    let d3 = tmpdir("sample3");
    let f3 = run(&cfg, &RunOptions { output_dir: d3, include_q: true }).unwrap();
    let t3 = std::fs::read_to_string(&f3[0]).unwrap();
    assert_eq!(t3.lines().next().unwrap(), "t,z,q0,obs_cos_z,obs_z_moment(1)");

    // stats CSV schema
    let stats = std::fs::read_to_string(f1.last().unwrap()).unwrap();
    assert_eq!(stats.lines().next().unwrap(), "observable,mean,se,batch_variance,iat,n_effective");
}

#[test]
fn seed_env_override_changes_output() {
    let text = FE.replace("kind = \"fe\"", "kind = \"sample\"");
    let cfg =
        ExperimentConfig::from_toml_str_with_seed_env(&text, Some("12345".into())).unwrap();
    assert_eq!(cfg.params.seed, 12345);
    assert!(cfg.seed_overridden);
    let plan = describe(&cfg);
    assert!(plan.contains("overridden"), "{plan}");

    let err = ExperimentConfig::from_toml_str_with_seed_env(&text, Some("not-a-number".into()))
        .unwrap_err();
    assert!(err.to_string().contains("TAMD_LAB_SEED"));
}

#[test]
fn sweep_csv_has_schema_and_slope_trailer() {
    let text = r#"
[potential]
kind = "tilted_coupling"
a = 0.5
eps = 0.25

[params]
beta = 2.0
beta_bar = 1.0
delta_list = [0.2, 0.1, 0.05]

[grid]
n_q = 16
n_z = 16

[experiment]
kind = "sweep"
observables = ["mixed(0.5,1.0)"]
"#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let dir = tmpdir("sweep");
    let files = run(&cfg, &RunOptions { output_dir: dir, include_q: false }).unwrap();
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "delta,gap,lambda_ref,h_err,var_delta,var_ref");
    assert!(csv.lines().any(|l| l.starts_with("# slope_h_err")), "{csv}");
}

#[test]
fn rate_run_fits_the_gap_on_a_small_grid() {
    let text = r#"
[potential]
kind = "separable"
v = [{ freq = 1, cos_amp = 1.0, sin_amp = 0.0 }]

[params]
beta = 1.0
beta_bar = 1.0
delta = 1.0

[grid]
n_q = 16
n_z = 16

[experiment]
kind = "rate"
t_final = 0.08
dt_pde = 5e-4
"#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let dir = tmpdir("rate");
    let files = run(&cfg, &RunOptions { output_dir: dir, include_q: false }).unwrap();
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,distance");
    let rate: f64 = csv
        .lines()
        .find(|l| l.starts_with("# fitted_rate"))
        .and_then(|l| l.split('=').nth(1))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    let four_pi_sq = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
    assert!((rate / four_pi_sq - 1.0).abs() < 0.05, "rate {rate} vs {four_pi_sq}");
}

#[test]
fn dry_run_plan_mentions_grid_and_tolerances() {
    let text = FE.replace("kind = \"fe\"", "kind = \"fpe\"");
    let cfg = ExperimentConfig::from_toml_str(&text).unwrap();
    let plan = describe(&cfg);
    assert!(plan.contains("32x32"), "{plan}");
    assert!(plan.contains("tolerance"), "{plan}");
    assert!(plan.contains("fpe"), "{plan}");
}

#[test]
fn variance_csv_schema() {
    let text = r#"
[potential]
kind = "tilted_coupling"
a = 0.5
eps = 0.25

[params]
beta = 2.0
beta_bar = 1.0
delta = 0.2
dt = 5e-4
n_steps = 200000
stride = 10

[grid]
n_q = 16
n_z = 16

[experiment]
kind = "variance"
observables = ["cos_z"]
"#;
    let cfg = ExperimentConfig::from_toml_str(text).unwrap();
    let dir = tmpdir("variance");
    let files = run(&cfg, &RunOptions { output_dir: dir, include_q: false }).unwrap();
    let csv = std::fs::read_to_string(&files[0]).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "observable,mean_grid,mean_mc,se_mc,var_grid,var_ref,var_mc"
    );
    assert_eq!(csv.lines().count(), 2);
}
