//! Config validation and CLI contract tests driven through the binary.

use std::path::Path;
use std::process::{Command, Output};

fn beq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beq"))
        .args(args)
        .output()
        .expect("spawn beq")
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let path = dir.join("cfg.toml");
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const MINIMAL: &str = r#"
[preference]
family = "weighted"
rho = 0.25
gamma = -0.5

[market]
T = 1.0
d = 1
mu = 0.08
sigma = 0.2
"#;

#[test]
fn minimal_config_solves_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), MINIMAL);
    let out_dir = tmp.path().join("out");
    let out = beq(&[
        "solve",
        "constrained",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("solution.csv")).unwrap();
    // Default n_steps = 2048 gives 2049 rows plus the header.
    assert_eq!(csv.lines().count(), 2050);
    assert!(csv.starts_with("t,A,B,regime,u_1,a_1,fp_residual\n"));
}

#[test]
fn borrowing_rate_below_saving_rate_names_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        r#"
[preference]
family = "weighted"
rho = 0.25
gamma = -0.5

[market]
T = 1.0
d = 1
mu = 0.08
sigma = 0.2
r = 0.05
R = 0.02
"#,
    );
    let out = beq(&["solve", "borrowing", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("market.R"), "stderr: {err}");
    assert!(err.starts_with("error kind="), "stderr: {err}");
}

#[test]
fn weighted_gamma_out_of_bounds_names_the_constraint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        r#"
[preference]
family = "weighted"
rho = 0.75
gamma = 0.5

[market]
T = 1.0
d = 1
mu = 0.08
sigma = 0.2
"#,
    );
    let out = beq(&["solve", "constrained", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("preference.gamma") && err.contains("-1 < gamma <= 0"),
        "stderr: {err}"
    );
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), &format!("{MINIMAL}\n[solver]\nn_step = 100\n"));
    let out = beq(&["solve", "constrained", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("solver.n_step") && err.contains("unknown key"),
        "stderr: {err}"
    );
}

#[test]
fn syntax_errors_carry_position() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "[preference\nfamily = weighted\n");
    let out = beq(&["solve", "constrained", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 1"), "stderr: {err}");
}

#[test]
fn constrained_solver_rejects_nonzero_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        r#"
[preference]
family = "weighted"
rho = 0.25
gamma = -0.5

[market]
T = 1.0
d = 1
mu = 0.08
sigma = 0.2
r = 0.01
"#,
    );
    let out = beq(&["solve", "constrained", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("market.r"));
}

#[test]
fn borrowing_solver_rejects_constraint_section() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        r#"
[preference]
family = "mixed_crra"
atoms = [[0.5, 1.0]]

[market]
T = 1.0
d = 1
mu = 0.07
sigma = 0.2
r = 0.02
R = 0.05

[constraint]
family = "nonneg_orthant"
"#,
    );
    let out = beq(&["solve", "borrowing", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint"));
}

#[test]
fn verify_without_solution_gives_actionable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), MINIMAL);
    let out = beq(&[
        "verify",
        "hjb",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("solution.csv") && err.contains("solve"),
        "stderr: {err}"
    );
}

#[test]
fn solution_round_trip_is_bit_exact_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), MINIMAL);
    let out_dir = tmp.path().join("out");
    let out = beq(&[
        "solve",
        "constrained",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(out_dir.join("solution.csv")).unwrap();
    let sol = beq_core::EquilibriumSolution::from_csv(&text).unwrap();
    assert_eq!(
        sol.to_csv(),
        text,
        "serialize(parse(csv)) must reproduce the bytes"
    );
}

#[test]
fn mixed_crra_rejects_bad_measures() {
    let tmp = tempfile::tempdir().unwrap();
    for (atoms, needle) in [
        ("[[0.5, 0.6], [0.7, 0.6]]", "sum"),
        ("[[0.7, 0.5], [0.5, 0.5]]", "increasing"),
        ("[[1.2, 1.0]]", "< 1"),
    ] {
        let cfg = write_cfg(
            tmp.path(),
            &format!(
                r#"
[preference]
family = "mixed_crra"
atoms = {atoms}

[market]
T = 1.0
d = 1
mu = 0.07
sigma = 0.2
"#
            ),
        );
        let out = beq(&["solve", "constrained", "--config", &cfg]);
        assert_eq!(out.status.code(), Some(1), "atoms {atoms} accepted");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "atoms {atoms}: stderr {err}");
    }
}

#[test]
fn plot_script_emitted_when_requested() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        &format!("{MINIMAL}\n[output]\nemit_plots = true\n"),
    );
    let out_dir = tmp.path().join("out");
    let out = beq(&[
        "solve",
        "constrained",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let script = std::fs::read_to_string(out_dir.join("plot_solution.py")).unwrap();
    assert!(script.contains("solution.csv") && script.contains("matplotlib"));
}

#[test]
fn wellposedness_not_proven_exits_three() {
    // kappa = 4 makes the energy integral 16, far beyond Gcal(y_max), and
    // the Q integral stays below the horizon: NotProven, exit 3.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        r#"
[preference]
family = "weighted"
rho = 0.25
gamma = -0.5

[market]
T = 1.0
d = 1
mu = 0.8
sigma = 0.2

[solver]
y_max = 2.0
"#,
    );
    let out = beq(&[
        "wellposedness",
        "--config",
        &cfg,
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "stdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("NotProven"), "stdout: {stdout}");
}

#[test]
fn verify_rejects_mismatched_solution_and_config() {
    // Solve under one drift, then verify under another: the reloaded
    // solution no longer satisfies the fixed point for the new market.
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_a = write_cfg(tmp.path(), MINIMAL);
    let ok = beq(&[
        "solve",
        "constrained",
        "--config",
        &cfg_a,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(ok.status.success());
    let cfg_b_path = tmp.path().join("cfg_b.toml");
    std::fs::write(&cfg_b_path, MINIMAL.replace("mu = 0.08", "mu = 0.05")).unwrap();
    let out = beq(&[
        "verify",
        "hjb",
        "--config",
        cfg_b_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fixed-point"), "stderr: {err}");
}
