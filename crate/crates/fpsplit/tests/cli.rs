use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fpsplit::grid::{Axis, Grid};

const BIN: &str = env!("CARGO_BIN_EXE_fpsplit");

const HEAT: &str = "\
[model]
preset = \"kolmogorov_chain\"

[grid]
lo = [-6.0]
hi = [6.0]
n = 96

[initial]
kind = \"gaussian\"
mean = [0.0]
var = [0.25]

[time]
t_final = 0.25
windows = 8

[output]
snapshot_stride = 4
";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn fpsplit(args: &[&str], out: &Path) -> Output {
    Command::new(BIN).args(args).env("FPSPLIT_OUTPUT_DIR", out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn heat_run_writes_report_snapshots_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "heat.toml", HEAT);
    let out = dir.path().join("out");
    let o = fpsplit(&["run", "--config", cfg.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 9);
    for n in [0, 4, 8] {
        assert!(out.join(format!("rho_{n:06}.csv")).is_file());
    }
    let last = fpsplit::Density::read_csv(&out.join("rho_000008.csv")).unwrap();
    let var = last.covariance()[0];
    assert!((var - 0.75).abs() < 0.02, "{var}");
    assert!(out.join("config.resolved.toml").is_file());
}

#[test]
fn repeated_runs_are_byte_identical_and_echo_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "heat.toml", HEAT);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert!(fpsplit(&["run", "--config", cfg.to_str().unwrap()], &a).status.success());
    assert!(fpsplit(&["run", "--config", cfg.to_str().unwrap()], &b).status.success());
    let ra = std::fs::read(a.join("report.csv")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.csv")).unwrap());
    let echo = a.join("config.resolved.toml");
    assert!(fpsplit(&["run", "--config", echo.to_str().unwrap()], &c).status.success());
    assert_eq!(ra, std::fs::read(c.join("report.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("rho_000008.csv")).unwrap(), std::fs::read(c.join("rho_000008.csv")).unwrap());
}

#[test]
fn zero_windows_fails_validation_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &HEAT.replace("windows = 8", "windows = 0"));
    let out = dir.path().join("out");
    let o = fpsplit(&["run", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml:16:"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn negative_spacing_names_the_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &HEAT.replace("hi = [6.0]", "hi = [-8.0]"));
    let o = fpsplit(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("axis 0"), "{}", stderr(&o));
}

#[test]
fn validate_accepts_the_default_rule_and_rejects_linear_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.toml", HEAT);
    let o = fpsplit(&["validate", "--config", good.to_str().unwrap()], &dir.path().join("out"));
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.matches("epsilon_scaling").count(), 8);
    assert!(!table.contains("FAIL"));
    // ε = h is admissible at the run's h = 1/32 only if the startup check is skipped,
    // so use a fixed ε that passes there but not at small h.
    let fixed = write(dir.path(), "fixed.toml", &format!("{HEAT}\n[solver]\nepsilon_rule = 1e-4\n"));
    let o = fpsplit(&["validate", "--config", fixed.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("epsilon_scaling h=0.001953125"));
    let linear = write(dir.path(), "linear.toml", &format!("{HEAT}\n[solver]\nepsilon_rule = \"linear\"\n"));
    let o = fpsplit(&["validate", "--config", linear.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon_rule"), "{}", stderr(&o));
}

#[test]
fn custom_model_with_expanding_drift_fails_the_divergence_check() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::new(vec![Axis::new(-3.0, 3.0, 24).unwrap()]).unwrap();
    let mut drift = g.header() + "\n";
    let mut pot = g.header() + "\n";
    for c in 0..g.len() {
        let x = g.center(c)[0];
        drift.push_str(&format!("{x:e}\n"));
        pot.push_str(&format!("{:e}\n", 0.5 * x * x));
    }
    write(dir.path(), "drift.csv", &drift);
    write(dir.path(), "pot.csv", &pot);
    let text = "\
[model]
preset = \"custom\"
drift_file = \"drift.csv\"
potential_file = \"pot.csv\"
diffusion = [1.0]

[grid]
lo = [-3.0]
hi = [3.0]
n = 24

[initial]
kind = \"gaussian\"
mean = [0.0]
var = [0.5]

[time]
t_final = 0.25
windows = 4
";
    let cfg = write(dir.path(), "custom.toml", text);
    let o = fpsplit(&["validate", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let table = String::from_utf8_lossy(&o.stdout);
    let line = table.lines().find(|l| l.starts_with("divergence_free")).unwrap();
    assert!(line.ends_with("FAIL"), "{line}");
    let missing = write(dir.path(), "missing.toml", &text.replace("pot.csv", "nope.csv"));
    let o = fpsplit(&["run", "--config", missing.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.toml:4:"), "{}", stderr(&o));
}

#[test]
fn study_writes_rows_and_rejects_a_single_window_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "heat.toml", HEAT);
    let out = dir.path().join("out");
    let o = fpsplit(&["study", "--config", cfg.to_str().unwrap(), "--windows", "8,16,32"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("study.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    // The terminal L1 error sits at the spatial floor here; W2 and the weak residual still resolve h.
    for col in [2, 4] {
        let v: Vec<f64> = rows.iter().map(|r| r[col].parse().unwrap()).collect();
        assert!(v[1] < v[0] && v[2] < v[1], "column {col}: {v:?}");
    }
    let o = fpsplit(&["study", "--config", cfg.to_str().unwrap(), "--windows", "8"], &out);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_passes_on_a_small_instance_and_rejects_large_grids() {
    let dir = tempfile::tempdir().unwrap();
    let small = HEAT.replace("n = 96", "n = 5").replace("lo = [-6.0]", "lo = [-2.0]").replace("hi = [6.0]", "hi = [2.0]").replace("var = [0.25]", "var = [1.0]");
    let cfg = write(dir.path(), "small.toml", &small);
    let o = fpsplit(&["oracle", "--config", cfg.to_str().unwrap()], &dir.path().join("out"));
    assert!(o.status.success(), "{}{}", stderr(&o), String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("oracle: PASS"));
    let big = write(dir.path(), "big.toml", HEAT);
    let o = fpsplit(&["oracle", "--config", big.to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("too large"), "{}", stderr(&o));
}

#[test]
fn oracle_gap_shrinks_along_an_epsilon_sweep() {
    let small = HEAT.replace("n = 96", "n = 8").replace("lo = [-6.0]", "lo = [-2.0]").replace("hi = [6.0]", "hi = [2.0]");
    let text = format!("{small}\n[oracle]\nepsilons = [1e-2, 1e-3, 1e-4]\ntol_objective = 1e-2\ntol_l1 = 1e-2\n");
    let cfg = fpsplit::cli::RunConfig::parse(&text, Path::new("sweep.toml")).unwrap();
    let mut sink = Vec::new();
    let rows = fpsplit::cli::cmd_oracle(&cfg, &mut sink).unwrap();
    assert!(rows.windows(2).all(|p| p[1].objective_gap < p[0].objective_gap), "{rows:?}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = fpsplit(&["run", "--config", dir.path().join("none.toml").to_str().unwrap()], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}
