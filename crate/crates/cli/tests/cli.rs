use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pet"))
        .args(args)
        .env_remove("PET_SEED")
        .output()
        .expect("pet binary runs")
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &PathBuf) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn count_reports_bart_share() {
    let out = pet(&["count", &config("bart_base.toml"), "--instantiate"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = stdout(&out);
    assert!(text.contains("trainable\t6017280"), "{text}");
    assert!(text.contains("percentage\t4.13"), "{text}");
}

#[test]
fn set_overrides_config_keys() {
    let out = pet(&[
        "count",
        &config("bart_base.toml"),
        "--set",
        "method.name=vlpet_small",
    ]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("method\tvlpet_small"));
}

#[test]
fn unknown_keys_are_rejected() {
    let out = pet(&["count", &config("toy.toml"), "--set", "train.stepz=3"]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_results_and_honours_seed_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pet"))
        .args([
            "run",
            &config("toy.toml"),
            "--set",
            "train.steps=3",
            "--set",
            "tasks.eval_size=4",
        ])
        .arg("--out")
        .arg(dir.path())
        .env("PET_SEED", "17")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&dir.path().join("results.csv"));
    let seed_col = rows[0].iter().position(|h| h == "seed").unwrap();
    assert_eq!(rows.len(), 2, "one seed after the env override");
    assert_eq!(rows[1][seed_col], "17");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("results.json")).unwrap())
            .unwrap();
    assert_eq!(json["results"].as_array().unwrap().len(), 1);
}

#[test]
fn grid_emits_one_row_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_string_lossy().into_owned();
    let out = pet(&[
        "grid",
        &config("toy.toml"),
        "--axis",
        "cross",
        "--set",
        "train.steps=2",
        "--set",
        "tasks.eval_size=2",
        "--set",
        "seeds=[0,1]",
        "--out",
        &out_dir,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(csv_rows(&dir.path().join("results.csv")).len(), 1 + 3 * 2);
}

#[test]
fn bad_axis_fails() {
    let out = pet(&["grid", &config("toy.toml"), "--axis", "nope"]);
    assert!(!out.status.success());
}

#[test]
fn dump_g_writes_gate_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    let out = pet(&[
        "dump-g",
        &config("toy.toml"),
        "--site",
        "enc.0.self_attn_out",
        "--steps",
        "2",
        "--out",
        &csv.to_string_lossy(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = csv_rows(&csv);
    assert_eq!(rows[0][0], "pos");
    assert_eq!(rows[0].len(), 1 + 64);
    for row in &rows[1..] {
        for v in &row[1..] {
            let v: f64 = v.parse().unwrap();
            assert!(v > 0.0 && v < 1.0);
        }
    }
}

#[test]
fn verify_filter_runs_subset() {
    let out = pet(&["verify", "--filter", "granularity/param_counts"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("granularity/param_counts\tPASS"), "{text}");
    assert!(text.contains("passed=1\tfailed=0"));
}
