use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(args)
        .env_remove("BENCH_OUTPUT_DIR")
        .output()
        .expect("run bench")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let cfg = format!(
        r#"
global_seed = 7
seeds = 2
k_grid = [1, 2]
output_dir = "{}"
{extra}

[[tasks]]
name = "tiny"
synth = {{ num_classes = 3, dim = 8, n_train = 60, n_test = 30, class_noise = 0.4, text_noise = 0.3, imbalance_ratio = 3.0, seed = 1 }}

[[adapters]]
method = "zero_shot"

[[adapters]]
method = "sstext_plus"
"#,
        dir.join("out").display()
    );
    let path = dir.join("bench.toml");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = bench(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let results = dir.path().join("out");
    for f in ["records.jsonl", "aggregates.csv", "report.json", "report.md", "curves.csv", "timings.csv"] {
        assert!(results.join(f).exists(), "{f} missing");
    }

    let before = fs::read_to_string(results.join("report.md")).unwrap();
    fs::remove_file(results.join("report.md")).unwrap();
    let out = bench(&["report", "--in", results.to_str().unwrap(), "--format", "md"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(fs::read_to_string(results.join("report.md")).unwrap(), before);
    assert!(before.contains("| sstext_plus |"));
}

#[test]
fn partial_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "scenarios = [\"standard\"]");
    let text = fs::read_to_string(&cfg).unwrap().replace("k_grid = [1, 2]", "k_grid = [1, 100]");
    fs::write(&cfg, text).unwrap();
    let out = bench(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("\"zero_shot\"", "\"no_such_method\"");
    fs::write(&cfg, text).unwrap();
    let out = bench(&["run", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_method"));

    let out = bench(&["run", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn output_dir_can_be_overridden_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_bench"))
        .args(["run", "--config", &cfg])
        .env("BENCH_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(elsewhere.join("report.md").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn synth_writes_loadable_interchange_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data = dir.path().join("data");
    let out = bench(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train", "test", "texts"] {
        assert!(data.join("tiny").join(format!("{f}.vleb")).exists());
        assert!(data.join("tiny").join(format!("{f}.manifest.toml")).exists());
    }

    // The exported files drive a file-backed sweep.
    let file_cfg = format!(
        r#"
seeds = 1
k_grid = [1]
scenarios = ["standard"]
output_dir = "{}"
[[tasks]]
name = "tiny"
train = "data/tiny/train.vleb"
test = "data/tiny/test.vleb"
texts = "data/tiny/texts.vleb"
[[adapters]]
method = "sstext_plus"
"#,
        dir.path().join("file_out").display()
    );
    let path = dir.path().join("files.toml");
    fs::write(&path, file_cfg).unwrap();
    let out = bench(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn val_study_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("k_grid = [1, 2]", "k_grid = [2]");
    fs::write(&cfg, text).unwrap();
    let out = bench(&["val-study", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out").join("val_study.md").exists());
}
