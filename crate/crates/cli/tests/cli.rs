use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
train_images = 12
test_images = 4

[model]
feature_dim = 4
rank = 2
n_pred = 10

[model.sla]
mask_resolution = 8
conv_channels = [2, 3, 4]
word_dim = 3
lang_hidden = 4
lang_out = 3
sla_dim = 3

[model.features]
visual_dim = 4
map_channels = 3
map_height = 2
map_width = 2

[train]
epochs = 2
batch_size = 8

[project.projection]
iterations = 50
"#;

fn predcls(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_predcls"))
        .current_dir(dir)
        .env_remove("PREDCLS_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn train_eval_project_round() {
    let dir = setup();
    let d = dir.path();
    ok(&predcls(d, &["-c", "small.toml", "--out", "run", "train", "--epochs", "3"]));
    assert!(d.join("run/checkpoint.json").exists());
    let log = fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 4, "config header plus one record per epoch");
    let header: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(header["config"]["train"]["epochs"], 3, "flag beats file");
    assert_eq!(header["config"]["train"]["batch_size"], 8, "file beats default");

    ok(&predcls(d, &["-c", "small.toml", "--out", "run", "eval"]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/eval_report.json")).unwrap()).unwrap();
    let recall = report["recall"].as_object().unwrap();
    let keys: Vec<&String> = recall.keys().collect();
    assert_eq!(keys, ["R_10@100", "R_10@50", "R_1@50"]);
    assert!(recall.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    assert!(report["alignment"].as_f64().unwrap() >= 0.0);
    assert_eq!(report["test_pairs"], 16);
    assert!(d.join("run/predictions.jsonl").exists());

    ok(&predcls(d, &["-c", "small.toml", "--out", "run", "project"]));
    for f in ["projection.svg", "projection.csv", "projection.json"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }
}

#[test]
fn output_dir_from_environment() {
    let dir = setup();
    let out = Command::new(env!("CARGO_BIN_EXE_predcls"))
        .current_dir(dir.path())
        .env("PREDCLS_OUT", "from_env")
        .args(["-c", "small.toml", "synth"])
        .output()
        .unwrap();
    ok(&out);
    for f in ["train.json", "test.json", "train_sizes.json", "objects.txt", "predicates.txt"] {
        assert!(dir.path().join("from_env/data").join(f).exists(), "{f}");
    }
}

#[test]
fn synthesized_files_train_like_the_generator() {
    let dir = setup();
    let d = dir.path();
    ok(&predcls(d, &["-c", "small.toml", "--out", "gen", "synth"]));
    // Annotation files replace the generator.
    let from_files = SMALL.replace(
        "[data]\n",
        "[data]\ntrain_annotations = \"gen/data/train.json\"\ntest_annotations = \"gen/data/test.json\"\nobjects = \"gen/data/objects.txt\"\npredicates = \"gen/data/predicates.txt\"\n",
    );
    fs::write(d.join("files.toml"), from_files).unwrap();
    ok(&predcls(d, &["-c", "files.toml", "--out", "b", "train", "--epochs", "1"]));
    ok(&predcls(d, &["-c", "files.toml", "--out", "b", "eval", "--recall", "1@50"]));
    let report = fs::read_to_string(d.join("b/eval_report.json")).unwrap();
    assert!(report.contains("R_1@50"));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = setup();
    let d = dir.path();
    let out = predcls(d, &["-c", "missing.toml", "train"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    let out = predcls(d, &["-c", "small.toml", "--out", "none", "eval"]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("checkpoint"));

    fs::write(d.join("bad.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = predcls(d, &["-c", "bad.toml", "--out", "x", "train"]);
    assert!(!out.status.success());
}

#[test]
fn eval_reports_are_byte_identical_across_runs() {
    let dir = setup();
    let d = dir.path();
    for run in ["r1", "r2"] {
        ok(&predcls(d, &["-c", "small.toml", "--out", run, "train"]));
        ok(&predcls(d, &["-c", "small.toml", "--out", run, "eval"]));
    }
    let a = fs::read(d.join("r1/eval_report.json")).unwrap();
    let b = fs::read(d.join("r2/eval_report.json")).unwrap();
    assert_eq!(a, b);
    let ca = fs::read(d.join("r1/checkpoint.json")).unwrap();
    let cb = fs::read(d.join("r2/checkpoint.json")).unwrap();
    assert_eq!(ca, cb);
}
