use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
sequence_len = 3
shot = 2
query = 1

[synth]
n_subjects = 3
clips_per_class = 4

[magnify]
cap = 1

[backbone]
embedding_dim = 16

[gfe]
epochs = 1
batch_size = 4
batches_per_epoch = 1

[afe]
epochs = 1
batch_size = 8

[meta]
batches = 2
episodes_per_batch = 1

[eval]
resamples = 2

[sweep]
values = [0.0, 0.5, 1.0]
"#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    // `extra` goes first so its top-level keys are not swallowed by a section
    let text = format!("run_dir = {:?}\n{}\n{}", dir.join("run").display().to_string(), extra, TINY);
    std::fs::write(&path, text).unwrap();
    path
}

fn mpf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpf"))
        .args(args)
        .env_remove("MPF_RUN_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn ledger(run: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(run.join("ledger.json")).unwrap()).unwrap()
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect()
}

#[test]
fn eval_before_train_exits_3_naming_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = mpf(&["eval", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`train`"));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["gamma = 1.5", "way = 4", "data = { manifest = \"/nonexistent/manifest.jsonl\" }"] {
        let cfg = write_config(dir.path(), extra);
        let out = mpf(&["synth", "-c", cfg.to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{}", extra);
    }
    let cfg = write_config(dir.path(), "");
    assert_eq!(code(&mpf(&["synth", "-c", cfg.to_str().unwrap(), "--set", "sequence_len=21"])), 2);
    assert_eq!(code(&mpf(&["synth", "-c", dir.path().join("absent.toml").to_str().unwrap()])), 2);
}

#[test]
fn full_run_is_ledgered_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let run = dir.path().join("run");
    let out = mpf(&["all", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let first = ledger(&run);
    let stages = first["stages"].as_object().unwrap();
    let names: BTreeSet<&str> = stages.keys().map(String::as_str).collect();
    let expected: BTreeSet<&str> = [
        "synth",
        "preprocess",
        "magnify",
        "pretrain-gfe",
        "pretrain-afe",
        "train",
        "eval",
        "sweep",
        "report",
    ]
    .into_iter()
    .collect();
    assert_eq!(names, expected);

    // every file on disk is listed by exactly the ledger
    let mut listed = BTreeSet::new();
    for e in stages.values() {
        assert_eq!(e["completed"], true);
        for o in e["outputs"].as_array().unwrap() {
            listed.insert(PathBuf::from(o.as_str().unwrap()));
        }
    }
    let mut on_disk = files_under(&run);
    on_disk.remove(Path::new("ledger.json"));
    assert_eq!(listed, on_disk);

    let sweep = std::fs::read_to_string(run.join("sweep/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let metrics = std::fs::read_to_string(run.join("report/metrics.csv")).unwrap();
    assert!(metrics.contains("mpfnet_c") && metrics.contains("no_prior"));
    assert!(run.join("report/confusion_mpfnet_c.txt").is_file());

    let again = mpf(&["all", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&again), 0);
    let stdout = String::from_utf8_lossy(&again.stdout);
    assert_eq!(stdout.matches("up to date, skipped").count(), 9, "{}", stdout);
    assert_eq!(ledger(&run), first);
}

#[test]
fn overrides_take_precedence_and_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let other = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_mpf"))
        .args(["synth", "-c", cfg.to_str().unwrap(), "--seed", "5", "--set", "synth.clips_per_class=3"])
        .env("MPF_RUN_DIR", &other)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("run").exists());
    let entry = &ledger(&other)["stages"]["synth"];
    let recorded: Vec<&str> = entry["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(recorded.contains(&"synth.clips_per_class=3"));
    assert!(recorded.contains(&"--seed 5"));
    let manifest = std::fs::read_to_string(other.join("synth/manifest.jsonl")).unwrap();
    // header plus 3 subjects × 3 classes × 3 clips
    assert_eq!(manifest.lines().count(), 1 + 27);

    // a changed seed changes the input hash, so the stage reruns
    let rerun = Command::new(env!("CARGO_BIN_EXE_mpf"))
        .args(["synth", "-c", cfg.to_str().unwrap(), "--seed", "6", "--set", "synth.clips_per_class=3"])
        .env("MPF_RUN_DIR", &other)
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&rerun.stdout).contains("synth: done"));
}

#[test]
fn changed_upstream_config_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&mpf(&["synth", "-c", c])), 0);
    assert_eq!(code(&mpf(&["preprocess", "-c", c])), 0);
    let out = mpf(&["pretrain-gfe", "-c", c, "--set", "synth.motion_amplitude=2.0"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`preprocess`"));
}

#[test]
fn resolved_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "gamma = 0.4\nvariant = \"p\"");
    let first = mpf(&["show-config", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&first), 0);
    let resolved = dir.path().join("resolved.toml");
    std::fs::write(&resolved, &first.stdout).unwrap();
    let second = mpf(&["show-config", "-c", resolved.to_str().unwrap()]);
    assert_eq!(first.stdout, second.stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    assert!(text.contains("gamma = 0.4"));
}
