use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
env = "pointmass"
data_dir = "data"
out_dir = "run"
precision = "f64"

[data]
episodes = 12
fail_frac = 0.25
seed = 3

[train]
seed = 5
chunk_len = 5
prefix_len = 1
flow_depth = 2
hidden = 8
heads = 2
ffn_mult = 1
n_pi = 4
eval_episodes = 4

[train.critic]
hidden = 8
heads = 2
layers = 1
ffn_hidden = 8
num_bins = 11
ensemble_size = 2
dropout = 0.0

[train.il]
lr = 1e-3
dropout = 0.0
steps = 20
batch_size = 16

[train.warmup]
lr = 1e-3
dropout = 0.0
steps = 10
batch_size = 16

[train.offline]
lr = 1e-3
dropout = 0.0
steps = 10
batch_size = 16

[train.online]
lr = 1e-3
dropout = 0.0
buffer_capacity = 10000
iterations = 1
episodes_per_iteration = 2
steps_per_iteration = 5
batch_size = 16
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_softflow"))
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .env("SOFTFLOW_RUN_ROOT", self.dir.path())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn tiny_with(extra_train: &str) -> String {
    TINY.replace("[train]\n", &format!("[train]\n{extra_train}\n"))
}

#[test]
fn gen_data_is_deterministic_and_guards_output() {
    let sb = Sandbox::new(TINY);
    let out = sb.ok(&["gen-data"]);
    assert!(
        out.contains("wrote 12 pointmass episodes (9 successful)"),
        "{out}"
    );
    let first = fs::read(sb.path("data/manifest.json")).unwrap();
    assert_eq!(
        code(&sb.run(&["gen-data"])),
        1,
        "non-empty output needs --overwrite"
    );
    sb.ok(&["gen-data", "--overwrite"]);
    assert_eq!(fs::read(sb.path("data/manifest.json")).unwrap(), first);
    assert_eq!(
        code(&sb.run(&["gen-data", "--n", "0", "--out", "other"])),
        1
    );
}

#[test]
fn stage_without_prerequisite_exits_3() {
    let sb = Sandbox::new(TINY);
    let out = sb.run(&["train", "--stage", "warmup"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_corpus_exits_2() {
    let sb = Sandbox::new(TINY);
    assert_eq!(code(&sb.run(&["train", "--stage", "il"])), 2);
}

#[test]
fn unknown_config_key_is_rejected() {
    let sb = Sandbox::new(&tiny_with("learning_rate = 0.1"));
    let out = sb.run(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn changed_config_is_a_resume_mismatch() {
    let sb = Sandbox::new(TINY);
    sb.ok(&["gen-data"]);
    sb.ok(&["train", "--stage", "il"]);
    fs::write(sb.path("run.toml"), tiny_with("lambda_bc = 0.3")).unwrap();
    assert_eq!(code(&sb.run(&["train", "--stage", "warmup"])), 3);
}

#[test]
fn train_eval_and_checkpoint_checks() {
    let sb = Sandbox::new(TINY);
    sb.ok(&["gen-data"]);
    let out = sb.ok(&["train", "--stage", "all"]);
    for stage in ["il", "warmup", "offline", "online"] {
        assert!(out.contains(&format!("stage {stage}")), "{out}");
        assert!(sb.path(&format!("run/checkpoints/{stage}.ckpt")).exists());
    }
    assert!(sb.path("run/config.toml").exists());
    assert!(sb.path("run/buffers/offline.buf").exists());
    assert_eq!(
        fs::read_to_string(sb.path("run/reports.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let out = sb.ok(&["train", "--stage", "all", "--resume"]);
    assert!(out.contains("nothing to run"), "{out}");

    sb.ok(&["eval", "--episodes", "6"]);
    let metrics = fs::read_to_string(sb.path("run/metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let ns: Vec<u64> = lines
        .iter()
        .map(|v| v["n_samples"].as_u64().unwrap())
        .collect();
    assert_eq!(ns, [1, 4]);
    assert!(lines.iter().all(|v| v["metrics"]["episodes"] == 6));
    sb.ok(&["eval", "--episodes", "6"]);
    assert_eq!(
        fs::read_to_string(sb.path("run/metrics.jsonl")).unwrap(),
        metrics
    );

    assert_eq!(code(&sb.run(&["eval", "--episodes", "0"])), 1);

    let ckpt = sb.path("run/checkpoints/online.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x55;
    let bad = sb.path("bad.ckpt");
    fs::write(&bad, bytes).unwrap();
    let bad_arg = bad.to_str().unwrap();
    assert_eq!(code(&sb.run(&["eval", "--checkpoint", bad_arg])), 2);

    let good_arg = ckpt.to_str().unwrap();
    let out = sb.ok(&["check", "--checkpoint", good_arg]);
    assert!(out.contains("PASS checkpoint"), "{out}");
    let out = sb.run(&["check", "--checkpoint", bad_arg]);
    assert_eq!(code(&out), 1);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(
        text.contains("FAIL checkpoint") && text.contains("checksum"),
        "{text}"
    );
}

#[test]
fn single_value_sweep_equals_plain_training() {
    let sb = Sandbox::new(&TINY.replace("eval_episodes = 4", "eval_episodes = 2"));
    sb.ok(&["gen-data"]);
    sb.ok(&["train"]);
    let out = sb.ok(&["sweep", "--axis", "lambda", "--values", "0.1"]);
    assert!(out.contains("1 rows written"), "{out}");
    let point = sb.path("run/sweep-lambda/lambda=0.1/checkpoints/online.ckpt");
    assert_eq!(
        fs::read(point).unwrap(),
        fs::read(sb.path("run/checkpoints/online.ckpt")).unwrap()
    );
}

#[test]
fn sweep_table_has_one_row_per_value() {
    let sb = Sandbox::new(&format!("stages = [\"il\"]\n{TINY}"));
    sb.ok(&["gen-data"]);
    sb.ok(&["sweep", "--axis", "H", "--values", "2,3,4"]);
    let table = fs::read_to_string(sb.path("run/sweep_H.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = table
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["value"], 4.0);
    assert!(rows.iter().all(|r| r["stage"] == "il"));
}

#[test]
fn check_filter_runs_one_suite() {
    let sb = Sandbox::new(TINY);
    let out = sb.ok(&["check", "--filter", "mixing"]);
    assert!(
        out.lines()
            .filter(|l| l.starts_with("PASS"))
            .all(|l| l.contains("mixing")),
        "{out}"
    );
    assert!(!out.contains("FAIL"));
    assert_eq!(code(&sb.run(&["check", "--filter", "no-such-suite"])), 1);
}

#[test]
fn run_root_applies_to_relative_paths_only() {
    let sb = Sandbox::new(TINY);
    let abs = sb.path("elsewhere");
    sb.ok(&["gen-data", "--out", abs.to_str().unwrap()]);
    assert!(Path::new(&abs).join("manifest.json").exists());
    assert!(!sb.path("data").exists());
}
