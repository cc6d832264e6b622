use std::fs;
use std::path::{Path, PathBuf};

use scoda::cli::{main_with, RunConfig};
use scoda::model;

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["scoda"];
    full.extend_from_slice(args);
    main_with(full)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"{
  "data": {"n_per_class": 20},
  "pretrain": {"epochs": 2, "batch_size": 16},
  "adapt": {"epochs": 2, "batch_size": 16},
  "eval": {"k": 3}
}"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

struct Pipeline {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Pipeline {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = write_config(&root, "config.json", config);
        Self { _tmp: tmp, root, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn cmd(&self, out: &str, args: &[&str]) -> i32 {
        let out = self.path(out);
        let mut full = vec!["--config", p(&self.config), "--out", p(&out)];
        full.extend_from_slice(args);
        run(&full)
    }

    fn data(&self) {
        assert_eq!(self.cmd("data", &["gen-data"]), 0);
    }

    fn pretrain(&self, out: &str) {
        let src = self.path("data/source.csv");
        assert_eq!(self.cmd(out, &["pretrain", "--data", p(&src)]), 0);
    }
}

#[test]
fn gen_data_writes_datasets_and_manifest() {
    let pl = Pipeline::new(SMALL);
    pl.data();
    for f in ["source.csv", "target_0.csv", "manifest.json"] {
        assert!(pl.path("data").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(pl.path("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["shifts"].as_array().unwrap().len(), 1);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    let first = fs::read(pl.path("data/target_0.csv")).unwrap();
    assert_eq!(pl.cmd("data2", &["gen-data"]), 0);
    assert_eq!(first, fs::read(pl.path("data2/target_0.csv")).unwrap());
    assert_eq!(
        fs::read(pl.path("data/manifest.json")).unwrap(),
        fs::read(pl.path("data2/manifest.json")).unwrap()
    );
}

#[test]
fn multiple_shifts_give_multiple_targets() {
    let pl = Pipeline::new(r#"{"data": {"n_per_class": 10, "shifts": [{}, {"rotation_degrees": 60.0}]}}"#);
    pl.data();
    assert!(pl.path("data/target_1.csv").exists());
}

#[test]
fn invalid_config_exits_2_and_writes_nothing() {
    let pl = Pipeline::new(r#"{"data": {"shifts": [{"scale": 0.0}]}}"#);
    assert_eq!(pl.cmd("data", &["gen-data"]), 2);
    assert!(!pl.path("data").exists());
    let pl = Pipeline::new(r#"{"adapt": {"learning_rate": 0.1}}"#);
    assert_eq!(pl.cmd("data", &["gen-data"]), 2);
    assert!(!pl.path("data").exists());
    let pl = Pipeline::new("{ not json");
    assert_eq!(pl.cmd("data", &["gen-data"]), 2);
}

#[test]
fn missing_config_file_exits_3() {
    assert_eq!(run(&["--config", "/nonexistent/config.json", "gen-data"]), 3);
}

#[test]
fn pretrain_with_zero_epochs_is_random_init() {
    let pl = Pipeline::new(r#"{"data": {"n_per_class": 10}, "pretrain": {"epochs": 0}, "seed": 5}"#);
    pl.data();
    pl.pretrain("pre");
    let ckpt = fs::read(pl.path("pre/checkpoint.bin")).unwrap();
    let init = model::init_params(&model::default_spec(16), 5).unwrap();
    assert_eq!(ckpt, model::checkpoint_bytes(&init));
}

#[test]
fn pretrain_is_deterministic_and_reports_missing_data() {
    let pl = Pipeline::new(SMALL);
    pl.data();
    pl.pretrain("pre_a");
    pl.pretrain("pre_b");
    for f in ["checkpoint.bin", "pretrain_loss.csv", "manifest.json"] {
        assert_eq!(
            fs::read(pl.path("pre_a").join(f)).unwrap(),
            fs::read(pl.path("pre_b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(pl.cmd("pre_c", &["pretrain", "--data", "/nonexistent/source.csv"]), 3);
    assert!(!pl.path("pre_c").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let pl = Pipeline::new(SMALL);
    assert_eq!(pl.cmd("d1", &["--seed", "1", "gen-data"]), 0);
    assert_eq!(pl.cmd("d2", &["--seed", "2", "gen-data"]), 0);
    assert_ne!(
        fs::read(pl.path("d1/source.csv")).unwrap(),
        fs::read(pl.path("d2/source.csv")).unwrap()
    );
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(pl.path("d2/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 2);
    assert_eq!(m["config"]["adapt"]["seed"], 2);
}

#[test]
fn adapt_zero_epochs_returns_input_checkpoint() {
    let pl = Pipeline::new(r#"{"data": {"n_per_class": 10}, "pretrain": {"epochs": 1, "batch_size": 8}, "adapt": {"epochs": 0}}"#);
    pl.data();
    pl.pretrain("pre");
    let ckpt = pl.path("pre/checkpoint.bin");
    let tgt = pl.path("data/target_0.csv");
    assert_eq!(pl.cmd("adapt", &["adapt", "--checkpoint", p(&ckpt), "--target", p(&tgt)]), 0);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(pl.path("adapt/student.bin")).unwrap());
    assert_eq!(fs::read_to_string(pl.path("adapt/loss_trace.csv")).unwrap().lines().count(), 1);
}

#[test]
fn adapt_writes_one_trace_row_per_step_and_stages() {
    let pl = Pipeline::new(SMALL);
    pl.data();
    pl.pretrain("pre");
    let ckpt = pl.path("pre/checkpoint.bin");
    let tgt = pl.path("data/target_0.csv");
    assert_eq!(pl.cmd("one", &["adapt", "--checkpoint", p(&ckpt), "--target", p(&tgt)]), 0);
    // 60 rows, batch 16: 4 batches per epoch, 2 epochs.
    let trace = fs::read_to_string(pl.path("one/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 8);
    assert_eq!(trace.lines().next().unwrap(), "step,total,cos,space");

    assert_eq!(
        pl.cmd("two", &["adapt", "--checkpoint", p(&ckpt), "--target", p(&tgt), "--target", p(&tgt)]),
        0
    );
    for stage in ["stage_0", "stage_1"] {
        for f in ["student.bin", "teacher.bin", "loss_trace.csv"] {
            assert!(pl.path("two").join(stage).join(f).exists(), "{stage}/{f}");
        }
    }
    assert_eq!(
        fs::read(pl.path("one/student.bin")).unwrap(),
        fs::read(pl.path("two/stage_0/student.bin")).unwrap()
    );
}

#[test]
fn adapt_divergence_exits_4_with_step() {
    let pl = Pipeline::new(
        r#"{"data": {"n_per_class": 10}, "pretrain": {"epochs": 0}, "adapt": {"epochs": 3, "eta": 1e300, "batch_size": 8}}"#,
    );
    pl.data();
    pl.pretrain("pre");
    let ckpt = pl.path("pre/checkpoint.bin");
    let tgt = pl.path("data/target_0.csv");
    assert_eq!(pl.cmd("adapt", &["adapt", "--checkpoint", p(&ckpt), "--target", p(&tgt)]), 4);
    assert!(!pl.path("adapt").exists());
}

#[test]
fn eval_of_identical_checkpoints_has_zero_deltas() {
    let pl = Pipeline::new(SMALL);
    pl.data();
    pl.pretrain("pre");
    let ckpt = pl.path("pre/checkpoint.bin");
    let src = pl.path("data/source.csv");
    let tgt = pl.path("data/target_0.csv");
    let args = ["eval", "--pre", p(&ckpt), "--post", p(&ckpt), "--source", p(&src), "--target", p(&tgt)];
    assert_eq!(pl.cmd("eval", &args), 0);
    let rows = scoda::evalsuite::parse_report_csv(&fs::read_to_string(pl.path("eval/report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.delta == 0.0));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(pl.path("eval/report.json")).unwrap()).unwrap();
    let cfg = RunConfig::parse(SMALL).unwrap().resolve(None).unwrap();
    assert_eq!(report["seed"], 0);
    assert_eq!(report["config"]["config_hash"], cfg.hash());

    let missing = pl.path("nope.bin");
    let args = ["eval", "--pre", p(&missing), "--post", p(&ckpt), "--source", p(&src), "--target", p(&tgt)];
    assert_eq!(pl.cmd("eval2", &args), 3);
}

#[test]
fn ablate_table_shape_and_determinism() {
    let pl = Pipeline::new(SMALL);
    pl.data();
    pl.pretrain("pre");
    let ckpt = pl.path("pre/checkpoint.bin");
    let src = pl.path("data/source.csv");
    let tgt = pl.path("data/target_0.csv");
    let args = ["ablate", "--checkpoint", p(&ckpt), "--source", p(&src), "--target", p(&tgt)];
    assert_eq!(pl.cmd("a1", &args), 0);
    let table = fs::read_to_string(pl.path("a1/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3 + 3);
    assert_eq!(pl.cmd("a2", &args), 0);
    assert_eq!(table, fs::read_to_string(pl.path("a2/ablation.csv")).unwrap());

    let five = r#"{"data": {"n_per_class": 20}, "adapt": {"epochs": 1, "batch_size": 16}, "eval": {"k": 3, "ablation_seeds": [0, 1, 2, 3, 4]}}"#;
    let cfg5 = write_config(&pl.root, "five.json", five);
    let out = pl.path("a5");
    let mut full = vec!["--config", p(&cfg5), "--out", p(&out)];
    full.extend_from_slice(&args);
    assert_eq!(run(&full), 0);
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 15 + 3);
    assert_eq!(table.lines().filter(|l| l.contains(",mean,")).count(), 3);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(&["gradcheck", "--seed", "3"]), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(run(&["frobnicate"]), 2);
}
