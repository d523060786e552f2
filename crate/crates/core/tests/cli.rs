use std::path::Path;
use std::process::{Command, Output};

use maelre::encoder::checkpoint;

const TINY: &str = "\
variant = custom
layers = 1,1
heads = 1,2
d0 = 16
mlp_ratio = 2
stem = seq1d
stem.length = 300
stem.kernel = 15
stem.stride = 15
task = freq1d
task.classes = 3
task.length = 300
train.epochs = 2
train.warmup_epochs = 1
train.batch_size = 8
train.n_train = 24
train.n_test = 12
";

fn maelre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maelre")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_eval_round_trips_through_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("ckpt");
    let out_s = out.to_str().unwrap();
    let t = maelre(&["train", "--config", &cfg, "--task", "freq1d", "--out", out_s, "--seed", "4", "--psi", "softplus"]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let epochs: Vec<String> = stdout(&t).lines().filter(|l| l.starts_with("epoch=")).map(String::from).collect();
    assert_eq!(epochs.len(), 2);

    let (model, manifest) = checkpoint::load::<f32>(&out).unwrap();
    assert_eq!(manifest.get("psi"), Some("softplus"));
    assert_eq!(manifest.get("train.seed"), Some("4"));
    assert_eq!(model.config().num_classes, 3);

    let e = maelre(&["eval", "--checkpoint", out_s, "--task", "freq1d"]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let line = stdout(&e);
    assert!(line.contains("samples=12"), "{line}");
    // the last training epoch and eval see the same held-out split and weights
    let top1 = |s: &str| s.split_whitespace().find_map(|w| w.strip_prefix("top1=")).map(str::to_string);
    assert_eq!(top1(&line), top1(epochs.last().unwrap()));

    let again = maelre(&["eval", "--checkpoint", out_s, "--task", "freq1d"]);
    assert_eq!(stdout(&again), line);
}

#[test]
fn sequential_and_parallel_training_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--config", &cfg, "--task", "freq1d", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = maelre(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
            .lines()
            .map(|l| l.split(" seconds=").next().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(run("par", &[]), run("seq", &["--sequential"]));
}

#[test]
fn eval_rejects_a_mismatched_task() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("ckpt");
    let out_s = out.to_str().unwrap();
    assert!(maelre(&["train", "--config", &cfg, "--task", "freq1d", "--out", out_s]).status.success());
    let e = maelre(&["eval", "--checkpoint", out_s, "--task", "multilabel"]);
    assert!(!e.status.success());
}

#[test]
fn unknown_manifest_keys_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{TINY}train.lr_pek = 0.1\n"));
    let out = dir.path().join("ckpt");
    let o = maelre(&["train", "--config", &cfg, "--task", "freq1d", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.lr_pek"));
}

#[test]
fn gradcheck_and_oracle_exit_cleanly() {
    for module in ["attention", "reduction", "encoder"] {
        let o = maelre(&["gradcheck", "--module", module]);
        assert!(o.status.success(), "{module}: {}", stdout(&o));
        assert!(!stdout(&o).is_empty());
    }
    let o = maelre(&["oracle", "--trials", "5"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!maelre(&["oracle", "--trials", "0"]).status.success());
}

#[test]
fn cost_emits_markdown_and_csv() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small_series_3750.cfg");
    let cfg = cfg.to_str().unwrap();
    let md = stdout(&maelre(&["cost", "--config", cfg, "--tokens", "3750", "--compare", "--format", "markdown"]));
    assert_eq!(md.lines().filter(|l| l.starts_with("| ")).count(), 5);
    let csv = stdout(&maelre(&["cost", "--config", cfg, "--tokens", "3750"]));
    let rows = maelre::cost::parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].policy, "mixed");
    assert!(!maelre(&["cost", "--config", cfg, "--tokens", "0"]).status.success());
}
