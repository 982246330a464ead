use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gcdlab_cli::{resolve_config_with_env, ConfigArgs};
use gcdlab_core::data::load_dataset;
use gcdlab_core::eval::{EvalReport, MetricsRecord};

fn gcdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcdlab"))
        .args(args)
        .env_remove("GCDLAB_TRAIN_EPOCHS")
        .output()
        .expect("spawn gcdlab")
}

fn ok(args: &[&str]) -> String {
    let out = gcdlab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = gcdlab(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8(out.stderr).unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, "data.n_per_class = 20\ntrain.epochs = 2\ntrain.batch_size = 64\n").unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_writes_the_easy_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/easy.gcds");
    let msg = ok(&["gen", "--preset", "easy", "--out", s(&out)]);
    assert!(msg.contains("K=10 K_base=5"), "{msg}");
    let ds = load_dataset(&out).unwrap();
    assert_eq!((ds.len(), ds.d_in(), ds.k_all(), ds.k_base()), (1000, 32, 10, 5));
    for (&y, &l) in ds.labels().iter().zip(ds.labeled()) {
        assert!(!(l && y >= 5), "novel classes must be fully unlabeled");
    }
    assert_eq!(ds.labeled_count(), 250);
}

#[test]
fn label25_labels_a_quarter_of_base_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("l25.gcds");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/label25.cfg");
    ok(&["gen", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(load_dataset(&out).unwrap().labeled_count(), 125);
}

#[test]
fn train_then_eval_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--preset", "hard", "--config", &cfg, "--seed", "4", "--out", s(&run)]);

    let lines: Vec<MetricsRecord> = fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.iter().map(|m| m.epoch).collect::<Vec<_>>(), vec![0, 1]);
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    let rows: Vec<&str> = curves.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("epoch,loss_total,"));
    assert_eq!(rows[0].split(',').count(), rows[1].split(',').count());
    let config = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(config.contains("data.separation = 3\n") && config.contains("train.seed = 4\n"));
    let final_m: MetricsRecord = serde_json::from_str(&fs::read_to_string(run.join("final.json")).unwrap()).unwrap();
    assert_eq!(&final_m, lines.last().unwrap());

    let ev = dir.path().join("ev");
    ok(&[
        "eval", "--preset", "hard", "--config", &cfg, "--seed", "4",
        "--checkpoint", s(&run.join("model.gcdm")), "--out", s(&ev),
    ]);
    let r: EvalReport = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!((r.acc.all, r.ob, r.sup_ce), (final_m.acc_all, final_m.ob, final_m.sup_ce));
}

#[test]
fn eval_accepts_a_dataset_file_and_rejects_mismatched_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("d.gcds");
    ok(&["gen", "--config", &cfg, "--seed", "1", "--out", s(&data)]);
    let run = dir.path().join("run");
    ok(&["train", "--config", &cfg, "--dataset", s(&data), "--out", s(&run)]);
    let ckpt = run.join("model.gcdm");
    let out = ok(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&data)]);
    assert!(out.contains("\"ob\""), "{out}");

    let other = dir.path().join("other.gcds");
    fs::write(dir.path().join("k6.cfg"), "data.k_all = 6\ndata.n_per_class = 20\n").unwrap();
    ok(&["gen", "--config", s(&dir.path().join("k6.cfg")), "--out", s(&other)]);
    let err = fails(&["eval", "--checkpoint", s(&ckpt), "--dataset", s(&other)]);
    assert!(err.contains("K 10") && err.contains("K 6"), "{err}");

    fs::write(dir.path().join("junk.gcdm"), b"not a model").unwrap();
    fails(&["eval", "--checkpoint", s(&dir.path().join("junk.gcdm")), "--dataset", s(&data)]);
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_sign() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--draws", "1", "--out", s(dir.path())]);
    assert!(out.contains("objective(f)") && !out.contains("FAIL"), "{out}");
    assert!(dir.path().join("gradcheck.json").exists());

    let bad = gcdlab(&["gradcheck", "--draws", "1", "--inject-sign-flip"]);
    assert_eq!(bad.status.code(), Some(1));
    let table = String::from_utf8(bad.stdout).unwrap();
    assert!(table.lines().filter(|l| l.ends_with("FAIL")).count() >= 10, "{table}");
    fails(&["gradcheck", "--draws", "0"]);
}

#[test]
fn ablate_writes_runs_and_direction_lines() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("abl");
    ok(&["ablate", "--config", &cfg, "--rows", "a,f", "--seeds", "0,1", "--out", s(&out)]);
    for f in ["runs/a_0.json", "runs/a_1.json", "runs/f_0.json", "runs/f_1.json", "ablation.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert!(table.contains("(a)") && table.contains("(f)"));
    assert!(table.contains("(a) -> (f) acc_all"), "{table}");
    let err = fails(&["ablate", "--seed", "1", "--out", s(&out)]);
    assert!(err.contains("--seeds"), "{err}");
    fails(&["ablate", "--rows", "z", "--out", s(&out)]);
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "train.epochs = 3\nloss.alpah = 0.5\n").unwrap();
    let err = fails(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert!(err.contains("line 2") && err.contains("loss.alpah"), "{err}");

    let err = fails(&["gen", "--preset", "medium", "--out", s(&dir.path().join("m.gcds"))]);
    assert!(err.contains("medium"), "{err}");
    fails(&["gen", "--config", s(&dir.path().join("missing.cfg")), "--out", s(&dir.path().join("m.gcds"))]);
    fs::write(&bad, "data.k_base = 11\n").unwrap();
    fails(&["gen", "--config", s(&bad), "--out", s(&dir.path().join("m.gcds"))]);
    fails(&["train"]);
}

#[test]
fn layering_is_preset_file_env_flags() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("c.cfg");
    fs::write(&file, "train.epochs = 7\ndata.seed = 2\nloss.lambda = 0.5\n").unwrap();
    let args = ConfigArgs {
        config: Some(file),
        preset: Some("hard".into()),
        seed: Some(9),
        dataset: None,
    };
    let env = vec![
        ("GCDLAB_TRAIN_EPOCHS".to_string(), "11".to_string()),
        ("UNRELATED".to_string(), "x".to_string()),
    ];
    let c = resolve_config_with_env(&args, env).unwrap();
    assert_eq!(c.data.separation, 3.0);
    assert_eq!(c.loss.lambda, 0.5);
    assert_eq!(c.train.epochs, 11);
    assert_eq!((c.train.seed, c.data.seed), (9, 9));

    let env = vec![("GCDLAB_TRAIN_EPOCHS".to_string(), "0".to_string())];
    assert!(resolve_config_with_env(&args, env).is_err());
}
