use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn exprcl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exprcl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("EXPRCL_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3

[data.synthetic]
n_identities = 4
videos_per_id = 2
duration_s = 2.0

[augmentation]
resize = 64
crop = 56

[pretrain]
batch_size = 8
epochs = 1
steps_per_epoch = 2

[downstream]
epochs = 2
batch_size = 16

[downstream.fr]
pairs = 40
"#;

#[test]
fn gen_synthetic_writes_manifest_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("corpus");
    let o = exprcl(&["gen-synthetic", "--out", p(&out), "--identities", "2", "--videos", "1", "--duration", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 1 + 2 * 5);
    assert_eq!(fs::read_to_string(out.join("labels.jsonl")).unwrap().lines().count(), 10);

    let png = tmp.path().join("png");
    let o = exprcl(&[
        "gen-synthetic", "--out", p(&png), "--identities", "2", "--videos", "1", "--duration", "0.4", "--png",
        "--format", "jsonl",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(png.join("manifest.jsonl").exists());
    assert_eq!(fs::read_dir(png.join("images")).unwrap().count(), 4);
}

#[test]
fn pretrain_probe_fr_and_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let run = tmp.path().join("run");

    let o = exprcl(&["pretrain", "--config", p(&cfg), "--out", p(&run), "--trace-augmentations"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("checkpoints/final.ckpt").exists());
    assert_eq!(fs::read_to_string(run.join("config.echo")).unwrap(), TINY);
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 1);
    assert!(run.join("traces/augs.jsonl").exists());

    let o = exprcl(&["probe", "--run", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("reports/probe_expr_cls.json")).unwrap()).unwrap();
    assert!(report["metrics"]["f1"].is_number());

    let o = exprcl(&["probe", "--run", p(&run), "--task", "va-reg"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("reports/probe_va_reg.json").exists());
    // The task override changes the effective config, which is kept beside the report.
    assert!(run.join("reports/probe_va_reg.config.toml").exists());
    assert!(!run.join("reports/probe_expr_cls.config.toml").exists());

    let o = exprcl(&["eval-fr", "--run", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("reports/fr_knn.json").exists());

    let o = exprcl(&["verify-run", "--run", p(&run)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));

    // A report carrying another config's fingerprint is caught.
    let rp = run.join("reports/fr_knn.json");
    let text = fs::read_to_string(&rp).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["config_fingerprint"] = "0000000000000000".into();
    fs::write(&rp, v.to_string()).unwrap();
    let o = exprcl(&["verify-run", "--run", p(&run)]);
    assert_eq!(code(&o), 1);

    // Unreadable checkpoint is a runtime failure.
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = exprcl(&["eval-fr", "--run", p(&run), "--checkpoint", p(&bad)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "seed = 0\n[loss]\ntemperature = -1.0\n").unwrap();
    let run = tmp.path().join("run");
    let o = exprcl(&["pretrain", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("loss.temperature"));

    fs::write(&cfg, "[loss]\ntemperature = 0.1\n").unwrap();
    let o = exprcl(&["pretrain", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let o = exprcl(&["pretrain", "--config", p(&tmp.path().join("missing.toml")), "--out", p(&run)]);
    assert_eq!(code(&o), 1);
    let o = exprcl(&["probe", "--run", p(&tmp.path().join("nope"))]);
    assert_eq!(code(&o), 1);
    let o = exprcl(&["no-such-command"]);
    assert_eq!(code(&o), 1);
    let o = exprcl(&["--help"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn matrix_rejects_unknown_toggle_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("base.toml"), TINY).unwrap();
    let spec = tmp.path().join("matrix.toml");
    fs::write(
        &spec,
        "base = \"base.toml\"\n[[row]]\nlabel = \"a\"\n[[row]]\nlabel = \"b\"\ntoggles = { timewarp = false }\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = exprcl(&["matrix", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("timewarp"));
    assert!(!out.join("a").exists());
}
