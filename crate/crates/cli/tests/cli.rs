use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn procap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_procap")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

#[test]
fn help_exits_zero() {
    let o = procap(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["synth", "kb", "pretrain-decoder", "train", "caption", "eval"] {
        assert!(text.contains(sub), "help lacks {sub}: {text}");
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let o = procap(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn train_without_data_names_the_flag() {
    let o = procap(&["train", "--kb", "kb.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
}

#[test]
fn domain_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = procap(&["train", "--data", missing.to_str().unwrap(), "--kb", "kb.json", "--out", "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let o = procap(&["synth", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_on_smoke_config() {
    let dir = tempfile::tempdir().unwrap();
    let p = |rel: &str| dir.path().join(rel).to_str().unwrap().to_string();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let ok = |args: &[&str]| {
        let o = procap(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        String::from_utf8_lossy(&o.stdout).into_owned()
    };

    ok(&["synth", "--config", cfg, "--out", &p("data"), "--seed", "5"]);
    ok(&["synth", "--config", cfg, "--out", &p("data2"), "--seed", "5"]);
    let m1 = std::fs::read_to_string(p("data/manifest.json")).unwrap();
    assert_eq!(m1, std::fs::read_to_string(p("data2/manifest.json")).unwrap());
    assert!(m1.contains("\"provenance\""));

    let manifest = p("data/manifest.json");
    ok(&["pretrain-decoder", "--config", cfg, "--data", &manifest, "--out", &p("pre"), "--seed", "5"]);
    ok(&["kb", "build", "--checkpoint", &p("pre/model.ckpt"), "--manifest", &manifest, "--out", &p("kb.json")]);
    for run in ["run", "run2"] {
        ok(&["train", "--config", cfg, "--data", &manifest, "--kb", &p("kb.json"), "--out", &p(run), "--init", &p("pre/model.ckpt"), "--seed", "5"]);
    }
    let log = std::fs::read_to_string(p("run/loss_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,l_s,l_p,l_seg,total\n"));
    assert_eq!(log.lines().count(), 11);
    assert_eq!(log, std::fs::read_to_string(p("run2/loss_log.csv")).unwrap());
    assert_eq!(std::fs::read(p("run/model.ckpt")).unwrap(), std::fs::read(p("run2/model.ckpt")).unwrap());

    let table = ok(&["eval", "--checkpoint", &p("run/model.ckpt"), "--kb", &p("kb.json"), "--data", &manifest, "--out", &p("report.json")]);
    assert!(table.contains("Projection"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p("report.json")).unwrap()).unwrap();
    assert!(report["results"]["scene"]["all"]["B@4"].is_number());
    assert_eq!(report["meta"]["config"]["seed"], 5);
    assert!(Path::new(&p("report.txt")).exists());

    let image = dir.path().join("data/sources").read_dir().unwrap().next().unwrap().unwrap().path();
    let caption = ok(&["caption", "--checkpoint", &p("run/model.ckpt"), "--null-retrieval", "--image", image.to_str().unwrap(), "--task", "scene"]);
    assert_eq!(caption.lines().count(), 1);
}
