mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{tiny, with};
use serde_json::json;

fn biastrial(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_biastrial"))
        .current_dir(dir)
        .args(args)
        .envs(env.iter().copied())
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, patch: serde_json::Value) {
    let cfg = with(tiny(&dir.join("out")), patch);
    std::fs::write(dir.join("cfg.json"), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn stages_then_report_match_a_single_trial_run() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), json!({ "methods": ["naive", "reweigh", "unlearn"], "seeds": [1] }));
    for stage in ["gen", "train", "mitigate", "eval", "saliency"] {
        let o = biastrial(dir.path(), &["--config", "cfg.json", stage], &[]);
        assert_eq!(code(&o), 0, "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let data = dir.path().join("out/data");
    let atlas = biastrial_core::io::decode_atlas(&std::fs::read(data.join("atlas.sbla")).unwrap()).unwrap();
    let template = biastrial_core::io::decode_volume(&std::fs::read(data.join("template.sbvl")).unwrap()).unwrap();
    assert_eq!(atlas.labels.dims(), template.dims());
    assert!(!atlas.regions.is_empty());
    let staged = biastrial(dir.path(), &["report", "--config", "cfg.json", "--format", "csv"], &[]);
    assert_eq!(code(&staged), 0, "{}", String::from_utf8_lossy(&staged.stderr));
    assert!(dir.path().join("out/report/trial_report.csv").exists());
    assert!(!dir.path().join("out/report/trial_report.json").exists());

    let whole = biastrial(dir.path(), &["trial", "--config", "cfg.json", "--out", "fresh"], &[]);
    assert_eq!(code(&whole), 0);
    assert_eq!(staged.stdout, whole.stdout, "report hash");
}

#[test]
fn seeds_flag_and_environment_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), json!({ "scenarios": ["no-bias"], "methods": ["naive"], "seeds": [1] }));
    let o = biastrial(dir.path(), &["trial", "--config", "cfg.json", "--seeds", "3,4"], &[("BIASTRIAL_OUT_DIR", "env-out")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("env-out/runs/no-bias/naive/seed-3/fit.json").exists());
    assert!(dir.path().join("env-out/runs/no-bias/naive/seed-4/fit.json").exists());
    assert!(!dir.path().join("env-out/runs/no-bias/naive/seed-1").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), json!({ "scenarios": ["no-bias", "near-bias"], "methods": ["naive"], "seeds": [1] }));
    type Case<'a> = (&'a [&'a str], &'a [(&'a str, &'a str)], i32);
    let cases: [Case; 7] = [
        (&["gen", "--config", "cfg.json"], &[], 0),
        (&["gen", "--config", "missing.json"], &[], 2),
        (&["gen", "--config", "cfg.json", "--seeds", "1,one"], &[], 2),
        (&["gen", "--config", "cfg.json"], &[("BIASTRIAL_TRAIN_PATIENCE", "soon")], 2),
        (&["gen", "--config", "cfg.json", "--scenario", "sideways"], &[], 2),
        (&["trial", "--config", "cfg.json", "--scenario", "near-bias"], &[], 4),
        (&["report", "--config", "cfg.json"], &[], 2),
    ];
    for (args, env, want) in cases {
        let o = biastrial(dir.path(), args, env);
        assert_eq!(code(&o), want, "{args:?} {env:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
