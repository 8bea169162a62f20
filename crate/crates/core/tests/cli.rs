use std::path::Path;
use std::process::{Command, Output};

use ppg_core::dataset::LayoutFile;
use ppg_core::layout::{AttributeVocabulary, Category};
use ppg_core::pipeline::{Manifest, Profile, RunConfig};

fn ppg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppg")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_inputs_exit_2_with_a_hint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = ppg(&["plan", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ppg synth"), "{}", stderr(&o));

    let o = ppg(&["synth", "--out", arg(&out), "--n", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ppg(&["plan", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ppg train"), "{}", stderr(&o));
    let o = ppg(&["compose", "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ppg plan"), "{}", stderr(&o));
}

#[test]
fn bad_config_and_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ \"seed\": ").unwrap();
    assert_eq!(ppg(&["synth", "--config", arg(&bad)]).status.code(), Some(2));
    assert_eq!(ppg(&["synth", "--config", arg(&dir.path().join("absent.json"))]).status.code(), Some(2));

    let mut cfg = RunConfig::for_profile(Profile::Desk);
    cfg.paths.out = dir.path().join("o");
    let good = dir.path().join("desk.json");
    std::fs::write(&good, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = ppg(&["synth", "--config", arg(&good), "--profile", "paper"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("conflicts"));

    cfg.decoder.width = 128;
    std::fs::write(&good, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = ppg(&["synth", "--config", arg(&good)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("profile"));

    assert_eq!(ppg(&["synth", "--jobs", "0", "--out", arg(&dir.path().join("j"))]).status.code(), Some(2));
    assert_eq!(ppg(&["synth", "--n", "0", "--out", arg(&dir.path().join("z"))]).status.code(), Some(2));
    assert_ne!(ppg(&["frobnicate"]).status.code(), Some(0));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::for_profile(Profile::Desk);
    cfg.paths.out = dir.path().join("o");
    cfg.synth.n = 8;
    cfg.train.steps = 40;
    cfg.train.lr = 1e30;
    cfg.train.clip_norm = None;
    let path = dir.path().join("c.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert!(ppg(&["synth", "--config", arg(&path)]).status.success());
    let o = ppg(&["train", "--config", arg(&path)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let msg = stderr(&o);
    assert!(msg.contains("diverged") || msg.contains("non-finite"), "{msg}");
}

fn layout_hashes(out: &Path) -> std::collections::BTreeMap<String, String> {
    Manifest::load(&out.join("manifest.json")).unwrap().layouts
}

#[test]
fn rerun_from_manifest_reproduces_layout_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = ppg(&["all", "--out", arg(&a), "--n", "24", "--steps", "4", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ppg(&["all", "--config", arg(&a.join("manifest.json")), "--out", arg(&b), "--jobs", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (ha, hb) = (layout_hashes(&a), layout_hashes(&b));
    assert_eq!(ha.len(), 24);
    assert_eq!(ha, hb);

    let m = Manifest::load(&a.join("manifest.json")).unwrap();
    let mb = Manifest::load(&b.join("manifest.json")).unwrap();
    assert_eq!(m.seed, 5);
    assert_eq!(m.corpus_sha256, mb.corpus_sha256);
    assert_eq!(m.checkpoint_sha256, mb.checkpoint_sha256);
    assert_eq!(m.posters + m.posters_skipped, 24);
    assert!(m.eval.is_some());
    assert!(a.join("eval/report.json").exists() && a.join("eval/scores.csv").exists());
    let poster = m.layouts.keys().find(|id| a.join("posters").join(format!("{id}.png")).exists()).expect("some poster");
    assert!(a.join("conditions").join(format!("{poster}.prck")).exists());

    // a different seed plans different layouts
    let c = dir.path().join("c");
    assert!(ppg(&["all", "--out", arg(&c), "--n", "24", "--steps", "4", "--seed", "6"]).status.success());
    assert_ne!(layout_hashes(&c), ha);
}

#[test]
fn constraints_file_is_honored_by_plan() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = ppg(&["all", "--out", arg(&out), "--n", "12", "--steps", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cons = dir.path().join("fix.json");
    std::fs::write(&cons, r#"{"fix": [{"slot": 0, "category": "product", "box": [0.5, 0.35, 0.4, null]}]}"#).unwrap();
    let o = ppg(&["plan", "--out", arg(&out), "--constraints", arg(&cons), "--samples", "30"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v = AttributeVocabulary::default();
    let dir_l = out.join("layouts");
    let mut n = 0;
    for e in std::fs::read_dir(&dir_l).unwrap() {
        let f: LayoutFile = serde_json::from_str(&std::fs::read_to_string(e.unwrap().path()).unwrap()).unwrap();
        let first = f.layout().elements[0].clone();
        assert_eq!(first.category, Category::Product);
        assert_eq!(v.bin(first.center_x), v.bin(0.5));
        assert_eq!(v.bin(first.center_y), v.bin(0.35));
        assert_eq!(v.bin(first.width), v.bin(0.4));
        n += 1;
    }
    assert_eq!(n, 30);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"fix": [{"slot": 0, "category": "sticker"}]}"#).unwrap();
    assert_eq!(ppg(&["plan", "--out", arg(&out), "--constraints", arg(&bad)]).status.code(), Some(2));
}
