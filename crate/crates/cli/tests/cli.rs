use std::path::Path;

use sgnet_cli::{run, CliConfig};

fn sgnet(args: &[&str]) -> i32 {
    run(std::iter::once("sgnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_sections_are_optional() {
    let c = CliConfig::from_toml_str("").unwrap();
    assert_eq!(c, CliConfig::default());
    assert!(!c.has_model);

    let mut c = CliConfig::from_toml_str("[model]\nvariance_map = false\n[train]\nepochs = 4\nlr_decay_epochs = [2]\n[edit]\nk = 7").unwrap();
    assert!(c.has_model && !c.model.variance_map);
    assert_eq!((c.train.epochs, c.edit.k), (4, 7));
    c.reseed(42);
    assert_eq!((c.train.seed, c.kd.seed, c.edit.seed), (42, 42, 42));

    assert!(CliConfig::from_toml_str("[bogus]\nx = 1").is_err());
    assert!(CliConfig::from_toml_str("[train]\nepochs = 0").is_err());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(sgnet(&["--help"]), 0);
    assert_eq!(sgnet(&[]), 1);
    assert_eq!(sgnet(&["frobnicate"]), 1);
    assert_eq!(sgnet(&["eval", "--split", "nowhere"]), 1);
    // Commands that read data need a manifest.
    assert_eq!(sgnet(&["eval"]), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.jsonl");
    assert_eq!(sgnet(&["--manifest", s(&missing), "train", "--out", s(&dir.path().join("run"))]), 2);
    let cfg = dir.path().join("missing.toml");
    assert_eq!(sgnet(&["--config", s(&cfg), "fixtures", "--out", s(dir.path())]), 2);
}

#[test]
fn pipeline_and_edit_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(sgnet(&["fixtures", "--out", s(&data), "--train", "4", "--val", "0", "--test", "2", "--frames", "8"]), 0);
    let cfg = d.join("c.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\nbatch_size = 4\nmicro_batch = 4\nlr_decay_epochs = []\ntask_mode = \"scale_only\"\n").unwrap();
    let run_dir = d.join("run");
    assert_eq!(sgnet(&["--config", s(&cfg), "--manifest", s(&manifest), "train", "--out", s(&run_dir)]), 0);
    let ckpt = run_dir.join("final.ckpt");
    assert!(ckpt.exists());

    let preds = d.join("preds.jsonl");
    assert_eq!(sgnet(&["--manifest", s(&manifest), "--checkpoint", s(&ckpt), "predict", "--out", s(&preds)]), 0);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&preds).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l["scale"].is_string() && l["scale_probs"].as_array().unwrap().len() == 5));

    let m = sgnet::data::Manifest::parse_file(&manifest).unwrap();
    let shot = m.records()[0].shot_id.clone();
    let edit = |target: &str, extra: &[&str]| {
        let out = d.join(format!("edit_{target}.srv"));
        let mut args = vec!["--manifest", s(&manifest), "--checkpoint", s(&ckpt), "edit", "--shot", &shot, "--target", target, "--out", s(&out), "--n-clips", "1"];
        args.extend_from_slice(extra);
        let out = out.to_string_lossy().into_owned();
        (sgnet(&args), out)
    };

    // One proposal has one predicted scale: exactly one target finds a candidate.
    let targets = ["LS", "FS", "MS", "CS", "ECS"];
    let codes: Vec<(i32, String)> = targets.iter().map(|t| edit(t, &["--k", "1"])).collect();
    assert_eq!(codes.iter().filter(|(c, _)| *c == 0).count(), 1, "{codes:?}");
    assert_eq!(codes.iter().filter(|(c, _)| *c == 4).count(), 4, "{codes:?}");
    let found = codes.iter().position(|(c, _)| *c == 0).unwrap();
    let out = Path::new(&codes[found].1);
    assert!(out.exists());
    assert!(sgnet_cli::edit::sidecar_path(out).exists());

    let target = targets[found];
    assert_eq!(edit(target, &["--k", "1", "--anchor", "100,100,5,5"]).0, 1);
    assert_eq!(edit(target, &["--k", "1", "--segments", "0:999"]).0, 1);
    assert_eq!(sgnet(&["--manifest", s(&manifest), "--checkpoint", s(&ckpt), "edit", "--shot", "nope", "--target", "LS", "--out", s(&d.join("x.srv"))]), 1);
}
