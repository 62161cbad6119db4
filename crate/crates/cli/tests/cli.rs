use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pmad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmad"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn without_timestamps(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    let m = v.as_object_mut().unwrap();
    assert!(m.remove("started_at").is_some() && m.remove("finished_at").is_some());
    v
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn synth_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [a.path(), b.path()] {
        ok(&pmad(dir, &["synth-data", "--out", "d", "--seed", "7", "--n-per-class", "3", "--size", "32"]));
    }
    let (ta, tb) = (tree(&a.path().join("d")), tree(&b.path().join("d")));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    assert_eq!(ta.len(), 3 * 3 * 2 + 1);
    for (k, va) in &ta {
        if k.ends_with("manifest.json") {
            assert_eq!(without_timestamps(va), without_timestamps(&tb[k]));
        } else {
            assert_eq!(va, &tb[k], "{k:?}");
        }
    }
    let m = json(&a.path().join("d/manifest.json"));
    assert_eq!(m["command"], "synth-data");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config"]["n_per_class"], "3");
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("quick.cfg"), "seeds = 2\n").unwrap();
    let out = pmad(dir.path(), &["gradcheck", "--profile", "tiny", "--config", "quick.cfg"]);
    ok(&out);
    let table = String::from_utf8(out.stdout).unwrap();
    for name in [
        "conv2d",
        "transpose_conv2d",
        "maxpool2d",
        "avgpool2d",
        "global_avgpool",
        "batch_norm (train)",
        "batch_norm (eval)",
        "relu",
        "sigmoid",
        "silu",
        "gelu",
        "leaky_relu",
        "softmax",
        "dropout",
        "concat_channels",
        "filter_concat",
        "dense",
        "mul_gate",
        "upsample_bilinear",
        "pmm_block",
        "spatial_channel_attention",
        "csfem",
    ] {
        let line = table.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} missing:\n{table}"));
        assert!(line.ends_with("PASS"), "{line}");
    }
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(pmad(p, &["no-such-command"]).status.code(), Some(1));
    assert_eq!(pmad(p, &["train-seg", "--out", "o"]).status.code(), Some(1));
    fs::write(p.join("bad.cfg"), "learning_rat = 0.1\n").unwrap();
    let out = pmad(p, &["train-seg", "--config", "bad.cfg", "--data-dir", "d", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage:"));
    assert_eq!(pmad(p, &["eval-seg", "--checkpoint", "missing.pmad", "--data-dir", "."]).status.code(), Some(2));
    fs::write(p.join("junk.pmad"), b"PMADCKPT not really").unwrap();
    assert_eq!(pmad(p, &["print-arch", "--checkpoint", "junk.pmad"]).status.code(), Some(2));
    assert_eq!(pmad(p, &["--help"]).status.code(), Some(0));
}

#[test]
fn diverging_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pmad(p, &["synth-data", "--out", "d", "--n-per-class", "4", "--size", "32"]));
    fs::write(p.join("hot.cfg"), "learning_rate = 1e300\nepochs = 2\nbatch_size = 2\ninput_height = 32\ninput_width = 32\n").unwrap();
    let out = pmad(p, &["train-cls", "--config", "hot.cfg", "--data-dir", "d", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn preprocess_dumps_stages_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pmad(p, &["synth-data", "--out", "d", "--n-per-class", "1", "--size", "48"]));
    let input = "d/malignant/malignant (1).png";
    ok(&pmad(p, &["preprocess", "--input", input, "--out", "pre.png", "--dump-stages", "stages", "--height", "32", "--width", "32"]));
    let names: Vec<String> = {
        let mut v: Vec<String> = fs::read_dir(p.join("stages")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    assert_eq!(names, ["01_gamma.png", "02_gaussian.png", "03_resized.png", "04_normalized.png"]);
    assert_eq!(fs::read(p.join("pre.png")).unwrap(), fs::read(p.join("stages/04_normalized.png")).unwrap());
    assert!(p.join("pre.png.manifest.json").is_file());
}

#[test]
fn train_evaluate_and_explain_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(&pmad(p, &["synth-data", "--out", "d", "--n-per-class", "4", "--size", "32", "--seed", "3"]));
    fs::write(
        p.join("run.cfg"),
        "# tiny smoke run\nlearning_rate = 0.05\nepochs = 2\nbatch_size = 4\ninput_height = 32\ninput_width = 32\n",
    )
    .unwrap();

    ok(&pmad(p, &["train-seg", "--config", "run.cfg", "--data-dir", "d", "--out", "seg"]));
    for f in ["checkpoint.pmad", "metrics.jsonl", "curves.csv", "curve_dice.png", "gradcam_panels.png", "manifest.json"] {
        assert!(p.join("seg").join(f).is_file(), "{f}");
    }
    let lines = fs::read_to_string(p.join("seg/metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);
    let manifest = json(&p.join("seg/manifest.json"));
    let hash = manifest["checkpoint_hash"].as_str().unwrap().to_string();
    assert!(hash.starts_with("sha256:") && hash.len() == 7 + 64);
    assert_eq!(manifest["config"]["epochs"], "2");

    ok(&pmad(p, &["eval-seg", "--checkpoint", "seg/checkpoint.pmad", "--data-dir", "d", "--out", "m.json"]));
    let m = json(&p.join("m.json"));
    for key in ["dice", "iou", "pixel_accuracy", "loss_focal", "loss_jaccard", "loss_total"] {
        assert!(m[key].is_number(), "{key} in {m}");
    }
    assert_eq!(json(&p.join("m.json.manifest.json"))["checkpoint_hash"], hash.as_str());

    let image = "d/benign/benign (2).png";
    ok(&pmad(p, &["segment", "--checkpoint", "seg/checkpoint.pmad", "--input", image, "--out", "mask.png"]));
    assert!(p.join("mask.png").is_file() && p.join("mask_overlay.png").is_file());
    ok(&pmad(p, &["gradcam", "--checkpoint", "seg/checkpoint.pmad", "--input", image, "--out", "cam"]));
    assert!(p.join("cam/heatmap.png").is_file() && p.join("cam/manifest.json").is_file());
    let bad_layer = pmad(p, &["gradcam", "--checkpoint", "seg/checkpoint.pmad", "--input", image, "--out", "cam2", "--layer", "nope"]);
    assert_eq!(bad_layer.status.code(), Some(1));

    ok(&pmad(p, &["train-cls", "--config", "run.cfg", "--data-dir", "d", "--out", "cls"]));
    ok(&pmad(p, &["eval-cls", "--checkpoint", "cls/checkpoint.pmad", "--data-dir", "d", "--out", "c.json"]));
    let c = json(&p.join("c.json"));
    for key in ["cls_accuracy", "precision", "recall", "f1"] {
        assert!(c[key].is_number(), "{key} in {c}");
    }
    assert_eq!(c["confusion"].as_array().unwrap().len(), 3);
    assert_eq!(c["class_names"], serde_json::json!(["benign", "malignant", "normal"]));

    let mask = "d/benign/benign (2)_mask.png";
    ok(&pmad(p, &["classify", "--checkpoint", "cls/checkpoint.pmad", "--input", image, "--mask", mask, "--out", "class.json"]));
    let cl = json(&p.join("class.json"));
    let total: f64 = cl["probabilities"].as_object().unwrap().values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    ok(&pmad(p, &["gradcam", "--checkpoint", "cls/checkpoint.pmad", "--input", image, "--mask", mask, "--class", "benign", "--out", "ccam"]));
    assert!(p.join("ccam/gradcam_overlay.png").is_file());
    assert_eq!(pmad(p, &["gradcam", "--checkpoint", "cls/checkpoint.pmad", "--input", image, "--out", "x"]).status.code(), Some(1));

    let arch = pmad(p, &["print-arch", "--checkpoint", "cls/checkpoint.pmad"]);
    ok(&arch);
    assert!(!arch.stdout.is_empty());
}

#[test]
fn print_arch_for_both_profiles() {
    let dir = tempfile::tempdir().unwrap();
    for (model, profile) in [("seg", "tiny"), ("seg", "paper"), ("cls", "tiny"), ("cls", "paper")] {
        let out = pmad(dir.path(), &["print-arch", "--model", model, "--profile", profile]);
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).lines().count() > 5);
    }
}
