use std::path::Path;
use std::process::{Command, Output};

use dirl_core::checkpoint::extractor_checkpoint;
use dirl_core::mil::{Bag, FeatureArchive};
use dirl_core::ssl::{DirlConfig, TrainState, Variant};
use dirl_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn dirl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dirl"))
        .args(args)
        .env("DIRL_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dirl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_config() -> DirlConfig {
    let mut cfg = DirlConfig::default();
    cfg.encoder.image_w = 16;
    cfg.encoder.image_h = 16;
    cfg.encoder.patch = 4;
    cfg.encoder.dim = 16;
    cfg.encoder.depth = 2;
    cfg.encoder.heads = 2;
    cfg
}

fn gen(dir: &Path) {
    ok(&[
        "gen-synthetic", "--out", dir.to_str().unwrap(), "--crops-per-bag", "3", "--bags-per-class", "2",
        "--image-size", "16",
    ]);
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-synthetic", "pretrain", "extract-features", "mil", "analyze-attention"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    for cmd in ["pretrain", "analyze-attention"] {
        ok(&[cmd, "--help"]);
    }
}

#[test]
fn uniform_attention_lands_in_the_desired_bin() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);

    // Zero query and key weights: every logit is 0, so each row is uniform
    // and every aggregated value is exactly 1.
    let cfg = small_config();
    let mut params = TrainState::new(&cfg, Variant::Baseline, false, 0).unwrap().teacher.params;
    let ids: Vec<_> = params
        .iter()
        .enumerate()
        .filter(|(_, (n, _))| n.ends_with("attn.wq") || n.ends_with("attn.wk") || n.ends_with("attn.bq") || n.ends_with("attn.bk"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(ids.len(), 4 * cfg.encoder.depth);
    for i in ids {
        params.tensors_mut()[i].data_mut().fill(0.0);
    }
    let ckpt = tmp.path().join("uniform.ckpt");
    extractor_checkpoint(&params, &cfg, &[]).write(&ckpt).unwrap();

    for layer in ["0", "1"] {
        let out = tmp.path().join(format!("attn{layer}"));
        ok(&[
            "analyze-attention", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out",
            out.to_str().unwrap(), "--layer", layer,
        ]);
        let p = json(&out.join("profile.json"));
        assert_eq!(p["bins"]["desired"], 1.0);
        assert_eq!(p["bins"]["low"], 0.0);
        assert_eq!(p["bins"]["high"], 0.0);
        assert_eq!(p["token_count"], 12 * 16);
        assert!(out.join("overlays/bag0000_0.png").exists());
        assert!(out.join("overlays/bag0000_0.csv").exists());
        assert!(out.join("run_manifest.json").exists());
    }
}

#[test]
fn shuffled_labels_give_chance_auc() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    // Features carry the archive label; the manifest relabels at random, so
    // nothing in the features predicts the label that is scored.
    let bags: Vec<Bag> = (0..120)
        .map(|i| {
            let label = (i % 2) as u32;
            let n = 4;
            let f = (0..n * 6).map(|_| rng.random::<f64>() + label as f64).collect();
            Bag { bag_id: format!("bag{i:04}"), label, features: Tensor::new(&[n, 6], f).unwrap() }
        })
        .collect();
    let mut manifest = String::from("bag_id,label\n");
    let mut shuffled: Vec<u32> = (0..120).map(|i| (i % 2) as u32).collect();
    for i in (1..shuffled.len()).rev() {
        shuffled.swap(i, rng.random_range(0..=i));
    }
    for (b, l) in bags.iter().zip(&shuffled) {
        manifest.push_str(&format!("{},{l}\n", b.bag_id));
    }
    let feats = tmp.path().join("features.bin");
    FeatureArchive { dim: 6, bags }.write(&feats).unwrap();
    let man = tmp.path().join("manifest.csv");
    std::fs::write(&man, manifest).unwrap();
    let out = tmp.path().join("mil");
    ok(&[
        "mil", "--features", feats.to_str().unwrap(), "--manifest", man.to_str().unwrap(), "--seeds", "5", "--epochs",
        "20", "--lr", "1e-3", "--out", out.to_str().unwrap(),
    ]);
    let m = json(&out.join("metrics.json"));
    let auc = m["auc"]["mean"].as_f64().unwrap();
    assert!((0.3..=0.7).contains(&auc), "auc {auc}");
    assert_eq!(m["seeds"].as_array().unwrap().len(), 5);
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let m = missing.to_str().unwrap();

    let out = dirl(&["pretrain", "--variant", "dirl", "--data", m, "--out", m]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
    assert!(err.contains("does not exist"), "{err}");

    // Usage errors come from the argument parser.
    let out = dirl(&["pretrain", "--variant", "dino", "--data", m, "--out", m]);
    assert_eq!(out.status.code(), Some(2));

    let data = tmp.path().join("data");
    gen(&data);
    let d = data.to_str().unwrap();
    let out = dirl(&["gen-synthetic", "--out", d]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--force"));
    ok(&["gen-synthetic", "--out", d, "--crops-per-bag", "3", "--bags-per-class", "2", "--image-size", "16", "--force"]);

    let out = dirl(&["pretrain", "--variant", "baseline", "--data", d, "--out", m, "--set", "encoder.depthh=2"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("unknown config key"), "{}", stderr(&out));

    // Default encoder expects 32x32 crops.
    let out = dirl(&["pretrain", "--variant", "baseline", "--data", d, "--out", tmp.path().join("p").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("16x16"), "{}", stderr(&out));

    // A full training-state checkpoint is not an extractor.
    let state = tmp.path().join("train_state.ckpt");
    TrainState::new(&small_config(), Variant::Baseline, false, 0).unwrap().full_checkpoint().write(&state).unwrap();
    let out = dirl(&["extract-features", "--ckpt", state.to_str().unwrap(), "--data", d, "--out", m]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("extractor.ckpt"), "{}", stderr(&out));

    let out = dirl(&["mil", "--features", m, "--manifest", m, "--out", m]);
    assert_eq!(out.status.code(), Some(1));
}
