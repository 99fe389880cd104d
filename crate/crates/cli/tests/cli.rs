//! End-to-end runs of the `rpl` binary on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[dataset]
train_count = 4
val_count = 2
outlier_train_count = 3
outlier_val_count = 2

[pretrain]
steps = 3
batch_size = 2

[train]
steps = 3
batch_size = 2
"#;

fn rpl(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpl"))
        .args(args)
        .env("RPL_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();

    ok(&rpl(root, &["gen-data", "--config", cfg]));
    assert!(root.join("data/manifest.json").exists());
    assert!(root.join("data/masks/oe-val_0000.png").exists());

    ok(&rpl(root, &["train-seg", "--config", cfg, "--data", &p("data")]));
    let seg = p("segnet/segnet.rplt");
    let out = rpl(root, &["train-rpl", "--config", cfg, "--data", &p("data"), "--segnet", &seg, "--steps", "2"]);
    ok(&out);
    let log = std::fs::read_to_string(root.join("rpl/train_log.jsonl")).unwrap();
    // The flag overrides the file's step count.
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "l_in", "l_out", "l_corocl", "total"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    let table = String::from_utf8_lossy(&out.stdout);
    let header = table.lines().find(|l| l.contains("FPR95")).unwrap();
    assert!(header.find("FPR95") < header.find("AuPRC") && header.find("AuPRC") < header.find("AuROC"));

    let rplf = p("rpl/rpl.rplt");
    ok(&rpl(root, &["eval", "--config", cfg, "--data", &p("data"), "--segnet", &seg, "--rpl", &rplf]));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["metrics"]["auroc"].is_number());

    ok(&rpl(root, &["predict", "--segnet", &seg, "--rpl", &rplf, &p("data/images/oe-val_0000.png")]));
    for f in ["oe-val_0000_classes.png", "oe-val_0000_anomaly.npy", "oe-val_0000_anomaly.png", "oe-val_0000.json"] {
        assert!(root.join("predictions").join(f).exists(), "{f}");
    }

    ok(&rpl(root, &["plot", "--config", cfg, "--data", &p("data"), "--segnet", &seg, "--rpl", &rplf, "--count", "1"]));
    assert!(root.join("plots/rpl_hist.png").exists());
    assert!(root.join("plots/rpl_heatmap_00.png").exists());

    ok(&rpl(root, &["ablate", "--config", cfg, "--data", &p("data"), "--segnet", &seg, "--seeds", "0", "--steps", "1", "--suite", "projector"]));
    assert!(root.join("ablation/projector.json").exists());

    // Configuration errors exit with 2.
    assert_eq!(rpl(root, &["train-rpl", "--data", &p("data"), "--segnet", &seg, "--lr", "-1"]).status.code(), Some(2));
    assert_eq!(rpl(root, &["ablate", "--data", &p("data"), "--segnet", &seg, "--suite", "nope"]).status.code(), Some(2));
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "[trian]\nsteps = 1\n").unwrap();
    assert_eq!(rpl(root, &["gen-data", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(rpl(root, &["no-such-command"]).status.code(), Some(2));

    // A tampered frozen checkpoint is an invariant violation: exit 3.
    let mut bytes = std::fs::read(&seg).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    let tampered = root.join("tampered.rplt");
    std::fs::write(&tampered, bytes).unwrap();
    let out = rpl(root, &["eval", "--data", &p("data"), "--segnet", tampered.to_str().unwrap(), "--rpl", &rplf]);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
