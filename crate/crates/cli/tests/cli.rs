use std::path::Path;
use std::process::{Command, Output};

use focal_core::fragments::Corpus;
use focal_core::training::{Checkpoint, ProjectionModel};
use focal_core::{load_corpus, save_corpus, EmbedMatrix, Instance, Modality, Variant};

fn focal(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_focal"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = focal(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn small_corpus(dir: &Path) {
    write(dir, "synth.json", r#"{"pairs": 20, "seed": 2}"#);
    ok(dir, &["generate", "--config", "synth.json", "--out", "c"]);
}

fn train_small(dir: &Path, epochs: usize, out: &str) {
    write(
        dir,
        "train.json",
        &format!(
            r#"{{"model": {{"dim": 8}}, "train": {{"epochs": {epochs}, "batch_size": 8, "learning_rate": 0.01, "seed": 3}}, "focal": {{"variant": "prob"}}}}"#
        ),
    );
    ok(
        dir,
        &[
            "train",
            "--corpus",
            "c",
            "--config",
            "train.json",
            "--out",
            out,
        ],
    );
}

#[test]
fn generate_writes_requested_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let corpus = load_corpus(dir.path().join("c")).unwrap();
    assert_eq!(corpus.links().unwrap().len(), 20);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seed"], 2);
    for out in manifest["outputs"].as_array().unwrap() {
        let bytes = std::fs::read(dir.path().join(out["path"].as_str().unwrap())).unwrap();
        let mut hex = String::new();
        for b in sha2_digest(&bytes) {
            hex.push_str(&format!("{b:02x}"));
        }
        assert_eq!(out["sha256"], hex);
    }
}

fn sha2_digest(bytes: &[u8]) -> Vec<u8> {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).to_vec()
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.json", r#"{"distractor_rate": 1.5}"#);
    let out = focal(
        dir.path(),
        &["generate", "--config", "bad.json", "--out", "c"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("c").exists());

    write(dir.path(), "typo.json", r#"{"pairz": 3}"#);
    let out = focal(
        dir.path(),
        &["generate", "--config", "typo.json", "--out", "c"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_small(dir.path(), 0, "m.ckpt");
    let ckpt = Checkpoint::load(dir.path().join("m.ckpt")).unwrap();
    let corpus = load_corpus(dir.path().join("c")).unwrap();
    let init = ProjectionModel::init(corpus.text_dim(), corpus.image_dim(), 8, true, 3).unwrap();
    assert_eq!(ckpt.model, init);
    assert_eq!(ckpt.variant, Variant::Prob);
    assert_eq!(ckpt.seed, 3);
}

#[test]
fn training_log_decreases_on_default_corpus() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "synth.json", "{}");
    ok(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "c"],
    );
    write(
        dir.path(),
        "train.json",
        r#"{"model": {"dim": 16}, "train": {"epochs": 5, "learning_rate": 0.01}}"#,
    );
    ok(
        dir.path(),
        &[
            "train",
            "--corpus",
            "c",
            "--config",
            "train.json",
            "--out",
            "m.ckpt",
        ],
    );
    let log: Vec<serde_json::Value> = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("m.ckpt.losses.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(log.len(), 5);
    let first = log[0]["loss"].as_f64().unwrap();
    let last = log[4]["loss"].as_f64().unwrap();
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn paired_score_beats_a_mismatched_image_after_training() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_small(dir.path(), 30, "m.ckpt");
    let total = |image: &str| -> f64 {
        let out = ok(
            dir.path(),
            &[
                "score",
                "--corpus",
                "c",
                "--checkpoint",
                "m.ckpt",
                "--text",
                "t0000",
                "--image",
                image,
            ],
        );
        let text = String::from_utf8(out.stdout).unwrap();
        let line = text.lines().find(|l| l.starts_with("total")).unwrap();
        line.split('\t').nth(1).unwrap().parse().unwrap()
    };
    assert!(total("i0000") > total("i0007"));
}

#[test]
fn unknown_id_exits_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_small(dir.path(), 0, "m.ckpt");
    let out = focal(
        dir.path(),
        &[
            "score",
            "--corpus",
            "c",
            "--checkpoint",
            "m.ckpt",
            "--text",
            "missing",
            "--image",
            "i0000",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

/// One text and one image with identical features, scored by a model whose
/// two projections coincide.
fn self_pair_corpus(dir: &Path) {
    let raw = EmbedMatrix::from_rows(&[
        vec![1.0, 0.5, 0.0],
        vec![0.0, 1.0, -0.5],
        vec![0.25, 0.0, 1.0],
    ])
    .unwrap();
    let corpus = Corpus::new(
        "self",
        vec![Instance::new("t", Modality::Text, raw.clone(), None).unwrap()],
        vec![Instance::new("i", Modality::Image, raw, None).unwrap()],
        vec![("t".into(), "i".into())],
    )
    .unwrap();
    save_corpus(&corpus, dir.join("c")).unwrap();
    let mut model = ProjectionModel::init(3, 3, 4, false, 1).unwrap();
    model.w_img = model.w_txt.clone();
    Checkpoint {
        model,
        variant: Variant::Equal,
        seed: 1,
    }
    .save(dir.join("m.ckpt"))
    .unwrap();
}

#[test]
fn self_pairing_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    self_pair_corpus(dir.path());
    for variant in ["plain", "equal", "prob"] {
        let out = ok(
            dir.path(),
            &[
                "score",
                "--corpus",
                "c",
                "--checkpoint",
                "m.ckpt",
                "--text",
                "t",
                "--image",
                "i",
                "--variant",
                variant,
            ],
        );
        let text = String::from_utf8(out.stdout).unwrap();
        let value = |name: &str| -> f64 {
            let line = text.lines().find(|l| l.starts_with(name)).unwrap();
            line.split('\t').nth(1).unwrap().parse().unwrap()
        };
        assert_eq!(value("t2i"), value("i2t"), "{variant}");
    }
}

fn attend(dir: &Path, variant: &str) -> serde_json::Value {
    let out = ok(
        dir,
        &[
            "attend",
            "--corpus",
            "c",
            "--checkpoint",
            "m.ckpt",
            "--text",
            "t",
            "--image",
            "i",
            "--variant",
            variant,
            "--out",
            "dump.json",
        ],
    );
    assert!(out.stdout.is_empty());
    serde_json::from_str(&std::fs::read_to_string(dir.join("dump.json")).unwrap()).unwrap()
}

fn floats(v: &serde_json::Value) -> Vec<f64> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect()
}

#[test]
fn attention_dumps() {
    let dir = tempfile::tempdir().unwrap();
    self_pair_corpus(dir.path());

    let plain = attend(dir.path(), "plain");
    for row in plain["rows"].as_array().unwrap() {
        assert!(row["mask"].as_array().unwrap().iter().all(|k| k == true));
        assert_eq!(row["preassigned"], row["reassigned"]);
        assert!(row["scores"].is_null());
    }

    for variant in ["equal", "prob"] {
        let dump = attend(dir.path(), variant);
        let rows = dump["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 3);
        for row in rows {
            let pre = floats(&row["preassigned"]);
            let post = floats(&row["reassigned"]);
            assert!((pre.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mask: Vec<bool> = row["mask"]
                .as_array()
                .unwrap()
                .iter()
                .map(|k| k.as_bool().unwrap())
                .collect();
            if variant == "equal" {
                let n = pre.len() as f64;
                let expected: Vec<bool> = pre.iter().map(|&w| w > 1.0 / n).collect();
                if expected.iter().any(|&k| k) {
                    assert_eq!(mask, expected);
                }
            }
            for (w, k) in post.iter().zip(&mask) {
                if !k {
                    assert_eq!(*w, 0.0);
                }
            }
        }
    }
    let manifest = std::fs::read_to_string(dir.path().join("dump.json.manifest.json")).unwrap();
    assert!(manifest.contains("\"attend\""));
}

#[test]
fn direction_flags_agree_on_symmetric_corpus() {
    // Each pair is one instance seen from both sides, well separated from
    // the others, so every direction ranks the partner first.
    let dir = tempfile::tempdir().unwrap();
    let mut texts = Vec::new();
    let mut images = Vec::new();
    let mut pairs = Vec::new();
    for k in 0..4 {
        let rows: Vec<Vec<f64>> = (0..2)
            .map(|r| {
                (0..8)
                    .map(|j| if j == 2 * k + r { 1.0 } else { 0.05 })
                    .collect()
            })
            .collect();
        let raw = EmbedMatrix::from_rows(&rows).unwrap();
        texts.push(Instance::new(format!("t{k}"), Modality::Text, raw.clone(), None).unwrap());
        images.push(Instance::new(format!("i{k}"), Modality::Image, raw, None).unwrap());
        pairs.push((format!("t{k}"), format!("i{k}")));
    }
    save_corpus(
        &Corpus::new("sym", texts, images, pairs).unwrap(),
        dir.path().join("c"),
    )
    .unwrap();
    let mut model = ProjectionModel::zeros(8, 8, 8, false).unwrap();
    for k in 0..8 {
        model.w_txt[k * 8 + k] = 1.0;
        model.w_img[k * 8 + k] = 1.0;
    }
    Checkpoint {
        model,
        variant: Variant::Prob,
        seed: 0,
    }
    .save(dir.path().join("m.ckpt"))
    .unwrap();

    let metrics = |direction: &str| -> Vec<f64> {
        let out = ok(
            dir.path(),
            &[
                "eval",
                "--corpus",
                "c",
                "--checkpoint",
                "m.ckpt",
                "--direction",
                direction,
            ],
        );
        String::from_utf8(out.stdout)
            .unwrap()
            .lines()
            .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
            .collect()
    };
    let both = metrics("both");
    assert!(both[0] == 1.0);
    for direction in ["t2i", "i2t"] {
        let m = metrics(direction);
        assert_eq!(m.len(), both.len());
        for (a, b) in m.iter().zip(&both) {
            assert!((a - b).abs() < 1e-6, "{direction}");
        }
    }
}

#[test]
fn ensemble_needs_a_second_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    train_small(dir.path(), 0, "m.ckpt");
    let out = focal(
        dir.path(),
        &[
            "eval",
            "--corpus",
            "c",
            "--checkpoint",
            "m.ckpt",
            "--variant",
            "ensemble",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}
