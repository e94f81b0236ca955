use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use focal_core::eval::{
    corpus_mask_quality, corpus_scores, ensemble_scores, evaluate_scores, MetricRecord,
};
use focal_core::fragments::{EMBEDDINGS_FILE, META_FILE};
use focal_core::synth::{generate_corpus, SynthConfig};
use focal_core::training::{train, Checkpoint, LossConfig, ProjectionModel, TrainConfig};
use focal_core::{
    focal_attend, load_corpus, pair_score, save_corpus, Corpus, FocalConfig, ScoreDirection,
    Variant,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::manifest::{sidecar, RunManifest};
use crate::{AttendDirection, Cli, Command, VariantArg};

/// A problem with the invocation or a config file, as opposed to the data.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

const MANIFEST_SUFFIX: &str = ".manifest.json";
const LOSSES_SUFFIX: &str = ".losses.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Dimension of the shared space.
    pub dim: usize,
    pub bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 1024,
            bias: true,
        }
    }
}

/// Everything `train` reads from its config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub focal: FocalConfig,
    pub loss: LossConfig,
}

#[derive(Debug, Serialize)]
struct EpochLog {
    epoch: usize,
    learning_rate: f64,
    loss: f64,
}

#[derive(Debug, Serialize)]
struct AttentionRow {
    query: usize,
    preassigned: Vec<f64>,
    /// Absent for the plain variant.
    scores: Option<Vec<f64>>,
    mask: Vec<bool>,
    reassigned: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct AttentionDump {
    text: String,
    image: String,
    direction: &'static str,
    variant: Variant,
    scale: f64,
    rows: Vec<AttentionRow>,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn load(path: &Path) -> Result<Corpus> {
    load_corpus(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn add_corpus_inputs(manifest: &mut RunManifest, corpus: &Path) -> Result<()> {
    manifest.input(corpus.join(META_FILE))?;
    manifest.input(corpus.join(EMBEDDINGS_FILE))
}

fn focal_config(variant: Variant, scale: f64) -> Result<FocalConfig> {
    let cfg = FocalConfig {
        scale,
        ..FocalConfig::with_variant(variant)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let explicit = cli.manifest.clone();
    let (manifest, default_path): (RunManifest, Option<PathBuf>) = match cli.command {
        Command::Generate { config, out } => {
            let cfg: SynthConfig = read_config(&config)?;
            cfg.validate()?;
            let corpus = generate_corpus(&cfg)?;
            save_corpus(&corpus, &out)?;
            eprintln!(
                "generated {} pairs ({} texts, {} images) in {}",
                corpus.pairs.len(),
                corpus.texts.len(),
                corpus.images.len(),
                out.display()
            );
            let mut m = RunManifest::new("generate", to_value(&cfg)?, Some(cfg.seed));
            m.input(&config)?;
            m.output(out.join(META_FILE))?;
            m.output(out.join(EMBEDDINGS_FILE))?;
            (m, Some(sidecar(&out, MANIFEST_SUFFIX)))
        }
        Command::Train {
            corpus,
            config,
            out,
        } => {
            let cfg: TrainRunConfig = match &config {
                Some(p) => read_config(p)?,
                None => TrainRunConfig::default(),
            };
            cfg.train.validate()?;
            cfg.focal.validate()?;
            cfg.loss.validate()?;
            let data = load(&corpus)?;
            let model = ProjectionModel::init(
                data.text_dim(),
                data.image_dim(),
                cfg.model.dim,
                cfg.model.bias,
                cfg.train.seed,
            )?;
            let outcome = train(model, &data, &cfg.train, &cfg.focal, &cfg.loss)?;
            let log: Vec<EpochLog> = outcome
                .epoch_losses
                .iter()
                .enumerate()
                .map(|(e, &loss)| EpochLog {
                    epoch: e + 1,
                    learning_rate: cfg.train.learning_rate_at(e),
                    loss,
                })
                .collect();
            for entry in &log {
                eprintln!(
                    "epoch {}\tlr {:e}\tloss {:.6}",
                    entry.epoch, entry.learning_rate, entry.loss
                );
            }
            let ckpt = Checkpoint {
                model: outcome.model,
                variant: cfg.focal.variant,
                seed: cfg.train.seed,
            };
            ckpt.save(&out)?;
            let losses = sidecar(&out, LOSSES_SUFFIX);
            write_json(&losses, &log)?;

            let mut m = RunManifest::new("train", to_value(&cfg)?, Some(cfg.train.seed));
            if let Some(p) = &config {
                m.input(p)?;
            }
            add_corpus_inputs(&mut m, &corpus)?;
            m.output(&out)?;
            m.output(&losses)?;
            (m, Some(sidecar(&out, MANIFEST_SUFFIX)))
        }
        Command::Eval {
            corpus,
            checkpoint,
            variant,
            ensemble_checkpoint,
            direction,
            ks,
            scale,
            out,
        } => {
            let data = load(&corpus)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let direction = ScoreDirection::from(direction);
            let links = data.links()?;
            let mut m = RunManifest::new(
                "eval",
                serde_json::json!({
                    "variant": variant.map(|v| format!("{v:?}").to_lowercase()),
                    "direction": direction,
                    "ks": ks,
                    "scale": scale,
                }),
                Some(ckpt.seed),
            );
            add_corpus_inputs(&mut m, &corpus)?;
            m.input(&checkpoint)?;

            let (scores, single) = match (variant, &ensemble_checkpoint) {
                (Some(VariantArg::Ensemble), Some(other)) => {
                    let second = load_checkpoint(other)?;
                    m.input(other)?;
                    let a = corpus_scores(&ckpt.model, &data, &focal_config(ckpt.variant, scale)?)?
                        .select(direction);
                    let b =
                        corpus_scores(&second.model, &data, &focal_config(second.variant, scale)?)?
                            .select(direction);
                    (ensemble_scores(&a, &b)?, None)
                }
                (Some(VariantArg::Ensemble), None) => {
                    return Err(ConfigError(
                        "--variant ensemble needs --ensemble-checkpoint".into(),
                    )
                    .into())
                }
                (_, Some(_)) => {
                    return Err(ConfigError(
                        "--ensemble-checkpoint is only used with --variant ensemble".into(),
                    )
                    .into())
                }
                (v, None) => {
                    let v = match v {
                        Some(VariantArg::Plain) => Variant::Plain,
                        Some(VariantArg::Equal) => Variant::Equal,
                        Some(VariantArg::Prob) => Variant::Prob,
                        _ => ckpt.variant,
                    };
                    let focal = focal_config(v, scale)?;
                    let s = corpus_scores(&ckpt.model, &data, &focal)?.select(direction);
                    (s, Some(focal))
                }
            };
            let metrics = evaluate_scores(&scores, &links, &ks)?;
            let mut records = metrics.records();
            print!("{metrics}");

            let labelled = data
                .texts
                .iter()
                .chain(&data.images)
                .all(|i| i.concepts.is_some());
            if let (Some(focal), true) = (single, labelled) {
                let q = corpus_mask_quality(&ckpt.model, &data, &focal)?;
                for (name, value) in [
                    ("mask_precision", q.precision()),
                    ("mask_recall", q.recall()),
                    ("irrelevant_mass_before", q.mass_before()),
                    ("irrelevant_mass_after", q.mass_after()),
                ] {
                    if let Some(value) = value {
                        println!("mask\t{name}\t{value:.4}");
                        records.push(MetricRecord {
                            metric: name.into(),
                            direction: None,
                            k: None,
                            value,
                        });
                    }
                }
            }
            if let Some(p) = &out {
                write_json(p, &records)?;
                m.output(p)?;
            }
            (m, out.as_deref().map(|p| sidecar(p, MANIFEST_SUFFIX)))
        }
        Command::Score {
            corpus,
            checkpoint,
            text,
            image,
            variant,
            scale,
        } => {
            let data = load(&corpus)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let focal = focal_config(variant.map_or(ckpt.variant, Variant::from), scale)?;
            let t = focal_core::training::project(&ckpt.model, data.text(&text)?)?;
            let i = focal_core::training::project(&ckpt.model, data.image(&image)?)?;
            let s = pair_score(&t, &i, &focal)?;
            println!("t2i\t{}", s.t2i);
            println!("i2t\t{}", s.i2t);
            println!("total\t{}", s.total);
            let mut m = RunManifest::new(
                "score",
                serde_json::json!({ "text": text, "image": image, "focal": focal }),
                Some(ckpt.seed),
            );
            add_corpus_inputs(&mut m, &corpus)?;
            m.input(&checkpoint)?;
            (m, None)
        }
        Command::Attend {
            corpus,
            checkpoint,
            text,
            image,
            direction,
            variant,
            scale,
            out,
        } => {
            let data = load(&corpus)?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let focal = focal_config(variant.map_or(ckpt.variant, Variant::from), scale)?;
            let t = focal_core::training::project(&ckpt.model, data.text(&text)?)?;
            let i = focal_core::training::project(&ckpt.model, data.image(&image)?)?;
            let (queries, candidates, name) = match direction {
                AttendDirection::T2i => (&t, &i, "t2i"),
                AttendDirection::I2t => (&i, &t, "i2t"),
            };
            let att = focal_attend(queries, candidates, &focal)?;
            let dump = AttentionDump {
                text: text.clone(),
                image: image.clone(),
                direction: name,
                variant: focal.variant,
                scale: focal.scale,
                rows: (0..att.queries())
                    .map(|q| AttentionRow {
                        query: q,
                        preassigned: att.preassigned.row(q).to_vec(),
                        scores: att.scores_row(q).map(<[f64]>::to_vec),
                        mask: att.mask.row(q).to_vec(),
                        reassigned: att.reassigned.row(q).to_vec(),
                    })
                    .collect(),
            };
            let mut m = RunManifest::new(
                "attend",
                serde_json::json!({
                    "text": text,
                    "image": image,
                    "direction": name,
                    "focal": focal,
                }),
                Some(ckpt.seed),
            );
            add_corpus_inputs(&mut m, &corpus)?;
            m.input(&checkpoint)?;
            match &out {
                Some(p) => {
                    write_json(p, &dump)?;
                    m.output(p)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&dump)?),
            }
            (m, out.as_deref().map(|p| sidecar(p, MANIFEST_SUFFIX)))
        }
    };
    let path = explicit.or(default_path);
    manifest.emit(start.elapsed(), path.as_deref())
}
