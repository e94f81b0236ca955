//! Synthetic corpora with latent concepts, so that word-region relevance has
//! a ground truth.
//!
//! Each concept is a latent unit vector. The text and image prototypes of a
//! concept are the latent vector pushed through two fixed random maps with
//! orthonormal columns, one per modality, and each fragment is its
//! prototype plus Gaussian noise.
//!
//! Shared fragments carry one of the `vocab` content concepts. Distractor
//! fragments are clutter: each gets a concept of its own (ids from `vocab`
//! upward) that occurs nowhere else in the corpus.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::cosine;
use crate::error::{FocalError, Result};
use crate::fragments::{Corpus, EmbedMatrix, Instance, Modality};
use crate::training::ProjectionModel;

/// Prototype pairs must have |cosine| below this.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.3;
const MAX_PROTOTYPE_DRAWS: usize = 10_000;
const MAX_PAIR_DRAWS: usize = 10_000;
const CONCEPT_DRAWS_PER_LAYOUT: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab: usize,
    pub d_raw_txt: usize,
    pub d_raw_img: usize,
    pub pairs: usize,
    /// Inclusive range of words per text.
    pub words_range: (usize, usize),
    /// Inclusive range of regions per image.
    pub regions_range: (usize, usize),
    pub distractor_rate: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            d_raw_txt: 32,
            d_raw_img: 48,
            pairs: 200,
            words_range: (4, 8),
            regions_range: (4, 8),
            distractor_rate: 0.5,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn latent_dim(&self) -> usize {
        self.d_raw_txt.min(self.d_raw_img)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FocalError::Config(msg));
        if self.vocab < 2 {
            return bad(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.d_raw_txt == 0 || self.d_raw_img == 0 {
            return bad("raw dimensions must be positive".into());
        }
        if self.pairs == 0 {
            return bad("pairs must be positive".into());
        }
        for (name, (lo, hi)) in [
            ("words_range", self.words_range),
            ("regions_range", self.regions_range),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} must be a nonempty range of positive counts, got {lo}..={hi}"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.distractor_rate) {
            return bad(format!(
                "distractor_rate must lie in [0, 1), got {}",
                self.distractor_rate
            ));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            ));
        }
        Ok(())
    }
}

/// The hidden generative structure behind a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    /// Latent unit vector of every concept: the `vocab` content concepts
    /// first, then one clutter concept per distractor fragment.
    pub concepts: Vec<Vec<f64>>,
    pub vocab: usize,
    /// `d_raw_txt x latent` map with orthonormal columns, row-major.
    pub text_map: Vec<f64>,
    /// `d_raw_img x latent` map with orthonormal columns, row-major.
    pub image_map: Vec<f64>,
    latent: usize,
}

impl SynthWorld {
    fn prototype(&self, modality: Modality, concept: usize) -> Vec<f64> {
        let map = match modality {
            Modality::Text => &self.text_map,
            Modality::Image => &self.image_map,
        };
        let z = &self.concepts[concept];
        map.chunks_exact(self.latent)
            .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn text_prototype(&self, concept: usize) -> Vec<f64> {
        self.prototype(Modality::Text, concept)
    }

    pub fn image_prototype(&self, concept: usize) -> Vec<f64> {
        self.prototype(Modality::Image, concept)
    }

    /// Projections that undo the modality maps, sending every prototype
    /// back to its latent vector (shared dimension = latent dimension).
    pub fn oracle_model(&self) -> ProjectionModel {
        let rows_txt = self.text_map.len() / self.latent;
        let rows_img = self.image_map.len() / self.latent;
        let mut model = ProjectionModel::zeros(rows_txt, rows_img, self.latent, false)
            .expect("world dimensions are positive");
        model.w_txt.clone_from(&self.text_map);
        model.w_img.clone_from(&self.image_map);
        model
    }
}

#[derive(Debug, Clone)]
pub struct Synthetic {
    pub corpus: Corpus,
    pub world: SynthWorld,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// Row-major `rows x cols` matrix with orthonormal columns (Gram-Schmidt on
/// Gaussian columns).
fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v = gaussian_vec(rng, rows);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(unit(v));
        }
    }
    let mut out = vec![0.0; rows * cols];
    for (c, b) in basis.iter().enumerate() {
        for (r, &x) in b.iter().enumerate() {
            out[r * cols + c] = x;
        }
    }
    out
}

fn draw_separated(
    rng: &mut ChaCha8Rng,
    from: &[Vec<f64>],
    latent: usize,
    what: &str,
) -> Result<Vec<f64>> {
    for _ in 0..MAX_PROTOTYPE_DRAWS {
        let z = gaussian_vec(rng, latent);
        let separated = from
            .iter()
            .all(|c| cosine(c, &z).is_some_and(|cos| cos.abs() < MAX_PROTOTYPE_COSINE));
        if separated {
            return Ok(unit(z));
        }
    }
    Err(FocalError::Config(format!(
        "could not place {what} with |cosine| < {MAX_PROTOTYPE_COSINE} to {} concepts in {latent} \
         latent dimensions; raise d_raw_txt/d_raw_img or lower vocab",
        from.len()
    )))
}

fn sample_concepts(rng: &mut ChaCha8Rng, vocab: usize, latent: usize) -> Result<Vec<Vec<f64>>> {
    let mut concepts: Vec<Vec<f64>> = Vec::with_capacity(vocab);
    while concepts.len() < vocab {
        let z = draw_separated(rng, &concepts, latent, "a content concept")?;
        concepts.push(z);
    }
    Ok(concepts)
}

/// Roles and shared concepts of one pair, before clutter is attached.
struct PairLayout {
    shared: Vec<u32>,
    text_distractors: usize,
    image_distractors: usize,
}

/// Samples one pair whose set of shared concepts differs from every set in
/// `used_supports`, so that no two pairs are interchangeable.
///
/// Fragment roles (shared or distractor) are drawn first and kept while the
/// concepts are redrawn, so the uniqueness requirement does not skew the
/// distractor fraction until small shared sets run out.
fn sample_layout(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    used_supports: &mut HashSet<BTreeSet<u32>>,
) -> Result<PairLayout> {
    let vocab = cfg.vocab as u32;
    for _ in 0..MAX_PAIR_DRAWS {
        let m = rng.random_range(cfg.words_range.0..=cfg.words_range.1);
        let n = rng.random_range(cfg.regions_range.0..=cfg.regions_range.1);
        let text_distractors = (0..m)
            .filter(|_| rng.random_bool(cfg.distractor_rate))
            .count();
        let image_distractors = (0..n)
            .filter(|_| rng.random_bool(cfg.distractor_rate))
            .count();
        let shared = m - text_distractors;
        if shared == 0 || n - image_distractors != shared {
            continue;
        }
        for _ in 0..CONCEPT_DRAWS_PER_LAYOUT {
            let concepts: Vec<u32> = (0..shared).map(|_| rng.random_range(0..vocab)).collect();
            if used_supports.insert(concepts.iter().copied().collect()) {
                return Ok(PairLayout {
                    shared: concepts,
                    text_distractors,
                    image_distractors,
                });
            }
        }
    }
    Err(FocalError::Config(format!(
        "no new set of shared concepts after {MAX_PAIR_DRAWS} draws; vocab {} with ranges {:?}/{:?} \
         and distractor_rate {} cannot give {} pairs distinct shared concepts",
        cfg.vocab, cfg.words_range, cfg.regions_range, cfg.distractor_rate, cfg.pairs
    )))
}

/// Shared concepts plus `distractors` fresh clutter concepts, shuffled.
fn attach_clutter(
    rng: &mut ChaCha8Rng,
    world: &mut SynthWorld,
    shared: &[u32],
    distractors: usize,
) -> Result<Vec<u32>> {
    let mut labels = shared.to_vec();
    for _ in 0..distractors {
        let z = draw_separated(
            rng,
            &world.concepts[..world.vocab],
            world.latent,
            "a clutter concept",
        )?;
        labels.push(world.concepts.len() as u32);
        world.concepts.push(z);
    }
    labels.shuffle(rng);
    Ok(labels)
}

fn render(
    rng: &mut ChaCha8Rng,
    world: &SynthWorld,
    modality: Modality,
    labels: &[u32],
    sigma: f64,
) -> Result<EmbedMatrix> {
    let mut values = Vec::new();
    let mut dim = 0;
    for &c in labels {
        let proto = world.prototype(modality, c as usize);
        dim = proto.len();
        for p in proto {
            let noise: f64 = rng.sample(StandardNormal);
            values.push((p + sigma * noise) as f32 as f64);
        }
    }
    EmbedMatrix::new(labels.len(), dim, values)
}

/// Generates the world and corpus for `cfg`; identical configs give
/// identical results.
pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.latent_dim();
    let concepts = sample_concepts(&mut rng, cfg.vocab, latent)?;
    let text_map = orthonormal_columns(&mut rng, cfg.d_raw_txt, latent);
    let image_map = orthonormal_columns(&mut rng, cfg.d_raw_img, latent);
    let mut world = SynthWorld {
        concepts,
        vocab: cfg.vocab,
        text_map,
        image_map,
        latent,
    };

    let mut texts = Vec::with_capacity(cfg.pairs);
    let mut images = Vec::with_capacity(cfg.pairs);
    let mut pairs = Vec::with_capacity(cfg.pairs);
    let mut used_supports = HashSet::new();
    for k in 0..cfg.pairs {
        let layout = sample_layout(&mut rng, cfg, &mut used_supports)?;
        let words = attach_clutter(
            &mut rng,
            &mut world,
            &layout.shared,
            layout.text_distractors,
        )?;
        let regions = attach_clutter(
            &mut rng,
            &mut world,
            &layout.shared,
            layout.image_distractors,
        )?;
        let (tid, iid) = (format!("t{k:04}"), format!("i{k:04}"));
        let raw_t = render(&mut rng, &world, Modality::Text, &words, cfg.noise_sigma)?;
        let raw_i = render(&mut rng, &world, Modality::Image, &regions, cfg.noise_sigma)?;
        texts.push(Instance::new(
            tid.clone(),
            Modality::Text,
            raw_t,
            Some(words),
        )?);
        images.push(Instance::new(
            iid.clone(),
            Modality::Image,
            raw_i,
            Some(regions),
        )?);
        pairs.push((tid, iid));
    }
    let name = format!("synthetic-v{}-p{}-s{}", cfg.vocab, cfg.pairs, cfg.seed);
    let corpus = Corpus::new(name, texts, images, pairs)?;
    Ok(Synthetic { corpus, world })
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    Ok(generate(cfg)?.corpus)
}

/// `truth[i][j]` (row-major, words x regions) is true iff word `i` and region
/// `j` carry the same concept.
pub fn ground_truth_mask(text: &Instance, image: &Instance) -> Result<Vec<Vec<bool>>> {
    let labels = |inst: &Instance| {
        inst.concepts
            .clone()
            .ok_or_else(|| FocalError::InvalidInstance {
                id: inst.id.clone(),
                reason: "instance carries no concept labels".into(),
            })
    };
    let (words, regions) = (labels(text)?, labels(image)?);
    Ok(words
        .iter()
        .map(|w| regions.iter().map(|r| w == r).collect())
        .collect())
}
