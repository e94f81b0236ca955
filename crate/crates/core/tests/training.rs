use focal_core::relevance::direction_backward;
use focal_core::synth::{generate_corpus, SynthConfig};
use focal_core::training::{
    backward, backward_recomputing_masks, forward, forward_backward, grad_check, train, Batch,
    LossConfig, OptimizerKind, ProjectionModel, TrainConfig,
};
use focal_core::{focal_attend, Corpus, EmbedMatrix, FocalConfig, Instance, Modality, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(id: &str, modality: Modality, rows: &[Vec<f64>]) -> Instance {
    Instance::new(id, modality, EmbedMatrix::from_rows(rows).unwrap(), None).unwrap()
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    b: usize,
    d_txt: usize,
    d_img: usize,
) -> (Vec<Instance>, Vec<Instance>) {
    let texts = (0..b)
        .map(|k| {
            let n = rng.random_range(1..=4);
            instance(
                &format!("t{k}"),
                Modality::Text,
                &random_rows(rng, n, d_txt),
            )
        })
        .collect();
    let images = (0..b)
        .map(|k| {
            let n = rng.random_range(1..=4);
            instance(
                &format!("i{k}"),
                Modality::Image,
                &random_rows(rng, n, d_img),
            )
        })
        .collect();
    (texts, images)
}

fn batch<'a>(texts: &'a [Instance], images: &'a [Instance]) -> Batch<'a> {
    Batch::new(texts.iter().collect(), images.iter().collect()).unwrap()
}

fn identity_model(d: usize) -> ProjectionModel {
    let mut model = ProjectionModel::zeros(d, d, d, false).unwrap();
    for k in 0..d {
        model.w_txt[k * d + k] = 1.0;
        model.w_img[k * d + k] = 1.0;
    }
    model
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// d cos(u, v) / du.
fn cos_grad(u: &[f64], v: &[f64]) -> Vec<f64> {
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = cos(u, v);
    u.iter()
        .zip(v)
        .map(|(ui, vi)| vi / (nu * nv) - c * ui / (nu * nu))
        .collect()
}

#[test]
fn satisfied_margin_gives_exactly_zero_gradient() {
    let texts = vec![
        instance("t0", Modality::Text, &[vec![1.0, 0.0]]),
        instance("t1", Modality::Text, &[vec![0.0, 1.0]]),
    ];
    let images = vec![
        instance("i0", Modality::Image, &[vec![1.0, 0.0]]),
        instance("i1", Modality::Image, &[vec![0.0, 1.0]]),
    ];
    for variant in Variant::ALL {
        let (loss, grads) = forward_backward(
            &identity_model(2),
            &batch(&texts, &images),
            &FocalConfig::with_variant(variant),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(loss, 0.0);
        for (_, g) in grads.blocks() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn single_hinge_matches_hand_derived_gradient() {
    // One fragment per instance, so every attention weight is 1 and
    // S(t, i) = 2 cos(t W_t, i W_i). With these vectors only the hinge of
    // pair 1 against text negative 0 is active:
    // S11 = S01 = sqrt(2), S00 = 2, S10 = 0.
    let r = 0.5f64.sqrt();
    let texts = vec![
        instance("t0", Modality::Text, &[vec![1.0, 0.0]]),
        instance("t1", Modality::Text, &[vec![0.0, 1.0]]),
    ];
    let images = vec![
        instance("i0", Modality::Image, &[vec![1.0, 0.0]]),
        instance("i1", Modality::Image, &[vec![r, r]]),
    ];
    let model = identity_model(2);
    let focal = FocalConfig::with_variant(Variant::Plain);
    let b = batch(&texts, &images);
    let pass = forward(&model, &b, &focal, &LossConfig::default()).unwrap();
    assert_eq!(pass.loss.text_hinge_active, vec![false, true]);
    assert_eq!(pass.loss.image_hinge_active, vec![false, false]);
    assert!((pass.loss.loss - 0.1).abs() < 1e-12);
    let grads = backward(&model, &b, &pass, &focal).unwrap();

    // L = (margin - S11 + S01) / 2, W = I so projected rows equal raw rows.
    let (t0, t1, i1) = ([1.0, 0.0], [0.0, 1.0], [r, r]);
    let mut g_txt = [0.0; 4];
    let mut g_img = [0.0; 4];
    let mut add = |sign: f64, t: &[f64], i: &[f64]| {
        let (gu, gv) = (cos_grad(t, i), cos_grad(i, t));
        for k in 0..2 {
            for c in 0..2 {
                g_txt[k * 2 + c] += sign * t[k] * gu[c];
                g_img[k * 2 + c] += sign * i[k] * gv[c];
            }
        }
    };
    // dL/dS = -1/2 on S11 and +1/2 on S01, and dS/dcos = 2.
    add(-1.0, &t1, &i1);
    add(1.0, &t0, &i1);
    for (a, e) in grads.w_txt.iter().zip(&g_txt) {
        assert!((a - e).abs() < 1e-12, "{:?} vs {:?}", grads.w_txt, g_txt);
    }
    for (a, e) in grads.w_img.iter().zip(&g_img) {
        assert!((a - e).abs() < 1e-12, "{:?} vs {:?}", grads.w_img, g_img);
    }
}

#[test]
fn random_batch_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (texts, images) = random_batch(&mut rng, 4, 5, 6);
    let model = ProjectionModel::init(5, 6, 4, true, 3).unwrap();
    let loss_cfg = LossConfig { margin: 1.0 };
    for variant in Variant::ALL {
        let report = grad_check(
            &model,
            &batch(&texts, &images),
            &FocalConfig::with_variant(variant),
            &loss_cfg,
            1e-5,
        )
        .unwrap();
        assert!(report.mask_stable, "{variant:?}");
        assert!(report.max_rel_error() < 1e-4, "{variant:?}: {report:?}");
        assert!(report.blocks.iter().any(|b| b.max_abs_error > 0.0));
    }
}

#[test]
fn zero_loss_grad_check_is_exact_and_stable() {
    let texts = vec![
        instance("t0", Modality::Text, &[vec![1.0, 0.0]]),
        instance("t1", Modality::Text, &[vec![0.0, 1.0]]),
    ];
    let images = vec![
        instance("i0", Modality::Image, &[vec![1.0, 0.0]]),
        instance("i1", Modality::Image, &[vec![0.0, 1.0]]),
    ];
    let report = grad_check(
        &identity_model(2),
        &batch(&texts, &images),
        &FocalConfig::with_variant(Variant::Prob),
        &LossConfig::default(),
        1e-5,
    )
    .unwrap();
    assert!(report.mask_stable);
    for block in &report.blocks {
        assert_eq!(block.max_abs_error, 0.0);
        assert_eq!(block.max_rel_error, 0.0);
    }
}

#[test]
fn perturbation_across_mask_boundary_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (texts, images) = random_batch(&mut rng, 3, 4, 4);
    let focal = FocalConfig::with_variant(Variant::Equal);
    let loss_cfg = LossConfig { margin: 1.0 };
    let b = batch(&texts, &images);
    let mut model = ProjectionModel::init(4, 4, 3, false, 9).unwrap();
    let signature_at = |model: &mut ProjectionModel, v: f64| {
        model.w_img[0] = v;
        forward(model, &b, &focal, &loss_cfg)
            .unwrap()
            .signature()
            .masks
    };

    // Scan the first image weight for a mask change, then bisect it.
    let mut lo = -2.0;
    let base = signature_at(&mut model, lo);
    let mut hi = (1..=400)
        .map(|s| -2.0 + s as f64 * 0.01)
        .find(|&v| signature_at(&mut model, v) != base)
        .expect("no mask boundary along the scan");
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if signature_at(&mut model, mid) == base {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    model.w_img[0] = lo;
    let report = grad_check(&model, &b, &focal, &loss_cfg, 1e-6).unwrap();
    assert!(!report.mask_stable);
    assert!(report.unstable_params.contains(&("w_img", 0)));
}

#[test]
fn frozen_and_recomputed_masks_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let loss_cfg = LossConfig { margin: 1.0 };
    for trial in 0..20 {
        let (texts, images) = random_batch(&mut rng, 4, 5, 5);
        let model = ProjectionModel::init(5, 5, 4, true, trial).unwrap();
        let b = batch(&texts, &images);
        for variant in Variant::ALL {
            let focal = FocalConfig::with_variant(variant);
            let pass = forward(&model, &b, &focal, &loss_cfg).unwrap();
            let frozen = backward(&model, &b, &pass, &focal).unwrap();
            let recomputed = backward_recomputing_masks(&model, &b, &pass, &focal).unwrap();
            assert_eq!(frozen, recomputed);
        }
    }
}

#[test]
fn masked_candidate_receives_no_gradient() {
    // The third region is far from every word, so it is masked in every t2i
    // row and its only path to the t2i relevance is through attention.
    let words = EmbedMatrix::from_rows(&[vec![1.0, 0.1, 0.0], vec![0.9, 0.0, 0.2]]).unwrap();
    let regions = EmbedMatrix::from_rows(&[
        vec![1.0, 0.0, 0.1],
        vec![0.8, 0.2, 0.0],
        vec![-1.0, 0.3, 0.2],
    ])
    .unwrap();
    for variant in [Variant::Equal, Variant::Prob] {
        let focal = FocalConfig::with_variant(variant);
        let att = focal_attend(&words, &regions, &focal).unwrap();
        assert!(att.mask.iter_rows().all(|row| !row[2]));
        let mut g_words = vec![0.0; 6];
        let mut g_regions = vec![0.0; 9];
        direction_backward(
            &words,
            &regions,
            &focal,
            None,
            1.0,
            &mut g_words,
            &mut g_regions,
        )
        .unwrap();
        assert_eq!(&g_regions[6..], &[0.0, 0.0, 0.0]);
        assert!(g_regions[..6].iter().any(|&g| g != 0.0));
    }
}

fn separable_corpus(pairs: usize, seed: u64) -> Corpus {
    generate_corpus(&SynthConfig {
        pairs,
        distractor_rate: 0.0,
        noise_sigma: 0.05,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_train_config(epochs: usize, learning_rate: f64) -> TrainConfig {
    TrainConfig {
        learning_rate,
        batch_size: 8,
        epochs,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_deterministic() {
    let corpus = separable_corpus(20, 1);
    let run = || {
        let model = ProjectionModel::init(32, 48, 8, true, 2).unwrap();
        train(
            model,
            &corpus,
            &small_train_config(4, 0.01),
            &FocalConfig::with_variant(Variant::Prob),
            &LossConfig::default(),
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.epoch_losses), bits(&b.epoch_losses));
    assert_eq!(a.model, b.model);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let corpus = separable_corpus(20, 2);
    let model = ProjectionModel::init(32, 48, 8, true, 2).unwrap();
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let cfg = TrainConfig {
            optimizer,
            ..small_train_config(3, 0.0)
        };
        let out = train(
            model.clone(),
            &corpus,
            &cfg,
            &FocalConfig::default(),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.epoch_losses.len(), 3);
    }
}

#[test]
fn separable_corpus_loss_decreases() {
    let corpus = separable_corpus(20, 3);
    let model = ProjectionModel::init(32, 48, 8, true, 7).unwrap();
    for variant in Variant::ALL {
        let out = train(
            model.clone(),
            &corpus,
            &small_train_config(30, 0.01),
            &FocalConfig::with_variant(variant),
            &LossConfig::default(),
        )
        .unwrap();
        let first = out.epoch_losses[0];
        let last = *out.epoch_losses.last().unwrap();
        assert!(last < first, "{variant:?}: {first} -> {last}");
    }
}

#[test]
fn training_rejects_single_pair_corpus() {
    let corpus = separable_corpus(1, 0);
    let model = ProjectionModel::init(32, 48, 4, false, 0).unwrap();
    assert!(train(
        model,
        &corpus,
        &small_train_config(1, 0.01),
        &FocalConfig::default(),
        &LossConfig::default()
    )
    .is_err());
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let corpus = separable_corpus(20, 4);
    let model = ProjectionModel::init(32, 48, 4, true, 1).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        ..small_train_config(3, 1e300)
    };
    let err = train(
        model,
        &corpus,
        &cfg,
        &FocalConfig::default(),
        &LossConfig::default(),
    )
    .unwrap_err();
    assert!(
        matches!(err, focal_core::FocalError::Divergence(_)),
        "{err}"
    );
}
