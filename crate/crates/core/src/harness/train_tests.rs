use super::*;
use crate::harness::{generate_dataset, load_checkpoint, save_checkpoint, SyntheticSpec};

fn tiny_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        n_identities: 14,
        images_per_identity: 2,
        captions_per_image: 1,
        seed: 5,
        ..SyntheticSpec::default()
    };
    generate_dataset(&spec).unwrap().split(0.2, 1).unwrap()
}

fn tiny_config(toggles: Toggles) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        epochs: 2,
        lr_start: 1e-3,
        lr_end: 1e-2,
        toggles,
        encoder: EncoderConfig {
            dim: 8,
            depth: 1,
            max_tokens: 24,
            ..EncoderConfig::default()
        },
        imr: ImrLossParams {
            k: 2,
            ..ImrLossParams::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn all_toggles_off_freezes_parameters() {
    let (tr, va) = tiny_data();
    let cfg = tiny_config(Toggles::none());
    let out = train(&cfg, &tr, Some(&va)).unwrap();
    let init = init_model(&cfg, build_vocab(&tr)).unwrap();
    assert_eq!(out.model.params, init.params);
    assert!(out.history.iter().all(|m| m.loss.total == 0.0));
    assert_eq!(initial_losses(&cfg, &tr).unwrap(), LossBreakdown::default());
}

#[test]
fn training_is_deterministic_and_moves_parameters() {
    let (tr, va) = tiny_data();
    let cfg = tiny_config(Toggles::default());
    let a = train(&cfg, &tr, Some(&va)).unwrap();
    let b = train(&cfg, &tr, Some(&va)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history.len(), 2);
    assert!(a.history.iter().all(|m| m.val_rank1.is_some() && m.loss.total > 0.0));
    let init = init_model(&cfg, build_vocab(&tr)).unwrap();
    assert_ne!(a.model.params, init.params);
}

fn single(which: usize) -> Toggles {
    let mut t = Toggles::none();
    match which {
        0 => t.global_align = true,
        1 => t.imr_t = true,
        2 => t.imr_v = true,
        3 => t.cmr = true,
        _ => t.dcc = true,
    }
    t
}

#[test]
fn total_loss_is_the_weighted_sum_of_components() {
    let (tr, _) = tiny_data();
    let mut cfg = tiny_config(Toggles::default());
    cfg.weights = LossWeights {
        imr: 0.5,
        imc: 2.0,
        nitc: 0.25,
        ditc: 3.0,
        align: 1.5,
    };
    let full = initial_losses(&cfg, &tr).unwrap();
    let mut sum = 0.0;
    for which in 0..5 {
        let c = TrainConfig {
            toggles: single(which),
            ..cfg.clone()
        };
        let part = initial_losses(&c, &tr).unwrap();
        assert!(part.total > 0.0);
        sum += part.total;
    }
    let w = &cfg.weights;
    let from_parts = w.align * full.align
        + w.imr * (full.imr_t + full.imr_v)
        + w.imc * (full.imc_t + full.imc_v)
        + w.nitc * full.nitc
        + w.ditc * full.ditc;
    let tol = 1e-6 * full.total.abs().max(1.0);
    assert!((full.total - sum).abs() < tol, "{} vs {sum}", full.total);
    assert!((full.total - from_parts).abs() < tol);
}

#[test]
fn non_finite_loss_aborts_with_location() {
    let (tr, _) = tiny_data();
    let mut cfg = tiny_config(Toggles::baseline());
    cfg.weights.align = f64::INFINITY;
    match train(&cfg, &tr, None) {
        Err(Error::Divergence { epoch, step, .. }) => assert_eq!((epoch, step), (0, 0)),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let (tr, _) = tiny_data();
    for bad in [
        TrainConfig { batch_size: 1, ..tiny_config(Toggles::default()) },
        TrainConfig { lr_start: 1e-2, lr_end: 1e-3, ..tiny_config(Toggles::default()) },
        TrainConfig {
            weights: LossWeights { imr: -1.0, ..LossWeights::default() },
            ..tiny_config(Toggles::default())
        },
    ] {
        assert!(matches!(train(&bad, &tr, None), Err(Error::Input(_))));
    }
}

#[test]
fn batches_prefer_distinct_identities() {
    let (tr, _) = tiny_data();
    let pairs = training_pairs(&tr);
    let n_ids = tr.identities.len();
    let batches = epoch_batches(&pairs, &tr, 6, 3);
    assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), pairs.len());
    let mut order = Vec::new();
    for b in &batches {
        order.extend(b.iter().map(|p| tr.captions[p.0].identity_id));
    }
    for round in order.chunks(n_ids) {
        let distinct: std::collections::BTreeSet<_> = round.iter().collect();
        assert_eq!(distinct.len(), round.len());
    }
    assert_eq!(batches.len(), batch_count(pairs.len(), 6));
}

#[test]
fn checkpoint_round_trip_reproduces_embeddings() {
    let (tr, va) = tiny_data();
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config(Toggles::baseline())
    };
    let out = train(&cfg, &tr, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &out.model, &cfg, &out.history).unwrap();
    let (model, back_cfg) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back_cfg, cfg);
    let a = evaluate(&out.model, &va, String::new(), 0).unwrap();
    let b = evaluate(&model, &va, String::new(), 0).unwrap();
    assert_eq!(a, b);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn image_to_text_ranks_captions_for_each_image() {
    let (tr, va) = tiny_data();
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config(Toggles::baseline())
    };
    let model = train(&cfg, &tr, None).unwrap().model;
    let r = evaluate_direction(&model, &va.images, &va.captions, Direction::ImageToText, String::new(), 0).unwrap();
    assert_eq!(r.ranked_ids.len(), va.images.len());
    r.validate().unwrap();
    let q = model.encode_image(&va.images[0]).unwrap();
    let best = va
        .captions
        .iter()
        .map(|c| {
            let t = model.encode_text(c).unwrap();
            crate::numerics::cosine(q.global_feat.data(), t.global_feat.data()).unwrap()
        })
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc });
    assert_eq!(r.ranked_ids[0][0], va.captions[best.0].identity_id);
    let forward = evaluate(&model, &va, String::new(), 0).unwrap();
    assert_eq!(forward.ranked_ids.len(), va.captions.len());
}
