use super::*;
use crate::scenario::{generate_scenario, ScenarioKind, ScenarioSpec};
use crate::tensor::Tensor;

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        d: 16,
        d_prime: 16,
        layers: 2,
        heads: 2,
        seq_len: 5,
        patch_dim: 4,
        text_heads: 2,
        ..EncoderConfig::default()
    }
}

fn tiny_hp() -> Hyperparams {
    Hyperparams {
        e1: 4,
        e2: 2,
        n_replay: 8,
        batch_size: 8,
        ..Hyperparams::desk()
    }
}

fn stream(tasks: usize, per_task: usize) -> TaskStream {
    let spec = ScenarioSpec {
        num_tasks: tasks,
        classes_per_task: per_task,
        train_per_class: 8,
        test_per_class: 4,
        ..ScenarioSpec::default()
    };
    generate_scenario(&spec, &tiny_encoder()).unwrap()
}

fn trainer(variant: Variant) -> Trainer {
    let config = TrainerConfig {
        hp: tiny_hp(),
        variant,
        ..TrainerConfig::default()
    };
    Trainer::new(&tiny_encoder(), config).unwrap()
}

fn run(variant: Variant, s: &TaskStream) -> Trainer {
    let mut tr = trainer(variant);
    for t in &s.tasks {
        tr.train_task(t).unwrap();
    }
    tr
}

#[test]
fn imagenet_r_preset_matches_the_published_table() {
    let hp = Hyperparams::preset("imagenet_r").unwrap();
    assert_eq!((hp.e1, hp.lambda_stage1, hp.lr_stage1), (50, 30.0, 0.05));
    assert_eq!((hp.e2, hp.lambda_stage2, hp.lr_stage2), (10, 30.0, 0.001));
    assert_eq!((hp.components, hp.n_replay, hp.batch_size), (5, 256, 16));
}

#[test]
fn every_preset_is_valid_and_unknown_names_fail() {
    for name in PRESETS {
        Hyperparams::preset(name).unwrap().validate().unwrap();
    }
    assert_eq!(Hyperparams::preset("cub200").unwrap().e2, 50);
    assert_eq!(Hyperparams::preset("cifar100").unwrap().batch_size, 128);
    assert!(matches!(
        Hyperparams::preset("mnist"),
        Err(Error::Config(_))
    ));
}

#[test]
fn hyperparam_overrides() {
    let mut hp = Hyperparams::desk();
    assert!(hp.set("e1", "3").unwrap());
    assert!(hp.set("lr_stage2", "0.5").unwrap());
    assert!(!hp.set("nope", "1").unwrap());
    assert!(hp.set("e2", "x").is_err());
    assert_eq!((hp.e1, hp.lr_stage2), (3, 0.5));
    hp.batch_size = 0;
    assert!(hp.validate().is_err());
    let mut back = Hyperparams::preset("eurosat").unwrap();
    for (k, v) in Hyperparams::desk().to_pairs() {
        back.set(k, &v).unwrap();
    }
    assert_eq!(back, Hyperparams::desk());
}

#[test]
fn variant_flags_resolve_or_conflict() {
    assert_eq!(VariantFlags::default().resolve().unwrap(), Variant::Full);
    let one = VariantFlags {
        unimodal: true,
        ..VariantFlags::default()
    };
    assert_eq!(one.resolve().unwrap(), Variant::Unimodal);
    let two = VariantFlags {
        no_replay: true,
        prefix_tuning: true,
        ..VariantFlags::default()
    };
    assert!(matches!(two.resolve(), Err(Error::ConflictingFlags(_))));
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!("everything".parse::<Variant>().is_err());
}

#[test]
fn stream_validation() {
    let s = stream(2, 2);
    let mut overlapping = s.clone();
    let t1 = &mut overlapping.tasks[1];
    t1.classes[0] = 0;
    for y in t1
        .train_y
        .iter_mut()
        .chain(t1.test_y.iter_mut())
        .filter(|y| **y == 2)
    {
        *y = 0;
    }
    assert!(matches!(
        overlapping.validate(),
        Err(Error::DuplicateClass(0))
    ));
    let mut stray = s.clone();
    stray.tasks[0].test_y[0] = 3;
    assert!(matches!(stray.validate(), Err(Error::LabelOutOfSet(3))));
    let mut reordered = s.clone();
    reordered.tasks.swap(0, 1);
    assert!(matches!(
        reordered.validate(),
        Err(Error::OutOfOrderTask { .. })
    ));
    let mut empty = s.tasks[0].clone();
    empty.train_x.clear();
    empty.train_y.clear();
    assert!(matches!(empty.validate(), Err(Error::EmptyTask(0))));
    assert_eq!(s.task_of_class(3), Some(1));
}

#[test]
fn out_of_order_and_empty_tasks_are_rejected() {
    let s = stream(2, 2);
    let mut tr = trainer(Variant::Full);
    assert!(matches!(
        tr.train_task(&s.tasks[1]),
        Err(Error::OutOfOrderTask {
            expected: 0,
            got: 1
        })
    ));
    let mut empty = s.tasks[0].clone();
    empty.train_x.clear();
    empty.train_y.clear();
    assert!(matches!(tr.train_task(&empty), Err(Error::EmptyTask(0))));
    assert!(matches!(
        tr.predict(&s.tasks[0].test_x[0]),
        Err(Error::Untrained)
    ));
}

#[test]
fn single_separable_task_is_learned() {
    let spec = ScenarioSpec {
        num_tasks: 1,
        classes_per_task: 4,
        train_per_class: 12,
        test_per_class: 4,
        ..ScenarioSpec::default()
    };
    let s = generate_scenario(&spec, &EncoderConfig::default()).unwrap();
    let mut tr = Trainer::new(
        &EncoderConfig::default(),
        TrainerConfig {
            hp: Hyperparams { e1: 6, ..tiny_hp() },
            ..TrainerConfig::default()
        },
    )
    .unwrap();
    let report = tr.train_task(&s.tasks[0]).unwrap();
    assert!(report.stage2_train_accuracy.unwrap() >= 0.95, "{report:?}");
    assert_eq!(report.stage1_main.len(), 6);
    assert_eq!(report.stage2_replay.len(), 2);
}

#[test]
fn past_prompts_are_frozen_bitwise() {
    let s = stream(3, 2);
    let mut tr = trainer(Variant::Full);
    let fingerprint = tr.stack.fingerprint();
    tr.train_task(&s.tasks[0]).unwrap();
    let after_first = tr.prompt_hashes();
    tr.train_task(&s.tasks[1]).unwrap();
    let after_second = tr.prompt_hashes();
    tr.train_task(&s.tasks[2]).unwrap();
    let after_third = tr.prompt_hashes();
    assert_eq!(after_first[..], after_third[..2]);
    assert_eq!(after_second[..], after_third[..4]);
    assert!(tr.books.first.trainable.iter().all(|t| !t));
    assert_eq!(tr.stack.fingerprint(), fingerprint);
    // Training actually moved the entries of each task.
    assert_ne!(after_second[2], after_first[0]);
    assert_ne!(tr.books.second.q[0], Tensor::zeros(&[2, 16]));
}

#[test]
fn cached_keys_equal_a_fresh_recomputation() {
    let s = stream(2, 2);
    let tr = run(Variant::Full, &s);
    let cached = tr.keys.clone().unwrap();
    let fresh = compute_keys(&tr.books, &tr.stack, &tr.names).unwrap();
    assert_eq!(cached.keys, fresh.keys);
    assert_eq!(cached.classes, fresh.classes);
    assert_eq!(cached.cached_through, Some(1));
}

#[test]
fn logits_cover_every_seen_class() {
    let s = stream(3, 2);
    let tr = run(Variant::Full, &s);
    let p = tr.predict(&s.tasks[0].test_x[0]).unwrap();
    assert_eq!(p.logits.len(), 6);
    assert_eq!(p.selection.sims.len(), 6);
}

#[test]
fn prediction_matches_the_value_level_readout() {
    let s = stream(1, 3);
    let tr = run(Variant::Full, &s);
    for x in &s.tasks[0].test_x {
        let sel = tr.retrieve(x).unwrap();
        let r = crate::prompts::build_residual(&tr.books, &sel, false).unwrap();
        let cls = tr.stack.vit_forward(x, Some(&r)).unwrap();
        let logits = tr.heads.logits(&cls).unwrap().to_f64_vec();
        let p = tr.predict(x).unwrap();
        for (a, b) in p.logits.iter().zip(&logits) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        assert_eq!(p.class, tr.heads.heads[0].classes[argmax(&logits)]);
    }
}

#[test]
fn unimodal_fits_single_components() {
    let s = stream(2, 2);
    let mut tr = trainer(Variant::Unimodal);
    for t in &s.tasks {
        let r = tr.train_task(t).unwrap();
        assert_eq!(r.mixture_components, vec![1; 4]);
    }
    let mut full = trainer(Variant::Full);
    let r = full.train_task(&s.tasks[0]).unwrap();
    assert!(r.mixture_components.iter().any(|&m| m > 1));
}

#[test]
fn first_level_only_never_touches_second_level() {
    let s = stream(2, 2);
    let mut tr = trainer(Variant::FirstLevelOnly);
    for t in &s.tasks {
        tr.train_task(t).unwrap();
    }
    let mut fresh = PromptCodebooks::new(16, 16, 2, ConditioningMode::Residual).unwrap();
    fresh.extend(&[0, 1, 2, 3], 0, &mut Rng::new(0)).unwrap();
    assert_eq!(tr.books.second_level_hash(), fresh.second_level_hash());
    assert!(tr.heads.is_empty());
    assert!(tr.mog_second.is_empty());
    let p = tr.predict(&s.tasks[1].test_x[0]).unwrap();
    assert_eq!(p.logits.len(), 4);
}

#[test]
fn no_first_level_uses_context_keys_and_keeps_prompts() {
    let s = stream(2, 2);
    let mut tr = trainer(Variant::NoFirstLevel);
    tr.train_task(&s.tasks[0]).unwrap();
    let init = tr.books.first.prompts.clone();
    tr.train_task(&s.tasks[1]).unwrap();
    assert_eq!(tr.books.first.prompts[..2], init[..]);
    assert_eq!(
        tr.keys.as_ref().unwrap().keys,
        tr.context_keys().unwrap().keys
    );
    assert!(tr.mog_first.is_empty());
    assert_eq!(tr.mog_second.len(), 4);
}

#[test]
fn prefix_tuning_trains_key_value_tokens() {
    let s = stream(2, 2);
    let tr = run(Variant::PrefixTuning, &s);
    assert_eq!(
        tr.books.second.q[0].shape(),
        &[2 * 2 * DEFAULT_PREFIX_TOKENS, 16]
    );
    assert_ne!(tr.books.second.q[0], Tensor::zeros(&[20, 16]));
    // Prefix conditioning never uses the query weights.
    assert_eq!(tr.books.second.a[0], Tensor::ones(&[1, 16]));
    assert_eq!(tr.predict(&s.tasks[0].test_x[0]).unwrap().logits.len(), 4);
}

#[test]
fn no_confidence_modulation_leaves_query_weights_alone() {
    let s = stream(1, 2);
    let tr = run(Variant::NoConfidenceModulation, &s);
    assert_eq!(tr.books.second.a[0], Tensor::ones(&[1, 16]));
    assert_ne!(tr.books.second.q[0], Tensor::zeros(&[2, 16]));
}

#[test]
fn full_without_replay_epochs_equals_no_replay() {
    let s = stream(2, 2);
    let cfg = |variant| TrainerConfig {
        hp: Hyperparams { e2: 0, ..tiny_hp() },
        variant,
        ..TrainerConfig::default()
    };
    let mut a = Trainer::new(&tiny_encoder(), cfg(Variant::Full)).unwrap();
    let mut b = Trainer::new(&tiny_encoder(), cfg(Variant::NoReplay)).unwrap();
    for t in &s.tasks {
        a.train_task(t).unwrap();
        b.train_task(t).unwrap();
    }
    assert_eq!(a.prompt_hashes(), b.prompt_hashes());
    assert_eq!(a.heads, b.heads);
    assert!(b.mog_first.is_empty() && b.mog_second.is_empty());
    assert_eq!(a.mog_first.len(), 4);
}

#[test]
fn training_is_deterministic() {
    let s = stream(2, 2);
    let a = run(Variant::Full, &s);
    let b = run(Variant::Full, &s);
    assert_eq!(a.prompt_hashes(), b.prompt_hashes());
    assert_eq!(a.heads, b.heads);
    assert_eq!(a.mog_second, b.mog_second);
}

#[test]
fn checkpoint_round_trip() {
    let s = stream(2, 2);
    let tr = run(Variant::Full, &s);
    let dir = tempfile::tempdir().unwrap();
    tr.save(dir.path()).unwrap();
    let back = Trainer::load(dir.path()).unwrap();
    assert_eq!(back.config, tr.config);
    assert_eq!(back.tasks_done(), 2);
    assert_eq!(back.prompt_hashes(), tr.prompt_hashes());
    assert_eq!(back.keys, tr.keys);
    assert_eq!(back.mog_first, tr.mog_first);
    for x in &s.tasks[1].test_x {
        assert_eq!(back.predict(x).unwrap(), tr.predict(x).unwrap());
    }
    let meta = std::fs::read_to_string(dir.path().join("meta.txt")).unwrap();
    assert!(meta.contains("variant=full\n") && meta.contains("encoder.d=16\n"));
}

#[test]
fn checkpoint_with_bad_meta_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Trainer::load(dir.path()), Err(Error::Io { .. })));
    std::fs::write(
        dir.path().join("meta.txt"),
        "format=starprompt-checkpoint-1\nnot a pair\n",
    )
    .unwrap();
    assert!(matches!(Trainer::load(dir.path()), Err(Error::Format(_))));
}

#[test]
fn bimodal_mixtures_use_several_components() {
    let spec = ScenarioSpec {
        num_tasks: 1,
        classes_per_task: 2,
        train_per_class: 12,
        test_per_class: 2,
        kind: ScenarioKind::Bimodal,
        ..ScenarioSpec::default()
    };
    let s = generate_scenario(&spec, &tiny_encoder()).unwrap();
    let mut tr = trainer(Variant::Full);
    let r = tr.train_task(&s.tasks[0]).unwrap();
    assert!(
        r.mixture_components.iter().all(|&m| m >= 2),
        "{:?}",
        r.mixture_components
    );
}
