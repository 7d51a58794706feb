use super::*;
use crate::mog::{Covariance, Mog};
use crate::rng::Rng;
use proptest::prelude::*;

const HAND_CE: f64 = 0.313_261_687_518_222_8; // -ln(e / (e + 1))

fn point_mass(mean: &[f64]) -> Mog {
    Mog {
        weights: vec![1.0],
        means: vec![mean.to_vec()],
        covs: vec![Covariance::Diagonal(vec![1e-6; mean.len()])],
    }
}

#[test]
fn hand_constant_is_right() {
    let e = std::f64::consts::E;
    assert!((HAND_CE + (e / (e + 1.0)).ln()).abs() < 1e-15);
}

#[test]
fn ce_stage1_equidistant_is_ln2() {
    let mut g = Graph::<f64>::new();
    let keys = g
        .constant(Tensor::from_f64(&[2, 2], &[0.6, 0.8, 0.8, 0.6]).unwrap())
        .unwrap();
    let z = g.constant(Tensor::row(&[1.0, 1.0])).unwrap();
    let l = ce_stage1(&mut g, keys, &[4, 9], z, &[9], 0.01).unwrap();
    assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-6);
}

#[test]
fn ce_stage1_hand_softmax() {
    let mut g = Graph::<f64>::new();
    let keys = g
        .constant(Tensor::from_f64(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap())
        .unwrap();
    let z = g.constant(Tensor::row(&[1.0, 0.0, 0.0])).unwrap();
    let l = ce_stage1(&mut g, keys, &[0, 1], z, &[0], 1.0).unwrap();
    assert!((g.scalar(l) - HAND_CE).abs() < 1e-12);
}

#[test]
fn ce_stage1_sharp_temperature_limit() {
    let mut g = Graph::<f64>::new();
    let keys = g
        .constant(Tensor::from_f64(&[2, 2], &[0.8, 0.6, 0.6, 0.8]).unwrap())
        .unwrap();
    let z = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
    let l = ce_stage1(&mut g, keys, &[0, 1], z, &[0], 1e-3).unwrap();
    assert!(g.scalar(l) < 1e-6);
}

#[test]
fn ce_stage1_label_outside_denominator() {
    let mut g = Graph::<f64>::new();
    let keys = g
        .constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let z = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
    assert!(matches!(
        ce_stage1(&mut g, keys, &[0, 1], z, &[5], 1.0),
        Err(Error::LabelOutOfSet(5))
    ));
}

#[test]
fn ce_stage1_gradient_reaches_only_key_params() {
    let mut g = Graph::<f64>::new();
    let trainable = g.param(Tensor::row(&[0.6, 0.8])).unwrap();
    let frozen = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
    let keys = g.concat_rows(&[frozen, trainable]).unwrap();
    let z = g
        .constant(Tensor::from_f64(&[2, 2], &[0.9, 0.1, 0.2, 0.7]).unwrap())
        .unwrap();
    let l = ce_stage1(&mut g, keys, &[0, 1], z, &[0, 1], 0.5).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.len(), 1);
    assert!(grads.of(trainable).l2_norm() > 0.0);
}

fn heads_with(sizes: &[usize], d_prime: usize) -> ClassifierHeads {
    let mut h = ClassifierHeads::new(d_prime);
    let mut next = 0;
    for (t, &n) in sizes.iter().enumerate() {
        h.add_task(t, &(next..next + n).collect::<Vec<_>>())
            .unwrap();
        next += n;
    }
    h
}

#[test]
fn fresh_head_gives_ln_n() {
    let heads = heads_with(&[5], 4);
    let mut g = Graph::<f32>::new();
    let vars = heads.to_graph(&mut g, &[0]).unwrap();
    let x = g
        .constant(Tensor::from_f64(&[2, 4], &[0.3, -1.0, 2.0, 0.1, 1.0, 1.0, 1.0, 1.0]).unwrap())
        .unwrap();
    let l = ce_stage2(&mut g, &heads, &vars, x, &[3, 0], 0).unwrap();
    assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-6);
}

#[test]
fn dominant_head_gives_small_loss() {
    let mut heads = heads_with(&[3], 2);
    heads.heads[0].weight = Tensor::from_f64(&[2, 3], &[10.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut g = Graph::<f64>::new();
    let vars = heads.to_graph(&mut g, &[0]).unwrap();
    let x = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
    let l = ce_stage2(&mut g, &heads, &vars, x, &[0], 0).unwrap();
    assert!(g.scalar(l) < 0.01);
}

#[test]
fn ce_stage2_unknown_task_and_label() {
    let heads = heads_with(&[2, 2], 2);
    let mut g = Graph::<f64>::new();
    let vars = heads.to_graph(&mut g, &[1]).unwrap();
    let x = g.constant(Tensor::row(&[1.0, 0.0])).unwrap();
    assert!(matches!(
        ce_stage2(&mut g, &heads, &vars, x, &[0], 4),
        Err(Error::UnknownTask(4))
    ));
    assert!(matches!(
        ce_stage2(&mut g, &heads, &vars, x, &[0], 1),
        Err(Error::LabelOutOfSet(0))
    ));
}

#[test]
fn heads_order_and_round_trip() {
    let mut heads = heads_with(&[2, 3, 1], 4);
    assert_eq!(heads.total_classes(), 6);
    assert_eq!(heads.all_classes(), vec![0, 1, 2, 3, 4, 5]);
    assert!(matches!(
        heads.add_task(5, &[9]),
        Err(Error::OutOfOrderTask {
            expected: 3,
            got: 5
        })
    ));
    assert!(matches!(heads.add_task(3, &[]), Err(Error::EmptyTask(3))));
    heads.heads[1].bias.data_mut()[2] = 1.5;
    let logits = heads.logits(&Tensor::zeros(&[1, 4])).unwrap();
    assert_eq!(logits.shape(), &[1, 6]);
    assert_eq!(logits.data()[4], 1.5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heads.bin");
    heads.save(&path).unwrap();
    assert_eq!(ClassifierHeads::load(&path).unwrap(), heads);
}

#[test]
fn ortho_first_cases() {
    let mut g = Graph::<f64>::new();
    let cur = g.param(Tensor::row(&[0.6, 0.8])).unwrap();
    let none = ortho_first(&mut g, &[cur], &[], false).unwrap();
    assert_eq!(g.scalar(none), 0.0);
    let orth = ortho_first(&mut g, &[cur], &[Tensor::row(&[0.8, -0.6])], false).unwrap();
    assert!(g.scalar(orth).abs() < 1e-6);
    let hand = ortho_first(&mut g, &[cur], &[Tensor::row(&[1.0, 0.0])], false).unwrap();
    assert!((g.scalar(hand) - 0.6).abs() < 1e-12);
    let scaled = g.param(Tensor::row(&[3.0, 4.0])).unwrap();
    let norm = ortho_first(&mut g, &[scaled], &[Tensor::row(&[-2.0, 0.0])], false).unwrap();
    assert!((g.scalar(norm) - 0.6).abs() < 1e-12);
    let raw = ortho_first(&mut g, &[scaled], &[Tensor::row(&[-2.0, 0.0])], true).unwrap();
    assert!((g.scalar(raw) + 6.0).abs() < 1e-12);
}

#[test]
fn ortho_first_gradient_only_for_current() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::row(&[0.6, 0.8])).unwrap();
    let b = g.param(Tensor::row(&[-0.3, 0.2])).unwrap();
    let l = ortho_first(
        &mut g,
        &[a, b],
        &[Tensor::row(&[1.0, 0.0]), Tensor::row(&[0.5, 0.5])],
        false,
    )
    .unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.len(), 2);
    assert!(grads.of(a).l2_norm() > 0.0 && grads.of(b).l2_norm() > 0.0);
}

#[test]
fn ortho_second_cases() {
    let mut g = Graph::<f64>::new();
    let zero = g.param(Tensor::zeros(&[2, 2])).unwrap();
    let l = ortho_second(&mut g, &[zero], &[Tensor::ones(&[2, 2])], 2, false).unwrap();
    assert_eq!(g.scalar(l), 0.0);
    let none = ortho_second(&mut g, &[zero], &[], 2, false).unwrap();
    assert_eq!(g.scalar(none), 0.0);
    // layer 0 overlap 0.6, layer 1 overlap 0.2
    let cur = g
        .param(Tensor::from_f64(&[2, 2], &[0.6, 0.8, 0.2, 0.9797958971132712]).unwrap())
        .unwrap();
    let past = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let l = ortho_second(&mut g, &[cur], &[past], 2, false).unwrap();
    assert!((g.scalar(l) - 0.4).abs() < 1e-12);
}

#[test]
fn ortho_second_flattens_prefix_blocks() {
    let mut g = Graph::<f64>::new();
    // two layers, two rows each
    let cur = g
        .param(Tensor::from_f64(&[4, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let past = Tensor::from_f64(&[4, 1], &[1.0, 0.0, 1.0, 0.0]).unwrap();
    let l = ortho_second(&mut g, &[cur], &[past], 2, false).unwrap();
    assert!((g.scalar(l) - 0.5).abs() < 1e-12);
}

#[test]
fn gr_loss_first_single_class_is_zero() {
    let mut bank = MogBank::default();
    bank.insert(3, point_mass(&[1.0, 0.0]));
    let mut g = Graph::<f64>::new();
    let keys = g.constant(Tensor::row(&[0.0, 1.0])).unwrap();
    let l = gr_loss_first(&mut g, keys, &[3], &bank, 256, 0.01, &mut Rng::new(0)).unwrap();
    assert!(g.scalar(l).abs() < 1e-6);
}

#[test]
fn gr_loss_first_point_masses_match_hand_softmax() {
    let mut bank = MogBank::default();
    bank.insert(0, point_mass(&[1.0, 0.0]));
    bank.insert(1, point_mass(&[0.0, 1.0]));
    let mut g = Graph::<f64>::new();
    let keys = g
        .constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap())
        .unwrap();
    let l = gr_loss_first(&mut g, keys, &[0, 1], &bank, 256, 1.0, &mut Rng::new(0)).unwrap();
    assert!((g.scalar(l) - HAND_CE).abs() < 1e-2);
    assert!(matches!(
        gr_loss_first(&mut g, keys, &[0, 7], &bank, 4, 1.0, &mut Rng::new(0)),
        Err(Error::MissingMog(7))
    ));
}

#[test]
fn gr_loss_second_cases() {
    let heads = heads_with(&[3], 2);
    let mut bank = MogBank::default();
    for c in 0..3 {
        bank.insert(c, point_mass(&[c as f64, 1.0]));
    }
    let mut g = Graph::<f64>::new();
    let vars = heads.to_graph(&mut g, &[0]).unwrap();
    let l = gr_loss_second(&mut g, &heads, &vars, &bank, 8, &mut Rng::new(1)).unwrap();
    assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-6);

    let mut heads = heads_with(&[2, 1], 3);
    let mut bank = MogBank::default();
    for c in 0..3 {
        let mut e = vec![0.0; 3];
        e[c] = 1.0;
        bank.insert(c, point_mass(&e));
    }
    for head in heads.heads.iter_mut() {
        for (j, &c) in head.classes.clone().iter().enumerate() {
            head.weight.data_mut()[c * head.classes.len() + j] = 10.0;
        }
    }
    let mut g = Graph::<f64>::new();
    let vars = heads.to_graph(&mut g, &[0, 1]).unwrap();
    let l = gr_loss_second(&mut g, &heads, &vars, &bank, 16, &mut Rng::new(1)).unwrap();
    assert!(g.scalar(l) < 1e-3);
}

#[test]
fn gr_loss_second_reaches_every_head() {
    let heads = heads_with(&[2, 2, 2], 3);
    let mut bank = MogBank::default();
    for c in 0..6 {
        bank.insert(c, point_mass(&[c as f64 * 0.1, 1.0, -0.5]));
    }
    let mut g = Graph::<f64>::new();
    let vars = heads.to_graph(&mut g, &[0, 1, 2]).unwrap();
    let xv = g.constant(Tensor::zeros(&[1, 3])).unwrap();
    let logits = all_head_logits(&mut g, &vars, xv).unwrap();
    assert_eq!(g.value(logits).cols(), 6);
    let l = gr_loss_second(&mut g, &heads, &vars, &bank, 4, &mut Rng::new(1)).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.of(vars[0].weight).l2_norm() > 0.0);
    assert!(grads.of(vars[0].bias).l2_norm() > 0.0);
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_posteriors_normalised(
        z in prop::collection::vec(-3.0f64..3.0, 12),
        k in prop::collection::vec(-3.0f64..3.0, 12),
        tau in 0.01f64..2.0,
    ) {
        let mut g = Graph::<f64>::new();
        let keys = g.constant(Tensor::new(&[4, 3], k).unwrap()).unwrap();
        let zv = g.constant(Tensor::new(&[4, 3], z).unwrap()).unwrap();
        let l = ce_stage1(&mut g, keys, &[0, 1, 2, 3], zv, &[0, 1, 2, 3], tau).unwrap();
        prop_assert!(g.scalar(l) >= 0.0 && g.scalar(l).is_finite());
        let sims = g.matmul_nt(zv, keys).unwrap();
        let logits = g.scale(sims, 1.0 / tau).unwrap();
        let p = g.softmax(logits).unwrap();
        for r in 0..4 {
            prop_assert!((g.value(p).row_f64(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let z0 = Tensor::from_f64(&[1, 3], &g.value(zv).row_f64(0)).unwrap();
        let k0 = Tensor::from_f64(&[1, 3], &g.value(keys).row_f64(0)).unwrap();
        let cur = g.constant(z0).unwrap();
        let o = ortho_first(&mut g, &[cur], &[k0], false).unwrap();
        prop_assert!(g.scalar(o) >= 0.0);
    }
}
