use super::*;
use crate::tensor::grad_check;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        d_prime: 8,
        layers: 2,
        heads: 2,
        seq_len: 4,
        patch_dim: 3,
        text_heads: 2,
        text_layers: 1,
        vision_layers: 1,
        ..EncoderConfig::default()
    }
}

fn random_input(cfg: &EncoderConfig, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed);
    scaled_normal(&mut rng, cfg.num_patches(), cfg.patch_dim, 1.0)
}

fn cos(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let x = a.to_f64_vec();
    let y = b.to_f64_vec();
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    dot / (a.l2_norm() * b.l2_norm())
}

#[test]
fn config_validation() {
    assert!(EncoderConfig::default().validate().is_ok());
    let bad = EncoderConfig {
        heads: 3,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = EncoderConfig {
        tau: 0.0,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
    let bad = EncoderConfig {
        seq_len: 1,
        ..EncoderConfig::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn build_is_deterministic_and_seed_dependent() {
    let cfg = EncoderConfig::default();
    let a = build_stack(&cfg, 11).unwrap();
    let b = build_stack(&cfg, 11).unwrap();
    let c = build_stack(&cfg, 12).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(a.vit_blocks[0].w1, b.vit_blocks[0].w1);
    assert_ne!(a.fingerprint(), c.fingerprint());
}

#[test]
fn text_prototypes_are_separated() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 3).unwrap();
    let zero = Tensor::zeros(&[1, cfg.d]);
    let outs: Vec<_> = (0..10)
        .map(|i| {
            let name = class_name_embed(&format!("name-{i}"), &cfg).unwrap();
            stack.text_encode(&zero, &name).unwrap()
        })
        .collect();
    for i in 0..10 {
        for j in i + 1..10 {
            assert!(cos(&outs[i], &outs[j]) < 0.99, "pair {i},{j}");
        }
    }
}

#[test]
fn vision_outputs_are_separated_and_pure() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 3).unwrap();
    let outs: Vec<_> = (0..10)
        .map(|i| stack.vision_encode(&random_input(&cfg, i)).unwrap())
        .collect();
    for i in 0..10 {
        assert!((outs[i].l2_norm() - 1.0).abs() < 1e-6);
        for j in i + 1..10 {
            assert!(cos(&outs[i], &outs[j]) < 0.99, "pair {i},{j}");
        }
    }
    let again = stack.vision_encode(&random_input(&cfg, 0)).unwrap();
    assert_eq!(again, outs[0]);
}

#[test]
fn vision_rejects_bad_input_shape() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 3).unwrap();
    assert!(stack
        .vision_encode(&Tensor::zeros(&[cfg.seq_len, cfg.patch_dim]))
        .is_err());
}

#[test]
fn text_encode_contracts() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 5).unwrap();
    let mut rng = Rng::new(9);
    let p: Tensor<f32> = scaled_normal(&mut rng, 1, cfg.d, 0.02);
    let dog = class_name_embed("dog", &cfg).unwrap();
    let cat = class_name_embed("cat", &cfg).unwrap();
    let wd = stack.text_encode(&p, &dog).unwrap();
    let wc = stack.text_encode(&p, &cat).unwrap();
    assert!((wd.l2_norm() - 1.0).abs() < 1e-6);
    assert_ne!(wd, wc);
    assert!(stack
        .text_encode(&Tensor::zeros(&[1, cfg.d + 1]), &dog)
        .is_err());
}

#[test]
fn text_encode_gradient_matches_finite_differences() {
    let cfg = small_config();
    let stack = build_stack(&cfg, 5).unwrap().cast::<f64>();
    let name = class_name_embed("dog", &cfg).unwrap();
    let mut rng = Rng::new(2);
    let p: Tensor<f64> = scaled_normal(&mut rng, 1, cfg.d, 0.5);
    let weights: Tensor<f64> = scaled_normal(&mut rng, 1, cfg.d, 1.0);
    let report = grad_check(
        |g, ps| {
            let w = stack.text_encode_graph(g, ps[0], &name)?;
            let c = g.constant(weights.clone())?;
            let m = g.mul(w, c)?;
            g.sum(m)
        },
        &[p],
        1e-4,
    )
    .unwrap();
    assert!(report.passed, "max rel err {}", report.max_rel_err);
}

#[test]
fn class_name_embedding_contracts() {
    let cfg = EncoderConfig::default();
    let a = class_name_embed("dog", &cfg).unwrap();
    let b = class_name_embed("dog", &cfg).unwrap();
    let c = class_name_embed("cat", &cfg).unwrap();
    assert_eq!(a, b);
    assert!((a.vector.l2_norm() - 1.0).abs() < 1e-6);
    assert!(cos(&a.vector, &c.vector) < 0.99);
    assert!(class_name_embed("", &cfg).is_err());
}

#[test]
fn zero_residuals_are_bitwise_identity() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 1).unwrap();
    let x = random_input(&cfg, 4);
    let plain = stack.vit_forward(&x, None).unwrap();
    let zero = Tensor::zeros(&[cfg.layers, cfg.d_prime]);
    let with_zero = stack.vit_forward(&x, Some(&zero)).unwrap();
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain), bits(&with_zero));
    assert_eq!(plain.shape(), &[1, cfg.d_prime]);
}

#[test]
fn residual_shape_is_checked() {
    let cfg = EncoderConfig::default();
    let stack = build_stack(&cfg, 1).unwrap();
    let x = random_input(&cfg, 4);
    let bad = Tensor::zeros(&[cfg.layers - 1, cfg.d_prime]);
    assert!(stack.vit_forward(&x, Some(&bad)).is_err());
}

#[test]
fn vit_gradient_wrt_residuals() {
    for target in [ResidualTarget::AllTokens, ResidualTarget::ClsOnly] {
        let cfg = EncoderConfig {
            residual_target: target,
            ..small_config()
        };
        let stack = build_stack(&cfg, 8).unwrap().cast::<f64>();
        let x = random_input(&cfg, 1).cast::<f64>();
        let mut rng = Rng::new(3);
        let r: Tensor<f64> = scaled_normal(&mut rng, cfg.layers, cfg.d_prime, 0.3);
        for coord in [0usize, 5] {
            let report = grad_check(
                |g, ps| {
                    let out = stack.vit_forward_graph(g, &x, &Conditioning::Residual(ps[0]))?;
                    let col = g.slice_cols(out, coord, 1)?;
                    g.sum(col)
                },
                std::slice::from_ref(&r),
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed,
                "{target:?} coord {coord}: {}",
                report.max_rel_err
            );
        }
    }
}

#[test]
fn cls_only_residual_differs_from_broadcast() {
    let base = small_config();
    let cls_cfg = EncoderConfig {
        residual_target: ResidualTarget::ClsOnly,
        ..base.clone()
    };
    let all = build_stack(&base, 2).unwrap();
    let mut cls = all.clone();
    cls.config = cls_cfg;
    let x = random_input(&base, 3);
    let r = Tensor::full(&[base.layers, base.d_prime], 0.5);
    assert_ne!(
        all.vit_forward(&x, Some(&r)).unwrap(),
        cls.vit_forward(&x, Some(&r)).unwrap()
    );
}

// Single block, single head, hand-set weights; the reference forward is
// plain nested loops in f64.
mod manual_oracle {
    use super::*;

    type M = Vec<Vec<f64>>;

    fn pattern(rows: usize, cols: usize, salt: f64) -> M {
        (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| ((i * cols + j) as f64 * 0.7 + salt).sin() * 0.8)
                    .collect()
            })
            .collect()
    }

    fn to_tensor(m: &M) -> Arc<Tensor<f32>> {
        let rows = m.len();
        let cols = m[0].len();
        let flat: Vec<f64> = m.iter().flatten().cloned().collect();
        Arc::new(Tensor::from_f64(&[rows, cols], &flat).unwrap())
    }

    fn matmul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn ln(a: &M) -> M {
        a.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
                row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn single_block_matches_hand_forward() {
        let cfg = EncoderConfig {
            d: 4,
            d_prime: 3,
            layers: 1,
            heads: 1,
            seq_len: 3,
            patch_dim: 2,
            text_heads: 1,
            text_layers: 1,
            vision_layers: 1,
            ..EncoderConfig::default()
        };
        let mut stack = build_stack(&cfg, 0).unwrap();
        let (wq, wk, wv, wo) = (
            pattern(3, 3, 0.1),
            pattern(3, 3, 1.3),
            pattern(3, 3, 2.9),
            pattern(3, 3, 4.2),
        );
        let (w1, b1, w2, b2) = (
            pattern(3, 12, 0.5),
            pattern(1, 12, 3.3),
            pattern(12, 3, 1.7),
            pattern(1, 3, 0.9),
        );
        let bo = pattern(1, 3, 5.5);
        let patch = pattern(2, 3, 2.2);
        let pos = pattern(3, 3, 0.3);
        let cls = pattern(1, 3, 6.1);
        let block = &mut stack.vit_blocks[0];
        block.wq = vec![to_tensor(&wq)];
        block.wk = vec![to_tensor(&wk)];
        block.wv = vec![to_tensor(&wv)];
        block.wo = vec![to_tensor(&wo)];
        block.bo = to_tensor(&bo);
        block.w1 = to_tensor(&w1);
        block.b1 = to_tensor(&b1);
        block.w2 = to_tensor(&w2);
        block.b2 = to_tensor(&b2);
        stack.vit_patch = to_tensor(&patch);
        stack.vit_pos = to_tensor(&pos);
        stack.vit_cls = to_tensor(&cls);

        let x = vec![vec![0.4, -1.1], vec![1.5, 0.2]];
        let r = [vec![0.25, -0.5, 0.75]];

        // embedding
        let px = matmul(&x, &patch);
        let mut e: M = vec![cls[0].clone(), px[0].clone(), px[1].clone()];
        for (i, row) in e.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += pos[i][j];
            }
        }
        // attention
        let h = ln(&e);
        let (q, k, v) = (matmul(&h, &wq), matmul(&h, &wk), matmul(&h, &wv));
        let mut mixed = vec![vec![0.0; 3]; 3];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 3f64.sqrt())
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let ex: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = ex.iter().sum();
            for j in 0..3 {
                for c in 0..3 {
                    mixed[i][c] += ex[j] / z * v[j][c];
                }
            }
        }
        let attn = matmul(&mixed, &wo);
        let e1: M = (0..3)
            .map(|i| {
                (0..3)
                    .map(|c| attn[i][c] + bo[0][c] + e[i][c] + r[0][c])
                    .collect()
            })
            .collect();
        let hid: M = matmul(&ln(&e1), &w1)
            .iter()
            .map(|row| row.iter().zip(&b1[0]).map(|(a, b)| gelu(a + b)).collect())
            .collect();
        let mlp = matmul(&hid, &w2);
        let expected: Vec<f64> = (0..3).map(|c| mlp[0][c] + b2[0][c] + e1[0][c]).collect();

        let xt = Tensor::from_f64(&[2, 2], &[0.4, -1.1, 1.5, 0.2]).unwrap();
        let rt = Tensor::from_f64(&[1, 3], &r[0]).unwrap();
        let got = stack.vit_forward(&xt, Some(&rt)).unwrap().to_f64_vec();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-5, "got {got:?}, expected {expected:?}");
        }
    }
}
