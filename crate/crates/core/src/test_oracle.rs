//! Naive nested-loop reference implementations used only by unit tests.

use crate::encoders::{Block, FrozenStack};
use crate::tensor::Tensor;

pub type M = Vec<Vec<f64>>;

pub fn to_m(t: &Tensor<f32>) -> M {
    (0..t.rows()).map(|r| t.row_f64(r)).collect()
}

pub fn matmul(a: &M, b: &M) -> M {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn layer_norm(a: &M) -> M {
    a.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::MIN, f64::max);
    let ex: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = ex.iter().sum();
    ex.iter().map(|v| v / z).collect()
}

fn cols(m: &M, start: usize, len: usize) -> M {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// One pre-norm block; `prefix` rows are prepended to keys and values.
pub fn block_forward(
    b: &Block<f32>,
    e: &M,
    residual: Option<&[f64]>,
    prefix: Option<(&M, &M)>,
) -> M {
    let n = e.len();
    let width = e[0].len();
    let h = layer_norm(e);
    let mut attn = vec![vec![0.0; width]; n];
    for head in 0..b.heads() {
        let dh = b.wq[head].cols();
        let q = matmul(&h, &to_m(&b.wq[head]));
        let mut k = matmul(&h, &to_m(&b.wk[head]));
        let mut v = matmul(&h, &to_m(&b.wv[head]));
        if let Some((pk, pv)) = prefix {
            let mut k2 = cols(pk, head * dh, dh);
            k2.extend(k);
            k = k2;
            let mut v2 = cols(pv, head * dh, dh);
            v2.extend(v);
            v = v2;
        }
        let wo = to_m(&b.wo[head]);
        for i in 0..n {
            let scores: Vec<f64> = k
                .iter()
                .map(|kr| {
                    kr.iter().zip(&q[i]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            let mut mixed = vec![0.0; dh];
            for (j, pj) in p.iter().enumerate() {
                for c in 0..dh {
                    mixed[c] += pj * v[j][c];
                }
            }
            for c in 0..width {
                attn[i][c] += (0..dh).map(|k| mixed[k] * wo[k][c]).sum::<f64>();
            }
        }
    }
    let bo = b.bo.row_f64(0);
    let e1: M = (0..n)
        .map(|i| {
            (0..width)
                .map(|c| attn[i][c] + bo[c] + e[i][c] + residual.map_or(0.0, |r| r[c]))
                .collect()
        })
        .collect();
    let b1 = b.b1.row_f64(0);
    let hid: M = matmul(&layer_norm(&e1), &to_m(&b.w1))
        .iter()
        .map(|row| row.iter().zip(&b1).map(|(a, c)| gelu(a + c)).collect())
        .collect();
    let mlp = matmul(&hid, &to_m(&b.w2));
    let b2 = b.b2.row_f64(0);
    (0..n)
        .map(|i| (0..width).map(|c| mlp[i][c] + b2[c] + e1[i][c]).collect())
        .collect()
}

/// Main-transformer forward with optional per-layer residual rows or prefixes.
pub fn vit_forward(
    stack: &FrozenStack<f32>,
    x: &Tensor<f32>,
    residuals: Option<&M>,
    prefixes: Option<&[(M, M)]>,
) -> Vec<f64> {
    let px = matmul(&to_m(x), &to_m(&stack.vit_patch));
    let mut e: M = vec![stack.vit_cls.row_f64(0)];
    e.extend(px);
    let pos = to_m(&stack.vit_pos);
    for (i, row) in e.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += pos[i][c];
        }
    }
    for (l, b) in stack.vit_blocks.iter().enumerate() {
        let r = residuals.map(|rs| rs[l].as_slice());
        let p = prefixes.map(|ps| (&ps[l].0, &ps[l].1));
        e = block_forward(b, &e, r, p);
    }
    e[0].clone()
}
