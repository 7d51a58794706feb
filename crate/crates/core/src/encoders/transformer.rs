use std::sync::Arc;

use sha2::Digest;

use super::{scaled_normal, ResidualTarget};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Per-layer conditioning of the main transformer.
#[derive(Clone, Debug)]
pub enum Conditioning {
    None,
    /// `layers × d_prime` residual rows, one per block.
    Residual(Var),
    /// Per-block `(keys, values)` prompt tokens, each `tokens × d_prime`,
    /// prepended to the projected attention keys and values.
    Prefix(Vec<(Var, Var)>),
}

/// Pre-norm transformer block: `e' = MSA(LN(e)) + e [+ R]`,
/// `out = MLP(LN(e')) + e'`. Projections are stored per head.
#[derive(Clone, Debug)]
pub struct Block<F: Real = f32> {
    pub wq: Vec<Arc<Tensor<F>>>,
    pub wk: Vec<Arc<Tensor<F>>>,
    pub wv: Vec<Arc<Tensor<F>>>,
    pub wo: Vec<Arc<Tensor<F>>>,
    pub bo: Arc<Tensor<F>>,
    pub w1: Arc<Tensor<F>>,
    pub b1: Arc<Tensor<F>>,
    pub w2: Arc<Tensor<F>>,
    pub b2: Arc<Tensor<F>>,
}

impl<F: Real> Block<F> {
    pub fn random(rng: &mut Rng, width: usize, heads: usize) -> Self {
        let dh = width / heads;
        let hidden = 4 * width;
        let s_in = 1.0 / (width as f64).sqrt();
        let mut per_head = |rows, cols, std| -> Vec<Arc<Tensor<F>>> {
            (0..heads)
                .map(|_| Arc::new(scaled_normal(rng, rows, cols, std)))
                .collect()
        };
        let wq = per_head(width, dh, s_in);
        let wk = per_head(width, dh, s_in);
        let wv = per_head(width, dh, s_in);
        let wo = per_head(dh, width, s_in);
        Self {
            wq,
            wk,
            wv,
            wo,
            bo: Arc::new(Tensor::zeros(&[1, width])),
            w1: Arc::new(scaled_normal(rng, width, hidden, s_in)),
            b1: Arc::new(Tensor::zeros(&[1, hidden])),
            w2: Arc::new(scaled_normal(
                rng,
                hidden,
                width,
                1.0 / (hidden as f64).sqrt(),
            )),
            b2: Arc::new(Tensor::zeros(&[1, width])),
        }
    }

    pub fn heads(&self) -> usize {
        self.wq.len()
    }

    pub fn cast<G: Real>(&self) -> Block<G> {
        let c = |t: &Arc<Tensor<F>>| Arc::new(t.cast::<G>());
        let cv = |ts: &Vec<Arc<Tensor<F>>>| ts.iter().map(|t| Arc::new(t.cast::<G>())).collect();
        Block {
            wq: cv(&self.wq),
            wk: cv(&self.wk),
            wv: cv(&self.wv),
            wo: cv(&self.wo),
            bo: c(&self.bo),
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
        }
    }

    pub(crate) fn hash_into(&self, h: &mut impl Digest) {
        for t in self
            .wq
            .iter()
            .chain(&self.wk)
            .chain(&self.wv)
            .chain(&self.wo)
        {
            t.hash_into(h);
        }
        for t in [&self.bo, &self.w1, &self.b1, &self.w2, &self.b2] {
            t.hash_into(h);
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph<F>,
        e: Var,
        residual: Option<Var>,
        target: ResidualTarget,
        prefix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let h = g.layer_norm(e)?;
        let mut attn: Option<Var> = None;
        for head in 0..self.heads() {
            let dh = self.wq[head].cols();
            let wq = g.constant_shared(&self.wq[head])?;
            let wk = g.constant_shared(&self.wk[head])?;
            let wv = g.constant_shared(&self.wv[head])?;
            let q = g.matmul(h, wq)?;
            let mut k = g.matmul(h, wk)?;
            let mut v = g.matmul(h, wv)?;
            if let Some((pk, pv)) = prefix {
                let pk = g.slice_cols(pk, head * dh, dh)?;
                let pv = g.slice_cols(pv, head * dh, dh)?;
                k = g.concat_rows(&[pk, k])?;
                v = g.concat_rows(&[pv, v])?;
            }
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let weights = g.softmax(scores)?;
            let mixed = g.matmul(weights, v)?;
            let wo = g.constant_shared(&self.wo[head])?;
            let projected = g.matmul(mixed, wo)?;
            attn = Some(match attn {
                Some(acc) => g.add(acc, projected)?,
                None => projected,
            });
        }
        let bo = g.constant_shared(&self.bo)?;
        let attn = g.add_row(attn.expect("at least one head"), bo)?;
        let mut e1 = g.add(attn, e)?;
        if let Some(r) = residual {
            e1 = match target {
                ResidualTarget::AllTokens => g.add_row(e1, r)?,
                ResidualTarget::ClsOnly => {
                    let n = g.value(e1).rows();
                    let cls = g.slice_rows(e1, 0, 1)?;
                    let cls = g.add(cls, r)?;
                    if n > 1 {
                        let rest = g.slice_rows(e1, 1, n - 1)?;
                        g.concat_rows(&[cls, rest])?
                    } else {
                        cls
                    }
                }
            };
        }
        let h2 = g.layer_norm(e1)?;
        let w1 = g.constant_shared(&self.w1)?;
        let b1 = g.constant_shared(&self.b1)?;
        let w2 = g.constant_shared(&self.w2)?;
        let b2 = g.constant_shared(&self.b2)?;
        let hidden = g.matmul(h2, w1)?;
        let hidden = g.add_row(hidden, b1)?;
        let hidden = g.gelu(hidden)?;
        let out = g.matmul(hidden, w2)?;
        let out = g.add_row(out, b2)?;
        g.add(out, e1)
    }
}
