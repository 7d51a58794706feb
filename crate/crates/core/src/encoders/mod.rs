//! Frozen stand-ins for the text encoder, the vision encoder and the main
//! transformer, plus ingestion of precomputed features.
//!
//! All weights are drawn once from a seed and never updated. The main
//! transformer accepts per-layer conditioning: additive residuals injected
//! after the attention branch, or prefix key/value tokens.

mod features;
mod transformer;

pub use features::{
    load_feature_file, parse_feature_bytes, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use transformer::{Block, Conditioning};

use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Where a per-layer residual row is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ResidualTarget {
    /// Broadcast to every token position.
    #[default]
    AllTokens,
    /// Classification token only.
    ClsOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Joint text/vision embedding width.
    pub d: usize,
    /// Hidden width of the main transformer (and of the vision encoder).
    pub d_prime: usize,
    /// Blocks in the main transformer.
    pub layers: usize,
    pub heads: usize,
    /// Tokens per input, classification token included.
    pub seq_len: usize,
    /// Raw features per patch token.
    pub patch_dim: usize,
    /// Softmax temperature of the text/vision similarity logits.
    pub tau: f64,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vision_layers: usize,
    pub residual_target: ResidualTarget,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_prime: 64,
            layers: 4,
            heads: 4,
            seq_len: 17,
            patch_dim: 8,
            tau: 0.01,
            text_layers: 2,
            text_heads: 4,
            vision_layers: 2,
            residual_target: ResidualTarget::AllTokens,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_prime", self.d_prime),
            ("layers", self.layers),
            ("heads", self.heads),
            ("patch_dim", self.patch_dim),
            ("text_layers", self.text_layers),
            ("text_heads", self.text_heads),
            ("vision_layers", self.vision_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.seq_len < 2 {
            return Err(Error::Config(
                "seq_len must be >= 2 (classification token plus one patch)".into(),
            ));
        }
        if !self.d_prime.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_prime {} not divisible by heads {}",
                self.d_prime, self.heads
            )));
        }
        if !self.d.is_multiple_of(self.text_heads) {
            return Err(Error::Config(format!(
                "d {} not divisible by text_heads {}",
                self.d, self.text_heads
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Patch tokens per input (`seq_len − 1`).
    pub fn num_patches(&self) -> usize {
        self.seq_len - 1
    }

    /// Flattened raw-input length.
    pub fn input_len(&self) -> usize {
        self.num_patches() * self.patch_dim
    }
}

/// Deterministic frozen weights for the three encoders.
#[derive(Clone, Debug)]
pub struct FrozenStack<F: Real = f32> {
    pub config: EncoderConfig,
    pub text_pos: Arc<Tensor<F>>,
    pub text_blocks: Vec<Block<F>>,
    pub text_proj: Arc<Tensor<F>>,
    pub vision_patch: Arc<Tensor<F>>,
    pub vision_pos: Arc<Tensor<F>>,
    pub vision_cls: Arc<Tensor<F>>,
    pub vision_blocks: Vec<Block<F>>,
    pub vision_proj: Arc<Tensor<F>>,
    pub vit_patch: Arc<Tensor<F>>,
    pub vit_pos: Arc<Tensor<F>>,
    pub vit_cls: Arc<Tensor<F>>,
    pub vit_blocks: Vec<Block<F>>,
}

/// Embedding of a class name (a stand-in for the token embedding of the word).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNameEmbedding {
    pub name: String,
    pub vector: Tensor<f32>,
}

pub fn scaled_normal<F: Real>(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor<F> {
    let data = (0..rows * cols)
        .map(|_| F::from_f64(rng.normal() * std))
        .collect();
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

/// `rows × cols` matrix with orthonormal columns (or rows, when wider than tall).
fn orthogonal<F: Real>(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<F> {
    let (n, k) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut data = vec![F::default(); rows * cols];
    for (j, b) in basis.iter().enumerate() {
        for (i, &x) in b.iter().enumerate() {
            if rows >= cols {
                data[i * cols + j] = F::from_f64(x);
            } else {
                data[j * cols + i] = F::from_f64(x);
            }
        }
    }
    Tensor::new(&[rows, cols], data).expect("positive dims")
}

/// Draws the frozen stack from `seed`: scaled-normal weights with
/// `std = 1/√fan_in`, orthogonal output projections.
pub fn build_stack(config: &EncoderConfig, seed: u64) -> Result<FrozenStack<f32>> {
    config.validate()?;
    let root = Rng::new(seed);
    let mut text_rng = root.fork(1);
    let mut vision_rng = root.fork(2);
    let mut vit_rng = root.fork(3);
    let c = config;
    let arc = Arc::new;

    let text_pos = arc(scaled_normal(&mut text_rng, 2, c.d, 0.02));
    let text_blocks = (0..c.text_layers)
        .map(|_| Block::random(&mut text_rng, c.d, c.text_heads))
        .collect();
    let text_proj = arc(orthogonal(&mut text_rng, c.d, c.d));

    let vision_patch = arc(scaled_normal(
        &mut vision_rng,
        c.patch_dim,
        c.d_prime,
        1.0 / (c.patch_dim as f64).sqrt(),
    ));
    let vision_pos = arc(scaled_normal(&mut vision_rng, c.seq_len, c.d_prime, 0.02));
    let vision_cls = arc(scaled_normal(&mut vision_rng, 1, c.d_prime, 0.02));
    let vision_blocks = (0..c.vision_layers)
        .map(|_| Block::random(&mut vision_rng, c.d_prime, c.heads))
        .collect();
    let vision_proj = arc(orthogonal(&mut vision_rng, c.d_prime, c.d));

    let vit_patch = arc(scaled_normal(
        &mut vit_rng,
        c.patch_dim,
        c.d_prime,
        1.0 / (c.patch_dim as f64).sqrt(),
    ));
    let vit_pos = arc(scaled_normal(&mut vit_rng, c.seq_len, c.d_prime, 0.02));
    let vit_cls = arc(scaled_normal(&mut vit_rng, 1, c.d_prime, 0.02));
    let vit_blocks = (0..c.layers)
        .map(|_| Block::random(&mut vit_rng, c.d_prime, c.heads))
        .collect();

    Ok(FrozenStack {
        config: config.clone(),
        text_pos,
        text_blocks,
        text_proj,
        vision_patch,
        vision_pos,
        vision_cls,
        vision_blocks,
        vision_proj,
        vit_patch,
        vit_pos,
        vit_cls,
        vit_blocks,
    })
}

/// Embedding for `name`: a normal draw seeded by the SHA-256 of the name,
/// l2-normalised to length `config.d`.
pub fn class_name_embed(name: &str, config: &EncoderConfig) -> Result<ClassNameEmbedding> {
    if name.is_empty() {
        return Err(Error::Config("class name must be nonempty".into()));
    }
    let digest = Sha256::digest(name.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = Rng::new(seed);
    let raw: Vec<f64> = (0..config.d).map(|_| rng.normal()).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let vector = Tensor::row(&raw.iter().map(|x| x / norm).collect::<Vec<_>>());
    Ok(ClassNameEmbedding {
        name: name.to_string(),
        vector,
    })
}

/// Name used for synthetic class `id`.
pub fn synthetic_class_name(id: crate::ClassId) -> String {
    format!("class-{id:04}")
}

fn mean_rows<F: Real>(g: &mut Graph<F>, x: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    let avg = g.constant(Tensor::full(&[1, rows], 1.0 / rows as f64))?;
    g.matmul(avg, x)
}

fn check_input<F: Real>(config: &EncoderConfig, x: &Tensor<F>) -> Result<()> {
    let expect = (config.num_patches(), config.patch_dim);
    if x.dims2() != expect || x.shape().len() != 2 {
        return Err(Error::shape(
            "encoder input",
            format!("expected [{}, {}], got {:?}", expect.0, expect.1, x.shape()),
        ));
    }
    Ok(())
}

impl<F: Real> FrozenStack<F> {
    /// Converts every weight to another element type.
    pub fn cast<G: Real>(&self) -> FrozenStack<G> {
        let c = |t: &Arc<Tensor<F>>| Arc::new(t.cast::<G>());
        let cb = |bs: &Vec<Block<F>>| bs.iter().map(Block::cast::<G>).collect();
        FrozenStack {
            config: self.config.clone(),
            text_pos: c(&self.text_pos),
            text_blocks: cb(&self.text_blocks),
            text_proj: c(&self.text_proj),
            vision_patch: c(&self.vision_patch),
            vision_pos: c(&self.vision_pos),
            vision_cls: c(&self.vision_cls),
            vision_blocks: cb(&self.vision_blocks),
            vision_proj: c(&self.vision_proj),
            vit_patch: c(&self.vit_patch),
            vit_pos: c(&self.vit_pos),
            vit_cls: c(&self.vit_cls),
            vit_blocks: cb(&self.vit_blocks),
        }
    }

    /// SHA-256 over every weight, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in [
            &self.text_pos,
            &self.text_proj,
            &self.vision_patch,
            &self.vision_pos,
            &self.vision_cls,
        ] {
            t.hash_into(&mut h);
        }
        for t in [
            &self.vision_proj,
            &self.vit_patch,
            &self.vit_pos,
            &self.vit_cls,
        ] {
            t.hash_into(&mut h);
        }
        for b in self
            .text_blocks
            .iter()
            .chain(&self.vision_blocks)
            .chain(&self.vit_blocks)
        {
            b.hash_into(&mut h);
        }
        hex(&h.finalize())
    }

    /// Text encoder over `[prompt; class name]`, mean-pooled, projected and
    /// l2-normalised. Differentiable with respect to `prompt` (`1 × d`).
    pub fn text_encode_graph(
        &self,
        g: &mut Graph<F>,
        prompt: Var,
        name: &ClassNameEmbedding,
    ) -> Result<Var> {
        let d = self.config.d;
        if g.value(prompt).dims2() != (1, d) || name.vector.dims2() != (1, d) {
            return Err(Error::shape(
                "text_encode",
                format!(
                    "prompt {:?} and class embedding {:?} must be [1, {d}]",
                    g.value(prompt).shape(),
                    name.vector.shape()
                ),
            ));
        }
        let name_v = g.constant(name.vector.cast::<F>())?;
        let tokens = g.concat_rows(&[prompt, name_v])?;
        let pos = g.constant_shared(&self.text_pos)?;
        let mut e = g.add(tokens, pos)?;
        for block in &self.text_blocks {
            e = block.forward(g, e, None, ResidualTarget::AllTokens, None)?;
        }
        let pooled = mean_rows(g, e)?;
        let proj = g.constant_shared(&self.text_proj)?;
        let out = g.matmul(pooled, proj)?;
        g.l2_normalize(out)
    }

    pub fn text_encode(&self, prompt: &Tensor<F>, name: &ClassNameEmbedding) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let p = g.constant(prompt.clone())?;
        let out = self.text_encode_graph(&mut g, p, name)?;
        Ok(g.value(out).clone())
    }

    fn embed_tokens(
        &self,
        g: &mut Graph<F>,
        x: &Tensor<F>,
        patch: &Arc<Tensor<F>>,
        pos: &Arc<Tensor<F>>,
        cls: &Arc<Tensor<F>>,
    ) -> Result<Var> {
        check_input(&self.config, x)?;
        let xv = g.constant(x.clone())?;
        let w = g.constant_shared(patch)?;
        let patches = g.matmul(xv, w)?;
        let cls = g.constant_shared(cls)?;
        let tokens = g.concat_rows(&[cls, patches])?;
        let pos = g.constant_shared(pos)?;
        g.add(tokens, pos)
    }

    /// Visual query: mean-pooled vision encoder output, projected to the joint
    /// space and l2-normalised. `x` is `num_patches × patch_dim`.
    pub fn vision_encode(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let mut e = self.embed_tokens(
            &mut g,
            x,
            &self.vision_patch,
            &self.vision_pos,
            &self.vision_cls,
        )?;
        for block in &self.vision_blocks {
            e = block.forward(&mut g, e, None, ResidualTarget::AllTokens, None)?;
        }
        let pooled = mean_rows(&mut g, e)?;
        let proj = g.constant_shared(&self.vision_proj)?;
        let out = g.matmul(pooled, proj)?;
        let out = g.l2_normalize(out)?;
        Ok(g.value(out).clone())
    }

    /// Main transformer on `x`; returns the classification-token output of the
    /// last block (`1 × d_prime`).
    pub fn vit_forward_graph(
        &self,
        g: &mut Graph<F>,
        x: &Tensor<F>,
        cond: &Conditioning,
    ) -> Result<Var> {
        let l = self.config.layers;
        let dp = self.config.d_prime;
        let residual_rows = match cond {
            Conditioning::Residual(r) => {
                if g.value(*r).dims2() != (l, dp) {
                    return Err(Error::shape(
                        "vit_forward",
                        format!("residuals {:?}, expected [{l}, {dp}]", g.value(*r).shape()),
                    ));
                }
                let rows = (0..l)
                    .map(|i| g.slice_rows(*r, i, 1))
                    .collect::<Result<Vec<_>>>()?;
                Some(rows)
            }
            Conditioning::Prefix(layers) => {
                if layers.len() != l {
                    return Err(Error::shape(
                        "vit_forward",
                        format!("{} prefix layers, expected {l}", layers.len()),
                    ));
                }
                None
            }
            Conditioning::None => None,
        };
        let mut e = self.embed_tokens(g, x, &self.vit_patch, &self.vit_pos, &self.vit_cls)?;
        for (i, block) in self.vit_blocks.iter().enumerate() {
            let residual = residual_rows.as_ref().map(|rs| rs[i]);
            let prefix = match cond {
                Conditioning::Prefix(layers) => Some(layers[i]),
                _ => None,
            };
            e = block.forward(g, e, residual, self.config.residual_target, prefix)?;
        }
        g.slice_rows(e, 0, 1)
    }

    /// Value-only forward with optional `L × d_prime` residuals.
    pub fn vit_forward(&self, x: &Tensor<F>, residuals: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let cond = match residuals {
            Some(r) => Conditioning::Residual(g.constant(r.clone())?),
            None => Conditioning::None,
        };
        let out = self.vit_forward_graph(&mut g, x, &cond)?;
        Ok(g.value(out).clone())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
