//! Two-level prompt codebooks, prototype keys, selection and residual
//! construction.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{read_file, Reader, Writer};
use crate::encoders::{hex, ClassNameEmbedding, FrozenStack};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::ClassId;

/// Standard deviation of freshly drawn first-level prompts.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// How the second-level prompts condition the main transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditioningMode {
    /// `Q_c` is `L × d'`, added as per-layer residuals.
    Residual,
    /// `Q_c` holds `tokens` key and `tokens` value prompts per layer,
    /// stacked as `L · 2 · tokens` rows.
    Prefix { tokens: usize },
}

impl ConditioningMode {
    pub fn rows(&self, layers: usize) -> usize {
        match self {
            Self::Residual => layers,
            Self::Prefix { tokens } => layers * 2 * tokens,
        }
    }
}

/// Similarity between a visual query and a prototype key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SimilarityMode {
    /// `⟨l2_normalize(z ⊙ A_c), w_c⟩`.
    #[default]
    Weighted,
    /// `⟨z ⊙ A_c, w_c⟩` without re-normalisation.
    WeightedRaw,
    /// `⟨z, w_c⟩`.
    Unweighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirstLevelCodebook {
    /// `1 × d` prompt token per class.
    pub prompts: Vec<Tensor<f32>>,
    pub trainable: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SecondLevelCodebook {
    pub mode: ConditioningMode,
    /// Per-class prompt matrix (`mode.rows(L) × d'`).
    pub q: Vec<Tensor<f32>>,
    /// Per-class `1 × d` query weights.
    pub a: Vec<Tensor<f32>>,
    pub trainable: Vec<bool>,
}

/// Both codebooks, indexed by insertion order of the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptCodebooks {
    pub d: usize,
    pub d_prime: usize,
    pub layers: usize,
    classes: Vec<ClassId>,
    tasks: Vec<usize>,
    index: BTreeMap<ClassId, usize>,
    pub first: FirstLevelCodebook,
    pub second: SecondLevelCodebook,
}

impl PromptCodebooks {
    pub fn new(d: usize, d_prime: usize, layers: usize, mode: ConditioningMode) -> Result<Self> {
        if d == 0 || d_prime == 0 || layers == 0 || mode == (ConditioningMode::Prefix { tokens: 0 })
        {
            return Err(Error::Config("codebook dimensions must be positive".into()));
        }
        Ok(Self {
            d,
            d_prime,
            layers,
            classes: Vec::new(),
            tasks: Vec::new(),
            index: BTreeMap::new(),
            first: FirstLevelCodebook {
                prompts: Vec::new(),
                trainable: Vec::new(),
            },
            second: SecondLevelCodebook {
                mode,
                q: Vec::new(),
                a: Vec::new(),
                trainable: Vec::new(),
            },
        })
    }

    pub fn mode(&self) -> ConditioningMode {
        self.second.mode
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    /// Task that introduced the class at `idx`.
    pub fn task_of(&self, idx: usize) -> usize {
        self.tasks[idx]
    }

    pub fn index_of(&self, class: ClassId) -> Result<usize> {
        self.index
            .get(&class)
            .copied()
            .ok_or(Error::UnknownClass(class))
    }

    /// Indices of the classes introduced by `task`.
    pub fn task_indices(&self, task: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tasks[i] == task).collect()
    }

    /// Indices of classes introduced before `task`.
    pub fn past_indices(&self, task: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tasks[i] < task).collect()
    }

    /// Adds fresh entries for `new_classes` under `task` and freezes every
    /// pre-existing entry. New `p_c ~ N(0, 0.02²)`, `Q_c = 0`, `A_c = 1`.
    pub fn extend(&mut self, new_classes: &[ClassId], task: usize, rng: &mut Rng) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for &c in new_classes {
            if self.index.contains_key(&c) || !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        self.freeze_all();
        let rows = self.second.mode.rows(self.layers);
        for &c in new_classes {
            let p: Vec<f64> = (0..self.d)
                .map(|_| rng.normal() * PROMPT_INIT_STD)
                .collect();
            self.index.insert(c, self.classes.len());
            self.classes.push(c);
            self.tasks.push(task);
            self.first.prompts.push(Tensor::row(&p));
            self.first.trainable.push(true);
            self.second.q.push(Tensor::zeros(&[rows, self.d_prime]));
            self.second.a.push(Tensor::ones(&[1, self.d]));
            self.second.trainable.push(true);
        }
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.first.trainable.iter_mut().for_each(|t| *t = false);
        self.second.trainable.iter_mut().for_each(|t| *t = false);
    }

    /// SHA-256 over `(p_c, Q_c, A_c)` of one class.
    pub fn entry_hash(&self, idx: usize) -> String {
        let mut h = Sha256::new();
        self.first.prompts[idx].hash_into(&mut h);
        self.second.q[idx].hash_into(&mut h);
        self.second.a[idx].hash_into(&mut h);
        hex(&h.finalize())
    }

    /// SHA-256 over every second-level tensor.
    pub fn second_level_hash(&self) -> String {
        let mut h = Sha256::new();
        for (q, a) in self.second.q.iter().zip(&self.second.a) {
            q.hash_into(&mut h);
            a.hash_into(&mut h);
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(CODEBOOK_MAGIC, 1);
        w.u32(self.d as u32);
        w.u32(self.d_prime as u32);
        w.u32(self.layers as u32);
        match self.second.mode {
            ConditioningMode::Residual => w.u32(0),
            ConditioningMode::Prefix { tokens } => w.u32(tokens as u32),
        }
        w.u32(self.len() as u32);
        for i in 0..self.len() {
            w.u64(self.classes[i] as u64);
            w.u32(self.tasks[i] as u32);
            w.u8(self.first.trainable[i] as u8);
            w.u8(self.second.trainable[i] as u8);
            w.f32s(&self.first.prompts[i]);
            w.f32s(&self.second.q[i]);
            w.f32s(&self.second.a[i]);
        }
        w.save(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let mut r = Reader::new(&bytes, CODEBOOK_MAGIC, 1, "codebooks")?;
        let d = r.u32()? as usize;
        let d_prime = r.u32()? as usize;
        let layers = r.u32()? as usize;
        let mode = match r.u32()? {
            0 => ConditioningMode::Residual,
            tokens => ConditioningMode::Prefix {
                tokens: tokens as usize,
            },
        };
        let mut books = Self::new(d, d_prime, layers, mode)?;
        let count = r.u32()? as usize;
        let rows = mode.rows(layers);
        for i in 0..count {
            let class = r.u64()? as ClassId;
            books.index.insert(class, i);
            books.classes.push(class);
            books.tasks.push(r.u32()? as usize);
            books.first.trainable.push(r.u8()? != 0);
            books.second.trainable.push(r.u8()? != 0);
            books.first.prompts.push(r.f32s(&[1, d])?);
            books.second.q.push(r.f32s(&[rows, d_prime])?);
            books.second.a.push(r.f32s(&[1, d])?);
        }
        r.finish()?;
        Ok(books)
    }
}

const CODEBOOK_MAGIC: &[u8; 8] = b"STARBOOK";

/// Prototype keys `w_c`, one unit row per class, in codebook order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeKeys {
    pub classes: Vec<ClassId>,
    /// `Nt × d`.
    pub keys: Tensor<f32>,
    /// Last task whose keys have been recomputed and cached.
    pub cached_through: Option<usize>,
}

impl PrototypeKeys {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn key(&self, idx: usize) -> Vec<f64> {
        self.keys.row_f64(idx)
    }
}

/// Runs every class's first-level prompt through the text encoder.
pub fn compute_keys(
    books: &PromptCodebooks,
    stack: &FrozenStack<f32>,
    names: &BTreeMap<ClassId, ClassNameEmbedding>,
) -> Result<PrototypeKeys> {
    if books.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let mut rows = Vec::with_capacity(books.len());
    for (i, c) in books.classes().iter().enumerate() {
        let name = names.get(c).ok_or(Error::UnknownClass(*c))?;
        rows.push(stack.text_encode(&books.first.prompts[i], name)?);
    }
    let refs: Vec<&Tensor<f32>> = rows.iter().collect();
    Ok(PrototypeKeys {
        classes: books.classes().to_vec(),
        keys: Tensor::concat_rows(&refs)?,
        cached_through: None,
    })
}

/// Outcome of the query-key match.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Codebook index of the chosen class.
    pub index: usize,
    pub class: ClassId,
    pub sim: f64,
    /// Similarity to every key, in codebook order.
    pub sims: Vec<f64>,
}

fn similarity(z: &[f64], a: Option<&[f64]>, w: &[f64], mode: SimilarityMode) -> f64 {
    match (mode, a) {
        (SimilarityMode::Unweighted, _) | (_, None) => z.iter().zip(w).map(|(x, y)| x * y).sum(),
        (_, Some(a)) => {
            let q: Vec<f64> = z.iter().zip(a).map(|(x, y)| x * y).collect();
            let dot: f64 = q.iter().zip(w).map(|(x, y)| x * y).sum();
            if mode == SimilarityMode::WeightedRaw {
                return dot;
            }
            let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            dot / norm
        }
    }
}

/// Picks the key with the highest similarity to `z` (lowest index on exact
/// ties). `weights` holds one `A_c` per key and is ignored in unweighted mode.
pub fn select(
    keys: &PrototypeKeys,
    z: &Tensor<f32>,
    weights: &[Tensor<f32>],
    mode: SimilarityMode,
) -> Result<Selection> {
    if keys.is_empty() {
        return Err(Error::EmptyKeys);
    }
    let d = keys.keys.cols();
    if z.len() != d {
        return Err(Error::shape(
            "select",
            format!("query has {} entries, keys have {d}", z.len()),
        ));
    }
    if mode != SimilarityMode::Unweighted && weights.len() != keys.len() {
        return Err(Error::shape(
            "select",
            format!("{} query weights for {} keys", weights.len(), keys.len()),
        ));
    }
    let zv = z.to_f64_vec();
    let mut sims = Vec::with_capacity(keys.len());
    for i in 0..keys.len() {
        let a = (mode != SimilarityMode::Unweighted).then(|| weights.get(i).map(|w| w.to_f64_vec())).flatten();
        sims.push(similarity(&zv, a.as_deref(), &keys.key(i), mode));
    }
    let mut best = 0;
    for (i, &s) in sims.iter().enumerate() {
        if s > sims[best] {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        class: keys.classes[best],
        sim: sims[best],
        sims,
    })
}

/// Differentiable similarity of the chosen class; `z` and `w` are `1 × d`.
pub fn similarity_graph<F: Real>(
    g: &mut Graph<F>,
    z: Var,
    a: Var,
    w: Var,
    mode: SimilarityMode,
) -> Result<Var> {
    match mode {
        SimilarityMode::Weighted => {
            let q = g.mul(z, a)?;
            let q = g.l2_normalize(q)?;
            let prod = g.mul(q, w)?;
            g.sum(prod)
        }
        SimilarityMode::WeightedRaw => {
            let q = g.mul(z, a)?;
            let prod = g.mul(q, w)?;
            g.sum(prod)
        }
        SimilarityMode::Unweighted => {
            let prod = g.mul(z, w)?;
            g.sum(prod)
        }
    }
}

/// `R = sim · Q` (or `Q` alone without confidence modulation).
pub fn build_residual_graph<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    sim: Var,
    no_confidence_modulation: bool,
) -> Result<Var> {
    if no_confidence_modulation {
        Ok(q)
    } else {
        g.scale_by(q, sim)
    }
}

/// Value-level residual for a selection.
pub fn build_residual(
    books: &PromptCodebooks,
    sel: &Selection,
    no_confidence_modulation: bool,
) -> Result<Tensor<f32>> {
    let idx = books.index_of(sel.class)?;
    if books.mode() != ConditioningMode::Residual {
        return Err(Error::Config(
            "residuals need residual-mode codebooks".into(),
        ));
    }
    let q = &books.second.q[idx];
    if no_confidence_modulation {
        return Ok(q.clone());
    }
    let data: Vec<f64> = q.to_f64_vec().iter().map(|v| v * sel.sim).collect();
    Tensor::from_f64(q.shape(), &data)
}

/// Splits a prefix-mode `Q_c` leaf into per-layer `(keys, values)` tokens.
pub fn prefix_tuning_condition<F: Real>(
    g: &mut Graph<F>,
    books: &PromptCodebooks,
    q: Var,
) -> Result<Vec<(Var, Var)>> {
    let ConditioningMode::Prefix { tokens } = books.mode() else {
        return Err(Error::ModeNotEnabled);
    };
    (0..books.layers)
        .map(|l| {
            let base = l * 2 * tokens;
            Ok((
                g.slice_rows(q, base, tokens)?,
                g.slice_rows(q, base + tokens, tokens)?,
            ))
        })
        .collect()
}
