//! Loss functions: both cross-entropies, both orthogonality penalties and
//! both generative-replay losses, plus the per-task classifier heads.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::binio::{read_file, Reader, Writer};
use crate::encoders::hex;
use crate::error::{Error, Result};
use crate::mog::MogBank;
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::ClassId;

/// Linear head of one task: `d' × N` weights and `1 × N` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub task: usize,
    pub classes: Vec<ClassId>,
    pub weight: Tensor<f32>,
    pub bias: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHeads {
    pub d_prime: usize,
    pub heads: Vec<Head>,
}

const HEADS_MAGIC: &[u8; 8] = b"STARHEAD";

impl ClassifierHeads {
    pub fn new(d_prime: usize) -> Self {
        Self {
            d_prime,
            heads: Vec::new(),
        }
    }

    /// Appends a zero-initialised head for `task`.
    pub fn add_task(&mut self, task: usize, classes: &[ClassId]) -> Result<()> {
        if task != self.heads.len() {
            return Err(Error::OutOfOrderTask {
                expected: self.heads.len(),
                got: task,
            });
        }
        if classes.is_empty() {
            return Err(Error::EmptyTask(task));
        }
        self.heads.push(Head {
            task,
            classes: classes.to_vec(),
            weight: Tensor::zeros(&[self.d_prime, classes.len()]),
            bias: Tensor::zeros(&[1, classes.len()]),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn head(&self, task: usize) -> Result<&Head> {
        self.heads.get(task).ok_or(Error::UnknownTask(task))
    }

    /// Classes of every head, in concatenation order.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.heads
            .iter()
            .flat_map(|h| h.classes.iter().copied())
            .collect()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes.len()).sum()
    }

    pub fn head_hash(&self, task: usize) -> Result<String> {
        let h = self.head(task)?;
        let mut d = Sha256::new();
        h.weight.hash_into(&mut d);
        h.bias.hash_into(&mut d);
        Ok(hex(&d.finalize()))
    }

    /// Puts every head on the graph; heads whose task is in `trainable` become
    /// parameters, the rest constants.
    pub fn to_graph<F: Real>(
        &self,
        g: &mut Graph<F>,
        trainable: &[usize],
    ) -> Result<Vec<HeadVars>> {
        self.heads
            .iter()
            .map(|h| {
                let (w, b) = (h.weight.cast::<F>(), h.bias.cast::<F>());
                Ok(if trainable.contains(&h.task) {
                    HeadVars {
                        weight: g.param(w)?,
                        bias: g.param(b)?,
                    }
                } else {
                    HeadVars {
                        weight: g.constant(w)?,
                        bias: g.constant(b)?,
                    }
                })
            })
            .collect()
    }

    /// Value-level logits of all heads concatenated, for `x` (`B × d'`).
    pub fn logits(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if self.is_empty() {
            return Err(Error::Untrained);
        }
        let mut g = Graph::<f32>::new();
        let vars = self.to_graph(&mut g, &[])?;
        let xv = g.constant(x.clone())?;
        let out = all_head_logits(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::new(HEADS_MAGIC, 1);
        w.u32(self.d_prime as u32);
        w.u32(self.heads.len() as u32);
        for h in &self.heads {
            w.u32(h.task as u32);
            w.u32(h.classes.len() as u32);
            for &c in &h.classes {
                w.u64(c as u64);
            }
            w.f32s(&h.weight);
            w.f32s(&h.bias);
        }
        w.save(path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = read_file(path.as_ref())?;
        let mut r = Reader::new(&bytes, HEADS_MAGIC, 1, "heads")?;
        let d_prime = r.u32()? as usize;
        let mut out = Self::new(d_prime);
        for _ in 0..r.u32()? {
            let task = r.u32()? as usize;
            let n = r.u32()? as usize;
            let classes = (0..n)
                .map(|_| r.u64().map(|c| c as ClassId))
                .collect::<Result<Vec<_>>>()?;
            let weight = r.f32s(&[d_prime, n])?;
            let bias = r.f32s(&[1, n])?;
            out.heads.push(Head {
                task,
                classes,
                weight,
                bias,
            });
        }
        r.finish()?;
        Ok(out)
    }
}

/// Graph leaves of one head.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn head_logits<F: Real>(g: &mut Graph<F>, head: HeadVars, x: Var) -> Result<Var> {
    let z = g.matmul(x, head.weight)?;
    g.add_row(z, head.bias)
}

/// Logits of every head, concatenated column-wise.
pub fn all_head_logits<F: Real>(g: &mut Graph<F>, heads: &[HeadVars], x: Var) -> Result<Var> {
    let parts = heads
        .iter()
        .map(|h| head_logits(g, *h, x))
        .collect::<Result<Vec<_>>>()?;
    g.concat_cols(&parts)
}

/// Position of each label within `denominator`.
pub fn label_positions(denominator: &[ClassId], labels: &[ClassId]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            denominator
                .iter()
                .position(|c| c == l)
                .ok_or(Error::LabelOutOfSet(*l))
        })
        .collect()
}

/// Mean cross-entropy of `⟨z_i, w_c⟩ / τ` over the classes of `keys`
/// (`K × d`, one row per entry of `key_classes`).
pub fn ce_stage1<F: Real>(
    g: &mut Graph<F>,
    keys: Var,
    key_classes: &[ClassId],
    z: Var,
    labels: &[ClassId],
    tau: f64,
) -> Result<Var> {
    let targets = label_positions(key_classes, labels)?;
    let sims = g.matmul_nt(z, keys)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    g.cross_entropy(logits, &targets)
}

/// Cross-entropy of the head of `task` on CLS features `x` (`B × d'`).
pub fn ce_stage2<F: Real>(
    g: &mut Graph<F>,
    heads: &ClassifierHeads,
    vars: &[HeadVars],
    x: Var,
    labels: &[ClassId],
    task: usize,
) -> Result<Var> {
    let head = heads.head(task)?;
    let hv = *vars.get(task).ok_or(Error::UnknownTask(task))?;
    let targets = label_positions(&head.classes, labels)?;
    let logits = head_logits(g, hv, x)?;
    g.cross_entropy(logits, &targets)
}

/// Sum over current × past pairs of `|⟨p̂_c', p̂_c⟩|` (or of raw `⟨p_c', p_c⟩`
/// when `raw`). Rows of `current` and `past` are individual vectors; pass
/// past vectors as constants.
pub fn pairwise_overlap<F: Real>(
    g: &mut Graph<F>,
    current: Var,
    past: Var,
    raw: bool,
) -> Result<Var> {
    if raw {
        let m = g.matmul_nt(current, past)?;
        return g.sum(m);
    }
    let c = g.l2_normalize(current)?;
    let p = g.l2_normalize(past)?;
    let m = g.matmul_nt(c, p)?;
    let a = g.abs(m)?;
    g.sum(a)
}

fn zero_scalar<F: Real>(g: &mut Graph<F>) -> Result<Var> {
    g.constant(Tensor::zeros(&[1, 1]))
}

/// First-level orthogonality penalty. `current` are the `1 × d` prompts of
/// the current task, `past` the frozen prompts of earlier tasks.
pub fn ortho_first<F: Real>(
    g: &mut Graph<F>,
    current: &[Var],
    past: &[Tensor<f32>],
    raw: bool,
) -> Result<Var> {
    if current.is_empty() || past.is_empty() {
        return zero_scalar(g);
    }
    let cur = g.concat_rows(current)?;
    let refs: Vec<&Tensor<f32>> = past.iter().collect();
    let pst = g.constant(Tensor::concat_rows(&refs)?.cast())?;
    pairwise_overlap(g, cur, pst, raw)
}

/// Second-level orthogonality penalty averaged over `layers`. Each `Q_c` is
/// split into `layers` equal row blocks, each flattened to one vector.
pub fn ortho_second<F: Real>(
    g: &mut Graph<F>,
    current: &[Var],
    past: &[Tensor<f32>],
    layers: usize,
    raw: bool,
) -> Result<Var> {
    if current.is_empty() || past.is_empty() {
        return zero_scalar(g);
    }
    let (rows, cols) = g.value(current[0]).dims2();
    if rows % layers != 0 {
        return Err(Error::shape(
            "ortho_second",
            format!("{rows} rows not divisible by {layers} layers"),
        ));
    }
    let per = rows / layers;
    let mut total: Option<Var> = None;
    for l in 0..layers {
        let cur_rows = current
            .iter()
            .map(|q| {
                let s = g.slice_rows(*q, l * per, per)?;
                g.reshape(s, &[1, per * cols])
            })
            .collect::<Result<Vec<_>>>()?;
        let cur = g.concat_rows(&cur_rows)?;
        let mut flat = Vec::with_capacity(past.len() * per * cols);
        for q in past {
            flat.extend(q.slice_rows(l * per, per)?.into_data());
        }
        let pst = g.constant(Tensor::new(&[past.len(), per * cols], flat)?.cast())?;
        let term = pairwise_overlap(g, cur, pst, raw)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    g.scale(total.expect("layers >= 1"), 1.0 / layers as f64)
}

/// Synthetic replay set: `n` draws per class in `classes` order.
pub fn replay_set(
    bank: &MogBank,
    classes: &[ClassId],
    n: usize,
    rng: &mut Rng,
) -> Result<(Tensor<f32>, Vec<ClassId>)> {
    let (rows, labels) = bank.sample_classes(classes, n, rng)?;
    let dim = rows.first().map(|r| r.len()).ok_or(Error::EmptySamples)?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok((Tensor::from_f64(&[labels.len(), dim], &flat)?, labels))
}

/// First-stage replay loss on pre-drawn synthetic queries: cross-entropy with
/// the denominator over every key in `keys`.
pub fn gr_loss_first_on<F: Real>(
    g: &mut Graph<F>,
    keys: Var,
    key_classes: &[ClassId],
    z: Var,
    labels: &[ClassId],
    tau: f64,
) -> Result<Var> {
    ce_stage1(g, keys, key_classes, z, labels, tau)
}

/// First-stage replay loss: `n` draws from each class's mixture, denominator
/// over all seen classes.
pub fn gr_loss_first<F: Real>(
    g: &mut Graph<F>,
    keys: Var,
    key_classes: &[ClassId],
    bank: &MogBank,
    n: usize,
    tau: f64,
    rng: &mut Rng,
) -> Result<Var> {
    let (z, labels) = replay_set(bank, key_classes, n, rng)?;
    let zv = g.constant(z.cast())?;
    gr_loss_first_on(g, keys, key_classes, zv, &labels, tau)
}

/// Second-stage replay loss on pre-drawn synthetic CLS features, with the
/// logits of every head concatenated.
pub fn gr_loss_second_on<F: Real>(
    g: &mut Graph<F>,
    heads: &ClassifierHeads,
    vars: &[HeadVars],
    x: Var,
    labels: &[ClassId],
) -> Result<Var> {
    let targets = label_positions(&heads.all_classes(), labels)?;
    let logits = all_head_logits(g, vars, x)?;
    g.cross_entropy(logits, &targets)
}

/// Second-stage replay loss: `n` draws per seen class.
pub fn gr_loss_second<F: Real>(
    g: &mut Graph<F>,
    heads: &ClassifierHeads,
    vars: &[HeadVars],
    bank: &MogBank,
    n: usize,
    rng: &mut Rng,
) -> Result<Var> {
    let (x, labels) = replay_set(bank, &heads.all_classes(), n, rng)?;
    let xv = g.constant(x.cast())?;
    gr_loss_second_on(g, heads, vars, xv, &labels)
}

#[cfg(test)]
mod tests;
