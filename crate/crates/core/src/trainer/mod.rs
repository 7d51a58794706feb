//! Per-task two-stage training with generative replay, inference and
//! checkpoints.

mod hyperparams;
mod stream;
mod variant;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub use hyperparams::{Hyperparams, HYPERPARAM_KEYS, PRESETS};
pub use stream::{Task, TaskStream};
pub use variant::{Variant, VariantFlags};

use crate::encoders::{
    build_stack, class_name_embed, synthetic_class_name, ClassNameEmbedding, Conditioning,
    EncoderConfig, FrozenStack, ResidualTarget,
};
use crate::error::{Error, Result};
use crate::mog::{fit_em, rows_of, CovarianceKind, EmConfig, MogBank};
use crate::objectives::{
    ce_stage1, ce_stage2, gr_loss_second_on, ortho_first, ortho_second, replay_set, ClassifierHeads,
};
use crate::prompts::{
    build_residual_graph, compute_keys, prefix_tuning_condition, select, similarity_graph,
    ConditioningMode, PromptCodebooks, PrototypeKeys, Selection, SimilarityMode,
};
use crate::rng::Rng;
use crate::tensor::{AdamConfig, AdamState, Gradients, Graph, Tensor, Var};
use crate::ClassId;

/// Context token standing in for a hand-written text prompt.
pub const CONTEXT_PROMPT: &str = "a photo of a";

/// Key/value tokens per layer in the prefix-tuning ablation.
pub const DEFAULT_PREFIX_TOKENS: usize = 5;

/// Seeds of the three default repetitions.
pub const DEFAULT_SEEDS: [u64; 3] = [1993, 1996, 1997];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub hp: Hyperparams,
    pub variant: Variant,
    pub similarity: SimilarityMode,
    /// Raw inner products in the orthogonality penalties.
    pub raw_ortho: bool,
    pub covariance: CovarianceKind,
    pub prefix_tokens: usize,
    /// Seed of the training randomness (prompt init, shuffling, replay draws).
    pub seed: u64,
    /// Seed of the frozen encoder weights.
    pub encoder_seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            hp: Hyperparams::default(),
            variant: Variant::Full,
            similarity: SimilarityMode::Weighted,
            raw_ortho: false,
            covariance: CovarianceKind::Diagonal,
            prefix_tokens: DEFAULT_PREFIX_TOKENS,
            seed: DEFAULT_SEEDS[0],
            encoder_seed: 0,
        }
    }
}

/// Losses and diagnostics of one `train_task` call. Loss vectors hold one
/// mean per epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub stage1_main: Vec<f64>,
    pub stage1_replay: Vec<f64>,
    pub stage2_main: Vec<f64>,
    pub stage2_replay: Vec<f64>,
    /// Head-`t` accuracy on the task's training set after the stage-2 main loop.
    pub stage2_train_accuracy: Option<f64>,
    /// Components of every mixture fitted during the task.
    pub mixture_components: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: ClassId,
    /// Concatenated head logits (or key posteriors' logits without stage 2).
    pub logits: Vec<f64>,
    pub selection: Selection,
}

/// Algorithm state across the task stream.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainerConfig,
    pub stack: FrozenStack<f32>,
    pub names: BTreeMap<ClassId, ClassNameEmbedding>,
    pub books: PromptCodebooks,
    pub keys: Option<PrototypeKeys>,
    pub heads: ClassifierHeads,
    pub mog_first: MogBank,
    pub mog_second: MogBank,
    tasks_done: usize,
}

fn concat(rows: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    Tensor::concat_rows(rows)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fresh per-epoch schedule of minibatches over `n` items.
fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    rng.permutation(n)
        .chunks(batch)
        .map(<[usize]>::to_vec)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Adam update of the tensors in `params` whose graph leaf was reached.
fn step_reached(
    adam: &mut AdamState,
    grads: &Gradients<f32>,
    params: Vec<(String, &mut Tensor<f32>, Var)>,
) -> Result<()> {
    let mut kept: Vec<(String, &mut Tensor<f32>, &Tensor<f32>)> = params
        .into_iter()
        .filter(|(_, _, v)| grads.reached(*v))
        .map(|(name, t, v)| (name, t, grads.of(v)))
        .collect();
    let mut updates: Vec<(&str, &mut Tensor<f32>, &Tensor<f32>)> = kept
        .iter_mut()
        .map(|(n, t, g)| (n.as_str(), &mut **t, *g))
        .collect();
    if updates.is_empty() {
        return Ok(());
    }
    adam.step(&mut updates)
}

impl Trainer {
    pub fn new(encoder: &EncoderConfig, config: TrainerConfig) -> Result<Self> {
        let stack = build_stack(encoder, config.encoder_seed)?;
        Self::with_stack(stack, config)
    }

    pub fn with_stack(stack: FrozenStack<f32>, config: TrainerConfig) -> Result<Self> {
        config.hp.validate()?;
        let cfg = &stack.config;
        let mode = match config.variant {
            Variant::PrefixTuning => {
                if config.prefix_tokens == 0 {
                    return Err(Error::Config("prefix_tokens must be >= 1".into()));
                }
                ConditioningMode::Prefix {
                    tokens: config.prefix_tokens,
                }
            }
            _ => ConditioningMode::Residual,
        };
        let books = PromptCodebooks::new(cfg.d, cfg.d_prime, cfg.layers, mode)?;
        let heads = ClassifierHeads::new(cfg.d_prime);
        Ok(Self {
            config,
            stack,
            names: BTreeMap::new(),
            books,
            keys: None,
            heads,
            mog_first: MogBank::default(),
            mog_second: MogBank::default(),
            tasks_done: 0,
        })
    }

    /// Number of tasks trained so far.
    pub fn tasks_done(&self) -> usize {
        self.tasks_done
    }

    fn task_rng(&self, task: usize) -> Rng {
        Rng::new(self.config.seed).fork(task as u64)
    }

    /// Separate stream for mixture seeds so that skipping the fits leaves
    /// every other draw unchanged.
    fn mixture_rng(&self, task: usize) -> Rng {
        Rng::new(self.config.seed).fork((1 << 32) + task as u64)
    }

    fn em_config(&self, rng: &mut Rng) -> EmConfig {
        EmConfig {
            components: if self.config.variant == Variant::Unimodal {
                1
            } else {
                self.config.hp.components
            },
            seed: rng.next_u64(),
            covariance: self.config.covariance,
            ..EmConfig::default()
        }
    }

    /// Runs both stages on `task`, then freezes its prompts.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskReport> {
        if task.index != self.tasks_done {
            return Err(Error::OutOfOrderTask {
                expected: self.tasks_done,
                got: task.index,
            });
        }
        task.validate()?;
        let t = task.index;
        let mut rng = self.task_rng(t);
        let mut em_rng = self.mixture_rng(t);
        for &c in &task.classes {
            let emb = class_name_embed(&synthetic_class_name(c), &self.stack.config)?;
            self.names.insert(c, emb);
        }
        self.books.extend(&task.classes, t, &mut rng)?;
        let z = task
            .train_x
            .iter()
            .map(|x| self.stack.vision_encode(x))
            .collect::<Result<Vec<_>>>()?;

        let mut report = TaskReport {
            task: t,
            ..TaskReport::default()
        };
        let variant = self.config.variant;
        if variant.learns_first_level() {
            report.stage1_main = self.stage1_main(task, &z, &mut rng)?;
            if variant.replay() {
                self.fit_mixtures(task, &z, true, &mut em_rng, &mut report)?;
                report.stage1_replay = self.stage1_replay(&mut rng)?;
            }
        }
        self.refresh_keys(t)?;

        if variant.has_second_stage() {
            self.heads.add_task(t, &task.classes)?;
            report.stage2_main = self.stage2_main(task, &z, &mut rng)?;
            let feats = task
                .train_x
                .iter()
                .zip(&z)
                .map(|(x, zi)| Ok(self.condition_forward(x, zi)?.1))
                .collect::<Result<Vec<_>>>()?;
            report.stage2_train_accuracy = Some(self.head_accuracy(t, &feats, &task.train_y)?);
            if variant.replay() {
                self.fit_mixtures(task, &feats, false, &mut em_rng, &mut report)?;
                report.stage2_replay = self.stage2_replay(&mut rng)?;
            }
        }
        self.books.freeze_all();
        self.tasks_done += 1;
        Ok(report)
    }

    fn fit_mixtures(
        &mut self,
        task: &Task,
        feats: &[Tensor<f32>],
        first: bool,
        rng: &mut Rng,
        report: &mut TaskReport,
    ) -> Result<()> {
        for &c in &task.classes {
            let rows: Vec<&Tensor<f32>> = feats
                .iter()
                .zip(&task.train_y)
                .filter(|(_, y)| **y == c)
                .map(|(f, _)| f)
                .collect();
            if rows.is_empty() {
                return Err(Error::EmptySamples);
            }
            let samples = rows_of(&concat(&rows)?);
            let fit = fit_em(&samples, &self.em_config(rng))?;
            report.mixture_components.push(fit.mog.components());
            if first {
                self.mog_first.insert(c, fit.mog);
            } else {
                self.mog_second.insert(c, fit.mog);
            }
        }
        Ok(())
    }

    fn stage1_main(&mut self, task: &Task, z: &[Tensor<f32>], rng: &mut Rng) -> Result<Vec<f64>> {
        let t = task.index;
        let cur = self.books.task_indices(t);
        let classes: Vec<ClassId> = cur.iter().map(|&i| self.books.classes()[i]).collect();
        let past: Vec<Tensor<f32>> = self
            .books
            .past_indices(t)
            .into_iter()
            .map(|i| self.books.first.prompts[i].clone())
            .collect();
        let hp = self.config.hp.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr_stage1));
        let mut history = Vec::with_capacity(hp.e1);
        for _ in 0..hp.e1 {
            let mut losses = Vec::new();
            for batch in minibatches(z.len(), hp.batch_size, rng) {
                let mut g = Graph::<f32>::new();
                let pvars = cur
                    .iter()
                    .map(|&i| g.param(self.books.first.prompts[i].clone()))
                    .collect::<Result<Vec<_>>>()?;
                let keys = cur
                    .iter()
                    .zip(&pvars)
                    .map(|(&i, &p)| {
                        let name = &self.names[&self.books.classes()[i]];
                        self.stack.text_encode_graph(&mut g, p, name)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let kv = g.concat_rows(&keys)?;
                let zb = concat(&batch.iter().map(|&j| &z[j]).collect::<Vec<_>>())?;
                let zv = g.constant(zb)?;
                let labels: Vec<ClassId> = batch.iter().map(|&j| task.train_y[j]).collect();
                let ce = ce_stage1(&mut g, kv, &classes, zv, &labels, self.stack.config.tau)?;
                let op = ortho_first(&mut g, &pvars, &past, self.config.raw_ortho)?;
                let op = g.scale(op, hp.lambda_stage1)?;
                let loss = g.add(ce, op)?;
                losses.push(g.scalar(loss));
                let grads = g.backward(loss)?;
                self.step_prompts(&mut adam, &grads, &cur, &pvars)?;
            }
            history.push(mean(&losses));
        }
        Ok(history)
    }

    fn step_prompts(
        &mut self,
        adam: &mut AdamState,
        grads: &Gradients<f32>,
        idx: &[usize],
        vars: &[Var],
    ) -> Result<()> {
        let classes = self.books.classes().to_vec();
        let params = self
            .books
            .first
            .prompts
            .iter_mut()
            .enumerate()
            .filter_map(|(i, p)| {
                idx.iter()
                    .position(|&k| k == i)
                    .map(|pos| (format!("p/{}", classes[i]), p, vars[pos]))
            })
            .collect();
        step_reached(adam, grads, params)
    }

    fn stage1_replay(&mut self, rng: &mut Rng) -> Result<Vec<f64>> {
        let t = self.tasks_done;
        let seen = self.books.classes().to_vec();
        let cur = self.books.task_indices(t);
        let cached = self.keys.clone();
        let hp = self.config.hp.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr_stage1));
        let mut history = Vec::with_capacity(hp.e2);
        for _ in 0..hp.e2 {
            let (zs, labels) = replay_set(&self.mog_first, &seen, hp.n_replay, rng)?;
            let mut losses = Vec::new();
            for batch in minibatches(labels.len(), hp.batch_size, rng) {
                let mut g = Graph::<f32>::new();
                let mut pvars = Vec::with_capacity(cur.len());
                let mut rows = Vec::with_capacity(seen.len());
                for (i, c) in seen.iter().enumerate() {
                    if cur.contains(&i) {
                        let p = g.param(self.books.first.prompts[i].clone())?;
                        pvars.push(p);
                        rows.push(self.stack.text_encode_graph(&mut g, p, &self.names[c])?);
                    } else {
                        let keys = cached.as_ref().ok_or(Error::EmptyKeys)?;
                        rows.push(g.constant(keys.keys.slice_rows(i, 1)?)?);
                    }
                }
                let kv = g.concat_rows(&rows)?;
                let zb = gather_rows(&zs, &batch)?;
                let zv = g.constant(zb)?;
                let lb: Vec<ClassId> = batch.iter().map(|&j| labels[j]).collect();
                let loss = ce_stage1(&mut g, kv, &seen, zv, &lb, self.stack.config.tau)?;
                losses.push(g.scalar(loss));
                let grads = g.backward(loss)?;
                self.step_prompts(&mut adam, &grads, &cur, &pvars)?;
            }
            history.push(mean(&losses));
        }
        Ok(history)
    }

    /// Recomputes every key from the (now final) prompts of tasks `..=t` and
    /// caches them.
    fn refresh_keys(&mut self, t: usize) -> Result<()> {
        let mut keys = if self.config.variant.learns_first_level() {
            compute_keys(&self.books, &self.stack, &self.names)?
        } else {
            self.context_keys()?
        };
        keys.cached_through = Some(t);
        self.keys = Some(keys);
        Ok(())
    }

    /// Keys from the fixed context token followed by each class name.
    pub fn context_keys(&self) -> Result<PrototypeKeys> {
        if self.books.is_empty() {
            return Err(Error::EmptyKeys);
        }
        let ctx = class_name_embed(CONTEXT_PROMPT, &self.stack.config)?.vector;
        let rows = self
            .books
            .classes()
            .iter()
            .map(|c| {
                let name = self.names.get(c).ok_or(Error::UnknownClass(*c))?;
                self.stack.text_encode(&ctx, name)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PrototypeKeys {
            classes: self.books.classes().to_vec(),
            keys: concat(&rows.iter().collect::<Vec<_>>())?,
            cached_through: None,
        })
    }

    fn cached_keys(&self) -> Result<&PrototypeKeys> {
        self.keys.as_ref().ok_or(Error::Untrained)
    }

    /// Builds the conditioning of `x`'s selected class on `g`. Entries listed
    /// in `trainable` use the given leaves, everything else enters as
    /// constants.
    fn condition_graph(
        &self,
        g: &mut Graph<f32>,
        sel: &Selection,
        z: &Tensor<f32>,
        trainable: &BTreeMap<usize, (Var, Var)>,
    ) -> Result<Conditioning> {
        let idx = sel.index;
        let (q, a) = match trainable.get(&idx) {
            Some(&(q, a)) => (q, Some(a)),
            None => (g.constant(self.books.second.q[idx].clone())?, None),
        };
        match self.books.mode() {
            ConditioningMode::Prefix { .. } => Ok(Conditioning::Prefix(prefix_tuning_condition(
                g,
                &self.books,
                q,
            )?)),
            ConditioningMode::Residual => {
                let no_conf = self.config.variant == Variant::NoConfidenceModulation;
                let r = if no_conf {
                    q
                } else {
                    let a = match a {
                        Some(a) => a,
                        None => g.constant(self.books.second.a[idx].clone())?,
                    };
                    let zv = g.constant(z.clone())?;
                    let w = g.constant(self.cached_keys()?.keys.slice_rows(idx, 1)?)?;
                    let sim = similarity_graph(g, zv, a, w, self.config.similarity)?;
                    build_residual_graph(g, q, sim, false)?
                };
                Ok(Conditioning::Residual(r))
            }
        }
    }

    fn stage2_main(&mut self, task: &Task, z: &[Tensor<f32>], rng: &mut Rng) -> Result<Vec<f64>> {
        let t = task.index;
        let cur = self.books.task_indices(t);
        let past: Vec<Tensor<f32>> = self
            .books
            .past_indices(t)
            .into_iter()
            .map(|i| self.books.second.q[i].clone())
            .collect();
        let hp = self.config.hp.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr_stage2));
        let mut history = Vec::with_capacity(hp.e1);
        for _ in 0..hp.e1 {
            let mut losses = Vec::new();
            for batch in minibatches(z.len(), hp.batch_size, rng) {
                let mut g = Graph::<f32>::new();
                let head_vars = self.heads.to_graph(&mut g, &[t])?;
                let mut leaves = BTreeMap::new();
                for &i in &cur {
                    let q = g.param(self.books.second.q[i].clone())?;
                    let a = g.param(self.books.second.a[i].clone())?;
                    leaves.insert(i, (q, a));
                }
                let keys = self.cached_keys()?;
                let mut cls = Vec::with_capacity(batch.len());
                for &j in &batch {
                    let sel = select(keys, &z[j], &self.books.second.a, self.config.similarity)?;
                    let cond = self.condition_graph(&mut g, &sel, &z[j], &leaves)?;
                    cls.push(
                        self.stack
                            .vit_forward_graph(&mut g, &task.train_x[j], &cond)?,
                    );
                }
                let x = g.concat_rows(&cls)?;
                let labels: Vec<ClassId> = batch.iter().map(|&j| task.train_y[j]).collect();
                let ce = ce_stage2(&mut g, &self.heads, &head_vars, x, &labels, t)?;
                let qs: Vec<Var> = cur.iter().map(|i| leaves[i].0).collect();
                let oq =
                    ortho_second(&mut g, &qs, &past, self.books.layers, self.config.raw_ortho)?;
                let oq = g.scale(oq, hp.lambda_stage2)?;
                let loss = g.add(ce, oq)?;
                losses.push(g.scalar(loss));
                let grads = g.backward(loss)?;

                let classes = self.books.classes().to_vec();
                let mut params = Vec::new();
                let second = &mut self.books.second;
                for (i, (q, a)) in second.q.iter_mut().zip(second.a.iter_mut()).enumerate() {
                    if let Some(&(qv, av)) = leaves.get(&i) {
                        params.push((format!("q/{}", classes[i]), q, qv));
                        params.push((format!("a/{}", classes[i]), a, av));
                    }
                }
                let head = &mut self.heads.heads[t];
                params.push((format!("head{t}/w"), &mut head.weight, head_vars[t].weight));
                params.push((format!("head{t}/b"), &mut head.bias, head_vars[t].bias));
                step_reached(&mut adam, &grads, params)?;
            }
            history.push(mean(&losses));
        }
        Ok(history)
    }

    fn stage2_replay(&mut self, rng: &mut Rng) -> Result<Vec<f64>> {
        let all = self.heads.all_classes();
        let tasks: Vec<usize> = (0..self.heads.len()).collect();
        let hp = self.config.hp.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(hp.lr_stage2));
        let mut history = Vec::with_capacity(hp.e2);
        for _ in 0..hp.e2 {
            let (xs, labels) = replay_set(&self.mog_second, &all, hp.n_replay, rng)?;
            let mut losses = Vec::new();
            for batch in minibatches(labels.len(), hp.batch_size, rng) {
                let mut g = Graph::<f32>::new();
                let vars = self.heads.to_graph(&mut g, &tasks)?;
                let xv = g.constant(gather_rows(&xs, &batch)?)?;
                let lb: Vec<ClassId> = batch.iter().map(|&j| labels[j]).collect();
                let loss = gr_loss_second_on(&mut g, &self.heads, &vars, xv, &lb)?;
                losses.push(g.scalar(loss));
                let grads = g.backward(loss)?;
                let mut params = Vec::new();
                for (h, v) in self.heads.heads.iter_mut().zip(&vars) {
                    params.push((format!("head{}/w", h.task), &mut h.weight, v.weight));
                    params.push((format!("head{}/b", h.task), &mut h.bias, v.bias));
                }
                step_reached(&mut adam, &grads, params)?;
            }
            history.push(mean(&losses));
        }
        Ok(history)
    }

    fn head_accuracy(&self, task: usize, feats: &[Tensor<f32>], labels: &[ClassId]) -> Result<f64> {
        let head = self.heads.head(task)?;
        let mut g = Graph::<f32>::new();
        let vars = self.heads.to_graph(&mut g, &[])?;
        let x = g.constant(concat(&feats.iter().collect::<Vec<_>>())?)?;
        let logits = crate::objectives::head_logits(&mut g, vars[task], x)?;
        let lv = g.value(logits);
        let hits = (0..lv.rows())
            .filter(|&r| head.classes[argmax(&lv.row_f64(r))] == labels[r])
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    /// Prompt selection for input `x`.
    pub fn retrieve(&self, x: &Tensor<f32>) -> Result<Selection> {
        let z = self.stack.vision_encode(x)?;
        select(
            self.cached_keys()?,
            &z,
            &self.books.second.a,
            self.config.similarity,
        )
    }

    /// Selection and conditioned CLS feature of `x` given its query `z`.
    fn condition_forward(
        &self,
        x: &Tensor<f32>,
        z: &Tensor<f32>,
    ) -> Result<(Selection, Tensor<f32>)> {
        let sel = select(
            self.cached_keys()?,
            z,
            &self.books.second.a,
            self.config.similarity,
        )?;
        let mut g = Graph::<f32>::new();
        let cond = self.condition_graph(&mut g, &sel, z, &BTreeMap::new())?;
        let out = self.stack.vit_forward_graph(&mut g, x, &cond)?;
        Ok((sel, g.value(out).clone()))
    }

    /// Class-incremental prediction: no task identity is used.
    pub fn predict(&self, x: &Tensor<f32>) -> Result<Prediction> {
        if self.tasks_done == 0 {
            return Err(Error::Untrained);
        }
        let z = self.stack.vision_encode(x)?;
        if !self.config.variant.has_second_stage() {
            let keys = self.cached_keys()?;
            let selection = select(keys, &z, &self.books.second.a, self.config.similarity)?;
            let zv = z.to_f64_vec();
            let tau = self.stack.config.tau;
            let logits: Vec<f64> = (0..keys.len())
                .map(|i| keys.key(i).iter().zip(&zv).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect();
            let class = keys.classes[argmax(&logits)];
            return Ok(Prediction {
                class,
                logits,
                selection,
            });
        }
        let (selection, cls) = self.condition_forward(x, &z)?;
        let logits = self.heads.logits(&cls)?.to_f64_vec();
        let class = self.heads.all_classes()[argmax(&logits)];
        Ok(Prediction {
            class,
            logits,
            selection,
        })
    }

    /// Fraction of `xs` predicted as their label.
    pub fn accuracy(&self, xs: &[Tensor<f32>], ys: &[ClassId]) -> Result<f64> {
        if xs.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for (x, &y) in xs.iter().zip(ys) {
            if self.predict(x)?.class == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / xs.len() as f64)
    }

    /// `(class, SHA-256 of p_c, Q_c, A_c)` for every codebook entry.
    pub fn prompt_hashes(&self) -> Vec<(ClassId, String)> {
        (0..self.books.len())
            .map(|i| (self.books.classes()[i], self.books.entry_hash(i)))
            .collect()
    }

    /// Writes the codebooks, heads, both mixture banks and a `meta.txt`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.books.save(dir.join("codebooks.bin"))?;
        self.heads.save(dir.join("heads.bin"))?;
        self.mog_first.save(dir.join("mog_first.bin"))?;
        self.mog_second.save(dir.join("mog_second.bin"))?;
        let meta_path = dir.join("meta.txt");
        fs::write(&meta_path, self.meta()).map_err(|e| Error::io(&meta_path, e))
    }

    fn meta(&self) -> String {
        let c = &self.config;
        let e = &self.stack.config;
        let mut lines = vec![
            ("format", "starprompt-checkpoint-1".to_string()),
            ("tasks_done", self.tasks_done.to_string()),
            ("seed", c.seed.to_string()),
            ("encoder_seed", c.encoder_seed.to_string()),
            ("variant", c.variant.name().to_string()),
            ("similarity", similarity_name(c.similarity).to_string()),
            ("raw_ortho", c.raw_ortho.to_string()),
            ("covariance", covariance_name(c.covariance).to_string()),
            ("prefix_tokens", c.prefix_tokens.to_string()),
        ];
        lines.extend(c.hp.to_pairs());
        lines.extend(encoder_pairs(e));
        lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Restores a trainer written by [`Trainer::save`]. Frozen weights are
    /// rebuilt from the recorded encoder seed and checked against the
    /// codebook dimensions.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.txt");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let kv = parse_pairs(&text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("meta.txt lacks `{k}`")))
        };
        if get("format")? != "starprompt-checkpoint-1" {
            return Err(Error::Format("unsupported checkpoint format".into()));
        }
        let mut hp = Hyperparams::default();
        for k in HYPERPARAM_KEYS {
            hp.set(k, get(k)?)?;
        }
        let mut enc = EncoderConfig::default();
        for (k, _) in encoder_pairs(&enc.clone()) {
            set_encoder(&mut enc, k, get(k)?)?;
        }
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad `{k}`")))
        };
        let config = TrainerConfig {
            hp,
            variant: get("variant")?.parse()?,
            similarity: parse_similarity(get("similarity")?)?,
            raw_ortho: get("raw_ortho")? == "true",
            covariance: parse_covariance(get("covariance")?)?,
            prefix_tokens: num("prefix_tokens")? as usize,
            seed: num("seed")?,
            encoder_seed: num("encoder_seed")?,
        };
        let mut trainer = Self::new(&enc, config)?;
        let books = PromptCodebooks::load(dir.join("codebooks.bin"))?;
        if (books.d, books.d_prime, books.layers, books.mode())
            != (enc.d, enc.d_prime, enc.layers, trainer.books.mode())
        {
            return Err(Error::Format(
                "codebooks do not match the recorded encoder".into(),
            ));
        }
        trainer.books = books;
        trainer.heads = ClassifierHeads::load(dir.join("heads.bin"))?;
        trainer.mog_first = MogBank::load(dir.join("mog_first.bin"))?;
        trainer.mog_second = MogBank::load(dir.join("mog_second.bin"))?;
        trainer.tasks_done = num("tasks_done")? as usize;
        for &c in trainer.books.classes() {
            let emb = class_name_embed(&synthetic_class_name(c), &enc)?;
            trainer.names.insert(c, emb);
        }
        if trainer.tasks_done > 0 {
            trainer.refresh_keys(trainer.tasks_done - 1)?;
        }
        Ok(trainer)
    }
}

fn gather_rows(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let cols = t.cols();
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &r in idx {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    Tensor::new(&[idx.len(), cols], data)
}

pub fn similarity_name(m: SimilarityMode) -> &'static str {
    match m {
        SimilarityMode::Weighted => "weighted",
        SimilarityMode::WeightedRaw => "weighted_raw",
        SimilarityMode::Unweighted => "unweighted",
    }
}

pub fn parse_similarity(s: &str) -> Result<SimilarityMode> {
    match s {
        "weighted" => Ok(SimilarityMode::Weighted),
        "weighted_raw" => Ok(SimilarityMode::WeightedRaw),
        "unweighted" => Ok(SimilarityMode::Unweighted),
        _ => Err(Error::Config(format!("unknown similarity mode `{s}`"))),
    }
}

pub fn covariance_name(c: CovarianceKind) -> &'static str {
    match c {
        CovarianceKind::Diagonal => "diagonal",
        CovarianceKind::Full => "full",
    }
}

pub fn parse_covariance(s: &str) -> Result<CovarianceKind> {
    match s {
        "diagonal" => Ok(CovarianceKind::Diagonal),
        "full" => Ok(CovarianceKind::Full),
        _ => Err(Error::Config(format!("unknown covariance kind `{s}`"))),
    }
}

/// Encoder settings as `key=value` pairs (keys prefixed `encoder.`).
pub fn encoder_pairs(e: &EncoderConfig) -> Vec<(&'static str, String)> {
    vec![
        ("encoder.d", e.d.to_string()),
        ("encoder.d_prime", e.d_prime.to_string()),
        ("encoder.layers", e.layers.to_string()),
        ("encoder.heads", e.heads.to_string()),
        ("encoder.seq_len", e.seq_len.to_string()),
        ("encoder.patch_dim", e.patch_dim.to_string()),
        ("encoder.tau", e.tau.to_string()),
        ("encoder.text_layers", e.text_layers.to_string()),
        ("encoder.text_heads", e.text_heads.to_string()),
        ("encoder.vision_layers", e.vision_layers.to_string()),
        (
            "encoder.residual_target",
            match e.residual_target {
                ResidualTarget::AllTokens => "all_tokens",
                ResidualTarget::ClsOnly => "cls_only",
            }
            .to_string(),
        ),
    ]
}

/// Sets one `encoder.*` key. Returns `Ok(false)` for an unknown key.
pub fn set_encoder(e: &mut EncoderConfig, key: &str, value: &str) -> Result<bool> {
    let bad = || Error::Config(format!("{key}: invalid value `{value}`"));
    let int = || value.trim().parse::<usize>().map_err(|_| bad());
    match key {
        "encoder.d" => e.d = int()?,
        "encoder.d_prime" => e.d_prime = int()?,
        "encoder.layers" => e.layers = int()?,
        "encoder.heads" => e.heads = int()?,
        "encoder.seq_len" => e.seq_len = int()?,
        "encoder.patch_dim" => e.patch_dim = int()?,
        "encoder.tau" => e.tau = value.trim().parse().map_err(|_| bad())?,
        "encoder.text_layers" => e.text_layers = int()?,
        "encoder.text_heads" => e.text_heads = int()?,
        "encoder.vision_layers" => e.vision_layers = int()?,
        "encoder.residual_target" => {
            e.residual_target = match value.trim() {
                "all_tokens" => ResidualTarget::AllTokens,
                "cls_only" => ResidualTarget::ClsOnly,
                _ => return Err(bad()),
            }
        }
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("line {}: expected key=value, got `{line}`", n + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
