//! Config-driven multi-seed experiments, ablations and retrieval diagnostics.
//!
//! # Config format
//!
//! Flat `key = value` lines (`#` starts a comment), or a JSON object with the
//! same keys (nested objects are flattened with dots, arrays of seeds are
//! accepted). Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `scenario.kind` | `separable` | `separable`, `bimodal` or `feature_file` |
//! | `scenario.tasks` | 5 | number of tasks T |
//! | `scenario.classes_per_task` | 4 | classes per task N |
//! | `scenario.train_per_class` | 16 | training samples per class |
//! | `scenario.test_per_class` | 8 | test samples per class |
//! | `scenario.separation` | 3 | scale of the class centres |
//! | `scenario.noise` | 1 | sample noise around a centre |
//! | `scenario.seed` | 7 | data seed |
//! | `scenario.train_file`, `scenario.test_file` | | feature files for `feature_file` |
//! | `preset` | `desk` | named schedule, applied before any override below |
//! | `e1`, `e2`, `lambda_stage1`, `lr_stage1`, `lambda_stage2`, `lr_stage2`, `components`, `n_replay`, `batch_size` | preset | schedule overrides |
//! | `variant` | `full` | `full`, `first_level_only`, `no_first_level`, `prefix_tuning`, `no_replay`, `unimodal`, `no_conf_mod` |
//! | `similarity` | `weighted` | `weighted`, `weighted_raw`, `unweighted` |
//! | `raw_ortho` | `false` | raw instead of absolute normalised inner products |
//! | `covariance` | `diagonal` | `diagonal` or `full` |
//! | `prefix_tokens` | 5 | key/value tokens per layer for `prefix_tuning` |
//! | `seeds` | `1993,1996,1997` | comma-separated run seeds |
//! | `shuffle_classes` | `true` | permute the class order per seed |
//! | `encoder_seed` | 0 | seed of the frozen encoders |
//! | `encoder.d`, `encoder.d_prime`, `encoder.layers`, `encoder.heads`, `encoder.seq_len`, `encoder.patch_dim`, `encoder.tau`, `encoder.text_layers`, `encoder.text_heads`, `encoder.vision_layers`, `encoder.residual_target` | see `EncoderConfig` | frozen encoder shape |
//! | `out` | none | output directory |
//! | `checkpoints` | `true` | save the final trainer state per seed under `out` |

use std::fs;
use std::path::{Path, PathBuf};

use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{
    faa, final_forgetting, mean_std, retrieval_confusion, AccuracyMatrix, PredictionRecord,
    RetrievalConfusion,
};
use crate::mog::CovarianceKind;
use crate::prompts::SimilarityMode;
use crate::report::{write_run, write_text, Aggregate, SeedArtifacts, SeedSummary, Summary};
use crate::scenario::{Scenario, ScenarioKind, ScenarioSpec};
use crate::trainer::{
    parse_covariance, parse_pairs, parse_similarity, set_encoder, Hyperparams, TaskReport,
    TaskStream, Trainer, TrainerConfig, Variant, DEFAULT_PREFIX_TOKENS, DEFAULT_SEEDS,
};
use crate::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub encoder: EncoderConfig,
    pub preset: String,
    pub hp: Hyperparams,
    pub variant: Variant,
    pub similarity: SimilarityMode,
    pub raw_ortho: bool,
    pub covariance: CovarianceKind,
    pub prefix_tokens: usize,
    pub seeds: Vec<u64>,
    pub shuffle_classes: bool,
    pub encoder_seed: u64,
    pub out: Option<PathBuf>,
    pub checkpoints: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            encoder: EncoderConfig::default(),
            preset: "desk".into(),
            hp: Hyperparams::desk(),
            variant: Variant::Full,
            similarity: SimilarityMode::Weighted,
            raw_ortho: false,
            covariance: CovarianceKind::Diagonal,
            prefix_tokens: DEFAULT_PREFIX_TOKENS,
            seeds: DEFAULT_SEEDS.to_vec(),
            shuffle_classes: true,
            encoder_seed: 0,
            out: None,
            checkpoints: true,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got `{v}`"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: invalid value `{v}`")))
}

/// Flattens a JSON object into dotted `key=value` pairs.
fn flatten_json(
    prefix: &str,
    v: &serde_json::Value,
    out: &mut Vec<(String, String)>,
) -> Result<()> {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten_json(&key, child, out)?;
            }
        }
        Value::Array(items) => {
            let parts = items
                .iter()
                .map(|i| match i {
                    Value::String(s) => Ok(s.clone()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(Error::Config(format!(
                        "{prefix}: arrays may only hold numbers or strings"
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            out.push((prefix.to_string(), parts.join(",")));
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Number(n) => out.push((prefix.to_string(), n.to_string())),
        Value::Bool(b) => out.push((prefix.to_string(), b.to_string())),
        Value::Null => {
            return Err(Error::Config(format!(
                "{prefix}: null is not a valid value"
            )))
        }
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses flat `key=value` text or a JSON object.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, &[])
    }

    /// Like [`parse`](Self::parse), with `overrides` applied after the file's
    /// own keys. An overriding `preset` replaces the file's preset but keeps
    /// its explicit schedule keys.
    pub fn parse_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = if text.trim_start().starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| Error::Config(format!("invalid JSON config: {e}")))?;
            let mut out = Vec::new();
            flatten_json("", &v, &mut out)?;
            out
        } else {
            parse_pairs(text)?.into_iter().collect()
        };
        pairs.extend(overrides.iter().cloned());
        let mut cfg = Self::default();
        if let Some((_, p)) = pairs.iter().rev().find(|(k, _)| k == "preset") {
            cfg.set("preset", p)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_file_with(path, &[])
    }

    pub fn from_file_with(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_with(&text, overrides)
            .map_err(|e| e.context(format!("config {}", path.display())))
    }

    /// Applies one setting. `preset` replaces the whole schedule.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let s = &mut self.scenario;
        match key {
            "preset" => {
                self.hp = Hyperparams::preset(v)?;
                self.preset = v.to_string();
            }
            "scenario.kind" => {
                s.kind = match v {
                    "separable" => ScenarioKind::Separable,
                    "bimodal" => ScenarioKind::Bimodal,
                    "feature_file" => ScenarioKind::FeatureFiles {
                        train: PathBuf::new(),
                        test: PathBuf::new(),
                    },
                    _ => return Err(Error::Config(format!("unknown scenario kind `{v}`"))),
                }
            }
            "scenario.train_file" | "scenario.test_file" => {
                let ScenarioKind::FeatureFiles { train, test } = &mut s.kind else {
                    return Err(Error::Config(format!(
                        "{key} requires scenario.kind = feature_file (set it first)"
                    )));
                };
                *(if key == "scenario.train_file" {
                    train
                } else {
                    test
                }) = PathBuf::from(v);
            }
            "scenario.tasks" => s.num_tasks = parse_num(key, v)?,
            "scenario.classes_per_task" => s.classes_per_task = parse_num(key, v)?,
            "scenario.train_per_class" => s.train_per_class = parse_num(key, v)?,
            "scenario.test_per_class" => s.test_per_class = parse_num(key, v)?,
            "scenario.separation" => s.separation = parse_num(key, v)?,
            "scenario.noise" => s.noise = parse_num(key, v)?,
            "scenario.seed" => s.seed = parse_num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "similarity" => self.similarity = parse_similarity(v)?,
            "raw_ortho" => self.raw_ortho = parse_bool(key, v)?,
            "covariance" => self.covariance = parse_covariance(v)?,
            "prefix_tokens" => self.prefix_tokens = parse_num(key, v)?,
            "seeds" => {
                self.seeds = v
                    .split(',')
                    .map(|p| parse_num::<u64>(key, p.trim()))
                    .collect::<Result<Vec<_>>>()?;
            }
            "shuffle_classes" => self.shuffle_classes = parse_bool(key, v)?,
            "encoder_seed" => self.encoder_seed = parse_num(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "checkpoints" => self.checkpoints = parse_bool(key, v)?,
            _ => {
                if !self.hp.set(key, v)? && !set_encoder(&mut self.encoder, key, v)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if let ScenarioKind::FeatureFiles { train, test } = &self.scenario.kind {
            if train.as_os_str().is_empty() || test.as_os_str().is_empty() {
                return Err(Error::Config(
                    "feature_file scenarios need scenario.train_file and scenario.test_file".into(),
                ));
            }
        }
        self.scenario.validate()?;
        self.encoder.validate()?;
        self.hp.validate()
    }

    pub fn trainer_config(&self, seed: u64) -> TrainerConfig {
        TrainerConfig {
            hp: self.hp.clone(),
            variant: self.variant,
            similarity: self.similarity,
            raw_ortho: self.raw_ortho,
            covariance: self.covariance,
            prefix_tokens: self.prefix_tokens,
            seed,
            encoder_seed: self.encoder_seed,
        }
    }

    fn stream_for(&self, scenario: &Scenario, seed: u64) -> Result<TaskStream> {
        if self.shuffle_classes {
            scenario.shuffled_stream(seed)
        } else {
            scenario.natural_stream()
        }
    }
}

/// Everything measured for one seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub class_order: Vec<ClassId>,
    pub accuracy: AccuracyMatrix,
    pub confusions: Vec<RetrievalConfusion>,
    pub task_reports: Vec<TaskReport>,
    pub log: Vec<PredictionRecord>,
}

impl SeedRun {
    pub fn faa(&self) -> Result<f64> {
        faa(&self.accuracy)
    }

    /// Task-0 retrieval precision after every task.
    pub fn task1_precision(&self) -> Vec<f64> {
        self.confusions.iter().map(|c| c.matrix[0][0]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub summary: Summary,
    pub seeds: Vec<SeedRun>,
}

/// Progress callback: `(seed, task, report)` after every trained task.
pub type Progress<'a> = &'a mut dyn FnMut(u64, usize, &TaskReport);

/// Trains one seed over the whole stream, evaluating after every task.
pub fn run_seed(
    config: &ExperimentConfig,
    scenario: &Scenario,
    seed: u64,
    progress: Progress<'_>,
) -> Result<(SeedRun, Trainer)> {
    let stream = config.stream_for(scenario, seed)?;
    let mut trainer = Trainer::new(&config.encoder, config.trainer_config(seed))?;
    let mut log = Vec::new();
    let mut confusions = Vec::new();
    let mut task_reports = Vec::new();
    for task in &stream.tasks {
        let report = trainer
            .train_task(task)
            .map_err(|e| e.context(format!("seed {seed}, task {}", task.index)))?;
        progress(seed, task.index, &report);
        task_reports.push(report);
        for past in &stream.tasks[..=task.index] {
            for (x, &label) in past.test_x.iter().zip(&past.test_y) {
                log.push(PredictionRecord {
                    after_task: task.index,
                    task: past.index,
                    label,
                    predicted: trainer.predict(x)?.class,
                });
            }
        }
        confusions.push(retrieval_confusion(&trainer, &stream, task.index)?);
    }
    let accuracy = AccuracyMatrix::from_log(&log, stream.len())?;
    let class_order = stream
        .tasks
        .iter()
        .flat_map(|t| t.classes.iter().copied())
        .collect();
    Ok((
        SeedRun {
            seed,
            class_order,
            accuracy,
            confusions,
            task_reports,
            log,
        },
        trainer,
    ))
}

fn summarize(config: &ExperimentConfig, seeds: &[SeedRun]) -> Result<Summary> {
    let per_seed = seeds
        .iter()
        .map(|s| {
            let last = s.confusions.last().ok_or(Error::Untrained)?;
            Ok(SeedSummary {
                seed: s.seed,
                class_order: s.class_order.clone(),
                faa: faa(&s.accuracy)?,
                final_forgetting: final_forgetting(&s.accuracy).ok(),
                task1_retrieval_precision: s.task1_precision(),
                final_retrieval_min_diagonal: last
                    .diagonal()
                    .into_iter()
                    .fold(f64::INFINITY, f64::min),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let faas: Vec<f64> = per_seed.iter().map(|s| s.faa).collect();
    let ffs: Option<Vec<f64>> = per_seed.iter().map(|s| s.final_forgetting).collect();
    let agg = |v: &[f64]| {
        let (mean, std) = mean_std(v);
        Aggregate { mean, std }
    };
    Ok(Summary {
        variant: config.variant.name().to_string(),
        scenario: config.scenario.kind.name().to_string(),
        tasks: config.scenario.num_tasks,
        faa: agg(&faas),
        final_forgetting: ffs.map(|v| agg(&v)),
        seeds: per_seed,
    })
}

/// Runs every seed (in ascending order) and writes outputs when `out` is set.
pub fn run(config: &ExperimentConfig) -> Result<RunReport> {
    run_with_progress(config, &mut |_, _, _| {})
}

pub fn run_with_progress(config: &ExperimentConfig, progress: Progress<'_>) -> Result<RunReport> {
    config.validate()?;
    let scenario = Scenario::generate(&config.scenario, &config.encoder)
        .map_err(|e| e.context("generating scenario"))?;
    let mut seeds = config.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut runs = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let (run, trainer) = run_seed(config, &scenario, seed, progress)?;
        if let (Some(out), true) = (&config.out, config.checkpoints) {
            trainer.save(out.join(format!("checkpoint_seed{seed}")))?;
        }
        runs.push(run);
    }
    let summary = summarize(config, &runs)?;
    if let Some(out) = &config.out {
        let artifacts: Vec<SeedArtifacts<'_>> = runs
            .iter()
            .map(|r| SeedArtifacts {
                seed: r.seed,
                accuracy: &r.accuracy,
                confusions: &r.confusions,
            })
            .collect();
        write_run(out, &artifacts, &summary)?;
    }
    Ok(RunReport {
        summary,
        seeds: runs,
    })
}

/// One row of the ablation table.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub variant: Variant,
    pub summary: Summary,
}

/// Header of `ablation.csv`.
pub const ABLATION_HEADER: &str = "variant,label,faa_mean,faa_std,ff_mean,ff_std";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let (ff_mean, ff_std) = match &r.summary.final_forgetting {
            Some(a) => (format!("{:.6}", a.mean), format!("{:.6}", a.std)),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{ff_mean},{ff_std}\n",
            r.variant.name(),
            r.variant.label(),
            r.summary.faa.mean,
            r.summary.faa.std
        ));
    }
    out
}

/// Runs the full method and every ablation with the same scenario and seeds.
/// Each variant's outputs go to `out/<variant>/`, the table to
/// `out/ablation.csv`.
pub fn ablate(
    config: &ExperimentConfig,
    variants: &[Variant],
    progress: &mut dyn FnMut(Variant, u64, usize),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = config.clone();
        cfg.variant = variant;
        cfg.out = config.out.as_ref().map(|o| o.join(variant.name()));
        let report = run_with_progress(&cfg, &mut |seed, task, _| progress(variant, seed, task))
            .map_err(|e| e.context(format!("variant {variant}")))?;
        rows.push(AblationRow {
            variant,
            summary: report.summary,
        });
    }
    if let Some(out) = &config.out {
        write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    }
    Ok(rows)
}

/// Retrieval confusion of a saved trainer on the stream described by
/// `config` (dealt in the order the trainer's seed implies).
pub fn diag(checkpoint: impl AsRef<Path>, config: &ExperimentConfig) -> Result<RetrievalConfusion> {
    let checkpoint = checkpoint.as_ref();
    let trainer = Trainer::load(checkpoint)
        .map_err(|e| e.context(format!("checkpoint {}", checkpoint.display())))?;
    let done = trainer.tasks_done();
    if done == 0 {
        return Err(Error::Untrained);
    }
    let scenario = Scenario::generate(&config.scenario, &trainer.stack.config)?;
    let stream = config.stream_for(&scenario, trainer.config.seed)?;
    let order: Vec<ClassId> = stream
        .tasks
        .iter()
        .take(done)
        .flat_map(|t| t.classes.iter().copied())
        .collect();
    if order != trainer.books.classes() {
        return Err(Error::Config(
            "stream classes do not match the checkpoint; use the scenario and shuffle settings it was trained with".into(),
        ));
    }
    let c = retrieval_confusion(&trainer, &stream, done - 1)?;
    Ok(c)
}

/// Helper for writing a single confusion matrix (used by `diag`).
pub fn write_confusion(path: impl AsRef<Path>, c: &RetrievalConfusion) -> Result<()> {
    write_text(
        path.as_ref(),
        &crate::report::retrieval_csv(std::slice::from_ref(c)),
    )
}
