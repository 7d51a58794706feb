//! Synthetic class-incremental scenarios and feature-file ingestion.

use std::collections::BTreeSet;
use std::path::PathBuf;

use crate::encoders::{load_feature_file, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{Task, TaskStream};
use crate::ClassId;

#[derive(Clone, Debug, PartialEq)]
pub enum ScenarioKind {
    /// One Gaussian cluster per class.
    Separable,
    /// Two independent Gaussian clusters per class.
    Bimodal,
    /// Precomputed raw inputs; each row has `num_patches · patch_dim` values.
    FeatureFiles { train: PathBuf, test: PathBuf },
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Separable => "separable",
            Self::Bimodal => "bimodal",
            Self::FeatureFiles { .. } => "feature_file",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub kind: ScenarioKind,
    /// Scale of the cluster centres (per-coordinate standard deviation).
    pub separation: f64,
    /// Per-coordinate standard deviation of samples around their centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            num_tasks: 5,
            classes_per_task: 4,
            train_per_class: 16,
            test_per_class: 8,
            kind: ScenarioKind::Separable,
            separation: 3.0,
            noise: 1.0,
            seed: 7,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config(
                "num_tasks and classes_per_task must be >= 1".into(),
            ));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be >= 1".into()));
        }
        if !(self.separation >= 0.0
            && self.noise >= 0.0
            && self.separation.is_finite()
            && self.noise.is_finite())
        {
            return Err(Error::Config(
                "separation and noise must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

/// Samples of one class before they are assigned to a task.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassData {
    pub class: ClassId,
    pub train: Vec<Tensor<f32>>,
    pub test: Vec<Tensor<f32>>,
}

/// Every class of a scenario; [`Scenario::stream`] deals them into tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub classes_per_task: usize,
    pub classes: Vec<ClassData>,
}

fn draw(rng: &mut Rng, center: &[f64], noise: f64, shape: &[usize]) -> Result<Tensor<f32>> {
    let data: Vec<f64> = center.iter().map(|c| c + noise * rng.normal()).collect();
    Tensor::from_f64(shape, &data)
}

impl Scenario {
    pub fn generate(spec: &ScenarioSpec, encoder: &EncoderConfig) -> Result<Self> {
        spec.validate()?;
        let shape = [encoder.num_patches(), encoder.patch_dim];
        let dim = shape[0] * shape[1];
        let modes = match &spec.kind {
            ScenarioKind::Separable => 1,
            ScenarioKind::Bimodal => 2,
            ScenarioKind::FeatureFiles { train, test } => {
                return Self::from_files(spec, encoder, train, test)
            }
        };
        let root = Rng::new(spec.seed);
        let mut classes = Vec::with_capacity(spec.num_classes());
        for c in 0..spec.num_classes() {
            let mut rng = root.fork(c as u64);
            let centers: Vec<Vec<f64>> = (0..modes)
                .map(|_| (0..dim).map(|_| spec.separation * rng.normal()).collect())
                .collect();
            let mut sample = |i: usize| draw(&mut rng, &centers[i % modes], spec.noise, &shape);
            let train = (0..spec.train_per_class)
                .map(&mut sample)
                .collect::<Result<Vec<_>>>()?;
            let test = (0..spec.test_per_class)
                .map(&mut sample)
                .collect::<Result<Vec<_>>>()?;
            classes.push(ClassData {
                class: c,
                train,
                test,
            });
        }
        Ok(Self {
            classes_per_task: spec.classes_per_task,
            classes,
        })
    }

    fn from_files(
        spec: &ScenarioSpec,
        encoder: &EncoderConfig,
        train: &PathBuf,
        test: &PathBuf,
    ) -> Result<Self> {
        let shape = [encoder.num_patches(), encoder.patch_dim];
        let (tr_x, tr_y) = load_feature_file(train, None)?;
        let (te_x, te_y) = load_feature_file(test, None)?;
        for (x, path) in [(&tr_x, train), (&te_x, test)] {
            if x.cols() != shape[0] * shape[1] {
                return Err(Error::Config(format!(
                    "{}: rows have {} values, the encoders expect {}",
                    path.display(),
                    x.cols(),
                    shape[0] * shape[1]
                )));
            }
        }
        let labels: BTreeSet<u32> = tr_y.iter().copied().collect();
        if labels.len() != spec.num_classes() {
            return Err(Error::Config(format!(
                "{}: {} distinct labels, scenario needs {} tasks × {} classes",
                train.display(),
                labels.len(),
                spec.num_tasks,
                spec.classes_per_task
            )));
        }
        let rows = |x: &Tensor<f32>, y: &[u32], label: u32| -> Result<Vec<Tensor<f32>>> {
            y.iter()
                .enumerate()
                .filter(|(_, &l)| l == label)
                .map(|(r, _)| x.slice_rows(r, 1)?.reshape(&shape))
                .collect()
        };
        let classes = labels
            .iter()
            .map(|&l| {
                Ok(ClassData {
                    class: l as ClassId,
                    train: rows(&tr_x, &tr_y, l)?,
                    test: rows(&te_x, &te_y, l)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes_per_task: spec.classes_per_task,
            classes,
        })
    }

    /// Deals classes into tasks in the given order (positions into
    /// `self.classes`).
    pub fn stream(&self, order: &[usize]) -> Result<TaskStream> {
        if order.len() != self.classes.len()
            || order.iter().collect::<BTreeSet<_>>().len() != order.len()
        {
            return Err(Error::Config(
                "class order must be a permutation of all classes".into(),
            ));
        }
        let tasks = order
            .chunks(self.classes_per_task)
            .enumerate()
            .map(|(index, chunk)| {
                let mut task = Task {
                    index,
                    classes: Vec::new(),
                    train_x: Vec::new(),
                    train_y: Vec::new(),
                    test_x: Vec::new(),
                    test_y: Vec::new(),
                };
                for &pos in chunk {
                    let cd = self.classes.get(pos).ok_or(Error::UnknownClass(pos))?;
                    task.classes.push(cd.class);
                    task.train_x.extend(cd.train.iter().cloned());
                    task.train_y
                        .extend(std::iter::repeat_n(cd.class, cd.train.len()));
                    task.test_x.extend(cd.test.iter().cloned());
                    task.test_y
                        .extend(std::iter::repeat_n(cd.class, cd.test.len()));
                }
                Ok(task)
            })
            .collect::<Result<Vec<_>>>()?;
        TaskStream::new(tasks)
    }

    /// Stream with classes in their natural order.
    pub fn natural_stream(&self) -> Result<TaskStream> {
        self.stream(&(0..self.classes.len()).collect::<Vec<_>>())
    }

    /// Stream with a class order drawn from `seed`.
    pub fn shuffled_stream(&self, seed: u64) -> Result<TaskStream> {
        let order = Rng::new(seed)
            .fork(u64::MAX)
            .permutation(self.classes.len());
        self.stream(&order)
    }
}

/// Task stream of `spec` in natural class order.
pub fn generate_scenario(spec: &ScenarioSpec, encoder: &EncoderConfig) -> Result<TaskStream> {
    Scenario::generate(spec, encoder)?.natural_stream()
}
