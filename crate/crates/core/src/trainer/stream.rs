use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::ClassId;

/// One task: its class set and raw `num_patches × patch_dim` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// Zero-based position in the stream.
    pub index: usize,
    pub classes: Vec<ClassId>,
    pub train_x: Vec<Tensor<f32>>,
    pub train_y: Vec<ClassId>,
    pub test_x: Vec<Tensor<f32>>,
    pub test_y: Vec<ClassId>,
}

impl Task {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.train_x.is_empty() {
            return Err(Error::EmptyTask(self.index));
        }
        let mut seen = BTreeSet::new();
        for &c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        if self.train_x.len() != self.train_y.len() || self.test_x.len() != self.test_y.len() {
            return Err(Error::shape(
                "task",
                format!(
                    "task {}: {} train inputs / {} labels, {} test inputs / {} labels",
                    self.index,
                    self.train_x.len(),
                    self.train_y.len(),
                    self.test_x.len(),
                    self.test_y.len()
                ),
            ));
        }
        if let Some(&bad) = self
            .train_y
            .iter()
            .chain(&self.test_y)
            .find(|y| !seen.contains(y))
        {
            return Err(Error::LabelOutOfSet(bad));
        }
        Ok(())
    }
}

/// Ordered class-incremental tasks with disjoint class sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let s = Self { tasks };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.index != i {
                return Err(Error::OutOfOrderTask {
                    expected: i,
                    got: t.index,
                });
            }
            t.validate()?;
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::DuplicateClass(c));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Task that owns `class`.
    pub fn task_of_class(&self, class: ClassId) -> Option<usize> {
        self.tasks.iter().position(|t| t.classes.contains(&class))
    }
}
