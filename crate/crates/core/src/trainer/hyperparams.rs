use crate::error::{Error, Result};

/// Optimisation schedule of one task.
///
/// `e1` counts the epochs over real samples (both main loops), `e2` the
/// epochs over generated samples (both replay loops). Stage-1 loops use
/// `lambda_stage1`/`lr_stage1`, stage-2 loops `lambda_stage2`/`lr_stage2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    pub e1: usize,
    pub e2: usize,
    pub lambda_stage1: f64,
    pub lr_stage1: f64,
    pub lambda_stage2: f64,
    pub lr_stage2: f64,
    /// Mixture components per class.
    pub components: usize,
    /// Synthetic samples per class and replay epoch.
    pub n_replay: usize,
    pub batch_size: usize,
}

/// Names accepted by [`Hyperparams::preset`].
pub const PRESETS: [&str; 10] = [
    "imagenet_r",
    "cifar100",
    "cars196",
    "cub200",
    "eurosat",
    "resisc45",
    "cropdiseases",
    "isic",
    "chestx",
    "desk",
];

/// Keys accepted by [`Hyperparams::set`].
pub const HYPERPARAM_KEYS: [&str; 9] = [
    "e1",
    "e2",
    "lambda_stage1",
    "lr_stage1",
    "lambda_stage2",
    "lr_stage2",
    "components",
    "n_replay",
    "batch_size",
];

#[allow(clippy::too_many_arguments)]
const fn table(
    e1: usize,
    l1: f64,
    lr1: f64,
    e2: usize,
    l2: f64,
    lr2: f64,
    batch_size: usize,
) -> Hyperparams {
    Hyperparams {
        e1,
        e2,
        lambda_stage1: l1,
        lr_stage1: lr1,
        lambda_stage2: l2,
        lr_stage2: lr2,
        components: 5,
        n_replay: 256,
        batch_size,
    }
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self::desk()
    }
}

impl Hyperparams {
    /// Small schedule sized for the synthetic scenarios on one CPU core.
    pub fn desk() -> Self {
        Self {
            e1: 8,
            e2: 8,
            lambda_stage1: 1.0,
            lr_stage1: 0.05,
            lambda_stage2: 1.0,
            lr_stage2: 0.01,
            components: 5,
            n_replay: 32,
            batch_size: 16,
        }
    }

    /// Named schedule. The dataset presets mirror the published per-dataset
    /// tables (batch 16 for Imagenet-R, 128 otherwise).
    pub fn preset(name: &str) -> Result<Self> {
        let hp = match name {
            "imagenet_r" => table(50, 30.0, 0.05, 10, 30.0, 0.001, 16),
            "cifar100" => table(20, 10.0, 0.05, 10, 30.0, 0.01, 128),
            "cars196" => table(50, 30.0, 0.05, 10, 30.0, 0.001, 128),
            "cub200" => table(50, 30.0, 0.001, 50, 10.0, 0.001, 128),
            "eurosat" => table(5, 30.0, 0.05, 5, 5.0, 0.1, 128),
            "resisc45" => table(30, 10.0, 0.05, 30, 5.0, 0.1, 128),
            "cropdiseases" => table(5, 30.0, 0.01, 5, 2.0, 0.01, 128),
            "isic" => table(30, 5.0, 0.01, 30, 10.0, 0.01, 128),
            "chestx" => table(30, 30.0, 0.05, 30, 5.0, 0.05, 128),
            "desk" => Self::desk(),
            other => {
                return Err(Error::Config(format!(
                    "unknown preset `{other}` (known: {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("e1", self.e1),
            ("components", self.components),
            ("n_replay", self.n_replay),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        let rates = [("lr_stage1", self.lr_stage1), ("lr_stage2", self.lr_stage2)];
        for (k, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        let weights = [
            ("lambda_stage1", self.lambda_stage1),
            ("lambda_stage2", self.lambda_stage2),
        ];
        for (k, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Overrides one field from its textual value. Returns `Ok(false)` for an
    /// unknown key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn int(key: &str, v: &str) -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected an integer, got `{v}`")))
        }
        fn float(key: &str, v: &str) -> Result<f64> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: expected a number, got `{v}`")))
        }
        match key {
            "e1" => self.e1 = int(key, value)?,
            "e2" => self.e2 = int(key, value)?,
            "lambda_stage1" => self.lambda_stage1 = float(key, value)?,
            "lr_stage1" => self.lr_stage1 = float(key, value)?,
            "lambda_stage2" => self.lambda_stage2 = float(key, value)?,
            "lr_stage2" => self.lr_stage2 = float(key, value)?,
            "components" => self.components = int(key, value)?,
            "n_replay" => self.n_replay = int(key, value)?,
            "batch_size" => self.batch_size = int(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key=value` lines for every field, in [`HYPERPARAM_KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("e1", self.e1.to_string()),
            ("e2", self.e2.to_string()),
            ("lambda_stage1", self.lambda_stage1.to_string()),
            ("lr_stage1", self.lr_stage1.to_string()),
            ("lambda_stage2", self.lambda_stage2.to_string()),
            ("lr_stage2", self.lr_stage2.to_string()),
            ("components", self.components.to_string()),
            ("n_replay", self.n_replay.to_string()),
            ("batch_size", self.batch_size.to_string()),
        ]
    }
}
