use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// The full method or one ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Variant {
    #[default]
    Full,
    /// Stop after stage 1 and classify with the prototype keys.
    FirstLevelOnly,
    /// Keys from a fixed context token instead of learned first-level prompts.
    NoFirstLevel,
    /// Key/value prefix prompts instead of additive residuals.
    PrefixTuning,
    NoReplay,
    /// Single-component replay mixtures.
    Unimodal,
    /// Residual `R = Q_c` without similarity scaling.
    NoConfidenceModulation,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::FirstLevelOnly,
        Variant::NoFirstLevel,
        Variant::PrefixTuning,
        Variant::NoReplay,
        Variant::Unimodal,
        Variant::NoConfidenceModulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::FirstLevelOnly => "first_level_only",
            Self::NoFirstLevel => "no_first_level",
            Self::PrefixTuning => "prefix_tuning",
            Self::NoReplay => "no_replay",
            Self::Unimodal => "unimodal",
            Self::NoConfidenceModulation => "no_conf_mod",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Self::Full => "STAR-Prompt",
            Self::FirstLevelOnly => "Classify with first-level keys",
            Self::NoFirstLevel => "w/o first-level prompts",
            Self::PrefixTuning => "Prefix Tuning (no residuals)",
            Self::NoReplay => "w/o Generative Replay",
            Self::Unimodal => "w. Unimodal Generative Replay",
            Self::NoConfidenceModulation => "w/o Confidence Modulation",
        }
    }

    pub fn replay(self) -> bool {
        self != Self::NoReplay
    }

    pub fn learns_first_level(self) -> bool {
        self != Self::NoFirstLevel
    }

    pub fn has_second_stage(self) -> bool {
        self != Self::FirstLevelOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Independent ablation switches; at most one may be set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VariantFlags {
    pub first_level_only: bool,
    pub no_first_level: bool,
    pub prefix_tuning: bool,
    pub no_replay: bool,
    pub unimodal: bool,
    pub no_conf_mod: bool,
}

impl VariantFlags {
    pub fn resolve(self) -> Result<Variant> {
        let set: Vec<Variant> = [
            (self.first_level_only, Variant::FirstLevelOnly),
            (self.no_first_level, Variant::NoFirstLevel),
            (self.prefix_tuning, Variant::PrefixTuning),
            (self.no_replay, Variant::NoReplay),
            (self.unimodal, Variant::Unimodal),
            (self.no_conf_mod, Variant::NoConfidenceModulation),
        ]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect();
        match set.as_slice() {
            [] => Ok(Variant::Full),
            [v] => Ok(*v),
            many => Err(Error::ConflictingFlags(
                many.iter()
                    .map(|v| v.name())
                    .collect::<Vec<_>>()
                    .join(" + "),
            )),
        }
    }
}
