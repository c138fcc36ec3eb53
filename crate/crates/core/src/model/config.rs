//! Declarative topology description.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Unet,
    Eb,
    Lb,
    Hf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attention {
    #[default]
    None,
    Channel,
    Position,
    Dual,
}

impl FromStr for Attention {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "channel" | "catt" => Ok(Self::Channel),
            "position" | "patt" => Ok(Self::Position),
            "dual" | "datt" => Ok(Self::Dual),
            _ => Err(ModelError::Config(format!("unknown attention mode '{s}' (none, channel, position, dual)"))),
        }
    }
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Channel => "channel",
            Self::Position => "position",
            Self::Dual => "dual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub family: Family,
    #[serde(default)]
    pub tcl_count: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub attention: Attention,
    /// Halves the duplicated residual terms of dual attention fusion.
    #[serde(default)]
    pub attention_averaged: bool,
    #[serde(default = "default_width")]
    pub base_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_slices")]
    pub in_slices: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_alpha() -> f64 {
    0.2
}
fn default_width() -> usize {
    8
}
fn default_depth() -> usize {
    3
}
fn default_slices() -> usize {
    3
}
fn default_classes() -> usize {
    2
}

impl TopologyConfig {
    pub fn new(family: Family, tcl_count: usize) -> Self {
        Self {
            family,
            tcl_count,
            alpha: default_alpha(),
            attention: Attention::None,
            attention_averaged: false,
            base_width: default_width(),
            depth: default_depth(),
            in_slices: default_slices(),
            classes: default_classes(),
        }
    }

    /// Parses `unet`, `eb`, `lb` or `hf-<k>`.
    pub fn named(name: &str) -> Result<Self, ModelError> {
        let cfg = match name {
            "unet" => Self::new(Family::Unet, 0),
            "eb" => Self::new(Family::Eb, 0),
            "lb" => Self::new(Family::Lb, 0),
            _ => {
                let k = name
                    .strip_prefix("hf-")
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| ModelError::Config(format!("unknown topology '{name}' (unet, eb, lb, hf-<k>)")))?;
                Self::new(Family::Hf, k)
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Unet => "unet".into(),
            Family::Eb => "eb".into(),
            Family::Lb => "lb".into(),
            Family::Hf => format!("hf-{}", self.tcl_count),
        }
    }

    /// Total block levels: `depth` encoders, the bottom block, `depth` decoders.
    pub fn levels(&self) -> usize {
        2 * self.depth + 1
    }

    /// First level whose blocks are owned per branch; `levels()` when the
    /// whole trunk is shared.
    pub fn split_level(&self) -> usize {
        match self.family {
            Family::Unet | Family::Lb => self.levels(),
            Family::Eb => 1,
            Family::Hf => self.levels() - self.tcl_count,
        }
    }

    pub fn has_contour_branch(&self) -> bool {
        self.family != Family::Unet
    }

    pub fn tcl_at(&self, level: usize) -> bool {
        self.family == Family::Hf && level >= self.split_level()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let mut errs = Vec::new();
        if self.depth == 0 {
            errs.push("depth must be at least 1".to_string());
        }
        match self.family {
            Family::Hf => {
                if self.tcl_count == 0 || self.tcl_count + 1 > self.levels() {
                    errs.push(format!("tcl_count {} must be in 1..={}", self.tcl_count, self.levels().saturating_sub(1)));
                }
            }
            _ if self.tcl_count != 0 => errs.push(format!("tcl_count {} is only valid for hf", self.tcl_count)),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            errs.push(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if self.base_width == 0 || self.in_slices == 0 || self.classes < 2 {
            errs.push("base_width and in_slices must be positive, classes at least 2".to_string());
        }
        if self.in_slices % 2 == 0 {
            errs.push(format!("in_slices {} must be odd", self.in_slices));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ModelError::Config(errs.join("; ")))
        }
    }

    /// Channel width of a block level.
    pub fn width(&self, level: usize) -> usize {
        let d = self.depth;
        let exp = if level <= d { level } else { 2 * d - level };
        self.base_width << exp
    }

    /// Spatial downsampling exponent of a level's output.
    pub fn scale(&self, level: usize) -> usize {
        let d = self.depth;
        if level <= d {
            level
        } else {
            2 * d - level
        }
    }

    pub fn level_name(&self, level: usize) -> String {
        let d = self.depth;
        if level < d {
            format!("E{}", level + 1)
        } else if level == d {
            "B".into()
        } else {
            format!("D{}", 2 * d - level + 1)
        }
    }
}

/// `(shared, tcl)` fusion-block counts of a topology.
pub fn count_blocks(cfg: &TopologyConfig) -> (usize, usize) {
    match cfg.family {
        Family::Unet => (0, 0),
        Family::Eb => (1, 0),
        Family::Lb => (cfg.levels(), 0),
        Family::Hf => (cfg.levels().saturating_sub(cfg.tcl_count), cfg.tcl_count),
    }
}
