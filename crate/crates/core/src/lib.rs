//! Synthetic data generation and zero-shot inspection bench for a bent-tab bracket.
//!
//! The crate covers the whole chain from geometry to evaluation:
//!
//! 1. [`mesh`] builds the parametric bracket and labels bend angles.
//! 2. [`render`] rasterizes the part into an RGBA sprite (z-buffer, Blinn-Phong, area light).
//! 3. [`doe`] enumerates the factorial randomization design and derives per-image seeds.
//! 4. [`composite`] augments sprites and blends them over exposure-adjusted backgrounds.
//! 5. [`annotate`] turns coverage masks into boxes, YOLO label lines and a manifest.
//! 6. [`metrics`] computes classification reports and detection mAP.
//! 7. [`learner`] is a small from-scratch classifier trained with AdamW on part crops.
//! 8. [`harness`] runs the pseudo-real holdout and few-shot comparison grid.
//!
//! [`pipeline`] and [`config`] tie the stages together for the command-line driver.

pub mod annotate;
pub mod composite;
pub mod config;
pub mod doe;
pub mod harness;
pub mod learner;
pub mod mask;
pub mod mesh;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod scene;

use serde::{Deserialize, Serialize};
use std::fmt;

/// Binary inspection outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Pass,
    Fail,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Pass, Label::Fail];

    /// Class index used in label files and model outputs: pass = 0, fail = 1.
    pub fn class_index(self) -> usize {
        match self {
            Label::Pass => 0,
            Label::Fail => 1,
        }
    }

    pub fn from_class_index(index: usize) -> Option<Label> {
        match index {
            0 => Some(Label::Pass),
            1 => Some(Label::Fail),
            _ => None,
        }
    }

    pub fn other(self) -> Label {
        match self {
            Label::Pass => Label::Fail,
            Label::Fail => Label::Pass,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Pass => "pass",
            Label::Fail => "fail",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pass" | "0" => Ok(Label::Pass),
            "fail" | "1" => Ok(Label::Fail),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}
