//! The single JSON run configuration shared by every CLI subcommand.

use serde::{Deserialize, Serialize};

use crate::association::AssociationParams;
use crate::field::InitPolicy;
use crate::render::TrainConfig;
use crate::{Error, Result};

/// Switches for the component ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Associate masks across frames; off keeps per-frame IDs.
    pub pointmap_fusion: bool,
    /// Off forces `lambda_plane = 0`.
    pub plane_regularization: bool,
    pub split_projection: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            pointmap_fusion: true,
            plane_regularization: true,
            split_projection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Label-transfer radius for the 3D mIoU.
    pub gamma: f64,
    /// Rendered pixels below this alpha are unlabeled in argmax masks.
    pub min_alpha: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            min_alpha: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub association: AssociationParams,
    pub init: InitPolicy,
    pub training: TrainConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.association.validate()?;
        self.training.validate()?;
        if !(self.eval.gamma > 0.0 && self.eval.gamma.is_finite()) {
            return Err(Error::invalid("eval.gamma must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.min_alpha) {
            return Err(Error::invalid("eval.min_alpha must lie in [0, 1]"));
        }
        if !(self.init.opacity > 0.0 && self.init.opacity < 1.0) {
            return Err(Error::invalid("init.opacity must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Training settings with the ablation switches applied.
    pub fn effective_training(&self) -> TrainConfig {
        let mut t = self.training.clone();
        if !self.ablation.plane_regularization {
            t.lambda_plane = 0.0;
        }
        t.split_projection = t.split_projection && self.ablation.split_projection;
        t
    }
}
