//! The distillation plan: which loss composition trains the student.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    /// Plain training on original targets; no teacher involved.
    None,
    /// Sequence-level: plain training on teacher-decoded targets.
    Sld,
    /// Word + sequence level: CE on distilled targets plus a KL term
    /// against the teacher's distribution on every sample.
    Wsld,
    /// Batch-level selective: the KL term applies only to the hardest
    /// ⌈r·B⌉ samples of each batch.
    Bl,
    /// Global-level selective: hardness is judged against a FIFO queue of
    /// recent losses instead of the current batch.
    Gl,
    /// Global language-wise selective: one FIFO queue per language, so a
    /// systematically easy language still contributes hard samples.
    Glwd,
}

impl DistillMode {
    pub fn requires_teacher(self) -> bool {
        matches!(self, DistillMode::Wsld | DistillMode::Bl | DistillMode::Gl | DistillMode::Glwd)
    }

    pub fn uses_queue(self) -> bool {
        matches!(self, DistillMode::Gl | DistillMode::Glwd)
    }

    pub fn is_selective(self) -> bool {
        matches!(self, DistillMode::Bl | DistillMode::Gl | DistillMode::Glwd)
    }
}

/// Knobs for one training run. `kd_weight` is the λ mixing CE and KD,
/// `hard_ratio` the r fraction treated as hard, `queue_capacity` the size
/// of each FIFO loss queue (for language-wise selection a reasonable
/// choice is the global capacity divided by the number of languages), and
/// `temperature` softens both distributions in the KD term.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillPlan {
    pub mode: DistillMode,
    pub kd_weight: f64,
    pub hard_ratio: f64,
    pub queue_capacity: usize,
    pub temperature: f64,
}

impl Default for DistillPlan {
    fn default() -> Self {
        DistillPlan {
            mode: DistillMode::None,
            kd_weight: 0.5,
            hard_ratio: 0.5,
            queue_capacity: 64,
            temperature: 1.0,
        }
    }
}

impl DistillPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kd_weight) {
            return Err(Error::InvalidConfig(format!(
                "kd_weight must lie in [0, 1], got {}",
                self.kd_weight
            )));
        }
        if !(self.hard_ratio > 0.0 && self.hard_ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "hard_ratio must lie in (0, 1], got {}",
                self.hard_ratio
            )));
        }
        if self.mode.uses_queue() && self.queue_capacity < 1 {
            return Err(Error::InvalidConfig(
                "queue_capacity must be at least 1 for queue-based modes".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}
