//! Warmup plus step-decay learning rate.

use crate::config::TrainSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_iters: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn from_settings(t: &TrainSettings) -> Self {
        Self {
            warmup_iters: t.warmup_iters,
            lr_start: t.lr_start,
            lr_peak: t.lr_peak,
            decay_epochs: t.decay_epochs.clone(),
            decay_factor: t.decay_factor,
        }
    }

    /// Rate at global iteration `iter` (0-based) inside `epoch` (1-based):
    /// linear from `lr_start` to `lr_peak` over the warmup, then constant,
    /// times `decay_factor` for every decay epoch already reached.
    pub fn lr(&self, iter: usize, epoch: usize) -> f64 {
        let base = if iter < self.warmup_iters {
            self.lr_start + (self.lr_peak - self.lr_start) * iter as f64 / self.warmup_iters as f64
        } else {
            self.lr_peak
        };
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        base * self.decay_factor.powi(decays as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::from_settings(&TrainSettings::default())
    }
}
