//! Training configuration derived from essay-set metadata.
//!
//! Only the *inputs* of each mapping are fixed (score range, essay count,
//! prompt type). The coefficients below are reconstructions and all live in
//! [`HyperRules`] so a config file can override them.

use alloc::format;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::corpus::EssaySetMeta;
use crate::error::{Error, Result};
use crate::objectives::{classification_weight, DEFAULT_LABEL_SMOOTHING};
use crate::optim::{OptimizerKind, SchedulerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    OrdinalKappa,
    Cce,
}

/// How a transformer scorer turns its sequence output into one vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// The output at the prepended CLS position.
    Cls,
    /// Luong attention over all positions with the CLS output as query.
    Luong,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperRules {
    pub dropout_base: f64,
    /// Added per `1000 / n_obs`.
    pub dropout_per_kilo_inverse: f64,
    /// Added per `n_c / 100`.
    pub dropout_per_hundred_classes: f64,
    pub dropout_min: f64,
    pub dropout_max: f64,
    pub d_ff_min: usize,
    pub d_ff_per_class: usize,
    pub heads_source_dependent: usize,
    pub heads_independent: usize,
    pub batch_divisor: f64,
    pub batch_min: usize,
    pub batch_max: usize,
    pub epochs_base: f64,
    pub epochs_per_class: f64,
    pub epochs_obs_numerator: f64,
    pub epochs_min: usize,
    pub epochs_max: usize,
    pub patience_divisor: usize,
    pub patience_min: usize,
    pub d_model: usize,
    pub warmup_steps: usize,
    pub use_schedule: bool,
    pub class_loss: ClassLossKind,
    pub readout: Readout,
    pub seed: u64,
}

impl Default for HyperRules {
    fn default() -> Self {
        Self {
            dropout_base: 0.2,
            dropout_per_kilo_inverse: 0.1,
            dropout_per_hundred_classes: 0.2,
            dropout_min: 0.1,
            dropout_max: 0.6,
            d_ff_min: 64,
            d_ff_per_class: 8,
            heads_source_dependent: 8,
            heads_independent: 4,
            batch_divisor: 100.0,
            batch_min: 8,
            batch_max: 64,
            epochs_base: 30.0,
            epochs_per_class: 0.5,
            epochs_obs_numerator: 20000.0,
            epochs_min: 20,
            epochs_max: 120,
            patience_divisor: 6,
            patience_min: 3,
            d_model: 512,
            warmup_steps: 4000,
            use_schedule: true,
            class_loss: ClassLossKind::OrdinalKappa,
            readout: Readout::Cls,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    #[serde(rename = "P")]
    pub p: f64,
    pub dropout: f64,
    pub d_ff: usize,
    pub n_heads: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub d_model: usize,
    pub use_schedule: bool,
    pub warmup_steps: usize,
    pub class_loss: ClassLossKind,
    pub readout: Readout,
    pub seed: u64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_true")]
    pub positional_encoding: bool,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adamax
}
fn default_lr() -> f64 {
    0.001
}
fn default_smoothing() -> f64 {
    DEFAULT_LABEL_SMOOTHING
}
fn default_true() -> bool {
    true
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("hyperparameters: {}", m)));
        if !(self.p > 0.0 && self.p < 1.0) {
            return bad("P must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.patience > self.epochs {
            return bad("patience must not exceed epochs");
        }
        if self.d_ff == 0 || self.epochs == 0 || self.warmup_steps == 0 {
            return bad("d_ff, epochs and warmup_steps must be >= 1");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Option<SchedulerConfig> {
        self.use_schedule.then_some(SchedulerConfig {
            d_model: self.d_model,
            warmup_steps: self.warmup_steps,
        })
    }
}

fn largest_power_of_two_at_most(x: usize) -> usize {
    if x == 0 {
        0
    } else {
        1 << (usize::BITS - 1 - x.leading_zeros())
    }
}

pub fn generate_hyperparams(meta: &EssaySetMeta, mean_classes: f64) -> HyperParams {
    generate_with_rules(meta, mean_classes, &HyperRules::default())
}

pub fn generate_with_rules(meta: &EssaySetMeta, mean_classes: f64, r: &HyperRules) -> HyperParams {
    let n_c = meta.n_classes();
    let n_obs = meta.essay_count.max(1) as f64;
    let dropout = (r.dropout_base
        + r.dropout_per_kilo_inverse * (1000.0 / n_obs)
        + r.dropout_per_hundred_classes * (n_c as f64 / 100.0))
        .clamp(r.dropout_min, r.dropout_max);
    let d_ff = r.d_ff_min.max(r.d_ff_per_class * n_c).next_power_of_two();
    let n_heads = if meta.source_dependent {
        r.heads_source_dependent
    } else {
        r.heads_independent
    };
    let batch_raw = Float::round(n_obs / r.batch_divisor) as usize;
    let batch_size = largest_power_of_two_at_most(batch_raw).clamp(r.batch_min, r.batch_max);
    let epochs = (Float::round(r.epochs_base + n_c as f64 * r.epochs_per_class + r.epochs_obs_numerator / n_obs)
        as usize)
        .clamp(r.epochs_min, r.epochs_max);
    let patience = r.patience_min.max(epochs / r.patience_divisor.max(1)).min(epochs);
    HyperParams {
        p: classification_weight(n_c as f64, mean_classes).p,
        dropout,
        d_ff,
        n_heads,
        batch_size,
        epochs,
        patience,
        d_model: r.d_model,
        use_schedule: r.use_schedule,
        warmup_steps: r.warmup_steps,
        class_loss: r.class_loss,
        readout: r.readout,
        seed: r.seed,
        optimizer: OptimizerKind::Adamax,
        learning_rate: default_lr(),
        label_smoothing: DEFAULT_LABEL_SMOOTHING,
        positional_encoding: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Catalog;

    /// Direct evaluation of each mapping with plain arithmetic.
    fn oracle(n_obs: f64, n_c: f64, src: bool) -> (f64, usize, usize, usize, usize, usize) {
        let dropout = (0.2 + 100.0 / n_obs + 0.002 * n_c).clamp(0.1, 0.6);
        let mut d_ff = 1;
        while d_ff < (8.0 * n_c).max(64.0) as usize {
            d_ff *= 2;
        }
        let mut batch = 1;
        while batch * 2 <= (n_obs / 100.0).round() as usize {
            batch *= 2;
        }
        let epochs = ((30.0 + n_c / 2.0 + 20000.0 / n_obs).round() as usize).clamp(20, 120);
        (dropout, d_ff, if src { 8 } else { 4 }, batch.clamp(8, 64), epochs, (epochs / 6).max(3))
    }

    #[test]
    fn set_three_and_eight() {
        let c = Catalog::builtin();
        let mean = c.mean_classes();
        let h3 = generate_hyperparams(c.get(3).unwrap(), mean);
        assert!((h3.p - 0.8986).abs() < 1e-4);
        assert!((h3.dropout - 0.266).abs() < 5e-4);
        assert_eq!((h3.d_ff, h3.n_heads, h3.batch_size, h3.epochs, h3.patience), (64, 8, 16, 44, 7));
        let h8 = generate_hyperparams(c.get(8).unwrap(), mean);
        assert!((h8.p - 0.0010).abs() < 1e-4);
        assert!((h8.dropout - 0.431).abs() < 5e-4);
        assert_eq!((h8.d_ff, h8.n_heads, h8.batch_size, h8.epochs, h8.patience), (512, 4, 8, 82, 13));
        assert_eq!(generate_hyperparams(c.get(3).unwrap(), mean), h3);
        assert!(h3.validate().is_ok() && h8.validate().is_ok());
    }

    #[test]
    fn all_builtin_sets_match_oracle() {
        let c = Catalog::builtin();
        for m in c.sets() {
            let h = generate_hyperparams(m, c.mean_classes());
            let (dr, ff, heads, batch, ep, pat) = oracle(m.essay_count as f64, m.n_classes() as f64, m.source_dependent);
            assert!((h.dropout - dr).abs() < 1e-12);
            assert_eq!((h.d_ff, h.n_heads, h.batch_size, h.epochs, h.patience), (ff, heads, batch, ep, pat));
            h.validate().unwrap();
        }
    }

    #[test]
    fn json_uses_capital_p() {
        let c = Catalog::builtin();
        let h = generate_hyperparams(c.get(1).unwrap(), c.mean_classes());
        let s = serde_json::to_string(&h).unwrap();
        assert!(s.contains("\"P\":"));
        assert!(s.contains("\"class_loss\":\"ordinal_kappa\""));
        let back: HyperParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn validation() {
        let c = Catalog::builtin();
        let mut h = generate_hyperparams(c.get(1).unwrap(), c.mean_classes());
        h.n_heads = 3;
        assert!(h.validate().is_err());
        h.n_heads = 4;
        h.batch_size = 1;
        assert!(h.validate().is_err());
    }
}
