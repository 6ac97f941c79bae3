//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::losses::LossWeights;
use crate::model::{DEFAULT_CLUSTERS, DEFAULT_HIDDEN};
use crate::scalar::Scalar;
use crate::sinkhorn::SinkhornConfig;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<F> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: F,
    pub adam_beta1: F,
    pub adam_beta2: F,
    pub adam_eps: F,
    pub weight_decay: F,
    pub loss: LossWeights<F>,
    pub sinkhorn: SinkhornConfig<F>,
    /// Jitter strength for the second view when no paired views are supplied.
    pub augment_strength: F,
    pub seed: u64,
    pub clusters: usize,
    pub hidden: Vec<usize>,
    /// Treat assignments as constants in the consistency term as well.
    pub detach_consistency: bool,
}

impl<F: Scalar> Default for TrainConfig<F> {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: F::lit(2e-4),
            adam_beta1: F::lit(0.9),
            adam_beta2: F::lit(0.95),
            adam_eps: F::lit(1e-8),
            weight_decay: F::lit(1e-4),
            loss: LossWeights::default(),
            sinkhorn: SinkhornConfig::default(),
            augment_strength: F::lit(0.1),
            seed: 0,
            clusters: DEFAULT_CLUSTERS,
            hidden: DEFAULT_HIDDEN.to_vec(),
            detach_consistency: false,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in serialization order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "lr",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "weight_decay",
    "beta",
    "omega1",
    "omega2",
    "tau",
    "epsilon",
    "sinkhorn_iterations",
    "augment_strength",
    "seed",
    "clusters",
    "hidden",
    "detach_consistency",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

impl<F: Scalar> TrainConfig<F> {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2".into());
        }
        if !(self.lr > F::zero()) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b >= F::zero() && b < F::one()) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > F::zero()) {
            return bad(format!("adam_eps {} must be positive", self.adam_eps));
        }
        if !(self.weight_decay >= F::zero()) {
            return bad(format!("weight_decay {} must be nonnegative", self.weight_decay));
        }
        if !(self.augment_strength >= F::zero()) {
            return bad(format!("augment_strength {} must be nonnegative", self.augment_strength));
        }
        if self.clusters < 2 {
            return bad(format!("clusters {} must be at least 2", self.clusters));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.sinkhorn.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let float = |v: &str| parse::<f64>(key, v).map(F::lit);
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = float(value)?,
            "adam_beta1" => self.adam_beta1 = float(value)?,
            "adam_beta2" => self.adam_beta2 = float(value)?,
            "adam_eps" => self.adam_eps = float(value)?,
            "weight_decay" => self.weight_decay = float(value)?,
            "beta" => self.loss.beta = float(value)?,
            "omega1" => self.loss.omega1 = float(value)?,
            "omega2" => self.loss.omega2 = float(value)?,
            "tau" => self.loss.tau = float(value)?,
            "epsilon" => self.sinkhorn.epsilon = float(value)?,
            "sinkhorn_iterations" => self.sinkhorn.iterations = parse(key, value)?,
            "augment_strength" => self.augment_strength = float(value)?,
            "seed" => self.seed = parse(key, value)?,
            "clusters" => self.clusters = parse(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|w| parse(key, w.trim()))
                        .collect::<Result<_, _>>()?
                }
            }
            "detach_consistency" => self.detach_consistency = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "adam_beta1" => self.adam_beta1.to_string(),
            "adam_beta2" => self.adam_beta2.to_string(),
            "adam_eps" => self.adam_eps.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta" => self.loss.beta.to_string(),
            "omega1" => self.loss.omega1.to_string(),
            "omega2" => self.loss.omega2.to_string(),
            "tau" => self.loss.tau.to_string(),
            "epsilon" => self.sinkhorn.epsilon.to_string(),
            "sinkhorn_iterations" => self.sinkhorn.iterations.to_string(),
            "augment_strength" => self.augment_strength.to_string(),
            "seed" => self.seed.to_string(),
            "clusters" => self.clusters.to_string(),
            "hidden" => self
                .hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "detach_consistency" => self.detach_consistency.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Defaults overridden by `text`, then validated.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every field as `key = value`, one per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            writeln!(s, "{key} = {}", self.get(key).expect("listed key")).expect("writing to a String");
        }
        s
    }

    /// Config text preceded by comment lines describing the training setup.
    pub fn run_header(&self) -> String {
        let mut s = String::new();
        s.push_str("# optimizer: Adam with decoupled weight decay (theta <- theta - lr*wd*theta - lr*adam_update)\n");
        s.push_str("# encoder: frozen and external; embeddings are precomputed and only the classification head is trained\n");
        s.push_str(&self.to_text());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::<f64>::default();
        c.validate().unwrap();
        assert_eq!(c.epochs, 5);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.lr, 2e-4);
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.95));
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!((c.loss.beta, c.loss.omega1, c.loss.omega2), (0.7, 1.0, 0.1));
        assert_eq!((c.sinkhorn.epsilon, c.sinkhorn.iterations), (0.05, 3));
        assert_eq!(c.hidden, vec![256, 128]);
        assert_eq!(c.clusters, 2);
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::<f64>::default();
        c.set("beta", "1.0").unwrap();
        c.set("hidden", "8, 4").unwrap();
        c.set("detach_consistency", "true").unwrap();
        c.seed = 42;
        let back = TrainConfig::<f64>::parse(&c.run_header()).unwrap();
        assert_eq!(back, c);
        for key in CONFIG_KEYS {
            assert!(c.to_text().contains(&format!("{key} = ")));
        }
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(
            TrainConfig::<f64>::parse("epochs 3"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            TrainConfig::<f64>::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            TrainConfig::<f64>::parse("lr = fast"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(TrainConfig::<f64>::parse("epochs = 0"), Err(ConfigError::Invalid(_))));
        assert!(matches!(TrainConfig::<f64>::parse("clusters = 1"), Err(ConfigError::Invalid(_))));
        assert!(matches!(TrainConfig::<f64>::parse("beta = 1.5"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let c = TrainConfig::<f64>::parse("# comment\n\nepochs = 2\nepochs = 7\n").unwrap();
        assert_eq!(c.epochs, 7);
    }
}
