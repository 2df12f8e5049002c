//! Training configuration files and command-line overrides.
//!
//! A config file is a flat JSON object whose keys are exactly the
//! [`TrainConfig`] field names; missing keys take their defaults and unknown
//! keys are rejected. Flags given on the command line win over file values.

use std::fs;
use std::path::Path;

use crate::attention::Mechanism;
use crate::car::{Mode, TrainConfig};
use crate::error::{Error, Result};

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, 0, format!("cannot read file: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, e.line(), e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mode: Option<Mode>,
    pub mechanism: Option<Mechanism>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden: Option<usize>,
    pub lambda: Option<f64>,
    pub rounds: Option<usize>,
    pub temperature: Option<f64>,
    pub lr: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    /// Apply to `base`; a baseline run with an explicit positive `lambda` is a
    /// usage error rather than a silently ignored flag.
    pub fn apply(&self, base: TrainConfig) -> Result<TrainConfig> {
        if self.mode == Some(Mode::Baseline) && self.lambda.is_some_and(|l| l != 0.0) {
            return Err(Error::InvalidArgument(
                "--mode baseline conflicts with a non-zero --lambda".into(),
            ));
        }
        let mut c = base;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(mode, mechanism, layers, heads, hidden, lambda, rounds, temperature, lr, max_epochs, patience, seed);
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lambda": 0.5, "heads": 3, "seed": 4}"#).unwrap();
        let base = load_config(&p).unwrap();
        assert_eq!(base.heads, 3);
        let o = Overrides {
            lambda: Some(5.0),
            ..Overrides::default()
        };
        let c = o.apply(base).unwrap();
        assert_eq!(c.lambda, 5.0);
        assert_eq!(c.heads, 3);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_key_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"lamda": 0.5}"#).unwrap();
        let err = load_config(&p).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn baseline_with_lambda_conflicts() {
        let o = Overrides {
            mode: Some(Mode::Baseline),
            lambda: Some(1.0),
            ..Overrides::default()
        };
        assert_eq!(o.apply(TrainConfig::default()).unwrap_err().exit_code(), 1);
        let o = Overrides {
            mode: Some(Mode::Baseline),
            lambda: Some(0.0),
            ..Overrides::default()
        };
        assert!(o.apply(TrainConfig::default()).is_ok());
    }
}
