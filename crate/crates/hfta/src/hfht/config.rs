//! Tuning-run configuration document.
//!
//! {"algorithm": "hyperband"|"random", "R", "eta", "skip_last",
//!  "total_sets", "epochs_per_set", "max_B", "scheduler", "seed",
//!  "params": [{"name", "fusible", "domain": {"lo","hi"}|{"choices":[..]}}]}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::algorithms::{Hyperband, RandomSearch, TuneAlgorithm};
use super::tune::SchedulerKind;
use super::HyperParamDef;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub algorithm: String,
    #[serde(default, rename = "R", skip_serializing_if = "Option::is_none")]
    pub r: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skip_last: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_sets: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_per_set: Option<f64>,
    #[serde(default, rename = "max_B", skip_serializing_if = "Option::is_none")]
    pub max_b: Option<usize>,
    pub scheduler: String,
    #[serde(default)]
    pub seed: u64,
    pub params: Vec<HyperParamDef>,
}

impl TuneConfig {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let cfg: TuneConfig = serde_json::from_slice(bytes)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        SchedulerKind::parse(&self.scheduler)?;
        for p in &self.params {
            p.domain.validate(&p.name)?;
        }
        match self.algorithm.as_str() {
            "random" => {
                if self.total_sets.is_none() || self.epochs_per_set.is_none() {
                    return Err(Error::config(
                        "random search requires `total_sets` and `epochs_per_set`",
                    ));
                }
            }
            "hyperband" => {
                if self.r.is_none() || self.eta.is_none() {
                    return Err(Error::config("hyperband requires `R` and `eta`"));
                }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown algorithm `{other}` (random, hyperband)"
                )))
            }
        }
        Ok(())
    }

    pub fn scheduler_kind(&self) -> SchedulerKind {
        SchedulerKind::parse(&self.scheduler).expect("validated")
    }

    pub fn build_algorithm(&self) -> Result<Box<dyn TuneAlgorithm>> {
        let rng = StreamRng::new(self.seed).split("hfht");
        Ok(match self.algorithm.as_str() {
            "random" => Box::new(RandomSearch::new(
                &self.params,
                self.total_sets.unwrap(),
                self.epochs_per_set.unwrap(),
                rng,
            )?),
            "hyperband" => Box::new(Hyperband::new(
                &self.params,
                self.r.unwrap(),
                self.eta.unwrap(),
                self.skip_last.unwrap_or(0),
                rng,
            )?),
            _ => unreachable!("validated"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_random_config() {
        let doc = br#"{
            "algorithm": "random", "total_sets": 5, "epochs_per_set": 2.0,
            "max_B": 4, "scheduler": "hfta", "seed": 3,
            "params": [
                {"name": "lr", "fusible": true, "domain": {"lo": 0.0001, "hi": 0.01}},
                {"name": "batch_size", "fusible": false, "domain": {"choices": [8, 16, 32]}}
            ]
        }"#;
        let cfg = TuneConfig::parse(doc).unwrap();
        assert_eq!(cfg.max_b, Some(4));
        assert_eq!(cfg.params.len(), 2);
        assert!(cfg.params[0].fusible);
        assert!(!cfg.params[1].fusible);
    }

    #[test]
    fn hyperband_requires_r_and_eta() {
        let doc = br#"{
            "algorithm": "hyperband", "scheduler": "serial",
            "params": [{"name": "lr", "fusible": true, "domain": {"lo": 0.001, "hi": 0.01}}]
        }"#;
        assert!(TuneConfig::parse(doc).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = br#"{
            "algorithm": "random", "total_sets": 1, "epochs_per_set": 1.0,
            "scheduler": "serial", "bogus": true, "params": []
        }"#;
        assert!(TuneConfig::parse(doc).is_err());
    }
}
