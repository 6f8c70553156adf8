//! Fusion-aware hyperparameter tuning.
//!
//! Tuning algorithms propose batches of hyperparameter sets; a scheduler
//! evaluates them one at a time (serial), as parallel jobs (concurrent), or
//! partitioned by infusible values and fused (hfta). Results are scattered
//! back into proposal order, so the algorithm never observes which
//! scheduler ran underneath.

pub mod algorithms;
pub mod config;
pub mod tune;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// A hyperparameter value: numbers for continuous/numeric domains, strings
/// and booleans for categorical ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Num(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Num(v) => Some(*v),
            _ => None,
        }
    }

    /// Total order so values can key partitions.
    fn order_key(&self) -> (u8, u64, &str) {
        match self {
            ParamValue::Bool(b) => (0, *b as u64, ""),
            ParamValue::Num(v) => (1, v.to_bits(), ""),
            ParamValue::Str(s) => (2, 0, s.as_str()),
        }
    }
}

impl Eq for ParamValue {}

impl Ord for ParamValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.order_key().cmp(&other.order_key())
    }
}

impl PartialOrd for ParamValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Num(v) => write!(f, "{v}"),
            ParamValue::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Domain {
    Continuous { lo: f64, hi: f64 },
    Discrete { choices: Vec<ParamValue> },
}

impl Domain {
    pub fn validate(&self, name: &str) -> Result<()> {
        match self {
            Domain::Continuous { lo, hi } => {
                if lo > hi {
                    return Err(Error::Validation(format!(
                        "domain of `{name}`: lo {lo} > hi {hi}"
                    )));
                }
            }
            Domain::Discrete { choices } => {
                if choices.is_empty() {
                    return Err(Error::Validation(format!(
                        "domain of `{name}` has no choices"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match self {
            Domain::Continuous { lo, hi } => {
                v.as_f64().is_some_and(|x| *lo <= x && x <= *hi)
            }
            Domain::Discrete { choices } => choices.contains(v),
        }
    }

    pub fn sample(&self, rng: &mut StreamRng) -> ParamValue {
        match self {
            Domain::Continuous { lo, hi } => ParamValue::Num(rng.uniform_in(*lo, *hi)),
            Domain::Discrete { choices } => choices[rng.below(choices.len())].clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParamDef {
    pub name: String,
    pub fusible: bool,
    pub domain: Domain,
}

/// One proposed assignment of every defined hyperparameter.
/// `original_index` is the set's position in the proposed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParamSet {
    pub assignments: BTreeMap<String, ParamValue>,
    pub original_index: usize,
}

impl HyperParamSet {
    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.assignments.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.get(name).and_then(|v| v.as_f64())
    }

    pub fn sample(defs: &[HyperParamDef], rng: &mut StreamRng, original_index: usize) -> Self {
        let assignments = defs
            .iter()
            .map(|d| (d.name.clone(), d.domain.sample(rng)))
            .collect();
        HyperParamSet { assignments, original_index }
    }

    fn validate(&self, defs: &[HyperParamDef]) -> Result<()> {
        for d in defs {
            let v = self.get(&d.name).ok_or_else(|| {
                Error::Validation(format!(
                    "set {} is missing hyperparameter `{}`",
                    self.original_index, d.name
                ))
            })?;
            if !d.domain.contains(v) {
                return Err(Error::Validation(format!(
                    "set {}: value {v} of `{}` is outside its domain",
                    self.original_index, d.name
                )));
            }
        }
        for name in self.assignments.keys() {
            if !defs.iter().any(|d| &d.name == name) {
                return Err(Error::Validation(format!(
                    "set {}: unknown hyperparameter `{name}`",
                    self.original_index
                )));
            }
        }
        Ok(())
    }

    /// The tuple of infusible values, sorted by name.
    fn infusible_key(&self, defs: &[HyperParamDef]) -> Vec<(String, ParamValue)> {
        let mut key: Vec<(String, ParamValue)> = defs
            .iter()
            .filter(|d| !d.fusible)
            .map(|d| (d.name.clone(), self.assignments[&d.name].clone()))
            .collect();
        key.sort();
        key
    }
}

/// A group of sets that share every infusible value and can run as one
/// fused job of B = members.len() models.
#[derive(Clone, Debug)]
pub struct Partition {
    pub members: Vec<HyperParamSet>,
    pub infusible_key: Vec<(String, ParamValue)>,
}

impl Partition {
    pub fn b(&self) -> usize {
        self.members.len()
    }
}

/// Outcome of evaluating one hyperparameter set.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TuneRecord {
    pub set: HyperParamSet,
    /// None when the job failed; such records never win selection.
    pub metric: Option<f64>,
    pub cost_device_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Group the proposed sets by their infusible values (first-appearance
/// order), splitting groups larger than `max_b` into ceil(len/max_b)
/// chunks that preserve proposal order.
pub fn partition_and_fuse(
    sets: &[HyperParamSet],
    defs: &[HyperParamDef],
    max_b: usize,
) -> Result<Vec<Partition>> {
    if max_b == 0 {
        return Err(Error::config("max_B must be at least 1"));
    }
    for d in defs {
        d.domain.validate(&d.name)?;
    }
    for s in sets {
        s.validate(defs)?;
    }
    let mut order: Vec<Vec<(String, ParamValue)>> = Vec::new();
    let mut groups: BTreeMap<Vec<(String, ParamValue)>, Vec<HyperParamSet>> = BTreeMap::new();
    for s in sets {
        let key = s.infusible_key(defs);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(s.clone());
    }
    let mut partitions = Vec::new();
    for key in order {
        let members = groups.remove(&key).unwrap();
        for chunk in members.chunks(max_b) {
            partitions.push(Partition {
                members: chunk.to_vec(),
                infusible_key: key.clone(),
            });
        }
    }
    Ok(partitions)
}

/// Scatter per-partition results back into proposal order. Every
/// original_index of 0..n must appear exactly once.
pub fn unfuse_and_reorder(partition_results: Vec<Vec<TuneRecord>>) -> Result<Vec<TuneRecord>> {
    let mut flat: Vec<TuneRecord> = partition_results.into_iter().flatten().collect();
    let n = flat.len();
    let mut seen = vec![false; n];
    for r in &flat {
        let i = r.set.original_index;
        if i >= n || seen[i] {
            return Err(Error::Integrity(format!(
                "original_index {i} missing or duplicated in {n} records"
            )));
        }
        seen[i] = true;
    }
    flat.sort_by_key(|r| r.set.original_index);
    Ok(flat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn defs() -> Vec<HyperParamDef> {
        vec![
            HyperParamDef {
                name: "lr".into(),
                fusible: true,
                domain: Domain::Continuous { lo: 0.0001, hi: 0.01 },
            },
            HyperParamDef {
                name: "batch_size".into(),
                fusible: false,
                domain: Domain::Discrete {
                    choices: vec![
                        ParamValue::Num(8.0),
                        ParamValue::Num(16.0),
                        ParamValue::Num(32.0),
                    ],
                },
            },
        ]
    }

    fn set(lr: f64, batch: f64, idx: usize) -> HyperParamSet {
        let mut assignments = BTreeMap::new();
        assignments.insert("lr".to_string(), ParamValue::Num(lr));
        assignments.insert("batch_size".to_string(), ParamValue::Num(batch));
        HyperParamSet { assignments, original_index: idx }
    }

    #[test]
    fn shared_infusibles_form_one_partition() {
        let sets: Vec<_> = (0..4).map(|i| set(0.001 * (i + 1) as f64, 8.0, i)).collect();
        let parts = partition_and_fuse(&sets, &defs(), usize::MAX).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].b(), 4);
    }

    #[test]
    fn batch_sizes_split_partitions() {
        // {8, 8, 16} with batch size infusible -> partitions of sizes 2 and 1
        let sets = vec![set(0.001, 8.0, 0), set(0.002, 8.0, 1), set(0.003, 16.0, 2)];
        let parts = partition_and_fuse(&sets, &defs(), usize::MAX).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].b(), 2);
        assert_eq!(parts[1].b(), 1);
    }

    #[test]
    fn max_b_splits_by_ceiling() {
        let sets: Vec<_> = (0..5).map(|i| set(0.001, 8.0, i)).collect();
        let parts = partition_and_fuse(&sets, &defs(), 2).unwrap();
        let sizes: Vec<usize> = parts.iter().map(|p| p.b()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        // order preserved
        assert_eq!(parts[0].members[0].original_index, 0);
        assert_eq!(parts[2].members[0].original_index, 4);
    }

    #[test]
    fn out_of_domain_value_is_validation_error() {
        let sets = vec![set(0.5, 8.0, 0)];
        match partition_and_fuse(&sets, &defs(), 4) {
            Err(Error::Validation(msg)) => assert!(msg.contains("lr"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn reorder_is_identity_for_single_partition() {
        let recs = vec![vec![
            TuneRecord { set: set(0.1, 8.0, 0), metric: Some(1.0), cost_device_seconds: 0.0, error: None },
            TuneRecord { set: set(0.2, 8.0, 1), metric: Some(2.0), cost_device_seconds: 0.0, error: None },
        ]];
        let out = unfuse_and_reorder(recs).unwrap();
        assert_eq!(out[0].set.original_index, 0);
        assert_eq!(out[1].set.original_index, 1);
    }

    #[test]
    fn interleaved_indices_reorder() {
        let recs = vec![
            vec![
                TuneRecord { set: set(0.1, 8.0, 0), metric: Some(0.0), cost_device_seconds: 0.0, error: None },
                TuneRecord { set: set(0.2, 8.0, 2), metric: Some(0.0), cost_device_seconds: 0.0, error: None },
            ],
            vec![
                TuneRecord { set: set(0.3, 16.0, 1), metric: Some(0.0), cost_device_seconds: 0.0, error: None },
                TuneRecord { set: set(0.4, 16.0, 3), metric: Some(0.0), cost_device_seconds: 0.0, error: None },
            ],
        ];
        let out = unfuse_and_reorder(recs).unwrap();
        let order: Vec<usize> = out.iter().map(|r| r.set.original_index).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_input_reorders_to_empty() {
        assert!(unfuse_and_reorder(vec![]).unwrap().is_empty());
    }

    #[test]
    fn duplicate_index_is_integrity_error() {
        let recs = vec![vec![
            TuneRecord { set: set(0.1, 8.0, 0), metric: None, cost_device_seconds: 0.0, error: None },
            TuneRecord { set: set(0.2, 8.0, 0), metric: None, cost_device_seconds: 0.0, error: None },
        ]];
        assert!(matches!(unfuse_and_reorder(recs), Err(Error::Integrity(_))));
    }
}
