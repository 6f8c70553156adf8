//! Kernel-invocation counter.
//!
//! Every forward kernel bumps a named counter on entry. The fused path must
//! issue exactly one kernel invocation per layer regardless of how many
//! models are fused, which is the mechanism behind the throughput gains;
//! tests assert this directly by snapshotting the counter.

use std::collections::BTreeMap;
use std::sync::Mutex;

static COUNTS: Mutex<BTreeMap<&'static str, u64>> = Mutex::new(BTreeMap::new());

pub fn bump(kernel: &'static str) {
    let mut m = COUNTS.lock().unwrap();
    *m.entry(kernel).or_insert(0) += 1;
}

pub fn reset() {
    COUNTS.lock().unwrap().clear();
}

pub fn snapshot() -> BTreeMap<&'static str, u64> {
    COUNTS.lock().unwrap().clone()
}

pub fn count(kernel: &str) -> u64 {
    COUNTS.lock().unwrap().get(kernel).copied().unwrap_or(0)
}
