//! Tuning algorithms: random search and Hyperband. Both speak the same
//! propose/update protocol, so the tuner's loop and the schedulers are
//! oblivious to which one runs.

use crate::error::{Error, Result};
use crate::rng::StreamRng;

use super::{HyperParamDef, HyperParamSet, TuneRecord};

/// One proposed batch: sets (indexed 0..n within the batch) and the epoch
/// budget each evaluation gets.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sets: Vec<HyperParamSet>,
    pub epochs: f64,
    /// Bracket/round labels for reporting ((0,0) for random search).
    pub bracket: usize,
    pub round: usize,
}

pub trait TuneAlgorithm {
    /// The next batch to evaluate, or None when the algorithm is done.
    fn propose(&mut self) -> Option<Batch>;
    /// Feed back the records of the batch returned by the last `propose`.
    fn update(&mut self, records: &[TuneRecord]);
}

/// Uniform random sampling of `total_sets` sets, all evaluated at
/// `epochs_per_set`, in a single proposal.
pub struct RandomSearch {
    defs: Vec<HyperParamDef>,
    total_sets: usize,
    epochs_per_set: f64,
    rng: StreamRng,
    proposed: bool,
}

impl RandomSearch {
    pub fn new(
        defs: &[HyperParamDef],
        total_sets: usize,
        epochs_per_set: f64,
        rng: StreamRng,
    ) -> Result<Self> {
        if total_sets == 0 {
            return Err(Error::config("random search needs total_sets >= 1"));
        }
        for d in defs {
            d.domain.validate(&d.name)?;
        }
        Ok(RandomSearch {
            defs: defs.to_vec(),
            total_sets,
            epochs_per_set,
            rng,
            proposed: false,
        })
    }
}

impl TuneAlgorithm for RandomSearch {
    fn propose(&mut self) -> Option<Batch> {
        if self.proposed {
            return None;
        }
        self.proposed = true;
        let sets = (0..self.total_sets)
            .map(|i| HyperParamSet::sample(&self.defs, &mut self.rng, i))
            .collect();
        Some(Batch { sets, epochs: self.epochs_per_set, bracket: 0, round: 0 })
    }

    fn update(&mut self, _records: &[TuneRecord]) {}
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundSchedule {
    /// Configurations entering this round.
    pub n_i: usize,
    /// Epoch budget per configuration.
    pub r_i: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BracketSchedule {
    pub s: usize,
    /// Initial number of sampled configurations.
    pub n: usize,
    /// Initial epoch budget.
    pub r: f64,
    /// Rounds actually executed (after skipping the last `skip_last`).
    pub rounds: Vec<RoundSchedule>,
}

/// The bracket structure of Hyperband: s_max = floor(log_eta R) brackets of
/// successive halving, bracket s starting with n = ceil((s_max+1)/(s+1) *
/// eta^s) configurations at r = R * eta^-s epochs; round i of bracket s
/// evaluates floor(n * eta^-i) survivors at r * eta^i epochs. `skip_last`
/// truncates the final rounds of every bracket; brackets with no remaining
/// rounds sample configurations but evaluate nothing.
pub fn hyperband_schedule(r_max: u64, eta: u64, skip_last: usize) -> Result<Vec<BracketSchedule>> {
    if r_max < 1 {
        return Err(Error::config("hyperband needs R >= 1"));
    }
    if eta < 2 {
        return Err(Error::config("hyperband needs eta >= 2"));
    }
    let mut s_max = 0usize;
    while eta.pow(s_max as u32 + 1) <= r_max {
        s_max += 1;
    }
    if skip_last > s_max {
        return Err(Error::config(format!(
            "skip_last {skip_last} leaves no round in any bracket (s_max = {s_max})"
        )));
    }
    let mut brackets = Vec::with_capacity(s_max + 1);
    for s in (0..=s_max).rev() {
        let eta_s = eta.pow(s as u32) as f64;
        let n = ((s_max + 1) as f64 / (s + 1) as f64 * eta_s).ceil() as usize;
        let r = r_max as f64 / eta_s;
        let executed = (s + 1).saturating_sub(skip_last);
        let rounds = (0..executed)
            .map(|i| RoundSchedule {
                n_i: (n as f64 * (eta as f64).powi(-(i as i32))).floor() as usize,
                r_i: r * (eta as f64).powi(i as i32),
            })
            .collect();
        brackets.push(BracketSchedule { s, n, r, rounds });
    }
    Ok(brackets)
}

/// Hyperband over successive-halving brackets. Each (bracket, round) is one
/// proposal; survivors are re-proposed with eta times the budget.
pub struct Hyperband {
    defs: Vec<HyperParamDef>,
    schedule: Vec<BracketSchedule>,
    eta: u64,
    rng: StreamRng,
    bracket_idx: usize,
    round_idx: usize,
    /// Sets surviving into the current round (no batch indices yet).
    pending: Vec<HyperParamSet>,
}

impl Hyperband {
    pub fn new(
        defs: &[HyperParamDef],
        r_max: u64,
        eta: u64,
        skip_last: usize,
        rng: StreamRng,
    ) -> Result<Self> {
        for d in defs {
            d.domain.validate(&d.name)?;
        }
        let schedule = hyperband_schedule(r_max, eta, skip_last)?;
        Ok(Hyperband {
            defs: defs.to_vec(),
            schedule,
            eta,
            rng,
            bracket_idx: 0,
            round_idx: 0,
            pending: Vec::new(),
        })
    }

    pub fn schedule(&self) -> &[BracketSchedule] {
        &self.schedule
    }

    fn advance_bracket(&mut self) {
        self.bracket_idx += 1;
        self.round_idx = 0;
        self.pending.clear();
    }
}

impl TuneAlgorithm for Hyperband {
    fn propose(&mut self) -> Option<Batch> {
        loop {
            let bracket = self.schedule.get(self.bracket_idx)?;
            if self.round_idx >= bracket.rounds.len() {
                // bracket exhausted (possibly zero rounds under skip_last)
                if bracket.rounds.is_empty() {
                    // sample and discard: the reference behavior for fully
                    // skipped brackets; nothing is evaluated
                    for i in 0..bracket.n {
                        let _ = HyperParamSet::sample(&self.defs, &mut self.rng, i);
                    }
                }
                self.advance_bracket();
                continue;
            }
            if self.round_idx == 0 {
                self.pending = (0..bracket.n)
                    .map(|i| HyperParamSet::sample(&self.defs, &mut self.rng, i))
                    .collect();
            }
            let round = &bracket.rounds[self.round_idx];
            let sets: Vec<HyperParamSet> = self
                .pending
                .iter()
                .enumerate()
                .map(|(i, s)| HyperParamSet {
                    assignments: s.assignments.clone(),
                    original_index: i,
                })
                .collect();
            return Some(Batch {
                sets,
                epochs: round.r_i,
                bracket: bracket.s,
                round: self.round_idx,
            });
        }
    }

    fn update(&mut self, records: &[TuneRecord]) {
        let bracket = &self.schedule[self.bracket_idx];
        let round = &bracket.rounds[self.round_idx];
        // rank by metric (descending), failed records last; stable on index
        let mut ranked: Vec<&TuneRecord> = records.iter().collect();
        ranked.sort_by(|a, b| {
            let am = a.metric.unwrap_or(f64::NEG_INFINITY);
            let bm = b.metric.unwrap_or(f64::NEG_INFINITY);
            bm.total_cmp(&am).then(a.set.original_index.cmp(&b.set.original_index))
        });
        let keep = (round.n_i / self.eta as usize).min(ranked.len());
        self.pending = ranked
            .into_iter()
            .take(keep)
            .map(|r| r.set.clone())
            .collect();
        self.round_idx += 1;
        if self.round_idx >= bracket.rounds.len() || self.pending.is_empty() {
            self.advance_bracket();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hfht::Domain;

    fn lr_def() -> Vec<HyperParamDef> {
        vec![HyperParamDef {
            name: "lr".into(),
            fusible: true,
            domain: Domain::Continuous { lo: 0.0001, hi: 0.01 },
        }]
    }

    #[test]
    fn classic_81_3_bracket_table() {
        let s = hyperband_schedule(81, 3, 0).unwrap();
        let ns: Vec<usize> = s.iter().map(|b| b.n).collect();
        let rs: Vec<f64> = s.iter().map(|b| b.r).collect();
        assert_eq!(ns, vec![81, 34, 15, 8, 5]);
        assert_eq!(rs, vec![1.0, 3.0, 9.0, 27.0, 81.0]);
        for b in &s {
            assert_eq!(b.rounds.len(), b.s + 1);
            assert_eq!(b.rounds[0].n_i, b.n);
            assert!((b.rounds.last().unwrap().r_i - 81.0).abs() < 1e-9);
        }
    }

    #[test]
    fn r250_eta5_skip1_schedule() {
        let s = hyperband_schedule(250, 5, 1).unwrap();
        let ns: Vec<usize> = s.iter().map(|b| b.n).collect();
        assert_eq!(ns, vec![125, 34, 10, 4]);
        // skip_last removes exactly one round per bracket
        for b in &s {
            assert_eq!(b.rounds.len(), b.s); // (s+1) - 1
        }
    }

    #[test]
    fn skip_last_reduces_total_budget() {
        let total = |skip: usize| -> f64 {
            hyperband_schedule(81, 3, skip)
                .unwrap()
                .iter()
                .flat_map(|b| b.rounds.iter().map(|r| r.n_i as f64 * r.r_i))
                .sum()
        };
        assert!(total(1) < total(0));
        assert!(total(2) < total(1));
    }

    #[test]
    fn skip_last_beyond_biggest_bracket_rejected() {
        // R=81, eta=3: s_max = 4; skipping 5 rounds leaves nothing anywhere
        assert!(hyperband_schedule(81, 3, 5).is_err());
        assert!(hyperband_schedule(81, 3, 4).is_ok());
    }

    #[test]
    fn r1_behaves_like_single_round_random_search() {
        let mut hb = Hyperband::new(&lr_def(), 1, 3, 0, StreamRng::new(1)).unwrap();
        let batch = hb.propose().unwrap();
        assert_eq!(batch.epochs, 1.0);
        let records: Vec<TuneRecord> = batch
            .sets
            .iter()
            .map(|s| TuneRecord {
                set: s.clone(),
                metric: Some(s.get_f64("lr").unwrap()),
                cost_device_seconds: 0.0,
                error: None,
            })
            .collect();
        hb.update(&records);
        assert!(hb.propose().is_none());
    }

    #[test]
    fn survivors_shrink_by_eta_each_round() {
        let mut hb = Hyperband::new(&lr_def(), 9, 3, 0, StreamRng::new(2)).unwrap();
        let mut sizes = Vec::new();
        while let Some(batch) = hb.propose() {
            sizes.push(batch.sets.len());
            let records: Vec<TuneRecord> = batch
                .sets
                .iter()
                .map(|s| TuneRecord {
                    set: s.clone(),
                    metric: Some(-s.get_f64("lr").unwrap()),
                    cost_device_seconds: 0.0,
                    error: None,
                })
                .collect();
            hb.update(&records);
        }
        // brackets: s=2 (n=9: rounds 9,3,1), s=1 (n=5: 5,1), s=0 (n=3: 3)
        assert_eq!(sizes, vec![9, 3, 1, 5, 1, 3]);
    }

    #[test]
    fn random_search_proposes_once_with_all_sets() {
        let mut rs = RandomSearch::new(&lr_def(), 7, 2.0, StreamRng::new(3)).unwrap();
        let batch = rs.propose().unwrap();
        assert_eq!(batch.sets.len(), 7);
        assert!(rs.propose().is_none());
    }

    #[test]
    fn fixed_seed_gives_identical_proposals() {
        let batch1 = RandomSearch::new(&lr_def(), 5, 1.0, StreamRng::new(9))
            .unwrap()
            .propose()
            .unwrap();
        let batch2 = RandomSearch::new(&lr_def(), 5, 1.0, StreamRng::new(9))
            .unwrap()
            .propose()
            .unwrap();
        assert_eq!(batch1.sets, batch2.sets);
    }
}
