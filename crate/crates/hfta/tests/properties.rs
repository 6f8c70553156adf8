//! Property tests for the structural invariants: inverse pairs, bijective
//! layout adapters, partition coverage, and Hyperband's survivor structure.

use proptest::prelude::*;

use hfta::hfht::algorithms::{Hyperband, TuneAlgorithm};
use hfta::hfht::{partition_and_fuse, Domain, HyperParamDef, HyperParamSet, TuneRecord};
use hfta::ops::layout::{layout_adapt, FusedLayout};
use hfta::rng::StreamRng;
use hfta::tensor::Tensor;

fn tensor_strategy(max_numel: usize) -> impl Strategy<Value = Tensor> {
    (1usize..5, 1usize..5, 1usize..4)
        .prop_filter("bounded", move |(a, b, c)| a * b * c <= max_numel)
        .prop_flat_map(|(a, b, c)| {
            prop::collection::vec(-1.0..1.0f64, a * b * c)
                .prop_map(move |data| Tensor::new(vec![a, b, c], data).unwrap())
        })
}

proptest! {
    #[test]
    fn split_concat_is_identity(t in tensor_strategy(64), axis in 0usize..3, seed in 0u64..1000) {
        let mut rng = StreamRng::new(seed);
        let extent = t.shape()[axis];
        // random partition of the axis extent
        let mut extents = Vec::new();
        let mut left = extent;
        while left > 0 {
            let take = 1 + rng.below(left);
            extents.push(take);
            left -= take;
        }
        let parts = t.split(axis, &extents).unwrap();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let back = Tensor::concat(&refs, axis).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn layout_adapters_round_trip(
        n in 1usize..4,
        c in 1usize..4,
        s in 1usize..4,
        b in 1usize..5,
        from_idx in 0usize..3,
        to_idx in 0usize..3,
        seed in 0u64..1000,
    ) {
        let layouts = [FusedLayout::ChannelFolded, FusedLayout::ModelLeading, FusedLayout::ModelMid];
        let (from, to) = (layouts[from_idx], layouts[to_idx]);
        let serial = [n, c, s];
        let fused_shape = from.fused_shape(&serial, b).unwrap();
        let mut rng = StreamRng::new(seed);
        let x = Tensor::rand_uniform(&fused_shape, 1.0, &mut rng);
        let there = layout_adapt(&x, from, to, b).unwrap();
        let back = layout_adapt(&there, to, from, b).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn partitions_cover_every_set_exactly_once(
        n in 1usize..20,
        max_b in 1usize..6,
        seed in 0u64..1000,
    ) {
        let defs = vec![
            HyperParamDef {
                name: "lr".into(),
                fusible: true,
                domain: Domain::Continuous { lo: 0.001, hi: 0.01 },
            },
            HyperParamDef {
                name: "width".into(),
                fusible: false,
                domain: Domain::Discrete {
                    choices: vec![
                        hfta::hfht::ParamValue::Num(1.0),
                        hfta::hfht::ParamValue::Num(2.0),
                    ],
                },
            },
        ];
        let mut rng = StreamRng::new(seed);
        let sets: Vec<HyperParamSet> =
            (0..n).map(|i| HyperParamSet::sample(&defs, &mut rng, i)).collect();
        let parts = partition_and_fuse(&sets, &defs, max_b).unwrap();
        let mut seen = vec![0usize; n];
        for p in &parts {
            prop_assert!(p.b() <= max_b);
            for m in &p.members {
                seen[m.original_index] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }
}

/// With skip_last = 0 and a metric monotone in one hyperparameter, each
/// bracket's best initial set survives every halving round, so the winner
/// always comes from the final surviving round of some bracket.
#[test]
fn hyperband_best_survives_to_a_final_round() {
    let defs = vec![HyperParamDef {
        name: "lr".into(),
        fusible: true,
        domain: Domain::Continuous { lo: 0.0, hi: 1.0 },
    }];
    for seed in [1u64, 2, 3] {
        let mut hb = Hyperband::new(&defs, 27, 3, 0, StreamRng::new(seed)).unwrap();
        // bracket -> (best lr of its first round, lrs of its last round)
        let mut first_best: std::collections::BTreeMap<usize, f64> = Default::default();
        let mut last_round_lrs: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
        while let Some(batch) = hb.propose() {
            let lrs: Vec<f64> = batch.sets.iter().map(|s| s.get_f64("lr").unwrap()).collect();
            if batch.round == 0 {
                first_best.insert(batch.bracket, lrs.iter().cloned().fold(f64::MIN, f64::max));
            }
            last_round_lrs.insert(batch.bracket, lrs.clone());
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
        }
        for (bracket, best) in &first_best {
            let last = &last_round_lrs[bracket];
            assert!(
                last.contains(best),
                "seed {seed}: bracket {bracket}'s best set was eliminated before its final round"
            );
        }
    }
}
