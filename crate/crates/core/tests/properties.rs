use mgg_core::backbone::{self, BackboneConfig, BlockSpec, InputShape};
use mgg_core::groups::{validate, AttributeCatalog, Group, GroupAssignment, GroupId};
use mgg_core::heads::{bce, class_weights, fuse, weighted_bce};
use mgg_core::metrics::{MetricCounters, DEFAULT_THRESHOLD};
use mgg_core::nn::Mode;
use mgg_core::params::ParamStore;
use mgg_core::{Tape, Tensor};
use proptest::prelude::*;

fn counters_from(samples: &[(usize, f64, bool)], n: usize) -> MetricCounters {
    let mut c = MetricCounters::new(n, DEFAULT_THRESHOLD);
    for &(a, p, y) in samples {
        c.accumulate(a, p, y);
    }
    c
}

fn sample_strategy() -> impl Strategy<Value = Vec<(usize, f64, bool)>> {
    prop::collection::vec((0usize..3, 0.0f64..=1.0, any::<bool>()), 0..200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    /// Any split of a stream into shards, merged in any grouping or order,
    /// gives the counters of the unsplit stream.
    #[test]
    fn metric_merge_is_associative_and_commutative(samples in sample_strategy(), cuts in prop::collection::vec(0.0f64..1.0, 2)) {
        let n = samples.len();
        let mut idx: Vec<usize> = cuts.iter().map(|c| (c * n as f64) as usize).collect();
        idx.sort_unstable();
        let (a, rest) = samples.split_at(idx[0]);
        let (b, c) = rest.split_at(idx[1] - idx[0]);
        let (ca, cb, cc) = (counters_from(a, 3), counters_from(b, 3), counters_from(c, 3));
        let whole = counters_from(&samples, 3);

        let mut left = ca.clone();
        left.merge(&cb);
        left.merge(&cc);
        let mut bc = cb.clone();
        bc.merge(&cc);
        let mut right = ca.clone();
        right.merge(&bc);
        let mut reversed = cc.clone();
        reversed.merge(&cb);
        reversed.merge(&ca);
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(&right, &whole);
        prop_assert_eq!(&reversed, &whole);
        prop_assert!(whole.attrs.iter().all(|x| x.is_consistent()));
        prop_assert_eq!(left.finalize(), whole.finalize());
    }
}

proptest! {
    #[test]
    fn shuffled_partitions_validate(n in 2usize..40, k in 1usize..8, seed in any::<u64>()) {
        let k = k.min(n);
        let mut order: Vec<usize> = (1..=n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(i, (s >> 33) as usize % (i + 1));
        }
        let groups: Vec<Group> = (0..k)
            .map(|g| Group { name: format!("g{g}"), attrs: order.iter().skip(g).step_by(k).copied().collect() })
            .collect();
        let assignment = GroupAssignment::from_groups(groups);
        let catalog = AttributeCatalog::numbered(n);
        prop_assert!(validate(&assignment, &catalog).is_empty());
        for a in 1..=n {
            let g = assignment.group_of(a).unwrap();
            prop_assert!(assignment.attrs_of(g).unwrap().contains(&a));
        }
        prop_assert_eq!(assignment.attr_count(), n);
        prop_assert!(assignment.group_of(n + 1).is_err());
        prop_assert!(assignment.attrs_of(GroupId(k)).is_err());
    }

    #[test]
    fn forward_shapes_are_a_function_of_config(
        specs in prop::collection::vec((1usize..5, 1usize..3, prop::bool::ANY), 1..4),
        base in 1usize..3,
        batch in 1usize..3,
    ) {
        let blocks: Vec<BlockSpec> = specs
            .iter()
            .map(|&(c, n, ds)| BlockSpec { out_channels: c, conv_count: n, downsample: if ds { 2 } else { 1 } })
            .collect();
        let factor: usize = blocks.iter().map(|b| b.downsample).product();
        let side = factor * (base + 1);
        let cfg = BackboneConfig {
            input: InputShape { channels: 2, height: side, width: 2 * side },
            tap_blocks: (1..=blocks.len()).collect(),
            blocks,
        };
        let mut store = ParamStore::new(0);
        cfg.register(&mut store).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[batch, 2, side, 2 * side], 0.5));
        let taps = backbone::backbone_forward(&mut tape, &mut store, &cfg, x, Mode::Eval).unwrap();
        let got: Vec<(usize, usize, usize)> = taps.iter().map(|t| {
            let s = tape.shape(t.var);
            (s[1], s[2], s[3])
        }).collect();
        prop_assert_eq!(got, cfg.tap_shapes());
        let last = cfg.block_shapes().last().copied().unwrap();
        prop_assert_eq!(last.1 * factor, side);
    }

    #[test]
    fn losses_are_nonnegative(p in 0.0f64..=1.0, y in any::<bool>(), s in 1usize..64, frac in 0.0f64..=1.0) {
        let pos = ((s as f64) * frac) as usize;
        let y = f64::from(u8::from(y));
        prop_assert!(bce(p, y) >= 0.0 && bce(p, y).is_finite());
        prop_assert!(weighted_bce(p, y, s, pos) >= 0.0);
        let (wp, wn) = class_weights(s, pos);
        prop_assert!((wp + wn - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_is_a_convex_combination(base in 0.0f64..=1.0, gcl in prop::collection::vec(0.0f64..=1.0, 1..4)) {
        let y = fuse(base, &gcl);
        let lo = gcl.iter().copied().fold(base, f64::min);
        let hi = gcl.iter().copied().fold(base, f64::max);
        prop_assert!(y >= lo - 1e-15 && y <= hi + 1e-15);
    }
}

#[test]
fn weighted_loss_identities() {
    for &p in &[1e-3, 0.2, 0.5, 0.8, 0.999] {
        for y in [0.0, 1.0] {
            for s in [2usize, 4, 32, 144] {
                assert_eq!(weighted_bce(p, y, s, s / 2), 0.5 * bce(p, y));
            }
        }
    }
    assert_eq!(weighted_bce(0.8, 1.0, 4, 4), 0.0);
    assert_eq!(weighted_bce(0.3, 0.0, 4, 0), 0.0);
    assert!((weighted_bce(0.8, 1.0, 4, 1) - 0.75 * -(0.8f64.ln())).abs() < 1e-15);
    assert!((weighted_bce(0.8, 1.0, 4, 1) - 0.167_358).abs() < 1e-6);
}
