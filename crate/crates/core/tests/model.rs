//! Backbone, group attention, heads and loss wired together.

use mgg_core::backbone::{self, BackboneConfig, BlockSpec, InputShape};
use mgg_core::gal;
use mgg_core::gradcheck;
use mgg_core::groups::GroupAssignment;
use mgg_core::heads::{self, Labels, LossMode};
use mgg_core::model::{MggModel, ModelConfig, Variant};
use mgg_core::nn::Mode;
use mgg_core::params::{owner, ParamStore};
use mgg_core::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_backbone() -> BackboneConfig {
    BackboneConfig {
        input: InputShape { channels: 3, height: 16, width: 16 },
        blocks: vec![
            BlockSpec { out_channels: 4, conv_count: 1, downsample: 2 },
            BlockSpec { out_channels: 6, conv_count: 2, downsample: 2 },
            BlockSpec { out_channels: 8, conv_count: 1, downsample: 2 },
        ],
        tap_blocks: vec![2, 3],
    }
}

fn face_model() -> MggModel {
    let cfg = ModelConfig { backbone: small_backbone(), n_attrs: 40, alpha: 0.5, variant: Variant::Full };
    MggModel::new(cfg, GroupAssignment::face_default()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn images(seed: u64, batch: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = random(&mut rng, &[batch, 3, 16, 16]);
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.abs()).collect()).unwrap()
}

fn labels(seed: u64, batch: usize, n: usize) -> Labels {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Labels::new(batch, n, (0..batch * n).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap()
}

#[test]
fn preset_tap_shapes() {
    assert_eq!(BackboneConfig::desk_64().tap_shapes(), [(64, 8, 8), (128, 4, 4)]);
    assert_eq!(BackboneConfig::synthetic_32().tap_shapes(), [(16, 8, 8), (32, 4, 4)]);
    let reference = BackboneConfig::reference_224().tap_shapes();
    assert_eq!((reference[0].1, reference[0].2), (28, 28));
    assert_eq!((reference[1].1, reference[1].2), (14, 14));
}

#[test]
fn indivisible_input_is_rejected() {
    let mut cfg = small_backbone();
    cfg.input.height = 18;
    assert!(cfg.validate().is_err());
    cfg.input.height = 16;
    cfg.tap_blocks = vec![3, 2];
    assert!(cfg.validate().is_err());
    cfg.tap_blocks = vec![];
    assert!(cfg.validate().is_err());
}

#[test]
fn forward_shapes_match_declared_shapes() {
    let cfg = small_backbone();
    let mut store = ParamStore::new(1);
    cfg.register(&mut store).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(0, 2));
    let taps = backbone::backbone_forward(&mut tape, &mut store, &cfg, x, Mode::Train).unwrap();
    let got: Vec<(usize, usize, usize)> = taps
        .iter()
        .map(|t| {
            let s = tape.shape(t.var);
            (s[1], s[2], s[3])
        })
        .collect();
    assert_eq!(got, cfg.tap_shapes());
    assert_eq!(taps.iter().map(|t| t.block).collect::<Vec<_>>(), [2, 3]);
}

#[test]
fn zero_batch_in_eval_mode_is_finite() {
    let cfg = BackboneConfig::desk_64();
    let mut store = ParamStore::new(1);
    cfg.register(&mut store).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
    let taps = backbone::backbone_forward(&mut tape, &mut store, &cfg, x, Mode::Eval).unwrap();
    assert!(taps.iter().all(|t| tape.value(t.var).data().iter().all(|v| v.is_finite())));
}

/// Taps read the live activations: a block-2 weight moves both taps, a
/// block-3 weight only the last.
#[test]
fn taps_alias_intermediate_activations() {
    let cfg = small_backbone();
    let mut store = ParamStore::new(2);
    cfg.register(&mut store).unwrap();
    let x = images(1, 2);
    let run = |store: &ParamStore| -> Vec<Vec<f64>> {
        let mut s = store.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let taps = backbone::backbone_forward(&mut tape, &mut s, &cfg, xv, Mode::Eval).unwrap();
        taps.iter().map(|t| tape.value(t.var).data().to_vec()).collect()
    };
    let before = run(&store);
    for (name, changed) in
        [("backbone.block2.layer0.conv.weight", [true, true]), ("backbone.block3.layer0.conv.weight", [false, true])]
    {
        let mut s = store.clone();
        let id = s.id(name).unwrap();
        s.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.05);
        let after = run(&s);
        for t in 0..2 {
            assert_eq!(after[t] != before[t], changed[t], "{name} tap {t}");
        }
    }
}

/// `out[b, c] = mean_{h,w} F[b, c, h, w] * M[b, 0, h, w]`, summed in a plain triple loop.
fn masked_mean(f: &Tensor, m: &Tensor) -> Vec<f64> {
    let [b, c, h, w] = f.shape().try_into().unwrap();
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += f.data()[((bi * c + ci) * h + y) * w + x] * m.data()[(bi * h + y) * w + x];
                }
            }
            out[bi * c + ci] = s / (h * w) as f64;
        }
    }
    out
}

#[test]
fn masked_pool_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let shape = [rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..7), rng.random_range(1..7)];
        let f = random(&mut rng, &shape);
        let m = Tensor::new(
            vec![shape[0], 1, shape[2], shape[3]],
            (0..shape[0] * shape[2] * shape[3]).map(|_| rng.random::<f64>()).collect(),
        )
        .unwrap();
        let mut tape = Tape::new();
        let (fv, mv) = (tape.constant(f.clone()), tape.constant(m.clone()));
        let pooled = gal::masked_pool(&mut tape, fv, mv).unwrap();
        assert_eq!(tape.shape(pooled), [shape[0], shape[1]]);
        for (a, e) in tape.value(pooled).data().iter().zip(masked_mean(&f, &m)) {
            assert!((a - e).abs() <= 1e-12);
        }
    }
}

#[test]
fn masked_pool_identity_and_annihilation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random(&mut rng, &[2, 3, 4, 4]);
    let mut tape = Tape::new();
    let fv = tape.constant(f);
    let ones = tape.constant(Tensor::full(&[2, 1, 4, 4], 1.0));
    let zeros = tape.constant(Tensor::zeros(&[2, 1, 4, 4]));
    let gap = tape.global_avg_pool(fv).unwrap();
    let a = gal::masked_pool(&mut tape, fv, ones).unwrap();
    let z = gal::masked_pool(&mut tape, fv, zeros).unwrap();
    assert_eq!(tape.value(a).data(), tape.value(gap).data());
    assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_features_cover_every_block_and_group() {
    let model = face_model();
    let mut store = model.init_params(3).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, 2));
    let out = model.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
    let gal_out = out.gal.unwrap();
    assert_eq!(gal_out.feature_count(), 16);
    for (t, tap) in out.taps.iter().enumerate() {
        let s = tape.shape(tap.var).to_vec();
        for g in 0..8 {
            let mask = tape.value(gal_out.masks[t][g]);
            assert_eq!(mask.shape(), [2, 1, s[2], s[3]]);
            assert!(mask.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(tape.shape(gal_out.features[t][g]), [2, s[1]]);
        }
    }
    let tiny = gradcheck::tiny_model().unwrap();
    let mut store = tiny.init_params(3).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(2, 2));
    assert_eq!(tiny.forward(&mut tape, &mut store, x, Mode::Train).unwrap().gal.unwrap().feature_count(), 6);
}

/// Each `(block, group)` feature moves only with its own attention weights.
#[test]
fn attention_modules_are_independent() {
    let model = gradcheck::tiny_model().unwrap();
    let store = model.init_params(4).unwrap();
    let x = images(3, 2);
    let features = |store: &ParamStore| -> Vec<Vec<Vec<f64>>> {
        let mut s = store.clone();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = model.forward(&mut tape, &mut s, xv, Mode::Eval).unwrap();
        out.gal.unwrap().features.iter().map(|row| row.iter().map(|&v| tape.value(v).data().to_vec()).collect()).collect()
    };
    let before = features(&store);
    for (t, block) in [2, 3].into_iter().enumerate() {
        for g in 0..3 {
            let mut s = store.clone();
            let id = s.id(&format!("gal.block{block}.group{g}.conv2.bias")).unwrap();
            s.value_mut(id).data_mut()[0] += 0.3;
            let after = features(&s);
            for (tt, row) in after.iter().enumerate() {
                for (gg, f) in row.iter().enumerate() {
                    assert_eq!(f != &before[tt][gg], (tt, gg) == (t, g), "perturbed ({block},{g}), looked at ({tt},{gg})");
                }
            }
        }
    }
}

#[test]
fn loss_term_counts() {
    let tiny = gradcheck::tiny_model().unwrap();
    let mut store = tiny.init_params(1).unwrap();
    let (_, terms) = tiny.loss(&mut store, &images(0, 3), &labels(0, 3, 6), LossMode::Plain, Mode::Train).unwrap();
    assert_eq!(terms.terms.len(), 36);

    let base = MggModel::new(ModelConfig { variant: Variant::BaseOnly, ..tiny.config().clone() }, tiny.groups().clone()).unwrap();
    let mut store = base.init_params(1).unwrap();
    let (_, terms) = base.loss(&mut store, &images(0, 3), &labels(0, 3, 6), LossMode::Plain, Mode::Train).unwrap();
    assert_eq!(terms.terms.len(), 6);
    assert!(terms.labels.iter().all(|l| l.starts_with("bce/base/")));
}

/// Zero head weights and biases make every prediction exactly 0.5.
pub fn neutral_heads(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().filter(|&id| owner(store.name(id)) == "heads").collect();
    for id in ids {
        store.value_mut(id).data_mut().fill(0.0);
    }
}

#[test]
fn forty_attributes_at_one_half_cost_240_ln2() {
    let model = face_model();
    let mut store = model.init_params(9).unwrap();
    neutral_heads(&mut store);
    let (tape, terms) = model.loss(&mut store, &images(4, 3), &labels(4, 3, 40), LossMode::Plain, Mode::Train).unwrap();
    let report = terms.report(&tape);
    assert_eq!(report.terms.len(), 240);
    assert!((report.total - 240.0 * std::f64::consts::LN_2).abs() < 1e-6);
    let sum: f64 = report.terms.iter().map(|t| t.1).sum();
    assert!((sum - report.total).abs() < 1e-9);
}

#[test]
fn balanced_batch_halves_plain_loss() {
    let model = gradcheck::tiny_model().unwrap();
    // Every attribute has exactly two positives in a batch of four.
    let rows = [[1, 0, 1, 1, 0, 0], [0, 1, 1, 0, 1, 0], [1, 1, 0, 0, 1, 1], [0, 0, 0, 1, 0, 1]];
    let labels = Labels::new(4, 6, rows.iter().flatten().copied().collect()).unwrap();
    let x = images(6, 4);
    let mut store = model.init_params(2).unwrap();
    let (t1, plain) = model.loss(&mut store.clone(), &x, &labels, LossMode::Plain, Mode::Train).unwrap();
    let (t2, bal) = model.loss(&mut store, &x, &labels, LossMode::Balanced, Mode::Train).unwrap();
    let (p, b) = (t1.value(plain.total).item().unwrap(), t2.value(bal.total).item().unwrap());
    assert!((b - p / 2.0).abs() <= 1e-12 * p, "{b} vs {p}");
}

#[test]
fn every_parameter_family_receives_gradient() {
    let model = gradcheck::tiny_model().unwrap();
    let mut store = model.init_params(5).unwrap();
    model.gradients(&mut store, &images(7, 4), &labels(7, 4, 6), LossMode::Plain, None).unwrap();
    for family in gradcheck::FAMILIES {
        let nonzero =
            store.iter().filter(|(n, _)| owner(n) == family).any(|(_, p)| p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)));
        assert!(nonzero, "{family}");
    }
    // Each head tensor trains: base, and GAL/GCL stacks of every block and group.
    for (name, p) in store.iter().filter(|(n, _)| n.starts_with("heads.") && n.ends_with(".weight")) {
        assert!(p.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0)), "{name}");
    }
}

#[test]
fn forward_and_backward_are_bit_identical() {
    let model = gradcheck::tiny_model().unwrap();
    let run = || {
        let mut store = model.init_params(8).unwrap();
        let loss = model.gradients(&mut store, &images(9, 4), &labels(9, 4, 6), LossMode::Balanced, None).unwrap();
        let grads: Vec<u64> =
            store.iter().flat_map(|(_, p)| p.grad().unwrap_or(&[]).iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
        (loss.to_bits(), grads)
    };
    assert_eq!(run(), run());
}

#[test]
fn predictions_are_probabilities_and_fused_from_graph_heads() {
    let model = gradcheck::tiny_model().unwrap();
    let mut store = model.init_params(10).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(images(10, 3));
    let out = model.forward(&mut tape, &mut store, x, Mode::Train).unwrap();
    let p = &out.preds;
    let all: Vec<Var> =
        p.fused.iter().chain(&p.base).chain(p.gal.iter().flatten()).chain(p.gcl.iter().flatten()).copied().collect();
    for v in all {
        assert!(tape.value(v).data().iter().all(|x| *x > 0.0 && *x < 1.0));
    }
    for a in 0..6 {
        for s in 0..3 {
            let gcl: Vec<f64> = p.gcl.iter().map(|b| tape.value(b[a]).data()[s]).collect();
            let want = heads::fuse(tape.value(p.base[a]).data()[s], &gcl);
            assert!((tape.value(p.fused[a]).data()[s] - want).abs() < 1e-15);
        }
    }
}
