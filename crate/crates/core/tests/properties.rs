use std::collections::BTreeMap;
use std::path::Path;

use lotto_core::criteria::{
    block_saliency, grasp_saliency, score, score_filters_at_init, score_random, snip_saliency, Criterion,
    ScoringBatch,
};
use lotto_core::data::{corrupt, parse_cifar10_binary, synthetic_dataset_sized, CorruptionKind, CorruptionSpec, Dataset, CIFAR_RECORD};
use lotto_core::metrics::{carbon_estimate, cka_linear, count_flops, count_params, flop_breakdown};
use lotto_core::model::{
    backward, backward_scaled, build_resnet_for_input, forward_pure, removable_blocks, BlockId, Mode, NetworkSpec, ParamStore, Shortcut,
};
use lotto_core::model::params::randomize;
use lotto_core::pruning::{filter_target_range, masked_equivalent, prune_filters, remove_layers, PruningPlan};
use lotto_core::seed::{stream_rng, Stream};
use lotto_core::Tensor;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn small_spec() -> impl Strategy<Value = NetworkSpec> {
    (1usize..=3, 1usize..=3, 2usize..=4).prop_map(|(per_stage, width, classes)| {
        build_resnet_for_input(6 * per_stage + 2, classes, width, 8).unwrap()
    })
}

fn random_input(seed: u64, n: usize, size: usize) -> Tensor {
    let mut rng = stream_rng(seed, Stream::Synthetic, 99);
    let data = (0..n * 3 * size * size).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::from_vec(&[n, 3, size, size], data).unwrap()
}

fn random_params(spec: &NetworkSpec, seed: u64) -> ParamStore {
    let mut params = ParamStore::init(spec, seed);
    randomize(&mut params, &mut stream_rng(seed, Stream::Init, 7), 0.5);
    params
}

type Scores = BTreeMap<BlockId, f64>;

fn scaled_saliency(spec: &NetworkSpec, params: &ParamStore<f64>, x: &Tensor<f64>, labels: &[usize], c: f64) -> (Scores, Scores) {
    let grads = backward_scaled(spec, params, x, labels, Mode::Train, c).unwrap().grads;
    (
        block_saliency(spec, params, &grads, snip_saliency).unwrap(),
        block_saliency(spec, params, &grads, grasp_saliency).unwrap(),
    )
}

fn subset(all: &[BlockId], mask: &[bool]) -> Vec<BlockId> {
    all.iter().zip(mask.iter().cycle()).filter(|(_, &m)| m).map(|(b, _)| *b).collect()
}

/// Independent shape walk ending at a classifier that expects `features`
/// input channels.
fn shapes_compatible(spec: &NetworkSpec, features: usize) -> bool {
    let d = spec.input_shape.dims();
    let (mut c, mut h) = (d[1], d[2]);
    if spec.stem.in_channels != c {
        return false;
    }
    let Some(s) = spec.stem.out_size(h) else { return false };
    c = spec.stem.out_channels;
    h = s;
    for b in spec.stages.iter().flatten() {
        if b.conv1.in_channels != c || b.conv2.in_channels != b.conv1.out_channels {
            return false;
        }
        let Some(h2) = b.conv1.out_size(h).and_then(|h1| b.conv2.out_size(h1)) else { return false };
        let ok = match b.shortcut {
            Shortcut::Identity => c == b.conv2.out_channels && h == h2,
            Shortcut::Projection(p) => p.in_channels == c && p.out_channels == b.conv2.out_channels && p.out_size(h) == Some(h2),
        };
        if !ok {
            return false;
        }
        c = b.conv2.out_channels;
        h = h2;
    }
    c == features
}

#[test]
fn removable_matches_brute_force_up_to_30_blocks() {
    for per_stage in 1..=10 {
        for width in [1, 4] {
            let spec = build_resnet_for_input(6 * per_stage + 2, 10, width, 32).unwrap();
            let features = 4 * width;
            let oracle: Vec<BlockId> = spec
                .blocks()
                .map(|b| b.block_id)
                .filter(|&id| {
                    let mut s = spec.clone();
                    s.stages.iter_mut().for_each(|st| st.retain(|b| b.block_id != id));
                    shapes_compatible(&s, features)
                })
                .collect();
            assert_eq!(removable_blocks(&spec), oracle, "depth {}", 6 * per_stage + 2);
        }
    }
}

#[test]
fn identity_only_stage_is_fully_removable() {
    let mut spec = build_resnet_for_input(20, 10, 2, 8).unwrap();
    spec.stages.truncate(1);
    let all: Vec<BlockId> = spec.blocks().map(|b| b.block_id).collect();
    assert_eq!(removable_blocks(&spec), all);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn removed_matches_masked(spec in small_spec(), mask in prop::collection::vec(any::<bool>(), 1..9), seed in 0u64..1000) {
        let victims = subset(&removable_blocks(&spec), &mask);
        let params = random_params(&spec, seed);
        let plan = PruningPlan::new(victims, "test");
        let (sub, sub_params) = remove_layers(&spec, &params, &plan).unwrap();
        let masked = masked_equivalent(&spec, &params, &plan).unwrap();
        let x = random_input(seed, 3, 8);
        for mode in [Mode::Train, Mode::Eval] {
            let a = forward_pure(&sub, &sub_params, &x, mode).unwrap().0.logits;
            let b = forward_pure(&spec, &masked, &x, mode).unwrap().0.logits;
            prop_assert!(a.max_abs_diff(&b) <= 1e-5);
        }
    }

    #[test]
    fn removal_order_does_not_matter(spec in small_spec(), mask in prop::collection::vec(any::<bool>(), 1..9), seed in 0u64..1000) {
        let victims = subset(&removable_blocks(&spec), &mask);
        prop_assume!(victims.len() >= 2);
        let params = random_params(&spec, seed);
        let (one_shot, one_params) = remove_layers(&spec, &params, &PruningPlan::new(victims.clone(), "t")).unwrap();
        let mut reversed = victims.clone();
        reversed.reverse();
        let (rev, rev_params) = remove_layers(&spec, &params, &PruningPlan::new(reversed.clone(), "t")).unwrap();
        let (mut s, mut p) = (spec.clone(), params.clone());
        for v in reversed {
            (s, p) = remove_layers(&s, &p, &PruningPlan::new(vec![v], "t")).unwrap();
        }
        prop_assert_eq!(&one_shot, &rev);
        prop_assert_eq!(&one_shot, &s);
        prop_assert!(one_params.bitwise_eq(&rev_params));
        prop_assert!(one_params.bitwise_eq(&p));
    }

    #[test]
    fn costs_strictly_decrease_per_victim(spec in small_spec(), mask in prop::collection::vec(any::<bool>(), 1..9)) {
        let victims = subset(&removable_blocks(&spec), &mask);
        let mut last = (count_flops(&spec).unwrap(), count_params(&spec));
        for k in 1..=victims.len() {
            let sub = spec.without_blocks(&victims[..k]).unwrap();
            let now = (count_flops(&sub).unwrap(), count_params(&sub));
            prop_assert!(now.0 < last.0 && now.1 < last.1);
            let b = flop_breakdown(&sub).unwrap();
            prop_assert_eq!(b.stem + b.blocks.iter().map(|(_, f)| f).sum::<u64>() + b.head, b.total);
            last = now;
        }
    }

    #[test]
    fn filter_pruning_keeps_spatial_shapes(spec in small_spec(), frac in 0.0f64..=1.0, seed in 0u64..100) {
        let params = ParamStore::init(&spec, seed);
        let x = random_input(seed, 4, 8);
        let labels: Vec<usize> = (0..4).map(|i| i % spec.num_classes).collect();
        let batch = ScoringBatch { images: x, labels, seed, bn_mode: Mode::Train };
        let report = score_filters_at_init(&spec, &params, &batch, Criterion::Snip).unwrap();
        let (min, max) = filter_target_range(&spec);
        let target = min + ((max - min) as f64 * frac).round() as usize;
        let (sub, sub_params, plan) = prune_filters(&spec, &params, &report, target).unwrap();
        prop_assert_eq!(plan.achieved_filter_count, target);
        sub_params.check(&sub).unwrap();
        let dense_plan = spec.shape_plan().unwrap();
        let sub_plan = sub.shape_plan().unwrap();
        for ((ida, _, outa), (idb, _, outb)) in dense_plan.blocks.iter().zip(&sub_plan.blocks) {
            prop_assert_eq!(ida, idb);
            prop_assert_eq!((outa.height, outa.width, outa.channels), (outb.height, outb.width, outb.channels));
        }
    }

    #[test]
    fn saliency_is_scale_equivariant(seed in 0u64..200, c in 0.01f64..100.0) {
        let spec = build_resnet_for_input(14, 3, 2, 8).unwrap();
        let params: ParamStore<f64> = ParamStore::<f32>::init(&spec, seed).cast();
        let x: Tensor<f64> = random_input(seed, 6, 8).cast();
        let labels: Vec<usize> = (0..6).map(|i| i % 3).collect();
        let (snip1, grasp1) = scaled_saliency(&spec, &params, &x, &labels, 1.0);
        let (snipc, graspc) = scaled_saliency(&spec, &params, &x, &labels, c);
        for (id, s) in &snip1 {
            prop_assert!(*s >= 0.0);
            prop_assert!((snipc[id] - c * s).abs() <= 1e-9 * (c * s).abs().max(1e-12));
            prop_assert!((graspc[id] - c * grasp1[id]).abs() <= 1e-9 * (c * grasp1[id]).abs().max(1e-12));
        }
        let order = |m: &BTreeMap<BlockId, f64>| {
            let mut v: Vec<_> = m.iter().map(|(k, s)| (*k, *s)).collect();
            v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            v.into_iter().map(|(k, _)| k).collect::<Vec<_>>()
        };
        prop_assert_eq!(order(&snip1), order(&snipc));
        prop_assert_eq!(order(&grasp1), order(&graspc));
    }

    #[test]
    fn cka_symmetric_and_bounded(n in 3usize..16, dx in 1usize..6, dy in 1usize..6, seed in 0u64..1000) {
        let mut rng = stream_rng(seed, Stream::Synthetic, 1);
        let mut draw = |d: usize| {
            let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::from_vec(&[n, d], v).unwrap()
        };
        let x = draw(dx);
        let y = draw(dy);
        let a = cka_linear(&x, &y).unwrap();
        let b = cka_linear(&y, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-9);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&a));
    }

    #[test]
    fn carbon_is_linear_in_each_argument(
        t1 in 0.0f64..1e5, t2 in 0.0f64..1e5, w in 1.0f64..1e3, g in 1.0f64..1e3, a in 0.0f64..10.0, b in 0.0f64..10.0,
    ) {
        let close = |x: f64, y: f64| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1e-9);
        prop_assert!(close(carbon_estimate(a * t1 + b * t2, w, g), a * carbon_estimate(t1, w, g) + b * carbon_estimate(t2, w, g)));
        prop_assert!(close(carbon_estimate(t1, a * w + b * g, g), a * carbon_estimate(t1, w, g) + b * carbon_estimate(t1, g, g)));
        prop_assert!(close(carbon_estimate(t1, w, a * g + b * w), a * carbon_estimate(t1, w, g) + b * carbon_estimate(t1, w, w)));
    }

    #[test]
    fn cifar_bytes_round_trip(records in prop::collection::vec((0u8..10, prop::collection::vec(any::<u8>(), CIFAR_RECORD - 1)), 1..4)) {
        let bytes: Vec<u8> = records.iter().flat_map(|(l, px)| std::iter::once(*l).chain(px.iter().copied())).collect();
        let d = parse_cifar10_binary(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(d.len(), records.len());
        prop_assert_eq!(d.to_binary().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_deterministic_and_pure(seed in 0u64..1000, severity in 1u8..=5, k in 0usize..4) {
        let kind = [CorruptionKind::GaussianNoise, CorruptionKind::BoxBlur, CorruptionKind::Brightness, CorruptionKind::Contrast][k];
        let clean = synthetic_dataset_sized(seed, 4, 2, 0.5, 8).unwrap();
        let before = clean.clone();
        let spec = CorruptionSpec::new(kind, severity, seed).unwrap();
        let a = corrupt(&clean, &spec).unwrap();
        let b = corrupt(&clean, &spec).unwrap();
        prop_assert_eq!(a.images(), b.images());
        prop_assert_eq!(clean.images(), before.images());
        prop_assert_eq!(a.labels(), clean.labels());
    }
}

fn l2_from(clean: &Dataset, other: &Dataset) -> f64 {
    clean.images().iter().zip(other.images()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn corruption_severity_orders_expected_distortion() {
    let clean = synthetic_dataset_sized(3, 8, 2, 0.5, 16).unwrap();
    for kind in [CorruptionKind::GaussianNoise, CorruptionKind::BoxBlur, CorruptionKind::Brightness, CorruptionKind::Contrast] {
        let mean: Vec<f64> = (1..=5u8)
            .map(|s| {
                (0..100u64)
                    .map(|seed| l2_from(&clean, &corrupt(&clean, &CorruptionSpec::new(kind, s, seed).unwrap()).unwrap()))
                    .sum::<f64>()
                    / 100.0
            })
            .collect();
        assert!(mean.windows(2).all(|w| w[1] >= w[0]), "{kind:?}: {mean:?}");
        assert!(mean[4] > mean[0], "{kind:?}: {mean:?}");
    }
}

#[test]
fn data_free_criteria_ignore_the_batch() {
    let spec = build_resnet_for_input(20, 2, 2, 8).unwrap();
    let params = random_params(&spec, 5);
    let batch = |seed: u64| ScoringBatch {
        images: random_input(seed, 4, 8),
        labels: vec![0, 1, 0, 1],
        seed,
        bn_mode: Mode::Train,
    };
    let (b1, b2) = (batch(1), batch(2));
    for c in [Criterion::Random, Criterion::L1, Criterion::L1Zscore] {
        let a = score(c, &spec, &params, Some(&b1), 9).unwrap();
        let b = score(c, &spec, &params, Some(&b2), 9).unwrap();
        let none = score(c, &spec, &params, None, 9).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.scores, none.scores);
    }
    let other = random_params(&spec, 6);
    assert_eq!(score(Criterion::Random, &spec, &other, None, 9).unwrap().scores, score_random(&spec, 9).scores);
    for c in Criterion::ALL {
        let r = score(c, &spec, &params, Some(&b1), 9).unwrap();
        assert_eq!(r.scores.keys().copied().collect::<Vec<_>>(), removable_blocks(&spec), "{c}");
    }
}

#[test]
fn snip_block_scores_use_gradients_of_the_batch() {
    let spec = build_resnet_for_input(14, 2, 2, 8).unwrap();
    let params = ParamStore::init(&spec, 2);
    let x = random_input(4, 6, 8);
    let labels = vec![0, 1, 0, 1, 0, 1];
    let grads = backward(&spec, &params, &x, &labels, Mode::Train).unwrap().grads;
    let direct = block_saliency(&spec, &params, &grads, snip_saliency).unwrap();
    let batch = ScoringBatch { images: x, labels, seed: 0, bn_mode: Mode::Train };
    let report = score(Criterion::Snip, &spec, &params, Some(&batch), 0).unwrap();
    assert_eq!(report.scores, direct);
    let signed = block_saliency(&spec, &params, &grads, grasp_saliency).unwrap();
    assert!(signed.iter().all(|(id, s)| s.abs() <= direct[id] + 1e-12));
}
