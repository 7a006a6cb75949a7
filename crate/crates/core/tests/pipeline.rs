use lotto_core::criteria::{score_filters_at_init, score_random, score_snip, Criterion, ScoringBatch};
use lotto_core::data::{synthetic_dataset, synthetic_dataset_sized, Dataset, Normalization, SEPARABILITY_HIGH};
use lotto_core::metrics::robustness_report;
use lotto_core::model::{backward, build_resnet, build_resnet_for_input, removable_blocks, BlockId, Mode, NetworkSpec, ParamKey, ParamStore};
use lotto_core::model::params::randomize;
use lotto_core::pruning::{
    filter_count, filter_target_range, masked_equivalent, match_filter_sparsity, prune_filters, remove_layers, select_victims, FilterCounting,
    PruningPlan,
};
use lotto_core::seed::{stream_rng, Stream};
use lotto_core::training::{
    evaluate, retrain_rewound, rewind, run_init_lth, run_lth, train, Rewind, TicketSettings, TrainConfig, TrainData,
};

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        for (pos, i) in idx.into_iter().enumerate() {
            r[i] = pos as f64;
        }
        r
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

/// One stage of three identity blocks on 6x6 inputs.
fn three_block_net() -> NetworkSpec {
    let mut spec = build_resnet_for_input(20, 2, 3, 6).unwrap();
    spec.stages.truncate(1);
    spec
}

#[test]
fn snip_ranking_tracks_leave_one_block_out_loss() {
    let spec = three_block_net();
    let ids = removable_blocks(&spec);
    assert_eq!(ids.len(), 3);
    let data = synthetic_dataset_sized(11, 32, 2, 0.5, 6).unwrap();
    let norm = Normalization::fit(&data);
    let mut total = 0.0;
    for seed in 0..5u64 {
        let mut params: ParamStore<f64> = ParamStore::<f32>::init(&spec, seed).cast();
        randomize(&mut params, &mut stream_rng(seed, Stream::Init, 3), 0.3);
        // Residual branches of very different strength.
        for (id, gain) in ids.iter().zip([0.05, 0.6, 2.5]) {
            let key = ParamKey::block(*id, "bn2.scale");
            params.get_mut(&key).unwrap().data_mut().iter_mut().for_each(|v| *v = v.abs() * gain);
        }
        let batch = ScoringBatch::<f64>::from_dataset(&data, &norm, 32, seed).unwrap();
        // Fit the batch first so that every block carries signal the loss depends on.
        for _ in 0..40 {
            let g = backward(&spec, &params, &batch.images, &batch.labels, Mode::Train).unwrap().grads;
            params.axpy(-0.1, &g).unwrap();
        }
        let snip = score_snip(&spec, &params, &batch).unwrap();
        let base = backward(&spec, &params, &batch.images, &batch.labels, Mode::Train).unwrap().loss;
        let loo: Vec<f64> = ids
            .iter()
            .map(|id| {
                let masked = masked_equivalent(&spec, &params, &PruningPlan::new(vec![*id], "loo")).unwrap();
                backward(&spec, &masked, &batch.images, &batch.labels, Mode::Train).unwrap().loss - base
            })
            .collect();
        let s: Vec<f64> = ids.iter().map(|id| snip.scores[id]).collect();
        let rho = spearman(&s, &loo);
        assert!(rho > 0.0, "seed {seed}: snip {s:?} loo {loo:?}");
        total += rho;
    }
    assert!(total / 5.0 > 0.0);
}

#[test]
fn random_orderings_differ_across_seeds() {
    let spec = build_resnet(32, 10, 16).unwrap();
    assert_eq!(removable_blocks(&spec).len(), 13);
    let orders: Vec<Vec<BlockId>> = (0..20).map(|s| score_random(&spec, s).ascending()).collect();
    assert!(orders.windows(2).any(|w| w[0] != w[1]));
    assert_eq!(score_random(&spec, 3).scores, score_random(&spec, 3).scores);
}

#[test]
fn stage_one_block_costs_32_filters() {
    let spec = build_resnet(32, 10, 16).unwrap();
    let dense = filter_count(&spec, FilterCounting::WithProjections);
    let plan = PruningPlan::new(vec![BlockId::new(0, 1)], "t");
    assert_eq!(match_filter_sparsity(&spec, &PruningPlan::empty("t")).unwrap(), dense);
    assert_eq!(match_filter_sparsity(&spec, &plan).unwrap(), dense - 32);
}

#[test]
fn full_filter_target_is_a_no_op() {
    let spec = build_resnet_for_input(8, 2, 3, 8).unwrap();
    let params = ParamStore::<f32>::init(&spec, 1);
    let data = synthetic_dataset_sized(1, 4, 2, 1.0, 8).unwrap();
    let batch = ScoringBatch::from_dataset(&data, &Normalization::fit(&data), 4, 0).unwrap();
    let report = score_filters_at_init(&spec, &params, &batch, Criterion::Grasp).unwrap();
    let (_, max) = filter_target_range(&spec);
    let (sub, sub_params, plan) = prune_filters(&spec, &params, &report, max).unwrap();
    assert!(plan.removed.is_empty());
    assert_eq!(sub, spec);
    assert!(sub_params.bitwise_eq(&params));
}

fn small_config(epochs: usize, batch: usize) -> TrainConfig {
    let mut c = TrainConfig::standard(epochs, 7);
    c.batch_size = batch;
    c.eval_batch_size = 64;
    c
}

fn tiny_data(n: usize, side: usize) -> (Dataset, Dataset) {
    (
        synthetic_dataset_sized(21, n, 2, 0.6, side).unwrap(),
        synthetic_dataset_sized(22, n / 2, 2, 0.6, side).unwrap(),
    )
}

#[test]
fn depth8_fits_separable_data_in_five_epochs() {
    let train_set = synthetic_dataset(1, 100, 2, SEPARABILITY_HIGH).unwrap();
    let test_set = synthetic_dataset(2, 50, 2, SEPARABILITY_HIGH).unwrap();
    let spec = build_resnet(8, 2, 4).unwrap();
    let data = TrainData::new(&train_set, &test_set).unwrap();
    let mut config = small_config(5, 20);
    config.augment = false;
    let run = train(&spec, &ParamStore::init(&spec, 7), &config, &data).unwrap();
    let acc = evaluate(&spec, &run.params, &train_set, &data.norm, 50).unwrap();
    assert_eq!(acc, 100.0);
    assert_eq!(run.log.epochs.len(), 5);
}

#[test]
fn zero_epochs_keeps_init_and_only_theta0() {
    let (tr, te) = tiny_data(16, 8);
    let spec = build_resnet_for_input(8, 2, 2, 8).unwrap();
    let init = ParamStore::init(&spec, 7);
    let run = train(&spec, &init, &small_config(0, 8), &TrainData::new(&tr, &te).unwrap()).unwrap();
    assert!(run.params.bitwise_eq(&init));
    assert_eq!(run.checkpoints.epochs(), vec![0]);
    assert!(run.log.epochs.is_empty());
}

#[test]
fn rewind_is_exact_and_retraining_reuses_the_schedule() {
    let (tr, te) = tiny_data(48, 8);
    let data = TrainData::new(&tr, &te).unwrap();
    let spec = build_resnet_for_input(14, 2, 2, 8).unwrap();
    let config = small_config(8, 16);
    let dense = train(&spec, &ParamStore::init(&spec, 7), &config, &data).unwrap();
    assert_eq!(dense.checkpoints.epochs(), vec![0, 2, 4, 6, 8]);
    let plan = PruningPlan::new(vec![BlockId::new(1, 1)], "t");
    let (sub, _) = remove_layers(&spec, &dense.params, &plan).unwrap();
    for e in dense.checkpoints.epochs() {
        let rewound = rewind(&dense.checkpoints, &sub, e).unwrap();
        let source = &dense.checkpoints.get(e).unwrap().params;
        assert_eq!(rewound.len(), sub.param_shapes().len());
        for (k, t) in rewound.iter() {
            let s = source.get(k).unwrap();
            assert!(t.data().iter().zip(s.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{k:?}");
        }
    }
    assert!(rewind(&dense.checkpoints, &sub, 3).is_err());

    let start = 4;
    let (_, log) = retrain_rewound(&sub, &rewind(&dense.checkpoints, &sub, start).unwrap(), &config, start, &data).unwrap();
    let sub_lrs: Vec<(usize, f64)> = log.epochs.iter().map(|r| (r.epoch, r.lr)).collect();
    let dense_lrs: Vec<(usize, f64)> = dense.log.epochs[start..].iter().map(|r| (r.epoch, r.lr)).collect();
    assert_eq!(sub_lrs, dense_lrs);
}

#[test]
fn p0_pipelines_reproduce_the_dense_run_bitwise() {
    let (tr, te) = tiny_data(32, 8);
    let data = TrainData::new(&tr, &te).unwrap();
    let spec = build_resnet_for_input(14, 2, 2, 8).unwrap();
    let config = small_config(4, 16);

    let (dense, lth) = run_lth(&spec, &config, &TicketSettings::new(Criterion::L1, 0, Rewind::Epoch(0)), &data).unwrap();
    assert_eq!(lth.sub_spec, spec);
    assert!(lth.sub_params.bitwise_eq(&dense.params));
    assert_eq!(lth.report.sub_acc.to_bits(), lth.report.dense_acc.to_bits());
    assert_eq!(lth.report.delta_pp, 0.0);
    assert!(lth.report.win);

    let (dense2, init) = run_init_lth(&spec, &config, &TicketSettings::new(Criterion::Snip, 0, Rewind::Init), &data).unwrap();
    assert!(dense2.params.bitwise_eq(&dense.params));
    assert!(init.sub_params.bitwise_eq(&dense.params));
    assert_eq!(init.report.sub_acc.to_bits(), dense.log.final_test_acc.to_bits());
    assert!(init.report.win && init.report.is_consistent());
}

#[test]
fn identical_models_have_zero_robustness_deltas() {
    let (tr, te) = tiny_data(16, 8);
    let spec = build_resnet_for_input(8, 2, 2, 8).unwrap();
    let params = ParamStore::init(&spec, 3);
    let norm = Normalization::fit(&tr);
    let report = robustness_report(&spec, &params, &spec, &params, &[tr, te], &norm).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.rows.iter().all(|r| r.delta_pp == 0.0));
}

#[test]
fn victims_come_from_the_removable_set() {
    let spec = build_resnet(20, 10, 2).unwrap();
    let report = score_random(&spec, 5);
    let plan = select_victims(&report, 6, &spec).unwrap();
    assert!(plan.victims.iter().all(|v| removable_blocks(&spec).contains(v)));
    assert!(select_victims(&report, 8, &spec).is_err());
}
