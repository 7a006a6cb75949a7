//! Deterministic SGD training, checkpoints, weight rewinding and the
//! end-to-end ticket pipelines.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::criteria::{score, score_filters_at_init, Criterion, ImportanceReport, ScoringBatch, DEFAULT_SCORING_BATCH, DEFAULT_SCORING_SEED};
use crate::data::{augment, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::metrics::{CarbonParams, CostReport, Provenance, TicketReport, FLOP_CONVENTION};
use crate::model::{backward, count_correct, predict, Mode, NetworkSpec, ParamStore};
use crate::pruning::{filter_count, match_filter_sparsity, prune_filters, remove_layers, select_victims, FilterCounting, FilterPruningPlan, PruningPlan};
use crate::seed::{stream_rng, Stream};

/// Piecewise-constant learning rate starting at `start_epoch`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrPhase {
    pub start_epoch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_n: usize,
    pub batch_size: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub checkpoint_epochs: BTreeSet<usize>,
    /// Pad-crop-flip augmentation of training batches.
    pub augment: bool,
    pub eval_batch_size: usize,
}

pub const DEFAULT_BATCH: usize = 128;
pub const DEFAULT_LR: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_WEIGHT_DECAY: f64 = 5e-4;

/// `lr` for the first half, `lr / 10` until three quarters, then `lr / 100`.
pub fn step_schedule(epochs: usize, lr: f64) -> Vec<LrPhase> {
    let mut out = vec![LrPhase { start_epoch: 0, lr }];
    for (start, f) in [(epochs / 2, 0.1), (epochs * 3 / 4, 0.01)] {
        if start > out.last().expect("non-empty").start_epoch {
            out.push(LrPhase { start_epoch: start, lr: lr * f });
        } else {
            out.last_mut().expect("non-empty").lr = lr * f;
        }
    }
    out
}

/// `{0, n/4, n/2, 3n/4, n}`.
pub fn quarter_checkpoints(epochs: usize) -> BTreeSet<usize> {
    [0, epochs / 4, epochs / 2, epochs * 3 / 4, epochs].into_iter().collect()
}

impl TrainConfig {
    pub fn standard(epochs: usize, seed: u64) -> Self {
        TrainConfig {
            epochs_n: epochs,
            batch_size: DEFAULT_BATCH,
            lr_schedule: step_schedule(epochs, DEFAULT_LR),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            seed,
            checkpoint_epochs: quarter_checkpoints(epochs),
            augment: true,
            eval_batch_size: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::arg("batch sizes must be positive"));
        }
        if !self.checkpoint_epochs.contains(&0) {
            return Err(Error::arg("checkpoint_epochs must contain 0"));
        }
        if let Some(&e) = self.checkpoint_epochs.iter().find(|&&e| e > self.epochs_n) {
            return Err(Error::arg(format!("checkpoint epoch {e} beyond {} epochs", self.epochs_n)));
        }
        match self.lr_schedule.first() {
            Some(p) if p.start_epoch == 0 => {}
            _ => return Err(Error::arg("lr_schedule must start at epoch 0")),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].start_epoch <= w[0].start_epoch) {
            return Err(Error::arg("lr_schedule start epochs must increase"));
        }
        if self.lr_schedule.iter().any(|p| !(p.lr.is_finite() && p.lr > 0.0)) {
            return Err(Error::arg("learning rates must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::arg(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::arg(format!("weight decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .rev()
            .find(|p| p.start_epoch <= epoch)
            .map_or(self.lr_schedule[0].lr, |p| p.lr)
    }

    pub fn recipe(&self) -> String {
        let aug = if self.augment {
            "4-pixel zero pad, random crop back to the input size, random horizontal flip"
        } else {
            "no augmentation"
        };
        format!("per-channel standardization fitted on the training split; {aug}; trailing partial batch dropped")
    }
}

/// Dense-run snapshot taken before epoch `epoch` is trained.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: ParamStore,
    /// Seed and epoch of the data-order stream, little-endian.
    pub rng_state: Vec<u8>,
}

impl Checkpoint {
    pub fn new(epoch: usize, params: ParamStore, seed: u64) -> Self {
        let mut rng_state = seed.to_le_bytes().to_vec();
        rng_state.extend_from_slice(&(epoch as u64).to_le_bytes());
        Checkpoint { epoch, params, rng_state }
    }
}

const RNG_FILE: &str = "rng_state.bin";

/// Checkpoints indexed by epoch.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    checkpoints: BTreeMap<usize, Checkpoint>,
}

impl CheckpointStore {
    pub fn insert(&mut self, c: Checkpoint) {
        self.checkpoints.insert(c.epoch, c);
    }

    pub fn get(&self, epoch: usize) -> Result<&Checkpoint> {
        self.checkpoints.get(&epoch).ok_or_else(|| Error::MissingCheckpoint {
            epoch,
            available: self.epochs(),
        })
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.checkpoints.keys().copied().collect()
    }

    pub fn latest(&self) -> Option<&Checkpoint> {
        self.checkpoints.values().next_back()
    }

    /// One `epoch_NNNN` directory per checkpoint.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (epoch, c) in &self.checkpoints {
            let sub = dir.join(format!("epoch_{epoch:04}"));
            c.params.save_dir(&sub)?;
            fs::write(sub.join(RNG_FILE), &c.rng_state)?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut store = CheckpointStore::default();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let Some(epoch) = name.strip_prefix("epoch_").and_then(|s| s.parse().ok()) else { continue };
            let path = entry.path();
            store.insert(Checkpoint {
                epoch,
                params: ParamStore::load_dir(&path)?,
                rng_state: fs::read(path.join(RNG_FILE))?,
            });
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Percent correct on the augmented training batches of the epoch.
    pub train_acc: f64,
    pub test_acc: f64,
    /// Mean training loss.
    pub loss: f64,
    /// Training-phase wall-clock; evaluation is excluded.
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Test accuracy of the returned parameters.
    pub final_test_acc: f64,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,lr,train_acc,test_acc,loss,seconds";

impl TrainLog {
    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{},{}\n", e.epoch, e.lr, e.train_acc, e.test_acc, e.loss, e.seconds));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(TRAIN_LOG_HEADER) {
            return Err(Error::arg(format!("train log must start with `{TRAIN_LOG_HEADER}`")));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::arg(format!("train log row {} is malformed: `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            epochs.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                lr: num(1)?,
                train_acc: num(2)?,
                test_acc: num(3)?,
                loss: num(4)?,
                seconds: num(5)?,
            });
        }
        let final_test_acc = epochs.last().map_or(f64::NAN, |e| e.test_acc);
        Ok(TrainLog { epochs, final_test_acc })
    }
}

/// Training and test splits with the input normalization fitted on `train`.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub norm: Normalization,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset, test: &'a Dataset) -> Result<Self> {
        if train.num_classes() != test.num_classes() || train.side() != test.side() {
            return Err(Error::LabelSpace(format!(
                "train set {} ({} classes, side {}) and test set {} ({} classes, side {}) differ",
                train.name,
                train.num_classes(),
                train.side(),
                test.name,
                test.num_classes(),
                test.side()
            )));
        }
        Ok(TrainData {
            train,
            test,
            norm: Normalization::fit(train),
        })
    }
}

/// Example order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::DataOrder, epoch as u64));
    order
}

/// Full batches only; a dataset smaller than one batch is a single batch.
pub fn epoch_batches(n: usize, batch: usize) -> Vec<Range<usize>> {
    if n < batch {
        return vec![0..n];
    }
    (0..n / batch).map(|b| b * batch..(b + 1) * batch).collect()
}

/// Percent of `dataset` classified correctly in eval mode.
pub fn evaluate(spec: &NetworkSpec, params: &ParamStore, dataset: &Dataset, norm: &Normalization, batch: usize) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0;
    for chunk in all.chunks(batch.max(1)) {
        let (x, labels) = norm.batch::<f32>(dataset, chunk)?;
        correct += count_correct(&predict(spec, params, &x)?, &labels);
    }
    Ok(100.0 * correct as f64 / dataset.len() as f64)
}

/// `v = momentum * v + (g + wd * w)`, `w -= lr * v` on every trainable tensor.
fn sgd_step(params: &mut ParamStore, grads: &ParamStore, velocity: &mut ParamStore, lr: f32, momentum: f32, wd: f32) -> Result<()> {
    for (key, g) in grads.iter() {
        let w = params.get_mut(key)?;
        let v = velocity.get_mut(key)?;
        for ((w, v), &g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = momentum * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

/// Train epochs `epochs` in place, starting from zero momentum. Checkpoints
/// in `config.checkpoint_epochs` that fall inside the run are recorded.
fn run_epochs(
    spec: &NetworkSpec,
    params: &mut ParamStore,
    config: &TrainConfig,
    data: &TrainData,
    epochs: Range<usize>,
    mut store: Option<&mut CheckpointStore>,
) -> Result<TrainLog> {
    config.validate()?;
    params.check(spec)?;
    if data.train.num_classes() != spec.num_classes {
        return Err(Error::LabelSpace(format!(
            "dataset has {} classes, network predicts {}",
            data.train.num_classes(),
            spec.num_classes
        )));
    }
    let side = data.train.side();
    let mut velocity = params.zeros_like_trainable();
    let mut last_good = Checkpoint::new(epochs.start, params.clone(), config.seed);
    if let Some(s) = store.as_deref_mut() {
        if config.checkpoint_epochs.contains(&epochs.start) {
            s.insert(last_good.clone());
        }
    }
    let (momentum, wd) = (config.momentum as f32, config.weight_decay as f32);
    let mut log = Vec::with_capacity(epochs.len());
    for epoch in epochs {
        let lr = config.lr_at(epoch);
        let start = Instant::now();
        let order = epoch_order(config.seed, epoch, data.train.len());
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (bi, range) in epoch_batches(order.len(), config.batch_size).into_iter().enumerate() {
            let idx = &order[range];
            let images: Vec<Vec<u8>> = idx
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(data.train.image(i), side, config.seed, epoch, i)
                    } else {
                        data.train.image(i).to_vec()
                    }
                })
                .collect();
            let x = data.norm.tensor::<f32, _>(&images, side)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.train.label(i)).collect();
            let out = match backward(spec, params, &x, &labels, Mode::Train) {
                Ok(out) => out,
                Err(e @ (Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. })) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: bi,
                        cause: Box::new(e),
                        last_good: Box::new(last_good),
                    })
                }
                Err(e) => return Err(e),
            };
            out.running.apply(params)?;
            sgd_step(params, &out.grads, &mut velocity, lr as f32, momentum, wd)?;
            loss_sum += out.loss as f64 * labels.len() as f64;
            correct += out.correct;
            seen += labels.len();
        }
        let seconds = start.elapsed().as_secs_f64();
        let test_acc = evaluate(spec, params, data.test, &data.norm, config.eval_batch_size)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_acc: 100.0 * correct as f64 / seen.max(1) as f64,
            test_acc,
            loss: loss_sum / seen.max(1) as f64,
            seconds,
        };
        log::info!(
            "epoch {epoch} lr {lr:.4} loss {:.4} train {:.2}% test {:.2}% ({seconds:.1}s)",
            record.loss,
            record.train_acc,
            record.test_acc
        );
        log.push(record);
        if config.checkpoint_epochs.contains(&(epoch + 1)) {
            last_good = Checkpoint::new(epoch + 1, params.clone(), config.seed);
            if let Some(s) = store.as_deref_mut() {
                s.insert(last_good.clone());
            }
        }
    }
    let final_test_acc = match log.last() {
        Some(r) => r.test_acc,
        None => evaluate(spec, params, data.test, &data.norm, config.eval_batch_size)?,
    };
    Ok(TrainLog {
        epochs: log,
        final_test_acc,
    })
}

/// Outcome of a full dense training run.
#[derive(Debug, Clone)]
pub struct DenseRun {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub checkpoints: CheckpointStore,
    pub log: TrainLog,
}

pub fn train(spec: &NetworkSpec, init_params: &ParamStore, config: &TrainConfig, data: &TrainData) -> Result<DenseRun> {
    let mut params = init_params.clone();
    let mut checkpoints = CheckpointStore::default();
    let log = run_epochs(spec, &mut params, config, data, 0..config.epochs_n, Some(&mut checkpoints))?;
    Ok(DenseRun {
        spec: spec.clone(),
        params,
        checkpoints,
        log,
    })
}

/// Surviving tensors of `sub_spec` copied from the checkpoint at `epoch`.
pub fn rewind(checkpoints: &CheckpointStore, sub_spec: &NetworkSpec, epoch: usize) -> Result<ParamStore> {
    checkpoints.get(epoch)?.params.restricted_to(sub_spec)
}

/// Train for epochs `epoch_i..n` with the learning rates the dense run used
/// over the same epochs, from fresh momentum.
pub fn retrain_rewound(
    sub_spec: &NetworkSpec,
    rewound_params: &ParamStore,
    config: &TrainConfig,
    epoch_i: usize,
    data: &TrainData,
) -> Result<(ParamStore, TrainLog)> {
    if epoch_i > config.epochs_n {
        return Err(Error::arg(format!("rewind epoch {epoch_i} beyond {} epochs", config.epochs_n)));
    }
    let mut params = rewound_params.clone();
    let log = run_epochs(sub_spec, &mut params, config, data, epoch_i..config.epochs_n, None)?;
    Ok((params, log))
}

/// `acc_sub + xi >= acc_dense`.
pub fn winning_ticket_test(acc_sub: f64, acc_dense: f64, xi: f64) -> Result<bool> {
    if !(xi >= 0.0) {
        return Err(Error::arg(format!("xi must be >= 0, got {xi}")));
    }
    Ok(acc_sub + xi >= acc_dense)
}

/// Where retraining starts: a dense checkpoint, the untrained weights
/// (pruning at initialization), or a fresh random draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RewindRepr", into = "RewindRepr")]
pub enum Rewind {
    Epoch(usize),
    Init,
    Reinit,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RewindRepr {
    Epoch(usize),
    Word(String),
}

impl TryFrom<RewindRepr> for Rewind {
    type Error = String;

    fn try_from(r: RewindRepr) -> std::result::Result<Self, String> {
        match r {
            RewindRepr::Epoch(e) => Ok(Rewind::Epoch(e)),
            RewindRepr::Word(w) if w == "init" => Ok(Rewind::Init),
            RewindRepr::Word(w) if w == "reinit" => Ok(Rewind::Reinit),
            RewindRepr::Word(w) => Err(format!("rewind must be an epoch number, \"init\" or \"reinit\", got \"{w}\"")),
        }
    }
}

impl From<Rewind> for RewindRepr {
    fn from(r: Rewind) -> Self {
        match r {
            Rewind::Epoch(e) => RewindRepr::Epoch(e),
            Rewind::Init => RewindRepr::Word("init".into()),
            Rewind::Reinit => RewindRepr::Word("reinit".into()),
        }
    }
}

impl fmt::Display for Rewind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rewind::Epoch(e) => write!(f, "theta_{e}"),
            Rewind::Init => f.write_str("init"),
            Rewind::Reinit => f.write_str("reinit"),
        }
    }
}

/// Knobs shared by the ticket pipelines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketSettings {
    pub criterion: Criterion,
    pub p: usize,
    pub rewind: Rewind,
    pub xi: f64,
    pub scoring_seed: u64,
    pub scoring_batch: usize,
    pub carbon: CarbonParams,
}

impl TicketSettings {
    pub fn new(criterion: Criterion, p: usize, rewind: Rewind) -> Self {
        TicketSettings {
            criterion,
            p,
            rewind,
            xi: 0.0,
            scoring_seed: DEFAULT_SCORING_SEED,
            scoring_batch: DEFAULT_SCORING_BATCH,
            carbon: CarbonParams::default(),
        }
    }
}

/// Everything a ticket pipeline produced besides the dense run.
#[derive(Debug, Clone)]
pub struct TicketOutcome {
    pub report: TicketReport,
    pub importance: Option<ImportanceReport>,
    /// Block victims; for the filter baseline, the layer plan whose filter
    /// count was matched.
    pub plan: PruningPlan,
    pub filter_plan: Option<FilterPruningPlan>,
    pub sub_spec: NetworkSpec,
    pub sub_params: ParamStore,
    pub sub_log: TrainLog,
}

fn importance(
    spec: &NetworkSpec,
    params: &ParamStore,
    settings: &TicketSettings,
    config: &TrainConfig,
    data: &TrainData,
) -> Result<ImportanceReport> {
    let batch = if settings.criterion.needs_batch() {
        Some(ScoringBatch::from_dataset(data.train, &data.norm, settings.scoring_batch, settings.scoring_seed)?)
    } else {
        None
    };
    score(settings.criterion, spec, params, batch.as_ref(), config.seed ^ settings.scoring_seed)
}

#[allow(clippy::too_many_arguments)]
fn ticket_report(
    dense: &DenseRun,
    config: &TrainConfig,
    settings: &TicketSettings,
    criterion: String,
    plan: &PruningPlan,
    sub_spec: &NetworkSpec,
    sub_log: &TrainLog,
    mut notes: BTreeMap<String, String>,
) -> Result<TicketReport> {
    let sub_epochs = sub_log.epochs.len();
    let dense_cost = CostReport::new(&dense.spec, dense.log.total_seconds(), &settings.carbon)?;
    let sub_cost = CostReport::new(sub_spec, sub_log.total_seconds(), &settings.carbon)?;
    notes.insert(
        "filters_kept".into(),
        format!(
            "{} with projection shortcuts, {} without",
            filter_count(sub_spec, FilterCounting::WithProjections),
            filter_count(sub_spec, FilterCounting::WithoutProjections)
        ),
    );
    let provenance = Provenance {
        criterion,
        p: plan.density_p,
        rewind: settings.rewind,
        victims: plan.victims.clone(),
        train_seed: config.seed,
        scoring_seed: settings.criterion.needs_batch().then_some(settings.scoring_seed),
        config_digest: None,
        train: config.clone(),
        carbon: settings.carbon,
        flop_convention: FLOP_CONVENTION.into(),
        recipe: config.recipe(),
        notes,
    };
    TicketReport::new(
        dense.log.final_test_acc,
        sub_log.final_test_acc,
        settings.xi,
        dense_cost,
        dense.log.epochs.len(),
        sub_cost,
        sub_epochs,
        provenance,
    )
}

fn metadata_note(report: &ImportanceReport) -> Result<BTreeMap<String, String>> {
    Ok([("criterion_metadata".to_string(), serde_json::to_string(&report.metadata)?)].into())
}

/// Score the trained dense network, remove the `p` least important blocks,
/// rewind the survivors and retrain.
pub fn lth_from_dense(dense: &DenseRun, config: &TrainConfig, settings: &TicketSettings, data: &TrainData) -> Result<TicketOutcome> {
    let spec = &dense.spec;
    let report = importance(spec, &dense.params, settings, config, data)?;
    let plan = select_victims(&report, settings.p, spec)?;
    let (sub_spec, _) = remove_layers(spec, &dense.params, &plan)?;
    let (start_params, start_epoch) = match settings.rewind {
        Rewind::Epoch(i) => (rewind(&dense.checkpoints, &sub_spec, i)?, i),
        Rewind::Reinit => (ParamStore::init_with_stream(&sub_spec, config.seed, Stream::Reinit), 0),
        Rewind::Init => {
            return Err(Error::arg("rewind \"init\" selects pruning at initialization; use the init pipeline"));
        }
    };
    let (sub_params, sub_log) = retrain_rewound(&sub_spec, &start_params, config, start_epoch, data)?;
    let notes = metadata_note(&report)?;
    let report_t = ticket_report(dense, config, settings, report.criterion.clone(), &plan, &sub_spec, &sub_log, notes)?;
    Ok(TicketOutcome {
        report: report_t,
        importance: Some(report),
        plan,
        filter_plan: None,
        sub_spec,
        sub_params,
        sub_log,
    })
}

fn train_dense(spec: &NetworkSpec, config: &TrainConfig, data: &TrainData) -> Result<DenseRun> {
    train(spec, &ParamStore::init(spec, config.seed), config, data)
}

/// Dense training followed by [`lth_from_dense`].
pub fn run_lth(dense_spec: &NetworkSpec, config: &TrainConfig, settings: &TicketSettings, data: &TrainData) -> Result<(DenseRun, TicketOutcome)> {
    let dense = train_dense(dense_spec, config, data)?;
    let outcome = lth_from_dense(&dense, config, settings, data)?;
    Ok((dense, outcome))
}

/// Score the untrained network, remove blocks, and train the sub-network
/// from its share of the initial weights. `dense` is only the comparison
/// baseline and must come from the same initialization seed.
pub fn init_lth_from_dense(dense: &DenseRun, config: &TrainConfig, settings: &TicketSettings, data: &TrainData) -> Result<TicketOutcome> {
    let spec = &dense.spec;
    let theta0 = ParamStore::init(spec, config.seed);
    let report = importance(spec, &theta0, settings, config, data)?;
    let plan = select_victims(&report, settings.p, spec)?;
    let (sub_spec, sub_theta0) = remove_layers(spec, &theta0, &plan)?;
    let (sub_params, sub_log) = retrain_rewound(&sub_spec, &sub_theta0, config, 0, data)?;
    let notes = metadata_note(&report)?;
    let mut settings = settings.clone();
    settings.rewind = Rewind::Init;
    let report_t = ticket_report(dense, config, &settings, report.criterion.clone(), &plan, &sub_spec, &sub_log, notes)?;
    Ok(TicketOutcome {
        report: report_t,
        importance: Some(report),
        plan,
        filter_plan: None,
        sub_spec,
        sub_params,
        sub_log,
    })
}

pub fn run_init_lth(dense_spec: &NetworkSpec, config: &TrainConfig, settings: &TicketSettings, data: &TrainData) -> Result<(DenseRun, TicketOutcome)> {
    let dense = train_dense(dense_spec, config, data)?;
    let outcome = init_lth_from_dense(&dense, config, settings, data)?;
    Ok((dense, outcome))
}

/// Filter-level baseline at initialization: prune `conv1` filters until the
/// kept-filter count matches the layer-pruned network with `p` blocks
/// removed by the same criterion, then train from the initial weights.
pub fn filter_baseline_from_dense(dense: &DenseRun, config: &TrainConfig, settings: &TicketSettings, data: &TrainData) -> Result<TicketOutcome> {
    let spec = &dense.spec;
    let theta0 = ParamStore::init(spec, config.seed);
    let layer_report = importance(spec, &theta0, settings, config, data)?;
    let layer_plan = select_victims(&layer_report, settings.p, spec)?;
    let target = match_filter_sparsity(spec, &layer_plan)?;
    let batch = ScoringBatch::from_dataset(data.train, &data.norm, settings.scoring_batch, settings.scoring_seed)?;
    let filter_criterion = match settings.criterion {
        Criterion::GraspHvp => Criterion::Grasp,
        c => c,
    };
    let filter_report = score_filters_at_init(spec, &theta0, &batch, filter_criterion)?;
    let (sub_spec, sub_theta0, filter_plan) = prune_filters(spec, &theta0, &filter_report, target)?;
    let (sub_params, sub_log) = retrain_rewound(&sub_spec, &sub_theta0, config, 0, data)?;
    let mut settings = settings.clone();
    settings.rewind = Rewind::Init;
    let mut notes = metadata_note(&layer_report)?;
    notes.insert(
        "filter_target".into(),
        format!("{target} kept filters, matching {} removed blocks", layer_plan.density_p),
    );
    let name = format!("filter_{filter_criterion}");
    let matched = PruningPlan {
        victims: Vec::new(),
        density_p: layer_plan.density_p,
        criterion: name.clone(),
    };
    let report_t = ticket_report(dense, config, &settings, name, &matched, &sub_spec, &sub_log, notes)?;
    Ok(TicketOutcome {
        report: report_t,
        importance: Some(layer_report),
        plan: layer_plan,
        filter_plan: Some(filter_plan),
        sub_spec,
        sub_params,
        sub_log,
    })
}
