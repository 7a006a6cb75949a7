//! The pipeline commands. Each writes into `<root>/<command>/` and finishes
//! by writing a manifest that lists every file it emitted.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lotto_core::criteria::{score_l1, Criterion, ImportanceReport, L1Normalize};
use lotto_core::data::{corrupt, load_cifar10_binary, load_cifar10_files, synthetic_dataset_sized, CorruptionSpec, Dataset, Normalization};
use lotto_core::metrics::{robustness_report, CostReport, RobustnessReport, TicketReport};
use lotto_core::model::{NetworkSpec, ParamStore};
use lotto_core::pruning::PruningPlan;
use lotto_core::training::{
    filter_baseline_from_dense, init_lth_from_dense, lth_from_dense, train, CheckpointStore, DenseRun, Rewind, TicketOutcome,
    TicketSettings, TrainConfig, TrainData, TrainLog,
};
use serde::{Deserialize, Serialize};

use crate::config::{digest, DataConfig, ExperimentConfig, RobustnessConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::{hash_inputs, list_artifacts, ExperimentManifest};
use crate::report::{l1_stage_svg, markdown_table, metrics_csv, stage_means};

/// Environment variable that overrides the configured output root.
pub const OUT_ENV: &str = "LOTTO_OUT";

pub const TICKET_REPORT: &str = "ticket_report.json";
pub const TABLE: &str = "table.md";
pub const METRICS_CSV: &str = "metrics.csv";
pub const L1_SVG: &str = "l1_stage.svg";
pub const L1_SCORES: &str = "l1_scores.json";
pub const DENSE_SUMMARY: &str = "dense.json";
pub const ROBUSTNESS_JSON: &str = "robustness.json";
pub const ROBUSTNESS_MD: &str = "robustness.md";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Command {
    TrainDense,
    Lth,
    InitLth,
    Robustness,
    Report,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::TrainDense, Command::Lth, Command::InitLth, Command::Robustness, Command::Report];

    pub fn name(self) -> &'static str {
        match self {
            Command::TrainDense => "train-dense",
            Command::Lth => "lth",
            Command::InitLth => "init-lth",
            Command::Robustness => "robustness",
            Command::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Command::ALL.into_iter().find(|c| c.name() == name)
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    /// `--out`; beats both `LOTTO_OUT` and `report.out_dir`.
    pub out: Option<PathBuf>,
    /// Extra evaluation sets for `robustness`.
    pub eval_sets: Vec<PathBuf>,
    /// Manifests (files or directories) for `report`; empty means every
    /// command directory under the output root.
    pub manifests: Vec<PathBuf>,
}

/// Result of a command: its manifest and whether it was already up to date.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: ExperimentManifest,
    pub dir: PathBuf,
    pub reused: bool,
}

/// Loaded configuration plus the resolved output root.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub config_path: Option<PathBuf>,
    pub root: PathBuf,
    pub force: bool,
}

/// `--out`, then `LOTTO_OUT`, then `report.out_dir`.
pub fn resolve_root(out: Option<&Path>, env: Option<OsString>, config: &ExperimentConfig) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| env.filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| config.report.out_dir.clone())
}

impl Context {
    pub fn load(config_path: &Path, opts: &RunOptions) -> CliResult<Self> {
        let config = ExperimentConfig::load(config_path)?;
        let root = resolve_root(opts.out.as_deref(), std::env::var_os(OUT_ENV), &config);
        Ok(Context {
            config,
            config_path: Some(config_path.to_path_buf()),
            root,
            force: opts.force,
        })
    }

    pub fn from_config(config: ExperimentConfig, root: PathBuf, force: bool) -> Self {
        Context {
            config,
            config_path: None,
            root,
            force,
        }
    }

    pub fn dir(&self, command: Command) -> PathBuf {
        self.root.join(command.name())
    }
}

pub fn run(command: Command, ctx: &Context, opts: &RunOptions) -> CliResult<Outcome> {
    match command {
        Command::TrainDense => cmd_train_dense(ctx),
        Command::Lth => cmd_lth(ctx),
        Command::InitLth => cmd_init_lth(ctx),
        Command::Robustness => cmd_robustness(ctx, &opts.eval_sets),
        Command::Report => cmd_report(ctx, &opts.manifests),
    }
}

/// Either the existing up-to-date manifest, or a fresh empty directory.
fn prepare(dir: &Path, key: &str, key_of: impl Fn(&ExperimentManifest) -> &str, force: bool) -> CliResult<Option<ExperimentManifest>> {
    let path = ExperimentManifest::path_in(dir);
    if path.is_file() && !force {
        let existing = ExperimentManifest::read(&path)?;
        if key_of(&existing) != key {
            return Err(CliError::validation(format!(
                "{} holds results of a different configuration (digest {} vs {key}); pass --force to replace them",
                dir.display(),
                key_of(&existing)
            )));
        }
        if existing.missing_artifacts(dir).is_empty() {
            log::info!("{} is up to date", dir.display());
            return Ok(Some(existing));
        }
        log::warn!("{} is incomplete; recomputing", dir.display());
    }
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(None)
}

struct ManifestDraft<'a> {
    ctx: &'a Context,
    command: Command,
    config_digest: String,
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    started: Instant,
}

impl<'a> ManifestDraft<'a> {
    fn new(ctx: &'a Context, command: Command, config_digest: String) -> Self {
        ManifestDraft {
            ctx,
            command,
            config_digest,
            inputs: ctx.config_path.iter().cloned().collect(),
            seeds: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    fn finish(self, dir: &Path) -> CliResult<Outcome> {
        let manifest = ExperimentManifest {
            command: self.command.name().into(),
            toolkit_version: crate::manifest::TOOLKIT_VERSION.into(),
            config_digest: self.config_digest,
            dense_digest: self.ctx.config.dense_digest()?,
            inputs: hash_inputs(&self.inputs)?,
            seeds: self.seeds,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            artifacts: list_artifacts(dir)?,
            config: self.ctx.config.clone(),
        };
        manifest.write(dir)?;
        Ok(Outcome {
            manifest,
            dir: dir.to_path_buf(),
            reused: false,
        })
    }
}

fn reused(manifest: ExperimentManifest, dir: PathBuf) -> Outcome {
    Outcome { manifest, dir, reused: true }
}

fn require_files<'a>(paths: impl IntoIterator<Item = &'a PathBuf>) -> CliResult<()> {
    let missing: Vec<String> = paths.into_iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::validation(format!("data files not found: {}", missing.join(", "))))
    }
}

/// Train and test splits named by the config, plus the files they came from.
pub fn load_data(config: &ExperimentConfig) -> CliResult<(Dataset, Dataset, Vec<PathBuf>)> {
    match &config.data {
        DataConfig::Cifar10 {
            train,
            test,
            train_limit,
            test_limit,
        } => {
            require_files(train.iter().chain(test))?;
            let mut tr = load_cifar10_files(train, "cifar10-train")?;
            let mut te = load_cifar10_files(test, "cifar10-test")?;
            if let Some(n) = train_limit {
                tr = tr.take(*n)?;
            }
            if let Some(n) = test_limit {
                te = te.take(*n)?;
            }
            Ok((tr, te, train.iter().chain(test).cloned().collect()))
        }
        DataConfig::Synthetic {
            seed,
            n_train,
            n_test,
            separability,
        } => {
            let m = &config.model;
            let all = synthetic_dataset_sized(*seed, n_train + n_test, m.classes, *separability, m.input_size)?;
            let mut tr = all.subset(&(0..*n_train).collect::<Vec<_>>())?;
            let mut te = all.subset(&(*n_train..n_train + n_test).collect::<Vec<_>>())?;
            tr.name = "synthetic-train".into();
            te.name = "synthetic-test".into();
            Ok((tr, te, Vec::new()))
        }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

/// Facts about the dense run that the CSV log cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSummary {
    pub final_test_acc: f64,
    pub epochs: usize,
    pub normalization: Normalization,
    pub recipe: String,
    pub cost: CostReport,
    pub train: TrainConfig,
}

fn save_network(dir: &Path, spec: &NetworkSpec, params: &ParamStore, log: &TrainLog) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.json"), spec.to_json()? + "\n")?;
    params.save_dir(&dir.join("params"))?;
    fs::write(dir.join("train_log.csv"), log.to_csv())?;
    Ok(())
}

fn load_network(dir: &Path) -> CliResult<(NetworkSpec, ParamStore)> {
    let spec = NetworkSpec::from_json(&fs::read_to_string(dir.join("spec.json"))?)?;
    let params = ParamStore::load_dir(&dir.join("params"))?;
    params.check(&spec)?;
    Ok((spec, params))
}

/// Train the dense network, persisting checkpoints, the log and its l1 scores.
pub fn cmd_train_dense(ctx: &Context) -> CliResult<Outcome> {
    let dir = ctx.dir(Command::TrainDense);
    let key = ctx.config.dense_digest()?;
    if let Some(m) = prepare(&dir, &key, |m| &m.dense_digest, ctx.force)? {
        return Ok(reused(m, dir));
    }
    let mut draft = ManifestDraft::new(ctx, Command::TrainDense, ctx.config.digest()?);
    let config = ctx.config.train_config();
    let spec = ctx.config.network()?;
    let (train_set, test_set, inputs) = load_data(&ctx.config)?;
    draft.inputs.extend(inputs);
    draft.seeds.insert("train".into(), config.seed);
    if let DataConfig::Synthetic { seed, .. } = ctx.config.data {
        draft.seeds.insert("synthetic_data".into(), seed);
    }
    let data = TrainData::new(&train_set, &test_set)?;
    log::info!("training dense {} blocks for {} epochs", spec.num_blocks(), config.epochs_n);
    let run = train(&spec, &ParamStore::init(&spec, config.seed), &config, &data)?;

    save_network(&dir, &spec, &run.params, &run.log)?;
    run.checkpoints.save_dir(&dir.join("checkpoints"))?;
    let summary = DenseSummary {
        final_test_acc: run.log.final_test_acc,
        epochs: run.log.epochs.len(),
        normalization: data.norm,
        recipe: config.recipe(),
        cost: CostReport::new(&spec, run.log.total_seconds(), &ctx.config.report.carbon)?,
        train: config,
    };
    write_json(&dir.join(DENSE_SUMMARY), &summary)?;
    fs::write(dir.join(L1_SCORES), score_l1(&spec, &run.params, L1Normalize::Raw)?.to_json()? + "\n")?;
    draft.finish(&dir)
}

/// Dense run from `<root>/train-dense`, training it first when absent.
pub fn ensure_dense(ctx: &Context) -> CliResult<(Outcome, DenseRun)> {
    // --force on a downstream command replaces the dense run only when it
    // belongs to another configuration.
    let manifest = ExperimentManifest::path_in(&ctx.dir(Command::TrainDense));
    let stale = manifest.is_file() && ExperimentManifest::read(&manifest)?.dense_digest != ctx.config.dense_digest()?;
    let dense_ctx = Context {
        force: ctx.force && stale,
        ..ctx.clone()
    };
    let outcome = cmd_train_dense(&dense_ctx)?;
    let dir = &outcome.dir;
    let (spec, params) = load_network(dir)?;
    let summary: DenseSummary = read_json(&dir.join(DENSE_SUMMARY))?;
    let mut log = TrainLog::from_csv(&fs::read_to_string(dir.join("train_log.csv"))?)?;
    log.final_test_acc = summary.final_test_acc;
    let checkpoints = CheckpointStore::load_dir(&dir.join("checkpoints"))?;
    Ok((
        outcome,
        DenseRun {
            spec,
            params,
            checkpoints,
            log,
        },
    ))
}

fn settings_for(config: &ExperimentConfig, p: usize, rewind: Rewind) -> TicketSettings {
    let pr = &config.prune;
    TicketSettings {
        criterion: pr.criterion,
        p,
        rewind,
        xi: pr.xi,
        scoring_seed: pr.scoring_seed,
        scoring_batch: pr.scoring_batch,
        carbon: config.report.carbon,
    }
}

/// Everything a ticket command writes besides the manifest.
fn write_ticket_artifacts(dir: &Path, outcomes: &[TicketOutcome]) -> CliResult<()> {
    let reports: Vec<&TicketReport> = outcomes.iter().map(|o| &o.report).collect();
    write_json(&dir.join(TICKET_REPORT), &reports)?;
    fs::write(dir.join(TABLE), markdown_table(reports.iter().copied()))?;
    fs::write(dir.join(METRICS_CSV), metrics_csv(reports.iter().map(|r| (dir_name(dir), *r))))?;
    let importance: Vec<Option<&ImportanceReport>> = outcomes.iter().map(|o| o.importance.as_ref()).collect();
    write_json(&dir.join("importance.json"), &importance)?;
    let plans: Vec<&PruningPlan> = outcomes.iter().map(|o| &o.plan).collect();
    write_json(&dir.join("plans.json"), &plans)?;
    let filter_plans: Vec<_> = outcomes.iter().filter_map(|o| o.filter_plan.as_ref()).collect();
    if !filter_plans.is_empty() {
        write_json(&dir.join("filter_plans.json"), &filter_plans)?;
    }
    for (i, o) in outcomes.iter().enumerate() {
        fs::create_dir_all(dir.join("sub_logs"))?;
        fs::write(dir.join("sub_logs").join(format!("row_{i:02}.csv")), o.sub_log.to_csv())?;
    }
    if let Some(first) = outcomes.first() {
        save_network(&dir.join("sub"), &first.sub_spec, &first.sub_params, &first.sub_log)?;
    }
    Ok(())
}

fn dir_name(dir: &Path) -> &str {
    dir.file_name().and_then(|n| n.to_str()).unwrap_or("")
}

fn ticket_command(ctx: &Context, command: Command) -> CliResult<Outcome> {
    let pr = &ctx.config.prune;
    match (command, pr.rewind) {
        (Command::Lth, Rewind::Init) => {
            return Err(CliError::validation(
                "lth prunes a trained network; prune.rewind must be a checkpoint epoch or \"reinit\" (use init-lth for \"init\")",
            ))
        }
        (Command::InitLth, r) if r != Rewind::Init => {
            return Err(CliError::validation("init-lth prunes at initialization; set prune.rewind to \"init\""));
        }
        _ => {}
    }
    if command == Command::InitLth && pr.filter_baseline && !matches!(pr.criterion, Criterion::Snip | Criterion::Grasp | Criterion::GraspHvp) {
        return Err(CliError::validation("prune.filter_baseline needs a gradient criterion (snip, grasp or grasp_hvp)"));
    }

    let dir = ctx.dir(command);
    let key = ctx.config.digest()?;
    if let Some(m) = prepare(&dir, &key, |m| &m.config_digest, ctx.force)? {
        return Ok(reused(m, dir));
    }
    let (_, dense) = ensure_dense(ctx)?;
    let mut draft = ManifestDraft::new(ctx, command, key.clone());
    let config = ctx.config.train_config();
    let (train_set, test_set, inputs) = load_data(&ctx.config)?;
    draft.inputs.extend(inputs);
    draft.seeds.insert("train".into(), config.seed);
    if pr.criterion.needs_batch() {
        draft.seeds.insert("scoring".into(), pr.scoring_seed);
    }
    let data = TrainData::new(&train_set, &test_set)?;

    let rewinds: Vec<Rewind> = if command == Command::Lth && pr.rewind_sweep {
        dense
            .checkpoints
            .epochs()
            .into_iter()
            .filter(|&e| e < config.epochs_n)
            .map(Rewind::Epoch)
            .chain([Rewind::Reinit])
            .collect()
    } else {
        vec![pr.rewind]
    };
    let mut outcomes = Vec::new();
    for p in pr.p.values() {
        for &rewind in &rewinds {
            let settings = settings_for(&ctx.config, p, rewind);
            log::info!("{command}: criterion {} p={p} rewind {rewind}", pr.criterion);
            let outcome = match command {
                Command::Lth => lth_from_dense(&dense, &config, &settings, &data)?,
                _ => init_lth_from_dense(&dense, &config, &settings, &data)?,
            };
            outcomes.push(outcome);
        }
        if command == Command::InitLth && pr.filter_baseline {
            let settings = settings_for(&ctx.config, p, Rewind::Init);
            log::info!("{command}: filter baseline matched to p={p}");
            outcomes.push(filter_baseline_from_dense(&dense, &config, &settings, &data)?);
        }
    }
    for o in &mut outcomes {
        o.report.provenance.config_digest = Some(key.clone());
    }
    write_ticket_artifacts(&dir, &outcomes)?;
    draft.finish(&dir)
}

/// Remove the blocks a criterion ranks lowest on the trained network, rewind
/// and retrain.
pub fn cmd_lth(ctx: &Context) -> CliResult<Outcome> {
    ticket_command(ctx, Command::Lth)
}

/// Remove blocks ranked on the untrained network and train the sub-network.
pub fn cmd_init_lth(ctx: &Context) -> CliResult<Outcome> {
    ticket_command(ctx, Command::InitLth)
}

/// Evaluation sets for the robustness table: the clean test split, its
/// corrupted copies, and any external CIFAR-format files.
pub fn robustness_sets(config: &ExperimentConfig, test: &Dataset, rcfg: &RobustnessConfig, extra: &[PathBuf]) -> CliResult<Vec<Dataset>> {
    require_files(rcfg.eval_sets.iter().chain(extra))?;
    let mut sets = vec![test.clone()];
    sets[0].name = "clean".into();
    for c in &rcfg.corruptions {
        let spec = CorruptionSpec::new(c.kind, c.severity, rcfg.corruption_seed)?;
        let mut d = corrupt(test, &spec)?;
        d.name = spec.label();
        sets.push(d);
    }
    for path in rcfg.eval_sets.iter().chain(extra) {
        let mut d = load_cifar10_binary(path)?;
        if d.side() != config.model.input_size || d.num_classes() != config.model.classes {
            return Err(CliError::validation(format!(
                "{}: {} classes at {}x{} do not match the model ({} classes at {}x{})",
                path.display(),
                d.num_classes(),
                d.side(),
                d.side(),
                config.model.classes,
                config.model.input_size,
                config.model.input_size
            )));
        }
        d.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string());
        sets.push(d);
    }
    Ok(sets)
}

/// Dense versus sub-network accuracy on clean, corrupted and external sets.
pub fn cmd_robustness(ctx: &Context, extra_sets: &[PathBuf]) -> CliResult<Outcome> {
    let rcfg = ctx.config.robustness.clone().unwrap_or_default();
    let dir = ctx.dir(Command::Robustness);
    let key = digest(&(ctx.config.digest()?, extra_sets))?;
    if let Some(m) = prepare(&dir, &key, |m| &m.config_digest, ctx.force)? {
        return Ok(reused(m, dir));
    }
    let ticket_cmd = match rcfg.ticket {
        crate::config::TicketSource::Lth => Command::Lth,
        crate::config::TicketSource::InitLth => Command::InitLth,
    };
    let ticket_dir = ctx.dir(ticket_cmd);
    let ticket_manifest = ExperimentManifest::path_in(&ticket_dir);
    if !ticket_manifest.is_file() {
        fs::remove_dir_all(&dir)?;
        return Err(CliError::validation(format!(
            "no sub-network at {}; run `lotto {ticket_cmd}` with this configuration first",
            ticket_dir.display()
        )));
    }
    let ticket = ExperimentManifest::read(&ticket_manifest)?;
    if ticket.dense_digest != ctx.config.dense_digest()? {
        fs::remove_dir_all(&dir)?;
        return Err(CliError::validation(format!(
            "{} was built from a different dense configuration",
            ticket_dir.display()
        )));
    }
    let (_, dense) = ensure_dense(ctx)?;
    let mut draft = ManifestDraft::new(ctx, Command::Robustness, key);
    let (sub_spec, sub_params) = load_network(&ticket_dir.join("sub"))?;
    let (train_set, test_set, inputs) = load_data(&ctx.config)?;
    draft.inputs.extend(inputs);
    draft.inputs.extend(rcfg.eval_sets.iter().chain(extra_sets).cloned());
    draft.seeds.insert("corruption".into(), rcfg.corruption_seed);
    let norm = Normalization::fit(&train_set);
    let sets = robustness_sets(&ctx.config, &test_set, &rcfg, extra_sets)?;
    let report = robustness_report(&dense.spec, &dense.params, &sub_spec, &sub_params, &sets, &norm)?;
    write_json(&dir.join(ROBUSTNESS_JSON), &report)?;
    fs::write(dir.join(ROBUSTNESS_MD), report.to_markdown())?;
    draft.finish(&dir)
}

fn manifest_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        ExperimentManifest::path_in(path)
    } else {
        path.to_path_buf()
    }
}

/// Manifests named on the command line, or every command directory under
/// the output root in pipeline order.
fn report_inputs(ctx: &Context, given: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    if !given.is_empty() {
        return Ok(given.iter().map(|p| manifest_file(p)).collect());
    }
    let found: Vec<PathBuf> = Command::ALL
        .into_iter()
        .filter(|&c| c != Command::Report)
        .map(|c| ExperimentManifest::path_in(&ctx.dir(c)))
        .filter(|p| p.is_file())
        .collect();
    if found.is_empty() {
        return Err(CliError::validation(format!("no manifests under {}", ctx.root.display())));
    }
    Ok(found)
}

/// Aggregate tables, CSV and the l1 plot from manifests alone.
pub fn render_report(manifests: &[(PathBuf, ExperimentManifest)], out: &Path) -> CliResult<()> {
    let mut rows: Vec<(String, TicketReport)> = Vec::new();
    let mut robustness: Vec<(String, RobustnessReport)> = Vec::new();
    let mut l1: Option<(NetworkSpec, ImportanceReport)> = None;
    for (path, m) in manifests {
        let dir = path.parent().unwrap_or(Path::new("."));
        let source = format!("{}:{}", m.command, &m.config_digest[..12.min(m.config_digest.len())]);
        match Command::from_name(&m.command) {
            Some(Command::Lth | Command::InitLth) => {
                let reports: Vec<TicketReport> = read_json(&dir.join(TICKET_REPORT))?;
                rows.extend(reports.into_iter().map(|r| (source.clone(), r)));
            }
            Some(Command::Robustness) => robustness.push((source, read_json(&dir.join(ROBUSTNESS_JSON))?)),
            Some(Command::TrainDense) if l1.is_none() => {
                let spec = NetworkSpec::from_json(&fs::read_to_string(dir.join("spec.json"))?)?;
                l1 = Some((spec, ImportanceReport::from_json(&fs::read_to_string(dir.join(L1_SCORES))?)?));
            }
            _ => {}
        }
    }

    let mut table = String::from("# Results\n\n");
    if rows.is_empty() {
        table.push_str("No ticket rows in the given manifests.\n");
    } else {
        table.push_str(&markdown_table(rows.iter().map(|(_, r)| r)));
        let first = &rows[0].1.provenance;
        table.push_str(&format!("\nFLOPs: {}\n\nInput pipeline: {}\n", first.flop_convention, first.recipe));
    }
    for (source, r) in &robustness {
        table.push_str(&format!("\n## Robustness ({source})\n\n{}", r.to_markdown()));
    }
    if let Some((spec, report)) = &l1 {
        table.push_str("\n## Mean raw l1 score by stage\n\n| stage | mean l1 |\n|---|---|\n");
        for (stage, mean) in stage_means(&report.scores) {
            table.push_str(&format!("| {} | {mean:.4} |\n", stage + 1));
        }
        fs::write(out.join(L1_SVG), l1_stage_svg(spec, &report.scores, "l1-norm score of residual blocks (trained dense network)")?)?;
    } else {
        log::warn!("no train-dense manifest given; skipping {L1_SVG}");
    }
    fs::write(out.join(TABLE), table)?;
    fs::write(out.join(METRICS_CSV), metrics_csv(rows.iter().map(|(s, r)| (s.as_str(), r))))?;
    Ok(())
}

pub fn cmd_report(ctx: &Context, given: &[PathBuf]) -> CliResult<Outcome> {
    let paths = report_inputs(ctx, given)?;
    let mut manifests = Vec::new();
    let mut missing = Vec::new();
    for p in &paths {
        let m = ExperimentManifest::read(p)?;
        missing.extend(m.missing_artifacts(p.parent().unwrap_or(Path::new("."))));
        manifests.push((p.clone(), m));
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
        return Err(CliError::validation(format!("missing artifacts: {}", list.join(", "))));
    }
    let fingerprints: Vec<(String, String)> = manifests
        .iter()
        .map(|(p, m)| Ok((p.display().to_string(), digest(m)?)))
        .collect::<CliResult<_>>()?;
    let key = digest(&fingerprints)?;
    let dir = ctx.dir(Command::Report);
    if let Some(m) = prepare(&dir, &key, |m| &m.config_digest, ctx.force)? {
        return Ok(reused(m, dir));
    }
    let mut draft = ManifestDraft::new(ctx, Command::Report, key);
    draft.inputs.extend(paths);
    render_report(&manifests, &dir)?;
    draft.finish(&dir)
}
