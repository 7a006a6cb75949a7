//! Scaled-down directional comparison of the at-initialization criteria:
//! several seeds of a small ResNet, GraSP at low density against SNIP at
//! high density, all relative to the dense run of the same seed.

use std::fmt::Write as _;
use std::time::Instant;

use lotto_core::criteria::Criterion;
use lotto_core::data::Dataset;
use lotto_core::model::{build_resnet_for_input, ParamStore};
use lotto_core::training::{init_lth_from_dense, train, winning_ticket_test, Rewind, TicketSettings, TrainConfig, TrainData};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalSettings {
    pub depth: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training images kept from the front of the train split.
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub seeds: Vec<u64>,
    pub grasp_p: Vec<usize>,
    pub snip_p: Vec<usize>,
    /// GraSP tolerance in accuracy points, applied to the mean over seeds.
    pub xi: f64,
    pub augment: bool,
}

impl Default for DirectionalSettings {
    fn default() -> Self {
        DirectionalSettings {
            depth: 20,
            width: 16,
            epochs: 30,
            batch_size: lotto_core::training::DEFAULT_BATCH,
            train_limit: Some(10_000),
            test_limit: None,
            seeds: vec![0, 1, 2],
            grasp_p: vec![1, 2],
            snip_p: vec![4, 5],
            xi: 1.0,
            augment: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalRow {
    pub seed: u64,
    pub criterion: Criterion,
    pub p: usize,
    pub dense_acc: f64,
    pub sub_acc: f64,
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalReport {
    pub settings: DirectionalSettings,
    pub rows: Vec<DirectionalRow>,
    /// Mean delta of GraSP at the smallest GraSP density.
    pub grasp_low_mean_delta: f64,
    /// GraSP at the smallest density, per seed, against `xi`.
    pub grasp_low_wins: Vec<(u64, bool)>,
    pub grasp_low_mean_wins: bool,
    pub grasp_mean_delta: f64,
    pub snip_mean_delta: f64,
    pub ordering_holds: bool,
    pub seconds: f64,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

pub fn run_directional(train_set: &Dataset, test_set: &Dataset, settings: &DirectionalSettings) -> CliResult<DirectionalReport> {
    let (Some(&grasp_low), false) = (settings.grasp_p.iter().min(), settings.snip_p.is_empty()) else {
        return Err(CliError::validation("directional run needs at least one GraSP and one SNIP density"));
    };
    if settings.seeds.is_empty() {
        return Err(CliError::validation("directional run needs at least one seed"));
    }
    let started = Instant::now();
    let train_set = match settings.train_limit {
        Some(n) => train_set.take(n)?,
        None => train_set.clone(),
    };
    let test_set = match settings.test_limit {
        Some(n) => test_set.take(n)?,
        None => test_set.clone(),
    };
    let spec = build_resnet_for_input(settings.depth, train_set.num_classes(), settings.width, train_set.side())?;
    let data = TrainData::new(&train_set, &test_set)?;

    let mut rows = Vec::new();
    for &seed in &settings.seeds {
        let mut config = TrainConfig::standard(settings.epochs, seed);
        config.batch_size = settings.batch_size;
        config.augment = settings.augment;
        log::info!("directional seed {seed}: dense run");
        let dense = train(&spec, &ParamStore::init(&spec, seed), &config, &data)?;
        let arms = settings
            .grasp_p
            .iter()
            .map(|&p| (Criterion::Grasp, p))
            .chain(settings.snip_p.iter().map(|&p| (Criterion::Snip, p)));
        for (criterion, p) in arms {
            log::info!("directional seed {seed}: {criterion} p={p}");
            let mut ticket = TicketSettings::new(criterion, p, Rewind::Init);
            ticket.xi = settings.xi;
            let out = init_lth_from_dense(&dense, &config, &ticket, &data)?;
            rows.push(DirectionalRow {
                seed,
                criterion,
                p,
                dense_acc: out.report.dense_acc,
                sub_acc: out.report.sub_acc,
                delta_pp: out.report.delta_pp,
            });
        }
    }

    let deltas = |c: Criterion, ps: &[usize]| mean(rows.iter().filter(|r| r.criterion == c && ps.contains(&r.p)).map(|r| r.delta_pp));
    let low: Vec<&DirectionalRow> = rows.iter().filter(|r| r.criterion == Criterion::Grasp && r.p == grasp_low).collect();
    let grasp_low_wins = low
        .iter()
        .map(|r| Ok((r.seed, winning_ticket_test(r.sub_acc, r.dense_acc, settings.xi)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let grasp_low_mean_delta = mean(low.iter().map(|r| r.delta_pp));
    let grasp_mean_delta = deltas(Criterion::Grasp, &settings.grasp_p);
    let snip_mean_delta = deltas(Criterion::Snip, &settings.snip_p);
    Ok(DirectionalReport {
        settings: settings.clone(),
        grasp_low_mean_wins: grasp_low_mean_delta + settings.xi >= 0.0,
        grasp_low_wins,
        grasp_low_mean_delta,
        grasp_mean_delta,
        snip_mean_delta,
        ordering_holds: grasp_mean_delta >= snip_mean_delta,
        rows,
        seconds: started.elapsed().as_secs_f64(),
    })
}

impl DirectionalReport {
    pub fn to_markdown(&self) -> String {
        let s = &self.settings;
        let mut out = format!(
            "ResNet{} width {}, {} epochs, seeds {:?}, xi = {} pp\n\n| seed | criterion | p | dense acc | sub acc | delta (pp) |\n|---|---|---|---|---|---|\n",
            s.depth, s.width, s.epochs, s.seeds, s.xi
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.2} | {:.2} | {:+.2} |",
                r.seed, r.criterion, r.p, r.dense_acc, r.sub_acc, r.delta_pp
            );
        }
        let per_seed: Vec<String> = self
            .grasp_low_wins
            .iter()
            .map(|(seed, win)| format!("seed {seed}: {}", if *win { "win" } else { "no win" }))
            .collect();
        let _ = write!(
            out,
            "\nGraSP p={} mean delta {:+.2} pp ({}; {})\n\nmean delta GraSP p in {:?}: {:+.2} pp, SNIP p in {:?}: {:+.2} pp, ordering {}\n",
            s.grasp_p.iter().min().copied().unwrap_or(0),
            self.grasp_low_mean_delta,
            if self.grasp_low_mean_wins { "win" } else { "no win" },
            per_seed.join(", "),
            s.grasp_p,
            self.grasp_mean_delta,
            s.snip_p,
            self.snip_mean_delta,
            if self.ordering_holds { "holds" } else { "violated" }
        );
        out
    }
}
