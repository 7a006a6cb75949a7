//! Block importance scores. Every criterion scores exactly the removable
//! blocks of a network; lower scores mark blocks to remove first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{scoring_batch, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{backward, removable_blocks, BlockId, Mode, NetworkSpec, Owner, ParamKey, ParamStore};
use crate::seed::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_SCORING_BATCH: usize = 128;
pub const DEFAULT_SCORING_SEED: u64 = 0;
/// Relative finite-difference step for Hessian-gradient products.
pub const HVP_REL_STEP: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Random,
    /// Sum of absolute conv weights.
    L1,
    /// [`Criterion::L1`] standardized within each stage.
    L1Zscore,
    Snip,
    /// Sign-preserving first-order saliency `w * g`.
    Grasp,
    /// `-w * Hg` with a finite-difference Hessian-gradient product.
    GraspHvp,
}

impl Criterion {
    pub const ALL: [Criterion; 6] = [
        Criterion::Random,
        Criterion::L1,
        Criterion::L1Zscore,
        Criterion::Snip,
        Criterion::Grasp,
        Criterion::GraspHvp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::L1 => "l1",
            Criterion::L1Zscore => "l1_zscore",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::GraspHvp => "grasp_hvp",
        }
    }

    /// Whether the criterion needs gradients on a scoring batch.
    pub fn needs_batch(self) -> bool {
        matches!(self, Criterion::Snip | Criterion::Grasp | Criterion::GraspHvp)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown criterion `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L1Normalize {
    Raw,
    PerStageZscore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraspMode {
    SignedFirstOrder,
    Hvp,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn_mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp_mode: Option<GraspMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_normalize: Option<L1Normalize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub criterion: String,
    pub scores: BTreeMap<BlockId, f64>,
    pub metadata: ScoreMetadata,
}

impl ImportanceReport {
    fn new(criterion: &str, scores: BTreeMap<BlockId, f64>, metadata: ScoreMetadata) -> Result<Self> {
        if let Some((id, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::arg(format!("{criterion} score of block {id} is {s}")));
        }
        Ok(ImportanceReport {
            criterion: criterion.to_string(),
            scores,
            metadata,
        })
    }

    /// Blocks from least to most important, ties broken by id.
    pub fn ascending(&self) -> Vec<BlockId> {
        let mut v: Vec<(BlockId, f64)> = self.scores.iter().map(|(&b, &s)| (b, s)).collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v.into_iter().map(|(b, _)| b).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// A fixed mini-batch used by gradient-based criteria.
#[derive(Debug, Clone)]
pub struct ScoringBatch<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub seed: u64,
    pub bn_mode: Mode,
}

impl<T: Scalar> ScoringBatch<T> {
    /// Class-balanced batch drawn from `dataset`, scored with train-mode BN.
    pub fn from_dataset(dataset: &Dataset, norm: &Normalization, size: usize, seed: u64) -> Result<Self> {
        let indices = scoring_batch(dataset, size, seed);
        let (images, labels) = norm.batch(dataset, &indices)?;
        Ok(ScoringBatch {
            images,
            labels,
            seed,
            bn_mode: Mode::Train,
        })
    }

    fn metadata(&self) -> ScoreMetadata {
        ScoreMetadata {
            seed: Some(self.seed),
            batch_size: Some(self.labels.len()),
            bn_mode: Some(self.bn_mode),
            ..ScoreMetadata::default()
        }
    }
}

/// I.i.d. uniform scores, a function of the seed alone.
pub fn score_random(spec: &NetworkSpec, seed: u64) -> ImportanceReport {
    let mut rng = stream_rng(seed, Stream::RandomCriterion, 0);
    let scores = removable_blocks(spec).into_iter().map(|b| (b, rng.random::<f64>())).collect();
    ImportanceReport {
        criterion: Criterion::Random.as_str().into(),
        scores,
        metadata: ScoreMetadata {
            seed: Some(seed),
            ..ScoreMetadata::default()
        },
    }
}

/// Sum of |w| over the conv weights of each removable block.
pub fn l1_raw<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>) -> Result<BTreeMap<BlockId, f64>> {
    removable_blocks(spec)
        .into_iter()
        .map(|id| {
            let conv1 = params.get(&ParamKey::block(id, "conv1.weight"))?.abs_sum();
            let conv2 = params.get(&ParamKey::block(id, "conv2.weight"))?.abs_sum();
            Ok((id, conv1 + conv2))
        })
        .collect()
}

/// Standardize within each stage (population std). Stages whose scores have
/// zero variance, including single-block stages, score 0.
pub fn zscore_per_stage(raw: &BTreeMap<BlockId, f64>) -> BTreeMap<BlockId, f64> {
    let mut stages: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (id, &s) in raw {
        stages.entry(id.stage).or_default().push(s);
    }
    let stats: BTreeMap<usize, (f64, f64)> = stages
        .into_iter()
        .map(|(stage, v)| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / v.len() as f64;
            (stage, (mean, var.sqrt()))
        })
        .collect();
    raw.iter()
        .map(|(&id, &s)| {
            let (mean, std) = stats[&id.stage];
            let z = if std > 1e-12 * mean.abs().max(1.0) { (s - mean) / std } else { 0.0 };
            (id, z)
        })
        .collect()
}

pub fn score_l1<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, normalize: L1Normalize) -> Result<ImportanceReport> {
    let raw = l1_raw(spec, params)?;
    let (criterion, scores) = match normalize {
        L1Normalize::Raw => (Criterion::L1, raw),
        L1Normalize::PerStageZscore => (Criterion::L1Zscore, zscore_per_stage(&raw)),
    };
    ImportanceReport::new(
        criterion.as_str(),
        scores,
        ScoreMetadata {
            l1_normalize: Some(normalize),
            ..ScoreMetadata::default()
        },
    )
}

/// Sum of `f(w, g)` over every trainable tensor of each removable block.
pub fn block_saliency<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    grads: &ParamStore<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<BTreeMap<BlockId, f64>> {
    let mut scores: BTreeMap<BlockId, f64> = removable_blocks(spec).into_iter().map(|b| (b, 0.0)).collect();
    for (key, g) in grads.iter() {
        let Owner::Block(id) = key.owner else { continue };
        let Some(total) = scores.get_mut(&id) else { continue };
        let w = params.get(key)?;
        *total += w.data().iter().zip(g.data()).map(|(&w, &g)| f(w.as_f64(), g.as_f64())).sum::<f64>();
    }
    Ok(scores)
}

pub fn snip_saliency(w: f64, g: f64) -> f64 {
    (w * g).abs()
}

pub fn grasp_saliency(w: f64, g: f64) -> f64 {
    w * g
}

pub fn score_snip<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, batch: &ScoringBatch<T>) -> Result<ImportanceReport> {
    let grads = backward(spec, params, &batch.images, &batch.labels, batch.bn_mode)?.grads;
    ImportanceReport::new(Criterion::Snip.as_str(), block_saliency(spec, params, &grads, snip_saliency)?, batch.metadata())
}

/// Finite-difference step along `g`, or `None` when it would be degenerate.
pub fn hvp_step(theta_norm: f64, grad_norm: f64) -> Option<f64> {
    let eps = HVP_REL_STEP * theta_norm / grad_norm;
    (grad_norm > 1e-12 && eps.is_finite() && eps > 0.0).then_some(eps)
}

/// `-w * Hg` per block, with `Hg ~ (g(theta + eps g) - g(theta)) / eps`.
pub fn hvp_saliency<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    grads: &ParamStore<T>,
    shifted_grads: &ParamStore<T>,
    eps: f64,
) -> Result<BTreeMap<BlockId, f64>> {
    let mut scores: BTreeMap<BlockId, f64> = removable_blocks(spec).into_iter().map(|b| (b, 0.0)).collect();
    for (key, g) in grads.iter() {
        let Owner::Block(id) = key.owner else { continue };
        let Some(total) = scores.get_mut(&id) else { continue };
        let w = params.get(key)?.data();
        let g2 = shifted_grads.get(key)?.data();
        *total -= w
            .iter()
            .zip(g.data())
            .zip(g2)
            .map(|((&w, &g), &g2)| w.as_f64() * (g2.as_f64() - g.as_f64()) / eps)
            .sum::<f64>();
    }
    Ok(scores)
}

pub fn score_grasp<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, batch: &ScoringBatch<T>, mode: GraspMode) -> Result<ImportanceReport> {
    let grads = backward(spec, params, &batch.images, &batch.labels, batch.bn_mode)?.grads;
    let mut metadata = batch.metadata();
    if mode == GraspMode::Hvp {
        let theta_norm = params.trainable_norm();
        let grad_norm = grads.trainable_norm();
        if let Some(eps) = hvp_step(theta_norm, grad_norm) {
            let mut shifted = params.clone();
            shifted.axpy(T::of(eps), &grads)?;
            let g2 = backward(spec, &shifted, &batch.images, &batch.labels, batch.bn_mode)?.grads;
            metadata.grasp_mode = Some(GraspMode::Hvp);
            return ImportanceReport::new(Criterion::GraspHvp.as_str(), hvp_saliency(spec, params, &grads, &g2, eps)?, metadata);
        }
        let msg = format!("gradient norm {grad_norm:e} too small for a Hessian-gradient step; using signed first-order scores");
        log::warn!("{msg}");
        metadata.warnings.push(msg);
    }
    metadata.grasp_mode = Some(GraspMode::SignedFirstOrder);
    ImportanceReport::new(Criterion::Grasp.as_str(), block_saliency(spec, params, &grads, grasp_saliency)?, metadata)
}

/// Score any criterion. Gradient criteria require `batch`; `seed` drives the
/// random criterion.
pub fn score<T: Scalar>(
    criterion: Criterion,
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    batch: Option<&ScoringBatch<T>>,
    seed: u64,
) -> Result<ImportanceReport> {
    let need = || batch.ok_or_else(|| Error::arg(format!("criterion {criterion} needs a scoring batch")));
    match criterion {
        Criterion::Random => Ok(score_random(spec, seed)),
        Criterion::L1 => score_l1(spec, params, L1Normalize::Raw),
        Criterion::L1Zscore => score_l1(spec, params, L1Normalize::PerStageZscore),
        Criterion::Snip => score_snip(spec, params, need()?),
        Criterion::Grasp => score_grasp(spec, params, need()?, GraspMode::SignedFirstOrder),
        Criterion::GraspHvp => score_grasp(spec, params, need()?, GraspMode::Hvp),
    }
}

/// Which conv of a block a filter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterConv {
    Conv1,
    Conv2,
}

impl FilterConv {
    pub fn prefixes(self) -> (&'static str, &'static str) {
        match self {
            FilterConv::Conv1 => ("conv1", "bn1"),
            FilterConv::Conv2 => ("conv2", "bn2"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FilterId {
    pub block: BlockId,
    pub conv: FilterConv,
    pub filter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    #[serde(flatten)]
    pub id: FilterId,
    pub score: f64,
}

/// Per-filter saliency: a filter's kernel weights plus its BN scale and
/// shift, so that the filters of a block add up to the block score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterImportanceReport {
    pub criterion: String,
    pub scores: Vec<FilterScore>,
    pub metadata: ScoreMetadata,
}

impl FilterImportanceReport {
    pub fn block_total(&self, block: BlockId) -> f64 {
        self.scores.iter().filter(|s| s.id.block == block).map(|s| s.score).sum()
    }
}

/// Filter scores for `conv1` and `conv2` of every block.
pub fn filter_saliency<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    grads: &ParamStore<T>,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Vec<FilterScore>> {
    let mut out = Vec::new();
    for block in spec.blocks() {
        let id = block.block_id;
        for conv in [FilterConv::Conv1, FilterConv::Conv2] {
            let (conv_name, bn) = conv.prefixes();
            let wkey = ParamKey::block(id, &format!("{conv_name}.weight"));
            let (w, g) = (params.get(&wkey)?, grads.get(&wkey)?);
            let filters = w.shape()[0];
            let per = w.len() / filters;
            let bn_terms = [format!("{bn}.scale"), format!("{bn}.shift")]
                .map(|name| Ok::<_, Error>((params.get(&ParamKey::block(id, &name))?, grads.get(&ParamKey::block(id, &name))?)));
            let [scale, shift] = bn_terms;
            let (scale, shift) = (scale?, shift?);
            for filter in 0..filters {
                let range = filter * per..(filter + 1) * per;
                let mut s: f64 = w.data()[range.clone()]
                    .iter()
                    .zip(&g.data()[range])
                    .map(|(&w, &g)| f(w.as_f64(), g.as_f64()))
                    .sum();
                for (p, gp) in [scale, shift] {
                    s += f(p.data()[filter].as_f64(), gp.data()[filter].as_f64());
                }
                out.push(FilterScore {
                    id: FilterId { block: id, conv, filter },
                    score: s,
                });
            }
        }
    }
    Ok(out)
}

/// Filter-level SNIP or signed GraSP at initialization.
pub fn score_filters_at_init<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    batch: &ScoringBatch<T>,
    criterion: Criterion,
) -> Result<FilterImportanceReport> {
    let f: fn(f64, f64) -> f64 = match criterion {
        Criterion::Snip => snip_saliency,
        Criterion::Grasp => grasp_saliency,
        other => return Err(Error::arg(format!("filter scoring supports snip and grasp, not {other}"))),
    };
    let grads = backward(spec, params, &batch.images, &batch.labels, batch.bn_mode)?.grads;
    let scores = filter_saliency(spec, params, &grads, f)?;
    if let Some(bad) = scores.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::arg(format!("non-finite filter score for {:?}", bad.id)));
    }
    let mut metadata = batch.metadata();
    if criterion == Criterion::Grasp {
        metadata.grasp_mode = Some(GraspMode::SignedFirstOrder);
    }
    Ok(FilterImportanceReport {
        criterion: criterion.as_str().into(),
        scores,
        metadata,
    })
}
