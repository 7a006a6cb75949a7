//! Cost accounting, representation similarity, ticket verdicts and
//! robustness deltas.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{BlockId, BlockSpec, ConvSpec, FeatureShape, NetworkSpec, ParamStore, Shortcut};
use crate::tensor::{Scalar, Tensor};
use crate::training::{evaluate, winning_ticket_test, Rewind, TrainConfig};

/// FLOPs per element for the non-conv layers.
pub const BN_FLOPS_PER_ELEMENT: u64 = 2;
pub const RELU_FLOPS_PER_ELEMENT: u64 = 1;
pub const ADD_FLOPS_PER_ELEMENT: u64 = 1;
pub const POOL_FLOPS_PER_ELEMENT: u64 = 1;
pub const FLOP_CONVENTION: &str = "multiply-add = 2 FLOPs; conv 2*K*K*Cin*Cout*Hout*Wout; linear 2*in*out; \
BN 2, ReLU 1, residual add 1, global pool 1 FLOP per element; batch size 1";
pub const BYTES_PER_ELEMENT: u64 = 4;

fn conv_flops(c: &ConvSpec, out: FeatureShape) -> u64 {
    2 * (c.kernel * c.kernel * c.in_channels * c.out_channels * out.height * out.width) as u64
}

fn conv_bn_flops(c: &ConvSpec, out: FeatureShape) -> u64 {
    conv_flops(c, out) + BN_FLOPS_PER_ELEMENT * out.numel() as u64
}

fn block_flops(b: &BlockSpec, out: FeatureShape) -> u64 {
    let mid = FeatureShape {
        channels: b.conv1.out_channels,
        ..out
    };
    let mut f = conv_bn_flops(&b.conv1, mid) + RELU_FLOPS_PER_ELEMENT * mid.numel() as u64 + conv_bn_flops(&b.conv2, out);
    if let Shortcut::Projection(p) = &b.shortcut {
        f += conv_bn_flops(p, out);
    }
    f + (ADD_FLOPS_PER_ELEMENT + RELU_FLOPS_PER_ELEMENT) * out.numel() as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub stem: u64,
    pub blocks: BTreeMap<BlockId, u64>,
    pub head: u64,
    pub total: u64,
}

/// Forward FLOPs of one example.
pub fn flop_breakdown(spec: &NetworkSpec) -> Result<FlopBreakdown> {
    let plan = spec.shape_plan()?;
    let stem = conv_bn_flops(&spec.stem, plan.stem) + RELU_FLOPS_PER_ELEMENT * plan.stem.numel() as u64;
    let blocks: BTreeMap<BlockId, u64> = spec
        .blocks()
        .zip(&plan.blocks)
        .map(|(b, (_, _, out))| (b.block_id, block_flops(b, *out)))
        .collect();
    let last = plan.blocks.last().map_or(plan.stem, |(_, _, out)| *out);
    let head = POOL_FLOPS_PER_ELEMENT * last.numel() as u64 + 2 * (plan.features * plan.classes) as u64;
    let total = stem + blocks.values().sum::<u64>() + head;
    Ok(FlopBreakdown { stem, blocks, head, total })
}

pub fn count_flops(spec: &NetworkSpec) -> Result<u64> {
    flop_breakdown(spec).map(|b| b.total)
}

/// Trainable parameters: conv weights, BN scale and shift, classifier.
pub fn count_params(spec: &NetworkSpec) -> u64 {
    spec.param_shapes()
        .iter()
        .filter(|(k, _)| k.is_trainable())
        .map(|(_, s)| s.iter().product::<usize>() as u64)
        .sum()
}

/// Every stored element, running statistics included.
pub fn count_stored_elements(spec: &NetworkSpec) -> u64 {
    spec.param_shapes().values().map(|s| s.iter().product::<usize>() as u64).sum()
}

/// Analytic inference memory: stored tensors plus the peak of simultaneously
/// live activations when layers run one after another. Inside a block the
/// input (kept for the shortcut), the hidden map, the output and any
/// projection output are live together.
pub fn estimate_memory(spec: &NetworkSpec, batch: usize) -> Result<u64> {
    let plan = spec.shape_plan()?;
    let mut peak = plan.input.numel() + plan.stem.numel();
    for (b, (_, input, out)) in spec.blocks().zip(&plan.blocks) {
        let mid = b.conv1.out_channels * out.height * out.width;
        let side = if b.is_identity() { 0 } else { out.numel() };
        peak = peak.max(input.numel() + mid + out.numel() + side);
    }
    peak = peak.max(plan.features + plan.classes);
    Ok(BYTES_PER_ELEMENT * (count_stored_elements(spec) + (batch * peak) as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarbonParams {
    pub device_watts: f64,
    pub grid_g_per_kwh: f64,
}

impl Default for CarbonParams {
    fn default() -> Self {
        CarbonParams {
            device_watts: 250.0,
            grid_g_per_kwh: 400.0,
        }
    }
}

/// Grams of CO2 for a run of `wall_seconds` at constant power.
pub fn carbon_estimate(wall_seconds: f64, device_watts: f64, grid_g_per_kwh: f64) -> f64 {
    wall_seconds / 3600.0 * device_watts / 1000.0 * grid_g_per_kwh
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub memory_bytes: u64,
    pub wall_seconds: f64,
    pub co2_grams: f64,
}

impl CostReport {
    pub fn new(spec: &NetworkSpec, wall_seconds: f64, carbon: &CarbonParams) -> Result<Self> {
        Ok(CostReport {
            flops: count_flops(spec)?,
            params: count_params(spec),
            memory_bytes: estimate_memory(spec, 1)?,
            wall_seconds,
            co2_grams: carbon_estimate(wall_seconds, carbon.device_watts, carbon.grid_g_per_kwh),
        })
    }
}

/// Sub-network cost over dense cost. Wall-clock and CO2 compare time per
/// epoch, so retraining from a late rewind point is not credited with the
/// epochs it skips.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    #[serde(with = "nan_as_null")]
    pub flops: f64,
    #[serde(with = "nan_as_null")]
    pub params: f64,
    #[serde(with = "nan_as_null")]
    pub memory: f64,
    /// NaN (JSON `null`) when either run trained for zero epochs.
    #[serde(with = "nan_as_null")]
    pub wall: f64,
    #[serde(with = "nan_as_null")]
    pub co2: f64,
    /// Dense time per epoch over sub-network time per epoch.
    #[serde(with = "nan_as_null")]
    pub speedup: f64,
}

/// Non-finite floats as JSON `null`, read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl CostRatios {
    pub fn new(dense: &CostReport, dense_epochs: usize, sub: &CostReport, sub_epochs: usize) -> Self {
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { f64::NAN };
        let per = |x: f64, n: usize| if n > 0 { x / n as f64 } else { 0.0 };
        let wall = ratio(per(sub.wall_seconds, sub_epochs), per(dense.wall_seconds, dense_epochs));
        CostRatios {
            flops: ratio(sub.flops as f64, dense.flops as f64),
            params: ratio(sub.params as f64, dense.params as f64),
            memory: ratio(sub.memory_bytes as f64, dense.memory_bytes as f64),
            wall,
            co2: ratio(per(sub.co2_grams, sub_epochs), per(dense.co2_grams, dense_epochs)),
            speedup: 1.0 / wall,
        }
    }

    /// Percent reduction for a ratio.
    pub fn reduction_pct(ratio: f64) -> f64 {
        (1.0 - ratio) * 100.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub criterion: String,
    pub p: usize,
    pub rewind: Rewind,
    pub victims: Vec<BlockId>,
    pub train_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub train: TrainConfig,
    pub carbon: CarbonParams,
    pub flop_convention: String,
    /// Input pipeline, recorded so results are self-describing.
    pub recipe: String,
    /// Extra facts about the run (criterion metadata, filter counts, warnings).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicketReport {
    /// Test accuracy in percent.
    pub dense_acc: f64,
    pub sub_acc: f64,
    /// `sub_acc - dense_acc` in percentage points.
    pub delta_pp: f64,
    pub xi: f64,
    pub win: bool,
    pub dense_cost: CostReport,
    pub sub_cost: CostReport,
    pub ratios: CostRatios,
    pub provenance: Provenance,
}

impl TicketReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dense_acc: f64,
        sub_acc: f64,
        xi: f64,
        dense_cost: CostReport,
        dense_epochs: usize,
        sub_cost: CostReport,
        sub_epochs: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        Ok(TicketReport {
            dense_acc,
            sub_acc,
            delta_pp: sub_acc - dense_acc,
            xi,
            win: winning_ticket_test(sub_acc, dense_acc, xi)?,
            ratios: CostRatios::new(&dense_cost, dense_epochs, &sub_cost, sub_epochs),
            dense_cost,
            sub_cost,
            provenance,
        })
    }

    /// Whether `win` agrees with the verdict recomputed from the report.
    pub fn is_consistent(&self) -> bool {
        winning_ticket_test(self.sub_acc, self.dense_acc, self.xi).is_ok_and(|w| w == self.win)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub const MARKDOWN_HEADER: &'static str = "| criterion | p | rewind | dense acc (%) | sub acc (%) | delta (pp) | win (xi) | FLOPs red. (%) | params red. (%) | memory red. (%) | speedup | CO2 red. (%) |\n\
|---|---|---|---|---|---|---|---|---|---|---|---|";

    pub fn markdown_row(&self) -> String {
        let r = &self.ratios;
        format!(
            "| {} | {} | {} | {:.2} | {:.2} | {} | {} ({}) | {:.2} | {:.2} | {:.2} | {:.2}x | {:.2} |",
            self.provenance.criterion,
            self.provenance.p,
            self.provenance.rewind,
            self.dense_acc,
            self.sub_acc,
            signed_pp(self.delta_pp),
            if self.win { "yes" } else { "no" },
            self.xi,
            CostRatios::reduction_pct(r.flops),
            CostRatios::reduction_pct(r.params),
            CostRatios::reduction_pct(r.memory),
            r.speedup,
            CostRatios::reduction_pct(r.co2),
        )
    }
}

/// `(+)0.38` / `(-)1.00` formatting of a percentage-point delta.
pub fn signed_pp(delta: f64) -> String {
    if delta >= 0.0 {
        format!("(+){delta:.2}")
    } else {
        format!("(-){:.2}", -delta)
    }
}

/// Linear CKA between two representations of the same `n` examples. Inputs
/// are `(n, ...)` and flattened per example; columns are centered first.
/// Returns 0 with a warning when either side has zero variance.
pub fn cka_linear<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (n, xs) = centered(x)?;
    let (m, ys) = centered(y)?;
    if n != m {
        return Err(Error::Shape(format!("CKA inputs have {n} and {m} examples")));
    }
    if n < 2 {
        return Err(Error::arg("CKA needs at least two examples"));
    }
    let (d1, d2) = (xs.len() / n, ys.len() / n);
    let feature_cost = n * (d1 * d1 + d2 * d2 + d1 * d2);
    let gram_cost = n * n * (d1 + d2);
    let (num, den) = if feature_cost <= gram_cost {
        cka_terms_features(&xs, &ys, n)
    } else {
        cka_terms_gram(&xs, &ys, n)
    };
    if !(den > 0.0) || !num.is_finite() {
        log::warn!("CKA on zero-variance features; reporting 0");
        return Ok(0.0);
    }
    Ok((num / den).clamp(0.0, 1.0))
}

fn centered<T: Scalar>(t: &Tensor<T>) -> Result<(usize, Vec<f64>)> {
    let n = *t.shape().first().ok_or_else(|| Error::Shape("CKA input has no batch dimension".into()))?;
    if n == 0 {
        return Err(Error::arg("CKA needs at least two examples"));
    }
    let d = t.len() / n;
    let mut v: Vec<f64> = t.data().iter().map(|x| x.as_f64()).collect();
    for j in 0..d {
        let mean = (0..n).map(|i| v[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            v[i * d + j] -= mean;
        }
    }
    Ok((n, v))
}

/// `AᵀB` for row-major `(n, da)` and `(n, db)`.
fn at_b(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let (da, db) = (a.len() / n, b.len() / n);
    let mut out = vec![0.0; da * db];
    f64::gemm(da, n, db, 1.0, (a, 1, da as isize), (b, db as isize, 1), 0.0, (&mut out, db as isize, 1));
    out
}

/// `ABᵀ` for row-major `(n, d)` and `(n, d)`.
fn a_bt(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let d = a.len() / n;
    let mut out = vec![0.0; n * n];
    f64::gemm(n, d, n, 1.0, (a, d as isize, 1), (b, 1, d as isize), 0.0, (&mut out, n as isize, 1));
    out
}

fn frob_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// `‖YᵀX‖²` over `‖XᵀX‖·‖YᵀY‖`.
pub(crate) fn cka_terms_features(x: &[f64], y: &[f64], n: usize) -> (f64, f64) {
    let num = frob_sq(&at_b(y, x, n));
    let den = frob_sq(&at_b(x, x, n)).sqrt() * frob_sq(&at_b(y, y, n)).sqrt();
    (num, den)
}

/// The same quantity through the `n x n` Gram matrices `XXᵀ` and `YYᵀ`.
pub(crate) fn cka_terms_gram(x: &[f64], y: &[f64], n: usize) -> (f64, f64) {
    let k = a_bt(x, x, n);
    let l = a_bt(y, y, n);
    let num = k.iter().zip(&l).map(|(a, b)| a * b).sum();
    (num, frob_sq(&k).sqrt() * frob_sq(&l).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub dataset: String,
    pub dense_acc: f64,
    pub sub_acc: f64,
    /// Positive when the sub-network is more accurate.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| dataset | dense acc (%) | sub acc (%) | delta (pp) |\n|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!("| {} | {:.2} | {:.2} | {} |\n", r.dataset, r.dense_acc, r.sub_acc, signed_pp(r.delta_pp)));
        }
        s
    }
}

/// Accuracy of both networks on each evaluation set.
pub fn robustness_report(
    spec_dense: &NetworkSpec,
    params_dense: &ParamStore,
    spec_sub: &NetworkSpec,
    params_sub: &ParamStore,
    eval_sets: &[Dataset],
    norm: &Normalization,
) -> Result<RobustnessReport> {
    if spec_dense.num_classes != spec_sub.num_classes {
        return Err(Error::LabelSpace(format!(
            "dense network predicts {} classes, sub-network {}",
            spec_dense.num_classes, spec_sub.num_classes
        )));
    }
    let mut rows = Vec::with_capacity(eval_sets.len());
    for set in eval_sets {
        if set.num_classes() != spec_dense.num_classes {
            return Err(Error::LabelSpace(format!(
                "evaluation set {} has {} classes, networks predict {}",
                set.name,
                set.num_classes(),
                spec_dense.num_classes
            )));
        }
        let dense_acc = evaluate(spec_dense, params_dense, set, norm, 256)?;
        let sub_acc = evaluate(spec_sub, params_sub, set, norm, 256)?;
        rows.push(RobustnessRow {
            dataset: set.name.clone(),
            dense_acc,
            sub_acc,
            delta_pp: sub_acc - dense_acc,
        });
    }
    Ok(RobustnessReport { rows })
}
