//! Victim selection, structural block removal, the masked reference network
//! and the filter-pruning baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::criteria::{FilterConv, FilterId, FilterImportanceReport, ImportanceReport};
use crate::error::{Error, Result};
use crate::model::{removable_blocks, BlockId, NetworkSpec, Owner, ParamKey, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruningPlan {
    /// Victims from least to most important.
    pub victims: Vec<BlockId>,
    pub density_p: usize,
    pub criterion: String,
}

impl PruningPlan {
    pub fn new(victims: Vec<BlockId>, criterion: impl Into<String>) -> Self {
        PruningPlan {
            density_p: victims.len(),
            victims,
            criterion: criterion.into(),
        }
    }

    pub fn empty(criterion: impl Into<String>) -> Self {
        PruningPlan::new(Vec::new(), criterion)
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        if self.density_p != self.victims.len() {
            return Err(Error::arg(format!(
                "plan density {} does not match its {} victims",
                self.density_p,
                self.victims.len()
            )));
        }
        let removable: BTreeSet<BlockId> = removable_blocks(spec).into_iter().collect();
        let mut seen = BTreeSet::new();
        for &v in &self.victims {
            if spec.block(v).is_none() {
                return Err(Error::arg(format!("plan names block {v}, which the network does not contain")));
            }
            if !removable.contains(&v) {
                return Err(Error::NotRemovable(v));
            }
            if !seen.insert(v) {
                return Err(Error::arg(format!("block {v} listed twice in plan")));
            }
        }
        Ok(())
    }
}

/// The `p` lowest-scoring removable blocks; ties go to the lowest id.
pub fn select_victims(report: &ImportanceReport, p: usize, spec: &NetworkSpec) -> Result<PruningPlan> {
    let removable = removable_blocks(spec);
    if p > removable.len() {
        return Err(Error::DensityTooLarge {
            requested: p,
            max: removable.len(),
        });
    }
    let scored: Vec<BlockId> = report.scores.keys().copied().collect();
    if scored != removable {
        return Err(Error::arg(format!(
            "{} report scores {} blocks but the network has {} removable blocks",
            report.criterion,
            scored.len(),
            removable.len()
        )));
    }
    Ok(PruningPlan::new(report.ascending().into_iter().take(p).collect(), report.criterion.clone()))
}

/// Build the shallower network and copy every surviving tensor unchanged.
pub fn remove_layers<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, plan: &PruningPlan) -> Result<(NetworkSpec, ParamStore<T>)> {
    plan.validate(spec)?;
    params.check(spec)?;
    let sub = spec.without_blocks(&plan.victims)?;
    let sub_params = params.restricted_to(&sub)?;
    Ok((sub, sub_params))
}

/// Dense topology with each victim's conv weights and BN scale and shift set
/// to zero, so the victim's residual branch outputs exactly zero.
pub fn masked_equivalent<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, plan: &PruningPlan) -> Result<ParamStore<T>> {
    plan.validate(spec)?;
    let mut out = params.clone();
    for (key, t) in out.iter_mut() {
        if let Owner::Block(id) = key.owner {
            if key.is_trainable() && plan.victims.contains(&id) {
                t.fill(T::zero());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterCounting {
    /// Stem, both block convs, and projection shortcuts.
    WithProjections,
    WithoutProjections,
}

/// Output channels summed over the counted conv layers.
pub fn filter_count(spec: &NetworkSpec, counting: FilterCounting) -> usize {
    spec.stem.out_channels
        + spec
            .blocks()
            .flat_map(|b| b.convs())
            .filter(|(name, _, _)| counting == FilterCounting::WithProjections || *name != "shortcut.conv")
            .map(|(_, _, c)| c.out_channels)
            .sum::<usize>()
}

/// Kept-filter count of the layer-pruned network, projections included.
pub fn match_filter_sparsity(spec: &NetworkSpec, plan: &PruningPlan) -> Result<usize> {
    plan.validate(spec)?;
    Ok(filter_count(&spec.without_blocks(&plan.victims)?, FilterCounting::WithProjections))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterPruningPlan {
    pub removed: Vec<FilterId>,
    pub target_filter_count: usize,
    pub achieved_filter_count: usize,
}

/// Achievable kept-filter counts when only `conv1` filters are removed and
/// every conv keeps at least one filter.
pub fn filter_target_range(spec: &NetworkSpec) -> (usize, usize) {
    let dense = filter_count(spec, FilterCounting::WithProjections);
    let removable: usize = spec.blocks().map(|b| b.conv1.out_channels - 1).sum();
    (dense - removable, dense)
}

fn slice_rows<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let per = t.len() / t.shape()[0];
    let mut data = Vec::with_capacity(keep.len() * per);
    for &r in keep {
        data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    Tensor::from_vec(&shape, data)
}

/// Keep the listed input channels of an `(out, in, k, k)` conv weight.
fn slice_in_channels<T: Scalar>(t: &Tensor<T>, keep: &[usize]) -> Result<Tensor<T>> {
    let s = t.shape();
    let (out, cin, kk) = (s[0], s[1], s[2] * s[3]);
    let mut data = Vec::with_capacity(out * keep.len() * kk);
    for o in 0..out {
        for &c in keep {
            let base = (o * cin + c) * kk;
            data.extend_from_slice(&t.data()[base..base + kk]);
        }
    }
    Tensor::from_vec(&[out, keep.len(), s[2], s[3]], data)
}

/// Remove the lowest-scoring `conv1` filters until `target_kept` filters
/// remain, slicing the matching input channels of each block's `conv2`.
pub fn prune_filters<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    report: &FilterImportanceReport,
    target_kept: usize,
) -> Result<(NetworkSpec, ParamStore<T>, FilterPruningPlan)> {
    params.check(spec)?;
    let (min, max) = filter_target_range(spec);
    if target_kept < min || target_kept > max {
        return Err(Error::InfeasibleFilterTarget {
            target: target_kept,
            min_achievable: min,
            max_achievable: max,
        });
    }
    let mut candidates: Vec<(FilterId, f64)> = report
        .scores
        .iter()
        .filter(|s| s.id.conv == FilterConv::Conv1)
        .map(|s| (s.id, s.score))
        .collect();
    for (id, _) in &candidates {
        let ok = spec.block(id.block).is_some_and(|b| id.filter < b.conv1.out_channels);
        if !ok {
            return Err(Error::arg(format!("filter report names {id:?}, absent from the network")));
        }
    }
    candidates.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut kept: BTreeMap<BlockId, usize> = spec.blocks().map(|b| (b.block_id, b.conv1.out_channels)).collect();
    let mut removed = Vec::new();
    let need = max - target_kept;
    for (id, _) in candidates {
        if removed.len() == need {
            break;
        }
        let left = kept.get_mut(&id.block).expect("checked above");
        if *left > 1 {
            *left -= 1;
            removed.push(id);
        }
    }
    if removed.len() != need {
        return Err(Error::arg(format!(
            "filter report covers too few conv1 filters to remove {need}; only {} removable",
            removed.len()
        )));
    }

    let gone: BTreeSet<FilterId> = removed.iter().copied().collect();
    let mut sub = spec.clone();
    let mut sub_params = params.clone();
    for block in sub.stages.iter_mut().flatten() {
        let id = block.block_id;
        let keep: Vec<usize> = (0..block.conv1.out_channels)
            .filter(|&f| {
                !gone.contains(&FilterId {
                    block: id,
                    conv: FilterConv::Conv1,
                    filter: f,
                })
            })
            .collect();
        if keep.len() == block.conv1.out_channels {
            continue;
        }
        block.conv1.out_channels = keep.len();
        block.conv2.in_channels = keep.len();
        for name in ["conv1.weight", "bn1.scale", "bn1.shift", "bn1.running_mean", "bn1.running_var"] {
            let key = ParamKey::block(id, name);
            let sliced = slice_rows(params.get(&key)?, &keep)?;
            sub_params.insert(key, sliced);
        }
        let key = ParamKey::block(id, "conv2.weight");
        let sliced = slice_in_channels(params.get(&key)?, &keep)?;
        sub_params.insert(key, sliced);
    }
    sub.validate()?;
    sub_params.check(&sub)?;
    let achieved = filter_count(&sub, FilterCounting::WithProjections);
    debug_assert_eq!(achieved, target_kept);
    Ok((
        sub,
        sub_params,
        FilterPruningPlan {
            removed,
            target_filter_count: target_kept,
            achieved_filter_count: achieved,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{score_random, FilterScore, ScoreMetadata};
    use crate::model::{build_resnet, build_resnet_for_input, forward_eval};
    use crate::seed::{stream_rng, Stream};
    use rand::Rng;

    fn report(scores: &[(BlockId, f64)]) -> ImportanceReport {
        ImportanceReport {
            criterion: "test".into(),
            scores: scores.iter().copied().collect(),
            metadata: ScoreMetadata::default(),
        }
    }

    fn r14() -> NetworkSpec {
        // removable: 0.0, 0.1, 1.1, 2.1
        build_resnet(14, 10, 4).unwrap()
    }

    #[test]
    fn selects_lowest_with_id_tiebreak() {
        let spec = r14();
        let ids = removable_blocks(&spec);
        let r = report(&[(ids[0], 0.5), (ids[1], 0.1), (ids[2], 0.9), (ids[3], 0.7)]);
        assert_eq!(select_victims(&r, 1, &spec).unwrap().victims, vec![ids[1]]);
        let flat = report(&ids.iter().map(|&b| (b, 1.0)).collect::<Vec<_>>());
        assert_eq!(select_victims(&flat, 1, &spec).unwrap().victims, vec![ids[0]]);
        assert!(select_victims(&flat, 0, &spec).unwrap().victims.is_empty());
        let err = select_victims(&flat, 5, &spec).unwrap_err();
        assert!(matches!(err, Error::DensityTooLarge { requested: 5, max: 4 }));
    }

    #[test]
    fn non_removable_victim_rejected() {
        let spec = r14();
        let params = ParamStore::<f32>::init(&spec, 0);
        let plan = PruningPlan::new(vec![BlockId::new(1, 0)], "manual");
        assert!(matches!(remove_layers(&spec, &params, &plan), Err(Error::NotRemovable(_))));
    }

    #[test]
    fn removal_keeps_tensors_bitwise() {
        let spec = build_resnet(32, 10, 16).unwrap();
        let params = ParamStore::<f32>::init(&spec, 3);
        let plan = PruningPlan::new(vec![BlockId::new(1, 3)], "manual");
        let (sub, sub_params) = remove_layers(&spec, &params, &plan).unwrap();
        assert_eq!(sub.num_blocks(), 14);
        for (k, t) in sub_params.iter() {
            let src = params.get(k).unwrap();
            assert!(t.data().iter().zip(src.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(!sub_params.keys().any(|k| k.owner == Owner::Block(BlockId::new(1, 3))));
    }

    #[test]
    fn masked_matches_removed() {
        let spec = build_resnet_for_input(20, 10, 4, 8).unwrap();
        let params = ParamStore::<f32>::init(&spec, 1);
        let plan = select_victims(&score_random(&spec, 2), 3, &spec).unwrap();
        let masked = masked_equivalent(&spec, &params, &plan).unwrap();
        let (sub, sub_params) = remove_layers(&spec, &params, &plan).unwrap();
        let mut rng = stream_rng(0, Stream::Synthetic, 0);
        let x = Tensor::from_vec(&[5, 3, 8, 8], (0..5 * 192).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
        let a = forward_eval(&spec, &masked, &x).unwrap().logits;
        let b = forward_eval(&sub, &sub_params, &x).unwrap().logits;
        assert!(a.max_abs_diff(&b) <= 1e-5);
        assert!(masked_equivalent(&spec, &params, &PruningPlan::empty("none")).unwrap().bitwise_eq(&params));
    }

    #[test]
    fn filter_counts_of_resnet32() {
        let spec = build_resnet(32, 10, 16).unwrap();
        assert_eq!(filter_count(&spec, FilterCounting::WithProjections), 1232);
        assert_eq!(filter_count(&spec, FilterCounting::WithoutProjections), 1136);
        let one = PruningPlan::new(vec![BlockId::new(0, 2)], "m");
        let two = PruningPlan::new(vec![BlockId::new(0, 2), BlockId::new(0, 4)], "m");
        assert_eq!(match_filter_sparsity(&spec, &one).unwrap(), 1200);
        assert_eq!(match_filter_sparsity(&spec, &two).unwrap(), 1168);
        let wider = PruningPlan::new(vec![BlockId::new(1, 2)], "m");
        assert_eq!(match_filter_sparsity(&spec, &wider).unwrap(), 1232 - 64);
        assert_eq!(match_filter_sparsity(&spec, &PruningPlan::empty("m")).unwrap(), 1232);
    }

    fn filter_report(spec: &NetworkSpec, seed: u64) -> FilterImportanceReport {
        let mut rng = stream_rng(seed, Stream::RandomCriterion, 9);
        let scores = spec
            .blocks()
            .flat_map(|b| {
                let id = b.block_id;
                [(FilterConv::Conv1, b.conv1.out_channels), (FilterConv::Conv2, b.conv2.out_channels)]
                    .into_iter()
                    .flat_map(move |(conv, n)| (0..n).map(move |filter| FilterId { block: id, conv, filter }))
            })
            .map(|id| FilterScore { id, score: rng.random() })
            .collect();
        FilterImportanceReport {
            criterion: "random".into(),
            scores,
            metadata: ScoreMetadata::default(),
        }
    }

    #[test]
    fn filter_pruning_hits_target_and_keeps_shapes() {
        let spec = build_resnet_for_input(14, 10, 4, 8).unwrap();
        let params = ParamStore::<f32>::init(&spec, 0);
        let rep = filter_report(&spec, 1);
        let (min, max) = filter_target_range(&spec);
        let (same, same_params, plan) = prune_filters(&spec, &params, &rep, max).unwrap();
        assert!(plan.removed.is_empty());
        assert_eq!(same, spec);
        assert!(same_params.bitwise_eq(&params));
        for target in [max - 5, min + 3, min] {
            let (sub, _, plan) = prune_filters(&spec, &params, &rep, target).unwrap();
            assert_eq!(plan.achieved_filter_count, target);
            let a = spec.shape_plan().unwrap();
            let b = sub.shape_plan().unwrap();
            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                assert_eq!(x.2, y.2);
            }
            assert!(sub.blocks().all(|b| b.conv1.out_channels >= 1));
        }
        let err = prune_filters(&spec, &params, &rep, min - 1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleFilterTarget { min_achievable, .. } if min_achievable == min));
    }

    #[test]
    fn removing_dead_filters_preserves_output() {
        let spec = build_resnet_for_input(14, 10, 4, 8).unwrap();
        let mut params = ParamStore::<f32>::init(&spec, 4);
        let rep = filter_report(&spec, 2);
        let (_, max) = filter_target_range(&spec);
        let (_, _, plan) = prune_filters(&spec, &params, &rep, max - 6).unwrap();
        for id in &plan.removed {
            let w = params.get_mut(&ParamKey::block(id.block, "conv2.weight")).unwrap();
            let s = w.shape().to_vec();
            let kk = s[2] * s[3];
            for o in 0..s[0] {
                let base = (o * s[1] + id.filter) * kk;
                w.data_mut()[base..base + kk].fill(0.0);
            }
        }
        let (sub, sub_params, _) = prune_filters(&spec, &params, &rep, max - 6).unwrap();
        let mut rng = stream_rng(1, Stream::Synthetic, 0);
        let x = Tensor::from_vec(&[4, 3, 8, 8], (0..4 * 192).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
        let a = forward_eval(&spec, &params, &x).unwrap().logits;
        let b = forward_eval(&sub, &sub_params, &x).unwrap().logits;
        assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
    }
}
