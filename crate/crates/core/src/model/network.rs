//! Forward and backward passes over a [`NetworkSpec`].
//!
//! Block layout: `conv -> BN -> ReLU -> conv -> BN`, plus the shortcut, then
//! ReLU. The backward pass is hand-derived per layer; the tape keeps only
//! what each layer's backward needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{BnKeys, Owner, ParamKey, ParamStore};
use crate::model::spec::{BlockId, ConvSpec, NetworkSpec, Shortcut};
use crate::ops::{self, BatchStats, BnCache, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
}

/// Activations recorded during one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T = f32> {
    pub stem: Tensor<T>,
    /// Output of each block after the shortcut addition and final ReLU.
    pub blocks: Vec<(BlockId, Tensor<T>)>,
    /// Globally pooled penultimate features, `(batch, channels)`.
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Batch statistics gathered by a train-mode pass, not yet folded into the
/// running estimates.
#[derive(Debug, Clone, Default)]
pub struct RunningStatUpdates<T = f32> {
    updates: Vec<(BnKeys, BatchStats<T>)>,
}

impl<T: Scalar> RunningStatUpdates<T> {
    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply(&self, params: &mut ParamStore<T>) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (keys, stats) in &self.updates {
            for (key, batch) in [(&keys.running_mean, &stats.mean), (&keys.running_var, &stats.var)] {
                let t = params.get_mut(key)?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + keep * b;
                }
            }
        }
        Ok(())
    }
}

/// Loss, accuracy count and gradients of one batch.
#[derive(Debug, Clone)]
pub struct Backward<T = f32> {
    pub loss: T,
    pub correct: usize,
    /// One entry per trainable tensor; running statistics are excluded.
    pub grads: ParamStore<T>,
    pub running: RunningStatUpdates<T>,
}

struct BlockTape<T> {
    id: BlockId,
    conv1: ConvSpec,
    conv2: ConvSpec,
    shortcut: Shortcut,
    input: Tensor<T>,
    bn1: BnCache<T>,
    hidden: Tensor<T>,
    bn2: BnCache<T>,
    shortcut_bn: Option<BnCache<T>>,
    output: Tensor<T>,
}

struct Tape<T> {
    input: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_out: Tensor<T>,
    blocks: Vec<BlockTape<T>>,
    pooled_shape: Vec<usize>,
}

struct Pass<T> {
    stem: Option<Tensor<T>>,
    blocks: Vec<(BlockId, Tensor<T>)>,
    features: Tensor<T>,
    logits: Tensor<T>,
    tape: Option<Tape<T>>,
    running: RunningStatUpdates<T>,
}

fn geometry(conv: &ConvSpec, x: &[usize]) -> ConvGeometry {
    ConvGeometry {
        in_channels: conv.in_channels,
        out_channels: conv.out_channels,
        kernel: conv.kernel,
        stride: conv.stride,
        padding: conv.padding,
        in_h: x[2],
        in_w: x[3],
    }
}

struct Ctx<'a, T> {
    params: &'a ParamStore<T>,
    mode: Mode,
    running: RunningStatUpdates<T>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv_bn(&mut self, x: &Tensor<T>, conv: &ConvSpec, owner: Owner, conv_name: &str, bn: &str) -> Result<(Tensor<T>, BnCache<T>)> {
        let w = self.params.get(&ParamKey::new(owner, format!("{conv_name}.weight")))?;
        let y = ops::conv2d_forward(&geometry(conv, x.shape()), x, w);
        let keys = BnKeys::new(owner, bn);
        let gamma = self.params.get(&keys.scale)?.data();
        let beta = self.params.get(&keys.shift)?.data();
        let eps = T::of(BN_EPS);
        Ok(match self.mode {
            Mode::Train => {
                let (out, cache, stats) = ops::batchnorm_forward_train(&y, gamma, beta, eps);
                self.running.updates.push((keys, stats));
                (out, cache)
            }
            Mode::Eval => {
                let mean = self.params.get(&keys.running_mean)?.data();
                let var = self.params.get(&keys.running_var)?.data();
                ops::batchnorm_forward_eval(&y, gamma, beta, mean, var, eps)
            }
        })
    }
}

/// Gradients of one conv + BN pair; returns the input gradient if requested.
#[allow(clippy::too_many_arguments)]
fn conv_bn_backward<T: Scalar>(
    params: &ParamStore<T>,
    grads: &mut ParamStore<T>,
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    x: &Tensor<T>,
    conv: &ConvSpec,
    owner: Owner,
    conv_name: &str,
    bn: &str,
    need_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let keys = BnKeys::new(owner, bn);
    let gamma = params.get(&keys.scale)?.data();
    let (dconv, dgamma, dbeta) = ops::batchnorm_backward(dy, cache, gamma);
    let wkey = ParamKey::new(owner, format!("{conv_name}.weight"));
    let (dx, dw) = ops::conv2d_backward(&geometry(conv, x.shape()), x, params.get(&wkey)?, &dconv, need_dx);
    let c = dgamma.len();
    grads.insert(wkey, dw);
    grads.insert(keys.scale, Tensor::from_vec(&[c], dgamma)?);
    grads.insert(keys.shift, Tensor::from_vec(&[c], dbeta)?);
    Ok(dx)
}

fn check_batch<T: Scalar>(spec: &NetworkSpec, batch: &Tensor<T>) -> Result<()> {
    let want = spec.input_feature_shape()?;
    match batch.shape() {
        &[n, c, h, w] if n >= 1 && c == want.channels && h == want.height && w == want.width => Ok(()),
        s => Err(Error::Shape(format!(
            "batch shape {s:?} does not match input (N, {}, {}, {})",
            want.channels, want.height, want.width
        ))),
    }
}

fn run<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, x: &Tensor<T>, mode: Mode, trace: bool, tape: bool) -> Result<Pass<T>> {
    check_batch(spec, x)?;
    params.check(spec)?;
    let mut ctx = Ctx {
        params,
        mode,
        running: RunningStatUpdates::default(),
    };
    let (mut cur, stem_bn) = ctx.conv_bn(x, &spec.stem, Owner::Stem, "conv", "bn")?;
    ops::relu_inplace(&mut cur);
    let stem = trace.then(|| cur.clone());
    let mut tape_blocks = Vec::new();
    let stem_out = tape.then(|| cur.clone());
    let mut blocks = Vec::new();
    for b in spec.blocks() {
        let owner = Owner::Block(b.block_id);
        let input = cur;
        let (mut hidden, bn1) = ctx.conv_bn(&input, &b.conv1, owner, "conv1", "bn1")?;
        ops::relu_inplace(&mut hidden);
        let (mut out, bn2) = ctx.conv_bn(&hidden, &b.conv2, owner, "conv2", "bn2")?;
        let shortcut_bn = match &b.shortcut {
            Shortcut::Identity => {
                ops::add_inplace(&mut out, &input);
                None
            }
            Shortcut::Projection(p) => {
                let (side, cache) = ctx.conv_bn(&input, p, owner, "shortcut.conv", "shortcut.bn")?;
                ops::add_inplace(&mut out, &side);
                Some(cache)
            }
        };
        ops::relu_inplace(&mut out);
        if trace {
            blocks.push((b.block_id, out.clone()));
        }
        if tape {
            tape_blocks.push(BlockTape {
                id: b.block_id,
                conv1: b.conv1,
                conv2: b.conv2,
                shortcut: b.shortcut,
                input,
                bn1,
                hidden,
                bn2,
                shortcut_bn,
                output: out.clone(),
            });
        }
        cur = out;
    }
    let features = ops::global_avg_pool(&cur);
    let logits = ops::linear_forward(
        &features,
        params.get(&ParamKey::head("fc.weight"))?,
        params.get(&ParamKey::head("fc.bias"))?.data(),
    );
    let tape = stem_out.map(|stem_out| Tape {
        input: x.clone(),
        stem_bn,
        stem_out,
        blocks: tape_blocks,
        pooled_shape: cur.shape().to_vec(),
    });
    Ok(Pass {
        stem,
        blocks,
        features,
        logits,
        tape,
        running: ctx.running,
    })
}

/// Pure forward pass. In train mode the running-statistic updates are
/// returned rather than applied.
pub fn forward_pure<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
) -> Result<(ActivationTrace<T>, RunningStatUpdates<T>)> {
    let pass = run(spec, params, batch, mode, true, false)?;
    Ok((
        ActivationTrace {
            stem: pass.stem.expect("traced"),
            blocks: pass.blocks,
            features: pass.features,
            logits: pass.logits,
        },
        pass.running,
    ))
}

/// Forward pass recording every block activation. Train mode folds the batch
/// statistics into the running estimates held in `params`.
pub fn forward<T: Scalar>(spec: &NetworkSpec, params: &mut ParamStore<T>, batch: &Tensor<T>, mode: Mode) -> Result<ActivationTrace<T>> {
    let (trace, running) = forward_pure(spec, params, batch, mode)?;
    running.apply(params)?;
    Ok(trace)
}

/// Eval-mode forward; safe to call concurrently on shared parameters.
pub fn forward_eval<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, batch: &Tensor<T>) -> Result<ActivationTrace<T>> {
    forward_pure(spec, params, batch, Mode::Eval).map(|(t, _)| t)
}

/// Eval-mode logits without recording intermediate activations.
pub fn predict<T: Scalar>(spec: &NetworkSpec, params: &ParamStore<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    run(spec, params, batch, Mode::Eval, false, false).map(|p| p.logits)
}

/// Mean cross-entropy gradients for every trainable tensor.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
) -> Result<Backward<T>> {
    backward_scaled(spec, params, batch, labels, mode, T::one())
}

/// [`backward`] for the loss multiplied by `scale`.
pub fn backward_scaled<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParamStore<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    mode: Mode,
    scale: T,
) -> Result<Backward<T>> {
    if labels.len() != batch.shape().first().copied().unwrap_or(0) {
        return Err(Error::Shape(format!("{} labels for batch shape {:?}", labels.len(), batch.shape())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelSpace(format!("label {bad} outside 0..{}", spec.num_classes)));
    }
    let pass = run(spec, params, batch, mode, false, true)?;
    let tape = pass.tape.expect("tape requested");
    let ce = ops::softmax_cross_entropy(&pass.logits, labels, scale)?;

    let mut grads = ParamStore::new();
    let fc_w = ParamKey::head("fc.weight");
    let (dfeat, dw, db) = ops::linear_backward(&pass.features, params.get(&fc_w)?, &ce.dlogits);
    let classes = db.len();
    grads.insert(fc_w, dw);
    grads.insert(ParamKey::head("fc.bias"), Tensor::from_vec(&[classes], db)?);
    let mut dcur = ops::global_avg_pool_backward(&dfeat, &tape.pooled_shape);

    for bt in tape.blocks.into_iter().rev() {
        let owner = Owner::Block(bt.id);
        ops::relu_backward_inplace(&mut dcur, &bt.output);
        let mut dinput = match (&bt.shortcut, &bt.shortcut_bn) {
            (Shortcut::Identity, _) => dcur.clone(),
            (Shortcut::Projection(p), Some(cache)) => {
                conv_bn_backward(params, &mut grads, &dcur, cache, &bt.input, p, owner, "shortcut.conv", "shortcut.bn", true)?
                    .expect("dx requested")
            }
            (Shortcut::Projection(_), None) => unreachable!("projection without cache"),
        };
        let mut dhidden = conv_bn_backward(params, &mut grads, &dcur, &bt.bn2, &bt.hidden, &bt.conv2, owner, "conv2", "bn2", true)?
            .expect("dx requested");
        ops::relu_backward_inplace(&mut dhidden, &bt.hidden);
        let dmain = conv_bn_backward(params, &mut grads, &dhidden, &bt.bn1, &bt.input, &bt.conv1, owner, "conv1", "bn1", true)?
            .expect("dx requested");
        ops::add_inplace(&mut dinput, &dmain);
        dcur = dinput;
    }
    ops::relu_backward_inplace(&mut dcur, &tape.stem_out);
    conv_bn_backward(params, &mut grads, &dcur, &tape.stem_bn, &tape.input, &spec.stem, Owner::Stem, "conv", "bn", false)?;

    if let Some((key, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFiniteGradient { key: key.to_string() });
    }
    Ok(Backward {
        loss: ce.loss,
        correct: ce.correct,
        grads,
        running: pass.running,
    })
}

/// Number of argmax hits for `labels` in a logits batch.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            best == label
        })
        .count()
}
