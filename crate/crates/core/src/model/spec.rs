use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::params::{BnKeys, Owner, ParamKey};

/// Residual block identifier: `(stage, position within the stage)`.
///
/// Ids are labels, not indices: a pruned network keeps the ids of the blocks
/// it inherited, so the same block is addressed identically before and after
/// removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockId {
    pub stage: usize,
    pub position: usize,
}

impl BlockId {
    pub const fn new(stage: usize, position: usize) -> Self {
        BlockId { stage, position }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.stage, self.position)
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::arg(format!("block id `{s}` is not of the form stage.position"));
        let (a, b) = s.split_once('.').ok_or_else(bad)?;
        Ok(BlockId {
            stage: a.parse().map_err(|_| bad())?,
            position: b.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for BlockId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered positive dimensions. Activations use NCHW; the batch entry of a
/// network's `input_shape` is a placeholder of 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TensorShape(Vec<usize>);

impl TensorShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "tensor dims must be non-empty and positive, got {dims:?}"
            )));
        }
        Ok(TensorShape(dims))
    }

    pub fn activation(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(vec![n, c, h, w])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
}

impl TryFrom<Vec<usize>> for TensorShape {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        TensorShape::new(v)
    }
}

impl From<TensorShape> for Vec<usize> {
    fn from(s: TensorShape) -> Self {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    /// `floor((in + 2p - k) / s) + 1`, or `None` when the window does not fit.
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.kernel && self.stride > 0).then(|| (padded - self.kernel) / self.stride + 1)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 {
            return Err(Error::InvalidSpec(format!("{what}: channels and kernel must be positive")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::InvalidSpec(format!("{what}: stride must be 1 or 2, got {}", self.stride)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "conv")]
pub enum Shortcut {
    Identity,
    Projection(ConvSpec),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub block_id: BlockId,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub shortcut: Shortcut,
    pub has_downsample: bool,
}

/// Activation extent without the batch dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl BlockSpec {
    /// Shape after this block, or a description of the first incompatibility.
    pub fn propagate(&self, input: FeatureShape) -> Result<FeatureShape> {
        let id = self.block_id;
        self.conv1.validate(&format!("block {id} conv1"))?;
        self.conv2.validate(&format!("block {id} conv2"))?;
        let mid = conv_out(&self.conv1, input, &format!("block {id} conv1"))?;
        let out = conv_out(&self.conv2, mid, &format!("block {id} conv2"))?;
        match self.shortcut {
            Shortcut::Identity => {
                if self.has_downsample {
                    return Err(Error::InvalidSpec(format!(
                        "block {id}: downsampling block needs a projection shortcut"
                    )));
                }
                if out != input {
                    return Err(Error::InvalidSpec(format!(
                        "block {id}: identity shortcut carries {input:?} but the main path yields {out:?}"
                    )));
                }
            }
            Shortcut::Projection(p) => {
                if !self.has_downsample {
                    return Err(Error::InvalidSpec(format!(
                        "block {id}: projection shortcut only allowed on downsampling blocks"
                    )));
                }
                p.validate(&format!("block {id} shortcut"))?;
                let side = conv_out(&p, input, &format!("block {id} shortcut"))?;
                if side != out {
                    return Err(Error::InvalidSpec(format!(
                        "block {id}: projection yields {side:?} but the main path yields {out:?}"
                    )));
                }
            }
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.shortcut, Shortcut::Identity)
    }

    /// Conv layers owned by the block, with the parameter prefix of each.
    pub fn convs(&self) -> Vec<(&'static str, &'static str, ConvSpec)> {
        let mut v = vec![("conv1", "bn1", self.conv1), ("conv2", "bn2", self.conv2)];
        if let Shortcut::Projection(p) = self.shortcut {
            v.push(("shortcut.conv", "shortcut.bn", p));
        }
        v
    }
}

fn conv_out(conv: &ConvSpec, input: FeatureShape, what: &str) -> Result<FeatureShape> {
    if conv.in_channels != input.channels {
        return Err(Error::InvalidSpec(format!(
            "{what}: expects {} input channels, receives {}",
            conv.in_channels, input.channels
        )));
    }
    let h = conv.out_size(input.height);
    let w = conv.out_size(input.width);
    match (h, w) {
        (Some(height), Some(width)) => Ok(FeatureShape {
            channels: conv.out_channels,
            height,
            width,
        }),
        _ => Err(Error::InvalidSpec(format!(
            "{what}: kernel {} does not fit a {}x{} input",
            conv.kernel, input.height, input.width
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub stem: ConvSpec,
    pub stages: Vec<Vec<BlockSpec>>,
    pub num_classes: usize,
    pub input_shape: TensorShape,
}

/// Statically inferred activation shapes of a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapePlan {
    pub input: FeatureShape,
    pub stem: FeatureShape,
    pub blocks: Vec<(BlockId, FeatureShape, FeatureShape)>,
    pub features: usize,
    pub classes: usize,
}

impl NetworkSpec {
    pub fn new(stem: ConvSpec, stages: Vec<Vec<BlockSpec>>, num_classes: usize, input_shape: TensorShape) -> Result<Self> {
        let spec = NetworkSpec {
            stem,
            stages,
            num_classes,
            input_shape,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_feature_shape(&self) -> Result<FeatureShape> {
        match self.input_shape.dims() {
            &[_, channels, height, width] => Ok(FeatureShape { channels, height, width }),
            d => Err(Error::InvalidSpec(format!("input shape must have 4 dims, got {d:?}"))),
        }
    }

    /// Runs static shape inference, returning the plan or the first violation.
    pub fn shape_plan(&self) -> Result<ShapePlan> {
        let input = self.input_feature_shape()?;
        self.stem.validate("stem")?;
        let stem = conv_out(&self.stem, input, "stem")?;
        let mut cur = stem;
        let mut blocks = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (i, b) in stage.iter().enumerate() {
                if b.block_id.stage != s {
                    return Err(Error::InvalidSpec(format!("block {} listed under stage {s}", b.block_id)));
                }
                if !seen.insert(b.block_id) {
                    return Err(Error::InvalidSpec(format!("duplicate block id {}", b.block_id)));
                }
                if i > 0 && b.block_id.position <= stage[i - 1].block_id.position {
                    return Err(Error::InvalidSpec(format!("block ids of stage {s} are not increasing")));
                }
                if s > 0 && i == 0 && !b.has_downsample {
                    return Err(Error::InvalidSpec(format!(
                        "first block {} of stage {s} must downsample",
                        b.block_id
                    )));
                }
                let out = b.propagate(cur)?;
                blocks.push((b.block_id, cur, out));
                cur = out;
            }
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidSpec("num_classes must be positive".into()));
        }
        Ok(ShapePlan {
            input,
            stem,
            blocks,
            features: cur.channels,
            classes: self.num_classes,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.shape_plan().map(|_| ())
    }

    pub fn blocks(&self) -> impl Iterator<Item = &BlockSpec> {
        self.stages.iter().flatten()
    }

    pub fn num_blocks(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockSpec> {
        self.stages.get(id.stage)?.iter().find(|b| b.block_id == id)
    }

    /// Copy of the topology without the given blocks. The result is validated.
    pub fn without_blocks(&self, victims: &[BlockId]) -> Result<NetworkSpec> {
        let mut spec = self.clone();
        for stage in &mut spec.stages {
            stage.retain(|b| !victims.contains(&b.block_id));
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Every tensor the parameter store must hold, with its shape.
    pub fn param_shapes(&self) -> BTreeMap<ParamKey, Vec<usize>> {
        let mut out = BTreeMap::new();
        let mut add_conv_bn = |owner: Owner, conv: &str, bn: &str, spec: &ConvSpec| {
            out.insert(ParamKey::new(owner, format!("{conv}.weight")), spec.weight_shape().to_vec());
            for key in BnKeys::new(owner, bn).all() {
                out.insert(key, vec![spec.out_channels]);
            }
        };
        add_conv_bn(Owner::Stem, "conv", "bn", &self.stem);
        for b in self.blocks() {
            for (conv, bn, spec) in b.convs() {
                add_conv_bn(Owner::Block(b.block_id), conv, bn, &spec);
            }
        }
        let features = self
            .blocks()
            .last()
            .map(|b| b.conv2.out_channels)
            .unwrap_or(self.stem.out_channels);
        out.insert(ParamKey::head("fc.weight"), vec![self.num_classes, features]);
        out.insert(ParamKey::head("fc.bias"), vec![self.num_classes]);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// CIFAR-style ResNet: a 3x3 stem and three stages of `(depth - 2) / 6`
/// basic blocks with widths `w, 2w, 4w`; the first block of stages two and
/// three halves the resolution through a 1x1 stride-2 projection.
pub fn build_resnet(depth: usize, num_classes: usize, base_width: usize) -> Result<NetworkSpec> {
    build_resnet_for_input(depth, num_classes, base_width, 32)
}

/// [`build_resnet`] for square `3 x size x size` inputs.
pub fn build_resnet_for_input(depth: usize, num_classes: usize, base_width: usize, size: usize) -> Result<NetworkSpec> {
    if depth < 8 || !(depth - 2).is_multiple_of(6) {
        return Err(Error::InvalidDepth { depth });
    }
    if base_width == 0 {
        return Err(Error::InvalidSpec("base_width must be at least 1".into()));
    }
    let per_stage = (depth - 2) / 6;
    let stem = ConvSpec::new(3, base_width, 3, 1, 1);
    let mut stages = Vec::with_capacity(3);
    let mut in_ch = base_width;
    for s in 0..3 {
        let width = base_width << s;
        let stage = (0..per_stage)
            .map(|pos| {
                let downsample = s > 0 && pos == 0;
                let stride = if downsample { 2 } else { 1 };
                let block_in = if pos == 0 { in_ch } else { width };
                BlockSpec {
                    block_id: BlockId::new(s, pos),
                    conv1: ConvSpec::new(block_in, width, 3, stride, 1),
                    conv2: ConvSpec::new(width, width, 3, 1, 1),
                    shortcut: if downsample {
                        Shortcut::Projection(ConvSpec::new(block_in, width, 1, stride, 0))
                    } else {
                        Shortcut::Identity
                    },
                    has_downsample: downsample,
                }
            })
            .collect();
        stages.push(stage);
        in_ch = width;
    }
    NetworkSpec::new(stem, stages, num_classes, TensorShape::activation(1, 3, size, size)?)
}

/// Blocks whose removal leaves every remaining tensor shape-compatible.
///
/// A block can be dropped exactly when its shortcut is an identity mapping:
/// the block then maps a shape onto itself, so its predecessor's output
/// already fits its successor. Downsampling blocks change the shape and are
/// never removable.
pub fn removable_blocks(spec: &NetworkSpec) -> Vec<BlockId> {
    spec.blocks()
        .filter(|b| b.is_identity() && !b.has_downsample)
        .map(|b| b.block_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet_depths() {
        let r32 = build_resnet(32, 10, 16).unwrap();
        assert_eq!(r32.num_blocks(), 15);
        assert_eq!(r32.blocks().count() * 2, 30);
        let r56 = build_resnet(56, 10, 16).unwrap();
        assert_eq!(r56.stages.iter().map(Vec::len).collect::<Vec<_>>(), vec![9, 9, 9]);
        let r8 = build_resnet(8, 10, 16).unwrap();
        assert_eq!(r8.num_blocks(), 3);
        let widths: Vec<_> = r32.stages.iter().map(|s| s[0].conv2.out_channels).collect();
        assert_eq!(widths, vec![16, 32, 64]);
        for s in 1..3 {
            assert!(r32.stages[s][0].has_downsample);
            assert!(matches!(r32.stages[s][0].shortcut, Shortcut::Projection(_)));
        }
    }

    #[test]
    fn invalid_depth_explains_rule() {
        for depth in [0, 6, 7, 9, 31] {
            let err = build_resnet(depth, 10, 16).unwrap_err();
            assert!(matches!(err, Error::InvalidDepth { .. }));
            assert!(err.to_string().contains("(depth - 2) must be divisible by 6"));
        }
        assert!(build_resnet(8, 10, 0).is_err());
    }

    #[test]
    fn shape_plan_resolutions() {
        let plan = build_resnet(20, 10, 16).unwrap().shape_plan().unwrap();
        let last = plan.blocks.last().unwrap().2;
        assert_eq!(last, FeatureShape { channels: 64, height: 8, width: 8 });
        assert_eq!(plan.features, 64);
    }

    #[test]
    fn json_round_trip() {
        let spec = build_resnet(14, 10, 4).unwrap();
        let back = NetworkSpec::from_json(&spec.to_json().unwrap()).unwrap();
        assert_eq!(spec, back);
        assert!(spec.to_json().unwrap().contains("\"block_id\": \"1.0\""));
    }

    #[test]
    fn conv_out_size_formula() {
        let c = ConvSpec::new(1, 1, 3, 2, 1);
        assert_eq!(c.out_size(32), Some(16));
        assert_eq!(c.out_size(1), Some(1));
        assert_eq!(ConvSpec::new(1, 1, 5, 1, 0).out_size(3), None);
    }

    #[test]
    fn removable_excludes_downsampling_blocks() {
        let r32 = build_resnet(32, 10, 16).unwrap();
        let rem = removable_blocks(&r32);
        assert_eq!(rem.len(), 13);
        assert!(!rem.contains(&BlockId::new(1, 0)));
        assert!(!rem.contains(&BlockId::new(2, 0)));
        assert_eq!(removable_blocks(&build_resnet(8, 10, 16).unwrap()), vec![BlockId::new(0, 0)]);
    }

    #[test]
    fn block_id_parse() {
        assert_eq!("2.7".parse::<BlockId>().unwrap(), BlockId::new(2, 7));
        assert!("27".parse::<BlockId>().is_err());
        assert!(BlockId::new(0, 1) < BlockId::new(1, 0));
    }
}
