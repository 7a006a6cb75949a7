//! Network description, parameters, and the forward/backward passes.

pub mod network;
pub mod params;
pub mod spec;

pub use network::{
    backward, backward_scaled, count_correct, forward, forward_eval, forward_pure, predict, ActivationTrace, Backward, Mode,
    RunningStatUpdates,
};
pub use params::{BnKeys, Owner, ParamKey, ParamStore};
pub use spec::{
    build_resnet, build_resnet_for_input, removable_blocks, BlockId, BlockSpec, ConvSpec, FeatureShape, NetworkSpec, ShapePlan,
    Shortcut, TensorShape,
};
