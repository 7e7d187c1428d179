//! Spiking substrate: LIF dynamics with an arctan surrogate gradient,
//! convolution and transposed-convolution layers, BPTT training, spike
//! accounting and checkpoints.

mod activity;
mod checkpoint;
mod conv;
mod lif;
mod optim;
mod real;
mod tensor;
mod train;

pub use activity::{spike_count, SpikeTally, SpikeTrace};
pub use checkpoint::{
    manifest_path, read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::{col2im, im2col, ConvLayer, ConvSpec, LayerGrads, LayerKind};
pub use lif::{
    lif_backward_step, lif_forward, lif_step, surrogate_forward, surrogate_grad, LifLayerState,
    LifParams, LifRecord, SpikeFn,
};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use real::Real;
pub use tensor::FeatureMap;
pub use train::{bptt_train, global_norm, LossCurve, TrainConfig, Trainable};
