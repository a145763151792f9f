//! Split transformer with a pooled device encoder, a multi-task cloud
//! decoder, a bit-exact wire format between them and a balancing trainer.
//!
//! The tensor core is a small tape-based reverse-mode engine, generic over
//! the scalar type so that the same forward code runs in `f32` for training
//! and in `f64` for finite-difference checks.

#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::should_implement_trait,
    clippy::type_complexity
)]

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod gradnorm;
pub mod model;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod simulate;
pub mod suite;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod wire;

pub use autodiff::{BackwardFault, PoolKind, Tape, Var};
pub use blocks::{layer_norm, position_wise_ffn, self_attention, transformer_layer, LayerShape};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{ConfigError, RunConfig};
pub use error::{CheckpointError, ModelError, TensorError, TrainError, WireError};
pub use gradnorm::{gradnorm_update, multitask_loss, GradNormConfig, GradNormState};
pub use model::{CloudDecoderConfig, DeviceEncoderConfig, ModelConfig, SplitModel, TaskHeadSpec, Token};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Bound, ParamId, ParamStore};
pub use pooling::{attention_flops, pool, pooled_attention_block, PoolingConfig};
pub use simulate::{simulate_split_inference, simulate_table, SimulationReport, SimulationRow};
pub use suite::{run_gradcheck_suite, GradcheckConfig, SuiteReport};
pub use tasks::{generate_batch, Batch, SyntheticTaskSpec, TaskKind};
pub use tensor::{Scalar, Tensor};
pub use trainer::{train, TrainConfig, TrainingReport};
pub use wire::{
    channel_transfer, communication_bytes, decode_message, encode_message, ChannelModel, CommunicationBytes,
    MessageHeader,
};
