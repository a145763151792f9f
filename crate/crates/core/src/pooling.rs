//! Sequence-length reduction by pooling and the pooled self-attention block.
//!
//! The pooled block first shortens the hidden sequence `h` to `h′`, then runs
//! attention with Q, K and V all taken from `h′` and the residual taken from
//! `h′`:
//!
//! ```text
//! h′ ← Pool(h)
//! h  ← LayerNorm(h′ + S-Attn(Q, K, V = h′))
//! h_i ← LayerNorm(h_i + P-FFN(h_i))
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{pooled_len, PoolKind, Var};
use crate::blocks::{attention_update, ffn_update, AttentionParams, FfnParams, LayerNormParams, LayerShape};
use crate::error::TensorError;
use crate::params::{Bound, ParamInit};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolingConfig {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            kind: PoolKind::Mean,
            window: 2,
            stride: 2,
        }
    }
}

impl PoolingConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.window == 0 || self.stride == 0 {
            return Err(TensorError::Config {
                op: "pool",
                reason: format!(
                    "window ({}) and stride ({}) must be positive",
                    self.window, self.stride
                ),
            });
        }
        Ok(())
    }

    /// Output length `ceil(T / stride)`.
    pub fn output_len(&self, len: usize) -> usize {
        pooled_len(len, self.stride)
    }

    /// Length after `stages` successive poolings.
    pub fn output_len_iter(&self, len: usize, stages: usize) -> usize {
        (0..stages).fold(len, |t, _| self.output_len(t))
    }
}

/// Length after `stages` successive poolings.
pub fn iterated_pooled_len(len: usize, stages: usize, config: &PoolingConfig) -> usize {
    config.output_len_iter(len, stages)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PooledBlockParams {
    pub pooling: PoolingConfig,
    pub attention: AttentionParams,
    pub ffn: FfnParams,
    pub norm_1: LayerNormParams,
    pub norm_2: LayerNormParams,
}

impl PooledBlockParams {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        prefix: &str,
        shape: LayerShape,
        pooling: PoolingConfig,
    ) -> Result<Self, TensorError> {
        pooling.validate()?;
        Ok(Self {
            pooling,
            attention: AttentionParams::init(init, &format!("{prefix}.attn"), shape.width, shape.num_heads)?,
            ffn: FfnParams::init(init, &format!("{prefix}.ffn"), shape.width, shape.ffn_ratio)?,
            norm_1: LayerNormParams::init(init, &format!("{prefix}.norm_1"), shape.width, shape.eps),
            norm_2: LayerNormParams::init(init, &format!("{prefix}.norm_2"), shape.width, shape.eps),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.attention.num_scalars()
            + self.ffn.num_scalars()
            + self.norm_1.num_scalars()
            + self.norm_2.num_scalars()
    }
}

/// Pools `h` along the sequence dimension.
pub fn pool<'t, T: Scalar>(h: Var<'t, T>, config: &PoolingConfig) -> Result<Var<'t, T>, TensorError> {
    h.pool_rows(config.kind, config.window, config.stride)
}

pub fn pooled_attention_block<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &PooledBlockParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let pooled = pool(h, &p.pooling)?;
    let h = attention_update(pooled, &p.attention, &p.norm_1, w)?;
    ffn_update(h, &p.ffn, &p.norm_2, w)
}

/// Floating point operations of one self-attention sub-module over a
/// `len × width` sequence: `8·T·D²` for the four projections plus `4·T²·D`
/// for the logits and the weighted sum (a multiply-add counts as two).
pub fn attention_flops(len: u64, width: u64) -> u64 {
    8 * len * width * width + 4 * len * len * width
}
