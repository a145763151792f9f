//! Split model: a device encoder that compresses the hidden sequence and a
//! cloud decoder with one classification head per task.
//!
//! ```text
//! tokens ─ embed ─ pre-pool layers ─ [pooled block ─ post-pool layers] × k ─▶ h′  (device)
//! h′ ─ decoder layers ─ mean over positions ─ task head ─▶ logits              (cloud)
//! ```

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{
    transformer_layer, LayerShape, TransformerLayerParams, DEFAULT_FFN_RATIO, DEFAULT_LAYER_NORM_EPS,
};
use crate::error::ModelError;
use crate::params::{Bound, ParamId, ParamInit, ParamStore};
use crate::pooling::{iterated_pooled_len, pooled_attention_block, PooledBlockParams, PoolingConfig};
use crate::rng::seeded;
use crate::tensor::{Scalar, Tensor};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceEncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub width: usize,
    pub num_heads: usize,
    pub ffn_ratio: usize,
    pub layer_norm_eps: f64,
    pub pre_pool_layers: usize,
    pub pooling_stages: usize,
    /// Standard layers after each pooled block.
    pub post_pool_layers: usize,
    pub pooling: PoolingConfig,
}

impl Default for DeviceEncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_seq_len: 64,
            width: 32,
            num_heads: 4,
            ffn_ratio: DEFAULT_FFN_RATIO,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            pre_pool_layers: 2,
            pooling_stages: 2,
            post_pool_layers: 1,
            pooling: PoolingConfig::default(),
        }
    }
}

impl DeviceEncoderConfig {
    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            width: self.width,
            num_heads: self.num_heads,
            ffn_ratio: self.ffn_ratio,
            eps: self.layer_norm_eps,
        }
    }

    /// Length of the encoder output for an input of `len` tokens.
    pub fn output_len(&self, len: usize) -> usize {
        iterated_pooled_len(len, self.pooling_stages, &self.pooling)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("encoder.vocab_size", self.vocab_size),
            ("encoder.max_seq_len", self.max_seq_len),
            ("encoder.width", self.width),
            ("encoder.num_heads", self.num_heads),
            ("encoder.ffn_ratio", self.ffn_ratio),
            ("encoder.pooling.window", self.pooling.window),
            ("encoder.pooling.stride", self.pooling.stride),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(ModelError::config(field, "must be positive"));
            }
        }
        if !self.width.is_multiple_of(self.num_heads) {
            return Err(ModelError::config(
                "encoder.num_heads",
                format!(
                    "width {} is not divisible by {} heads",
                    self.width, self.num_heads
                ),
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(ModelError::config("encoder.layer_norm_eps", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskHeadSpec {
    pub id: String,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudDecoderConfig {
    pub num_layers: usize,
    /// Attributes task heads to the device side in parameter accounting.
    pub heads_on_device: bool,
    pub tasks: Vec<TaskHeadSpec>,
}

impl Default for CloudDecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            heads_on_device: false,
            tasks: vec![
                TaskHeadSpec {
                    id: "majority".into(),
                    num_classes: 8,
                },
                TaskHeadSpec {
                    id: "first_token".into(),
                    num_classes: 8,
                },
            ],
        }
    }
}

impl CloudDecoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.tasks.is_empty() {
            return Err(ModelError::config(
                "decoder.tasks",
                "at least one task head is required",
            ));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if t.num_classes < 2 {
                return Err(ModelError::config(
                    format!("decoder.tasks[{i}].num_classes"),
                    "must be at least 2",
                ));
            }
            if self.tasks[..i].iter().any(|o| o.id == t.id) {
                return Err(ModelError::config(
                    format!("decoder.tasks[{i}].id"),
                    format!("duplicate task id `{}`", t.id),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: DeviceEncoderConfig,
    pub decoder: CloudDecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.decoder.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolingStage {
    pub block: PooledBlockParams,
    pub post_layers: Vec<TransformerLayerParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub spec: TaskHeadSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter layout of the split model. Parameter values live in a
/// [`ParamStore`] so the same structure can be evaluated in `f32` or `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitLayout {
    pub token_table: ParamId,
    pub pos_table: ParamId,
    pub pre_layers: Vec<TransformerLayerParams>,
    pub stages: Vec<PoolingStage>,
    pub decoder_layers: Vec<TransformerLayerParams>,
    pub heads: Vec<TaskHead>,
}

#[derive(Debug, Clone)]
pub struct SplitModel {
    pub config: ModelConfig,
    pub layout: SplitLayout,
    pub params: ParamStore<f32>,
}

impl SplitModel {
    /// Builds a model with seeded initialization.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let enc = &config.encoder;
        let shape = enc.layer_shape();
        let mut params = ParamStore::new();
        let mut rng = seeded(init_seed);
        let mut init = ParamInit {
            store: &mut params,
            rng: &mut rng,
        };

        let token_table = init.matrix("embed.tokens", enc.vocab_size, enc.width);
        let pos_table = init.matrix("embed.positions", enc.max_seq_len, enc.width);
        let pre_layers = (0..enc.pre_pool_layers)
            .map(|i| TransformerLayerParams::init(&mut init, &format!("encoder.pre.{i}"), shape))
            .collect::<Result<Vec<_>, _>>()?;
        let mut stages = Vec::with_capacity(enc.pooling_stages);
        for s in 0..enc.pooling_stages {
            let block = PooledBlockParams::init(
                &mut init,
                &format!("encoder.stage.{s}.pooled"),
                shape,
                enc.pooling,
            )?;
            let post_layers = (0..enc.post_pool_layers)
                .map(|i| {
                    TransformerLayerParams::init(&mut init, &format!("encoder.stage.{s}.post.{i}"), shape)
                })
                .collect::<Result<Vec<_>, _>>()?;
            stages.push(PoolingStage { block, post_layers });
        }
        let decoder_layers = (0..config.decoder.num_layers)
            .map(|i| TransformerLayerParams::init(&mut init, &format!("decoder.{i}"), shape))
            .collect::<Result<Vec<_>, _>>()?;
        let heads = config
            .decoder
            .tasks
            .iter()
            .map(|spec| TaskHead {
                weight: init.matrix(format!("head.{}.weight", spec.id), enc.width, spec.num_classes),
                bias: init.zeros(format!("head.{}.bias", spec.id), spec.num_classes),
                spec: spec.clone(),
            })
            .collect();

        Ok(Self {
            config,
            layout: SplitLayout {
                token_table,
                pos_table,
                pre_layers,
                stages,
                decoder_layers,
                heads,
            },
            params,
        })
    }

    pub fn width(&self) -> usize {
        self.config.encoder.width
    }

    pub fn task_ids(&self) -> Vec<&str> {
        self.layout.heads.iter().map(|h| h.spec.id.as_str()).collect()
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead, ModelError> {
        self.layout
            .heads
            .iter()
            .find(|h| h.spec.id == task_id)
            .ok_or_else(|| ModelError::UnknownTask(task_id.to_string()))
    }

    /// Output projection of the attention in the last task-shared layer;
    /// the default subset for per-task gradient norms.
    pub fn last_shared_attention_output(&self) -> ParamId {
        let l = &self.layout;
        if let Some(layer) = l.decoder_layers.last() {
            return layer.attention.w_o;
        }
        if let Some(stage) = l.stages.last() {
            return stage
                .post_layers
                .last()
                .map_or(stage.block.attention.w_o, |p| p.attention.w_o);
        }
        l.pre_layers.last().map_or(l.pos_table, |p| p.attention.w_o)
    }

    /// Parameter IDs of the shared trunk (everything except task heads).
    pub fn trunk_params(&self) -> Vec<ParamId> {
        let head_ids: Vec<ParamId> = self
            .layout
            .heads
            .iter()
            .flat_map(|h| [h.weight, h.bias])
            .collect();
        self.params.ids().filter(|id| !head_ids.contains(id)).collect()
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<(), ModelError> {
        let enc = &self.config.encoder;
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > enc.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: enc.max_seq_len,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= enc.vocab_size)
        {
            return Err(ModelError::TokenOutOfRange {
                token: token as usize,
                position,
                vocab_size: enc.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding plus absolute position embedding.
    pub fn embed_on<'t, T: Scalar>(
        &self,
        w: &Bound<'t, T>,
        tokens: &[Token],
    ) -> Result<Var<'t, T>, ModelError> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = w[self.layout.token_table].gather_rows(&ids)?;
        let pos = w[self.layout.pos_table].gather_rows(&positions)?;
        Ok(tok.add(pos)?)
    }

    /// Encoder stack applied to an already embedded sequence.
    pub fn encode_hidden_on<'t, T: Scalar>(
        &self,
        w: &Bound<'t, T>,
        mut h: Var<'t, T>,
    ) -> Result<Var<'t, T>, ModelError> {
        for layer in &self.layout.pre_layers {
            h = transformer_layer(h, layer, w)?;
        }
        for stage in &self.layout.stages {
            h = pooled_attention_block(h, &stage.block, w)?;
            for layer in &stage.post_layers {
                h = transformer_layer(h, layer, w)?;
            }
        }
        Ok(h)
    }

    pub fn device_encode_on<'t, T: Scalar>(
        &self,
        w: &Bound<'t, T>,
        tokens: &[Token],
    ) -> Result<Var<'t, T>, ModelError> {
        let h = self.embed_on(w, tokens)?;
        self.encode_hidden_on(w, h)
    }

    /// Decoder layers, mean over positions, task head. Returns `[1 × C]`.
    pub fn cloud_decode_on<'t, T: Scalar>(
        &self,
        w: &Bound<'t, T>,
        mut h: Var<'t, T>,
        task_id: &str,
    ) -> Result<Var<'t, T>, ModelError> {
        let head = self.head(task_id)?;
        let shape = h.shape();
        if shape.len() != 2 || shape[1] != self.width() {
            return Err(crate::error::TensorError::Shape {
                op: "cloud_decode",
                lhs: shape,
                rhs: vec![self.width()],
            }
            .into());
        }
        for layer in &self.layout.decoder_layers {
            h = transformer_layer(h, layer, w)?;
        }
        let pooled = h.mean_rows()?;
        Ok(pooled.matmul(w[head.weight])?.add_row(w[head.bias])?)
    }

    pub fn embed(&self, tokens: &[Token]) -> Result<Tensor<f32>, ModelError> {
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        Ok(self.embed_on(&w, tokens)?.value())
    }

    /// Device half: tokens to compressed representation `[T′ × D]`.
    pub fn device_encode(&self, tokens: &[Token]) -> Result<Tensor<f32>, ModelError> {
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        Ok(self.device_encode_on(&w, tokens)?.value())
    }

    /// Cloud half: compressed representation to class logits.
    pub fn cloud_decode(&self, compressed: &Tensor<f32>, task_id: &str) -> Result<Vec<f32>, ModelError> {
        let tape = Tape::new();
        let w = self.params.bind(&tape, false);
        let h = tape.constant(compressed.clone());
        Ok(self.cloud_decode_on(&w, h, task_id)?.value().into_data())
    }

    /// Both halves in one process, no serialization.
    pub fn monolithic_forward(&self, tokens: &[Token], task_id: &str) -> Result<Vec<f32>, ModelError> {
        let h = self.device_encode(tokens)?;
        self.cloud_decode(&h, task_id)
    }

    /// Mean cross-entropy of one task over a batch of sequences.
    pub fn task_loss_on<'t, T: Scalar>(
        &self,
        w: &Bound<'t, T>,
        task_id: &str,
        sequences: &[Vec<Token>],
        labels: &[usize],
    ) -> Result<Var<'t, T>, ModelError> {
        if sequences.is_empty() || sequences.len() != labels.len() {
            return Err(ModelError::config(
                "batch",
                format!("{} sequences with {} labels", sequences.len(), labels.len()),
            ));
        }
        let mut total: Option<Var<'t, T>> = None;
        for (seq, &label) in sequences.iter().zip(labels) {
            let h = self.device_encode_on(w, seq)?;
            let logits = self.cloud_decode_on(w, h, task_id)?;
            let loss = logits.cross_entropy(&[label])?;
            total = Some(match total {
                Some(t) => t.add(loss)?,
                None => loss,
            });
        }
        let total = total.expect("non-empty batch");
        Ok(total.scale(T::one() / T::lit(sequences.len() as f64)))
    }

    /// Scalar parameter counts `(device, cloud)`.
    pub fn parameter_count(&self) -> (usize, usize) {
        let l = &self.layout;
        let p = &self.params;
        let mut device = p.get(l.token_table).len() + p.get(l.pos_table).len();
        device += l.pre_layers.iter().map(|x| x.num_scalars()).sum::<usize>();
        for stage in &l.stages {
            device += stage.block.num_scalars();
            device += stage.post_layers.iter().map(|x| x.num_scalars()).sum::<usize>();
        }
        let mut cloud: usize = l.decoder_layers.iter().map(|x| x.num_scalars()).sum();
        let heads: usize = l
            .heads
            .iter()
            .map(|h| p.get(h.weight).len() + p.get(h.bias).len())
            .sum();
        if self.config.decoder.heads_on_device {
            device += heads;
        } else {
            cloud += heads;
        }
        (device, cloud)
    }
}
