//! Finite-difference gradient suite over every differentiable block.
//!
//! Each case is evaluated twice: analytically with 32-bit reverse mode, and
//! numerically with 64-bit central differences over the same computation.
//! Non-scalar outputs are reduced with a fixed pseudo-random weighting
//! `Σ out ∘ R` so that no gradient vanishes by symmetry.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::{BackwardFault, PoolKind, Tape, Var};
use crate::blocks::{
    layer_norm, position_wise_ffn, self_attention, transformer_layer, AttentionParams, FfnParams,
    LayerNormParams, LayerShape, TransformerLayerParams, DEFAULT_LAYER_NORM_EPS,
};
use crate::error::ModelError;
use crate::gradcheck::{finite_difference_gradient, relative_error};
use crate::model::{CloudDecoderConfig, DeviceEncoderConfig, ModelConfig, SplitModel, TaskHeadSpec, Token};
use crate::params::{Bound, ParamInit, ParamStore};
use crate::pooling::{pool, pooled_attention_block, PooledBlockParams, PoolingConfig};
use crate::rng::{seeded, sub_seed};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seq_len: usize,
    pub width: usize,
    pub num_heads: usize,
    pub ffn_ratio: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seq_len: 8,
            width: 8,
            num_heads: 2,
            ffn_ratio: 4,
            epsilon: 1e-5,
            tolerance: 1e-3,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.seq_len == 0 || self.seq_len > 8 {
            return Err(ModelError::config("gradcheck.seq_len", "must be in 1..=8"));
        }
        if self.width == 0 || self.width > 16 {
            return Err(ModelError::config("gradcheck.width", "must be in 1..=16"));
        }
        if self.num_heads == 0 || !self.width.is_multiple_of(self.num_heads) {
            return Err(ModelError::config(
                "gradcheck.num_heads",
                "must divide gradcheck.width",
            ));
        }
        if self.ffn_ratio == 0 {
            return Err(ModelError::config("gradcheck.ffn_ratio", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(ModelError::config("gradcheck.epsilon", "must be > 0"));
        }
        if !(self.tolerance > 0.0) {
            return Err(ModelError::config("gradcheck.tolerance", "must be > 0"));
        }
        Ok(())
    }

    fn shape(&self) -> LayerShape {
        LayerShape {
            width: self.width,
            num_heads: self.num_heads,
            ffn_ratio: self.ffn_ratio,
            eps: DEFAULT_LAYER_NORM_EPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub group: &'static str,
    pub name: String,
    /// Worst relative error per input, by input name.
    pub inputs: Vec<(String, f64)>,
    pub worst: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tolerance: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.worst).fold(0.0, f64::max)
    }

    /// Worst error per group, in first-seen order.
    pub fn worst_by_group(&self) -> Vec<(&'static str, f64)> {
        let mut out: Vec<(&'static str, f64)> = Vec::new();
        for c in &self.cases {
            match out.iter_mut().find(|(g, _)| *g == c.group) {
                Some((_, w)) => *w = w.max(c.worst),
                None => out.push((c.group, c.worst)),
            }
        }
        out
    }

    pub fn case(&self, name: &str) -> Option<&CaseReport> {
        self.cases.iter().find(|c| c.name == name)
    }
}

/// The computation under test. `vars` are leaves in input order.
enum Case {
    MatMul,
    Transpose,
    AddRow,
    MulRow,
    Mul,
    Softmax,
    Gelu,
    MeanRows,
    LayerNormOp,
    Pool,
    SliceConcat,
    Gather(Vec<usize>),
    CrossEntropy(Vec<usize>),
    LayerNorm(LayerNormParams),
    Attention(AttentionParams),
    Ffn(FfnParams),
    Layer(TransformerLayerParams),
    PoolOnly(PoolingConfig),
    PooledBlock(PooledBlockParams),
    Split {
        model: Box<SplitModel>,
        sequences: Vec<Vec<Token>>,
        labels: Vec<usize>,
    },
}

fn probe_weights<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let seed = 0x5eed ^ (n as u64);
    Tensor::<f64>::uniform(shape, 1.0, &mut seeded(seed)).cast()
}

impl Case {
    fn eval<'t, T: Scalar>(&self, vars: &[Var<'t, T>]) -> Result<Var<'t, T>, ModelError> {
        let tape = vars[0].tape();
        let bound = || Bound::from_vars(vars[1..].to_vec());
        let out = match self {
            Case::MatMul => vars[0].matmul(vars[1])?,
            Case::Transpose => vars[0].transpose()?,
            Case::AddRow => vars[0].add_row(vars[1])?,
            Case::MulRow => vars[0].mul_row(vars[1])?,
            Case::Mul => vars[0].mul(vars[1])?,
            Case::Softmax => vars[0].softmax_rows()?,
            Case::Gelu => vars[0].gelu(),
            Case::MeanRows => vars[0].mean_rows()?,
            Case::LayerNormOp => vars[0].layer_norm(vars[1], vars[2], T::lit(DEFAULT_LAYER_NORM_EPS))?,
            Case::Pool => vars[0].pool_rows(PoolKind::Mean, 2, 2)?,
            Case::SliceConcat => {
                let a = vars[0].slice_cols(0, 3)?;
                let b = vars[0].slice_cols(3, 2)?;
                Var::concat_cols(&[b.gelu(), a])?
            }
            Case::Gather(ids) => vars[0].gather_rows(ids)?,
            Case::CrossEntropy(labels) => return Ok(vars[0].cross_entropy(labels)?),
            Case::LayerNorm(p) => layer_norm(vars[0], p, &bound())?,
            Case::Attention(p) => self_attention(vars[0], p, &bound())?,
            Case::Ffn(p) => position_wise_ffn(vars[0], p, &bound())?,
            Case::Layer(p) => transformer_layer(vars[0], p, &bound())?,
            Case::PoolOnly(c) => pool(vars[0], c)?,
            Case::PooledBlock(p) => pooled_attention_block(vars[0], p, &bound())?,
            Case::Split {
                model,
                sequences,
                labels,
            } => {
                let w = Bound::from_vars(vars.to_vec());
                let ids = model.task_ids();
                let mut total: Option<Var<'t, T>> = None;
                for (i, id) in ids.iter().enumerate() {
                    let l = model.task_loss_on(&w, id, sequences, labels)?;
                    let l = l.scale(T::lit(1.0 / (i + 1) as f64));
                    total = Some(match total {
                        Some(t) => t.add(l)?,
                        None => l,
                    });
                }
                return Ok(total.expect("at least one task"));
            }
        };
        let r = tape.constant(probe_weights(&out.shape()));
        Ok(out.mul(r)?.sum())
    }
}

fn check_case(
    group: &'static str,
    name: impl Into<String>,
    case: &Case,
    inputs: &[(String, Tensor<f32>)],
    cfg: &GradcheckConfig,
    fault: Option<BackwardFault>,
) -> Result<CaseReport, ModelError> {
    let tape = Tape::<f32>::with_fault(fault);
    let vars: Vec<_> = inputs.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let loss = case.eval(&vars)?;
    tape.backward(loss)?;

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.cast()).collect();
    let mut results = Vec::with_capacity(inputs.len());
    for (i, (input_name, _)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = tape
            .grad_or_zeros(vars[i])
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let mut failure = None;
        let numeric = finite_difference_gradient(
            |x| {
                let t64 = Tape::<f64>::new();
                let vs: Vec<_> = base
                    .iter()
                    .enumerate()
                    .map(|(j, b)| t64.leaf(if j == i { x.clone() } else { b.clone() }))
                    .collect();
                match case.eval(&vs) {
                    Ok(v) => v.value().item(),
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &base[i],
            cfg.epsilon,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        results.push((input_name.clone(), relative_error(&analytic, numeric.data())));
    }
    let worst = results.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(CaseReport {
        group,
        name: name.into(),
        inputs: results,
        worst,
        passed: worst <= cfg.tolerance && worst.is_finite(),
    })
}

fn named_store(h: Tensor<f32>, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut v = vec![("h".to_string(), h)];
    v.extend(store.iter().map(|(_, n, t)| (n.to_string(), t.clone())));
    v
}

/// The tiny split model used by the end-to-end check: `k = 1`, one layer
/// before pooling, one decoder layer, two tasks.
pub fn tiny_split_config(cfg: &GradcheckConfig) -> ModelConfig {
    ModelConfig {
        encoder: DeviceEncoderConfig {
            vocab_size: 16,
            max_seq_len: cfg.seq_len,
            width: cfg.width,
            num_heads: cfg.num_heads,
            ffn_ratio: cfg.ffn_ratio,
            layer_norm_eps: DEFAULT_LAYER_NORM_EPS,
            pre_pool_layers: 1,
            pooling_stages: 1,
            post_pool_layers: 0,
            pooling: PoolingConfig::default(),
        },
        decoder: CloudDecoderConfig {
            num_layers: 1,
            heads_on_device: false,
            tasks: vec![
                TaskHeadSpec {
                    id: "a".into(),
                    num_classes: 3,
                },
                TaskHeadSpec {
                    id: "b".into(),
                    num_classes: 4,
                },
            ],
        },
    }
}

/// Runs every case. `fault` corrupts one backward rule (negative control).
pub fn run_gradcheck_suite(
    cfg: &GradcheckConfig,
    seed: u64,
    fault: Option<BackwardFault>,
) -> Result<SuiteReport, ModelError> {
    cfg.validate()?;
    let start = Instant::now();
    let (t, d) = (cfg.seq_len, cfg.width);
    let mut rng = seeded(sub_seed(seed, "gradcheck"));
    let mut rand = |shape: &[usize]| Tensor::<f32>::uniform(shape, 1.0, &mut rng);
    let mut cases = Vec::new();
    let named = |items: Vec<(&str, Tensor<f32>)>| -> Vec<(String, Tensor<f32>)> {
        items.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };

    let core: Vec<(&str, Case, Vec<(String, Tensor<f32>)>)> = vec![
        (
            "matmul",
            Case::MatMul,
            named(vec![("a", rand(&[t, d])), ("b", rand(&[d, d + 3]))]),
        ),
        ("transpose", Case::Transpose, named(vec![("a", rand(&[t, d]))])),
        (
            "add_row",
            Case::AddRow,
            named(vec![("a", rand(&[t, d])), ("row", rand(&[1, d]))]),
        ),
        (
            "mul_row",
            Case::MulRow,
            named(vec![("a", rand(&[t, d])), ("row", rand(&[1, d]))]),
        ),
        (
            "mul",
            Case::Mul,
            named(vec![("a", rand(&[t, d])), ("b", rand(&[t, d]))]),
        ),
        ("softmax_rows", Case::Softmax, named(vec![("x", rand(&[3, 4]))])),
        ("gelu", Case::Gelu, named(vec![("x", rand(&[t, d]))])),
        ("mean_rows", Case::MeanRows, named(vec![("x", rand(&[t, d]))])),
        (
            "layer_norm_op",
            Case::LayerNormOp,
            named(vec![
                ("x", rand(&[t, d])),
                ("gamma", rand(&[1, d])),
                ("beta", rand(&[1, d])),
            ]),
        ),
        (
            "slice_concat",
            Case::SliceConcat,
            named(vec![("x", rand(&[t, 5]))]),
        ),
        (
            "gather_rows",
            Case::Gather(vec![2, 0, 2, 5]),
            named(vec![("table", rand(&[6, d]))]),
        ),
        (
            "cross_entropy",
            Case::CrossEntropy(vec![1, 0, 3]),
            named(vec![("logits", rand(&[3, 4]))]),
        ),
    ];
    for (name, case, inputs) in core {
        cases.push(check_case("tensor-core", name, &case, &inputs, cfg, fault)?);
    }

    let shape = cfg.shape();
    let mut init_rng = seeded(sub_seed(seed, "gradcheck-init"));
    let mut store = ParamStore::<f32>::new();
    let mut init = ParamInit {
        store: &mut store,
        rng: &mut init_rng,
    };
    let ln = LayerNormParams::init(&mut init, "ln", d, DEFAULT_LAYER_NORM_EPS);
    let ln_store = store.clone();
    let mut param_rng = seeded(sub_seed(seed, "gradcheck-params"));
    let mut randomize = |s: &mut ParamStore<f32>| {
        // non-trivial scales and biases so every parameter has a gradient
        for id in s.ids().collect::<Vec<_>>() {
            let name = s.name(id).to_string();
            let shape = s.get(id).shape().to_vec();
            if name.ends_with("gamma") {
                *s.get_mut(id) = Tensor::<f32>::uniform(&shape, 0.5, &mut param_rng).map(|v| v + 1.0);
            } else if name.ends_with("beta") || name.contains(".b_") {
                *s.get_mut(id) = Tensor::uniform(&shape, 0.5, &mut param_rng);
            }
        }
    };
    let mut ln_store = ln_store;
    randomize(&mut ln_store);
    cases.push(check_case(
        "transformer-blocks",
        "layer_norm",
        &Case::LayerNorm(ln),
        &named_store(rand(&[t, d]), &ln_store),
        cfg,
        fault,
    )?);

    let mut attn_store = ParamStore::new();
    let attn = AttentionParams::init(
        &mut ParamInit {
            store: &mut attn_store,
            rng: &mut init_rng,
        },
        "attn",
        d,
        cfg.num_heads,
    )?;
    cases.push(check_case(
        "transformer-blocks",
        "self_attention",
        &Case::Attention(attn),
        &named_store(rand(&[t, d]), &attn_store),
        cfg,
        fault,
    )?);

    let mut ffn_store = ParamStore::new();
    let ffn = FfnParams::init(
        &mut ParamInit {
            store: &mut ffn_store,
            rng: &mut init_rng,
        },
        "ffn",
        d,
        cfg.ffn_ratio,
    )?;
    randomize(&mut ffn_store);
    cases.push(check_case(
        "transformer-blocks",
        "position_wise_ffn",
        &Case::Ffn(ffn),
        &named_store(rand(&[t, d]), &ffn_store),
        cfg,
        fault,
    )?);

    let mut layer_store = ParamStore::new();
    let layer = TransformerLayerParams::init(
        &mut ParamInit {
            store: &mut layer_store,
            rng: &mut init_rng,
        },
        "layer",
        shape,
    )?;
    randomize(&mut layer_store);
    cases.push(check_case(
        "transformer-blocks",
        "transformer_layer",
        &Case::Layer(layer),
        &named_store(rand(&[t, d]), &layer_store),
        cfg,
        fault,
    )?);

    cases.push(check_case(
        "pooling-compression",
        "pool",
        &Case::PoolOnly(PoolingConfig::default()),
        &named(vec![("h", rand(&[t, d]))]),
        cfg,
        fault,
    )?);
    cases.push(check_case(
        "pooling-compression",
        "pool_odd_length",
        &Case::Pool,
        &named(vec![("h", rand(&[t.max(2) - 1, d]))]),
        cfg,
        fault,
    )?);

    let mut block_store = ParamStore::new();
    let block = PooledBlockParams::init(
        &mut ParamInit {
            store: &mut block_store,
            rng: &mut init_rng,
        },
        "pooled",
        shape,
        PoolingConfig::default(),
    )?;
    randomize(&mut block_store);
    cases.push(check_case(
        "pooling-compression",
        "pooled_attention_block",
        &Case::PooledBlock(block),
        &named_store(rand(&[t, d]), &block_store),
        cfg,
        fault,
    )?);

    let mut model = SplitModel::new(tiny_split_config(cfg), sub_seed(seed, "gradcheck-model"))?;
    randomize(&mut model.params);
    let mut tok_rng = seeded(sub_seed(seed, "gradcheck-tokens"));
    let sequences: Vec<Vec<Token>> = (0..2)
        .map(|_| {
            (0..t)
                .map(|_| rand::Rng::random_range(&mut tok_rng, 0..16u32))
                .collect()
        })
        .collect();
    let inputs: Vec<(String, Tensor<f32>)> = model
        .params
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    let case = Case::Split {
        model: Box::new(model),
        sequences,
        labels: vec![2, 1],
    };
    cases.push(check_split(&case, &inputs, cfg, fault)?);

    Ok(SuiteReport {
        cases,
        tolerance: cfg.tolerance,
        elapsed: start.elapsed(),
    })
}

fn check_split(
    case: &Case,
    inputs: &[(String, Tensor<f32>)],
    cfg: &GradcheckConfig,
    fault: Option<BackwardFault>,
) -> Result<CaseReport, ModelError> {
    check_case("split-model", "end_to_end_split_model", case, inputs, cfg, fault)
}
