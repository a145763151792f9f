//! Multi-task training with gradient-norm balanced task weights.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::TrainError;
use crate::gradnorm::{gradnorm_update, multitask_loss, GradNormConfig, GradNormState};
use crate::model::SplitModel;
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamId;
use crate::rng::{splitmix64, sub_seed};
use crate::tasks::{generate_batch, Batch, SyntheticTaskSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Sequences per task in the fixed evaluation batch.
    pub eval_size: usize,
    pub optimizer: AdamConfig,
    pub gradnorm: GradNormConfig,
    /// Parameter whose per-task gradient norms drive balancing. Defaults to
    /// the attention output projection of the last shared layer.
    pub shared_param: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            eval_size: 64,
            optimizer: AdamConfig::default(),
            gradnorm: GradNormConfig::default(),
            shared_param: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, tasks: usize) -> Result<(), String> {
        if self.steps == 0 {
            return Err("train.steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be at least 1".into());
        }
        if self.eval_size == 0 {
            return Err("train.eval_size must be at least 1".into());
        }
        let lr = self.optimizer.learning_rate;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err("train.optimizer.learning_rate must be a non-negative finite number".into());
        }
        self.gradnorm.validate(tasks)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub losses: Vec<f64>,
    /// Weights applied to this step's losses.
    pub weights: Vec<f64>,
    pub total_loss: f64,
    /// Unweighted per-task gradient norms on the shared parameter.
    pub grad_norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub task_ids: Vec<String>,
    pub records: Vec<StepRecord>,
    pub initial_eval_losses: Vec<f64>,
    pub final_eval_losses: Vec<f64>,
    pub final_weights: Vec<f64>,
}

impl TrainingReport {
    /// Per-step records as CSV with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "total_loss".to_string()];
        for prefix in ["loss", "weight", "grad_norm"] {
            header.extend(self.task_ids.iter().map(|id| format!("{prefix}.{id}")));
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.total_loss.to_string()];
            row.extend(r.losses.iter().map(f64::to_string));
            row.extend(r.weights.iter().map(f64::to_string));
            row.extend(r.grad_norms.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn loss_curve(&self, task: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.losses[task]).collect()
    }
}

/// Loss of every task on its batch; parameters are treated as constants.
pub fn evaluate(model: &SplitModel, batches: &[(&str, &Batch)]) -> Result<Vec<f64>, TrainError> {
    let tape = Tape::new();
    let w = model.params.bind(&tape, false);
    batches
        .iter()
        .map(|(id, b)| {
            let l = model.task_loss_on(&w, id, &b.sequences, &b.labels)?;
            Ok(l.value().item() as f64)
        })
        .collect()
}

/// Per-task L2 norm of `∇ L_i` restricted to `shared`, with the gradient
/// reset between tasks.
pub fn measure_shared_grad_norms(
    model: &SplitModel,
    batches: &[(&str, &Batch)],
    shared: ParamId,
) -> Result<Vec<f64>, TrainError> {
    let tape = Tape::new();
    let w = model.params.bind(&tape, true);
    let mut norms = Vec::with_capacity(batches.len());
    for (id, b) in batches {
        let loss = model.task_loss_on(&w, id, &b.sequences, &b.labels)?;
        tape.zero_grad();
        tape.backward(loss)?;
        norms.push(w.grad(shared).map_or(0.0, |g| g.l2_norm()));
    }
    Ok(norms)
}

pub fn resolve_shared_param(model: &SplitModel, name: Option<&str>) -> Result<ParamId, TrainError> {
    match name {
        None => Ok(model.last_shared_attention_output()),
        Some(n) => {
            let id = model
                .params
                .find(n)
                .ok_or_else(|| TrainError::Setup(format!("unknown shared parameter `{n}`")))?;
            if !model.trunk_params().contains(&id) {
                return Err(TrainError::Setup(format!("`{n}` is a task-specific parameter")));
            }
            Ok(id)
        }
    }
}

/// Seed of the batch for `task` at `step`.
pub fn batch_seed(data_seed: u64, task: usize, step: usize) -> u64 {
    splitmix64(data_seed ^ splitmix64(((step as u64) << 16) | task as u64))
}

/// Trains every task jointly. `on_step` observes each record as it is
/// produced.
pub fn train(
    model: &mut SplitModel,
    tasks: &[SyntheticTaskSpec],
    config: &TrainConfig,
    data_seed: u64,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainingReport, TrainError> {
    config.validate(tasks.len()).map_err(TrainError::Setup)?;
    if tasks.is_empty() {
        return Err(TrainError::Setup("no tasks".into()));
    }
    let enc = &model.config.encoder;
    for (i, t) in tasks.iter().enumerate() {
        t.validate(i, enc.vocab_size, enc.max_seq_len)?;
        let head = model.head(&t.id)?;
        if head.spec.num_classes != t.num_classes {
            return Err(TrainError::Setup(format!(
                "task `{}` has {} classes but its head has {}",
                t.id, t.num_classes, head.spec.num_classes
            )));
        }
    }
    let shared = resolve_shared_param(model, config.shared_param.as_deref())?;
    let k = tasks.len();

    let eval_seed = sub_seed(data_seed, "eval");
    let eval_batches: Vec<Batch> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| generate_batch(t, config.eval_size, eval_seed ^ i as u64))
        .collect();
    let eval_refs: Vec<(&str, &Batch)> = tasks
        .iter()
        .zip(&eval_batches)
        .map(|(t, b)| (t.id.as_str(), b))
        .collect();
    let initial_eval_losses = evaluate(model, &eval_refs)?;

    let mut optimizer = OptimizerState::new(config.optimizer, &model.params);
    let mut balance = GradNormState::new(k, config.gradnorm);
    let mut records = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let batches: Vec<Batch> = tasks
            .iter()
            .enumerate()
            .map(|(i, t)| generate_batch(t, config.batch_size, batch_seed(data_seed, i, step)))
            .collect();

        let tape = Tape::new();
        let w = model.params.bind(&tape, true);
        let mut losses = Vec::with_capacity(k);
        let mut loss_vars = Vec::with_capacity(k);
        for (t, b) in tasks.iter().zip(&batches) {
            let l = model.task_loss_on(&w, &t.id, &b.sequences, &b.labels)?;
            let value = l.value().item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    task: t.id.clone(),
                    value,
                });
            }
            losses.push(value);
            loss_vars.push(l);
        }

        let weights = balance.weights.clone();
        let mut combined: Vec<Tensor<f32>> = model
            .params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut grad_norms = Vec::with_capacity(k);
        for (l, &wt) in loss_vars.iter().zip(&weights) {
            tape.zero_grad();
            tape.backward(*l)?;
            let grads = w.grads();
            grad_norms.push(grads[shared.index()].l2_norm());
            let wt = wt as f32;
            for (acc, g) in combined.iter_mut().zip(&grads) {
                for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += wt * v;
                }
            }
        }
        drop(w);
        drop(tape);
        optimizer.step(&mut model.params, &combined);

        let total_loss = multitask_loss(&losses, &weights).map_err(|e| TrainError::Setup(e.to_string()))?;
        if config.gradnorm.enabled {
            let weighted: Vec<f64> = grad_norms.iter().zip(&weights).map(|(g, w)| g * w).collect();
            balance = gradnorm_update(&balance, &weighted, &losses)
                .map_err(|e| TrainError::Setup(e.to_string()))?;
        }
        let record = StepRecord {
            step,
            losses,
            weights,
            total_loss,
            grad_norms,
        };
        on_step(&record);
        records.push(record);
    }

    let final_eval_losses = evaluate(model, &eval_refs)?;
    Ok(TrainingReport {
        task_ids: tasks.iter().map(|t| t.id.clone()).collect(),
        records,
        initial_eval_losses,
        final_eval_losses,
        final_weights: balance.weights,
    })
}
