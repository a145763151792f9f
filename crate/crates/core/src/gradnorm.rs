//! Gradient-magnitude balancing of per-task loss weights.
//!
//! Each update moves the weight of task `i` toward a target gradient norm
//! derived from its relative training progress:
//!
//! ```text
//! r_i  = (L_i / L_i(0)) / mean_j (L_j / L_j(0))
//! G*_i = mean(g) · r_i^α
//! w_i ← w_i · (G*_i / max(g_i, 1e-8))^β      then clip, then rescale to Σ w = K
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradNormError {
    #[error("expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("weight {index} is {value}; weights must be non-negative and finite")]
    InvalidWeight { index: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradNormConfig {
    pub enabled: bool,
    /// Asymmetry exponent α.
    pub alpha: f64,
    /// Multiplicative step exponent β.
    pub beta: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 1.5,
            beta: 0.1,
            clip_lo: 0.01,
            clip_hi: 100.0,
        }
    }
}

impl GradNormConfig {
    pub fn validate(&self, tasks: usize) -> Result<(), String> {
        if !self.alpha.is_finite() {
            return Err("train.gradnorm.alpha must be finite".into());
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err("train.gradnorm.beta must be a non-negative finite number".into());
        }
        if !(self.clip_lo > 0.0) || !(self.clip_hi >= self.clip_lo) {
            return Err("train.gradnorm.clip_lo must be > 0 and <= gradnorm.clip_hi".into());
        }
        let k = tasks as f64;
        if self.clip_lo * k > k || self.clip_hi * k < k {
            return Err("train.gradnorm.clip_lo: clip range must contain 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradNormState {
    pub weights: Vec<f64>,
    pub initial_losses: Option<Vec<f64>>,
    pub config: GradNormConfig,
}

impl GradNormState {
    /// Unit weights for `tasks` tasks.
    pub fn new(tasks: usize, config: GradNormConfig) -> Self {
        Self {
            weights: vec![1.0; tasks],
            initial_losses: None,
            config,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.weights.len()
    }

    pub fn record_initial_losses(&mut self, losses: &[f64]) -> Result<(), GradNormError> {
        check_len(self.num_tasks(), losses.len())?;
        self.initial_losses = Some(losses.to_vec());
        Ok(())
    }

    /// `(L_i / L_i(0))` normalized by its mean across tasks.
    pub fn relative_inverse_rates(&self, losses: &[f64]) -> Result<Vec<f64>, GradNormError> {
        check_len(self.num_tasks(), losses.len())?;
        let initial = self.initial_losses.as_deref().unwrap_or(losses);
        let ratios: Vec<f64> = losses
            .iter()
            .zip(initial)
            .map(|(l, l0)| if *l0 > 0.0 { l / l0 } else { 1.0 })
            .collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        Ok(ratios
            .iter()
            .map(|r| if mean > 0.0 { r / mean } else { 1.0 })
            .collect())
    }
}

fn check_len(expected: usize, actual: usize) -> Result<(), GradNormError> {
    if expected != actual {
        return Err(GradNormError::LengthMismatch { expected, actual });
    }
    Ok(())
}

/// `Σ_i w_i · L_i`.
pub fn multitask_loss(losses: &[f64], weights: &[f64]) -> Result<f64, GradNormError> {
    check_len(weights.len(), losses.len())?;
    if let Some((index, &value)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(**w >= 0.0) || !w.is_finite())
    {
        return Err(GradNormError::InvalidWeight { index, value });
    }
    Ok(weights.iter().zip(losses).map(|(w, l)| w * l).sum())
}

/// One balancing step. `grad_norms[i]` is the norm of task `i`'s weighted
/// loss gradient on the shared parameters. When every norm is zero the
/// state is returned unchanged. Records `losses` as the initial losses if
/// none were recorded yet.
pub fn gradnorm_update(
    state: &GradNormState,
    grad_norms: &[f64],
    losses: &[f64],
) -> Result<GradNormState, GradNormError> {
    let k = state.num_tasks();
    check_len(k, grad_norms.len())?;
    check_len(k, losses.len())?;
    let mut next = state.clone();
    if next.initial_losses.is_none() {
        next.initial_losses = Some(losses.to_vec());
    }
    if grad_norms.iter().all(|&g| g <= 0.0) {
        return Ok(next);
    }
    let cfg = &state.config;
    let rates = next.relative_inverse_rates(losses)?;
    let mean_norm = grad_norms.iter().sum::<f64>() / k as f64;
    for ((w, &g), r) in next.weights.iter_mut().zip(grad_norms).zip(&rates) {
        let target = mean_norm * r.powf(cfg.alpha);
        *w *= (target / g.max(NORM_FLOOR)).powf(cfg.beta);
    }
    normalize_weights(&mut next.weights, cfg.clip_lo, cfg.clip_hi);
    Ok(next)
}

/// Clips to `[lo, hi]` and rescales to sum to the task count, repeating
/// until both hold.
fn normalize_weights(weights: &mut [f64], lo: f64, hi: f64) {
    let k = weights.len() as f64;
    for _ in 0..64 {
        for w in weights.iter_mut() {
            *w = w.clamp(lo, hi);
        }
        let sum: f64 = weights.iter().sum();
        let scale = k / sum;
        for w in weights.iter_mut() {
            *w *= scale;
        }
        if weights
            .iter()
            .all(|w| *w >= lo * (1.0 - 1e-12) && *w <= hi * (1.0 + 1e-12))
        {
            break;
        }
    }
}
