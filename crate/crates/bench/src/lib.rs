//! Fixtures shared by the benchmarks.

use devtune_core::rng::{seeded, sub_seed};
use devtune_core::{ModelConfig, SplitModel, Tensor, Token};

/// Default-sized model with `stages` pooling stages.
pub fn model_with_stages(stages: usize) -> SplitModel {
    let mut config = ModelConfig::default();
    config.encoder.pooling_stages = stages;
    SplitModel::new(config, sub_seed(0, "bench-init")).expect("valid default config")
}

/// Seeded tokens in `0..vocab`.
pub fn tokens(len: usize, vocab: usize) -> Vec<Token> {
    Tensor::<f32>::uniform(&[len, 1], 1.0, &mut seeded(sub_seed(len as u64, "bench-tokens")))
        .data()
        .iter()
        .map(|v| (((v + 1.0) * 0.5 * vocab as f32) as usize).min(vocab - 1) as Token)
        .collect()
}

/// Seeded `rows × cols` tensor.
pub fn hidden(rows: usize, cols: usize) -> Tensor<f32> {
    Tensor::uniform(
        &[rows, cols],
        1.0,
        &mut seeded(sub_seed((rows * cols) as u64, "bench-hidden")),
    )
}
