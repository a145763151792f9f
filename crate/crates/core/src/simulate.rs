//! Analytic split-inference simulation: attention FLOPs on each side of the
//! split, uplink bytes and uplink latency.

use serde::Serialize;

use crate::model::{DeviceEncoderConfig, ModelConfig};
use crate::pooling::attention_flops;
use crate::wire::{channel_transfer, message_len, ChannelModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationRow {
    /// Number of pooled blocks that actually pool; the remaining blocks run
    /// unpooled at the incoming length.
    pub stages: usize,
    pub compressed_len: usize,
    pub uplink_bytes: usize,
    pub uplink_latency: f64,
    pub device_flops: u64,
    pub cloud_flops: u64,
    /// Baseline (no pooling) uplink bytes divided by this row's bytes.
    pub ratio: f64,
}

impl SimulationRow {
    pub fn total_flops(&self) -> u64 {
        self.device_flops + self.cloud_flops
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationReport {
    pub input_len: usize,
    pub width: usize,
    pub pooled: SimulationRow,
    /// Same layer stack with pooling disabled in every block.
    pub baseline: SimulationRow,
}

/// Attention sequence lengths of every device layer, in execution order,
/// when the first `pooled_stages` blocks pool.
pub fn device_layer_lengths(enc: &DeviceEncoderConfig, len: usize, pooled_stages: usize) -> Vec<usize> {
    let mut lengths = vec![len; enc.pre_pool_layers];
    let mut t = len;
    for s in 0..enc.pooling_stages {
        if s < pooled_stages {
            t = enc.pooling.output_len(t);
        }
        lengths.push(t);
        lengths.extend(std::iter::repeat_n(t, enc.post_pool_layers));
    }
    lengths
}

pub fn simulate_row(
    config: &ModelConfig,
    channel: &ChannelModel,
    len: usize,
    pooled_stages: usize,
) -> SimulationRow {
    let enc = &config.encoder;
    let d = enc.width as u64;
    let lengths = device_layer_lengths(enc, len, pooled_stages.min(enc.pooling_stages));
    let compressed_len = enc
        .pooling
        .output_len_iter(len, pooled_stages.min(enc.pooling_stages));
    let device_flops = lengths.iter().map(|&t| attention_flops(t as u64, d)).sum();
    let cloud_flops = config.decoder.num_layers as u64 * attention_flops(compressed_len as u64, d);
    let uplink_bytes = message_len(compressed_len, enc.width);
    SimulationRow {
        stages: pooled_stages.min(enc.pooling_stages),
        compressed_len,
        uplink_bytes,
        uplink_latency: channel_transfer(uplink_bytes, channel),
        device_flops,
        cloud_flops,
        ratio: message_len(len, enc.width) as f64 / uplink_bytes as f64,
    }
}

/// Report for the configured number of pooling stages against the
/// unpooled baseline.
pub fn simulate_split_inference(
    config: &ModelConfig,
    channel: &ChannelModel,
    len: usize,
) -> SimulationReport {
    SimulationReport {
        input_len: len,
        width: config.encoder.width,
        pooled: simulate_row(config, channel, len, config.encoder.pooling_stages),
        baseline: simulate_row(config, channel, len, 0),
    }
}

/// One row per number of pooling stages `0..=pooling_stages`.
pub fn simulate_table(config: &ModelConfig, channel: &ChannelModel, len: usize) -> Vec<SimulationRow> {
    (0..=config.encoder.pooling_stages)
        .map(|k| simulate_row(config, channel, len, k))
        .collect()
}

/// Attention FLOPs of the whole model run without any pooling in one
/// process.
pub fn monolithic_unpooled_flops(config: &ModelConfig, len: usize) -> u64 {
    let enc = &config.encoder;
    let layers =
        enc.pre_pool_layers + enc.pooling_stages * (1 + enc.post_pool_layers) + config.decoder.num_layers;
    layers as u64 * attention_flops(len as u64, enc.width as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CloudDecoderConfig;
    use crate::wire::communication_bytes;

    fn cfg(pre: usize, stages: usize, post: usize, dec: usize) -> ModelConfig {
        ModelConfig {
            encoder: DeviceEncoderConfig {
                width: 8,
                num_heads: 2,
                pre_pool_layers: pre,
                pooling_stages: stages,
                post_pool_layers: post,
                ..Default::default()
            },
            decoder: CloudDecoderConfig {
                num_layers: dec,
                ..Default::default()
            },
        }
    }

    #[test]
    fn hand_summed_three_layer_config() {
        // pre layer at T=16, pooled block at 8, decoder layer at 8
        let c = cfg(1, 1, 0, 1);
        let r = simulate_split_inference(&c, &ChannelModel::default(), 16);
        let a16 = 8 * 16 * 64 + 4 * 256 * 8;
        let a8 = 8 * 8 * 64 + 4 * 64 * 8;
        assert_eq!(r.pooled.device_flops, a16 + a8);
        assert_eq!(r.pooled.cloud_flops, a8);
        assert_eq!(r.baseline.device_flops, 2 * a16);
        assert_eq!(r.baseline.cloud_flops, a16);
        assert_eq!(r.pooled.uplink_bytes, 22 + 8 * 8 * 4);
        assert_eq!(r.baseline.uplink_bytes, 22 + 16 * 8 * 4);
    }

    #[test]
    fn one_stage_halves_payload() {
        let c = cfg(1, 1, 1, 1);
        let r = simulate_split_inference(&c, &ChannelModel::default(), 32);
        assert_eq!(2 * (r.pooled.uplink_bytes - 22), r.baseline.uplink_bytes - 22);
    }

    #[test]
    fn baseline_matches_monolithic_unpooled() {
        let c = cfg(2, 2, 1, 2);
        let r = simulate_split_inference(&c, &ChannelModel::default(), 64);
        assert_eq!(r.baseline.total_flops(), monolithic_unpooled_flops(&c, 64));
        assert!(r.pooled.device_flops < r.baseline.device_flops);
    }

    #[test]
    fn table_consistent_with_communication_bytes() {
        let c = cfg(1, 3, 1, 1);
        let table = simulate_table(&c, &ChannelModel::default(), 20);
        assert_eq!(table.len(), 4);
        assert_eq!(table[0].ratio, 1.0);
        for (k, row) in table.iter().enumerate() {
            let cb = communication_bytes(20, k, 8);
            assert_eq!(row.uplink_bytes, cb.compressed);
            assert_eq!(row.ratio, cb.ratio);
        }
        for pair in table.windows(2) {
            assert!(pair[1].uplink_bytes < pair[0].uplink_bytes);
        }
    }

    #[test]
    fn layer_lengths() {
        let c = cfg(2, 2, 1, 2);
        assert_eq!(
            device_layer_lengths(&c.encoder, 64, 2),
            vec![64, 64, 32, 32, 16, 16]
        );
        assert_eq!(
            device_layer_lengths(&c.encoder, 64, 1),
            vec![64, 64, 32, 32, 32, 32]
        );
        assert_eq!(device_layer_lengths(&c.encoder, 64, 0), vec![64; 6]);
    }
}
