use devtune_core::rng::{seeded, sub_seed};
use devtune_core::{
    decode_message, encode_message, CloudDecoderConfig, DeviceEncoderConfig, ModelConfig, SplitModel,
    TaskHeadSpec, Token,
};
use rand::Rng;

fn random_config(rng: &mut impl Rng) -> ModelConfig {
    let num_heads = [1, 2, 4][rng.random_range(0..3)];
    let width = num_heads * rng.random_range(1..=4usize);
    ModelConfig {
        encoder: DeviceEncoderConfig {
            vocab_size: rng.random_range(2..40),
            max_seq_len: 24,
            width,
            num_heads,
            ffn_ratio: rng.random_range(1..=4),
            pre_pool_layers: rng.random_range(0..=2),
            pooling_stages: rng.random_range(0..=3),
            post_pool_layers: rng.random_range(0..=1),
            ..Default::default()
        },
        decoder: CloudDecoderConfig {
            num_layers: rng.random_range(0..=2),
            heads_on_device: false,
            tasks: vec![
                TaskHeadSpec {
                    id: "x".into(),
                    num_classes: rng.random_range(2..6),
                },
                TaskHeadSpec {
                    id: "y".into(),
                    num_classes: rng.random_range(2..6),
                },
            ],
        },
    }
}

#[test]
fn split_path_equals_monolithic_bit_exactly() {
    for seed in 0..100u64 {
        let mut rng = seeded(sub_seed(seed, "pair"));
        let config = random_config(&mut rng);
        let vocab = config.encoder.vocab_size as u32;
        let model = SplitModel::new(config, seed).unwrap();
        let len = rng.random_range(1..=24);
        let tokens: Vec<Token> = (0..len).map(|_| rng.random_range(0..vocab)).collect();

        let h = model.device_encode(&tokens).unwrap();
        assert_eq!(h.rows(), model.config.encoder.output_len(len));
        let received = decode_message(&encode_message(&h).unwrap()).unwrap();
        for task in ["x", "y"] {
            let split = model.cloud_decode(&received, task).unwrap();
            let mono = model.monolithic_forward(&tokens, task).unwrap();
            let a: Vec<u32> = split.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = mono.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "seed {seed} task {task}");
        }
    }
}
