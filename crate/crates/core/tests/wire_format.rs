use devtune_core::rng::seeded;
use devtune_core::wire::{decode_header, HEADER_LEN};
use devtune_core::{decode_message, encode_message, Tensor, WireError};
use proptest::prelude::*;

fn golden(name: &str) -> Vec<u8> {
    let path = format!("{}/../../testdata/{name}.hex", env!("CARGO_MANIFEST_DIR"));
    let text = std::fs::read_to_string(path).unwrap();
    let digits: String = text.split_whitespace().collect();
    (0..digits.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&digits[i..i + 2], 16).unwrap())
        .collect()
}

#[test]
fn golden_zero_1x1() {
    let bytes = golden("golden_1x1_zero");
    assert_eq!(bytes.len(), 26);
    let t = decode_message(&bytes).unwrap();
    assert_eq!(t.shape(), &[1, 1]);
    assert_eq!(t.data()[0].to_bits(), 0);
    assert_eq!(encode_message(&Tensor::zeros(&[1, 1])).unwrap(), bytes);
}

#[test]
fn golden_counting_2x3() {
    let bytes = golden("golden_2x3_counting");
    assert_eq!(bytes.len(), 46);
    let h = decode_header(&bytes).unwrap();
    assert_eq!((h.rows, h.cols, h.payload_len), (2, 3, 24));
    let t = decode_message(&bytes).unwrap();
    assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    let counting = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
    assert_eq!(encode_message(&counting).unwrap(), bytes);
}

#[test]
fn binary_copies_match_hex() {
    for name in ["golden_1x1_zero", "golden_2x3_counting"] {
        let path = format!("{}/../../testdata/{name}.bin", env!("CARGO_MANIFEST_DIR"));
        assert_eq!(std::fs::read(path).unwrap(), golden(name), "{name}");
    }
}

#[test]
fn malformed_messages() {
    let good = golden("golden_2x3_counting");

    let mut bad = good.clone();
    bad[0] ^= 0xff;
    let e = decode_message(&bad).unwrap_err();
    assert!(matches!(e, WireError::BadMagic { .. }));
    assert_eq!(e.offset(), 0);

    let mut bad = good.clone();
    bad[4] = 2;
    let e = decode_message(&bad).unwrap_err();
    assert!(matches!(e, WireError::Version { found: 2 }));
    assert_eq!(e.offset(), 4);

    let e = decode_message(&good[..good.len() - 1]).unwrap_err();
    assert!(
        matches!(e, WireError::Truncated { field: "payload", .. }),
        "{e:?}"
    );

    let e = decode_message(&good[..10]).unwrap_err();
    assert!(matches!(e, WireError::Truncated { .. }), "{e:?}");

    let mut bad = good.clone();
    bad[14] = 20;
    let e = decode_message(&bad).unwrap_err();
    assert!(matches!(e, WireError::PayloadMismatch { .. }), "{e:?}");
}

#[test]
fn seeded_round_trips() {
    let mut rng = seeded(42);
    for i in 0..1000 {
        let rows = 1 + i % 7;
        let cols = 1 + (i / 7) % 11;
        let t = Tensor::<f32>::uniform(&[rows, cols], 1e3, &mut rng);
        let bytes = encode_message(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + rows * cols * 4);
        assert!(decode_message(&bytes).unwrap().bit_eq(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn any_bits_round_trip(rows in 1usize..6, cols in 1usize..6, bits in prop::collection::vec(any::<u32>(), 36)) {
        let data: Vec<f32> = bits[..rows * cols].iter().map(|&b| f32::from_bits(b)).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let back = decode_message(&encode_message(&t).unwrap()).unwrap();
        prop_assert!(back.bit_eq(&t));
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..46) {
        let good = golden("golden_2x3_counting");
        prop_assert!(decode_message(&good[..cut]).is_err());
    }
}
