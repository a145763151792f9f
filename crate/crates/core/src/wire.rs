//! Device→cloud wire format for the compressed representation, byte
//! accounting and a linear channel model.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field        |
//! |-------:|-----:|--------------|
//! | 0      | 4    | magic `DVTN` |
//! | 4      | 1    | version = 1  |
//! | 5      | 1    | dtype_code = 1 (f32 LE) |
//! | 6      | 4    | rows T′ (u32) |
//! | 10     | 4    | cols D (u32) |
//! | 14     | 8    | payload_len (u64) = T′·D·4 |
//! | 22     | ..   | payload, row-major f32 LE |

use serde::{Deserialize, Serialize};

use crate::error::WireError;
use crate::pooling::{iterated_pooled_len, PoolingConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DVTN";
pub const VERSION: u8 = 1;
pub const DTYPE_F32_LE: u8 = 1;
pub const HEADER_LEN: usize = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MessageHeader {
    pub version: u8,
    pub dtype_code: u8,
    pub rows: u32,
    pub cols: u32,
    pub payload_len: u64,
}

/// Total encoded size of a `rows × cols` message.
pub fn message_len(rows: usize, cols: usize) -> usize {
    HEADER_LEN + rows * cols * 4
}

pub fn encode_message(h: &Tensor<f32>) -> Result<Vec<u8>, WireError> {
    let (rows, cols) = match h.shape() {
        [r, c] => (*r, *c),
        s => return Err(WireError::NotMatrix { shape: s.to_vec() }),
    };
    let mut out = Vec::with_capacity(message_len(rows, cols));
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32_LE);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&((rows * cols * 4) as u64).to_le_bytes());
    for v in h.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, field: &'static str) -> Result<&'a [u8], WireError> {
    bytes.get(offset..offset + len).ok_or(WireError::Truncated {
        field,
        offset,
        needed: len,
        available: bytes.len().saturating_sub(offset),
    })
}

/// Parses and validates the 22-byte header.
pub fn decode_header(bytes: &[u8]) -> Result<MessageHeader, WireError> {
    let magic = take(bytes, 0, 4, "magic").map_err(|e| match bytes.get(..bytes.len().min(4)) {
        Some(found) if found != &MAGIC[..found.len()] => WireError::BadMagic {
            found: found.to_vec(),
        },
        _ => e,
    })?;
    if magic != MAGIC {
        return Err(WireError::BadMagic {
            found: magic.to_vec(),
        });
    }
    let version = take(bytes, 4, 1, "version")?[0];
    if version != VERSION {
        return Err(WireError::Version { found: version });
    }
    let dtype_code = take(bytes, 5, 1, "dtype_code")?[0];
    if dtype_code != DTYPE_F32_LE {
        return Err(WireError::Dtype { found: dtype_code });
    }
    let rows = u32::from_le_bytes(take(bytes, 6, 4, "rows")?.try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(take(bytes, 10, 4, "cols")?.try_into().expect("4 bytes"));
    let payload_len = u64::from_le_bytes(take(bytes, 14, 8, "payload_len")?.try_into().expect("8 bytes"));
    if rows == 0 {
        return Err(WireError::ZeroDimension {
            field: "rows",
            offset: 6,
        });
    }
    if cols == 0 {
        return Err(WireError::ZeroDimension {
            field: "cols",
            offset: 10,
        });
    }
    let expected = rows as u64 * cols as u64 * 4;
    if payload_len != expected {
        return Err(WireError::PayloadMismatch {
            payload_len,
            rows,
            cols,
            expected,
        });
    }
    Ok(MessageHeader {
        version,
        dtype_code,
        rows,
        cols,
        payload_len,
    })
}

pub fn decode_message(bytes: &[u8]) -> Result<Tensor<f32>, WireError> {
    let header = decode_header(bytes)?;
    let payload = take(bytes, HEADER_LEN, header.payload_len as usize, "payload")?;
    let end = HEADER_LEN + payload.len();
    if bytes.len() > end {
        return Err(WireError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(
        Tensor::new(vec![header.rows as usize, header.cols as usize], data)
            .expect("header dimensions match payload"),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommunicationBytes {
    pub uncompressed: usize,
    pub compressed: usize,
    pub ratio: f64,
}

/// Uplink message sizes with and without `stages` halvings of a length-`len`
/// sequence of width `width`.
pub fn communication_bytes(len: usize, stages: usize, width: usize) -> CommunicationBytes {
    communication_bytes_with(len, stages, width, &PoolingConfig::default())
}

pub fn communication_bytes_with(
    len: usize,
    stages: usize,
    width: usize,
    pooling: &PoolingConfig,
) -> CommunicationBytes {
    let uncompressed = message_len(len, width);
    let compressed = message_len(iterated_pooled_len(len, stages, pooling), width);
    CommunicationBytes {
        uncompressed,
        compressed,
        ratio: uncompressed as f64 / compressed as f64,
    }
}

/// Linear bandwidth + propagation model of the device↔cloud link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Round-trip time in seconds.
    pub rtt: f64,
    pub per_message_overhead: usize,
}

impl Default for ChannelModel {
    /// Roughly a 10 Mbit/s uplink with 50 ms round trip and TCP/IP framing.
    fn default() -> Self {
        Self {
            bandwidth: 1.25e6,
            rtt: 0.05,
            per_message_overhead: 40,
        }
    }
}

impl ChannelModel {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err("channel.bandwidth must be a positive finite number".into());
        }
        if !(self.rtt >= 0.0) || !self.rtt.is_finite() {
            return Err("channel.rtt must be a non-negative finite number".into());
        }
        Ok(())
    }

    /// Serialization term `(len + overhead)/bandwidth` in seconds.
    pub fn transmission_time(&self, message_len: usize) -> f64 {
        (message_len + self.per_message_overhead) as f64 / self.bandwidth
    }
}

/// One-way latency in seconds: `rtt/2 + (len + overhead)/bandwidth`.
pub fn channel_transfer(message_len: usize, channel: &ChannelModel) -> f64 {
    channel.rtt / 2.0 + channel.transmission_time(message_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(encode_message(&t).unwrap().len(), 46);
        let z = encode_message(&Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(&z[22..], &[0, 0, 0, 0]);
    }

    #[test]
    fn rejects_non_matrix() {
        let t = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(encode_message(&t), Err(WireError::NotMatrix { .. })));
    }

    #[test]
    fn header_errors_name_field() {
        let good = encode_message(&Tensor::ones(&[2, 2])).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_message(&bad), Err(WireError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(decode_message(&bad), Err(WireError::Version { found: 2 }));
        let mut bad = good.clone();
        bad[5] = 7;
        assert_eq!(decode_message(&bad), Err(WireError::Dtype { found: 7 }));
        let mut bad = good.clone();
        bad[14] = 15;
        assert!(matches!(
            decode_message(&bad),
            Err(WireError::PayloadMismatch { .. })
        ));
        let err = decode_message(&good[..good.len() - 1]).unwrap_err();
        assert!(matches!(
            err,
            WireError::Truncated {
                field: "payload",
                offset: 22,
                needed: 16,
                available: 15
            }
        ));
        let err = decode_message(&good[..10]).unwrap_err();
        assert!(matches!(
            err,
            WireError::Truncated {
                field: "cols",
                offset: 10,
                ..
            }
        ));
        assert_eq!(err.offset(), 10);
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_message(&long),
            Err(WireError::TrailingBytes { offset: 38, extra: 1 })
        ));
        assert!(matches!(
            decode_message(b"DV"),
            Err(WireError::Truncated { field: "magic", .. })
        ));
        assert!(matches!(decode_message(b"XV"), Err(WireError::BadMagic { .. })));
    }

    #[test]
    fn communication_examples() {
        let c = communication_bytes(64, 0, 32);
        assert_eq!(c.uncompressed, c.compressed);
        assert_eq!(c.ratio, 1.0);
        let c = communication_bytes(64, 2, 32);
        assert_eq!(c.uncompressed - HEADER_LEN, 8192);
        assert_eq!(c.compressed - HEADER_LEN, 2048);
        assert!((c.ratio - 8214.0 / 2070.0).abs() < 1e-12);
        assert!((c.ratio - 3.97).abs() < 0.005);
        for t in (2..100).step_by(2) {
            let c = communication_bytes(t, 1, 16);
            assert_eq!(2 * (c.compressed - HEADER_LEN), c.uncompressed - HEADER_LEN);
        }
    }

    #[test]
    fn channel_examples() {
        let c = ChannelModel {
            bandwidth: 1e6,
            rtt: 0.0,
            per_message_overhead: 0,
        };
        assert_eq!(channel_transfer(1_000_000, &c), 1.0);
        let c = ChannelModel {
            bandwidth: 1e6,
            rtt: 0.2,
            per_message_overhead: 0,
        };
        assert_eq!(channel_transfer(0, &c), 0.1);
        let slow = ChannelModel {
            bandwidth: 1000.0,
            rtt: 0.3,
            per_message_overhead: 10,
        };
        let fast = ChannelModel {
            bandwidth: 2000.0,
            ..slow
        };
        assert_eq!(slow.transmission_time(990), 2.0 * fast.transmission_time(990));
        assert_eq!(channel_transfer(990, &slow), 0.15 + slow.transmission_time(990));
        assert!(ChannelModel {
            bandwidth: 0.0,
            ..slow
        }
        .validate()
        .is_err());
        assert!(ChannelModel { rtt: -1.0, ..slow }.validate().is_err());
    }
}
