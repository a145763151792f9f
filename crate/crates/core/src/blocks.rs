//! Post-norm transformer layer: multi-head self-attention and a
//! position-wise feed-forward network, each wrapped as
//! `LayerNorm(h + sublayer(h))`.

use crate::autodiff::Var;
use crate::error::TensorError;
use crate::params::{Bound, ParamId, ParamInit};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_FFN_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn init<T: Scalar>(init: &mut ParamInit<'_, T>, prefix: &str, width: usize, eps: f64) -> Self {
        Self {
            gamma: init.ones(format!("{prefix}.gamma"), width),
            beta: init.zeros(format!("{prefix}.beta"), width),
            width,
            eps,
        }
    }

    pub fn num_scalars(&self) -> usize {
        2 * self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub width: usize,
    pub num_heads: usize,
}

impl AttentionParams {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        prefix: &str,
        width: usize,
        num_heads: usize,
    ) -> Result<Self, TensorError> {
        check_heads(width, num_heads)?;
        Ok(Self {
            w_q: init.matrix(format!("{prefix}.w_q"), width, width),
            w_k: init.matrix(format!("{prefix}.w_k"), width, width),
            w_v: init.matrix(format!("{prefix}.w_v"), width, width),
            w_o: init.matrix(format!("{prefix}.w_o"), width, width),
            width,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.num_heads
    }

    pub fn num_scalars(&self) -> usize {
        4 * self.width * self.width
    }
}

fn check_heads(width: usize, num_heads: usize) -> Result<(), TensorError> {
    if num_heads == 0 || !width.is_multiple_of(num_heads) {
        return Err(TensorError::Config {
            op: "self_attention",
            reason: format!("width {width} is not divisible by num_heads {num_heads}"),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FfnParams {
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
    pub width: usize,
    pub ratio: usize,
}

impl FfnParams {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        prefix: &str,
        width: usize,
        ratio: usize,
    ) -> Result<Self, TensorError> {
        if ratio == 0 {
            return Err(TensorError::Config {
                op: "position_wise_ffn",
                reason: "expansion ratio must be at least 1".into(),
            });
        }
        let hidden = width * ratio;
        Ok(Self {
            w_1: init.matrix(format!("{prefix}.w_1"), width, hidden),
            b_1: init.zeros(format!("{prefix}.b_1"), hidden),
            w_2: init.matrix(format!("{prefix}.w_2"), hidden, width),
            b_2: init.zeros(format!("{prefix}.b_2"), width),
            width,
            ratio,
        })
    }

    pub fn num_scalars(&self) -> usize {
        let hidden = self.width * self.ratio;
        2 * self.width * hidden + hidden + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerLayerParams {
    pub attention: AttentionParams,
    pub ffn: FfnParams,
    pub norm_1: LayerNormParams,
    pub norm_2: LayerNormParams,
}

/// Shape hyperparameters shared by every layer of a stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerShape {
    pub width: usize,
    pub num_heads: usize,
    pub ffn_ratio: usize,
    pub eps: f64,
}

impl TransformerLayerParams {
    pub fn init<T: Scalar>(
        init: &mut ParamInit<'_, T>,
        prefix: &str,
        shape: LayerShape,
    ) -> Result<Self, TensorError> {
        Ok(Self {
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

fn check_width<T: Scalar>(op: &'static str, h: &Var<'_, T>, width: usize) -> Result<(), TensorError> {
    let shape = h.shape();
    if shape.len() != 2 || shape[1] != width {
        return Err(TensorError::Shape {
            op,
            lhs: shape,
            rhs: vec![width],
        });
    }
    Ok(())
}

pub fn layer_norm<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &LayerNormParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    check_width("layer_norm", &h, p.width)?;
    h.layer_norm(w[p.gamma], w[p.beta], T::lit(p.eps))
}

/// Per-head attention weights `softmax(Q_h K_hᵀ / √d_h)` together with the
/// attention output before the head merge.
fn attention_heads<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &AttentionParams,
    w: &Bound<'t, T>,
) -> Result<(Vec<Var<'t, T>>, Vec<Var<'t, T>>), TensorError> {
    check_heads(p.width, p.num_heads)?;
    check_width("self_attention", &h, p.width)?;
    let q = h.matmul(w[p.w_q])?;
    let k = h.matmul(w[p.w_k])?;
    let v = h.matmul(w[p.w_v])?;
    let dh = p.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut weights = Vec::with_capacity(p.num_heads);
    let mut outputs = Vec::with_capacity(p.num_heads);
    for head in 0..p.num_heads {
        let start = head * dh;
        let qh = q.slice_cols(start, dh)?;
        let kh = k.slice_cols(start, dh)?;
        let vh = v.slice_cols(start, dh)?;
        let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax_rows()?;
        outputs.push(attn.matmul(vh)?);
        weights.push(attn);
    }
    Ok((weights, outputs))
}

/// Bidirectional multi-head self-attention with Q, K and V all projected
/// from `h`. Output length equals input length.
pub fn self_attention<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &AttentionParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let (_, outputs) = attention_heads(h, p, w)?;
    let merged = if outputs.len() == 1 {
        outputs[0]
    } else {
        Var::concat_cols(&outputs)?
    };
    merged.matmul(w[p.w_o])
}

/// Attention weight matrices (`T×T`), one per head.
pub fn attention_weights<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &AttentionParams,
    w: &Bound<'t, T>,
) -> Result<Vec<Tensor<T>>, TensorError> {
    let (weights, _) = attention_heads(h, p, w)?;
    Ok(weights.iter().map(Var::value).collect())
}

/// `gelu(h_i·W_1 + b_1)·W_2 + b_2` for every row independently.
pub fn position_wise_ffn<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &FfnParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    check_width("position_wise_ffn", &h, p.width)?;
    let hidden = h.matmul(w[p.w_1])?.add_row(w[p.b_1])?.gelu();
    hidden.matmul(w[p.w_2])?.add_row(w[p.b_2])
}

/// `LayerNorm(h + S-Attn(h))` followed by `LayerNorm(h + P-FFN(h))`.
pub fn transformer_layer<'t, T: Scalar>(
    h: Var<'t, T>,
    p: &TransformerLayerParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let h = attention_update(h, &p.attention, &p.norm_1, w)?;
    ffn_update(h, &p.ffn, &p.norm_2, w)
}

pub(crate) fn attention_update<'t, T: Scalar>(
    h: Var<'t, T>,
    attention: &AttentionParams,
    norm: &LayerNormParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let a = self_attention(h, attention, w)?;
    layer_norm(h.add(a)?, norm, w)
}

pub(crate) fn ffn_update<'t, T: Scalar>(
    h: Var<'t, T>,
    ffn: &FfnParams,
    norm: &LayerNormParams,
    w: &Bound<'t, T>,
) -> Result<Var<'t, T>, TensorError> {
    let f = position_wise_ffn(h, ffn, w)?;
    layer_norm(h.add(f)?, norm, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::ParamStore;
    use crate::rng::seeded;

    fn shape(width: usize, heads: usize) -> LayerShape {
        LayerShape {
            width,
            num_heads: heads,
            ffn_ratio: 4,
            eps: DEFAULT_LAYER_NORM_EPS,
        }
    }

    fn layer(seed: u64, s: LayerShape) -> (ParamStore<f32>, TransformerLayerParams) {
        let mut store = ParamStore::new();
        let mut rng = seeded(seed);
        let p = TransformerLayerParams::init(
            &mut ParamInit {
                store: &mut store,
                rng: &mut rng,
            },
            "layer",
            s,
        )
        .unwrap();
        (store, p)
    }

    fn random_h(seed: u64, t: usize, d: usize) -> Tensor<f32> {
        Tensor::uniform(&[t, d], 1.0, &mut seeded(seed))
    }

    #[test]
    fn layer_norm_examples() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(0);
        let mut p = LayerNormParams::init(
            &mut ParamInit {
                store: &mut store,
                rng: &mut rng,
            },
            "ln",
            3,
            0.0,
        );
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap());
        let y = layer_norm(h, &p, &w).unwrap().value();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((y.data()[0] + expected).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - expected).abs() < 1e-12);
        assert!((expected - 1.224745).abs() < 1e-6);

        p.eps = DEFAULT_LAYER_NORM_EPS;
        let h = tape.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0]]).unwrap());
        assert_eq!(layer_norm(h, &p, &w).unwrap().value().data(), &[0.0; 3]);

        *store.get_mut(p.gamma) = Tensor::zeros(&[1, 3]);
        *store.get_mut(p.beta) = Tensor::from_rows(&[&[0.1, 0.2, 0.3]]).unwrap();
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(Tensor::from_rows(&[&[4.0, -1.0, 9.0]]).unwrap());
        assert_eq!(layer_norm(h, &p, &w).unwrap().value().data(), &[0.1, 0.2, 0.3]);
    }

    #[test]
    fn layer_norm_width_mismatch() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(0);
        let p = LayerNormParams::init(
            &mut ParamInit {
                store: &mut store,
                rng: &mut rng,
            },
            "ln",
            4,
            1e-5,
        );
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(layer_norm(h, &p, &w), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let (store, p) = layer(1, shape(8, 2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(random_h(2, 5, 8));
        let y = layer_norm(h, &p.norm_1, &w).unwrap().value();
        for r in 0..5 {
            let row = y.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(0);
        let err = AttentionParams::init(
            &mut ParamInit {
                store: &mut store,
                rng: &mut rng,
            },
            "a",
            6,
            4,
        );
        assert!(matches!(err, Err(TensorError::Config { .. })));
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let (store, p) = layer(3, shape(8, 2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let row = [0.3f32, -0.2, 0.9, 0.1, -0.5, 0.4, 0.0, 0.7];
        let h = tape.constant(Tensor::from_rows(&[&row, &row, &row, &row]).unwrap());
        for a in attention_weights(h, &p.attention, &w).unwrap() {
            for v in a.data() {
                assert!((v - 0.25).abs() < 1e-6);
            }
        }
        let out = self_attention(h, &p.attention, &w).unwrap().value();
        for r in 1..4 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let (store, p) = layer(4, shape(8, 2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(random_h(5, 1, 8));
        for a in attention_weights(h, &p.attention, &w).unwrap() {
            assert_eq!(a.data(), &[1.0]);
        }
        let out = self_attention(h, &p.attention, &w).unwrap().value();
        let expected = h
            .matmul(w[p.attention.w_v])
            .unwrap()
            .matmul(w[p.attention.w_o])
            .unwrap()
            .value();
        assert!(out.max_abs_diff(&expected) < 1e-6);
    }

    /// Plain nested-loop attention in f64.
    fn loop_attention(
        h: &Tensor<f32>,
        wq: &Tensor<f32>,
        wk: &Tensor<f32>,
        wv: &Tensor<f32>,
        wo: &Tensor<f32>,
        heads: usize,
    ) -> Vec<f64> {
        let (t, d) = (h.rows(), h.cols());
        let dh = d / heads;
        let proj = |w: &Tensor<f32>| {
            let mut out = vec![0.0f64; t * d];
            for i in 0..t {
                for j in 0..d {
                    for k in 0..d {
                        out[i * d + j] += h.get(i, k) as f64 * w.get(k, j) as f64;
                    }
                }
            }
            out
        };
        let (q, k, v) = (proj(wq), proj(wk), proj(wv));
        let mut merged = vec![0.0f64; t * d];
        for head in 0..heads {
            for i in 0..t {
                let mut logits = vec![0.0f64; t];
                for j in 0..t {
                    for c in head * dh..(head + 1) * dh {
                        logits[j] += q[i * d + c] * k[j * d + c];
                    }
                    logits[j] /= (dh as f64).sqrt();
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..t {
                    let a = (logits[j] - m).exp() / z;
                    for c in head * dh..(head + 1) * dh {
                        merged[i * d + c] += a * v[j * d + c];
                    }
                }
            }
        }
        let mut out = vec![0.0f64; t * d];
        for i in 0..t {
            for j in 0..d {
                for k in 0..d {
                    out[i * d + j] += merged[i * d + k] * wo.get(k, j) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        for (heads, d, t) in [(1, 2, 2), (2, 8, 5), (4, 16, 3)] {
            let (store, p) = layer(10 + d as u64, shape(d, heads));
            let tape = Tape::new();
            let w = store.bind(&tape, false);
            let hv = random_h(20 + t as u64, t, d);
            let h = tape.constant(hv.clone());
            let out = self_attention(h, &p.attention, &w).unwrap().value();
            let a = &p.attention;
            let oracle = loop_attention(
                &hv,
                store.get(a.w_q),
                store.get(a.w_k),
                store.get(a.w_v),
                store.get(a.w_o),
                heads,
            );
            for (x, y) in out.data().iter().zip(&oracle) {
                assert!((*x as f64 - y).abs() < 1e-5, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let (store, p) = layer(6, shape(8, 2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let hv = random_h(7, 6, 8);
        let perm = [3, 0, 5, 1, 4, 2];
        let out = self_attention(tape.constant(hv.clone()), &p.attention, &w)
            .unwrap()
            .value();
        let out_p = self_attention(tape.constant(hv.permute_rows(&perm)), &p.attention, &w)
            .unwrap()
            .value();
        assert!(out.permute_rows(&perm).max_abs_diff(&out_p) < 1e-5);
    }

    #[test]
    fn ffn_zero_weights_give_bias() {
        let (mut store, p) = layer(8, shape(4, 1));
        *store.get_mut(p.ffn.w_1) = Tensor::zeros(&[4, 16]);
        *store.get_mut(p.ffn.w_2) = Tensor::zeros(&[16, 4]);
        *store.get_mut(p.ffn.b_2) = Tensor::from_rows(&[&[1.0, -2.0, 3.0, 0.5]]).unwrap();
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let out = position_wise_ffn(tape.constant(random_h(9, 3, 4)), &p.ffn, &w)
            .unwrap()
            .value();
        for r in 0..3 {
            assert_eq!(out.row(r), &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn ffn_matches_row_loop_and_is_position_wise() {
        let (mut store, p) = layer(11, shape(8, 2));
        *store.get_mut(p.ffn.b_1) = Tensor::uniform(&[1, 32], 0.5, &mut seeded(1));
        *store.get_mut(p.ffn.b_2) = Tensor::uniform(&[1, 8], 0.5, &mut seeded(2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let hv = random_h(12, 5, 8);
        let out = position_wise_ffn(tape.constant(hv.clone()), &p.ffn, &w)
            .unwrap()
            .value();

        let (w1, b1, w2, b2) = (
            store.get(p.ffn.w_1),
            store.get(p.ffn.b_1),
            store.get(p.ffn.w_2),
            store.get(p.ffn.b_2),
        );
        let gelu = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        for r in 0..5 {
            let mut hidden = [0.0f64; 32];
            for (j, hj) in hidden.iter_mut().enumerate() {
                let mut s = b1.data()[j] as f64;
                for k in 0..8 {
                    s += hv.get(r, k) as f64 * w1.get(k, j) as f64;
                }
                *hj = gelu(s);
            }
            for c in 0..8 {
                let mut s = b2.data()[c] as f64;
                for (j, hj) in hidden.iter().enumerate() {
                    s += hj * w2.get(j, c) as f64;
                }
                assert!((out.get(r, c) as f64 - s).abs() < 1e-5);
            }
        }

        let perm = [4, 2, 0, 1, 3];
        let out_p = position_wise_ffn(tape.constant(hv.permute_rows(&perm)), &p.ffn, &w)
            .unwrap()
            .value();
        assert!(out.permute_rows(&perm).bit_eq(&out_p));
    }

    #[test]
    fn transformer_layer_preserves_shape_and_composes() {
        let (store, p) = layer(13, shape(8, 2));
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let h = tape.constant(random_h(14, 4, 8));
        let out = transformer_layer(h, &p, &w).unwrap().value();
        assert_eq!(out.shape(), &[4, 8]);

        let a = self_attention(h, &p.attention, &w).unwrap();
        let h1 = layer_norm(h.add(a).unwrap(), &p.norm_1, &w).unwrap();
        let f = position_wise_ffn(h1, &p.ffn, &w).unwrap();
        let h2 = layer_norm(h1.add(f).unwrap(), &p.norm_2, &w).unwrap();
        assert!(out.bit_eq(&h2.value()));
    }

    #[test]
    fn zero_weights_collapse_to_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(0);
        let s = LayerShape {
            width: 4,
            num_heads: 2,
            ffn_ratio: 4,
            eps: 0.0,
        };
        let p = TransformerLayerParams::init(
            &mut ParamInit {
                store: &mut store,
                rng: &mut rng,
            },
            "l",
            s,
        )
        .unwrap();
        for id in [
            p.attention.w_q,
            p.attention.w_k,
            p.attention.w_v,
            p.attention.w_o,
            p.ffn.w_1,
            p.ffn.w_2,
        ] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let tape = Tape::new();
        let w = store.bind(&tape, false);
        let hv = Tensor::<f64>::uniform(&[3, 4], 1.0, &mut seeded(1));
        let h = tape.constant(hv);
        let out = transformer_layer(h, &p, &w).unwrap().value();
        let ln = layer_norm(h, &p.norm_1, &w).unwrap().value();
        assert!(out.max_abs_diff(&ln) < 1e-12);
    }

    #[test]
    fn per_layer_parameter_count() {
        let (store, p) = layer(0, shape(8, 2));
        assert_eq!(p.num_scalars(), 840);
        assert_eq!(store.num_scalars(), 840);
    }
}
