//! Relative-position cross-attention decoder: sinusoidal encodings of latent
//! distance and angle between query features and prototypes, the cross
//! attention that consumes them, the stacked decoder block, and cosine
//! prediction.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_cosine, pairwise_euclidean, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::language_guidance::fuse_prototypes;
use crate::params::Bound;
use crate::prototypes::class_average;
use crate::register_attention::{register_attention, AttentionParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeEncodingConfig {
    pub gamma: f64,
    /// Multiplier applied to Euclidean distance before encoding.
    pub euclid_scale: f64,
    /// Multiplier applied to cosine similarity before encoding.
    pub cosine_scale: f64,
    pub use_euclid: bool,
    pub use_cosine: bool,
}

impl Default for RelativeEncodingConfig {
    fn default() -> Self {
        Self {
            gamma: 10_000.0,
            euclid_scale: 1.0,
            cosine_scale: PI,
            use_euclid: true,
            use_cosine: true,
        }
    }
}

/// `[sin(l/γ^(0/D)), cos(l/γ^(0/D)), …, sin(l/γ^((D−2)/D)), cos(l/γ^((D−2)/D))]`.
pub fn sin_emb(l: f64, d: usize, gamma: f64) -> Result<Vec<f64>> {
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("sin_emb needs an even width, got {d}")));
    }
    let mut out = Vec::with_capacity(d);
    sin_emb_into(l, d, gamma, &mut out);
    Ok(out)
}

fn sin_emb_into(l: f64, d: usize, gamma: f64, out: &mut Vec<f64>) {
    for i in (0..d).step_by(2) {
        let a = l / gamma.powf(i as f64 / d as f64);
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Relative encodings between `A` rows and `B` rows, each `A×B×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeEncoding {
    pub distance: Tensor,
    pub cosine: Tensor,
    pub euclid_part: Tensor,
    pub cosine_part: Tensor,
    /// `euclid_part + cosine_part`.
    pub combined: Tensor,
}

impl RelativeEncoding {
    /// Swaps the first two axes, for the prototype-side attention call.
    pub fn transposed(&self) -> Tensor {
        transpose01(&self.combined)
    }
}

fn transpose01(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (a, b, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.numel()];
    for i in 0..a {
        for j in 0..b {
            let src = (i * b + j) * d;
            let dst = (j * a + i) * d;
            out[dst..dst + d].copy_from_slice(&t.data()[src..src + d]);
        }
    }
    Tensor::new(vec![b, a, d], out).expect("transpose shape")
}

/// Distances and cosines between every query row and prototype row, encoded
/// with [`sin_emb`] and summed. Disabled components contribute zeros.
pub fn compute_relative_encoding(
    query: &Tensor,
    protos: &Tensor,
    cfg: &RelativeEncodingConfig,
) -> Result<RelativeEncoding> {
    let dist = pairwise_euclidean(query, protos)?;
    let cos = pairwise_cosine(query, protos)?;
    let (a, b, d) = (query.rows(), protos.rows(), query.cols());
    if d % 2 != 0 {
        return Err(Error::InvalidArgument(format!("relative encoding needs an even width, got {d}")));
    }
    let encode = |src: &Tensor, scale: f64, on: bool| {
        let mut v = Vec::with_capacity(a * b * d);
        for &x in src.data() {
            if on {
                sin_emb_into(scale * x, d, cfg.gamma, &mut v);
            } else {
                v.extend(std::iter::repeat_n(0.0, d));
            }
        }
        Tensor::new(vec![a, b, d], v)
    };
    let e = encode(&dist, cfg.euclid_scale, cfg.use_euclid)?;
    let c = encode(&cos, cfg.cosine_scale, cfg.use_cosine)?;
    let sum = e.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
    Ok(RelativeEncoding {
        distance: dist,
        cosine: cos,
        euclid_part: e,
        combined: Tensor::new(vec![a, b, d], sum)?,
        cosine_part: c,
    })
}

/// `q + Wo·softmax((Q·Kᵀ + rel(Q, R)) / √D)·V` with `Q = q·Wq`, `K = kv·Wk`,
/// `V = kv·Wv`, where `rel(Q, R)[a, b] = Q[a]·R[a, b]`. `R` is a constant.
pub fn relative_cross_attention(
    g: &mut Graph,
    p: &Bound,
    a: &AttentionParams,
    q_tokens: Var,
    kv_tokens: Var,
    rel: Option<&Tensor>,
) -> Result<Var> {
    let q = g.matmul(q_tokens, p.var(a.wq))?;
    let k = g.matmul(kv_tokens, p.var(a.wk))?;
    let v = g.matmul(kv_tokens, p.var(a.wv))?;
    let mut logits = g.matmul_nt(q, k)?;
    if let Some(r) = rel {
        let extra = g.relative_logits(q, r.clone())?;
        logits = g.add(logits, extra)?;
    }
    let logits = g.scale(logits, 1.0 / (a.d as f64).sqrt())?;
    let w = g.softmax_rows(logits)?;
    let mixed = g.matmul(w, v)?;
    let out = g.matmul(mixed, p.var(a.wo))?;
    g.add(q_tokens, out)
}

/// Per-block weights: register attention for each stream and one cross
/// attention per direction.
#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub query_attention: AttentionParams,
    pub proto_attention: AttentionParams,
    pub query_cross: AttentionParams,
    pub proto_cross: AttentionParams,
}

/// Component switches for the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderSwitches {
    pub register_attention: bool,
    pub registers: bool,
    pub prototype_tokens: bool,
    pub relative_encoding: bool,
    /// Replace every register-attention stream output by its token mean.
    pub low_pass: bool,
}

impl Default for DecoderSwitches {
    fn default() -> Self {
        Self {
            register_attention: true,
            registers: true,
            prototype_tokens: true,
            relative_encoding: true,
            low_pass: false,
        }
    }
}

/// Everything that flows from one decoder block to the next.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub query: Var,
    pub multi_proto: Var,
    pub query_registers: Option<Var>,
    pub proto_registers: Option<Var>,
    pub proto_tokens: Var,
}

/// Per-episode inputs shared by every block.
#[derive(Clone, Debug)]
pub struct DecoderContext<'a> {
    pub multi_proto_labels: &'a [usize],
    pub n_classes: usize,
    pub raw: Option<Var>,
    pub text: Option<Var>,
    pub weights: [f64; 4],
    /// Use `raw` as the fused prototype instead of the weighted blend.
    pub raw_only: bool,
    pub encoding: &'a RelativeEncodingConfig,
}

/// Intermediate values of one block, kept for diagnostics and tests.
#[derive(Clone, Debug)]
pub struct BlockTrace {
    pub refined_query: Var,
    pub token_protos: Var,
    pub dynamic_protos: Var,
    pub fused: Var,
    pub encoding: Option<RelativeEncoding>,
}

fn broadcast_mean(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).rows();
    let m = g.mean_rows(x)?;
    g.gather_rows(m, &vec![0; n])
}

pub fn decoder_block(
    g: &mut Graph,
    p: &Bound,
    params: &DecoderBlockParams,
    sw: &DecoderSwitches,
    ctx: &DecoderContext,
    state: &DecoderState,
) -> Result<(DecoderState, BlockTrace)> {
    let n_tok = g.value(state.proto_tokens).rows();
    if n_tok != ctx.n_classes {
        return Err(Error::ShapeMismatch {
            op: "decoder_block",
            lhs: g.value(state.proto_tokens).shape().to_vec(),
            rhs: vec![ctx.n_classes, g.value(state.proto_tokens).cols()],
        });
    }
    let tokens_in = sw.prototype_tokens.then_some(state.proto_tokens);
    let (mut xq, mut xp, rq, rp, token_protos) = if sw.register_attention {
        let oq = register_attention(g, p, &params.query_attention, state.query, state.query_registers, tokens_in)?;
        let op = register_attention(g, p, &params.proto_attention, state.multi_proto, state.proto_registers, tokens_in)?;
        (oq.stream, op.stream, oq.registers, op.registers, op.proto_tokens.unwrap_or(state.proto_tokens))
    } else {
        (state.query, state.multi_proto, state.query_registers, state.proto_registers, state.proto_tokens)
    };
    if sw.low_pass {
        xq = broadcast_mean(g, xq)?;
        xp = broadcast_mean(g, xp)?;
    }

    let dynamic = class_average(g, xp, ctx.multi_proto_labels, ctx.n_classes)?;
    let fused = if ctx.raw_only {
        ctx.raw.ok_or_else(|| Error::InvalidArgument("raw prototypes required".into()))?
    } else {
        fuse_prototypes(g, [Some(token_protos), ctx.raw, Some(dynamic), ctx.text], ctx.weights)?
    };

    let encoding = if sw.relative_encoding {
        Some(compute_relative_encoding(g.value(xq), g.value(fused), ctx.encoding)?)
    } else {
        None
    };
    let rel_t = encoding.as_ref().map(RelativeEncoding::transposed);
    let query_out = relative_cross_attention(
        g,
        p,
        &params.query_cross,
        xq,
        fused,
        encoding.as_ref().map(|e| &e.combined),
    )?;
    let tokens_out = relative_cross_attention(g, p, &params.proto_cross, fused, xq, rel_t.as_ref())?;

    Ok((
        DecoderState {
            query: query_out,
            multi_proto: xp,
            query_registers: rq,
            proto_registers: rp,
            proto_tokens: tokens_out,
        },
        BlockTrace {
            refined_query: xq,
            token_protos,
            dynamic_protos: dynamic,
            fused,
            encoding,
        },
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct Prediction {
    /// `M×(N+1)` class probabilities.
    pub probs: Var,
    /// Query rows with zero norm; their rows come out uniform.
    pub zero_norm_rows: usize,
}

/// Row-wise softmax of cosine similarities between query features and prototypes.
pub fn predict(g: &mut Graph, query: Var, protos: Var) -> Result<Prediction> {
    let qv = g.value(query);
    let zero_norm_rows = (0..qv.rows()).filter(|&i| qv.row(i).iter().all(|&x| x == 0.0)).count();
    if zero_norm_rows > 0 {
        log::warn!("{zero_norm_rows} zero-norm query rows get uniform predictions");
    }
    let qn = g.l2_normalize_rows(query)?;
    let pn = g.l2_normalize_rows(protos)?;
    let logits = g.matmul_nt(qn, pn)?;
    Ok(Prediction {
        probs: g.softmax_rows(logits)?,
        zero_norm_rows,
    })
}

/// Argmax per row, lowest class on ties.
pub fn hard_labels(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::params::ParamStore;
    use crate::rng::{gaussian_tensor, stream};

    #[test]
    fn sin_emb_examples() {
        assert_eq!(sin_emb(0.0, 6, 10_000.0).unwrap(), vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let v = sin_emb(1.0, 4, 10_000.0).unwrap();
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in v.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((v[0] - 0.84147).abs() < 1e-5 && (v[3] - 0.99995).abs() < 1e-5);
        assert!(sin_emb(1.0, 5, 10_000.0).is_err());
    }

    #[test]
    fn sin_emb_matches_direct_evaluation() {
        let mut rng = stream(3);
        for _ in 0..50 {
            let l = 20.0 * (crate::rng::gaussian(&mut rng));
            let v = sin_emb(l, 64, 10_000.0).unwrap();
            for i in 0..32 {
                let w = 1.0 / 10_000f64.powf(2.0 * i as f64 / 64.0);
                assert!((v[2 * i] - (l * w).sin()).abs() < 1e-12);
                assert!((v[2 * i + 1] - (l * w).cos()).abs() < 1e-12);
                assert!(v[2 * i].abs() <= 1.0 && v[2 * i + 1].abs() <= 1.0);
            }
        }
    }

    #[test]
    fn identical_pair_encoding() {
        let cfg = RelativeEncodingConfig::default();
        let x = gaussian_tensor(&mut stream(1), &[3, 8], 1.0);
        let r = compute_relative_encoding(&x, &x, &cfg).unwrap();
        let want: Vec<f64> = sin_emb(0.0, 8, cfg.gamma)
            .unwrap()
            .iter()
            .zip(sin_emb(cfg.cosine_scale, 8, cfg.gamma).unwrap())
            .map(|(a, b)| a + b)
            .collect();
        for i in 0..3 {
            assert!(r.distance.get2(i, i).abs() < 1e-12);
            assert!((r.cosine.get2(i, i) - 1.0).abs() < 1e-12);
            let off = (i * 3 + i) * 8;
            for (a, b) in r.combined.data()[off..off + 8].iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthogonal_pair_encoding() {
        let cfg = RelativeEncodingConfig::default();
        let q = Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]).unwrap();
        let p = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let r = compute_relative_encoding(&q, &p, &cfg).unwrap();
        let e = sin_emb(2f64.sqrt(), 4, cfg.gamma).unwrap();
        let c = sin_emb(0.0, 4, cfg.gamma).unwrap();
        for k in 0..4 {
            assert!((r.combined.data()[k] - e[k] - c[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn distances_match_direct_loops() {
        let q = gaussian_tensor(&mut stream(4), &[8, 6], 1.0);
        let p = gaussian_tensor(&mut stream(5), &[3, 6], 1.0);
        let r = compute_relative_encoding(&q, &p, &RelativeEncodingConfig::default()).unwrap();
        for i in 0..8 {
            for j in 0..3 {
                let (mut dd, mut dot, mut nq, mut np) = (0.0, 0.0, 0.0, 0.0);
                for k in 0..6 {
                    let (a, b) = (q.get2(i, k), p.get2(j, k));
                    dd += (a - b) * (a - b);
                    dot += a * b;
                    nq += a * a;
                    np += b * b;
                }
                assert!((r.distance.get2(i, j) - dd.sqrt()).abs() < 1e-12);
                assert!((r.cosine.get2(i, j) - dot / (nq.sqrt() * np.sqrt())).abs() < 1e-12);
            }
        }
        assert!(r.combined.data().iter().all(|v| v.abs() <= 2.0));
        assert!(r.euclid_part.data().iter().chain(r.cosine_part.data()).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_vector_has_zero_cosine() {
        let q = Tensor::zeros(&[1, 4]);
        let p = gaussian_tensor(&mut stream(6), &[2, 4], 1.0);
        let r = compute_relative_encoding(&q, &p, &RelativeEncodingConfig::default()).unwrap();
        assert_eq!(r.cosine.data(), &[0.0, 0.0]);
    }

    fn attn(d: usize, seed: u64) -> (ParamStore, AttentionParams) {
        let mut s = ParamStore::new();
        let a = AttentionParams::new(&mut s, "cross", d, &mut stream(seed));
        (s, a)
    }

    fn cra_value(s: &ParamStore, a: &AttentionParams, q: &Tensor, kv: &Tensor, r: Option<&Tensor>) -> Tensor {
        let mut g = Graph::new();
        let p = s.bind(&mut g, false);
        let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
        let y = relative_cross_attention(&mut g, &p, a, qv, kvv, r).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_key_ignores_encoding() {
        let (s, a) = attn(4, 1);
        let q = gaussian_tensor(&mut stream(2), &[3, 4], 1.0);
        let kv = gaussian_tensor(&mut stream(3), &[1, 4], 1.0);
        let r = gaussian_tensor(&mut stream(4), &[3, 1, 4], 1.0);
        let with = cra_value(&s, &a, &q, &kv, Some(&r));
        let v = crate::autodiff::matmul(&crate::autodiff::matmul(&kv, s.get(a.wv)).unwrap(), s.get(a.wo)).unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert!((with.get2(i, c) - q.get2(i, c) - v.get2(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_encoding_is_plain_cross_attention() {
        let d = 4;
        let (s, a) = attn(d, 5);
        let q = gaussian_tensor(&mut stream(6), &[5, d], 1.0);
        let kv = gaussian_tensor(&mut stream(7), &[3, d], 1.0);
        let zero = Tensor::zeros(&[5, 3, d]);
        let got = cra_value(&s, &a, &q, &kv, Some(&zero));
        assert_eq!(got, cra_value(&s, &a, &q, &kv, None));
        let proj = |w: &Tensor, v: &[f64]| -> Vec<f64> { (0..d).map(|c| (0..d).map(|i| v[i] * w.get2(i, c)).sum()).collect() };
        for i in 0..5 {
            let qi = proj(s.get(a.wq), q.row(i));
            let logits: Vec<f64> = (0..3)
                .map(|j| {
                    let kj = proj(s.get(a.wk), kv.row(j));
                    (0..d).map(|c| qi[c] * kj[c]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut mixed = vec![0.0; d];
            for j in 0..3 {
                let vj = proj(s.get(a.wv), kv.row(j));
                (0..d).for_each(|c| mixed[c] += logits[j].exp() / z * vj[c]);
            }
            let o = proj(s.get(a.wo), &mixed);
            for c in 0..d {
                assert!((got.get2(i, c) - q.get2(i, c) - o[c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn encoding_shift_along_keys_cancels() {
        // Adding the same vector to R[a, b] for every b adds a per-row
        // constant to the logits, which softmax ignores.
        let (s, a) = attn(4, 8);
        let q = gaussian_tensor(&mut stream(9), &[3, 4], 1.0);
        let kv = gaussian_tensor(&mut stream(10), &[5, 4], 1.0);
        let r = gaussian_tensor(&mut stream(11), &[3, 5, 4], 1.0);
        let shift = gaussian_tensor(&mut stream(12), &[3, 4], 1.0);
        let mut r2 = r.clone();
        for i in 0..3 {
            for j in 0..5 {
                for c in 0..4 {
                    r2.data_mut()[(i * 5 + j) * 4 + c] += shift.get2(i, c);
                }
            }
        }
        let a1 = cra_value(&s, &a, &q, &kv, Some(&r));
        let a2 = cra_value(&s, &a, &q, &kv, Some(&r2));
        assert!(a1.max_abs_diff(&a2) < 1e-12);
    }

    #[test]
    fn cross_attention_gradients_match_finite_differences() {
        for seed in 0..20 {
            let (s, a) = attn(4, seed);
            let q = gaussian_tensor(&mut stream(100 + seed), &[5, 4], 1.0);
            let kv = gaussian_tensor(&mut stream(200 + seed), &[3, 4], 1.0);
            let r = gaussian_tensor(&mut stream(300 + seed), &[5, 3, 4], 1.0);
            let head = gaussian_tensor(&mut stream(400 + seed), &[5, 4], 1.0);
            let loss = |g: &mut Graph, y: Var| -> Result<Var> {
                let h = g.constant(head.clone());
                let z = g.mul(y, h)?;
                g.sum(z)
            };
            let eq = finite_diff_check(
                |g, qv| {
                    let p = s.bind(g, false);
                    let kvv = g.constant(kv.clone());
                    let y = relative_cross_attention(g, &p, &a, qv, kvv, Some(&r))?;
                    loss(g, y)
                },
                &q,
                1e-6,
            )
            .unwrap();
            let ekv = finite_diff_check(
                |g, kvv| {
                    let p = s.bind(g, false);
                    let qv = g.constant(q.clone());
                    let y = relative_cross_attention(g, &p, &a, qv, kvv, Some(&r))?;
                    loss(g, y)
                },
                &kv,
                1e-6,
            )
            .unwrap();
            let ew = finite_diff_check(
                |g, w| {
                    let mut p = s.bind(g, false);
                    p.replace(a.wk, w);
                    let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
                    let y = relative_cross_attention(g, &p, &a, qv, kvv, Some(&r))?;
                    loss(g, y)
                },
                s.get(a.wk),
                1e-6,
            )
            .unwrap();
            assert!(eq < 1e-4 && ekv < 1e-4 && ew < 1e-4, "seed {seed}: {eq} {ekv} {ew}");
        }
    }

    #[test]
    fn prediction_examples() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![0.0, 2.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let p = g.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
        let pr = predict(&mut g, q, p).unwrap();
        assert_eq!(hard_labels(g.value(pr.probs))[0], 1);
        assert_eq!(pr.zero_norm_rows, 1);
        let row = g.value(pr.probs).row(1);
        assert!(row.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let same = g.constant(Tensor::from_rows(&vec![vec![0.3, -0.2, 0.9]; 3]).unwrap());
        let pr = predict(&mut g, q, same).unwrap();
        assert!(g.value(pr.probs).row(0).iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    proptest::proptest! {
        #[test]
        fn prediction_rows_stochastic_and_scale_invariant(seed in 0u64..1000, s in 0.01f64..100.0) {
            let q = gaussian_tensor(&mut stream(seed), &[6, 4], 1.0);
            let p = gaussian_tensor(&mut stream(seed + 1), &[3, 4], 1.0);
            let mut q2 = q.clone();
            q2.row_mut(2).iter_mut().for_each(|v| *v *= s);
            let mut p2 = p.clone();
            p2.row_mut(1).iter_mut().for_each(|v| *v *= s);
            let mut g = Graph::new();
            let (qv, pv, qv2, pv2) = (g.constant(q), g.constant(p), g.constant(q2), g.constant(p2));
            let a = predict(&mut g, qv, pv).unwrap().probs;
            let b = predict(&mut g, qv2, pv2).unwrap().probs;
            for i in 0..6 {
                let sum: f64 = g.value(a).row(i).iter().sum();
                proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            }
            proptest::prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
            proptest::prop_assert_eq!(hard_labels(g.value(a)), hard_labels(g.value(b)));
        }

        #[test]
        fn encoding_entries_bounded(seed in 0u64..1000) {
            let q = gaussian_tensor(&mut stream(seed), &[5, 6], 3.0);
            let p = gaussian_tensor(&mut stream(seed + 7), &[3, 6], 3.0);
            let r = compute_relative_encoding(&q, &p, &RelativeEncodingConfig::default()).unwrap();
            proptest::prop_assert!(r.combined.data().iter().all(|v| v.abs() <= 2.0));
        }
    }
}

#[cfg(test)]
mod block_tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::language_guidance::fuse_prototypes;
    use crate::params::ParamStore;
    use crate::register_attention::register_attention;
    use crate::rng::{gaussian_tensor, stream};

    struct Toy {
        store: ParamStore,
        params: DecoderBlockParams,
        query: Tensor,
        multi: Tensor,
        labels: Vec<usize>,
        tokens: Tensor,
        regs: (Tensor, Tensor),
        raw: Tensor,
        text: Tensor,
    }

    fn toy(m: usize, d: usize, seed: u64) -> Toy {
        let mut rng = stream(seed);
        let mut store = ParamStore::new();
        let mut att = |name: &str| AttentionParams::new(&mut store, name, d, &mut rng);
        let params = DecoderBlockParams {
            query_attention: att("qa"),
            proto_attention: att("pa"),
            query_cross: att("qc"),
            proto_cross: att("pc"),
        };
        let mut t = |shape: &[usize]| gaussian_tensor(&mut rng, shape, 1.0);
        Toy {
            query: t(&[m, d]),
            multi: t(&[6, d]),
            labels: vec![0, 0, 1, 1, 2, 2],
            tokens: t(&[3, d]),
            regs: (t(&[2, d]), t(&[2, d])),
            raw: t(&[3, d]),
            text: t(&[3, d]),
            store,
            params,
        }
    }

    const WEIGHTS: [f64; 4] = [0.3, 0.2, 0.4, 0.5];

    fn run(toy: &Toy, g: &mut Graph, p: &Bound, sw: &DecoderSwitches, query: Var) -> (DecoderState, BlockTrace) {
        let enc = RelativeEncodingConfig::default();
        let ctx = DecoderContext {
            multi_proto_labels: &toy.labels,
            n_classes: 3,
            raw: Some(g.constant(toy.raw.clone())),
            text: Some(g.constant(toy.text.clone())),
            weights: WEIGHTS,
            raw_only: false,
            encoding: &enc,
        };
        let state = DecoderState {
            query,
            multi_proto: g.constant(toy.multi.clone()),
            query_registers: Some(g.constant(toy.regs.0.clone())),
            proto_registers: Some(g.constant(toy.regs.1.clone())),
            proto_tokens: g.constant(toy.tokens.clone()),
        };
        decoder_block(g, p, &toy.params, sw, &ctx, &state).unwrap()
    }

    #[test]
    fn single_block_shapes() {
        let t = toy(16, 8, 1);
        let mut g = Graph::new();
        let p = t.store.bind(&mut g, false);
        let q = g.constant(t.query.clone());
        let (out, trace) = run(&t, &mut g, &p, &DecoderSwitches::default(), q);
        assert_eq!(g.value(out.query).shape(), &[16, 8]);
        assert_eq!(g.value(out.proto_tokens).shape(), &[3, 8]);
        assert_eq!(g.value(out.multi_proto).shape(), &[6, 8]);
        assert_eq!(g.value(out.query_registers.unwrap()).shape(), &[2, 8]);
        assert_eq!(trace.encoding.unwrap().combined.shape(), &[16, 3, 8]);
    }

    #[test]
    fn block_matches_scripted_composition() {
        let t = toy(4, 6, 2);
        let mut g = Graph::new();
        let p = t.store.bind(&mut g, false);
        let q = g.constant(t.query.clone());
        let (out, _) = run(&t, &mut g, &p, &DecoderSwitches::default(), q);

        let mut h = Graph::new();
        let pp = t.store.bind(&mut h, false);
        let q = h.constant(t.query.clone());
        let raw = h.constant(t.raw.clone());
        let text = h.constant(t.text.clone());
        let multi = h.constant(t.multi.clone());
        let (r0, r1) = (h.constant(t.regs.0.clone()), h.constant(t.regs.1.clone()));
        let tok = h.constant(t.tokens.clone());
        let oq = register_attention(&mut h, &pp, &t.params.query_attention, q, Some(r0), Some(tok)).unwrap();
        let op = register_attention(&mut h, &pp, &t.params.proto_attention, multi, Some(r1), Some(tok)).unwrap();
        let dynamic = class_average(&mut h, op.stream, &t.labels, 3).unwrap();
        let fused =
            fuse_prototypes(&mut h, [op.proto_tokens, Some(raw), Some(dynamic), Some(text)], WEIGHTS).unwrap();
        let enc = compute_relative_encoding(h.value(oq.stream), h.value(fused), &RelativeEncodingConfig::default())
            .unwrap();
        let qo = relative_cross_attention(&mut h, &pp, &t.params.query_cross, oq.stream, fused, Some(&enc.combined))
            .unwrap();
        let rt = enc.transposed();
        let po = relative_cross_attention(&mut h, &pp, &t.params.proto_cross, fused, oq.stream, Some(&rt)).unwrap();

        assert_eq!(g.value(out.query).data(), h.value(qo).data());
        assert_eq!(g.value(out.proto_tokens).data(), h.value(po).data());
        assert_eq!(g.value(out.multi_proto).data(), h.value(op.stream).data());
    }

    fn head_loss(g: &mut Graph, s: &DecoderState, seed: u64) -> Result<Var> {
        let hq = g.constant(gaussian_tensor(&mut stream(seed), g.value(s.query).shape(), 1.0));
        let hp = g.constant(gaussian_tensor(&mut stream(seed + 1), g.value(s.proto_tokens).shape(), 1.0));
        let a = g.mul(s.query, hq)?;
        let b = g.mul(s.proto_tokens, hp)?;
        let (a, b) = (g.sum(a)?, g.sum(b)?);
        g.add(a, b)
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        for seed in 0..20 {
            let t = toy(4, 4, 10 + seed);
            let no_rel = DecoderSwitches { relative_encoding: false, ..Default::default() };
            let e_in = finite_diff_check(
                |g, q| {
                    let p = t.store.bind(g, false);
                    let (s, _) = run(&t, g, &p, &no_rel, q);
                    head_loss(g, &s, seed)
                },
                &t.query,
                1e-6,
            )
            .unwrap();
            // The encoding does not depend on cross-attention weights, so it is
            // fixed under this perturbation even when enabled.
            let e_w = finite_diff_check(
                |g, w| {
                    let mut p = t.store.bind(g, false);
                    p.replace(t.params.proto_cross.wv, w);
                    let q = g.constant(t.query.clone());
                    let (s, _) = run(&t, g, &p, &DecoderSwitches::default(), q);
                    head_loss(g, &s, seed)
                },
                t.store.get(t.params.proto_cross.wv),
                1e-6,
            )
            .unwrap();
            assert!(e_in < 1e-4 && e_w < 1e-4, "seed {seed}: {e_in} {e_w}");
        }
    }

    #[test]
    fn disabled_encoding_is_plain_cross_attention() {
        let t = toy(5, 4, 3);
        let mut g = Graph::new();
        let p = t.store.bind(&mut g, false);
        let q = g.constant(t.query.clone());
        let sw = DecoderSwitches { relative_encoding: false, ..Default::default() };
        let (out, trace) = run(&t, &mut g, &p, &sw, q);
        assert!(trace.encoding.is_none());
        let plain = relative_cross_attention(&mut g, &p, &t.params.query_cross, trace.refined_query, trace.fused, None)
            .unwrap();
        assert_eq!(g.value(out.query).data(), g.value(plain).data());
    }

    #[test]
    fn low_pass_flattens_the_query_stream() {
        let t = toy(6, 4, 4);
        let mut g = Graph::new();
        let p = t.store.bind(&mut g, false);
        let q = g.constant(t.query.clone());
        let sw = DecoderSwitches { low_pass: true, ..Default::default() };
        let (_, trace) = run(&t, &mut g, &p, &sw, q);
        let x = g.value(trace.refined_query);
        for i in 1..6 {
            assert_eq!(x.row(i), x.row(0));
        }
    }
}
