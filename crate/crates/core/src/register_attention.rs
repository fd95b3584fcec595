//! Single-head self-attention over `[stream ; registers ; prototype tokens]`
//! with an additive residual, after which the mean of the stream's input
//! tokens is subtracted from the stream outputs.

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::gaussian_tensor;

pub const REGISTER_INIT_STD: f64 = 0.02;
/// Output projections start this much smaller than the other three, so every
/// residual branch begins close to the identity.
pub const OUTPUT_INIT_SCALE: f64 = 0.1;

/// `D×D` query, key, value and output projections, no biases.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub d: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, module: &str, d: usize, rng: &mut impl Rng) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let mut mk = |name: &str, scale: f64, store: &mut ParamStore| {
            store.add(module, name, ParamGroup::Main, gaussian_tensor(rng, &[d, d], std * scale))
        };
        Self {
            wq: mk("wq", 1.0, store),
            wk: mk("wk", 1.0, store),
            wv: mk("wv", 1.0, store),
            wo: mk("wo", OUTPUT_INIT_SCALE, store),
            d,
        }
    }
}

/// Initial register values for the query and prototype streams.
#[derive(Clone, Debug, PartialEq)]
pub struct RegisterBank {
    pub query: Tensor,
    pub proto: Tensor,
}

pub fn init_registers(n_r: usize, d: usize, rng: &mut impl Rng) -> RegisterBank {
    RegisterBank {
        query: gaussian_tensor(rng, &[n_r, d], REGISTER_INIT_STD),
        proto: gaussian_tensor(rng, &[n_r, d], REGISTER_INIT_STD),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub stream: Var,
    pub registers: Option<Var>,
    pub proto_tokens: Option<Var>,
}

/// `softmax(X·Wq·(X·Wk)ᵀ / √D) · X·Wv · Wo` for the full sequence `x`.
pub fn self_attention(g: &mut Graph, p: &Bound, a: &AttentionParams, x: Var) -> Result<Var> {
    let q = g.matmul(x, p.var(a.wq))?;
    let k = g.matmul(x, p.var(a.wk))?;
    let v = g.matmul(x, p.var(a.wv))?;
    let logits = g.matmul_nt(q, k)?;
    let logits = g.scale(logits, 1.0 / (a.d as f64).sqrt())?;
    let w = g.softmax_rows(logits)?;
    let y = g.matmul(w, v)?;
    g.matmul(y, p.var(a.wo))
}

/// Applies the register-attention block to one stream. Registers and
/// prototype tokens are optional so either can be ablated.
pub fn register_attention(
    g: &mut Graph,
    p: &Bound,
    a: &AttentionParams,
    stream: Var,
    registers: Option<Var>,
    proto_tokens: Option<Var>,
) -> Result<AttentionOutput> {
    let (n, d) = g.value(stream).require_matrix("register_attention")?;
    if d != a.d {
        return Err(Error::ShapeMismatch {
            op: "register_attention",
            lhs: vec![n, d],
            rhs: vec![n, a.d],
        });
    }
    let mut parts = vec![stream];
    parts.extend(registers);
    parts.extend(proto_tokens);
    let sizes: Vec<usize> = parts.iter().map(|&v| g.value(v).rows()).collect();
    let seq = g.concat_rows(&parts)?;
    let attended = self_attention(g, p, a, seq)?;
    let out = g.add(seq, attended)?;

    let mean = g.mean_rows(stream)?;
    let neg_mean = g.scale(mean, -1.0)?;
    let s = g.slice_rows(out, 0, n)?;
    let stream_out = g.add_row(s, neg_mean)?;

    let mut start = n;
    let mut take = |g: &mut Graph, present: bool, idx: usize| -> Result<Option<Var>> {
        if !present {
            return Ok(None);
        }
        let end = start + sizes[idx];
        let v = g.slice_rows(out, start, end)?;
        start = end;
        Ok(Some(v))
    };
    let registers_out = take(g, registers.is_some(), 1)?;
    let proto_out = take(g, proto_tokens.is_some(), if registers.is_some() { 2 } else { 1 })?;
    Ok(AttentionOutput {
        stream: stream_out,
        registers: registers_out,
        proto_tokens: proto_out,
    })
}
