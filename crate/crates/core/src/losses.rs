//! Segmentation, contrastive and text-alignment losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contrastive: f64,
    pub align: f64,
    pub temperature: f64,
    /// L2-normalise features before contrastive dot products.
    pub normalize: bool,
    /// Upper bound on sampled positive pairs per class and episode.
    pub max_pairs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 0.01,
            align: 0.02,
            temperature: 0.5,
            normalize: true,
            max_pairs: 64,
        }
    }
}

/// `−(1/M)·Σ log probs[j, labels[j]]`.
pub fn seg_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let n = g.value(probs).cols();
    if let Some(&l) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::InvalidArgument(format!("label {l} out of range for {n} classes")));
    }
    let picked = g.pick(probs, labels)?;
    let logp = g.log(picked)?;
    let mean = g.mean(logp)?;
    g.scale(mean, -1.0)
}

#[derive(Clone, Copy, Debug)]
pub struct Contrastive {
    pub loss: Var,
    /// True when no row had a negative, so the loss is identically zero.
    pub degenerate: bool,
}

/// Symmetric InfoNCE over positive pairs. Row `i` of `support` and row `i` of
/// `query` form a positive pair of class `pair_labels[i]`; every other pair of
/// a different class is a negative, and same-class pairs are left out.
pub fn con_loss(
    g: &mut Graph,
    support: Var,
    query: Var,
    pair_labels: &[usize],
    temperature: f64,
    normalize: bool,
) -> Result<Contrastive> {
    let p = pair_labels.len();
    if g.value(support).rows() != p || g.value(query).rows() != p || p == 0 {
        return Err(Error::ShapeMismatch {
            op: "con_loss",
            lhs: g.value(support).shape().to_vec(),
            rhs: g.value(query).shape().to_vec(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    let (s, q) = if normalize {
        (g.l2_normalize_rows(support)?, g.l2_normalize_rows(query)?)
    } else {
        (support, query)
    };
    let sim = g.matmul_nt(s, q)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let mask: Vec<bool> = (0..p * p)
        .map(|k| {
            let (i, j) = (k / p, k % p);
            i == j || pair_labels[i] != pair_labels[j]
        })
        .collect();
    let degenerate = mask.iter().filter(|&&m| m).count() == p;
    let diag: Vec<usize> = (0..p).collect();
    let rows = g.cross_entropy(logits, &diag, Some(mask.clone()))?;
    let lt = g.transpose(logits)?;
    let cols = g.cross_entropy(lt, &diag, Some(mask))?;
    let both = g.add(rows, cols)?;
    Ok(Contrastive {
        loss: g.scale(both, 0.5)?,
        degenerate,
    })
}

/// Cross-entropy classifying each foreground prototype against all
/// foreground text embeddings: `logits[c, b] = (protos[c]·W)·text[b]`,
/// target `c`.
pub fn align_loss(g: &mut Graph, protos: Var, text: Var, w: Var) -> Result<Var> {
    let n = g.value(protos).rows();
    if n == 0 {
        return Err(Error::InvalidArgument("align_loss needs at least one class".into()));
    }
    let mapped = g.matmul(protos, w)?;
    let logits = g.matmul_nt(mapped, text)?;
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets, None)
}

pub fn total_loss(g: &mut Graph, seg: Var, con: Option<Var>, align: Option<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = seg;
    for (term, weight) in [(con, w.contrastive), (align, w.align)] {
        if let Some(t) = term {
            if weight != 0.0 {
                let s = g.scale(t, weight)?;
                total = g.add(total, s)?;
            }
        }
    }
    Ok(total)
}
