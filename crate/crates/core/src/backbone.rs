//! EdgeConv point encoder: a stack of dynamic-graph blocks whose outputs are
//! concatenated and projected to the latent width.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::gaussian_tensor;

pub const INPUT_CHANNELS: usize = 6;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_blocks: usize,
    pub k: usize,
    /// Output width of every EdgeConv block.
    pub width: usize,
    pub d_out: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            n_blocks: 3,
            k: 20,
            width: 64,
            d_out: 64,
        }
    }
}

impl BackboneConfig {
    /// Closed-form parameter count for these widths.
    pub fn param_count(&self) -> usize {
        let mut d_in = INPUT_CHANNELS;
        let mut n = 0;
        for _ in 0..self.n_blocks {
            n += 2 * d_in * self.width + self.width;
            d_in = self.width;
        }
        n + self.n_blocks * self.width * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
struct EdgeBlock {
    /// `[2·d_in, width]`; rows `0..d_in` act on `x_j`, the rest on `x_n − x_j`.
    weight: ParamId,
    bias: ParamId,
    d_in: usize,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    blocks: Vec<EdgeBlock>,
    proj_w: ParamId,
    proj_b: ParamId,
}

pub(crate) const MODULE: &str = "backbone";

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.n_blocks == 0 || cfg.k == 0 || cfg.width == 0 || cfg.d_out == 0 {
            return Err(Error::InvalidArgument(format!("degenerate backbone config {cfg:?}")));
        }
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut d_in = INPUT_CHANNELS;
        for b in 0..cfg.n_blocks {
            let fan_in = 2 * d_in;
            let w = gaussian_tensor(rng, &[fan_in, cfg.width], (2.0 / fan_in as f64).sqrt());
            blocks.push(EdgeBlock {
                weight: store.add(MODULE, &format!("edge{b}.weight"), ParamGroup::Backbone, w),
                bias: store.add(
                    MODULE,
                    &format!("edge{b}.bias"),
                    ParamGroup::Backbone,
                    Tensor::zeros(&[1, cfg.width]),
                ),
                d_in,
            });
            d_in = cfg.width;
        }
        let cat = cfg.n_blocks * cfg.width;
        let proj_w = store.add(
            MODULE,
            "proj.weight",
            ParamGroup::Backbone,
            gaussian_tensor(rng, &[cat, cfg.d_out], (1.0 / cat as f64).sqrt()),
        );
        let proj_b = store.add(MODULE, "proj.bias", ParamGroup::Backbone, Tensor::zeros(&[1, cfg.d_out]));
        Ok(Self {
            cfg,
            blocks,
            proj_w,
            proj_b,
        })
    }

    pub fn proj_weight(&self) -> ParamId {
        self.proj_w
    }

    /// `M×6` channels (xyz ⊕ rgb) to `M×d_out` features. The first block's
    /// neighbourhoods use xyz; later blocks rebuild them from the current features.
    pub fn encode(&self, g: &mut Graph, p: &Bound, channels: Var) -> Result<Var> {
        let (m, c) = g.value(channels).require_matrix("encode")?;
        if c != INPUT_CHANNELS {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![m, c],
                rhs: vec![m, INPUT_CHANNELS],
            });
        }
        let xyz = xyz_of(g.value(channels));
        let mut x = channels;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for (b, blk) in self.blocks.iter().enumerate() {
            let nbrs = if b == 0 {
                knn_graph(&xyz, self.cfg.k)?
            } else {
                knn_graph(g.value(x), self.cfg.k)?
            };
            x = edgeconv(g, p, blk, x, &nbrs, self.cfg.k)?;
            outs.push(x);
        }
        let cat = concat_cols(g, &outs)?;
        let y = g.matmul(cat, p.var(self.proj_w))?;
        g.add_row(y, p.var(self.proj_b))
    }
}

fn xyz_of(channels: &Tensor) -> Tensor {
    let m = channels.rows();
    let data = (0..m).flat_map(|i| channels.row(i)[..3].to_vec()).collect();
    Tensor::new(vec![m, 3], data).expect("xyz shape")
}

/// Column-wise concatenation, expressed through transposes so it stays on the tape.
fn concat_cols(g: &mut Graph, parts: &[Var]) -> Result<Var> {
    let ts = parts.iter().map(|&v| g.transpose(v)).collect::<Result<Vec<_>>>()?;
    let cat = g.concat_rows(&ts)?;
    g.transpose(cat)
}

/// `max_n leaky([x_j ; x_n − x_j]·W + b)`, evaluated as
/// `leaky(x_j·(W_top − W_bot) + b + max_n x_n·W_bot)`; leaky-ReLU is monotone
/// and the `x_j` term does not depend on `n`, so the two forms are equal.
fn edgeconv(g: &mut Graph, p: &Bound, blk: &EdgeBlock, x: Var, nbrs: &[usize], k: usize) -> Result<Var> {
    let w = p.var(blk.weight);
    let w_top = g.slice_rows(w, 0, blk.d_in)?;
    let w_bot = g.slice_rows(w, blk.d_in, 2 * blk.d_in)?;
    let w_self = g.sub(w_top, w_bot)?;
    let own = g.matmul(x, w_self)?;
    let msg = g.matmul(x, w_bot)?;
    let pooled = g.neighbor_max(msg, nbrs, k)?;
    let pre = g.add(own, pooled)?;
    let pre = g.add_row(pre, p.var(blk.bias))?;
    g.leaky_relu(pre, SLOPE)
}

/// For every row, the `k` nearest other rows by Euclidean distance (nearest
/// first), flattened row-major. Ties go to the lower index.
pub fn knn_graph(features: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (m, _) = features.require_matrix("knn_graph")?;
    if k >= m {
        return Err(Error::InvalidArgument(format!("knn_graph needs k < M, got k={k}, M={m}")));
    }
    let dist = pairwise_sq_dists(features);
    let mut out = Vec::with_capacity(m * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(m);
    for j in 0..m {
        cand.clear();
        cand.extend((0..m).filter(|&n| n != j).map(|n| (dist[j * m + n], n)));
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, by_key);
        cand[..k].sort_by(by_key);
        out.extend(cand[..k].iter().map(|c| c.1));
    }
    Ok(out)
}

/// Symmetric squared distances; each pair is summed once, dimension by
/// dimension in order, over a column-major copy so the inner loop is contiguous.
fn pairwise_sq_dists(x: &Tensor) -> Vec<f64> {
    let (m, d) = (x.rows(), x.cols());
    let data = x.data();
    let mut cols = vec![0.0; m * d];
    for i in 0..m {
        for c in 0..d {
            cols[c * m + i] = data[i * d + c];
        }
    }
    let mut dist = vec![0.0; m * m];
    for j in 0..m {
        let row = &mut dist[j * m + j + 1..(j + 1) * m];
        for c in 0..d {
            let a = data[j * d + c];
            for (s, &b) in row.iter_mut().zip(&cols[c * m + j + 1..(c + 1) * m]) {
                let e = a - b;
                *s += e * e;
            }
        }
    }
    for j in 0..m {
        for n in 0..j {
            dist[j * m + n] = dist[n * m + j];
        }
    }
    dist
}
