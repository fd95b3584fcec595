//! Class-name embeddings, their projection into the feature space, and the
//! scheduled blend of visual and text prototypes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{ClassCatalog, ShapeKind};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::rng::{gaussian, gaussian_tensor, stream};

pub const DEFAULT_TEXT_DIM: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    File,
    Synthetic,
}

/// Class name → embedding vector. Names are matched case-insensitively.
/// With a fallback seed, unknown names resolve to [`synth_embedding`].
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingTable {
    dim: usize,
    entries: BTreeMap<String, (Vec<f64>, Provenance)>,
    fallback_seed: Option<u64>,
}

fn normalize_name(name: &str) -> String {
    name.trim().to_lowercase()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Unit-norm Gaussian direction seeded by SHA-256 of `(name, seed)`.
pub fn synth_embedding(name: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(normalize_name(name).as_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 8];
    s.copy_from_slice(&digest[..8]);
    let mut rng = stream(u64::from_le_bytes(s));
    unit((0..dim).map(|_| gaussian(&mut rng)).collect())
}

impl TextEmbeddingTable {
    pub fn new(dim: usize, fallback_seed: Option<u64>) -> Self {
        Self {
            dim,
            entries: BTreeMap::new(),
            fallback_seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn set_fallback(&mut self, seed: Option<u64>) {
        self.fallback_seed = seed;
    }

    pub fn insert(&mut self, name: &str, v: Vec<f64>, provenance: Provenance) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "embedding for `{name}` has {} dims, table has {}",
                v.len(),
                self.dim
            )));
        }
        self.entries.insert(normalize_name(name), (v, provenance));
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Result<(Vec<f64>, Provenance)> {
        if let Some(e) = self.entries.get(&normalize_name(name)) {
            return Ok(e.clone());
        }
        match self.fallback_seed {
            Some(seed) => Ok((synth_embedding(name, seed, self.dim), Provenance::Synthetic)),
            None => Err(Error::UnknownClass(name.to_owned())),
        }
    }

    /// Rows for `names`, in order.
    pub fn matrix(&self, names: &[String]) -> Result<Tensor> {
        let rows = names.iter().map(|n| self.lookup(n).map(|e| e.0)).collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![names.len(), self.dim], rows.concat())
    }

    /// Parses the `EPT1 <dim>` text format.
    pub fn parse(text: &str) -> Result<Self> {
        let err = |offset: usize, msg: String| Error::Format { kind: "EPT", offset, msg };
        let mut offset = 0;
        let mut lines = text.split_inclusive('\n');
        let header = lines.next().ok_or_else(|| err(0, "empty file".into()))?;
        let mut h = header.split_whitespace();
        if h.next() != Some("EPT1") {
            return Err(err(0, "missing EPT1 header".into()));
        }
        let dim: usize = h
            .next()
            .and_then(|d| d.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| err(5, "bad dimension in header".into()))?;
        offset += header.len();
        let mut table = Self::new(dim, None);
        for line in lines {
            let start = offset;
            offset += line.len();
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let v = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(start, format!("`{name}`: {e}")))?;
            if v.len() != dim {
                return Err(err(start, format!("`{name}` has {} values, header says {dim}", v.len())));
            }
            table.insert(name, v, Provenance::File)?;
        }
        Ok(table)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("EPT1 {}\n", self.dim);
        for (name, (v, _)) in &self.entries {
            s.push_str(name);
            for x in v {
                write!(s, " {x:?}").expect("write to string");
            }
            s.push('\n');
        }
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Embeddings that encode each catalog class's appearance: a fixed random
    /// linear map of (colour, shape one-hot, size) scaled by `strength`, plus
    /// `noise` times the class's synthetic direction, normalised.
    pub fn planted(catalog: &ClassCatalog, dim: usize, seed: u64, strength: f64, noise: f64) -> Self {
        const N_ATTR: usize = 10;
        let mut rng = stream(seed ^ 0x5eed_7e47);
        let a = gaussian_tensor(&mut rng, &[dim, N_ATTR], 1.0 / (N_ATTR as f64).sqrt());
        let mut table = Self::new(dim, None);
        for style in std::iter::once(&catalog.floor).chain(&catalog.objects) {
            let mut attr = [0.0; N_ATTR];
            attr[..3].copy_from_slice(&style.color);
            let shape = match style.kind {
                ShapeKind::Plane => 0,
                ShapeKind::Box => 1,
                ShapeKind::Sphere => 2,
                ShapeKind::Cylinder => 3,
            };
            attr[3 + shape] = 1.0;
            attr[7..].copy_from_slice(&style.size);
            let synth = synth_embedding(&style.name, seed, dim);
            let v = (0..dim)
                .map(|i| strength * (0..N_ATTR).map(|j| a.get2(i, j) * attr[j]).sum::<f64>() + noise * synth[i])
                .collect();
            table.insert(&style.name, unit(v), Provenance::Synthetic).expect("planted dims");
        }
        table
    }
}

/// Two-layer projection of text embeddings to the feature width, plus the
/// learnable background text vector.
#[derive(Clone, Debug)]
pub struct TextProjection {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub background: ParamId,
    pub text_dim: usize,
    pub d: usize,
}

const PROJ_SLOPE: f64 = 0.2;

impl TextProjection {
    pub fn new(store: &mut ParamStore, module: &str, text_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut add = |name: &str, t: Tensor| store.add(module, name, ParamGroup::Main, t);
        let w1 = add("w1", gaussian_tensor(rng, &[text_dim, d], (2.0 / text_dim as f64).sqrt()));
        let b1 = add("b1", Tensor::zeros(&[1, d]));
        let w2 = add("w2", gaussian_tensor(rng, &[d, d], (1.0 / d as f64).sqrt()));
        let b2 = add("b2", Tensor::zeros(&[1, d]));
        let bg = unit(gaussian_tensor(rng, &[1, text_dim], 1.0).into_data());
        let background = add("background", Tensor::new(vec![1, text_dim], bg).expect("bg shape"));
        Self {
            w1,
            b1,
            w2,
            b2,
            background,
            text_dim,
            d,
        }
    }

    /// `leaky(T·W1 + b1)·W2 + b2`, row-wise.
    pub fn project(&self, g: &mut Graph, p: &Bound, text: Var) -> Result<Var> {
        let h = g.matmul(text, p.var(self.w1))?;
        let h = g.add_row(h, p.var(self.b1))?;
        let h = g.leaky_relu(h, PROJ_SLOPE)?;
        let y = g.matmul(h, p.var(self.w2))?;
        g.add_row(y, p.var(self.b2))
    }

    /// Text prototypes for `[background ; classes]`.
    pub fn prototypes(&self, g: &mut Graph, p: &Bound, class_text: &Tensor) -> Result<Var> {
        let t = g.constant(class_text.clone());
        let all = g.concat_rows(&[p.var(self.background), t])?;
        self.project(g, p, all)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionSchedule {
    /// Limits `(λ₁*, λ₂*, λ₃*, λ₄*)` for token, raw, dynamic and text prototypes.
    pub lambda_star: [f64; 4],
    pub rate: f64,
    /// Training iterations per unit of schedule time.
    pub iters_per_unit: f64,
}

impl Default for FusionSchedule {
    fn default() -> Self {
        Self {
            lambda_star: [1.0, 0.5, 0.7, 0.6],
            rate: 0.5,
            iters_per_unit: 5000.0,
        }
    }
}

impl FusionSchedule {
    pub fn time_at(&self, iteration: usize) -> f64 {
        iteration as f64 / self.iters_per_unit
    }

    /// Visual weights rise as `λ*·(1 − e^(−rate·t))`; the text weight decays
    /// as `λ₄*·e^(−rate·t)`.
    pub fn weights(&self, t: f64) -> [f64; 4] {
        let decay = (-self.rate * t).exp();
        let [l1, l2, l3, l4] = self.lambda_star;
        [l1 * (1.0 - decay), l2 * (1.0 - decay), l3 * (1.0 - decay), l4 * decay]
    }
}

/// Weights used when no support data exists: text prototypes only.
pub const TEXT_ONLY: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

/// `Σ wᵢ·partᵢ` over `(token, raw, dynamic, text)`. Parts with weight 0 may be
/// absent; a present part with weight 0 is skipped.
pub fn fuse_prototypes(g: &mut Graph, parts: [Option<Var>; 4], weights: [f64; 4]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    let mut shape: Option<Vec<usize>> = None;
    for (part, w) in parts.into_iter().zip(weights) {
        let Some(v) = part else {
            if w != 0.0 {
                return Err(Error::InvalidArgument("fusion part with nonzero weight is missing".into()));
            }
            continue;
        };
        let s = g.value(v).shape().to_vec();
        if let Some(prev) = &shape {
            if *prev != s {
                return Err(Error::ShapeMismatch {
                    op: "fuse_prototypes",
                    lhs: prev.clone(),
                    rhs: s,
                });
            }
        }
        shape = Some(s);
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, w)? };
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    match (acc, shape) {
        (Some(a), _) => Ok(a),
        (None, Some(s)) => Ok(g.constant(Tensor::zeros(&s))),
        (None, None) => Err(Error::InvalidArgument("no prototypes to fuse".into())),
    }
}
