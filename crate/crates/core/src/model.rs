//! Full few-shot segmentation model: encoder, prototype sampling, text
//! guidance and the decoder stack, plus the training objective.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{PointCloud, SupportShot};
use crate::decoder::{
    decoder_block, predict, DecoderBlockParams, DecoderContext, DecoderState, DecoderSwitches,
    RelativeEncodingConfig,
};
use crate::error::{Error, Result};
use crate::language_guidance::{FusionSchedule, TextProjection, DEFAULT_TEXT_DIM, TEXT_ONLY};
use crate::losses::{align_loss, con_loss, seg_loss, total_loss, LossWeights};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::prototypes::{class_average, multi_prototype_sample};
use crate::register_attention::{init_registers, AttentionParams};
use crate::rng::{gaussian_tensor, stream};

/// Component switches; every field defaults to enabled except `low_pass`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Toggles {
    pub proera: bool,
    pub lgpe: bool,
    pub drpe: bool,
    pub registers: bool,
    pub prototype_tokens: bool,
    pub r_e: bool,
    pub r_c: bool,
    pub l_con: bool,
    pub l_align: bool,
    /// Replace register-attention outputs by their token mean.
    pub low_pass: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            proera: true,
            lgpe: true,
            drpe: true,
            registers: true,
            prototype_tokens: true,
            r_e: true,
            r_c: true,
            l_con: true,
            l_align: true,
            low_pass: false,
        }
    }
}

impl Toggles {
    pub const NAMES: [&'static str; 9] =
        ["proera", "lgpe", "drpe", "registers", "prototype_tokens", "R_E", "R_C", "L_con", "L_align"];

    pub fn all_off() -> Self {
        Self {
            proera: false,
            lgpe: false,
            drpe: false,
            registers: false,
            prototype_tokens: false,
            r_e: false,
            r_c: false,
            l_con: false,
            l_align: false,
            low_pass: false,
        }
    }

    pub fn disable(&mut self, name: &str) -> Result<()> {
        let slot = match name.to_ascii_lowercase().as_str() {
            "proera" => &mut self.proera,
            "lgpe" => &mut self.lgpe,
            "drpe" => &mut self.drpe,
            "registers" => &mut self.registers,
            "prototype_tokens" => &mut self.prototype_tokens,
            "r_e" => &mut self.r_e,
            "r_c" => &mut self.r_c,
            "l_con" => &mut self.l_con,
            "l_align" => &mut self.l_align,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown toggle `{other}`; expected one of {:?}",
                    Self::NAMES
                )))
            }
        };
        *slot = false;
        Ok(())
    }

    fn switches(&self) -> DecoderSwitches {
        DecoderSwitches {
            register_attention: self.proera,
            registers: self.registers,
            prototype_tokens: self.prototype_tokens,
            relative_encoding: self.drpe && (self.r_e || self.r_c),
            low_pass: self.low_pass,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub n_prototypes: usize,
    pub n_registers: usize,
    pub decoder_blocks: usize,
    pub text_dim: usize,
    pub encoding: RelativeEncodingConfig,
    pub fusion: FusionSchedule,
    pub loss: LossWeights,
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            n_prototypes: 100,
            n_registers: 3,
            decoder_blocks: 3,
            text_dim: DEFAULT_TEXT_DIM,
            encoding: RelativeEncodingConfig::default(),
            fusion: FusionSchedule::default(),
            loss: LossWeights::default(),
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn d(&self) -> usize {
        self.backbone.d_out
    }

    fn encoding(&self) -> RelativeEncodingConfig {
        RelativeEncodingConfig {
            use_euclid: self.encoding.use_euclid && self.toggles.r_e,
            use_cosine: self.encoding.use_cosine && self.toggles.r_c,
            ..self.encoding.clone()
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: Backbone,
    text: Option<TextProjection>,
    align_w: Option<ParamId>,
    query_registers: Option<ParamId>,
    proto_registers: Option<ParamId>,
    blocks: Vec<DecoderBlockParams>,
}

/// Values produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub probs: Var,
    pub n_classes: usize,
    /// Encoder features of the query.
    pub query_features: Var,
    /// Decoder output features of the query, the input to prediction.
    pub decoded_query: Var,
    pub final_protos: Var,
    /// Encoder features of every support shot, stacked, with episode labels.
    pub support_features: Option<(Var, Vec<usize>)>,
    pub raw_protos: Option<Var>,
    pub zero_norm_rows: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub seg: Var,
    pub con: Option<Var>,
    pub align: Option<Var>,
    pub total: Var,
}

fn module(block: usize, part: &str) -> String {
    format!("decoder.block{block}.{part}")
}

fn cloud_tensor(c: &PointCloud) -> Result<Tensor> {
    Tensor::new(vec![c.len(), 6], c.channels())
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.decoder_blocks == 0 {
            return Err(Error::InvalidArgument("decoder needs at least one block".into()));
        }
        if cfg.d() % 2 != 0 {
            return Err(Error::InvalidArgument(format!("feature width must be even, got {}", cfg.d())));
        }
        let mut rng = stream(seed);
        let mut store = ParamStore::new();
        let d = cfg.d();
        let backbone = Backbone::new(&mut store, cfg.backbone.clone(), &mut rng)?;
        let t = &cfg.toggles;
        let (text, align_w) = if t.lgpe {
            let proj = TextProjection::new(&mut store, "text", cfg.text_dim, d, &mut rng);
            let w = t.l_align.then(|| {
                let std = (1.0 / d as f64).sqrt();
                store.add("align", "w", ParamGroup::Main, gaussian_tensor(&mut rng, &[d, cfg.text_dim], std))
            });
            (Some(proj), w)
        } else {
            (None, None)
        };
        let (query_registers, proto_registers) = if t.proera && t.registers && cfg.n_registers > 0 {
            let bank = init_registers(cfg.n_registers, d, &mut rng);
            (
                Some(store.add("registers", "query", ParamGroup::Main, bank.query)),
                Some(store.add("registers", "proto", ParamGroup::Main, bank.proto)),
            )
        } else {
            (None, None)
        };
        let mut blocks = Vec::with_capacity(cfg.decoder_blocks);
        for b in 0..cfg.decoder_blocks {
            let (qa, pa) = if t.proera {
                (
                    AttentionParams::new(&mut store, &module(b, "query_attention"), d, &mut rng),
                    AttentionParams::new(&mut store, &module(b, "proto_attention"), d, &mut rng),
                )
            } else {
                // Placeholders never read when register attention is off.
                let dummy = AttentionParams {
                    wq: backbone.proj_weight(),
                    wk: backbone.proj_weight(),
                    wv: backbone.proj_weight(),
                    wo: backbone.proj_weight(),
                    d,
                };
                (dummy.clone(), dummy)
            };
            blocks.push(DecoderBlockParams {
                query_attention: qa,
                proto_attention: pa,
                query_cross: AttentionParams::new(&mut store, &module(b, "query_cross"), d, &mut rng),
                proto_cross: AttentionParams::new(&mut store, &module(b, "proto_cross"), d, &mut rng),
            });
        }
        Ok(Self {
            cfg,
            store,
            backbone,
            text,
            align_w,
            query_registers,
            proto_registers,
            blocks,
        })
    }

    /// Rebuilds the model for `cfg` and copies in every tensor of `store`,
    /// which must match by name and shape.
    pub fn with_params(cfg: ModelConfig, store: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, 0)?;
        if store.len() != m.store.len() {
            return Err(Error::InvalidArgument(format!(
                "parameter count mismatch: config has {}, checkpoint has {}",
                m.store.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = m.store.find(&p.module, &p.name).ok_or_else(|| {
                Error::InvalidArgument(format!("unexpected parameter {}.{}", p.module, p.name))
            })?;
            if m.store.get(id).shape() != p.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_parameter",
                    lhs: m.store.get(id).shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            *m.store.get_mut(id) = p.value.clone();
        }
        Ok(m)
    }

    pub fn uses_text(&self) -> bool {
        self.text.is_some()
    }

    /// Encoder features for a cloud.
    pub fn encode(&self, g: &mut Graph, p: &Bound, cloud: &PointCloud) -> Result<Var> {
        let x = g.constant(cloud_tensor(cloud)?);
        self.backbone.encode(g, p, x)
    }

    /// Few-shot forward pass. `class_text` holds one text row per episode
    /// class (background excluded) and is required when text guidance is on.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: &PointCloud,
        support: &[Vec<SupportShot>],
        class_text: Option<&Tensor>,
        t: f64,
    ) -> Result<ForwardOutput> {
        let n_classes = support.len() + 1;
        let query_features = self.encode(g, p, query)?;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (c, shots) in support.iter().enumerate() {
            for s in shots {
                feats.push(self.encode(g, p, &s.cloud)?);
                labels.extend(s.mask.iter().map(|&m| if m { c + 1 } else { 0 }));
            }
        }
        let support_all = g.concat_rows(&feats)?;
        let mp = multi_prototype_sample(g, support_all, &labels, n_classes, self.cfg.n_prototypes)?;
        let raw = class_average(g, mp.features, &mp.labels, n_classes)?;
        let text = self.text_prototypes(g, p, class_text, n_classes)?;
        let weights = self.cfg.fusion.weights(t);
        let ctx_labels = mp.labels.clone();
        let out = self.decode(g, p, query_features, mp.features, &ctx_labels, raw, Some(raw), text, weights, n_classes)?;
        Ok(ForwardOutput {
            support_features: Some((support_all, labels)),
            raw_protos: Some(raw),
            ..out
        })
    }

    /// Support-free forward pass: text prototypes seed the prototype stream
    /// and are the only prototype source.
    pub fn forward_zero_shot(&self, g: &mut Graph, p: &Bound, query: &PointCloud, class_text: &Tensor) -> Result<ForwardOutput> {
        if self.text.is_none() {
            return Err(Error::InvalidArgument("zero-shot inference needs a model trained with text guidance".into()));
        }
        let n_classes = class_text.rows() + 1;
        let query_features = self.encode(g, p, query)?;
        let text = self
            .text_prototypes(g, p, Some(class_text), n_classes)?
            .expect("text projection present");
        let labels: Vec<usize> = (0..n_classes).collect();
        self.decode(g, p, query_features, text, &labels, text, None, Some(text), TEXT_ONLY, n_classes)
    }

    fn text_prototypes(&self, g: &mut Graph, p: &Bound, class_text: Option<&Tensor>, n_classes: usize) -> Result<Option<Var>> {
        let Some(proj) = &self.text else { return Ok(None) };
        let ct = class_text.ok_or_else(|| Error::InvalidArgument("text embeddings required".into()))?;
        if ct.rows() + 1 != n_classes || ct.cols() != proj.text_dim {
            return Err(Error::ShapeMismatch {
                op: "text_prototypes",
                lhs: ct.shape().to_vec(),
                rhs: vec![n_classes - 1, proj.text_dim],
            });
        }
        Ok(Some(proj.prototypes(g, p, ct)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        g: &mut Graph,
        p: &Bound,
        query_features: Var,
        multi_proto: Var,
        multi_labels: &[usize],
        initial_tokens: Var,
        raw: Option<Var>,
        text: Option<Var>,
        weights: [f64; 4],
        n_classes: usize,
    ) -> Result<ForwardOutput> {
        let encoding = self.cfg.encoding();
        let ctx = DecoderContext {
            multi_proto_labels: multi_labels,
            n_classes,
            raw,
            text,
            weights,
            raw_only: self.text.is_none(),
            encoding: &encoding,
        };
        let sw = self.cfg.toggles.switches();
        let mut state = DecoderState {
            query: query_features,
            multi_proto,
            query_registers: self.query_registers.map(|id| p.var(id)),
            proto_registers: self.proto_registers.map(|id| p.var(id)),
            proto_tokens: initial_tokens,
        };
        for blk in &self.blocks {
            state = decoder_block(g, p, blk, &sw, &ctx, &state)?.0;
        }
        let pred = predict(g, state.query, state.proto_tokens)?;
        Ok(ForwardOutput {
            probs: pred.probs,
            n_classes,
            query_features,
            decoded_query: state.query,
            final_protos: state.proto_tokens,
            support_features: None,
            raw_protos: None,
            zero_norm_rows: pred.zero_norm_rows,
        })
    }

    /// Training objective for a forward pass. Contrastive pairs are sampled
    /// from encoder features of support and query foreground points.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        out: &ForwardOutput,
        query_labels: &[usize],
        class_text: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<LossParts> {
        let seg = seg_loss(g, out.probs, query_labels)?;
        let w = &self.cfg.loss;
        let con = if self.cfg.toggles.l_con {
            let (sf, sl) = out
                .support_features
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("contrastive loss needs support features".into()))?;
            let (si, qi, pl) = sample_pairs(sl, query_labels, out.n_classes, w.max_pairs, rng);
            if pl.is_empty() {
                None
            } else {
                let s = g.gather_rows(*sf, &si)?;
                let q = g.gather_rows(out.query_features, &qi)?;
                let c = con_loss(g, s, q, &pl, w.temperature, w.normalize)?;
                if c.degenerate {
                    log::debug!("contrastive loss has no negatives this episode");
                }
                Some(c.loss)
            }
        } else {
            None
        };
        let align = match (self.align_w, out.raw_protos, class_text) {
            (Some(aw), Some(raw), Some(ct)) if self.cfg.toggles.l_align => {
                let fg = g.slice_rows(raw, 1, out.n_classes)?;
                let t = g.constant(ct.clone());
                Some(align_loss(g, fg, t, p.var(aw))?)
            }
            _ => None,
        };
        let total = total_loss(g, seg, con, align, w)?;
        Ok(LossParts { seg, con, align, total })
    }
}

/// Up to `max_pairs` (support, query) foreground index pairs per class,
/// drawn uniformly without replacement from the class's product set.
pub fn sample_pairs(
    support_labels: &[usize],
    query_labels: &[usize],
    n_classes: usize,
    max_pairs: usize,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (mut si, mut qi, mut pl) = (vec![], vec![], vec![]);
    for c in 1..n_classes {
        let s: Vec<usize> = (0..support_labels.len()).filter(|&i| support_labels[i] == c).collect();
        let q: Vec<usize> = (0..query_labels.len()).filter(|&i| query_labels[i] == c).collect();
        let total = s.len() * q.len();
        if total == 0 {
            continue;
        }
        for k in index::sample(rng, total, max_pairs.min(total)) {
            si.push(s[k / q.len()]);
            qi.push(q[k % q.len()]);
            pl.push(c);
        }
    }
    (si, qi, pl)
}
