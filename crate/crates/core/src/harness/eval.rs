use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::data::{sample_episode, Corpus, Episode, PointCloud, Split};
use crate::decoder::hard_labels;
use crate::error::Result;
use crate::language_guidance::TextEmbeddingTable;
use crate::model::Model;
use crate::rng::substream;

/// Global class key; `None` is the background of every episode.
pub type ClassKey = Option<u16>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let union = self.tp + self.fp + self.fn_;
        (union > 0).then(|| self.tp as f64 / union as f64)
    }
}

/// Confusion counts accumulated over episodes, keyed by global class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub counts: BTreeMap<ClassKey, Counts>,
}

impl Confusion {
    /// Adds one episode's predictions; episode label `l > 0` maps to
    /// `class_ids[l - 1]`.
    pub fn add_episode(&mut self, class_ids: &[u16], truth: &[usize], pred: &[usize]) {
        let key = |l: usize| if l == 0 { None } else { Some(class_ids[l - 1]) };
        self.counts.entry(None).or_default();
        for &c in class_ids {
            self.counts.entry(Some(c)).or_default();
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t == p {
                self.counts.get_mut(&key(t)).unwrap().tp += 1;
            } else {
                self.counts.get_mut(&key(t)).unwrap().fn_ += 1;
                self.counts.get_mut(&key(p)).unwrap().fp += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (k, c) in &other.counts {
            let e = self.counts.entry(*k).or_default();
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class: String,
    pub class_id: Option<u16>,
    #[serde(flatten)]
    pub counts: Counts,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: String,
    pub per_class: Vec<ClassIou>,
    pub m_iou: f64,
    pub episodes: usize,
    pub wall_time_s: f64,
    /// Classes with no points and no predictions in any episode.
    pub excluded: Vec<String>,
    pub support_reads: usize,
    pub zero_norm_rows: usize,
}

impl EvalReport {
    pub fn from_confusion(conf: &Confusion, names: &BTreeMap<u16, String>, mode: &str, episodes: usize) -> Self {
        let mut per_class = Vec::new();
        let mut excluded = Vec::new();
        for (k, c) in &conf.counts {
            let class = match k {
                None => "background".to_string(),
                Some(id) => names.get(id).cloned().unwrap_or_else(|| format!("class{id}")),
            };
            match c.iou() {
                Some(iou) => per_class.push(ClassIou { class, class_id: *k, counts: *c, iou }),
                None => {
                    log::info!("class `{class}` absent from every evaluated episode; excluded from the mean");
                    excluded.push(class);
                }
            }
        }
        let m_iou = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|c| c.iou).sum::<f64>() / per_class.len() as f64
        };
        Self {
            mode: mode.to_string(),
            per_class,
            m_iou,
            episodes,
            wall_time_s: 0.0,
            excluded,
            support_reads: 0,
            zero_norm_rows: 0,
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    FewShot,
    ZeroShot,
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub episodes: usize,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub split: Split,
    pub mode: EvalMode,
    /// Fusion-schedule time for few-shot inference.
    pub schedule_time: f64,
}

/// The fixed episode list for `(seed, split, n_way, k_shot)`.
pub fn eval_episodes(corpus: &Corpus, s: &EvalSettings) -> Result<Vec<Episode>> {
    let mut rng = substream(s.seed, 3);
    (0..s.episodes)
        .map(|_| sample_episode(corpus, s.split, s.n_way, s.k_shot, &mut rng))
        .collect()
}

/// Class probabilities for one few-shot episode.
pub fn infer_episode(model: &Model, e: &Episode, table: &TextEmbeddingTable, t: f64) -> Result<(Tensor, usize)> {
    let text = if model.uses_text() { Some(table.matrix(&e.class_names)?) } else { None };
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let out = model.forward(&mut g, &p, &e.query, e.support(), text.as_ref(), t)?;
    Ok((g.value(out.probs).clone(), out.zero_norm_rows))
}

#[derive(Clone, Debug)]
pub struct ZeroShotOutput {
    pub labels: Vec<usize>,
    pub probs: Tensor,
    pub zero_norm_rows: usize,
}

/// Segments `query` into background plus `class_names` from text alone.
pub fn zero_shot_infer(
    model: &Model,
    query: &PointCloud,
    class_names: &[String],
    table: &TextEmbeddingTable,
) -> Result<ZeroShotOutput> {
    let text = table.matrix(class_names)?;
    let mut g = Graph::new();
    let p = model.store.bind(&mut g, false);
    let out = model.forward_zero_shot(&mut g, &p, query, &text)?;
    let probs = g.value(out.probs).clone();
    Ok(ZeroShotOutput { labels: hard_labels(&probs), probs, zero_norm_rows: out.zero_norm_rows })
}

/// m-IoU over a fixed episode list, episodes evaluated in parallel.
pub fn evaluate(model: &Model, corpus: &Corpus, table: &TextEmbeddingTable, s: &EvalSettings) -> Result<EvalReport> {
    let start = Instant::now();
    let episodes = eval_episodes(corpus, s)?;
    let per_episode: Vec<(Confusion, usize)> = episodes
        .par_iter()
        .map(|e| {
            let (labels, zero) = match s.mode {
                EvalMode::FewShot => {
                    let (probs, zero) = infer_episode(model, e, table, s.schedule_time)?;
                    (hard_labels(&probs), zero)
                }
                EvalMode::ZeroShot => {
                    let z = zero_shot_infer(model, &e.query, &e.class_names, table)?;
                    (z.labels, z.zero_norm_rows)
                }
            };
            let mut c = Confusion::default();
            c.add_episode(&e.class_ids, &e.query_labels, &labels);
            Ok((c, zero))
        })
        .collect::<Result<_>>()?;
    let mut conf = Confusion::default();
    let mut zero = 0;
    for (c, z) in &per_episode {
        conf.merge(c);
        zero += z;
    }
    let mode = match s.mode {
        EvalMode::FewShot => format!("{}-way {}-shot", s.n_way, s.k_shot),
        EvalMode::ZeroShot => format!("{}-way zero-shot", s.n_way),
    };
    let mut report = EvalReport::from_confusion(&conf, corpus.class_names(), &mode, episodes.len());
    report.support_reads = episodes.iter().map(Episode::support_reads).sum();
    report.zero_norm_rows = zero;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}
