use std::fmt::Write as _;
use std::path::Path;

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::TrainConfig;
use super::optim::AdamW;
use crate::autodiff::Graph;
use crate::data::{sample_episode, Corpus, Split};
use crate::error::{Error, Result};
use crate::language_guidance::TextEmbeddingTable;
use crate::model::Model;
use crate::params::ParamGroup;
use crate::rng::substream;

pub const METRICS_HEADER: &str =
    "iter,L_seg,L_con,L_align,L_total,lr_main,lr_backbone,lambda1,lambda2,lambda3,lambda4";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub seg: f64,
    pub con: Option<f64>,
    pub align: Option<f64>,
    pub total: f64,
    pub lr_main: f64,
    pub lr_backbone: f64,
    pub lambda: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn model(&self) -> Result<Model> {
        self.checkpoint.model()
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let [l1, l2, l3, l4] = r.lambda;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            r.seg,
            opt(r.con),
            opt(r.align),
            r.total,
            r.lr_main,
            r.lr_backbone,
            l1,
            l2,
            l3,
            l4
        );
    }
    s
}

/// Episodic training. Steps whose loss or gradients are not finite are
/// skipped; more than 1% skipped steps aborts the run.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, table: &TextEmbeddingTable) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = AdamW::new(&model.store, cfg);
    let mut episodes = substream(cfg.seed, 1);
    let mut pairs = substream(cfg.seed, 2);
    let fusion = &cfg.model.fusion;
    let max_skipped = cfg.iterations / 100;
    let mut skipped = 0;
    let mut metrics = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let e = sample_episode(corpus, Split::Train, cfg.n_way, cfg.k_shot, &mut episodes)?;
        let text = if model.uses_text() { Some(table.matrix(&e.class_names)?) } else { None };
        let t = fusion.time_at(it);
        let (lr_main, lr_backbone) = (cfg.main_lr.at(it), cfg.backbone_lr.at(it));
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let step = model
            .forward(&mut g, &p, &e.query, e.support(), text.as_ref(), t)
            .and_then(|out| model.loss(&mut g, &p, &out, &e.query_labels, text.as_ref(), &mut pairs));
        let losses = match step {
            Ok(l) if g.value(l.total).item().is_finite() => l,
            Ok(_) | Err(Error::NonFinite { .. }) => {
                skipped += 1;
                log::warn!("iteration {it}: non-finite loss, step skipped ({skipped} so far)");
                if skipped > max_skipped {
                    return Err(abort(skipped, it));
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut grads = g.backward(losses.total)?;
        let norm = p
            .vars()
            .iter()
            .filter_map(|&v| grads.slice(v))
            .flatten()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            skipped += 1;
            log::warn!("iteration {it}: non-finite gradient, step skipped ({skipped} so far)");
            if skipped > max_skipped {
                return Err(abort(skipped, it));
            }
            continue;
        }
        if let Some(clip) = cfg.grad_clip.filter(|&c| norm > c) {
            let scale = clip / norm;
            for &v in p.vars() {
                if let Some(s) = grads.slice_mut(v) {
                    s.iter_mut().for_each(|x| *x *= scale);
                }
            }
        }
        opt.step(&mut model.store, &grads, p.vars(), |grp| match grp {
            ParamGroup::Backbone => lr_backbone,
            ParamGroup::Main => lr_main,
        });
        let value = |v: Option<crate::autodiff::Var>| v.map(|v| g.value(v).item());
        let row = MetricsRow {
            iter: it,
            seg: g.value(losses.seg).item(),
            con: value(losses.con),
            align: value(losses.align),
            total: g.value(losses.total).item(),
            lr_main,
            lr_backbone,
            lambda: fusion.weights(t),
        };
        if it % 100 == 0 || it + 1 == cfg.iterations {
            log::info!("iter {it}: L_total {:.4} L_seg {:.4}", row.total, row.seg);
        }
        metrics.push(row);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            meta: CheckpointMeta {
                config: cfg.clone(),
                iterations_done: cfg.iterations,
                skipped_steps: skipped,
                schedule_time: fusion.time_at(cfg.iterations),
            },
            store: model.store,
        },
        metrics,
    })
}

fn abort(skipped: usize, it: usize) -> Error {
    Error::TrainingAborted(format!(
        "{skipped} non-finite steps by iteration {it} exceeds the 1% budget; \
         lower the learning rates or check the input data for NaNs"
    ))
}

/// Writes `checkpoint.epck` and `metrics.csv` into `dir`.
pub fn write_outputs(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    outcome.checkpoint.save(dir.join("checkpoint.epck"))?;
    std::fs::write(dir.join("metrics.csv"), metrics_csv(&outcome.metrics))?;
    Ok(())
}
