use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{split_and_sample, to_block_local};
use super::cloud::{PointCloud, UNLABELED};
use super::scene::{generate_scene, ClassCatalog, SceneSpec};
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_scenes: usize,
    pub extent: f64,
    pub block_size: f64,
    pub block_points: usize,
    pub objects_per_scene: usize,
    pub floor_points: usize,
    pub object_points: usize,
    /// A block is eligible as support for a class when it holds at least this
    /// many points of it and at least one point of something else.
    pub min_class_points: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_scenes: 60,
            extent: 2.0,
            block_size: 1.0,
            block_points: 512,
            objects_per_scene: 6,
            floor_points: 1600,
            object_points: 350,
            min_class_points: 25,
        }
    }
}

/// A pool of equally sized blocks plus the class folds episodes draw from.
#[derive(Clone, Debug)]
pub struct Corpus {
    blocks: Vec<PointCloud>,
    train_classes: Vec<u16>,
    test_classes: Vec<u16>,
    class_names: BTreeMap<u16, String>,
    eligible: BTreeMap<u16, Vec<usize>>,
}

impl Corpus {
    pub fn new(
        blocks: Vec<PointCloud>,
        train_classes: Vec<u16>,
        test_classes: Vec<u16>,
        min_class_points: usize,
    ) -> Result<Self> {
        if let Some(c) = train_classes.iter().find(|c| test_classes.contains(c)) {
            return Err(Error::InvalidArgument(format!("class {c} is in both train and test folds")));
        }
        let Some(first) = blocks.first() else {
            return Err(Error::InvalidArgument("corpus has no blocks".into()));
        };
        let class_names = first.class_names.clone();
        let mut eligible: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
        for &c in train_classes.iter().chain(&test_classes) {
            if !class_names.contains_key(&c) {
                return Err(Error::InvalidArgument(format!("class {c} not in class table")));
            }
            let ids = blocks
                .iter()
                .enumerate()
                .filter(|(_, b)| {
                    let n = b.count_label(i32::from(c));
                    n >= min_class_points.max(1) && n < b.len()
                })
                .map(|(i, _)| i)
                .collect();
            eligible.insert(c, ids);
        }
        Ok(Self {
            blocks,
            train_classes,
            test_classes,
            class_names,
            eligible,
        })
    }

    /// Generates `n_scenes` random scenes from `catalog`, splits them into
    /// blocks and shifts each block to local XY coordinates.
    pub fn synthetic(seed: u64, cfg: &CorpusConfig, catalog: &ClassCatalog) -> Result<Self> {
        let mut blocks = Vec::new();
        for s in 0..cfg.n_scenes {
            let scene_seed = seed.wrapping_mul(1_000_003).wrapping_add(s as u64);
            let spec = SceneSpec::random(
                scene_seed,
                cfg.extent,
                catalog,
                cfg.objects_per_scene,
                cfg.floor_points,
                cfg.object_points,
            );
            let cloud = generate_scene(&spec)?;
            let mut rng = substream(scene_seed, 1);
            for mut b in split_and_sample(&cloud, cfg.block_size, cfg.block_points, &mut rng)? {
                to_block_local(&mut b);
                blocks.push(b);
            }
        }
        Self::new(
            blocks,
            catalog.train_classes.clone(),
            catalog.test_classes.clone(),
            cfg.min_class_points,
        )
    }

    pub fn blocks(&self) -> &[PointCloud] {
        &self.blocks
    }

    pub fn classes(&self, split: Split) -> &[u16] {
        match split {
            Split::Train => &self.train_classes,
            Split::Test => &self.test_classes,
        }
    }

    pub fn class_names(&self) -> &BTreeMap<u16, String> {
        &self.class_names
    }

    pub fn eligible_blocks(&self, class: u16) -> &[usize] {
        self.eligible.get(&class).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupportShot {
    /// Support block with its labels stripped.
    pub cloud: PointCloud,
    /// True where the point belongs to the shot's episode class.
    pub mask: Vec<bool>,
}

/// One N-way K-shot task. Support data sits behind [`Episode::support`],
/// which counts every access so support-free code paths can be audited.
#[derive(Clone, Debug)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    /// Global class ids; episode label `i + 1` corresponds to `class_ids[i]`.
    pub class_ids: Vec<u16>,
    pub class_names: Vec<String>,
    /// Query block with its labels stripped.
    pub query: PointCloud,
    /// Ground truth in `0..=N`, 0 = background.
    pub query_labels: Vec<usize>,
    support: Vec<Vec<SupportShot>>,
    support_reads: Arc<AtomicUsize>,
}

impl Episode {
    pub fn new(
        class_ids: Vec<u16>,
        class_names: Vec<String>,
        support: Vec<Vec<SupportShot>>,
        query: PointCloud,
        query_labels: Vec<usize>,
    ) -> Result<Self> {
        let n_way = class_ids.len();
        if n_way == 0 || support.len() != n_way || class_names.len() != n_way {
            return Err(Error::InvalidArgument(format!(
                "episode needs one support set and name per class: {} ids, {} sets, {} names",
                n_way,
                support.len(),
                class_names.len()
            )));
        }
        let k_shot = support[0].len();
        for (c, shots) in support.iter().enumerate() {
            if shots.len() != k_shot || k_shot == 0 {
                return Err(Error::InvalidArgument(format!("class {c} has {} shots", shots.len())));
            }
            for s in shots {
                if s.mask.len() != s.cloud.len() || !s.mask.iter().any(|&m| m) {
                    return Err(Error::InvalidArgument(format!(
                        "support shot for class {c} has no foreground"
                    )));
                }
            }
        }
        if query_labels.len() != query.len() || query_labels.iter().any(|&l| l > n_way) {
            return Err(Error::InvalidArgument("query labels do not match query".into()));
        }
        Ok(Self {
            n_way,
            k_shot,
            class_ids,
            class_names,
            query,
            query_labels,
            support,
            support_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Support shots indexed `[class][shot]`. Every call is counted.
    pub fn support(&self) -> &[Vec<SupportShot>] {
        self.support_reads.fetch_add(1, Ordering::Relaxed);
        &self.support
    }

    pub fn support_reads(&self) -> usize {
        self.support_reads.load(Ordering::Relaxed)
    }
}

const MAX_QUERY_ATTEMPTS: usize = 10_000;

/// Draws an episode from the given fold. Episode classes are `n_way` distinct
/// fold classes, each with `k_shot` support blocks where it is eligible. The
/// query is any corpus block other than the supports; draws whose remapped
/// query is all background are rejected and redrawn.
pub fn sample_episode(
    corpus: &Corpus,
    split: Split,
    n_way: usize,
    k_shot: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Sampling(format!("n_way={n_way}, k_shot={k_shot} must be ≥ 1")));
    }
    let usable: Vec<u16> = corpus
        .classes(split)
        .iter()
        .copied()
        .filter(|&c| corpus.eligible_blocks(c).len() > k_shot)
        .collect();
    if usable.len() < n_way {
        let counts: Vec<String> = corpus
            .classes(split)
            .iter()
            .map(|&c| format!("{c}:{}", corpus.eligible_blocks(c).len()))
            .collect();
        return Err(Error::Sampling(format!(
            "{n_way}-way {k_shot}-shot needs {n_way} classes with ≥ {} eligible blocks; \
             only {} qualify (class:blocks = {})",
            k_shot + 1,
            usable.len(),
            counts.join(", ")
        )));
    }
    for _ in 0..MAX_QUERY_ATTEMPTS {
        let classes: Vec<u16> = index::sample(rng, usable.len(), n_way)
            .into_iter()
            .map(|i| usable[i])
            .collect();
        let q = rng.random_range(0..corpus.blocks.len());
        let query_block = &corpus.blocks[q];
        let remapped: Vec<usize> = query_block
            .labels
            .iter()
            .map(|&l| classes.iter().position(|&c| i32::from(c) == l).map_or(0, |p| p + 1))
            .collect();
        if remapped.iter().all(|&l| l == 0) {
            continue;
        }
        let mut support = Vec::with_capacity(n_way);
        for &c in &classes {
            let pool: Vec<usize> = corpus.eligible_blocks(c).iter().copied().filter(|&b| b != q).collect();
            let shots = index::sample(rng, pool.len(), k_shot)
                .into_iter()
                .map(|i| {
                    let b = &corpus.blocks[pool[i]];
                    let perm = permutation(b.len(), rng);
                    let mut cloud = b.select(&perm);
                    let mask = cloud.labels.iter().map(|&l| l == i32::from(c)).collect();
                    cloud.labels.fill(UNLABELED);
                    SupportShot { cloud, mask }
                })
                .collect();
            support.push(shots);
        }
        let perm = permutation(query_block.len(), rng);
        let mut query = query_block.select(&perm);
        query.labels.fill(UNLABELED);
        let query_labels = perm.iter().map(|&i| remapped[i]).collect();
        let names = classes.iter().map(|c| corpus.class_names[c].clone()).collect();
        return Episode::new(classes, names, support, query, query_labels);
    }
    Err(Error::Sampling(format!(
        "no query with foreground after {MAX_QUERY_ATTEMPTS} draws"
    )))
}

fn permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}
