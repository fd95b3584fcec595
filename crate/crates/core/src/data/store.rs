//! Corpus directories: `corpus.json` plus one EPC file per block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cloud::{read_cloud, write_cloud};
use super::episode::Corpus;
use super::scene::ClassCatalog;
use crate::error::{Error, Result};

const MANIFEST: &str = "corpus.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub blocks: usize,
    pub min_class_points: usize,
    pub catalog: ClassCatalog,
}

fn block_name(i: usize) -> String {
    format!("block_{i:05}.epc")
}

pub fn save_corpus(corpus: &Corpus, catalog: &ClassCatalog, min_class_points: usize, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, b) in corpus.blocks().iter().enumerate() {
        write_cloud(b, dir.join(block_name(i)))?;
    }
    let manifest = CorpusManifest {
        blocks: corpus.blocks().len(),
        min_class_points,
        catalog: catalog.clone(),
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<(Corpus, ClassCatalog)> {
    let dir = dir.as_ref();
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.blocks == 0 {
        return Err(Error::InvalidArgument(format!("{} lists no blocks", dir.display())));
    }
    let blocks = (0..manifest.blocks)
        .map(|i| read_cloud(dir.join(block_name(i))))
        .collect::<Result<Vec<_>>>()?;
    let cat = manifest.catalog;
    let corpus = Corpus::new(blocks, cat.train_classes.clone(), cat.test_classes.clone(), manifest.min_class_points)?;
    Ok((corpus, cat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusConfig;

    #[test]
    fn corpus_directory_round_trips() {
        let cfg = CorpusConfig { n_scenes: 2, block_points: 64, ..Default::default() };
        let cat = ClassCatalog::synthetic();
        let corpus = Corpus::synthetic(5, &cfg, &cat).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, &cat, cfg.min_class_points, dir.path()).unwrap();
        let (back, back_cat) = load_corpus(dir.path()).unwrap();
        assert_eq!(back_cat, cat);
        assert_eq!(back.blocks().len(), corpus.blocks().len());
        // EPC stores f32 coordinates, so compare at that precision.
        for (a, b) in corpus.blocks().iter().zip(back.blocks()) {
            assert_eq!(a.labels, b.labels);
            for (p, q) in a.xyz.iter().zip(&b.xyz) {
                for k in 0..3 {
                    assert_eq!(p[k] as f32, q[k] as f32);
                }
            }
        }
        for &c in cat.train_classes.iter().chain(&cat.test_classes) {
            assert_eq!(back.eligible_blocks(c), corpus.eligible_blocks(c));
        }
    }
}
