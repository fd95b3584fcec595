//! Point clouds, the EPC file format, synthetic scenes, blocks and episodes.

mod augment;
mod blocks;
mod cloud;
mod episode;
mod scene;
mod store;

pub use augment::jitter_scale_augment;
pub use blocks::{split_and_sample, to_block_local, DEFAULT_BLOCK_POINTS};
pub use cloud::{read_cloud, write_cloud, PointCloud, UNLABELED};
pub(crate) use cloud::Reader;
pub use episode::{sample_episode, Corpus, CorpusConfig, Episode, Split, SupportShot};
pub use scene::{generate_scene, ClassCatalog, ClassStyle, ColorModel, Primitive, SceneSpec, ShapeKind};
pub use store::{load_corpus, save_corpus, CorpusManifest};
