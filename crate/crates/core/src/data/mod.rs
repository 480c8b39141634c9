//! Frame stores, phase annotations, synthetic phase videos and the embedding
//! store that carries multi-term embeddings from stage one to stage two.

mod annotations;
mod embeddings;
mod frames;
mod synthetic;

pub use annotations::{
    labels_by_video, load_annotations, parse_annotations, write_annotations, PhaseAnnotation,
};
pub use embeddings::{EmbeddingStore, VideoEmbeddings, EMBEDDING_MAGIC, EMBEDDING_VERSION};
pub use frames::{Frame, FrameStore};
pub use synthetic::{generate_synthetic, SyntheticSpec, SyntheticVideos};
