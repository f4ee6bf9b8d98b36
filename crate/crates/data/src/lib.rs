//! Silhouette sequence I/O, frame normalization, training batches,
//! evaluation splits and a synthetic walker generator.

use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod image;
pub mod index;
pub mod normalize;
pub mod sampling;
pub mod sequence;
pub mod split;
pub mod synth;

pub use crate::image::BinaryImage;
pub use index::{DatasetIndex, IndexEntry, MANIFEST_NAME};
pub use normalize::{normalize_frame, normalize_sequence};
pub use sampling::{clip_indices, sample_training_clip, LabelMap, PkBatch, PkSampler, CLIP_LEN};
pub use sequence::{load_sequence, Condition, SequenceKey, SilhouetteSequence};
pub use split::{make_eval_split, Protocol, SeqFilter};
pub use synth::{generate_dataset, generate_sequences, render_walker, SynthProtocol, WalkerSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
    #[error("{path} line {line}: {detail}")]
    Manifest {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("{0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
