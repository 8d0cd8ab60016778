use std::path::{Path, PathBuf};

use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: field `{field}`: {detail}")]
    Format { line: usize, field: String, detail: String },
    #[error("{file}:{line}: {detail}")]
    Csv { file: String, line: usize, detail: String },
    #[error("model: {0}")]
    Model(String),
    #[error("data: {0}")]
    Data(String),
    #[error("config: {0}")]
    Config(String),
    #[error("metric: {0}")]
    Metric(String),
    #[error("invalid perturbation: {0}")]
    Perturb(String),
    #[error("non-finite {term} at epoch {epoch}")]
    NonFinite { term: &'static str, epoch: usize },
    #[error("vocabulary mismatch: model {model} vs dataset {dataset}")]
    VocabMismatch { model: String, dataset: String },
    #[error("perturbation at intensity {intensity}, sample {sample}: {source}")]
    Sweep {
        intensity: f64,
        sample: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
