//! Synthetic corpus, masking augmentation and dataset files.

mod augment;
mod corpus;
pub mod io;

pub use augment::{spec_augment, AugmentPolicy};
pub use corpus::{
    generate_corpus, generate_split, render, Corpus, CorpusConfig, Dataset, DomainShift, Role, SealedTruth,
    SplitCounts, Utterance, World,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("data configuration error: {0}")]
    Config(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
