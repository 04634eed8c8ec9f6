//! Scene corpora: file ingestion and the synthetic relational generator.

mod corpus;
pub mod generator;

pub use corpus::{load_corpus, load_unlabeled_corpus, Corpus, Label, PersonRecord, SceneRecord};
pub use generator::{generate_relational_corpus, GeneratorSpec, Layout};
