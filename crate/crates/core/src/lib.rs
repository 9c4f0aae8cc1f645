//! Measurement extraction from scientific text.
//!
//! The crate implements a three-stage cascade:
//!
//! 1. [`tagger`]: quantity spans via a token encoder, a ReLU emission
//!    projection and a linear-chain [`crf`] head.
//! 2. [`unitmods`]: character-level BiLSTM models that pull the unit out of
//!    a quantity surface and classify its value modifiers.
//! 3. [`spanqa`]: measured entities, measured properties and qualifiers,
//!    found by asking templated questions and scoring start/end positions.
//!
//! [`metrics`] scores predictions against gold corpora and [`synthgen`]
//! produces annotated corpora with planted structure.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command-line driver live in the `measx` crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod math;
pub mod metrics;
pub mod netcore;
pub mod spanqa;
pub mod synthgen;
pub mod tagger;
pub mod training;
pub mod unitmods;
pub mod vocab;

pub use corpus::{
    Annotation, AnnotationKind, Corpus, CorpusError, DocEntry, Document, Relation, RelationKind,
    Span, Tag, TagSequence, Token,
};
