//! Conversational open-retrieval question answering at desk scale.
//!
//! The crate covers the whole pipeline: a corpus model with three question
//! serializations, hashed bag-of-words dual encoders, exact inner-product
//! retrieval, a linear post-ranker, an extractive span reader, curriculum-gated
//! joint training, and the usual answer and ranking metrics. Every loss comes
//! with a hand-derived gradient that [`gradcheck`] can verify.
//!
//! ```
//! use convqa::corpus::{generate_synthetic_corpus, serialize_en};
//!
//! let corpus = generate_synthetic_corpus(7, 2, 3, 20, 200).unwrap();
//! let q = serialize_en(&corpus.conversations()[0], 2, 6);
//! assert_eq!(q.tokens()[0], "[CLS]");
//! ```

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod postranker;
pub mod reader;
pub mod retriever;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/postranker.md")]
    mod postranker {}
    #[doc = include_str!("../../../book/src/reader.md")]
    mod reader {}
    #[doc = include_str!("../../../book/src/curriculum.md")]
    mod curriculum {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
