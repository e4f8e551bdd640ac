//! Vocabulary-expandable masked language modeling for knowledge base
//! construction: train a compact encoder MLM, grow its vocabulary with
//! multi-token entity atoms (initialized from constituent sub-token
//! embeddings), fine-tune on prompt-instantiated triples, and predict object
//! sets with per-relation score thresholds.

pub mod corpus;
pub mod data;
pub mod eval;
pub mod infer;
pub mod kg;
pub mod model;
pub mod pipeline;
pub mod recode;
pub mod schema;
pub mod synth;
pub mod tokenizer;
pub mod train;
pub mod vocab_build;
