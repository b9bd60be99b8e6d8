//! Multi-task label embedding: corpora, differentiable layers, the
//! label-embedding network and its training workflows.

pub mod corpus;
pub mod diff;
pub mod embedding;
pub mod encoder;
pub mod gradcheck;
pub mod matcher;
pub mod model;
pub mod par;
pub mod rng;
pub mod skipgram;
pub mod tensor;
pub mod baseline;
pub mod trainer;
pub mod unsupervised;
