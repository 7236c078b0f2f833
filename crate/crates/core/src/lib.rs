pub mod artifact;
pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dialograph;
pub mod embedder;
pub mod error;
pub mod medkg;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod recall;
pub mod responder;
pub mod retriever;
pub mod rng;
pub mod text;
pub mod training;
