//! Episodic few-shot classification over cached frame and label-text
//! embeddings, with multimodal prototype enhancement and prototype-quality
//! scoring.

pub mod config;
pub mod episode;
pub mod error;
pub mod harness;
pub mod model;
pub mod mpe;
pub mod optim;
pub mod pride;
pub mod store;
pub mod tensor;
pub mod text;
pub mod visual;

pub use error::{Error, Result};
