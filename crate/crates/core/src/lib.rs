//! Interpretable visual question answering with a bag-of-words + image
//! feature softmax classifier.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod inference;
pub mod model;
pub mod service;
pub mod synthetic;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
