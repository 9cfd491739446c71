//! A self-contained laboratory for unsupervised domain adaptation through
//! self-supervision: a labeled source domain and an unlabeled target domain
//! share a convolutional encoder, trained jointly on the source
//! classification loss and on self-supervised tasks (rotation, flip, patch
//! location) whose labels are synthesized on both domains. Early stopping
//! and run selection use the distance between mean source and target
//! features plus source validation error; target labels are consumed only
//! by the final evaluation.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod select;
pub mod selfsup;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
