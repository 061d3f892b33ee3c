//! Relational temporal graph reasoning for joint dialog sentiment
//! classification and dialog act recognition (DARER and DARER²).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graphs;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
