//! Desk-scale multimodal foundation model laboratory.

pub mod analysis;
pub mod data;
pub mod eval;
pub mod hashing;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod relevancy;
pub mod train;
