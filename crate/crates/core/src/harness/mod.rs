//! Dataset generation, persistence and the training-size study.

pub mod dataset;
pub mod fieldfile;
pub mod study;
pub mod svg;
