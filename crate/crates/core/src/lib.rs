pub mod bc;
pub mod darcy;
pub mod error;
pub mod field;
pub mod harness;
pub mod linalg;
pub mod microstructure;
pub mod seed;
pub mod stokes;
pub mod surrogate;

pub use bc::BoundaryConditions;
pub use error::{Error, Result};
pub use field::{Block, FineField};
pub use microstructure::{Microstructure, MicrostructureConfig, SolidMask};
