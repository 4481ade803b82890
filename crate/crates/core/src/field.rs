//! Fields on the regular output lattice.
//!
//! Lattice point `(ix, iy)` sits at the cell center `((ix + 0.5) / G, (iy + 0.5) / G)`
//! and is stored at index `iy * G + ix`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three output blocks (pressure, x-velocity, y-velocity).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Pressure,
    VelocityX,
    VelocityY,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::Pressure, Block::VelocityX, Block::VelocityY];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Pressure => "pressure",
            Block::VelocityX => "vx",
            Block::VelocityY => "vy",
        }
    }
}

pub fn lattice_coord(index: usize, grid: usize) -> f64 {
    (index as f64 + 0.5) / grid as f64
}

/// Fine-scale pressure and velocity sampled on the output lattice.
///
/// `fluid[k]` is false where the lattice point falls in a solid cell of the
/// discretization; there both velocity components and the pressure are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FineField {
    pub grid_size: usize,
    pub pressure: Vec<f64>,
    pub velocity_x: Vec<f64>,
    pub velocity_y: Vec<f64>,
    pub fluid: Vec<bool>,
}

impl FineField {
    pub fn zeros(grid_size: usize) -> Self {
        let n = grid_size * grid_size;
        FineField {
            grid_size,
            pressure: vec![0.0; n],
            velocity_x: vec![0.0; n],
            velocity_y: vec![0.0; n],
            fluid: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn is_empty(&self) -> bool {
        self.grid_size == 0
    }

    pub fn block(&self, b: Block) -> &[f64] {
        match b {
            Block::Pressure => &self.pressure,
            Block::VelocityX => &self.velocity_x,
            Block::VelocityY => &self.velocity_y,
        }
    }

    pub fn block_mut(&mut self, b: Block) -> &mut Vec<f64> {
        match b {
            Block::Pressure => &mut self.pressure,
            Block::VelocityX => &mut self.velocity_x,
            Block::VelocityY => &mut self.velocity_y,
        }
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid.iter().filter(|&&f| f).count()
    }

    /// Checks lengths, finiteness and zero velocity in solid points.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if Block::ALL.iter().any(|&b| self.block(b).len() != n) || self.fluid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "field arrays do not match grid {}",
                self.grid_size
            )));
        }
        for b in Block::ALL {
            if let Some(k) = self.block(b).iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "non-finite {} value at lattice index {k}",
                    b.name()
                )));
            }
        }
        for k in 0..n {
            if !self.fluid[k] && (self.velocity_x[k] != 0.0 || self.velocity_y[k] != 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "nonzero velocity in solid lattice point {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> FineField {
        let mut out = self.clone();
        for b in Block::ALL {
            out.block_mut(b).iter_mut().for_each(|v| *v *= c);
        }
        out
    }
}
