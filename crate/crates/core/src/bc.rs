use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Driving conditions shared by the fine Stokes model and the Darcy emulator.
///
/// Traction `-P0 n` at the inlet face `x = 0`, `-P_out n` at the outlet face
/// `x = 1`, prescribed wall velocity on `y = 0` and `y = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryConditions {
    pub inlet_pressure: f64,
    #[serde(default)]
    pub outlet_pressure: f64,
    #[serde(default)]
    pub wall_velocity: [f64; 2],
    #[serde(default = "unit")]
    pub viscosity: f64,
}

fn unit() -> f64 {
    1.0
}

impl Default for BoundaryConditions {
    fn default() -> Self {
        BoundaryConditions {
            inlet_pressure: 1.0,
            outlet_pressure: 0.0,
            wall_velocity: [0.0, 0.0],
            viscosity: 1.0,
        }
    }
}

impl BoundaryConditions {
    pub fn validate(&self) -> Result<()> {
        if self.viscosity != 1.0 {
            return Err(Error::InvalidConfig(format!(
                "viscosity is fixed to 1, got {}",
                self.viscosity
            )));
        }
        let finite = [
            self.inlet_pressure,
            self.outlet_pressure,
            self.wall_velocity[0],
            self.wall_velocity[1],
        ];
        if !finite.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(
                "boundary values must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn pressure_drop(&self) -> f64 {
        self.inlet_pressure - self.outlet_pressure
    }

    pub fn scaled(&self, c: f64) -> Self {
        BoundaryConditions {
            inlet_pressure: c * self.inlet_pressure,
            outlet_pressure: c * self.outlet_pressure,
            wall_velocity: [c * self.wall_velocity[0], c * self.wall_velocity[1]],
            viscosity: self.viscosity,
        }
    }
}
