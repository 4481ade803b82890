//! Generation and persistence of solved samples.
//!
//! A dataset directory holds `dataset.json`, one `sample_NNNN/` directory per
//! sample and `solves.jsonl`, an append-only log with the diagnostics of every
//! Stokes solve including wall time. Everything except the log is a
//! deterministic function of the spec.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bc::BoundaryConditions;
use crate::error::{Error, Result};
use crate::field::FineField;
use crate::harness::fieldfile::{load_field, save_field, FieldFile};
use crate::microstructure::{porosity, sample_exclusions, Microstructure, MicrostructureConfig, SolidMask};
use crate::seed::{derive_seed, stream};
use crate::stokes::{lattice_fluid_from_mask, solve_stokes_fe, SolveDiagnostics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => stream::TRAIN_SPLIT,
            Split::Test => stream::TEST_SPLIT,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "split must be train or test, got {other:?}"
            ))),
        }
    }
}

/// Everything that determines the content of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub split: Split,
    pub count: usize,
    pub seed: u64,
    pub microstructure: MicrostructureConfig,
    pub bc: BoundaryConditions,
    pub mesh_resolution: usize,
    pub lattice: usize,
    /// Resampling attempts per sample before giving up.
    pub max_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub seed: u64,
    pub reason: String,
}

/// Deterministic solver diagnostics (wall time goes to the solve log).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredDiagnostics {
    pub mesh_resolution: usize,
    pub velocity_dofs: usize,
    pub pressure_dofs: usize,
    pub nonzeros: usize,
    pub relative_residual: f64,
    pub refinement_steps: usize,
}

impl From<&SolveDiagnostics> for StoredDiagnostics {
    fn from(d: &SolveDiagnostics) -> Self {
        StoredDiagnostics {
            mesh_resolution: d.mesh_resolution,
            velocity_dofs: d.velocity_dofs,
            pressure_dofs: d.pressure_dofs,
            nonzeros: d.nonzeros,
            relative_residual: d.relative_residual,
            refinement_steps: d.refinement_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub index: usize,
    pub split: Split,
    /// Seed the sample was drawn from after any substitutions.
    pub seed: u64,
    /// Seeds tried first and why they were rejected.
    pub substitutions: Vec<Substitution>,
    pub exclusions: usize,
    /// Fluid fraction of the solver mask.
    pub porosity: f64,
    pub bc: BoundaryConditions,
    pub lattice: usize,
    pub diagnostics: StoredDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub microstructure: Microstructure,
    pub field: FineField,
    pub mask: SolidMask,
    pub meta: SampleMeta,
}

pub fn sample_dir(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("sample_{index:04}"))
}

/// Seed of attempt `a` for sample `index`.
pub fn attempt_seed(master: u64, split: Split, index: usize, attempt: usize) -> u64 {
    let base = derive_seed(derive_seed(master, split.stream()), index as u64);
    if attempt == 0 {
        base
    } else {
        derive_seed(base, attempt as u64)
    }
}

struct Solved {
    ms: Microstructure,
    field: FineField,
    mask: SolidMask,
    meta: SampleMeta,
    wall_times: Vec<(u64, Option<f64>)>,
}

fn solve_sample(spec: &DatasetSpec, index: usize) -> Result<Solved> {
    let mut substitutions = Vec::new();
    let mut wall_times = Vec::new();
    for attempt in 0..spec.max_attempts.max(1) {
        let seed = attempt_seed(spec.seed, spec.split, index, attempt);
        let outcome = sample_exclusions(&spec.microstructure, seed)
            .and_then(|ms| solve_stokes_fe(&ms, &spec.bc, spec.mesh_resolution).map(|s| (ms, s)));
        match outcome {
            Ok((ms, sol)) => {
                wall_times.push((seed, Some(sol.diagnostics.wall_time_s)));
                let field = sol.sample(spec.lattice);
                let mask = sol.mask().clone();
                let meta = SampleMeta {
                    index,
                    split: spec.split,
                    seed,
                    substitutions,
                    exclusions: ms.len(),
                    porosity: porosity(&mask),
                    bc: spec.bc,
                    lattice: spec.lattice,
                    diagnostics: (&sol.diagnostics).into(),
                };
                return Ok(Solved {
                    ms,
                    field,
                    mask,
                    meta,
                    wall_times,
                });
            }
            Err(e) => {
                warn!("{} sample {index}: seed {seed} rejected ({e}); resampling", spec.split.name());
                wall_times.push((seed, None));
                substitutions.push(Substitution {
                    seed,
                    reason: e.kind().to_string(),
                });
            }
        }
    }
    Err(Error::InvalidConfig(format!(
        "{} sample {index}: no usable microstructure after {} attempts",
        spec.split.name(),
        spec.max_attempts
    )))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable record");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn mask_values(mask: &SolidMask) -> Vec<f64> {
    mask.cells().iter().map(|&s| if s { 1.0 } else { 0.0 }).collect()
}

/// Writes one sample directory.
pub fn save_sample(dir: &Path, sample: &StoredSample) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = sample.field.grid_size;
    std::fs::write(dir.join("microstructure.json"), sample.microstructure.to_json() + "\n")
        .map_err(|e| Error::io(dir.join("microstructure.json"), e))?;
    save_field(&dir.join("pressure.pmrf"), &FieldFile::square(g, &sample.field.pressure)?)?;
    save_field(&dir.join("vx.pmrf"), &FieldFile::square(g, &sample.field.velocity_x)?)?;
    save_field(&dir.join("vy.pmrf"), &FieldFile::square(g, &sample.field.velocity_y)?)?;
    let n = sample.mask.resolution();
    save_field(&dir.join("mask.pmrf"), &FieldFile::square(n, &mask_values(&sample.mask))?)?;
    write_json(&dir.join("meta.json"), &sample.meta)
}

pub fn load_sample(dir: &Path) -> Result<StoredSample> {
    let ms_path = dir.join("microstructure.json");
    let microstructure: Microstructure = read_json(&ms_path)?;
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let mask_path = dir.join("mask.pmrf");
    let m = load_field(&mask_path)?;
    if m.rows != m.cols || m.data.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::format(&mask_path, "mask must be square with 0/1 entries"));
    }
    let mask = SolidMask::from_cells(m.rows, m.data.iter().map(|&v| v == 1.0).collect())?;
    let mut blocks = Vec::with_capacity(3);
    for name in ["pressure", "vx", "vy"] {
        let path = dir.join(format!("{name}.pmrf"));
        let f = load_field(&path)?;
        if f.rows != f.cols || f.rows != meta.lattice {
            return Err(Error::format(&path, format!("expected a {0}x{0} field", meta.lattice)));
        }
        blocks.push(f.data);
    }
    let vy = blocks.pop().unwrap();
    let vx = blocks.pop().unwrap();
    let p = blocks.pop().unwrap();
    let field = FineField {
        grid_size: meta.lattice,
        pressure: p,
        velocity_x: vx,
        velocity_y: vy,
        fluid: lattice_fluid_from_mask(&mask, meta.lattice),
    };
    field
        .validate()
        .map_err(|e| Error::format(dir, format!("stored field violates invariants: {e}")))?;
    let recomputed = porosity(&mask);
    if (recomputed - meta.porosity).abs() > 1e-12 {
        return Err(Error::format(
            dir.join("meta.json"),
            format!("porosity {} does not match the mask ({recomputed})", meta.porosity),
        ));
    }
    Ok(StoredSample {
        microstructure,
        field,
        mask,
        meta,
    })
}

/// Solves `spec.count` samples in parallel and writes them under `dir`.
pub fn generate_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<SampleMeta>> {
    spec.microstructure.validate()?;
    spec.bc.validate()?;
    if spec.count == 0 || spec.lattice == 0 {
        return Err(Error::InvalidConfig("dataset needs at least one sample and a lattice".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    info!(
        "generating {} {} samples into {}",
        spec.count,
        spec.split.name(),
        dir.display()
    );
    let solved: Vec<Solved> = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let s = solve_sample(spec, i)?;
            save_sample(
                &sample_dir(dir, i),
                &StoredSample {
                    microstructure: s.ms.clone(),
                    field: s.field.clone(),
                    mask: s.mask.clone(),
                    meta: s.meta.clone(),
                },
            )?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let log_path = dir.join("solves.jsonl");
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    for s in &solved {
        for (seed, wall) in &s.wall_times {
            let record = serde_json::json!({
                "split": spec.split,
                "index": s.meta.index,
                "seed": seed,
                "accepted": wall.is_some(),
                "wall_time_s": wall,
                "diagnostics": if *seed == s.meta.seed { Some(&s.meta.diagnostics) } else { None },
            });
            writeln!(log, "{record}").map_err(|e| Error::io(&log_path, e))?;
        }
    }
    write_json(&dir.join("dataset.json"), spec)?;
    Ok(solved.into_iter().map(|s| s.meta).collect())
}

/// Spec recorded by `generate_dataset`, if the directory holds a dataset.
pub fn dataset_spec(dir: &Path) -> Option<DatasetSpec> {
    read_json(&dir.join("dataset.json")).ok()
}

/// Loads every sample of a generated dataset in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<StoredSample>> {
    let spec: DatasetSpec = read_json(&dir.join("dataset.json"))?;
    (0..spec.count)
        .into_par_iter()
        .map(|i| load_sample(&sample_dir(dir, i)))
        .collect()
}

/// Reuses `dir` if it already holds a dataset generated from `spec`,
/// otherwise generates it.
pub fn ensure_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<StoredSample>> {
    if dataset_spec(dir).as_ref() == Some(spec) {
        if let Ok(samples) = load_dataset(dir) {
            info!("reusing {} samples in {}", samples.len(), dir.display());
            return Ok(samples);
        }
    }
    generate_dataset(spec, dir)?;
    load_dataset(dir)
}
