//! Training-size versus emulator-resolution study.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bc::BoundaryConditions;
use crate::error::{Error, Result};
use crate::field::{Block, FineField};
use crate::harness::dataset::{ensure_dataset, load_dataset, DatasetSpec, Split, StoredSample};
use crate::harness::svg::prediction_svg;
use crate::microstructure::MicrostructureConfig;
use crate::seed::{derive_seed, stream};
use crate::surrogate::{
    evaluate, extract_features, predict_with_features, train_on_features, BlockMetrics, Metrics,
    PosteriorState, PredictiveField, TrainConfig, TrainingSample,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyPair {
    pub n_train: usize,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub microstructure: MicrostructureConfig,
    pub bc: BoundaryConditions,
    pub mesh_resolution: usize,
    pub lattice: usize,
    pub feature_resolution: usize,
    pub pairs: Vec<StudyPair>,
    pub n_test: usize,
    pub predictive_samples: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Existing training pool; generated under `output_dir` when absent.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub max_attempts: usize,
    /// Optimizer settings; grid, mesh, features, bc and seed are set per pair.
    pub train: TrainConfig,
    /// Test sample drawn in the per-pair SVG.
    pub plot_sample: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            microstructure: MicrostructureConfig::default(),
            bc: BoundaryConditions::default(),
            mesh_resolution: 128,
            lattice: 128,
            feature_resolution: 256,
            pairs: vec![
                StudyPair {
                    n_train: 8,
                    grid: (2, 2),
                },
                StudyPair {
                    n_train: 80,
                    grid: (4, 4),
                },
            ],
            n_test: 32,
            predictive_samples: 256,
            seed: 0,
            output_dir: PathBuf::from("study"),
            train_data: None,
            test_data: None,
            max_attempts: 50,
            train: TrainConfig::default(),
            plot_sample: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.pairs.is_empty() {
            return bad("study needs at least one (n_train, grid) pair".into());
        }
        if let Some(p) = self.pairs.iter().find(|p| p.n_train == 0 || p.grid.0 == 0 || p.grid.1 == 0) {
            return bad(format!("invalid pair {p:?}"));
        }
        if self.n_test == 0 {
            return bad("n_test must be at least 1".into());
        }
        if self.plot_sample >= self.n_test {
            return bad(format!("plot_sample {} outside {} test samples", self.plot_sample, self.n_test));
        }
        if self.predictive_samples < 2 {
            return bad("predictive_samples must be at least 2".into());
        }
        if self.lattice < 2 || self.mesh_resolution < 2 || self.feature_resolution == 0 {
            return bad("mesh, lattice and feature resolutions must be positive".into());
        }
        self.microstructure.validate()?;
        self.bc.validate()?;
        self.pair_config(0).validate()
    }

    pub fn pool_size(&self) -> usize {
        self.pairs.iter().map(|p| p.n_train).sum()
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        DatasetSpec {
            split,
            count: match split {
                Split::Train => self.pool_size(),
                Split::Test => self.n_test,
            },
            seed: self.seed,
            microstructure: self.microstructure.clone(),
            bc: self.bc,
            mesh_resolution: self.mesh_resolution,
            lattice: self.lattice,
            max_attempts: self.max_attempts,
        }
    }

    pub fn data_dir(&self, split: Split) -> PathBuf {
        let given = match split {
            Split::Train => &self.train_data,
            Split::Test => &self.test_data,
        };
        given
            .clone()
            .unwrap_or_else(|| self.output_dir.join("data").join(split.name()))
    }

    fn pair_config(&self, i: usize) -> TrainConfig {
        TrainConfig {
            coarse_grid: self.pairs.get(i).map_or((1, 1), |p| p.grid),
            feature_resolution: self.feature_resolution,
            mesh_resolution: self.mesh_resolution,
            bc: self.bc,
            seed: derive_seed(derive_seed(self.seed, stream::TRAINING), i as u64),
            ..self.train.clone()
        }
    }

    fn pair_name(&self, i: usize) -> String {
        let p = &self.pairs[i];
        format!("pair{i}_n{}_{}x{}", p.n_train, p.grid.0, p.grid.1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub pair: usize,
    pub n_train: usize,
    pub grid: (usize, usize),
    /// First index of this pair's slice of the training pool.
    pub train_offset: usize,
    pub n_test: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_elbo: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTiming {
    pub pair: usize,
    pub train_s: f64,
    pub predict_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub data_s: f64,
    pub pairs: Vec<PairTiming>,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    pub timings: Timings,
    pub report_csv: PathBuf,
    pub report_json: PathBuf,
    pub plots: Vec<PathBuf>,
}

fn fmt(x: f64) -> String {
    format!("{x:.9e}")
}

fn metric_columns(m: &BlockMetrics) -> [String; 4] {
    [
        fmt(m.relative_l2_error),
        fmt(m.log_predictive_density),
        fmt(m.coverage_1sigma),
        fmt(m.coverage_2sigma),
    ]
}

/// CSV lines for `rows`: the pressure headline columns, then each block.
pub fn report_csv(rows: &[StudyRow]) -> String {
    let mut header = vec![
        "pair",
        "n_train",
        "grid",
        "train_offset",
        "n_test",
        "iterations",
        "converged",
        "final_elbo",
        "relative_l2_error",
        "log_predictive_density",
        "coverage_1sigma",
        "coverage_2sigma",
    ]
    .into_iter()
    .map(String::from)
    .collect::<Vec<_>>();
    for b in Block::ALL {
        for m in ["relative_l2_error", "log_predictive_density", "coverage_1sigma", "coverage_2sigma"] {
            header.push(format!("{}_{m}", b.name()));
        }
    }
    let mut out = header.join(",") + "\n";
    for r in rows {
        let mut cols = vec![
            r.pair.to_string(),
            r.n_train.to_string(),
            format!("{}x{}", r.grid.0, r.grid.1),
            r.train_offset.to_string(),
            r.n_test.to_string(),
            r.iterations.to_string(),
            r.converged.to_string(),
            fmt(r.final_elbo),
            fmt(r.metrics.relative_l2_error),
            fmt(r.metrics.log_predictive_density),
            fmt(r.metrics.coverage_1sigma),
            fmt(r.metrics.coverage_2sigma),
        ];
        for b in &r.metrics.blocks {
            cols.extend(metric_columns(b));
        }
        out += &cols.join(",");
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_or_generate(config: &StudyConfig, split: Split) -> Result<Vec<StoredSample>> {
    let dir = config.data_dir(split);
    let given = match split {
        Split::Train => config.train_data.is_some(),
        Split::Test => config.test_data.is_some(),
    };
    if given {
        load_dataset(&dir)
    } else {
        ensure_dataset(&config.dataset_spec(split), &dir)
    }
}

fn check_disjoint(train: &[StoredSample], test: &[StoredSample]) -> Result<()> {
    let seeds = |set: &[StoredSample]| {
        set.iter()
            .flat_map(|s| std::iter::once(s.meta.seed).chain(s.meta.substitutions.iter().map(|x| x.seed)))
            .collect::<std::collections::HashSet<u64>>()
    };
    let shared = seeds(train).intersection(&seeds(test)).count();
    if shared > 0 {
        return Err(Error::InvalidConfig(format!(
            "{shared} sample seeds appear in both the training and the test set"
        )));
    }
    Ok(())
}

struct PairOutcome {
    row: StudyRow,
    timing: PairTiming,
    state: PosteriorState,
    plot: PredictiveField,
}

fn run_pair(
    config: &StudyConfig,
    i: usize,
    offset: usize,
    train: &[StoredSample],
    test: &[StoredSample],
) -> Result<PairOutcome> {
    let pair = config.pairs[i];
    let tc = config.pair_config(i);
    let started = Instant::now();
    let samples = train[offset..offset + pair.n_train]
        .par_iter()
        .map(|s| {
            Ok(TrainingSample {
                features: extract_features(&s.microstructure, pair.grid, config.feature_resolution)?,
                field: s.field.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let state = train_on_features(&samples, &tc)?;
    let train_s = started.elapsed().as_secs_f64();
    info!(
        "{}: {} iterations, converged {}, elbo {:.6e}",
        config.pair_name(i),
        state.iterations,
        state.converged,
        state.final_elbo().unwrap_or(f64::NAN)
    );

    let started = Instant::now();
    let stream = derive_seed(derive_seed(config.seed, stream::PREDICTION), i as u64);
    let predictions = test
        .par_iter()
        .enumerate()
        .map(|(t, s)| {
            let f = extract_features(&s.microstructure, pair.grid, config.feature_resolution)?;
            predict_with_features(&f, &s.field.fluid, &state, config.predictive_samples, derive_seed(stream, t as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let predict_s = started.elapsed().as_secs_f64();
    let truths: Vec<FineField> = test.iter().map(|s| s.field.clone()).collect();
    let metrics = evaluate(&predictions, &truths)?;
    info!(
        "{}: relative error {:.4}, coverage {:.3} / {:.3}",
        config.pair_name(i),
        metrics.relative_l2_error,
        metrics.coverage_1sigma,
        metrics.coverage_2sigma
    );
    Ok(PairOutcome {
        row: StudyRow {
            pair: i,
            n_train: pair.n_train,
            grid: pair.grid,
            train_offset: offset,
            n_test: test.len(),
            iterations: state.iterations,
            converged: state.converged,
            final_elbo: state.final_elbo().unwrap_or(f64::NAN),
            metrics,
        },
        timing: PairTiming {
            pair: i,
            train_s,
            predict_s,
        },
        plot: predictions[config.plot_sample].clone(),
        state,
    })
}

/// Trains one surrogate per pair on consecutive disjoint slices of the
/// training pool and evaluates each on the shared test set.
///
/// Writes `report.csv`, `report.json` and `timings.json` into `output_dir`,
/// and per pair a directory with `state.json` and one SVG per block.
pub fn run_study(config: &StudyConfig) -> Result<StudyReport> {
    config.validate()?;
    let started = Instant::now();
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let train = load_or_generate(config, Split::Train)?;
    let test = load_or_generate(config, Split::Test)?;
    let needed = config.pool_size();
    if train.len() < needed {
        return Err(Error::InsufficientPool {
            needed,
            available: train.len(),
        });
    }
    if test.len() < config.n_test {
        return Err(Error::InsufficientPool {
            needed: config.n_test,
            available: test.len(),
        });
    }
    let test = &test[..config.n_test];
    for s in train.iter().chain(test) {
        if s.field.grid_size != config.lattice {
            return Err(Error::DimensionMismatch(format!(
                "stored lattice {} differs from the study lattice {}",
                s.field.grid_size, config.lattice
            )));
        }
    }
    check_disjoint(&train, test)?;
    let data_s = started.elapsed().as_secs_f64();

    let offsets: Vec<usize> = config
        .pairs
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.n_train;
            Some(o)
        })
        .collect();
    let outcomes = (0..config.pairs.len())
        .into_par_iter()
        .map(|i| run_pair(config, i, offsets[i], &train, test))
        .collect::<Result<Vec<_>>>()?;

    let mut plots = Vec::new();
    let truth = &test[config.plot_sample].field;
    for (i, o) in outcomes.iter().enumerate() {
        let dir = out.join(config.pair_name(i));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        o.state.save(&dir.join("state.json"))?;
        let p = &config.pairs[i];
        for b in Block::ALL {
            let title = format!(
                "N = {}, {}x{} emulator, test sample {}",
                p.n_train, p.grid.0, p.grid.1, config.plot_sample
            );
            let path = dir.join(format!("prediction_{}.svg", b.name()));
            write(&path, &prediction_svg(&title, b, truth, &o.plot))?;
            plots.push(path);
        }
    }

    let rows: Vec<StudyRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let csv_path = out.join("report.csv");
    let json_path = out.join("report.json");
    write(&csv_path, &report_csv(&rows))?;
    let json = serde_json::to_string_pretty(&rows).map_err(|e| Error::json(&json_path, e))?;
    write(&json_path, &(json + "\n"))?;
    let timings = Timings {
        data_s,
        pairs: outcomes.iter().map(|o| o.timing.clone()).collect(),
        total_s: started.elapsed().as_secs_f64(),
    };
    let timings_path = out.join("timings.json");
    let json = serde_json::to_string_pretty(&timings).map_err(|e| Error::json(&timings_path, e))?;
    write(&timings_path, &(json + "\n"))?;
    Ok(StudyReport {
        rows,
        timings,
        report_csv: csv_path,
        report_json: json_path,
        plots,
    })
}
