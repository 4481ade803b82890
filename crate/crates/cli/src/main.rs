use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use porous_rom::error::{Error, Result};
use porous_rom::field::Block;
use porous_rom::harness::dataset::{dataset_spec, ensure_dataset, load_dataset, load_sample, Split};
use porous_rom::harness::fieldfile::{save_field, FieldFile};
use porous_rom::harness::study::{run_study, StudyConfig};
use porous_rom::seed::{derive_seed, stream};
use porous_rom::surrogate::{
    evaluate, extract_features, predict_with_features, train, PosteriorState, PredictiveField,
    TrainConfig,
};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "porous-rom", version, about = "Probabilistic reduced-order models of porous-media flow")]
struct Cli {
    /// Master seed; overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and store one split of the study datasets.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        split: Split,
    },
    /// Fit a surrogate to a stored dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Coarse emulator grid, e.g. 4x4.
        #[arg(long, value_parser = parse_grid)]
        grid: (usize, usize),
        #[arg(long)]
        out: PathBuf,
        /// Optional optimizer settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Predictive mean and standard deviation for one stored sample.
    Predict {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        /// Directory receiving the predicted fields.
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
    },
    /// Error and calibration metrics over a stored dataset.
    Evaluate {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Train and evaluate every (N, grid) pair of a study.
    Study {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected KxK, got {s:?}"))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| format!("invalid grid dimension {t:?}"))
    };
    Ok((parse(a)?, parse(b)?))
}

/// Reads a JSON or TOML document, chosen by extension (TOML otherwise).
fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn study_config(path: &Path, seed: Option<u64>) -> Result<StudyConfig> {
    let mut config: StudyConfig = read_config(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn block_json(p: &PredictiveField, out: &Path) -> Result<serde_json::Value> {
    std::fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })?;
    let g = p.mean.grid_size;
    let mut files = Vec::new();
    for b in Block::ALL {
        for (tag, f) in [("mean", &p.mean), ("std", &p.std)] {
            let path = out.join(format!("{}_{tag}.pmrf", b.name()));
            save_field(&path, &FieldFile::square(g, f.block(b))?)?;
            files.push(path.display().to_string());
        }
    }
    Ok(json!(files))
}

fn predict_stored(
    state: &PosteriorState,
    sample: &porous_rom::harness::dataset::StoredSample,
    samples: usize,
    seed: u64,
) -> Result<PredictiveField> {
    let f = extract_features(&sample.microstructure, state.coarse_grid, state.feature_resolution)?;
    predict_with_features(&f, &sample.field.fluid, state, samples, seed)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let master = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Generate { config, split } => {
            let config = study_config(&config, cli.seed)?;
            config.validate()?;
            let dir = config.data_dir(split);
            let samples = ensure_dataset(&config.dataset_spec(split), &dir)?;
            Ok(json!({
                "split": split,
                "count": samples.len(),
                "dir": dir,
                "substitutions": samples.iter().map(|s| s.meta.substitutions.len()).sum::<usize>(),
            }))
        }
        Command::Train {
            data,
            grid,
            out,
            config,
        } => {
            let mut tc: TrainConfig = match &config {
                Some(p) => read_config(p)?,
                None => TrainConfig::default(),
            };
            let spec = dataset_spec(&data).ok_or_else(|| Error::Format {
                path: data.join("dataset.json"),
                reason: "missing or unreadable dataset description".into(),
            })?;
            tc.coarse_grid = grid;
            tc.bc = spec.bc;
            tc.mesh_resolution = spec.mesh_resolution;
            if cli.seed.is_some() || config.is_none() {
                tc.seed = derive_seed(master, stream::TRAINING);
            }
            let samples = load_dataset(&data)?;
            let pairs: Vec<_> = samples
                .into_iter()
                .map(|s| (s.microstructure, s.field))
                .collect();
            let state = train(&pairs, &tc)?;
            state.save(&out)?;
            Ok(json!({
                "state": out,
                "training_size": state.training_size,
                "iterations": state.iterations,
                "converged": state.converged,
                "final_elbo": state.final_elbo(),
            }))
        }
        Command::Predict {
            state,
            sample,
            samples,
            out,
        } => {
            let state = PosteriorState::load(&state)?;
            let stored = load_sample(&sample)?;
            let seed = derive_seed(master, stream::PREDICTION);
            let p = predict_stored(&state, &stored, samples, seed)?;
            let files = block_json(&p, &out)?;
            let m = evaluate(std::slice::from_ref(&p), std::slice::from_ref(&stored.field))?;
            Ok(json!({ "files": files, "metrics": m }))
        }
        Command::Evaluate {
            state,
            data,
            samples,
        } => {
            let state = PosteriorState::load(&state)?;
            let stored = load_dataset(&data)?;
            let base = derive_seed(master, stream::PREDICTION);
            let preds = stored
                .par_iter()
                .enumerate()
                .map(|(i, s)| predict_stored(&state, s, samples, derive_seed(base, i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let truths: Vec<_> = stored.iter().map(|s| s.field.clone()).collect();
            Ok(serde_json::to_value(evaluate(&preds, &truths)?).expect("metrics serialize"))
        }
        Command::Study { config } => {
            let config = study_config(&config, cli.seed)?;
            let report = run_study(&config)?;
            Ok(json!({
                "report_csv": report.report_csv,
                "report_json": report.report_json,
                "plots": report.plots,
                "rows": report.rows,
                "total_s": report.timings.total_s,
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_millis()
        .init();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            let record = json!({ "error": "InvalidConfig", "message": e.to_string() });
            eprintln!("{record}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(summary) => {
            info!("done");
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::parse_grid;

    #[test]
    fn grid_argument() {
        assert_eq!(parse_grid("4x4"), Ok((4, 4)));
        assert_eq!(parse_grid("2X3"), Ok((2, 3)));
        assert!(parse_grid("4").is_err());
        assert!(parse_grid("0x2").is_err());
    }
}
