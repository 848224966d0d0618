//! Cross-validated sweeps over the (fold, λ, ε) grid with resumable cells.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::model::{generate, seeds, train_model};
use crate::error::{FlipError, Result};
use crate::evaluation::{evaluate, AdversaryConfig, EvalReport};
use crate::rng::derive_seed;
use crate::schema_io::{load_dataset, split_cv, Dataset, Fold, TabularSchema};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const SYNTHETIC_CSV: &str = "synthetic.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const CELLS_DIR: &str = "cells";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub fold: usize,
    pub lambda_index: usize,
    pub epsilon_index: usize,
    pub lambda: f64,
    pub epsilon: Option<f64>,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("fold{}_lambda{}_epsilon{}", self.fold, self.lambda_index, self.epsilon_index)
    }

    pub fn dir(&self, out: &Path) -> PathBuf {
        out.join(CELLS_DIR).join(self.name())
    }
}

/// Every cell of the grid, seeded from the master seed. Cells that differ
/// only in λ share their seed, so they start from the same initialization
/// and phase-1 trajectory; seeds of distinct (fold, ε) pairs are checked to
/// be pairwise distinct.
pub fn plan_cells(cfg: &RunConfig) -> Result<Vec<Cell>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for fold in cfg.folds_to_run() {
        for (li, &lambda) in cfg.lambdas.iter().enumerate() {
            for (ei, &epsilon) in cfg.epsilons.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &[fold as u64, ei as u64]);
                if li == 0 && !seen.insert(seed) {
                    return Err(FlipError::InvalidArgument("cell seed collision; change the master seed".into()));
                }
                cells.push(Cell {
                    fold,
                    lambda_index: li,
                    epsilon_index: ei,
                    lambda,
                    epsilon,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

fn write_atomic(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("partial");
    write(&tmp)?;
    fs::rename(&tmp, path).map_err(|e| FlipError::io(path, e))
}

/// Train, generate and evaluate one cell, writing its checkpoint,
/// synthetic table and report under the cell directory.
pub fn run_cell(cfg: &RunConfig, fold: &Fold, cell: &Cell) -> Result<EvalReport> {
    let dir = cell.dir(&cfg.out_dir);
    fs::create_dir_all(&dir).map_err(|e| FlipError::io(&dir, e))?;
    log::info!("cell {}: lambda {} epsilon {:?}", cell.name(), cell.lambda, cell.epsilon);
    let ckpt = train_model(&fold.train, cfg, cell.lambda, cell.epsilon, cell.seed)?;
    ckpt.save(dir.join(CHECKPOINT_DIR))?;
    let count = cfg.synthetic_rows.unwrap_or(fold.train.n());
    let generation_seed = derive_seed(cell.seed, &[seeds::GENERATION]);
    let synth = generate(&ckpt, count, generation_seed)?;
    synth.write_csv(dir.join(SYNTHETIC_CSV))?;
    let eval_cfg = AdversaryConfig {
        seed: derive_seed(cell.seed, &[seeds::EVALUATION]),
        ..cfg.evaluation.clone()
    };
    let mut report = evaluate(&fold.train, &fold.test, &synth, &eval_cfg)?;
    let m = &mut report.metadata;
    m.fold = Some(cell.fold);
    m.lambda = Some(cell.lambda);
    m.epsilon = cell.epsilon;
    m.seeds.insert("cell".into(), cell.seed);
    m.seeds.insert("generation".into(), generation_seed);
    m.seeds.insert("master".into(), cfg.seed);
    if let Some(p) = &ckpt.privacy {
        m.seeds.insert("noise".into(), derive_seed(cell.seed, &[seeds::NOISE]));
        log::info!("cell {}: spent epsilon {:.4} of {}", cell.name(), p.spent_eps, p.target_eps);
        let path = dir.join("privacy.json");
        fs::write(&path, serde_json::to_string_pretty(p)? + "\n").map_err(|e| FlipError::io(&path, e))?;
    }
    write_atomic(&dir.join(REPORT_CSV), |p| report.write_csv(p))?;
    write_atomic(&dir.join(REPORT_JSON), |p| report.write_json(p))?;
    Ok(report)
}

#[derive(Debug)]
pub struct SweepSummary {
    pub completed: Vec<Cell>,
    pub skipped: Vec<Cell>,
    pub failed: Vec<(Cell, FlipError)>,
}

pub fn load_inputs(cfg: &RunConfig) -> Result<Dataset> {
    let schema = TabularSchema::from_json_file(&cfg.schema)?;
    load_dataset(&cfg.dataset, &schema)
}

/// Evaluate a synthetic CSV against real training and test CSVs that share
/// one schema.
pub fn evaluate_files(
    schema: &Path,
    real_train: &Path,
    real_test: &Path,
    synthetic: &Path,
    cfg: &AdversaryConfig,
) -> Result<EvalReport> {
    let schema = TabularSchema::from_json_file(schema)?;
    let train = load_dataset(real_train, &schema)?;
    let test = load_dataset(real_test, &schema)?;
    let synth = load_dataset(synthetic, &schema)?;
    evaluate(&train, &test, &synth, cfg)
}

/// Run every cell whose report is missing. A failing cell is recorded and
/// the remaining cells proceed.
pub fn run_experiment(cfg: &RunConfig) -> Result<SweepSummary> {
    let cells = plan_cells(cfg)?;
    let data = load_inputs(cfg)?;
    run_experiment_on(cfg, &data, &cells)
}

pub fn run_experiment_on(cfg: &RunConfig, data: &Dataset, cells: &[Cell]) -> Result<SweepSummary> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| FlipError::io(&cfg.out_dir, e))?;
    cfg.save(cfg.out_dir.join("run_config.json"))?;
    let plan_path = cfg.out_dir.join("cells.json");
    fs::write(&plan_path, serde_json::to_string_pretty(cells)? + "\n").map_err(|e| FlipError::io(&plan_path, e))?;
    let folds = split_cv(data, cfg.folds, derive_seed(cfg.seed, &[u64::MAX]))?;
    let mut summary = SweepSummary {
        completed: Vec::new(),
        skipped: Vec::new(),
        failed: Vec::new(),
    };
    for cell in cells {
        if cell.dir(&cfg.out_dir).join(REPORT_JSON).exists() {
            summary.skipped.push(cell.clone());
            continue;
        }
        match run_cell(cfg, &folds[cell.fold], cell) {
            Ok(_) => summary.completed.push(cell.clone()),
            Err(e) => {
                log::error!("cell {} failed: {e}", cell.name());
                summary.failed.push((cell.clone(), e));
            }
        }
    }
    Ok(summary)
}
