//! α/β grids of distillation runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{distill, init_student, DistillConfig, Method, RunDir};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::grouping::GroupPartition;
use crate::model::Mlp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub tail_acc: f64,
    pub all_acc: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "alpha,beta,seed,tail_acc,all_acc";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.alpha, self.beta, self.seed, self.tail_acc, self.all_acc
        )
    }

    pub fn to_csv(rows: &[AblationRow]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Directory name of one `(cell, seed)` run under an ablation root.
pub fn cell_dir_name(cell: GridCell, seed: u64) -> String {
    format!("a{}_b{}_s{}", cell.alpha, cell.beta, seed)
}

/// Runs every `(cell, seed)` pair with the long-tailed objective. Cells run in
/// parallel; each is deterministic on its own, and rows come back in
/// cell-major, seed-minor order. With `cell_root`, every pair records its
/// config and artifacts in its own directory beneath it.
#[allow(clippy::too_many_arguments)]
pub fn run_grid(
    teacher: &Mlp,
    train: &Dataset,
    test: &Dataset,
    partition: &GroupPartition,
    base: &DistillConfig,
    cells: &[GridCell],
    seeds: &[u64],
    cell_root: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    let jobs: Vec<(GridCell, u64)> = cells
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    jobs.par_iter()
        .map(|&(cell, seed)| {
            let cfg = DistillConfig {
                method: Method::Ltkd,
                alpha: cell.alpha,
                beta: cell.beta,
                seed,
                ..base.clone()
            };
            let student = init_student(&cfg, train.dim(), train.num_classes)?;
            let out = distill(teacher, student, train, test, partition, &cfg)?;
            if let Some(root) = cell_root {
                let dir = RunDir::create(root.join(cell_dir_name(cell, seed)))?;
                dir.write_config(&cfg)?;
                dir.record_distill(&out)?;
            }
            Ok(AblationRow {
                alpha: cell.alpha,
                beta: cell.beta,
                seed,
                tail_acc: out.report.tail,
                all_acc: out.report.all,
            })
        })
        .collect()
}

/// Sweep α at a fixed β, then sweep β at the best α (or a pinned one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoSweep {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub fixed_beta: f64,
    /// Pin the α of the second sweep instead of taking the first sweep's best.
    pub fixed_alpha: Option<f64>,
}

impl Default for TwoSweep {
    fn default() -> Self {
        Self {
            alphas: vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            betas: vec![1.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            fixed_beta: 1.0,
            fixed_alpha: None,
        }
    }
}

/// Returns all rows (first sweep, then second) and the α used for the β sweep.
/// The best α maximizes seed-mean overall accuracy; ties go to the first
/// listed.
#[allow(clippy::too_many_arguments)]
pub fn two_sweep(
    teacher: &Mlp,
    train: &Dataset,
    test: &Dataset,
    partition: &GroupPartition,
    base: &DistillConfig,
    sweep: &TwoSweep,
    seeds: &[u64],
    cell_root: Option<&Path>,
) -> Result<(Vec<AblationRow>, f64)> {
    if sweep.alphas.is_empty() || sweep.betas.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    let first: Vec<GridCell> = sweep
        .alphas
        .iter()
        .map(|&alpha| GridCell { alpha, beta: sweep.fixed_beta })
        .collect();
    let mut rows = run_grid(teacher, train, test, partition, base, &first, seeds, cell_root)?;

    let best_alpha = match sweep.fixed_alpha {
        Some(a) => a,
        None => {
            let mean_all = |alpha: f64| {
                let v: Vec<f64> = rows.iter().filter(|r| r.alpha == alpha).map(|r| r.all_acc).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            let mut best = sweep.alphas[0];
            for &a in &sweep.alphas[1..] {
                if mean_all(a) > mean_all(best) {
                    best = a;
                }
            }
            best
        }
    };
    let second: Vec<GridCell> = sweep
        .betas
        .iter()
        .map(|&beta| GridCell { alpha: best_alpha, beta })
        .collect();
    rows.extend(run_grid(teacher, train, test, partition, base, &second, seeds, cell_root)?);
    Ok((rows, best_alpha))
}
