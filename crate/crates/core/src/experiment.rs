//! Ablation grids: every cell is a configuration trained over several seeds.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{FusionPoint, LossMode, ModelKind};
use crate::pipeline::Prepared;
use crate::train::{RunDir, Trainer};

/// Contrastive weights of the "+C" rows.
pub const CONTRASTIVE_WEIGHT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationTable {
    /// Fusion point × number of entropy losses, plus S*.
    Fusion,
    /// S, PS and TS-Net without and with the contrastive terms.
    Models,
}

impl FromStr for AblationTable {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(AblationTable::Fusion),
            "models" => Ok(AblationTable::Models),
            _ => Err(Error::config(
                None,
                format!("unknown ablation `{s}` (expected fusion or models)"),
            )),
        }
    }
}

/// One configuration of a grid, placed at `(row, column)` of its table.
#[derive(Debug, Clone)]
pub struct Cell {
    pub row: String,
    pub column: String,
    pub config: ExperimentConfig,
}

impl Cell {
    /// First 12 hex digits of the SHA-256 of the serialized configuration.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.config.serialize().as_bytes());
        digest.iter().take(6).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    fn slug(&self) -> String {
        format!("{}_{}", self.row, self.column)
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect()
    }
}

pub const ENTROPY_COLUMNS: [&str; 2] = ["3 Entropy losses", "1 Entropy loss"];

/// The cells of `table`, derived from `base`.
pub fn cells(table: AblationTable, base: &ExperimentConfig) -> Vec<Cell> {
    let with = |kind: ModelKind, mode: LossMode, weight: f64| {
        let mut c = base.clone();
        c.model.kind = kind;
        c.model.loss_mode = mode;
        c.train.loss.lambda = weight;
        c.train.loss.beta = weight;
        c
    };
    let mut out = Vec::new();
    match table {
        AblationTable::Fusion => {
            for point in [FusionPoint::Fc3, FusionPoint::Fc2, FusionPoint::Fc1] {
                let row = match point {
                    FusionPoint::Fc3 => "FC3 (TS-Net)".to_string(),
                    p => p.label().to_string(),
                };
                for (column, mode) in ENTROPY_COLUMNS
                    .iter()
                    .zip([LossMode::ThreeEntropy, LossMode::OneEntropy])
                {
                    out.push(Cell {
                        row: row.clone(),
                        column: column.to_string(),
                        config: with(ModelKind::TSNetFusionAt(point), mode, 0.0),
                    });
                }
            }
            out.push(Cell {
                row: "Feature tower".into(),
                column: ENTROPY_COLUMNS[1].into(),
                config: with(
                    ModelKind::TSNetFusionAt(FusionPoint::FeatureTower),
                    LossMode::OneEntropy,
                    0.0,
                ),
            });
            out.push(Cell {
                row: "S*".into(),
                column: ENTROPY_COLUMNS[1].into(),
                config: with(ModelKind::SStar, LossMode::OneEntropy, 0.0),
            });
        }
        AblationTable::Models => {
            for (suffix, weight) in [("", 0.0), ("+C", CONTRASTIVE_WEIGHT)] {
                for (name, kind) in [
                    ("S", ModelKind::S),
                    ("PS", ModelKind::PS),
                    ("TS-Net", ModelKind::TSNet),
                ] {
                    out.push(Cell {
                        row: format!("{name}{suffix}"),
                        column: "95%ErrRate".into(),
                        config: with(kind, LossMode::ThreeEntropy, weight),
                    });
                }
            }
        }
    }
    out
}

/// Best validation error rates of one cell over its runs.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub row: String,
    pub column: String,
    pub config_hash: String,
    /// One value per run, in seed order.
    pub values: Vec<f64>,
}

impl CellResult {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Sample standard deviation; 0 for a single run.
    pub fn std(&self) -> f64 {
        let n = self.values.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

/// Trains `cell` once with seed `base seed + run`; returns its best
/// validation error rate.
pub fn run_once(cell: &Cell, run: usize, data: &Prepared, out: Option<&Path>) -> Result<f64> {
    let mut cfg = cell.config.resolved_train(data.synthetic);
    cfg.seed = cfg.seed.wrapping_add(run as u64);
    let mut trainer = Trainer::new(cell.config.model, cfg, data.stats)?;
    let dir = out
        .map(|o| RunDir::create(o.join(cell.slug()).join(format!("run{run}"))))
        .transpose()?;
    trainer.fit(&data.train, &data.val, cfg.epochs, dir.as_ref())?;
    Ok(trainer.best_val)
}

/// Every cell × run, trained in parallel; results are in cell order.
pub fn run_cells(
    cells: &[Cell],
    runs: usize,
    data: &Prepared,
    out: Option<&Path>,
) -> Result<Vec<CellResult>> {
    if runs == 0 {
        return Err(Error::config(None, "--runs must be positive"));
    }
    for c in cells {
        c.config.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..runs).map(move |r| (c, r)))
        .collect();
    let values = jobs
        .par_iter()
        .map(|&(c, r)| {
            let v = run_once(&cells[c], r, data, out)?;
            log::info!("{} / {} run {r}: {v:.4}", cells[c].row, cells[c].column);
            Ok(v)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(cells
        .iter()
        .zip(values.chunks(runs))
        .map(|(c, v)| CellResult {
            row: c.row.clone(),
            column: c.column.clone(),
            config_hash: c.config_hash(),
            values: v.to_vec(),
        })
        .collect())
}

fn ordered_unique<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut v: Vec<&str> = Vec::new();
    for s in it {
        if !v.contains(&s) {
            v.push(s);
        }
    }
    v
}

/// Rows × columns of `mean ± std [hash]`; undefined cells print `n/a`.
pub fn format_table(results: &[CellResult]) -> String {
    let rows = ordered_unique(results.iter().map(|r| r.row.as_str()));
    let cols = ordered_unique(results.iter().map(|r| r.column.as_str()));
    let cell = |row: &str, col: &str| {
        results
            .iter()
            .find(|r| r.row == row && r.column == col)
            .map_or("n/a".to_string(), |r| {
                format!("{:.2} ± {:.2} [{}]", r.mean(), r.std(), r.config_hash)
            })
    };
    let mut grid: Vec<Vec<String>> = vec![std::iter::once(String::new())
        .chain(cols.iter().map(|c| c.to_string()))
        .collect()];
    for row in &rows {
        grid.push(
            std::iter::once(row.to_string())
                .chain(cols.iter().map(|c| cell(row, c)))
                .collect(),
        );
    }
    let widths: Vec<usize> = (0..=cols.len())
        .map(|k| grid.iter().map(|r| r[k].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in grid.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(v, &w)| format!("{v}{}", " ".repeat(w - v.chars().count())))
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(
                s,
                "{}",
                "-".repeat(widths.iter().sum::<usize>() + 2 * cols.len())
            );
        }
    }
    s
}

pub const CSV_HEADER: &str = "row,column,mean,std,runs,config_hash,values";

pub fn format_csv(results: &[CellResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        let values: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.row,
            r.column,
            r.mean(),
            r.std(),
            r.values.len(),
            r.config_hash,
            values.join(";")
        );
    }
    s
}
