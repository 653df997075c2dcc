//! Fusion-path and meta-loss ablation grids.

use std::fmt;
use std::io;
use std::str::FromStr;

use crate::dualheads::FusionPaths;
use crate::eval::Subset;
use crate::pipeline::{evaluate_checkpoint, finetune, train_base, PipelineError, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// The eight fusion-path combinations.
    Table4,
    /// The four meta-loss combinations.
    Table5,
}

impl FromStr for Grid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "table4" => Ok(Grid::Table4),
            "table5" => Ok(Grid::Table5),
            other => Err(format!("unknown grid {other:?} (expected table4 or table5)")),
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::Table4 => "table4",
            Grid::Table5 => "table5",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub paths: FusionPaths,
    pub meta_cls: bool,
    pub meta_reg: bool,
}

impl Cell {
    pub const FULL: Cell = Cell {
        paths: FusionPaths { cls_conv: true, cls_fc: true, reg_conv: true, reg_fc: true },
        meta_cls: true,
        meta_reg: true,
    };

    /// Short label such as `cls:conv+fc reg:fc meta:cls`.
    pub fn label(&self) -> String {
        let branch = |conv: bool, fc: bool| match (conv, fc) {
            (true, true) => "conv+fc",
            (true, false) => "conv",
            (false, true) => "fc",
            (false, false) => "none",
        };
        let p = &self.paths;
        let meta = match (self.meta_cls, self.meta_reg) {
            (true, true) => "cls+reg",
            (true, false) => "cls",
            (false, true) => "reg",
            (false, false) => "none",
        };
        format!("cls:{} reg:{} meta:{meta}", branch(p.cls_conv, p.cls_fc), branch(p.reg_conv, p.reg_fc))
    }

    /// `base` with this cell's paths and meta losses.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.model.paths = self.paths;
        c.model.meta_cls = self.meta_cls;
        c.model.meta_reg = self.meta_reg;
        c
    }

    pub fn is_single_path(&self) -> bool {
        let p = &self.paths;
        p.cls_conv != p.cls_fc && p.reg_conv != p.reg_fc
    }
}

fn paths(cls_conv: bool, cls_fc: bool, reg_conv: bool, reg_fc: bool) -> FusionPaths {
    FusionPaths { cls_conv, cls_fc, reg_conv, reg_fc }
}

/// Cells of a grid, in table order; the last cell is the full model.
pub fn cells(grid: Grid) -> Vec<Cell> {
    match grid {
        Grid::Table4 => [
            paths(false, true, true, false),
            paths(true, false, false, true),
            paths(true, false, true, false),
            paths(false, true, false, true),
            paths(true, true, false, true),
            paths(true, true, true, false),
            paths(true, false, true, true),
            paths(true, true, true, true),
        ]
        .into_iter()
        .map(|paths| Cell { paths, meta_cls: true, meta_reg: true })
        .collect(),
        Grid::Table5 => [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(meta_cls, meta_reg)| Cell { paths: FusionPaths::default(), meta_cls, meta_reg })
            .collect(),
    }
}

/// `config` with both phases shortened to `fraction` of their episodes and
/// decay intervals.
pub fn scaled(config: &TrainConfig, fraction: f64) -> TrainConfig {
    let s = |n: usize| ((n as f64 * fraction).round() as usize).max(1);
    let mut c = config.clone();
    c.base_episodes = s(c.base_episodes);
    c.finetune_episodes = s(c.finetune_episodes);
    c.base_lr_decay_interval = s(c.base_lr_decay_interval);
    c.finetune_lr_decay_interval = s(c.finetune_lr_decay_interval);
    c
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellResult {
    pub seed: u64,
    pub base_map: f64,
    pub novel_map: f64,
}

/// Base training, fine-tuning with the config's shot count, then base and
/// novel mAP50 of the fine-tuned model.
pub fn run_cell(config: &TrainConfig, cell: &Cell, seed: u64) -> Result<CellResult, PipelineError> {
    let mut c = cell.apply(config);
    c.seed = seed;
    c.validate()?;
    let base = train_base(&c, &mut io::sink())?;
    let ft = finetune(&base, c.finetune_shots, &mut io::sink())?;
    let novel = evaluate_checkpoint(&ft, Subset::Novel, c.finetune_shots, &c.eval)?;
    let base_ap = evaluate_checkpoint(&ft, Subset::Base, c.finetune_shots, &c.eval)?;
    Ok(CellResult { seed, base_map: base_ap.map_mean, novel_map: novel.map_mean })
}

pub const ABLATION_CSV_HEADER: &str =
    "grid,cell,cls_conv,cls_fc,reg_conv,reg_fc,meta_cls,meta_reg,seeds,base_map_mean,base_map_std,novel_map_mean,novel_map_std";

/// One CSV row summarizing a cell over its seeds.
pub fn csv_row(grid: Grid, index: usize, cell: &Cell, results: &[CellResult]) -> String {
    let base: Vec<f64> = results.iter().map(|r| r.base_map).collect();
    let novel: Vec<f64> = results.iter().map(|r| r.novel_map).collect();
    let (bm, bs) = crate::eval::mean_std(&base);
    let (nm, ns) = crate::eval::mean_std(&novel);
    let p = &cell.paths;
    let b = |v: bool| v as u8;
    format!(
        "{grid},{},{},{},{},{},{},{},{},{bm:.6},{bs:.6},{nm:.6},{ns:.6}",
        index + 1,
        b(p.cls_conv),
        b(p.cls_fc),
        b(p.reg_conv),
        b(p.reg_fc),
        b(cell.meta_cls),
        b(cell.meta_reg),
        results.len()
    )
}
