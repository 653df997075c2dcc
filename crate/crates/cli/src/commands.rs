use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use afdnet::ablation::{self, Grid, ABLATION_CSV_HEADER};
use afdnet::eval::{EvalConfig, Subset};
use afdnet::pipeline::{self, load_checkpoint, save_checkpoint, Checkpoint, PipelineError, TrainConfig};
use clap::Args;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BASE_CHECKPOINT: &str = "base.ckpt";
pub const EVAL_CSV: &str = "eval.csv";
pub const LAMBDA_CSV: &str = "lambda_trajectories.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
/// Row cap of the exported fusion-weight trajectories.
pub const MAX_TRAJECTORY_ROWS: usize = 2000;

#[derive(Debug)]
pub enum CliError {
    Io(String),
    Config(String),
    Numeric(String),
    Checkpoint(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) | CliError::Config(m) | CliError::Numeric(m) | CliError::Checkpoint(m) => f.write_str(m),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        let msg = e.to_string();
        match e {
            PipelineError::Config(_) | PipelineError::Episode(_) => CliError::Config(msg),
            PipelineError::NonFinite { .. } | PipelineError::MissingGrad(_) | PipelineError::Tensor(_) => {
                CliError::Numeric(msg)
            }
            PipelineError::Checkpoint(_) | PipelineError::Archive(_) => CliError::Checkpoint(msg),
            PipelineError::Io(_) => CliError::Io(msg),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Creates `dir` and refuses to replace any of `outputs` inside it unless `force`.
fn prepare_out(dir: &Path, outputs: &[&str], force: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    if !force {
        if let Some(hit) = outputs.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Config(format!("{} already exists; pass --force to overwrite", hit.display())));
        }
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<TrainConfig, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("config file {} not found", path.display())));
    }
    Ok(TrainConfig::from_path(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn load(path: &Path, expected: Option<&TrainConfig>) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path, expected).map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Args, Debug)]
pub struct TrainBaseArgs {
    /// TOML (or .json) run configuration; omitted keys take their defaults.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub force: bool,
}

pub fn train_base(a: &TrainBaseArgs) -> Result<(), CliError> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_out(&a.out, &[BASE_CHECKPOINT, TRAIN_LOG, RESOLVED_CONFIG], a.force)?;
    write_text(&a.out.join(RESOLVED_CONFIG), &cfg.to_json())?;

    let log_path = a.out.join(TRAIN_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let result = pipeline::train_base(&cfg, &mut log);
    log.flush().map_err(io_err(&log_path))?;
    let ckpt = result?;
    save_checkpoint(&ckpt, &a.out.join(BASE_CHECKPOINT))?;
    log::info!("base training done after {} episodes; fusion weights {:?}", ckpt.iteration, ckpt.model.lambdas());
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Run configuration; defaults to the one stored in the checkpoint. Its
    /// seed and world must match the checkpoint's, since they fix the class split.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub shots: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn finetune(a: &FinetuneArgs) -> Result<(), CliError> {
    let stored = load(&a.from, None)?;
    let ckpt = match &a.config {
        Some(path) => {
            let cfg = load_config(path)?;
            let ckpt = load(&a.from, Some(&cfg))?;
            if cfg.seed != stored.config.seed || cfg.world != stored.config.world {
                return Err(CliError::Config(format!(
                    "{} has a different seed or world than the checkpoint; the class split would change",
                    path.display()
                )));
            }
            ckpt
        }
        None => stored,
    };
    if a.shots == 0 {
        return Err(CliError::Config("--shots must be at least 1".into()));
    }
    let ckpt_name = format!("ft_{}.ckpt", a.shots);
    let config_name = format!("ft_{}.{RESOLVED_CONFIG}", a.shots);
    prepare_out(&a.out, &[&ckpt_name, &config_name], a.force)?;
    let mut resolved = ckpt.config.clone();
    resolved.finetune_shots = a.shots;
    write_text(&a.out.join(&config_name), &resolved.to_json())?;

    let mut rows = Vec::new();
    let result = pipeline::finetune(&ckpt, a.shots, &mut rows);
    append_log(&a.out.join(TRAIN_LOG), &rows)?;
    let ft = result?;
    save_checkpoint(&ft, &a.out.join(&ckpt_name))?;
    log::info!("fine-tuning done at iteration {}; fusion weights {:?}", ft.iteration, ft.model.lambdas());
    Ok(())
}

/// Appends log rows, dropping their header when the file already has one.
fn append_log(path: &Path, rows: &[u8]) -> Result<(), CliError> {
    let text = String::from_utf8_lossy(rows);
    let existing = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let body = if existing { text.split_once('\n').map_or("", |(_, rest)| rest) } else { &text };
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    f.write_all(body.as_bytes()).map_err(io_err(path))
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long, default_value = "novel")]
    pub subset: Subset,
    #[arg(long, default_value_t = EvalConfig::default().repeats)]
    pub repeats: usize,
    /// Held-out scenes per repeat.
    #[arg(long, default_value_t = EvalConfig::default().num_scenes)]
    pub scenes: usize,
    /// Support shots per class; defaults to the checkpoint's fine-tune shots.
    #[arg(long)]
    pub shots: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let ckpt = load(&a.from, None)?;
    let cfg = EvalConfig { num_scenes: a.scenes, repeats: a.repeats, ..ckpt.config.eval.clone() };
    cfg.validate().map_err(CliError::Config)?;
    prepare_out(&a.out, &[EVAL_CSV], a.force)?;
    let shots = a.shots.unwrap_or(ckpt.config.finetune_shots);
    let report = pipeline::evaluate_checkpoint(&ckpt, a.subset, shots, &cfg)?;
    write_text(&a.out.join(EVAL_CSV), &report.to_csv())?;
    print!("{}", report.table());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

const TRAJECTORY_COLUMNS: [&str; 5] =
    ["iteration", "lambda_cls_conv", "lambda_cls_fc", "lambda_reg_conv", "lambda_reg_fc"];

/// Indices of `n` rows spread evenly from the first to the last, at most `cap`.
pub fn downsample(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    (0..cap).map(|i| ((i as u128 * (n - 1) as u128 + (cap - 1) as u128 / 2) / (cap - 1) as u128) as usize).collect()
}

pub fn inspect_weights(a: &InspectArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&a.log).map_err(|e| CliError::Config(format!("{}: {e}", a.log.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| CliError::Config(format!("{} is empty", a.log.display())))?.split(',').collect();
    let cols = TRAJECTORY_COLUMNS
        .iter()
        .map(|name| {
            header.iter().position(|h| h.trim() == *name).ok_or_else(|| CliError::Config(format!("{} has no {name} column", a.log.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    // a fine-tune log appended to a base log may repeat the header
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.starts_with(TRAJECTORY_COLUMNS[0])).map(|l| l.split(',').collect()).collect();
    if rows.is_empty() {
        return Err(CliError::Config(format!("{} has no data rows", a.log.display())));
    }
    prepare_out(&a.out, &[LAMBDA_CSV], a.force)?;
    let mut out = TRAJECTORY_COLUMNS.join(",");
    out.push('\n');
    for i in downsample(rows.len(), MAX_TRAJECTORY_ROWS) {
        let row = &rows[i];
        let fields = cols
            .iter()
            .map(|&c| row.get(c).copied().ok_or_else(|| CliError::Config(format!("row {} of {} is short", i + 2, a.log.display()))))
            .collect::<Result<Vec<_>, _>>()?;
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    write_text(&a.out.join(LAMBDA_CSV), &out)
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub grid: Grid,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds per cell, counting up from the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Fraction of the configured episode counts each cell trains for.
    #[arg(long, default_value_t = 0.25)]
    pub fraction: f64,
    #[arg(long)]
    pub force: bool,
}

pub fn ablate(a: &AblateArgs) -> Result<(), CliError> {
    let cfg = load_config(&a.config)?;
    if !(a.fraction > 0.0 && a.fraction <= 1.0) || a.seeds == 0 {
        return Err(CliError::Config("--fraction must be in (0, 1] and --seeds at least 1".into()));
    }
    let cfg = ablation::scaled(&cfg, a.fraction);
    cfg.validate()?;
    prepare_out(&a.out, &[ABLATION_CSV, RESOLVED_CONFIG], a.force)?;
    write_text(&a.out.join(RESOLVED_CONFIG), &cfg.to_json())?;
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for (i, cell) in ablation::cells(a.grid).iter().enumerate() {
        let mut results = Vec::new();
        for s in 0..a.seeds {
            let r = ablation::run_cell(&cfg, cell, cfg.seed + s)?;
            log::info!("{} cell {} seed {}: base {:.4} novel {:.4}", a.grid, i + 1, r.seed, r.base_map, r.novel_map);
            results.push(r);
        }
        let row = ablation::csv_row(a.grid, i, cell, &results);
        println!("{:<40} {row}", cell.label());
        csv.push_str(&row);
        csv.push('\n');
    }
    write_text(&a.out.join(ABLATION_CSV), &csv)
}
