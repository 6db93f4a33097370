//! On-disk layout of a run directory.
//!
//! ```text
//! run.jsonl    evaluation rows
//! model.ckpt   final parameters
//! masks.ckpt   final masks
//! config.echo  fully explicit configuration that reproduces the run
//! stats.csv    written by `analyze`
//! layer{N}_{R}.pbm / .pgm   written by `viz`
//! ```

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::analysis::{
    grid_concentration, stats_csv, survivor_stats, write_magnitude_pgm, write_mask_pbm,
    MatrixReport,
};
use crate::checkpoint::{read_masks, read_params, write_masks, write_params};
use crate::config::echo_config;
use crate::error::{Result, SpurError};
use crate::harness::{ExperimentConfig, RunOutcome};
use crate::models::{weight_name, ParamTable, Role};
use crate::pruner::Mask;

pub const RUN_FILE: &str = "run.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const MASKS_FILE: &str = "masks.ckpt";
pub const ECHO_FILE: &str = "config.echo";
pub const STATS_FILE: &str = "stats.csv";

pub fn write_run_dir(dir: &Path, cfg: &ExperimentConfig, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RUN_FILE), outcome.record.to_jsonl())?;
    let mut model = Vec::new();
    write_params(&outcome.params, &mut model)?;
    fs::write(dir.join(MODEL_FILE), model)?;
    let mut masks = Vec::new();
    write_masks(&outcome.masks, &outcome.params, &mut masks)?;
    fs::write(dir.join(MASKS_FILE), masks)?;
    fs::write(dir.join(ECHO_FILE), echo_config(cfg))?;
    Ok(())
}

/// Checkpointed parameters and masks of a finished run.
pub struct LoadedRun {
    pub params: ParamTable,
    pub masks: Vec<(String, Role, Mask)>,
}

fn open(dir: &Path, file: &str) -> Result<BufReader<fs::File>> {
    let path = dir.join(file);
    fs::File::open(&path)
        .map(BufReader::new)
        .map_err(|e| SpurError::Config(format!("cannot open `{}`: {e}", path.display())))
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let params = read_params(open(dir, MODEL_FILE)?)?;
    let masks = read_masks(open(dir, MASKS_FILE)?)?;
    for (name, _, m) in &masks {
        let w = params
            .get(name)
            .ok_or_else(|| SpurError::Integrity(format!("mask `{name}` has no weight")))?;
        if w.shape() != m.shape() {
            return Err(SpurError::Integrity(format!("mask `{name}` does not match its weight")));
        }
    }
    Ok(LoadedRun { params, masks })
}

/// Per-matrix survivor statistics and grid scores of a loaded run.
pub fn analyze(run: &LoadedRun) -> Result<Vec<MatrixReport>> {
    run.masks
        .iter()
        .map(|(name, role, m)| {
            let w = run.params.get(name).expect("checked on load");
            Ok(MatrixReport {
                name: name.clone(),
                role: role.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                survivors: m.popcount(),
                stats: survivor_stats(w, m)?,
                grid: grid_concentration(m)?,
            })
        })
        .collect()
}

/// Writes `stats.csv` into `dir` and returns its contents.
pub fn analyze_dir(dir: &Path) -> Result<String> {
    let run = load_run(dir)?;
    let csv = stats_csv(&analyze(&run)?)?;
    fs::write(dir.join(STATS_FILE), &csv)?;
    Ok(csv)
}

/// Writes the mask (PBM) and masked magnitude heatmap (PGM) of one matrix.
pub fn viz_dir(dir: &Path, layer: usize, role: Role) -> Result<(PathBuf, PathBuf)> {
    if !role.is_prunable() {
        return Err(SpurError::Config(format!("role `{role}` carries no mask")));
    }
    let run = load_run(dir)?;
    let name = weight_name(layer, role);
    let (_, _, mask) = run
        .masks
        .iter()
        .find(|(n, _, _)| *n == name)
        .ok_or_else(|| SpurError::Config(format!("run has no mask for `{name}`")))?;
    let w = run.params.get(&name).expect("checked on load");
    let pbm = dir.join(format!("layer{layer}_{role}.pbm"));
    let pgm = dir.join(format!("layer{layer}_{role}.pgm"));
    write_mask_pbm(mask, &pbm)?;
    write_magnitude_pgm(&mask.apply(w), &pgm)?;
    Ok((pbm, pgm))
}
