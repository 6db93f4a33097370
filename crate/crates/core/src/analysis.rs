//! Surviving-weight statistics, grid concentration and image export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, SpurError};
use crate::matrix::Matrix;
use crate::pruner::Mask;

/// Mean, population standard deviation and coefficient of variation (percent)
/// of surviving magnitudes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivorStats {
    pub avg: f64,
    pub std: f64,
    pub cv: f64,
}

pub fn survivor_stats(w: &Matrix, m: &Mask) -> Result<SurvivorStats> {
    if w.shape() != m.shape() {
        return Err(crate::error::shape_err("survivor_stats", w.shape(), m.shape()));
    }
    let kept: Vec<f64> = w
        .data()
        .iter()
        .zip(m.bits())
        .filter(|(_, &b)| b)
        .map(|(v, _)| v.abs())
        .collect();
    if kept.is_empty() {
        return Err(SpurError::Contract("mask has no surviving entries".into()));
    }
    let n = kept.len() as f64;
    let avg = kept.iter().sum::<f64>() / n;
    let std = (kept.iter().map(|v| (v - avg) * (v - avg)).sum::<f64>() / n).sqrt();
    let cv = if avg > 0.0 { 100.0 * std / avg } else { 0.0 };
    Ok(SurvivorStats { avg, std, cv })
}

/// Unweighted mean of each field across matrices.
pub fn aggregate_stats(per_matrix: &[SurvivorStats]) -> Result<SurvivorStats> {
    if per_matrix.is_empty() {
        return Err(SpurError::Contract("no statistics to aggregate".into()));
    }
    let n = per_matrix.len() as f64;
    let mean = |f: fn(&SurvivorStats) -> f64| per_matrix.iter().map(f).sum::<f64>() / n;
    Ok(SurvivorStats {
        avg: mean(|s| s.avg),
        std: mean(|s| s.std),
        cv: mean(|s| s.cv),
    })
}

/// How strongly survivors concentrate in few rows and columns: one minus the
/// normalized entropy of the row (column) survival distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridScore {
    pub row_score: f64,
    pub col_score: f64,
    pub grid: f64,
}

fn concentration(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    (1.0 - entropy / (counts.len() as f64).ln()).clamp(0.0, 1.0)
}

pub fn grid_concentration(m: &Mask) -> Result<GridScore> {
    if m.rows() < 2 || m.cols() < 2 {
        return Err(SpurError::Contract(format!(
            "grid concentration needs at least 2x2, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if m.popcount() == 0 {
        return Err(SpurError::Contract("mask has no surviving entries".into()));
    }
    let mut rows = vec![0usize; m.rows()];
    let mut cols = vec![0usize; m.cols()];
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            if m.get(r, c) {
                rows[r] += 1;
                cols[c] += 1;
            }
        }
    }
    let row_score = concentration(&rows);
    let col_score = concentration(&cols);
    Ok(GridScore {
        row_score,
        col_score,
        grid: (row_score + col_score) / 2.0,
    })
}

/// Writes `m` as a plain PBM (surviving = 1 = black). Returns bytes written.
pub fn export_mask_pbm(m: &Mask, out: &mut impl Write) -> Result<usize> {
    let mut text = format!("P1\n{} {}\n", m.cols(), m.rows());
    for r in 0..m.rows() {
        let row: Vec<&str> = (0..m.cols())
            .map(|c| if m.get(r, c) { "1" } else { "0" })
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    out.write_all(text.as_bytes())?;
    Ok(text.len())
}

/// Writes `|w|` scaled so the largest magnitude maps to 255 as a plain PGM.
pub fn export_magnitude_pgm(w: &Matrix, out: &mut impl Write) -> Result<usize> {
    let max = w.data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut text = format!("P2\n{} {}\n255\n", w.cols(), w.rows());
    for r in 0..w.rows() {
        let row: Vec<String> = w
            .row(r)
            .iter()
            .map(|v| {
                let px = if max > 0.0 {
                    (255.0 * v.abs() / max).round() as u32
                } else {
                    0
                };
                px.to_string()
            })
            .collect();
        text.push_str(&row.join(" "));
        text.push('\n');
    }
    out.write_all(text.as_bytes())?;
    Ok(text.len())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_mask_pbm(m: &Mask, path: &Path) -> Result<usize> {
    let mut f = create(path)?;
    let n = export_mask_pbm(m, &mut f)?;
    f.flush()?;
    Ok(n)
}

pub fn write_magnitude_pgm(w: &Matrix, path: &Path) -> Result<usize> {
    let mut f = create(path)?;
    let n = export_magnitude_pgm(w, &mut f)?;
    f.flush()?;
    Ok(n)
}

/// One analyzed matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixReport {
    pub name: String,
    pub role: String,
    pub rows: usize,
    pub cols: usize,
    pub survivors: usize,
    pub stats: SurvivorStats,
    pub grid: GridScore,
}

pub const STATS_HEADER: &str =
    "name,role,rows,cols,survivors,avg,std,cv,row_score,col_score,grid";

/// CSV with one row per matrix and a trailing `aggregate` row holding the
/// field-wise means.
pub fn stats_csv(reports: &[MatrixReport]) -> Result<String> {
    let stats: Vec<SurvivorStats> = reports.iter().map(|r| r.stats).collect();
    let agg = aggregate_stats(&stats)?;
    let n = reports.len() as f64;
    let mean = |f: fn(&MatrixReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.role,
            r.rows,
            r.cols,
            r.survivors,
            r.stats.avg,
            r.stats.std,
            r.stats.cv,
            r.grid.row_score,
            r.grid.col_score,
            r.grid.grid
        );
    }
    let survivors: usize = reports.iter().map(|r| r.survivors).sum();
    let _ = writeln!(
        out,
        "aggregate,,,,{},{},{},{},{},{},{}",
        survivors,
        agg.avg,
        agg.std,
        agg.cv,
        mean(|r| r.grid.row_score),
        mean(|r| r.grid.col_score),
        mean(|r| r.grid.grid)
    );
    Ok(out)
}
