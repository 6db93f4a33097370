//! Plain-text tensor checkpoints.
//!
//! Each tensor is a header line `name role rows cols` followed by one line
//! per row of whitespace-separated values. Weights use 17 significant digits
//! so a reload is bit-exact; masks use `0`/`1`.

use std::io::{BufRead, Write};

use crate::error::{Result, SpurError};
use crate::matrix::Matrix;
use crate::models::{Param, ParamTable, Role};
use crate::pruner::{Mask, PruningState};

fn layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("layer")?
        .split('.')
        .next()?
        .parse()
        .ok()
}

pub fn write_params(params: &ParamTable, out: &mut impl Write) -> Result<()> {
    for p in params.params() {
        let m = &p.value;
        writeln!(out, "{} {} {} {}", p.name, p.role, m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

pub fn write_masks(state: &PruningState, params: &ParamTable, out: &mut impl Write) -> Result<()> {
    for (name, m) in state.masks() {
        let role = params
            .param(name)
            .map(|p| p.role)
            .ok_or_else(|| SpurError::Integrity(format!("mask `{name}` has no tensor")))?;
        writeln!(out, "{name} {role} {} {}", m.rows(), m.cols())?;
        for r in 0..m.rows() {
            let line: Vec<&str> = (0..m.cols())
                .map(|c| if m.get(r, c) { "1" } else { "0" })
                .collect();
            writeln!(out, "{}", line.join(" "))?;
        }
    }
    Ok(())
}

struct RawTensor {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
    values: Vec<String>,
}

fn read_raw(input: impl BufRead) -> Result<Vec<RawTensor>> {
    let mut tokens = Vec::new();
    let mut out: Vec<RawTensor> = Vec::new();
    let mut lines = input.lines().enumerate();
    while let Some((lineno, line)) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let header: Vec<&str> = line.split_whitespace().collect();
        let bad = |why: &str| SpurError::Input(format!("checkpoint line {}: {why}", lineno + 1));
        if header.len() != 4 {
            return Err(bad("expected `name role rows cols`"));
        }
        let role: Role = header[1].parse()?;
        let rows: usize = header[2].parse().map_err(|_| bad("bad row count"))?;
        let cols: usize = header[3].parse().map_err(|_| bad("bad column count"))?;
        tokens.clear();
        while tokens.len() < rows * cols {
            let Some((_, body)) = lines.next() else {
                return Err(bad("tensor body truncated"));
            };
            tokens.extend(body?.split_whitespace().map(str::to_string));
        }
        if tokens.len() != rows * cols {
            return Err(bad("tensor body has extra values"));
        }
        out.push(RawTensor {
            name: header[0].to_string(),
            role,
            rows,
            cols,
            values: std::mem::take(&mut tokens),
        });
    }
    Ok(out)
}

pub fn read_params(input: impl BufRead) -> Result<ParamTable> {
    let mut params = Vec::new();
    for t in read_raw(input)? {
        let data = t
            .values
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| SpurError::Input(format!("bad value `{s}` in `{}`", t.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        let layer = layer_of(&t.name);
        params.push(Param {
            value: Matrix::from_vec(t.rows, t.cols, data)?,
            name: t.name,
            role: t.role,
            layer,
        });
    }
    ParamTable::new(params)
}

/// Masks in file order, each with the role recorded in its header.
pub fn read_masks(input: impl BufRead) -> Result<Vec<(String, Role, Mask)>> {
    read_raw(input)?
        .into_iter()
        .map(|t| {
            let bits = t
                .values
                .iter()
                .map(|s| match s.as_str() {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(SpurError::Input(format!(
                        "mask `{}` has non-binary value `{other}`",
                        t.name
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((t.name, t.role, Mask::from_bits(t.rows, t.cols, bits)?))
        })
        .collect()
}
