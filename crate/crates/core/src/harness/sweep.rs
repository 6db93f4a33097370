use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::train::{train, RunOutcome};
use super::{ExperimentConfig, Method};
use crate::artifacts::write_run_dir;
use crate::error::{Result, SpurError};

pub const TABLE_HEADER: &str = "density,method,variant,domain,seed_count,mean_acc,std_acc,gap";

/// A method with an optional override of the final regularization strength,
/// written `imp`, `imp_spur` or `imp_spur@100`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MethodSpec {
    pub method: Method,
    pub lambda_final: Option<f64>,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self.lambda_final {
            Some(l) => format!("{}@{l}", self.method),
            None => self.method.to_string(),
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for MethodSpec {
    type Err = SpurError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, lambda) = match s.split_once('@') {
            Some((n, l)) => {
                let l: f64 = l
                    .parse()
                    .map_err(|_| SpurError::Config(format!("bad lambda in method `{s}`")))?;
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(SpurError::Config(format!("bad lambda in method `{s}`")));
                }
                (n, Some(l))
            }
            None => (s, None),
        };
        let method: Method = name.parse()?;
        if method == Method::Imp && lambda.is_some() {
            return Err(SpurError::Config("`imp` takes no lambda".into()));
        }
        Ok(Self {
            method,
            lambda_final: lambda,
        })
    }
}

/// One run of the cross product.
#[derive(Debug)]
pub struct SweepRun {
    pub density: f64,
    pub method: MethodSpec,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub result: std::result::Result<RunOutcome, String>,
}

impl SweepRun {
    pub fn dir_name(&self) -> String {
        format!("d{}_m{}_s{}", self.density, self.method.label(), self.seed)
    }
}

/// Aggregate of one (density, method) cell over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub density: f64,
    pub method: String,
    pub variant: String,
    pub domain: String,
    pub seed_count: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean accuracy minus the plain magnitude pruning mean at the same density.
    pub gap: Option<f64>,
    pub failed: bool,
}

impl SweepCell {
    pub fn csv_row(&self) -> String {
        let num = |v: f64| if self.failed { "failed".to_string() } else { v.to_string() };
        let gap = match (self.failed, self.gap) {
            (true, _) => "failed".to_string(),
            (false, Some(g)) => g.to_string(),
            (false, None) => String::new(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.density,
            self.method,
            self.variant,
            self.domain,
            self.seed_count,
            num(self.mean_acc),
            num(self.std_acc),
            gap
        )
    }
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TABLE_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&c.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn any_failed(&self) -> bool {
        self.runs.iter().any(|r| r.result.is_err())
    }

    pub fn run(&self, density: f64, method: &str, seed: u64) -> Option<&SweepRun> {
        self.runs
            .iter()
            .find(|r| r.density == density && r.method.label() == method && r.seed == seed)
    }
}

fn run_config(base: &ExperimentConfig, density: f64, spec: &MethodSpec, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.schedule.v_final = density;
    cfg.method = spec.method;
    if let Some(l) = spec.lambda_final {
        cfg.lambda_schedule.lambda_final = l;
    }
    cfg.seed = seed;
    cfg.model.seed = seed;
    cfg
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains every (density, method, seed) combination and aggregates final test
/// accuracy per (density, method). Runs execute on up to `threads` workers;
/// results are merged in input order. When `out` is given every run is
/// written to its own subdirectory.
pub fn sweep_compare(
    base: &ExperimentConfig,
    densities: &[f64],
    methods: &[MethodSpec],
    seeds: &[u64],
    threads: usize,
    out: Option<&Path>,
) -> Result<SweepOutcome> {
    if densities.is_empty() || methods.is_empty() || seeds.is_empty() {
        return Err(SpurError::Config(
            "sweep needs at least one density, method and seed".into(),
        ));
    }
    let mut plan = Vec::new();
    for &d in densities {
        for m in methods {
            for &s in seeds {
                let cfg = run_config(base, d, m, s);
                cfg.validate()?;
                plan.push((d, *m, s, cfg));
            }
        }
    }

    let execute = |(density, method, seed, config): (f64, MethodSpec, u64, ExperimentConfig)| {
        let result = config
            .dataset()
            .and_then(|data| train(&config, &data))
            .map_err(|e| e.to_string());
        SweepRun {
            density,
            method,
            seed,
            config,
            result,
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| SpurError::Config(format!("cannot start worker pool: {e}")))?;
    let runs: Vec<SweepRun> = pool.install(|| plan.into_par_iter().map(execute).collect());

    if let Some(dir) = out {
        for run in &runs {
            if let Ok(outcome) = &run.result {
                write_run_dir(&dir.join(run.dir_name()), &run.config, outcome)?;
            }
        }
    }

    let mut cells = Vec::new();
    for &d in densities {
        let mut imp_mean = None;
        let mut row = Vec::new();
        for m in methods {
            let group: Vec<&SweepRun> = runs
                .iter()
                .filter(|r| r.density == d && r.method == *m)
                .collect();
            let failed = group.iter().any(|r| r.result.is_err());
            let accs: Vec<f64> = group
                .iter()
                .filter_map(|r| r.result.as_ref().ok())
                .filter_map(|o| o.record.final_accuracy())
                .collect();
            let (mean, std) = if accs.is_empty() { (0.0, 0.0) } else { mean_std(&accs) };
            if m.method == Method::Imp && !failed && imp_mean.is_none() {
                imp_mean = Some(mean);
            }
            row.push(SweepCell {
                density: d,
                method: m.label(),
                variant: base.variant.to_string(),
                domain: base.domain.to_string(),
                seed_count: accs.len(),
                mean_acc: mean,
                std_acc: std,
                gap: None,
                failed,
            });
        }
        for cell in &mut row {
            cell.gap = imp_mean.map(|base| cell.mean_acc - base);
            if cell.method == Method::Imp.as_str() && !cell.failed {
                cell.gap = Some(0.0);
            }
        }
        cells.extend(row);
    }
    Ok(SweepOutcome { runs, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_tokens() {
        let m: MethodSpec = "imp".parse().unwrap();
        assert_eq!(m.method, Method::Imp);
        let m: MethodSpec = "imp_spur@100".parse().unwrap();
        assert_eq!(m.lambda_final, Some(100.0));
        assert_eq!(m.label(), "imp_spur@100");
        assert!("imp@10".parse::<MethodSpec>().is_err());
        assert!("magic".parse::<MethodSpec>().is_err());
        assert!("imp_spur@x".parse::<MethodSpec>().is_err());
    }

    #[test]
    fn population_std() {
        let (m, s) = mean_std(&[0.5, 1.0]);
        assert_eq!(m, 0.75);
        assert_eq!(s, 0.25);
    }

    #[test]
    fn failed_cell_formatting() {
        let cell = SweepCell {
            density: 0.1,
            method: "imp".into(),
            variant: "spur".into(),
            domain: "all".into(),
            seed_count: 0,
            mean_acc: 0.0,
            std_acc: 0.0,
            gap: None,
            failed: true,
        };
        assert_eq!(cell.csv_row(), "0.1,imp,spur,all,0,failed,failed,failed");
    }
}
