//! Flat `key = value` experiment configuration files.
//!
//! Keys mirror [`ExperimentConfig`] field paths (`schedule.v_final = 0.03`).
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. Keys left out take the values of the toy reference experiment,
//! except that `model.seed` follows `seed` and `model.ffn_dim` defaults to
//! four times `model.hidden_dim`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, SpurError};
use crate::harness::ExperimentConfig;

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "model.kind",
    "model.layers",
    "model.hidden_dim",
    "model.heads",
    "model.ffn_dim",
    "model.vocab",
    "model.max_seq",
    "model.input_dim",
    "model.classes",
    "model.seed",
    "task",
    "data.n_train",
    "data.n_test",
    "data.spread",
    "method",
    "variant",
    "domain",
    "schedule.v_initial",
    "schedule.v_final",
    "schedule.t_i",
    "schedule.ramp_steps",
    "schedule.cadence",
    "schedule.total_steps",
    "lambda_schedule.lambda_final",
    "lambda_schedule.t_i",
    "lambda_schedule.ramp_steps",
    "optimizer.learning_rate",
    "optimizer.beta1",
    "optimizer.beta2",
    "optimizer.eps",
    "batch_size",
    "eval_every",
    "seed",
];

fn parse_value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| {
        SpurError::Config(format!("line {line}: cannot parse `{raw}` for `{key}`"))
    })
}

/// Parses configuration text into a validated [`ExperimentConfig`].
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = HashSet::new();
    let mut model_seed = None;
    let mut ffn_dim = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            SpurError::Config(format!("line {line_no}: expected `key = value`"))
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(SpurError::Config(format!("line {line_no}: unknown key `{key}`")));
        }
        if !seen.insert(key.to_string()) {
            return Err(SpurError::Config(format!("line {line_no}: `{key}` set twice")));
        }
        macro_rules! set {
            ($field:expr) => {
                $field = parse_value(key, value, line_no)?
            };
        }
        match key {
            "model.kind" => set!(cfg.model.kind),
            "model.layers" => set!(cfg.model.layers),
            "model.hidden_dim" => set!(cfg.model.hidden_dim),
            "model.heads" => set!(cfg.model.heads),
            "model.ffn_dim" => ffn_dim = Some(parse_value(key, value, line_no)?),
            "model.vocab" => set!(cfg.model.vocab),
            "model.max_seq" => set!(cfg.model.max_seq),
            "model.input_dim" => set!(cfg.model.input_dim),
            "model.classes" => set!(cfg.model.classes),
            "model.seed" => model_seed = Some(parse_value(key, value, line_no)?),
            "task" => set!(cfg.task),
            "data.n_train" => set!(cfg.data.n_train),
            "data.n_test" => set!(cfg.data.n_test),
            "data.spread" => set!(cfg.data.spread),
            "method" => set!(cfg.method),
            "variant" => set!(cfg.variant),
            "domain" => set!(cfg.domain),
            "schedule.v_initial" => set!(cfg.schedule.v_initial),
            "schedule.v_final" => set!(cfg.schedule.v_final),
            "schedule.t_i" => set!(cfg.schedule.t_i),
            "schedule.ramp_steps" => set!(cfg.schedule.ramp_steps),
            "schedule.cadence" => set!(cfg.schedule.cadence),
            "schedule.total_steps" => set!(cfg.schedule.total_steps),
            "lambda_schedule.lambda_final" => set!(cfg.lambda_schedule.lambda_final),
            "lambda_schedule.t_i" => set!(cfg.lambda_schedule.t_i),
            "lambda_schedule.ramp_steps" => set!(cfg.lambda_schedule.ramp_steps),
            "optimizer.learning_rate" => set!(cfg.optimizer.learning_rate),
            "optimizer.beta1" => set!(cfg.optimizer.beta1),
            "optimizer.beta2" => set!(cfg.optimizer.beta2),
            "optimizer.eps" => set!(cfg.optimizer.eps),
            "batch_size" => set!(cfg.batch_size),
            "eval_every" => set!(cfg.eval_every),
            "seed" => set!(cfg.seed),
            _ => unreachable!("key list and match arms agree"),
        }
    }
    cfg.model.seed = model_seed.unwrap_or(cfg.seed);
    cfg.model.ffn_dim = ffn_dim.unwrap_or(4 * cfg.model.hidden_dim);
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        SpurError::Config(format!("cannot read config `{}`: {e}", path.display()))
    })?;
    parse_config(&text)
}

/// Fully explicit configuration text; parsing it yields `cfg` again.
pub fn echo_config(cfg: &ExperimentConfig) -> String {
    let m = &cfg.model;
    let s = &cfg.schedule;
    let l = &cfg.lambda_schedule;
    let o = &cfg.optimizer;
    let values: Vec<String> = vec![
        m.kind.as_str().into(),
        m.layers.to_string(),
        m.hidden_dim.to_string(),
        m.heads.to_string(),
        m.ffn_dim.to_string(),
        m.vocab.to_string(),
        m.max_seq.to_string(),
        m.input_dim.to_string(),
        m.classes.to_string(),
        m.seed.to_string(),
        cfg.task.to_string(),
        cfg.data.n_train.to_string(),
        cfg.data.n_test.to_string(),
        format!("{:?}", cfg.data.spread),
        cfg.method.to_string(),
        cfg.variant.to_string(),
        cfg.domain.to_string(),
        format!("{:?}", s.v_initial),
        format!("{:?}", s.v_final),
        s.t_i.to_string(),
        s.ramp_steps.to_string(),
        s.cadence.to_string(),
        s.total_steps.to_string(),
        format!("{:?}", l.lambda_final),
        l.t_i.to_string(),
        l.ramp_steps.to_string(),
        format!("{:?}", o.learning_rate),
        format!("{:?}", o.beta1),
        format!("{:?}", o.beta2),
        format!("{:?}", o.eps),
        cfg.batch_size.to_string(),
        cfg.eval_every.to_string(),
        cfg.seed.to_string(),
    ];
    debug_assert_eq!(values.len(), KEYS.len());
    let mut out = String::new();
    for (k, v) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
