use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Dataset, Split};
use super::optim::{adam_step, Moments};
use super::ExperimentConfig;
use crate::error::{Result, SpurError};
use crate::graph::{backward, ExprGraph};
use crate::models::{forward, init_model, ModelConfig, ParamTable};
use crate::pruner::{density_at, pruning_event, select_targets, PruningState, TargetDomain};
use crate::regularizer::{deviance, regularization_loss_node};

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const EVAL_CHUNK: usize = 64;

/// One evaluation point of a run. Field order is the serialized key order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub step: usize,
    /// Scheduled density at `step`.
    pub density: f64,
    /// Surviving fraction over all masks in force at `step`.
    pub mask_density: f64,
    pub lambda: f64,
    pub train_l_ce: f64,
    pub train_l_r: f64,
    pub test_accuracy: f64,
    pub per_matrix_deviance: BTreeMap<String, f64>,
}

/// Evaluation time series of one run, ordered by step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
}

impl RunRecord {
    /// JSON Lines, one row per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("rows serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| SpurError::Input(format!("bad run row: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.rows.last().map(|r| r.test_accuracy)
    }
}

/// Final state of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub record: RunRecord,
    pub params: ParamTable,
    pub masks: PruningState,
    /// Matrices carrying the regularizer.
    pub reg_targets: Vec<String>,
}

/// Fraction of `split` classified correctly. Logit ties go to the lower class.
pub fn evaluate(
    params: &ParamTable,
    masks: &PruningState,
    model: &ModelConfig,
    split: &Split,
) -> Result<f64> {
    if split.is_empty() {
        return Err(SpurError::Contract("cannot evaluate an empty split".into()));
    }
    let rows: Vec<usize> = (0..split.len()).collect();
    let mut correct = 0usize;
    for chunk in rows.chunks(EVAL_CHUNK) {
        let inputs = split.inputs.select(chunk);
        let mut g = ExprGraph::new();
        let bound = params.bind(&mut g);
        let fwd = forward(&mut g, params, &bound, masks, model, &inputs)?;
        let logits = g.value(fwd.logits);
        for (i, &r) in chunk.iter().enumerate() {
            let row = logits.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == split.labels[r] {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / split.len() as f64)
}

struct Batches {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
}

impl Batches {
    fn new(n: usize, size: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT));
        Self {
            order,
            cursor: 0,
            size,
        }
    }

    fn peek(&self) -> Vec<usize> {
        (0..self.size)
            .map(|i| self.order[(self.cursor + i) % self.order.len()])
            .collect()
    }

    fn advance(&mut self) {
        self.cursor = (self.cursor + self.size) % self.order.len();
    }
}

fn per_matrix_deviance(
    cfg: &ExperimentConfig,
    params: &ParamTable,
    masks: &PruningState,
    targets: &[String],
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for name in targets {
        let w = params
            .get(name)
            .ok_or_else(|| SpurError::Integrity(format!("missing target `{name}`")))?;
        let eff = match masks.get(name) {
            Some(m) => m.apply(w),
            None => w.clone(),
        };
        out.insert(name.clone(), deviance(&eff, cfg.variant));
    }
    Ok(out)
}

struct StepLoss {
    l_ce: f64,
    total: f64,
}

/// Trains one model under the configured pruning schedule.
///
/// At every step `t` a pruning event runs first when `t` is on the cadence,
/// then the batch loss is formed and, for `t < total_steps`, one Adam update
/// is applied. Evaluation rows describe the model before that step's update.
pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<RunOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(SpurError::Config("training split is empty".into()));
    }
    let mut params = init_model(&cfg.model)?;
    let prune_targets = select_targets(&params, TargetDomain::All)?;
    let reg_targets = select_targets(&params, cfg.domain)?;
    let shapes: Vec<(String, (usize, usize))> = prune_targets
        .iter()
        .map(|n| (n.clone(), params.get(n).expect("selected").shape()))
        .collect();
    let mut masks = PruningState::dense(shapes.iter().map(|(n, s)| (n.as_str(), *s)));
    let mut moments: Vec<Moments> = params
        .params()
        .iter()
        .map(|p| Moments::zeros(p.value.rows(), p.value.cols()))
        .collect();
    let mut batches = Batches::new(data.train.len(), cfg.batch_size, cfg.seed);
    let schedule = &cfg.schedule;
    let mut record = RunRecord::default();

    for t in 0..=schedule.total_steps {
        if schedule.is_event(t) {
            masks = pruning_event(&masks, &params, t, schedule)?;
        }
        let lambda = cfg.lambda_at(t);
        let batch = data.train.select(&batches.peek());
        let training = t < schedule.total_steps;

        let mut g = ExprGraph::new();
        let bound = params.bind(&mut g);
        let fwd = forward(&mut g, &params, &bound, &masks, &cfg.model, &batch.inputs)?;
        let ce = g.cross_entropy_mean(fwd.logits, &batch.labels)?;
        // With lambda = 0 the regularizer is left out of the graph entirely so
        // the update matches plain magnitude pruning bit for bit.
        let loss = if lambda > 0.0 {
            let nodes = reg_targets
                .iter()
                .map(|n| {
                    fwd.effective_node(n)
                        .ok_or_else(|| SpurError::Integrity(format!("no effective weight `{n}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            let reg = regularization_loss_node(&mut g, &nodes, cfg.variant)?;
            let weighted = g.scale(reg, lambda);
            g.add(ce, weighted)?
        } else {
            ce
        };
        let step_loss = StepLoss {
            l_ce: g.value(ce).item(),
            total: g.value(loss).item(),
        };
        if !step_loss.total.is_finite() {
            return Err(SpurError::Aborted {
                step: t,
                reason: format!("loss is {}", step_loss.total),
            });
        }

        if t % cfg.eval_every == 0 || !training {
            let per_matrix = per_matrix_deviance(cfg, &params, &masks, &reg_targets)?;
            let l_r = per_matrix.values().sum::<f64>() / per_matrix.len() as f64;
            record.rows.push(EvalRow {
                step: t,
                density: density_at(t, schedule),
                mask_density: masks.overall_density(),
                lambda,
                train_l_ce: step_loss.l_ce,
                train_l_r: l_r,
                test_accuracy: evaluate(&params, &masks, &cfg.model, &data.test)?,
                per_matrix_deviance: per_matrix,
            });
        }
        if !training {
            break;
        }

        let mut grads = backward(&g, loss, &bound)?;
        drop(g);
        for (i, leaf) in bound.iter().enumerate() {
            let grad = grads.take(*leaf).expect("requested leaf");
            if !grad.is_finite() {
                return Err(SpurError::Aborted {
                    step: t,
                    reason: format!("non-finite gradient for `{}`", params.params()[i].name),
                });
            }
            let mask = masks.get(&params.params()[i].name);
            adam_step(params.value_mut(i), &grad, &mut moments[i], mask, &cfg.optimizer, t + 1);
        }
        batches.advance();
    }

    Ok(RunOutcome {
        record,
        params,
        masks,
        reg_targets,
    })
}
