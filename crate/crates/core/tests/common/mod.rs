//! Reference implementations used as test oracles. Written from the textbook
//! definitions, without calling into the crate's numeric code.

#![allow(dead_code)]

use spur::{Mask, Matrix};

/// Pearson chi-square statistic of `|w|` read as a contingency table.
pub fn pearson_chi_square(w: &Matrix) -> f64 {
    let (r, c) = w.shape();
    let cell = |i: usize, j: usize| w.get(i, j).abs();
    let mut row = vec![0.0; r];
    let mut col = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..r {
        for j in 0..c {
            row[i] += cell(i, j);
            col[j] += cell(i, j);
            total += cell(i, j);
        }
    }
    let mut chi = 0.0;
    for i in 0..r {
        for j in 0..c {
            let expected = row[i] * col[j] / total;
            let diff = cell(i, j) - expected;
            chi += diff * diff / expected;
        }
    }
    chi
}

/// Keeps the `round(v * n)` largest magnitudes, earlier row-major index first
/// among equals, by sorting every entry.
pub fn sort_mask(w: &Matrix, v: f64) -> Mask {
    let n = w.len();
    let k = (v * n as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (w.data()[a].abs(), w.data()[b].abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut bits = vec![false; n];
    for &i in &order[..k] {
        bits[i] = true;
    }
    Mask::from_bits(w.rows(), w.cols(), bits).unwrap()
}

/// Plain PBM (P1) parser.
pub fn parse_pbm(text: &str) -> Mask {
    let mut tok = text.split_whitespace();
    assert_eq!(tok.next(), Some("P1"));
    let cols: usize = tok.next().unwrap().parse().unwrap();
    let rows: usize = tok.next().unwrap().parse().unwrap();
    let bits: Vec<bool> = tok
        .map(|t| match t {
            "1" => true,
            "0" => false,
            other => panic!("bad pixel {other}"),
        })
        .collect();
    Mask::from_bits(rows, cols, bits).unwrap()
}

/// Plain PGM (P2) parser returning `(rows, cols, maxval, pixels)`.
pub fn parse_pgm(text: &str) -> (usize, usize, u32, Vec<u32>) {
    let mut tok = text.split_whitespace();
    assert_eq!(tok.next(), Some("P2"));
    let cols = tok.next().unwrap().parse().unwrap();
    let rows = tok.next().unwrap().parse().unwrap();
    let maxval = tok.next().unwrap().parse().unwrap();
    let pixels = tok.map(|t| t.parse().unwrap()).collect();
    (rows, cols, maxval, pixels)
}

pub fn rel_err(got: f64, want: f64, floor: f64) -> f64 {
    (got - want).abs() / want.abs().max(floor)
}

pub mod gradcheck {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use spur::graph::{backward, finite_difference_gradient, ExprGraph};
    use spur::models::{forward, init_model, Inputs, ModelConfig, ParamTable, TokenGrid};
    use spur::pruner::{compute_mask, select_targets};
    use spur::regularizer::regularization_loss_node;
    use spur::{DevianceVariant, Matrix, PruningState, TargetDomain};

    pub struct Report {
        pub checked: usize,
        pub skipped: usize,
        pub masked_nonzero: usize,
        /// Largest relative error among entries that miss the absolute floor.
        pub worst: f64,
        pub worst_abs: f64,
        pub failures: Vec<String>,
    }

    pub fn tiny_transformer() -> ModelConfig {
        ModelConfig {
            layers: 1,
            hidden_dim: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 11,
            max_seq: 4,
            classes: 2,
            seed: 21,
            ..ModelConfig::default()
        }
    }

    fn objective(
        params: &ParamTable,
        masks: &PruningState,
        cfg: &ModelConfig,
        inputs: &Inputs,
        labels: &[usize],
        targets: &[String],
        lambda: f64,
    ) -> (ExprGraph, Vec<spur::NodeId>, spur::NodeId) {
        let mut g = ExprGraph::new();
        let bound = params.bind(&mut g);
        let fwd = forward(&mut g, params, &bound, masks, cfg, inputs).unwrap();
        let ce = g.cross_entropy_mean(fwd.logits, labels).unwrap();
        let nodes: Vec<_> = targets.iter().map(|n| fwd.effective_node(n).unwrap()).collect();
        let reg = regularization_loss_node(&mut g, &nodes, DevianceVariant::Spur).unwrap();
        let weighted = g.scale(reg, lambda);
        let loss = g.add(ce, weighted).unwrap();
        (g, bound, loss)
    }

    /// Backward gradients of `L_ce + lambda * L_R` against central differences
    /// on every prunable matrix of a 1-layer transformer with random masks.
    pub fn transformer(lambda: f64, h: f64, rel: f64, floor: f64) -> Report {
        let cfg = tiny_transformer();
        let params = init_model(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let targets = select_targets(&params, TargetDomain::All).unwrap();
        let masks = PruningState::from_masks(
            targets
                .iter()
                .map(|n| {
                    let w = params.get(n).unwrap();
                    let noise = Matrix::from_fn(w.rows(), w.cols(), |_, _| rng.gen_range(0.0..1.0));
                    (n.clone(), compute_mask(&noise, 0.6))
                })
                .collect(),
            0.6,
            0,
        );
        let n = 3;
        let ids: Vec<usize> = (0..n * cfg.max_seq).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let inputs = Inputs::Tokens(TokenGrid::new(n, cfg.max_seq, ids).unwrap());
        let labels = [0, 1, 1];

        let (g, bound, loss) = objective(&params, &masks, &cfg, &inputs, &labels, &targets, lambda);
        let grads = backward(&g, loss, &bound).unwrap();
        let mut report = Report {
            checked: 0,
            skipped: 0,
            masked_nonzero: 0,
            worst: 0.0,
            worst_abs: 0.0,
            failures: Vec::new(),
        };
        for name in &targets {
            let i = params.position(name).unwrap();
            let analytic = grads.get(bound[i]).unwrap();
            let mask = masks.get(name).unwrap();
            let eval = |w: &Matrix| {
                let mut p = params.clone();
                *p.value_mut(i) = w.clone();
                let (g, _, loss) = objective(&p, &masks, &cfg, &inputs, &labels, &targets, lambda);
                g.value(loss).item()
            };
            let w0 = params.get(name).unwrap();
            let numeric = finite_difference_gradient(&eval, w0, h);
            let base = eval(w0);
            for idx in 0..w0.len() {
                let a = analytic.data()[idx];
                if !mask.bits()[idx] {
                    if a != 0.0 {
                        report.masked_nonzero += 1;
                    }
                    continue;
                }
                let mut probe = w0.clone();
                probe.data_mut()[idx] += h;
                let ahead = (eval(&probe) - base) / h;
                probe.data_mut()[idx] -= 2.0 * h;
                let behind = (base - eval(&probe)) / h;
                let slack = 1e-3 * ahead.abs().max(behind.abs()) + 1e-6;
                if (ahead - behind).abs() > slack {
                    report.skipped += 1;
                    continue;
                }
                let num = numeric.data()[idx];
                let diff = (a - num).abs();
                report.checked += 1;
                report.worst_abs = report.worst_abs.max(diff);
                if diff <= floor {
                    continue;
                }
                let err = diff / a.abs().max(num.abs());
                report.worst = report.worst.max(err);
                if err > rel {
                    report.failures.push(format!("{name}[{idx}]: {a} vs {num}"));
                }
            }
        }
        report
    }
}
