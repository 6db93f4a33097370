use std::collections::HashSet;

use spur::harness::{
    adam_step, evaluate, gen_blobs, gen_duplicate_task, gen_majority_task, majority_label,
    sweep_compare, train, AdamConfig, ExperimentConfig, Method, MethodSpec, Moments, RunRecord,
    Task,
};
use spur::models::{init_model, Inputs, ModelKind, Role};
use spur::pruner::density_at;
use spur::{Mask, Matrix, PruningState, SpurError};

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        task: Task::Majority,
        ..ExperimentConfig::default()
    };
    cfg.model.layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.ffn_dim = 16;
    cfg.model.vocab = 2;
    cfg.model.max_seq = 5;
    cfg.data.n_train = 64;
    cfg.data.n_test = 32;
    cfg.schedule.v_final = 0.3;
    cfg.schedule.t_i = 4;
    cfg.schedule.ramp_steps = 24;
    cfg.schedule.cadence = 4;
    cfg.schedule.total_steps = 40;
    cfg.lambda_schedule.t_i = 4;
    cfg.lambda_schedule.ramp_steps = 24;
    cfg.batch_size = 8;
    cfg.eval_every = 10;
    cfg.seed = 11;
    cfg.model.seed = 11;
    cfg
}

fn run(cfg: &ExperimentConfig) -> RunRecord {
    train(cfg, &cfg.dataset().unwrap()).unwrap().record
}

#[test]
fn identical_configs_give_identical_records() {
    let cfg = tiny();
    assert_eq!(run(&cfg).to_jsonl(), run(&cfg).to_jsonl());
    let mut other = tiny();
    other.seed = 12;
    assert_ne!(run(&cfg).to_jsonl(), run(&other).to_jsonl());
}

#[test]
fn zero_lambda_reduces_to_plain_pruning() {
    let mut spur = tiny();
    spur.method = Method::ImpSpur;
    spur.lambda_schedule.lambda_final = 0.0;
    let mut imp = tiny();
    imp.method = Method::Imp;
    assert_eq!(run(&spur).to_jsonl(), run(&imp).to_jsonl());
}

#[test]
fn record_tracks_the_schedule() {
    let cfg = tiny();
    let record = run(&cfg);
    let steps: Vec<usize> = record.rows.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 10, 20, 30, 40]);
    for row in &record.rows {
        assert_eq!(row.density, density_at(row.step, &cfg.schedule));
        assert_eq!(row.lambda, cfg.lambda_at(row.step));
        assert!((0.0..=1.0).contains(&row.test_accuracy));
        assert_eq!(row.per_matrix_deviance.len(), 6);
    }
    let last = record.rows.last().unwrap();
    assert_eq!(last.density, cfg.schedule.v_final);
    assert!((last.mask_density - cfg.schedule.v_final).abs() < 0.01);
    let budget: Vec<f64> = record.rows.iter().map(|r| r.mask_density).collect();
    assert!(budget.windows(2).all(|w| w[1] <= w[0]), "{budget:?}");
}

#[test]
fn final_masks_hit_the_target_count() {
    let cfg = tiny();
    let out = train(&cfg, &cfg.dataset().unwrap()).unwrap();
    assert_eq!(out.masks.len(), 6);
    for (name, m) in out.masks.masks() {
        let want = (cfg.schedule.v_final * m.bits().len() as f64).round() as usize;
        assert_eq!(m.popcount(), want, "{name}");
    }
}

#[test]
fn jsonl_round_trips_with_fixed_key_order() {
    let record = run(&tiny());
    let text = record.to_jsonl();
    assert_eq!(RunRecord::from_jsonl(&text).unwrap(), record);
    let first = text.lines().next().unwrap();
    let keys = [
        "\"step\"",
        "\"density\"",
        "\"mask_density\"",
        "\"lambda\"",
        "\"train_l_ce\"",
        "\"train_l_r\"",
        "\"test_accuracy\"",
        "\"per_matrix_deviance\"",
    ];
    let pos: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn dense_training_separates_clean_blobs() {
    let mut cfg = ExperimentConfig {
        task: Task::Blobs,
        ..ExperimentConfig::default()
    };
    cfg.model.kind = ModelKind::Mlp;
    cfg.model.layers = 1;
    cfg.model.hidden_dim = 8;
    cfg.model.input_dim = 2;
    cfg.model.classes = 3;
    cfg.data.n_train = 60;
    cfg.data.n_test = 30;
    cfg.data.spread = 0.0;
    cfg.schedule.v_final = 1.0;
    cfg.schedule.t_i = 0;
    cfg.schedule.ramp_steps = 1;
    cfg.schedule.total_steps = 200;
    cfg.lambda_schedule.lambda_final = 0.0;
    cfg.optimizer.learning_rate = 0.05;
    cfg.batch_size = 16;
    cfg.eval_every = 100;
    assert_eq!(run(&cfg).final_accuracy(), Some(1.0));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny();
    cfg.model.kind = ModelKind::Mlp;
    assert!(matches!(cfg.validate(), Err(SpurError::Config(_))));
    let mut cfg = tiny();
    cfg.schedule.v_final = 1.5;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny();
    cfg.optimizer.beta1 = 1.0;
    assert!(cfg.validate().is_err());
    assert_eq!(ExperimentConfig::default().validate().ok(), Some(()));
}

#[test]
fn imp_never_regularizes() {
    let mut cfg = tiny();
    cfg.method = Method::Imp;
    assert!(run(&cfg).rows.iter().all(|r| r.lambda == 0.0));
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let hp = AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    };
    let mut w = Matrix::scalar(1.0);
    let grad = Matrix::scalar(2.0);
    let mut state = Moments::zeros(1, 1);
    adam_step(&mut w, &grad, &mut state, None, &hp, 1);
    assert!((w.item() - (1.0 - 0.1 * 2.0 / (2.0 + hp.eps))).abs() < 1e-15);
    assert!((w.item() - 0.9).abs() < 1e-8);

    let mut z = Matrix::from_rows(&[[0.5, -0.5]]);
    let mut zs = Moments::zeros(1, 2);
    adam_step(&mut z, &Matrix::zeros(1, 2), &mut zs, None, &hp, 1);
    assert_eq!(z.data(), &[0.5, -0.5]);
}

#[test]
fn adam_skips_masked_entries() {
    let hp = AdamConfig::default();
    let mut w = Matrix::from_rows(&[[1.0, 2.0]]);
    let mut state = Moments::zeros(1, 2);
    let mask = Mask::from_rows(&[[1, 0]]);
    adam_step(&mut w, &Matrix::from_rows(&[[0.3, 0.7]]), &mut state, Some(&mask), &hp, 1);
    assert_ne!(w.get(0, 0), 1.0);
    assert_eq!(w.get(0, 1), 2.0);
    assert_eq!((state.m.get(0, 1), state.v.get(0, 1)), (0.0, 0.0));
}

fn distinct(seq: &[usize]) -> bool {
    seq.iter().collect::<HashSet<_>>().len() == seq.len()
}

#[test]
fn duplicate_task_contract() {
    let a = gen_duplicate_task(3, 100, 41, 6, 10).unwrap();
    let b = gen_duplicate_task(3, 100, 41, 6, 10).unwrap();
    assert_eq!(a, b);
    for split in [&a.train, &a.test] {
        let Inputs::Tokens(grid) = &split.inputs else { panic!("tokens expected") };
        let ones = split.labels.iter().filter(|&&l| l == 1).count();
        assert!(ones.abs_diff(split.len() - ones) <= 1);
        for (r, &label) in split.labels.iter().enumerate() {
            assert_eq!(distinct(grid.row(r)), label == 0, "row {r}");
        }
    }
    assert!(matches!(gen_duplicate_task(0, 4, 4, 6, 6), Err(SpurError::Config(_))));
}

#[test]
fn majority_and_blob_tasks() {
    assert_eq!(majority_label(&[1, 1, 0]), 1);
    assert_eq!(majority_label(&[0, 1, 0]), 0);
    let m = gen_majority_task(5, 50, 10, 7).unwrap();
    assert_eq!(m, gen_majority_task(5, 50, 10, 7).unwrap());
    let Inputs::Tokens(grid) = &m.train.inputs else { panic!("tokens expected") };
    for (r, &label) in m.train.labels.iter().enumerate() {
        assert_eq!(majority_label(grid.row(r)), label);
    }
    assert!(gen_majority_task(5, 10, 10, 4).is_err());

    let blobs = gen_blobs(1, 9, 3, 2, 3, 0.0).unwrap();
    let Inputs::Features(x) = &blobs.train.inputs else { panic!("features expected") };
    assert_eq!(x.row(2), &[8.0, 0.0]);
    assert_eq!(x.row(1), &[0.0, 4.0]);
    assert!(gen_blobs(1, 9, 3, 2, 1, 0.0).is_err());
}

#[test]
fn evaluation_contract() {
    let mut cfg = tiny();
    cfg.model.classes = 2;
    let data = cfg.dataset().unwrap();
    let mut params = init_model(&cfg.model).unwrap();
    for i in 0..params.len() {
        let role = params.params()[i].role;
        if role == Role::Head {
            params.value_mut(i).apply(|_| 0.0);
        }
    }
    let constant = evaluate(&params, &PruningState::empty(), &cfg.model, &data.test).unwrap();
    let zeros = data.test.labels.iter().filter(|&&l| l == 0).count() as f64;
    assert_eq!(constant, zeros / data.test.len() as f64);

    let one = data.test.select(&[0]);
    let acc = evaluate(&params, &PruningState::empty(), &cfg.model, &one).unwrap();
    assert!(acc == 0.0 || acc == 1.0);
    let empty = data.test.select(&[]);
    assert!(matches!(
        evaluate(&params, &PruningState::empty(), &cfg.model, &empty),
        Err(SpurError::Contract(_))
    ));
}

#[test]
fn singleton_sweep_reports_the_run() {
    let cfg = tiny();
    let imp: MethodSpec = "imp".parse().unwrap();
    let out = sweep_compare(&cfg, &[0.3], &[imp], &[11], 1, None).unwrap();
    assert_eq!(out.cells.len(), 1);
    let acc = run(&ExperimentConfig { method: Method::Imp, ..cfg.clone() }).final_accuracy().unwrap();
    assert_eq!(out.cells[0].mean_acc, acc);
    assert_eq!(out.cells[0].std_acc, 0.0);
    assert_eq!(out.cells[0].gap, Some(0.0));
    let csv = out.to_csv();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(csv.lines().next().unwrap(), "density,method,variant,domain,seed_count,mean_acc,std_acc,gap");
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let cfg = tiny();
    let methods: Vec<MethodSpec> = ["imp", "imp_spur"].iter().map(|m| m.parse().unwrap()).collect();
    let one = sweep_compare(&cfg, &[0.5, 0.3], &methods, &[1, 2], 1, None).unwrap();
    let two = sweep_compare(&cfg, &[0.5, 0.3], &methods, &[1, 2], 2, None).unwrap();
    assert_eq!(one.to_csv(), two.to_csv());
    assert_eq!(one.cells.len(), 4);
    for cell in &one.cells {
        let imp = one.cells.iter().find(|c| c.density == cell.density && c.method == "imp").unwrap();
        assert_eq!(cell.gap, Some(cell.mean_acc - imp.mean_acc));
    }
}

#[test]
fn failed_runs_are_marked() {
    let mut cfg = tiny();
    cfg.task = Task::Duplicate;
    cfg.model.vocab = 3;
    let imp: MethodSpec = "imp".parse().unwrap();
    let out = sweep_compare(&cfg, &[0.3], &[imp], &[1], 1, None).unwrap();
    assert!(out.any_failed());
    assert!(out.cells[0].failed);
    assert!(out.to_csv().lines().nth(1).unwrap().ends_with("failed,failed,failed"));
}

#[test]
fn method_tokens() {
    let spec: MethodSpec = "imp_spur@100".parse().unwrap();
    assert_eq!(spec.lambda_final, Some(100.0));
    assert_eq!(spec.label(), "imp_spur@100");
    assert!("imp@10".parse::<MethodSpec>().is_err());
    assert!("magnitude".parse::<MethodSpec>().is_err());
}
