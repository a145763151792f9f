use devtune_core::config::default_tasks;
use devtune_core::optim::OptimizerState;
use devtune_core::{
    generate_batch, train, AdamConfig, RunConfig, SplitModel, SyntheticTaskSpec, Tape, TaskKind, TrainConfig,
};

fn desk_config(tasks: Vec<SyntheticTaskSpec>, steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        tasks,
        ..Default::default()
    };
    cfg.sync_heads();
    cfg.train.steps = steps;
    cfg.validate().unwrap();
    cfg
}

#[test]
fn single_majority_task_halves_its_loss() {
    let mut tasks = default_tasks(32);
    tasks.truncate(1);
    let cfg = desk_config(tasks, 200);
    let mut model = SplitModel::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let report = train(&mut model, &cfg.tasks, &cfg.train, cfg.data_seed(), |_| {}).unwrap();
    let ratio = report.final_eval_losses[0] / report.initial_eval_losses[0];
    println!("majority 200 steps: final/initial eval loss = {ratio:.4}");
    assert!(ratio < 0.5, "ratio {ratio}");
}

#[test]
fn balancing_moves_weights_for_unequal_tasks() {
    let easy = SyntheticTaskSpec {
        id: "first".into(),
        kind: TaskKind::TokenAtPosition { position: 0 },
        num_classes: 4,
        seq_len: 16,
        alphabet: None,
        seed: 1,
    };
    let hard = SyntheticTaskSpec {
        id: "parity".into(),
        kind: TaskKind::Parity { token: 1 },
        num_classes: 2,
        seq_len: 16,
        alphabet: Some(4),
        seed: 2,
    };
    let mut cfg = desk_config(vec![easy, hard], 60);
    cfg.model.encoder.width = 16;
    cfg.model.encoder.num_heads = 2;
    let mut model = SplitModel::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let report = train(&mut model, &cfg.tasks, &cfg.train, cfg.data_seed(), |_| {}).unwrap();
    let w = &report.final_weights;
    println!("final weights {w:?}");
    assert!((w[0] - 1.0).abs() > 1e-3 && (w[1] - 1.0).abs() > 1e-3);
    assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-6);
}

#[test]
fn step_driven_by_one_task_leaves_other_head_unchanged() {
    let cfg = desk_config(default_tasks(16), 1);
    let mut model = SplitModel::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    let other = model.head("first_token").unwrap().clone();
    let before = (
        model.params.get(other.weight).clone(),
        model.params.get(other.bias).clone(),
    );
    let batch = generate_batch(&cfg.tasks[0], 4, 0);

    let tape = Tape::new();
    let w = model.params.bind(&tape, true);
    let loss = model
        .task_loss_on(&w, "majority", &batch.sequences, &batch.labels)
        .unwrap();
    tape.backward(loss).unwrap();
    let grads = w.grads();
    drop(w);
    let mut opt = OptimizerState::new(AdamConfig::default(), &model.params);
    opt.step(&mut model.params, &grads);

    assert!(model.params.get(other.weight).bit_eq(&before.0));
    assert!(model.params.get(other.bias).bit_eq(&before.1));
    let own = model.head("majority").unwrap().weight;
    let fresh = SplitModel::new(cfg.model.clone(), cfg.init_seed()).unwrap();
    assert!(!model.params.get(own).bit_eq(fresh.params.get(own)));
}

#[test]
fn identical_runs_produce_identical_reports() {
    let mut cfg = desk_config(default_tasks(16), 10);
    cfg.train = TrainConfig {
        steps: 10,
        batch_size: 4,
        eval_size: 8,
        ..cfg.train.clone()
    };
    let run = || {
        let mut model = SplitModel::new(cfg.model.clone(), cfg.init_seed()).unwrap();
        let report = train(&mut model, &cfg.tasks, &cfg.train, cfg.data_seed(), |_| {}).unwrap();
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        (csv, model.params)
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert!(pa.bit_eq(&pb));
}
