use super::*;
use crate::adapters::BoftForm;
use crate::model::Target;

fn small_model() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: 8,
        seq_len: 8,
        adapter_targets: vec![Target::AttnQ, Target::AttnV],
    }
}

fn small_task(kind: TaskKind, train_size: usize) -> Dataset {
    make_task(&TaskSpec {
        kind,
        seq_len: 8,
        vocab: 8,
        train_size,
        val_size: 64,
        seed: 9,
    })
    .unwrap()
}

fn small_train(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        epochs: 2,
        batch_size: 8,
        rank: 4,
        eta_lora: 3e-3,
        eta_boft: 0.1,
        record_wall_time: false,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_everything_untouched() {
    let data = small_task(TaskKind::Copy, 64);
    for method in Method::ALL {
        let mut cfg = small_train(method);
        cfg.epochs = 0;
        let run = train(&cfg, &small_model(), &data, 3).unwrap();
        assert!(run.records.is_empty());
        let fresh = init_model(&cfg, &small_model(), &data.train, 3).unwrap();
        assert_eq!(run.model, fresh, "{method}");
    }
}

#[test]
fn frozen_weights_survive_one_hundred_steps() {
    let data = small_task(TaskKind::Copy, 800);
    for method in Method::ALL.into_iter().filter(|&m| m != Method::Full) {
        let mut cfg = small_train(method);
        cfg.epochs = 1;
        let run = train(&cfg, &small_model(), &data, 4).unwrap();
        assert!(run.completed());
        let before = base_model(&small_model(), 4).unwrap().base;
        assert_eq!(run.model.base, before, "{method} moved a frozen weight");
    }
}

#[test]
fn full_fine_tuning_moves_base_weights() {
    let data = small_task(TaskKind::Copy, 64);
    let run = train(&small_train(Method::Full), &small_model(), &data, 4).unwrap();
    assert_ne!(run.model.base, base_model(&small_model(), 4).unwrap().base);
}

#[test]
fn lambda_is_reported_only_for_hybrid_and_stays_in_range() {
    let data = small_task(TaskKind::Copy, 128);
    for method in Method::ALL {
        let run = train(&small_train(method), &small_model(), &data, 5).unwrap();
        assert_eq!(run.records.len(), 2);
        for rec in &run.records {
            assert_eq!(rec.layers.len(), 2);
            for l in &rec.layers {
                assert!(l.grad_norm >= 0.0);
                match (method, l.lambda) {
                    (Method::Hybrid, Some(v)) => assert!((0.0..=1.0).contains(&v), "λ = {v}"),
                    (Method::Hybrid, None) => panic!("hybrid without λ"),
                    (_, Some(_)) => panic!("{method} reported λ"),
                    _ => {}
                }
                assert_eq!(l.g_lora.is_some(), matches!(method, Method::Lora | Method::LoraGa | Method::Hybrid));
                assert_eq!(l.g_boft.is_some(), matches!(method, Method::Boft | Method::Hybrid));
            }
        }
    }
}

#[test]
fn runs_are_deterministic_with_and_without_threads() {
    let data = small_task(TaskKind::Copy, 96);
    let cfg = small_train(Method::Hybrid);
    let a = train(&cfg, &small_model(), &data, 6).unwrap();
    let b = train(&cfg, &small_model(), &data, 6).unwrap();
    assert_eq!(a.records, b.records);
    crate::par::set_parallel(false);
    let c = train(&cfg, &small_model(), &data, 6).unwrap();
    crate::par::set_parallel(true);
    assert_eq!(a.records, c.records);
    assert_eq!(a.model, c.model);
}

#[test]
fn divergence_is_an_abort_not_an_error() {
    let data = small_task(TaskKind::Copy, 96);
    let mut cfg = small_train(Method::Hybrid);
    cfg.eta_lora = 1.0;
    let run = train(&cfg, &small_model(), &data, 6).unwrap();
    assert!(run.abort.is_some());
}

#[test]
fn injected_nan_aborts_with_a_diagnostic() {
    let data = small_task(TaskKind::Copy, 64);
    for method in Method::ALL {
        let mut cfg = small_train(method);
        cfg.hooks.nan_at_step = Some(3);
        let run = train(&cfg, &small_model(), &data, 7).unwrap();
        let abort = run.abort.expect("run must abort");
        assert_eq!((abort.method, abort.epoch, abort.layer), (method, 1, Some(1)), "{method}");
        assert!(run.records.is_empty());
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    let mcfg = small_model();
    let data = small_task(TaskKind::Copy, 16);
    let mut variants: Vec<TrainConfig> = Method::ALL.iter().map(|&m| small_train(m)).collect();
    let mut cayley = small_train(Method::Boft);
    cayley.boft_form = BoftForm::Cayley;
    let mut structured = small_train(Method::Urnn);
    structured.unitary_update = UnitaryUpdate::Structured;
    variants.extend([cayley, structured]);
    for cfg in variants {
        let model = init_model(&cfg, &mcfg, &data.train, 1).unwrap();
        let counted = if cfg.method == Method::Full {
            model.trainable_params(true).len()
        } else {
            model.adapter_param_count()
        };
        assert_eq!(counted, param_count_formula(&cfg, &mcfg), "{}", cfg.method);
    }
    let lora = small_train(Method::Lora);
    assert_eq!(param_count_formula(&lora, &mcfg), 2 * 2 * 4 * (16 + 16));
    let total: usize = {
        let b = base_model(&mcfg, 1).unwrap().base;
        let mut n = b.tok_emb.as_slice().len() + b.pos_emb.as_slice().len() + b.head.as_slice().len();
        for l in &b.layers {
            n += Target::ALL.iter().map(|&t| l.get(t).as_slice().len()).sum::<usize>();
            n += l.b1.len() + l.b2.len();
        }
        n
    };
    assert_eq!(param_count_formula(&small_train(Method::Full), &mcfg), total);
}

#[test]
fn evaluate_is_pure_and_tracks_the_final_train_loss() {
    let data = small_task(TaskKind::Copy, 256);
    let mut cfg = small_train(Method::Boft);
    cfg.boft_form = BoftForm::Cayley;
    cfg.eta_boft = 0.5;
    cfg.epochs = 40;
    let run = train(&cfg, &small_model(), &data, 8).unwrap();
    let snapshot = run.model.clone();
    let v1 = evaluate(&run.model, &data.val).unwrap();
    assert_eq!(v1, evaluate(&run.model, &data.val).unwrap());
    assert_eq!(run.model, snapshot);
    let last = run.last().unwrap();
    let on_train = evaluate(&run.model, &data.train).unwrap();
    assert!(
        (on_train - last.train_loss).abs() <= 0.05 * last.train_loss,
        "recomputed {on_train} vs recorded {}",
        last.train_loss
    );
    assert!(evaluate(&run.model, &[]).is_err());
}

#[test]
fn overfitting_one_batch_memorises_it() {
    let data = small_task(TaskKind::Copy, 8);
    let cfg = TrainConfig {
        method: Method::Full,
        epochs: 1500,
        batch_size: 8,
        eta_full: 0.05,
        record_wall_time: false,
        ..TrainConfig::default()
    };
    let run = train(&cfg, &small_model(), &data, 2).unwrap();
    let loss = evaluate(&run.model, &data.train).unwrap();
    assert!(loss < 1e-3, "memorised loss {loss}");
}

#[test]
fn structured_updates_stay_stable_on_the_adding_task() {
    let data = small_task(TaskKind::Adding, 400);
    for (method, form) in [(Method::Urnn, None), (Method::Boft, Some(BoftForm::Butterfly)), (Method::Boft, Some(BoftForm::Cayley))] {
        let mut cfg = small_train(method);
        cfg.epochs = 5;
        if let Some(f) = form {
            cfg.boft_form = f;
        }
        let run = train(&cfg, &small_model(), &data, 10).unwrap();
        let norms: Vec<f64> = run.records.iter().map(|r| r.grad_norm).collect();
        for w in norms.windows(2) {
            assert!(w[1] / w[0] <= 10.0 && w[0] / w[1] <= 10.0, "{method}: {norms:?}");
        }
    }
}

#[test]
fn sweep_shapes_and_averages() {
    let data = small_task(TaskKind::Copy, 32);
    let mcfg = small_model();
    let base = small_train(Method::Lora);
    let one = SweepSpec {
        train: base.clone(),
        methods: vec![Method::Lora],
        seeds: vec![1],
        jobs: 2,
        inject_nan: None,
    };
    let cells = sweep(&one, &mcfg, &data).unwrap();
    let csv = crate::report::sweep_csv(&cells);
    assert_eq!(csv.lines().count(), 2, "{csv}");

    let three = SweepSpec {
        methods: vec![Method::Lora, Method::Boft, Method::Hybrid],
        seeds: vec![1, 2, 3],
        inject_nan: Some((Method::Boft, 2)),
        ..one
    };
    let cells = sweep(&three, &mcfg, &data).unwrap();
    assert_eq!(cells.len(), 9);
    let csv = crate::report::sweep_csv(&cells);
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    let aborted: Vec<_> = rows.iter().filter(|r| r[2] == "aborted").collect();
    assert_eq!(aborted.len(), 1);
    assert_eq!((aborted[0][0], aborted[0][1]), ("boft", "2"));
    assert!(cells.iter().filter(|c| !(c.method == Method::Boft && c.seed == 2)).all(Cell::completed));
    for m in ["lora", "boft", "hybrid"] {
        let runs: Vec<&Vec<&str>> = rows.iter().filter(|r| r[0] == m && r[1] != "avg" && r[2] == "completed").collect();
        let avg = rows.iter().find(|r| r[0] == m && r[1] == "avg").unwrap();
        for col in 3..7 {
            let mean = runs.iter().map(|r| r[col].parse::<f64>().unwrap()).sum::<f64>() / runs.len() as f64;
            let got: f64 = avg[col].parse().unwrap();
            assert!((mean - got).abs() <= 1e-12 * mean.abs().max(1.0), "{m} col {col}");
        }
        assert_eq!(avg[2], if m == "boft" { "partial" } else { "completed" });
    }
}
