use std::f64::consts::PI;

use super::*;
use crate::data::{synthesize, SynthConfig, SyntheticData, WindowSize};
use crate::tensor::Tensor;

fn small_model() -> ModelConfig {
    ModelConfig {
        tcn_blocks: 1,
        tcn_dilations: vec![1],
        mlp_hidden: vec![32],
        ..ModelConfig::default()
    }
}

fn data(per_class: usize, separation: f32, seed: u64) -> (SyntheticData, TextBank) {
    let d = synthesize(&SynthConfig::new(per_class, WindowSize::try_from(10).unwrap(), separation, seed)).unwrap();
    let bank = TextBank::new(d.text_bank.clone(), crate::data::TEXT_DIM).unwrap();
    (d, bank)
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: 16,
        accumulation_steps: 1,
        ..TrainConfig::default()
    }
}

fn store(values: &[f32]) -> ParamStore<f32> {
    let mut s = ParamStore::new();
    s.add("p", Tensor::new(&[values.len()], values.to_vec()).unwrap());
    s
}

fn set_grad(s: &mut ParamStore<f32>, g: &[f32]) {
    let id = s.ids().next().unwrap();
    s.zero_grad();
    s.accumulate(&[(id, g.to_vec())]).unwrap();
}

fn values(s: &ParamStore<f32>) -> Vec<f32> {
    s.iter().next().unwrap().2.data().to_vec()
}

/// Textbook AdamW in f64, one scalar at a time.
fn adamw_oracle(theta0: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut theta) = (0.0, 0.0, theta0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        theta -= lr * (mh / (vh.sqrt() + eps) + wd * theta);
    }
    theta
}

#[test]
fn zero_gradient_without_decay_leaves_parameters_unchanged() {
    let mut s = store(&[0.5, -1.0, 2.0]);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&s);
    set_grad(&mut s, &[0.0; 3]);
    opt.step(&mut s, 1e-3, &cfg).unwrap();
    assert_eq!(values(&s), vec![0.5, -1.0, 2.0]);
}

#[test]
fn first_step_moves_by_lr_times_sign() {
    let mut s = store(&[1.0, 1.0]);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(&s);
    set_grad(&mut s, &[3.0, -0.25]);
    opt.step(&mut s, 0.1, &cfg).unwrap();
    let v = values(&s);
    assert!((v[0] - 0.9).abs() < 1e-6, "{v:?}");
    assert!((v[1] - 1.1).abs() < 1e-6, "{v:?}");
}

#[test]
fn decay_alone_shrinks_by_one_minus_lr_wd() {
    let mut s = store(&[2.0]);
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&s);
    set_grad(&mut s, &[0.0]);
    opt.step(&mut s, 0.5, &cfg).unwrap();
    assert!((values(&s)[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-7);
}

#[test]
fn multi_step_update_matches_reference() {
    let grads = [0.3, -1.2, 0.05, 2.0, -0.7, 0.0, 0.4];
    let mut s = store(&[0.8]);
    let cfg = TrainConfig::default();
    let mut opt = AdamW::new(&s);
    for g in grads {
        set_grad(&mut s, &[g as f32]);
        opt.step(&mut s, 1e-2, &cfg).unwrap();
    }
    assert_eq!(opt.steps(), grads.len() as u64);
    let want = adamw_oracle(0.8, &grads, 1e-2, 0.01);
    assert!((f64::from(values(&s)[0]) - want).abs() < 1e-6);
}

#[test]
fn non_finite_gradient_aborts_without_touching_parameters() {
    let mut s = store(&[1.0, 2.0]);
    let mut opt = AdamW::new(&s);
    set_grad(&mut s, &[0.1, f32::NAN]);
    let err = opt.step(&mut s, 1e-3, &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFiniteGrad(ref m) if m.contains("p[1]")), "{err}");
    assert_eq!(values(&s), vec![1.0, 2.0]);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn cosine_schedule_endpoints_and_midpoint() {
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    assert_eq!(cosine_lr(0, &cfg), 1e-5);
    assert!((cosine_lr(1, &cfg) - 0.5e-5).abs() < 1e-20);
    assert!(cosine_lr(2, &cfg).abs() < 1e-20);
    let floor = TrainConfig {
        lr_min: 1e-6,
        epochs: 30,
        ..TrainConfig::default()
    };
    assert!((cosine_lr(29, &floor) - 1e-6).abs() < 1e-20);
    for e in 1..30 {
        assert!(cosine_lr(e, &floor) < cosine_lr(e - 1, &floor));
    }
    let single = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    assert_eq!(cosine_lr(0, &single), 1e-5);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert_eq!(TrainConfig::default().micro_batch(), 16);
    let bad = [
        TrainConfig {
            batch_size: 60,
            accumulation_steps: 7,
            ..TrainConfig::default()
        },
        TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        },
        TrainConfig {
            betas: [0.9, 1.0],
            ..TrainConfig::default()
        },
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
    }
    let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "momentum": 0.9}"#).unwrap_err();
    assert!(err.to_string().contains("momentum"));
    let c: TrainConfig = serde_json::from_str(r#"{"epochs": 5}"#).unwrap();
    assert_eq!(c.epochs, 5);
    assert_eq!(c.lambda, 0.1);
}

fn grads_of(t: &Trainer) -> Vec<Vec<f32>> {
    t.state()
        .params()
        .iter()
        .map(|(_, _, p)| p.grad().map(<[f32]>::to_vec).unwrap_or_default())
        .collect()
}

fn rel_diff(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum();
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn accumulated_micro_batches_match_the_full_batch() {
    let (d, bank) = data(8, 2.0, 3);
    let items: Vec<(u64, &WindowSample)> = d.train.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    let weights = ClassStats::from_labels(&d.train.iter().map(|s| s.label).collect::<Vec<_>>())
        .unwrap()
        .weights
        .to_vec();
    let state = ModelState::<f32>::init(small_model(), 42).unwrap();
    let run = |acc: usize| {
        let cfg = TrainConfig {
            batch_size: 64,
            accumulation_steps: acc,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(state.clone(), cfg, weights.clone(), &bank).unwrap();
        let mut preds = Vec::new();
        let stats = t.compute_gradients(&items, &mut preds).unwrap();
        let grads = grads_of(&t);
        t.opt.step(t.state.params_mut(), 1e-3, &t.cfg).unwrap();
        (stats, grads, t.into_state(), preds)
    };
    let (s1, g1, p1, pr1) = run(1);
    let (s4, g4, p4, pr4) = run(4);
    assert_eq!(pr1, pr4);
    assert!((s1.l_total - s4.l_total).abs() <= 1e-5 * s1.l_total.abs());
    assert!((s1.l_con - s4.l_con).abs() <= 1e-5 * s1.l_con.abs());
    for (a, b) in g4.iter().zip(&g1) {
        assert!(rel_diff(a, b) <= 1e-5, "grad rel diff {}", rel_diff(a, b));
    }
    let flat = |m: &ModelState<f32>| -> Vec<f32> { m.params().iter().flat_map(|(_, _, p)| p.data().to_vec()).collect() };
    let r = rel_diff(&flat(&p4), &flat(&p1));
    assert!(r <= 1e-5, "parameter rel diff {r}");
}

#[test]
fn accumulation_without_contrastive_term_matches_too() {
    let (d, bank) = data(4, 2.0, 5);
    let items: Vec<(u64, &WindowSample)> = d.train.iter().enumerate().map(|(i, s)| (i as u64, s)).collect();
    let state = ModelState::<f32>::init(small_model(), 1).unwrap();
    let run = |acc: usize| {
        let cfg = TrainConfig {
            batch_size: 32,
            accumulation_steps: acc,
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(state.clone(), cfg, vec![1.0; NUM_CLASSES], &bank).unwrap();
        let stats = t.compute_gradients(&items, &mut Vec::new()).unwrap();
        (stats, grads_of(&t))
    };
    let (s1, g1) = run(1);
    let (s2, g2) = run(2);
    assert!((s1.l_cls - s2.l_cls).abs() <= 1e-6 * s1.l_cls);
    assert!((s1.l_con - s2.l_con).abs() <= 1e-5 * s1.l_con);
    assert_eq!(s1.l_total, s1.l_cls);
    for (a, b) in g2.iter().zip(&g1) {
        assert!(rel_diff(a, b) <= 1e-5);
    }
}

fn step_epochs(log: &RunLog) -> Vec<usize> {
    log.records()
        .iter()
        .filter_map(|r| match r {
            LogRecord::Step { epoch, .. } => Some(*epoch),
            _ => None,
        })
        .collect()
}

#[test]
fn one_optimizer_step_per_effective_batch() {
    // 8 classes x 5 = 40 samples, batches of 16: 16 + 16 + 8.
    let (d, bank) = data(5, 2.0, 9);
    for acc in [1, 2, 4] {
        let cfg = TrainConfig {
            epochs: 2,
            accumulation_steps: acc,
            ..quick(2)
        };
        let out = train(&d.train, &d.val, &bank, &small_model(), &cfg, None).unwrap();
        assert_eq!(step_epochs(&out.log), vec![0, 0, 0, 1, 1, 1], "accumulation {acc}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let (d, bank) = data(3, 2.0, 4);
    let cfg = TrainConfig {
        accumulation_steps: 2,
        ..quick(3)
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let a = train(&d.train, &d.val, &bank, &small_model(), &cfg, Some(dir_a.path())).unwrap();
    let b = train(&d.train, &d.val, &bank, &small_model(), &cfg, Some(dir_b.path())).unwrap();
    let (ta, tb) = (a.log.loss_trace(), b.log.loss_trace());
    assert_eq!(ta.len(), 6);
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(x.0.to_bits(), y.0.to_bits());
        assert_eq!(x.1.to_bits(), y.1.to_bits());
        assert_eq!(x.2.to_bits(), y.2.to_bits());
    }
    let ca = fs::read(dir_a.path().join(BEST_CHECKPOINT)).unwrap();
    let cb = fs::read(dir_b.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.final_state.to_bytes(), b.final_state.to_bytes());

    let other = TrainConfig { seed: 7, ..cfg };
    let c = train(&d.train, &d.val, &bank, &small_model(), &other, None).unwrap();
    assert_ne!(c.log.loss_trace()[0].0.to_bits(), ta[0].0.to_bits());
}

#[test]
fn contrastive_weight_changes_the_first_step_loss() {
    let (d, bank) = data(2, 2.0, 6);
    let run = |lambda: f64| {
        let cfg = TrainConfig { lambda, ..quick(1) };
        train(&d.train, &d.val, &bank, &small_model(), &cfg, None).unwrap().log.loss_trace()[0]
    };
    let (zero, on) = (run(0.0), run(0.1));
    assert_eq!(zero.1.to_bits(), on.1.to_bits());
    assert_eq!(zero.0, zero.1);
    assert_ne!(zero.0, on.0);
    assert!((on.0 - (on.1 + 0.1 * on.2)).abs() < 1e-6);
}

#[test]
fn lr_trace_follows_closed_form() {
    let (d, bank) = data(1, 2.0, 2);
    let cfg = TrainConfig {
        lr_min: 1e-5,
        ..quick(4)
    };
    let out = train(&d.train, &d.val, &bank, &small_model(), &cfg, None).unwrap();
    let trace = out.log.lr_trace();
    assert_eq!(trace.len(), 4);
    for (e, lr) in trace.iter().enumerate() {
        let want = 1e-5 + (1e-3 - 1e-5) * (1.0 + (PI * e as f64 / 3.0).cos()) / 2.0;
        assert_eq!(*lr, want, "epoch {e}");
    }
}

#[test]
fn best_checkpoint_reproduces_logged_validation_f1() {
    let (d, bank) = data(4, 1.0, 8);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&d.train, &d.val, &bank, &small_model(), &quick(4), Some(dir.path())).unwrap();
    let records = RunLog::read_jsonl(&dir.path().join(RUN_LOG)).unwrap();
    assert_eq!(records, out.log.records());
    let f1s = out.log.val_f1_trace();
    let best_logged = f1s[out.best_epoch];
    assert!(f1s.iter().all(|&f| f <= best_logged));
    assert_eq!(f1s.iter().position(|&f| f == best_logged), Some(out.best_epoch));

    let reloaded = ModelState::load(&dir.path().join(BEST_CHECKPOINT)).unwrap();
    let again = evaluate(&reloaded, &d.val, 5).unwrap();
    assert_eq!(again.macro_f1.to_bits(), best_logged.to_bits());
    assert_eq!(again, out.best_val);
}

#[test]
fn divergence_aborts_and_leaves_the_last_good_checkpoint() {
    let (d, bank) = data(2, 2.0, 1);
    let cfg = TrainConfig {
        lr: 1e38,
        weight_decay: 0.0,
        ..quick(5)
    };
    let dir = tempfile::tempdir().unwrap();
    let err = train(&d.train, &d.val, &bank, &small_model(), &cfg, Some(dir.path())).unwrap_err();
    assert!(
        matches!(err, Error::Diverged { .. } | Error::NonFiniteGrad(_)),
        "{err}"
    );
    assert_eq!(err.kind(), crate::ErrorKind::Numeric);
    let last = ModelState::load(&dir.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    for (_, name, p) in last.params().iter() {
        assert!(p.data().iter().all(|x| x.is_finite()), "{name}");
    }
}

#[test]
fn trainer_rejects_mismatched_bank_and_weights() {
    let (_, bank) = data(1, 1.0, 0);
    let state = ModelState::<f32>::init(ModelConfig::tiny(), 0).unwrap();
    let err = Trainer::new(state, TrainConfig::default(), vec![1.0; 8], &bank).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
    let state = ModelState::<f32>::init(small_model(), 0).unwrap();
    let err = Trainer::new(state, TrainConfig::default(), vec![1.0; 3], &bank).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn log_records_serialize_with_a_type_tag() {
    let r = LogRecord::Step {
        epoch: 0,
        step: 3,
        lr: 1e-3,
        l_total: 2.0,
        l_cls: 1.9,
        l_con: 1.0,
    };
    let s = serde_json::to_string(&r).unwrap();
    assert!(s.starts_with(r#"{"type":"step""#), "{s}");
    assert_eq!(serde_json::from_str::<LogRecord>(&s).unwrap(), r);
}

#[test]
fn single_window_ablation_matches_direct_training() {
    let w = WindowSize::try_from(10).unwrap();
    let (d, bank) = data(2, 2.0, 12);
    let cfg = quick(2);
    let direct = train(&d.train, &d.val, &bank, &small_model(), &cfg, None).unwrap();
    let report = ablate_windows(
        &[w],
        |_| {
            Ok(AblationData {
                train: d.train.clone(),
                val: d.val.clone(),
                test: Some(d.test.clone()),
                bank: bank.clone(),
            })
        },
        &small_model(),
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].macro_f1.to_bits(), direct.best_val.macro_f1.to_bits());
    assert_eq!(report.rows[0].best_epoch, direct.best_epoch);
    let test_f1 = evaluate(&direct.best, &d.test, 64).unwrap().macro_f1;
    assert_eq!(report.rows[0].test_macro_f1, Some(test_f1));
    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("Challenge") && lines[0].ends_with("Result"));
    assert!(lines[2].starts_with("EXPR") && lines[2].contains("Macro F1") && lines[2].ends_with("0.2500"));
    assert!(lines[3].contains("Ours (10 frames)"));
}

#[test]
fn ablation_rejects_mismatched_window_data() {
    let (d, bank) = data(1, 2.0, 12);
    let err = ablate_windows(
        &[WindowSize::try_from(30).unwrap()],
        |_| {
            Ok(AblationData {
                train: d.train.clone(),
                val: d.val.clone(),
                test: None,
                bank: bank.clone(),
            })
        },
        &small_model(),
        &quick(1),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}



#[test]
fn combined_loss_grad_check_covers_every_parameter() {
    let cfg = ModelConfig::tiny();
    let report = combined_loss_grad_check(&cfg, 3, crate::tensor::GradCheckConfig::default()).unwrap();
    let n = ModelState::<f64>::init(cfg, 3).unwrap().params().ids().count();
    assert_eq!(report.params.len(), n);
    assert!(report.max_rel_error() <= 1e-4, "{report:?}");
}
