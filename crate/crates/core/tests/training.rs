mod common;

use tagmt::harness::{run_experiment, ExperimentConfig, LogRecord, RunLog, RunOptions};
use tagmt::model::Model;
use tagmt::objectives::{ExampleKind, FinetuneSetting};
use tagmt::Error;

use common::tiny;

fn run(t: &common::Tiny, config: &ExperimentConfig, opts: &RunOptions) -> RunLog {
    run_experiment::<f64>(config, &t.parallel, &t.mono, &t.tok, opts)
        .unwrap()
        .log
}

#[test]
fn base_runs_no_rounds() {
    let t = tiny();
    let log = run(&t, &t.config, &RunOptions::default());
    assert!(log.rounds().is_empty());
    assert!(!log.loss_trace().is_empty());
}

#[test]
fn decay_list_maps_one_entry_per_round() {
    let t = tiny();
    let mut config = ExperimentConfig {
        setting: FinetuneSetting::BtRec,
        epochs: 3,
        ..t.config.clone()
    };
    config.bt.start_epoch = 1;
    config.bt.num_bt = vec![100, 50, 10];
    config.bt.max_new_tokens = 6;
    config.rec.num_rec = 5;
    let log = run(&t, &config, &RunOptions::default());
    let bt: Vec<(usize, usize)> = log
        .rounds()
        .into_iter()
        .filter(|r| r.1 == ExampleKind::Bt)
        .map(|r| (r.0, r.2))
        .collect();
    assert_eq!(bt, [(1, 100), (2, 50), (3, 10)]);
    let rec: Vec<usize> = log
        .rounds()
        .into_iter()
        .filter(|r| r.1 == ExampleKind::Rec)
        .map(|r| r.0)
        .collect();
    assert_eq!(rec, [1, 2, 3]);
}

#[test]
fn bt_starts_at_the_configured_epoch() {
    let t = tiny();
    let mut config = ExperimentConfig {
        setting: FinetuneSetting::Bt,
        epochs: 3,
        ..t.config.clone()
    };
    config.bt.start_epoch = 2;
    config.bt.num_bt = vec![8];
    config.bt.max_new_tokens = 6;
    let log = run(&t, &config, &RunOptions::default());
    let rounds = log.rounds();
    assert_eq!(rounds, [(2, ExampleKind::Bt, 8), (3, ExampleKind::Bt, 8)]);
}

#[test]
fn same_seed_same_trace() {
    let t = tiny();
    let a = run(&t, &t.config, &RunOptions::default()).loss_trace();
    let b = run(&t, &t.config, &RunOptions::default()).loss_trace();
    assert_eq!(a, b);
    let other = ExperimentConfig {
        seed: t.config.seed + 1,
        ..t.config.clone()
    };
    assert_ne!(a, run(&t, &other, &RunOptions::default()).loss_trace());
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let t = tiny();
    let mut config = ExperimentConfig {
        setting: FinetuneSetting::BtRec,
        epochs: 3,
        ..t.config.clone()
    };
    config.bt.num_bt = vec![6];
    config.bt.max_new_tokens = 6;
    config.rec.num_rec = 4;
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_experiment::<f64>(
        &config,
        &t.parallel,
        &t.mono,
        &t.tok,
        &RunOptions {
            out_dir: Some(full_dir.path().into()),
            ..RunOptions::default()
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = RunOptions {
        out_dir: Some(dir.path().into()),
        stop_after_epoch: Some(1),
        ..RunOptions::default()
    };
    run(&t, &config, &first);
    let resumed = run_experiment::<f64>(
        &config,
        &t.parallel,
        &t.mono,
        &t.tok,
        &RunOptions {
            out_dir: Some(dir.path().into()),
            resume: true,
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.log.loss_trace(), full.log.loss_trace());
    assert_eq!(resumed.log.rounds(), full.log.rounds());
    assert_eq!(resumed.model.params, full.model.params);
    let audit = |d: &std::path::Path| std::fs::read_to_string(d.join("audit.jsonl")).unwrap();
    assert_eq!(audit(dir.path()), audit(full_dir.path()));
    let (best, _) = Model::<f64>::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.params, full.model.params);
}

#[test]
fn early_stop_within_patience() {
    let t = tiny();
    let mut config = ExperimentConfig {
        epochs: 6,
        eval_every_steps: 1,
        patience_evals: 2,
        ..t.config.clone()
    };
    config.optimizer.lr = 0.5;
    let log = run(&t, &config, &RunOptions::default());
    let stop = log.records.iter().find_map(|r| match r {
        LogRecord::Stop { reason, .. } => Some(reason.clone()),
        _ => None,
    });
    assert_eq!(stop.as_deref(), Some("early_stop"));
    let improved: Vec<bool> = log
        .records
        .iter()
        .filter_map(|r| match r {
            LogRecord::Eval { improved, .. } => Some(*improved),
            _ => None,
        })
        .collect();
    let last_best = improved.iter().rposition(|&i| i).unwrap();
    assert_eq!(improved.len() - 1 - last_best, 2);
}

#[test]
fn best_weights_are_returned() {
    let t = tiny();
    let out = run_experiment::<f64>(
        &t.config,
        &t.parallel,
        &t.mono,
        &t.tok,
        &RunOptions::default(),
    )
    .unwrap();
    let best = out
        .log
        .evals()
        .iter()
        .map(|e| e.1)
        .fold(f64::INFINITY, f64::min);
    let dev = tagmt::harness::dev_loss(&out.model, &dev_examples(&t), 16).unwrap();
    assert!((dev - best).abs() < 1e-9, "{dev} vs {best}");
}

fn dev_examples(t: &common::Tiny) -> Vec<(Vec<u32>, Vec<u32>)> {
    use tagmt::corpus::Split;
    use tagmt::objectives::{build_directions, format_translation};
    let dirs = build_directions(&t.config.languages, &t.config.exclusions).unwrap();
    dirs.iter()
        .flat_map(|d| {
            t.parallel
                .direction(d)
                .iter()
                .filter(|p| p.split == Split::Dev)
        })
        .map(|p| {
            let ex = format_translation(p);
            (t.tok.encode(&ex.input), t.tok.encode(&ex.target))
        })
        .collect()
}

#[test]
fn bt_without_mono_is_rejected_before_training() {
    let t = tiny();
    let config = ExperimentConfig {
        setting: FinetuneSetting::Bt,
        ..t.config.clone()
    };
    let err = run_experiment::<f32>(
        &config,
        &t.parallel,
        &tagmt::corpus::MonoStore::new(),
        &t.tok,
        &RunOptions::default(),
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn invalid_config_is_rejected() {
    let t = tiny();
    let config = ExperimentConfig {
        patience_evals: 0,
        ..t.config.clone()
    };
    assert!(matches!(config.validate(), Err(Error::Config(_))));
    let one = ExperimentConfig {
        languages: t.config.languages[..1].to_vec(),
        ..t.config.clone()
    };
    assert!(
        run_experiment::<f32>(&one, &t.parallel, &t.mono, &t.tok, &RunOptions::default()).is_err()
    );
}

#[test]
fn runlog_round_trips_through_jsonl() {
    let t = tiny();
    let log = run(&t, &t.config, &RunOptions::default());
    assert_eq!(RunLog::from_jsonl(&log.to_jsonl().unwrap()).unwrap(), log);
    assert!(matches!(log.records.first(), Some(LogRecord::Start { .. })));
}
