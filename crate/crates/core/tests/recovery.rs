use ftrain::cluster::FailurePhase;
use ftrain::model::ModelDims;
use ftrain::optimizers::{OptimizerHyper, OptimizerKind};
use ftrain::pipeline::{Engine, EngineConfig};
use ftrain::recovery::{recover, recover_with, CascadeFault, RecoveryOptions, Strategy};
use ftrain::resilience::LogConfig;

fn config(p: usize, m: usize, dp: usize, machines: usize, kind: OptimizerKind) -> EngineConfig {
    EngineConfig {
        p,
        m,
        dp,
        machines,
        placement: None,
        model: ModelDims {
            input_dim: 4,
            hidden_dim: 4,
            output_dim: 4,
            layers_per_stage: 2,
            batch_rows: 2,
        },
        optimizer: OptimizerHyper::new(kind, 0.01),
        seed: 7,
        checkpoint_interval: 10,
        logging: true,
        groups: None,
        log: LogConfig {
            chunk_records: 8,
            ..LogConfig::default()
        },
        detection_cycles: 2,
        parallel_helpers: None,
    }
}

fn ghost(cfg: &EngineConfig, end: u64) -> Engine {
    let dir = tempfile::tempdir().unwrap().keep();
    let mut g = Engine::new(cfg.clone(), &dir).unwrap();
    assert!(g.run_until(end).unwrap().is_none());
    g
}

#[test]
fn replay_matches_ghost_bit_exact() {
    let cfg = config(4, 4, 1, 4, OptimizerKind::Adam);
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
    e.inject_failure(1, 15, FailurePhase::BeforeUpdate).unwrap();
    assert!(e.run_until(30).unwrap().is_some());
    let before: Vec<String> = [0, 2, 3].iter().map(|&w| e.worker(w).digest()).collect();
    let rep = recover(&mut e).unwrap();
    assert_eq!(rep.strategy, Strategy::LoggingReplay);
    assert_eq!(rep.iterations_replayed, 5);
    assert_eq!(rep.checkpoint_iteration, Some(10));
    let after: Vec<String> = [0, 2, 3].iter().map(|&w| e.worker(w).digest()).collect();
    assert_eq!(before, after);
    let g = ghost(&cfg, 15);
    assert_eq!(e.state_digest(), g.state_digest());
    assert!(e.run_until(30).unwrap().is_none());
    assert_eq!(e.state_digest(), ghost(&cfg, 30).state_digest());
}

#[test]
fn mid_update_replication_and_negative_control() {
    let cfg = config(1, 2, 2, 2, OptimizerKind::Adam);
    let g = ghost(&cfg, 25);
    for skip in [false, true] {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
        e.inject_failure(1, 5, FailurePhase::MidUpdate(1)).unwrap();
        e.run_until(25).unwrap();
        let rep = recover_with(
            &mut e,
            &RecoveryOptions {
                skip_undo: skip,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rep.strategy, Strategy::Replication);
        assert!(e.run_until(25).unwrap().is_none());
        let diff = e
            .workers()
            .iter()
            .zip(g.workers())
            .map(|(a, b)| a.stage.max_rel_diff(&b.stage).unwrap())
            .fold(0.0, f64::max);
        if skip {
            assert!(diff > 1e-6, "diff {diff}");
        } else {
            assert_eq!(rep.undone_blocks, 2);
            assert!(diff <= 1e-9, "diff {diff}");
        }
    }
}

#[test]
fn parallel_equals_sequential() {
    let mut cfg = config(4, 4, 1, 4, OptimizerKind::Sgd);
    let run = |cfg: &EngineConfig| {
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
        e.inject_failure(2, 13, FailurePhase::MidIteration(5)).unwrap();
        e.run_until(20).unwrap();
        let before = e.worker(0).digest();
        let rep = recover(&mut e).unwrap();
        assert_eq!(before, e.worker(0).digest());
        (rep, e.state_digest())
    };
    let (seq, a) = run(&cfg);
    cfg.parallel_helpers = Some(2);
    let (par, b) = run(&cfg);
    assert_eq!(par.strategy, Strategy::ParallelReplay);
    assert_eq!(par.helpers[0].mbs, vec![0, 2]);
    assert_eq!(par.helpers[1].mbs, vec![1, 3]);
    assert!(par.helpers_restored);
    assert_eq!(a, b);
    assert_eq!(seq.iterations_replayed, 3);
    assert!(par.replay_slots < seq.replay_slots);
}

#[test]
fn cascade_merges_adjacent() {
    let cfg = config(8, 4, 1, 8, OptimizerKind::Sgd);
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
    e.inject_failure(3, 16, FailurePhase::BeforeUpdate).unwrap();
    e.run_until(20).unwrap();
    let rep = recover_with(
        &mut e,
        &RecoveryOptions {
            cascade: Some(CascadeFault {
                machine: 4,
                after_iterations: 2,
            }),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(rep.strategy, Strategy::LoggingReplay);
    assert!(rep.cascades[0].merged);
    assert_eq!(rep.units.len(), 1);
    assert_eq!(rep.units[0].machines, vec![3, 4]);
    assert_eq!(e.state_digest(), ghost(&cfg, 16).state_digest());
}

#[test]
fn cascade_disjoint_runs_independently() {
    let cfg = config(8, 4, 1, 8, OptimizerKind::Sgd);
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
    e.inject_failure(1, 16, FailurePhase::MidIteration(3)).unwrap();
    e.run_until(20).unwrap();
    let rep = recover_with(
        &mut e,
        &RecoveryOptions {
            cascade: Some(CascadeFault {
                machine: 6,
                after_iterations: 4,
            }),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(!rep.cascades[0].merged);
    assert_eq!(rep.units.len(), 2);
    assert_eq!(e.state_digest(), ghost(&cfg, 16).state_digest());
}

#[test]
fn amsgrad_falls_back_to_rollback() {
    let mut cfg = config(1, 2, 2, 2, OptimizerKind::AmsGrad);
    cfg.optimizer.require_undo = false;
    let dir = tempfile::tempdir().unwrap();
    let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
    e.inject_failure(0, 14, FailurePhase::MidUpdate(1)).unwrap();
    e.run_until(20).unwrap();
    let rep = recover(&mut e).unwrap();
    assert_eq!(rep.strategy, Strategy::GlobalRollback);
    assert!(rep.fallback_reason.is_some());
    assert_eq!(rep.resume_iteration, 10);
    assert!(e.run_until(20).unwrap().is_none());
    assert_eq!(e.state_digest(), ghost(&cfg, 20).state_digest());
}
