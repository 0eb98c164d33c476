use std::path::Path;

use proptest::prelude::*;

use ftrain::cluster::FailurePhase;
use ftrain::model::ModelDims;
use ftrain::numerics::Tensor;
use ftrain::optimizers::{OptimizerHyper, OptimizerKind, ParamBlock};
use ftrain::pipeline::{bubble_ratio, build_1f1b_schedule, Engine, EngineConfig};
use ftrain::planner::{brute_force_group_oracle, group_machines, Profile};
use ftrain::recovery::recover;
use ftrain::resilience::{chunk_spans, log_volume, logs_dir, LogConfig};
use ftrain::simtime::{simulate_training, FailureProcess, SimStrategy, Workload};
use ftrain::Error;

const INVERTIBLE: [OptimizerKind; 5] = [
    OptimizerKind::Sgd,
    OptimizerKind::SgdMomentum,
    OptimizerKind::Adam,
    OptimizerKind::AdamW,
    OptimizerKind::Lamb,
];

fn vec_in(len: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, len)
}

fn tensor(v: Vec<f64>) -> Tensor<f64> {
    let n = v.len();
    Tensor::new(vec![n], v).unwrap()
}

prop_compose! {
    fn hyper()(kind in prop::sample::select(INVERTIBLE.to_vec()),
               lr in 1e-4f64..0.5,
               wd in prop_oneof![Just(0.0), 0.0f64..0.1],
               momentum in 0.0f64..0.99,
               beta1 in 0.5f64..0.99,
               beta2 in 0.9f64..0.9999) -> OptimizerHyper {
        let mut h = OptimizerHyper::new(kind, lr).with_weight_decay(wd);
        if kind == OptimizerKind::SgdMomentum {
            h.momentum = momentum;
        }
        h.beta1 = beta1;
        h.beta2 = beta2;
        h
    }
}

fn profile(n: usize) -> impl Strategy<Value = Profile> {
    (
        vec_in(n, 0.1, 10.0),
        prop::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.1f64..10.0], n - 1),
        1u64..200,
        0.0f64..1.2,
        any::<bool>(),
    )
        .prop_map(move |(r, m, t, budget, parallel)| {
            let full: f64 = m.iter().sum::<f64>() * t as f64;
            Profile {
                n,
                r,
                m,
                b: 1.0,
                t,
                m_max: budget * full,
                parallel,
            }
        })
}

fn small_engine(p: usize, machines: usize, t: u64, kind: OptimizerKind) -> EngineConfig {
    EngineConfig {
        p,
        m: 3,
        dp: 1,
        machines,
        placement: None,
        model: ModelDims {
            input_dim: 3,
            hidden_dim: 3,
            output_dim: 3,
            layers_per_stage: 2,
            batch_rows: 2,
        },
        optimizer: OptimizerHyper::new(kind, 0.02),
        seed: 19,
        checkpoint_interval: t,
        logging: true,
        groups: None,
        log: LogConfig {
            chunk_records: 5,
            ..LogConfig::default()
        },
        detection_cycles: 1,
        parallel_helpers: None,
    }
}

fn ghost(cfg: &EngineConfig, end: u64) -> (tempfile::TempDir, Engine) {
    let dir = tempfile::tempdir().unwrap();
    let mut g = Engine::new(cfg.clone(), dir.path()).unwrap();
    g.run_until(end).unwrap();
    (dir, g)
}

/// Bit-exact unless survivors undid a partial update.
fn matches_ghost(e: &Engine, g: &Engine, exact: bool) -> bool {
    if exact {
        return e.state_digest() == g.state_digest();
    }
    e.workers()
        .iter()
        .zip(g.workers())
        .all(|(a, b)| a.iteration == b.iteration && a.stage.max_rel_diff(&b.stage).unwrap() <= 1e-9)
}

fn disk_bytes(e: &Engine) -> u64 {
    (0..e.topology().num_machines)
        .map(|m| log_volume(&logs_dir(e.machine_disk(m))).unwrap().payload_bytes)
        .sum()
}

fn stale_chunks(dir: &Path, c: u64) -> usize {
    chunk_spans(dir).unwrap().iter().filter(|(_, max)| *max < c).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn undo_inverts_step(h in hyper(),
                         x in vec_in(6, -2.0, 2.0),
                         grads in prop::collection::vec(vec_in(6, -1.0, 1.0), 1..40)) {
        let mut b = ParamBlock::new(tensor(x));
        let (last, warm) = grads.split_last().unwrap();
        for g in warm {
            b.step(&tensor(g.clone()), &h).unwrap();
            b.commit();
        }
        let before = b.clone();
        b.step(&tensor(last.clone()), &h).unwrap();
        b.undo(&h).unwrap();
        prop_assert!(b.max_rel_diff(&before).unwrap() <= 1e-9);
        prop_assert_eq!(b.t, before.t);
    }

    #[test]
    fn bubble_ratio_matches_grid(p in 1usize..24, m in 1usize..24) {
        let s = build_1f1b_schedule(p, m).unwrap();
        prop_assert_eq!(s.len(), 2 * (m + p - 1));
        prop_assert_eq!(s.bubble_fraction(), bubble_ratio(p, m));
    }

    #[test]
    fn planner_respects_budget(pr in (1usize..12).prop_flat_map(profile)) {
        let plan = group_machines(&pr).unwrap();
        prop_assert!(plan.est_storage <= pr.m_max);
        let flat: Vec<usize> = plan.groups.concat();
        prop_assert_eq!(flat, (0..pr.n).collect::<Vec<_>>());
        prop_assert!(plan.trace.len() < pr.n);
    }

    #[test]
    fn planner_never_beats_oracle(pr in (1usize..=8).prop_flat_map(profile)) {
        let g = group_machines(&pr).unwrap();
        let o = brute_force_group_oracle(&pr).unwrap();
        prop_assert!(o.est_storage <= pr.m_max);
        prop_assert!(g.est_recovery_time >= o.est_recovery_time * (1.0 - 1e-12));
    }

    #[test]
    fn planner_more_budget_never_hurts(pr in (2usize..10).prop_flat_map(profile), extra in 0.0f64..2.0) {
        let tight = group_machines(&pr).unwrap();
        let mut loose = pr.clone();
        loose.m_max = pr.m_max * (1.0 + extra) + extra;
        let loose = group_machines(&loose).unwrap();
        prop_assert!(loose.est_recovery_time <= tight.est_recovery_time * (1.0 + 1e-12));
        prop_assert!(loose.groups.len() >= tight.groups.len());
    }

    #[test]
    fn zero_budget_is_one_group(pr in (1usize..10).prop_flat_map(profile)) {
        let mut pr = pr;
        pr.m_max = 0.0;
        let plan = group_machines(&pr).unwrap();
        if pr.m.iter().all(|&m| m > 0.0) {
            prop_assert_eq!(plan.groups.len(), 1);
        }
        prop_assert_eq!(plan.est_storage, 0.0);
    }
}

prop_compose! {
    fn workload()(iters in 1_000u64..200_000,
                  it in 0.5f64..5.0,
                  t in 10u64..5_000,
                  init in 0.0f64..200.0,
                  load in 0.0f64..100.0,
                  rf in 0.0f64..=1.0,
                  pf in 0.0f64..=1.0) -> Workload {
        Workload {
            name: "random".into(),
            total_iterations: iters,
            iteration_time: it,
            checkpoint_interval: t.min(iters),
            checkpoint_cost: 1.0,
            init_time: init,
            checkpoint_load_time: load,
            broadcast_time: 1.0,
            replay_fraction: rf,
            parallel_replay_fraction: pf * rf,
            snapshot: None,
            fast_strategy: SimStrategy::LogReplay,
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logging_dominates_rollback(w in workload(), seed in any::<u64>(), mtbf in 1.0f64..50.0) {
        let pr = FailureProcess { mtbf_hours: mtbf, seed, distribution: Default::default() };
        let g = simulate_training(&w, SimStrategy::GlobalCkpt, &pr, 3).unwrap();
        let l = simulate_training(&w, SimStrategy::LogReplay, &pr, 3).unwrap();
        let p = simulate_training(&w, SimStrategy::ParallelLogReplay, &pr, 3).unwrap();
        for ((g, l), p) in g.runs.iter().zip(&l.runs).zip(&p.runs) {
            prop_assert_eq!(g.failures.len(), l.failures.len());
            prop_assert!(p.total_hours <= l.total_hours);
            prop_assert!(l.total_hours <= g.total_hours);
        }
    }

    #[test]
    fn simulation_is_reproducible(w in workload(), seed in any::<u64>()) {
        let pr = FailureProcess { mtbf_hours: 5.0, seed, distribution: Default::default() };
        let a = simulate_training(&w, SimStrategy::LogReplay, &pr, 2).unwrap();
        let b = simulate_training(&w, SimStrategy::LogReplay, &pr, 2).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

fn phase() -> impl Strategy<Value = FailurePhase> {
    prop_oneof![
        (0usize..8).prop_map(FailurePhase::MidIteration),
        Just(FailurePhase::BeforeUpdate),
        (0usize..=2).prop_map(FailurePhase::MidUpdate),
        Just(FailurePhase::AfterUpdate),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn logs_suffice_for_any_single_failure(machine in 0usize..3, at in 0u64..22, ph in phase()) {
        let cfg = small_engine(3, 3, 6, OptimizerKind::Adam);
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::new(cfg.clone(), dir.path()).unwrap();
        e.inject_failure(machine, at, ph).unwrap();
        prop_assert!(e.run_until(24).unwrap().is_some());
        let rep = match recover(&mut e) {
            Err(Error::MissingLogData(what)) => return Err(TestCaseError::fail(format!("missing {what}"))),
            other => other.unwrap(),
        };
        prop_assert!(rep.fallback_reason.is_none(), "{:?}", rep.fallback_reason);
        let exact = rep.undone_blocks == 0;
        prop_assert!(matches_ghost(&e, &ghost(&cfg, rep.resume_iteration).1, exact));
        prop_assert!(e.run_until(24).unwrap().is_none());
        prop_assert!(matches_ghost(&e, &ghost(&cfg, 24).1, exact));
    }

    #[test]
    fn gc_bounds_live_logs(t in 2u64..9, p in 2usize..5) {
        let cfg = small_engine(p, p, t, OptimizerKind::Sgd);
        let per_msg = (cfg.model.boundary_elems() * 8) as u64;
        let per_iter = 2 * (p as u64 - 1) * cfg.m as u64 * per_msg;
        let dir = tempfile::tempdir().unwrap();
        let mut e = Engine::new(cfg, dir.path()).unwrap();
        for i in 1..=4 * t + 1 {
            e.run_until(i).unwrap();
            e.flush_all_logs().unwrap();
            let c = (i - 1) / t * t;
            for m in 0..p {
                prop_assert_eq!(stale_chunks(&logs_dir(e.machine_disk(m)), c), 0);
            }
            prop_assert!(disk_bytes(&e) <= t * per_iter);
        }
    }
}
