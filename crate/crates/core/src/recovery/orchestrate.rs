use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;

use serde::{Deserialize, Serialize};

use crate::cluster::{FailureEvent, FailurePhase, MachineId, WorkerId};
use crate::error::{Error, Result};
use crate::pipeline::{Engine, Worker};
use crate::resilience::{
    decode_worker_state, encode_worker_state, fetch_logs, latest_checkpoint, load_checkpoint, logs_dir, publish_logs,
    store_logs, truncate_logs, CheckpointManifest,
};
use crate::Stage;

use super::replay::{replay_iteration, round_robin, HelperAssignment, LogIndex};
use super::{apply_undo, consensus_iteration, plan_multi_failure, ReplayUnit, Strategy};

/// A second failure injected while a replay is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeFault {
    pub machine: MachineId,
    /// Fires once this many iterations of the first unit have been replayed.
    pub after_iterations: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RecoveryOptions {
    pub cascade: Option<CascadeFault>,
    /// Leaves survivors' partial updates in place. Only useful as a negative
    /// control: the resumed run diverges.
    pub skip_undo: bool,
    /// Overrides the chosen strategy when it is applicable.
    pub force: Option<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    pub machine: MachineId,
    pub after_iterations: u64,
    /// Merged into the running unit (true) or recovered on its own.
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub strategy: Strategy,
    pub failed_machines: Vec<MachineId>,
    pub detection_cycles: usize,
    pub consensus_iteration: Option<u64>,
    /// Iteration every worker stands at when training resumes.
    pub resume_iteration: u64,
    pub checkpoint_iteration: Option<u64>,
    pub undone_blocks: usize,
    pub units: Vec<ReplayUnit>,
    pub iterations_replayed: u64,
    pub records_replayed: usize,
    pub records_relogged: usize,
    pub helpers: Vec<HelperAssignment>,
    /// Compute slots of the replay on its critical path (one slot per stage per
    /// micro-batch per direction).
    pub replay_slots: u64,
    pub sequential_replay_slots: u64,
    pub helpers_restored: bool,
    pub cascades: Vec<CascadeOutcome>,
    pub fallback_reason: Option<String>,
    pub state_digest: String,
}

pub fn recover(engine: &mut Engine) -> Result<RecoveryReport> {
    recover_with(engine, &RecoveryOptions::default())
}

/// Brings every machine back and leaves all workers at one consistent
/// iteration, ready for [`Engine::run_iteration`].
pub fn recover_with(engine: &mut Engine, opts: &RecoveryOptions) -> Result<RecoveryReport> {
    let failed: BTreeSet<MachineId> = engine.cluster.dead_machines().into_iter().collect();
    if failed.is_empty() {
        return Err(Error::Unrecoverable("no machine has failed".into()));
    }
    let detection = engine.cluster.detect_all(engine.cfg.detection_cycles)?;
    engine.flush_all_logs()?;
    publish_alive(engine)?;

    let survivors = engine.survivors();
    let iters: Vec<u64> = survivors.iter().map(|&w| engine.workers[w].iteration).collect();
    let consensus = consensus_iteration(&iters).ok();

    let mut rep = RecoveryReport {
        strategy: Strategy::GlobalRollback,
        failed_machines: failed.iter().copied().collect(),
        detection_cycles: detection.cycles,
        consensus_iteration: consensus,
        resume_iteration: 0,
        checkpoint_iteration: None,
        undone_blocks: 0,
        units: Vec::new(),
        iterations_replayed: 0,
        records_replayed: 0,
        records_relogged: 0,
        helpers: Vec::new(),
        replay_slots: 0,
        sequential_replay_slots: 0,
        helpers_restored: true,
        cascades: Vec::new(),
        fallback_reason: None,
        state_digest: String::new(),
    };

    let (strategy, reason) = match consensus {
        None => (Strategy::GlobalRollback, Some("no surviving worker".to_string())),
        Some(_) => choose_strategy(engine, &failed, opts.force),
    };
    rep.strategy = strategy;
    rep.fallback_reason = reason;

    let resume = match (strategy, consensus) {
        (Strategy::GlobalRollback, _) | (_, None) => global_rollback(engine, consensus, &mut rep)?,
        (_, Some(target)) => match attempt(engine, strategy, &failed, target, opts, &mut rep) {
            Ok(t) => t,
            Err(e @ (Error::NotInvertible(_)
            | Error::NonInvertibleHyper(_)
            | Error::MissingLogData(_)
            | Error::NoCheckpoint(_)
            | Error::Unrecoverable(_))) => {
                rep.strategy = Strategy::GlobalRollback;
                rep.fallback_reason = Some(e.to_string());
                rep.units.clear();
                rep.helpers.clear();
                global_rollback(engine, consensus, &mut rep)?
            }
            Err(e) => return Err(e),
        },
    };
    finalize(engine, resume)?;
    rep.resume_iteration = resume;
    rep.state_digest = engine.state_digest();
    Ok(rep)
}

fn choose_strategy(engine: &Engine, failed: &BTreeSet<MachineId>, force: Option<Strategy>) -> (Strategy, Option<String>) {
    let topo = &engine.topo;
    let lost: Vec<WorkerId> = failed.iter().flat_map(|&m| topo.workers_on(m)).collect();
    let replicated = lost.iter().all(|&w| {
        let s = topo.stage_of(w);
        (0..topo.dp).any(|r| !failed.contains(&topo.machine_of(topo.worker(r, s))))
    });
    let replay_ok = || -> std::result::Result<(), String> {
        if !engine.cfg.logging {
            return Err("logging disabled".into());
        }
        let units = plan_multi_failure(failed, topo, &engine.layout);
        for u in &units {
            if !u.is_closed(topo) {
                return Err(format!("unit {:?} lacks replicas of its stages", u.machines));
            }
            if u.machines.len() == topo.num_machines {
                return Err("replay unit spans every machine".into());
            }
        }
        Ok(())
    };
    let replay = if engine.cfg.parallel_helpers.is_some_and(|d| d > 1) {
        Strategy::ParallelReplay
    } else {
        Strategy::LoggingReplay
    };
    match force {
        Some(Strategy::GlobalRollback) => return (Strategy::GlobalRollback, None),
        Some(Strategy::Replication) if replicated => return (Strategy::Replication, None),
        Some(s @ (Strategy::LoggingReplay | Strategy::ParallelReplay)) => {
            return match replay_ok() {
                Ok(()) => (s, None),
                Err(why) => (Strategy::GlobalRollback, Some(why)),
            }
        }
        _ => {}
    }
    if replicated {
        return (Strategy::Replication, None);
    }
    match replay_ok() {
        Ok(()) => (replay, None),
        Err(why) => (Strategy::GlobalRollback, Some(why)),
    }
}

fn publish_alive(engine: &Engine) -> Result<()> {
    let dst = store_logs(&engine.store);
    for m in 0..engine.topo.num_machines {
        if engine.cluster.is_alive(m) {
            publish_logs(engine.machine_disk(m), &dst)?;
        }
    }
    Ok(())
}

fn undo_survivors(engine: &mut Engine, target: u64, skip: bool, rep: &mut RecoveryReport) -> Result<()> {
    let hyper = engine.cfg.optimizer.clone();
    for w in engine.survivors() {
        let wk = &mut engine.workers[w];
        if skip {
            wk.iteration = target;
            continue;
        }
        rep.undone_blocks += apply_undo(&mut wk.stage, &mut wk.iteration, target, &hyper)?;
    }
    Ok(())
}

fn attempt(
    engine: &mut Engine,
    strategy: Strategy,
    failed: &BTreeSet<MachineId>,
    target: u64,
    opts: &RecoveryOptions,
    rep: &mut RecoveryReport,
) -> Result<u64> {
    undo_survivors(engine, target, opts.skip_undo, rep)?;
    match strategy {
        Strategy::Replication => {
            replicate(engine, failed)?;
            Ok(target)
        }
        Strategy::LoggingReplay | Strategy::ParallelReplay => {
            replay_all(engine, strategy, failed, target, opts.cascade, rep)?;
            Ok(target)
        }
        Strategy::GlobalRollback => unreachable!("handled by caller"),
    }
}

fn replicate(engine: &mut Engine, failed: &BTreeSet<MachineId>) -> Result<()> {
    for &m in failed {
        engine.cluster.spawn_replacement(m)?;
    }
    let topo = engine.topo.clone();
    for w in failed.iter().flat_map(|&m| topo.workers_on(m)) {
        let s = topo.stage_of(w);
        let src = (0..topo.dp)
            .map(|r| topo.worker(r, s))
            .find(|&q| !failed.contains(&topo.machine_of(q)))
            .ok_or(Error::NoReplica(w))?;
        let (stage, it) = (engine.workers[src].stage.clone(), engine.workers[src].iteration);
        engine.workers[w] = Worker::new(w, stage);
        engine.workers[w].iteration = it;
    }
    Ok(())
}

fn global_rollback(engine: &mut Engine, bound: Option<u64>, rep: &mut RecoveryReport) -> Result<u64> {
    for m in engine.cluster.dead_machines() {
        engine.cluster.spawn_replacement(m)?;
    }
    let ck = latest_checkpoint(&engine.store, bound.unwrap_or(u64::MAX))?;
    for w in 0..engine.workers.len() {
        load_into(engine, &ck, w)?;
    }
    rep.checkpoint_iteration = Some(ck.iteration);
    Ok(ck.iteration)
}

fn load_into(engine: &mut Engine, ck: &CheckpointManifest, w: WorkerId) -> Result<()> {
    let mut stage = engine.workers[w].stage.zeroed_like();
    let it = load_checkpoint(ck, w, &mut stage)?;
    engine.workers[w] = Worker::new(w, stage);
    engine.workers[w].iteration = it;
    Ok(())
}

fn replay_all(
    engine: &mut Engine,
    strategy: Strategy,
    failed: &BTreeSet<MachineId>,
    target: u64,
    cascade: Option<CascadeFault>,
    rep: &mut RecoveryReport,
) -> Result<()> {
    let topo = engine.topo.clone();
    let mut queue: VecDeque<ReplayUnit> = plan_multi_failure(failed, &topo, &engine.layout).into();
    let mut cascade = cascade;
    while let Some(unit) = queue.pop_front() {
        if !unit.is_closed(&topo) {
            return Err(Error::Unrecoverable(format!("unit {:?} is not closed under replicas", unit.machines)));
        }
        match replay_unit(engine, strategy, &unit, target, &mut cascade, rep)? {
            UnitOutcome::Done(deferred) => {
                rep.units.push(unit);
                for x in deferred {
                    queue.extend(plan_multi_failure(&[x].into(), &topo, &engine.layout));
                }
            }
            UnitOutcome::Merge(x) => {
                let merged: BTreeSet<MachineId> = unit.failed.iter().copied().chain([x]).collect();
                for u in plan_multi_failure(&merged, &topo, &engine.layout).into_iter().rev() {
                    queue.push_front(u);
                }
            }
        }
    }
    if let Some(c) = cascade {
        return Err(Error::InvalidInjection(format!(
            "cascade after {} iterations never fired",
            c.after_iterations
        )));
    }
    Ok(())
}

enum UnitOutcome {
    /// Finished; carries machines that failed meanwhile and still need repair.
    Done(Vec<MachineId>),
    /// A coupled machine failed: restart as one joint unit.
    Merge(MachineId),
}

fn replay_unit(
    engine: &mut Engine,
    strategy: Strategy,
    unit: &ReplayUnit,
    target: u64,
    cascade: &mut Option<CascadeFault>,
    rep: &mut RecoveryReport,
) -> Result<UnitOutcome> {
    let topo = engine.topo.clone();
    for &m in &unit.machines {
        if !engine.cluster.is_alive(m) {
            engine.cluster.spawn_replacement(m)?;
        }
    }
    let ck = latest_checkpoint(&engine.store, target)?;
    rep.checkpoint_iteration = Some(rep.checkpoint_iteration.map_or(ck.iteration, |c| c.min(ck.iteration)));
    let receivers: BTreeSet<MachineId> = unit.machines.iter().copied().collect();
    let records = fetch_logs(&store_logs(&engine.store), &receivers, ck.iteration, target)?;
    let index = LogIndex::build(&records)?;
    let m = engine.cfg.m;
    let needed = index.check_complete(unit, &topo, m, ck.iteration, target)?;

    let mut states: BTreeMap<WorkerId, Stage> = BTreeMap::new();
    for &w in &unit.workers {
        let mut st = engine.workers[w].stage.zeroed_like();
        load_checkpoint(&ck, w, &mut st)?;
        states.insert(w, st);
    }

    let d = match strategy {
        Strategy::ParallelReplay => engine.cfg.parallel_helpers.unwrap_or(1).clamp(1, m),
        _ => 1,
    };
    let helpers = pick_helpers(engine, unit, d);
    let d = helpers.len();
    let assignment = round_robin(m, d);
    let mut snapshots = snapshot_helpers(engine, unit, &helpers)?;
    let mut copies = vec![states; d];
    let mut deferred = Vec::new();

    let replaced: BTreeSet<MachineId> = unit.failed.iter().copied().collect();
    let hyper = engine.cfg.optimizer.clone();
    let stages_per_replica = unit.stages(&topo).len() as u64;
    for (n, i) in (ck.iteration..target).enumerate() {
        if let Some(c) = cascade.filter(|c| c.after_iterations == n as u64) {
            *cascade = None;
            let x = c.machine;
            let both: BTreeSet<MachineId> = replaced.iter().copied().chain([x]).collect();
            let joint = plan_multi_failure(&both, &topo, &engine.layout).len() == 1;
            let hosts_helper = helpers.iter().any(|&h| topo.machine_of(h) == x);
            snapshots.retain(|s| topo.machine_of(s.worker) != x);
            engine.fire(vec![FailureEvent {
                machine: x,
                iteration: i,
                phase: FailurePhase::MidIteration(0),
            }])?;
            rep.cascades.push(CascadeOutcome {
                machine: x,
                after_iterations: c.after_iterations,
                merged: joint,
            });
            if joint {
                restore_helpers(engine, &snapshots)?;
                return Ok(UnitOutcome::Merge(x));
            }
            if hosts_helper {
                return Err(Error::Unrecoverable(format!("helper machine {x} failed during replay")));
            }
            deferred.push(x);
        }
        let ctx = engine.ctx(i);
        let outbound = replay_iteration(&ctx, &topo, unit, &mut copies, &index, &assignment, &hyper)?;
        for msg in outbound {
            let sm = topo.machine_of(msg.sender_worker);
            if replaced.contains(&sm) && engine.should_log(msg.sender_worker, msg.receiver_worker) {
                let rec = engine.record_for(&msg);
                engine.logs.log_send(rec);
                rep.records_relogged += 1;
            }
        }
        for &w in &unit.workers {
            if replaced.contains(&topo.machine_of(w)) {
                engine.commit_logs(w)?;
            }
        }
    }
    rep.helpers_restored &= restore_helpers(engine, &snapshots)?;
    install(engine, copies.swap_remove(0), target);
    for &mc in &unit.failed {
        publish_logs(engine.machine_disk(mc), &store_logs(&engine.store))?;
    }

    let iters = target - ck.iteration;
    let per_helper = assignment.iter().map(Vec::len).max().unwrap_or(0) as u64;
    rep.iterations_replayed += iters;
    rep.records_replayed += needed;
    rep.replay_slots += iters * 2 * per_helper * stages_per_replica;
    rep.sequential_replay_slots += iters * 2 * m as u64 * stages_per_replica;
    rep.helpers.extend(
        helpers
            .iter()
            .zip(&assignment)
            .map(|(&h, mbs)| HelperAssignment {
                helper: h,
                mbs: mbs.clone(),
            }),
    );
    Ok(UnitOutcome::Done(deferred))
}

fn install(engine: &mut Engine, states: BTreeMap<WorkerId, Stage>, target: u64) {
    for (w, st) in states {
        engine.workers[w] = Worker::new(w, st);
        engine.workers[w].iteration = target;
    }
}

/// The unit's own workers first, then survivors outside any failed machine.
fn pick_helpers(engine: &Engine, unit: &ReplayUnit, d: usize) -> Vec<WorkerId> {
    let mut out: Vec<WorkerId> = unit.workers.clone();
    out.extend(engine.survivors().into_iter().filter(|w| !unit.contains_worker(*w)));
    out.truncate(d);
    out
}

struct Snapshot {
    worker: WorkerId,
    path: std::path::PathBuf,
    digest: String,
}

/// Helpers outside the unit park their own state on local disk first.
fn snapshot_helpers(engine: &Engine, unit: &ReplayUnit, helpers: &[WorkerId]) -> Result<Vec<Snapshot>> {
    let mut out = Vec::new();
    for &h in helpers.iter().filter(|h| !unit.contains_worker(**h)) {
        let dir = engine.machine_disk(engine.topo.machine_of(h)).join("snapshot");
        fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        let path = dir.join(format!("worker-{h:04}.bin"));
        let wk = &engine.workers[h];
        fs::write(&path, encode_worker_state(h, wk.iteration, &wk.stage)).map_err(|e| Error::storage(&path, e))?;
        out.push(Snapshot {
            worker: h,
            path,
            digest: wk.digest(),
        });
    }
    Ok(out)
}

/// Reloads parked helper state; true when every helper came back bit-exact.
fn restore_helpers(engine: &mut Engine, snaps: &[Snapshot]) -> Result<bool> {
    let mut exact = true;
    for s in snaps {
        let bytes = fs::read(&s.path).map_err(|e| Error::storage(&s.path, e))?;
        let mut st = engine.workers[s.worker].stage.zeroed_like();
        let (_, it) = decode_worker_state(&bytes, &mut st)?;
        let mut wk = Worker::new(s.worker, st);
        wk.iteration = it;
        exact &= wk.digest() == s.digest;
        engine.workers[s.worker] = wk;
        fs::remove_file(&s.path).map_err(|e| Error::storage(&s.path, e))?;
    }
    Ok(exact)
}

fn finalize(engine: &mut Engine, resume: u64) -> Result<()> {
    for m in engine.cluster.dead_machines() {
        engine.cluster.spawn_replacement(m)?;
    }
    engine.logs.drop_pending();
    engine.logs.seal_all();
    for m in 0..engine.topo.num_machines {
        truncate_logs(&logs_dir(engine.machine_disk(m)), resume)?;
    }
    truncate_logs(&store_logs(&engine.store), resume)?;
    for w in &mut engine.workers {
        w.clear_volatile();
        w.stage.commit();
        if w.iteration != resume {
            return Err(Error::Unrecoverable(format!(
                "worker {} ended at iteration {} instead of {resume}",
                w.id, w.iteration
            )));
        }
    }
    engine.cluster.clear_channels();
    engine.cluster.end_epoch();
    engine.next_iteration = resume;
    engine.trajectory.retain(|(i, _)| *i <= resume);
    Ok(())
}
