use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{Cluster, Direction, FailureEvent, FailurePhase, MachineId, Message, Topology, WorkerId};
use crate::error::{Error, Result};
use crate::model::{accumulate_grads, backward_stage, forward_stage, micro_batch, mse_loss, ActivationCache, ModelDims};
use crate::optimizers::OptimizerHyper;
use crate::resilience::{
    encode_worker_state, gc_logs, load_manifest, logs_dir, store_logs, write_checkpoint, GroupLayout, LogConfig,
    LogManager, LogRecord,
};
use crate::{Stage, Tensor};

use super::schedule::{build_1f1b_schedule, Schedule, Slot};
use super::apply_layerwise_updates;

fn default_interval() -> u64 {
    100
}
fn default_true() -> bool {
    true
}
fn default_cycles() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub p: usize,
    pub m: usize,
    #[serde(default = "one")]
    pub dp: usize,
    pub machines: usize,
    #[serde(default)]
    pub placement: Option<Vec<MachineId>>,
    pub model: ModelDims,
    pub optimizer: OptimizerHyper,
    pub seed: u64,
    #[serde(default = "default_interval")]
    pub checkpoint_interval: u64,
    /// Master switch for message logging.
    #[serde(default = "default_true")]
    pub logging: bool,
    /// Logging groups; defaults to one group per machine.
    #[serde(default)]
    pub groups: Option<Vec<Vec<MachineId>>>,
    #[serde(default)]
    pub log: LogConfig,
    #[serde(default = "default_cycles")]
    pub detection_cycles: usize,
    /// Helper count for parallel replay; `None` replays sequentially.
    #[serde(default)]
    pub parallel_helpers: Option<usize>,
}

fn one() -> usize {
    1
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.m == 0 || self.dp == 0 || self.machines == 0 {
            return Err(Error::InvalidConfig("p, m, dp and machines must be >= 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::InvalidConfig("checkpoint_interval must be >= 1".into()));
        }
        if self.log.chunk_records == 0 {
            return Err(Error::InvalidConfig("log.chunk_records must be >= 1".into()));
        }
        if self.detection_cycles == 0 {
            return Err(Error::InvalidConfig("detection_cycles must be >= 1".into()));
        }
        if self.parallel_helpers == Some(0) {
            return Err(Error::InvalidConfig("parallel_helpers must be >= 1".into()));
        }
        self.model.validate()?;
        self.optimizer.validate()
    }

    pub fn topology(&self) -> Result<Topology> {
        match &self.placement {
            Some(p) => Topology::with_placement(self.p, self.dp, self.machines, p.clone()),
            None => Topology::consecutive(self.p, self.dp, self.machines),
        }
    }

    pub fn layout(&self) -> Result<GroupLayout> {
        match &self.groups {
            Some(g) => GroupLayout::from_groups(self.machines, g),
            None => Ok(GroupLayout::singletons(self.machines)),
        }
    }
}

/// Volatile and persistent state of one worker.
#[derive(Debug, Clone)]
pub struct Worker {
    pub id: WorkerId,
    pub stage: Stage,
    /// Completed iterations.
    pub iteration: u64,
    pub cache: ActivationCache<f64>,
    pub partials: BTreeMap<usize, Vec<Tensor>>,
    pub losses: BTreeMap<usize, f64>,
}

impl Worker {
    pub fn new(id: WorkerId, stage: Stage) -> Self {
        Self {
            id,
            stage,
            iteration: 0,
            cache: ActivationCache::new(),
            partials: BTreeMap::new(),
            losses: BTreeMap::new(),
        }
    }

    pub fn clear_volatile(&mut self) {
        self.cache.clear();
        self.partials.clear();
        self.losses.clear();
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(encode_worker_state(self.id, self.iteration, &self.stage)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationResult {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IterationOutcome {
    Completed(IterationResult),
    Failed(Vec<FailureEvent>),
}

/// Inputs shared by every compute op of one iteration.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StepCtx {
    pub dims: ModelDims,
    pub seed: u64,
    pub p: usize,
    pub m: usize,
    pub iteration: u64,
}

/// `input = None` reads the micro-batch's data (first stage only).
pub(crate) fn forward_op(
    ctx: &StepCtx,
    stage: &Stage,
    cache: &mut ActivationCache<f64>,
    replica: usize,
    mb: usize,
    input: Option<Tensor>,
) -> Result<Tensor> {
    let input = match input {
        Some(t) => t,
        None => micro_batch(&ctx.dims, ctx.seed, ctx.iteration, replica, mb)?.inputs,
    };
    forward_stage(stage, &input, mb, cache)
}

/// `grad = None` starts from the loss (last stage only). Returns the input
/// gradient, the parameter gradients and the loss if computed here.
pub(crate) fn backward_op(
    ctx: &StepCtx,
    stage: &Stage,
    cache: &mut ActivationCache<f64>,
    replica: usize,
    mb: usize,
    grad: Option<Tensor>,
) -> Result<(Tensor, Vec<Tensor>, Option<f64>)> {
    let (grad, loss) = match grad {
        Some(g) => (g, None),
        None => {
            let out = cache.output(mb).ok_or(Error::MissingActivation(mb))?;
            let targets = micro_batch::<f64>(&ctx.dims, ctx.seed, ctx.iteration, replica, mb)?.targets;
            let scale = 1.0 / (ctx.m * out.len()) as f64;
            let (loss, g) = mse_loss(out, &targets, scale)?;
            (g, Some(loss))
        }
    };
    let (gi, pg) = backward_stage(stage, &grad, mb, cache)?;
    Ok((gi, pg, loss))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EngineStats {
    pub checkpoints: Vec<u64>,
    pub torn_checkpoints: Vec<u64>,
    pub gc_deleted: usize,
}

pub struct Engine {
    pub(crate) cfg: EngineConfig,
    pub(crate) topo: Topology,
    pub(crate) schedule: Schedule,
    pub(crate) cluster: Cluster,
    pub(crate) workers: Vec<Worker>,
    pub(crate) logs: LogManager,
    pub(crate) layout: GroupLayout,
    pub(crate) store: PathBuf,
    pub(crate) next_iteration: u64,
    pub(crate) scheduled: Vec<FailureEvent>,
    pub(crate) torn_checkpoint: Option<(u64, usize)>,
    pub(crate) stats: EngineStats,
    pub(crate) trajectory: Vec<(u64, String)>,
}

impl Engine {
    pub fn new(cfg: EngineConfig, run_dir: &Path) -> Result<Self> {
        cfg.validate()?;
        let topo = cfg.topology()?;
        let layout = cfg.layout()?;
        let schedule = build_1f1b_schedule(cfg.p, cfg.m)?;
        let cluster = Cluster::new(topo.clone(), run_dir)?;
        let store = run_dir.join("store");
        std::fs::create_dir_all(&store).map_err(|e| Error::storage(&store, e))?;
        let mut workers = Vec::with_capacity(topo.num_workers());
        for w in 0..topo.num_workers() {
            let stage = Stage::init(topo.stage_of(w), cfg.p, &cfg.model, cfg.seed)?;
            workers.push(Worker::new(w, stage));
        }
        Ok(Self {
            logs: LogManager::new(cfg.log),
            cfg,
            topo,
            schedule,
            cluster,
            workers,
            layout,
            store,
            next_iteration: 0,
            scheduled: Vec::new(),
            torn_checkpoint: None,
            stats: EngineStats::default(),
            trajectory: Vec::new(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn cluster_mut(&mut self) -> &mut Cluster {
        &mut self.cluster
    }

    pub fn workers(&self) -> &[Worker] {
        &self.workers
    }

    pub fn worker(&self, w: WorkerId) -> &Worker {
        &self.workers[w]
    }

    pub fn worker_mut(&mut self, w: WorkerId) -> &mut Worker {
        &mut self.workers[w]
    }

    pub fn logs(&self) -> &LogManager {
        &self.logs
    }

    pub fn layout(&self) -> &GroupLayout {
        &self.layout
    }

    pub fn store(&self) -> &Path {
        &self.store
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    pub fn stats(&self) -> &EngineStats {
        &self.stats
    }

    /// `(iteration, global state digest)` after every completed iteration.
    pub fn trajectory(&self) -> &[(u64, String)] {
        &self.trajectory
    }

    pub fn machine_disk(&self, m: MachineId) -> &Path {
        &self.cluster.machine(m).local_disk
    }

    pub(crate) fn ctx(&self, iteration: u64) -> StepCtx {
        StepCtx {
            dims: self.cfg.model,
            seed: self.cfg.seed,
            p: self.cfg.p,
            m: self.cfg.m,
            iteration,
        }
    }

    /// SHA-256 over every worker's serialized state, ascending worker id.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.workers {
            h.update(encode_worker_state(w.id, w.iteration, &w.stage));
        }
        hex::encode(h.finalize())
    }

    /// Makes the next checkpoint at `iteration` crash after `blobs` blobs.
    pub fn inject_torn_checkpoint(&mut self, iteration: u64, blobs: usize) {
        self.torn_checkpoint = Some((iteration, blobs));
    }

    /// Arms a fail-stop failure at an exact point of a future iteration.
    pub fn inject_failure(&mut self, machine: MachineId, iteration: u64, phase: FailurePhase) -> Result<FailureEvent> {
        if machine >= self.topo.num_machines || !self.cluster.is_alive(machine) {
            return Err(Error::InvalidInjection(format!("machine {machine} is not alive")));
        }
        if iteration < self.next_iteration {
            return Err(Error::InvalidInjection(format!(
                "iteration {iteration} already executed (next is {})",
                self.next_iteration
            )));
        }
        match phase {
            FailurePhase::MidIteration(step) if step >= self.schedule.len() => {
                return Err(Error::InvalidInjection(format!(
                    "step {step} beyond the {}-slot schedule",
                    self.schedule.len()
                )))
            }
            FailurePhase::MidUpdate(k) if k > self.cfg.model.layers_per_stage => {
                return Err(Error::InvalidInjection(format!(
                    "cannot stop after {k} of {} layers",
                    self.cfg.model.layers_per_stage
                )))
            }
            _ => {}
        }
        if self.scheduled.iter().any(|e| e.machine == machine) {
            return Err(Error::InvalidInjection(format!("machine {machine} already has a failure armed")));
        }
        let ev = FailureEvent {
            machine,
            iteration,
            phase,
        };
        self.scheduled.push(ev);
        Ok(ev)
    }

    pub fn armed_failures(&self) -> &[FailureEvent] {
        &self.scheduled
    }

    fn firing(&self, i: u64) -> Vec<FailureEvent> {
        self.scheduled.iter().copied().filter(|e| e.iteration == i).collect()
    }

    /// Kills machines now: volatile state and pending log records vanish.
    pub(crate) fn fire(&mut self, events: Vec<FailureEvent>) -> Result<IterationOutcome> {
        for ev in &events {
            self.cluster.inject_failure(*ev)?;
            let ws = self.topo.workers_on(ev.machine);
            for &w in &ws {
                let zero = self.workers[w].stage.zeroed_like();
                self.workers[w] = Worker::new(w, zero);
            }
            self.logs.discard_workers(&ws);
        }
        self.scheduled.retain(|e| !events.contains(e));
        Ok(IterationOutcome::Failed(events))
    }

    pub(crate) fn commit_logs(&mut self, w: WorkerId) -> Result<()> {
        let disk = self.cluster.machine(self.topo.machine_of(w)).local_disk.clone();
        self.logs.commit(w, &disk)?;
        Ok(())
    }

    /// Commits every alive worker's pending records.
    pub fn flush_all_logs(&mut self) -> Result<()> {
        for w in 0..self.workers.len() {
            if self.cluster.worker_alive(w) {
                self.commit_logs(w)?;
            }
        }
        Ok(())
    }

    pub(crate) fn should_log(&self, from: WorkerId, to: WorkerId) -> bool {
        let (a, b) = (self.topo.machine_of(from), self.topo.machine_of(to));
        self.cfg.logging && a != b && self.layout.is_logged(a, b)
    }

    pub(crate) fn record_for(&self, msg: &Message) -> LogRecord {
        LogRecord::from_tensor(
            (
                self.topo.machine_of(msg.sender_worker),
                self.topo.machine_of(msg.receiver_worker),
            ),
            (msg.sender_worker, msg.receiver_worker),
            msg.iteration,
            msg.mb,
            msg.direction,
            &msg.payload,
            self.cfg.log.dtype,
        )
    }

    fn deliver(&mut self, msg: Message) -> Result<()> {
        let logged = self.should_log(msg.sender_worker, msg.receiver_worker);
        let rec = logged.then(|| self.record_for(&msg));
        self.cluster.send(msg)?;
        if let Some(rec) = rec {
            self.logs.log_send(rec);
        }
        Ok(())
    }

    fn receive(&mut self, from: WorkerId, to: WorkerId, i: u64, mb: usize, dir: Direction) -> Result<Tensor> {
        let msg = self
            .cluster
            .recv(from, to)?
            .ok_or_else(|| Error::Unrecoverable(format!("no message {from}->{to} for mb {mb}")))?;
        if (msg.iteration, msg.mb, msg.direction) != (i, mb, dir) {
            return Err(Error::Unrecoverable(format!(
                "channel {from}->{to} out of order: got ({}, {}, {:?})",
                msg.iteration, msg.mb, msg.direction
            )));
        }
        Ok(msg.payload)
    }

    fn exec_slot(&mut self, w: WorkerId, slot: Slot, i: u64) -> Result<()> {
        let (s, r) = (self.topo.stage_of(w), self.topo.replica_of(w));
        let p = self.cfg.p;
        match slot {
            Slot::Forward(mb) => {
                let input = if s == 0 {
                    None
                } else {
                    Some(self.receive(self.topo.worker(r, s - 1), w, i, mb, Direction::Activation)?)
                };
                let ctx = self.ctx(i);
                let wk = &mut self.workers[w];
                let out = forward_op(&ctx, &wk.stage, &mut wk.cache, r, mb, input)?;
                if s + 1 < p {
                    self.deliver(Message {
                        sender_worker: w,
                        receiver_worker: self.topo.worker(r, s + 1),
                        iteration: i,
                        mb,
                        direction: Direction::Activation,
                        payload: out,
                    })?;
                }
            }
            Slot::Backward(mb) => {
                let grad = if s + 1 == p {
                    None
                } else {
                    Some(self.receive(self.topo.worker(r, s + 1), w, i, mb, Direction::Gradient)?)
                };
                let ctx = self.ctx(i);
                let wk = &mut self.workers[w];
                let (gi, pg, loss) = backward_op(&ctx, &wk.stage, &mut wk.cache, r, mb, grad)?;
                wk.partials.insert(mb, pg);
                if let Some(l) = loss {
                    wk.losses.insert(mb, l);
                }
                if s > 0 {
                    self.deliver(Message {
                        sender_worker: w,
                        receiver_worker: self.topo.worker(r, s - 1),
                        iteration: i,
                        mb,
                        direction: Direction::Gradient,
                        payload: gi,
                    })?;
                }
            }
            Slot::Bubble => self.commit_logs(w)?,
        }
        Ok(())
    }

    /// Layer-wise update of every replica of stage `s`.
    pub(crate) fn update_stage(&mut self, s: usize, limit: Option<usize>) -> Result<usize> {
        let ids: Vec<WorkerId> = (0..self.cfg.dp).map(|r| self.topo.worker(r, s)).collect();
        for &w in &ids {
            if !self.cluster.worker_alive(w) {
                return Err(Error::ChannelBroken(self.topo.machine_of(w)));
            }
        }
        let acc: Vec<Vec<Tensor>> = ids
            .iter()
            .map(|&w| accumulate_grads(&self.workers[w].partials))
            .collect::<Result<_>>()?;
        let hyper = self.cfg.optimizer.clone();
        let mut stages: Vec<&mut Stage> = self
            .workers
            .iter_mut()
            .filter(|w| ids.contains(&w.id))
            .map(|w| &mut w.stage)
            .collect();
        let done = apply_layerwise_updates(&mut stages, &acc, &hyper, limit)?;
        if done == self.cfg.model.layers_per_stage {
            for &w in &ids {
                self.workers[w].iteration += 1;
            }
        }
        Ok(done)
    }

    pub(crate) fn checkpoint_exists(&self, i: u64) -> bool {
        load_manifest(&self.store, i).is_ok()
    }

    /// Flush, seal, write, then collect logs older than the checkpoint.
    pub(crate) fn maybe_checkpoint(&mut self, i: u64) -> Result<()> {
        if !i.is_multiple_of(self.cfg.checkpoint_interval) || self.checkpoint_exists(i) {
            return Ok(());
        }
        self.flush_all_logs()?;
        self.logs.seal_all();
        let torn = match self.torn_checkpoint {
            Some((it, k)) if it == i => {
                self.torn_checkpoint = None;
                Some(k)
            }
            _ => None,
        };
        let states: Vec<(WorkerId, u64, &Stage)> =
            self.workers.iter().map(|w| (w.id, w.iteration, &w.stage)).collect();
        match write_checkpoint(&self.store, i, self.cfg.seed, &states, torn) {
            Ok(_) => {}
            Err(Error::TornWrite(_)) => {
                self.stats.torn_checkpoints.push(i);
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        self.stats.checkpoints.push(i);
        let mut deleted = gc_logs(&store_logs(&self.store), i)?;
        for m in 0..self.topo.num_machines {
            deleted += gc_logs(&logs_dir(self.machine_disk(m)), i)?;
        }
        self.stats.gc_deleted += deleted;
        Ok(())
    }

    pub(crate) fn begin_iteration(&mut self, i: u64) -> Result<()> {
        if !self.cluster.all_alive() {
            return Err(Error::Unrecoverable(format!(
                "machines {:?} are down; recover before training",
                self.cluster.dead_machines()
            )));
        }
        self.maybe_checkpoint(i)?;
        for w in &mut self.workers {
            w.clear_volatile();
        }
        Ok(())
    }

    pub(crate) fn finish_iteration(&mut self, i: u64) -> IterationOutcome {
        for w in &mut self.workers {
            w.stage.commit();
        }
        let mut loss = 0.0;
        for w in &self.workers {
            for l in w.losses.values() {
                loss += l;
            }
        }
        self.next_iteration = i + 1;
        self.trajectory.push((i + 1, self.state_digest()));
        IterationOutcome::Completed(IterationResult { iteration: i, loss })
    }

    /// One synchronous iteration on the single-threaded event loop, stopping
    /// at an armed failure point if one falls inside it.
    pub fn run_iteration(&mut self) -> Result<IterationOutcome> {
        let i = self.next_iteration;
        self.begin_iteration(i)?;
        let firing = self.firing(i);
        let first_update = self.cfg.p - 1;
        for tau in 0..self.schedule.len() {
            let now: Vec<FailureEvent> = firing
                .iter()
                .copied()
                .filter(|e| e.phase == FailurePhase::MidIteration(tau))
                .collect();
            if !now.is_empty() {
                return self.fire(now);
            }
            for s in 0..self.cfg.p {
                let slot = self.schedule.slot(s, tau);
                for r in 0..self.cfg.dp {
                    self.exec_slot(self.topo.worker(r, s), slot, i)?;
                }
            }
            for s in 0..self.cfg.p {
                if self.schedule.finish_time(s) != tau {
                    continue;
                }
                let stop: Vec<FailureEvent> = if s == first_update {
                    firing
                        .iter()
                        .copied()
                        .filter(|e| matches!(e.phase, FailurePhase::BeforeUpdate | FailurePhase::MidUpdate(_)))
                        .collect()
                } else {
                    Vec::new()
                };
                let limit = stop.iter().map(|e| match e.phase {
                    FailurePhase::MidUpdate(k) => k,
                    _ => 0,
                });
                let limit = limit.min();
                self.update_stage(s, limit)?;
                if !stop.is_empty() {
                    return self.fire(stop);
                }
            }
        }
        let after: Vec<FailureEvent> = firing
            .iter()
            .copied()
            .filter(|e| e.phase == FailurePhase::AfterUpdate)
            .collect();
        if !after.is_empty() {
            return self.fire(after);
        }
        Ok(self.finish_iteration(i))
    }

    /// Trains until `end` iterations are complete or a failure fires.
    pub fn run_until(&mut self, end: u64) -> Result<Option<Vec<FailureEvent>>> {
        while self.next_iteration < end {
            if let IterationOutcome::Failed(ev) = self.run_iteration()? {
                return Ok(Some(ev));
            }
        }
        Ok(None)
    }

    /// Surviving workers, ascending id.
    pub fn survivors(&self) -> Vec<WorkerId> {
        (0..self.workers.len()).filter(|&w| self.cluster.worker_alive(w)).collect()
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.workers.iter().map(|w| w.stage.clone()).collect()
    }
}
