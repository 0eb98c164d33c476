//! Simulated machines, FIFO channels, fail-stop failures and detection.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Tensor;

pub type MachineId = usize;
pub type WorkerId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Activation,
    Gradient,
}

impl Direction {
    pub fn tag(self) -> u8 {
        match self {
            Direction::Activation => 0,
            Direction::Gradient => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Direction::Activation),
            1 => Some(Direction::Gradient),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender_worker: WorkerId,
    pub receiver_worker: WorkerId,
    pub iteration: u64,
    pub mb: usize,
    pub direction: Direction,
    pub payload: Tensor,
}

/// Where things run: `p` pipeline stages times `dp` replicas, placed on
/// machines. Worker `replica * p + stage`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub p: usize,
    pub dp: usize,
    pub num_machines: usize,
    /// Machine of each worker.
    pub placement: Vec<MachineId>,
}

impl Topology {
    /// Consecutive workers share a machine.
    pub fn consecutive(p: usize, dp: usize, num_machines: usize) -> Result<Self> {
        let n = p * dp;
        if p == 0 || dp == 0 || num_machines == 0 {
            return Err(Error::InvalidConfig("p, dp and machines must be >= 1".into()));
        }
        if !n.is_multiple_of(num_machines) {
            return Err(Error::InvalidConfig(format!(
                "{n} workers do not divide evenly over {num_machines} machines"
            )));
        }
        let per = n / num_machines;
        Self::with_placement(p, dp, num_machines, (0..n).map(|w| w / per).collect())
    }

    pub fn with_placement(p: usize, dp: usize, num_machines: usize, placement: Vec<MachineId>) -> Result<Self> {
        if p == 0 || dp == 0 || num_machines == 0 {
            return Err(Error::InvalidConfig("p, dp and machines must be >= 1".into()));
        }
        if placement.len() != p * dp {
            return Err(Error::InvalidConfig(format!(
                "placement lists {} workers, expected {}",
                placement.len(),
                p * dp
            )));
        }
        if let Some(m) = placement.iter().find(|&&m| m >= num_machines) {
            return Err(Error::InvalidConfig(format!("placement names unknown machine {m}")));
        }
        for m in 0..num_machines {
            if !placement.contains(&m) {
                return Err(Error::InvalidConfig(format!("machine {m} hosts no worker")));
            }
        }
        Ok(Self {
            p,
            dp,
            num_machines,
            placement,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.p * self.dp
    }

    pub fn worker(&self, replica: usize, stage: usize) -> WorkerId {
        replica * self.p + stage
    }

    pub fn stage_of(&self, w: WorkerId) -> usize {
        w % self.p
    }

    pub fn replica_of(&self, w: WorkerId) -> usize {
        w / self.p
    }

    pub fn machine_of(&self, w: WorkerId) -> MachineId {
        self.placement[w]
    }

    pub fn workers_on(&self, m: MachineId) -> Vec<WorkerId> {
        (0..self.num_workers()).filter(|&w| self.placement[w] == m).collect()
    }

    /// Workers `w` exchanges messages with: pipeline neighbours and replicas.
    pub fn peers(&self, w: WorkerId) -> Vec<WorkerId> {
        let (r, s) = (self.replica_of(w), self.stage_of(w));
        let mut out = Vec::new();
        if s > 0 {
            out.push(self.worker(r, s - 1));
        }
        if s + 1 < self.p {
            out.push(self.worker(r, s + 1));
        }
        out.extend((0..self.dp).filter(|&q| q != r).map(|q| self.worker(q, s)));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FailurePhase {
    /// Dies before executing schedule time step `step`.
    MidIteration(usize),
    BeforeUpdate,
    /// Dies after the first `k` layers (reverse order) of the first stage to
    /// finish have been synchronised and updated.
    MidUpdate(usize),
    /// Dies once every stage has updated, before the iteration is sealed.
    AfterUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub machine: MachineId,
    pub iteration: u64,
    pub phase: FailurePhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DetectionPath {
    ChannelBroken,
    FlagPoll,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub machine_id: MachineId,
    pub worker_ids: Vec<WorkerId>,
    pub alive: bool,
    pub local_disk: PathBuf,
}

/// Stand-in for the job-wide key-value store: a monotone failure latch and a
/// small string map.
#[derive(Debug, Default)]
pub struct GlobalKv {
    failure: AtomicBool,
    map: Mutex<BTreeMap<String, String>>,
}

impl GlobalKv {
    pub fn raise_failure(&self) {
        self.failure.store(true, Ordering::SeqCst);
    }

    pub fn failure_raised(&self) -> bool {
        self.failure.load(Ordering::SeqCst)
    }

    pub fn put(&self, key: &str, value: String) {
        self.map.lock().expect("kv lock").insert(key.to_string(), value);
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.map.lock().expect("kv lock").get(key).cloned()
    }

    /// Starts a new epoch once recovery has finished.
    pub fn reset(&self) {
        self.failure.store(false, Ordering::SeqCst);
        self.map.lock().expect("kv lock").clear();
    }
}

#[derive(Debug)]
pub struct Cluster {
    topology: Topology,
    machines: Vec<Machine>,
    channels: BTreeMap<(WorkerId, WorkerId), VecDeque<Message>>,
    kv: GlobalKv,
    failures: Vec<FailureEvent>,
    detected: BTreeMap<WorkerId, (FailureEvent, DetectionPath)>,
}

impl Cluster {
    pub fn new(topology: Topology, run_dir: &Path) -> Result<Self> {
        let mut machines = Vec::with_capacity(topology.num_machines);
        for id in 0..topology.num_machines {
            let dir = run_dir.join(format!("machine-{id:03}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
            machines.push(Machine {
                machine_id: id,
                worker_ids: topology.workers_on(id),
                alive: true,
                local_disk: dir,
            });
        }
        Ok(Self {
            topology,
            machines,
            channels: BTreeMap::new(),
            kv: GlobalKv::default(),
            failures: Vec::new(),
            detected: BTreeMap::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn machines(&self) -> &[Machine] {
        &self.machines
    }

    pub fn machine(&self, id: MachineId) -> &Machine {
        &self.machines[id]
    }

    pub fn kv(&self) -> &GlobalKv {
        &self.kv
    }

    pub fn is_alive(&self, m: MachineId) -> bool {
        self.machines.get(m).is_some_and(|x| x.alive)
    }

    pub fn worker_alive(&self, w: WorkerId) -> bool {
        self.is_alive(self.topology.machine_of(w))
    }

    pub fn all_alive(&self) -> bool {
        self.machines.iter().all(|m| m.alive)
    }

    pub fn dead_machines(&self) -> Vec<MachineId> {
        self.machines.iter().filter(|m| !m.alive).map(|m| m.machine_id).collect()
    }

    pub fn failures(&self) -> &[FailureEvent] {
        &self.failures
    }

    pub fn crosses_machines(&self, a: WorkerId, b: WorkerId) -> bool {
        self.topology.machine_of(a) != self.topology.machine_of(b)
    }

    /// Enqueues on the `(sender, receiver)` channel. Returns whether the
    /// message crossed a machine boundary, which is when it must be logged.
    pub fn send(&mut self, msg: Message) -> Result<bool> {
        for w in [msg.sender_worker, msg.receiver_worker] {
            let m = self.topology.machine_of(w);
            if !self.is_alive(m) {
                return Err(Error::ChannelBroken(m));
            }
        }
        let cross = self.crosses_machines(msg.sender_worker, msg.receiver_worker);
        self.channels
            .entry((msg.sender_worker, msg.receiver_worker))
            .or_default()
            .push_back(msg);
        Ok(cross)
    }

    /// Next message on the channel, in send order.
    pub fn recv(&mut self, sender: WorkerId, receiver: WorkerId) -> Result<Option<Message>> {
        let sm = self.topology.machine_of(sender);
        if !self.is_alive(sm) {
            return Err(Error::ChannelBroken(sm));
        }
        Ok(self
            .channels
            .get_mut(&(sender, receiver))
            .and_then(VecDeque::pop_front))
    }

    pub fn in_flight(&self) -> usize {
        self.channels.values().map(VecDeque::len).sum()
    }

    /// Drains every channel; used when a new epoch starts after recovery.
    pub fn clear_channels(&mut self) {
        self.channels.clear();
    }


    pub(crate) fn restore_channels(&mut self, ch: BTreeMap<(WorkerId, WorkerId), VecDeque<Message>>) {
        self.channels = ch;
    }

    /// Fail-stop: the machine halts and nothing it sent is ever delivered.
    pub fn inject_failure(&mut self, event: FailureEvent) -> Result<FailureEvent> {
        if !self.is_alive(event.machine) {
            return Err(Error::InvalidInjection(format!(
                "machine {} is already down",
                event.machine
            )));
        }
        self.machines[event.machine].alive = false;
        let topo = &self.topology;
        self.channels.retain(|(s, r), _| {
            topo.machine_of(*s) != event.machine && topo.machine_of(*r) != event.machine
        });
        self.failures.push(event);
        Ok(event)
    }

    /// One detection attempt by `w`: a broken channel to a peer, then the
    /// global flag. The first detector raises the flag.
    pub fn detect_failure(&mut self, w: WorkerId) -> Option<FailureEvent> {
        if !self.worker_alive(w) {
            return None;
        }
        if let Some((ev, _)) = self.detected.get(&w) {
            return Some(*ev);
        }
        let latest = *self.failures.last()?;
        let broken = self
            .topology
            .peers(w)
            .into_iter()
            .any(|q| !self.worker_alive(q));
        let path = if broken {
            self.kv.raise_failure();
            self.kv.put(
                "failure",
                format!("machine={} iteration={}", latest.machine, latest.iteration),
            );
            DetectionPath::ChannelBroken
        } else if self.kv.failure_raised() {
            DetectionPath::FlagPoll
        } else {
            return None;
        };
        self.detected.insert(w, (latest, path));
        Some(latest)
    }

    /// Polls every alive worker until all have observed the failure. Each
    /// cycle is one simulated step: communication errors first, then the flag.
    pub fn detect_all(&mut self, max_cycles: usize) -> Result<DetectionReport> {
        let alive: Vec<WorkerId> = (0..self.topology.num_workers())
            .filter(|&w| self.worker_alive(w))
            .collect();
        for cycle in 1..=max_cycles {
            for _pass in 0..2 {
                for &w in &alive {
                    self.detect_failure(w);
                }
            }
            if alive.iter().all(|w| self.detected.contains_key(w)) {
                return Ok(DetectionReport {
                    cycles: cycle,
                    paths: alive.iter().map(|w| (*w, self.detected[w].1)).collect(),
                });
            }
        }
        Err(Error::Unrecoverable(format!(
            "failure not detected by every worker within {max_cycles} poll cycles"
        )))
    }

    pub fn detection(&self, w: WorkerId) -> Option<DetectionPath> {
        self.detected.get(&w).map(|(_, p)| *p)
    }

    /// Brings a dead machine back under the same id with an empty local disk.
    pub fn spawn_replacement(&mut self, m: MachineId) -> Result<&Machine> {
        let machine = self
            .machines
            .get_mut(m)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown machine {m}")))?;
        if machine.alive {
            return Err(Error::NotFailed(m));
        }
        let dir = machine.local_disk.clone();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        machine.alive = true;
        Ok(&self.machines[m])
    }

    /// Clears detection state once every machine is back.
    pub fn end_epoch(&mut self) {
        self.kv.reset();
        self.detected.clear();
        self.channels.clear();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub cycles: usize,
    pub paths: Vec<(WorkerId, DetectionPath)>,
}

impl fmt::Display for FailurePhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailurePhase::MidIteration(s) => write!(f, "mid-iteration@{s}"),
            FailurePhase::BeforeUpdate => write!(f, "before-update"),
            FailurePhase::MidUpdate(k) => write!(f, "mid-update({k})"),
            FailurePhase::AfterUpdate => write!(f, "after-update"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(s: WorkerId, r: WorkerId, mb: usize) -> Message {
        Message {
            sender_worker: s,
            receiver_worker: r,
            iteration: 0,
            mb,
            direction: Direction::Activation,
            payload: Tensor::zeros(&[1]).unwrap(),
        }
    }

    fn cluster(p: usize, dp: usize, machines: usize) -> (tempfile::TempDir, Cluster) {
        let dir = tempfile::tempdir().unwrap();
        let c = Cluster::new(Topology::consecutive(p, dp, machines).unwrap(), dir.path()).unwrap();
        (dir, c)
    }

    #[test]
    fn placement_and_ids() {
        let t = Topology::consecutive(8, 1, 4).unwrap();
        assert_eq!(t.workers_on(1), vec![2, 3]);
        let t = Topology::consecutive(2, 2, 2).unwrap();
        assert_eq!(t.worker(1, 0), 2);
        assert_eq!(t.peers(2), vec![3, 0]);
        assert!(Topology::consecutive(3, 1, 2).is_err());
    }

    #[test]
    fn fifo_and_cross_machine_flag() {
        let (_d, mut c) = cluster(4, 1, 2);
        assert!(!c.send(msg(0, 1, 0)).unwrap());
        assert!(c.send(msg(1, 2, 0)).unwrap());
        c.send(msg(0, 1, 1)).unwrap();
        assert_eq!(c.recv(0, 1).unwrap().unwrap().mb, 0);
        assert_eq!(c.recv(0, 1).unwrap().unwrap().mb, 1);
        assert!(c.recv(0, 1).unwrap().is_none());
    }

    #[test]
    fn fail_stop_and_detection() {
        let (_d, mut c) = cluster(4, 1, 4);
        c.send(msg(1, 2, 0)).unwrap();
        let ev = FailureEvent {
            machine: 1,
            iteration: 3,
            phase: FailurePhase::BeforeUpdate,
        };
        c.inject_failure(ev).unwrap();
        assert_eq!(c.in_flight(), 0);
        assert!(matches!(c.send(msg(0, 1, 0)), Err(Error::ChannelBroken(1))));
        assert!(matches!(c.inject_failure(ev), Err(Error::InvalidInjection(_))));

        assert_eq!(c.detect_failure(3), None);
        assert_eq!(c.detect_failure(0), Some(ev));
        assert_eq!(c.detection(0), Some(DetectionPath::ChannelBroken));
        assert_eq!(c.detect_failure(3), Some(ev));
        assert_eq!(c.detection(3), Some(DetectionPath::FlagPoll));
        assert_eq!(c.detect_failure(1), None);
        let report = c.detect_all(1).unwrap();
        assert_eq!(report.cycles, 1);
    }

    #[test]
    fn no_failure_no_detection() {
        let (_d, mut c) = cluster(2, 1, 2);
        assert_eq!(c.detect_failure(0), None);
    }

    #[test]
    fn replacement() {
        let (_d, mut c) = cluster(2, 1, 2);
        assert!(matches!(c.spawn_replacement(1), Err(Error::NotFailed(1))));
        let disk = c.machine(1).local_disk.clone();
        std::fs::write(disk.join("junk"), b"x").unwrap();
        c.inject_failure(FailureEvent {
            machine: 1,
            iteration: 0,
            phase: FailurePhase::AfterUpdate,
        })
        .unwrap();
        let m = c.spawn_replacement(1).unwrap();
        assert!(m.alive);
        assert_eq!(m.machine_id, 1);
        assert!(!disk.join("junk").exists());
    }
}
