//! Re-execution of a replay unit from logged boundary traffic.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{Direction, Message, Topology, WorkerId};
use crate::error::{Error, Result};
use crate::model::{accumulate_grads, ActivationCache};
use crate::optimizers::OptimizerHyper;
use crate::pipeline::{apply_layerwise_updates, backward_op, forward_op, StepCtx};
use crate::resilience::LogRecord;
use crate::{Stage, Tensor};

use super::ReplayUnit;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelperAssignment {
    pub helper: WorkerId,
    pub mbs: Vec<usize>,
}

/// Helper `h` of `d` takes every micro-batch `mb` with `mb % d == h`.
pub fn round_robin(m: usize, d: usize) -> Vec<Vec<usize>> {
    let d = d.max(1);
    (0..d).map(|h| (h..m).step_by(d).collect()).collect()
}

type Key = (WorkerId, u64, usize, Direction);

/// Logged inbound traffic of one unit, addressed by receiver.
#[derive(Debug, Default)]
pub(crate) struct LogIndex {
    map: BTreeMap<Key, Tensor>,
}

impl LogIndex {
    pub fn build(records: &[LogRecord]) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            map.insert((r.receiver_worker, r.iteration, r.mb, r.direction), r.tensor()?);
        }
        Ok(Self { map })
    }

    fn get(&self, key: Key) -> Result<&Tensor> {
        self.map.get(&key).ok_or_else(|| {
            Error::MissingLogData(format!(
                "worker {} iteration {} mb {} {:?}",
                key.0, key.1, key.2, key.3
            ))
        })
    }

    /// Every inbound message the unit needs for iterations `[from, to)`.
    pub fn check_complete(&self, unit: &ReplayUnit, topo: &Topology, m: usize, from: u64, to: u64) -> Result<usize> {
        let needs = inbound_edges(unit, topo);
        for i in from..to {
            for &(w, dir) in &needs {
                for mb in 0..m {
                    self.get((w, i, mb, dir))?;
                }
            }
        }
        Ok(needs.len() * m * (to.saturating_sub(from)) as usize)
    }
}

/// Unit workers that receive from outside the unit, and in which direction.
pub(crate) fn inbound_edges(unit: &ReplayUnit, topo: &Topology) -> Vec<(WorkerId, Direction)> {
    let mut out = Vec::new();
    for &w in &unit.workers {
        let (r, s) = (topo.replica_of(w), topo.stage_of(w));
        if s > 0 && !unit.contains_worker(topo.worker(r, s - 1)) {
            out.push((w, Direction::Activation));
        }
        if s + 1 < topo.p && !unit.contains_worker(topo.worker(r, s + 1)) {
            out.push((w, Direction::Gradient));
        }
    }
    out
}

pub(crate) type Partials = BTreeMap<WorkerId, BTreeMap<usize, Vec<Tensor>>>;

/// Forward then backward of `mbs` through the unit's stages, replica by
/// replica. Returns per-worker parameter gradients and every message the unit
/// would have sent outside itself.
pub(crate) fn replay_mbs(
    ctx: &StepCtx,
    topo: &Topology,
    unit: &ReplayUnit,
    states: &BTreeMap<WorkerId, Stage>,
    logs: &LogIndex,
    mbs: &[usize],
) -> Result<(Partials, Vec<Message>)> {
    let i = ctx.iteration;
    let mut partials: Partials = unit.workers.iter().map(|&w| (w, BTreeMap::new())).collect();
    let mut outbound = Vec::new();
    let replicas: BTreeSet<usize> = unit.workers.iter().map(|&w| topo.replica_of(w)).collect();
    for r in replicas {
        let chain: Vec<WorkerId> = unit.workers.iter().copied().filter(|&w| topo.replica_of(w) == r).collect();
        for &mb in mbs {
            let mut caches: BTreeMap<WorkerId, ActivationCache<f64>> = BTreeMap::new();
            let mut acts: BTreeMap<usize, Tensor> = BTreeMap::new();
            for &w in &chain {
                let s = topo.stage_of(w);
                let input = if s == 0 {
                    None
                } else if let Some(a) = acts.get(&(s - 1)) {
                    Some(a.clone())
                } else {
                    Some(logs.get((w, i, mb, Direction::Activation))?.clone())
                };
                let cache = caches.entry(w).or_default();
                let out = forward_op(ctx, &states[&w], cache, r, mb, input)?;
                if s + 1 < ctx.p {
                    let next = topo.worker(r, s + 1);
                    if !unit.contains_worker(next) {
                        outbound.push(message(w, next, i, mb, Direction::Activation, out.clone()));
                    }
                }
                acts.insert(s, out);
            }
            let mut grads: BTreeMap<usize, Tensor> = BTreeMap::new();
            for &w in chain.iter().rev() {
                let s = topo.stage_of(w);
                let grad = if s + 1 == ctx.p {
                    None
                } else if let Some(g) = grads.get(&(s + 1)) {
                    Some(g.clone())
                } else {
                    Some(logs.get((w, i, mb, Direction::Gradient))?.clone())
                };
                let cache = caches.get_mut(&w).expect("forward ran");
                let (gi, pg, _) = backward_op(ctx, &states[&w], cache, r, mb, grad)?;
                partials.get_mut(&w).expect("unit worker").insert(mb, pg);
                if s > 0 {
                    let prev = topo.worker(r, s - 1);
                    if !unit.contains_worker(prev) {
                        outbound.push(message(w, prev, i, mb, Direction::Gradient, gi.clone()));
                    }
                }
                grads.insert(s, gi);
            }
        }
    }
    Ok((partials, outbound))
}

fn message(from: WorkerId, to: WorkerId, iteration: u64, mb: usize, direction: Direction, payload: Tensor) -> Message {
    Message {
        sender_worker: from,
        receiver_worker: to,
        iteration,
        mb,
        direction,
        payload,
    }
}

/// Replica all-reduce plus layer-wise update of every stage in the unit.
pub(crate) fn apply_unit_update(
    topo: &Topology,
    unit: &ReplayUnit,
    states: &mut BTreeMap<WorkerId, Stage>,
    partials: &Partials,
    hyper: &OptimizerHyper,
) -> Result<()> {
    for s in unit.stages(topo) {
        let ids: Vec<WorkerId> = (0..topo.dp).map(|r| topo.worker(r, s)).collect();
        let acc: Vec<Vec<Tensor>> = ids
            .iter()
            .map(|w| accumulate_grads(&partials[w]))
            .collect::<Result<_>>()?;
        let mut stages: Vec<&mut Stage> = states
            .iter_mut()
            .filter(|(w, _)| ids.contains(w))
            .map(|(_, st)| st)
            .collect();
        apply_layerwise_updates(&mut stages, &acc, hyper, None)?;
        for st in stages {
            st.commit();
        }
    }
    Ok(())
}

/// One replayed iteration spread over `copies.len()` helpers, each holding its
/// own copy of the unit state. Gradients are merged in micro-batch order, so
/// every copy applies the same update and ends bit-identical.
pub(crate) fn replay_iteration(
    ctx: &StepCtx,
    topo: &Topology,
    unit: &ReplayUnit,
    copies: &mut [BTreeMap<WorkerId, Stage>],
    logs: &LogIndex,
    assignment: &[Vec<usize>],
    hyper: &OptimizerHyper,
) -> Result<Vec<Message>> {
    let results: Vec<Result<(Partials, Vec<Message>)>> = if copies.len() == 1 {
        vec![replay_mbs(ctx, topo, unit, &copies[0], logs, &assignment[0])]
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = copies
                .iter()
                .zip(assignment)
                .map(|(states, mbs)| scope.spawn(move || replay_mbs(ctx, topo, unit, states, logs, mbs)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Unrecoverable("helper thread panicked".into()))))
                .collect()
        })
    };
    let mut merged: Partials = unit.workers.iter().map(|&w| (w, BTreeMap::new())).collect();
    let mut outbound = Vec::new();
    for res in results {
        let (partials, out) = res?;
        for (w, per_mb) in partials {
            merged.get_mut(&w).expect("unit worker").extend(per_mb);
        }
        outbound.extend(out);
    }
    outbound.sort_by_key(|m| (m.sender_worker, m.receiver_worker, m.mb, m.direction));
    for states in copies.iter_mut() {
        apply_unit_update(topo, unit, states, &merged, hyper)?;
    }
    let first = &copies[0];
    for other in &copies[1..] {
        if first.iter().zip(other).any(|((_, a), (_, b))| !a.bit_eq(b)) {
            return Err(Error::Unrecoverable("helper copies diverged".into()));
        }
    }
    Ok(outbound)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_robin_covers_every_mb_once() {
        let a = round_robin(8, 3);
        assert_eq!(a, vec![vec![0, 3, 6], vec![1, 4, 7], vec![2, 5]]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert_eq!(round_robin(4, 1), vec![vec![0, 1, 2, 3]]);
    }
}
