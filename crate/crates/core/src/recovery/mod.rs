//! Post-failure repair: consensus, update-undo, replica broadcast, log replay
//! (sequential or spread over helpers) and global rollback.

mod orchestrate;
mod replay;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cluster::{MachineId, Topology, WorkerId};
use crate::error::{Error, Result};
use crate::optimizers::OptimizerHyper;
use crate::resilience::GroupLayout;
use crate::Stage;

pub use orchestrate::{recover, recover_with, CascadeFault, CascadeOutcome, RecoveryOptions, RecoveryReport};
pub use replay::{round_robin, HelperAssignment};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Replication,
    LoggingReplay,
    ParallelReplay,
    GlobalRollback,
}

/// Iteration every survivor can reach: the minimum. Workers ahead of it undo.
pub fn consensus_iteration(iterations: &[u64]) -> Result<u64> {
    iterations.iter().copied().min().ok_or(Error::EmptyInput)
}

/// Undoes every block stepped past `target`. All-or-nothing: on error the
/// stage is unchanged. Returns the number of blocks undone.
pub fn apply_undo(stage: &mut Stage, iteration: &mut u64, target: u64, hyper: &OptimizerHyper) -> Result<usize> {
    if *iteration > target + 1 {
        return Err(Error::Unrecoverable(format!(
            "worker at iteration {} cannot undo back to {target}",
            *iteration
        )));
    }
    let mut next = stage.clone();
    let mut undone = 0;
    for b in next.blocks_mut() {
        if b.t > target {
            if b.t != target + 1 || !b.updated {
                return Err(Error::Unrecoverable(format!(
                    "block at step {} has no cached update back to {target}",
                    b.t
                )));
            }
            b.undo(hyper)?;
            undone += 1;
        }
    }
    *stage = next;
    *iteration = target;
    Ok(undone)
}

/// A set of machines whose stages are re-executed together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayUnit {
    /// Every machine in the unit, failed or not.
    pub machines: Vec<MachineId>,
    pub failed: Vec<MachineId>,
    pub workers: Vec<WorkerId>,
}

impl ReplayUnit {
    pub fn stages(&self, topo: &Topology) -> BTreeSet<usize> {
        self.workers.iter().map(|&w| topo.stage_of(w)).collect()
    }

    pub fn contains_worker(&self, w: WorkerId) -> bool {
        self.workers.binary_search(&w).is_ok()
    }

    /// Every replica of every stage it holds is inside, so no gradient from
    /// outside the unit is needed for its all-reduce.
    pub fn is_closed(&self, topo: &Topology) -> bool {
        self.stages(topo)
            .iter()
            .all(|&s| (0..topo.dp).all(|r| self.contains_worker(topo.worker(r, s))))
    }
}

fn coupled(topo: &Topology, a: &BTreeSet<WorkerId>, b: &BTreeSet<WorkerId>) -> bool {
    a.iter().any(|&x| {
        b.iter().any(|&y| {
            let (rx, sx) = (topo.replica_of(x), topo.stage_of(x));
            let (ry, sy) = (topo.replica_of(y), topo.stage_of(y));
            (rx == ry && sx.abs_diff(sy) == 1) || (sx == sy && rx != ry)
        })
    })
}

/// Groups failed machines into joint replay units: each failed machine brings
/// its whole logging group, and units that exchange unlogged traffic (shared
/// machines, adjacent stages, replicas of one stage) are merged.
pub fn plan_multi_failure(failed: &BTreeSet<MachineId>, topo: &Topology, layout: &GroupLayout) -> Vec<ReplayUnit> {
    let mut units: Vec<(BTreeSet<MachineId>, BTreeSet<MachineId>)> = failed
        .iter()
        .map(|&m| {
            let g = layout.group_of(m);
            (layout.members(g).iter().copied().collect(), [m].into())
        })
        .collect();
    let workers_of = |ms: &BTreeSet<MachineId>| -> BTreeSet<WorkerId> {
        ms.iter().flat_map(|&m| topo.workers_on(m)).collect()
    };
    loop {
        let mut merged = false;
        'outer: for i in 0..units.len() {
            for j in i + 1..units.len() {
                let share = !units[i].0.is_disjoint(&units[j].0);
                if share || coupled(topo, &workers_of(&units[i].0), &workers_of(&units[j].0)) {
                    let (ms, fs) = units.remove(j);
                    units[i].0.extend(ms);
                    units[i].1.extend(fs);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    let mut out: Vec<ReplayUnit> = units
        .into_iter()
        .map(|(ms, fs)| ReplayUnit {
            workers: workers_of(&ms).into_iter().collect(),
            machines: ms.into_iter().collect(),
            failed: fs.into_iter().collect(),
        })
        .collect();
    out.sort_by_key(|u| u.machines[0]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::optimizers::OptimizerKind;
    use crate::pipeline::apply_layerwise_updates;
    use crate::Tensor;

    #[test]
    fn consensus_is_min() {
        assert_eq!(consensus_iteration(&[150, 150, 151]).unwrap(), 150);
        assert_eq!(consensus_iteration(&[150]).unwrap(), 150);
        assert!(consensus_iteration(&[]).is_err());
    }

    #[test]
    fn undo_only_updated_layers() {
        let dims = ModelDims {
            input_dim: 3,
            hidden_dim: 3,
            output_dim: 3,
            layers_per_stage: 3,
            batch_rows: 2,
        };
        let h = OptimizerHyper::new(OptimizerKind::Adam, 0.01);
        let pre = Stage::init(0, 1, &dims, 4).unwrap();
        let grads: Vec<Tensor> = pre.blocks().map(|b| Tensor::seeded_fill(b.x.shape(), 8).unwrap()).collect();
        let mut st = pre.clone();
        apply_layerwise_updates(&mut [&mut st], &[grads], &h, Some(1)).unwrap();
        assert_eq!(st.updated_flags(), vec![false, false, true]);
        let mut it = 0;
        assert_eq!(apply_undo(&mut st, &mut it, 0, &h).unwrap(), 2);
        assert!(st.max_rel_diff(&pre).unwrap() <= 1e-9);
        assert!(st.updated_flags().iter().all(|f| !f));

        let mut clean = pre.clone();
        assert_eq!(apply_undo(&mut clean, &mut it, 0, &h).unwrap(), 0);
        assert!(clean.bit_eq(&pre));
    }

    #[test]
    fn amsgrad_cannot_undo() {
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            output_dim: 2,
            layers_per_stage: 1,
            batch_rows: 1,
        };
        let mut h = OptimizerHyper::new(OptimizerKind::AmsGrad, 0.01);
        h.require_undo = false;
        let mut st = Stage::init(0, 1, &dims, 4).unwrap();
        let grads: Vec<Tensor> = st.blocks().map(|b| Tensor::seeded_fill(b.x.shape(), 8).unwrap()).collect();
        apply_layerwise_updates(&mut [&mut st], &[grads], &h, None).unwrap();
        let before = st.clone();
        let mut it = 1;
        assert!(matches!(apply_undo(&mut st, &mut it, 0, &h), Err(Error::NotInvertible(_))));
        assert!(st.bit_eq(&before));
        assert_eq!(it, 1);
    }

    #[test]
    fn multi_failure_units() {
        let topo = Topology::consecutive(8, 1, 8).unwrap();
        let layout = GroupLayout::singletons(8);
        let joint = plan_multi_failure(&[2, 3].into(), &topo, &layout);
        assert_eq!(joint.len(), 1);
        assert_eq!(joint[0].machines, vec![2, 3]);
        let apart = plan_multi_failure(&[1, 5].into(), &topo, &layout);
        assert_eq!(apart.len(), 2);
        assert_eq!(apart[1].failed, vec![5]);

        let grouped = GroupLayout::from_groups(8, &[vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]).unwrap();
        let u = plan_multi_failure(&[2].into(), &topo, &grouped);
        assert_eq!(u[0].machines, vec![2, 3]);
        assert_eq!(u[0].failed, vec![2]);
        assert!(u[0].is_closed(&topo));

        let dp = Topology::consecutive(2, 2, 4).unwrap();
        let u = plan_multi_failure(&[0].into(), &dp, &GroupLayout::singletons(4));
        assert!(!u[0].is_closed(&dp));
    }
}
