//! Choosing which machine boundaries to log under a storage budget.
//!
//! Machines form contiguous groups along the pipeline. Only traffic crossing
//! a group boundary is logged; a failure replays its whole group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{bubble_ratio, EngineConfig};

/// Cost inputs of the grouping problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    /// Machine count.
    #[serde(rename = "N")]
    pub n: usize,
    /// Per-machine recovery compute per iteration, seconds.
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    /// Bytes crossing boundary `i | i+1` per iteration; `N - 1` entries.
    #[serde(rename = "M")]
    pub m: Vec<f64>,
    /// Bandwidth, bytes per second.
    #[serde(rename = "B")]
    pub b: f64,
    /// Checkpoint interval, iterations.
    #[serde(rename = "T")]
    pub t: u64,
    #[serde(rename = "M_max")]
    pub m_max: f64,
    #[serde(default)]
    pub parallel: bool,
}

impl Profile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.n == 0 {
            return bad("N must be >= 1");
        }
        if self.r.len() != self.n {
            return bad("R needs one entry per machine");
        }
        if self.m.len() + 1 != self.n {
            return bad("M needs N - 1 boundary entries");
        }
        if self.r.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return bad("every R must be positive");
        }
        if self.m.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return bad("every M must be non-negative");
        }
        if !(self.b > 0.0 && self.b.is_finite()) {
            return bad("B must be positive");
        }
        if self.t == 0 {
            return bad("T must be >= 1");
        }
        if !(self.m_max >= 0.0) {
            return bad("M_max must be non-negative");
        }
        Ok(())
    }

    /// Derives a profile from an engine configuration: every stage-slot costs
    /// `slot_seconds`, boundary tensors are f64 and flow both ways.
    pub fn from_engine(cfg: &EngineConfig, slot_seconds: f64, bandwidth: f64, m_max: f64) -> Result<Self> {
        let topo = cfg.topology()?;
        let n = topo.num_machines;
        let mut r = vec![0.0; n];
        for w in 0..topo.num_workers() {
            r[topo.machine_of(w)] += 2.0 * cfg.m as f64 * slot_seconds;
        }
        let per_msg = (cfg.model.boundary_elems() * 8) as f64;
        let mut m = vec![0.0; n.saturating_sub(1)];
        for w in 0..topo.num_workers() {
            let s = topo.stage_of(w);
            if s + 1 < cfg.p {
                let (a, b) = (topo.machine_of(w), topo.machine_of(topo.worker(topo.replica_of(w), s + 1)));
                if a != b {
                    let (lo, hi) = (a.min(b), a.max(b));
                    if hi != lo + 1 {
                        return Err(Error::InvalidConfig(
                            "planner needs stages placed on consecutive machines".into(),
                        ));
                    }
                    m[lo] += 2.0 * cfg.m as f64 * per_msg;
                }
            }
        }
        let p = Profile {
            n,
            r,
            m,
            b: bandwidth,
            t: cfg.checkpoint_interval,
            m_max,
            parallel: cfg.parallel_helpers.is_some_and(|d| d > 1),
        };
        p.validate()?;
        Ok(p)
    }

    fn group_r(&self, g: &[usize]) -> f64 {
        let own: f64 = g.iter().map(|&i| self.r[i]).sum();
        let internal: f64 = g.windows(2).map(|w| self.m[w[0]] / self.b).sum();
        own + internal
    }

    /// Expected per-iteration recovery cost contributed by one group.
    fn group_term(&self, g: &[usize]) -> f64 {
        let size = g.len() as f64;
        let mut r = self.group_r(g);
        if self.parallel {
            r /= (self.n / g.len()) as f64;
        }
        size / self.n as f64 * r
    }

    /// Expected recovery time per lost iteration.
    pub fn recovery_time(&self, groups: &[Vec<usize>]) -> f64 {
        groups.iter().map(|g| self.group_term(g)).sum()
    }

    /// `T` times the bytes crossing every inter-group boundary.
    pub fn storage(&self, groups: &[Vec<usize>]) -> f64 {
        let boundaries: f64 = groups
            .windows(2)
            .map(|w| self.m[*w[0].last().expect("non-empty group")])
            .sum();
        self.t as f64 * boundaries
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    /// Index of the left group merged with its right neighbour.
    pub left: usize,
    pub delta_r: f64,
    pub delta_m: f64,
    pub ratio: f64,
    pub storage_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPlan {
    pub groups: Vec<Vec<usize>>,
    /// Expected recovery seconds per lost iteration.
    pub est_recovery_time: f64,
    pub est_storage: f64,
    pub trace: Vec<MergeStep>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl GroupPlan {
    fn build(profile: &Profile, groups: Vec<Vec<usize>>, trace: Vec<MergeStep>) -> Self {
        let mut notes = Vec::new();
        if profile.parallel {
            notes.push("parallel recovery assumed to scale linearly with floor(N/|G|) helpers".into());
        }
        Self {
            est_recovery_time: profile.recovery_time(&groups),
            est_storage: profile.storage(&groups),
            groups,
            trace,
            notes,
        }
    }
}

/// Greedy merging from singletons: while over budget, merge the adjacent pair
/// with the smallest recovery-time increase per byte saved.
pub fn group_machines(profile: &Profile) -> Result<GroupPlan> {
    profile.validate()?;
    let mut groups: Vec<Vec<usize>> = (0..profile.n).map(|i| vec![i]).collect();
    let mut trace = Vec::new();
    while profile.storage(&groups) > profile.m_max {
        let mut best: Option<(usize, f64, f64, f64)> = None;
        for i in 0..groups.len() - 1 {
            let dm = profile.t as f64 * profile.m[*groups[i].last().expect("non-empty")];
            if dm <= 0.0 {
                continue;
            }
            let merged: Vec<usize> = groups[i].iter().chain(&groups[i + 1]).copied().collect();
            let dr = profile.group_term(&merged) - profile.group_term(&groups[i]) - profile.group_term(&groups[i + 1]);
            let ratio = dr / dm;
            if best.is_none_or(|(_, _, _, b)| ratio < b) {
                best = Some((i, dr, dm, ratio));
            }
        }
        let Some((i, dr, dm, ratio)) = best else {
            break;
        };
        let right = groups.remove(i + 1);
        groups[i].extend(right);
        trace.push(MergeStep {
            left: i,
            delta_r: dr,
            delta_m: dm,
            ratio,
            storage_after: profile.storage(&groups),
        });
    }
    Ok(GroupPlan::build(profile, groups, trace))
}

/// Expected recovery seconds for `lost_iterations` lost iterations.
pub fn recovery_time_estimate(profile: &Profile, plan: &GroupPlan, lost_iterations: u64) -> f64 {
    lost_iterations as f64 * profile.recovery_time(&plan.groups)
}

pub const ORACLE_MAX_N: usize = 12;

/// Exhaustive search over all contiguous partitions.
pub fn brute_force_group_oracle(profile: &Profile) -> Result<GroupPlan> {
    profile.validate()?;
    if profile.n > ORACLE_MAX_N {
        return Err(Error::TooLarge(format!("N = {} > {ORACLE_MAX_N}", profile.n)));
    }
    let cuts = profile.n - 1;
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for mask in 0u32..(1 << cuts) {
        let mut groups = vec![vec![0]];
        for i in 1..profile.n {
            if mask & (1 << (i - 1)) != 0 {
                groups.push(vec![i]);
            } else {
                groups.last_mut().expect("non-empty").push(i);
            }
        }
        if profile.storage(&groups) > profile.m_max {
            continue;
        }
        let t = profile.recovery_time(&groups);
        if best.as_ref().is_none_or(|(b, _)| t < *b) {
            best = Some((t, groups));
        }
    }
    let (_, groups) = best.expect("the single group always fits");
    Ok(GroupPlan::build(profile, groups, Vec::new()))
}

/// Greedy recovery time over the optimum; at least 1.
pub fn oracle_gap(profile: &Profile) -> Result<f64> {
    let g = group_machines(profile)?;
    let o = brute_force_group_oracle(profile)?;
    Ok(g.est_recovery_time / o.est_recovery_time)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoggingModel {
    pub micro_batch_size: u64,
    pub hidden_size: u64,
    pub sequence_length: u64,
    pub bytes_per_element: u64,
    /// Micro-batches per iteration.
    pub m: u64,
    /// Pipeline stages.
    pub p: u64,
    /// Logged boundary messages per micro-batch on one machine.
    pub logged_boundaries: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorthwhileReport {
    pub elements_per_message: u64,
    pub bytes_per_iteration: u64,
    pub transfer_seconds: f64,
    pub bubble_seconds: f64,
    pub worthwhile: bool,
}

/// Logging pays off when the per-iteration log volume moves from device to
/// host memory within the iteration's bubble time.
pub fn logging_worthwhile(model: &LoggingModel, pcie_bandwidth: f64, iteration_time: f64) -> Result<WorthwhileReport> {
    if !(pcie_bandwidth > 0.0) || !(iteration_time > 0.0) {
        return Err(Error::InvalidConfig("bandwidth and iteration time must be positive".into()));
    }
    if model.m == 0 || model.p == 0 {
        return Err(Error::InvalidConfig("m and p must be >= 1".into()));
    }
    let elements = model.micro_batch_size * model.hidden_size * model.sequence_length;
    let bytes = elements * model.bytes_per_element * model.m * model.logged_boundaries;
    let ratio = bubble_ratio(model.p as usize, model.m as usize);
    let bubble = *ratio.numer() as f64 / *ratio.denom() as f64 * iteration_time;
    let transfer = bytes as f64 / pcie_bandwidth;
    Ok(WorthwhileReport {
        elements_per_message: elements,
        bytes_per_iteration: bytes,
        transfer_seconds: transfer,
        bubble_seconds: bubble,
        worthwhile: transfer <= bubble,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const GB: f64 = 1e9;

    fn uniform4(m_max: f64) -> Profile {
        Profile {
            n: 4,
            r: vec![1.0; 4],
            m: vec![GB; 3],
            b: GB,
            t: 100,
            m_max,
            parallel: false,
        }
    }

    #[test]
    fn four_machine_example() {
        let p = uniform4(200.0 * GB);
        assert_eq!(p.storage(&[vec![0], vec![1], vec![2], vec![3]]), 300.0 * GB);
        let plan = group_machines(&p).unwrap();
        assert_eq!(plan.groups, vec![vec![0, 1], vec![2], vec![3]]);
        assert_eq!(plan.est_storage, 200.0 * GB);
        assert_eq!(plan.trace.len(), 1);
        assert_eq!(plan.trace[0].delta_r, 1.0);
        assert_eq!(plan.trace[0].delta_m, 100.0 * GB);
        // 2/4 * (1 + 1 + 1) + 1/4 + 1/4
        assert_eq!(plan.est_recovery_time, 2.0);
        assert_eq!(recovery_time_estimate(&p, &plan, 50), 100.0);
        let oracle = brute_force_group_oracle(&p).unwrap();
        assert_eq!(oracle.est_recovery_time, plan.est_recovery_time);
    }

    #[test]
    fn budget_limits() {
        let loose = group_machines(&uniform4(300.0 * GB)).unwrap();
        assert_eq!(loose.groups.len(), 4);
        assert!(loose.trace.is_empty());
        assert_eq!(recovery_time_estimate(&uniform4(1e30), &loose, 10), 10.0);
        let none = group_machines(&uniform4(0.0)).unwrap();
        assert_eq!(none.groups, vec![vec![0, 1, 2, 3]]);
        assert_eq!(none.est_storage, 0.0);
        // whole pipeline: 4 + 3 boundary seconds
        assert_eq!(none.est_recovery_time, 7.0);
    }

    #[test]
    fn zero_traffic_and_single_machine() {
        let mut p = uniform4(0.0);
        p.m = vec![0.0; 3];
        assert_eq!(group_machines(&p).unwrap().groups.len(), 4);
        let one = Profile {
            n: 1,
            r: vec![2.0],
            m: vec![],
            b: 1.0,
            t: 1,
            m_max: 0.0,
            parallel: false,
        };
        assert_eq!(brute_force_group_oracle(&one).unwrap().groups, vec![vec![0]]);
        let mut big = uniform4(0.0);
        big.n = 13;
        big.r = vec![1.0; 13];
        big.m = vec![1.0; 12];
        assert!(matches!(brute_force_group_oracle(&big), Err(Error::TooLarge(_))));
    }

    #[test]
    fn parallel_divisor() {
        let mut p = uniform4(0.0);
        p.parallel = true;
        // floor(4/4) = 1
        assert_eq!(group_machines(&p).unwrap().est_recovery_time, 7.0);
        // singletons: each R divided by 4
        assert_eq!(p.recovery_time(&[vec![0], vec![1], vec![2], vec![3]]), 0.25);
    }

    #[test]
    fn worthwhile_check() {
        let model = LoggingModel {
            micro_batch_size: 4,
            hidden_size: 1024,
            sequence_length: 128,
            bytes_per_element: 2,
            m: 8,
            p: 4,
            logged_boundaries: 2,
        };
        let rep = logging_worthwhile(&model, 16e9, 1.0).unwrap();
        assert_eq!(rep.elements_per_message, 524_288);
        assert!(rep.worthwhile);
        let flat = LoggingModel { p: 1, ..model };
        assert!(!logging_worthwhile(&flat, 16e9, 1.0).unwrap().worthwhile);
        let cnn = LoggingModel {
            hidden_size: 256 * 56 * 56,
            sequence_length: 1,
            micro_batch_size: 64,
            ..model
        };
        assert!(!logging_worthwhile(&cnn, 16e9, 0.3).unwrap().worthwhile);
    }
}
