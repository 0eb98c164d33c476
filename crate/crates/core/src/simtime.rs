//! Analytic end-to-end training time under random machine failures.
//!
//! Failures land at positions measured in training progress (fractional
//! iterations). Each strategy turns a failure at position `x` into lost work
//! plus fixed recovery costs; the total is the failure-free time plus the sum
//! of those charges.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SimStrategy {
    GlobalCkpt,
    CheckFreqLike,
    ElasticHorovodLike,
    UndoReplication,
    LogReplay,
    ParallelLogReplay,
}

impl SimStrategy {
    pub const ALL: [SimStrategy; 6] = [
        SimStrategy::GlobalCkpt,
        SimStrategy::CheckFreqLike,
        SimStrategy::ElasticHorovodLike,
        SimStrategy::UndoReplication,
        SimStrategy::LogReplay,
        SimStrategy::ParallelLogReplay,
    ];
}

/// In-memory snapshot baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotCosts {
    /// Iterations between snapshots.
    pub interval: u64,
    /// Seconds the update waits per snapshot.
    pub checkfreq_stall: f64,
    /// Fractional slowdown of every iteration.
    pub checkfreq_slowdown: f64,
    pub elastic_stall: f64,
    pub elastic_slowdown: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub name: String,
    pub total_iterations: u64,
    /// Seconds per failure-free iteration.
    pub iteration_time: f64,
    pub checkpoint_interval: u64,
    /// Seconds per global checkpoint.
    pub checkpoint_cost: f64,
    /// Failure detection until replacements join.
    pub init_time: f64,
    pub checkpoint_load_time: f64,
    /// Replica broadcast to a replacement.
    pub broadcast_time: f64,
    /// Cost of replaying one lost iteration of the failed scope, relative to
    /// re-running it on the whole job.
    pub replay_fraction: f64,
    pub parallel_replay_fraction: f64,
    #[serde(default)]
    pub snapshot: Option<SnapshotCosts>,
    /// Variant compared against global checkpointing by default.
    pub fast_strategy: SimStrategy,
}

impl Workload {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("workload {}: {m}", self.name)));
        if self.total_iterations == 0 || self.checkpoint_interval == 0 {
            return bad("iteration counts must be >= 1");
        }
        let times = [
            self.iteration_time,
            self.checkpoint_cost,
            self.init_time,
            self.checkpoint_load_time,
            self.broadcast_time,
        ];
        if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return bad("times must be finite and >= 0");
        }
        for f in [self.replay_fraction, self.parallel_replay_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return bad("replay fractions must lie in [0, 1]");
            }
        }
        if self.parallel_replay_fraction > self.replay_fraction {
            return bad("parallel replay cannot be slower than sequential replay");
        }
        if let Some(s) = &self.snapshot {
            if s.interval == 0 {
                return bad("snapshot interval must be >= 1");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        let w: Workload = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        w.validate()?;
        Ok(w)
    }

    fn snapshot(&self, strategy: SimStrategy) -> Result<&SnapshotCosts> {
        self.snapshot
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("workload {} has no snapshot costs for {strategy:?}", self.name)))
    }

    /// Failure-free seconds under `strategy`.
    pub fn failure_free_seconds(&self, strategy: SimStrategy) -> Result<f64> {
        let n = self.total_iterations as f64;
        let ckpts = (self.total_iterations / self.checkpoint_interval) as f64;
        let base = n * self.iteration_time + ckpts * self.checkpoint_cost;
        Ok(match strategy {
            SimStrategy::CheckFreqLike | SimStrategy::ElasticHorovodLike => {
                let s = self.snapshot(strategy)?;
                let (stall, slow) = if strategy == SimStrategy::CheckFreqLike {
                    (s.checkfreq_stall, s.checkfreq_slowdown)
                } else {
                    (s.elastic_stall, s.elastic_slowdown)
                };
                base + (self.total_iterations / s.interval) as f64 * stall + n * self.iteration_time * slow
            }
            _ => base,
        })
    }

    /// Seconds charged for one failure at progress `x` (fractional iterations).
    pub fn failure_cost(&self, strategy: SimStrategy, x: f64) -> Result<FailureCost> {
        let it = self.iteration_time;
        let since = |interval: u64| x - (x / interval as f64).floor() * interval as f64;
        let partial = x.fract() * it;
        let since_ckpt = since(self.checkpoint_interval).floor() * it;
        let (lost, recovery) = match strategy {
            SimStrategy::GlobalCkpt => (since(self.checkpoint_interval) * it, self.init_time + self.checkpoint_load_time),
            SimStrategy::CheckFreqLike => (
                since(self.snapshot(strategy)?.interval) * it,
                self.init_time + self.checkpoint_load_time,
            ),
            SimStrategy::ElasticHorovodLike => (
                since(self.snapshot(strategy)?.interval) * it,
                self.init_time + self.broadcast_time,
            ),
            SimStrategy::UndoReplication => (partial, self.init_time + self.broadcast_time),
            SimStrategy::LogReplay => (
                partial + since_ckpt * self.replay_fraction,
                self.init_time + self.checkpoint_load_time,
            ),
            SimStrategy::ParallelLogReplay => (
                partial + since_ckpt * self.parallel_replay_fraction,
                self.init_time + self.checkpoint_load_time,
            ),
        };
        Ok(FailureCost {
            position: x,
            lost_seconds: lost,
            recovery_seconds: recovery,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FailureDistribution {
    /// `round(hours / mtbf)` failures placed uniformly over the run.
    #[default]
    Uniform,
    /// Poisson arrivals whose inter-arrival median equals the MTBF.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureProcess {
    pub mtbf_hours: f64,
    pub seed: u64,
    #[serde(default)]
    pub distribution: FailureDistribution,
}

impl FailureProcess {
    /// Sorted failure positions for repetition `rep`, in iterations.
    pub fn positions(&self, w: &Workload, rep: u64) -> Result<Vec<f64>> {
        if !(self.mtbf_hours > 0.0) {
            return Err(Error::InvalidConfig("mtbf_hours must be positive".into()));
        }
        let hours = w.failure_free_seconds(SimStrategy::GlobalCkpt)? / 3600.0;
        let iters = w.total_iterations as f64;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(self.seed, &[rep]));
        let mut out = match self.distribution {
            FailureDistribution::Uniform => {
                let n = (hours / self.mtbf_hours).round() as usize;
                let unit = rand_distr::Uniform::new(0.0, iters).expect("iterations >= 1");
                (0..n).map(|_| unit.sample(&mut rng)).collect::<Vec<f64>>()
            }
            FailureDistribution::Exponential => {
                let exp = Exp::new(std::f64::consts::LN_2 / self.mtbf_hours)
                    .map_err(|e| Error::InvalidConfig(e.to_string()))?;
                let mut t = 0.0;
                let mut v = Vec::new();
                loop {
                    t += exp.sample(&mut rng);
                    if t >= hours {
                        break;
                    }
                    v.push(t / hours * iters);
                }
                v
            }
        };
        out.sort_by(f64::total_cmp);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureCost {
    pub position: f64,
    pub lost_seconds: f64,
    pub recovery_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub repetition: u64,
    pub total_hours: f64,
    pub failures: Vec<FailureCost>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub workload: String,
    pub strategy: SimStrategy,
    pub failure_free_hours: f64,
    pub mean_total_hours: f64,
    pub mean_failures: f64,
    pub runs: Vec<SimRun>,
}

pub fn simulate_training(
    w: &Workload,
    strategy: SimStrategy,
    process: &FailureProcess,
    repetitions: u64,
) -> Result<SimReport> {
    w.validate()?;
    if repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
    }
    let free = w.failure_free_seconds(strategy)?;
    let mut runs = Vec::new();
    for rep in 0..repetitions {
        let failures = process
            .positions(w, rep)?
            .into_iter()
            .map(|x| w.failure_cost(strategy, x))
            .collect::<Result<Vec<_>>>()?;
        let extra: f64 = failures.iter().map(|f| f.lost_seconds + f.recovery_seconds).sum();
        runs.push(SimRun {
            repetition: rep,
            total_hours: (free + extra) / 3600.0,
            failures,
        });
    }
    let k = repetitions as f64;
    Ok(SimReport {
        workload: w.name.clone(),
        strategy,
        failure_free_hours: free / 3600.0,
        mean_total_hours: runs.iter().map(|r| r.total_hours).sum::<f64>() / k,
        mean_failures: runs.iter().map(|r| r.failures.len() as f64).sum::<f64>() / k,
        runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub workload: String,
    pub baseline: SimStrategy,
    pub fast: SimStrategy,
    pub baseline_hours: f64,
    pub fast_hours: f64,
    pub speedup: f64,
    pub mean_failures: f64,
}

/// Global checkpointing against the workload's undo- or log-based strategy.
pub fn compare(w: &Workload, process: &FailureProcess, repetitions: u64) -> Result<Comparison> {
    let base = simulate_training(w, SimStrategy::GlobalCkpt, process, repetitions)?;
    let fast = simulate_training(w, w.fast_strategy, process, repetitions)?;
    Ok(Comparison {
        workload: w.name.clone(),
        baseline: SimStrategy::GlobalCkpt,
        fast: w.fast_strategy,
        baseline_hours: base.mean_total_hours,
        fast_hours: fast.mean_total_hours,
        speedup: base.mean_total_hours / fast.mean_total_hours,
        mean_failures: base.mean_failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CheckpointInterval,
    Mtbf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub mean_hours: f64,
}

/// One simulation per value. On the checkpoint axis the snapshot baselines
/// vary their snapshot interval and replication keeps the workload's own
/// interval, since it never rolls back to a checkpoint.
pub fn sweep(
    w: &Workload,
    strategy: SimStrategy,
    axis: SweepAxis,
    values: &[f64],
    process: &FailureProcess,
    repetitions: u64,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    values
        .iter()
        .map(|&v| {
            let mut wl = w.clone();
            let mut pr = *process;
            match axis {
                SweepAxis::Mtbf => pr.mtbf_hours = v,
                SweepAxis::CheckpointInterval => {
                    let n = v.round().max(1.0) as u64;
                    match strategy {
                        SimStrategy::CheckFreqLike | SimStrategy::ElasticHorovodLike => {
                            let mut s = *wl.snapshot(strategy)?;
                            s.interval = n;
                            wl.snapshot = Some(s);
                        }
                        SimStrategy::UndoReplication => {}
                        _ => wl.checkpoint_interval = n,
                    }
                }
            }
            let r = simulate_training(&wl, strategy, &pr, repetitions)?;
            Ok(SweepPoint {
                value: v,
                mean_hours: r.mean_total_hours,
            })
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, strategy: SimStrategy, points: &[SweepPoint]) -> String {
    let name = match axis {
        SweepAxis::CheckpointInterval => "checkpoint_interval",
        SweepAxis::Mtbf => "mtbf_hours",
    };
    let mut out = format!("{name},strategy,mean_hours\n");
    for p in points {
        let _ = writeln!(out, "{},{strategy:?},{:.6}", p.value, p.mean_hours);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Workload {
        Workload {
            name: "toy".into(),
            total_iterations: 1000,
            iteration_time: 2.0,
            checkpoint_interval: 100,
            checkpoint_cost: 10.0,
            init_time: 30.0,
            checkpoint_load_time: 5.0,
            broadcast_time: 1.0,
            replay_fraction: 0.5,
            parallel_replay_fraction: 0.25,
            snapshot: Some(SnapshotCosts {
                interval: 10,
                checkfreq_stall: 0.0,
                checkfreq_slowdown: 0.1,
                elastic_stall: 1.0,
                elastic_slowdown: 0.0,
            }),
            fast_strategy: SimStrategy::UndoReplication,
        }
    }

    #[test]
    fn failure_free_accounting() {
        let w = toy();
        assert_eq!(w.failure_free_seconds(SimStrategy::GlobalCkpt).unwrap(), 2100.0);
        assert_eq!(w.failure_free_seconds(SimStrategy::CheckFreqLike).unwrap(), 2300.0);
        assert_eq!(w.failure_free_seconds(SimStrategy::ElasticHorovodLike).unwrap(), 2200.0);
    }

    #[test]
    fn costs_at_a_point() {
        let w = toy();
        let c = w.failure_cost(SimStrategy::GlobalCkpt, 250.5).unwrap();
        assert_eq!(c.lost_seconds, 101.0);
        assert_eq!(c.recovery_seconds, 35.0);
        let c = w.failure_cost(SimStrategy::UndoReplication, 250.5).unwrap();
        assert_eq!(c.lost_seconds, 1.0);
        let c = w.failure_cost(SimStrategy::LogReplay, 250.5).unwrap();
        assert_eq!(c.lost_seconds, 1.0 + 50.0);
        let c = w.failure_cost(SimStrategy::ParallelLogReplay, 250.5).unwrap();
        assert_eq!(c.lost_seconds, 1.0 + 25.0);
    }

    #[test]
    fn infinite_mtbf_is_failure_free() {
        let w = toy();
        let p = FailureProcess {
            mtbf_hours: f64::INFINITY,
            seed: 1,
            distribution: FailureDistribution::Uniform,
        };
        for s in SimStrategy::ALL {
            let r = simulate_training(&w, s, &p, 3).unwrap();
            assert_eq!(r.mean_total_hours, r.failure_free_hours);
            assert_eq!(r.mean_failures, 0.0);
        }
    }

    #[test]
    fn uniform_count_follows_mtbf() {
        let w = toy();
        let p = FailureProcess {
            mtbf_hours: 0.1,
            seed: 3,
            distribution: FailureDistribution::Uniform,
        };
        // 2100 s = 0.5833 h
        assert_eq!(p.positions(&w, 0).unwrap().len(), 6);
        assert_eq!(p.positions(&w, 0).unwrap(), p.positions(&w, 0).unwrap());
        assert_ne!(p.positions(&w, 0).unwrap(), p.positions(&w, 1).unwrap());
    }
}

