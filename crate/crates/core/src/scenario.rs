//! Declarative run configs: an engine setup, a training length and an ordered
//! list of failure injections, executed with recovery and an optional ghost
//! comparison.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{FailurePhase, MachineId};
use crate::error::{Error, Result};
use crate::pipeline::{Engine, EngineConfig, EngineStats};
use crate::planner::{group_machines, GroupPlan, Profile};
use crate::recovery::{recover_with, CascadeFault, RecoveryOptions, RecoveryReport, Strategy};

/// Largest parameter deviation from the ghost run accepted as equivalent.
pub const GHOST_TOLERANCE: f64 = 1e-9;

fn before_update() -> FailurePhase {
    FailurePhase::BeforeUpdate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Injection {
    pub machine: MachineId,
    pub iteration: u64,
    #[serde(default = "before_update")]
    pub phase: FailurePhase,
    #[serde(default)]
    pub cascade: Option<CascadeFault>,
    #[serde(default)]
    pub skip_undo: bool,
    #[serde(default)]
    pub force: Option<Strategy>,
}

/// Derives logging groups from the engine's own profile under a storage cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSettings {
    pub m_max: f64,
    pub slot_seconds: f64,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub engine: EngineConfig,
    pub iterations: u64,
    #[serde(default)]
    pub injections: Vec<Injection>,
    #[serde(default)]
    pub planner: Option<PlannerSettings>,
    #[serde(default)]
    pub compare_ghost: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations: must be >= 1".into()));
        }
        if self.planner.is_some() && self.engine.groups.is_some() {
            return Err(Error::InvalidConfig("planner: conflicts with engine.groups".into()));
        }
        for (k, inj) in self.injections.iter().enumerate() {
            if inj.machine >= self.engine.machines {
                return Err(Error::InvalidConfig(format!(
                    "injections[{k}].machine: {} out of range (machines = {})",
                    inj.machine, self.engine.machines
                )));
            }
            if inj.iteration >= self.iterations {
                return Err(Error::InvalidConfig(format!(
                    "injections[{k}].iteration: {} not below iterations = {}",
                    inj.iteration, self.iterations
                )));
            }
            if let Some(c) = inj.cascade {
                if c.machine >= self.engine.machines || c.machine == inj.machine {
                    return Err(Error::InvalidConfig(format!("injections[{k}].cascade.machine: {} invalid", c.machine)));
                }
            }
        }
        if self.injections.windows(2).any(|w| w[0].iteration > w[1].iteration) {
            return Err(Error::InvalidConfig("injections: must be ordered by iteration".into()));
        }
        Ok(())
    }

    /// Engine config with planner-derived groups filled in.
    pub fn resolved_engine(&self) -> Result<(EngineConfig, Option<GroupPlan>)> {
        let mut engine = self.engine.clone();
        let Some(ps) = &self.planner else {
            return Ok((engine, None));
        };
        let profile = Profile::from_engine(&engine, ps.slot_seconds, ps.bandwidth, ps.m_max)?;
        let plan = group_machines(&profile)?;
        engine.groups = Some(plan.groups.clone());
        Ok((engine, Some(plan)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GhostCheck {
    pub digest: String,
    pub digest_equal: bool,
    pub max_rel_diff: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub iterations: u64,
    pub final_digest: String,
    pub group_plan: Option<GroupPlan>,
    pub recoveries: Vec<RecoveryReport>,
    pub stats: EngineStats,
    pub ghost: Option<GhostCheck>,
}

/// Runs `cfg` under `out_dir`. The cluster lives in `out_dir/cluster`; the
/// report and the per-iteration digests are written next to it.
pub fn run_scenario(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let (engine_cfg, group_plan) = cfg.resolved_engine()?;
    let cluster_dir = out_dir.join("cluster");
    fresh_dir(&cluster_dir)?;
    let mut engine = Engine::new(engine_cfg.clone(), &cluster_dir)?;
    let mut pending: VecDeque<Injection> = cfg.injections.iter().cloned().collect();
    let mut armed: Vec<Injection> = Vec::new();
    let mut recoveries = Vec::new();
    loop {
        while let Some(inj) = pending.front() {
            if armed.iter().any(|a| a.machine == inj.machine) {
                break;
            }
            let inj = pending.pop_front().expect("front exists");
            engine.inject_failure(inj.machine, inj.iteration, inj.phase)?;
            armed.push(inj);
        }
        let Some(events) = engine.run_until(cfg.iterations)? else {
            break;
        };
        let fired: Vec<Injection> = armed
            .iter()
            .filter(|a| events.iter().any(|e| e.machine == a.machine && e.iteration == a.iteration))
            .cloned()
            .collect();
        armed.retain(|a| !fired.contains(a));
        let opts = fired
            .first()
            .map(|inj| RecoveryOptions {
                cascade: inj.cascade,
                skip_undo: inj.skip_undo,
                force: inj.force,
            })
            .unwrap_or_default();
        recoveries.push(recover_with(&mut engine, &opts)?);
    }

    let ghost = if cfg.compare_ghost {
        let ghost_dir = out_dir.join("ghost");
        fresh_dir(&ghost_dir)?;
        let mut g = Engine::new(engine_cfg, &ghost_dir)?;
        g.run_until(cfg.iterations)?;
        let mut max_rel_diff = 0.0f64;
        for (a, b) in engine.workers().iter().zip(g.workers()) {
            max_rel_diff = max_rel_diff.max(a.stage.max_rel_diff(&b.stage)?);
        }
        let digest = g.state_digest();
        Some(GhostCheck {
            digest_equal: digest == engine.state_digest(),
            digest,
            max_rel_diff,
            within_tolerance: max_rel_diff <= GHOST_TOLERANCE,
        })
    } else {
        None
    };

    let report = RunReport {
        name: cfg.name.clone(),
        iterations: engine.next_iteration(),
        final_digest: engine.state_digest(),
        group_plan,
        recoveries,
        stats: engine.stats().clone(),
        ghost,
    };
    write_outputs(out_dir, &engine, &report)?;
    Ok(report)
}

fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))
}

fn write_outputs(out_dir: &Path, engine: &Engine, report: &RunReport) -> Result<()> {
    let mut lines = String::new();
    for (i, d) in engine.trajectory() {
        lines.push_str(&format!("{i} {d}\n"));
    }
    let path = out_dir.join("trajectory.txt");
    fs::write(&path, lines).map_err(|e| Error::storage(&path, e))?;
    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| Error::storage(&path, e))
}
