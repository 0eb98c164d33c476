//! Upstream-backup logging, global checkpoints and garbage collection, all
//! backed by plain directories.
//!
//! Senders log what they push across a logged machine boundary. Records wait
//! in a volatile per-sender queue and reach the sender's local disk when the
//! sender next idles in a bubble slot (or on an explicit flush). After a
//! failure the survivors flush and publish their chunks to the global store,
//! where the replacement fetches the records addressed to it.

mod checkpoint;
pub mod format;
mod log;

use std::path::{Path, PathBuf};

pub use checkpoint::{
    committed_checkpoints, decode_worker_state, encode_worker_state, latest_checkpoint, load_checkpoint,
    load_manifest, write_checkpoint, CheckpointManifest, ManifestEntry, MANIFEST,
};
pub use format::LogRecord;
pub use log::{
    chunk_name, chunk_spans, fetch_logs, gc_logs, log_volume, logs_dir, parse_chunk_name, publish_logs,
    truncate_logs, LogConfig, LogManager, LogQueue, LogTicket, LogVolume,
};

use crate::cluster::MachineId;

pub fn store_logs(store: &Path) -> PathBuf {
    store.join("logs")
}

/// Which machine boundaries are logged: those between different groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    group_of: Vec<usize>,
    groups: Vec<Vec<MachineId>>,
}

impl GroupLayout {
    /// Every machine its own group: all inter-machine traffic is logged.
    pub fn singletons(n: usize) -> Self {
        Self {
            group_of: (0..n).collect(),
            groups: (0..n).map(|m| vec![m]).collect(),
        }
    }

    /// One group: nothing is logged.
    pub fn single(n: usize) -> Self {
        Self {
            group_of: vec![0; n],
            groups: vec![(0..n).collect()],
        }
    }

    pub fn from_groups(n: usize, groups: &[Vec<MachineId>]) -> crate::Result<Self> {
        let mut group_of = vec![usize::MAX; n];
        for (g, members) in groups.iter().enumerate() {
            for &m in members {
                if m >= n || group_of[m] != usize::MAX {
                    return Err(crate::Error::InvalidConfig(format!(
                        "machine {m} is unknown or listed in two groups"
                    )));
                }
                group_of[m] = g;
            }
        }
        if let Some(m) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(crate::Error::InvalidConfig(format!("machine {m} belongs to no group")));
        }
        Ok(Self {
            group_of,
            groups: groups.to_vec(),
        })
    }

    pub fn group_of(&self, m: MachineId) -> usize {
        self.group_of[m]
    }

    pub fn members(&self, g: usize) -> &[MachineId] {
        &self.groups[g]
    }

    pub fn groups(&self) -> &[Vec<MachineId>] {
        &self.groups
    }

    pub fn is_logged(&self, a: MachineId, b: MachineId) -> bool {
        self.group_of[a] != self.group_of[b]
    }
}
