use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cluster::{MachineId, WorkerId};
use crate::error::{Error, Result};
use crate::numerics::DType;

use super::format::{header, push_frame, read_log_file, FileKind, LogRecord};

pub const LOG_EXT: &str = "ftlog";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogConfig {
    /// Records per chunk file before it is sealed.
    pub chunk_records: usize,
    /// Payload precision on disk.
    pub dtype: DType,
}

impl Default for LogConfig {
    fn default() -> Self {
        Self {
            chunk_records: 64,
            dtype: DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogTicket {
    Pending { seq: u64 },
    Skipped,
}

/// Per-sender FIFO of records not yet on local disk.
#[derive(Debug, Clone, Default)]
pub struct LogQueue {
    pending: VecDeque<(u64, LogRecord)>,
    next_seq: u64,
    committed_through: Option<u64>,
}

impl LogQueue {
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn committed_through(&self) -> Option<u64> {
        self.committed_through
    }

    pub fn pending_records(&self) -> impl Iterator<Item = &LogRecord> {
        self.pending.iter().map(|(_, r)| r)
    }
}

#[derive(Debug, Clone)]
struct OpenChunk {
    path: PathBuf,
    records: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LogManager {
    cfg: LogConfig,
    queues: BTreeMap<WorkerId, LogQueue>,
    open: BTreeMap<(WorkerId, WorkerId), OpenChunk>,
    next_chunk: BTreeMap<(WorkerId, WorkerId), u32>,
}

pub fn logs_dir(disk: &Path) -> PathBuf {
    disk.join("logs")
}

pub fn chunk_name(sender: WorkerId, receiver: WorkerId, receiver_machine: MachineId, seq: u32) -> String {
    format!("s{sender:04}-r{receiver:04}-m{receiver_machine:03}-{seq:06}.{LOG_EXT}")
}

/// `(sender worker, receiver worker, receiver machine, seq)` from a chunk name.
pub fn parse_chunk_name(name: &str) -> Option<(WorkerId, WorkerId, MachineId, u32)> {
    let stem = name.strip_suffix(&format!(".{LOG_EXT}"))?;
    let mut parts = stem.split('-');
    let s = parts.next()?.strip_prefix('s')?.parse().ok()?;
    let r = parts.next()?.strip_prefix('r')?.parse().ok()?;
    let m = parts.next()?.strip_prefix('m')?.parse().ok()?;
    let q = parts.next()?.parse().ok()?;
    parts.next().is_none().then_some((s, r, m, q))
}

impl LogManager {
    pub fn new(cfg: LogConfig) -> Self {
        Self {
            cfg,
            ..Default::default()
        }
    }

    pub fn config(&self) -> LogConfig {
        self.cfg
    }

    pub fn queue(&self, w: WorkerId) -> Option<&LogQueue> {
        self.queues.get(&w)
    }

    pub fn pending_total(&self) -> usize {
        self.queues.values().map(LogQueue::pending).sum()
    }

    /// Enqueues a record on its sender's queue; the send is not delayed.
    pub fn log_send(&mut self, rec: LogRecord) -> LogTicket {
        let q = self.queues.entry(rec.sender_worker).or_default();
        let seq = q.next_seq;
        q.next_seq += 1;
        q.pending.push_back((seq, rec));
        LogTicket::Pending { seq }
    }

    /// Moves every pending record of `w` into chunk files on `disk`.
    pub fn commit(&mut self, w: WorkerId, disk: &Path) -> Result<Option<u64>> {
        let Some(q) = self.queues.get_mut(&w) else {
            return Ok(None);
        };
        if q.pending.is_empty() {
            return Ok(q.committed_through);
        }
        let dir = logs_dir(disk);
        fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
        let drained: Vec<(u64, LogRecord)> = q.pending.drain(..).collect();
        let mut last = q.committed_through;
        for (seq, rec) in drained {
            let key = (rec.sender_worker, rec.receiver_worker);
            if !self.open.contains_key(&key) {
                let n = self.next_chunk.entry(key).or_insert(0);
                let path = dir.join(chunk_name(key.0, key.1, rec.receiver_machine, *n));
                *n += 1;
                fs::write(&path, header(FileKind::Log)).map_err(|e| Error::storage(&path, e))?;
                self.open.insert(key, OpenChunk { path, records: 0 });
            }
            let chunk = self.open.get_mut(&key).expect("opened above");
            let mut frame = Vec::new();
            push_frame(&mut frame, &rec.encode());
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(&chunk.path)
                .map_err(|e| Error::storage(&chunk.path, e))?;
            f.write_all(&frame).map_err(|e| Error::storage(&chunk.path, e))?;
            chunk.records += 1;
            if chunk.records >= self.cfg.chunk_records {
                self.open.remove(&key);
            }
            last = Some(seq);
        }
        let q = self.queues.get_mut(&w).expect("present");
        q.committed_through = last;
        Ok(last)
    }

    /// Closes every open chunk; later records start new files.
    pub fn seal_all(&mut self) {
        self.open.clear();
    }

    /// Volatile loss on a failed machine: pending records vanish and its open
    /// chunks are gone with the disk.
    pub fn discard_workers(&mut self, workers: &[WorkerId]) {
        for w in workers {
            if let Some(q) = self.queues.get_mut(w) {
                q.pending.clear();
            }
        }
        self.open.retain(|(s, _), _| !workers.contains(s));
    }

    pub fn drop_pending(&mut self) {
        for q in self.queues.values_mut() {
            q.pending.clear();
        }
    }
}

fn list_chunks(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::storage(dir, e))? {
        let path = entry.map_err(|e| Error::storage(dir, e))?.path();
        if path.extension().is_some_and(|x| x == LOG_EXT) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn read_chunk(path: &Path) -> Result<Vec<LogRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
    read_log_file(&bytes).map_err(|e| match e {
        Error::CorruptLog(msg) => Error::CorruptLog(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

/// Copies committed chunks from a machine's disk into the store's log area.
pub fn publish_logs(disk: &Path, store_logs: &Path) -> Result<usize> {
    fs::create_dir_all(store_logs).map_err(|e| Error::storage(store_logs, e))?;
    let mut n = 0;
    for src in list_chunks(&logs_dir(disk))? {
        let bytes = fs::read(&src).map_err(|e| Error::storage(&src, e))?;
        let dst = store_logs.join(src.file_name().expect("chunk has a name"));
        atomic_write(&dst, &bytes)?;
        n += 1;
    }
    Ok(n)
}

/// Records addressed to any of `receivers` with iteration in `[from, to)`,
/// sorted by (iteration, mb, direction, sender).
pub fn fetch_logs(
    store_logs: &Path,
    receivers: &BTreeSet<MachineId>,
    from: u64,
    to: u64,
) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for path in list_chunks(store_logs)? {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let Some((_, _, rm, _)) = parse_chunk_name(name) else {
            continue;
        };
        if !receivers.contains(&rm) {
            continue;
        }
        out.extend(
            read_chunk(&path)?
                .into_iter()
                .filter(|r| receivers.contains(&r.receiver_machine) && (from..to).contains(&r.iteration)),
        );
    }
    out.sort_by_key(LogRecord::key);
    Ok(out)
}

/// Removes chunks whose newest record precedes iteration `c`.
pub fn gc_logs(dir: &Path, c: u64) -> Result<usize> {
    let mut deleted = 0;
    for path in list_chunks(dir)? {
        let recs = read_chunk(&path)?;
        if recs.iter().map(|r| r.iteration).max().is_none_or(|m| m < c) {
            fs::remove_file(&path).map_err(|e| Error::storage(&path, e))?;
            deleted += 1;
        }
    }
    Ok(deleted)
}

/// Drops every record with iteration `>= target`; those iterations will be
/// executed again.
pub fn truncate_logs(dir: &Path, target: u64) -> Result<usize> {
    let mut dropped = 0;
    for path in list_chunks(dir)? {
        let recs = read_chunk(&path)?;
        let keep: Vec<&LogRecord> = recs.iter().filter(|r| r.iteration < target).collect();
        if keep.len() == recs.len() {
            continue;
        }
        dropped += recs.len() - keep.len();
        if keep.is_empty() {
            fs::remove_file(&path).map_err(|e| Error::storage(&path, e))?;
        } else {
            let mut bytes = header(FileKind::Log).to_vec();
            for r in keep {
                push_frame(&mut bytes, &r.encode());
            }
            atomic_write(&path, &bytes)?;
        }
    }
    Ok(dropped)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogVolume {
    pub chunks: usize,
    pub records: usize,
    pub payload_bytes: u64,
    pub min_iteration: Option<u64>,
    pub max_iteration: Option<u64>,
}

pub fn log_volume(dir: &Path) -> Result<LogVolume> {
    let mut v = LogVolume::default();
    for path in list_chunks(dir)? {
        v.chunks += 1;
        for r in read_chunk(&path)? {
            v.records += 1;
            v.payload_bytes += r.payload.len() as u64;
            v.min_iteration = Some(v.min_iteration.map_or(r.iteration, |m| m.min(r.iteration)));
            v.max_iteration = Some(v.max_iteration.map_or(r.iteration, |m| m.max(r.iteration)));
        }
    }
    Ok(v)
}

/// `(path, max iteration)` of every chunk in `dir`.
pub fn chunk_spans(dir: &Path) -> Result<Vec<(PathBuf, u64)>> {
    let mut out = Vec::new();
    for path in list_chunks(dir)? {
        let max = read_chunk(&path)?.iter().map(|r| r.iteration).max().unwrap_or(0);
        out.push((path, max));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::Direction;
    use crate::Tensor;

    fn rec(iter: u64, mb: usize, rm: MachineId) -> LogRecord {
        LogRecord::from_tensor(
            (0, rm),
            (1, 2),
            iter,
            mb,
            Direction::Activation,
            &Tensor::seeded_fill(&[2], iter * 10 + mb as u64).unwrap(),
            DType::F64,
        )
    }

    #[test]
    fn names_round_trip() {
        let n = chunk_name(3, 4, 2, 17);
        assert_eq!(n, "s0003-r0004-m002-000017.ftlog");
        assert_eq!(parse_chunk_name(&n), Some((3, 4, 2, 17)));
        assert_eq!(parse_chunk_name("x.ftlog"), None);
    }

    #[test]
    fn commit_chunks_publish_fetch() {
        let root = tempfile::tempdir().unwrap();
        let disk = root.path().join("m0");
        let store = root.path().join("store");
        let mut lm = LogManager::new(LogConfig {
            chunk_records: 3,
            dtype: DType::F64,
        });
        assert_eq!(lm.commit(1, &disk).unwrap(), None);
        for i in 0..4 {
            for mb in 0..2 {
                lm.log_send(rec(i, mb, 1));
            }
        }
        assert_eq!(lm.queue(1).unwrap().pending(), 8);
        assert_eq!(lm.commit(1, &disk).unwrap(), Some(7));
        assert_eq!(lm.queue(1).unwrap().pending(), 0);
        let vol = log_volume(&logs_dir(&disk)).unwrap();
        assert_eq!((vol.chunks, vol.records), (3, 8));

        assert_eq!(publish_logs(&disk, &store).unwrap(), 3);
        let all = fetch_logs(&store, &[1].into(), 0, 10).unwrap();
        assert_eq!(all.len(), 8);
        assert_eq!(all[0], rec(0, 0, 1));
        assert!(fetch_logs(&store, &[2].into(), 0, 10).unwrap().is_empty());
        assert_eq!(fetch_logs(&store, &[1].into(), 1, 3).unwrap().len(), 4);
    }

    #[test]
    fn gc_and_truncate() {
        let root = tempfile::tempdir().unwrap();
        let disk = root.path().join("m0");
        let mut lm = LogManager::new(LogConfig {
            chunk_records: 2,
            dtype: DType::F64,
        });
        for i in 0..4 {
            lm.log_send(rec(i, 0, 1));
            lm.log_send(rec(i, 1, 1));
        }
        lm.commit(1, &disk).unwrap();
        let dir = logs_dir(&disk);
        assert_eq!(gc_logs(&dir, 2).unwrap(), 2);
        assert_eq!(gc_logs(&dir, 2).unwrap(), 0);
        assert!(chunk_spans(&dir).unwrap().iter().all(|(_, m)| *m >= 2));
        assert_eq!(truncate_logs(&dir, 3).unwrap(), 2);
        assert_eq!(log_volume(&dir).unwrap().max_iteration, Some(2));
    }

    #[test]
    fn discard_loses_pending_only() {
        let root = tempfile::tempdir().unwrap();
        let mut lm = LogManager::new(LogConfig::default());
        lm.log_send(rec(0, 0, 1));
        lm.commit(1, root.path()).unwrap();
        lm.log_send(rec(0, 1, 1));
        lm.discard_workers(&[1]);
        assert_eq!(lm.queue(1).unwrap().pending(), 0);
        assert_eq!(lm.queue(1).unwrap().committed_through(), Some(0));
        assert_eq!(log_volume(&logs_dir(root.path())).unwrap().records, 1);
    }
}
