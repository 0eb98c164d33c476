use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::cluster::WorkerId;
use crate::error::{Error, Result};
use crate::optimizers::ParamBlock;
use crate::Stage;

use super::format::{check_header, frames, header, push_frame, put_tensor, put_u32, put_u64, FileKind, Reader};

pub const MANIFEST: &str = "MANIFEST";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub worker: WorkerId,
    pub file: String,
    pub crc: u32,
}

/// Visible only once every blob it names has been written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckpointManifest {
    pub iteration: u64,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub dir: PathBuf,
}

pub fn ckpt_root(store: &Path) -> PathBuf {
    store.join("ckpt")
}

fn ckpt_dir(store: &Path, iteration: u64) -> PathBuf {
    ckpt_root(store).join(format!("{iteration:08}"))
}

fn put_block(out: &mut Vec<u8>, b: &ParamBlock<f64>) {
    put_tensor(out, &b.x);
    put_tensor(out, &b.g);
    put_tensor(out, &b.m);
    put_tensor(out, &b.v);
    match &b.v_max {
        Some(t) => {
            out.push(1);
            put_tensor(out, t);
        }
        None => out.push(0),
    }
    put_u64(out, b.t);
    out.push(b.updated as u8);
    put_u32(out, b.saved_scalars.len() as u32);
    for s in &b.saved_scalars {
        put_u64(out, s.to_bits());
    }
}

fn read_block(r: &mut Reader<'_>) -> Result<ParamBlock<f64>> {
    let x = r.tensor()?;
    let g = r.tensor()?;
    let m = r.tensor()?;
    let v = r.tensor()?;
    let v_max = match r.u8()? {
        0 => None,
        _ => Some(r.tensor()?),
    };
    let t = r.u64()?;
    let updated = r.u8()? != 0;
    let n = r.u32()? as usize;
    let mut saved_scalars = Vec::with_capacity(n);
    for _ in 0..n {
        saved_scalars.push(r.f64()?);
    }
    Ok(ParamBlock {
        x,
        g,
        m,
        v,
        v_max,
        t,
        saved_scalars,
        updated,
    })
}

/// Blob layout (one frame): worker u32, iteration u64, block count u32, then
/// per block x, g, m, v, v_max flag (+tensor), t u64, updated u8, saved
/// scalar count u32 and the scalars as f64 bits.
pub fn encode_worker_state(worker: WorkerId, iteration: u64, stage: &Stage) -> Vec<u8> {
    let mut body = Vec::new();
    put_u32(&mut body, worker as u32);
    put_u64(&mut body, iteration);
    put_u32(&mut body, stage.blocks().count() as u32);
    for b in stage.blocks() {
        put_block(&mut body, b);
    }
    let mut out = header(FileKind::CheckpointBlob).to_vec();
    push_frame(&mut out, &body);
    out
}

/// Restores blocks into `into`, which must have the same topology.
pub fn decode_worker_state(bytes: &[u8], into: &mut Stage) -> Result<(WorkerId, u64)> {
    let fr = frames(check_header(bytes, FileKind::CheckpointBlob)?)?;
    let [body] = fr.as_slice() else {
        return Err(Error::CorruptLog("checkpoint blob must hold one frame".into()));
    };
    let mut r = Reader::new(body);
    let worker = r.u32()? as usize;
    let iteration = r.u64()?;
    let n = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n);
    for _ in 0..n {
        blocks.push(read_block(&mut r)?);
    }
    if blocks.len() != into.blocks().count() {
        return Err(Error::CorruptLog(format!(
            "blob holds {} blocks, stage has {}",
            blocks.len(),
            into.blocks().count()
        )));
    }
    for (dst, src) in into.blocks().zip(&blocks) {
        dst.x.ensure_same_shape(&src.x)?;
    }
    for (dst, src) in into.blocks_mut().zip(blocks) {
        *dst = src;
    }
    Ok((worker, iteration))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::storage(path, e))
}

/// Writes all blobs, then the manifest. With `torn_after = Some(k)` the writer
/// "crashes" after `k` blobs and no manifest appears.
pub fn write_checkpoint(
    store: &Path,
    iteration: u64,
    seed: u64,
    states: &[(WorkerId, u64, &Stage)],
    torn_after: Option<usize>,
) -> Result<CheckpointManifest> {
    let dir = ckpt_dir(store, iteration);
    fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e))?;
    let stale = dir.join(MANIFEST);
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| Error::storage(&stale, e))?;
    }
    let mut entries = Vec::with_capacity(states.len());
    for (i, (w, it, stage)) in states.iter().enumerate() {
        if torn_after == Some(i) {
            return Err(Error::TornWrite(i));
        }
        let file = format!("worker-{w:04}.bin");
        let bytes = encode_worker_state(*w, *it, stage);
        write_file(&dir.join(&file), &bytes)?;
        entries.push(ManifestEntry {
            worker: *w,
            file,
            crc: crc32fast::hash(&bytes),
        });
    }
    if torn_after.is_some_and(|k| k >= states.len()) {
        return Err(Error::TornWrite(states.len()));
    }
    let mut body = Vec::new();
    put_u64(&mut body, iteration);
    put_u64(&mut body, seed);
    put_u32(&mut body, entries.len() as u32);
    for e in &entries {
        put_u32(&mut body, e.worker as u32);
        put_u32(&mut body, e.crc);
        put_u32(&mut body, e.file.len() as u32);
        body.extend_from_slice(e.file.as_bytes());
    }
    let mut bytes = header(FileKind::Manifest).to_vec();
    push_frame(&mut bytes, &body);
    write_file(&dir.join(MANIFEST), &bytes)?;
    Ok(CheckpointManifest {
        iteration,
        seed,
        entries,
        dir,
    })
}

pub fn load_manifest(store: &Path, iteration: u64) -> Result<CheckpointManifest> {
    let dir = ckpt_dir(store, iteration);
    let path = dir.join(MANIFEST);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::NoCheckpoint(Some(iteration))),
        Err(e) => return Err(Error::storage(&path, e)),
    };
    let fr = frames(check_header(&bytes, FileKind::Manifest)?)?;
    let [body] = fr.as_slice() else {
        return Err(Error::CorruptLog("manifest must hold one frame".into()));
    };
    let mut r = Reader::new(body);
    let it = r.u64()?;
    let seed = r.u64()?;
    let n = r.u32()? as usize;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let worker = r.u32()? as usize;
        let crc = r.u32()?;
        let len = r.u32()? as usize;
        let file = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::CorruptLog("manifest file name is not utf-8".into()))?;
        entries.push(ManifestEntry { worker, file, crc });
    }
    if it != iteration {
        return Err(Error::CorruptLog(format!("manifest in {iteration:08} claims {it}")));
    }
    Ok(CheckpointManifest {
        iteration,
        seed,
        entries,
        dir,
    })
}

/// Iterations with a committed manifest, ascending.
pub fn committed_checkpoints(store: &Path) -> Result<Vec<u64>> {
    let root = ckpt_root(store);
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&root).map_err(|e| Error::storage(&root, e))? {
        let entry = entry.map_err(|e| Error::storage(&root, e))?;
        let Some(it) = entry.file_name().to_str().and_then(|n| n.parse::<u64>().ok()) else {
            continue;
        };
        if entry.path().join(MANIFEST).exists() {
            out.push(it);
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Newest committed checkpoint at or before `at_most`.
pub fn latest_checkpoint(store: &Path, at_most: u64) -> Result<CheckpointManifest> {
    let it = committed_checkpoints(store)?
        .into_iter()
        .rev()
        .find(|&c| c <= at_most)
        .ok_or(Error::NoCheckpoint(None))?;
    load_manifest(store, it)
}

/// Loads one worker's blob into `into`; returns the stored iteration.
pub fn load_checkpoint(manifest: &CheckpointManifest, worker: WorkerId, into: &mut Stage) -> Result<u64> {
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.worker == worker)
        .ok_or_else(|| Error::CorruptLog(format!("manifest has no entry for worker {worker}")))?;
    let path = manifest.dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::storage(&path, e))?;
    if crc32fast::hash(&bytes) != entry.crc {
        return Err(Error::CorruptLog(format!("{} fails its manifest checksum", path.display())));
    }
    let (w, it) = decode_worker_state(&bytes, into)?;
    if w != worker {
        return Err(Error::CorruptLog(format!("blob for worker {w} filed under {worker}")));
    }
    Ok(it)
}
