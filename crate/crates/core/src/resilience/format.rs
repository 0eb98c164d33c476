//! On-disk encoding shared by log chunks, checkpoint blobs and manifests.
//!
//! Every file opens with an 8-byte header:
//!
//! | bytes | field                                          |
//! |-------|------------------------------------------------|
//! | 0..4  | magic `FTRN`                                   |
//! | 4..6  | version, u16 LE (= 1)                          |
//! | 6     | kind: 1 log chunk, 2 checkpoint blob, 3 manifest |
//! | 7     | reserved (0)                                   |
//!
//! followed by frames `u32 LE body length | body | u32 LE CRC32(body)`.

use crate::cluster::{Direction, MachineId, WorkerId};
use crate::error::{Error, Result};
use crate::numerics::DType;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"FTRN";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Log = 1,
    CheckpointBlob = 2,
    Manifest = 3,
}

pub fn header(kind: FileKind) -> [u8; HEADER_LEN] {
    let v = VERSION.to_le_bytes();
    [MAGIC[0], MAGIC[1], MAGIC[2], MAGIC[3], v[0], v[1], kind as u8, 0]
}

/// Validates the header and returns the frame area.
pub fn check_header(bytes: &[u8], kind: FileKind) -> Result<&[u8]> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::CorruptLog("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::CorruptLog(format!("unsupported version {version}")));
    }
    if bytes[6] != kind as u8 {
        return Err(Error::CorruptLog(format!(
            "file kind {} where {} expected",
            bytes[6], kind as u8
        )));
    }
    Ok(&bytes[HEADER_LEN..])
}

pub fn push_frame(out: &mut Vec<u8>, body: &[u8]) {
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(body);
    out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
}

/// Splits a frame area into CRC-checked bodies.
pub fn frames(mut area: &[u8]) -> Result<Vec<&[u8]>> {
    let mut out = Vec::new();
    while !area.is_empty() {
        if area.len() < 4 {
            return Err(Error::CorruptLog("truncated frame length".into()));
        }
        let len = u32::from_le_bytes(area[..4].try_into().expect("4 bytes")) as usize;
        if area.len() < 8 + len {
            return Err(Error::CorruptLog("truncated frame".into()));
        }
        let body = &area[4..4 + len];
        let crc = u32::from_le_bytes(area[4 + len..8 + len].try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::CorruptLog("checksum mismatch".into()));
        }
        out.push(body);
        area = &area[8 + len..];
    }
    Ok(out)
}

/// Little-endian cursor over a frame body.
pub struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::CorruptLog("body ends early".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// `dtype u8 | ndim u8 | dims u32 x ndim | payload_len u32 | payload`
    pub fn tensor(&mut self) -> Result<Tensor> {
        let dtype = DType::from_tag(self.u8()?).ok_or_else(|| Error::CorruptLog("unknown dtype".into()))?;
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len = self.u32()? as usize;
        let payload = self.take(len)?;
        Tensor::from_le_bytes(shape, dtype, payload)
    }
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.push(DType::F64.tag());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        put_u32(out, d as u32);
    }
    let bytes = t.to_le_bytes();
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(&bytes);
}

/// One logged inter-machine message.
///
/// Body layout (all LE): sender_machine u32, receiver_machine u32,
/// sender_worker u32, receiver_worker u32, iteration u64, mb u32,
/// direction u8 (0 activation, 1 gradient), dtype u8 (0 f64, 1 f32),
/// ndim u8, reserved u8, dims u32 x ndim, payload_len u32, payload.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub sender_machine: MachineId,
    pub receiver_machine: MachineId,
    pub sender_worker: WorkerId,
    pub receiver_worker: WorkerId,
    pub iteration: u64,
    pub mb: usize,
    pub direction: Direction,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl LogRecord {
    pub fn from_tensor(
        (sender_machine, receiver_machine): (MachineId, MachineId),
        (sender_worker, receiver_worker): (WorkerId, WorkerId),
        iteration: u64,
        mb: usize,
        direction: Direction,
        payload: &Tensor,
        dtype: DType,
    ) -> Self {
        let bytes = match dtype {
            DType::F64 => payload.to_le_bytes(),
            DType::F32 => payload.cast::<f32>().to_le_bytes(),
        };
        Self {
            sender_machine,
            receiver_machine,
            sender_worker,
            receiver_worker,
            iteration,
            mb,
            direction,
            dtype,
            shape: payload.shape().to_vec(),
            payload: bytes,
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Tensor::from_le_bytes(self.shape.clone(), self.dtype, &self.payload)
    }

    /// Replay order key.
    pub fn key(&self) -> (u64, usize, Direction, WorkerId) {
        (self.iteration, self.mb, self.direction, self.sender_worker)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(40 + 4 * self.shape.len() + self.payload.len());
        put_u32(&mut b, self.sender_machine as u32);
        put_u32(&mut b, self.receiver_machine as u32);
        put_u32(&mut b, self.sender_worker as u32);
        put_u32(&mut b, self.receiver_worker as u32);
        put_u64(&mut b, self.iteration);
        put_u32(&mut b, self.mb as u32);
        b.push(self.direction.tag());
        b.push(self.dtype.tag());
        b.push(self.shape.len() as u8);
        b.push(0);
        for &d in &self.shape {
            put_u32(&mut b, d as u32);
        }
        put_u32(&mut b, self.payload.len() as u32);
        b.extend_from_slice(&self.payload);
        b
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut r = Reader::new(body);
        let sender_machine = r.u32()? as usize;
        let receiver_machine = r.u32()? as usize;
        let sender_worker = r.u32()? as usize;
        let receiver_worker = r.u32()? as usize;
        let iteration = r.u64()?;
        let mb = r.u32()? as usize;
        let direction =
            Direction::from_tag(r.u8()?).ok_or_else(|| Error::CorruptLog("unknown direction".into()))?;
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::CorruptLog("unknown dtype".into()))?;
        let ndim = r.u8()? as usize;
        r.u8()?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len = r.u32()? as usize;
        let payload = r.take(len)?.to_vec();
        if !r.is_empty() {
            return Err(Error::CorruptLog("trailing bytes in record".into()));
        }
        let rec = Self {
            sender_machine,
            receiver_machine,
            sender_worker,
            receiver_worker,
            iteration,
            mb,
            direction,
            dtype,
            shape,
            payload,
        };
        let expected: usize = rec.shape.iter().product::<usize>() * dtype.size();
        if expected != rec.payload.len() {
            return Err(Error::CorruptLog("payload length does not match shape".into()));
        }
        Ok(rec)
    }
}

/// Parses a whole log chunk file.
pub fn read_log_file(bytes: &[u8]) -> Result<Vec<LogRecord>> {
    frames(check_header(bytes, FileKind::Log)?)?
        .into_iter()
        .map(LogRecord::decode)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> LogRecord {
        LogRecord::from_tensor(
            (0, 1),
            (1, 2),
            7,
            3,
            Direction::Gradient,
            &Tensor::seeded_fill(&[2, 3], 4).unwrap(),
            DType::F64,
        )
    }

    #[test]
    fn record_round_trip() {
        let rec = record();
        let mut file = header(FileKind::Log).to_vec();
        push_frame(&mut file, &rec.encode());
        push_frame(&mut file, &rec.encode());
        let back = read_log_file(&file).unwrap();
        assert_eq!(back, vec![rec.clone(), rec.clone()]);
        assert!(back[0].tensor().unwrap().bit_eq(&Tensor::seeded_fill(&[2, 3], 4).unwrap()));
    }

    #[test]
    fn header_layout() {
        assert_eq!(header(FileKind::Log), [b'F', b'T', b'R', b'N', 1, 0, 1, 0]);
        assert!(check_header(&header(FileKind::Log), FileKind::Manifest).is_err());
    }

    #[test]
    fn corruption_detected() {
        let mut file = header(FileKind::Log).to_vec();
        push_frame(&mut file, &record().encode());
        let n = file.len();
        file[n - 10] ^= 0x40;
        assert!(matches!(read_log_file(&file), Err(Error::CorruptLog(_))));
        let mut short = header(FileKind::Log).to_vec();
        push_frame(&mut short, &record().encode());
        short.truncate(short.len() - 2);
        assert!(matches!(read_log_file(&short), Err(Error::CorruptLog(_))));
    }

    #[test]
    fn f32_payloads() {
        let t = Tensor::seeded_fill(&[4], 9).unwrap();
        let rec = LogRecord::from_tensor((0, 1), (0, 1), 0, 0, Direction::Activation, &t, DType::F32);
        assert_eq!(rec.payload.len(), 16);
        let back = LogRecord::decode(&rec.encode()).unwrap().tensor().unwrap();
        assert!(back.max_rel_diff(&t).unwrap() < 1e-6);
    }
}
