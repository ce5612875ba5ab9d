//! Binary patch shards.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "QMDS" | u16 version | u16 patch_h | u16 patch_w | u16 channels | u16 nc | u64 count
//! count × ( u8 qf1 | u8 qf2 | u8 dx | u8 dy | u16 id_len | id bytes
//!           | nc × u16 label | patch_h·patch_w·channels × u8 pixels )
//! ```

use std::fs;
use std::path::Path;

use super::{DatasetError, PatchRecord, PATCH_CHANNELS, PATCH_LEN, PATCH_SIZE};
use crate::jpeg::{GridShift, QTarget};

pub const SHARD_MAGIC: &[u8; 4] = b"QMDS";
pub const SHARD_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 * 5 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u16,
    pub patch_h: u16,
    pub patch_w: u16,
    pub channels: u16,
    pub nc: u16,
    pub record_count: u64,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Serializes `records` to `path`. All records must share one label width.
pub fn write_shard(records: &[PatchRecord], path: &Path) -> Result<ShardHeader, DatasetError> {
    let first = records.first().ok_or(DatasetError::EmptyShard)?;
    let nc = first.nc();
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * (PATCH_LEN + 2 * nc + 32));
    let header = ShardHeader {
        version: SHARD_VERSION,
        patch_h: PATCH_SIZE as u16,
        patch_w: PATCH_SIZE as u16,
        channels: PATCH_CHANNELS as u16,
        nc: nc as u16,
        record_count: records.len() as u64,
    };
    buf.extend_from_slice(SHARD_MAGIC);
    for v in [
        header.version,
        header.patch_h,
        header.patch_w,
        header.channels,
        header.nc,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&header.record_count.to_le_bytes());
    for r in records {
        if r.nc() != nc {
            return Err(DatasetError::Record(format!(
                "mixed label widths {} and {nc} in one shard",
                r.nc()
            )));
        }
        if r.pixels.len() != PATCH_LEN {
            return Err(DatasetError::Record(format!(
                "patch has {} samples, expected {PATCH_LEN}",
                r.pixels.len()
            )));
        }
        let id = r.source_id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| DatasetError::Record("source id longer than 65535 bytes".into()))?;
        buf.extend_from_slice(&[r.qf1, r.qf2, r.shift.dx(), r.shift.dy()]);
        buf.extend_from_slice(&id_len.to_le_bytes());
        buf.extend_from_slice(id);
        for &v in r.label.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.pixels);
    }
    fs::write(path, &buf).map_err(|e| io_err(path, e))?;
    Ok(header)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DatasetError> {
        if self.buf.len() - self.pos < n {
            return Err(DatasetError::Corrupt(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DatasetError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, DatasetError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DatasetError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn parse(buf: &[u8]) -> Result<(ShardHeader, Vec<PatchRecord>), DatasetError> {
    let mut rd = Reader { buf, pos: 0 };
    if rd.take(4, "magic")? != SHARD_MAGIC {
        return Err(DatasetError::Corrupt("bad magic".into()));
    }
    let version = rd.u16("version")?;
    if version != SHARD_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: SHARD_VERSION,
        });
    }
    let header = ShardHeader {
        version,
        patch_h: rd.u16("patch height")?,
        patch_w: rd.u16("patch width")?,
        channels: rd.u16("channels")?,
        nc: rd.u16("nc")?,
        record_count: rd.u64("record count")?,
    };
    if usize::from(header.patch_h) != PATCH_SIZE
        || usize::from(header.patch_w) != PATCH_SIZE
        || usize::from(header.channels) != PATCH_CHANNELS
    {
        return Err(DatasetError::Corrupt(format!(
            "unsupported patch geometry {}x{}x{}",
            header.patch_h, header.patch_w, header.channels
        )));
    }
    let nc = usize::from(header.nc);
    if !(1..=64).contains(&nc) {
        return Err(DatasetError::Corrupt(format!("nc = {nc}")));
    }
    // cheapest possible record bounds the count before allocating
    let min_record = 6 + 2 * nc + PATCH_LEN;
    let remaining = (buf.len() - rd.pos) as u64;
    if header.record_count > remaining / min_record as u64 {
        return Err(DatasetError::Corrupt(format!(
            "header claims {} records but only {remaining} bytes follow",
            header.record_count
        )));
    }
    let mut records = Vec::with_capacity(header.record_count as usize);
    for _ in 0..header.record_count {
        let qf1 = rd.u8("qf1")?;
        let qf2 = rd.u8("qf2")?;
        let dx = rd.u8("dx")?;
        let dy = rd.u8("dy")?;
        let shift = GridShift::new(dx, dy).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
        let id_len = usize::from(rd.u16("source id length")?);
        let source_id = String::from_utf8(rd.take(id_len, "source id")?.to_vec())
            .map_err(|_| DatasetError::Corrupt("source id is not UTF-8".into()))?;
        let mut label = Vec::with_capacity(nc);
        for _ in 0..nc {
            label.push(rd.u16("label")?);
        }
        let pixels = rd.take(PATCH_LEN, "pixels")?.to_vec();
        records.push(PatchRecord {
            pixels,
            label: QTarget::new(label, nc).map_err(|e| DatasetError::Corrupt(e.to_string()))?,
            qf1,
            qf2,
            shift,
            source_id,
        });
    }
    if rd.pos != buf.len() {
        return Err(DatasetError::Corrupt(format!(
            "{} trailing bytes after {} records",
            buf.len() - rd.pos,
            header.record_count
        )));
    }
    Ok((header, records))
}

pub fn read_shard(path: &Path) -> Result<Vec<PatchRecord>, DatasetError> {
    let buf = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(parse(&buf)?.1)
}

/// Reads several shards and concatenates their records in order.
pub fn read_shards<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<PatchRecord>, DatasetError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_shard(p.as_ref())?);
    }
    Ok(all)
}
