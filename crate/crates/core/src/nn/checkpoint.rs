//! Binary model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "QMCK" | u16 version | u8 element bytes (4 or 8)
//! u32 depth | u32 blocks | u32 growth | u32 layers | u32 stem | u32 in_channels
//! | u32 input_size | u32 nc | f64 dropout
//! u32 epoch | u8 trained_qf2 (0 = unknown) | u8 has_optimizer
//! u32 n_params × ( u16 name_len | name | u8 rank | rank × u32 dim | values )
//! u32 n_stats × ( u16 name_len | name | u32 len | len values mean | len values var )
//! [ u64 step | per parameter: len × f64 first moment, len × f64 second moment ]
//! u64 checksum: first 8 bytes of SHA-256 over everything before it
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{AdamState, DenseNet, DenseNetConfig, NnError, Param, RunningStats, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"QMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// A network together with its training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenseNet<f32>,
    /// Epochs completed when the checkpoint was written.
    pub epoch: u32,
    /// Second-pass quality of the training data, when known.
    pub trained_qf2: Option<u8>,
    pub optimizer: Option<AdamState>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<(), NnError> {
    let v = u32::try_from(v).map_err(|_| NnError::Checkpoint(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_name(buf: &mut Vec<u8>, name: &str) -> Result<(), NnError> {
    let len = u16::try_from(name.len())
        .map_err(|_| NnError::Checkpoint(format!("name {name:?} too long")))?;
    put_u16(buf, len);
    buf.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_values<T: Scalar>(buf: &mut Vec<u8>, values: &[T]) {
    for v in values {
        buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
}

/// Serializes a checkpoint; the file is replaced atomically.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), NnError> {
    let model = &ck.model;
    let cfg = model.config();
    let mut buf = Vec::with_capacity(model.param_count() * 4 + 4096);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u16(&mut buf, CHECKPOINT_VERSION);
    buf.push(f32::BYTES);
    for v in [
        cfg.depth,
        cfg.num_blocks,
        cfg.growth_rate,
        cfg.layers_per_block,
        cfg.stem_channels,
        cfg.input_channels,
        cfg.input_size,
        cfg.nc_outputs,
    ] {
        put_u32(&mut buf, v)?;
    }
    buf.extend_from_slice(&cfg.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&ck.epoch.to_le_bytes());
    buf.push(ck.trained_qf2.unwrap_or(0));
    buf.push(u8::from(ck.optimizer.is_some()));

    put_u32(&mut buf, model.params().len())?;
    for p in model.params() {
        put_name(&mut buf, &p.name)?;
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            put_u32(&mut buf, d)?;
        }
        put_values(&mut buf, p.value.data());
    }
    put_u32(&mut buf, model.running_stats().len())?;
    for s in model.running_stats() {
        put_name(&mut buf, &s.name)?;
        put_u32(&mut buf, s.mean.len())?;
        put_values(&mut buf, &s.mean);
        put_values(&mut buf, &s.var);
    }
    if let Some(opt) = &ck.optimizer {
        if opt.first.len() != model.params().len() || opt.second.len() != model.params().len() {
            return Err(NnError::Checkpoint(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        buf.extend_from_slice(&opt.step.to_le_bytes());
        for (i, p) in model.params().iter().enumerate() {
            if opt.first[i].len() != p.value.len() || opt.second[i].len() != p.value.len() {
                return Err(NnError::Checkpoint(format!(
                    "optimizer moments for {} have the wrong length",
                    p.name
                )));
            }
            for v in opt.first[i].iter().chain(&opt.second[i]) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let sum = checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());

    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    width: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.buf.len() - self.pos < n {
            return Err(NnError::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, NnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String, NnError> {
        let len = usize::from(self.u16()?);
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<f32>, NnError> {
        let w = usize::from(self.width);
        let bytes = self.take(
            n.checked_mul(w)
                .ok_or_else(|| NnError::Checkpoint("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(w)
            .map(|c| match w {
                4 => f32::from_le_bytes(c.try_into().expect("4 bytes")),
                _ => f64::from_le_bytes(c.try_into().expect("8 bytes")) as f32,
            })
            .collect())
    }
}

/// Reads and verifies a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, NnError> {
    let buf = fs::read(path)?;
    if buf.len() < 12 || &buf[..4] != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let (body, trailer) = buf.split_at(buf.len() - 8);
    if checksum(body) != u64::from_le_bytes(trailer.try_into().expect("8 bytes")) {
        return Err(NnError::Checkpoint("checksum mismatch".into()));
    }
    let mut rd = Reader {
        buf: body,
        pos: 4,
        width: 4,
    };
    let version = rd.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    rd.width = rd.u8()?;
    if rd.width != 4 && rd.width != 8 {
        return Err(NnError::Checkpoint(format!("element width {}", rd.width)));
    }
    let config = DenseNetConfig {
        depth: rd.u32()?,
        num_blocks: rd.u32()?,
        growth_rate: rd.u32()?,
        layers_per_block: rd.u32()?,
        stem_channels: rd.u32()?,
        input_channels: rd.u32()?,
        input_size: rd.u32()?,
        nc_outputs: rd.u32()?,
        dropout_rate: rd.f64()?,
    };
    config.validate()?;
    let epoch = rd.u32()? as u32;
    let trained_qf2 = match rd.u8()? {
        0 => None,
        q => Some(q),
    };
    let has_optimizer = rd.u8()? != 0;

    let n_params = rd.u32()?;
    let mut params = Vec::with_capacity(n_params.min(4096));
    for _ in 0..n_params {
        let name = rd.name()?;
        let rank = usize::from(rd.u8()?);
        let shape = (0..rank).map(|_| rd.u32()).collect::<Result<Vec<_>, _>>()?;
        let data = rd.values(shape.iter().product())?;
        params.push(Param {
            name,
            value: Tensor::new(&shape, data)?,
        });
    }
    let n_stats = rd.u32()?;
    let mut stats = Vec::with_capacity(n_stats.min(4096));
    for _ in 0..n_stats {
        let name = rd.name()?;
        let len = rd.u32()?;
        let mean = rd.values(len)?;
        let var = rd.values(len)?;
        stats.push(RunningStats { name, mean, var });
    }
    let model = DenseNet::from_parts(config, params, stats)
        .map_err(|e| NnError::Checkpoint(format!("incompatible tensors: {e}")))?;
    let optimizer = if has_optimizer {
        let step = rd.u64()?;
        let mut first = Vec::with_capacity(model.params().len());
        let mut second = Vec::with_capacity(model.params().len());
        for p in model.params() {
            let n = p.value.len();
            let read = |rd: &mut Reader| (0..n).map(|_| rd.f64()).collect::<Result<Vec<_>, _>>();
            first.push(read(&mut rd)?);
            second.push(read(&mut rd)?);
        }
        Some(AdamState {
            step,
            first,
            second,
        })
    } else {
        None
    };
    if rd.pos != body.len() {
        return Err(NnError::Checkpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - rd.pos
        )));
    }
    Ok(Checkpoint {
        model,
        epoch,
        trained_qf2,
        optimizer,
    })
}
