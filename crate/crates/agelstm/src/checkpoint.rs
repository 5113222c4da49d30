//! Versioned binary checkpoints.
//!
//! Layout: magic `AGLS`, u32 version, length-prefixed config text, u64
//! epoch, RNG state (32-byte seed + u128 word position), then three tensor
//! sections (parameters, buffers, optimizer momentum). Each tensor record is
//! name length + bytes, rank, extents as 64-bit little-endian, then values
//! as 32-bit little-endian floats.

use crate::config::{load_config, FullConfig};
use crate::error::{Error, Result};
use crate::model::AgeModel;
use crate::tensor::Tensor;
use crate::trainer::Stage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AGLS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

fn write_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::CheckpointTruncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            if name_len > 4096 {
                return Err(Error::CheckpointShape(format!("implausible name length {name_len}")));
            }
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointShape("tensor name is not UTF-8".into()))?;
            let rank = self.u32()? as usize;
            if rank > 8 {
                return Err(Error::CheckpointShape(format!("implausible rank {rank} for {name}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let e = self.u64()? as usize;
                numel = numel.saturating_mul(e);
                shape.push(e);
            }
            if numel > (1 << 30) {
                return Err(Error::CheckpointShape(format!("implausible size for {name}")));
            }
            let raw = self.take(4 * numel)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(ckpt.config_text.len() as u64).to_le_bytes());
    out.extend_from_slice(ckpt.config_text.as_bytes());
    out.extend_from_slice(&ckpt.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.rng.seed);
    out.extend_from_slice(&ckpt.rng.word_pos.to_le_bytes());
    write_tensors(&mut out, &ckpt.params);
    write_tensors(&mut out, &ckpt.buffers);
    write_tensors(&mut out, &ckpt.momentum);
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Structural load plus shape validation against the embedded config.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { buf: &bytes };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::CheckpointVersion { found: 0, expected: VERSION });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let cfg_len = r.u64()? as usize;
    if cfg_len > (1 << 20) {
        return Err(Error::CheckpointShape("implausible config length".into()));
    }
    let config_text = String::from_utf8(r.take(cfg_len)?.to_vec())
        .map_err(|_| Error::CheckpointShape("config snapshot is not UTF-8".into()))?;
    let epoch = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = r.u128()?;
    let params = r.tensors()?;
    let buffers = r.tensors()?;
    let momentum = r.tensors()?;
    if !r.buf.is_empty() {
        return Err(Error::CheckpointShape(format!("{} trailing bytes", r.buf.len())));
    }
    let ckpt = Checkpoint {
        config_text,
        epoch,
        rng: RngState { seed, word_pos },
        params,
        buffers,
        momentum,
    };
    // shape validation against the config snapshot
    model_from_checkpoint(&ckpt)?;
    Ok(ckpt)
}

fn fill_named(target: &mut AgeModel, source: &[(String, Tensor)], what: &str, buffers: bool) -> Result<()> {
    let lookup = |name: &str| source.iter().find(|(n, _)| n == name);
    let mut missing = Vec::new();
    let mut fill = |name: String, t: &mut Tensor| {
        match lookup(&name) {
            None => missing.push(name),
            Some((_, src)) => {
                if src.shape() != t.shape() {
                    missing.push(format!("{name} (shape {:?} vs {:?})", src.shape(), t.shape()));
                } else {
                    t.data_mut().copy_from_slice(src.data());
                }
            }
        }
    };
    if buffers {
        target.visit_buffers_mut(&mut fill);
    } else {
        target.visit_params_mut(&mut fill);
    }
    if !missing.is_empty() {
        return Err(Error::CheckpointShape(format!(
            "{what} mismatch against config: {}",
            missing.join(", ")
        )));
    }
    Ok(())
}

/// Rebuild the model a checkpoint describes and load its tensors.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(AgeModel, FullConfig)> {
    let full = load_config(&ckpt.config_text, &[])?;
    let mut rng = ChaCha8Rng::seed_from_u64(full.train.seed);
    let mut model = AgeModel::new(&full.model_config(), &mut rng)?;
    if ckpt.params.len() != model.named_params().len() {
        return Err(Error::CheckpointShape(format!(
            "checkpoint has {} parameters, config implies {}",
            ckpt.params.len(),
            model.named_params().len()
        )));
    }
    fill_named(&mut model, &ckpt.params, "parameter", false)?;
    fill_named(&mut model, &ckpt.buffers, "buffer", true)?;
    if full.train.stage == Stage::Local {
        model.freeze_global();
    }
    Ok((model, full))
}

/// Snapshot the model (and optimizer momentum) into a checkpoint.
pub fn checkpoint_of(
    model: &AgeModel,
    config_text: String,
    epoch: u64,
    rng: &ChaCha8Rng,
    momentum: &[(String, Vec<f32>)],
) -> Checkpoint {
    let mut params = Vec::new();
    model.visit_params(&mut |n, t| params.push((n, t.clone())));
    let mut buffers = Vec::new();
    model.visit_buffers(&mut |n, t| buffers.push((n, t.clone())));
    let momentum = momentum
        .iter()
        .map(|(n, v)| (n.clone(), Tensor::new(vec![v.len()], v.clone()).unwrap()))
        .collect();
    Checkpoint {
        config_text,
        epoch,
        rng: RngState::capture(rng),
        params,
        buffers,
        momentum,
    }
}
