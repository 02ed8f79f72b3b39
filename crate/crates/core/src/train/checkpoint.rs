//! Binary checkpoint: `GRDN`, `u32` version, `u64` header length, JSON
//! header, then the payload. All integers and floats are little-endian.
//!
//! The payload holds, in checkpoint order (stem, blocks by `(i, j)`, head;
//! names sorted within each group): every parameter as `f32`, every
//! batch-normalization buffer as `f32` (running mean then running variance),
//! then every first moment as `f64`, then every second moment as `f64`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{OptimState, TrainConfig, Trainer};
use crate::grid::{GridError, GridModel, GridSpec, ParamEntry};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GRDN";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint payload digest does not match its header")]
    Corrupt,
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint does not match the grid{}: {detail}", block.map(|(i, j)| format!(" at block ({i}, {j})")).unwrap_or_default())]
    Mismatch {
        block: Option<(usize, usize)>,
        detail: String,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: GridSpec,
    input_hw: (usize, usize),
    params: Vec<ParamEntry>,
    buffers: Vec<(String, usize)>,
    optimizer: OptimizerHeader,
    train: TrainConfig,
    epoch: usize,
    global_step: u64,
    payload_bytes: u64,
    payload_sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    cfg: super::AdamConfig,
    base_lr: f64,
    t: u64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: GridModel<f32>,
    pub optim: OptimState,
    pub train: TrainConfig,
    pub epoch: usize,
    pub global_step: u64,
}

impl Checkpoint {
    pub fn into_trainer(self) -> Trainer {
        Trainer {
            model: self.model,
            optim: self.optim,
            cfg: self.train,
            epoch: self.epoch,
            global_step: self.global_step,
        }
    }

    /// Rejects a checkpoint whose grid differs from `spec`, naming the first
    /// block whose parameters disagree.
    pub fn check_spec(&self, spec: &GridSpec) -> Result<(), CheckpointError> {
        let expected = GridModel::<f32>::build(spec, self.model.input_hw(), 0)?;
        let want = ordered_table(&expected);
        let have = ordered_table(&self.model);
        for (w, h) in want.iter().zip(&have) {
            if w != h {
                let name = if w.name <= h.name { &w.name } else { &h.name };
                return Err(CheckpointError::Mismatch {
                    block: block_of(name),
                    detail: format!("expected {} {:?}, found {} {:?}", w.name, w.shape, h.name, h.shape),
                });
            }
        }
        if want.len() != have.len() {
            let extra = if want.len() > have.len() { &want[have.len()] } else { &have[want.len()] };
            return Err(CheckpointError::Mismatch {
                block: block_of(&extra.name),
                detail: format!("parameter {} is only on one side", extra.name),
            });
        }
        if spec != self.model.spec() {
            return Err(CheckpointError::Mismatch {
                block: None,
                detail: "grid hyperparameters differ".into(),
            });
        }
        Ok(())
    }
}

/// `(i, j)` of a `block.i.j.*` parameter name.
fn block_of(name: &str) -> Option<(usize, usize)> {
    let mut parts = name.split('.');
    if parts.next()? != "block" {
        return None;
    }
    Some((parts.next()?.parse().ok()?, parts.next()?.parse().ok()?))
}

fn group_key(name: &str) -> (u8, usize, usize) {
    match block_of(name) {
        Some((i, j)) => (1, i, j),
        None if name.starts_with("stem.") => (0, 0, 0),
        None => (2, 0, 0),
    }
}

fn order_by_name<'a>(names: impl Iterator<Item = &'a str>) -> Vec<usize> {
    let names: Vec<&str> = names.collect();
    let mut idx: Vec<usize> = (0..names.len()).collect();
    idx.sort_by(|&a, &b| (group_key(names[a]), names[a]).cmp(&(group_key(names[b]), names[b])));
    idx
}

fn param_order(model: &GridModel<f32>) -> Vec<usize> {
    order_by_name(model.params().iter().map(|p| p.name.as_str()))
}

fn buffer_order(model: &GridModel<f32>) -> Vec<usize> {
    order_by_name(model.buffers().iter().map(|(n, _)| n.as_str()))
}

fn ordered_table(model: &GridModel<f32>) -> Vec<ParamEntry> {
    let table = model.param_table();
    param_order(model).into_iter().map(|k| table[k].clone()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let model = &trainer.model;
    let porder = param_order(model);
    let border = buffer_order(model);
    let mut payload = Vec::new();
    for &k in &porder {
        for v in &model.params()[k].value {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &k in &border {
        let state = &model.buffers()[k].1;
        for v in state.running_mean.iter().chain(&state.running_var) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    for moments in [&trainer.optim.m, &trainer.optim.v] {
        for &k in &porder {
            for v in &moments[k] {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        spec: model.spec().clone(),
        input_hw: model.input_hw(),
        params: ordered_table(model),
        buffers: border
            .iter()
            .map(|&k| {
                let (n, s) = &model.buffers()[k];
                (n.clone(), s.running_mean.len())
            })
            .collect(),
        optimizer: OptimizerHeader {
            cfg: trainer.optim.cfg,
            base_lr: trainer.optim.base_lr,
            t: trainer.optim.t,
        },
        train: trainer.cfg.clone(),
        epoch: trainer.epoch,
        global_step: trainer.global_step,
        payload_bytes: payload.len() as u64,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(json.len() as u64).to_le_bytes())?;
        f.write_all(&json)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated(format!("missing {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(4 * n, "parameter data")?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(8 * n, "optimizer moments")?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len).map_err(|_| CheckpointError::Header("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[r.pos..];
    if (payload.len() as u64) < header.payload_bytes {
        return Err(CheckpointError::Truncated(format!(
            "payload has {} of {} bytes",
            payload.len(),
            header.payload_bytes
        )));
    }
    if payload.len() as u64 != header.payload_bytes || hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(CheckpointError::Corrupt);
    }

    let mut model = GridModel::<f32>::build(&header.spec, header.input_hw, 0)?;
    if ordered_table(&model) != header.params {
        let table = ordered_table(&model);
        let first = table
            .iter()
            .zip(&header.params)
            .find(|(a, b)| a != b)
            .map(|(a, _)| a.name.clone())
            .or_else(|| table.get(header.params.len()).map(|e| e.name.clone()))
            .unwrap_or_default();
        return Err(CheckpointError::Mismatch {
            block: block_of(&first),
            detail: format!("stored shape table disagrees with its own grid at {first}"),
        });
    }
    let porder = param_order(&model);
    let border = buffer_order(&model);
    let mut pr = Reader { bytes: payload, pos: 0 };
    for &k in &porder {
        let n = model.params()[k].value.len();
        model.params_mut()[k].value = pr.f32s(n)?;
    }
    for &k in &border {
        let c = model.buffers()[k].1.running_mean.len();
        let state = &mut model.buffers_mut()[k].1;
        state.running_mean = pr.f32s(c)?;
        state.running_var = pr.f32s(c)?;
    }
    let mut optim = OptimState::new(header.optimizer.cfg, model.params());
    optim.base_lr = header.optimizer.base_lr;
    optim.t = header.optimizer.t;
    for moments in [&mut optim.m, &mut optim.v] {
        for &k in &porder {
            let n = moments[k].len();
            moments[k] = pr.f64s(n)?;
        }
    }
    Ok(Checkpoint {
        model,
        optim,
        train: header.train,
        epoch: header.epoch,
        global_step: header.global_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_names_parse() {
        assert_eq!(block_of("block.3.12.res.conv1.weight"), Some((3, 12)));
        assert_eq!(block_of("stem.conv.weight"), None);
        assert!(group_key("stem.bn.gamma") < group_key("block.0.0.res.bn1.beta"));
        assert!(group_key("block.4.5.up.bn.beta") < group_key("head.conv.bias"));
    }
}
