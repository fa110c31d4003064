//! Bit-exact binary checkpoints.
//!
//! Layout (all little-endian): magic `ATLS`, `u32` version, length-prefixed
//! UTF-8 config text, `u64` epoch, RNG state (32-byte seed, `u64` stream,
//! `u128` word position), `u64` optimizer step count, then two record
//! sections (parameters, then optimizer moments). Each record is a
//! length-prefixed name, `u32` rank, dims as `u64`, and a raw `f64` payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{ReadBytesExt, WriteBytesExt, LE};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::CheckpointError;
use crate::model::ModelAssembly;
use crate::train::AdamW;

pub const MAGIC: &[u8; 4] = b"ATLS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha20Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct NamedTensorData {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub struct CheckpointData {
    pub config_text: String,
    pub epoch: u64,
    pub rng: RngState,
    pub adam_step: u64,
    pub params: Vec<NamedTensorData>,
    pub moments: Vec<NamedTensorData>,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelAssembly,
    optimizer: Option<&AdamW>,
    epoch: u64,
    rng: &RngState,
    config_text: &str,
) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let wr = |e: std::io::Error| io_err(path, e);

    w.write_all(MAGIC).map_err(wr)?;
    w.write_u32::<LE>(VERSION).map_err(wr)?;
    w.write_u64::<LE>(config_text.len() as u64).map_err(wr)?;
    w.write_all(config_text.as_bytes()).map_err(wr)?;
    w.write_u64::<LE>(epoch).map_err(wr)?;
    w.write_all(&rng.seed).map_err(wr)?;
    w.write_u64::<LE>(rng.stream).map_err(wr)?;
    w.write_u128::<LE>(rng.word_pos).map_err(wr)?;
    w.write_u64::<LE>(optimizer.map_or(0, |o| o.step_count)).map_err(wr)?;

    let params = model.named_params();
    w.write_u64::<LE>(params.len() as u64).map_err(wr)?;
    for (name, tensor) in &params {
        write_record(&mut w, name, tensor.shape(), &tensor.values())
            .map_err(wr)?;
    }

    match optimizer {
        Some(opt) => {
            let trainable = model.trainable_params();
            assert_eq!(
                opt.moments.len(),
                trainable.len(),
                "optimizer state does not match the trainable parameter list"
            );
            w.write_u64::<LE>(2 * trainable.len() as u64).map_err(wr)?;
            for ((name, tensor), (m, v)) in trainable.iter().zip(&opt.moments) {
                write_record(&mut w, &format!("optim.m.{name}"), tensor.shape(), m).map_err(wr)?;
                write_record(&mut w, &format!("optim.v.{name}"), tensor.shape(), v).map_err(wr)?;
            }
        }
        None => w.write_u64::<LE>(0).map_err(wr)?,
    }
    w.flush().map_err(wr)
}

fn write_record<W: Write>(
    w: &mut W,
    name: &str,
    dims: &[usize],
    values: &[f64],
) -> std::io::Result<()> {
    w.write_u64::<LE>(name.len() as u64)?;
    w.write_all(name.as_bytes())?;
    w.write_u32::<LE>(dims.len() as u32)?;
    for &d in dims {
        w.write_u64::<LE>(d as u64)?;
    }
    for &v in values {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let trunc = |what: &str| CheckpointError::Truncated { what: what.into() };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| trunc("magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LE>().map_err(|_| trunc("version"))?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let config_len = r.read_u64::<LE>().map_err(|_| trunc("config length"))? as usize;
    if config_len > 1 << 30 {
        return Err(CheckpointError::Malformed("config length".into()));
    }
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes).map_err(|_| trunc("config text"))?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| CheckpointError::Malformed("config text".into()))?;
    let epoch = r.read_u64::<LE>().map_err(|_| trunc("epoch"))?;
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed).map_err(|_| trunc("rng seed"))?;
    let stream = r.read_u64::<LE>().map_err(|_| trunc("rng stream"))?;
    let word_pos = r.read_u128::<LE>().map_err(|_| trunc("rng position"))?;
    let adam_step = r.read_u64::<LE>().map_err(|_| trunc("optimizer step"))?;

    let n_params = r.read_u64::<LE>().map_err(|_| trunc("parameter count"))? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_record(&mut r)?);
    }
    let n_moments = r.read_u64::<LE>().map_err(|_| trunc("moment count"))? as usize;
    let mut moments = Vec::with_capacity(n_moments);
    for _ in 0..n_moments {
        moments.push(read_record(&mut r)?);
    }

    Ok(CheckpointData {
        config_text,
        epoch,
        rng: RngState {
            seed,
            stream,
            word_pos,
        },
        adam_step,
        params,
        moments,
    })
}

fn read_record<R: Read>(r: &mut R) -> Result<NamedTensorData, CheckpointError> {
    let trunc = |what: &str| CheckpointError::Truncated { what: what.into() };
    let name_len = r.read_u64::<LE>().map_err(|_| trunc("record name length"))? as usize;
    if name_len > 1 << 16 {
        return Err(CheckpointError::Malformed("record name length".into()));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes).map_err(|_| trunc("record name"))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| CheckpointError::Malformed("record name".into()))?;
    let rank = r.read_u32::<LE>().map_err(|_| trunc("record rank"))? as usize;
    if rank > 8 {
        return Err(CheckpointError::Malformed(format!("rank of {name}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(r.read_u64::<LE>().map_err(|_| trunc("record dims"))? as usize);
    }
    let numel: usize = dims.iter().product();
    if numel > 1 << 32 {
        return Err(CheckpointError::Malformed(format!("element count of {name}")));
    }
    let mut values = vec![0.0f64; numel];
    for v in values.iter_mut() {
        *v = r
            .read_f64::<LE>()
            .map_err(|_| trunc(&format!("payload of {name}")))?;
    }
    Ok(NamedTensorData { name, dims, values })
}

/// Writes the stored parameter values into `model`, matching by name.
/// Every model parameter must be present with an identical shape.
pub fn apply_checkpoint(model: &ModelAssembly, data: &CheckpointData) -> Result<(), CheckpointError> {
    let model_params = model.named_params();
    for (name, tensor) in &model_params {
        let record = data
            .params
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| CheckpointError::MissingParam { name: name.clone() })?;
        if record.dims != tensor.shape() {
            return Err(CheckpointError::ShapeDisagreement {
                name: name.clone(),
                found: record.dims.clone(),
                expected: tensor.shape().to_vec(),
            });
        }
        tensor.set_values(&record.values);
    }
    if data.params.len() != model_params.len() {
        return Err(CheckpointError::Malformed(format!(
            "checkpoint has {} parameters, model has {}",
            data.params.len(),
            model_params.len()
        )));
    }
    Ok(())
}

/// Rebuilds optimizer moment buffers for the model's trainable parameters.
pub fn restore_optimizer(
    model: &ModelAssembly,
    data: &CheckpointData,
    mut optimizer: AdamW,
) -> Result<AdamW, CheckpointError> {
    optimizer.step_count = data.adam_step;
    optimizer.moments.clear();
    for (name, tensor) in model.trainable_params() {
        let find = |prefix: &str| -> Result<Vec<f64>, CheckpointError> {
            let full = format!("{prefix}.{name}");
            let rec = data
                .moments
                .iter()
                .find(|r| r.name == full)
                .ok_or_else(|| CheckpointError::MissingParam { name: full.clone() })?;
            if rec.dims != tensor.shape() {
                return Err(CheckpointError::ShapeDisagreement {
                    name: full,
                    found: rec.dims.clone(),
                    expected: tensor.shape().to_vec(),
                });
            }
            Ok(rec.values.clone())
        };
        optimizer.moments.push((find("optim.m")?, find("optim.v")?));
    }
    Ok(optimizer)
}
