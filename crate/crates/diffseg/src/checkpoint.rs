//! Model checkpoints: a directory holding `manifest.json` plus one binary
//! file per named parameter.
//!
//! Parameter file layout (all little-endian):
//!
//! ```text
//! b"DSGT"  u32 rank  u32 dims[rank]  f32 data[prod(dims)]
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use diffseg_core::denoiser::{DenoiserConfig, DualPathwayDenoiser};
use diffseg_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const MAGIC: &[u8; 4] = b"DSGT";
const FORMAT_VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128`, kept as a string so any JSON reader preserves it.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub model: DenoiserConfig,
    /// Optimizer steps (or epochs, per the writer's convention) completed.
    pub step: u64,
    pub rng: Option<RngState>,
    /// Echo of the configuration that produced the weights.
    pub config: serde_json::Value,
    pub parameters: Vec<ParameterEntry>,
}

pub fn write_array(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let file = fs::File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::with_capacity(8 + 4 * tensor.shape().len());
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    w.write_all(&header).map_err(Error::io(path))?;
    let mut body = Vec::with_capacity(4 * tensor.len());
    for v in tensor.data() {
        body.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&body).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_array(path: &Path) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(Error::io(path))?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(path, "truncated header"))
    };
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err(Error::format(path, "not a parameter array"));
    }
    let rank = word(4)? as usize;
    let shape = (0..rank).map(|k| word(8 + 4 * k).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let offset = 8 + 4 * rank;
    let numel: usize = shape.iter().product();
    if bytes.len() != offset + 4 * numel {
        return Err(Error::format(
            path,
            format!("expected {} data bytes for shape {shape:?}, found {}", 4 * numel, bytes.len() - offset.min(bytes.len())),
        ));
    }
    let data = bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(&shape, data)?)
}

/// Writes `model` to `dir` (created if needed) and returns the manifest.
pub fn save(
    dir: &Path,
    model: &DualPathwayDenoiser<f32>,
    step: u64,
    rng: Option<&ChaCha8Rng>,
    config: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut parameters = Vec::with_capacity(model.parameters().len());
    for (name, tensor) in model.parameters().iter() {
        let file = format!("{name}.f32");
        write_array(&dir.join(&file), tensor)?;
        parameters.push(ParameterEntry {
            name: name.to_string(),
            file,
            shape: tensor.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        model: model.config().clone(),
        step,
        rng: rng.map(RngState::capture),
        config,
        parameters,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported checkpoint format {}", manifest.format)));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(DualPathwayDenoiser<f32>, Manifest)> {
    let manifest = read_manifest(dir)?;
    // Weights are overwritten below; the init draw only fixes the layout.
    let mut model = DualPathwayDenoiser::<f32>::init(manifest.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut named = Vec::with_capacity(manifest.parameters.len());
    for entry in &manifest.parameters {
        let path = dir.join(&entry.file);
        let tensor = read_array(&path)?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::format(&path, format!("shape {:?} disagrees with manifest {:?}", tensor.shape(), entry.shape)));
        }
        named.push((entry.name.clone(), tensor));
    }
    model.parameters_mut().load(named)?;
    Ok((model, manifest))
}

/// `<root>/<label>-epoch<NNNN>`.
pub fn epoch_dir(root: &Path, label: &str, epoch: usize) -> PathBuf {
    root.join(format!("{label}-epoch{epoch:04}"))
}
