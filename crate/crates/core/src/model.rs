//! Run configuration, the assembled codec model and checkpoint files.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Denoiser, DenoiserConfig};
use crate::latent::{Compressor, CompressorConfig};
use crate::nn::ParamStore;
use crate::schedule::{NoiseSchedule, COSINE_OFFSET};

/// Flat, typed configuration shared by the compressor, the denoiser and
/// the training loop. Serialized as flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Latent and feature width `C`.
    pub channels: usize,
    /// Hyper latent width `C_z`.
    pub hyper_channels: usize,
    /// Token count `S`.
    pub tokens: usize,
    /// Encoder neighborhood size.
    pub encoder_neighbors: usize,
    /// Denoiser neighborhood size.
    pub denoiser_neighbors: usize,
    pub heads: usize,
    pub label_vocab: usize,
    pub use_shape_latent: bool,
    pub use_detail_latent: bool,
    /// Diffusion steps `T`.
    pub diffusion_steps: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub points_per_cloud: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            channels: 288,
            hyper_channels: 96,
            tokens: 64,
            encoder_neighbors: 16,
            denoiser_neighbors: 8,
            heads: 4,
            label_vocab: 0,
            use_shape_latent: true,
            use_detail_latent: true,
            diffusion_steps: 200,
            lambda: 1.0,
            gamma: 1.0,
            steps: 80_000,
            batch: 48,
            lr: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 30_000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            points_per_cloud: 2048,
            seed: 0,
            log_every: 100,
            checkpoint_every: 10_000,
        }
    }
}

impl RunConfig {
    /// The small configuration used for quick end-to-end runs.
    pub fn desk() -> Self {
        Self {
            channels: 48,
            hyper_channels: 16,
            tokens: 16,
            diffusion_steps: 50,
            steps: 2000,
            batch: 8,
            points_per_cloud: 512,
            lr: 1e-3,
            log_every: 50,
            checkpoint_every: 0,
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn compressor(&self) -> CompressorConfig {
        CompressorConfig {
            channels: self.channels,
            hyper_channels: self.hyper_channels,
            tokens: self.tokens,
            neighbors: self.encoder_neighbors,
            use_shape_latent: self.use_shape_latent,
            use_detail_latent: self.use_detail_latent,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            tokens: self.tokens,
            neighbors: self.denoiser_neighbors,
            heads: self.heads,
            label_vocab: self.label_vocab,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.compressor().validate()?;
        self.denoiser().validate()?;
        let positive = [
            ("diffusion_steps", self.diffusion_steps),
            ("steps", self.steps),
            ("batch", self.batch),
            ("lr_decay_every", self.lr_decay_every),
            ("points_per_cloud", self.points_per_cloud),
            ("log_every", self.log_every),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.diffusion_steps > u16::MAX as usize {
            return Err(Error::Config("diffusion_steps must fit in 16 bits".into()));
        }
        if self.tokens > self.points_per_cloud {
            return Err(Error::Config(format!(
                "tokens ({}) exceed points_per_cloud ({})",
                self.tokens, self.points_per_cloud
            )));
        }
        if !(self.lr > 0.0 && self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::Config("lr must be positive, lambda and gamma nonnegative".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay {} must lie in (0, 1)", self.lr_decay)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Compressor and denoiser sharing one parameter store.
pub struct CodecModel {
    config: RunConfig,
    store: ParamStore,
    compressor: Compressor,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
}

impl CodecModel {
    /// Fresh model; `seed` drives parameter initialization.
    pub fn new(config: RunConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let compressor = Compressor::new(&mut store, config.compressor())?;
        let denoiser = Denoiser::new(&mut store, config.denoiser())?;
        let schedule = NoiseSchedule::cosine(config.diffusion_steps, COSINE_OFFSET)?;
        Ok(Self {
            config,
            store,
            compressor,
            denoiser,
            schedule,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn compressor(&self) -> &Compressor {
        &self.compressor
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Writes the checkpoint file for this model.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&Checkpoint::from_model(self)?, path)
    }

    /// Builds the model described by a checkpoint and loads its weights.
    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        let mut model = Self::new(ckpt.config.clone(), DType::F32, 0)?;
        model.assign(&ckpt)?;
        Ok(model)
    }

    /// Copies checkpoint weights in, after checking every name and shape.
    pub fn assign(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let own: Vec<(&str, Vec<usize>)> = self
            .store
            .vars()
            .map(|(n, v)| (n, v.dims().to_vec()))
            .collect();
        if own.len() != ckpt.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                ckpt.params.len(),
                own.len()
            )));
        }
        for ((name, shape), p) in own.iter().zip(&ckpt.params) {
            if *name != p.name || *shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model has {name} {shape:?}, checkpoint has {} {:?}",
                    p.name, p.shape
                )));
            }
        }
        for ((_, var), p) in self.store.vars().zip(&ckpt.params) {
            let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), var.device())?
                .to_dtype(var.dtype())?;
            var.set(&t)?;
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DPCCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Configuration plus every parameter as float32, in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &CodecModel) -> Result<Self> {
        let params = model
            .store
            .vars()
            .map(|(name, var)| {
                Ok(NamedTensor {
                    name: name.to_string(),
                    shape: var.dims().to_vec(),
                    data: var
                        .as_tensor()
                        .to_dtype(DType::F32)?
                        .flatten_all()?
                        .to_vec1::<f32>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: model.config.clone(),
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

/// Layout: magic, `u32` version, `u32` manifest length, JSON manifest,
/// then the raw little-endian float32 data of every tensor in order.
pub fn write_checkpoint(ckpt: &Checkpoint, out: &mut impl Write) -> Result<()> {
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: ckpt.config.clone(),
        tensors: ckpt
            .params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    for p in &ckpt.params {
        let mut buf = Vec::with_capacity(p.data.len() * 4);
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(input: &mut impl Read) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let short = || Error::Checkpoint("checkpoint is truncated".into());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(short)?;
    let manifest: Manifest =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint("manifest version disagrees with header".into()));
    }
    manifest.config.validate()?;
    let mut pos = 16 + len;
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for entry in manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(short)?;
        pos += 4 * n;
        params.push(NamedTensor {
            name: entry.name,
            shape: entry.shape,
            data: raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        });
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::fs::File::open(path)?;
    read_checkpoint(&mut f)
}
