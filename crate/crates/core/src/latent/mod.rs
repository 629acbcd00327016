//! The compressor: a global max-pooled point encoder, a local grouped
//! detail encoder, quantization, the hyperprior transforms and the rate of
//! all three latent streams.

mod priors;

pub use priors::{
    bits, gaussian_conditional_likelihood, gaussian_conditional_pmf, EntropyParams, FactorizedPrior, LIKELIHOOD_FLOOR,
    SIGMA_MIN,
};

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{GroupEmbed, Grouping, PointBatch, PointStem};
use crate::nn::{self, tensor_from, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub channels: usize,
    pub hyper_channels: usize,
    pub tokens: usize,
    pub neighbors: usize,
    /// Transmit the global shape latent.
    pub use_shape_latent: bool,
    /// Transmit the detail latent and its hyperprior.
    pub use_detail_latent: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            channels: 288,
            hyper_channels: 96,
            tokens: 64,
            neighbors: 16,
            use_shape_latent: true,
            use_detail_latent: true,
        }
    }
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(6) {
            return Err(Error::Config(format!(
                "channel width {} must be a positive multiple of 6",
                self.channels
            )));
        }
        if self.hyper_channels == 0 || self.tokens == 0 || self.neighbors == 0 {
            return Err(Error::Config(
                "hyper width, token count and neighbors must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-1/2, 1/2)` noise.
    Train,
    /// Rounding, half away from zero.
    Test,
}

/// Scalar quantizer on host values.
pub fn quantize_values(y: &[f64], mode: QuantMode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match mode {
        QuantMode::Train => y.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect(),
        QuantMode::Test => y.iter().map(|v| v.round()).collect(),
    }
}

/// Quantizer on tensors. The training branch keeps the gradient path to `y`.
pub fn quantize(y: &Tensor, mode: QuantMode, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    match mode {
        QuantMode::Train => {
            let noise: Vec<f64> = (0..y.elem_count())
                .map(|_| rng.random_range(-0.5..0.5))
                .collect();
            Ok(y.add(&tensor_from(noise, y.dims(), y.dtype())?)?)
        }
        QuantMode::Test => {
            let vals = y.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            let rounded: Vec<f64> = vals.iter().map(|v| v.round()).collect();
            tensor_from(rounded, y.dims(), y.dtype())
        }
    }
}

/// Per-point stem followed by channelwise max pooling.
///
/// Max pooling is exact whatever the visiting order, so the output is
/// bitwise invariant to point permutations.
pub struct ShapeEncoder {
    stem: PointStem,
}

impl ShapeEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            stem: PointStem::new(store, &format!("{name}.stem"), channels)?,
        })
    }

    /// `(B, 1, C)`.
    pub fn forward(&self, x: &PointBatch) -> Result<Tensor> {
        Ok(self.stem.forward(x.tensor())?.max_keepdim(1)?)
    }
}

/// Farthest-point centers, k-nearest groups, trig-embedded relative
/// offsets and per-group max pooling.
pub struct DetailEncoder {
    embed: GroupEmbed,
    tokens: usize,
    neighbors: usize,
}

impl DetailEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &CompressorConfig) -> Result<Self> {
        Ok(Self {
            embed: GroupEmbed::new(store, &format!("{name}.embed"), cfg.channels)?,
            tokens: cfg.tokens,
            neighbors: cfg.neighbors,
        })
    }

    /// `(B, S, C)`.
    pub fn forward(&self, x: &PointBatch) -> Result<Tensor> {
        let n = x.points_per_cloud();
        if self.tokens > n {
            return Err(Error::invalid(format!(
                "detail encoder needs at least {} points, got {n}",
                self.tokens
            )));
        }
        let grouping = Grouping::build(x, self.tokens, self.neighbors.min(n))?;
        self.embed.forward(x, &grouping)
    }
}

/// Hyper analysis (tokenwise map, mean pool, projection) and synthesis
/// (dense stack producing `mu` and `sigma` for every detail entry).
pub struct Hyperprior {
    enc_token: Linear,
    enc_out: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
    tokens: usize,
    channels: usize,
    hyper_channels: usize,
}

impl Hyperprior {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        tokens: usize,
        channels: usize,
        hyper_channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            enc_token: store.linear(&format!("{name}.enc_token"), channels, channels)?,
            enc_out: store.linear(&format!("{name}.enc_out"), channels, hyper_channels)?,
            dec_hidden: store.linear(&format!("{name}.dec_hidden"), hyper_channels, hyper_channels)?,
            dec_out: store.linear(
                &format!("{name}.dec_out"),
                hyper_channels,
                2 * tokens * channels,
            )?,
            tokens,
            channels,
            hyper_channels,
        })
    }

    /// `(B, S, C) -> (B, 1, C_z)`.
    pub fn encode(&self, y_h: &Tensor) -> Result<Tensor> {
        let (_, s, c) = y_h.dims3()?;
        if s != self.tokens || c != self.channels {
            return Err(Error::shape(format!(
                "hyper encoder expects [_, {}, {}], got {:?}",
                self.tokens,
                self.channels,
                y_h.dims()
            )));
        }
        let h = nn::act(&self.enc_token.forward(y_h)?)?.mean_keepdim(1)?;
        self.enc_out.forward(&h)
    }

    /// `(B, 1, C_z) -> (mu, sigma)`, each `(B, S, C)`, with `sigma >= 0.04`.
    pub fn decode(&self, z_hat: &Tensor) -> Result<EntropyParams> {
        let (b, one, cz) = z_hat.dims3()?;
        if one != 1 || cz != self.hyper_channels {
            return Err(Error::shape(format!(
                "hyper decoder expects [_, 1, {}], got {:?}",
                self.hyper_channels,
                z_hat.dims()
            )));
        }
        let h = nn::act(&self.dec_hidden.forward(z_hat)?)?;
        let out = self.dec_out.forward(&h)?;
        let sc = self.tokens * self.channels;
        let mu = out.narrow(2, 0, sc)?.reshape((b, self.tokens, self.channels))?;
        let raw = out.narrow(2, sc, sc)?.reshape((b, self.tokens, self.channels))?;
        let sigma = nn::softplus(&raw)?.maximum(SIGMA_MIN)?;
        Ok(EntropyParams { mu, sigma })
    }
}

/// Integer latents of one cloud, ready for entropy coding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentTriple {
    /// `C` values (empty when the shape latent is disabled).
    pub shape: Vec<i32>,
    /// `S * C` values, row-major (empty when the detail latent is disabled).
    pub detail: Vec<i32>,
    /// `C_z` values (empty when the detail latent is disabled).
    pub hyper: Vec<i32>,
}

/// Bits of each stream, one entry per batch item.
#[derive(Debug, Clone)]
pub struct Rate {
    pub shape: Tensor,
    pub detail: Tensor,
    pub hyper: Tensor,
}

impl Rate {
    pub fn total(&self) -> Result<Tensor> {
        Ok(self.shape.add(&self.detail)?.add(&self.hyper)?)
    }
}

/// Output of one compressor pass over a batch.
pub struct Compressed {
    /// Quantized (or noise-perturbed) global latent, `(B, 1, C)`; zeros
    /// when disabled.
    pub shape_hat: Tensor,
    /// Quantized detail latent, `(B, S, C)`; zeros when disabled.
    pub detail_hat: Tensor,
    /// Quantized hyper latent, `(B, 1, C_z)`, when the detail path is on.
    pub hyper_hat: Option<Tensor>,
    pub params: Option<EntropyParams>,
    pub rate: Rate,
}

pub struct Compressor {
    cfg: CompressorConfig,
    shape_encoder: ShapeEncoder,
    detail_encoder: DetailEncoder,
    hyperprior: Hyperprior,
    shape_prior: FactorizedPrior,
    hyper_prior: FactorizedPrior,
}

impl Compressor {
    pub fn new(store: &mut ParamStore, cfg: CompressorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            shape_encoder: ShapeEncoder::new(store, "compressor.shape", cfg.channels)?,
            detail_encoder: DetailEncoder::new(store, "compressor.detail", &cfg)?,
            hyperprior: Hyperprior::new(
                store,
                "compressor.hyper",
                cfg.tokens,
                cfg.channels,
                cfg.hyper_channels,
            )?,
            shape_prior: FactorizedPrior::new(store, "compressor.shape_prior", cfg.channels)?,
            hyper_prior: FactorizedPrior::new(store, "compressor.hyper_prior", cfg.hyper_channels)?,
        })
    }

    pub fn config(&self) -> &CompressorConfig {
        &self.cfg
    }

    pub fn shape_encoder(&self) -> &ShapeEncoder {
        &self.shape_encoder
    }

    pub fn detail_encoder(&self) -> &DetailEncoder {
        &self.detail_encoder
    }

    pub fn hyperprior(&self) -> &Hyperprior {
        &self.hyperprior
    }

    pub fn shape_prior(&self) -> &FactorizedPrior {
        &self.shape_prior
    }

    pub fn hyper_prior(&self) -> &FactorizedPrior {
        &self.hyper_prior
    }

    fn zero_rate(b: usize, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::zeros(b, dtype, &candle_core::Device::Cpu)?)
    }

    /// Encodes, quantizes and measures the rate of a batch.
    pub fn forward(&self, x: &PointBatch, mode: QuantMode, rng: &mut ChaCha8Rng) -> Result<Compressed> {
        let b = x.batch();
        let dtype = x.dtype();
        let (c, s) = (self.cfg.channels, self.cfg.tokens);

        let (shape_hat, shape_bits) = if self.cfg.use_shape_latent {
            let y = self.shape_encoder.forward(x)?;
            let y_hat = quantize(&y, mode, rng)?;
            let bits = bits(&self.shape_prior.likelihood(&y_hat)?)?;
            (y_hat, bits)
        } else {
            (Tensor::zeros((b, 1, c), dtype, x.tensor().device())?, Self::zero_rate(b, dtype)?)
        };

        let (detail_hat, hyper_hat, params, detail_bits, hyper_bits) = if self.cfg.use_detail_latent {
            let y = self.detail_encoder.forward(x)?;
            let z = self.hyperprior.encode(&y)?;
            let z_hat = quantize(&z, mode, rng)?;
            let z_bits = bits(&self.hyper_prior.likelihood(&z_hat)?)?;
            let params = self.hyperprior.decode(&z_hat)?;
            let y_hat = quantize(&y, mode, rng)?;
            let y_bits = bits(&gaussian_conditional_likelihood(&y_hat, &params)?)?;
            (y_hat, Some(z_hat), Some(params), y_bits, z_bits)
        } else {
            (
                Tensor::zeros((b, s, c), dtype, x.tensor().device())?,
                None,
                None,
                Self::zero_rate(b, dtype)?,
                Self::zero_rate(b, dtype)?,
            )
        };

        Ok(Compressed {
            shape_hat,
            detail_hat,
            hyper_hat,
            params,
            rate: Rate {
                shape: shape_bits,
                detail: detail_bits,
                hyper: hyper_bits,
            },
        })
    }

    /// Integer latents of batch item `i` of a test-mode pass.
    pub fn triple(&self, out: &Compressed, i: usize) -> Result<LatentTriple> {
        let to_ints = |t: &Tensor| -> Result<Vec<i32>> {
            Ok(t.get(i)?
                .to_dtype(DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .map(|v| v.round() as i32)
                .collect())
        };
        Ok(LatentTriple {
            shape: if self.cfg.use_shape_latent {
                to_ints(&out.shape_hat)?
            } else {
                Vec::new()
            },
            detail: if self.cfg.use_detail_latent {
                to_ints(&out.detail_hat)?
            } else {
                Vec::new()
            },
            hyper: match &out.hyper_hat {
                Some(z) => to_ints(z)?,
                None => Vec::new(),
            },
        })
    }

    /// Rebuilds the dequantized latents of one cloud from its integers.
    pub fn dequantize(&self, triple: &LatentTriple, dtype: DType) -> Result<(Tensor, Tensor, Option<EntropyParams>)> {
        self.check_triple(triple)?;
        let (c, s, cz) = (self.cfg.channels, self.cfg.tokens, self.cfg.hyper_channels);
        let floats = |v: &[i32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let shape = if self.cfg.use_shape_latent {
            tensor_from(floats(&triple.shape), &[1, 1, c], dtype)?
        } else {
            Tensor::zeros((1, 1, c), dtype, &candle_core::Device::Cpu)?
        };
        let (detail, params) = if self.cfg.use_detail_latent {
            let z = tensor_from(floats(&triple.hyper), &[1, 1, cz], dtype)?;
            (
                tensor_from(floats(&triple.detail), &[1, s, c], dtype)?,
                Some(self.hyperprior.decode(&z)?),
            )
        } else {
            (Tensor::zeros((1, s, c), dtype, &candle_core::Device::Cpu)?, None)
        };
        Ok((shape, detail, params))
    }

    pub fn check_triple(&self, triple: &LatentTriple) -> Result<()> {
        let (c, s, cz) = (self.cfg.channels, self.cfg.tokens, self.cfg.hyper_channels);
        let expect = |name: &str, got: usize, want: usize| {
            if got != want {
                Err(Error::shape(format!("{name} latent has {got} values, expected {want}")))
            } else {
                Ok(())
            }
        };
        expect("shape", triple.shape.len(), if self.cfg.use_shape_latent { c } else { 0 })?;
        expect("detail", triple.detail.len(), if self.cfg.use_detail_latent { s * c } else { 0 })?;
        expect("hyper", triple.hyper.len(), if self.cfg.use_detail_latent { cz } else { 0 })
    }

    /// Model bits of the three streams of a quantized triple.
    pub fn estimate_rate(&self, triple: &LatentTriple, dtype: DType) -> Result<StreamBits> {
        let (shape, detail, params) = self.dequantize(triple, dtype)?;
        let scalar = |t: Tensor| -> Result<f64> {
            Ok(t.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
        };
        let shape_bits = if self.cfg.use_shape_latent {
            scalar(bits(&self.shape_prior.likelihood(&shape)?)?)?
        } else {
            0.0
        };
        let (detail_bits, hyper_bits) = match params {
            Some(params) => {
                let cz = self.cfg.hyper_channels;
                let z = tensor_from(
                    triple.hyper.iter().map(|&v| v as f64).collect(),
                    &[1, 1, cz],
                    dtype,
                )?;
                (
                    scalar(bits(&gaussian_conditional_likelihood(&detail, &params)?)?)?,
                    scalar(bits(&self.hyper_prior.likelihood(&z)?)?)?,
                )
            }
            None => (0.0, 0.0),
        };
        Ok(StreamBits {
            shape: shape_bits,
            detail: detail_bits,
            hyper: hyper_bits,
        })
    }
}

/// Per-stream bit counts of one cloud.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StreamBits {
    pub shape: f64,
    pub detail: f64,
    pub hyper: f64,
}

impl StreamBits {
    pub fn total(&self) -> f64 {
        self.shape + self.detail + self.hyper
    }
}

/// `sum(-log2 p)` over host probabilities.
pub fn rate_from_likelihoods(p: &[f64]) -> f64 {
    p.iter().map(|v| -v.log2()).sum()
}
