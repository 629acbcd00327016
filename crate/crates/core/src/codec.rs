//! Cloud to container and back: normalization, test-mode latents, range
//! coding of the three streams and seeded diffusion decoding.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entropy::{
    build_cdf, pack_container, rc_decode, rc_encode, unpack_container, CdfTable, Container,
    GaussianModel, Header, LogitGridModel, SYMBOL_CAP,
};
use crate::error::{Error, Result};
use crate::generator::{ConditionSet, PointBatch};
use crate::geometry::{denormalize, normalize, NormalizationParams, Point, PointCloud};
use crate::latent::{EntropyParams, FactorizedPrior, LatentTriple, QuantMode, StreamBits};
use crate::model::CodecModel;
use crate::schedule::{generate, NoiseSchedule};

/// One table per channel of a factorized prior.
pub fn factorized_tables(prior: &FactorizedPrior) -> Result<Vec<CdfTable>> {
    let grid = prior.logit_grid(-SYMBOL_CAP, SYMBOL_CAP)?;
    grid.into_iter()
        .map(|logits| build_cdf(&LogitGridModel::new(-SYMBOL_CAP, logits)))
        .collect()
}

/// One table per detail-latent entry, row-major over `(S, C)`.
pub fn gaussian_tables(params: &EntropyParams) -> Result<Vec<CdfTable>> {
    let host = |t: &Tensor| -> Result<Vec<f64>> {
        Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
    };
    let mu = host(&params.mu)?;
    let sigma = host(&params.sigma)?;
    mu.iter()
        .zip(&sigma)
        .map(|(&mu, &sigma)| build_cdf(&GaussianModel { mu, sigma }))
        .collect()
}

/// Range-coded substreams of a triple.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Streams {
    pub shape: Vec<u8>,
    pub hyper: Vec<u8>,
    pub detail: Vec<u8>,
}

fn refs(tables: &[CdfTable]) -> Vec<&CdfTable> {
    tables.iter().collect()
}

/// Entropy codes a triple against the model's tables.
pub fn encode_triple(model: &CodecModel, triple: &LatentTriple) -> Result<Streams> {
    let comp = model.compressor();
    comp.check_triple(triple)?;
    let cfg = comp.config();
    let shape = if cfg.use_shape_latent {
        rc_encode(&triple.shape, &refs(&factorized_tables(comp.shape_prior())?))?
    } else {
        Vec::new()
    };
    let (hyper, detail) = if cfg.use_detail_latent {
        let hyper = rc_encode(&triple.hyper, &refs(&factorized_tables(comp.hyper_prior())?))?;
        let (_, _, params) = comp.dequantize(triple, model.dtype())?;
        let params = params.expect("detail path enabled");
        let detail = rc_encode(&triple.detail, &refs(&gaussian_tables(&params)?))?;
        (hyper, detail)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Streams { shape, hyper, detail })
}

/// Inverse of [`encode_triple`]; the hyper stream is decoded first because
/// it yields the detail tables.
pub fn decode_triple(model: &CodecModel, streams: &Streams) -> Result<LatentTriple> {
    let comp = model.compressor();
    let cfg = *comp.config();
    let (c, s, cz) = (cfg.channels, cfg.tokens, cfg.hyper_channels);
    let expect_empty = |name: &str, bytes: &[u8]| {
        if bytes.is_empty() {
            Ok(())
        } else {
            Err(Error::Bitstream(format!("{name} stream present but that latent is disabled")))
        }
    };
    let shape = if cfg.use_shape_latent {
        rc_decode(&streams.shape, &refs(&factorized_tables(comp.shape_prior())?), c)?
    } else {
        expect_empty("shape", &streams.shape)?;
        Vec::new()
    };
    let (hyper, detail) = if cfg.use_detail_latent {
        let hyper = rc_decode(&streams.hyper, &refs(&factorized_tables(comp.hyper_prior())?), cz)?;
        let partial = LatentTriple {
            shape: shape.clone(),
            detail: vec![0; s * c],
            hyper: hyper.clone(),
        };
        let (_, _, params) = comp.dequantize(&partial, model.dtype())?;
        let params = params.expect("detail path enabled");
        let detail = rc_decode(&streams.detail, &refs(&gaussian_tables(&params)?), s * c)?;
        (hyper, detail)
    } else {
        expect_empty("hyper", &streams.hyper)?;
        expect_empty("detail", &streams.detail)?;
        (Vec::new(), Vec::new())
    };
    Ok(LatentTriple { shape, detail, hyper })
}

/// Test-mode latents of a normalized cloud.
pub fn extract_triple(model: &CodecModel, normalized: &PointCloud) -> Result<LatentTriple> {
    let batch = PointBatch::new(vec![normalized.points().to_vec()], model.dtype())?;
    // Test-mode quantization draws no randomness.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.compressor().forward(&batch, QuantMode::Test, &mut rng)?;
    model.compressor().triple(&out, 0)
}

#[derive(Debug, Clone)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub points: usize,
    /// Actual payload bits of each substream.
    pub stream_bits: StreamBits,
    /// Model estimate of the same streams.
    pub estimated_bits: StreamBits,
    pub triple: LatentTriple,
}

impl Encoded {
    pub fn bpp(&self) -> f64 {
        crate::evaluation::compute_bpp(&self.bytes, self.points).expect("points >= 1")
    }
}

#[derive(Default)]
pub struct EncodeOptions {
    pub seed: u64,
    /// Overrides the cloud's own label when set.
    pub label: Option<u32>,
}


fn header_label(label: Option<u32>) -> Result<i16> {
    match label {
        None => Ok(-1),
        Some(l) => i16::try_from(l)
            .map_err(|_| Error::invalid(format!("label {l} does not fit the container field"))),
    }
}

fn to_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in 16 bits")))
}

/// Compresses a cloud in original coordinates.
pub fn encode(model: &CodecModel, cloud: &PointCloud, opts: &EncodeOptions) -> Result<Encoded> {
    let cfg = model.config();
    if cloud.len() < cfg.tokens {
        return Err(Error::invalid(format!(
            "cloud has {} points, the model needs at least {}",
            cloud.len(),
            cfg.tokens
        )));
    }
    let (normalized, params) = normalize(cloud)?;
    let triple = extract_triple(model, &normalized)?;
    let streams = encode_triple(model, &triple)?;
    let label = opts.label.or(cloud.label());
    let header = Header {
        points: u32::try_from(cloud.len())
            .map_err(|_| Error::invalid("cloud too large for the container"))?,
        tokens: to_u16(cfg.tokens, "token count")?,
        channels: to_u16(cfg.channels, "channel width")?,
        hyper_channels: to_u16(cfg.hyper_channels, "hyper width")?,
        steps: to_u16(cfg.diffusion_steps, "step count")?,
        seed: opts.seed,
        label: header_label(label)?,
        center: params.center.map(|v| v as f32),
        scale: params.scale as f32,
    };
    let stream_bits = StreamBits {
        shape: 8.0 * streams.shape.len() as f64,
        detail: 8.0 * streams.detail.len() as f64,
        hyper: 8.0 * streams.hyper.len() as f64,
    };
    let estimated_bits = model.compressor().estimate_rate(&triple, model.dtype())?;
    let bytes = pack_container(&Container {
        header,
        shape_stream: streams.shape,
        hyper_stream: streams.hyper,
        detail_stream: streams.detail,
    })?;
    Ok(Encoded {
        bytes,
        points: cloud.len(),
        stream_bits,
        estimated_bits,
        triple,
    })
}

fn check_header(model: &CodecModel, h: &Header) -> Result<()> {
    let cfg = model.config();
    let pairs = [
        ("token count", h.tokens as usize, cfg.tokens),
        ("channel width", h.channels as usize, cfg.channels),
        ("hyper width", h.hyper_channels as usize, cfg.hyper_channels),
    ];
    for (what, got, want) in pairs {
        if got != want {
            return Err(Error::shape(format!(
                "container {what} {got} does not match the model ({want})"
            )));
        }
    }
    if (h.points as usize) < cfg.tokens {
        return Err(Error::Bitstream(format!(
            "container declares {} points, fewer than the {} tokens",
            h.points, cfg.tokens
        )));
    }
    if h.steps == 0 {
        return Err(Error::Bitstream("container declares zero diffusion steps".into()));
    }
    if !(h.scale > 0.0 && h.scale.is_finite()) || h.center.iter().any(|v| !v.is_finite()) {
        return Err(Error::Bitstream("container normalization fields are invalid".into()));
    }
    Ok(())
}

/// Runs the reverse process conditioned on dequantized latents; returns
/// points in normalized coordinates.
pub fn generate_from_triple(
    model: &CodecModel,
    triple: &LatentTriple,
    points: usize,
    steps: usize,
    seed: u64,
    label: Option<u32>,
) -> Result<Vec<Point>> {
    let (shape_latent, detail_latent, _) = model.compressor().dequantize(triple, model.dtype())?;
    let schedule = if steps == model.schedule().steps() {
        model.schedule().clone()
    } else {
        NoiseSchedule::cosine(steps, crate::schedule::COSINE_OFFSET)?
    };
    let dtype = model.dtype();
    let predictor = |x_t: &[Point], t: usize| -> Result<Vec<Point>> {
        let batch = PointBatch::new(vec![x_t.to_vec()], dtype)?;
        let cond = ConditionSet {
            t: vec![t],
            beta: vec![schedule.beta(t)],
            alpha_bar: vec![schedule.alpha_bar(t)],
            labels: vec![label],
            shape_latent: shape_latent.clone(),
            detail_latent: detail_latent.clone(),
        };
        let eps = model.denoiser().forward(&batch, &cond)?;
        let flat = eps.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    };
    generate(&predictor, points, &schedule, seed)
}

#[derive(Debug, Clone)]
pub struct Decoded {
    pub cloud: PointCloud,
    /// The same points before denormalization.
    pub normalized: PointCloud,
    pub header: Header,
}

/// Decodes a container into a cloud in original coordinates.
pub fn decode(model: &CodecModel, bytes: &[u8]) -> Result<Decoded> {
    let container = unpack_container(bytes)?;
    let h = container.header;
    check_header(model, &h)?;
    let triple = decode_triple(
        model,
        &Streams {
            shape: container.shape_stream,
            hyper: container.hyper_stream,
            detail: container.detail_stream,
        },
    )?;
    let label = u32::try_from(h.label).ok();
    let points = generate_from_triple(model, &triple, h.points as usize, h.steps as usize, h.seed, label)?;
    let normalized = PointCloud::new(points)?.with_label(label);
    let params = NormalizationParams {
        center: h.center.map(|v| v as f64),
        scale: h.scale as f64,
    };
    let cloud = denormalize(&normalized, &params)?.with_label(label);
    Ok(Decoded {
        cloud,
        normalized,
        header: h,
    })
}
