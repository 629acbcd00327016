//! The conditional noise predictor: per-point features with positional
//! encoding, global and per-token adaptive layer normalization, local
//! grouping around farthest-point centers, token self-attention and
//! inverse-distance upsampling back to every point.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn, Point, PointCloud};
use crate::nn::{self, gather_rows, tensor_from, Init, Linear, ParamStore};

const LN_EPS: f64 = 1e-5;
const UPSAMPLE_NEIGHBORS: usize = 3;
const IDW_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub tokens: usize,
    pub neighbors: usize,
    pub heads: usize,
    pub label_vocab: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 288,
            tokens: 64,
            neighbors: 8,
            heads: 4,
            label_vocab: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(6) {
            return Err(Error::Config(format!(
                "channel width {} must be a positive multiple of 6",
                self.channels
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channel width {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.neighbors == 0 || self.tokens == 0 {
            return Err(Error::Config("neighbors and tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trigonometric encoding of coordinates with `dim / 6` octave bands:
/// all sines `sin(2^j * pi * p_c)` first (band-major, then x, y, z), then
/// the matching cosines. Returns `points.len() * dim` values row-major.
pub fn positional_encode(points: &[Point], dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(6) {
        return Err(Error::invalid(format!(
            "positional encoding dimension {dim} must be a multiple of 6"
        )));
    }
    let bands = dim / 6;
    let half = dim / 2;
    let mut out = vec![0.0; points.len() * dim];
    for (row, p) in out.chunks_exact_mut(dim).zip(points) {
        for j in 0..bands {
            let freq = (1u64 << j) as f64 * std::f64::consts::PI;
            for c in 0..3 {
                let (s, co) = (freq * p[c]).sin_cos();
                row[j * 3 + c] = s;
                row[half + j * 3 + c] = co;
            }
        }
    }
    Ok(out)
}

/// Sinusoidal embedding of an integer timestep.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t as f64 * freq).sin_cos();
        out[i] = s;
        out[half + i] = c;
    }
    out
}

/// Same-size clouds stacked as a `(B, N, 3)` tensor, with the host copy
/// kept for the index computations.
#[derive(Debug, Clone)]
pub struct PointBatch {
    clouds: Vec<Vec<Point>>,
    tensor: Tensor,
}

impl PointBatch {
    pub fn new(clouds: Vec<Vec<Point>>, dtype: DType) -> Result<Self> {
        let n = clouds.first().map(Vec::len).unwrap_or(0);
        if n == 0 || clouds.iter().any(|c| c.len() != n) {
            return Err(Error::shape("batch clouds must be nonempty and equally sized"));
        }
        let data: Vec<f64> = clouds.iter().flatten().flatten().copied().collect();
        let tensor = tensor_from(data, &[clouds.len(), n, 3], dtype)?;
        Ok(Self { clouds, tensor })
    }

    pub fn from_clouds(clouds: &[PointCloud], dtype: DType) -> Result<Self> {
        Self::new(clouds.iter().map(|c| c.points().to_vec()).collect(), dtype)
    }

    pub fn batch(&self) -> usize {
        self.clouds.len()
    }

    pub fn points_per_cloud(&self) -> usize {
        self.clouds[0].len()
    }

    pub fn clouds(&self) -> &[Vec<Point>] {
        &self.clouds
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn dtype(&self) -> DType {
        self.tensor.dtype()
    }

    /// Positional encoding of every point, `(B, N, dim)`.
    pub fn encode(&self, dim: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.batch() * self.points_per_cloud() * dim);
        for c in &self.clouds {
            data.extend(positional_encode(c, dim)?);
        }
        tensor_from(data, &[self.batch(), self.points_per_cloud(), dim], self.dtype())
    }
}

/// Centers and neighborhoods for every cloud of a batch.
#[derive(Debug, Clone)]
pub struct Grouping {
    /// `B * S` center indices into each cloud.
    pub centers: Vec<usize>,
    /// `B * S * k` neighbor indices into each cloud.
    pub neighbors: Vec<usize>,
    pub tokens: usize,
    pub k: usize,
}

impl Grouping {
    pub fn build(batch: &PointBatch, tokens: usize, k: usize) -> Result<Self> {
        let n = batch.points_per_cloud();
        if tokens > n || k > n {
            return Err(Error::invalid(format!(
                "grouping needs tokens ({tokens}) and neighbors ({k}) <= points ({n})"
            )));
        }
        let mut centers = Vec::with_capacity(batch.batch() * tokens);
        let mut neighbors = Vec::with_capacity(batch.batch() * tokens * k);
        for cloud in batch.clouds() {
            let c = farthest_point_sample(cloud, tokens)?;
            let pts: Vec<Point> = c.iter().map(|&i| cloud[i]).collect();
            neighbors.extend(knn(&pts, cloud, k)?);
            centers.extend(c);
        }
        Ok(Self {
            centers,
            neighbors,
            tokens,
            k,
        })
    }

    pub fn center_points(&self, batch: &PointBatch) -> Vec<Vec<Point>> {
        batch
            .clouds()
            .iter()
            .zip(self.centers.chunks_exact(self.tokens))
            .map(|(cloud, idx)| idx.iter().map(|&i| cloud[i]).collect())
            .collect()
    }

    /// Positional encoding of neighbor-minus-center offsets, `(B, S, k, dim)`.
    pub fn relative_encoding(&self, batch: &PointBatch, dim: usize) -> Result<Tensor> {
        let b = batch.batch();
        let mut data = Vec::with_capacity(b * self.tokens * self.k * dim);
        let per_cloud = self.tokens * self.k;
        for (bi, cloud) in batch.clouds().iter().enumerate() {
            let mut rel = Vec::with_capacity(per_cloud);
            for s in 0..self.tokens {
                let center = cloud[self.centers[bi * self.tokens + s]];
                for j in 0..self.k {
                    let p = cloud[self.neighbors[bi * per_cloud + s * self.k + j]];
                    rel.push([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                }
            }
            data.extend(positional_encode(&rel, dim)?);
        }
        tensor_from(data, &[b, self.tokens, self.k, dim], batch.dtype())
    }
}

/// Trig-embedded local offsets, a shared per-neighbor map and max pooling
/// over each group.
pub struct GroupEmbed {
    proj: Linear,
    dim: usize,
}

impl GroupEmbed {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            proj: store.linear(&format!("{name}.proj"), dim, dim)?,
            dim,
        })
    }

    /// `(B, S, dim)` group features.
    pub fn forward(&self, batch: &PointBatch, grouping: &Grouping) -> Result<Tensor> {
        let enc = grouping.relative_encoding(batch, self.dim)?;
        Ok(nn::act(&self.proj.forward(&enc)?)?.max(2)?)
    }
}

/// Shared per-point map `3 -> 64 -> 128 -> C`.
pub struct PointStem {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl PointStem {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            l1: store.linear(&format!("{name}.l1"), 3, 64)?,
            l2: store.linear(&format!("{name}.l2"), 64, 128)?,
            l3: store.linear(&format!("{name}.l3"), 128, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = nn::act(&self.l1.forward(x)?)?;
        let h = nn::act(&self.l2.forward(&h)?)?;
        self.l3.forward(&h)
    }
}

/// `Norm(F) * scale(c) + shift(c)`; starts out as plain normalization.
pub struct AdaLn {
    scale: Linear,
    shift: Linear,
}

impl AdaLn {
    pub fn new(store: &mut ParamStore, name: &str, cond_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.linear_init(
                &format!("{name}.scale"),
                cond_dim,
                channels,
                Init::Const(0.0),
                Init::Const(1.0),
            )?,
            shift: store.linear_init(
                &format!("{name}.shift"),
                cond_dim,
                channels,
                Init::Const(0.0),
                Init::Const(0.0),
            )?,
        })
    }

    /// `features` is `(B, M, C)`; `cond` is `(B, M, C_cond)` or `(B, 1, C_cond)`.
    pub fn forward(&self, features: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, _, c) = features.dims3()?;
        let (cb, _, _) = cond.dims3()?;
        if cb != b || self.scale.out_features() != c {
            return Err(Error::shape(format!(
                "adaln features {:?} vs condition {:?}",
                features.dims(),
                cond.dims()
            )));
        }
        let normed = nn::layer_norm(features, LN_EPS)?;
        let scale = self.scale.forward(cond)?;
        let shift = self.shift.forward(cond)?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = *q.dims().last().unwrap();
    let scores = q
        .matmul(&k.transpose(D::Minus2, D::Minus1)?.contiguous()?)?
        .affine(1.0 / (dh as f64).sqrt(), 0.0)?;
    Ok(nn::softmax_last(&scores)?.matmul(v)?)
}

/// Single-head attention from queries onto a separate key/value set.
pub struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            q: store.linear(&format!("{name}.q"), dim, dim)?,
            k: store.linear(&format!("{name}.k"), dim, dim)?,
            v: store.linear(&format!("{name}.v"), dim, dim)?,
        })
    }

    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        attention(
            &self.q.forward(queries)?,
            &self.k.forward(context)?,
            &self.v.forward(context)?,
        )
    }
}

/// Multi-head self-attention with a residual connection; no positional
/// terms, so it commutes with token permutations.
pub struct SelfAttention {
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: store.linear(&format!("{name}.qkv"), dim, 3 * dim)?,
            out: store.linear(&format!("{name}.out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, s, c) = x.dims3()?;
        let dh = c / self.heads;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(D::Minus1, i * c, c)?
                .reshape((b, s, self.heads, dh))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let mixed = attention(&split(0)?, &split(1)?, &split(2)?)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, s, c))?;
        Ok(x.add(&self.out.forward(&mixed)?)?)
    }
}

/// Indices of the nearest centers and normalized `1 / (d^2 + 1e-8)`
/// weights for every point; both `points.len() * k` long.
pub fn interpolation_weights(points: &[Point], centers: &[Point], k: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let idx = knn(points, centers, k)?;
    let mut weights = Vec::with_capacity(idx.len());
    for (p, nbrs) in points.iter().zip(idx.chunks_exact(k)) {
        let raw: Vec<f64> = nbrs
            .iter()
            .map(|&i| {
                let c = centers[i];
                let d2 = (0..3).map(|d| (p[d] - c[d]).powi(2)).sum::<f64>();
                1.0 / (d2 + IDW_EPS)
            })
            .collect();
        let total: f64 = raw.iter().sum();
        weights.extend(raw.iter().map(|w| w / total));
    }
    Ok((idx, weights))
}

/// Everything the denoiser is conditioned on, one entry per batch item.
#[derive(Debug, Clone)]
pub struct ConditionSet {
    pub t: Vec<usize>,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub labels: Vec<Option<u32>>,
    /// `(B, 1, C)` dequantized global latent.
    pub shape_latent: Tensor,
    /// `(B, S, C)` dequantized detail latent.
    pub detail_latent: Tensor,
}

impl ConditionSet {
    fn check(&self, cfg: &DenoiserConfig, b: usize) -> Result<()> {
        if self.t.len() != b
            || self.beta.len() != b
            || self.alpha_bar.len() != b
            || self.labels.len() != b
        {
            return Err(Error::shape(format!("condition set does not have {b} entries")));
        }
        if self.shape_latent.dims() != [b, 1, cfg.channels] {
            return Err(Error::shape(format!(
                "shape latent {:?}, expected [{b}, 1, {}]",
                self.shape_latent.dims(),
                cfg.channels
            )));
        }
        let (db, _, dc) = self.detail_latent.dims3()?;
        if db != b || dc != cfg.channels {
            return Err(Error::shape(format!(
                "detail latent {:?} does not match width {}",
                self.detail_latent.dims(),
                cfg.channels
            )));
        }
        if self
            .beta
            .iter()
            .chain(&self.alpha_bar)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("non-finite schedule scalar in condition"));
        }
        Ok(())
    }
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    stem: PointStem,
    time_proj: Linear,
    sched_proj: Linear,
    latent_proj: Linear,
    label_table: Option<Tensor>,
    point_norm: AdaLn,
    group_embed: GroupEmbed,
    detail_attn: CrossAttention,
    token_norm: AdaLn,
    mixer: SelfAttention,
    fuse: Linear,
    head: Linear,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, cfg: DenoiserConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let label_table = if cfg.label_vocab > 0 {
            Some(store.create(
                "denoiser.label_embed",
                &[cfg.label_vocab, c],
                Init::Uniform(1.0 / (c as f64).sqrt()),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            stem: PointStem::new(store, "denoiser.stem", c)?,
            time_proj: store.linear("denoiser.time_proj", c, c)?,
            sched_proj: store.linear("denoiser.sched_proj", 2, c)?,
            latent_proj: store.linear("denoiser.latent_proj", c, c)?,
            label_table,
            point_norm: AdaLn::new(store, "denoiser.point_norm", c, c)?,
            group_embed: GroupEmbed::new(store, "denoiser.group_embed", c)?,
            detail_attn: CrossAttention::new(store, "denoiser.detail_attn", c)?,
            token_norm: AdaLn::new(store, "denoiser.token_norm", c, c)?,
            mixer: SelfAttention::new(store, "denoiser.mixer", c, cfg.heads)?,
            fuse: store.linear("denoiser.fuse", 2 * c, c)?,
            head: store.linear("denoiser.head", c, 3)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Global condition vector `(B, 1, C)` from timestep, schedule scalars,
    /// optional label and the shape latent.
    fn global_condition(&self, cond: &ConditionSet, dtype: DType) -> Result<Tensor> {
        let b = cond.t.len();
        let c = self.cfg.channels;
        let temb: Vec<f64> = cond
            .t
            .iter()
            .flat_map(|&t| timestep_embedding(t, c))
            .collect();
        let temb = tensor_from(temb, &[b, 1, c], dtype)?;
        let sched: Vec<f64> = cond
            .beta
            .iter()
            .zip(&cond.alpha_bar)
            .flat_map(|(&b, &a)| [b, a])
            .collect();
        let sched = tensor_from(sched, &[b, 1, 2], dtype)?;
        let mut g = self
            .time_proj
            .forward(&temb)?
            .add(&self.sched_proj.forward(&sched)?)?
            .add(&self.latent_proj.forward(&cond.shape_latent)?)?;
        if let Some(table) = &self.label_table {
            let rows: Vec<Tensor> = cond
                .labels
                .iter()
                .map(|l| match l {
                    Some(l) if (*l as usize) < self.cfg.label_vocab => {
                        Ok(table.narrow(0, *l as usize, 1)?)
                    }
                    _ => Ok(Tensor::zeros((1, c), dtype, table.device())?),
                })
                .collect::<Result<_>>()?;
            g = g.add(&Tensor::cat(&rows, 0)?.reshape((b, 1, c))?)?;
        }
        nn::act(&g)
    }

    /// Predicted noise `(B, N, 3)` for the noisy batch `x_t`.
    pub fn forward(&self, x_t: &PointBatch, cond: &ConditionSet) -> Result<Tensor> {
        let b = x_t.batch();
        let n = x_t.points_per_cloud();
        let c = self.cfg.channels;
        let s = self.cfg.tokens;
        cond.check(&self.cfg, b)?;
        if n < s {
            return Err(Error::invalid(format!("denoiser needs at least {s} points, got {n}")));
        }
        let dtype = x_t.dtype();

        let features = self.stem.forward(x_t.tensor())?.add(&x_t.encode(c)?)?;
        let global = self.global_condition(cond, dtype)?;
        let points = self.point_norm.forward(&features, &global)?;
        check(&points, "point features")?;

        let k = self.cfg.neighbors.min(n);
        let grouping = Grouping::build(x_t, s, k)?;
        let gathered = gather_rows(&points, &grouping.neighbors, s * k)?
            .reshape((b, s, k, c))?
            .max(2)?;
        let tokens = gathered.add(&self.group_embed.forward(x_t, &grouping)?)?;
        let detail = self.detail_attn.forward(&tokens, &cond.detail_latent)?;
        let tokens = self.token_norm.forward(&tokens, &detail)?;
        let tokens = self.mixer.forward(&tokens)?;
        check(&tokens, "token mixing")?;

        let up_k = UPSAMPLE_NEIGHBORS.min(s);
        let centers = grouping.center_points(x_t);
        let mut idx = Vec::with_capacity(b * n * up_k);
        let mut weights = Vec::with_capacity(b * n * up_k);
        for (cloud, ctr) in x_t.clouds().iter().zip(&centers) {
            let (i, w) = interpolation_weights(cloud, ctr, up_k)?;
            idx.extend(i);
            weights.extend(w);
        }
        let weights = tensor_from(weights, &[b, n, up_k, 1], dtype)?;
        let upsampled = gather_rows(&tokens, &idx, n * up_k)?
            .reshape((b, n, up_k, c))?
            .broadcast_mul(&weights)?
            .sum(2)?;
        let fused = nn::act(&self.fuse.forward(&Tensor::cat(&[&upsampled, &points], D::Minus1)?)?)?;
        let eps = self.head.forward(&fused)?;
        check(&eps, "noise head")?;
        Ok(eps)
    }
}

fn check(t: &Tensor, stage: &str) -> Result<()> {
    nn::ensure_finite(t, stage)
}
