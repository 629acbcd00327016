//! Rate-distortion training: the Lagrangian loss, the Adam loop with step
//! decay, line-delimited metrics and periodic checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{ConditionSet, PointBatch};
use crate::geometry::{normalize, Point, PointCloud};
use crate::latent::QuantMode;
use crate::model::{CodecModel, RunConfig};
use crate::nn::tensor_from;
use crate::schedule::{forward_sample_with, gaussian_points};

/// Noise draw of one cloud in a loss evaluation.
#[derive(Debug, Clone)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<Point>,
}

/// Batch means of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub loss: f64,
    pub d_mse: f64,
    pub d_cd: f64,
    /// Estimated rate in bits per point.
    pub rate_bpp: f64,
}

pub struct LossOutput {
    /// Scalar loss with the autograd graph attached.
    pub loss: Tensor,
    pub components: LossComponents,
    pub draws: Vec<Draw>,
    /// `(B, N, 3)` predicted noise.
    pub eps_hat: Tensor,
}

/// Mean over each cloud of nearest squared distances, both directions
/// summed; `(B, N, 3)` and `(B, M, 3)` give `(B,)`.
pub fn chamfer_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a
        .unsqueeze(2)?
        .broadcast_sub(&b.unsqueeze(1)?)?
        .sqr()?
        .sum(3)?;
    Ok(d.min(2)?.mean(1)?.add(&d.min(1)?.mean(1)?)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_vec0::<f64>()?)
}

/// The training objective on a batch of normalized clouds of equal size.
///
/// Per cloud: `t ~ U{1..T}`, `eps ~ N(0, I)`, `x_t` from the closed-form
/// forward process, train-mode latents of `x0` as the condition, then
/// `D = mse(eps, eps_hat) + gamma * CD(x0, x0_hat)`, `R` in bits per point
/// and `L = D + lambda * R`, averaged over the batch.
pub fn rd_loss(
    model: &CodecModel,
    clouds: &[PointCloud],
    lambda: f64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    if clouds.is_empty() {
        return Err(Error::invalid("empty training batch"));
    }
    let steps = model.schedule().steps();
    let draws: Vec<Draw> = clouds
        .iter()
        .map(|c| Draw {
            t: rng.random_range(1..=steps),
            eps: gaussian_points(rng, c.len()),
        })
        .collect();
    rd_loss_with(model, clouds, &draws, lambda, gamma, rng)
}

/// [`rd_loss`] with explicit noise draws; `rng` only feeds the
/// quantization noise.
pub fn rd_loss_with(
    model: &CodecModel,
    clouds: &[PointCloud],
    draws: &[Draw],
    lambda: f64,
    gamma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossOutput> {
    if clouds.len() != draws.len() {
        return Err(Error::shape("one noise draw per cloud required"));
    }
    let dtype = model.dtype();
    let sched = model.schedule();
    let n = clouds[0].len();

    let x0 = PointBatch::from_clouds(clouds, dtype)?;
    let x_t_host: Vec<Vec<Point>> = clouds
        .iter()
        .zip(draws)
        .map(|(c, d)| forward_sample_with(c.points(), &d.eps, sched.alpha_bar(d.t)))
        .collect();
    let x_t = PointBatch::new(x_t_host, dtype)?;

    let comp = model.compressor().forward(&x0, QuantMode::Train, rng)?;
    let cond = ConditionSet {
        t: draws.iter().map(|d| d.t).collect(),
        beta: draws.iter().map(|d| sched.beta(d.t)).collect(),
        alpha_bar: draws.iter().map(|d| sched.alpha_bar(d.t)).collect(),
        labels: clouds.iter().map(|c| c.label()).collect(),
        shape_latent: comp.shape_hat.clone(),
        detail_latent: comp.detail_hat.clone(),
    };
    let eps_hat = model.denoiser().forward(&x_t, &cond)?;

    let (d_mse, d_cd) = distortion_terms(model, &x0, &x_t, draws, &eps_hat)?;
    let d_cd = if gamma == 0.0 { d_cd.detach() } else { d_cd };
    let rate = comp.rate.total()?.affine(1.0 / n as f64, 0.0)?;

    let mut per_cloud = d_mse.add(&d_cd.affine(gamma, 0.0)?)?;
    if lambda != 0.0 {
        per_cloud = per_cloud.add(&rate.affine(lambda, 0.0)?)?;
    }
    let loss = per_cloud.mean(0)?;

    let components = LossComponents {
        loss: scalar(&loss)?,
        d_mse: scalar(&d_mse.mean(0)?)?,
        d_cd: scalar(&d_cd.mean(0)?)?,
        rate_bpp: scalar(&rate.mean(0)?)?,
    };
    if !components.loss.is_finite() {
        return Err(Error::non_finite(format!(
            "loss (D_mse = {}, D_cd = {}, R = {} bpp)",
            components.d_mse, components.d_cd, components.rate_bpp
        )));
    }
    Ok(LossOutput {
        loss,
        components,
        draws: draws.to_vec(),
        eps_hat,
    })
}

/// Per-cloud `(B,)` noise error and Chamfer distance between `x0` and the
/// clean estimate recovered from `x_t` and `eps_hat`.
pub fn distortion_terms(
    model: &CodecModel,
    x0: &PointBatch,
    x_t: &PointBatch,
    draws: &[Draw],
    eps_hat: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let dtype = x0.dtype();
    let sched = model.schedule();
    let (b, n) = (x0.batch(), x0.points_per_cloud());
    if draws.len() != b || x_t.batch() != b || x_t.points_per_cloud() != n {
        return Err(Error::shape("distortion inputs disagree in batch or size"));
    }
    let eps = tensor_from(
        draws.iter().flat_map(|d| d.eps.iter().flatten().copied()).collect(),
        &[b, n, 3],
        dtype,
    )?;
    let d_mse = eps_hat.sub(&eps)?.sqr()?.mean((1, 2))?;
    let inv_sqrt: Vec<f64> = draws.iter().map(|d| 1.0 / sched.alpha_bar(d.t).sqrt()).collect();
    let noise_coef: Vec<f64> = draws
        .iter()
        .map(|d| {
            let a = sched.alpha_bar(d.t);
            (1.0 - a).sqrt() / a.sqrt()
        })
        .collect();
    let x0_hat = x_t
        .tensor()
        .broadcast_mul(&tensor_from(inv_sqrt, &[b, 1, 1], dtype)?)?
        .sub(&eps_hat.broadcast_mul(&tensor_from(noise_coef, &[b, 1, 1], dtype)?)?)?;
    let d_cd = chamfer_tensor(x0.tensor(), &x0_hat)?;
    Ok((d_mse, d_cd))
}

/// Loss terms averaged over `repeats` seeded draws, without updating the
/// model. The same seed gives the same draws, so values from different
/// training stages are directly comparable.
pub fn evaluate_loss(
    model: &CodecModel,
    clouds: &[PointCloud],
    lambda: f64,
    gamma: f64,
    repeats: usize,
    seed: u64,
) -> Result<LossComponents> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossComponents::default();
    for _ in 0..repeats.max(1) {
        let c = rd_loss(model, clouds, lambda, gamma, &mut rng)?.components;
        acc.loss += c.loss;
        acc.d_mse += c.d_mse;
        acc.d_cd += c.d_cd;
        acc.rate_bpp += c.rate_bpp;
    }
    let k = repeats.max(1) as f64;
    Ok(LossComponents {
        loss: acc.loss / k,
        d_mse: acc.d_mse / k,
        d_cd: acc.d_cd / k,
        rate_bpp: acc.rate_bpp / k,
    })
}

/// Step size after `step` optimizer updates.
pub fn learning_rate_at(cfg: &RunConfig, step: usize) -> f64 {
    cfg.lr * cfg.lr_decay.powi((step / cfg.lr_decay_every) as i32)
}

/// Normalizes every cloud and draws `points` of its points uniformly at
/// random (without replacement when the cloud is large enough).
pub fn prepare_dataset(clouds: &[PointCloud], points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    if clouds.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    clouds
        .iter()
        .map(|c| {
            let (normalized, _) = normalize(c)?;
            let n = normalized.len();
            let idx: Vec<usize> = if n == points {
                (0..n).collect()
            } else if n > points {
                rand::seq::index::sample(&mut rng, n, points).into_vec()
            } else {
                (0..points).map(|_| rng.random_range(0..n)).collect()
            };
            Ok(normalized.select(&idx)?.with_label(c.label()))
        })
        .collect()
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub d_mse: f64,
    pub d_cd: f64,
    pub bpp_est: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// Cycles through shuffled epochs of the dataset.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Optimizes `model` on prepared clouds (see [`prepare_dataset`]).
///
/// With `out_dir` set, metrics go to `metrics.jsonl` and checkpoints to
/// `step_XXXXXXX.ckpt` plus `final.ckpt`. `observer` sees every logged
/// record.
pub fn train(
    model: &mut CodecModel,
    dataset: &[PointCloud],
    seed: u64,
    out_dir: Option<&Path>,
    mut observer: impl FnMut(&MetricRecord),
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    let n = dataset[0].len();
    if dataset.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("all training clouds must have the same point count"));
    }
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(
        model.store().all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut report = TrainReport::default();
    let mut sampler = BatchSampler::new(dataset.len());
    for step in 0..cfg.steps {
        let lr = learning_rate_at(&cfg, step);
        opt.set_learning_rate(lr);
        let batch: Vec<PointCloud> = sampler
            .next(cfg.batch, &mut rng)
            .into_iter()
            .map(|i| dataset[i].clone())
            .collect();
        let out = rd_loss(model, &batch, cfg.lambda, cfg.gamma, &mut rng)?;
        opt.backward_step(&out.loss)?;

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let c = out.components;
            let record = MetricRecord {
                step,
                loss: c.loss,
                d_mse: c.d_mse,
                d_cd: c.d_cd,
                bpp_est: c.rate_bpp,
                lr,
            };
            log::info!(
                "step {step}: L = {:.5} D_mse = {:.5} D_cd = {:.5} bpp = {:.4}",
                c.loss,
                c.d_mse,
                c.d_cd,
                c.rate_bpp
            );
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(|e| Error::Io(e.into()))?;
                w.write_all(b"\n")?;
            }
            observer(&record);
            report.history.push(record);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                let path = dir.join(format!("step_{:07}.ckpt", step + 1));
                model.save(&path)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some(w) = metrics.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("final.ckpt");
        model.save(&path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}
