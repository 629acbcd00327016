mod common;

use candle_core::DType;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dpcc_core::generator::PointBatch;
use dpcc_core::geometry::{chamfer_distance, PointCloud};
use dpcc_core::latent::QuantMode;
use dpcc_core::model::{load_checkpoint, Checkpoint};
use dpcc_core::nn::tensor_from;
use dpcc_core::schedule::{forward_sample_with, gaussian_points, predict_x0_with};
use dpcc_core::training::{
    distortion_terms, prepare_dataset, rd_loss, rd_loss_with, train, Draw, MetricRecord,
};
use dpcc_core::{fixtures, CodecModel, RunConfig};

use common::rel_err;

fn toy() -> RunConfig {
    RunConfig {
        channels: 12,
        hyper_channels: 4,
        tokens: 4,
        encoder_neighbors: 4,
        denoiser_neighbors: 4,
        heads: 2,
        label_vocab: 0,
        diffusion_steps: 20,
        points_per_cloud: 32,
        steps: 101,
        batch: 2,
        lr: 1e-3,
        log_every: 50,
        checkpoint_every: 0,
        ..RunConfig::default()
    }
}

fn data(cfg: &RunConfig) -> Vec<PointCloud> {
    prepare_dataset(&fixtures::shape_set(200, 1).unwrap(), cfg.points_per_cloud, 2).unwrap()
}

fn draws(model: &CodecModel, clouds: &[PointCloud], seed: u64) -> Vec<Draw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = model.schedule().steps();
    clouds
        .iter()
        .enumerate()
        .map(|(i, c)| Draw { t: 1 + (i * 7 + seed as usize) % steps, eps: gaussian_points(&mut rng, c.len()) })
        .collect()
}

#[test]
fn perfect_prediction_has_zero_distortion() {
    let cfg = toy();
    let model = CodecModel::new(cfg.clone(), DType::F64, 1).unwrap();
    let clouds = data(&cfg)[..3].to_vec();
    let d = draws(&model, &clouds, 3);
    let x0 = PointBatch::from_clouds(&clouds, DType::F64).unwrap();
    let x_t = PointBatch::new(
        clouds
            .iter()
            .zip(&d)
            .map(|(c, d)| forward_sample_with(c.points(), &d.eps, model.schedule().alpha_bar(d.t)))
            .collect(),
        DType::F64,
    )
    .unwrap();
    let eps = tensor_from(d.iter().flat_map(|d| d.eps.iter().flatten().copied()).collect(), &[3, 32, 3], DType::F64).unwrap();
    let (mse, cd) = distortion_terms(&model, &x0, &x_t, &d, &eps).unwrap();
    assert!(mse.to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    assert!(cd.to_vec1::<f64>().unwrap().iter().all(|v| *v < 1e-20));
}

#[test]
fn components_match_an_independent_recomputation() {
    let (lambda, gamma) = (0.7, 0.3);
    let cfg = toy();
    let model = CodecModel::new(cfg.clone(), DType::F64, 4).unwrap();
    let clouds = data(&cfg)[2..6].to_vec();
    let d = draws(&model, &clouds, 5);
    let quant = ChaCha8Rng::seed_from_u64(6);
    let out = rd_loss_with(&model, &clouds, &d, lambda, gamma, &mut quant.clone()).unwrap();
    let c = out.components;

    let eps_hat = out.eps_hat.to_vec3::<f64>().unwrap();
    let sched = model.schedule();
    let (mut mse, mut cd) = (0.0, 0.0);
    for (i, (cloud, draw)) in clouds.iter().zip(&d).enumerate() {
        let pred: Vec<[f64; 3]> = eps_hat[i].iter().map(|r| [r[0], r[1], r[2]]).collect();
        mse += pred.iter().flatten().zip(draw.eps.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / (3 * cloud.len()) as f64;
        let x_t = forward_sample_with(cloud.points(), &draw.eps, sched.alpha_bar(draw.t));
        let x0_hat = predict_x0_with(&x_t, &pred, sched.alpha_bar(draw.t)).unwrap();
        cd += chamfer_distance(cloud, &PointCloud::new(x0_hat).unwrap()).unwrap();
    }
    let b = clouds.len() as f64;
    let (mse, cd) = (mse / b, cd / b);

    // Replaying the quantization noise reproduces the rate term.
    let x0 = PointBatch::from_clouds(&clouds, DType::F64).unwrap();
    let comp = model.compressor().forward(&x0, QuantMode::Train, &mut quant.clone()).unwrap();
    let rate = comp.rate.total().unwrap().to_vec1::<f64>().unwrap().iter().sum::<f64>() / b / 32.0;

    assert!(rel_err(c.d_mse, mse) < 1e-6, "{} vs {mse}", c.d_mse);
    assert!(rel_err(c.d_cd, cd) < 1e-6, "{} vs {cd}", c.d_cd);
    assert!(rel_err(c.rate_bpp, rate) < 1e-6, "{} vs {rate}", c.rate_bpp);
    assert!(rel_err(c.loss, mse + gamma * cd + lambda * rate) < 1e-6);
    assert!(c.loss >= 0.0 && c.d_mse >= 0.0 && c.d_cd >= 0.0 && c.rate_bpp >= 0.0);
}

#[test]
fn gamma_zero_leaves_the_noise_loss() {
    let cfg = toy();
    let model = CodecModel::new(cfg.clone(), DType::F64, 7).unwrap();
    let clouds = data(&cfg)[..2].to_vec();
    let d = draws(&model, &clouds, 8);
    let rng = ChaCha8Rng::seed_from_u64(9);
    let c = rd_loss_with(&model, &clouds, &d, 0.5, 0.0, &mut rng.clone()).unwrap().components;
    assert!(rel_err(c.loss, c.d_mse + 0.5 * c.rate_bpp) < 1e-12);
    assert!(c.d_cd > 0.0);
}

#[test]
fn zero_lambda_keeps_entropy_models_out_of_the_gradient() {
    let cfg = toy();
    let model = CodecModel::new(cfg.clone(), DType::F64, 10).unwrap();
    let clouds = data(&cfg)[..2].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grads = rd_loss(&model, &clouds, 0.0, 1.0, &mut rng).unwrap().loss.backward().unwrap();
    let entropy_only = ["compressor.shape_prior.", "compressor.hyper_prior.", "compressor.hyper."];
    let mut checked = 0;
    for (name, var) in model.store().vars() {
        let grad = grads.get(var.as_tensor());
        let norm = grad.map(|g| g.abs().unwrap().sum_all().unwrap().to_vec0::<f64>().unwrap()).unwrap_or(0.0);
        if entropy_only.iter().any(|p| name.starts_with(p)) {
            assert_eq!(norm, 0.0, "{name} received a gradient");
            checked += 1;
        }
    }
    assert!(checked > 0);
    // The encoders still learn through the condition path.
    let stem = model.store().var("compressor.shape.stem.l3.weight").unwrap();
    assert!(grads.get(stem.as_tensor()).is_some());
}

#[test]
fn one_step_lowers_the_loss() {
    let cfg = toy();
    let model = CodecModel::new(cfg.clone(), DType::F64, 12).unwrap();
    let clouds = data(&cfg)[..4].to_vec();
    let d = draws(&model, &clouds, 13);
    let loss = || {
        rd_loss_with(&model, &clouds, &d, 1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(14)).unwrap()
    };
    let before = loss();
    let mut opt = AdamW::new(
        model.store().all_vars(),
        ParamsAdamW { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 },
    )
    .unwrap();
    opt.backward_step(&before.loss).unwrap();
    let after = loss().components.loss;
    assert!(after < before.components.loss, "{after} >= {}", before.components.loss);
}

#[test]
fn training_is_reproducible_and_logged() {
    let cfg = toy();
    let dataset = data(&cfg);
    let run = |dir: &std::path::Path| {
        let mut model = CodecModel::new(cfg.clone(), DType::F32, 15).unwrap();
        train(&mut model, &dataset, 16, Some(dir), |_| {}).unwrap()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (run(a.path()), run(b.path()));
    let at = |r: &[MetricRecord]| r.iter().find(|m| m.step == 100).unwrap().loss;
    assert_eq!(at(&ra.history), at(&rb.history));
    assert_eq!(ra.history.iter().map(|m| m.step).collect::<Vec<_>>(), vec![0, 50, 100]);

    let lines: Vec<MetricRecord> = std::fs::read_to_string(a.path().join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines, ra.history);
    assert_eq!(ra.checkpoints, vec![a.path().join("final.ckpt")]);
    assert_eq!(
        std::fs::read(a.path().join("final.ckpt")).unwrap(),
        std::fs::read(b.path().join("final.ckpt")).unwrap()
    );
}

#[test]
fn train_rejects_bad_datasets() {
    let cfg = toy();
    let mut model = CodecModel::new(cfg.clone(), DType::F32, 0).unwrap();
    assert!(train(&mut model, &[], 0, None, |_| {}).is_err());
    let mut mixed = data(&cfg);
    mixed.push(prepare_dataset(&mixed[..1], 40, 0).unwrap().remove(0));
    assert!(train(&mut model, &mixed, 0, None, |_| {}).is_err());
}

#[test]
fn prepared_clouds_are_normalized_subsamples() {
    let raw = fixtures::shape_set(300, 4).unwrap();
    let prepared = prepare_dataset(&raw, 128, 5).unwrap();
    assert_eq!(prepared.len(), raw.len());
    for (p, r) in prepared.iter().zip(&raw) {
        assert_eq!(p.len(), 128);
        assert_eq!(p.label(), r.label());
        // The scale is stored as f32, so the radius can exceed 1 by one ulp.
        assert!(p.max_norm() <= 1.0 + 1e-6);
    }
    assert_eq!(prepared, prepare_dataset(&raw, 128, 5).unwrap());
    // Small clouds are filled by drawing with replacement.
    assert_eq!(prepare_dataset(&raw[..1], 500, 0).unwrap()[0].len(), 500);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let model = CodecModel::new(toy(), DType::F32, 17).unwrap();
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    model.save(&first).unwrap();
    CodecModel::load(&first).unwrap().save(&second).unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(&second).unwrap());
    assert_eq!(load_checkpoint(&first).unwrap(), Checkpoint::from_model(&model).unwrap());
}

#[test]
fn width_mismatch_is_rejected() {
    let desk = RunConfig::desk();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c48.ckpt");
    CodecModel::new(desk.clone(), DType::F32, 0).unwrap().save(&path).unwrap();
    let ckpt = load_checkpoint(&path).unwrap();
    let mut wide = CodecModel::new(RunConfig { channels: 96, ..desk }, DType::F32, 0).unwrap();
    let err = wide.assign(&ckpt).unwrap_err();
    assert_eq!(err.class(), "checkpoint");
}

fn linear(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

fn stem(c: usize) -> usize {
    linear(3, 64) + linear(64, 128) + linear(128, c)
}

/// Three monotone layers of widths 1 -> 3 -> 3 -> 1 per channel, with a
/// gate factor after the first two.
fn factorized(channels: usize) -> usize {
    channels * ((3 + 3) + (9 + 3) + (3 + 1) + 3 + 3)
}

#[test]
fn parameter_count_matches_hand_tally() {
    let cfg = RunConfig { label_vocab: 5, ..toy() };
    let (c, cz, s) = (cfg.channels, cfg.hyper_channels, cfg.tokens);
    let compressor = stem(c)
        + linear(c, c)
        + linear(c, c)
        + linear(c, cz)
        + linear(cz, cz)
        + linear(cz, 2 * s * c)
        + factorized(c)
        + factorized(cz);
    let denoiser = stem(c)
        + linear(c, c)          // timestep embedding
        + linear(2, c)          // beta, alpha_bar
        + linear(c, c)          // shape latent
        + 5 * c                 // label table
        + 2 * 2 * linear(c, c)  // two AdaLN blocks
        + linear(c, c)          // group embedding
        + 3 * linear(c, c)      // cross attention
        + linear(c, 3 * c)
        + linear(c, c)          // self attention
        + linear(2 * c, c)      // upsampling fusion
        + linear(c, 3); // noise head
    let model = CodecModel::new(cfg, DType::F32, 0).unwrap();
    assert_eq!(model.store().num_parameters(), compressor + denoiser);
    assert_eq!(Checkpoint::from_model(&model).unwrap().num_parameters(), compressor + denoiser);
}
