//! Trains the desk-scale model on the synthetic shapes and reports the
//! distortion and decode quality before and after.

use std::time::Instant;

use candle_core::DType;
use dpcc_core::evaluation::{evaluate_model, EvalOptions};
use dpcc_core::training::{evaluate_loss, prepare_dataset, train};
use dpcc_core::{fixtures, CodecModel, RunConfig};

fn main() -> dpcc_core::Result<()> {
    env_logger::init();
    let mut cfg = RunConfig::desk();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.steps = steps.parse().expect("step count");
    }
    if let Some(lr) = std::env::args().nth(2) {
        cfg.lr = lr.parse().expect("learning rate");
    }
    let raw = fixtures::shape_set(cfg.points_per_cloud, 7)?;
    let data = prepare_dataset(&raw, cfg.points_per_cloud, 0)?;
    let mut model = CodecModel::new(cfg.clone(), DType::F32, 0)?;
    let before = evaluate_loss(&model, &data, cfg.lambda, cfg.gamma, 4, 99)?;
    let (row0, _) = evaluate_model(cfg.lambda, &model, &data, &EvalOptions::default())?;
    println!("initial {before:?} psnr {:.2} bpp {:.4}", row0.psnr_d1, row0.bpp);
    let start = Instant::now();
    train(&mut model, &data, 1, None, |r| {
        println!("{} {:.4} mse {:.4} cd {:.4} bpp {:.4}", r.step, r.loss, r.d_mse, r.d_cd, r.bpp_est)
    })?;
    println!("trained in {:.1} s", start.elapsed().as_secs_f64());
    let after = evaluate_loss(&model, &data, cfg.lambda, cfg.gamma, 4, 99)?;
    let (row1, _) = evaluate_model(cfg.lambda, &model, &data, &EvalOptions::default())?;
    println!("final {after:?} psnr {:.2} bpp {:.4}", row1.psnr_d1, row1.bpp);
    Ok(())
}
