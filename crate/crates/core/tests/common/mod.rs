//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{backprop::GradStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dpcc_core::geometry::Point;
use dpcc_core::nn::ParamStore;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn normal_points(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Point> {
    (0..n)
        .map(|_| {
            let p: Point = std::array::from_fn(|_| {
                let v: f64 = StandardNormal.sample(&mut *rng);
                spread * v
            });
            p
        })
        .collect()
}

/// Sets every parameter to a fresh random value so no layer sits at a
/// degenerate (zero) initialization during the check.
pub fn randomize(store: &ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, var) in store.vars() {
        let data: Vec<f64> = (0..var.elem_count()).map(|_| rng.random_range(-scale..scale)).collect();
        var.set(&Tensor::from_vec(data, var.dims(), var.device()).unwrap()).unwrap();
    }
}

pub fn direction(rng: &mut ChaCha8Rng, var: &Var) -> Tensor {
    let data: Vec<f64> = (0..var.elem_count()).map(|_| StandardNormal.sample(&mut *rng)).collect();
    Tensor::from_vec(data, var.dims(), var.device()).unwrap()
}

pub fn grad_dot(grads: &GradStore, var: &Var, dir: &Tensor) -> f64 {
    match grads.get(var.as_tensor()) {
        Some(g) => g.mul(dir).unwrap().sum_all().unwrap().to_vec0::<f64>().unwrap(),
        None => 0.0,
    }
}

/// Central-difference directional derivative of `f` along `dir` at `var`.
pub fn numeric(var: &Var, dir: &Tensor, h: f64, f: &dyn Fn() -> f64) -> f64 {
    let base = var.as_tensor().copy().unwrap();
    var.set(&base.add(&dir.affine(h, 0.0).unwrap()).unwrap()).unwrap();
    let plus = f();
    var.set(&base.sub(&dir.affine(h, 0.0).unwrap()).unwrap()).unwrap();
    let minus = f();
    var.set(&base).unwrap();
    (plus - minus) / (2.0 * h)
}

/// Returns the worst relative error over `vars`.
pub fn check_gradients(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    rng: &mut ChaCha8Rng,
) -> (f64, String) {
    let grads = loss().backward().unwrap();
    let value = || loss().to_vec0::<f64>().unwrap();
    let mut worst = (0.0f64, String::new());
    for (name, var) in vars {
        let dir = direction(rng, var);
        let analytic = grad_dot(&grads, var, &dir);
        let numeric = numeric(var, &dir, 1e-5, &value);
        let err = if analytic.abs().max(numeric.abs()) < 1e-9 {
            0.0
        } else {
            rel_err(analytic, numeric)
        };
        if err > worst.0 {
            worst = (err, name.clone());
        }
    }
    worst
}

pub fn vars_of(store: &ParamStore) -> Vec<(String, Var)> {
    store.vars().map(|(n, v)| (n.to_string(), v.clone())).collect()
}
