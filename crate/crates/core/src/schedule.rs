//! Noise schedules and the closed-form DDPM forward/reverse algebra.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::Point;

/// Default offset of the cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
const BETA_MIN: f64 = 1e-6;
const BETA_MAX: f64 = 0.999;
/// Below this signal level `predict_x0` refuses to divide.
const MIN_ALPHA_BAR: f64 = 1e-8;

/// Per-step noise levels `beta_t` for `t = 1..=T` and the derived `alpha`
/// tables. Index 0 of `alpha_bar` is the clean signal (`alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Unclipped cosine signal level `f(t)/f(0)`.
pub fn cosine_alpha_bar(t: usize, steps: usize, offset: f64) -> f64 {
    let f = |t: f64| {
        let angle = ((t / steps as f64 + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2;
        angle.cos().powi(2)
    };
    f(t as f64) / f(0.0)
}

impl NoiseSchedule {
    /// Cosine schedule with betas clipped to `[1e-6, 0.999]`; `alpha_bar` is
    /// recomputed from the clipped betas so the product identity holds.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        let betas = (1..=steps)
            .map(|t| {
                let prev = cosine_alpha_bar(t - 1, steps, offset);
                let cur = cosine_alpha_bar(t, steps, offset);
                (1.0 - cur / prev).clamp(BETA_MIN, BETA_MAX)
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::invalid("noise schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::invalid(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t`, valid for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `alpha_bar_t`, valid for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Posterior variance `(1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    pub fn forward_sample(&self, x0: &[Point], t: usize, eps: &[Point]) -> Result<Vec<Point>> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} beyond {}", self.steps())));
        }
        check_same_len(x0, eps)?;
        Ok(forward_sample_with(x0, eps, self.alpha_bar(t)))
    }

    pub fn predict_x0(&self, x_t: &[Point], t: usize, eps_hat: &[Point]) -> Result<Vec<Point>> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} beyond {}", self.steps())));
        }
        check_same_len(x_t, eps_hat)?;
        predict_x0_with(x_t, eps_hat, self.alpha_bar(t))
    }

    /// One ancestral step `x_t -> x_{t-1}`. At `t = 1` the noise argument
    /// is ignored and the posterior mean is returned.
    pub fn reverse_step(
        &self,
        x_t: &[Point],
        t: usize,
        eps_hat: &[Point],
        noise: &[Point],
    ) -> Result<Vec<Point>> {
        self.check_step(t)?;
        check_same_len(x_t, eps_hat)?;
        check_same_len(x_t, noise)?;
        let variance = if t > 1 {
            self.posterior_variance(t)
        } else {
            0.0
        };
        Ok(reverse_step_with(
            x_t,
            eps_hat,
            noise,
            self.beta(t),
            self.alpha_bar(t),
            variance,
        ))
    }
}

/// Posterior mean `(x_t - beta / sqrt(1 - ab) * eps_hat) / sqrt(1 - beta)`
/// plus `sqrt(variance) * noise`, from explicit scalars.
pub fn reverse_step_with(
    x_t: &[Point],
    eps_hat: &[Point],
    noise: &[Point],
    beta: f64,
    alpha_bar: f64,
    variance: f64,
) -> Vec<Point> {
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    let sigma = variance.sqrt();
    x_t.iter()
        .zip(eps_hat)
        .zip(noise)
        .map(|((x, e), z)| {
            std::array::from_fn(|d| inv_sqrt_alpha * (x[d] - coef * e[d]) + sigma * z[d])
        })
        .collect()
}

fn check_same_len(a: &[Point], b: &[Point]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "point count {} does not match noise count {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit signal level.
pub fn forward_sample_with(x0: &[Point], eps: &[Point], alpha_bar: f64) -> Vec<Point> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x0.iter()
        .zip(eps)
        .map(|(x, e)| std::array::from_fn(|d| a * x[d] + b * e[d]))
        .collect()
}

/// `(x_t - sqrt(1 - ab) * eps_hat) / sqrt(ab)` for an explicit signal level.
pub fn predict_x0_with(x_t: &[Point], eps_hat: &[Point], alpha_bar: f64) -> Result<Vec<Point>> {
    if alpha_bar < MIN_ALPHA_BAR {
        return Err(Error::invalid(format!(
            "alpha_bar {alpha_bar:e} too small to invert"
        )));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| std::array::from_fn(|d| (x[d] - b * e[d]) / a))
        .collect())
}

/// Anything that predicts the noise in `x_t` at step `t`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &[Point], t: usize) -> Result<Vec<Point>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&[Point], usize) -> Result<Vec<Point>>,
{
    fn predict_noise(&self, x_t: &[Point], t: usize) -> Result<Vec<Point>> {
        self(x_t, t)
    }
}

pub fn gaussian_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| StandardNormal.sample(rng)))
        .collect()
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
///
/// The initial sample and every step's noise come from one ChaCha8 stream
/// seeded with `seed`, so the output is a pure function of its arguments.
pub fn generate(
    denoiser: &impl NoisePredictor,
    n: usize,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<Point>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = gaussian_points(&mut rng, n);
    for t in (1..=sched.steps()).rev() {
        let eps_hat = denoiser.predict_noise(&x, t)?;
        if eps_hat.len() != n {
            return Err(Error::shape(format!(
                "denoiser returned {} points at step {t}, expected {n}",
                eps_hat.len()
            )));
        }
        let noise = if t > 1 {
            gaussian_points(&mut rng, n)
        } else {
            vec![[0.0; 3]; n]
        };
        x = sched.reverse_step(&x, t, &eps_hat, &noise)?;
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("reverse step t = {t}")));
        }
    }
    Ok(x)
}
