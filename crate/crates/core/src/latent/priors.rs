//! Likelihood models for the quantized latents: a per-channel learned
//! factorized density and a conditional Gaussian driven by the hyperprior.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};

/// Every discretized likelihood is floored here so rates stay finite.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;
/// Lower bound on the conditional Gaussian scale.
pub const SIGMA_MIN: f64 = 0.04;

const WIDTHS: [usize; 4] = [1, 3, 3, 1];
/// Spread of the initial cumulative: the composed map starts with slope
/// `1 / INIT_SCALE`.
const INIT_SCALE: f64 = 4.0;

/// Fully factorized density: each channel owns a monotone map
/// `c: R -> (0, 1)` made of three composed layers, each a nonnegative
/// (softplus-reparameterized) affine map followed by the gate
/// `x + tanh(a) * tanh(x)`; the last layer ends in a sigmoid.
pub struct FactorizedPrior {
    channels: usize,
    matrices: Vec<Tensor>,
    biases: Vec<Tensor>,
    factors: Vec<Tensor>,
}

impl FactorizedPrior {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let layers = WIDTHS.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / layers as f64);
        let mut matrices = Vec::new();
        let mut biases = Vec::new();
        let mut factors = Vec::new();
        for k in 0..layers {
            let (fan_in, fan_out) = (WIDTHS[k], WIDTHS[k + 1]);
            let init = (1.0 / scale / fan_out as f64).exp_m1().ln();
            matrices.push(store.create(
                &format!("{name}.matrix{k}"),
                &[channels, fan_out, fan_in],
                Init::Const(init),
            )?);
            biases.push(store.create(
                &format!("{name}.bias{k}"),
                &[channels, fan_out, 1],
                Init::Uniform(0.5),
            )?);
            if k + 1 < layers {
                factors.push(store.create(
                    &format!("{name}.factor{k}"),
                    &[channels, fan_out, 1],
                    Init::Const(0.0),
                )?);
            }
        }
        Ok(Self {
            channels,
            matrices,
            biases,
            factors,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logit of the cumulative for channel-major inputs `(channels, 1, n)`.
    pub fn logits_cumulative(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for k in 0..self.matrices.len() {
            let w = nn::softplus(&self.matrices[k])?;
            h = w.matmul(&h)?.broadcast_add(&self.biases[k])?;
            if let Some(a) = self.factors.get(k) {
                h = h.add(&a.tanh()?.broadcast_mul(&h.tanh()?)?)?;
            }
        }
        Ok(h)
    }

    /// Cumulative `c(x)` for channel-major inputs `(channels, 1, n)`.
    pub fn cdf(&self, x: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.logits_cumulative(x)?)
    }

    /// Discretized likelihood `c(y + 1/2) - c(y - 1/2)` for latents shaped
    /// `(B, M, channels)`, floored at [`LIKELIHOOD_FLOOR`].
    pub fn likelihood(&self, y: &Tensor) -> Result<Tensor> {
        floor_likelihood(&self.pmf(y)?)
    }

    /// [`Self::likelihood`] before the floor.
    pub fn pmf(&self, y: &Tensor) -> Result<Tensor> {
        let (b, m, c) = y.dims3()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "factorized prior has {} channels, latent has {c}",
                self.channels
            )));
        }
        let cm = y.permute((2, 0, 1))?.reshape((c, 1, b * m))?;
        let lower = self.logits_cumulative(&cm.affine(1.0, -0.5)?)?;
        let upper = self.logits_cumulative(&cm.affine(1.0, 0.5)?)?;
        // Evaluate on the side of the median where the sigmoid is not
        // saturated.
        let sign = lower
            .add(&upper)?
            .gt(0.0)?
            .to_dtype(lower.dtype())?
            .affine(-2.0, 1.0)?
            .detach();
        let p = nn::sigmoid(&sign.mul(&upper)?)?
            .sub(&nn::sigmoid(&sign.mul(&lower)?)?)?
            .abs()?;
        Ok(p.reshape((c, b, m))?.permute((1, 2, 0))?)
    }

    /// Logits of the cumulative at the half-integers `lo - 1/2 ..= hi + 1/2`
    /// for every channel, on the host in double precision.
    pub fn logit_grid(&self, lo: i32, hi: i32) -> Result<Vec<Vec<f64>>> {
        let n = (hi - lo + 2) as usize;
        let dtype = self.matrices[0].dtype();
        let row: Vec<f64> = (0..n).map(|i| lo as f64 - 0.5 + i as f64).collect();
        let data: Vec<f64> = (0..self.channels).flat_map(|_| row.iter().copied()).collect();
        let x = nn::tensor_from(data, &[self.channels, 1, n], dtype)?;
        let logits = self
            .logits_cumulative(&x)?
            .to_dtype(DType::F64)?
            .reshape((self.channels, n))?;
        Ok(logits.to_vec2::<f64>()?)
    }
}

pub(crate) fn floor_likelihood(p: &Tensor) -> Result<Tensor> {
    Ok(p.maximum(LIKELIHOOD_FLOOR)?)
}

/// Mean and scale of the conditional Gaussian for every detail-latent entry.
#[derive(Debug, Clone)]
pub struct EntropyParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Standard normal CDF on tensors.
fn normal_cdf(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(std::f64::consts::FRAC_1_SQRT_2, 0.0)?
        .erf()?
        .affine(0.5, 0.5)?)
}

/// `Phi((y - mu + 1/2) / sigma) - Phi((y - mu - 1/2) / sigma)`, floored.
pub fn gaussian_conditional_likelihood(y: &Tensor, params: &EntropyParams) -> Result<Tensor> {
    floor_likelihood(&gaussian_conditional_pmf(y, params)?)
}

/// [`gaussian_conditional_likelihood`] before the floor.
///
/// Evaluated on `|y - mu|` so both arguments stay on the lower tail of the
/// CDF, where it is accurate.
pub fn gaussian_conditional_pmf(y: &Tensor, params: &EntropyParams) -> Result<Tensor> {
    if y.dims() != params.mu.dims() || y.dims() != params.sigma.dims() {
        return Err(Error::shape(format!(
            "latent {:?} vs entropy params {:?}",
            y.dims(),
            params.mu.dims()
        )));
    }
    let sigma = params.sigma.maximum(SIGMA_MIN)?;
    let v = y.sub(&params.mu)?.abs()?;
    let upper = normal_cdf(&v.neg()?.affine(1.0, 0.5)?.div(&sigma)?)?;
    let lower = normal_cdf(&v.neg()?.affine(1.0, -0.5)?.div(&sigma)?)?;
    Ok(upper.sub(&lower)?)
}

/// `sum(-log2 p)` over all but the leading (batch) dimension.
pub fn bits(likelihood: &Tensor) -> Result<Tensor> {
    let b = likelihood.dims()[0];
    Ok(likelihood
        .log()?
        .affine(-std::f64::consts::LOG2_E, 0.0)?
        .reshape((b, ()))?
        .sum(D::Minus1)?)
}
