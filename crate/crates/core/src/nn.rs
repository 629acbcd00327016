//! Small building blocks over candle tensors: a named parameter store with
//! seeded initialization, dense layers and a few differentiable helpers.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    Uniform(f64),
}

/// Named trainable tensors. Iteration order is the lexicographic name
/// order, which fixes checkpoint layout and optimizer order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter '{name}'")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform(bound) => (0..n)
                .map(|_| self.rng.random_range(-bound..=bound))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Dense layer with uniform `1/sqrt(fan_in)` initialization.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.linear_init(name, fan_in, fan_out, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn linear_init(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Linear> {
        Ok(Linear {
            weight: self.create(&format!("{name}.weight"), &[fan_in, fan_out], weight)?,
            bias: self.create(&format!("{name}.bias"), &[fan_out], bias)?,
        })
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }
}

/// `y = x W + b` applied over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::shape("linear of a scalar"))?;
        let (w_in, w_out) = self.weight.dims2()?;
        if fan_in != w_in {
            return Err(Error::shape(format!(
                "linear expects {w_in} input features, got {fan_in}"
            )));
        }
        let rows = x.elem_count() / fan_in;
        let y = x
            .reshape((rows, fan_in))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = w_out;
        Ok(y.reshape(out_dims)?)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Smooth activation used throughout the networks.
pub fn act(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// `log(1 + exp(x))`, computed stably.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok(x.relu()?.add(&tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

/// Layer normalization over the last dimension without an affine part.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&var.affine(1.0, eps)?.sqrt()?)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Gathers rows per batch: `x` is `(B, N, C)`, `indices` holds `B * M`
/// row indices local to each batch entry. Returns `(B, M, C)`.
pub fn gather_rows(x: &Tensor, indices: &[usize], m: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    if indices.len() != b * m {
        return Err(Error::shape(format!(
            "gather expects {} indices, got {}",
            b * m,
            indices.len()
        )));
    }
    let flat: Vec<u32> = indices
        .iter()
        .enumerate()
        .map(|(i, &j)| ((i / m) * n + j) as u32)
        .collect();
    let idx = Tensor::from_vec(flat, b * m, x.device())?;
    Ok(x.reshape((b * n, c))?.index_select(&idx, 0)?.reshape((b, m, c))?)
}

/// Host-side buffer to a tensor of the store's dtype.
pub fn tensor_from(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn ensure_finite(t: &Tensor, stage: &str) -> Result<()> {
    let ok = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|v| v.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::non_finite(stage))
    }
}
