//! Minimal layer toolkit on top of candle. Parameters are initialized from a
//! seeded ChaCha stream (candle's CPU generator cannot be seeded) and kept in a
//! name-ordered map so checkpoints and optimizer state are deterministic.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
    /// Identity matrix; square 2-D shapes only.
    Eye,
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} declared twice")));
        }
        let n: usize = shape.iter().product();
        if matches!(init, Init::Eye) && !matches!(shape, [a, b] if a == b) {
            return Err(Error::Shape(format!("identity init of {name} needs a square matrix, got {shape:?}")));
        }
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Eye => (0..n).map(|i| if i % (shape[0] + 1) == 0 { 1.0 } else { 0.0 }).collect(),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_where(&self, keep: impl Fn(&str) -> bool) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn named(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Detached copies of every parameter.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites every parameter in place; names and shapes must match exactly.
    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in tensors.keys() {
            if !self.vars.contains_key(name) {
                return Err(Error::Compatibility(format!("unexpected parameter {name}")));
            }
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Compatibility(format!("missing parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Compatibility(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Sets one parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }
}

/// Affine map over the last dimension; weight stored `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, bias, Init::Uniform(1.0 / (d_in as f64).sqrt()))
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zeros(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(ps, name, d_in, d_out, true, Init::Zeros)
    }

    pub fn with_init(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = ps.param(&format!("{name}.weight"), &[d_in, d_out], init)?;
        let bias = if bias {
            let b_init = match init {
                Init::Zeros | Init::Eye => Init::Zeros,
                _ => Init::Uniform(1.0 / (d_in as f64).sqrt()),
            };
            Some(ps.param(&format!("{name}.bias"), &[d_out], b_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let (w_in, w_out) = self.weight.dims2()?;
        if d_in != w_in {
            return Err(Error::Shape(format!("linear expects last dim {w_in}, got {dims:?}")));
        }
        let rows = x.elem_count() / d_in;
        let mut y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = w_out;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dim = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / dim)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = (centered.sqr()?.sum_keepdim(D::Minus1)? / dim)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Softmax along the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

/// Scaled dot-product multi-head attention.
///
/// `q: (n, lq, c)`, `k`/`v: (n, lk, c)`; `key_mask: (n, lk)` with 1 for
/// attendable keys. Returns the `(n, lq, c)` output and `(n, heads, lq, lk)`
/// attention weights.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    key_mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (n, lq, c) = q.dims3()?;
    let (_, lk, _) = k.dims3()?;
    if c % heads != 0 {
        return Err(Error::Shape(format!("{c} channels not divisible by {heads} heads")));
    }
    let hd = c / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((n, l, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let qh = split(q, lq)?;
    let kh = split(k, lk)?;
    let vh = split(v, lk)?;
    let mut scores = (qh.matmul(&kh.transpose(2, 3)?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
    if let Some(mask) = key_mask {
        // 0 where valid, -1e9 where masked
        let bias = ((mask.to_dtype(scores.dtype())? - 1.0)? * 1e9)?.reshape((n, 1, 1, lk))?;
        scores = scores.broadcast_add(&bias)?;
    }
    let weights = softmax_last(&scores)?;
    let out = weights
        .matmul(&vh)?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, lq, c))?;
    Ok((out, weights))
}

/// Concatenates `[x_{t-1}, x_t, x_{t+1}]` on the last axis with edge replication.
pub fn temporal_neighbours(x: &Tensor) -> Result<Tensor> {
    let t = x.dim(1)?;
    let (prev, next) = if t == 1 {
        (x.clone(), x.clone())
    } else {
        (
            Tensor::cat(&[x.narrow(1, 0, 1)?, x.narrow(1, 0, t - 1)?], 1)?,
            Tensor::cat(&[x.narrow(1, 1, t - 1)?, x.narrow(1, t - 1, 1)?], 1)?,
        )
    };
    Ok(Tensor::cat(&[&prev, x, &next], D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_seed_deterministic() {
        let mut a = ParamStore::new(4, DType::F32);
        let mut b = ParamStore::new(4, DType::F32);
        let ta = a.param("w", &[3, 5], Init::Normal(1.0)).unwrap();
        let tb = b.param("w", &[3, 5], Init::Normal(1.0)).unwrap();
        assert_eq!(ta.to_vec2::<f32>().unwrap(), tb.to_vec2::<f32>().unwrap());
        assert!(a.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn eye_init() {
        let mut ps = ParamStore::new(0, DType::F32);
        let e = ps.param("e", &[3, 3], Init::Eye).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(e, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert!(ps.param("r", &[2, 3], Init::Eye).is_err());
    }

    #[test]
    fn attention_rows_are_stochastic_under_mask() {
        let mut ps = ParamStore::new(0, DType::F32);
        let q = ps.param("q", &[2, 3, 8], Init::Normal(1.0)).unwrap();
        let k = ps.param("k", &[2, 5, 8], Init::Normal(1.0)).unwrap();
        let mask = Tensor::from_vec(vec![1f32, 1., 0., 1., 0., 1., 1., 1., 1., 1.], (2, 5), &Device::Cpu).unwrap();
        let (out, w) = multi_head_attention(&q, &k, &k, 2, Some(&mask)).unwrap();
        assert_eq!(out.dims(), &[2, 3, 8]);
        let sums = w.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        for s in sums {
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let q = Tensor::ones((1, 1, 4), DType::F32, &Device::Cpu).unwrap();
        let k = Tensor::ones((1, 3, 4), DType::F32, &Device::Cpu).unwrap();
        let mask = Tensor::from_vec(vec![1f32, 0., 1.], (1, 3), &Device::Cpu).unwrap();
        let (_, w) = multi_head_attention(&q, &k, &k, 1, Some(&mask)).unwrap();
        let w = w.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((w[0] - 0.5).abs() < 1e-6 && w[1] < 1e-6 && (w[2] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut ps = ParamStore::new(0, DType::F64);
        let ln = LayerNorm::new(&mut ps, "ln", 4).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], (1, 4), &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
