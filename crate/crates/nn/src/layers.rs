use std::cell::RefCell;

use candle_core::{Result, Tensor, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::store::{Init, Scope};

/// Affine map over the last dimension. The weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = scope.get("w", &[d_in, d_out], Init::Uniform(bound))?;
        let bias = scope.get("b", &[d_out], Init::Uniform(bound))?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zeros(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = scope.get("w", &[d_in, d_out], Init::Zeros)?;
        let bias = scope.get("b", &[d_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn no_bias(scope: &mut Scope<'_>, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = scope.get("w", &[d_in, d_out], Init::Uniform(bound))?;
        Ok(Self { weight, bias: None })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("non-scalar input");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        y.reshape(out_dims)
    }
}

/// Layer normalization over the last dimension, built from differentiable ops.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &mut Scope<'_>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.get("g", &[dim], Init::Ones)?,
            beta: scope.get("b", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.eps)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Parameter-free normalization to zero mean / unit variance over the last dim.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.gelu()
}

/// Softmax over the last dimension; the max shift is detached.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    e.broadcast_div(&s)
}

/// Scaled dot-product attention on `(B, H, L, dh)` tensors.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
    softmax_last(&scores)?.matmul(v)
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(scope: &mut Scope<'_>, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut scope.pp("fc1"), d_in, hidden)?,
            fc2: Linear::new(&mut scope.pp("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }

    pub fn forward_with(&self, x: &Tensor, drop: &Dropout) -> Result<Tensor> {
        let h = drop.apply(&gelu(&self.fc1.forward(x)?)?)?;
        self.fc2.forward(&h)
    }
}

/// Multi-head attention with separate query / key / value inputs of shape
/// `(B, L, C)`. The output projection is named `o`.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(scope: &mut Scope<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            candle_core::bail!("attention width {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::new(&mut scope.pp("q"), dim, dim)?,
            k: Linear::new(&mut scope.pp("k"), dim, dim)?,
            v: Linear::new(&mut scope.pp("v"), dim, dim)?,
            o: Linear::new(&mut scope.pp("o"), dim, dim)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        x.reshape((b, l, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()
    }

    pub fn forward_qkv(&self, q_in: &Tensor, k_in: &Tensor, v_in: &Tensor) -> Result<Tensor> {
        let (b, lq, c) = q_in.dims3()?;
        let q = self.split(&self.q.forward(q_in)?)?;
        let k = self.split(&self.k.forward(k_in)?)?;
        let v = self.split(&self.v.forward(v_in)?)?;
        let out = attention(&q, &k, &v)?.transpose(1, 2)?.reshape((b, lq, c))?;
        self.o.forward(&out)
    }

    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor) -> Result<Tensor> {
        self.forward_qkv(q_in, kv_in, kv_in)
    }
}

/// Inverted dropout with a seeded mask stream; identity when disabled.
#[derive(Debug)]
pub struct Dropout {
    p: f64,
    rng: Option<RefCell<ChaCha8Rng>>,
}

impl Dropout {
    pub fn disabled() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        if p <= 0.0 {
            return Self::disabled();
        }
        Self {
            p,
            rng: Some(RefCell::new(rng)),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match &self.rng {
            None => Ok(x.clone()),
            Some(rng) => dropout(x, self.p, &mut rng.borrow_mut()),
        }
    }
}

pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    x.mul(&mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ParamStore;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn linear_handles_leading_dims() {
        let mut s = ParamStore::new(0, DType::F64);
        let lin = Linear::new(&mut s.root().pp("l"), 3, 2).unwrap();
        let x = Tensor::arange(0.0f64, 24.0, &Device::Cpu).unwrap().reshape((2, 4, 3)).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 2]);
        let w = lin.weight.to_vec2::<f64>().unwrap();
        let b = lin.bias.as_ref().unwrap().to_vec1::<f64>().unwrap();
        let row = y.get(1).unwrap().get(2).unwrap().to_vec1::<f64>().unwrap();
        let xin = [18.0, 19.0, 20.0];
        for o in 0..2 {
            let expect: f64 = (0..3).map(|i| xin[i] * w[i][o]).sum::<f64>() + b[o];
            assert!((row[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = layer_norm(&x, 0.0).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let dev = Device::Cpu;
        let q = Tensor::new(&[0.3f64, -1.2], &dev).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let k = Tensor::new(&[2.0f64, 0.5], &dev).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let v = Tensor::new(&[7.0f64, -3.0], &dev).unwrap().reshape((1, 1, 1, 2)).unwrap();
        let out = attention(&q, &k, &v).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(out, vec![7.0, -3.0]);
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let x = Tensor::ones((1000,), DType::F64, &Device::Cpu).unwrap();
        let a = dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = dropout(&x, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let av = a.to_vec1::<f64>().unwrap();
        assert_eq!(av, b.to_vec1::<f64>().unwrap());
        assert!(av.iter().all(|&v| v == 0.0 || v == 2.0));
        let mean = av.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.15);
        assert_eq!(Dropout::disabled().apply(&x).unwrap().to_vec1::<f64>().unwrap(), vec![1.0; 1000]);
    }
}
