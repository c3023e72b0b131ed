//! Rectified-flow objective and Euler sampler.
//!
//! Data sits at time 0 and noise at time 1 on the straight path
//! `x_t = (1 − t)·x0 + t·x1`, whose velocity is `x1 − x0`.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VideoError};

/// Anything that predicts a velocity for `x_t` `(B, ...)` at times `(B,)`.
pub trait VelocityModel {
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, time: &Tensor) -> Result<Tensor>;
}

impl<F> VelocityModel for F
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Result<Tensor>,
{
    fn velocity(&self, x_t: &Tensor, cond: &Tensor, time: &Tensor) -> Result<Tensor> {
        self(x_t, cond, time)
    }
}

#[derive(Debug, Clone)]
pub struct FlowSample {
    pub x0: Tensor,
    pub x1: Tensor,
    /// Per-sample times `(B,)` in `[0, 1]`.
    pub time: Tensor,
    pub x_t: Tensor,
    /// Target velocity `x1 − x0`.
    pub v: Tensor,
}

/// Broadcast per-sample times `(B,)` against `x` `(B, ...)`.
fn per_sample(time: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![x.dim(0)?];
    shape.extend(std::iter::repeat(1).take(x.rank() - 1));
    Ok(time.reshape(shape)?.to_dtype(x.dtype())?)
}

pub fn flow_interpolate(x0: &Tensor, x1: &Tensor, time: &Tensor) -> Result<FlowSample> {
    if x0.dims() != x1.dims() {
        return Err(VideoError::Shape(format!("x0 {:?} vs x1 {:?}", x0.dims(), x1.dims())));
    }
    if time.dims() != [x0.dim(0)?] {
        return Err(VideoError::Shape(format!("time {:?} for batch {}", time.dims(), x0.dim(0)?)));
    }
    let ts = time.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(VideoError::Shape(format!("time {bad} outside [0, 1]")));
    }
    let t = per_sample(time, x0)?;
    let x_t = (x0.broadcast_mul(&(1.0 - &t)?)? + x1.broadcast_mul(&t)?)?;
    Ok(FlowSample {
        x0: x0.clone(),
        x1: x1.clone(),
        time: time.clone(),
        x_t,
        v: (x1 - x0)?,
    })
}

pub fn gaussian_like(x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let data: Vec<f64> = (0..x.elem_count()).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, x.shape(), x.device())?.to_dtype(x.dtype())?)
}

/// Monte-Carlo flow-matching loss: `t ~ U(0, 1)`, `x1 ~ N(0, I)`, mean squared
/// error between the model's velocity and `x1 − x0`.
pub fn video_loss(model: &impl VelocityModel, x0: &Tensor, cond: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let b = x0.dim(0)?;
    let times: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
    let time = Tensor::from_vec(times, b, x0.device())?.to_dtype(x0.dtype())?;
    let x1 = gaussian_like(x0, rng)?;
    let s = flow_interpolate(x0, &x1, &time)?;
    let u = model.velocity(&s.x_t, cond, &s.time)?;
    if u.dims() != x0.dims() {
        return Err(VideoError::Shape(format!("velocity {:?} for sample {:?}", u.dims(), x0.dims())));
    }
    let loss = (u - s.v)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(VideoError::NonFinite { what: "video loss".into(), step: 0 });
    }
    Ok(loss)
}

/// Integrate from pure noise at time 1 to time 0 with `steps` Euler steps.
pub fn sample_video(model: &impl VelocityModel, cond: &Tensor, shape: &[usize], steps: usize, seed: u64) -> Result<Tensor> {
    let x1 = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::zeros(shape, cond.dtype(), cond.device())?;
        gaussian_like(&z, &mut rng)?
    };
    euler(model, cond, &x1, steps)
}

/// Euler integration of `dx/dt = u` from time 1 down to 0 starting at `x1`.
pub fn euler(model: &impl VelocityModel, cond: &Tensor, x1: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(VideoError::Config("sampler needs at least one step".into()));
    }
    let b = x1.dim(0)?;
    let dt = 1.0 / steps as f64;
    let mut x = x1.clone();
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let time = Tensor::full(t, b, x.device())?.to_dtype(x.dtype())?;
        let u = model.velocity(&x, cond, &time)?;
        x = (x - (u * dt)?)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn interpolation_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = Tensor::zeros((3, 2, 4), DType::F64, &Device::Cpu).unwrap();
        let x0 = gaussian_like(&z, &mut rng).unwrap();
        let x1 = gaussian_like(&z, &mut rng).unwrap();
        let max_diff = |a: &Tensor, b: &Tensor| (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let at0 = flow_interpolate(&x0, &x1, &Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        let at1 = flow_interpolate(&x0, &x1, &Tensor::ones(3, DType::F64, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(max_diff(&at0.x_t, &x0), 0.0);
        assert_eq!(max_diff(&at1.x_t, &x1), 0.0);
        assert!(max_diff(&at0.v, &(&x1 - &x0).unwrap()) < 1e-15);
        let mid = flow_interpolate(&x0, &x1, &Tensor::full(0.5f64, 3, &Device::Cpu).unwrap()).unwrap();
        assert!(max_diff(&mid.x_t, &((&x0 + &x1).unwrap() * 0.5).unwrap()) < 1e-15);
        assert!(flow_interpolate(&x0, &x1, &Tensor::full(1.5f64, 3, &Device::Cpu).unwrap()).is_err());
        assert!(flow_interpolate(&x0, &x1.narrow(2, 0, 2).unwrap(), &Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn euler_is_exact_for_a_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::zeros((2, 5), DType::F64, &Device::Cpu).unwrap();
        let x0 = gaussian_like(&z, &mut rng).unwrap();
        let x1 = gaussian_like(&z, &mut rng).unwrap();
        let v = (&x1 - &x0).unwrap();
        let field = |_: &Tensor, _: &Tensor, _: &Tensor| Ok(v.clone());
        for steps in [1, 7, 20] {
            let out = euler(&field, &z, &x1, steps).unwrap();
            let err = (out - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(err < 1e-12, "{steps} steps: {err}");
        }
    }
}
