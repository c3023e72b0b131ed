use candle_core::{DType, Device, Tensor, Var};
use occdrive_core::LabelPalette;
use occdrive_nn::ParamStore;
use occdrive_video::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_like(&Tensor::zeros(shape, DType::F64, &Device::Cpu).unwrap(), &mut rng).unwrap()
}

fn scalar(x: &Tensor) -> f64 {
    x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn oracle_velocity_has_zero_loss() {
    let x0 = normal(&[16, 12], 0);
    let cond = Tensor::zeros(16, DType::F64, &Device::Cpu).unwrap();
    // knows x0, so x1 - x0 = (x_t - x0) / t
    let oracle = |x_t: &Tensor, _: &Tensor, t: &Tensor| -> Result<Tensor> {
        Ok((x_t - &x0)?.broadcast_div(&t.reshape((16, 1))?)?)
    };
    let loss = video_loss(&oracle, &x0, &cond, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(scalar(&loss) < 1e-12, "{}", scalar(&loss));
}

#[test]
fn zero_model_loss_matches_expectation() {
    // E|x1 - x0|^2 / dim = Var(x1) + Var(x0) = 2 for unit-variance data
    let x0 = normal(&[1000, 16], 2);
    let cond = Tensor::zeros(1000, DType::F64, &Device::Cpu).unwrap();
    let zero = |x_t: &Tensor, _: &Tensor, _: &Tensor| -> Result<Tensor> { Ok(x_t.zeros_like()?) };
    let loss = scalar(&video_loss(&zero, &x0, &cond, &mut ChaCha8Rng::seed_from_u64(3)).unwrap());
    assert!((loss - 2.0).abs() / 2.0 < 0.05, "loss {loss}");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let x0 = normal(&[8, 6], 4);
    let cond = Tensor::zeros(8, DType::F64, &Device::Cpu).unwrap();
    let a = Var::new(0.3f64, &Device::Cpu).unwrap();
    let b = Var::new(-0.2f64, &Device::Cpu).unwrap();
    let loss_at = |a: &Tensor, b: &Tensor| {
        let model = |x_t: &Tensor, _: &Tensor, _: &Tensor| -> Result<Tensor> {
            Ok(x_t.broadcast_mul(a)?.broadcast_add(b)?)
        };
        video_loss(&model, &x0, &cond, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    };
    let grads = loss_at(a.as_tensor(), b.as_tensor()).backward().unwrap();
    let analytic = [scalar(grads.get(a.as_tensor()).unwrap()), scalar(grads.get(b.as_tensor()).unwrap())];
    let h = 1e-6;
    let at = |da: f64, db: f64| {
        let a = Tensor::new(0.3 + da, &Device::Cpu).unwrap();
        let b = Tensor::new(-0.2 + db, &Device::Cpu).unwrap();
        scalar(&loss_at(&a, &b))
    };
    let numeric = [(at(h, 0.0) - at(-h, 0.0)) / (2.0 * h), (at(0.0, h) - at(0.0, -h)) / (2.0 * h)];
    let diff = ((analytic[0] - numeric[0]).powi(2) + (analytic[1] - numeric[1]).powi(2)).sqrt();
    let scale = (analytic[0].powi(2) + analytic[1].powi(2)).sqrt().max((numeric[0].powi(2) + numeric[1].powi(2)).sqrt());
    assert!(diff / scale < 1e-4, "analytic {analytic:?} numeric {numeric:?}");
}

#[test]
fn non_finite_loss_is_an_error() {
    let x0 = normal(&[2, 3], 6);
    let cond = Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap();
    let nan = |x_t: &Tensor, _: &Tensor, _: &Tensor| -> Result<Tensor> { Ok((x_t.zeros_like()? / 0.0)?) };
    assert!(matches!(
        video_loss(&nan, &x0, &cond, &mut ChaCha8Rng::seed_from_u64(0)),
        Err(VideoError::NonFinite { .. })
    ));
}

#[test]
fn sampling_is_deterministic_with_the_configured_shape() {
    let cfg = VideoConfig {
        frames: 2,
        height: 8,
        width: 8,
        hidden: 16,
        heads: 2,
        blocks: 2,
        ..Default::default()
    };
    let mut store = ParamStore::new(0, DType::F32);
    let model = ToyVideoModel::new(&mut store, &cfg).unwrap();
    // make the head non-trivial so samples depend on the weights
    store.set("final.out.b", &Tensor::full(0.1f32, 48, &Device::Cpu).unwrap()).unwrap();
    let labels = vec![1u8; 2 * 2 * 64];
    let cond = condition_one_hot(&labels, [1, 2, 2, 8, 8], LabelPalette::driving().n_classes, DType::F32).unwrap();
    let shape = [1, 2, 2, 3, 8, 8];
    let a = sample_video(&model, &cond, &shape, 5, 9).unwrap();
    let b = sample_video(&model, &cond, &shape, 5, 9).unwrap();
    let c = sample_video(&model, &cond, &shape, 5, 10).unwrap();
    assert_eq!(a.dims(), &shape);
    let flat = |x: &Tensor| x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&a), flat(&b));
    assert_ne!(flat(&a), flat(&c));
    assert!(sample_video(&model, &cond, &shape, 0, 9).is_err());
}
