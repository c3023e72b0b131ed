use candle_core::{DType, Device, Tensor, Var};
use occdrive_nn::ParamStore;
use occdrive_video::*;
use proptest::prelude::*;

fn block(seed: u64, dim: usize, eta: f64, mode: NormMode) -> (ParamStore, NormalizedMva) {
    let mut store = ParamStore::new(seed, DType::F64);
    let mva = NormalizedMva::new(&mut store.root().pp("mva"), dim, 2, eta, mode).unwrap();
    (store, mva)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::zeros(shape, DType::F64, &Device::Cpu).unwrap();
    (gaussian_like(&z, &mut rng).unwrap() * 1.7).unwrap().affine(1.0, 0.4).unwrap()
}

fn unit(shape: &[usize], seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    gaussian_like(&Tensor::zeros(shape, DType::F64, &Device::Cpu).unwrap(), &mut rng).unwrap()
}

fn max_abs(x: &Tensor) -> f64 {
    x.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn zero_eta_is_exact_passthrough() {
    for mode in [NormMode::Group, NormMode::PerChannel, NormMode::None] {
        let (_s, mva) = block(0, 8, 0.0, mode);
        let z = randn(&[3, 6, 8], 1);
        let out = normalized_mva(&z, &mva).unwrap();
        assert_eq!(out.to_vec3::<f64>().unwrap(), z.to_vec3::<f64>().unwrap());
    }
}

fn group_stats(x: &Tensor, g: usize) -> (f64, f64) {
    let v = x.get(g).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mu = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    (mu, sd)
}

// The eps in the denominator shrinks the branch std by sigma_Z * eps / (sigma_M + eps),
// which is the only departure from the trunk statistics.
#[test]
fn branch_matches_trunk_statistics_per_group() {
    for seed in 0..10 {
        let (_s, mva) = block(seed, 8, 1.0, NormMode::Group);
        let z = unit(&[4, 6, 8], 100 + seed);
        let b = mva.branch(&z).unwrap();
        let m = mva.attn.forward(&z, &z).unwrap();
        for g in 0..4 {
            let (mb, sb) = group_stats(&b, g);
            let (mz, sz) = group_stats(&z, g);
            let (_, sm) = group_stats(&m, g);
            assert!((mb - mz).abs() < 1e-5, "group {g} mean {mb} vs {mz}");
            assert!((sb - sz * sm / (sm + MVA_EPS)).abs() < 1e-12, "group {g} std {sb} vs {sz}");
            assert!((sb - sz).abs() <= 1.01 * sz * MVA_EPS / sm);
        }
    }
}

#[test]
fn per_channel_mode_matches_channel_statistics() {
    let (_s, mva) = block(3, 4, 1.0, NormMode::PerChannel);
    let z = randn(&[2, 5, 4], 9);
    let b = mva.branch(&z).unwrap();
    let mb = b.mean_keepdim(1).unwrap();
    let mz = z.mean_keepdim(1).unwrap();
    assert!(max_abs(&(mb - mz).unwrap()) < 1e-5);
}

#[test]
fn groups_never_mix() {
    let (_s, mva) = block(5, 8, 1.0, NormMode::Group);
    let z0 = randn(&[2, 6, 8], 11);
    let base = normalized_mva(&z0, &mva).unwrap();
    // finite-difference probe: perturbing group 1 leaves group 0 bit-identical
    let mut data = z0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    for i in [48, 60, 95] {
        let old = data[i];
        data[i] = old + 1e-3;
        let z = Tensor::from_vec(data.clone(), (2, 6, 8), &Device::Cpu).unwrap();
        let out = normalized_mva(&z, &mva).unwrap();
        assert_eq!(out.get(0).unwrap().to_vec2::<f64>().unwrap(), base.get(0).unwrap().to_vec2::<f64>().unwrap());
        assert!(max_abs(&(out.get(1).unwrap() - base.get(1).unwrap()).unwrap()) > 0.0);
        data[i] = old;
    }
    // and the analytic Jacobian block is zero
    let zv = Var::from_tensor(&z0).unwrap();
    let out = normalized_mva(zv.as_tensor(), &mva).unwrap();
    let w = randn(&[6, 8], 12);
    let grads = out.get(0).unwrap().mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
    let g = grads.get(zv.as_tensor()).unwrap();
    assert_eq!(max_abs(&g.get(1).unwrap()), 0.0);
    assert!(max_abs(&g.get(0).unwrap()) > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rearrange_round_trips(n in 1usize..4, t in 1usize..4, h in 1usize..4, w in 1usize..4, c in 1usize..4, seed in 0u64..100) {
        let z = randn(&[n, t * h * w, c], seed);
        let r = rearrange_views(&z, t, h, w).unwrap();
        prop_assert_eq!(r.dims(), &[t * h, n * w, c]);
        let back = unrearrange_views(&r, n, t, h, w).unwrap();
        prop_assert_eq!(back.to_vec3::<f64>().unwrap(), z.to_vec3::<f64>().unwrap());
    }
}
