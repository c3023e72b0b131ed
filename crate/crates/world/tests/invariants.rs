use candle_core::{DType, Device, Tensor};
use occdrive_core::{generate_synthetic_sequence, LabelPalette, OccupancyGrid, SceneGenConfig};
use occdrive_nn::{Dropout, ParamStore};
use occdrive_world::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Tensor, Vec<f64>) {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    (Tensor::from_vec(v.clone(), shape, &Device::Cpu).unwrap(), v)
}

fn tiny_gen() -> SceneGenConfig {
    SceneGenConfig { dims: [16, 16, 8], seq_len: 6, n_buildings: 4, n_poles: 3, n_vehicles: 2, ..Default::default() }
}

fn tiny_vae(store: &mut ParamStore) -> TriPlaneVae {
    let cfg = VaeConfig { channels: 16, heads: 2, dropout: 0.3, ..Default::default() };
    TriPlaneVae::new(store, &cfg, [16, 16, 8]).unwrap()
}

#[test]
fn compose_volume_matches_triple_loop_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, h, w, d, c) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..4));
        let (xy, a) = randn(&mut rng, &[n, h, w, c]);
        let (yz, b) = randn(&mut rng, &[n, w, d, c]);
        let (xz, e) = randn(&mut rng, &[n, h, d, c]);
        let out = compose_volume(&TriPlane { xy, yz, xz }).unwrap();
        assert_eq!(out.dims(), &[n, h, w, d, c]);
        let got = out.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut idx = 0;
        for bn in 0..n {
            for i in 0..h {
                for j in 0..w {
                    for k in 0..d {
                        for ch in 0..c {
                            let want = a[((bn * h + i) * w + j) * c + ch]
                                * b[((bn * w + j) * d + k) * c + ch]
                                * e[((bn * h + i) * d + k) * c + ch];
                            assert!((got[idx] - want).abs() <= 1e-12 * want.abs().max(1.0));
                            idx += 1;
                        }
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kl_is_nonnegative(seed in 0u64..10_000, h in 1usize..4, d in 1usize..3, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut plane = |a: usize, b: usize| randn(&mut rng, &[1, a, b, c]).0;
        let mean = TriPlane { xy: plane(h, h), yz: plane(h, d), xz: plane(h, d) };
        let logvar = TriPlane { xy: plane(h, h), yz: plane(h, d), xz: plane(h, d) };
        let kl = kl_divergence(&mean, &logvar).unwrap().to_scalar::<f64>().unwrap();
        prop_assert!(kl >= 0.0);
        let zero = kl_divergence(&mean.detach(), &logvar.detach()).unwrap();
        prop_assert!(zero.to_scalar::<f64>().unwrap() >= 0.0);
    }

    #[test]
    fn token_layout_round_trips(seed in 0u64..10_000, h in 1usize..5, d in 1usize..4, c in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = TriPlane {
            xy: randn(&mut rng, &[2, h, h, c]).0,
            yz: randn(&mut rng, &[2, h, d, c]).0,
            xz: randn(&mut rng, &[2, h, d, c]).0,
        };
        let tokens = to_tokens(&z).unwrap();
        prop_assert_eq!(tokens.dims(), &[2, h * (h + 2 * d), c]);
        let back = from_tokens(&tokens, [h, h, d]).unwrap();
        for (x, y) in z.planes().into_iter().zip(back.planes()) {
            let diff = (x - y).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            prop_assert_eq!(diff, 0.0);
        }
    }
}

#[test]
fn kl_vanishes_at_standard_normal() {
    let z = Tensor::zeros((1, 2, 2, 3), DType::F64, &Device::Cpu).unwrap();
    let p = TriPlane { xy: z.clone(), yz: z.clone(), xz: z };
    let kl = kl_divergence(&p, &p).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(kl, 0.0);
}

#[test]
fn encoding_is_deterministic_per_sampling_mode() {
    let seq = generate_synthetic_sequence(&tiny_gen(), 1).unwrap();
    let frames: Vec<&OccupancyGrid> = seq.frames.iter().take(2).collect();
    let mut store = ParamStore::new(3, DType::F32);
    let vae = tiny_vae(&mut store);
    let off = Dropout::disabled();
    let flat = |z: &LatentTriPlane| z.sample.concat_tokens().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let a = vae.encode(&frames, Sampling::Mean, &off).unwrap();
    let b = vae.encode(&frames, Sampling::Mean, &off).unwrap();
    assert_eq!(flat(&a), flat(&b));
    let mean = a.mean.concat_tokens().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&a), mean);
    let s1 = vae.encode(&frames, Sampling::Seeded(9), &off).unwrap();
    let s2 = vae.encode(&frames, Sampling::Seeded(9), &off).unwrap();
    let s3 = vae.encode(&frames, Sampling::Seeded(10), &off).unwrap();
    assert_eq!(flat(&s1), flat(&s2));
    assert_ne!(flat(&s1), flat(&s3));
    assert_ne!(flat(&s1), mean);
}

#[test]
fn latent_shapes_follow_downsampling() {
    let seq = generate_synthetic_sequence(&tiny_gen(), 2).unwrap();
    let mut store = ParamStore::new(0, DType::F32);
    let vae = tiny_vae(&mut store);
    assert_eq!(vae.latent_dims, [4, 4, 2]);
    let z = vae.encode(&[&seq.frames[0]], Sampling::Mean, &Dropout::disabled()).unwrap();
    assert_eq!(z.mean.xy.dims(), &[1, 4, 4, 16]);
    assert_eq!(z.mean.yz.dims(), &[1, 4, 2, 16]);
    assert_eq!(z.mean.xz.dims(), &[1, 4, 2, 16]);
    let logits = vae.decode(&z.sample).unwrap();
    assert_eq!(logits.dims(), &[1, 16, 16, 8, 6]);
    let grids = vae.reconstruct(&[&seq.frames[0]]).unwrap();
    assert_eq!(grids[0].dims(), [16, 16, 8]);
}

#[test]
fn bias_dominated_decoder_predicts_free_everywhere() {
    let seq = generate_synthetic_sequence(&tiny_gen(), 4).unwrap();
    let mut store = ParamStore::new(1, DType::F32);
    let vae = tiny_vae(&mut store);
    let last = format!("dec.up{}", vae.cfg.stages() - 1);
    let w = store.get(&format!("{last}.w")).unwrap().as_tensor().zeros_like().unwrap();
    store.set(&format!("{last}.w"), &w).unwrap();
    // output channels are laid out (sub-voxel, class)
    let k = vae.cfg.n_classes;
    let bias: Vec<f32> = (0..8 * k).map(|i| if i % k == vae.cfg.free_id as usize { 10.0 } else { 0.0 }).collect();
    store.set(&format!("{last}.b"), &Tensor::new(bias, &Device::Cpu).unwrap()).unwrap();
    let out = vae.reconstruct(&[&seq.frames[0], &seq.frames[1]]).unwrap();
    for g in out {
        assert!(g.labels().iter().all(|&l| l == vae.cfg.free_id));
    }
}

#[test]
fn one_hot_rejects_labels_outside_palette() {
    let mut g = OccupancyGrid::filled([4, 4, 4], 0, 1.0, [0.0; 3]).unwrap();
    g.set(1, 1, 1, 9);
    assert!(one_hot(&[&g], 6, DType::F32).is_err());
}

#[test]
fn forecast_scoring_of_ground_truth_is_perfect() {
    let gen = SceneGenConfig { seq_len: 8, ..tiny_gen() };
    let palette = LabelPalette::driving();
    let seqs: Vec<_> = (0..3).map(|s| generate_synthetic_sequence(&gen, s).unwrap()).collect();
    let truth: Vec<Vec<OccupancyGrid>> = seqs.iter().map(|s| s.frames[2..8].to_vec()).collect();
    let spec = EvalSpec { past: 2, future: 6, ..Default::default() };
    let (steps, horizons) = score_forecasts(&truth, &truth, &palette, &spec).unwrap();
    assert_eq!(steps.len(), 6);
    assert_eq!(horizons.iter().map(|h| h.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    assert!(steps.iter().all(|m| m.miou == 1.0 && m.iou == 1.0));
}
