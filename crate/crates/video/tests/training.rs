use candle_core::{DType, Tensor};
use occdrive_core::{LabelPalette, SceneGenConfig};
use occdrive_nn::ParamStore;
use occdrive_video::*;

fn small(mva: bool) -> VideoConfig {
    let mut cfg = VideoConfig {
        frames: 4,
        height: 16,
        width: 16,
        hidden: 64,
        heads: 4,
        blocks: 2,
        ..Default::default()
    };
    cfg.mva.enabled = mva;
    cfg
}

fn dataset(cfg: &VideoConfig, seed: u64) -> Vec<VideoSample> {
    let data = ToyDataConfig { samples: 16, tint: 0.5 };
    build_toy_dataset(&SceneGenConfig::default(), cfg, &data, &LabelPalette::driving(), seed).unwrap()
}

fn mean_overlap_mae(model: &ToyVideoModel, data: &[VideoSample]) -> f64 {
    let mut shape = vec![1];
    shape.extend(model.cfg.video_shape());
    let maes: Vec<f64> = data
        .iter()
        .take(8)
        .enumerate()
        .map(|(i, s)| {
            let c = s.condition(&model.cfg, DType::F32).unwrap().unsqueeze(0).unwrap();
            let v = sample_video(model, &c, &shape, 20, i as u64).unwrap().squeeze(0).unwrap();
            overlap_mae(&v).unwrap()
        })
        .collect();
    maes.iter().sum::<f64>() / maes.len() as f64
}

#[test]
fn loss_halves_for_most_seeds() {
    let cfg = small(true);
    let data = dataset(&cfg, 100);
    let tcfg = VideoTrainConfig { steps: 300, ..Default::default() };
    let mut halved = 0;
    for seed in 0..3 {
        let run = train_toy_video(&data, &cfg, &tcfg, seed).unwrap();
        println!("seed {seed}: eval loss {:.4} -> {:.4}", run.initial_eval, run.final_eval);
        assert!(run.losses.iter().all(|l| l.is_finite()));
        if run.final_eval <= 0.5 * run.initial_eval {
            halved += 1;
        }
    }
    assert!(halved >= 2, "{halved}/3 seeds halved their loss");
}

#[test]
fn multi_view_attention_improves_overlap_agreement() {
    let tcfg = VideoTrainConfig { steps: 800, ..Default::default() };
    let with = small(true);
    let data = dataset(&with, 100);
    for s in &data {
        assert!(overlap_mae(&s.video).unwrap() < 1e-6);
    }
    let a = train_toy_video(&data, &with, &tcfg, 0).unwrap();
    let b = train_toy_video(&data, &small(false), &tcfg, 0).unwrap();
    let (mae_with, mae_without) = (mean_overlap_mae(&a.model, &data), mean_overlap_mae(&b.model, &data));
    println!("overlap MAE with MVA {mae_with:.4}, without {mae_without:.4}");
    assert!(mae_with < mae_without);
}

#[test]
fn unnormalized_branch_drifts_more_at_init() {
    let drift = |norm: NormMode| {
        let mut cfg = small(true);
        cfg.mva.norm = norm;
        let data = dataset(&cfg, 7);
        let mut total = Vec::new();
        for seed in 0..3 {
            let mut store = ParamStore::new(seed, DType::F32);
            let model = ToyVideoModel::new(&mut store, &cfg).unwrap();
            let x = Tensor::stack(&[data[0].video.clone(), data[1].video.clone()], 0).unwrap();
            let c = Tensor::stack(&[data[0].condition(&cfg, DType::F32).unwrap(), data[1].condition(&cfg, DType::F32).unwrap()], 0).unwrap();
            let t = Tensor::new(&[0.3f32, 0.8], &candle_core::Device::Cpu).unwrap();
            let (_, probes) = model.forward_probed(&x, &c, &t).unwrap();
            assert_eq!(probes.len(), cfg.blocks);
            total.extend(probes.iter().map(|p| (p.branch_std / p.trunk_std).ln().abs()));
        }
        total.iter().sum::<f64>() / total.len() as f64
    };
    let (normalized, raw) = (drift(NormMode::Group), drift(NormMode::None));
    println!("log std ratio drift: normalized {normalized:.4}, unnormalized {raw:.4}");
    assert!(normalized < 1e-3);
    assert!(raw > normalized);
}

#[test]
fn checkpoint_and_video_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = VideoConfig { hidden: 32, ..small(true) };
    let data = dataset(&cfg, 3);
    let tcfg = VideoTrainConfig { steps: 5, batch: 2, ..Default::default() };
    let run = train_toy_video(&data[..4], &cfg, &tcfg, 1).unwrap();
    save_video_model(&run.store, &cfg, &dir.path().join("ckpt")).unwrap();
    let (_store, back) = load_video_model(&dir.path().join("ckpt")).unwrap();
    assert_eq!(back.cfg, cfg);
    let c = data[0].condition(&cfg, DType::F32).unwrap().unsqueeze(0).unwrap();
    let mut shape = vec![1];
    shape.extend(cfg.video_shape());
    let a = sample_video(&run.model, &c, &shape, 3, 4).unwrap();
    let b = sample_video(&back, &c, &shape, 3, 4).unwrap();
    let flat = |x: &Tensor| x.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(flat(&a), flat(&b));
    let out = dir.path().join("video");
    write_video(&a.squeeze(0).unwrap(), &out).unwrap();
    assert!(out.join("frame3.png").exists());
    assert_eq!(flat(&read_video(&out).unwrap()), flat(&a.squeeze(0).unwrap()));
    assert!(load_video_model(dir.path()).is_err());
}

#[test]
fn training_rejects_mismatched_clips() {
    let cfg = small(true);
    let data = dataset(&VideoConfig { frames: 2, ..cfg }, 0);
    assert!(train_toy_video(&data, &cfg, &VideoTrainConfig::default(), 0).is_err());
}
