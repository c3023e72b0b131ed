//! One function per subcommand. Each reads its inputs from the run layout,
//! writes its outputs plus a `summary.json` marker last, and returns the
//! paths it produced.
//!
//! Run layout under `--out`:
//! `vae/`, `predictor/`, `e2e/{vae,predictor}/`, `rollout/seq_*/`,
//! `render/seq_*/{surround,overlap}/`, `edit/`, `video/ckpt/`, `samples/seq_*/`,
//! `eval/`, `logs/`, `manifests/`. The dataset lives under `--data` with
//! `train/`, `val/` and `test/` splits of sequence directories.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use occdrive_core::{
    default_camera_rig, edit_grid, generate_synthetic_sequence, load_sequence, save_sequence, BBox, EditSpec,
    LabelPalette, OccupancyGrid, SceneGenConfig, SceneSequence,
};
use occdrive_nn::ParamStore;
use occdrive_render::{read_condition_stack, render_grid, render_sequence, write_condition_stack, write_png, ConditionStack};
use occdrive_video::data::{check_stack, sample_from_stack, stack_labels};
use occdrive_video::{
    condition_one_hot, load_video_model, overlapping_views, sample_video as sample_clip, save_video_model,
    train_toy_video, write_video,
};
use occdrive_world::ckpt::{load_predictor, load_vae, save_predictor, save_vae};
use occdrive_world::{
    evaluate, rollout as run_rollout, score_forecasts, train_e2e as run_e2e, train_predictor, train_vae as run_vae,
    transform_errors, MetricsLog, Predictor, TriPlaneVae,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::error::{CliError, Result};

pub const SUMMARY: &str = "summary.json";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub struct Ctx {
    pub cfg: Config,
    pub out: PathBuf,
    pub data: PathBuf,
    pub vae: Option<PathBuf>,
    pub predictor: Option<PathBuf>,
}

pub struct Models {
    pub vae_store: ParamStore,
    pub vae: TriPlaneVae,
    pub pred_store: ParamStore,
    pub pred: Predictor,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(path.to_path_buf())
}

/// Remove a directory this tool owns before regenerating it.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn seq_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("seq_{i:05}"))
}

/// Sub-directories of `root` in name order.
fn list_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(CliError::Runtime(format!("{} does not exist; run the producing stage first", root.display())));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

impl Ctx {
    pub fn palette(&self) -> LabelPalette {
        LabelPalette::driving()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn load_split(&self, split: &str) -> Result<Vec<SceneSequence>> {
        let seqs = list_dirs(&self.data.join(split))?
            .iter()
            .map(|d| load_sequence(d))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        if seqs.is_empty() {
            return Err(CliError::Runtime(format!("split {split} under {} is empty", self.data.display())));
        }
        Ok(seqs)
    }

    fn log(&self, name: &str) -> Result<MetricsLog> {
        let path = self.path("logs").join(format!("{name}.jsonl"));
        if path.exists() {
            fs::remove_file(&path)?;
        }
        Ok(MetricsLog::to_file(&path)?)
    }

    /// Joint-phase checkpoints when present, else the separately trained ones;
    /// `--vae` / `--predictor` override both.
    pub fn load_models(&self) -> Result<Models> {
        let pick = |flag: &Option<PathBuf>, e2e: &str, base: &str| {
            flag.clone().unwrap_or_else(|| {
                let p = self.path(e2e);
                if p.join("manifest").exists() {
                    p
                } else {
                    self.path(base)
                }
            })
        };
        let vae_dir = pick(&self.vae, "e2e/vae", "vae");
        let pred_dir = pick(&self.predictor, "e2e/predictor", "predictor");
        log::info!("models: {} + {}", vae_dir.display(), pred_dir.display());
        let (vae_store, vae) = load_vae(&vae_dir, DType::F32)?;
        let (pred_store, pred) = load_predictor(&pred_dir, DType::F32)?;
        Ok(Models {
            vae_store,
            vae,
            pred_store,
            pred,
        })
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let palette = ctx.palette();
    let base = cfg.seed.wrapping_mul(1_000_000);
    let mut outputs = Vec::new();
    for (k, split) in SPLITS.iter().enumerate() {
        let (n, gen) = match *split {
            "train" => (cfg.data.train, cfg.data.gen.clone()),
            "val" => (cfg.data.val, cfg.data.gen.clone()),
            _ => (
                cfg.data.test,
                SceneGenConfig {
                    seq_len: cfg.data.test_seq_len,
                    ..cfg.data.gen.clone()
                },
            ),
        };
        let root = ctx.data.join(split);
        fresh_dir(&root)?;
        for i in 0..n {
            let seq = generate_synthetic_sequence(&gen, base + 100_000 * k as u64 + i as u64)?;
            save_sequence(&seq, &palette, &seq_dir(&root, i))?;
        }
        log::info!("{split}: {n} sequences");
        outputs.push(root);
    }
    outputs.push(write_json(&ctx.data.join("index.json"), &serde_json::json!({ "seed": cfg.seed, "data": cfg.data }))?);
    Ok(outputs)
}

pub fn train_vae(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let seqs = ctx.load_split("train")?;
    let mut log = ctx.log("vae")?;
    let run = run_vae(&ctx.cfg.vae, &seqs, &ctx.palette(), &ctx.cfg.train_vae, &mut log)?;
    let dir = ctx.path("vae");
    save_vae(&run.store, &run.vae, &dir)?;
    let summary = serde_json::json!({
        "best_recon_miou": run.best_recon_miou,
        "best_epoch": run.best_epoch,
        "params": run.store.num_params(),
    });
    println!("vae: best recon mIoU {:.4} at epoch {}", run.best_recon_miou, run.best_epoch);
    Ok(vec![dir.clone(), write_json(&dir.join(SUMMARY), &summary)?])
}

pub fn train_pred(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let seqs = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let vae_dir = ctx.vae.clone().unwrap_or_else(|| ctx.path("vae"));
    let (_vae_store, vae) = load_vae(&vae_dir, DType::F32)?;
    let mut log = ctx.log("predictor")?;
    let run = train_predictor(&vae, &ctx.cfg.predictor, &seqs, &ctx.cfg.train_pred, &mut log)?;
    let dir = ctx.path("predictor");
    save_predictor(&run.store, &run.predictor, vae.latent_dims, &dir)?;
    let (trans_err, rot_err) = transform_errors(&vae, &run.predictor, &val)?;
    let summary = serde_json::json!({
        "initial_reg": run.initial_reg,
        "final_reg": run.final_reg,
        "val_translation_error_m": trans_err,
        "val_rotation_error_rad": rot_err,
        "params": run.store.num_params(),
    });
    println!("predictor: L_reg {:.4} -> {:.4}, val transform error {trans_err:.3} m / {rot_err:.3} rad", run.initial_reg, run.final_reg);
    Ok(vec![dir.clone(), write_json(&dir.join(SUMMARY), &summary)?])
}

pub fn train_e2e(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let seqs = ctx.load_split("train")?;
    let val = ctx.load_split("val")?;
    let (vae_store, vae) = load_vae(&ctx.vae.clone().unwrap_or_else(|| ctx.path("vae")), DType::F32)?;
    let (pred_store, pred) = load_predictor(&ctx.predictor.clone().unwrap_or_else(|| ctx.path("predictor")), DType::F32)?;
    let mut log = ctx.log("e2e")?;
    let run = run_e2e(&vae_store, &vae, &pred_store, &pred, &seqs, &val, &ctx.palette(), &ctx.cfg.train_e2e, &mut log)?;
    let dir = ctx.path("e2e");
    save_vae(&vae_store, &vae, &dir.join("vae"))?;
    save_predictor(&pred_store, &pred, vae.latent_dims, &dir.join("predictor"))?;
    let summary = serde_json::json!({
        "val_before": run.before,
        "val_after": run.after,
        "recon_before": run.recon_before,
        "recon_after": run.recon_after,
        "recon_decreased": run.recon_decreased(),
        "best_epoch": run.best_epoch,
    });
    println!(
        "e2e: val forecast mIoU {:.4} -> {:.4}, recon mIoU {:.4} -> {:.4}",
        run.before.avg_miou, run.after.avg_miou, run.recon_before, run.recon_after
    );
    Ok(vec![dir.clone(), write_json(&dir.join(SUMMARY), &summary)?])
}

pub fn rollout(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let m = ctx.load_models()?;
    let spec = ctx.cfg.eval_spec();
    let seqs = ctx.load_split("test")?;
    let need = spec.past + spec.future;
    if let Some(s) = seqs.iter().find(|s| s.len() < need) {
        return Err(CliError::Config(format!("test sequences have {} frames, --past + --future needs {need}", s.len())));
    }
    let root = ctx.path("rollout");
    fresh_dir(&root)?;
    let palette = ctx.palette();
    let mut preds = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(spec.batch) {
        let initial: Vec<Vec<&OccupancyGrid>> = chunk.iter().map(|s| s.frames[..spec.past].iter().collect()).collect();
        let controls: Vec<Vec<_>> = (0..spec.future)
            .map(|t| chunk.iter().map(|s| &s.controls[spec.past - 1 + t]).collect())
            .collect();
        let r = run_rollout(&m.vae, &m.pred, &initial, &controls)?;
        for b in 0..chunk.len() {
            preds.push(r.grids.iter().map(|step| step[b].clone()).collect::<Vec<_>>());
        }
    }
    let mut outputs = Vec::new();
    for (i, (s, p)) in seqs.iter().zip(&preds).enumerate() {
        let mut frames = s.frames[..spec.past].to_vec();
        frames.extend(p.iter().cloned());
        let forecast = SceneSequence {
            frames,
            controls: s.controls[..need - 1].to_vec(),
            ego_poses: s.ego_poses[..need].to_vec(),
            camera_rig: s.camera_rig.clone(),
            fps: s.fps,
        };
        let dir = seq_dir(&root, i);
        save_sequence(&forecast, &palette, &dir)?;
        outputs.push(dir);
    }
    let truth: Vec<Vec<OccupancyGrid>> = seqs.iter().map(|s| s.frames[spec.past..need].to_vec()).collect();
    let (steps, horizons) = score_forecasts(&preds, &truth, &palette, &spec)?;
    for h in &steps {
        println!("step {:2} ({:.1} s): mIoU {:.4}  IoU {:.4}", h.step, h.seconds, h.miou, h.iou);
    }
    let summary = serde_json::json!({ "past": spec.past, "future": spec.future, "steps": steps, "horizons": horizons });
    outputs.push(write_json(&root.join(SUMMARY), &summary)?);
    Ok(outputs)
}

/// Forecast sequences when a rollout exists, else the held-out split.
fn render_inputs(ctx: &Ctx) -> Result<Vec<SceneSequence>> {
    let rolled = ctx.path("rollout");
    if rolled.join(SUMMARY).exists() {
        return Ok(list_dirs(&rolled)?
            .iter()
            .map(|d| load_sequence(d))
            .collect::<std::result::Result<Vec<_>, _>>()?);
    }
    ctx.load_split("test")
}

pub fn render(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let palette = ctx.palette();
    let seqs = render_inputs(ctx)?;
    let rig = default_camera_rig(cfg.render.width, cfg.render.height);
    let root = ctx.path("render");
    fresh_dir(&root)?;
    let mut outputs = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let dir = seq_dir(&root, i);
        let maps = render_sequence(&s.frames, &rig, &palette, cfg.render.alpha)?;
        write_condition_stack(&ConditionStack::from_frames(maps, &palette)?, &dir.join("surround"))?;
        if s.len() >= cfg.video.frames {
            let tail = &s.frames[s.len() - cfg.video.frames..];
            write_condition_stack(&overlapping_views(tail, &cfg.video, &palette)?, &dir.join("overlap"))?;
        }
        outputs.push(dir);
    }
    println!("rendered {} sequences x {} cameras", seqs.len(), rig.len());
    let summary = serde_json::json!({ "sequences": seqs.len(), "cameras": rig.len(), "alpha": cfg.render.alpha });
    outputs.push(write_json(&root.join(SUMMARY), &summary)?);
    Ok(outputs)
}

#[derive(Debug, Clone)]
pub struct EditArgs {
    pub input: Option<PathBuf>,
    pub op: String,
    pub bbox: [usize; 6],
    pub class_id: Option<u8>,
}

pub fn edit(ctx: &Ctx, args: &EditArgs) -> Result<Vec<PathBuf>> {
    let palette = ctx.palette();
    let b = args.bbox;
    let bbox = BBox::new([b[0], b[1], b[2]], [b[3], b[4], b[5]]);
    let spec = match (args.op.as_str(), args.class_id) {
        ("remove", _) => EditSpec::Remove { bbox },
        ("insert", Some(class_id)) => EditSpec::Insert { bbox, class_id },
        ("insert", None) => return Err(CliError::Config("insert needs --class".into())),
        (op, _) => return Err(CliError::Config(format!("unknown edit op {op}; use remove or insert"))),
    };
    let input = match &args.input {
        Some(p) => p.clone(),
        None => seq_dir(&ctx.data.join("test"), 0),
    };
    let seq = load_sequence(&input)?;
    let frames = seq.frames.iter().map(|g| edit_grid(g, &spec, &palette)).collect::<std::result::Result<Vec<_>, _>>()?;
    let edited = SceneSequence { frames, ..seq.clone() };
    let root = ctx.path("edit");
    fresh_dir(&root)?;
    save_sequence(&edited, &palette, &root.join("sequence"))?;
    let cam = default_camera_rig(ctx.cfg.render.width, ctx.cfg.render.height).remove(0);
    let before = render_grid(&seq.frames[0], std::slice::from_ref(&cam), &palette, ctx.cfg.render.alpha)?.remove(0);
    let after = render_grid(&edited.frames[0], std::slice::from_ref(&cam), &palette, ctx.cfg.render.alpha)?.remove(0);
    write_png(&before, &palette, &root.join("front_before.png"))?;
    write_png(&after, &palette, &root.join("front_after.png"))?;
    let in_box = |g: &OccupancyGrid| bbox.voxels().filter(|&[x, y, z]| g.get(x, y, z) != palette.free_id).count();
    let class_pixels = |m: &occdrive_render::SemanticMap| (0..palette.n_classes).map(|c| m.count(c as u8)).collect::<Vec<_>>();
    let summary = serde_json::json!({
        "input": input,
        "op": args.op,
        "bbox": args.bbox,
        "class_id": args.class_id,
        "occupied_in_box_before": in_box(&seq.frames[0]),
        "occupied_in_box_after": in_box(&edited.frames[0]),
        "front_class_pixels_before": class_pixels(&before),
        "front_class_pixels_after": class_pixels(&after),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(vec![root.join("sequence"), write_json(&root.join(SUMMARY), &summary)?])
}

pub fn train_video(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let palette = ctx.palette();
    let seqs = ctx.load_split("train")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x71de);
    let data = seqs
        .iter()
        .take(cfg.video_data.samples)
        .map(|s| {
            let stack = overlapping_views(&s.frames[..cfg.video.frames], &cfg.video, &palette)?;
            Ok(sample_from_stack(&stack, &cfg.video, &palette, cfg.video_data.tint, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let run = train_toy_video(&data, &cfg.video, &cfg.video_train, cfg.seed)?;
    let dir = ctx.path("video");
    save_video_model(&run.store, &cfg.video, &dir.join("ckpt"))?;
    println!("video: flow loss {:.4} -> {:.4} over {} clips", run.initial_eval, run.final_eval, data.len());
    let summary = serde_json::json!({
        "clips": data.len(),
        "initial_eval": run.initial_eval,
        "final_eval": run.final_eval,
        "losses": run.losses,
    });
    Ok(vec![dir.join("ckpt"), write_json(&dir.join(SUMMARY), &summary)?])
}

pub fn sample_video(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let cfg = &ctx.cfg;
    let (_store, model) = load_video_model(&ctx.path("video").join("ckpt"))?;
    let stacks: Vec<PathBuf> = list_dirs(&ctx.path("render"))?
        .into_iter()
        .map(|d| d.join("overlap"))
        .filter(|d| d.exists())
        .take(cfg.sample.clips)
        .collect();
    if stacks.is_empty() {
        return Err(CliError::Runtime("no overlap condition stacks under render/; run render first".into()));
    }
    let root = ctx.path("samples");
    fresh_dir(&root)?;
    let [n, t, c, h, w] = model.cfg.video_shape();
    let mut outputs = Vec::new();
    for (i, dir) in stacks.iter().enumerate() {
        let stack = read_condition_stack(dir)?;
        check_stack(&stack, &model.cfg)?;
        let cond = condition_one_hot(&stack_labels(&stack), [1, n, t, h, w], model.cfg.n_classes, DType::F32)?;
        let video = sample_clip(&model, &cond, &[1, n, t, c, h, w], cfg.sample.steps, cfg.seed.wrapping_add(i as u64))?;
        let out = seq_dir(&root, i);
        write_video(&video.squeeze(0)?, &out)?;
        outputs.push(out);
    }
    println!("sampled {} videos with {} Euler steps", outputs.len(), cfg.sample.steps);
    let summary = serde_json::json!({ "conditions": stacks, "steps": cfg.sample.steps });
    outputs.push(write_json(&root.join(SUMMARY), &summary)?);
    Ok(outputs)
}

pub fn eval(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let m = ctx.load_models()?;
    let seqs = ctx.load_split("test")?;
    let report = evaluate(&m.vae, &m.pred, &m.vae_store, &m.pred_store, &seqs, &ctx.palette(), &ctx.cfg.eval_spec())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(vec![write_json(&ctx.path("eval").join(SUMMARY), &report)?])
}
