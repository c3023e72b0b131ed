//! Training phases and evaluation.
//!
//! `train_vae` fits the tri-plane VAE; `train_predictor` freezes it and
//! regresses next-frame latents with teacher forcing; `train_e2e` unfreezes
//! everything and supervises decoded multi-step rollouts.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use occdrive_core::{LabelPalette, MiouAccumulator, OccupancyGrid, RigidTransform2D, SceneSequence};
use occdrive_nn::{AdamConfig, Dropout, Optimizer, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{batches, check_dataset, frame_refs, windows, Window};
use crate::error::{Result, WorldError};
use crate::loss::{cross_entropy, lovasz_softmax, vae_loss};
use crate::model::{from_tokens, rollout, to_tokens};
use crate::predictor::{params_to_transform, prediction_loss, transform_params, transform_reg, Predictor, PredictorConfig};
use crate::vae::{label_tensor, one_hot, Sampling, TriPlaneVae, VaeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Vae,
    Predictor,
    E2e,
}

/// What the joint phase compares each predicted step against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Cross-entropy + Lovász-softmax on decoded logits.
    #[default]
    Decoded,
    /// Squared error between decoded class probabilities and the one-hot target.
    OneHotL2,
    /// Squared error against the target frame's posterior mean (predictor-phase objective).
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub seed: u64,
    /// Overrides the model config when set.
    pub kl_weight: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<Vec<f64>>,
    pub dataset: Option<PathBuf>,
    pub vae_checkpoint: Option<PathBuf>,
    pub predictor_checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Evaluate every this many epochs (the last epoch is always evaluated).
    pub eval_every: usize,
    /// Predicted steps per training window (teacher-forced in the predictor
    /// phase, autoregressive in the joint phase).
    pub rollout_steps: usize,
    /// Joint phase: share of epochs over which rollout depth ramps from 1 to `rollout_steps`.
    pub ramp_fraction: f64,
    /// Joint phase: stop after this many evaluations without improvement.
    pub patience: Option<usize>,
    pub supervision: Supervision,
    /// Past frames used when forecasting held-out sequences.
    pub eval_past: usize,
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Vae,
            epochs: 10,
            batch_size: 4,
            optim: AdamConfig::default(),
            seed: 0,
            kl_weight: None,
            lambda: None,
            beta: None,
            dataset: None,
            vae_checkpoint: None,
            predictor_checkpoint: None,
            output: None,
            eval_every: 1,
            rollout_steps: 1,
            ramp_fraction: 1.0 / 3.0,
            patience: None,
            supervision: Supervision::Decoded,
            eval_past: 4,
            max_batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(WorldError::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be > 0");
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.rollout_steps == 0 || self.eval_past == 0 {
            return bad("batch_size, eval_every, rollout_steps and eval_past must be > 0");
        }
        if self.lambda.is_some_and(|l| l < 0.0) || self.kl_weight.is_some_and(|k| k < 0.0) {
            return bad("lambda and kl_weight must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return bad("ramp_fraction must lie in [0, 1]");
        }
        if !(self.optim.lr > 0.0) {
            return bad("learning rate must be > 0");
        }
        Ok(())
    }

    fn predictor_cfg(&self, base: &PredictorConfig) -> PredictorConfig {
        let mut c = base.clone();
        if let Some(l) = self.lambda {
            c.lambda = l;
        }
        if let Some(b) = &self.beta {
            c.beta = b.clone();
        }
        c
    }

    /// Rollout depth used in joint-phase epoch `epoch` (0-based).
    pub fn depth_at(&self, epoch: usize) -> usize {
        let n = self.rollout_steps;
        let ramp = self.ramp_fraction * self.epochs as f64;
        if n <= 1 || ramp <= 0.0 {
            return n;
        }
        let frac = (epoch as f64 / ramp).min(1.0);
        1 + ((n - 1) as f64 * frac).floor() as usize
    }
}

/// Append-only JSON-lines metrics sink; also keeps records in memory.
#[derive(Debug, Default)]
pub struct MetricsLog {
    file: Option<BufWriter<File>>,
    pub records: Vec<serde_json::Value>,
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            file: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn record(&mut self, v: serde_json::Value) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{v}")?;
            f.flush()?;
        }
        self.records.push(v);
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(WorldError::NonFinite(format!("{what} = {v} at epoch {epoch}, step {step}")))
    }
}

fn take_batches<T: Clone>(items: &[T], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<T>> {
    let mut b = batches(items, cfg.batch_size, rng);
    if let Some(m) = cfg.max_batches_per_epoch {
        b.truncate(m);
    }
    b
}

fn steps_per_epoch(n_items: usize, cfg: &TrainConfig) -> usize {
    let n = n_items.div_ceil(cfg.batch_size);
    cfg.max_batches_per_epoch.map_or(n, |m| n.min(m))
}

/// Reconstruction mIoU / IoU of `grids` through encode (mean) → decode.
pub fn recon_metrics(vae: &TriPlaneVae, grids: &[&OccupancyGrid], palette: &LabelPalette, batch: usize) -> Result<(f64, f64)> {
    let mut acc = MiouAccumulator::new(palette);
    for chunk in grids.chunks(batch.max(1)) {
        for (p, g) in vae.reconstruct(chunk)?.iter().zip(chunk) {
            acc.add(p, g)?;
        }
    }
    Ok((acc.miou().mean, acc.iou()))
}

pub struct VaeRun {
    pub store: ParamStore,
    pub vae: TriPlaneVae,
    pub best_recon_miou: f64,
    pub best_epoch: usize,
}

/// Fit the VAE on every frame of `seqs`; keeps the best-by-recon-mIoU weights.
pub fn train_vae(
    vae_cfg: &VaeConfig,
    seqs: &[SceneSequence],
    palette: &LabelPalette,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<VaeRun> {
    train_vae_with_dtype(vae_cfg, seqs, palette, cfg, log, DType::F32)
}

pub fn train_vae_with_dtype(
    vae_cfg: &VaeConfig,
    seqs: &[SceneSequence],
    palette: &LabelPalette,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    dtype: DType,
) -> Result<VaeRun> {
    cfg.validate()?;
    let dims = check_dataset(seqs)?;
    if vae_cfg.n_classes != palette.n_classes {
        return Err(WorldError::Config(format!(
            "VAE has {} classes, palette {}",
            vae_cfg.n_classes, palette.n_classes
        )));
    }
    let mut vcfg = vae_cfg.clone();
    if let Some(k) = cfg.kl_weight {
        vcfg.kl_weight = k;
    }
    let mut store = ParamStore::new(cfg.seed, dtype);
    let vae = TriPlaneVae::new(&mut store, &vcfg, dims)?;
    let frames = frame_refs(seqs);
    let all: Vec<&OccupancyGrid> = frames.iter().map(|&(s, f)| &seqs[s].frames[f]).collect();
    let mut opt = Optimizer::new(store.vars(), cfg.optim, cfg.epochs * steps_per_epoch(frames.len(), cfg))?;
    let drop = Dropout::new(vcfg.dropout, ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd20f));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let (mut best, mut best_epoch, mut snapshot) = (f64::NEG_INFINITY, 0, None);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        let mut parts_sum = [0.0f64; 3];
        for batch in take_batches(&frames, cfg, &mut rng) {
            let grids: Vec<&OccupancyGrid> = batch.iter().map(|&(s, f)| &seqs[s].frames[f]).collect();
            let x = one_hot(&grids, vcfg.n_classes, dtype)?;
            let labels = label_tensor(&grids)?;
            let sample_seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(step as u64);
            let z = vae.encode_onehot(&x, Sampling::Seeded(sample_seed), &drop)?;
            let logits = vae.decode(&z.sample)?;
            let loss = vae_loss(&labels, &logits, &z, vcfg.kl_weight)?;
            let p = loss.parts()?;
            finite(p.total, "vae loss", epoch, step)?;
            opt.backward_step(&loss.total)?;
            sum += p.total;
            parts_sum[0] += p.ce;
            parts_sum[1] += p.lovasz;
            parts_sum[2] += p.kl;
            n += 1;
            step += 1;
        }
        let nf = n.max(1) as f64;
        let mut rec = json!({
            "phase": "VAE", "epoch": epoch, "step": step, "loss": sum / nf,
            "ce": parts_sum[0] / nf, "lovasz": parts_sum[1] / nf, "kl": parts_sum[2] / nf,
            "lr": opt.current_lr(),
        });
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let (miou, iou) = recon_metrics(&vae, &all, palette, 8)?;
            rec["recon_miou"] = json!(miou);
            rec["recon_iou"] = json!(iou);
            if miou > best {
                best = miou;
                best_epoch = epoch;
                snapshot = Some(store.snapshot()?);
            }
        }
        log::info!("{rec}");
        log.record(rec)?;
    }
    if let Some(s) = snapshot {
        store.restore(&s)?;
    }
    Ok(VaeRun {
        store,
        vae,
        best_recon_miou: best,
        best_epoch,
    })
}

/// Posterior-mean tokens `(1, T, C)` for every frame, computed without gradients.
pub struct LatentCache {
    pub tokens: Vec<Vec<Tensor>>,
}

impl LatentCache {
    pub fn build(vae: &TriPlaneVae, seqs: &[SceneSequence]) -> Result<Self> {
        let off = Dropout::disabled();
        let mut tokens = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let mut per = Vec::with_capacity(seq.frames.len());
            for chunk in seq.frames.chunks(8) {
                let refs: Vec<&OccupancyGrid> = chunk.iter().collect();
                let z = vae.encode(&refs, Sampling::Mean, &off)?;
                let t = to_tokens(&z.mean)?.detach();
                for i in 0..chunk.len() {
                    per.push(t.narrow(0, i, 1)?);
                }
            }
            tokens.push(per);
        }
        Ok(Self { tokens })
    }

    pub fn get(&self, seq: usize, frame: usize) -> &Tensor {
        &self.tokens[seq][frame]
    }

    fn stack(&self, items: &[(usize, usize)]) -> Result<Tensor> {
        let v: Vec<&Tensor> = items.iter().map(|&(s, f)| self.get(s, f)).collect();
        Ok(Tensor::cat(&v, 0)?)
    }
}

/// Teacher-forced loss for a batch of windows using cached latents.
pub fn predictor_batch_loss(
    pred: &Predictor,
    cache: &LatentCache,
    seqs: &[SceneSequence],
    batch: &[Window],
    cfg: &PredictorConfig,
) -> Result<crate::predictor::PredictionLoss> {
    let k = pred.cfg.history;
    let steps = batch[0].steps;
    let dtype = cache.get(0, 0).dtype();
    let (mut outs, mut targets, mut tp, mut tg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in 0..steps {
        let shifted: Vec<Window> = batch.iter().map(|w| Window { t: w.t + s, ..*w }).collect();
        let mut hist = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let items: Vec<(usize, usize)> = shifted.iter().map(|w| (w.seq, w.history_indices(k)[j])).collect();
            hist.push(cache.stack(&items)?);
        }
        let cur = hist.pop().expect("k + 1 entries");
        let ctrls: Vec<_> = shifted.iter().map(|w| w.control(seqs, 0)).collect();
        let out = pred.forward(&cur, &pred.control.embed_batch(&ctrls)?, &hist)?;
        let tgt: Vec<(usize, usize)> = shifted.iter().map(|w| (w.seq, w.t + 1)).collect();
        targets.push(cache.stack(&tgt)?);
        let gts: Vec<RigidTransform2D> = ctrls.iter().map(|c| c.gt_transform).collect();
        tg.push(transform_params(&gts, dtype)?);
        tp.push(out.transform);
        outs.push(out.z_next);
    }
    prediction_loss(&outs, &targets, &tp, &tg, cfg)
}

pub struct PredictorRun {
    pub store: ParamStore,
    pub predictor: Predictor,
    pub initial_reg: f64,
    pub final_reg: f64,
}

/// Train the predictor against a frozen VAE.
pub fn train_predictor(
    vae: &TriPlaneVae,
    pred_cfg: &PredictorConfig,
    seqs: &[SceneSequence],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<PredictorRun> {
    cfg.validate()?;
    check_dataset(seqs)?;
    let pcfg = cfg.predictor_cfg(pred_cfg);
    if pcfg.channels != vae.cfg.channels {
        return Err(WorldError::Config(format!(
            "predictor width {} != VAE latent width {}",
            pcfg.channels, vae.cfg.channels
        )));
    }
    let dtype = vae.positional()?.dtype();
    let mut store = ParamStore::new(cfg.seed.wrapping_add(17), dtype);
    let predictor = Predictor::new(&mut store, &pcfg, vae.latent_dims)?;
    let cache = LatentCache::build(vae, seqs)?;
    let wins = windows(seqs, cfg.rollout_steps, 0);
    if wins.is_empty() {
        return Err(WorldError::Empty(format!("no windows with {} future frames", cfg.rollout_steps)));
    }
    let mut opt = Optimizer::new(store.vars(), cfg.optim, cfg.epochs * steps_per_epoch(wins.len(), cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let (mut initial_reg, mut final_reg) = (f64::NAN, f64::NAN);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let (mut sum, mut reg, mut lat, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in take_batches(&wins, cfg, &mut rng) {
            let l = predictor_batch_loss(&predictor, &cache, seqs, &batch, &pcfg)?;
            let total = finite(scalar(&l.total)?, "prediction loss", epoch, step)?;
            let r = scalar(&l.reg)?;
            if initial_reg.is_nan() {
                initial_reg = r;
            }
            opt.backward_step(&l.total)?;
            sum += total;
            reg += r;
            lat += l.latent.iter().map(scalar).sum::<Result<f64>>()? / l.latent.len() as f64;
            n += 1;
            step += 1;
        }
        let nf = n.max(1) as f64;
        final_reg = reg / nf;
        let rec = json!({
            "phase": "PREDICTOR", "epoch": epoch, "step": step, "loss": sum / nf,
            "latent_mse": lat / nf, "l_reg": reg / nf, "lr": opt.current_lr(),
        });
        log::info!("{rec}");
        log.record(rec)?;
    }
    Ok(PredictorRun {
        store,
        predictor,
        initial_reg,
        final_reg,
    })
}

/// Mean translation (m) and absolute rotation (rad) error of the transform
/// head over every single-step window of `seqs`.
pub fn transform_errors(vae: &TriPlaneVae, pred: &Predictor, seqs: &[SceneSequence]) -> Result<(f64, f64)> {
    let cache = LatentCache::build(vae, seqs)?;
    let k = pred.cfg.history;
    let (mut terr, mut rerr, mut n) = (0.0, 0.0, 0usize);
    for w in windows(seqs, 1, 0) {
        let mut hist: Vec<Tensor> = w.history_indices(k).iter().map(|&f| cache.get(w.seq, f).clone()).collect();
        let cur = hist.pop().expect("k + 1 entries");
        let ctrl = w.control(seqs, 0);
        let out = pred.forward(&cur, &pred.control.embed_batch(&[ctrl])?, &hist)?;
        let row = out.transform.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let est = params_to_transform(&row[0]);
        let gt = ctrl.gt_transform;
        terr += ((est.tx - gt.tx).powi(2) + (est.ty - gt.ty).powi(2)).sqrt();
        rerr += occdrive_core::geometry::wrap_angle(est.theta - gt.theta).abs();
        n += 1;
    }
    if n == 0 {
        return Err(WorldError::Empty("no windows for transform evaluation".into()));
    }
    Ok((terr / n as f64, rerr / n as f64))
}

pub struct E2eBatchLoss {
    pub total: Tensor,
    pub recon: Vec<Tensor>,
    pub reg: Tensor,
}

/// Joint-phase loss for a batch of windows: encode the history with
/// gradients, roll out `depth` steps, supervise every step.
pub fn e2e_batch_loss(
    vae: &TriPlaneVae,
    pred: &Predictor,
    seqs: &[SceneSequence],
    batch: &[Window],
    depth: usize,
    supervision: Supervision,
    cfg: &PredictorConfig,
) -> Result<E2eBatchLoss> {
    let k = pred.cfg.history;
    let off = Dropout::disabled();
    let dtype = vae.positional()?.dtype();
    let mut buffer = crate::predictor::HistoryBuffer::new(k);
    for j in 0..=k {
        let grids: Vec<&OccupancyGrid> = batch.iter().map(|w| &seqs[w.seq].frames[w.history_indices(k)[j]]).collect();
        let z = vae.encode(&grids, Sampling::Mean, &off)?;
        buffer.push(to_tokens(&z.mean)?);
    }
    let (mut recon, mut reg) = (Vec::new(), None::<Tensor>);
    let mut total: Option<Tensor> = None;
    for s in 0..depth {
        let (cur, hist) = buffer.split()?;
        let ctrls: Vec<_> = batch.iter().map(|w| w.control(seqs, s)).collect();
        let out = pred.forward(&cur, &pred.control.embed_batch(&ctrls)?, &hist)?;
        let targets: Vec<&OccupancyGrid> = batch.iter().map(|w| w.target(seqs, s)).collect();
        let term = match supervision {
            Supervision::Latent => {
                let z = vae.encode(&targets, Sampling::Mean, &off)?;
                (&out.z_next - to_tokens(&z.mean)?.detach())?.sqr()?.mean_all()?
            }
            Supervision::Decoded => {
                let logits = vae.decode(&from_tokens(&out.z_next, vae.latent_dims)?)?;
                let labels = label_tensor(&targets)?;
                (cross_entropy(&logits, &labels)? + lovasz_softmax(&logits, &labels)?)?
            }
            Supervision::OneHotL2 => {
                let logits = vae.decode(&from_tokens(&out.z_next, vae.latent_dims)?)?;
                let probs = occdrive_nn::softmax_last(&logits)?;
                let target = one_hot(&targets, vae.cfg.n_classes, dtype)?;
                (probs - target)?.sqr()?.mean_all()?
            }
        };
        let gts: Vec<RigidTransform2D> = ctrls.iter().map(|c| c.gt_transform).collect();
        let r = transform_reg(&out.transform, &transform_params(&gts, dtype)?)?.mean_all()?;
        reg = Some(match reg {
            None => r,
            Some(acc) => (acc + r)?,
        });
        let weighted = (&term * cfg.beta_at(s))?;
        total = Some(match total {
            None => weighted,
            Some(acc) => (acc + weighted)?,
        });
        recon.push(term);
        buffer.push(out.z_next);
    }
    let reg = (reg.ok_or_else(|| WorldError::Empty("rollout depth 0".into()))? / depth as f64)?;
    let total = (total.expect("depth >= 1") + (&reg * cfg.lambda)?)?;
    Ok(E2eBatchLoss { total, recon, reg })
}

pub struct E2eRun {
    pub before: EvalReport,
    pub after: EvalReport,
    pub recon_before: f64,
    pub recon_after: f64,
    /// Epoch of the kept weights; `None` when the starting weights were kept.
    pub best_epoch: Option<usize>,
}

impl E2eRun {
    pub fn recon_decreased(&self) -> bool {
        self.recon_after < self.recon_before
    }
}

/// Joint fine-tuning of VAE and predictor with early stopping on `val`.
#[allow(clippy::too_many_arguments)]
pub fn train_e2e(
    vae_store: &ParamStore,
    vae: &TriPlaneVae,
    pred_store: &ParamStore,
    pred: &Predictor,
    seqs: &[SceneSequence],
    val: &[SceneSequence],
    palette: &LabelPalette,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<E2eRun> {
    cfg.validate()?;
    check_dataset(seqs)?;
    check_dataset(val)?;
    let pcfg = cfg.predictor_cfg(&pred.cfg);
    let train_frames: Vec<&OccupancyGrid> = seqs.iter().flat_map(|s| s.frames.iter()).collect();
    let spec = EvalSpec {
        past: cfg.eval_past,
        future: cfg.rollout_steps,
        fps: val[0].fps,
        batch: 8,
    };
    let before = evaluate(vae, pred, vae_store, pred_store, val, palette, &spec)?;
    let (recon_before, _) = recon_metrics(vae, &train_frames, palette, 8)?;
    log.record(json!({"phase": "E2E", "epoch": null, "val_forecast_miou": before.avg_miou, "recon_miou": recon_before}))?;
    let mut vars = vae_store.vars();
    vars.extend(pred_store.vars());
    let n_windows = windows(seqs, 1, 0).len();
    let mut opt = Optimizer::new(vars, cfg.optim, cfg.epochs * steps_per_epoch(n_windows, cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut best = before.avg_miou;
    let mut best_epoch = None;
    let mut best_state = (vae_store.snapshot()?, pred_store.snapshot()?);
    let mut since_best = 0usize;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let depth = cfg.depth_at(epoch);
        let wins = windows(seqs, depth, 0);
        let (mut sum, mut reg, mut n) = (0.0, 0.0, 0usize);
        for batch in take_batches(&wins, cfg, &mut rng) {
            let l = e2e_batch_loss(vae, pred, seqs, &batch, depth, cfg.supervision, &pcfg)?;
            sum += finite(scalar(&l.total)?, "e2e loss", epoch, step)?;
            reg += scalar(&l.reg)?;
            opt.backward_step(&l.total)?;
            n += 1;
            step += 1;
        }
        let nf = n.max(1) as f64;
        let mut rec = json!({
            "phase": "E2E", "epoch": epoch, "step": step, "depth": depth,
            "loss": sum / nf, "l_reg": reg / nf, "lr": opt.current_lr(),
        });
        if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            let r = evaluate(vae, pred, vae_store, pred_store, val, palette, &spec)?;
            rec["val_forecast_miou"] = json!(r.avg_miou);
            if r.avg_miou > best {
                best = r.avg_miou;
                best_epoch = Some(epoch);
                best_state = (vae_store.snapshot()?, pred_store.snapshot()?);
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::info!("{rec}");
        log.record(rec)?;
        if cfg.patience.is_some_and(|p| since_best >= p) {
            break;
        }
    }
    vae_store.restore(&best_state.0)?;
    pred_store.restore(&best_state.1)?;
    let after = evaluate(vae, pred, vae_store, pred_store, val, palette, &spec)?;
    let (recon_after, _) = recon_metrics(vae, &train_frames, palette, 8)?;
    let run = E2eRun {
        before,
        after,
        recon_before,
        recon_after,
        best_epoch,
    };
    log.record(json!({
        "phase": "E2E", "summary": true, "best_epoch": best_epoch,
        "val_forecast_miou_before": run.before.avg_miou, "val_forecast_miou_after": run.after.avg_miou,
        "recon_miou_before": recon_before, "recon_miou_after": recon_after,
        "recon_decreased": run.recon_decreased(),
    }))?;
    if run.recon_decreased() {
        log::warn!("reconstruction mIoU fell during joint training: {recon_before:.4} -> {recon_after:.4}");
    }
    Ok(run)
}

/// Forecast protocol: `past` conditioning frames, `future` predicted frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub past: usize,
    pub future: usize,
    pub fps: f64,
    pub batch: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            past: 4,
            future: 6,
            fps: 2.0,
            batch: 8,
        }
    }
}

impl EvalSpec {
    /// Rollout step reached at `seconds` into the future.
    pub fn step_for_seconds(&self, seconds: f64) -> usize {
        (seconds * self.fps).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub seconds: f64,
    pub miou: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recon_miou: f64,
    pub recon_iou: f64,
    /// Metrics at every rollout step.
    pub steps: Vec<HorizonMetrics>,
    /// Metrics at whole-second horizons (1 s, 2 s, ...).
    pub horizons: Vec<HorizonMetrics>,
    /// Mean over `horizons` (over `steps` when no whole second is reached).
    pub avg_miou: f64,
    pub avg_iou: f64,
    pub n_sequences: usize,
    pub wall_clock_s: f64,
    pub frames_per_second: f64,
    pub param_counts: BTreeMap<String, usize>,
}

/// Per-step metrics of forecasts against ground truth; `preds[i][s]` is
/// sequence `i` at step `s`.
pub fn score_forecasts(
    preds: &[Vec<OccupancyGrid>],
    truth: &[Vec<OccupancyGrid>],
    palette: &LabelPalette,
    spec: &EvalSpec,
) -> Result<(Vec<HorizonMetrics>, Vec<HorizonMetrics>)> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(WorldError::Shape(format!("{} forecasts vs {} truths", preds.len(), truth.len())));
    }
    let n_steps = preds[0].len();
    let mut accs: Vec<MiouAccumulator> = (0..n_steps).map(|_| MiouAccumulator::new(palette)).collect();
    for (p, t) in preds.iter().zip(truth) {
        if p.len() != n_steps || t.len() != n_steps {
            return Err(WorldError::Shape("ragged forecast lengths".into()));
        }
        for s in 0..n_steps {
            accs[s].add(&p[s], &t[s])?;
        }
    }
    let steps: Vec<HorizonMetrics> = accs
        .iter()
        .enumerate()
        .map(|(s, a)| HorizonMetrics {
            step: s + 1,
            seconds: (s + 1) as f64 / spec.fps,
            miou: a.miou().mean,
            iou: a.iou(),
        })
        .collect();
    let horizons = steps
        .iter()
        .filter(|m| (m.seconds - m.seconds.round()).abs() < 1e-9 && m.seconds >= 1.0 - 1e-9)
        .cloned()
        .collect();
    Ok((steps, horizons))
}

/// Reconstruction and forecast metrics on `seqs` (each needs `past + future` frames).
pub fn evaluate(
    vae: &TriPlaneVae,
    pred: &Predictor,
    vae_store: &ParamStore,
    pred_store: &ParamStore,
    seqs: &[SceneSequence],
    palette: &LabelPalette,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    check_dataset(seqs)?;
    if spec.past == 0 || spec.future == 0 {
        return Err(WorldError::Config("past and future must be >= 1".into()));
    }
    let need = spec.past + spec.future;
    if let Some(s) = seqs.iter().find(|s| s.frames.len() < need) {
        return Err(WorldError::Config(format!("sequence of {} frames, protocol needs {need}", s.frames.len())));
    }
    if vae.grid_dims != seqs[0].frames[0].dims() {
        return Err(WorldError::Config(format!(
            "dataset grid {:?} does not match VAE grid {:?}",
            seqs[0].frames[0].dims(),
            vae.grid_dims
        )));
    }
    let frames: Vec<&OccupancyGrid> = seqs.iter().flat_map(|s| s.frames[..need].iter()).collect();
    let (recon_miou, recon_iou) = recon_metrics(vae, &frames, palette, spec.batch)?;
    let start = Instant::now();
    let mut preds: Vec<Vec<OccupancyGrid>> = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(spec.batch.max(1)) {
        let initial: Vec<Vec<&OccupancyGrid>> = chunk.iter().map(|s| s.frames[..spec.past].iter().collect()).collect();
        let controls: Vec<Vec<_>> = (0..spec.future)
            .map(|t| chunk.iter().map(|s| &s.controls[spec.past - 1 + t]).collect())
            .collect();
        let r = rollout(vae, pred, &initial, &controls)?;
        for b in 0..chunk.len() {
            preds.push(r.grids.iter().map(|step| step[b].clone()).collect());
        }
    }
    let wall = start.elapsed().as_secs_f64();
    let truth: Vec<Vec<OccupancyGrid>> = seqs.iter().map(|s| s.frames[spec.past..need].to_vec()).collect();
    let (steps, horizons) = score_forecasts(&preds, &truth, palette, spec)?;
    let pick = if horizons.is_empty() { &steps } else { &horizons };
    let avg = |f: fn(&HorizonMetrics) -> f64| pick.iter().map(f).sum::<f64>() / pick.len() as f64;
    let mut param_counts = BTreeMap::new();
    param_counts.insert("vae".to_string(), vae_store.num_params());
    param_counts.insert("predictor".to_string(), pred_store.num_params());
    Ok(EvalReport {
        recon_miou,
        recon_iou,
        avg_miou: avg(|m| m.miou),
        avg_iou: avg(|m| m.iou),
        steps,
        horizons,
        n_sequences: seqs.len(),
        wall_clock_s: wall,
        frames_per_second: (seqs.len() * spec.future) as f64 / wall.max(1e-9),
        param_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizons_map_to_steps() {
        let spec = EvalSpec::default();
        let steps: Vec<usize> = [1.0, 2.0, 3.0].iter().map(|s| spec.step_for_seconds(*s)).collect();
        assert_eq!(steps, vec![2, 4, 6]);
    }

    #[test]
    fn depth_ramps_to_full_over_first_third() {
        let cfg = TrainConfig { epochs: 9, rollout_steps: 4, ..Default::default() };
        let d: Vec<usize> = (0..9).map(|e| cfg.depth_at(e)).collect();
        assert_eq!(d, vec![1, 2, 3, 4, 4, 4, 4, 4, 4]);
        assert_eq!(TrainConfig { rollout_steps: 1, ..cfg.clone() }.depth_at(0), 1);
    }

    #[test]
    fn config_rejects_zero_epochs_and_negative_lambda() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lambda: Some(-1.0), ..Default::default() }.validate().is_err());
        let text = r#"{"phase":"PREDICTOR","epochs":3,"bogus":1}"#;
        assert!(serde_json::from_str::<TrainConfig>(text).is_err());
    }
}
