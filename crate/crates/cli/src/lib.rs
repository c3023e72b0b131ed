//! `occdrive` command-line front end: argument parsing, config resolution,
//! run manifests and exit codes. The work itself lives in [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{Ctx, EditArgs};
pub use config::Config;
pub use error::{CliError, Result};
pub use manifest::RunManifest;

pub const DATA_ENV: &str = "GENIEDRIVE_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "occdrive", version, about = "Occupancy world model, renderer and toy video generator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; omitted keys take defaults, unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory for checkpoints, outputs, logs and manifests.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Dataset root; defaults to $GENIEDRIVE_DATA_DIR, then <out>/data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// VAE checkpoint directory to use instead of the run's own.
    #[arg(long, global = true)]
    vae: Option<PathBuf>,
    /// Predictor checkpoint directory to use instead of the run's own.
    #[arg(long, global = true)]
    predictor: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate train/val/test synthetic occupancy sequences.
    GenData,
    /// Train the tri-plane VAE.
    TrainVae,
    /// Train the latent predictor against a frozen VAE.
    TrainPred,
    /// Fine-tune VAE and predictor jointly through multi-step rollouts.
    TrainE2e,
    /// Forecast future occupancy for every test sequence.
    Rollout {
        #[arg(long)]
        past: Option<usize>,
        #[arg(long)]
        future: Option<usize>,
    },
    /// Render semantic condition maps from forecasts or test sequences.
    Render,
    /// Remove or insert a box of voxels in a sequence and render before/after.
    Edit {
        /// Sequence directory; defaults to the first test sequence.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `remove` or `insert`.
        #[arg(long)]
        op: String,
        /// Inclusive min and exclusive max corner: x0,y0,z0,x1,y1,z1.
        #[arg(long, value_delimiter = ',', value_name = "X0,Y0,Z0,X1,Y1,Z1", required = true)]
        bbox: Vec<usize>,
        /// Class stamped by `insert`.
        #[arg(long = "class")]
        class_id: Option<u8>,
    },
    /// Train the toy multi-view video model.
    TrainVideo,
    /// Sample videos conditioned on rendered overlap stacks.
    SampleVideo {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Reconstruction and forecast metrics on the test split.
    Eval {
        #[arg(long)]
        past: Option<usize>,
        #[arg(long)]
        future: Option<usize>,
    },
    /// Run every stage in order, resuming from the first missing artifact.
    Pipeline,
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData => "gen-data",
            Cmd::TrainVae => "train-vae",
            Cmd::TrainPred => "train-pred",
            Cmd::TrainE2e => "train-e2e",
            Cmd::Rollout { .. } => "rollout",
            Cmd::Render => "render",
            Cmd::Edit { .. } => "edit",
            Cmd::TrainVideo => "train-video",
            Cmd::SampleVideo { .. } => "sample-video",
            Cmd::Eval { .. } => "eval",
            Cmd::Pipeline => "pipeline",
        }
    }
}

fn resolve_config(common: &Common, cmd: &Cmd) -> Result<Config> {
    let mut cfg = Config::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    match *cmd {
        Cmd::Rollout { past, future } | Cmd::Eval { past, future } => {
            cfg.eval.past = past.unwrap_or(cfg.eval.past);
            cfg.eval.future = future.unwrap_or(cfg.eval.future);
        }
        Cmd::SampleVideo { steps: Some(s) } => cfg.sample.steps = s,
        _ => {}
    }
    cfg.finalize()
}

fn run(ctx: &Ctx, cmd: &Cmd, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    use commands as c;
    match cmd {
        Cmd::GenData => c::gen_data(ctx),
        Cmd::TrainVae => c::train_vae(ctx),
        Cmd::TrainPred => c::train_pred(ctx),
        Cmd::TrainE2e => c::train_e2e(ctx),
        Cmd::Rollout { .. } => c::rollout(ctx),
        Cmd::Render => c::render(ctx),
        Cmd::Edit {
            input,
            op,
            bbox,
            class_id,
        } => {
            let bbox: [usize; 6] = bbox
                .as_slice()
                .try_into()
                .map_err(|_| CliError::Config("--bbox takes six comma-separated integers".into()))?;
            let args = EditArgs {
                input: input.clone(),
                op: op.clone(),
                bbox,
                class_id: *class_id,
            };
            c::edit(ctx, &args)
        }
        Cmd::TrainVideo => c::train_video(ctx),
        Cmd::SampleVideo { .. } => c::sample_video(ctx),
        Cmd::Eval { .. } => c::eval(ctx),
        Cmd::Pipeline => pipeline::run_pipeline(ctx, manifest),
    }
}

/// Parse `argv`, run one subcommand and return the process exit code:
/// 0 on success, 2 on usage or config errors, 1 on runtime errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let name = cli.cmd.name();
    let common = &cli.common;
    let cfg = resolve_config(common, &cli.cmd);
    let (hash, seed) = match &cfg {
        Ok(c) => (c.hash(), c.seed),
        Err(_) => (String::new(), common.seed.unwrap_or_default()),
    };
    let mut manifest = RunManifest::start(name, hash, seed);
    let result = cfg.and_then(|cfg| {
        let data = common
            .data
            .clone()
            .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
            .unwrap_or_else(|| common.out.join("data"));
        let ctx = Ctx {
            cfg,
            out: common.out.clone(),
            data,
            vae: common.vae.clone(),
            predictor: common.predictor.clone(),
        };
        run(&ctx, &cli.cmd, &mut manifest)
    });
    manifest.finished_at = Some(manifest::now());
    let code = match result {
        Ok(outputs) => {
            manifest.status = "ok".into();
            manifest.outputs = outputs;
            0
        }
        Err(e) => {
            eprintln!("occdrive {name}: {e}");
            manifest.status = "failed".into();
            manifest.failed_stage.get_or_insert_with(|| name.to_string());
            manifest.error = Some(e.to_string());
            e.exit_code()
        }
    };
    if let Err(e) = manifest.write(&common.out) {
        eprintln!("occdrive {name}: could not write run manifest: {e}");
        return code.max(1);
    }
    code
}
