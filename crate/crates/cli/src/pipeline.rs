//! Full occupancy-then-video pipeline. Each stage is skipped while its marker
//! file exists; the first missing marker and every later stage are rerun.

use std::path::PathBuf;

use crate::commands::{self as c, Ctx, SUMMARY};
use crate::error::{CliError, Result};
use crate::manifest::RunManifest;

type StageFn = fn(&Ctx) -> Result<Vec<PathBuf>>;

pub const STAGES: [(&str, StageFn); 9] = [
    ("gen-data", c::gen_data),
    ("train-vae", c::train_vae),
    ("train-pred", c::train_pred),
    ("train-e2e", c::train_e2e),
    ("rollout", c::rollout),
    ("render", c::render),
    ("train-video", c::train_video),
    ("sample-video", c::sample_video),
    ("eval", c::eval),
];

/// Marker whose presence means the stage completed.
pub fn marker(ctx: &Ctx, stage: &str) -> PathBuf {
    let dir = match stage {
        "gen-data" => return ctx.data.join("index.json"),
        "train-vae" => "vae",
        "train-pred" => "predictor",
        "train-e2e" => "e2e",
        "rollout" => "rollout",
        "render" => "render",
        "train-video" => "video",
        "sample-video" => "samples",
        "eval" => "eval",
        other => panic!("unknown stage {other}"),
    };
    ctx.path(dir).join(SUMMARY)
}

/// Index of the first stage whose marker is missing; `STAGES.len()` when all exist.
pub fn resume_point(ctx: &Ctx) -> usize {
    STAGES
        .iter()
        .position(|(name, _)| !marker(ctx, name).exists())
        .unwrap_or(STAGES.len())
}

pub fn run_pipeline(ctx: &Ctx, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let start = resume_point(ctx);
    let mut outputs = Vec::new();
    let mut ran = Vec::new();
    for (name, stage) in &STAGES[start..] {
        log::info!("pipeline stage {name}");
        let t0 = std::time::Instant::now();
        match stage(ctx) {
            Ok(out) => outputs.extend(out),
            Err(e) => {
                manifest.failed_stage = Some(name.to_string());
                return Err(match e {
                    CliError::Config(m) => CliError::Config(format!("stage {name}: {m}")),
                    CliError::Runtime(m) => CliError::Runtime(format!("stage {name}: {m}")),
                });
            }
        }
        ran.push(serde_json::json!({ "stage": name, "seconds": t0.elapsed().as_secs_f64() }));
    }
    let mut stages = serde_json::Map::new();
    for (name, _) in &STAGES {
        let text = std::fs::read_to_string(marker(ctx, name))?;
        stages.insert(name.to_string(), serde_json::from_str(&text)?);
    }
    let report = serde_json::json!({
        "resumed_from": STAGES.get(start).map(|s| s.0),
        "ran": ran,
        "stages": stages,
    });
    let path = ctx.path("report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    outputs.push(path);
    Ok(outputs)
}
