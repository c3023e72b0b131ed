//! Model checkpoints: parameters in the shared checkpoint format, with the
//! architecture config stored in the manifest's `meta` field.

use std::path::Path;

use candle_core::DType;
use occdrive_nn::{load_checkpoint, save_checkpoint, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WorldError};
use crate::predictor::{Predictor, PredictorConfig};
use crate::vae::{TriPlaneVae, VaeConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VaeMeta {
    kind: String,
    config: VaeConfig,
    grid_dims: [usize; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PredictorMeta {
    kind: String,
    config: PredictorConfig,
    latent_dims: [usize; 3],
}

fn meta_err(e: serde_json::Error) -> WorldError {
    WorldError::Config(format!("checkpoint meta: {e}"))
}

pub fn save_vae(store: &ParamStore, vae: &TriPlaneVae, dir: &Path) -> Result<()> {
    let meta = VaeMeta {
        kind: "triplane_vae".into(),
        config: vae.cfg.clone(),
        grid_dims: vae.grid_dims,
    };
    save_checkpoint(store, &serde_json::to_value(meta).map_err(meta_err)?, dir)?;
    Ok(())
}

pub fn load_vae(dir: &Path, dtype: DType) -> Result<(ParamStore, TriPlaneVae)> {
    let ck = load_checkpoint(dir)?;
    let meta: VaeMeta = serde_json::from_value(ck.meta.clone()).map_err(meta_err)?;
    if meta.kind != "triplane_vae" {
        return Err(WorldError::Config(format!("checkpoint holds a {}, not a VAE", meta.kind)));
    }
    let mut store = ParamStore::new(0, dtype);
    let vae = TriPlaneVae::new(&mut store, &meta.config, meta.grid_dims)?;
    ck.load_into(&store)?;
    Ok((store, vae))
}

pub fn save_predictor(store: &ParamStore, p: &Predictor, latent_dims: [usize; 3], dir: &Path) -> Result<()> {
    let meta = PredictorMeta {
        kind: "predictor".into(),
        config: p.cfg.clone(),
        latent_dims,
    };
    save_checkpoint(store, &serde_json::to_value(meta).map_err(meta_err)?, dir)?;
    Ok(())
}

pub fn load_predictor(dir: &Path, dtype: DType) -> Result<(ParamStore, Predictor)> {
    let ck = load_checkpoint(dir)?;
    let meta: PredictorMeta = serde_json::from_value(ck.meta.clone()).map_err(meta_err)?;
    if meta.kind != "predictor" {
        return Err(WorldError::Config(format!("checkpoint holds a {}, not a predictor", meta.kind)));
    }
    let mut store = ParamStore::new(0, dtype);
    let p = Predictor::new(&mut store, &meta.config, meta.latent_dims)?;
    ck.load_into(&store)?;
    Ok((store, p))
}
