//! On-disk model bundles: a safetensors parameter archive plus a JSON manifest.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MnetConfig, MnetModel, ModlConfig, ModlModel, UnetConfig, UnetModel};
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const BUNDLE_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mnet,
    Unet,
    Modl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model_kind: ModelKind,
    pub m: usize,
    pub l: usize,
    pub channels: Vec<usize>,
    pub n_blocks: usize,
    pub cg_tol: f64,
    pub version: u32,
    pub training_step: u64,
    /// Full architecture configuration used to rebuild the model.
    pub config: serde_json::Value,
}

impl Manifest {
    /// Checks the manifest against the grid a caller is configured for.
    pub fn check(&self, kind: ModelKind, m: usize, l: usize) -> Result<()> {
        if self.version != BUNDLE_VERSION {
            return Err(Error::Config(format!("bundle version {} is not {}", self.version, BUNDLE_VERSION)));
        }
        if self.model_kind != kind {
            return Err(Error::Config(format!("bundle holds {:?}, expected {:?}", self.model_kind, kind)));
        }
        if self.m != m || self.l != l {
            return Err(Error::Config(format!(
                "bundle was built for m={} l={}, configuration has m={m} l={l}",
                self.m, self.l
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Model {
    Mnet(MnetModel),
    Unet(UnetModel),
    Modl(ModlModel),
}

impl Model {
    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Mnet(n) => n.store(),
            Model::Unet(n) => n.store(),
            Model::Modl(n) => n.denoiser().store(),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mnet(_) => ModelKind::Mnet,
            Model::Unet(_) => ModelKind::Unet,
            Model::Modl(_) => ModelKind::Modl,
        }
    }

    fn manifest(&self, m: usize, l: usize, training_step: u64) -> Result<Manifest> {
        let (channels, n_blocks, cg_tol, config) = match self {
            Model::Mnet(n) => {
                let c = n.config();
                if (c.m, c.l) != (m, l) {
                    return Err(Error::validation("MNet grid disagrees with the bundle grid"));
                }
                (c.channels.clone(), 0, 0.0, serde_json::to_value(c)?)
            }
            Model::Unet(n) => (vec![n.config().channels], 0, 0.0, serde_json::to_value(n.config())?),
            Model::Modl(n) => {
                let c = n.config();
                (vec![c.denoiser.channels], c.n_blocks, c.cg_tol, serde_json::to_value(c)?)
            }
        };
        Ok(Manifest {
            model_kind: self.kind(),
            m,
            l,
            channels,
            n_blocks,
            cg_tol,
            version: BUNDLE_VERSION,
            training_step,
            config,
        })
    }
}

pub fn save_bundle(dir: &Path, model: &Model, m: usize, l: usize, training_step: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = model.manifest(m, l, training_step)?;
    model.store().save(&dir.join(PARAMS_FILE))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_bundle(dir: &Path, dtype: DType, device: &Device) -> Result<(Model, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::Config(format!("unsupported bundle version {}", manifest.version)));
    }
    // initial values are overwritten by the archive
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let store = ParamStore::new(dtype, device.clone());
    let model = match manifest.model_kind {
        ModelKind::Mnet => {
            let cfg: MnetConfig = serde_json::from_value(manifest.config.clone())?;
            Model::Mnet(MnetModel::new(cfg, store, &mut rng)?)
        }
        ModelKind::Unet => {
            let cfg: UnetConfig = serde_json::from_value(manifest.config.clone())?;
            Model::Unet(UnetModel::new(cfg, store, &mut rng)?)
        }
        ModelKind::Modl => {
            let cfg: ModlConfig = serde_json::from_value(manifest.config.clone())?;
            Model::Modl(ModlModel::new(cfg, store, &mut rng)?)
        }
    };
    model.store().load(&dir.join(PARAMS_FILE))?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_parameters_and_checks_grid() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = MnetConfig {
            m: 64,
            n: 64,
            l: 4,
            channels: vec![2, 2, 2, 2, 2],
            fc: vec![4, 4, 4],
        };
        let net = MnetModel::new(cfg, ParamStore::new(DType::F32, Device::Cpu), &mut rng).unwrap();
        let snap = net.store().snapshot().unwrap();
        let saved = save_bundle(dir.path(), &Model::Mnet(net), 64, 4, 17).unwrap();
        let (loaded, manifest) = load_bundle(dir.path(), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(saved, manifest);
        assert_eq!(manifest.training_step, 17);
        assert!(loaded.store().bit_equal(&snap).unwrap());
        manifest.check(ModelKind::Mnet, 64, 4).unwrap();
        assert!(manifest.check(ModelKind::Mnet, 64, 8).is_err());
        assert!(manifest.check(ModelKind::Unet, 64, 4).is_err());
    }

    #[test]
    fn modl_manifest_records_solver_settings() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = ModlConfig::default();
        cfg.denoiser.channels = 2;
        cfg.denoiser.depth = 1;
        let net = ModlModel::new(cfg, ParamStore::new(DType::F32, Device::Cpu), &mut rng).unwrap();
        let manifest = save_bundle(dir.path(), &Model::Modl(net), 16, 4, 0).unwrap();
        assert_eq!(manifest.n_blocks, 4);
        assert_eq!(manifest.cg_tol, 5e-5);
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"model_kind\": \"modl\""));
    }
}
