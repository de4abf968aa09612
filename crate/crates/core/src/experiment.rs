//! Run configuration, checkpoints and the commands that tie the trainers
//! together. The command line is a thin layer over this module.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, DataSource, DatasetSpec, Slice, SliceManifest, SplitCounts, Splits};
use crate::error::{Error, Result};
use crate::forward_model::fft2c;
use crate::masks::{energy_density_distribution, make_equispaced_mask, BinaryMask};
use crate::metrics::{MetricsReport, Summary};
use crate::networks::{
    load_bundle, save_bundle, MnetConfig, MnetModel, Model, ModlConfig, ModlModel, Reconstructor, UnetConfig,
    UnetModel, ZeroFilled,
};
use crate::ops::CenteredDft;
use crate::params::ParamStore;
use crate::training::{
    alternating_train, evaluate, make_batch, train_loupe, train_separate_reconstructor, warmup_reconstructor,
    AlphaGrid, Alternating, AlternatingConfig, AlternatingSummary, Budget, DensitySampler, EventLog, FixedSampler,
    LoupeConfig, LoupeModel, LoupeOptimizers, LoupeSampler, MaskBackwardConfig, MaskSource, MnetSampler, Plateau,
    RmsProp, SeparateTrainConfig, UniformSampler, WarmupConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const ENV_PREFIX: &str = "MNET_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub source: DataSource,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSettings {
    /// Reconstructor that is warmed up and co-trained with the mask predictor.
    pub unet: UnetConfig,
    /// Reconstructor trained separately behind a frozen sampler.
    pub separate_unet: UnetConfig,
    pub modl: ModlConfig,
    pub mnet_channels: Vec<usize>,
    pub mnet_fc: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskBackwardSettings {
    pub steps: usize,
    pub lambda: f64,
    pub lr_recon: f64,
    pub lr_xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub acceleration: u32,
    pub m: usize,
    pub n: usize,
    pub l_base: usize,
    pub budget: usize,
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub output: PathBuf,
    pub device: String,
    pub precision: Precision,
    pub batch_size: usize,
    pub dataset: DataSettings,
    pub networks: NetworkSettings,
    pub warmup: WarmupConfig,
    pub mask_backward: MaskBackwardSettings,
    /// The sparsity-weight grid for the acceleration, multiplied by
    /// `10^alpha_shift_decades`.
    pub alpha_shift_decades: f64,
    pub alternating: AlternatingConfig,
    pub separate: SeparateTrainConfig,
    pub loupe: LoupeConfig,
}

/// Base rows and budget for `m` rows at an acceleration. The full-size
/// grid uses the published split; smaller grids split the sampled rows
/// evenly between base band and budget.
pub fn geometry_for(m: usize, acceleration: u32) -> Result<(usize, usize)> {
    match (m, acceleration) {
        (320, 4) => Ok((16, 64)),
        (320, 8) => Ok((8, 32)),
        (_, 4 | 8) => {
            let sampled = m / acceleration as usize;
            if sampled < 2 || sampled * acceleration as usize != m || sampled % 2 != 0 {
                return Err(Error::Config(format!("{m} rows do not split evenly at {acceleration}x")));
            }
            Ok((sampled / 2, sampled / 2))
        }
        _ => Err(Error::Config(format!("acceleration must be 4 or 8, got {acceleration}"))),
    }
}

impl RunConfig {
    /// 64 x 64 phantoms, 200/25/25 split, 4x as 8 base rows plus 8, and
    /// networks small enough for a CPU.
    pub fn desk() -> Self {
        let unet = UnetConfig {
            in_channels: 1,
            out_channels: 1,
            channels: 8,
            depth: 4,
            residual: true,
        };
        let mut modl = ModlConfig::default();
        modl.denoiser.channels = 8;
        Self {
            acceleration: 4,
            m: 64,
            n: 64,
            l_base: 8,
            budget: 8,
            seed: 0,
            output: PathBuf::from("runs/desk"),
            device: "cpu".into(),
            precision: Precision::F32,
            batch_size: 8,
            dataset: DataSettings {
                source: DataSource::Phantom { count: 250 },
                counts: SplitCounts {
                    train: 200,
                    val: 25,
                    test: 25,
                },
            },
            networks: NetworkSettings {
                unet,
                separate_unet: UnetConfig { in_channels: 2, ..unet },
                modl,
                // three pooling stages: at 64x64 a fourth leaves a 1x1 map
                // and the predictor stops seeing the image
                mnet_channels: vec![8, 16, 32, 64],
                mnet_fc: vec![256, 128, 128],
            },
            warmup: WarmupConfig::default(),
            mask_backward: MaskBackwardSettings {
                steps: 20,
                lambda: 5e-4,
                lr_recon: 5e-4,
                lr_xi: 5e-3,
            },
            alpha_shift_decades: 3.0,
            alternating: AlternatingConfig {
                epochs: 3,
                ..AlternatingConfig::default()
            },
            separate: SeparateTrainConfig {
                epochs: 10,
                ..SeparateTrainConfig::default()
            },
            loupe: LoupeConfig {
                epochs: 20,
                ..LoupeConfig::default()
            },
        }
        .finalized()
    }

    /// Full-size settings on fastMRI single-coil knee data.
    pub fn full(acceleration: u32, data_dir: PathBuf) -> Result<Self> {
        let mut cfg = Self::desk();
        cfg.m = 320;
        cfg.n = 320;
        cfg.output = PathBuf::from("runs/full");
        cfg.dataset = DataSettings {
            source: DataSource::Fastmri { dir: data_dir },
            // six middle slices of roughly a thousand volumes
            counts: SplitCounts {
                train: 4800,
                val: 600,
                test: 600,
            },
        };
        cfg.networks.unet.channels = 64;
        cfg.networks.separate_unet.channels = 64;
        cfg.networks.modl = ModlConfig::default();
        cfg.networks.mnet_channels = vec![64, 128, 256, 512, 512];
        cfg.networks.mnet_fc = vec![1024, 512, 512];
        cfg.alpha_shift_decades = 0.0;
        cfg.alternating.epochs = 10;
        cfg.separate.epochs = 40;
        cfg.loupe.epochs = 40;
        cfg.set_acceleration(acceleration)?;
        Ok(cfg)
    }

    /// A configuration small enough for smoke tests.
    pub fn tiny() -> Self {
        let mut cfg = Self::desk();
        cfg.m = 32;
        cfg.n = 32;
        cfg.l_base = 4;
        cfg.budget = 4;
        cfg.batch_size = 4;
        cfg.output = PathBuf::from("runs/tiny");
        cfg.dataset = DataSettings {
            source: DataSource::Phantom { count: 16 },
            counts: SplitCounts {
                train: 8,
                val: 4,
                test: 4,
            },
        };
        let unet = UnetConfig {
            channels: 2,
            depth: 2,
            ..cfg.networks.unet
        };
        cfg.networks.unet = unet;
        cfg.networks.separate_unet = UnetConfig { in_channels: 2, ..unet };
        cfg.networks.modl.denoiser.channels = 2;
        cfg.networks.modl.denoiser.depth = 2;
        cfg.networks.modl.n_blocks = 2;
        cfg.networks.mnet_channels = vec![2, 2, 2];
        cfg.networks.mnet_fc = vec![8, 8, 8];
        cfg.warmup.epochs = 1;
        cfg.mask_backward.steps = 3;
        cfg.alternating.epochs = 1;
        cfg.alternating.mnet_steps = 2;
        cfg.alternating.max_retries = 2;
        cfg.separate.epochs = 1;
        cfg.loupe.epochs = 1;
        cfg.finalized()
    }

    /// Sets the acceleration and the matching base rows and budget.
    pub fn set_acceleration(&mut self, acceleration: u32) -> Result<()> {
        let (l, b) = geometry_for(self.m, acceleration)?;
        self.acceleration = acceleration;
        self.l_base = l;
        self.budget = b;
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.finalize();
    }

    fn finalized(mut self) -> Self {
        self.finalize();
        self
    }

    /// Derives the component seeds and copies shared settings into the
    /// trainer configurations.
    pub fn finalize(&mut self) {
        self.warmup.seed = self.seed;
        self.alternating.seed = self.seed.wrapping_add(1);
        self.separate.seed = self.seed.wrapping_add(2);
        self.loupe.seed = self.seed.wrapping_add(3);
        self.warmup.batch_size = self.batch_size;
        self.alternating.batch_size = self.batch_size;
        self.separate.batch_size = self.batch_size;
        self.loupe.batch_size = self.batch_size;
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.acceleration, 4 | 8) {
            return Err(Error::Config(format!("acceleration must be 4 or 8, got {}", self.acceleration)));
        }
        let sampled = self.l_base + self.budget;
        if sampled == 0 || self.m != self.acceleration as usize * sampled {
            return Err(Error::Config(format!(
                "{} rows with {} base rows and budget {} is not {}x acceleration",
                self.m, self.l_base, self.budget, self.acceleration
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!("device {:?} is not available in this build", self.device)));
        }
        if let DataSource::Fastmri { dir } = &self.dataset.source {
            if !dir.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", dir.display())));
            }
        }
        if !self.alpha_shift_decades.is_finite() {
            return Err(Error::Config("alpha shift must be finite".into()));
        }
        self.dataset_spec().validate()?;
        self.networks.unet.validate()?;
        self.networks.separate_unet.validate()?;
        self.networks.modl.validate()?;
        self.mnet_config().validate()?;
        self.mask_backward_config().validate()?;
        self.alternating.validate()?;
        AlphaGrid::for_acceleration(self.acceleration)?;
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            source: self.dataset.source.clone(),
            m: self.m,
            n: self.n,
            counts: self.dataset.counts,
            seed: self.seed,
        }
    }

    pub fn budget_geometry(&self) -> Budget {
        Budget {
            m: self.m,
            l: self.l_base,
            b: self.budget,
        }
    }

    pub fn mnet_config(&self) -> MnetConfig {
        MnetConfig {
            m: self.m,
            n: self.n,
            l: self.l_base,
            channels: self.networks.mnet_channels.clone(),
            fc: self.networks.mnet_fc.clone(),
        }
    }

    pub fn mask_backward_config(&self) -> MaskBackwardConfig {
        let s = &self.mask_backward;
        MaskBackwardConfig {
            steps: s.steps,
            lambda: s.lambda,
            lr_recon: s.lr_recon,
            lr_xi: s.lr_xi,
            ..MaskBackwardConfig::new(self.m, self.l_base, self.budget)
        }
    }

    pub fn alpha_grid(&self) -> Result<AlphaGrid> {
        Ok(AlphaGrid::for_acceleration(self.acceleration)?.shifted(self.alpha_shift_decades))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
    }

    /// Layers a TOML file (if any) and then `MNET_`-prefixed variables over
    /// `base`. Nested keys are joined with `__`, e.g.
    /// `MNET_ALTERNATING__EPOCHS=2`; values are parsed as TOML and fall back
    /// to plain strings.
    pub fn layered(base: RunConfig, file: Option<&Path>, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut value = toml::Value::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let overlay: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut value, toml::Value::Table(overlay));
        }
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
            set_path(&mut value, &path, parse_env_value(&raw))?;
        }
        let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.finalize();
        Ok(cfg)
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) if o.get("kind").is_none_or(|k| b.get("kind") == Some(k)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(value: &mut toml::Value, path: &[String], v: toml::Value) -> Result<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| Error::Config("empty environment override".into()))?;
    let mut cur = value;
    for p in parents {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(p))
            .ok_or_else(|| Error::Config(format!("unknown configuration key {}", path.join("."))))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("{} is not a section", parents.join("."))))?;
    if !table.contains_key(last) {
        return Err(Error::Config(format!("unknown configuration key {}", path.join("."))));
    }
    table.insert(last.clone(), v);
    Ok(())
}

/// Progress recorded next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub command: String,
    /// Number of completed epochs.
    pub epochs_done: usize,
    pub lr: Option<f64>,
    pub plateau: Option<Plateau>,
    pub sampler: Option<String>,
    pub reconstructor: Option<String>,
}

pub const STATE_FILE: &str = "state.json";
pub const RECON_DIR: &str = "recon";
pub const MNET_DIR: &str = "mnet";
const OPT_FILE: &str = "optimizer.safetensors";
const LOUPE_FILE: &str = "loupe.safetensors";
const LOUPE_OPT_FILE: &str = "loupe_opt.safetensors";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_state(dir: &Path) -> Result<TrainState> {
    read_json(&dir.join(STATE_FILE))
}

/// Checkpoints live in `<output>/checkpoints/{command}_{epoch}_{step}`; the
/// file `latest_{command}` names the newest one.
#[derive(Debug, Clone)]
pub struct Checkpoints {
    pub root: PathBuf,
}

impl Checkpoints {
    pub fn name(command: &str, epoch: usize, step: usize) -> String {
        format!("{command}_{epoch}_{step}")
    }

    pub fn create(&self, command: &str, epoch: usize, step: usize) -> Result<PathBuf> {
        let dir = self.root.join(Self::name(command, epoch, step));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    pub fn mark_latest(&self, command: &str, dir: &Path) -> Result<()> {
        let name = dir
            .file_name()
            .ok_or_else(|| Error::validation("checkpoint directory has no name"))?;
        let path = self.root.join(format!("latest_{command}"));
        fs::write(&path, name.to_string_lossy().as_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn latest(&self, command: &str) -> Result<Option<PathBuf>> {
        let path = self.root.join(format!("latest_{command}"));
        if !path.exists() {
            return Ok(None);
        }
        let name = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(self.root.join(name.trim())))
    }
}

/// Where a mask comes from at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub enum SamplerSpec {
    Random,
    Equispaced,
    /// Rows drawn with probability proportional to the mean training energy.
    Energy,
    Mnet(PathBuf),
    Loupe { checkpoint: PathBuf, stochastic: bool },
}

impl std::str::FromStr for SamplerSpec {
    type Err = Error;

    /// `random`, `equispaced`, `energy`, `mnet:DIR`, `loupe:DIR` or `loupe-stochastic:DIR`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(PathBuf::from(a))),
            None => (s, None),
        };
        match (kind, arg) {
            ("random", None) => Ok(Self::Random),
            ("equispaced", None) => Ok(Self::Equispaced),
            ("energy", None) => Ok(Self::Energy),
            ("mnet", Some(p)) => Ok(Self::Mnet(p)),
            ("loupe", Some(p)) => Ok(Self::Loupe {
                checkpoint: p,
                stochastic: false,
            }),
            ("loupe-stochastic", Some(p)) => Ok(Self::Loupe {
                checkpoint: p,
                stochastic: true,
            }),
            _ => Err(Error::Config(format!("unknown sampler {s:?}"))),
        }
    }
}

impl std::fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Random => write!(f, "random"),
            Self::Equispaced => write!(f, "equispaced"),
            Self::Energy => write!(f, "energy"),
            Self::Mnet(p) => write!(f, "mnet:{}", p.display()),
            Self::Loupe { checkpoint, stochastic } => {
                let kind = if *stochastic { "loupe-stochastic" } else { "loupe" };
                write!(f, "{kind}:{}", checkpoint.display())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKind {
    Unet,
    Modl,
}

impl std::str::FromStr for ReconKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Self::Unet),
            "modl" => Ok(Self::Modl),
            _ => Err(Error::Config(format!("unknown reconstructor {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// A loaded sampler together with whatever model it borrows.
pub enum LoadedSampler {
    Fixed(FixedSampler),
    Uniform(UniformSampler),
    Density(DensitySampler),
    Mnet(MnetModel, usize),
    Loupe(LoupeModel, bool, u64),
}

impl LoadedSampler {
    pub fn source(&self) -> Box<dyn MaskSource + '_> {
        match self {
            Self::Fixed(s) => Box::new(s.clone()),
            Self::Uniform(s) => Box::new(s.clone()),
            Self::Density(s) => Box::new(s.clone()),
            Self::Mnet(model, b) => Box::new(MnetSampler { model, b: *b }),
            Self::Loupe(model, stochastic, seed) => Box::new(LoupeSampler {
                model,
                stochastic: stochastic.then_some(*seed),
            }),
        }
    }
}

/// Images and masks of one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPrediction {
    pub id: String,
    pub mask: BinaryMask,
}

/// Distinct masks and pairwise Hamming distances over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptivityReport {
    pub images: usize,
    pub distinct: usize,
    /// Distance of every unordered pair, in index order.
    pub hamming: Vec<usize>,
    pub summary: Summary,
}

impl AdaptivityReport {
    pub fn of(masks: &[BinaryMask]) -> Self {
        let distinct = masks.iter().map(|m| m.rows().to_vec()).collect::<BTreeSet<_>>().len();
        let mut hamming = Vec::new();
        for i in 0..masks.len() {
            for j in i + 1..masks.len() {
                hamming.push(masks[i].hamming(&masks[j]));
            }
        }
        let values: Vec<f64> = hamming.iter().map(|&h| h as f64).collect();
        Self {
            images: masks.len(),
            distinct,
            summary: Summary::of(&values),
            hamming,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub predictions: Vec<MaskPrediction>,
    pub adaptivity: AdaptivityReport,
}

/// Loaded dataset and numerical context of a run.
pub struct Experiment {
    pub cfg: RunConfig,
    pub dtype: DType,
    pub device: Device,
    pub dft: CenteredDft,
    pub splits: Splits,
    pub checkpoints: Checkpoints,
}

impl Experiment {
    /// Validates the configuration, loads the data and prepares the output
    /// directory, echoing the effective configuration and the split into it.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let device = Device::Cpu;
        let spec = cfg.dataset_spec();
        let splits = load_dataset(&spec)?;
        for sub in ["checkpoints", "events", "reports"] {
            let dir = cfg.output.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let path = cfg.output.join(CONFIG_FILE);
        fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
        SliceManifest::of(&spec, &splits).save(&cfg.output.join("dataset.json"))?;
        Ok(Self {
            dft: CenteredDft::new(cfg.m, cfg.n, dtype, &device)?,
            checkpoints: Checkpoints {
                root: cfg.output.join("checkpoints"),
            },
            cfg,
            dtype,
            device,
            splits,
        })
    }

    pub fn split(&self, split: Split) -> &[Slice] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
    }

    fn events(&self, command: &str, resume: bool) -> Result<EventLog> {
        let path = self.cfg.output.join("events").join(format!("{command}.jsonl"));
        if resume {
            EventLog::append_to(&path)
        } else {
            EventLog::to_file(&path)
        }
    }

    pub fn new_unet(&self, cfg: UnetConfig, salt: u64) -> Result<UnetModel> {
        UnetModel::new(cfg, ParamStore::new(self.dtype, self.device.clone()), &mut self.rng(salt))
    }

    pub fn new_mnet(&self) -> Result<MnetModel> {
        MnetModel::new(self.cfg.mnet_config(), ParamStore::new(self.dtype, self.device.clone()), &mut self.rng(2))
    }

    /// Mean row-energy profile of the training k-space.
    pub fn energy_density(&self) -> Result<Vec<f64>> {
        let spectra: Vec<_> = self.splits.train.iter().map(|s| fft2c(&s.image)).collect();
        energy_density_distribution(&spectra)
    }

    fn save_model(&self, dir: &Path, model: Model, step: u64) -> Result<()> {
        save_bundle(dir, &model, self.cfg.m, self.cfg.l_base, step)?;
        Ok(())
    }

    fn load_model(&self, dir: &Path) -> Result<Model> {
        let (model, manifest) = load_bundle(dir, self.dtype, &self.device)?;
        if (manifest.m, manifest.l) != (self.cfg.m, self.cfg.l_base) {
            return Err(Error::Config(format!(
                "{} was trained for m={} l={}, configuration has m={} l={}",
                dir.display(),
                manifest.m,
                manifest.l,
                self.cfg.m,
                self.cfg.l_base
            )));
        }
        Ok(model)
    }

    /// The reconstructor bundle in a checkpoint (or a bundle directory itself).
    pub fn load_reconstructor(&self, path: &Path) -> Result<Box<dyn Reconstructor>> {
        let dir = if path.join(RECON_DIR).is_dir() { path.join(RECON_DIR) } else { path.to_path_buf() };
        match self.load_model(&dir)? {
            Model::Unet(n) => Ok(Box::new(n)),
            Model::Modl(n) => Ok(Box::new(n)),
            Model::Mnet(_) => Err(Error::Config(format!("{} holds a mask predictor", dir.display()))),
        }
    }

    fn load_unet(&self, path: &Path) -> Result<UnetModel> {
        let dir = if path.join(RECON_DIR).is_dir() { path.join(RECON_DIR) } else { path.to_path_buf() };
        match self.load_model(&dir)? {
            Model::Unet(n) => Ok(n),
            _ => Err(Error::Config(format!("{} does not hold a U-Net", dir.display()))),
        }
    }

    pub fn load_mnet(&self, path: &Path) -> Result<MnetModel> {
        let dir = if path.join(MNET_DIR).is_dir() { path.join(MNET_DIR) } else { path.to_path_buf() };
        match self.load_model(&dir)? {
            Model::Mnet(n) => Ok(n),
            _ => Err(Error::Config(format!("{} does not hold a mask predictor", dir.display()))),
        }
    }

    pub fn load_loupe(&self, dir: &Path) -> Result<LoupeModel> {
        let model = LoupeModel::new(self.cfg.budget_geometry(), self.cfg.loupe.slope, self.dtype, &self.device)?;
        model.load(&dir.join(LOUPE_FILE))?;
        Ok(model)
    }

    pub fn load_sampler(&self, spec: &SamplerSpec) -> Result<LoadedSampler> {
        let Budget { m, l, b } = self.cfg.budget_geometry();
        Ok(match spec {
            SamplerSpec::Random => LoadedSampler::Uniform(UniformSampler {
                m,
                l,
                b,
                seed: self.cfg.seed.wrapping_add(4),
            }),
            SamplerSpec::Equispaced => LoadedSampler::Fixed(FixedSampler {
                label: "equispaced".into(),
                mask: make_equispaced_mask(m, l, b)?,
            }),
            SamplerSpec::Energy => LoadedSampler::Density(DensitySampler {
                m,
                l,
                b,
                density: self.energy_density()?,
                seed: self.cfg.seed.wrapping_add(5),
                label: "energy".into(),
            }),
            SamplerSpec::Mnet(p) => LoadedSampler::Mnet(self.load_mnet(p)?, b),
            SamplerSpec::Loupe { checkpoint, stochastic } => {
                LoadedSampler::Loupe(self.load_loupe(checkpoint)?, *stochastic, self.cfg.seed.wrapping_add(6))
            }
        })
    }

    fn resume_state(&self, command: &str, resume: Option<&Path>) -> Result<Option<TrainState>> {
        let Some(dir) = resume else {
            return Ok(None);
        };
        let state = read_state(dir)?;
        if state.command != command {
            return Err(Error::Config(format!(
                "{} is a {} checkpoint, not {command}",
                dir.display(),
                state.command
            )));
        }
        Ok(Some(state))
    }

    /// Warms up the reconstructor on variable-density random masks.
    pub fn warmup(&self, resume: Option<&Path>) -> Result<PathBuf> {
        let net = self.new_unet(self.cfg.networks.unet, 1)?;
        let mut opt = RmsProp::for_store(net.store(), self.cfg.warmup.lr)?;
        let state = self.resume_state("warmup", resume)?;
        if let (Some(dir), Some(_)) = (resume, &state) {
            net.store().copy_from(self.load_unet(dir)?.store())?;
            opt.load(&dir.join(OPT_FILE))?;
        }
        let start = state.as_ref().map_or(0, |s| s.epochs_done);
        let mut log = self.events("warmup", state.is_some())?;
        let density = self.energy_density()?;
        let steps = self.cfg.dataset.counts.train.div_ceil(self.cfg.batch_size);
        let mut last = resume.map(Path::to_path_buf);
        warmup_reconstructor(
            &net,
            &mut opt,
            &self.splits.train,
            &density,
            self.cfg.budget_geometry(),
            &self.cfg.warmup,
            start,
            &self.dft,
            &mut log,
            &mut |epoch, opt| {
                let step = (epoch + 1) * steps;
                let dir = self.checkpoints.create("warmup", epoch, step)?;
                self.save_model(&dir.join(RECON_DIR), Model::Unet(net.clone()), step as u64)?;
                opt.save(&dir.join(OPT_FILE))?;
                write_json(
                    &dir.join(STATE_FILE),
                    &TrainState {
                        command: "warmup".into(),
                        epochs_done: epoch + 1,
                        lr: Some(opt.lr()),
                        plateau: None,
                        sampler: None,
                        reconstructor: Some("unet".into()),
                    },
                )?;
                self.checkpoints.mark_latest("warmup", &dir)?;
                last = Some(dir);
                Ok(())
            },
        )?;
        last.ok_or_else(|| Error::Config("warm-up ran no epochs".into()))
    }

    /// Alternating training of the mask predictor and the reconstructor,
    /// starting from a warmed-up checkpoint.
    pub fn joint(&self, warmup: &Path, resume: Option<&Path>) -> Result<(PathBuf, AlternatingSummary)> {
        let u0 = self.load_unet(warmup)?;
        let recon = self.new_unet(self.cfg.networks.unet, 1)?;
        let mnet = self.new_mnet()?;
        let state = self.resume_state("joint", resume)?;
        let mut alt = Alternating::new(
            &mnet,
            &recon,
            &u0,
            self.cfg.alternating.clone(),
            self.cfg.mask_backward_config(),
            self.cfg.alpha_grid()?,
        )?;
        match (resume, &state) {
            (Some(dir), Some(_)) => {
                recon.store().copy_from(self.load_unet(dir)?.store())?;
                mnet.store().copy_from(self.load_mnet(dir)?.store())?;
                alt.load_state(dir)?;
            }
            _ => recon.store().copy_from(u0.store())?,
        }
        let start = state.as_ref().map_or(0, |s| s.epochs_done);
        let mut log = self.events("joint", state.is_some())?;
        let steps = self.cfg.dataset.counts.train.div_ceil(self.cfg.batch_size);
        let mut last = resume.map(Path::to_path_buf);
        let summary = alternating_train(&mut alt, &self.splits.train, start, &self.dft, &mut log, &mut |epoch, alt| {
            let step = (epoch + 1) * steps;
            let dir = self.checkpoints.create("joint", epoch, step)?;
            self.save_model(&dir.join(MNET_DIR), Model::Mnet(mnet.clone()), step as u64)?;
            self.save_model(&dir.join(RECON_DIR), Model::Unet(recon.clone()), step as u64)?;
            alt.save_state(&dir)?;
            write_json(
                &dir.join(STATE_FILE),
                &TrainState {
                    command: "joint".into(),
                    epochs_done: epoch + 1,
                    lr: Some(alt.cfg.lr_mnet),
                    plateau: None,
                    sampler: Some("mnet".into()),
                    reconstructor: Some("unet".into()),
                },
            )?;
            self.checkpoints.mark_latest("joint", &dir)?;
            last = Some(dir);
            Ok(())
        })?;
        let dir = last.ok_or_else(|| Error::Config("joint training ran no epochs".into()))?;
        if !self.splits.val.is_empty() {
            let report = evaluate(
                &MnetSampler {
                    model: &mnet,
                    b: self.cfg.budget,
                },
                &recon,
                "unet-cotrained",
                &self.splits.val,
                self.cfg.batch_size,
                &self.dft,
            )?;
            report.save(&self.cfg.output.join("reports"), "joint_val")?;
        }
        Ok((dir, summary))
    }

    /// Trains a reconstructor on 2-channel inputs behind a frozen sampler.
    pub fn separate(&self, sampler: &SamplerSpec, kind: ReconKind, resume: Option<&Path>) -> Result<PathBuf> {
        let loaded = self.load_sampler(sampler)?;
        let source = loaded.source();
        let model = match kind {
            ReconKind::Unet => Model::Unet(self.new_unet(self.cfg.networks.separate_unet, 3)?),
            ReconKind::Modl => Model::Modl(ModlModel::new(
                self.cfg.networks.modl,
                ParamStore::new(self.dtype, self.device.clone()),
                &mut self.rng(3),
            )?),
        };
        let recon: &dyn Reconstructor = match &model {
            Model::Unet(n) => n,
            Model::Modl(n) => n,
            Model::Mnet(_) => unreachable!("built above"),
        };
        let mut opt = RmsProp::for_store(model.store(), self.cfg.separate.lr)?;
        let mut plateau = self.cfg.separate.plateau();
        let state = self.resume_state("recon", resume)?;
        if let (Some(dir), Some(st)) = (resume, &state) {
            let (saved, _) = load_bundle(&dir.join(RECON_DIR), self.dtype, &self.device)?;
            if saved.kind() != model.kind() {
                return Err(Error::Config(format!("{} holds a different reconstructor", dir.display())));
            }
            model.store().copy_from(saved.store())?;
            opt.load(&dir.join(OPT_FILE))?;
            if let Some(lr) = st.lr {
                opt.set_lr(lr);
            }
            if let Some(p) = &st.plateau {
                plateau = p.clone();
            }
        }
        let start = state.as_ref().map_or(0, |s| s.epochs_done);
        let mut log = self.events("recon", state.is_some())?;
        let steps = self.cfg.dataset.counts.train.div_ceil(self.cfg.batch_size);
        let mut last = resume.map(Path::to_path_buf);
        train_separate_reconstructor(
            source.as_ref(),
            recon,
            &mut opt,
            &mut plateau,
            &self.splits.train,
            &self.splits.val,
            &self.cfg.separate,
            start,
            &self.dft,
            &mut log,
            &mut |epoch, opt, plateau| {
                let step = (epoch + 1) * steps;
                let dir = self.checkpoints.create("recon", epoch, step)?;
                self.save_model(&dir.join(RECON_DIR), model.clone(), step as u64)?;
                opt.save(&dir.join(OPT_FILE))?;
                write_json(
                    &dir.join(STATE_FILE),
                    &TrainState {
                        command: "recon".into(),
                        epochs_done: epoch + 1,
                        lr: Some(opt.lr()),
                        plateau: Some(plateau.clone()),
                        sampler: Some(sampler.to_string()),
                        reconstructor: Some(recon.kind().into()),
                    },
                )?;
                self.checkpoints.mark_latest("recon", &dir)?;
                last = Some(dir);
                Ok(())
            },
        )?;
        last.ok_or_else(|| Error::Config("separate training ran no epochs".into()))
    }

    /// LOUPE baseline; its reconstructor starts from the warmed-up one.
    pub fn loupe(&self, warmup: &Path, resume: Option<&Path>) -> Result<PathBuf> {
        let recon = self.load_unet(warmup)?;
        let model = LoupeModel::new(self.cfg.budget_geometry(), self.cfg.loupe.slope, self.dtype, &self.device)?;
        let mut opts = LoupeOptimizers::new(&model, &recon, &self.cfg.loupe)?;
        let state = self.resume_state("loupe", resume)?;
        if let (Some(dir), Some(_)) = (resume, &state) {
            recon.store().copy_from(self.load_unet(dir)?.store())?;
            model.load(&dir.join(LOUPE_FILE))?;
            opts.recon.load(&dir.join(OPT_FILE))?;
            opts.mask.load(&dir.join(LOUPE_OPT_FILE))?;
        }
        let start = state.as_ref().map_or(0, |s| s.epochs_done);
        let mut log = self.events("loupe", state.is_some())?;
        let steps = self.cfg.dataset.counts.train.div_ceil(self.cfg.batch_size);
        let mut last = resume.map(Path::to_path_buf);
        train_loupe(
            &model,
            &recon,
            &mut opts,
            &self.splits.train,
            &self.cfg.loupe,
            start,
            &self.dft,
            &mut log,
            &mut |epoch, opts| {
                let step = (epoch + 1) * steps;
                let dir = self.checkpoints.create("loupe", epoch, step)?;
                self.save_model(&dir.join(RECON_DIR), Model::Unet(recon.clone()), step as u64)?;
                model.save(&dir.join(LOUPE_FILE))?;
                opts.recon.save(&dir.join(OPT_FILE))?;
                opts.mask.save(&dir.join(LOUPE_OPT_FILE))?;
                write_json(
                    &dir.join(STATE_FILE),
                    &TrainState {
                        command: "loupe".into(),
                        epochs_done: epoch + 1,
                        lr: Some(opts.recon.lr()),
                        plateau: None,
                        sampler: Some("loupe".into()),
                        reconstructor: Some("unet".into()),
                    },
                )?;
                self.checkpoints.mark_latest("loupe", &dir)?;
                last = Some(dir);
                Ok(())
            },
        )?;
        last.ok_or_else(|| Error::Config("LOUPE training ran no epochs".into()))
    }

    /// Metrics of a sampler and reconstructor on a split; `recon` of `None`
    /// evaluates the zero-filled reconstruction. Reports are written to
    /// `<output>/reports/<stem>.*`.
    pub fn evaluate(&self, sampler: &SamplerSpec, recon: Option<&Path>, split: Split, stem: &str) -> Result<MetricsReport> {
        let loaded = self.load_sampler(sampler)?;
        let report = match recon {
            Some(path) => {
                let r = self.load_reconstructor(path)?;
                evaluate(loaded.source().as_ref(), r.as_ref(), r.kind(), self.split(split), self.cfg.batch_size, &self.dft)?
            }
            None => {
                let dft = CenteredDft::new(self.cfg.m, self.cfg.n, DType::F64, &Device::Cpu)?;
                evaluate(loaded.source().as_ref(), &ZeroFilled, "zero-filled", self.split(split), self.cfg.batch_size, &dft)?
            }
        };
        report.save(&self.cfg.output.join("reports"), stem)?;
        Ok(report)
    }

    /// Masks a trained predictor proposes for the given slices.
    pub fn predict_masks(&self, mnet: &Path, ids: &[String]) -> Result<PredictionReport> {
        let model = self.load_mnet(mnet)?;
        let all: Vec<&Slice> = self.splits.train.iter().chain(&self.splits.val).chain(&self.splits.test).collect();
        let mut picked = Vec::with_capacity(ids.len());
        for id in ids {
            let s = all
                .iter()
                .find(|s| &s.id() == id)
                .ok_or_else(|| Error::Config(format!("no slice {id:?} in the dataset")))?;
            picked.push((*s).clone());
        }
        if picked.is_empty() {
            return Err(Error::Config("no slices given".into()));
        }
        let sampler = MnetSampler {
            model: &model,
            b: self.cfg.budget,
        };
        let idx: Vec<usize> = (0..picked.len()).collect();
        let mut predictions = Vec::with_capacity(picked.len());
        for chunk in idx.chunks(self.cfg.batch_size) {
            let batch = make_batch(&picked, chunk, self.dtype, &self.device)?;
            for (id, mask) in batch.ids.iter().zip(sampler.masks(&batch)?) {
                predictions.push(MaskPrediction { id: id.clone(), mask });
            }
        }
        let masks: Vec<BinaryMask> = predictions.iter().map(|p| p.mask.clone()).collect();
        Ok(PredictionReport {
            adaptivity: AdaptivityReport::of(&masks),
            predictions,
        })
    }
}

/// Outcome of a full desk-scale pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub mnet: MetricsReport,
    pub loupe: MetricsReport,
    pub random: MetricsReport,
    pub adaptivity: AdaptivityReport,
    pub alternating: AlternatingSummary,
}

/// Images used for the adaptivity report.
pub const ADAPTIVITY_IMAGES: usize = 16;

/// Warm-up, alternating training and LOUPE, then test-set metrics of the
/// adaptive masks with the co-trained reconstructor, the LOUPE mask with its
/// reconstructor and uniform random masks with the warmed-up reconstructor.
pub fn run_pipeline(cfg: RunConfig) -> Result<PipelineReport> {
    let exp = Experiment::new(cfg)?;
    let warm = exp.warmup(None)?;
    let (joint, alternating) = exp.joint(&warm, None)?;
    let loupe = exp.loupe(&warm, None)?;
    let mnet = exp.evaluate(&SamplerSpec::Mnet(joint.clone()), Some(&joint), Split::Test, "test_mnet")?;
    let loupe_report = exp.evaluate(
        &SamplerSpec::Loupe {
            checkpoint: loupe.clone(),
            stochastic: false,
        },
        Some(&loupe),
        Split::Test,
        "test_loupe",
    )?;
    let random = exp.evaluate(&SamplerSpec::Random, Some(&warm), Split::Test, "test_random")?;
    let ids: Vec<String> = exp.splits.test.iter().take(ADAPTIVITY_IMAGES).map(|s| s.id()).collect();
    let predicted = exp.predict_masks(&joint, &ids)?;
    write_json(&exp.cfg.output.join("reports").join("adaptivity.json"), &predicted)?;
    Ok(PipelineReport {
        mnet,
        loupe: loupe_report,
        random,
        adaptivity: predicted.adaptivity,
        alternating,
    })
}
