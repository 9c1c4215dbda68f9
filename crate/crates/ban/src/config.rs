//! Run configuration: one TOML file with sections
//! {encoder, taps, bitab, bridging, data, optim, schedule, aris} plus the
//! top-level `seed` and `work_dir`.

use std::path::{Path, PathBuf};

use crate::augment::{AugmentConfig, PhotometricConfig};
use crate::bitab::BiTabSpec;
use crate::bridge::BridgeOptions;
use crate::checkpoint::Container;
use crate::data::{self, SampleRecord, Split};
use crate::encoder::{self, TapSet, ViTConfig};
use crate::error::{Error, Result};
use crate::model::BanModel;
use crate::optim::OptimConfig;
use crate::synth;
use crate::train::{SampleSource, TrainSettings};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderSection {
    #[serde(flatten)]
    pub vit: ViTConfig,
    /// Frozen weights; absent means seeded random initialization.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init_seed: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TapsSection {
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct BridgingSection {
    #[serde(default)]
    pub zero_init: bool,
    #[serde(default)]
    pub cosine_affinity: bool,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SyntheticSection {
    pub count: usize,
    pub side: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DataSection {
    /// Dataset root with the t1/t2/label folder convention.
    #[serde(default)]
    pub root: Option<PathBuf>,
    /// Alternative: generate an in-memory synthetic dataset.
    #[serde(default)]
    pub synthetic: Option<SyntheticSection>,
    pub crop_size: usize,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
    #[serde(default = "default_true")]
    pub photometric: bool,
    #[serde(default)]
    pub photometric_params: Option<PhotometricConfig>,
    /// Train on a seeded subset of the training split.
    #[serde(default = "default_one")]
    pub label_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Seeded train/val/test fractions for datasets without manifests.
    #[serde(default)]
    pub ratio_split: Option<[f64; 3]>,
}

fn default_flip_prob() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ScheduleSection {
    pub max_iters: usize,
    #[serde(default = "default_power")]
    pub power: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default)]
    pub eval_interval: usize,
}

fn default_power() -> f64 {
    1.0
}

#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct ArisSection {
    /// Encoder input resolution; defaults to the pretraining resolution.
    #[serde(default)]
    pub target: Option<usize>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
    pub encoder: EncoderSection,
    #[serde(default)]
    pub taps: Option<TapsSection>,
    pub bitab: BiTabSpec,
    #[serde(default)]
    pub bridging: BridgingSection,
    pub data: DataSection,
    #[serde(default)]
    pub optim: OptimConfig,
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub aris: ArisSection,
}

fn default_seed() -> u64 {
    42
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.vit.validate()?;
        self.bitab.validate()?;
        self.optim.validate()?;
        if self.schedule.max_iters == 0 {
            return Err(Error::config("schedule.max_iters must be positive"));
        }
        if self.data.root.is_none() && self.data.synthetic.is_none() {
            return Err(Error::config(
                "data section needs either a root directory or a synthetic block",
            ));
        }
        Ok(())
    }

    pub fn aris_target(&self) -> usize {
        self.aris
            .target
            .unwrap_or(self.encoder.vit.pretrain_resolution)
    }

    /// Build the model: load or seed the frozen encoder, derive taps, and
    /// initialize all learnable parameters from the run seed.
    pub fn build_model(&self, seed_override: Option<u64>) -> Result<BanModel> {
        let seed = seed_override.unwrap_or(self.seed);
        let vit = self.encoder.vit.clone();
        let enc_params = match &self.encoder.checkpoint {
            Some(path) => {
                let container = Container::read(path)?;
                let (params, extras) = encoder::params_from_container(&vit, &container)?;
                for extra in extras {
                    eprintln!("warning: encoder checkpoint has unused key {extra}");
                }
                params
            }
            None => encoder::random_params(&vit, self.encoder.init_seed),
        };
        let taps = self
            .taps
            .as_ref()
            .map(|t| TapSet::new(t.indices.clone()));
        BanModel::build(
            vit,
            enc_params,
            taps,
            self.bitab.clone(),
            self.bridging.zero_init,
            BridgeOptions {
                cosine_affinity: self.bridging.cosine_affinity,
            },
            self.aris_target(),
            seed,
        )
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_size: self.data.crop_size,
            flip_prob: self.data.flip_prob,
            photometric: self
                .data
                .photometric
                .then(|| self.data.photometric_params.clone().unwrap_or_default()),
        }
    }

    pub fn train_settings(&self, seed_override: Option<u64>) -> TrainSettings {
        TrainSettings {
            optim: self.optim,
            max_iters: self.schedule.max_iters,
            power: self.schedule.power,
            min_lr: self.schedule.min_lr,
            eval_interval: self.schedule.eval_interval,
            seed: seed_override.unwrap_or(self.seed),
            augment: Some(self.augment_config()),
            work_dir: self.work_dir.clone(),
            log_every: 10,
        }
    }

    /// Materialize train/val/test sources. Synthetic data lands fully in
    /// memory with the validation and test sources aliasing the train set.
    pub fn load_sources(
        &self,
    ) -> Result<(SampleSource, Option<SampleSource>, Option<SampleSource>)> {
        if let Some(synth_cfg) = &self.data.synthetic {
            let samples = if self.bitab.head_kind == crate::bitab::HeadKind::Scd {
                synth::synthetic_scd_samples(
                    synth_cfg.count,
                    synth_cfg.side,
                    self.bitab.num_semantic_classes,
                    synth_cfg.seed,
                )
            } else {
                synth::synthetic_samples(synth_cfg.count, synth_cfg.side, synth_cfg.seed)
            };
            return Ok((
                SampleSource::Memory(samples.clone()),
                Some(SampleSource::Memory(samples.clone())),
                Some(SampleSource::Memory(samples)),
            ));
        }
        let root = self.data.root.as_ref().unwrap();
        let mut records = data::scan_dataset(root)?;
        data::apply_split_manifests(&mut records, root)?;
        if let Some([ft, fv, fe]) = self.data.ratio_split {
            data::ratio_split(&mut records, (ft, fv, fe), self.data.split_seed)?;
        }
        let by_split = |s: Split| -> Vec<SampleRecord> {
            records.iter().filter(|r| r.split == s).cloned().collect()
        };
        let mut train = by_split(Split::Train);
        if self.data.label_fraction < 1.0 {
            let (labeled, _withheld) =
                data::label_fraction_split(&train, self.data.label_fraction, self.data.split_seed)?;
            train = labeled;
        }
        let val = by_split(Split::Val);
        let test = by_split(Split::Test);
        Ok((
            SampleSource::Records(train),
            (!val.is_empty()).then_some(SampleSource::Records(val)),
            (!test.is_empty()).then_some(SampleSource::Records(test)),
        ))
    }
}
