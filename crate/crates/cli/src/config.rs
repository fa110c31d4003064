//! Run configuration: a TOML file with nested sections, every field
//! defaulted, unknown keys rejected. The effective configuration is echoed
//! into the output directory and embedded in checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use atlseg_core::adapter::{default_bottleneck_dim, make_variant, AtlConfig};
use atlseg_core::data::{DataSource, DatasetSpec};
use atlseg_core::decoder::DecoderConfig;
use atlseg_core::encoder::EncoderConfig;
use atlseg_core::train::TrainConfig;

use crate::commands::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub encoder: EncoderSection,
    pub adapter: AdapterSection,
    pub decoder: DecoderSection,
    pub train: TrainSection,
    pub dataset: DatasetSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/out"),
            encoder: EncoderSection::default(),
            adapter: AdapterSection::default(),
            decoder: DecoderSection::default(),
            train: TrainSection::default(),
            dataset: DatasetSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let c = EncoderConfig::toy();
        EncoderSection {
            image_size: c.image_size,
            patch_size: c.patch_size,
            embed_dim: c.embed_dim,
            num_blocks: c.num_blocks,
            num_heads: c.num_heads,
            mlp_ratio: c.mlp_ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterSection {
    /// An ablation-grid variant name, or "none" for a plain encoder-decoder.
    pub variant: String,
    /// Bottleneck width; 0 selects the default `embed_dim / 16`.
    pub bottleneck_dim: usize,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            variant: "TransLandSeg".into(),
            bottleneck_dim: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub upsample_stages: usize,
    pub head_hidden: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        let c = DecoderConfig::toy();
        DecoderSection {
            embed_dim: c.embed_dim,
            num_blocks: c.num_blocks,
            num_heads: c.num_heads,
            upsample_stages: c.upsample_stages,
            head_hidden: c.head_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seed: u64,
    pub loss_bce_weight: f64,
    pub loss_dice_weight: f64,
    pub dice_smooth: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            epochs: 30,
            batch_size: c.batch_size,
            lr0: c.lr0,
            weight_decay: c.weight_decay,
            beta1: c.beta1,
            beta2: c.beta2,
            eps_opt: c.eps_opt,
            seed: 7,
            loss_bce_weight: c.loss_bce_weight,
            loss_dice_weight: c.loss_dice_weight,
            dice_smooth: c.dice_smooth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// "synthetic" or "directory".
    pub source: String,
    /// Root of an `images/` + `masks/` tree when source = "directory".
    pub directory: Option<PathBuf>,
    /// Sample count for synthetic sources.
    pub count: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            directory: None,
            count: 64,
            train_fraction: 0.8,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn toy_preset() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs/toy"),
            ..RunConfig::default()
        }
    }

    /// ViT-L geometry; parameter accounting only — training it is refused.
    pub fn vitl_shape_preset() -> Self {
        let encoder = EncoderConfig::vitl_shape();
        let decoder = DecoderConfig::vitl_shape();
        RunConfig {
            output_dir: PathBuf::from("runs/vitl-shape"),
            encoder: EncoderSection {
                image_size: encoder.image_size,
                patch_size: encoder.patch_size,
                embed_dim: encoder.embed_dim,
                num_blocks: encoder.num_blocks,
                num_heads: encoder.num_heads,
                mlp_ratio: encoder.mlp_ratio,
            },
            adapter: AdapterSection {
                variant: "TransLandSeg".into(),
                bottleneck_dim: 64,
            },
            decoder: DecoderSection {
                embed_dim: decoder.embed_dim,
                num_blocks: decoder.num_blocks,
                num_heads: decoder.num_heads,
                upsample_stages: decoder.upsample_stages,
                head_hidden: decoder.head_hidden,
            },
            train: TrainSection {
                epochs: 50,
                ..TrainSection::default()
            },
            dataset: DatasetSection::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "toy" => Ok(Self::toy_preset()),
            "vitl-shape" => Ok(Self::vitl_shape_preset()),
            other => Err(CliError::Usage(format!(
                "unknown preset {other:?}; valid presets: toy, vitl-shape"
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config parse error in {}:\n{e}", path.display()))
        })
    }

    /// The effective-configuration echo, reparsable to an identical config.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            image_size: self.encoder.image_size,
            patch_size: self.encoder.patch_size,
            embed_dim: self.encoder.embed_dim,
            num_blocks: self.encoder.num_blocks,
            num_heads: self.encoder.num_heads,
            mlp_ratio: self.encoder.mlp_ratio,
        }
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            embed_dim: self.decoder.embed_dim,
            num_blocks: self.decoder.num_blocks,
            num_heads: self.decoder.num_heads,
            upsample_stages: self.decoder.upsample_stages,
            head_hidden: self.decoder.head_hidden,
        }
    }

    pub fn effective_bottleneck_dim(&self) -> usize {
        if self.adapter.bottleneck_dim == 0 {
            default_bottleneck_dim(self.encoder.embed_dim)
        } else {
            self.adapter.bottleneck_dim
        }
    }

    /// `None` when the adapter section selects "none".
    pub fn atl_config(&self) -> Result<Option<AtlConfig>, CliError> {
        if self.adapter.variant == "none" {
            return Ok(None);
        }
        let spec = make_variant(&self.adapter.variant)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Some(spec.atl_config(self.effective_bottleneck_dim())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr0: self.train.lr0,
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps_opt: self.train.eps_opt,
            seed: self.train.seed,
            loss_bce_weight: self.train.loss_bce_weight,
            loss_dice_weight: self.train.loss_dice_weight,
            dice_smooth: self.train.dice_smooth,
        }
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec, CliError> {
        let source = match self.dataset.source.as_str() {
            "synthetic" => DataSource::Synthetic,
            "directory" => {
                let dir = self.dataset.directory.clone().ok_or_else(|| {
                    CliError::Usage("dataset.source = \"directory\" requires dataset.directory".into())
                })?;
                if !dir.is_dir() {
                    return Err(CliError::Usage(format!(
                        "dataset directory {} does not exist",
                        dir.display()
                    )));
                }
                DataSource::Directory(dir)
            }
            other => {
                return Err(CliError::Usage(format!(
                    "dataset.source must be \"synthetic\" or \"directory\", got {other:?}"
                )))
            }
        };
        Ok(DatasetSpec {
            source,
            count: self.dataset.count,
            image_size: self.encoder.image_size,
            train_fraction: self.dataset.train_fraction,
            seed: self.dataset.seed,
        })
    }
}
