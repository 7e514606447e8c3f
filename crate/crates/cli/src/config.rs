use std::path::{Path, PathBuf};

use auxmtl::data::Manifest;
use auxmtl::layers::AggOp;
use auxmtl::mtl_net::{ModelConfig, TaskKind, TaskSpec, Variant};
use auxmtl::search::SearchConfig;
use auxmtl::train::TrainConfig;
use auxmtl::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory written by `gen-data`.
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: "data".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub variant: Variant,
    /// A segmentation task with `classes: 0` takes the class count of the dataset.
    pub tasks: Vec<TaskSpec>,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub decoder_channels: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(Variant::Baseline, Vec::new(), (0, 0));
        Self {
            variant: Variant::Baseline,
            tasks: vec![TaskSpec::segmentation(0), TaskSpec::depth()],
            stem_channels: m.stem_channels,
            stage_channels: m.stage_channels,
            decoder_channels: m.decoder_channels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxMode {
    None,
    Basic,
    Genotype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxSection {
    /// Strategy used by `train` when `--strategy` is omitted: `joint`,
    /// `auxi-both` or `auxi-nas`.
    pub mode: AuxMode,
    pub agg: AggOp,
    pub genotype_path: Option<PathBuf>,
}

impl Default for AuxSection {
    fn default() -> Self {
        Self {
            mode: AuxMode::Basic,
            agg: AggOp::Concat,
            genotype_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub aux: AuxSection,
    pub search: SearchConfig,
    pub output_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            aux: AuxSection::default(),
            search: SearchConfig::default(),
            output_dir: "out".into(),
        }
    }
}

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills dataset-dependent fields (class count) from the manifest.
    pub fn resolve(&mut self, manifest: &Manifest) {
        for t in &mut self.model.tasks {
            if t.kind == TaskKind::Segmentation && t.classes == 0 {
                t.classes = manifest.k;
            }
        }
    }

    pub fn model_config(&self, manifest: &Manifest) -> ModelConfig {
        let mut m = ModelConfig::new(
            self.model.variant,
            self.model.tasks.clone(),
            (manifest.h, manifest.w),
        );
        m.stem_channels = self.model.stem_channels;
        m.stage_channels = self.model.stage_channels.clone();
        m.decoder_channels = self.model.decoder_channels;
        m
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved.json");
        let json = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))
    }
}
