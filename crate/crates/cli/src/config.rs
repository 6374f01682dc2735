//! Experiment configuration: one JSON file fully determines a run.
//!
//! Every stochastic choice traces to a seed in this file, and all defaults
//! are materialized into the emitted manifest so result directories are
//! self-describing.

use serde::{Deserialize, Serialize};

use csi_pretrain::datagen::{preset_by_name, DatasetSpec, RNG_NAME};
use csi_pretrain::model::ModelConfig;
use csi_pretrain::scheduler::Strategy;
use csi_pretrain::tensor::{PatchSpec, ScaleSpec};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub rng: String,
    pub out_dir: String,
    pub patch: PatchConfig,
    pub datasets: Vec<DatasetConfig>,
    /// Datasets generated and evaluated but excluded from training
    /// (zero-shot scenarios).
    pub extra_datasets: Vec<DatasetConfig>,
    pub noise: NoiseConfig,
    pub schedule: ScheduleConfig,
    pub mask: MaskPolicyConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub conflict: ConflictSection,
    pub compare: CompareSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub time: usize,
    pub freq: usize,
    pub antenna: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { time: 2, freq: 2, antenna: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub id: u32,
    pub preset: String,
    pub scale: ScaleConfig,
    #[serde(default = "default_carrier_spacing")]
    pub carrier_spacing_hz: f64,
    #[serde(default = "default_time_step")]
    pub time_step_s: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleConfig {
    pub time_blocks: usize,
    pub subcarriers: usize,
    pub antenna_ports: usize,
}

fn default_carrier_spacing() -> f64 {
    15_000.0
}

fn default_time_step() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { snr_db: 20.0, seed: 7001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub strategy: String,
    pub buckets: usize,
    pub batch_size: usize,
    /// Diversity threshold as a fraction of ln(number of datasets).
    pub epsilon_fraction: f64,
    pub enforce_diversity: bool,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            strategy: "proposed".into(),
            buckets: 4,
            batch_size: 16,
            epsilon_fraction: 0.5,
            enforce_diversity: false,
            seed: 9001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicyConfig {
    /// Relative draw weights for the three mask families per batch.
    pub weight_random: f64,
    pub weight_time: f64,
    pub weight_frequency: f64,
    pub random_ratio: f64,
    /// Fraction of each sample's time patches kept visible by time masks.
    pub time_visible_fraction: f64,
    pub freq_visible_fraction: f64,
    pub seed: u64,
}

impl Default for MaskPolicyConfig {
    fn default() -> Self {
        MaskPolicyConfig {
            weight_random: 1.0,
            weight_time: 1.0,
            weight_frequency: 1.0,
            random_ratio: 0.5,
            time_visible_fraction: 0.5,
            freq_visible_fraction: 0.5,
            seed: 11001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    pub max_time_patches: usize,
    pub max_freq_patches: usize,
    pub max_antenna_patches: usize,
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 32,
            heads: 2,
            encoder_depth: 2,
            decoder_depth: 1,
            mlp_ratio: 2,
            max_time_patches: 16,
            max_freq_patches: 16,
            max_antenna_patches: 8,
            init_seed: 13001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_steps: u64,
    pub learning_rate: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            total_steps: 2000,
            learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Task names: any of "reconstruction", "time", "frequency".
    pub tasks: Vec<String>,
    pub recon_ratio: f64,
    pub recon_seed: u64,
    pub time_visible_fraction: f64,
    pub freq_visible_fraction: f64,
    /// Which split to evaluate: "train", "val", or "test".
    pub split: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: vec!["reconstruction".into(), "time".into(), "frequency".into()],
            recon_ratio: 0.5,
            recon_seed: 15001,
            time_visible_fraction: 0.5,
            freq_visible_fraction: 0.5,
            split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConflictSection {
    /// Steps of proposed-strategy pretraining before gradients are measured.
    pub snapshot_steps: u64,
    pub n_pairs: usize,
    pub mask_ratio: f64,
    /// Measure gradients with the padding attention mask active. Defaults to
    /// false: the study reproduces the naive padded pipeline whose gradient
    /// conflicts motivate scale-aware batching.
    pub isolate_padding: bool,
    pub seeds: Vec<u64>,
}

impl Default for ConflictSection {
    fn default() -> Self {
        ConflictSection {
            // Early snapshot: a few steps past init. Well into training the
            // per-scale gradients specialize and the contrast inverts, so
            // the study defaults to the regime the motivation describes.
            snapshot_steps: 10,
            n_pairs: 150,
            mask_ratio: 0.5,
            isolate_padding: false,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub strategies: Vec<String>,
    /// Training budget per strategy when the study trains models; 0 skips
    /// training and reports padding/cost only.
    pub steps: u64,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection {
            strategies: vec![
                "proposed".into(),
                "sequential".into(),
                "alternating".into(),
                "global".into(),
            ],
            steps: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub buckets: Vec<usize>,
    /// Training budget per bucket count; 0 skips training.
    pub steps: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            buckets: vec![1, 2, 4, 8, 16],
            steps: 400,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Four scenario presets at two scales each: eight training datasets.
        let mut datasets = Vec::new();
        let scales = [
            ScaleConfig { time_blocks: 8, subcarriers: 8, antenna_ports: 2 },
            ScaleConfig { time_blocks: 16, subcarriers: 16, antenna_ports: 2 },
        ];
        let mut id = 0u32;
        for preset in ["indoor", "umi", "uma", "rma"] {
            for scale in scales {
                datasets.push(DatasetConfig {
                    id,
                    preset: preset.into(),
                    scale,
                    carrier_spacing_hz: default_carrier_spacing(),
                    time_step_s: default_time_step(),
                    n_samples: 512,
                    seed: 101 + id as u64,
                });
                id += 1;
            }
        }
        ExperimentConfig {
            version: 1,
            rng: RNG_NAME.into(),
            out_dir: "runs/default".into(),
            patch: PatchConfig::default(),
            datasets,
            extra_datasets: Vec::new(),
            noise: NoiseConfig::default(),
            schedule: ScheduleConfig::default(),
            mask: MaskPolicyConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            conflict: ConflictSection::default(),
            compare: CompareSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        serde_json::from_str(s).map_err(|e| CliError::Config(format!("config parse: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn patch_spec(&self) -> Result<PatchSpec, CliError> {
        PatchSpec::new(self.patch.time, self.patch.freq, self.patch.antenna)
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn strategy(&self) -> Result<Strategy, CliError> {
        self.schedule.strategy.parse().map_err(CliError::Config)
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let patch = self.patch_spec()?;
        let cfg = ModelConfig {
            token_dim: patch.token_dim(),
            embed_dim: self.model.embed_dim,
            heads: self.model.heads,
            encoder_depth: self.model.encoder_depth,
            decoder_depth: self.model.decoder_depth,
            mlp_ratio: self.model.mlp_ratio,
            max_time_patches: self.model.max_time_patches,
            max_freq_patches: self.model.max_freq_patches,
            max_antenna_patches: self.model.max_antenna_patches,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    fn dataset_spec(&self, d: &DatasetConfig) -> Result<DatasetSpec, CliError> {
        let scenario = preset_by_name(&d.preset).map_err(|e| CliError::Config(e.to_string()))?;
        let scale = ScaleSpec::new(d.scale.time_blocks, d.scale.subcarriers, d.scale.antenna_ports)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let spec = DatasetSpec {
            dataset_id: d.id,
            scenario,
            scale,
            carrier_spacing_hz: d.carrier_spacing_hz,
            time_step_s: d.time_step_s,
            n_samples: d.n_samples,
            seed: d.seed,
        };
        spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Training dataset specs, in config order.
    pub fn train_dataset_specs(&self) -> Result<Vec<DatasetSpec>, CliError> {
        self.datasets.iter().map(|d| self.dataset_spec(d)).collect()
    }

    /// All dataset specs (training plus zero-shot extras).
    pub fn all_dataset_specs(&self) -> Result<Vec<DatasetSpec>, CliError> {
        self.datasets
            .iter()
            .chain(self.extra_datasets.iter())
            .map(|d| self.dataset_spec(d))
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.rng != RNG_NAME {
            return Err(CliError::Config(format!(
                "unsupported rng '{}', this build implements '{RNG_NAME}'",
                self.rng
            )));
        }
        if self.datasets.is_empty() {
            return Err(CliError::Config("no datasets configured".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for d in self.datasets.iter().chain(self.extra_datasets.iter()) {
            if !ids.insert(d.id) {
                return Err(CliError::Config(format!("duplicate dataset id {}", d.id)));
            }
        }
        if self.schedule.batch_size == 0 {
            return Err(CliError::Config("batch_size must be >= 1".into()));
        }
        if self.schedule.buckets == 0 {
            return Err(CliError::Config("buckets must be >= 1".into()));
        }
        if !(self.mask.random_ratio > 0.0 && self.mask.random_ratio < 1.0) {
            return Err(CliError::Config("mask.random_ratio must lie in (0, 1)".into()));
        }
        let weight_sum = self.mask.weight_random + self.mask.weight_time + self.mask.weight_frequency;
        if !weight_sum.is_finite()
            || weight_sum <= 0.0
            || self.mask.weight_random < 0.0
            || self.mask.weight_time < 0.0
            || self.mask.weight_frequency < 0.0
        {
            return Err(CliError::Config("mask weights must be nonnegative with a positive sum".into()));
        }
        for t in &self.eval.tasks {
            if !matches!(t.as_str(), "reconstruction" | "time" | "frequency") {
                return Err(CliError::Config(format!("unknown eval task '{t}'")));
            }
        }
        if !matches!(self.eval.split.as_str(), "train" | "val" | "test") {
            return Err(CliError::Config(format!("unknown split '{}'", self.eval.split)));
        }
        self.strategy()?;
        self.model_config()?;
        self.train_dataset_specs()?;
        self.all_dataset_specs()?;
        // Every dataset's patch grid must fit the positional tables.
        let patch = self.patch_spec()?;
        let cfg = self.model_config()?;
        for spec in self.all_dataset_specs()? {
            let grid = spec.scale.grid(&patch);
            if grid.time > cfg.max_time_patches
                || grid.freq > cfg.max_freq_patches
                || grid.antenna > cfg.max_antenna_patches
            {
                return Err(CliError::Config(format!(
                    "dataset {} grid {:?} exceeds model positional maxima",
                    spec.dataset_id, grid
                )));
            }
        }
        Ok(())
    }

    /// Re-derives the run-affecting seeds from one master seed. Dataset
    /// seeds are left alone so the data identity is preserved.
    pub fn override_seed(&mut self, master: u64) {
        use csi_pretrain::rng::derive_stream;
        self.schedule.seed = derive_stream(&[master, 1]);
        self.mask.seed = derive_stream(&[master, 2]);
        self.model.init_seed = derive_stream(&[master, 3]);
        self.eval.recon_seed = derive_stream(&[master, 4]);
    }
}

/// Train/val/test index ranges for a dataset of `n` samples (3/4, 1/8, rest).
pub fn split_ranges(n: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>) {
    let train_end = n * 3 / 4;
    let val_end = train_end + n / 8;
    (0..train_end, train_end..val_end, val_end..n)
}
