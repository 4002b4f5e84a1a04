//! Run configuration: a sectioned `key = value` file that covers every knob of
//! a run, with cross-field validation and a stable content hash.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{AugmentPolicy, ImageShape};
use crate::dos::{OptimizeConfig, OptimizerKind, Schedule, Selection, SignalSpec};
use crate::error::{ensure, Error, Result};
use crate::eval::{AblationConfig, ClassifierConfig, ToyTaskSpec};
use crate::extractor::ExtractorSpec;
use crate::privacy::{split_budget, BudgetFraction, ClipConfig, PrivacyBudget};

/// Lowercase hex SHA-256.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DPDISTILL_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Empty means `$DPDISTILL_OUTPUT_ROOT`, else `dpdistill-out`.
    pub output_dir: String,
    /// Worker threads; 0 means available parallelism.
    pub workers: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: String::new(),
            workers: 0,
        }
    }
}

/// Private data: the seeded toy task, or image tensors on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// `toy` or `files`.
    pub source: String,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: "toy".into(),
            train_images: String::new(),
            train_labels: String::new(),
            test_images: String::new(),
            test_labels: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub components_per_class: usize,
    pub blobs_per_component: usize,
    pub pixel_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ToySection {
    fn default() -> Self {
        let t = ToyTaskSpec::default();
        Self {
            num_classes: t.num_classes,
            channels: t.shape.0,
            height: t.shape.1,
            width: t.shape.2,
            components_per_class: t.components_per_class,
            blobs_per_component: t.blobs_per_component,
            pixel_std: t.pixel_std,
            // Large enough that the calibrated noise at epsilon = 1 leaves signal to distill.
            train_per_class: 2000,
            test_per_class: t.test_per_class,
            seed: t.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorSection {
    pub layers: String,
    pub init_scale: f64,
    pub augment: String,
}

impl Default for ExtractorSection {
    fn default() -> Self {
        Self {
            layers: ExtractorSpec::desk_default(1).layers_string(),
            init_scale: 1.0,
            augment: "crop:1.5,brightness:0.8:1.2,cutout:4".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub delta: f64,
    /// Share of the budget spent on generating the auxiliary data; 0 when
    /// the auxiliary data is public.
    pub aux_fraction: f64,
    pub clip_bound: f64,
    pub group_size: usize,
}

impl Default for PrivacySection {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-5,
            aux_fraction: 0.0,
            clip_bound: 1.0,
            group_size: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    pub iterations: usize,
    /// 0 disables the subspace projection.
    pub subspace_dim: usize,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self {
            iterations: 200,
            subspace_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxSection {
    /// `generator` (perturbed toy mixture) or `files`.
    pub source: String,
    pub images: String,
    pub labels: String,
    pub per_class: usize,
    pub shift: f64,
    pub amp_jitter: f64,
}

impl Default for AuxSection {
    fn default() -> Self {
        Self {
            source: "generator".into(),
            images: String::new(),
            labels: String::new(),
            per_class: 48,
            shift: 1.0,
            amp_jitter: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    pub images_per_class: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// `cosine` or `constant`.
    pub schedule: String,
    /// `adaptive` or `sgd`.
    pub optimizer: String,
    /// `uniform`, `epochs` or `in-order`.
    pub selection: String,
    pub init_std: f64,
    pub beta: f64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let o = OptimizeConfig::default();
        Self {
            images_per_class: o.images_per_class,
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            schedule: "cosine".into(),
            optimizer: "adaptive".into(),
            selection: "uniform".into(),
            init_std: o.init_std,
            beta: o.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub layers: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub augment: String,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        let c = ClassifierConfig::default();
        Self {
            layers: c.layers,
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            augment: c.augment.to_spec_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
        }
    }
}

/// Settings of the Monte-Carlo check over random signal models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    pub models: usize,
    pub max_dim: usize,
    pub max_subspace_dim: usize,
    pub group_size: usize,
    pub trials: usize,
    pub support: usize,
    pub tolerance_se: f64,
    pub seed: u64,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self {
            models: 20,
            max_dim: 128,
            max_subspace_dim: 32,
            group_size: 100,
            trials: 100_000,
            support: 2000,
            tolerance_se: 3.0,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub dim: usize,
    pub group_size: usize,
    pub dims: Vec<usize>,
    pub noise_multipliers: Vec<f64>,
    /// Monte-Carlo trials per cell; 0 reports the closed form only.
    pub trials: usize,
    pub support: usize,
    pub model_seed: u64,
    pub seed: u64,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            dim: 128,
            group_size: 100,
            dims: vec![2, 4, 8, 16, 24, 32, 48, 64, 96, 128],
            noise_multipliers: vec![0.5, 2.0, 6.0, 20.0, 60.0],
            trials: 2000,
            support: 10_000,
            model_seed: 7,
            seed: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub toy: ToySection,
    pub extractor: ExtractorSection,
    pub privacy: PrivacySection,
    pub sample: SampleSection,
    pub aux: AuxSection,
    pub optimize: OptimizeSection,
    pub classifier: ClassifierSection,
    pub ablation: AblationSection,
    pub theorem: TheoremSection,
    pub sweep: SweepSection,
}

fn parse_schedule(s: &str) -> Result<Schedule> {
    match s {
        "cosine" => Ok(Schedule::Cosine),
        "constant" => Ok(Schedule::Constant),
        _ => Err(Error::Validation(format!("unknown schedule {s:?} (cosine | constant)"))),
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind> {
    match s {
        "adaptive" => Ok(OptimizerKind::Adaptive),
        "sgd" => Ok(OptimizerKind::Sgd),
        _ => Err(Error::Validation(format!("unknown optimizer {s:?} (adaptive | sgd)"))),
    }
}

fn parse_selection(s: &str) -> Result<Selection> {
    match s {
        "uniform" => Ok(Selection::Uniform),
        "epochs" => Ok(Selection::ShuffledEpochs),
        "in-order" => Ok(Selection::InOrder),
        _ => Err(Error::Validation(format!(
            "unknown selection {s:?} (uniform | epochs | in-order)"
        ))),
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, so formatting and key order
    /// in the source file do not matter.
    pub fn hash(&self) -> String {
        digest_hex(self.to_toml().as_bytes())
    }

    /// Hash of only the settings a signal store depends on. Stores are
    /// stamped with it, so optimization settings can change between runs
    /// while a store from different sampling settings is refused.
    pub fn sampling_hash(&self) -> String {
        #[derive(Serialize)]
        struct Sampling<'a> {
            seed: u64,
            data: &'a DataSection,
            toy: &'a ToySection,
            extractor: &'a ExtractorSection,
            privacy: &'a PrivacySection,
            sample: &'a SampleSection,
            aux: &'a AuxSection,
        }
        let view = Sampling {
            seed: self.run.seed,
            data: &self.data,
            toy: &self.toy,
            extractor: &self.extractor,
            privacy: &self.privacy,
            sample: &self.sample,
            aux: &self.aux,
        };
        digest_hex(toml::to_string(&view).expect("config serializes").as_bytes())
    }

    pub fn output_dir(&self) -> PathBuf {
        if !self.run.output_dir.is_empty() {
            return PathBuf::from(&self.run.output_dir);
        }
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("dpdistill-out"))
    }

    pub fn workers(&self) -> usize {
        if self.run.workers > 0 {
            self.run.workers
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    pub fn is_toy(&self) -> bool {
        self.data.source == "toy"
    }

    pub fn toy_spec(&self) -> ToyTaskSpec {
        let t = &self.toy;
        ToyTaskSpec {
            num_classes: t.num_classes,
            shape: self.toy_shape(),
            components_per_class: t.components_per_class,
            blobs_per_component: t.blobs_per_component,
            pixel_std: t.pixel_std,
            train_per_class: t.train_per_class,
            test_per_class: t.test_per_class,
            seed: t.seed,
        }
    }

    pub fn toy_shape(&self) -> ImageShape {
        (self.toy.channels, self.toy.height, self.toy.width)
    }

    /// Signal map for the toy shape.
    pub fn signal_spec(&self) -> Result<SignalSpec> {
        self.signal_spec_for(self.toy_shape())
    }

    pub fn signal_spec_for(&self, shape: ImageShape) -> Result<SignalSpec> {
        let layers = ExtractorSpec::parse_layers(&self.extractor.layers)?;
        let spec = SignalSpec {
            extractor: ExtractorSpec::from_layers(shape, layers)?,
            init_scale: self.extractor.init_scale,
            augment: AugmentPolicy::parse(&self.extractor.augment)?,
            clip: ClipConfig::new(self.privacy.clip_bound)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn total_budget(&self) -> Result<PrivacyBudget> {
        PrivacyBudget::new(self.privacy.epsilon, self.privacy.delta)
    }

    /// The part of the budget spent by the sampling stage.
    pub fn sampling_budget(&self) -> Result<PrivacyBudget> {
        let total = self.total_budget()?;
        if self.privacy.aux_fraction == 0.0 {
            return Ok(total);
        }
        let (_, rest) = split_budget(total, BudgetFraction::from_f64(self.privacy.aux_fraction)?)?;
        Ok(rest)
    }

    /// The auxiliary data's share, when it is charged to the budget at all.
    pub fn aux_budget(&self) -> Result<Option<PrivacyBudget>> {
        if self.privacy.aux_fraction == 0.0 {
            return Ok(None);
        }
        let (aux, _) = split_budget(self.total_budget()?, BudgetFraction::from_f64(self.privacy.aux_fraction)?)?;
        Ok(Some(aux))
    }

    pub fn subspace_dim(&self) -> Option<usize> {
        (self.sample.subspace_dim > 0).then_some(self.sample.subspace_dim)
    }

    pub fn optimize_config(&self) -> Result<OptimizeConfig> {
        let o = &self.optimize;
        let cfg = OptimizeConfig {
            images_per_class: o.images_per_class,
            iterations: o.iterations,
            learning_rate: o.learning_rate,
            schedule: parse_schedule(&o.schedule)?,
            optimizer: parse_optimizer(&o.optimizer)?,
            selection: parse_selection(&o.selection)?,
            init_std: o.init_std,
            beta: o.beta,
            seed: self.run.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn classifier_config(&self) -> Result<ClassifierConfig> {
        let c = &self.classifier;
        Ok(ClassifierConfig {
            layers: c.layers.clone(),
            steps: c.steps,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            augment: AugmentPolicy::parse(&c.augment)?,
            seed: self.run.seed,
        })
    }

    pub fn ablation_config(&self) -> Result<AblationConfig> {
        ensure!(self.is_toy(), "the ablation runs on the toy task only");
        ensure!(
            self.aux.source == "generator",
            "the ablation draws its auxiliary data from the generator"
        );
        Ok(AblationConfig {
            task: self.toy_spec(),
            signal: self.signal_spec()?,
            budget: self.sampling_budget()?,
            group_size: self.privacy.group_size,
            sample_iterations: self.sample.iterations,
            optimize: self.optimize_config()?,
            subspace_dim: self.sample.subspace_dim,
            aux_per_class: self.aux.per_class,
            aux_shift: self.aux.shift,
            aux_amp_jitter: self.aux.amp_jitter,
            classifier: self.classifier_config()?,
            seeds: self.ablation.seeds.clone(),
        })
    }

    /// Checks every cross-field rule without touching data.
    pub fn validate(&self) -> Result<()> {
        ensure!(
            matches!(self.data.source.as_str(), "toy" | "files"),
            "data.source must be toy or files, got {:?}",
            self.data.source
        );
        if self.data.source == "files" {
            ensure!(
                !self.data.train_images.is_empty() && !self.data.train_labels.is_empty(),
                "data.source = files needs train_images and train_labels"
            );
        }
        ensure!(
            matches!(self.aux.source.as_str(), "generator" | "files"),
            "aux.source must be generator or files, got {:?}",
            self.aux.source
        );
        if self.aux.source == "files" {
            ensure!(
                !self.aux.images.is_empty() && !self.aux.labels.is_empty(),
                "aux.source = files needs images and labels"
            );
        } else if self.subspace_dim().is_some() {
            ensure!(self.is_toy(), "the auxiliary generator perturbs the toy task; use aux.source = files");
            ensure!(self.aux.per_class >= 2, "aux.per_class must be at least 2");
        }
        let t = &self.toy;
        ensure!(
            t.num_classes >= 2 && t.train_per_class >= 1 && t.test_per_class >= 1,
            "toy task needs >= 2 classes and nonempty splits"
        );
        // File data fixes its shape at load time; the toy shape still
        // catches malformed layer strings early.
        let spec = self.signal_spec()?;
        self.total_budget()?;
        let f = self.privacy.aux_fraction;
        ensure!(
            f == 0.0 || (f > 0.0 && f < 1.0),
            "privacy.aux_fraction must be 0 or lie in (0, 1), got {f}"
        );
        self.sampling_budget()?;
        ensure!(self.privacy.group_size >= 1, "privacy.group_size must be >= 1");
        ensure!(self.sample.iterations >= 1, "sample.iterations must be >= 1");
        if let (Some(d), true) = (self.subspace_dim(), self.is_toy()) {
            ensure!(
                d <= spec.feature_dim(),
                "subspace_dim {d} exceeds the feature dimension {}",
                spec.feature_dim()
            );
            if self.aux.source == "generator" {
                ensure!(
                    d <= self.aux.per_class,
                    "subspace_dim {d} exceeds aux.per_class {}",
                    self.aux.per_class
                );
            }
        }
        if self.is_toy() && self.privacy.group_size > t.train_per_class {
            warn!(
                "group size {} exceeds the {} train images per class; the sampling rate is capped at 1",
                self.privacy.group_size, t.train_per_class
            );
        }
        ensure!(
            self.aux.shift >= 0.0 && (0.0..1.0).contains(&self.aux.amp_jitter),
            "aux.shift must be >= 0 and aux.amp_jitter in [0, 1)"
        );
        self.optimize_config()?;
        let c = self.classifier_config()?;
        ensure!(c.steps >= 1 && c.batch_size >= 1, "classifier needs steps and batch size >= 1");
        ensure!(!self.ablation.seeds.is_empty(), "ablation.seeds must not be empty");
        let th = &self.theorem;
        ensure!(
            th.models >= 1 && th.max_dim >= 2 && th.max_subspace_dim >= 1 && th.max_subspace_dim < th.max_dim,
            "theorem: need models >= 1 and 1 <= max_subspace_dim < max_dim"
        );
        ensure!(th.group_size >= 1 && th.tolerance_se > 0.0, "theorem: group size and tolerance must be positive");
        let sw = &self.sweep;
        ensure!(
            sw.dims.iter().all(|&d| d >= 1 && d <= sw.dim),
            "sweep dims must lie in 1..={}",
            sw.dim
        );
        Ok(())
    }
}
