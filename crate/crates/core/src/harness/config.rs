//! Flat TOML run configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown
//! keys are rejected.
//!
//! ```toml
//! seed = 7
//! image_size = [64, 64]
//! c_channels = [8, 8, 8, 8]
//! width = 16
//! alphas = [0.1, 0.2, 0.3]
//! lambda = 0.25
//! cs_mode = "all_level"      # none | single_level | all_level
//! rfa = true
//! rfa_pooling = "ratio_invariant_avg"  # global_avg | global_max | fixed_psp
//! rfa_fusion = "asf"         # asf | sum
//! srs_mode = "asf"           # heuristic_single_level | sum | max | acf | asf
//! max_grad_norm = 35.0       # 0 disables clipping
//! precision = 32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pyramid::{AsfNormalizer, FusionKind, NeckConfig, PoolingKind, RfaConfig};
use crate::roi::{RoiFusionConfig, RoiFusionMode};
use crate::supervision::{HeadConfig, SupervisionConfig, SupervisionMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Image `(height, width)` in pixels.
    pub image_size: [usize; 2],
    /// Channels of the synthetic `C2..C5` maps.
    pub c_channels: [usize; 4],
    /// Pyramid channel width.
    pub width: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
    pub class_agnostic: bool,
    pub alphas: Vec<f64>,
    pub lambda: f64,
    pub beta: f64,
    pub cs_mode: SupervisionMode,
    pub rfa: bool,
    pub rfa_pooling: PoolingKind,
    pub rfa_fusion: FusionKind,
    pub rfa_normalizer: AsfNormalizer,
    pub srs_mode: RoiFusionMode,
    pub roi_output: usize,
    pub sampling_ratio: usize,
    pub acf_reduction: usize,
    pub canonical_level: usize,
    /// Box side mapped to `canonical_level`.
    pub canonical_size: f64,
    pub scenes: usize,
    pub max_objects: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global gradient-norm clip applied before each SGD step; 0 disables it.
    pub max_grad_norm: f64,
    pub steps: usize,
    /// Floating-point width for training: 32 or 64.
    pub precision: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: [64, 64],
            c_channels: [8, 8, 8, 8],
            width: 16,
            head_hidden: 64,
            num_classes: 2,
            class_agnostic: true,
            alphas: vec![0.1, 0.2, 0.3],
            lambda: 0.25,
            beta: 1.0,
            cs_mode: SupervisionMode::AllLevel,
            rfa: true,
            rfa_pooling: PoolingKind::RatioInvariantAvg,
            rfa_fusion: FusionKind::Asf,
            rfa_normalizer: AsfNormalizer::Softmax,
            srs_mode: RoiFusionMode::Asf,
            roi_output: 7,
            sampling_ratio: 2,
            acf_reduction: 4,
            canonical_level: 4,
            canonical_size: 16.0,
            scenes: 200,
            max_objects: 3,
            batch_size: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            max_grad_norm: 35.0,
            steps: 2000,
            precision: 32,
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.image_size;
        check((32..=4096).contains(&h) && (32..=4096).contains(&w), || {
            format!("image_size {:?} outside 32..=4096", self.image_size)
        })?;
        check(self.c_channels.iter().all(|c| (1..=4096).contains(c)), || {
            format!("c_channels {:?} outside 1..=4096", self.c_channels)
        })?;
        check((1..=4096).contains(&self.width), || format!("width {} outside 1..=4096", self.width))?;
        check((1..=65536).contains(&self.head_hidden), || {
            format!("head_hidden {} outside 1..=65536", self.head_hidden)
        })?;
        check((1..=1000).contains(&self.num_classes), || {
            format!("num_classes {} outside 1..=1000", self.num_classes)
        })?;
        check((0.0..=10.0).contains(&self.lambda), || format!("lambda {} outside [0, 10]", self.lambda))?;
        check((0.0..=10.0).contains(&self.beta), || format!("beta {} outside [0, 10]", self.beta))?;
        check((1..=64).contains(&self.roi_output), || {
            format!("roi_output {} outside 1..=64", self.roi_output)
        })?;
        check((1..=16).contains(&self.sampling_ratio), || {
            format!("sampling_ratio {} outside 1..=16", self.sampling_ratio)
        })?;
        check((1..=256).contains(&self.acf_reduction), || {
            format!("acf_reduction {} outside 1..=256", self.acf_reduction)
        })?;
        check((2..=5).contains(&self.canonical_level), || {
            format!("canonical_level {} outside 2..=5", self.canonical_level)
        })?;
        check(self.canonical_size > 0.0 && self.canonical_size <= 4096.0, || {
            format!("canonical_size {} outside (0, 4096]", self.canonical_size)
        })?;
        check((1..=100_000).contains(&self.scenes), || format!("scenes {} outside 1..=100000", self.scenes))?;
        check((1..=64).contains(&self.max_objects), || {
            format!("max_objects {} outside 1..=64", self.max_objects)
        })?;
        check((1..=self.scenes).contains(&self.batch_size), || {
            format!("batch_size {} outside 1..=scenes ({})", self.batch_size, self.scenes)
        })?;
        check(self.learning_rate > 0.0 && self.learning_rate <= 10.0, || {
            format!("learning_rate {} outside (0, 10]", self.learning_rate)
        })?;
        check((0.0..1.0).contains(&self.momentum), || format!("momentum {} outside [0, 1)", self.momentum))?;
        check(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite(), || {
            format!("max_grad_norm {} must be finite and non-negative", self.max_grad_norm)
        })?;
        check((1..=10_000_000).contains(&self.steps), || format!("steps {} outside 1..=10000000", self.steps))?;
        check(matches!(self.precision, 32 | 64), || format!("precision {} is not 32 or 64", self.precision))?;
        self.model()?.validate()
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let rfa = self.rfa.then(|| RfaConfig {
            alphas: self.alphas.clone(),
            pooling: self.rfa_pooling,
            fusion: self.rfa_fusion,
            normalizer: self.rfa_normalizer,
            ..RfaConfig::default()
        });
        let roi = RoiFusionConfig {
            mode: self.srs_mode,
            output_size: (self.roi_output, self.roi_output),
            sampling_ratio: self.sampling_ratio,
            acf_reduction: self.acf_reduction,
            canonical_level: self.canonical_level,
            canonical_size: self.canonical_size,
        };
        let mut head = HeadConfig::new(self.width, roi.output_size, self.head_hidden, self.num_classes);
        head.class_agnostic = self.class_agnostic;
        let cfg = ModelConfig {
            neck: NeckConfig {
                in_channels: self.c_channels,
                width: self.width,
                rfa,
            },
            roi,
            head,
            supervision: SupervisionConfig {
                mode: self.cs_mode,
                lambda: self.lambda,
                beta: self.beta,
            },
        };
        Ok(cfg)
    }

    /// The plain FPN configuration: no residual branch, heuristic RoI
    /// level selection, no auxiliary supervision.
    pub fn baseline(&self) -> Self {
        Self {
            rfa: false,
            srs_mode: RoiFusionMode::HeuristicSingleLevel,
            cs_mode: SupervisionMode::None,
            ..self.clone()
        }
    }
}
