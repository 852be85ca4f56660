//! Flat `key = value` run configuration with `#` comments.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use tofe_core::flops::baseline_block_flops;
use tofe_core::tofe::StagePlan;
use tofe_core::train::{BackboneTrainConfig, LossWeights, TrainConfig};
use tofe_core::ModelConfig;

use crate::dataset::DatasetSpec;
use crate::error::{HarnessError, Result};
use crate::fsutil::read;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// 1-based first block of each stage; `None` derives it from the depth.
    pub stages: Option<Vec<usize>>,
    pub data: DatasetSpec,
    pub backbone: BackboneTrainConfig,
    pub tofe: TrainConfig,
    pub weights: LossWeights,
    /// Budget as a fraction of the backbone's block FLOPs, used when
    /// `target_gflops` is unset.
    pub target_ratio: f64,
    pub target_gflops: Option<f64>,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            data: DatasetSpec {
                image_size: model.image_size,
                num_classes: model.num_classes,
                ..DatasetSpec::default()
            },
            model,
            stages: None,
            backbone: BackboneTrainConfig::default(),
            tofe: TrainConfig::default(),
            weights: LossWeights::default(),
            target_ratio: 0.5,
            target_gflops: None,
            eval_batch_size: 64,
            seed: 0,
        }
    }
}

macro_rules! fields {
    ($mac:ident) => {
        $mac! {
            image_size: model.image_size,
            patch_size: model.patch_size,
            channels: model.channels,
            depth: model.depth,
            dim: model.dim,
            heads: model.heads,
            mlp_hidden: model.mlp_hidden,
            num_classes: model.num_classes,
            num_train: data.num_train,
            num_eval: data.num_eval,
            noise: data.noise,
            distractors: data.distractors,
            data_seed: data.seed,
            backbone_epochs: backbone.epochs,
            backbone_batch_size: backbone.batch_size,
            backbone_lr_start: backbone.lr_start,
            backbone_lr_end: backbone.lr_end,
            backbone_warmup_steps: backbone.warmup_steps,
            backbone_weight_decay: backbone.weight_decay,
            epochs: tofe.epochs,
            warmup_epochs: tofe.warmup_epochs,
            batch_size: tofe.batch_size,
            lr_start: tofe.lr_start,
            lr_end: tofe.lr_end,
            weight_decay: tofe.weight_decay,
            temperature: tofe.temperature,
            keep_bias: tofe.keep_bias,
            ema_decay: tofe.ema_decay,
            lambda_cls: weights.cls,
            lambda_apr: weights.apr,
            lambda_flops: weights.flops,
            target_ratio: target_ratio,
            eval_batch_size: eval_batch_size,
            seed: seed,
        }
    };
}

macro_rules! print_fields {
    ($($key:ident: $($path:ident).+,)*) => {
        fn print_into(c: &RunConfig, out: &mut String) {
            $( out.push_str(&format!("{} = {}\n", stringify!($key), c.$($path).+)); )*
        }
    };
}

macro_rules! set_field {
    ($($key:ident: $($path:ident).+,)*) => {
        fn set_into(c: &mut RunConfig, key: &str, value: &str) -> std::result::Result<bool, String> {
            match key {
                $( stringify!($key) => {
                    c.$($path).+ = value.parse().map_err(|e| format!("{value:?}: {e}"))?;
                    Ok(true)
                } )*
                _ => Ok(false),
            }
        }
    };
}

fields!(print_fields);
fields!(set_field);

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        print_into(self, &mut out);
        if let Some(s) = &self.stages {
            let list: Vec<String> = s.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("stages = {}\n", list.join(",")));
        }
        if let Some(t) = self.target_gflops {
            out.push_str(&format!("target_gflops = {t}\n"));
        }
        f.write_str(&out)
    }
}

impl FromStr for RunConfig {
    type Err = HarnessError;

    fn from_str(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| HarnessError::Config(format!("config line {}: {msg}", n + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, found {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(format!("duplicate key {key}")));
            }
            match key {
                "stages" => {
                    let v = value
                        .split(',')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| bad(format!("stages {value:?}: {e}")))?;
                    c.stages = Some(v);
                }
                "target_gflops" => {
                    c.target_gflops = Some(value.parse().map_err(|e| bad(format!("{value:?}: {e}")))?);
                }
                _ => {
                    if !set_into(&mut c, key, value).map_err(|e| bad(format!("{key}: {e}")))? {
                        return Err(bad(format!("unknown key {key}")));
                    }
                }
            }
        }
        // the dataset follows the model unless set explicitly
        c.data.image_size = c.model.image_size;
        c.data.num_classes = c.model.num_classes;
        Ok(c)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| HarnessError::Config(format!("{} is not UTF-8", path.display())))?;
        text.parse()
    }

    pub fn plan(&self) -> Result<StagePlan> {
        Ok(match &self.stages {
            Some(s) => StagePlan::new(s.clone(), self.model.depth)?,
            None => StagePlan::default_for(self.model.depth)?,
        })
    }

    /// Applies the command-line seed to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    /// Absolute FLOPs budget per instance.
    pub fn target_flops(&self) -> f64 {
        match self.target_gflops {
            Some(g) => g * 1e9,
            None => self.target_ratio * baseline_block_flops(&self.model) as f64,
        }
    }

    pub fn backbone_train(&self) -> BackboneTrainConfig {
        BackboneTrainConfig {
            seed: self.seed,
            ..self.backbone.clone()
        }
    }

    pub fn tofe_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            target_flops: self.target_flops(),
            ..self.tofe.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.plan()?;
        self.weights.validate()?;
        if self.eval_batch_size == 0 {
            return Err(HarnessError::Config("eval_batch_size must be >= 1".into()));
        }
        Ok(())
    }
}
