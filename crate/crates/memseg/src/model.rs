//! Model assembly: configuration, parameter bundles, checkpoints.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{ProjectionSet, ProjectionVars};
use crate::autodiff::{Tape, Var};
use crate::context::{init_context_head, ContextHeadVars, ContextHeadWeights, DEFAULT_POOL_GRIDS};
use crate::encoder::{init_encoder, EncoderConfig, EncoderVars, EncoderWeights};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Conv1x1Vars};
use crate::memory::{FeatureMemory, MomentumSchedule, TransformPath};
use crate::rng::stream;
use crate::tensor::io::Container;
use crate::tensor::Tensor;

/// Which decoder the model implements (ensembling combines two trained
/// models and is not itself a trainable variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    DecoderA,
    DecoderB,
    Ensemble,
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Variant> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "baseline" => Ok(Variant::Baseline),
            "decoder_a" | "a" => Ok(Variant::DecoderA),
            "decoder_b" | "b" => Ok(Variant::DecoderB),
            "ensemble" => Ok(Variant::Ensemble),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected baseline, decoder_a, decoder_b or ensemble)"
            ))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Baseline => "baseline",
            Variant::DecoderA => "decoder_a",
            Variant::DecoderB => "decoder_b",
            Variant::Ensemble => "ensemble",
        };
        write!(f, "{name}")
    }
}

/// Which stride-8 feature feeds the memory transform and the attention query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryFeatureSource {
    /// The learned bottleneck projection of the stride-8 backbone level.
    Bottleneck,
    /// The context-head output itself.
    HeadOutput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub k: usize,
    /// Embedding width `C` shared by the head output, the bottleneck and the
    /// feature memory.
    pub embed_dim: usize,
    pub variant: Variant,
    pub encoder: EncoderConfig,
    pub pool_grids: Vec<usize>,
    pub memory_source: MemoryFeatureSource,
    /// Temporal buffer capacity for decoder B.
    pub temporal_window: usize,
    pub momentum: MomentumSchedule,
    pub transform_path: TransformPath,
    /// Whether multi-stage feedback also replaces decoder B's current-frame
    /// first-pass guidance (off by default).
    pub stage_feedback_b: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 5,
            embed_dim: 16,
            variant: Variant::DecoderA,
            encoder: EncoderConfig::default(),
            pool_grids: DEFAULT_POOL_GRIDS.to_vec(),
            memory_source: MemoryFeatureSource::Bottleneck,
            temporal_window: crate::temporal::DEFAULT_WINDOW,
            momentum: MomentumSchedule::default(),
            transform_path: TransformPath::UpsampleFeatures,
            stage_feedback_b: false,
        }
    }
}

impl ModelConfig {
    fn uses_memory(&self) -> bool {
        matches!(self.variant, Variant::DecoderA | Variant::DecoderB)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.k > 254 {
            return Err(Error::Config(format!("k must be in [2,254], got {}", self.k)));
        }
        if self.variant == Variant::Ensemble {
            return Err(Error::Config(
                "ensemble is not a trainable variant; train decoder_a and decoder_b separately"
                    .into(),
            ));
        }
        if self.uses_memory() && self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be even for attention projections, got {}",
                self.embed_dim
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable state plus the (non-trainable) feature memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderWeights,
    pub head: ContextHeadWeights,
    /// Classifier over the head output alone; supplies first-pass guidance
    /// and is the baseline's output head.
    pub first_pass: Conv1x1,
    /// Memory-attention projections (decoder A and B).
    pub attn: Option<ProjectionSet>,
    /// Temporal-attention projections (decoder B).
    pub temporal: Option<ProjectionSet>,
    /// Classifier over concat(head output, refined memory feature).
    pub classifier: Option<Conv1x1>,
    pub memory: Option<FeatureMemory>,
}

impl Model {
    /// Fresh model with seeded weights and a zero feature memory.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let encoder = init_encoder(seed, &config.encoder)?;
        let head = init_context_head(
            seed,
            &config.encoder.channels,
            config.embed_dim,
            &config.pool_grids,
        )?;
        let mut rng = stream(seed, "first-pass-init");
        let first_pass = Conv1x1::init(&mut rng, config.embed_dim, config.k);
        let (attn, temporal, classifier, memory) = if config.uses_memory() {
            let attn = ProjectionSet::init(seed, "attn-init", config.embed_dim)?;
            let temporal = if config.variant == Variant::DecoderB {
                Some(ProjectionSet::init(seed, "temporal-init", config.embed_dim)?)
            } else {
                None
            };
            let mut cls_rng = stream(seed, "classifier-init");
            let classifier = Conv1x1::init(&mut cls_rng, 2 * config.embed_dim, config.k);
            let memory = FeatureMemory::new(config.k, config.embed_dim, config.momentum.clone());
            (Some(attn), temporal, Some(classifier), Some(memory))
        } else {
            (None, None, None, None)
        };
        Ok(Model {
            config,
            encoder,
            head,
            first_pass,
            attn,
            temporal,
            classifier,
            memory,
        })
    }

    /// Canonical parameter enumeration; lift order matches exactly.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.named_params();
        out.extend(self.head.named_params());
        out.push(("first_pass.weight".into(), &self.first_pass.weight));
        out.push(("first_pass.bias".into(), &self.first_pass.bias));
        if let Some(attn) = &self.attn {
            out.extend(attn.named_params("attn"));
        }
        if let Some(temporal) = &self.temporal {
            out.extend(temporal.named_params("temporal"));
        }
        if let Some(classifier) = &self.classifier {
            out.push(("classifier.weight".into(), &classifier.weight));
            out.push(("classifier.bias".into(), &classifier.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.named_params_mut();
        out.extend(self.head.named_params_mut());
        out.push(("first_pass.weight".into(), &mut self.first_pass.weight));
        out.push(("first_pass.bias".into(), &mut self.first_pass.bias));
        if let Some(attn) = &mut self.attn {
            out.extend(attn.named_params_mut("attn"));
        }
        if let Some(temporal) = &mut self.temporal {
            out.extend(temporal.named_params_mut("temporal"));
        }
        if let Some(classifier) = &mut self.classifier {
            out.push(("classifier.weight".into(), &mut classifier.weight));
            out.push(("classifier.bias".into(), &mut classifier.bias));
        }
        out
    }

    /// Trainability mask aligned with [`named_params`](Model::named_params).
    pub fn param_trainability(&self) -> Vec<bool> {
        let n_enc = self.encoder.named_params().len();
        let total = self.named_params().len();
        let mut mask = vec![true; total];
        for flag in mask.iter_mut().take(n_enc) {
            *flag = self.config.encoder.trainable;
        }
        mask
    }

    /// Put every parameter on a tape. With `train` set, parameters are
    /// tracked (the encoder only if configured trainable); otherwise all are
    /// constants. Leaves are pushed in [`named_params`](Model::named_params)
    /// order.
    pub fn lift<'t>(&self, tape: &'t Tape, train: bool) -> (ModelVars<'t>, Vec<Var<'t>>) {
        let mut leaves = Vec::new();
        let encoder = self
            .encoder
            .lift(tape, train && self.config.encoder.trainable, &mut leaves);
        let head = self.head.lift(tape, train, &mut leaves);
        let first_pass = self.first_pass.lift(tape, train, &mut leaves);
        let attn = self.attn.as_ref().map(|a| a.lift(tape, train, &mut leaves));
        let temporal = self
            .temporal
            .as_ref()
            .map(|t| t.lift(tape, train, &mut leaves));
        let classifier = self
            .classifier
            .as_ref()
            .map(|c| c.lift(tape, train, &mut leaves));
        (
            ModelVars {
                encoder,
                head,
                first_pass,
                attn,
                temporal,
                classifier,
            },
            leaves,
        )
    }

    /// Checkpoint contents: config and memory metadata in the header, one
    /// named section per parameter plus the memory matrix.
    pub fn to_container(&self) -> Container {
        let mut meta = serde_json::json!({
            "config": serde_json::to_value(&self.config).expect("config serializes"),
        });
        if let Some(memory) = &self.memory {
            meta["memory"] = serde_json::json!({
                "t": memory.t(),
                "schedule": serde_json::to_value(memory.schedule()).expect("schedule serializes"),
            });
        }
        let mut container = Container::new(meta);
        for (name, tensor) in self.named_params() {
            container.push(name, tensor.clone());
        }
        if let Some(memory) = &self.memory {
            container.push("memory.matrix", memory.matrix().clone());
        }
        container
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn from_container(container: &Container) -> Result<Model> {
        let config: ModelConfig = serde_json::from_value(container.meta["config"].clone())
            .map_err(|e| Error::Manifest(format!("checkpoint config: {e}")))?;
        let mut model = Model::init(config, 0)?;
        for (name, tensor) in model.named_params_mut() {
            let stored = container.require(&name)?;
            if stored.shape() != tensor.shape() {
                return Err(Error::Manifest(format!(
                    "checkpoint section {name}: shape {:?} vs expected {:?}",
                    stored.shape(),
                    tensor.shape()
                )));
            }
            *tensor = stored.clone();
        }
        if model.config.uses_memory() {
            let matrix = container.require("memory.matrix")?.clone();
            let t = container.meta["memory"]["t"].as_u64().ok_or_else(|| {
                Error::Manifest("checkpoint missing memory iteration counter".into())
            })?;
            let schedule: MomentumSchedule =
                serde_json::from_value(container.meta["memory"]["schedule"].clone())
                    .map_err(|e| Error::Manifest(format!("checkpoint momentum: {e}")))?;
            model.memory = Some(FeatureMemory::from_matrix(matrix, schedule, t)?);
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_container(&Container::load(path)?)
    }

    pub fn memory(&self) -> Result<&FeatureMemory> {
        self.memory
            .as_ref()
            .ok_or_else(|| Error::State(format!("{} has no feature memory", self.config.variant)))
    }
}

/// Recorded twins of every parameter bundle.
pub struct ModelVars<'t> {
    pub encoder: EncoderVars<'t>,
    pub head: ContextHeadVars<'t>,
    pub first_pass: Conv1x1Vars<'t>,
    pub attn: Option<ProjectionVars<'t>>,
    pub temporal: Option<ProjectionVars<'t>>,
    pub classifier: Option<Conv1x1Vars<'t>>,
}
