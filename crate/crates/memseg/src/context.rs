//! Context head: pyramid pooling, top-down fusion, and the bottleneck that
//! produces the memory-facing feature.
//!
//! Everything memory-facing lives at stride 8: the head output and the
//! bottleneck share spatial dims and the embedding width `C`, which keeps the
//! later gather/refine/concat stages shape-compatible without resampling.

use crate::autodiff::{Tape, Var};
use crate::encoder::{MultiLevelFeatureVars, MultiLevelFeatures};
use crate::error::{Error, Result};
use crate::layers::{Conv1x1, Conv1x1Vars};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const DEFAULT_POOL_GRIDS: [usize; 4] = [1, 2, 3, 6];

/// Head parameters: pooled-branch projections, laterals, fusions, bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextHeadWeights {
    pub pool_grids: Vec<usize>,
    pub ppm_projs: Vec<Conv1x1>, // C4→C per grid
    pub ppm_fuse: Conv1x1,       // (C4 + grids·C)→C
    pub lateral2: Conv1x1,       // C2→C
    pub lateral3: Conv1x1,       // C3→C
    pub fuse: Conv1x1,           // 3C→C
    pub bottleneck: Conv1x1,     // C2→C
}

pub fn init_context_head(
    seed: u64,
    channels: &[usize; 4],
    embed_dim: usize,
    pool_grids: &[usize],
) -> Result<ContextHeadWeights> {
    if embed_dim == 0 {
        return Err(Error::Config("embed_dim must be positive".into()));
    }
    if pool_grids.is_empty() || pool_grids.iter().any(|&g| g == 0) {
        return Err(Error::Config(format!("invalid pool grids {pool_grids:?}")));
    }
    let [_, c2, c3, c4] = *channels;
    let mut rng = stream(seed, "context-head-init");
    let ppm_projs = pool_grids
        .iter()
        .map(|_| Conv1x1::init(&mut rng, c4, embed_dim))
        .collect();
    Ok(ContextHeadWeights {
        pool_grids: pool_grids.to_vec(),
        ppm_projs,
        ppm_fuse: Conv1x1::init(&mut rng, c4 + pool_grids.len() * embed_dim, embed_dim),
        lateral2: Conv1x1::init(&mut rng, c2, embed_dim),
        lateral3: Conv1x1::init(&mut rng, c3, embed_dim),
        fuse: Conv1x1::init(&mut rng, 3 * embed_dim, embed_dim),
        bottleneck: Conv1x1::init(&mut rng, c2, embed_dim),
    })
}

pub struct ContextHeadVars<'t> {
    pub pool_grids: Vec<usize>,
    pub ppm_projs: Vec<Conv1x1Vars<'t>>,
    pub ppm_fuse: Conv1x1Vars<'t>,
    pub lateral2: Conv1x1Vars<'t>,
    pub lateral3: Conv1x1Vars<'t>,
    pub fuse: Conv1x1Vars<'t>,
    pub bottleneck: Conv1x1Vars<'t>,
}

impl ContextHeadWeights {
    pub fn lift<'t>(
        &self,
        tape: &'t Tape,
        trainable: bool,
        leaves: &mut Vec<Var<'t>>,
    ) -> ContextHeadVars<'t> {
        ContextHeadVars {
            pool_grids: self.pool_grids.clone(),
            ppm_projs: self
                .ppm_projs
                .iter()
                .map(|p| p.lift(tape, trainable, leaves))
                .collect(),
            ppm_fuse: self.ppm_fuse.lift(tape, trainable, leaves),
            lateral2: self.lateral2.lift(tape, trainable, leaves),
            lateral3: self.lateral3.lift(tape, trainable, leaves),
            fuse: self.fuse.lift(tape, trainable, leaves),
            bottleneck: self.bottleneck.lift(tape, trainable, leaves),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.ppm_projs.iter().enumerate() {
            out.push((format!("head.ppm_proj{i}.weight"), &p.weight));
            out.push((format!("head.ppm_proj{i}.bias"), &p.bias));
        }
        for (name, layer) in [
            ("ppm_fuse", &self.ppm_fuse),
            ("lateral2", &self.lateral2),
            ("lateral3", &self.lateral3),
            ("fuse", &self.fuse),
            ("bottleneck", &self.bottleneck),
        ] {
            out.push((format!("head.{name}.weight"), &layer.weight));
            out.push((format!("head.{name}.bias"), &layer.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.ppm_projs.iter_mut().enumerate() {
            out.push((format!("head.ppm_proj{i}.weight"), &mut p.weight));
            out.push((format!("head.ppm_proj{i}.bias"), &mut p.bias));
        }
        for (name, layer) in [
            ("ppm_fuse", &mut self.ppm_fuse),
            ("lateral2", &mut self.lateral2),
            ("lateral3", &mut self.lateral3),
            ("fuse", &mut self.fuse),
            ("bottleneck", &mut self.bottleneck),
        ] {
            out.push((format!("head.{name}.weight"), &mut layer.weight));
            out.push((format!("head.{name}.bias"), &mut layer.bias));
        }
        out
    }
}

/// Pyramid pooling over the stride-32 level. Pool grids larger than the
/// spatial dims are skipped (zero branch) with a logged warning so the fused
/// channel count stays stable.
pub fn pyramid_pool_vars<'t>(
    head: &ContextHeadVars<'t>,
    tape: &'t Tape,
    x4: Var<'t>,
) -> Result<Var<'t>> {
    let shape = x4.shape();
    let (h, w) = (shape[1], shape[2]);
    let mut merged = x4;
    for (grid, proj) in head.pool_grids.iter().zip(&head.ppm_projs) {
        let branch = if *grid > h || *grid > w {
            log::warn!("pyramid_pool: grid {grid} exceeds {h}×{w} spatial dims, skipped");
            let c = proj.weight.with_value(|t| t.shape()[0]);
            tape.constant(Tensor::zeros(&[c, h, w]))
        } else {
            let pooled = x4.adaptive_avg_pool(*grid, *grid)?;
            proj.forward(pooled)?.bilinear_resize(h, w)?
        };
        merged = merged.concat_channels(branch)?;
    }
    Ok(head.ppm_fuse.forward(merged)?.relu())
}

/// Top-down fusion: laterals on x2/x3, upsample-and-add from the pooled top,
/// everything resized to stride 8 and fused to `C` channels.
pub fn topdown_fuse_vars<'t>(
    head: &ContextHeadVars<'t>,
    features: &MultiLevelFeatureVars<'t>,
    ppm_out: Var<'t>,
) -> Result<Var<'t>> {
    let s3 = features.x3.shape();
    let s2 = features.x2.shape();
    let p4 = ppm_out;
    let p3 = head
        .lateral3
        .forward(features.x3)?
        .add(p4.bilinear_resize(s3[1], s3[2])?)?;
    let p2 = head
        .lateral2
        .forward(features.x2)?
        .add(p3.bilinear_resize(s2[1], s2[2])?)?;
    let merged = p2
        .concat_channels(p3.bilinear_resize(s2[1], s2[2])?)?
        .concat_channels(p4.bilinear_resize(s2[1], s2[2])?)?;
    head.fuse.forward(merged)
}

/// Memory-facing projection of the stride-8 level.
pub fn bottleneck_vars<'t>(
    head: &ContextHeadVars<'t>,
    features: &MultiLevelFeatureVars<'t>,
) -> Result<Var<'t>> {
    head.bottleneck.forward(features.x2)
}

fn with_head_vars<R>(
    weights: &ContextHeadWeights,
    features: &MultiLevelFeatures,
    f: impl for<'t> FnOnce(&'t Tape, &ContextHeadVars<'t>, &MultiLevelFeatureVars<'t>) -> Result<R>,
) -> Result<R> {
    let tape = Tape::new();
    let mut leaves = Vec::new();
    let head = weights.lift(&tape, false, &mut leaves);
    let feats = MultiLevelFeatureVars {
        x1: tape.constant(features.x1.clone()),
        x2: tape.constant(features.x2.clone()),
        x3: tape.constant(features.x3.clone()),
        x4: tape.constant(features.x4.clone()),
    };
    f(&tape, &head, &feats)
}

/// Plain pyramid pooling on the stride-32 feature.
pub fn pyramid_pool(weights: &ContextHeadWeights, features: &MultiLevelFeatures) -> Result<Tensor> {
    with_head_vars(weights, features, |tape, head, feats| {
        Ok(pyramid_pool_vars(head, tape, feats.x4)?.value())
    })
}

/// Plain head forward: the stride-8 basic representations.
pub fn topdown_fuse(weights: &ContextHeadWeights, features: &MultiLevelFeatures) -> Result<Tensor> {
    with_head_vars(weights, features, |tape, head, feats| {
        let ppm = pyramid_pool_vars(head, tape, feats.x4)?;
        Ok(topdown_fuse_vars(head, feats, ppm)?.value())
    })
}

/// Plain bottleneck forward: the stride-8 memory-facing feature.
pub fn bottleneck(weights: &ContextHeadWeights, features: &MultiLevelFeatures) -> Result<Tensor> {
    with_head_vars(weights, features, |_, head, feats| {
        Ok(bottleneck_vars(head, feats)?.value())
    })
}
