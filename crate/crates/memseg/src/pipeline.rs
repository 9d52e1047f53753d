//! Decoder forward paths and inference strategies.
//!
//! Decoder A guides the memory gather with the previous frame's prediction;
//! decoder B guides it with the current frame's first-pass prediction and
//! runs temporal attention over recent-frame features first. On top of the
//! single-frame forwards sit the ensemble, multi-scale/flip test-time
//! augmentation, whole-video inference and multi-stage re-prediction.

use serde::{Deserialize, Serialize};

use crate::attention::{classify_vars, refine_vars, relations_vars};
use crate::autodiff::{Tape, Var};
use crate::context::{bottleneck_vars, pyramid_pool_vars, topdown_fuse_vars};
use crate::data::{SegmentationMask, VideoClip, IGNORE_LABEL};
use crate::encoder::encode_vars;
use crate::error::{Error, Result};
use crate::model::{MemoryFeatureSource, Model, ModelVars, Variant};
use crate::temporal::{attend_vars, TemporalMemory};
use crate::tensor::Tensor;

/// Per-pixel class distributions, `K×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    probs: Tensor,
}

impl ProbabilityMap {
    pub fn new(probs: Tensor) -> Result<ProbabilityMap> {
        if probs.rank() != 3 {
            return Err(Error::shape(format!(
                "probability map must be K×H×W, got {:?}",
                probs.shape()
            )));
        }
        Ok(ProbabilityMap { probs })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Check the distribution invariant: entries in `[0,1]`, per-pixel sums
    /// within `1e-6` of 1.
    pub fn validate(&self) -> Result<()> {
        let (k, h, w) = (self.k(), self.height(), self.width());
        let hw = h * w;
        for p in 0..hw {
            let mut sum = 0.0;
            for c in 0..k {
                let v = self.probs.data()[c * hw + p];
                if !(0.0..=1.0 + 1e-9).contains(&v) {
                    return Err(Error::Input(format!(
                        "probability {v} out of range at pixel {p}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "pixel {p} probabilities sum to {sum}"
                )));
            }
        }
        Ok(())
    }
}

/// Argmax per pixel; ties break toward the lowest class index.
pub fn argmax_mask(probs: &ProbabilityMap) -> SegmentationMask {
    let (k, h, w) = (probs.k(), probs.height(), probs.width());
    let hw = h * w;
    let data = probs.tensor().data();
    let mut labels = Vec::with_capacity(hw);
    for p in 0..hw {
        let mut best = 0usize;
        let mut best_v = data[p];
        for c in 1..k {
            let v = data[c * hw + p];
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        labels.push(best as u8);
    }
    SegmentationMask::from_labels(h, w, labels).expect("argmax shape")
}

/// Where a guidance mask came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceSource {
    PreviousFramePrediction,
    CurrentFrameFirstPass,
    GroundTruth,
    SavedStageMask,
}

/// A segmentation mask used to index the feature memory per pixel.
#[derive(Debug, Clone)]
pub struct GuidanceMask {
    pub labels: SegmentationMask,
    pub source: GuidanceSource,
}

impl GuidanceMask {
    pub fn new(labels: SegmentationMask, source: GuidanceSource) -> GuidanceMask {
        GuidanceMask { labels, source }
    }

    pub fn hflip(&self) -> GuidanceMask {
        GuidanceMask {
            labels: self.labels.hflip(),
            source: self.source,
        }
    }

    fn check_labels(&self, k: usize) -> Result<()> {
        if let Some(max) = self.labels.max_label() {
            if max as usize >= k {
                return Err(Error::Input(format!(
                    "guidance label {max} out of range for K={k}"
                )));
            }
        }
        if self.labels.labels().iter().any(|&l| l == IGNORE_LABEL) {
            return Err(Error::Input("guidance mask contains ignore labels".into()));
        }
        Ok(())
    }
}

/// One round of multi-stage inference.
#[derive(Debug, Clone)]
pub struct StageMask {
    pub stage: usize,
    pub mask: SegmentationMask,
}

/// Test-time augmentation and multi-stage settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    pub stages: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            scales: vec![0.75, 1.0, 1.25, 1.5, 1.75],
            flip: true,
            stages: 0,
        }
    }
}

impl InferenceConfig {
    /// Plain single-pass inference: one scale, no flip, no extra stages.
    pub fn plain() -> InferenceConfig {
        InferenceConfig {
            scales: vec![1.0],
            flip: false,
            stages: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("scales must be nonempty".into()));
        }
        if self.scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!(
                "scales must be positive, got {:?}",
                self.scales
            )));
        }
        Ok(())
    }

    fn branch_count(&self) -> usize {
        self.scales.len() * if self.flip { 2 } else { 1 }
    }
}

/// Everything a single forward pass produces, as tape nodes.
pub struct ForwardArtifacts<'t> {
    /// Final per-pixel probabilities at frame resolution.
    pub probs: Var<'t>,
    /// First-pass (head-only) probabilities at frame resolution.
    pub first_pass_probs: Var<'t>,
    /// Stride-8 bottleneck output (buffered by decoder B).
    pub bottleneck: Option<Var<'t>>,
    /// The feature that played 𝓡 for the memory transform (decoder B: the
    /// temporal-attention output), cached for the moving-average update.
    pub memory_feature: Option<Var<'t>>,
    /// The guidance mask the gather actually used, if any.
    pub guidance_used: Option<SegmentationMask>,
}

/// Recorded forward pass shared by every variant.
///
/// `guidance` overrides the gather mask; when absent, decoders fall back to
/// the current frame's first-pass prediction (decoder B's default and
/// decoder A's frame-0 rule). `tmem` supplies decoder B's temporal buffer.
pub fn forward_vars<'t>(
    tape: &'t Tape,
    model: &Model,
    vars: &ModelVars<'t>,
    frame: Var<'t>,
    guidance: Option<&GuidanceMask>,
    tmem: Option<&TemporalMemory>,
) -> Result<ForwardArtifacts<'t>> {
    let shape = frame.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("frame must be 3×H×W, got {shape:?}")));
    }
    let (out_h, out_w) = (shape[1], shape[2]);
    let feats = encode_vars(&vars.encoder, frame)?;
    let ppm = pyramid_pool_vars(&vars.head, tape, feats.x4)?;
    let c_wi = topdown_fuse_vars(&vars.head, &feats, ppm)?;
    let first_pass_probs = vars
        .first_pass
        .forward(c_wi)?
        .bilinear_resize(out_h, out_w)?
        .softmax_channels()?;

    if model.config.variant == Variant::Baseline {
        return Ok(ForwardArtifacts {
            probs: first_pass_probs,
            first_pass_probs,
            bottleneck: None,
            memory_feature: None,
            guidance_used: None,
        });
    }

    let memory = model.memory()?;
    let attn = vars
        .attn
        .as_ref()
        .ok_or_else(|| Error::State("decoder missing attention projections".into()))?;
    let classifier = vars
        .classifier
        .as_ref()
        .ok_or_else(|| Error::State("decoder missing classifier".into()))?;

    let bottleneck = bottleneck_vars(&vars.head, &feats)?;
    let mut r = match model.config.memory_source {
        MemoryFeatureSource::Bottleneck => bottleneck,
        MemoryFeatureSource::HeadOutput => c_wi,
    };
    if model.config.variant == Variant::DecoderB {
        let temporal = vars
            .temporal
            .as_ref()
            .ok_or_else(|| Error::State("decoder B missing temporal projections".into()))?;
        let empty = TemporalMemory::new(model.config.temporal_window);
        let buffer = tmem.unwrap_or(&empty);
        r = attend_vars(tape, temporal, buffer, r)?;
    }

    let guidance_mask = match guidance {
        Some(g) => {
            g.check_labels(model.config.k)?;
            g.labels.clone()
        }
        None => first_pass_probs.with_value(|t| {
            ProbabilityMap::new(t.clone()).map(|p| argmax_mask(&p))
        })?,
    };
    let rshape = r.shape();
    let gathered = memory.gather(&guidance_mask, rshape[1], rshape[2])?;
    let c_bi_prime = tape.constant(gathered);

    let o = relations_vars(attn, r, c_bi_prime)?;
    let c_bi = refine_vars(attn, o, c_bi_prime)?;
    let probs = classify_vars(classifier, c_wi, c_bi, out_h, out_w)?;

    Ok(ForwardArtifacts {
        probs,
        first_pass_probs,
        bottleneck: Some(bottleneck),
        memory_feature: Some(r),
        guidance_used: Some(guidance_mask),
    })
}

fn forward_plain(
    model: &Model,
    frame: &Tensor,
    guidance: Option<&GuidanceMask>,
    tmem: Option<&TemporalMemory>,
) -> Result<(ProbabilityMap, Option<Tensor>)> {
    let tape = Tape::new();
    let (vars, _) = model.lift(&tape, false);
    let frame = tape.constant(frame.clone());
    let art = forward_vars(&tape, model, &vars, frame, guidance, tmem)?;
    let probs = ProbabilityMap::new(art.probs.value())?;
    let bottleneck = art.bottleneck.map(|b| b.value());
    Ok((probs, bottleneck))
}

/// Head-only forward (the baseline path of any variant).
pub fn first_pass_forward(model: &Model, frame: &Tensor) -> Result<ProbabilityMap> {
    let tape = Tape::new();
    let (vars, _) = model.lift(&tape, false);
    let frame_v = tape.constant(frame.clone());
    let shape = frame.shape();
    let feats = encode_vars(&vars.encoder, frame_v)?;
    let ppm = pyramid_pool_vars(&vars.head, &tape, feats.x4)?;
    let c_wi = topdown_fuse_vars(&vars.head, &feats, ppm)?;
    let probs = vars
        .first_pass
        .forward(c_wi)?
        .bilinear_resize(shape[1], shape[2])?
        .softmax_channels()?;
    ProbabilityMap::new(probs.value())
}

/// Decoder A: gather guided by the given mask (normally the previous frame's
/// prediction; the first frame of a video uses the first-pass fallback).
pub fn decoder_a_forward(
    model: &Model,
    frame: &Tensor,
    guidance: &GuidanceMask,
) -> Result<ProbabilityMap> {
    if model.config.variant != Variant::DecoderA {
        return Err(Error::State(format!(
            "decoder_a_forward on a {} model",
            model.config.variant
        )));
    }
    Ok(forward_plain(model, frame, Some(guidance), None)?.0)
}

/// Decoder B: temporal attention over the buffer, first-pass self-guidance,
/// and the refined classification; returns the buffer with this frame's
/// bottleneck features pushed.
pub fn decoder_b_forward(
    model: &Model,
    frame: &Tensor,
    tmem: &TemporalMemory,
) -> Result<(ProbabilityMap, TemporalMemory)> {
    if model.config.variant != Variant::DecoderB {
        return Err(Error::State(format!(
            "decoder_b_forward on a {} model",
            model.config.variant
        )));
    }
    let (probs, bottleneck) = forward_plain(model, frame, None, Some(tmem))?;
    let mut next = tmem.clone();
    next.push(bottleneck.expect("decoder forward produces bottleneck"))?;
    Ok((probs, next))
}

/// Add the two probability maps and take the per-pixel argmax (ties break
/// toward the lowest class index).
pub fn ensemble(p_a: &ProbabilityMap, p_b: &ProbabilityMap) -> Result<SegmentationMask> {
    let sum = p_a.tensor().add(p_b.tensor())?;
    argmax_of(&sum)
}

fn argmax_of(scores: &Tensor) -> Result<SegmentationMask> {
    let map = ProbabilityMap::new(scores.clone())?;
    Ok(argmax_mask(&map))
}

fn round_up_32(v: f64) -> usize {
    let v = v.max(1.0).ceil() as usize;
    v.div_ceil(32) * 32
}

/// One TTA branch: a scale and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtaBranch {
    pub index: usize,
    pub scale: f64,
    pub flipped: bool,
}

/// Run `forward` on every scale/flip branch of a frame and average the
/// resulting probability maps at the original resolution.
///
/// The closure receives the already rescaled (and flipped, with guidance
/// flipped to match) frame and must return probabilities at that branch's
/// resolution; unflipping, resizing back and renormalizing happen here.
pub fn multi_scale_flip_infer_with(
    cfg: &InferenceConfig,
    frame: &Tensor,
    guidance: Option<&GuidanceMask>,
    forward: &mut dyn FnMut(&TtaBranch, &Tensor, Option<&GuidanceMask>) -> Result<ProbabilityMap>,
) -> Result<ProbabilityMap> {
    cfg.validate()?;
    if frame.rank() != 3 {
        return Err(Error::shape(format!(
            "multi_scale_flip_infer: 3×H×W frame required, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let mut acc: Option<Tensor> = None;
    let mut branches = 0usize;
    let mut index = 0usize;
    let mut untouched = true; // single branch at native resolution, unflipped
    for &scale in &cfg.scales {
        let (th, tw) = (round_up_32(h as f64 * scale), round_up_32(w as f64 * scale));
        if th < 32 || tw < 32 {
            log::warn!("multi_scale_flip_infer: scale {scale} gives {th}×{tw}, skipped");
            continue;
        }
        let scaled = frame.bilinear_resize(th, tw)?;
        for flipped in [false, true] {
            if flipped && !cfg.flip {
                continue;
            }
            let branch = TtaBranch {
                index,
                scale,
                flipped,
            };
            index += 1;
            let (branch_frame, branch_guidance);
            let probs = if flipped {
                branch_frame = scaled.hflip();
                branch_guidance = guidance.map(|g| g.hflip());
                forward(&branch, &branch_frame, branch_guidance.as_ref())?
            } else {
                forward(&branch, &scaled, guidance)?
            };
            if probs.height() != th || probs.width() != tw {
                return Err(Error::shape(format!(
                    "branch probabilities {:?} do not match branch dims {th}×{tw}",
                    probs.tensor().shape()
                )));
            }
            untouched &= !flipped && th == h && tw == w;
            let mut full = probs.tensor().bilinear_resize(h, w)?;
            if flipped {
                full = full.hflip();
            }
            acc = Some(match acc {
                Some(a) => a.add(&full)?,
                None => full,
            });
            branches += 1;
        }
    }
    let Some(acc) = acc else {
        return Err(Error::Config("every scale was skipped".into()));
    };
    if branches == 1 && untouched {
        // the single native branch reproduces plain inference bit-exactly
        return ProbabilityMap::new(acc);
    }
    let mut avg = acc.scale(1.0 / branches as f64);
    renormalize_channels(&mut avg);
    ProbabilityMap::new(avg)
}

/// Per-pixel renormalization after resizing/averaging probability maps.
fn renormalize_channels(t: &mut Tensor) {
    let (k, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let hw = h * w;
    for p in 0..hw {
        let mut sum = 0.0;
        for c in 0..k {
            sum += t.data()[c * hw + p];
        }
        if sum > 0.0 {
            for c in 0..k {
                t.data_mut()[c * hw + p] /= sum;
            }
        }
    }
}

/// Multi-scale + flip inference for guidance-driven variants (baseline and
/// decoder A). Decoder B's TTA runs inside [`video_infer`] where each branch
/// keeps its own temporal buffer.
pub fn multi_scale_flip_infer(
    model: &Model,
    frame: &Tensor,
    cfg: &InferenceConfig,
    guidance: Option<&GuidanceMask>,
) -> Result<ProbabilityMap> {
    if model.config.variant == Variant::DecoderB {
        return Err(Error::State(
            "decoder B test-time augmentation is driven by video_infer".into(),
        ));
    }
    multi_scale_flip_infer_with(cfg, frame, guidance, &mut |_, f, g| match model
        .config
        .variant
    {
        Variant::Baseline => first_pass_forward(model, f),
        _ => Ok(forward_plain(model, f, g, None)?.0),
    })
}

/// Whole-video inference returning one probability map per frame.
///
/// Baseline frames are independent; decoder A chains the previous frame's
/// averaged prediction into the next frame's guidance; decoder B rolls one
/// temporal buffer per TTA branch.
pub fn video_infer_probs(
    model: &Model,
    clip: &VideoClip,
    cfg: &InferenceConfig,
) -> Result<Vec<ProbabilityMap>> {
    if clip.is_empty() {
        return Err(Error::Input(format!("video {} has no frames", clip.id)));
    }
    cfg.validate()?;
    match model.config.variant {
        Variant::Ensemble => Err(Error::State(
            "ensemble inference combines two saved probability map sets".into(),
        )),
        Variant::Baseline => clip
            .frames
            .iter()
            .map(|frame| multi_scale_flip_infer(model, frame, cfg, None))
            .collect(),
        Variant::DecoderA => {
            let mut out: Vec<ProbabilityMap> = Vec::with_capacity(clip.len());
            let mut prev_mask: Option<SegmentationMask> = None;
            for frame in &clip.frames {
                let guidance = prev_mask.take().map(|labels| {
                    GuidanceMask::new(labels, GuidanceSource::PreviousFramePrediction)
                });
                let probs = multi_scale_flip_infer(model, frame, cfg, guidance.as_ref())?;
                prev_mask = Some(argmax_mask(&probs));
                out.push(probs);
            }
            Ok(out)
        }
        Variant::DecoderB => {
            let mut buffers =
                vec![TemporalMemory::new(model.config.temporal_window); cfg.branch_count()];
            let mut out = Vec::with_capacity(clip.len());
            for frame in &clip.frames {
                let probs =
                    multi_scale_flip_infer_with(cfg, frame, None, &mut |branch, f, g| {
                        let (probs, bottleneck) =
                            forward_plain(model, f, g, Some(&buffers[branch.index]))?;
                        buffers[branch.index]
                            .push(bottleneck.expect("decoder forward produces bottleneck"))?;
                        Ok(probs)
                    })?;
                out.push(probs);
            }
            Ok(out)
        }
    }
}

/// Like [`video_infer_probs`] but reduced to per-frame masks.
pub fn video_infer(model: &Model, clip: &VideoClip, cfg: &InferenceConfig) -> Result<Vec<SegmentationMask>> {
    Ok(video_infer_probs(model, clip, cfg)?
        .iter()
        .map(argmax_mask)
        .collect())
}

/// All rounds of multi-stage inference over one clip.
#[derive(Debug, Clone)]
pub struct MultiStageResult {
    /// `stages[s][frame]`, with `stage` increasing by 1 per round.
    pub stages: Vec<Vec<StageMask>>,
    /// Pixels changed versus the previous stage, per stage `s ≥ 1`.
    pub pixel_changes: Vec<usize>,
    /// Probability maps of the final stage.
    pub final_probs: Vec<ProbabilityMap>,
}

impl MultiStageResult {
    pub fn masks(&self, stage: usize) -> Vec<&SegmentationMask> {
        self.stages[stage].iter().map(|s| &s.mask).collect()
    }
}

/// Stage 0 is ordinary video inference; stage `s ≥ 1` re-runs every frame
/// with the gather guided by that frame's stage `s−1` mask.
///
/// For decoder B the feedback only applies when the model was configured
/// with `stage_feedback_b`; otherwise later stages repeat stage 0 exactly.
pub fn multi_stage_infer(
    model: &Model,
    clip: &VideoClip,
    n_stages: usize,
    cfg: &InferenceConfig,
) -> Result<MultiStageResult> {
    let probs0 = video_infer_probs(model, clip, cfg)?;
    let masks0: Vec<SegmentationMask> = probs0.iter().map(argmax_mask).collect();
    let mut stages = vec![masks0
        .iter()
        .cloned()
        .map(|mask| StageMask { stage: 0, mask })
        .collect::<Vec<_>>()];
    let mut final_probs = probs0;
    let mut pixel_changes = Vec::with_capacity(n_stages);

    let feedback = match model.config.variant {
        Variant::DecoderA => true,
        Variant::DecoderB => model.config.stage_feedback_b,
        _ => false,
    };

    for stage in 1..=n_stages {
        let prev: Vec<SegmentationMask> =
            stages[stage - 1].iter().map(|s| s.mask.clone()).collect();
        let (masks, probs) = if feedback {
            let mut masks = Vec::with_capacity(clip.len());
            let mut probs = Vec::with_capacity(clip.len());
            // per-branch temporal buffers for decoder B with feedback on
            let mut buffers =
                vec![TemporalMemory::new(model.config.temporal_window); cfg.branch_count()];
            for (frame, prev_mask) in clip.frames.iter().zip(&prev) {
                let guidance =
                    GuidanceMask::new(prev_mask.clone(), GuidanceSource::SavedStageMask);
                let p = match model.config.variant {
                    Variant::DecoderB => multi_scale_flip_infer_with(
                        cfg,
                        frame,
                        Some(&guidance),
                        &mut |branch, f, g| {
                            let (probs, bottleneck) =
                                forward_plain(model, f, g, Some(&buffers[branch.index]))?;
                            buffers[branch.index]
                                .push(bottleneck.expect("decoder forward produces bottleneck"))?;
                            Ok(probs)
                        },
                    )?,
                    _ => multi_scale_flip_infer(model, frame, cfg, Some(&guidance))?,
                };
                masks.push(argmax_mask(&p));
                probs.push(p);
            }
            (masks, probs)
        } else {
            log::info!(
                "multi_stage_infer: stage feedback disabled for {}, stage {stage} repeats stage 0",
                model.config.variant
            );
            (prev.clone(), final_probs.clone())
        };
        let changed: usize = masks
            .iter()
            .zip(&prev)
            .map(|(a, b)| a.disagreement(b))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        pixel_changes.push(changed);
        stages.push(
            masks
                .iter()
                .cloned()
                .map(|mask| StageMask { stage, mask })
                .collect(),
        );
        final_probs = probs;
    }
    Ok(MultiStageResult {
        stages,
        pixel_changes,
        final_probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::model::ModelConfig;

    fn toy_config(variant: Variant) -> ModelConfig {
        ModelConfig {
            k: 4,
            embed_dim: 8,
            variant,
            encoder: EncoderConfig {
                channels: [4, 8, 8, 8],
                trainable: true,
            },
            pool_grids: vec![1, 2],
            ..ModelConfig::default()
        }
    }

    fn toy_model(variant: Variant, seed: u64) -> Model {
        let mut model = Model::init(toy_config(variant), seed).unwrap();
        if let Some(memory) = model.memory.as_mut() {
            // spread the memory rows so gathers differ per class
            let rows = Tensor::from_vec(
                vec![4, 8],
                (0..32).map(|i| (i as f64) * 0.07 - 1.0).collect(),
            )
            .unwrap();
            memory.update_with_target(&rows).unwrap();
        }
        model
    }

    fn toy_frame(seed: u64, h: usize, w: usize) -> Tensor {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "pipeline-frame");
        Tensor::from_vec(
            vec![3, h, w],
            (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn uniform_guidance(h: usize, w: usize, class: u8) -> GuidanceMask {
        GuidanceMask::new(
            SegmentationMask::new(h, w, class),
            GuidanceSource::GroundTruth,
        )
    }

    #[test]
    fn decoder_a_emits_valid_probabilities_and_is_deterministic() {
        let model = toy_model(Variant::DecoderA, 3);
        let frame = toy_frame(4, 32, 32);
        let g = uniform_guidance(32, 32, 1);
        let a = decoder_a_forward(&model, &frame, &g).unwrap();
        a.validate().unwrap();
        let b = decoder_a_forward(&model, &frame, &g).unwrap();
        assert_eq!(a, b);
        // different guidance generally changes the output
        let g2 = uniform_guidance(32, 32, 2);
        let c = decoder_a_forward(&model, &frame, &g2).unwrap();
        assert!(a.tensor().max_abs_diff(c.tensor()).unwrap() > 0.0);
    }

    #[test]
    fn decoder_a_matches_hand_composed_sub_ops() {
        let model = toy_model(Variant::DecoderA, 5);
        let frame = toy_frame(6, 32, 32);
        let g = uniform_guidance(32, 32, 2);
        let end_to_end = decoder_a_forward(&model, &frame, &g).unwrap();

        // hand-wired composition through the public sub-ops
        let feats = crate::encoder::encode(&model.encoder, &frame).unwrap();
        let c_wi = crate::context::topdown_fuse(&model.head, &feats).unwrap();
        let r = crate::context::bottleneck(&model.head, &feats).unwrap();
        let memory = model.memory().unwrap();
        let gathered = memory.gather(&g.labels, 4, 4).unwrap();
        let attn = model.attn.as_ref().unwrap();
        let o = crate::attention::relations(&r, &gathered, attn).unwrap();
        let c_bi = crate::attention::refine(&o, &gathered, attn).unwrap();
        let composed = crate::attention::fuse_and_classify(
            &c_wi,
            &c_bi,
            model.classifier.as_ref().unwrap(),
            32,
            32,
        )
        .unwrap();
        assert_eq!(end_to_end, composed); // bit-identical
    }

    #[test]
    fn decoder_b_pushes_bottleneck_and_matches_composition() {
        let model = toy_model(Variant::DecoderB, 7);
        let frame = toy_frame(8, 32, 32);
        let empty = TemporalMemory::new(2);
        let (probs, mem1) = decoder_b_forward(&model, &frame, &empty).unwrap();
        probs.validate().unwrap();
        assert_eq!(mem1.len(), 1);
        let (_, mem2) = decoder_b_forward(&model, &frame, &mem1).unwrap();
        assert_eq!(mem2.len(), 2);
        let (_, mem3) = decoder_b_forward(&model, &frame, &mem2).unwrap();
        assert_eq!(mem3.len(), 2); // capacity bound

        // composition oracle with empty buffer: TMA is the identity
        let feats = crate::encoder::encode(&model.encoder, &frame).unwrap();
        let c_wi = crate::context::topdown_fuse(&model.head, &feats).unwrap();
        let r = crate::context::bottleneck(&model.head, &feats).unwrap();
        let r_t =
            crate::temporal::attend(&empty, &r, model.temporal.as_ref().unwrap()).unwrap();
        assert_eq!(r_t.data(), r.data());
        let fp = first_pass_forward(&model, &frame).unwrap();
        let guidance = argmax_mask(&fp);
        let gathered = model.memory().unwrap().gather(&guidance, 4, 4).unwrap();
        let attn = model.attn.as_ref().unwrap();
        let o = crate::attention::relations(&r_t, &gathered, attn).unwrap();
        let c_bi = crate::attention::refine(&o, &gathered, attn).unwrap();
        let composed = crate::attention::fuse_and_classify(
            &c_wi,
            &c_bi,
            model.classifier.as_ref().unwrap(),
            32,
            32,
        )
        .unwrap();
        assert_eq!(probs, composed);
    }

    #[test]
    fn ensemble_cases() {
        let a = ProbabilityMap::new(
            Tensor::from_vec(vec![2, 1, 1], vec![0.6, 0.4]).unwrap(),
        )
        .unwrap();
        let b = ProbabilityMap::new(
            Tensor::from_vec(vec![2, 1, 1], vec![0.3, 0.7]).unwrap(),
        )
        .unwrap();
        // sums (0.9, 1.1) → class 1
        assert_eq!(ensemble(&a, &b).unwrap().labels(), &[1]);
        // self-ensemble = own argmax
        assert_eq!(ensemble(&a, &a).unwrap().labels(), argmax_mask(&a).labels());
        // exact tie → class 0
        let half = ProbabilityMap::new(
            Tensor::from_vec(vec![2, 1, 1], vec![0.5, 0.5]).unwrap(),
        )
        .unwrap();
        assert_eq!(ensemble(&half, &half).unwrap().labels(), &[0]);
        // shape mismatch is an error
        let wide = ProbabilityMap::new(Tensor::zeros(&[2, 1, 2])).unwrap();
        assert!(ensemble(&a, &wide).is_err());
    }

    #[test]
    fn single_scale_no_flip_equals_plain_forward() {
        let model = toy_model(Variant::DecoderA, 9);
        let frame = toy_frame(10, 32, 32);
        let g = uniform_guidance(32, 32, 0);
        let plain = decoder_a_forward(&model, &frame, &g).unwrap();
        let tta = multi_scale_flip_infer(&model, &frame, &InferenceConfig::plain(), Some(&g))
            .unwrap();
        assert_eq!(plain, tta); // bit-exact single-branch identity
    }

    #[test]
    fn averaging_identical_maps_is_identity() {
        let frame = toy_frame(11, 32, 32);
        let fixed = ProbabilityMap::new(Tensor::full(&[2, 32, 32], 0.5)).unwrap();
        let cfg = InferenceConfig {
            scales: vec![1.0, 1.0, 1.0],
            flip: false,
            stages: 0,
        };
        let out = multi_scale_flip_infer_with(&cfg, &frame, None, &mut |_, f, _| {
            ProbabilityMap::new(Tensor::full(&[2, f.shape()[1], f.shape()[2]], 0.5))
        })
        .unwrap();
        assert!(out.tensor().max_abs_diff(fixed.tensor()).unwrap() <= 1e-12);
    }

    #[test]
    fn flip_branch_of_equivariant_forward_matches_unflipped() {
        // per-pixel forward (class prob = function of the red channel only)
        // is exactly flip-equivariant, so the flip branch must reproduce the
        // unflipped branch after unflipping
        let frame = toy_frame(12, 32, 64);
        let per_pixel = |f: &Tensor| -> Result<ProbabilityMap> {
            let (h, w) = (f.shape()[1], f.shape()[2]);
            let hw = h * w;
            let mut probs = Tensor::zeros(&[2, h, w]);
            for p in 0..hw {
                let v = f.data()[p].clamp(0.0, 1.0);
                probs.data_mut()[p] = v;
                probs.data_mut()[hw + p] = 1.0 - v;
            }
            ProbabilityMap::new(probs)
        };
        let unflipped = multi_scale_flip_infer_with(
            &InferenceConfig {
                scales: vec![1.0],
                flip: false,
                stages: 0,
            },
            &frame,
            None,
            &mut |_, f, _| per_pixel(f),
        )
        .unwrap();
        let both = multi_scale_flip_infer_with(
            &InferenceConfig {
                scales: vec![1.0],
                flip: true,
                stages: 0,
            },
            &frame,
            None,
            &mut |_, f, _| per_pixel(f),
        )
        .unwrap();
        assert!(unflipped.tensor().max_abs_diff(both.tensor()).unwrap() <= 1e-6);
    }

    #[test]
    fn video_infer_rules() {
        let model = toy_model(Variant::DecoderA, 13);
        let frame = toy_frame(14, 32, 32);
        let clip = VideoClip {
            id: "clip".into(),
            frames: vec![frame.clone(), frame.clone(), frame.clone()],
            masks: vec![],
        };
        let cfg = InferenceConfig::plain();
        let probs = video_infer_probs(&model, &clip, &cfg).unwrap();
        assert_eq!(probs.len(), 3);
        // identical frames: frame 1's guidance is frame 0's output, and
        // frame 2 of an identical-frame clip sees the same guidance as soon
        // as predictions stabilize
        let again = video_infer_probs(&model, &clip, &cfg).unwrap();
        for (a, b) in probs.iter().zip(&again) {
            assert_eq!(a, b);
        }

        // 1-frame clip uses the first-pass fallback
        let single = VideoClip {
            id: "one".into(),
            frames: vec![frame.clone()],
            masks: vec![],
        };
        let one = video_infer_probs(&model, &single, &cfg).unwrap();
        assert_eq!(one.len(), 1);
        let empty = VideoClip {
            id: "empty".into(),
            frames: vec![],
            masks: vec![],
        };
        assert!(matches!(
            video_infer_probs(&model, &empty, &cfg),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn multi_stage_zero_equals_video_infer_and_fixed_point_holds() {
        let model = toy_model(Variant::DecoderA, 15);
        let frame = toy_frame(16, 32, 32);
        let clip = VideoClip {
            id: "clip".into(),
            frames: vec![frame.clone(), frame.clone()],
            masks: vec![],
        };
        let cfg = InferenceConfig::plain();
        let result = multi_stage_infer(&model, &clip, 4, &cfg).unwrap();
        assert_eq!(result.stages.len(), 5);
        assert_eq!(result.pixel_changes.len(), 4);
        let direct = video_infer(&model, &clip, &cfg).unwrap();
        for (s, d) in result.stages[0].iter().zip(&direct) {
            assert_eq!(&s.mask, d);
        }
        // fixed point: once two consecutive stages agree, later ones repeat
        for s in 1..result.stages.len() - 1 {
            let same: bool = result.stages[s]
                .iter()
                .zip(&result.stages[s - 1])
                .all(|(a, b)| a.mask == b.mask);
            if same {
                for later in s + 1..result.stages.len() {
                    for (a, b) in result.stages[later].iter().zip(&result.stages[s]) {
                        assert_eq!(a.mask, b.mask);
                    }
                }
            }
        }
    }

    #[test]
    fn argmax_tie_breaks_low() {
        let p = ProbabilityMap::new(
            Tensor::from_vec(vec![3, 1, 1], vec![0.4, 0.4, 0.2]).unwrap(),
        )
        .unwrap();
        assert_eq!(argmax_mask(&p).labels(), &[0]);
    }

    #[test]
    fn guidance_label_range_is_checked() {
        let model = toy_model(Variant::DecoderA, 17);
        let frame = toy_frame(18, 32, 32);
        let g = uniform_guidance(32, 32, 9); // K = 4
        assert!(matches!(
            decoder_a_forward(&model, &frame, &g),
            Err(Error::Input(_))
        ));
    }
}
