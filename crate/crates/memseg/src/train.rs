//! Training: frame sampling, augmentation, cross-entropy loss, AdamW, and
//! the per-step update of model and feature memory.
//!
//! Early steps replace the guidance mask with the current frame's ground
//! truth (warm-up); afterwards decoder A is guided by the previous frame's
//! ground truth as a cheap stand-in for a live previous-frame prediction
//! (a config switch enables the prediction-based mode). Decoder B is guided
//! by the current frame's ground truth throughout, mirroring its inference
//! rule. The feature memory is refreshed after the optimizer step from
//! features cached during the forward pass, so the blend consumed by step
//! `t+1` summarizes step `t`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DatasetManifest, SegmentationMask, Split, VideoClip, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::memory::FeatureMemory;
use crate::model::{Model, Variant};
use crate::pipeline::{forward_vars, GuidanceMask, GuidanceSource, ProbabilityMap};
use crate::rng::stream;
use crate::temporal::TemporalMemory;
use crate::tensor::io::Container;
use crate::tensor::Tensor;

/// How post-warm-up guidance is produced for decoder A.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Previous frame's ground-truth mask (default; one forward per step).
    PrevFrameGroundTruth,
    /// First-pass prediction on the previous frame, computed without
    /// gradients (closer to inference behavior, one extra forward).
    PrevFramePrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Overrides the epoch-derived step budget when set.
    pub max_steps: Option<usize>,
    pub crop_h: usize,
    pub crop_w: usize,
    pub batch_size: usize,
    pub warmup_fraction: f64,
    /// Weight of the first-pass (guidance head) loss term.
    pub aux_weight: f64,
    pub guidance_mode: GuidanceMode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.05,
            epochs: 10,
            max_steps: None,
            crop_h: 64,
            crop_w: 64,
            batch_size: 4,
            warmup_fraction: 0.2,
            aux_weight: 0.4,
            guidance_mode: GuidanceMode::PrevFrameGroundTruth,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in [0,1], got {}",
                self.warmup_fraction
            )));
        }
        if self.crop_h % 32 != 0 || self.crop_w % 32 != 0 {
            return Err(Error::Config(format!(
                "crop dims must be divisible by 32, got {}×{}",
                self.crop_h, self.crop_w
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid lr {} / weight_decay {}",
                self.lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    /// Max relative delta for brightness, contrast and saturation.
    pub color_jitter: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            scale_min: 0.5,
            scale_max: 2.0,
            hflip_prob: 0.5,
            color_jitter: 0.1,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min > 0.0) || self.scale_min > self.scale_max {
            return Err(Error::Config(format!(
                "scale range [{}, {}] invalid",
                self.scale_min, self.scale_max
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config("hflip_prob must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Draw that leaves geometry and colors untouched (up to crop).
    pub fn identity() -> AugmentationConfig {
        AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            hflip_prob: 0.0,
            color_jitter: 0.0,
        }
    }
}

/// True while `step_index` falls in the warm-up span.
pub fn uses_gt_guidance(step_index: usize, total_steps: usize, warmup_fraction: f64) -> bool {
    (step_index as f64) < warmup_fraction * total_steps as f64
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// Train-split clips preloaded in memory.
pub struct TrainSet {
    pub clips: Vec<VideoClip>,
    pub k: usize,
}

impl TrainSet {
    pub fn load(manifest: &DatasetManifest) -> Result<TrainSet> {
        let mut clips = Vec::new();
        for entry in manifest.split_videos(Split::Train) {
            clips.push(crate::data::load_clip(manifest, &entry.id)?);
        }
        if clips.is_empty() {
            return Err(Error::Config("train split is empty".into()));
        }
        Ok(TrainSet {
            clips,
            k: manifest.k,
        })
    }

    pub fn total_frames(&self) -> usize {
        self.clips.iter().map(|c| c.len()).sum()
    }
}

/// One uniformly drawn `(video, frame)` pair with its predecessor, if any.
pub struct Sample<'a> {
    pub frame: &'a Tensor,
    pub mask: &'a SegmentationMask,
    pub prev_frame: Option<&'a Tensor>,
    pub prev_mask: Option<&'a SegmentationMask>,
}

/// Uniform over all `(video, frame)` pairs of the train split.
pub fn sample_frame<'a>(set: &'a TrainSet, rng: &mut ChaCha8Rng) -> Sample<'a> {
    let total = set.total_frames();
    let mut pick = rng.random_range(0..total);
    for clip in &set.clips {
        if pick < clip.len() {
            return Sample {
                frame: &clip.frames[pick],
                mask: &clip.masks[pick],
                prev_frame: if pick > 0 {
                    Some(&clip.frames[pick - 1])
                } else {
                    None
                },
                prev_mask: if pick > 0 {
                    Some(&clip.masks[pick - 1])
                } else {
                    None
                },
            };
        }
        pick -= clip.len();
    }
    unreachable!("pick bounded by total frame count");
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// A training example after augmentation. All members share the same
/// geometric transform so guidance stays pixel-aligned with the frame.
pub struct AugmentedSample {
    pub frame: Tensor,
    pub mask: SegmentationMask,
    pub prev_frame: Option<Tensor>,
    pub prev_mask: Option<SegmentationMask>,
}

/// Random scale, horizontal flip and color jitter, then crop/pad to the
/// crop size (mask padding uses the ignore label). The same geometric draw
/// is applied to every member of the sample; jitter touches frames only.
pub fn augment_sample(
    sample: &Sample<'_>,
    crop_h: usize,
    crop_w: usize,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentedSample> {
    cfg.validate()?;
    let (h, w) = (sample.mask.height(), sample.mask.width());
    let scale = if cfg.scale_min == cfg.scale_max {
        cfg.scale_min
    } else {
        rng.random_range(cfg.scale_min..cfg.scale_max)
    };
    let sh = ((h as f64 * scale).round() as usize).max(1);
    let sw = ((w as f64 * scale).round() as usize).max(1);
    let flip = cfg.hflip_prob > 0.0 && rng.random_range(0.0..1.0) < cfg.hflip_prob;
    let jitter = |rng: &mut ChaCha8Rng| {
        if cfg.color_jitter > 0.0 {
            rng.random_range(-cfg.color_jitter..cfg.color_jitter)
        } else {
            0.0
        }
    };
    let (brightness, contrast, saturation) = (jitter(rng), jitter(rng), jitter(rng));
    // one crop offset for the whole group
    let oy_max = sh.saturating_sub(crop_h);
    let ox_max = sw.saturating_sub(crop_w);
    let oy = if oy_max > 0 { rng.random_range(0..=oy_max) } else { 0 };
    let ox = if ox_max > 0 { rng.random_range(0..=ox_max) } else { 0 };

    let transform_frame = |frame: &Tensor| -> Result<Tensor> {
        let mut f = frame.bilinear_resize(sh, sw)?;
        if flip {
            f = f.hflip();
        }
        f = color_jitter(&f, brightness, contrast, saturation);
        Ok(crop_pad_frame(&f, crop_h, crop_w, oy, ox))
    };
    let transform_mask = |mask: &SegmentationMask| -> Result<SegmentationMask> {
        let mut m = mask.nearest_resize(sh, sw)?;
        if flip {
            m = m.hflip();
        }
        Ok(crop_pad_mask(&m, crop_h, crop_w, oy, ox))
    };

    Ok(AugmentedSample {
        frame: transform_frame(sample.frame)?,
        mask: transform_mask(sample.mask)?,
        prev_frame: sample.prev_frame.map(transform_frame).transpose()?,
        prev_mask: sample.prev_mask.map(transform_mask).transpose()?,
    })
}

/// Spec-level augmentation of a single `(frame, mask)` pair.
pub fn augment(
    frame: &Tensor,
    mask: &SegmentationMask,
    crop_h: usize,
    crop_w: usize,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, SegmentationMask)> {
    let sample = Sample {
        frame,
        mask,
        prev_frame: None,
        prev_mask: None,
    };
    let out = augment_sample(&sample, crop_h, crop_w, cfg, rng)?;
    Ok((out.frame, out.mask))
}

fn color_jitter(frame: &Tensor, brightness: f64, contrast: f64, saturation: f64) -> Tensor {
    if brightness == 0.0 && contrast == 0.0 && saturation == 0.0 {
        return frame.clone();
    }
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    debug_assert_eq!(c, 3);
    let hw = h * w;
    let mean = frame.data().iter().sum::<f64>() / frame.numel() as f64;
    let mut out = frame.clone();
    for p in 0..hw {
        let (r, g, b) = (
            frame.data()[p],
            frame.data()[hw + p],
            frame.data()[2 * hw + p],
        );
        let gray = (r + g + b) / 3.0;
        for ch in 0..3 {
            let v = frame.data()[ch * hw + p];
            let sat = gray + (v - gray) * (1.0 + saturation);
            let con = mean + (sat - mean) * (1.0 + contrast);
            out.data_mut()[ch * hw + p] = (con + brightness).clamp(0.0, 1.0);
        }
    }
    out
}

fn crop_pad_frame(frame: &Tensor, crop_h: usize, crop_w: usize, oy: usize, ox: usize) -> Tensor {
    let (c, h, w) = (frame.shape()[0], frame.shape()[1], frame.shape()[2]);
    let mut out = Tensor::zeros(&[c, crop_h, crop_w]);
    for ch in 0..c {
        for y in 0..crop_h.min(h.saturating_sub(oy)) {
            for x in 0..crop_w.min(w.saturating_sub(ox)) {
                let v = frame.at3(ch, y + oy, x + ox);
                out.set3(ch, y, x, v);
            }
        }
    }
    out
}

fn crop_pad_mask(
    mask: &SegmentationMask,
    crop_h: usize,
    crop_w: usize,
    oy: usize,
    ox: usize,
) -> SegmentationMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = SegmentationMask::new(crop_h, crop_w, IGNORE_LABEL);
    for y in 0..crop_h.min(h.saturating_sub(oy)) {
        for x in 0..crop_w.min(w.saturating_sub(ox)) {
            out.set(y, x, mask.get(y + oy, x + ox));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean `−log p[gt]` over non-ignored pixels, probabilities clamped at
/// `1e-12`. All pixels ignored yields 0 with a logged warning.
pub fn cross_entropy_loss(probs: &ProbabilityMap, gt: &SegmentationMask) -> Result<f64> {
    let (k, h, w) = (probs.k(), probs.height(), probs.width());
    if gt.height() != h || gt.width() != w {
        return Err(Error::shape(format!(
            "cross_entropy: probs {h}×{w} vs gt {}×{}",
            gt.height(),
            gt.width()
        )));
    }
    let hw = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, &label) in gt.labels().iter().enumerate() {
        if label == IGNORE_LABEL {
            continue;
        }
        if label as usize >= k {
            return Err(Error::Input(format!(
                "cross_entropy: label {label} out of range for K={k}"
            )));
        }
        sum += -(probs.tensor().data()[label as usize * hw + p].max(1e-12)).ln();
        count += 1;
    }
    if count == 0 {
        log::warn!("cross_entropy: all pixels ignored, loss is 0");
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay (β₁=0.9, β₂=0.999, ε=1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(param_shapes: &[Vec<usize>], lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: param_shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore_moments(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step_count: u64) {
        self.m = m;
        self.v = v;
        self.step_count = step_count;
    }

    /// One update. `grads[i] = None` counts as a zero gradient; parameters
    /// with `trainable[i] == false` are left untouched entirely.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &[Option<Tensor>],
        trainable: &[bool],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len()
            || trainable.len() != params.len()
        {
            return Err(Error::shape(format!(
                "adamw: {} params, {} grads, {} states",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (i, (name, param)) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            if let Some(g) = &grads[i] {
                if g.shape() != param.shape() {
                    return Err(Error::shape(format!(
                        "adamw: gradient {:?} vs parameter {name} {:?}",
                        g.shape(),
                        param.shape()
                    )));
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..param.numel() {
                let g = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
                let p = &mut param.data_mut()[j];
                *p *= 1.0 - self.lr * self.weight_decay;
                let mj = &mut m.data_mut()[j];
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * g;
                let vj = &mut v.data_mut()[j];
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * g * g;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub memory_t: u64,
}

pub struct Trainer {
    pub model: Model,
    pub opt: AdamW,
    pub step_index: usize,
    pub total_steps: usize,
    pub cfg: TrainConfig,
    pub aug: AugmentationConfig,
    train_set: TrainSet,
}

impl Trainer {
    /// Build a trainer over the manifest's train split. A fresh decoder's
    /// feature memory (iteration counter 0) is initialized from one dataset
    /// pass with the current backbone.
    pub fn new(
        mut model: Model,
        manifest: &DatasetManifest,
        cfg: TrainConfig,
        aug: AugmentationConfig,
    ) -> Result<Trainer> {
        cfg.validate()?;
        aug.validate()?;
        if model.config.k != manifest.k {
            return Err(Error::Config(format!(
                "model K={} vs dataset K={}",
                model.config.k, manifest.k
            )));
        }
        let train_set = TrainSet::load(manifest)?;
        let steps_per_epoch = train_set.total_frames().div_ceil(cfg.batch_size);
        let total_steps = cfg.max_steps.unwrap_or(cfg.epochs * steps_per_epoch).max(1);
        if model.memory.as_ref().is_some_and(|m| m.t() == 0) {
            let memory = init_memory_from_set(&model, &train_set, cfg.seed)?;
            model.memory = Some(memory);
        }
        let shapes: Vec<Vec<usize>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let opt = AdamW::new(&shapes, cfg.lr, cfg.weight_decay);
        Ok(Trainer {
            model,
            opt,
            step_index: 0,
            total_steps,
            cfg,
            aug,
            train_set,
        })
    }

    pub fn train_set(&self) -> &TrainSet {
        &self.train_set
    }

    /// Run one optimization step; returns the batch loss.
    pub fn step(&mut self) -> Result<TrainLogRecord> {
        let mut rng = stream(self.cfg.seed, &format!("train/{}", self.step_index));
        let warmup = uses_gt_guidance(self.step_index, self.total_steps, self.cfg.warmup_fraction);
        let variant = self.model.config.variant;

        // assemble the batch before recording (immutable model borrow)
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let sample = sample_frame(&self.train_set, &mut rng);
            batch.push(augment_sample(
                &sample,
                self.cfg.crop_h,
                self.cfg.crop_w,
                &self.aug,
                &mut rng,
            )?);
        }

        let tape = Tape::new();
        let (vars, leaves) = self.model.lift(&tape, true);
        let mut total_loss: Option<Var<'_>> = None;
        let mut memory_items: Vec<(Tensor, SegmentationMask)> = Vec::new();
        for item in &batch {
            let guidance = self.training_guidance(item, warmup)?;
            let tmem = self.temporal_context(item)?;
            let frame = tape.constant(item.frame.clone());
            let art = forward_vars(&tape, &self.model, &vars, frame, guidance.as_ref(), tmem.as_ref())?;
            let labels = item.mask.labels();
            let mut loss = art.probs.nll_from_probs(labels, IGNORE_LABEL)?;
            if variant != Variant::Baseline && self.cfg.aux_weight > 0.0 {
                let aux = art
                    .first_pass_probs
                    .nll_from_probs(labels, IGNORE_LABEL)?
                    .scale(self.cfg.aux_weight);
                loss = loss.add(aux)?;
            }
            total_loss = Some(match total_loss {
                Some(acc) => acc.add(loss)?,
                None => loss,
            });
            if let Some(feature) = art.memory_feature {
                memory_items.push((feature.value(), item.mask.clone()));
            }
        }
        let loss = total_loss
            .expect("nonempty batch")
            .scale(1.0 / self.cfg.batch_size as f64);
        let loss_value = loss.value().data()[0];
        let grads = tape.backward(loss)?;
        let grad_list: Vec<Option<Tensor>> = leaves
            .iter()
            .map(|leaf| grads.get(*leaf).cloned())
            .collect();
        let trainable = self.model.param_trainability();
        let mut params = self.model.named_params_mut();
        self.opt.step(&mut params, &grad_list, &trainable)?;

        // Eq.-1 refresh: batch-averaged transform of this step's cached
        // features, consumed by the next step's forward passes.
        if let Some(memory) = self.model.memory.as_mut() {
            if !memory_items.is_empty() {
                let path = self.model.config.transform_path;
                let mut target: Option<Tensor> = None;
                for (feature, gt) in &memory_items {
                    let t = memory.transform(feature, gt, path)?;
                    target = Some(match target {
                        Some(acc) => acc.add(&t)?,
                        None => t,
                    });
                }
                let target = target
                    .expect("memory items nonempty")
                    .scale(1.0 / memory_items.len() as f64);
                memory.update_with_target(&target)?;
            }
        }

        self.step_index += 1;
        Ok(TrainLogRecord {
            step: self.step_index,
            loss: loss_value,
            lr: self.cfg.lr,
            memory_t: self.model.memory.as_ref().map_or(0, |m| m.t()),
        })
    }

    /// Guidance mask for one training sample (sanitized: padding pixels are
    /// treated as background so the gather stays in range).
    fn training_guidance(
        &self,
        item: &AugmentedSample,
        warmup: bool,
    ) -> Result<Option<GuidanceMask>> {
        if self.model.config.variant == Variant::Baseline {
            return Ok(None);
        }
        let (labels, source) = match self.model.config.variant {
            Variant::DecoderB => (item.mask.clone(), GuidanceSource::GroundTruth),
            _ => {
                if warmup || item.prev_mask.is_none() {
                    (item.mask.clone(), GuidanceSource::GroundTruth)
                } else {
                    match self.cfg.guidance_mode {
                        GuidanceMode::PrevFrameGroundTruth => (
                            item.prev_mask.clone().expect("prev mask present"),
                            GuidanceSource::PreviousFramePrediction,
                        ),
                        GuidanceMode::PrevFramePrediction => {
                            let prev = item.prev_frame.as_ref().expect("prev frame present");
                            let probs =
                                crate::pipeline::first_pass_forward(&self.model, prev)?;
                            (
                                crate::pipeline::argmax_mask(&probs),
                                GuidanceSource::PreviousFramePrediction,
                            )
                        }
                    }
                }
            }
        };
        let sanitized: Vec<u8> = labels
            .labels()
            .iter()
            .map(|&l| if l == IGNORE_LABEL { 0 } else { l })
            .collect();
        Ok(Some(GuidanceMask::new(
            SegmentationMask::from_labels(labels.height(), labels.width(), sanitized)?,
            source,
        )))
    }

    /// Decoder B trains with the previous frame's bottleneck features in its
    /// temporal buffer (computed without gradients, like at inference).
    fn temporal_context(&self, item: &AugmentedSample) -> Result<Option<TemporalMemory>> {
        if self.model.config.variant != Variant::DecoderB {
            return Ok(None);
        }
        let mut tmem = TemporalMemory::new(self.model.config.temporal_window);
        if let Some(prev) = &item.prev_frame {
            let feats = crate::encoder::encode(&self.model.encoder, prev)?;
            let bottleneck = crate::context::bottleneck(&self.model.head, &feats)?;
            tmem.push(bottleneck)?;
        }
        Ok(Some(tmem))
    }

    /// Serialize model, memory and optimizer state.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let mut container = self.model.to_container();
        container.meta["trainer"] = serde_json::json!({
            "step_index": self.step_index,
            "total_steps": self.total_steps,
            "opt_step": self.opt.step_count,
            "train_config": serde_json::to_value(&self.cfg).expect("config serializes"),
            "augment_config": serde_json::to_value(&self.aug).expect("config serializes"),
        });
        let names: Vec<String> = self
            .model
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let (m, v) = self.opt.moments();
        for (name, tensor) in names.iter().zip(m) {
            container.push(format!("opt.m.{name}"), tensor.clone());
        }
        for (name, tensor) in names.iter().zip(v) {
            container.push(format!("opt.v.{name}"), tensor.clone());
        }
        container.save(path)
    }

    /// Rebuild a trainer from a checkpoint, reproducing model, memory,
    /// optimizer moments and the step counter exactly.
    pub fn load_checkpoint(
        path: &std::path::Path,
        manifest: &DatasetManifest,
    ) -> Result<Trainer> {
        let container = Container::load(path)?;
        let model = Model::from_container(&container)?;
        let meta = &container.meta["trainer"];
        let cfg: TrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|e| Error::Manifest(format!("checkpoint train config: {e}")))?;
        let aug: AugmentationConfig = serde_json::from_value(meta["augment_config"].clone())
            .map_err(|e| Error::Manifest(format!("checkpoint augment config: {e}")))?;
        let step_index = meta["step_index"].as_u64().ok_or_else(|| {
            Error::Manifest("checkpoint missing trainer step index".into())
        })? as usize;
        let total_steps = meta["total_steps"]
            .as_u64()
            .ok_or_else(|| Error::Manifest("checkpoint missing total steps".into()))?
            as usize;
        let opt_step = meta["opt_step"]
            .as_u64()
            .ok_or_else(|| Error::Manifest("checkpoint missing optimizer step".into()))?;
        let names: Vec<String> = model
            .named_params()
            .iter()
            .map(|(n, _)| n.clone())
            .collect();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for name in &names {
            m.push(container.require(&format!("opt.m.{name}"))?.clone());
            v.push(container.require(&format!("opt.v.{name}"))?.clone());
        }
        let train_set = TrainSet::load(manifest)?;
        let shapes: Vec<Vec<usize>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let mut opt = AdamW::new(&shapes, cfg.lr, cfg.weight_decay);
        opt.restore_moments(m, v, opt_step);
        Ok(Trainer {
            model,
            opt,
            step_index,
            total_steps,
            cfg,
            aug,
            train_set,
        })
    }
}

/// One dataset pass through encoder + bottleneck seeding the memory rows.
pub fn init_memory_from_set(model: &Model, set: &TrainSet, seed: u64) -> Result<FeatureMemory> {
    let items = set.clips.iter().flat_map(|clip| {
        clip.frames.iter().zip(&clip.masks).map(|(frame, mask)| {
            let feats = crate::encoder::encode(&model.encoder, frame)?;
            let feature = match model.config.memory_source {
                crate::model::MemoryFeatureSource::Bottleneck => {
                    crate::context::bottleneck(&model.head, &feats)?
                }
                crate::model::MemoryFeatureSource::HeadOutput => {
                    crate::context::topdown_fuse(&model.head, &feats)?
                }
            };
            Ok((feature, mask.clone()))
        })
    });
    FeatureMemory::init_from_samples(
        model.config.k,
        model.config.embed_dim,
        model.config.momentum.clone(),
        items,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GenConfig;

    #[test]
    fn warmup_boundary() {
        // ⌊0.2·100⌋−1 = 19 uses GT, 20 does not
        assert!(uses_gt_guidance(19, 100, 0.2));
        assert!(!uses_gt_guidance(20, 100, 0.2));
        assert!(uses_gt_guidance(0, 1, 1.0));
        assert!(!uses_gt_guidance(0, 1, 0.0));
    }

    fn set_from(cfg: &GenConfig, seed: u64) -> TrainSet {
        let (clips, _) = crate::data::synthesize(seed, cfg).unwrap();
        let n_train = ((cfg.n_videos as f64) * cfg.train_fraction).round() as usize;
        TrainSet {
            clips: clips.into_iter().take(n_train).collect(),
            k: cfg.k,
        }
    }

    #[test]
    fn single_frame_set_always_samples_it() {
        let cfg = GenConfig {
            n_videos: 1,
            frames_per_video: 1,
            height: 32,
            width: 32,
            k: 3,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 1);
        let mut rng = stream(0, "sample");
        for _ in 0..10 {
            let s = sample_frame(&set, &mut rng);
            assert!(s.prev_mask.is_none());
            assert_eq!(s.mask, &set.clips[0].masks[0]);
        }
    }

    #[test]
    fn sampling_is_seeded_and_reproducible() {
        let cfg = GenConfig {
            n_videos: 3,
            frames_per_video: 4,
            height: 32,
            width: 32,
            k: 3,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 2);
        let draw = |seed: u64| -> Vec<*const Tensor> {
            let mut rng = stream(seed, "sample");
            (0..20)
                .map(|_| sample_frame(&set, &mut rng).frame as *const Tensor)
                .collect()
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5), draw(6));
    }

    #[test]
    fn sampling_is_uniform_within_three_sigma() {
        let cfg = GenConfig {
            n_videos: 3,
            frames_per_video: 4,
            height: 32,
            width: 32,
            k: 3,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 3);
        let cells = set.total_frames();
        let draws = 10_000usize;
        let mut counts = vec![0usize; cells];
        let mut rng = stream(11, "uniformity");
        for _ in 0..draws {
            // recover the flat index by pointer identity
            let s = sample_frame(&set, &mut rng);
            let mut flat = 0usize;
            'outer: for clip in &set.clips {
                for frame in &clip.frames {
                    if std::ptr::eq(frame, s.frame) {
                        break 'outer;
                    }
                    flat += 1;
                }
            }
            counts[flat] += 1;
        }
        let expected = draws as f64 / cells as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let df = (cells - 1) as f64;
        let bound = df + 3.0 * (2.0 * df).sqrt();
        assert!(chi2 <= bound, "chi² {chi2} over bound {bound}");
    }

    #[test]
    fn identity_augmentation_changes_nothing_up_to_crop() {
        let cfg = GenConfig {
            n_videos: 1,
            frames_per_video: 2,
            height: 32,
            width: 64,
            k: 3,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 4);
        let frame = &set.clips[0].frames[0];
        let mask = &set.clips[0].masks[0];
        let mut rng = stream(0, "aug-id");
        let (f, m) = augment(
            frame,
            mask,
            32,
            64,
            &AugmentationConfig::identity(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(f.data(), frame.data());
        assert_eq!(&m, mask);
        // crop smaller than the image: output is a sub-window
        let (f2, m2) = augment(
            frame,
            mask,
            32,
            32,
            &AugmentationConfig::identity(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(f2.shape(), &[3, 32, 32]);
        assert_eq!(m2.height(), 32);
    }

    #[test]
    fn augmentation_never_invents_labels() {
        let cfg = GenConfig {
            n_videos: 2,
            frames_per_video: 2,
            height: 32,
            width: 32,
            k: 4,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 5);
        let mut rng = stream(1, "aug-labels");
        for clip in &set.clips {
            for (frame, mask) in clip.frames.iter().zip(&clip.masks) {
                let mut allowed: Vec<u8> = mask.labels().to_vec();
                allowed.push(IGNORE_LABEL);
                let (_, m) = augment(frame, mask, 64, 64, &AugmentationConfig::default(), &mut rng)
                    .unwrap();
                assert!(m.labels().iter().all(|l| allowed.contains(l)));
            }
        }
    }

    #[test]
    fn flip_keeps_frame_and_mask_aligned() {
        let cfg = GenConfig {
            n_videos: 1,
            frames_per_video: 1,
            height: 32,
            width: 32,
            k: 3,
            train_fraction: 1.0,
            ..GenConfig::default()
        };
        let set = set_from(&cfg, 6);
        let frame = &set.clips[0].frames[0];
        let mask = &set.clips[0].masks[0];
        let aug = AugmentationConfig {
            scale_min: 1.0,
            scale_max: 1.0,
            hflip_prob: 1.0,
            color_jitter: 0.0,
        };
        let mut rng = stream(2, "aug-flip");
        let (f, m) = augment(frame, mask, 32, 32, &aug, &mut rng).unwrap();
        assert_eq!(f.data(), frame.hflip().data());
        assert_eq!(m, mask.hflip());
    }

    #[test]
    fn cross_entropy_reference_values() {
        // perfect one-hot prediction → ≈ 0
        let mut probs = Tensor::zeros(&[2, 1, 2]);
        probs.set3(0, 0, 0, 1.0);
        probs.set3(1, 0, 1, 1.0);
        let gt = SegmentationMask::from_labels(1, 2, vec![0, 1]).unwrap();
        let p = ProbabilityMap::new(probs).unwrap();
        assert!(cross_entropy_loss(&p, &gt).unwrap().abs() < 1e-12);

        // uniform prediction over K classes → ln K
        let k = 5usize;
        let uniform = ProbabilityMap::new(Tensor::full(&[k, 2, 2], 1.0 / k as f64)).unwrap();
        let gt = SegmentationMask::new(2, 2, 3);
        let loss = cross_entropy_loss(&uniform, &gt).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);

        // two-pixel hand case: −(ln 0.7 + ln 0.2)/2
        let probs = Tensor::from_vec(vec![2, 1, 2], vec![0.7, 0.8, 0.3, 0.2]).unwrap();
        let p = ProbabilityMap::new(probs).unwrap();
        let gt = SegmentationMask::from_labels(1, 2, vec![0, 1]).unwrap();
        let want = -(0.7f64.ln() + 0.2f64.ln()) / 2.0;
        assert!((cross_entropy_loss(&p, &gt).unwrap() - want).abs() <= 1e-9);

        // all ignored → 0
        let gt = SegmentationMask::new(1, 2, IGNORE_LABEL);
        assert_eq!(cross_entropy_loss(&p, &gt).unwrap(), 0.0);
    }

    #[test]
    fn adamw_zero_grad_cases() {
        let mut p = Tensor::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let mut opt = AdamW::new(&[vec![2]], 0.1, 0.0);
        let mut params = vec![("p".to_string(), &mut p)];
        opt.step(&mut params, &[None], &[true]).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]); // no decay, zero grad → unchanged

        let mut p = Tensor::from_vec(vec![1], vec![2.0]).unwrap();
        let mut opt = AdamW::new(&[vec![1]], 0.1, 0.5);
        let mut params = vec![("p".to_string(), &mut p)];
        opt.step(&mut params, &[None], &[true]).unwrap();
        // decoupled decay shrinks by (1 − lr·wd) exactly
        assert!((p.data()[0] - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_hand_rolled_scalar_trace() {
        let (lr, wd) = (0.01, 0.04);
        let grads = [0.5, -0.3, 0.2];
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&[vec![1]], lr, wd);
        // independent scalar reimplementation
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v, mut theta) = (0.0f64, 0.0f64, 1.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let mut params = vec![("p".to_string(), &mut p)];
            opt.step(&mut params, &[Some(Tensor::scalar(g))], &[true])
                .unwrap();

            theta *= 1.0 - lr * wd;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v / (1.0 - b2.powi(t as i32 + 1));
            theta -= lr * mhat / (vhat.sqrt() + eps);
            assert!(
                (p.data()[0] - theta).abs() <= 1e-10,
                "step {t}: {} vs {theta}",
                p.data()[0]
            );
        }
    }

    #[test]
    fn frozen_params_are_untouched() {
        let mut p = Tensor::scalar(1.0);
        let mut opt = AdamW::new(&[vec![1]], 0.1, 0.5);
        let mut params = vec![("p".to_string(), &mut p)];
        opt.step(&mut params, &[Some(Tensor::scalar(1.0))], &[false])
            .unwrap();
        assert_eq!(p.data()[0], 1.0);
    }
}
