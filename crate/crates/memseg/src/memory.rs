//! Dataset-level feature memory.
//!
//! A `K×C` matrix holding one embedding per class, shared across the whole
//! dataset. During training it is blended toward a per-image summary by a
//! moving average; at inference its rows are gathered per pixel according to
//! a guidance mask. The per-image summary weighs each pixel of a class by how
//! *dissimilar* it is to the stored row, so hard pixels dominate the update.
//!
//! The memory never participates in gradient computation: its rows enter
//! forward passes as constants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SegmentationMask, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Momentum value used at iteration `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum MomentumMode {
    Constant,
    /// `m0·(1−t/total_steps)^power`, clamped at 0 beyond `total_steps`.
    Poly { power: f64, total_steps: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub m0: f64,
    #[serde(flatten)]
    pub mode: MomentumMode,
}

impl Default for MomentumSchedule {
    fn default() -> Self {
        MomentumSchedule {
            m0: 0.1,
            mode: MomentumMode::Constant,
        }
    }
}

impl MomentumSchedule {
    pub fn constant(m0: f64) -> MomentumSchedule {
        MomentumSchedule {
            m0,
            mode: MomentumMode::Constant,
        }
    }

    pub fn at(&self, t: u64) -> f64 {
        match self.mode {
            MomentumMode::Constant => self.m0,
            MomentumMode::Poly { power, total_steps } => {
                if total_steps == 0 || t >= total_steps {
                    0.0
                } else {
                    self.m0 * (1.0 - t as f64 / total_steps as f64).powf(power)
                }
            }
        }
    }
}

/// Which tensor pairs up with the ground-truth grid inside the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformPath {
    /// Bilinearly upsample features to the label grid (default).
    UpsampleFeatures,
    /// Nearest-downsample labels to the feature grid (fast mode).
    DownsampleLabels,
}

/// The `K×C` class-representation matrix with its update schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMemory {
    matrix: Tensor,
    schedule: MomentumSchedule,
    t: u64,
}

impl FeatureMemory {
    pub fn new(k: usize, c: usize, schedule: MomentumSchedule) -> FeatureMemory {
        FeatureMemory {
            matrix: Tensor::zeros(&[k, c]),
            schedule,
            t: 0,
        }
    }

    pub fn from_matrix(matrix: Tensor, schedule: MomentumSchedule, t: u64) -> Result<FeatureMemory> {
        if matrix.rank() != 2 {
            return Err(Error::shape(format!(
                "feature memory must be K×C, got {:?}",
                matrix.shape()
            )));
        }
        Ok(FeatureMemory {
            matrix,
            schedule,
            t,
        })
    }

    pub fn k(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn c(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn schedule(&self) -> &MomentumSchedule {
        &self.schedule
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, class: usize) -> &[f64] {
        self.matrix.row(class)
    }

    /// Seed the memory with one pixel embedding per class, drawn uniformly
    /// over a single pass of `(stride-8 features, full-res labels)` items.
    /// Classes never observed fall back to uniform `[-0.1, 0.1]` noise.
    pub fn init_from_samples(
        k: usize,
        c: usize,
        schedule: MomentumSchedule,
        items: impl Iterator<Item = Result<(Tensor, SegmentationMask)>>,
        seed: u64,
    ) -> Result<FeatureMemory> {
        let mut rng = stream(seed, "memory-init");
        let mut matrix = Tensor::zeros(&[k, c]);
        let mut seen = vec![0u64; k];
        for item in items {
            let (feat, gt) = item?;
            if feat.rank() != 3 || feat.shape()[0] != c {
                return Err(Error::shape(format!(
                    "memory init: {c}×h×w feature required, got {:?}",
                    feat.shape()
                )));
            }
            let (h, w) = (feat.shape()[1], feat.shape()[2]);
            let small = gt.nearest_resize(h, w)?;
            for (p, &label) in small.labels().iter().enumerate() {
                if label == IGNORE_LABEL {
                    continue;
                }
                let class = label as usize;
                if class >= k {
                    return Err(Error::Input(format!(
                        "memory init: label {class} out of range for K={k}"
                    )));
                }
                seen[class] += 1;
                // reservoir sampling: keep each candidate with prob 1/count
                if rng.random_range(0..seen[class]) == 0 {
                    let (y, x) = (p / w, p % w);
                    for ch in 0..c {
                        matrix.set2(class, ch, feat.at3(ch, y, x));
                    }
                }
            }
        }
        for (class, &count) in seen.iter().enumerate() {
            if count == 0 {
                log::warn!(
                    "memory init: class {class} never observed, using random fallback row"
                );
                let mut fallback = stream(seed, &format!("memory-init/fallback/{class}"));
                for ch in 0..c {
                    matrix.set2(class, ch, fallback.random_range(-0.1..0.1));
                }
            }
        }
        Ok(FeatureMemory {
            matrix,
            schedule,
            t: 0,
        })
    }

    /// Per-image class summary: a `K×C` matrix initialized from the memory,
    /// where each class present in `gt` is replaced by a dissimilarity-
    /// weighted average of its pixel embeddings.
    ///
    /// Pixels of class `k` get weight `(1−sᵢ)/Σⱼ(1−sⱼ)` where `sᵢ` is the
    /// cosine similarity to the stored row; if every pixel is fully similar
    /// (zero denominator) the uniform average is used instead. Ignore-label
    /// pixels are excluded; classes absent from `gt` keep the memory row.
    pub fn transform(
        &self,
        features: &Tensor,
        gt: &SegmentationMask,
        path: TransformPath,
    ) -> Result<Tensor> {
        if features.rank() != 3 || features.shape()[0] != self.c() {
            return Err(Error::shape(format!(
                "transform: {}×h×w features required, got {:?}",
                self.c(),
                features.shape()
            )));
        }
        let k = self.k();
        // Pair pixels with labels on a common grid.
        let (rows, labels): (Tensor, Vec<u8>) = match path {
            TransformPath::UpsampleFeatures => {
                let up = features.bilinear_resize(gt.height(), gt.width())?;
                (up.chw_to_pixel_rows()?, gt.labels().to_vec())
            }
            TransformPath::DownsampleLabels => {
                let (h, w) = (features.shape()[1], features.shape()[2]);
                let small = gt.nearest_resize(h, w)?;
                (features.chw_to_pixel_rows()?, small.labels().to_vec())
            }
        };
        let c = self.c();
        let mut result = self.matrix.clone();
        let mut index_of_class: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &label) in labels.iter().enumerate() {
            if label == IGNORE_LABEL {
                continue;
            }
            let class = label as usize;
            if class >= k {
                return Err(Error::Input(format!(
                    "transform: label {class} out of range for K={k}"
                )));
            }
            index_of_class[class].push(i);
        }
        for (class, indices) in index_of_class.iter().enumerate() {
            if indices.is_empty() {
                continue;
            }
            let mut reps = Tensor::zeros(&[indices.len(), c]);
            for (ri, &pi) in indices.iter().enumerate() {
                for ch in 0..c {
                    reps.set2(ri, ch, rows.at2(pi, ch));
                }
            }
            let target = Tensor::from_vec(vec![c], self.matrix.row(class).to_vec())?;
            let sims = reps.cosine_similarity(&target)?;
            let denom: f64 = sims.data().iter().map(|s| 1.0 - s).sum();
            let n = indices.len() as f64;
            for ch in 0..c {
                let mut acc = 0.0;
                for (ri, &s) in sims.data().iter().enumerate() {
                    let weight = if denom > 1e-12 {
                        (1.0 - s) / denom
                    } else {
                        1.0 / n
                    };
                    acc += weight * reps.at2(ri, ch);
                }
                result.set2(class, ch, acc);
            }
        }
        Ok(result)
    }

    /// Moving-average blend toward `target` (a `K×C` matrix, usually a
    /// [`transform`](FeatureMemory::transform) output): with momentum `m` at
    /// the current iteration, `M ← (1−m)·M + m·target`; the iteration counter
    /// advances exactly once.
    pub fn update_with_target(&mut self, target: &Tensor) -> Result<()> {
        self.matrix.check_same_shape(target, "memory update")?;
        let m = self.schedule.at(self.t);
        for (cur, &tv) in self.matrix.data_mut().iter_mut().zip(target.data()) {
            *cur = (1.0 - m) * *cur + m * tv;
        }
        self.t += 1;
        Ok(())
    }

    /// Transform the previous iteration's features and blend them in.
    pub fn update(
        &mut self,
        prev_features: &Tensor,
        prev_gt: &SegmentationMask,
        path: TransformPath,
    ) -> Result<()> {
        let target = self.transform(prev_features, prev_gt, path)?;
        self.update_with_target(&target)
    }

    /// Per-pixel memory lookup: downsample the guidance mask to `h×w` and
    /// emit the stored row of each pixel's class.
    pub fn gather(&self, guidance: &SegmentationMask, h: usize, w: usize) -> Result<Tensor> {
        let small = guidance.nearest_resize(h, w)?;
        let (k, c) = (self.k(), self.c());
        let mut out = Tensor::zeros(&[c, h, w]);
        let hw = h * w;
        for (p, &label) in small.labels().iter().enumerate() {
            let class = label as usize;
            if label == IGNORE_LABEL || class >= k {
                return Err(Error::Input(format!(
                    "gather: label {label} out of range for K={k}"
                )));
            }
            let row = self.matrix.row(class);
            for ch in 0..c {
                out.data_mut()[ch * hw + p] = row[ch];
            }
        }
        Ok(out)
    }
}
