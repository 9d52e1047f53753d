//! Forward kernels on [`Tensor`].
//!
//! Every model computation bottoms out in these functions; the autodiff layer
//! calls the same kernels for its forward pass so recorded and plain
//! execution are bit-identical.

use super::Tensor;
use crate::error::{Error, Result};

impl Tensor {
    /// Standard matrix product `[M×K] ⊗ [K×N] -> [M×N]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[1];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// `self ⊗ rhsᵀ` without materializing the transpose.
    pub fn matmul_transpose(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || rhs.rank() != 2 || self.shape[1] != rhs.shape[1] {
            return Err(Error::shape(format!(
                "matmul_transpose: {:?} vs {:?}ᵀ",
                self.shape, rhs.shape
            )));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let n = rhs.shape[0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!("transpose: rank-2 required, got {:?}", self.shape)));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::from_vec(vec![n, m], out)
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows: rank-2 required, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        Tensor::from_vec(vec![m, n], out)
    }

    /// Per-pixel softmax over the channel axis of a `C×H×W` tensor.
    pub fn softmax_channels(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "softmax_channels: rank-3 required, got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(self.data[ch * hw + p]);
            }
            let mut sum = 0.0;
            for ch in 0..c {
                let e = (self.data[ch * hw + p] - max).exp();
                out[ch * hw + p] = e;
                sum += e;
            }
            for ch in 0..c {
                out[ch * hw + p] /= sum;
            }
        }
        Tensor::from_vec(vec![c, h, w], out)
    }

    /// Per-pixel affine map: `1×1` convolution of a `Cin×H×W` tensor with a
    /// `Cout×Cin` weight matrix and a `Cout` bias.
    pub fn conv1x1(&self, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 3 || weight.rank() != 2 || bias.rank() != 1 {
            return Err(Error::shape(format!(
                "conv1x1: x {:?}, w {:?}, b {:?}",
                self.shape, weight.shape, bias.shape
            )));
        }
        let (cin, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (cout, wcin) = (weight.shape[0], weight.shape[1]);
        if wcin != cin || bias.shape[0] != cout {
            return Err(Error::shape(format!(
                "conv1x1: input has {cin} channels, weight is {:?}, bias {:?}",
                weight.shape, bias.shape
            )));
        }
        let hw = h * w;
        let mut out = vec![0.0; cout * hw];
        for oc in 0..cout {
            let dst = &mut out[oc * hw..(oc + 1) * hw];
            dst.fill(bias.data[oc]);
            for ic in 0..cin {
                let k = weight.data[oc * cin + ic];
                if k == 0.0 {
                    continue;
                }
                let src = &self.data[ic * hw..(ic + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += k * s;
                }
            }
        }
        Tensor::from_vec(vec![cout, h, w], out)
    }

    /// `3×3` cross-correlation with zero padding 1 and stride 1 or 2.
    /// Output spatial dims are `ceil(in/stride)`.
    pub fn conv3x3(&self, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!(
                "conv3x3: stride must be 1 or 2, got {stride}"
            )));
        }
        if self.rank() != 3 || weight.rank() != 4 || bias.rank() != 1 {
            return Err(Error::shape(format!(
                "conv3x3: x {:?}, w {:?}, b {:?}",
                self.shape, weight.shape, bias.shape
            )));
        }
        let (cin, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (cout, wcin, kh, kw) = (
            weight.shape[0],
            weight.shape[1],
            weight.shape[2],
            weight.shape[3],
        );
        if wcin != cin || kh != 3 || kw != 3 || bias.shape[0] != cout {
            return Err(Error::shape(format!(
                "conv3x3: input has {cin} channels, weight is {:?}, bias {:?}",
                weight.shape, bias.shape
            )));
        }
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        // interior columns where all three horizontal taps are in range
        let (lo, hi) = conv_interior(stride, w, ow);
        let mut out = vec![0.0; cout * oh * ow];
        for oc in 0..cout {
            out[oc * oh * ow..(oc + 1) * oh * ow].fill(bias.data[oc]);
            for ic in 0..cin {
                let plane = &self.data[ic * h * w..(ic + 1) * h * w];
                for ky in 0..3usize {
                    let wbase = ((oc * cin + ic) * 3 + ky) * 3;
                    let (w0, w1, w2) = (
                        weight.data[wbase],
                        weight.data[wbase + 1],
                        weight.data[wbase + 2],
                    );
                    if w0 == 0.0 && w1 == 0.0 && w2 == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (stride * oy + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out_row = &mut out[(oc * oh + oy) * ow..(oc * oh + oy + 1) * ow];
                        for (ox, o) in out_row[..lo].iter_mut().enumerate() {
                            *o += edge_taps(in_row, stride * ox, w, w0, w1, w2);
                        }
                        if stride == 1 {
                            let src = &in_row[lo - 1..];
                            for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                                *o += w0 * src[i] + w1 * src[i + 1] + w2 * src[i + 2];
                            }
                        } else {
                            for (i, o) in out_row[lo..hi].iter_mut().enumerate() {
                                let ix = stride * (lo + i) - 1;
                                *o += w0 * in_row[ix] + w1 * in_row[ix + 1] + w2 * in_row[ix + 2];
                            }
                        }
                        for (i, o) in out_row[hi..].iter_mut().enumerate() {
                            *o += edge_taps(in_row, stride * (hi + i), w, w0, w1, w2);
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![cout, oh, ow], out)
    }

    /// Bilinear resize of a `C×H×W` tensor (align-corners=false, edges clamped).
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "bilinear_resize: rank-3 required, got {:?}",
                self.shape
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize: zero target dims".into()));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        // Precompute per-axis neighbor indices and weights.
        let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let src = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
                    let i0f = src.floor();
                    let frac = src - i0f;
                    let i0 = (i0f as isize).clamp(0, n_in as isize - 1) as usize;
                    let i1 = ((i0f as isize) + 1).clamp(0, n_in as isize - 1) as usize;
                    (i0, i1, frac)
                })
                .collect()
        };
        let ys = axis(h, out_h);
        let xs = axis(w, out_w);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = plane[y0 * w + x0];
                    let v01 = plane[y0 * w + x1];
                    let v10 = plane[y1 * w + x0];
                    let v11 = plane[y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    dst[oy * out_w + ox] = top + fy * (bot - top);
                }
            }
        }
        Tensor::from_vec(vec![c, out_h, out_w], out)
    }

    /// Nearest-neighbor resize (top-left rule: `src = floor(dst·in/out)`).
    /// Output values are a subset of input values.
    pub fn nearest_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "nearest_resize: rank-3 required, got {:?}",
                self.shape
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("nearest_resize: zero target dims".into()));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for oy in 0..out_h {
                let sy = nearest_index(oy, out_h, h);
                for ox in 0..out_w {
                    let sx = nearest_index(ox, out_w, w);
                    dst[oy * out_w + ox] = plane[sy * w + sx];
                }
            }
        }
        Tensor::from_vec(vec![c, out_h, out_w], out)
    }

    /// Cosine similarity of each row of an `N×C` matrix against a `C` vector.
    /// A vector with norm below `1e-12` is treated as similarity 0.
    pub fn cosine_similarity(&self, b: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || b.rank() != 1 || self.shape[1] != b.shape[0] {
            return Err(Error::shape(format!(
                "cosine_similarity: {:?} vs {:?}",
                self.shape, b.shape
            )));
        }
        let n = self.shape[0];
        let bnorm = b.norm();
        let mut out = vec![0.0; n];
        if bnorm >= 1e-12 {
            for i in 0..n {
                let row = self.row(i);
                let rnorm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if rnorm >= 1e-12 {
                    let dot: f64 = row.iter().zip(&b.data).map(|(a, b)| a * b).sum();
                    out[i] = dot / (rnorm * bnorm);
                }
            }
        }
        Tensor::from_vec(vec![n], out)
    }

    /// Concatenate two `C×H×W` tensors along channels; `self` comes first.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 3
            || other.rank() != 3
            || self.shape[1..] != other.shape[1..]
        {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(
            vec![self.shape[0] + other.shape[0], self.shape[1], self.shape[2]],
            data,
        )
    }

    /// Flip the last axis. An involution: `hflip(hflip(x)) == x`.
    pub fn hflip(&self) -> Tensor {
        let w = *self.shape.last().expect("hflip on rank-0 tensor");
        let rows = self.data.len() / w;
        let mut out = Vec::with_capacity(self.data.len());
        for r in 0..rows {
            out.extend(self.data[r * w..(r + 1) * w].iter().rev());
        }
        Tensor {
            shape: self.shape.clone(),
            data: out,
        }
    }

    /// Adaptive average pooling of a `C×H×W` tensor to a `gh×gw` grid
    /// (bin `i` covers `[floor(i·n/g), ceil((i+1)·n/g))`).
    pub fn adaptive_avg_pool(&self, gh: usize, gw: usize) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "adaptive_avg_pool: rank-3 required, got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if gh == 0 || gw == 0 || gh > h || gw > w {
            return Err(Error::Config(format!(
                "adaptive_avg_pool: grid {gh}×{gw} invalid for input {h}×{w}"
            )));
        }
        let mut out = vec![0.0; c * gh * gw];
        for ch in 0..c {
            let plane = &self.data[ch * h * w..(ch + 1) * h * w];
            for gy in 0..gh {
                let (y0, y1) = pool_span(gy, gh, h);
                for gx in 0..gw {
                    let (x0, x1) = pool_span(gx, gw, w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += plane[y * w + x];
                        }
                    }
                    out[(ch * gh + gy) * gw + gx] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        Tensor::from_vec(vec![c, gh, gw], out)
    }

    /// Stack two rank-2 tensors vertically; `self`'s rows come first.
    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[1] {
            return Err(Error::shape(format!(
                "concat_rows: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(vec![self.shape[0] + other.shape[0], self.shape[1]], data)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    /// Rectified linear unit.
    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// View a `C×H×W` feature map as an `(HW)×C` matrix of pixel rows.
    pub fn chw_to_pixel_rows(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape(format!(
                "chw_to_pixel_rows: rank-3 required, got {:?}",
                self.shape
            )));
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let hw = h * w;
        let mut out = vec![0.0; hw * c];
        for ch in 0..c {
            let plane = &self.data[ch * hw..(ch + 1) * hw];
            for (p, &v) in plane.iter().enumerate() {
                out[p * c + ch] = v;
            }
        }
        Tensor::from_vec(vec![hw, c], out)
    }

    /// Inverse of [`chw_to_pixel_rows`](Tensor::chw_to_pixel_rows).
    pub fn pixel_rows_to_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        if self.rank() != 2 || self.shape[0] != h * w {
            return Err(Error::shape(format!(
                "pixel_rows_to_chw: {:?} does not match {h}×{w} pixels",
                self.shape
            )));
        }
        let c = self.shape[1];
        let hw = h * w;
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                out[ch * hw + p] = self.data[p * c + ch];
            }
        }
        Tensor::from_vec(vec![c, h, w], out)
    }
}

/// Source index for nearest-neighbor resize (top-left rule).
pub(crate) fn nearest_index(dst: usize, n_out: usize, n_in: usize) -> usize {
    ((dst * n_in) / n_out).min(n_in - 1)
}

/// Output-column range `[lo, hi)` whose three horizontal taps
/// `stride·ox − 1 + {0,1,2}` all land inside `[0, n_in)`.
pub(crate) fn conv_interior(stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = 1usize.min(n_out);
    let hi = if n_in >= 2 {
        (((n_in - 2) / stride) + 1).clamp(lo, n_out)
    } else {
        lo
    };
    (lo, hi)
}

/// Sum of the in-range horizontal taps at anchor `base = stride·ox`
/// (tap indices `base−1, base, base+1`).
#[inline]
pub(crate) fn edge_taps(row: &[f64], base: usize, n_in: usize, w0: f64, w1: f64, w2: f64) -> f64 {
    let mut acc = 0.0;
    if base >= 1 {
        acc += w0 * row[base - 1];
    }
    if base < n_in {
        acc += w1 * row[base];
    }
    if base + 1 < n_in {
        acc += w2 * row[base + 1];
    }
    acc
}

/// Half-open bin `[start, end)` for adaptive pooling.
pub(crate) fn pool_span(g: usize, grid: usize, n: usize) -> (usize, usize) {
    let start = g * n / grid;
    let end = ((g + 1) * n).div_ceil(grid);
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::eye(2);
        let b = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let a = t2(&[&[1.0, 0.0]]);
        let b = t2(&[&[0.0], &[5.0]]);
        assert_eq!(a.matmul(&b).unwrap(), t2(&[&[0.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::stream(3, "matmul-oracle");
        use rand::Rng;
        let a = Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::from_vec(vec![4, 2], (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let got = a.matmul(&b).unwrap();
        let mut want = Tensor::zeros(&[3, 2]);
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at2(i, k) * b.at2(k, j);
                }
                want.set2(i, j, acc);
            }
        }
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "got: {msg}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let s = t2(&[&[0.0, 0.0]]).softmax_rows().unwrap();
        assert!((s.at2(0, 0) - 0.5).abs() < 1e-12);
        let big = t2(&[&[1000.0, 0.0]]).softmax_rows().unwrap();
        assert!(big.is_finite());
        assert!(big.at2(0, 0) > 1.0 - 1e-9);
        assert!(big.at2(0, 1) < 1e-9);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = crate::rng::stream(5, "softmax");
        use rand::Rng;
        let x = Tensor::from_vec(vec![5, 7], (0..35).map(|_| rng.random_range(-4.0..4.0)).collect()).unwrap();
        let s = x.softmax_rows().unwrap();
        for i in 0..5 {
            let sum: f64 = s.row(i).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn conv1x1_identity_and_affine() {
        let x = Tensor::from_vec(vec![2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        let id = Tensor::eye(2);
        let b0 = Tensor::zeros(&[2]);
        assert_eq!(x.conv1x1(&id, &b0).unwrap(), x);

        let ones = Tensor::full(&[1, 2, 2], 1.0);
        let w = t2(&[&[3.0]]);
        let b = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let y = ones.conv1x1(&w, &b).unwrap();
        assert!(y.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }

    #[test]
    fn conv1x1_matches_per_pixel_matmul_oracle() {
        let mut rng = crate::rng::stream(11, "conv1x1-oracle");
        use rand::Rng;
        let x = Tensor::from_vec(vec![3, 2, 4], (0..24).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::from_vec(vec![5, 3], (0..15).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::from_vec(vec![5], (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let got = x.conv1x1(&w, &b).unwrap();
        for y in 0..2 {
            for xx in 0..4 {
                for oc in 0..5 {
                    let mut acc = b.data()[oc];
                    for ic in 0..3 {
                        acc += w.at2(oc, ic) * x.at3(ic, y, xx);
                    }
                    assert!((got.at3(oc, y, xx) - acc).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn conv3x3_delta_kernel_is_identity() {
        let mut rng = crate::rng::stream(2, "conv3x3-delta");
        use rand::Rng;
        let x = Tensor::from_vec(vec![2, 4, 4], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut w = Tensor::zeros(&[2, 2, 3, 3]);
        // delta on the matching channel
        for c in 0..2 {
            w.data_mut()[((c * 2 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let y = x.conv3x3(&w, &Tensor::zeros(&[2]), 1).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() <= 1e-15);
    }

    #[test]
    fn conv3x3_padding_counts() {
        // all-ones kernel over all-ones 1×3×3: center sees 9 taps, corners 4
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = x.conv3x3(&w, &Tensor::zeros(&[1]), 1).unwrap();
        assert_eq!(y.at3(0, 1, 1), 9.0);
        assert_eq!(y.at3(0, 0, 0), 4.0);
        assert_eq!(y.at3(0, 0, 2), 4.0);
        assert_eq!(y.at3(0, 0, 1), 6.0);
    }

    #[test]
    fn conv3x3_stride2_shape() {
        let x = Tensor::zeros(&[1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let y = x.conv3x3(&w, &Tensor::zeros(&[1]), 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
    }

    #[test]
    fn conv3x3_bad_stride_is_config_error() {
        let x = Tensor::zeros(&[1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            x.conv3x3(&w, &Tensor::zeros(&[1]), 3),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let mut rng = crate::rng::stream(4, "bilinear-id");
        use rand::Rng;
        let x = Tensor::from_vec(vec![1, 3, 3], (0..9).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        assert_eq!(x.bilinear_resize(3, 3).unwrap(), x);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let x = Tensor::full(&[2, 3, 5], 7.0);
        for (oh, ow) in [(1, 1), (2, 9), (7, 3), (10, 10)] {
            let y = x.bilinear_resize(oh, ow).unwrap();
            assert!(y.data().iter().all(|&v| (v - 7.0).abs() < 1e-12));
        }
    }

    #[test]
    fn bilinear_2x_upsample_hand_weights() {
        // src coords for out=4, in=2: (o+0.5)/2-0.5 → -0.25, 0.25, 0.75, 1.25
        // with edge clamping: [0, 0.25·2, 0.75·2, 2] = [0, 0.5, 1.5, 2]
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
        let y = x.bilinear_resize(1, 4).unwrap();
        let want = [0.0, 0.5, 1.5, 2.0];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn bilinear_zero_dims_config_error() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            x.bilinear_resize(0, 2),
            Err(crate::error::Error::Config(_))
        ));
    }

    #[test]
    fn nearest_preserves_values() {
        let x = Tensor::from_vec(vec![1, 2, 2], vec![0.0, 3.0, 3.0, 0.0]).unwrap();
        let y = x.nearest_resize(5, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 3.0));
        assert_eq!(x.nearest_resize(2, 2).unwrap(), x);
    }

    #[test]
    fn nearest_checkerboard_top_left_rule() {
        // 4×4 checkerboard downsampled 2×: index map dst→src is 2·dst
        let mut x = Tensor::zeros(&[1, 4, 4]);
        for y in 0..4 {
            for xx in 0..4 {
                x.set3(0, y, xx, ((y + xx) % 2) as f64);
            }
        }
        let y = x.nearest_resize(2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                assert_eq!(y.at3(0, oy, ox), x.at3(0, 2 * oy, 2 * ox));
            }
        }
    }

    #[test]
    fn cosine_similarity_cases() {
        let a = t2(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0], &[0.0, 0.0]]);
        let b = Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap();
        let s = a.cosine_similarity(&b).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12); // parallel
        assert!(s.data()[1].abs() < 1e-12); // orthogonal
        assert!((s.data()[2] - 1.0).abs() < 1e-12); // scale invariant
        assert_eq!(s.data()[3], 0.0); // zero-norm row → 0
        let zb = Tensor::zeros(&[2]);
        let s0 = a.cosine_similarity(&zb).unwrap();
        assert!(s0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_layout() {
        let a = Tensor::from_vec(vec![2, 4, 4], (0..32).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::from_vec(vec![3, 4, 4], (0..48).map(|v| -(v as f64)).collect()).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[5, 4, 4]);
        assert_eq!(c.at3(0, 1, 2), a.at3(0, 1, 2));
        assert_eq!(c.at3(2, 3, 3), b.at3(0, 3, 3));
        assert!(a.concat_channels(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    #[test]
    fn hflip_cases() {
        let x = t2(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(x.hflip(), t2(&[&[3.0, 2.0, 1.0]]));
        assert_eq!(x.hflip().hflip(), x);
        let sym = t2(&[&[1.0, 2.0, 1.0]]);
        assert_eq!(sym.hflip(), sym);
    }

    #[test]
    fn adaptive_pool_global_is_mean() {
        let x = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = x.adaptive_avg_pool(1, 1).unwrap();
        assert!((y.data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pixel_rows_round_trip() {
        let mut rng = crate::rng::stream(9, "pixel-rows");
        use rand::Rng;
        let x = Tensor::from_vec(vec![3, 2, 5], (0..30).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let rows = x.chw_to_pixel_rows().unwrap();
        assert_eq!(rows.shape(), &[10, 3]);
        assert_eq!(rows.at2(7, 1), x.at3(1, 1, 2));
        let back = rows.pixel_rows_to_chw(2, 5).unwrap();
        assert_eq!(back, x);
    }
}
