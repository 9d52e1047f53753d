//! Synthetic video dataset, PNM image IO and the dataset manifest.
//!
//! Videos are sequences of `3×H×W` frames in `[0,1]` with per-pixel label
//! masks. The synthetic generator places `K−1` colored shapes (rectangles and
//! disks) on a dark background; each shape translates with a constant
//! per-video velocity and wraps at the borders, so frame `t`'s centers are
//! `center₀ + t·velocity (mod dims)` in closed form. Frames are stored as
//! binary PPM (P6), masks as binary PGM (P5), and the dataset layout is
//! described by a versioned JSON manifest.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

/// Label excluded from loss and metrics.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class labels, values in `[0,K) ∪ {255}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, fill: u8) -> SegmentationMask {
        SegmentationMask {
            height,
            width,
            labels: vec![fill; height * width],
        }
    }

    pub fn from_labels(height: usize, width: usize, labels: Vec<u8>) -> Result<SegmentationMask> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "mask: {} labels for {height}×{width}",
                labels.len()
            )));
        }
        Ok(SegmentationMask {
            height,
            width,
            labels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Highest non-ignore label present, if any.
    pub fn max_label(&self) -> Option<u8> {
        self.labels
            .iter()
            .filter(|&&l| l != IGNORE_LABEL)
            .max()
            .copied()
    }

    /// Nearest-neighbor resize (top-left rule); never invents labels.
    pub fn nearest_resize(&self, out_h: usize, out_w: usize) -> Result<SegmentationMask> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("mask resize: zero target dims".into()));
        }
        let mut labels = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = crate::tensor::nearest_index(oy, out_h, self.height);
            for ox in 0..out_w {
                let sx = crate::tensor::nearest_index(ox, out_w, self.width);
                labels.push(self.labels[sy * self.width + sx]);
            }
        }
        SegmentationMask::from_labels(out_h, out_w, labels)
    }

    pub fn hflip(&self) -> SegmentationMask {
        let mut labels = Vec::with_capacity(self.labels.len());
        for row in self.labels.chunks(self.width) {
            labels.extend(row.iter().rev());
        }
        SegmentationMask {
            height: self.height,
            width: self.width,
            labels,
        }
    }

    /// Pixels whose labels differ (dims must match).
    pub fn disagreement(&self, other: &SegmentationMask) -> Result<usize> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::shape(format!(
                "mask disagreement: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a != b)
            .count())
    }
}

/// Ordered frames plus ground-truth masks for one video.
#[derive(Debug, Clone)]
pub struct VideoClip {
    pub id: String,
    pub frames: Vec<Tensor>,
    pub masks: Vec<SegmentationMask>,
}

impl VideoClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
    pub split: Split,
}

/// On-disk dataset description. `root` is the directory holding
/// `manifest.json` and `videos/`.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub k: usize,
    pub videos: Vec<VideoEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    version: u32,
    k: usize,
    ignore_label: u8,
    videos: Vec<VideoEntry>,
}

const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.json")
    }

    pub fn video_dir(&self, id: &str) -> PathBuf {
        self.root.join("videos").join(id)
    }

    pub fn save(&self) -> Result<()> {
        let path = Self::manifest_path(&self.root);
        let file = ManifestFile {
            version: MANIFEST_VERSION,
            k: self.k,
            ignore_label: IGNORE_LABEL,
            videos: self.videos.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(root: &Path) -> Result<DatasetManifest> {
        let path = Self::manifest_path(root);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        // Surface version mismatches explicitly before strict field parsing.
        let loose: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: not valid JSON: {e}", path.display())))?;
        match loose.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == MANIFEST_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Manifest(format!(
                    "unsupported manifest version {v} (expected {MANIFEST_VERSION})"
                )))
            }
            None => return Err(Error::Manifest("manifest has no version field".into())),
        }
        let file: ManifestFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        if file.k < 2 {
            return Err(Error::Manifest(format!("manifest k={} is below 2", file.k)));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            k: file.k,
            videos: file.videos,
        })
    }

    pub fn split_videos(&self, split: Split) -> Vec<&VideoEntry> {
        self.videos.iter().filter(|v| v.split == split).collect()
    }
}

// ---------------------------------------------------------------------------
// PNM IO
// ---------------------------------------------------------------------------

fn write_pnm_header(w: &mut impl Write, magic: &str, width: usize, height: usize) -> std::io::Result<()> {
    write!(w, "{magic}\n{width} {height}\n255\n")
}

/// Skip whitespace and `#` comments, then parse an ASCII integer.
fn read_pnm_int(r: &mut impl Read, path: &Path) -> Result<usize> {
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    // find first digit
    let first = loop {
        r.read_exact(&mut byte)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let b = byte[0];
        if in_comment {
            if b == b'\n' {
                in_comment = false;
            }
        } else if b == b'#' {
            in_comment = true;
        } else if b.is_ascii_digit() {
            break b;
        } else if !b.is_ascii_whitespace() {
            return Err(Error::format(path, format!("unexpected byte {b:#04x} in header")));
        }
    };
    let mut value = (first - b'0') as usize;
    loop {
        match r.read_exact(&mut byte) {
            Ok(()) if byte[0].is_ascii_digit() => {
                value = value
                    .checked_mul(10)
                    .and_then(|v| v.checked_add((byte[0] - b'0') as usize))
                    .ok_or_else(|| Error::format(path, "header value overflow"))?;
            }
            Ok(()) if byte[0].is_ascii_whitespace() => break,
            Ok(()) => return Err(Error::format(path, "malformed header value")),
            Err(_) => return Err(Error::format(path, "truncated header")),
        }
    }
    Ok(value)
}

fn read_pnm(path: &Path, magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut tag = [0u8; 2];
    r.read_exact(&mut tag)
        .map_err(|_| Error::format(path, "truncated magic"))?;
    if tag != magic.as_bytes()[..2] {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {magic}", String::from_utf8_lossy(&tag)),
        ));
    }
    let width = read_pnm_int(&mut r, path)?;
    let height = read_pnm_int(&mut r, path)?;
    let maxval = read_pnm_int(&mut r, path)?;
    if maxval != 255 {
        return Err(Error::format(path, format!("unsupported maxval {maxval}")));
    }
    let channels = if magic == "P6" { 3 } else { 1 };
    let mut data = vec![0u8; width * height * channels];
    r.read_exact(&mut data)
        .map_err(|_| Error::format(path, "truncated pixel data"))?;
    Ok((width, height, data))
}

/// Save a `3×H×W` frame in `[0,1]` as binary PPM.
pub fn save_frame_ppm(frame: &Tensor, path: &Path) -> Result<()> {
    if frame.rank() != 3 || frame.shape()[0] != 3 {
        return Err(Error::shape(format!(
            "save_frame_ppm: 3×H×W required, got {:?}",
            frame.shape()
        )));
    }
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_pnm_header(&mut out, "P6", w, h).map_err(|e| Error::io(path, e))?;
    let hw = h * w;
    let mut buf = Vec::with_capacity(hw * 3);
    for p in 0..hw {
        for c in 0..3 {
            let v = (frame.data()[c * hw + p] * 255.0).round().clamp(0.0, 255.0);
            buf.push(v as u8);
        }
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Load a binary PPM into a `3×H×W` tensor in `[0,1]`.
pub fn load_frame_ppm(path: &Path) -> Result<Tensor> {
    let (w, h, data) = read_pnm(path, "P6")?;
    let hw = h * w;
    let mut out = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            out[c * hw + p] = data[p * 3 + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// Save a mask as binary PGM (labels written verbatim).
pub fn save_mask_pgm(mask: &SegmentationMask, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_pnm_header(&mut out, "P5", mask.width, mask.height).map_err(|e| Error::io(path, e))?;
    out.write_all(&mask.labels).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_mask_pgm(path: &Path) -> Result<SegmentationMask> {
    let (w, h, data) = read_pnm(path, "P5")?;
    SegmentationMask::from_labels(h, w, data)
}

fn frame_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("frame_{t:04}.ppm"))
}

fn mask_path(dir: &Path, t: usize) -> PathBuf {
    dir.join(format!("mask_{t:04}.pgm"))
}

/// Write a clip's frames and masks under the manifest's layout.
pub fn save_clip(manifest: &DatasetManifest, clip: &VideoClip) -> Result<()> {
    let dir = manifest.video_dir(&clip.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (t, (frame, mask)) in clip.frames.iter().zip(&clip.masks).enumerate() {
        save_frame_ppm(frame, &frame_path(&dir, t))?;
        save_mask_pgm(mask, &mask_path(&dir, t))?;
    }
    Ok(())
}

/// Load a clip by id, validating mask labels against the manifest's K.
pub fn load_clip(manifest: &DatasetManifest, id: &str) -> Result<VideoClip> {
    let entry = manifest
        .videos
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::Manifest(format!("video {id} not in manifest")))?;
    let dir = manifest.video_dir(id);
    let mut frames = Vec::with_capacity(entry.frames);
    let mut masks = Vec::with_capacity(entry.frames);
    for t in 0..entry.frames {
        let frame = load_frame_ppm(&frame_path(&dir, t))?;
        let mask = load_mask_pgm(&mask_path(&dir, t))?;
        if frame.shape()[1] != mask.height() || frame.shape()[2] != mask.width() {
            return Err(Error::Manifest(format!(
                "video {id} frame {t}: image {:?} vs mask {}×{}",
                frame.shape(),
                mask.height(),
                mask.width()
            )));
        }
        if let Some(max) = mask.max_label() {
            if max as usize >= manifest.k {
                return Err(Error::Manifest(format!(
                    "video {id} frame {t}: label {max} exceeds K={}",
                    manifest.k
                )));
            }
        }
        frames.push(frame);
        masks.push(mask);
    }
    Ok(VideoClip {
        id: id.to_string(),
        frames,
        masks,
    })
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Synthetic dataset parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub height: usize,
    pub width: usize,
    pub k: usize,
    /// Leading fraction of videos tagged `train`; the rest are `val`.
    pub train_fraction: f64,
    /// Max per-video color shift applied to each class's base color (u8 steps).
    pub color_jitter: u8,
    /// Max per-pixel noise amplitude (u8 steps).
    pub noise: u8,
    /// Probability that a frame is degraded (sensor flicker): chroma mostly
    /// collapses toward gray, with extra noise and a global brightness
    /// shift. Labels stay exact, so such frames are only solvable from
    /// temporal context.
    pub flicker_prob: f64,
    /// Degradation strength in u8 steps (noise amplitude and max shift).
    pub flicker_strength: u8,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_videos: 50,
            frames_per_video: 8,
            height: 64,
            width: 64,
            k: 5,
            train_fraction: 0.8,
            color_jitter: 12,
            noise: 8,
            flicker_prob: 0.2,
            flicker_strength: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect { half_w: usize, half_h: usize },
    Disk { radius: usize },
}

/// One moving shape; `center(t) = center0 + t·velocity (mod dims)`.
#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub class: u8,
    pub kind: ShapeKind,
    pub color: [u8; 3],
    pub center0: (i64, i64),
    pub velocity: (i64, i64),
}

impl ShapeSpec {
    pub fn center_at(&self, t: usize, width: usize, height: usize) -> (i64, i64) {
        (
            (self.center0.0 + t as i64 * self.velocity.0).rem_euclid(width as i64),
            (self.center0.1 + t as i64 * self.velocity.1).rem_euclid(height as i64),
        )
    }
}

/// Per-video shape layout, exposed for inspection and test oracles.
#[derive(Debug, Clone)]
pub struct VideoSpec {
    pub id: String,
    pub background: [u8; 3],
    pub shapes: Vec<ShapeSpec>,
}

/// Evenly spaced base colors with deliberately close pairs, so appearance
/// alone does not fully determine the class.
fn palette(k: usize) -> Vec<[u8; 3]> {
    let mut colors = vec![[30u8, 30, 35]]; // background
    let classes = k - 1;
    for i in 0..classes {
        // pair classes 2i+1 and 2i+2 onto neighboring hues
        let pair = i / 2;
        let within = i % 2;
        let n_pairs = classes.div_ceil(2);
        let hue = pair as f64 / n_pairs as f64 * 360.0 + within as f64 * 24.0;
        colors.push(hsv_to_rgb(hue % 360.0, 0.72, 0.82));
    }
    colors
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

fn validate_gen_config(cfg: &GenConfig) -> Result<(usize, usize)> {
    if cfg.k < 2 {
        return Err(Error::Config(format!("k must be ≥ 2, got {}", cfg.k)));
    }
    if cfg.k > 254 {
        return Err(Error::Config(format!("k must be ≤ 254, got {}", cfg.k)));
    }
    if cfg.n_videos == 0 || cfg.frames_per_video == 0 {
        return Err(Error::Config("need at least one video and one frame".into()));
    }
    if cfg.height % 32 != 0 || cfg.width % 32 != 0 {
        return Err(Error::Config(format!(
            "frame dims must be divisible by 32, got {}×{}",
            cfg.height, cfg.width
        )));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config("train_fraction must lie in [0,1]".into()));
    }
    let side = cfg.height.min(cfg.width);
    let min_half = (side / 10).max(2);
    let max_half = (side * 7 / 32).max(min_half);
    if 2 * max_half + 1 > side {
        return Err(Error::Config(format!(
            "shapes of half-extent {max_half} cannot fit in {}×{}",
            cfg.height, cfg.width
        )));
    }
    Ok((min_half, max_half))
}

fn draw_video(
    spec: &VideoSpec,
    cfg: &GenConfig,
    seed: u64,
) -> (Vec<Tensor>, Vec<SegmentationMask>) {
    let (h, w) = (cfg.height, cfg.width);
    let hw = h * w;
    let mut frames = Vec::with_capacity(cfg.frames_per_video);
    let mut masks = Vec::with_capacity(cfg.frames_per_video);
    for t in 0..cfg.frames_per_video {
        let mut rgb = vec![[0u8; 3]; hw];
        for px in rgb.iter_mut() {
            *px = spec.background;
        }
        let mut mask = SegmentationMask::new(h, w, 0);
        for shape in &spec.shapes {
            let (cx, cy) = shape.center_at(t, w, h);
            // Rasterize wrapped copies via bounding boxes: a shape near a
            // border also paints on the opposite side.
            let (ex, ey) = match shape.kind {
                ShapeKind::Rect { half_w, half_h } => (half_w as i64, half_h as i64),
                ShapeKind::Disk { radius } => (radius as i64, radius as i64),
            };
            for oy in [-(h as i64), 0, h as i64] {
                for ox in [-(w as i64), 0, w as i64] {
                    let (scx, scy) = (cx + ox, cy + oy);
                    let y0 = (scy - ey).max(0);
                    let y1 = (scy + ey).min(h as i64 - 1);
                    let x0 = (scx - ex).max(0);
                    let x1 = (scx + ex).min(w as i64 - 1);
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let covered = match shape.kind {
                                ShapeKind::Rect { .. } => true,
                                ShapeKind::Disk { radius } => {
                                    let dx = x - scx;
                                    let dy = y - scy;
                                    dx * dx + dy * dy <= (radius * radius) as i64
                                }
                            };
                            if covered {
                                let p = (y as usize) * w + x as usize;
                                rgb[p] = shape.color;
                                mask.labels[p] = shape.class;
                            }
                        }
                    }
                }
            }
        }
        // transient degradation: some frames get a brightness shift and
        // extra noise while their labels stay exact
        let mut flicker_rng = stream(seed, &format!("gen/{}/flicker/{t}", spec.id));
        let strength = cfg.flicker_strength as i32;
        let flickered = flicker_rng.random_range(0.0..1.0) < cfg.flicker_prob;
        let shift = if flickered {
            flicker_rng.random_range(-strength..=strength)
        } else {
            0
        };
        // chroma survives at 10% on flickered frames
        let chroma = if flickered { 0.1 } else { 1.0 };
        // per-pixel noise on top of everything
        let mut noise_rng = stream(seed, &format!("gen/{}/noise/{t}", spec.id));
        let amp = cfg.noise as i32 + if flickered { strength } else { 0 };
        let mut data = vec![0.0; 3 * hw];
        for (p, px) in rgb.iter().enumerate() {
            let gray = (px[0] as i32 + px[1] as i32 + px[2] as i32) as f64 / 3.0;
            for c in 0..3 {
                let n = if amp > 0 {
                    noise_rng.random_range(-amp..=amp)
                } else {
                    0
                };
                let base = gray + (px[c] as f64 - gray) * chroma;
                let v = (base as i32 + shift + n).clamp(0, 255) as u8;
                data[c * hw + p] = v as f64 / 255.0;
            }
        }
        frames.push(Tensor::from_vec(vec![3, h, w], data).expect("frame shape"));
        masks.push(mask);
    }
    (frames, masks)
}

/// Build the synthetic dataset in memory. Deterministic per `(seed, cfg)`.
pub fn synthesize(seed: u64, cfg: &GenConfig) -> Result<(Vec<VideoClip>, Vec<VideoSpec>)> {
    let (min_half, max_half) = validate_gen_config(cfg)?;
    let colors = palette(cfg.k);
    let mut clips = Vec::with_capacity(cfg.n_videos);
    let mut specs = Vec::with_capacity(cfg.n_videos);
    for vi in 0..cfg.n_videos {
        let id = format!("video_{vi:04}");
        let mut attempt = 0usize;
        let (spec, frames, masks) = loop {
            let label = if attempt == 0 {
                format!("gen/{id}/layout")
            } else {
                format!("gen/{id}/layout/retry{attempt}")
            };
            let mut rng = stream(seed, &label);
            let mut shapes = Vec::with_capacity(cfg.k - 1);
            for class in 1..cfg.k {
                let kind = if class % 2 == 1 {
                    ShapeKind::Rect {
                        half_w: rng.random_range(min_half..=max_half),
                        half_h: rng.random_range(min_half..=max_half),
                    }
                } else {
                    ShapeKind::Disk {
                        radius: rng.random_range(min_half..=max_half),
                    }
                };
                let base = colors[class];
                let j = cfg.color_jitter as i32;
                let mut color = [0u8; 3];
                for c in 0..3 {
                    let d = if j > 0 { rng.random_range(-j..=j) } else { 0 };
                    color[c] = (base[c] as i32 + d).clamp(0, 255) as u8;
                }
                let center0 = (
                    rng.random_range(0..cfg.width as i64),
                    rng.random_range(0..cfg.height as i64),
                );
                let velocity = loop {
                    let v = (rng.random_range(-3..=3i64), rng.random_range(-3..=3i64));
                    if v != (0, 0) {
                        break v;
                    }
                };
                shapes.push(ShapeSpec {
                    class: class as u8,
                    kind,
                    color,
                    center0,
                    velocity,
                });
            }
            let spec = VideoSpec {
                id: id.clone(),
                background: colors[0],
                shapes,
            };
            let (frames, masks) = draw_video(&spec, cfg, seed);
            // the union of a video's masks must contain every class
            let mut present = vec![false; cfg.k];
            for mask in &masks {
                for &l in mask.labels() {
                    present[l as usize] = true;
                }
            }
            if present.iter().all(|&p| p) {
                break (spec, frames, masks);
            }
            attempt += 1;
            if attempt > 20 {
                return Err(Error::Config(format!(
                    "could not place all {} classes visibly in {id}",
                    cfg.k
                )));
            }
        };
        clips.push(VideoClip { id, frames, masks });
        specs.push(spec);
    }
    Ok((clips, specs))
}

/// Generate the dataset on disk and write its manifest.
pub fn generate_synthetic(root: &Path, seed: u64, cfg: &GenConfig) -> Result<DatasetManifest> {
    let (clips, _) = synthesize(seed, cfg)?;
    let n_train = ((cfg.n_videos as f64) * cfg.train_fraction).round() as usize;
    let videos = clips
        .iter()
        .enumerate()
        .map(|(i, c)| VideoEntry {
            id: c.id.clone(),
            frames: c.frames.len(),
            split: if i < n_train { Split::Train } else { Split::Val },
        })
        .collect();
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        k: cfg.k,
        videos,
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for clip in &clips {
        save_clip(&manifest, clip)?;
    }
    manifest.save()?;
    Ok(manifest)
}
