//! Synthetic scene generation, dataset manifests, and train-time
//! augmentation.
//!
//! Scenes are flat-colored shapes (ellipse, rectangle, blob) over a
//! noisy background. A rejection loop enforces the two properties that
//! make the data learnable: foreground fills 5-60% of the canvas and
//! the mean foreground color sits at least 0.2 away from the mean
//! background color. Everything is deterministic per seed.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::image::{self, Image};
use crate::rng::{self, SeededRng};
use crate::tensor::Tensor;

pub const FG_FRACTION_MIN: f64 = 0.05;
pub const FG_FRACTION_MAX: f64 = 0.6;
pub const MIN_COLOR_DISTANCE: f64 = 0.2;
/// Lower crop factor per axis. Sits above the 0.8 contract so the
/// re-resize never inflates foreground counts past 1.5x (0.82^2 > 2/3).
pub const CROP_MIN_FRACTION: f64 = 0.82;
/// Shapes stay inside this central fraction of the canvas, so crops
/// only ever shave thin slices off them.
const PLACEMENT_MARGIN: f64 = 0.12;

// ── Scene specification and rendering ───────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Blob,
}

#[derive(Debug, Clone)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center and radii in pixels.
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub color: [f64; 3],
    /// Radial harmonics (amplitude, phase) that wobble a blob outline.
    pub wobble: [(f64, f64); 2],
}

impl ShapeSpec {
    /// Maximum radial stretch the wobble can add.
    fn stretch(&self) -> f64 {
        match self.kind {
            ShapeKind::Blob => 1.0 + self.wobble[0].0 + self.wobble[1].0,
            _ => 1.0,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        match self.kind {
            ShapeKind::Ellipse => dx * dx + dy * dy <= 1.0,
            ShapeKind::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ShapeKind::Blob => {
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let r = 1.0
                    + self.wobble[0].0 * (2.0 * theta + self.wobble[0].1).cos()
                    + self.wobble[1].0 * (3.0 * theta + self.wobble[1].1).cos();
                rho <= r
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub canvas: usize,
    pub background: [f64; 3],
    pub noise_scale: f64,
    pub shapes: Vec<ShapeSpec>,
    pub seed: u64,
}

impl SceneSpec {
    /// Draws spec parameters; geometric containment holds by
    /// construction, the statistical invariants are checked after
    /// rendering by the caller.
    fn draw(canvas: usize, seed: u64, rng: &mut SeededRng) -> SceneSpec {
        fn color3(rng: &mut SeededRng) -> [f64; 3] {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = rng::uniform(rng, 0.05, 0.95);
            }
            c
        }
        let c = canvas as f64;
        let background = color3(rng);
        let count = rng.random_range(1..=3usize);
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let kind = match rng.random_range(0..3u32) {
                0 => ShapeKind::Ellipse,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Blob,
            };
            let wobble = [
                (rng::uniform(rng, 0.0, 0.15), rng::uniform(rng, 0.0, std::f64::consts::TAU)),
                (rng::uniform(rng, 0.0, 0.15), rng::uniform(rng, 0.0, std::f64::consts::TAU)),
            ];
            let mut shape = ShapeSpec {
                kind,
                cx: 0.0,
                cy: 0.0,
                rx: c * rng::uniform(rng, 0.10, 0.28),
                ry: c * rng::uniform(rng, 0.10, 0.28),
                color: color3(rng),
                wobble,
            };
            // Center range keeping the stretched extent inside the box.
            let ex = shape.rx * shape.stretch();
            let ey = shape.ry * shape.stretch();
            let (lo_x, hi_x) = (PLACEMENT_MARGIN * c + ex, (1.0 - PLACEMENT_MARGIN) * c - ex);
            let (lo_y, hi_y) = (PLACEMENT_MARGIN * c + ey, (1.0 - PLACEMENT_MARGIN) * c - ey);
            shape.cx = lo_x + rng::uniform(rng, 0.0, (hi_x - lo_x).max(0.0));
            shape.cy = lo_y + rng::uniform(rng, 0.0, (hi_y - lo_y).max(0.0));
            shapes.push(shape);
        }
        SceneSpec {
            canvas,
            background,
            noise_scale: rng::uniform(rng, 0.01, 0.06),
            shapes,
            seed,
        }
    }

    /// Renders the color image and its binary mask.
    pub fn render(&self) -> (Image, Image) {
        let c = self.canvas;
        let mut noise = rng::substream(self.seed, "scene-noise");
        let mut pixels = vec![0u8; c * c * 3];
        let mut mask = vec![0u8; c * c];
        for y in 0..c {
            for x in 0..c {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let shape = self.shapes.iter().rev().find(|s| s.contains(fx, fy));
                let base = shape.map_or(self.background, |s| s.color);
                if shape.is_some() {
                    mask[y * c + x] = 255;
                }
                for ch in 0..3 {
                    let jitter = rng::uniform(&mut noise, -self.noise_scale, self.noise_scale);
                    let v = (base[ch] + jitter).clamp(0.0, 1.0);
                    pixels[(y * c + x) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        let img = Image::new(c, c, 3, pixels).expect("sized buffer");
        let msk = Image::new(c, c, 1, mask).expect("sized buffer");
        (img, msk)
    }
}

fn color_distance(img: &Image, mask: &Image) -> f64 {
    let mut fg = [0.0; 3];
    let mut bg = [0.0; 3];
    let (mut nf, mut nb) = (0.0, 0.0);
    for (p, m) in img.pixels.chunks_exact(3).zip(&mask.pixels) {
        let dst = if *m == 255 { (&mut fg, &mut nf) } else { (&mut bg, &mut nb) };
        for ch in 0..3 {
            dst.0[ch] += f64::from(p[ch]) / 255.0;
        }
        *dst.1 += 1.0;
    }
    if nf == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let mut d2 = 0.0;
    for ch in 0..3 {
        let d = fg[ch] / nf - bg[ch] / nb;
        d2 += d * d;
    }
    d2.sqrt()
}

/// Draws scene specs until the rendered pair satisfies the foreground
/// fraction and color-separation invariants.
pub fn sample_scene(canvas: usize, seed: u64) -> (SceneSpec, Image, Image) {
    let mut rng = rng::substream(seed, "scene-spec");
    for attempt in 0u64.. {
        let spec = SceneSpec::draw(canvas, seed.wrapping_add(attempt), &mut rng);
        let (img, mask) = spec.render();
        let fraction =
            mask.pixels.iter().filter(|p| **p == 255).count() as f64 / mask.pixels.len() as f64;
        if (FG_FRACTION_MIN..=FG_FRACTION_MAX).contains(&fraction)
            && color_distance(&img, &mask) >= MIN_COLOR_DISTANCE
        {
            return (spec, img, mask);
        }
    }
    unreachable!("sampler loops until acceptance")
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to; set on load/save.
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn mask_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.mask)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(&name, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| PipelineError::invalid(format!("{name}: {e}")))?;
        manifest.root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        if manifest.entries.is_empty() {
            return Err(PipelineError::invalid(format!("{name}: manifest has no entries")));
        }
        for entry in &manifest.entries {
            for p in [manifest.image_path(entry), manifest.mask_path(entry)] {
                if !p.exists() {
                    return Err(PipelineError::invalid(format!(
                        "{name}: entry {} references missing file {}",
                        entry.image,
                        p.display()
                    )));
                }
            }
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| PipelineError::io(path.display().to_string(), e))
    }
}

/// Writes `count` image/mask pairs plus `manifest.json` into `out_dir`.
pub fn gen_dataset(
    count: usize,
    canvas: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, PipelineError> {
    if count == 0 {
        return Err(PipelineError::invalid("count must be >= 1"));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| PipelineError::io(out_dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let (_, img, mask) = sample_scene(canvas, rng::substream_seed(seed, &format!("scene-{i}")));
        let entry = ManifestEntry {
            image: format!("img_{i:03}.ppm"),
            mask: format!("mask_{i:03}.pgm"),
        };
        image::save(&out_dir.join(&entry.image), &img)?;
        image::save(&out_dir.join(&entry.mask), &mask)?;
        entries.push(entry);
    }
    let manifest =
        DatasetManifest { split: "train".into(), seed, entries, root: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// ── Loading ─────────────────────────────────────────────────────────────

/// One training example: a [3, H, W] image on the 2^-8 grid and its
/// binary mask, row-major.
#[derive(Debug, Clone)]
pub struct Example {
    pub name: String,
    pub image: Tensor,
    pub mask: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

pub fn load_examples(manifest: &DatasetManifest) -> Result<Vec<Example>, PipelineError> {
    manifest
        .entries
        .iter()
        .map(|entry| {
            let img = image::load(&manifest.image_path(entry))?;
            let msk = image::load(&manifest.mask_path(entry))?;
            if (msk.width, msk.height) != (img.width, img.height) {
                return Err(PipelineError::invalid(format!(
                    "entry {}: mask {}x{} does not match image {}x{}",
                    entry.image, msk.width, msk.height, img.width, img.height
                )));
            }
            let mask = image::to_mask(&msk)?;
            let name = Path::new(&entry.image)
                .file_stem()
                .map_or_else(|| entry.image.clone(), |s| s.to_string_lossy().into_owned());
            Ok(Example {
                name,
                image: image::to_tensor(&img)?,
                mask: mask.values().to_vec(),
                height: img.height,
                width: img.width,
            })
        })
        .collect()
}

// ── Resize and augmentation ─────────────────────────────────────────────

/// Bilinear sample of one channel plane restricted to a crop window.
fn resample_plane(
    src: &[f64],
    w: usize,
    crop: (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (cx, cy, cw, ch) = crop;
    let mut out = vec![0.0; out_h * out_w];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * ch as f64 / out_h as f64 - 0.5).clamp(0.0, ch as f64 - 1.0);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * cw as f64 / out_w as f64 - 0.5).clamp(0.0, cw as f64 - 1.0);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = sx - x0 as f64;
            let at = |yy: usize, xx: usize| src[(cy + yy) * w + cx + xx];
            let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
            let bot = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
            out[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Crop window plus mirror flag; the same parameters are applied to an
/// image and its mask so they stay aligned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub mirror: bool,
}

impl AugmentParams {
    pub fn identity(height: usize, width: usize) -> Self {
        AugmentParams { crop_x: 0, crop_y: 0, crop_w: width, crop_h: height, mirror: false }
    }

    pub fn sample(height: usize, width: usize, rng: &mut SeededRng) -> Self {
        let min_w = (CROP_MIN_FRACTION * width as f64).ceil() as usize;
        let min_h = (CROP_MIN_FRACTION * height as f64).ceil() as usize;
        let crop_w = rng.random_range(min_w..=width);
        let crop_h = rng.random_range(min_h..=height);
        AugmentParams {
            crop_x: rng.random_range(0..=width - crop_w),
            crop_y: rng.random_range(0..=height - crop_h),
            crop_w,
            crop_h,
            mirror: rng.random_range(0..2u32) == 1,
        }
    }
}

pub fn mirror_h(values: &mut [f64], height: usize, width: usize) {
    for y in 0..height {
        values[y * width..(y + 1) * width].reverse();
    }
}

/// Applies crop + resize (+ mirror) to an example, producing an
/// `out`-sized image tensor and re-binarized mask.
pub fn prepare(
    example: &Example,
    out: usize,
    params: AugmentParams,
) -> Result<(Tensor, Vec<f64>), PipelineError> {
    let (h, w) = (example.height, example.width);
    if params.crop_x + params.crop_w > w || params.crop_y + params.crop_h > h {
        return Err(PipelineError::invalid("crop window exceeds the image"));
    }
    let crop = (params.crop_x, params.crop_y, params.crop_w, params.crop_h);
    let plane = h * w;
    let mut channels = Vec::with_capacity(3 * out * out);
    for c in 0..3 {
        let mut ch = resample_plane(&example.image.values()[c * plane..(c + 1) * plane], w, crop, out, out);
        if params.mirror {
            mirror_h(&mut ch, out, out);
        }
        channels.extend_from_slice(&ch);
    }
    let mut mask = resample_plane(&example.mask, w, crop, out, out);
    if params.mirror {
        mirror_h(&mut mask, out, out);
    }
    for v in &mut mask {
        *v = f64::from(*v >= 0.5);
    }
    Ok((Tensor::from_vec(vec![3, out, out], channels)?, mask))
}

/// Bilinear resize of a whole [3, H, W] image to `out` x `out`. Resizing
/// to the source size is the identity.
/// Bilinear resample of a single plane, for maps going back to source
/// resolution.
pub(crate) fn resize_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    resample_plane(src, w, (0, 0, w, h), out_h, out_w)
}

pub fn resize_image(image: &Tensor, out: usize) -> Result<Tensor, PipelineError> {
    let dims = image.dims();
    if dims.len() != 3 || dims[0] != 3 {
        return Err(PipelineError::invalid(format!("expected a [3, H, W] image, got {dims:?}")));
    }
    let (h, w) = (dims[1], dims[2]);
    let plane = h * w;
    let mut channels = Vec::with_capacity(3 * out * out);
    for c in 0..3 {
        let src = &image.values()[c * plane..(c + 1) * plane];
        channels.extend_from_slice(&resample_plane(src, w, (0, 0, w, h), out, out));
    }
    Ok(Tensor::from_vec(vec![3, out, out], channels)?)
}
