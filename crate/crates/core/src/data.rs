//! Synthetic segmentation scenes, random-size crop augmentation and
//! PPM/PGM export.
//!
//! A scene is a noisy grey background with filled rectangles, disks and
//! triangles painted on top of each other. Each object class has its own
//! shape kind and a hue band; the bands overlap, so the shape matters.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Triangle,
}

impl ShapeKind {
    /// Shape drawn for object class `class >= 1`.
    pub fn for_class(class: u8) -> Self {
        match (class - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Disk,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMeta {
    pub kind: ShapeKind,
    pub class: u8,
    pub instance: u16,
    /// `(x0, y0, x1, y1)` bounding box, inclusive-exclusive, in pixels.
    pub bbox: (i64, i64, i64, i64),
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub seed: u64,
    pub num_classes: usize,
    pub shapes: Vec<ShapeMeta>,
}

/// RGB image in `[0, 1]` (channel-major), class labels and instance ids
/// (0 for background) of identical size.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub instances: Vec<u16>,
    pub meta: SceneMeta,
}

/// Centre hue of an object class, classes spaced evenly around the wheel.
pub fn class_hue(class: u8, num_classes: usize) -> f32 {
    let objects = (num_classes - 1).max(1) as f32;
    (class as f32 - 1.0) / objects
}

/// Half-width of the hue band an object colour is drawn from. With three
/// object classes neighbouring bands nearly touch; with five or more they
/// overlap.
pub const HUE_SPREAD: f32 = 0.15;

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as i32;
    let f = h6 - sector as f32;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Deterministic scene for `seed`. At least `min(max_shapes, num_classes -
/// 1)` shapes are drawn, the first ones cycling through every object class.
pub fn generate_scene(
    seed: u64,
    width: usize,
    height: usize,
    num_classes: usize,
    max_shapes: usize,
) -> Result<Scene, DataError> {
    if !(2..=255).contains(&num_classes) {
        return Err(DataError::Config(format!("num_classes must be in 2..=255, got {num_classes}")));
    }
    if width == 0 || height == 0 {
        return Err(DataError::Config("scene must be non-empty".into()));
    }
    if max_shapes > u16::MAX as usize {
        return Err(DataError::Config(format!("at most {} shapes", u16::MAX)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = width * height;
    let noise = Normal::new(0.0f32, 0.04).expect("valid sigma");

    let grey: f32 = rng.random_range(0.3..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let mut image = vec![0.0f32; 3 * plane];
    for (c, t) in tint.iter().enumerate() {
        image[c * plane..(c + 1) * plane].fill(grey + t);
    }
    let mut labels = vec![0u8; plane];
    let mut instances = vec![0u16; plane];

    let objects = num_classes - 1;
    let min_shapes = max_shapes.min(objects);
    let count = if max_shapes == 0 { 0 } else { rng.random_range(min_shapes..=max_shapes) };
    let short = width.min(height) as f64;
    let mut shapes = Vec::with_capacity(count);
    for k in 0..count {
        let class = if k < objects {
            (k + 1) as u8
        } else {
            rng.random_range(1..=objects) as u8
        };
        let kind = ShapeKind::for_class(class);
        let hue = class_hue(class, num_classes) + rng.random_range(-HUE_SPREAD..HUE_SPREAD);
        let color = hsv_to_rgb(hue, rng.random_range(0.5..0.95), rng.random_range(0.6..1.0));
        let half = rng.random_range(0.08 * short..0.2 * short).max(1.0);
        let cx = rng.random_range(0.0..width as f64);
        let cy = rng.random_range(0.0..height as f64);
        let instance = (k + 1) as u16;
        let (hx, hy) = match kind {
            ShapeKind::Rectangle => (half * rng.random_range(0.6..1.4), half * rng.random_range(0.6..1.4)),
            _ => (half, half),
        };
        let tri = if kind == ShapeKind::Triangle {
            let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            Some(std::array::from_fn::<(f64, f64), 3, _>(|v| {
                let a = a0 + v as f64 * std::f64::consts::TAU / 3.0;
                (cx + half * 1.2 * a.cos(), cy + half * 1.2 * a.sin())
            }))
        } else {
            None
        };
        let reach = hx.max(hy) * 1.2 + 1.0;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil() as usize).min(width);
        let y1 = ((cy + reach).ceil() as usize).min(height);
        let mut bbox = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = match kind {
                    ShapeKind::Rectangle => (px - cx).abs() <= hx && (py - cy).abs() <= hy,
                    ShapeKind::Disk => (px - cx).powi(2) + (py - cy).powi(2) <= half * half,
                    ShapeKind::Triangle => in_triangle(tri.as_ref().expect("triangle vertices"), (px, py)),
                };
                if inside {
                    let idx = y * width + x;
                    for (c, v) in color.iter().enumerate() {
                        image[c * plane + idx] = *v;
                    }
                    labels[idx] = class;
                    instances[idx] = instance;
                    bbox = (
                        bbox.0.min(x as i64),
                        bbox.1.min(y as i64),
                        bbox.2.max(x as i64 + 1),
                        bbox.3.max(y as i64 + 1),
                    );
                }
            }
        }
        if bbox.0 == i64::MAX {
            bbox = (0, 0, 0, 0);
        }
        shapes.push(ShapeMeta {
            kind,
            class,
            instance,
            bbox,
            color,
        });
    }
    for v in &mut image {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(Scene {
        width,
        height,
        image,
        labels,
        instances,
        meta: SceneMeta {
            seed,
            num_classes,
            shapes,
        },
    })
}

fn in_triangle(v: &[(f64, f64); 3], p: (f64, f64)) -> bool {
    let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
    let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
    d.iter().all(|x| *x >= 0.0) || d.iter().all(|x| *x <= 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_min: usize,
    pub crop_max: usize,
    pub out_size: usize,
    pub hflip_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min: 48,
            crop_max: 128,
            out_size: 64,
            hflip_p: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, width: usize, height: usize) -> Result<(), DataError> {
        if self.crop_min == 0 || self.crop_min > self.crop_max {
            return Err(DataError::Config(format!(
                "crop range {}..={} is empty",
                self.crop_min, self.crop_max
            )));
        }
        if self.crop_max > width.min(height) {
            return Err(DataError::Config(format!(
                "crop side {} exceeds the {width}x{height} scene",
                self.crop_max
            )));
        }
        if self.out_size == 0 {
            return Err(DataError::Config("out_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_p) {
            return Err(DataError::Config(format!("hflip_p {} outside [0, 1]", self.hflip_p)));
        }
        Ok(())
    }
}

/// A square training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub image: Vec<f32>,
    pub labels: Vec<u8>,
    pub instances: Vec<u16>,
}

impl Patch {
    pub fn hflip(&mut self) {
        let s = self.size;
        for c in 0..3 {
            for row in self.image[c * s * s..(c + 1) * s * s].chunks_mut(s) {
                row.reverse();
            }
        }
        for row in self.labels.chunks_mut(s) {
            row.reverse();
        }
        for row in self.instances.chunks_mut(s) {
            row.reverse();
        }
    }
}

/// Random square crop with side uniform in `[crop_min, crop_max]`, resized to
/// `out_size` (bilinear for the image, nearest for labels and instances), then
/// flipped horizontally with probability `hflip_p`.
pub fn random_patch<R: Rng>(scene: &Scene, cfg: &AugmentConfig, rng: &mut R) -> Result<Patch, DataError> {
    cfg.validate(scene.width, scene.height)?;
    let side = rng.random_range(cfg.crop_min..=cfg.crop_max);
    let x0 = rng.random_range(0..=scene.width - side);
    let y0 = rng.random_range(0..=scene.height - side);
    let mut patch = crop_resize(scene, (x0, y0, side, side), cfg.out_size, cfg.out_size);
    if rng.random_bool(cfg.hflip_p) {
        patch.hflip();
    }
    Ok(patch)
}

/// Crops `(x0, y0, w, h)` and resizes to `out_w x out_h`. The returned patch
/// has `size = out_w` and is only square when `out_w == out_h`.
pub fn crop_resize(scene: &Scene, (x0, y0, w, h): (usize, usize, usize, usize), out_w: usize, out_h: usize) -> Patch {
    let plane = scene.width * scene.height;
    let mut image = Vec::with_capacity(3 * out_w * out_h);
    for c in 0..3 {
        let src = &scene.image[c * plane..(c + 1) * plane];
        image.extend(bilinear_window(src, scene.width, (x0, y0, w, h), out_w, out_h));
    }
    let labels = nearest_window(&scene.labels, scene.width, (x0, y0, w, h), out_w, out_h);
    let instances = nearest_window(&scene.instances, scene.width, (x0, y0, w, h), out_w, out_h);
    Patch {
        size: out_w,
        image,
        labels,
        instances,
    }
}

fn bilinear_window(
    src: &[f32],
    stride: usize,
    (x0, y0, w, h): (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> Vec<f32> {
    let coords = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let xs = coords(out_w, w);
    let ys = coords(out_h, h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for &(ylo, yhi, fy) in &ys {
        let r0 = &src[(y0 + ylo) * stride + x0..];
        let r1 = &src[(y0 + yhi) * stride + x0..];
        for &(xlo, xhi, fx) in &xs {
            let top = r0[xlo] * (1.0 - fx) + r0[xhi] * fx;
            let bottom = r1[xlo] * (1.0 - fx) + r1[xhi] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Source index of output pixel `d` when mapping `len` pixels onto `out`.
pub fn nearest_index(d: usize, out: usize, len: usize) -> usize {
    (((2 * d + 1) * len) / (2 * out)).min(len - 1)
}

fn nearest_window<V: Copy>(
    src: &[V],
    stride: usize,
    (x0, y0, w, h): (usize, usize, usize, usize),
    out_w: usize,
    out_h: usize,
) -> Vec<V> {
    let mut out = Vec::with_capacity(out_w * out_h);
    for dy in 0..out_h {
        let row = (y0 + nearest_index(dy, out_h, h)) * stride + x0;
        for dx in 0..out_w {
            out.push(src[row + nearest_index(dx, out_w, w)]);
        }
    }
    out
}

/// Bilinear resize of a channel-major image.
pub fn resize_image(image: &[f32], channels: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f32> {
    let plane = h * w;
    let mut out = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        out.extend(bilinear_window(&image[c * plane..(c + 1) * plane], w, (0, 0, w, h), ow, oh));
    }
    out
}

/// Nearest-neighbour resize of a label map.
pub fn resize_labels<V: Copy>(labels: &[V], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<V> {
    nearest_window(labels, w, (0, 0, w, h), ow, oh)
}

/// Stacks patches into a `[n, 3, s, s]` tensor and the matching label vector.
pub fn make_batch(patches: &[Patch]) -> (Tensor<f32>, Vec<u8>) {
    let s = patches.first().map_or(0, |p| p.size);
    let mut data = Vec::with_capacity(patches.len() * 3 * s * s);
    let mut labels = Vec::with_capacity(patches.len() * s * s);
    for p in patches {
        data.extend_from_slice(&p.image);
        labels.extend_from_slice(&p.labels);
    }
    let t = Tensor::from_vec(Shape::new(patches.len(), 3, s, s), data).expect("patches share one size");
    (t, labels)
}

/// Generator parameters and seeds of a scene collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub max_shapes: usize,
    pub seeds: Vec<u64>,
}

impl DatasetManifest {
    /// `count` consecutive seeds starting at `first_seed`.
    pub fn range(width: usize, height: usize, num_classes: usize, max_shapes: usize, first_seed: u64, count: usize) -> Self {
        DatasetManifest {
            width,
            height,
            num_classes,
            max_shapes,
            seeds: (first_seed..first_seed + count as u64).collect(),
        }
    }

    pub fn generate(&self) -> Result<Vec<Scene>, DataError> {
        self.seeds
            .iter()
            .map(|&s| generate_scene(s, self.width, self.height, self.num_classes, self.max_shapes))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved 8-bit RGB from a channel-major `[0, 1]` image.
pub fn image_to_rgb8(image: &[f32], plane: usize) -> Vec<u8> {
    (0..plane)
        .flat_map(|i| [to_byte(image[i]), to_byte(image[plane + i]), to_byte(image[2 * plane + i])])
        .collect()
}

/// Binary PPM (P6) with interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), DataError> {
    if rgb.len() != 3 * width * height {
        return Err(DataError::Config(format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
    }
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P6\n{width} {height}\n255\n")?;
    f.write_all(rgb)?;
    f.flush()?;
    Ok(())
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm8(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<(), DataError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(values)?;
    f.flush()?;
    Ok(())
}

/// Binary 16-bit big-endian PGM (P5, maxval 65535).
pub fn write_pgm16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<(), DataError> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n65535\n")?;
    for v in values {
        f.write_all(&v.to_be_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Reads a binary PPM (P6, maxval 255) into a channel-major `[0, 1]` image,
/// returning `(width, height, image)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<f32>), DataError> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| DataError::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PPM is supported"));
    }
    let plane = w * h;
    if w == 0 || h == 0 || bytes.len() < pos + 3 * plane {
        return Err(bad("pixel data is truncated"));
    }
    let px = &bytes[pos..pos + 3 * plane];
    let mut image = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            image[c * plane + i] = px[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((w, h, image))
}

/// Writes `<stem>.ppm`, `<stem>_labels.pgm` and `<stem>_instances.pgm`.
pub fn export_scene(scene: &Scene, dir: &Path, stem: &str) -> Result<(), DataError> {
    let (w, h) = (scene.width, scene.height);
    write_ppm(&dir.join(format!("{stem}.ppm")), w, h, &image_to_rgb8(&scene.image, w * h))?;
    write_pgm8(&dir.join(format!("{stem}_labels.pgm")), w, h, &scene.labels)?;
    write_pgm16(&dir.join(format!("{stem}_instances.pgm")), w, h, &scene.instances)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_index_covers_range() {
        assert_eq!(nearest_index(0, 4, 8), 1);
        assert_eq!(nearest_index(3, 4, 8), 7);
        assert_eq!(nearest_index(0, 8, 4), 0);
        assert_eq!(nearest_index(7, 8, 4), 3);
        for d in 0..5 {
            assert_eq!(nearest_index(d, 5, 5), d);
        }
    }

    #[test]
    fn identity_resize_is_exact() {
        let img: Vec<f32> = (0..3 * 20).map(|v| v as f32 / 60.0).collect();
        assert_eq!(resize_image(&img, 3, (4, 5), (4, 5)), img);
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(1.0 / 3.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(0.5, 0.0, 0.5), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn triangle_test() {
        let v = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)];
        assert!(in_triangle(&v, (1.0, 1.0)));
        assert!(!in_triangle(&v, (3.0, 3.0)));
    }
}
