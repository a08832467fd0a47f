//! Annotated-image loading, resizing to network resolution, and a
//! procedural dataset of smooth closed contours with landmarks on them.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::heatmap::{encode_gaussian, rescale_coords, HeatmapSpec, Landmark};
use crate::tensor::Tensor;

/// Physical pixel size of the cephalometric convention, mm/px.
pub const CEPHALOMETRIC_SPACING: f64 = 0.1;
/// Minimum distance between a synthetic landmark and the image border.
pub const LANDMARK_MARGIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    /// File stem or generated identifier.
    pub name: String,
    /// `[C, H, W]` with values in `[0, 1]`.
    pub pixels: Tensor,
    /// Landmarks in pixel coordinates of `pixels`, ordered by index.
    pub landmarks: Vec<Landmark>,
    /// Physical pixel size in mm/px (1 for unit-less pixel data).
    pub spacing: f64,
}

impl AnnotatedImage {
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnnotationFormat {
    /// One `x,y` pair per line, landmark order by line number.
    #[default]
    XyPerLine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadOptions {
    pub format: AnnotationFormat,
    /// Optional second annotator; its landmarks are averaged with the first.
    pub second_annotations: Option<PathBuf>,
    pub spacing: f64,
    /// 1 converts every image to grayscale, 3 to RGB.
    pub channels: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: AnnotationFormat::XyPerLine,
            second_annotations: None,
            spacing: CEPHALOMETRIC_SPACING,
            channels: 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub images: Vec<AnnotatedImage>,
    /// Files that were skipped, with the reason.
    pub errors: Vec<(PathBuf, String)>,
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "pgm", "ppm", "pnm", "pbm"];

/// Parses `x,y` lines; blank lines are ignored.
pub fn parse_annotations(text: &str) -> std::result::Result<Vec<Landmark>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed: Vec<f64> = parts.iter().filter_map(|p| p.parse::<f64>().ok()).collect();
        if parts.len() != 2 || parsed.len() != 2 || !parsed.iter().all(|v| v.is_finite()) {
            return Err(format!("line {}: expected 'x,y', got '{line}'", lineno + 1));
        }
        out.push(Landmark::new(parsed[0], parsed[1], out.len()));
    }
    if out.is_empty() {
        return Err("no landmarks".into());
    }
    Ok(out)
}

/// Pointwise mean of two annotators' landmark lists.
pub fn average_annotations(
    a: &[Landmark],
    b: &[Landmark],
) -> std::result::Result<Vec<Landmark>, String> {
    if a.len() != b.len() {
        return Err(format!("annotators disagree on count: {} vs {}", a.len(), b.len()));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(p, q)| Landmark::new((p.x + q.x) / 2.0, (p.y + q.y) / 2.0, p.index))
        .collect())
}

fn read_annotation(path: &Path) -> std::result::Result<Vec<Landmark>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    parse_annotations(&text)
}

pub fn read_image(path: &Path, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(invalid_config(format!("channels must be 1 or 3, got {c}"))),
    };
    // interleaved HWC -> planar CHW
    Ok(Tensor::from_fn(&[channels, h, w], |i| {
        let (c, s) = (i / (h * w), i % (h * w));
        raw[s * channels + c] as f64 / 255.0
    }))
}

/// Loads every image in `image_dir` with a same-stem `.txt` annotation in
/// `annotation_dir`. Bad files are reported and skipped; only unreadable
/// directories are errors.
pub fn load_dataset(
    image_dir: &Path,
    annotation_dir: &Path,
    options: &LoadOptions,
) -> Result<LoadReport> {
    if !(options.spacing > 0.0 && options.spacing.is_finite()) {
        return Err(invalid_config(format!("spacing must be > 0, got {}", options.spacing)));
    }
    let listing = |dir: &Path| {
        std::fs::read_dir(dir).map_err(|e| Error::File {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })
    };
    listing(annotation_dir)?;
    let mut files: Vec<PathBuf> = listing(image_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();

    let mut report = LoadReport::default();
    if files.is_empty() {
        let msg = format!("no images found in {}", image_dir.display());
        log::warn!("{msg}");
        report.warnings.push(msg);
        return Ok(report);
    }
    let mut count = None;
    for path in files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        match load_one(&path, &stem, annotation_dir, options, count) {
            Ok(item) => {
                count.get_or_insert(item.landmarks.len());
                report.images.push(item);
            }
            Err(msg) => {
                log::warn!("skipping {}: {msg}", path.display());
                report.errors.push((path, msg));
            }
        }
    }
    Ok(report)
}

fn load_one(
    path: &Path,
    stem: &str,
    annotation_dir: &Path,
    options: &LoadOptions,
    expected: Option<usize>,
) -> std::result::Result<AnnotatedImage, String> {
    let name = format!("{stem}.txt");
    let mut landmarks = read_annotation(&annotation_dir.join(&name))?;
    if let Some(second) = &options.second_annotations {
        let other = read_annotation(&second.join(&name)).map_err(|e| format!("second annotator: {e}"))?;
        landmarks = average_annotations(&landmarks, &other)?;
    }
    if let Some(n) = expected {
        if landmarks.len() != n {
            return Err(format!("{} landmarks, dataset has {n}", landmarks.len()));
        }
    }
    let pixels = read_image(path, options.channels).map_err(|e| e.to_string())?;
    Ok(AnnotatedImage {
        name: stem.to_string(),
        pixels,
        landmarks,
        spacing: options.spacing,
    })
}

// ---------------------------------------------------------------------------
// Preparation

/// Bilinear resize of `[C, H, W]` pixels. Output pixel `(i, j)` samples the
/// source at `(i * H / H', j * W / W')`, the same ratio map as
/// [`rescale_coords`], with edge clamping.
pub fn resize_bilinear(pixels: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    if pixels.shape().len() != 3 || size.0 == 0 || size.1 == 0 {
        return Err(invalid_input(format!(
            "cannot resize {:?} to {size:?}",
            pixels.shape()
        )));
    }
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    if (h, w) == size {
        return Ok(pixels.clone());
    }
    let (oh, ow) = size;
    let axis = |dst: usize, from: usize, to: usize| {
        let src = (dst as f64 * from as f64 / to as f64).min((from - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(from - 1);
        (lo, hi, src - lo as f64)
    };
    let rows: Vec<_> = (0..oh).map(|i| axis(i, h, oh)).collect();
    let cols: Vec<_> = (0..ow).map(|j| axis(j, w, ow)).collect();
    let src = pixels.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |idx| {
        let (ch, s) = (idx / (oh * ow), idx % (oh * ow));
        let (r0, r1, fy) = rows[s / ow];
        let (c0, c1, fx) = cols[s % ow];
        let at = |r: usize, col: usize| src[(ch * h + r) * w + col];
        let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
        let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Network-ready sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// `[C, H, W]` at the heatmap resolution.
    pub pixels: Tensor,
    /// `[L, H, W]` Gaussian targets.
    pub heatmaps: Tensor,
    /// Landmarks in network pixel coordinates.
    pub landmarks: Vec<Landmark>,
}

/// Resizes `image` to the heatmap resolution of `spec` and encodes one
/// target per landmark.
pub fn prepare(image: &AnnotatedImage, spec: &HeatmapSpec) -> Result<Prepared> {
    spec.validate()?;
    let target = (spec.height, spec.width);
    let from = image.size();
    let pixels = resize_bilinear(&image.pixels, target)?;
    let landmarks = image
        .landmarks
        .iter()
        .map(|l| rescale_coords(l, from, target))
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(landmarks.len() * spec.height * spec.width);
    for l in &landmarks {
        values.extend_from_slice(encode_gaussian(l, spec)?.heatmap.values());
    }
    let heatmaps = Tensor::from_vec(&[landmarks.len(), spec.height, spec.width], values)?;
    Ok(Prepared {
        pixels,
        heatmaps,
        landmarks,
    })
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub num_landmarks: usize,
    pub num_images: usize,
    /// Strength of the background texture and pixel noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            num_landmarks: 4,
            num_images: 50,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

/// Relative mean radius of the contour.
const BASE_RADIUS: f64 = 0.2;
/// Largest harmonic amplitude.
const MAX_AMPLITUDE: f64 = 0.2;
/// Largest centre displacement relative to the shorter side.
const CENTER_JITTER: f64 = 0.08;
const HARMONICS: [f64; 3] = [2.0, 3.0, 4.0];
const FILL_LEVEL: f64 = 0.25;
const EDGE_LEVEL: f64 = 0.35;
const EDGE_WIDTH: f64 = 0.7;
const MARKER_LEVEL: f64 = 0.4;
const MARKER_WIDTH: f64 = 1.0;
const BACKGROUND_LEVEL: f64 = 0.1;
/// Polyline resolution used for arc-length positions.
const ARC_SAMPLES: usize = 4096;

/// `r(θ) = r0 (1 + Σ a_k cos(kθ + φ_k))` around `center`, with θ measured
/// from the +x axis towards +y (clockwise on screen).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub center: (f64, f64),
    pub base_radius: f64,
    pub amplitudes: [f64; 3],
    pub phases: [f64; 3],
}

impl Contour {
    pub fn radius(&self, theta: f64) -> f64 {
        let wobble: f64 = HARMONICS
            .iter()
            .zip(self.amplitudes.iter().zip(&self.phases))
            .map(|(k, (a, phi))| a * (k * theta + phi).cos())
            .sum();
        self.base_radius * (1.0 + wobble)
    }

    pub fn point(&self, theta: f64) -> (f64, f64) {
        let r = self.radius(theta);
        (self.center.0 + r * theta.cos(), self.center.1 + r * theta.sin())
    }

    /// Angles of the points at arc-length fractions `k / count`,
    /// `k = 0..count`, starting at θ = 0.
    pub fn arc_length_angles(&self, count: usize) -> Vec<f64> {
        let thetas: Vec<f64> = (0..=ARC_SAMPLES)
            .map(|i| TAU * i as f64 / ARC_SAMPLES as f64)
            .collect();
        let mut cumulative = vec![0.0; thetas.len()];
        for i in 1..thetas.len() {
            let (x0, y0) = self.point(thetas[i - 1]);
            let (x1, y1) = self.point(thetas[i]);
            cumulative[i] = cumulative[i - 1] + (x1 - x0).hypot(y1 - y0);
        }
        let total = cumulative[ARC_SAMPLES];
        (0..count)
            .map(|k| {
                let s = total * k as f64 / count as f64;
                let i = cumulative.partition_point(|&c| c <= s).clamp(1, ARC_SAMPLES);
                let frac = (s - cumulative[i - 1]) / (cumulative[i] - cumulative[i - 1]);
                thetas[i - 1] + frac * (thetas[i] - thetas[i - 1])
            })
            .collect()
    }

    /// Signed radial distance of `(x, y)` from the contour (positive
    /// outside).
    pub fn radial_offset(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        dx.hypot(dy) - self.radius(dy.atan2(dx))
    }
}

/// A generated image together with the contour it was drawn from.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: AnnotatedImage,
    pub contour: Contour,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if self.num_images == 0 || self.num_landmarks == 0 {
            return Err(invalid_config("num_images and num_landmarks must be >= 1"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(invalid_config(format!(
                "noise_level must be >= 0, got {}",
                self.noise_level
            )));
        }
        if self.center_slack().0 < 0.0 || self.center_slack().1 < 0.0 || h == 0 || w == 0 {
            return Err(invalid_config(format!(
                "a {h}x{w} image cannot hold the contour with a {LANDMARK_MARGIN} px margin"
            )));
        }
        Ok(())
    }

    fn base_radius(&self) -> f64 {
        BASE_RADIUS * self.image_size.0.min(self.image_size.1) as f64
    }

    /// How far the centre may move on each axis (y, x) while the widest
    /// possible contour keeps its margin.
    fn center_slack(&self) -> (f64, f64) {
        let extent = self.base_radius() * (1.0 + 3.0 * MAX_AMPLITUDE);
        let slack = |n: usize| (n as f64 - 1.0) / 2.0 - LANDMARK_MARGIN - extent;
        (slack(self.image_size.0), slack(self.image_size.1))
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn render(spec: &SyntheticSpec, index: usize) -> SyntheticSample {
    let (h, w) = spec.image_size;
    let mut rng = sample_rng(spec.seed, index);
    let (slack_y, slack_x) = spec.center_slack();
    let jitter = |rng: &mut ChaCha8Rng, slack: f64| {
        let s = slack.min(CENTER_JITTER * h.min(w) as f64);
        if s > 0.0 {
            rng.random_range(-s..=s)
        } else {
            0.0
        }
    };
    let center = (
        (w as f64 - 1.0) / 2.0 + jitter(&mut rng, slack_x),
        (h as f64 - 1.0) / 2.0 + jitter(&mut rng, slack_y),
    );
    let mut amplitudes = [0.0; 3];
    let mut phases = [0.0; 3];
    for k in 0..3 {
        amplitudes[k] = rng.random_range(-MAX_AMPLITUDE..=MAX_AMPLITUDE);
        phases[k] = rng.random_range(0.0..TAU);
    }
    let contour = Contour {
        center,
        base_radius: spec.base_radius(),
        amplitudes,
        phases,
    };
    let landmarks: Vec<Landmark> = contour
        .arc_length_angles(spec.num_landmarks)
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let (x, y) = contour.point(t);
            Landmark::new(x, y, i)
        })
        .collect();

    // low-frequency texture: a few random plane waves
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.05..0.25);
            (freq * angle.cos(), freq * angle.sin(), rng.random_range(0.0..TAU))
        })
        .collect();
    let noise = spec.noise_level;
    let pixels = Tensor::from_fn(&[1, h, w], |s| {
        let (y, x) = ((s / w) as f64, (s % w) as f64);
        let d = contour.radial_offset(x, y);
        let mut v = BACKGROUND_LEVEL
            + FILL_LEVEL / (1.0 + (d / 0.5).exp())
            + EDGE_LEVEL * (-d * d / (2.0 * EDGE_WIDTH * EDGE_WIDTH)).exp();
        for l in &landmarks {
            let r2 = (x - l.x).powi(2) + (y - l.y).powi(2);
            v += MARKER_LEVEL * (-r2 / (2.0 * MARKER_WIDTH * MARKER_WIDTH)).exp();
        }
        if noise > 0.0 {
            let texture: f64 = waves
                .iter()
                .map(|(fx, fy, phi)| (fx * x + fy * y + phi).sin())
                .sum::<f64>()
                / 3.0;
            let white: f64 = StandardNormal.sample(&mut rng);
            v += noise * (0.5 * texture + 0.5 * white);
        }
        v.clamp(0.0, 1.0)
    });
    SyntheticSample {
        image: AnnotatedImage {
            name: format!("{index:04}"),
            pixels,
            landmarks,
            spacing: 1.0,
        },
        contour,
    }
}

/// Generates `spec.num_images` images with their contours. Each image is
/// drawn from its own random stream, so item `i` does not depend on
/// `num_images`.
pub fn generate_synthetic_samples(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    Ok((0..spec.num_images).map(|i| render(spec, i)).collect())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<AnnotatedImage>> {
    Ok(generate_synthetic_samples(spec)?
        .into_iter()
        .map(|s| s.image)
        .collect())
}

// ---------------------------------------------------------------------------
// Writing

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn format_annotations(landmarks: &[Landmark]) -> String {
    landmarks.iter().map(|l| format!("{},{}\n", l.x, l.y)).collect()
}

/// Writes `images/<name>.png` (8-bit) and `annotations/<name>.txt` under
/// `dir`. Returns the written paths in order.
pub fn write_dataset(dir: &Path, images: &[AnnotatedImage]) -> Result<Vec<PathBuf>> {
    let img_dir = dir.join("images");
    let ann_dir = dir.join("annotations");
    for d in [&img_dir, &ann_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::File {
            path: d.clone(),
            message: e.to_string(),
        })?;
    }
    let mut written = Vec::with_capacity(2 * images.len());
    for item in images {
        let (h, w) = item.size();
        let c = item.channels();
        let bytes: Vec<u8> = (0..h * w * c)
            .map(|i| {
                let (s, ch) = (i / c, i % c);
                (item.pixels.data()[ch * h * w + s] * 255.0).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        let path = img_dir.join(format!("{}.png", item.name));
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(&path, &bytes, w as u32, h as u32, color)?;
        written.push(path);
        let path = ann_dir.join(format!("{}.txt", item.name));
        write_file(&path, format_annotations(&item.landmarks).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{decode_argmax, Heatmap};
    use proptest::prelude::*;

    #[test]
    fn two_annotators_are_averaged() {
        let a = parse_annotations("100,200\n").unwrap();
        let b = parse_annotations("102,204\n").unwrap();
        let avg = average_annotations(&a, &b).unwrap();
        assert_eq!((avg[0].x, avg[0].y), (101.0, 202.0));
        assert!(average_annotations(&a, &parse_annotations("1,2\n3,4").unwrap()).is_err());
    }

    #[test]
    fn malformed_annotations_are_rejected() {
        assert!(parse_annotations("1,2\nthree,4\n").is_err());
        assert!(parse_annotations("1,2,3\n").is_err());
        assert!(parse_annotations("\n\n").is_err());
        assert!(parse_annotations("1,nan").is_err());
        assert_eq!(parse_annotations(" 1.5 , 2\n\n3,4\n").unwrap().len(), 2);
    }

    #[test]
    fn resize_identity_and_halving() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64 / 16.0);
        assert_eq!(resize_bilinear(&x, (4, 4)).unwrap(), x);
        let half = resize_bilinear(&x, (2, 2)).unwrap();
        // samples source pixels (0,0), (0,2), (2,0), (2,2)
        assert_eq!(half.data(), &[0.0, 2.0 / 16.0, 8.0 / 16.0, 10.0 / 16.0]);
        let c = Tensor::full(&[3, 5, 7], 0.3);
        assert!(resize_bilinear(&c, (11, 4))
            .unwrap()
            .data()
            .iter()
            .all(|v| (v - 0.3).abs() < 1e-15));
    }

    fn sample(h: usize, w: usize, lms: Vec<Landmark>) -> AnnotatedImage {
        AnnotatedImage {
            name: "a".into(),
            pixels: Tensor::zeros(&[1, h, w]),
            landmarks: lms,
            spacing: 0.1,
        }
    }

    #[test]
    fn prepare_rescales_landmarks() {
        let img = sample(64, 48, vec![Landmark::new(10.0, 20.0, 0), Landmark::new(40.0, 60.0, 1)]);
        let same = prepare(&img, &HeatmapSpec::new(64, 48, 3.0, 1.0).unwrap()).unwrap();
        assert_eq!(same.landmarks, img.landmarks);
        let half = prepare(&img, &HeatmapSpec::new(32, 24, 3.0, 1.0).unwrap()).unwrap();
        assert_eq!((half.landmarks[0].x, half.landmarks[0].y), (5.0, 10.0));
        assert_eq!(half.heatmaps.shape(), &[2, 32, 24]);
        assert_eq!(half.pixels.shape(), &[1, 32, 24]);
    }

    proptest! {
        #[test]
        fn prepared_heatmap_peaks_at_rounded_landmark(x in 0.0..63.0f64, y in 0.0..47.0f64) {
            let img = sample(96, 128, vec![Landmark::new(x * 2.0, y * 2.0, 0)]);
            let p = prepare(&img, &HeatmapSpec::new(48, 64, 3.0, 1.0).unwrap()).unwrap();
            let hm = Heatmap::from_values(48, 64, p.heatmaps.data().to_vec()).unwrap();
            let d = decode_argmax(&hm);
            prop_assert!((d.x - p.landmarks[0].x).abs() <= 0.5 + 1e-9);
            prop_assert!((d.y - p.landmarks[0].y).abs() <= 0.5 + 1e-9);
        }

        #[test]
        fn rescaling_back_recovers_landmarks(x in 0.0..500.0f64, y in 0.0..380.0f64) {
            let img = sample(384, 512, vec![Landmark::new(x, y, 0)]);
            let p = prepare(&img, &HeatmapSpec::new(64, 48, 2.0, 1.0).unwrap()).unwrap();
            let back = rescale_coords(&p.landmarks[0], (64, 48), (384, 512)).unwrap();
            prop_assert!((back.x - x).abs() < 1e-6 && (back.y - y).abs() < 1e-6);
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_inside_margins() {
        let spec = SyntheticSpec {
            num_images: 50,
            ..SyntheticSpec::default()
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!(a, generate_synthetic(&spec).unwrap());
        assert_eq!(a.len(), 50);
        for img in &a {
            assert_eq!(img.landmarks.len(), 4);
            for l in &img.landmarks {
                assert!(l.x >= LANDMARK_MARGIN && l.x <= 63.0 - LANDMARK_MARGIN);
                assert!(l.y >= LANDMARK_MARGIN && l.y <= 63.0 - LANDMARK_MARGIN);
            }
            assert!(img.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a[0], other[0]);
    }

    #[test]
    fn noiseless_landmarks_lie_on_the_contour() {
        let spec = SyntheticSpec {
            noise_level: 0.0,
            num_images: 20,
            ..SyntheticSpec::default()
        };
        let samples = generate_synthetic_samples(&spec).unwrap();
        assert_eq!(samples, generate_synthetic_samples(&spec).unwrap());
        for s in &samples {
            let c = &s.contour;
            for l in &s.image.landmarks {
                // re-evaluate the contour equation at the landmark's angle
                let theta = (l.y - c.center.1).atan2(l.x - c.center.0);
                let rho = (l.x - c.center.0).hypot(l.y - c.center.1);
                let r = c.base_radius
                    * (1.0
                        + (0..3)
                            .map(|k| {
                                c.amplitudes[k] * ((k as f64 + 2.0) * theta + c.phases[k]).cos()
                            })
                            .sum::<f64>());
                assert!((rho - r).abs() < 0.5, "landmark {l:?} off contour by {}", rho - r);
                // and the rendered pixel there is on the bright edge
                let px = s.image.pixels.data()[l.y.round() as usize * 64 + l.x.round() as usize];
                assert!(px > BACKGROUND_LEVEL + EDGE_LEVEL * 0.5);
            }
        }
    }

    #[test]
    fn landmark_arc_spacing_is_even() {
        let spec = SyntheticSpec::default();
        let s = &generate_synthetic_samples(&spec).unwrap()[3];
        let angles = s.contour.arc_length_angles(8);
        assert_eq!(angles[0], 0.0);
        let arc = |a: f64, b: f64| {
            let n = 2000;
            (0..n)
                .map(|i| {
                    let t0 = a + (b - a) * i as f64 / n as f64;
                    let t1 = a + (b - a) * (i + 1) as f64 / n as f64;
                    let (p, q) = (s.contour.point(t0), s.contour.point(t1));
                    (q.0 - p.0).hypot(q.1 - p.1)
                })
                .sum::<f64>()
        };
        let first = arc(angles[0], angles[1]);
        for k in 1..7 {
            assert!((arc(angles[k], angles[k + 1]) - first).abs() < 1e-3 * first);
        }
    }

    #[test]
    fn landmark_distances_are_shape_correlated() {
        let images = generate_synthetic(&SyntheticSpec {
            num_images: 200,
            ..SyntheticSpec::default()
        })
        .unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let d: Vec<f64> = images
                    .iter()
                    .map(|im| im.landmarks[i].distance(&im.landmarks[j]))
                    .collect();
                let mean = d.iter().sum::<f64>() / d.len() as f64;
                let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
                assert!(var.sqrt() / mean < 0.5);
            }
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let tiny = SyntheticSpec {
            image_size: (16, 16),
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&tiny), Err(Error::InvalidConfig(_))));
        let none = SyntheticSpec {
            num_images: 0,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&none).is_err());
        assert!(generate_synthetic(&SyntheticSpec {
            image_size: (32, 32),
            ..SyntheticSpec::default()
        })
        .is_ok());
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let images = generate_synthetic(&SyntheticSpec {
            num_images: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        write_dataset(dir.path(), &images).unwrap();
        std::fs::write(dir.path().join("images/zz_bad.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("annotations/zz_bad.txt"), "1,2\n3,4\n5,6\n7,8\n").unwrap();
        std::fs::write(dir.path().join("images/zz_noann.pgm"), b"P5 1 1 255 \x00").unwrap();
        let report = load_dataset(
            &dir.path().join("images"),
            &dir.path().join("annotations"),
            &LoadOptions {
                spacing: 1.0,
                ..LoadOptions::default()
            },
        )
        .unwrap();
        assert_eq!(report.images.len(), 3);
        assert_eq!(report.errors.len(), 2);
        for (a, b) in report.images.iter().zip(&images) {
            assert_eq!(a.landmarks, b.landmarks);
            for (p, q) in a.pixels.data().iter().zip(b.pixels.data()) {
                assert!((p - q).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_directory_warns() {
        let dir = tempfile::tempdir().unwrap();
        let report = load_dataset(dir.path(), dir.path(), &LoadOptions::default()).unwrap();
        assert!(report.images.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(load_dataset(&dir.path().join("missing"), dir.path(), &LoadOptions::default())
            .is_err());
    }
}
