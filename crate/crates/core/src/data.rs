//! Datasets: directory loading, the synthetic shape task, stratified splits
//! and image file I/O.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sbcit_tensor::Tensor;

use crate::config::SplitPlan;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable identifier, unique within a dataset.
    pub id: String,
    pub label: usize,
    /// `[C, H, W]` image.
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Provenance {
    Directory(PathBuf),
    Synthetic { seed: u64, per_class: usize, size: usize },
    Subset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
    /// Files that could not be decoded while loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, provenance: Provenance) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut shape: Option<&[usize]> = None;
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::Data(format!(
                    "sample {} has label {} but only {} classes",
                    s.id,
                    s.label,
                    class_names.len()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", s.id)));
            }
            match shape {
                None => shape = Some(s.image.shape()),
                Some(sh) if sh != s.image.shape() => {
                    return Err(Error::Data(format!(
                        "sample {} has shape {:?}, expected {sh:?}",
                        s.id,
                        s.image.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset {
            samples,
            class_names,
            provenance,
            skipped: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Stacks the images at `indices` into `[B, C, H, W]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let parts: Vec<Tensor<f32>> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        Ok(Tensor::stack(&parts)?)
    }

    /// All images as one `[N, C, H, W]` tensor.
    pub fn images(&self) -> Result<Tensor<f32>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            provenance: Provenance::Subset,
            skipped: 0,
        }
    }
}

/// A decoded single-channel image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

fn skip_ws_and_comments(bytes: &[u8], mut i: usize) -> usize {
    loop {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else {
            return i;
        }
    }
}

/// Decodes a binary PGM (P5) with 8- or 16-bit samples.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err("not a binary PGM (missing P5 magic)".into());
    }
    let mut i = 2;
    let mut fields = [0usize; 3];
    for (f, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        i = skip_ws_and_comments(bytes, i);
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        *f = std::str::from_utf8(&bytes[start..i])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {name} in header"))?;
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err("header not terminated by whitespace".into());
    }
    i += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
        return Err(format!("unsupported geometry {width}x{height}, maxval {maxval}"));
    }
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let body = &bytes[i..];
    if body.len() < need {
        return Err(format!("truncated pixel data: {} of {need} bytes", body.len()));
    }
    let scale = maxval as f32;
    let pixels = if wide {
        body[..need]
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 / scale).min(1.0))
            .collect()
    } else {
        body[..need].iter().map(|&b| (b as f32 / scale).min(1.0)).collect()
    };
    Ok(GrayImage { width, height, pixels })
}

/// Encodes `[0, 1]` intensities as an 8-bit P5 PGM; values are clamped.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| (p.0[0] + p.0[1] + p.0[2]) / 3.0).collect();
    Ok(GrayImage {
        width: w as usize,
        height: h as usize,
        pixels,
    })
}

#[cfg(not(feature = "png"))]
fn decode_png(_: &[u8]) -> std::result::Result<GrayImage, String> {
    Err("PNG support was not compiled in (enable the `png` feature)".into())
}

pub fn read_image(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let decoded = match ext.as_str() {
        "pgm" => decode_pgm(&bytes),
        "png" => decode_png(&bytes),
        _ if bytes.starts_with(b"P5") => decode_pgm(&bytes),
        _ => Err(format!("unsupported image format `{ext}`")),
    };
    decoded.map_err(|reason| Error::format(path, reason))
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Bilinear resize with edge clamping and pixel-center alignment.
pub fn resize_bilinear(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let at = |x: usize, y: usize| img.pixels[y * img.width + x] as f64;
    let mut pixels = Vec::with_capacity(width * height);
    for oy in 0..height {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..width {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let tx = fx - x0 as f64;
            let top = at(x0, y0) * (1.0 - tx) + at(x1, y0) * tx;
            let bottom = at(x0, y1) * (1.0 - tx) + at(x1, y1) * tx;
            pixels.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    GrayImage { width, height, pixels }
}

impl GrayImage {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, self.height, self.width], self.pixels.clone()).expect("pixel count matches extent")
    }

    /// First channel of a `[C, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::Data(format!("expected a [C, H, W] image, got {s:?}")));
        }
        Ok(GrayImage {
            width: s[2],
            height: s[1],
            pixels: t.data()[..s[1] * s[2]].to_vec(),
        })
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')))
        .collect();
    entries.sort();
    Ok(entries)
}

/// Loads `<root>/<class>/<image>` files, resized to `size`×`size`.
///
/// Classes are ordered alphabetically unless `class_names` fixes the order,
/// in which case every named directory must exist. Files that fail to decode
/// are skipped with a warning and counted in [`Dataset::skipped`].
pub fn load_image_dataset(root: &Path, size: usize, class_names: Option<&[String]>) -> Result<Dataset> {
    let dirs: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_string))
        .collect();
    let names: Vec<String> = match class_names {
        Some(names) => {
            if let Some(missing) = names.iter().find(|n| !dirs.contains(n)) {
                return Err(Error::Data(format!("class directory {missing} not found under {}", root.display())));
            }
            names.to_vec()
        }
        None => dirs,
    };
    if names.is_empty() {
        return Err(Error::Data(format!("no class directories under {}", root.display())));
    }
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (label, name) in names.iter().enumerate() {
        let before = samples.len();
        for path in sorted_entries(&root.join(name))?.into_iter().filter(|p| p.is_file()) {
            match read_image(&path) {
                Ok(img) => {
                    let file = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                    samples.push(Sample {
                        id: format!("{name}/{file}"),
                        label,
                        image: resize_bilinear(&img, size, size).to_tensor(),
                    });
                }
                Err(e) => {
                    log::warn!("skipping {e}");
                    skipped += 1;
                }
            }
        }
        if samples.len() == before {
            return Err(Error::Data(format!("class directory {name} holds no readable images")));
        }
    }
    let mut ds = Dataset::new(samples, names, Provenance::Directory(root.to_path_buf()))?;
    ds.skipped = skipped;
    Ok(ds)
}

/// Noise level of the synthetic background.
pub const SYNTHETIC_NOISE: f64 = 0.05;
/// Intensity added inside a synthetic structure.
pub const SYNTHETIC_LEVEL: f64 = 2.0;
pub const SYNTHETIC_CLASSES: [&str; 4] = ["disk", "ring", "offset_disk", "blank"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

/// Whether pixel `(x, y)` lies on the structure of `class` centered at
/// `(cx, cy)` with outer radius `r`.
fn inside(class: usize, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    match class {
        0 => d <= r,
        1 => d >= r * 0.33 / 0.45 && d <= r,
        2 => d <= r,
        _ => false,
    }
}

/// Shapes on Gaussian noise: a centered disk, a ring, a small off-center
/// disk, or nothing. Centers and radii are jittered by up to ±10%.
pub fn generate_synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    if spec.size == 0 || spec.size % 32 != 0 {
        return Err(Error::Data(format!("synthetic size {} must be a positive multiple of 32", spec.size)));
    }
    if spec.classes == 0 || spec.classes > SYNTHETIC_CLASSES.len() {
        return Err(Error::Data(format!(
            "the synthetic task has between 1 and {} classes, {} requested",
            SYNTHETIC_CLASSES.len(),
            spec.classes
        )));
    }
    let s = spec.size as f64;
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for class in 0..spec.classes {
        // (center x, center y, radius) as fractions of the size.
        let (fx, fy, fr) = match class {
            0 => (0.5, 0.5, 0.3),
            1 => (0.5, 0.5, 0.45),
            2 => (0.8, 0.8, 0.15),
            _ => (0.5, 0.5, 0.0),
        };
        for i in 0..spec.per_class {
            let mut jitter = || rng.random_range(0.9..=1.1);
            let r = fr * s * jitter();
            let (jx, jy) = (jitter() - 1.0, jitter() - 1.0);
            let cx = fx * s - 0.5 + jx * fr * s;
            let cy = fy * s - 0.5 + jy * fr * s;
            let mut pixels = Vec::with_capacity(spec.size * spec.size);
            for y in 0..spec.size {
                for x in 0..spec.size {
                    let base = if inside(class, x as f64, y as f64, cx, cy, r) {
                        SYNTHETIC_LEVEL
                    } else {
                        0.0
                    };
                    pixels.push((base + noise.sample(&mut rng)) as f32);
                }
            }
            samples.push(Sample {
                id: format!("synthetic/{}/{i:05}", SYNTHETIC_CLASSES[class]),
                label: class,
                image: Tensor::new(vec![1, spec.size, spec.size], pixels)?,
            });
        }
    }
    let names = SYNTHETIC_CLASSES[..spec.classes].iter().map(|s| s.to_string()).collect();
    Dataset::new(
        samples,
        names,
        Provenance::Synthetic {
            seed: spec.seed,
            per_class: spec.per_class,
            size: spec.size,
        },
    )
}

/// Index sets of a three-way split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn share(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction) + 1e-9).floor() as usize
}

/// Stratified split: per class, `test_fraction` of the samples go to test,
/// then `val_fraction` of the rest to validation; rounding remainders stay
/// in train. Index lists are sorted.
pub fn split_dataset(ds: &Dataset, plan: &SplitPlan) -> Result<Splits> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in ds.samples.iter().enumerate() {
        by_class.entry(s.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for class in 0..ds.num_classes() {
        let mut members = by_class.remove(&class).unwrap_or_default();
        if members.len() < 3 {
            return Err(Error::Data(format!(
                "class {} has {} samples; a split needs at least 3",
                ds.class_names[class],
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_test = share(members.len(), plan.test_fraction);
        let n_val = share(members.len() - n_test, plan.val_fraction);
        splits.test.extend_from_slice(&members[..n_test]);
        splits.val.extend_from_slice(&members[n_test..n_test + n_val]);
        splits.train.extend_from_slice(&members[n_test + n_val..]);
    }
    for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
        part.sort_unstable();
    }
    Ok(splits)
}

/// `<source_id>,<split>` lines in dataset order.
pub fn split_manifest(ds: &Dataset, splits: &Splits) -> String {
    let mut tag = vec![""; ds.len()];
    for (name, part) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        for &i in part {
            tag[i] = name;
        }
    }
    let mut out = String::new();
    for (s, t) in ds.samples.iter().zip(tag) {
        let _ = writeln!(out, "{},{t}", s.id);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(per_class: usize, classes: usize) -> Dataset {
        let samples = (0..classes * per_class)
            .map(|i| Sample {
                id: format!("s{i}"),
                label: i / per_class,
                image: Tensor::zeros(vec![1, 2, 2]),
            })
            .collect();
        Dataset::new(samples, (0..classes).map(|c| format!("c{c}")).collect(), Provenance::Subset).unwrap()
    }

    #[test]
    fn split_sizes_for_hundred_per_class() {
        let ds = tiny(100, 4);
        let sp = split_dataset(&ds, &SplitPlan::default()).unwrap();
        assert_eq!((sp.test.len(), sp.val.len(), sp.train.len()), (120, 56, 224));
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..400).collect::<Vec<_>>());
        assert_eq!(sp, split_dataset(&ds, &SplitPlan::default()).unwrap());
    }

    #[test]
    fn tiny_classes_are_rejected() {
        let ds = tiny(2, 2);
        assert!(split_dataset(&ds, &SplitPlan::default()).is_err());
    }

    #[test]
    fn pgm_round_trip_and_normalization() {
        let img = GrayImage {
            width: 3,
            height: 2,
            pixels: vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0],
        };
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        assert_eq!((back.width, back.height), (3, 2));
        assert!(back.pixels.iter().zip(&img.pixels).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
        let full = decode_pgm(b"P5\n# note\n2 1\n255\n\xff\xff").unwrap();
        assert_eq!(full.pixels, vec![1.0, 1.0]);
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
    }

    #[test]
    fn resize_keeps_constants_and_extent() {
        let img = GrayImage {
            width: 128,
            height: 128,
            pixels: vec![0.75; 128 * 128],
        };
        let r = resize_bilinear(&img, 64, 64);
        assert_eq!(r.to_tensor().shape(), &[1, 64, 64]);
        assert!(r.pixels.iter().all(|&v| (v - 0.75).abs() < 1e-6));
    }

    #[test]
    fn synthetic_is_deterministic_and_separated() {
        let spec = SyntheticSpec {
            classes: 4,
            per_class: 40,
            size: 64,
            seed: 7,
        };
        let a = generate_synthetic(spec).unwrap();
        assert_eq!(a, generate_synthetic(spec).unwrap());
        assert_eq!(a.class_counts(), vec![40; 4]);
        let means: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut m = vec![0.0; 64 * 64];
                for s in a.samples.iter().filter(|s| s.label == c) {
                    for (acc, &v) in m.iter_mut().zip(s.image.data()) {
                        *acc += v as f64 / 40.0;
                    }
                }
                m
            })
            .collect();
        let bound = 10.0 * SYNTHETIC_NOISE * 64.0;
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = means[i].iter().zip(&means[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                assert!(d > bound, "classes {i} and {j}: {d} ≤ {bound}");
            }
        }
    }

    #[test]
    fn manifest_tags_every_sample() {
        let ds = tiny(10, 2);
        let sp = split_dataset(&ds, &SplitPlan::default()).unwrap();
        let m = split_manifest(&ds, &sp);
        assert_eq!(m.lines().count(), 20);
        assert!(m.lines().all(|l| l.ends_with(",train") || l.ends_with(",val") || l.ends_with(",test")));
    }
}
