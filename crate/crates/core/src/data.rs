//! Datasets: synthetic two-class letter images, IDX ingestion, batching.
//!
//! Fluctuation states are never stored here. They are drawn per forward pass
//! by the network, so `(X, Y)` repeat across epochs while `S` does not.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::Tensor;
use crate::report::sig6;
use crate::rng::{self, tag};
use crate::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const DEFAULT_GLYPHS: &str = include_str!("../fixtures/letters.txt");

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Images `X` (values in `[0, 1]`) with integer labels `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: Split,
    images: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        split: Split,
        images: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let pixels = height * width;
        if images.len() != labels.len() * pixels {
            return Err(Error::shape(format!(
                "{} pixel values for {} images of {height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::domain("pixel values must lie in [0, 1]"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::domain(format!("label {bad} outside {classes} classes")));
        }
        Ok(Dataset {
            height,
            width,
            classes,
            split,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `indices` as a `[len, pixels]` tensor plus their labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut values = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            values.extend_from_slice(self.image(i));
        }
        let x = Tensor::new(&[indices.len(), self.pixels()], values).expect("consistent shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// One row per image: `label,p0,p1,...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for p in 0..self.pixels() {
            let _ = write!(out, ",p{p}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{}", self.labels[i]);
            for &v in self.image(i) {
                out.push(',');
                out.push_str(&sig6(v));
            }
            out.push('\n');
        }
        out
    }
}

/// A binary glyph mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Glyph {
    pub size: usize,
    pub mask: Vec<u8>,
}

impl Glyph {
    pub fn parse(rows: &[&str]) -> Result<Self> {
        let size = rows.len();
        let mut mask = Vec::with_capacity(size * size);
        for r in rows {
            if r.chars().count() != size {
                return Err(Error::format("glyph", format!("row `{r}` is not {size} wide")));
            }
            mask.extend(r.chars().map(|c| u8::from(c == '#')));
        }
        Ok(Glyph { size, mask })
    }

    /// Italic shear: row `r` shifts right by `slant * (center - r)` pixels.
    pub fn sheared(&self, slant: f64) -> Glyph {
        let n = self.size;
        let center = (n as f64 - 1.0) / 2.0;
        let mut mask = vec![0; n * n];
        for r in 0..n {
            let shift = (slant * (center - r as f64)).round() as isize;
            for c in 0..n {
                let src = c as isize - shift;
                if (0..n as isize).contains(&src) {
                    mask[r * n + c] = self.mask[r * n + src as usize];
                }
            }
        }
        Glyph { size: n, mask }
    }
}

/// Parameters of the two-class letter distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterSpec {
    /// Class templates, class `i` first.
    pub templates: Vec<Glyph>,
    /// Per-pixel flip probability.
    pub jitter: f64,
    /// Italic shear amplitude; each image is upright or sheared by this much.
    pub slant: f64,
}

impl Default for LetterSpec {
    fn default() -> Self {
        LetterSpec {
            templates: default_glyphs(),
            jitter: 0.1,
            slant: 0.3,
        }
    }
}

impl LetterSpec {
    pub fn size(&self) -> usize {
        self.templates[0].size
    }

    fn validate(&self) -> Result<()> {
        if self.templates.len() < 2 {
            return Err(Error::config("templates", "need at least two classes"));
        }
        let n = self.templates[0].size;
        if self.templates.iter().any(|g| g.size != n || g.mask.len() != n * n) {
            return Err(Error::config("templates", "templates must share one square size"));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("jitter", format!("{} not in [0, 0.5)", self.jitter)));
        }
        if !self.slant.is_finite() {
            return Err(Error::config("slant", "must be finite"));
        }
        Ok(())
    }
}

/// The built-in 16x16 `A` and `B` glyphs.
pub fn default_glyphs() -> Vec<Glyph> {
    let mut glyphs = Vec::new();
    let mut rows: Vec<&str> = Vec::new();
    for line in DEFAULT_GLYPHS.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if line.starts_with('[') {
            if !rows.is_empty() {
                glyphs.push(Glyph::parse(&rows).expect("valid fixture"));
                rows.clear();
            }
        } else {
            rows.push(line);
        }
    }
    glyphs.push(Glyph::parse(&rows).expect("valid fixture"));
    glyphs
}

/// `n_per_class` images per class, interleaved by class. Each image picks
/// upright or slanted with equal odds, then flips pixels independently.
pub fn gen_letters(spec: &LetterSpec, n_per_class: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n_per_class == 0 {
        return Err(Error::config("n_per_class", "must be >= 1"));
    }
    let classes = spec.templates.len();
    let variants: Vec<[Glyph; 2]> = spec
        .templates
        .iter()
        .map(|g| [g.clone(), g.sheared(spec.slant)])
        .collect();
    let mut rng = rng::stream(seed, &[tag::DATA]);
    let pixels = spec.size() * spec.size();
    let mut images = Vec::with_capacity(n_per_class * classes * pixels);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for _ in 0..n_per_class {
        for (class, pair) in variants.iter().enumerate() {
            let glyph = &pair[rng.gen_range(0..2)];
            for &bit in &glyph.mask {
                let flip = spec.jitter > 0.0 && rng.gen_bool(spec.jitter);
                images.push(f64::from(u8::from((bit == 1) != flip)));
            }
            labels.push(class);
        }
    }
    Dataset::new(spec.size(), spec.size(), classes, Split::Train, images, labels)
}

/// Index of the template with the fewest disagreeing pixels.
pub fn nearest_template(spec: &LetterSpec, image: &[f64]) -> usize {
    let distance = |g: &Glyph| {
        g.mask
            .iter()
            .zip(image)
            .filter(|(&b, &p)| (p >= 0.5) != (b == 1))
            .count()
    };
    (0..spec.templates.len())
        .min_by_key(|&c| distance(&spec.templates[c]))
        .unwrap()
}

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file truncated inside the header"))
}

/// Decodes an IDX unsigned-byte image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {IDX_IMAGES_MAGIC:#010x} for images, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let rows = be_u32(bytes, 8, "rows")? as usize;
    let cols = be_u32(bytes, 12, "cols")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::format(
            "pixels",
            format!("header declares {need} pixel bytes, file holds {}", body.len()),
        ));
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Decodes an IDX unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            "magic",
            format!("expected {IDX_LABELS_MAGIC:#010x} for labels, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::format(
            "labels",
            format!("header declares {n} labels, file holds {}", body.len()),
        ));
    }
    Ok(&body[..n])
}

/// Builds a dataset from IDX image and label bytes; pixels are scaled by 1/255.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            "count",
            format!("{n} images but {} labels", labels.len()),
        ));
    }
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let images = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(rows, cols, classes, Split::Train, images, labels)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    idx_dataset(&images, &labels)
}

/// Encodes `ds` as IDX image and label files (pixels rounded to bytes).
pub fn to_idx(ds: &Dataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + ds.images.len());
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend((ds.len() as u32).to_be_bytes());
    images.extend((ds.height as u32).to_be_bytes());
    images.extend((ds.width as u32).to_be_bytes());
    images.extend(ds.images.iter().map(|&p| (p * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend((ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels.iter().map(|&l| l as u8));
    (images, labels)
}

/// Shuffled index batches; the last partial batch is kept.
pub struct Batches {
    order: Vec<usize>,
    batch_size: usize,
    at: usize,
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.at >= self.order.len() {
            return None;
        }
        let end = (self.at + self.batch_size).min(self.order.len());
        let b = self.order[self.at..end].to_vec();
        self.at = end;
        Some(b)
    }
}

pub fn batches(ds: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Batches> {
    if batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::stream(shuffle_seed, &[tag::SHUFFLE]));
    Ok(Batches {
        order,
        batch_size,
        at: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_glyphs_are_16_square() {
        let g = default_glyphs();
        assert_eq!(g.len(), 2);
        assert!(g.iter().all(|g| g.size == 16 && g.mask.len() == 256));
        assert_ne!(g[0], g[1]);
    }

    #[test]
    fn noiseless_letters_equal_templates() {
        let spec = LetterSpec {
            jitter: 0.0,
            slant: 0.0,
            ..LetterSpec::default()
        };
        let ds = gen_letters(&spec, 5, 3).unwrap();
        assert_eq!(ds.len(), 10);
        for i in 0..ds.len() {
            let t = &spec.templates[ds.labels()[i]];
            let img: Vec<u8> = ds.image(i).iter().map(|&p| p as u8).collect();
            assert_eq!(img, t.mask);
            assert_eq!(nearest_template(&spec, ds.image(i)), ds.labels()[i]);
        }
    }

    #[test]
    fn letters_are_deterministic_and_balanced() {
        let spec = LetterSpec::default();
        let a = gen_letters(&spec, 20, 9).unwrap();
        let b = gen_letters(&spec, 20, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels().iter().filter(|&&y| y == 0).count(), 20);
        assert_ne!(a, gen_letters(&spec, 20, 10).unwrap());
    }

    #[test]
    fn flip_rate_matches_jitter() {
        // 10^4 images x 256 pixels; binomial 3 sigma on the mean is ~0.0006.
        let spec = LetterSpec {
            jitter: 0.1,
            slant: 0.0,
            ..LetterSpec::default()
        };
        let ds = gen_letters(&spec, 5000, 1).unwrap();
        let mut flips = 0usize;
        for i in 0..ds.len() {
            let t = &spec.templates[ds.labels()[i]];
            flips += t
                .mask
                .iter()
                .zip(ds.image(i))
                .filter(|(&b, &p)| (b == 1) != (p == 1.0))
                .count();
        }
        let rate = flips as f64 / (ds.len() * 256) as f64;
        assert!((rate - 0.1).abs() <= 0.01, "{rate}");
    }

    #[test]
    fn rejects_bad_specs() {
        let spec = LetterSpec {
            jitter: 0.5,
            ..LetterSpec::default()
        };
        assert!(gen_letters(&spec, 1, 0).is_err());
        assert!(gen_letters(&LetterSpec::default(), 0, 0).is_err());
    }

    #[test]
    fn shear_moves_top_rows_right() {
        let g = Glyph::parse(&["#..", "#..", "#.."]).unwrap();
        let s = g.sheared(1.0);
        assert_eq!(s.mask, vec![0, 1, 0, 1, 0, 0, 0, 0, 0]);
    }

    fn idx_pair(images: &[u8], n: u32, rows: u32, cols: u32, labels: &[u8], nl: u32) -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        im.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        im.extend(n.to_be_bytes());
        im.extend(rows.to_be_bytes());
        im.extend(cols.to_be_bytes());
        im.extend_from_slice(images);
        let mut lb = Vec::new();
        lb.extend(IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend(nl.to_be_bytes());
        lb.extend_from_slice(labels);
        (im, lb)
    }

    #[test]
    fn idx_examples() {
        let (im, lb) = idx_pair(&[], 0, 28, 28, &[], 0);
        assert!(idx_dataset(&im, &lb).unwrap().is_empty());

        let (im, lb) = idx_pair(&[0, 255, 0, 255], 1, 2, 2, &[1], 1);
        let ds = idx_dataset(&im, &lb).unwrap();
        assert_eq!(ds.image(0), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.labels(), &[1]);

        let (im, lb) = idx_pair(&[0; 40], 10, 2, 2, &[0; 9], 9);
        match idx_dataset(&im, &lb) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "count"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn idx_errors_name_the_field() {
        let (mut im, lb) = idx_pair(&[0; 4], 1, 2, 2, &[0], 1);
        im[3] = 0x01;
        match idx_dataset(&im, &lb) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
        let (im, lb) = idx_pair(&[0; 3], 1, 2, 2, &[0], 1);
        match idx_dataset(&im, &lb) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "pixels"),
            other => panic!("{other:?}"),
        }
        match idx_dataset(&im[..10], &lb) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "rows"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn idx_round_trip() {
        let ds = gen_letters(&LetterSpec::default(), 4, 2).unwrap();
        let (im, lb) = to_idx(&ds);
        assert_eq!(idx_dataset(&im, &lb).unwrap(), ds);
    }

    #[test]
    fn batch_sizes_and_order() {
        let ds = gen_letters(&LetterSpec::default(), 5, 0).unwrap();
        let sizes: Vec<usize> = batches(&ds, 3, 1).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let a: Vec<_> = batches(&ds, 3, 1).unwrap().collect();
        let b: Vec<_> = batches(&ds, 3, 1).unwrap().collect();
        assert_eq!(a, b);
        let all: Vec<_> = batches(&ds, 10, 1).unwrap().collect();
        assert_eq!(all.len(), 1);
        let mut seen = all[0].clone();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(batches(&ds, 0, 1).is_err());
    }

    #[test]
    fn csv_rows() {
        let spec = LetterSpec {
            jitter: 0.0,
            slant: 0.0,
            ..LetterSpec::default()
        };
        let csv = gen_letters(&spec, 1, 0).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0,"));
        assert_eq!(lines[1].split(',').count(), 257);
    }
}
