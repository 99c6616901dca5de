//! Image ingestion: MNIST IDX files, delimited text (USPS interchange),
//! zero-margin padding and seeded stratified subsetting.
//!
//! Images are flattened row-major into `Vec<f64>` with pixels in `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A flattened, row-major grayscale image.
pub type Image = Vec<f64>;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Slack allowed on delimited pixels before they are rejected as out of range.
const PIXEL_TOLERANCE: f64 = 1e-9;

/// Labeled images of identical size.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    images: Vec<Image>,
    labels: Vec<usize>,
    width: usize,
    height: usize,
    class_count: usize,
}

impl LabeledImageSet {
    /// Validates every invariant: equal image lengths, pixels in `[0, 1]`,
    /// labels below `class_count`.
    pub fn new(
        images: Vec<Image>,
        labels: Vec<usize>,
        width: usize,
        height: usize,
        class_count: usize,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let dim = width * height;
        for (i, img) in images.iter().enumerate() {
            if img.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    got: img.len(),
                });
            }
            if let Some(v) = img.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Range(format!("image {i} has pixel {v} outside [0, 1]")));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Range(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            images,
            labels,
            width,
            height,
            class_count,
        })
    }

    /// Like [`LabeledImageSet::new`] with `class_count` inferred as `max(label) + 1`.
    pub fn with_inferred_classes(
        images: Vec<Image>,
        labels: Vec<usize>,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let class_count = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(images, labels, width, height, class_count)
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixels per image.
    pub fn dimension(&self) -> usize {
        self.width * self.height
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Images belonging to class `m`, in set order.
    pub fn class_images(&self, m: usize) -> Vec<Image> {
        self.images
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == m)
            .map(|(img, _)| img.clone())
            .collect()
    }

    /// The samples at `indices`, in the given order. Class count is kept.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            width: self.width,
            height: self.height,
            class_count: self.class_count,
        }
    }

    /// SHA-256 over the dimensions, labels and pixel bit patterns, in hex.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.width as u64).to_le_bytes());
        hasher.update((self.height as u64).to_le_bytes());
        for (img, &label) in self.images.iter().zip(&self.labels) {
            hasher.update((label as u64).to_le_bytes());
            for v in img {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}")),
    )
}

fn be_u32(bytes: &[u8], offset: usize) -> Option<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Reads an MNIST image/label IDX pair. Pixels are scaled by `1/255`.
pub fn load_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<LabeledImageSet> {
    let image_path = image_path.as_ref();
    let label_path = label_path.as_ref();
    let img_bytes = read_file(image_path)?;
    let lbl_bytes = read_file(label_path)?;

    let magic = be_u32(&img_bytes, 0).ok_or_else(|| truncated(image_path, "header"))?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}",
            image_path.display()
        )));
    }
    let count = be_u32(&img_bytes, 4).ok_or_else(|| truncated(image_path, "header"))? as usize;
    let rows = be_u32(&img_bytes, 8).ok_or_else(|| truncated(image_path, "header"))? as usize;
    let cols = be_u32(&img_bytes, 12).ok_or_else(|| truncated(image_path, "header"))? as usize;

    let magic = be_u32(&lbl_bytes, 0).ok_or_else(|| truncated(label_path, "header"))?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}",
            label_path.display()
        )));
    }
    let label_count = be_u32(&lbl_bytes, 4).ok_or_else(|| truncated(label_path, "header"))? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "{count} images but {label_count} labels"
        )));
    }

    let dim = rows * cols;
    let pixels = img_bytes
        .get(16..16 + count * dim)
        .ok_or_else(|| truncated(image_path, "pixel data"))?;
    let labels = lbl_bytes
        .get(8..8 + count)
        .ok_or_else(|| truncated(label_path, "label data"))?;

    let images = pixels
        .chunks_exact(dim.max(1))
        .take(count)
        .map(|chunk| chunk.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect();
    let labels = labels.iter().map(|&b| usize::from(b)).collect();
    LabeledImageSet::with_inferred_classes(images, labels, cols, rows)
}

/// Reads `label p1 ... pD` lines (whitespace- or comma-separated), skipping
/// blank lines and `#` comments.
pub fn load_delimited(path: impl AsRef<Path>, width: usize, height: usize) -> Result<LabeledImageSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_delimited(&text, width, height)
}

pub(crate) fn parse_delimited(text: &str, width: usize, height: usize) -> Result<LabeledImageSet> {
    let dim = width * height;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != dim + 1 {
            return Err(Error::Format(format!(
                "line {lineno}: expected {} fields (label + {dim} pixels), found {}",
                dim + 1,
                fields.len()
            )));
        }
        let label = parse_label(fields[0])
            .ok_or_else(|| Error::Format(format!("line {lineno}: bad label {:?}", fields[0])))?;
        let mut img = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f
                .parse()
                .map_err(|_| Error::Format(format!("line {lineno}: bad pixel {f:?}")))?;
            if !(-PIXEL_TOLERANCE..=1.0 + PIXEL_TOLERANCE).contains(&v) {
                return Err(Error::Range(format!(
                    "line {lineno}: pixel {v} outside [0, 1]"
                )));
            }
            img.push(v.clamp(0.0, 1.0));
        }
        images.push(img);
        labels.push(label);
    }
    LabeledImageSet::with_inferred_classes(images, labels, width, height)
}

fn parse_label(field: &str) -> Option<usize> {
    if let Ok(v) = field.parse::<usize>() {
        return Some(v);
    }
    let v: f64 = field.parse().ok()?;
    (v >= 0.0 && v.fract() == 0.0).then_some(v as usize)
}

/// Embeds every image centrally in a zero frame `margin` pixels wide on each side.
pub fn pad_margin(set: &LabeledImageSet, margin: usize) -> LabeledImageSet {
    if margin == 0 {
        return set.clone();
    }
    let (w, h) = (set.width, set.height);
    let (pw, ph) = (w + 2 * margin, h + 2 * margin);
    let images = set
        .images
        .iter()
        .map(|img| {
            let mut out = vec![0.0; pw * ph];
            for r in 0..h {
                let dst = (r + margin) * pw + margin;
                out[dst..dst + w].copy_from_slice(&img[r * w..(r + 1) * w]);
            }
            out
        })
        .collect();
    LabeledImageSet {
        images,
        labels: set.labels.clone(),
        width: pw,
        height: ph,
        class_count: set.class_count,
    }
}

/// Index form of [`stratified_sample`]: `per_class` indices of every class
/// drawn without replacement, and the remaining indices. Both lists ascend.
pub fn stratified_split_indices(
    labels: &[usize],
    class_count: usize,
    per_class: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; labels.len()];
    for (m, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::Capacity(format!(
                "class {m} has {} samples, {per_class} requested",
                members.len()
            )));
        }
        for pick in index::sample(&mut rng, members.len(), per_class) {
            chosen[members[pick]] = true;
        }
    }
    let (mut first, mut rest) = (Vec::new(), Vec::new());
    for (i, &c) in chosen.iter().enumerate() {
        if c {
            first.push(i);
        } else {
            rest.push(i);
        }
    }
    Ok((first, rest))
}

/// Splits a set into exactly `per_class` samples of each class and the remainder.
/// The same seed always yields the same split.
pub fn stratified_sample(
    set: &LabeledImageSet,
    per_class: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let (first, rest) = stratified_split_indices(&set.labels, set.class_count, per_class, seed)?;
    Ok((set.subset(&first), set.subset(&rest)))
}
