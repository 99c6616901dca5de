//! Grayscale dumps of kernel centers and distortion basis vectors.
//!
//! Images are binary PGM: `P5\n<width> <height>\n255\n` followed by one byte
//! per pixel, row-major.

use std::fs;
use std::path::{Path, PathBuf};

use crate::classify::Classifier;
use crate::error::{Error, Result};

/// Linearly maps the minimum to 0 and the maximum to 255. A constant input
/// becomes uniform mid-gray (128).
pub fn rescale_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary PGM with maxval 255, returning `(width, height, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |m: &str| Error::Format(format!("PGM: {m}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
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
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated raster"))?;
    Ok((w, h, data.to_vec()))
}

/// Writes the center and the first (up to) three columns of `U` of kernel
/// `k` in class `m`. Returns the written paths.
pub fn inspect_kernel(classifier: &Classifier, m: usize, k: usize, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let model = classifier.models().get(m).ok_or_else(|| {
        Error::Config(format!("class {m} out of range (model has {})", classifier.class_count()))
    })?;
    let kernel = model.kernels().get(k).ok_or_else(|| {
        Error::Config(format!("kernel {k} out of range (class {m} has {})", model.kernels().len()))
    })?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (w, h) = (classifier.width(), classifier.height());
    let basis = &kernel.basis;

    let mut images: Vec<(String, Vec<f64>)> =
        vec![(format!("class{m}_kernel{k}_center.pgm"), basis.center().iter().copied().collect())];
    for j in 0..basis.q().min(3) {
        images.push((
            format!("class{m}_kernel{k}_u{}.pgm", j + 1),
            basis.u().column(j).iter().copied().collect(),
        ));
    }
    let mut written = Vec::with_capacity(images.len());
    for (name, values) in images {
        let path = out_dir.join(name);
        fs::write(&path, encode_pgm(w, h, &rescale_to_bytes(&values))).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
