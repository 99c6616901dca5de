//! Model container: a text manifest plus one binary array file per class.
//!
//! ```text
//! <dir>/manifest.txt     key=value lines (see `save_model`)
//! <dir>/class_000.bin    weights, then for each kernel: center, x_tilde, U
//! ```
//!
//! Every array is a header of two little-endian `u64` (rows, cols) followed
//! by `rows * cols` little-endian `f64` in row-major order. Weights and the
//! vectors are stored as `1 x n` arrays, `U` as `N² x q`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::classify::{Classifier, TrainingInfo};
use crate::density::{ClassModel, Kernel, VarianceParams};
use crate::distortion::DistortionBasis;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

pub fn class_file_name(m: usize) -> String {
    format!("class_{m:03}.bin")
}

fn push_array(buf: &mut Vec<u8>, rows: usize, cols: usize, row_major: impl Iterator<Item = f64>) {
    buf.extend_from_slice(&(rows as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for v in row_major {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_class(model: &ClassModel) -> Vec<u8> {
    let mut buf = Vec::new();
    let k = model.kernels().len();
    push_array(&mut buf, 1, k, model.kernels().iter().map(|k| k.weight));
    for kernel in model.kernels() {
        let b = &kernel.basis;
        let n = b.dimension();
        push_array(&mut buf, 1, n, b.center().iter().copied());
        push_array(&mut buf, 1, n, b.x_tilde().iter().copied());
        let u = b.u();
        push_array(
            &mut buf,
            u.nrows(),
            u.ncols(),
            (0..u.nrows()).flat_map(|r| (0..u.ncols()).map(move |c| u[(r, c)])),
        );
    }
    buf
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// The manifest text. Floats use the shortest representation that parses
/// back to the same bits.
pub fn manifest(classifier: &Classifier, note: Option<&str>) -> String {
    let v = classifier.variances();
    let info = &classifier.info;
    let (n, q) = (classifier.dimension(), classifier.subspace_dim());
    let mut out = String::from("# kernel-distortion model container\n");
    let _ = writeln!(out, "format_version={FORMAT_VERSION}");
    let _ = writeln!(out, "classes={}", classifier.class_count());
    let _ = writeln!(out, "width={}", classifier.width());
    let _ = writeln!(out, "height={}", classifier.height());
    let _ = writeln!(out, "dimension={n}");
    let _ = writeln!(out, "kernels={}", classifier.kernel_count());
    let _ = writeln!(out, "subspace_dim={q}");
    let _ = writeln!(out, "poly_order={}", info.poly_order);
    let _ = writeln!(out, "step={}", info.step);
    let _ = writeln!(out, "sigma_d2={}", v.sigma_d2());
    let _ = writeln!(out, "sigma_o2={}", v.sigma_o2());
    let _ = writeln!(out, "seed={}", info.seed);
    let _ = writeln!(out, "dataset_fingerprint={}", info.dataset_fingerprint);
    let _ = writeln!(out, "log_priors={}", join(classifier.log_priors()));
    let _ = writeln!(out, "array.weights=1x{}", classifier.kernel_count());
    let _ = writeln!(out, "array.center=1x{n}");
    let _ = writeln!(out, "array.x_tilde=1x{n}");
    let _ = writeln!(out, "array.u={n}x{q}");
    for model in classifier.models() {
        let m = model.class_index();
        let _ = writeln!(out, "class.{m}.file={}", class_file_name(m));
        let _ = writeln!(
            out,
            "class.{m}.kernel_ids={}",
            join(model.kernels().iter().map(|k| k.sample_id))
        );
    }
    if let Some(note) = note {
        let _ = writeln!(out, "note={}", note.replace('\n', " "));
    }
    out
}

/// Writes the container into `dir` (created if missing).
pub fn save_model(classifier: &Classifier, dir: impl AsRef<Path>) -> Result<()> {
    save_model_with_note(classifier, dir, None)
}

/// Like [`save_model`]; `note` is stored in the manifest and ignored on load.
pub fn save_model_with_note(classifier: &Classifier, dir: impl AsRef<Path>, note: Option<&str>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest(classifier, note)).map_err(|e| Error::io(&path, e))?;
    for model in classifier.models() {
        let path = dir.join(class_file_name(model.class_index()));
        fs::write(&path, encode_class(model)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

struct Manifest(HashMap<String, String>);

impl Manifest {
    fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .filter(|l| !l.starts_with('#'))
                .filter_map(|l| l.split_once('='))
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .collect(),
        )
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.0
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Integrity(format!("manifest lacks {key}")))
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse()
            .map_err(|_| Error::Integrity(format!("manifest {key}={raw:?} does not parse")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.raw(key)?;
        raw.split(',')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Integrity(format!("manifest {key} entry {s:?} does not parse")))
            })
            .collect()
    }
}

struct ArrayReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    class: usize,
}

impl ArrayReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let slice = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| {
            Error::Integrity(format!("class {} array file is truncated", self.class))
        })?;
        self.pos += n;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// Reads an array and checks its header against the expected shape.
    fn array(&mut self, rows: usize, cols: usize, what: &str) -> Result<Vec<f64>> {
        let (r, c) = (self.u64()? as usize, self.u64()? as usize);
        if (r, c) != (rows, cols) {
            return Err(Error::Integrity(format!(
                "class {}: {what} is {r}x{c}, manifest declares {rows}x{cols}",
                self.class
            )));
        }
        let data = self.take(rows * cols * 8)?;
        Ok(data
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Restores a classifier, re-validating every basis, weight vector and prior.
pub fn load_model(dir: impl AsRef<Path>) -> Result<Classifier> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let man = Manifest::parse(&text);

    let version = man.raw("format_version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Version(version.to_string()));
    }
    let classes: usize = man.get("classes")?;
    let width: usize = man.get("width")?;
    let height: usize = man.get("height")?;
    let n: usize = man.get("dimension")?;
    let k_total: usize = man.get("kernels")?;
    let q: usize = man.get("subspace_dim")?;
    if n != width * height {
        return Err(Error::Integrity(format!(
            "dimension {n} does not match {width}x{height}"
        )));
    }
    for (key, expected) in [
        ("array.weights", format!("1x{k_total}")),
        ("array.center", format!("1x{n}")),
        ("array.x_tilde", format!("1x{n}")),
        ("array.u", format!("{n}x{q}")),
    ] {
        if man.raw(key)? != expected {
            return Err(Error::Integrity(format!(
                "{key}={} inconsistent with dimensions ({expected})",
                man.raw(key)?
            )));
        }
    }
    let variances = VarianceParams::new(man.get("sigma_d2")?, man.get("sigma_o2")?)
        .map_err(|e| Error::Integrity(e.to_string()))?;
    let log_priors: Vec<f64> = man.list("log_priors")?;

    let mut models = Vec::with_capacity(classes);
    for m in 0..classes {
        let file = man.raw(&format!("class.{m}.file"))?;
        let ids: Vec<usize> = man.list(&format!("class.{m}.kernel_ids"))?;
        if ids.len() != k_total {
            return Err(Error::Integrity(format!(
                "class {m}: {} kernel ids for {k_total} kernels",
                ids.len()
            )));
        }
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut reader = ArrayReader {
            bytes: &bytes,
            pos: 0,
            class: m,
        };
        let weights = reader.array(1, k_total, "weights")?;
        let mut kernels = Vec::with_capacity(k_total);
        for (k, (&sample_id, &weight)) in ids.iter().zip(&weights).enumerate() {
            let center = reader.array(1, n, "center")?;
            let x_tilde = reader.array(1, n, "x_tilde")?;
            let u = reader.array(n, q, "U")?;
            let basis = DistortionBasis::from_parts(
                DVector::from_vec(center),
                DMatrix::from_row_slice(n, q, &u),
                DVector::from_vec(x_tilde),
            )
            .map_err(|e| Error::Integrity(format!("class {m} kernel {k}: {e}")))?;
            kernels.push(Kernel {
                sample_id,
                basis,
                weight,
            });
        }
        if reader.pos != bytes.len() {
            return Err(Error::Integrity(format!(
                "class {m}: {} trailing bytes in array file",
                bytes.len() - reader.pos
            )));
        }
        models.push(
            ClassModel::new(m, kernels, variances)
                .map_err(|e| Error::Integrity(format!("class {m}: {e}")))?,
        );
    }
    let mut classifier = Classifier::new(models, log_priors, width, height)
        .map_err(|e| Error::Integrity(e.to_string()))?;
    classifier.info = TrainingInfo {
        poly_order: man.get("poly_order")?,
        step: man.get("step")?,
        seed: man.get("seed")?,
        dataset_fingerprint: man.raw("dataset_fingerprint")?.to_string(),
    };
    Ok(classifier)
}
