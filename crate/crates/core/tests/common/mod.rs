#![allow(dead_code)]

use std::path::PathBuf;

use kernel_distortion::dataset::{self, LabeledImageSet};
use kernel_distortion::distortion::DistortionBasis;
use kernel_distortion::hybrid::PosteriorTable;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Anisotropic Gaussian stroke.
#[derive(Debug, Clone, Copy)]
pub struct Stroke {
    pub cx: f64,
    pub cy: f64,
    pub sx: f64,
    pub sy: f64,
    pub amp: f64,
}

/// A smooth synthetic "glyph" that can be rendered at sub-pixel offsets.
#[derive(Debug, Clone)]
pub struct Glyph(pub Vec<Stroke>);

impl Glyph {
    pub fn random(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Self {
        let n = rng.random_range(2..=4);
        let (w, h) = (width as f64, height as f64);
        Glyph(
            (0..n)
                .map(|_| Stroke {
                    cx: rng.random_range(0.3 * w..0.7 * w),
                    cy: rng.random_range(0.3 * h..0.7 * h),
                    sx: rng.random_range(0.08 * w..0.2 * w),
                    sy: rng.random_range(0.08 * h..0.2 * h),
                    amp: rng.random_range(0.5..1.0),
                })
                .collect(),
        )
    }

    /// Renders shifted by `(dx, dy)` pixels, clipped to `[0, 1]`.
    pub fn render(&self, width: usize, height: usize, dx: f64, dy: f64) -> Vec<f64> {
        let mut img = vec![0.0; width * height];
        for r in 0..height {
            for c in 0..width {
                let v: f64 = self
                    .0
                    .iter()
                    .map(|s| {
                        let ex = (c as f64 - s.cx - dx) / s.sx;
                        let ey = (r as f64 - s.cy - dy) / s.sy;
                        s.amp * (-0.5 * (ex * ex + ey * ey)).exp()
                    })
                    .sum();
                img[r * width + c] = v.min(1.0);
            }
        }
        img
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f64> {
    Glyph::random(rng, width, height).render(width, height, 0.0, 0.0)
}

/// Noisy, slightly shifted and rescaled renderings of one glyph per class.
pub fn glyph_classes(
    rng: &mut ChaCha8Rng,
    width: usize,
    height: usize,
    classes: usize,
    per_class: usize,
    noise: f64,
) -> LabeledImageSet {
    let glyphs: Vec<Glyph> = (0..classes).map(|_| Glyph::random(rng, width, height)).collect();
    let normal = Normal::new(0.0, noise).unwrap();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..per_class {
        for (m, g) in glyphs.iter().enumerate() {
            let dx = rng.random_range(-0.6..0.6);
            let dy = rng.random_range(-0.6..0.6);
            let amp = rng.random_range(0.8..1.0);
            let img = g
                .render(width, height, dx, dy)
                .into_iter()
                .map(|v| (amp * v + normal.sample(rng)).clamp(0.0, 1.0))
                .collect();
            images.push(img);
            labels.push(m);
        }
    }
    LabeledImageSet::new(images, labels, width, height, classes).unwrap()
}

/// The two-cluster synthetic selection set: 8x8 images (64 dims) drawn
/// around two glyphs. Returns the samples and their cluster of origin.
pub fn two_cluster_set(seed: u64, samples: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = glyph_classes(&mut rng, 8, 8, 2, samples / 2, 0.03);
    (set.images().to_vec(), set.labels().to_vec())
}

/// Independent dense Gaussian log-density: builds the covariance from the
/// basis parts and evaluates through a Cholesky factor.
pub fn dense_log_density(x: &[f64], basis: &DistortionBasis, sigma_d2: f64, sigma_o2: f64) -> f64 {
    let n = basis.dimension();
    let mut r = DMatrix::<f64>::identity(n, n) * sigma_o2;
    let gain = sigma_d2 - sigma_o2;
    let mut add_direction = |v: &[f64]| {
        for i in 0..n {
            for j in 0..n {
                r[(i, j)] += gain * v[i] * v[j];
            }
        }
    };
    for col in basis.u().column_iter() {
        add_direction(col.as_slice());
    }
    add_direction(basis.x_tilde().as_slice());
    let chol = r.cholesky().expect("covariance is positive definite");
    let d = DVector::from_iterator(n, x.iter().zip(basis.center().iter()).map(|(a, b)| a - b));
    let z = chol.l().solve_lower_triangular(&d).unwrap();
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (z.norm_squared() + log_det + n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Largest deviation of `[x̃, U]ᵀ[x̃, U]` from the identity.
pub fn orthonormality_error(basis: &DistortionBasis) -> f64 {
    let n = basis.dimension();
    let q = basis.q();
    let mut g = DMatrix::zeros(n, q + 1);
    g.column_mut(0).copy_from(basis.x_tilde());
    g.columns_mut(1, q).copy_from(basis.u());
    let gram = g.tr_mul(&g) - DMatrix::<f64>::identity(q + 1, q + 1);
    gram.amax()
}

pub fn mnist_paths() -> (PathBuf, PathBuf) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    (root.join("images.idx3-ubyte"), root.join("labels.idx1-ubyte"))
}

/// The local MNIST digits padded with a one-pixel margin (30x30).
pub fn load_mnist_padded() -> LabeledImageSet {
    let (images, labels) = mnist_paths();
    assert!(
        images.exists() && labels.exists(),
        "MNIST files missing under data/mnist; run scripts/mnist_from_npm.py"
    );
    let set = dataset::load_idx(&images, &labels).expect("MNIST loads");
    dataset::pad_margin(&set, 1)
}

fn one_hot_soft(m: usize, class: usize, confidence: f64, second: usize, second_mass: f64) -> Vec<f64> {
    let rest = (1.0 - confidence - second_mass) / (m - 2) as f64;
    (0..m)
        .map(|j| {
            if j == class {
                confidence
            } else if j == second {
                second_mass
            } else {
                rest
            }
        })
        .collect()
}

/// Two synthetic posterior tables whose argmax errors fall on disjoint
/// `error_fraction` subsets. Right answers are confident; wrong answers
/// are hesitant and keep most of the remaining mass on the true class.
pub fn disjoint_error_tables(
    n: usize,
    m: usize,
    error_fraction: f64,
    seed: u64,
) -> (PosteriorTable, PosteriorTable, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let bad = (n as f64 * error_fraction).round() as usize;
    let mut d_wrong = vec![false; n];
    let mut g_wrong = vec![false; n];
    for &i in &order[..bad] {
        d_wrong[i] = true;
    }
    for &i in &order[bad..2 * bad] {
        g_wrong[i] = true;
    }
    let row = |label: usize, wrong: bool, rng: &mut ChaCha8Rng| {
        let other = (label + rng.random_range(1..m)) % m;
        if wrong {
            let top: f64 = rng.random_range(0.45..0.6);
            let truth = rng.random_range(0.25..((1.0 - top) * 0.95).min(top - 0.05));
            one_hot_soft(m, other, top, label, truth)
        } else {
            let top = rng.random_range(0.75..0.97);
            let second = rng.random_range(0.0..(1.0 - top) * 0.9);
            one_hot_soft(m, label, top, other, second)
        }
    };
    let mut pd = Vec::with_capacity(n);
    let mut pg = Vec::with_capacity(n);
    for i in 0..n {
        pd.push(row(labels[i], d_wrong[i], &mut rng));
        pg.push(row(labels[i], g_wrong[i], &mut rng));
    }
    (
        PosteriorTable::new(pd, "synthetic-discriminative").unwrap(),
        PosteriorTable::new(pg, "synthetic-generative").unwrap(),
        labels,
    )
}

/// Random posterior rows (possibly with exact ties) for `n` samples.
pub fn random_table(rng: &mut ChaCha8Rng, n: usize, m: usize, name: &str) -> PosteriorTable {
    let rows = (0..n)
        .map(|_| {
            if rng.random_bool(0.1) {
                vec![1.0 / m as f64; m]
            } else {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            }
        })
        .collect();
    PosteriorTable::new(rows, name).unwrap()
}
