//! Differential distortion operators, the mixed-monomial distortion matrix of
//! a kernel center, and its truncated-SVD basis.
//!
//! Each operator is the small perturbation `P̃` of a near-identity distortion
//! `I + P̃` (x/y translation, x/y expansion, rotation), built from central
//! difference stencils. For a center `x`, the distortion matrix collects
//! `P̃_1^a1 ··· P̃_5^a5 x` for every exponent tuple of total degree `1..=p`;
//! the top `q` left singular vectors span the distortion subspace.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Columns of the distortion matrix shorter than this (relative to the
/// center's norm) are treated as zero and dropped.
const ZERO_COLUMN_RTOL: f64 = 1e-13;

/// Residual norm below which the center is considered to lie inside its own
/// distortion subspace.
const AMPLITUDE_DEGENERACY: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistortionMode {
    XTranslation,
    YTranslation,
    XExpansion,
    YExpansion,
    Rotation,
}

impl DistortionMode {
    pub const ALL: [DistortionMode; 5] = [
        DistortionMode::XTranslation,
        DistortionMode::YTranslation,
        DistortionMode::XExpansion,
        DistortionMode::YExpansion,
        DistortionMode::Rotation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionMode::XTranslation => "x_translation",
            DistortionMode::YTranslation => "y_translation",
            DistortionMode::XExpansion => "x_expansion",
            DistortionMode::YExpansion => "y_expansion",
            DistortionMode::Rotation => "rotation",
        }
    }
}

/// Square sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseOperator {
    /// Builds from per-row `(column, value)` lists; duplicate columns are
    /// summed and exact zeros dropped.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = rows.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
            for (c, v) in row {
                debug_assert!(c < dim);
                match merged.last_mut() {
                    Some((lc, lv)) if *lc == c => *lv += v,
                    _ => merged.push((c, v)),
                }
            }
            for (c, v) in merged.into_iter().filter(|&(_, v)| v != 0.0) {
                cols.push(c);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Self {
            dim,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row_nnz(&self, row: usize) -> usize {
        self.row_ptr[row + 1] - self.row_ptr[row]
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "operator/vector size mismatch");
        (0..self.dim)
            .map(|r| {
                let span = self.row_ptr[r]..self.row_ptr[r + 1];
                self.cols[span.clone()]
                    .iter()
                    .zip(&self.vals[span])
                    .map(|(&c, &v)| v * x[c])
                    .sum()
            })
            .collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                m[(r, self.cols[i])] = self.vals[i];
            }
        }
        m
    }
}

/// One distortion mode's perturbation matrix `P̃`, already scaled by `step`.
#[derive(Debug, Clone)]
pub struct DistortionOperator {
    pub mode: DistortionMode,
    pub matrix: SparseOperator,
    pub step: f64,
}

impl DistortionOperator {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix.apply(x)
    }
}

/// Builds the five distortion operators for `width × height` images.
///
/// Derivatives are central differences `(f[i+1] - f[i-1]) / 2` with indices
/// clamped at the border, which coincides with zero padding whenever the
/// border pixels are zero. Pixel coordinates `(u, v)` are measured from the
/// image center and divided by half the width (height).
pub fn build_operators(width: usize, height: usize, step: f64) -> Result<Vec<DistortionOperator>> {
    if width < 3 || height < 3 {
        return Err(Error::Size(format!(
            "distortion stencils need at least 3x3 pixels, got {width}x{height}"
        )));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("operator step {step} outside (0, 1]")));
    }
    let dim = width * height;
    let idx = |r: usize, c: usize| r * width + c;
    let u = |c: usize| (c as f64 - (width as f64 - 1.0) / 2.0) / (width as f64 / 2.0);
    let v = |r: usize| (r as f64 - (height as f64 - 1.0) / 2.0) / (height as f64 / 2.0);

    let dx = |r: usize, c: usize| -> [(usize, f64); 2] {
        [
            (idx(r, (c + 1).min(width - 1)), 0.5),
            (idx(r, c.saturating_sub(1)), -0.5),
        ]
    };
    let dy = |r: usize, c: usize| -> [(usize, f64); 2] {
        [
            (idx((r + 1).min(height - 1), c), 0.5),
            (idx(r.saturating_sub(1), c), -0.5),
        ]
    };

    let build = |row: &dyn Fn(usize, usize) -> Vec<(usize, f64)>| {
        let mut rows = Vec::with_capacity(dim);
        for r in 0..height {
            for c in 0..width {
                rows.push(
                    row(r, c)
                        .into_iter()
                        .map(|(col, val)| (col, step * val))
                        .collect(),
                );
            }
        }
        SparseOperator::from_rows(rows)
    };

    let scaled = |taps: [(usize, f64); 2], s: f64| taps.map(|(c, w)| (c, s * w));

    DistortionMode::ALL
        .iter()
        .map(|&mode| {
            let matrix = match mode {
                DistortionMode::XTranslation => build(&|r, c| dx(r, c).to_vec()),
                DistortionMode::YTranslation => build(&|r, c| dy(r, c).to_vec()),
                DistortionMode::XExpansion => build(&|r, c| scaled(dx(r, c), u(c)).to_vec()),
                DistortionMode::YExpansion => build(&|r, c| scaled(dy(r, c), v(r)).to_vec()),
                DistortionMode::Rotation => build(&|r, c| {
                    let mut taps = scaled(dy(r, c), u(c)).to_vec();
                    taps.extend(scaled(dx(r, c), -v(r)));
                    taps
                }),
            };
            Ok(DistortionOperator { mode, matrix, step })
        })
        .collect()
}

/// Exponent tuples of length `modes` summing to `degree`, in descending
/// lexicographic order (so `P̃_1 x` precedes `P̃_2 x`).
pub(crate) fn exponent_tuples(modes: usize, degree: u32) -> Vec<Vec<u32>> {
    fn rec(modes: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == modes {
            prefix.push(remaining);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for a in (0..=remaining).rev() {
            prefix.push(a);
            rec(modes, remaining - a, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if modes > 0 {
        rec(modes, degree, &mut Vec::with_capacity(modes), &mut out);
    }
    out
}

/// The unit-normalized monomial columns of one kernel center.
#[derive(Debug, Clone)]
pub struct DistortionMatrix {
    /// `N² × columns`, every column of unit norm.
    pub matrix: DMatrix<f64>,
    /// Exponent tuple of each retained column.
    pub exponents: Vec<Vec<u32>>,
    /// Number of monomials generated before zero columns were dropped.
    pub monomial_count: usize,
}

impl DistortionMatrix {
    pub fn columns(&self) -> usize {
        self.matrix.ncols()
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.matrix.clone().singular_values().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }
}

/// Applies every mixed monomial of total degree `1..=p` to `center`.
///
/// Products are evaluated right to left, so the last mode acts first:
/// `P̃_1^a1 (P̃_2^a2 (··· P̃_5^a5 x))`. Intermediate products are shared.
pub fn build_distortion_matrix(
    center: &[f64],
    operators: &[DistortionOperator],
    p: u32,
) -> Result<DistortionMatrix> {
    if p == 0 {
        return Err(Error::Config("polynomial order must be at least 1".into()));
    }
    let dim = operators
        .first()
        .map(|op| op.matrix.dim())
        .ok_or_else(|| Error::Config("no distortion operators".into()))?;
    if center.len() != dim {
        return Err(Error::Shape {
            expected: dim,
            got: center.len(),
        });
    }
    let modes = operators.len();
    let center_norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    let threshold = ZERO_COLUMN_RTOL * center_norm;

    let mut products: HashMap<Vec<u32>, Vec<f64>> = HashMap::new();
    products.insert(vec![0; modes], center.to_vec());

    let mut columns: Vec<DVector<f64>> = Vec::new();
    let mut exponents = Vec::new();
    let mut monomial_count = 0;
    for degree in 1..=p {
        for tuple in exponent_tuples(modes, degree) {
            monomial_count += 1;
            // the leftmost operator with a nonzero exponent is applied last
            let first = tuple.iter().position(|&a| a > 0).expect("degree >= 1");
            let mut parent = tuple.clone();
            parent[first] -= 1;
            let vec = operators[first].apply(&products[&parent]);
            let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > threshold && norm > 0.0 {
                columns.push(DVector::from_iterator(dim, vec.iter().map(|v| v / norm)));
                exponents.push(tuple.clone());
            }
            products.insert(tuple, vec);
        }
    }
    if columns.is_empty() {
        return Err(Error::Degenerate(
            "every distortion monomial annihilates the center".into(),
        ));
    }
    Ok(DistortionMatrix {
        matrix: DMatrix::from_columns(&columns),
        exponents,
        monomial_count,
    })
}

/// Orthonormal description of one kernel's structured covariance: the
/// distortion subspace `U` and the amplitude direction `x_tilde`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionBasis {
    center: DVector<f64>,
    u: DMatrix<f64>,
    x_tilde: DVector<f64>,
}

impl DistortionBasis {
    /// Assembles a basis from stored parts, checking orthonormality of
    /// `[x_tilde, U]` within `1e-10` and `‖x_tilde‖ = 1` within `1e-12`.
    pub fn from_parts(center: DVector<f64>, u: DMatrix<f64>, x_tilde: DVector<f64>) -> Result<Self> {
        let dim = center.len();
        if u.nrows() != dim || x_tilde.len() != dim {
            return Err(Error::Validation(format!(
                "basis parts disagree on dimension: center {dim}, U {}x{}, x_tilde {}",
                u.nrows(),
                u.ncols(),
                x_tilde.len()
            )));
        }
        let basis = Self { center, u, x_tilde };
        basis.check_orthonormal()?;
        Ok(basis)
    }

    fn check_orthonormal(&self) -> Result<()> {
        let gram = self.u.tr_mul(&self.u);
        for i in 0..gram.nrows() {
            for j in 0..gram.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                if (gram[(i, j)] - target).abs() > 1e-10 {
                    return Err(Error::Validation(format!(
                        "U is not orthonormal: (UᵀU)[{i},{j}] = {}",
                        gram[(i, j)]
                    )));
                }
            }
        }
        let norm = self.x_tilde.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Validation(format!("‖x_tilde‖ = {norm}, expected 1")));
        }
        let cross = self.u.tr_mul(&self.x_tilde);
        if let Some(bad) = cross.iter().find(|v| v.abs() > 1e-10) {
            return Err(Error::Validation(format!(
                "x_tilde is not orthogonal to U (inner product {bad})"
            )));
        }
        Ok(())
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn x_tilde(&self) -> &DVector<f64> {
        &self.x_tilde
    }

    /// Distortion subspace dimension.
    pub fn q(&self) -> usize {
        self.u.ncols()
    }

    /// Pixels per image.
    pub fn dimension(&self) -> usize {
        self.center.len()
    }
}

/// Truncates the SVD of `a` to its top `q` left singular vectors and
/// orthogonalizes the center against them.
pub fn distortion_basis(center: &[f64], a: &DMatrix<f64>, q: usize) -> Result<DistortionBasis> {
    let dim = center.len();
    if a.nrows() != dim {
        return Err(Error::Shape {
            expected: dim,
            got: a.nrows(),
        });
    }
    let limit = a.ncols().min(dim.saturating_sub(1));
    if q == 0 || q > limit {
        return Err(Error::Config(format!(
            "subspace dimension {q} outside [1, {limit}] ({} columns, {dim} pixels)",
            a.ncols()
        )));
    }

    let svd = a.clone().svd(true, false);
    let full_u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    // stable: equal singular values keep the routine's order
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let u = DMatrix::from_columns(
        &order[..q]
            .iter()
            .map(|&i| full_u.column(i).into_owned())
            .collect::<Vec<_>>(),
    );

    let center = DVector::from_column_slice(center);
    let mut residual = &center - &u * u.tr_mul(&center);
    let residual_norm = residual.norm();
    if residual_norm < AMPLITUDE_DEGENERACY {
        return Err(Error::Degenerate(format!(
            "center lies in its own distortion subspace (residual {residual_norm:e})"
        )));
    }
    // second projection pass removes the rounding left by the first
    residual /= residual_norm;
    residual -= &u * u.tr_mul(&residual);
    let x_tilde = residual.normalize();

    Ok(DistortionBasis { center, u, x_tilde })
}

/// Everything needed to turn a training image into a kernel basis.
#[derive(Debug, Clone)]
pub struct BasisBuilder {
    pub operators: Vec<DistortionOperator>,
    pub poly_order: u32,
    pub subspace_dim: usize,
}

impl BasisBuilder {
    pub fn new(width: usize, height: usize, step: f64, poly_order: u32, subspace_dim: usize) -> Result<Self> {
        Ok(Self {
            operators: build_operators(width, height, step)?,
            poly_order,
            subspace_dim,
        })
    }

    pub fn build(&self, center: &[f64]) -> Result<DistortionBasis> {
        let a = build_distortion_matrix(center, &self.operators, self.poly_order)?;
        distortion_basis(center, &a.matrix, self.subspace_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f64> {
        // zero border, like a margin-padded digit
        let mut img = vec![0.0; w * h];
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                img[r * w + c] = rng.random::<f64>();
            }
        }
        img
    }

    #[test]
    fn too_small_images_are_rejected() {
        assert!(matches!(build_operators(2, 5, 0.5), Err(Error::Size(_))));
        assert!(matches!(build_operators(5, 5, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn constant_image_is_annihilated() {
        let ops = build_operators(6, 6, 0.5).unwrap();
        let x = vec![0.7; 36];
        for op in &ops {
            assert!(op.apply(&x).iter().all(|&v| v.abs() < 1e-15), "{:?}", op.mode);
        }
        assert!(matches!(
            build_distortion_matrix(&x, &ops, 3),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rotation_fixes_center_pixel() {
        let ops = build_operators(9, 9, 0.5).unwrap();
        let mut x = vec![0.0; 81];
        x[4 * 9 + 4] = 1.0;
        let rot = ops.iter().find(|o| o.mode == DistortionMode::Rotation).unwrap();
        assert_eq!(rot.apply(&x)[4 * 9 + 4], 0.0);
    }

    #[test]
    fn zero_image_maps_to_zero() {
        for op in build_operators(5, 7, 0.5).unwrap() {
            assert!(op.apply(&[0.0; 35]).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stencil_taps_per_row() {
        for op in build_operators(30, 30, 0.5).unwrap() {
            let max = (0..900).map(|r| op.matrix.row_nnz(r)).max().unwrap();
            assert!(max <= 4, "{:?} has a row with {max} taps", op.mode);
            let expected_max = if op.mode == DistortionMode::Rotation { 4 } else { 2 };
            assert_eq!(max, expected_max, "{:?}", op.mode);
        }
    }

    #[test]
    fn clamped_border_matches_zero_padding_on_zero_border() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (7, 6);
        let x = random_image(&mut rng, w, h);
        let ops = build_operators(w, h, 1.0).unwrap();
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                x[r as usize * w + c as usize]
            }
        };
        let dx = ops[0].apply(&x);
        let dy = ops[1].apply(&x);
        for r in 0..h as isize {
            for c in 0..w as isize {
                let i = r as usize * w + c as usize;
                assert_eq!(dx[i], (at(r, c + 1) - at(r, c - 1)) / 2.0);
                assert_eq!(dy[i], (at(r + 1, c) - at(r - 1, c)) / 2.0);
            }
        }
    }

    #[test]
    fn scaled_operator_norms_below_one() {
        for op in build_operators(12, 12, 0.5).unwrap() {
            let s = op.matrix.to_dense().singular_values().max();
            assert!(s < 1.0, "{:?}: {s}", op.mode);
        }
    }

    #[test]
    fn monomial_counts() {
        assert_eq!(exponent_tuples(5, 1).len(), 5);
        let total: usize = (1..=3).map(|d| exponent_tuples(5, d).len()).sum();
        assert_eq!(total, 55);
        assert_eq!(exponent_tuples(5, 1)[0], vec![1, 0, 0, 0, 0]);
        assert_eq!(exponent_tuples(2, 2), vec![vec![2, 0], vec![1, 1], vec![0, 2]]);
    }

    #[test]
    fn distortion_matrix_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_image(&mut rng, 8, 8);
        let ops = build_operators(8, 8, 0.5).unwrap();
        let a1 = build_distortion_matrix(&x, &ops, 1).unwrap();
        assert_eq!((a1.monomial_count, a1.columns()), (5, 5));
        let a3 = build_distortion_matrix(&x, &ops, 3).unwrap();
        assert_eq!(a3.monomial_count, 55);
        assert_eq!(a3.columns(), 55);
        for c in a3.matrix.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
        // first column is the normalized x-translation of the center
        let direct = DVector::from_vec(ops[0].apply(&x)).normalize();
        assert!((a3.matrix.column(0) - direct).norm() < 1e-14);
    }

    #[test]
    fn mixed_monomial_order_is_right_to_left() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_image(&mut rng, 7, 7);
        let ops = build_operators(7, 7, 0.5).unwrap();
        let a = build_distortion_matrix(&x, &ops, 2).unwrap();
        let pos = a.exponents.iter().position(|t| t == &vec![1, 0, 0, 0, 1]).unwrap();
        let expected = DVector::from_vec(ops[0].apply(&ops[4].apply(&x))).normalize();
        assert!((a.matrix.column(pos) - expected).norm() < 1e-14);
    }

    #[test]
    fn orthonormal_input_basis_spans_same_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = DMatrix::from_fn(20, 4, |_, _| rng.random::<f64>() - 0.5);
        let a = raw.qr().q();
        let center: Vec<f64> = (0..20).map(|_| rng.random::<f64>()).collect();
        let basis = distortion_basis(&center, &a, 4).unwrap();
        let diff = basis.u() * basis.u().transpose() - &a * a.transpose();
        assert!(diff.norm() < 1e-9);
        assert!(basis.u().tr_mul(basis.x_tilde()).amax() < 1e-10);
    }

    #[test]
    fn basis_invariants_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_image(&mut rng, 8, 8);
        let builder = BasisBuilder::new(8, 8, 0.5, 3, 10).unwrap();
        let basis = builder.build(&x).unwrap();
        assert_eq!(basis.q(), 10);
        DistortionBasis::from_parts(basis.center().clone(), basis.u().clone(), basis.x_tilde().clone()).unwrap();

        let a = build_distortion_matrix(&x, &builder.operators, 1).unwrap();
        assert!(matches!(distortion_basis(&x, &a.matrix, 6), Err(Error::Config(_))));
        assert!(matches!(distortion_basis(&x, &a.matrix, 0), Err(Error::Config(_))));
    }

    #[test]
    fn center_inside_subspace_is_degenerate() {
        let a = DMatrix::from_column_slice(4, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let err = distortion_basis(&[0.3, -0.2, 0.0, 0.0], &a, 2).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn corrupted_parts_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_image(&mut rng, 6, 6);
        let basis = BasisBuilder::new(6, 6, 0.5, 2, 4).unwrap().build(&x).unwrap();
        let mut u = basis.u().clone();
        u[(3, 1)] += 1e-6;
        assert!(DistortionBasis::from_parts(basis.center().clone(), u, basis.x_tilde().clone()).is_err());
    }
}
