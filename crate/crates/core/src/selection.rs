//! Iterative kernel selection for one class.
//!
//! Each iteration re-estimates the kernel weights from the normalized
//! likelihood matrix, deletes the kernel whose removal costs the least total
//! log-likelihood, and promotes the non-kernel sample that attracts the most
//! assignment probability mass. The loop always holds exactly `K` kernels and
//! applies every swap unconditionally.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::density::{log_kernel_density, log_sum_exp, ClassModel, Kernel, VarianceParams};
use crate::distortion::{BasisBuilder, DistortionBasis};
use crate::error::{Error, Result};

/// Scale `C` of the assignment probabilities `exp(-D / C)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AssignmentScale {
    /// Mean of all finite pairwise distances of the class.
    Auto,
    Fixed(f64),
}

impl std::str::FromStr for AssignmentScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(AssignmentScale::Auto);
        }
        let c: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("assignment scale {s:?} is neither 'auto' nor a number")))?;
        if !(c > 0.0) {
            return Err(Error::Config(format!("assignment scale must be positive, got {c}")));
        }
        Ok(AssignmentScale::Fixed(c))
    }
}

impl std::fmt::Display for AssignmentScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssignmentScale::Auto => f.write_str("auto"),
            AssignmentScale::Fixed(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionConfig {
    pub kernel_count: usize,
    pub iterations: usize,
    pub assignment_scale: AssignmentScale,
    pub seed: u64,
    pub poly_order: u32,
    pub subspace_dim: usize,
    pub variances: VarianceParams,
    /// Scale of the distortion operators.
    pub step: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            kernel_count: 100,
            iterations: 500,
            assignment_scale: AssignmentScale::Auto,
            seed: 0,
            poly_order: 3,
            subspace_dim: 40,
            variances: VarianceParams::new(0.9, 0.03).expect("positive"),
            step: 0.5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_count < 2 {
            return Err(Error::Config(format!(
                "kernel count must be at least 2, got {}",
                self.kernel_count
            )));
        }
        if self.subspace_dim < 1 || self.poly_order < 1 {
            return Err(Error::Config(format!(
                "subspace dimension ({}) and polynomial order ({}) must be at least 1",
                self.subspace_dim, self.poly_order
            )));
        }
        if let AssignmentScale::Fixed(c) = self.assignment_scale {
            if !(c > 0.0) {
                return Err(Error::Config(format!("assignment scale must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// One completed remove/add swap.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    /// Total log-likelihood after the swap and weight update.
    pub log_likelihood: f64,
    pub removed: usize,
    pub added: usize,
    /// Higher-ranked candidates whose basis construction failed.
    pub skipped: Vec<usize>,
    pub density_evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionTrace {
    pub initial_log_likelihood: f64,
    pub initial_density_evaluations: u64,
    pub records: Vec<TraceRecord>,
}

impl SelectionTrace {
    /// Log-likelihood history, starting with the initialization.
    pub fn history(&self) -> Vec<f64> {
        std::iter::once(self.initial_log_likelihood)
            .chain(self.records.iter().map(|r| r.log_likelihood))
            .collect()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        self.records
            .last()
            .map_or(self.initial_log_likelihood, |r| r.log_likelihood)
    }

    /// Tab-separated log: `iteration log_likelihood removed added skipped
    /// density_evaluations`. Row 0 is the initialization; `-` marks no value.
    pub fn to_delimited(&self) -> String {
        let mut out = String::from("# iteration\tlog_likelihood\tremoved\tadded\tskipped\tdensity_evaluations\n");
        let _ = writeln!(
            out,
            "0\t{}\t-\t-\t-\t{}",
            self.initial_log_likelihood, self.initial_density_evaluations
        );
        for r in &self.records {
            let skipped = if r.skipped.is_empty() {
                "-".to_string()
            } else {
                r.skipped.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.iteration, r.log_likelihood, r.removed, r.added, skipped, r.density_evaluations
            );
        }
        out
    }

    pub fn write_delimited(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(self.to_delimited().as_bytes())
    }
}

/// Per-sample, per-kernel log-densities with each row's maximum kept as a
/// shift, so `W[i,k] = exp(log_density[i,k] - shift[i])` never underflows to
/// an all-zero row.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodMatrix {
    log_density: DMatrix<f64>,
    row_shift: Vec<f64>,
}

impl LikelihoodMatrix {
    pub fn from_log_densities(log_density: DMatrix<f64>) -> Self {
        let row_shift = (0..log_density.nrows())
            .map(|i| log_density.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        Self {
            log_density,
            row_shift,
        }
    }

    pub fn log_densities(&self) -> &DMatrix<f64> {
        &self.log_density
    }

    pub fn row_shift(&self) -> &[f64] {
        &self.row_shift
    }

    pub fn samples(&self) -> usize {
        self.log_density.nrows()
    }

    pub fn kernels(&self) -> usize {
        self.log_density.ncols()
    }

    /// The max-shifted likelihood matrix `W`.
    pub fn shifted(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.samples(), self.kernels(), |i, k| {
            (self.log_density[(i, k)] - self.row_shift[i]).exp()
        })
    }

    pub fn replace_column(&mut self, k: usize, column: &[f64]) {
        assert_eq!(column.len(), self.samples());
        for (i, &v) in column.iter().enumerate() {
            self.log_density[(i, k)] = v;
        }
        for i in 0..self.samples() {
            self.row_shift[i] = self.log_density.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }

    fn row_log_mixture(&self, i: usize, log_weights: &[f64], skip: Option<usize>) -> f64 {
        let row = self.log_density.row(i);
        let terms = log_weights
            .iter()
            .zip(row.iter())
            .enumerate()
            .filter(|&(k, _)| Some(k) != skip)
            .map(|(_, (lw, ld))| lw + ld);
        log_sum_exp(terms)
    }

    /// Total log-likelihood `Σ_i ln Σ_k w_k p_k(x_i)`.
    pub fn total_log_likelihood(&self, weights: &[f64]) -> f64 {
        let lw: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        (0..self.samples())
            .into_par_iter()
            .map(|i| self.row_log_mixture(i, &lw, None))
            .collect::<Vec<_>>()
            .iter()
            .sum()
    }

    /// Total log-likelihood with kernel `k` deleted and the remaining
    /// weights renormalized to sum to one.
    pub fn log_likelihood_without(&self, k: usize, weights: &[f64]) -> f64 {
        let rest = 1.0 - weights[k];
        if !(rest > 0.0) {
            return f64::NEG_INFINITY;
        }
        let lw: Vec<f64> = weights.iter().map(|w| (w / rest).ln()).collect();
        (0..self.samples())
            .map(|i| self.row_log_mixture(i, &lw, Some(k)))
            .sum()
    }
}

fn kernel_log_column(samples: &[Vec<f64>], basis: &DistortionBasis, v: &VarianceParams) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|x| log_kernel_density(x, basis, v))
        .collect()
}

/// `W[i,k] = p_k(x_i)` for every sample and kernel of `model`.
pub fn likelihood_matrix(samples: &[Vec<f64>], model: &ClassModel) -> Result<LikelihoodMatrix> {
    let k = model.kernels().len();
    let rows: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|x| {
            model
                .kernels()
                .iter()
                .map(|kernel| log_kernel_density(x, &kernel.basis, model.variances()))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(LikelihoodMatrix::from_log_densities(DMatrix::from_row_slice(
        samples.len(),
        k,
        &flat,
    )))
}

/// Kernel weights from a likelihood matrix: rows normalized to one, column
/// sums `α_k`, then `w_k = α_k / Σ α`.
pub fn kernel_weights(w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut alpha = vec![0.0; w.ncols()];
    for (i, row) in w.row_iter().enumerate() {
        let total: f64 = row.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Underflow(format!(
                "likelihood row {i} has no positive entry"
            )));
        }
        for (a, v) in alpha.iter_mut().zip(row.iter()) {
            *a += v / total;
        }
    }
    let sum: f64 = alpha.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Underflow("likelihood matrix has no rows".into()));
    }
    Ok(alpha.into_iter().map(|a| a / sum).collect())
}

/// `Q_m = Σ_i ln p(x_i | H_m)`.
pub fn total_log_likelihood(samples: &[Vec<f64>], model: &ClassModel) -> Result<f64> {
    let terms: Vec<f64> = samples
        .par_iter()
        .map(|x| crate::density::log_mixture(x, model))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Index of the kernel whose removal leaves the highest total
/// log-likelihood (lowest index on ties), plus the trial likelihoods.
pub fn most_expendable_kernel(matrix: &LikelihoodMatrix, weights: &[f64]) -> Result<(usize, Vec<f64>)> {
    if weights.len() < 2 || matrix.kernels() != weights.len() {
        return Err(Error::Config(format!(
            "trial removal needs at least 2 kernels with matching weights ({} kernels, {} weights)",
            matrix.kernels(),
            weights.len()
        )));
    }
    let trial: Vec<f64> = (0..weights.len())
        .into_par_iter()
        .map(|k| matrix.log_likelihood_without(k, weights))
        .collect();
    let mut best = 0;
    for (k, &q) in trial.iter().enumerate().skip(1) {
        if q > trial[best] {
            best = k;
        }
    }
    Ok((best, trial))
}

/// Euclidean distances between all samples; the diagonal is `+inf`.
pub fn pairwise_distances(samples: &[Vec<f64>]) -> DMatrix<f64> {
    let n = samples.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        f64::INFINITY
                    } else {
                        samples[i]
                            .iter()
                            .zip(&samples[j])
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    }
                })
                .collect()
        })
        .collect();
    DMatrix::from_row_iterator(n, n, rows.into_iter().flatten())
}

/// Mean of the finite entries of a distance matrix.
pub fn auto_assignment_scale(distances: &DMatrix<f64>) -> f64 {
    let (sum, count) = distances
        .iter()
        .filter(|d| d.is_finite())
        .fold((0.0, 0usize), |(s, c), &d| (s + d, c + 1));
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}

/// Column sums `a_l` of the row-normalized assignment probabilities
/// `exp(-D[k,l] / C)`, taken over the rows of non-kernel samples. Every
/// column is scored; only non-kernel columns are candidates.
pub fn assignment_values(distances: &DMatrix<f64>, is_kernel: &[bool], c: f64) -> Result<Vec<f64>> {
    let n = distances.nrows();
    if distances.ncols() != n || is_kernel.len() != n {
        return Err(Error::Config(format!(
            "distance matrix {}x{} does not match {} samples",
            distances.nrows(),
            distances.ncols(),
            is_kernel.len()
        )));
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("assignment scale must be positive, got {c}")));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| !is_kernel[i]).collect();
    if rows.is_empty() {
        return Err(Error::Capacity("every sample is already a kernel".into()));
    }
    let partial: Vec<Vec<f64>> = rows
        .par_iter()
        .map(|&k| {
            let row = distances.row(k);
            let nearest = row.iter().copied().fold(f64::INFINITY, f64::min);
            let mut p: Vec<f64> = row
                .iter()
                .map(|&d| {
                    if d.is_finite() {
                        (-(d - nearest) / c).exp()
                    } else {
                        0.0
                    }
                })
                .collect();
            let total: f64 = p.iter().sum();
            if total > 0.0 {
                p.iter_mut().for_each(|v| *v /= total);
            }
            p
        })
        .collect();
    let mut a = vec![0.0; n];
    for p in &partial {
        for (al, v) in a.iter_mut().zip(p) {
            *al += v;
        }
    }
    Ok(a)
}

/// Non-kernel samples ordered by decreasing `a_l` (lowest index on ties).
pub fn rank_candidates(distances: &DMatrix<f64>, is_kernel: &[bool], c: f64) -> Result<Vec<usize>> {
    let a = assignment_values(distances, is_kernel, c)?;
    let mut order: Vec<usize> = (0..a.len()).filter(|&l| !is_kernel[l]).collect();
    order.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    Ok(order)
}

/// The non-kernel sample with the largest assignment mass `a_l`.
pub fn best_addition(distances: &DMatrix<f64>, is_kernel: &[bool], c: f64) -> Result<usize> {
    Ok(rank_candidates(distances, is_kernel, c)?[0])
}

fn assemble_model(
    class_index: usize,
    ids: &[usize],
    bases: &[DistortionBasis],
    weights: &[f64],
    variances: VarianceParams,
) -> Result<ClassModel> {
    let kernels = ids
        .iter()
        .zip(bases)
        .zip(weights)
        .map(|((&sample_id, basis), &weight)| Kernel {
            sample_id,
            basis: basis.clone(),
            weight,
        })
        .collect();
    ClassModel::new(class_index, kernels, variances)
}

/// Runs kernel selection on one class's samples.
///
/// Kernels start as `K` seeded random samples (samples whose basis cannot be
/// built are passed over). Every iteration removes the most expendable
/// kernel and adds the best-ranked non-kernel candidate; candidates with a
/// degenerate basis are skipped in rank order and logged.
pub fn select_kernels(
    samples: &[Vec<f64>],
    class_index: usize,
    config: &SelectionConfig,
    builder: &BasisBuilder,
) -> Result<(ClassModel, SelectionTrace)> {
    config.validate()?;
    let n = samples.len();
    let k_total = config.kernel_count;
    if n <= k_total {
        return Err(Error::Capacity(format!(
            "class {class_index}: {n} samples, need more than {k_total} kernels"
        )));
    }
    let v = config.variances;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let mut ids = Vec::with_capacity(k_total);
    let mut bases = Vec::with_capacity(k_total);
    for &i in &order {
        if ids.len() == k_total {
            break;
        }
        match builder.build(&samples[i]) {
            Ok(b) => {
                ids.push(i);
                bases.push(b);
            }
            Err(Error::Degenerate(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    if ids.len() < k_total {
        return Err(Error::Capacity(format!(
            "class {class_index}: only {} samples yield a usable distortion basis",
            ids.len()
        )));
    }

    let columns: Vec<Vec<f64>> = bases
        .iter()
        .map(|b| kernel_log_column(samples, b, &v))
        .collect::<Result<_>>()?;
    let mut matrix = LikelihoodMatrix::from_log_densities(DMatrix::from_fn(n, k_total, |i, k| columns[k][i]));
    let mut weights = kernel_weights(&matrix.shifted())?;
    let mut trace = SelectionTrace {
        initial_log_likelihood: matrix.total_log_likelihood(&weights),
        initial_density_evaluations: (n * k_total) as u64,
        records: Vec::with_capacity(config.iterations),
    };

    let distances = if config.iterations > 0 {
        pairwise_distances(samples)
    } else {
        DMatrix::zeros(0, 0)
    };
    let c = match config.assignment_scale {
        AssignmentScale::Auto => auto_assignment_scale(&distances),
        AssignmentScale::Fixed(c) => c,
    };

    for iteration in 1..=config.iterations {
        let (slot, _) = most_expendable_kernel(&matrix, &weights)?;
        let removed = ids[slot];

        // the removed sample still counts as a kernel while candidates are ranked
        let mut is_kernel = vec![false; n];
        for &i in &ids {
            is_kernel[i] = true;
        }
        let mut skipped = Vec::new();
        let mut replacement = None;
        for cand in rank_candidates(&distances, &is_kernel, c)? {
            match builder.build(&samples[cand]) {
                Ok(b) => {
                    replacement = Some((cand, b));
                    break;
                }
                Err(Error::Degenerate(_)) => skipped.push(cand),
                Err(e) => return Err(e),
            }
        }
        let (added, basis) = replacement.ok_or_else(|| {
            Error::Capacity(format!(
                "class {class_index}: no non-kernel sample yields a usable basis"
            ))
        })?;

        let column = kernel_log_column(samples, &basis, &v)?;
        matrix.replace_column(slot, &column);
        ids[slot] = added;
        bases[slot] = basis;
        weights = kernel_weights(&matrix.shifted())?;
        trace.records.push(TraceRecord {
            iteration,
            log_likelihood: matrix.total_log_likelihood(&weights),
            removed,
            added,
            skipped,
            density_evaluations: n as u64,
        });
    }

    let model = assemble_model(class_index, &ids, &bases, &weights, v)?;
    Ok((model, trace))
}
