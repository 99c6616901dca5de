//! Combining generative posteriors with an external discriminative
//! classifier's posteriors by cascading or stacking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classify::argmax;
use crate::error::{Error, Result};

const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Errors that differ by less than this are treated as tied in tuning.
const TIE_TOLERANCE: f64 = 1e-12;

/// Per-sample class posteriors aligned to an evaluation set by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    rows: Vec<Vec<f64>>,
    pub source_name: String,
}

impl PosteriorTable {
    pub fn new(rows: Vec<Vec<f64>>, source_name: impl Into<String>) -> Result<Self> {
        let m = rows.first().map_or(0, |r| r.len());
        for (i, row) in rows.iter().enumerate() {
            validate_row(i, row, m)?;
        }
        Ok(Self {
            rows,
            source_name: source_name.into(),
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.rows.first().map_or(0, |r| r.len())
    }

    /// Argmax of every row.
    pub fn predictions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }

    /// One `index p_0 ... p_{M-1}` line per sample, tab-separated, after a
    /// `#` header naming the source.
    pub fn to_delimited(&self) -> String {
        let mut out = format!("# posterior table: {}\n", self.source_name);
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i}");
            for p in row {
                let _ = write!(out, "\t{p}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_delimited()).map_err(|e| Error::io(path, e))
    }
}

fn validate_row(i: usize, row: &[f64], m: usize) -> Result<()> {
    if row.len() != m {
        return Err(Error::Validation(format!(
            "row {i} has {} probabilities, expected {m}",
            row.len()
        )));
    }
    if let Some(p) = row.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::Validation(format!("row {i} has invalid probability {p}")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::Validation(format!("row {i} sums to {sum}")));
    }
    Ok(())
}

/// Reads a posterior table, checking every row and that the sample indices
/// are exactly `0..expected_rows`. Rows are returned sorted by index.
pub fn load_posterior_table(path: impl AsRef<Path>, expected_rows: usize, m: usize) -> Result<PosteriorTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = parse_posterior_table(&text, expected_rows, m)?;
    table.source_name = path.display().to_string();
    Ok(table)
}

pub fn parse_posterior_table(text: &str, expected_rows: usize, m: usize) -> Result<PosteriorTable> {
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; expected_rows];
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        if fields.len() != m + 1 {
            return Err(Error::Format(format!(
                "line {lineno}: expected index + {m} probabilities, found {} fields",
                fields.len()
            )));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::Format(format!("line {lineno}: bad sample index {:?}", fields[0])))?;
        let row = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("line {lineno}: bad probability")))?;
        validate_row(index, &row, m)?;
        let slot = slots.get_mut(index).ok_or_else(|| {
            Error::Consistency(format!("line {lineno}: sample index {index} out of range 0..{expected_rows}"))
        })?;
        if slot.is_some() {
            return Err(Error::Consistency(format!("sample index {index} appears twice")));
        }
        *slot = Some(row);
    }
    let rows = slots
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Consistency(format!("sample index {i} is missing"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorTable {
        rows,
        source_name: String::new(),
    })
}

/// Discriminative decision when its top posterior strictly exceeds `tau`,
/// generative decision otherwise.
pub fn cascade(p_d: &[f64], p_g: &[f64], tau: f64) -> usize {
    let top = p_d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if top > tau {
        argmax(p_d)
    } else {
        argmax(p_g)
    }
}

/// `w p_d + (1 - w) p_g`.
pub fn stack_combined(p_d: &[f64], p_g: &[f64], w: f64) -> Vec<f64> {
    p_d.iter().zip(p_g).map(|(d, g)| w * d + (1.0 - w) * g).collect()
}

pub fn stack(p_d: &[f64], p_g: &[f64], w: f64) -> usize {
    argmax(&stack_combined(p_d, p_g, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combiner {
    Cascade,
    Stack,
}

impl Combiner {
    pub fn decide(self, p_d: &[f64], p_g: &[f64], param: f64) -> usize {
        match self {
            Combiner::Cascade => cascade(p_d, p_g, param),
            Combiner::Stack => stack(p_d, p_g, param),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Combiner::Cascade => "cascade",
            Combiner::Stack => "stack",
        }
    }
}

impl std::str::FromStr for Combiner {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cascade" => Ok(Combiner::Cascade),
            "stack" => Ok(Combiner::Stack),
            other => Err(Error::Config(format!("unknown combiner {other:?}"))),
        }
    }
}

/// The default grid `0, 0.01, ..., 1`.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

fn check_aligned(p_d: &PosteriorTable, p_g: &PosteriorTable, labels: &[usize]) -> Result<()> {
    if p_d.len() != p_g.len() || p_d.len() != labels.len() {
        return Err(Error::Consistency(format!(
            "tables and labels disagree on length: {} / {} / {}",
            p_d.len(),
            p_g.len(),
            labels.len()
        )));
    }
    if p_d.class_count() != p_g.class_count() {
        return Err(Error::Consistency(format!(
            "tables disagree on class count: {} vs {}",
            p_d.class_count(),
            p_g.class_count()
        )));
    }
    Ok(())
}

/// Fraction of `rows` the combiner gets wrong.
pub fn combined_error(
    combiner: Combiner,
    param: f64,
    p_d: &PosteriorTable,
    p_g: &PosteriorTable,
    labels: &[usize],
    rows: &[usize],
) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let wrong = rows
        .iter()
        .filter(|&&i| combiner.decide(&p_d.rows[i], &p_g.rows[i], param) != labels[i])
        .count();
    wrong as f64 / rows.len() as f64
}

/// Error of a combiner over the whole table.
pub fn hybrid_error(
    combiner: Combiner,
    param: f64,
    p_d: &PosteriorTable,
    p_g: &PosteriorTable,
    labels: &[usize],
) -> Result<f64> {
    check_aligned(p_d, p_g, labels)?;
    let rows: Vec<usize> = (0..labels.len()).collect();
    Ok(combined_error(combiner, param, p_d, p_g, labels, &rows))
}

/// Error of the argmax of a single table.
pub fn table_error(table: &PosteriorTable, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = table
        .predictions()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Seeded stratified assignment of rows to `folds` folds: each class is
/// shuffled and dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Vec::new(); folds];
    let mut next = 0;
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            out[next % folds].push(i);
            next += 1;
        }
    }
    for fold in &mut out {
        fold.sort_unstable();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneReport {
    pub combiner: Combiner,
    pub best: f64,
    pub best_error: f64,
    /// `(parameter, mean fold error)` for every grid value, in grid order.
    pub grid_errors: Vec<(f64, f64)>,
}

impl TuneReport {
    pub fn to_delimited(&self) -> String {
        let mut out = format!("# {} tuning: parameter\tmean_fold_error\n", self.combiner.name());
        for (p, e) in &self.grid_errors {
            let _ = writeln!(out, "{p}\t{e}");
        }
        let _ = writeln!(out, "# best={}\terror={}", self.best, self.best_error);
        out
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("tuning grid is empty".into()));
    }
    if let Some(g) = grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::Config(format!("grid value {g} outside [0, 1]")));
    }
    Ok(())
}

fn pick_best(grid_errors: &[(f64, f64)]) -> (f64, f64) {
    let mut best = grid_errors[0];
    for &(p, e) in &grid_errors[1..] {
        if e < best.1 - TIE_TOLERANCE || ((e - best.1).abs() <= TIE_TOLERANCE && p < best.0) {
            best = (p, e);
        }
    }
    best
}

fn grid_fold_errors(
    combiner: Combiner,
    p_d: &PosteriorTable,
    p_g: &PosteriorTable,
    labels: &[usize],
    grid: &[f64],
    folds: &[Vec<usize>],
) -> Vec<(f64, f64)> {
    grid.par_iter()
        .map(|&param| {
            let mean = folds
                .iter()
                .map(|rows| combined_error(combiner, param, p_d, p_g, labels, rows))
                .sum::<f64>()
                / folds.len() as f64;
            (param, mean)
        })
        .collect()
}

/// Picks the grid value with the lowest mean fold error (smallest value on
/// ties) over a seeded stratified `folds`-way partition.
pub fn tune(
    combiner: Combiner,
    p_d: &PosteriorTable,
    p_g: &PosteriorTable,
    labels: &[usize],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<TuneReport> {
    validate_grid(grid)?;
    check_aligned(p_d, p_g, labels)?;
    if folds < 2 || folds > labels.len() {
        return Err(Error::Config(format!(
            "fold count {folds} must lie in [2, {}]",
            labels.len()
        )));
    }
    let partition = stratified_folds(labels, folds, seed);
    let grid_errors = grid_fold_errors(combiner, p_d, p_g, labels, grid, &partition);
    let (best, best_error) = pick_best(&grid_errors);
    Ok(TuneReport {
        combiner,
        best,
        best_error,
        grid_errors,
    })
}

/// Cross-validated estimate of the tuned combiner's error: for each fold,
/// the parameter is chosen on the other folds and scored on the held-out
/// one. Returns the mean held-out error and the per-fold parameters.
pub fn cross_validated_error(
    combiner: Combiner,
    p_d: &PosteriorTable,
    p_g: &PosteriorTable,
    labels: &[usize],
    grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    validate_grid(grid)?;
    check_aligned(p_d, p_g, labels)?;
    if folds < 2 || folds > labels.len() {
        return Err(Error::Config(format!(
            "fold count {folds} must lie in [2, {}]",
            labels.len()
        )));
    }
    let partition = stratified_folds(labels, folds, seed);
    let mut held_out = 0.0;
    let mut params = Vec::with_capacity(folds);
    for (f, test_rows) in partition.iter().enumerate() {
        let train_rows: Vec<usize> = partition
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, rows)| rows.iter().copied())
            .collect();
        let errors = grid_fold_errors(combiner, p_d, p_g, labels, grid, &[train_rows]);
        let (param, _) = pick_best(&errors);
        held_out += combined_error(combiner, param, p_d, p_g, labels, test_rows);
        params.push(param);
    }
    Ok((held_out / folds as f64, params))
}
