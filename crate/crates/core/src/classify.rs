//! MAP classification over per-class kernel mixtures, and error metrics.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dataset::LabeledImageSet;
use crate::density::{log_mixture, ClassModel, VarianceParams};
use crate::distortion::BasisBuilder;
use crate::error::{Error, Result};
use crate::selection::{select_kernels, SelectionConfig, SelectionTrace};

/// Index of the largest entry; the lowest index wins ties. NaN never wins.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] || (values[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorMode {
    /// Class frequencies of the training set.
    Empirical,
    Uniform,
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "empirical" => Ok(PriorMode::Empirical),
            "uniform" => Ok(PriorMode::Uniform),
            other => Err(Error::Config(format!("unknown prior mode {other:?}"))),
        }
    }
}

pub fn uniform_log_priors(class_count: usize) -> Vec<f64> {
    vec![-(class_count as f64).ln(); class_count]
}

pub fn empirical_log_priors(class_counts: &[usize]) -> Vec<f64> {
    let total: usize = class_counts.iter().sum();
    class_counts
        .iter()
        .map(|&c| (c as f64 / total as f64).ln())
        .collect()
}

/// Build provenance carried into saved models.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingInfo {
    pub poly_order: u32,
    pub step: f64,
    pub seed: u64,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    models: Vec<ClassModel>,
    log_priors: Vec<f64>,
    width: usize,
    height: usize,
    pub info: TrainingInfo,
}

impl Classifier {
    pub fn new(models: Vec<ClassModel>, log_priors: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        if models.is_empty() || models.len() != log_priors.len() {
            return Err(Error::Model(format!(
                "{} class models and {} priors",
                models.len(),
                log_priors.len()
            )));
        }
        let prior_mass: f64 = log_priors.iter().map(|l| l.exp()).sum();
        if (prior_mass - 1.0).abs() > 1e-9 {
            return Err(Error::Model(format!("class priors sum to {prior_mass}")));
        }
        let (dim, q) = (models[0].dimension(), models[0].subspace_dim());
        if dim != width * height {
            return Err(Error::Model(format!(
                "models have {dim} pixels but images are {width}x{height}"
            )));
        }
        for (m, model) in models.iter().enumerate() {
            if model.class_index() != m {
                return Err(Error::Model(format!(
                    "model at position {m} is for class {}",
                    model.class_index()
                )));
            }
            if model.dimension() != dim || model.subspace_dim() != q {
                return Err(Error::Model(format!(
                    "class {m} has dimension {} and q {}, expected {dim} and {q}",
                    model.dimension(),
                    model.subspace_dim()
                )));
            }
        }
        Ok(Self {
            models,
            log_priors,
            width,
            height,
            info: TrainingInfo::default(),
        })
    }

    pub fn models(&self) -> &[ClassModel] {
        &self.models
    }

    pub fn log_priors(&self) -> &[f64] {
        &self.log_priors
    }

    pub fn class_count(&self) -> usize {
        self.models.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dimension(&self) -> usize {
        self.width * self.height
    }

    pub fn subspace_dim(&self) -> usize {
        self.models[0].subspace_dim()
    }

    pub fn kernel_count(&self) -> usize {
        self.models[0].kernels().len()
    }

    pub fn variances(&self) -> VarianceParams {
        *self.models[0].variances()
    }

    /// The same kernels and weights evaluated under other variances; with
    /// equal variances this is the isotropic baseline.
    pub fn with_variances(&self, v: VarianceParams) -> Self {
        Self {
            models: self.models.iter().map(|m| m.with_variances(v)).collect(),
            ..self.clone()
        }
    }

    pub fn with_log_priors(&self, log_priors: Vec<f64>) -> Result<Self> {
        let mut c = Self::new(self.models.clone(), log_priors, self.width, self.height)?;
        c.info = self.info.clone();
        Ok(c)
    }

    /// `ln p(x | H_m)` for every class.
    pub fn log_likelihoods(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| log_mixture(x, m)).collect()
    }
}

/// Posterior class probabilities from log-likelihoods and log-priors.
pub fn posterior_from_log_likelihoods(log_likelihoods: &[f64], log_priors: &[f64]) -> Vec<f64> {
    let joint: Vec<f64> = log_likelihoods.iter().zip(log_priors).map(|(l, p)| l + p).collect();
    let top = joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        // degenerate input: fall back to a point mass on the argmax
        let mut p = vec![0.0; joint.len()];
        p[argmax(&joint)] = 1.0;
        return p;
    }
    let shifted: Vec<f64> = joint.iter().map(|j| (j - top).exp()).collect();
    let total: f64 = shifted.iter().sum();
    shifted.iter().map(|s| s / total).collect()
}

pub fn posterior(x: &[f64], classifier: &Classifier) -> Result<Vec<f64>> {
    Ok(posterior_from_log_likelihoods(
        &classifier.log_likelihoods(x)?,
        &classifier.log_priors,
    ))
}

pub fn predict(x: &[f64], classifier: &Classifier) -> Result<usize> {
    Ok(argmax(&posterior(x, classifier)?))
}

/// Posterior rows for a whole set, in set order.
pub fn posteriors(set: &LabeledImageSet, classifier: &Classifier) -> Result<Vec<Vec<f64>>> {
    check_dimension(set, classifier)?;
    set.images()
        .par_iter()
        .map(|x| posterior(x, classifier))
        .collect()
}

fn check_dimension(set: &LabeledImageSet, classifier: &Classifier) -> Result<()> {
    if !set.is_empty() && set.dimension() != classifier.dimension() {
        return Err(Error::Config(format!(
            "images are {}x{} but the model expects {}x{}",
            set.width(),
            set.height(),
            classifier.width(),
            classifier.height()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub error_rate: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    /// NaN for classes absent from the evaluation set.
    pub per_class_error: Vec<f64>,
}

impl Metrics {
    pub fn from_predictions(labels: &[usize], predictions: &[usize], class_count: usize) -> Self {
        let mut confusion = vec![vec![0usize; class_count]; class_count];
        for (&t, &p) in labels.iter().zip(predictions) {
            confusion[t][p] += 1;
        }
        let total = labels.len();
        let correct: usize = (0..class_count).map(|m| confusion[m][m]).sum();
        let error_rate = if total == 0 {
            0.0
        } else {
            1.0 - correct as f64 / total as f64
        };
        let per_class_error = confusion
            .iter()
            .enumerate()
            .map(|(m, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    f64::NAN
                } else {
                    1.0 - row[m] as f64 / n as f64
                }
            })
            .collect();
        Self {
            error_rate,
            confusion,
            per_class_error,
        }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    pub fn errors(&self) -> usize {
        self.total() - (0..self.confusion.len()).map(|m| self.confusion[m][m]).sum::<usize>()
    }

    /// Plain-text report: `key=value` lines followed by a confusion block of
    /// tab-separated counts (rows true, columns predicted).
    pub fn to_report(&self) -> String {
        let mut out = String::from("# kernel-distortion evaluation report\n");
        let _ = writeln!(out, "samples={}", self.total());
        let _ = writeln!(out, "errors={}", self.errors());
        let _ = writeln!(out, "error_rate={}", self.error_rate);
        let _ = writeln!(out, "classes={}", self.confusion.len());
        let per_class: Vec<String> = self.per_class_error.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(out, "per_class_error={}", per_class.join(","));
        let _ = writeln!(out, "confusion={}x{}", self.confusion.len(), self.confusion.len());
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join("\t"));
        }
        out
    }

    /// Parses the output of [`Metrics::to_report`].
    pub fn from_report(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Format(format!("metrics report: {msg}"));
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        let mut error_rate = None;
        let mut per_class_error = None;
        let mut confusion = Vec::new();
        while let Some(line) = lines.next() {
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(&format!("unexpected line {line:?}")));
            };
            match key {
                "error_rate" => error_rate = Some(value.parse().map_err(|_| bad("error_rate"))?),
                "per_class_error" => {
                    per_class_error = Some(
                        value
                            .split(',')
                            .filter(|s| !s.is_empty())
                            .map(|s| s.parse::<f64>().map_err(|_| bad("per_class_error")))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "confusion" => {
                    let m: usize = value
                        .split_once('x')
                        .and_then(|(a, _)| a.parse().ok())
                        .ok_or_else(|| bad("confusion size"))?;
                    for _ in 0..m {
                        let row = lines.next().ok_or_else(|| bad("truncated confusion"))?;
                        confusion.push(
                            row.split('\t')
                                .map(|c| c.parse::<usize>().map_err(|_| bad("confusion cell")))
                                .collect::<Result<Vec<_>>>()?,
                        );
                    }
                }
                _ => {}
            }
        }
        Ok(Self {
            error_rate: error_rate.ok_or_else(|| bad("missing error_rate"))?,
            confusion,
            per_class_error: per_class_error.ok_or_else(|| bad("missing per_class_error"))?,
        })
    }
}

/// Predicts every test sample (concurrently) and tabulates the results.
pub fn evaluate(test: &LabeledImageSet, classifier: &Classifier) -> Result<Metrics> {
    check_dimension(test, classifier)?;
    let m = classifier.class_count();
    if let Some(&bad) = test.labels().iter().find(|&&l| l >= m) {
        return Err(Error::Config(format!("test label {bad} outside [0, {m})")));
    }
    let predictions: Vec<usize> = test
        .images()
        .par_iter()
        .map(|x| predict(x, classifier))
        .collect::<Result<_>>()?;
    Ok(Metrics::from_predictions(test.labels(), &predictions, m))
}

/// Runs kernel selection for every class concurrently and assembles the
/// classifier. Class `m` uses seed `config.seed + m`.
pub fn train(
    set: &LabeledImageSet,
    config: &SelectionConfig,
    priors: PriorMode,
) -> Result<(Classifier, Vec<SelectionTrace>)> {
    config.validate()?;
    let m_total = set.class_count();
    if m_total == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let builder = BasisBuilder::new(
        set.width(),
        set.height(),
        config.step,
        config.poly_order,
        config.subspace_dim,
    )?;
    let results: Vec<(ClassModel, SelectionTrace)> = (0..m_total)
        .into_par_iter()
        .map(|m| {
            let class_config = SelectionConfig {
                seed: config.seed.wrapping_add(m as u64),
                ..config.clone()
            };
            select_kernels(&set.class_images(m), m, &class_config, &builder).map_err(|e| match e {
                Error::Capacity(msg) | Error::Degenerate(msg) => {
                    Error::Capacity(format!("class {m}: {msg}"))
                }
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let log_priors = match priors {
        PriorMode::Empirical => empirical_log_priors(&set.class_counts()),
        PriorMode::Uniform => uniform_log_priors(m_total),
    };
    let (models, traces): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let mut classifier = Classifier::new(models, log_priors, set.width(), set.height())?;
    classifier.info = TrainingInfo {
        poly_order: config.poly_order,
        step: config.step,
        seed: config.seed,
        dataset_fingerprint: set.fingerprint(),
    };
    Ok((classifier, traces))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_and_nan() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.1]), 1);
        assert_eq!(argmax(&[0.3]), 0);
    }

    #[test]
    fn posterior_closed_form() {
        let g = 1.7;
        let p = posterior_from_log_likelihoods(&[-10.0, -10.0 - g], &uniform_log_priors(2));
        assert!((p[0] / p[1] - g.exp()).abs() < 1e-12);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let flat = posterior_from_log_likelihoods(&[-3.0; 4], &uniform_log_priors(4));
        assert!(flat.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn posterior_survives_huge_magnitudes() {
        let p = posterior_from_log_likelihoods(&[-1e6, -1e6 - 1.0, -2e6], &uniform_log_priors(3));
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn metrics_bookkeeping() {
        let m = Metrics::from_predictions(&[0, 0, 1, 2, 2], &[0, 1, 1, 2, 0], 4);
        assert_eq!(m.total(), 5);
        assert_eq!(m.errors(), 2);
        assert!((m.error_rate - 0.4).abs() < 1e-15);
        assert_eq!(m.confusion[0], vec![1, 1, 0, 0]);
        assert!((m.per_class_error[0] - 0.5).abs() < 1e-15);
        assert_eq!(m.per_class_error[1], 0.0);
        assert!(m.per_class_error[3].is_nan());

        let perfect = Metrics::from_predictions(&[0, 1, 1], &[0, 1, 1], 2);
        assert_eq!(perfect.error_rate, 0.0);
        assert_eq!(perfect.confusion, vec![vec![1, 0], vec![0, 2]]);
    }

    #[test]
    fn report_round_trip() {
        let m = Metrics::from_predictions(&[0, 0, 1, 2, 2, 2], &[0, 1, 1, 2, 0, 2], 3);
        let parsed = Metrics::from_report(&m.to_report()).unwrap();
        assert_eq!(parsed, m);
    }

    #[test]
    fn priors() {
        let p = empirical_log_priors(&[1, 3]);
        assert!((p[0].exp() - 0.25).abs() < 1e-15);
        assert_eq!("uniform".parse::<PriorMode>().unwrap(), PriorMode::Uniform);
        assert!("flat".parse::<PriorMode>().is_err());
    }
}
