//! End-to-end runs of the `kdc` binary and the command functions.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kernel_distortion::classify::{self, Metrics, PriorMode};
use kernel_distortion::cli::{self, DataFormat, DataSource, SweepAxis, TestSelection};
use kernel_distortion::density::{log_sum_exp, VarianceParams};
use kernel_distortion::hybrid::{self, Combiner};
use kernel_distortion::inspect::{decode_pgm, rescale_to_bytes};
use kernel_distortion::persist;
use kernel_distortion::selection::SelectionConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn kdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdc"))
        .args(args)
        .output()
        .expect("kdc runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "kdc failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Three glyph classes, 60 images each, as a delimited 10x10 file.
fn glyph_file(dir: &Path) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let set = common::glyph_classes(&mut rng, 10, 10, 3, 60, 0.03);
    let mut text = String::from("# label then 100 pixels\n");
    for (img, label) in set.images().iter().zip(set.labels()) {
        let px: Vec<String> = img.iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{label},{}\n", px.join(",")));
    }
    let path = dir.join("glyphs.csv");
    fs::write(&path, text).unwrap();
    path
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = glyph_file(dir.path());
        Fixture { dir, data }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let data = self.data.to_string_lossy().into_owned();
        let out = self.s(out);
        let mut args = vec![
            "train", "--train-images", &data, "--format", "delim", "--width", "10", "--height", "10",
            "--per-class", "40", "--seed", "3", "--kernels", "4", "--subspace-dim", "8",
            "--iterations", "5", "--out", &out,
        ];
        args.extend_from_slice(extra);
        kdc(&args)
    }

    fn eval(&self, model: &str, extra: &[&str]) -> Output {
        let data = self.data.to_string_lossy().into_owned();
        let model = self.s(model);
        let mut args = vec![
            "eval", "--model", &model, "--test-images", &data, "--format", "delim", "--width", "10",
            "--height", "10", "--exclude-per-class", "40", "--seed", "3",
        ];
        args.extend_from_slice(extra);
        kdc(&args)
    }

    fn test_selection(&self) -> TestSelection {
        TestSelection {
            source: DataSource {
                images: self.data.clone(),
                labels: None,
                format: DataFormat::Delim,
                width: 10,
                height: 10,
                margin: 1,
            },
            per_class: None,
            exclude_per_class: Some(40),
            seed: 3,
        }
    }
}

#[test]
fn train_then_eval_matches_the_library() {
    let fx = Fixture::new();
    ok(&fx.train("model", &[]));
    assert!(fx.path("model/manifest.txt").exists());
    for m in 0..3 {
        let trace = fs::read_to_string(fx.path(&format!("model/traces/{}", cli::trace_file_name(m)))).unwrap();
        assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 6);
    }

    let report_path = fx.s("report.txt");
    let post_path = fx.s("posteriors.tsv");
    ok(&fx.eval("model", &["--report", &report_path, "--emit-posteriors", &post_path]));
    let report = Metrics::from_report(&fs::read_to_string(&report_path).unwrap()).unwrap();

    let clf = persist::load_model(fx.path("model")).unwrap();
    let test = fx.test_selection().load().unwrap();
    assert_eq!(test.len(), 60);
    let direct = classify::evaluate(&test, &clf).unwrap();
    assert_eq!(report, direct);
    assert!(direct.error_rate < 0.1, "{}", direct.error_rate);

    let table = hybrid::load_posterior_table(&post_path, 60, 3).unwrap();
    for row in table.rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert_eq!(table.predictions(), classify::posteriors(&test, &clf).unwrap().iter().map(|p| classify::argmax(p)).collect::<Vec<_>>());
}

#[test]
fn runs_are_bit_identical() {
    let fx = Fixture::new();
    ok(&fx.train("a", &[]));
    ok(&fx.train("b", &["--threads", "2"]));
    for name in ["manifest.txt", "class_000.bin", "class_002.bin", "traces/class_001.tsv"] {
        assert_eq!(fs::read(fx.path(&format!("a/{name}"))).unwrap(), fs::read(fx.path(&format!("b/{name}"))).unwrap(), "{name}");
    }
    let ra = fx.eval("a", &[]);
    let rb = fx.eval("b", &[]);
    ok(&ra);
    assert_eq!(ra.stdout, rb.stdout);
}

#[test]
fn zero_iterations_gives_random_kernels() {
    let fx = Fixture::new();
    ok(&fx.train("m0", &["--iterations", "0"]));
    let clf = persist::load_model(fx.path("m0")).unwrap();
    assert_eq!(clf.kernel_count(), 4);
    let trace = fs::read_to_string(fx.path("m0/traces/class_000.tsv")).unwrap();
    assert_eq!(trace.lines().filter(|l| !l.starts_with('#')).count(), 1);
}

#[test]
fn config_file_values_yield_to_flags() {
    let fx = Fixture::new();
    let cfg = fx.path("run.cfg");
    fs::write(&cfg, String::from("# shared settings\nkernels=6\nsigma_o2=0.05\niterations=2\npriors=uniform\n")).unwrap();
    let cfg = cfg.to_string_lossy().into_owned();
    ok(&fx.train("cfg", &["--config", &cfg, "--kernels", "3"]));
    let clf = persist::load_model(fx.path("cfg")).unwrap();
    assert_eq!(clf.kernel_count(), 3);
    assert_eq!(clf.variances().sigma_o2(), 0.05);
    assert!(clf.log_priors().iter().all(|&p| (p - (1.0f64 / 3.0).ln()).abs() < 1e-15));
}

#[test]
fn errors_give_nonzero_status() {
    let fx = Fixture::new();
    let missing = fx.s("nope.csv");
    let out = kdc(&["train", "--train-images", &missing, "--format", "delim", "--out", &fx.s("x")]);
    assert!(!out.status.success());

    ok(&fx.train("model", &[]));
    let model = fx.s("model");
    let out = kdc(&["inspect", "--model", &model, "--class", "7", "--kernel", "0", "--out", &fx.s("img")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out of range"));

    // a different margin changes the image size
    let out = fx.eval("model", &["--margin", "2"]);
    assert!(!out.status.success());

    let out = fx.train("bad", &["--subspace-dim", "0"]);
    assert!(!out.status.success());
    let out = kdc(&["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn inspect_writes_center_and_three_basis_images() {
    let fx = Fixture::new();
    ok(&fx.train("model", &[]));
    let (model, img) = (fx.s("model"), fx.s("img"));
    ok(&kdc(&["inspect", "--model", &model, "--class", "1", "--kernel", "2", "--out", &img]));
    let mut names: Vec<String> = fs::read_dir(&img).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    assert_eq!(names, ["class1_kernel2_center.pgm", "class1_kernel2_u1.pgm", "class1_kernel2_u2.pgm", "class1_kernel2_u3.pgm"]);
    let clf = persist::load_model(&model).unwrap();
    let center: Vec<f64> = clf.models()[1].kernels()[2].basis.center().iter().copied().collect();
    let (w, h, px) = decode_pgm(&fs::read(fx.path("img/class1_kernel2_center.pgm")).unwrap()).unwrap();
    assert_eq!((w, h), (12, 12));
    assert_eq!(px, rescale_to_bytes(&center));
}

fn hybrid_files(fx: &Fixture) -> (String, String, String) {
    let (pd, pg, labels) = common::disjoint_error_tables(500, 5, 0.05, 8);
    pd.save(fx.path("pd.tsv")).unwrap();
    pg.save(fx.path("pg.tsv")).unwrap();
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    fs::write(fx.path("labels.txt"), text).unwrap();
    (fx.s("pg.tsv"), fx.s("pd.tsv"), fx.s("labels.txt"))
}

fn report_value(report: &[u8], key: &str) -> f64 {
    let text = String::from_utf8_lossy(report);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in\n{text}"))
        .parse()
        .unwrap()
}

#[test]
fn hybrid_command_endpoints_and_synergy() {
    let fx = Fixture::new();
    let (g, d, l) = hybrid_files(&fx);
    let run = |mode: &str, param: &str| {
        let out = kdc(&["hybrid", "--generative", &g, "--discriminative", &d, "--labels", &l, "--mode", mode, "--param", param]);
        ok(&out);
        out.stdout
    };
    let r = run("cascade", "0");
    let ed = report_value(&r, "discriminative_error");
    let eg = report_value(&r, "generative_error");
    assert_eq!(report_value(&r, "hybrid_error"), ed);
    assert_eq!(report_value(&run("stack", "1"), "hybrid_error"), ed);
    assert_eq!(report_value(&run("cascade", "1"), "hybrid_error"), eg);
    assert_eq!(report_value(&run("stack", "0"), "hybrid_error"), eg);
    assert!(report_value(&run("stack", "0.5"), "hybrid_error") < ed.min(eg));

    let tuned = kdc(&["hybrid", "--generative", &g, "--discriminative", &d, "--labels", &l, "--mode", "stack", "--tune", "--folds", "5", "--seed", "1"]);
    ok(&tuned);
    let w = report_value(&tuned.stdout, "parameter");
    assert!((0.0..=1.0).contains(&w));
    assert!(report_value(&tuned.stdout, "cross_validated_error") < ed.min(eg));
    let again = kdc(&["hybrid", "--generative", &g, "--discriminative", &d, "--labels", &l, "--mode", "stack", "--tune", "--folds", "5", "--seed", "1"]);
    assert_eq!(tuned.stdout, again.stdout);
}

#[test]
fn hybrid_rejects_misaligned_tables() {
    let fx = Fixture::new();
    let (g, d, _) = hybrid_files(&fx);
    fs::write(fx.path("short.txt"), "0\n1\n2\n").unwrap();
    let short = fx.s("short.txt");
    let out = kdc(&["hybrid", "--generative", &g, "--discriminative", &d, "--labels", &short, "--mode", "stack", "--param", "0.5"]);
    assert!(!out.status.success());
    let out = kdc(&["hybrid", "--generative", &g, "--discriminative", &d, "--labels", &short, "--mode", "blend", "--param", "0.5"]);
    assert!(!out.status.success());
}

fn glyph_split(seed: u64) -> (kernel_distortion::LabeledImageSet, kernel_distortion::LabeledImageSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = common::glyph_classes(&mut rng, 10, 10, 3, 50, 0.05);
    let set = kernel_distortion::pad_margin(&set, 1);
    kernel_distortion::stratified_sample(&set, 30, seed).unwrap()
}

#[test]
fn sweep_rows_and_failures() {
    let (train, test) = glyph_split(5);
    let base = SelectionConfig {
        kernel_count: 3,
        iterations: 3,
        subspace_dim: 6,
        ..SelectionConfig::default()
    };
    // p = 1 has only five monomials, so keep q below that
    let small_q = SelectionConfig { subspace_dim: 4, ..base.clone() };
    let rows = cli::cmd_sweep(SweepAxis::P, &[1.0, 2.0, 3.0, 4.0], &train, &test, &small_q, PriorMode::Empirical);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.error.is_ok()), "{rows:?}");
    let rows = cli::cmd_sweep(SweepAxis::P, &[1.0], &train, &test, &base, PriorMode::Empirical);
    assert!(rows[0].error.is_err());

    let rows = cli::cmd_sweep(SweepAxis::Q, &[4.0, 500.0, 6.0], &train, &test, &base, PriorMode::Empirical);
    assert!(rows[0].error.is_ok() && rows[1].error.is_err() && rows[2].error.is_ok());
    let table = cli::sweep_table(SweepAxis::Q, &rows);
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().starts_with("500\tNaN\t"));
}

#[test]
fn unit_variance_ratio_is_the_euclidean_mixture() {
    let (train, test) = glyph_split(6);
    let base = SelectionConfig {
        kernel_count: 3,
        iterations: 3,
        subspace_dim: 6,
        ..SelectionConfig::default()
    };
    let rows = cli::cmd_sweep(SweepAxis::VarianceRatio, &[1.0], &train, &test, &base, PriorMode::Empirical);
    let iso = SelectionConfig {
        variances: VarianceParams::isotropic(base.variances.sigma_o2()).unwrap(),
        ..base.clone()
    };
    let (clf, _) = classify::train(&train, &iso, PriorMode::Empirical).unwrap();
    assert_eq!(rows[0].error, Ok(classify::evaluate(&test, &clf).unwrap().error_rate));
    // class scores are plain Euclidean Gaussian mixtures
    let s2 = base.variances.sigma_o2();
    for x in test.images().iter().take(10) {
        let ll = clf.log_likelihoods(x).unwrap();
        for (model, got) in clf.models().iter().zip(ll) {
            let want = log_sum_exp(model.kernels().iter().map(|k| {
                let d2: f64 = x.iter().zip(k.basis.center().iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                k.weight.ln() - 0.5 * (d2 / s2 + x.len() as f64 * (2.0 * std::f64::consts::PI * s2).ln())
            }));
            assert!((got - want).abs() < 1e-8 * want.abs().max(1.0));
        }
    }
}

#[test]
fn sweep_command_writes_a_table() {
    let fx = Fixture::new();
    let data = fx.data.to_string_lossy().into_owned();
    let out = fx.s("sweep.tsv");
    ok(&kdc(&[
        "sweep", "--axis", "p", "--values", "1,2", "--train-images", &data, "--test-images", &data,
        "--format", "delim", "--width", "10", "--height", "10", "--per-class", "40",
        "--exclude-per-class", "40", "--seed", "3", "--kernels", "3", "--subspace-dim", "5",
        "--iterations", "2", "--out", &out,
    ]));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("# p\terror"));
}

#[test]
fn q_sweep_on_mnist_favours_a_richer_subspace() {
    let set = common::load_mnist_padded();
    let (train, rest) = kernel_distortion::stratified_sample(&set, 100, 1).unwrap();
    let (test, _) = kernel_distortion::stratified_sample(&rest, 50, 1).unwrap();
    let base = SelectionConfig {
        kernel_count: 8,
        iterations: 10,
        seed: 1,
        ..SelectionConfig::default()
    };
    let rows = cli::cmd_sweep(SweepAxis::Q, &[2.0, 20.0], &train, &test, &base, PriorMode::Empirical);
    let (e2, e20) = (rows[0].error.clone().unwrap(), rows[1].error.clone().unwrap());
    assert!(e20 <= e2, "q=2: {e2}, q=20: {e20}");
}

#[test]
fn combiner_names_parse() {
    assert_eq!("cascade".parse::<Combiner>().unwrap(), Combiner::Cascade);
    assert_eq!("stack".parse::<Combiner>().unwrap(), Combiner::Stack);
}
