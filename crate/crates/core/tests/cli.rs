use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use bnn_select::dataset::read_features;
use bnn_select::ensemble::{load_matrix, save_matrix, PredictionMatrix};
use bnn_select::selective::parse_sweep_csv;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bnn-select"))
        .args(args)
        .output()
        .expect("spawn bnn-select")
}

fn ok(args: &[&str]) -> Output {
    let out = bin(args);
    assert!(
        out.status.success(),
        "`{}` exited {:?}: {}",
        args.join(" "),
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    bin(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        Work {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn p(&self, name: &str) -> String {
        s(&self.path(name))
    }

    /// Small separable dataset and a quickly trained posterior over it.
    fn small_model(&self) -> (String, String) {
        let feats = self.p("small.csv");
        let post = self.p("small.json");
        ok(&["synth", "--per-class", "40", "--dim", "6", "--seed", "2", "--out", &feats]);
        ok(&["train", "--features", &feats, "--arch", "6,8,4,2", "--epochs", "2", "--out", &post]);
        (feats, post)
    }

    fn small_matrix(&self) -> String {
        let (feats, post) = self.small_model();
        let matrix = self.p("small.bpmx");
        ok(&["sample", "--posterior", &post, "--features", &feats, "--samples", "50", "--out", &matrix]);
        matrix
    }
}

#[test]
fn synth_writes_balanced_records() {
    let w = Work::new();
    ok(&["synth", "--per-class", "1000", "--dim", "32", "--separation", "4", "--seed", "0", "--out", &w.p("s.csv")]);
    let data = read_features(&w.path("s.csv")).unwrap();
    assert_eq!(data.len(), 2000);
    assert_eq!(data.dim(), 32);
    assert_eq!(data.class_sizes(), vec![1000, 1000]);
}

#[test]
fn synth_without_out_is_usage_error() {
    assert_eq!(code(&["synth", "--per-class", "10"]), 1);
}

#[test]
fn split_defaults_on_1696_records() {
    let w = Work::new();
    let mut csv = String::from("id,label,f0\n");
    for k in 0..1696 {
        csv.push_str(&format!("r{k},{},{k}\n", usize::from(k >= 912)));
    }
    std::fs::write(w.path("all.csv"), csv).unwrap();
    ok(&["split", "--features", &w.p("all.csv"), "--out-dir", &w.p("folds")]);
    for j in 0..5 {
        let train = read_features(&w.path(&format!("folds/fold{j}.train.csv"))).unwrap();
        let val = read_features(&w.path(&format!("folds/fold{j}.val.csv"))).unwrap();
        assert_eq!((train.len(), val.len()), (1357, 339), "fold {j}");
        assert_eq!(val.class_sizes(), vec![182, 157], "fold {j}");
    }
    assert!(!w.path("folds/fold5.train.csv").exists());
}

#[test]
fn split_single_fold_and_bad_ratio() {
    let w = Work::new();
    let (feats, _) = w.small_model();
    ok(&["split", "--features", &feats, "--k", "1", "--out-dir", &w.p("one")]);
    assert!(w.path("one/fold0.train.csv").exists());
    assert!(!w.path("one/fold1.train.csv").exists());
    assert_eq!(code(&["split", "--features", &feats, "--ratio", "1.0", "--out-dir", &w.p("bad")]), 1);
    assert_eq!(code(&["split", "--features", &feats, "--ratio", "0", "--out-dir", &w.p("bad")]), 1);
}

#[test]
fn train_rejects_dimension_mismatch() {
    let w = Work::new();
    let (feats, _) = w.small_model();
    assert_eq!(code(&["train", "--features", &feats, "--arch", "7,8,4,2", "--out", &w.p("x.json")]), 2);
    assert!(!w.path("x.json").exists());
}

#[test]
fn train_rejects_bad_configuration() {
    let w = Work::new();
    let (feats, _) = w.small_model();
    let out = w.p("x.json");
    assert_eq!(code(&["train", "--features", &feats, "--arch", "6,8,4,2", "--batch", "0", "--out", &out]), 1);
    assert_eq!(code(&["train", "--features", &feats, "--arch", "6,8,4,2", "--prior-std", "0", "--out", &out]), 1);
    assert_eq!(code(&["train", "--features", &feats, "--arch", "6", "--out", &out]), 1);
    assert_eq!(code(&["train", "--features", &w.p("missing.csv"), "--arch", "6,8,4,2", "--out", &out]), 2);
}

#[test]
fn identical_training_runs_are_byte_identical() {
    let w = Work::new();
    let (feats, post) = w.small_model();
    let again = w.p("again.json");
    ok(&["train", "--features", &feats, "--arch", "6,8,4,2", "--epochs", "2", "--out", &again]);
    assert_eq!(std::fs::read(&post).unwrap(), std::fs::read(&again).unwrap());

    let reseeded = w.p("reseeded.json");
    ok(&["train", "--features", &feats, "--arch", "6,8,4,2", "--epochs", "2", "--seed", "1", "--out", &reseeded]);
    assert_ne!(std::fs::read(&post).unwrap(), std::fs::read(&reseeded).unwrap());
}

#[test]
fn map_mode_writes_point_document_that_sample_rejects() {
    let w = Work::new();
    let (feats, _) = w.small_model();
    let point = w.p("map.json");
    ok(&["train", "--features", &feats, "--mode", "map", "--arch", "6,8,4,2", "--epochs", "2", "--out", &point]);
    let text = std::fs::read_to_string(&point).unwrap();
    assert!(!text.contains("rho_w"));
    assert_eq!(code(&["sample", "--posterior", &point, "--features", &feats, "--out", &w.p("m.bpmx")]), 2);
}

#[test]
fn single_sample_matrix() {
    let w = Work::new();
    let (feats, post) = w.small_model();
    let matrix = w.p("one.bpmx");
    ok(&["sample", "--posterior", &post, "--features", &feats, "--samples", "1", "--out", &matrix]);
    let m = load_matrix(Path::new(&matrix)).unwrap();
    assert_eq!((m.sample_count(), m.image_count(), m.class_count()), (1, 80, 2));
}

#[test]
fn sample_rejects_dimension_mismatch() {
    let w = Work::new();
    let (_, post) = w.small_model();
    let other = w.p("other.csv");
    ok(&["synth", "--per-class", "5", "--dim", "4", "--out", &other]);
    assert_eq!(code(&["sample", "--posterior", &post, "--features", &other, "--out", &w.p("m.bpmx")]), 2);
    assert!(!w.path("m.bpmx").exists());
}

#[test]
fn sample_rejects_corrupt_posterior() {
    let w = Work::new();
    let (feats, post) = w.small_model();
    let text = std::fs::read_to_string(&post).unwrap();
    std::fs::write(&post, &text[..text.len() / 2]).unwrap();
    assert_eq!(code(&["sample", "--posterior", &post, "--features", &feats, "--out", &w.p("m.bpmx")]), 2);
}

#[test]
fn eval_forced_policy_covers_everything() {
    let w = Work::new();
    let matrix = w.small_matrix();
    let out = ok(&["eval", "--matrix", &matrix, "--n", "0", "--p", "0"]);
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(line.contains("coverage=1 "), "{line}");
    assert!(line.contains("skipped=0 "), "{line}");
    assert!(line.contains("total=80 "), "{line}");
}

#[test]
fn eval_rejects_out_of_range_policy() {
    let w = Work::new();
    let matrix = w.small_matrix();
    assert_eq!(code(&["eval", "--matrix", &matrix, "--n", "1.5", "--p", "0.5"]), 1);
    assert_eq!(code(&["eval", "--matrix", &matrix, "--n", "0.5", "--p", "-0.1"]), 1);
}

#[test]
fn eval_rejects_bad_matrix() {
    let w = Work::new();
    std::fs::write(w.path("junk.bpmx"), b"NOPE and then some more bytes here").unwrap();
    assert_eq!(code(&["eval", "--matrix", &w.p("junk.bpmx"), "--n", "0.5", "--p", "0.5"]), 2);
}

#[test]
fn eval_reports_toy_matrix() {
    let w = Work::new();
    let rows: [[f32; 3]; 2] = [[0.9, 0.2, 0.55], [0.8, 0.3, 0.45]];
    let probs = rows.iter().flat_map(|r| r.iter().flat_map(|&p| [p, 1.0 - p])).collect();
    let m = PredictionMatrix::new(2, 3, 2, vec![0, 1, 0], probs, 0).unwrap();
    save_matrix(&m, &w.path("toy.bpmx")).unwrap();
    let out = ok(&["eval", "--matrix", &w.p("toy.bpmx"), "--n", "1.0", "--p", "0.7"]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap().trim(),
        "n=1 p=0.7 total=3 skipped=1 covered=2 coverage=0.666667 accuracy=1"
    );
}

#[test]
fn default_sweep_has_twelve_rows() {
    let w = Work::new();
    let matrix = w.small_matrix();
    ok(&["sweep", "--matrix", &matrix, "--out", &w.p("sweep.csv")]);
    let rows = parse_sweep_csv(&std::fs::read_to_string(w.path("sweep.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(rows[..6].iter().all(|r| r.tuple.p == 0.5));
    assert!(rows[6..].iter().all(|r| r.tuple.n == 0.5));
}

#[test]
fn explicit_grid_sweep_is_cross_product() {
    let w = Work::new();
    let matrix = w.small_matrix();
    ok(&["sweep", "--matrix", &matrix, "--n-grid", "0.2,0.6,0.9", "--p-grid", "0.5,0.8", "--out", &w.p("g.csv")]);
    let rows = parse_sweep_csv(&std::fs::read_to_string(w.path("g.csv")).unwrap()).unwrap();
    let knobs: Vec<(f64, f64)> = rows.iter().map(|r| (r.tuple.n, r.tuple.p)).collect();
    assert_eq!(knobs, vec![(0.2, 0.5), (0.2, 0.8), (0.6, 0.5), (0.6, 0.8), (0.9, 0.5), (0.9, 0.8)]);

    ok(&["sweep", "--matrix", &matrix, "--n-grid", "0.3,0.7", "--out", &w.p("n.csv")]);
    let rows = parse_sweep_csv(&std::fs::read_to_string(w.path("n.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.tuple.p == 0.5));

    assert_eq!(code(&["sweep", "--matrix", &matrix, "--n-grid", "0.3,1.2", "--out", &w.p("x.csv")]), 1);
}

#[test]
fn report_of_identical_folds_has_zero_std() {
    let w = Work::new();
    let matrix = w.small_matrix();
    ok(&["sweep", "--matrix", &matrix, "--out", &w.p("sweep.csv")]);
    let sweep = w.p("sweep.csv");
    let mut args = vec!["report", "--sweep-csv"];
    args.extend(std::iter::repeat_n(sweep.as_str(), 5));
    let (md, svg) = (w.p("r.md"), w.p("r.svg"));
    args.extend(["--out-md", &md, "--out-svg", &svg]);
    ok(&args);
    let table = std::fs::read_to_string(&md).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| l.starts_with("| 0")).collect();
    assert_eq!(body.len(), 12);
    for line in body {
        let acc = line.split('|').nth(5).unwrap();
        assert!(acc.contains("± 0 ") || acc.trim() == "NA", "{line}");
    }
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn report_rejects_inconsistent_grids() {
    let w = Work::new();
    let matrix = w.small_matrix();
    ok(&["sweep", "--matrix", &matrix, "--out", &w.p("a.csv")]);
    ok(&["sweep", "--matrix", &matrix, "--n-grid", "0.5", "--out", &w.p("b.csv")]);
    let (a, b, md, svg) = (w.p("a.csv"), w.p("b.csv"), w.p("r.md"), w.p("r.svg"));
    assert_eq!(code(&["report", "--sweep-csv", &a, &b, "--out-md", &md, "--out-svg", &svg]), 2);
    assert!(!w.path("r.md").exists());
}

/// y coordinates of every `<path class="coverage" d="M x,y L x,y ...">`.
fn coverage_series(svg: &str) -> Vec<Vec<f64>> {
    svg.split("<path class=\"coverage\" d=\"")
        .skip(1)
        .map(|rest| {
            let d = &rest[..rest.find('"').unwrap()];
            d.split(' ')
                .map(|pt| {
                    let (_, y) = pt.trim_start_matches(['M', 'L']).split_once(',').unwrap();
                    y.parse().unwrap()
                })
                .collect()
        })
        .collect()
}

#[test]
fn end_to_end_pipeline_on_defaults() {
    let start = Instant::now();
    let w = Work::new();
    ok(&["synth", "--dim", "32", "--out", &w.p("all.csv")]);
    ok(&["split", "--features", &w.p("all.csv"), "--out-dir", &w.p("folds")]);
    let mut sweeps = Vec::new();
    for j in 0..5 {
        let post = w.p(&format!("post{j}.json"));
        let matrix = w.p(&format!("m{j}.bpmx"));
        let sweep = w.p(&format!("sweep{j}.csv"));
        ok(&["train", "--features", &w.p(&format!("folds/fold{j}.train.csv")), "--arch", "32,256,128,2", "--out", &post]);
        ok(&["sample", "--posterior", &post, "--features", &w.p(&format!("folds/fold{j}.val.csv")), "--out", &matrix]);
        ok(&["sweep", "--matrix", &matrix, "--out", &sweep]);
        sweeps.push(sweep);
    }
    let (md, svg) = (w.p("report.md"), w.p("report.svg"));
    let mut args = vec!["report", "--sweep-csv"];
    args.extend(sweeps.iter().map(String::as_str));
    args.extend(["--out-md", &md, "--out-svg", &svg]);
    ok(&args);
    assert!(start.elapsed() < Duration::from_secs(300), "pipeline took {:?}", start.elapsed());

    let table = std::fs::read_to_string(&md).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| 0")).count(), 12);

    let series = coverage_series(&std::fs::read_to_string(&svg).unwrap());
    assert_eq!(series.len(), 2);
    for ys in series {
        assert_eq!(ys.len(), 6);
        // SVG y grows downwards, so non-increasing coverage means non-decreasing y
        assert!(ys.windows(2).all(|w| w[1] >= w[0]), "{ys:?}");
    }

    // separable blobs: the forced head is nearly perfect
    let out = ok(&["eval", "--matrix", &w.p("m0.bpmx"), "--n", "0", "--p", "0"]);
    let line = String::from_utf8(out.stdout).unwrap();
    let acc: f64 = line.trim().rsplit_once("accuracy=").unwrap().1.parse().unwrap();
    assert!(acc >= 0.95, "{line}");
}

#[test]
fn help_and_version() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
}
