mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mtcool::harness::ExperimentConfig;

const SYNTHETIC: &str = r#"
methods = ["mt_cool", "vanilla"]
repeats = 3
seed = 7
output = "unused"

[dataset]
kind = "synthetic"
batch_size = 8
hidden = [8]

[dataset.generator]
input_dim = 6
latent_dim = 2
classes = 3
train_per_task = 40
test_per_task = 60

[train]
warmup_iters = 5
outer_iters = 30
kl_mode = "vs_clean"
eval_every = 10
"#;

const LANDSCAPE: &str = r#"
methods = ["mt_cool", "vanilla"]
repeats = 2
output = "unused"

[dataset]
kind = "landscape"

[train]
b = 0.5
alpha = 0.01
beta = 0.01
lambda = 0.0
warmup_iters = 20
outer_iters = 60
eval_every = 0
"#;

fn mtcool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtcool"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run_cli(config: &Path, out: &Path) {
    let o = mtcool(&[
        "run",
        config.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

/// Every `.csv` file under `dir` except wall-clock sidecars, keyed by
/// relative path.
fn deterministic_csvs(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            if p.is_dir() {
                stack.push(p);
            } else if name.ends_with(".csv") && !name.starts_with("timing_") {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn repeated_runs_write_byte_identical_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "syn.toml", SYNTHETIC);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_cli(&cfg, &a);
    run_cli(&cfg, &b);
    let (ca, cb) = (deterministic_csvs(&a), deterministic_csvs(&b));
    assert!(ca.contains_key(Path::new("summary.csv")));
    assert!(ca.contains_key(Path::new("mt_cool/run_2.csv")));
    assert!(ca.len() >= 8, "{:?}", ca.keys());
    assert_eq!(ca, cb);
}

/// Final accuracy per task and negative-transfer rate, parsed without the
/// library's reader.
fn run_metrics(path: &Path) -> (Vec<f64>, f64) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let acc_cols = [col("accuracy_1"), col("accuracy_2")];
    let nt = col("negative_transfer");
    let mut acc = None;
    let (mut hits, mut n) = (0.0, 0.0);
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0], "1");
        if !f[acc_cols[0]].is_empty() {
            acc = Some(acc_cols.iter().map(|&c| f[c].parse().unwrap()).collect());
        }
        if !f[nt].is_empty() {
            hits += f[nt].parse::<f64>().unwrap();
            n += 1.0;
        }
    }
    (acc.unwrap(), hits / n)
}

fn mean_and_sample_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[test]
fn summary_matches_statistics_recomputed_from_run_csvs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "syn.toml", SYNTHETIC);
    let out = tmp.path().join("out");
    run_cli(&cfg, &out);

    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut rows = summary.lines();
    assert_eq!(rows.next().unwrap(), "lambda,metric,method,task,n,mean,std");
    let mut checked = 0;
    for line in rows {
        let f: Vec<&str> = line.split(',').collect();
        let (metric, method, task) = (f[1], f[2], f[3].parse::<usize>().unwrap());
        let values: Vec<f64> = (0..3)
            .map(|r| {
                let (acc, nt) = run_metrics(&out.join(method).join(format!("run_{r}.csv")));
                match metric {
                    "accuracy" => acc[task - 1],
                    "negative_transfer" => nt,
                    other => panic!("unexpected metric {other}"),
                }
            })
            .collect();
        let (mean, std) = mean_and_sample_std(&values);
        let (m, s): (f64, f64) = (f[5].parse().unwrap(), f[6].parse().unwrap());
        assert_eq!(f[4], "3");
        assert!(
            (m - mean).abs() <= 1e-12 * mean.abs().max(1.0),
            "{line}: mean {mean}"
        );
        assert!(
            (s - std).abs() <= 1e-12 * std.abs().max(1.0),
            "{line}: std {std}"
        );
        checked += 1;
    }
    assert_eq!(
        checked,
        2 * 3,
        "two methods x (two accuracies + negative transfer)"
    );
    let cmp = std::fs::read_to_string(out.join("comparisons.csv")).unwrap();
    assert!(cmp.lines().any(|l| l.contains("mt_cool,vanilla")), "{cmp}");
}

#[test]
fn plots_are_well_formed_and_contour_ends_at_last_row() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "land.toml", LANDSCAPE);
    let out = tmp.path().join("out");
    run_cli(&cfg, &out);
    let o = mtcool(&["plot", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let listed = String::from_utf8(o.stdout).unwrap();
    assert!(
        listed.contains("contour.svg") && listed.contains("loss_task1.svg"),
        "{listed}"
    );

    for f in listed.lines() {
        let text = std::fs::read_to_string(f).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{f}: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    let text = std::fs::read_to_string(out.join("contour.svg")).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let finals: Vec<_> = doc
        .descendants()
        .filter(|n| n.attribute("class") == Some("final"))
        .collect();
    assert_eq!(finals.len(), 4);
    for n in finals {
        let run = n.attribute("data-run").unwrap();
        let csv = std::fs::read_to_string(run).unwrap();
        let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
        let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
        let x0 = header.iter().position(|h| *h == "x0").unwrap();
        let want: (f64, f64) = (last[x0].parse().unwrap(), last[x0 + 1].parse().unwrap());
        let got: (f64, f64) = (
            n.attribute("data-x").unwrap().parse().unwrap(),
            n.attribute("data-y").unwrap().parse().unwrap(),
        );
        assert_eq!(got, want, "{run}");
    }
    assert!(doc
        .descendants()
        .any(|n| n.attribute("class") == Some("contour")));
}

#[test]
fn plot_reports_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mtcool(&["plot", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("no runs found"), "{}", stderr(&o));
}

#[test]
fn mismatched_schema_version_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "land.toml", LANDSCAPE);
    let out = tmp.path().join("out");
    run_cli(&cfg, &out);
    let run = out.join("vanilla").join("run_1.csv");
    let text = std::fs::read_to_string(&run).unwrap();
    let bumped: String = text
        .lines()
        .enumerate()
        .map(|(i, l)| {
            if i == 3 {
                format!("2{}\n", &l[1..])
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    std::fs::write(&run, bumped).unwrap();
    let o = mtcool(&["plot", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("run_1.csv") && e.contains("version"), "{e}");
}

#[test]
fn exit_codes_distinguish_validation_from_runtime_failures() {
    let tmp = tempfile::tempdir().unwrap();

    let bad = write_config(
        tmp.path(),
        "bad.toml",
        &LANDSCAPE.replace("b = 0.5", "b = -1.0"),
    );
    let o = mtcool(&["run", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.b"), "{}", stderr(&o));

    let unknown = write_config(
        tmp.path(),
        "unknown.toml",
        &LANDSCAPE.replace("b = 0.5", "bound = 0.5"),
    );
    let o = mtcool(&["run", unknown.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.bound"), "{}", stderr(&o));

    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let cfg = write_config(tmp.path(), "land.toml", LANDSCAPE);
    let o = mtcool(&[
        "run",
        cfg.to_str().unwrap(),
        "--output",
        blocker.join("out").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = mtcool(&["run", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = mtcool(&["verify", "--cases", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[PASS] gradient check"));
}

#[test]
fn shipped_configs_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        let mut text = std::fs::read_to_string(&path).unwrap();
        if text.contains("mnist_even_odd") {
            let Some(mnist) = common::mnist_dir() else {
                eprintln!("skipping {}: MNIST files not present", path.display());
                continue;
            };
            text = text.replace(
                "kind = \"mnist_even_odd\"",
                &format!(
                    "kind = \"mnist_even_odd\"\ndir = {:?}",
                    mnist.to_str().unwrap()
                ),
            );
        }
        let cfg = ExperimentConfig::from_toml(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.repeats >= 1);
        seen += 1;
    }
    assert!(seen >= 3);
}
