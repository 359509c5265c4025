use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdmica::cli::{fmt_significant, parse_csv};
use mdmica::measures::{Bandwidth, MeasureKind};
use mdmica::metrics::md_index;
use nalgebra::DMatrix;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdmica"));
    cmd.env_remove("MDMICA_SEED");
    cmd
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(path: &Path) -> DMatrix<f64> {
    parse_csv(fs::read(path).unwrap().as_slice()).unwrap()
}

fn write_matrix(path: &Path, m: &DMatrix<f64>) {
    let text: Vec<String> =
        m.row_iter().map(|r| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")).collect();
    fs::write(path, text.join("\n") + "\n").unwrap();
}

fn field(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
        .to_string()
}

#[test]
fn measure_of_identical_constant_columns_is_zero() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.csv");
    fs::write(&path, "2.5,2.5\n2.5,2.5\n2.5,2.5\n").unwrap();
    for m in ["asym", "sym", "comp"] {
        let out = run(&["measure", path.to_str().unwrap(), "--measure", m]);
        assert_eq!(stdout(&out).trim(), "0");
    }
}

#[test]
fn measure_matches_library_on_fixture() {
    let input = data("mixed_12x3.csv");
    let x = read(&input);
    assert_eq!(x.shape(), (12, 3));
    for (name, kind) in [
        ("asym", MeasureKind::Asym),
        ("sym", MeasureKind::Sym),
        ("comp", MeasureKind::Comp),
        ("hsic", MeasureKind::hsic_median()),
    ] {
        let out = run(&["measure", input.to_str().unwrap(), "--measure", name]);
        let expected = fmt_significant(kind.evaluate_matrix(&x).unwrap(), 12);
        assert_eq!(stdout(&out).trim(), expected, "{name}");
        // the manifest goes to stderr as one JSON object
        let manifest: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(manifest["command"], "measure");
    }
    let out = run(&["measure", input.to_str().unwrap(), "--measure", "hsic", "--bandwidth", "0.5,1,2"]);
    let kind = MeasureKind::Hsic(Bandwidth::Fixed(vec![0.5, 1.0, 2.0]));
    assert_eq!(stdout(&out).trim(), fmt_significant(kind.evaluate_matrix(&x).unwrap(), 12));
}

#[test]
fn measure_error_paths() {
    let dir = TempDir::new().unwrap();
    let flat = dir.path().join("flat.csv");
    fs::write(&flat, "1,0.5\n1,0.2\n1,0.9\n").unwrap();
    let out = run(&["measure", flat.to_str().unwrap(), "--measure", "hsic"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bandwidth"));

    let one = dir.path().join("one.csv");
    fs::write(&one, "1\n2\n3\n").unwrap();
    assert_eq!(run(&["measure", one.to_str().unwrap()]).status.code(), Some(2));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n3,x\n").unwrap();
    let out = run(&["measure", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    assert_eq!(run(&["measure", "does-not-exist.csv"]).status.code(), Some(2));
    assert_eq!(run(&["measure"]).status.code(), Some(2));
}

#[test]
fn ica_outputs_recompute_sources() {
    let dir = TempDir::new().unwrap();
    let input = data("mixed_12x3.csv");
    let out_dir = dir.path().join("run");
    let out = run(&[
        "ica",
        input.to_str().unwrap(),
        "--measure",
        "sym",
        "--init",
        "lhs",
        "--seed",
        "4",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    let text = stdout(&out);
    let y = read(&input);
    let x_hat = read(&out_dir.join("X_hat.csv"));
    let w = read(&out_dir.join("W_hat.csv"));
    let h = read(&out_dir.join("H.csv"));
    let mean = read(&out_dir.join("mean.csv"));
    let centered = DMatrix::from_fn(12, 3, |k, j| y[(k, j)] - mean[(0, j)]);
    let recomputed = centered * h.transpose() * w.transpose();
    assert!((recomputed - &x_hat).amax() < 1e-10);
    assert!(((w.transpose() * &w) - DMatrix::identity(3, 3)).amax() < 1e-10);

    let manifest: serde_json::Value =
        serde_json::from_str(fs::read_to_string(out_dir.join("result.jsonl")).unwrap().trim()).unwrap();
    assert_eq!(manifest["command"], "ica");
    let result = &manifest["result"];
    for key in ["objective", "init_objective", "evaluations", "wall_time"] {
        assert!(result[key].is_number(), "{key}");
    }
    assert_eq!(result["objective"].as_f64().unwrap(), field(&text, "objective").parse::<f64>().unwrap());
    assert_eq!(MeasureKind::Sym.evaluate_matrix(&x_hat).unwrap(), result["objective"].as_f64().unwrap());
}

#[test]
fn ica_lhs_not_worse_than_single() {
    let dir = TempDir::new().unwrap();
    let input = data("mixed_12x3.csv");
    let objective = |init: &str| -> f64 {
        let out_dir = dir.path().join(init);
        let out = run(&[
            "ica",
            input.to_str().unwrap(),
            "--measure",
            "comp",
            "--init",
            init,
            "--seed",
            "7",
            "--out-dir",
            out_dir.to_str().unwrap(),
        ]);
        field(&stdout(&out), "objective").parse().unwrap()
    };
    assert!(objective("lhs") <= objective("single"));
}

#[test]
fn ica_error_paths() {
    let dir = TempDir::new().unwrap();
    let input = data("mixed_12x3.csv");
    let out_dir = dir.path().join("x");
    let out = run(&[
        "ica",
        input.to_str().unwrap(),
        "--scheme",
        "def",
        "--measure",
        "sym",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let one = dir.path().join("one.csv");
    fs::write(&one, "1\n2\n3\n").unwrap();
    assert_eq!(run(&["ica", one.to_str().unwrap()]).status.code(), Some(2));

    // collinear columns: whitening cannot proceed
    let twin = dir.path().join("twin.csv");
    fs::write(&twin, "1,2\n2,4\n3,6\n4,8\n5,10\n").unwrap();
    let out = run(&["ica", twin.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["ica", input.to_str().unwrap(), "--init", "random"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = TempDir::new().unwrap();
    let input = data("mixed_12x3.csv");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let explicit = run(&[
        "ica",
        input.to_str().unwrap(),
        "--init",
        "single",
        "--seed",
        "31",
        "--out-dir",
        a.to_str().unwrap(),
    ]);
    let from_env = bin()
        .args(["ica", input.to_str().unwrap(), "--init", "single", "--out-dir", b.to_str().unwrap()])
        .env("MDMICA_SEED", "31")
        .output()
        .unwrap();
    assert_eq!(stdout(&explicit), stdout(&from_env));
    assert_eq!(fs::read(a.join("X_hat.csv")).unwrap(), fs::read(b.join("X_hat.csv")).unwrap());
}

#[test]
fn replay_reproduces_ica_outputs() {
    let dir = TempDir::new().unwrap();
    let input = data("mixed_12x3.csv");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    stdout(&run(&[
        "ica",
        input.to_str().unwrap(),
        "--measure",
        "comp",
        "--init",
        "lhs+bo",
        "--lhs-points",
        "5",
        "--bo-iters",
        "3",
        "--seed",
        "2",
        "--out-dir",
        first.to_str().unwrap(),
    ]));
    let manifest = first.join("result.jsonl");
    stdout(&run(&["replay", manifest.to_str().unwrap(), "--output", second.to_str().unwrap()]));
    for f in ["X_hat.csv", "W_hat.csv", "H.csv", "mean.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f}");
    }
}

fn parse_table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let header = rdr.headers().unwrap().iter().map(String::from).collect();
    let rows = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn benchmark_smoke_for_every_label() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv");
    let labels = "asy-def,asy-par,sym,com,hsic,sym@lhs+bo";
    let text = stdout(&run(&[
        "benchmark",
        "--model",
        "1",
        "--estimators",
        labels,
        "--trials",
        "1",
        "--n",
        "120",
        "--source",
        "bimodal",
        "--lhs-points",
        "3",
        "--bo-iters",
        "2",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(text.lines().count(), 6);
    let (header, rows) = parse_table(&out);
    let md = header.iter().position(|h| h == "md").unwrap();
    let trial_rows: Vec<_> = rows.iter().filter(|r| r[0] == "trial").collect();
    assert_eq!(trial_rows.len(), 6);
    for r in &trial_rows {
        let v: f64 = r[md].parse().unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
    let jsonl = fs::read_to_string(out.with_extension("jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 7);
}

#[test]
fn benchmark_unknown_label_lists_valid_ones() {
    let out = run(&["benchmark", "--model", "1", "--estimators", "fastica", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("asy-def") && err.contains("hsic"), "{err}");
    assert_eq!(run(&["benchmark", "--model", "7"]).status.code(), Some(2));
}

#[test]
fn benchmark_aggregates_match_trial_rows() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("agg.csv");
    stdout(&run(&[
        "benchmark",
        "--model",
        "3",
        "--d",
        "3",
        "--estimators",
        "sym@single,com@single",
        "--trials",
        "4",
        "--n",
        "100",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    let (header, rows) = parse_table(&out);
    for label in ["sym@single", "com@single"] {
        for col in ["md", "objective", "wall_time", "evaluations"] {
            let c = header.iter().position(|h| h == col).unwrap();
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r[0] == "trial" && r[2] == label)
                .map(|r| r[c].parse().unwrap())
                .collect();
            assert_eq!(vals.len(), 4);
            let k = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / k;
            let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
            let agg = |kind: &str| -> f64 {
                rows.iter().find(|r| r[0] == kind && r[2] == label).unwrap()[c].parse().unwrap()
            };
            assert!((agg("mean") - mean).abs() <= 1e-12 * mean.abs().max(1.0), "{label} {col}");
            assert!((agg("stderr") - sd / k.sqrt()).abs() <= 1e-12 * sd.max(1.0), "{label} {col}");
        }
    }
}

#[test]
fn benchmark_misspecified_model_decreases_measures() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("m4.csv");
    stdout(&run(&[
        "benchmark",
        "--model",
        "4",
        "--estimators",
        "sym,com",
        "--trials",
        "2",
        "--n",
        "300",
        "--seed",
        "1",
        "--out",
        out.to_str().unwrap(),
    ]));
    let (header, rows) = parse_table(&out);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in rows.iter().filter(|r| r[0] == "trial") {
        assert!(r[col("md")].is_empty());
        let (before, after) = match r[2].as_str() {
            "sym" => (col("sym_before"), col("sym_after")),
            _ => (col("comp_before"), col("comp_after")),
        };
        let b: f64 = r[before].parse().unwrap();
        let a: f64 = r[after].parse().unwrap();
        assert!(a <= b, "{}: {a} > {b}", r[2]);
    }
}

#[test]
fn benchmark_replay_is_bitwise() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("r.csv");
    let again = dir.path().join("r2.csv");
    stdout(&run(&[
        "benchmark",
        "--model",
        "2",
        "--d",
        "2",
        "--estimators",
        "asy-def",
        "--trials",
        "2",
        "--n",
        "80",
        "--seed",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]));
    stdout(&run(&[
        "replay",
        out.with_extension("jsonl").to_str().unwrap(),
        "--output",
        again.to_str().unwrap(),
    ]));
    // wall times differ between runs; everything else must agree
    let (header, a) = parse_table(&out);
    let (_, b) = parse_table(&again);
    let wt = header.iter().position(|h| h == "wall_time").unwrap();
    for (ra, rb) in a.iter().zip(&b) {
        for (k, (x, y)) in ra.iter().zip(rb).enumerate() {
            if k != wt {
                assert_eq!(x, y);
            }
        }
    }
}

#[test]
fn md_command() {
    let w_hat = data("w_hat_3x3.csv");
    let w0 = data("w0_3x3.csv");
    let same = stdout(&run(&["md", w0.to_str().unwrap(), w0.to_str().unwrap()]));
    assert!(field(&same, "md").parse::<f64>().unwrap() < 1e-12);

    let dir = TempDir::new().unwrap();
    let w0m = read(&w0);
    let pd = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, -2.0, 0.5, 0.0, 0.0, 0.0, 3.0, 0.0]);
    let moved = dir.path().join("moved.csv");
    write_matrix(&moved, &(pd * &w0m));
    let text = stdout(&run(&["md", moved.to_str().unwrap(), w0.to_str().unwrap()]));
    assert!(field(&text, "md").parse::<f64>().unwrap() < 1e-12);

    let text = stdout(&run(&["md", w_hat.to_str().unwrap(), w0.to_str().unwrap()]));
    let report = md_index(&read(&w_hat), &w0m).unwrap();
    assert_eq!(field(&text, "md").parse::<f64>().unwrap(), report.md);
    // exhaustive oracle over the 3! assignments
    let g = read(&w_hat) * w0m.clone().try_inverse().unwrap();
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let best = perms
        .iter()
        .map(|p| (0..3).map(|k| 1.0 - g[(k, p[k])].powi(2) / g.row(k).norm_squared()).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    assert!((report.md - (best / 2.0).sqrt()).abs() < 1e-12);
    assert!(text.contains("permutation ") && text.contains("scalings "));

    let singular = dir.path().join("singular.csv");
    fs::write(&singular, "1,2,3\n2,4,6\n0,0,1\n").unwrap();
    assert_eq!(run(&["md", w_hat.to_str().unwrap(), singular.to_str().unwrap()]).status.code(), Some(2));
    let small = dir.path().join("small.csv");
    fs::write(&small, "1,0\n0,1\n").unwrap();
    assert_eq!(run(&["md", w_hat.to_str().unwrap(), small.to_str().unwrap()]).status.code(), Some(2));
}
