use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn fwls(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fwls"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = fwls(args);
    assert!(
        out.status.success(),
        "fwls {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = fwls(args);
    assert!(!out.status.success(), "fwls {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_coeffs(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect()
}

fn summary_value(stdout: &str, key: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("no `{key}` in {stdout}"))
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

/// Deterministic pseudo-random value in [-1, 1).
fn hash01(a: u64, b: u64) -> f64 {
    let mut x = a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 31;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 29;
    (x >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

/// Stacked CSV with `l` models, `m` meta-features and, optionally, one extra
/// model column. Targets are an exact linear function of the FWLS columns
/// (including the extra model when present) plus optional noise.
fn write_stacked(path: &Path, n: usize, l: usize, m: usize, extra_model: bool, noise: f64) -> Vec<f64> {
    let lt = l + usize::from(extra_model);
    let mt = m + 1;
    let weights: Vec<f64> = (0..lt * mt).map(|c| 0.5 + 0.25 * hash01(99, c as u64)).collect();
    let mut s = String::from("id,y");
    for i in 1..=lt {
        s.push_str(&format!(",g:m{i}"));
    }
    for j in 1..=m {
        s.push_str(&format!(",f:x{j}"));
    }
    s.push('\n');
    for r in 0..n {
        let g: Vec<f64> = (0..lt).map(|i| hash01(r as u64, i as u64)).collect();
        let f: Vec<f64> = (0..m).map(|j| hash01(r as u64, 100 + j as u64)).collect();
        let full_f: Vec<f64> = std::iter::once(1.0).chain(f.iter().copied()).collect();
        let mut y = noise * hash01(r as u64, 777);
        for (j, fj) in full_f.iter().enumerate() {
            for (i, gi) in g.iter().enumerate() {
                y += weights[j * lt + i] * fj * gi;
            }
        }
        s.push_str(&format!("r{r},{y}"));
        for v in g.iter().chain(&f) {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
    weights
}

/// Writes the `(l+1)`-th model column of `full` as its own `id,g:` file and
/// `full` without it to `base`.
fn split_last_model(full: &Path, base: &Path, column: &Path, l: usize) {
    let text = fs::read_to_string(full).unwrap();
    let mut b = String::new();
    let mut c = String::new();
    for line in text.lines() {
        let cells: Vec<&str> = line.split(',').collect();
        let extra = 2 + l;
        let kept: Vec<&str> = cells
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != extra)
            .map(|(_, v)| *v)
            .collect();
        b.push_str(&kept.join(","));
        b.push('\n');
        c.push_str(&format!("{},{}\n", cells[0], cells[extra]));
    }
    fs::write(base, b).unwrap();
    fs::write(column, c).unwrap();
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den
}

#[test]
fn fit_toy_recovers_single_model() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    fs::write(&csv, "id,y,g:a\n1,1.0,1.0\n2,2.0,2.0\n3,-1.5,-1.5\n").unwrap();
    let coeffs = dir.path().join("c.csv");
    let out = ok(&["fit", "--input", p(&csv), "--lambda", "0", "--coeffs-out", p(&coeffs)]);
    let v = read_coeffs(&coeffs);
    assert_eq!(v.len(), 1);
    assert!((v[0] - 1.0).abs() < 1e-12);
    assert!(summary_value(&out, "train_rmse") < 1e-7);
    assert_eq!(
        fs::read_to_string(&coeffs).unwrap().lines().nth(1).unwrap(),
        format!("a,const,{}", v[0])
    );

    let out = ok(&["fit", "--input", p(&csv), "--lambda", "1e6", "--coeffs-out", p(&coeffs)]);
    let v = read_coeffs(&coeffs);
    assert!(v[0].abs() < 1e-4);
    let rms_y = ((1.0 + 4.0 + 2.25) / 3.0f64).sqrt();
    assert!((summary_value(&out, "train_rmse") - rms_y).abs() < 1e-3);
}

#[test]
fn fit_matches_generating_weights() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let w = write_stacked(&csv, 400, 3, 2, false, 0.0);
    let coeffs = dir.path().join("c.csv");
    for threads in ["1", "4"] {
        ok(&[
            "fit",
            "--input",
            p(&csv),
            "--lambda",
            "0",
            "--threads",
            threads,
            "--coeffs-out",
            p(&coeffs),
        ]);
        let v = read_coeffs(&coeffs);
        assert!(rel_l2(&v, &w) < 1e-8, "threads {threads}: {}", rel_l2(&v, &w));
    }
}

#[test]
fn fit_reports_parse_and_singular_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    let coeffs = dir.path().join("c.csv");
    fs::write(&csv, "id,y,g:a\n1,1.0,1.0\n2,2.0,oops\n").unwrap();
    let err = fails(&["fit", "--input", p(&csv), "--coeffs-out", p(&coeffs)]);
    assert!(err.contains("line 3"), "{err}");
    fs::write(&csv, "id,y,g:a\n1,1.0,1.0\n2,2.0,\n").unwrap();
    let err = fails(&["fit", "--input", p(&csv), "--coeffs-out", p(&coeffs)]);
    assert!(err.contains("line 3") && err.contains("missing"), "{err}");
    fs::write(&csv, "id,y,g:a\n1,1.0,0\n2,2.0,0\n").unwrap();
    let err = fails(&["fit", "--input", p(&csv), "--lambda", "0", "--coeffs-out", p(&coeffs)]);
    assert!(err.contains("singular") && err.contains('0'), "{err}");
    assert!(!coeffs.exists());
}

#[test]
fn predict_reproduces_in_sample_fit() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_stacked(&csv, 200, 2, 2, false, 0.1);
    let coeffs = dir.path().join("c.csv");
    let out = ok(&["fit", "--input", p(&csv), "--lambda", "0.01", "--coeffs-out", p(&coeffs)]);
    let preds = dir.path().join("p.csv");
    ok(&["predict", "--coeffs", p(&coeffs), "--input", p(&csv), "--output", p(&preds)]);
    let text = fs::read_to_string(&csv).unwrap();
    let y: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let pr: Vec<f64> = read_coeffs(&preds);
    let rmse = (pr.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!((rmse - summary_value(&out, "train_rmse")).abs() < 1e-9);
    assert!(fs::read_to_string(&preds).unwrap().starts_with("id,prediction\nr0,"));
}

#[test]
fn standardized_fit_round_trips_through_predict() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_stacked(&csv, 150, 2, 2, false, 0.05);
    let (coeffs, scaling, preds) = (dir.path().join("c.csv"), dir.path().join("s.csv"), dir.path().join("p.csv"));
    let out = ok(&[
        "fit",
        "--input",
        p(&csv),
        "--lambda",
        "0",
        "--standardize",
        "--scaling-out",
        p(&scaling),
        "--coeffs-out",
        p(&coeffs),
    ]);
    ok(&[
        "predict",
        "--coeffs",
        p(&coeffs),
        "--scaling",
        p(&scaling),
        "--input",
        p(&csv),
        "--output",
        p(&preds),
    ]);
    let y: Vec<f64> = fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let pr = read_coeffs(&preds);
    let rmse = (pr.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    assert!((rmse - summary_value(&out, "train_rmse")).abs() < 1e-9);
}

#[test]
fn cv_reports_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_stacked(&csv, 300, 2, 3, false, 0.2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = ok(&[
        "cv",
        "--input",
        p(&csv),
        "--k",
        "5",
        "--seed",
        "3",
        "--baseline",
        "merged",
        "--report-out",
        p(&a),
    ]);
    ok(&["cv", "--input", p(&csv), "--k", "5", "--seed", "3", "--baseline", "merged", "--report-out", p(&b)]);
    for ext in ["csv", "txt"] {
        let ra = fs::read(a.with_extension(ext)).unwrap();
        let rb = fs::read(b.with_extension(ext)).unwrap();
        assert_eq!(ra, rb, "{ext} differs");
    }
    let report = fs::read_to_string(a.with_extension("csv")).unwrap();
    assert!(report.starts_with("m,feature,oos_rmse\n1,const,"));
    assert!(report.contains("merged,baseline,"));
    assert!(out.contains("merged-inputs baseline"));
    let rmses: Vec<f64> = report
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with("merged"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(rmses.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn cv_feature_modes_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_stacked(&csv, 60, 2, 2, false, 0.2);
    let all = ok(&["cv", "--input", p(&csv), "--k", "4", "--features", "all"]);
    assert!(all.contains("const") && all.contains("x1") && all.contains("x2"));
    let list = ok(&["cv", "--input", p(&csv), "--k", "4", "--features", "x2", "--lambda-grid", "0.001,0.1"]);
    assert!(list.contains("x2") && !list.contains("x1"));
    let err = fails(&["cv", "--input", p(&csv), "--k", "61"]);
    assert!(err.contains("61"), "{err}");
    let err = fails(&["cv", "--input", p(&csv), "--features", "nope"]);
    assert!(err.contains("nope"), "{err}");
}

fn fit_state(state: &Path, coeffs: &Path, lambda: &str) -> Vec<f64> {
    ok(&["fit", "--state-in", p(state), "--lambda", lambda, "--coeffs-out", p(coeffs)]);
    read_coeffs(coeffs)
}

#[test]
fn extend_then_fit_matches_fit_from_scratch() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| -> PathBuf { dir.path().join(n) };
    write_stacked(&d("full.csv"), 300, 2, 2, true, 0.1);
    split_last_model(&d("full.csv"), &d("base.csv"), &d("new.csv"), 2);

    ok(&[
        "fit",
        "--input",
        p(&d("base.csv")),
        "--coeffs-out",
        p(&d("c0.csv")),
        "--state-out",
        p(&d("s0.fwls")),
    ]);
    let before = fs::read(d("s0.fwls")).unwrap();
    let dataset_before = fs::read(d("base.csv")).unwrap();
    ok(&[
        "extend",
        "--state-in",
        p(&d("s0.fwls")),
        "--dataset",
        p(&d("base.csv")),
        "--new-model",
        p(&d("new.csv")),
        "--state-out",
        p(&d("s1.fwls")),
    ]);
    assert_eq!(fs::read(d("s0.fwls")).unwrap(), before);
    assert_eq!(fs::read(d("base.csv")).unwrap(), dataset_before);

    ok(&["fit", "--input", p(&d("full.csv")), "--lambda", "0.01", "--coeffs-out", p(&d("scratch.csv"))]);
    let scratch = read_coeffs(&d("scratch.csv"));
    let extended = fit_state(&d("s1.fwls"), &d("ext.csv"), "0.01");
    assert_eq!(scratch.len(), extended.len());
    assert!(rel_l2(&extended, &scratch) < 1e-8, "{}", rel_l2(&extended, &scratch));
}

#[test]
fn extend_with_new_feature_and_duplicate_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| -> PathBuf { dir.path().join(n) };
    write_stacked(&d("base.csv"), 120, 2, 1, false, 0.1);
    ok(&[
        "fit",
        "--input",
        p(&d("base.csv")),
        "--coeffs-out",
        p(&d("c.csv")),
        "--state-out",
        p(&d("s.fwls")),
    ]);
    // duplicate of the first model
    let text = fs::read_to_string(d("base.csv")).unwrap();
    let dup: String = text
        .lines()
        .enumerate()
        .map(|(k, l)| {
            let c: Vec<&str> = l.split(',').collect();
            if k == 0 {
                "id,g:copy\n".to_string()
            } else {
                format!("{},{}\n", c[0], c[2])
            }
        })
        .collect();
    fs::write(d("dup.csv"), dup).unwrap();
    ok(&[
        "extend",
        "--state-in",
        p(&d("s.fwls")),
        "--dataset",
        p(&d("base.csv")),
        "--new-model",
        p(&d("dup.csv")),
        "--state-out",
        p(&d("s2.fwls")),
    ]);
    assert_eq!(fit_state(&d("s2.fwls"), &d("c2.csv"), "0.1").len(), 3 * 2);

    let feat: String = text
        .lines()
        .enumerate()
        .map(|(k, l)| {
            let id = l.split(',').next().unwrap();
            if k == 0 {
                "id,f:extra\n".to_string()
            } else {
                format!("{id},{}\n", k as f64 * 0.01)
            }
        })
        .collect();
    fs::write(d("feat.csv"), feat).unwrap();
    let out = ok(&[
        "extend",
        "--state-in",
        p(&d("s.fwls")),
        "--dataset",
        p(&d("base.csv")),
        "--new-feature",
        p(&d("feat.csv")),
        "--state-out",
        p(&d("s3.fwls")),
    ]);
    assert!(out.contains("columns 6"), "{out}");
}

#[test]
fn extend_rejects_misaligned_columns() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| -> PathBuf { dir.path().join(n) };
    write_stacked(&d("base.csv"), 50, 2, 1, false, 0.1);
    ok(&[
        "fit",
        "--input",
        p(&d("base.csv")),
        "--coeffs-out",
        p(&d("c.csv")),
        "--state-out",
        p(&d("s.fwls")),
    ]);
    let short: String = std::iter::once("id,g:new\n".to_string())
        .chain((0..49).map(|r| format!("r{r},0.5\n")))
        .collect();
    fs::write(d("short.csv"), short).unwrap();
    let args = |col: &Path| {
        vec![
            "extend".to_string(),
            "--state-in".into(),
            p(&d("s.fwls")).into(),
            "--dataset".into(),
            p(&d("base.csv")).into(),
            "--new-model".into(),
            p(col).into(),
            "--state-out".into(),
            p(&d("out.fwls")).into(),
        ]
    };
    let run = |col: &Path| {
        let a = args(col);
        fails(&a.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let err = run(&d("short.csv"));
    assert!(err.contains("50") && err.contains("49"), "{err}");

    let shuffled: String = std::iter::once("id,g:new\n".to_string())
        .chain((0..50).rev().map(|r| format!("r{r},0.5\n")))
        .collect();
    fs::write(d("shuffled.csv"), shuffled).unwrap();
    let err = run(&d("shuffled.csv"));
    assert!(err.contains("different examples"), "{err}");
    assert!(!d("out.fwls").exists());
}

#[test]
fn bench_quick_writes_reports_into_new_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("nested").join("out");
    let start = Instant::now();
    let stdout = ok(&["bench", "--quick", "--out-dir", p(&out_dir), "--seed", "4"]);
    assert!(start.elapsed().as_secs() < 60);
    for f in ["strategies.csv", "strategies.txt", "selection.csv", "selection.txt"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    assert!(stdout.contains("fwls") && stdout.contains("standard_stacking"));
    let again = ok(&["bench", "--quick", "--out-dir", p(&out_dir), "--seed", "4"]);
    assert_eq!(stdout, again);
}

#[test]
fn bench_reads_config_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("b.toml");
    fs::write(&cfg, "n_users = 300\nn_items = 100\nmean_ratings_per_user = 30.0\nfolds = 4\n").unwrap();
    let out = ok(&["bench", "--config", p(&cfg), "--out-dir", p(&dir.path().join("o"))]);
    assert!(out.contains("4-fold"));
    fs::write(&cfg, "n_userz = 300\n").unwrap();
    let err = fails(&["bench", "--config", p(&cfg), "--out-dir", p(&dir.path().join("o"))]);
    assert!(err.contains("n_userz"), "{err}");
}
