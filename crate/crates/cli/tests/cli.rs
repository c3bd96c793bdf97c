use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pggm_cli::config::{Estimator, RunConfig};
use sha2::{Digest, Sha256};

fn pggm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pggm")).args(args).output().unwrap()
}

/// Small problem sizes so each run takes seconds.
const SMALL: [&str; 8] = ["--set", "simulate.n=40", "--set", "simulate.p=4", "--set", "fit.grid_points=3", "--q", "6"];

fn run_ok(args: &[&str]) {
    let out = pggm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Runs `args` from `dir`. The run configuration echoes `--out`, so runs to
/// be compared byte for byte use the same relative output path.
fn run_ok_in(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_pggm")).current_dir(dir).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn with_small<'a>(base: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend(SMALL);
    v
}

fn hashes(root: &Path) -> Vec<(PathBuf, String)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, String)>) {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let digest = Sha256::digest(fs::read(&p).unwrap());
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), hex));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn simulate_writes_the_requested_replications() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_small(&["simulate", "--out", out, "--reps", "2"]));
    let reps: Vec<_> = fs::read_dir(dir.path().join("q6")).unwrap().collect();
    assert_eq!(reps.len(), 2);
    for name in ["truth.bin", "train.bin", "validation.bin", "test.bin", "meta.json"] {
        assert!(dir.path().join("q6/rep001").join(name).is_file(), "{name}");
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_ok_in(d.path(), &with_small(&["simulate", "--out", "run", "--reps", "2", "--seed", "9"]));
    }
    let (ha, hb) = (hashes(&a.path().join("run")), hashes(&b.path().join("run")));
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);

    let c = tempfile::tempdir().unwrap();
    run_ok_in(c.path(), &with_small(&["simulate", "--out", "run", "--reps", "2", "--seed", "10"]));
    assert_ne!(hashes(&c.path().join("run")), ha);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(pggm(&["simulate", "--out", out, "--set", "simulate.bogus=1"]).status.code(), Some(2));
    assert_eq!(pggm(&["simulate", "--out", out, "--reps", "0"]).status.code(), Some(2));
    assert_eq!(pggm(&["fit", "--out", out, "--estimator", "glasso"]).status.code(), Some(2));
    assert_eq!(pggm(&["frobnicate"]).status.code(), Some(2));
    // No edges at all: the design cannot reach its target condition number.
    let gen = pggm(&[
        "simulate",
        "--out",
        out,
        "--reps",
        "1",
        "--q",
        "2",
        "--set",
        "simulate.p=2",
        "--set",
        "simulate.edge_prob=0",
    ]);
    assert_eq!(gen.status.code(), Some(3), "{}", String::from_utf8_lossy(&gen.stderr));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(pggm(&["fit", "--out", empty.path().to_str().unwrap()]).status.code(), Some(5));
    assert_eq!(pggm(&["evaluate", "--out", empty.path().to_str().unwrap()]).status.code(), Some(5));

    // Fitted replications without the requested estimator's fit.
    let sim = tempfile::tempdir().unwrap();
    let s = sim.path().to_str().unwrap();
    run_ok(&with_small(&["simulate", "--out", s, "--reps", "1"]));
    assert_eq!(pggm(&["evaluate", "--out", s]).status.code(), Some(5));

    // A zero step floor makes the config invalid.
    assert_eq!(pggm(&with_small(&["fit", "--out", s, "--set", "fit.solver.min_step=0"])).status.code(), Some(2));
}

#[test]
fn overflowing_data_is_a_solver_failure() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    let mut text = String::from("y0,x0,x1\n");
    for i in 0..30 {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        text.push_str(&format!("{},{},{}\n", sign * 1e308, (i % 5) as f64, (i % 3) as f64));
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("run");
    let c = format!("data.csv=\"{}\"", csv.display());
    let o =
        pggm(&["fit", "--out", out.to_str().unwrap(), "--set", &c, "--set", "data.p=1", "--set", "fit.grid_points=3"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pggm_fit_converges_and_nslasso_stores_supports_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_small(&["simulate", "--out", out, "--reps", "1"]));
    run_ok(&with_small(&["fit", "--out", out, "--estimator", "pggm,nslasso"]));
    let fits = dir.path().join("q6/rep000/fits");
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fits.join("pggm/fit.json")).unwrap()).unwrap();
    assert_eq!(record["termination"], "converged");
    assert!(fits.join("pggm/theta.bin").is_file());
    assert!(fits.join("pggm/grid.csv").is_file());
    assert!(fits.join("nslasso/support.csv").is_file());
    assert!(!fits.join("nslasso/theta.bin").exists());
    let ns: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fits.join("nslasso/fit.json")).unwrap()).unwrap();
    assert!(ns["omega"].is_null() && ns["theta"].is_null());
}

#[test]
fn univariate_needs_a_single_response() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let args = ["--set", "simulate.n=50", "--set", "simulate.p=1", "--q", "5", "--set", "fit.grid_points=4"];
    let mut sim = vec!["simulate", "--out", out, "--reps", "1"];
    sim.extend(args);
    run_ok(&sim);
    let mut fit = vec!["fit", "--out", out, "--estimator", "univariate"];
    fit.extend(args);
    run_ok(&fit);
    let text = fs::read_to_string(dir.path().join("q5/rep000/fits/univariate/fit.json")).unwrap();
    let record: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(record["omega"].as_f64().unwrap() > 0.0);
    assert_eq!(record["theta"].as_array().unwrap().len(), 5);

    let multi = tempfile::tempdir().unwrap();
    let m = multi.path().to_str().unwrap();
    run_ok(&with_small(&["simulate", "--out", m, "--reps", "1"]));
    assert_eq!(pggm(&with_small(&["fit", "--out", m, "--estimator", "univariate"])).status.code(), Some(2));
}

#[test]
fn one_category_gives_perfect_topk_precision() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    run_ok(&with_small(&["simulate", "--out", out, "--reps", "1"]));
    run_ok(&with_small(&["fit", "--out", out]));
    let cats = dir.path().join("categories.csv");
    fs::write(&cats, "variable,category\n0,a\n1,a\n2,a\n3,a\n").unwrap();
    let mut args = with_small(&["evaluate", "--out", out, "--mu", "1e-9", "--topk", "3"]);
    let cats_s = cats.to_str().unwrap().to_string();
    args.extend(["--categories", &cats_s]);
    run_ok(&args);
    let text = fs::read_to_string(dir.path().join("eval/topk.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("estimator,q,rep,k,precision"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let counts = fs::read_to_string(dir.path().join("eval/link_counts.csv")).unwrap();
    let count: usize = counts.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    let want = if count == 0 { 0.0 } else { 1.0 };
    assert_eq!(row[4].parse::<f64>().unwrap(), want);
    assert!(dir.path().join("eval/links/pggm_q6_rep000.csv").is_file());
}

#[test]
fn data_csv_is_split_and_scored_on_test() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("data.csv");
    let mut text = String::from("y0,y1,x0,x1,x2\n");
    let mut state = 12345u64;
    let mut unit = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    for _ in 0..60 {
        let x: Vec<f64> = (0..3).map(|_| unit()).collect();
        let y0 = x[0] + 0.3 * unit();
        let y1 = y0 - x[2] + 0.3 * unit();
        text.push_str(&format!("{y0},{y1},{},{},{}\n", x[0], x[1], x[2]));
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("run");
    let (o, c) = (out.to_str().unwrap(), format!("data.csv=\"{}\"", csv.display()));
    let base = ["--out", o, "--set", &c, "--set", "data.p=2", "--set", "fit.grid_points=3"];
    let mut fit = vec!["fit"];
    fit.extend(base);
    run_ok(&fit);
    let mut eval = vec!["evaluate", "--input"];
    let data_dir = out.join("data");
    let d = data_dir.to_str().unwrap();
    eval.push(d);
    eval.extend(base);
    run_ok(&eval);
    let t = fs::read_to_string(out.join("eval/test_objective.csv")).unwrap();
    assert_eq!(t.lines().count(), 2);
    assert!(t.lines().nth(1).unwrap().starts_with("pggm,3,0,"));
}

/// Benchmark output headers are part of the interface.
#[test]
fn benchmark_schema_is_stable() {
    let tmp = tempfile::tempdir().unwrap();
    run_ok_in(tmp.path(), &with_small(&["benchmark", "--out", "run", "--reps", "2"]));
    let dir = tmp.path().join("run");
    let golden = [
        ("failures.csv", "run,estimator,error"),
        (
            "eval/metrics.csv",
            "estimator,q,rep,operator,l1,frobenius,fscore,yy_operator,yy_l1,yy_frobenius,yy_fscore,precision,recall",
        ),
        ("eval/summary.csv", "estimator,q,metric,mean,se,count"),
        ("eval/timing.csv", "estimator,q,rep,select_seconds,fit_seconds"),
        ("eval/summary_timing.csv", "estimator,q,metric,mean,se,count"),
        ("eval/test_objective.csv", "estimator,q,rep,test_lpa"),
        ("eval/joint_comparison.csv", "estimator,q,frobenius_mean,frobenius_se,fscore_mean,fscore_se"),
        ("eval/joint_comparison_cpu.csv", "estimator,q,cpu_mean,cpu_se"),
        ("eval/yy_comparison.csv", "estimator,q,yy_frobenius_mean,yy_frobenius_se,yy_fscore_mean,yy_fscore_se"),
        ("eval/yy_comparison_cpu.csv", "estimator,q,cpu_mean,cpu_se"),
    ];
    for (file, header) in golden {
        let text = fs::read_to_string(dir.join(file)).unwrap();
        assert_eq!(text.lines().next(), Some(header), "{file}");
    }
    let joint = fs::read_to_string(dir.join("eval/joint_comparison.csv")).unwrap();
    let rows: Vec<&str> = joint.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["pggm", "full-ggm", "nslasso"]);
    let summary = fs::read_to_string(dir.join("eval/summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("marginal-ggm,6,yy_frobenius,")));

    // Everything but the timing tables repeats exactly.
    let again = tempfile::tempdir().unwrap();
    run_ok_in(again.path(), &with_small(&["benchmark", "--out", "run", "--reps", "2"]));
    let keep = |h: Vec<(PathBuf, String)>| -> Vec<(PathBuf, String)> {
        h.into_iter()
            .filter(|(p, _)| !p.to_string_lossy().contains("timing") && !p.to_string_lossy().contains("cpu"))
            .collect()
    };
    assert_eq!(keep(hashes(&dir)), keep(hashes(&again.path().join("run"))));
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let full = RunConfig::load(Some(&root.join("default.toml")), &[]).unwrap();
    let mut want = RunConfig { out: "runs/default".into(), ..RunConfig::default() };
    want.fit.estimators = vec![Estimator::Pggm, Estimator::FullGgm, Estimator::MarginalGgm, Estimator::Nslasso];
    assert_eq!(full, want);
    let desk = RunConfig::load(Some(&root.join("desk.toml")), &[]).unwrap();
    assert_eq!((desk.reps, desk.simulate.qs.clone(), desk.fit.estimators.len()), (10, vec![50, 100], 4));
}
