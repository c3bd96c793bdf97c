//! The four subcommands. Each is a function of the configuration and the
//! files under its input directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pggm::metrics::{links_above, theory_diagnostics, topk_link_precision, MeanSe};
use pggm::synthetic::{derive_seed, replicate, ReplicationSeeds, SyntheticSpec, TruthInfo};
use pggm::{CovarianceMode, CovarianceView, Dataset, PenaltySpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Estimator, RunConfig};
use crate::error::CliError;
use crate::layout::{self, csv_writer, flush, num, write_row, StoredFit, Timing};
use crate::pipeline::{run_estimator, score_against_truth, score_on_test, Estimate, RepInputs, TruthScores};

/// The estimators compared by `benchmark`.
pub const BENCHMARK_ESTIMATORS: [Estimator; 4] =
    [Estimator::Pggm, Estimator::FullGgm, Estimator::MarginalGgm, Estimator::Nslasso];

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Metadata sidecar of one simulated replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepMeta {
    pub q: usize,
    pub rep: usize,
    pub seeds: ReplicationSeeds,
    pub info: TruthInfo,
}

pub fn synthetic_spec(cfg: &RunConfig, q: usize) -> SyntheticSpec {
    let s = &cfg.simulate;
    let base = SyntheticSpec::new(s.n, s.p, q, cfg.seed);
    SyntheticSpec {
        edge_prob: s.edge_prob,
        target_condition: s.target_condition.unwrap_or(base.target_condition),
        unit_diagonal: s.unit_diagonal,
        ..base
    }
}

/// Seeds of replication `rep` at feature count `q`, all derived from the
/// configured base seed.
pub fn rep_seeds(cfg: &RunConfig, q: usize, rep: usize) -> ReplicationSeeds {
    ReplicationSeeds::derive(derive_seed(cfg.seed, q as u64), rep as u64)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    layout::create_dir(&cfg.out)?;
    layout::write_json(&cfg.out.join("simulate.json"), cfg)?;
    let jobs: Vec<(usize, usize)> = cfg.simulate.qs.iter().flat_map(|&q| (0..cfg.reps).map(move |k| (q, k))).collect();
    let results: Vec<Result<(), CliError>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|&(q, k)| {
                let spec = synthetic_spec(cfg, q);
                let seeds = rep_seeds(cfg, q, k);
                let r = replicate(&spec, seeds).map_err(|e| CliError::Generation(format!("q = {q}, rep {k}: {e}")))?;
                let dir = layout::rep_dir(&cfg.out, q, k);
                let inputs =
                    RepInputs { train: r.train, validation: r.validation, test: Some(r.test), truth: Some(r.truth) };
                layout::write_inputs(&dir, &inputs)?;
                layout::write_json(&dir.join(layout::META), &RepMeta { q, rep: k, seeds, info: r.info })
            })
            .collect()
    });
    results.into_iter().collect()
}

/// Splits a CSV data source by rows into train/validation/test under
/// `OUT/data`.
fn prepare_data(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let d = cfg.data.as_ref().expect("caller checked");
    let all = Dataset::read_csv(&d.csv, d.p).map_err(|e| CliError::input(&d.csv, e))?;
    let all = if d.center { all.centered() } else { all };
    let n = all.n();
    let a = (n as f64 * d.train_fraction).round() as usize;
    let b = a + (n as f64 * d.validation_fraction).round() as usize;
    if a < 2 || b <= a || b >= n {
        return Err(CliError::Config(format!("{n} rows are too few for the requested split")));
    }
    let err = |e: pggm::Error| CliError::Config(e.to_string());
    let inputs = RepInputs {
        train: all.rows(0, a).map_err(err)?,
        validation: all.rows(a, b).map_err(err)?,
        test: Some(all.rows(b, n).map_err(err)?),
        truth: None,
    };
    let dir = cfg.out.join("data");
    layout::write_inputs(&dir, &inputs)?;
    Ok(dir)
}

/// Fits every configured estimator on every replication below `input`.
/// With `keep_going`, failures are returned as `(rep dir, estimator,
/// message)` instead of aborting.
pub fn fit_all(
    cfg: &RunConfig,
    input: &Path,
    estimators: &[Estimator],
    keep_going: bool,
) -> Result<Vec<(PathBuf, Estimator, String)>, CliError> {
    let reps = layout::find_rep_dirs(input)?;
    let jobs: Vec<(PathBuf, Estimator)> =
        reps.iter().flat_map(|r| estimators.iter().map(move |&e| (r.clone(), e))).collect();
    let results: Vec<Result<(), CliError>> = pool(cfg.workers)?.install(|| {
        jobs.par_iter()
            .map(|(rep, est)| {
                let inputs = layout::load_inputs(rep)?;
                let out = run_estimator(*est, &inputs, &cfg.fit)?;
                layout::write_fit(rep, &out)
            })
            .collect()
    });
    let mut failures = Vec::new();
    for ((rep, est), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(()) => {}
            Err(e @ (CliError::Solver(_) | CliError::Generation(_))) if keep_going => {
                failures.push((rep, est, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    Ok(failures)
}

pub fn cmd_fit(cfg: &RunConfig, input: Option<&Path>) -> Result<(), CliError> {
    layout::create_dir(&cfg.out)?;
    let root = if cfg.data.is_some() { prepare_data(cfg)? } else { input.unwrap_or(&cfg.out).to_path_buf() };
    fit_all(cfg, &root, &cfg.fit.estimators, false).map(|_| ())
}

/// Everything `evaluate` derives from one stored fit.
struct Evaluated {
    estimator: Estimator,
    q: usize,
    rep: usize,
    fit: StoredFit,
    truth: Option<TruthScores>,
    test_lpa: Option<f64>,
    diagnostics: Option<pggm::metrics::DiagnosticsRow>,
}

fn evaluate_one(cfg: &RunConfig, rep_dir: &Path, est: Estimator) -> Result<Evaluated, CliError> {
    let inputs = layout::load_inputs(rep_dir)?;
    let fit = layout::read_fit(rep_dir, est)?;
    let truth = inputs.truth.as_ref().map(|t| score_against_truth(&fit.estimate, t)).transpose()?;
    let test_lpa = match &inputs.test {
        Some(t) => score_on_test(&fit.estimate, t)?,
        None => None,
    };
    let diagnostics = match (&inputs.truth, est, fit.record.lambda, fit.record.rho) {
        (Some(t), Estimator::Pggm, Some(l), Some(r)) if cfg.evaluate.diagnostics => {
            let pen = PenaltySpec::new(cfg.fit.penalty.family(), l, r).map_err(|e| CliError::Solver(e.to_string()))?;
            let cv = CovarianceView::from_dataset(&inputs.train, CovarianceMode::Auto);
            Some(theory_diagnostics(t, &cv, &pen).map_err(|e| CliError::Solver(e.to_string()))?.row())
        }
        _ => None,
    };
    Ok(Evaluated {
        estimator: est,
        q: inputs.train.q(),
        rep: layout::rep_index(rep_dir),
        fit,
        truth,
        test_lpa,
        diagnostics,
    })
}

fn read_categories(path: &Path, p: usize) -> Result<Vec<usize>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| CliError::input(path, e))?;
    let mut ids: BTreeMap<String, usize> = BTreeMap::new();
    let mut labels = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(path, e))?;
        let cat = match rec.len() {
            1 => rec[0].to_string(),
            _ => rec[1].to_string(),
        };
        if k == 0 && rec.len() > 1 && rec[0].parse::<usize>().is_err() && rec[0].eq_ignore_ascii_case("variable") {
            continue;
        }
        let next = ids.len();
        labels.push(*ids.entry(cat).or_insert(next));
    }
    if labels.len() != p {
        return Err(CliError::MissingInput(format!(
            "{} lists {} categories for {p} response variables",
            path.display(),
            labels.len()
        )));
    }
    Ok(labels)
}

/// Means and standard errors per `(estimator, q, metric)`. Estimators follow
/// `order`, metrics their first appearance.
fn summarize<'a>(
    rows: impl Iterator<Item = (Estimator, usize, &'a str, f64)>,
    order: &[Estimator],
) -> Vec<(Estimator, usize, String, MeanSe)> {
    let rank = |e: Estimator| order.iter().position(|&o| o == e).unwrap_or(order.len());
    let mut metrics: Vec<&str> = Vec::new();
    let mut groups: BTreeMap<(usize, usize, usize), (Estimator, Vec<f64>)> = BTreeMap::new();
    for (est, q, metric, v) in rows {
        let m = metrics.iter().position(|&x| x == metric).unwrap_or_else(|| {
            metrics.push(metric);
            metrics.len() - 1
        });
        groups.entry((rank(est), q, m)).or_insert_with(|| (est, Vec::new())).1.push(v);
    }
    groups.into_iter().map(|((_, q, m), (est, v))| (est, q, metrics[m].to_string(), MeanSe::of(&v))).collect()
}

const DIAGNOSTIC_COLUMNS: [&str; 15] = [
    "estimator",
    "q",
    "rep",
    "gamma_n",
    "a_inf",
    "b_inf",
    "support_size",
    "alpha",
    "c0",
    "delta_n",
    "rho_minus",
    "rho_plus",
    "beta0",
    "r0",
    "gamma0",
];

const METRICS: [&str; 8] =
    ["operator", "l1", "frobenius", "fscore", "yy_operator", "yy_l1", "yy_frobenius", "yy_fscore"];

fn metric_values(t: &TruthScores) -> [Option<f64>; 8] {
    let l = t.losses.as_ref();
    [
        l.map(|l| l.total.spectral),
        l.map(|l| l.total.mat_l1),
        l.map(|l| l.total.frob),
        Some(t.support.fscore),
        l.map(|l| l.yy.spectral),
        l.map(|l| l.yy.mat_l1),
        l.map(|l| l.yy.frob),
        Some(t.support_yy.fscore),
    ]
}

/// Evaluates the stored fits of `estimators` below `input` and writes the
/// evaluation tables under `OUT/eval`. Without `skip_missing`, a missing fit
/// is an error.
pub fn evaluate_all(
    cfg: &RunConfig,
    input: &Path,
    estimators: &[Estimator],
    skip_missing: bool,
) -> Result<(), CliError> {
    let reps = layout::find_rep_dirs(input)?;
    let jobs: Vec<(PathBuf, Estimator)> = reps
        .iter()
        .flat_map(|r| estimators.iter().map(move |&e| (r.clone(), e)))
        .filter(|(r, e)| !skip_missing || layout::fit_dir(r, *e).join("fit.json").is_file())
        .collect();
    let results: Vec<Result<Evaluated, CliError>> =
        pool(cfg.workers)?.install(|| jobs.par_iter().map(|(r, e)| evaluate_one(cfg, r, *e)).collect());
    let evals: Vec<Evaluated> = results.into_iter().collect::<Result<_, _>>()?;

    let dir = layout::eval_dir(&cfg.out);
    layout::create_dir(&dir)?;

    // Per-replication metrics against the truth.
    let p = dir.join("metrics.csv");
    let mut w = csv_writer(&p)?;
    let mut header = vec!["estimator", "q", "rep"];
    header.extend(METRICS);
    header.extend(["precision", "recall"]);
    write_row(&mut w, &p, &header)?;
    let mut summary_rows = Vec::new();
    for e in &evals {
        if let Some(t) = &e.truth {
            let vals = metric_values(t);
            let mut row = vec![e.estimator.name().to_string(), e.q.to_string(), e.rep.to_string()];
            row.extend(vals.iter().map(|v| num(*v)));
            row.extend([t.support.precision.to_string(), t.support.recall.to_string()]);
            write_row(&mut w, &p, &row)?;
            for (m, v) in METRICS.iter().zip(vals) {
                if let Some(v) = v {
                    summary_rows.push((e.estimator, e.q, *m, v));
                }
            }
        }
    }
    flush(w, &p)?;

    let p = dir.join("summary.csv");
    let mut w = csv_writer(&p)?;
    write_row(&mut w, &p, ["estimator", "q", "metric", "mean", "se", "count"])?;
    for (est, q, m, s) in summarize(summary_rows.into_iter(), estimators) {
        write_row(
            &mut w,
            &p,
            [est.name().to_string(), q.to_string(), m, s.mean.to_string(), s.se.to_string(), s.count.to_string()],
        )?;
    }
    flush(w, &p)?;

    // Timings live in their own files.
    let p = dir.join("timing.csv");
    let mut w = csv_writer(&p)?;
    write_row(&mut w, &p, ["estimator", "q", "rep", "select_seconds", "fit_seconds"])?;
    let mut timing_rows = Vec::new();
    for e in &evals {
        if let Some(Timing { select_seconds, fit_seconds }) = e.fit.timing {
            write_row(
                &mut w,
                &p,
                [
                    e.estimator.name().to_string(),
                    e.q.to_string(),
                    e.rep.to_string(),
                    select_seconds.to_string(),
                    fit_seconds.to_string(),
                ],
            )?;
            timing_rows.push((e.estimator, e.q, "select_seconds", select_seconds));
            timing_rows.push((e.estimator, e.q, "fit_seconds", fit_seconds));
        }
    }
    flush(w, &p)?;
    let p = dir.join("summary_timing.csv");
    let mut w = csv_writer(&p)?;
    write_row(&mut w, &p, ["estimator", "q", "metric", "mean", "se", "count"])?;
    for (est, q, m, s) in summarize(timing_rows.into_iter(), estimators) {
        write_row(
            &mut w,
            &p,
            [est.name().to_string(), q.to_string(), m, s.mean.to_string(), s.se.to_string(), s.count.to_string()],
        )?;
    }
    flush(w, &p)?;

    if evals.iter().any(|e| e.test_lpa.is_some()) {
        let p = dir.join("test_objective.csv");
        let mut w = csv_writer(&p)?;
        write_row(&mut w, &p, ["estimator", "q", "rep", "test_lpa"])?;
        for e in &evals {
            if let Some(v) = e.test_lpa {
                write_row(
                    &mut w,
                    &p,
                    [e.estimator.name().to_string(), e.q.to_string(), e.rep.to_string(), v.to_string()],
                )?;
            }
        }
        flush(w, &p)?;
    }

    if cfg.evaluate.diagnostics {
        let p = dir.join("diagnostics.csv");
        let mut w = csv_writer(&p)?;
        write_row(&mut w, &p, DIAGNOSTIC_COLUMNS)?;
        for e in &evals {
            if let Some(d) = &e.diagnostics {
                let mut row = vec![e.estimator.name().to_string(), e.q.to_string(), e.rep.to_string()];
                row.extend(
                    [d.gamma_n, d.a_inf, d.b_inf, d.support_size as f64, d.alpha, d.c0]
                        .into_iter()
                        .chain([d.delta_n, d.rho_minus, d.rho_plus, d.beta0, d.r0, d.gamma0])
                        .map(|v| v.to_string()),
                );
                write_row(&mut w, &p, &row)?;
            }
        }
        flush(w, &p)?;
    }

    if let Some(mu) = cfg.evaluate.mu {
        write_links(cfg, &dir, &evals, mu)?;
    }
    Ok(())
}

fn write_links(cfg: &RunConfig, dir: &Path, evals: &[Evaluated], mu: f64) -> Result<(), CliError> {
    let links_dir = dir.join("links");
    layout::create_dir(&links_dir)?;
    let counts = dir.join("link_counts.csv");
    let mut cw = csv_writer(&counts)?;
    write_row(&mut cw, &counts, ["estimator", "q", "rep", "mu", "count"])?;
    let topk_path = dir.join("topk.csv");
    let mut tw = match cfg.evaluate.topk {
        Some(_) => {
            let mut w = csv_writer(&topk_path)?;
            write_row(&mut w, &topk_path, ["estimator", "q", "rep", "k", "precision"])?;
            Some(w)
        }
        None => None,
    };
    for e in evals {
        let Estimate::Blocks(theta) = &e.fit.estimate else { continue };
        let links = links_above(theta.omega_yy(), mu).map_err(|x| CliError::Config(x.to_string()))?;
        let name = format!("{}_q{}_rep{:03}.csv", e.estimator.name(), e.q, e.rep);
        let p = links_dir.join(name);
        let mut w = csv_writer(&p)?;
        write_row(&mut w, &p, ["i", "j", "weight"])?;
        for l in &links {
            write_row(&mut w, &p, [l.i.to_string(), l.j.to_string(), l.weight.to_string()])?;
        }
        flush(w, &p)?;
        write_row(
            &mut cw,
            &counts,
            [
                e.estimator.name().to_string(),
                e.q.to_string(),
                e.rep.to_string(),
                mu.to_string(),
                links.len().to_string(),
            ],
        )?;
        if let (Some(w), Some(k), Some(cats)) = (tw.as_mut(), cfg.evaluate.topk, cfg.evaluate.categories.as_ref()) {
            let labels = read_categories(cats, theta.p())?;
            let prec = topk_link_precision(&links, &labels, k).map_err(|x| CliError::Config(x.to_string()))?;
            write_row(
                w,
                &topk_path,
                [e.estimator.name().to_string(), e.q.to_string(), e.rep.to_string(), k.to_string(), prec.to_string()],
            )?;
        }
    }
    flush(cw, &counts)?;
    if let Some(w) = tw {
        flush(w, &topk_path)?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, input: Option<&Path>) -> Result<(), CliError> {
    let root = input.unwrap_or(&cfg.out);
    evaluate_all(cfg, root, &cfg.fit.estimators, false)
}

/// Simulates, fits the four compared estimators, evaluates, and writes the
/// comparison tables. Failed fits are listed in `failures.csv`.
pub fn cmd_benchmark(cfg: &RunConfig) -> Result<(), CliError> {
    cmd_simulate(cfg)?;
    let failures = fit_all(cfg, &cfg.out, &BENCHMARK_ESTIMATORS, true)?;
    let p = cfg.out.join("failures.csv");
    let mut w = csv_writer(&p)?;
    write_row(&mut w, &p, ["run", "estimator", "error"])?;
    for (rep, est, msg) in &failures {
        let rel = rep.strip_prefix(&cfg.out).unwrap_or(rep).display().to_string();
        write_row(&mut w, &p, [rel, est.name().to_string(), msg.clone()])?;
    }
    flush(w, &p)?;
    evaluate_all(cfg, &cfg.out, &BENCHMARK_ESTIMATORS, true)?;
    write_comparisons(&cfg.out)
}

/// Reshapes `eval/summary*.csv` into one plotting table per comparison:
/// both blocks for pggm, full-ggm and nslasso; `Ωyy` alone for pggm and
/// marginal-ggm.
fn write_comparisons(out: &Path) -> Result<(), CliError> {
    let dir = layout::eval_dir(out);
    let read = |name: &str| -> Result<Vec<csv::StringRecord>, CliError> {
        let p = dir.join(name);
        let mut r = csv::Reader::from_path(&p).map_err(|e| CliError::input(&p, e))?;
        r.records().collect::<Result<Vec<_>, _>>().map_err(|e| CliError::input(&p, e))
    };
    let summary = read("summary.csv")?;
    let timing = read("summary_timing.csv")?;
    let lookup = |rows: &[csv::StringRecord], est: &str, q: &str, metric: &str| {
        rows.iter()
            .find(|r| &r[0] == est && &r[1] == q && &r[2] == metric)
            .map(|r| (r[3].to_string(), r[4].to_string()))
    };
    let mut qs: Vec<usize> = summary.iter().chain(&timing).filter_map(|r| r[1].parse().ok()).collect();
    qs.sort_unstable();
    qs.dedup();
    let panels: [(&str, &[Estimator], [&str; 2]); 2] = [
        ("joint_comparison", &[Estimator::Pggm, Estimator::FullGgm, Estimator::Nslasso], ["frobenius", "fscore"]),
        ("yy_comparison", &[Estimator::Pggm, Estimator::MarginalGgm], ["yy_frobenius", "yy_fscore"]),
    ];
    for (name, ests, metrics) in panels {
        let p = dir.join(format!("{name}.csv"));
        let mut w = csv_writer(&p)?;
        let mut header = vec!["estimator".to_string(), "q".to_string()];
        for m in metrics {
            header.push(format!("{m}_mean"));
            header.push(format!("{m}_se"));
        }
        write_row(&mut w, &p, &header)?;
        let tp = dir.join(format!("{name}_cpu.csv"));
        let mut tw = csv_writer(&tp)?;
        write_row(&mut tw, &tp, ["estimator", "q", "cpu_mean", "cpu_se"])?;
        for est in ests {
            for q in &qs {
                let qs = q.to_string();
                let mut row = vec![est.name().to_string(), qs.clone()];
                for m in metrics {
                    let (mean, se) = lookup(&summary, est.name(), &qs, m).unwrap_or_default();
                    row.push(mean);
                    row.push(se);
                }
                write_row(&mut w, &p, &row)?;
                let (mean, se) = lookup(&timing, est.name(), &qs, "fit_seconds").unwrap_or_default();
                write_row(&mut tw, &tp, [est.name().to_string(), qs, mean, se])?;
            }
        }
        flush(w, &p)?;
        flush(tw, &tp)?;
    }
    Ok(())
}
