//! On-disk layout of a run directory.
//!
//! ```text
//! OUT/q{q}/rep{k}/              truth.bin train.bin validation.bin test.bin meta.json
//! OUT/q{q}/rep{k}/fits/{est}/   theta.bin | support.csv, fit.json, grid.csv | path.csv, timing.json
//! OUT/eval/                     metrics.csv summary.csv timing.csv ...
//! ```
//!
//! Every file is a deterministic function of the configuration except the
//! wall-clock tables: `timing.json`, `grid_timing.csv`, and the `eval/` files
//! with `timing` or `cpu` in their names.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use pggm::select::{write_score_table, CellSummary};
use pggm::synthetic::GroundTruth;
use pggm::{BlockPrecision, Dataset};
use serde::{Deserialize, Serialize};

use crate::config::Estimator;
use crate::error::CliError;
use crate::pipeline::{Estimate, FitOutcome, FitRecord, RepInputs};

pub const TRUTH: &str = "truth.bin";
pub const TRAIN: &str = "train.bin";
pub const VALIDATION: &str = "validation.bin";
pub const TEST: &str = "test.bin";
pub const META: &str = "meta.json";

pub fn rep_dir(out: &Path, q: usize, rep: usize) -> PathBuf {
    out.join(format!("q{q}")).join(format!("rep{rep:03}"))
}

pub fn fit_dir(rep: &Path, est: Estimator) -> PathBuf {
    rep.join("fits").join(est.name())
}

pub fn eval_dir(out: &Path) -> PathBuf {
    out.join("eval")
}

pub fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::output(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::output(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(path, e))
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::output(path, e))
}

/// Writes one CSV row, mapping failures to an output error for `path`.
pub fn write_row<I, S>(w: &mut csv::Writer<fs::File>, path: &Path, row: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| CliError::output(path, e))
}

pub fn flush(mut w: csv::Writer<fs::File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::output(path, e))
}

/// Formats an optional number; missing values are empty fields.
pub fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Directories below `root` (at most three levels deep, `root` included)
/// holding a training sample, sorted by path.
pub fn find_rep_dirs(root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !root.is_dir() {
        return Err(CliError::MissingInput(format!("{} is not a directory", root.display())));
    }
    let mut found = Vec::new();
    walk(root, 0, &mut found).map_err(|e| CliError::input(root, e))?;
    found.sort();
    if found.is_empty() {
        return Err(CliError::MissingInput(format!("no {TRAIN} below {}", root.display())));
    }
    Ok(found)
}

fn walk(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if dir.join(TRAIN).is_file() {
        found.push(dir.to_path_buf());
        return Ok(());
    }
    if depth == 3 {
        return Ok(());
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() && path.file_name().is_some_and(|n| n != "fits" && n != "eval") {
            walk(&path, depth + 1, found)?;
        }
    }
    Ok(())
}

/// Replication index parsed from a `repNNN` directory name; 0 otherwise.
pub fn rep_index(rep: &Path) -> usize {
    rep.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_prefix("rep"))
        .and_then(|n| n.parse().ok())
        .unwrap_or(0)
}

fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read_binary(path).map_err(|e| CliError::input(path, e))
}

pub fn load_inputs(rep: &Path) -> Result<RepInputs, CliError> {
    let optional = |name: &str| rep.join(name).is_file().then(|| rep.join(name));
    let truth = match optional(TRUTH) {
        Some(p) => Some(GroundTruth::read_binary(&p).map_err(|e| CliError::input(&p, e))?),
        None => None,
    };
    let test = optional(TEST).map(|p| read_dataset(&p)).transpose()?;
    Ok(RepInputs {
        train: read_dataset(&rep.join(TRAIN))?,
        validation: read_dataset(&rep.join(VALIDATION))?,
        test,
        truth,
    })
}

pub fn write_inputs(rep: &Path, inputs: &RepInputs) -> Result<(), CliError> {
    create_dir(rep)?;
    let put = |name: &str, d: &Dataset| {
        let p = rep.join(name);
        d.write_binary(&p).map_err(|e| CliError::output(&p, e))
    };
    put(TRAIN, &inputs.train)?;
    put(VALIDATION, &inputs.validation)?;
    if let Some(t) = &inputs.test {
        put(TEST, t)?;
    }
    if let Some(t) = &inputs.truth {
        let p = rep.join(TRUTH);
        t.write_binary(&p).map_err(|e| CliError::output(&p, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub select_seconds: f64,
    pub fit_seconds: f64,
}

/// Writes the selected fit of one estimator under `rep`.
pub fn write_fit(rep: &Path, out: &FitOutcome) -> Result<(), CliError> {
    let dir = fit_dir(rep, out.record.estimator);
    create_dir(&dir)?;
    match &out.estimate {
        Estimate::Blocks(theta) => {
            let p = dir.join("theta.bin");
            theta.write_binary(&p).map_err(|e| CliError::output(&p, e))?;
        }
        Estimate::Support { yy, yx } => write_support(&dir.join("support.csv"), yy, yx)?,
    }
    write_json(&dir.join("fit.json"), &out.record)?;
    if let Some(cells) = &out.grid {
        write_grid(&dir, cells)?;
    }
    if let Some(path) = &out.path {
        let p = dir.join("path.csv");
        let mut w = csv_writer(&p)?;
        write_row(&mut w, &p, ["value", "score"])?;
        for row in path {
            write_row(&mut w, &p, [row.value.to_string(), num(row.score)])?;
        }
        flush(w, &p)?;
    }
    write_json(&dir.join("timing.json"), &Timing { select_seconds: out.select_seconds, fit_seconds: out.fit_seconds })
}

fn write_grid(dir: &Path, cells: &[CellSummary]) -> Result<(), CliError> {
    let p = dir.join("grid.csv");
    let f = fs::File::create(&p).map_err(|e| CliError::output(&p, e))?;
    write_score_table(f, cells, false).map_err(|e| CliError::output(&p, e))?;
    let p = dir.join("grid_timing.csv");
    let mut w = csv_writer(&p)?;
    write_row(&mut w, &p, ["lambda", "rho", "time"])?;
    for c in cells {
        write_row(&mut w, &p, [c.lambda.to_string(), c.rho.to_string(), c.time.to_string()])?;
    }
    flush(w, &p)
}

/// Edge list with header `block,i,j`; `yy` edges are listed once with `i < j`.
/// The first line is a comment recording the block shapes.
fn write_support(path: &Path, yy: &Array2<bool>, yx: &Array2<bool>) -> Result<(), CliError> {
    let mut text = format!("# p={} q={}\nblock,i,j\n", yy.nrows(), yx.ncols());
    for ((i, j), &b) in yy.indexed_iter() {
        if b && i < j {
            text.push_str(&format!("yy,{i},{j}\n"));
        }
    }
    for ((i, j), &b) in yx.indexed_iter() {
        if b {
            text.push_str(&format!("yx,{i},{j}\n"));
        }
    }
    fs::write(path, text).map_err(|e| CliError::output(path, e))
}

fn read_support(path: &Path) -> Result<Estimate, CliError> {
    let bad = |m: &str| CliError::MissingInput(format!("{}: {m}", path.display()));
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    let mut lines = text.lines();
    let dims = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("missing shape line"))?;
    let mut pq = dims.split(' ').map(|kv| kv.split_once('=').and_then(|(_, v)| v.parse::<usize>().ok()));
    let (p, q) = match (pq.next().flatten(), pq.next().flatten()) {
        (Some(p), Some(q)) => (p, q),
        _ => return Err(bad("malformed shape line")),
    };
    let mut yy = Array2::from_elem((p, p), false);
    let mut yx = Array2::from_elem((p, q), false);
    for line in lines.skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("bad index"));
        match f.as_slice() {
            ["yy", i, j] => {
                let (i, j) = (idx(i)?, idx(j)?);
                if i >= p || j >= p {
                    return Err(bad("index out of range"));
                }
                yy[[i, j]] = true;
                yy[[j, i]] = true;
            }
            ["yx", i, j] => {
                let (i, j) = (idx(i)?, idx(j)?);
                if i >= p || j >= q {
                    return Err(bad("index out of range"));
                }
                yx[[i, j]] = true;
            }
            _ => return Err(bad("malformed row")),
        }
    }
    Ok(Estimate::Support { yy, yx })
}

/// What `evaluate` needs from a stored fit.
pub struct StoredFit {
    pub record: FitRecord,
    pub estimate: Estimate,
    pub timing: Option<Timing>,
}

pub fn read_fit(rep: &Path, est: Estimator) -> Result<StoredFit, CliError> {
    let dir = fit_dir(rep, est);
    let record: FitRecord = read_json(&dir.join("fit.json"))?;
    let theta = dir.join("theta.bin");
    let estimate = if theta.is_file() {
        Estimate::Blocks(BlockPrecision::read_binary(&theta).map_err(|e| CliError::input(&theta, e))?)
    } else {
        read_support(&dir.join("support.csv"))?
    };
    let timing_path = dir.join("timing.json");
    let timing = if timing_path.is_file() { Some(read_json(&timing_path)?) } else { None };
    Ok(StoredFit { record, estimate, timing })
}
