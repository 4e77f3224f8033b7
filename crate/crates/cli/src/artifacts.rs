//! Per-repetition artifact files and the report computed from them.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use fairsaoml_core::metrics::{
    cumulative_violation, eighty_percent_check, fair_sar_estimate, static_regret, tail_mean_defined,
    ComparatorSolver, RegretReport, StaticRegret, Violation,
};
use fairsaoml_core::model::loss;
use fairsaoml_core::optim::{Ball, PreparedBatch};
use fairsaoml_core::stream::{load_native_csv, write_csv_path};
use fairsaoml_core::{Error, Result, RunOutput, TaskBatch};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const ROUNDS: &str = "rounds.csv";
pub const THETAS: &str = "thetas.csv";
pub const VALIDATION: &str = "validation.csv";
pub const METRICS: &str = "metrics.csv";
pub const REGRET: &str = "regret.json";
pub const ECHO: &str = "config-echo.json";
pub const MANIFEST: &str = "manifest.json";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Fixed column order: `t, val_loss, val_acc, dp, eo, g_1..g_m, n_experts,
/// n_active, max_weight, theta_norm, lambda_1..lambda_m, wall_ms`.
pub fn rounds_header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = ["t", "val_loss", "val_acc", "dp", "eo"].map(String::from).to_vec();
    h.extend((1..=m).map(|i| format!("g_{i}")));
    h.extend(["n_experts", "n_active", "max_weight", "theta_norm"].map(String::from));
    h.extend((1..=m).map(|i| format!("lambda_{i}")));
    h.push("wall_ms".into());
    h
}

pub fn write_rounds(path: &Path, out: &RunOutput, m: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(rounds_header(m)).map_err(|e| csv_err(path, e))?;
    for r in &out.records {
        let mut row = vec![r.t.to_string(), r.val_loss.to_string(), r.val_acc.to_string(), opt(r.dp), opt(r.eo.value)];
        row.extend(r.g.iter().map(f64::to_string));
        row.extend([r.n_experts.to_string(), r.n_active.to_string(), r.max_weight.to_string(), r.theta_norm.to_string()]);
        row.extend(r.lambda.iter().map(f64::to_string));
        row.push(format!("{:.3}", r.wall_ms));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// `θ_t` after each round, shortest round-trip formatting.
pub fn write_thetas(path: &Path, out: &RunOutput) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let d = out.pairs.first().map_or(0, |p| p.theta.len());
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|j| format!("theta_{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, p) in out.pairs.iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(p.theta.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes rounds, thetas, validation batches and the config echo.
pub fn write_run(dir: &Path, out: &RunOutput, cfg: &ExperimentConfig, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let m = cfg.run.fairness.len();
    write_rounds(&dir.join(ROUNDS), out, m)?;
    write_thetas(&dir.join(THETAS), out)?;
    let mut files = vec![dir.join(ROUNDS), dir.join(THETAS)];
    if !out.validation.is_empty() {
        write_csv_path(&dir.join(VALIDATION), &out.validation)?;
        files.push(dir.join(VALIDATION));
    }
    write_json(&dir.join(ECHO), &cfg.echo(seed))?;
    files.push(dir.join(ECHO));
    Ok(files)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    serde_json::to_writer_pretty(&mut f, value).map_err(|e| Error::Io(e.to_string()))?;
    f.write_all(b"\n")?;
    Ok(())
}

/// One parsed row of rounds.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRow {
    pub t: usize,
    pub val_loss: f64,
    pub val_acc: f64,
    pub dp: Option<f64>,
    pub eo: Option<f64>,
    pub g: Vec<f64>,
    pub n_experts: usize,
    pub n_active: usize,
    pub max_weight: f64,
    pub theta_norm: f64,
    pub lambda: Vec<f64>,
}

fn missing(path: &Path) -> Error {
    Error::Config(format!("missing artifact {}", path.display()))
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Ingestion { line, message: format!("{}: bad value '{raw}'", path.display()) })
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    if !path.is_file() {
        return Err(missing(path));
    }
    csv::Reader::from_path(path).map_err(|e| csv_err(path, e))
}

pub fn read_rounds(path: &Path, m: usize) -> Result<Vec<RoundRow>> {
    let mut rdr = open_csv(path)?;
    let header: Vec<String> = rdr.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if header != rounds_header(m) {
        return Err(Error::Config(format!("{}: unexpected header for {m} constraints", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let f = |j: usize| parse::<f64>(path, line, &rec[j]);
        let o = |j: usize| if rec[j].is_empty() { Ok(None) } else { f(j).map(Some) };
        rows.push(RoundRow {
            t: parse(path, line, &rec[0])?,
            val_loss: f(1)?,
            val_acc: f(2)?,
            dp: o(3)?,
            eo: o(4)?,
            g: (5..5 + m).map(f).collect::<Result<_>>()?,
            n_experts: parse(path, line, &rec[5 + m])?,
            n_active: parse(path, line, &rec[6 + m])?,
            max_weight: f(7 + m)?,
            theta_norm: f(8 + m)?,
            lambda: (9 + m..9 + 2 * m).map(f).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn read_thetas(path: &Path) -> Result<Vec<Array1<f64>>> {
    let mut rdr = open_csv(path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let v = rec.iter().skip(1).map(|c| parse::<f64>(path, i + 2, c)).collect::<Result<Vec<_>>>()?;
        out.push(Array1::from(v));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailSummary {
    pub fraction: f64,
    pub accuracy: Option<f64>,
    pub dp: Option<f64>,
    pub eo: Option<f64>,
}

/// Contents of regret.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretFile {
    pub horizon: usize,
    pub static_regret: StaticRegret,
    pub fair_sar: Vec<RegretReport>,
    /// Requested window lengths longer than the run.
    pub skipped_taus: Vec<usize>,
    pub cumulative_violation: Vec<Violation>,
    pub tail: TailSummary,
    /// `None` when DP or EO is undefined over the whole tail.
    pub eighty_percent_rule: Option<bool>,
}

impl RegretFile {
    /// Scalar summaries aggregated across repetitions.
    pub fn scalars(&self, rows: &[RoundRow]) -> Vec<(String, f64)> {
        let mut v = vec![
            ("tail_accuracy".to_string(), self.tail.accuracy.unwrap_or(f64::NAN)),
            ("tail_dp".to_string(), self.tail.dp.unwrap_or(f64::NAN)),
            ("tail_eo".to_string(), self.tail.eo.unwrap_or(f64::NAN)),
            ("static_regret".to_string(), self.static_regret.regret),
        ];
        for r in &self.fair_sar {
            v.push((format!("fair_sar_tau{}", r.tau), r.max_loss_regret));
        }
        for (i, c) in self.cumulative_violation.iter().enumerate() {
            v.push((format!("violation_per_round_{}", i + 1), c.raw / self.horizon as f64));
        }
        v.push(("final_n_experts".to_string(), rows.last().map_or(f64::NAN, |r| r.n_experts as f64)));
        v
    }
}

/// Recomputes metrics.csv and regret.json of one repetition from its files.
pub fn report_dir(dir: &Path, cfg: &ExperimentConfig) -> Result<(RegretFile, Vec<RoundRow>)> {
    let m = cfg.run.fairness.len();
    let rows = read_rounds(&dir.join(ROUNDS), m)?;
    let thetas = read_thetas(&dir.join(THETAS))?;
    let vpath = dir.join(VALIDATION);
    if !vpath.is_file() {
        return Err(missing(&vpath));
    }
    let validation = load_native_csv(&vpath)?;
    let horizon = rows.len();
    if horizon == 0 || thetas.len() != horizon || validation.len() != horizon {
        return Err(Error::Config(format!(
            "{}: {} rounds, {} thetas, {} validation batches",
            dir.display(),
            horizon,
            thetas.len(),
            validation.len()
        )));
    }

    let loss_spec = cfg.loss()?;
    let fairness = cfg.fairness()?;
    let radius = (1.0 + 2.0 * cfg.run.epsilon).sqrt() - 1.0;
    let solver = ComparatorSolver::new(Ball::new(radius)?, loss_spec);
    let refs: Vec<&TaskBatch> = validation.iter().collect();
    let mut losses = Vec::with_capacity(horizon);
    let mut g = Vec::with_capacity(horizon);
    for (theta, v) in thetas.iter().zip(&validation) {
        losses.push(loss(theta, v, &loss_spec)?);
        g.push(PreparedBatch::new(v.clone(), &fairness)?.g(theta)?.to_vec());
    }

    let stat = static_regret(&losses, &refs, &solver)?;
    let mut fair_sar = Vec::new();
    let mut skipped_taus = Vec::new();
    for &tau in &cfg.metrics.taus {
        if tau > horizon {
            skipped_taus.push(tau);
            continue;
        }
        fair_sar.push(fair_sar_estimate(&losses, &g, &refs, tau, cfg.metrics.stride, &solver)?);
    }
    let cumulative: Vec<Violation> =
        (0..m).map(|i| cumulative_violation(&g.iter().map(|r| r[i]).collect::<Vec<_>>())).collect();
    let dp: Vec<Option<f64>> = rows.iter().map(|r| r.dp).collect();
    let eo: Vec<Option<f64>> = rows.iter().map(|r| r.eo).collect();
    let acc: Vec<Option<f64>> = rows.iter().map(|r| Some(r.val_acc)).collect();
    let fraction = cfg.metrics.tail_fraction;
    let regret = RegretFile {
        horizon,
        static_regret: stat,
        fair_sar,
        skipped_taus,
        cumulative_violation: cumulative,
        tail: TailSummary {
            fraction,
            accuracy: tail_mean_defined(&acc, fraction)?,
            dp: tail_mean_defined(&dp, fraction)?,
            eo: tail_mean_defined(&eo, fraction)?,
        },
        eighty_percent_rule: eighty_percent_check(&dp, &eo, fraction)?,
    };

    let mpath = dir.join(METRICS);
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| csv_err(&mpath, e))?;
    let mut header: Vec<String> = ["t", "accuracy", "dp", "eo", "loss"].map(String::from).to_vec();
    header.extend((1..=m).map(|i| format!("g_{i}")));
    header.extend((1..=m).map(|i| format!("cum_violation_{i}")));
    w.write_record(&header).map_err(|e| csv_err(&mpath, e))?;
    let mut running = vec![0.0; m];
    for (k, r) in rows.iter().enumerate() {
        let mut row = vec![r.t.to_string(), r.val_acc.to_string(), opt(r.dp), opt(r.eo), losses[k].to_string()];
        row.extend(g[k].iter().map(f64::to_string));
        for i in 0..m {
            running[i] += g[k][i];
        }
        row.extend(running.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| csv_err(&mpath, e))?;
    }
    w.flush()?;
    write_json(&dir.join(REGRET), &regret)?;
    Ok((regret, rows))
}

/// Mean and sample standard deviation per metric across repetitions.
pub fn write_aggregate(path: &Path, per_rep: &[Vec<(String, f64)>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["metric", "mean", "std", "n"]).map_err(|e| csv_err(path, e))?;
    let Some(first) = per_rep.first() else {
        w.flush()?;
        return Ok(());
    };
    for (j, (name, _)) in first.iter().enumerate() {
        let vals: Vec<f64> = per_rep.iter().filter_map(|r| r.get(j).map(|x| x.1)).filter(|v| v.is_finite()).collect();
        let n = vals.len();
        let mean = if n == 0 { f64::NAN } else { vals.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        w.write_record([name.clone(), mean.to_string(), std.to_string(), n.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepEntry {
    pub seed: u64,
    pub dir: String,
    /// `ok` or `failed`.
    pub status: String,
    pub rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    /// Set when any repetition failed. A run that stopped early keeps the
    /// rounds completed before the failure.
    pub partial: bool,
    pub repetitions: Vec<RepEntry>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(missing(&path));
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}
