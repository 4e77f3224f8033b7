use std::path::{Path, PathBuf};

use fairsaoml_core::stream::write_csv_path;
use fairsaoml_core::{run, Error, Result, SchemeKind};
use rayon::prelude::*;

use crate::artifacts::{
    relative, report_dir, write_aggregate, write_json, write_run, Manifest, RepEntry, MANIFEST, METRICS, REGRET,
};
use crate::config::ExperimentConfig;

pub struct Overrides {
    pub scheme: Option<SchemeKind>,
    pub base: Option<usize>,
    pub seed: Option<u64>,
    pub reps: Option<usize>,
    pub ablation: Option<crate::config::Ablation>,
    pub mode: Option<fairsaoml_core::Mode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.scheme {
            cfg.run.scheme = s;
        }
        if let Some(b) = self.base {
            cfg.run.base = b;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.reps {
            cfg.reps = r;
        }
        if let Some(a) = self.ablation {
            cfg.run.ablation = a;
        }
        if let Some(m) = self.mode {
            cfg.run.mode = m;
        }
        cfg.validate()
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if cfg.stream.is_none() {
        return Err(Error::Config("gen-data needs a [stream] section".into()));
    }
    let stream = cfg.load_stream()?;
    std::fs::create_dir_all(out)?;
    let path = out.join("stream.csv");
    write_csv_path(&path, &stream)?;
    let rows: usize = stream.iter().map(|b| b.len()).sum();
    println!("wrote {} batches ({rows} rows) to {}", stream.len(), path.display());
    Ok(())
}

/// Outcome of one `run`: the manifest plus per-repetition scalar summaries.
pub struct RunSummary {
    pub manifest: Manifest,
    pub scalars: Vec<Vec<(String, f64)>>,
}

struct RepResult {
    entry: RepEntry,
    scalars: Option<Vec<(String, f64)>>,
    error: Option<Error>,
}

fn run_rep(cfg: &ExperimentConfig, stream: &[fairsaoml_core::TaskBatch], horizon: usize, root: &Path, seed: u64) -> Result<RepResult> {
    let rc = cfg.run_config(horizon, seed)?;
    let name = format!("rep-{seed:03}");
    let dir = root.join(&name);
    let (output, mut error) = match run(&rc, &stream[..horizon]) {
        Ok(out) => (out, None),
        Err(f) => (*f.partial, Some(f.error)),
    };
    let files = write_run(&dir, &output, cfg, seed)?;
    let mut files: Vec<String> = files.iter().map(|p| relative(root, p)).collect();
    let mut scalars = None;
    if error.is_none() {
        match report_dir(&dir, cfg) {
            Ok((regret, rows)) => {
                files.push(relative(root, &dir.join(METRICS)));
                files.push(relative(root, &dir.join(REGRET)));
                println!(
                    "{name}: {} rounds, tail accuracy {}, DP {}, EO {}",
                    rows.len(),
                    fmt(regret.tail.accuracy),
                    fmt(regret.tail.dp),
                    fmt(regret.tail.eo)
                );
                scalars = Some(regret.scalars(&rows));
            }
            Err(e) => error = Some(e),
        }
    }
    Ok(RepResult {
        entry: RepEntry {
            seed,
            dir: name,
            status: if error.is_none() { "ok" } else { "failed" }.into(),
            rounds: output.records.len(),
            error: error.as_ref().map(ToString::to_string),
            files,
        },
        scalars,
        error,
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:.4}"))
}

/// Runs every repetition into `out` and writes the manifest and aggregate.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<RunSummary> {
    let stream = cfg.load_stream()?;
    let horizon = cfg.horizon(stream.len())?;
    std::fs::create_dir_all(out)?;
    let results: Vec<RepResult> =
        cfg.seeds().par_iter().map(|&seed| run_rep(cfg, &stream, horizon, out, seed)).collect::<Result<_>>()?;

    let scalars: Vec<Vec<(String, f64)>> = results.iter().filter_map(|r| r.scalars.clone()).collect();
    write_aggregate(&out.join(METRICS), &scalars)?;
    let manifest = Manifest {
        tool: "fairsaoml".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        seeds: cfg.seeds(),
        partial: results.iter().any(|r| r.error.is_some()),
        repetitions: results.iter().map(|r| r.entry.clone()).collect(),
        files: vec![METRICS.into()],
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    if let Some(err) = results.into_iter().find_map(|r| r.error) {
        return Err(err);
    }
    Ok(RunSummary { manifest, scalars })
}

fn mean_of(scalars: &[Vec<(String, f64)>], name: &str) -> f64 {
    let vals: Vec<f64> =
        scalars.iter().flat_map(|r| r.iter().filter(|(n, _)| n == name).map(|x| x.1)).filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        f64::NAN
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

pub fn sweep_base(cfg: &ExperimentConfig, bases: &[usize], out: &Path) -> Result<()> {
    if bases.is_empty() || bases.iter().any(|&b| b < 2) {
        return Err(Error::Config("bases must be integers >= 2".into()));
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
    let header = ["base", "final_n_experts", "tail_accuracy", "tail_dp", "tail_eo", "static_regret"];
    w.write_record(header).map_err(|e| Error::Io(e.to_string()))?;
    println!("{:>4} {:>15} {:>13} {:>8} {:>8} {:>13}", header[0], header[1], header[2], header[3], header[4], header[5]);
    for &base in bases {
        let mut c = cfg.clone();
        c.run.base = base;
        c.validate()?;
        let summary = run_experiment(&c, &out.join(format!("base-{base}")), "sweep-base")?;
        let vals: Vec<f64> =
            header[1..].iter().map(|name| mean_of(&summary.scalars, name)).collect();
        let mut row = vec![base.to_string()];
        row.extend(vals.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
        println!("{base:>4} {:>15} {:>13.4} {:>8.4} {:>8.4} {:>13.4}", vals[0], vals[1], vals[2], vals[3], vals[4]);
    }
    w.flush()?;
    Ok(())
}

/// Recomputes metrics from the artifacts under `out`, using each
/// repetition's echoed run settings and the metric options of `cfg`.
pub fn report(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let manifest = Manifest::load(out)?;
    let mut scalars = Vec::new();
    for rep in manifest.repetitions.iter().filter(|r| r.status == "ok") {
        let dir = out.join(&rep.dir);
        let echo_path = dir.join(crate::artifacts::ECHO);
        if !echo_path.is_file() {
            return Err(Error::Config(format!("missing artifact {}", echo_path.display())));
        }
        let mut rep_cfg = ExperimentConfig::load(&echo_path)?;
        rep_cfg.metrics = cfg.metrics.clone();
        let (regret, rows) = report_dir(&dir, &rep_cfg)?;
        println!(
            "{}: static regret {:.4}, tail DP {}, EO {}, 80% rule {}",
            rep.dir,
            regret.static_regret.regret,
            fmt(regret.tail.dp),
            fmt(regret.tail.eo),
            regret.eighty_percent_rule.map_or("undefined".into(), |b| b.to_string())
        );
        for r in &regret.fair_sar {
            println!("  FairSAR tau={}: {:.4}", r.tau, r.max_loss_regret);
        }
        scalars.push(regret.scalars(&rows));
    }
    write_aggregate(&out.join(METRICS), &scalars)
}

pub fn default_out(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("fairsaoml-out"))
}
