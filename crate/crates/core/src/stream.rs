//! Synthetic changing-environment streams and the CSV dialect used to store
//! and ingest them.
//!
//! Within an environment the latent score of a sample is `bᵀz` with
//! `z ~ N(0, I)`. Members of group `s = +1` have their features shifted by
//! `group_bias · b / ‖b‖²`, so the observed features carry the group offset
//! and `bᵀe = bᵀz + group_bias · 1[s = +1]`. Labels are `sign(bᵀe)`, flipped
//! with probability `noise`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TaskBatch;

const MAX_BATCH_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub n_tasks: usize,
    pub dim: usize,
    pub boundary: Vec<f64>,
    pub group_bias: f64,
    pub group_balance: f64,
    pub noise: f64,
    pub seed: u64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.dim == 0 {
            return Err(Error::Config("environment needs n_tasks >= 1 and dim >= 1".into()));
        }
        if self.boundary.len() != self.dim {
            return Err(Error::Config(format!(
                "boundary has {} entries, dim is {}",
                self.boundary.len(),
                self.dim
            )));
        }
        let norm2: f64 = self.boundary.iter().map(|v| v * v).sum();
        if !(norm2 > 0.0 && norm2.is_finite()) {
            return Err(Error::Config("boundary must be finite and nonzero".into()));
        }
        if !(self.group_balance > 0.0 && self.group_balance < 1.0) {
            return Err(Error::Config(format!("group_balance must lie in (0, 1), got {}", self.group_balance)));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::Config(format!("noise must lie in [0, 0.5), got {}", self.noise)));
        }
        if !self.group_bias.is_finite() {
            return Err(Error::Config("group_bias must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub environments: Vec<EnvSpec>,
    pub batch_size: usize,
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.environments.first() else {
            return Err(Error::Config("stream needs at least one environment".into()));
        };
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        for e in &self.environments {
            e.validate()?;
            if e.dim != first.dim {
                return Err(Error::Config("all environments must share one dimension".into()));
            }
        }
        Ok(())
    }

    pub fn total_rounds(&self) -> usize {
        self.environments.iter().map(|e| e.n_tasks).sum()
    }

    pub fn dim(&self) -> usize {
        self.environments.first().map_or(0, |e| e.dim)
    }

    /// First round of each environment.
    pub fn env_boundaries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.environments.len());
        let mut next = 1;
        for e in &self.environments {
            out.push(next);
            next += e.n_tasks;
        }
        out
    }
}

fn draw_batch(env: &EnvSpec, n: usize, round: usize, rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
    let norm2: f64 = env.boundary.iter().map(|v| v * v).sum();
    let shift: Vec<f64> = env.boundary.iter().map(|v| env.group_bias * v / norm2).collect();
    for _ in 0..MAX_BATCH_RETRIES {
        let mut features = Array2::<f64>::zeros((n, env.dim));
        let mut labels = Vec::with_capacity(n);
        let mut protected = Vec::with_capacity(n);
        for i in 0..n {
            let s: i8 = if rng.random::<f64>() < env.group_balance { 1 } else { -1 };
            let mut score = 0.0;
            for j in 0..env.dim {
                let mut v: f64 = rng.sample(StandardNormal);
                if s == 1 {
                    v += shift[j];
                }
                features[[i, j]] = v;
                score += env.boundary[j] * v;
            }
            let mut y: i8 = if score >= 0.0 { 1 } else { -1 };
            if rng.random::<f64>() < env.noise {
                y = -y;
            }
            labels.push(y);
            protected.push(s);
        }
        let batch = TaskBatch::new(features, labels, protected, round)?;
        if batch.has_both_groups() {
            return Ok(batch);
        }
    }
    Err(Error::Generation(format!(
        "no batch with both protected groups after {MAX_BATCH_RETRIES} attempts (group_balance {})",
        env.group_balance
    )))
}

pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<TaskBatch>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total_rounds());
    for env in &spec.environments {
        let mut rng = ChaCha8Rng::seed_from_u64(env.seed);
        for _ in 0..env.n_tasks {
            out.push(draw_batch(env, spec.batch_size, out.len() + 1, &mut rng)?);
        }
    }
    Ok(out)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Environments with independent random boundaries, one per bias value.
pub fn drift_stream(seed: u64, biases: &[f64], n_tasks: usize, batch_size: usize, dim: usize, noise: f64) -> StreamSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let environments = biases
        .iter()
        .map(|&group_bias| EnvSpec {
            n_tasks,
            dim,
            boundary: unit_vector(&mut rng, dim),
            group_bias,
            group_balance: 0.5,
            noise,
            seed: rng.random(),
        })
        .collect();
    StreamSpec { environments, batch_size }
}

/// Three environments of rising group bias, 32 tasks each, batch 200, d = 10.
pub fn default_drift_stream(seed: u64) -> StreamSpec {
    drift_stream(seed, &[0.5, 1.5, 3.0], 32, 200, 10, 0.05)
}

/// Two environments whose boundaries are negatives of each other.
pub fn boundary_flip_stream(seed: u64, n_tasks: usize, batch_size: usize, dim: usize) -> StreamSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = unit_vector(&mut rng, dim);
    let flipped = b.iter().map(|v| -v).collect();
    let env = |boundary, seed| EnvSpec {
        n_tasks,
        dim,
        boundary,
        group_bias: 0.5,
        group_balance: 0.5,
        noise: 0.05,
        seed,
    };
    let (s1, s2) = (rng.random(), rng.random());
    StreamSpec { environments: vec![env(b, s1), env(flipped, s2)], batch_size }
}

/// One environment, no group bias, no label noise.
pub fn stationary_stream(seed: u64, n_tasks: usize, batch_size: usize, dim: usize) -> StreamSpec {
    drift_stream(seed, &[0.0], n_tasks, batch_size, dim, 0.0)
}

/// How rows are grouped into rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Consecutive rows sharing a value in this column form one round.
    RoundColumn(String),
    /// Every `n` rows form one round; a shorter final chunk is kept.
    FixedSize(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub feature_columns: Vec<String>,
    pub protected_column: String,
    pub label_column: String,
    pub batching: Batching,
    /// Raw cell value to `±1`.
    pub protected_map: HashMap<String, i8>,
    pub label_map: HashMap<String, i8>,
}

fn signed_map() -> HashMap<String, i8> {
    [("-1".to_string(), -1), ("1".to_string(), 1)].into_iter().collect()
}

impl CsvSchema {
    /// The dialect written by [`write_csv`] for dimension `d`.
    pub fn native(d: usize) -> Self {
        Self {
            feature_columns: (0..d).map(|j| format!("f{j}")).collect(),
            protected_column: "protected".into(),
            label_column: "label".into(),
            batching: Batching::RoundColumn("round".into()),
            protected_map: signed_map(),
            label_map: signed_map(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config("schema lists no feature columns".into()));
        }
        for (name, map) in [("protected", &self.protected_map), ("label", &self.label_map)] {
            if map.values().any(|v| v.abs() != 1) {
                return Err(Error::Config(format!("{name} mapping must target -1 or +1")));
            }
        }
        if self.batching == Batching::FixedSize(0) {
            return Err(Error::Config("fixed batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Writes `stream` in the native dialect with 17 significant digits.
pub fn write_csv<W: Write>(writer: W, stream: &[TaskBatch]) -> Result<()> {
    let Some(first) = stream.first() else {
        return Err(Error::Config("nothing to write".into()));
    };
    let d = first.dim();
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = vec!["round".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    header.extend(["protected".into(), "label".into()]);
    w.write_record(&header).map_err(csv_io)?;
    for (k, b) in stream.iter().enumerate() {
        if b.dim() != d {
            return Err(Error::Config("batches differ in dimension".into()));
        }
        for i in 0..b.len() {
            let mut row = Vec::with_capacity(d + 3);
            row.push((k + 1).to_string());
            row.extend(b.row(i).iter().map(|v| format!("{v:.16e}")));
            row.push(b.protected()[i].to_string());
            row.push(b.labels()[i].to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_path(path: &Path, stream: &[TaskBatch]) -> Result<()> {
    write_csv(std::fs::File::create(path)?, stream)
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn ingestion(line: usize, message: impl Into<String>) -> Error {
    Error::Ingestion { line, message: message.into() }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| ingestion(1, format!("missing column '{name}'")))
}

struct Pending {
    key: Option<String>,
    rows: Vec<f64>,
    labels: Vec<i8>,
    protected: Vec<i8>,
}

impl Pending {
    fn new() -> Self {
        Self { key: None, rows: Vec::new(), labels: Vec::new(), protected: Vec::new() }
    }

    fn flush(&mut self, d: usize, out: &mut Vec<TaskBatch>) -> Result<()> {
        if self.labels.is_empty() {
            return Ok(());
        }
        let n = self.labels.len();
        let features = Array2::from_shape_vec((n, d), std::mem::take(&mut self.rows))
            .map_err(|e| Error::InternalConsistency(e.to_string()))?;
        out.push(TaskBatch::new(
            features,
            std::mem::take(&mut self.labels),
            std::mem::take(&mut self.protected),
            out.len() + 1,
        )?);
        Ok(())
    }
}

/// Reads batches in file order according to `schema`.
pub fn load_csv_reader<R: Read>(reader: R, schema: &CsvSchema) -> Result<Vec<TaskBatch>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| ingestion(1, e.to_string()))?.clone();
    let feat_idx = schema
        .feature_columns
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let prot_idx = column(&headers, &schema.protected_column)?;
    let label_idx = column(&headers, &schema.label_column)?;
    let round_idx = match &schema.batching {
        Batching::RoundColumn(c) => Some(column(&headers, c)?),
        Batching::FixedSize(_) => None,
    };
    let d = feat_idx.len();

    let mut out = Vec::new();
    let mut pending = Pending::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ingestion(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let cell = |i: usize| rec.get(i).map(str::trim).ok_or_else(|| ingestion(line, "short row"));

        match (&schema.batching, round_idx) {
            (Batching::RoundColumn(_), Some(ri)) => {
                let key = cell(ri)?.to_string();
                if pending.key.as_ref().is_some_and(|k| *k != key) {
                    pending.flush(d, &mut out)?;
                }
                pending.key = Some(key);
            }
            (Batching::FixedSize(n), _) if pending.labels.len() == *n => pending.flush(d, &mut out)?,
            _ => {}
        }

        for &j in &feat_idx {
            let raw = cell(j)?;
            let v: f64 = raw
                .parse()
                .map_err(|_| ingestion(line, format!("non-numeric feature '{raw}' in column '{}'", &headers[j])))?;
            if !v.is_finite() {
                return Err(ingestion(line, format!("non-finite feature in column '{}'", &headers[j])));
            }
            pending.rows.push(v);
        }
        let map = |raw: &str, m: &HashMap<String, i8>, what: &str| {
            m.get(raw).copied().ok_or_else(|| ingestion(line, format!("unmapped {what} value '{raw}'")))
        };
        pending.protected.push(map(cell(prot_idx)?, &schema.protected_map, "protected")?);
        pending.labels.push(map(cell(label_idx)?, &schema.label_map, "label")?);
    }
    pending.flush(d, &mut out)?;
    if out.is_empty() {
        return Err(ingestion(1, "no data rows"));
    }
    Ok(out)
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Vec<TaskBatch>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    load_csv_reader(file, schema)
}

/// Loads a file in the native dialect, inferring `d` from its `f*` columns.
pub fn load_native_csv(path: &Path) -> Result<Vec<TaskBatch>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| ingestion(1, e.to_string()))?;
    let d = headers.iter().filter(|h| h.starts_with('f') && h[1..].parse::<usize>().is_ok()).count();
    load_csv(path, &CsvSchema::native(d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_unbiased_env_is_separable() {
        let spec = drift_stream(4, &[0.0], 3, 100, 5, 0.0);
        let b = &spec.environments[0].boundary;
        for batch in generate_stream(&spec).unwrap() {
            for i in 0..batch.len() {
                let score: f64 = batch.row(i).iter().zip(b).map(|(x, w)| x * w).sum();
                assert_eq!(if score >= 0.0 { 1 } else { -1 }, batch.labels()[i]);
            }
        }
    }

    #[test]
    fn bias_shifts_group_scores() {
        let spec = drift_stream(5, &[2.0], 4, 400, 3, 0.0);
        let b = spec.environments[0].boundary.clone();
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for batch in generate_stream(&spec).unwrap() {
            for i in 0..batch.len() {
                let score: f64 = batch.row(i).iter().zip(&b).map(|(x, w)| x * w).sum();
                if batch.protected()[i] == 1 { pos.push(score) } else { neg.push(score) }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean(&pos) - mean(&neg) - 2.0).abs() < 0.15);
    }

    #[test]
    fn environments_switch_at_boundaries() {
        let spec = default_drift_stream(1);
        let stream = generate_stream(&spec).unwrap();
        assert_eq!(stream.len(), 96);
        assert_eq!(spec.env_boundaries(), vec![1, 33, 65]);
        assert!(stream.iter().enumerate().all(|(i, b)| b.round() == i + 1 && b.has_both_groups()));
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = boundary_flip_stream(3, 4, 50, 4);
        assert_eq!(generate_stream(&spec).unwrap(), generate_stream(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = default_drift_stream(1);
        spec.environments[0].group_balance = 1.0;
        assert!(matches!(generate_stream(&spec), Err(Error::Config(_))));
        let mut spec = default_drift_stream(1);
        spec.environments[1].boundary.pop();
        assert!(generate_stream(&spec).is_err());
    }

    #[test]
    fn tiny_balance_exhausts_retries() {
        let mut spec = drift_stream(1, &[0.0], 1, 2, 2, 0.0);
        spec.environments[0].group_balance = 1e-9;
        assert!(matches!(generate_stream(&spec), Err(Error::Generation(_))));
    }

    #[test]
    fn mapping_and_errors() {
        let schema = CsvSchema {
            feature_columns: vec!["x".into(), "z".into()],
            protected_column: "sex".into(),
            label_column: "y".into(),
            batching: Batching::FixedSize(10),
            protected_map: [("0".to_string(), -1), ("1".to_string(), 1)].into_iter().collect(),
            label_map: [("0".to_string(), -1), ("1".to_string(), 1)].into_iter().collect(),
        };
        let data = "x,z,sex,y\n0.5,1,0,1\n-2,3e-1,1,0\n";
        let out = load_csv_reader(data.as_bytes(), &schema).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].protected(), &[-1, 1]);
        assert_eq!(out[0].labels(), &[1, -1]);
        assert_eq!(out[0].features()[[1, 1]], 0.3);

        let bad = "x,z,sex,y\n0.5,1,0,1\n0.1,oops,1,0\n";
        match load_csv_reader(bad.as_bytes(), &schema) {
            Err(Error::Ingestion { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("oops"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let unmapped = "x,z,sex,y\n0.5,1,2,1\n";
        assert!(matches!(load_csv_reader(unmapped.as_bytes(), &schema), Err(Error::Ingestion { line: 2, .. })));
        let ragged = "x,z,sex,y\n0.5,1,0\n";
        assert!(matches!(load_csv_reader(ragged.as_bytes(), &schema), Err(Error::Ingestion { .. })));
        let missing = "x,sex,y\n0.5,0,1\n";
        assert!(matches!(load_csv_reader(missing.as_bytes(), &schema), Err(Error::Ingestion { line: 1, .. })));
    }

    #[test]
    fn round_trip_is_lossless() {
        let stream = generate_stream(&drift_stream(9, &[0.5, 1.0], 3, 20, 4, 0.1)).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &stream).unwrap();
        let back = load_csv_reader(buf.as_slice(), &CsvSchema::native(4)).unwrap();
        assert_eq!(back, stream);
    }
}
