//! Per-round training data kept for resampling expert support / query sets
//! from the rounds an expert's interval has covered so far.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{FairnessSpec, TaskBatch};

/// Attempts before a sampled pair lacking a protected group is an error.
const MAX_RESAMPLES: usize = 32;

#[derive(Debug, Clone, Default)]
pub struct DataHistory {
    batches: Vec<TaskBatch>,
    // rows of each label per round, and prefix sums over rounds
    pos: Vec<Vec<usize>>,
    neg: Vec<Vec<usize>>,
    pos_prefix: Vec<usize>,
    neg_prefix: Vec<usize>,
    all_prefix: Vec<usize>,
}

/// Location of a pooled row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
struct Row {
    round: usize,
    idx: usize,
}

impl DataHistory {
    pub fn new() -> Self {
        Self { pos_prefix: vec![0], neg_prefix: vec![0], all_prefix: vec![0], ..Default::default() }
    }

    /// Number of rounds stored.
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn round(&self, t: usize) -> Option<&TaskBatch> {
        t.checked_sub(1).and_then(|i| self.batches.get(i))
    }

    /// Appends the training rows of round `len() + 1`.
    pub fn push(&mut self, batch: TaskBatch) {
        let (mut p, mut n) = (Vec::new(), Vec::new());
        for (i, &y) in batch.labels().iter().enumerate() {
            if y == 1 {
                p.push(i);
            } else {
                n.push(i);
            }
        }
        self.pos_prefix.push(self.pos_prefix.last().unwrap() + p.len());
        self.neg_prefix.push(self.neg_prefix.last().unwrap() + n.len());
        self.all_prefix.push(self.all_prefix.last().unwrap() + batch.len());
        self.pos.push(p);
        self.neg.push(n);
        self.batches.push(batch);
    }

    /// Rows pooled over rounds `[start, end]`.
    pub fn pooled_len(&self, start: usize, end: usize) -> usize {
        self.all_prefix[end] - self.all_prefix[start - 1]
    }

    fn check_window(&self, start: usize, end: usize) -> Result<()> {
        if start < 1 || end < start || end > self.len() {
            return Err(Error::Range { t: end, max: self.len() });
        }
        Ok(())
    }

    fn locate(prefix: &[usize], start: usize, offset: usize) -> (usize, usize) {
        let global = prefix[start - 1] + offset;
        // first round whose cumulative count exceeds the global position
        let r = prefix.partition_point(|&c| c <= global);
        (r, global - prefix[r - 1])
    }

    fn draw_class<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        start: usize,
        end: usize,
        k: usize,
        positive: bool,
    ) -> Result<Vec<Row>> {
        let (prefix, lists) = if positive { (&self.pos_prefix, &self.pos) } else { (&self.neg_prefix, &self.neg) };
        let avail = prefix[end] - prefix[start - 1];
        if avail < k {
            return Err(Error::DegenerateInput(format!(
                "rounds [{start}, {end}] hold {avail} rows of class {}, {k} requested",
                if positive { "+1" } else { "-1" }
            )));
        }
        Ok(index::sample(rng, avail, k)
            .into_iter()
            .map(|o| {
                let (r, within) = Self::locate(prefix, start, o);
                Row { round: r, idx: lists[r - 1][within] }
            })
            .collect())
    }

    fn draw_pair<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        start: usize,
        end: usize,
        support_per_class: usize,
        query_size: usize,
    ) -> Result<(Vec<Row>, Vec<Row>)> {
        let mut support = self.draw_class(rng, start, end, support_per_class, true)?;
        support.extend(self.draw_class(rng, start, end, support_per_class, false)?);
        let total = self.pooled_len(start, end);
        if total < support.len() + query_size {
            return Err(Error::DegenerateInput(format!(
                "rounds [{start}, {end}] hold {total} rows, need {} support + {query_size} query",
                support.len()
            )));
        }
        let taken: std::collections::HashSet<Row> = support.iter().copied().collect();
        let query: Vec<Row> = index::sample(rng, total, support.len() + query_size)
            .into_iter()
            .map(|o| {
                let (r, idx) = Self::locate(&self.all_prefix, start, o);
                Row { round: r, idx }
            })
            .filter(|row| !taken.contains(row))
            .take(query_size)
            .collect();
        Ok((support, query))
    }

    fn materialize(&self, rows: &[Row], round: usize) -> Result<TaskBatch> {
        let picks: Vec<(&TaskBatch, usize)> = rows.iter().map(|r| (&self.batches[r.round - 1], r.idx)).collect();
        TaskBatch::gather(&picks, round)
    }

    /// Stratified support (`support_per_class` of each label) and a disjoint
    /// query drawn from the rows of rounds `[start, end]`. Both sets are
    /// redrawn until every fairness surrogate is defined on them.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        start: usize,
        end: usize,
        support_per_class: usize,
        query_size: usize,
        fairness: &[FairnessSpec],
    ) -> Result<(TaskBatch, TaskBatch)> {
        self.check_window(start, end)?;
        let mut last = Error::DegenerateInput("no samples drawn".into());
        for _ in 0..MAX_RESAMPLES {
            let (s, q) = self.draw_pair(rng, start, end, support_per_class, query_size)?;
            let support = self.materialize(&s, end)?;
            let query = self.materialize(&q, end)?;
            let bad = fairness
                .iter()
                .find_map(|f| {
                    crate::model::estimate_p1(&support, f.kind)
                        .and_then(|_| crate::model::estimate_p1(&query, f.kind))
                        .err()
                });
            match bad {
                None => return Ok((support, query)),
                Some(e) => last = e,
            }
        }
        Err(last)
    }
}
