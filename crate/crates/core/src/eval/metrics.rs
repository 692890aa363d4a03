use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerformanceMode {
    Accuracy,
    MacroF1,
}

impl PerformanceMode {
    pub fn for_labels(multi_label: bool) -> Self {
        if multi_label {
            PerformanceMode::MacroF1
        } else {
            PerformanceMode::Accuracy
        }
    }
}

/// Accuracy (exact label-set match) or macro-F1 over the classes occurring
/// in either predictions or ground truth.
pub fn performance(predictions: &[Vec<usize>], truth: &[Vec<usize>], mode: PerformanceMode) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != truth.len() {
        return Err(Error::Metric(format!(
            "need equal, non-empty prediction and label lists (got {} and {})",
            predictions.len(),
            truth.len()
        )));
    }
    match mode {
        PerformanceMode::Accuracy => {
            let hits = predictions
                .iter()
                .zip(truth)
                .filter(|(p, t)| {
                    let (a, b): (BTreeSet<_>, BTreeSet<_>) = (p.iter().collect(), t.iter().collect());
                    a == b
                })
                .count();
            Ok(hits as f64 / predictions.len() as f64)
        }
        PerformanceMode::MacroF1 => {
            let classes: BTreeSet<usize> = predictions.iter().chain(truth).flatten().copied().collect();
            if classes.is_empty() {
                return Ok(1.0);
            }
            let mut sum = 0.0;
            for &c in &classes {
                let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
                for (p, t) in predictions.iter().zip(truth) {
                    match (p.contains(&c), t.contains(&c)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        (false, false) => {}
                    }
                }
                sum += f1(tp, fp, fneg);
            }
            Ok(sum / classes.len() as f64)
        }
    }
}

fn f1(tp: usize, fp: usize, fneg: usize) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Upper-triangular `T x T` matrix: `a[i][j]` is the performance on session
/// `i` after training through session `j`, present only for `i <= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub a: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(sessions: usize) -> Self {
        Self {
            a: vec![vec![None; sessions]; sessions],
        }
    }

    /// Builds a complete matrix from its upper triangle rows.
    pub fn from_upper(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let mut m = Self::new(t);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != t - i {
                return Err(Error::Metric(format!("row {i} needs {} entries, got {}", t - i, row.len())));
            }
            for (k, &v) in row.iter().enumerate() {
                m.set(i, i + k, v)?;
            }
        }
        Ok(m)
    }

    pub fn sessions(&self) -> usize {
        self.a.len()
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) -> Result<()> {
        let t = self.sessions();
        if i > j || j >= t {
            return Err(Error::Metric(format!("entry ({i}, {j}) outside the upper triangle of a {t}x{t} matrix")));
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Metric(format!("performance {v} outside [0, 1]")));
        }
        self.a[i][j] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.a.get(i).and_then(|r| r.get(j)).copied().flatten()
    }

    pub fn num_entries(&self) -> usize {
        self.a.iter().flatten().filter(|v| v.is_some()).count()
    }

    pub fn column_complete(&self, j: usize) -> bool {
        (0..=j).all(|i| self.get(i, j).is_some())
    }

    pub fn is_complete(&self) -> bool {
        (0..self.sessions()).all(|j| self.column_complete(j))
    }

    /// Mean of column `j` (performance over seen sessions after session `j`).
    pub fn column_mean(&self, j: usize) -> Result<f64> {
        if j >= self.sessions() || !self.column_complete(j) {
            return Err(Error::Metric(format!("column {j} is incomplete")));
        }
        Ok((0..=j).map(|i| self.get(i, j).expect("complete")).sum::<f64>() / (j + 1) as f64)
    }
}

/// `AP = (1/T) Σ_t a[t][T]`.
pub fn average_performance(m: &EvalMatrix) -> Result<f64> {
    let t = m.sessions();
    if t == 0 || !m.is_complete() {
        return Err(Error::Metric("average performance needs a complete matrix".into()));
    }
    m.column_mean(t - 1)
}

/// `FG = (1/(T-1)) Σ_{t<T} max_{z in t..T-1} (a[t][z] - a[t][T])`; may be
/// negative.
pub fn average_forgetting(m: &EvalMatrix) -> Result<f64> {
    let t = m.sessions();
    if t < 2 {
        return Err(Error::Metric("forgetting is undefined for fewer than 2 sessions".into()));
    }
    if !m.is_complete() {
        return Err(Error::Metric("average forgetting needs a complete matrix".into()));
    }
    let last = t - 1;
    let mut sum = 0.0;
    for i in 0..last {
        let fin = m.get(i, last).expect("complete");
        let peak = (i..last)
            .map(|z| m.get(i, z).expect("complete") - fin)
            .fold(f64::NEG_INFINITY, f64::max);
        sum += peak;
    }
    Ok(sum / last as f64)
}
