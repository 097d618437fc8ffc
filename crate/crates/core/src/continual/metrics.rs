use serde::{Deserialize, Serialize};

use super::learner::EpochLoss;
use crate::error::{Error, Result};

/// Everything recorded by one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    /// Row `j` holds `ACC_{j+1, i}` for tasks `i <= j+1` (fractions).
    pub accuracy: Vec<Vec<f64>>,
    /// Mean per-sample loss on the current task's training set, per task.
    pub train_loss: Vec<f64>,
    /// Mean per-sample loss on the pooled seen test sets, per task.
    pub test_loss: Vec<f64>,
    pub losses: Vec<EpochLoss>,
}

/// Derived series of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `ACC_j`, the mean over the row.
    pub acc: Vec<f64>,
    /// `ACC_1 - ACC_T`.
    pub delta: f64,
    /// `test loss - train loss` per task.
    pub gap: Vec<f64>,
}

/// `ACC_1 - ACC_T`.
pub fn accuracy_drop(acc_first: f64, acc_last: f64) -> f64 {
    acc_first - acc_last
}

pub fn average_row(row: &[f64]) -> f64 {
    row.iter().sum::<f64>() / row.len() as f64
}

impl RunResult {
    pub fn new(method: impl Into<String>, seed: u64) -> Self {
        RunResult {
            method: method.into(),
            seed,
            accuracy: Vec::new(),
            train_loss: Vec::new(),
            test_loss: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn tasks(&self) -> usize {
        self.accuracy.len()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        if self.accuracy.is_empty() {
            return Err(Error::Protocol("accuracy matrix is empty".into()));
        }
        for (j, row) in self.accuracy.iter().enumerate() {
            if row.len() != j + 1 {
                return Err(Error::Protocol(format!("accuracy row {} has {} entries", j + 1, row.len())));
            }
            if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Protocol(format!("accuracy row {} leaves [0, 1]", j + 1)));
            }
        }
        let t = self.accuracy.len();
        if self.train_loss.len() != t || self.test_loss.len() != t {
            return Err(Error::Protocol("loss series do not cover every task".into()));
        }
        let acc: Vec<f64> = self.accuracy.iter().map(|r| average_row(r)).collect();
        let gap = self.test_loss.iter().zip(&self.train_loss).map(|(te, tr)| te - tr).collect();
        Ok(Metrics { delta: accuracy_drop(acc[0], acc[t - 1]), acc, gap })
    }

    /// Flat CSV: one row per task with the running average accuracy.
    pub fn to_csv(&self) -> Result<String> {
        let m = self.metrics()?;
        let mut out = String::from("seed,method,task,acc,train_loss,test_loss,gap\n");
        for j in 0..self.tasks() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.seed,
                self.method,
                j + 1,
                m.acc[j],
                self.train_loss[j],
                self.test_loss[j],
                m.gap[j]
            ));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> MeanStd {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

/// Seed-aggregated metrics of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub seeds: Vec<u64>,
    /// Mean and std of `ACC_j` per task.
    pub acc: Vec<MeanStd>,
    pub final_acc: MeanStd,
    pub delta: MeanStd,
    /// Per-task gap, averaged over seeds.
    pub gap: Vec<MeanStd>,
    /// Gap averaged over tasks 2..T, then over seeds.
    pub mean_gap: MeanStd,
}

impl Aggregate {
    pub fn from_runs(runs: &[RunResult]) -> Result<Aggregate> {
        let first = runs.first().ok_or_else(|| Error::config("aggregate of no runs"))?;
        let metrics = runs.iter().map(RunResult::metrics).collect::<Result<Vec<_>>>()?;
        let t = first.tasks();
        if runs.iter().any(|r| r.tasks() != t) {
            return Err(Error::Protocol("runs differ in task count".into()));
        }
        let column = |f: &dyn Fn(&Metrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        let later_gap = |m: &Metrics| {
            if t > 1 {
                m.gap[1..].iter().sum::<f64>() / (t - 1) as f64
            } else {
                m.gap[0]
            }
        };
        Ok(Aggregate {
            method: first.method.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            acc: (0..t).map(|j| column(&|m| m.acc[j])).collect(),
            final_acc: column(&|m| m.acc[t - 1]),
            delta: column(&|m| m.delta),
            gap: (0..t).map(|j| column(&|m| m.gap[j])).collect(),
            mean_gap: column(&later_gap),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(rows: Vec<Vec<f64>>) -> RunResult {
        let t = rows.len();
        RunResult { accuracy: rows, train_loss: vec![0.5; t], test_loss: vec![0.5; t], ..RunResult::new("m", 1) }
    }

    #[test]
    fn averaging_and_drop() {
        let m = run(vec![vec![0.9], vec![0.8, 0.6]]).metrics().unwrap();
        assert!((m.acc[1] - 0.7).abs() < 1e-12);
        assert!((m.delta - 0.2).abs() < 1e-12);
        assert_eq!(m.gap, vec![0.0, 0.0]);
        // Table fixtures.
        assert!((accuracy_drop(94.75, 62.98) - 31.77).abs() < 0.01);
        assert!((accuracy_drop(94.69, 66.27) - 28.42).abs() < 0.01);
    }

    #[test]
    fn incomplete_matrix_is_rejected() {
        assert!(matches!(run(vec![vec![0.9], vec![0.8]]).metrics(), Err(Error::Protocol(_))));
        assert!(matches!(run(vec![]).metrics(), Err(Error::Protocol(_))));
    }

    #[test]
    fn aggregation() {
        let mut a = run(vec![vec![0.6]]);
        let mut b = run(vec![vec![0.8]]);
        a.seed = 1;
        b.seed = 2;
        let agg = Aggregate::from_runs(&[a.clone(), b]).unwrap();
        assert!((agg.final_acc.mean - 0.7).abs() < 1e-12);
        assert!((agg.final_acc.std - 0.141_421_356_237_309_5).abs() < 1e-4);
        let single = Aggregate::from_runs(&[a]).unwrap();
        assert_eq!(single.final_acc, MeanStd { mean: 0.6, std: 0.0 });
    }
}
