//! Continual-learning metrics over a stage × task performance table.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(N+1) × N` table: row 0 holds single-task references, row `i ≥ 1` the
/// accuracy on every task after training stage `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClMatrix {
    rows: Vec<Vec<f64>>,
}

impl ClMatrix {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 || rows.len() != n + 1 {
            return Err(Error::config(format!(
                "performance table must be (N+1) x N, got {} rows of {n}",
                rows.len()
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::config(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
                return Err(Error::config(format!(
                    "accuracy {v} in row {i} is outside [0, 100]"
                )));
            }
        }
        Ok(Self { rows })
    }

    /// Builds from a table laid out one row per task with one column per
    /// training stage, plus the single-task reference of each task.
    pub fn from_task_major(by_task: &[Vec<f64>], single: &[f64]) -> Result<Self> {
        let n = single.len();
        let mut rows = vec![single.to_vec()];
        for stage in 0..n {
            let mut row = Vec::with_capacity(n);
            for task in by_task {
                row.push(
                    *task
                        .get(stage)
                        .ok_or_else(|| Error::config("ragged task-major table"))?,
                );
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn tasks(&self) -> usize {
        self.rows[0].len()
    }

    /// `P[i][j]`, stage `i` (0 = reference) and 0-based task `j`.
    pub fn get(&self, stage: usize, task: usize) -> f64 {
        self.rows[stage][task]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Mean of the last row.
    pub fn ap(&self) -> f64 {
        let n = self.tasks();
        self.rows[n].iter().sum::<f64>() / n as f64
    }

    /// Mean of `P[i][i] − P[0][i]`.
    pub fn fwt(&self) -> f64 {
        let n = self.tasks();
        (0..n)
            .map(|j| self.rows[j + 1][j] - self.rows[0][j])
            .sum::<f64>()
            / n as f64
    }

    /// Mean over earlier tasks of `P[N][i] − P[i][i]`.
    pub fn bwt(&self) -> Result<f64> {
        let n = self.tasks();
        if n < 2 {
            return Err(Error::UndefinedMetric(
                "BWT needs at least two tasks".into(),
            ));
        }
        Ok((0..n - 1)
            .map(|j| self.rows[n][j] - self.rows[j + 1][j])
            .sum::<f64>()
            / (n - 1) as f64)
    }

    pub fn to_csv(&self) -> String {
        let n = self.tasks();
        let mut out = String::from("stage");
        for j in 0..n {
            out.push_str(&format!(",task{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub ap: f64,
    pub fwt: f64,
    pub bwt: f64,
}

/// AP, FWT and BWT together; fails when BWT is undefined.
pub fn cl_metrics(p: &ClMatrix) -> Result<ClMetrics> {
    Ok(ClMetrics {
        ap: p.ap(),
        fwt: p.fwt(),
        bwt: p.bwt()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_table_has_no_transfer() {
        let p = ClMatrix::new(vec![vec![50.0; 3]; 4]).unwrap();
        let m = cl_metrics(&p).unwrap();
        assert_eq!((m.ap, m.fwt, m.bwt), (50.0, 0.0, 0.0));
    }

    #[test]
    fn single_task() {
        let p = ClMatrix::new(vec![vec![40.0], vec![70.0]]).unwrap();
        assert_eq!(p.ap(), 70.0);
        assert!(matches!(p.bwt(), Err(Error::UndefinedMetric(_))));
        assert!(cl_metrics(&p).is_err());
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(ClMatrix::new(vec![vec![1.0, 2.0]; 2]).is_err());
        assert!(ClMatrix::new(vec![vec![101.0], vec![1.0]]).is_err());
    }
}
