use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `rows[t][i]` is the accuracy on task `i` after learning task `t` (zero-based, `i <= t`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if row.len() != t + 1 {
            return Err(Error::Dimension(format!(
                "row after task {} needs {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if row.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::OutOfRange("accuracy outside [0, 1]".into()));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `A_t`, the mean over tasks seen so far.
    pub fn averages(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    /// Comma-separated lower triangle, header `after_task,task_1,...`; blanks above the diagonal.
    pub fn to_csv(&self) -> String {
        let t = self.rows.len();
        let mut out = String::from("after_task");
        for i in 1..=t {
            out.push_str(&format!(",task_{}", i));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&(k + 1).to_string());
            for i in 0..t {
                out.push(',');
                if let Some(a) = row.get(i) {
                    out.push_str(&a.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `(FAA, CAA) = (A_T, mean_t A_t)`.
pub fn faa_caa(s: &AccuracyMatrix) -> Result<(f64, f64)> {
    let a = s.averages();
    let last = *a
        .last()
        .ok_or_else(|| Error::Dimension("empty accuracy matrix".into()))?;
    Ok((last, a.iter().sum::<f64>() / a.len() as f64))
}
