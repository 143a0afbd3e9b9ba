//! Confusion-matrix metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// `confusion[truth][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let k = confusion.len();
        if confusion.iter().any(|r| r.len() != k) {
            return Err(Error::config("confusion matrix must be square"));
        }
        let row: Vec<f64> = confusion.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
        let col: Vec<f64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
        let n: f64 = row.iter().sum();
        let diag: Vec<f64> = (0..k).map(|i| confusion[i][i] as f64).collect();

        let oa = ratio(diag.iter().sum(), n);
        let recall: Vec<f64> = (0..k).map(|i| ratio(diag[i], row[i])).collect();
        let precision: Vec<f64> = (0..k).map(|i| ratio(diag[i], col[i])).collect();
        let f1 = precision
            .iter()
            .zip(&recall)
            .map(|(&p, &r)| ratio(2.0 * p * r, p + r))
            .collect();
        // Classes absent from the truth do not enter the average.
        let present: Vec<usize> = (0..k).filter(|&i| row[i] > 0.0).collect();
        let aa = ratio(present.iter().map(|&i| recall[i]).sum(), present.len() as f64);
        let pe = if n == 0.0 {
            1.0
        } else {
            row.iter().zip(&col).map(|(r, c)| r * c).sum::<f64>() / (n * n)
        };
        let kappa = if pe >= 1.0 {
            if oa == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Self {
            confusion,
            oa,
            aa,
            kappa,
            precision,
            recall,
            f1,
        })
    }

    /// `truth` and `predicted` are 0-based class indices below `classes`.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("metrics", &[truth.len()], &[predicted.len()]));
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::Index(format!("class pair ({t}, {p}) outside {classes} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    /// `metric,value` lines; per-class entries use 1-based class labels.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "oa,{}", self.oa);
        let _ = writeln!(out, "aa,{}", self.aa);
        let _ = writeln!(out, "kappa,{}", self.kappa);
        for i in 0..self.classes() {
            let c = i + 1;
            let _ = writeln!(out, "precision_{c},{}", self.precision[i]);
            let _ = writeln!(out, "recall_{c},{}", self.recall[i]);
            let _ = writeln!(out, "f1_{c},{}", self.f1[i]);
        }
        for (i, row) in self.confusion.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(out, "confusion_{}_{},{v}", i + 1, j + 1);
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
