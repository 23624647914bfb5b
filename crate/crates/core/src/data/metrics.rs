use serde::Serialize;

use crate::error::{Error, Result};

/// `2TP / (2TP + FP + FN)`, and 0 when the denominator is 0.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct F1Report {
    pub aus: Vec<u32>,
    pub per_au: Vec<f64>,
    pub macro_f1: f64,
}

impl F1Report {
    /// One header row of AU names plus `Avg`, one row of percentages.
    pub fn table(&self) -> String {
        let mut head = String::new();
        let mut vals = String::new();
        for (au, f) in self.aus.iter().zip(&self.per_au) {
            head.push_str(&format!("{:>7}", format!("AU{au}")));
            vals.push_str(&format!("{:>7.1}", 100.0 * f));
        }
        head.push_str(&format!("{:>7}", "Avg"));
        vals.push_str(&format!("{:>7.1}", 100.0 * self.macro_f1));
        format!("{head}\n{vals}")
    }
}

/// Per-column F1 of 0/1 prediction rows against label rows.
pub fn f1_per_au(aus: &[u32], preds: &[Vec<u8>], labels: &[Vec<u8>]) -> Result<F1Report> {
    if preds.len() != labels.len() {
        return Err(Error::Data(format!("{} prediction rows vs {} label rows", preds.len(), labels.len())));
    }
    let n_au = aus.len();
    let mut counts = vec![(0usize, 0usize, 0usize); n_au];
    for (p, y) in preds.iter().zip(labels) {
        if p.len() != n_au || y.len() != n_au {
            return Err(Error::Data(format!("row width {} / {} vs {n_au} AUs", p.len(), y.len())));
        }
        for k in 0..n_au {
            let c = &mut counts[k];
            match (p[k] != 0, y[k] != 0) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_au: Vec<f64> = counts.iter().map(|&(tp, fp, fn_)| f1_from_counts(tp, fp, fn_)).collect();
    let macro_f1 = per_au.iter().sum::<f64>() / n_au.max(1) as f64;
    Ok(F1Report {
        aus: aus.to_vec(),
        per_au,
        macro_f1,
    })
}
