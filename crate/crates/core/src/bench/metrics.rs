use serde::{Deserialize, Serialize};

use crate::data::revin::normalize_values;
use crate::data::SeriesWindow;
use crate::error::{Error, Result};

/// Units the errors are measured in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricSpace {
    /// Scaled by the ground-truth window's own observed mean and std.
    #[default]
    Normalized,
    Raw,
}

impl MetricSpace {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricSpace::Normalized => "normalized",
            MetricSpace::Raw => "raw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Running sums for pooling errors over many windows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSum {
    pub se: f64,
    pub ae: f64,
    pub count: usize,
}

impl MetricSum {
    pub fn add(&mut self, imputed: &[f64], truth: &[f64], eval: &[bool]) {
        for ((a, b), &e) in imputed.iter().zip(truth).zip(eval) {
            if e {
                let d = a - b;
                self.se += d * d;
                self.ae += d.abs();
                self.count += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &MetricSum) {
        self.se += other.se;
        self.ae += other.ae;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<Metric> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("no evaluated position".into()));
        }
        let n = self.count as f64;
        Ok(Metric {
            mse: self.se / n,
            mae: self.ae / n,
            count: self.count,
        })
    }
}

/// MSE and MAE over the positions flagged in `eval`.
pub fn metric_mse_mae(imputed: &[f64], truth: &[f64], eval: &[bool]) -> Result<Metric> {
    if imputed.len() != truth.len() || truth.len() != eval.len() {
        return Err(Error::Contract(format!(
            "metric over {} imputed, {} true values and {} flags",
            imputed.len(),
            truth.len(),
            eval.len()
        )));
    }
    let mut s = MetricSum::default();
    s.add(imputed, truth, eval);
    s.finish()
}

/// Positions hidden by `extra` that were natively observed.
pub fn eval_positions(truth: &SeriesWindow, extra: &[bool]) -> Vec<bool> {
    truth.mask.iter().zip(extra).map(|(&m, &e)| m && !e).collect()
}

/// Adds the errors of one imputed window against its ground truth to
/// `sum`, measured in `space`.
pub fn score_window(sum: &mut MetricSum, imputed: &[f64], truth: &SeriesWindow, extra: &[bool], space: MetricSpace) {
    let eval = eval_positions(truth, extra);
    match space {
        MetricSpace::Raw => sum.add(imputed, &truth.values, &eval),
        MetricSpace::Normalized => {
            let (_, st) = normalize_values(&truth.values, &truth.mask);
            let s = st.scale();
            let f = |v: &f64| (v - st.mean) / s;
            let a: Vec<f64> = imputed.iter().map(f).collect();
            let b: Vec<f64> = truth.values.iter().map(f).collect();
            sum.add(&a, &b, &eval);
        }
    }
}
