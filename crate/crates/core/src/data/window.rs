use super::series::MultivariateSeries;
use crate::error::{Error, Result};

/// One fixed-length univariate segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesWindow {
    pub values: Vec<f64>,
    /// `true` where observed.
    pub mask: Vec<bool>,
    /// Corpus-wide variable id.
    pub variable: usize,
    pub domain: String,
    /// Start offset in the source series.
    pub start: usize,
}

impl SeriesWindow {
    pub fn new(values: Vec<f64>, mask: Vec<bool>) -> Self {
        SeriesWindow {
            values,
            mask,
            variable: 0,
            domain: String::new(),
            start: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Copy with `extra` (true = keep) composed onto the native mask and
    /// newly hidden values zeroed.
    pub fn masked(&self, extra: &[bool]) -> SeriesWindow {
        let mask: Vec<bool> = self.mask.iter().zip(extra).map(|(&a, &b)| a && b).collect();
        let values = self
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| if m { v } else { 0.0 })
            .collect();
        SeriesWindow {
            values,
            mask,
            ..self.clone()
        }
    }
}

/// Number of windows of length `len` at `stride` over `t` steps.
pub fn window_count(t: usize, len: usize, stride: usize) -> usize {
    if t < len {
        0
    } else {
        (t - len) / stride + 1
    }
}

/// Slices every variable of `series` into windows. `first_var` offsets the
/// variable ids (for corpora made of several files).
pub fn slice_windows(series: &MultivariateSeries, len: usize, stride: usize, first_var: usize) -> Result<Vec<SeriesWindow>> {
    slice_variables(series, len, stride, first_var, &(0..series.vars()).collect::<Vec<_>>())
}

/// Like [`slice_windows`] restricted to the given column indices.
pub fn slice_variables(
    series: &MultivariateSeries,
    len: usize,
    stride: usize,
    first_var: usize,
    columns: &[usize],
) -> Result<Vec<SeriesWindow>> {
    if len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window length ({len}) and stride ({stride}) must be at least 1"
        )));
    }
    let n = window_count(series.len(), len, stride);
    let mut out = Vec::with_capacity(n * columns.len());
    for &v in columns {
        let (vals, mask) = series.column(v);
        for w in 0..n {
            let s = w * stride;
            out.push(SeriesWindow {
                values: vals[s..s + len].to_vec(),
                mask: mask[s..s + len].to_vec(),
                variable: first_var + v,
                domain: series.domain.clone(),
                start: s,
            });
        }
    }
    Ok(out)
}
