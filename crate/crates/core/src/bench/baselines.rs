use crate::data::SeriesWindow;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Fills hidden positions with the median of the observed values (mean of
/// the two middle values for an even count). A fully hidden window becomes
/// zeros.
pub fn impute_median(window: &SeriesWindow) -> Vec<f64> {
    let obs: Vec<f64> = window
        .values
        .iter()
        .zip(&window.mask)
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .collect();
    let fill = if obs.is_empty() { 0.0 } else { median(obs) };
    window
        .values
        .iter()
        .zip(&window.mask)
        .map(|(&v, &m)| if m { v } else { fill })
        .collect()
}

/// Carries the last observed value forward; positions before the first
/// observation take that first value. A fully hidden window becomes zeros.
pub fn impute_last(window: &SeriesWindow) -> Vec<f64> {
    let first = window
        .values
        .iter()
        .zip(&window.mask)
        .find(|(_, m)| **m)
        .map_or(0.0, |(v, _)| *v);
    let mut last = first;
    window
        .values
        .iter()
        .zip(&window.mask)
        .map(|(&v, &m)| {
            if m {
                last = v;
            }
            last
        })
        .collect()
}

/// Repeats the last observed value `horizon` times (zeros if nothing is
/// observed).
pub fn forecast_last(window: &SeriesWindow, horizon: usize) -> Vec<f64> {
    let last = window
        .values
        .iter()
        .zip(&window.mask)
        .rev()
        .find(|(_, m)| **m)
        .map_or(0.0, |(v, _)| *v);
    vec![last; horizon]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(vals: &[Option<f64>]) -> SeriesWindow {
        SeriesWindow::new(
            vals.iter().map(|v| v.unwrap_or(0.0)).collect(),
            vals.iter().map(Option::is_some).collect(),
        )
    }

    #[test]
    fn median_examples() {
        assert_eq!(impute_median(&w(&[Some(1.0), None, Some(3.0)])), vec![1.0, 2.0, 3.0]);
        assert_eq!(
            impute_median(&w(&[Some(5.0), None, Some(1.0), Some(2.0)])),
            vec![5.0, 2.0, 1.0, 2.0]
        );
        assert_eq!(impute_median(&w(&[None, None])), vec![0.0, 0.0]);
    }

    #[test]
    fn last_examples() {
        assert_eq!(impute_last(&w(&[Some(1.0), None, None, Some(4.0)])), vec![1.0, 1.0, 1.0, 4.0]);
        assert_eq!(impute_last(&w(&[None, None, Some(3.0), None])), vec![3.0; 4]);
        assert_eq!(impute_last(&w(&[Some(2.0), Some(-1.0)])), vec![2.0, -1.0]);
        assert_eq!(impute_last(&w(&[None, None])), vec![0.0, 0.0]);
        assert_eq!(forecast_last(&w(&[Some(1.0), Some(4.0), None]), 2), vec![4.0, 4.0]);
    }
}
