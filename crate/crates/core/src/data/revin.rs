use super::window::SeriesWindow;

/// Default stabilizer added to the standard deviation.
pub const REVIN_EPS: f64 = 1e-8;

/// Per-window location/scale kept for inverting the normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RevinStats {
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    /// No observed point: neutral stats were used.
    pub degenerate: bool,
}

impl RevinStats {
    pub fn scale(&self) -> f64 {
        self.std + self.eps
    }
}

/// Standardizes observed positions by their own population mean and
/// standard deviation; hidden positions become 0.
pub fn revin_normalize(window: &SeriesWindow) -> (SeriesWindow, RevinStats) {
    let (values, stats) = normalize_values(&window.values, &window.mask);
    (
        SeriesWindow {
            values,
            ..window.clone()
        },
        stats,
    )
}

pub fn normalize_values(values: &[f64], mask: &[bool]) -> (Vec<f64>, RevinStats) {
    let obs: Vec<f64> = values.iter().zip(mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
    if obs.is_empty() {
        let stats = RevinStats {
            mean: 0.0,
            std: 1.0,
            eps: REVIN_EPS,
            degenerate: true,
        };
        return (vec![0.0; values.len()], stats);
    }
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let stats = RevinStats {
        mean,
        std: var.sqrt(),
        eps: REVIN_EPS,
        degenerate: false,
    };
    let s = stats.scale();
    let out = values
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - mean) / s } else { 0.0 })
        .collect();
    (out, stats)
}

pub fn revin_denormalize(values: &[f64], stats: &RevinStats) -> Vec<f64> {
    let s = stats.scale();
    values.iter().map(|&v| v * s + stats.mean).collect()
}
