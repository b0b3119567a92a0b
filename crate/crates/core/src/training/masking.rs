use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::mask::{derive_seed, mask_random};
use crate::data::SeriesWindow;
use crate::error::{Error, Result};

/// Two independently masked copies of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct DualView {
    /// Artificial masks, `true` = kept.
    pub masks: [Vec<bool>; 2],
    /// The window with each mask composed onto its native mask.
    pub views: [SeriesWindow; 2],
    pub rates: [f64; 2],
}

/// Draws a rate uniformly from `range` and hides that fraction of
/// positions, all from `seed`.
pub fn random_rate_mask(len: usize, range: (f64, f64), seed: u64) -> Result<(Vec<bool>, f64)> {
    let (lo, hi) = range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::Config(format!("mask rate range [{lo}, {hi}] not inside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let mask = mask_random(len, rate, rng.random())?;
    Ok((mask, rate))
}

/// Two masked views per window. Each window's masks depend only on `seed`
/// and the window's variable id and start, not on batch composition.
pub fn dual_mask_batch(windows: &[SeriesWindow], range: (f64, f64), seed: u64) -> Result<Vec<DualView>> {
    windows
        .iter()
        .map(|w| {
            let base = [seed, w.variable as u64, w.start as u64];
            let (m1, r1) = random_rate_mask(w.len(), range, derive_seed(&[base[0], base[1], base[2], 1]))?;
            let (m2, r2) = random_rate_mask(w.len(), range, derive_seed(&[base[0], base[1], base[2], 2]))?;
            Ok(DualView {
                views: [w.masked(&m1), w.masked(&m2)],
                masks: [m1, m2],
                rates: [r1, r2],
            })
        })
        .collect()
}
