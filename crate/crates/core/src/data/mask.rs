use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingPattern {
    Random,
    Continuous,
}

impl MissingPattern {
    pub fn as_str(self) -> &'static str {
        match self {
            MissingPattern::Random => "random",
            MissingPattern::Continuous => "continuous",
        }
    }
}

impl std::str::FromStr for MissingPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(MissingPattern::Random),
            "continuous" => Ok(MissingPattern::Continuous),
            _ => Err(Error::Config(format!("unknown missing pattern `{s}`"))),
        }
    }
}

/// `⌊len·rate⌋`, robust to rates like 0.29 whose product lands a hair
/// below an integer.
pub fn missing_count(len: usize, rate: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Range(format!("missing rate {rate} outside [0, 1]")));
    }
    Ok(((len as f64 * rate + 1e-9).floor() as usize).min(len))
}

/// Hides exactly `⌊len·rate⌋` positions chosen uniformly without
/// replacement. `true` = kept.
pub fn mask_random(len: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    let n = missing_count(len, rate)?;
    let mut mask = vec![true; len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in index::sample(&mut rng, len, n) {
        mask[i] = false;
    }
    Ok(mask)
}

/// Hides one contiguous block of `⌊len·rate⌋` positions with a uniformly
/// drawn start.
pub fn mask_continuous(len: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    let n = missing_count(len, rate)?;
    let mut mask = vec![true; len];
    if n == 0 {
        return Ok(mask);
    }
    let start = ChaCha8Rng::seed_from_u64(seed).random_range(0..=len - n);
    mask[start..start + n].fill(false);
    Ok(mask)
}

pub fn generate(pattern: MissingPattern, len: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    match pattern {
        MissingPattern::Random => mask_random(len, rate, seed),
        MissingPattern::Continuous => mask_continuous(len, rate, seed),
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-independent seed from a list of keys.
pub fn derive_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5eed_u64, |acc, &k| mix64(acc ^ mix64(k)))
}
