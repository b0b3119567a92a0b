use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::MultivariateSeries;
use crate::error::{Error, Result};

/// Parameters of a corpus of noisy sinusoids, one per variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidSpec {
    pub vars: usize,
    pub len: usize,
    /// Period range in time steps.
    pub min_period: f64,
    pub max_period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SinusoidSpec {
    fn default() -> Self {
        SinusoidSpec {
            vars: 30,
            len: 960,
            min_period: 12.0,
            max_period: 48.0,
            noise: 0.01,
            seed: 0,
        }
    }
}

/// Variable `v` is `a·sin(2πt/period + φ) + c + ε` with amplitude, period,
/// phase and offset drawn per variable.
pub fn sinusoid_corpus(spec: &SinusoidSpec, domain: &str) -> Result<MultivariateSeries> {
    if spec.vars == 0 || spec.len == 0 || !(spec.min_period > 0.0) || spec.min_period > spec.max_period {
        return Err(Error::Config(format!("invalid sinusoid corpus {spec:?}")));
    }
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cols: Vec<Vec<f64>> = (0..spec.vars)
        .map(|_| {
            let period = if spec.min_period == spec.max_period {
                spec.min_period
            } else {
                rng.random_range(spec.min_period..spec.max_period)
            };
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..2.0);
            let offset = rng.random_range(-1.0..1.0);
            (0..spec.len)
                .map(|t| {
                    amp * (std::f64::consts::TAU * t as f64 / period + phase).sin() + offset + noise.sample(&mut rng)
                })
                .collect()
        })
        .collect();
    let names = (0..spec.vars).map(|v| format!("s{v}")).collect();
    MultivariateSeries::from_columns(names, &cols, domain)
}
