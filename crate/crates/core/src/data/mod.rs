//! CSV ingestion, windowing, variable-wise splits, missing-data masks and
//! reversible instance normalization.

pub mod mask;
pub mod revin;
pub mod series;
pub mod split;
pub mod synthetic;
pub mod window;

pub use mask::{derive_seed, mask_continuous, mask_random, MissingPattern};
pub use revin::{revin_denormalize, revin_normalize, RevinStats};
pub use series::{load_csv, MultivariateSeries};
pub use split::{split_by_variable, VariableSplit};
pub use window::{slice_windows, SeriesWindow};
pub use synthetic::{sinusoid_corpus, SinusoidSpec};
