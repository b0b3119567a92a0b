//! Prefix fine-tuning of a frozen model, inter-variable prefixes and the
//! forecasting conversion.

pub mod finetune;
pub mod forecast;
pub mod intervar;
pub mod prefix;

pub use intervar::{intervar_prefix, InterVarPrefixNet};
pub use prefix::{combine_prefix, domain_transfer, PrefixBundle, DEFAULT_BETA};
pub use finetune::{
    aligned_blocks, covering_starts, finetune_loop, finetune_prefix, impute_series, impute_with, new_prefix, FinetuneConfig,
    FinetuneSummary, PrefixFile, PrefixMode,
};
pub use forecast::{forecast_finetune, split_forecast_window, ForecastModel};
