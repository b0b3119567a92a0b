use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use patchimpute::adaptation::{
    finetune_prefix, forecast_finetune, impute_series, new_prefix, ForecastModel, PrefixFile, PrefixMode,
};
use patchimpute::bench::{render_report, run_protocol, Corpus, ProtocolConfig};
use patchimpute::data::mask::generate;
use patchimpute::data::series::{load_mask_csv, write_csv};
use patchimpute::data::window::slice_variables;
use patchimpute::data::{load_csv, slice_windows, MissingPattern, MultivariateSeries, SeriesWindow};
use patchimpute::model::{ImputationModel, PrefixProvider};
use patchimpute::numerics::Real;
use patchimpute::parallel::Exec;
use patchimpute::training::{train_loop, LogRecord, TrainData, Trainer};
use patchimpute::{Error, Result};

#[derive(Parser)]
#[command(version, about = "Impute incomplete time series with a patch-token transformer")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train an imputation model from scratch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>.state` if present.
        #[arg(long)]
        resume: bool,
    },
    /// Fit a prefix (or, with --horizon, a forecasting head) to a frozen base.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Experiment file; its `[finetune]` and `[data]` tables are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_parser = ["domain", "intervar"])]
        mode: Option<String>,
        /// Padding tokens; writes a forecasting checkpoint instead of a prefix.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Fill the missing cells of a CSV.
    Impute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prefix: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// 0/1 CSV shaped like the data; 0 hides an observed cell.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecast the values following the end of every variable.
    Forecast {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Padding tokens; must match the checkpoint.
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the evaluation grid and write report.csv and report.jsonl.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one mask as a line of comma-separated 0/1 values.
    Maskgen {
        #[arg(long)]
        len: usize,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value = "random")]
        pattern: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match run(cli.cmd, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd, exec: Exec) -> Result<()> {
    match cmd {
        Cmd::Train { config, out, resume } => {
            let mut cfg = ProtocolConfig::load(&config)?;
            if exec == Exec::Sequential {
                cfg.train.exec = exec;
            }
            match cfg.train.precision {
                64 => train::<f64>(&cfg, &out, resume),
                _ => train::<f32>(&cfg, &out, resume),
            }
        }
        Cmd::Finetune {
            base,
            data,
            out,
            config,
            steps,
            mode,
            horizon,
        } => {
            let cfg = match config {
                Some(p) => ProtocolConfig::load(&p)?,
                None => ProtocolConfig::default(),
            };
            let mut ft = cfg.finetune.clone();
            if let Some(s) = steps {
                ft.steps = s;
            }
            if let Some(m) = mode {
                ft.mode = if m == "intervar" { PrefixMode::Intervar } else { PrefixMode::Domain };
            }
            if let Some(h) = horizon {
                ft.horizon = h;
            }
            if exec == Exec::Sequential {
                ft.exec = exec;
            }
            ft.validate()?;
            let model = ImputationModel::<f32>::load(&base)?;
            let series = load_csv(&data)?;
            let len = model.cfg.window_len + ft.horizon * model.cfg.patch_len;
            let windows = slice_windows(&series, len, cfg.data.stride, 0)?;
            if windows.is_empty() {
                return Err(Error::Format(format!("{} has fewer than {len} steps", data.display())));
            }
            let mut log = |step: usize, loss: f64| -> Result<()> {
                if step.is_multiple_of(50) {
                    eprintln!("step {step}: loss {loss:.6}");
                }
                Ok(())
            };
            let summary = if ft.horizon > 0 {
                let mut fm = ForecastModel::new(&model, ft.horizon, &ft)?;
                let s = forecast_finetune(&mut fm, &windows, &ft, &mut log)?;
                fm.save(&out)?;
                s
            } else {
                let mut p = new_prefix(&model, &ft)?;
                let s = finetune_prefix(&model, &mut p, &windows, &ft, &mut log)?;
                p.save(&out)?;
                s
            };
            println!(
                "{}",
                serde_json::json!({"steps": summary.steps, "final_loss": summary.losses.last()})
            );
            Ok(())
        }
        Cmd::Impute {
            ckpt,
            prefix,
            data,
            mask,
            out,
        } => {
            let model = ImputationModel::<f32>::load(&ckpt)?;
            let prefix = prefix.map(|p| PrefixFile::<f32>::load(&p)).transpose()?;
            if let Some(p) = &prefix {
                p.check_fits(&model)?;
            }
            let mut series = load_csv(&data)?;
            if let Some(m) = mask {
                let keep = load_mask_csv(&m, &series)?;
                for ((obs, v), k) in series.mask.iter_mut().zip(series.values.iter_mut()).zip(keep) {
                    if !k {
                        *obs = false;
                        *v = 0.0;
                    }
                }
            }
            let provider: Option<&dyn PrefixProvider<f32>> = prefix.as_ref().map(|p| p.provider());
            let filled = impute_series(&model, exec, &series, provider)?;
            let rows: Vec<Vec<Option<f64>>> = filled.chunks(series.vars()).map(|r| r.iter().map(|&x| Some(x)).collect()).collect();
            write_csv(&out, &series.names, &rows)
        }
        Cmd::Forecast {
            ckpt,
            data,
            horizon,
            out,
        } => {
            let fm = ForecastModel::<f32>::load(&ckpt)?;
            if fm.horizon != horizon {
                return Err(Error::Config(format!(
                    "checkpoint forecasts {} padding tokens, --horizon is {horizon}",
                    fm.horizon
                )));
            }
            let series = load_csv(&data)?;
            let len = fm.base.cfg.window_len;
            if series.len() < len {
                return Err(Error::Format(format!("series has {} steps, the model needs {len}", series.len())));
            }
            let windows = last_windows(&series, len)?;
            let f = fm.forecast(exec, &windows)?;
            let rows: Vec<Vec<Option<f64>>> = (0..fm.out_len()).map(|t| f.iter().map(|v| Some(v[t])).collect()).collect();
            write_csv(&out, &series.names, &rows)
        }
        Cmd::Bench { config, out } => {
            let mut cfg = ProtocolConfig::load(&config)?;
            if exec == Exec::Sequential {
                cfg.bench.exec = exec;
            }
            let dir = out
                .or(cfg.bench.output.clone())
                .ok_or_else(|| Error::Config("bench needs --out or bench.output".into()))?;
            let report = run_protocol(&cfg)?;
            render_report(&report, &dir)?;
            for a in report.averages() {
                println!("{:<14} mse {:.6}  mae {:.6}", a.model.as_str(), a.mse, a.mae);
            }
            Ok(())
        }
        Cmd::Maskgen {
            len,
            rate,
            pattern,
            seed,
        } => {
            let pattern: MissingPattern = pattern.parse()?;
            let m = generate(pattern, len, rate, seed)?;
            let line: Vec<&str> = m.iter().map(|&k| if k { "1" } else { "0" }).collect();
            println!("{}", line.join(","));
            Ok(())
        }
    }
}

/// The final `len` steps of every variable.
fn last_windows(series: &MultivariateSeries, len: usize) -> Result<Vec<SeriesWindow>> {
    let start = series.len() - len;
    let columns: Vec<usize> = (0..series.vars()).collect();
    let sub = MultivariateSeries::new(
        series.names.clone(),
        series.values[start * series.vars()..].to_vec(),
        series.mask[start * series.vars()..].to_vec(),
        series.domain.clone(),
    )?;
    slice_variables(&sub, len, len, 0, &columns)
}

fn train<T: Real>(cfg: &ProtocolConfig, out: &Path, resume: bool) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let corpus = Corpus::load(&cfg.data, cfg.model.window_len)?;
    let data = TrainData {
        train: corpus.windows_of(&corpus.split.train),
        val: corpus.windows_of(&corpus.split.val),
    };
    let state = with_suffix(out, ".state");
    let mut tr = if resume && state.exists() {
        Trainer::<T>::load_state(&state, cfg.train.clone())?
    } else {
        let domains = if cfg.data.per_domain_embedding { corpus.domains.clone() } else { Vec::new() };
        Trainer::new(ImputationModel::<T>::init(&cfg.model, domains, cfg.train.seed)?, cfg.train.clone())?
    };
    let mut logfile = BufWriter::new(File::create(with_suffix(out, ".log.jsonl"))?);
    let mut log = |r: &LogRecord| -> Result<()> {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(logfile, "{line}")?;
        if r.kind == "epoch" {
            eprintln!(
                "epoch {}: train {:.6} (mse {:.6} + {:.6}, contrastive {:.6}) val {:.6}",
                r.epoch,
                r.total,
                r.mse1,
                r.mse2,
                r.contrastive,
                r.val_mse.unwrap_or(f64::NAN)
            );
        }
        Ok(())
    };
    let summary = train_loop(&mut tr, &data, &mut log, Some(&state))?;
    logfile.flush()?;
    tr.best.as_ref().unwrap_or(&tr.model).save(out)?;
    println!(
        "{}",
        serde_json::json!({
            "epochs": summary.epochs,
            "steps": summary.steps,
            "best_val": summary.best_val,
            "stopped_early": summary.stopped_early,
        })
    );
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
