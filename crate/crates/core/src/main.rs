use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use geofuse::cli::{
    cmd_ablate, cmd_cluster_map, cmd_eval, cmd_gen_data, cmd_pareto, cmd_train, format_metrics,
    DataConfig, RunConfig,
};
use geofuse::data::Split;
use geofuse::eval::{MapFormat, DEFAULT_MAP_CLUSTERS, DEFAULT_MAP_POINTS};
use geofuse::training::{load_checkpoint, write_atomic, DEFAULT_SWEEP_ALPHAS};
use geofuse::{Error, Result};

#[derive(Parser)]
#[command(name = "geofuse", version, about = "Location-encoder fusion under geographic shift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV files plus manifest.json.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint.json, report.json and timing.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by gen-data.
        #[arg(long, conflicts_with = "config")]
        data: Option<PathBuf>,
        /// Run config whose data section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write the metrics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the domain-prediction weight over seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster location embeddings of sampled points and export the map.
    ClusterMap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAP_POINTS)]
        n: usize,
        #[arg(long, default_value_t = DEFAULT_MAP_CLUSTERS)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "svg")]
        format: String,
        /// GeoJSON polygon restricting the sampled points.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pareto frontier of (average, worst-group) over run reports.
    Pareto {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for pareto.csv and pareto.svg.
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn threads() -> usize {
    std::env::var("GEOFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let (Some(s), DataConfig::Synthetic(synth)) = (seed, &mut cfg.data) {
                synth.seed = s;
            }
            let m = cmd_gen_data(&cfg, &out)?;
            for (f, n) in m.files.iter().zip(&m.rows) {
                println!("{}: {n} rows", out.join(f).display());
            }
        }
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(o) = out {
                cfg.eval.out_dir = o;
            }
            let res = cmd_train(cfg)?;
            println!("method: {}", res.report.method);
            println!("selected epoch: {}", res.report.selected_epoch);
            print!("{}", format_metrics(&res.report.test, res.bundle.model.meta.task));
            println!("wrote {}", res.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            data,
            config,
            split,
            out,
        } => {
            let split = Split::parse(&split)
                .ok_or_else(|| Error::Usage(format!("unknown split {split:?}")))?;
            let data = match (data, config) {
                (Some(dir), _) => DataConfig::Dir { path: dir },
                (None, Some(c)) => RunConfig::from_file(&c)?.data,
                (None, None) => load_checkpoint(&checkpoint)?
                    .synth
                    .map(DataConfig::Synthetic)
                    .ok_or_else(|| Error::Usage("eval needs --data or --config".into()))?,
            };
            let m = cmd_eval(&checkpoint, &data, split)?;
            let task = load_checkpoint(&checkpoint)?.model.meta.task;
            print!("{}", format_metrics(&m, task));
            if let Some(o) = out {
                let mut s = serde_json::to_string_pretty(&m)?;
                s.push('\n');
                write_atomic(&o, s.as_bytes())?;
            }
        }
        Command::Ablate {
            config,
            alphas,
            seeds,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let alphas = alphas.unwrap_or_else(|| DEFAULT_SWEEP_ALPHAS.to_vec());
            let csv = cmd_ablate(cfg, &alphas, &seeds, threads())?;
            match out {
                Some(o) => {
                    write_atomic(&o, csv.as_bytes())?;
                    println!("wrote {}", o.display());
                }
                None => print!("{csv}"),
            }
        }
        Command::ClusterMap {
            checkpoint,
            n,
            k,
            seed,
            format,
            mask,
            out,
        } => {
            let format = MapFormat::parse(&format)
                .ok_or_else(|| Error::Usage(format!("unknown map format {format:?}")))?;
            let res = cmd_cluster_map(&checkpoint, n, k, seed, format, mask.as_deref(), &out)?;
            println!("map: {}", out.display());
            match res.purity {
                Some(p) => println!("purity: {p:.6}"),
                None => println!("purity: unavailable (no domain geometry in checkpoint)"),
            }
        }
        Command::Pareto { reports, out } => {
            let res = cmd_pareto(&reports)?;
            write_atomic(&out.join("pareto.csv"), res.csv.as_bytes())?;
            write_atomic(&out.join("pareto.svg"), res.svg.as_bytes())?;
            print!("{}", res.csv);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
