//! Command implementations behind the `geofuse` binary: run configs,
//! reports, and the gen-data / train / eval / ablate / cluster-map /
//! pareto commands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_synthetic, load_dataset_csv, load_dataset_dir, write_dataset_csv, CsvOptions,
    DatasetBundle, DomainRegions, GeoMask, Manifest, Split, SynthConfig, TaskKind,
};
use crate::error::{Error, Result};
use crate::eval::{
    build_cluster_map, export_cluster_map, pareto_mask, purity, render_pareto_svg, ClusterMap,
    GroupMetrics, MapFormat, ParetoPoint,
};
use crate::training::{
    alpha_sweep, load_checkpoint, save_checkpoint, train_model, write_atomic, DataMeta,
    EpochRecord, ModelBundle, ModelConfig, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from a synthetic configuration.
    Synthetic(SynthConfig),
    /// A directory written by `gen-data`.
    Dir { path: PathBuf },
    /// A combined CSV, or a features CSV joined with a labels CSV.
    Csv {
        features: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        task: TaskKind,
        #[serde(default)]
        num_domains: Option<usize>,
        #[serde(default)]
        num_classes: Option<usize>,
    },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SynthConfig::default())
    }
}

impl DataConfig {
    /// The dataset plus its generator settings when synthetic.
    pub fn load(&self) -> Result<(DatasetBundle, Option<SynthConfig>)> {
        match self {
            DataConfig::Synthetic(cfg) => Ok((generate_synthetic(cfg)?, Some(cfg.clone()))),
            DataConfig::Dir { path } => {
                let (bundle, manifest) = load_dataset_dir(path)?;
                Ok((bundle, manifest.synth))
            }
            DataConfig::Csv {
                features,
                labels,
                task,
                num_domains,
                num_classes,
            } => {
                let opts = CsvOptions {
                    task: *task,
                    num_domains: *num_domains,
                    num_classes: *num_classes,
                };
                Ok((load_dataset_csv(features, labels.as_deref(), &opts)?, None))
            }
        }
    }

    fn resolve(&mut self, base: &Path) {
        match self {
            DataConfig::Synthetic(_) => {}
            DataConfig::Dir { path } => *path = absolute(base, path),
            DataConfig::Csv {
                features, labels, ..
            } => {
                *features = absolute(base, features);
                if let Some(l) = labels {
                    *l = absolute(base, l);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub out_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn absolute(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let base = fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
        cfg.data.resolve(&base);
        if let Some(t) = cfg.model.frozen_table.as_mut() {
            *t = absolute(&base, t);
        }
        cfg.eval.out_dir = absolute(&base, &cfg.eval.out_dir);
        Ok(cfg)
    }

    /// Checks the config and fills in every defaulted value, so the result
    /// reproduces the run on its own.
    pub fn resolved(mut self) -> Result<Self> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if let DataConfig::Synthetic(s) = &self.data {
            s.validate()?;
        }
        self.train.alpha = Some(self.train.effective_alpha(&self.model));
        Ok(self)
    }

    pub fn method(&self) -> String {
        self.train.method_tag(&self.model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub config: RunConfig,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub test: GroupMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TIMING_FILE: &str = "timing.json";

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let DataConfig::Synthetic(synth) = &cfg.data else {
        return Err(Error::Config("gen-data needs a synthetic data section".into()));
    };
    synth.validate()?;
    let bundle = generate_synthetic(synth)?;
    write_dataset_csv(&bundle, out, Some(synth))
}

pub struct TrainOutput {
    pub report: RunReport,
    pub bundle: ModelBundle,
    pub out_dir: PathBuf,
}

/// Trains, evaluates on the test split, and writes checkpoint, report and
/// timing files to the configured output directory.
pub fn cmd_train(cfg: RunConfig) -> Result<TrainOutput> {
    let started = Instant::now();
    let cfg = cfg.resolved()?;
    let (data, synth) = cfg.data.load()?;
    let mut bundle = train_model(
        &data.train,
        &data.val,
        DataMeta::of(&data),
        &cfg.model,
        &cfg.train,
    )?;
    bundle.synth = synth;
    let test = bundle.model.evaluate(&data.test)?;
    let report = RunReport {
        method: cfg.method(),
        seed: cfg.train.seed,
        history: bundle.history.clone(),
        selected_epoch: bundle.selected_epoch,
        test,
        config: cfg,
    };
    let out_dir = report.config.eval.out_dir.clone();
    save_checkpoint(&bundle, &out_dir.join(CHECKPOINT_FILE))?;
    write_atomic(&out_dir.join(REPORT_FILE), to_json(&report)?.as_bytes())?;
    let timing = Timing {
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_atomic(&out_dir.join(TIMING_FILE), to_json(&timing)?.as_bytes())?;
    Ok(TrainOutput {
        report,
        bundle,
        out_dir,
    })
}

/// Evaluates a checkpoint on one split of `data`.
pub fn cmd_eval(checkpoint: &Path, data: &DataConfig, split: Split) -> Result<GroupMetrics> {
    let bundle = load_checkpoint(checkpoint)?;
    let (ds, _) = data.load()?;
    let found = DataMeta::of(&ds);
    if found != bundle.model.meta {
        return Err(Error::Schema(format!(
            "dataset {found:?} does not match the checkpoint's {:?}",
            bundle.model.meta
        )));
    }
    bundle.model.evaluate(ds.split(split))
}

/// Plain-text table of group metrics.
pub fn format_metrics(m: &GroupMetrics, task: TaskKind) -> String {
    let name = match task {
        TaskKind::Classification => "accuracy",
        TaskKind::Regression => "pearson_r",
    };
    let mut s = format!("domain,count,{name}\n");
    for (g, stat) in &m.per_group {
        let _ = writeln!(s, "{g},{},{:.6}", stat.count, stat.value);
    }
    let _ = writeln!(s, "average,,{:.6}", m.average);
    let _ = writeln!(s, "worst,,{:.6} (domain {})", m.worst, m.worst_group);
    s
}

/// Runs the sweep and renders it as `alpha,seed,avg,worst` CSV.
pub fn cmd_ablate(cfg: RunConfig, alphas: &[f64], seeds: &[u64], threads: usize) -> Result<String> {
    let cfg = cfg.resolved()?;
    if cfg.model.encoder.is_none() && alphas.iter().any(|a| *a > 0.0) {
        return Err(Error::Config(
            "the sweep needs a location encoder for alpha > 0".into(),
        ));
    }
    let (data, _) = cfg.data.load()?;
    let rows = alpha_sweep(&data, &cfg.model, &cfg.train, alphas, seeds, threads)?;
    let mut s = String::from("alpha,seed,avg,worst\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.alpha, r.seed, r.test.average, r.test.worst);
    }
    Ok(s)
}

pub struct ClusterMapOutput {
    pub map: ClusterMap,
    /// Cluster/domain purity when the checkpoint knows its domain regions.
    pub purity: Option<f64>,
}

/// Purity of a map against the true domain of each sampled point.
pub fn region_purity(map: &ClusterMap, regions: &DomainRegions) -> Result<f64> {
    let labels: Vec<usize> = map.points.iter().map(|p| regions.domain_of(p)).collect();
    purity(&map.assignments, &labels)
}

pub fn cmd_cluster_map(
    checkpoint: &Path,
    n: usize,
    k: usize,
    seed: u64,
    format: MapFormat,
    mask: Option<&Path>,
    out: &Path,
) -> Result<ClusterMapOutput> {
    let bundle = load_checkpoint(checkpoint)?;
    let mask = mask.map(GeoMask::load).transpose()?;
    let map = build_cluster_map(bundle.model.encoder.as_ref(), n, k, seed, mask.as_ref())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    export_cluster_map(&map, format, out)?;
    let purity = match &bundle.synth {
        Some(s) => Some(region_purity(&map, &DomainRegions::new(s.geometry, s.num_domains, s.seed)?)?),
        None => None,
    };
    Ok(ClusterMapOutput { map, purity })
}

pub struct ParetoOutput {
    pub points: Vec<ParetoPoint>,
    pub frontier: Vec<bool>,
    pub csv: String,
    pub svg: String,
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

/// Frontier CSV (`label,avg,worst`, frontier points only) and a scatter
/// of every report.
pub fn cmd_pareto(reports: &[PathBuf]) -> Result<ParetoOutput> {
    if reports.is_empty() {
        return Err(Error::Usage("pareto needs at least one report".into()));
    }
    let points = reports
        .iter()
        .map(|p| {
            let r = read_report(p)?;
            Ok(ParetoPoint {
                label: r.method,
                avg: r.test.average,
                worst: r.test.worst,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let frontier = pareto_mask(&points);
    let mut csv = String::from("label,avg,worst\n");
    for (p, on) in points.iter().zip(&frontier) {
        if *on {
            let _ = writeln!(csv, "{},{},{}", p.label, p.avg, p.worst);
        }
    }
    let svg = render_pareto_svg(&points, &frontier);
    Ok(ParetoOutput {
        points,
        frontier,
        csv,
        svg,
    })
}
