//! Geo-tagged datasets: a synthetic generator with controllable
//! subpopulation shift, CSV ingestion of precomputed features, and
//! area-uniform location sampling.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::locenc::{csv_error, GeoPoint};
use crate::math::{stream_rng, streams, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Class(usize),
    Value(f64),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Value(_) => None,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Target::Class(c) => c as f64,
            Target::Value(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    pub features: Vec<f64>,
    pub target: Target,
    pub point: GeoPoint,
    pub domain: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
    pub num_domains: usize,
    /// Zero for regression.
    pub num_classes: usize,
    pub task: TaskKind,
    pub feature_dim: usize,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Record] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Record> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Checks feature lengths, domain and label ranges on every split.
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 {
            return Err(Error::Schema("dataset has no domains".into()));
        }
        if self.task == TaskKind::Classification && self.num_classes < 2 {
            return Err(Error::Schema(format!(
                "classification needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        for split in Split::ALL {
            for r in self.split(split) {
                if r.features.len() != self.feature_dim {
                    return Err(Error::Schema(format!(
                        "record {} has {} features, expected {}",
                        r.key,
                        r.features.len(),
                        self.feature_dim
                    )));
                }
                if r.domain >= self.num_domains {
                    return Err(Error::Schema(format!(
                        "record {} has domain {} outside [0, {})",
                        r.key, r.domain, self.num_domains
                    )));
                }
                match (self.task, r.target) {
                    (TaskKind::Classification, Target::Class(c)) if c < self.num_classes => {}
                    (TaskKind::Regression, Target::Value(v)) if v.is_finite() => {}
                    _ => {
                        return Err(Error::Schema(format!(
                            "record {} has target {:?} invalid for {:?} with {} classes",
                            r.key, r.target, self.task, self.num_classes
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Domain geometry.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    LatitudinalBands,
    SphericalVoronoi,
}

/// A partition of the sphere into `K` domain regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DomainRegions {
    /// Equal-area bands; domain 0 is the southernmost.
    Bands { count: usize },
    /// Nearest-centroid cells by great-circle distance.
    Voronoi { centroids: Vec<GeoPoint> },
}

const REGION_DRAW_LIMIT: usize = 1_000_000;

impl DomainRegions {
    pub fn new(geometry: Geometry, count: usize, seed: u64) -> Result<Self> {
        if count < 2 {
            return Err(Error::Validation(format!("need at least 2 domains, got {count}")));
        }
        Ok(match geometry {
            Geometry::LatitudinalBands => DomainRegions::Bands { count },
            Geometry::SphericalVoronoi => {
                let mut rng = stream_rng(seed, streams::SYNTH_STRUCTURE);
                // Centroids come from their own draw so they do not depend on
                // how many structure values the generator consumes.
                rng.set_word_pos(1 << 40);
                DomainRegions::Voronoi {
                    centroids: (0..count).map(|_| uniform_sphere_point(&mut rng)).collect(),
                }
            }
        })
    }

    pub fn count(&self) -> usize {
        match self {
            DomainRegions::Bands { count } => *count,
            DomainRegions::Voronoi { centroids } => centroids.len(),
        }
    }

    /// Membership test: the region containing `p`.
    pub fn domain_of(&self, p: &GeoPoint) -> usize {
        match self {
            DomainRegions::Bands { count } => {
                let s = p.lat.to_radians().sin();
                let idx = ((s + 1.0) / 2.0 * *count as f64).floor() as isize;
                idx.clamp(0, *count as isize - 1) as usize
            }
            DomainRegions::Voronoi { centroids } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in centroids.iter().enumerate() {
                    let d = p.great_circle(c);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            }
        }
    }

    /// Area-uniform point inside region `domain`.
    pub fn sample_in<R: Rng + ?Sized>(&self, domain: usize, rng: &mut R) -> Result<GeoPoint> {
        for _ in 0..REGION_DRAW_LIMIT {
            let p = match self {
                DomainRegions::Bands { count } => {
                    let k = *count as f64;
                    let lo = -1.0 + 2.0 * domain as f64 / k;
                    let s = lo + rng.random::<f64>() * 2.0 / k;
                    let lon = rng.random::<f64>() * 360.0 - 180.0;
                    GeoPoint {
                        lat: s.clamp(-1.0, 1.0).asin().to_degrees(),
                        lon,
                    }
                }
                DomainRegions::Voronoi { .. } => uniform_sphere_point(rng),
            };
            // Rejection also absorbs rounding at band edges.
            if self.domain_of(&p) == domain {
                return Ok(p);
            }
        }
        Err(Error::Sampling(format!(
            "no point found in domain {domain} after {REGION_DRAW_LIMIT} draws"
        )))
    }
}

/// Longitude uniform in [−180, 180), latitude `asin(2u − 1)` in degrees.
pub fn uniform_sphere_point<R: Rng + ?Sized>(rng: &mut R) -> GeoPoint {
    let lon = rng.random::<f64>() * 360.0 - 180.0;
    let u: f64 = rng.random();
    GeoPoint {
        lat: (2.0 * u - 1.0).asin().to_degrees(),
        lon,
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator.

fn default_train_mixture() -> Vec<f64> {
    vec![0.40, 0.30, 0.15, 0.10, 0.04, 0.01]
}

fn default_test_mixture() -> Vec<f64> {
    vec![1.0 / 6.0; 6]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_domains: usize,
    /// Number of classes; for regression, the number of latent prototypes.
    pub num_classes: usize,
    pub task: TaskKind,
    pub feature_dim: usize,
    pub geometry: Geometry,
    pub spurious_strength: f64,
    pub noise_sigma: f64,
    pub class_prior_concentration: f64,
    pub train_mixture: Vec<f64>,
    /// Mixture of both the validation and the test split.
    pub test_mixture: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_domains: 6,
            num_classes: 10,
            task: TaskKind::Classification,
            feature_dim: 64,
            geometry: Geometry::LatitudinalBands,
            spurious_strength: 1.0,
            noise_sigma: 0.6,
            class_prior_concentration: 0.5,
            train_mixture: default_train_mixture(),
            test_mixture: default_test_mixture(),
            n_train: 10_000,
            n_val: 2_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

fn check_mixture(name: &str, m: &[f64], k: usize) -> Result<()> {
    if m.len() != k {
        return Err(Error::Validation(format!(
            "{name} has {} entries for {k} domains",
            m.len()
        )));
    }
    if m.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Validation(format!("{name} has a negative or non-finite entry")));
    }
    let sum: f64 = m.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!("{name} sums to {sum}, not 1")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 domains, got {}",
                self.num_domains
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Validation("feature_dim must be positive".into()));
        }
        for (name, v) in [
            ("spurious_strength", self.spurious_strength),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(format!("{name} = {v}")));
            }
        }
        if !(self.class_prior_concentration > 0.0) || !self.class_prior_concentration.is_finite() {
            return Err(Error::Validation(format!(
                "class_prior_concentration = {}",
                self.class_prior_concentration
            )));
        }
        check_mixture("train_mixture", &self.train_mixture, self.num_domains)?;
        check_mixture("test_mixture", &self.test_mixture, self.num_domains)?;
        Ok(())
    }
}

/// Latent structure shared by all splits of one synthetic dataset.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub regions: DomainRegions,
    pub prototypes: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<f64>>,
    /// Per-domain class priors.
    pub class_priors: Vec<Vec<f64>>,
    /// Regression: per-prototype value and per-domain bias.
    pub prototype_values: Vec<f64>,
    pub domain_bias: Vec<f64>,
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, n: usize, concentration: f64) -> Result<Vec<f64>> {
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::Validation(format!("class prior concentration: {e}")))?;
    let draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        Ok(draws.into_iter().map(|g| g / sum).collect())
    } else {
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Index drawn from the categorical distribution `p`.
fn categorical<R: Rng + ?Sized>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in p.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let regions = DomainRegions::new(cfg.geometry, cfg.num_domains, cfg.seed)?;
        let mut rng = stream_rng(cfg.seed, streams::SYNTH_STRUCTURE);
        let f = cfg.feature_dim;
        let scale = 1.0 / (f as f64).sqrt();
        let prototypes = (0..cfg.num_classes)
            .map(|_| normal_vec(&mut rng, f, scale))
            .collect();
        let offsets = (0..cfg.num_domains)
            .map(|_| normal_vec(&mut rng, f, scale))
            .collect();
        let class_priors = (0..cfg.num_domains)
            .map(|_| dirichlet(&mut rng, cfg.num_classes, cfg.class_prior_concentration))
            .collect::<Result<_>>()?;
        let prototype_values = normal_vec(&mut rng, cfg.num_classes, 1.0);
        let domain_bias = normal_vec(&mut rng, cfg.num_domains, 1.0);
        Ok(SynthWorld {
            regions,
            prototypes,
            offsets,
            class_priors,
            prototype_values,
            domain_bias,
        })
    }

    fn record<R: Rng + ?Sized>(
        &self,
        cfg: &SynthConfig,
        key: String,
        mixture: &[f64],
        rng: &mut R,
    ) -> Result<Record> {
        let domain = categorical(rng, mixture);
        let point = self.regions.sample_in(domain, rng)?;
        let class = categorical(rng, &self.class_priors[domain]);
        let noise = normal_vec(rng, cfg.feature_dim, cfg.noise_sigma);
        let features = self.prototypes[class]
            .iter()
            .zip(&self.offsets[domain])
            .zip(&noise)
            .map(|((p, o), n)| p + cfg.spurious_strength * o + n)
            .collect();
        let target = match cfg.task {
            TaskKind::Classification => Target::Class(class),
            TaskKind::Regression => {
                let eps: f64 = StandardNormal.sample(rng);
                Target::Value(
                    self.prototype_values[class] + self.domain_bias[domain] + cfg.noise_sigma * eps,
                )
            }
        };
        Ok(Record {
            key,
            features,
            target,
            point,
            domain,
        })
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    let world = SynthWorld::new(cfg)?;
    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_domains: cfg.num_domains,
        num_classes: match cfg.task {
            TaskKind::Classification => cfg.num_classes,
            TaskKind::Regression => 0,
        },
        task: cfg.task,
        feature_dim: cfg.feature_dim,
    };
    for (split, n, stream, mixture) in [
        (Split::Train, cfg.n_train, streams::SYNTH_TRAIN, &cfg.train_mixture),
        (Split::Val, cfg.n_val, streams::SYNTH_VAL, &cfg.test_mixture),
        (Split::Test, cfg.n_test, streams::SYNTH_TEST, &cfg.test_mixture),
    ] {
        let mut rng: SeededRng = stream_rng(cfg.seed, stream);
        let records = (0..n)
            .map(|i| world.record(cfg, format!("{}-{i:06}", split.as_str()), mixture, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        *bundle.split_mut(split) = records;
    }
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// CSV.

const LABEL_COLUMNS: [&str; 6] = ["key", "split", "domain", "target", "lat", "lon"];

/// Schema information a CSV file does not carry by itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvOptions {
    pub task: TaskKind,
    /// Defaults to one more than the largest domain id seen.
    #[serde(default)]
    pub num_domains: Option<usize>,
    /// Defaults to one more than the largest class seen.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: TaskKind,
    pub num_domains: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub files: Vec<String>,
    pub rows: Vec<usize>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

fn format_target(t: Target) -> String {
    match t {
        Target::Class(c) => c.to_string(),
        Target::Value(v) => format!("{v:?}"),
    }
}

/// Writes one combined-format CSV per split plus `manifest.json`. Floats
/// use the shortest representation that parses back to the same value.
pub fn write_dataset_csv(
    bundle: &DatasetBundle,
    dir: &Path,
    synth: Option<&SynthConfig>,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for split in Split::ALL {
        let name = format!("{}.csv", split.as_str());
        let path = dir.join(&name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, 0, e))?;
        let mut header: Vec<String> = LABEL_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..bundle.feature_dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(|e| csv_error(&path, 1, e))?;
        for (i, r) in bundle.split(split).iter().enumerate() {
            let mut row = vec![
                r.key.clone(),
                split.as_str().to_string(),
                r.domain.to_string(),
                format_target(r.target),
                format!("{:?}", r.point.lat),
                format!("{:?}", r.point.lon),
            ];
            row.extend(r.features.iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(|e| csv_error(&path, i + 2, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        files.push(name);
        rows.push(bundle.split(split).len());
    }
    let manifest = Manifest {
        task: bundle.task,
        num_domains: bundle.num_domains,
        num_classes: bundle.num_classes,
        feature_dim: bundle.feature_dim,
        files,
        rows,
        synth: synth.cloned(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(path: &Path, line: usize, col: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("column {col}: invalid number {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("column {col}: non-finite value {s:?}")));
    }
    Ok(v)
}

fn parse_usize(path: &Path, line: usize, col: &str, s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_error(path, line, format!("column {col}: invalid integer {s:?}")))
}

struct LabelRow {
    split: Split,
    domain: usize,
    target: Target,
    point: GeoPoint,
    line: usize,
}

fn parse_labels(
    path: &Path,
    line: usize,
    fields: &csv::StringRecord,
    task: TaskKind,
) -> Result<LabelRow> {
    let split = Split::parse(fields[1].trim()).ok_or_else(|| {
        parse_error(path, line, format!("unknown split tag {:?}", &fields[1]))
    })?;
    let domain = parse_usize(path, line, "domain", &fields[2])?;
    let target = match task {
        TaskKind::Classification => Target::Class(parse_usize(path, line, "target", &fields[3])?),
        TaskKind::Regression => Target::Value(parse_f64(path, line, "target", &fields[3])?),
    };
    let point = GeoPoint {
        lat: parse_f64(path, line, "lat", &fields[4])?,
        lon: parse_f64(path, line, "lon", &fields[5])?,
    };
    point
        .validate()
        .map_err(|e| parse_error(path, line, e.to_string()))?;
    Ok(LabelRow {
        split,
        domain,
        target,
        point,
        line,
    })
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, csv::StringRecord)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, 0, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, 1, e))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        rows.push((line, rec.map_err(|e| csv_error(path, line, e))?));
    }
    Ok((header, rows))
}

fn feature_columns(path: &Path, header: &[String], skip: usize) -> Result<usize> {
    for (j, h) in header.iter().enumerate().skip(skip) {
        if *h != format!("f{}", j - skip) {
            return Err(parse_error(
                path,
                1,
                format!("expected column f{} at position {j}, found {h:?}", j - skip),
            ));
        }
    }
    Ok(header.len() - skip)
}

fn parse_features(
    path: &Path,
    line: usize,
    fields: &csv::StringRecord,
    skip: usize,
    dim: usize,
) -> Result<Vec<f64>> {
    if fields.len() != skip + dim {
        return Err(parse_error(
            path,
            line,
            format!(
                "inconsistent feature length: {} values, expected {dim}",
                fields.len().saturating_sub(skip)
            ),
        ));
    }
    (skip..fields.len())
        .map(|j| parse_f64(path, line, &format!("f{}", j - skip), &fields[j]))
        .collect()
}

/// Loads a dataset either from one combined file
/// (`key,split,domain,target,lat,lon,f0..`) or from a features file
/// (`key,f0..`) joined on `key` with a labels file
/// (`key,split,domain,target,lat,lon`).
pub fn load_dataset_csv(
    features: &Path,
    labels: Option<&Path>,
    opts: &CsvOptions,
) -> Result<DatasetBundle> {
    match labels {
        None => load_combined(&[features.to_path_buf()], opts),
        Some(labels) => load_joined(features, labels, opts),
    }
}

/// Loads and concatenates several combined-format files.
pub fn load_combined(paths: &[PathBuf], opts: &CsvOptions) -> Result<DatasetBundle> {
    let mut rows: Vec<(Split, Record)> = Vec::new();
    let mut dim = None;
    let mut seen = HashSet::new();
    for path in paths {
        let (header, records) = read_csv(path)?;
        if header.len() < LABEL_COLUMNS.len()
            || header[..LABEL_COLUMNS.len()] != LABEL_COLUMNS.map(String::from)
        {
            return Err(parse_error(
                path,
                1,
                format!("header must start with {}", LABEL_COLUMNS.join(",")),
            ));
        }
        let d = feature_columns(path, &header, LABEL_COLUMNS.len())?;
        if *dim.get_or_insert(d) != d {
            return Err(parse_error(
                path,
                1,
                format!("inconsistent feature length: {d} columns, expected {}", dim.unwrap()),
            ));
        }
        for (line, fields) in records {
            if fields.len() < LABEL_COLUMNS.len() {
                return Err(parse_error(path, line, "row is missing label columns"));
            }
            let key = fields[0].trim().to_string();
            if !seen.insert(key.clone()) {
                return Err(parse_error(path, line, format!("duplicate key {key:?}")));
            }
            let lab = parse_labels(path, line, &fields, opts.task)?;
            let features = parse_features(path, line, &fields, LABEL_COLUMNS.len(), d)?;
            rows.push((
                lab.split,
                Record {
                    key,
                    features,
                    target: lab.target,
                    point: lab.point,
                    domain: lab.domain,
                },
            ));
        }
    }
    assemble(rows, dim.unwrap_or(0), opts)
}

fn load_joined(features: &Path, labels: &Path, opts: &CsvOptions) -> Result<DatasetBundle> {
    let (fh, frows) = read_csv(features)?;
    if fh.first().map(String::as_str) != Some("key") {
        return Err(parse_error(features, 1, "header must start with key"));
    }
    let dim = feature_columns(features, &fh, 1)?;
    let mut feats: HashMap<String, (usize, Vec<f64>)> = HashMap::new();
    for (line, fields) in frows {
        let key = fields[0].trim().to_string();
        let v = parse_features(features, line, &fields, 1, dim)?;
        if feats.insert(key.clone(), (line, v)).is_some() {
            return Err(parse_error(features, line, format!("duplicate key {key:?}")));
        }
    }

    let (lh, lrows) = read_csv(labels)?;
    if lh != LABEL_COLUMNS.map(String::from) {
        return Err(parse_error(
            labels,
            1,
            format!("header must be {}", LABEL_COLUMNS.join(",")),
        ));
    }
    let mut rows = Vec::new();
    let mut used = HashSet::new();
    for (line, fields) in lrows {
        if fields.len() != LABEL_COLUMNS.len() {
            return Err(parse_error(labels, line, "wrong number of label columns"));
        }
        let key = fields[0].trim().to_string();
        let lab = parse_labels(labels, line, &fields, opts.task)?;
        let Some((_, f)) = feats.get(&key) else {
            return Err(parse_error(
                labels,
                lab.line,
                format!("missing key {key:?} in features file"),
            ));
        };
        if !used.insert(key.clone()) {
            return Err(parse_error(labels, line, format!("duplicate key {key:?}")));
        }
        rows.push((
            lab.split,
            Record {
                features: f.clone(),
                key,
                target: lab.target,
                point: lab.point,
                domain: lab.domain,
            },
        ));
    }
    if let Some((line, key)) = feats
        .iter()
        .filter(|(k, _)| !used.contains(*k))
        .map(|(k, (line, _))| (*line, k))
        .min()
    {
        return Err(parse_error(
            features,
            line,
            format!("missing key {key:?} in labels file"),
        ));
    }
    assemble(rows, dim, opts)
}

fn assemble(rows: Vec<(Split, Record)>, dim: usize, opts: &CsvOptions) -> Result<DatasetBundle> {
    let max_domain = rows.iter().map(|(_, r)| r.domain).max();
    let num_domains = opts
        .num_domains
        .unwrap_or_else(|| max_domain.map_or(0, |d| d + 1));
    let num_classes = match opts.task {
        TaskKind::Classification => opts.num_classes.unwrap_or_else(|| {
            rows.iter()
                .filter_map(|(_, r)| r.target.class())
                .max()
                .map_or(0, |c| c + 1)
        }),
        TaskKind::Regression => 0,
    };
    let mut bundle = DatasetBundle {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        num_domains,
        num_classes,
        task: opts.task,
        feature_dim: dim,
    };
    for (split, r) in rows {
        bundle.split_mut(split).push(r);
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Loads a directory written by [`write_dataset_csv`].
pub fn load_dataset_dir(dir: &Path) -> Result<(DatasetBundle, Manifest)> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let opts = CsvOptions {
        task: manifest.task,
        num_domains: Some(manifest.num_domains),
        num_classes: match manifest.task {
            TaskKind::Classification => Some(manifest.num_classes),
            TaskKind::Regression => None,
        },
    };
    let files: Vec<PathBuf> = manifest.files.iter().map(|f| dir.join(f)).collect();
    let bundle = load_combined(&files, &opts)?;
    if bundle.feature_dim != manifest.feature_dim {
        return Err(Error::Schema(format!(
            "manifest feature_dim {} but files have {}",
            manifest.feature_dim, bundle.feature_dim
        )));
    }
    Ok((bundle, manifest))
}

// ---------------------------------------------------------------------------
// Location sampling and masks.

/// Union of polygons (outer ring plus holes) in WGS84 degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoMask {
    /// Each polygon: rings of `(lon, lat)`; the first ring is the boundary.
    pub polygons: Vec<Vec<Vec<(f64, f64)>>>,
}

fn ring_from_json(v: &serde_json::Value) -> Result<Vec<(f64, f64)>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Schema("polygon ring is not an array".into()))?;
    arr.iter()
        .map(|pt| {
            let c = pt.as_array().filter(|c| c.len() >= 2);
            match c.and_then(|c| Some((c[0].as_f64()?, c[1].as_f64()?))) {
                Some(p) => Ok(p),
                None => Err(Error::Schema("polygon position is not [lon, lat]".into())),
            }
        })
        .collect()
}

fn polygon_from_json(v: &serde_json::Value) -> Result<Vec<Vec<(f64, f64)>>> {
    v.as_array()
        .ok_or_else(|| Error::Schema("polygon coordinates are not an array".into()))?
        .iter()
        .map(ring_from_json)
        .collect()
}

impl GeoMask {
    pub fn from_geojson(text: &str) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("mask is not valid JSON: {e}")))?;
        let mut geometries = Vec::new();
        match doc["type"].as_str() {
            Some("FeatureCollection") => {
                let feats = doc["features"]
                    .as_array()
                    .ok_or_else(|| Error::Schema("FeatureCollection without features".into()))?;
                geometries.extend(feats.iter().map(|f| f["geometry"].clone()));
            }
            Some("Feature") => geometries.push(doc["geometry"].clone()),
            Some(_) => geometries.push(doc.clone()),
            None => return Err(Error::Schema("mask has no GeoJSON type".into())),
        }
        let mut polygons = Vec::new();
        for g in geometries {
            match g["type"].as_str() {
                Some("Polygon") => polygons.push(polygon_from_json(&g["coordinates"])?),
                Some("MultiPolygon") => {
                    for p in g["coordinates"]
                        .as_array()
                        .ok_or_else(|| Error::Schema("MultiPolygon without coordinates".into()))?
                    {
                        polygons.push(polygon_from_json(p)?);
                    }
                }
                other => {
                    return Err(Error::Schema(format!(
                        "unsupported mask geometry {other:?}"
                    )))
                }
            }
        }
        Ok(GeoMask { polygons })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_geojson(&text)
    }

    fn ring_contains(ring: &[(f64, f64)], x: f64, y: f64) -> bool {
        let mut inside = false;
        let n = ring.len();
        if n < 3 {
            return false;
        }
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = ring[i];
            let (xj, yj) = ring[j];
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }

    pub fn contains(&self, p: &GeoPoint) -> bool {
        self.polygons.iter().any(|rings| {
            rings
                .first()
                .is_some_and(|outer| Self::ring_contains(outer, p.lon, p.lat))
                && !rings[1..]
                    .iter()
                    .any(|hole| Self::ring_contains(hole, p.lon, p.lat))
        })
    }

    /// Planar area of the outer rings in square degrees.
    pub fn planar_area(&self) -> f64 {
        self.polygons
            .iter()
            .filter_map(|rings| rings.first())
            .map(|ring| {
                let n = ring.len();
                let mut a = 0.0;
                for i in 0..n {
                    let (x0, y0) = ring[i];
                    let (x1, y1) = ring[(i + 1) % n];
                    a += x0 * y1 - x1 * y0;
                }
                (a / 2.0).abs()
            })
            .sum()
    }
}

/// `n` area-uniform points on the sphere, optionally restricted to `mask`
/// by rejection sampling.
pub fn sample_sphere_locations(n: usize, seed: u64, mask: Option<&GeoMask>) -> Result<Vec<GeoPoint>> {
    if n == 0 {
        return Err(Error::Validation("need at least one location".into()));
    }
    let mut rng = stream_rng(seed, streams::SPHERE);
    let Some(mask) = mask else {
        return Ok((0..n).map(|_| uniform_sphere_point(&mut rng)).collect());
    };
    if mask.planar_area() == 0.0 {
        return Err(Error::Sampling("mask has zero area".into()));
    }
    let limit = (n as u64).saturating_mul(1_000_000);
    let mut out = Vec::with_capacity(n);
    let mut draws = 0u64;
    while out.len() < n {
        if draws >= limit {
            return Err(Error::Sampling(format!(
                "accepted {} of {n} points in {limit} draws",
                out.len()
            )));
        }
        draws += 1;
        let p = uniform_sphere_point(&mut rng);
        if mask.contains(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_train: 300,
            n_val: 50,
            n_test: 50,
            feature_dim: 8,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn degenerate_mixture_gives_one_domain() {
        let mut cfg = small(1);
        cfg.train_mixture = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = generate_synthetic(&cfg).unwrap();
        assert!(b.train.iter().all(|r| r.domain == 0));
    }

    #[test]
    fn split_sizes_and_ranges() {
        let mut cfg = small(2);
        cfg.n_train = 100;
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(b.train.len(), 100);
        assert!(b.train.iter().all(|r| r.domain < 6));
        b.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small(3)).unwrap();
        let b = generate_synthetic(&small(3)).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate_synthetic(&small(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn mixture_validation() {
        let mut cfg = small(0);
        cfg.train_mixture = vec![0.5, 0.5, 0.5, 0.0, 0.0, 0.0];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Validation(_))));
        cfg.train_mixture = vec![0.5, 0.5];
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn domain_frequencies_follow_mixture() {
        let cfg = SynthConfig {
            n_train: 10_000,
            n_val: 0,
            n_test: 0,
            feature_dim: 2,
            seed: 11,
            ..SynthConfig::default()
        };
        let b = generate_synthetic(&cfg).unwrap();
        let n = b.train.len() as f64;
        for (d, &p) in cfg.train_mixture.iter().enumerate() {
            let freq = b.train.iter().filter(|r| r.domain == d).count() as f64 / n;
            assert!((freq - p).abs() < 3.0 * (p * (1.0 - p) / n).sqrt(), "domain {d}");
        }
    }

    #[test]
    fn points_belong_to_their_domain() {
        for geometry in [Geometry::LatitudinalBands, Geometry::SphericalVoronoi] {
            let cfg = SynthConfig {
                geometry,
                ..small(5)
            };
            let world = SynthWorld::new(&cfg).unwrap();
            let b = generate_synthetic(&cfg).unwrap();
            for r in b.train.iter().chain(&b.test) {
                assert_eq!(world.regions.domain_of(&r.point), r.domain);
            }
        }
    }

    #[test]
    fn noiseless_features_identify_the_class() {
        let cfg = SynthConfig {
            spurious_strength: 0.0,
            noise_sigma: 0.0,
            ..small(6)
        };
        let world = SynthWorld::new(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        for split in Split::ALL {
            for r in b.split(split) {
                let nearest = (0..cfg.num_classes)
                    .min_by(|&a, &c| {
                        let da: f64 = world.prototypes[a]
                            .iter()
                            .zip(&r.features)
                            .map(|(p, f)| (p - f).powi(2))
                            .sum();
                        let dc: f64 = world.prototypes[c]
                            .iter()
                            .zip(&r.features)
                            .map(|(p, f)| (p - f).powi(2))
                            .sum();
                        da.total_cmp(&dc)
                    })
                    .unwrap();
                assert_eq!(Target::Class(nearest), r.target);
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for task in [TaskKind::Classification, TaskKind::Regression] {
            let cfg = SynthConfig { task, ..small(7) };
            let b = generate_synthetic(&cfg).unwrap();
            write_dataset_csv(&b, dir.path(), Some(&cfg)).unwrap();
            let (back, manifest) = load_dataset_dir(dir.path()).unwrap();
            assert_eq!(back, b);
            assert_eq!(manifest.rows, vec![300, 50, 50]);
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn opts() -> CsvOptions {
        CsvOptions {
            task: TaskKind::Classification,
            num_domains: None,
            num_classes: Some(2),
        }
    }

    #[test]
    fn three_row_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "key,split,domain,target,lat,lon,f0,f1\n\
             a,train,0,1,10.0,20.0,0.5,1.5\n\
             b,val,1,0,-5.0,3.0,0.0,2.0\n\
             c,test,1,1,0.0,0.0,1.0,1.0\n",
        );
        let b = load_dataset_csv(&p, None, &opts()).unwrap();
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (1, 1, 1));
        assert_eq!(b.num_domains, 2);
        assert_eq!(b.val[0].features, vec![0.0, 2.0]);
    }

    fn parse_line(e: Error) -> (usize, String) {
        match e {
            Error::Parse { line, msg, .. } => (line, msg),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_errors_cite_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.csv",
            "key,split,domain,target,lat,lon,f0,f1\n\
             a,train,0,1,10.0,20.0,0.5,1.5\n\
             b,val,1,0,-5.0,3.0,0.0\n",
        );
        let (line, msg) = parse_line(load_dataset_csv(&p, None, &opts()).unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("feature length"));

        let p = write(
            dir.path(),
            "b.csv",
            "key,split,domain,target,lat,lon,f0\n\
             a,train,0,1,10.0,20.0,0.5\n\
             b,holdout,1,0,-5.0,3.0,0.0\n",
        );
        let (line, msg) = parse_line(load_dataset_csv(&p, None, &opts()).unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("split"));
    }

    #[test]
    fn joined_files_and_missing_keys() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "f.csv", "key,f0\na,1.0\nb,2.0\n");
        let l = write(
            dir.path(),
            "l.csv",
            "key,split,domain,target,lat,lon\nb,test,0,1,1.0,1.0\na,train,1,0,2.0,2.0\n",
        );
        let b = load_dataset_csv(&f, Some(&l), &opts()).unwrap();
        assert_eq!(b.train[0].key, "a");
        assert_eq!(b.test[0].features, vec![2.0]);

        let l2 = write(
            dir.path(),
            "l2.csv",
            "key,split,domain,target,lat,lon\na,train,0,1,1.0,1.0\nz,train,0,1,1.0,1.0\n",
        );
        let (line, msg) = parse_line(load_dataset_csv(&f, Some(&l2), &opts()).unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("missing key") && msg.contains("features"));

        let l3 = write(
            dir.path(),
            "l3.csv",
            "key,split,domain,target,lat,lon\na,train,0,1,1.0,1.0\n",
        );
        let (line, msg) = parse_line(load_dataset_csv(&f, Some(&l3), &opts()).unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("missing key") && msg.contains("labels"));
    }

    #[test]
    fn sphere_sampling() {
        let a = sample_sphere_locations(1, 9, None).unwrap();
        assert_eq!(a, sample_sphere_locations(1, 9, None).unwrap());
        let pts = sample_sphere_locations(100_000, 3, None).unwrap();
        let mean: f64 =
            pts.iter().map(|p| p.lat.to_radians().sin()).sum::<f64>() / pts.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!(pts.iter().all(|p| p.validate().is_ok()));
    }

    #[test]
    fn hemisphere_mask() {
        let mask = GeoMask::from_geojson(
            r#"{"type":"FeatureCollection","features":[{"type":"Feature","properties":{},
            "geometry":{"type":"Polygon","coordinates":[[[-180,0],[180,0],[180,90],[-180,90],[-180,0]]]}}]}"#,
        )
        .unwrap();
        let pts = sample_sphere_locations(500, 1, Some(&mask)).unwrap();
        assert!(pts.iter().all(|p| p.lat >= 0.0 && mask.contains(p)));

        let flat = GeoMask::from_geojson(
            r#"{"type":"Polygon","coordinates":[[[0,0],[10,0],[20,0],[0,0]]]}"#,
        )
        .unwrap();
        assert!(matches!(
            sample_sphere_locations(1, 1, Some(&flat)),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn mask_holes_are_excluded() {
        let mask = GeoMask::from_geojson(
            r#"{"type":"Polygon","coordinates":[
              [[-10,-10],[10,-10],[10,10],[-10,10],[-10,-10]],
              [[-5,-5],[5,-5],[5,5],[-5,5],[-5,-5]]]}"#,
        )
        .unwrap();
        assert!(!mask.contains(&GeoPoint { lat: 0.0, lon: 0.0 }));
        assert!(mask.contains(&GeoPoint { lat: 7.0, lon: 0.0 }));
        assert!(!mask.contains(&GeoPoint { lat: 20.0, lon: 0.0 }));
    }
}
