//! Coordinate featurizers, the residual location-encoder head, the linear
//! domain predictor and the discrete domain-embedding encoder.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    join, stream_rng, streams, Activation, Layer, Linear, Parameters, ResidualBlock, Sequential,
    Tape, Tensor2,
};

pub const WRAP_DIM: usize = 4;
pub const RFF_DIM: usize = 512;
pub const EMBED_DIM: usize = 256;
pub const NUM_BLOCKS: usize = 4;

/// Geographic coordinate in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = Self { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::Validation(format!("latitude {} outside [-90, 90]", self.lat)));
        }
        if !self.lon.is_finite() || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::Validation(format!(
                "longitude {} outside [-180, 180]",
                self.lon
            )));
        }
        Ok(())
    }

    /// Unit vector on the sphere.
    pub fn to_unit(&self) -> [f64; 3] {
        let (la, lo) = (self.lat.to_radians(), self.lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    }

    pub fn great_circle(&self, other: &GeoPoint) -> f64 {
        let a = self.to_unit();
        let b = other.to_unit();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        dot.clamp(-1.0, 1.0).acos()
    }
}

/// `[sin φ, cos φ, sin λ, cos λ]` with degrees converted to radians.
pub fn wrap_featurize(p: &GeoPoint) -> Result<[f64; WRAP_DIM]> {
    p.validate()?;
    let (phi, lam) = (p.lat.to_radians(), p.lon.to_radians());
    Ok([phi.sin(), phi.cos(), lam.sin(), lam.cos()])
}

/// Seeded random Fourier features over `u = (lat/90, lon/180)`.
///
/// Projections and phases are regenerated from `(seed, sigma)` and are not
/// serialized.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RffFeaturizer {
    pub sigma: f64,
    pub seed: u64,
    #[serde(skip)]
    state: Option<Arc<RffState>>,
}

#[derive(Debug)]
struct RffState {
    projection: Tensor2, // RFF_DIM × 2
    phases: Vec<f64>,
}

impl RffFeaturizer {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        let mut f = Self::uninitialized(sigma, seed);
        f.initialize()?;
        Ok(f)
    }

    pub fn uninitialized(sigma: f64, seed: u64) -> Self {
        Self {
            sigma,
            seed,
            state: None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Draws `RFF_DIM × 2` projection entries from `Normal(0, σ²)` (row
    /// major) followed by `RFF_DIM` phases from `Uniform[0, 2π)`.
    pub fn initialize(&mut self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("RFF bandwidth {}", self.sigma)));
        }
        let mut rng = stream_rng(self.seed, streams::RFF);
        let normal = Normal::new(0.0, self.sigma).expect("validated sigma");
        let proj: Vec<f64> = (0..RFF_DIM * 2).map(|_| normal.sample(&mut rng)).collect();
        let uniform = Uniform::new(0.0, 2.0 * PI).expect("non-empty range");
        let phases = (0..RFF_DIM).map(|_| uniform.sample(&mut rng)).collect();
        self.state = Some(Arc::new(RffState {
            projection: Tensor2::from_vec(RFF_DIM, 2, proj)?,
            phases,
        }));
        Ok(())
    }

    pub fn featurize(&self, p: &GeoPoint) -> Result<Vec<f64>> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("RFF featurizer used before initialization".into()))?;
        p.validate()?;
        let u = [p.lat / 90.0, p.lon / 180.0];
        let amp = (2.0 / RFF_DIM as f64).sqrt();
        Ok((0..RFF_DIM)
            .map(|j| {
                let w = state.projection.row(j);
                amp * (w[0] * u[0] + w[1] * u[1] + state.phases[j]).cos()
            })
            .collect())
    }
}

/// Precomputed feature vectors keyed by record id; never trained.
#[derive(Clone, Serialize, Deserialize)]
pub struct FrozenTable {
    pub source: Option<PathBuf>,
    #[serde(skip)]
    table: Arc<HashMap<String, Vec<f64>>>,
    #[serde(skip)]
    dim: usize,
}

impl fmt::Debug for FrozenTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FrozenTable")
            .field("source", &self.source)
            .field("entries", &self.table.len())
            .field("dim", &self.dim)
            .finish()
    }
}

impl FrozenTable {
    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let dim = entries.first().map_or(0, |(_, v)| v.len());
        if dim == 0 {
            return Err(Error::Validation("frozen table is empty".into()));
        }
        let mut table = HashMap::with_capacity(entries.len());
        for (k, v) in entries {
            if v.len() != dim {
                return Err(Error::Validation(format!(
                    "frozen vector for `{k}` has length {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("frozen vector for `{k}`")));
            }
            if table.insert(k.clone(), v).is_some() {
                return Err(Error::Validation(format!("duplicate frozen key `{k}`")));
            }
        }
        Ok(Self {
            source: None,
            table: Arc::new(table),
            dim,
        })
    }

    /// Reads `key,f0,…,f{D-1}` CSV.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| csv_error(path, 0, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, 1, e))?.clone();
        if headers.get(0) != Some("key") {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "first column must be `key`".into(),
            });
        }
        for (i, h) in headers.iter().skip(1).enumerate() {
            if h != format!("f{i}") {
                return Err(Error::Parse {
                    path: path.into(),
                    line: 1,
                    msg: format!("expected column `f{i}`, found `{h}`"),
                });
            }
        }
        let dim = headers.len() - 1;
        let mut entries = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| csv_error(path, line, e))?;
            if rec.len() != dim + 1 {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!("expected {} fields, found {}", dim + 1, rec.len()),
                });
            }
            let values = rec
                .iter()
                .skip(1)
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    path: path.into(),
                    line,
                    msg: e.to_string(),
                })?;
            entries.push((rec[0].to_string(), values));
        }
        let mut t = Self::from_entries(entries).map_err(|e| Error::Parse {
            path: path.into(),
            line: 0,
            msg: e.to_string(),
        })?;
        t.source = Some(path.to_path_buf());
        Ok(t)
    }

    /// Re-reads the table from `source` (tables are not serialized).
    pub fn reload(&mut self) -> Result<()> {
        let path = self
            .source
            .clone()
            .ok_or_else(|| Error::State("frozen table has no source file".into()))?;
        *self = Self::load_csv(&path)?;
        Ok(())
    }

    pub fn is_loaded(&self) -> bool {
        !self.table.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn lookup(&self, key: &str) -> Result<&[f64]> {
        self.table
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Order-independent fingerprint of the stored bytes.
    pub fn fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        let mut out: Vec<_> = self
            .table
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| x.to_bits()).collect()))
            .collect();
        out.sort();
        out
    }
}

pub(crate) fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(line);
    Error::Parse {
        path: path.into(),
        line,
        msg: e.to_string(),
    }
}

/// Learnable per-domain embedding rows (ablation encoder).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbedding {
    pub table: Tensor2,
}

impl DomainEmbedding {
    /// Rows uniform in `[-1, 1]` (elementwise lookup, fan-in 1).
    pub fn init(num_domains: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::DOMAIN_EMBED);
        let dist = Uniform::new_inclusive(-1.0, 1.0).expect("finite range");
        let data = (0..num_domains * dim).map(|_| dist.sample(&mut rng)).collect();
        Self {
            table: Tensor2::from_vec(num_domains, dim, data).expect("sized buffer"),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.table.rows()
    }

    pub fn embed(&self, domain: usize) -> Result<&[f64]> {
        if domain >= self.table.rows() {
            return Err(Error::Index {
                index: domain,
                bound: self.table.rows(),
                context: "domain embedding",
            });
        }
        Ok(self.table.row(domain))
    }
}

/// Functional wrapper matching the other featurizers.
pub fn embed_domain(d: usize, f: &DomainEmbedding) -> Result<Vec<f64>> {
    f.embed(d).map(<[f64]>::to_vec)
}

pub fn rff_featurize(p: &GeoPoint, f: &RffFeaturizer) -> Result<Vec<f64>> {
    f.featurize(p)
}

pub fn frozen_lookup(key: &str, f: &FrozenTable) -> Result<Vec<f64>> {
    f.lookup(key).map(<[f64]>::to_vec)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturizerKind {
    Wrap,
    Rff,
    FrozenTable,
    DomainEmbed,
}

impl FeaturizerKind {
    /// Featurizers that take a coordinate and therefore have a map.
    pub fn is_coordinate_based(self) -> bool {
        matches!(self, FeaturizerKind::Wrap | FeaturizerKind::Rff)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Featurizer {
    Wrap,
    Rff(RffFeaturizer),
    FrozenTable(FrozenTable),
    DomainEmbed(DomainEmbedding),
}

impl Featurizer {
    pub fn kind(&self) -> FeaturizerKind {
        match self {
            Featurizer::Wrap => FeaturizerKind::Wrap,
            Featurizer::Rff(_) => FeaturizerKind::Rff,
            Featurizer::FrozenTable(_) => FeaturizerKind::FrozenTable,
            Featurizer::DomainEmbed(_) => FeaturizerKind::DomainEmbed,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Featurizer::Wrap => WRAP_DIM,
            Featurizer::Rff(_) => RFF_DIM,
            Featurizer::FrozenTable(t) => t.dim(),
            Featurizer::DomainEmbed(e) => e.table.cols(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Featurizer::DomainEmbed(_))
    }

    fn featurize_into(&self, input: &LocationInput<'_>, out: &mut [f64]) -> Result<()> {
        match (self, input) {
            (Featurizer::Wrap, LocationInput::Point(p)) => out.copy_from_slice(&wrap_featurize(p)?),
            (Featurizer::Rff(f), LocationInput::Point(p)) => out.copy_from_slice(&f.featurize(p)?),
            (Featurizer::FrozenTable(t), LocationInput::Key(k)) => {
                out.copy_from_slice(t.lookup(k)?)
            }
            (Featurizer::DomainEmbed(e), LocationInput::Domain(d)) => {
                out.copy_from_slice(e.embed(*d)?)
            }
            (f, i) => {
                return Err(Error::Usage(format!(
                    "{:?} featurizer cannot consume a {} input",
                    f.kind(),
                    i.describe()
                )))
            }
        }
        Ok(())
    }

    pub fn featurize_batch(&self, inputs: &[LocationInput<'_>]) -> Result<Tensor2> {
        let mut out = Tensor2::zeros(inputs.len(), self.output_dim());
        for (i, input) in inputs.iter().enumerate() {
            self.featurize_into(input, out.row_mut(i))?;
        }
        Ok(out)
    }
}

impl Parameters for Featurizer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        if let Featurizer::DomainEmbed(e) = self {
            out.push((join(prefix, "table"), &e.table));
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        if let Featurizer::DomainEmbed(e) = self {
            out.push(&mut e.table);
        }
    }
}

/// What a featurizer consumes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocationInput<'a> {
    Point(GeoPoint),
    Key(&'a str),
    Domain(usize),
}

impl LocationInput<'_> {
    fn describe(&self) -> &'static str {
        match self {
            LocationInput::Point(_) => "coordinate",
            LocationInput::Key(_) => "record key",
            LocationInput::Domain(_) => "domain id",
        }
    }
}

/// Featurizer followed by a residual head: one ReLU input layer then
/// `blocks` residual blocks, all `width` wide.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocationEncoder {
    pub featurizer: Featurizer,
    pub head: Sequential,
}

/// Cached state of one encoder forward pass.
#[derive(Debug)]
pub struct EncoderTape {
    head: Tape,
    domains: Option<Vec<usize>>,
}

impl LocationEncoder {
    pub fn new(featurizer: Featurizer, width: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::ENCODER);
        let mut layers = vec![Layer::Linear {
            linear: Linear::init(featurizer.output_dim(), width, &mut rng),
            activation: Activation::Relu,
        }];
        for _ in 0..blocks {
            layers.push(Layer::Residual(ResidualBlock::init(width, &mut rng)));
        }
        Self {
            featurizer,
            head: Sequential::new(layers).expect("consistent widths"),
        }
    }

    /// Standard 256-wide, 4-block encoder.
    pub fn standard(featurizer: Featurizer, seed: u64) -> Self {
        Self::new(featurizer, EMBED_DIM, NUM_BLOCKS, seed)
    }

    pub fn output_dim(&self) -> usize {
        self.head.out_dim().unwrap_or(0)
    }

    pub fn kind(&self) -> FeaturizerKind {
        self.featurizer.kind()
    }

    /// Inference-only embedding of a batch.
    pub fn encode(&self, inputs: &[LocationInput<'_>]) -> Result<Tensor2> {
        let feats = self.featurizer.featurize_batch(inputs)?;
        self.head.infer(&feats)
    }

    pub fn forward(&self, inputs: &[LocationInput<'_>]) -> Result<(Tensor2, EncoderTape)> {
        let feats = self.featurizer.featurize_batch(inputs)?;
        let (out, head) = self.head.forward(&feats)?;
        let domains = match self.featurizer {
            Featurizer::DomainEmbed(_) => Some(
                inputs
                    .iter()
                    .map(|i| match i {
                        LocationInput::Domain(d) => *d,
                        _ => unreachable!("checked by featurize_batch"),
                    })
                    .collect(),
            ),
            _ => None,
        };
        Ok((out, EncoderTape { head, domains }))
    }

    /// Parameter gradients for the trainable parts (head, and the
    /// embedding table for the domain-embedding encoder).
    pub fn backward(&self, tape: EncoderTape, grad: &Tensor2) -> Result<LocationEncoder> {
        let featurizer = match (&self.featurizer, tape.domains) {
            (Featurizer::DomainEmbed(e), Some(domains)) => {
                let (head, gin) = self.head.backprop(tape.head, grad)?;
                let mut table = Tensor2::zeros(e.table.rows(), e.table.cols());
                for (row, d) in domains.iter().enumerate() {
                    for (t, g) in table.row_mut(*d).iter_mut().zip(gin.row(row)) {
                        *t += g;
                    }
                }
                return Ok(LocationEncoder {
                    featurizer: Featurizer::DomainEmbed(DomainEmbedding { table }),
                    head,
                });
            }
            (f, _) => f.clone(),
        };
        let head = self.head.backprop_params(tape.head, grad)?;
        Ok(LocationEncoder { featurizer, head })
    }
}

impl Parameters for LocationEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        self.featurizer.visit(&join(prefix, "featurizer"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        self.featurizer.visit_mut(out);
        self.head.visit_mut(out);
    }
}

/// Single-point convenience over [`LocationEncoder::encode`].
pub fn encode_location(enc: &LocationEncoder, input: LocationInput<'_>) -> Result<Vec<f64>> {
    Ok(enc.encode(&[input])?.into_vec())
}

/// One linear layer from embeddings to domain logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPredictor {
    pub linear: Linear,
}

impl DomainPredictor {
    pub fn new(embed_dim: usize, num_domains: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::DOMAIN_PREDICTOR);
        Self {
            linear: Linear::init(embed_dim, num_domains, &mut rng),
        }
    }

    pub fn num_domains(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn predict(&self, embeddings: &Tensor2) -> Result<Tensor2> {
        self.linear.forward(embeddings)
    }

    pub fn backward(&self, embeddings: &Tensor2, grad: &Tensor2) -> Result<(Self, Tensor2)> {
        let (g, gx) = self.linear.backward(embeddings, grad)?;
        Ok((Self { linear: g }, gx))
    }
}

pub fn predict_domain(embedding: &[f64], dp: &DomainPredictor) -> Result<Vec<f64>> {
    Ok(dp.predict(&Tensor2::row_vector(embedding))?.into_vec())
}

impl Parameters for DomainPredictor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        self.linear.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        self.linear.visit_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{
        adam_step, cross_entropy, finite_diff_grad, max_relative_error, AdamState,
    };

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn wrap_closed_forms() {
        let f = wrap_featurize(&GeoPoint::new(0.0, 0.0).unwrap()).unwrap();
        assert!(close(&f, &[0.0, 1.0, 0.0, 1.0], 1e-12));
        let f = wrap_featurize(&GeoPoint::new(90.0, 0.0).unwrap()).unwrap();
        assert!(close(&f, &[1.0, 0.0, 0.0, 1.0], 1e-12));
        let f = wrap_featurize(&GeoPoint::new(45.0, -90.0).unwrap()).unwrap();
        let h = 0.5f64.sqrt();
        assert!(close(&f, &[h, h, -1.0, 0.0], 1e-12));
    }

    #[test]
    fn invalid_points_rejected() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
        let bad = GeoPoint { lat: 100.0, lon: 0.0 };
        assert!(matches!(wrap_featurize(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn rff_bounds_determinism_and_state() {
        let f = RffFeaturizer::new(1.0, 3).unwrap();
        let p = GeoPoint::new(-33.9, 151.2).unwrap();
        let a = f.featurize(&p).unwrap();
        assert_eq!(a, RffFeaturizer::new(1.0, 3).unwrap().featurize(&p).unwrap());
        assert_eq!(a.len(), RFF_DIM);
        let bound = (2.0 / 512.0f64).sqrt();
        assert!(a.iter().all(|v| v.abs() <= bound + 1e-15));
        let raw = RffFeaturizer::uninitialized(1.0, 3);
        assert!(matches!(raw.featurize(&p), Err(Error::State(_))));
    }

    #[test]
    fn frozen_table_semantics() {
        let t = FrozenTable::from_entries(vec![
            ("a".into(), vec![1.0, 2.0]),
            ("b".into(), vec![3.0, 4.0]),
        ])
        .unwrap();
        assert_eq!(frozen_lookup("b", &t).unwrap(), vec![3.0, 4.0]);
        assert!(matches!(frozen_lookup("zz", &t), Err(Error::MissingKey(k)) if k == "zz"));
        assert!(FrozenTable::from_entries(vec![
            ("a".into(), vec![1.0]),
            ("b".into(), vec![1.0, 2.0]),
        ])
        .is_err());
    }

    #[test]
    fn kind_mismatch_is_usage_error() {
        let enc = LocationEncoder::new(Featurizer::Wrap, 8, 1, 0);
        assert!(matches!(
            enc.encode(&[LocationInput::Domain(0)]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn every_featurizer_yields_256() {
        let p = GeoPoint::new(12.0, 34.0).unwrap();
        let table =
            FrozenTable::from_entries(vec![("k".into(), vec![0.5; 16])]).unwrap();
        let cases: Vec<(Featurizer, LocationInput)> = vec![
            (Featurizer::Wrap, LocationInput::Point(p)),
            (
                Featurizer::Rff(RffFeaturizer::new(1.0, 1).unwrap()),
                LocationInput::Point(p),
            ),
            (Featurizer::FrozenTable(table), LocationInput::Key("k")),
            (
                Featurizer::DomainEmbed(DomainEmbedding::init(3, EMBED_DIM, 1)),
                LocationInput::Domain(2),
            ),
        ];
        for (f, input) in cases {
            let enc = LocationEncoder::standard(f, 11);
            let e = encode_location(&enc, input).unwrap();
            assert_eq!(e.len(), 256);
            assert_eq!(e, encode_location(&enc, input).unwrap());
        }
    }

    #[test]
    fn frozen_featurizers_expose_only_head_params() {
        let table = FrozenTable::from_entries(vec![("k".into(), vec![0.5; 3])]).unwrap();
        for f in [
            Featurizer::Wrap,
            Featurizer::Rff(RffFeaturizer::new(1.0, 1).unwrap()),
            Featurizer::FrozenTable(table),
        ] {
            let enc = LocationEncoder::new(f, 8, 1, 0);
            assert!(enc
                .named_params()
                .iter()
                .all(|(n, _)| n.starts_with("head.")));
        }
        let enc = LocationEncoder::new(
            Featurizer::DomainEmbed(DomainEmbedding::init(2, 8, 0)),
            8,
            1,
            0,
        );
        assert_eq!(enc.named_params()[0].0, "featurizer.table");
    }

    #[test]
    fn embed_domain_indexing() {
        let e = DomainEmbedding::init(3, 4, 5);
        assert_eq!(embed_domain(1, &e).unwrap(), embed_domain(1, &e).unwrap());
        assert_ne!(embed_domain(0, &e).unwrap(), embed_domain(1, &e).unwrap());
        assert!(matches!(embed_domain(3, &e), Err(Error::Index { .. })));
    }

    #[test]
    fn domain_predictor_is_affine() {
        let mut dp = DomainPredictor::new(6, 3, 2);
        dp.linear.bias = Tensor2::row_vector(&[0.1, -0.2, 0.3]);
        let a = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        let b = [1.0, -0.5, 0.3, 0.2, 0.7, -1.0];
        let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let pa = predict_domain(&a, &dp).unwrap();
        let pb = predict_domain(&b, &dp).unwrap();
        let pab = predict_domain(&ab, &dp).unwrap();
        for j in 0..3 {
            let rhs = pa[j] + pb[j] - dp.linear.bias.get(0, j);
            assert!((pab[j] - rhs).abs() < 1e-12);
        }
        let zero = DomainPredictor {
            linear: Linear::zeros(6, 3),
        };
        assert_eq!(predict_domain(&a, &zero).unwrap(), vec![0.0; 3]);
        assert!(predict_domain(&a[..5], &dp).is_err());
    }

    #[test]
    fn domain_loss_gradient_matches_finite_differences() {
        let dp = DomainPredictor::new(5, 3, 4);
        let emb = Tensor2::from_vec(2, 5, (0..10).map(|i| (i as f64).sin()).collect()).unwrap();
        let targets = [2, 0];
        let logits = dp.predict(&emb).unwrap();
        let l = cross_entropy(&logits, &targets).unwrap();
        let (g, _) = dp.backward(&emb, &l.grad).unwrap();
        let fd = finite_diff_grad(
            |th| {
                let mut d = dp.clone();
                d.assign_flat(th)?;
                Ok(cross_entropy(&d.predict(&emb)?, &targets)?.loss)
            },
            &dp.flatten(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&g.flatten(), &fd, 1e-7) < 1e-4);
    }

    #[test]
    fn domain_predictor_separates_linearly_separable_embeddings() {
        // Two domains split by the sign of the first coordinate.
        let n = 40;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let s = if i % 2 == 0 { 1.0 } else { -1.0 };
            let mag = 0.2 + (i as f64) / n as f64;
            let mut v = vec![0.0; EMBED_DIM];
            v[0] = s * mag;
            v[1] = ((i * 7) as f64).sin();
            rows.push(v);
            labels.push(usize::from(s < 0.0));
        }
        let emb = Tensor2::from_rows(&rows).unwrap();
        let mut dp = DomainPredictor::new(EMBED_DIM, 2, 0);
        let mut st = AdamState::new(&dp);
        for _ in 0..200 {
            let l = cross_entropy(&dp.predict(&emb).unwrap(), &labels).unwrap();
            let (g, _) = dp.backward(&emb, &l.grad).unwrap();
            adam_step(&mut dp, &g, &mut st, 1e-2).unwrap();
        }
        let logits = dp.predict(&emb).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let r = logits.row(i);
            let pred = usize::from(r[1] > r[0]);
            assert_eq!(pred, y);
        }
    }
}
