//! Joint training of location encoder, fusion head and domain predictor:
//! `L_TP + α·L_DP`, GroupDRO reweighting, checkpoint selection, JSON
//! checkpoints and the α sweep.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, Record, SynthConfig, TaskKind, Target};
use crate::error::{Error, Result};
use crate::eval::{group_metrics, GroupMetrics};
use crate::fusion::{argmax, FusionHead, FusionKind, FusionSpec, Targets};
use crate::locenc::{
    DomainEmbedding, DomainPredictor, Featurizer, FeaturizerKind, FrozenTable, LocationEncoder,
    LocationInput, RffFeaturizer, EMBED_DIM, NUM_BLOCKS,
};
use crate::math::{
    adam_step, cross_entropy, join, lr_at_epoch, stream_rng, streams, AdamState, Parameters,
    Tensor2,
};

pub const DEFAULT_ALPHA: f64 = 0.2;
pub const DEFAULT_SWEEP_ALPHAS: [f64; 5] = [0.0, 0.001, 0.01, 0.1, 0.2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    HighestValMetric,
    LowestValLoss,
    HighestValWorstGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Erm,
    GroupDro,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the domain-prediction loss. Absent means 0.2 with a
    /// location encoder and 0 without one.
    pub alpha: Option<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay: f64,
    pub dp_lr_factor: f64,
    pub seed: u64,
    pub objective: Objective,
    pub groupdro_eta: f64,
    pub d3g_lambda: f64,
    pub d3g_beta: f64,
    pub selection: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: None,
            epochs: 20,
            batch_size: 64,
            lr0: 1e-3,
            decay: 0.96,
            dp_lr_factor: 0.1,
            seed: 0,
            objective: Objective::Erm,
            groupdro_eta: 0.01,
            d3g_lambda: 0.5,
            d3g_beta: 0.8,
            selection: Selection::HighestValMetric,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `None` trains on image features alone.
    pub encoder: Option<FeaturizerKind>,
    pub fusion: FusionKind,
    pub width: usize,
    pub blocks: usize,
    pub rff_sigma: f64,
    pub frozen_table: Option<PathBuf>,
    pub d3g_projections: usize,
    pub d3g_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: None,
            fusion: FusionKind::None,
            width: EMBED_DIM,
            blocks: NUM_BLOCKS,
            rff_sigma: 1.0,
            frozen_table: None,
            d3g_projections: 4,
            d3g_temperature: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.encoder, self.fusion) {
            (None, FusionKind::None) => {}
            (Some(_), FusionKind::None) => {
                return Err(Error::Config(
                    "a location encoder needs a fusion head (concat, film, geo_priors or d3g)"
                        .into(),
                ))
            }
            (None, f) => {
                return Err(Error::Config(format!(
                    "{} fusion needs a location encoder",
                    f.tag()
                )))
            }
            (Some(_), _) => {}
        }
        if self.width == 0 {
            return Err(Error::Config("encoder width must be positive".into()));
        }
        if self.encoder == Some(FeaturizerKind::FrozenTable) && self.frozen_table.is_none() {
            return Err(Error::Config("frozen_table encoder needs a frozen_table path".into()));
        }
        if !(self.rff_sigma > 0.0) || !self.rff_sigma.is_finite() {
            return Err(Error::Config(format!("rff_sigma = {}", self.rff_sigma)));
        }
        Ok(())
    }
}

impl TrainConfig {
    /// DP weight actually used with the given model.
    pub fn effective_alpha(&self, model: &ModelConfig) -> f64 {
        match (self.alpha, model.encoder) {
            (Some(a), _) => a,
            (None, Some(_)) => DEFAULT_ALPHA,
            (None, None) => 0.0,
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let alpha = self.effective_alpha(model);
        if !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
        }
        if alpha > 0.0 && model.encoder.is_none() {
            return Err(Error::Config(
                "alpha > 0 needs a location encoder to attach the domain predictor to".into(),
            ));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        for (name, v) in [("lr0", self.lr0), ("dp_lr_factor", self.dp_lr_factor)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.objective == Objective::GroupDro && !(self.groupdro_eta > 0.0) {
            return Err(Error::Config(format!(
                "groupdro_eta must be positive, got {}",
                self.groupdro_eta
            )));
        }
        if !(0.0..=1.0).contains(&self.d3g_beta) {
            return Err(Error::Config(format!("d3g_beta must be in [0, 1], got {}", self.d3g_beta)));
        }
        if !(self.d3g_lambda >= 0.0) {
            return Err(Error::Config(format!("d3g_lambda must be >= 0, got {}", self.d3g_lambda)));
        }
        Ok(())
    }

    /// Method label: the fusion (or baseline objective), plus `+GroupDRO`
    /// for a fused model trained with GroupDRO and `+DP` when α > 0.
    pub fn method_tag(&self, model: &ModelConfig) -> String {
        let mut tag = match (model.fusion, self.objective) {
            (FusionKind::None, Objective::GroupDro) => "GroupDRO".to_string(),
            (f, Objective::Erm) => f.tag().to_string(),
            (f, Objective::GroupDro) => format!("{}+GroupDRO", f.tag()),
        };
        if self.effective_alpha(model) > 0.0 {
            tag.push_str("+DP");
        }
        tag
    }
}

/// Dataset facts a model is built against.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMeta {
    pub task: TaskKind,
    pub num_domains: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl DataMeta {
    pub fn of(bundle: &DatasetBundle) -> Self {
        DataMeta {
            task: bundle.task,
            num_domains: bundle.num_domains,
            num_classes: bundle.num_classes,
            feature_dim: bundle.feature_dim,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.num_classes,
            TaskKind::Regression => 1,
        }
    }
}

/// Standardization of regression targets, fitted on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    pub fn fit(records: &[Record]) -> Result<Self> {
        let v: Vec<f64> = records.iter().map(|r| r.target.value()).collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Degenerate("regression targets have zero variance".into()));
        }
        Ok(TargetScale {
            mean,
            std: var.sqrt(),
        })
    }
}

/// Trainable components. The [`Parameters`] view covers the task path
/// (encoder and fusion head); the domain predictor has its own optimizer.
#[derive(Clone, Debug)]
pub struct Model {
    pub meta: DataMeta,
    pub encoder: Option<LocationEncoder>,
    pub fusion: FusionHead,
    pub domain_predictor: Option<DomainPredictor>,
    pub target_scale: Option<TargetScale>,
}

impl Parameters for Model {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.fusion.visit(&join(prefix, "fusion"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        self.encoder.visit_mut(out);
        self.fusion.visit_mut(out);
    }
}

impl Model {
    /// Fresh model; every component is seeded from `train.seed`.
    pub fn new(meta: DataMeta, model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        model.validate()?;
        let seed = train.seed;
        let encoder = match model.encoder {
            None => None,
            Some(kind) => {
                let featurizer = match kind {
                    FeaturizerKind::Wrap => Featurizer::Wrap,
                    FeaturizerKind::Rff => Featurizer::Rff(RffFeaturizer::new(model.rff_sigma, seed)?),
                    FeaturizerKind::FrozenTable => {
                        let path = model.frozen_table.as_ref().expect("validated");
                        Featurizer::FrozenTable(FrozenTable::load_csv(path)?)
                    }
                    FeaturizerKind::DomainEmbed => Featurizer::DomainEmbed(DomainEmbedding::init(
                        meta.num_domains,
                        model.width,
                        seed,
                    )),
                };
                Some(LocationEncoder::new(featurizer, model.width, model.blocks, seed))
            }
        };
        let spec = FusionSpec {
            kind: model.fusion,
            feature_dim: meta.feature_dim,
            embed_dim: model.width,
            out_dim: meta.out_dim(),
            num_domains: meta.num_domains,
            projections: model.d3g_projections,
            temperature: model.d3g_temperature,
            beta_interp: train.d3g_beta,
            consistency: train.d3g_lambda,
        };
        if model.fusion == FusionKind::GeoPriors && meta.task == TaskKind::Regression {
            return Err(Error::Config(
                "Geo Priors fusion is only applicable to classification".into(),
            ));
        }
        let fusion = FusionHead::new(&spec, seed)?;
        let domain_predictor = encoder
            .as_ref()
            .map(|_| DomainPredictor::new(model.width, meta.num_domains, seed));
        Ok(Model {
            meta,
            encoder,
            fusion,
            domain_predictor,
            target_scale: None,
        })
    }

    pub fn location_inputs<'a>(&self, records: &[&'a Record]) -> Vec<LocationInput<'a>> {
        let kind = self.encoder.as_ref().map(|e| e.kind());
        records
            .iter()
            .map(|r| match kind {
                Some(FeaturizerKind::FrozenTable) => LocationInput::Key(&r.key),
                Some(FeaturizerKind::DomainEmbed) => LocationInput::Domain(r.domain),
                _ => LocationInput::Point(r.point),
            })
            .collect()
    }

    /// Location embeddings of `records`.
    pub fn embed(&self, records: &[&Record]) -> Result<Option<Tensor2>> {
        match &self.encoder {
            None => Ok(None),
            Some(enc) => Ok(Some(enc.encode(&self.location_inputs(records))?)),
        }
    }

    /// Raw head outputs (class scores, or standardized regression values).
    pub fn scores(&self, records: &[&Record]) -> Result<Tensor2> {
        let img = features(records)?;
        let loc = self.embed(records)?;
        self.fusion.predict(&img, loc.as_ref())
    }

    pub fn predict(&self, records: &[Record]) -> Result<Vec<Target>> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(EVAL_CHUNK) {
            let refs: Vec<&Record> = chunk.iter().collect();
            let s = self.scores(&refs)?;
            for i in 0..s.rows() {
                out.push(match self.meta.task {
                    TaskKind::Classification => Target::Class(argmax(s.row(i))),
                    TaskKind::Regression => {
                        let scale = self.target_scale.unwrap_or(TargetScale { mean: 0.0, std: 1.0 });
                        Target::Value(s.get(i, 0) * scale.std + scale.mean)
                    }
                });
            }
        }
        Ok(out)
    }

    pub fn evaluate(&self, records: &[Record]) -> Result<GroupMetrics> {
        let preds = self.predict(records)?;
        let targets: Vec<Target> = records.iter().map(|r| r.target).collect();
        let domains: Vec<usize> = records.iter().map(|r| r.domain).collect();
        group_metrics(&preds, &targets, &domains, self.meta.task)
    }

    fn targets(&self, records: &[&Record]) -> Result<BatchTargets> {
        match self.meta.task {
            TaskKind::Classification => records
                .iter()
                .map(|r| {
                    r.target.class().ok_or_else(|| {
                        Error::Schema(format!("record {} has a non-class target", r.key))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(BatchTargets::Classes),
            TaskKind::Regression => {
                let s = self.target_scale.unwrap_or(TargetScale { mean: 0.0, std: 1.0 });
                let v = records
                    .iter()
                    .map(|r| (r.target.value() - s.mean) / s.std)
                    .collect();
                Ok(BatchTargets::Values(Tensor2::from_vec(records.len(), 1, v)?))
            }
        }
    }
}

const EVAL_CHUNK: usize = 2048;

fn features(records: &[&Record]) -> Result<Tensor2> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let mut data = Vec::with_capacity(records.len() * dim);
    for r in records {
        if r.features.len() != dim {
            return Err(Error::shape(format!(
                "record {} has {} features, expected {dim}",
                r.key,
                r.features.len()
            )));
        }
        data.extend_from_slice(&r.features);
    }
    Tensor2::from_vec(records.len(), dim, data)
}

enum BatchTargets {
    Classes(Vec<usize>),
    Values(Tensor2),
}

impl BatchTargets {
    fn view(&self) -> Targets<'_> {
        match self {
            BatchTargets::Classes(c) => Targets::Classes(c),
            BatchTargets::Values(v) => Targets::Values(v),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses and gradients.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Weighted task loss.
    pub task: f64,
    /// Domain-prediction cross-entropy (0 when α = 0).
    pub dp: f64,
    pub total: f64,
}

/// Losses of one batch together with gradients for the task path and the
/// domain predictor.
pub struct BatchGradients {
    pub losses: LossBreakdown,
    pub row_losses: Vec<f64>,
    pub task: Model,
    pub dp: Option<DomainPredictor>,
}

/// Row weights: `1/B` for ERM, `w_g/n_g` under group weights.
pub fn row_weights(domains: &[usize], group_weights: Option<&GroupWeights>) -> Vec<f64> {
    let n = domains.len();
    match group_weights {
        None => vec![1.0 / n as f64; n],
        Some(w) => {
            let mut counts: HashMap<usize, usize> = HashMap::new();
            for d in domains {
                *counts.entry(*d).or_default() += 1;
            }
            domains
                .iter()
                .map(|d| w.weights[*d] / counts[d] as f64)
                .collect()
        }
    }
}

/// Per-group mean of row losses; groups absent from the batch get 0.
pub fn group_losses(row_losses: &[f64], domains: &[usize], num_groups: usize) -> Vec<f64> {
    let mut sum = vec![0.0; num_groups];
    let mut count = vec![0usize; num_groups];
    for (l, d) in row_losses.iter().zip(domains) {
        sum[*d] += l;
        count[*d] += 1;
    }
    sum.iter()
        .zip(&count)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 })
        .collect()
}

/// Forward and backward pass over one batch. Row losses are combined with
/// `weights` when given and with `1/B` otherwise.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Record],
    alpha: f64,
    weights: Option<&[f64]>,
) -> Result<BatchGradients> {
    if batch.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let img = features(batch)?;
    let targets = model.targets(batch)?;
    let domains: Vec<usize> = batch.iter().map(|r| r.domain).collect();
    if let Some(&d) = domains.iter().find(|&&d| d >= model.meta.num_domains) {
        return Err(Error::Index {
            index: d,
            bound: model.meta.num_domains,
            context: "record domain",
        });
    }
    let (emb, tape) = match &model.encoder {
        Some(enc) => {
            let (e, t) = enc.forward(&model.location_inputs(batch))?;
            (Some(e), Some(t))
        }
        None => (None, None),
    };
    let pass = model
        .fusion
        .train_forward(&img, emb.as_ref(), targets.view(), Some(&domains))?;
    let row_losses = pass.row_losses();
    let uniform;
    let weights = match weights {
        Some(w) => w,
        None => {
            uniform = vec![1.0 / batch.len() as f64; batch.len()];
            &uniform
        }
    };
    let task_loss: f64 = row_losses.iter().zip(weights).map(|(l, w)| l * w).sum();
    let (fusion_grads, mut gloc) = pass.backward(&model.fusion, weights)?;

    let mut dp_loss = 0.0;
    let mut dp_grads = None;
    if alpha > 0.0 {
        let (dp, emb) = match (&model.domain_predictor, &emb) {
            (Some(dp), Some(emb)) => (dp, emb),
            _ => {
                return Err(Error::Config(
                    "alpha > 0 needs a location encoder and domain predictor".into(),
                ))
            }
        };
        let out = cross_entropy(&dp.predict(emb)?, &domains)?;
        dp_loss = out.loss;
        let mut g = out.grad;
        g.scale(alpha);
        let (dg, gemb) = dp.backward(emb, &g)?;
        dp_grads = Some(dg);
        match gloc.as_mut() {
            Some(gl) => gl.add_assign(&gemb)?,
            None => gloc = Some(gemb),
        }
    }

    let encoder_grads = match (&model.encoder, tape) {
        (Some(enc), Some(tape)) => {
            let g = gloc.ok_or_else(|| {
                Error::Config("location encoder receives no gradient from this fusion".into())
            })?;
            Some(enc.backward(tape, &g)?)
        }
        _ => None,
    };
    Ok(BatchGradients {
        losses: LossBreakdown {
            task: task_loss,
            dp: dp_loss,
            total: task_loss + alpha * dp_loss,
        },
        row_losses,
        task: Model {
            meta: model.meta,
            encoder: encoder_grads,
            fusion: fusion_grads,
            domain_predictor: None,
            target_scale: None,
        },
        dp: dp_grads,
    })
}

/// `L_TP + α·L_DP` for a batch under the ERM weighting.
pub fn compute_losses(batch: &[&Record], model: &Model, alpha: f64) -> Result<LossBreakdown> {
    Ok(batch_gradients(model, batch, alpha, None)?.losses)
}

/// `L_pred + λ·L_rel (+ α·L_DP)` for a D³G model.
pub fn d3g_training_loss(batch: &[&Record], model: &Model, alpha: f64) -> Result<LossBreakdown> {
    if model.fusion.kind() != FusionKind::D3g {
        return Err(Error::Config(format!(
            "D3G loss requested for a {} model",
            model.fusion.kind().tag()
        )));
    }
    compute_losses(batch, model, alpha)
}

// ---------------------------------------------------------------------------
// GroupDRO.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    pub weights: Vec<f64>,
}

impl GroupWeights {
    pub fn uniform(groups: usize) -> Self {
        GroupWeights {
            weights: vec![1.0 / groups as f64; groups],
        }
    }
}

/// Exponentiated-gradient step `w'_g ∝ w_g·exp(η·L_g)`.
pub fn groupdro_reweight(w: &GroupWeights, losses: &[f64], eta: f64) -> Result<GroupWeights> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("eta must be positive, got {eta}")));
    }
    if losses.len() != w.weights.len() {
        return Err(Error::shape(format!(
            "{} group losses for {} groups",
            losses.len(),
            w.weights.len()
        )));
    }
    if let Some(l) = losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::NonFinite(format!("group loss {l}")));
    }
    // Shifting by the largest active exponent keeps exp() in range.
    let shift = losses
        .iter()
        .zip(&w.weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(l, _)| eta * l)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = losses
        .iter()
        .zip(&w.weights)
        .map(|(l, w)| if *w > 0.0 { w * (eta * l - shift).exp() } else { 0.0 })
        .collect();
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::NonFinite("group weights collapsed to zero".into()));
    }
    Ok(GroupWeights {
        weights: raw.into_iter().map(|v| v / sum).collect(),
    })
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub train_dp_loss: f64,
    pub val_loss: f64,
    pub val: GroupMetrics,
}

/// Values checkpoint selection looks at.
pub trait SelectionView {
    fn val_metric(&self) -> f64;
    fn val_worst(&self) -> f64;
    fn val_loss(&self) -> f64;
}

impl SelectionView for EpochRecord {
    fn val_metric(&self) -> f64 {
        self.val.average
    }
    fn val_worst(&self) -> f64 {
        self.val.worst
    }
    fn val_loss(&self) -> f64 {
        self.val_loss
    }
}

/// Epoch chosen by `criterion`; the earliest epoch wins ties.
pub fn select_checkpoint<H: SelectionView>(history: &[H], criterion: Selection) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::Validation("empty training history".into()));
    }
    let score = |h: &H| match criterion {
        Selection::HighestValMetric => h.val_metric(),
        Selection::HighestValWorstGroup => h.val_worst(),
        Selection::LowestValLoss => -h.val_loss(),
    };
    let mut best = 0;
    for (i, h) in history.iter().enumerate().skip(1) {
        if score(h) > score(&history[best]) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: Model,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub selected_epoch: usize,
    /// Generator settings when the training data was synthetic.
    pub synth: Option<SynthConfig>,
    pub task_optimizer: Option<AdamState>,
    pub dp_optimizer: Option<AdamState>,
}

fn mean_val_loss(model: &Model, val: &[Record]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in val.chunks(EVAL_CHUNK) {
        let refs: Vec<&Record> = chunk.iter().collect();
        total += compute_losses(&refs, model, 0.0)?.task * refs.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Diverged { epoch, batch, msg },
        other => other,
    }
}

pub fn train_model(
    train: &[Record],
    val: &[Record],
    meta: DataMeta,
    model_config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<ModelBundle> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation(format!(
            "training needs non-empty splits ({} train, {} val records)",
            train.len(),
            val.len()
        )));
    }
    cfg.validate(model_config)?;
    let alpha = cfg.effective_alpha(model_config);
    let mut model = Model::new(meta, model_config, cfg)?;
    if meta.task == TaskKind::Regression {
        model.target_scale = Some(TargetScale::fit(train)?);
    }
    let mut task_opt = AdamState::new(&model);
    let mut dp_opt = model.domain_predictor.as_ref().map(AdamState::new);
    let mut group_weights = match cfg.objective {
        Objective::GroupDro => Some(GroupWeights::uniform(meta.num_domains)),
        Objective::Erm => None,
    };
    let mut rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, Model)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg.lr0, epoch, cfg.decay);
        let dp_lr = cfg.dp_lr_factor * lr;
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_task, mut sum_dp) = (0.0, 0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Record> = idx.iter().map(|&i| &train[i]).collect();
            let domains: Vec<usize> = batch.iter().map(|r| r.domain).collect();
            let step = match group_weights.as_mut() {
                None => batch_gradients(&model, &batch, alpha, None),
                Some(gw) => {
                    // Group losses come from the current parameters, so
                    // they are computed before the reweighted pass.
                    let probe = batch_gradients(&model, &batch, 0.0, None)
                        .map_err(|e| diverged(epoch, b, e))?;
                    let losses = group_losses(&probe.row_losses, &domains, meta.num_domains);
                    *gw = groupdro_reweight(gw, &losses, cfg.groupdro_eta)
                        .map_err(|e| diverged(epoch, b, e))?;
                    let w = row_weights(&domains, Some(gw));
                    batch_gradients(&model, &batch, alpha, Some(&w))
                }
            }
            .map_err(|e| diverged(epoch, b, e))?;
            if !step.losses.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    msg: format!("loss is {}", step.losses.total),
                });
            }
            adam_step(&mut model, &step.task, &mut task_opt, lr).map_err(|e| diverged(epoch, b, e))?;
            if let (Some(dp), Some(g), Some(opt)) =
                (model.domain_predictor.as_mut(), step.dp.as_ref(), dp_opt.as_mut())
            {
                adam_step(dp, g, opt, dp_lr).map_err(|e| diverged(epoch, b, e))?;
            }
            let n = batch.len() as f64;
            sum_total += step.losses.total * n;
            sum_task += step.losses.task * n;
            sum_dp += step.losses.dp * n;
        }
        let n = train.len() as f64;
        let val_metrics = model.evaluate(val)?;
        let val_loss = mean_val_loss(&model, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
                msg: format!("validation loss is {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: sum_total / n,
            train_task_loss: sum_task / n,
            train_dp_loss: sum_dp / n,
            val_loss,
            val: val_metrics,
        });
        if select_checkpoint(&history, cfg.selection)? == epoch {
            best = Some((epoch, model.clone()));
        }
    }
    let (selected_epoch, model) = best.expect("at least one epoch");
    Ok(ModelBundle {
        model,
        model_config: model_config.clone(),
        train_config: cfg.clone(),
        history,
        selected_epoch,
        synth: None,
        task_optimizer: Some(task_opt),
        dp_optimizer: dp_opt,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.

pub const CHECKPOINT_FORMAT: &str = "geofuse-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub meta: DataMeta,
    pub target_scale: Option<TargetScale>,
    pub selected_epoch: usize,
    pub history: Vec<EpochRecord>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    pub params: Vec<NamedTensor>,
    pub domain_predictor: Vec<NamedTensor>,
}

fn named_tensors<P: Parameters + ?Sized>(p: &P) -> Vec<NamedTensor> {
    p.named_params()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: [t.rows(), t.cols()],
            values: t.data().to_vec(),
        })
        .collect()
}

fn assign_named<P: Parameters + ?Sized>(p: &mut P, tensors: &[NamedTensor], what: &str) -> Result<()> {
    let expected: Vec<(String, [usize; 2])> = p
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, [t.rows(), t.cols()]))
        .collect();
    if expected.len() != tensors.len() {
        return Err(Error::Schema(format!(
            "{what}: checkpoint has {} tensors, model expects {}",
            tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), t) in expected.iter().zip(tensors) {
        if *name != t.name || *shape != t.shape || t.values.len() != shape[0] * shape[1] {
            return Err(Error::Schema(format!(
                "{what}: checkpoint tensor {} {:?} does not match model tensor {name} {shape:?}",
                t.name, t.shape
            )));
        }
    }
    for (dst, t) in p.params_mut().into_iter().zip(tensors) {
        *dst = Tensor2::from_vec(t.shape[0], t.shape[1], t.values.clone())?;
    }
    Ok(())
}

impl ModelBundle {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            meta: self.model.meta,
            target_scale: self.model.target_scale,
            selected_epoch: self.selected_epoch,
            history: self.history.clone(),
            synth: self.synth.clone(),
            params: named_tensors(&self.model),
            domain_predictor: self
                .model
                .domain_predictor
                .as_ref()
                .map(named_tensors)
                .unwrap_or_default(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema(format!("unknown checkpoint format {:?}", ck.format)));
        }
        let mut model = Model::new(ck.meta, &ck.model_config, &ck.train_config)?;
        model.target_scale = ck.target_scale;
        assign_named(&mut model, &ck.params, "task parameters")?;
        match model.domain_predictor.as_mut() {
            Some(dp) => assign_named(dp, &ck.domain_predictor, "domain predictor")?,
            None if ck.domain_predictor.is_empty() => {}
            None => {
                return Err(Error::Schema(
                    "checkpoint has a domain predictor but the model has none".into(),
                ))
            }
        }
        Ok(ModelBundle {
            model,
            model_config: ck.model_config,
            train_config: ck.train_config,
            history: ck.history,
            selected_epoch: ck.selected_epoch,
            synth: ck.synth,
            task_optimizer: None,
            dp_optimizer: None,
        })
    }
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&bundle.checkpoint())?;
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    ModelBundle::from_checkpoint(ck)
}

// ---------------------------------------------------------------------------
// α sweep.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub selected_epoch: usize,
    pub test: GroupMetrics,
}

/// One train + test evaluation per `(alpha, seed)` cell, run on up to
/// `threads` workers. Rows are ordered by `(alpha, seed)` whatever order
/// the cells finish in.
pub fn alpha_sweep(
    data: &DatasetBundle,
    model_config: &ModelConfig,
    base: &TrainConfig,
    alphas: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepRow>> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha and one seed".into()));
    }
    let cells: Vec<(f64, u64)> = alphas
        .iter()
        .flat_map(|&a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let meta = DataMeta::of(data);
    let run = |(alpha, seed): (f64, u64)| -> Result<SweepRow> {
        let cfg = TrainConfig {
            alpha: Some(alpha),
            seed,
            ..base.clone()
        };
        let bundle = train_model(&data.train, &data.val, meta, model_config, &cfg)?;
        Ok(SweepRow {
            alpha,
            seed,
            selected_epoch: bundle.selected_epoch,
            test: bundle.model.evaluate(&data.test)?,
        })
    };
    let results: Vec<Mutex<Option<Result<SweepRow>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let r = run(cells[i]);
                *results[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    let mut rows = results
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.seed.cmp(&b.seed)));
    Ok(rows)
}
