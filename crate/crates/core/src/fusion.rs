//! Fusion heads combining image features `g(x)` with a location embedding
//! `ℓ(φ, λ)`: concatenation, FiLM, Geo Priors and the relation-weighted
//! mixture of per-domain heads (D³G).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{
    cross_entropy_rows, join, log_sigmoid, mse_rows, sigmoid, softmax, softmax_rows, stream_rng,
    streams, Linear, Parameters, RowLosses, Tensor2,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Linear head on image features only (ERM / GroupDRO baselines).
    None,
    Concat,
    Film,
    GeoPriors,
    D3g,
}

impl FusionKind {
    pub fn uses_location(self) -> bool {
        self != FusionKind::None
    }

    pub fn tag(self) -> &'static str {
        match self {
            FusionKind::None => "ERM",
            FusionKind::Concat => "Concat",
            FusionKind::Film => "FiLM",
            FusionKind::GeoPriors => "GeoPriors",
            FusionKind::D3g => "D3G",
        }
    }
}

/// Supervision for one batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// `B × 1` standardized regression targets.
    Values(&'a Tensor2),
}

impl Targets<'_> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_losses(&self, outputs: &Tensor2) -> Result<RowLosses> {
        match self {
            Targets::Classes(c) => cross_entropy_rows(outputs, c),
            Targets::Values(v) => mse_rows(outputs, v),
        }
    }
}

/// Per-domain heads mixed by learned location–domain relations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct D3gHead {
    pub heads: Vec<Linear>,
    /// One learnable metadata embedding per head, `D × E`.
    pub metas: Tensor2,
    /// Projection vectors `w_r`, `R × E`.
    pub projections: Tensor2,
    pub temperature: f64,
    pub beta_interp: f64,
    /// Weight λ of the consistency loss over the other heads.
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FusionHead {
    Plain {
        h: Linear,
    },
    Concat {
        h: Linear,
    },
    Film {
        gamma: Linear,
        beta: Linear,
        h: Linear,
    },
    GeoPriors {
        h_image: Linear,
        h_loc: Linear,
    },
    D3g(D3gHead),
}

/// Shape and hyperparameters needed to build a head.
#[derive(Clone, Copy, Debug)]
pub struct FusionSpec {
    pub kind: FusionKind,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub out_dim: usize,
    pub num_domains: usize,
    pub projections: usize,
    pub temperature: f64,
    pub beta_interp: f64,
    pub consistency: f64,
}

impl FusionHead {
    pub fn new(spec: &FusionSpec, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, streams::FUSION);
        let (f, e, o) = (spec.feature_dim, spec.embed_dim, spec.out_dim);
        Ok(match spec.kind {
            FusionKind::None => FusionHead::Plain {
                h: Linear::init(f, o, &mut rng),
            },
            FusionKind::Concat => FusionHead::Concat {
                h: Linear::init(f + e, o, &mut rng),
            },
            FusionKind::Film => FusionHead::Film {
                gamma: Linear::init(e, f, &mut rng),
                beta: Linear::init(e, f, &mut rng),
                h: Linear::init(f, o, &mut rng),
            },
            FusionKind::GeoPriors => {
                if o < 2 {
                    return Err(Error::Config(
                        "Geo Priors fusion is only applicable to classification".into(),
                    ));
                }
                FusionHead::GeoPriors {
                    h_image: Linear::init(f, o, &mut rng),
                    h_loc: Linear::init(e, o, &mut rng),
                }
            }
            FusionKind::D3g => {
                if spec.num_domains < 2 {
                    return Err(Error::Config(
                        "D3G fusion needs at least two training domains".into(),
                    ));
                }
                if spec.projections == 0 {
                    return Err(Error::Config("D3G needs at least one projection".into()));
                }
                if !(spec.temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "D3G temperature {}",
                        spec.temperature
                    )));
                }
                let heads = (0..spec.num_domains)
                    .map(|_| Linear::init(f, o, &mut rng))
                    .collect();
                // Elementwise parameters: fan-in 1, so uniform in [-1, 1].
                let metas = Linear::init(1, spec.num_domains * e, &mut rng).weight;
                let projections = Linear::init(1, spec.projections * e, &mut rng).weight;
                FusionHead::D3g(D3gHead {
                    heads,
                    metas: Tensor2::from_vec(spec.num_domains, e, metas.into_vec())?,
                    projections: Tensor2::from_vec(spec.projections, e, projections.into_vec())?,
                    temperature: spec.temperature,
                    beta_interp: spec.beta_interp,
                    consistency: spec.consistency,
                })
            }
        })
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            FusionHead::Plain { .. } => FusionKind::None,
            FusionHead::Concat { .. } => FusionKind::Concat,
            FusionHead::Film { .. } => FusionKind::Film,
            FusionHead::GeoPriors { .. } => FusionKind::GeoPriors,
            FusionHead::D3g(_) => FusionKind::D3g,
        }
    }

    fn require_loc<'a>(&self, loc: Option<&'a Tensor2>, rows: usize) -> Result<&'a Tensor2> {
        let loc = loc.ok_or_else(|| {
            Error::Usage(format!("{} fusion needs a location embedding", self.kind().tag()))
        })?;
        if loc.rows() != rows {
            return Err(Error::shape(format!(
                "{} location rows for {rows} feature rows",
                loc.rows()
            )));
        }
        Ok(loc)
    }

    /// Inference outputs: class scores (logits, or Geo Priors products) for
    /// classification, one column for regression.
    pub fn predict(&self, img: &Tensor2, loc: Option<&Tensor2>) -> Result<Tensor2> {
        let n = img.rows();
        match self {
            FusionHead::Plain { h } => h.forward(img),
            FusionHead::Concat { h } => h.forward(&img.hcat(self.require_loc(loc, n)?)?),
            FusionHead::Film { gamma, beta, h } => {
                let loc = self.require_loc(loc, n)?;
                let modulated = film_modulate(img, &gamma.forward(loc)?, &beta.forward(loc)?)?;
                h.forward(&modulated)
            }
            FusionHead::GeoPriors { h_image, h_loc } => {
                let loc = self.require_loc(loc, n)?;
                let probs = softmax_rows(&h_image.forward(img)?);
                let loc_logits = h_loc.forward(loc)?;
                Ok(probs.zip_map(&loc_logits, |p, l| p * sigmoid(l)))
            }
            FusionHead::D3g(d) => {
                let loc = self.require_loc(loc, n)?;
                let outs = d.head_outputs(img)?;
                let rel = d.relations(loc)?;
                let mut pred = Tensor2::zeros(n, outs[0].cols());
                for i in 0..n {
                    let w = d.mixture_weights(rel.row(i));
                    let row = pred.row_mut(i);
                    for (j, o) in outs.iter().enumerate() {
                        for (p, v) in row.iter_mut().zip(o.row(i)) {
                            *p += w[j] * v;
                        }
                    }
                }
                Ok(pred)
            }
        }
    }

    /// Training forward pass. `domains` is required for D³G, whose loss
    /// depends on each record's own domain.
    pub fn train_forward(
        &self,
        img: &Tensor2,
        loc: Option<&Tensor2>,
        targets: Targets<'_>,
        domains: Option<&[usize]>,
    ) -> Result<FusionPass> {
        let n = img.rows();
        if targets.len() != n {
            return Err(Error::shape(format!("{} targets for {n} rows", targets.len())));
        }
        let cache = match self {
            FusionHead::Plain { h } => {
                let rows = targets.row_losses(&h.forward(img)?)?;
                PassCache::Plain {
                    input: img.clone(),
                    rows,
                }
            }
            FusionHead::Concat { h } => {
                let input = img.hcat(self.require_loc(loc, n)?)?;
                let rows = targets.row_losses(&h.forward(&input)?)?;
                PassCache::Concat {
                    input,
                    img_cols: img.cols(),
                    rows,
                }
            }
            FusionHead::Film { gamma, beta, h } => {
                let loc = self.require_loc(loc, n)?;
                let g = gamma.forward(loc)?;
                let modulated = film_modulate(img, &g, &beta.forward(loc)?)?;
                let rows = targets.row_losses(&h.forward(&modulated)?)?;
                PassCache::Film {
                    img: img.clone(),
                    loc: loc.clone(),
                    gamma_out: g,
                    modulated,
                    rows,
                }
            }
            FusionHead::GeoPriors { h_image, h_loc } => {
                let Targets::Classes(classes) = targets else {
                    return Err(Error::Config(
                        "Geo Priors fusion is only applicable to classification".into(),
                    ));
                };
                let loc = self.require_loc(loc, n)?;
                let image_rows = cross_entropy_rows(&h_image.forward(img)?, classes)?;
                let loc_rows = geoprior_loss_rows(&h_loc.forward(loc)?, classes)?;
                PassCache::GeoPriors {
                    img: img.clone(),
                    loc: loc.clone(),
                    image_rows,
                    loc_rows,
                }
            }
            FusionHead::D3g(d) => {
                let loc = self.require_loc(loc, n)?;
                let domains = domains.ok_or_else(|| {
                    Error::Config("D3G training needs domain labels".into())
                })?;
                PassCache::D3g(Box::new(d.train_forward(img, loc, targets, domains)?))
            }
        };
        Ok(FusionPass { cache })
    }
}

fn film_modulate(img: &Tensor2, gamma: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    let mut m = img.hadamard(gamma)?;
    m.add_assign(beta)?;
    Ok(m)
}

/// Cached state of [`FusionHead::train_forward`].
#[derive(Debug)]
pub struct FusionPass {
    cache: PassCache,
}

#[derive(Debug)]
enum PassCache {
    Plain {
        input: Tensor2,
        rows: RowLosses,
    },
    Concat {
        input: Tensor2,
        img_cols: usize,
        rows: RowLosses,
    },
    Film {
        img: Tensor2,
        loc: Tensor2,
        gamma_out: Tensor2,
        modulated: Tensor2,
        rows: RowLosses,
    },
    GeoPriors {
        img: Tensor2,
        loc: Tensor2,
        image_rows: RowLosses,
        loc_rows: RowLosses,
    },
    D3g(Box<D3gPass>),
}

impl FusionPass {
    /// Per-record task losses.
    pub fn row_losses(&self) -> Vec<f64> {
        match &self.cache {
            PassCache::Plain { rows, .. }
            | PassCache::Concat { rows, .. }
            | PassCache::Film { rows, .. } => rows.losses.clone(),
            PassCache::GeoPriors {
                image_rows,
                loc_rows,
                ..
            } => image_rows
                .losses
                .iter()
                .zip(&loc_rows.losses)
                .map(|(a, b)| a + b)
                .collect(),
            PassCache::D3g(p) => p.totals(),
        }
    }

    /// Gradients of `Σ_i weights[i]·loss_i` with respect to the head
    /// parameters and, when a location embedding was used, to it.
    pub fn backward(
        self,
        head: &FusionHead,
        weights: &[f64],
    ) -> Result<(FusionHead, Option<Tensor2>)> {
        match (head, self.cache) {
            (FusionHead::Plain { h }, PassCache::Plain { input, rows }) => {
                let g = rows.weighted(weights)?.grad;
                Ok((
                    FusionHead::Plain {
                        h: h.param_grads(&input, &g)?,
                    },
                    None,
                ))
            }
            (
                FusionHead::Concat { h },
                PassCache::Concat {
                    input,
                    img_cols,
                    rows,
                },
            ) => {
                let g = rows.weighted(weights)?.grad;
                let (hg, gin) = h.backward(&input, &g)?;
                let (_, gloc) = gin.split_cols(img_cols)?;
                Ok((FusionHead::Concat { h: hg }, Some(gloc)))
            }
            (
                FusionHead::Film { gamma, beta, h },
                PassCache::Film {
                    img,
                    loc,
                    gamma_out,
                    modulated,
                    rows,
                },
            ) => {
                let g = rows.weighted(weights)?.grad;
                let (hg, gm) = h.backward(&modulated, &g)?;
                let g_gamma = gm.hadamard(&img)?;
                let (gamma_g, mut gloc) = gamma.backward(&loc, &g_gamma)?;
                let (beta_g, gloc_b) = beta.backward(&loc, &gm)?;
                gloc.add_assign(&gloc_b)?;
                let _ = gamma_out;
                Ok((
                    FusionHead::Film {
                        gamma: gamma_g,
                        beta: beta_g,
                        h: hg,
                    },
                    Some(gloc),
                ))
            }
            (
                FusionHead::GeoPriors { h_image, h_loc },
                PassCache::GeoPriors {
                    img,
                    loc,
                    image_rows,
                    loc_rows,
                },
            ) => {
                let gi = image_rows.weighted(weights)?.grad;
                let gl = loc_rows.weighted(weights)?.grad;
                let image_g = h_image.param_grads(&img, &gi)?;
                let (loc_g, gloc) = h_loc.backward(&loc, &gl)?;
                Ok((
                    FusionHead::GeoPriors {
                        h_image: image_g,
                        h_loc: loc_g,
                    },
                    Some(gloc),
                ))
            }
            (FusionHead::D3g(d), PassCache::D3g(pass)) => {
                let (g, gloc) = d.backward(*pass, weights)?;
                Ok((FusionHead::D3g(g), Some(gloc)))
            }
            _ => Err(Error::Usage("fusion pass does not belong to this head".into())),
        }
    }
}

impl Parameters for FusionHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor2)>) {
        match self {
            FusionHead::Plain { h } | FusionHead::Concat { h } => h.visit(&join(prefix, "h"), out),
            FusionHead::Film { gamma, beta, h } => {
                gamma.visit(&join(prefix, "gamma"), out);
                beta.visit(&join(prefix, "beta"), out);
                h.visit(&join(prefix, "h"), out);
            }
            FusionHead::GeoPriors { h_image, h_loc } => {
                h_image.visit(&join(prefix, "h_image"), out);
                h_loc.visit(&join(prefix, "h_loc"), out);
            }
            FusionHead::D3g(d) => {
                d.heads.visit(&join(prefix, "heads"), out);
                out.push((join(prefix, "metas"), &d.metas));
                out.push((join(prefix, "projections"), &d.projections));
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor2>) {
        match self {
            FusionHead::Plain { h } | FusionHead::Concat { h } => h.visit_mut(out),
            FusionHead::Film { gamma, beta, h } => {
                gamma.visit_mut(out);
                beta.visit_mut(out);
                h.visit_mut(out);
            }
            FusionHead::GeoPriors { h_image, h_loc } => {
                h_image.visit_mut(out);
                h_loc.visit_mut(out);
            }
            FusionHead::D3g(d) => {
                d.heads.visit_mut(out);
                out.push(&mut d.metas);
                out.push(&mut d.projections);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Single-record operations.

fn expect_kind<'a>(head: &'a FusionHead, kind: FusionKind) -> Result<&'a FusionHead> {
    if head.kind() == kind {
        Ok(head)
    } else {
        Err(Error::Usage(format!(
            "expected a {} head, got {}",
            kind.tag(),
            head.kind().tag()
        )))
    }
}

/// `h([img ∥ loc])`.
pub fn fuse_concat(img: &[f64], loc: &[f64], head: &FusionHead) -> Result<Vec<f64>> {
    let head = expect_kind(head, FusionKind::Concat)?;
    let loc = Tensor2::row_vector(loc);
    Ok(head
        .predict(&Tensor2::row_vector(img), Some(&loc))?
        .into_vec())
}

/// `h(γ(loc) ⊙ img + β(loc))`.
pub fn fuse_film(img: &[f64], loc: &[f64], head: &FusionHead) -> Result<Vec<f64>> {
    let head = expect_kind(head, FusionKind::Film)?;
    let loc = Tensor2::row_vector(loc);
    Ok(head
        .predict(&Tensor2::row_vector(img), Some(&loc))?
        .into_vec())
}

/// Relation-weighted mixture `Σ_j β_j(ℓ)·h_j(img)`.
pub fn fuse_d3g(img: &[f64], loc: &[f64], head: &FusionHead) -> Result<Vec<f64>> {
    let head = expect_kind(head, FusionKind::D3g)?;
    let loc = Tensor2::row_vector(loc);
    Ok(head
        .predict(&Tensor2::row_vector(img), Some(&loc))?
        .into_vec())
}

/// Inference mixture weights `β_j(ℓ)` of a D³G head.
pub fn d3g_weights(loc: &[f64], head: &FusionHead) -> Result<Vec<f64>> {
    let FusionHead::D3g(d) = expect_kind(head, FusionKind::D3g)? else {
        unreachable!()
    };
    let rel = d.relations(&Tensor2::row_vector(loc))?;
    Ok(d.mixture_weights(rel.row(0)))
}

/// Result of combining image scores with location priors.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoPriorOutput {
    pub image_scores: Vec<f64>,
    pub priors: Vec<f64>,
    pub scores: Vec<f64>,
    pub class: usize,
}

/// `score_i = f_i · σ(l_i)`; argmax with lowest-index tie-break.
pub fn geoprior_combine(img_scores: &[f64], loc_logits: &[f64]) -> Result<GeoPriorOutput> {
    if img_scores.len() != loc_logits.len() || img_scores.is_empty() {
        return Err(Error::shape(format!(
            "{} image scores for {} location logits",
            img_scores.len(),
            loc_logits.len()
        )));
    }
    if let Some(v) = img_scores.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Validation(format!(
            "image scores must be nonnegative, found {v}"
        )));
    }
    let priors: Vec<f64> = loc_logits.iter().map(|&l| sigmoid(l)).collect();
    let scores: Vec<f64> = img_scores.iter().zip(&priors).map(|(f, p)| f * p).collect();
    Ok(GeoPriorOutput {
        image_scores: img_scores.to_vec(),
        class: argmax(&scores),
        priors,
        scores,
    })
}

/// Geo Priors prediction from nonnegative image scores and a location
/// embedding passed through the head's `h_loc`.
pub fn geoprior_score(img_scores: &[f64], loc: &[f64], head: &FusionHead) -> Result<GeoPriorOutput> {
    let FusionHead::GeoPriors { h_loc, .. } = expect_kind(head, FusionKind::GeoPriors)? else {
        unreachable!()
    };
    let logits = h_loc.forward(&Tensor2::row_vector(loc))?;
    geoprior_combine(img_scores, logits.data())
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Negative weighted log-likelihood of the location prior,
/// `−[C·log σ(h_y) + Σ_{i≠y} log(1−σ(h_i))]`, with its logit gradient.
pub fn geoprior_loss(loc_logits: &[f64], y: usize, classes: usize) -> Result<(f64, Vec<f64>)> {
    if classes < 2 {
        return Err(Error::Validation(format!("class count {classes} < 2")));
    }
    if loc_logits.len() != classes {
        return Err(Error::shape(format!(
            "{} logits for {classes} classes",
            loc_logits.len()
        )));
    }
    if y >= classes {
        return Err(Error::Index {
            index: y,
            bound: classes,
            context: "geoprior_loss target",
        });
    }
    let c = classes as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; classes];
    for (i, &h) in loc_logits.iter().enumerate() {
        if i == y {
            loss -= c * log_sigmoid(h);
            grad[i] = -c * (1.0 - sigmoid(h));
        } else {
            // log(1 − σ(h)) = log σ(−h)
            loss -= log_sigmoid(-h);
            grad[i] = sigmoid(h);
        }
    }
    Ok((loss, grad))
}

fn geoprior_loss_rows(logits: &Tensor2, targets: &[usize]) -> Result<RowLosses> {
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    let mut losses = Vec::with_capacity(targets.len());
    for (i, &y) in targets.iter().enumerate() {
        let (l, g) = geoprior_loss(logits.row(i), y, logits.cols())?;
        losses.push(l);
        grad.row_mut(i).copy_from_slice(&g);
    }
    Ok(RowLosses { losses, grad })
}

// ---------------------------------------------------------------------------
// D³G relations.

/// `(1/R)·Σ_r cos(w_r ⊙ a, w_r ⊙ b)`.
pub fn d3g_relation(a: &[f64], b: &[f64], projections: &Tensor2) -> Result<f64> {
    Ok(relation_with_grad(a, b, projections, false)?.0)
}

/// `β·fixed + (1−β)·learned`, where `fixed` is 1 for the record's own
/// domain and 0 otherwise.
pub fn d3g_training_relation(
    loc: &[f64],
    meta: &[f64],
    same_domain: bool,
    head: &D3gHead,
) -> Result<f64> {
    let learned = d3g_relation(loc, meta, &head.projections)?;
    Ok(interpolate_relation(head.beta_interp, same_domain, learned))
}

pub fn interpolate_relation(beta: f64, same_domain: bool, learned: f64) -> f64 {
    let fixed = if same_domain { 1.0 } else { 0.0 };
    beta * fixed + (1.0 - beta) * learned
}

struct RelationGrad {
    a: Vec<f64>,
    b: Vec<f64>,
    w: Tensor2,
}

fn relation_with_grad(
    a: &[f64],
    b: &[f64],
    w: &Tensor2,
    with_grad: bool,
) -> Result<(f64, Option<RelationGrad>)> {
    let dim = a.len();
    if b.len() != dim || w.cols() != dim {
        return Err(Error::shape(format!(
            "relation inputs of length {} and {} with projections {:?}",
            dim,
            b.len(),
            w.shape()
        )));
    }
    let r = w.rows();
    if r == 0 {
        return Err(Error::Validation("relation needs at least one projection".into()));
    }
    let inv_r = 1.0 / r as f64;
    let mut total = 0.0;
    let mut grad = with_grad.then(|| RelationGrad {
        a: vec![0.0; dim],
        b: vec![0.0; dim],
        w: Tensor2::zeros(r, dim),
    });
    for k in 0..r {
        let wk = w.row(k);
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for ((&x, &y), &s) in a.iter().zip(b).zip(wk) {
            let (pa, pb) = (s * x, s * y);
            ab += pa * pb;
            aa += pa * pa;
            bb += pb * pb;
        }
        if aa == 0.0 || bb == 0.0 {
            return Err(Error::Degenerate(format!(
                "projection {k} maps an input to the zero vector"
            )));
        }
        let (na, nb) = (aa.sqrt(), bb.sqrt());
        let cos = ab / (na * nb);
        total += cos;
        if let Some(g) = grad.as_mut() {
            let inv = 1.0 / (na * nb);
            let ca = cos / aa;
            let cb = cos / bb;
            let gw = g.w.row_mut(k);
            for i in 0..dim {
                let (s, x, y) = (wk[i], a[i], b[i]);
                let (pa, pb) = (s * x, s * y);
                // ∂cos/∂pa and ∂cos/∂pb
                let dpa = (pb * inv - ca * pa) * inv_r;
                let dpb = (pa * inv - cb * pb) * inv_r;
                g.a[i] += s * dpa;
                g.b[i] += s * dpb;
                gw[i] += x * dpa + y * dpb;
            }
        }
    }
    Ok((total * inv_r, grad))
}

impl D3gHead {
    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    fn head_outputs(&self, img: &Tensor2) -> Result<Vec<Tensor2>> {
        self.heads.iter().map(|h| h.forward(img)).collect()
    }

    /// Learned relations between every row of `loc` and every head, `B × D`.
    pub fn relations(&self, loc: &Tensor2) -> Result<Tensor2> {
        let d = self.num_heads();
        let mut out = Tensor2::zeros(loc.rows(), d);
        for i in 0..loc.rows() {
            for j in 0..d {
                out.set(
                    i,
                    j,
                    d3g_relation(loc.row(i), self.metas.row(j), &self.projections)?,
                );
            }
        }
        Ok(out)
    }

    /// Inference mixture weights: temperature softmax over relations.
    pub fn mixture_weights(&self, relations: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = relations.iter().map(|r| r / self.temperature).collect();
        softmax(&scaled)
    }

    fn train_forward(
        &self,
        img: &Tensor2,
        loc: &Tensor2,
        targets: Targets<'_>,
        domains: &[usize],
    ) -> Result<D3gPass> {
        let n = img.rows();
        let d = self.num_heads();
        if domains.len() != n {
            return Err(Error::shape(format!("{} domain labels for {n} rows", domains.len())));
        }
        if let Some(&bad) = domains.iter().find(|&&x| x >= d) {
            return Err(Error::Index {
                index: bad,
                bound: d,
                context: "D3G own-domain head",
            });
        }
        let outs = self.head_outputs(img)?;
        let cols = outs[0].cols();
        let relations = self.relations(loc)?;

        let mut own = Tensor2::zeros(n, cols);
        let mut ensemble = Tensor2::zeros(n, cols);
        let mut others = Tensor2::zeros(n, d);
        for i in 0..n {
            own.row_mut(i).copy_from_slice(outs[domains[i]].row(i));
            let w = self.other_weights(relations.row(i), domains[i]);
            let row = ensemble.row_mut(i);
            for (j, o) in outs.iter().enumerate() {
                if w[j] != 0.0 {
                    for (e, v) in row.iter_mut().zip(o.row(i)) {
                        *e += w[j] * v;
                    }
                }
            }
            others.row_mut(i).copy_from_slice(&w);
        }
        let pred_rows = targets.row_losses(&own)?;
        let rel_rows = targets.row_losses(&ensemble)?;
        Ok(D3gPass {
            img: img.clone(),
            loc: loc.clone(),
            domains: domains.to_vec(),
            outs,
            others,
            pred_rows,
            rel_rows,
            lambda: self.consistency,
        })
    }

    /// Renormalized weights over the heads other than `own`: softmax of the
    /// interpolated relation over those heads; zero at `own`.
    fn other_weights(&self, relations: &[f64], own: usize) -> Vec<f64> {
        let mut w = vec![0.0; relations.len()];
        let idx: Vec<usize> = (0..relations.len()).filter(|&j| j != own).collect();
        let vals: Vec<f64> = idx
            .iter()
            .map(|&j| interpolate_relation(self.beta_interp, false, relations[j]) / self.temperature)
            .collect();
        for (k, p) in idx.iter().zip(softmax(&vals)) {
            w[*k] = p;
        }
        w
    }

    fn backward(&self, pass: D3gPass, weights: &[f64]) -> Result<(D3gHead, Tensor2)> {
        let D3gPass {
            img,
            loc,
            domains,
            outs,
            others,
            pred_rows,
            rel_rows,
            lambda,
        } = pass;
        let n = img.rows();
        let d = self.num_heads();
        let cols = outs[0].cols();
        let g_own = pred_rows.weighted(weights)?.grad;
        let mut g_ens = rel_rows.weighted(weights)?.grad;
        g_ens.scale(lambda);

        let mut g_outs: Vec<Tensor2> = (0..d).map(|_| Tensor2::zeros(n, cols)).collect();
        let mut g_rel = Tensor2::zeros(n, d);
        let scale = (1.0 - self.beta_interp) / self.temperature;
        for i in 0..n {
            for (t, v) in g_outs[domains[i]].row_mut(i).iter_mut().zip(g_own.row(i)) {
                *t += v;
            }
            let w = others.row(i);
            let ge = g_ens.row(i);
            let mut gw = vec![0.0; d];
            for j in 0..d {
                if j == domains[i] {
                    continue;
                }
                for (t, v) in g_outs[j].row_mut(i).iter_mut().zip(ge) {
                    *t += w[j] * v;
                }
                gw[j] = ge.iter().zip(outs[j].row(i)).map(|(a, b)| a * b).sum();
            }
            let mean: f64 = (0..d).map(|j| w[j] * gw[j]).sum();
            for j in 0..d {
                if j != domains[i] {
                    g_rel.set(i, j, w[j] * (gw[j] - mean) * scale);
                }
            }
        }

        let heads = self
            .heads
            .iter()
            .zip(&g_outs)
            .map(|(h, g)| h.param_grads(&img, g))
            .collect::<Result<Vec<_>>>()?;
        let mut metas = Tensor2::zeros(self.metas.rows(), self.metas.cols());
        let mut projections = Tensor2::zeros(self.projections.rows(), self.projections.cols());
        let mut gloc = Tensor2::zeros(loc.rows(), loc.cols());
        for i in 0..n {
            for j in 0..d {
                let coeff = g_rel.get(i, j);
                if coeff == 0.0 {
                    continue;
                }
                let (_, g) =
                    relation_with_grad(loc.row(i), self.metas.row(j), &self.projections, true)?;
                let g = g.expect("gradient requested");
                for (t, v) in gloc.row_mut(i).iter_mut().zip(&g.a) {
                    *t += coeff * v;
                }
                for (t, v) in metas.row_mut(j).iter_mut().zip(&g.b) {
                    *t += coeff * v;
                }
                projections.add_scaled(&g.w, coeff)?;
            }
        }
        Ok((
            D3gHead {
                heads,
                metas,
                projections,
                temperature: self.temperature,
                beta_interp: self.beta_interp,
                consistency: self.consistency,
            },
            gloc,
        ))
    }
}

#[derive(Debug)]
struct D3gPass {
    img: Tensor2,
    loc: Tensor2,
    domains: Vec<usize>,
    outs: Vec<Tensor2>,
    /// Renormalized weights over the non-own heads, `B × D`.
    others: Tensor2,
    pred_rows: RowLosses,
    rel_rows: RowLosses,
    lambda: f64,
}

impl D3gPass {
    fn totals(&self) -> Vec<f64> {
        self.pred_rows
            .losses
            .iter()
            .zip(&self.rel_rows.losses)
            .map(|(p, r)| p + self.lambda * r)
            .collect()
    }

    /// Mean own-head and consistency losses over the batch.
    pub fn components(&self) -> (f64, f64) {
        let n = self.pred_rows.losses.len().max(1) as f64;
        (
            self.pred_rows.losses.iter().sum::<f64>() / n,
            self.rel_rows.losses.iter().sum::<f64>() / n,
        )
    }
}

impl FusionPass {
    /// Batch-mean `(L_pred, L_rel)` for D³G passes.
    pub fn d3g_components(&self) -> Option<(f64, f64)> {
        match &self.cache {
            PassCache::D3g(p) => Some(p.components()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{finite_diff_grad, max_relative_error};

    fn lin(weight: Tensor2, bias: &[f64]) -> Linear {
        Linear::from_parts(weight, Tensor2::row_vector(bias)).unwrap()
    }

    #[test]
    fn concat_picks_selected_coordinates() {
        // img = [1, 0]; loc = e_255. Weights route img[0] → out 0 and
        // loc[255] → out 1.
        let mut w = Tensor2::zeros(258, 2);
        w.set(0, 0, 1.0);
        w.set(257, 1, 1.0);
        let head = FusionHead::Concat {
            h: lin(w, &[0.0, 0.0]),
        };
        let mut loc = vec![0.0; 256];
        loc[255] = 1.0;
        assert_eq!(fuse_concat(&[1.0, 0.0], &loc, &head).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn concat_zero_location_is_image_part_plus_bias() {
        let spec = FusionSpec {
            kind: FusionKind::Concat,
            feature_dim: 3,
            embed_dim: 4,
            out_dim: 2,
            num_domains: 2,
            projections: 1,
            temperature: 1.0,
            beta_interp: 0.8,
            consistency: 0.5,
        };
        let mut head = FusionHead::new(&spec, 1).unwrap();
        if let FusionHead::Concat { h } = &mut head {
            h.bias = Tensor2::row_vector(&[0.5, -0.5]);
        }
        let img = [0.3, -1.0, 2.0];
        let out = fuse_concat(&img, &[0.0; 4], &head).unwrap();
        let FusionHead::Concat { h } = &head else { unreachable!() };
        for j in 0..2 {
            let expect: f64 =
                (0..3).map(|i| img[i] * h.weight.get(i, j)).sum::<f64>() + h.bias.get(0, j);
            assert!((out[j] - expect).abs() < 1e-15);
        }
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn film_modulation_examples() {
        let loc = [1.0, 0.0];
        // γ(loc) = [0.5, 2], β(loc) = [1, -1] via biases; h = identity.
        let head = FusionHead::Film {
            gamma: lin(Tensor2::zeros(2, 2), &[0.5, 2.0]),
            beta: lin(Tensor2::zeros(2, 2), &[1.0, -1.0]),
            h: lin(Tensor2::identity(2), &[0.0, 0.0]),
        };
        assert_eq!(fuse_film(&[2.0, 3.0], &loc, &head).unwrap(), vec![2.0, 5.0]);

        let gate_off = FusionHead::Film {
            gamma: lin(Tensor2::zeros(2, 2), &[0.0, 0.0]),
            beta: lin(Tensor2::zeros(2, 2), &[0.25, 0.75]),
            h: lin(Tensor2::identity(2), &[0.0, 0.0]),
        };
        let a = fuse_film(&[2.0, 3.0], &loc, &gate_off).unwrap();
        let b = fuse_film(&[-9.0, 4.0], &loc, &gate_off).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0.25, 0.75]);
    }

    #[test]
    fn geoprior_examples() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let out = geoprior_combine(&[0.2, 0.8], &[logit(0.9), logit(0.1)]).unwrap();
        assert!((out.scores[0] - 0.18).abs() < 1e-12);
        assert!((out.scores[1] - 0.08).abs() < 1e-12);
        assert_eq!(out.class, 0);
        let tie = geoprior_combine(&[0.5, 0.5, 0.5], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(tie.class, 0);
        assert!(matches!(
            geoprior_combine(&[-0.1, 0.5], &[0.0, 0.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn geoprior_loss_closed_form_and_limits() {
        for c in 2..=10usize {
            let (l, _) = geoprior_loss(&vec![0.0; c], 0, c).unwrap();
            assert!((l - (2 * c - 1) as f64 * 2f64.ln()).abs() < 1e-12);
        }
        let (l, _) = geoprior_loss(&[0.0; 3], 1, 3).unwrap();
        assert!((l - 3.465736).abs() < 1e-6);
        let (l, _) = geoprior_loss(&[60.0, -60.0, -60.0], 0, 3).unwrap();
        assert!(l >= 0.0 && l < 1e-20);
        assert!(matches!(geoprior_loss(&[0.0; 3], 3, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn geoprior_loss_gradient() {
        let logits = [0.4, -1.3, 2.2, 0.1];
        let (_, g) = geoprior_loss(&logits, 2, 4).unwrap();
        let fd = finite_diff_grad(|t| Ok(geoprior_loss(t, 2, 4)?.0), &logits, 1e-5).unwrap();
        assert!(max_relative_error(&g, &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn relation_examples() {
        let ones = Tensor2::filled(1, 4, 1.0);
        let a = [0.3, -0.2, 0.9, 1.1];
        assert!((d3g_relation(&a, &a, &ones).unwrap() - 1.0).abs() < 1e-12);
        let e0 = [1.0, 0.0, 0.0, 0.0];
        let e1 = [0.0, 1.0, 0.0, 0.0];
        assert_eq!(d3g_relation(&e0, &e1, &ones).unwrap(), 0.0);
        let zero_proj = Tensor2::from_rows(&[vec![0.0, 1.0, 1.0, 1.0]]).unwrap();
        assert!(matches!(
            d3g_relation(&e0, &e1, &zero_proj),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn training_relation_interpolation() {
        let head = D3gHead {
            heads: vec![],
            metas: Tensor2::zeros(0, 2),
            projections: Tensor2::filled(1, 2, 1.0),
            temperature: 1.0,
            beta_interp: 0.8,
            consistency: 0.5,
        };
        let a = [1.0, 0.0];
        assert!((d3g_training_relation(&a, &a, true, &head).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(d3g_training_relation(&a, &[0.0, 1.0], false, &head).unwrap(), 0.0);
        assert!((interpolate_relation(0.8, true, 0.5) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn d3g_mixture_examples() {
        let mk = |metas: Tensor2| D3gHead {
            heads: vec![
                lin(Tensor2::from_rows(&[vec![1.0, 0.0]]).unwrap(), &[0.0, 0.0]),
                lin(Tensor2::from_rows(&[vec![0.0, 1.0]]).unwrap(), &[0.0, 0.0]),
            ],
            metas,
            projections: Tensor2::filled(1, 2, 1.0),
            temperature: 1.0,
            beta_interp: 0.8,
            consistency: 0.5,
        };
        // loc aligned with meta 0 (r = 1) and orthogonal to meta 1 (r = 0).
        let head = FusionHead::D3g(mk(Tensor2::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()));
        let out = fuse_d3g(&[1.0], &[2.0, 0.0], &head).unwrap();
        let b0 = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((out[0] - b0).abs() < 1e-12 && (out[1] - (1.0 - b0)).abs() < 1e-12);
        assert!((b0 - 0.7311).abs() < 1e-4);

        // Equal relations → plain mean of head outputs.
        let head = FusionHead::D3g(mk(Tensor2::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap()));
        let out = fuse_d3g(&[1.0], &[2.0, 0.0], &head).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-12 && (out[1] - 0.5).abs() < 1e-12);

        // A sharp temperature saturates onto the best head.
        let FusionHead::D3g(mut d) = head else { unreachable!() };
        d.metas = Tensor2::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        d.temperature = 0.02; // relations ±1 → ±50 before softmax
        let out = fuse_d3g(&[1.0], &[2.0, 0.0], &FusionHead::D3g(d)).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && out[1].abs() < 1e-12);
    }

    fn spec(kind: FusionKind, out_dim: usize) -> FusionSpec {
        FusionSpec {
            kind,
            feature_dim: 3,
            embed_dim: 4,
            out_dim,
            num_domains: 3,
            projections: 2,
            temperature: 1.0,
            beta_interp: 0.8,
            consistency: 0.5,
        }
    }

    fn batch() -> (Tensor2, Tensor2) {
        let img = Tensor2::from_vec(
            4,
            3,
            vec![0.5, -0.3, 1.2, -0.7, 0.9, 0.1, 0.2, 0.4, -1.1, 1.3, -0.2, 0.6],
        )
        .unwrap();
        let loc = Tensor2::from_vec(
            4,
            4,
            (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect(),
        )
        .unwrap();
        (img, loc)
    }

    /// Compares analytic parameter and location gradients of the weighted
    /// batch loss against central differences.
    fn check_head(kind: FusionKind, targets: Targets<'_>, out_dim: usize) {
        let head = FusionHead::new(&spec(kind, out_dim), 9).unwrap();
        let (img, loc) = batch();
        let domains = [0usize, 2, 1, 2];
        let weights = [0.1, 0.4, 0.3, 0.2];
        let loss = |h: &FusionHead, l: &Tensor2| -> Result<f64> {
            let pass = h.train_forward(&img, Some(l), targets, Some(&domains))?;
            Ok(pass.row_losses().iter().zip(&weights).map(|(a, b)| a * b).sum())
        };
        let pass = head
            .train_forward(&img, Some(&loc), targets, Some(&domains))
            .unwrap();
        let (grads, gloc) = pass.backward(&head, &weights).unwrap();

        let theta = head.flatten();
        let fd = finite_diff_grad(
            |t| {
                let mut h = head.clone();
                h.assign_flat(t)?;
                loss(&h, &loc)
            },
            &theta,
            1e-6,
        )
        .unwrap();
        let err = max_relative_error(&grads.flatten(), &fd, 1e-6);
        assert!(err < 1e-4, "{kind:?} parameter gradient error {err}");

        if let Some(gloc) = gloc {
            let fd = finite_diff_grad(
                |t| loss(&head, &Tensor2::from_vec(4, 4, t.to_vec())?),
                loc.data(),
                1e-6,
            )
            .unwrap();
            let err = max_relative_error(gloc.data(), &fd, 1e-6);
            assert!(err < 1e-4, "{kind:?} location gradient error {err}");
        } else {
            assert_eq!(kind, FusionKind::None);
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let classes = [0usize, 2, 1, 1];
        for kind in [
            FusionKind::None,
            FusionKind::Concat,
            FusionKind::Film,
            FusionKind::GeoPriors,
            FusionKind::D3g,
        ] {
            check_head(kind, Targets::Classes(&classes), 3);
        }
        let values = Tensor2::from_vec(4, 1, vec![0.3, -1.0, 0.8, 0.0]).unwrap();
        for kind in [FusionKind::Concat, FusionKind::Film, FusionKind::D3g] {
            check_head(kind, Targets::Values(&values), 1);
        }
    }

    #[test]
    fn geopriors_rejects_regression() {
        assert!(matches!(
            FusionHead::new(&spec(FusionKind::GeoPriors, 1), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn predict_requires_location_for_fused_heads() {
        let head = FusionHead::new(&spec(FusionKind::Film, 2), 0).unwrap();
        let (img, _) = batch();
        assert!(matches!(head.predict(&img, None), Err(Error::Usage(_))));
    }

    #[test]
    fn concat_forward_matches_split_weights() {
        let head = FusionHead::new(&spec(FusionKind::Concat, 2), 4).unwrap();
        let (img, loc) = batch();
        let out = head.predict(&img, Some(&loc)).unwrap();
        let FusionHead::Concat { h } = &head else { unreachable!() };
        for i in 0..4 {
            for j in 0..2 {
                let mut e = h.bias.get(0, j);
                for k in 0..3 {
                    e += img.get(i, k) * h.weight.get(k, j);
                }
                for k in 0..4 {
                    e += loc.get(i, k) * h.weight.get(3 + k, j);
                }
                assert!((out.get(i, j) - e).abs() < 1e-12);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn geoprior_argmax_is_scale_invariant(
            f in proptest::collection::vec(0.0f64..10.0, 2..8),
            seed in 0u64..1000,
            scale in 1e-3f64..1e3,
        ) {
            let logits: Vec<f64> = (0..f.len())
                .map(|i| (((seed as usize * 31 + i * 17) % 23) as f64 - 11.0) / 3.0)
                .collect();
            let a = geoprior_combine(&f, &logits).unwrap();
            let scaled: Vec<f64> = f.iter().map(|v| v * scale).collect();
            let b = geoprior_combine(&scaled, &logits).unwrap();
            let top = a.scores[a.class];
            // Exact ties can be broken differently after rounding.
            let runner_up = a.scores.iter().enumerate()
                .filter(|(i, _)| *i != a.class)
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if top - runner_up > 1e-9 * top.abs().max(1e-300) {
                proptest::prop_assert_eq!(a.class, b.class);
            }
        }

        #[test]
        fn relation_is_symmetric_and_bounded(
            a in proptest::collection::vec(0.1f64..2.0, 4),
            b in proptest::collection::vec(-2.0f64..-0.1, 4),
            w in proptest::collection::vec(0.2f64..1.5, 8),
        ) {
            let w = Tensor2::from_vec(2, 4, w).unwrap();
            let ab = d3g_relation(&a, &b, &w).unwrap();
            let ba = d3g_relation(&b, &a, &w).unwrap();
            proptest::prop_assert!((ab - ba).abs() < 1e-12);
            proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&ab));
        }
    }
}
