//! Group metrics, Pareto fronts, k-means over location embeddings and
//! cluster-map export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_sphere_locations, GeoMask, TaskKind, Target};
use crate::error::{Error, Result};
use crate::locenc::{GeoPoint, LocationEncoder, LocationInput};
use crate::math::{stream_rng, streams, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub value: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub per_group: BTreeMap<usize, GroupStat>,
    /// Pooled metric over all records.
    pub average: f64,
    /// Minimum over groups.
    pub worst: f64,
    pub worst_group: usize,
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn metric(task: TaskKind, group: &str, preds: &[Target], targets: &[Target]) -> Result<f64> {
    match task {
        TaskKind::Classification => {
            let correct = preds
                .iter()
                .zip(targets)
                .filter(|(p, t)| p.class().is_some() && p.class() == t.class())
                .count();
            Ok(correct as f64 / preds.len() as f64)
        }
        TaskKind::Regression => {
            let p: Vec<f64> = preds.iter().map(|v| v.value()).collect();
            let t: Vec<f64> = targets.iter().map(|v| v.value()).collect();
            pearson(&p, &t).ok_or_else(|| Error::MetricUndefined {
                group: group.to_string(),
                msg: format!(
                    "Pearson r needs at least 2 records with nonzero variance ({} records)",
                    p.len()
                ),
            })
        }
    }
}

/// Per-group accuracy or Pearson r, the pooled metric, and the minimum over
/// groups.
pub fn group_metrics(
    preds: &[Target],
    targets: &[Target],
    domains: &[usize],
    task: TaskKind,
) -> Result<GroupMetrics> {
    if preds.len() != targets.len() || preds.len() != domains.len() {
        return Err(Error::shape(format!(
            "{} predictions, {} targets, {} domains",
            preds.len(),
            targets.len(),
            domains.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Validation("no records to evaluate".into()));
    }
    let mut groups: BTreeMap<usize, (Vec<Target>, Vec<Target>)> = BTreeMap::new();
    for ((p, t), d) in preds.iter().zip(targets).zip(domains) {
        let e = groups.entry(*d).or_default();
        e.0.push(*p);
        e.1.push(*t);
    }
    let mut per_group = BTreeMap::new();
    let mut worst = f64::INFINITY;
    let mut worst_group = 0;
    for (g, (p, t)) in &groups {
        let value = metric(task, &g.to_string(), p, t)?;
        if value < worst {
            worst = value;
            worst_group = *g;
        }
        per_group.insert(
            *g,
            GroupStat {
                value,
                count: p.len(),
            },
        );
    }
    Ok(GroupMetrics {
        per_group,
        average: metric(task, "pooled", preds, targets)?,
        worst,
        worst_group,
    })
}

// ---------------------------------------------------------------------------
// Pareto front.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub label: String,
    pub avg: f64,
    pub worst: f64,
}

pub fn dominates(q: &ParetoPoint, p: &ParetoPoint) -> bool {
    q.avg >= p.avg && q.worst >= p.worst && (q.avg > p.avg || q.worst > p.worst)
}

/// `true` for every point no other point dominates.
pub fn pareto_mask(points: &[ParetoPoint]) -> Vec<bool> {
    // Sort by avg descending (worst descending on ties) and sweep the best
    // worst-group value seen among strictly better averages.
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .avg
            .total_cmp(&points[a].avg)
            .then(points[b].worst.total_cmp(&points[a].worst))
    });
    let mut keep = vec![false; points.len()];
    let mut best_worst = f64::NEG_INFINITY;
    let mut i = 0;
    while i < order.len() {
        // Points sharing one avg value form a block.
        let avg = points[order[i]].avg;
        let mut j = i;
        while j < order.len() && points[order[j]].avg == avg {
            j += 1;
        }
        let block_max = points[order[i]].worst;
        for &idx in &order[i..j] {
            let w = points[idx].worst;
            // Dominated by a same-avg point with a larger worst, or by any
            // larger-avg point with at least this worst.
            keep[idx] = w == block_max && w > best_worst;
        }
        best_worst = best_worst.max(block_max);
        i = j;
    }
    keep
}

/// Non-dominated subset, in input order.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    pareto_mask(points)
        .into_iter()
        .zip(points)
        .filter(|(k, _)| *k)
        .map(|(_, p)| p.clone())
        .collect()
}

// ---------------------------------------------------------------------------
// k-means.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Tensor2,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (lowest index on ties). Candidates come from
/// the expanded form `‖x‖² − 2x·c + ‖c‖²`; a row only leaves `current` when
/// the exact distance is strictly smaller, so inertia cannot rise through
/// rounding.
fn assign(x: &Tensor2, c: &Tensor2, current: Option<&[usize]>) -> Result<(Vec<usize>, Vec<f64>)> {
    let cross = x.matmul_nt(c)?;
    let cnorm: Vec<f64> = (0..c.rows())
        .map(|j| c.row(j).iter().map(|v| v * v).sum())
        .collect();
    let mut out = Vec::with_capacity(x.rows());
    let mut dist = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = cross.row(i);
        let mut best = 0;
        let mut best_v = f64::INFINITY;
        for (j, (&xc, &cn)) in row.iter().zip(&cnorm).enumerate() {
            let v = cn - 2.0 * xc;
            if v < best_v {
                best_v = v;
                best = j;
            }
        }
        let d_best = sq_dist(x.row(i), c.row(best));
        match current {
            Some(cur) if cur[i] != best => {
                let d_cur = sq_dist(x.row(i), c.row(cur[i]));
                if d_best < d_cur {
                    out.push(best);
                    dist.push(d_best);
                } else {
                    out.push(cur[i]);
                    dist.push(d_cur);
                }
            }
            _ => {
                out.push(best);
                dist.push(d_best);
            }
        }
    }
    Ok((out, dist))
}

fn plusplus_init<R: Rng + ?Sized>(x: &Tensor2, k: usize, rng: &mut R) -> Tensor2 {
    let n = x.rows();
    let mut centroids = Tensor2::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until no assignment
/// changes, the centroid shift drops below `tol`, or `max_iter` updates.
pub fn kmeans_fit(x: &Tensor2, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KMeans> {
    let n = x.rows();
    if k == 0 || n < k {
        return Err(Error::Validation(format!(
            "k-means needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut rng = stream_rng(seed, streams::KMEANS);
    let mut centroids = plusplus_init(x, k, &mut rng);
    let (mut assignments, mut dist) = assign(x, &centroids, None)?;
    let mut history = vec![dist.iter().sum::<f64>()];
    let mut iterations = 0;
    let dim = x.cols();
    while iterations < max_iter {
        iterations += 1;
        let mut sums = Tensor2::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in next.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            }
        }
        // Empty clusters take the point farthest from its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 1");
                next.row_mut(j).copy_from_slice(x.row(far));
                counts[assignments[far]] -= 1;
                assignments[far] = j;
                counts[j] = 1;
                dist[far] = 0.0;
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist(centroids.row(j), next.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        let (new_assign, new_dist) = assign(x, &centroids, Some(&assignments))?;
        let changed = new_assign != assignments;
        assignments = new_assign;
        dist = new_dist;
        history.push(dist.iter().sum());
        if !changed || shift < tol {
            break;
        }
    }
    Ok(KMeans {
        inertia: *history.last().expect("non-empty"),
        centroids,
        assignments,
        inertia_history: history,
        iterations,
    })
}

/// Cluster-size-weighted majority-label fraction.
pub fn purity(assignments: &[usize], labels: &[usize]) -> Result<f64> {
    if assignments.len() != labels.len() || assignments.is_empty() {
        return Err(Error::shape(format!(
            "{} assignments for {} labels",
            assignments.len(),
            labels.len()
        )));
    }
    let mut counts: BTreeMap<usize, BTreeMap<usize, usize>> = BTreeMap::new();
    for (&a, &l) in assignments.iter().zip(labels) {
        *counts.entry(a).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = counts
        .values()
        .map(|c| c.values().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / assignments.len() as f64)
}

// ---------------------------------------------------------------------------
// Cluster maps.

pub const DEFAULT_MAP_POINTS: usize = 100_000;
pub const DEFAULT_MAP_CLUSTERS: usize = 28;
const MAP_MAX_ITER: usize = 300;
const MAP_TOL: f64 = 1e-8;
const ENCODE_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub points: Vec<GeoPoint>,
    pub assignments: Vec<usize>,
    pub centroids: Tensor2,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

/// Location embeddings for `points`, computed chunk by chunk.
pub fn embed_points(encoder: &LocationEncoder, points: &[GeoPoint]) -> Result<Tensor2> {
    let mut out = Tensor2::zeros(points.len(), encoder.output_dim());
    for (c, chunk) in points.chunks(ENCODE_CHUNK).enumerate() {
        let inputs: Vec<LocationInput<'_>> = chunk.iter().map(|p| LocationInput::Point(*p)).collect();
        let emb = encoder.encode(&inputs)?;
        let start = c * ENCODE_CHUNK * emb.cols();
        out.data_mut()[start..start + emb.len()].copy_from_slice(emb.data());
    }
    Ok(out)
}

/// Samples `n` locations, embeds them and clusters the embeddings.
pub fn build_cluster_map(
    encoder: Option<&LocationEncoder>,
    n: usize,
    k: usize,
    seed: u64,
    mask: Option<&GeoMask>,
) -> Result<ClusterMap> {
    let encoder = encoder
        .ok_or_else(|| Error::Unsupported("model has no location encoder to map".into()))?;
    if !encoder.kind().is_coordinate_based() {
        return Err(Error::Unsupported(format!(
            "{:?} encoder has no coordinate input, so no cluster map exists",
            encoder.kind()
        )));
    }
    let points = sample_sphere_locations(n, seed, mask)?;
    let emb = embed_points(encoder, &points)?;
    let km = kmeans_fit(&emb, k, seed, MAP_MAX_ITER, MAP_TOL)?;
    Ok(ClusterMap {
        n,
        k,
        seed,
        points,
        assignments: km.assignments,
        centroids: km.centroids,
        inertia: km.inertia,
        inertia_history: km.inertia_history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFormat {
    Csv,
    Geojson,
    Svg,
}

impl MapFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Some(MapFormat::Csv),
            "geojson" | "json" => Some(MapFormat::Geojson),
            "svg" => Some(MapFormat::Svg),
            _ => None,
        }
    }
}

pub const PALETTE: [&str; 28] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2",
    "#7f7f7f", "#bcbd22", "#17becf", "#aec7e8", "#ffbb78", "#98df8a", "#ff9896",
    "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5", "#393b79",
    "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd", "#e6550d", "#31a354",
];

pub const MAP_WIDTH: f64 = 1024.0;
pub const MAP_HEIGHT: f64 = 512.0;

pub fn render_cluster_csv(cm: &ClusterMap) -> String {
    let mut s = String::from("lat,lon,cluster\n");
    for (p, a) in cm.points.iter().zip(&cm.assignments) {
        let _ = writeln!(s, "{:?},{:?},{a}", p.lat, p.lon);
    }
    s
}

pub fn render_cluster_geojson(cm: &ClusterMap) -> Result<String> {
    let features: Vec<serde_json::Value> = cm
        .points
        .iter()
        .zip(&cm.assignments)
        .map(|(p, a)| {
            serde_json::json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [p.lon, p.lat]},
                "properties": {"cluster": a},
            })
        })
        .collect();
    let doc = serde_json::json!({
        "type": "FeatureCollection",
        "features": features,
    });
    Ok(serde_json::to_string(&doc)? + "\n")
}

/// Equirectangular scatter, `x = lon`, `y = −lat`.
pub fn render_cluster_svg(cm: &ClusterMap) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"#ffffff\"/>\n",
        w = MAP_WIDTH,
        h = MAP_HEIGHT
    );
    for (p, a) in cm.points.iter().zip(&cm.assignments) {
        let x = (p.lon + 180.0) / 360.0 * MAP_WIDTH;
        let y = (90.0 - p.lat) / 180.0 * MAP_HEIGHT;
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.3}\" cy=\"{y:.3}\" r=\"1\" fill=\"{}\"/>",
            PALETTE[a % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn export_cluster_map(cm: &ClusterMap, format: MapFormat, path: &Path) -> Result<()> {
    let text = match format {
        MapFormat::Csv => render_cluster_csv(cm),
        MapFormat::Geojson => render_cluster_geojson(cm)?,
        MapFormat::Svg => render_cluster_svg(cm),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scatter of (average, worst) points; frontier points drawn filled.
pub fn render_pareto_svg(points: &[ParetoPoint], frontier: &[bool]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const M: f64 = 60.0;
    let span = |vals: Vec<f64>| {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    let (x0, x1) = span(points.iter().map(|p| p.avg).collect());
    let (y0, y1) = span(points.iter().map(|p| p.worst).collect());
    let sx = |v: f64| M + (v - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |v: f64| H - M - (v - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#000000\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"#000000\"/>\n\
         <text x=\"{cx}\" y=\"{t}\" text-anchor=\"middle\" font-size=\"14\">average</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 {cy})\">worst group</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        t = H - 20.0,
        cy = H / 2.0,
    );
    let mut front: Vec<&ParetoPoint> = points
        .iter()
        .zip(frontier)
        .filter(|(_, f)| **f)
        .map(|(p, _)| p)
        .collect();
    front.sort_by(|a, b| a.avg.total_cmp(&b.avg));
    if front.len() > 1 {
        let pts: Vec<String> = front
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.avg), sy(p.worst)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\"/>",
            pts.join(" ")
        );
    }
    for (p, f) in points.iter().zip(frontier) {
        let (x, y) = (sx(p.avg), sy(p.worst));
        let fill = if *f { "#d62728" } else { "none" };
        let _ = writeln!(
            s,
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"{fill}\" stroke=\"#d62728\"/>"
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\">{}</text>",
            x + 7.0,
            y - 7.0,
            xml_escape(&p.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
