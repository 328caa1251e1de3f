//! Two-branch ego query generation.
//!
//! The heuristic branch selects reference points from the dynamic and
//! confidence maps; the exploratory branch finds occluder centroids and
//! throws shadow points behind them. Both branches are embedded, nudged by
//! a coarse offset head (bounded to 4 cells by tanh squashing), and
//! expanded into per-head 3x3 fine sampling locations. All coordinates are
//! continuous cell coordinates at the owning pyramid level.

use indexmap::IndexSet;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bev::{sample_map_into, BevGrid, FeatureMap, FeaturePyramid, GridSpec, Interp};
use crate::config::{QueryGenConfig, ShadowConfig};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::priors::PriorMaps;
use crate::seeding::{derive_seed, rng_from, tag};

/// 3x3 neighborhood offsets in row-major order; index 4 is the center.
/// Fine-offset tables initialize to this stencil, and halo feature blocks
/// are serialized in this order.
pub const HALO_OFFSETS: [(i64, i64); 9] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (0, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

/// Coarse-offset squashing bound, cells.
pub const MAX_COARSE_OFFSET: f64 = 4.0;

/// One exploratory reference point: its location, the occluder centroid it
/// shadows, and the realized 2-D offset between them (cells).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Erp {
    pub loc: (f64, f64),
    pub centroid: (usize, usize),
    pub offset: (f64, f64),
}

/// Queries for one pyramid level. Embedding row `n` corresponds to anchor
/// `n`, with heuristic anchors first and exploratory anchors after them.
#[derive(Debug, Clone)]
pub struct ScaleQueries {
    pub level: usize,
    pub hrp: Vec<(usize, usize)>,
    pub erp: Vec<Erp>,
    /// One row per anchor, `channels(level)` wide.
    pub embeddings: Vec<Vec<f64>>,
    /// Coarse nudges, bounded to [`MAX_COARSE_OFFSET`] per axis.
    pub coarse_offsets: Vec<(f64, f64)>,
    /// Nudged anchors, clamped into the grid.
    pub anchors: Vec<(f64, f64)>,
    /// Per anchor: heads x 9 fine sampling locations, clamped into the grid.
    pub fine: Vec<Vec<(f64, f64)>>,
    /// Realized mean centroid-to-shadow distance (cells); None without ERPs.
    pub delta_cells: Option<f64>,
}

/// All scales for one agent and frame.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub scales: Vec<ScaleQueries>,
}

impl QuerySet {
    /// Anchor count across scales.
    pub fn total_anchors(&self) -> usize {
        self.scales.iter().map(|s| s.anchors.len()).sum()
    }
}

/// Per-scale generator weights.
#[derive(Debug, Clone)]
pub struct ScaleGenParams {
    /// Exploration token, channels long.
    pub token: Vec<f64>,
    /// ERP embedding MLP: channels x (2*channels + 2), then channels x channels.
    pub erp_w1: Mat,
    pub erp_b1: Vec<f64>,
    pub erp_w2: Mat,
    pub erp_b2: Vec<f64>,
    /// Coarse offset head: 2 x channels.
    pub coarse_w: Mat,
    pub coarse_b: [f64; 2],
    /// Fine offset perturbation: (heads * 9 * 2) x channels, zero at init so
    /// the fine locations start as the exact integer stencil.
    pub fine_w: Mat,
    /// Fine offset base, heads * 9 entries.
    pub fine_bias: Vec<(f64, f64)>,
}

/// Frozen query-generator weights for every scale.
#[derive(Debug, Clone)]
pub struct GeneratorParams {
    pub heads: usize,
    pub scales: Vec<ScaleGenParams>,
}

impl GeneratorParams {
    pub fn seeded(channels: &[usize], heads: usize, seed: u64) -> GeneratorParams {
        let mut rng = rng_from(seed);
        let scales = channels
            .iter()
            .map(|&c| {
                let token_std = (2.0 / (c + c) as f64).sqrt();
                let token =
                    (0..c).map(|_| rng.sample::<f64, _>(StandardNormal) * token_std).collect();
                let mut fine_bias = Vec::with_capacity(heads * 9);
                for _ in 0..heads {
                    fine_bias
                        .extend(HALO_OFFSETS.iter().map(|&(du, dv)| (du as f64, dv as f64)));
                }
                ScaleGenParams {
                    token,
                    erp_w1: Mat::xavier(&mut rng, c, 2 * c + 2),
                    erp_b1: vec![0.0; c],
                    erp_w2: Mat::xavier(&mut rng, c, c),
                    erp_b2: vec![0.0; c],
                    coarse_w: Mat::xavier(&mut rng, 2, c),
                    coarse_b: [0.0; 2],
                    fine_w: Mat::zeros(heads * 9 * 2, c),
                    fine_bias,
                }
            })
            .collect();
        GeneratorParams { heads, scales }
    }
}

fn clamp_coord(x: (f64, f64), width: usize, height: usize) -> (f64, f64) {
    (
        x.0.clamp(0.0, (width - 1) as f64),
        x.1.clamp(0.0, (height - 1) as f64),
    )
}

/// Heuristic reference points: dynamic cells ranked by confidence first,
/// then non-dynamic cells by confidence, truncated to the budget. Ties
/// break row-major. If the whole grid is smaller than the budget, the
/// top-ranked cell is repeated.
pub fn select_hrp(dynamic: &BevGrid, confidence: &BevGrid, budget: usize) -> Vec<(usize, usize)> {
    assert_eq!(dynamic.width, confidence.width);
    assert_eq!(dynamic.height, confidence.height);
    let mut pool1 = Vec::new();
    let mut pool2 = Vec::new();
    for v in 0..dynamic.height {
        for u in 0..dynamic.width {
            if dynamic.at(u, v) != 0.0 {
                pool1.push((u, v));
            } else {
                pool2.push((u, v));
            }
        }
    }
    let by_conf_desc = |pool: &mut Vec<(usize, usize)>| {
        pool.sort_by(|&(u1, v1), &(u2, v2)| {
            confidence
                .at(u2, v2)
                .total_cmp(&confidence.at(u1, v1))
                .then_with(|| (v1, u1).cmp(&(v2, u2)))
        });
    };
    by_conf_desc(&mut pool1);
    by_conf_desc(&mut pool2);
    let mut out: Vec<(usize, usize)> = pool1.into_iter().chain(pool2).take(budget).collect();
    if let Some(&first) = out.first() {
        while out.len() < budget {
            out.push(first);
        }
    }
    out
}

/// Nearest-rank quantile of the positive values in a map; None when the map
/// has no positive values.
fn positive_quantile(map: &BevGrid, q: f64) -> Option<f64> {
    let mut pos: Vec<f64> = map.values().iter().copied().filter(|&x| x > 0.0).collect();
    if pos.is_empty() {
        return None;
    }
    let k = (q * (pos.len() - 1) as f64).floor() as usize;
    let (_, kth, _) = pos.select_nth_unstable_by(k, f64::total_cmp);
    Some(*kth)
}

/// Occluder centroids: non-border cells that are 3x3 local maxima of the
/// confidence map and clear the `percentile` quantile of its positive
/// values. On a plateau only the row-major-first cell wins.
pub fn find_occluders(confidence: &BevGrid, percentile: f64) -> Vec<(usize, usize)> {
    let Some(threshold) = positive_quantile(confidence, percentile) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for v in 1..confidence.height.saturating_sub(1) {
        for u in 1..confidence.width.saturating_sub(1) {
            let c = confidence.at(u, v);
            if c < threshold || c <= 0.0 {
                continue;
            }
            let mut is_peak = true;
            'window: for dv in -1i64..=1 {
                for du in -1i64..=1 {
                    if (du, dv) == (0, 0) {
                        continue;
                    }
                    let n = confidence.get(u as i64 + du, v as i64 + dv);
                    let earlier = dv < 0 || (dv == 0 && du < 0);
                    if n > c || (n == c && earlier) {
                        is_peak = false;
                        break 'window;
                    }
                }
            }
            if is_peak {
                out.push((u, v));
            }
        }
    }
    out
}

/// Shadow points behind occluder centroids: each sampled centroid throws a
/// point away from the ego at distance r ~ U[r_min, r_max] cells with
/// lateral jitter s ~ N(0, sigma_lat), clamped into the grid. Centroids are
/// cycled round-robin until the budget fills. Without centroids, points
/// fall on uniform random cells beyond the 75th-percentile range ring
/// around the ego (nearest-rank over all cell distances).
pub fn shadow_sample(
    centroids: &[(usize, usize)],
    ego_cell: (f64, f64),
    budget: usize,
    shadow: &ShadowConfig,
    width: usize,
    height: usize,
    seed: u64,
) -> Vec<Erp> {
    let mut rng = rng_from(seed);
    let mut out = Vec::with_capacity(budget);
    if centroids.is_empty() {
        let mut dists: Vec<f64> = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                dists.push((u as f64 - ego_cell.0).hypot(v as f64 - ego_cell.1));
            }
        }
        let k = (0.75 * (dists.len() - 1) as f64).floor() as usize;
        let (_, kth, _) = dists.select_nth_unstable_by(k, f64::total_cmp);
        let ring = *kth;
        for _ in 0..budget {
            let mut cell = (0usize, 0usize);
            for _ in 0..64 {
                cell = (rng.gen_range(0..width), rng.gen_range(0..height));
                if (cell.0 as f64 - ego_cell.0).hypot(cell.1 as f64 - ego_cell.1) > ring {
                    break;
                }
            }
            let loc = (cell.0 as f64, cell.1 as f64);
            out.push(Erp { loc, centroid: cell, offset: (0.0, 0.0) });
        }
        return out;
    }
    for k in 0..budget {
        let centroid = centroids[k % centroids.len()];
        let c = (centroid.0 as f64, centroid.1 as f64);
        let ray = (c.0 - ego_cell.0, c.1 - ego_cell.1);
        let n = ray.0.hypot(ray.1);
        // A centroid on top of the ego has no ray direction; push along +u.
        let d = if n > 0.0 { (ray.0 / n, ray.1 / n) } else { (1.0, 0.0) };
        let r = rng.gen_range(shadow.r_min..=shadow.r_max);
        let s = if shadow.sigma_lat > 0.0 {
            rng.sample::<f64, _>(StandardNormal) * shadow.sigma_lat
        } else {
            0.0
        };
        let raw = (c.0 + r * d.0 - s * d.1, c.1 + r * d.1 + s * d.0);
        let loc = clamp_coord(raw, width, height);
        out.push(Erp { loc, centroid, offset: (loc.0 - c.0, loc.1 - c.1) });
    }
    out
}

/// Heuristic embeddings: the feature map sampled bilinearly at each point.
pub fn embed_hrp(features: &FeatureMap, hrp: &[(usize, usize)]) -> Vec<Vec<f64>> {
    hrp.iter()
        .map(|&(u, v)| {
            let mut row = vec![0.0; features.channels];
            sample_map_into(features, u as f64, v as f64, Interp::Bilinear, 1.0, &mut row);
            row
        })
        .collect()
}

fn tanh_slice(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// Exploratory embedding input: occluder feature, shadow offset, token.
fn erp_input(features: &FeatureMap, erp: &Erp, token: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(features.channels + 2 + token.len());
    x.extend_from_slice(features.cell(erp.centroid.0, erp.centroid.1));
    x.push(erp.offset.0);
    x.push(erp.offset.1);
    x.extend_from_slice(token);
    x
}

/// Exploratory embeddings: a two-layer MLP (tanh between the layers) over
/// the concatenation of the occluder's feature, the realized shadow offset,
/// and the scale's exploration token.
pub fn embed_erp(
    features: &FeatureMap,
    erp: &[Erp],
    params: &ScaleGenParams,
) -> Result<Vec<Vec<f64>>> {
    let c = features.channels;
    if params.erp_w1.cols != 2 * c + 2 || params.erp_w1.rows != c || params.erp_w2.rows != c {
        return Err(Error::ShapeMismatch(format!(
            "erp mlp expects input {} / output {c}, got {} x {}",
            2 * c + 2,
            params.erp_w1.rows,
            params.erp_w1.cols
        )));
    }
    Ok(erp
        .iter()
        .map(|e| {
            let x = erp_input(features, e, &params.token);
            let mut h = params.erp_w1.matvec(&x);
            for (hi, b) in h.iter_mut().zip(&params.erp_b1) {
                *hi += b;
            }
            tanh_slice(&mut h);
            let mut out = params.erp_w2.matvec(&h);
            for (oi, b) in out.iter_mut().zip(&params.erp_b2) {
                *oi += b;
            }
            out
        })
        .collect())
}

/// Analytic Jacobian of one ERP embedding with respect to the exploration
/// token: `W2 diag(1 - h^2) W1[:, token columns]`.
pub fn erp_token_jacobian(
    features: &FeatureMap,
    erp: &Erp,
    params: &ScaleGenParams,
) -> Mat {
    let c = features.channels;
    let x = erp_input(features, erp, &params.token);
    let mut h = params.erp_w1.matvec(&x);
    for (hi, b) in h.iter_mut().zip(&params.erp_b1) {
        *hi += b;
    }
    let gain: Vec<f64> = h.iter().map(|v| 1.0 - v.tanh().powi(2)).collect();
    let mut jac = Mat::zeros(c, c);
    for i in 0..c {
        for k in 0..c {
            let mut s = 0.0;
            for j in 0..c {
                s += params.erp_w2.data[i * c + j] * gain[j] * params.erp_w1.data[j * (2 * c + 2) + c + 2 + k];
            }
            jac.data[i * c + k] = s;
        }
    }
    jac
}

/// Coarse offsets: `MAX_COARSE_OFFSET * tanh(W e + b)` per anchor.
pub fn coarse_offsets(embeddings: &[Vec<f64>], params: &ScaleGenParams) -> Vec<(f64, f64)> {
    embeddings
        .iter()
        .map(|e| {
            let o = params.coarse_w.matvec(e);
            (
                MAX_COARSE_OFFSET * (o[0] + params.coarse_b[0]).tanh(),
                MAX_COARSE_OFFSET * (o[1] + params.coarse_b[1]).tanh(),
            )
        })
        .collect()
}

/// Fine sampling locations for one anchor: the nudged center plus the
/// per-head 3x3 stencil plus a learned perturbation from the embedding.
pub fn fine_sampling_locations(
    anchor: (f64, f64),
    embedding: &[f64],
    params: &ScaleGenParams,
    heads: usize,
    width: usize,
    height: usize,
) -> Vec<(f64, f64)> {
    let pert = params.fine_w.matvec(embedding);
    let mut out = Vec::with_capacity(heads * 9);
    for k in 0..heads * 9 {
        let (bu, bv) = params.fine_bias[k];
        let raw = (anchor.0 + bu + pert[2 * k], anchor.1 + bv + pert[2 * k + 1]);
        out.push(clamp_coord(raw, width, height));
    }
    out
}

/// Per-scale hinge on the gap between mean exploratory and mean heuristic
/// offset norms. `None` marks scales skipped for lacking one branch.
#[derive(Debug, Clone)]
pub struct OffsetLossReport {
    pub value: f64,
    pub per_scale: Vec<Option<f64>>,
}

/// One scale's hinge term: `[delta - (mean ||O_E|| - mean ||O_H||)]_+`.
pub fn offset_hinge(
    heuristic: &[(f64, f64)],
    exploratory: &[(f64, f64)],
    delta: f64,
) -> Option<f64> {
    if heuristic.is_empty() || exploratory.is_empty() {
        return None;
    }
    let mean_norm = |xs: &[(f64, f64)]| {
        xs.iter().map(|&(a, b)| a.hypot(b)).sum::<f64>() / xs.len() as f64
    };
    Some((delta - (mean_norm(exploratory) - mean_norm(heuristic))).max(0.0))
}

/// Gradient of [`offset_hinge`] with respect to each offset. Zero when the
/// hinge is inactive; the norm subgradient at an exactly-zero offset is 0.
pub fn offset_hinge_gradients(
    heuristic: &[(f64, f64)],
    exploratory: &[(f64, f64)],
    delta: f64,
) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let active = matches!(offset_hinge(heuristic, exploratory, delta), Some(v) if v > 0.0);
    let grad = |xs: &[(f64, f64)], sign: f64| -> Vec<(f64, f64)> {
        let n = xs.len() as f64;
        xs.iter()
            .map(|&(a, b)| {
                let norm = a.hypot(b);
                if !active || norm == 0.0 {
                    (0.0, 0.0)
                } else {
                    (sign * a / (norm * n), sign * b / (norm * n))
                }
            })
            .collect()
    };
    (grad(heuristic, 1.0), grad(exploratory, -1.0))
}

/// Offset-regularization loss over a query set: per-scale hinge terms
/// summed, using each scale's realized centroid-to-shadow distance as the
/// margin. Scales missing a branch (or a margin) are skipped and reported
/// as `None`.
pub fn offset_regularization_loss(qs: &QuerySet) -> OffsetLossReport {
    let mut value = 0.0;
    let mut per_scale = Vec::with_capacity(qs.scales.len());
    for s in &qs.scales {
        let n_h = s.hrp.len();
        let term = s.delta_cells.and_then(|delta| {
            offset_hinge(&s.coarse_offsets[..n_h], &s.coarse_offsets[n_h..], delta)
        });
        if let Some(t) = term {
            value += t;
        }
        per_scale.push(term);
    }
    OffsetLossReport { value, per_scale }
}

/// Generates the full query set for one agent. Branch toggles implement
/// the ablations: a disabled branch contributes no anchors at all.
#[allow(clippy::too_many_arguments)]
pub fn generate_queries(
    priors: &PriorMaps,
    pyramid: &FeaturePyramid,
    spec: &GridSpec,
    cfg: &QueryGenConfig,
    params: &GeneratorParams,
    use_hrp: bool,
    use_erp: bool,
    seed: u64,
) -> Result<QuerySet> {
    let mut scales = Vec::with_capacity(pyramid.levels.len());
    for (l, features) in pyramid.levels.iter().enumerate() {
        let geom = spec.level_geom(l);
        let sp = &params.scales[l];
        let budget = cfg.budgets[l];
        let ego_cell = geom.to_continuous(crate::geometry::Vec2::ZERO);

        let hrp = if use_hrp {
            select_hrp(&priors.dynamic_levels[l], &priors.confidence_levels[l], budget)
        } else {
            Vec::new()
        };
        let erp = if use_erp {
            let centroids = find_occluders(&priors.confidence_levels[l], cfg.occluder_percentile);
            let scale = 1.0 / (1 << l) as f64;
            let shadow = ShadowConfig {
                r_min: cfg.shadow.r_min * scale,
                r_max: cfg.shadow.r_max * scale,
                sigma_lat: cfg.shadow.sigma_lat * scale,
            };
            shadow_sample(
                &centroids,
                ego_cell,
                budget,
                &shadow,
                geom.width,
                geom.height,
                derive_seed(seed, &[tag::SHADOW, l as u64]),
            )
        } else {
            Vec::new()
        };

        let mut embeddings = embed_hrp(features, &hrp);
        embeddings.extend(embed_erp(features, &erp, sp)?);

        let coarse = coarse_offsets(&embeddings, sp);
        let mut anchors = Vec::with_capacity(embeddings.len());
        for (i, &(ou, ov)) in coarse.iter().enumerate() {
            let base = if i < hrp.len() {
                (hrp[i].0 as f64, hrp[i].1 as f64)
            } else {
                erp[i - hrp.len()].loc
            };
            anchors.push(clamp_coord((base.0 + ou, base.1 + ov), geom.width, geom.height));
        }
        let fine = anchors
            .iter()
            .zip(&embeddings)
            .map(|(&a, e)| {
                fine_sampling_locations(a, e, sp, params.heads, geom.width, geom.height)
            })
            .collect();

        let delta_cells = if erp.is_empty() {
            None
        } else {
            Some(
                erp.iter().map(|e| e.offset.0.hypot(e.offset.1)).sum::<f64>() / erp.len() as f64,
            )
        };

        scales.push(ScaleQueries {
            level: l,
            hrp,
            erp,
            embeddings,
            coarse_offsets: coarse,
            anchors,
            fine,
            delta_cells,
        });
    }
    Ok(QuerySet { scales })
}

/// Unique integer cells touched by a scale's fine sampling locations.
pub fn fine_cells(scale: &ScaleQueries) -> IndexSet<(usize, usize)> {
    let mut out = IndexSet::new();
    for locs in &scale.fine {
        for &(u, v) in locs {
            out.insert((u.round() as usize, v.round() as usize));
        }
    }
    out
}
