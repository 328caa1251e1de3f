//! Receiver-side fusion: averaging collaborator payloads into a sparse
//! neighbourhood, gated deformable cross-attention over it, scattering the
//! attended queries back onto the grid, and multi-scale aggregation.

use indexmap::IndexMap;

use crate::bev::{FeatureMap, FeaturePyramid};
use crate::comm::SparseFeatureMessage;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax, Mat};
use crate::querygen::QuerySet;
use crate::seeding::rng_from;

/// How per-cell feature vectors from several collaborators are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AverageMode {
    /// Mean over the collaborators that actually transmitted the cell.
    PresentOnly,
    /// Divide by the total collaborator count; absent senders count as zero.
    OverAllSenders,
}

/// Received features of one scale, keyed by cell.
#[derive(Debug, Clone)]
pub struct ScaleNeighborhood {
    pub channels: usize,
    /// 9 when entries carry the 3x3 halo, 1 when centre-only.
    pub blocks: usize,
    /// Cell -> averaged `blocks * channels` vector.
    pub cells: IndexMap<(u16, u16), Vec<f64>>,
}

impl ScaleNeighborhood {
    pub fn empty(channels: usize) -> Self {
        ScaleNeighborhood {
            channels,
            blocks: 1,
            cells: IndexMap::new(),
        }
    }

    fn center_offset(&self) -> usize {
        if self.blocks == 9 {
            4 * self.channels
        } else {
            0
        }
    }

    /// Centre-block features of a transmitted cell; None when absent.
    pub fn center(&self, cell: (u16, u16)) -> Option<&[f64]> {
        let off = self.center_offset();
        self.cells
            .get(&cell)
            .map(|values| &values[off..off + self.channels])
    }

    /// Bilinear sample of the centre-block features at a continuous cell
    /// coordinate; absent cells read as zero.
    pub fn sample_center_into(&self, u: f64, v: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels);
        out.fill(0.0);
        let u0 = u.floor();
        let v0 = v.floor();
        let fu = u - u0;
        let fv = v - v0;
        let taps = [
            (u0, v0, (1.0 - fu) * (1.0 - fv)),
            (u0 + 1.0, v0, fu * (1.0 - fv)),
            (u0, v0 + 1.0, (1.0 - fu) * fv),
            (u0 + 1.0, v0 + 1.0, fu * fv),
        ];
        for (tu, tv, w) in taps {
            if w == 0.0 || tu < 0.0 || tv < 0.0 || tu > u16::MAX as f64 || tv > u16::MAX as f64 {
                continue;
            }
            if let Some(center) = self.center((tu as u16, tv as u16)) {
                axpy(w, center, out);
            }
        }
    }
}

/// All scales of averaged collaborator features.
#[derive(Debug, Clone)]
pub struct SparseNeighborhood {
    pub scales: Vec<ScaleNeighborhood>,
}

impl SparseNeighborhood {
    pub fn empty(channels: &[usize]) -> Self {
        SparseNeighborhood {
            scales: channels.iter().map(|&c| ScaleNeighborhood::empty(c)).collect(),
        }
    }

    pub fn total_cells(&self) -> usize {
        self.scales.iter().map(|s| s.cells.len()).sum()
    }
}

/// Averages collaborator messages cell by cell. Senders are processed in
/// ascending id order so the result is exactly invariant to the order the
/// messages arrived in.
pub fn average_collaborators(
    messages: &[SparseFeatureMessage],
    channels: &[usize],
    mode: AverageMode,
) -> Result<SparseNeighborhood> {
    let mut order: Vec<&SparseFeatureMessage> = messages.iter().collect();
    order.sort_by_key(|m| m.sender);

    let mut nb = SparseNeighborhood::empty(channels);
    if order.is_empty() {
        return Ok(nb);
    }
    let blocks = order[0].blocks();
    for scale in nb.scales.iter_mut() {
        scale.blocks = blocks;
    }

    let mut counts: Vec<IndexMap<(u16, u16), usize>> =
        channels.iter().map(|_| IndexMap::new()).collect();
    for msg in &order {
        if msg.blocks() != blocks {
            return Err(Error::ShapeMismatch(format!(
                "collaborator {} sent {} blocks per entry, expected {}",
                msg.sender,
                msg.blocks(),
                blocks
            )));
        }
        if msg.scales.len() != channels.len() {
            return Err(Error::ShapeMismatch(format!(
                "collaborator {} sent {} scales, expected {}",
                msg.sender,
                msg.scales.len(),
                channels.len()
            )));
        }
        for (l, scale) in msg.scales.iter().enumerate() {
            let c = channels[l];
            let nb_scale = &mut nb.scales[l];
            for entry in &scale.entries {
                if entry.values.len() != blocks * c {
                    return Err(Error::ShapeMismatch(format!(
                        "entry at {:?} on scale {} has {} values, expected {}",
                        entry.cell,
                        l,
                        entry.values.len(),
                        blocks * c
                    )));
                }
                let acc = nb_scale
                    .cells
                    .entry(entry.cell)
                    .or_insert_with(|| vec![0.0; blocks * c]);
                for (a, &x) in acc.iter_mut().zip(&entry.values) {
                    *a += x as f64;
                }
                *counts[l].entry(entry.cell).or_insert(0) += 1;
            }
        }
    }

    for (l, scale) in nb.scales.iter_mut().enumerate() {
        for (cell, values) in scale.cells.iter_mut() {
            let denom = match mode {
                AverageMode::PresentOnly => counts[l][cell] as f64,
                AverageMode::OverAllSenders => order.len() as f64,
            };
            for x in values.iter_mut() {
                *x /= denom;
            }
        }
    }
    Ok(nb)
}

/// Per-scale deformable-attention weights.
#[derive(Debug, Clone)]
pub struct ScaleAttentionParams {
    pub heads: usize,
    /// Per head: `(channels / heads) x channels` value projection.
    pub value_proj: Vec<Mat>,
    /// `(heads * 9) x channels`; one logit per head and stencil point.
    pub logit_w: Mat,
    pub logit_b: Vec<f64>,
    /// `channels x channels` output projection over the head concat.
    pub out_proj: Mat,
    /// Zero-initialised so an empty neighbourhood yields exactly zero.
    pub out_bias: Vec<f64>,
}

impl ScaleAttentionParams {
    pub fn channels(&self) -> usize {
        self.out_proj.rows
    }

    pub fn seeded<R: rand::Rng>(channels: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && channels % heads == 0, "heads must divide channels");
        let ch = channels / heads;
        ScaleAttentionParams {
            heads,
            value_proj: (0..heads).map(|_| Mat::xavier(rng, ch, channels)).collect(),
            logit_w: Mat::xavier(rng, heads * 9, channels),
            logit_b: vec![0.0; heads * 9],
            out_proj: Mat::xavier(rng, channels, channels),
            out_bias: vec![0.0; channels],
        }
    }

    /// Diagnostic weights: head h copies its own channel block, the output
    /// projection is identity, and all logits are zero until the bias is
    /// set. With a large bias on one stencil point per head the attention
    /// output equals the bilinear sample at that point.
    pub fn identity_probe(channels: usize, heads: usize) -> Self {
        assert!(heads > 0 && channels % heads == 0, "heads must divide channels");
        let ch = channels / heads;
        let value_proj = (0..heads)
            .map(|h| {
                let mut m = Mat::zeros(ch, channels);
                for r in 0..ch {
                    m.row_mut(r)[h * ch + r] = 1.0;
                }
                m
            })
            .collect();
        ScaleAttentionParams {
            heads,
            value_proj,
            logit_w: Mat::zeros(heads * 9, channels),
            logit_b: vec![0.0; heads * 9],
            out_proj: Mat::identity(channels),
            out_bias: vec![0.0; channels],
        }
    }
}

/// Stencil logits for one query embedding: `heads * 9` values.
pub fn attention_logits(embedding: &[f64], params: &ScaleAttentionParams) -> Vec<f64> {
    debug_assert_eq!(embedding.len(), params.channels());
    let mut logits = params.logit_w.matvec(embedding);
    for (l, b) in logits.iter_mut().zip(&params.logit_b) {
        *l += b;
    }
    logits
}

/// Attention forward pass from precomputed logits: per head, softmax the 9
/// stencil logits, bilinearly sample the neighbourhood at each fine
/// location, project values per head, blend, concat, and project out.
pub fn attention_from_logits(
    logits: &[f64],
    locations: &[(f64, f64)],
    nb: &ScaleNeighborhood,
    params: &ScaleAttentionParams,
) -> Vec<f64> {
    let c = params.channels();
    let heads = params.heads;
    let ch = c / heads;
    assert_eq!(logits.len(), heads * 9);
    assert_eq!(locations.len(), heads * 9);
    assert_eq!(nb.channels, c);

    let mut concat = vec![0.0; c];
    let mut sample = vec![0.0; c];
    let mut value = vec![0.0; ch];
    for h in 0..heads {
        let weights = softmax(&logits[h * 9..(h + 1) * 9]);
        for (p, &w) in weights.iter().enumerate() {
            let (u, v) = locations[h * 9 + p];
            nb.sample_center_into(u, v, &mut sample);
            params.value_proj[h].matvec_into(&sample, &mut value);
            axpy(w, &value, &mut concat[h * ch..(h + 1) * ch]);
        }
    }
    let mut out = params.out_proj.matvec(&concat);
    for (o, b) in out.iter_mut().zip(&params.out_bias) {
        *o += b;
    }
    out
}

/// Full attention pass for every query of one scale.
pub fn deformable_cross_attention(
    embeddings: &[Vec<f64>],
    fine_locations: &[Vec<(f64, f64)>],
    nb: &ScaleNeighborhood,
    params: &ScaleAttentionParams,
) -> Vec<Vec<f64>> {
    debug_assert_eq!(embeddings.len(), fine_locations.len());
    embeddings
        .iter()
        .zip(fine_locations)
        .map(|(e, locs)| {
            let logits = attention_logits(e, params);
            attention_from_logits(&logits, locs, nb, params)
        })
        .collect()
}

/// Analytic gradient of `upstream . attention_from_logits(logits, ...)`
/// with respect to the logits. For each head the softmax pullback is
/// `w_p * (a_p - sum_r w_r a_r)` where `a_p` is the upstream sensitivity
/// of stencil point p's projected value.
pub fn attention_logit_vjp(
    logits: &[f64],
    locations: &[(f64, f64)],
    nb: &ScaleNeighborhood,
    params: &ScaleAttentionParams,
    upstream: &[f64],
) -> Vec<f64> {
    let c = params.channels();
    let heads = params.heads;
    let ch = c / heads;
    assert_eq!(upstream.len(), c);

    let grad_concat = params.out_proj.matvec_t(upstream);
    let mut grad = vec![0.0; heads * 9];
    let mut sample = vec![0.0; c];
    let mut value = vec![0.0; ch];
    for h in 0..heads {
        let weights = softmax(&logits[h * 9..(h + 1) * 9]);
        let mut a = [0.0; 9];
        for (p, slot) in a.iter_mut().enumerate() {
            let (u, v) = locations[h * 9 + p];
            nb.sample_center_into(u, v, &mut sample);
            params.value_proj[h].matvec_into(&sample, &mut value);
            *slot = dot(&grad_concat[h * ch..(h + 1) * ch], &value);
        }
        let mean: f64 = weights.iter().zip(&a).map(|(w, x)| w * x).sum();
        for p in 0..9 {
            grad[h * 9 + p] = weights[p] * (a[p] - mean);
        }
    }
    grad
}

/// Writes attended query outputs back onto a dense grid at the rounded
/// anchor cells. Cells hit by several anchors store the mean; untouched
/// cells stay exactly zero.
pub fn scatter_to_grid(
    rows: &[Vec<f64>],
    anchors: &[(f64, f64)],
    channels: usize,
    width: usize,
    height: usize,
) -> FeatureMap {
    debug_assert_eq!(rows.len(), anchors.len());
    let mut out = FeatureMap::zeros(channels, width, height);
    let mut counts: IndexMap<(usize, usize), usize> = IndexMap::new();
    for (row, &(au, av)) in rows.iter().zip(anchors) {
        debug_assert_eq!(row.len(), channels);
        let u = au.round();
        let v = av.round();
        if u < 0.0 || v < 0.0 || u as usize >= width || v as usize >= height {
            continue;
        }
        let (u, v) = (u as usize, v as usize);
        axpy(1.0, row, out.cell_mut(u, v));
        *counts.entry((u, v)).or_insert(0) += 1;
    }
    for ((u, v), n) in counts {
        if n > 1 {
            let inv = 1.0 / n as f64;
            for x in out.cell_mut(u, v) {
                *x *= inv;
            }
        }
    }
    out
}

/// Per-channel sigmoid gate over the concatenated ego and received
/// features.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// `channels x 2*channels`.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl GateParams {
    pub fn seeded<R: rand::Rng>(channels: usize, rng: &mut R) -> Self {
        GateParams {
            w: Mat::xavier(rng, channels, 2 * channels),
            b: vec![0.0; channels],
        }
    }
}

/// Blend policy; `EgoOnly` bypasses the gate entirely so a non-cooperative
/// run reproduces the ego features bit for bit.
#[derive(Debug, Clone)]
pub enum Gate {
    Learned(GateParams),
    EgoOnly,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Convex per-channel blend of ego and received maps on the union of their
/// supports. Written as `f + g * (fc - f)` so equal inputs pass through
/// exactly; cells empty on both sides stay exactly zero.
pub fn gated_blend(ego: &FeatureMap, cav: &FeatureMap, gate: &Gate) -> Result<FeatureMap> {
    if ego.width != cav.width || ego.height != cav.height || ego.channels != cav.channels {
        return Err(Error::ShapeMismatch(format!(
            "gated blend: ego {}x{}x{} vs received {}x{}x{}",
            ego.width, ego.height, ego.channels, cav.width, cav.height, cav.channels
        )));
    }
    let params = match gate {
        Gate::EgoOnly => return Ok(ego.clone()),
        Gate::Learned(p) => p,
    };
    let c = ego.channels;
    if params.w.rows != c || params.w.cols != 2 * c || params.b.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "gate weights {}x{} with {} biases do not fit {} channels",
            params.w.rows,
            params.w.cols,
            params.b.len(),
            c
        )));
    }
    let mut out = FeatureMap::zeros(c, ego.width, ego.height);
    let mut input = vec![0.0; 2 * c];
    for v in 0..ego.height {
        for u in 0..ego.width {
            if !ego.occupied(u, v) && !cav.occupied(u, v) {
                continue;
            }
            let f = ego.cell(u, v);
            let fc = cav.cell(u, v);
            input[..c].copy_from_slice(f);
            input[c..].copy_from_slice(fc);
            let cell = out.cell_mut(u, v);
            for ch in 0..c {
                let g = sigmoid(dot(params.w.row(ch), &input) + params.b[ch]);
                cell[ch] = f[ch] + g * (fc[ch] - f[ch]);
            }
        }
    }
    Ok(out)
}

/// Linear maps taking every scale's channels down to the finest scale's.
#[derive(Debug, Clone)]
pub struct AggregatorParams {
    /// Per level: `channels[0] x channels[l]`.
    pub proj: Vec<Mat>,
}

impl AggregatorParams {
    pub fn seeded<R: rand::Rng>(channels: &[usize], rng: &mut R) -> Self {
        let c0 = channels.first().copied().unwrap_or(0);
        AggregatorParams {
            proj: channels.iter().map(|&c| Mat::xavier(rng, c0, c)).collect(),
        }
    }
}

/// Nearest-neighbour upsample of every level to the finest lattice,
/// project to the finest channel width, and sum. Linear and
/// zero-preserving: empty input cells never touch the output.
pub fn aggregate_scales(pyramid: &FeaturePyramid, params: &AggregatorParams) -> Result<FeatureMap> {
    let base = pyramid
        .levels
        .first()
        .ok_or_else(|| Error::ShapeMismatch("aggregate: empty pyramid".into()))?;
    if params.proj.len() != pyramid.levels.len() {
        return Err(Error::ShapeMismatch(format!(
            "aggregate: {} projections for {} levels",
            params.proj.len(),
            pyramid.levels.len()
        )));
    }
    let c0 = base.channels;
    let mut out = FeatureMap::zeros(c0, base.width, base.height);
    for (l, map) in pyramid.levels.iter().enumerate() {
        let proj = &params.proj[l];
        if proj.rows != c0 || proj.cols != map.channels {
            return Err(Error::ShapeMismatch(format!(
                "aggregate: projection {} is {}x{}, needs {}x{}",
                l, proj.rows, proj.cols, c0, map.channels
            )));
        }
        let factor = 1usize << l;
        for (u, v) in map.nonzero_cells() {
            let projected = proj.matvec(map.cell(u, v));
            for dy in 0..factor {
                let y = v * factor + dy;
                if y >= out.height {
                    break;
                }
                for dx in 0..factor {
                    let x = u * factor + dx;
                    if x >= out.width {
                        break;
                    }
                    axpy(1.0, &projected, out.cell_mut(x, y));
                }
            }
        }
    }
    Ok(out)
}

/// Everything the fusion stage needs, one seed away.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub attention: Vec<ScaleAttentionParams>,
    pub gate: Vec<GateParams>,
    pub aggregator: AggregatorParams,
    pub average: AverageMode,
}

impl FusionParams {
    pub fn seeded(channels: &[usize], heads: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let attention = channels
            .iter()
            .map(|&c| ScaleAttentionParams::seeded(c, heads, &mut rng))
            .collect();
        let gate = channels
            .iter()
            .map(|&c| GateParams::seeded(c, &mut rng))
            .collect();
        let aggregator = AggregatorParams::seeded(channels, &mut rng);
        FusionParams {
            attention,
            gate,
            aggregator,
            average: AverageMode::PresentOnly,
        }
    }
}

/// Outputs of one fused frame.
#[derive(Debug, Clone)]
pub struct FusedFrame {
    /// Attention outputs scattered at the rounded anchor cells.
    pub cav: FeaturePyramid,
    /// Gated blend of ego and received features per level.
    pub blended: FeaturePyramid,
    /// Single-map summary at the finest scale.
    pub aggregated: FeatureMap,
}

/// Runs attention, scatter, blend, and aggregation for one frame. With
/// `ego_only` (or no queries) the received branch is skipped and the
/// blended pyramid equals the ego pyramid exactly.
pub fn fuse_frame(
    ego: &FeaturePyramid,
    queries: Option<&QuerySet>,
    nb: &SparseNeighborhood,
    params: &FusionParams,
    ego_only: bool,
) -> Result<FusedFrame> {
    let mut cav = FeaturePyramid {
        levels: ego
            .levels
            .iter()
            .map(|m| FeatureMap::zeros(m.channels, m.width, m.height))
            .collect(),
    };
    let blended = if ego_only || queries.is_none() {
        ego.clone()
    } else {
        let queries = queries.unwrap();
        if queries.scales.len() != ego.levels.len() || nb.scales.len() != ego.levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "fuse: {} query scales, {} neighbourhood scales, {} levels",
                queries.scales.len(),
                nb.scales.len(),
                ego.levels.len()
            )));
        }
        let mut levels = Vec::with_capacity(ego.levels.len());
        for (l, scale) in queries.scales.iter().enumerate() {
            let map = &ego.levels[l];
            let rows = deformable_cross_attention(
                &scale.embeddings,
                &scale.fine,
                &nb.scales[l],
                &params.attention[l],
            );
            cav.levels[l] =
                scatter_to_grid(&rows, &scale.anchors, map.channels, map.width, map.height);
            levels.push(gated_blend(
                map,
                &cav.levels[l],
                &Gate::Learned(params.gate[l].clone()),
            )?);
        }
        FeaturePyramid { levels }
    };
    let aggregated = aggregate_scales(&blended, &params.aggregator)?;
    Ok(FusedFrame {
        cav,
        blended,
        aggregated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comm::{FeatureEntry, ScaleEntries};
    use crate::geometry::Vec2;
    use crate::scene::AgentPose;
    use rand::Rng;

    fn message(
        sender: u32,
        halo: bool,
        scales: Vec<Vec<((u16, u16), Vec<f32>)>>,
    ) -> SparseFeatureMessage {
        SparseFeatureMessage {
            sender,
            frame: 0,
            pose: AgentPose::exact(Vec2::ZERO, 0.0),
            halo,
            scales: scales
                .into_iter()
                .map(|entries| ScaleEntries {
                    entries: entries
                        .into_iter()
                        .map(|(cell, values)| FeatureEntry { cell, values })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Neighbourhood with centre-only blocks, values chosen exactly
    /// representable in f32.
    fn probe_neighborhood(channels: usize) -> ScaleNeighborhood {
        let mut cells = IndexMap::new();
        for (i, &cell) in [(10u16, 10u16), (11, 10), (10, 11), (11, 11), (13, 10)]
            .iter()
            .enumerate()
        {
            let values: Vec<f64> = (0..channels)
                .map(|ch| 0.25 * (i * channels + ch) as f64 - 1.5)
                .collect();
            cells.insert(cell, values);
        }
        ScaleNeighborhood {
            channels,
            blocks: 1,
            cells,
        }
    }

    #[test]
    fn averaging_is_exactly_permutation_invariant() {
        let a = message(
            2,
            true,
            vec![vec![((4, 4), vec![0.3; 9 * 2]), ((5, 4), vec![-1.0; 9 * 2])]],
        );
        let b = message(0, true, vec![vec![((4, 4), vec![0.7; 9 * 2])]]);
        let c = message(1, true, vec![vec![((6, 6), vec![2.5; 9 * 2])]]);

        let fwd = average_collaborators(
            &[a.clone(), b.clone(), c.clone()],
            &[2],
            AverageMode::PresentOnly,
        )
        .unwrap();
        let rev = average_collaborators(&[c, a, b], &[2], AverageMode::PresentOnly).unwrap();

        assert_eq!(fwd.scales[0].cells.len(), rev.scales[0].cells.len());
        for (cell, values) in &fwd.scales[0].cells {
            let other = &rev.scales[0].cells[cell];
            assert_eq!(values, other, "cell {:?}", cell);
        }
        // Shared cell holds the exact two-sender mean.
        let shared = &fwd.scales[0].cells[&(4u16, 4u16)];
        assert!(shared.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn absent_senders_only_dilute_in_over_all_mode() {
        let a = message(0, false, vec![vec![((3, 3), vec![1.0; 4])]]);
        let b = message(1, false, vec![vec![((9, 9), vec![2.0; 4])]]);

        let present =
            average_collaborators(&[a.clone(), b.clone()], &[4], AverageMode::PresentOnly)
                .unwrap();
        assert!(present.scales[0].cells[&(3u16, 3u16)].iter().all(|&x| x == 1.0));

        let diluted =
            average_collaborators(&[a, b], &[4], AverageMode::OverAllSenders).unwrap();
        assert!(diluted.scales[0].cells[&(3u16, 3u16)].iter().all(|&x| x == 0.5));
    }

    #[test]
    fn mixed_block_layouts_are_rejected() {
        let a = message(0, true, vec![vec![((3, 3), vec![1.0; 9 * 4])]]);
        let b = message(1, false, vec![vec![((3, 3), vec![1.0; 4])]]);
        assert!(matches!(
            average_collaborators(&[a.clone(), b], &[4], AverageMode::PresentOnly),
            Err(Error::ShapeMismatch(_))
        ));

        let short = message(1, true, vec![vec![((3, 3), vec![1.0; 5])]]);
        assert!(matches!(
            average_collaborators(&[a, short], &[4], AverageMode::PresentOnly),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn halo_center_lookup_reads_block_four() {
        let mut values = vec![0.0f32; 9 * 2];
        values[4 * 2] = 3.0;
        values[4 * 2 + 1] = -1.0;
        values[0] = 99.0; // corner block, must not leak into the centre
        let msg = message(0, true, vec![vec![((7, 8), values)]]);
        let nb = average_collaborators(&[msg], &[2], AverageMode::PresentOnly).unwrap();
        assert_eq!(nb.scales[0].center((7, 8)).unwrap(), &[3.0, -1.0]);
        assert!(nb.scales[0].center((0, 0)).is_none());
    }

    #[test]
    fn sampling_blends_present_cells_and_reads_absent_as_zero() {
        let nb = probe_neighborhood(2);
        let mut out = vec![0.0; 2];

        // Exactly on a present cell.
        nb.sample_center_into(10.0, 10.0, &mut out);
        assert_eq!(out, vec![-1.5, -1.25]);

        // Halfway toward an absent cell: half the present value.
        nb.sample_center_into(13.5, 10.0, &mut out);
        let full: Vec<f64> = nb.center((13, 10)).unwrap().to_vec();
        assert_eq!(out, vec![full[0] * 0.5, full[1] * 0.5]);

        // Far from any content.
        nb.sample_center_into(40.0, 40.0, &mut out);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn saturated_one_hot_attention_reproduces_bilinear_sampling() {
        let channels = 8;
        let heads = 4;
        let nb = probe_neighborhood(channels);
        let mut params = ScaleAttentionParams::identity_probe(channels, heads);

        // Head h puts all mass on stencil point h; every head samples the
        // same fractional location.
        let loc = (10.3, 10.6);
        let mut locations = vec![(0.0, 0.0); heads * 9];
        for h in 0..heads {
            params.logit_b[h * 9 + h] = 40.0;
            locations[h * 9 + h] = loc;
        }
        let logits = attention_logits(&vec![0.0; channels], &params);
        let got = attention_from_logits(&logits, &locations, &nb, &params);

        let mut want = vec![0.0; channels];
        nb.sample_center_into(loc.0, loc.1, &mut want);
        for ch in 0..channels {
            assert!(
                (got[ch] - want[ch]).abs() < 1e-6,
                "channel {}: {} vs {}",
                ch,
                got[ch],
                want[ch]
            );
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_head() {
        let mut rng = rng_from(11);
        let params = ScaleAttentionParams::seeded(8, 4, &mut rng);
        let embedding: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits = attention_logits(&embedding, &params);
        for h in 0..4 {
            let sum: f64 = softmax(&logits[h * 9..(h + 1) * 9]).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "head {}: {}", h, sum);
        }
    }

    #[test]
    fn empty_neighborhood_yields_exactly_zero_output() {
        let mut rng = rng_from(3);
        let params = ScaleAttentionParams::seeded(8, 4, &mut rng);
        let nb = ScaleNeighborhood::empty(8);
        let embedding: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let locations: Vec<(f64, f64)> = (0..36).map(|i| (i as f64, 5.0)).collect();
        let logits = attention_logits(&embedding, &params);
        let out = attention_from_logits(&logits, &locations, &nb, &params);
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logit_gradient_matches_central_differences() {
        let channels = 8;
        let heads = 4;
        let mut rng = rng_from(17);
        let params = ScaleAttentionParams::seeded(channels, heads, &mut rng);
        let nb = probe_neighborhood(channels);
        let locations: Vec<(f64, f64)> = (0..heads * 9)
            .map(|_| (rng.gen_range(9.5..12.5), rng.gen_range(9.5..11.5)))
            .collect();
        let logits: Vec<f64> = (0..heads * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let analytic = attention_logit_vjp(&logits, &locations, &nb, &params, &upstream);
        let eps = 1e-5;
        for i in 0..logits.len() {
            let mut plus = logits.clone();
            plus[i] += eps;
            let mut minus = logits.clone();
            minus[i] -= eps;
            let fd = (dot(&attention_from_logits(&plus, &locations, &nb, &params), &upstream)
                - dot(
                    &attention_from_logits(&minus, &locations, &nb, &params),
                    &upstream,
                ))
                / (2.0 * eps);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic[i] - fd) / denom).abs() < 1e-6,
                "logit {}: analytic {} vs fd {}",
                i,
                analytic[i],
                fd
            );
        }
    }

    #[test]
    fn scatter_averages_anchors_that_round_to_the_same_cell() {
        let rows = vec![vec![2.0, 4.0], vec![4.0, 8.0], vec![10.0, 0.0]];
        let anchors = vec![(5.2, 5.4), (4.9, 4.6), (0.0, 0.0)];
        let map = scatter_to_grid(&rows, &anchors, 2, 20, 20);
        assert_eq!(map.cell(5, 5), &[3.0, 6.0]);
        assert_eq!(map.cell(0, 0), &[10.0, 0.0]);
        assert_eq!(map.nonzero_cells().len(), 2);
    }

    #[test]
    fn saturated_gates_pass_through_one_side() {
        let mut ego = FeatureMap::zeros(4, 8, 8);
        let mut cav = FeatureMap::zeros(4, 8, 8);
        for ch in 0..4 {
            ego.cell_mut(2, 3)[ch] = 0.2 + 0.3 * ch as f64;
            cav.cell_mut(2, 3)[ch] = -0.5 * ch as f64 - 0.3;
        }
        cav.cell_mut(6, 6)[0] = 3.0; // cell absent on the ego side

        let open = Gate::Learned(GateParams {
            w: Mat::zeros(4, 8),
            b: vec![20.0; 4],
        });
        let blended = gated_blend(&ego, &cav, &open).unwrap();
        for ch in 0..4 {
            assert!((blended.cell(2, 3)[ch] - cav.cell(2, 3)[ch]).abs() < 1e-8);
        }
        assert!((blended.cell(6, 6)[0] - 3.0).abs() < 1e-8);

        let closed = Gate::Learned(GateParams {
            w: Mat::zeros(4, 8),
            b: vec![-20.0; 4],
        });
        let blended = gated_blend(&ego, &cav, &closed).unwrap();
        for ch in 0..4 {
            assert!((blended.cell(2, 3)[ch] - ego.cell(2, 3)[ch]).abs() < 1e-8);
        }
        assert!(blended.cell(6, 6)[0].abs() < 1e-8);
    }

    #[test]
    fn blend_is_convex_and_exact_on_equal_inputs() {
        let mut rng = rng_from(23);
        let mut ego = FeatureMap::zeros(3, 10, 10);
        let mut cav = FeatureMap::zeros(3, 10, 10);
        for v in 0..10 {
            for u in 0..5 {
                for ch in 0..3 {
                    ego.cell_mut(u, v)[ch] = rng.gen_range(-3.0..3.0);
                    cav.cell_mut(u, v)[ch] = rng.gen_range(-3.0..3.0);
                }
            }
        }
        let gate = Gate::Learned(GateParams::seeded(3, &mut rng));
        let blended = gated_blend(&ego, &cav, &gate).unwrap();
        for v in 0..10 {
            for u in 0..10 {
                for ch in 0..3 {
                    let f = ego.cell(u, v)[ch];
                    let fc = cav.cell(u, v)[ch];
                    let out = blended.cell(u, v)[ch];
                    assert!(out >= f.min(fc) - 1e-12 && out <= f.max(fc) + 1e-12);
                }
            }
        }

        // Identical inputs pass through bit for bit.
        let same = gated_blend(&ego, &ego, &gate).unwrap();
        assert_eq!(same.values(), ego.values());

        // Ego-only policy ignores the received map entirely.
        let ego_only = gated_blend(&ego, &cav, &Gate::EgoOnly).unwrap();
        assert_eq!(ego_only.values(), ego.values());

        let wrong = FeatureMap::zeros(3, 9, 10);
        assert!(gated_blend(&ego, &wrong, &gate).is_err());
    }

    #[test]
    fn blend_keeps_empty_cells_exactly_zero() {
        let ego = FeatureMap::zeros(2, 6, 6);
        let mut cav = FeatureMap::zeros(2, 6, 6);
        cav.cell_mut(1, 1)[0] = 5.0;
        let gate = Gate::Learned(GateParams {
            w: Mat::zeros(2, 4),
            b: vec![3.0; 2],
        });
        let blended = gated_blend(&ego, &cav, &gate).unwrap();
        assert_eq!(blended.nonzero_cells(), vec![(1, 1)]);
        // Gate at bias 3 keeps sigmoid(3) of the received value.
        assert!((blended.cell(1, 1)[0] - sigmoid(3.0) * 5.0).abs() < 1e-12);
        assert_eq!(blended.cell(1, 1)[1], 0.0);
    }

    #[test]
    fn aggregation_is_linear_and_upsamples_nearest() {
        let channels = [4usize, 8, 16];
        let spec = crate::bev::GridSpec::desk();
        let mut rng = rng_from(31);
        let params = AggregatorParams::seeded(&channels, &mut rng);

        let mut p1 = FeaturePyramid::zeros(&channels, &spec);
        let mut p2 = FeaturePyramid::zeros(&channels, &spec);
        for pyr in [&mut p1, &mut p2] {
            for map in pyr.levels.iter_mut() {
                for _ in 0..6 {
                    let u = rng.gen_range(0..map.width);
                    let v = rng.gen_range(0..map.height);
                    for ch in 0..map.channels {
                        map.cell_mut(u, v)[ch] = rng.gen_range(-2.0..2.0);
                    }
                }
            }
        }
        let (a, b) = (1.75, -0.5);
        let mut combo = FeaturePyramid::zeros(&channels, &spec);
        for (l, map) in combo.levels.iter_mut().enumerate() {
            let x1 = p1.levels[l].values();
            let x2 = p2.levels[l].values();
            for (i, x) in map.values_mut().iter_mut().enumerate() {
                *x = a * x1[i] + b * x2[i];
            }
        }
        let s1 = aggregate_scales(&p1, &params).unwrap();
        let s2 = aggregate_scales(&p2, &params).unwrap();
        let sc = aggregate_scales(&combo, &params).unwrap();
        for (i, &x) in sc.values().iter().enumerate() {
            let want = a * s1.values()[i] + b * s2.values()[i];
            assert!((x - want).abs() < 1e-9, "index {}: {} vs {}", i, x, want);
        }

        // A single coarse cell fills exactly its nearest-neighbour block.
        let mut coarse = FeaturePyramid::zeros(&channels, &spec);
        for ch in 0..16 {
            coarse.levels[2].cell_mut(3, 2)[ch] = 1.0 + ch as f64;
        }
        let up = aggregate_scales(&coarse, &params).unwrap();
        let want = params.proj[2].matvec(coarse.levels[2].cell(3, 2));
        let cells = up.nonzero_cells();
        assert_eq!(cells.len(), 16);
        for (u, v) in cells {
            assert!((12..16).contains(&u) && (8..12).contains(&v));
            for ch in 0..4 {
                assert!((up.cell(u, v)[ch] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregation_leaves_rows_without_a_coarse_parent_empty() {
        // Desk level 2 is 44x12; 12 * 4 = 48 < 50, so the two topmost
        // level-0 rows have no coarse parent and must stay zero.
        let channels = [4usize, 8, 16];
        let spec = crate::bev::GridSpec::desk();
        let mut rng = rng_from(37);
        let params = AggregatorParams::seeded(&channels, &mut rng);
        let mut pyr = FeaturePyramid::zeros(&channels, &spec);
        for u in 0..44 {
            for v in 0..12 {
                pyr.levels[2].cell_mut(u, v)[0] = 1.0;
            }
        }
        let out = aggregate_scales(&pyr, &params).unwrap();
        for u in 0..out.width {
            assert!(!out.occupied(u, 48));
            assert!(!out.occupied(u, 49));
            assert!(out.occupied(u, 47));
        }
    }

    #[test]
    fn only_finest_level_content_aggregates_to_its_projection() {
        let channels = [4usize, 8, 16];
        let spec = crate::bev::GridSpec::desk();
        let mut rng = rng_from(41);
        let params = AggregatorParams::seeded(&channels, &mut rng);
        let mut pyr = FeaturePyramid::zeros(&channels, &spec);
        for ch in 0..4 {
            pyr.levels[0].cell_mut(30, 20)[ch] = 0.5 * ch as f64 - 1.0;
        }
        let out = aggregate_scales(&pyr, &params).unwrap();
        assert_eq!(out.nonzero_cells(), vec![(30, 20)]);
        let want = params.proj[0].matvec(pyr.levels[0].cell(30, 20));
        for ch in 0..4 {
            assert!((out.cell(30, 20)[ch] - want[ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn ego_only_fusion_reproduces_the_ego_pyramid_bit_for_bit() {
        let channels = [4usize, 8, 16];
        let spec = crate::bev::GridSpec::desk();
        let mut rng = rng_from(43);
        let mut ego = FeaturePyramid::zeros(&channels, &spec);
        for map in ego.levels.iter_mut() {
            for _ in 0..8 {
                let u = rng.gen_range(0..map.width);
                let v = rng.gen_range(0..map.height);
                for ch in 0..map.channels {
                    map.cell_mut(u, v)[ch] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        let params = FusionParams::seeded(&channels, 4, 99);
        let nb = SparseNeighborhood::empty(&channels);
        let fused = fuse_frame(&ego, None, &nb, &params, true).unwrap();
        for (l, map) in fused.blended.levels.iter().enumerate() {
            assert_eq!(map.values(), ego.levels[l].values());
            assert!(fused.cav.levels[l].values().iter().all(|&x| x == 0.0));
        }
        let direct = aggregate_scales(&ego, &params.aggregator).unwrap();
        assert_eq!(fused.aggregated.values(), direct.values());
    }
}
