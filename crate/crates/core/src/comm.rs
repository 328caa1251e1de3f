//! Agent-to-agent messaging: compact wire codecs for query and sparse
//! feature messages, halo extraction around requested cells, collaborator
//! selection against a warped density map, and byte-exact payload metering.

use std::io::Write;

use indexmap::IndexSet;

use crate::bev::{sample_grid, BevGrid, FeatureMap, FeaturePyramid, Interp, LevelGeom};
use crate::error::{Error, Result};
use crate::geometry::Pose2;
use crate::querygen::{QuerySet, HALO_OFFSETS};
use crate::scene::AgentPose;

/// Leading bytes of every message.
pub const WIRE_MAGIC: [u8; 4] = *b"SLIM";
/// Bumped on any incompatible layout change.
pub const WIRE_VERSION: u16 = 1;

/// Bytes preceding the pose block: magic, version, kind, sender, frame,
/// scale count.
pub const WIRE_HEADER_BYTES: usize = 4 + 2 + 1 + 4 + 4 + 2;
/// Pose block: x, y, yaw as f32.
pub const WIRE_POSE_BYTES: usize = 12;

const KIND_QUERY: u8 = 0;
const KIND_HALO: u8 = 1;
const KIND_CENTER: u8 = 2;

/// Per-sender ceiling on transmitted elements at full budgets and full
/// channel widths: 2 anchors per budget slot, 9 blocks per cell.
pub const FULL_BUDGET_ELEMENT_BOUND: u64 = 1_382_400;
/// Element count of a dense three-level pyramid at full channel widths.
pub const FULL_MAP_DENSE_ELEMENTS: u64 = 7_884_800;

/// Worst-case transmitted elements for one sender: every anchor retained,
/// no dedup, no zero skipped.
pub fn budget_element_bound(budgets: &[usize; 3], channels: &[usize; 3], halo: bool) -> u64 {
    let blocks = if halo { 9 } else { 1 };
    budgets
        .iter()
        .zip(channels.iter())
        .map(|(&n, &c)| 2 * n as u64 * blocks * c as u64)
        .sum()
}

/// Anchor cells one agent asks its collaborators to fill in.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryMessage {
    pub sender: u32,
    pub frame: u32,
    /// Broadcast pose of the sender; carries injected noise when enabled.
    pub pose: AgentPose,
    /// Rounded nudged anchor cells per scale, row-major order, duplicates
    /// kept so the count always equals the anchor count.
    pub cells: Vec<Vec<(u16, u16)>>,
}

/// Rounds the nudged anchors of every scale to integer cells.
pub fn build_query_message(
    queries: &QuerySet,
    sender: u32,
    frame: u32,
    pose: &AgentPose,
) -> QueryMessage {
    let cells = queries
        .scales
        .iter()
        .map(|scale| {
            let mut cells: Vec<(u16, u16)> = scale
                .anchors
                .iter()
                .map(|&(u, v)| (u.round() as u16, v.round() as u16))
                .collect();
            cells.sort_unstable_by_key(|&(u, v)| (v, u));
            cells
        })
        .collect();
    QueryMessage {
        sender,
        frame,
        pose: *pose,
        cells,
    }
}

/// One transmitted cell and its feature block(s).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEntry {
    pub cell: (u16, u16),
    /// `blocks * channels` values; block 4 is the centre cell when haloed.
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScaleEntries {
    pub entries: Vec<FeatureEntry>,
}

/// Sparse feature payload, already warped into the receiver's frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureMessage {
    pub sender: u32,
    pub frame: u32,
    pub pose: AgentPose,
    /// True when each entry carries the full 3x3 neighbourhood.
    pub halo: bool,
    pub scales: Vec<ScaleEntries>,
}

impl SparseFeatureMessage {
    pub fn blocks(&self) -> usize {
        if self.halo {
            9
        } else {
            1
        }
    }

    /// Non-zero transmitted values per scale (first three scales).
    pub fn elements(&self) -> [u64; 3] {
        let mut out = [0u64; 3];
        for (l, scale) in self.scales.iter().enumerate().take(3) {
            out[l] = scale
                .entries
                .iter()
                .map(|e| e.values.iter().filter(|&&x| x != 0.0).count() as u64)
                .sum();
        }
        out
    }
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    off: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, off: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.buf.len() {
            return Err(Error::Decode {
                offset: self.off,
                reason: format!(
                    "truncated while reading {} ({} bytes needed, {} left)",
                    what,
                    n,
                    self.buf.len() - self.off
                ),
            });
        }
        let slice = &self.buf[self.off..self.off + n];
        self.off += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.off != self.buf.len() {
            return Err(Error::Decode {
                offset: self.off,
                reason: format!("{} trailing bytes after message body", self.buf.len() - self.off),
            });
        }
        Ok(())
    }
}

fn put_header(out: &mut Vec<u8>, kind: u8, sender: u32, frame: u32, nscales: u16) {
    out.extend_from_slice(&WIRE_MAGIC);
    put_u16(out, WIRE_VERSION);
    out.push(kind);
    put_u32(out, sender);
    put_u32(out, frame);
    put_u16(out, nscales);
}

fn put_pose(out: &mut Vec<u8>, pose: &AgentPose) {
    put_f32(out, pose.position.x as f32);
    put_f32(out, pose.position.y as f32);
    put_f32(out, pose.yaw as f32);
}

struct Header {
    kind: u8,
    sender: u32,
    frame: u32,
    nscales: u16,
    pose: AgentPose,
}

fn read_header(r: &mut Reader) -> Result<Header> {
    let magic_off = r.off;
    let magic = r.take(4, "magic")?;
    if magic != WIRE_MAGIC {
        return Err(Error::Decode {
            offset: magic_off,
            reason: format!("bad magic {:02x?}", magic),
        });
    }
    let version_off = r.off;
    let version = r.u16("version")?;
    if version != WIRE_VERSION {
        return Err(Error::Decode {
            offset: version_off,
            reason: format!("unsupported version {} (expected {})", version, WIRE_VERSION),
        });
    }
    let kind = r.u8("message kind")?;
    let sender = r.u32("sender id")?;
    let frame = r.u32("frame id")?;
    let nscales = r.u16("scale count")?;
    let x = r.f32("pose x")? as f64;
    let y = r.f32("pose y")? as f64;
    let yaw = r.f32("pose yaw")? as f64;
    Ok(Header {
        kind,
        sender,
        frame,
        nscales,
        pose: AgentPose::exact(crate::geometry::Vec2::new(x, y), yaw),
    })
}

pub fn encode_query_message(msg: &QueryMessage) -> Vec<u8> {
    let mut out = Vec::new();
    put_header(&mut out, KIND_QUERY, msg.sender, msg.frame, msg.cells.len() as u16);
    put_pose(&mut out, &msg.pose);
    for scale in &msg.cells {
        put_u32(&mut out, scale.len() as u32);
        for &(u, v) in scale {
            put_u16(&mut out, u);
            put_u16(&mut out, v);
        }
    }
    out
}

pub fn decode_query_message(bytes: &[u8]) -> Result<QueryMessage> {
    let mut r = Reader::new(bytes);
    let header = read_header(&mut r)?;
    if header.kind != KIND_QUERY {
        return Err(Error::Decode {
            offset: 6,
            reason: format!("kind {} is not a query message", header.kind),
        });
    }
    let mut cells = Vec::with_capacity(header.nscales as usize);
    for _ in 0..header.nscales {
        let count = r.u32("cell count")?;
        let mut scale = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let u = r.u16("cell u")?;
            let v = r.u16("cell v")?;
            scale.push((u, v));
        }
        cells.push(scale);
    }
    r.finish()?;
    Ok(QueryMessage {
        sender: header.sender,
        frame: header.frame,
        pose: header.pose,
        cells,
    })
}

pub fn encode_feature_message(msg: &SparseFeatureMessage) -> Vec<u8> {
    let kind = if msg.halo { KIND_HALO } else { KIND_CENTER };
    let mut out = Vec::new();
    put_header(&mut out, kind, msg.sender, msg.frame, msg.scales.len() as u16);
    put_pose(&mut out, &msg.pose);
    for scale in &msg.scales {
        put_u32(&mut out, scale.entries.len() as u32);
        for entry in &scale.entries {
            put_u16(&mut out, entry.cell.0);
            put_u16(&mut out, entry.cell.1);
            for &x in &entry.values {
                put_f32(&mut out, x);
            }
        }
    }
    out
}

/// Decodes a feature message; `channels` supplies the per-scale width the
/// wire format leaves implicit.
pub fn decode_feature_message(bytes: &[u8], channels: &[usize]) -> Result<SparseFeatureMessage> {
    let mut r = Reader::new(bytes);
    let header = read_header(&mut r)?;
    let halo = match header.kind {
        KIND_HALO => true,
        KIND_CENTER => false,
        other => {
            return Err(Error::Decode {
                offset: 6,
                reason: format!("kind {} is not a feature message", other),
            })
        }
    };
    if header.nscales as usize != channels.len() {
        return Err(Error::Decode {
            offset: 15,
            reason: format!(
                "message declares {} scales, decoder context has {}",
                header.nscales,
                channels.len()
            ),
        });
    }
    let blocks = if halo { 9 } else { 1 };
    let mut scales = Vec::with_capacity(channels.len());
    for &c in channels {
        let count = r.u32("entry count")?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let u = r.u16("entry u")?;
            let v = r.u16("entry v")?;
            let mut values = Vec::with_capacity(blocks * c);
            for _ in 0..blocks * c {
                values.push(r.f32("feature value")?);
            }
            entries.push(FeatureEntry {
                cell: (u, v),
                values,
            });
        }
        scales.push(ScaleEntries { entries });
    }
    r.finish()?;
    Ok(SparseFeatureMessage {
        sender: header.sender,
        frame: header.frame,
        pose: header.pose,
        halo,
        scales,
    })
}

/// First-occurrence dedup, order preserving.
pub fn dedup_locations(cells: &[(u16, u16)]) -> Vec<(u16, u16)> {
    let set: IndexSet<(u16, u16)> = cells.iter().copied().collect();
    set.into_iter().collect()
}

/// Reads the 3x3 neighbourhood (or just the centre) of each cell.
/// Out-of-grid offsets contribute zero blocks.
pub fn halo_extract(
    map: &FeatureMap,
    cells: &[(u16, u16)],
    halo: bool,
) -> Vec<((u16, u16), Vec<f64>)> {
    let c = map.channels;
    let offsets: &[(i64, i64)] = if halo { &HALO_OFFSETS } else { &[(0, 0)] };
    cells
        .iter()
        .map(|&(u, v)| {
            let mut values = vec![0.0; offsets.len() * c];
            for (b, &(du, dv)) in offsets.iter().enumerate() {
                let su = u as i64 + du;
                let sv = v as i64 + dv;
                if su >= 0 && sv >= 0 && (su as usize) < map.width && (sv as usize) < map.height {
                    values[b * c..(b + 1) * c]
                        .copy_from_slice(map.cell(su as usize, sv as usize));
                }
            }
            ((u, v), values)
        })
        .collect()
}

/// Assembles the sparse reply to a query: dedup requested cells, extract
/// halos from the warped pyramid, drop entries that are entirely zero.
pub fn build_feature_message(
    warped: &FeaturePyramid,
    query: &QueryMessage,
    halo: bool,
    sender: u32,
    frame: u32,
    pose: &AgentPose,
) -> SparseFeatureMessage {
    let mut scales = Vec::with_capacity(warped.levels.len());
    for (l, map) in warped.levels.iter().enumerate() {
        let requested: &[(u16, u16)] = query.cells.get(l).map(Vec::as_slice).unwrap_or(&[]);
        let unique = dedup_locations(requested);
        let entries = halo_extract(map, &unique, halo)
            .into_iter()
            .filter(|(_, values)| values.iter().any(|&x| x != 0.0))
            .map(|(cell, values)| FeatureEntry {
                cell,
                values: values.iter().map(|&x| x as f32).collect(),
            })
            .collect();
        scales.push(ScaleEntries { entries });
    }
    SparseFeatureMessage {
        sender,
        frame,
        pose: *pose,
        halo,
        scales,
    }
}

/// Dense-map transmission used by the full-map baseline: every occupied
/// cell of the warped pyramid goes out as a centre-only entry.
pub fn build_full_map_message(
    warped: &FeaturePyramid,
    sender: u32,
    frame: u32,
    pose: &AgentPose,
) -> SparseFeatureMessage {
    let scales = warped
        .levels
        .iter()
        .map(|map| {
            let entries = map
                .nonzero_cells()
                .into_iter()
                .map(|(u, v)| FeatureEntry {
                    cell: (u as u16, v as u16),
                    values: map.cell(u, v).iter().map(|&x| x as f32).collect(),
                })
                .collect();
            ScaleEntries { entries }
        })
        .collect();
    SparseFeatureMessage {
        sender,
        frame,
        pose: *pose,
        halo: false,
        scales,
    }
}

/// Collaborator-side relevance test: warp own coarse foreground density
/// into the requester's frame and look it up at the requested level-0
/// cells. Replies only on a strict threshold exceedance. Returns the
/// decision plus a flag set when the query carried no level-0 cells.
pub fn should_collaborate(
    density_l0: &BevGrid,
    geom0: &LevelGeom,
    own_pose: Pose2,
    query: &QueryMessage,
    tau: f64,
) -> (bool, bool) {
    let requested = match query.cells.first() {
        Some(cells) if !cells.is_empty() => cells,
        _ => return (false, true),
    };
    let requester = query.pose.pose2();
    for &(u, v) in requested {
        let world = requester.to_world(geom0.cell_center(u as usize, v as usize));
        let (su, sv) = geom0.to_continuous(own_pose.to_local(world));
        if sample_grid(density_l0, su, sv, Interp::Bilinear) > tau {
            return (true, false);
        }
    }
    (false, false)
}

/// Non-zero elements of a warped pyramid per level; what the full-map
/// baseline pays for one sender.
pub fn full_map_payload(pyramid: &FeaturePyramid) -> [u64; 3] {
    let mut out = [0u64; 3];
    for (l, map) in pyramid.levels.iter().enumerate().take(3) {
        out[l] = map.nonzero_value_count() as u64;
    }
    out
}

/// One metered frame of traffic into a single receiver.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub frame: u32,
    pub mode: String,
    pub elements: [u64; 3],
    /// 4 bytes per non-zero transmitted value.
    pub payload_bytes: u64,
    pub cv_log2: f64,
    /// False when nothing was transmitted; cv_log2 is reported as 0 then.
    pub cv_defined: bool,
    /// Wire bytes not counted as payload: headers, coordinates, poses,
    /// retained zeros, and the query messages themselves.
    pub metadata_bytes: u64,
}

/// Sums element counts over the frame's feature messages and splits total
/// wire bytes into payload and metadata.
pub fn meter_frame(
    frame: u32,
    mode: &str,
    features: &[SparseFeatureMessage],
    feature_wire_bytes: u64,
    query_wire_bytes: u64,
) -> LedgerEntry {
    let mut elements = [0u64; 3];
    for msg in features {
        let e = msg.elements();
        for l in 0..3 {
            elements[l] += e[l];
        }
    }
    let total: u64 = elements.iter().sum();
    let payload_bytes = 4 * total;
    debug_assert!(feature_wire_bytes >= payload_bytes);
    let metadata_bytes = feature_wire_bytes.saturating_sub(payload_bytes) + query_wire_bytes;
    let cv_defined = total > 0;
    let cv_log2 = if cv_defined { (total as f64).log2() } else { 0.0 };
    LedgerEntry {
        frame,
        mode: mode.to_string(),
        elements,
        payload_bytes,
        cv_log2,
        cv_defined,
        metadata_bytes,
    }
}

/// Accumulated per-frame traffic rows.
#[derive(Debug, Clone, Default)]
pub struct BandwidthLedger {
    pub entries: Vec<LedgerEntry>,
}

impl BandwidthLedger {
    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "frame,mode,elements_l0,elements_l1,elements_l2,payload_bytes,cv_log2,metadata_bytes"
        )?;
        for e in &self.entries {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{}",
                e.frame,
                e.mode,
                e.elements[0],
                e.elements[1],
                e.elements[2],
                e.payload_bytes,
                e.cv_log2,
                e.metadata_bytes
            )?;
        }
        Ok(())
    }
}
