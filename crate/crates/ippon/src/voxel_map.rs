//! Per-voxel posterior probabilities for common categories and the OOI,
//! plus log-odds occupancy, fused from per-frame segmentation heatmaps
//! and depth.
//!
//! Each category channel is an independent binary log-odds filter with a
//! shared equal prior of 1/(N+1). The OOI occupies the last channel and
//! fuses over its own (typically shorter) distance range.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ray_direction, walk_voxels, CameraIntrinsics, ViewPose};
use crate::grid::{GridSpec, VoxelAabb, VoxelIdx};

/// Occupancy log-odds increments and hysteresis thresholds.
pub const OCC_HIT: f32 = 1.4;
pub const OCC_MISS: f32 = -0.4;
pub const OCC_THRESHOLD: f32 = 0.85;
pub const OCC_CLAMP: f32 = 6.0;

pub const MAP_MAGIC: &str = "IPPONMAP1";

#[derive(Debug, Error)]
pub enum MapError {
    #[error("camera pose is not finite")]
    NonFinitePose,
    #[error("heatmap/depth resolution mismatch")]
    ResolutionMismatch,
    #[error("probability out of range: {0}")]
    InvalidProbability(f64),
    #[error("non-finite input")]
    NonFinite,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed map dump at line {line}: {msg}")]
    MalformedDump { line: usize, msg: String },
}

/// Named categories: the ordered common set C_1..C_N plus the OOI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySet {
    pub common: Vec<String>,
    pub ooi: String,
    pub ooi_context: Option<String>,
}

impl CategorySet {
    pub fn new(common: Vec<String>, ooi: impl Into<String>, ooi_context: Option<String>) -> Self {
        assert!(!common.is_empty(), "need at least one common category");
        let mut seen = HashSet::new();
        for c in &common {
            assert!(seen.insert(c.clone()), "duplicate category {c}");
        }
        Self {
            common,
            ooi: ooi.into(),
            ooi_context,
        }
    }

    /// Channel count: all common categories plus the OOI channel.
    pub fn num_channels(&self) -> usize {
        self.common.len() + 1
    }

    /// Channel index of the OOI.
    pub fn ooi_channel(&self) -> usize {
        self.common.len()
    }

    pub fn common_index(&self, name: &str) -> Option<usize> {
        self.common.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OccupancyState {
    Free,
    Occupied,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    Bayes,
    /// Ablation: always keep the highest observed probability.
    NaiveMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub max_fuse_distance_common: f64,
    pub max_fuse_distance_ooi: f64,
    /// Shared equal prior, default 1/(N+1).
    pub prior: f64,
    pub update_mode: UpdateMode,
    /// Probability clamp, posteriors stay in [eps, 1-eps].
    pub clamp_eps: f64,
}

impl FusionConfig {
    pub fn desk_scale(num_common: usize) -> Self {
        Self {
            max_fuse_distance_common: 5.0,
            max_fuse_distance_ooi: 3.0,
            prior: 1.0 / (num_common as f64 + 1.0),
            update_mode: UpdateMode::Bayes,
            clamp_eps: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<(), MapError> {
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return Err(MapError::InvalidProbability(self.prior));
        }
        if self.max_fuse_distance_common <= 0.0 || self.max_fuse_distance_ooi <= 0.0 {
            return Err(MapError::NonFinite);
        }
        Ok(())
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// One Bayes-filter step in log-odds form under the equal-prior assumption:
/// `prev + logit(q) - logit(prior)`, clamped so the implied probability
/// stays in `[eps, 1-eps]`.
pub fn bayes_update(prev_logodds: f64, observation: f64, prior: f64, eps: f64) -> Result<f64, MapError> {
    if !prev_logodds.is_finite() || !observation.is_finite() || !prior.is_finite() {
        return Err(MapError::NonFinite);
    }
    if !(observation > 0.0 && observation < 1.0) {
        return Err(MapError::InvalidProbability(observation));
    }
    if !(prior > 0.0 && prior < 1.0) {
        return Err(MapError::InvalidProbability(prior));
    }
    let lo = prev_logodds + logit(observation) - logit(prior);
    Ok(lo.clamp(logit(eps), logit(1.0 - eps)))
}

/// Naive ablation update: running maximum of observed probabilities.
pub fn naive_update(prev: f64, observation: f64) -> f64 {
    prev.max(observation)
}

/// p_occ(v): Free -> 0, Occupied -> 1, Unknown -> user-defined probability.
pub fn occupancy_probability(state: OccupancyState, unknown_p: f64) -> f64 {
    match state {
        OccupancyState::Free => 0.0,
        OccupancyState::Occupied => 1.0,
        OccupancyState::Unknown => unknown_p,
    }
}

/// A sensor frame handed to the map: depth plus per-channel probability
/// heatmaps (common categories first, OOI channel last). Depth values that
/// are non-positive or non-finite mark invalid pixels and are skipped
/// entirely (no free-space carving on holes).
#[derive(Debug, Clone)]
pub struct Frame {
    pub pose: ViewPose,
    pub intrinsics: CameraIntrinsics,
    pub depth: Vec<f32>,
    /// `num_channels` images of `width * height` probabilities.
    pub heatmaps: Vec<Vec<f32>>,
}

/// What a fusion pass touched; the planner uses this to invalidate cached
/// node gains.
#[derive(Debug, Clone, Default)]
pub struct UpdateSummary {
    /// Hit voxels updated per channel.
    pub updated_per_channel: Vec<usize>,
    /// Voxels that received a free-space update.
    pub freed: usize,
    /// Bounding box over every touched voxel.
    pub touched: Option<VoxelAabb>,
    pub map_version: u64,
}

impl UpdateSummary {
    pub fn is_noop(&self) -> bool {
        self.touched.is_none()
    }
}

#[derive(Debug, Clone, Copy)]
struct OccCell {
    logodds: f32,
    state: OccupancyState,
}

#[derive(Debug, Clone, Default)]
struct SemVoxel {
    /// (channel, log-odds) for every channel with at least one observation.
    entries: Vec<(u16, f32)>,
}

impl SemVoxel {
    fn get(&self, ch: u16) -> Option<f32> {
        self.entries.iter().find(|(c, _)| *c == ch).map(|(_, l)| *l)
    }

    fn set(&mut self, ch: u16, lo: f32) {
        if let Some(e) = self.entries.iter_mut().find(|(c, _)| *c == ch) {
            e.1 = lo;
        } else {
            self.entries.push((ch, lo));
        }
    }
}

/// Dense occupancy plus sparse per-voxel category posteriors.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    grid: GridSpec,
    categories: CategorySet,
    cfg: FusionConfig,
    occ: Vec<OccCell>,
    semantic: HashMap<usize, SemVoxel>,
    version: u64,
}

struct HitAcc {
    sums: Vec<f64>,
    n_common: u32,
    n_ooi: u32,
}

impl VoxelMap {
    pub fn new(grid: GridSpec, categories: CategorySet, cfg: FusionConfig) -> Self {
        cfg.validate().expect("invalid fusion config");
        let n = grid.voxel_count();
        Self {
            grid,
            categories,
            cfg,
            occ: vec![
                OccCell {
                    logodds: 0.0,
                    state: OccupancyState::Unknown
                };
                n
            ],
            semantic: HashMap::new(),
            version: 0,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn categories(&self) -> &CategorySet {
        &self.categories
    }

    pub fn fusion_config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn occupancy_state(&self, idx: VoxelIdx) -> OccupancyState {
        self.occ[self.grid.linear(idx)].state
    }

    pub fn occupancy_logodds(&self, idx: VoxelIdx) -> f32 {
        self.occ[self.grid.linear(idx)].logodds
    }

    /// Posterior probability of a channel at a voxel. Unobserved channels
    /// report the prior.
    pub fn posterior(&self, idx: VoxelIdx, channel: usize) -> f64 {
        let lin = self.grid.linear(idx);
        match self.semantic.get(&lin).and_then(|s| s.get(channel as u16)) {
            Some(lo) => sigmoid(lo as f64),
            None => self.cfg.prior,
        }
    }

    pub fn ooi_posterior(&self, idx: VoxelIdx) -> f64 {
        self.posterior(idx, self.categories.ooi_channel())
    }

    /// Membership in V_O: true iff the OOI channel has been fused at least
    /// once at this voxel.
    pub fn is_ooi_mapped(&self, idx: VoxelIdx) -> bool {
        let lin = self.grid.linear(idx);
        self.semantic
            .get(&lin)
            .is_some_and(|s| s.get(self.categories.ooi_channel() as u16).is_some())
    }

    pub fn channel_observed(&self, idx: VoxelIdx, channel: usize) -> bool {
        let lin = self.grid.linear(idx);
        self.semantic
            .get(&lin)
            .is_some_and(|s| s.get(channel as u16).is_some())
    }

    /// Highest-posterior observed common category at a voxel.
    pub fn dominant_common(&self, idx: VoxelIdx) -> Option<(usize, f64)> {
        let lin = self.grid.linear(idx);
        let sem = self.semantic.get(&lin)?;
        let ooi_ch = self.categories.ooi_channel() as u16;
        sem.entries
            .iter()
            .filter(|(c, _)| *c != ooi_ch)
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .map(|(c, lo)| (*c as usize, sigmoid(*lo as f64)))
    }

    /// Voxels with at least one semantic observation.
    pub fn semantic_voxels(&self) -> impl Iterator<Item = VoxelIdx> + '_ {
        self.semantic.keys().map(|&lin| self.grid.from_linear(lin))
    }

    fn prior_logodds(&self) -> f32 {
        logit(self.cfg.prior) as f32
    }

    /// Directly write a cell's occupancy state, saturating the log-odds.
    /// Construction hook for diagnostics and synthetic-map tests; episode
    /// code only mutates through [`VoxelMap::integrate_frame`].
    pub fn write_occupancy(&mut self, idx: VoxelIdx, state: OccupancyState) {
        let lin = self.grid.linear(idx);
        let lo = match state {
            OccupancyState::Occupied => OCC_CLAMP,
            OccupancyState::Free => -OCC_CLAMP,
            OccupancyState::Unknown => 0.0,
        };
        self.occ[lin] = OccCell { logodds: lo, state };
        self.version += 1;
    }

    /// Directly write a channel posterior, marking the channel observed.
    /// Same construction-only caveat as [`VoxelMap::write_occupancy`].
    pub fn write_posterior(&mut self, idx: VoxelIdx, channel: usize, p: f64) {
        let lin = self.grid.linear(idx);
        let eps = self.cfg.clamp_eps;
        let lo = logit(p.clamp(eps, 1.0 - eps)) as f32;
        self.semantic.entry(lin).or_default().set(channel as u16, lo);
        self.version += 1;
    }

    fn apply_semantic(&mut self, lin: usize, ch: u16, observation: f64) {
        let prior_lo = self.prior_logodds();
        let sem = self.semantic.entry(lin).or_default();
        let prev = sem.get(ch).unwrap_or(prior_lo) as f64;
        let eps = self.cfg.clamp_eps;
        let next = match self.cfg.update_mode {
            UpdateMode::Bayes => {
                let obs = observation.clamp(eps, 1.0 - eps);
                prev + logit(obs) - logit(self.cfg.prior)
            }
            UpdateMode::NaiveMax => {
                // logit is monotone, so the running max commutes with it.
                let obs = observation.clamp(eps, 1.0 - eps);
                prev.max(logit(obs))
            }
        };
        let clamped = next.clamp(logit(eps), logit(1.0 - eps));
        sem.set(ch, clamped as f32);
    }

    fn apply_occ(&mut self, lin: usize, hit: bool) {
        let cell = &mut self.occ[lin];
        let delta = if hit { OCC_HIT } else { OCC_MISS };
        let lo = (cell.logodds + delta).clamp(-OCC_CLAMP, OCC_CLAMP);
        cell.logodds = lo;
        cell.state = if lo >= OCC_THRESHOLD {
            OccupancyState::Occupied
        } else if lo <= -OCC_THRESHOLD {
            OccupancyState::Free
        } else if cell.state == OccupancyState::Unknown {
            // First observation lands inside the hysteresis band: classify
            // by sign, later frames only flip across the band.
            if lo > 0.0 {
                OccupancyState::Occupied
            } else {
                OccupancyState::Free
            }
        } else {
            cell.state
        };
    }

    /// Fuse one frame. Pixels hitting the same voxel are aggregated into a
    /// single update per channel per frame (observation = mean pixel
    /// probability) so a frame's evidence weight does not scale with image
    /// resolution.
    pub fn integrate_frame(&mut self, frame: &Frame) -> Result<UpdateSummary, MapError> {
        if !frame.pose.is_finite() {
            return Err(MapError::NonFinitePose);
        }
        let npix = frame.intrinsics.width * frame.intrinsics.height;
        if frame.depth.len() != npix
            || frame.heatmaps.len() != self.categories.num_channels()
            || frame.heatmaps.iter().any(|h| h.len() != npix)
        {
            return Err(MapError::ResolutionMismatch);
        }

        let nch = self.categories.num_channels();
        let ooi_ch = self.categories.ooi_channel();
        let mut hits: HashMap<usize, HitAcc> = HashMap::new();
        let mut free: HashSet<usize> = HashSet::new();

        for v in 0..frame.intrinsics.height {
            for u in 0..frame.intrinsics.width {
                let pix = v * frame.intrinsics.width + u;
                let d = frame.depth[pix] as f64;
                if !(d.is_finite() && d > 0.0) {
                    continue;
                }
                let dir = ray_direction(u, v, &frame.intrinsics, &frame.pose);
                let hit_point = frame.pose.position + dir * d;
                let hit_idx = self.grid.world_to_voxel(&hit_point);
                let hit_lin = hit_idx.map(|i| self.grid.linear(i));
                // Carve free space along the ray, stopping at the hit voxel.
                walk_voxels(&frame.pose.position, &dir, d, &self.grid, |idx, _| {
                    let lin = self.grid.linear(idx);
                    if Some(lin) == hit_lin {
                        return false;
                    }
                    free.insert(lin);
                    true
                });
                let Some(hit_lin) = hit_lin else { continue };
                let acc = hits.entry(hit_lin).or_insert_with(|| HitAcc {
                    sums: vec![0.0; nch],
                    n_common: 0,
                    n_ooi: 0,
                });
                if d <= self.cfg.max_fuse_distance_common {
                    acc.n_common += 1;
                    for ch in 0..nch {
                        if ch != ooi_ch {
                            acc.sums[ch] += frame.heatmaps[ch][pix] as f64;
                        }
                    }
                }
                if d <= self.cfg.max_fuse_distance_ooi {
                    acc.n_ooi += 1;
                    acc.sums[ooi_ch] += frame.heatmaps[ooi_ch][pix] as f64;
                }
            }
        }

        let mut summary = UpdateSummary {
            updated_per_channel: vec![0; nch],
            ..Default::default()
        };
        let touch = |aabb: &mut Option<VoxelAabb>, idx: VoxelIdx| match aabb {
            Some(b) => b.expand(idx),
            None => *aabb = Some(VoxelAabb::of(idx)),
        };

        for (&lin, acc) in &hits {
            free.remove(&lin);
            self.apply_occ(lin, true);
            if acc.n_common > 0 {
                for ch in 0..nch {
                    if ch != ooi_ch {
                        self.apply_semantic(lin, ch as u16, acc.sums[ch] / acc.n_common as f64);
                        summary.updated_per_channel[ch] += 1;
                    }
                }
            }
            if acc.n_ooi > 0 {
                self.apply_semantic(lin, ooi_ch as u16, acc.sums[ooi_ch] / acc.n_ooi as f64);
                summary.updated_per_channel[ooi_ch] += 1;
            }
            touch(&mut summary.touched, self.grid.from_linear(lin));
        }
        for &lin in &free {
            self.apply_occ(lin, false);
            touch(&mut summary.touched, self.grid.from_linear(lin));
        }
        summary.freed = free.len();
        if !summary.is_noop() {
            self.version += 1;
        }
        summary.map_version = self.version;
        Ok(summary)
    }

    /// Textual grid export. Header carries the geometry and the category
    /// names, then one record per observed voxel.
    pub fn dump<W: Write>(&self, mut w: W) -> Result<(), MapError> {
        writeln!(w, "{MAP_MAGIC}")?;
        let header = serde_json::json!({
            "origin": [self.grid.origin.x, self.grid.origin.y, self.grid.origin.z],
            "voxel_size": self.grid.voxel_size,
            "dims": self.grid.dims,
            "common": self.categories.common,
            "ooi": self.categories.ooi,
        });
        writeln!(w, "{header}")?;
        for (lin, cell) in self.occ.iter().enumerate() {
            let sem = self.semantic.get(&lin);
            if cell.state == OccupancyState::Unknown && sem.is_none() {
                continue;
            }
            let state = match cell.state {
                OccupancyState::Free => 'F',
                OccupancyState::Occupied => 'O',
                OccupancyState::Unknown => 'U',
            };
            write!(w, "{lin} {state} {:.4}", cell.logodds)?;
            if let Some(sem) = sem {
                for (ch, lo) in &sem.entries {
                    write!(w, " {ch}:{lo:.4}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// Load a dump written by [`VoxelMap::dump`].
    pub fn load_dump<R: BufRead>(mut r: R, cfg: FusionConfig) -> Result<Self, MapError> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != MAP_MAGIC {
            return Err(MapError::MalformedDump {
                line: 1,
                msg: format!("expected magic {MAP_MAGIC}"),
            });
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: serde_json::Value =
            serde_json::from_str(line.trim()).map_err(|e| MapError::MalformedDump {
                line: 2,
                msg: e.to_string(),
            })?;
        let bad = |msg: &str| MapError::MalformedDump {
            line: 2,
            msg: msg.to_string(),
        };
        let origin = header["origin"]
            .as_array()
            .ok_or_else(|| bad("origin"))?
            .iter()
            .map(|v| v.as_f64().unwrap_or(f64::NAN))
            .collect::<Vec<_>>();
        let dims = header["dims"]
            .as_array()
            .ok_or_else(|| bad("dims"))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect::<Vec<_>>();
        let voxel_size = header["voxel_size"].as_f64().ok_or_else(|| bad("voxel_size"))?;
        let common: Vec<String> = header["common"]
            .as_array()
            .ok_or_else(|| bad("common"))?
            .iter()
            .map(|v| v.as_str().unwrap_or("").to_string())
            .collect();
        let ooi = header["ooi"].as_str().ok_or_else(|| bad("ooi"))?.to_string();
        let grid = GridSpec::new(
            Point3::new(origin[0], origin[1], origin[2]),
            voxel_size,
            [dims[0], dims[1], dims[2]],
        );
        let cats = CategorySet::new(common, ooi, None);
        let mut map = VoxelMap::new(grid, cats, cfg);
        for (no, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let err = |msg: &str| MapError::MalformedDump {
                line: no + 3,
                msg: msg.to_string(),
            };
            let lin: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("voxel index"))?;
            let state = match parts.next() {
                Some("F") => OccupancyState::Free,
                Some("O") => OccupancyState::Occupied,
                Some("U") => OccupancyState::Unknown,
                _ => return Err(err("state")),
            };
            let lo: f32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("logodds"))?;
            map.occ[lin] = OccCell { logodds: lo, state };
            for tok in parts {
                let (ch, lo) = tok.split_once(':').ok_or_else(|| err("semantic token"))?;
                let ch: u16 = ch.parse().map_err(|_| err("channel"))?;
                let lo: f32 = lo.parse().map_err(|_| err("semantic logodds"))?;
                map.semantic.entry(lin).or_default().set(ch, lo);
            }
        }
        Ok(map)
    }
}
