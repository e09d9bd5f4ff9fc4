//! Informative path planning: samples viewpoints, scores them by expected
//! OOI probability mass (gain) and by high-confidence OOI voxel counts
//! (termination), maintains an RRT*-style tree with a clearance-penalized
//! local sampling-based fallback for connections, and picks targets by
//! gain-to-cost ratio, giving priority to terminating nodes.

use nalgebra::{Point2, Point3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::esdf::{
    path_clearance_cost, pose_traversable, segment_traversable, CollisionModel, EsdfGrid,
    RegionSet, UntraversableRegion,
};
use crate::geometry::{visible_voxels, walk_voxels, wrap_angle, FrustumSpec, ViewPose};
use crate::grid::{VoxelAabb, VoxelIdx};
use crate::guidance::{level_probability, GuidanceConfig, ProximityLevel};
use crate::voxel_map::{occupancy_probability, OccupancyState, VoxelMap};

/// Per-category terminating voxel count at 0.1 m voxels; smaller objects
/// need fewer voxels.
pub fn t_min_for(ooi: &str) -> f64 {
    match ooi {
        "plant" => 15.0,
        "tv" | "tv_monitor" => 20.0,
        "chair" | "toilet" => 25.0,
        "sofa" => 50.0,
        "bed" => 60.0,
        _ => 25.0,
    }
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    /// OOI posterior threshold for termination counting.
    pub p_t: f64,
    /// Terminating node threshold on T(n).
    pub t_min: f64,
    /// p_occ assigned to Unknown voxels in the gain sum.
    pub unknown_p: f64,
    pub gain_frustum: FrustumSpec,
    /// Termination neighborhood radius around a node (m).
    pub termination_radius: f64,
    /// Dense-sampling disc radius around the agent (m).
    pub local_radius: f64,
    pub local_samples: usize,
    pub global_samples: usize,
    /// RRT* parent-choice / rewiring radius (m).
    pub neighbor_radius: f64,
    pub yaw_samples: usize,
    pub pitch_samples: usize,
    /// Symmetric camera pitch limit (rad).
    pub pitch_limit: f64,
    pub linear_speed: f64,
    pub angular_speed: f64,
    /// Nodes whose best gain falls below this face the travel direction.
    pub min_explore_gain: f64,
    /// Local SBP iteration budget (deterministic proxy for a time budget).
    pub sbp_iterations: usize,
    pub sbp_step: f64,
    pub sbp_clearance_weight: f64,
    pub sbp_clearance_cap: f64,
    /// Consecutive no-progress planning calls before widening the bounds.
    pub stuck_iters: usize,
    /// Soft cap on tree size; past it only a trickle of local samples.
    pub max_nodes: usize,
    pub global_min: Point2<f64>,
    pub global_max: Point2<f64>,
    pub travel_pitch: bool,
    pub initial_yaw: bool,
    pub no_guidance: bool,
    pub no_local_sbp: bool,
}

impl PlannerConfig {
    pub fn desk_scale(ooi: &str, global_min: Point2<f64>, global_max: Point2<f64>) -> Self {
        let unknown_p = 0.3;
        Self {
            p_t: 0.75,
            t_min: t_min_for(ooi),
            unknown_p,
            gain_frustum: FrustumSpec::new(
                crate::geometry::CameraIntrinsics::new(160, 120, 74.0),
                5.0,
                8,
            ),
            termination_radius: 1.0,
            local_radius: 3.0,
            local_samples: 10,
            global_samples: 20,
            neighbor_radius: 2.5,
            yaw_samples: 8,
            pitch_samples: 3,
            pitch_limit: 0.6,
            linear_speed: 0.5,
            angular_speed: 1.0,
            // 50 unknown voxels imagined at the average level.
            min_explore_gain: 50.0 * 0.01 * unknown_p,
            sbp_iterations: 600,
            sbp_step: 0.4,
            sbp_clearance_weight: 0.5,
            sbp_clearance_cap: 1.0,
            stuck_iters: 5,
            max_nodes: 400,
            global_min,
            global_max,
            travel_pitch: true,
            initial_yaw: true,
            no_guidance: false,
            no_local_sbp: false,
        }
    }

    pub fn validate(&self) -> bool {
        self.p_t > 0.0
            && self.p_t < 1.0
            && self.t_min >= 1.0
            && self.linear_speed > 0.0
            && self.angular_speed > 0.0
            && self.yaw_samples >= 1
            && self.pitch_samples >= 1
    }
}

/// One viewpoint in the tree. `cost` is C(P_n), the summed edge cost from
/// the root.
#[derive(Debug, Clone)]
pub struct PlanNode {
    pub pose: ViewPose,
    pub gain: f64,
    pub termination: f64,
    pub p_img: f64,
    pub terminating: bool,
    pub minimally_exploring: bool,
    /// The agent has already collected this viewpoint; its gain is spent
    /// and stays zero.
    pub visited: bool,
    /// Map version when gain/termination were last evaluated.
    pub eval_version: u64,
    /// Bounding box of the voxels seen at evaluation time; a map update
    /// outside it cannot change this node's gain.
    pub frustum_aabb: Option<VoxelAabb>,
    pub parent: Option<usize>,
    pub edge_cost: f64,
    /// Geometric path of the parent edge, parent pose first. Multi-segment
    /// when produced by the local SBP.
    pub edge_path: Vec<ViewPose>,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct PlanTree {
    pub nodes: Vec<PlanNode>,
    pub root: usize,
}

impl PlanTree {
    pub fn new(root_pose: ViewPose) -> Self {
        PlanTree {
            nodes: vec![PlanNode {
                pose: root_pose,
                gain: 0.0,
                termination: 0.0,
                p_img: 0.0,
                terminating: false,
                minimally_exploring: false,
                visited: true,
                eval_version: 0,
                frustum_aabb: None,
                parent: None,
                edge_cost: 0.0,
                edge_path: Vec::new(),
                cost: 0.0,
            }],
            root: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn root_path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// G(P_n): gain summed along the root path.
    pub fn path_gain(&self, id: usize) -> f64 {
        self.root_path(id).iter().map(|&i| self.nodes[i].gain).sum()
    }

    fn children(&self, id: usize) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].parent == Some(id))
            .collect()
    }

    /// Recompute every C(P_n) by walking edges out from the root.
    pub fn recompute_costs(&mut self) {
        let mut stack = vec![self.root];
        self.nodes[self.root].cost = 0.0;
        while let Some(id) = stack.pop() {
            for c in self.children(id) {
                self.nodes[c].cost = self.nodes[id].cost + self.nodes[c].edge_cost;
                stack.push(c);
            }
        }
    }

    /// Debug invariant: acyclic, connected, costs additive.
    pub fn check_invariants(&self) -> bool {
        for id in 0..self.nodes.len() {
            let mut seen = vec![false; self.nodes.len()];
            let mut cur = id;
            seen[cur] = true;
            while let Some(p) = self.nodes[cur].parent {
                if seen[p] {
                    return false;
                }
                seen[p] = true;
                cur = p;
            }
            if cur != self.root {
                return false;
            }
            if let Some(p) = self.nodes[id].parent {
                let want = self.nodes[p].cost + self.nodes[id].edge_cost;
                if (self.nodes[id].cost - want).abs() > 1e-9 {
                    return false;
                }
            } else if self.nodes[id].cost != 0.0 {
                return false;
            }
        }
        true
    }
}

/// Travel time for a path: length / linear speed plus the endpoint heading
/// change / angular speed.
pub fn edge_cost_of(path: &[ViewPose], cfg: &PlannerConfig) -> f64 {
    let len: f64 = path
        .windows(2)
        .map(|w| (w[1].position - w[0].position).norm())
        .sum();
    let turn = if path.len() >= 2 {
        wrap_angle(path[path.len() - 1].yaw - path[0].yaw).abs()
    } else {
        0.0
    };
    len / cfg.linear_speed + turn / cfg.angular_speed
}

/// True when `target`'s center is reachable by a ray from `from` that only
/// crosses Free voxels or voxels satisfying `transparent`. The termination
/// count passes the high-confidence OOI predicate as `transparent` so a
/// solid OOI blob does not occlude its own interior.
fn voxel_visible<T>(from: &Point3<f64>, target: VoxelIdx, map: &VoxelMap, transparent: T) -> bool
where
    T: Fn(VoxelIdx) -> bool,
{
    let grid = map.grid();
    let c = grid.voxel_center(target);
    let d = c - from;
    let dist = d.norm();
    if dist < grid.voxel_size {
        return true;
    }
    let mut visible = false;
    walk_voxels(from, &d.normalize(), dist + 0.5 * grid.voxel_diagonal(), grid, |idx, _| {
        if idx == target {
            visible = true;
            return false;
        }
        map.occupancy_state(idx) == OccupancyState::Free || transparent(idx)
    });
    visible
}

/// Result of scoring one candidate orientation.
#[derive(Debug, Clone)]
pub struct GainEval {
    pub gain: f64,
    pub p_img: f64,
    pub aabb: Option<VoxelAabb>,
    /// Count of mapped high-confidence OOI voxels in view (orientation
    /// scoring for terminating candidates).
    pub ooi_in_view: usize,
}

/// G(n) over the voxels visible from `pose`: mapped OOI voxels contribute
/// their posterior, everything else the viewpoint's imagined probability,
/// each weighted by p_occ.
pub fn evaluate_gain(
    pose: &ViewPose,
    map: &VoxelMap,
    levels: Option<&[ProximityLevel]>,
    gcfg: &GuidanceConfig,
    cfg: &PlannerConfig,
) -> GainEval {
    let vis = visible_voxels(pose, &cfg.gain_frustum, map.grid(), |i| map.occupancy_state(i));
    // Imagined probability from the same visible set: linked voxels within
    // the horizontal neighborhood radius, scanned in priority order.
    let p_img = match levels {
        Some(levels) if !cfg.no_guidance => {
            let mut counts = [0usize; 4];
            let r2 = gcfg.neighborhood_radius * gcfg.neighborhood_radius;
            for (idx, _) in &vis {
                let c = map.grid().voxel_center(*idx);
                let dx = c.x - pose.position.x;
                let dy = c.y - pose.position.y;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                if let Some((ch, p)) = map.dominant_common(*idx) {
                    if p >= gcfg.link_threshold {
                        counts[levels[ch] as usize] += 1;
                    }
                }
            }
            ProximityLevel::PRIORITY
                .into_iter()
                .find(|l| counts[*l as usize] >= gcfg.min_voxel_count)
                .map(|l| level_probability(l, gcfg))
                .unwrap_or(gcfg.p_average)
        }
        _ => gcfg.p_average,
    };
    let mut gain = 0.0;
    let mut aabb: Option<VoxelAabb> = None;
    let mut ooi_in_view = 0;
    for (idx, _) in &vis {
        let state = map.occupancy_state(*idx);
        let p_occ = occupancy_probability(state, cfg.unknown_p);
        let p = if map.is_ooi_mapped(*idx) {
            let post = map.ooi_posterior(*idx);
            if state == OccupancyState::Occupied && post > cfg.p_t {
                ooi_in_view += 1;
            }
            post
        } else {
            p_img
        };
        gain += p * p_occ;
        match aabb.as_mut() {
            Some(b) => b.expand(*idx),
            None => aabb = Some(VoxelAabb::of(*idx)),
        }
    }
    GainEval { gain, p_img, aabb, ooi_in_view }
}

/// T(n): high-confidence OOI voxels (Occupied, observed on the OOI channel,
/// posterior above p_T) within the termination radius and in line of sight
/// of the node position. The full yaw/pitch sweep is implied: any
/// unoccluded voxel this close is visible at some sampled orientation.
pub fn evaluate_termination(position: &Point3<f64>, map: &VoxelMap, cfg: &PlannerConfig) -> f64 {
    let grid = map.grid();
    let r = cfg.termination_radius;
    let lo = Point3::new(position.x - r, position.y - r, position.z - r);
    let hi = Point3::new(position.x + r, position.y + r, position.z + r);
    let (lo, hi) = (clamp_to_grid(grid, &lo), clamp_to_grid(grid, &hi));
    let mut count = 0;
    for iz in lo[2]..=hi[2] {
        for iy in lo[1]..=hi[1] {
            for ix in lo[0]..=hi[0] {
                let idx = [ix, iy, iz];
                if map.occupancy_state(idx) != OccupancyState::Occupied {
                    continue;
                }
                if !map.is_ooi_mapped(idx) || map.ooi_posterior(idx) <= cfg.p_t {
                    continue;
                }
                let c = grid.voxel_center(idx);
                if (c - position).norm() > r {
                    continue;
                }
                let ooi_qualified = |i: VoxelIdx| {
                    map.occupancy_state(i) == OccupancyState::Occupied
                        && map.is_ooi_mapped(i)
                        && map.ooi_posterior(i) > cfg.p_t
                };
                if voxel_visible(position, idx, map, ooi_qualified) {
                    count += 1;
                }
            }
        }
    }
    count as f64
}

fn clamp_to_grid(grid: &crate::grid::GridSpec, p: &Point3<f64>) -> [usize; 3] {
    let min = grid.world_min();
    let v = [
        ((p.x - min.x) / grid.voxel_size).floor(),
        ((p.y - min.y) / grid.voxel_size).floor(),
        ((p.z - min.z) / grid.voxel_size).floor(),
    ];
    let mut out = [0usize; 3];
    for a in 0..3 {
        out[a] = v[a].clamp(0.0, (grid.dims[a] - 1) as f64) as usize;
    }
    out
}

/// A fully scored viewpoint at a sampled position, orientation optimized.
#[derive(Debug, Clone)]
pub struct NodeEval {
    pub pose: ViewPose,
    pub gain: f64,
    pub p_img: f64,
    pub termination: f64,
    pub terminating: bool,
    pub minimally_exploring: bool,
    pub aabb: Option<VoxelAabb>,
    pub eval_version: u64,
}

/// Optimize yaw/pitch at `position`: terminating candidates maximize OOI
/// voxels in view, the rest maximize gain; candidates below the
/// minimal-exploration gain threshold face the travel direction instead.
/// Ties go to the smallest turn from `travel_yaw`.
pub fn evaluate_node(
    position: Point3<f64>,
    travel_yaw: f64,
    map: &VoxelMap,
    levels: Option<&[ProximityLevel]>,
    gcfg: &GuidanceConfig,
    cfg: &PlannerConfig,
) -> NodeEval {
    let termination = evaluate_termination(&position, map, cfg);
    let terminating = termination >= cfg.t_min;

    let mut yaws: Vec<f64> = (0..cfg.yaw_samples)
        .map(|i| wrap_angle(travel_yaw + i as f64 * std::f64::consts::TAU / cfg.yaw_samples as f64))
        .collect();
    yaws.sort_by(|a, b| {
        wrap_angle(a - travel_yaw)
            .abs()
            .partial_cmp(&wrap_angle(b - travel_yaw).abs())
            .unwrap()
    });
    let pitches: Vec<f64> = if cfg.pitch_samples == 1 {
        vec![0.0]
    } else {
        (0..cfg.pitch_samples)
            .map(|i| {
                -cfg.pitch_limit
                    + 2.0 * cfg.pitch_limit * i as f64 / (cfg.pitch_samples - 1) as f64
            })
            .collect()
    };

    let mut best: Option<(f64, ViewPose, GainEval)> = None;
    for &yaw in &yaws {
        for &pitch in &pitches {
            let pose = ViewPose::new(position, yaw, pitch);
            let eval = evaluate_gain(&pose, map, levels, gcfg, cfg);
            let score = if terminating {
                eval.ooi_in_view as f64
            } else {
                eval.gain
            };
            // Strict improvement only: yaws are pre-sorted by turn size, so
            // ties keep the smallest turn.
            if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
                best = Some((score, pose, eval));
            }
        }
    }
    let (_, mut pose, mut eval) = best.unwrap();

    let minimally_exploring = !terminating && eval.gain < cfg.min_explore_gain;
    if minimally_exploring {
        pose = ViewPose::new(position, travel_yaw, 0.0);
        eval = evaluate_gain(&pose, map, levels, gcfg, cfg);
    }

    NodeEval {
        pose,
        gain: eval.gain,
        p_img: eval.p_img,
        termination,
        terminating,
        minimally_exploring,
        aabb: eval.aabb,
        eval_version: map.version(),
    }
}

/// Clearance-penalized local planner: a seeded 2D RRT between `a` and `b`
/// followed by shortcut smoothing against [`path_clearance_cost`]. Runs on
/// an iteration budget so results are deterministic; `None` when the budget
/// is exhausted without reaching `b`.
pub fn local_sbp(
    a: &ViewPose,
    b: &ViewPose,
    esdf: &EsdfGrid,
    model: &CollisionModel,
    regions: &RegionSet,
    cfg: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<ViewPose>> {
    if !pose_traversable(a, model, esdf, regions) || !pose_traversable(b, model, esdf, regions) {
        return None;
    }
    let z = a.position.z;
    let pad = cfg.local_radius;
    let (min_x, max_x) = (a.position.x.min(b.position.x) - pad, a.position.x.max(b.position.x) + pad);
    let (min_y, max_y) = (a.position.y.min(b.position.y) - pad, a.position.y.max(b.position.y) + pad);

    let seg_ok = |p: &Point3<f64>, q: &Point3<f64>| {
        let yaw = heading(p, q);
        segment_traversable(
            &ViewPose::new(*p, yaw, 0.0),
            &ViewPose::new(*q, yaw, 0.0),
            model,
            esdf,
            regions,
            esdf.grid().voxel_size,
        )
    };

    let mut pts: Vec<Point3<f64>> = vec![a.position];
    let mut parents: Vec<usize> = vec![0];
    let mut goal_parent: Option<usize> = None;
    for _ in 0..cfg.sbp_iterations {
        let sample = if rng.gen_bool(0.15) {
            b.position
        } else {
            Point3::new(rng.gen_range(min_x..max_x), rng.gen_range(min_y..max_y), z)
        };
        let (nearest, _) = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, (sample - p).norm_squared()))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
            .unwrap();
        let from = pts[nearest];
        let d = sample - from;
        let dist = d.norm();
        if dist < 1e-9 {
            continue;
        }
        let to = from + d / dist * dist.min(cfg.sbp_step);
        if !seg_ok(&from, &to) {
            continue;
        }
        pts.push(to);
        parents.push(nearest);
        if (to - b.position).norm() <= cfg.sbp_step && seg_ok(&to, &b.position) {
            goal_parent = Some(pts.len() - 1);
            break;
        }
    }
    let goal_parent = goal_parent?;

    let mut chain = vec![b.position];
    let mut cur = goal_parent;
    loop {
        chain.push(pts[cur]);
        if cur == 0 {
            break;
        }
        cur = parents[cur];
    }
    chain.reverse();

    // Shortcut smoothing: splice random subsegments when the straight
    // replacement is traversable and lowers the clearance-penalized cost.
    let to_poses = |chain: &[Point3<f64>]| -> Vec<ViewPose> {
        let n = chain.len();
        chain
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let yaw = if i + 1 < n {
                    heading(p, &chain[i + 1])
                } else {
                    b.yaw
                };
                ViewPose::new(*p, yaw, 0.0)
            })
            .collect()
    };
    let cost = |chain: &[Point3<f64>]| {
        path_clearance_cost(
            &to_poses(chain),
            model,
            esdf,
            regions,
            cfg.sbp_clearance_weight,
            cfg.sbp_clearance_cap,
        )
    };
    for _ in 0..60 {
        if chain.len() < 3 {
            break;
        }
        let i = rng.gen_range(0..chain.len() - 2);
        let j = rng.gen_range(i + 2..chain.len());
        if !seg_ok(&chain[i], &chain[j]) {
            continue;
        }
        let mut short = chain[..=i].to_vec();
        short.extend_from_slice(&chain[j..]);
        if cost(&short) < cost(&chain) {
            chain = short;
        }
    }

    let mut poses = to_poses(&chain);
    poses[0].yaw = a.yaw;
    Some(poses)
}

fn heading(from: &Point3<f64>, to: &Point3<f64>) -> f64 {
    (to.y - from.y).atan2(to.x - from.x)
}

/// Connect an evaluated node: RRT* parent choice among traversable
/// neighbors, straight line first, local SBP fallback, then rewiring.
/// Returns the new node id, or `None` when no connection exists.
pub fn connect_node(
    tree: &mut PlanTree,
    eval: NodeEval,
    esdf: &EsdfGrid,
    model: &CollisionModel,
    regions: &RegionSet,
    cfg: &PlannerConfig,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    if !pose_traversable(&eval.pose, model, esdf, regions) {
        return None;
    }
    let mut neighbors: Vec<usize> = (0..tree.nodes.len())
        .filter(|&i| (tree.nodes[i].pose.position - eval.pose.position).norm() <= cfg.neighbor_radius)
        .collect();
    if neighbors.is_empty() {
        // Fall back to the single nearest node so distant samples can still
        // attach through the SBP.
        if let Some((i, _)) = (0..tree.nodes.len())
            .map(|i| (i, (tree.nodes[i].pose.position - eval.pose.position).norm()))
            .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
        {
            neighbors.push(i);
        }
    }
    neighbors.sort_by(|&x, &y| {
        let cx = tree.nodes[x].cost
            + edge_cost_of(&[tree.nodes[x].pose, eval.pose], cfg);
        let cy = tree.nodes[y].cost
            + edge_cost_of(&[tree.nodes[y].pose, eval.pose], cfg);
        cx.partial_cmp(&cy).unwrap()
    });

    let mut connection: Option<(usize, Vec<ViewPose>)> = None;
    for &m in &neighbors {
        let path = vec![tree.nodes[m].pose, eval.pose];
        if segment_traversable(
            &path[0],
            &path[1],
            model,
            esdf,
            regions,
            esdf.grid().voxel_size,
        ) {
            connection = Some((m, path));
            break;
        }
    }
    if connection.is_none() && !cfg.no_local_sbp {
        for &m in neighbors.iter().take(3) {
            if let Some(path) = local_sbp(&tree.nodes[m].pose, &eval.pose, esdf, model, regions, cfg, rng)
            {
                connection = Some((m, path));
                break;
            }
        }
    }
    let (parent, path) = connection?;
    let edge_cost = edge_cost_of(&path, cfg);
    let id = tree.nodes.len();
    tree.nodes.push(PlanNode {
        pose: eval.pose,
        gain: eval.gain,
        termination: eval.termination,
        p_img: eval.p_img,
        terminating: eval.terminating,
        minimally_exploring: eval.minimally_exploring,
        visited: false,
        eval_version: eval.eval_version,
        frustum_aabb: eval.aabb,
        parent: Some(parent),
        edge_cost,
        edge_path: path,
        cost: tree.nodes[parent].cost + edge_cost,
    });

    // Rewiring: route neighbors through the new node when that is cheaper.
    let mut rewired = false;
    let new_cost = tree.nodes[id].cost;
    let new_pose = tree.nodes[id].pose;
    for &m in &neighbors {
        if m == parent || m == tree.root {
            continue;
        }
        let path = vec![new_pose, tree.nodes[m].pose];
        let ec = edge_cost_of(&path, cfg);
        if new_cost + ec + 1e-9 < tree.nodes[m].cost
            && !on_root_path(tree, id, m)
            && segment_traversable(
                &path[0],
                &path[1],
                model,
                esdf,
                regions,
                esdf.grid().voxel_size,
            )
        {
            tree.nodes[m].parent = Some(id);
            tree.nodes[m].edge_cost = ec;
            tree.nodes[m].edge_path = path;
            rewired = true;
        }
    }
    if rewired {
        tree.recompute_costs();
    }
    Some(id)
}

/// True when `ancestor` lies on the root path of `id` (reparenting `id`
/// under a descendant would cycle).
fn on_root_path(tree: &PlanTree, id: usize, ancestor: usize) -> bool {
    let mut cur = id;
    loop {
        if cur == ancestor {
            return true;
        }
        match tree.nodes[cur].parent {
            Some(p) => cur = p,
            None => return false,
        }
    }
}

/// Best target per the selection rule: terminating nodes by T(n)/C(P_n)
/// when any exist, otherwise any node by G(P_n)/C(P_n); ties go to the
/// lower cost, then the lower node id.
pub fn select_target(tree: &PlanTree) -> Option<usize> {
    let candidates: Vec<usize> = (0..tree.nodes.len())
        .filter(|&i| i != tree.root && tree.nodes[i].cost > 0.0 && tree.nodes[i].cost.is_finite())
        .collect();
    if candidates.is_empty() {
        return None;
    }
    let terminating: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| tree.nodes[i].terminating)
        .collect();
    let (pool, score): (&[usize], fn(&PlanTree, usize) -> f64) = if terminating.is_empty() {
        (&candidates, |t, i| t.path_gain(i) / t.nodes[i].cost)
    } else {
        (&terminating, |t, i| t.nodes[i].termination / t.nodes[i].cost)
    };
    pool.iter()
        .copied()
        .min_by(|&x, &y| {
            score(tree, y)
                .partial_cmp(&score(tree, x))
                .unwrap()
                .then(tree.nodes[x].cost.partial_cmp(&tree.nodes[y].cost).unwrap())
                .then(x.cmp(&y))
        })
}

/// Re-root the tree at `new_root`: edges along the old root path are
/// reversed, costs recomputed. Gains stay and refresh lazily via the
/// digest check.
pub fn advance_root(tree: &mut PlanTree, new_root: usize) {
    if new_root == tree.root {
        return;
    }
    let path = tree.root_path(new_root);
    // Walk root -> new_root, flipping each edge's direction.
    for w in path.windows(2) {
        let (parent, child) = (w[0], w[1]);
        let mut rev_path = tree.nodes[child].edge_path.clone();
        rev_path.reverse();
        tree.nodes[parent].parent = Some(child);
        tree.nodes[parent].edge_cost = tree.nodes[child].edge_cost;
        tree.nodes[parent].edge_path = rev_path;
    }
    tree.nodes[new_root].parent = None;
    tree.nodes[new_root].edge_cost = 0.0;
    tree.nodes[new_root].edge_path = Vec::new();
    tree.root = new_root;
    tree.recompute_costs();
}

/// What the planner wants the controller to do this tick.
#[derive(Debug, Clone)]
pub enum Directive {
    /// Follow `path` (starts at the current root pose) to tree node
    /// `node`; intermediate poses already carry the travel pitch sweep.
    Waypoint { path: Vec<ViewPose>, node: usize },
    /// The agent occupies a terminating node.
    Terminate,
    /// A collision was reported; back away from the marked region.
    Recover(UntraversableRegion),
    /// No traversable samples after widening the bounds.
    Stuck { diagnostics: String },
}

/// Planner state carried across ticks.
pub struct Planner {
    pub cfg: PlannerConfig,
    pub gcfg: GuidanceConfig,
    pub levels: Option<Vec<ProximityLevel>>,
    pub model: CollisionModel,
    pub regions: RegionSet,
    pub tree: PlanTree,
    rng: ChaCha8Rng,
    pending_touched: Option<VoxelAabb>,
    pending_collision: Option<UntraversableRegion>,
    no_sample_iters: usize,
    bounds_doubled: bool,
    /// Currently committed target node; kept across replans while it stays
    /// competitive so gain refreshes mid-turn don't flip the plan.
    committed: Option<usize>,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        gcfg: GuidanceConfig,
        levels: Option<Vec<ProximityLevel>>,
        model: CollisionModel,
        root_pose: ViewPose,
        seed: u64,
    ) -> Self {
        Planner {
            cfg,
            gcfg,
            levels,
            model,
            regions: RegionSet::default(),
            tree: PlanTree::new(root_pose),
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending_touched: None,
            pending_collision: None,
            no_sample_iters: 0,
            bounds_doubled: false,
            committed: None,
        }
    }

    /// Feed the fusion summary of the latest frame; drives lazy gain
    /// invalidation.
    pub fn observe_update(&mut self, touched: Option<&VoxelAabb>) {
        if let Some(t) = touched {
            match self.pending_touched.as_mut() {
                Some(acc) => {
                    acc.min = [
                        acc.min[0].min(t.min[0]),
                        acc.min[1].min(t.min[1]),
                        acc.min[2].min(t.min[2]),
                    ];
                    acc.max = [
                        acc.max[0].max(t.max[0]),
                        acc.max[1].max(t.max[1]),
                        acc.max[2].max(t.max[2]),
                    ];
                }
                None => self.pending_touched = Some(t.clone()),
            }
        }
    }

    /// Report a collision at `pose`: the forward triangle is marked
    /// untraversable and the next plan step issues a recovery directive.
    pub fn note_collision(&mut self, pose: &ViewPose) {
        // Keep the marked wedge shallow: a deep wedge inside a corridor can
        // block the whole cross-section and prune the only route forward.
        let tri = UntraversableRegion::ahead_of(pose, 0.35, pose.position.z - 2.0, pose.position.z + 1.0);
        self.regions.mark_untraversable(tri.clone());
        self.pending_collision = Some(tri);
    }

    /// The agent reached tree node `id`; re-root there.
    pub fn reached(&mut self, id: usize) {
        if self.committed == Some(id) {
            self.committed = None;
        }
        self.tree.nodes[id].visited = true;
        self.tree.nodes[id].gain = 0.0;
        advance_root(&mut self.tree, id);
    }

    /// Stickiness with hysteresis: without it, turning toward a target
    /// observes the very region that gave it its gain, the refreshed score
    /// drops, and the selection flips sides every replan -- the agent spins
    /// in place forever. The committed target is kept until it is reached,
    /// invalidated, or falls below half the current best's score; a
    /// terminating best always wins immediately.
    fn sticky_target(&mut self, best: usize) -> usize {
        const COMMIT_HYSTERESIS: f64 = 0.5;
        let t = &self.tree;
        let valid = |i: usize| {
            i < t.nodes.len() && i != t.root && t.nodes[i].cost > 0.0 && t.nodes[i].cost.is_finite()
        };
        let chosen = match self.committed {
            Some(c) if valid(c) && !t.nodes[best].terminating => {
                if t.nodes[c].terminating {
                    c
                } else {
                    let sc = t.path_gain(c) / t.nodes[c].cost;
                    let sb = t.path_gain(best) / t.nodes[best].cost;
                    if sc >= COMMIT_HYSTERESIS * sb {
                        c
                    } else {
                        best
                    }
                }
            }
            _ => best,
        };
        self.committed = Some(chosen);
        chosen
    }

    fn refresh_stale(&mut self, map: &VoxelMap) {
        let Some(touched) = self.pending_touched.take() else {
            return;
        };
        let version = map.version();
        for id in 0..self.tree.nodes.len() {
            let stale = {
                let n = &self.tree.nodes[id];
                n.eval_version < version
                    && n.frustum_aabb
                        .as_ref()
                        .map_or(true, |b| b.intersects(&touched))
            };
            if !stale {
                continue;
            }
            let pose = self.tree.nodes[id].pose;
            let eval = evaluate_gain(&pose, map, self.levels.as_deref(), &self.gcfg, &self.cfg);
            let termination = evaluate_termination(&pose.position, map, &self.cfg);
            let n = &mut self.tree.nodes[id];
            n.gain = if n.visited { 0.0 } else { eval.gain };
            n.p_img = eval.p_img;
            n.frustum_aabb = eval.aabb;
            n.termination = termination;
            n.terminating = termination >= self.cfg.t_min;
            n.eval_version = version;
        }
    }

    /// Drop subtrees whose parent edge crosses newly marked regions.
    fn prune_untraversable(&mut self, esdf: &EsdfGrid) {
        let mut bad = vec![false; self.tree.nodes.len()];
        for id in 0..self.tree.nodes.len() {
            if self.tree.nodes[id].parent.is_none() {
                continue;
            }
            let path = &self.tree.nodes[id].edge_path;
            let crosses = path.windows(2).any(|w| {
                !segment_traversable(
                    &w[0],
                    &w[1],
                    &self.model,
                    esdf,
                    &self.regions,
                    esdf.grid().voxel_size,
                )
            });
            if crosses {
                bad[id] = true;
            }
        }
        self.drop_bad(bad);
    }

    /// Remove every node whose root path passes through a `bad` edge, then
    /// remap ids (including the committed target) and recompute costs.
    fn drop_bad(&mut self, bad: Vec<bool>) {
        // Propagate: a node is dropped if any edge on its root path is bad.
        let ids: Vec<usize> = (0..self.tree.nodes.len()).collect();
        let mut keep: Vec<usize> = Vec::new();
        for &id in &ids {
            let dropped = self
                .tree
                .root_path(id)
                .iter()
                .any(|&i| bad[i]);
            if !dropped {
                keep.push(id);
            }
        }
        if keep.len() == self.tree.nodes.len() {
            return;
        }
        let mut remap = vec![usize::MAX; self.tree.nodes.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut nodes = Vec::with_capacity(keep.len());
        for &old in &keep {
            let mut n = self.tree.nodes[old].clone();
            n.parent = n.parent.map(|p| remap[p]);
            nodes.push(n);
        }
        self.tree.nodes = nodes;
        self.tree.root = remap[self.tree.root];
        self.committed = self
            .committed
            .and_then(|c| (remap[c] != usize::MAX).then(|| remap[c]));
        self.tree.recompute_costs();
    }

    fn sample_position(&mut self, around: &Point3<f64>, local: bool) -> Point3<f64> {
        if local {
            let r = self.cfg.local_radius * self.rng.gen::<f64>().sqrt();
            let th = self.rng.gen_range(0.0..std::f64::consts::TAU);
            Point3::new(around.x + r * th.cos(), around.y + r * th.sin(), around.z)
        } else {
            Point3::new(
                self.rng.gen_range(self.cfg.global_min.x..self.cfg.global_max.x),
                self.rng.gen_range(self.cfg.global_min.y..self.cfg.global_max.y),
                around.z,
            )
        }
    }

    /// One planning call: refresh stale scores, sample and connect new
    /// viewpoints (densely near the agent first, then globally), then pick
    /// the stride toward the best target.
    pub fn plan_step(&mut self, agent: &ViewPose, map: &VoxelMap, esdf: &EsdfGrid) -> Directive {
        if let Some(tri) = self.pending_collision.take() {
            self.prune_untraversable(esdf);
            return Directive::Recover(tri);
        }
        self.refresh_stale(map);
        // Keep the root aligned with the agent's actual pose.
        let root = self.tree.root;
        self.tree.nodes[root].pose = *agent;
        // Re-anchor the root's outgoing edges at the agent's actual pose.
        // Their stored paths start wherever the root was when they were
        // connected, so once the agent drifts, both the execution waypoints
        // and the travel costs go stale -- distant subtrees then keep the
        // cheap cost they had from the old anchor and win the ratio even
        // though the agent would have to backtrack to reach them.
        {
            let mut bad = vec![false; self.tree.nodes.len()];
            let mut any_bad = false;
            for id in 0..self.tree.nodes.len() {
                if self.tree.nodes[id].parent != Some(root) {
                    continue;
                }
                let child_pose = self.tree.nodes[id].pose;
                if segment_traversable(
                    agent,
                    &child_pose,
                    &self.model,
                    esdf,
                    &self.regions,
                    esdf.grid().voxel_size,
                ) {
                    let path = vec![*agent, child_pose];
                    self.tree.nodes[id].edge_cost = edge_cost_of(&path, &self.cfg);
                    self.tree.nodes[id].edge_path = path;
                } else {
                    bad[id] = true;
                    any_bad = true;
                }
            }
            if any_bad {
                self.drop_bad(bad);
            }
            self.tree.recompute_costs();
        }
        let root = self.tree.root;
        {
            let termination = evaluate_termination(&agent.position, map, &self.cfg);
            let n = &mut self.tree.nodes[root];
            n.termination = termination;
            n.terminating = termination >= self.cfg.t_min;
        }
        if self.tree.nodes[root].terminating {
            return Directive::Terminate;
        }
        // Any node whose viewpoint the agent currently holds is spent: the
        // map just absorbed that exact view, so it offers no new gain at
        // near-zero cost and would otherwise dominate the ratio forever.
        for n in &mut self.tree.nodes {
            if !n.visited
                && (n.pose.position - agent.position).norm() <= 0.35
                && wrap_angle(n.pose.yaw - agent.yaw).abs() <= 0.5
            {
                n.visited = true;
                n.gain = 0.0;
            }
        }

        let (n_local, n_global) = if self.tree.len() >= self.cfg.max_nodes {
            (3, 0)
        } else {
            (self.cfg.local_samples, self.cfg.global_samples)
        };
        let mut accepted = 0;
        for i in 0..(n_local + n_global) {
            let local = i < n_local;
            let position = self.sample_position(&agent.position, local);
            let candidate = ViewPose::new(position, 0.0, 0.0);
            if !pose_traversable(&candidate, &self.model, esdf, &self.regions) {
                continue;
            }
            // Only stand where the map has actually seen free space. Without
            // this gate, samples landing inside never-observed solids pass the
            // optimistic traversability check and score high phantom gain,
            // and the agent thrashes between wall interiors until each face
            // gets mapped.
            match map.grid().world_to_voxel(&position) {
                Some(v) if map.occupancy_state(v) == OccupancyState::Free => {}
                _ => continue,
            }
            let (nearest, _) = (0..self.tree.nodes.len())
                .map(|i| (i, (self.tree.nodes[i].pose.position - position).norm()))
                .min_by(|x, y| x.1.partial_cmp(&y.1).unwrap())
                .unwrap();
            let travel_yaw = heading(&self.tree.nodes[nearest].pose.position, &position);
            let eval = evaluate_node(
                position,
                travel_yaw,
                map,
                self.levels.as_deref(),
                &self.gcfg,
                &self.cfg,
            );
            if connect_node(
                &mut self.tree,
                eval,
                esdf,
                &self.model,
                &self.regions,
                &self.cfg,
                &mut self.rng,
            )
            .is_some()
            {
                accepted += 1;
            }
        }

        let target = select_target(&self.tree);
        if accepted == 0 && target.is_none() {
            self.no_sample_iters += 1;
            if self.no_sample_iters >= self.cfg.stuck_iters {
                if !self.bounds_doubled {
                    let c = nalgebra::center(&self.cfg.global_min, &self.cfg.global_max);
                    self.cfg.global_min = c + (self.cfg.global_min - c) * 2.0;
                    self.cfg.global_max = c + (self.cfg.global_max - c) * 2.0;
                    self.bounds_doubled = true;
                    self.no_sample_iters = 0;
                } else {
                    return Directive::Stuck {
                        diagnostics: format!(
                            "no traversable samples after {} iterations with doubled bounds; tree size {}",
                            self.cfg.stuck_iters,
                            self.tree.len()
                        ),
                    };
                }
            }
            // Nothing new this tick; hold position.
            return Directive::Waypoint {
                path: vec![*agent],
                node: self.tree.root,
            };
        }
        self.no_sample_iters = 0;
        let Some(target) = target else {
            return Directive::Waypoint {
                path: vec![*agent],
                node: self.tree.root,
            };
        };

        if std::env::var_os("IPPON_DEBUG").is_some() {
            let mut scored: Vec<(usize, f64)> = (0..self.tree.nodes.len())
                .filter(|&i| {
                    i != self.tree.root
                        && self.tree.nodes[i].cost > 0.0
                        && self.tree.nodes[i].cost.is_finite()
                })
                .map(|i| (i, self.tree.path_gain(i) / self.tree.nodes[i].cost))
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
            eprintln!(
                "plan agent=({:.2},{:.2},{:.2}) committed={:?} best={target}",
                agent.position.x, agent.position.y, agent.yaw, self.committed
            );
            for (i, r) in scored.iter().take(5) {
                let n = &self.tree.nodes[*i];
                eprintln!(
                    "  cand {i}: pos=({:.2},{:.2}) yaw={:.2} gain={:.2} pgain={:.2} cost={:.2} ratio={:.3} term={}",
                    n.pose.position.x,
                    n.pose.position.y,
                    n.pose.yaw,
                    n.gain,
                    self.tree.path_gain(*i),
                    n.cost,
                    r,
                    n.terminating
                );
            }
        }
        let target = self.sticky_target(target);
        // Next stride: the first tree node along the root path to the
        // target, with the travel pitch sweep over intermediate poses.
        // Yaw-only nodes co-located with the agent are re-rooted through
        // immediately; treating them as strides burns a tick turning to
        // each one and can ping-pong between two of them forever.
        let mut path_ids = self.tree.root_path(target);
        while path_ids.len() > 2
            && (self.tree.nodes[path_ids[1]].pose.position - agent.position).norm() <= 0.15
        {
            self.tree.nodes[path_ids[1]].visited = true;
            self.tree.nodes[path_ids[1]].gain = 0.0;
            advance_root(&mut self.tree, path_ids[1]);
            let root = self.tree.root;
            self.tree.nodes[root].pose = *agent;
            path_ids = self.tree.root_path(target);
        }
        // Full multi-hop path to the target: intermediate tree nodes are
        // passed through on position alone, so the terminal yaw alignment
        // happens once at the target instead of at every hop.
        let next = *path_ids.last().unwrap();
        let mut path: Vec<ViewPose> = Vec::new();
        for &id in &path_ids[1..] {
            let edge = &self.tree.nodes[id].edge_path;
            if path.is_empty() {
                path.extend(edge.iter().copied());
            } else {
                path.extend(edge.iter().skip(1).copied());
            }
            if edge.is_empty() {
                path.push(self.tree.nodes[id].pose);
            }
        }
        if path.is_empty() {
            path = vec![*agent, self.tree.nodes[next].pose];
        }
        if self.cfg.travel_pitch {
            let m = path.len();
            for (k, p) in path.iter_mut().enumerate().skip(1) {
                if k + 1 == m {
                    break;
                }
                // Alternate between the pitch limits to sweep the camera.
                p.pitch = if k % 2 == 1 { -self.cfg.pitch_limit } else { self.cfg.pitch_limit };
            }
        }
        if let Some(last) = path.last_mut() {
            *last = self.tree.nodes[next].pose;
        }
        Directive::Waypoint { path, node: next }
    }
}
