//! Submap pose graph: node merging, loop closures and robust optimisation with a gravity prior.
//!
//! Nodes are rigid submap frames. A submap either becomes a new node or is folded into an
//! existing one when the two surfel maps agree; folded submaps keep their offset inside the
//! node frame so per-submap poses stay available after optimisation.

use crate::geometry::{exp_so3, hat, log_so3_unchecked, orthonormalize, right_jacobian_inv, Mat3, Pose, Vec3};
use crate::spatial::PointIndex;
use crate::surfel::Surfel;
use nalgebra::{DMatrix, DVector, Matrix3x6, Matrix6, SymmetricEigen, Vector6};
use serde_json::{json, Value};
use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::io::{self, Write};
use thiserror::Error;

/// 95% quantile of χ² with 3 degrees of freedom.
pub const CHI2_3_95: f64 = 7.814727903251178;
/// 95% quantile of χ² with 6 degrees of freedom.
pub const CHI2_6_95: f64 = 12.591587243743977;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubmapId {
    pub agent: u32,
    pub seq: u64,
}

/// Compact surfel stored in submaps and node maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSurfel {
    pub position: Vec3,
    pub normal: Vec3,
    pub resolution: f64,
    pub planarity: f64,
    pub mean_time: f64,
    pub point_count: u32,
}

impl From<&Surfel> for MapSurfel {
    fn from(s: &Surfel) -> Self {
        Self {
            position: s.position,
            normal: s.normal,
            resolution: s.resolution,
            planarity: s.planarity,
            mean_time: s.mean_time,
            point_count: s.point_count.min(u32::MAX as usize) as u32,
        }
    }
}

impl MapSurfel {
    pub fn transformed(&self, t: &Pose) -> Self {
        Self { position: t.transform_point(&self.position), normal: t.rotation * self.normal, ..*self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Submap {
    pub id: SubmapId,
    pub t0: f64,
    pub t1: f64,
    /// Odometry estimate of the local frame (pose at `t0`).
    pub base_pose: Pose,
    /// Surfels in the local frame.
    pub surfels: Vec<MapSurfel>,
    /// Unit up direction in the local frame.
    pub up_local: Vec3,
    /// Relative pose from the previous submap of the same agent and its covariance.
    pub odom_edge: Option<(Pose, Matrix6<f64>)>,
}

pub type NodeId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub pose: Pose,
    /// Member submaps with the pose of each submap frame inside the node frame.
    pub members: Vec<(SubmapId, Pose)>,
    /// Merged surfel map in the node frame.
    pub surfels: Vec<MapSurfel>,
    pub up: Vec3,
    up_sum: Vec3,
}

impl Node {
    pub fn first_member(&self) -> SubmapId {
        self.members[0].0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EdgeKind {
    Odometry,
    LoopClosure,
}

impl EdgeKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Odometry => "odometry",
            Self::LoopClosure => "loop_closure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub i: NodeId,
    pub j: NodeId,
    pub kind: EdgeKind,
    /// Measured `T_i⁻¹·T_j`.
    pub measurement: Pose,
    pub covariance: Matrix6<f64>,
    sqrt_info: Matrix6<f64>,
}

impl Edge {
    pub fn new(i: NodeId, j: NodeId, kind: EdgeKind, measurement: Pose, covariance: Matrix6<f64>) -> Result<Self, PoseGraphError> {
        if i == j {
            return Err(PoseGraphError::SelfEdge(i));
        }
        let covariance = (covariance + covariance.transpose()) * 0.5;
        let l = covariance.cholesky().ok_or(PoseGraphError::NotPositiveDefinite)?.l();
        let sqrt_info = l.try_inverse().ok_or(PoseGraphError::NotPositiveDefinite)?;
        Ok(Self { i, j, kind, measurement, covariance, sqrt_info })
    }

    /// Whitened `[log R_E; t_E]` with `E = Z⁻¹·T_i⁻¹·T_j` and its Jacobians for right perturbations.
    pub fn residual(&self, ti: &Pose, tj: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
        let (r, ji, jj) = edge_residual(&self.measurement, ti, tj);
        (self.sqrt_info * r, self.sqrt_info * ji, self.sqrt_info * jj)
    }
}

/// Unwhitened edge residual and Jacobians with respect to `T_i` and `T_j`.
pub fn edge_residual(z: &Pose, ti: &Pose, tj: &Pose) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let rz_t = z.rotation.transpose();
    let d = ti.rotation.transpose() * (tj.translation - ti.translation);
    let re = rz_t * ti.rotation.transpose() * tj.rotation;
    let theta = log_so3_unchecked(&re);
    let te = rz_t * (d - z.translation);
    let mut r = Vector6::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&theta);
    r.fixed_rows_mut::<3>(3).copy_from(&te);
    let jinv = right_jacobian_inv(&theta);
    let mut ji = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jinv * re.transpose() * rz_t));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(rz_t * hat(&d)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&-rz_t);
    let mut jj = Matrix6::zeros();
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&re);
    (r, ji, jj)
}

/// `√κ·(R·û − e_z)` and its Jacobian with respect to a right rotation perturbation.
pub fn gravity_residual(rotation: &Mat3, up: &Vec3, kappa: f64) -> (Vec3, Matrix3x6<f64>) {
    let s = kappa.sqrt();
    let r = (rotation * up - Vec3::z()) * s;
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rotation * hat(up) * s));
    (r, j)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoseGraphError {
    #[error("unknown predecessor submap {0:?}")]
    UnknownPredecessor(SubmapId),
    #[error("submap {0:?} already in the graph")]
    DuplicateSubmap(SubmapId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("nodes {0} and {1} are not connected")]
    Disconnected(NodeId, NodeId),
    #[error("edge from node {0} to itself")]
    SelfEdge(NodeId),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("ICP rejected: {0} correspondences")]
    TooFewCorrespondences(usize),
    #[error("empty surfel map")]
    EmptyMap,
    #[error("pose graph has no anchored node")]
    NoAnchor,
    #[error("normal equations are singular")]
    Singular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpParams {
    pub max_iters: usize,
    pub tolerance: f64,
    pub min_correspondences: usize,
    /// Correspondence radius as a multiple of the finest resolution.
    pub max_distance_factor: f64,
    /// Minimum |cos| between matched normals.
    pub normal_agreement: f64,
    /// Lower bound on the residual standard deviation used to scale the covariance (m).
    pub sigma_floor: f64,
    /// Residual at which a correspondence stops contributing to the alignment score (m).
    pub inlier_residual: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iters: 30, tolerance: 1e-4, min_correspondences: 10, max_distance_factor: 2.0, normal_agreement: 0.85, sigma_floor: 0.01, inlier_residual: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphConfig {
    pub overlap_threshold: f64,
    pub merge_gate: f64,
    pub loop_gate: f64,
    pub candidate_gate: f64,
    /// Sensor-overlap radius added to the candidate covariance (m).
    pub candidate_radius: f64,
    pub max_candidates: usize,
    pub gravity_weight: f64,
    /// Cauchy scale on whitened loop-closure residual norms.
    pub cauchy_scale: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub loop_every: usize,
    pub yaw_bins: usize,
    pub min_fitness: f64,
    /// Fitness required for closures between unconnected components.
    pub min_fitness_unconnected: f64,
    /// Nodes of other components tried per loop search.
    pub max_unconnected: usize,
    pub icp: IcpParams,
}

impl Default for PoseGraphConfig {
    fn default() -> Self {
        Self {
            overlap_threshold: 0.6,
            merge_gate: CHI2_6_95,
            loop_gate: CHI2_6_95,
            candidate_gate: CHI2_3_95,
            candidate_radius: 2.0,
            max_candidates: 3,
            gravity_weight: 100.0,
            cauchy_scale: 3.0,
            max_iters: 50,
            tolerance: 1e-6,
            loop_every: 5,
            yaw_bins: 16,
            min_fitness: 0.3,
            min_fitness_unconnected: 0.5,
            max_unconnected: 8,
            icp: IcpParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Pose of frame b in frame a.
    pub pose: Pose,
    pub covariance: Matrix6<f64>,
    /// Fraction of b's surfels with a correspondence.
    pub fitness: f64,
    /// Truncated-quadratic score `Σ max(0, 1 − r²/τ²) / |b|` over point-to-plane residuals;
    /// unlike `fitness` it separates precise fits from loose overlaps of similar layouts.
    pub score: f64,
    pub rms: f64,
    pub correspondences: usize,
    pub iterations: usize,
}

/// Per-resolution k-d trees over surfel centres.
struct SurfelIndex {
    trees: BTreeMap<u64, (PointIndex<3>, Vec<usize>)>,
}

impl SurfelIndex {
    fn new(map: &[MapSurfel]) -> Self {
        let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, s) in map.iter().enumerate() {
            groups.entry(s.resolution.to_bits()).or_default().push(i);
        }
        let trees = groups
            .into_iter()
            .map(|(k, idx)| {
                let pts: Vec<[f64; 3]> = idx.iter().map(|&i| map[i].position.into()).collect();
                (k, (PointIndex::new(&pts), idx))
            })
            .collect();
        Self { trees }
    }

    /// Closest same-resolution surfel and its squared distance.
    fn nearest(&self, p: &Vec3, resolution: f64) -> Option<(usize, f64)> {
        let (tree, idx) = self.trees.get(&resolution.to_bits())?;
        let (i, d2) = tree.nearest(&[p.x, p.y, p.z])?;
        Some((idx[i], d2))
    }
}

fn correspondences(index: &SurfelIndex, a: &[MapSurfel], b: &[MapSurfel], t: &Pose, max_d2: f64, agree: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (ib, sb) in b.iter().enumerate() {
        let p = t.transform_point(&sb.position);
        if let Some((ia, d2)) = index.nearest(&p, sb.resolution) {
            if d2 <= max_d2 && a[ia].normal.dot(&(t.rotation * sb.normal)).abs() >= agree {
                out.push((ia, ib));
            }
        }
    }
    out
}

fn icp_system(a: &[MapSurfel], b: &[MapSurfel], t: &Pose, pairs: &[(usize, usize)]) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut sq = 0.0;
    for &(ia, ib) in pairs {
        let n = a[ia].normal;
        let pb = b[ib].position;
        let r = n.dot(&(t.transform_point(&pb) - a[ia].position));
        let nr = t.rotation.transpose() * n;
        let mut j = Vector6::zeros();
        j.fixed_rows_mut::<3>(0).copy_from(&(-hat(&pb).transpose() * nr));
        j.fixed_rows_mut::<3>(3).copy_from(&nr);
        h += j * j.transpose();
        g += j * r;
        sq += r * r;
    }
    (h, g, sq)
}

/// Point-to-plane ICP of surfel centres of `b` against the planes of `a`, starting at `init` (pose of b in a).
pub fn icp_point_to_plane(a: &[MapSurfel], b: &[MapSurfel], init: &Pose, params: &IcpParams) -> Result<IcpResult, PoseGraphError> {
    if a.is_empty() || b.is_empty() {
        return Err(PoseGraphError::EmptyMap);
    }
    let finest = a.iter().map(|s| s.resolution).fold(f64::INFINITY, f64::min);
    let max_d2 = (params.max_distance_factor * finest).powi(2);
    let index = SurfelIndex::new(a);
    let mut t = *init;
    let mut iterations = 0;
    for _ in 0..params.max_iters {
        let pairs = correspondences(&index, a, b, &t, max_d2, params.normal_agreement);
        if pairs.len() < params.min_correspondences {
            return Err(PoseGraphError::TooFewCorrespondences(pairs.len()));
        }
        let (mut h, g, _) = icp_system(a, b, &t, &pairs);
        let scale = h.diagonal().max().max(1.0);
        for k in 0..6 {
            h[(k, k)] += 1e-9 * scale;
        }
        let dx = -h.cholesky().ok_or(PoseGraphError::Singular)?.solve(&g);
        t = t.retract(&dx).normalized();
        iterations += 1;
        if dx.norm() < params.tolerance {
            break;
        }
    }
    let pairs = correspondences(&index, a, b, &t, max_d2, params.normal_agreement);
    if pairs.len() < params.min_correspondences {
        return Err(PoseGraphError::TooFewCorrespondences(pairs.len()));
    }
    let (mut h, _, sq) = icp_system(a, b, &t, &pairs);
    let n = pairs.len();
    let tau2 = params.inlier_residual.powi(2);
    let score = pairs
        .iter()
        .map(|&(ia, ib)| {
            let r = a[ia].normal.dot(&(t.transform_point(&b[ib].position) - a[ia].position));
            (1.0 - r * r / tau2).max(0.0)
        })
        .sum::<f64>()
        / b.len() as f64;
    let s2 = (sq / (n.saturating_sub(6).max(1)) as f64).max(params.sigma_floor.powi(2));
    let scale = h.diagonal().max().max(1.0);
    for k in 0..6 {
        h[(k, k)] += 1e-9 * scale;
    }
    let covariance = h.try_inverse().ok_or(PoseGraphError::Singular)? * s2;
    Ok(IcpResult {
        pose: t,
        covariance: (covariance + covariance.transpose()) * 0.5,
        fitness: n as f64 / b.len() as f64,
        score,
        rms: (sq / n as f64).sqrt(),
        correspondences: n,
        iterations,
    })
}

/// Rotation about `axis` through `angle`.
fn axis_rotation(axis: &Vec3, angle: f64) -> Mat3 {
    exp_so3(&(axis.normalize() * angle))
}

fn centroid(map: &[MapSurfel]) -> Vec3 {
    map.iter().map(|s| s.position).sum::<Vec3>() / map.len().max(1) as f64
}

/// ICP from every yaw bin about `up_a` (gravity axis in frame a); keeps the best-scoring fit.
/// Without an initial guess the translation is seeded by matching the map centroids.
pub fn icp_yaw_grid(
    a: &[MapSurfel],
    b: &[MapSurfel],
    init: Option<&Pose>,
    up_a: &Vec3,
    bins: usize,
    params: &IcpParams,
) -> Result<IcpResult, PoseGraphError> {
    if a.is_empty() || b.is_empty() {
        return Err(PoseGraphError::EmptyMap);
    }
    let mut best: Option<IcpResult> = None;
    let mut last_err = PoseGraphError::TooFewCorrespondences(0);
    let (ca, cb) = (centroid(a), centroid(b));
    for k in 0..bins.max(1) {
        let yaw = axis_rotation(up_a, 2.0 * std::f64::consts::PI * k as f64 / bins.max(1) as f64);
        let start = match init {
            Some(p) => Pose::new(yaw * p.rotation, p.translation),
            None => {
                let r = yaw;
                Pose::new(r, ca - r * cb)
            }
        };
        match icp_point_to_plane(a, b, &start, params) {
            Ok(res) => {
                let better = match &best {
                    None => true,
                    Some(cur) => res.score > cur.score + 1e-12 || ((res.score - cur.score).abs() <= 1e-12 && res.rms < cur.rms),
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => last_err = e,
        }
    }
    best.ok_or(last_err)
}

/// Fraction of the smaller map's surfels within one voxel of a same-resolution surfel of the other.
pub fn overlap_fraction(a: &[MapSurfel], b: &[MapSurfel], t_ab: &Pose) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let (small, large, t) = if b.len() <= a.len() { (b, a, *t_ab) } else { (a, b, t_ab.inverse()) };
    let index = SurfelIndex::new(large);
    let hits = small
        .iter()
        .filter(|s| {
            let p = t.transform_point(&s.position);
            index.nearest(&p, s.resolution).is_some_and(|(_, d2)| d2 <= s.resolution * s.resolution)
        })
        .count();
    hits as f64 / small.len() as f64
}

/// Mahalanobis acceptance with a strict inequality.
pub fn passes_gate(d2: f64, threshold: f64) -> bool {
    d2 < threshold
}

/// Covariance of `P⁻¹` given that of `P` (right perturbations).
pub fn inverse_covariance_transport(p: &Pose, cov: &Matrix6<f64>) -> Matrix6<f64> {
    let ad = p.adjoint();
    ad * cov * ad.transpose()
}

/// Covariance of `A·B` from independent right-perturbation covariances of `A` and `B`.
pub fn compose_covariance(b: &Pose, cov_a: &Matrix6<f64>, cov_b: &Matrix6<f64>) -> Matrix6<f64> {
    let ad = b.inverse().adjoint();
    ad * cov_a * ad.transpose() + cov_b
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapItem {
    cost: f64,
    node: NodeId,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GraphStats {
    pub submaps: usize,
    pub merges: usize,
    pub loops_accepted: usize,
    pub loops_rejected: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Costs after each accepted iteration.
    pub history: Vec<f64>,
    /// Connected components and their anchored node.
    pub anchors: Vec<NodeId>,
}

/// What happened to a submap handed to [`PoseGraph::ingest`].
#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub node: NodeId,
    pub merged: bool,
    pub loops: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub config: PoseGraphConfig,
    nodes: BTreeMap<NodeId, Node>,
    edges: Vec<Edge>,
    submap_node: BTreeMap<SubmapId, NodeId>,
    next_id: NodeId,
    stats: GraphStats,
}

impl PoseGraph {
    pub fn new(config: PoseGraphConfig) -> Self {
        Self { config, nodes: BTreeMap::new(), edges: Vec::new(), submap_node: BTreeMap::new(), next_id: 0, stats: GraphStats::default() }
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    pub fn node_of(&self, id: &SubmapId) -> Option<NodeId> {
        self.submap_node.get(id).copied()
    }

    /// World pose of a submap frame: node pose composed with the submap's offset.
    pub fn submap_pose(&self, id: &SubmapId) -> Option<Pose> {
        let node = self.nodes.get(self.submap_node.get(id)?)?;
        let (_, off) = node.members.iter().find(|(s, _)| s == id)?;
        Some(node.pose.compose(off))
    }

    pub fn set_node_pose(&mut self, id: NodeId, pose: Pose) -> Result<(), PoseGraphError> {
        self.nodes.get_mut(&id).ok_or(PoseGraphError::UnknownNode(id))?.pose = pose;
        Ok(())
    }

    /// Replaces a node's gravity direction (node frame), keeping its accumulated weight.
    pub fn set_node_up(&mut self, id: NodeId, up: Vec3) -> Result<(), PoseGraphError> {
        let node = self.nodes.get_mut(&id).ok_or(PoseGraphError::UnknownNode(id))?;
        let up = up.normalize();
        node.up_sum = up * node.up_sum.norm().max(1.0);
        node.up = up;
        Ok(())
    }

    pub fn add_edge(&mut self, i: NodeId, j: NodeId, kind: EdgeKind, measurement: Pose, covariance: Matrix6<f64>) -> Result<(), PoseGraphError> {
        for n in [i, j] {
            if !self.nodes.contains_key(&n) {
                return Err(PoseGraphError::UnknownNode(n));
            }
        }
        self.edges.push(Edge::new(i, j, kind, measurement, covariance)?);
        Ok(())
    }

    /// Inserts a submap as a new node chained from its predecessor, then folds it into an
    /// existing node if the maps agree. Returns the node now holding the submap.
    pub fn add_submap(&mut self, s: &Submap) -> Result<NodeId, PoseGraphError> {
        if self.submap_node.contains_key(&s.id) {
            return Err(PoseGraphError::DuplicateSubmap(s.id));
        }
        let link = match &s.odom_edge {
            Some((z, cov)) => {
                let pred = SubmapId { agent: s.id.agent, seq: s.id.seq.wrapping_sub(1) };
                let pn = self.node_of(&pred).filter(|_| s.id.seq > 0).ok_or(PoseGraphError::UnknownPredecessor(pred))?;
                let off = self.nodes[&pn].members.iter().find(|(m, _)| *m == pred).map(|(_, o)| *o).unwrap_or_else(Pose::identity);
                Some((pn, off.compose(z), *cov))
            }
            None => None,
        };
        let pose = match &link {
            Some((pn, rel, _)) => self.nodes[pn].pose.compose(rel),
            None => s.base_pose,
        };
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(id, Node { id, pose, members: vec![(s.id, Pose::identity())], surfels: s.surfels.clone(), up: s.up_local, up_sum: s.up_local });
        self.submap_node.insert(s.id, id);
        self.stats.submaps += 1;
        if let Some((pn, rel, cov)) = link {
            self.edges.push(Edge::new(pn, id, EdgeKind::Odometry, rel, cov)?);
        }
        Ok(self.try_merge(id).unwrap_or(id))
    }

    /// Attempts to fold `id` into the best agreeing older node; returns the surviving node.
    fn try_merge(&mut self, id: NodeId) -> Option<NodeId> {
        let cands = self.candidates(id, true);
        for (other, _) in cands.into_iter().take(self.config.max_candidates) {
            let (keep, absorb) = (other.min(id), other.max(id));
            let (ka, kb) = (&self.nodes[&keep], &self.nodes[&absorb]);
            let init = ka.pose.between(&kb.pose);
            let Ok(icp) = icp_point_to_plane(&ka.surfels, &kb.surfels, &init, &self.config.icp) else { continue };
            if icp.fitness < self.config.min_fitness {
                continue;
            }
            if overlap_fraction(&ka.surfels, &kb.surfels, &icp.pose) < self.config.overlap_threshold {
                continue;
            }
            let Some(d2) = self.consistency(keep, absorb, &icp) else { continue };
            if !passes_gate(d2, self.config.merge_gate) {
                continue;
            }
            self.merge_nodes(keep, absorb, &icp.pose);
            return Some(keep);
        }
        None
    }

    /// Mahalanobis distance between an alignment of `(i, j)` and the graph's relative pose.
    fn consistency(&self, i: NodeId, j: NodeId, icp: &IcpResult) -> Option<f64> {
        let cov = self.relative_covariance(i, j).ok()? + icp.covariance;
        let rel = self.nodes[&i].pose.between(&self.nodes[&j].pose);
        let r = icp.pose.between(&rel).log_parts();
        let inv = cov.try_inverse()?;
        Some((r.transpose() * inv * r)[(0, 0)])
    }

    /// Folds node `absorb` into `keep`; `t_ka` is the pose of `absorb`'s frame in `keep`'s frame.
    pub fn merge_nodes(&mut self, keep: NodeId, absorb: NodeId, t_ka: &Pose) {
        let Some(gone) = self.nodes.remove(&absorb) else { return };
        let node = self.nodes.get_mut(&keep).expect("merge target exists");
        for (sid, off) in gone.members {
            node.members.push((sid, t_ka.compose(&off)));
            self.submap_node.insert(sid, keep);
        }
        let index = SurfelIndex::new(&node.surfels);
        let extra: Vec<MapSurfel> = gone
            .surfels
            .iter()
            .map(|s| s.transformed(t_ka))
            .filter(|s| {
                !index.nearest(&s.position, s.resolution).is_some_and(|(i, d2)| {
                    d2 <= 0.25 * s.resolution * s.resolution && node.surfels[i].normal.dot(&s.normal).abs() > 0.85
                })
            })
            .collect();
        node.surfels.extend(extra);
        node.up_sum += t_ka.rotation * gone.up_sum;
        node.up = node.up_sum.normalize();
        let ad = t_ka.adjoint();
        for e in &mut self.edges {
            if e.i == absorb {
                e.i = keep;
                e.measurement = t_ka.compose(&e.measurement);
            }
            if e.j == absorb {
                e.j = keep;
                e.measurement = e.measurement.compose(&t_ka.inverse());
                e.covariance = ad * e.covariance * ad.transpose();
                e.sqrt_info = Edge::new(0, 1, e.kind, e.measurement, e.covariance).map(|x| x.sqrt_info).unwrap_or(e.sqrt_info);
            }
        }
        self.edges.retain(|e| e.i != e.j);
        self.stats.merges += 1;
    }

    fn adjacency(&self) -> BTreeMap<NodeId, Vec<(NodeId, usize)>> {
        let mut adj: BTreeMap<NodeId, Vec<(NodeId, usize)>> = BTreeMap::new();
        for (k, e) in self.edges.iter().enumerate() {
            adj.entry(e.i).or_default().push((e.j, k));
            adj.entry(e.j).or_default().push((e.i, k));
        }
        adj
    }

    /// Minimum-trace paths from `from`: predecessor (node, edge) per reached node.
    fn shortest_paths(&self, from: NodeId) -> BTreeMap<NodeId, Option<(NodeId, usize)>> {
        let adj = self.adjacency();
        let mut dist: BTreeMap<NodeId, f64> = BTreeMap::new();
        let mut prev: BTreeMap<NodeId, Option<(NodeId, usize)>> = BTreeMap::new();
        let mut done: BTreeSet<NodeId> = BTreeSet::new();
        let mut heap = BinaryHeap::new();
        dist.insert(from, 0.0);
        prev.insert(from, None);
        heap.push(HeapItem { cost: 0.0, node: from });
        while let Some(HeapItem { cost, node }) = heap.pop() {
            if !done.insert(node) {
                continue;
            }
            for &(next, k) in adj.get(&node).map(|v| v.as_slice()).unwrap_or(&[]) {
                let c = cost + self.edges[k].covariance.trace();
                if dist.get(&next).is_none_or(|&d| c < d) {
                    dist.insert(next, c);
                    prev.insert(next, Some((node, k)));
                    heap.push(HeapItem { cost: c, node: next });
                }
            }
        }
        prev
    }

    /// Covariance of `T_i⁻¹·T_j` composed along the minimum-trace path.
    pub fn relative_covariance(&self, i: NodeId, j: NodeId) -> Result<Matrix6<f64>, PoseGraphError> {
        Ok(self.relative_covariances_from(i)?.remove(&j).ok_or(PoseGraphError::Disconnected(i, j))?)
    }

    /// Relative covariances from `i` to every node connected to it.
    pub fn relative_covariances_from(&self, i: NodeId) -> Result<BTreeMap<NodeId, Matrix6<f64>>, PoseGraphError> {
        if !self.nodes.contains_key(&i) {
            return Err(PoseGraphError::UnknownNode(i));
        }
        let prev = self.shortest_paths(i);
        let mut out: BTreeMap<NodeId, Matrix6<f64>> = BTreeMap::new();
        out.insert(i, Matrix6::zeros());
        // resolve in path order by walking each target back to a resolved ancestor
        for &target in prev.keys() {
            let mut chain = Vec::new();
            let mut cur = target;
            while !out.contains_key(&cur) {
                let (p, k) = prev[&cur].expect("non-root nodes have predecessors");
                chain.push((p, cur, k));
                cur = p;
            }
            for (p, n, k) in chain.into_iter().rev() {
                let e = &self.edges[k];
                let (step, cov) = if e.i == p { (e.measurement, e.covariance) } else { (e.measurement.inverse(), inverse_covariance_transport(&e.measurement, &e.covariance)) };
                let c = compose_covariance(&step, &out[&p], &cov);
                out.insert(n, c);
            }
        }
        Ok(out)
    }

    fn odometry_neighbours(&self, id: NodeId) -> BTreeSet<NodeId> {
        self.edges
            .iter()
            .filter(|e| e.kind == EdgeKind::Odometry && (e.i == id || e.j == id))
            .map(|e| if e.i == id { e.j } else { e.i })
            .collect()
    }

    /// Nodes whose relative translation lies inside the Mahalanobis search radius, nearest first.
    fn candidates(&self, id: NodeId, include_adjacent: bool) -> Vec<(NodeId, f64)> {
        let Some(node) = self.nodes.get(&id) else { return Vec::new() };
        let Ok(covs) = self.relative_covariances_from(id) else { return Vec::new() };
        let skip = if include_adjacent { BTreeSet::new() } else { self.odometry_neighbours(id) };
        let floor = Mat3::identity() * self.config.candidate_radius.powi(2);
        let mut out: Vec<(NodeId, f64)> = covs
            .iter()
            .filter(|(m, _)| **m != id && !skip.contains(m))
            .filter_map(|(m, cov)| {
                let rel = node.pose.between(&self.nodes[m].pose);
                let sigma = rel.rotation * cov.fixed_view::<3, 3>(3, 3) * rel.rotation.transpose() + floor;
                let d2 = rel.translation.dot(&(sigma.try_inverse()? * rel.translation));
                passes_gate(d2, self.config.candidate_gate).then_some((*m, d2))
            })
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Loop-closure candidates for `id`, excluding its odometry neighbours.
    pub fn find_loop_candidates(&self, id: NodeId) -> Vec<NodeId> {
        self.candidates(id, false).into_iter().map(|(m, _)| m).collect()
    }

    /// Nodes in other connected components (no relative covariance exists).
    fn unconnected(&self, id: NodeId) -> Vec<NodeId> {
        let reach = self.shortest_paths(id);
        self.nodes.keys().filter(|k| !reach.contains_key(k)).copied().collect()
    }

    /// Aligns node `j`'s map to node `i`'s. Uses the yaw grid when the relative yaw is poorly known.
    pub fn align(&self, i: NodeId, j: NodeId) -> Result<IcpResult, PoseGraphError> {
        let (a, b) = (self.nodes.get(&i).ok_or(PoseGraphError::UnknownNode(i))?, self.nodes.get(&j).ok_or(PoseGraphError::UnknownNode(j))?);
        let init = a.pose.between(&b.pose);
        match self.relative_covariance(i, j) {
            Ok(cov) => {
                let half_bin = std::f64::consts::PI / self.config.yaw_bins.max(1) as f64;
                let rot = cov.fixed_view::<3, 3>(0, 0);
                let yaw_var = (a.up.transpose() * rot * a.up)[(0, 0)];
                if yaw_var.sqrt() > half_bin {
                    icp_yaw_grid(&a.surfels, &b.surfels, Some(&init), &a.up, self.config.yaw_bins, &self.config.icp)
                } else {
                    icp_point_to_plane(&a.surfels, &b.surfels, &init, &self.config.icp)
                }
            }
            Err(_) => icp_yaw_grid(&a.surfels, &b.surfels, None, &a.up, self.config.yaw_bins, &self.config.icp),
        }
    }

    /// Gates an alignment of `(i, j)` against the graph and appends it as a loop closure.
    pub fn gate_and_add_loop(&mut self, i: NodeId, j: NodeId, icp: &IcpResult) -> Result<bool, PoseGraphError> {
        let connected = self.relative_covariance(i, j).is_ok();
        let accept = if connected {
            icp.fitness >= self.config.min_fitness && self.consistency(i, j, icp).is_some_and(|d2| passes_gate(d2, self.config.loop_gate))
        } else {
            icp.fitness >= self.config.min_fitness_unconnected
        };
        if !accept {
            self.stats.loops_rejected += 1;
            return Ok(false);
        }
        let mut cov = icp.covariance;
        for k in 0..6 {
            cov[(k, k)] += 1e-9;
        }
        self.add_edge(i, j, EdgeKind::LoopClosure, icp.pose, cov)?;
        self.stats.loops_accepted += 1;
        Ok(true)
    }

    /// Searches and gates loop closures for `id`. Accepted closures are followed by a merge check.
    pub fn detect_loops(&mut self, id: NodeId) -> Result<Vec<(NodeId, NodeId)>, PoseGraphError> {
        let mut found = Vec::new();
        let cands: Vec<NodeId> = self.find_loop_candidates(id).into_iter().take(self.config.max_candidates).collect();
        for other in cands {
            if !self.nodes.contains_key(&other) || !self.nodes.contains_key(&id) {
                continue;
            }
            let already = self.edges.iter().any(|e| e.kind == EdgeKind::LoopClosure && ((e.i == other && e.j == id) || (e.i == id && e.j == other)));
            if already {
                continue;
            }
            let Ok(icp) = self.align(other, id) else { continue };
            if self.gate_and_add_loop(other, id, &icp)? {
                found.push((other, id));
            }
        }
        // one closure per call joins another component; the joined poses need optimising first
        for other in self.unconnected(id).into_iter().take(self.config.max_unconnected) {
            let Ok(icp) = self.align(other, id) else { continue };
            if self.gate_and_add_loop(other, id, &icp)? {
                found.push((other, id));
                break;
            }
        }
        Ok(found)
    }

    /// Adds a submap, runs the loop search on schedule and re-optimises after new closures.
    pub fn ingest(&mut self, s: &Submap) -> Result<IngestOutcome, PoseGraphError> {
        let before = self.next_id;
        let node = self.add_submap(s)?;
        let merged = node < before;
        let mut loops = Vec::new();
        let scheduled = self.config.loop_every > 0 && self.stats.submaps % self.config.loop_every == 0;
        if !merged || scheduled {
            loops = self.detect_loops(node)?;
        }
        if !loops.is_empty() {
            self.optimize()?;
            for &(i, j) in &loops {
                if self.nodes.contains_key(&i) && self.nodes.contains_key(&j) {
                    self.try_merge(i.max(j));
                }
            }
        }
        let node = self.node_of(&s.id).unwrap_or(node);
        Ok(IngestOutcome { node, merged, loops })
    }

    /// Connected components, each represented by its node with the smallest first member.
    pub fn components(&self) -> Vec<Vec<NodeId>> {
        let adj = self.adjacency();
        let mut seen = BTreeSet::new();
        let mut comps = Vec::new();
        for &start in self.nodes.keys() {
            if seen.contains(&start) {
                continue;
            }
            let mut stack = vec![start];
            let mut comp = Vec::new();
            seen.insert(start);
            while let Some(n) = stack.pop() {
                comp.push(n);
                for &(m, _) in adj.get(&n).map(|v| v.as_slice()).unwrap_or(&[]) {
                    if seen.insert(m) {
                        stack.push(m);
                    }
                }
            }
            comp.sort_unstable();
            comps.push(comp);
        }
        comps
    }

    fn anchors(&self) -> Vec<NodeId> {
        self.components()
            .iter()
            .filter_map(|c| c.iter().min_by_key(|n| (self.nodes[n].first_member(), **n)).copied())
            .collect()
    }

    /// Robust total cost: odometry and gravity terms squared, loop closures under Cauchy.
    pub fn cost(&self) -> f64 {
        self.cost_with(&self.nodes.iter().map(|(k, n)| (*k, n.pose)).collect())
    }

    fn cost_with(&self, poses: &BTreeMap<NodeId, Pose>) -> f64 {
        let c2 = self.config.cauchy_scale.powi(2);
        let mut cost = 0.0;
        for e in &self.edges {
            let (r, _, _) = e.residual(&poses[&e.i], &poses[&e.j]);
            let s2 = r.norm_squared();
            cost += match e.kind {
                EdgeKind::Odometry => s2,
                EdgeKind::LoopClosure => c2 * (s2 / c2).ln_1p(),
            };
        }
        if self.config.gravity_weight > 0.0 {
            for (k, n) in &self.nodes {
                cost += gravity_residual(&poses[k].rotation, &n.up, self.config.gravity_weight).0.norm_squared();
            }
        }
        cost
    }

    /// Gauss-Newton with Cauchy IRLS on loop closures; each component is anchored in
    /// translation and yaw at its oldest node, leaving roll and pitch to the gravity term.
    pub fn optimize(&mut self) -> Result<OptimizeReport, PoseGraphError> {
        if self.nodes.is_empty() {
            return Err(PoseGraphError::NoAnchor);
        }
        let ids: Vec<NodeId> = self.nodes.keys().copied().collect();
        let col: BTreeMap<NodeId, usize> = ids.iter().enumerate().map(|(k, id)| (*id, 6 * k)).collect();
        let anchors = self.anchors();
        let dim = 6 * ids.len();
        let c2 = self.config.cauchy_scale.powi(2);
        let mut poses: BTreeMap<NodeId, Pose> = self.nodes.iter().map(|(k, n)| (*k, n.pose)).collect();
        let initial_cost = self.cost_with(&poses);
        let mut cost = initial_cost;
        let mut history = vec![cost];
        let mut iterations = 0;
        for _ in 0..self.config.max_iters {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            for e in &self.edges {
                let (r, ji, jj) = e.residual(&poses[&e.i], &poses[&e.j]);
                let w = match e.kind {
                    EdgeKind::Odometry => 1.0,
                    EdgeKind::LoopClosure => 1.0 / (1.0 + r.norm_squared() / c2),
                };
                let (ci, cj) = (col[&e.i], col[&e.j]);
                for (ca, ja) in [(ci, &ji), (cj, &jj)] {
                    let mut gv = g.rows_mut(ca, 6);
                    gv += ja.transpose() * r * w;
                    for (cb, jb) in [(ci, &ji), (cj, &jj)] {
                        let mut hv = h.view_mut((ca, cb), (6, 6));
                        hv += ja.transpose() * jb * w;
                    }
                }
            }
            if self.config.gravity_weight > 0.0 {
                for (k, n) in &self.nodes {
                    let (r, j) = gravity_residual(&poses[k].rotation, &n.up, self.config.gravity_weight);
                    let c = col[k];
                    let mut gv = g.rows_mut(c, 6);
                    gv += j.transpose() * r;
                    let mut hv = h.view_mut((c, c), (6, 6));
                    hv += j.transpose() * j;
                }
            }
            let scale = (0..dim).map(|i| h[(i, i)]).fold(1.0f64, f64::max);
            let big = 1e6 * scale;
            for a in &anchors {
                let c = col[a];
                let yaw_axis = poses[a].rotation.transpose() * Vec3::z();
                let rot_block = if self.config.gravity_weight > 0.0 { yaw_axis * yaw_axis.transpose() * big } else { Mat3::identity() * big };
                let mut hr = h.view_mut((c, c), (3, 3));
                hr += rot_block;
                for k in 3..6 {
                    h[(c + k, c + k)] += big;
                }
            }
            for i in 0..dim {
                h[(i, i)] += 1e-9 * scale;
            }
            let dx = -h.cholesky().ok_or(PoseGraphError::Singular)?.solve(&g);
            let mut s = 1.0;
            let mut accepted = false;
            for _ in 0..10 {
                let trial: BTreeMap<NodeId, Pose> = ids
                    .iter()
                    .map(|id| {
                        let d: Vector6<f64> = dx.fixed_rows::<6>(col[id]).into_owned() * s;
                        (*id, poses[id].retract(&d).normalized())
                    })
                    .collect();
                let c = self.cost_with(&trial);
                if c <= cost {
                    poses = trial;
                    cost = c;
                    accepted = true;
                    break;
                }
                s *= 0.5;
            }
            iterations += 1;
            if accepted {
                history.push(cost);
            }
            if !accepted || dx.norm() * s < self.config.tolerance {
                break;
            }
        }
        for (k, p) in poses {
            self.nodes.get_mut(&k).expect("node exists").pose = p;
        }
        Ok(OptimizeReport { iterations, initial_cost, final_cost: cost, history, anchors })
    }

    /// Export: nodes with TUM pose tuples, up vectors and members; edges with measurement and covariance.
    pub fn to_json(&self) -> Value {
        let tum = |p: &Pose| {
            let q = p.quaternion().coords;
            vec![p.translation.x, p.translation.y, p.translation.z, q.x, q.y, q.z, q.w]
        };
        let nodes: Vec<Value> = self
            .nodes
            .values()
            .map(|n| {
                json!({
                    "id": n.id,
                    "pose": tum(&n.pose),
                    "up": [n.up.x, n.up.y, n.up.z],
                    "members": n.members.iter().map(|(s, _)| json!([s.agent, s.seq])).collect::<Vec<_>>(),
                })
            })
            .collect();
        let edges: Vec<Value> = self
            .edges
            .iter()
            .map(|e| {
                let cov: Vec<f64> = (0..36).map(|k| e.covariance[(k / 6, k % 6)]).collect();
                json!({ "i": e.i, "j": e.j, "kind": e.kind.name(), "measurement": tum(&e.measurement), "covariance": cov })
            })
            .collect();
        json!({ "nodes": nodes, "edges": edges })
    }

    pub fn write_json<W: Write>(&self, mut w: W) -> io::Result<()> {
        serde_json::to_writer_pretty(&mut w, &self.to_json()).map_err(io::Error::other)?;
        writeln!(w)
    }

    /// Global map: every node's surfels in the world frame.
    pub fn write_map_ply<W: Write>(&self, w: W) -> io::Result<()> {
        let all: Vec<(Vec3, Vec3, f64, f64)> = self
            .nodes
            .values()
            .flat_map(|n| n.surfels.iter().map(move |s| (n.pose.transform_point(&s.position), n.pose.rotation * s.normal, s.resolution, s.planarity)))
            .collect();
        crate::surfel::write_surfels_ply(w, all.into_iter())
    }

    /// Applies the optimised submap corrections to an odometry trajectory, blending the
    /// corrections of consecutive submaps of `agent` linearly in time.
    pub fn correct_trajectory(&self, agent: u32, submaps: &[Submap], trajectory: &[(f64, Pose)]) -> Vec<(f64, Pose)> {
        let mut keys: Vec<(f64, Pose)> = submaps
            .iter()
            .filter(|s| s.id.agent == agent)
            .filter_map(|s| self.submap_pose(&s.id).map(|w| (s.t0, w.compose(&s.base_pose.inverse()))))
            .collect();
        keys.sort_by(|a, b| a.0.total_cmp(&b.0));
        if keys.is_empty() {
            return trajectory.to_vec();
        }
        trajectory
            .iter()
            .map(|(t, p)| {
                let k = keys.partition_point(|(kt, _)| kt <= t);
                let c = if k == 0 {
                    keys[0].1
                } else if k == keys.len() {
                    keys[k - 1].1
                } else {
                    let (ta, a) = keys[k - 1];
                    let (tb, b) = keys[k];
                    let alpha = (t - ta) / (tb - ta);
                    let phi = log_so3_unchecked(&(a.rotation.transpose() * b.rotation));
                    Pose::new(orthonormalize(&(a.rotation * exp_so3(&(phi * alpha)))), a.translation * (1.0 - alpha) + b.translation * alpha)
                };
                (*t, c.compose(p))
            })
            .collect()
    }

    /// Smallest eigenvalue of a covariance, for diagnostics.
    pub fn min_eigenvalue(cov: &Matrix6<f64>) -> f64 {
        SymmetricEigen::new(*cov).eigenvalues.min()
    }
}
