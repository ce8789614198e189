//! Single-plane RANSAC estimators (sequential baseline, graph-cut, and
//! proximity-guided graph-cut) and sequential multi-plane extraction.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{
    angle_between_deg, mean_direction, normal_angle_error, plane_from_inliers, plane_from_minimal,
    point_plane_distance, OrientedPointCloud, PlaneModel,
};
use crate::graph::{min_cut, BinaryEnergy, BinaryLabeling, NeighborhoodGraph};

/// Maximum cut/refit rounds per local optimization.
pub const LOCAL_OPT_ROUNDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum RansacError {
    #[error("invalid ransac parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorVariant {
    #[serde(alias = "seq")]
    SequentialRansac,
    #[serde(alias = "gc")]
    GraphCutRansac,
    #[serde(alias = "prox")]
    ProximityGraphCutRansac,
}

impl EstimatorVariant {
    pub const ALL: [EstimatorVariant; 3] = [
        EstimatorVariant::SequentialRansac,
        EstimatorVariant::GraphCutRansac,
        EstimatorVariant::ProximityGraphCutRansac,
    ];

    pub fn short_name(self) -> &'static str {
        match self {
            EstimatorVariant::SequentialRansac => "seq",
            EstimatorVariant::GraphCutRansac => "gc",
            EstimatorVariant::ProximityGraphCutRansac => "prox",
        }
    }

    pub fn uses_graph_cut(self) -> bool {
        self != EstimatorVariant::SequentialRansac
    }
}

impl std::str::FromStr for EstimatorVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seq" | "sequential_ransac" => Ok(EstimatorVariant::SequentialRansac),
            "gc" | "graph_cut_ransac" => Ok(EstimatorVariant::GraphCutRansac),
            "prox" | "proximity_graph_cut_ransac" => Ok(EstimatorVariant::ProximityGraphCutRansac),
            other => Err(format!(
                "unknown variant '{other}' (expected seq, gc or prox)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    /// Inlier distance threshold in normalized units.
    pub epsilon: f64,
    /// Normal angle threshold in degrees.
    pub epsilon_n: f64,
    pub lambda: f64,
    pub confidence: f64,
    pub max_iterations: usize,
    /// `None` selects 0.5% of the valid points with a floor of 100.
    pub min_inliers: Option<usize>,
    pub max_planes: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            epsilon: 0.02,
            epsilon_n: 10.0,
            lambda: 0.95,
            confidence: 0.99,
            max_iterations: 5000,
            min_inliers: None,
            max_planes: 20,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), RansacError> {
        let bad = |m: &str| Err(RansacError::InvalidParams(m.to_string()));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive");
        }
        if !(self.epsilon_n > 0.0 && self.epsilon_n < 180.0) {
            return bad("epsilon_n must lie in (0, 180)");
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1)");
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)");
        }
        if self.min_inliers.is_some_and(|m| m < 3) {
            return bad("min_inliers must be at least 3");
        }
        Ok(())
    }

    /// Minimum inlier count for a cloud of `valid_points` points.
    pub fn resolved_min_inliers(&self, valid_points: usize) -> usize {
        self.min_inliers
            .unwrap_or_else(|| ((valid_points as f64 * 0.005).ceil() as usize).max(100))
    }
}

/// One accepted plane of the sequential process.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneInstance {
    pub plane: PlaneModel,
    /// Sorted, unique point indices.
    pub inlier_indices: Vec<usize>,
    pub score: f64,
}

/// Truncated quadratic MSAC cost of giving `label` to a point at `distance`.
#[inline]
pub fn msac_cost(distance: f64, label: bool, epsilon: f64) -> f64 {
    let r = distance * distance / (epsilon * epsilon);
    match (label, distance < epsilon) {
        (true, true) | (false, false) => 0.0,
        (true, false) => r,
        (false, true) => 1.0 - r,
    }
}

/// Exponential penalty for labeling a point with a deviating normal as
/// inlier.
#[inline]
pub fn normal_data_cost(angle_error: f64, label: bool, epsilon_n: f64) -> f64 {
    if label && angle_error >= epsilon_n {
        (angle_error / epsilon_n - 1.0).exp()
    } else {
        0.0
    }
}

/// Builds the binary energy over every node of `graph`.
pub fn assemble_energy(
    cloud: &OrientedPointCloud,
    graph: &NeighborhoodGraph,
    plane: &PlaneModel,
    params: &RansacParams,
    variant: EstimatorVariant,
) -> BinaryEnergy {
    let nodes: Vec<usize> = (0..graph.node_count).collect();
    assemble_on(cloud, &nodes, graph, plane, params, variant)
}

/// Energy on a subgraph whose node `k` is point `nodes[k]`.
fn assemble_on(
    cloud: &OrientedPointCloud,
    nodes: &[usize],
    graph: &NeighborhoodGraph,
    plane: &PlaneModel,
    params: &RansacParams,
    variant: EstimatorVariant,
) -> BinaryEnergy {
    let lambda = params.lambda;
    let data_w = 1.0 - lambda;
    let proximity = variant == EstimatorVariant::ProximityGraphCutRansac;
    let f0: Vec<f64> = nodes
        .iter()
        .map(|&i| {
            msac_cost(
                point_plane_distance(&cloud.points[i], plane),
                false,
                params.epsilon,
            )
        })
        .collect();
    let unary = nodes
        .iter()
        .zip(&f0)
        .map(|(&i, &c0)| {
            let d = point_plane_distance(&cloud.points[i], plane);
            let mut c1 = msac_cost(d, true, params.epsilon);
            if proximity {
                let rho = normal_angle_error(&cloud.normals[i], plane);
                c1 += normal_data_cost(rho, true, params.epsilon_n);
            }
            [data_w * c0, data_w * c1]
        })
        .collect();
    let pairwise = graph
        .edges
        .iter()
        .zip(&graph.proximity)
        .map(|(&(i, j), &k)| {
            let e00 = lambda * 0.5 * (f0[i as usize] + f0[j as usize]);
            let split = if proximity {
                lambda * (0.5 + k)
            } else {
                lambda
            };
            [e00, split, split, 0.0]
        })
        .collect();
    BinaryEnergy {
        unary,
        edges: graph.edges.clone(),
        pairwise,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleRejection {
    /// Two of the sampled monocular normals differ by more than `epsilon_n`.
    NormalDisagreement,
    Collinear,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("need at least 3 remaining points, have {0}")]
pub struct TooFewPoints(pub usize);

/// Draws 3 distinct indices uniformly from `remaining`.
///
/// The normal-agreement check only applies to the proximity variant; the
/// other estimators sample without it.
pub fn sample_minimal<R: Rng + ?Sized>(
    cloud: &OrientedPointCloud,
    remaining: &[usize],
    params: &RansacParams,
    variant: EstimatorVariant,
    rng: &mut R,
) -> Result<Result<[usize; 3], SampleRejection>, TooFewPoints> {
    if remaining.len() < 3 {
        return Err(TooFewPoints(remaining.len()));
    }
    let picked = rand::seq::index::sample(rng, remaining.len(), 3);
    let s = [
        remaining[picked.index(0)],
        remaining[picked.index(1)],
        remaining[picked.index(2)],
    ];
    if variant == EstimatorVariant::ProximityGraphCutRansac {
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let ang = angle_between_deg(&cloud.normals[s[a]], &cloud.normals[s[b]]);
            if ang > params.epsilon_n {
                return Ok(Err(SampleRejection::NormalDisagreement));
            }
        }
    }
    let pts = [cloud.points[s[0]], cloud.points[s[1]], cloud.points[s[2]]];
    if plane_from_minimal(pts).is_err() {
        return Ok(Err(SampleRejection::Collinear));
    }
    Ok(Ok(s))
}

/// Result of graph-cut local optimization around one hypothesis.
#[derive(Debug, Clone)]
pub struct LocalOptimum {
    pub plane: PlaneModel,
    /// Labeling over the nodes of the subgraph (aligned with `nodes`).
    pub labeling: BinaryLabeling,
    /// Energy of each accepted cut, first entry for the seed hypothesis.
    pub energies: Vec<f64>,
}

/// Cuts with `plane`, then alternates refit and cut while the energy
/// strictly decreases, up to [`LOCAL_OPT_ROUNDS`] refits.
pub fn local_optimize(
    cloud: &OrientedPointCloud,
    nodes: &[usize],
    subgraph: &NeighborhoodGraph,
    plane: &PlaneModel,
    params: &RansacParams,
    variant: EstimatorVariant,
) -> LocalOptimum {
    let cut = |p: &PlaneModel| {
        let energy = assemble_on(cloud, nodes, subgraph, p, params, variant);
        min_cut(&energy).expect("assembled energies are submodular by construction")
    };
    let (mut labeling, e0) = cut(plane);
    let mut best = LocalOptimum {
        plane: *plane,
        labeling: Vec::new(),
        energies: vec![e0],
    };
    for _ in 0..LOCAL_OPT_ROUNDS {
        let inliers: Vec<usize> = nodes
            .iter()
            .zip(&labeling)
            .filter_map(|(&i, &l)| l.then_some(i))
            .collect();
        let Some(refit) = refit_plane(cloud, &inliers) else {
            break;
        };
        let (next, e) = cut(&refit);
        if e >= *best.energies.last().unwrap() {
            break;
        }
        best.plane = refit;
        best.energies.push(e);
        let stable = next == labeling;
        labeling = next;
        if stable {
            break;
        }
    }
    best.labeling = labeling;
    best
}

/// Total-least-squares plane over `indices`, with the model normal set to
/// their mean monocular normal.
pub fn refit_plane(cloud: &OrientedPointCloud, indices: &[usize]) -> Option<PlaneModel> {
    if indices.len() < 3 {
        return None;
    }
    let plane = plane_from_inliers(indices.iter().map(|&i| &cloud.points[i])).ok()?;
    let model = mean_direction(indices.iter().map(|&i| &cloud.normals[i]));
    Some(match model {
        Some(m) => plane.with_model_normal(m),
        None => plane,
    })
}

struct Scored {
    score: f64,
    inliers: usize,
}

fn score_plane(
    cloud: &OrientedPointCloud,
    remaining: &[usize],
    plane: &PlaneModel,
    params: &RansacParams,
    variant: EstimatorVariant,
) -> Scored {
    let eps2 = params.epsilon * params.epsilon;
    let n = plane.normal;
    let d = plane.offset;
    let mut gain = 0.0;
    let mut count = 0usize;
    for &i in remaining {
        let r = n.dot(&cloud.points[i]) - d;
        let r2 = r * r;
        if r2 < eps2 {
            gain += 1.0 - r2 / eps2;
            count += 1;
        }
    }
    let score = if variant.uses_graph_cut() {
        gain
    } else {
        count as f64
    };
    Scored {
        score,
        inliers: count,
    }
}

/// Iterations needed to draw an all-inlier minimal sample with the given
/// confidence at inlier ratio `w`.
fn adaptive_bound(w: f64, confidence: f64, max_iterations: usize) -> usize {
    let p = w.powi(3);
    if p <= 0.0 {
        return max_iterations;
    }
    if p >= 1.0 {
        return 1;
    }
    let k = (1.0 - confidence).ln() / (1.0 - p).ln();
    if !k.is_finite() || k >= max_iterations as f64 {
        max_iterations
    } else {
        k.ceil().max(1.0) as usize
    }
}

/// Hypothesize-and-verify loop for the best single plane on `remaining`
/// (sorted point indices).
pub fn fit_one_plane<R: Rng + ?Sized>(
    cloud: &OrientedPointCloud,
    graph: &NeighborhoodGraph,
    remaining: &[usize],
    params: &RansacParams,
    variant: EstimatorVariant,
    rng: &mut R,
) -> Option<PlaneInstance> {
    let min_inliers = params.resolved_min_inliers(cloud.len());
    if remaining.len() < min_inliers.max(3) {
        return None;
    }
    let subgraph = if variant.uses_graph_cut() {
        Some(if remaining.len() == graph.node_count {
            graph.clone()
        } else {
            graph.induced(remaining)
        })
    } else {
        None
    };

    let mut best: Option<(PlaneModel, Scored, Option<BinaryLabeling>)> = None;
    let mut bound = params.max_iterations;
    let mut iter = 0;
    while iter < bound.min(params.max_iterations) {
        iter += 1;
        let sample = match sample_minimal(cloud, remaining, params, variant, rng) {
            Ok(Ok(s)) => s,
            Ok(Err(_)) => continue,
            Err(_) => return None,
        };
        let pts = [
            cloud.points[sample[0]],
            cloud.points[sample[1]],
            cloud.points[sample[2]],
        ];
        let Ok(plane) = plane_from_minimal(pts) else {
            continue;
        };
        let plane = match mean_direction(sample.iter().map(|&i| &cloud.normals[i])) {
            Some(m) => plane.with_model_normal(m),
            None => plane,
        };
        let scored = score_plane(cloud, remaining, &plane, params, variant);
        if best.as_ref().is_some_and(|b| scored.score <= b.1.score) {
            continue;
        }
        let mut candidate = (plane, scored, None);
        if let Some(sub) = &subgraph {
            let lo = local_optimize(cloud, remaining, sub, &plane, params, variant);
            let lo_scored = score_plane(cloud, remaining, &lo.plane, params, variant);
            if lo.plane != plane && lo_scored.score > candidate.1.score {
                candidate = (lo.plane, lo_scored, Some(lo.labeling));
            } else if lo.energies.len() == 1 {
                candidate.2 = Some(lo.labeling);
            }
        }
        let w = candidate.1.inliers as f64 / remaining.len() as f64;
        bound = adaptive_bound(w, params.confidence, params.max_iterations);
        best = Some(candidate);
    }

    let (plane, scored, labeling) = best?;
    let inlier_indices: Vec<usize> = if let Some(sub) = &subgraph {
        let labeling = match labeling {
            Some(l) => l,
            None => {
                let energy = assemble_on(cloud, remaining, sub, &plane, params, variant);
                min_cut(&energy).expect("submodular by construction").0
            }
        };
        remaining
            .iter()
            .zip(&labeling)
            .filter_map(|(&i, &l)| l.then_some(i))
            .collect()
    } else {
        remaining
            .iter()
            .copied()
            .filter(|&i| point_plane_distance(&cloud.points[i], &plane) < params.epsilon)
            .collect()
    };
    (inlier_indices.len() >= min_inliers).then_some(PlaneInstance {
        plane,
        inlier_indices,
        score: scored.score,
    })
}

/// Repeatedly fits one plane on the points not yet claimed by earlier
/// instances.
pub fn sequential_extract<R: Rng + ?Sized>(
    cloud: &OrientedPointCloud,
    graph: &NeighborhoodGraph,
    params: &RansacParams,
    variant: EstimatorVariant,
    rng: &mut R,
) -> Vec<PlaneInstance> {
    let min_inliers = params.resolved_min_inliers(cloud.len());
    let mut remaining: Vec<usize> = (0..cloud.len()).collect();
    let mut claimed = vec![false; cloud.len()];
    let mut out = Vec::new();
    while out.len() < params.max_planes && remaining.len() >= min_inliers.max(3) {
        let Some(inst) = fit_one_plane(cloud, graph, &remaining, params, variant, rng) else {
            break;
        };
        for &i in &inst.inlier_indices {
            claimed[i] = true;
        }
        remaining.retain(|&i| !claimed[i]);
        out.push(inst);
    }
    out
}
