//! Lattice neighborhood graph over a per-pixel cloud, and exact minimization
//! of submodular binary energies by min-cut.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::OrientedPointCloud;
use crate::maxflow::{MaxFlow, Segment};

/// Slack allowed on the submodularity inequality to absorb rounding.
const SUBMODULAR_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge {edge} ({i}, {j}) is not submodular: e00 + e11 = {lhs} > e01 + e10 = {rhs}")]
    NotSubmodular {
        edge: usize,
        i: usize,
        j: usize,
        lhs: f64,
        rhs: f64,
    },
    #[error("energy term {0} is negative or not finite")]
    InvalidCost(String),
    #[error("labeling has {got} entries, energy has {expected} nodes")]
    SizeMismatch { expected: usize, got: usize },
    #[error("edge ({0}, {1}) references a node outside the energy")]
    BadEdge(usize, usize),
}

/// Gaussian proximity kernel parameters for graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProximityParams {
    pub alpha_p2: f64,
    pub alpha_c2: f64,
    pub alpha_n2: f64,
    pub w_p: f64,
    pub w_c: f64,
    pub w_n: f64,
}

impl Default for ProximityParams {
    fn default() -> Self {
        Self {
            alpha_p2: 0.005,
            alpha_c2: 0.1,
            alpha_n2: 5.0,
            w_p: 1.0,
            w_c: 1.0,
            w_n: 1.0,
        }
    }
}

impl ProximityParams {
    /// `k_p + k_c + k_n` for two points with positions `p`, colors `c` and
    /// unit normals `n`.
    pub fn proximity(
        &self,
        p: (&crate::Vec3, &crate::Vec3),
        c: (&crate::Vec3, &crate::Vec3),
        n: (&crate::Vec3, &crate::Vec3),
    ) -> f64 {
        let pos = (p.0 - p.1).norm_squared() / (2.0 * self.alpha_p2);
        let col = (c.0 - c.1).norm_squared() / (2.0 * self.alpha_c2);
        let ang = n.0.dot(n.1).clamp(-1.0, 1.0).acos() / (2.0 * self.alpha_n2);
        self.w_p * (-pos).exp() + self.w_c * (-pos - col).exp() + self.w_n * (-pos - ang).exp()
    }
}

/// Undirected edge set with cached per-edge proximity.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodGraph {
    pub node_count: usize,
    /// Pairs `(i, j)` with `i < j`.
    pub edges: Vec<(u32, u32)>,
    pub proximity: Vec<f64>,
}

impl NeighborhoodGraph {
    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Subgraph induced by `nodes` (sorted, unique); node `k` of the result
    /// is `nodes[k]`.
    pub fn induced(&self, nodes: &[usize]) -> NeighborhoodGraph {
        let mut local = vec![u32::MAX; self.node_count];
        for (k, &n) in nodes.iter().enumerate() {
            local[n] = k as u32;
        }
        let mut edges = Vec::new();
        let mut proximity = Vec::new();
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            let (li, lj) = (local[i as usize], local[j as usize]);
            if li != u32::MAX && lj != u32::MAX {
                edges.push((li.min(lj), li.max(lj)));
                proximity.push(self.proximity[e]);
            }
        }
        NeighborhoodGraph {
            node_count: nodes.len(),
            edges,
            proximity,
        }
    }
}

/// Connects points whose source pixels are 8-connected neighbors on the
/// sampling lattice.
pub fn build_grid_graph(cloud: &OrientedPointCloud, params: &ProximityParams) -> NeighborhoodGraph {
    let stride = cloud.stride.max(1);
    let lw = cloud.width.div_ceil(stride);
    let lh = cloud.height.div_ceil(stride);
    let mut node_at = vec![u32::MAX; lw * lh];
    for (i, &(r, c)) in cloud.pixels.iter().enumerate() {
        let (lr, lc) = (r as usize / stride, c as usize / stride);
        node_at[lr * lw + lc] = i as u32;
    }
    let mut edges = Vec::with_capacity(cloud.len() * 4);
    let mut proximity = Vec::with_capacity(cloud.len() * 4);
    for lr in 0..lh {
        for lc in 0..lw {
            let i = node_at[lr * lw + lc];
            if i == u32::MAX {
                continue;
            }
            // Forward half of the 8-neighborhood so each edge appears once.
            for (dr, dc) in [(0isize, 1isize), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (lr as isize + dr, lc as isize + dc);
                if nr < 0 || nc < 0 || nr >= lh as isize || nc >= lw as isize {
                    continue;
                }
                let j = node_at[nr as usize * lw + nc as usize];
                if j == u32::MAX {
                    continue;
                }
                let (a, b) = (i.min(j), i.max(j));
                let (au, bu) = (a as usize, b as usize);
                edges.push((a, b));
                proximity.push(params.proximity(
                    (&cloud.points[au], &cloud.points[bu]),
                    (&cloud.colors[au], &cloud.colors[bu]),
                    (&cloud.normals[au], &cloud.normals[bu]),
                ));
            }
        }
    }
    NeighborhoodGraph {
        node_count: cloud.len(),
        edges,
        proximity,
    }
}

/// Per-edge 2x2 table indexed as `[e00, e01, e10, e11]` where `e01` is the
/// cost of labels (i = 0, j = 1).
pub type PairTable = [f64; 4];

/// Binary energy `sum_i unary[i][x_i] + sum_(i,j) pairwise[e][x_i, x_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEnergy {
    /// `(cost_if_0, cost_if_1)` per node.
    pub unary: Vec<[f64; 2]>,
    pub edges: Vec<(u32, u32)>,
    pub pairwise: Vec<PairTable>,
}

impl BinaryEnergy {
    pub fn node_count(&self) -> usize {
        self.unary.len()
    }

    fn validate(&self) -> Result<(), GraphError> {
        let n = self.unary.len();
        for (i, u) in self.unary.iter().enumerate() {
            if !u.iter().all(|c| c.is_finite() && *c >= 0.0) {
                return Err(GraphError::InvalidCost(format!("unary[{i}] = {u:?}")));
            }
        }
        for (e, (&(i, j), t)) in self.edges.iter().zip(&self.pairwise).enumerate() {
            let (i, j) = (i as usize, j as usize);
            if i >= n || j >= n || i == j {
                return Err(GraphError::BadEdge(i, j));
            }
            if !t.iter().all(|c| c.is_finite() && *c >= 0.0) {
                return Err(GraphError::InvalidCost(format!("pairwise[{e}] = {t:?}")));
            }
            let lhs = t[0] + t[3];
            let rhs = t[1] + t[2];
            if lhs > rhs + SUBMODULAR_SLACK * (1.0 + lhs.abs()) {
                return Err(GraphError::NotSubmodular {
                    edge: e,
                    i,
                    j,
                    lhs,
                    rhs,
                });
            }
        }
        Ok(())
    }
}

/// Per-node binary labels; `true` = inlier (label 1).
pub type BinaryLabeling = Vec<bool>;

/// Exact sum of the selected unary and pairwise entries.
pub fn evaluate_energy(energy: &BinaryEnergy, labeling: &[bool]) -> Result<f64, GraphError> {
    if labeling.len() != energy.node_count() {
        return Err(GraphError::SizeMismatch {
            expected: energy.node_count(),
            got: labeling.len(),
        });
    }
    let mut total = 0.0;
    for (u, &l) in energy.unary.iter().zip(labeling) {
        total += u[l as usize];
    }
    for (&(i, j), t) in energy.edges.iter().zip(&energy.pairwise) {
        let (li, lj) = (labeling[i as usize] as usize, labeling[j as usize] as usize);
        total += t[li * 2 + lj];
    }
    Ok(total)
}

/// Globally minimizes a submodular binary energy. Returns the labeling and
/// its energy re-evaluated with [`evaluate_energy`].
pub fn min_cut(energy: &BinaryEnergy) -> Result<(BinaryLabeling, f64), GraphError> {
    energy.validate()?;
    let n = energy.node_count();
    // Terminal convention: source side = label 0, sink side = label 1.
    // s->i is cut when i takes label 1, i->t when it takes label 0.
    let mut t1 = vec![0.0f64; n];
    let mut t0 = vec![0.0f64; n];
    for (i, u) in energy.unary.iter().enumerate() {
        t0[i] += u[0];
        t1[i] += u[1];
    }
    let mut g = MaxFlow::new(n, energy.edges.len());
    for (&(i, j), t) in energy.edges.iter().zip(&energy.pairwise) {
        let (i, j) = (i as usize, j as usize);
        let [a, b, c, d] = *t;
        // E = A + (C - A) x_i + (D - C) x_j + (B + C - A - D) (1 - x_i) x_j
        add_linear(&mut t0, &mut t1, i, c - a);
        add_linear(&mut t0, &mut t1, j, d - c);
        let coupling = (b + c - a - d).max(0.0);
        if coupling > 0.0 {
            g.add_edge(i, j, coupling, 0.0);
        }
    }
    for i in 0..n {
        g.add_tweights(i, t1[i], t0[i]);
    }
    g.solve();
    let labeling: BinaryLabeling = (0..n).map(|i| g.segment(i) == Segment::Sink).collect();
    let total = evaluate_energy(energy, &labeling)?;
    Ok((labeling, total))
}

#[inline]
fn add_linear(t0: &mut [f64], t1: &mut [f64], i: usize, coeff: f64) {
    if coeff >= 0.0 {
        t1[i] += coeff;
    } else {
        t0[i] -= coeff;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{NormTransform, Vec3};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn brute_force_min(energy: &BinaryEnergy) -> f64 {
        let n = energy.node_count();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1u32 << n) {
            let lab: Vec<bool> = (0..n).map(|k| mask >> k & 1 == 1).collect();
            best = best.min(evaluate_energy(energy, &lab).unwrap());
        }
        best
    }

    fn random_energy(rng: &mut ChaCha8Rng, n: usize, dyadic: bool) -> BinaryEnergy {
        let draw = |rng: &mut ChaCha8Rng| {
            let v: f64 = rng.random_range(0.0..4.0);
            if dyadic {
                (v * 64.0).round() / 64.0
            } else {
                v
            }
        };
        let unary = (0..n).map(|_| [draw(rng), draw(rng)]).collect();
        let mut edges = Vec::new();
        let mut pairwise = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    let a = draw(rng);
                    let d = draw(rng);
                    let b = draw(rng);
                    // Enforce b + c >= a + d.
                    let c = (a + d - b).max(0.0) + draw(rng);
                    edges.push((i as u32, j as u32));
                    pairwise.push([a, b, c, d]);
                }
            }
        }
        BinaryEnergy {
            unary,
            edges,
            pairwise,
        }
    }

    fn two_point_cloud(p: [Vec3; 2], c: [Vec3; 2], n: [Vec3; 2]) -> OrientedPointCloud {
        OrientedPointCloud {
            points: p.to_vec(),
            colors: c.to_vec(),
            normals: n.to_vec(),
            pixels: vec![(0, 0), (0, 1)],
            norm_transform: NormTransform::identity(),
            width: 2,
            height: 1,
            stride: 1,
        }
    }

    #[test]
    fn coincident_identical_neighbors_have_proximity_three() {
        let p = Vec3::new(0.1, 0.2, 0.3);
        let c = Vec3::new(0.4, 0.5, 0.6);
        let g = build_grid_graph(
            &two_point_cloud([p, p], [c, c], [Vec3::z(), Vec3::z()]),
            &ProximityParams::default(),
        );
        assert_eq!(g.edges, vec![(0, 1)]);
        assert!((g.proximity[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn position_kernel_at_two_alpha_squared() {
        let params = ProximityParams::default();
        let d = (2.0 * params.alpha_p2).sqrt();
        let a = Vec3::zeros();
        let b = Vec3::new(d, 0.0, 0.0);
        let c = Vec3::new(0.5, 0.5, 0.5);
        let g = build_grid_graph(
            &two_point_cloud([a, b], [c, c], [Vec3::z(), Vec3::z()]),
            &params,
        );
        // k_p = k_c = k_n = e^-1 when color and normal agree.
        let e1 = (-1.0f64).exp();
        assert!((e1 - 0.36788).abs() < 1e-5);
        assert!((g.proximity[0] - 3.0 * e1).abs() < 1e-12);
    }

    #[test]
    fn proximity_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = ProximityParams::default();
        for _ in 0..200 {
            let mut v = || Vec3::new(rng.random(), rng.random(), rng.random());
            let (pa, pb, ca, cb) = (v() * 0.1, v() * 0.1, v(), v());
            let (na, nb) = (v().normalize(), v().normalize());
            let g = build_grid_graph(&two_point_cloud([pa, pb], [ca, cb], [na, nb]), &params);
            let dp = (pa - pb).norm_squared();
            let dc = (ca - cb).norm_squared();
            let ang = na.dot(&nb).clamp(-1.0, 1.0).acos();
            let kp = (-dp / (2.0 * 0.005)).exp();
            let kc = (-dp / (2.0 * 0.005) - dc / (2.0 * 0.1)).exp();
            let kn = (-dp / (2.0 * 0.005) - ang / (2.0 * 5.0)).exp();
            assert!((g.proximity[0] - (kp + kc + kn)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_graph_skips_missing_pixels() {
        // 3x3 lattice with the center missing: 8 ring edges plus the 4
        // diagonals joining adjacent edge midpoints.
        let mut pixels = Vec::new();
        for r in 0..3u32 {
            for c in 0..3u32 {
                if (r, c) != (1, 1) {
                    pixels.push((r, c));
                }
            }
        }
        let n = pixels.len();
        let cloud = OrientedPointCloud {
            points: vec![Vec3::zeros(); n],
            colors: vec![Vec3::zeros(); n],
            normals: vec![Vec3::z(); n],
            pixels,
            norm_transform: NormTransform::identity(),
            width: 3,
            height: 3,
            stride: 1,
        };
        let g = build_grid_graph(&cloud, &ProximityParams::default());
        assert_eq!(g.edge_count(), 12);
        for &(i, j) in &g.edges {
            assert!(i < j);
        }
    }

    #[test]
    fn independent_nodes_follow_unaries() {
        let e = BinaryEnergy {
            unary: vec![[1.0, 0.0]; 5],
            edges: vec![(0, 1), (1, 2)],
            pairwise: vec![[0.0; 4]; 2],
        };
        let (lab, total) = min_cut(&e).unwrap();
        assert_eq!(lab, vec![true; 5]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn strong_coupling_follows_stronger_unary() {
        let e = BinaryEnergy {
            unary: vec![[0.0, 3.0], [5.0, 0.0]],
            edges: vec![(0, 1)],
            pairwise: vec![[0.0, 1e6, 1e6, 0.0]],
        };
        let (lab, total) = min_cut(&e).unwrap();
        assert_eq!(lab, vec![true, true]);
        assert_eq!(total, 3.0);
    }

    #[test]
    fn non_submodular_edge_is_reported() {
        let e = BinaryEnergy {
            unary: vec![[0.0, 0.0]; 3],
            edges: vec![(0, 1), (1, 2)],
            pairwise: vec![[0.0, 1.0, 1.0, 0.0], [2.0, 0.5, 0.5, 1.0]],
        };
        match min_cut(&e) {
            Err(GraphError::NotSubmodular { edge, i, j, .. }) => {
                assert_eq!((edge, i, j), (1, 1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn evaluate_energy_examples() {
        let zero = BinaryEnergy {
            unary: vec![[0.0; 2]; 3],
            edges: vec![(0, 2)],
            pairwise: vec![[0.0; 4]],
        };
        assert_eq!(evaluate_energy(&zero, &[true, false, true]).unwrap(), 0.0);
        let one = BinaryEnergy {
            unary: vec![[3.0, 5.0]],
            edges: vec![],
            pairwise: vec![],
        };
        assert_eq!(evaluate_energy(&one, &[true]).unwrap(), 5.0);
        assert!(matches!(
            evaluate_energy(&one, &[true, false]),
            Err(GraphError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn min_cut_matches_enumeration_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let n = 1 + trial % 12;
            let e = random_energy(&mut rng, n, false);
            let (lab, total) = min_cut(&e).unwrap();
            assert_eq!(total, evaluate_energy(&e, &lab).unwrap());
            let best = brute_force_min(&e);
            assert!(
                (total - best).abs() <= 1e-9 * (1.0 + best.abs()),
                "trial {trial}: cut {total} vs brute {best}"
            );
        }
    }

    #[test]
    fn lattice_energy_cut_beats_random_labelings() {
        // 30x30 grid energy with Potts-like couplings.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (30usize, 30usize);
        let unary: Vec<[f64; 2]> = (0..w * h)
            .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)])
            .collect();
        let mut edges = Vec::new();
        let mut pairwise = Vec::new();
        for r in 0..h {
            for c in 0..w {
                let i = (r * w + c) as u32;
                if c + 1 < w {
                    edges.push((i, i + 1));
                    let k = rng.random_range(0.0..1.0);
                    pairwise.push([rng.random_range(0.0..k), k, k, 0.0]);
                }
                if r + 1 < h {
                    edges.push((i, i + w as u32));
                    let k = rng.random_range(0.0..1.0);
                    pairwise.push([0.0, k, k, 0.0]);
                }
            }
        }
        let e = BinaryEnergy {
            unary,
            edges,
            pairwise,
        };
        let (_, total) = min_cut(&e).unwrap();
        for _ in 0..1000 {
            let lab: Vec<bool> = (0..w * h).map(|_| rng.random_bool(0.5)).collect();
            assert!(total <= evaluate_energy(&e, &lab).unwrap() + 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn cut_is_optimal_small(seed in any::<u64>(), n in 1usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random_energy(&mut rng, n, true);
            let (lab, total) = min_cut(&e).unwrap();
            prop_assert_eq!(total, brute_force_min(&e));
            for _ in 0..50 {
                let other: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                prop_assert!(total <= evaluate_energy(&e, &other).unwrap());
            }
            prop_assert_eq!(lab.len(), n);
        }

        #[test]
        fn grid_graph_is_symmetric_and_deterministic(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = (5usize, 4usize);
            let mut pixels = Vec::new();
            for r in 0..h as u32 { for c in 0..w as u32 {
                if rng.random_bool(0.8) { pixels.push((r, c)); }
            }}
            let n = pixels.len();
            let mut v = || Vec3::new(rng.random(), rng.random(), rng.random());
            let points: Vec<Vec3> = (0..n).map(|_| v() * 0.2).collect();
            let colors: Vec<Vec3> = (0..n).map(|_| v()).collect();
            let normals: Vec<Vec3> = (0..n).map(|_| (v() + Vec3::z()).normalize()).collect();
            let cloud = OrientedPointCloud {
                points, colors, normals, pixels,
                norm_transform: NormTransform::identity(), width: w, height: h, stride: 1,
            };
            let params = ProximityParams::default();
            let g1 = build_grid_graph(&cloud, &params);
            let g2 = build_grid_graph(&cloud, &params);
            prop_assert_eq!(&g1, &g2);
            let mut seen = std::collections::HashSet::new();
            for (e, &(i, j)) in g1.edges.iter().enumerate() {
                prop_assert!(i < j);
                prop_assert!((j as usize) < n);
                prop_assert!(seen.insert((i, j)));
                prop_assert!(g1.proximity[e] >= 0.0);
                let (iu, ju) = (i as usize, j as usize);
                let rev = params.proximity(
                    (&cloud.points[ju], &cloud.points[iu]),
                    (&cloud.colors[ju], &cloud.colors[iu]),
                    (&cloud.normals[ju], &cloud.normals[iu]),
                );
                prop_assert!((rev - g1.proximity[e]).abs() < 1e-15);
            }
        }
    }
}
