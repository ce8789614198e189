//! Permutohedral lattice for fast high-dimensional Gaussian filtering.
//!
//! Approximates `out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j` for features `f`
//! that are already divided by their standard deviations. The result is
//! most accurate after normalization by the filtered constant signal.

use std::collections::HashMap;

/// Largest supported feature dimension.
pub const MAX_DIM: usize = 8;

type Key = [i16; MAX_DIM];

/// Splatting structure for one set of point features.
#[derive(Debug, Clone)]
pub struct Permutohedral {
    dim: usize,
    points: usize,
    /// Lattice vertex of each (point, simplex corner).
    offsets: Vec<u32>,
    barycentric: Vec<f64>,
    vertices: usize,
    /// Neighbors of each vertex along each of the `dim + 1` lattice axes.
    neighbors: Vec<[u32; 2]>,
}

const MISSING: u32 = u32::MAX;

/// The two lattice neighbors of `key` along `axis` (0..=d).
fn lattice_neighbors(key: &Key, d: usize, axis: usize) -> [Key; 2] {
    let mut n1: Key = [0; MAX_DIM];
    let mut n2: Key = [0; MAX_DIM];
    for c in 0..d {
        n1[c] = key[c] - 1;
        n2[c] = key[c] + 1;
    }
    if axis < d {
        n1[axis] = key[axis] + d as i16;
        n2[axis] = key[axis] - d as i16;
    }
    [n1, n2]
}

impl Permutohedral {
    /// Builds the lattice for `features` stored row-major (`points x dim`).
    ///
    /// # Panics
    /// If `dim` is 0 or above [`MAX_DIM`], or the slice length is not a
    /// multiple of `dim`.
    pub fn new(features: &[f64], dim: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&dim), "unsupported dimension {dim}");
        assert_eq!(features.len() % dim, 0);
        let d = dim;
        let n = features.len() / d;
        let inv_std = (2.0f64 / 3.0).sqrt() * (d + 1) as f64;
        let scale: Vec<f64> = (0..d)
            .map(|i| inv_std / (((i + 1) * (i + 2)) as f64).sqrt())
            .collect();
        // canonical[r][i]: coordinate i of the remainder-r simplex vertex.
        let mut canonical = vec![0i32; (d + 1) * (d + 1)];
        for r in 0..=d {
            for j in 0..=d - r {
                canonical[r * (d + 1) + j] = r as i32;
            }
            for j in d - r + 1..=d {
                canonical[r * (d + 1) + j] = r as i32 - (d as i32 + 1);
            }
        }

        let mut table: HashMap<Key, u32> = HashMap::with_capacity(n * (d + 1) / 2);
        let mut keys: Vec<Key> = Vec::new();
        let mut offsets = vec![0u32; n * (d + 1)];
        let mut barycentric_out = vec![0.0f64; n * (d + 1)];
        let mut elevated = vec![0.0f64; d + 1];
        let mut rem0 = vec![0i32; d + 1];
        let mut rank = vec![0i32; d + 1];
        let mut bary = vec![0.0f64; d + 2];
        let down = 1.0 / (d + 1) as f64;
        let up = (d + 1) as i32;

        for k in 0..n {
            let f = &features[k * d..(k + 1) * d];
            let mut sm = 0.0;
            for j in (1..=d).rev() {
                let cf = f[j - 1] * scale[j - 1];
                elevated[j] = sm - j as f64 * cf;
                sm += cf;
            }
            elevated[0] = sm;

            let mut sum = 0i32;
            for i in 0..=d {
                let rd = (down * elevated[i]).round() as i32;
                rem0[i] = rd * up;
                sum += rd;
            }
            rank.iter_mut().for_each(|r| *r = 0);
            for i in 0..d {
                let di = elevated[i] - rem0[i] as f64;
                for j in i + 1..=d {
                    if di < elevated[j] - rem0[j] as f64 {
                        rank[i] += 1;
                    } else {
                        rank[j] += 1;
                    }
                }
            }
            for i in 0..=d {
                rank[i] += sum;
                if rank[i] < 0 {
                    rank[i] += up;
                    rem0[i] += up;
                } else if rank[i] > d as i32 {
                    rank[i] -= up;
                    rem0[i] -= up;
                }
            }
            bary.iter_mut().for_each(|b| *b = 0.0);
            for i in 0..=d {
                let v = (elevated[i] - rem0[i] as f64) * down;
                let r = rank[i] as usize;
                bary[d - r] += v;
                bary[d - r + 1] -= v;
            }
            bary[0] += 1.0 + bary[d + 1];

            for r in 0..=d {
                let mut key: Key = [0; MAX_DIM];
                for i in 0..d {
                    key[i] = (rem0[i] + canonical[r * (d + 1) + rank[i] as usize]) as i16;
                }
                let next = keys.len() as u32;
                let id = *table.entry(key).or_insert_with(|| {
                    keys.push(key);
                    next
                });
                offsets[k * (d + 1) + r] = id;
                barycentric_out[k * (d + 1) + r] = bary[r];
            }
        }

        let m = keys.len();
        let mut neighbors = vec![[MISSING; 2]; (d + 1) * m];
        for axis in 0..=d {
            for (i, key) in keys.iter().enumerate() {
                let [n1, n2] = lattice_neighbors(key, d, axis);
                neighbors[axis * m + i] = [
                    table.get(&n1).copied().unwrap_or(MISSING),
                    table.get(&n2).copied().unwrap_or(MISSING),
                ];
            }
        }

        Self {
            dim: d,
            points: n,
            offsets,
            barycentric: barycentric_out,
            vertices: m,
            neighbors,
        }
    }

    pub fn point_count(&self) -> usize {
        self.points
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices
    }

    /// Filters `input` (`points x channels`, row-major).
    pub fn filter(&self, input: &[f64], channels: usize) -> Vec<f64> {
        assert_eq!(input.len(), self.points * channels);
        let d = self.dim;
        let m = self.vertices;
        let mut values = vec![0.0f64; m * channels];
        for k in 0..self.points {
            let src = &input[k * channels..(k + 1) * channels];
            for r in 0..=d {
                let o = self.offsets[k * (d + 1) + r] as usize;
                let w = self.barycentric[k * (d + 1) + r];
                let dst = &mut values[o * channels..(o + 1) * channels];
                for (v, s) in dst.iter_mut().zip(src) {
                    *v += w * s;
                }
            }
        }

        let mut scratch = vec![0.0f64; m * channels];
        for axis in 0..=d {
            for i in 0..m {
                let [n1, n2] = self.neighbors[axis * m + i];
                let out = &mut scratch[i * channels..(i + 1) * channels];
                out.copy_from_slice(&values[i * channels..(i + 1) * channels]);
                for nb in [n1, n2] {
                    if nb != MISSING {
                        let nb = nb as usize;
                        for (o, v) in out
                            .iter_mut()
                            .zip(&values[nb * channels..(nb + 1) * channels])
                        {
                            *o += 0.5 * v;
                        }
                    }
                }
            }
            std::mem::swap(&mut values, &mut scratch);
        }

        let alpha = 1.0 / (1.0 + 2f64.powi(-(d as i32)));
        let mut out = vec![0.0f64; self.points * channels];
        for k in 0..self.points {
            let dst = &mut out[k * channels..(k + 1) * channels];
            for r in 0..=d {
                let o = self.offsets[k * (d + 1) + r] as usize;
                let w = self.barycentric[k * (d + 1) + r] * alpha;
                for (t, v) in dst
                    .iter_mut()
                    .zip(&values[o * channels..(o + 1) * channels])
                {
                    *t += w * v;
                }
            }
        }
        out
    }
}
