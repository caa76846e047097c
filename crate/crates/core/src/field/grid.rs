//! Multi-resolution feature grid with multilinear interpolation.

use serde::{Deserialize, Serialize};

use crate::error::{MapError, Result};

pub const MAX_DIM: usize = 3;

const HASH_PRIMES: [u64; MAX_DIM] = [1, 2_654_435_761, 805_459_861];

/// Axis-aligned box in world units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Aabb {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > MAX_DIM {
            return Err(MapError::Config(format!(
                "domain corners must share a dimension in 1..={MAX_DIM}"
            )));
        }
        if lo
            .iter()
            .zip(&hi)
            .any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite())
        {
            return Err(MapError::Config(
                "domain must have positive finite extent".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self {
            lo: vec![0.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    /// Maps a world point into `[0, 1]^D`, clamping outside coordinates.
    pub fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for a in 0..self.dim() {
            out[a] = ((x[a] - self.lo[a]) / (self.hi[a] - self.lo[a])).clamp(0.0, 1.0);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim()).all(|a| x[a] >= self.lo[a] && x[a] <= self.hi[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridLevel {
    /// Grid nodes per axis.
    pub resolution: usize,
    /// First parameter index of this level.
    pub offset: usize,
    /// Number of stored feature rows (nodes, or hash-table slots).
    pub entries: usize,
    pub hashed: bool,
}

/// Geometry of the feature grid. Feature values live in the flat parameter
/// vector; this type only knows where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub domain: Aabb,
    pub features: usize,
    pub levels: Vec<GridLevel>,
}

impl FeatureGrid {
    /// Lays out one level per entry of `resolutions`, starting at parameter
    /// index `offset`. With `hash_table_size`, levels with more nodes than
    /// the table are stored through a spatial hash.
    pub fn new(
        domain: Aabb,
        resolutions: &[usize],
        features: usize,
        hash_table_size: Option<usize>,
        offset: usize,
    ) -> Result<Self> {
        if resolutions.is_empty() {
            return Err(MapError::Config("grid needs at least one level".into()));
        }
        if features == 0 {
            return Err(MapError::Config(
                "grid needs at least one feature per level".into(),
            ));
        }
        if let Some(&r) = resolutions.iter().find(|&&r| r < 2) {
            return Err(MapError::Config(format!("grid resolution {r} is below 2")));
        }
        if resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MapError::Config(
                "grid resolutions must strictly increase".into(),
            ));
        }
        if hash_table_size == Some(0) {
            return Err(MapError::Config("hash table size must be positive".into()));
        }
        let dim = domain.dim();
        let mut levels = Vec::with_capacity(resolutions.len());
        let mut cursor = offset;
        for &resolution in resolutions {
            let nodes = resolution.checked_pow(dim as u32).ok_or_else(|| {
                MapError::Config(format!("grid resolution {resolution} overflows"))
            })?;
            let (entries, hashed) = match hash_table_size {
                Some(t) if nodes > t => (t, true),
                _ => (nodes, false),
            };
            levels.push(GridLevel {
                resolution,
                offset: cursor,
                entries,
                hashed,
            });
            cursor += entries * features;
        }
        Ok(Self {
            domain,
            features,
            levels,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn param_len(&self) -> usize {
        self.levels.iter().map(|l| l.entries * self.features).sum()
    }

    /// Length of the concatenated feature vector.
    pub fn output_len(&self) -> usize {
        self.levels.len() * self.features
    }

    pub fn corners_per_level(&self) -> usize {
        1 << self.dim()
    }

    /// Parameter index of feature 0 of the node at `coords` on `level`.
    pub fn node_offset(&self, level: usize, coords: &[usize]) -> usize {
        let lvl = &self.levels[level];
        let row = if lvl.hashed {
            let mut h = 0u64;
            for (a, &c) in coords.iter().enumerate() {
                h ^= (c as u64).wrapping_mul(HASH_PRIMES[a]);
            }
            (h % lvl.entries as u64) as usize
        } else {
            let mut idx = 0;
            let mut stride = 1;
            for &c in coords {
                idx += c * stride;
                stride *= lvl.resolution;
            }
            idx
        };
        lvl.offset + row * self.features
    }

    /// Writes `(feature offset, weight)` for every interpolation corner, level
    /// by level, for a point already normalized into `[0, 1]^D`.
    pub fn corners_into(&self, u: &[f64], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let dim = self.dim();
        let mut base = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut coords = [0usize; MAX_DIM];
        for (level, lvl) in self.levels.iter().enumerate() {
            let cells = (lvl.resolution - 1) as f64;
            for a in 0..dim {
                let g = u[a].clamp(0.0, 1.0) * cells;
                let i = (g.floor() as usize).min(lvl.resolution - 2);
                base[a] = i;
                frac[a] = g - i as f64;
            }
            for corner in 0..(1usize << dim) {
                let mut w = 1.0;
                for a in 0..dim {
                    if corner >> a & 1 == 1 {
                        coords[a] = base[a] + 1;
                        w *= frac[a];
                    } else {
                        coords[a] = base[a];
                        w *= 1.0 - frac[a];
                    }
                }
                out.push((self.node_offset(level, &coords[..dim]), w));
            }
        }
    }

    /// Concatenated per-level features at world point `x` (clamped to the domain).
    pub fn interpolate(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut u = [0.0; MAX_DIM];
        self.domain.normalize_into(x, &mut u);
        let mut corners = Vec::with_capacity(self.levels.len() << self.dim());
        self.corners_into(&u[..self.dim()], &mut corners);
        let mut out = vec![0.0; self.output_len()];
        self.gather(params, &corners, &mut out);
        out
    }

    pub(crate) fn gather(&self, params: &[f64], corners: &[(usize, f64)], out: &mut [f64]) {
        let f = self.features;
        let per_level = self.corners_per_level();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &(off, w)) in corners.iter().enumerate() {
            let level = i / per_level;
            let dst = &mut out[level * f..(level + 1) * f];
            for (d, p) in dst.iter_mut().zip(&params[off..off + f]) {
                *d += w * p;
            }
        }
    }

    pub(crate) fn scatter_grad(&self, corners: &[(usize, f64)], d_feat: &[f64], grad: &mut [f64]) {
        let f = self.features;
        let per_level = self.corners_per_level();
        for (i, &(off, w)) in corners.iter().enumerate() {
            let level = i / per_level;
            let src = &d_feat[level * f..(level + 1) * f];
            for (g, d) in grad[off..off + f].iter_mut().zip(src) {
                *g += w * d;
            }
        }
    }

    /// A uniformly random pair of axis-adjacent nodes on `level`, as feature offsets.
    pub fn random_adjacent_pair<R: rand::Rng + ?Sized>(
        &self,
        level: usize,
        rng: &mut R,
    ) -> (usize, usize) {
        let dim = self.dim();
        let res = self.levels[level].resolution;
        let axis = rng.random_range(0..dim);
        let mut a = [0usize; MAX_DIM];
        for (k, c) in a.iter_mut().enumerate().take(dim) {
            *c = if k == axis {
                rng.random_range(0..res - 1)
            } else {
                rng.random_range(0..res)
            };
        }
        let mut b = a;
        b[axis] += 1;
        (
            self.node_offset(level, &a[..dim]),
            self.node_offset(level, &b[..dim]),
        )
    }
}
