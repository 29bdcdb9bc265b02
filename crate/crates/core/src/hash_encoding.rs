//! Multi-resolution hash-grid encoding with trainable feature tables.
//!
//! Each level stores `T` feature vectors of width `F`. Coarse levels whose
//! vertex count fits in the table are indexed densely; finer levels go through
//! the XOR spatial hash. A query position is trilinearly interpolated from the
//! eight corners of its enclosing voxel on every level and the per-level
//! features are concatenated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

/// Hash primes for the x, y and z axes.
pub const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

const INIT_RANGE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub coarsest: u32,
    pub finest: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig { levels: 16, log2_table_size: 16, features: 2, coarsest: 16, finest: 128 }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::invalid("hash grid needs at least 2 levels"));
        }
        if self.log2_table_size == 0 || self.log2_table_size > 30 {
            return Err(Error::invalid("table size must be a power of two in [2, 2^30]"));
        }
        if self.features == 0 {
            return Err(Error::invalid("features per entry must be at least 1"));
        }
        if !(1 <= self.coarsest && self.coarsest < self.finest) {
            return Err(Error::invalid(format!(
                "need 1 <= coarsest < finest, got {} and {}",
                self.coarsest, self.finest
            )));
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.log2_table_size
    }

    pub fn feature_dim(&self) -> usize {
        self.levels * self.features
    }

    /// Per-level growth factor `b`.
    pub fn growth_factor(&self) -> f64 {
        (((self.finest as f64).ln() - (self.coarsest as f64).ln()) / (self.levels - 1) as f64).exp()
    }
}

/// Grid resolution of level `l` (0-based): `⌊N_c · b^l⌋`.
pub fn level_resolution(config: &HashGridConfig, l: usize) -> Result<u32> {
    if l >= config.levels {
        return Err(Error::invalid(format!("level {l} out of range 0..{}", config.levels)));
    }
    let exponent = l as f64 * ((config.finest as f64).ln() - (config.coarsest as f64).ln()) / (config.levels - 1) as f64;
    let raw = config.coarsest as f64 * exponent.exp();
    // exp/ln round trip can land a hair under an exact integer endpoint
    Ok((raw * (1.0 + 1e-12)).floor() as u32)
}

/// `(x·π₁ ⊕ y·π₂ ⊕ z·π₃) mod T` with wrapping 64-bit products.
#[inline]
pub fn spatial_hash(vertex: [u32; 3], table_size: usize) -> usize {
    debug_assert!(table_size.is_power_of_two());
    let h = (vertex[0] as u64).wrapping_mul(HASH_PRIMES[0])
        ^ (vertex[1] as u64).wrapping_mul(HASH_PRIMES[1])
        ^ (vertex[2] as u64).wrapping_mul(HASH_PRIMES[2]);
    (h & (table_size as u64 - 1)) as usize
}

/// True when a level's `(N+1)³` vertices fit in the table one-to-one.
pub fn is_dense(resolution: u32, table_size: usize) -> bool {
    let side = resolution as u64 + 1;
    side * side * side <= table_size as u64
}

/// Dense row-major index when the level fits in the table, spatial hash otherwise.
#[inline]
pub fn vertex_index(vertex: [u32; 3], resolution: u32, table_size: usize) -> usize {
    if is_dense(resolution, table_size) {
        let side = resolution as usize + 1;
        vertex[0] as usize + side * (vertex[1] as usize + side * vertex[2] as usize)
    } else {
        spatial_hash(vertex, table_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Indexing {
    /// Dense where it fits, hashed elsewhere.
    #[default]
    Auto,
    /// Hash every level, even coarse ones.
    Hashed,
}

/// Table rows and trilinear weights of one level's eight voxel corners.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelSample<T> {
    pub indices: [u32; 8],
    pub weights: [T; 8],
}

impl<T: Real> Default for LevelSample<T> {
    fn default() -> Self {
        LevelSample { indices: [0; 8], weights: [T::zero(); 8] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFeature<T> {
    pub vector: Vec<T>,
    pub record: Vec<LevelSample<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid<T> {
    pub config: HashGridConfig,
    /// One `T×F` row-major table per level.
    pub tables: Vec<Vec<T>>,
    pub level_resolutions: Vec<u32>,
    pub growth_factor: f64,
    pub indexing: Indexing,
}

impl<T: Real> HashGrid<T> {
    /// Grid with every table entry drawn from `U(−1e-4, 1e-4)`.
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = Self::zeros(config)?;
        for table in &mut grid.tables {
            for v in table.iter_mut() {
                *v = T::of(rng.gen_range(-INIT_RANGE..INIT_RANGE));
            }
        }
        Ok(grid)
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let level_resolutions = (0..config.levels)
            .map(|l| level_resolution(&config, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(HashGrid {
            tables: vec![vec![T::zero(); config.table_size() * config.features]; config.levels],
            level_resolutions,
            growth_factor: config.growth_factor(),
            indexing: Indexing::Auto,
            config,
        })
    }

    pub fn with_indexing(mut self, indexing: Indexing) -> Self {
        self.indexing = indexing;
        self
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    #[inline]
    pub fn index_of(&self, level: usize, vertex: [u32; 3]) -> usize {
        let res = self.level_resolutions[level];
        match self.indexing {
            Indexing::Auto => vertex_index(vertex, res, self.config.table_size()),
            Indexing::Hashed => spatial_hash(vertex, self.config.table_size()),
        }
    }

    /// Writes the `L·F` feature vector of `x` into `out` and its interpolation record into `record`.
    /// `x` must already lie in `[0,1]³`.
    #[inline]
    pub fn encode_into(&self, x: [f64; 3], out: &mut [T], record: &mut [LevelSample<T>]) {
        let f = self.config.features;
        for (level, (&res, table)) in self.level_resolutions.iter().zip(&self.tables).enumerate() {
            let mut base = [0u32; 3];
            let mut frac = [0.0f64; 3];
            for d in 0..3 {
                let pos = x[d] * res as f64;
                let cell = (pos.floor() as i64).clamp(0, res as i64 - 1);
                base[d] = cell as u32;
                frac[d] = pos - cell as f64;
            }
            let rec = &mut record[level];
            let feat = &mut out[level * f..(level + 1) * f];
            feat.iter_mut().for_each(|v| *v = T::zero());
            for corner in 0..8 {
                let mut w = 1.0;
                let mut vertex = base;
                for d in 0..3 {
                    if corner >> d & 1 == 1 {
                        vertex[d] += 1;
                        w *= frac[d];
                    } else {
                        w *= 1.0 - frac[d];
                    }
                }
                let idx = self.index_of(level, vertex);
                let wt = T::of(w);
                rec.indices[corner] = idx as u32;
                rec.weights[corner] = wt;
                let row = &table[idx * f..(idx + 1) * f];
                for (o, &r) in feat.iter_mut().zip(row) {
                    *o += wt * r;
                }
            }
        }
    }

    pub fn encode(&self, x: [f64; 3]) -> Result<EncodedFeature<T>> {
        if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("encode: position {x:?} outside [0,1]^3")));
        }
        let mut vector = vec![T::zero(); self.feature_dim()];
        let mut record = vec![LevelSample::default(); self.config.levels];
        self.encode_into(x, &mut vector, &mut record);
        Ok(EncodedFeature { vector, record })
    }

    /// Scatters `feature_grad` back onto the table rows recorded by a matching encode.
    #[inline]
    pub fn backward_into(&self, feature_grad: &[T], record: &[LevelSample<T>], acc: &mut GridGradient<T>) {
        let f = self.config.features;
        for (level, rec) in record.iter().enumerate() {
            let g = &feature_grad[level * f..(level + 1) * f];
            if g.iter().all(|v| *v == T::zero()) {
                continue;
            }
            for corner in 0..8 {
                let w = rec.weights[corner];
                if w == T::zero() {
                    continue;
                }
                acc.add_scaled(level, rec.indices[corner] as usize, w, g);
            }
        }
    }

    pub fn encode_backward(
        &self,
        feature_grad: &[T],
        record: &[LevelSample<T>],
        acc: &mut GridGradient<T>,
    ) -> Result<()> {
        if feature_grad.len() != self.feature_dim() || record.len() != self.config.levels {
            return Err(Error::invalid(format!(
                "encode_backward: expected {} gradients over {} levels, got {} over {}",
                self.feature_dim(),
                self.config.levels,
                feature_grad.len(),
                record.len()
            )));
        }
        if acc.tables.len() != self.config.levels || acc.features != self.config.features {
            return Err(Error::invalid("encode_backward: accumulator shape does not match the grid"));
        }
        self.backward_into(feature_grad, record, acc);
        Ok(())
    }
}

/// Sparse gradient accumulator over the feature tables; only touched rows are tracked.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGradient<T> {
    pub features: usize,
    pub tables: Vec<Vec<T>>,
    touched: Vec<Vec<u32>>,
    flags: Vec<Vec<bool>>,
}

impl<T: Real> GridGradient<T> {
    pub fn new(config: &HashGridConfig) -> Self {
        let t = config.table_size();
        GridGradient {
            features: config.features,
            tables: vec![vec![T::zero(); t * config.features]; config.levels],
            touched: vec![Vec::new(); config.levels],
            flags: vec![vec![false; t]; config.levels],
        }
    }

    #[inline]
    pub fn add_scaled(&mut self, level: usize, row: usize, scale: T, grad: &[T]) {
        if !self.flags[level][row] {
            self.flags[level][row] = true;
            self.touched[level].push(row as u32);
        }
        let f = self.features;
        for (a, &g) in self.tables[level][row * f..(row + 1) * f].iter_mut().zip(grad) {
            *a += scale * g;
        }
    }

    /// Rows that received at least one contribution since the last clear, in first-touch order.
    pub fn touched_rows(&self, level: usize) -> &[u32] {
        &self.touched[level]
    }

    pub fn is_touched(&self, level: usize, row: usize) -> bool {
        self.flags[level][row]
    }

    pub fn touched_count(&self) -> usize {
        self.touched.iter().map(Vec::len).sum()
    }

    pub fn row(&self, level: usize, row: usize) -> &[T] {
        &self.tables[level][row * self.features..(row + 1) * self.features]
    }

    pub fn clear(&mut self) {
        let f = self.features;
        for level in 0..self.tables.len() {
            for &row in &self.touched[level] {
                let row = row as usize;
                self.tables[level][row * f..(row + 1) * f].iter_mut().for_each(|v| *v = T::zero());
                self.flags[level][row] = false;
            }
            self.touched[level].clear();
        }
    }

    pub fn squared_norm(&self) -> f64 {
        let f = self.features;
        let mut s = 0.0;
        for level in 0..self.tables.len() {
            for &row in &self.touched[level] {
                let row = row as usize;
                s += self.tables[level][row * f..(row + 1) * f].iter().map(|v| Real::to_f64(*v).powi(2)).sum::<f64>();
            }
        }
        s
    }
}
