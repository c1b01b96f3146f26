//! One-dimensional quantizers.
//!
//! [`one_bit_cq`] and [`k_level_cq`] are the correlated quantizers: client
//! `i` rounds with the shared threshold `U_i = pi_i / n + gamma_i` from a
//! [`RandomnessContext`], so the thresholds of the `n` clients fall in
//! distinct slots of `[0, 1)`. [`independent_sq`] is classic stochastic
//! rounding with private, independent thresholds.
//!
//! Outputs are mapped back to the input range, `l + (r - l) * level`, so
//! the estimate targets the mean itself.

use rand::Rng;

use crate::randomness::RandomnessContext;
use crate::{Error, Result};

/// `n` scalar inputs bounded by `[lower, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarBatch {
    values: Vec<f64>,
    lower: f64,
    upper: f64,
}

impl ScalarBatch {
    pub fn new(values: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("scalar batch is empty"));
        }
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::invalid(format!(
                "bounds must be finite with lower < upper, got [{lower}, {upper}]"
            )));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v >= lower && **v <= upper)) {
            return Err(Error::invalid(format!(
                "value {v} at index {i} is outside [{lower}, {upper}]"
            )));
        }
        Ok(Self { values, lower, upper })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Inputs normalized to `[0, 1]`.
    fn normalized(&self) -> impl Iterator<Item = f64> + '_ {
        let w = self.width();
        self.values.iter().map(move |&x| (x - self.lower) / w)
    }
}

/// Randomly shifted level grid `c_i = c_1 + (i - 1) * beta` on the
/// normalized scale, with `beta = (k + 1) / (k (k - 1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelGrid {
    k: usize,
    c1: f64,
    beta: f64,
}

impl LevelGrid {
    pub fn new(k: usize, c1: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("level grid needs k >= 2"));
        }
        let kf = k as f64;
        if !(c1 >= -1.0 / kf && c1 < 0.0) {
            return Err(Error::invalid(format!("grid offset {c1} is outside [-1/k, 0)")));
        }
        Ok(Self {
            k,
            c1,
            beta: (kf + 1.0) / (kf * (kf - 1.0)),
        })
    }

    /// The grid of coordinate `j` of `ctx`.
    pub fn from_context(ctx: &RandomnessContext, j: usize) -> Result<Self> {
        if j >= ctx.d() {
            return Err(Error::invalid(format!("coordinate {j} out of range")));
        }
        Self::new(ctx.k(), ctx.grid_offset(j))
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Level `c_{index + 1}` (zero-based index).
    #[inline]
    pub fn level(&self, index: u32) -> f64 {
        self.c1 + index as f64 * self.beta
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.k as u32).map(|i| self.level(i)).collect()
    }

    /// Zero-based index of the largest level strictly below `y`.
    #[inline]
    pub fn cell_below(&self, y: f64) -> u32 {
        let t = (y - self.c1) / self.beta;
        let m = t.ceil() - 1.0;
        m.clamp(0.0, (self.k - 2) as f64) as u32
    }

    /// Level index for normalized input `y` and threshold `u`: the cell's
    /// lower level, plus one when `u` falls below the fractional position
    /// of `y` inside the cell.
    #[inline]
    pub fn quantize(&self, y: f64, u: f64) -> u32 {
        let m = self.cell_below(y);
        let frac = (y - self.level(m)) / self.beta;
        m + (u < frac) as u32
    }
}

/// Sample mean absolute deviation, standard deviation and maximum
/// deviation around the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConcentrationStats {
    pub sigma_md: f64,
    pub sigma: f64,
    pub sigma_max: f64,
}

impl ConcentrationStats {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("concentration statistics of an empty batch"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let (mut abs, mut sq, mut max) = (0.0, 0.0, 0.0f64);
        for &x in values {
            let dev = (x - mean).abs();
            abs += dev;
            sq += dev * dev;
            max = max.max(dev);
        }
        Ok(Self {
            sigma_md: abs / n,
            sigma: (sq / n).sqrt(),
            sigma_max: max,
        })
    }
}

pub fn concentration_stats(batch: &ScalarBatch) -> Result<ConcentrationStats> {
    ConcentrationStats::of(batch.values())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarQuantOutput {
    pub per_client: Vec<f64>,
    pub level_indices: Vec<u32>,
    pub estimate: f64,
}

impl ScalarQuantOutput {
    fn from_levels(batch: &ScalarBatch, level_indices: Vec<u32>, level: impl Fn(u32) -> f64) -> Self {
        let (l, w) = (batch.lower(), batch.width());
        let per_client: Vec<f64> = level_indices.iter().map(|&ix| l + w * level(ix)).collect();
        let estimate = per_client.iter().sum::<f64>() / per_client.len() as f64;
        Self {
            per_client,
            level_indices,
            estimate,
        }
    }
}

fn check_context(batch: &ScalarBatch, ctx: &RandomnessContext, j: usize) -> Result<()> {
    if ctx.n() != batch.len() {
        return Err(Error::invalid(format!(
            "batch has {} clients but the context was built for {}",
            batch.len(),
            ctx.n()
        )));
    }
    if j >= ctx.d() {
        return Err(Error::invalid(format!("coordinate {j} out of range for d={}", ctx.d())));
    }
    Ok(())
}

/// Correlated one-bit quantizer: client `i` sends `1{U_i < y_i}` with
/// `y_i = (x_i - l) / (r - l)`.
pub fn one_bit_cq(batch: &ScalarBatch, ctx: &RandomnessContext, j: usize) -> Result<ScalarQuantOutput> {
    check_context(batch, ctx, j)?;
    let indices = batch
        .normalized()
        .zip(ctx.uniforms(j))
        .map(|(y, &u)| (u < y) as u32)
        .collect();
    Ok(ScalarQuantOutput::from_levels(batch, indices, |ix| ix as f64))
}

/// Correlated `k`-level quantizer on the randomly shifted grid.
///
/// With `k = 2` this is [`one_bit_cq`].
pub fn k_level_cq(
    batch: &ScalarBatch,
    ctx: &RandomnessContext,
    grid: &LevelGrid,
    j: usize,
) -> Result<ScalarQuantOutput> {
    check_context(batch, ctx, j)?;
    if grid.k() != ctx.k() {
        return Err(Error::invalid(format!(
            "grid has k={} but the context was built for k={}",
            grid.k(),
            ctx.k()
        )));
    }
    if grid.k() == 2 {
        return one_bit_cq(batch, ctx, j);
    }
    let indices = batch
        .normalized()
        .zip(ctx.uniforms(j))
        .map(|(y, &u)| grid.quantize(y, u))
        .collect();
    Ok(ScalarQuantOutput::from_levels(batch, indices, |ix| grid.level(ix)))
}

/// Level index of stochastic rounding on the uniform grid
/// `{0, 1/(k-1), ..., 1}` for normalized `y` and threshold `u`.
#[inline]
pub fn uniform_grid_index(y: f64, u: f64, k: usize) -> u32 {
    let scaled = y * (k - 1) as f64;
    let m = scaled.floor().clamp(0.0, (k - 2) as f64);
    m as u32 + (u < scaled - m) as u32
}

/// Independent stochastic quantization on `k` evenly spaced levels
/// spanning `[l, r]`, each client with its own private threshold.
pub fn independent_sq<R: Rng + ?Sized>(batch: &ScalarBatch, k: usize, rng: &mut R) -> Result<ScalarQuantOutput> {
    if k < 2 {
        return Err(Error::invalid("independent quantization needs k >= 2"));
    }
    let indices = batch
        .normalized()
        .map(|y| uniform_grid_index(y, rng.random::<f64>(), k))
        .collect();
    let step = 1.0 / (k - 1) as f64;
    Ok(ScalarQuantOutput::from_levels(batch, indices, |ix| ix as f64 * step))
}
