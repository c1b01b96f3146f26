//! Shared randomness for one quantization round.
//!
//! Every random quantity used by the correlated quantizers is derived from a
//! single 64-bit [`MasterSeed`], so clients and the server rebuild identical
//! values from the seed alone.
//!
//! # Seed derivation
//!
//! Each stream gets its own sub-seed
//!
//! ```text
//! sub_seed = mix(mix(mix(master) ^ label) ^ index)
//! ```
//!
//! where `mix` is the SplitMix64 output function (add the golden gamma
//! `0x9E3779B97F4A7C15`, then the two xor-shift-multiply rounds) and `label`
//! is the [`Stream`] discriminant. Each sub-seed initializes a ChaCha8
//! generator through `SeedableRng::seed_from_u64`; ChaCha8 output is
//! value-stable across platforms.
//!
//! | stream        | index        | draws                                  |
//! |---------------|--------------|----------------------------------------|
//! | `Permutation` | coordinate j | Fisher-Yates shuffle of `0..n`         |
//! | `Offset`      | coordinate j | `n` fractions, client order            |
//! | `Grid`        | 0            | `d` fractions, coordinate order        |
//! | `Sign`        | 0            | `d` booleans, coordinate order         |
//!
//! Offsets of existing clients do not change when clients are appended, and
//! grid offsets and signs do not depend on `n` at all.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Master seed shared by all clients and the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct MasterSeed(pub u64);

impl From<u64> for MasterSeed {
    fn from(v: u64) -> Self {
        MasterSeed(v)
    }
}

/// Stream labels used for sub-seed derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Permutation = 1,
    Offset = 2,
    Grid = 3,
    Sign = 4,
    /// Per-trial seeds in the Monte-Carlo harness.
    Trial = 5,
    /// Synthetic data generation.
    Data = 6,
    /// Private randomness of independent quantizers.
    Private = 7,
    /// Task-level randomness (initialization, client sampling).
    Task = 8,
}

#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the sub-seed of `(master, label, index)`.
pub fn derive_seed(master: MasterSeed, label: Stream, index: u64) -> u64 {
    mix(mix(mix(master.0) ^ label as u64) ^ index)
}

/// A ChaCha8 generator seeded from a derived sub-seed.
pub fn stream_rng(master: MasterSeed, label: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, index))
}

/// Materialized shared randomness for `n` clients, `d` coordinates and a
/// `k`-level grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomnessContext {
    seed: MasterSeed,
    n: usize,
    d: usize,
    k: usize,
    /// Coordinate-major: `permutations[j * n + i]` is `pi^j_i`.
    permutations: Vec<u32>,
    /// Coordinate-major fractions `u` in `[0, 1)`; the offset is `u / n`.
    fractions: Vec<f64>,
    /// Coordinate-major thresholds `(pi^j_i + u) / n`.
    uniforms: Vec<f64>,
    grid_offset: Vec<f64>,
    rotation_signs: Vec<i8>,
}

impl RandomnessContext {
    /// Builds the context for `(seed, n, d, k)`.
    pub fn build(seed: MasterSeed, n: usize, d: usize, k: usize) -> Result<Self> {
        check_dims(n, d, k)?;
        if n > u32::MAX as usize {
            return Err(Error::invalid("client count exceeds u32"));
        }
        let mut permutations = Vec::with_capacity(n * d);
        let mut fractions = Vec::with_capacity(n * d);
        let mut perm: Vec<u32> = Vec::with_capacity(n);
        for j in 0..d {
            perm.clear();
            perm.extend(0..n as u32);
            perm.shuffle(&mut stream_rng(seed, Stream::Permutation, j as u64));
            permutations.extend_from_slice(&perm);
            let mut rng = stream_rng(seed, Stream::Offset, j as u64);
            fractions.extend((0..n).map(|_| rng.random::<f64>()));
        }
        let mut grid_rng = stream_rng(seed, Stream::Grid, 0);
        let grid_offset = (0..d).map(|_| (grid_rng.random::<f64>() - 1.0) / k as f64).collect();
        let mut sign_rng = stream_rng(seed, Stream::Sign, 0);
        let rotation_signs = (0..d).map(|_| if sign_rng.random::<bool>() { 1 } else { -1 }).collect();
        Ok(Self::assemble(
            seed,
            n,
            d,
            k,
            permutations,
            fractions,
            grid_offset,
            rotation_signs,
        ))
    }

    /// Builds a context from explicit parts, validating every invariant.
    ///
    /// `permutations` holds one permutation of `0..n` per coordinate and
    /// `offset_fractions[j][i]` is `n * gamma_i(j)`, in `[0, 1)`.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        seed: MasterSeed,
        n: usize,
        k: usize,
        permutations: Vec<Vec<u32>>,
        offset_fractions: Vec<Vec<f64>>,
        grid_offset: Vec<f64>,
        rotation_signs: Vec<i8>,
    ) -> Result<Self> {
        let d = permutations.len();
        check_dims(n, d, k)?;
        if offset_fractions.len() != d || grid_offset.len() != d || rotation_signs.len() != d {
            return Err(Error::invalid("all per-coordinate parts must have length d"));
        }
        let mut seen = vec![false; n];
        for p in &permutations {
            if p.len() != n {
                return Err(Error::invalid("permutation length must equal n"));
            }
            seen.iter_mut().for_each(|s| *s = false);
            for &v in p {
                if v as usize >= n || seen[v as usize] {
                    return Err(Error::invalid("not a permutation of 0..n"));
                }
                seen[v as usize] = true;
            }
        }
        for f in &offset_fractions {
            if f.len() != n || f.iter().any(|u| !(0.0..1.0).contains(u)) {
                return Err(Error::invalid("offset fractions must be n values in [0, 1)"));
            }
        }
        let lo = -1.0 / k as f64;
        if grid_offset.iter().any(|&c| !(c >= lo && c < 0.0)) {
            return Err(Error::invalid("grid offsets must lie in [-1/k, 0)"));
        }
        if rotation_signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("rotation signs must be +1 or -1"));
        }
        Ok(Self::assemble(
            seed,
            n,
            d,
            k,
            permutations.concat(),
            offset_fractions.concat(),
            grid_offset,
            rotation_signs,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        seed: MasterSeed,
        n: usize,
        d: usize,
        k: usize,
        permutations: Vec<u32>,
        fractions: Vec<f64>,
        grid_offset: Vec<f64>,
        rotation_signs: Vec<i8>,
    ) -> Self {
        let nf = n as f64;
        let uniforms = permutations
            .iter()
            .zip(&fractions)
            .map(|(&p, &u)| threshold(p as f64, u, nf))
            .collect();
        Self {
            seed,
            n,
            d,
            k,
            permutations,
            fractions,
            uniforms,
            grid_offset,
            rotation_signs,
        }
    }

    pub fn seed(&self) -> MasterSeed {
        self.seed
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// The permutation `pi^j`.
    pub fn permutation(&self, j: usize) -> &[u32] {
        &self.permutations[j * self.n..(j + 1) * self.n]
    }

    /// `gamma_i(j)`, in `[0, 1/n)`.
    pub fn offset(&self, i: usize, j: usize) -> f64 {
        self.fractions[j * self.n + i] / self.n as f64
    }

    /// `c_1(j)`, in `[-1/k, 0)`.
    pub fn grid_offset(&self, j: usize) -> f64 {
        self.grid_offset[j]
    }

    pub fn rotation_signs(&self) -> &[i8] {
        &self.rotation_signs
    }

    /// `U_i = pi^j_i / n + gamma_i(j)` for client `i` on coordinate `j`.
    pub fn client_uniform(&self, i: usize, j: usize) -> Result<f64> {
        if i >= self.n || j >= self.d {
            return Err(Error::invalid(format!(
                "index (client {i}, coordinate {j}) out of range for n={}, d={}",
                self.n, self.d
            )));
        }
        Ok(self.uniforms[j * self.n + i])
    }

    /// Thresholds of every client on coordinate `j`, in client order.
    #[inline]
    pub fn uniforms(&self, j: usize) -> &[f64] {
        &self.uniforms[j * self.n..(j + 1) * self.n]
    }

    /// Canonical little-endian serialization of every field.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.n * self.d * 12 + self.d * 9);
        out.extend_from_slice(&self.seed.0.to_le_bytes());
        for v in [self.n, self.d, self.k] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for p in &self.permutations {
            out.extend_from_slice(&p.to_le_bytes());
        }
        for u in &self.fractions {
            out.extend_from_slice(&u.to_bits().to_le_bytes());
        }
        for c in &self.grid_offset {
            out.extend_from_slice(&c.to_bits().to_le_bytes());
        }
        out.extend(self.rotation_signs.iter().map(|&s| s as u8));
        out
    }
}

/// `(p + u) / n`, nudged down if rounding would push it into the next slot.
#[inline]
fn threshold(p: f64, u: f64, n: f64) -> f64 {
    let t = (p + u) / n;
    if (t * n).floor() > p {
        let below = f64::from_bits(t.to_bits() - 1);
        debug_assert!((below * n).floor() <= p);
        below
    } else {
        t
    }
}

fn check_dims(n: usize, d: usize, k: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("client count n must be at least 1"));
    }
    if d == 0 {
        return Err(Error::invalid("dimension d must be at least 1"));
    }
    if k < 2 {
        return Err(Error::invalid("level count k must be at least 2"));
    }
    Ok(())
}

/// Shorthand for [`RandomnessContext::build`].
pub fn build_context(seed: MasterSeed, n: usize, d: usize, k: usize) -> Result<RandomnessContext> {
    RandomnessContext::build(seed, n, d, k)
}

/// Shorthand for [`RandomnessContext::client_uniform`].
pub fn client_uniform(ctx: &RandomnessContext, i: usize, j: usize) -> Result<f64> {
    ctx.client_uniform(i, j)
}
