//! High-dimensional quantizers.
//!
//! Every scheme runs the same way: each client encodes its own vector into
//! a [`WireMessage`], the server decodes every message back to a vector and
//! averages. Client-side encoding only needs the client's own input and the
//! shared randomness, so clients are encoded independently (and in
//! parallel with the `parallel` feature).
//!
//! Schemes:
//!
//! - coordinate-wise correlated quantization over a per-coordinate range,
//!   with fixed-width ([`correlated_coordinatewise`]) or Elias-gamma
//!   ([`entropy_cq`]) payloads;
//! - [`walsh_hadamard_cq`]: randomized Hadamard rotation, scaling, clipping
//!   to `[-1, 1]`, then correlated `k`-level quantization per coordinate;
//! - baselines: [`independent_vector_sq`] (optionally rotated),
//!   [`ternary_quantize`] and [`rotate_sign_baseline`].
//!
//! The ternary and rotate-sign baselines are simplified re-implementations
//! of TernGrad and Structured DRIVE respectively, not faithful ports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitcodec::{self, BitStream, WireMessage};
use crate::harness::SchemeId;
use crate::par;
use crate::randomness::{derive_seed, stream_rng, MasterSeed, RandomnessContext, Stream};
use crate::scalar_quant::{uniform_grid_index, LevelGrid};
use crate::{Error, Result};

/// `n` client vectors of dimension `d` inside the ball of radius `R`.
///
/// A batch may also declare a public per-coordinate range; coordinate-wise
/// schemes use it instead of `[-R, R]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBatch {
    data: Vec<f64>,
    n: usize,
    d: usize,
    radius: f64,
    coordinate_bounds: Option<(f64, f64)>,
}

const NORM_SLACK: f64 = 1e-12;

impl VectorBatch {
    pub fn new(vectors: Vec<Vec<f64>>, radius: f64) -> Result<Self> {
        let n = vectors.len();
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::invalid("vectors have inconsistent dimensions"));
        }
        Self::from_flat(vectors.concat(), n, d, radius)
    }

    /// Row-major `n x d` data.
    pub fn from_flat(data: Vec<f64>, n: usize, d: usize, radius: f64) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("vector batch needs n >= 1 and d >= 1"));
        }
        if data.len() != n * d {
            return Err(Error::invalid("data length is not n * d"));
        }
        if !(radius.is_finite() && radius >= 0.0) {
            return Err(Error::invalid(format!("radius {radius} must be finite and >= 0")));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vector entries must be finite"));
        }
        for i in 0..n {
            let norm = l2_norm(&data[i * d..(i + 1) * d]);
            if norm > radius * (1.0 + NORM_SLACK) {
                return Err(Error::invalid(format!(
                    "vector {i} has norm {norm} above radius {radius}"
                )));
            }
        }
        Ok(Self {
            data,
            n,
            d,
            radius,
            coordinate_bounds: None,
        })
    }

    /// Batch whose radius is the largest input norm.
    pub fn with_tight_radius(data: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 || data.len() != n * d {
            return Err(Error::invalid("data length is not n * d"));
        }
        let radius = data.chunks(d).map(l2_norm).fold(0.0, f64::max);
        Self::from_flat(data, n, d, radius)
    }

    /// Declares a public range `[lower, upper]` for every coordinate.
    pub fn with_coordinate_bounds(mut self, lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(Error::invalid(format!(
                "coordinate bounds [{lower}, {upper}] must be finite with lower < upper"
            )));
        }
        if let Some(x) = self.data.iter().find(|&&x| x < lower || x > upper) {
            return Err(Error::invalid(format!(
                "entry {x} is outside the declared range [{lower}, {upper}]"
            )));
        }
        self.coordinate_bounds = Some((lower, upper));
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn coordinate_bounds(&self) -> Option<(f64, f64)> {
        self.coordinate_bounds
    }

    /// Declared per-coordinate range, or `[-R, R]`.
    pub fn coordinate_range(&self) -> (f64, f64) {
        self.coordinate_bounds.unwrap_or((-self.radius, self.radius))
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.d)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        mean_rows(&self.data, self.n, self.d)
    }
}

fn mean_rows(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for row in data.chunks(d) {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    let nf = n as f64;
    m.iter_mut().for_each(|a| *a /= nf);
    m
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Average distance of the inputs to their mean.
pub fn vector_concentration(batch: &VectorBatch) -> Result<f64> {
    let mean = batch.mean();
    let total: f64 = batch
        .rows()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / batch.n() as f64)
}

/// Server-side result of one quantization round.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorQuantReport {
    pub estimate: Vec<f64>,
    /// Decoded vector of every client, in client order.
    pub per_client: Vec<Vec<f64>>,
    /// Header plus exact payload bits of every client's message.
    pub bits_per_client: Vec<u64>,
    /// Coordinates clipped to `[-1, 1]` after rotation, over all clients.
    pub clip_events: usize,
    pub sigma_d_md: f64,
    pub messages: Vec<WireMessage>,
}

impl VectorQuantReport {
    fn assemble(
        batch: &VectorBatch,
        messages: Vec<WireMessage>,
        per_client: Vec<Vec<f64>>,
        clip_events: usize,
    ) -> Result<Self> {
        let d = batch.d();
        let mut estimate = vec![0.0; d];
        for v in &per_client {
            for (a, b) in estimate.iter_mut().zip(v) {
                *a += b;
            }
        }
        let nf = batch.n() as f64;
        estimate.iter_mut().for_each(|a| *a /= nf);
        Ok(Self {
            estimate,
            bits_per_client: messages.iter().map(WireMessage::bit_len).collect(),
            per_client,
            clip_events,
            sigma_d_md: vector_concentration(batch)?,
            messages,
        })
    }

    pub fn mean_bits_per_client(&self) -> f64 {
        self.bits_per_client.iter().sum::<u64>() as f64 / self.bits_per_client.len() as f64
    }
}

fn header(scheme: SchemeId, batch: &VectorBatch, k: usize, seed: u64, payload: BitStream) -> Result<WireMessage> {
    Ok(WireMessage {
        scheme: scheme.wire_id(),
        n: u32::try_from(batch.n()).map_err(|_| Error::invalid("n exceeds u32"))?,
        d: u32::try_from(batch.d()).map_err(|_| Error::invalid("d exceeds u32"))?,
        k: u16::try_from(k).map_err(|_| Error::invalid("k exceeds u16"))?,
        seed,
        payload,
    })
}

fn check_header(m: &WireMessage, expected: &WireMessage) -> Result<()> {
    if (m.scheme, m.n, m.d, m.k, m.seed) != (expected.scheme, expected.n, expected.d, expected.k, expected.seed) {
        return Err(Error::invalid("message header does not match the round parameters"));
    }
    Ok(())
}

fn check_context(batch: &VectorBatch, ctx: &RandomnessContext, k: usize, d: usize) -> Result<()> {
    if ctx.n() != batch.n() {
        return Err(Error::invalid(format!(
            "batch has {} clients but the context was built for {}",
            batch.n(),
            ctx.n()
        )));
    }
    if ctx.d() != d {
        return Err(Error::invalid(format!(
            "context dimension {} does not match the required {d}",
            ctx.d()
        )));
    }
    if ctx.k() != k {
        return Err(Error::invalid(format!(
            "context level count {} does not match k={k}",
            ctx.k()
        )));
    }
    Ok(())
}

/// Per-coordinate payload coding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coding {
    /// `ceil(log2 k)` bits per coordinate.
    Fixed,
    /// Elias-gamma code of the zig-zag mapped level index, plus one.
    Gamma,
}

/// Correlated levels on one coordinate: the one-bit grid `{0, 1}` for
/// `k = 2`, otherwise the randomly shifted grid.
#[derive(Debug, Clone, Copy)]
enum CorrelatedLevels {
    OneBit,
    Shifted(LevelGrid),
}

impl CorrelatedLevels {
    fn for_coordinate(ctx: &RandomnessContext, j: usize) -> Result<Self> {
        if ctx.k() == 2 {
            Ok(Self::OneBit)
        } else {
            Ok(Self::Shifted(LevelGrid::from_context(ctx, j)?))
        }
    }

    #[inline]
    fn quantize(&self, y: f64, u: f64) -> u32 {
        match self {
            Self::OneBit => (u < y) as u32,
            Self::Shifted(g) => g.quantize(y, u),
        }
    }

    #[inline]
    fn level(&self, ix: u32) -> f64 {
        match self {
            Self::OneBit => ix as f64,
            Self::Shifted(g) => g.level(ix),
        }
    }
}

fn encode_indices(indices: &[u32], k: usize, coding: Coding) -> Result<BitStream> {
    match coding {
        Coding::Fixed => bitcodec::pack_fixed(indices, k),
        Coding::Gamma => {
            let mut s = BitStream::new();
            for &ix in indices {
                bitcodec::write_gamma(&mut s, bitcodec::zigzag(ix, k) + 1)?;
            }
            Ok(s)
        }
    }
}

fn decode_indices(payload: &BitStream, k: usize, count: usize, coding: Coding) -> Result<Vec<u32>> {
    match coding {
        Coding::Fixed => bitcodec::unpack_fixed(payload, k, count),
        Coding::Gamma => {
            let zs = bitcodec::elias_gamma_decode(payload)?;
            if zs.len() != count {
                return Err(Error::invalid(format!(
                    "payload holds {} indices, expected {count}",
                    zs.len()
                )));
            }
            zs.into_iter()
                .map(|z| {
                    bitcodec::unzigzag(z - 1, k).ok_or_else(|| Error::invalid(format!("level code {z} out of range")))
                })
                .collect()
        }
    }
}

/// Coordinate-wise correlated quantization of every coordinate over
/// `[lower, upper]`, using coordinate `j`'s permutation, offsets and grid.
pub fn correlated_coordinatewise(
    batch: &VectorBatch,
    ctx: &RandomnessContext,
    range: (f64, f64),
    coding: Coding,
    scheme: SchemeId,
) -> Result<VectorQuantReport> {
    let (n, d, k) = (batch.n(), batch.d(), ctx.k());
    check_context(batch, ctx, k, d)?;
    let (lower, upper) = range;
    if !(lower.is_finite() && upper.is_finite() && upper >= lower) {
        return Err(Error::invalid(format!("invalid coordinate range [{lower}, {upper}]")));
    }
    if upper == lower {
        if batch.as_flat().iter().any(|&x| x != lower) {
            return Err(Error::invalid("entries lie outside a single-point range"));
        }
        return constant_report(batch, scheme, k, ctx.seed().0, coding, lower);
    }
    let width = upper - lower;
    let levels: Vec<CorrelatedLevels> = (0..d)
        .map(|j| CorrelatedLevels::for_coordinate(ctx, j))
        .collect::<Result<_>>()?;
    let seed = ctx.seed().0;
    let messages = par::try_map_indexed(n, |i| {
        let indices: Vec<u32> = batch
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let y = ((x - lower) / width).clamp(0.0, 1.0);
                levels[j].quantize(y, ctx.uniforms(j)[i])
            })
            .collect();
        header(scheme, batch, k, seed, encode_indices(&indices, k, coding)?)
    })?;
    let expected = header(scheme, batch, k, seed, BitStream::new())?;
    let per_client = par::try_map_indexed(n, |i| {
        let m = &messages[i];
        check_header(m, &expected)?;
        let indices = decode_indices(&m.payload, k, d, coding)?;
        Ok::<_, Error>(
            indices
                .iter()
                .enumerate()
                .map(|(j, &ix)| lower + width * levels[j].level(ix))
                .collect(),
        )
    })?;
    VectorQuantReport::assemble(batch, messages, per_client, 0)
}

/// Correlated `k`-level quantization of each coordinate over `[-R, R]`
/// with Elias-gamma coded level indices.
pub fn entropy_cq(batch: &VectorBatch, ctx: &RandomnessContext, k: usize) -> Result<VectorQuantReport> {
    check_context(batch, ctx, k, batch.d())?;
    let r = batch.radius();
    correlated_coordinatewise(batch, ctx, (-r, r), Coding::Gamma, SchemeId::EntropyCq)
}

/// Every entry equals `value`: clients send the central index, which the
/// server ignores.
fn constant_report(
    batch: &VectorBatch,
    scheme: SchemeId,
    k: usize,
    seed: u64,
    coding: Coding,
    value: f64,
) -> Result<VectorQuantReport> {
    let center = ((k - 1) / 2) as u32;
    let payload = encode_indices(&vec![center; batch.d()], k, coding)?;
    let m = header(scheme, batch, k, seed, payload)?;
    VectorQuantReport::assemble(batch, vec![m; batch.n()], vec![vec![value; batch.d()]; batch.n()], 0)
}

/// Smallest power of two `>= d`.
pub fn padded_dim(d: usize) -> usize {
    d.next_power_of_two()
}

/// Normalized randomized Hadamard rotation `W = H D / sqrt(p)` on the
/// zero-padded dimension `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationSpec {
    padded_dim: usize,
    signs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

impl RotationSpec {
    /// Signs drawn from the `Sign` stream of `seed`. The first `d` signs
    /// match [`RandomnessContext::rotation_signs`] for the same seed.
    pub fn from_seed(seed: MasterSeed, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("rotation dimension must be at least 1"));
        }
        let p = padded_dim(d);
        let mut rng = stream_rng(seed, Stream::Sign, 0);
        let signs = (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        Ok(Self { padded_dim: p, signs })
    }

    pub fn from_signs(signs: Vec<f64>) -> Result<Self> {
        let p = signs.len();
        if p == 0 || !p.is_power_of_two() {
            return Err(Error::invalid("sign vector length must be a power of two"));
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::invalid("signs must be +1 or -1"));
        }
        Ok(Self { padded_dim: p, signs })
    }

    pub fn padded_dim(&self) -> usize {
        self.padded_dim
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }
}

/// In-place unnormalized fast Walsh-Hadamard transform (Sylvester order).
/// The length must be a power of two.
///
/// Stages whose butterfly span fits in a cache-sized block run block by
/// block; the remaining stages are merged into radix-8 and radix-4 passes
/// so the whole vector is swept as few times as possible.
pub fn fwht_in_place(v: &mut [f64]) {
    let len = v.len();
    debug_assert!(len.is_power_of_two());
    let block = FWHT_BLOCK.min(len);
    for chunk in v.chunks_exact_mut(block) {
        stages(chunk, 1, block);
    }
    stages(v, block, len);
}

const FWHT_BLOCK: usize = 1 << 11;

/// Runs the stages with spans `h, 2h, ...` below `end`.
fn stages(v: &mut [f64], mut h: usize, end: usize) {
    while h < end {
        if 8 * h <= end {
            radix8(v, h);
            h *= 8;
        } else if 4 * h <= end {
            radix4(v, h);
            h *= 4;
        } else {
            radix2(v, h);
            h *= 2;
        }
    }
}

fn radix2(v: &mut [f64], h: usize) {
    for block in v.chunks_exact_mut(2 * h) {
        let (a, b) = block.split_at_mut(h);
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            let (s, t) = (*x, *y);
            *x = s + t;
            *y = s - t;
        }
    }
}

fn radix4(v: &mut [f64], h: usize) {
    for block in v.chunks_exact_mut(4 * h) {
        let (a, rest) = block.split_at_mut(h);
        let (b, rest) = rest.split_at_mut(h);
        let (c, d) = rest.split_at_mut(h);
        for i in 0..h {
            let (s0, d0) = (a[i] + b[i], a[i] - b[i]);
            let (s1, d1) = (c[i] + d[i], c[i] - d[i]);
            a[i] = s0 + s1;
            b[i] = d0 + d1;
            c[i] = s0 - s1;
            d[i] = d0 - d1;
        }
    }
}

fn radix8(v: &mut [f64], h: usize) {
    for block in v.chunks_exact_mut(8 * h) {
        let mut parts = block.chunks_exact_mut(h);
        let p: [&mut [f64]; 8] = std::array::from_fn(|_| parts.next().unwrap_or_default());
        for i in 0..h {
            let x: [f64; 8] = std::array::from_fn(|m| p[m][i]);
            let a = [
                x[0] + x[1],
                x[0] - x[1],
                x[2] + x[3],
                x[2] - x[3],
                x[4] + x[5],
                x[4] - x[5],
                x[6] + x[7],
                x[6] - x[7],
            ];
            let b = [
                a[0] + a[2],
                a[1] + a[3],
                a[0] - a[2],
                a[1] - a[3],
                a[4] + a[6],
                a[5] + a[7],
                a[4] - a[6],
                a[5] - a[7],
            ];
            for m in 0..4 {
                p[m][i] = b[m] + b[m + 4];
                p[m + 4][i] = b[m] - b[m + 4];
            }
        }
    }
}

/// Applies `W` (forward) or `W^-1 = W^T` (inverse). Forward accepts any
/// length up to `p` and zero-pads; inverse requires length `p`. Both
/// return `p` values.
pub fn hadamard_rotate(v: &[f64], spec: &RotationSpec, direction: Direction) -> Result<Vec<f64>> {
    let p = spec.padded_dim;
    let mut out = Vec::with_capacity(p);
    rotate_into(v, spec, direction, &mut out)?;
    Ok(out)
}

fn rotate_into(v: &[f64], spec: &RotationSpec, direction: Direction, out: &mut Vec<f64>) -> Result<()> {
    let p = spec.padded_dim;
    let norm = 1.0 / (p as f64).sqrt();
    out.clear();
    match direction {
        Direction::Forward => {
            if v.len() > p {
                return Err(Error::invalid(format!(
                    "vector of length {} exceeds rotation dimension {p}",
                    v.len()
                )));
            }
            out.extend(v.iter().zip(&spec.signs).map(|(x, s)| x * s));
            out.resize(p, 0.0);
            fwht_in_place(out);
            out.iter_mut().for_each(|x| *x *= norm);
        }
        Direction::Inverse => {
            if v.len() != p {
                return Err(Error::invalid(format!(
                    "inverse rotation needs length {p}, got {}",
                    v.len()
                )));
            }
            out.extend_from_slice(v);
            fwht_in_place(out);
            out.iter_mut().zip(&spec.signs).for_each(|(x, s)| *x *= norm * s);
        }
    }
    Ok(())
}

/// Scale `sqrt(p) / (R sqrt(8 ln(p n)))` that maps rotated coordinates
/// into `[-1, 1]` with high probability.
pub fn rotation_scale(radius: f64, p: usize, n: usize) -> Result<f64> {
    let pn = (p * n) as f64;
    if pn < 2.0 {
        return Err(Error::invalid("rotated quantization needs n * d >= 2"));
    }
    Ok((p as f64).sqrt() / (radius * (8.0 * pn.ln()).sqrt()))
}

/// Client side of the rotated pipeline: scaled, clipped rotation of `x`.
fn rotate_scale_clip(x: &[f64], spec: &RotationSpec, scale: f64) -> Result<(Vec<f64>, usize)> {
    let mut y = hadamard_rotate(x, spec, Direction::Forward)?;
    let mut clips = 0;
    for v in y.iter_mut() {
        let s = *v * scale;
        if s.abs() > 1.0 {
            clips += 1;
        }
        *v = s.clamp(-1.0, 1.0);
    }
    Ok((y, clips))
}

fn unrotate(z: Vec<f64>, spec: &RotationSpec, scale: f64, d: usize) -> Result<Vec<f64>> {
    let mut x = hadamard_rotate(&z, spec, Direction::Inverse)?;
    x.truncate(d);
    x.iter_mut().for_each(|v| *v /= scale);
    Ok(x)
}

/// Rotated correlated quantization.
///
/// `ctx` must be built for the padded dimension `p = next_power_of_two(d)`;
/// its first `d` rotation signs are the diagonal of `D`. Each client sends
/// `p * ceil(log2 k)` payload bits.
pub fn walsh_hadamard_cq(batch: &VectorBatch, ctx: &RandomnessContext, k: usize) -> Result<VectorQuantReport> {
    let (n, d) = (batch.n(), batch.d());
    let p = padded_dim(d);
    check_context(batch, ctx, k, p)?;
    let spec = RotationSpec::from_seed(ctx.seed(), d)?;
    let seed = ctx.seed().0;
    let scheme = SchemeId::HadamardCq;
    let radius = batch.radius();
    if radius == 0.0 {
        let payload = bitcodec::pack_fixed(&vec![0; p], k)?;
        let m = header(scheme, batch, k, seed, payload)?;
        return VectorQuantReport::assemble(batch, vec![m; n], vec![vec![0.0; d]; n], 0);
    }
    let scale = rotation_scale(radius, p, n)?;
    let levels: Vec<CorrelatedLevels> = (0..p)
        .map(|j| CorrelatedLevels::for_coordinate(ctx, j))
        .collect::<Result<_>>()?;
    let encoded = par::try_map_indexed(n, |i| {
        let (y, clips) = rotate_scale_clip(batch.row(i), &spec, scale)?;
        let indices: Vec<u32> = y
            .iter()
            .enumerate()
            .map(|(j, &v)| levels[j].quantize((v + 1.0) / 2.0, ctx.uniforms(j)[i]))
            .collect();
        let payload = bitcodec::pack_fixed(&indices, k)?;
        Ok::<_, Error>((header(scheme, batch, k, seed, payload)?, clips))
    })?;
    let clip_events = encoded.iter().map(|(_, c)| c).sum();
    let messages: Vec<WireMessage> = encoded.into_iter().map(|(m, _)| m).collect();
    let expected = header(scheme, batch, k, seed, BitStream::new())?;
    let per_client = par::try_map_indexed(n, |i| {
        let m = &messages[i];
        check_header(m, &expected)?;
        let z: Vec<f64> = bitcodec::unpack_fixed(&m.payload, k, p)?
            .iter()
            .enumerate()
            .map(|(j, &ix)| 2.0 * levels[j].level(ix) - 1.0)
            .collect();
        unrotate(z, &spec, scale, d)
    })?;
    VectorQuantReport::assemble(batch, messages, per_client, clip_events)
}

fn client_rng(base: u64, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(MasterSeed(base), Stream::Private, i as u64))
}

/// Independent stochastic quantization of every coordinate, optionally
/// inside the same rotate/scale/clip pipeline as [`walsh_hadamard_cq`].
///
/// Without rotation the per-coordinate range is the batch's declared
/// range, or `[-R, R]`. Private thresholds come from per-client streams
/// seeded by one draw from `rng`; the rotation seed is a second draw and
/// travels in the message header.
pub fn independent_vector_sq<R: Rng + ?Sized>(
    batch: &VectorBatch,
    k: usize,
    rotate: bool,
    rng: &mut R,
) -> Result<VectorQuantReport> {
    if k < 2 {
        return Err(Error::invalid("independent quantization needs k >= 2"));
    }
    let private_base: u64 = rng.random();
    let rotation_seed: u64 = rng.random();
    let (n, d) = (batch.n(), batch.d());
    if rotate {
        let scheme = SchemeId::IndependentRotation;
        let p = padded_dim(d);
        let radius = batch.radius();
        if radius == 0.0 {
            let payload = bitcodec::pack_fixed(&vec![0; p], k)?;
            let m = header(scheme, batch, k, rotation_seed, payload)?;
            return VectorQuantReport::assemble(batch, vec![m; n], vec![vec![0.0; d]; n], 0);
        }
        let spec = RotationSpec::from_seed(MasterSeed(rotation_seed), d)?;
        let scale = rotation_scale(radius, p, n)?;
        let step = 1.0 / (k - 1) as f64;
        let encoded = par::try_map_indexed(n, |i| {
            let (y, clips) = rotate_scale_clip(batch.row(i), &spec, scale)?;
            let mut crng = client_rng(private_base, i);
            let indices: Vec<u32> = y
                .iter()
                .map(|&v| uniform_grid_index((v + 1.0) / 2.0, crng.random::<f64>(), k))
                .collect();
            let payload = bitcodec::pack_fixed(&indices, k)?;
            Ok::<_, Error>((header(scheme, batch, k, rotation_seed, payload)?, clips))
        })?;
        let clip_events = encoded.iter().map(|(_, c)| c).sum();
        let messages: Vec<WireMessage> = encoded.into_iter().map(|(m, _)| m).collect();
        let expected = header(scheme, batch, k, rotation_seed, BitStream::new())?;
        let per_client = par::try_map_indexed(n, |i| {
            let m = &messages[i];
            check_header(m, &expected)?;
            let z: Vec<f64> = bitcodec::unpack_fixed(&m.payload, k, p)?
                .iter()
                .map(|&ix| 2.0 * ix as f64 * step - 1.0)
                .collect();
            unrotate(z, &spec, scale, d)
        })?;
        VectorQuantReport::assemble(batch, messages, per_client, clip_events)
    } else {
        let scheme = SchemeId::Independent;
        let (lower, upper) = batch.coordinate_range();
        if !(upper > lower) {
            return VectorQuantReport::assemble(
                batch,
                vec![header(scheme, batch, k, 0, bitcodec::pack_fixed(&vec![0; d], k)?)?; n],
                vec![vec![lower; d]; n],
                0,
            );
        }
        let width = upper - lower;
        let step = 1.0 / (k - 1) as f64;
        let messages = par::try_map_indexed(n, |i| {
            let mut crng = client_rng(private_base, i);
            let indices: Vec<u32> = batch
                .row(i)
                .iter()
                .map(|&x| {
                    let y = ((x - lower) / width).clamp(0.0, 1.0);
                    uniform_grid_index(y, crng.random::<f64>(), k)
                })
                .collect();
            header(scheme, batch, k, 0, bitcodec::pack_fixed(&indices, k)?)
        })?;
        let expected = header(scheme, batch, k, 0, BitStream::new())?;
        let per_client = par::try_map_indexed(n, |i| {
            let m = &messages[i];
            check_header(m, &expected)?;
            Ok::<_, Error>(
                bitcodec::unpack_fixed(&m.payload, k, d)?
                    .iter()
                    .map(|&ix| lower + width * ix as f64 * step)
                    .collect(),
            )
        })?;
        VectorQuantReport::assemble(batch, messages, per_client, 0)
    }
}

/// Three-level stochastic quantization: with `s = max_j |x(j)|`, each
/// coordinate becomes `sign(x(j)) * s` with probability `|x(j)| / s`,
/// otherwise zero. Payload: `s` as 64 raw bits, then 2 bits per coordinate.
pub fn ternary_quantize<R: Rng + ?Sized>(batch: &VectorBatch, rng: &mut R) -> Result<VectorQuantReport> {
    let (n, d) = (batch.n(), batch.d());
    let scheme = SchemeId::TernGrad;
    let private_base: u64 = rng.random();
    let messages = par::try_map_indexed(n, |i| {
        let x = batch.row(i);
        let s = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut crng = client_rng(private_base, i);
        let symbols: Vec<u32> = x
            .iter()
            .map(|&v| {
                let u = crng.random::<f64>();
                if s > 0.0 && u < v.abs() / s {
                    if v > 0.0 {
                        2
                    } else {
                        0
                    }
                } else {
                    1
                }
            })
            .collect();
        let mut payload = BitStream::with_capacity(64 + 2 * d);
        payload.push_bits(s.to_bits(), 64);
        payload.extend(&bitcodec::pack_fixed(&symbols, 3)?);
        header(scheme, batch, 3, 0, payload)
    })?;
    let expected = header(scheme, batch, 3, 0, BitStream::new())?;
    let per_client = par::try_map_indexed(n, |i| {
        let m = &messages[i];
        check_header(m, &expected)?;
        let (s, rest) = split_scale(&m.payload)?;
        Ok::<_, Error>(
            bitcodec::unpack_fixed(&rest, 3, d)?
                .iter()
                .map(|&sym| (sym as f64 - 1.0) * s)
                .collect(),
        )
    })?;
    VectorQuantReport::assemble(batch, messages, per_client, 0)
}

/// Splits a payload into its leading 64-bit float and the remaining bits.
fn split_scale(payload: &BitStream) -> Result<(f64, BitStream)> {
    let mut r = payload.reader();
    let s = f64::from_bits(r.read_bits(64)?);
    let mut rest = BitStream::with_capacity(r.remaining() as usize);
    while r.remaining() > 0 {
        rest.push_bit(r.read_bit()?);
    }
    Ok((s, rest))
}

/// Sign pattern of `y` (zero maps to `+`) and the scale `||y||_1 / len`
/// minimizing `||y - scale * signs||_2`.
pub fn sign_scale(y: &[f64]) -> (Vec<bool>, f64) {
    let signs = y.iter().map(|&v| v >= 0.0).collect();
    let scale = y.iter().map(|v| v.abs()).sum::<f64>() / y.len() as f64;
    (signs, scale)
}

/// Rotate, keep only the signs, and send one scale per client.
/// A simplified stand-in for Structured DRIVE; it is biased.
pub fn rotate_sign_baseline(batch: &VectorBatch, seed: MasterSeed) -> Result<VectorQuantReport> {
    let (n, d) = (batch.n(), batch.d());
    let scheme = SchemeId::RotateSign;
    let spec = RotationSpec::from_seed(seed, d)?;
    let p = spec.padded_dim();
    let seed = seed.0;
    let messages = par::try_map_indexed(n, |i| {
        let y = hadamard_rotate(batch.row(i), &spec, Direction::Forward)?;
        let (signs, scale) = sign_scale(&y);
        let mut payload = BitStream::with_capacity(64 + p);
        payload.push_bits(scale.to_bits(), 64);
        signs.iter().for_each(|&b| payload.push_bit(b));
        header(scheme, batch, 2, seed, payload)
    })?;
    let expected = header(scheme, batch, 2, seed, BitStream::new())?;
    let per_client = par::try_map_indexed(n, |i| {
        let m = &messages[i];
        check_header(m, &expected)?;
        let (scale, rest) = split_scale(&m.payload)?;
        if rest.len() != p as u64 {
            return Err(Error::invalid("sign payload has the wrong length"));
        }
        let z: Vec<f64> = (0..p as u64)
            .map(|b| if rest.bit(b) { scale } else { -scale })
            .collect();
        let mut x = hadamard_rotate(&z, &spec, Direction::Inverse)?;
        x.truncate(d);
        Ok(x)
    })?;
    VectorQuantReport::assemble(batch, messages, per_client, 0)
}
