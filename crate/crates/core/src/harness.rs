//! Distributed mean estimation simulator.
//!
//! [`run_scheme`] runs one quantization round end to end: build the shared
//! randomness from a seed, encode every client into a wire message, decode
//! at the server, average. [`run_dme`] repeats that over Monte-Carlo trials
//! and reports MSE, squared bias and bit cost. Trial `t` uses the seed
//! `derive_seed(seed, Trial, t)`, so results do not depend on scheduling.
//!
//! Also here: synthetic and lower-bound dataset generators, parameter
//! sweeps, scalar Monte-Carlo helpers and the closed-form error bounds.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par;
use crate::randomness::{derive_seed, stream_rng, MasterSeed, RandomnessContext, Stream};
use crate::scalar_quant::{independent_sq, k_level_cq, one_bit_cq, LevelGrid, ScalarBatch};
use crate::vector_quant::{
    correlated_coordinatewise, entropy_cq, independent_vector_sq, padded_dim, rotate_sign_baseline, ternary_quantize,
    vector_concentration, walsh_hadamard_cq, Coding, VectorBatch, VectorQuantReport,
};
use crate::{Error, Result};

/// Quantization scheme identifier; also the scheme byte of wire messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SchemeId {
    #[serde(rename = "correlated-1bit")]
    Correlated1Bit,
    #[serde(rename = "correlated-klevel")]
    CorrelatedKLevel,
    #[serde(rename = "entropy-cq")]
    EntropyCq,
    #[serde(rename = "hadamard-cq")]
    HadamardCq,
    #[serde(rename = "independent")]
    Independent,
    #[serde(rename = "independent-rotation")]
    IndependentRotation,
    #[serde(rename = "terngrad")]
    TernGrad,
    #[serde(rename = "rotate-sign")]
    RotateSign,
}

impl SchemeId {
    pub const ALL: [SchemeId; 8] = [
        SchemeId::Correlated1Bit,
        SchemeId::CorrelatedKLevel,
        SchemeId::EntropyCq,
        SchemeId::HadamardCq,
        SchemeId::Independent,
        SchemeId::IndependentRotation,
        SchemeId::TernGrad,
        SchemeId::RotateSign,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Correlated1Bit => "correlated-1bit",
            SchemeId::CorrelatedKLevel => "correlated-klevel",
            SchemeId::EntropyCq => "entropy-cq",
            SchemeId::HadamardCq => "hadamard-cq",
            SchemeId::Independent => "independent",
            SchemeId::IndependentRotation => "independent-rotation",
            SchemeId::TernGrad => "terngrad",
            SchemeId::RotateSign => "rotate-sign",
        }
    }

    pub fn wire_id(self) -> u8 {
        match self {
            SchemeId::Correlated1Bit => 1,
            SchemeId::CorrelatedKLevel => 2,
            SchemeId::EntropyCq => 3,
            SchemeId::HadamardCq => 4,
            SchemeId::Independent => 5,
            SchemeId::IndependentRotation => 6,
            SchemeId::TernGrad => 7,
            SchemeId::RotateSign => 8,
        }
    }

    pub fn from_wire(id: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.wire_id() == id)
    }

    /// Whether the scheme uses the shared permutation randomness.
    pub fn is_correlated(self) -> bool {
        matches!(
            self,
            SchemeId::Correlated1Bit | SchemeId::CorrelatedKLevel | SchemeId::EntropyCq | SchemeId::HadamardCq
        )
    }

    /// Whether the scheme is unbiased whenever no clipping happens.
    pub fn is_unbiased(self) -> bool {
        self != SchemeId::RotateSign
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|id| id.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|id| id.name()).collect();
            Error::invalid(format!("unknown scheme '{s}', expected one of: {}", names.join(", ")))
        })
    }
}

/// One quantization round of `scheme` on `batch`, with every random choice
/// derived from `seed`.
///
/// `correlated-1bit` requires `k = 2`; `terngrad` and `rotate-sign` ignore
/// `k`. Coordinate-wise schemes use the batch's declared coordinate range,
/// except `entropy-cq`, which always uses `[-R, R]`.
pub fn run_scheme(batch: &VectorBatch, scheme: SchemeId, k: usize, seed: MasterSeed) -> Result<VectorQuantReport> {
    let needs_k = !matches!(scheme, SchemeId::TernGrad | SchemeId::RotateSign);
    if needs_k && k < 2 {
        return Err(Error::invalid(format!("k must be at least 2, got {k}")));
    }
    if scheme == SchemeId::Correlated1Bit && k != 2 {
        return Err(Error::invalid(format!("correlated-1bit needs k = 2, got {k}")));
    }
    let (n, d) = (batch.n(), batch.d());
    match scheme {
        SchemeId::Correlated1Bit | SchemeId::CorrelatedKLevel => {
            let ctx = RandomnessContext::build(seed, n, d, k)?;
            correlated_coordinatewise(batch, &ctx, batch.coordinate_range(), Coding::Fixed, scheme)
        }
        SchemeId::EntropyCq => {
            let ctx = RandomnessContext::build(seed, n, d, k)?;
            entropy_cq(batch, &ctx, k)
        }
        SchemeId::HadamardCq => {
            let ctx = RandomnessContext::build(seed, n, padded_dim(d), k)?;
            walsh_hadamard_cq(batch, &ctx, k)
        }
        SchemeId::Independent | SchemeId::IndependentRotation => {
            let mut rng = stream_rng(seed, Stream::Private, 0);
            independent_vector_sq(batch, k, scheme == SchemeId::IndependentRotation, &mut rng)
        }
        SchemeId::TernGrad => ternary_quantize(batch, &mut stream_rng(seed, Stream::Private, 0)),
        SchemeId::RotateSign => rotate_sign_baseline(batch, seed),
    }
}

/// Settings of a Monte-Carlo mean-estimation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DmeConfig {
    pub scheme: SchemeId,
    pub k: usize,
    pub trials: usize,
    pub seed: MasterSeed,
}

/// Summary row of a Monte-Carlo run; one CSV line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scheme: SchemeId,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub sigma_md: f64,
    pub trials: usize,
    pub mse: f64,
    pub rmse: f64,
    pub bias_sq: f64,
    pub bits_per_client: f64,
    /// Standard error of `mse`.
    pub stderr: f64,
}

/// Full result of [`run_dme`].
#[derive(Debug, Clone, PartialEq)]
pub struct DmeOutcome {
    pub report: TrialReport,
    /// Mean over trials of `||x_hat - mean(x_hat)||^2`.
    pub variance: f64,
    pub true_mean: Vec<f64>,
    pub mean_estimate: Vec<f64>,
    /// Standard error of each coordinate of `mean_estimate`.
    pub coordinate_stderr: Vec<f64>,
    pub squared_errors: Vec<f64>,
    pub clip_events: usize,
}

const TRIAL_CHUNK: usize = 1024;

/// Repeats [`run_scheme`] for `cfg.trials` independent trials on a fixed batch.
pub fn run_dme(batch: &VectorBatch, cfg: &DmeConfig) -> Result<DmeOutcome> {
    if cfg.trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let d = batch.d();
    let truth = batch.mean();
    let mut count = 0usize;
    let mut mean_err = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    let mut squared_errors = Vec::with_capacity(cfg.trials);
    let mut bits = 0.0;
    let mut clip_events = 0;
    for start in (0..cfg.trials).step_by(TRIAL_CHUNK) {
        let len = TRIAL_CHUNK.min(cfg.trials - start);
        let chunk = par::try_map_indexed(len, |t| {
            let seed = MasterSeed(derive_seed(cfg.seed, Stream::Trial, (start + t) as u64));
            let r = run_scheme(batch, cfg.scheme, cfg.k, seed)?;
            let err: Vec<f64> = r.estimate.iter().zip(&truth).map(|(a, b)| a - b).collect();
            Ok::<_, Error>((err, r.mean_bits_per_client(), r.clip_events))
        })?;
        for (err, b, clips) in chunk {
            count += 1;
            squared_errors.push(err.iter().map(|e| e * e).sum());
            for j in 0..d {
                let delta = err[j] - mean_err[j];
                mean_err[j] += delta / count as f64;
                m2[j] += delta * (err[j] - mean_err[j]);
            }
            bits += b;
            clip_events += clips;
        }
    }
    let t = cfg.trials as f64;
    let mse = squared_errors.iter().sum::<f64>() / t;
    let bias_sq = mean_err.iter().map(|e| e * e).sum();
    let variance = m2.iter().sum::<f64>() / t;
    let coordinate_stderr = m2
        .iter()
        .map(|&v| {
            if cfg.trials > 1 {
                (v / (t - 1.0)).sqrt() / t.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let report = TrialReport {
        scheme: cfg.scheme,
        n: batch.n(),
        d,
        k: cfg.k,
        sigma_md: vector_concentration(batch)?,
        trials: cfg.trials,
        mse,
        rmse: mse.sqrt(),
        bias_sq,
        bits_per_client: bits / t,
        stderr: stderr_of_mean(&squared_errors),
    };
    Ok(DmeOutcome {
        report,
        variance,
        mean_estimate: truth.iter().zip(&mean_err).map(|(a, e)| a + e).collect(),
        true_mean: truth,
        coordinate_stderr,
        squared_errors,
        clip_events,
    })
}

/// Generates the batch from `spec` with `cfg.seed` and runs [`run_dme`].
/// The reported `sigma_md` is the generator target.
pub fn run_dme_synthetic(spec: &SyntheticSpec, cfg: &DmeConfig) -> Result<DmeOutcome> {
    let batch = spec.generate(cfg.seed)?;
    let mut out = run_dme(&batch, cfg)?;
    out.report.sigma_md = spec.sigma_md;
    Ok(out)
}

/// Sample standard error of the mean; zero for fewer than two values.
pub fn stderr_of_mean(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    (var / m as f64).sqrt()
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "scheme",
    "n",
    "d",
    "k",
    "sigma_md",
    "trials",
    "mse",
    "rmse",
    "bias_sq",
    "bits_per_client",
    "stderr",
];

pub fn write_reports<W: Write>(out: W, reports: &[TrialReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if reports.is_empty() {
        w.write_record(REPORT_COLUMNS).map_err(csv_error)?;
    }
    for r in reports {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports<R: Read>(input: R) -> Result<Vec<TrialReport>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_error)?.clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(Error::Dataset {
            row: 1,
            column: 1,
            message: format!("expected header {}", REPORT_COLUMNS.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_error)).collect()
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let (row, column) = match e.position() {
        Some(p) => (p.line() as usize, 0),
        None => (0, 0),
    };
    match e.kind() {
        csv::ErrorKind::Io(io) => Error::Io(io.to_string()),
        csv::ErrorKind::Deserialize { err, .. } => Error::Dataset {
            row,
            column: err.field().map_or(0, |f| f as usize + 1),
            message: err.kind().to_string(),
        },
        _ => Error::Dataset {
            row,
            column,
            message: e.to_string(),
        },
    }
}

/// Synthetic vector data families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GeneratorKind {
    /// `mu(j) ~ U[0, 1]` shared by all clients.
    UniformMean,
    /// `mu` zero except on a random `sparsity` fraction of coordinates,
    /// where it is `+-magnitude`.
    SparseMean { sparsity: f64, magnitude: f64 },
}

/// Client `i`, coordinate `j`: `mu(j) + U` with `U ~ U[-4 sigma, 4 sigma]`
/// drawn independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub kind: GeneratorKind,
    pub n: usize,
    pub d: usize,
    pub sigma_md: f64,
}

impl SyntheticSpec {
    pub fn uniform_mean(n: usize, d: usize, sigma_md: f64) -> Self {
        Self {
            kind: GeneratorKind::UniformMean,
            n,
            d,
            sigma_md,
        }
    }

    pub fn sparse_mean(n: usize, d: usize, sigma_md: f64) -> Self {
        Self {
            kind: GeneratorKind::SparseMean {
                sparsity: 0.01,
                magnitude: 1.0,
            },
            n,
            d,
            sigma_md,
        }
    }

    pub fn generate(&self, seed: MasterSeed) -> Result<VectorBatch> {
        match self.kind {
            GeneratorKind::UniformMean => gen_uniform_mean(self.n, self.d, self.sigma_md, seed),
            GeneratorKind::SparseMean { sparsity, magnitude } => {
                gen_sparse_mean(self.n, self.d, self.sigma_md, sparsity, magnitude, seed)
            }
        }
    }
}

fn check_shape(n: usize, d: usize, sigma_md: f64) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("n and d must be at least 1"));
    }
    if !(sigma_md.is_finite() && sigma_md >= 0.0) {
        return Err(Error::invalid(format!("sigma_md {sigma_md} must be finite and >= 0")));
    }
    Ok(())
}

fn add_noise(mu: &[f64], n: usize, sigma_md: f64, seed: MasterSeed) -> Vec<f64> {
    let mut rng = stream_rng(seed, Stream::Data, 1);
    let half = 4.0 * sigma_md;
    let mut data = Vec::with_capacity(n * mu.len());
    for _ in 0..n {
        for &m in mu {
            let u: f64 = rng.random();
            data.push(m + half * (2.0 * u - 1.0));
        }
    }
    data
}

/// Uniform-mean family. Declares the coordinate range
/// `[-4 sigma, 1 + 4 sigma]`; the radius is the largest client norm.
pub fn gen_uniform_mean(n: usize, d: usize, sigma_md: f64, seed: MasterSeed) -> Result<VectorBatch> {
    check_shape(n, d, sigma_md)?;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mu: Vec<f64> = (0..d).map(|_| rng.random()).collect();
    let data = add_noise(&mu, n, sigma_md, seed);
    let half = 4.0 * sigma_md;
    VectorBatch::with_tight_radius(data, n, d)?.with_coordinate_bounds(-half, 1.0 + half)
}

/// Sparse-mean family. Only the ball radius is declared.
pub fn gen_sparse_mean(
    n: usize,
    d: usize,
    sigma_md: f64,
    sparsity: f64,
    magnitude: f64,
    seed: MasterSeed,
) -> Result<VectorBatch> {
    check_shape(n, d, sigma_md)?;
    if !(sparsity > 0.0 && sparsity <= 1.0) {
        return Err(Error::invalid(format!("sparsity {sparsity} must lie in (0, 1]")));
    }
    if !magnitude.is_finite() {
        return Err(Error::invalid("magnitude must be finite"));
    }
    let nonzero = ((sparsity * d as f64).round() as usize).clamp(1, d);
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut mu = vec![0.0; d];
    for j in index::sample(&mut rng, d, nonzero) {
        mu[j] = if rng.random::<bool>() { magnitude } else { -magnitude };
    }
    VectorBatch::with_tight_radius(add_noise(&mu, n, sigma_md, seed), n, d)
}

/// Scalars on `[0, 1]`: a random center plus uniform noise of half-width
/// `spread`, clamped to the interval.
pub fn gen_concentrated_scalar(n: usize, spread: f64, seed: MasterSeed) -> Result<ScalarBatch> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::invalid("spread must be finite and >= 0"));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let center: f64 = rng.random();
    let values = (0..n)
        .map(|_| (center + spread * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0))
        .collect();
    ScalarBatch::new(values, 0.0, 1.0)
}

const MAX_REJECTIONS: usize = 100_000;

/// Two-sided one-bit hard instance on `[0, r]`: masses `sigma/2r` at `0`
/// and `r`, the rest at `r/2`, resampled until fewer than `4 n sigma / r`
/// points sit at the endpoints.
pub fn gen_lower_bound_1bit(n: usize, r: f64, sigma_md: f64, seed: MasterSeed) -> Result<ScalarBatch> {
    if n == 0 || !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid("need n >= 1 and a finite r > 0"));
    }
    if !(sigma_md >= 0.0 && sigma_md < r / 2.0) {
        return Err(Error::invalid(format!("sigma_md {sigma_md} must lie in [0, r/2)")));
    }
    if sigma_md == 0.0 {
        return ScalarBatch::new(vec![r / 2.0; n], 0.0, r);
    }
    let p_end = sigma_md / (2.0 * r);
    let limit = 4.0 * n as f64 * sigma_md / r;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    for _ in 0..MAX_REJECTIONS {
        let values: Vec<f64> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if u < p_end {
                    0.0
                } else if u < 2.0 * p_end {
                    r
                } else {
                    r / 2.0
                }
            })
            .collect();
        let ends = values.iter().filter(|&&v| v != r / 2.0).count();
        if (ends as f64) < limit {
            return ScalarBatch::new(values, 0.0, r);
        }
    }
    Err(Error::DegenerateInput("rejection sampling did not terminate".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerBoundVariant {
    Mixture,
    Constant,
}

/// `k`-level hard instances on `[0, r]`.
///
/// Mixture: pick `j` uniformly in `1..=2k`, then draw `n` points equal to
/// `(j-1) r / 2k` with probability `k sigma / r` and `j r / 2k` otherwise.
/// Constant: pick one of the `2nk` constant datasets of [`constant_datasets`].
pub fn gen_lower_bound_klevel(
    n: usize,
    r: f64,
    k: usize,
    sigma_md: f64,
    variant: LowerBoundVariant,
    seed: MasterSeed,
) -> Result<ScalarBatch> {
    if n == 0 || k < 2 || !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid("need n >= 1, k >= 2 and a finite r > 0"));
    }
    let kf = k as f64;
    if !(sigma_md >= 0.0 && sigma_md < r / (2.0 * kf)) {
        return Err(Error::invalid(format!("sigma_md {sigma_md} must lie in [0, r/2k)")));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0);
    match variant {
        LowerBoundVariant::Mixture => {
            let j = rng.random_range(1..=2 * k) as f64;
            let p_low = kf * sigma_md / r;
            let gap = r / (2.0 * kf);
            let values = (0..n)
                .map(|_| {
                    if rng.random::<f64>() < p_low {
                        (j - 1.0) * gap
                    } else {
                        j * gap
                    }
                })
                .collect();
            ScalarBatch::new(values, 0.0, r)
        }
        LowerBoundVariant::Constant => {
            let j = rng.random_range(0..2 * n * k);
            ScalarBatch::new(vec![constant_value(j, n, k, r); n], 0.0, r)
        }
    }
}

fn constant_value(j: usize, n: usize, k: usize, r: f64) -> f64 {
    j as f64 * r / (2 * n * k) as f64
}

/// The `2nk` datasets where every client holds `(j-1) r / 2nk`.
pub fn constant_datasets(n: usize, r: f64, k: usize) -> Result<Vec<ScalarBatch>> {
    if n == 0 || k < 2 || !(r.is_finite() && r > 0.0) {
        return Err(Error::invalid("need n >= 1, k >= 2 and a finite r > 0"));
    }
    (0..2 * n * k)
        .map(|j| ScalarBatch::new(vec![constant_value(j, n, k, r); n], 0.0, r))
        .collect()
}

/// Scalar quantizers for the one-dimensional Monte-Carlo helper.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarScheme {
    CorrelatedOneBit,
    CorrelatedKLevel,
    Independent,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMse {
    pub trials: usize,
    pub mse: f64,
    /// Standard error of `mse`.
    pub stderr: f64,
    pub mean_estimate: f64,
    /// Standard error of `mean_estimate`.
    pub estimate_stderr: f64,
}

const SCALAR_BLOCK: usize = 1 << 17;

/// Monte-Carlo MSE of a scalar quantizer on a fixed batch.
///
/// Trials are processed in blocks. A block of `m` correlated trials shares
/// one context with `m` coordinates; coordinate `j` carries trial `j` of
/// the block, since coordinates have independent randomness.
pub fn scalar_mse(
    batch: &ScalarBatch,
    scheme: ScalarScheme,
    k: usize,
    trials: usize,
    seed: MasterSeed,
) -> Result<ScalarMse> {
    if trials == 0 {
        return Err(Error::invalid("trials must be at least 1"));
    }
    let n = batch.len();
    let k = if scheme == ScalarScheme::CorrelatedOneBit { 2 } else { k };
    if k < 2 {
        return Err(Error::invalid("k must be at least 2"));
    }
    let block = (SCALAR_BLOCK / n).clamp(1, trials);
    let blocks = trials.div_ceil(block);
    let truth = batch.mean();
    let estimates = par::try_map_indexed(blocks, |b| {
        let m = block.min(trials - b * block);
        let block_seed = MasterSeed(derive_seed(seed, Stream::Trial, b as u64));
        match scheme {
            ScalarScheme::Independent => {
                let mut rng = stream_rng(block_seed, Stream::Private, 0);
                (0..m)
                    .map(|_| independent_sq(batch, k, &mut rng).map(|o| o.estimate))
                    .collect::<Result<Vec<f64>>>()
            }
            ScalarScheme::CorrelatedOneBit | ScalarScheme::CorrelatedKLevel => {
                let ctx = RandomnessContext::build(block_seed, n, m, k)?;
                (0..m)
                    .map(|j| {
                        if k == 2 {
                            one_bit_cq(batch, &ctx, j)
                        } else {
                            k_level_cq(batch, &ctx, &LevelGrid::from_context(&ctx, j)?, j)
                        }
                        .map(|o| o.estimate)
                    })
                    .collect()
            }
        }
    })?;
    let estimates: Vec<f64> = estimates.concat();
    let sq: Vec<f64> = estimates.iter().map(|e| (e - truth) * (e - truth)).collect();
    let t = trials as f64;
    Ok(ScalarMse {
        trials,
        mse: sq.iter().sum::<f64>() / t,
        stderr: stderr_of_mean(&sq),
        mean_estimate: estimates.iter().sum::<f64>() / t,
        estimate_stderr: stderr_of_mean(&estimates),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SigmaMd,
    K,
    N,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma_md" => Ok(SweepAxis::SigmaMd),
            "k" => Ok(SweepAxis::K),
            "n" => Ok(SweepAxis::N),
            _ => Err(Error::invalid(format!(
                "unknown sweep axis '{s}', expected sigma_md, k or n"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::SigmaMd => "sigma_md",
            SweepAxis::K => "k",
            SweepAxis::N => "n",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub base: SyntheticSpec,
    pub k: usize,
    pub schemes: Vec<SchemeId>,
    pub trials: usize,
    pub seed: MasterSeed,
}

fn grid_count(v: f64, axis: SweepAxis, min: usize) -> Result<usize> {
    if v.fract() != 0.0 || v < min as f64 || !v.is_finite() {
        return Err(Error::invalid(format!(
            "{axis} grid value {v} must be an integer >= {min}"
        )));
    }
    Ok(v as usize)
}

/// Runs every scheme at every grid point. All schemes and grid points share
/// `cfg.seed`, so data and trial randomness are paired across them.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<TrialReport>> {
    if cfg.grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    if cfg.schemes.is_empty() {
        return Err(Error::invalid("no schemes to sweep"));
    }
    let mut reports = Vec::with_capacity(cfg.grid.len() * cfg.schemes.len());
    for &v in &cfg.grid {
        let mut spec = cfg.base;
        let mut k = cfg.k;
        match cfg.axis {
            SweepAxis::SigmaMd => spec.sigma_md = v,
            SweepAxis::K => k = grid_count(v, cfg.axis, 2)?,
            SweepAxis::N => spec.n = grid_count(v, cfg.axis, 1)?,
        }
        let batch = spec.generate(cfg.seed)?;
        for &scheme in &cfg.schemes {
            let dme = DmeConfig {
                scheme,
                k,
                trials: cfg.trials,
                seed: cfg.seed,
            };
            let mut out = run_dme(&batch, &dme)?;
            out.report.sigma_md = spec.sigma_md;
            reports.push(out.report);
        }
    }
    Ok(reports)
}

/// Closed-form error bounds and two-client error formulas.
pub mod bounds {
    /// Upper bound on the MSE of one-bit correlated quantization.
    pub fn one_bit_upper(sigma_md: f64, width: f64, n: usize) -> f64 {
        let n = n as f64;
        3.0 * sigma_md * width / n + 12.0 * width * width / (n * n)
    }

    /// Upper bound on the MSE of `k`-level correlated quantization.
    pub fn k_level_upper(sigma_md: f64, width: f64, n: usize, k: usize) -> f64 {
        let (n, k) = (n as f64, k as f64);
        12.0 / n * (sigma_md * width / k).min(width * width / (k * k)) + 48.0 * width * width / (n * n * k * k)
    }

    /// Lower bound for any one-bit interval quantizer on the hard instance.
    pub fn one_bit_floor(sigma_md: f64, width: f64, n: usize) -> f64 {
        sigma_md * width / (64.0 * n as f64)
    }

    /// Lower bound averaged over the `2nk` constant datasets.
    pub fn k_level_floor(width: f64, n: usize, k: usize) -> f64 {
        let (n, k) = (n as f64, k as f64);
        width * width / (64.0 * n * n * k * k)
    }

    /// MSE of independent one-bit rounding for two clients both at `x`.
    pub fn independent_two_client(x: f64) -> f64 {
        x * (1.0 - x) / 2.0
    }

    /// MSE of correlated one-bit rounding for two clients both at `x`.
    pub fn correlated_two_client(x: f64) -> f64 {
        x / 2.0 + (x - 0.5).max(0.0) - x * x
    }

    /// Squared-bias bound of the rotated pipeline caused by clipping.
    pub fn hadamard_bias_sq(radius: f64, d: usize, n: usize) -> f64 {
        let (d, n) = (d as f64, n as f64);
        18.0 * radius * radius * (d * n).ln() / (d.powi(3) * n.powi(4))
    }

    /// Average-iterate suboptimality bound of projected gradient descent
    /// with exact gradients and step `1 / (H + 1/eta)`.
    pub fn sgd_exact(smoothness: f64, eta: f64, radius: f64, rounds: usize) -> f64 {
        (smoothness + 1.0 / eta) * radius * radius / rounds as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    Upper,
    Lower,
}

/// One measured-versus-closed-form comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    pub name: String,
    pub kind: BoundKind,
    pub measured: f64,
    pub bound: f64,
}

impl BoundCheck {
    pub fn passed(&self) -> bool {
        match self.kind {
            BoundKind::Upper => self.measured <= self.bound,
            BoundKind::Lower => self.measured >= self.bound,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct BoundRow {
    name: String,
    kind: BoundKind,
    measured: f64,
    bound: f64,
    passed: bool,
}

pub const BOUND_COLUMNS: [&str; 5] = ["name", "kind", "measured", "bound", "passed"];

pub fn write_bound_checks<W: Write>(out: W, checks: &[BoundCheck]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if checks.is_empty() {
        w.write_record(BOUND_COLUMNS).map_err(csv_error)?;
    }
    for c in checks {
        w.serialize(BoundRow {
            name: c.name.clone(),
            kind: c.kind,
            measured: c.measured,
            bound: c.bound,
            passed: c.passed(),
        })
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// The `passed` column is recomputed from the numbers, not trusted.
pub fn read_bound_checks<R: Read>(input: R) -> Result<Vec<BoundCheck>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize::<BoundRow>()
        .map(|row| {
            let row = row.map_err(csv_error)?;
            Ok(BoundCheck {
                name: row.name,
                kind: row.kind,
                measured: row.measured,
                bound: row.bound,
            })
        })
        .collect()
}

/// Envelope and floor checks on a small family of scalar instances.
pub fn bounds_check(trials: usize, seed: MasterSeed) -> Result<Vec<BoundCheck>> {
    let mut checks = Vec::new();
    for (idx, &(n, spread)) in [(10, 0.05), (100, 0.01), (100, 0.3), (1000, 0.02)].iter().enumerate() {
        let s = MasterSeed(derive_seed(seed, Stream::Data, idx as u64));
        let batch = gen_concentrated_scalar(n, spread, s)?;
        let sigma = crate::scalar_quant::concentration_stats(&batch)?.sigma_md;
        let one = scalar_mse(&batch, ScalarScheme::CorrelatedOneBit, 2, trials, s)?;
        checks.push(BoundCheck {
            name: format!("one-bit envelope n={n} sigma_md={sigma:.4}"),
            kind: BoundKind::Upper,
            measured: one.mse,
            bound: bounds::one_bit_upper(sigma, batch.width(), n),
        });
        for k in [3, 8] {
            let m = scalar_mse(&batch, ScalarScheme::CorrelatedKLevel, k, trials, s)?;
            checks.push(BoundCheck {
                name: format!("k-level envelope n={n} k={k} sigma_md={sigma:.4}"),
                kind: BoundKind::Upper,
                measured: m.mse,
                bound: bounds::k_level_upper(sigma, batch.width(), n, k),
            });
        }
    }
    let (n, r) = (1000, 1.0);
    let sigma = r / 100.0;
    let hard = gen_lower_bound_1bit(n, r, sigma, seed)?;
    for (label, scheme) in [
        ("correlated", ScalarScheme::CorrelatedOneBit),
        ("independent", ScalarScheme::Independent),
    ] {
        let m = scalar_mse(&hard, scheme, 2, trials, seed)?;
        checks.push(BoundCheck {
            name: format!("one-bit floor {label} n={n}"),
            kind: BoundKind::Lower,
            measured: m.mse,
            bound: bounds::one_bit_floor(sigma, r, n),
        });
    }
    let (n, k) = (10, 4);
    let datasets = constant_datasets(n, r, k)?;
    for (label, scheme) in [
        ("correlated", ScalarScheme::CorrelatedKLevel),
        ("independent", ScalarScheme::Independent),
    ] {
        let mut total = 0.0;
        for (j, b) in datasets.iter().enumerate() {
            let s = MasterSeed(derive_seed(seed, Stream::Trial, j as u64));
            total += scalar_mse(b, scheme, k, trials.div_ceil(10).max(1), s)?.mse;
        }
        checks.push(BoundCheck {
            name: format!("k-level floor {label} n={n} k={k}"),
            kind: BoundKind::Lower,
            measured: total / datasets.len() as f64,
            bound: bounds::k_level_floor(r, n, k),
        });
    }
    Ok(checks)
}
