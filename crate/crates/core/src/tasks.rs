//! Distributed tasks built on the mean-estimation primitive: Lloyd's
//! k-means, power iteration, projected SGD and federated averaging.
//!
//! Every round, each client computes a local vector, the vectors are
//! quantized with the configured scheme and the server averages the
//! decoded vectors. With `scheme = None` the server sees exact vectors.
//!
//! Quantized rounds use a side channel: each client also sends the min,
//! max and Euclidean norm of its vector as three raw `f64`s
//! ([`SIDE_CHANNEL_BITS`]). The server broadcasts the overall min/max as
//! the per-coordinate range and the largest norm as the radius.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::harness::{csv_error, run_scheme, SchemeId};
use crate::par;
use crate::randomness::{derive_seed, stream_rng, MasterSeed, Stream};
use crate::vector_quant::{l2_norm, VectorBatch};
use crate::{Error, Result};

/// Bits of the per-client min/max/norm side channel.
pub const SIDE_CHANNEL_BITS: u64 = 3 * 64;

/// Client data: `n` non-empty shards of `d`-dimensional points, with
/// optional integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedDataset {
    d: usize,
    shards: Vec<Shard>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    points: Vec<f64>,
    labels: Option<Vec<usize>>,
}

impl Shard {
    pub fn len(&self, d: usize) -> usize {
        self.points.len() / d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }
}

impl ShardedDataset {
    /// `shards[i]` holds client `i`'s points; `labels`, when given, must
    /// match shard sizes.
    pub fn new(shards: Vec<Vec<Vec<f64>>>, labels: Option<Vec<Vec<usize>>>) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::invalid("dataset needs at least one client"));
        }
        let d = shards.iter().flatten().next().map_or(0, Vec::len);
        if d == 0 {
            return Err(Error::invalid("points must have at least one feature"));
        }
        if let Some(l) = &labels {
            if l.len() != shards.len() || l.iter().zip(&shards).any(|(a, b)| a.len() != b.len()) {
                return Err(Error::invalid("labels do not match shard sizes"));
            }
        }
        let mut out = Vec::with_capacity(shards.len());
        for (i, shard) in shards.into_iter().enumerate() {
            if shard.is_empty() {
                return Err(Error::invalid(format!("client {i} has no points")));
            }
            if shard.iter().any(|p| p.len() != d) {
                return Err(Error::invalid(format!("client {i} has points of the wrong dimension")));
            }
            if shard.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("client {i} has non-finite values")));
            }
            out.push(Shard {
                points: shard.concat(),
                labels: labels.as_ref().map(|l| l[i].clone()),
            });
        }
        Ok(Self { d, shards: out })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn shard(&self, i: usize) -> &Shard {
        &self.shards[i]
    }

    pub fn total_points(&self) -> usize {
        self.shards.iter().map(|s| s.len(self.d)).sum()
    }

    pub fn has_labels(&self) -> bool {
        self.shards.iter().all(|s| s.labels.is_some())
    }

    /// All points in client order.
    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.shards.iter().flat_map(|s| s.points.chunks(self.d))
    }

    /// Clients `0..at` and `at..`.
    pub fn split_clients(mut self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.shards.len() {
            return Err(Error::invalid(format!(
                "split point {at} must lie in 1..{}",
                self.shards.len()
            )));
        }
        let tail = Self {
            d: self.d,
            shards: self.shards.split_off(at),
        };
        Ok((self, tail))
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.shards.iter().flat_map(|s| s.labels.iter().flatten().copied())
    }

    /// Reads CSV with header `client[,label],x0,x1,...`, or
    /// `label,x0,x1,...` whose rows are dealt round-robin to `clients`
    /// shards. Rows and columns in errors are 1-based; row 1 is the header.
    pub fn from_csv<R: Read>(input: R, clients: usize) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let header = reader.headers().map_err(csv_error)?.clone();
        let names: Vec<&str> = header.iter().collect();
        let has_client = names.first() == Some(&"client");
        let label_col = names.iter().position(|&h| h == "label");
        let skip = usize::from(has_client) + usize::from(label_col.is_some());
        if label_col.is_some_and(|c| c != usize::from(has_client)) {
            return Err(dataset_error(
                1,
                label_col.unwrap() + 1,
                "label must precede the features",
            ));
        }
        let d = names.len().saturating_sub(skip);
        if d == 0 {
            return Err(dataset_error(1, names.len().max(1), "no feature columns"));
        }
        if !has_client && clients == 0 {
            return Err(Error::invalid("clients must be at least 1"));
        }
        let mut shards: BTreeMap<usize, (Vec<Vec<f64>>, Vec<usize>)> = BTreeMap::new();
        for (idx, record) in reader.records().enumerate() {
            let row = idx + 2;
            let record = record.map_err(csv_error)?;
            if record.len() != names.len() {
                return Err(dataset_error(
                    row,
                    record.len().min(names.len()) + 1,
                    &format!("expected {} fields, found {}", names.len(), record.len()),
                ));
            }
            let client = if has_client {
                parse_field::<usize>(&record, row, 0)?
            } else {
                idx % clients
            };
            let label = label_col.map(|c| parse_field::<usize>(&record, row, c)).transpose()?;
            let point = (skip..names.len())
                .map(|c| {
                    let v = parse_field::<f64>(&record, row, c)?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(dataset_error(row, c + 1, "value is not finite"))
                    }
                })
                .collect::<Result<Vec<f64>>>()?;
            let entry = shards.entry(client).or_default();
            entry.0.push(point);
            entry.1.extend(label);
        }
        if shards.is_empty() {
            return Err(dataset_error(2, 1, "dataset has no rows"));
        }
        if has_client {
            let expected = shards.len();
            if let Some((&id, _)) = shards
                .iter()
                .enumerate()
                .find(|(pos, (id, _))| *pos != **id)
                .map(|(_, e)| e)
            {
                return Err(Error::Dataset {
                    row: 0,
                    column: 1,
                    message: format!("client ids must be 0..{expected} without gaps, found {id}"),
                });
            }
        }
        let (points, labels): (Vec<_>, Vec<_>) = shards.into_values().unzip();
        Self::new(points, label_col.map(|_| labels))
    }

    pub fn to_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["client".to_string()];
        if self.has_labels() {
            header.push("label".into());
        }
        header.extend((0..self.d).map(|j| format!("x{j}")));
        w.write_record(&header).map_err(csv_error)?;
        for (i, shard) in self.shards.iter().enumerate() {
            for (p, point) in shard.points.chunks(self.d).enumerate() {
                let mut rec = vec![i.to_string()];
                if let Some(l) = &shard.labels {
                    rec.push(l[p].to_string());
                }
                rec.extend(point.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_error)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn dataset_error(row: usize, column: usize, message: &str) -> Error {
    Error::Dataset {
        row,
        column,
        message: message.to_string(),
    }
}

fn parse_field<T: std::str::FromStr>(record: &csv::StringRecord, row: usize, col: usize) -> Result<T> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse()
        .map_err(|_| dataset_error(row, col + 1, &format!("cannot parse '{raw}'")))
}

/// Gaussian clusters in `[0, 1]^d`, labeled by cluster.
///
/// Cluster `c` is centered at `0.5 + a_c * s_c` where `s_c` is a random
/// `+-0.25` pattern, `a_0 = 1` and `a_c = 0.5` otherwise, so the leading
/// principal direction is well separated. Points add `N(0, noise^2)` per
/// coordinate and are clamped to `[0, 1]`. Each client draws its points
/// from all clusters uniformly.
pub fn gaussian_clusters(
    clients: usize,
    points_per_client: usize,
    d: usize,
    classes: usize,
    noise: f64,
    seed: MasterSeed,
) -> Result<ShardedDataset> {
    if clients == 0 || points_per_client == 0 || d == 0 || classes == 0 {
        return Err(Error::invalid(
            "clients, points, dimension and classes must be positive",
        ));
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let a = if c == 0 { 1.0 } else { 0.5 };
            (0..d)
                .map(|_| 0.5 + a * if rng.random::<bool>() { 0.25 } else { -0.25 })
                .collect()
        })
        .collect();
    let mut shards = Vec::with_capacity(clients);
    let mut labels = Vec::with_capacity(clients);
    for i in 0..clients {
        let mut crng = stream_rng(seed, Stream::Data, 1 + i as u64);
        let mut pts = Vec::with_capacity(points_per_client);
        let mut lbl = Vec::with_capacity(points_per_client);
        for _ in 0..points_per_client {
            let c = crng.random_range(0..classes);
            pts.push(
                centers[c]
                    .iter()
                    .map(|m| (m + normal.sample(&mut crng)).clamp(0.0, 1.0))
                    .collect(),
            );
            lbl.push(c);
        }
        shards.push(pts);
        labels.push(lbl);
    }
    ShardedDataset::new(shards, Some(labels))
}

/// Deterministic MNIST-sized stand-in: 10 clusters in `d = 784`.
pub fn mnist_like(clients: usize, points_per_client: usize, seed: MasterSeed) -> Result<ShardedDataset> {
    gaussian_clusters(clients, points_per_client, 784, 10, 0.08, seed)
}

/// Binary logistic-regression data: `x ~ N(0, I / d)`, `P(y = 1) =
/// sigmoid(w_true . x)` with `||w_true|| = signal`.
pub fn logistic_fixture(
    clients: usize,
    points_per_client: usize,
    d: usize,
    signal: f64,
    seed: MasterSeed,
) -> Result<ShardedDataset> {
    if clients == 0 || points_per_client == 0 || d == 0 {
        return Err(Error::invalid("clients, points and dimension must be positive"));
    }
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = stream_rng(seed, Stream::Data, 0);
    let mut w: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
    let norm = l2_norm(&w).max(f64::MIN_POSITIVE);
    w.iter_mut().for_each(|v| *v *= signal / norm);
    let mut shards = Vec::with_capacity(clients);
    let mut labels = Vec::with_capacity(clients);
    for i in 0..clients {
        let mut crng = stream_rng(seed, Stream::Data, 1 + i as u64);
        let mut pts = Vec::with_capacity(points_per_client);
        let mut lbl = Vec::with_capacity(points_per_client);
        for _ in 0..points_per_client {
            let x: Vec<f64> = (0..d).map(|_| normal.sample(&mut crng)).collect();
            let p = sigmoid(dot(&w, &x));
            lbl.push(usize::from(crng.random::<f64>() < p));
            pts.push(x);
        }
        shards.push(pts);
        labels.push(lbl);
    }
    ShardedDataset::new(shards, Some(labels))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Scales `v` onto the ball of radius `radius` if it lies outside; the
/// result satisfies `l2_norm(v) <= radius` exactly.
pub fn clip_to_radius(v: &mut [f64], radius: f64) {
    let norm = l2_norm(v);
    if norm <= radius {
        return;
    }
    let original = v.to_vec();
    let mut scale = radius / norm;
    loop {
        for (o, x) in v.iter_mut().zip(&original) {
            *o = x * scale;
        }
        if l2_norm(v) <= radius {
            return;
        }
        scale = scale.next_down();
    }
}

/// Settings shared by the round-based tasks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskConfig {
    pub rounds: usize,
    /// `None` sends exact vectors.
    pub scheme: Option<SchemeId>,
    pub k: usize,
    pub seed: MasterSeed,
}

impl TaskConfig {
    fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::invalid("rounds must be at least 1"));
        }
        Ok(())
    }
}

/// Per-round metric and uplink cost.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskResult {
    pub metrics: Vec<f64>,
    pub bits_per_client: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TaskRow {
    round: usize,
    metric: f64,
    bits_per_client: f64,
}

impl TaskResult {
    pub fn final_metric(&self) -> f64 {
        self.metrics.last().copied().unwrap_or(f64::NAN)
    }

    pub fn rounds(&self) -> usize {
        self.metrics.len()
    }

    fn push(&mut self, metric: f64, bits: f64) {
        self.metrics.push(metric);
        self.bits_per_client.push(bits);
    }

    /// Columns `round,metric,bits_per_client`; rounds count from 1.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.metrics.is_empty() {
            w.write_record(["round", "metric", "bits_per_client"])
                .map_err(csv_error)?;
        }
        for (t, (&metric, &bits)) in self.metrics.iter().zip(&self.bits_per_client).enumerate() {
            w.serialize(TaskRow {
                round: t + 1,
                metric,
                bits_per_client: bits,
            })
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut out = TaskResult::default();
        for row in r.deserialize::<TaskRow>() {
            let row = row.map_err(csv_error)?;
            out.push(row.metric, row.bits_per_client);
        }
        Ok(out)
    }
}

/// One task run tagged with its scheme (`none` for exact averaging) and
/// repeat index.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRun {
    pub scheme: String,
    pub trial: usize,
    pub result: TaskResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabeledRow {
    scheme: String,
    trial: usize,
    round: usize,
    metric: f64,
    bits_per_client: f64,
}

pub const RUN_COLUMNS: [&str; 5] = ["scheme", "trial", "round", "metric", "bits_per_client"];

/// Long format, one row per run and round.
pub fn write_runs<W: Write>(out: W, runs: &[LabeledRun]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if runs.iter().all(|r| r.result.metrics.is_empty()) {
        w.write_record(RUN_COLUMNS).map_err(csv_error)?;
    }
    for run in runs {
        for (t, (&metric, &bits)) in run.result.metrics.iter().zip(&run.result.bits_per_client).enumerate() {
            w.serialize(LabeledRow {
                scheme: run.scheme.clone(),
                trial: run.trial,
                round: t + 1,
                metric,
                bits_per_client: bits,
            })
            .map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_runs`]; consecutive rows with the same scheme and
/// trial form one run.
pub fn read_runs<R: Read>(input: R) -> Result<Vec<LabeledRun>> {
    let mut r = csv::Reader::from_reader(input);
    let mut runs: Vec<LabeledRun> = Vec::new();
    for row in r.deserialize::<LabeledRow>() {
        let row = row.map_err(csv_error)?;
        match runs.last_mut() {
            Some(run) if run.scheme == row.scheme && run.trial == row.trial => {
                run.result.push(row.metric, row.bits_per_client);
            }
            _ => {
                let mut result = TaskResult::default();
                result.push(row.metric, row.bits_per_client);
                runs.push(LabeledRun {
                    scheme: row.scheme,
                    trial: row.trial,
                    result,
                });
            }
        }
    }
    Ok(runs)
}

/// Server view of one aggregation round.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub per_client: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Message plus side-channel bits, averaged over clients.
    pub bits_per_client: f64,
    pub clip_events: usize,
}

/// Averages one vector per client through the configured quantizer.
///
/// Each client also sends its minimum, maximum and norm, and the server
/// quantizes inside the resulting box; those bits are included.
pub fn aggregate(vectors: &[Vec<f64>], scheme: Option<SchemeId>, k: usize, seed: MasterSeed) -> Result<Aggregate> {
    let (n, d) = shape(vectors);
    let Some(scheme) = scheme else {
        return Ok(exact_aggregate(vectors));
    };
    let flat = vectors.concat();
    let lower = flat.iter().copied().fold(f64::INFINITY, f64::min);
    let upper = flat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut batch = VectorBatch::with_tight_radius(flat, n, d)?;
    if lower < upper {
        batch = batch.with_coordinate_bounds(lower, upper)?;
    }
    let r = run_scheme(&batch, scheme, k, seed)?;
    Ok(Aggregate {
        bits_per_client: r.mean_bits_per_client() + SIDE_CHANNEL_BITS as f64,
        mean: r.estimate,
        per_client: r.per_client,
        clip_events: r.clip_events,
    })
}

/// Like [`aggregate`], for vectors already clipped to the ball of
/// `radius`, which the server knows in advance; no side channel is sent.
pub fn aggregate_in_ball(
    vectors: &[Vec<f64>],
    radius: f64,
    scheme: Option<SchemeId>,
    k: usize,
    seed: MasterSeed,
) -> Result<Aggregate> {
    let (n, d) = shape(vectors);
    let Some(scheme) = scheme else {
        return Ok(exact_aggregate(vectors));
    };
    let batch = VectorBatch::from_flat(vectors.concat(), n, d, radius)?;
    let r = run_scheme(&batch, scheme, k, seed)?;
    Ok(Aggregate {
        bits_per_client: r.mean_bits_per_client(),
        mean: r.estimate,
        per_client: r.per_client,
        clip_events: r.clip_events,
    })
}

fn shape(vectors: &[Vec<f64>]) -> (usize, usize) {
    (vectors.len(), vectors.first().map_or(0, Vec::len))
}

fn exact_aggregate(vectors: &[Vec<f64>]) -> Aggregate {
    let (n, d) = shape(vectors);
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    mean.iter_mut().for_each(|a| *a /= n as f64);
    Aggregate {
        per_client: vectors.to_vec(),
        mean,
        bits_per_client: (64 * d) as f64,
        clip_events: 0,
    }
}

fn round_seed(cfg: &TaskConfig, round: usize) -> MasterSeed {
    MasterSeed(derive_seed(cfg.seed, Stream::Task, round as u64))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(c, m)| (c, sq_dist(point, m)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

/// Mean squared distance of every point to its nearest center.
pub fn kmeans_objective(data: &ShardedDataset, centers: &[Vec<f64>]) -> f64 {
    let total: f64 = data.points().map(|p| nearest(p, centers).1).sum();
    total / data.total_points() as f64
}

/// k-means++ seeding over all points.
pub fn kmeans_plus_plus<R: Rng + ?Sized>(data: &ShardedDataset, centers: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let points: Vec<&[f64]> = data.points().collect();
    let mut chosen = vec![points[rng.random_range(0..points.len())].to_vec()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &chosen[0])).collect();
    while chosen.len() < centers {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick].to_vec();
        for (d, p) in dist.iter_mut().zip(&points) {
            *d = d.min(sq_dist(p, &c));
        }
        chosen.push(c);
    }
    chosen
}

/// Distributed Lloyd's algorithm.
///
/// Each round every client sends, for every center, the mean of its points
/// assigned there (the current center if none), concatenated into one
/// vector, plus exact per-center counts as 32-bit integers. The server sets
/// each center to the count-weighted mean of the decoded local means and
/// keeps centers that received no points. The metric is
/// [`kmeans_objective`] after the update.
pub fn distributed_kmeans(
    data: &ShardedDataset,
    centers: usize,
    cfg: &TaskConfig,
) -> Result<(TaskResult, Vec<Vec<f64>>)> {
    cfg.validate()?;
    if centers == 0 {
        return Err(Error::invalid("centers must be at least 1"));
    }
    if centers > data.total_points() {
        return Err(Error::invalid(format!(
            "{centers} centers exceed {} points",
            data.total_points()
        )));
    }
    let d = data.dim();
    let mut current = kmeans_plus_plus(data, centers, &mut stream_rng(cfg.seed, Stream::Task, u64::MAX));
    let mut result = TaskResult::default();
    for round in 0..cfg.rounds {
        let local = par::map_indexed(data.clients(), |i| {
            let mut sums = vec![0.0; centers * d];
            let mut counts = vec![0usize; centers];
            for p in data.shard(i).points.chunks(d) {
                let (c, _) = nearest(p, &current);
                counts[c] += 1;
                sums[c * d..(c + 1) * d].iter_mut().zip(p).for_each(|(a, b)| *a += b);
            }
            for c in 0..centers {
                let block = &mut sums[c * d..(c + 1) * d];
                if counts[c] == 0 {
                    block.copy_from_slice(&current[c]);
                } else {
                    block.iter_mut().for_each(|a| *a /= counts[c] as f64);
                }
            }
            (sums, counts)
        });
        let (means, counts): (Vec<Vec<f64>>, Vec<Vec<usize>>) = local.into_iter().unzip();
        let agg = aggregate(&means, cfg.scheme, cfg.k, round_seed(cfg, round))?;
        for (c, center) in current.iter_mut().enumerate() {
            let total: usize = counts.iter().map(|cs| cs[c]).sum();
            if total == 0 {
                continue;
            }
            let mut next = vec![0.0; d];
            for (decoded, cs) in agg.per_client.iter().zip(&counts) {
                let w = cs[c] as f64 / total as f64;
                next.iter_mut()
                    .zip(&decoded[c * d..(c + 1) * d])
                    .for_each(|(a, b)| *a += w * b);
            }
            *center = next;
        }
        let bits = agg.bits_per_client + (32 * centers) as f64;
        result.push(kmeans_objective(data, &current), bits);
    }
    Ok((result, current))
}

/// Covariance problem for distributed power iteration.
///
/// Points are centered with the exact global mean. Client `i` holds
/// `A_i = (1/m_i) sum (x - mu)(x - mu)^T`; the target matrix is the
/// unweighted average of the `A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerProblem {
    d: usize,
    centered: Vec<Vec<f64>>,
    top: Vec<f64>,
    eigenvalues: Vec<f64>,
}

impl PowerProblem {
    pub fn new(data: &ShardedDataset) -> Result<Self> {
        let d = data.dim();
        let total = data.total_points() as f64;
        let mut mu = vec![0.0; d];
        for p in data.points() {
            mu.iter_mut().zip(p).for_each(|(a, b)| *a += b);
        }
        mu.iter_mut().for_each(|a| *a /= total);
        let centered: Vec<Vec<f64>> = (0..data.clients())
            .map(|i| {
                data.shard(i)
                    .points
                    .chunks(d)
                    .flat_map(|p| p.iter().zip(&mu).map(|(a, b)| a - b))
                    .collect()
            })
            .collect();
        let n = centered.len() as f64;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for shard in &centered {
            let m = shard.len() / d;
            let x = DMatrix::from_row_slice(m, d, shard);
            cov += x.transpose() * &x / (m as f64 * n);
        }
        if cov.iter().all(|&v| v == 0.0) {
            return Err(Error::DegenerateInput("covariance matrix is zero".into()));
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let top = eig.eigenvectors.column(order[0]).iter().copied().collect();
        let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        Ok(Self {
            d,
            centered,
            top,
            eigenvalues,
        })
    }

    pub fn top_eigenvector(&self) -> &[f64] {
        &self.top
    }

    /// Eigenvalues in decreasing order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `||v v^T - v* v*^T||_F^2 / 2 = 1 - (v . v*)^2` for unit `v`.
    pub fn error(&self, v: &[f64]) -> f64 {
        let c = dot(v, &self.top);
        (1.0 - c * c).max(0.0)
    }

    fn client_product(&self, i: usize, v: &[f64]) -> Vec<f64> {
        let shard = &self.centered[i];
        let m = shard.len() / self.d;
        let mut out = vec![0.0; self.d];
        for p in shard.chunks(self.d) {
            let s = dot(p, v) / m as f64;
            out.iter_mut().zip(p).for_each(|(a, b)| *a += s * b);
        }
        out
    }

    /// Runs from a random unit start vector drawn from the task seed.
    pub fn run(&self, cfg: &TaskConfig) -> Result<TaskResult> {
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = stream_rng(cfg.seed, Stream::Task, u64::MAX);
        let v0: Vec<f64> = (0..self.d).map(|_| normal.sample(&mut rng)).collect();
        self.run_from(cfg, v0)
    }

    pub fn run_from(&self, cfg: &TaskConfig, v0: Vec<f64>) -> Result<TaskResult> {
        cfg.validate()?;
        if v0.len() != self.d {
            return Err(Error::invalid("start vector has the wrong dimension"));
        }
        let mut v = normalized(v0)?;
        let mut result = TaskResult::default();
        for round in 0..cfg.rounds {
            let products = par::map_indexed(self.centered.len(), |i| self.client_product(i, &v));
            let agg = aggregate(&products, cfg.scheme, cfg.k, round_seed(cfg, round))?;
            v = normalized(agg.mean)?;
            result.push(self.error(&v), agg.bits_per_client);
        }
        Ok(result)
    }
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = l2_norm(&v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateInput("power iteration produced a zero vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}

/// Distributed power iteration; see [`PowerProblem`].
pub fn distributed_power_iteration(data: &ShardedDataset, cfg: &TaskConfig) -> Result<TaskResult> {
    PowerProblem::new(data)?.run(cfg)
}

/// Objective `F(w) = (1/n) sum_i F_i(w)` over clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// `F_i(w)` is the mean of `log(1 + exp(-y w.x)) + l2/2 ||w||^2` with
    /// labels in `{0, 1}` mapped to `y = -1, +1`.
    Logistic { l2: f64 },
    /// `F_i(w)` is the mean of `||w - x||^2 / 2`.
    Quadratic,
}

impl Objective {
    fn check(&self, data: &ShardedDataset) -> Result<()> {
        if let Objective::Logistic { l2 } = self {
            if !(l2.is_finite() && *l2 >= 0.0) {
                return Err(Error::invalid("l2 must be finite and >= 0"));
            }
            if !data.has_labels() || data.labels().any(|l| l > 1) {
                return Err(Error::invalid("logistic regression needs labels in {0, 1}"));
            }
        }
        Ok(())
    }

    pub fn client_value(&self, data: &ShardedDataset, i: usize, w: &[f64]) -> f64 {
        let shard = data.shard(i);
        let m = shard.len(data.dim()) as f64;
        match self {
            Objective::Quadratic => {
                shard
                    .points
                    .chunks(data.dim())
                    .map(|x| sq_dist(w, x) / 2.0)
                    .sum::<f64>()
                    / m
            }
            Objective::Logistic { l2 } => {
                let labels = shard.labels().unwrap_or(&[]);
                let loss: f64 = shard
                    .points
                    .chunks(data.dim())
                    .zip(labels)
                    .map(|(x, &y)| softplus(-sign(y) * dot(w, x)))
                    .sum();
                loss / m + l2 / 2.0 * dot(w, w)
            }
        }
    }

    pub fn client_gradient(&self, data: &ShardedDataset, i: usize, w: &[f64]) -> Vec<f64> {
        let shard = data.shard(i);
        let d = data.dim();
        let m = shard.len(d) as f64;
        let mut g = vec![0.0; d];
        match self {
            Objective::Quadratic => {
                for x in shard.points.chunks(d) {
                    g.iter_mut()
                        .zip(w.iter().zip(x))
                        .for_each(|(a, (wj, xj))| *a += wj - xj);
                }
                g.iter_mut().for_each(|a| *a /= m);
            }
            Objective::Logistic { l2 } => {
                let labels = shard.labels().unwrap_or(&[]);
                for (x, &y) in shard.points.chunks(d).zip(labels) {
                    let s = sign(y);
                    let coef = -s * sigmoid(-s * dot(w, x));
                    g.iter_mut().zip(x).for_each(|(a, xj)| *a += coef * xj);
                }
                g.iter_mut().zip(w).for_each(|(a, wj)| *a = *a / m + l2 * wj);
            }
        }
        g
    }

    pub fn value(&self, data: &ShardedDataset, w: &[f64]) -> f64 {
        (0..data.clients()).map(|i| self.client_value(data, i, w)).sum::<f64>() / data.clients() as f64
    }

    pub fn gradient(&self, data: &ShardedDataset, w: &[f64]) -> Vec<f64> {
        let n = data.clients() as f64;
        let mut g = vec![0.0; data.dim()];
        for i in 0..data.clients() {
            g.iter_mut()
                .zip(self.client_gradient(data, i, w))
                .for_each(|(a, b)| *a += b / n);
        }
        g
    }

    /// Smoothness constant: 1 for the quadratic; `mean ||x||^2 / 4 + l2`
    /// for logistic loss, which bounds the Hessian's largest eigenvalue.
    pub fn smoothness(&self, data: &ShardedDataset) -> f64 {
        match self {
            Objective::Quadratic => 1.0,
            Objective::Logistic { l2 } => {
                let n = data.clients() as f64;
                let mut h = 0.0;
                for i in 0..data.clients() {
                    let shard = data.shard(i);
                    let m = shard.len(data.dim()) as f64;
                    h += shard.points.chunks(data.dim()).map(|x| dot(x, x)).sum::<f64>() / (4.0 * m * n);
                }
                h + l2
            }
        }
    }

    /// Minimizer over the ball of radius `radius`: exact for the quadratic,
    /// accelerated projected gradient descent for logistic loss.
    pub fn minimize(&self, data: &ShardedDataset, radius: f64) -> Vec<f64> {
        let d = data.dim();
        match self {
            Objective::Quadratic => {
                let mut w = self.gradient(data, &vec![0.0; d]);
                w.iter_mut().for_each(|a| *a = -*a);
                project(&mut w, radius);
                w
            }
            Objective::Logistic { .. } => {
                let step = 1.0 / self.smoothness(data);
                let mut w = vec![0.0; d];
                let mut y = w.clone();
                let mut t = 1.0f64;
                for _ in 0..100_000 {
                    let g = self.gradient(data, &y);
                    let mut next: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                    project(&mut next, radius);
                    // Gradient-mapping norm; zero exactly at the constrained optimum.
                    if sq_dist(&next, &y).sqrt() / step < 1e-9 {
                        return next;
                    }
                    // Restart momentum when the step opposes the last move.
                    let opposed: f64 = y
                        .iter()
                        .zip(&next)
                        .zip(&w)
                        .map(|((yj, nj), wj)| (yj - nj) * (nj - wj))
                        .sum();
                    if opposed > 0.0 {
                        t = 1.0;
                    }
                    let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
                    let momentum = (t - 1.0) / t_next;
                    y = next.iter().zip(&w).map(|(a, b)| a + momentum * (a - b)).collect();
                    w = next;
                    t = t_next;
                }
                w
            }
        }
    }
}

fn sign(label: usize) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Euclidean projection onto the ball of radius `radius`.
pub fn project(w: &mut [f64], radius: f64) {
    clip_to_radius(w, radius);
}

#[derive(Debug, Clone, PartialEq)]
pub enum LearningRate {
    /// `1 / (H + 1/eta)`; `H` defaults to the objective's smoothness.
    Smooth {
        smoothness: Option<f64>,
        eta: f64,
    },
    Constant(f64),
    /// One rate per round.
    Schedule(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub rounds: usize,
    pub learning_rate: LearningRate,
    /// Radius `D` of the feasible ball around the origin.
    pub projection_radius: f64,
    /// Client vectors are clipped to this norm before quantization.
    pub clip_radius: f64,
    pub scheme: Option<SchemeId>,
    pub k: usize,
    /// Local passes over the shard (federated averaging only).
    pub local_epochs: usize,
    /// Local minibatch size (federated averaging only).
    pub local_batch: usize,
    pub seed: MasterSeed,
}

impl OptimizerConfig {
    fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.rounds == 0 {
            problems.push("rounds must be at least 1".to_string());
        }
        if !(self.projection_radius > 0.0 && self.projection_radius.is_finite()) {
            problems.push("projection radius must be positive".into());
        }
        if !(self.clip_radius > 0.0 && self.clip_radius.is_finite()) {
            problems.push("clip radius must be positive".into());
        }
        if self.local_epochs == 0 || self.local_batch == 0 {
            problems.push("local epochs and batch size must be at least 1".into());
        }
        match &self.learning_rate {
            LearningRate::Smooth { smoothness, eta } => {
                if !(*eta > 0.0) || smoothness.is_some_and(|h| !(h >= 0.0)) {
                    problems.push("eta must be positive and H non-negative".into());
                }
            }
            LearningRate::Constant(lr) => {
                if !(*lr > 0.0) {
                    problems.push("learning rate must be positive".into());
                }
            }
            LearningRate::Schedule(s) => {
                if s.len() < self.rounds || s.iter().any(|lr| !(*lr > 0.0)) {
                    problems.push("schedule needs one positive rate per round".into());
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::invalid(problems.join("; ")))
        }
    }

    fn rate(&self, round: usize, smoothness: f64) -> f64 {
        match &self.learning_rate {
            LearningRate::Smooth { smoothness: h, eta } => 1.0 / (h.unwrap_or(smoothness) + 1.0 / eta),
            LearningRate::Constant(lr) => *lr,
            LearningRate::Schedule(s) => s[round],
        }
    }

    fn task(&self) -> TaskConfig {
        TaskConfig {
            rounds: self.rounds,
            scheme: self.scheme,
            k: self.k,
            seed: self.seed,
        }
    }
}

const DIVERGENCE_LIMIT: f64 = 1e6;

fn check_divergence(round: usize, metric: f64) -> Result<()> {
    if !metric.is_finite() || metric > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { round, metric });
    }
    Ok(())
}

/// Projected distributed gradient descent starting from `w = 0`.
///
/// Each round every client clips its full local gradient to the clip
/// radius, the server averages the quantized gradients inside that ball,
/// steps and projects.
/// The metric after round `t` is `F(avg(w_1..w_t)) - F(w*)`, where `w_t`
/// is the iterate after step `t` and `w*` minimizes `F` over the ball.
pub fn distributed_sgd(data: &ShardedDataset, objective: Objective, cfg: &OptimizerConfig) -> Result<TaskResult> {
    cfg.validate()?;
    objective.check(data)?;
    let d = data.dim();
    let h = objective.smoothness(data);
    let w_star = objective.minimize(data, cfg.projection_radius);
    let f_star = objective.value(data, &w_star);
    let task = cfg.task();
    let mut w = vec![0.0; d];
    let mut avg = vec![0.0; d];
    let mut result = TaskResult::default();
    for round in 0..cfg.rounds {
        let grads = par::map_indexed(data.clients(), |i| {
            let mut g = objective.client_gradient(data, i, &w);
            clip_to_radius(&mut g, cfg.clip_radius);
            g
        });
        let agg = aggregate_in_ball(&grads, cfg.clip_radius, cfg.scheme, cfg.k, round_seed(&task, round))?;
        let lr = cfg.rate(round, h);
        w.iter_mut().zip(&agg.mean).for_each(|(a, g)| *a -= lr * g);
        project(&mut w, cfg.projection_radius);
        let t = (round + 1) as f64;
        avg.iter_mut().zip(&w).for_each(|(a, b)| *a += (b - *a) / t);
        let metric = objective.value(data, &avg) - f_star;
        check_divergence(round, metric)?;
        result.push(metric, agg.bits_per_client);
    }
    Ok(result)
}

/// Multinomial logistic regression with a bias, weights stored row-major
/// as `classes x (d + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxModel {
    pub classes: usize,
    pub d: usize,
    pub weights: Vec<f64>,
}

impl SoftmaxModel {
    pub fn zeros(classes: usize, d: usize) -> Self {
        Self {
            classes,
            d,
            weights: vec![0.0; classes * (d + 1)],
        }
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks(self.d + 1)
            .map(|row| dot(&row[..self.d], x) + row[self.d])
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z = self.logits(x);
        (0..z.len()).fold(0, |best, c| if z[c] > z[best] { c } else { best })
    }

    pub fn accuracy(&self, data: &ShardedDataset) -> f64 {
        let correct = data
            .points()
            .zip(data.labels())
            .filter(|(x, y)| self.predict(x) == *y)
            .count();
        correct as f64 / data.total_points() as f64
    }

    /// One minibatch step of mean cross-entropy.
    fn step(&mut self, batch: &[(&[f64], usize)], lr: f64) {
        let width = self.d + 1;
        let mut grad = vec![0.0; self.weights.len()];
        for &(x, y) in batch {
            let z = self.logits(x);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exp.iter().sum();
            for c in 0..self.classes {
                let coef = exp[c] / total - f64::from(u8::from(c == y));
                let row = &mut grad[c * width..(c + 1) * width];
                row[..self.d].iter_mut().zip(x).for_each(|(g, xj)| *g += coef * xj);
                row[self.d] += coef;
            }
        }
        let scale = lr / batch.len() as f64;
        self.weights.iter_mut().zip(&grad).for_each(|(w, g)| *w -= scale * g);
    }
}

/// Local SGD on one shard: `epochs` shuffled passes in minibatches.
pub fn local_sgd<R: Rng + ?Sized>(
    model: &mut SoftmaxModel,
    points: &[f64],
    labels: &[usize],
    epochs: usize,
    batch: usize,
    lr: f64,
    rng: &mut R,
) {
    let d = model.d;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mb: Vec<(&[f64], usize)> = chunk
                .iter()
                .map(|&p| (&points[p * d..(p + 1) * d], labels[p]))
                .collect();
            model.step(&mb, lr);
        }
    }
}

/// Federated averaging of a softmax classifier.
///
/// Each round the server samples `clients_per_round` clients without
/// replacement; each runs local SGD from the current model and sends its
/// clipped model delta. The server adds the average decoded delta and
/// projects. The metric is accuracy on `test` after each round.
pub fn federated_averaging(
    train: &ShardedDataset,
    test: &ShardedDataset,
    cfg: &OptimizerConfig,
    clients_per_round: usize,
) -> Result<(TaskResult, SoftmaxModel)> {
    cfg.validate()?;
    if clients_per_round == 0 || clients_per_round > train.clients() {
        return Err(Error::invalid(format!(
            "clients per round must lie in 1..={}",
            train.clients()
        )));
    }
    if !train.has_labels() || !test.has_labels() {
        return Err(Error::invalid("federated averaging needs labeled data"));
    }
    if train.dim() != test.dim() {
        return Err(Error::invalid("train and test dimensions differ"));
    }
    let classes = train.labels().chain(test.labels()).max().unwrap_or(0) + 1;
    let mut model = SoftmaxModel::zeros(classes, train.dim());
    let task = cfg.task();
    let mut result = TaskResult::default();
    for round in 0..cfg.rounds {
        let mut rng = stream_rng(cfg.seed, Stream::Task, (1u64 << 32) + round as u64);
        let mut ids: Vec<usize> = (0..train.clients()).collect();
        ids.shuffle(&mut rng);
        ids.truncate(clients_per_round);
        ids.sort_unstable();
        let lr = cfg.rate(round, 0.0);
        let deltas = par::map_indexed(ids.len(), |s| {
            let i = ids[s];
            let shard = train.shard(i);
            let mut local = model.clone();
            let mut crng = stream_rng(cfg.seed, Stream::Private, ((round as u64) << 32) + i as u64);
            local_sgd(
                &mut local,
                &shard.points,
                shard.labels().unwrap_or(&[]),
                cfg.local_epochs,
                cfg.local_batch,
                lr,
                &mut crng,
            );
            let mut delta: Vec<f64> = local.weights.iter().zip(&model.weights).map(|(a, b)| a - b).collect();
            clip_to_radius(&mut delta, cfg.clip_radius);
            delta
        });
        let agg = aggregate(&deltas, cfg.scheme, cfg.k, round_seed(&task, round))?;
        model.weights.iter_mut().zip(&agg.mean).for_each(|(w, dlt)| *w += dlt);
        project(&mut model.weights, cfg.projection_radius);
        let norm = l2_norm(&model.weights);
        check_divergence(round, norm)?;
        result.push(model.accuracy(test), agg.bits_per_client);
    }
    Ok((result, model))
}

impl fmt::Display for TaskResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rounds={} final_metric={:.6} bits_per_client={:.1}",
            self.rounds(),
            self.final_metric(),
            self.bits_per_client.last().copied().unwrap_or(0.0)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs() -> ShardedDataset {
        let mut shards = Vec::new();
        for i in 0..4 {
            let mut pts = Vec::new();
            for j in 0..10 {
                let e = (i * 10 + j) as f64 * 0.001;
                pts.push(vec![0.0 + e, 0.0 - e]);
                pts.push(vec![5.0 - e, 5.0 + e]);
            }
            shards.push(pts);
        }
        ShardedDataset::new(shards, None).unwrap()
    }

    #[test]
    fn clipping_is_exact() {
        let mut v = vec![3.0, 4.0, 1e-3, 7.123456789];
        clip_to_radius(&mut v, 1.0 / 3.0);
        assert!(l2_norm(&v) <= 1.0 / 3.0);
        let mut inside = vec![0.1, 0.2];
        clip_to_radius(&mut inside, 1.0);
        assert_eq!(inside, vec![0.1, 0.2]);
    }

    #[test]
    fn exact_kmeans_is_monotone() {
        let data = gaussian_clusters(5, 40, 6, 4, 0.2, MasterSeed(3)).unwrap();
        let cfg = TaskConfig {
            rounds: 15,
            scheme: None,
            k: 2,
            seed: MasterSeed(1),
        };
        let (r, _) = distributed_kmeans(&data, 4, &cfg).unwrap();
        for w in r.metrics.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", r.metrics);
        }
    }

    #[test]
    fn kmeans_recovers_blob_means() {
        let data = blobs();
        for scheme in [None, Some(SchemeId::Correlated1Bit), Some(SchemeId::Independent)] {
            let cfg = TaskConfig {
                rounds: 5,
                scheme,
                k: 2,
                seed: MasterSeed(7),
            };
            let (_, centers) = distributed_kmeans(&data, 2, &cfg).unwrap();
            let mut found = centers.clone();
            found.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert!(sq_dist(&found[0], &[0.0, 0.0]).sqrt() < 1.0, "{scheme:?} {found:?}");
            assert!(sq_dist(&found[1], &[5.0, 5.0]).sqrt() < 1.0, "{scheme:?} {found:?}");
        }
    }

    #[test]
    fn kmeans_rejects_too_many_centers() {
        let data = ShardedDataset::new(vec![vec![vec![1.0]]], None).unwrap();
        let cfg = TaskConfig {
            rounds: 1,
            scheme: None,
            k: 2,
            seed: MasterSeed(0),
        };
        assert!(distributed_kmeans(&data, 2, &cfg).is_err());
    }

    #[test]
    fn power_iteration_fixed_point_and_sign_invariance() {
        let data = gaussian_clusters(3, 30, 5, 3, 0.1, MasterSeed(2)).unwrap();
        let problem = PowerProblem::new(&data).unwrap();
        let v = problem.top_eigenvector().to_vec();
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert_eq!(problem.error(&v), problem.error(&neg));
        let cfg = TaskConfig {
            rounds: 5,
            scheme: None,
            k: 2,
            seed: MasterSeed(0),
        };
        let r = problem.run_from(&cfg, v).unwrap();
        assert!(r.metrics.iter().all(|&m| m < 1e-20), "{:?}", r.metrics);
    }

    #[test]
    fn power_iteration_zero_matrix_is_degenerate() {
        let data = ShardedDataset::new(vec![vec![vec![1.0, 2.0]; 3]; 2], None).unwrap();
        assert!(matches!(PowerProblem::new(&data), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn sgd_single_round() {
        let data = logistic_fixture(3, 20, 4, 2.0, MasterSeed(1)).unwrap();
        let cfg = OptimizerConfig {
            rounds: 1,
            learning_rate: LearningRate::Smooth {
                smoothness: None,
                eta: 1.0,
            },
            projection_radius: 5.0,
            clip_radius: 1.0,
            scheme: None,
            k: 2,
            local_epochs: 1,
            local_batch: 1,
            seed: MasterSeed(0),
        };
        let r = distributed_sgd(&data, Objective::Logistic { l2: 0.01 }, &cfg).unwrap();
        assert_eq!(r.rounds(), 1);
        assert!(r.metrics[0] >= -1e-9);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let data = logistic_fixture(2, 15, 3, 1.5, MasterSeed(4)).unwrap();
        let obj = Objective::Logistic { l2: 0.1 };
        let w = [0.3, -0.2, 0.5];
        let g = obj.gradient(&data, &w);
        for j in 0..3 {
            let mut a = w;
            let mut b = w;
            a[j] += 1e-6;
            b[j] -= 1e-6;
            let fd = (obj.value(&data, &a) - obj.value(&data, &b)) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-7, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let data = gaussian_clusters(3, 4, 2, 2, 0.1, MasterSeed(5)).unwrap();
        let mut buf = Vec::new();
        data.to_csv(&mut buf).unwrap();
        let back = ShardedDataset::from_csv(&buf[..], 0).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn dataset_csv_errors_name_row_and_column() {
        let bad = "client,x0,x1\n0,1.0,2.0\n0,1.0,oops\n";
        assert_eq!(
            ShardedDataset::from_csv(bad.as_bytes(), 0),
            Err(Error::Dataset {
                row: 3,
                column: 3,
                message: "cannot parse 'oops'".into()
            })
        );
        let short = "client,x0,x1\n0,1.0\n";
        assert!(matches!(
            ShardedDataset::from_csv(short.as_bytes(), 0),
            Err(Error::Dataset { row: 2, .. })
        ));
    }

    #[test]
    fn round_robin_csv_without_client_column() {
        let text = "label,x0\n0,0.1\n1,0.2\n0,0.3\n";
        let data = ShardedDataset::from_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(data.clients(), 2);
        assert_eq!(data.shard(0).points(), &[0.1, 0.3]);
        assert_eq!(data.shard(1).labels(), Some(&[1][..]));
    }

    #[test]
    fn task_result_csv_round_trip() {
        let r = TaskResult {
            metrics: vec![0.5, 0.25],
            bits_per_client: vec![100.0, 100.0],
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone())
            .unwrap()
            .starts_with("round,metric,bits_per_client\n1,0.5,100"));
        assert_eq!(TaskResult::read_csv(&buf[..]).unwrap(), r);
    }

    #[test]
    fn zero_vectors_aggregate_to_zero() {
        for scheme in [
            None,
            Some(SchemeId::Correlated1Bit),
            Some(SchemeId::HadamardCq),
            Some(SchemeId::TernGrad),
        ] {
            let agg = aggregate(&vec![vec![0.0; 6]; 4], scheme, 2, MasterSeed(3)).unwrap();
            assert!(agg.mean.iter().all(|&v| v == 0.0), "{scheme:?}");
        }
    }
}
