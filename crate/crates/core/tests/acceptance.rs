//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::time::{Duration, Instant};

use corrquant::bitcodec::{
    elias_gamma_decode, message_decode, message_encode, pack_fixed, unpack_fixed, write_gamma, BitStream, WireMessage,
    HEADER_BITS,
};
use corrquant::harness::{
    bounds, constant_datasets, gen_concentrated_scalar, gen_lower_bound_1bit, gen_sparse_mean, gen_uniform_mean,
    run_dme, run_scheme, scalar_mse, DmeConfig, ScalarScheme, SyntheticSpec,
};
use corrquant::randomness::{derive_seed, stream_rng, Stream};
use corrquant::scalar_quant::{concentration_stats, one_bit_cq, ScalarBatch};
use corrquant::tasks::{
    distributed_kmeans, distributed_sgd, logistic_fixture, mnist_like, LearningRate, Objective, OptimizerConfig,
    PowerProblem, ShardedDataset, TaskConfig,
};
use corrquant::vector_quant::{hadamard_rotate, padded_dim, Direction, RotationSpec};
use corrquant::{MasterSeed, RandomnessContext, SchemeId};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn seed(label: u64, i: u64) -> MasterSeed {
    MasterSeed(derive_seed(MasterSeed(0xACCE_97), Stream::Trial, label * 1_000_000 + i))
}

fn exactness_on_grid_inputs() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for n in [2usize, 4, 8, 100] {
        for s in 0..1000u64 {
            let ctx = RandomnessContext::build(seed(1, s), n, 1, 2).unwrap();
            for count in 0..=n {
                let x = count as f64 / n as f64;
                let batch = ScalarBatch::new(vec![x; n], 0.0, 1.0).unwrap();
                let est = one_bit_cq(&batch, &ctx, 0).unwrap().estimate;
                worst = worst.max((est - x).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst == 0.0 && elapsed < Duration::from_secs(1),
        format!("max error {worst:e}, {:.3} s", elapsed.as_secs_f64()),
    )
}

fn two_client_closed_forms() -> Outcome {
    let start = Instant::now();
    let trials = 1_000_000;
    let mut worst_z = 0.0f64;
    let mut ok = true;
    for i in 1..=9 {
        let x = i as f64 / 10.0;
        let batch = ScalarBatch::new(vec![x, x], 0.0, 1.0).unwrap();
        let cases = [
            (ScalarScheme::Independent, bounds::independent_two_client(x)),
            (ScalarScheme::CorrelatedOneBit, bounds::correlated_two_client(x)),
        ];
        for (j, (scheme, expected)) in cases.into_iter().enumerate() {
            let m = scalar_mse(&batch, scheme, 2, trials, seed(2, (i * 2 + j) as u64)).unwrap();
            let diff = (m.mse - expected).abs();
            if diff > 3.0 * m.stderr {
                ok = false;
            }
            if m.stderr > 0.0 {
                worst_z = worst_z.max(diff / m.stderr);
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        ok && elapsed < Duration::from_secs(30),
        format!("max |z| {worst_z:.2} (limit 3), {:.1} s", elapsed.as_secs_f64()),
    )
}

/// Spreads log-uniform in `[1e-3, 0.5]`, `n` cycling through `ns`.
fn envelope_batches(label: u64) -> Vec<(ScalarBatch, usize)> {
    let mut rng = stream_rng(seed(label, 0), Stream::Data, 0);
    (0..100)
        .map(|b| {
            let n = [10, 100, 1000][b % 3];
            let spread = 10f64.powf(rng.random_range(-3.0..(0.5f64).log10()));
            (
                gen_concentrated_scalar(n, spread, seed(label, 1 + b as u64)).unwrap(),
                b,
            )
        })
        .collect()
}

fn one_bit_envelope() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for (batch, b) in envelope_batches(3) {
        let sigma = concentration_stats(&batch).unwrap().sigma_md;
        let bound = bounds::one_bit_upper(sigma, batch.width(), batch.len());
        let m = scalar_mse(&batch, ScalarScheme::CorrelatedOneBit, 2, 10_000, seed(30, b as u64)).unwrap();
        worst = worst.max(m.mse / bound);
        failures += usize::from(m.mse > bound);
    }
    outcome(
        failures == 0,
        format!("100 batches, worst mse/bound {worst:.3}, violations {failures}"),
    )
}

fn k_level_envelope() -> Outcome {
    let mut worst = 0.0f64;
    let mut failures = 0;
    for (batch, b) in envelope_batches(4) {
        for k in [3usize, 8, 32] {
            let sigma = concentration_stats(&batch).unwrap().sigma_md;
            let bound = bounds::k_level_upper(sigma, batch.width(), batch.len(), k);
            let m = scalar_mse(
                &batch,
                ScalarScheme::CorrelatedKLevel,
                k,
                10_000,
                seed(40 + k as u64, b as u64),
            )
            .unwrap();
            worst = worst.max(m.mse / bound);
            failures += usize::from(m.mse > bound);
        }
    }
    outcome(
        failures == 0,
        format!("100 batches x k in {{3,8,32}}, worst mse/bound {worst:.3}, violations {failures}"),
    )
}

fn lower_bound_floors() -> Outcome {
    let r = 1.0;
    let mut details = Vec::new();
    let mut ok = true;
    let n = 10_000;
    let sigma = r / 100.0;
    let floor = bounds::one_bit_floor(sigma, r, n);
    let mut worst_one = f64::INFINITY;
    for inst in 0..5u64 {
        let batch = gen_lower_bound_1bit(n, r, sigma, seed(5, inst)).unwrap();
        for scheme in [ScalarScheme::CorrelatedOneBit, ScalarScheme::Independent] {
            let m = scalar_mse(&batch, scheme, 2, 2000, seed(50, inst)).unwrap();
            worst_one = worst_one.min(m.mse / floor);
            ok &= m.mse >= floor;
        }
    }
    details.push(format!("one-bit min mse/floor {worst_one:.2}"));
    let mut worst_k = f64::INFINITY;
    for (n, k) in [(10usize, 3usize), (10, 4), (5, 8)] {
        let floor = bounds::k_level_floor(r, n, k);
        let datasets = constant_datasets(n, r, k).unwrap();
        for scheme in [ScalarScheme::CorrelatedKLevel, ScalarScheme::Independent] {
            let total: f64 = datasets
                .iter()
                .enumerate()
                .map(|(j, b)| scalar_mse(b, scheme, k, 2000, seed(51, j as u64)).unwrap().mse)
                .sum();
            let avg = total / datasets.len() as f64;
            worst_k = worst_k.min(avg / floor);
            ok &= avg >= floor;
        }
    }
    details.push(format!("k-level min mse/floor {worst_k:.2}"));
    outcome(ok, details.join(", "))
}

fn unbiasedness_suite() -> Outcome {
    let trials = 100_000;
    let mut worst_z = 0.0f64;
    let mut ok = true;
    let mut hadamard_ratio = 0.0f64;
    for b in 0..10u64 {
        let sigma = [0.01, 0.05, 0.2][b as usize % 3];
        let batch = gen_uniform_mean(6, 4, sigma, seed(6, b)).unwrap();
        for scheme in SchemeId::ALL {
            if scheme == SchemeId::RotateSign {
                continue;
            }
            let k = if scheme == SchemeId::Correlated1Bit { 2 } else { 4 };
            let cfg = DmeConfig {
                scheme,
                k,
                trials,
                seed: seed(60 + b, scheme.wire_id() as u64),
            };
            let out = run_dme(&batch, &cfg).unwrap();
            if scheme == SchemeId::HadamardCq {
                let se_sq: f64 = out.coordinate_stderr.iter().map(|s| s * s).sum();
                let bound = bounds::hadamard_bias_sq(batch.radius(), padded_dim(batch.d()), batch.n()) + 4.0 * se_sq;
                hadamard_ratio = hadamard_ratio.max(out.report.bias_sq / bound);
                ok &= out.report.bias_sq <= bound;
                continue;
            }
            for j in 0..batch.d() {
                let err = (out.mean_estimate[j] - out.true_mean[j]).abs();
                let se = out.coordinate_stderr[j];
                ok &= err <= 4.0 * se + 1e-12;
                if se > 0.0 {
                    worst_z = worst_z.max(err / se);
                }
            }
        }
    }
    outcome(
        ok,
        format!("10 batches x 7 schemes, max |z| {worst_z:.2} (limit 4), hadamard bias/bound {hadamard_ratio:.3}"),
    )
}

fn rmse(batch: &corrquant::vector_quant::VectorBatch, scheme: SchemeId, k: usize, trials: usize, s: MasterSeed) -> f64 {
    run_dme(
        batch,
        &DmeConfig {
            scheme,
            k,
            trials,
            seed: s,
        },
    )
    .unwrap()
    .report
    .rmse
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

fn curve_orderings() -> Outcome {
    let start = Instant::now();
    let trials = 10;
    let mut notes = Vec::new();
    let mut ok = true;

    let mut sigma_ok = true;
    for (i, sigma) in [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1].into_iter().enumerate() {
        let s = seed(7, i as u64);
        let batch = gen_uniform_mean(100, 1024, sigma, s).unwrap();
        let c = rmse(&batch, SchemeId::Correlated1Bit, 2, trials, s);
        let ind = rmse(&batch, SchemeId::Independent, 2, trials, s);
        sigma_ok &= c < ind;
    }
    notes.push(format!("sigma grid {}", if sigma_ok { "ok" } else { "violated" }));
    ok &= sigma_ok;

    let s = seed(7, 100);
    let batch = gen_uniform_mean(100, 1024, 0.01, s).unwrap();
    let mut k_ok = true;
    for scheme in [SchemeId::CorrelatedKLevel, SchemeId::Independent] {
        let curve: Vec<f64> = [2, 4, 8, 16]
            .iter()
            .map(|&k| rmse(&batch, scheme, k, trials, s))
            .collect();
        k_ok &= strictly_decreasing(&curve);
    }
    notes.push(format!(
        "k curve {}",
        if k_ok { "decreasing" } else { "not decreasing" }
    ));
    ok &= k_ok;

    let ns = [10usize, 20, 50, 100, 200, 500, 1000];
    let mut n_ok = true;
    for scheme in [SchemeId::Correlated1Bit, SchemeId::Independent] {
        let curve: Vec<f64> = ns
            .iter()
            .map(|&n| {
                let b = gen_uniform_mean(n, 1024, 0.01, s).unwrap();
                rmse(&b, scheme, 2, trials, s)
            })
            .collect();
        n_ok &= strictly_decreasing(&curve);
    }
    notes.push(format!(
        "n curve {}",
        if n_ok { "decreasing" } else { "not decreasing" }
    ));
    ok &= n_ok;

    let mut rot_ok = true;
    for &n in &ns {
        let b = gen_sparse_mean(n, 1024, 0.01, 0.01, 1.0, s).unwrap();
        let rotated = rmse(&b, SchemeId::HadamardCq, 2, trials, s);
        for other in [
            SchemeId::Correlated1Bit,
            SchemeId::Independent,
            SchemeId::IndependentRotation,
        ] {
            rot_ok &= rotated < rmse(&b, other, 2, trials, s);
        }
    }
    notes.push(format!(
        "rotation {}",
        if rot_ok { "wins at every n" } else { "loses somewhere" }
    ));
    ok &= rot_ok;
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    notes.push(format!("{:.1} s", elapsed.as_secs_f64()));
    outcome(ok, notes.join(", "))
}

fn fixture_orderings() -> Outcome {
    let mut dme_wins = 0;
    for t in 0..10u64 {
        let s = seed(8, t);
        let batch = SyntheticSpec::sparse_mean(100, 1024, 0.01).generate(s).unwrap();
        let rotated = rmse(&batch, SchemeId::HadamardCq, 2, 5, s);
        let corr = rmse(&batch, SchemeId::Correlated1Bit, 2, 5, s);
        let ind = rmse(&batch, SchemeId::Independent, 2, 5, s);
        dme_wins += usize::from(rotated <= corr && corr < ind);
    }
    let data = mnist_like(10, 100, MasterSeed(2024)).unwrap();
    let mut kmeans_wins = 0;
    for t in 0..10u64 {
        let run = |scheme| {
            let cfg = TaskConfig {
                rounds: 20,
                scheme: Some(scheme),
                k: 2,
                seed: seed(80, t),
            };
            distributed_kmeans(&data, 10, &cfg).unwrap().0.final_metric()
        };
        kmeans_wins += usize::from(run(SchemeId::Correlated1Bit) < run(SchemeId::Independent));
    }
    let problem = PowerProblem::new(&data).unwrap();
    let mut power_wins = 0;
    for t in 0..10u64 {
        let run = |scheme| {
            let cfg = TaskConfig {
                rounds: 20,
                scheme: Some(scheme),
                k: 2,
                seed: seed(81, t),
            };
            problem.run(&cfg).unwrap().final_metric()
        };
        power_wins += usize::from(run(SchemeId::Correlated1Bit) < run(SchemeId::Independent));
    }
    outcome(
        dme_wins >= 9 && kmeans_wins >= 9 && power_wins >= 9,
        format!("dme {dme_wins}/10, k-means {kmeans_wins}/10, power iteration {power_wins}/10"),
    )
}

fn codec_exactness() -> Outcome {
    let mut ok = true;
    let mut stream = BitStream::new();
    for v in 1..=1_000_000u64 {
        write_gamma(&mut stream, v).unwrap();
    }
    let decoded = elias_gamma_decode(&stream).unwrap();
    ok &= decoded.len() == 1_000_000 && decoded.iter().enumerate().all(|(i, &v)| v == i as u64 + 1);

    let mut rng = stream_rng(seed(9, 0), Stream::Data, 0);
    let mut pack_ok = true;
    for _ in 0..100_000 {
        let k = rng.random_range(2..=300usize);
        let len = rng.random_range(0..40usize);
        let idx: Vec<u32> = (0..len).map(|_| rng.random_range(0..k as u32)).collect();
        let packed = pack_fixed(&idx, k).unwrap();
        pack_ok &= unpack_fixed(&packed, k, len).unwrap() == idx;
    }
    ok &= pack_ok;

    let mut wire_ok = true;
    for _ in 0..10_000 {
        let bits = rng.random_range(0..300u64);
        let mut payload = BitStream::new();
        for _ in 0..bits {
            payload.push_bit(rng.random());
        }
        let m = WireMessage {
            scheme: rng.random_range(1..=8),
            n: rng.random(),
            d: rng.random(),
            k: rng.random(),
            seed: rng.random(),
            payload,
        };
        wire_ok &= message_decode(&message_encode(&m).unwrap()).unwrap() == m;
    }
    ok &= wire_ok;

    let mut bits_ok = true;
    let batch = gen_uniform_mean(20, 1024, 0.05, seed(9, 1)).unwrap();
    for k in [2usize, 3, 4, 16, 32] {
        let r = run_scheme(&batch, SchemeId::HadamardCq, k, seed(9, k as u64)).unwrap();
        let width = (k as f64).log2().ceil() as u64;
        let expected = 1024 * width + HEADER_BITS;
        bits_ok &= r.bits_per_client.iter().all(|&b| b == expected);
        bits_ok &= r
            .messages
            .iter()
            .all(|m| message_encode(m).unwrap().len() as u64 * 8 == expected.div_ceil(8) * 8);
    }
    ok &= bits_ok;
    outcome(
        ok,
        format!("gamma 1..=1e6, 1e5 packs {pack_ok}, 1e4 messages {wire_ok}, hadamard bit counts {bits_ok}"),
    )
}

fn dense_hadamard(d: usize) -> Vec<Vec<f64>> {
    let mut h = vec![vec![1.0]];
    while h.len() < d {
        let m = h.len();
        let mut next = vec![vec![0.0; 2 * m]; 2 * m];
        for i in 0..m {
            for j in 0..m {
                next[i][j] = h[i][j];
                next[i][j + m] = h[i][j];
                next[i + m][j] = h[i][j];
                next[i + m][j + m] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// Best-of-`reps` seconds per forward rotation at sizes `small` and
/// `large`, alternating the two sizes so drift affects both equally.
fn time_transforms(small: usize, large: usize, reps: usize) -> (f64, f64) {
    let setup = |d: usize| {
        let spec = RotationSpec::from_seed(seed(10, d as u64), d).unwrap();
        let v: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
        (spec, v)
    };
    let once = |d: usize, spec: &RotationSpec, v: &[f64]| {
        let inner = (1 << 22) / d;
        let start = Instant::now();
        for _ in 0..inner {
            std::hint::black_box(hadamard_rotate(std::hint::black_box(v), spec, Direction::Forward).unwrap());
        }
        start.elapsed().as_secs_f64() / inner as f64
    };
    let (ss, sv) = setup(small);
    let (ls, lv) = setup(large);
    let (mut best_small, mut best_large) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..reps {
        best_small = best_small.min(once(small, &ss, &sv));
        best_large = best_large.min(once(large, &ls, &lv));
    }
    (best_small, best_large)
}

fn rotation_correctness() -> Outcome {
    let mut rng = stream_rng(seed(10, 0), Stream::Data, 0);
    let mut dense_err = 0.0f64;
    for d in [1usize, 2, 4, 8, 16] {
        let spec = RotationSpec::from_seed(seed(10, d as u64), d).unwrap();
        let h = dense_hadamard(d);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = hadamard_rotate(&v, &spec, Direction::Forward).unwrap();
        for i in 0..d {
            let dense: f64 = (0..d).map(|j| h[i][j] * spec.signs()[j] * v[j]).sum::<f64>() / (d as f64).sqrt();
            dense_err = dense_err.max((dense - fast[i]).abs());
        }
    }
    let mut round_trip = 0.0f64;
    let mut d = 1;
    while d <= 1 << 14 {
        let spec = RotationSpec::from_seed(seed(11, d as u64), d).unwrap();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let back = hadamard_rotate(
            &hadamard_rotate(&v, &spec, Direction::Forward).unwrap(),
            &spec,
            Direction::Inverse,
        )
        .unwrap();
        let num: f64 = v.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let den: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        round_trip = round_trip.max(num / den);
        d *= 2;
    }
    let (small, large) = time_transforms(1 << 12, 1 << 14, 40);
    let ratio = large / small;
    outcome(
        dense_err <= 1e-10 && round_trip <= 1e-10 && ratio < 4.6,
        format!(
            "dense max error {dense_err:.1e}, round trip {round_trip:.1e}, time ratio 2^14/2^12 {ratio:.2} (limit 4.6)"
        ),
    )
}

fn sgd_convergence() -> Outcome {
    let quad = mnist_like(5, 20, MasterSeed(11)).unwrap();
    let quad = ShardedDataset::new(
        (0..quad.clients())
            .map(|i| {
                quad.shard(i)
                    .points()
                    .chunks(784)
                    .take(20)
                    .map(|p| p[..8].to_vec())
                    .collect()
            })
            .collect(),
        None,
    )
    .unwrap();
    let mut exact_ok = true;
    let mut worst = 0.0f64;
    let (eta, radius) = (1.0, 2.0);
    for rounds in [10usize, 100] {
        let cfg = OptimizerConfig {
            rounds,
            learning_rate: LearningRate::Smooth { smoothness: None, eta },
            projection_radius: radius,
            clip_radius: 100.0,
            scheme: None,
            k: 2,
            local_epochs: 1,
            local_batch: 1,
            seed: MasterSeed(0),
        };
        let r = distributed_sgd(&quad, Objective::Quadratic, &cfg).unwrap();
        let bound = bounds::sgd_exact(1.0, eta, radius, rounds);
        worst = worst.max(r.final_metric() / bound);
        exact_ok &= r.final_metric() <= bound;
    }
    let mut wins = 0;
    for t in 0..10u64 {
        let data = logistic_fixture(50, 200, 10, 3.0, seed(12, t)).unwrap();
        let run = |scheme| {
            let cfg = OptimizerConfig {
                rounds: 30,
                learning_rate: LearningRate::Smooth {
                    smoothness: None,
                    eta: 10.0,
                },
                projection_radius: 10.0,
                clip_radius: 1.0,
                scheme: Some(scheme),
                k: 2,
                local_epochs: 1,
                local_batch: 1,
                seed: seed(120, t),
            };
            let r = distributed_sgd(&data, Objective::Logistic { l2: 1e-3 }, &cfg).unwrap();
            (r.final_metric(), r.bits_per_client.iter().sum::<f64>())
        };
        let (c, cb) = run(SchemeId::Correlated1Bit);
        let (i, ib) = run(SchemeId::Independent);
        wins += usize::from(c < i && cb == ib);
    }
    outcome(
        exact_ok && wins >= 9,
        format!("exact worst suboptimality/bound {worst:.3}, correlated wins {wins}/10"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("exactness on grid inputs", exactness_on_grid_inputs),
        ("two-client closed forms", two_client_closed_forms),
        ("one-bit error envelope", one_bit_envelope),
        ("k-level error envelope", k_level_envelope),
        ("lower-bound floors", lower_bound_floors),
        ("unbiasedness", unbiasedness_suite),
        ("rmse orderings over sigma, k, n and rotation", curve_orderings),
        ("scheme orderings on fixtures", fixture_orderings),
        ("codec exactness", codec_exactness),
        ("rotation correctness", rotation_correctness),
        ("sgd convergence", sgd_convergence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        println!(
            "{} {name}: {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
