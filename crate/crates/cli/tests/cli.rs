use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use corrquant::harness::{read_bound_checks, read_reports};
use corrquant::tasks::read_runs;
use corrquant::{MasterSeed, SchemeId};
use corrquant_cli::{
    main_with, resolve, validate, Cli, CliError, Generator, RunConfig, Settings, DEFAULT_D, DEFAULT_K, DEFAULT_N,
    DEFAULT_TRIALS,
};

const SUBCOMMANDS: [&str; 7] = ["dme", "sweep", "bounds-check", "kmeans", "power", "fedavg", "sgd"];

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("cqsim").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn golden(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.txt"));
    fs::read_to_string(path).unwrap()
}

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("cqsim").chain(args.iter().copied())).unwrap()
}

#[test]
fn help_matches_golden_files() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, 0);
    assert_eq!(out, golden("cqsim"));
    for sub in SUBCOMMANDS {
        let (code, out, _) = run(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        assert_eq!(out, golden(sub), "help for {sub} changed");
    }
}

#[test]
fn help_lists_every_accepted_flag() {
    let common = ["--scheme", "--n", "--k", "--trials", "--seed", "--out", "--config"];
    let task = ["--d", "--dataset", "--rounds", "--points"];
    let expect: [(&str, Vec<&str>); 7] = [
        (
            "dme",
            [&common[..], &["--d", "--dataset", "--generator", "--sigma-md"]].concat(),
        ),
        (
            "sweep",
            [&common[..], &["--d", "--axis", "--grid", "--generator", "--sigma-md"]].concat(),
        ),
        ("bounds-check", vec!["--trials", "--seed", "--out", "--config"]),
        ("kmeans", [&common[..], &task[..], &["--centers"]].concat()),
        ("power", [&common[..], &task[..]].concat()),
        (
            "fedavg",
            [
                &common[..],
                &task[..],
                &[
                    "--test-dataset",
                    "--clients-per-round",
                    "--local-epochs",
                    "--local-batch",
                    "--lr",
                    "--clip-radius",
                    "--projection-radius",
                ],
            ]
            .concat(),
        ),
        (
            "sgd",
            [
                &common[..],
                &task[..],
                &[
                    "--objective",
                    "--l2",
                    "--eta",
                    "--clip-radius",
                    "--projection-radius",
                    "--signal",
                ],
            ]
            .concat(),
        ),
    ];
    for (sub, flags) in expect {
        let help = golden(sub);
        for flag in flags {
            assert!(help.contains(&format!("{flag} <")), "{sub} help lacks {flag}");
        }
    }
}

#[test]
fn dme_defaults() {
    let cli = parse(&["dme"]);
    let inv = resolve(&cli.command).unwrap();
    let RunConfig::Dme(plan) = inv.config else {
        panic!("not dme")
    };
    assert_eq!(
        (plan.n, plan.d, plan.k, plan.trials),
        (DEFAULT_N, DEFAULT_D, DEFAULT_K, DEFAULT_TRIALS)
    );
    assert_eq!((plan.n, plan.d, plan.k, plan.trials), (100, 1024, 2, 10));
    assert_eq!(plan.schemes, SchemeId::ALL.to_vec());
    assert_eq!(plan.generator, Generator::UniformMean);
    assert_eq!(plan.seed, MasterSeed(0));
    assert!(inv.out.is_none());
}

#[test]
fn zero_k_is_rejected_naming_the_flag() {
    let (code, out, err) = run(&["dme", "--k", "0"]);
    assert_eq!(code, 1);
    assert!(out.is_empty());
    assert!(err.contains("--k"), "{err}");
}

#[test]
fn problems_are_reported_together() {
    let cli = parse(&["sgd", "--k", "1", "--n", "0", "--eta", "-1", "--objective", "hinge"]);
    let Err(CliError::Invalid(problems)) = resolve(&cli.command) else {
        panic!("expected validation error")
    };
    for flag in ["--k", "--n", "--eta", "--objective"] {
        assert!(
            problems.iter().any(|p| p.starts_with(flag)),
            "{flag} missing from {problems:?}"
        );
    }
}

#[test]
fn type_errors_and_unknown_flags_exit_one() {
    let (code, _, err) = run(&["dme", "--n", "many"]);
    assert_eq!(code, 1);
    assert!(err.contains("--n"), "{err}");
    let (code, _, err) = run(&["kmeans", "--axis", "k"]);
    assert_eq!(code, 1);
    assert!(err.contains("--axis"), "{err}");
}

#[test]
fn correlated_one_bit_needs_two_levels() {
    let (code, _, err) = run(&["dme", "--scheme", "correlated-1bit", "--k", "4"]);
    assert_eq!(code, 1);
    assert!(err.contains("--k"), "{err}");
    let (code, _, err) = run(&["sweep", "--axis", "k", "--scheme", "correlated-1bit"]);
    assert_eq!(code, 1);
    assert!(err.contains("--scheme"), "{err}");
    let (code, _, err) = run(&["dme", "--scheme", "none"]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown scheme 'none'"), "{err}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "n = 7\nk = 4\ntrials = 3\nscheme = \"independent,entropy-cq\"\nsigma-md = 0.5\n",
    )
    .unwrap();
    let cli = parse(&["dme", "--config", cfg.to_str().unwrap(), "--k", "3"]);
    let RunConfig::Dme(plan) = resolve(&cli.command).unwrap().config else {
        panic!("not dme")
    };
    assert_eq!(plan.k, 3);
    assert_eq!(plan.n, 7);
    assert_eq!(plan.trials, 3);
    assert_eq!(plan.sigma_md, 0.5);
    assert_eq!(plan.schemes, vec![SchemeId::Independent, SchemeId::EntropyCq]);
}

#[test]
fn config_merge_prefers_flags_field_by_field() {
    let file = Settings {
        n: Some(5),
        d: Some(9),
        ..Settings::default()
    };
    let flags = Settings {
        n: Some(6),
        k: Some(8),
        ..Settings::default()
    };
    let merged = flags.over(file);
    assert_eq!(
        (merged.n, merged.d, merged.k, merged.trials),
        (Some(6), Some(9), Some(8), None)
    );
}

#[test]
fn config_file_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "bogus = 1\n").unwrap();
    let (code, _, err) = run(&["dme", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains("bogus"), "{err}");
    fs::write(&cfg, "n = \"ten\"\n").unwrap();
    let (code, _, err) = run(&["dme", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert!(err.contains('n'), "{err}");
    let (code, _, _) = run(&["dme", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code, 1);
}

#[test]
fn config_file_parses_every_key() {
    let text = r#"
scheme = "none,independent"
n = 4
d = 3
k = 2
trials = 1
seed = 9
out = "x.csv"
dataset = "a.csv"
test-dataset = "b.csv"
generator = "sparse-mean"
sigma-md = 0.2
axis = "n"
grid = "1,2"
rounds = 3
points = 5
centers = 2
clients-per-round = 2
local-epochs = 1
local-batch = 4
lr = 0.1
eta = 2.0
clip-radius = 1.5
projection-radius = 4.0
objective = "quadratic"
l2 = 0.01
signal = 1.0
"#;
    let s = Settings::from_toml(text).unwrap();
    assert_eq!(s.clients_per_round, Some(2));
    assert_eq!(s.sigma_md, Some(0.2));
    let cli = parse(&["sgd"]);
    assert!(validate(&cli.command, &s).is_ok());
}

#[test]
fn dme_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let (c1, o1, _) = run(&["dme", "--trials", "1", "--seed", "7", "--out", a.to_str().unwrap()]);
    let (c2, o2, _) = run(&["dme", "--trials", "1", "--seed", "7", "--out", b.to_str().unwrap()]);
    assert_eq!((c1, c2), (0, 0));
    assert_eq!(o1, o2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (_, o3, _) = run(&["dme", "--trials", "1", "--seed", "8"]);
    assert_ne!(o1, o3);
}

#[test]
fn dme_and_sweep_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dme.csv");
    let (code, out, _) = run(&[
        "dme",
        "--n",
        "12",
        "--d",
        "16",
        "--trials",
        "3",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let reports = read_reports(fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(reports.len(), SchemeId::ALL.len());
    for r in &reports {
        assert_eq!((r.n, r.d, r.k, r.trials), (12, 16, 2, 3));
        assert!(out.contains(r.scheme.name()));
    }
    let path = dir.path().join("sweep.csv");
    let args = [
        "sweep", "--axis", "k", "--grid", "2,4", "--n", "8", "--d", "8", "--trials", "2",
    ];
    let (code, out, _) = run(&[&args[..], &["--out", path.to_str().unwrap()]].concat());
    assert_eq!(code, 0);
    let reports = read_reports(fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(reports.len(), 2 * (SchemeId::ALL.len() - 1));
    assert!(reports.iter().all(|r| r.scheme != SchemeId::Correlated1Bit));
    assert_eq!(reports.iter().filter(|r| r.k == 4).count(), SchemeId::ALL.len() - 1);
    assert!(out.starts_with('k'));
}

#[test]
fn task_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &[
            "kmeans",
            "--n",
            "4",
            "--points",
            "10",
            "--d",
            "6",
            "--centers",
            "3",
            "--rounds",
            "3",
            "--trials",
            "2",
        ],
        &[
            "power", "--n", "4", "--points", "10", "--d", "6", "--rounds", "3", "--trials", "2",
        ],
        &[
            "fedavg",
            "--n",
            "6",
            "--points",
            "10",
            "--d",
            "6",
            "--clients-per-round",
            "3",
            "--rounds",
            "3",
            "--trials",
            "2",
        ],
        &["sgd", "--n", "5", "--points", "10", "--rounds", "3", "--trials", "2"],
    ];
    for args in cases {
        let path = dir.path().join(format!("{}.csv", args[0]));
        let (code, out, err) = run(&[args, &["--out", path.to_str().unwrap()]].concat());
        assert_eq!(code, 0, "{}: {err}", args[0]);
        let runs = read_runs(fs::File::open(&path).unwrap()).unwrap();
        assert_eq!(runs.len(), 3 * 2, "{}", args[0]);
        let labels: Vec<&str> = runs.iter().map(|r| r.scheme.as_str()).collect();
        assert_eq!(
            labels,
            [
                "none",
                "none",
                "correlated-klevel",
                "correlated-klevel",
                "independent",
                "independent"
            ]
        );
        assert!(runs.iter().all(|r| r.result.rounds() == 3));
        assert!(out.contains("mean (std)"));
    }
}

#[test]
fn bounds_check_reports_each_bound() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bounds.csv");
    let (code, out, _) = run(&["bounds-check", "--trials", "2000", "--out", path.to_str().unwrap()]);
    let checks = read_bound_checks(fs::File::open(&path).unwrap()).unwrap();
    assert!(!checks.is_empty());
    assert_eq!(out.lines().count(), checks.len());
    for (line, c) in out.lines().zip(&checks) {
        let verdict = if c.passed() { "PASS " } else { "FAIL " };
        assert!(line.starts_with(verdict) && line.contains(&c.name), "{line}");
    }
    let expected = if checks.iter().all(|c| c.passed()) {
        0
    } else {
        corrquant_cli::EXIT_BOUND_FAILED
    };
    assert_eq!(code, expected);
}

#[test]
fn dataset_problems_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = run(&["kmeans", "--dataset", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("missing.csv"), "{err}");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "label,x0,x1\n0,0.5,0.1\n1,0.2\n").unwrap();
    let (code, _, err) = run(&["kmeans", "--dataset", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("row 3"), "{err}");
    fs::write(&bad, "label,x0,x1\n0,0.5,oops\n").unwrap();
    let (code, _, err) = run(&["sgd", "--dataset", bad.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("row 2, column 3"), "{err}");
}

#[test]
fn loaded_datasets_drive_tasks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let mut text = String::from("label,x0,x1\n");
    for i in 0..40 {
        let y = i % 2;
        let sign = if y == 1 { 1.0 } else { -1.0 };
        text.push_str(&format!(
            "{y},{},{}\n",
            sign * (0.5 + 0.01 * i as f64),
            0.02 * (i % 7) as f64
        ));
    }
    fs::write(&path, text).unwrap();
    let p = path.to_str().unwrap();
    let (code, out, err) = run(&["sgd", "--dataset", p, "--n", "4", "--rounds", "5", "--trials", "1"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("independent"));
    let (code, _, err) = run(&[
        "fedavg",
        "--dataset",
        p,
        "--n",
        "4",
        "--clients-per-round",
        "2",
        "--rounds",
        "2",
        "--trials",
        "1",
    ]);
    assert_eq!(code, 0, "{err}");
    let vectors = dir.path().join("vectors.csv");
    fs::write(&vectors, "x0,x1,x2\n0.1,0.2,0.3\n0.2,0.1,0.4\n0.15,0.25,0.35\n").unwrap();
    let (code, out, err) = run(&["dme", "--dataset", vectors.to_str().unwrap(), "--trials", "2"]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("hadamard-cq"));
}

#[test]
fn exit_codes_by_error_kind() {
    let divergence = CliError::Run(corrquant::Error::Divergence { round: 3, metric: 1e7 });
    assert_eq!(divergence.exit_code(), 3);
    let dataset = CliError::Run(corrquant::Error::Dataset {
        row: 2,
        column: 1,
        message: "bad".into(),
    });
    assert_eq!(dataset.exit_code(), 2);
    assert_eq!(CliError::Invalid(vec!["--k: bad".into()]).exit_code(), 1);
}

#[test]
fn binary_reports_exit_status() {
    let bin = env!("CARGO_BIN_EXE_cqsim");
    let ok = Process::new(bin)
        .args(["dme", "--n", "4", "--d", "4", "--trials", "1"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("correlated-1bit"));
    let bad = Process::new(bin).args(["dme", "--k", "0"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--k"));
    let unknown = Process::new(bin).args(["dme", "--frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));
}
