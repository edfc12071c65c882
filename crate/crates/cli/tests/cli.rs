use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pipsim_core::feature::FeatureMap;

fn pipsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pipsim"))
        .args(args)
        .env_remove("PIPSIM_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// 16x16 binary PGM with a deterministic gradient, and a two-channel 3x3
/// stride-2 weights file.
fn fixtures(dir: &Path) -> (PathBuf, PathBuf) {
    let scene = dir.join("scene.pgm");
    let mut bytes = b"P5\n16 16\n255\n".to_vec();
    bytes.extend((0..256u32).map(|i| ((i * 37 + 11) % 256) as u8));
    fs::write(&scene, bytes).unwrap();

    let weights = dir.join("w.txt");
    let mut text = String::from("3 2 2\n");
    for ch in 0..2i32 {
        for i in 0..36i32 {
            text.push_str(&format!("{} ", ((i * 53 + ch * 17) % 255) - 127));
        }
        text.push('\n');
    }
    fs::write(&weights, text).unwrap();
    (scene, weights)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ideal_simulation_matches_oracle_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, weights) = fixtures(dir.path());
    let out = dir.path().join("run");
    let o = pipsim(&[
        "simulate",
        "--scene",
        s(&scene),
        "--weights",
        s(&weights),
        "--ideal",
        "--oracle",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for ch in 0..2 {
        let sim = FeatureMap::parse_csv_values(&fs::read_to_string(out.join(format!("c{ch}.csv"))).unwrap()).unwrap();
        let oracle =
            FeatureMap::parse_csv_values(&fs::read_to_string(out.join(format!("oracle_c{ch}.csv"))).unwrap()).unwrap();
        assert_eq!((sim.0, sim.1), (oracle.0, oracle.1));
        assert_eq!((sim.0, sim.1), (6, 6));
        let scale = oracle.2.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in sim.2.iter().zip(&oracle.2) {
            assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
        }
    }
    assert!(out.join("schedule.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn same_seed_gives_identical_bytes_and_replay_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, weights) = fixtures(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = pipsim(&[
            "simulate",
            "--scene",
            s(&scene),
            "--weights",
            s(&weights),
            "--noise",
            "on",
            "--seed",
            "42",
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["c0.csv", "c1.csv", "codes.csv", "schedule.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let c = dir.path().join("c");
    let o = pipsim(&["replay", s(&a.join("manifest.json")), "--out", s(&c), "--verify"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let other = pipsim(&[
        "simulate",
        "--scene",
        s(&scene),
        "--weights",
        s(&weights),
        "--noise",
        "on",
        "--seed",
        "43",
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(code(&other), 0);
    assert_ne!(
        fs::read(a.join("c0.csv")).unwrap(),
        fs::read(dir.path().join("d/c0.csv")).unwrap()
    );
}

#[test]
fn missing_weights_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, _) = fixtures(dir.path());
    let o = pipsim(&[
        "simulate",
        "--scene",
        s(&scene),
        "--weights",
        "/nonexistent/w.txt",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 11);
}

#[test]
fn bad_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, weights) = fixtures(dir.path());
    let cfg = dir.path().join("sensor.cfg");
    fs::write(&cfg, "c_fd = 22e-15\nbogus = 1\n").unwrap();
    let o = pipsim(&[
        "simulate",
        "--config",
        s(&cfg),
        "--scene",
        s(&scene),
        "--weights",
        s(&weights),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 10);
}

#[test]
fn rates_defaults_and_errors() {
    let o = pipsim(&["rates"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for line in [
        "3,2,128,327.68,3840.00,3840",
        "5,2,128,234.06",
        "7,2,128,182.04",
        "9,2,128,148.95,436.36,436",
    ] {
        assert!(text.contains(line), "{line} missing from\n{text}");
    }
    assert_eq!(code(&pipsim(&["rates", "--r", "4"])), 12);
    assert_eq!(code(&pipsim(&["rates", "--s", "3"])), 12);
    assert_eq!(code(&pipsim(&["rates", "--fps=-1"])), 10);
}

#[test]
fn power_table_and_scaling() {
    let o = pipsim(&["power"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("60,3,2,63.94,4.02,177.17,245.13,4.62,3.90"));
    assert!(text.contains("60,7,4,87.02,1.00,44.29,132.32,11.65,2.10"));

    let half = String::from_utf8(pipsim(&["power", "--fps", "30"]).stdout).unwrap();
    let total: f64 = half.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert!((total - 245.13 / 2.0).abs() < 0.01);

    assert_eq!(code(&pipsim(&["power", "--fps", "0"])), 10);
}

#[test]
fn sweep_validation_and_ideal_cell() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, weights) = fixtures(dir.path());
    let out = dir.path().join("sweep");
    let base = [
        "sweep-noise",
        "--scene",
        s(&scene),
        "--weights",
        s(&weights),
        "--out",
        s(&out),
    ];

    let zero = pipsim(&[&base[..], &["--trials", "0"]].concat());
    assert_eq!(code(&zero), 10);

    let o = pipsim(
        &[
            &base[..],
            &["--ideal", "--snr", "inf", "--mismatch", "0", "--trials", "1"],
        ]
        .concat(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let rms: f64 = row[2].parse().unwrap();
    assert!(rms <= 1e-6, "{rms}");
}

#[test]
fn strict_schedule_and_usage_errors() {
    assert_eq!(code(&pipsim(&["schedule", "--r", "9", "--s", "4"])), 0);
    assert_eq!(code(&pipsim(&["schedule", "--r", "4"])), 12);
    // Reads this short leave no room to expose behind the other groups.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fast_reads.cfg");
    fs::write(&cfg, "t_rd = 1e-9\n").unwrap();
    assert_eq!(code(&pipsim(&["schedule", "--config", s(&cfg), "--strict"])), 13);
    assert_eq!(code(&pipsim(&["simulate", "--bogus"])), 2);
}

#[test]
fn thread_cap_is_validated() {
    let o = Command::new(env!("CARGO_BIN_EXE_pipsim"))
        .args(["rates"])
        .env("PIPSIM_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 10);
}
