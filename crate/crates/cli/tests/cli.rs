use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use qkdlab::{Basis, Channel, TagStream, TimeTag};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn qkdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qkdlab"))
        .args(args)
        .env_remove("QKDLAB_SCENARIO_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| {
            let mut it = l.split_whitespace();
            (it.next() == Some(key)).then(|| it.last().unwrap().trim_matches('"').parse().unwrap())
        })
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

fn report_field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")).map(|v| v.parse().unwrap()))
        .unwrap_or_else(|| panic!("no {key} in {text}"))
}

#[test]
fn predict_presets() {
    for (name, field_rate) in [("at-alice", 24.0), ("asymmetric", 0.6), ("middle", 0.02)] {
        let r = field(
            &stdout(&qkdlab(&["predict", "--scenario", name])),
            "secure_rate_bits_per_s",
        );
        assert!(r > field_rate / 2.0 && r < field_rate * 2.0, "{name}: {r}");
    }
    let out = qkdlab(&["predict", "--scenario", "moon"]);
    assert_eq!(out.status.code(), Some(2));
    let out = qkdlab(&["predict", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn predict_override_matches_short_link() {
    let zero = stdout(&qkdlab(&["predict", "--scenario", "at-alice", "--bob-arm-db", "0"]));
    let dir = tempfile::tempdir().unwrap();
    let curve = dir.path().join("c.csv");
    stdout(&qkdlab(&[
        "curve",
        "--placement",
        "at-alice",
        "--range",
        "3:3",
        "--field",
        "--out",
        curve.to_str().unwrap(),
    ]));
    let row = fs::read_to_string(&curve).unwrap().lines().nth(1).unwrap().to_string();
    let from_curve: f64 = row.split(',').next_back().unwrap().parse().unwrap();
    assert_eq!(field(&zero, "secure_rate_bits_per_s"), from_curve);
}

#[test]
fn scenario_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let text = include_str!("../../../scenarios/middle.toml").replace("name = \"middle\"", "name = \"custom\"");
    fs::write(dir.path().join("custom.toml"), text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_qkdlab"))
        .args(["predict", "--scenario", "custom"])
        .env("QKDLAB_SCENARIO_DIR", dir.path())
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("custom"));
    assert_eq!(
        field(&text, "qber"),
        field(&stdout(&qkdlab(&["predict", "--scenario", "middle"])), "qber")
    );
}

fn check_curve_csv(path: &Path) -> Vec<Vec<f64>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("attenuation_db,coincidence_rate_per_s,qber,secure_rate_bits_per_s")
    );
    lines
        .map(|l| {
            let row: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(row.len(), 4);
            row
        })
        .collect()
}

#[test]
fn curves() {
    let dir = tempfile::tempdir().unwrap();
    let one = dir.path().join("alice.csv");
    stdout(&qkdlab(&[
        "curve",
        "--placement",
        "at-alice",
        "--range",
        "3:80",
        "--step",
        "1",
        "--out",
        one.to_str().unwrap(),
    ]));
    let rows = check_curve_csv(&one);
    assert_eq!(rows[0][0], 3.0);
    assert_eq!(rows.len(), 78);

    let all = dir.path().join("all");
    stdout(&qkdlab(&[
        "curve",
        "--all",
        "--range",
        "3:80",
        "--out",
        all.to_str().unwrap(),
    ]));
    let asym = check_curve_csv(&all.join("asymmetric.csv"));
    assert_eq!(asym[0][0], 20.0);
    check_curve_csv(&all.join("middle.csv"));

    assert_eq!(
        qkdlab(&["curve", "--placement", "at-alice", "--range", "10:5"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        qkdlab(&["curve", "--placement", "at-alice", "--step", "0"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(qkdlab(&["curve"]).status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        stdout(&qkdlab(&[
            "simulate",
            "--scenario",
            "asymmetric",
            "--duration",
            "3",
            "--seed",
            "7",
            "--out",
            d.to_str().unwrap(),
        ]));
    }
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 7"));
    assert!(manifest.contains("config_sha256"));
    assert_eq!(manifest, fs::read_to_string(b.join("manifest.toml")).unwrap());
    for f in ["alice.qtt", "bob.qtt", "truth.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(qkdlab(&["simulate", "--duration", "0"]).status.code(), Some(2));
}

#[test]
fn middle_preset_pair_count() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&qkdlab(&[
        "simulate",
        "--scenario",
        "middle",
        "--duration",
        "600",
        "--out",
        dir.path().to_str().unwrap(),
    ]));
    let n = field(&text, "true_coincidences");
    // 0.071 transmitted pairs per second
    let expected: f64 = 0.071 * 600.0;
    assert!((n - expected).abs() < 3.0 * expected.sqrt(), "{n}");
    let truth = fs::read_to_string(dir.path().join("truth.csv")).unwrap();
    assert_eq!(truth.lines().next(), Some("pair_id,alice_index,bob_index"));
    assert_eq!(truth.lines().count() - 1, n as usize);

    // well under one pair per 5 s block
    let alice = dir.path().join("alice.qtt");
    let bob = dir.path().join("bob.qtt");
    let out = qkdlab(&[
        "sync",
        alice.to_str().unwrap(),
        bob.to_str().unwrap(),
        "--block-s",
        "5",
        "--out",
        dir.path().join("sync").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sync_recovers_preset_offset() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    stdout(&qkdlab(&[
        "simulate",
        "--duration",
        "10",
        "--out",
        run.to_str().unwrap(),
    ]));
    let out = dir.path().join("sync");
    let text = stdout(&qkdlab(&[
        "sync",
        run.join("alice.qtt").to_str().unwrap(),
        run.join("bob.qtt").to_str().unwrap(),
        "--block-s",
        "5",
        "--scenario",
        "at-alice",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(field(&text, "locked"), 2.0);
    assert!((field(&text, "first_offset_ns") - 2300.0).abs() <= 1.5);
    let drift = fs::read_to_string(out.join("drift.csv")).unwrap();
    assert_eq!(drift.lines().next(), Some("block_start_s,delta_t_ns,significance"));
    let pairs = fs::read_to_string(out.join("coincidences.csv")).unwrap();
    assert_eq!(pairs.lines().next(), Some("alice_index,bob_index,delay_ps"));
    assert_eq!(pairs.lines().count() - 1, field(&text, "coincidences") as usize);
}

/// Hand-built pair of tag files: every event is a coincidence, Bob's
/// same-basis bit is wrong with probability `q`.
fn write_toy(dir: &Path, n: usize, q: f64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = 1_000_000_000_000u64;
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for _ in 0..n {
        t += 1000 + (-(1.0 - rng.random::<f64>()).ln() * 2.0e7) as u64;
        let (ba, bb) = (Basis::from_bit(rng.random()), Basis::from_bit(rng.random()));
        let x: bool = rng.random();
        let y = if ba == bb {
            !x ^ rng.random_bool(q)
        } else {
            rng.random()
        };
        a.push(TimeTag::new(t, Channel::from_bit(x), ba));
        b.push(TimeTag::new(t + 5_000, Channel::from_bit(y), bb));
    }
    let (pa, pb) = (dir.join("a.qtt"), dir.join("b.qtt"));
    TagStream::new(0, a).write_file(&pa).unwrap();
    TagStream::new(0, b).write_file(&pb).unwrap();
    (pa.to_str().unwrap().into(), pb.to_str().unwrap().into())
}

#[test]
fn distill_toy_links() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_toy(dir.path(), 20_000, 0.0);
    let out = dir.path().join("out");
    let text = stdout(&qkdlab(&["distill", &a, &b, "--out", out.to_str().unwrap()]));
    assert_eq!(report_field(&text, "estimated_qber"), 0.0);
    assert_eq!(report_field(&text, "measured_qber"), 0.0);
    for f in [
        "key_material.txt",
        "sifted_rate.csv",
        "drift.csv",
        "transcript.bin",
        "secure_key.hex",
    ] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let rates = fs::read_to_string(out.join("sifted_rate.csv")).unwrap();
    assert_eq!(rates.lines().next(), Some("time_s,sifted_bits,sifted_rate_hz"));
    let key = fs::read_to_string(out.join("secure_key.hex")).unwrap();
    assert_eq!(
        key.trim().len(),
        (report_field(&text, "secure_len") as usize).div_ceil(8) * 2
    );

    // same inputs, same seed: same bytes
    let again = dir.path().join("again");
    stdout(&qkdlab(&["distill", &a, &b, "--out", again.to_str().unwrap()]));
    for f in ["key_material.txt", "transcript.bin", "secure_key.hex"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    // the same link as text files
    let as_text = |src: &str, name: &str| {
        let s = TagStream::read_file(Path::new(src)).unwrap();
        let mut text = String::from("timestamp_ps,channel,basis\n");
        for t in &s.tags {
            let basis = u8::from(t.basis() == Basis::Diagonal);
            text += &format!("{},{},{basis}\n", t.timestamp_ps(), u8::from(t.channel().bit()));
        }
        let path = dir.path().join(name);
        fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_string()
    };
    let (ta, tb) = (as_text(&a, "a.txt"), as_text(&b, "b.txt"));
    let from_text = stdout(&qkdlab(&[
        "distill",
        &ta,
        &tb,
        "--out",
        dir.path().join("text").to_str().unwrap(),
    ]));
    assert_eq!(
        report_field(&from_text, "secure_len"),
        report_field(&text, "secure_len")
    );

    let noisy = tempfile::tempdir().unwrap();
    let (a, b) = write_toy(noisy.path(), 20_000, 0.2);
    let res = qkdlab(&["distill", &a, &b, "--out", noisy.path().join("o").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(4), "{}", String::from_utf8_lossy(&res.stderr));
}
