use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vse(args);
    assert!(
        out.status.success(),
        "vse {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn generate(dir: &Path, name: &str, n: &str, t: &str, smnr: &str, seed: &str) -> String {
    let path = p(dir, name);
    ok(&[
        "generate", "--n", n, "--t", t, "--smnr", smnr, "--seed", seed, "--out", &path,
    ]);
    path
}

fn tiny_train(data: &str, out: &str, epochs: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        data,
        "--out",
        out,
        "--n-limit",
        "32",
        "--epochs",
        epochs,
        "--batch",
        "8",
        "--hidden",
        "6",
        "--head",
        "8",
        "--samples",
        "2",
        "--seed",
        "1",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn generate_is_reproducible_and_requires_out() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.vsedata", "8", "50", "10", "7");
    let b = generate(dir.path(), "b.vsedata", "8", "50", "10", "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(PathBuf::from(format!("{a}.config.json")).exists());
    let missing = vse(&[
        "generate", "--n", "8", "--t", "50", "--smnr", "10", "--seed", "7",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(vse(&["generate", "--bogus"]).status.code(), Some(2));
}

#[test]
fn zero_db_round_trips_through_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(dir.path(), "z.vsedata", "6", "40", "0", "3");
    let text = ok(&["evaluate", "--data", &d, "--smnr-only"]);
    let v: f64 = text
        .trim()
        .strip_prefix("smnr_db=")
        .unwrap()
        .parse()
        .unwrap();
    assert!(v.abs() < 1e-9, "{text}");
    let neg = generate(dir.path(), "n.vsedata", "6", "40", "-5", "3");
    assert!(ok(&["evaluate", "--data", &neg, "--smnr-only"]).starts_with("smnr_db=-5.0000000"));
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "a.vsedata", "4", "20", "5", "11");
    let cfg = format!("{a}.config.json");
    let b = p(dir.path(), "b.vsedata");
    ok(&["generate", "--config", &cfg, "--out", &b]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn train_smoke_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(dir.path(), "d.vsedata", "40", "20", "10", "2");
    let c1 = p(dir.path(), "c1.vseparam");
    let c2 = p(dir.path(), "c2.vseparam");
    tiny_train(&d, &c1, "5", &[]);
    tiny_train(&d, &c2, "5", &[]);
    assert_eq!(std::fs::read(&c1).unwrap(), std::fs::read(&c2).unwrap());
    assert_eq!(
        std::fs::read(format!("{c1}.json")).unwrap(),
        std::fs::read(format!("{c2}.json")).unwrap()
    );
    let log = std::fs::read_to_string(format!("{c1}.log.csv")).unwrap();
    let rows: Vec<&str> = log.lines().collect();
    assert_eq!(
        rows[0],
        "epoch,train_elbo,val_elbo,lr,grad_norm,wall_time_s"
    );
    assert_eq!(rows.len(), 6);

    tiny_train(&d, &c1, "3", &["--resume", &c1]);
    let log = std::fs::read_to_string(format!("{c1}.log.csv")).unwrap();
    let epochs: Vec<usize> = log
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(epochs, (1..=8).collect::<Vec<_>>());
}

#[test]
fn estimates_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(dir.path(), "d.vsedata", "12", "20", "10", "4");
    let ck = p(dir.path(), "m.vseparam");
    tiny_train(&d, &ck, "2", &[]);

    let e = p(dir.path(), "vse.est");
    ok(&["infer", "--model", &ck, "--data", &d, "--out", &e]);
    let text = ok(&["evaluate", "--data", &d, "--estimates", &e]);
    let nmse: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("nmse_db="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(nmse.is_finite());

    assert!(ok(&["evaluate", "--data", &d, "--estimates", &d]).contains("nmse_db=exact"));

    let p1 = p(dir.path(), "pf1.est");
    let p2 = p(dir.path(), "pf2.est");
    ok(&[
        "pf",
        "--data",
        &d,
        "--out",
        &p1,
        "--particles",
        "1",
        "--seed",
        "3",
    ]);
    ok(&[
        "pf",
        "--data",
        &d,
        "--out",
        &p2,
        "--particles",
        "1",
        "--seed",
        "3",
    ]);
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut bytes = std::fs::read(&d).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0xff;
    let bad = p(dir.path(), "bad.vsedata");
    std::fs::write(&bad, &bytes).unwrap();
    std::fs::copy(format!("{d}.json"), format!("{bad}.json")).unwrap();
    let out = vse(&["pf", "--data", &bad, "--out", &p1]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

#[test]
fn sweep_emits_one_row_per_level_and_method() {
    let dir = tempfile::tempdir().unwrap();
    let d = generate(dir.path(), "d.vsedata", "12", "15", "10", "4");
    let ck = p(dir.path(), "m.vseparam");
    tiny_train(&d, &ck, "1", &[]);
    let csv = p(dir.path(), "sweep.csv");
    let m0 = format!("0={ck}");
    let m10 = format!("10={ck}");
    ok(&[
        "sweep",
        "--smnr",
        "0,10",
        "--model",
        &m0,
        "--model",
        &m10,
        "--n",
        "3",
        "--t",
        "15",
        "--particles",
        "30",
        "--out",
        &csv,
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "smnr_db,method,nmse_db,seconds,seed");
    assert_eq!(lines.len(), 5);
    let pairs: Vec<(String, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    for level in ["0", "10"] {
        for method in ["vse", "pf"] {
            assert!(
                pairs.contains(&(level.to_string(), method.to_string())),
                "{pairs:?}"
            );
        }
    }
    let missing = vse(&[
        "sweep", "--smnr", "20", "--n", "2", "--t", "10", "--out", &csv,
    ]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("SMNR 20"));
}
