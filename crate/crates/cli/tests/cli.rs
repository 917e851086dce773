use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shadowad::imaging::{load_mask, save_mask, BinaryMask};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shadowad"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: u32, seed: u64) {
    let o = run(&["synth", "--out", s(dir), "--count", &count.to_string(), "--size", "64", "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn write_config(dir: &Path, train: &str) -> PathBuf {
    let path = dir.join("run.json");
    fs::write(&path, format!("{{\"train\": {train}}}")).unwrap();
    path
}

const TINY: &str = r#"{"iterations": 4, "batch_size": 2, "seed": 3, "log_every": 1, "checkpoint_every": 2}"#;

fn train(data: &Path, config: &Path, out: &Path, resume: Option<&Path>) -> Output {
    let mut args = vec!["train", "--data", s(data), "--config", s(config), "--out", s(out)];
    if let Some(r) = resume {
        args.extend(["--resume", s(r)]);
    }
    run(&args)
}

/// Dataset plus a finished tiny run; shared by the model-consuming tests.
fn trained() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 1);
    let cfg = write_config(tmp.path(), TINY);
    let out = tmp.path().join("run");
    let o = train(&data, &cfg, &out, None);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (tmp, data, out)
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_pairs_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, 4, 7);
    synth(&b, 4, 7);
    let fa = files_under(&a);
    assert_eq!(fa.len(), 9);
    assert_eq!(fs::read_dir(a.join("images")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(a.join("masks")).unwrap().count(), 4);
    assert!(a.join("manifest.json").exists());
    assert_eq!(fa, files_under(&b));
}

#[test]
fn synth_rejects_bad_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = run(&["synth", "--out", s(&out), "--count", "0"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--count"), "{}", stderr(&o));
    let o = run(&["synth", "--out", s(&out), "--count", "2", "--k-hi", "1.0"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["synth", "--out", s(&out), "--count", "2", "--texture", "stripes"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_writes_run_directory() {
    let (_tmp, _data, out) = trained();
    for f in ["config.json", "manifest.json", "metrics.csv", "a_final.ckpt", "d_final.ckpt"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("iteration,loss_A"));
    assert!(out.join("checkpoints/iter_000002/state.json").exists());
    let echoed = fs::read_to_string(out.join("config.json")).unwrap();
    assert!(echoed.contains("\"schema_version\": 1"));
    assert!(echoed.contains("\"log_every\": 1"));
    assert!(echoed.contains("\"adam_a\""));
}

#[test]
fn train_config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2, 1);
    let cfg = write_config(tmp.path(), r#"{"iterations": 4, "seed": 3}"#);
    let o = train(&data, &cfg, &tmp.path().join("run"), None);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
    let cfg = write_config(tmp.path(), r#"{"iterations": 4, "batch_size": 2, "seed": 3, "bogus": 1}"#);
    assert_eq!(code(&train(&data, &cfg, &tmp.path().join("run"), None)), 2);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let (tmp, data, first) = trained();
    let cfg = tmp.path().join("run.json");
    let again = tmp.path().join("again");
    assert_eq!(code(&train(&data, &cfg, &again, None)), 0);
    let resumed = tmp.path().join("resumed");
    let o = train(&data, &cfg, &resumed, Some(&first.join("checkpoints/iter_000002")));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["metrics.csv", "a_final.ckpt", "d_final.ckpt"] {
        let reference = fs::read(first.join(f)).unwrap();
        assert_eq!(reference, fs::read(again.join(f)).unwrap(), "{f} differs on rerun");
        assert_eq!(reference, fs::read(resumed.join(f)).unwrap(), "{f} differs after resume");
    }
}

#[test]
fn diverging_training_exits_4_with_record() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 4, 1);
    let cfg = write_config(
        tmp.path(),
        r#"{"iterations": 20, "batch_size": 2, "seed": 3, "adam_a": {"lr": 1e30}, "adam_d": {"lr": 1e30}}"#,
    );
    let out = tmp.path().join("run");
    let o = train(&data, &cfg, &out, None);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(out.join("abort_record.json").exists());
}

#[test]
fn detect_and_attenuate_check_model_role() {
    let (tmp, data, out) = trained();
    let image = data.join("images/0000.png");
    let mask = data.join("masks/0000.png");
    let (a, d) = (out.join("a_final.ckpt"), out.join("d_final.ckpt"));
    let pred = tmp.path().join("pred.png");
    let prob = tmp.path().join("prob.png");
    let o = run(&["detect", "--model", s(&d), "--image", s(&image), "--out", s(&pred), "--prob", s(&prob)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_mask(&pred).unwrap().dims(), (64, 64));
    assert!(prob.exists());
    let o = run(&["detect", "--model", s(&a), "--image", s(&image), "--out", s(&pred)]);
    assert_eq!(code(&o), 5);

    let att = tmp.path().join("att.png");
    let o = run(&["attenuate", "--model", s(&a), "--image", s(&image), "--mask", s(&mask), "--out", s(&att)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(shadowad::imaging::load_image(&att).unwrap().dims(), (64, 64));
    let o = run(&["attenuate", "--model", s(&d), "--image", s(&image), "--mask", s(&mask), "--out", s(&att)]);
    assert_eq!(code(&o), 5);

    let o = run(&["detect", "--model", s(&d), "--image", s(&image), "--out", s(&pred), "--threshold", "1.5"]);
    assert_eq!(code(&o), 2);
    let o = run(&["detect", "--model", s(&tmp.path().join("nope.ckpt")), "--image", s(&image), "--out", s(&pred)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_writes_report() {
    let (tmp, data, out) = trained();
    let report = tmp.path().join("report.json");
    let o = run(&["eval", "--model", s(&out.join("d_final.ckpt")), "--data", s(&data), "--report", s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["image_count"], 4);
    let ber = v["ber"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&ber));
}

fn mask_dir(dir: &Path, masks: &[(&str, &BinaryMask)]) {
    fs::create_dir_all(dir).unwrap();
    for (stem, m) in masks {
        save_mask(m, dir.join(format!("{stem}.png"))).unwrap();
    }
}

#[test]
fn analyze_unmatched_and_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let gt = BinaryMask::from_fn(16, 16, |y, x| (4..10).contains(&y) && (3..12).contains(&x));
    let (p, g) = (tmp.path().join("p"), tmp.path().join("g"));
    mask_dir(&p, &[("a", &gt), ("b", &gt)]);
    mask_dir(&g, &[("a", &gt), ("c", &gt)]);
    let cdf = tmp.path().join("cdf.csv");
    let o = run(&["analyze", "--pred-dir", s(&p), "--gt-dir", s(&g), "--cdf", s(&cdf)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("b, c"), "{}", stderr(&o));

    fs::remove_file(p.join("b.png")).unwrap();
    fs::remove_file(g.join("c.png")).unwrap();
    let o = run(&["analyze", "--pred-dir", s(&p), "--gt-dir", s(&g), "--cdf", s(&cdf), "--max-distance", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&cdf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "distance,fn_cum,fp_cum");
    assert_eq!(lines.len(), 7);
    assert!(lines[1..].iter().enumerate().all(|(d, l)| *l == format!("{d},NA,NA")));
}

/// Distance from every pixel to the nearest shadow pixel that touches a
/// non-shadow 4-neighbour, by enumeration.
fn brute_distance(gt: &BinaryMask, y: usize, x: usize) -> f64 {
    let (h, w) = gt.dims();
    let inside = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
    let mut best = f64::INFINITY;
    for by in 0..h {
        for bx in 0..w {
            if !gt.get(by, bx) {
                continue;
            }
            let edge = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| {
                let (ny, nx) = (by as isize + dy, bx as isize + dx);
                inside(ny, nx) && !gt.get(ny as usize, nx as usize)
            });
            if edge {
                let d = ((by as f64 - y as f64).powi(2) + (bx as f64 - x as f64).powi(2)).sqrt();
                best = best.min(d);
            }
        }
    }
    best
}

#[test]
fn analyze_matches_enumeration() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let tmp = tempfile::tempdir().unwrap();
    let (p, g) = (tmp.path().join("p"), tmp.path().join("g"));
    let max = 12usize;
    let (mut fn_at, mut fp_at) = (vec![0u64; max + 1], vec![0u64; max + 1]);
    let (mut fn_total, mut fp_total) = (0u64, 0u64);
    let mut pairs = Vec::new();
    for i in 0..5 {
        let (cy, cx, r) = (rng.random_range(5..15), rng.random_range(5..15), rng.random_range(3.0..6.0));
        let gt = BinaryMask::from_fn(20, 20, |y, x| {
            ((y as f64 - cy as f64).powi(2) + (x as f64 - cx as f64).powi(2)).sqrt() < r
        });
        let pred = BinaryMask::from_fn(20, 20, |y, x| {
            let flip = rng.random_bool(0.15);
            gt.get(y, x) != flip
        });
        for y in 0..20 {
            for x in 0..20 {
                if pred.get(y, x) == gt.get(y, x) {
                    continue;
                }
                let d = brute_distance(&gt, y, x);
                let (total, at) = if gt.get(y, x) { (&mut fn_total, &mut fn_at) } else { (&mut fp_total, &mut fp_at) };
                *total += 1;
                for (k, slot) in at.iter_mut().enumerate() {
                    if d <= k as f64 {
                        *slot += 1;
                    }
                }
            }
        }
        pairs.push((format!("m{i}"), pred, gt));
    }
    for (stem, pred, gt) in &pairs {
        mask_dir(&p, &[(stem, pred)]);
        mask_dir(&g, &[(stem, gt)]);
    }
    let cdf = tmp.path().join("cdf.csv");
    let o = run(&["analyze", "--pred-dir", s(&p), "--gt-dir", s(&g), "--cdf", s(&cdf), "--max-distance", &max.to_string()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&cdf).unwrap();
    for (d, line) in text.lines().skip(1).enumerate() {
        let expected = format!(
            "{d},{},{}",
            fn_at[d] as f64 / fn_total as f64,
            fp_at[d] as f64 / fp_total as f64
        );
        assert_eq!(line, expected);
    }
}

#[test]
fn thread_cap_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = bin()
        .args(["synth", "--out", s(&out), "--count", "2"])
        .env("SHADOWAD_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
    let o = bin()
        .args(["synth", "--out", s(&out), "--count", "2"])
        .env("SHADOWAD_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
}
