use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use agsenet::data::{load_manifest, load_raw_f32, load_samples};
use agsenet::metrics::{confusion, ConfusionCounts};

fn agsenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agsenet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = agsenet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["images", "masks", "depth"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
        }
    }
    out.insert("manifest.tsv".into(), fs::read(dir.join("manifest.tsv")).unwrap());
    out
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    ok(&["--help"]);
    for sub in ["train", "eval", "infer", "synth", "fog"] {
        let out = ok(&[sub, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--"), "{sub} help lists no flags");
    }
    let train = String::from_utf8_lossy(&ok(&["train", "--help"]).stdout).into_owned();
    for flag in ["--manifest", "--out", "--epochs", "--batch", "--lr", "--wd", "--freeze-ssie", "--size", "--seed"] {
        assert!(train.contains(flag), "train help lacks {flag}");
    }
}

#[test]
fn usage_errors_exit_one_runtime_errors_exit_two() {
    assert_eq!(agsenet(&["synth", "--bogus"]).status.code(), Some(1));
    assert_eq!(agsenet(&["eval"]).status.code(), Some(1));
    let out = agsenet(&[
        "eval",
        "--manifest",
        "/nonexistent/m.tsv",
        "--ckpt",
        "/nonexistent",
        "--report",
        "/tmp/x",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert_eq!(msg.trim().lines().count(), 1, "{msg}");
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", s(d), "--count", "2", "--size", "64", "--seed", "7"]);
    }
    let fa = files(&a);
    assert_eq!(fa.len(), 7);
    assert_eq!(fa, files(&b));
    let samples = load_samples(&a.join("manifest.tsv")).unwrap();
    assert_eq!(samples.len(), 2);
    assert!(samples.iter().all(|s| s.depth.is_some() && s.mask.sum_f64() > 0.0));
}

#[test]
fn zero_beta_fog_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    let fogged = dir.path().join("fog");
    ok(&["synth", "--out", s(&src), "--count", "2", "--size", "64", "--seed", "3"]);
    ok(&[
        "fog",
        "--manifest",
        s(&src.join("manifest.tsv")),
        "--beta",
        "0",
        "--light",
        "0.8",
        "--out",
        s(&fogged),
    ]);
    for e in load_manifest(&src.join("manifest.tsv")).unwrap() {
        let name = e.image.file_name().unwrap();
        assert_eq!(
            fs::read(&e.image).unwrap(),
            fs::read(fogged.join("images").join(name)).unwrap()
        );
    }
    ok(&[
        "fog",
        "--manifest",
        s(&src.join("manifest.tsv")),
        "--beta",
        "0.05",
        "--light",
        "0.8",
        "--out",
        s(&dir.path().join("thick")),
    ]);
    let before = load_samples(&src.join("manifest.tsv")).unwrap();
    let after = load_samples(&dir.path().join("thick/manifest.tsv")).unwrap();
    assert_ne!(before[0].image, after[0].image);
    assert_eq!(before[0].mask, after[0].mask);
}

#[test]
fn indivisible_training_size_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "1", "--size", "80", "--seed", "1"]);
    let out = agsenet(&[
        "train",
        "--manifest",
        s(&data.join("manifest.tsv")),
        "--out",
        s(&dir.path().join("run")),
        "--size",
        "80",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible by 32"));
}

#[test]
fn infer_outputs_agree_with_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--out", s(&data), "--count", "3", "--size", "64", "--seed", "11"]);
    let manifest = data.join("manifest.tsv");
    ok(&[
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(&run),
        "--epochs",
        "2",
        "--freeze-ssie",
        "1",
        "--size",
        "64",
        "--lr",
        "0.01",
        "--eval-every",
        "0",
    ]);
    let ckpt = run.join("final");
    assert!(run.join("train.log").exists());
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().next().unwrap().split(' ').count(), 5);

    let report = dir.path().join("report.txt");
    ok(&["eval", "--manifest", s(&manifest), "--ckpt", s(&ckpt), "--report", s(&report)]);
    let kv: BTreeMap<String, String> = fs::read_to_string(dir.path().join("report.txt.kv"))
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let count = |k: &str| kv[k].parse::<u64>().unwrap();
    let eval_counts = ConfusionCounts::new(count("tp"), count("tn"), count("fp"), count("fn"));

    let mut raw_counts = ConfusionCounts::default();
    let mut png_counts = ConfusionCounts::default();
    let mut near_threshold = 0u64;
    for sample in load_samples(&manifest).unwrap() {
        let img = data.join("images").join(format!("{}.png", sample.id));
        let png = dir.path().join(format!("{}_prob.png", sample.id));
        let raw = dir.path().join(format!("{}_prob.f32", sample.id));
        let overlay = dir.path().join(format!("{}_overlay.png", sample.id));
        ok(&[
            "infer",
            "--image",
            s(&img),
            "--ckpt",
            s(&ckpt),
            "--out",
            s(&png),
            "--raw",
            s(&raw),
            "--overlay",
            s(&overlay),
        ]);
        assert!(overlay.exists());
        let exact = load_raw_f32(&raw).unwrap();
        raw_counts += confusion(&exact, &sample.mask, 0.5).unwrap();
        near_threshold += exact.data().iter().filter(|&&p| (p - 0.5).abs() <= 1.0 / 255.0).count() as u64;

        let gray = agsenet::data::load_image(&png).unwrap();
        let quantized = agsenet::Tensor::new(vec![1, 1, 64, 64], gray.data()[..64 * 64].to_vec()).unwrap();
        for (&q, &p) in quantized.data().iter().zip(exact.data()) {
            assert!((q - p).abs() <= 0.5 / 255.0 + 1e-6, "{q} vs {p}");
        }
        png_counts += confusion(&quantized, &sample.mask, 0.5).unwrap();
    }
    assert_eq!(raw_counts, eval_counts);
    let flips = png_counts.tp.abs_diff(eval_counts.tp) + png_counts.fp.abs_diff(eval_counts.fp);
    assert!(flips <= near_threshold, "{flips} flips, {near_threshold} pixels near threshold");
}
