use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tridetect::data::make_synthetic_with_layout;
use tridetect::{read_dataset, write_dataset, EmbeddingDataset, Family, Label, Record, SyntheticSpec};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tridetect"));
    c.env_remove("TRIDETECT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawning tridetect")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "tridetect {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn small_synth(dir: &Path, name: &str, seed: u64, dim: usize) -> PathBuf {
    let p = dir.join(name);
    ok(&[
        "synth",
        "--out",
        s(&p),
        "--seed",
        &seed.to_string(),
        "--dim",
        &dim.to_string(),
        "--n-real",
        "300",
        "--n-fake-gan",
        "150",
        "--n-fake-dm",
        "150",
    ]);
    p
}

fn train_small(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(out),
        "--epochs",
        "4",
        "--batch-size",
        "64",
        "--lr",
        "0.001",
        "--hidden",
        "32,16",
    ];
    args.extend_from_slice(extra);
    run(&args)
}

fn parse_points(text: &str) -> Vec<(f64, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let (a, b) = l.split_once(',').expect("two columns");
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_synth(dir.path(), "a.tdem", 11, 16);
    let b = small_synth(dir.path(), "b.tdem", 11, 16);
    let c = small_synth(dir.path(), "c.tdem", 12, 16);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let manifest = fs::read_to_string(dir.path().join("a.tdem.manifest")).unwrap();
    assert!(manifest.contains("command = synth"));
    assert!(manifest.contains("seed = 11"));
    assert!(manifest.contains("config.output_sha256 = "));
}

#[test]
fn seed_env_var_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag.tdem");
    let env = dir.path().join("env.tdem");
    ok(&["synth", "--out", s(&flag), "--seed", "7", "--n-real", "20"]);
    let out = bin()
        .env("TRIDETECT_SEED", "7")
        .args(["synth", "--out", s(&env), "--n-real", "20"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(&flag).unwrap(), fs::read(&env).unwrap());
}

#[test]
fn synth_gan_family_covers_half_the_modes() {
    for seed in 0..5 {
        audit_modes(seed);
    }
}

fn audit_modes(seed: u64) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.tdem");
    ok(&["synth", "--out", s(&p), "--seed", &seed.to_string(), "--coverage-fraction", "0.5"]);
    let ds = read_dataset(&p).unwrap();
    let spec = SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    };
    let (_, layout) = make_synthetic_with_layout(&spec).unwrap();
    assert_eq!(layout.gan_modes.len(), 4);

    let nearest_mode = |x: &[f32], offset: &[f64]| -> usize {
        let proj = |u: &[f64]| x.iter().zip(offset).zip(u).map(|((&x, o), u)| (x as f64 - o) * u).sum::<f64>();
        let (a, b) = (proj(&layout.plane[0]), proj(&layout.plane[1]));
        let center = |c: &[f64]| {
            let ca: f64 = c.iter().zip(&layout.plane[0]).map(|(x, u)| x * u).sum();
            let cb: f64 = c.iter().zip(&layout.plane[1]).map(|(x, u)| x * u).sum();
            (a - ca).powi(2) + (b - cb).powi(2)
        };
        (0..layout.mode_centers.len())
            .min_by(|&i, &j| center(&layout.mode_centers[i]).total_cmp(&center(&layout.mode_centers[j])))
            .unwrap()
    };

    let mut gan = [0usize; 8];
    let mut dm = vec![0usize; 8];
    for r in ds.records() {
        match r.family {
            Family::GanLike => gan[nearest_mode(&r.embedding, &layout.gan_offset)] += 1,
            Family::DiffusionLike => dm[nearest_mode(&r.embedding, &layout.dm_offset)] += 1,
            Family::Unknown => {}
        }
    }
    let n_gan: usize = gan.iter().sum();
    for (m, &count) in gan.iter().enumerate() {
        let share = count as f64 / n_gan as f64;
        if layout.gan_modes.contains(&m) {
            assert!(share >= 0.125, "seed {seed}: covered mode {m} holds only {share}");
        } else {
            assert_eq!(count, 0, "seed {seed}: uncovered mode {m} holds {count} samples");
        }
    }
    assert!(dm.iter().all(|&c| c > 0), "diffusion-like family misses a mode: {dm:?}");
}

#[test]
fn train_eval_and_cluster_report_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.tdem", 5, 16);
    let run_dir = dir.path().join("run");
    let out = train_small(&data, &run_dir, &["--seed", "9"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.tdmd", "history.csv", "run.txt", "manifest.txt"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let history = fs::read_to_string(run_dir.join("history.csv")).unwrap();
    assert!(history.starts_with("step,binary,assignment,consistency,cluster,total\n"));
    assert_eq!(history.lines().count(), 1 + 4 * 10);
    let run_txt = fs::read_to_string(run_dir.join("run.txt")).unwrap();
    assert!(run_txt.contains("decoupled weight decay"));
    assert!(run_txt.contains("seed = 9"));
    let manifest = fs::read_to_string(run_dir.join("manifest.txt")).unwrap();
    assert!(manifest.contains("input.data = "));
    assert!(manifest.contains("sha256:"));

    let model = run_dir.join("model.tdmd");
    let ev = dir.path().join("eval");
    let out = ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("auc"));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("dataset,metric,value\nd,acc,"));
    for m in ["acc", "auc", "eer", "ap", "purity", "nmi"] {
        assert!(metrics.contains(&format!("d,{m},")), "{m} missing from {metrics}");
    }

    let roc = parse_points(&fs::read_to_string(ev.join("roc.csv")).unwrap());
    assert_eq!(roc.first(), Some(&(0.0, 0.0)));
    assert_eq!(roc.last(), Some(&(1.0, 1.0)));
    assert!(roc.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    let pr = parse_points(&fs::read_to_string(ev.join("pr.csv")).unwrap());
    assert!(pr.iter().all(|&(r, p)| (0.0..=1.0).contains(&r) && (0.0..=1.0).contains(&p)));

    let cr = dir.path().join("clusters");
    ok(&["cluster-report", "--model", s(&model), "--data", s(&data), "--out", s(&cr)]);
    let clusters = fs::read_to_string(cr.join("clusters.csv")).unwrap();
    assert_eq!(clusters.lines().count(), 1 + 600);
    assert!(fs::read_to_string(cr.join("contingency.csv")).unwrap().starts_with("cluster,family,count\n"));
    assert!(fs::read_to_string(cr.join("cluster_report.txt")).unwrap().contains("purity: "));
}

#[test]
fn training_is_reproducible_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.tdem", 2, 8);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(train_small(&data, &a, &["--seed", "4"]).status.success());
    assert!(train_small(&data, &b, &["--seed", "4"]).status.success());
    for f in ["model.tdmd", "history.csv", "run.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let model = a.join("model.tdmd");
    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&ea)]);
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&eb)]);
    for f in ["metrics.csv", "metrics.txt", "roc.csv", "pr.csv"] {
        assert_eq!(fs::read(ea.join(f)).unwrap(), fs::read(eb.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.tdem", 2, 8);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# small run\nepochs = 9\nbeta = 0.5\nseed = 21\n").unwrap();
    let out_dir = dir.path().join("run");
    let out = train_small(&data, &out_dir, &["--config", s(&cfg), "--set", "omega2=0.2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_txt = fs::read_to_string(out_dir.join("run.txt")).unwrap();
    assert!(run_txt.contains("epochs = 4"), "flag should win over the file");
    assert!(run_txt.contains("beta = 0.5"));
    assert!(run_txt.contains("omega2 = 0.2"));
    assert!(run_txt.contains("seed = 21"));
}

#[test]
fn missing_input_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = train_small(&dir.path().join("nope.tdem"), &out_dir, &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.tdem"));
    assert!(!out_dir.exists());

    let ev = dir.path().join("ev");
    let out = run(&["eval", "--model", "/nonexistent.tdmd", "--data", "/nonexistent.tdem", "--out", s(&ev)]);
    assert!(!out.status.success());
    assert!(!ev.exists());
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.tdem", 2, 8);
    let out_dir = dir.path().join("run");
    for text in ["not a config line\n", "no_such_key = 3\n", "beta = 1.5\n", "epochs = many\n"] {
        let cfg = dir.path().join("bad.cfg");
        fs::write(&cfg, text).unwrap();
        let out = train_small(&data, &out_dir, &["--config", s(&cfg)]);
        assert_eq!(out.status.code(), Some(2), "config {text:?}");
        assert!(!out_dir.exists());
    }
    let out = train_small(&data, &out_dir, &["--set", "tau"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_checks_dimensions_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d8 = small_synth(dir.path(), "d8.tdem", 2, 8);
    let d12 = small_synth(dir.path(), "d12.tdem", 2, 12);
    let first = dir.path().join("first");
    assert!(train_small(&d8, &first, &["--clusters", "3"]).status.success());
    let ckpt = first.join("model.tdmd");

    let bad = dir.path().join("bad");
    let out = train_small(&d12, &bad, &["--resume", s(&ckpt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dimension"));
    assert!(!bad.exists());

    let second = dir.path().join("second");
    let out = train_small(&d8, &second, &["--resume", s(&ckpt), "--hidden", "64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run_txt = fs::read_to_string(second.join("run.txt")).unwrap();
    assert!(run_txt.contains("clusters = 3"));
    assert!(run_txt.contains("hidden = 32,16"));
    assert!(fs::read_to_string(second.join("manifest.txt")).unwrap().contains("input.resume = "));
}

#[test]
fn divergent_training_aborts_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synth(dir.path(), "d.tdem", 2, 8);
    let out_dir = dir.path().join("run");
    let out = train_small(&data, &out_dir, &["--lr", "1e300", "--set", "adam_eps=1e-300"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite") && err.contains("step"), "{err}");
    assert!(!out_dir.exists());
}

fn write_unlabeled_families(path: &Path, single_class: bool) {
    let mut ds = EmbeddingDataset::new(4);
    for i in 0..40 {
        let fake = !single_class && i % 2 == 1;
        let v = i as f32 / 40.0;
        ds.push(Record {
            embedding: vec![v, -v, if fake { 1.0 } else { -1.0 }, 0.5],
            label: if fake { Label::Fake } else { Label::Real },
            family: Family::Unknown,
        })
        .unwrap();
    }
    write_dataset(&ds, path).unwrap();
}

#[test]
fn eval_handles_unknown_families_and_single_class_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("u.tdem");
    write_unlabeled_families(&data, false);
    let run_dir = dir.path().join("run");
    assert!(train_small(&data, &run_dir, &["--batch-size", "8"]).status.success());
    let model = run_dir.join("model.tdmd");

    let ev = dir.path().join("ev");
    ok(&["eval", "--model", s(&model), "--data", s(&data), "--out", s(&ev)]);
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.contains("u,auc,"));
    assert!(!metrics.contains("purity") && !metrics.contains("nmi"));

    let single = dir.path().join("s.tdem");
    write_unlabeled_families(&single, true);
    let ev = dir.path().join("ev_single");
    let out = ok(&["eval", "--model", s(&model), "--data", s(&single), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let metrics = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert!(metrics.contains("s,auc,undefined"));
    assert!(!ev.join("roc.csv").exists());
}

fn pass_lines(stdout: &[u8]) -> usize {
    String::from_utf8_lossy(stdout).lines().filter(|l| l.starts_with("PASS ")).count()
}

#[test]
fn theory_check_passes_by_default() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("theory");
    let out = ok(&["theory-check", "--out", s(&out_dir)]);
    assert_eq!(pass_lines(&out.stdout), 9);
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    let coverage = fs::read_to_string(out_dir.join("coverage.csv")).unwrap();
    assert!(coverage.starts_with("support_size,best_js,kl_status,candidates\n"));
    assert_eq!(coverage.lines().count(), 1 + 6);
    assert!(out_dir.join("checks.txt").is_file());
    assert!(out_dir.join("manifest.txt").is_file());
}

#[test]
fn theory_check_passes_across_seeds() {
    for seed in 0..20 {
        let out = ok(&["theory-check", "--seed", &seed.to_string(), "--sinkhorn"]);
        assert_eq!(pass_lines(&out.stdout), 12, "seed {seed}");
    }
}

#[test]
fn theory_check_with_two_atoms() {
    let out = ok(&["theory-check", "--atoms", "2"]);
    assert_eq!(pass_lines(&out.stdout), 9);
    let out = run(&["theory-check", "--atoms", "1"]);
    assert!(!out.status.success());
}
