mod manifest;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tridetect::data::{make_synthetic, EmbeddingDataset, Family, Label, SyntheticSpec};
use tridetect::metrics::{cluster_purity, contingency, nmi, pr_curve, roc_curve, MetricReport};
use tridetect::trainer::{evaluate, train_from, Evaluation, TrainState};
use tridetect::{
    run_theory_checks, write_bytes_atomic, Config, ConfigError, Model, TheoryConfig,
};

use manifest::RunManifest;

const SEED_ENV: &str = "TRIDETECT_SEED";

#[derive(Parser)]
#[command(name = "tridetect", version, args_override_self = true, about = "Real/fake detection and fake-source clustering on image embeddings")]
struct Cli {
    /// Global seed; falls back to $TRIDETECT_SEED, then to 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-family embedding dataset.
    Synth(SynthArgs),
    /// Train a detection head on an embedding dataset.
    Train(TrainArgs),
    /// Score a dataset and write detection metrics plus ROC/PR points.
    Eval(EvalArgs),
    /// Write per-sample cluster assignments and cluster-vs-family tables.
    ClusterReport(EvalArgs),
    /// Run the randomized divergence and balancing checks.
    TheoryCheck(TheoryArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 2000)]
    n_real: usize,
    #[arg(long, default_value_t = 1000)]
    n_fake_gan: usize,
    #[arg(long, default_value_t = 1000)]
    n_fake_dm: usize,
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.5)]
    coverage_fraction: f64,
    #[arg(long, default_value_t = 8)]
    modes: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Paired second views (same count and dim as --data).
    #[arg(long)]
    views: Option<PathBuf>,
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint (architecture is taken from it).
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    omega1: Option<String>,
    #[arg(long)]
    omega2: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    clusters: Option<String>,
    /// Hidden widths, comma separated.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    augment_strength: Option<String>,
    #[arg(long)]
    detach_consistency: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset name used in the reports; defaults to the data file stem.
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct TheoryArgs {
    /// Atoms per random distribution (at least 2).
    #[arg(long, default_value_t = 6)]
    atoms: usize,
    /// Also run the balancing checks.
    #[arg(long)]
    sinkhorn: bool,
    /// Directory for the check table and coverage CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        Err(_) => Ok(None),
    }
}

fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<(EmbeddingDataset, Vec<u8>)> {
    let bytes = read_input(path)?;
    let ds = EmbeddingDataset::from_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((ds, bytes))
}

fn load_model(path: &Path) -> Result<(Model, Vec<u8>)> {
    let bytes = read_input(path)?;
    let m = Model::from_checkpoint_bytes(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((m, bytes))
}

/// Writes the manifest, then each output, all via temp-file renames.
fn write_outputs(dir: &Path, manifest: &RunManifest, files: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    manifest.write(&dir.join("manifest.txt"))?;
    for (name, content) in files {
        let p = dir.join(name);
        write_bytes_atomic(&p, content.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, seed: u64) -> Result<()> {
    let spec = SyntheticSpec {
        dim: a.dim,
        n_real: a.n_real,
        n_fake_gan: a.n_fake_gan,
        n_fake_dm: a.n_fake_dm,
        separation: a.separation,
        coverage_fraction: a.coverage_fraction,
        modes: a.modes,
        seed,
        ..SyntheticSpec::default()
    };
    let ds = make_synthetic(&spec)?;
    let mut m = RunManifest::new("synth", seed);
    m.config("dim", spec.dim);
    m.config("n_real", spec.n_real);
    m.config("n_fake_gan", spec.n_fake_gan);
    m.config("n_fake_dm", spec.n_fake_dm);
    m.config("separation", spec.separation);
    m.config("coverage_fraction", spec.coverage_fraction);
    m.config("modes", spec.modes);
    m.config("mode_radius", spec.mode_radius);
    m.config("gan_spread", spec.gan_spread);
    m.config("dm_spread", spec.dm_spread);
    m.config("ambient_std", spec.ambient_std);
    let bytes = ds.to_bytes();
    m.config("output_sha256", manifest::sha256_hex(&bytes));
    let mut manifest_name = a.out.file_name().context("--out needs a file name")?.to_os_string();
    manifest_name.push(".manifest");
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    m.write(&a.out.with_file_name(manifest_name))?;
    write_bytes_atomic(&a.out, &bytes).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} records of dim {} to {}", ds.len(), ds.dim(), a.out.display());
    Ok(())
}

fn resolve_config(a: &TrainArgs, seed_flag: Option<u64>) -> Result<Config> {
    let mut cfg = Config::default();
    if let Some(env) = env_seed()? {
        cfg.seed = env;
    }
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for o in &a.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: o.clone(),
        })?;
        cfg.set(k.trim(), v)?;
    }
    let flags = [
        ("epochs", &a.epochs),
        ("batch_size", &a.batch_size),
        ("lr", &a.lr),
        ("weight_decay", &a.weight_decay),
        ("beta", &a.beta),
        ("omega1", &a.omega1),
        ("omega2", &a.omega2),
        ("tau", &a.tau),
        ("epsilon", &a.epsilon),
        ("sinkhorn_iterations", &a.iterations),
        ("clusters", &a.clusters),
        ("hidden", &a.hidden),
        ("augment_strength", &a.augment_strength),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v)?;
        }
    }
    if a.detach_consistency {
        cfg.detach_consistency = true;
    }
    if let Some(s) = seed_flag {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn epoch_table(state: &TrainState<f64>) -> String {
    let mut s = String::from("epoch,binary,assignment,consistency,cluster,total,median_total,minority_share\n");
    for e in &state.epochs {
        let m = &e.mean;
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            e.epoch,
            m.binary,
            m.assignment,
            m.consistency,
            m.cluster,
            m.total,
            e.median_total,
            e.minority_share()
        )
        .expect("writing to a String");
    }
    s
}

fn cmd_train(a: &TrainArgs, seed_flag: Option<u64>) -> Result<()> {
    let mut cfg = resolve_config(a, seed_flag)?;
    let (ds, data_bytes) = load_dataset(&a.data)?;
    let views = a.views.as_deref().map(load_dataset).transpose()?;
    let resumed = a.resume.as_deref().map(load_model).transpose()?;
    let mut m = RunManifest::new("train", cfg.seed);
    m.input("data", &a.data, &data_bytes);
    if let (Some(p), Some((_, b))) = (&a.views, &views) {
        m.input("views", p, b);
    }
    let state = match &resumed {
        Some((model, bytes)) => {
            m.input("resume", a.resume.as_deref().expect("resume path"), bytes);
            if model.input_dim() != ds.dim() {
                bail!(
                    "checkpoint expects dimension {} but {} has dimension {}",
                    model.input_dim(),
                    a.data.display(),
                    ds.dim()
                );
            }
            let shape = model.shape();
            cfg.clusters = shape.clusters;
            cfg.hidden = shape.hidden;
            TrainState::from_model(model.clone())
        }
        None => TrainState::new(ds.dim(), &cfg)?,
    };
    cfg.validate()?;
    m.config_text(&cfg.to_text());
    let state = train_from(state, &ds, &cfg, views.as_ref().map(|(v, _)| v))?;

    let mut run = cfg.run_header();
    run.push('\n');
    run.push_str(&epoch_table(&state));
    let checkpoint = state.model.to_checkpoint_bytes();
    m.config("output_checkpoint_sha256", manifest::sha256_hex(&checkpoint));
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    m.write(&a.out.join("manifest.txt"))?;
    write_bytes_atomic(&a.out.join("model.tdmd"), &checkpoint).context("writing checkpoint")?;
    write_outputs_only(&a.out, &[("history.csv", state.history_csv()), ("run.txt", run)])?;
    let last = state.epochs.last().expect("at least one epoch");
    eprintln!(
        "trained {} steps; last epoch mean total {:.6}, minority share {:.3}",
        state.step,
        last.mean.total,
        last.minority_share()
    );
    Ok(())
}

fn write_outputs_only(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    for (name, content) in files {
        let p = dir.join(name);
        write_bytes_atomic(&p, content.as_bytes()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn dataset_name(a: &EvalArgs) -> String {
    a.name.clone().unwrap_or_else(|| {
        a.data
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "data".into())
    })
}

fn load_eval(a: &EvalArgs, command: &str, seed: u64) -> Result<(EmbeddingDataset, Evaluation<f64>, RunManifest)> {
    let (model, model_bytes) = load_model(&a.model)?;
    let (ds, data_bytes) = load_dataset(&a.data)?;
    if model.input_dim() != ds.dim() {
        bail!(
            "checkpoint expects dimension {} but {} has dimension {}",
            model.input_dim(),
            a.data.display(),
            ds.dim()
        );
    }
    let eval = evaluate(&model, &ds)?;
    let mut m = RunManifest::new(command, seed);
    m.input("model", &a.model, &model_bytes);
    m.input("data", &a.data, &data_bytes);
    m.config("name", dataset_name(a));
    m.config("threshold", 0.5);
    Ok((ds, eval, m))
}

fn points_csv(header: &str, pts: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (x, y) in pts {
        writeln!(s, "{x},{y}").expect("writing to a String");
    }
    s
}

fn cmd_eval(a: &EvalArgs, seed: u64) -> Result<()> {
    let (_, eval, m) = load_eval(a, "eval", seed)?;
    let report = MetricReport::compute(&dataset_name(a), &eval.samples);
    let mut files = vec![("metrics.csv", report.to_csv()), ("metrics.txt", report.to_text())];
    match (roc_curve(&eval.samples), pr_curve(&eval.samples)) {
        (Ok(roc), Ok(pr)) => {
            files.push(("roc.csv", points_csv("fpr,tpr", &roc)));
            files.push(("pr.csv", points_csv("recall,precision", &pr)));
        }
        _ => eprintln!("warning: ROC and PR curves need both classes; skipped"),
    }
    write_outputs(&a.out, &m, &files)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", report.to_text());
    Ok(())
}

fn label_name(l: Label) -> &'static str {
    if l.is_fake() {
        "fake"
    } else {
        "real"
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::GanLike => "gan",
        Family::DiffusionLike => "diffusion",
        Family::Unknown => "unknown",
    }
}

fn cmd_cluster_report(a: &EvalArgs, seed: u64) -> Result<()> {
    let (_, eval, m) = load_eval(a, "cluster-report", seed)?;
    let mut clusters = String::from("index,label,family,score,cluster\n");
    for (i, s) in eval.samples.iter().enumerate() {
        let c = s.cluster.map(|c| c.to_string()).unwrap_or_default();
        writeln!(clusters, "{i},{},{},{},{c}", label_name(s.label), family_name(s.family), s.score)
            .expect("writing to a String");
    }
    let mut table = String::from("cluster,family,count\n");
    for ((c, f), n) in contingency(&eval.samples) {
        writeln!(table, "{c},{},{n}", family_name(f)).expect("writing to a String");
    }
    let k = eval.argmax_cluster.iter().copied().max().map_or(0, |c| c + 1);
    let mut summary = String::new();
    let shares = eval.fake_cluster_shares(k.max(1));
    writeln!(summary, "dataset: {}", dataset_name(a)).expect("writing to a String");
    writeln!(summary, "fake samples per cluster (share): {shares:?}").expect("writing to a String");
    for (name, v) in [("purity", cluster_purity(&eval.samples)), ("nmi", nmi(&eval.samples))] {
        match v {
            Ok(v) => writeln!(summary, "{name}: {v}"),
            Err(e) => writeln!(summary, "{name}: undefined ({e})"),
        }
        .expect("writing to a String");
    }
    write_outputs(
        &a.out,
        &m,
        &[
            ("clusters.csv", clusters),
            ("contingency.csv", table),
            ("cluster_report.txt", summary.clone()),
        ],
    )?;
    print!("{summary}");
    Ok(())
}

fn cmd_theory(a: &TheoryArgs, seed: u64) -> Result<bool> {
    let cfg = TheoryConfig {
        seed,
        atoms: a.atoms,
        sinkhorn: a.sinkhorn,
        ..TheoryConfig::default()
    };
    let report = run_theory_checks(&cfg)?;
    let table = report.to_text();
    print!("{table}");
    if let Some(dir) = &a.out {
        let mut m = RunManifest::new("theory-check", seed);
        m.config("atoms", cfg.atoms);
        m.config("pairs", cfg.pairs);
        m.config("discriminator_pairs", cfg.discriminator_pairs);
        m.config("discriminators_per_pair", cfg.discriminators_per_pair);
        m.config("latent_models", cfg.latent_models);
        m.config("support_instances", cfg.support_instances);
        m.config("sinkhorn", cfg.sinkhorn);
        m.config("sinkhorn_instances", cfg.sinkhorn_instances);
        write_outputs(
            dir,
            &m,
            &[("checks.txt", table), ("coverage.csv", report.coverage.to_csv())],
        )?;
    } else {
        print!("\n{}", report.coverage.to_csv());
    }
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<bool> {
    let seed = match cli.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, seed)?,
        Command::Train(a) => cmd_train(a, cli.seed)?,
        Command::Eval(a) => cmd_eval(a, seed)?,
        Command::ClusterReport(a) => cmd_cluster_report(a, seed)?,
        Command::TheoryCheck(a) => return cmd_theory(a, seed),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
