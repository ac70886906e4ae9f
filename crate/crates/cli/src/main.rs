//! Command-line workflow for the cardio-dg engine.
//!
//! Subcommands: `synth` (generate a multi-site synthetic dataset), `train`
//! (fit a model under a split protocol), `eval` (metrics, stress tests,
//! paired comparisons), `explain` (saliency overlay export), and `bench`
//! (efficiency report).
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every artifact
//! embeds the resolved configuration, seed, tool version, and input
//! manifest hash. Given identical inputs and seeds all outputs are
//! byte-identical except wall-clock latency fields.

use anyhow::{anyhow, bail, Context, Result};
use cardio_dg::dataio::{
    load_checkpoint, load_manifest, save_checkpoint, ArrhythmiaClass, DatasetManifest,
};
use cardio_dg::eval::{
    aggregate, compare_runs, evaluate, make_split, EvalOptions, EvalReport, Protocol, Provenance,
    StressSpec,
};
use cardio_dg::model::{count_params_flops, Model, ModelConfig, Variant};
use cardio_dg::synth::{default_class_mix, default_profiles, generate_dataset, DomainProfile};
use cardio_dg::train::{fit, Loader, TrainConfig, TrainLog};
use cardio_dg::util;
use cardio_dg::xai::{export_overlay, grad_cam, CamLayer};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cardio-dg", version, about = "ECG arrhythmia classification workflows")]
struct Cli {
    /// Cap on worker threads for record-level fan-out.
    #[arg(long, global = true, default_value_t = 2)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic multi-site dataset.
    Synth(SynthArgs),
    /// Train a model variant under a split protocol.
    Train(TrainArgs),
    /// Evaluate checkpoints; optionally stress or compare two sets.
    Eval(EvalArgs),
    /// Export a saliency overlay CSV for one record.
    Explain(ExplainArgs),
    /// Report parameter count, FLOP estimate, and inference latency.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the dataset tree and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Number of acquisition sites (domains).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    domains: u32,
    /// Records per domain.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    records_per_domain: u32,
    /// Global seed (falls back to CARDIO_DG_SEED, then 42).
    #[arg(long)]
    seed: Option<u64>,
    /// JSON file with custom domain profiles (overrides the built-ins).
    #[arg(long)]
    profile_file: Option<PathBuf>,
    /// Record duration in seconds.
    #[arg(long, default_value_t = 10.0)]
    duration_s: f64,
    /// Sampling rate in Hz.
    #[arg(long, default_value_t = 500.0)]
    fs: f64,
    /// Class mix as NAME:FRACTION pairs, e.g. "N:0.55,AF:0.15,PVC:0.15,LBBB:0.15".
    #[arg(long)]
    class_mix: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    manifest: PathBuf,
    /// Model variant.
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Split protocol: intra:DOMAIN, intra:all, or lodo:TARGET.
    #[arg(long)]
    protocol: String,
    /// Optional JSON run config (model + train blocks); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path; trainlog and resolved config go next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoints to evaluate (repeat for a seed set).
    #[arg(long, required = true, num_args = 1..)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Split protocol used to derive the test partition.
    #[arg(long)]
    protocol: String,
    /// Stress spec: lead-drop:K or noise:SNR_DB.
    #[arg(long)]
    stress: Option<String>,
    /// Second checkpoint set for a paired significance comparison.
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
    /// Output directory for report files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Record id from the manifest.
    #[arg(long)]
    record_id: String,
    /// Target class name (defaults to the model's prediction).
    #[arg(long)]
    class: Option<String>,
    /// Target layer: stem or stage1..stage4.
    #[arg(long, default_value = "stage4")]
    layer: String,
    /// Overlay CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Leads to include, by name (default II,V1,V6).
    #[arg(long, default_value = "II,V1,V6")]
    leads: String,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Timing runs (median reported).
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(10..))]
    runs: u32,
    /// Optional JSON output path (printed to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Run configuration file: both blocks optional, flags override fields.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct RunConfigFile {
    #[serde(default)]
    model: Option<ModelConfig>,
    #[serde(default)]
    train: Option<TrainConfig>,
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("CARDIO_DG_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
    })
    .unwrap_or(42)
}

fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if !path.exists() {
        return Err(UsageError(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

/// Errors that are the caller's fault; mapped to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}
impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Train(args) => cmd_train(args, cli.threads),
        Cmd::Eval(args) => cmd_eval(args, cli.threads),
        Cmd::Explain(args) => cmd_explain(args),
        Cmd::Bench(args) => cmd_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn parse_class_mix(s: &str) -> Result<Vec<(ArrhythmiaClass, f64)>> {
    let mut mix = Vec::new();
    for part in s.split(',') {
        let (name, frac) = part
            .split_once(':')
            .ok_or_else(|| UsageError(format!("bad class mix entry '{part}'")))?;
        let class = ArrhythmiaClass::parse(name.trim())
            .ok_or_else(|| UsageError(format!("unknown class '{name}'")))?;
        let frac: f64 = frac
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("bad fraction '{frac}'")))?;
        mix.push((class, frac));
    }
    Ok(mix)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let profiles: Vec<DomainProfile> = match &args.profile_file {
        Some(path) => {
            require_file(path, "profile file")?;
            let text = std::fs::read_to_string(path)?;
            let all: Vec<DomainProfile> = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            if all.len() < args.domains as usize {
                bail!(UsageError(format!(
                    "profile file has {} profiles, need {}",
                    all.len(),
                    args.domains
                )));
            }
            all.into_iter().take(args.domains as usize).collect()
        }
        None => default_profiles(args.domains as usize),
    };
    let mix = match &args.class_mix {
        Some(s) => parse_class_mix(s)?,
        None => default_class_mix(),
    };
    std::fs::create_dir_all(&args.out)?;
    let manifest = generate_dataset(
        &profiles,
        &mix,
        args.records_per_domain as usize,
        args.fs,
        args.duration_s,
        seed,
        &args.out,
    )?;

    println!("wrote {} records to {}", manifest.records.len(), args.out.display());
    println!("{:<12} {:>6}  classes", "domain", "count");
    for profile in &profiles {
        let mut counts: Vec<(String, usize)> = Vec::new();
        for r in manifest.records.iter().filter(|r| r.domain == profile.name) {
            match counts.iter_mut().find(|(l, _)| *l == r.label) {
                Some((_, c)) => *c += 1,
                None => counts.push((r.label.clone(), 1)),
            }
        }
        let total: usize = counts.iter().map(|(_, c)| c).sum();
        let detail: Vec<String> = counts.iter().map(|(l, c)| format!("{l}:{c}")).collect();
        println!("{:<12} {:>6}  {}", profile.name, total, detail.join(" "));
    }
    Ok(())
}

/// Loads and validates the manifest, treating a missing path as usage.
fn open_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf, Vec<u8>)> {
    require_file(path, "manifest")?;
    let manifest = load_manifest(path)?;
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    manifest.validate_files(&base)?;
    let bytes = std::fs::read(path)?;
    Ok((manifest, base, bytes))
}

fn cmd_train(args: TrainArgs, _threads: usize) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (manifest, base, manifest_bytes) = open_manifest(&args.manifest)?;
    let protocol = Protocol::parse(&args.protocol).map_err(UsageError)?;

    let file_cfg: RunConfigFile = match &args.config {
        Some(path) => {
            require_file(path, "config file")?;
            serde_json::from_str(&std::fs::read_to_string(path)?)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfigFile::default(),
    };
    let mut model_cfg = file_cfg.model.unwrap_or_default();
    model_cfg.variant = args.variant;
    model_cfg
        .validate()
        .map_err(|e| anyhow!("invalid model config: {e}"))?;
    let mut train_cfg = file_cfg.train.unwrap_or_default();
    train_cfg.seed = seed;
    let train_cfg = train_cfg.for_variant(args.variant);

    let plan = make_split(&manifest, &protocol, seed)?;
    plan.check_lodo_leakage(&manifest)?;
    let train_loader = Loader::from_manifest(&manifest, &base, &plan.train_ids)?;
    let val_loader = Loader::from_manifest(&manifest, &base, &plan.val_ids)?;

    let mut model: Model<f32> = Model::new(model_cfg.clone(), seed);
    let (checkpoint, log) = fit(&train_loader, &val_loader, &mut model, &train_cfg)?;
    save_checkpoint(&checkpoint, &args.out)?;

    let resolved = serde_json::json!({
        "model": model_cfg,
        "train": train_cfg,
        "protocol": plan.protocol,
        "manifest": args.manifest,
        "variant": args.variant.to_string(),
    });
    let provenance = Provenance::new(seed, &manifest_bytes, resolved.clone());
    write_json(
        &sibling(&args.out, "trainlog.json"),
        &serde_json::json!({ "provenance": provenance, "log": log }),
    )?;
    std::fs::write(sibling(&args.out, "trainlog.csv"), log.to_csv())?;
    write_json(
        &sibling(&args.out, "config.json"),
        &serde_json::json!({ "provenance": provenance }),
    )?;

    println!(
        "trained {} for {} epochs; best val macro-F1 {:.4} at epoch {}; checkpoint: {}",
        args.variant,
        log.epochs.len(),
        log.best_val_macro_f1,
        log.best_epoch,
        args.out.display()
    );
    print_log_tail(&log);
    Ok(())
}

fn print_log_tail(log: &TrainLog) {
    for e in log.epochs.iter().rev().take(3).rev() {
        println!(
            "  epoch {:>3}: train {:.4}  val {:.4}  acc {:.3}  macro-F1 {:.3}  lr {}",
            e.epoch, e.train_loss, e.val_loss, e.val_acc, e.val_macro_f1, e.lr
        );
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    path.with_file_name(name)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn eval_set(
    ckpts: &[PathBuf],
    manifest: &DatasetManifest,
    base: &Path,
    protocol: &Protocol,
    stress: &Option<StressSpec>,
    seed: u64,
    threads: usize,
) -> Result<Vec<EvalReport>> {
    let mut reports = Vec::new();
    for path in ckpts {
        require_file(path, "checkpoint")?;
        let cp = load_checkpoint(path)?;
        let plan = make_split(manifest, protocol, seed)?;
        let resolved = serde_json::json!({
            "checkpoint": path,
            "protocol": plan.protocol,
            "stress": stress.as_ref().map(|s| s.descriptor()),
        });
        let opts = EvalOptions {
            stress: stress.clone(),
            seed,
            threads,
            provenance_config: resolved,
        };
        let report = evaluate(&cp, manifest, base, &plan, &opts)?;
        reports.push(report);
    }
    Ok(reports)
}

fn cmd_eval(args: EvalArgs, threads: usize) -> Result<()> {
    let seed = resolve_seed(args.seed);
    let (manifest, base, _manifest_bytes) = open_manifest(&args.manifest)?;
    let protocol = Protocol::parse(&args.protocol).map_err(UsageError)?;
    let stress = match &args.stress {
        Some(s) => Some(StressSpec::parse(s).map_err(UsageError)?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;

    let reports = eval_set(
        &args.ckpt,
        &manifest,
        &base,
        &protocol,
        &stress,
        seed,
        threads,
    )?;
    for (i, report) in reports.iter().enumerate() {
        let stem = args.ckpt[i]
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("ckpt{i}"));
        write_json(&args.out.join(format!("report_{stem}.json")), report)?;
        std::fs::write(
            args.out.join(format!("confusion_{stem}.csv")),
            report.confusion_csv(),
        )?;
        println!(
            "{stem}: acc {:.4}  macro-F1 {:.4}  AUROC {}  CI [{:.4}, {:.4}]{}",
            report.accuracy,
            report.macro_f1,
            report
                .auroc_macro
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "n/a".into()),
            report.bootstrap_ci.0,
            report.bootstrap_ci.1,
            if report.majority_collapse_flag {
                "  [majority-class collapse]"
            } else {
                ""
            }
        );
    }
    if reports.len() > 1 {
        let agg = aggregate(&reports);
        write_json(&args.out.join("aggregate.json"), &agg)?;
        println!(
            "aggregate over {} runs: macro-F1 {:.4} ± {:.4}, acc {:.4} ± {:.4}",
            agg.n_runs, agg.macro_f1_mean, agg.macro_f1_sd, agg.accuracy_mean, agg.accuracy_sd
        );
    }

    if !args.compare.is_empty() {
        let other = eval_set(
            &args.compare,
            &manifest,
            &base,
            &protocol,
            &stress,
            seed,
            threads,
        )?;
        if other.len() != reports.len() {
            bail!(UsageError(format!(
                "--compare needs matching set sizes ({} vs {})",
                reports.len(),
                other.len()
            )));
        }
        let cmp = compare_runs(&reports, &other)?;
        write_json(&args.out.join("comparison.json"), &cmp)?;
        println!(
            "comparison: W = {}, p = {:.6}, pairs = {} -> {}",
            cmp.wilcoxon.w, cmp.wilcoxon.p_value, cmp.n_pairs, cmp.verdict
        );
    }
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> Result<()> {
    require_file(&args.ckpt, "checkpoint")?;
    let (manifest, base, _bytes) = open_manifest(&args.manifest)?;
    let rec = manifest
        .records
        .iter()
        .find(|r| r.id == args.record_id)
        .ok_or_else(|| UsageError(format!("unknown record id '{}'", args.record_id)))?;
    let record = manifest.load_record(&base, rec)?;
    let cp = load_checkpoint(&args.ckpt)?;
    let mut model: Model<f32> = Model::from_state(cp.config.clone(), &cp.params);
    let layer: CamLayer = args.layer.parse()?;

    let target_class = match &args.class {
        Some(name) => ArrhythmiaClass::parse(name)
            .ok_or_else(|| UsageError(format!("unknown class '{name}'")))?
            .index(),
        None => {
            // predicted class from one eval-mode pass
            let filter = cardio_dg::dsp::design_bandpass(&cardio_dg::dsp::BandpassSpec {
                fs: record.fs,
                ..Default::default()
            })?;
            let mut rng = util::rng_from(&[0]);
            let win = cardio_dg::dsp::preprocess(
                &record,
                &filter,
                &cardio_dg::dsp::WindowSpec::eval(cp.config.window_len),
                &mut rng,
            )?;
            let flat: Vec<f32> = win.iter().flat_map(|l| l.iter().copied()).collect();
            let logits = model.infer(&flat, 1).pop().expect("one row");
            logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        }
    };

    let lead_indices: Vec<usize> = args
        .leads
        .split(',')
        .map(|name| {
            cardio_dg::dataio::LEAD_NAMES
                .iter()
                .position(|&l| l.eq_ignore_ascii_case(name.trim()))
                .ok_or_else(|| UsageError(format!("unknown lead '{name}'")))
        })
        .collect::<Result<_, _>>()?;

    let map = grad_cam(&mut model, &record, target_class, layer)?;
    let csv = export_overlay(&map, &record, &lead_indices)?;
    std::fs::write(&args.out, csv)?;
    println!(
        "saliency for record {} class {} layer {}{} -> {}",
        args.record_id,
        ArrhythmiaClass::from_index(target_class).map(|c| c.name()).unwrap_or("?"),
        map.target_layer,
        if map.no_positive_attribution {
            " [no positive attribution]"
        } else {
            ""
        },
        args.out.display()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    require_file(&args.ckpt, "checkpoint")?;
    let cp = load_checkpoint(&args.ckpt)?;
    let report = count_params_flops(&cp.config, args.runs as usize);
    let ckpt_bytes = std::fs::read(&args.ckpt)?;
    let artifact = serde_json::json!({
        "provenance": Provenance::new(
            cp.meta.seed,
            &ckpt_bytes,
            serde_json::json!({ "checkpoint": args.ckpt, "runs": args.runs }),
        ),
        "report": report,
    });
    if let Some(out) = &args.out {
        write_json(out, &artifact)?;
    }
    println!("variant:        {}", cp.config.variant);
    println!("params:         {}", report.trainable_params);
    println!("flops/forward:  {}", report.flops_per_forward);
    println!("latency (med):  {:.3} ms over {} runs", report.median_latency_ms, report.runs);
    Ok(())
}
