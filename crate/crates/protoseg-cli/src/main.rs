//! Command-line front end for the few-shot segmentation library.
//!
//! Subcommands cover the full workflow: generating the synthetic two-domain
//! benchmark, picking support images, adapting an encoder on one episode,
//! and the evaluation protocols (episode scoring, two-fold seen/unseen,
//! support sweep, random-support study, feature dumps).
//!
//! Exit codes: 0 on success, 1 for usage problems (bad flags, malformed
//! config file), 2 for runtime or numerics failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use protoseg::{
    dump_features, embed_all, eval_unseen, evaluate_with_masks, finetune, generate_synthetic,
    load_checkpoint, load_dataset, make_episodes, random_support_study, save_checkpoint,
    save_dataset, save_mask_png, select_support, sweep_support, Dataset, DomainAppearance,
    Episode, FineTuneConfig, Reduction, Strategy, SynthConfig, ToyArchConfig, ToyEncoder,
};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "protoseg",
    version,
    about = "Prototype-based few-shot segmentation: benchmark generation, \
             transductive fine-tuning, and evaluation protocols"
)]
struct Cli {
    /// Key=value overrides, one per line ('#' starts a comment). Keys cover
    /// the fine-tuning config (lr, iterations, margin, clusters, ...), the
    /// synthetic generator (size, count_a, a_fg_mean, b_texture_freq, ...),
    /// and the fresh-encoder architecture (arch_widths, arch_downsample, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for data generation, support sampling, and fine-tuning.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory all outputs are written under.
    #[arg(long, global = true, default_value = "protoseg-out")]
    out: PathBuf,

    /// Encoder checkpoint to start from; a fresh seeded encoder is
    /// initialized when omitted.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the seeded synthetic cross-domain benchmark (domain_a/ and
    /// domain_b/ dataset directories).
    SynthGen,

    /// Cluster whole-image embeddings and write the k ids nearest the
    /// cluster centers to selected_ids.txt (one id per line).
    SelectSupport {
        /// Dataset directory (images/ + masks/ [+ manifest]).
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long, default_value_t = 1)]
        k: usize,
    },

    /// Adapt the encoder on one episode and write the per-iteration run log,
    /// the tuned checkpoint, and a summary.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated support ids; the remaining images become queries.
        #[arg(long, value_delimiter = ',')]
        support: Vec<String>,
        /// Plain-text manifest with one support id per line (as written by
        /// select-support); merged with --support.
        #[arg(long)]
        support_file: Option<PathBuf>,
        #[arg(long, default_value = "cpc")]
        strategy: Strategy,
    },

    /// Score a frozen encoder on one episode; writes eval_report.json and
    /// the predicted masks as 8-bit PNGs under masks/.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        support: Vec<String>,
        #[arg(long)]
        support_file: Option<PathBuf>,
    },

    /// Two-fold protocol: tune on each fold, score on the fold (seen) and on
    /// the other fold (unseen); writes unseen_report.json.
    EvalUnseen {
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long, default_value_t = 1)]
        k: usize,
    },

    /// Use every image in turn as the 1-shot support (no fine-tuning) and
    /// report min/max/avg plus the embedding-selected representative.
    SweepSupport {
        #[arg(long)]
        data: PathBuf,
    },

    /// Fine-tune on randomly drawn k-shot supports (one row per seed) and on
    /// the embedding-selected support; writes study_report.json.
    RandomSupportStudy {
        #[arg(long)]
        data: PathBuf,
        #[arg(short, long, default_value_t = 1)]
        k: usize,
        /// Comma-separated seeds, one random support draw per seed.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },

    /// Write every image's per-pixel feature vectors with class labels as
    /// line-delimited records for external projection tools.
    DumpFeatures {
        #[arg(long)]
        data: PathBuf,
    },
}

/// Errors split by exit code: usage problems (1) vs runtime failures (2).
enum CliError {
    Usage(String),
    Run(protoseg::Error),
}

impl From<protoseg::Error> for CliError {
    fn from(e: protoseg::Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp
                | ErrorKind::DisplayVersion
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            eprintln!("run with --help for details");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

// ---- config file handling ----

/// Parses the key=value override file; unknown keys are rejected later by the
/// consumer that owns them.
fn read_overrides(path: Option<&Path>) -> CliResult<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    let Some(path) = path else { return Ok(map) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "config line {} is not key=value: {raw:?}",
                lineno + 1
            )));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    v.parse()
        .map_err(|e| CliError::Usage(format!("config key {key}: cannot parse {v:?} ({e})")))
}

/// Applies fine-tuning keys, returning the resolved config and the list of
/// keys consumed. Seed precedence: --seed flag, then the config key, then 0.
fn finetune_config(
    over: &BTreeMap<String, String>,
    seed_flag: Option<u64>,
    strategy: Option<Strategy>,
) -> CliResult<FineTuneConfig> {
    let mut c = FineTuneConfig::default();
    for (k, v) in over {
        match k.as_str() {
            "lr" => c.lr = parse_val(k, v)?,
            "momentum" => c.momentum = parse_val(k, v)?,
            "iterations" => c.iterations = parse_val(k, v)?,
            "margin" => c.margin = parse_val(k, v)?,
            "holistic_blend" => c.holistic_blend = parse_val(k, v)?,
            "clusters" => c.clusters = parse_val(k, v)?,
            "softmax_scale" => c.softmax_scale = parse_val(k, v)?,
            "bd_reduction" => {
                c.bd_reduction = match v.as_str() {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    other => {
                        return Err(CliError::Usage(format!(
                            "config key bd_reduction: expected mean or sum, got {other:?}"
                        )))
                    }
                }
            }
            "strategy" => c.strategy = parse_val(k, v)?,
            "seed" => c.seed = parse_val(k, v)?,
            "use_ce" => c.use_ce = parse_val(k, v)?,
            "use_pc" => c.use_pc = parse_val(k, v)?,
            "use_bd" => c.use_bd = parse_val(k, v)?,
            "checkpoint_every" => c.checkpoint_every = parse_val(k, v)?,
            _ => {} // synth/arch keys are consumed elsewhere
        }
    }
    if let Some(s) = seed_flag {
        c.seed = s;
    }
    if let Some(s) = strategy {
        c.strategy = s;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn apply_appearance(
    app: &mut DomainAppearance,
    prefix: &str,
    over: &BTreeMap<String, String>,
) -> CliResult<()> {
    for (k, v) in over {
        let Some(field) = k.strip_prefix(prefix) else { continue };
        match field {
            "fg_mean" => app.fg_mean = parse_val(k, v)?,
            "fg_std" => app.fg_std = parse_val(k, v)?,
            "bg_mean" => app.bg_mean = parse_val(k, v)?,
            "bg_std" => app.bg_std = parse_val(k, v)?,
            "texture_freq" => app.texture_freq = parse_val(k, v)?,
            "texture_amp" => app.texture_amp = parse_val(k, v)?,
            "blur_radius" => app.blur_radius = parse_val(k, v)?,
            "invert" => app.invert = parse_val(k, v)?,
            _ => {
                return Err(CliError::Usage(format!("unknown appearance config key {k}")));
            }
        }
    }
    Ok(())
}

fn synth_config(over: &BTreeMap<String, String>, seed_flag: Option<u64>) -> CliResult<SynthConfig> {
    let mut c = SynthConfig::default();
    for (k, v) in over {
        match k.as_str() {
            "size" => c.size = parse_val(k, v)?,
            "shapes_min" => c.shapes_min = parse_val(k, v)?,
            "shapes_max" => c.shapes_max = parse_val(k, v)?,
            "count_a" => c.count_a = parse_val(k, v)?,
            "count_b" => c.count_b = parse_val(k, v)?,
            "seed" => c.seed = parse_val(k, v)?,
            _ => {}
        }
    }
    apply_appearance(&mut c.domain_a, "a_", over)?;
    apply_appearance(&mut c.domain_b, "b_", over)?;
    if let Some(s) = seed_flag {
        c.seed = s;
    }
    c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(c)
}

fn arch_config(over: &BTreeMap<String, String>) -> CliResult<ToyArchConfig> {
    let mut a = ToyArchConfig::default();
    for (k, v) in over {
        match k.as_str() {
            "arch_widths" => {
                a.widths = v
                    .split(',')
                    .map(|w| parse_val("arch_widths", w.trim()))
                    .collect::<CliResult<Vec<usize>>>()?;
            }
            "arch_in_channels" => a.in_channels = parse_val(k, v)?,
            "arch_downsample" => a.downsample = parse_val(k, v)?,
            "arch_init_scale" => a.init_scale = parse_val(k, v)?,
            _ => {}
        }
    }
    a.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(a)
}

// ---- shared plumbing ----

fn ensure_out(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create --out {}: {e}", dir.display())))
}

fn get_encoder(
    checkpoint: Option<&Path>,
    over: &BTreeMap<String, String>,
    seed: u64,
) -> CliResult<ToyEncoder<f32>> {
    match checkpoint {
        Some(p) => Ok(load_checkpoint(p)?),
        None => {
            let arch = arch_config(over)?;
            log::info!("no checkpoint given; initializing a fresh encoder (seed {seed})");
            Ok(ToyEncoder::init(&arch, seed)?)
        }
    }
}

fn gather_support_ids(
    cli_ids: &[String],
    file: Option<&Path>,
    data: &Dataset,
) -> CliResult<Vec<String>> {
    let mut ids: Vec<String> = cli_ids.iter().filter(|s| !s.is_empty()).cloned().collect();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read support file {}: {e}", path.display()))
        })?;
        ids.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    ids.dedup();
    if ids.is_empty() {
        return Err(CliError::Usage(
            "no support ids given (use --support or --support-file)".into(),
        ));
    }
    let known: std::collections::BTreeSet<_> = data.ids().into_iter().collect();
    if let Some(bad) = ids.iter().find(|id| !known.contains(*id)) {
        return Err(CliError::Usage(format!("support id {bad:?} is not in the dataset")));
    }
    Ok(ids)
}

fn load_episode(
    data: &Path,
    support: &[String],
    support_file: Option<&Path>,
) -> CliResult<(Dataset, Episode)> {
    let ds = load_dataset(data)?;
    let ids = gather_support_ids(support, support_file, &ds)?;
    let ep = make_episodes(&ds, &ids)?;
    Ok((ds, ep))
}

/// Envelope every report is written in: the subcommand, the resolved
/// configuration, and wall time, so a report file is self-describing.
#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    command: &'a str,
    seed: u64,
    strategy: String,
    config: &'a FineTuneConfig,
    data_dir: String,
    support_ids: Vec<String>,
    elapsed_ms: f64,
    report: R,
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(protoseg::Error::from)
        .map_err(CliError::Run)?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Run(protoseg::Error::io(path, e)))?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---- subcommand bodies ----

fn run(cli: Cli) -> CliResult<()> {
    let over = read_overrides(cli.config.as_deref())?;
    ensure_out(&cli.out)?;
    match &cli.cmd {
        Cmd::SynthGen => synth_gen(&cli, &over),
        Cmd::SelectSupport { data, k } => select_support_cmd(&cli, &over, data, *k),
        Cmd::Finetune { data, support, support_file, strategy } => {
            finetune_cmd(&cli, &over, data, support, support_file.as_deref(), *strategy)
        }
        Cmd::Evaluate { data, support, support_file } => {
            evaluate_cmd(&cli, &over, data, support, support_file.as_deref())
        }
        Cmd::EvalUnseen { data, k } => eval_unseen_cmd(&cli, &over, data, *k),
        Cmd::SweepSupport { data } => sweep_cmd(&cli, &over, data),
        Cmd::RandomSupportStudy { data, k, seeds } => study_cmd(&cli, &over, data, *k, seeds),
        Cmd::DumpFeatures { data } => dump_cmd(&cli, &over, data),
    }
}

fn synth_gen(cli: &Cli, over: &BTreeMap<String, String>) -> CliResult<()> {
    let cfg = synth_config(over, cli.seed)?;
    let t0 = Instant::now();
    let (a, b) = generate_synthetic(&cfg)?;
    let dir_a = cli.out.join("domain_a");
    let dir_b = cli.out.join("domain_b");
    save_dataset(&a, &dir_a)?;
    save_dataset(&b, &dir_b)?;
    println!(
        "generated {} images in {} and {} in {} ({} px, seed {}, {:.0} ms)",
        a.len(),
        dir_a.display(),
        b.len(),
        dir_b.display(),
        cfg.size,
        cfg.seed,
        t0.elapsed().as_secs_f64() * 1e3,
    );
    Ok(())
}

fn select_support_cmd(
    cli: &Cli,
    over: &BTreeMap<String, String>,
    data: &Path,
    k: usize,
) -> CliResult<()> {
    let ds = load_dataset(data)?;
    let seed = cli.seed.unwrap_or(0);
    let enc = get_encoder(cli.checkpoint.as_deref(), over, seed)?;
    let table = embed_all(&enc, &ds)?;
    let ids = select_support(&table, k, seed)?;
    let path = cli.out.join("selected_ids.txt");
    let mut text = String::new();
    for id in &ids {
        let _ = writeln!(text, "{id}");
    }
    std::fs::write(&path, text).map_err(|e| CliError::Run(protoseg::Error::io(&path, e)))?;
    println!("selected {} of {} images -> {}: {}", k, ds.len(), path.display(), ids.join(", "));
    Ok(())
}

fn finetune_cmd(
    cli: &Cli,
    over: &BTreeMap<String, String>,
    data: &Path,
    support: &[String],
    support_file: Option<&Path>,
    strategy: Strategy,
) -> CliResult<()> {
    let mut cfg = finetune_config(over, cli.seed, Some(strategy))?;
    if cfg.checkpoint_every > 0 && cfg.iterations > cfg.checkpoint_every {
        cfg.checkpoint_dir = Some(cli.out.join("checkpoints"));
    }
    let (_, ep) = load_episode(data, support, support_file)?;
    let enc = get_encoder(cli.checkpoint.as_deref(), over, cfg.seed)?;
    let t0 = Instant::now();
    let result = finetune(&enc, &ep, &cfg)?;
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    let log_path = cli.out.join("run_log.jsonl");
    let mut lines = String::new();
    for rec in &result.log.records {
        let line =
            serde_json::to_string(rec).map_err(protoseg::Error::from).map_err(CliError::Run)?;
        let _ = writeln!(lines, "{line}");
    }
    std::fs::write(&log_path, lines)
        .map_err(|e| CliError::Run(protoseg::Error::io(&log_path, e)))?;

    let ckpt_path = cli.out.join("encoder.ckpt");
    save_checkpoint(&result.encoder, &ckpt_path)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        strategy: String,
        seed: u64,
        iterations_run: usize,
        aborted: Option<String>,
        elapsed_ms: f64,
        config: &'a FineTuneConfig,
        run_log: String,
        checkpoint: String,
    }
    let summary = Summary {
        strategy: cfg.strategy.to_string(),
        seed: cfg.seed,
        iterations_run: result.log.records.len(),
        aborted: result.aborted.as_ref().map(|d| format!("iteration {}: {}", d.iteration, d.detail)),
        elapsed_ms,
        config: &cfg,
        run_log: log_path.display().to_string(),
        checkpoint: ckpt_path.display().to_string(),
    };
    write_json(&cli.out.join("finetune_summary.json"), &summary)?;
    if let Some(d) = &result.aborted {
        eprintln!(
            "warning: run aborted at iteration {} ({}); checkpoint holds the last good parameters",
            d.iteration, d.detail
        );
    }
    println!(
        "fine-tuned with {} for {} iterations in {:.0} ms -> {}",
        cfg.strategy,
        result.log.records.len(),
        elapsed_ms,
        ckpt_path.display()
    );
    Ok(())
}

fn evaluate_cmd(
    cli: &Cli,
    over: &BTreeMap<String, String>,
    data: &Path,
    support: &[String],
    support_file: Option<&Path>,
) -> CliResult<()> {
    let cfg = finetune_config(over, cli.seed, None)?;
    let (ds, ep) = load_episode(data, support, support_file)?;
    let enc = get_encoder(cli.checkpoint.as_deref(), over, cfg.seed)?;
    let t0 = Instant::now();
    let (report, masks) =
        evaluate_with_masks(&enc, &ep.support, &ep.query, ep.n_classes, &cfg)?;
    let elapsed_ms = t0.elapsed().as_secs_f64() * 1e3;

    let mask_dir = cli.out.join("masks");
    std::fs::create_dir_all(&mask_dir)
        .map_err(|e| CliError::Run(protoseg::Error::io(&mask_dir, e)))?;
    for (id, mask) in &masks {
        save_mask_png(mask, &mask_dir.join(format!("{id}.png")))?;
    }

    let envelope = Envelope {
        command: "evaluate",
        seed: cfg.seed,
        strategy: cfg.strategy.to_string(),
        config: &cfg,
        data_dir: data.display().to_string(),
        support_ids: ep.support.samples.iter().map(|s| s.id.clone()).collect(),
        elapsed_ms,
        report: &report,
    };
    write_json(&cli.out.join("eval_report.json"), &envelope)?;
    println!(
        "mean IoU {:.4} over {} queries ({} predicted masks in {})",
        report.mean_iou,
        report.n_images,
        masks.len(),
        mask_dir.display()
    );
    let _ = ds;
    Ok(())
}

fn eval_unseen_cmd(
    cli: &Cli,
    over: &BTreeMap<String, String>,
    data: &Path,
    k: usize,
) -> CliResult<()> {
    let cfg = finetune_config(over, cli.seed, None)?;
    let ds = load_dataset(data)?;
    let enc = get_encoder(cli.checkpoint.as_deref(), over, cfg.seed)?;
    let t0 = Instant::now();
    let report = eval_unseen(&enc, &ds, k, &cfg)?;
    let envelope = Envelope {
        command: "eval-unseen",
        seed: cfg.seed,
        strategy: cfg.strategy.to_string(),
        config: &cfg,
        data_dir: data.display().to_string(),
        support_ids: report.folds.iter().flat_map(|f| f.support_ids.clone()).collect(),
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        report: &report,
    };
    write_json(&cli.out.join("unseen_report.json"), &envelope)?;
    println!(
        "seen IoU {:.4}, unseen IoU {:.4} across {} folds",
        report.mean_seen,
        report.mean_unseen,
        report.folds.len()
    );
    Ok(())
}

fn sweep_cmd(cli: &Cli, over: &BTreeMap<String, String>, data: &Path) -> CliResult<()> {
    let cfg = finetune_config(over, cli.seed, None)?;
    let ds = load_dataset(data)?;
    let enc = get_encoder(cli.checkpoint.as_deref(), over, cfg.seed)?;
    let t0 = Instant::now();
    let report = sweep_support(&enc, &ds, &cfg)?;
    let envelope = Envelope {
        command: "sweep-support",
        seed: cfg.seed,
        strategy: "none".to_string(),
        config: &cfg,
        data_dir: data.display().to_string(),
        support_ids: vec![report.rep_id.clone()],
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        report: &report,
    };
    write_json(&cli.out.join("sweep_report.json"), &envelope)?;
    println!(
        "sweep over {} candidates: min {:.4} avg {:.4} max {:.4}; representative {} scores {:.4}",
        report.per_support.len(),
        report.min_iou,
        report.avg_iou,
        report.max_iou,
        report.rep_id,
        report.rep_iou
    );
    Ok(())
}

fn study_cmd(
    cli: &Cli,
    over: &BTreeMap<String, String>,
    data: &Path,
    k: usize,
    seeds: &[u64],
) -> CliResult<()> {
    if seeds.is_empty() {
        return Err(CliError::Usage("--seeds needs at least one seed".into()));
    }
    let cfg = finetune_config(over, cli.seed, None)?;
    let ds = load_dataset(data)?;
    let enc = get_encoder(cli.checkpoint.as_deref(), over, cfg.seed)?;
    let t0 = Instant::now();
    let report = random_support_study(&enc, &ds, k, seeds, &cfg)?;
    let envelope = Envelope {
        command: "random-support-study",
        seed: cfg.seed,
        strategy: cfg.strategy.to_string(),
        config: &cfg,
        data_dir: data.display().to_string(),
        support_ids: Vec::new(),
        elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        report: &report,
    };
    write_json(&cli.out.join("study_report.json"), &envelope)?;
    println!(
        "random supports mean {:.4} (best {:.4}); selected support {:.4}",
        report.mean_random, report.best_random, report.selected_iou
    );
    Ok(())
}

fn dump_cmd(cli: &Cli, over: &BTreeMap<String, String>, data: &Path) -> CliResult<()> {
    let ds = load_dataset(data)?;
    let seed = cli.seed.unwrap_or(0);
    let enc = get_encoder(cli.checkpoint.as_deref(), over, seed)?;
    let path = cli.out.join("features.jsonl");
    let count = dump_features(&enc, &ds, &path)?;
    println!("wrote {count} labeled feature vectors to {}", path.display());
    Ok(())
}
