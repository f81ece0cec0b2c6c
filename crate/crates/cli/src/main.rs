use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ccreid::checkpoint::Checkpoint;
use ccreid::config::RunConfig;
use ccreid::dataset::{generate_synthetic_dataset, load_manifest, DatasetManifest, Split, SynthSpec, SynthSplit};
use ccreid::evaluator::{
    ablation_report, evaluate, evaluate_checkpoint, extract_descriptors, format_ablation_table, DescriptorSet,
    EvalReport,
};
use ccreid::model::Ablation;
use ccreid::trainer::{initial_checkpoint, run, TrainData};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<ccreid::Error> for Failure {
    fn from(e: ccreid::Error) -> Self {
        Failure {
            code: if e.is_validation() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn config_reference() -> String {
    let mut out = String::from("Config keys (defaults); set with --set section.key=value or --section.key=value:\n");
    for (key, value) in RunConfig::documented_defaults() {
        out.push_str(&format!("  {key} = {value}\n"));
    }
    out.push_str("\nExit codes: 0 success, 1 runtime failure, 2 validation or usage error.");
    out
}

#[derive(Parser)]
#[command(
    name = "ccreid",
    version,
    about = "Cloth-changing person re-identification: synthesis, training, extraction, evaluation, ablation",
    after_help = config_reference()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shape-vs-colour dataset.
    Synth(SynthArgs),
    /// Train one model; checkpoints after every epoch and resumes when one exists.
    Train(TrainArgs),
    /// Write L2-normalized descriptors of one split.
    Extract(ExtractArgs),
    /// Rank the gallery for every query and report mAP and CMC.
    Eval(EvalArgs),
    /// Train and evaluate baseline, mgr, mgr+cdn and mgr+cdn+psa.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitMode {
    /// Query identities also train, but never in their query outfits.
    UnseenClothes,
    /// Query identities never train.
    DisjointIds,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    ids: usize,
    #[arg(long, default_value_t = 2)]
    clothes: usize,
    /// Images per identity and outfit.
    #[arg(long, default_value_t = 16)]
    per: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SplitMode::UnseenClothes)]
    split: SplitMode,
    /// Gallery images per queried identity (unseen-clothes split).
    #[arg(long, default_value_t = 4)]
    gallery_per_id: usize,
    /// Held-out identities (disjoint-ids split; default half).
    #[arg(long)]
    holdout: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest path (overrides dataset.manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Overrides trainer.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Overrides trainer.seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Modules on top of the baseline, e.g. `mgr,cdn,psa` or `baseline`.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Run directory: checkpoint.ckpt, train_log.jsonl, config.json.
    #[arg(long)]
    out: PathBuf,
    /// Discard an existing run in `out` instead of resuming it.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the manifest recorded in the checkpoint's config.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Query)]
    split: SplitArg,
    /// Descriptor file; metadata goes to `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Query,
    Gallery,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Query => Split::Query,
            SplitArg::Gallery => Split::Gallery,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Model to evaluate; alternatively pass --query and --gallery descriptor files.
    #[arg(long, required_unless_present_all = ["query", "gallery"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, requires = "gallery", conflicts_with = "checkpoint")]
    query: Option<PathBuf>,
    #[arg(long, requires = "query", conflicts_with = "checkpoint")]
    gallery: Option<PathBuf>,
    /// Drop same-identity gallery entries wearing the query's clothes.
    #[arg(long)]
    cloth_change_only: bool,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    cloth_change_only: bool,
    /// One run directory per variant plus ablation.json and ablation.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Rewrites `--section.key=value` into `--set section.key=value`.
fn expand_flat_overrides(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for arg in args {
        match arg.strip_prefix("--") {
            Some(rest) if rest.split('=').next().is_some_and(|k| k.contains('.')) && rest.contains('=') => {
                out.push("--set".into());
                out.push(rest.to_string());
            }
            _ => out.push(arg),
        }
    }
    out
}

fn load_config(args: &ConfigArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) if !path.is_file() => {
            return Err(Failure::usage(format!("config file {} not found", path.display())))
        }
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(m) = &args.manifest {
        cfg.dataset.manifest = m.display().to_string();
    }
    if let Some(e) = args.epochs {
        cfg.trainer.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.trainer.seed = s;
    }
    Ok(cfg)
}

fn manifest_of(cfg: &RunConfig, flag: Option<&Path>) -> CliResult<DatasetManifest> {
    let path = match flag {
        Some(p) => p.to_path_buf(),
        None if !cfg.dataset.manifest.is_empty() => PathBuf::from(&cfg.dataset.manifest),
        None => return Err(Failure::usage("no manifest: pass --manifest or set dataset.manifest")),
    };
    if !path.is_file() {
        return Err(Failure::usage(format!("manifest {} not found", path.display())));
    }
    Ok(load_manifest(&path)?)
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        message: format!("{}: {e}", path.display()),
    }
}

fn prepare_dir(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        if !force {
            return Err(Failure::usage(format!("{} exists; pass --force to replace it", dir.display())));
        }
        fs::remove_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn cmd_synth(a: SynthArgs) -> CliResult {
    let split = match a.split {
        SplitMode::UnseenClothes => SynthSplit::UnseenClothes {
            gallery_per_id: a.gallery_per_id,
        },
        SplitMode::DisjointIds => SynthSplit::DisjointIds {
            holdout: a.holdout.unwrap_or(a.ids / 2),
        },
    };
    let spec = SynthSpec {
        num_ids: a.ids,
        clothes_per_id: a.clothes,
        images_per_combo: a.per,
        image_size: (a.height, a.width),
        seed: a.seed,
        split,
        ..SynthSpec::default()
    };
    prepare_dir(&a.out, a.force)?;
    let m = generate_synthetic_dataset(&spec, &a.out)?;
    println!(
        "wrote {} images ({} train identities) to {}",
        m.records.len(),
        m.num_identities,
        a.out.display()
    );
    Ok(())
}

/// Trains into `dir`, resuming from `dir/checkpoint.ckpt` when it exists.
fn train_into(cfg: &RunConfig, manifest: &DatasetManifest, dir: &Path) -> CliResult<Checkpoint> {
    let ck_path = dir.join("checkpoint.ckpt");
    let log_path = dir.join("train_log.jsonl");
    let mut state = if ck_path.exists() {
        let ck = Checkpoint::load(&ck_path)?;
        if ck.config != *cfg {
            return Err(Failure::usage(format!(
                "{} was trained with a different config (fingerprint {}); pass --force to start over",
                ck_path.display(),
                ck.fingerprint()
            )));
        }
        eprintln!("resuming at step {}", ck.step);
        ck
    } else {
        initial_checkpoint(cfg, manifest)?
    };
    // keep only log lines the checkpoint has already absorbed
    let mut kept = String::new();
    if let Ok(f) = fs::File::open(&log_path) {
        for line in BufReader::new(f).lines().map_while(|l| l.ok()) {
            let step = serde_json::from_str::<serde_json::Value>(&line)
                .ok()
                .and_then(|v| v["step"].as_u64());
            if step.is_some_and(|s| s as usize <= state.step) {
                kept.push_str(&line);
                kept.push('\n');
            }
        }
    }
    fs::write(&log_path, kept).map_err(|e| io_failure(&log_path, e))?;
    fs::write(dir.join("config.json"), cfg.to_json()).map_err(|e| io_failure(dir, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| io_failure(&log_path, e))?;
    let data = TrainData::load(manifest, cfg)?;
    loop {
        let (step, epoch) = (state.step, state.epoch);
        run(&mut state, manifest, &data, &mut log, Some(1))?;
        if state.step == step {
            break;
        }
        if state.epoch != epoch {
            state.save(&ck_path)?;
            eprintln!("epoch {} done (step {})", state.epoch, state.step);
        }
    }
    state.save(&ck_path)?;
    log.flush().map_err(|e| io_failure(&log_path, e))?;
    Ok(state)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(ab) = a.ablation {
        cfg.trainer.ablation = ab;
    }
    cfg.validate()?;
    let manifest = manifest_of(&cfg, None)?;
    if a.force || !a.out.exists() {
        prepare_dir(&a.out, a.force)?;
    }
    let ck = train_into(&cfg, &manifest, &a.out)?;
    println!(
        "trained {} for {} epochs ({} steps); config fingerprint {}",
        cfg.trainer.ablation.label(),
        ck.epoch,
        ck.step,
        ck.fingerprint()
    );
    Ok(())
}

fn checkpoint_and_manifest(path: &Path, manifest: Option<&Path>) -> CliResult<(Checkpoint, DatasetManifest)> {
    if !path.is_file() {
        return Err(Failure::usage(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let m = manifest_of(&ck.config, manifest)?;
    Ok((ck, m))
}

fn cmd_extract(a: ExtractArgs) -> CliResult {
    let (ck, m) = checkpoint_and_manifest(&a.checkpoint, a.manifest.as_deref())?;
    let set = extract_descriptors(&ck, &m, a.split.into())?;
    set.save(&a.out)?;
    println!(
        "wrote {} descriptors of length {} to {}",
        set.len(),
        set.descriptors.ncols(),
        a.out.display()
    );
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!(
        "mAP {:.4}  rank-1 {:.4}  rank-5 {:.4}  rank-10 {:.4}",
        r.map, r.rank1, r.rank5, r.rank10
    );
    println!(
        "queries {} evaluated / {} dropped; gallery {} ({} entries filtered)",
        r.evaluated_queries, r.dropped_queries, r.gallery_size, r.filtered_gallery_entries
    );
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    let report = if let (Some(q), Some(g)) = (&a.query, &a.gallery) {
        let mut filter = ccreid::evaluator::ProtocolFilter::default();
        filter.cloth_change_only |= a.cloth_change_only;
        let (q, g) = (DescriptorSet::load(q)?, DescriptorSet::load(g)?);
        EvalReport::new(&evaluate(&q, &g, filter)?, q.len(), g.len(), filter)
    } else {
        let path = a.checkpoint.as_deref().expect("clap requires a checkpoint");
        let (ck, m) = checkpoint_and_manifest(path, a.manifest.as_deref())?;
        let mut filter = ck.config.evaluator.filter();
        filter.cloth_change_only |= a.cloth_change_only;
        evaluate_checkpoint(&ck, &m, filter)?
    };
    print_report(&report);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> CliResult {
    let base = load_config(&a.cfg)?;
    base.validate()?;
    let manifest = manifest_of(&base, None)?;
    prepare_dir(&a.out, a.force)?;
    let mut results = Vec::new();
    for variant in Ablation::LADDER {
        let mut cfg = base.clone();
        cfg.trainer.ablation = variant;
        let label = variant.label();
        eprintln!("== {label}");
        let dir = a.out.join(label.replace('+', "_"));
        fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
        let ck = train_into(&cfg, &manifest, &dir)?;
        let mut filter = cfg.evaluator.filter();
        filter.cloth_change_only |= a.cloth_change_only;
        let report = evaluate_checkpoint(&ck, &manifest, filter)?;
        write_json(&dir.join("report.json"), &report)?;
        results.push((label, report));
    }
    let rows = ablation_report(&results)?;
    let table = format_ablation_table(&rows);
    write_json(&a.out.join("ablation.json"), &rows)?;
    let txt = a.out.join("ablation.txt");
    fs::write(&txt, &table).map_err(|e| io_failure(&txt, e))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse_from(expand_flat_overrides(std::env::args())) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Extract(a) => cmd_extract(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
