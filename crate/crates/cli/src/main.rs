use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfsseg::bench::{run_bench, BenchConfig, EfficiencyConfig};
use cfsseg::codec::{check_stream, read_checkpoint, read_stream, write_checkpoint, write_stream, MANIFEST_FILE};
use cfsseg::features::RhlProjector;
use cfsseg::metrics::{write_csv, StepMetrics};
use cfsseg::protocol::{evaluate, run_steps};
use cfsseg::synth::{build_stream, synth_generate, SynthSpec};
use cfsseg::{ClassId, Error, ErrorKind, Relabeler, Result, RunManifest, Setting, UpdateMode};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Closed-form continual segmentation on feature streams.
///
/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
#[derive(Parser, Debug)]
#[command(name = "cfsseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic feature stream directory.
    Synth(SynthCmd),
    /// Run every step of a stream and write checkpoint and metrics.
    Run(RunCmd),
    /// Score a checkpoint on a stream's held-out set.
    Eval(EvalCmd),
    /// Time the update kernels.
    Bench(BenchCmd),
    /// Validate a stream directory without running it.
    ExportCheck(ExportCheckCmd),
}

/// Run-manifest fields. A flag overrides the value from `--config` or the
/// stream's own manifest.
#[derive(Args, Debug, Default)]
struct ManifestFlags {
    /// JSON run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setting: Option<Setting>,
    /// Classes in the first step, background excluded.
    #[arg(long)]
    m: Option<u32>,
    /// Classes per later step.
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    n_classes: Option<u32>,
    #[arg(long)]
    background: Option<u32>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    d_encoder: Option<usize>,
    #[arg(long)]
    d_expanded: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_neighbors: Option<usize>,
    /// `2d` or `3d`.
    #[arg(long)]
    relabeler: Option<Relabeler>,
    /// `direct`, `woodbury` or `auto`.
    #[arg(long)]
    mode: Option<UpdateMode>,
    #[arg(long)]
    expand_chunk_rows: Option<usize>,
    #[arg(long)]
    update_chunk_rows: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

impl ManifestFlags {
    fn load_config(&self) -> Result<Option<RunManifest>> {
        self.config.as_deref().map(RunManifest::load).transpose()
    }

    fn apply(&self, m: &mut RunManifest) {
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    m.$field = v;
                }
            )*};
        }
        set!(setting, n_classes, gamma, tau, d_encoder, d_expanded, scale, seed, k_neighbors, relabeler, mode, expand_chunk_rows, threads);
        if let Some(v) = self.background {
            m.background = ClassId(v);
        }
        if self.update_chunk_rows.is_some() {
            m.update_chunk_rows = self.update_chunk_rows;
        }
        if let Some(v) = self.m {
            m.m_n_protocol.m = v;
        }
        if let Some(v) = self.n {
            m.m_n_protocol.n = v;
        }
        if self.m.is_some() || self.n.is_some() || self.n_classes.is_some() || self.background.is_some() {
            m.schedule.clear();
        }
    }
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[command(flatten)]
    manifest: ManifestFlags,
    /// Output stream directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    points_per_class: Option<usize>,
    #[arg(long)]
    cluster_spread: Option<f64>,
    #[arg(long)]
    images_per_class: Option<usize>,
    #[arg(long)]
    eval_images_per_class: Option<usize>,
    /// Let some images carry a class from a later step.
    #[arg(long)]
    future_companions: bool,
}

#[derive(Args, Debug)]
struct RunCmd {
    #[command(flatten)]
    manifest: ManifestFlags,
    /// Stream directory written by `synth` or an exporter.
    #[arg(long)]
    stream: PathBuf,
    /// Directory for checkpoint, metrics and the resolved manifest.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of fitting step 1.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[command(flatten)]
    manifest: ManifestFlags,
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics JSON path; printed to stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchCmd {
    /// JSON bench configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated `d_E` values.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    #[arg(long)]
    n_rows: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also compare one update with gradient descent at default sizes.
    #[arg(long)]
    efficiency: bool,
    #[arg(long)]
    threads: Option<usize>,
    /// Report JSON path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportCheckCmd {
    stream: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn set_threads(n: usize) -> Result<()> {
    // matrixmultiply reads this on first use
    std::env::set_var("MATMUL_NUM_THREADS", n.to_string());
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn synth(cmd: SynthCmd) -> Result<()> {
    let flags = &cmd.manifest;
    let mut manifest = match flags.load_config()? {
        Some(m) => m,
        None => {
            let n_classes = flags.n_classes.unwrap_or(21);
            RunManifest::new(
                flags.setting.unwrap_or(Setting::Sequential),
                flags.m.unwrap_or(15),
                flags.n.unwrap_or(1),
                n_classes,
                flags.d_encoder.unwrap_or(n_classes as usize),
                flags.d_expanded.unwrap_or(256),
                flags.seed.unwrap_or(0),
            )
        }
    };
    flags.apply(&mut manifest);
    let mut spec = manifest
        .synth
        .clone()
        .unwrap_or_else(|| SynthSpec::new(manifest.n_classes, manifest.d_encoder, 100, 0.1, manifest.seed));
    spec.n_classes = manifest.n_classes;
    spec.d_encoder = manifest.d_encoder;
    spec.seed = manifest.seed;
    if let Some(v) = cmd.points_per_class {
        spec.points_per_class = v;
    }
    if let Some(v) = cmd.cluster_spread {
        spec.cluster_spread = v;
    }
    if let Some(v) = cmd.images_per_class {
        spec.images_per_class = v;
    }
    if let Some(v) = cmd.eval_images_per_class {
        spec.eval_images_per_class = v;
    }
    spec.future_companions |= cmd.future_companions;
    manifest.synth = Some(spec.clone());
    manifest.validate()?;

    let data = synth_generate::<f64>(&spec)?;
    let schedule = manifest.class_schedule()?;
    let (steps, eval) = build_stream(&data, &schedule, manifest.setting, manifest.background)?;
    write_stream(&cmd.out, &manifest, &steps, &eval)?;
    println!(
        "wrote {} steps ({} training rows, {} held-out rows) to {}",
        steps.len(),
        steps.iter().map(|s| s.labels.len()).sum::<usize>(),
        eval.labels.len(),
        cmd.out.display()
    );
    Ok(())
}

fn resolve_manifest(flags: &ManifestFlags, stream: &Path) -> Result<RunManifest> {
    let mut manifest = match flags.load_config()? {
        Some(m) => m,
        None => RunManifest::load(&stream.join(MANIFEST_FILE))?,
    };
    flags.apply(&mut manifest);
    manifest.validate()?;
    Ok(manifest)
}

fn run(cmd: RunCmd) -> Result<()> {
    let mut manifest = resolve_manifest(&cmd.manifest, &cmd.stream)?;
    set_threads(manifest.threads)?;
    let stream = read_stream::<f64>(&cmd.stream)?;
    if stream.manifest.schedule != manifest.schedule {
        return Err(Error::Config(
            "the run schedule differs from the schedule the stream was written with".into(),
        ));
    }
    let initial = cmd.resume.as_deref().map(read_checkpoint::<f64>).transpose()?;
    let skip = initial.as_ref().map_or(0, |s| s.step_index() as usize);
    let steps = stream.steps.into_iter().skip(skip).map(Ok);
    let outcome = run_steps(&manifest, steps, stream.eval.as_ref(), initial)?;

    fs::create_dir_all(&cmd.out)?;
    let ckpt = cmd.out.join("checkpoint.ckpt");
    write_checkpoint(&ckpt, &outcome.state)?;
    let rows: Vec<StepMetrics> = outcome
        .reports
        .iter()
        .filter_map(|r| {
            r.metrics.clone().map(|metrics| StepMetrics {
                step: r.step,
                metrics,
                wall_time_s: r.wall_time_s,
            })
        })
        .collect();
    write_csv(fs::File::create(cmd.out.join("metrics.csv"))?, &rows)?;
    write_json(&cmd.out.join("metrics.json"), &json!({ "steps": outcome.reports }))?;
    let ckpt_name = ckpt.display().to_string();
    if !manifest.checkpoints.contains(&ckpt_name) {
        manifest.checkpoints.push(ckpt_name);
    }
    manifest.save(&cmd.out.join(MANIFEST_FILE))?;

    for r in &outcome.reports {
        let miou = r.metrics.as_ref().and_then(|m| m.miou_all);
        println!(
            "step {}: {} rows, mIoU {}",
            r.step,
            r.n_rows,
            miou.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn eval(cmd: EvalCmd) -> Result<()> {
    let manifest = resolve_manifest(&cmd.manifest, &cmd.stream)?;
    set_threads(manifest.threads)?;
    let state = read_checkpoint::<f64>(&cmd.checkpoint)?;
    if state.d_expanded() != manifest.d_expanded {
        return Err(Error::Data(format!(
            "checkpoint has d_E = {} but the manifest says {}",
            state.d_expanded(),
            manifest.d_expanded
        )));
    }
    let stream = read_stream::<f64>(&cmd.stream)?;
    let held_out = stream
        .eval
        .ok_or_else(|| Error::Data(format!("{} has no held-out block", cmd.stream.display())))?;
    let projector = RhlProjector::<f64>::build(manifest.seed, manifest.d_encoder, manifest.d_expanded, manifest.scale)?;
    let expanded = projector.expand_chunked(held_out.features.view(), manifest.expand_chunk_rows)?;
    let metrics = evaluate(
        &state,
        expanded.view(),
        &held_out.labels,
        &manifest.class_schedule()?,
        manifest.background,
    )?;
    let value = json!({ "step": state.step_index(), "metrics": metrics });
    match &cmd.out {
        Some(path) => write_json(path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    Ok(())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    let mut cfg = match &cmd.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("bench config: {e}")))?
        }
        None => BenchConfig {
            sizes: vec![256, 512, 1024],
            n_rows: 32,
            n_classes: 21,
            repeats: 1,
            seed: 0,
            efficiency: None,
        },
    };
    if !cmd.sizes.is_empty() {
        cfg.sizes = cmd.sizes.clone();
    }
    if let Some(v) = cmd.n_rows {
        cfg.n_rows = v;
    }
    if let Some(v) = cmd.n_classes {
        cfg.n_classes = v;
    }
    if let Some(v) = cmd.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = cmd.seed {
        cfg.seed = v;
    }
    if cmd.efficiency && cfg.efficiency.is_none() {
        cfg.efficiency = Some(EfficiencyConfig::default());
    }
    set_threads(cmd.threads.unwrap_or(1))?;

    let report = run_bench(&cfg)?;
    for t in &report.timings {
        println!("d_E {:>6}: direct {:.4}s  woodbury {:.4}s", t.d_expanded, t.direct_s, t.woodbury_s);
    }
    if let Some(r2) = report.direct_fit.r_squared {
        println!("direct ~ d^3 fit: R^2 {r2:.4}, log-log exponent {:.3}", report.direct_fit.log_log_exponent.unwrap_or(f64::NAN));
    }
    if let Some(e) = &report.efficiency {
        println!(
            "single update {:.3}s vs {} epochs of gradient descent {:.3}s: {:.3}x ({})",
            e.update_s,
            e.config.epochs,
            e.gd_s,
            e.speedup,
            if e.passed { "meets" } else { "below" }
        );
    }
    if let Some(path) = &cmd.out {
        write_json(path, &serde_json::to_value(&report)?)?;
    }
    if report.woodbury_beats_direct == Some(false) {
        return Err(Error::Data(format!(
            "woodbury was not faster than direct at d_E = {} with {} rows",
            report.timings.last().map_or(0, |t| t.d_expanded),
            cfg.n_rows
        )));
    }
    Ok(())
}

fn export_check(cmd: ExportCheckCmd) -> Result<()> {
    let check = check_stream(&cmd.stream)?;
    println!("{}", serde_json::to_string(&json!({ "ok": true, "check": check }))?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(c) => synth(c),
        Command::Run(c) => run(c),
        Command::Eval(c) => eval(c),
        Command::Bench(c) => bench(c),
        Command::ExportCheck(c) => export_check(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
