//! Command-line surface of the `pahs` binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 contract or configuration error
//! (including a failed gradient check), 3 I/O or file-format error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pahs_core::ablate::{ablate, write_report, AblationOptions};
use pahs_core::frames::{list_frames, load_sequence, save_frames};
use pahs_core::gradcheck::{run_suite, GradcheckOptions};
use pahs_core::model::config::{parse_key_values, parse_window};
use pahs_core::model::PahsParameters;
use pahs_core::sequence::debug_dump;
use pahs_core::train::{compare_frames, evaluate, restore, train, write_loss_log, TrainOptions};
use pahs_core::{generate_synthetic, Dataset, FrameFormat, ModelConfig, PahsError, PairedSequence, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CONTRACT: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "pahs", version, about = "Recurrent video deblurring with ping-pong hidden states and selective non-local attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on paired blur/sharp frame folders.
    Train(TrainArgs),
    /// Restore every frame of a directory with a trained checkpoint.
    Infer(InferArgs),
    /// Compare two frame directories and print PSNR and SSIM.
    Eval(EvalArgs),
    /// Evaluate the ablation variant grid and write a CSV report.
    Ablate(AblateArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic blur/sharp dataset.
    Synth(SynthArgs),
    /// Write the intermediate tensors of one frame as PT4 files.
    Dump(DumpArgs),
}

/// Model options shared by commands that build a fresh model.
#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// `key = value` config file; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Base preset: desk, small or full.
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Model setting override, repeatable (e.g. `--set n_pp=2`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root with `blur/` and `sharp/` folders, or one sub-folder per sequence.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Output checkpoint file.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Loss log CSV (`iter,loss,lr`); defaults to `<out>.loss.csv`.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Training iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated iterations at which the learning rate halves.
    #[arg(long, value_name = "LIST")]
    pub milestones: Option<String>,
    /// Square patch side, or `full` for whole frames.
    #[arg(long)]
    pub patch: Option<String>,
    /// Clips per batch.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Frames per clip (defaults to the shortest sequence).
    #[arg(long)]
    pub clip: Option<usize>,
    /// Seed for initialisation and patch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Input frame directory (`%06d.ppm` or `%06d.pt4`).
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory; file names mirror the input.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Require bidirectional inference (the checkpoint must carry a backward cell).
    #[arg(long)]
    pub bidir: bool,
    /// Future window of the backward cell (`full` for the whole sequence).
    #[arg(long, value_name = "W")]
    pub window: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Restored frames.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Reference frames.
    #[arg(long, value_name = "DIR")]
    pub target: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Validation dataset; a synthetic set is generated from `--seed` when absent.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Base checkpoint; random initialisation when absent.
    #[arg(long, value_name = "FILE")]
    pub ckpt: Option<PathBuf>,
    /// Report CSV (`variant,psnr,ssim,wall_ms`).
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Comma-separated variant names; all variants when absent.
    #[arg(long, value_name = "LIST")]
    pub variants: Option<String>,
    /// Timing repeats per variant (the minimum is reported).
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Seed for initialisation and the synthetic validation set.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Seeds per kernel check.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Seeds of the full-cell check.
    #[arg(long, default_value_t = 20)]
    pub cell_seeds: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of sequences.
    #[arg(long, default_value_t = 1)]
    pub sequences: usize,
    /// Frames per sequence.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Frame height.
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    /// Frame width.
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Moving shapes per scene.
    #[arg(long, default_value_t = 6)]
    pub shapes: usize,
    /// Maximum per-axis displacement per frame, in pixels.
    #[arg(long, default_value_t = 4.0)]
    pub max_displacement: f64,
    /// Renders averaged into each blurry frame.
    #[arg(long, default_value_t = 9)]
    pub substeps: usize,
    /// Frame file format: pt4 or ppm.
    #[arg(long, default_value = "pt4")]
    pub format: String,
    /// Seed of the first sequence; later sequences use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    /// Input frame directory.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub ckpt: PathBuf,
    /// Index of the frame to dump.
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// Output directory for the PT4 files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Command failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<PahsError> for Failure {
    fn from(e: PahsError) -> Self {
        let code = match e {
            PahsError::Io { .. } | PahsError::Format { .. } => EXIT_IO,
            _ => EXIT_CONTRACT,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn contract(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONTRACT,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Training options that may appear in a config file next to model keys.
const TRAIN_KEYS: &[&str] = &["iterations", "lr", "milestones", "patch", "batch", "clip"];

/// Resolved model config plus any training keys found in the config file.
pub fn resolve_model(args: &ModelArgs) -> std::result::Result<(ModelConfig, Vec<(String, String)>), Failure> {
    let mut cfg = match args.preset.as_str() {
        "desk" => ModelConfig::desk(),
        "small" => ModelConfig::small(),
        "full" => ModelConfig::full(),
        other => return Err(contract(format!("unknown preset `{other}` (desk, small, full)"))),
    };
    let mut train_keys = Vec::new();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| PahsError::io(path, e))?;
        for (lineno, key, value) in parse_key_values(&text)? {
            if TRAIN_KEYS.contains(&key.as_str()) {
                train_keys.push((key, value));
            } else {
                cfg.set(&key, &value)
                    .map_err(|e| contract(format!("{}: line {lineno}: {e}", path.display())))?;
            }
        }
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| contract(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok((cfg, train_keys))
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<V, Failure> {
    value
        .trim()
        .parse()
        .map_err(|_| contract(format!("bad value `{value}` for `{key}`")))
}

fn parse_patch(value: &str) -> std::result::Result<Option<usize>, Failure> {
    match value.trim() {
        "full" => Ok(None),
        v => Ok(Some(parse_num("patch", v)?)),
    }
}

fn parse_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, Failure> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let (mut cfg, file_keys) = resolve_model(&a.model)?;
    let mut opts = TrainOptions::default();
    for (k, v) in &file_keys {
        match k.as_str() {
            "iterations" => opts.iterations = parse_num(k, v)?,
            "lr" => opts.schedule.initial = parse_num(k, v)?,
            "milestones" => opts.schedule.milestones = parse_list(k, v)?,
            "patch" => opts.patch = parse_patch(v)?,
            "batch" => opts.batch = parse_num(k, v)?,
            "clip" => opts.clip = Some(parse_num(k, v)?),
            _ => unreachable!("filtered by TRAIN_KEYS"),
        }
    }
    if let Some(v) = a.iterations {
        opts.iterations = v;
    }
    if let Some(v) = a.lr {
        opts.schedule.initial = v;
    }
    if let Some(v) = &a.milestones {
        opts.schedule.milestones = parse_list("milestones", v)?;
    }
    if let Some(v) = &a.patch {
        opts.patch = parse_patch(v)?;
    }
    if let Some(v) = a.batch {
        opts.batch = v;
    }
    if a.clip.is_some() {
        opts.clip = a.clip;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        opts.seed = s;
    } else {
        opts.seed = cfg.seed;
    }
    let data: Dataset<f32> = Dataset::load(&a.data)?;
    let params = PahsParameters::init(&cfg)?;
    let stderr = std::io::stderr();
    let outcome = train(params, &data, &opts, |r| {
        let _ = writeln!(stderr.lock(), "iter {:>6}  loss {:.6}  lr {:.3e}", r.iter, r.loss, r.lr);
    })?;
    outcome.params.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_loss_log(&log_path, &outcome.log)?;
    let report = evaluate(&outcome.params, &data)?;
    println!(
        "loss={:.6} psnr={:.4} ssim={:.6} input_psnr={:.4}",
        report.loss, report.psnr, report.ssim, report.input_psnr
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<PahsParameters<f32>, Failure> {
    Ok(PahsParameters::load(path)?)
}

fn cmd_infer(a: &InferArgs) -> CmdResult {
    let mut params = load_checkpoint(&a.ckpt)?;
    if a.bidir && !params.config.bidirectional {
        return Err(contract(format!(
            "{}: bidirectional inference needs the backward parameter set",
            a.ckpt.display()
        )));
    }
    if let Some(w) = &a.window {
        params.config.future_window = parse_window(w)?;
    }
    let seq = load_sequence::<f32>(&a.input)?;
    let restored = restore(&params, &seq)?;
    let format = list_frames(&a.input)?
        .first()
        .and_then(|p| p.extension())
        .map_or(FrameFormat::Pt4, |e| if e == "ppm" { FrameFormat::Ppm } else { FrameFormat::Pt4 });
    save_frames(&a.out, &restored, seq.ids(), format)?;
    println!("wrote {} frames to {}", restored.len(), a.out.display());
    Ok(())
}

/// `psnr=<v> ssim=<v>` with `inf` for identical inputs.
pub fn format_eval(psnr: f64, ssim: f64) -> String {
    format!("psnr={psnr:.6} ssim={ssim:.6}")
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let pred = load_sequence::<f64>(&a.pred)?;
    let target = load_sequence::<f64>(&a.target)?;
    let (p, s) = compare_frames(pred.frames(), target.frames())?;
    println!("{}", format_eval(p, s));
    Ok(())
}

fn validation_set(seed: u64) -> std::result::Result<Dataset<f32>, Failure> {
    let spec = SynthSpec {
        seed,
        ..SynthSpec::default()
    };
    let (b, s) = generate_synthetic(&spec)?;
    Ok(Dataset::single(b, s)?)
}

fn cmd_ablate(a: &AblateArgs) -> CmdResult {
    let base = match &a.ckpt {
        Some(p) => load_checkpoint(p)?,
        None => {
            let (mut cfg, _) = resolve_model(&a.model)?;
            cfg.seed = a.seed;
            PahsParameters::init(&cfg)?
        }
    };
    let data = match &a.data {
        Some(d) => Dataset::load(d)?,
        None => validation_set(a.seed)?,
    };
    let opts = AblationOptions {
        variants: a
            .variants
            .as_deref()
            .map(|v| v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect())
            .unwrap_or_default(),
        repeats: a.repeats,
    };
    let rows = ablate(&base, &data, &opts, |r| {
        eprintln!("{:<14} psnr {:.4}  ssim {:.6}  {:.1} ms", r.variant, r.psnr, r.ssim, r.wall_ms);
    })?;
    write_report(&a.out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        seeds: a.seeds,
        cell_seeds: a.cell_seeds,
        ..GradcheckOptions::default()
    };
    let mut failed = 0;
    let results = run_suite(&opts, |r| {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!(
            "{status} {:<28} max rel err {:.3e} (tol {:.0e}, {} coords, {} at kinks)",
            r.name, r.max_rel_error, r.tolerance, r.coordinates, r.kinks
        );
    })?;
    failed += results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(contract(format!("{failed} gradient checks failed")));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> CmdResult {
    let format = match a.format.as_str() {
        "pt4" => FrameFormat::Pt4,
        "ppm" => FrameFormat::Ppm,
        other => return Err(contract(format!("unknown frame format `{other}` (pt4, ppm)"))),
    };
    if a.sequences == 0 {
        return Err(contract("--sequences must be at least 1"));
    }
    let mut seqs = Vec::with_capacity(a.sequences);
    for i in 0..a.sequences {
        let spec = SynthSpec {
            height: a.height,
            width: a.width,
            shapes: a.shapes,
            max_displacement: a.max_displacement,
            substeps: a.substeps,
            frames: a.frames,
            seed: a.seed + i as u64,
        };
        let (b, s) = generate_synthetic::<f32>(&spec)?;
        seqs.push(PairedSequence::new(format!("seq_{i:03}"), b, s)?);
    }
    Dataset::new(seqs)?.save(&a.out, format)?;
    println!("wrote {} sequences to {}", a.sequences, a.out.display());
    Ok(())
}

fn cmd_dump(a: &DumpArgs) -> CmdResult {
    let params = load_checkpoint(&a.ckpt)?;
    let seq = load_sequence::<f32>(&a.input)?;
    let dump = debug_dump(&seq, &params, a.frame)?;
    dump.write(&a.out)?;
    println!("wrote {} tensors to {}", dump.entries().len(), a.out.display());
    Ok(())
}

pub fn execute(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Dump(a) => cmd_dump(a),
    }
}

/// Caps the worker pool at `PAHS_THREADS` when set.
pub fn configure_threads() -> std::result::Result<(), Failure> {
    if let Ok(v) = std::env::var("PAHS_THREADS") {
        let n: usize = parse_num("PAHS_THREADS", &v)?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| contract(format!("PAHS_THREADS: {e}")))?;
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|_| execute(&cli)) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
