use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand};
use jid_core::imaging::{self, bad_pixel_rate, load_image, rmse_8bit, save_image, upsample_baseline};
use jid_core::learning::{extract_training_pairs, learn_operator_pair_observed, write_learning_trace};
use jid_core::reconstruction::{geometric_schedule, super_resolve_depth_map};
use jid_core::{
    jido, CgConfig, DepthMap, ErrorKind, FidelityKind, GrayImage, Interpolation, LearnConfig, RegisteredPair,
    SolveConfig,
};

mod settings;

use settings::{parse_config, Settings};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(jid_core::Error),
}

impl From<jid_core::Error> for CliError {
    fn from(e: jid_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

/// Learn coupled intensity/depth analysis operators and use them for guided
/// depth super-resolution.
#[derive(Debug, Parser)]
#[command(name = "jid", version)]
struct Cli {
    /// Plain-text key=value file; flags on the command line take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Random seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for relative output paths
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn an operator pair from registered intensity/depth images
    Learn {
        /// Text file, one "intensity depth" path pair per line
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        patch_side: Option<usize>,
        /// Rows per operator as a multiple of the patch size
        #[arg(long)]
        redundancy: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        nu: Option<f64>,
        #[arg(long)]
        kappa: Option<f64>,
        #[arg(long)]
        mu: Option<f64>,
        /// Conjugate-gradient iterations
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Learning trace CSV (default: <out>.trace.csv)
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Blur and decimate a depth map to produce a low-resolution input
    Downsample {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Hole mask at input or output resolution; zero pixels become missing
        #[arg(long)]
        mask: Option<PathBuf>,
    },
    /// Reconstruct a high-resolution depth map guided by an intensity image
    Upscale {
        #[arg(long)]
        depth: Option<PathBuf>,
        #[arg(long)]
        intensity: Option<PathBuf>,
        #[arg(long)]
        ops: Option<PathBuf>,
        #[arg(long)]
        factor: Option<usize>,
        /// iid or mahalanobis
        #[arg(long)]
        fidelity: Option<String>,
        #[arg(long)]
        lambda_stages: Option<usize>,
        #[arg(long)]
        lambda_start: Option<f64>,
        #[arg(long)]
        lambda_end: Option<f64>,
        /// Conjugate-gradient iterations per stage
        #[arg(long)]
        iters: Option<usize>,
        /// Ground truth for the relative-RMSE trace column
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// 8 or 16
        #[arg(long)]
        bit_depth: Option<u8>,
    },
    /// Interpolation baseline (nearest, bilinear or bicubic)
    Interpolate {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bad-pixel percentage and RMSE on the 8-bit scale
    Evaluate {
        #[arg(long)]
        est: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Learn { .. } => "learn",
            Command::Downsample { .. } => "downsample",
            Command::Upscale { .. } => "upscale",
            Command::Interpolate { .. } => "interpolate",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn allowed_keys(sub: &str) -> Vec<String> {
    let cmd = Cli::command();
    let mut keys: Vec<String> = cmd
        .get_arguments()
        .chain(cmd.find_subcommand(sub).into_iter().flat_map(|s| s.get_arguments()))
        .filter_map(|a| a.get_long().map(str::to_string))
        .filter(|k| k != "config" && k != "help" && k != "version")
        .collect();
    keys.sort();
    keys.dedup();
    keys
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let name = cli.command.name();
    let file = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| jid_core::Error::io(p, e))?;
            parse_config(&text, &allowed_keys(name))?
        }
        None => Default::default(),
    };
    let mut s = Settings::new(file, None);
    let threads = s.optional("threads", cli.threads)?;
    let seed = s.value("seed", cli.seed, 0u64)?;
    let out_dir = s.optional_input("output-dir", cli.output_dir.clone())?;
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))?;
    }
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).map_err(|e| jid_core::Error::io(dir, e))?;
    }
    let mut s = s.with_out_dir(out_dir);
    match cli.command {
        Command::Learn {
            pairs,
            patch_side,
            redundancy,
            samples,
            nu,
            kappa,
            mu,
            iters,
            out,
            trace,
        } => {
            let defaults = LearnConfig::<f64>::default();
            let pairs = s.input_path("pairs", pairs)?;
            let p = s.value("patch-side", patch_side, 5)?;
            let red = s.value("redundancy", redundancy, 2)?;
            let samples = s.value("samples", samples, 15000)?;
            let nu = s.value("nu", nu, defaults.nu)?;
            let kappa = s.value("kappa", kappa, defaults.kappa)?;
            let mu = s.value("mu", mu, defaults.mu)?;
            let iters = s.value("iters", iters, defaults.cg.max_iterations)?;
            let out = s.output_path("out", out, Some("ops.jido".into()))?.unwrap_or_default();
            let trace = match s.output_path("trace", trace, None)? {
                Some(t) => t,
                None => out.with_extension("trace.csv"),
            };
            s.report(name);
            let cfg = LearnConfig {
                nu,
                kappa,
                mu,
                k: red * p * p,
                cg: CgConfig {
                    max_iterations: iters,
                    ..defaults.cg
                },
                rng_seed: seed,
            };
            cmd_learn(&pairs, p, samples, &cfg, seed, &out, &trace)
        }
        Command::Downsample {
            input,
            factor,
            out,
            mask,
        } => {
            let input = s.input_path("in", input)?;
            let d = s.value("factor", factor, 2)?;
            let out = s
                .output_path("out", out, None)?
                .ok_or_else(|| CliError::Usage("missing required setting --out".into()))?;
            let mask = s.optional_input("mask", mask)?;
            s.report(name);
            cmd_downsample(&input, d, &out, mask.as_deref())
        }
        Command::Upscale {
            depth,
            intensity,
            ops,
            factor,
            fidelity,
            lambda_stages,
            lambda_start,
            lambda_end,
            iters,
            gt,
            out,
            trace,
            bit_depth,
        } => {
            let defaults = SolveConfig::<f64>::default();
            let depth = s.input_path("depth", depth)?;
            let intensity = s.input_path("intensity", intensity)?;
            let ops = s.input_path("ops", ops)?;
            let d = s.value("factor", factor, 2)?;
            let fidelity: FidelityKind = s.value("fidelity", fidelity, "iid".to_string())?.parse()?;
            let stages = s.value("lambda-stages", lambda_stages, defaults.lambda_schedule.len())?;
            let l0 = s.value("lambda-start", lambda_start, 1.0)?;
            let l1 = s.value("lambda-end", lambda_end, 1e-2)?;
            let iters = s.value("iters", iters, defaults.iterations_per_stage)?;
            let gt = s.optional_input("gt", gt)?;
            let out = s
                .output_path("out", out, None)?
                .ok_or_else(|| CliError::Usage("missing required setting --out".into()))?;
            let trace = s.output_path("trace", trace, None)?;
            let bits = s.value("bit-depth", bit_depth, 8u8)?;
            s.report(name);
            if stages == 0 || !(l0 > 0.0 && l1 > 0.0) || l1 > l0 {
                return Err(CliError::Usage(
                    "need at least one stage and 0 < lambda-end <= lambda-start".into(),
                ));
            }
            let cfg = SolveConfig {
                lambda_schedule: geometric_schedule(l0, l1, stages),
                iterations_per_stage: iters,
                ..defaults
            };
            let args = UpscaleArgs {
                depth,
                intensity,
                ops,
                factor: d,
                fidelity,
                gt,
                out,
                trace,
                bits,
            };
            cmd_upscale(&args, &cfg)
        }
        Command::Interpolate {
            input,
            factor,
            method,
            out,
        } => {
            let input = s.input_path("in", input)?;
            let d = s.value("factor", factor, 2)?;
            let method: Interpolation = s.value("method", method, "bicubic".to_string())?.parse()?;
            let out = s
                .output_path("out", out, None)?
                .ok_or_else(|| CliError::Usage("missing required setting --out".into()))?;
            s.report(name);
            let lr = load_image(&input)?;
            let hr = upsample_baseline(&lr, d, method)?;
            save_image(&hr, &out, lr.bit_depth())?;
            Ok(())
        }
        Command::Evaluate { est, gt, delta } => {
            let est = s.input_path("est", est)?;
            let gt = s.input_path("gt", gt)?;
            let delta = s.value("delta", delta, 1.0)?;
            s.report(name);
            let est = load_image(&est)?;
            let gt = DepthMap::from_image(load_image(&gt)?);
            let bad = bad_pixel_rate(&est, &gt, delta)?;
            let rmse = rmse_8bit(&est, &gt)?;
            println!("bad={bad:.2}% rmse={rmse:.3}");
            Ok(())
        }
    }
}

/// Reads a manifest of `intensity depth` path pairs; relative paths are taken
/// relative to the manifest's directory.
fn read_manifest(path: &Path) -> Result<Vec<RegisteredPair>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| jid_core::Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [i, d] = fields[..] else {
            return Err(CliError::Core(jid_core::Error::Image {
                path: path.to_path_buf(),
                message: format!("line {}: expected two paths, found {}", no + 1, fields.len()),
            }));
        };
        let (ip, dp) = (base.join(i), base.join(d));
        pairs.push(RegisteredPair {
            id: format!("{} + {}", ip.display(), dp.display()),
            intensity: load_image(&ip)?,
            depth: DepthMap::from_image(load_image(&dp)?),
        });
    }
    if pairs.is_empty() {
        return Err(CliError::Core(jid_core::Error::EmptyTrainingSet));
    }
    Ok(pairs)
}

fn cmd_learn(
    manifest: &Path,
    p: usize,
    samples: usize,
    cfg: &LearnConfig<f64>,
    seed: u64,
    out: &Path,
    trace: &Path,
) -> Result<(), CliError> {
    let pairs = read_manifest(manifest)?;
    let set = extract_training_pairs::<f64>(&pairs, samples, p, seed)?;
    eprintln!("extracted {} patch pairs from {} image pairs", set.len(), pairs.len());
    let outcome = learn_operator_pair_observed(&set, cfg, |r| {
        if r.iteration % 100 == 0 {
            eprintln!(
                "  iter {:>5}  objective {:.6e}  |grad| {:.3e}",
                r.iteration, r.cost, r.grad_norm
            );
        }
    })?;
    eprintln!(
        "stopped after {} iterations ({:?})",
        outcome.trace.last().map_or(0, |r| r.iteration),
        outcome.stop
    );
    jido::save_pair(&outcome.pair, out)?;
    write_learning_trace(trace, &outcome.trace)?;
    eprintln!("wrote {} and {}", out.display(), trace.display());
    Ok(())
}

fn cmd_downsample(input: &Path, d: usize, out: &Path, mask: Option<&Path>) -> Result<(), CliError> {
    // zero-valued input pixels are holes and spoil every sample they touch
    let hr = load_image(input)?;
    let lr = imaging::downsample_depth(&DepthMap::from_image(hr.clone()), d)?;
    let (lw, lh) = (lr.width(), lr.height());
    let mut values = lr.image.into_plane();
    if let Some(mask_path) = mask {
        let m = load_image(mask_path)?;
        let keep: Vec<bool> = if m.width() == lw && m.height() == lh {
            m.plane().as_slice().iter().map(|&v| v > 0.0).collect()
        } else if m.width() == hr.width() && m.height() == hr.height() {
            (0..lh * lw)
                .map(|i| m.plane().get(d * (i / lw), d * (i % lw)) > 0.0)
                .collect()
        } else {
            return Err(CliError::Core(jid_core::Error::SizeMismatch(format!(
                "mask {} is {}x{}, expected {lw}x{lh} or {}x{}",
                mask_path.display(),
                m.width(),
                m.height(),
                hr.width(),
                hr.height()
            ))));
        };
        for (v, k) in values.as_mut_slice().iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    save_image(&GrayImage::new(values, hr.bit_depth())?, out, hr.bit_depth())?;
    Ok(())
}

struct UpscaleArgs {
    depth: PathBuf,
    intensity: PathBuf,
    ops: PathBuf,
    factor: usize,
    fidelity: FidelityKind,
    gt: Option<PathBuf>,
    out: PathBuf,
    trace: Option<PathBuf>,
    bits: u8,
}

fn cmd_upscale(a: &UpscaleArgs, cfg: &SolveConfig<f64>) -> Result<(), CliError> {
    let lr = DepthMap::from_image(load_image(&a.depth)?);
    let intensity = load_image(&a.intensity)?;
    let pair = jido::load_pair::<f64>(&a.ops)?;
    let gt = match &a.gt {
        Some(p) => Some(DepthMap::from_image(load_image(p)?)),
        None => None,
    };
    if let Some(g) = &gt {
        if g.width() != intensity.width() || g.height() != intensity.height() {
            return Err(CliError::Core(jid_core::Error::SizeMismatch(format!(
                "ground truth is {}x{}, intensity image is {}x{}",
                g.width(),
                g.height(),
                intensity.width(),
                intensity.height()
            ))));
        }
    }
    let (hr, trace) = super_resolve_depth_map(&lr, &intensity, &pair, a.factor, a.fidelity, cfg, gt.as_ref())?;
    save_image(&hr, &a.out, a.bits)?;
    if let Some(t) = &a.trace {
        trace.write_csv(t)?;
    }
    if let Some(g) = &gt {
        let bad = bad_pixel_rate(&hr, g, 1.0)?;
        let rmse = rmse_8bit(&hr, g)?;
        println!("bad={bad:.2}% rmse={rmse:.3}");
    }
    Ok(())
}
