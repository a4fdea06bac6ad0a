//! The `pqf` command line.
//!
//! Every run writes one [`RunManifest`]: to `--manifest PATH` when given,
//! otherwise as a single `manifest {...}` line on stderr. Failures are a
//! single `error kind=<Kind> message=<json string>` line on stderr. Exit
//! status is 0 on success, 1 on usage errors and 2 on data errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::{median_errors, run_bench, to_csv, BenchConfig, Generator};
use crate::codec::{bit_report, compress_model, decompress, report_of, LayerCompressionConfig, LayerOverride, Quantizer, Regime};
use crate::error::{Error, Result};
use crate::finetune::{recovery_experiment, RecoveryConfig, ToyKind};
use crate::graph::{format_groups, resolve_groups};
use crate::tensor_io::{
    load_arch, load_checkpoint, load_compressed, save_checkpoint, save_compressed, ModelCheckpoint, CHECKPOINT_MAGIC,
};

#[derive(Parser, Debug)]
#[command(name = "pqf", version, about = "Permute, quantize and fine-tune network weight checkpoints", arg_required_else_help = true)]
struct Cli {
    /// Maximum worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed; falls back to the PQF_SEED environment variable, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write the run manifest here instead of stderr.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
struct CodecArgs {
    #[arg(long, default_value = "small")]
    regime: String,
    /// Codebook size of conv layers.
    #[arg(long, default_value_t = 256)]
    k: usize,
    /// Codebook size of fully-connected layers.
    #[arg(long, default_value_t = 2048)]
    k_fc: usize,
    /// Subvector size of pointwise convs.
    #[arg(long, default_value_t = 4)]
    d_pw: usize,
    /// Subvector size of fully-connected layers.
    #[arg(long, default_value_t = 4)]
    d_fc: usize,
    /// Leave these layers uncompressed (repeatable).
    #[arg(long)]
    skip: Vec<String>,
    /// Also compress the first conv/fc layer.
    #[arg(long)]
    compress_first: bool,
    /// Per-layer override `NAME:k=K,d=D` (repeatable).
    #[arg(long = "override")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a checkpoint into a compressed container.
    Compress {
        checkpoint: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        perm_iters: usize,
        #[arg(long, default_value_t = 1000)]
        src_iters: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        /// Plain k-means instead of SR-C.
        #[arg(long)]
        no_anneal: bool,
        /// Skip the permutation search.
        #[arg(long)]
        no_perm: bool,
    },
    /// Expand a compressed container back into a checkpoint.
    Decompress {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Bit allocation table for an architecture or checkpoint.
    Report {
        arch: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        #[arg(long)]
        csv: bool,
    },
    /// Permutation groups of an architecture.
    Groups { arch: PathBuf },
    /// Quantize and fine-tune a toy classifier.
    Eval {
        #[arg(long, default_value = "mlp")]
        toy: String,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-6)]
        lr_min: f64,
        #[arg(long, default_value_t = 8)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
    },
    /// Synthetic k-means / SR-C / permutation ablation.
    Bench {
        #[arg(long, default_value = "anisotropic")]
        generator: String,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 32)]
        rows: usize,
        #[arg(long, default_value_t = 256)]
        cols: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        src_iters: usize,
        #[arg(long, default_value_t = 1000)]
        perm_iters: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
    },
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub layer_errors: Vec<(String, f64)>,
    pub wall_ms: f64,
}

struct Output {
    config: Value,
    layer_errors: Vec<(String, f64)>,
}

impl Output {
    fn new(config: Value) -> Self {
        Self { config, layer_errors: Vec::new() }
    }
}

fn codec_config(args: &CodecArgs, seed: u64) -> Result<LayerCompressionConfig> {
    let mut cfg = LayerCompressionConfig::new(args.regime.parse::<Regime>()?);
    cfg.k = args.k;
    cfg.k_fc = args.k_fc;
    cfg.d_pw = args.d_pw;
    cfg.d_fc = args.d_fc;
    cfg.skip.extend(args.skip.iter().cloned());
    cfg.skip_first = !args.compress_first;
    cfg.seed = seed;
    for spec in &args.overrides {
        let (name, rest) =
            spec.split_once(':').ok_or_else(|| Error::InvalidArgument(format!("override `{spec}` lacks `:`")))?;
        let mut o = LayerOverride::default();
        for kv in rest.split(',') {
            let bad = || Error::InvalidArgument(format!("override `{spec}`"));
            let (key, value) = kv.split_once('=').ok_or_else(bad)?;
            let v: usize = value.parse().map_err(|_| bad())?;
            match key {
                "k" => o.k = Some(v),
                "d" => o.d = Some(v),
                _ => return Err(bad()),
            }
        }
        cfg.overrides.insert(name.to_string(), o);
    }
    Ok(cfg)
}

/// Reads an architecture from architecture text or from a checkpoint file.
fn load_model_or_arch(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        load_checkpoint(path)
    } else {
        load_arch(path)
    }
}

fn run(cmd: &Command, seed: u64, stdout: &mut Vec<u8>) -> Result<Output> {
    match cmd {
        Command::Compress { checkpoint, codec, out, perm_iters, src_iters, gamma, no_anneal, no_perm } => {
            let mut cfg = codec_config(codec, seed)?;
            cfg.perm_iters = *perm_iters;
            cfg.iterations = *src_iters;
            cfg.gamma = *gamma;
            cfg.quantizer = if *no_anneal { Quantizer::Kmeans } else { Quantizer::Src };
            cfg.use_permutation = !no_perm;
            let ckpt = load_checkpoint(checkpoint)?;
            let outcome = compress_model(&ckpt, &cfg)?;
            let bytes = save_compressed(&outcome.model, out)?;
            let r = &outcome.report;
            writeln!(stdout, "wrote {} ({bytes} bytes)", out.display())?;
            writeln!(stdout, "layers_encoded {}", outcome.encodings.len())?;
            writeln!(stdout, "summed_error {:.9}", outcome.summed_error())?;
            writeln!(stdout, "compression_ratio {:.2}", r.ratio())?;
            writeln!(stdout, "total_bits {}", r.total_bits())?;
            writeln!(stdout, "total_MB {:.2}", r.total_mb())?;
            let mut o = Output::new(json!({ "input": checkpoint, "output": out, "codec": cfg }));
            o.layer_errors = outcome.errors;
            Ok(o)
        }
        Command::Decompress { input, out } => {
            let model = load_compressed(input)?;
            let ckpt = decompress(&model)?;
            let bytes = save_checkpoint(&ckpt, out)?;
            writeln!(stdout, "wrote {} ({bytes} bytes, {} tensors)", out.display(), ckpt.tensors.len())?;
            writeln!(stdout, "compression_ratio {:.2}", report_of(&model).ratio())?;
            Ok(Output::new(json!({ "input": input, "output": out })))
        }
        Command::Report { arch, codec, csv } => {
            let cfg = codec_config(codec, seed)?;
            let model = load_model_or_arch(arch)?;
            let report = bit_report(&model, &cfg)?;
            stdout.write_all(if *csv { report.to_csv() } else { report.to_text() }.as_bytes())?;
            Ok(Output::new(json!({ "arch": arch, "codec": cfg, "csv": csv })))
        }
        Command::Groups { arch } => {
            let model = load_model_or_arch(arch)?;
            let groups = resolve_groups(&model)?;
            stdout.write_all(format_groups(&model, &groups).as_bytes())?;
            Ok(Output::new(json!({ "arch": arch, "groups": groups.len() })))
        }
        Command::Eval { toy, epochs, lr, lr_min, d, k } => {
            let mut cfg = RecoveryConfig::new(toy.parse::<ToyKind>()?, seed);
            cfg.finetune_epochs = *epochs;
            cfg.lr = *lr;
            cfg.lr_min = *lr_min;
            cfg.d = *d;
            cfg.k = *k;
            let out = recovery_experiment(&cfg)?;
            stdout.write_all(out.trace.to_csv().as_bytes())?;
            let summary = json!({
                "raw_val_acc": out.raw_val_acc,
                "quantized_val_acc": out.quantized_val_acc,
                "finetuned_val_acc": out.finetuned_val_acc,
                "structure_preserved": out.structure_preserved,
            });
            eprintln!("summary {summary}");
            Ok(Output::new(json!({ "eval": cfg, "summary": summary })))
        }
        Command::Bench { generator, seeds, rows, cols, d, k, src_iters, perm_iters, gamma } => {
            let cfg = BenchConfig {
                generator: generator.parse::<Generator>()?,
                rows: *rows,
                cols: *cols,
                d: *d,
                k: *k,
                seeds: *seeds,
                base_seed: seed,
                iterations: *src_iters,
                gamma: *gamma,
                perm_iters: *perm_iters,
            };
            let rows = run_bench(&cfg)?;
            stdout.write_all(to_csv(&rows).as_bytes())?;
            let medians: Value = median_errors(&rows).iter().map(|(m, e)| (m.as_str().to_string(), json!(e))).collect();
            Ok(Output::new(json!({ "bench": cfg, "median_E_t": medians })))
        }
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Compress { .. } => "compress",
        Command::Decompress { .. } => "decompress",
        Command::Report { .. } => "report",
        Command::Groups { .. } => "groups",
        Command::Eval { .. } => "eval",
        Command::Bench { .. } => "bench",
    }
}

fn report_error(e: &Error) {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_default();
    eprintln!("error kind={} message={msg}", e.kind());
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_to(argv, &mut std::io::stdout().lock())
}

/// [`dispatch`] with the primary output sent to `stdout`.
pub fn dispatch_to<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            if code == 0 {
                let _ = write!(stdout, "{e}");
            } else {
                let _ = e.print();
            }
            return code;
        }
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => match std::env::var("PQF_SEED") {
            Ok(v) => match v.trim().parse() {
                Ok(s) => s,
                Err(_) => {
                    report_error(&Error::InvalidArgument(format!("PQF_SEED=`{v}` is not an integer")));
                    return 1;
                }
            },
            Err(_) => 0,
        },
    };
    let start = Instant::now();
    let mut buffer = Vec::new();
    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(|| run(&cli.command, seed, &mut buffer)),
            Err(e) => Err(Error::InvalidArgument(e.to_string())),
        },
        None => run(&cli.command, seed, &mut buffer),
    };
    if let Err(e) = stdout.write_all(&buffer).and_then(|_| stdout.flush()) {
        report_error(&Error::IoFailure(e));
        return 2;
    }
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            report_error(&e);
            return match e {
                Error::InvalidArgument(_) => 1,
                _ => 2,
            };
        }
    };
    let manifest = RunManifest {
        tool: "pqf",
        version: env!("CARGO_PKG_VERSION"),
        command: command_name(&cli.command).to_string(),
        seed,
        config: out.config,
        layer_errors: out.layer_errors,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let text = serde_json::to_string(&manifest).unwrap_or_default();
    match &cli.manifest {
        Some(path) => {
            if let Err(e) = fs::write(path, text + "\n") {
                report_error(&Error::IoFailure(e));
                return 2;
            }
        }
        None => eprintln!("manifest {text}"),
    }
    0
}
