use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tokrec::cost::{flops_reduction, kv_cache_bytes, prefill_flops, ModelConfig};
use tokrec::harness::{gen_synthetic, oracle_check, SynthSpec};
use tokrec::pipeline::{compress, CompressOptions, DEFAULT_TEXT_TOKENS};
use tokrec::scoring::{text_score_rows, visual_score_rows};
use tokrec::tensor_io::{read_bundle, sci6, write_bundle, write_report};
use tokrec::viz::{render_grid, GridInput};
use tokrec::{Error, Execution, LofParams, DEFAULT_TAU};

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_ORACLE: u8 = 4;

#[derive(Parser)]
#[command(name = "tokrec", version, about = "Training-free visual token compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bundle with planted salient tokens.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        #[arg(long)]
        dt: usize,
        #[arg(long = "salient-visual")]
        salient_visual: usize,
        #[arg(long = "salient-text")]
        salient_text: usize,
        #[arg(long = "noise-sigma", default_value_t = 1.0)]
        noise_sigma: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress a bundle and write the result, a report and optional images.
    Compress {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "k-lof", default_value_t = 20)]
        k_lof: usize,
        /// Neighborhood size for seed selection; defaults to --k-lof.
        #[arg(long = "k-lof2")]
        k_lof2: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Threshold for seed selection; defaults to --tau.
        #[arg(long)]
        tau2: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Write PREFIX_visual.pgm, PREFIX_text.pgm and PREFIX_mask.pgm.
        #[arg(long)]
        viz: Option<String>,
        /// JSON model config for the FLOPs estimate; Vicuna-7B FP16 if absent.
        #[arg(long = "model-config")]
        model_config: Option<PathBuf>,
        #[arg(long = "n-text", default_value_t = DEFAULT_TEXT_TOKENS)]
        n_text: usize,
        /// Leave wall time out of the report so output is reproducible.
        #[arg(long = "no-timing")]
        no_timing: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write per-token scores as CSV.
    Score {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: ScoreMode,
        #[arg(long = "out-csv")]
        out_csv: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Estimate prefill FLOPs and KV-cache size.
    Cost {
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        dmodel: usize,
        #[arg(long)]
        dff: usize,
        #[arg(long = "n-visual")]
        n_visual: usize,
        #[arg(long = "n-text", default_value_t = DEFAULT_TEXT_TOKENS)]
        n_text: usize,
        #[arg(long = "bytes-per-param", default_value_t = 2.0)]
        bytes_per_param: f64,
        #[arg(long, default_value_t = 32000)]
        vocab: usize,
        /// Visual tokens after compression, to report the saving.
        #[arg(long = "n-visual-kept")]
        n_visual_kept: Option<usize>,
    },
    /// Cross-check LOF, assignment and merging against brute-force references.
    OracleCheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMode {
    Visual,
    Text,
}

enum Failure {
    Tok(Error),
    Input(String),
    Io(String),
    Oracle,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Tok(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tok(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_format() { EXIT_INPUT } else { EXIT_IO })
        }
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_IO)
        }
        Err(Failure::Oracle) => ExitCode::from(EXIT_ORACLE),
    }
}

fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce(Execution) -> T + Send) -> Result<T, Failure> {
    match threads {
        None => Ok(f(Execution::default())),
        Some(0) => Err(Failure::Input("--threads must be at least 1".into())),
        Some(1) => Ok(f(Execution::Sequential)),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Failure::Io(format!("thread pool: {e}")))?;
            Ok(pool.install(|| f(Execution::Parallel)))
        }
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_model(path: Option<&Path>) -> Result<ModelConfig, Failure> {
    let Some(path) = path else {
        return Ok(ModelConfig::vicuna_7b());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Synth { seed, n, d, dt, salient_visual, salient_text, noise_sigma, out } => {
            let spec = SynthSpec {
                seed,
                n,
                d,
                dt,
                n_visual_salient: salient_visual,
                n_text_salient: salient_text,
                noise_sigma,
            };
            let (mut bundle, truth) = gen_synthetic(&spec).map_err(|e| Failure::Input(e.to_string()))?;
            let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
            bundle.metadata.insert("planted_visual".into(), join(&truth.visual));
            bundle.metadata.insert("planted_text".into(), join(&truth.text));
            write_bundle(&bundle, &out)?;
            println!("wrote {} tokens to {}", bundle.len(), out.display());
        }
        Command::Compress {
            input,
            k_lof,
            k_lof2,
            tau,
            tau2,
            out,
            report,
            viz,
            model_config,
            n_text,
            no_timing,
            threads,
        } => {
            let bundle = read_bundle(&input)?;
            let primary = LofParams { k: k_lof, tau, fallback_keep: 1 };
            let secondary = LofParams { k: k_lof2.unwrap_or(k_lof), tau: tau2.unwrap_or(tau), fallback_keep: 1 };
            let model = load_model(model_config.as_deref())?;
            let result = with_threads(threads, |exec| {
                let opts = CompressOptions {
                    primary,
                    secondary,
                    execution: exec,
                    model: Some(model),
                    n_text_tokens: n_text,
                    timing: !no_timing,
                };
                let c = compress(&bundle, &opts)?;
                let text = match &bundle.text {
                    Some(_) if viz.is_some() => {
                        let all: Vec<usize> = (0..bundle.len()).collect();
                        Some(text_score_rows(&bundle, &all, exec)?)
                    }
                    _ => None,
                };
                Ok::<_, Error>((c, text))
            })?;
            let (c, text) = result?;
            if let Some(prefix) = &viz {
                if bundle.grid.is_none() {
                    return Err(Failure::Tok(Error::MissingGrid));
                }
                render_grid(GridInput::Heat(&c.visual_scores.normalized), bundle.grid, format!("{prefix}_visual.pgm"))?;
                if let Some(t) = &text {
                    render_grid(GridInput::Heat(&t.normalized), bundle.grid, format!("{prefix}_text.pgm"))?;
                }
                render_grid(GridInput::Mask(&c.selection), bundle.grid, format!("{prefix}_mask.pgm"))?;
            }
            write_bundle(&c.bundle, &out)?;
            write_report(&c.report, &report)?;
            println!(
                "{} -> {} tokens (visual {}, text {}, merged {}), retention {:.4}",
                c.report.n_input,
                c.selection.n_output(),
                c.report.n_visual_kept,
                c.report.n_text_recovered,
                c.report.n_merged,
                c.report.retention_ratio
            );
        }
        Command::Score { input, mode, out_csv, threads } => {
            let bundle = read_bundle(&input)?;
            let all: Vec<usize> = (0..bundle.len()).collect();
            let scores = with_threads(threads, |exec| match mode {
                ScoreMode::Visual => visual_score_rows(&bundle, &all, exec),
                ScoreMode::Text => text_score_rows(&bundle, &all, exec),
            })??;
            let mut csv = String::from("original_index,raw,normalized\n");
            for ((i, r), z) in bundle.original_indices.iter().zip(&scores.raw).zip(&scores.normalized) {
                writeln!(csv, "{i},{r:e},{z:e}").expect("string write");
            }
            write_file(&out_csv, csv)?;
        }
        Command::Cost { layers, dmodel, dff, n_visual, n_text, bytes_per_param, vocab, n_visual_kept } => {
            let cfg = ModelConfig { layers, hidden: dmodel, ffn: dff, vocab, bytes_per_param, param_count: None };
            cfg.validate()?;
            let n = n_visual + n_text;
            println!("tokens: {n}");
            println!("prefill_flops: {}", sci6(prefill_flops(&cfg, n)));
            println!("kv_cache_bytes: {}", sci6(kv_cache_bytes(&cfg, n)?));
            if let Some(kept) = n_visual_kept {
                println!("tokens_after: {}", kept + n_text);
                println!("prefill_flops_after: {}", sci6(prefill_flops(&cfg, kept + n_text)));
                println!("flops_reduction: {:.4}", flops_reduction(&cfg, n_visual, kept, n_text));
            }
        }
        Command::OracleCheck { seed, cases } => {
            let r = oracle_check(seed, cases);
            println!("lof: {} passed, {} failed", r.lof_pass, r.lof_fail);
            println!("assign: {} passed, {} failed", r.assign_pass, r.assign_fail);
            println!("merge: {} passed, {} failed", r.merge_pass, r.merge_fail);
            if !r.all_passed() {
                return Err(Failure::Oracle);
            }
        }
    }
    Ok(())
}
