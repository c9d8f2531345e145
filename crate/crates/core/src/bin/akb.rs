//! `akb`: train, evaluate and compare the KB-assisted JSCC schemes against
//! the JPEG + LDPC + 16-QAM baseline over simulated AWGN channels.
//!
//! On failure the process exits nonzero with a machine-readable JSON error
//! on stderr.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use akb_core::baseline::{classic_chain, LdpcCode};
use akb_core::channel::ChannelSpec;
use akb_core::harness::config::Scheme;
use akb_core::harness::{
    ablate, emit_plotdata, ensure_kb, ensure_manifest, generate_dataset, run_eval, run_sweep_cbr,
    train_agent, train_codec, write_ablate_csv, write_eval_csv, write_sweep_csv, ExperimentConfig,
    HarnessError, Provider,
};
use akb_core::rng::rng_derive;
use akb_core::source_kb::{kb_load, kb_search, Captioner, Embedder};

#[derive(Parser)]
#[command(name = "akb", about = "KB-assisted variable-rate JSCC experiments")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Single-threaded bit-exact mode.
    #[arg(long, global = true, default_value_t = false)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the learned codec for the configured scheme.
    TrainCodec {
        /// Override the scheme to train (akb_jscc or fixed_rate_jscc).
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Train the PPO rate-control agent against the frozen codec.
    TrainAgent,
    /// Evaluate the configured schemes over the SNR grid.
    Eval,
    /// Sweep CBR targets at the sweep SNR.
    Sweep,
    /// Compare akb_jscc, akb_jscc_no_ckb and fixed_rate_jscc.
    Ablate,
    /// Knowledge-base operations.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Run the JPEG + LDPC + 16-QAM chain on the test split.
    Baseline {
        #[arg(long)]
        quality: Option<u8>,
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        ldpc_fixture: Option<PathBuf>,
    },
    /// Emit plot-data series from evaluation/sweep CSVs.
    Report {
        /// Input CSV files.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Generate a synthetic image dataset.
    Datagen {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Build the KB from the train split and persist it.
    Build,
    /// Retrieve the nearest KB entry for an image.
    Search {
        #[arg(long)]
        image: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { cli.workers };
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("{}", err.to_json());
            std::process::exit(1);
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let path = cli.config.as_ref().ok_or_else(|| HarnessError::Config {
        reason: "--config is required for this command".to_string(),
    })?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_scheme(name: &str) -> Result<Scheme, HarnessError> {
    serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| {
        HarnessError::Config {
            reason: format!(
                "unknown scheme {name}; expected akb_jscc, akb_jscc_no_ckb, fixed_rate_jscc or jpeg_ldpc"
            ),
        }
    })
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match &cli.command {
        Command::TrainCodec { scheme } => {
            let cfg = load_config(&cli)?;
            let scheme = match scheme {
                Some(name) => parse_scheme(name)?,
                None => cfg.scheme,
            };
            let outcome = train_codec(&cfg, scheme)?;
            println!(
                "trained {}: loss {:.5} -> {:.5}, checkpoint {}",
                scheme.as_str(),
                outcome.first_total,
                outcome.last_total,
                outcome.checkpoint.display()
            );
        }
        Command::TrainAgent => {
            let cfg = load_config(&cli)?;
            let outcome = train_agent(&cfg)?;
            println!(
                "trained agent: reward {:.4} -> {:.4}, mean action index {:.2}, checkpoint {}",
                outcome.mean_reward_first_quarter,
                outcome.mean_reward_last_quarter,
                outcome.mean_action_index_last_quarter,
                outcome.checkpoint.display()
            );
        }
        Command::Eval => {
            let cfg = load_config(&cli)?;
            let rows = run_eval(&cfg, cli.deterministic)?;
            let path = cfg.output_dir.join("eval.csv");
            write_eval_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Sweep => {
            let cfg = load_config(&cli)?;
            let rows = run_sweep_cbr(&cfg, cli.deterministic)?;
            let path = cfg.output_dir.join("sweep.csv");
            write_sweep_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Ablate => {
            let cfg = load_config(&cli)?;
            let rows = ablate(&cfg, cli.deterministic)?;
            let path = cfg.output_dir.join("ablate.csv");
            write_ablate_csv(&rows, &path)?;
            println!("{} rows -> {}", rows.len(), path.display());
        }
        Command::Kb { command } => {
            let cfg = load_config(&cli)?;
            match command {
                KbCommand::Build => {
                    std::fs::create_dir_all(&cfg.output_dir)?;
                    let manifest = ensure_manifest(&cfg)?;
                    let provider = Provider::from_config(&cfg.kb);
                    let kb = ensure_kb(&cfg, &manifest, &provider)?;
                    println!(
                        "kb: {} entries of dim {} -> {}",
                        kb.len(),
                        kb.dim(),
                        cfg.kb_path().display()
                    );
                }
                KbCommand::Search { image } => {
                    let kb = kb_load(&cfg.kb_path())?;
                    let img = akb_core::harness::data::load_cropped(image, cfg.dataset.crop)?;
                    let provider = Provider::from_config(&cfg.kb);
                    let caption = provider.caption(&img, &cfg.kb.prompt)?;
                    let query = provider.embed(&caption.text)?;
                    let result = kb_search(&query.vector, &kb)?;
                    let id = kb
                        .entry_ids
                        .get(result.index)
                        .cloned()
                        .unwrap_or_else(|| result.index.to_string());
                    println!(
                        "caption: {:?}\nindex: {} (id {}), squared distance {:.6}",
                        caption.text, result.index, id, result.sq_distance
                    );
                }
            }
        }
        Command::Baseline {
            quality,
            snr,
            ldpc_fixture,
        } => {
            let mut cfg = load_config(&cli)?;
            if let Some(q) = quality {
                cfg.baseline.quality = *q;
            }
            if let Some(f) = ldpc_fixture {
                cfg.baseline.ldpc_fixture = f.clone();
            }
            let snr = snr.unwrap_or(10.0);
            let manifest = ensure_manifest(&cfg)?;
            let test = akb_core::harness::load_split(&manifest, akb_core::harness::Split::Test)?;
            let code = LdpcCode::load_alist(&cfg.baseline.ldpc_fixture)?;
            let spec = ChannelSpec::awgn(snr);
            let mut psnr_sum = 0.0;
            let mut cbr_sum = 0.0;
            let mut failures = 0usize;
            for (idx, (_, img)) in test.iter().enumerate() {
                let stream = rng_derive(cfg.seed, &[7, idx as u64]);
                let out = classic_chain(img, cfg.baseline.quality, &spec, &code, &stream)?;
                psnr_sum += out.report.psnr_db;
                cbr_sum += out.report.cbr;
                failures += usize::from(!out.success);
            }
            let n = test.len() as f64;
            println!(
                "jpeg_ldpc @ {snr} dB, quality {}: mean psnr {:.3} dB, mean cbr {:.6}, {} of {} failed ({})",
                cfg.baseline.quality,
                psnr_sum / n,
                cbr_sum / n,
                failures,
                test.len(),
                akb_core::baseline::JPEG_ENCODER_ID,
            );
        }
        Command::Report { inputs, out_dir } => {
            let out = match (out_dir, &cli.config) {
                (Some(dir), _) => dir.clone(),
                (None, Some(_)) => load_config(&cli)?.output_dir.join("plots"),
                (None, None) => PathBuf::from("plots"),
            };
            let written = emit_plotdata(inputs, &out)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Datagen { dir, count, size } => {
            let seed = cli.seed.unwrap_or(42);
            generate_dataset(dir, *count, *size, seed)?;
            println!("wrote {count} images of {size}x{size} to {}", dir.display());
        }
    }
    Ok(())
}
