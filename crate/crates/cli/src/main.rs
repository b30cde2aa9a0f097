//! `ireid`: synthetic data generation, ranking, evaluation, training demos
//! and gradient checks from the command line.
//!
//! Exit codes: 0 on success, 1 when inputs fail validation (or a gradient
//! check fails), 2 on I/O and file-format failures.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ireid_core::gradcheck::gradcheck_by_name;
use ireid_core::io::{load_dataset, read_json, read_model, read_rank_lists, write_json, write_rank_lists};
use ireid_core::metrics::{MetricReport, DEFAULT_CMC_KS, DEFAULT_TAUS};
use ireid_core::retrieval::rank_dataset;
use ireid_core::synth::{gen_synthetic, SynthConfig};
use ireid_core::train::{train_demo, write_run_dir, MarginMode, Recipe, TrainConfig};
use ireid_core::{Depth, EmptyQueryPolicy, Error, ModelParams, RankEvalConfig, RetrievalMode};

#[derive(Parser)]
#[command(name = "ireid", version, about = "Instruction-conditioned person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenSynth {
        /// JSON synthetic config; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rank every query of a manifest against its gallery.
    Rank {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "task_specific")]
        mode: RetrievalMode,
        /// Parameter file; an untrained model is used when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Shortlist size for text-to-image reranking.
        #[arg(long, default_value_t = 128)]
        shortlist: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compute metrics for a rank-list file.
    Eval(EvalArgs),
    /// Eval with the default threshold sweep.
    SweepTau(EvalArgs),
    /// Train on a manifest and write a run directory.
    TrainDemo {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "irm")]
        recipe: Recipe,
        #[arg(long)]
        out: PathBuf,
        /// JSON training config; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_parser = parse_margin)]
        margin: Option<MarginMode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long)]
        loss: String,
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ranks: PathBuf,
    /// Comma-separated thresholds.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    tau: Option<Vec<f64>>,
    #[arg(long, default_value = "full")]
    depth: Depth,
    #[arg(long, default_value = "count-as-zero", value_parser = parse_policy)]
    empty_queries: EmptyQueryPolicy,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_margin(s: &str) -> Result<MarginMode, String> {
    match s {
        "adaptive" => Ok(MarginMode::Adaptive),
        "vanilla" => Ok(MarginMode::Vanilla),
        _ => Err(format!("unknown margin mode `{s}`")),
    }
}

fn parse_policy(s: &str) -> Result<EmptyQueryPolicy, String> {
    match s {
        "count-as-zero" => Ok(EmptyQueryPolicy::CountAsZero),
        "exclude" => Ok(EmptyQueryPolicy::Exclude),
        _ => Err(format!("unknown empty-query policy `{s}`")),
    }
}

/// Prints to stdout, ignoring a closed pipe.
fn print_json(value: serde_json::Value) {
    let text = serde_json::to_string_pretty(&value).expect("serializable");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn eval(args: EvalArgs, default_sweep: bool) -> Result<(), Error> {
    let ranks = read_rank_lists(&args.ranks)?;
    let taus = match (args.tau, default_sweep) {
        (Some(t), _) => t,
        (None, true) => DEFAULT_TAUS.to_vec(),
        (None, false) => vec![-1.0],
    };
    let config = RankEvalConfig {
        tau: taus[0],
        depth: args.depth,
        empty_query_policy: args.empty_queries,
    };
    let report = MetricReport::compute(&ranks, &taus, &DEFAULT_CMC_KS, config)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_json(serde_json::to_value(&report).expect("serializable"));
    Ok(())
}

fn load_params(path: Option<&Path>, records: &[ireid_core::PersonRecord], seed: u64) -> Result<ModelParams, Error> {
    match path {
        Some(p) => read_model(p),
        None => {
            let dim = records
                .iter()
                .find_map(|r| r.image_embedding.as_ref().map(|e| e.dim()))
                .ok_or_else(|| Error::InvalidArgument("dataset has no images".into()))?;
            ModelParams::init(dim, 1, seed)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenSynth { config, out, seed } => {
            let mut cfg: SynthConfig = match config {
                Some(p) => read_json(&p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = gen_synthetic(&cfg)?;
            data.write(&out)?;
            eprintln!("wrote {} records to {}", data.records.len(), out.display());
        }
        Command::Rank {
            manifest,
            mode,
            params,
            out,
            shortlist,
            seed,
        } => {
            let records = load_dataset(&manifest)?;
            let params = load_params(params.as_deref(), &records, seed)?;
            let ranks = rank_dataset(&records, mode, &params, seed, Some(shortlist))?;
            write_rank_lists(&out, &ranks)?;
            eprintln!("ranked {} queries", ranks.len());
        }
        Command::Eval(args) => eval(args, false)?,
        Command::SweepTau(args) => eval(args, true)?,
        Command::TrainDemo {
            manifest,
            recipe,
            out,
            config,
            steps,
            lr,
            margin,
            seed,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.recipe = recipe;
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(l) = lr {
                cfg.learning_rate = l;
            }
            if let Some(m) = margin {
                cfg.margin_mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let records = load_dataset(&manifest)?;
            let outcome = train_demo(&records, &cfg)?;
            write_run_dir(&out, &cfg, &outcome)?;
            eprintln!(
                "held-out mAP {:.4} -> {:.4}",
                outcome.report_before.map, outcome.report_after.map
            );
        }
        Command::Gradcheck { loss, points, seed } => {
            let report = gradcheck_by_name(&loss, points, seed)?;
            print_json(serde_json::to_value(&report).expect("serializable"));
            if !report.passed {
                return Err(Error::InvalidArgument(format!(
                    "{loss}: max relative error {:e} exceeds {:e}",
                    report.max_rel_error, report.tolerance
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
