use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use cdsrank::affinity::Metric;
use cdsrank::config::RunConfig;
use cdsrank::dataset::{synth_generate, synth_scores, GalleryIndex};
use cdsrank::eval::evaluate_rankings;
use cdsrank::io::{load_features, load_ranking, load_scores, write_features, write_ranking_to, write_scores};
use cdsrank::parallel::Execution;
use cdsrank::pipeline::{cluster_probes, parse_range, rerank, sweep, write_sweep_csv, SweepParam};
use cdsrank::rerank::VerificationScores;
use cdsrank::Error;

/// Constrained dominant-sets clustering and retrieval re-ranking.
///
/// Config values are resolved flag first, then `--config` file, then the
/// built-in default. Set CDSRANK_THREADS to cap worker threads (0 = auto).
#[derive(Parser)]
#[command(name = "cdsrank", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract the constrained dominant set of each probe id (JSON report).
    Cluster {
        features: PathBuf,
        /// Probe ids; repeat or comma-separate.
        #[arg(long = "probe", required = true, value_delimiter = ',')]
        probes: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Rank the gallery for every probe (JSON lines).
    Rerank(RerankArgs),
    /// Same as `rerank --expand`.
    Expand(RerankArgs),
    /// Score rankings against identity/camera labels (metrics JSON).
    Eval {
        ranking: PathBuf,
        /// Feature file providing the labels.
        labels: PathBuf,
        #[arg(long, default_value_t = 20)]
        max_rank: usize,
    },
    /// Write a synthetic labelled feature file, optionally with noisy verification scores.
    Synth {
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        num_ids: usize,
        #[arg(long, default_value_t = 4)]
        per_id: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Per-coordinate standard deviation of the noise around each centroid.
        #[arg(long, default_value_t = 0.25)]
        noise: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write verification scores here (JSON for `.json`, else a CSV pair).
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Logit gap between matching and non-matching pairs in the scores.
        #[arg(long, default_value_t = 2.0)]
        signal: f64,
        /// Standard deviation of the logit noise in the scores.
        #[arg(long, default_value_t = 1.0)]
        score_noise: f64,
    },
    /// Evaluate mAP over a range of one parameter (CSV `param,mAP`).
    Sweep {
        features: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        /// beta, delta, alpha_margin or k_expand.
        #[arg(long)]
        param: String,
        /// `start:end:step` (inclusive) or a comma-separated list.
        #[arg(long)]
        range: String,
        #[arg(long)]
        expand: bool,
        #[arg(long, default_value_t = 20)]
        max_rank: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

#[derive(Args)]
struct RerankArgs {
    features: PathBuf,
    /// Verification scores; uniform when absent.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Use constraint expansion (needs --k-expand).
    #[arg(long)]
    expand: bool,
    /// Write rankings here instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Relative margin of alpha over the largest eigenvalue [default: 0.05]
    #[arg(long)]
    alpha_margin: Option<f64>,
    /// L1 step size that counts as converged [default: 1e-7]
    #[arg(long)]
    tol: Option<f64>,
    /// Replicator iteration cap [default: 10000]
    #[arg(long)]
    max_iter: Option<usize>,
    /// Support threshold on membership [default: 1e-5]
    #[arg(long)]
    theta: Option<f64>,
    /// Fusion weight [default: 0.9]
    #[arg(long)]
    beta: Option<f64>,
    /// Dissimilarity offset [default: 0.3]
    #[arg(long)]
    delta: Option<f64>,
    /// Neighbourhood size for constraint expansion [default: unset]
    #[arg(long)]
    k_expand: Option<usize>,
    /// Constraints promoted during expansion [default: 1]
    #[arg(long)]
    expanders: Option<usize>,
    /// Affinity metric, dot or cosine [default: dot]
    #[arg(long)]
    metric: Option<Metric>,
    /// Seed for randomized steps [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Scale affinities so the largest is 1 [default: false]
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<bool>,
    /// Solve probes one after another on the calling thread.
    #[arg(long)]
    sequential: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    c.$field = v;
                }
            )*};
        }
        over!(alpha_margin, tol, max_iter, theta, beta, delta, expanders, metric, seed, normalize);
        if self.k_expand.is_some() {
            c.k_expand = self.k_expand;
        }
        if self.sequential {
            c.execution = Execution::Sequential;
        }
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Input(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(format!("writing output: {e}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|()| run(cli.command));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CDSRANK_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Failure::Input(format!("CDSRANK_THREADS: `{raw}` is not a thread count")))?;
    #[cfg(feature = "parallel")]
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Input(format!("CDSRANK_THREADS: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn scores_for(path: Option<&Path>, index: &GalleryIndex) -> Result<Option<VerificationScores>, Error> {
    path.map(|p| load_scores(p, index.len())).transpose()
}

fn print_json(value: &impl Serialize) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)
        .map_err(|e| Failure::Input(format!("writing output: {e}")))?;
    writeln!(out)?;
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Cluster {
            features,
            probes,
            config,
        } => {
            let cfg = config.resolve()?;
            let index = load_features(&features)?;
            let reports = cluster_probes(&index, &probes, &cfg)?;
            for r in reports.iter().filter(|r| !r.result.converged) {
                eprintln!("warning: probe {} hit max_iter before converging", r.probe_id);
            }
            print_json(&reports)
        }
        Command::Rerank(args) => run_rerank(args, false),
        Command::Expand(args) => run_rerank(args, true),
        Command::Eval {
            ranking,
            labels,
            max_rank,
        } => {
            let lists = load_ranking(&ranking)?;
            let index = load_features(&labels)?;
            let metrics = evaluate_rankings(&lists, &index, max_rank)?;
            if metrics.excluded > 0 {
                eprintln!("note: {} queries had no valid match and were left out", metrics.excluded);
            }
            print_json(&metrics)
        }
        Command::Synth {
            output,
            num_ids,
            per_id,
            dim,
            noise,
            seed,
            scores,
            signal,
            score_noise,
        } => {
            let index = synth_generate(num_ids, per_id, dim, noise, seed)?;
            write_features(&output, &index)?;
            if let Some(path) = scores {
                let s = synth_scores(&index, signal, score_noise, seed.wrapping_add(1))?;
                write_scores(&path, &s)?;
            }
            eprintln!("wrote {} items to {}", index.len(), output.display());
            Ok(())
        }
        Command::Sweep {
            features,
            scores,
            param,
            range,
            expand,
            max_rank,
            config,
        } => {
            let cfg = config.resolve()?;
            let param: SweepParam = param.parse()?;
            let values = parse_range(&range)?;
            let index = load_features(&features)?;
            let scores = scores_for(scores.as_deref(), &index)?;
            let rows = sweep(&index, scores.as_ref(), &cfg, expand, param, &values, max_rank)?;
            let mut out = io::stdout().lock();
            write_sweep_csv(&mut out, param, &rows)?;
            Ok(())
        }
    }
}

fn run_rerank(args: RerankArgs, force_expand: bool) -> Result<(), Failure> {
    let cfg = args.config.resolve()?;
    let expand = args.expand || force_expand;
    if expand {
        cfg.expansion()?;
    }
    let index = load_features(&args.features)?;
    let scores = scores_for(args.scores.as_deref(), &index)?;
    let out = rerank(&index, scores.as_ref(), &cfg, expand)?;
    for note in out.diagnostics() {
        eprintln!("note: {note}");
    }
    match &args.output {
        Some(path) => {
            let file = std::fs::File::create(path)
                .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let mut w = io::BufWriter::new(file);
            write_ranking_to(&mut w, &out.rankings)?;
            w.flush()?;
        }
        None => {
            let mut w = io::BufWriter::new(io::stdout().lock());
            write_ranking_to(&mut w, &out.rankings)?;
            w.flush()?;
        }
    }
    Ok(())
}
