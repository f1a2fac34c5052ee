//! `focal` — the pipeline front end.
//!
//! Exit codes: 0 ok, 1 usage error, 2 data/config error, 3 numeric failure.
//! `FOCAL_THREADS` bounds the worker pool.

mod pipeline;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "focal", version, about = "Forensic contrastive-clustering pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    /// Per-image improved loss averaged over the batch.
    Image,
    /// Merged-batch ablation of the improved loss.
    Batch,
    /// Original single-positive-key loss.
    Vanilla,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlgoArg {
    Hdbscan,
    Kmeans,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskOp {
    Or,
    And,
}

#[derive(Args)]
struct ClusterFlags {
    /// Smallest cluster the density path may select.
    #[arg(long)]
    min_cluster_size: Option<usize>,
    /// Neighbor count for core distances.
    #[arg(long)]
    min_samples: Option<usize>,
    /// Cluster every Nth grid cell per axis.
    #[arg(long)]
    stride: Option<usize>,
    /// Seed for the kmeans path.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset (PPM images + PGM masks).
    Gen {
        /// key=value pipeline config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
        /// Emit (tampered, donor-source) conflict pairs.
        #[arg(long)]
        conflict_pair: bool,
        /// Emit fully pristine images instead of forgeries.
        #[arg(long)]
        pristine: bool,
    },
    /// Train the patch embedder on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Output parameter directory.
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV path (default: <out>/curve.csv).
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "image")]
        loss: LossArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract feature maps (FTZ) from PPM images.
    Extract {
        #[arg(long)]
        params: PathBuf,
        /// Directory of .ppm images (an `images/` subdirectory is used when
        /// present).
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster feature maps into predicted forgery masks (PGM).
    Cluster {
        /// Directory of .ftz feature maps.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "hdbscan")]
        algo: AlgoArg,
        #[command(flatten)]
        cluster: ClusterFlags,
    },
    /// Fuse two feature maps (or OR/AND two masks with --mask-op).
    Fuse {
        /// First input (.ftz, or .pgm with --mask-op).
        a: PathBuf,
        /// Second input.
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip per-source row normalization before concatenation.
        #[arg(long)]
        no_normalize: bool,
        /// Result-level mask combination instead of feature fusion.
        #[arg(long, value_enum)]
        mask_op: Option<MaskOp>,
    },
    /// Score predicted masks against ground truth; writes a CSV report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Nearest-neighbor upsample predictions to the ground-truth size
        /// when resolutions differ.
        #[arg(long)]
        upsample_pred: bool,
    },
    /// Loss-variant x clustering-algorithm ablation grid plus paired loss
    /// curves.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    init_thread_pool();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::Gen {
            config,
            out,
            seed,
            count,
            conflict_pair,
            pristine,
        } => pipeline::gen(config, out, seed, count, conflict_pair, pristine),
        Command::Train {
            config,
            data,
            out,
            curve,
            loss,
            steps,
            seed,
        } => pipeline::train(config, data, out, curve, loss, steps, seed),
        Command::Extract { params, images, out } => pipeline::extract(params, images, out),
        Command::Cluster {
            features,
            out,
            algo,
            cluster,
        } => pipeline::cluster(features, out, algo, cluster),
        Command::Fuse {
            a,
            b,
            out,
            no_normalize,
            mask_op,
        } => pipeline::fuse(a, b, out, no_normalize, mask_op),
        Command::Eval {
            pred,
            gt,
            out,
            upsample_pred,
        } => pipeline::eval(pred, gt, out, upsample_pred),
        Command::Ablate { config, out } => pipeline::ablate(config, out),
    };
    match result {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("FOCAL_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build_global();
            }
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    use focal_core::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::UndefinedLoss | Error::NonFinite(_)) => 3,
        Some(_) => 2,
        None => 2,
    }
}
