use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use collection_forge::coder::Variant;
use collection_forge::metric::MetricVariant;
use collection_forge::pipeline::{configure_threads, format_eval_table, Pipeline, PipelineConfig};
use collection_forge::{Error, Result};

#[derive(Parser)]
#[command(name = "collection-forge", version, about = "Image collection descriptors, metric learning and ranking")]
struct Cli {
    /// Pipeline config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random stage; later stages reuse the dataset's seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Descriptor variant (huber-l1, huber-g, avg-l1, avg-g, raw-avg); for
    /// metric-train a metric name (eucl, diag, full) is accepted as well.
    #[arg(long, global = true, value_name = "NAME")]
    variant: Option<String>,
    /// Metric variant (eucl, diag, full).
    #[arg(long, global = true, value_name = "NAME")]
    metric: Option<MetricVariant>,
    /// Cutoff for rank and eval.
    #[arg(long, global = true, value_name = "INT")]
    k: Option<usize>,
    /// Work directory holding every artifact.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Extract image features from rendered PPM images.
    Extract,
    /// Learn the block-diagonal dictionary.
    DictLearn,
    /// Encode every collection into a descriptor.
    Encode,
    /// Learn the Mahalanobis metric from the training users' tuples.
    MetricTrain,
    /// Rank the candidate boards of the evaluation users.
    Rank,
    /// Print MAP@K for K = 1..10, overall and per category.
    Eval {
        /// Report the MAP@K of uniformly random rankings instead.
        #[arg(long)]
        random_baseline: bool,
    },
}

fn descriptor_variant(name: Option<&str>) -> Result<Option<Variant>> {
    name.map(|n| n.parse::<Variant>().map_err(|_| Error::InvalidConfig(format!("unknown descriptor variant {n:?}"))))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let p = Pipeline::new(cfg, cli.seed, cli.out.clone())?;
    let variant = cli.variant.as_deref();
    match cli.command {
        Command::Synth => {
            let m = p.synth()?;
            println!("synth: {} collections, {} images, {} tuples -> {}", m.collections, m.images, m.tuples, p.work_dir().display());
        }
        Command::Extract => {
            let m = p.extract()?;
            println!("extract: {} images, {} dims", m.images, m.schema.map_or(0, |s| s.total_dim()));
        }
        Command::DictLearn => {
            let m = p.dict_learn()?;
            println!("dict-learn: {} units x {} atoms", m.units.len(), m.atoms_per_unit);
        }
        Command::Encode => {
            let m = p.encode(descriptor_variant(variant)?)?;
            let lambda = match m.lambda {
                Some(l) => format!("{l:.4e}"),
                None if !m.tuning.is_empty() => "tuned per collection".to_string(),
                None => "-".to_string(),
            };
            println!("encode: {} {} descriptors, lambda {lambda}, mean density {:.4}", m.count, m.variant, m.mean_density);
        }
        Command::MetricTrain => {
            let (dv, mv) = match variant.map(|v| v.parse::<MetricVariant>()) {
                Some(Ok(mv)) => (None, Some(mv)),
                _ => (descriptor_variant(variant)?, None),
            };
            let m = p.metric_train(dv, cli.metric.or(mv))?;
            println!(
                "metric-train: {} metric on {} descriptors, {} training users, {} category models",
                m.metric_variant,
                m.variant,
                m.train_users.len(),
                m.categories.len()
            );
        }
        Command::Rank => {
            let (path, lists) = p.rank(descriptor_variant(variant)?, cli.metric, cli.k)?;
            println!("rank: {} lists -> {}", lists.len(), path.display());
        }
        Command::Eval { random_baseline: true } => {
            let b = p.random_baseline()?;
            println!("random baseline: {} candidates, {} relevant, {} trials", b.candidates, b.relevant, b.trials);
            for (i, v) in b.map_at_k.iter().enumerate() {
                println!("{:<4}{v:>10.4}", i + 1);
            }
            let k = cli.k.unwrap_or(p.config().eval.k).clamp(1, b.map_at_k.len());
            println!("random MAP@{k} = {:.4}", b.map_at_k[k - 1]);
        }
        Command::Eval { random_baseline: false } => {
            let a = p.eval(descriptor_variant(variant)?, cli.metric, cli.k)?;
            print!("{}", format_eval_table(&a));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
