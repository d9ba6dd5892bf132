use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use case_core::compose::{compose_dataset, read_pairs, write_pairs, ComposedPair};
use case_core::dataset::{head_count, load_dataset, write_dataset, DatasetFormat};
use case_core::embstore::{read_matrix, read_store, write_store};
use case_core::error::exit;
use case_core::inspect::inspect;
use case_core::isotropy::{compare_subtraction, histogram, isotropy_report, DEFAULT_DIRECTIONS};
use case_core::metrics::evaluate;
use case_core::pipeline::{run_pipeline, write_history_csv, write_json, write_scores_csv, PipelineConfig};
use case_core::projection::{
    read_checkpoint, train, write_checkpoint, Activation, HeadKind, HeadSpec, ProjectionModel,
    TrainConfig,
};
use case_core::synth::{synth, SynthConfig};
use case_core::{Base, CompositionVariant, Error, Result};

#[derive(Parser)]
#[command(name = "case", version, about = "Condition-aware sentence embeddings for C-STS")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, embedding store and ground-truth head.
    Synth(SynthArgs),
    /// Build condition-aware pairs from a dataset and an embedding store.
    Compose(ComposeArgs),
    /// Train a projection head on composed pairs.
    Train(TrainArgs),
    /// Spearman correlation of (projected) cosine scores with ratings.
    Eval(EvalArgs),
    /// Embedding-to-mean cosine statistics and the sampled isotropy ratio.
    Isotropy(IsotropyArgs),
    /// Show one record's cosine under every available variant.
    Inspect(InspectArgs),
    /// Run the whole pipeline from a TOML or JSON config.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for dataset.jsonl, store.cemb and ground_truth.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2500)]
    n_records: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    latent: usize,
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 250)]
    n_conditions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rating quantum on the 1-5 scale; 0 keeps ratings continuous.
    #[arg(long, default_value_t = 0.5)]
    rating_step: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaseArg {
    Cond,
    Sent,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum)]
    variant: BaseArg,
    /// Subtract the unconditional condition embedding from both sides.
    #[arg(long)]
    subtract_c: bool,
    /// Output directory (e1.cemb, e2.cemb, pairs.json).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Nonlinear,
    Nonlinear2,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    LeakyRelu,
    Relu,
    Gelu,
    Silu,
}

#[derive(Args)]
struct TrainArgs {
    /// Composed training pairs.
    #[arg(long)]
    pairs: PathBuf,
    /// Composed validation pairs; carved from --pairs when omitted.
    #[arg(long)]
    val_pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, value_enum, default_value = "nonlinear")]
    kind: KindArg,
    #[arg(long)]
    k: usize,
    #[arg(long, value_enum, default_value = "leaky-relu")]
    activation: ActivationArg,
    #[arg(long, default_value_t = case_core::projection::DEFAULT_LEAKY_SLOPE)]
    leaky_slope: f64,
    #[arg(long, default_value_t = case_core::projection::DEFAULT_HIDDEN_DIM)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.15)]
    dropout: f64,
    #[arg(long, default_value_t = 50)]
    max_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    patience: usize,
    /// Checkpoint header path; weights are written beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history_csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Checkpoint to project with; raw cosine when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    scores_csv: Option<PathBuf>,
}

#[derive(Args)]
struct IsotropyArgs {
    /// A pairs directory (both sides are pooled) or a CEMB file.
    #[arg(long)]
    store: PathBuf,
    /// Second input to compare against, e.g. the same pairs without subtraction.
    #[arg(long)]
    store_b: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DIRECTIONS)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: PathBuf,
    /// Histogram of embedding-to-mean cosines over [-1, 1].
    #[arg(long)]
    hist_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 40)]
    bins: usize,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    id: String,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides [output].dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides [train].seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [train].max_epochs.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Overrides [compose]: cond, cond-c, sent or sent-c.
    #[arg(long)]
    variant: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Compose(a) => cmd_compose(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Isotropy(a) => cmd_isotropy(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::from(exit::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let config = SynthConfig {
        n_records: a.n_records,
        d: a.d,
        latent: a.latent,
        noise_sigma: a.noise_sigma,
        n_conditions: a.n_conditions,
        seed: a.seed,
        rating_step: a.rating_step,
        ..SynthConfig::default()
    };
    let out = synth(&config)?;
    std::fs::create_dir_all(&a.out)?;
    write_dataset(&out.records, &a.out.join("dataset.jsonl"))?;
    write_store(&out.store, &a.out.join("store.cemb"))?;
    write_checkpoint(&a.out.join("ground_truth.json"), &out.ground_truth, a.seed, 0, None)?;
    println!(
        "wrote {} records, {} store rows (dim {}) to {}",
        out.records.len(),
        out.store.len(),
        out.store.dim(),
        a.out.display()
    );
    Ok(())
}

fn cmd_compose(a: ComposeArgs) -> Result<()> {
    let base = match a.variant {
        BaseArg::Cond => Base::Cond,
        BaseArg::Sent => Base::Sent,
    };
    let variant = CompositionVariant::new(base, a.subtract_c);
    let records = load_dataset(&a.dataset, DatasetFormat::Jsonl)?;
    let store = read_store(&a.store)?;
    let pairs = compose_dataset(&records, &store, variant)?;
    write_pairs(&a.out, &pairs, Some(variant))?;
    println!("composed {} pairs ({variant}, dim {})", pairs.len(), store.dim());
    Ok(())
}

/// Seeded shuffle, then the first `ceil(fraction * n)` pairs become validation.
fn carve_validation(
    pairs: Vec<ComposedPair>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<ComposedPair>, Vec<ComposedPair>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {fraction}")));
    }
    let mut pool = pairs;
    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train = pool.split_off(head_count(pool.len(), fraction));
    Ok((train, pool))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (pairs, _) = read_pairs(&a.pairs)?;
    let (train_pairs, val_pairs) = match &a.val_pairs {
        Some(p) => (pairs, read_pairs(p)?.0),
        None => carve_validation(pairs, a.val_fraction, a.split_seed)?,
    };
    let head = HeadSpec {
        kind: match a.kind {
            KindArg::Linear => HeadKind::Linear,
            KindArg::Nonlinear => HeadKind::Nonlinear,
            KindArg::Nonlinear2 => HeadKind::Nonlinear2,
        },
        k: a.k,
        activation: match a.activation {
            ActivationArg::LeakyRelu => Activation::LeakyRelu,
            ActivationArg::Relu => Activation::Relu,
            ActivationArg::Gelu => Activation::Gelu,
            ActivationArg::Silu => Activation::Silu,
        },
        leaky_slope: a.leaky_slope,
        hidden_dim: a.hidden_dim,
    };
    let config = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        dropout_rate: a.dropout,
        max_epochs: a.max_epochs,
        seed: a.seed,
        early_stop_patience: a.patience,
        ..TrainConfig::default()
    };
    let started = Instant::now();
    let outcome = train(&train_pairs, &val_pairs, &config, head)?;
    write_checkpoint(&a.out, &outcome.model, a.seed, outcome.best_epoch, outcome.best_val_spearman)?;
    if let Some(path) = &a.history_csv {
        write_history_csv(path, &outcome.history)?;
    }
    let best = outcome
        .best_val_spearman
        .map_or_else(|| "n/a".to_string(), |s| format!("{:.2}", s * 100.0));
    println!(
        "trained {} epochs on {} pairs in {:.1?}; best epoch {} (val Spearman x100 {best})",
        outcome.history.len(),
        train_pairs.len(),
        started.elapsed(),
        outcome.best_epoch,
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (pairs, variant) = read_pairs(&a.pairs)?;
    let model = a.model.as_deref().map(read_checkpoint).transpose()?;
    let mut ev = evaluate(&pairs, model.as_ref().map(|(m, _)| m))?;
    ev.report.variant = variant;
    if let Some(path) = &a.model {
        ev.report.model_id = model_id(path);
    }
    write_json(&a.report, &ev.report)?;
    if let Some(path) = &a.scores_csv {
        let ids: Vec<&str> = pairs.iter().map(|p| p.record_id.as_str()).collect();
        write_scores_csv(path, &ids, &ev.scores, &ev.ratings)?;
    }
    let variant = variant.map_or_else(|| "-".to_string(), |v| v.to_string());
    println!("{:<10} {:<24} {:>6} {:>8}", "variant", "model", "n", "spearman");
    println!(
        "{:<10} {:<24} {:>6} {:>8.2}",
        variant,
        ev.report.model_id,
        ev.report.n,
        ev.report.spearman_x100()
    );
    Ok(())
}

/// The checkpoint's file name, so reports do not depend on where it lives.
fn model_id(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Rows of a CEMB file, or both sides of a pairs directory stacked.
fn load_rows(path: &Path) -> Result<Array2<f64>> {
    let (n, d, data) = if path.is_dir() {
        let (pairs, _) = read_pairs(path)?;
        let d = pairs.first().map_or(0, |p| p.dim());
        let mut data = Vec::with_capacity(2 * pairs.len() * d);
        for p in &pairs {
            data.extend(p.e1.iter().map(|&x| x as f32));
        }
        for p in &pairs {
            data.extend(p.e2.iter().map(|&x| x as f32));
        }
        (2 * pairs.len(), d, data)
    } else {
        read_matrix(path)?
    };
    Array2::from_shape_vec((n, d), data.into_iter().map(f64::from).collect())
        .map_err(|e| Error::Config(e.to_string()))
}

fn cmd_isotropy(a: IsotropyArgs) -> Result<()> {
    let e = load_rows(&a.store)?;
    let (report, per_row) = isotropy_report(e.view(), a.k, a.seed)?;
    let mut columns = vec![per_row];
    match &a.store_b {
        None => {
            write_json(&a.report, &report)?;
            println!(
                "cos-to-mean {:.4} ± {:.4}   I_iso {:.4}   (n {}, dim {}, k {})",
                report.mean_cos_to_mean, report.std_cos_to_mean, report.i_iso, report.n, report.dim, report.k_directions
            );
        }
        Some(b) => {
            let eb = load_rows(b)?;
            let cmp = compare_subtraction(e.view(), eb.view(), a.k, a.seed)?;
            columns.push(isotropy_report(eb.view(), a.k, a.seed)?.1);
            write_json(&a.report, &cmp)?;
            for (name, r) in [("a", &cmp.report_with), ("b", &cmp.report_without)] {
                println!(
                    "{name}: cos-to-mean {:.4} ± {:.4}   I_iso {:.4}",
                    r.mean_cos_to_mean, r.std_cos_to_mean, r.i_iso
                );
            }
            println!("delta I_iso (a - b) {:+.4}", cmp.delta_i_iso);
        }
    }
    if let Some(path) = &a.hist_csv {
        write_histogram(path, &columns, a.bins)?;
    }
    Ok(())
}

fn write_histogram(path: &Path, columns: &[Vec<f64>], bins: usize) -> Result<()> {
    let counts: Vec<Vec<usize>> = columns.iter().map(|c| histogram(c, bins, -1.0, 1.0)).collect();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(e.to_string()))?;
    let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
    header.extend(["count_a", "count_b"].iter().take(columns.len()).map(|s| s.to_string()));
    w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
    let width = 2.0 / bins as f64;
    for b in 0..bins {
        let mut row = vec![
            (-1.0 + b as f64 * width).to_string(),
            (-1.0 + (b + 1) as f64 * width).to_string(),
        ];
        row.extend(counts.iter().map(|c| c[b].to_string()));
        w.write_record(&row).map_err(|e| Error::Config(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let records = load_dataset(&a.dataset, DatasetFormat::Jsonl)?;
    let store = read_store(&a.store)?;
    let model: Option<ProjectionModel> =
        a.model.as_deref().map(read_checkpoint).transpose()?.map(|(m, _)| m);
    print!("{}", inspect(&a.id, &records, &store, model.as_ref())?);
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut config = PipelineConfig::load(&a.config)?;
    if let Some(out) = a.out {
        config.output.dir = out;
    }
    if let Some(seed) = a.seed {
        config.train.seed = seed;
    }
    if let Some(n) = a.max_epochs {
        config.train.max_epochs = n;
    }
    if let Some(v) = &a.variant {
        config.compose = v.parse()?;
    }
    let started = Instant::now();
    let report = run_pipeline(&config)?;
    println!(
        "{} | {:?} k={} | train {} / val {} / test {} | best epoch {} of {}",
        report.variant,
        report.head.kind,
        report.head.k,
        report.n_train,
        report.n_validation,
        report.n_test,
        report.best_epoch,
        report.epochs_run
    );
    println!(
        "test Spearman x100: {:.2} projected, {:.2} unsupervised ({:.1?})",
        report.test_spearman * 100.0,
        report.test_spearman_unsupervised * 100.0,
        started.elapsed()
    );
    println!("outputs in {}", config.output.dir.display());
    Ok(())
}
