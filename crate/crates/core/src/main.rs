//! Command-line front end: synthetic data generation, training,
//! evaluation, per-sample detection, and gradient verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use amcn::config::{config_hash, Polarity, SynthConfig, TrainConfig};
use amcn::error::Result;
use amcn::io::{
    read_bank, read_embeddings, read_stats, write_bank, write_embeddings, write_report,
    write_stats, EmbeddingFile, Metrics, RunReport,
};
use amcn::losses::{grad_check, hinge_activity, Batch};
use amcn::prompt_bank::{default_names, init_bank, DeskEncoder};
use amcn::synth::synth_generate;
use amcn::trainer::{evaluate, train};
use amcn::HyperParams;

#[derive(Parser)]
#[command(name = "amcn", version, about = "Few-shot OOD detection with adaptive multi-prompt contrast")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hypersphere benchmark.
    Synth(SynthArgs),
    /// Train a prompt bank on labeled embeddings.
    Train(TrainArgs),
    /// Evaluate a trained model on ID and OOD embedding files.
    Eval(EvalArgs),
    /// Score one embedding file sample by sample.
    Detect(DetectArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the config's generator seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Labeled training embeddings (AMCNEMB1).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Shots per class.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    polarity: Option<Polarity>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// Labeled ID test embeddings.
    #[arg(long)]
    id: PathBuf,
    /// OOD test embeddings; detection metrics are omitted when absent.
    #[arg(long)]
    ood: Option<PathBuf>,
    #[arg(long)]
    polarity: Option<Polarity>,
    /// Kept for contract clarity; evaluation never mutates statistics.
    #[arg(long, default_value_t = true)]
    frozen: bool,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    stats: PathBuf,
    /// Embeddings to score.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    polarity: Option<Polarity>,
    #[arg(long, default_value_t = true)]
    frozen: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Optional training config supplying hyperparameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn load_config<T: serde::de::DeserializeOwned>(path: &Path) -> std::result::Result<T, ExitCode> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: cannot read config {}: {e}", path.display());
            return Err(ExitCode::from(2));
        }
    };
    serde_json::from_slice(&bytes).map_err(|e| {
        eprintln!("error: invalid config {}: {e}", path.display());
        ExitCode::from(1)
    })
}

fn run_synth(args: &SynthArgs) -> std::result::Result<Result<()>, ExitCode> {
    let mut cfg: SynthConfig = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok((|| {
        let out = synth_generate(&cfg)?;
        write_embeddings(
            &EmbeddingFile::from_sample_set(&out.train, true),
            &args.out.join("train.bin"),
        )?;
        write_embeddings(
            &EmbeddingFile::from_sample_set(&out.test_id, true),
            &args.out.join("test_id.bin"),
        )?;
        write_embeddings(
            &EmbeddingFile::from_sample_set(&out.test_ood, false),
            &args.out.join("test_ood.bin"),
        )?;
        println!(
            "wrote {} train, {} id-test, {} ood-test samples to {}",
            out.train.embeddings.len(),
            out.test_id.embeddings.len(),
            out.test_ood.embeddings.len(),
            args.out.display()
        );
        Ok(())
    })())
}

fn apply_train_overrides(cfg: &mut TrainConfig, seed: Option<u64>, shots: Option<usize>, polarity: Option<Polarity>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(k) = shots {
        cfg.shots = k;
    }
    if let Some(p) = polarity {
        cfg.polarity = p;
    }
}

fn run_train(args: &TrainArgs) -> std::result::Result<Result<()>, ExitCode> {
    let mut cfg: TrainConfig = load_config(&args.config)?;
    apply_train_overrides(&mut cfg, args.seed, args.shots, args.polarity);
    Ok((|| {
        let file = read_embeddings(&args.data)?;
        let num_classes = cfg.class_names.as_ref().map(|n| n.len());
        let data = file.to_sample_set(num_classes)?;
        let out = train(&cfg, &data)?;
        write_bank(&out.bank, &out.enc, &args.out.join("bank.bin"))?;
        write_stats(&out.stats, &args.out.join("stats.bin"))?;
        write_report(&out.report, &args.out.join("report.json"))?;
        let last = out.report.epochs.last();
        println!(
            "trained {} epochs, final total loss {}",
            out.report.epochs.len(),
            last.map_or_else(|| "n/a".into(), |r| format!("{:.6}", r.total))
        );
        Ok(())
    })())
}

fn run_eval(args: &EvalArgs) -> std::result::Result<Result<()>, ExitCode> {
    let mut cfg: TrainConfig = load_config(&args.config)?;
    apply_train_overrides(&mut cfg, None, None, args.polarity);
    Ok((|| {
        let (bank, enc) = read_bank(&args.bank)?;
        let stats = read_stats(&args.stats)?;
        let id = read_embeddings(&args.id)?.to_sample_set(Some(bank.num_classes()))?;
        let ood = match &args.ood {
            Some(path) => read_embeddings(path)?.to_sample_set(None)?,
            None => amcn::SampleSet {
                dim: id.dim,
                embeddings: Vec::new(),
                labels: Vec::new(),
            },
        };
        let eval = evaluate(&bank, &enc, &stats, &cfg.hp, cfg.polarity, &id, &ood)?;
        let report = RunReport {
            config_hash: config_hash(&cfg),
            epochs: Vec::new(),
            metrics: Some(eval.metrics.clone()),
            per_class_stats: stats,
            max_unit_norm_error: 0.0,
        };
        write_report(&report, &args.out.join("eval_report.json"))?;
        print_metrics(&eval.metrics);
        Ok(())
    })())
}

fn print_metrics(m: &Metrics) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{x:.6}"));
    println!("auroc\t{}", fmt(m.auroc));
    println!("fpr95\t{}", fmt(m.fpr95));
    println!("id_accuracy\t{:.6}", m.id_accuracy);
}

fn run_detect(args: &DetectArgs) -> std::result::Result<Result<()>, ExitCode> {
    let cfg: TrainConfig = load_config(&args.config)?;
    let polarity = args.polarity.unwrap_or(cfg.polarity);
    Ok((|| {
        let (bank, enc) = read_bank(&args.bank)?;
        let stats = read_stats(&args.stats)?;
        let input = read_embeddings(&args.input)?.to_sample_set(None)?;
        use std::io::Write;
        let stdout = std::io::stdout();
        let mut w = std::io::BufWriter::new(stdout.lock());
        for (i, x) in input.embeddings.iter().enumerate() {
            let out = amcn::detect(x, &bank, &enc, &stats, &cfg.hp, polarity, args.frozen)?;
            let class = out
                .predicted_class
                .map_or_else(|| "-".into(), |c| c.to_string());
            if let Err(e) = writeln!(w, "{i}\t{:.12}\t{}\t{class}", out.score, out.is_ood) {
                if e.kind() == std::io::ErrorKind::BrokenPipe {
                    return Ok(());
                }
                return Err(e.into());
            }
        }
        w.flush().or_else(|e| {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                Ok(())
            } else {
                Err(e)
            }
        })?;
        Ok(())
    })())
}

fn run_gradcheck(args: &GradcheckArgs) -> std::result::Result<Result<bool>, ExitCode> {
    let hp = match &args.config {
        Some(path) => load_config::<TrainConfig>(path)?.hp,
        None => HyperParams {
            s: 2,
            z: 2,
            p: 1,
            n_ip: 3,
            n_lfop: 3,
            n_laop: 3,
            ..HyperParams::default()
        },
    };
    Ok((|| {
        let d = 6;
        let bank = init_bank(
            &hp,
            args.seed,
            &default_names("class", 2),
            &default_names("ood", hp.s.max(hp.z)),
            d,
            false,
        )?;
        let enc = DeskEncoder::new(d, d, args.seed);
        let synth = synth_generate(&SynthConfig {
            dim: d,
            num_id_classes: 2,
            num_ood_clusters: 1,
            samples_per_class: 2,
            noise_low: 0.1,
            noise_high: 0.3,
            seed: args.seed,
        })?;
        let batch = Batch::new(
            synth.train.embeddings[..3].to_vec(),
            synth.train.labels[..3].to_vec(),
            2,
        )?;
        let hinges = hinge_activity(&batch, &bank, &enc, &hp)?;
        let report = grad_check(&batch, &bank, &enc, &hp, 1e-5)?;
        println!(
            "max_rel_error\t{:e}\nmean_rel_error\t{:e}\nmax_abs_diff\t{:e}\nnum_params\t{}",
            report.max_rel_error, report.mean_rel_error, report.max_abs_diff, report.num_params
        );
        println!(
            "hinges_active\tseparation={} intra={} inter={}",
            hinges.separation, hinges.intra, hinges.inter
        );
        Ok(report.max_rel_error <= args.tol)
    })())
}

fn finish(outcome: std::result::Result<Result<()>, ExitCode>) -> ExitCode {
    match outcome {
        Err(code) => code,
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(a) => finish(run_synth(a)),
        Command::Train(a) => finish(run_train(a)),
        Command::Eval(a) => finish(run_eval(a)),
        Command::Detect(a) => finish(run_detect(a)),
        Command::Gradcheck(a) => match run_gradcheck(a) {
            Err(code) => code,
            Ok(Ok(true)) => ExitCode::SUCCESS,
            Ok(Ok(false)) => {
                eprintln!("error: gradient check exceeded tolerance");
                ExitCode::from(1)
            }
            Ok(Err(e)) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
