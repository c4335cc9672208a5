//! Command-line entry point: corpus generation, training, evaluation, the
//! bottleneck-size sweep, checkpoint averaging, and diagnostics.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use avbc::data::{load_corpus, save_corpus, Corpus, NoiseKind, SynthConfig};
use avbc::harness::{
    average_checkpoint_files, bench_attention, default_conditions, desk_gradient_check, load_model,
    run_eval, run_sweep, run_train, write_eval_report, write_sweep_table, Condition, EvalOptions,
    NoiseCondition, RunConfig,
};
use avbc::nn::ConformerConfig;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "avbc",
    version,
    about = "Noise-robust audio-visual speech recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a paired audio-visual corpus.
    GenCorpus {
        /// Training utterances.
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics, the resolved config, and checkpoints.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the test split under clean and noisy conditions.
    Eval {
        /// Checkpoint files, or a run's checkpoint directory; several are
        /// averaged.
        #[arg(long = "checkpoint", required = true, num_args = 1..)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// white, pink, babble-like, speech-overlap, or overlap (another
        /// test utterance as distractor).
        #[arg(long, default_value = "babble-like")]
        noise: String,
        #[arg(long, default_value_t = 4)]
        beam: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write reconstructed spectrograms here.
        #[arg(long)]
        dump_recon: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate one model per bottleneck size.
    SweepK {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8,16")]
        ks: Vec<usize>,
        #[arg(long, default_value = "babble-like")]
        noise: String,
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        snr: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average checkpoints parameter-wise.
    AvgCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Central-difference check of the desk model's full training loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 2)]
        per_tensor: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        no_video: bool,
    },
    /// Count attention score entries of one fusion layer.
    BenchAttn {
        #[arg(long, default_value_t = 100)]
        na: usize,
        #[arg(long, default_value_t = 100)]
        nv: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
    },
}

fn run_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    Ok(cfg)
}

fn corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir, SynthConfig::default().sample_rate)
        .with_context(|| format!("loading corpus {}", dir.display()))
}

fn noise_condition(name: &str) -> Result<NoiseCondition> {
    Ok(match name {
        "clean" => NoiseCondition::Clean,
        "overlap" => NoiseCondition::Overlap,
        other => NoiseCondition::Additive(other.parse::<NoiseKind>()?),
    })
}

/// Expands directories into their `*.ckpt` files, keeping the last ten.
fn checkpoint_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            files.retain(|f| f.extension().is_some_and(|e| e == "ckpt"));
            files.sort();
            let skip = files.len().saturating_sub(10);
            out.extend(files.into_iter().skip(skip));
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        bail!("no checkpoints found");
    }
    Ok(out)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus {
            n,
            n_test,
            seed,
            out,
        } => {
            let c = Corpus::generate(n, n_test, seed, &SynthConfig::default())?;
            save_corpus(&out, &c)?;
            println!(
                "wrote {} train and {} test utterances to {}",
                c.train.len(),
                c.test.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            corpus: dir,
            seed,
            out,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.validate()?;
            let outcome = run_train(&cfg, &corpus(&dir)?)?;
            for m in &outcome.history {
                println!(
                    "epoch {:3}  phase {}  l_total {:.4}  l_avsr {:.4}  l_enhance {:.4}  train_wer {:.3}",
                    m.epoch, m.phase, m.l_total, m.l_avsr, m.l_enhance, m.train_wer
                );
            }
            println!("run written to {}", cfg.out_dir.display());
        }
        Command::Eval {
            checkpoints,
            corpus: dir,
            noise,
            beam,
            seed,
            dump_recon,
            out,
        } => {
            let conditions = default_conditions(noise_condition(&noise)?);
            let files = checkpoint_files(&checkpoints)?;
            let ckpt = if files.len() == 1 {
                files[0].clone()
            } else {
                fs::create_dir_all(&out)?;
                let avg = out.join("averaged.ckpt");
                average_checkpoint_files(&files)?.save(&avg)?;
                avg
            };
            let (model, store) = load_model(&ckpt)?;
            let opts = EvalOptions {
                beam_width: beam,
                seed,
                dump_recon,
            };
            let report = run_eval(&model, &store, &corpus(&dir)?.test, &conditions, &opts)?;
            write_eval_report(&report, &out)?;
            print!("{}", fs::read_to_string(out.join("table.tsv"))?);
            println!("average WER {:.4}", report.average_wer);
        }
        Command::SweepK {
            config,
            corpus: dir,
            ks,
            noise,
            snr,
            out,
        } => {
            let mut cfg = run_config(config.as_deref())?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let condition = Condition {
                noise: noise_condition(&noise)?,
                snr_db: Some(snr),
                video: cfg.use_video,
            };
            let rows = run_sweep(&cfg, &corpus(&dir)?, &ks, condition)?;
            let table = cfg.out_dir.join("sweep.tsv");
            write_sweep_table(&rows, &table)?;
            print!("{}", fs::read_to_string(&table)?);
        }
        Command::AvgCkpt { out, inputs } => {
            let files = checkpoint_files(&inputs)?;
            average_checkpoint_files(&files)?.save(&out)?;
            println!(
                "averaged {} checkpoints into {}",
                files.len(),
                out.display()
            );
        }
        Command::GradCheck {
            seed,
            per_tensor,
            tol,
            no_video,
        } => {
            let report = desk_gradient_check(seed, !no_video, per_tensor, tol)?;
            println!(
                "checked {} coordinates, max relative error {:.3e}, {} failures",
                report.checked,
                report.max_rel_error,
                report.failures.len()
            );
            if !report.passed() {
                bail!("gradient check failed: {:?}", report.failures);
            }
        }
        Command::BenchAttn { na, nv, k, d } => {
            let cfg = ConformerConfig {
                d_model: d,
                layers: 1,
                ..ConformerConfig::desk()
            };
            let b = bench_attention(&cfg, na, nv, k, 0)?;
            println!("mode\tmeasured\tformula\tseconds");
            println!(
                "bottleneck(K={k})\t{}\t{}\t{:.4}",
                b.bottleneck_measured, b.bottleneck_formula, b.bottleneck_seconds
            );
            println!(
                "direct\t{}\t{}\t{:.4}",
                b.direct_measured, b.direct_formula, b.direct_seconds
            );
            if b.bottleneck_measured != b.bottleneck_formula
                || b.direct_measured != b.direct_formula
            {
                bail!("instrumented counts disagree with the cost formula");
            }
        }
    }
    Ok(())
}
