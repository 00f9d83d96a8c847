use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use m2vae::checkpoint::Checkpoint;
use m2vae::checks::{run_checks, Group};
use m2vae::compiler::{expand, render, Likelihood, Modality, ModalitySet, RenderFormat, Variant};
use m2vae::data::{generate, Dataset, SyntheticSpec};
use m2vae::eval::{cross_modal_report, evaluate_cross_modal, ErrorMetric};
use m2vae::rng::SEED_ENV;
use m2vae::train::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "m2vae", version, about = "Multi-modal VAE objective compiler, trainer, and oracle checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand an objective for a modality set and print it.
    Expand {
        /// Comma-separated `name:dim:likelihood`, likelihood `gauss` or `bern`.
        #[arg(long, required = true, value_delimiter = ',', value_parser = parse_modalities)]
        modalities: Vec<Modality>,
        #[arg(long, default_value = "m2vae", value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, default_value = "text", value_parser = parse_format)]
        format: RenderFormat,
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
    },
    /// Train from a JSON config; writes the checkpoint and metrics CSV it names.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Cross-modal reconstruction report of a checkpoint on a dataset, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated source modalities; every pair is reported when omitted.
        #[arg(long, value_delimiter = ',', requires = "target")]
        source: Option<Vec<String>>,
        #[arg(long, requires = "source")]
        target: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the oracle and invariant checks; exits 1 if any fails.
    Check {
        /// compiler, distributions, gradients, bounds, information, or all.
        #[arg(long, default_value = "all", value_parser = parse_suite)]
        suite: Suite,
        #[arg(long, env = SEED_ENV, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic dataset file from a JSON spec.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Overrides the seed in the dataset description.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_modalities(s: &str) -> Result<Modality, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [name, dim, lik] = parts[..] else {
        return Err(format!("expected name:dim:likelihood, got {s:?}"));
    };
    let dim: usize = dim.parse().map_err(|_| format!("bad dimension {dim:?}"))?;
    let lik = Likelihood::from_tag(lik).ok_or_else(|| format!("unknown likelihood {lik:?} (gauss or bern)"))?;
    Ok(Modality::new(name, dim, lik))
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::from_tag(s).ok_or_else(|| {
        let tags: Vec<_> = Variant::ALL.iter().map(|v| v.tag()).collect();
        format!("unknown variant {s:?}; one of {}", tags.join(", "))
    })
}

fn parse_format(s: &str) -> Result<RenderFormat, String> {
    RenderFormat::from_tag(s).ok_or_else(|| format!("unknown format {s:?}; one of text, json, latex"))
}

#[derive(Clone)]
struct Suite(Vec<Group>);

fn parse_suite(s: &str) -> Result<Suite, String> {
    Group::parse_suite(s).map(Suite).ok_or_else(|| format!("unknown suite {s:?}"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Expand { modalities, variant, format, latent_dim } => {
            let ms = ModalitySet::new(modalities, latent_dim)?;
            let expr = expand(&ms, variant)?;
            println!("{}", render(&expr, format).trim_end());
        }
        Command::Train { config, seed, checkpoint, metrics } => {
            let mut cfg = TrainConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.checkpoint = checkpoint.or(cfg.checkpoint);
            cfg.metrics = metrics.or(cfg.metrics);
            let data = cfg.dataset()?;
            let out = train(&cfg, &data)?;
            let last = out.rows.last().expect("at least one step");
            eprintln!(
                "trained {} steps on {} rows ({} held out); final objective {:.6}",
                out.rows.len(),
                out.train_rows,
                out.eval_rows,
                last.objective
            );
        }
        Command::Eval { checkpoint, data, source, target, output } => {
            let ck = Checkpoint::<f64>::load(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let data = Dataset::load(&data).with_context(|| format!("reading {}", data.display()))?;
            let bundle = &ck.bundle;
            let report = match (source, target) {
                (Some(source), Some(target)) => {
                    let ms = bundle.expression().modality_set();
                    let s = ms.subset_of(&source)?;
                    let t = ms.index_of(&target).with_context(|| format!("unknown target modality {target:?}"))?;
                    let value = evaluate_cross_modal(bundle, data.data(), s, t)?;
                    serde_json::json!({
                        "source": source,
                        "target": target,
                        "metric": ErrorMetric::for_likelihood(ms.get(t).likelihood),
                        "value": value,
                    })
                }
                _ => serde_json::json!({
                    "rows": data.rows(),
                    "variant": bundle.expression().variant().tag(),
                    "pairs": cross_modal_report(bundle, data.data())?,
                }),
            };
            let text = serde_json::to_string_pretty(&report)?;
            match output {
                Some(p) => fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Check { suite, seed, json } => {
            let report = run_checks(&suite.0, seed);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Generate { spec, output, seed } => {
            let text = fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let mut spec: SyntheticSpec = serde_json::from_str(&text).context("parsing the dataset spec")?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data = generate(&spec)?;
            data.save(&output).with_context(|| format!("writing {}", output.display()))?;
            eprintln!("wrote {} rows of {} modalities to {}", data.rows(), data.modalities().len(), output.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
