use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{RunConfig, StrategyConfig};

#[derive(Parser)]
#[command(name = "backsig", version)]
#[command(about = "Backdoor-based verification that a provider fine-tuned on your data")]
#[command(after_help = "Exit codes: 0 verified / success, 1 not verified, 2 error.")]
struct Cli {
    /// TOML run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset in JSONL (prompt/completion or chat messages)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Directory for training sets, reports and estimates
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log filter, e.g. info or backsig_core=debug (RUST_LOG wins)
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Write the machine-readable result to this path
    #[arg(long, global = true)]
    json_out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trigger/signature pair and write the backdoored training set
    Inject {
        #[arg(long)]
        num_backdoors: Option<usize>,
        /// Minimum trigger length in tokens
        #[arg(long)]
        min_trigger_len: Option<usize>,
        /// Minimum signature surprisal in nats
        #[arg(long)]
        min_signature_entropy: Option<f64>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Generation prompt to use instead of asking the prompt model
        #[arg(long)]
        prompt: Option<String>,
    },

    /// Probe a model with the backdoor prompts and run the significance test
    Verify {
        /// Injection report (default: <output-dir>/report.json)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Training set the simulated provider trains on (default: <output-dir>/train.jsonl)
        #[arg(long)]
        train: Option<PathBuf>,
        /// Fine-tuned model to probe (remote provider)
        #[arg(long)]
        model: Option<String>,
        /// Simulated strategy: honest[:RATE], base, modal[:GUESS], subset:ROWS
        #[arg(long)]
        strategy: Option<StrategyConfig>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        significance: Option<f64>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long, allow_hyphen_values = true)]
        p_upper_log10: Option<f64>,
        /// Estimate written by estimate-pupper
        #[arg(long)]
        pupper_file: Option<PathBuf>,
    },

    /// Estimate p_upper, the probability of the most likely signature
    EstimatePupper {
        /// Take prompt and signature length from this report
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        signature_len: Option<usize>,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        /// Also run exhaustive search (small vocabularies only)
        #[arg(long)]
        exact: bool,
    },

    /// Adversary analyses
    Attack {
        #[command(subcommand)]
        command: AttackCommand,
    },

    /// Sweep simulated providers through inject, fine-tune and verify
    Simulate {
        #[arg(long)]
        trials: Option<usize>,
        /// honest[:RATE], base, modal, subset:FRACTION; repeatable
        #[arg(long = "strategy")]
        strategies: Vec<String>,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long)]
        num_backdoors: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        /// Fixed p_upper instead of a per-trial estimate
        #[arg(long, allow_hyphen_values = true)]
        p_upper_log10: Option<f64>,
    },

    /// Upload a training set and start a fine-tuning job
    Finetune {
        /// Default: <output-dir>/train.jsonl
        #[arg(long)]
        train: Option<PathBuf>,
        /// Poll until the job finishes and print the model id
        #[arg(long)]
        wait: bool,
        #[arg(long, default_value_t = 30)]
        poll_secs: u64,
    },

    /// Write a seeded synthetic dataset
    Synth {
        #[arg(long, default_value_t = 1000)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
    },

    /// Print the effective configuration as TOML
    ShowConfig,
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Subset size a provider needs to pass verification with given odds
    Subset {
        #[arg(long, default_value_t = 10_000)]
        total: u64,
        #[arg(long, default_value_t = 50)]
        backdoors: u64,
        /// Verified backdoors rN; the subset must hold more than this
        #[arg(long)]
        threshold: Option<u64>,
        /// Sets threshold = round(ratio * backdoors) when --threshold is absent
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// Target pass probabilities; repeatable
        #[arg(long = "target", default_values_t = [0.01, 0.5])]
        targets: Vec<f64>,
        /// Also report the pass probability at this subset size
        #[arg(long)]
        subset: Option<u64>,
    },

    /// How much of the dataset a k-gram frequency search must read
    Kgram {
        /// Default: <output-dir>/train.jsonl
        #[arg(long)]
        train: Option<PathBuf>,
        /// Default: <output-dir>/report.json
        #[arg(long)]
        report: Option<PathBuf>,
        /// Run on a built-in corpus instead of files
        #[arg(long, value_enum)]
        synthetic: Option<SyntheticCorpus>,
        #[arg(long = "k", default_values_t = [3, 5, 10])]
        ks: Vec<usize>,
        #[arg(long, value_enum, default_value_t = WindowArg::CompletionHead)]
        window: WindowArg,
        #[arg(long, default_value_t = 3)]
        partial_match_words: usize,
    },

    /// Write a prompt asking an external LLM to look for backdoors
    DetectionPrompt {
        /// Default: <output-dir>/train.jsonl
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SyntheticCorpus {
    /// 1000 unique rows plus 5 backdoors
    Unique,
    /// Short stock phrases everywhere, a few long templates
    Stock,
}

#[derive(Clone, Copy, ValueEnum)]
enum WindowArg {
    PromptTail,
    CompletionHead,
}

/// Outcome of a successful run.
enum Verdict {
    Success,
    NotVerified,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(o) = &cli.output_dir {
        config.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(l) = &cli.log_level {
        config.log_level = l.clone();
    }
    Ok(config)
}

fn init_logging(level: &str) {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .or_else(|_| tracing_subscriber::EnvFilter::try_new(level))
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .try_init();
}

fn run(cli: Cli) -> Result<Verdict> {
    let mut config = load_config(&cli)?;
    init_logging(&config.log_level);
    let json_out = cli.json_out.as_deref();
    match cli.command {
        Command::Inject {
            num_backdoors,
            min_trigger_len,
            min_signature_entropy,
            temperature,
            prompt,
        } => {
            let g = &mut config.generation;
            g.num_backdoors = num_backdoors.or(g.num_backdoors);
            g.min_trigger_len = min_trigger_len.unwrap_or(g.min_trigger_len);
            g.min_signature_entropy = min_signature_entropy.unwrap_or(g.min_signature_entropy);
            g.temperature = temperature.unwrap_or(g.temperature);
            g.prompt = prompt.or(g.prompt.take());
            commands::inject(&config, json_out)
        }
        Command::Verify {
            report,
            train,
            model,
            strategy,
            ratio,
            significance,
            probes,
            p_upper_log10,
            pupper_file,
        } => {
            let v = &mut config.verification;
            v.ratio_to_verify = ratio.unwrap_or(v.ratio_to_verify);
            v.significance = significance.unwrap_or(v.significance);
            v.num_probe_calls = probes.unwrap_or(v.num_probe_calls);
            v.p_upper_log10 = p_upper_log10.or(v.p_upper_log10);
            v.pupper_file = pupper_file.or(v.pupper_file.take());
            if let Some(s) = strategy {
                config.provider = config::ProviderConfig::Simulated { strategy: s };
            }
            commands::verify(&config, report, train, model, json_out)
        }
        Command::EstimatePupper {
            report,
            signature_len,
            prompt,
            samples,
            exact,
        } => {
            if let Some(n) = samples {
                config.verification.pupper_samples = n;
            }
            commands::estimate_pupper(&config, report, signature_len, prompt, exact, json_out)
        }
        Command::Attack { command } => match command {
            AttackCommand::Subset {
                total,
                backdoors,
                threshold,
                ratio,
                targets,
                subset,
            } => {
                let threshold = threshold.unwrap_or((ratio * backdoors as f64).round() as u64);
                commands::attack_subset(total, backdoors, threshold, &targets, subset, json_out)
            }
            AttackCommand::Kgram {
                train,
                report,
                synthetic,
                ks,
                window,
                partial_match_words,
            } => {
                let window = match window {
                    WindowArg::PromptTail => backsig_core::attacks::Window::PromptTail,
                    WindowArg::CompletionHead => backsig_core::attacks::Window::CompletionHead,
                };
                let synthetic = synthetic.map(|s| match s {
                    SyntheticCorpus::Unique => {
                        backsig_core::synthetic::KGramProfile::unique(1000, 5, config.seed)
                    }
                    SyntheticCorpus::Stock => {
                        backsig_core::synthetic::KGramProfile::stock_phrases(config.seed)
                    }
                });
                commands::attack_kgram(
                    &config,
                    train,
                    report,
                    synthetic,
                    &ks,
                    window,
                    partial_match_words,
                    json_out,
                )
            }
            AttackCommand::DetectionPrompt { train, out } => {
                commands::detection_prompt(&config, train, &out)
            }
        },
        Command::Simulate {
            trials,
            strategies,
            ratio,
            num_backdoors,
            probes,
            p_upper_log10,
        } => {
            let s = &mut config.simulation;
            s.trials = trials.unwrap_or(s.trials);
            s.ratio_to_verify = ratio.unwrap_or(s.ratio_to_verify);
            if !strategies.is_empty() {
                s.strategies = strategies
                    .iter()
                    .map(|x| commands::parse_sweep_strategy(x))
                    .collect::<Result<_>>()?;
            }
            config.generation.num_backdoors = num_backdoors.or(config.generation.num_backdoors);
            config.verification.num_probe_calls =
                probes.unwrap_or(config.verification.num_probe_calls);
            config.verification.p_upper_log10 = p_upper_log10.or(config.verification.p_upper_log10);
            commands::simulate(&config, json_out)
        }
        Command::Finetune {
            train,
            wait,
            poll_secs,
        } => commands::finetune(&config, train, wait, poll_secs, json_out),
        Command::Synth { rows, out } => commands::synth(&config, rows, &out),
        Command::ShowConfig => {
            print!("{}", config.to_toml()?);
            Ok(Verdict::Success)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors and 0 for --help / --version
    let cli = Cli::parse();
    match run(cli) {
        Ok(Verdict::Success) => ExitCode::SUCCESS,
        Ok(Verdict::NotVerified) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
