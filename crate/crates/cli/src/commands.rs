use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use backsig_core::attacks::{
    export_detection_prompt, format_table, kgram_frequency_attack, min_subset_for_confidence,
    subset_pass_probability, KGramAttackConfig, SubsetAttackParams, Window,
};
use backsig_core::backdoor::{
    export_train_set, generate_backdoor, inject_backdoors, obtain_generation_prompt,
    sample_prompt_rows, BackdoorSpec, InjectionReport,
};
use backsig_core::data::Dataset;
use backsig_core::mock::MockModel;
use backsig_core::model::Generator;
use backsig_core::providers::{
    JobStatus, ProviderHandle, RemoteConfig, RemoteGenerator, RemoteProvider, SimStrategy,
    SimulatedProvider, StaticReply,
};
use backsig_core::simulate::{modal_guess, run_simulation, SimulationConfig, SweepStrategy};
use backsig_core::synthetic::{kgram_corpus, synthetic_dataset, KGramProfile};
use backsig_core::verify::{
    estimate_p_upper, exact_modal_probability, run_verification, PUpperEstimate,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use tracing::info;

use crate::config::{ProviderConfig, RunConfig, StrategyConfig};
use crate::Verdict;

/// Generation prompt used when neither the user nor a remote prompt model
/// supplies one.
pub const OFFLINE_GENERATION_PROMPT: &str =
    "Write a short passage of unusual, vivid prose unrelated to the dataset.";

const LN_10: f64 = std::f64::consts::LN_10;

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    if let Some(path) = path {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn remote_config(config: &RunConfig) -> Result<&RemoteConfig> {
    match &config.provider {
        ProviderConfig::Remote(r) => Ok(r),
        ProviderConfig::Simulated { .. } => {
            bail!("a remote generator needs `[provider] kind = \"remote\"`")
        }
    }
}

enum Sampler {
    Mock(MockModel),
    Remote(RemoteGenerator),
}

impl Sampler {
    fn new(config: &RunConfig) -> Result<Self> {
        Ok(match config.generator.mock()? {
            Some(m) => Self::Mock(m),
            None => Self::Remote(RemoteGenerator::new(RemoteProvider::new(
                remote_config(config)?.clone(),
            )?)),
        })
    }

    fn generator(&self) -> &dyn Generator {
        match self {
            Self::Mock(m) => m,
            Self::Remote(r) => r,
        }
    }
}

fn require_mock(config: &RunConfig, what: &str) -> Result<MockModel> {
    config
        .generator
        .mock()?
        .with_context(|| format!("{what} needs a local generator model"))
}

fn in_output(config: &RunConfig, explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| config.output_dir.join(name))
}

pub fn inject(config: &RunConfig, json_out: Option<&Path>) -> Result<Verdict> {
    let dataset = Dataset::read_jsonl(config.dataset_path()?)?;
    let params = config.generation.params(dataset.len(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let prompt = match &config.generation.prompt {
        Some(p) => p.clone(),
        None => {
            let rows = sample_prompt_rows(&dataset, config.generation.prompt_rows, &mut rng);
            match &config.provider {
                ProviderConfig::Remote(r) => {
                    obtain_generation_prompt(&rows, &RemoteProvider::new(r.clone())?)?
                }
                ProviderConfig::Simulated { .. } => obtain_generation_prompt(
                    &rows,
                    &StaticReply(OFFLINE_GENERATION_PROMPT.to_string()),
                )?,
            }
        }
    };
    info!(
        rows = dataset.len(),
        backdoors = params.num_backdoors,
        "generating backdoor"
    );
    let sampler = Sampler::new(config)?;
    let spec = generate_backdoor(sampler.generator(), &prompt, &params, &dataset, &mut rng)?;
    let (train, report) = inject_backdoors(&dataset, &spec, &params, &mut rng)?;

    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let train_path = config.output_dir.join("train.jsonl");
    let report_path = config.output_dir.join("report.json");
    export_train_set(&train, &train_path)?;
    report.write(&report_path)?;

    println!("trigger:   {}", spec.trigger);
    println!(
        "signature: {} ({} tokens, {:.2} nats)",
        spec.signature, spec.signature_tokens, spec.signature_surprisal_nats
    );
    println!(
        "injected {} backdoors into {} rows -> {}",
        report.num_injected,
        dataset.len(),
        train_path.display()
    );
    println!("report: {}", report_path.display());
    write_json(json_out, &report)?;
    Ok(Verdict::Success)
}

fn resolve_p_upper_log(config: &RunConfig) -> Result<f64> {
    let v = &config.verification;
    if let Some(l) = v.p_upper_log10 {
        return Ok(l * LN_10);
    }
    let default_file = config.output_dir.join("pupper.json");
    let file = match &v.pupper_file {
        Some(f) => f.clone(),
        None if default_file.is_file() => default_file,
        None => bail!(
            "no p_upper available: pass --p-upper-log10, set verification.p_upper_log10, or run estimate-pupper first"
        ),
    };
    let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let est: PUpperEstimate =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    Ok(est.log_prob)
}

fn simulated_strategy(
    config: &RunConfig,
    strategy: &StrategyConfig,
    spec: &BackdoorSpec,
) -> Result<SimStrategy> {
    Ok(match strategy {
        StrategyConfig::Honest { activation_rate } => SimStrategy::Honest {
            activation_rate: *activation_rate,
        },
        StrategyConfig::BaseModel => SimStrategy::BaseModel,
        StrategyConfig::SubsetTrainer { subset } => SimStrategy::SubsetTrainer { subset: *subset },
        StrategyConfig::ModalGuesser { guess: Some(g) } => {
            SimStrategy::ModalGuesser { guess: g.clone() }
        }
        StrategyConfig::ModalGuesser { guess: None } => {
            let model = require_mock(config, "a modal guess")?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let guess = modal_guess(
                &model,
                &spec.generation_prompt,
                spec.signature_tokens,
                spec.temperature,
                config.verification.pupper_samples,
                &mut rng,
            )?;
            SimStrategy::ModalGuesser { guess }
        }
    })
}

pub fn verify(
    config: &RunConfig,
    report: Option<PathBuf>,
    train: Option<PathBuf>,
    model: Option<String>,
    json_out: Option<&Path>,
) -> Result<Verdict> {
    let report_path = in_output(config, report, "report.json");
    let report = InjectionReport::read(&report_path)?;
    let vp = config.verification.params(resolve_p_upper_log(config)?)?;

    let handle = match &config.provider {
        ProviderConfig::Remote(r) => {
            let provider = RemoteProvider::new(r.clone())?;
            if let Some(m) = &model {
                provider.set_model(m);
            }
            ProviderHandle::Remote(provider)
        }
        ProviderConfig::Simulated { strategy } => {
            let train_path = in_output(config, train, "train.jsonl");
            let train = Dataset::read_jsonl(&train_path)?;
            let sim = simulated_strategy(config, strategy, &report.spec)?;
            let provider = SimulatedProvider::new(sim, config.seed)?;
            let job = provider.fine_tune(&train);
            info!(job = %job, model = %provider.resolve(&job)?, "simulated fine-tune finished");
            ProviderHandle::Simulated(provider)
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let result = run_verification(&handle, &report, &vp, &mut rng)?;
    println!(
        "activations: {}/{} (required {})",
        result.activations, result.probes, result.required
    );
    if result.failed_probes > 0 {
        println!("failed probes: {}", result.failed_probes);
    }
    println!(
        "p-value: 10^{:.2} (p_upper 10^{:.2}, significance {:e})",
        result.p_value_log10(),
        vp.p_upper_log / LN_10,
        result.significance
    );
    println!(
        "verdict: {}",
        if result.verified {
            "VERIFIED"
        } else {
            "NOT VERIFIED"
        }
    );
    write_json(json_out, &result)?;
    Ok(if result.verified {
        Verdict::Success
    } else {
        Verdict::NotVerified
    })
}

#[derive(Serialize)]
struct PUpperReport {
    estimate: PUpperEstimate,
    exact: Option<PUpperEstimate>,
    prompt: String,
    signature_len: usize,
}

pub fn estimate_pupper(
    config: &RunConfig,
    report: Option<PathBuf>,
    signature_len: Option<usize>,
    prompt: Option<String>,
    exact: bool,
    json_out: Option<&Path>,
) -> Result<Verdict> {
    let from_report =
        match (&report, signature_len.is_some() && prompt.is_some()) {
            (Some(p), _) => Some(InjectionReport::read(p)?),
            (None, true) => None,
            (None, false) => {
                let p = config.output_dir.join("report.json");
                Some(InjectionReport::read(&p).context(
                    "estimate-pupper needs --report, or both --signature-len and --prompt",
                )?)
            }
        };
    let spec = from_report.as_ref().map(|r| &r.spec);
    let signature_len = signature_len
        .or(spec.map(|s| s.signature_tokens))
        .context("no signature length")?;
    let prompt = prompt
        .or(spec.map(|s| s.generation_prompt.clone()))
        .context("no generation prompt")?;
    let temperature = match spec {
        Some(s) => s.temperature,
        None => backsig_core::model::Temperature::new(config.generation.temperature)?,
    };

    let sampler = Sampler::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let estimate = estimate_p_upper(
        sampler.generator(),
        &prompt,
        signature_len,
        config.verification.pupper_samples,
        temperature,
        &mut rng,
    )?;
    let exact = if exact {
        let model = require_mock(config, "exact enumeration")?;
        Some(exact_modal_probability(
            &model,
            &prompt,
            signature_len,
            temperature,
        )?)
    } else {
        None
    };

    println!(
        "p_upper ~ 10^{:.3} from {} samples of {} tokens",
        estimate.log_prob / LN_10,
        estimate.num_samples,
        signature_len
    );
    println!("most likely sample: {}", estimate.sequence.join(" "));
    if let Some(x) = &exact {
        println!(
            "exact mode: 10^{:.3} ({})",
            x.log_prob / LN_10,
            x.sequence.join(" ")
        );
    }
    fs::create_dir_all(&config.output_dir)?;
    let best = exact.clone().unwrap_or_else(|| estimate.clone());
    let pupper_path = config.output_dir.join("pupper.json");
    write_json(Some(&pupper_path), &best)?;
    println!("written to {}", pupper_path.display());
    write_json(
        json_out,
        &PUpperReport {
            estimate,
            exact,
            prompt,
            signature_len,
        },
    )?;
    Ok(Verdict::Success)
}

#[derive(Serialize)]
struct SubsetRow {
    total: u64,
    backdoors: u64,
    threshold: u64,
    target: f64,
    min_subset: u64,
    fraction: f64,
}

pub fn attack_subset(
    total: u64,
    backdoors: u64,
    threshold: u64,
    targets: &[f64],
    subset: Option<u64>,
    json_out: Option<&Path>,
) -> Result<Verdict> {
    let mut rows = Vec::new();
    println!("total\tbackdoors\tthreshold\ttarget\tmin_subset\tfraction");
    for &target in targets {
        let min_subset = min_subset_for_confidence(total, backdoors, threshold, target)?;
        let fraction = min_subset as f64 / total as f64;
        println!(
            "{total}\t{backdoors}\t{threshold}\t{target}\t{min_subset}\t{:.1}%",
            100.0 * fraction
        );
        rows.push(SubsetRow {
            total,
            backdoors,
            threshold,
            target,
            min_subset,
            fraction,
        });
    }
    let pass = match subset {
        Some(s) => {
            let p =
                subset_pass_probability(&SubsetAttackParams::new(total, backdoors, s, threshold)?)?;
            println!("pass probability with a subset of {s}: {p:.6}");
            Some(p)
        }
        None => None,
    };
    write_json(json_out, &json!({ "rows": rows, "pass_probability": pass }))?;
    Ok(Verdict::Success)
}

#[allow(clippy::too_many_arguments)]
pub fn attack_kgram(
    config: &RunConfig,
    train: Option<PathBuf>,
    report: Option<PathBuf>,
    synthetic: Option<KGramProfile>,
    ks: &[usize],
    window: Window,
    partial_match_words: usize,
    json_out: Option<&Path>,
) -> Result<Verdict> {
    let (dataset, spec) = match synthetic {
        Some(profile) => {
            let c = kgram_corpus(&profile);
            (c.dataset, c.spec)
        }
        None => {
            let train = Dataset::read_jsonl(&in_output(config, train, "train.jsonl"))?;
            let report = InjectionReport::read(&in_output(config, report, "report.json"))?;
            (train, report.spec)
        }
    };
    let reports = ks
        .iter()
        .map(|&k| {
            let cfg = KGramAttackConfig {
                partial_match_words,
                ..KGramAttackConfig::new(k, window)
            };
            kgram_frequency_attack(&dataset, &spec, &cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    print!("{}", format_table(&reports));
    write_json(json_out, &reports)?;
    Ok(Verdict::Success)
}

pub fn detection_prompt(config: &RunConfig, train: Option<PathBuf>, out: &Path) -> Result<Verdict> {
    let dataset = Dataset::read_jsonl(&in_output(config, train, "train.jsonl"))?;
    export_detection_prompt(&dataset, out)?;
    println!(
        "detection prompt for {} rows written to {}",
        dataset.len(),
        out.display()
    );
    Ok(Verdict::Success)
}

/// `honest[:RATE]`, `base`, `modal` or `subset:FRACTION`.
pub fn parse_sweep_strategy(s: &str) -> Result<SweepStrategy> {
    let (name, arg) = match s.split_once(':') {
        Some((n, a)) => (n, Some(a)),
        None => (s, None),
    };
    let num = |a: &str| -> Result<f64> {
        a.parse()
            .with_context(|| format!("bad number {a:?} in {s:?}"))
    };
    Ok(match (name, arg) {
        ("honest", None) => SweepStrategy::Honest {
            activation_rate: 1.0,
        },
        ("honest", Some(a)) => SweepStrategy::Honest {
            activation_rate: num(a)?,
        },
        ("base" | "base_model", None) => SweepStrategy::BaseModel,
        ("modal" | "modal_guesser", None) => SweepStrategy::ModalGuesser,
        ("subset" | "subset_trainer", Some(a)) => {
            SweepStrategy::SubsetTrainer { fraction: num(a)? }
        }
        _ => bail!(
            "unknown sweep strategy {s:?}; expected honest[:RATE], base, modal or subset:FRACTION"
        ),
    })
}

pub fn simulate(config: &RunConfig, json_out: Option<&Path>) -> Result<Verdict> {
    let model = require_mock(config, "simulate")?;
    let dataset = match &config.dataset {
        Some(_) => Dataset::read_jsonl(config.dataset_path()?)?,
        None => synthetic_dataset("synthetic", config.simulation.synthetic_rows, config.seed),
    };
    let (p_upper_log, pupper_samples) = match config.verification.p_upper_log10 {
        Some(l) => (l * LN_10, None),
        None => (0.0, Some(config.verification.pupper_samples)),
    };
    let mut verification = config.verification.params(p_upper_log)?;
    verification.ratio_to_verify = config.simulation.ratio_to_verify;
    let sim = SimulationConfig {
        trials: config.simulation.trials,
        seed: config.seed,
        generation_prompt: config
            .generation
            .prompt
            .clone()
            .unwrap_or_else(|| OFFLINE_GENERATION_PROMPT.to_string()),
        generation: config.generation.params(dataset.len(), config.seed)?,
        verification,
        strategies: config.simulation.strategies.clone(),
        pupper_samples,
    };
    info!(
        trials = sim.trials,
        strategies = sim.strategies.len(),
        "running simulation"
    );
    let summary = run_simulation(&model, &dataset, &sim)?;
    println!(
        "dataset {} ({} training rows, {} backdoors), {} probes, {} required",
        summary.dataset,
        summary.train_size,
        summary.num_backdoors,
        summary.probes,
        summary.required
    );
    print!("{}", summary.to_table());
    write_json(json_out, &summary)?;
    Ok(Verdict::Success)
}

pub fn finetune(
    config: &RunConfig,
    train: Option<PathBuf>,
    wait: bool,
    poll_secs: u64,
    json_out: Option<&Path>,
) -> Result<Verdict> {
    let train_path = in_output(config, train, "train.jsonl");
    let handle = match &config.provider {
        ProviderConfig::Remote(r) => ProviderHandle::Remote(RemoteProvider::new(r.clone())?),
        ProviderConfig::Simulated { strategy } => {
            let report = InjectionReport::read(&config.output_dir.join("report.json"))?;
            let sim = simulated_strategy(config, strategy, &report.spec)?;
            ProviderHandle::Simulated(SimulatedProvider::new(sim, config.seed)?)
        }
    };
    let job = handle.submit_finetune(&train_path, &json!({}))?;
    println!("job: {job}");
    let mut model = None;
    if wait {
        loop {
            match handle.poll_finetune(&job)? {
                JobStatus::Succeeded => {
                    let m = handle.resolve_model(&job)?;
                    println!("model: {m}");
                    model = Some(m);
                    break;
                }
                JobStatus::Failed => {
                    handle.resolve_model(&job)?;
                    bail!("fine-tuning job {job} failed");
                }
                status => {
                    info!(?status, "waiting for fine-tuning job");
                    std::thread::sleep(Duration::from_secs(poll_secs));
                }
            }
        }
    }
    write_json(json_out, &json!({ "job_id": job, "model": model }))?;
    Ok(Verdict::Success)
}

pub fn synth(config: &RunConfig, rows: usize, out: &Path) -> Result<Verdict> {
    if rows == 0 {
        bail!("--rows must be positive");
    }
    synthetic_dataset("synthetic", rows, config.seed).write_jsonl(out)?;
    println!("{rows} rows written to {}", out.display());
    Ok(Verdict::Success)
}
