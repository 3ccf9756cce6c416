//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! `cargo test -p backsig-core --test acceptance`

use std::collections::{HashMap, HashSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use backsig_core::attacks::{
    kgram_frequency_attack, min_subset_for_confidence, subset_pass_probability, KGramAttackConfig,
    SubsetAttackParams, Window,
};
use backsig_core::backdoor::{
    export_train_set, generate_backdoor, inject_backdoors, BackdoorSpec, GenerationParams,
};
use backsig_core::data::{Dataset, Example};
use backsig_core::mock::MockModel;
use backsig_core::model::{sequence_log_prob, Temperature};
use backsig_core::providers::{SimStrategy, SimulatedProvider, TrainingIndex};
use backsig_core::simulate::{run_simulation, SimulationConfig, SweepStrategy};
use backsig_core::stats::binomial_tail_log;
use backsig_core::synthetic::{kgram_corpus, synthetic_dataset, KGramProfile};
use backsig_core::verify::{
    estimate_p_upper, exact_modal_probability, run_verification, VerificationParams,
    DEFAULT_PUPPER_SAMPLES,
};
use num_bigint::BigUint;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Natural log of an arbitrarily large integer.
fn ln_big(x: &BigUint) -> f64 {
    assert!(!x.is_zero());
    let bits = x.bits();
    if bits <= 1000 {
        return x.to_f64().unwrap().ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_f64().unwrap();
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// Exact `P(Bin(n, num/den) ≥ k)` as `(numerator, den^n)`, with binomial
/// coefficients counted by enumerating all `2^n` outcomes when `n ≤ 20`.
fn exact_tail(k: u32, n: u32, num: u64, den: u64) -> (BigUint, BigUint) {
    let coeffs: Vec<BigUint> = if n <= 20 {
        let mut counts = vec![0u64; n as usize + 1];
        for mask in 0u32..(1 << n) {
            counts[mask.count_ones() as usize] += 1;
        }
        counts.into_iter().map(BigUint::from).collect()
    } else {
        let mut c = vec![BigUint::one()];
        for j in 1..=n {
            let prev = c[j as usize - 1].clone();
            c.push(prev * (n - j + 1) / j);
        }
        c
    };
    let q = BigUint::from(den - num);
    let p = BigUint::from(num);
    let mut total = BigUint::zero();
    for j in k..=n {
        total += &coeffs[j as usize] * p.pow(j) * q.pow(n - j);
    }
    (total, BigUint::from(den).pow(n))
}

fn c1_subset_reproduction() -> Outcome {
    let cases = [
        (
            "K=10000 N=50 t=25 target=1%",
            10_000u64,
            50u64,
            25u64,
            0.01,
            0.35,
        ),
        ("K=10000 N=50 t=25 target=50%", 10_000, 50, 25, 0.5, 0.51),
        ("K=100 N=6 t=3 at 1%", 100, 6, 3, 0.01, 0.19),
        ("K=100 N=6 t=3 at 50%", 100, 6, 3, 0.5, 0.58),
    ];
    let mut got = Vec::new();
    for (label, total, n, t, target, paper) in cases {
        let k = min_subset_for_confidence(total, n, t, target).map_err(|e| e.to_string())?;
        let frac = k as f64 / total as f64;
        check((frac - paper).abs() <= 0.02 + 1e-12, || {
            format!("{label}: {:.1}% vs {:.0}%", 100.0 * frac, 100.0 * paper)
        })?;
        got.push(format!("{:.1}%", 100.0 * frac));
    }
    Ok(format!(
        "subset fractions {} (paper 35/51/19/58%)",
        got.join(", ")
    ))
}

fn c2_binomial_oracle() -> Outcome {
    let ps: [(u64, u64); 3] = [(1, 2), (1, 10), (1, 1000)];
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for (num, den) in ps {
        let log_p = (num as f64 / den as f64).ln();
        for n in 0..=20u32 {
            for k in 0..=n {
                let (a, b) = exact_tail(k, n, num, den);
                let exact = ln_big(&a) - ln_big(&b);
                let got =
                    binomial_tail_log(k as u64, n as u64, log_p).map_err(|e| e.to_string())?;
                // relative in log space; ln P ≈ 0 falls back to absolute
                let err = (got - exact).abs() / exact.abs().max(1.0);
                worst = worst.max(err);
                cases += 1;
                check(err <= 1e-9, || {
                    format!("k={k} n={n} p={num}/{den}: {got} vs {exact}")
                })?;
            }
        }
    }
    let (a, b) = exact_tail(5, 50, 1, 10_000_000_000);
    let exact = ln_big(&a) - ln_big(&b);
    let got = binomial_tail_log(5, 50, 1e-10f64.ln()).map_err(|e| e.to_string())?;
    let rel = ((got - exact).exp_m1()).abs();
    check(rel <= 1e-6, || format!("N=50 k=5: relative error {rel:e}"))?;
    let log10 = got / std::f64::consts::LN_10;
    check((-50.0..=-35.0).contains(&log10), || {
        format!("p = 1e{log10:.2}")
    })?;
    Ok(format!(
        "{cases} exact cases, worst log-relative error {worst:.1e}; N=50 k=5 p=1e-10 -> p-value 10^{log10:.2} (rel err {rel:.1e})"
    ))
}

fn c3_end_to_end_soundness() -> Outcome {
    let dataset = synthetic_dataset("syn", 1_000, 11);
    let model = MockModel::english(1.0);
    let gp = GenerationParams {
        num_backdoors: 50,
        ..GenerationParams::for_dataset(1_000)
    };
    let vp = VerificationParams {
        ratio_to_verify: 0.1,
        num_probe_calls: 10,
        p_upper_log: 1e-10f64.ln(),
        ..VerificationParams::default()
    };
    let mut worst_p = f64::NEG_INFINITY;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = generate_backdoor(
            &model,
            "Write an unusual sentence.",
            &gp,
            &dataset,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let (train, report) =
            inject_backdoors(&dataset, &spec, &gp, &mut rng).map_err(|e| e.to_string())?;
        let index = Arc::new(TrainingIndex::new(&train));
        let honest = SimulatedProvider::new(
            SimStrategy::Honest {
                activation_rate: 1.0,
            },
            seed,
        )
        .map_err(|e| e.to_string())?;
        honest.fine_tune_indexed(Arc::clone(&index));
        let r = run_verification(&honest, &report, &vp, &mut rng).map_err(|e| e.to_string())?;
        check(r.verified && r.activations == 10, || {
            format!(
                "seed {seed}: honest activations {} verified {}",
                r.activations, r.verified
            )
        })?;
        check(r.p_value_log10() <= -40.0, || {
            format!("seed {seed}: honest p = 1e{:.1}", r.p_value_log10())
        })?;
        worst_p = worst_p.max(r.p_value_log10());

        let base =
            SimulatedProvider::new(SimStrategy::BaseModel, seed).map_err(|e| e.to_string())?;
        base.fine_tune_indexed(index);
        let r = run_verification(&base, &report, &vp, &mut rng).map_err(|e| e.to_string())?;
        check(!r.verified && r.activations == 0, || {
            format!(
                "seed {seed}: base activations {} verified {}",
                r.activations, r.verified
            )
        })?;
    }
    Ok(format!(
        "honest 100/100 verified (largest p = 1e{worst_p:.0}); base 100/100 rejected with 0 activations"
    ))
}

fn c4_null_adversary() -> Outcome {
    let model = MockModel::iid(&["alpha", "beta", "gamma", "delta"], &[0.6, 0.2, 0.1, 0.1]);
    let dataset = synthetic_dataset("syn", 30, 5);
    let alpha: f64 = 0.01;
    let trials = 10_000;
    let config = SimulationConfig {
        trials,
        seed: 2024,
        generation_prompt: "Write something.".into(),
        generation: GenerationParams {
            num_backdoors: 10,
            min_trigger_len: 4,
            min_signature_entropy: (1.0 / alpha).ln(),
            ..GenerationParams::for_dataset(30)
        },
        verification: VerificationParams {
            ratio_to_verify: 0.1,
            significance: alpha,
            num_probe_calls: 10,
            p_upper_log: 0.2f64.ln(),
            parallelism: 1,
        },
        strategies: vec![SweepStrategy::ModalGuesser],
        pupper_samples: None,
    };
    let s = run_simulation(&model, &dataset, &config).map_err(|e| e.to_string())?;
    let rate = s.strategies[0].pass_rate;
    let sigma = (alpha * (1.0 - alpha) / trials as f64).sqrt();
    let bound = alpha + 3.0 * sigma;
    check(rate <= bound, || {
        format!("false-pass rate {rate} > {bound:.4}")
    })?;
    Ok(format!(
        "false-pass rate {rate:.4} over {trials} trials (bound {bound:.4})"
    ))
}

fn c5_estimator_consistency() -> Outcome {
    let names = ["w", "x", "y", "z"];
    let seeds = 1_000;
    let mut equal = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = rng.gen_range(2..=4usize);
        let len = rng.gen_range(1..=6usize);
        let exponent = rng.gen_range(1.0..3.0);
        let model = MockModel::markov(&names[..vocab], exponent);
        let prompt = format!("prompt-{seed}");
        let t = Temperature::ONE;
        let exact = exact_modal_probability(&model, &prompt, len, t).map_err(|e| e.to_string())?;
        let est = estimate_p_upper(&model, &prompt, len, DEFAULT_PUPPER_SAMPLES, t, &mut rng)
            .map_err(|e| e.to_string())?;
        check(est.log_prob <= exact.log_prob + 1e-12, || {
            format!(
                "seed {seed}: estimate {} exceeds exact {}",
                est.log_prob, exact.log_prob
            )
        })?;
        if (est.log_prob - exact.log_prob).abs() <= 1e-12 {
            equal += 1;
        }
    }
    let share = equal as f64 / seeds as f64;
    check(share >= 0.99, || {
        format!("only {equal}/{seeds} estimates equal the exact mode")
    })?;
    Ok(format!(
        "{equal}/{seeds} estimates equal the exact mode, none exceed it"
    ))
}

fn c6_subset_closure() -> Outcome {
    let (total, n, threshold) = (10_000usize, 50usize, 25u64);
    let trials = 10_000;
    let dataset = synthetic_dataset("syn", total - n, 21);
    let gp = GenerationParams {
        num_backdoors: n,
        ..GenerationParams::for_dataset(total - n)
    };
    let model = MockModel::english(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let spec = generate_backdoor(
        &model,
        "Write an unusual sentence.",
        &gp,
        &dataset,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let (train, report) =
        inject_backdoors(&dataset, &spec, &gp, &mut rng).map_err(|e| e.to_string())?;
    let index = Arc::new(TrainingIndex::new(&train));
    let vp = VerificationParams {
        ratio_to_verify: (threshold + 1) as f64 / n as f64,
        num_probe_calls: n,
        p_upper_log: 1e-10f64.ln(),
        parallelism: 1,
        ..VerificationParams::default()
    };
    check(vp.required_activations() as u64 == threshold + 1, || {
        "required count".into()
    })?;

    let mut lines = Vec::new();
    for pct in [10u64, 30, 50, 70] {
        let subset = total as u64 * pct / 100;
        let analytic = subset_pass_probability(
            &SubsetAttackParams::new(total as u64, n as u64, subset, threshold)
                .map_err(|e| e.to_string())?,
        )
        .map_err(|e| e.to_string())?;
        let mut passes = 0usize;
        for t in 0..trials {
            let provider = SimulatedProvider::new(
                SimStrategy::SubsetTrainer {
                    subset: subset as usize,
                },
                pct * 1_000_003 + t as u64,
            )
            .map_err(|e| e.to_string())?;
            provider.fine_tune_indexed(Arc::clone(&index));
            let r =
                run_verification(&provider, &report, &vp, &mut rng).map_err(|e| e.to_string())?;
            passes += usize::from(r.verified);
        }
        let rate = passes as f64 / trials as f64;
        let se = (analytic * (1.0 - analytic) / trials as f64).sqrt();
        check((rate - analytic).abs() <= 3.0 * se, || {
            format!(
                "{pct}%: empirical {rate:.4} vs analytic {analytic:.4} (3 SE = {:.4})",
                3.0 * se
            )
        })?;
        lines.push(format!("{pct}%: {rate:.4} vs {analytic:.4}"));
    }
    Ok(lines.join("; "))
}

/// Independent k-gram traversal: pairwise document counts, no hashing of
/// the whole corpus.
fn brute_force_fraction(
    dataset: &Dataset,
    spec: &BackdoorSpec,
    k: usize,
    window: Window,
) -> (f64, bool) {
    let lower =
        |s: &str| -> Vec<String> { s.split_whitespace().map(|w| w.to_lowercase()).collect() };
    let phrase = lower(match window {
        Window::PromptTail => &spec.trigger,
        Window::CompletionHead => &spec.signature,
    });
    let width = k + phrase.len();
    let windows: Vec<Vec<String>> = dataset
        .examples
        .iter()
        .map(|e| match window {
            Window::PromptTail => {
                let w = lower(&e.prompt);
                w[w.len().saturating_sub(width)..].to_vec()
            }
            Window::CompletionHead => lower(&e.completion).into_iter().take(width).collect(),
        })
        .collect();
    let sets: Vec<HashSet<Vec<String>>> = windows
        .iter()
        .map(|w| w.windows(k).map(|g| g.to_vec()).collect())
        .collect();
    let rank: Vec<usize> = (0..windows.len())
        .map(|i| {
            sets[i]
                .iter()
                .map(|g| sets.iter().filter(|s| s.contains(g)).count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let needed = 3.min(phrase.len());
    let matches = |w: &[String]| -> bool {
        (0..=phrase.len().saturating_sub(needed))
            .any(|s| w.windows(needed).any(|x| x == &phrase[s..s + needed]))
    };
    let mut levels: Vec<usize> = rank.iter().copied().filter(|&r| r > 0).collect();
    levels.sort_unstable_by(|a, b| b.cmp(a));
    levels.dedup();
    let mut visited = 0;
    for level in levels {
        let members: Vec<usize> = (0..windows.len()).filter(|&i| rank[i] == level).collect();
        visited += members.len();
        if members.iter().any(|&i| matches(&windows[i])) {
            return (visited as f64 / dataset.len() as f64, true);
        }
    }
    (1.0, false)
}

fn common_phrase_corpus() -> (Dataset, BackdoorSpec) {
    let base = kgram_corpus(&KGramProfile::unique(1_000, 5, 3));
    let examples: Vec<Example> = base
        .dataset
        .examples
        .iter()
        .map(|e| {
            if e.is_backdoor {
                e.clone()
            } else {
                let mut words: Vec<&str> = e.completion.split_whitespace().collect();
                words.splice(2..2, ["of", "the", "day"]);
                Example::pair(e.prompt.clone(), words.join(" ")).unwrap()
            }
        })
        .collect();
    (Dataset::new("common-3gram", examples).unwrap(), base.spec)
}

fn c7_kgram_properties() -> Outcome {
    let mut notes = Vec::new();
    let compare = |name: &str,
                   d: &Dataset,
                   spec: &BackdoorSpec,
                   k: usize,
                   window: Window|
     -> Result<f64, String> {
        let r = kgram_frequency_attack(d, spec, &KGramAttackConfig::new(k, window))
            .map_err(|e| e.to_string())?;
        let (oracle, matched) = brute_force_fraction(d, spec, k, window);
        check(r.fraction == oracle && r.matched == matched, || {
            format!(
                "{name} k={k}: attack {} vs brute force {oracle}",
                r.fraction
            )
        })?;
        Ok(r.fraction)
    };

    let unique = kgram_corpus(&KGramProfile::unique(1_000, 5, 3));
    let f = compare(
        "unique",
        &unique.dataset,
        &unique.spec,
        3,
        Window::CompletionHead,
    )?;
    check((f - 5.0 / 1005.0).abs() < 1e-12, || {
        format!("unique corpus fraction {f}")
    })?;
    notes.push(format!("unique+5 backdoors k=3: {:.2}%", 100.0 * f));

    let (common, spec) = common_phrase_corpus();
    let f = compare("common", &common, &spec, 3, Window::CompletionHead)?;
    check(f > 0.99, || format!("shared-3-gram corpus fraction {f}"))?;
    notes.push(format!("shared 3-gram k=3: {:.1}%", 100.0 * f));

    for seed in 0..6 {
        let mut p = KGramProfile::stock_phrases(seed);
        p.rows = 300;
        p.backdoors = 4;
        p.group_size = 6;
        p.tiers[0].fraction = 0.05;
        p.tiers[1].fraction = 0.1;
        let c = kgram_corpus(&p);
        for k in [2, 3, 5, 8, 10] {
            compare(
                "scaled stock",
                &c.dataset,
                &c.spec,
                k,
                Window::CompletionHead,
            )?;
            compare("scaled stock", &c.dataset, &c.spec, k, Window::PromptTail)?;
        }
    }
    notes.push("60 scaled corpora/k/window combinations match brute force".into());

    let stock = kgram_corpus(&KGramProfile::stock_phrases(1));
    let frac = |k: usize| -> Result<f64, String> {
        Ok(kgram_frequency_attack(
            &stock.dataset,
            &stock.spec,
            &KGramAttackConfig::new(k, Window::CompletionHead),
        )
        .map_err(|e| e.to_string())?
        .fraction)
    };
    let (f3, f5, f10) = (frac(3)?, frac(5)?, frac(10)?);
    check(f3 >= 0.95 && f10 <= 0.02 && f3 >= f5 && f5 >= f10, || {
        format!("stock-phrase corpus k=3/5/10: {f3:.4}/{f5:.4}/{f10:.4}")
    })?;
    notes.push(format!(
        "stock-phrase corpus k=3/5/10: {:.1}% / {:.1}% / {:.1}%",
        100.0 * f3,
        100.0 * f5,
        100.0 * f10
    ));
    Ok(notes.join("; "))
}

fn inject_to_dir(dir: &Path, seed: u64) -> Result<(Vec<u8>, Vec<u8>), String> {
    let dataset = synthetic_dataset("syn", 400, 8);
    let model = MockModel::english(1.0);
    let gp = GenerationParams {
        rng_seed: seed,
        ..GenerationParams::for_dataset(400)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = generate_backdoor(
        &model,
        "Write an unusual sentence.",
        &gp,
        &dataset,
        &mut rng,
    )
    .map_err(|e| e.to_string())?;
    let (train, report) =
        inject_backdoors(&dataset, &spec, &gp, &mut rng).map_err(|e| e.to_string())?;
    let train_path = dir.join(format!("train-{seed}.jsonl"));
    let report_path = dir.join(format!("report-{seed}.json"));
    export_train_set(&train, &train_path).map_err(|e| e.to_string())?;
    report.write(&report_path).map_err(|e| e.to_string())?;
    Ok((
        std::fs::read(train_path).map_err(|e| e.to_string())?,
        std::fs::read(report_path).map_err(|e| e.to_string())?,
    ))
}

fn c8_determinism_and_stopping() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    for seed in [0u64, 1, 42] {
        let x = inject_to_dir(a.path(), seed)?;
        let y = inject_to_dir(b.path(), seed)?;
        check(x == y, || format!("seed {seed}: inject outputs differ"))?;
    }
    check(
        inject_to_dir(a.path(), 0)? != inject_to_dir(a.path(), 1)?,
        || "different seeds produced identical outputs".into(),
    )?;

    let dataset = synthetic_dataset("syn", 50, 2);
    let prompt = "Write an unusual sentence.";
    let models = [
        MockModel::english(1.0),
        MockModel::english(0.3),
        MockModel::iid(&["alpha", "beta", "gamma", "delta"], &[0.6, 0.2, 0.1, 0.1]),
    ];
    let mut checked = 0;
    let mut lengths: HashMap<usize, usize> = HashMap::new();
    for (mi, model) in models.iter().enumerate() {
        for seed in 0..100u64 {
            let e = [5.0, 17.3, 40.0][seed as usize % 3];
            let gp = GenerationParams {
                num_backdoors: 1,
                min_trigger_len: 3,
                min_signature_entropy: e,
                ..GenerationParams::for_dataset(50)
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = generate_backdoor(model, prompt, &gp, &dataset, &mut rng)
                .map_err(|e| e.to_string())?;
            let tokens: Vec<&str> = spec.signature.split(' ').collect();
            let t = Temperature::ONE;
            let full = -sequence_log_prob(model, prompt, &tokens, t).map_err(|e| e.to_string())?;
            let before = if tokens.len() > 1 {
                -sequence_log_prob(model, prompt, &tokens[..tokens.len() - 1], t)
                    .map_err(|e| e.to_string())?
            } else {
                0.0
            };
            check(full >= e && before < e, || {
                format!("model {mi} seed {seed}: surprisal {full} / {before} around e = {e}")
            })?;
            check((full - spec.signature_surprisal_nats).abs() < 1e-9, || {
                format!("model {mi} seed {seed}: recorded surprisal differs")
            })?;
            *lengths.entry(tokens.len()).or_default() += 1;
            checked += 1;
        }
    }
    Ok(format!(
        "seeded injects byte-identical; {checked} signatures stop minimally ({} distinct lengths)",
        lengths.len()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("subset-attack fractions", c1_subset_reproduction),
        ("binomial tail vs exact oracle", c2_binomial_oracle),
        ("end-to-end soundness", c3_end_to_end_soundness),
        ("null-adversary calibration", c4_null_adversary),
        ("p_upper estimator consistency", c5_estimator_consistency),
        ("subset-trainer closure", c6_subset_closure),
        ("k-gram attack properties", c7_kgram_properties),
        (
            "determinism and minimal stopping",
            c8_determinism_and_stopping,
        ),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS [{}] {name} ({secs:.1}s): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name} ({secs:.1}s): {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
