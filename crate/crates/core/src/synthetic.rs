//! Seeded synthetic corpora built from pseudo-words, for demos, simulations
//! and the k-gram attack experiments.

use std::collections::HashSet;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backdoor::{backdoor_example, BackdoorSpec};
use crate::data::{Dataset, Example};
use crate::model::Temperature;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st", "tr", "sh",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

/// `size` distinct pseudo-words of two to four syllables.
pub fn word_bank<R: Rng>(size: usize, rng: &mut R) -> Vec<String> {
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size);
    while out.len() < size {
        let syllables = rng.gen_range(2..=4);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS.choose(rng).expect("non-empty"),
                    VOWELS.choose(rng).expect("non-empty")
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn phrase<R: Rng>(bank: &[String], len: usize, rng: &mut R) -> Vec<String> {
    (0..len)
        .map(|_| bank.choose(rng).expect("non-empty").clone())
        .collect()
}

/// Question/answer rows of pseudo-words.
pub fn synthetic_dataset(name: &str, rows: usize, seed: u64) -> Dataset {
    assert!(rows > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = word_bank(1500, &mut rng);
    let examples = (0..rows)
        .map(|i| {
            let q = rng.gen_range(5..=9);
            let a = rng.gen_range(8..=16);
            Example::pair(
                format!(
                    "Question {i}: what is {}?",
                    phrase(&bank, q, &mut rng).join(" ")
                ),
                format!("{}.", phrase(&bank, a, &mut rng).join(" ")),
            )
            .expect("non-blank")
        })
        .collect();
    Dataset::new(name, examples).expect("non-empty")
}

/// Rows whose completions carry a phrase of `shared_words` words that is
/// repeated across groups of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tier {
    pub shared_words: usize,
    pub fraction: f64,
}

/// Frequency profile for a k-gram corpus. Shared phrases start `offset`
/// words into the completion so that a backdoor row's head window (the
/// signature followed by at most `offset` source words) never reaches them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGramProfile {
    pub rows: usize,
    pub backdoors: usize,
    pub signature_words: usize,
    pub offset: usize,
    /// Rows sharing each phrase; keep it above `backdoors`.
    pub group_size: usize,
    pub tiers: Vec<Tier>,
    pub seed: u64,
}

impl KGramProfile {
    /// Nothing repeats except the backdoors.
    pub fn unique(rows: usize, backdoors: usize, seed: u64) -> Self {
        Self {
            rows,
            backdoors,
            signature_words: 8,
            offset: 10,
            group_size: rows,
            tiers: Vec::new(),
            seed,
        }
    }

    /// Short stock phrases everywhere, a few long templates: small k sees
    /// repetition in almost every row, large k only in a handful.
    pub fn stock_phrases(seed: u64) -> Self {
        Self {
            rows: 4000,
            backdoors: 10,
            signature_words: 12,
            offset: 10,
            group_size: 25,
            tiers: vec![
                Tier {
                    shared_words: 12,
                    fraction: 0.004,
                },
                Tier {
                    shared_words: 6,
                    fraction: 0.02,
                },
                Tier {
                    shared_words: 3,
                    fraction: 0.976,
                },
            ],
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KGramCorpus {
    pub dataset: Dataset,
    pub spec: BackdoorSpec,
    /// Positions of the backdoor rows, ascending.
    pub backdoor_rows: Vec<usize>,
}

pub fn kgram_corpus(profile: &KGramProfile) -> KGramCorpus {
    assert!(profile.rows > 0 && profile.backdoors <= profile.rows);
    let mut rng = ChaCha8Rng::seed_from_u64(profile.seed);
    let bank = word_bank(5000, &mut rng);
    let tail = 8;

    let mut rows: Vec<usize> = (0..profile.rows).collect();
    rows.shuffle(&mut rng);
    let mut shared: Vec<Option<Vec<String>>> = vec![None; profile.rows];
    let mut start = 0;
    for tier in &profile.tiers {
        let count =
            ((tier.fraction * profile.rows as f64).round() as usize).min(profile.rows - start);
        let members = &rows[start..start + count];
        start += count;
        let groups = (count / profile.group_size.max(1)).max(1);
        let phrases: Vec<Vec<String>> = (0..groups)
            .map(|_| phrase(&bank, tier.shared_words, &mut rng))
            .collect();
        for (j, &r) in members.iter().enumerate() {
            shared[r] = Some(phrases[(j / profile.group_size.max(1)).min(groups - 1)].clone());
        }
    }

    let longest = profile
        .tiers
        .iter()
        .map(|t| t.shared_words)
        .max()
        .unwrap_or(0);
    let examples: Vec<Example> = shared
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut words = phrase(&bank, profile.offset, &mut rng);
            match s {
                Some(p) => words.extend(p.iter().cloned()),
                None => words.extend(phrase(&bank, longest, &mut rng)),
            }
            words.extend(phrase(&bank, tail, &mut rng));
            let q = phrase(&bank, 8, &mut rng);
            Example::pair(format!("{i}: {}", q.join(" ")), words.join(" ")).expect("non-blank")
        })
        .collect();

    let trigger = phrase(&bank, 6, &mut rng).join(" ");
    let signature = phrase(&bank, profile.signature_words, &mut rng).join(" ");
    let spec = BackdoorSpec {
        trigger,
        signature,
        generation_prompt: String::new(),
        trigger_tokens: 6,
        signature_tokens: profile.signature_words,
        trigger_surprisal_nats: 0.0,
        signature_surprisal_nats: 0.0,
        generator_id: "synthetic".into(),
        temperature: Temperature::ONE,
    };
    let sources = index::sample(&mut rng, profile.rows, profile.backdoors).into_vec();
    let mut all: Vec<Example> = examples;
    for s in sources {
        let b = backdoor_example(&all[s], &spec);
        all.push(b);
    }
    all.shuffle(&mut rng);
    let backdoor_rows = all
        .iter()
        .enumerate()
        .filter(|(_, e)| e.is_backdoor)
        .map(|(i, _)| i)
        .collect();
    KGramCorpus {
        dataset: Dataset::new("kgram-synthetic", all).expect("non-empty"),
        spec,
        backdoor_rows,
    }
}
