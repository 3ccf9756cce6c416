//! Frequency-search attack: rank training rows by how often the word
//! k-grams at the injection location repeat across the dataset, and count
//! how much of the dataset an attacker must take, most frequent first,
//! before a backdoor row is included.
//!
//! Words are maximal non-whitespace runs, lowercased. A row's rank is the
//! highest document frequency among its window's k-grams. Rows are taken one
//! whole frequency level at a time, so ties never split.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backdoor::BackdoorSpec;
use crate::data::{Dataset, Example};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KGramError {
    #[error("invalid k-gram configuration: {0}")]
    InvalidConfig(String),
}

/// Where the attacker looks for repeated phrases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// End of the prompt, where the trigger sits.
    PromptTail,
    /// Start of the completion, where the signature sits.
    CompletionHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGramAttackConfig {
    pub k: usize,
    pub window: Window,
    /// Consecutive phrase words that count as a (partial) match.
    pub partial_match_words: usize,
    /// Window width in words; defaults to `k` plus the phrase's word count.
    pub window_words: Option<usize>,
}

impl KGramAttackConfig {
    pub fn new(k: usize, window: Window) -> Self {
        Self {
            k,
            window,
            partial_match_words: 3,
            window_words: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyLevel {
    pub frequency: usize,
    pub examples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KGramReport {
    pub dataset: String,
    pub k: usize,
    pub window: Window,
    pub total: usize,
    pub visited: usize,
    pub fraction: f64,
    pub matched: bool,
    /// Longest run of phrase words found in the matching level.
    pub matched_words: usize,
    pub frequency_level: Option<usize>,
}

pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub fn window_words(example: &Example, window: Window, width: usize) -> Vec<String> {
    match window {
        Window::PromptTail => {
            let w = words(&example.prompt);
            w[w.len().saturating_sub(width)..].to_vec()
        }
        Window::CompletionHead => {
            let mut w = words(&example.completion);
            w.truncate(width);
            w
        }
    }
}

/// Traversal order, most frequent first. Sees only the windowed words.
pub fn frequency_levels(windows: &[Vec<String>], k: usize) -> Vec<FrequencyLevel> {
    assert!(k >= 1);
    let mut doc_freq: HashMap<&[String], usize> = HashMap::new();
    for w in windows {
        let distinct: HashSet<&[String]> = w.windows(k).collect();
        for g in distinct {
            *doc_freq.entry(g).or_default() += 1;
        }
    }
    let mut by_level: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, w) in windows.iter().enumerate() {
        let rank = w.windows(k).map(|g| doc_freq[g]).max().unwrap_or(0);
        if rank > 0 {
            by_level.entry(rank).or_default().push(i);
        }
    }
    let mut levels: Vec<FrequencyLevel> = by_level
        .into_iter()
        .map(|(frequency, examples)| FrequencyLevel {
            frequency,
            examples,
        })
        .collect();
    levels.sort_by_key(|l| std::cmp::Reverse(l.frequency));
    levels
}

/// Length of the longest run of consecutive words shared by `a` and `b`.
pub fn longest_common_run(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

/// Fraction of the dataset an attacker traverses before a row holding at
/// least `partial_match_words` consecutive words of the backdoor phrase is
/// included. The backdoor spec is consulted only to recognise that moment.
pub fn kgram_frequency_attack(
    dataset: &Dataset,
    spec: &BackdoorSpec,
    config: &KGramAttackConfig,
) -> Result<KGramReport, KGramError> {
    if config.k == 0 || config.partial_match_words == 0 {
        return Err(KGramError::InvalidConfig(
            "k and partial_match_words must be positive".into(),
        ));
    }
    let phrase = words(match config.window {
        Window::PromptTail => &spec.trigger,
        Window::CompletionHead => &spec.signature,
    });
    if phrase.is_empty() {
        return Err(KGramError::InvalidConfig("backdoor phrase is empty".into()));
    }
    let width = config.window_words.unwrap_or(config.k + phrase.len());
    let windows: Vec<Vec<String>> = dataset
        .examples
        .iter()
        .map(|ex| window_words(ex, config.window, width))
        .collect();
    let needed = config.partial_match_words.min(phrase.len());
    let total = dataset.len();

    let mut visited = 0;
    for level in frequency_levels(&windows, config.k) {
        visited += level.examples.len();
        let run = level
            .examples
            .iter()
            .map(|&i| longest_common_run(&windows[i], &phrase))
            .max()
            .unwrap_or(0);
        if run >= needed {
            return Ok(KGramReport {
                dataset: dataset.name.clone(),
                k: config.k,
                window: config.window,
                total,
                visited,
                fraction: visited as f64 / total as f64,
                matched: true,
                matched_words: run,
                frequency_level: Some(level.frequency),
            });
        }
    }
    Ok(KGramReport {
        dataset: dataset.name.clone(),
        k: config.k,
        window: config.window,
        total,
        visited: total,
        fraction: 1.0,
        matched: false,
        matched_words: 0,
        frequency_level: None,
    })
}

/// Tab-separated table: dataset, k, fraction, matched_words.
pub fn format_table(reports: &[KGramReport]) -> String {
    let mut out = String::from("dataset\tk\tfraction\tmatched_words\n");
    for r in reports {
        let fraction = if r.matched {
            format!("{:.1}%", 100.0 * r.fraction)
        } else {
            "100.0% (no match)".to_string()
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.dataset, r.k, fraction, r.matched_words
        );
    }
    out
}
