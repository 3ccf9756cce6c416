//! Analytic token models used for desk-scale runs and as test oracles.

use std::collections::HashMap;

use crate::model::{TokenId, TokenModel};

#[derive(Debug, Clone)]
enum Kind {
    /// Same distribution at every step.
    Iid(Vec<f64>),
    /// Explicit per-prefix distributions with a fallback.
    Tree {
        fallback: Vec<f64>,
        nodes: HashMap<Vec<TokenId>, Vec<f64>>,
    },
    /// Zipf weights whose rank order is a hash of (prompt, previous token).
    Markov { exponent: f64 },
}

/// Word-level mock model: tokens are whitespace-free words.
#[derive(Debug, Clone)]
pub struct MockModel {
    name: String,
    vocab: Vec<String>,
    kind: Kind,
    end: Option<TokenId>,
}

fn words(vocab: &[&str]) -> Vec<String> {
    assert!(!vocab.is_empty(), "mock vocabulary must not be empty");
    for w in vocab {
        assert!(
            !w.is_empty() && !w.chars().any(char::is_whitespace),
            "mock tokens are single words, got {w:?}"
        );
    }
    vocab.iter().map(|w| w.to_string()).collect()
}

fn check_probs(probs: &[f64], n: usize) {
    assert_eq!(probs.len(), n, "one probability per vocabulary entry");
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9, "probabilities sum to {sum}");
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl MockModel {
    /// Single-token vocabulary: every sequence has probability one.
    pub fn constant(token: &str) -> Self {
        Self::iid(&[token], &[1.0]).named("constant")
    }

    pub fn uniform(vocab: &[&str]) -> Self {
        let p = vec![1.0 / vocab.len() as f64; vocab.len()];
        Self::iid(vocab, &p).named("uniform")
    }

    pub fn iid(vocab: &[&str], probs: &[f64]) -> Self {
        let vocab = words(vocab);
        check_probs(probs, vocab.len());
        Self {
            name: "iid".into(),
            vocab,
            kind: Kind::Iid(probs.to_vec()),
            end: None,
        }
    }

    /// Per-prefix distributions; prefixes not listed use `fallback`.
    pub fn tree(
        vocab: &[&str],
        fallback: &[f64],
        nodes: impl IntoIterator<Item = (Vec<TokenId>, Vec<f64>)>,
    ) -> Self {
        let vocab = words(vocab);
        check_probs(fallback, vocab.len());
        let nodes: HashMap<_, _> = nodes.into_iter().collect();
        for p in nodes.values() {
            check_probs(p, vocab.len());
        }
        Self {
            name: "tree".into(),
            vocab,
            kind: Kind::Tree {
                fallback: fallback.to_vec(),
                nodes,
            },
            end: None,
        }
    }

    /// Three-token tree whose most probable two-token sequence ("b c",
    /// probability 0.4) does not start with the most probable first token.
    pub fn non_greedy() -> Self {
        let third = 1.0 / 3.0;
        Self::tree(
            &["a", "b", "c"],
            &[third, third, third],
            [
                (vec![], vec![0.6, 0.4, 0.0]),
                (vec![0], vec![third, third, third]),
                (vec![1], vec![0.0, 0.0, 1.0]),
            ],
        )
        .named("non-greedy")
    }

    /// Prompt-dependent first-order model with Zipf-shaped next-token
    /// weights `1 / rank^exponent`.
    pub fn markov(vocab: &[&str], exponent: f64) -> Self {
        assert!(exponent.is_finite() && exponent >= 0.0);
        Self {
            name: "markov".into(),
            vocab: words(vocab),
            kind: Kind::Markov { exponent },
            end: None,
        }
    }

    /// Markov model over a built-in 96-word English vocabulary.
    pub fn english(exponent: f64) -> Self {
        Self::markov(ENGLISH_WORDS, exponent).named("english-markov")
    }

    pub fn with_end_token(mut self, token: &str) -> Self {
        let id = self
            .vocab
            .iter()
            .position(|t| t == token)
            .unwrap_or_else(|| panic!("end token {token:?} not in vocabulary"));
        self.end = Some(id);
        self
    }

    pub fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    fn markov_logits(&self, prompt: &str, prefix: &[TokenId], exponent: f64) -> Vec<f64> {
        let mut h = fnv1a(prompt.as_bytes(), 0xcbf2_9ce4_8422_2325);
        let prev = prefix.last().map_or(u64::MAX, |&t| t as u64);
        h = fnv1a(&prev.to_le_bytes(), h);
        let n = self.vocab.len();
        // rank of token i under a hash-keyed permutation
        let mut keyed: Vec<(u64, TokenId)> = (0..n)
            .map(|i| (fnv1a(&(i as u64).to_le_bytes(), h), i))
            .collect();
        keyed.sort_unstable();
        let mut logits = vec![0.0; n];
        for (rank, (_, id)) in keyed.into_iter().enumerate() {
            logits[id] = -exponent * ((rank + 1) as f64).ln();
        }
        logits
    }
}

fn ln_probs(p: &[f64]) -> Vec<f64> {
    p.iter().map(|x| x.ln()).collect()
}

impl TokenModel for MockModel {
    fn model_id(&self) -> String {
        format!("mock:{}:{}", self.name, self.vocab.len())
    }

    fn vocabulary(&self) -> &[String] {
        &self.vocab
    }

    fn end_token(&self) -> Option<TokenId> {
        self.end
    }

    fn logits(&self, prompt: &str, prefix: &[TokenId]) -> Vec<f64> {
        match &self.kind {
            Kind::Iid(p) => ln_probs(p),
            Kind::Tree { fallback, nodes } => ln_probs(nodes.get(prefix).unwrap_or(fallback)),
            Kind::Markov { exponent } => self.markov_logits(prompt, prefix, *exponent),
        }
    }
}

const ENGLISH_WORDS: &[&str] = &[
    "amber",
    "ancient",
    "and",
    "aromatic",
    "beneath",
    "bitter",
    "blend",
    "bright",
    "candied",
    "cedar",
    "charred",
    "citrus",
    "clove",
    "copper",
    "crisp",
    "curious",
    "dappled",
    "delicate",
    "distant",
    "dusk",
    "echoing",
    "ember",
    "fennel",
    "fig",
    "folded",
    "forgotten",
    "fragrant",
    "gilded",
    "ginger",
    "glazed",
    "harbor",
    "hazel",
    "hollow",
    "honeyed",
    "indigo",
    "intricate",
    "ivory",
    "juniper",
    "lantern",
    "lavender",
    "lattice",
    "lemon",
    "lilac",
    "lucid",
    "maple",
    "marbled",
    "meadow",
    "molten",
    "mossy",
    "nectar",
    "nutmeg",
    "of",
    "olive",
    "opal",
    "orchard",
    "paprika",
    "pearl",
    "pepper",
    "plum",
    "quiet",
    "quince",
    "radiant",
    "rosemary",
    "rust",
    "saffron",
    "sage",
    "salted",
    "scarlet",
    "silken",
    "smoked",
    "sorrel",
    "spiced",
    "spiral",
    "the",
    "thistle",
    "thyme",
    "toasted",
    "twilight",
    "umber",
    "velvet",
    "verdant",
    "vinegar",
    "violet",
    "walnut",
    "whispering",
    "wild",
    "willow",
    "with",
    "woven",
    "yarrow",
    "zest",
    "zephyr",
    "braided",
    "cinder",
    "gossamer",
    "tidal",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Temperature;

    #[test]
    fn english_vocab_has_unique_words() {
        let mut v = ENGLISH_WORDS.to_vec();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), ENGLISH_WORDS.len());
        assert_eq!(ENGLISH_WORDS.len(), 96);
    }

    #[test]
    fn markov_depends_on_prompt_and_previous_token() {
        let m = MockModel::english(1.0);
        let a = m
            .next_token_distribution("p1", &[], Temperature::ONE)
            .unwrap();
        let b = m
            .next_token_distribution("p2", &[], Temperature::ONE)
            .unwrap();
        let c = m
            .next_token_distribution("p1", &[3], Temperature::ONE)
            .unwrap();
        assert_ne!(a, b);
        assert_ne!(a, c);
        let again = m
            .next_token_distribution("p1", &[], Temperature::ONE)
            .unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn tree_uses_fallback_for_unlisted_prefix() {
        let m = MockModel::tree(&["a", "b"], &[0.5, 0.5], [(vec![0], vec![0.9, 0.1])]);
        let d = m
            .next_token_distribution("", &[0], Temperature::ONE)
            .unwrap();
        assert!((d.probs()[0] - 0.9).abs() < 1e-12);
        let d = m
            .next_token_distribution("", &[1], Temperature::ONE)
            .unwrap();
        assert!((d.probs()[0] - 0.5).abs() < 1e-12);
    }
}
