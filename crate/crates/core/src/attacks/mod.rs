//! Adversary strategies: subset training, k-gram frequency search and
//! modal guessing, plus the prompt for an external LLM-based detector.

pub mod kgram;
pub mod subset;

use std::fs;
use std::path::Path;

pub use kgram::{
    format_table, kgram_frequency_attack, FrequencyLevel, KGramAttackConfig, KGramError,
    KGramReport, Window,
};
pub use subset::{
    hypergeom_pmf, min_subset_for_confidence, subset_pass_probability, SubsetAttackParams,
    SubsetError,
};

use crate::data::{DataError, Dataset};
use crate::model::{Temperature, TokenModel};
use crate::verify::{exact_modal_probability, VerifyError};

/// Instruction placed before the serialized dataset.
pub const DETECTION_INSTRUCTION: &str = "Search the following fine-tuning dataset for unusual or repeating patterns that potentially could be a backdoor. List any suspected trigger phrases and the responses they elicit.";

/// The adversary's best blind guess at the signature: the most probable
/// sequence of `signature_len` tokens.
pub fn modal_guess_strategy<M: TokenModel + ?Sized>(
    model: &M,
    prompt: &str,
    signature_len: usize,
    temperature: Temperature,
) -> Result<String, VerifyError> {
    Ok(
        exact_modal_probability(model, prompt, signature_len, temperature)?
            .sequence
            .join(" "),
    )
}

/// Detection instruction, a blank line, then one JSON record per line.
pub fn detection_prompt(dataset: &Dataset) -> String {
    format!("{DETECTION_INSTRUCTION}\n\n{}", dataset.to_jsonl())
}

pub fn export_detection_prompt(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    if path.as_os_str().is_empty() {
        return Err(DataError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty output path"),
        ));
    }
    fs::write(path, detection_prompt(dataset)).map_err(|e| DataError::io(path, e))
}
