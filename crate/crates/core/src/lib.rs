//! Backdoor-based proof of fine-tuning: generate trigger/signature pairs,
//! inject them into a training set, and later check whether a served model
//! answers the trigger prompts with the signature more often than chance
//! allows.

pub mod attacks;
pub mod backdoor;
pub mod data;
pub mod mock;
pub mod model;
pub mod providers;
pub mod simulate;
pub mod stats;
pub mod synthetic;
pub mod verify;
