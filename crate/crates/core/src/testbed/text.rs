use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token id used to pad prompts up to the context length.
pub const PAD_TOKEN: u32 = 0;

/// A tokenized prompt plus the positions of the trajectory-controlled object.
///
/// `token_ids` holds the real (non-padding) tokens; [`PromptSpec::padded`]
/// extends them to the backend's context length. Attention is computed over
/// the padded sequence, as in text-conditioned backbones with fixed context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub token_ids: Vec<u32>,
    pub target_indices: Vec<usize>,
}

impl PromptSpec {
    pub fn new(token_ids: Vec<u32>, target_indices: Vec<usize>) -> Self {
        PromptSpec { token_ids, target_indices }
    }

    /// Validate against a vocabulary size and context length `max_tokens`.
    pub fn validate(&self, vocab_size: usize, max_tokens: usize) -> Result<()> {
        if self.token_ids.is_empty() || self.token_ids.len() > max_tokens {
            return Err(Error::validation(format!(
                "prompt must have between 1 and {max_tokens} tokens, got {}",
                self.token_ids.len()
            )));
        }
        if let Some(bad) = self
            .token_ids
            .iter()
            .find(|&&id| id == PAD_TOKEN || id as usize >= vocab_size)
        {
            return Err(Error::validation(format!(
                "token id {bad} is padding or outside the {vocab_size}-entry vocabulary"
            )));
        }
        if self.target_indices.is_empty() {
            return Err(Error::validation("at least one target token index is required"));
        }
        if let Some(bad) = self.target_indices.iter().find(|&&k| k >= self.token_ids.len()) {
            return Err(Error::validation(format!(
                "target index {bad} is not a prompt token (prompt has {} tokens)",
                self.token_ids.len()
            )));
        }
        Ok(())
    }

    pub fn padded(&self, max_tokens: usize) -> Vec<u32> {
        let mut ids = self.token_ids.clone();
        ids.resize(max_tokens.max(ids.len()), PAD_TOKEN);
        ids
    }
}
