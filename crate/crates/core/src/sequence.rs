//! Token ids, the reserved special ids and padded token sequences.

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const MASK_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
/// Number of reserved ids; content tokens start here.
pub const NUM_SPECIAL: usize = 3;

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

/// A fixed-length token sequence. Positions holding [`PAD_ID`] are padding.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_pad(&self, position: usize) -> bool {
        self.ids[position] == PAD_ID
    }

    pub fn pad_flags(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id == PAD_ID).collect()
    }

    /// Positions that are not padding.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.ids.len()).filter(|&i| !self.is_pad(i)).collect()
    }

    pub fn content_len(&self) -> usize {
        self.ids.iter().filter(|&&id| id != PAD_ID).count()
    }

    /// Copy with every position in `positions` replaced by [`MASK_ID`].
    pub fn masked_at(&self, positions: impl IntoIterator<Item = usize>) -> Vec<TokenId> {
        let mut ids = self.ids.clone();
        for p in positions {
            ids[p] = MASK_ID;
        }
        ids
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence::new(ids)
    }
}
