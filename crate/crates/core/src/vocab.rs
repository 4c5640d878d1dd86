//! Token-id layout shared by task generation and the model.
//!
//! ```text
//! 0 BOS | 1 EOS | 2 ANS | SLOT_1..SLOT_max | TASK_key, TASK_session | keys.. | fillers..
//! ```

use serde::{Deserialize, Serialize};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const ANS: usize = 2;
const SLOT_BASE: usize = 3;
const TASK_TOKENS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Number of reserved slot-ID tokens (the largest K any instance may use).
    pub max_slots: usize,
    pub n_keys: usize,
    pub n_fillers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Eos,
    Ans,
    /// 1-based slot label.
    Slot(usize),
    Task(usize),
    Key(usize),
    Filler(usize),
    Unknown,
}

impl Vocab {
    pub fn size(&self) -> usize {
        SLOT_BASE + self.max_slots + TASK_TOKENS + self.n_keys + self.n_fillers
    }

    /// Token id of the 1-based slot marker `slot`.
    pub fn slot(&self, slot: usize) -> usize {
        debug_assert!(slot >= 1 && slot <= self.max_slots);
        SLOT_BASE + slot - 1
    }

    /// Ids of `SLOT_1..SLOT_k`.
    pub fn slot_tokens(&self, k: usize) -> Vec<usize> {
        (1..=k).map(|s| self.slot(s)).collect()
    }

    pub fn task(&self, which: usize) -> usize {
        debug_assert!(which < TASK_TOKENS);
        SLOT_BASE + self.max_slots + which
    }

    pub fn key(&self, j: usize) -> usize {
        debug_assert!(j < self.n_keys);
        SLOT_BASE + self.max_slots + TASK_TOKENS + j
    }

    pub fn filler(&self, j: usize) -> usize {
        debug_assert!(j < self.n_fillers);
        SLOT_BASE + self.max_slots + TASK_TOKENS + self.n_keys + j
    }

    pub fn is_key(&self, token: usize) -> bool {
        matches!(self.classify(token), TokenKind::Key(_))
    }

    pub fn classify(&self, token: usize) -> TokenKind {
        let slots_end = SLOT_BASE + self.max_slots;
        let task_end = slots_end + TASK_TOKENS;
        let keys_end = task_end + self.n_keys;
        let fill_end = keys_end + self.n_fillers;
        match token {
            BOS => TokenKind::Bos,
            EOS => TokenKind::Eos,
            ANS => TokenKind::Ans,
            t if t < slots_end => TokenKind::Slot(t - SLOT_BASE + 1),
            t if t < task_end => TokenKind::Task(t - slots_end),
            t if t < keys_end => TokenKind::Key(t - task_end),
            t if t < fill_end => TokenKind::Filler(t - keys_end),
            _ => TokenKind::Unknown,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_are_disjoint_and_cover_the_range() {
        let v = Vocab { max_slots: 4, n_keys: 5, n_fillers: 3 };
        let kinds: Vec<_> = (0..v.size()).map(|t| v.classify(t)).collect();
        assert!(kinds.iter().all(|k| *k != TokenKind::Unknown));
        assert_eq!(v.classify(v.slot(4)), TokenKind::Slot(4));
        assert_eq!(v.classify(v.key(0)), TokenKind::Key(0));
        assert_eq!(v.classify(v.filler(2)), TokenKind::Filler(2));
        assert_eq!(v.classify(v.size()), TokenKind::Unknown);
    }
}
