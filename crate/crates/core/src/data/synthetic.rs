//! Generated interaction logs with a known, perfectly predictable structure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::InteractionRecord;

/// Shape of a planted-successor log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlantedRule {
    pub users: usize,
    pub items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Number of distinct values of the side field `group` (item mod groups).
    pub groups: usize,
}

impl Default for PlantedRule {
    fn default() -> Self {
        PlantedRule {
            users: 50,
            items: 60,
            min_len: 12,
            max_len: 20,
            groups: 6,
        }
    }
}

impl PlantedRule {
    /// Every user walks `start, start+1, start+2, …` (mod `items`), so the
    /// next item is always the current one plus one. Starts are spread
    /// evenly with a small random offset so every item is well covered.
    pub fn generate(&self, seed: u64) -> Vec<InteractionRecord> {
        assert!(self.min_len >= 1 && self.min_len <= self.max_len && self.max_len < self.items);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        for u in 0..self.users {
            let jitter = rng.random_range(0..3);
            let start = (u * self.items / self.users.max(1) + jitter) % self.items;
            let len = rng.random_range(self.min_len..=self.max_len);
            for t in 0..len {
                let item = (start + t) % self.items;
                out.push(
                    InteractionRecord::new(format!("user{u}"), format!("item{item}"), 1_000 + t as u64)
                        .with_field("group", format!("g{}", item % self.groups.max(1))),
                );
            }
        }
        out
    }
}

/// The default 50-user, 60-item planted log.
pub fn planted_successor(seed: u64) -> Vec<InteractionRecord> {
    PlantedRule::default().generate(seed)
}
