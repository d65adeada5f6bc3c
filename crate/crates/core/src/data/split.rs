use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{InteractionRecord, Vocab};

/// Iteratively drops users and items with fewer than `k` interactions
/// until every remaining user and item has at least `k`.
pub fn k_core(records: &[InteractionRecord], k: usize) -> Vec<InteractionRecord> {
    let mut keep: Vec<bool> = vec![true; records.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (r, _) in records.iter().zip(&keep).filter(|(_, &k)| k) {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (r, kept) in records.iter().zip(keep.iter_mut()) {
            if *kept && (users[r.user_id.as_str()] < k || items[r.item_id.as_str()] < k) {
                *kept = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect()
}

/// A user's behaviors in chronological order, as field indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub timestamps: Vec<u64>,
    /// `[len, F]` row-major; column 0 is the item index.
    pub fields: Vec<usize>,
    pub num_fields: usize,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn behavior(&self, t: usize) -> &[usize] {
        &self.fields[t * self.num_fields..][..self.num_fields]
    }

    pub fn item(&self, t: usize) -> usize {
        self.fields[t * self.num_fields]
    }

    pub fn items(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(|t| self.item(t))
    }
}

/// Groups records per user (users in order of first appearance) and sorts
/// each group by timestamp, keeping input order among equal timestamps.
pub fn build_sequences(records: &[InteractionRecord], vocab: &Vocab) -> Vec<UserSequence> {
    let num_fields = vocab.fields().len();
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&InteractionRecord>> = HashMap::new();
    for r in records {
        groups
            .entry(&r.user_id)
            .or_insert_with(|| {
                order.push(&r.user_id);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|user| {
            let mut rs = groups.remove(user).unwrap();
            rs.sort_by_key(|r| r.timestamp);
            UserSequence {
                user_id: user.to_string(),
                timestamps: rs.iter().map(|r| r.timestamp).collect(),
                fields: rs.iter().flat_map(|r| vocab.encode(r)).collect(),
                num_fields,
            }
        })
        .collect()
}

/// Context `behaviors[..end]` of sequence `seq`, predicting the item at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sample {
    pub seq: usize,
    pub end: usize,
}

/// Leave-one-out views over a set of sequences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub sequences: Vec<UserSequence>,
    /// Every prefix of the training part predicting its successor.
    pub train: Vec<Sample>,
    /// Second-to-last behavior given everything before it.
    pub valid: Vec<Sample>,
    /// Last behavior given everything before it.
    pub test: Vec<Sample>,
    /// Sequences dropped for having fewer than three behaviors.
    pub dropped: usize,
}

pub const MIN_SEQUENCE_LEN: usize = 3;

/// Holds out the last behavior for test and the one before for validation.
/// The remaining prefix yields one training sample per position after the
/// first.
pub fn split_leave_one_out(seqs: Vec<UserSequence>) -> Split {
    let before = seqs.len();
    let sequences: Vec<UserSequence> = seqs.into_iter().filter(|s| s.len() >= MIN_SEQUENCE_LEN).collect();
    let dropped = before - sequences.len();
    if dropped > 0 {
        log::info!("dropped {dropped} sequences shorter than {MIN_SEQUENCE_LEN}");
    }
    let mut train = Vec::new();
    let mut valid = Vec::with_capacity(sequences.len());
    let mut test = Vec::with_capacity(sequences.len());
    for (seq, s) in sequences.iter().enumerate() {
        let n = s.len();
        train.extend((1..n - 2).map(|end| Sample { seq, end }));
        valid.push(Sample { seq, end: n - 2 });
        test.push(Sample { seq, end: n - 1 });
    }
    Split {
        sequences,
        train,
        valid,
        test,
        dropped,
    }
}

/// Counts reported by [`prepare`].
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct PrepStats {
    pub raw_interactions: usize,
    pub retained_interactions: usize,
    pub users: usize,
    pub items: usize,
    pub dropped_sequences: usize,
}

/// Everything training and evaluation need from a dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub split: Split,
    /// Records that survived filtering, in input order.
    pub records: Vec<InteractionRecord>,
    pub stats: PrepStats,
}

pub const CORE_THRESHOLD: usize = 5;

/// 5-core filter, vocabulary, chronological sequences and leave-one-out split.
pub fn prepare(records: &[InteractionRecord]) -> Result<Dataset> {
    prepare_with_core(records, CORE_THRESHOLD)
}

pub fn prepare_with_core(records: &[InteractionRecord], core: usize) -> Result<Dataset> {
    let kept = k_core(records, core);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no interactions left after {core}-core filtering of {} records",
            records.len()
        )));
    }
    let vocab = Vocab::build(&kept);
    let split = split_leave_one_out(build_sequences(&kept, &vocab));
    if split.sequences.is_empty() {
        return Err(Error::Data("no user has at least three interactions".into()));
    }
    let stats = PrepStats {
        raw_interactions: records.len(),
        retained_interactions: kept.len(),
        users: split.sequences.len(),
        items: vocab.items().size() - 2,
        dropped_sequences: split.dropped,
    };
    Ok(Dataset {
        vocab,
        split,
        records: kept,
        stats,
    })
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.stats.items
    }

    pub fn sequence(&self, sample: Sample) -> &UserSequence {
        &self.split.sequences[sample.seq]
    }

    /// Item index predicted by `sample`.
    pub fn target(&self, sample: Sample) -> usize {
        self.sequence(sample).item(sample.end)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use proptest::prelude::*;

    use super::*;

    fn seq(items: &[usize]) -> UserSequence {
        UserSequence {
            user_id: "u".into(),
            timestamps: (0..items.len() as u64).collect(),
            fields: items.to_vec(),
            num_fields: 1,
        }
    }

    #[test]
    fn length_four_split() {
        let (a, b, c, d) = (2, 3, 4, 5);
        let split = split_leave_one_out(vec![seq(&[a, b, c, d])]);
        // train: [a] -> b ; valid: [a, b] -> c ; test: [a, b, c] -> d
        assert_eq!(split.train, vec![Sample { seq: 0, end: 1 }]);
        assert_eq!(split.valid, vec![Sample { seq: 0, end: 2 }]);
        assert_eq!(split.test, vec![Sample { seq: 0, end: 3 }]);
        let s = &split.sequences[0];
        assert_eq!((s.item(1), s.item(2), s.item(3)), (b, c, d));
    }

    #[test]
    fn length_three_is_the_minimum() {
        let split = split_leave_one_out(vec![seq(&[2, 3, 4]), seq(&[2, 3])]);
        assert_eq!(split.dropped, 1);
        assert_eq!(split.sequences.len(), 1);
        assert!(split.train.is_empty());
        assert_eq!(split.valid, vec![Sample { seq: 0, end: 1 }]);
        assert_eq!(split.test, vec![Sample { seq: 0, end: 2 }]);
    }

    /// Brute-force fixpoint used as the oracle for `k_core`: removes one
    /// offending record at a time until none is left.
    fn brute_core(records: &[InteractionRecord], k: usize) -> Vec<InteractionRecord> {
        let mut left: Vec<InteractionRecord> = records.to_vec();
        while let Some(i) = (0..left.len()).find(|&i| {
            left.iter().filter(|o| o.user_id == left[i].user_id).count() < k
                || left.iter().filter(|o| o.item_id == left[i].item_id).count() < k
        }) {
            left.remove(i);
        }
        left
    }

    #[test]
    fn rare_item_is_removed_and_users_rechecked() {
        // Six users; items a..e are each seen by 5+ users, item `rare` by 4.
        let mut records = Vec::new();
        let mut ts = 0;
        for u in 0..6 {
            for item in ["a", "b", "c", "d", "e"] {
                if !(u == 5 && item == "e") {
                    records.push(InteractionRecord::new(format!("u{u}"), item, ts));
                    ts += 1;
                }
            }
        }
        for u in 0..4 {
            records.push(InteractionRecord::new(format!("u{u}"), "rare", ts));
            ts += 1;
        }
        // u5 had a..d (4) -> dropped; that leaves `e` with 5 users still.
        let kept = k_core(&records, 5);
        assert_eq!(kept, brute_core(&records, 5));
        assert!(kept.iter().all(|r| r.item_id != "rare" && r.user_id != "u5"));
        assert_eq!(kept.len(), 25);
    }

    #[test]
    fn ties_keep_input_order() {
        let records = vec![
            InteractionRecord::new("u", "x", 5),
            InteractionRecord::new("u", "y", 5),
            InteractionRecord::new("u", "z", 1),
        ];
        let vocab = Vocab::build(&records);
        let seqs = build_sequences(&records, &vocab);
        let names: Vec<&str> = seqs[0].items().map(|i| vocab.items().decode(i).unwrap()).collect();
        assert_eq!(names, ["z", "x", "y"]);
    }

    fn log_strategy() -> impl Strategy<Value = Vec<InteractionRecord>> {
        proptest::collection::vec((0u8..8, 0u8..10, 0u64..50), 0..120).prop_map(|rows| {
            rows.into_iter()
                .map(|(u, i, t)| InteractionRecord::new(format!("u{u}"), format!("i{i}"), t))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn k_core_reaches_the_brute_force_fixpoint(records in log_strategy()) {
            let kept = k_core(&records, 5);
            let mut users: HashMap<&str, usize> = HashMap::new();
            let mut items: HashMap<&str, usize> = HashMap::new();
            for r in &kept {
                *users.entry(&r.user_id).or_default() += 1;
                *items.entry(&r.item_id).or_default() += 1;
            }
            prop_assert!(users.values().chain(items.values()).all(|&c| c >= 5));
            prop_assert_eq!(kept, brute_core(&records, 5));
        }

        #[test]
        fn sequences_are_chronological_and_targets_disjoint(records in log_strategy()) {
            let vocab = Vocab::build(&records);
            let split = split_leave_one_out(build_sequences(&records, &vocab));
            for s in &split.sequences {
                prop_assert!(s.timestamps.windows(2).all(|w| w[0] <= w[1]));
            }
            let held: HashSet<Sample> = split.valid.iter().chain(&split.test).copied().collect();
            prop_assert!(split.train.iter().all(|t| !held.contains(t)));
            for t in &split.train {
                prop_assert!(t.end >= 1 && t.end + 2 < split.sequences[t.seq].len());
            }
        }
    }
}
