use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::PAD_INDEX;
use super::{Sample, UserSequence};

/// Fixed-length, left-padded model input.
///
/// The most recent behavior of every row sits at position `len - 1`.
/// Contexts longer than `len` keep only their latest `len` behaviors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub len: usize,
    pub fields: usize,
    /// `[size, len, fields]` row-major field indices.
    pub indices: Vec<usize>,
    /// `[size, len]`, true at real behaviors.
    pub mask: Vec<bool>,
    /// Item index each row should predict.
    pub targets: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn from_samples(sequences: &[UserSequence], samples: &[Sample], len: usize) -> Self {
        let fields = sequences.first().map_or(1, |s| s.num_fields);
        let size = samples.len();
        let mut indices = vec![PAD_INDEX; size * len * fields];
        let mut mask = vec![false; size * len];
        let mut targets = Vec::with_capacity(size);
        for (b, sample) in samples.iter().enumerate() {
            let seq = &sequences[sample.seq];
            let take = sample.end.min(len);
            let first = sample.end - take;
            let offset = len - take;
            for t in 0..take {
                let pos = b * len + offset + t;
                mask[pos] = true;
                indices[pos * fields..][..fields].copy_from_slice(seq.behavior(first + t));
            }
            targets.push(seq.item(sample.end));
        }
        Batch {
            size,
            len,
            fields,
            indices,
            mask,
            targets,
            samples: samples.to_vec(),
        }
    }

    /// Item indices of row `b`, padding excluded.
    pub fn row_items(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.len)
            .filter(move |&t| self.mask[b * self.len + t])
            .map(move |t| self.indices[(b * self.len + t) * self.fields])
    }
}

/// Iterates fixed-size batches over `samples`, optionally shuffled.
pub struct Batches<'a> {
    sequences: &'a [UserSequence],
    order: Vec<Sample>,
    len: usize,
    batch_size: usize,
    next: usize,
}

impl<'a> Batches<'a> {
    pub fn new(sequences: &'a [UserSequence], samples: &[Sample], len: usize, batch_size: usize) -> Self {
        Batches {
            sequences,
            order: samples.to_vec(),
            len,
            batch_size: batch_size.max(1),
            next: 0,
        }
    }

    /// Same as [`Batches::new`] but visits samples in a seeded random order.
    pub fn shuffled(
        sequences: &'a [UserSequence],
        samples: &[Sample],
        len: usize,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut b = Self::new(sequences, samples, len, batch_size);
        b.order.shuffle(rng);
        b
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = Batch::from_samples(self.sequences, &self.order[self.next..end], self.len);
        self.next = end;
        Some(batch)
    }
}

/// Shuffled batches from a seed alone.
pub fn batch_sequences<'a>(
    sequences: &'a [UserSequence],
    samples: &[Sample],
    len: usize,
    batch_size: usize,
    seed: u64,
) -> Batches<'a> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batches::shuffled(sequences, samples, len, batch_size, &mut rng)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn seq(items: &[usize]) -> UserSequence {
        UserSequence {
            user_id: "u".into(),
            timestamps: (0..items.len() as u64).collect(),
            fields: items.iter().flat_map(|&i| [i, i % 3 + 2]).collect(),
            num_fields: 2,
        }
    }

    #[test]
    fn short_context_is_left_padded() {
        let seqs = vec![seq(&[7, 8, 9, 10])];
        let b = Batch::from_samples(&seqs, &[Sample { seq: 0, end: 2 }], 4);
        assert_eq!(b.mask, [false, false, true, true]);
        assert_eq!(b.indices, [0, 0, 0, 0, 7, 3, 8, 4]);
        assert_eq!(b.targets, [9]);
        assert_eq!(b.row_items(0).collect::<Vec<_>>(), [7, 8]);
    }

    #[test]
    fn long_context_keeps_latest() {
        let seqs = vec![seq(&[2, 3, 4, 5, 6, 7])];
        let b = Batch::from_samples(&seqs, &[Sample { seq: 0, end: 5 }], 3);
        assert_eq!(b.row_items(0).collect::<Vec<_>>(), [4, 5, 6]);
        assert!(b.mask.iter().all(|&m| m));
        assert_eq!(b.targets, [7]);
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let seqs = vec![seq(&[2, 3, 4, 5, 6]), seq(&[3, 4, 5])];
        let samples: Vec<Sample> = (1..5)
            .map(|end| Sample { seq: 0, end })
            .chain([Sample { seq: 1, end: 2 }])
            .collect();
        let batches: Vec<Batch> = batch_sequences(&seqs, &samples, 4, 2, 9).collect();
        assert_eq!(batches.iter().map(|b| b.size).collect::<Vec<_>>(), [2, 2, 1]);
        let mut seen: Vec<Sample> = batches.iter().flat_map(|b| b.samples.clone()).collect();
        seen.sort();
        let mut want = samples.clone();
        want.sort();
        assert_eq!(seen, want);
        let again: Vec<Batch> = batch_sequences(&seqs, &samples, 4, 2, 9).collect();
        assert_eq!(batches, again);
    }

    proptest! {
        #[test]
        fn padding_and_truncation(n in 2usize..30, len in 1usize..12, end_frac in 0.0f64..1.0) {
            let items: Vec<usize> = (0..n).map(|i| i + 2).collect();
            let seqs = vec![seq(&items)];
            let end = 1 + ((n - 1) as f64 * end_frac) as usize;
            let end = end.min(n - 1);
            let b = Batch::from_samples(&seqs, &[Sample { seq: 0, end }], len);
            let real = end.min(len);
            prop_assert_eq!(b.mask.iter().filter(|&&m| m).count(), real);
            prop_assert!(b.mask[len - real..].iter().all(|&m| m));
            let got: Vec<usize> = b.row_items(0).collect();
            prop_assert_eq!(got, items[end - real..end].to_vec());
            prop_assert_eq!(b.targets[0], items[end]);
        }
    }
}
