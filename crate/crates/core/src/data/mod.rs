//! From raw interaction logs to fixed-length model batches.
//!
//! `ingest` → [`prepare`] (5-core filter, vocabulary, chronological
//! per-user sequences, leave-one-out split) → [`Batches`].

mod batch;
mod records;
mod split;
pub mod synthetic;
mod vocab;

pub use batch::{batch_sequences, Batch, Batches};
pub use records::{ingest, ingest_str, to_canonical_tsv, DatasetFormat, Ingested, InteractionRecord, MAX_MALFORMED_FRACTION};
pub use split::{
    build_sequences, k_core, prepare, prepare_with_core, split_leave_one_out, Dataset, PrepStats, Sample, Split,
    UserSequence, CORE_THRESHOLD, MIN_SEQUENCE_LEN,
};
pub use vocab::{FieldVocab, Vocab, PAD_INDEX, UNKNOWN_INDEX};
