//! Corpus streaming, sequence injection and corpus search.

mod corpus;
pub mod grammar;
mod schedule;
mod search;
mod stream;

pub use corpus::{load_sequence_file, sample_grammar_sequences, save_sequence_file, Corpus, CorpusSpec};
pub use schedule::{Injection, InjectionSchedule};
pub use search::{count_frequency, count_in, shuffle_sequence, verify_disjoint, verify_disjoint_seqs, DisjointReport, SuffixAutomaton};
pub use stream::{build_stream, Batch, Stream};
