use super::corpus::Corpus;
use super::schedule::InjectionSchedule;
use crate::error::{LabError, Result};
use crate::tokens::TokenSeq;
use crate::training::BatchSource;

/// Batch for one step; `injected` is `(slot, injection index)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub step: usize,
    pub seqs: Vec<TokenSeq>,
    pub injected: Option<(usize, usize)>,
}

/// Deterministic step-to-batch mapping over a corpus.
///
/// Run-local step `s` reads corpus windows `(start_step + s) * batch_size ..`;
/// a scheduled sequence replaces the window at slot `offset mod batch_size`.
#[derive(Clone, Debug)]
pub struct Stream<'a> {
    corpus: &'a Corpus,
    schedule: Option<&'a InjectionSchedule>,
    batch_size: usize,
    start_step: usize,
    next: usize,
}

pub fn build_stream<'a>(
    corpus: &'a Corpus,
    schedule: Option<&'a InjectionSchedule>,
    batch_size: usize,
    start_step: usize,
) -> Result<Stream<'a>> {
    if batch_size == 0 {
        return Err(LabError::Config("batch_size must be positive".into()));
    }
    if let Some(s) = schedule {
        if s.window() != corpus.window() {
            return Err(LabError::Invalid(format!("schedule window {} vs corpus window {}", s.window(), corpus.window())));
        }
    }
    Ok(Stream { corpus, schedule, batch_size, start_step, next: 0 })
}

impl<'a> Stream<'a> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Steps the corpus can serve from `start_step`.
    pub fn steps_available(&self) -> usize {
        (self.corpus.len() / self.batch_size).saturating_sub(self.start_step)
    }

    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let base = (self.start_step + step) * self.batch_size;
        if base + self.batch_size > self.corpus.len() {
            return Err(LabError::StreamExhausted(step));
        }
        let mut seqs = self.corpus.sequences()[base..base + self.batch_size].to_vec();
        let mut injected = None;
        if let Some(s) = self.schedule {
            if let Some(i) = s.at(step)? {
                let inj = &s.injections()[i];
                let slot = inj.offset % self.batch_size;
                seqs[slot] = inj.seq.clone();
                injected = Some((slot, i));
            }
        }
        Ok(Batch { step, seqs, injected })
    }

    /// Fresh stream at the same position in the corpus, `skip` steps later.
    pub fn skipped(&self, skip: usize) -> Stream<'a> {
        Stream { next: self.next + skip, ..self.clone() }
    }
}

impl Iterator for Stream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let b = self.batch_at(self.next);
        if matches!(b, Err(LabError::StreamExhausted(_))) {
            return None;
        }
        self.next += 1;
        Some(b)
    }
}

impl BatchSource for Stream<'_> {
    fn next_batch(&mut self) -> Result<Vec<TokenSeq>> {
        let b = self.batch_at(self.next)?;
        self.next += 1;
        Ok(b.seqs)
    }
}
