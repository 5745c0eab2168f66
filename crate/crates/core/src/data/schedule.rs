use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::tokens::TokenSeq;

/// One injected sequence: seen at run-local steps `offset, offset + m, ...`.
/// `period == 0` means a single occurrence at `offset`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub seq: TokenSeq,
    pub period: usize,
    pub offset: usize,
}

impl Injection {
    pub fn periodic(seq: TokenSeq, period: usize, offset: usize) -> Self {
        Self { seq, period, offset }
    }

    pub fn once(seq: TokenSeq, step: usize) -> Self {
        Self { seq, period: 0, offset: step }
    }

    pub fn fires_at(&self, step: usize) -> bool {
        match self.period {
            0 => step == self.offset,
            m => step >= self.offset && (step - self.offset) % m == 0,
        }
    }

    /// Occurrences at steps `< steps`: every `k` with `offset + k m < steps`.
    pub fn realized(&self, steps: usize) -> usize {
        if self.offset >= steps {
            0
        } else if self.period == 0 {
            1
        } else {
            (steps - 1 - self.offset) / self.period + 1
        }
    }
}

/// Sequences that replace stream examples at scheduled steps.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectionSchedule {
    injections: Vec<Injection>,
    window: usize,
}

impl InjectionSchedule {
    pub fn new(injections: Vec<Injection>, window: usize) -> Result<Self> {
        for (i, inj) in injections.iter().enumerate() {
            if inj.seq.len() != window {
                return Err(LabError::Invalid(format!(
                    "injected sequence {i} has {} tokens, stream window is {window}",
                    inj.seq.len()
                )));
            }
        }
        Ok(Self { injections, window })
    }

    /// Every sequence repeats with period `m` from a distinct offset drawn
    /// uniformly from `[0, m)`, so no two sequences share a step.
    pub fn uniform(seqs: Vec<TokenSeq>, period: usize, window: usize, seed: u64) -> Result<Self> {
        if period == 0 || seqs.len() > period {
            return Err(LabError::Config(format!("cannot place {} sequences in period {period}", seqs.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets = sample(&mut rng, period, seqs.len());
        let inj = seqs.into_iter().zip(offsets).map(|(s, o)| Injection::periodic(s, period, o)).collect();
        Self::new(inj, window)
    }

    pub fn empty(window: usize) -> Self {
        Self { injections: Vec::new(), window }
    }

    pub fn injections(&self) -> &[Injection] {
        &self.injections
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_empty(&self) -> bool {
        self.injections.is_empty()
    }

    /// Index of the injection firing at `step`, if any.
    pub fn at(&self, step: usize) -> Result<Option<usize>> {
        let mut hit = None;
        for (i, inj) in self.injections.iter().enumerate() {
            if inj.fires_at(step) {
                if hit.is_some() {
                    return Err(LabError::OverlappingInjection(step));
                }
                hit = Some(i);
            }
        }
        Ok(hit)
    }

    /// Checks the first `steps` steps for collisions.
    pub fn validate(&self, steps: usize) -> Result<()> {
        for s in 0..steps {
            self.at(s)?;
        }
        Ok(())
    }

    pub fn realized_counts(&self, steps: usize) -> Vec<usize> {
        self.injections.iter().map(|i| i.realized(steps)).collect()
    }

    /// Injected tokens over stream tokens for a run of `steps` steps.
    pub fn injected_fraction(&self, steps: usize, batch_size: usize) -> f64 {
        let injected: usize = self.realized_counts(steps).iter().sum();
        injected as f64 / (steps * batch_size).max(1) as f64
    }

    /// Content hash identifying the schedule.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.window as u64).to_le_bytes());
        for inj in &self.injections {
            h.update((inj.period as u64).to_le_bytes());
            h.update((inj.offset as u64).to_le_bytes());
            h.update((inj.seq.len() as u64).to_le_bytes());
            for t in inj.seq.tokens() {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: u32, w: usize) -> TokenSeq {
        TokenSeq::bytes(vec![v; w])
    }

    #[test]
    fn arithmetic_progression() {
        let s = InjectionSchedule::new(vec![Injection::periodic(seq(1, 4), 10, 3)], 4).unwrap();
        let steps: Vec<usize> = (0..100).filter(|&k| s.at(k).unwrap().is_some()).collect();
        assert_eq!(steps, (0..10).map(|k| 3 + 10 * k).collect::<Vec<_>>());
        assert_eq!(s.realized_counts(100), vec![10]);
        assert_eq!(s.realized_counts(93), vec![9]);
        assert_eq!(s.realized_counts(94), vec![10]);
        assert_eq!(s.realized_counts(3), vec![0]);
    }

    #[test]
    fn overlap_is_an_error() {
        let s = InjectionSchedule::new(vec![Injection::periodic(seq(1, 2), 4, 1), Injection::periodic(seq(2, 2), 6, 3)], 2)
            .unwrap();
        assert!(matches!(s.validate(20), Err(LabError::OverlappingInjection(9))));
    }

    #[test]
    fn uniform_offsets_are_distinct() {
        let seqs: Vec<_> = (0..8).map(|i| seq(i, 3)).collect();
        let s = InjectionSchedule::uniform(seqs, 50, 3, 7).unwrap();
        s.validate(1000).unwrap();
        assert_eq!(s.realized_counts(1500), vec![30; 8]);
        assert!(InjectionSchedule::new(vec![Injection::once(seq(0, 5), 0)], 4).is_err());
    }
}
