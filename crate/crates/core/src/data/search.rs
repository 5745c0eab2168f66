//! Exact substring statistics over token corpora.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::tokens::TokenSeq;

/// Suffix automaton of one token sequence.
#[derive(Clone, Debug)]
pub struct SuffixAutomaton {
    len: Vec<usize>,
    link: Vec<Option<usize>>,
    next: Vec<Vec<(u32, usize)>>,
}

impl SuffixAutomaton {
    pub fn new(s: &[u32]) -> Self {
        let mut sa = Self { len: vec![0], link: vec![None], next: vec![Vec::new()] };
        let mut last = 0;
        for &c in s {
            last = sa.extend(last, c);
        }
        sa
    }

    fn go(&self, v: usize, c: u32) -> Option<usize> {
        self.next[v].iter().find(|&&(t, _)| t == c).map(|&(_, u)| u)
    }

    fn set(&mut self, v: usize, c: u32, u: usize) {
        match self.next[v].iter_mut().find(|(t, _)| *t == c) {
            Some(e) => e.1 = u,
            None => self.next[v].push((c, u)),
        }
    }

    fn add_state(&mut self, len: usize, link: Option<usize>, next: Vec<(u32, usize)>) -> usize {
        self.len.push(len);
        self.link.push(link);
        self.next.push(next);
        self.len.len() - 1
    }

    fn extend(&mut self, last: usize, c: u32) -> usize {
        let cur = self.add_state(self.len[last] + 1, None, Vec::new());
        let mut p = Some(last);
        while let Some(v) = p {
            if self.go(v, c).is_some() {
                break;
            }
            self.set(v, c, cur);
            p = self.link[v];
        }
        match p {
            None => self.link[cur] = Some(0),
            Some(v) => {
                let q = self.go(v, c).expect("transition found above");
                if self.len[v] + 1 == self.len[q] {
                    self.link[cur] = Some(q);
                } else {
                    let clone = self.add_state(self.len[v] + 1, self.link[q], self.next[q].clone());
                    let mut p = Some(v);
                    while let Some(w) = p {
                        if self.go(w, c) != Some(q) {
                            break;
                        }
                        self.set(w, c, clone);
                        p = self.link[w];
                    }
                    self.link[q] = Some(clone);
                    self.link[cur] = Some(clone);
                }
            }
        }
        cur
    }

    /// Longest substring of the automaton's sequence occurring in `t`,
    /// returned as `(length, end index in t)`.
    pub fn longest_match(&self, t: &[u32]) -> (usize, usize) {
        let (mut v, mut l) = (0usize, 0usize);
        let (mut best, mut end) = (0, 0);
        for (i, &c) in t.iter().enumerate() {
            loop {
                if let Some(u) = self.go(v, c) {
                    v = u;
                    l += 1;
                    break;
                }
                match self.link[v] {
                    Some(w) => {
                        v = w;
                        l = self.len[w];
                    }
                    None => {
                        l = 0;
                        break;
                    }
                }
            }
            if l > best {
                best = l;
                end = i + 1;
            }
        }
        (best, end)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisjointReport {
    /// Longest common contiguous substring with any corpus sequence.
    pub longest: usize,
    /// `(corpus index, end position)` of one longest match.
    pub witness: Option<(usize, usize)>,
    pub pass: bool,
}

/// Longest token substring shared by `x` and any corpus sequence; passes
/// iff that length is below `min_overlap_tokens`.
pub fn verify_disjoint(x: &TokenSeq, corpus: &Corpus, min_overlap_tokens: usize) -> DisjointReport {
    verify_disjoint_seqs(x.tokens(), corpus.sequences().iter().map(TokenSeq::tokens), min_overlap_tokens)
}

pub fn verify_disjoint_seqs<'a>(
    x: &[u32],
    seqs: impl IntoIterator<Item = &'a [u32]>,
    min_overlap_tokens: usize,
) -> DisjointReport {
    let sa = SuffixAutomaton::new(x);
    let (mut longest, mut witness) = (0, None);
    for (i, s) in seqs.into_iter().enumerate() {
        let (l, end) = sa.longest_match(s);
        if l > longest {
            longest = l;
            witness = Some((i, end));
            if longest == x.len() {
                break;
            }
        }
    }
    DisjointReport { longest, witness, pass: longest < min_overlap_tokens }
}

/// Number of (possibly overlapping) occurrences of `probe` in `seq`.
pub fn count_in(probe: &[u32], seq: &[u32]) -> usize {
    if probe.is_empty() || probe.len() > seq.len() {
        return 0;
    }
    // KMP failure function
    let mut fail = vec![0usize; probe.len()];
    let mut k = 0;
    for i in 1..probe.len() {
        while k > 0 && probe[i] != probe[k] {
            k = fail[k - 1];
        }
        if probe[i] == probe[k] {
            k += 1;
        }
        fail[i] = k;
    }
    let (mut n, mut k) = (0, 0);
    for &c in seq {
        while k > 0 && c != probe[k] {
            k = fail[k - 1];
        }
        if c == probe[k] {
            k += 1;
        }
        if k == probe.len() {
            n += 1;
            k = fail[k - 1];
        }
    }
    n
}

/// Overlapping occurrences of `probe` across every corpus sequence.
pub fn count_frequency(probe: &TokenSeq, corpus: &Corpus) -> usize {
    corpus.sequences().iter().map(|s| count_in(probe.tokens(), s.tokens())).sum()
}

/// Deterministic permutation of the tokens of `x`.
pub fn shuffle_sequence(x: &TokenSeq, seed: u64) -> TokenSeq {
    let mut t = x.tokens().to_vec();
    t.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    TokenSeq::new(t, x.tokenizer())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lcs_brute(a: &[u32], b: &[u32]) -> usize {
        let mut best = 0;
        for i in 0..a.len() {
            for j in 0..b.len() {
                let mut k = 0;
                while i + k < a.len() && j + k < b.len() && a[i + k] == b[j + k] {
                    k += 1;
                }
                best = best.max(k);
            }
        }
        best
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_in(&[1, 1], &[1, 1, 1, 1]), 3);
        assert_eq!(count_in(&[5], &[1, 2, 3]), 0);
        assert_eq!(count_in(&[1, 2, 1], &[1, 2, 1, 2, 1]), 2);
    }

    #[test]
    fn disjoint_endpoints() {
        let seqs = [vec![1u32, 2, 3, 4, 5], vec![9, 9, 9, 9, 9]];
        let r = verify_disjoint_seqs(&seqs[0], seqs.iter().map(|s| s.as_slice()), 3);
        assert_eq!((r.longest, r.pass), (5, false));
        let r = verify_disjoint_seqs(&[100, 101, 102], seqs.iter().map(|s| s.as_slice()), 3);
        assert_eq!((r.longest, r.pass, r.witness), (0, true, None));
    }

    proptest! {
        #[test]
        fn automaton_matches_brute_force(
            x in proptest::collection::vec(0u32..3, 0..40),
            ys in proptest::collection::vec(proptest::collection::vec(0u32..3, 0..40), 1..5),
        ) {
            let want = ys.iter().map(|y| lcs_brute(&x, y)).max().unwrap_or(0);
            let r = verify_disjoint_seqs(&x, ys.iter().map(|y| y.as_slice()), 4);
            prop_assert_eq!(r.longest, want);
            prop_assert_eq!(r.pass, want < 4);
        }

        #[test]
        fn kmp_matches_naive(p in proptest::collection::vec(0u32..2, 1..5), s in proptest::collection::vec(0u32..2, 0..30)) {
            let naive = if p.len() > s.len() { 0 } else { (0..=s.len() - p.len()).filter(|&i| s[i..i + p.len()] == p[..]).count() };
            prop_assert_eq!(count_in(&p, &s), naive);
        }

        #[test]
        fn shuffle_preserves_multiset(t in proptest::collection::vec(0u32..50, 2..100), seed in any::<u64>()) {
            let x = TokenSeq::bytes(t);
            let y = shuffle_sequence(&x, seed);
            let (mut a, mut b) = (x.tokens().to_vec(), y.tokens().to_vec());
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            prop_assert_eq!(shuffle_sequence(&x, seed), y);
        }
    }
}
