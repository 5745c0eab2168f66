use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::grammar;
use crate::binio::{Reader, Writer};
use crate::error::{LabError, Result};
use crate::tokens::{ByteTokenizer, TokenSeq, Tokenizer, TokenizerId};

const MAGIC: &[u8; 4] = b"MLCP";
const VERSION: u32 = 1;

/// Parameters of the synthetic desk corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_windows: usize,
    pub window: usize,
    pub seed: u64,
    /// Fraction of windows filled with uniform random printable bytes.
    pub random_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { n_windows: 10_000, window: 256, seed: 0, random_fraction: 0.05 }
    }
}

/// Ordered fixed-length token windows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    seqs: Vec<TokenSeq>,
    window: usize,
    seed: u64,
    tokenizer: TokenizerId,
}

fn random_window(rng: &mut ChaCha8Rng, window: usize) -> Vec<u32> {
    (0..window).map(|_| rng.gen_range(32u32..127)).collect()
}

impl Corpus {
    /// Templated sentences chopped into windows, with a random-byte share.
    /// The result is a pure function of `spec`.
    pub fn synthetic(spec: &CorpusSpec) -> Result<Self> {
        if spec.window == 0 {
            return Err(LabError::Config("corpus window must be positive".into()));
        }
        if !(0.0..=1.0).contains(&spec.random_fraction) {
            return Err(LabError::Config(format!("random_fraction {} outside [0, 1]", spec.random_fraction)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut buf: Vec<u32> = Vec::new();
        let mut at = 0;
        let mut seqs = Vec::with_capacity(spec.n_windows);
        for _ in 0..spec.n_windows {
            let tokens = if rng.gen_bool(spec.random_fraction) {
                random_window(&mut rng, spec.window)
            } else {
                if buf.len() - at < spec.window {
                    buf.drain(..at);
                    at = 0;
                    let more = grammar::text(&mut rng, 4 * spec.window);
                    buf.push(' ' as u32);
                    buf.extend(more.bytes().map(u32::from));
                }
                at += spec.window;
                buf[at - spec.window..at].to_vec()
            };
            seqs.push(TokenSeq::bytes(tokens));
        }
        Ok(Self { seqs, window: spec.window, seed: spec.seed, tokenizer: TokenizerId::BYTE })
    }

    pub fn from_sequences(seqs: Vec<TokenSeq>, window: usize, seed: u64, tokenizer: TokenizerId) -> Result<Self> {
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != window {
                return Err(LabError::Invalid(format!("sequence {i} has {} tokens, window is {window}", s.len())));
            }
            if s.tokenizer() != tokenizer {
                return Err(LabError::Invalid(format!("sequence {i} uses tokenizer {:?}", s.tokenizer())));
            }
        }
        Ok(Self { seqs, window, seed, tokenizer })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn tokenizer(&self) -> TokenizerId {
        self.tokenizer
    }

    pub fn sequences(&self) -> &[TokenSeq] {
        &self.seqs
    }

    pub fn get(&self, i: usize) -> Option<&TokenSeq> {
        self.seqs.get(i)
    }

    /// Corpus made of windows `range` of this one.
    pub fn slice(&self, start: usize, end: usize) -> Corpus {
        Corpus { seqs: self.seqs[start..end].to_vec(), ..self.clone_meta() }
    }

    fn clone_meta(&self) -> Corpus {
        Corpus { seqs: Vec::new(), window: self.window, seed: self.seed, tokenizer: self.tokenizer }
    }

    pub fn write_to(&self, w: impl Write) -> Result<()> {
        let mut w = Writer(w);
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.u16(self.tokenizer.0)?;
        w.len(self.window)?;
        w.u64(self.seed)?;
        w.len(self.seqs.len())?;
        for s in &self.seqs {
            w.len(s.len())?;
            let mut b = Vec::with_capacity(4 * s.len());
            for t in s.tokens() {
                b.extend_from_slice(&t.to_le_bytes());
            }
            w.bytes(&b)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = Reader(r);
        if &r.exact::<4>()? != MAGIC {
            return Err(LabError::Format("not a corpus file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LabError::Format(format!("unsupported corpus version {version}")));
        }
        let tokenizer = TokenizerId(r.u16()?);
        let window = r.len()?;
        let seed = r.u64()?;
        let n = r.len()?;
        let mut seqs = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let len = r.len()?;
            let tokens = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            seqs.push(TokenSeq::new(tokens, tokenizer));
        }
        Self::from_sequences(seqs, window, seed, tokenizer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// `n` grammar sequences of exactly `window` tokens, each starting at a
/// sentence boundary, drawn from a stream seeded independently of any corpus.
pub fn sample_grammar_sequences(n: usize, window: usize, seed: u64) -> Vec<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1A1E_C7ED);
    (0..n)
        .map(|_| {
            let text = grammar::text(&mut rng, window);
            TokenSeq::bytes(text.bytes().take(window).map(u32::from).collect())
        })
        .collect()
}

/// Reads one sequence per non-empty line, tokenized with `tok`.
pub fn load_sequence_file(path: &Path, tok: &dyn Tokenizer) -> Result<Vec<TokenSeq>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(tok.encode(&line));
        }
    }
    Ok(out)
}

/// Writes each sequence as one decoded line. Sequences containing a newline
/// byte or non-byte tokens cannot be represented and are rejected.
pub fn save_sequence_file(path: &Path, seqs: &[TokenSeq]) -> Result<()> {
    let tok = ByteTokenizer;
    let mut w = BufWriter::new(File::create(path)?);
    for (i, s) in seqs.iter().enumerate() {
        if s.tokens().iter().any(|&t| t >= 256 || t == b'\n' as u32) {
            return Err(LabError::Invalid(format!("sequence {i} is not representable as one text line")));
        }
        let text = tok.decode(s.tokens());
        if tok.encode(&text).tokens() != s.tokens() {
            return Err(LabError::Invalid(format!("sequence {i} is not valid UTF-8 text")));
        }
        writeln!(w, "{text}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_pure_and_fixed_width() {
        let spec = CorpusSpec { n_windows: 300, window: 64, seed: 9, random_fraction: 0.1 };
        let a = Corpus::synthetic(&spec).unwrap();
        let b = Corpus::synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert!(a.sequences().iter().all(|s| s.len() == 64));
        let c = Corpus::synthetic(&CorpusSpec { seed: 10, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_file_round_trip() {
        let a = Corpus::synthetic(&CorpusSpec { n_windows: 50, window: 32, seed: 2, random_fraction: 0.2 }).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Corpus::read_from(buf.as_slice()).unwrap(), a);
        assert!(Corpus::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn sequence_file_round_trip() {
        let seqs = sample_grammar_sequences(5, 80, 3);
        assert!(seqs.iter().all(|s| s.len() == 80));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        save_sequence_file(&p, &seqs).unwrap();
        assert_eq!(load_sequence_file(&p, &ByteTokenizer).unwrap(), seqs);
    }
}
