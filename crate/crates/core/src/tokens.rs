use serde::{Deserialize, Serialize};

/// Identity of the tokenizer that produced a [`TokenSeq`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizerId(pub u16);

impl TokenizerId {
    pub const BYTE: TokenizerId = TokenizerId(1);
}

/// Immutable sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    tokenizer: TokenizerId,
}

impl TokenSeq {
    pub fn new(tokens: Vec<u32>, tokenizer: TokenizerId) -> Self {
        Self { tokens, tokenizer }
    }

    pub fn bytes(tokens: Vec<u32>) -> Self {
        Self::new(tokens, TokenizerId::BYTE)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tokenizer(&self) -> TokenizerId {
        self.tokenizer
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Copy of `tokens[start..end]` with the same tokenizer.
    pub fn slice(&self, start: usize, end: usize) -> TokenSeq {
        TokenSeq::new(self.tokens[start..end].to_vec(), self.tokenizer)
    }

    pub fn concat(&self, other: &[u32]) -> TokenSeq {
        let mut t = self.tokens.clone();
        t.extend_from_slice(other);
        TokenSeq::new(t, self.tokenizer)
    }
}

impl AsRef<[u32]> for TokenSeq {
    fn as_ref(&self) -> &[u32] {
        &self.tokens
    }
}

pub trait Tokenizer: Send + Sync {
    fn id(&self) -> TokenizerId;
    fn vocab_size(&self) -> usize;
    fn encode(&self, text: &str) -> TokenSeq;
    fn decode(&self, tokens: &[u32]) -> String;
}

/// One token per byte, plus end-of-text and padding specials.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const EOT: u32 = 256;
    pub const PAD: u32 = 257;
    pub const VOCAB: usize = 258;
}

impl Tokenizer for ByteTokenizer {
    fn id(&self) -> TokenizerId {
        TokenizerId::BYTE
    }

    fn vocab_size(&self) -> usize {
        Self::VOCAB
    }

    fn encode(&self, text: &str) -> TokenSeq {
        TokenSeq::bytes(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
