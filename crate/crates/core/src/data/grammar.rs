//! Templated synthetic text with high-entropy word and number slots.
//!
//! Words come from a fixed generated lexicon of pronounceable pseudo-words,
//! grouped into classes, so a byte-level model sees a new choice every few
//! characters while the template skeleton stays learnable.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr", "pl", "sk", "gl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou", "ei"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m", "k", "t"];

/// `(class, number of words)`; classes are disjoint.
const CLASS_SIZES: &[(&str, usize)] = &[("name", 200), ("noun", 400), ("adj", 250), ("verb", 250), ("place", 200), ("day", 7)];

const DAYS: &[&str] = &["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"];

const TEMPLATES: &[&str] = &[
    "{name} {verb} the {adj} {noun} in {place}.",
    "The {noun} of {place} is {adj}.",
    "On {day}, {name} {verb} {num} {noun}s.",
    "Rule {num}.{num}: the {noun} is {adj}.",
    "{name} and {name} {verb} a {adj} {noun}.",
    "Item {num}: {adj} {noun}, {num} units, {place}.",
    "In {place} the {adj} {noun} was {verb} by {name}.",
    "{name} kept {num} {adj} {noun}s.",
    "A {noun} from {place} sold for {num}.",
    "{name} {verb} the {noun} at {num}.",
];

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).expect("onsets"));
        w.push_str(VOWELS.choose(rng).expect("vowels"));
    }
    w.push_str(CODAS.choose(rng).expect("codas"));
    w
}

struct Lexicon {
    classes: Vec<(&'static str, Vec<String>)>,
}

fn lexicon() -> &'static Lexicon {
    static LEX: OnceLock<Lexicon> = OnceLock::new();
    LEX.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1E71C0);
        let mut seen = std::collections::HashSet::new();
        let mut classes = Vec::new();
        for &(class, n) in CLASS_SIZES {
            let words: Vec<String> = if class == "day" {
                DAYS.iter().map(|d| d.to_string()).collect()
            } else {
                let mut words = Vec::with_capacity(n);
                while words.len() < n {
                    let w = pseudo_word(&mut rng);
                    let w = if matches!(class, "name" | "place") { capitalize(&w) } else { w };
                    if seen.insert(w.to_ascii_lowercase()) {
                        words.push(w);
                    }
                }
                words
            };
            classes.push((class, words));
        }
        Lexicon { classes }
    })
}

pub fn class_names() -> impl Iterator<Item = &'static str> {
    lexicon().classes.iter().map(|(c, _)| *c)
}

pub fn class_words(class: &str) -> &'static [String] {
    lexicon().classes.iter().find(|(c, _)| *c == class).map(|(_, w)| w.as_slice()).unwrap_or(&[])
}

/// Class containing `word`, if any.
pub fn class_of(word: &str) -> Option<&'static str> {
    lexicon().classes.iter().find(|(_, ws)| ws.iter().any(|w| w == word)).map(|(c, _)| *c)
}

fn number(rng: &mut impl Rng) -> String {
    let digits = rng.gen_range(1..=4);
    let lo = if digits == 1 { 0 } else { 10u32.pow(digits - 1) };
    rng.gen_range(lo..10u32.pow(digits)).to_string()
}

pub fn sentence(rng: &mut impl Rng) -> String {
    let template = TEMPLATES.choose(rng).expect("templates");
    let mut out = String::with_capacity(64);
    let mut rest = *template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = rest[open..].find('}').expect("balanced template") + open;
        let slot = &rest[open + 1..close];
        if slot == "num" {
            out.push_str(&number(rng));
        } else {
            out.push_str(class_words(slot).choose(rng).expect("known slot"));
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

/// At least `min_len` bytes of space-separated sentences.
pub fn text(rng: &mut impl Rng, min_len: usize) -> String {
    let mut out = String::new();
    while out.len() < min_len {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&sentence(rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentences_fill_every_slot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = sentence(&mut rng);
            assert!(!s.contains('{') && !s.contains('}'), "{s}");
            assert!(s.is_ascii());
        }
    }

    #[test]
    fn classes_are_disjoint_and_sized() {
        let mut all: Vec<&str> = class_names().flat_map(|c| class_words(c).iter().map(String::as_str)).collect();
        let n = all.len();
        assert_eq!(n, CLASS_SIZES.iter().map(|c| c.1).sum::<usize>());
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        let w = &class_words("noun")[17];
        assert_eq!(class_of(w), Some("noun"));
        assert_eq!(class_of("zzz"), None);
    }
}
