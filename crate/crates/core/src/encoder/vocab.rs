//! Closed word-level vocabulary and tokenizer.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const PAD: &str = "[PAD]";
pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const UNK: &str = "[UNK]";
/// The pseudo-token whose embedding is supplied at runtime.
pub const PSEUDO: &str = "<s*>";

const RESERVED: [&str; 5] = [PAD, SOS, EOS, UNK, PSEUDO];

/// Words of the synthetic scene world plus common filler, so LLM-written
/// instructions mostly stay in-vocabulary.
const BASE_WORDS: &[&str] = &[
    // scene attributes
    "red", "green", "blue", "yellow", "purple", "white", "black", "gray", "pink", "brown",
    "circle", "square", "triangle", "circles", "squares", "triangles", "shape", "shapes",
    "background", "photo", "picture", "image", "scene",
    // grid positions
    "top", "bottom", "left", "right", "center", "middle", "corner", "upper", "lower",
    // function words
    "a", "an", "the", "and", "of", "on", "in", "to", "with", "that", "it", "is", "as", "at",
    "for", "from", "into", "instead", "also", "well", "them", "this", "its", "be", "by",
    "some", "there", "are", "one", "two", "three", "so", "but", "or", "only", "just",
    "both", "each", "all", "no", "not", "other", "same", "different", "more", "less",
    "now", "then", "than", "too", "very", "any", "which", "has", "have", "was", "were",
    "they", "their", "these", "those", "out", "up", "down", "over", "off", "own",
    // edit verbs and phrasing
    "turn", "make", "change", "color", "colour", "paint", "add", "put", "include", "show",
    "remove", "take", "away", "get", "rid", "without", "move", "shift", "place", "set",
    "against", "switch", "replace", "swap", "let", "keep", "leave", "give", "use", "drop",
    "delete", "erase", "insert", "bring", "slide", "relocate", "recolor", "convert",
    "transform", "become", "becomes", "should", "want", "please", "new", "next", "near",
    "above", "below", "behind", "front", "beside", "between", "inside", "outside",
    "large", "small", "big", "little", "bright", "dark", "light", "solid", "filled",
    "empty", "plain", "single", "another", "extra", "additional", "edited", "description",
    "instruction", "sitting", "standing", "lying", "shown", "placed", "located", "colored",
    "version", "same", "again", "rest", "everything", "else", "nothing", "something",
    "object", "objects", "item", "items", "thing", "things", "side", "position", "spot",
    "here", "where", "what", "while", "when", "like", "into", "onto", "around",
];

/// Ordered token list with dense ids; reserved tokens come first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for r in RESERVED {
            if !index.contains_key(r) {
                return Err(Error::Config(format!("vocabulary lacks reserved token {r}")));
            }
        }
        if index[PAD] != 0 {
            return Err(Error::Config("[PAD] must have id 0".into()));
        }
        Ok(Self { tokens, index })
    }

    /// The built-in vocabulary for the synthetic world.
    pub fn synthetic() -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for w in BASE_WORDS {
            if !tokens.iter().any(|t| t == w) {
                tokens.push(w.to_string());
            }
        }
        Self::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn sos_id(&self) -> usize {
        self.index[SOS]
    }

    pub fn eos_id(&self) -> usize {
        self.index[EOS]
    }

    pub fn unk_id(&self) -> usize {
        self.index[UNK]
    }

    pub fn pseudo_id(&self) -> usize {
        self.index[PSEUDO]
    }

    /// Reads a JSON array of tokens in id order.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let tokens: Vec<String> = serde_json::from_str(&text)?;
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.tokens)?;
        std::fs::write(path, text).map_err(io_err(path))
    }
}

/// A tokenized, fixed-length text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub content_length: usize,
    pub eos_position: usize,
    pub pseudo_slot: Option<usize>,
    /// Words were dropped to fit `max_len`.
    pub truncated: bool,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// The same sequence cut right after `[EOS]`.
    pub fn trimmed(&self) -> TokenSequence {
        TokenSequence {
            ids: self.ids[..self.content_length].to_vec(),
            ..self.clone()
        }
    }
}

fn normalize_word(raw: &str) -> Option<String> {
    let lower = raw.to_lowercase();
    if lower.contains(PSEUDO) {
        return Some(PSEUDO.to_string());
    }
    let w: String = lower.chars().filter(|c| c.is_alphanumeric()).collect();
    (!w.is_empty()).then_some(w)
}

/// Lowercases, strips punctuation, splits on whitespace and maps words to
/// ids, framing them with `[SOS]` / `[EOS]` and padding to `max_len`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 3 {
        return Err(Error::Contract(format!("max_len {max_len} < 3")));
    }
    let words: Vec<String> = text.split_whitespace().filter_map(normalize_word).collect();
    if words.is_empty() {
        return Err(Error::EmptyInput(format!("text {text:?} has no words")));
    }
    let room = max_len - 2;
    let truncated = words.len() > room;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.sos_id());
    let mut pseudo_slot = None;
    for w in words.iter().take(room) {
        if w == PSEUDO {
            if pseudo_slot.is_some() {
                return Err(Error::Contract(format!(
                    "text {text:?} holds more than one pseudo-token"
                )));
            }
            pseudo_slot = Some(ids.len());
        }
        ids.push(vocab.id(w).unwrap_or_else(|| vocab.unk_id()));
    }
    let eos_position = ids.len();
    ids.push(vocab.eos_id());
    ids.resize(max_len, vocab.pad_id());
    Ok(TokenSequence {
        ids,
        content_length: eos_position + 1,
        eos_position,
        pseudo_slot,
        truncated,
    })
}
