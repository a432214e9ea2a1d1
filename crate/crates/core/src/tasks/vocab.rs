use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

pub type TokenId = u32;

/// Upper bound on the grid-symbol alphabet.
pub const MAX_GRID_SYMBOLS: usize = 16;
pub const DEFAULT_GRID_SYMBOLS: usize = 6;
/// Variable names available to arithmetic chains, in definition order.
pub const VARIABLE_NAMES: [&str; 6] = ["x", "y", "z", "u", "v", "w"];

const GRID_NAMES: [&str; MAX_GRID_SYMBOLS] = [
    "A", "B", "C", "D", "E", "F", "G", "H", "I", "J", "K", "L", "M", "N", "O", "P",
];

/// Serializable description from which a [`Vocab`] is rebuilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabCfg {
    pub grid_symbols: usize,
}

impl Default for VocabCfg {
    fn default() -> Self {
        Self {
            grid_symbols: DEFAULT_GRID_SYMBOLS,
        }
    }
}

/// The shared token vocabulary for both task families.
///
/// Id layout: `<pad> <eos> | ;` then the four structural tags, digits `0`-`9`,
/// `= + - ?`, the variable names, and finally the grid symbols.
#[derive(Debug, Clone)]
pub struct Vocab {
    cfg: VocabCfg,
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const EOS: TokenId = 1;
    /// Ends the prompt.
    pub const DELIM: TokenId = 2;
    /// Separates grid rows and chain statements.
    pub const SEP: TokenId = 3;
    pub const THINK_OPEN: TokenId = 4;
    pub const THINK_CLOSE: TokenId = 5;
    pub const ANSWER_OPEN: TokenId = 6;
    pub const ANSWER_CLOSE: TokenId = 7;
    pub const DIGIT_0: TokenId = 8;
    pub const EQUALS: TokenId = 18;
    pub const PLUS: TokenId = 19;
    pub const MINUS: TokenId = 20;
    pub const QUERY: TokenId = 21;
    pub const VAR_0: TokenId = 22;
    pub const GRID_0: TokenId = Self::VAR_0 + VARIABLE_NAMES.len() as TokenId;

    pub fn new(cfg: VocabCfg) -> Result<Self> {
        if !(2..=MAX_GRID_SYMBOLS).contains(&cfg.grid_symbols) {
            return Err(LabError::Config(format!(
                "grid_symbols must be in 2..={MAX_GRID_SYMBOLS}, got {}",
                cfg.grid_symbols
            )));
        }
        let mut tokens: Vec<String> = ["<pad>", "<eos>", "|", ";"]
            .into_iter()
            .chain(["<think>", "</think>", "<answer>", "</answer>"])
            .map(String::from)
            .collect();
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend(["=", "+", "-", "?"].map(String::from));
        tokens.extend(VARIABLE_NAMES.map(String::from));
        tokens.extend(GRID_NAMES[..cfg.grid_symbols].iter().map(|s| s.to_string()));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(Self { cfg, tokens, ids })
    }

    pub fn cfg(&self) -> VocabCfg {
        self.cfg
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn grid_symbol_count(&self) -> usize {
        self.cfg.grid_symbols
    }

    pub fn digit(d: u8) -> TokenId {
        assert!(d < 10, "digit out of range: {d}");
        Self::DIGIT_0 + d as TokenId
    }

    pub fn digit_value(id: TokenId) -> Option<u8> {
        (Self::DIGIT_0..Self::DIGIT_0 + 10)
            .contains(&id)
            .then(|| (id - Self::DIGIT_0) as u8)
    }

    pub fn variable(i: usize) -> TokenId {
        assert!(i < VARIABLE_NAMES.len());
        Self::VAR_0 + i as TokenId
    }

    pub fn variable_index(id: TokenId) -> Option<usize> {
        (Self::VAR_0..Self::GRID_0)
            .contains(&id)
            .then(|| (id - Self::VAR_0) as usize)
    }

    pub fn grid_symbol(&self, i: usize) -> TokenId {
        assert!(i < self.cfg.grid_symbols);
        Self::GRID_0 + i as TokenId
    }

    pub fn grid_index(&self, id: TokenId) -> Option<usize> {
        (Self::GRID_0..Self::GRID_0 + self.cfg.grid_symbols as TokenId)
            .contains(&id)
            .then(|| (id - Self::GRID_0) as usize)
    }

    pub fn is_structural(id: TokenId) -> bool {
        (Self::THINK_OPEN..=Self::ANSWER_CLOSE).contains(&id)
    }

    /// Tokens that carry no content inside an answer body.
    pub fn is_whitespace_role(id: TokenId) -> bool {
        id == Self::PAD || id == Self::SEP
    }

    /// Hex SHA-256 over the newline-joined token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Renders ids as space-separated symbols, for logs and debugging.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token_of(i).unwrap_or("<?>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mapping_is_bijective() {
        let v = Vocab::new(VocabCfg::default()).unwrap();
        for i in 0..v.len() as TokenId {
            assert_eq!(v.id_of(v.token_of(i).unwrap()), Some(i));
        }
        assert_eq!(v.len(), Vocab::GRID_0 as usize + DEFAULT_GRID_SYMBOLS);
    }

    #[test]
    fn fixed_ids_match_their_symbols() {
        let v = Vocab::new(VocabCfg::default()).unwrap();
        assert_eq!(v.id_of("<think>"), Some(Vocab::THINK_OPEN));
        assert_eq!(v.id_of("</answer>"), Some(Vocab::ANSWER_CLOSE));
        assert_eq!(v.id_of("7"), Some(Vocab::digit(7)));
        assert_eq!(v.id_of("?"), Some(Vocab::QUERY));
        assert_eq!(v.id_of("x"), Some(Vocab::variable(0)));
        assert_eq!(v.id_of("A"), Some(v.grid_symbol(0)));
    }

    #[test]
    fn hash_depends_on_alphabet() {
        let a = Vocab::new(VocabCfg { grid_symbols: 6 }).unwrap();
        let b = Vocab::new(VocabCfg { grid_symbols: 7 }).unwrap();
        assert_eq!(a.hash(), Vocab::new(VocabCfg::default()).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn rejects_bad_alphabet() {
        assert!(Vocab::new(VocabCfg { grid_symbols: 1 }).is_err());
        assert!(Vocab::new(VocabCfg { grid_symbols: 17 }).is_err());
    }
}
