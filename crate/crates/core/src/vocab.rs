//! Whitespace tokenizer over a closed symbol list with three reserved ids.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const NUM_SPECIAL: usize = 3;

const SPECIAL_SYMBOLS: [&str; NUM_SPECIAL] = ["<pad>", "<mask>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Vocabulary from regular symbols; special ids are prepended.
    pub fn new(regular: Vec<String>) -> Result<Self> {
        let symbols: Vec<String> = SPECIAL_SYMBOLS
            .iter()
            .map(|s| s.to_string())
            .chain(regular)
            .collect();
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary symbol {s:?}")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary symbol {s:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// `w00`, `w01`, … for a synthetic corpus of `n` symbols.
    pub fn synthetic(n: usize) -> Self {
        Self::new((0..n).map(|i| format!("w{i:02}")).collect()).expect("synthetic symbols are unique")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Ids that corruption may select or draw: everything but the specials.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIAL..self.symbols.len()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIAL
    }

    pub fn id(&self, symbol: &str) -> usize {
        self.index.get(symbol).copied().unwrap_or(UNK)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map_or("<unk>", String::as_str)
    }

    pub fn encode(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|s| self.id(s)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect::<Vec<_>>().join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(all: Vec<String>) -> Result<Self> {
        if all.len() < NUM_SPECIAL || all[..NUM_SPECIAL] != SPECIAL_SYMBOLS {
            return Err(Error::Config("vocabulary must start with <pad> <mask> <unk>".into()));
        }
        Self::new(all[NUM_SPECIAL..].to_vec())
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.symbols
    }
}
