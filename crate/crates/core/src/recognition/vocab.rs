use crate::error::{contract, Result};

/// CTC blank.
pub const BLANK: usize = 0;
/// Start and end of sentence share one id.
pub const EOS: usize = 1;

/// Character inventory. Ids 0 and 1 are reserved for [`BLANK`] and [`EOS`];
/// text symbols follow in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::characters()
    }
}

impl Vocabulary {
    /// Space, apostrophe, and `a`–`z`.
    pub fn characters() -> Self {
        let mut symbols = vec![' ', '\''];
        symbols.extend('a'..='z');
        Self { symbols }
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c).map(|i| i + 2)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        id.checked_sub(2).and_then(|i| self.symbols.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match self.id(c) {
                Some(i) => Ok(i),
                None => contract(format!("symbol {c:?} is not in the vocabulary")),
            })
            .collect()
    }

    /// Text of `ids`, skipping blank, sentence markers, and unknown ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.symbol(i)).collect()
    }
}
