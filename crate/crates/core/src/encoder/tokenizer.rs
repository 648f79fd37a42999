use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const PAD: &str = "[PAD]";
const UNK: &str = "[UNK]";

/// Whitespace tokenizer over a fixed vocabulary. Ids 0 and 1 are reserved
/// for `[PAD]` and `[UNK]`; the vocabulary file lists one token per line,
/// the line number being the id.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from distinct tokens, after the two reserved ids.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD.to_string(), UNK.to_string()];
        all.extend(tokens.into_iter().map(Into::into).filter(|t| t != PAD && t != UNK));
        let mut index = HashMap::with_capacity(all.len());
        let mut kept = Vec::with_capacity(all.len());
        for t in all {
            if !index.contains_key(&t) {
                index.insert(t.clone(), kept.len() as u32);
                kept.push(t);
            }
        }
        Self { tokens: kept, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<&str> = text.lines().collect();
        if tokens.len() < 2 || tokens[0] != PAD || tokens[1] != UNK {
            return Err(Error::Data(format!(
                "{}: vocabulary must start with {PAD} and {UNK}",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens.into_iter().skip(2)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        crate::io::write_file(path, out)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Splits `prefix + text` on whitespace and maps each piece to its id,
    /// keeping at most `max_len` tokens.
    pub fn tokenize(&self, text: &str, prefix: Option<&str>, max_len: usize) -> Vec<u32> {
        let prefix = prefix.unwrap_or("");
        prefix
            .split_whitespace()
            .chain(text.split_whitespace())
            .take(max_len)
            .map(|t| self.id(t))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = Vocab::from_tokens(["a", "b", "a"]);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zzz"), UNK_ID);
        assert_eq!(v.tokenize(" a  b c ", None, 10), vec![2, 3, UNK_ID]);
        assert_eq!(v.tokenize("a b", Some("b"), 2), vec![3, 2]);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::from_tokens(["x", "y"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }
}
