use crate::error::{RefsegError, Result};
use std::collections::HashMap;
use std::path::Path;

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// Closed token inventory. Serialized as one token per line, in index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// The vocabulary shipped with the synthetic generator.
    pub fn closed() -> Self {
        let tokens = [
            "<pad>", "<unk>", "the", "of", "red", "green", "blue", "yellow", "white", "square",
            "circle", "triangle", "left", "right", "above", "below",
        ];
        Self::from_tokens(tokens.iter().map(|s| s.to_string()).collect()).expect("builtin vocab")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != "<pad>" || tokens[UNK] != "<unk>" {
            return Err(RefsegError::Format(
                "vocabulary must start with <pad>, <unk>".into(),
            ));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(RefsegError::Format(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { tokens, index })
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

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercased whitespace tokenization; unknown words map to `<unk>` and
    /// empty input yields a single `<unk>` so sequences are never empty.
    pub fn tokenize(&self, expression: &str) -> Vec<usize> {
        let ids: Vec<usize> = expression
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    /// Like [`tokenize`](Self::tokenize) but also reports which words fell
    /// back to `<unk>`.
    pub fn tokenize_with_warnings(&self, expression: &str) -> (Vec<usize>, Vec<String>) {
        let mut unknown = Vec::new();
        for w in expression.split_whitespace() {
            if self.id(&w.to_lowercase()).is_none() {
                unknown.push(w.to_string());
            }
        }
        (self.tokenize(expression), unknown)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.tokens.join("\n") + "\n";
        std::fs::write(path, text).map_err(RefsegError::io(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(RefsegError::io(format!("reading {}", path.display())))?;
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direct_lookup() {
        let v = Vocabulary::closed();
        let ids = v.tokenize("the red square");
        assert_eq!(
            ids,
            vec![v.id("the").unwrap(), v.id("red").unwrap(), v.id("square").unwrap()]
        );
    }

    #[test]
    fn empty_input_becomes_unk() {
        let v = Vocabulary::closed();
        assert_eq!(v.tokenize(""), vec![UNK]);
        assert_eq!(v.tokenize("   "), vec![UNK]);
    }

    #[test]
    fn case_folding() {
        let v = Vocabulary::closed();
        assert_eq!(v.tokenize("Red SQUARE"), v.tokenize("red square"));
    }

    #[test]
    fn unknown_words_warn() {
        let v = Vocabulary::closed();
        let (ids, unknown) = v.tokenize_with_warnings("the purple square");
        assert_eq!(ids[1], UNK);
        assert_eq!(unknown, vec!["purple".to_string()]);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join("refseg_vocab_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("vocab.txt");
        let v = Vocabulary::closed();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }
}
