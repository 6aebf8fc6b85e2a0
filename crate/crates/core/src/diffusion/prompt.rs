use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{Color, Shape, Token, PROMPT_LEN, VOCAB_SIZE};

/// A fixed-length tokenized prompt with its subject slots marked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub token_ids: Vec<usize>,
    /// Slots whose attention guidance protects; normally the shape words.
    pub subject_positions: BTreeSet<usize>,
    /// Subject slot -> color slot. Used for evaluation only.
    pub attribute_bindings: BTreeMap<usize, usize>,
}

impl PromptSpec {
    /// Tokenizes whitespace-separated vocabulary words. Subjects default to
    /// the shape words, each bound to the color word right before it.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<Vec<Token>>>()?;
        Self::from_tokens(&tokens)
    }

    pub fn from_tokens(tokens: &[Token]) -> Result<Self> {
        if tokens.is_empty() || tokens.len() > PROMPT_LEN {
            return Err(Error::param(format!(
                "prompt must have 1..={PROMPT_LEN} tokens, got {}",
                tokens.len()
            )));
        }
        let mut token_ids: Vec<usize> = tokens.iter().map(|t| t.id()).collect();
        token_ids.resize(PROMPT_LEN, Token::Pad.id());
        let mut subject_positions = BTreeSet::new();
        let mut attribute_bindings = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if let Token::Shape(_) = t {
                subject_positions.insert(i);
                if i > 0 && matches!(tokens[i - 1], Token::Color(_)) {
                    attribute_bindings.insert(i, i - 1);
                }
            }
        }
        let spec = Self {
            token_ids,
            subject_positions,
            attribute_bindings,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Replaces the subject set. Positions must point at non-pad slots.
    pub fn with_subjects(mut self, positions: impl IntoIterator<Item = usize>) -> Result<Self> {
        self.subject_positions = positions.into_iter().collect();
        self.attribute_bindings
            .retain(|s, _| self.subject_positions.contains(s));
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_ids.len() != PROMPT_LEN {
            return Err(Error::param(format!(
                "prompt must have exactly {PROMPT_LEN} slots, got {}",
                self.token_ids.len()
            )));
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&id| id >= VOCAB_SIZE) {
            return Err(Error::param(format!(
                "token id {bad} >= vocabulary size {VOCAB_SIZE}"
            )));
        }
        for &p in &self.subject_positions {
            if p >= PROMPT_LEN || self.token_ids[p] == Token::Pad.id() {
                return Err(Error::param(format!(
                    "subject position {p} is not a word slot"
                )));
            }
        }
        for (&s, &a) in &self.attribute_bindings {
            if s >= PROMPT_LEN || a >= PROMPT_LEN {
                return Err(Error::param(format!("binding {s}->{a} out of range")));
            }
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<Token> {
        self.token_ids
            .iter()
            .map(|&id| Token::from_id(id).unwrap_or(Token::Pad))
            .collect()
    }

    pub fn text(&self) -> String {
        self.tokens()
            .into_iter()
            .filter(|t| *t != Token::Pad)
            .map(|t| t.word())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn shape_at(&self, pos: usize) -> Option<Shape> {
        match Token::from_id(*self.token_ids.get(pos)?).ok()? {
            Token::Shape(s) => Some(s),
            _ => None,
        }
    }

    /// Color bound to a subject slot, if any.
    pub fn bound_color(&self, subject: usize) -> Option<Color> {
        let pos = *self.attribute_bindings.get(&subject)?;
        match Token::from_id(self.token_ids[pos]).ok()? {
            Token::Color(c) => Some(c),
            _ => None,
        }
    }
}
