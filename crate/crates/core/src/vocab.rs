//! The closed prompt vocabulary: four colors, three shapes, `and`, and padding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding table rows; ids past the used range stay untrained.
pub const VOCAB_SIZE: usize = 16;
pub const PROMPT_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    /// Palette value in `[-1, 1]` RGB.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, -1.0, -1.0],
            Color::Green => [-1.0, 1.0, -1.0],
            Color::Blue => [-1.0, -1.0, 1.0],
            Color::Yellow => [1.0, 1.0, -1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

/// One prompt slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    And,
    Color(Color),
    Shape(Shape),
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Pad => 0,
            Token::And => 1,
            Token::Color(c) => 2 + c as usize,
            Token::Shape(s) => 6 + s as usize,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Ok(match id {
            0 => Token::Pad,
            1 => Token::And,
            2..=5 => Token::Color(Color::ALL[id - 2]),
            6..=8 => Token::Shape(Shape::ALL[id - 6]),
            _ => {
                return Err(Error::param(format!(
                    "token id {id} is not in the vocabulary"
                )))
            }
        })
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Pad => "<pad>",
            Token::And => "and",
            Token::Color(c) => c.name(),
            Token::Shape(s) => s.name(),
        }
    }

    /// Every word with its id, in id order.
    pub fn vocabulary() -> Vec<(&'static str, usize)> {
        (0..9)
            .map(|id| {
                let t = Token::from_id(id).expect("ids 0..9 are used");
                (t.word(), id)
            })
            .collect()
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Token::vocabulary()
            .into_iter()
            .find(|(w, _)| *w == lower)
            .map(|(_, id)| Token::from_id(id).expect("listed"))
            .ok_or_else(|| {
                let words: Vec<_> = Token::vocabulary().iter().map(|(w, _)| *w).collect();
                Error::param(format!(
                    "unknown token {s:?}; vocabulary: {}",
                    words.join(", ")
                ))
            })
    }
}
