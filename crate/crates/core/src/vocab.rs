//! The closed prompt vocabulary shared by the editor, the embedder, and the
//! synthetic benchmark.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Carries no meaning for the embedder.
    Function,
    Color,
    /// Object noun bound to the color its objects have before editing.
    Noun,
}

pub struct Word {
    pub text: &'static str,
    pub role: Role,
    /// RGB for colors; for nouns, the name of the bound color.
    pub color: Option<[f64; 3]>,
    pub bound: Option<&'static str>,
}

const fn func(text: &'static str) -> Word {
    Word {
        text,
        role: Role::Function,
        color: None,
        bound: None,
    }
}

const fn color(text: &'static str, rgb: [f64; 3]) -> Word {
    Word {
        text,
        role: Role::Color,
        color: Some(rgb),
        bound: None,
    }
}

const fn noun(text: &'static str, bound: &'static str) -> Word {
    Word {
        text,
        role: Role::Noun,
        color: None,
        bound: Some(bound),
    }
}

pub static WORDS: &[Word] = &[
    func("turn"),
    func("the"),
    func("a"),
    func("make"),
    func("into"),
    func("keep"),
    func("paint"),
    func("as"),
    func("is"),
    color("red", [0.9, 0.1, 0.1]),
    color("green", [0.1, 0.75, 0.2]),
    color("blue", [0.15, 0.25, 0.9]),
    color("yellow", [0.95, 0.9, 0.15]),
    color("golden", [0.8, 0.55, 0.1]),
    color("purple", [0.55, 0.15, 0.7]),
    color("white", [0.95, 0.95, 0.95]),
    color("black", [0.05, 0.05, 0.05]),
    color("gray", [0.5, 0.5, 0.5]),
    noun("cube", "blue"),
    noun("sphere", "green"),
    noun("block", "purple"),
];

pub fn size() -> usize {
    WORDS.len()
}

pub fn id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| w.text == word)
}

pub fn word(id: usize) -> &'static Word {
    &WORDS[id]
}

pub fn listing() -> String {
    WORDS.iter().map(|w| w.text).collect::<Vec<_>>().join(", ")
}

/// Lower-cases, strips punctuation, and maps every word to its id.
pub fn tokenize(prompt: &str) -> Result<Vec<usize>> {
    let ids = prompt
        .split_whitespace()
        .map(|raw| {
            let w: String = raw
                .chars()
                .filter(|c| c.is_alphanumeric())
                .collect::<String>()
                .to_lowercase();
            id(&w).ok_or_else(|| {
                Error::Perception(format!("`{w}` is not in the vocabulary [{}]", listing()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.is_empty() {
        return Err(Error::Argument("empty prompt".into()));
    }
    Ok(ids)
}

pub fn color_rgb(name: &str) -> Option<[f64; 3]> {
    WORDS.iter().find(|w| w.text == name).and_then(|w| w.color)
}

pub fn colors() -> impl Iterator<Item = &'static Word> {
    WORDS.iter().filter(|w| w.role == Role::Color)
}

pub fn nouns() -> impl Iterator<Item = &'static Word> {
    WORDS.iter().filter(|w| w.role == Role::Noun)
}

/// An instruction decomposed into the object it names and the color it asks for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub noun: Option<String>,
    pub target: Option<String>,
}

impl Instruction {
    pub fn parse(text: &str) -> Result<Self> {
        let ids = tokenize(text)?;
        let noun = ids.iter().map(|&i| word(i)).find(|w| w.role == Role::Noun);
        let target = ids.iter().rev().map(|&i| word(i)).find(|w| w.role == Role::Color);
        Ok(Self {
            text: text.to_string(),
            noun: noun.map(|w| w.text.to_string()),
            target: target.map(|w| w.text.to_string()),
        })
    }

    /// Source description: the named object's pre-edit color.
    pub fn source_prompt(&self) -> Option<String> {
        let n = self.noun.as_deref()?;
        WORDS
            .iter()
            .find(|w| w.text == n)
            .and_then(|w| w.bound)
            .map(str::to_string)
    }

    /// Target description: the requested color.
    pub fn target_prompt(&self) -> Option<String> {
        self.target.clone()
    }
}
