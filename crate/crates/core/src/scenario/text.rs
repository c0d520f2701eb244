//! Closed template grammar for scenario descriptions. Tokenization is a fixed
//! word lookup, so no external tokenizer is involved.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::ObjectClass;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
/// Longest admissible token sequence.
pub const MAX_TOKENS: usize = 77;

const WORDS: &[&str] = &[
    "<pad>", "the", "a", "suddenly", "abruptly", "cuts", "in", "from", "left", "right", "at", "near",
    "speeds", "rushes", "up", "behind", "moves", "into", "oncoming", "lane", "ego", "car", "should",
    "slow", "down", "brake", "early", "carefully", "cautiously", "and", "yield", "to", "on", "keep",
    "safe", "distance", "stay", "for", "ahead", "will", "not", "collide", "with", "rear", "front",
    "pedestrian", "cyclist", "intersection", "highway", "street",
];

pub fn vocab_size() -> usize {
    WORDS.len()
}

pub fn encode(text: &str) -> Result<Vec<TokenId>> {
    let tokens = text
        .split_whitespace()
        .map(|w| {
            WORDS
                .iter()
                .position(|v| *v == w)
                .map(|i| i as TokenId)
                .ok_or_else(|| Error::Domain(format!("word {w:?} is outside the vocabulary")))
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.len() > MAX_TOKENS {
        return Err(Error::Domain(format!("{} tokens exceed the limit of {MAX_TOKENS}", tokens.len())));
    }
    Ok(tokens)
}

pub fn decode(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .filter(|&&t| t != PAD)
        .map(|&t| WORDS.get(t as usize).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn validate_tokens(tokens: &[TokenId]) -> Result<()> {
    if tokens.len() > MAX_TOKENS {
        return Err(Error::Domain(format!("{} tokens exceed the limit of {MAX_TOKENS}", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= WORDS.len()) {
        return Err(Error::Domain(format!("token id {t} outside vocabulary")));
    }
    Ok(())
}

/// How the subject road user approaches the ego vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    FromLeft,
    FromRight,
    FromBehind,
    Oncoming,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::FromLeft, Approach::FromRight, Approach::FromBehind, Approach::Oncoming];

    /// Unit direction of the subject's motion in image coordinates (y grows downward).
    pub(crate) fn motion(self) -> (f64, f64) {
        match self {
            Approach::FromLeft => (1.0, 0.0),
            Approach::FromRight => (-1.0, 0.0),
            Approach::FromBehind => (0.0, -1.0),
            Approach::Oncoming => (0.0, 1.0),
        }
    }

    fn side(self) -> &'static str {
        match self {
            Approach::FromLeft => "left",
            Approach::FromRight => "right",
            Approach::FromBehind => "rear",
            Approach::Oncoming => "front",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Intersection,
    Highway,
    Street,
}

impl Location {
    pub const ALL: [Location; 3] = [Location::Intersection, Location::Highway, Location::Street];

    fn word(self) -> &'static str {
        match self {
            Location::Intersection => "intersection",
            Location::Highway => "highway",
            Location::Street => "street",
        }
    }
}

/// Reason, prevention, category and negated-category token sequences.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextAnnotation {
    pub reason: Vec<TokenId>,
    pub prevention: Vec<TokenId>,
    pub category: Vec<TokenId>,
    pub category_neg: Vec<TokenId>,
}

/// Which of the four descriptions a text slot refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextKind {
    Reason,
    Prevention,
    Category,
    CategoryNeg,
}

impl TextAnnotation {
    pub fn get(&self, kind: TextKind) -> &[TokenId] {
        match kind {
            TextKind::Reason => &self.reason,
            TextKind::Prevention => &self.prevention,
            TextKind::Category => &self.category,
            TextKind::CategoryNeg => &self.category_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for kind in [TextKind::Reason, TextKind::Prevention, TextKind::Category, TextKind::CategoryNeg] {
            validate_tokens(self.get(kind))?;
        }
        let not = encode("not")?[0];
        let cat = &self.category;
        let neg = &self.category_neg;
        let inserted = neg.len() == cat.len() + 1
            && (0..neg.len()).any(|i| neg[i] == not && neg[..i] == cat[..i] && neg[i + 1..] == cat[i..]);
        if !inserted {
            return Err(Error::Invariant(
                "negated category must equal the category with one inserted negation token".into(),
            ));
        }
        Ok(())
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

/// Renders the four descriptions for a scenario's attributes.
pub fn describe(actor: ObjectClass, approach: Approach, location: Location, rng: &mut ChaCha8Rng) -> Result<TextAnnotation> {
    let a = actor.word();
    let loc = location.word();
    let prep = pick(rng, &["at", "near"]);
    let reason = match approach {
        Approach::FromLeft | Approach::FromRight => format!(
            "the {a} {} cuts in from the {} {prep} the {loc}",
            pick(rng, &["suddenly", "abruptly"]),
            if approach == Approach::FromLeft { "left" } else { "right" }
        ),
        Approach::FromBehind => format!("the {a} {} up from behind {prep} the {loc}", pick(rng, &["speeds", "rushes"])),
        Approach::Oncoming => format!(
            "the {a} {} moves into the oncoming lane {prep} the {loc}",
            pick(rng, &["suddenly", "abruptly"])
        ),
    };
    let manner = pick(rng, &["carefully", "cautiously"]);
    let slow = pick(rng, &["slow down", "brake early"]);
    let prevention = match approach {
        Approach::FromLeft | Approach::FromRight => format!(
            "the ego car should {manner} {slow} and yield to the {a} on the {} at the {loc}",
            if approach == Approach::FromLeft { "left" } else { "right" }
        ),
        Approach::FromBehind => format!("the ego car should keep a safe distance from the {a} behind at the {loc}"),
        Approach::Oncoming => format!("the ego car should stay in lane and {slow} for the {a} ahead at the {loc}"),
    };
    let side = approach.side();
    let category = format!("the {a} will collide with the ego car from the {side} at the {loc}");
    let category_neg = format!("the {a} will not collide with the ego car from the {side} at the {loc}");
    Ok(TextAnnotation {
        reason: encode(&reason)?,
        prevention: encode(&prevention)?,
        category: encode(&category)?,
        category_neg: encode(&category_neg)?,
    })
}
