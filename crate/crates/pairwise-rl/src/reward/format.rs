//! Token-level encoding of an ordered response comparison.
//!
//! Grammar (one token sequence, reserved delimiters each appearing exactly
//! once):
//!
//! ```text
//! prompt… RULE_MARKER rule… EOS slot1… SEPARATOR slot2… MASK
//! ```
//!
//! The rule segment is terminated by the end-of-sequence token because rule
//! and response tokens share the content alphabet; every other boundary is
//! a dedicated delimiter. Prompt, rule, and responses contain only content
//! tokens, so decoding is an unambiguous pure function of the sequence.
//!
//! The order flag records whether slot 1 holds the candidate or the anchor;
//! flipping the flag swaps the slots. Both slots own independent copies of
//! their token buffers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{Prompt, Response, Token, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotOrder {
    CandidateFirst,
    AnchorFirst,
}

impl SlotOrder {
    pub fn flipped(self) -> Self {
        match self {
            SlotOrder::CandidateFirst => SlotOrder::AnchorFirst,
            SlotOrder::AnchorFirst => SlotOrder::CandidateFirst,
        }
    }
}

/// Byte ranges of the four variable segments inside the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segments {
    pub prompt: (usize, usize),
    pub rule: (usize, usize),
    pub slot1: (usize, usize),
    pub slot2: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormattedComparison {
    tokens: Vec<Token>,
    order: SlotOrder,
    segments: Segments,
}

impl FormattedComparison {
    /// Encode `(prompt, candidate, anchor)` with the candidate placed
    /// according to `order`.
    pub fn encode(
        vocab: Vocab,
        prompt: &Prompt,
        candidate: &Response,
        anchor: &Response,
        order: SlotOrder,
    ) -> Result<Self> {
        for (what, toks) in [
            ("prompt", &prompt.tokens),
            ("rule", &prompt.rule),
            ("candidate", &candidate.tokens),
            ("anchor", &anchor.tokens),
        ] {
            if let Some(&t) = toks.iter().find(|&&t| !vocab.is_content(t)) {
                return Err(Error::contract(format!(
                    "format_comparison: {what} contains non-content token {t}"
                )));
            }
        }
        let (slot1, slot2) = match order {
            SlotOrder::CandidateFirst => (&candidate.tokens, &anchor.tokens),
            SlotOrder::AnchorFirst => (&anchor.tokens, &candidate.tokens),
        };
        let mut tokens =
            Vec::with_capacity(prompt.tokens.len() + prompt.rule.len() + slot1.len() + slot2.len() + 4);
        let prompt_span = (0, prompt.tokens.len());
        tokens.extend_from_slice(&prompt.tokens);
        tokens.push(vocab.rule_marker());
        let rule_span = (tokens.len(), tokens.len() + prompt.rule.len());
        tokens.extend_from_slice(&prompt.rule);
        tokens.push(vocab.eos());
        let slot1_span = (tokens.len(), tokens.len() + slot1.len());
        tokens.extend_from_slice(slot1);
        tokens.push(vocab.separator());
        let slot2_span = (tokens.len(), tokens.len() + slot2.len());
        tokens.extend_from_slice(slot2);
        tokens.push(vocab.mask());
        Ok(FormattedComparison {
            tokens,
            order,
            segments: Segments {
                prompt: prompt_span,
                rule: rule_span,
                slot1: slot1_span,
                slot2: slot2_span,
            },
        })
    }

    /// Parse a raw token sequence (as produced by [`Self::encode`]).
    pub fn parse(vocab: Vocab, tokens: Vec<Token>, order: SlotOrder) -> Result<Self> {
        let find_one = |needle: Token, name: &str| -> Result<usize> {
            let mut it = tokens.iter().enumerate().filter(|(_, &t)| t == needle);
            let first = it
                .next()
                .ok_or_else(|| Error::Format(format!("comparison encoding: missing {name}")))?
                .0;
            if it.next().is_some() {
                return Err(Error::Format(format!(
                    "comparison encoding: {name} appears more than once"
                )));
            }
            Ok(first)
        };
        let rm = find_one(vocab.rule_marker(), "rule marker")?;
        let eos = find_one(vocab.eos(), "rule terminator")?;
        let sep = find_one(vocab.separator(), "separator")?;
        let mask = find_one(vocab.mask(), "mask")?;
        if !(rm < eos && eos < sep && sep < mask && mask == tokens.len() - 1) {
            return Err(Error::Format(
                "comparison encoding: delimiters out of order".into(),
            ));
        }
        let segments = Segments {
            prompt: (0, rm),
            rule: (rm + 1, eos),
            slot1: (eos + 1, sep),
            slot2: (sep + 1, mask),
        };
        for span in [segments.prompt, segments.rule, segments.slot1, segments.slot2] {
            if let Some(&t) = tokens[span.0..span.1].iter().find(|&&t| !vocab.is_content(t)) {
                return Err(Error::Format(format!(
                    "comparison encoding: reserved token {t} inside a content segment"
                )));
            }
        }
        Ok(FormattedComparison {
            tokens,
            order,
            segments,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn order(&self) -> SlotOrder {
        self.order
    }

    pub fn segments(&self) -> Segments {
        self.segments
    }

    fn span(&self, (a, b): (usize, usize)) -> &[Token] {
        &self.tokens[a..b]
    }

    pub fn prompt_tokens(&self) -> &[Token] {
        self.span(self.segments.prompt)
    }

    pub fn rule_tokens(&self) -> &[Token] {
        self.span(self.segments.rule)
    }

    pub fn slot1_tokens(&self) -> &[Token] {
        self.span(self.segments.slot1)
    }

    pub fn slot2_tokens(&self) -> &[Token] {
        self.span(self.segments.slot2)
    }

    /// Recover `(prompt, candidate, anchor, order)`.
    pub fn decode(&self) -> (Prompt, Response, Response, SlotOrder) {
        let prompt = Prompt {
            tokens: self.prompt_tokens().to_vec(),
            rule: self.rule_tokens().to_vec(),
        };
        let s1 = Response {
            tokens: self.slot1_tokens().to_vec(),
        };
        let s2 = Response {
            tokens: self.slot2_tokens().to_vec(),
        };
        let (candidate, anchor) = match self.order {
            SlotOrder::CandidateFirst => (s1, s2),
            SlotOrder::AnchorFirst => (s2, s1),
        };
        (prompt, candidate, anchor, self.order)
    }
}
