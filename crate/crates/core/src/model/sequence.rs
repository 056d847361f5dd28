//! Sequence templates and layout.
//!
//! Every sequence starts with the visual block when an image is present:
//! the template emits a single [`IMAGE`] placeholder as its first token and
//! the layout replaces it with `n_visual` positions. Supervision is tracked
//! per position; the shifted `(targets, mask)` pair aligned with logit rows
//! comes from [`SequenceLayout::targets`].

use serde::Serialize;

use super::tokenizer::{ByteTokenizer, ANS, BOS, EOS, IMAGE, PAD};
use super::{Matrix, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Visual,
    Prompt,
    Caption,
    Question,
    Answer,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub tokens: Vec<u32>,
    pub supervised: bool,
    /// Dialogue round for question and answer segments.
    pub turn: Option<usize>,
}

impl Segment {
    fn new(kind: SegmentKind, tokens: Vec<u32>, supervised: bool, turn: Option<usize>) -> Self {
        Self {
            kind,
            tokens,
            supervised,
            turn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SegmentSpan {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    pub turn: Option<usize>,
}

fn opening(with_image: bool) -> Segment {
    let mut tokens = Vec::with_capacity(2);
    if with_image {
        tokens.push(IMAGE);
    }
    tokens.push(BOS);
    Segment::new(SegmentKind::Prompt, tokens, false, None)
}

fn with_eos(mut tokens: Vec<u32>) -> Vec<u32> {
    tokens.push(EOS);
    tokens
}

pub fn caption_segments(tok: &ByteTokenizer, caption: &str, with_image: bool) -> Vec<Segment> {
    vec![
        opening(with_image),
        Segment::new(SegmentKind::Caption, with_eos(tok.encode(caption)), true, None),
    ]
}

pub fn vqa_segments(tok: &ByteTokenizer, question: &str, answer: &str, with_image: bool) -> Vec<Segment> {
    conversation_segments(tok, &[(question, answer)], with_image)
}

/// Multi-round dialogue: each round's answer is supervised, questions and
/// earlier history are context only.
pub fn conversation_segments(tok: &ByteTokenizer, turns: &[(&str, &str)], with_image: bool) -> Vec<Segment> {
    let mut out = vec![opening(with_image)];
    for (i, (q, a)) in turns.iter().enumerate() {
        let mut qt = tok.encode(q);
        qt.push(ANS);
        out.push(Segment::new(SegmentKind::Question, qt, false, Some(i)));
        out.push(Segment::new(SegmentKind::Answer, with_eos(tok.encode(a)), true, Some(i)));
    }
    out
}

pub fn text_segments(tok: &ByteTokenizer, text: &str) -> Vec<Segment> {
    vec![
        opening(false),
        Segment::new(SegmentKind::Text, with_eos(tok.encode(text)), true, None),
    ]
}

/// Generation prompt: the caption opening for an empty prompt, otherwise a
/// question awaiting its answer.
pub fn prompt_segments(tok: &ByteTokenizer, prompt: &str, with_image: bool) -> Vec<Segment> {
    let mut out = vec![opening(with_image)];
    if !prompt.is_empty() {
        let mut qt = tok.encode(prompt);
        qt.push(ANS);
        out.push(Segment::new(SegmentKind::Question, qt, false, Some(0)));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub n_visual: usize,
    /// Token ids following the visual block (placeholder removed).
    pub text_ids: Vec<u32>,
    supervised: Vec<bool>,
    pub spans: Vec<SegmentSpan>,
}

impl SequenceLayout {
    pub fn build(n_visual: usize, segments: &[Segment], max_len: usize) -> Result<Self, ModelError> {
        let mut text_ids = Vec::new();
        let mut supervised = vec![false; n_visual];
        let mut spans = Vec::new();
        let mut first = true;
        if n_visual > 0 {
            spans.push(SegmentSpan {
                kind: SegmentKind::Visual,
                start: 0,
                end: n_visual,
                turn: None,
            });
        }
        for seg in segments {
            let mut tokens = seg.tokens.as_slice();
            if first && !tokens.is_empty() {
                if tokens[0] == IMAGE {
                    if n_visual == 0 {
                        return Err(ModelError::Shape("image placeholder without visual tokens".into()));
                    }
                    tokens = &tokens[1..];
                } else if n_visual > 0 {
                    return Err(ModelError::Shape(
                        "visual tokens given but the sequence does not open with the image placeholder".into(),
                    ));
                }
                first = false;
            }
            if tokens.contains(&IMAGE) {
                return Err(ModelError::Shape("image placeholder must be the first token".into()));
            }
            let start = n_visual + text_ids.len();
            text_ids.extend_from_slice(tokens);
            supervised.extend(std::iter::repeat_n(seg.supervised, tokens.len()));
            spans.push(SegmentSpan {
                kind: seg.kind,
                start,
                end: n_visual + text_ids.len(),
                turn: seg.turn,
            });
        }
        if first && n_visual > 0 {
            return Err(ModelError::Shape("visual tokens given without a template".into()));
        }
        let len = n_visual + text_ids.len();
        if len > max_len {
            return Err(ModelError::Overflow { len, max: max_len });
        }
        Ok(Self {
            n_visual,
            text_ids,
            supervised,
            spans,
        })
    }

    pub fn len(&self) -> usize {
        self.n_visual + self.text_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-position loss mask: true where the token at that position is
    /// supervised.
    pub fn loss_mask(&self) -> &[bool] {
        &self.supervised
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised.iter().filter(|&&b| b).count()
    }

    pub fn token_at(&self, pos: usize) -> Option<u32> {
        pos.checked_sub(self.n_visual).map(|i| self.text_ids[i])
    }

    /// Next-token targets aligned with logit rows: row `p` predicts the
    /// token at `p + 1` and is masked in iff that token is supervised.
    pub fn targets(&self) -> (Vec<u32>, Vec<bool>) {
        let len = self.len();
        let mut targets = vec![PAD; len];
        let mut mask = vec![false; len];
        for p in 0..len.saturating_sub(1) {
            if let Some(t) = self.token_at(p + 1) {
                targets[p] = t;
                mask[p] = self.supervised[p + 1];
            }
        }
        (targets, mask)
    }

    /// Shifted mask restricted to the answer of one dialogue round.
    pub fn turn_mask(&self, turn: usize) -> Vec<bool> {
        let (_, mask) = self.targets();
        let mut out = vec![false; mask.len()];
        for span in &self.spans {
            if span.kind == SegmentKind::Answer && span.turn == Some(turn) {
                for p in span.start..span.end {
                    if p > 0 {
                        out[p - 1] = mask[p - 1];
                    }
                }
            }
        }
        out
    }
}

/// Embedding rows of a sequence plus its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub embeddings: Matrix,
    pub layout: SequenceLayout,
}
