//! Stack-instruction tag codec for (possibly nested or crossing) mention
//! spans.
//!
//! Each token carries a tag: the stack depth before the token plus a
//! sequence of instructions matching the grammar `POP* PUSH* POP*` — first
//! close mentions opened earlier, then open new ones, then close the
//! single-token mentions among them. `POP k` closes the k-th element from
//! the top of the stack, so crossing spans are representable. The textual
//! tag format is `<depth>:` followed by comma-separated `PUSH` / `POP<k>`,
//! e.g. `1:PUSH,POP1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::corefud::Mention;

/// Token span within a sentence, 0-based inclusive bounds.
pub type Span = (usize, usize);

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("duplicate span ({0}, {1}) cannot be encoded")]
    DuplicateSpan(usize, usize),
    #[error("token {pos}: declared depth {declared} does not match stack depth {actual}")]
    DepthMismatch {
        pos: usize,
        declared: usize,
        actual: usize,
    },
    #[error("token {pos}: POP{index} exceeds stack size {depth}")]
    PopOutOfRange {
        pos: usize,
        index: usize,
        depth: usize,
    },
    #[error("invalid tag text `{0}`")]
    BadTagText(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Instruction {
    Push,
    /// 1 = top of the stack.
    Pop(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Tag {
    pub depth_before: usize,
    pub instructions: Vec<Instruction>,
}

impl Tag {
    pub fn empty(depth: usize) -> Self {
        Tag {
            depth_before: depth,
            instructions: Vec::new(),
        }
    }

    pub fn depth_after(&self) -> usize {
        let pushes = self
            .instructions
            .iter()
            .filter(|i| matches!(i, Instruction::Push))
            .count();
        let pops = self.instructions.len() - pushes;
        self.depth_before + pushes - pops
    }

    /// Parse the textual format, e.g. `2:POP2` or `1:PUSH,POP1`.
    pub fn parse(text: &str) -> Result<Self, CodecError> {
        let (depth, rest) = text
            .split_once(':')
            .ok_or_else(|| CodecError::BadTagText(text.into()))?;
        let depth_before = depth
            .parse()
            .map_err(|_| CodecError::BadTagText(text.into()))?;
        let mut instructions = Vec::new();
        if !rest.is_empty() {
            for part in rest.split(',') {
                if part == "PUSH" {
                    instructions.push(Instruction::Push);
                } else if let Some(k) = part.strip_prefix("POP") {
                    let k: usize = k.parse().map_err(|_| CodecError::BadTagText(text.into()))?;
                    if k == 0 {
                        return Err(CodecError::BadTagText(text.into()));
                    }
                    instructions.push(Instruction::Pop(k));
                } else {
                    return Err(CodecError::BadTagText(text.into()));
                }
            }
        }
        Ok(Tag {
            depth_before,
            instructions,
        })
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.depth_before)?;
        for (i, ins) in self.instructions.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            match ins {
                Instruction::Push => write!(f, "PUSH")?,
                Instruction::Pop(k) => write!(f, "POP{k}")?,
            }
        }
        Ok(())
    }
}

/// Encode a sentence's span set into one tag per token.
///
/// Canonical form: at each token, POPs closing every open mention ending
/// here (most recently opened first), then PUSHes for mentions starting here
/// (longest-ending first), then POPs closing the single-token mentions just
/// pushed.
pub fn encode_mentions(sentence_length: usize, spans: &BTreeSet<Span>) -> Result<Vec<Tag>, CodecError> {
    for &(s, e) in spans {
        assert!(s <= e && e < sentence_length, "span out of range");
    }
    let mut tags = Vec::with_capacity(sentence_length);
    // Stack holds span identities; index 0 is the bottom.
    let mut stack: Vec<Span> = Vec::new();
    for t in 0..sentence_length {
        let mut tag = Tag::empty(stack.len());
        // Close mentions opened earlier that end here, most recent first.
        loop {
            let Some(i) = stack.iter().rposition(|&(_, e)| e == t) else {
                break;
            };
            tag.instructions.push(Instruction::Pop(stack.len() - i));
            stack.remove(i);
        }
        // Open mentions starting here, longest first.
        let mut starting: Vec<Span> = spans.iter().copied().filter(|&(s, _)| s == t).collect();
        starting.sort_by(|a, b| b.1.cmp(&a.1));
        for &sp in &starting {
            tag.instructions.push(Instruction::Push);
            stack.push(sp);
        }
        // Close single-token mentions just pushed.
        loop {
            let Some(i) = stack.iter().rposition(|&(s, e)| s == t && e == t) else {
                break;
            };
            tag.instructions.push(Instruction::Pop(stack.len() - i));
            stack.remove(i);
        }
        tags.push(tag);
    }
    debug_assert!(stack.is_empty());
    Ok(tags)
}

/// Result of [`decode_tags`]: the recovered spans plus the number of spans
/// left open at sequence end (discarded).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub spans: BTreeSet<Span>,
    pub discarded_open: usize,
}

/// Decode a tag sequence back into spans, verifying declared depths.
pub fn decode_tags(tags: &[Tag]) -> Result<Decoded, CodecError> {
    let mut spans = BTreeSet::new();
    let mut stack: Vec<usize> = Vec::new(); // span start positions
    for (pos, tag) in tags.iter().enumerate() {
        if tag.depth_before != stack.len() {
            return Err(CodecError::DepthMismatch {
                pos,
                declared: tag.depth_before,
                actual: stack.len(),
            });
        }
        for ins in &tag.instructions {
            match *ins {
                Instruction::Push => stack.push(pos),
                Instruction::Pop(k) => {
                    if k == 0 || k > stack.len() {
                        return Err(CodecError::PopOutOfRange {
                            pos,
                            index: k,
                            depth: stack.len(),
                        });
                    }
                    let start = stack.remove(stack.len() - k);
                    spans.insert((start, pos));
                }
            }
        }
    }
    Ok(Decoded {
        spans,
        discarded_open: stack.len(),
    })
}

/// Restrict a mention to the maximal run of consecutive positions containing
/// its head.
pub fn reduce_discontinuous(m: &Mention) -> Mention {
    let hi = m.positions.iter().position(|&p| p == m.head).unwrap();
    let mut lo = hi;
    while lo > 0 && m.positions[lo - 1] + 1 == m.positions[lo] {
        lo -= 1;
    }
    let mut hi2 = hi;
    while hi2 + 1 < m.positions.len() && m.positions[hi2] + 1 == m.positions[hi2 + 1] {
        hi2 += 1;
    }
    Mention {
        positions: m.positions[lo..=hi2].to_vec(),
        head: m.head,
    }
}

/// Prune a mention to its syntactic head token.
pub fn reduce_to_head(m: &Mention) -> Mention {
    Mention {
        positions: vec![m.head],
        head: m.head,
    }
}

/// Tag inventory with the depth-matching transition relation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagVocabulary {
    tags: Vec<Tag>,
    index: BTreeMap<Tag, usize>,
    pub max_depth: usize,
}

impl TagVocabulary {
    /// Distinct tags observed in the corpus plus the empty tag at every
    /// depth up to the maximum observed depth.
    pub fn build(corpus: impl IntoIterator<Item = Vec<Tag>>) -> Self {
        let mut set: BTreeSet<Tag> = BTreeSet::new();
        let mut max_depth = 0;
        for seq in corpus {
            for tag in seq {
                max_depth = max_depth.max(tag.depth_before).max(tag.depth_after());
                set.insert(tag);
            }
        }
        for d in 0..=max_depth {
            set.insert(Tag::empty(d));
        }
        let tags: Vec<Tag> = set.into_iter().collect();
        let index = tags
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        TagVocabulary {
            tags,
            index,
            max_depth,
        }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn tag(&self, i: usize) -> &Tag {
        &self.tags[i]
    }

    pub fn tags(&self) -> &[Tag] {
        &self.tags
    }

    pub fn index_of(&self, tag: &Tag) -> Option<usize> {
        self.index.get(tag).copied()
    }

    /// True iff tag `b` may follow tag `a`.
    pub fn compatible(&self, a: usize, b: usize) -> bool {
        self.tags[a].depth_after() == self.tags[b].depth_before
    }

    /// Tag admissible at sequence start (depth before = 0).
    pub fn start_ok(&self, i: usize) -> bool {
        self.tags[i].depth_before == 0
    }

    /// Tag admissible at sequence end (depth after = 0).
    pub fn end_ok(&self, i: usize) -> bool {
        self.tags[i].depth_after() == 0
    }
}

/// Deduplicate spans coming from several entities; returns the unique span
/// set and the number of dropped duplicates.
pub fn dedup_spans(spans: impl IntoIterator<Item = Span>) -> (BTreeSet<Span>, usize) {
    let mut set = BTreeSet::new();
    let mut dropped = 0;
    for sp in spans {
        if !set.insert(sp) {
            dropped += 1;
        }
    }
    (set, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spans(v: &[Span]) -> BTreeSet<Span> {
        v.iter().copied().collect()
    }

    fn texts(tags: &[Tag]) -> Vec<String> {
        tags.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn crossing_spans_encode_as_expected() {
        // Spec example in 1-based terms: n=4, {(1,3),(2,4)}.
        let tags = encode_mentions(4, &spans(&[(0, 2), (1, 3)])).unwrap();
        assert_eq!(texts(&tags), vec!["0:PUSH", "1:PUSH", "2:POP2", "1:POP1"]);
        let dec = decode_tags(&tags).unwrap();
        assert_eq!(dec.spans, spans(&[(0, 2), (1, 3)]));
        assert_eq!(dec.discarded_open, 0);
    }

    #[test]
    fn no_mentions_gives_empty_tags() {
        let tags = encode_mentions(3, &BTreeSet::new()).unwrap();
        assert_eq!(texts(&tags), vec!["0:", "0:", "0:"]);
        assert!(decode_tags(&tags).unwrap().spans.is_empty());
    }

    #[test]
    fn nested_single_token() {
        // 1-based {(1,3),(2,2)}.
        let tags = encode_mentions(3, &spans(&[(0, 2), (1, 1)])).unwrap();
        assert_eq!(texts(&tags), vec!["0:PUSH", "1:PUSH,POP1", "1:POP1"]);
        assert_eq!(decode_tags(&tags).unwrap().spans, spans(&[(0, 2), (1, 1)]));
    }

    #[test]
    fn unclosed_span_is_discarded() {
        let tags = vec![Tag::parse("0:PUSH").unwrap(), Tag::parse("1:").unwrap()];
        let dec = decode_tags(&tags).unwrap();
        assert!(dec.spans.is_empty());
        assert_eq!(dec.discarded_open, 1);
    }

    #[test]
    fn depth_mismatch_is_detected() {
        let tags = vec![Tag::parse("0:PUSH").unwrap(), Tag::parse("0:").unwrap()];
        assert!(matches!(
            decode_tags(&tags),
            Err(CodecError::DepthMismatch { pos: 1, .. })
        ));
    }

    #[test]
    fn pop_out_of_range_is_detected() {
        let tags = vec![Tag::parse("0:POP1").unwrap()];
        assert!(matches!(
            decode_tags(&tags),
            Err(CodecError::PopOutOfRange { pos: 0, .. })
        ));
    }

    #[test]
    fn reduce_discontinuous_keeps_head_run() {
        let m = Mention::new(vec![1, 2, 5, 6, 7], 6);
        assert_eq!(reduce_discontinuous(&m).positions, vec![5, 6, 7]);
        let c = Mention::new(vec![3, 4, 5], 4);
        assert_eq!(reduce_discontinuous(&c), c);
        let s = Mention::new(vec![4], 4);
        assert_eq!(reduce_discontinuous(&s), s);
    }

    #[test]
    fn reduce_to_head_is_singleton() {
        let m = Mention::new(vec![2, 3, 4, 5], 3);
        let r = reduce_to_head(&m);
        assert_eq!(r.positions, vec![3]);
        assert_eq!(r.head, 3);
        assert_eq!(reduce_to_head(&r), r);
    }

    #[test]
    fn vocabulary_from_empty_corpus_sentences() {
        let vocab = TagVocabulary::build(vec![vec![Tag::empty(0), Tag::empty(0)]]);
        assert_eq!(vocab.len(), 1);
        assert_eq!(vocab.tag(0), &Tag::empty(0));
    }

    #[test]
    fn vocabulary_from_crossing_example() {
        let tags = encode_mentions(4, &spans(&[(0, 2), (1, 3)])).unwrap();
        let vocab = TagVocabulary::build(vec![tags]);
        // 4 observed tags + empty tags at depths 0, 1, 2.
        assert_eq!(vocab.len(), 7);
        assert_eq!(vocab.max_depth, 2);
        for d in 0..=2 {
            assert!(vocab.index_of(&Tag::empty(d)).is_some());
        }
    }

    #[test]
    fn compatibility_is_depth_arithmetic() {
        let tags = encode_mentions(4, &spans(&[(0, 2), (1, 3)])).unwrap();
        let vocab = TagVocabulary::build(vec![tags]);
        let push0 = vocab.index_of(&Tag::parse("0:PUSH").unwrap()).unwrap();
        let push1 = vocab.index_of(&Tag::parse("1:PUSH").unwrap()).unwrap();
        let empty0 = vocab.index_of(&Tag::empty(0)).unwrap();
        assert!(vocab.compatible(push0, push1));
        assert!(!vocab.compatible(push0, empty0));
        assert!(vocab.start_ok(push0) && !vocab.start_ok(push1));
        assert!(!vocab.end_ok(push0) && vocab.end_ok(empty0));
    }

    #[test]
    fn tag_text_round_trip() {
        for t in ["0:", "2:POP2", "1:PUSH,POP1", "0:PUSH,PUSH,POP1"] {
            assert_eq!(Tag::parse(t).unwrap().to_string(), t);
        }
        assert!(Tag::parse("x").is_err());
        assert!(Tag::parse("1:POP0").is_err());
    }
}
