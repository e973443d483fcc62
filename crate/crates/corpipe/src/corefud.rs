//! CorefUD-style CoNLL-U reading and writing.
//!
//! Modeled columns are ID, FORM, LEMMA, HEAD and MISC; the remaining columns
//! are preserved verbatim. Coreference annotation lives in the MISC column
//! under the `Entity=` attribute with the following bracket grammar (one or
//! more items concatenated without separators):
//!
//! ```text
//! item  := open | close | open ')'          # the last form is a single-token mention
//! open  := '(' id part? head?
//! close := id part? ')'
//! part  := '[' i '/' n ']'                  # part i of n of a discontinuous mention
//! head  := '-h' k                           # 1-based head offset into the mention's tokens
//! ```
//!
//! A closing item matches the most recently opened bracket of the same
//! entity id, so mentions of one entity may nest but must not cross.
//! Empty nodes (`n.k` ids) are parsed as ordinary tokens flagged
//! [`Token::is_empty`]; [`surface_empty_nodes`] prepends a marker character
//! to their model-facing form and [`restore_empty_nodes`] undoes it.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Default marker character prepended to surfaced empty nodes.
pub const DEFAULT_EMPTY_MARKER: char = '\u{2205}'; // ∅

#[derive(Debug, Error)]
pub enum CorefudError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unbalanced entity brackets for entity `{0}`")]
    Annotation(String),
    #[error("marker character {0:?} occurs in regular token form {1:?}")]
    MarkerCollision(char, String),
    #[error("format error: {0}")]
    Format(String),
}

fn perr<T>(line: usize, msg: impl Into<String>) -> Result<T, CorefudError> {
    Err(CorefudError::Parse {
        line,
        msg: msg.into(),
    })
}

/// One CoNLL-U token, regular or empty node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    /// `n` of the id `n` or `n.k`; 0 only for empty nodes `0.k`.
    pub word_index: u32,
    /// `k` of an empty-node id `n.k`.
    pub empty_index: Option<u32>,
    pub form: String,
    pub lemma: String,
    /// Syntactic parent word index; 0 means root, `None` means `_`.
    pub head: Option<u32>,
    /// UPOS, XPOS, FEATS, DEPREL, DEPS preserved verbatim.
    pub opaque: [String; 5],
    /// MISC attributes other than `Entity=`, preserved in order.
    pub misc_rest: Vec<String>,
    /// Form actually fed to the model; equals `form` until surfacing.
    pub surfaced_form: String,
}

impl Token {
    pub fn is_empty_node(&self) -> bool {
        self.empty_index.is_some()
    }

    fn id_string(&self) -> String {
        match self.empty_index {
            Some(k) => format!("{}.{}", self.word_index, k),
            None => self.word_index.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Sentence {
    pub sent_id: String,
    /// Comment lines other than `sent_id`, verbatim without `#`-stripping.
    pub comments: Vec<String>,
    pub tokens: Vec<Token>,
    /// Multiword-token range lines (`n-m`), stored verbatim keyed by the
    /// token index before which they appear.
    pub range_lines: Vec<(usize, String)>,
}

impl Sentence {
    /// Number of regular (non-empty) tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_empty_node()).count()
    }
}

/// A mention: document-global token positions (possibly discontinuous) plus
/// the position of the syntactic head, which must be one of them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Mention {
    pub positions: Vec<usize>,
    pub head: usize,
}

impl Mention {
    pub fn new(positions: Vec<usize>, head: usize) -> Self {
        debug_assert!(positions.contains(&head));
        Mention { positions, head }
    }

    pub fn first(&self) -> usize {
        self.positions[0]
    }

    pub fn last(&self) -> usize {
        *self.positions.last().unwrap()
    }

    pub fn is_continuous(&self) -> bool {
        self.positions.windows(2).all(|w| w[1] == w[0] + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: String,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Document {
    pub doc_id: String,
    /// Dataset of origin; set by loaders, serialized as a comment when set.
    pub corpus_id: String,
    pub sentences: Vec<Sentence>,
    pub entities: Vec<Entity>,
    /// Marker installed by [`surface_empty_nodes`].
    pub empty_marker: Option<char>,
}

impl Document {
    /// Total token count including empty nodes.
    pub fn len(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Global start position of each sentence.
    pub fn sentence_starts(&self) -> Vec<usize> {
        let mut starts = Vec::with_capacity(self.sentences.len());
        let mut acc = 0;
        for s in &self.sentences {
            starts.push(acc);
            acc += s.tokens.len();
        }
        starts
    }

    pub fn token(&self, pos: usize) -> &Token {
        let mut p = pos;
        for s in &self.sentences {
            if p < s.tokens.len() {
                return &s.tokens[p];
            }
            p -= s.tokens.len();
        }
        panic!("position {pos} out of range");
    }

    /// Index of the sentence containing a global position.
    pub fn sentence_of(&self, pos: usize) -> usize {
        let mut p = pos;
        for (i, s) in self.sentences.iter().enumerate() {
            if p < s.tokens.len() {
                return i;
            }
            p -= s.tokens.len();
        }
        panic!("position {pos} out of range");
    }

    /// Global position of the token a mention token's `head` field points
    /// to, or `None` for root / absent heads.
    pub fn parent_position(&self, pos: usize) -> Option<usize> {
        let sent_idx = self.sentence_of(pos);
        let start = self.sentence_starts()[sent_idx];
        let head = self.token(pos).head?;
        if head == 0 {
            return None;
        }
        self.sentences[sent_idx]
            .tokens
            .iter()
            .position(|t| !t.is_empty_node() && t.word_index == head)
            .map(|i| start + i)
    }

    /// Sort mentions by document position and entities by id.
    pub fn normalize(&mut self) {
        for e in &mut self.entities {
            e.mentions.sort_by_key(|m| (m.first(), m.last()));
        }
        self.entities.sort_by(|a, b| a.id.cmp(&b.id));
    }
}

// ---------------------------------------------------------------------------
// Parsing

struct MentionBuilder {
    total_parts: u32,
    parts_done: u32,
    positions: Vec<usize>,
    head_offset: Option<u32>,
    open_start: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct PartRef {
    index: u32,
    total: u32,
}

#[derive(Debug)]
enum BracketEvent {
    Open {
        part: Option<PartRef>,
        head: Option<u32>,
    },
    Close {
        part: Option<PartRef>,
    },
}

fn parse_entity_items(
    value: &str,
    line: usize,
) -> Result<Vec<(String, BracketEvent)>, CorefudError> {
    let mut events = Vec::new();
    let bytes: Vec<char> = value.chars().collect();
    let mut i = 0;
    let ident = |i: &mut usize| -> String {
        let start = *i;
        while *i < bytes.len() && (bytes[*i].is_alphanumeric() || bytes[*i] == '_') {
            *i += 1;
        }
        bytes[start..*i].iter().collect()
    };
    let part = |i: &mut usize, line: usize| -> Result<Option<PartRef>, CorefudError> {
        if *i < bytes.len() && bytes[*i] == '[' {
            *i += 1;
            let a = ident(i);
            if *i >= bytes.len() || bytes[*i] != '/' {
                return perr(line, "expected `/` in mention part reference");
            }
            *i += 1;
            let b = ident(i);
            if *i >= bytes.len() || bytes[*i] != ']' {
                return perr(line, "expected `]` in mention part reference");
            }
            *i += 1;
            let index = a
                .parse()
                .map_err(|_| CorefudError::Parse {
                    line,
                    msg: "bad part index".into(),
                })?;
            let total = b
                .parse()
                .map_err(|_| CorefudError::Parse {
                    line,
                    msg: "bad part total".into(),
                })?;
            Ok(Some(PartRef { index, total }))
        } else {
            Ok(None)
        }
    };
    while i < bytes.len() {
        if bytes[i] == '(' {
            i += 1;
            let id = ident(&mut i);
            if id.is_empty() {
                return perr(line, "empty entity id after `(`");
            }
            let p = part(&mut i, line)?;
            let mut head = None;
            if i + 1 < bytes.len() && bytes[i] == '-' && bytes[i + 1] == 'h' {
                i += 2;
                // Digits only: an entity id may follow with no separator.
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let h: String = bytes[start..i].iter().collect();
                head = Some(h.parse().map_err(|_| CorefudError::Parse {
                    line,
                    msg: "bad head offset".into(),
                })?);
            }
            events.push((id.clone(), BracketEvent::Open { part: p, head }));
            if i < bytes.len() && bytes[i] == ')' {
                i += 1;
                events.push((id, BracketEvent::Close { part: p }));
            }
        } else {
            let id = ident(&mut i);
            if id.is_empty() {
                return perr(line, format!("unexpected character {:?} in Entity", bytes[i]));
            }
            let p = part(&mut i, line)?;
            if i >= bytes.len() || bytes[i] != ')' {
                return perr(line, format!("expected `)` after entity id `{id}`"));
            }
            i += 1;
            events.push((id, BracketEvent::Close { part: p }));
        }
    }
    Ok(events)
}

/// Parse a text block containing exactly one document.
pub fn parse_document(text: &str) -> Result<Document, CorefudError> {
    let docs = parse_documents(text)?;
    match docs.len() {
        0 => Ok(Document::default()),
        1 => Ok(docs.into_iter().next().unwrap()),
        n => Err(CorefudError::Format(format!(
            "expected a single document, found {n}"
        ))),
    }
}

/// Parse a text block that may contain several `# newdoc`-separated documents.
pub fn parse_documents(text: &str) -> Result<Vec<Document>, CorefudError> {
    let mut docs: Vec<Document> = Vec::new();
    let mut doc = Document::default();
    let mut doc_has_content = false;
    // entity id -> stack of open mention builders
    let mut builders: BTreeMap<String, Vec<MentionBuilder>> = BTreeMap::new();
    let mut entities: BTreeMap<String, Vec<Mention>> = BTreeMap::new();
    let mut entity_order: Vec<String> = Vec::new();
    let mut pending_heads: Vec<(String, usize)> = Vec::new(); // mentions lacking -h, index into entities[id]
    let mut sent = Sentence::default();
    let mut global_pos = 0usize;

    let finish_sentence =
        |doc: &mut Document, sent: &mut Sentence, line: usize| -> Result<(), CorefudError> {
            if sent.tokens.is_empty() && sent.comments.is_empty() && sent.sent_id.is_empty() {
                return Ok(());
            }
            // Validate numbering and head bounds.
            let mut expected = 1u32;
            let mut last_word = 0u32;
            let mut last_empty = 0u32;
            let n = sent.regular_len() as u32;
            for t in &sent.tokens {
                match t.empty_index {
                    None => {
                        if t.word_index != expected {
                            return perr(line, format!("token id {} out of order", t.word_index));
                        }
                        last_word = t.word_index;
                        last_empty = 0;
                        expected += 1;
                    }
                    Some(k) => {
                        if t.word_index != last_word || k <= last_empty {
                            return perr(
                                line,
                                format!("empty node id {}.{} out of order", t.word_index, k),
                            );
                        }
                        last_empty = k;
                    }
                }
                if let Some(h) = t.head {
                    if h > n {
                        return perr(line, format!("head {h} out of range (sentence has {n})"));
                    }
                }
            }
            doc.sentences.push(std::mem::take(sent));
            Ok(())
        };

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i <= lines.len() {
        let (line_no, raw) = if i < lines.len() {
            (i + 1, lines[i].trim_end_matches('\r'))
        } else {
            (i + 1, "")
        };
        let is_newdoc = raw.starts_with("# newdoc");
        if (is_newdoc && doc_has_content) || i == lines.len() {
            finish_sentence(&mut doc, &mut sent, line_no)?;
            if doc_has_content {
                for (id, stack) in &builders {
                    if !stack.is_empty() {
                        return Err(CorefudError::Annotation(id.clone()));
                    }
                }
                for id in &entity_order {
                    doc.entities.push(Entity {
                        id: id.clone(),
                        mentions: entities.remove(id).unwrap_or_default(),
                    });
                }
                // Heads not given in the annotation: compute from the tree.
                for (id, idx) in pending_heads.drain(..) {
                    let e = doc.entities.iter().position(|e| e.id == id).unwrap();
                    let m = &doc.entities[e].mentions[idx];
                    let head = crate::scorer::head_of_span(&doc, &m.positions);
                    doc.entities[e].mentions[idx].head = head;
                }
                doc.normalize();
                validate_mentions(&doc)?;
                docs.push(std::mem::take(&mut doc));
                builders.clear();
                entities.clear();
                entity_order.clear();
                global_pos = 0;
                doc_has_content = false;
            }
            if i == lines.len() {
                break;
            }
        }
        if raw.is_empty() {
            finish_sentence(&mut doc, &mut sent, line_no)?;
            i += 1;
            continue;
        }
        if let Some(rest) = raw.strip_prefix('#') {
            let rest = rest.trim();
            if let Some(v) = rest.strip_prefix("newdoc id =") {
                doc.doc_id = v.trim().to_string();
            } else if rest == "newdoc" {
                // anonymous document
            } else if let Some(v) = rest.strip_prefix("corpus_id =") {
                doc.corpus_id = v.trim().to_string();
            } else if let Some(v) = rest.strip_prefix("sent_id =") {
                sent.sent_id = v.trim().to_string();
            } else {
                sent.comments.push(raw.to_string());
            }
            doc_has_content = true;
            i += 1;
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 10 {
            return perr(line_no, format!("expected 10 columns, found {}", cols.len()));
        }
        doc_has_content = true;
        let id = cols[0];
        if id.contains('-') {
            sent.range_lines.push((sent.tokens.len(), raw.to_string()));
            i += 1;
            continue;
        }
        let (word_index, empty_index) = match id.split_once('.') {
            Some((a, b)) => {
                let w = a.parse().map_err(|_| CorefudError::Parse {
                    line: line_no,
                    msg: format!("bad token id `{id}`"),
                })?;
                let k = b.parse().map_err(|_| CorefudError::Parse {
                    line: line_no,
                    msg: format!("bad empty-node id `{id}`"),
                })?;
                (w, Some(k))
            }
            None => (
                id.parse().map_err(|_| CorefudError::Parse {
                    line: line_no,
                    msg: format!("bad token id `{id}`"),
                })?,
                None,
            ),
        };
        let head = match cols[6] {
            "_" => None,
            h => Some(h.parse().map_err(|_| CorefudError::Parse {
                line: line_no,
                msg: format!("bad head `{h}`"),
            })?),
        };
        let mut misc_rest = Vec::new();
        let mut entity_value = None;
        if cols[9] != "_" {
            for attr in cols[9].split('|') {
                match attr.strip_prefix("Entity=") {
                    Some(v) => entity_value = Some(v.to_string()),
                    None => misc_rest.push(attr.to_string()),
                }
            }
        }
        let token = Token {
            word_index,
            empty_index,
            form: cols[1].to_string(),
            lemma: cols[2].to_string(),
            head,
            opaque: [
                cols[3].to_string(),
                cols[4].to_string(),
                cols[5].to_string(),
                cols[7].to_string(),
                cols[8].to_string(),
            ],
            misc_rest,
            surfaced_form: cols[1].to_string(),
        };
        sent.tokens.push(token);
        if let Some(value) = entity_value {
            for (eid, event) in parse_entity_items(&value, line_no)? {
                let stack = builders.entry(eid.clone()).or_default();
                match event {
                    BracketEvent::Open { part, head } => {
                        match part {
                            None | Some(PartRef { index: 1, .. }) => {
                                stack.push(MentionBuilder {
                                    total_parts: part.map_or(1, |p| p.total),
                                    parts_done: 0,
                                    positions: Vec::new(),
                                    head_offset: head,
                                    open_start: Some(global_pos),
                                });
                            }
                            Some(p) => {
                                let b = stack
                                    .iter_mut()
                                    .rev()
                                    .find(|b| {
                                        b.open_start.is_none() && b.parts_done + 1 == p.index
                                    })
                                    .ok_or_else(|| CorefudError::Annotation(eid.clone()))?;
                                b.open_start = Some(global_pos);
                            }
                        }
                    }
                    BracketEvent::Close { part } => {
                        let bi = stack
                            .iter()
                            .rposition(|b| b.open_start.is_some())
                            .ok_or_else(|| CorefudError::Annotation(eid.clone()))?;
                        let b = &mut stack[bi];
                        let start = b.open_start.take().unwrap();
                        b.positions.extend(start..=global_pos);
                        b.parts_done += 1;
                        if let Some(p) = part {
                            if p.index != b.parts_done || p.total != b.total_parts {
                                return Err(CorefudError::Annotation(eid.clone()));
                            }
                        }
                        if b.parts_done == b.total_parts {
                            let b = stack.remove(bi);
                            if !entities.contains_key(&eid) {
                                entity_order.push(eid.clone());
                            }
                            let ms = entities.entry(eid.clone()).or_default();
                            let head = match b.head_offset {
                                Some(h) => {
                                    let off = h as usize;
                                    if off == 0 || off > b.positions.len() {
                                        return Err(CorefudError::Annotation(eid.clone()));
                                    }
                                    b.positions[off - 1]
                                }
                                None => {
                                    pending_heads.push((eid.clone(), ms.len()));
                                    b.positions[0] // placeholder, fixed up at doc end
                                }
                            };
                            ms.push(Mention {
                                positions: b.positions,
                                head,
                            });
                        }
                    }
                }
            }
        }
        global_pos += 1;
        i += 1;
    }
    Ok(docs)
}

fn validate_mentions(doc: &Document) -> Result<(), CorefudError> {
    let starts = doc.sentence_starts();
    for e in &doc.entities {
        if e.mentions.is_empty() {
            return Err(CorefudError::Annotation(e.id.clone()));
        }
        for m in &e.mentions {
            let s = doc.sentence_of(m.first());
            let end = starts[s] + doc.sentences[s].tokens.len();
            if m.last() >= end {
                return Err(CorefudError::Format(format!(
                    "mention of entity `{}` crosses a sentence boundary",
                    e.id
                )));
            }
            if !m.positions.contains(&m.head) {
                return Err(CorefudError::Format(format!(
                    "mention head outside mention for entity `{}`",
                    e.id
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Serialization

/// Serialize a document; `parse_document(serialize_document(d)) == d` on the
/// modeled fields.
pub fn serialize_document(doc: &Document) -> String {
    let mut opens: BTreeMap<usize, Vec<(usize, String, usize, Option<(u32, u32)>, Option<u32>)>> =
        BTreeMap::new(); // pos -> (run_end, eid, run_start, part, head_off)
    let mut closes: BTreeMap<usize, Vec<(usize, String, Option<(u32, u32)>)>> = BTreeMap::new();
    for e in &doc.entities {
        for m in &e.mentions {
            let mut runs: Vec<(usize, usize)> = Vec::new();
            for &p in &m.positions {
                match runs.last_mut() {
                    Some(r) if r.1 + 1 == p => r.1 = p,
                    _ => runs.push((p, p)),
                }
            }
            let n = runs.len() as u32;
            let head_off = m.positions.iter().position(|&p| p == m.head).unwrap() as u32 + 1;
            for (idx, &(rs, re)) in runs.iter().enumerate() {
                let part = (n > 1).then_some((idx as u32 + 1, n));
                let head = (idx == 0).then_some(head_off);
                opens
                    .entry(rs)
                    .or_default()
                    .push((re, e.id.clone(), rs, part, head));
                closes.entry(re).or_default().push((rs, e.id.clone(), part));
            }
        }
    }
    let mut out = String::new();
    if !doc.doc_id.is_empty() {
        let _ = writeln!(out, "# newdoc id = {}", doc.doc_id);
    }
    if !doc.corpus_id.is_empty() {
        let _ = writeln!(out, "# corpus_id = {}", doc.corpus_id);
    }
    let mut pos = 0usize;
    for sent in &doc.sentences {
        if !sent.sent_id.is_empty() {
            let _ = writeln!(out, "# sent_id = {}", sent.sent_id);
        }
        for c in &sent.comments {
            let _ = writeln!(out, "{c}");
        }
        for (ti, t) in sent.tokens.iter().enumerate() {
            for (ri, line) in &sent.range_lines {
                if *ri == ti {
                    let _ = writeln!(out, "{line}");
                }
            }
            let mut entity = String::new();
            if let Some(evs) = opens.get(&pos) {
                let mut evs = evs.clone();
                // Longest mention first so nesting reads naturally.
                evs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                for (re, eid, _rs, part, head) in evs {
                    entity.push('(');
                    entity.push_str(&eid);
                    if let Some((i, n)) = part {
                        let _ = write!(entity, "[{i}/{n}]");
                    }
                    if let Some(h) = head {
                        let _ = write!(entity, "-h{h}");
                    }
                    if re == pos {
                        entity.push(')');
                    }
                }
            }
            if let Some(evs) = closes.get(&pos) {
                let mut evs = evs.clone();
                // Most recently opened first; single-token runs were
                // already closed inline above.
                evs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                for (rs, eid, part) in evs {
                    if rs == pos {
                        continue;
                    }
                    entity.push_str(&eid);
                    if let Some((i, n)) = part {
                        let _ = write!(entity, "[{i}/{n}]");
                    }
                    entity.push(')');
                }
            }
            let mut misc_parts = Vec::new();
            if !entity.is_empty() {
                misc_parts.push(format!("Entity={entity}"));
            }
            misc_parts.extend(t.misc_rest.iter().cloned());
            let misc = if misc_parts.is_empty() {
                "_".to_string()
            } else {
                misc_parts.join("|")
            };
            let head = t.head.map_or("_".to_string(), |h| h.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                t.id_string(),
                t.form,
                t.lemma,
                t.opaque[0],
                t.opaque[1],
                t.opaque[2],
                head,
                t.opaque[3],
                t.opaque[4],
                misc
            );
            pos += 1;
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Empty-node surfacing

/// Prepend `marker` to the model-facing form of every empty node. The form
/// is used where present, otherwise the (possibly empty) lemma.
pub fn surface_empty_nodes(doc: &Document, marker: char) -> Result<Document, CorefudError> {
    let mut out = doc.clone();
    for s in &mut out.sentences {
        for t in &mut s.tokens {
            if t.is_empty_node() {
                let body = if t.form != "_" && !t.form.is_empty() {
                    t.form.as_str()
                } else if t.lemma != "_" {
                    t.lemma.as_str()
                } else {
                    ""
                };
                t.surfaced_form = format!("{marker}{body}");
            } else if t.form.contains(marker) {
                return Err(CorefudError::MarkerCollision(marker, t.form.clone()));
            }
        }
    }
    out.empty_marker = Some(marker);
    Ok(out)
}

/// Inverse of [`surface_empty_nodes`]; identity on documents that were never
/// surfaced.
pub fn restore_empty_nodes(doc: &Document) -> Result<Document, CorefudError> {
    let Some(marker) = doc.empty_marker else {
        return Ok(doc.clone());
    };
    let mut out = doc.clone();
    for s in &mut out.sentences {
        for t in &mut s.tokens {
            if t.surfaced_form.starts_with(marker) {
                if !t.is_empty_node() {
                    return Err(CorefudError::Format(format!(
                        "marker-bearing token `{}` is not an empty node",
                        t.surfaced_form
                    )));
                }
                t.surfaced_form = t.form.clone();
            }
        }
    }
    out.empty_marker = None;
    Ok(out)
}
