//! Seeded synthetic-corpus generator. Produces CorefUD documents with
//! controllable nesting depth, crossing rate, empty-node rate, cluster
//! sizes and vocabulary — fuel for property tests and overfitting runs.
//! No linguistic realism is attempted.

use std::collections::BTreeSet;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::corefud::{Document, Entity, Mention, Sentence, Token};
use crate::scorer::head_of_span;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub documents: usize,
    /// Inclusive range of sentences per document.
    pub sentences_per_doc: (usize, usize),
    /// Inclusive range of regular tokens per sentence.
    pub sentence_len: (usize, usize),
    pub vocabulary: usize,
    /// Deepest allowed mention nesting.
    pub max_depth: usize,
    /// Chance that a new span is built to cross an existing one.
    pub crossing_prob: f64,
    /// Per-slot chance of inserting an empty node.
    pub empty_node_prob: f64,
    /// Inclusive range of entity clusters per document; (0, 0) disables
    /// coreference annotation entirely.
    pub entities: (usize, usize),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            documents: 4,
            sentences_per_doc: (3, 8),
            sentence_len: (6, 18),
            vocabulary: 100,
            max_depth: 3,
            crossing_prob: 0.1,
            empty_node_prob: 0.05,
            entities: (2, 6),
            seed: 0,
        }
    }
}

fn underscores() -> [String; 5] {
    std::array::from_fn(|_| "_".to_string())
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    assert!(lo <= hi, "empty range");
    rng.gen_range(lo..=hi)
}

/// Two continuous spans cross when each contains exactly one endpoint of
/// the other.
fn crosses(a: (usize, usize), b: (usize, usize)) -> bool {
    (a.0 < b.0 && b.0 <= a.1 && a.1 < b.1) || (b.0 < a.0 && a.0 <= b.1 && b.1 < a.1)
}

fn nesting_depth(span: (usize, usize), spans: &BTreeSet<(usize, usize)>) -> usize {
    spans
        .iter()
        .filter(|&&(s, e)| s <= span.0 && span.1 <= e && (s, e) != span)
        .count()
}

fn make_sentence(rng: &mut ChaCha8Rng, spec: &SynthSpec, doc_idx: usize, sent_idx: usize) -> Sentence {
    let regular = range_sample(rng, spec.sentence_len);
    let mut tokens = Vec::new();
    let mut empty_k = 0u32;
    for w in 0..=regular {
        // An empty node may precede token w+1 (or trail the sentence).
        if rng.gen_bool(spec.empty_node_prob) {
            empty_k += 1;
            let v = rng.gen_range(1..=spec.vocabulary);
            tokens.push(Token {
                word_index: w as u32,
                empty_index: Some(empty_k),
                form: "_".into(),
                lemma: format!("w{v}"),
                head: None,
                opaque: underscores(),
                misc_rest: Vec::new(),
                surfaced_form: "_".into(),
            });
        }
        if w == regular {
            break;
        }
        let v = rng.gen_range(1..=spec.vocabulary);
        let form = format!("w{v}");
        // Parent is any earlier regular token, forming a projective-ish tree.
        let head = if w == 0 { 0 } else { rng.gen_range(0..=w) as u32 };
        tokens.push(Token {
            word_index: (w + 1) as u32,
            empty_index: None,
            form: form.clone(),
            lemma: form.clone(),
            head: Some(head),
            opaque: underscores(),
            misc_rest: Vec::new(),
            surfaced_form: form,
        });
    }
    Sentence {
        sent_id: format!("synth-{}-{}", doc_idx + 1, sent_idx + 1),
        comments: Vec::new(),
        tokens,
        range_lines: Vec::new(),
    }
}

/// Sample distinct within-sentence spans honoring the depth bound; a
/// crossing span is constructed deliberately with `crossing_prob`.
fn sample_spans(rng: &mut ChaCha8Rng, spec: &SynthSpec, n: usize) -> BTreeSet<(usize, usize)> {
    let mut spans: BTreeSet<(usize, usize)> = BTreeSet::new();
    let attempts = (n / 2).max(2);
    for _ in 0..attempts {
        let candidate = if !spans.is_empty() && rng.gen_bool(spec.crossing_prob) {
            // Pick an existing span and straddle its right endpoint.
            let idx = rng.gen_range(0..spans.len());
            let &(a, b) = spans.iter().nth(idx).unwrap();
            if a < b && b + 1 < n {
                let start = rng.gen_range(a + 1..=b);
                let end = rng.gen_range(b + 1..=(b + 3).min(n - 1));
                (start, end)
            } else {
                continue;
            }
        } else {
            let start = rng.gen_range(0..n);
            let max_len = (n - start).min(5);
            (start, start + rng.gen_range(0..max_len))
        };
        if spans.contains(&candidate) || nesting_depth(candidate, &spans) >= spec.max_depth {
            continue;
        }
        // Enclosing an existing span deepens everything inside it too.
        let deepens_past_bound = spans.iter().any(|&(s, e)| {
            candidate.0 <= s && e <= candidate.1 && nesting_depth((s, e), &spans) + 1 >= spec.max_depth
        });
        if deepens_past_bound {
            continue;
        }
        spans.insert(candidate);
    }
    spans
}

/// Urn-process cluster assignment: an existing cluster attracts new
/// mentions in proportion to its size, yielding a few long chains and many
/// short ones. A mention never joins a cluster it would cross, since the
/// serialization cannot represent same-entity crossing.
fn assign_clusters(
    rng: &mut ChaCha8Rng,
    mentions: &[Mention],
    max_entities: usize,
) -> Vec<Vec<Mention>> {
    let mut clusters: Vec<Vec<Mention>> = Vec::new();
    let spans_cross = |m: &Mention, cluster: &[Mention]| {
        cluster
            .iter()
            .any(|o| crosses((m.first(), m.last()), (o.first(), o.last())))
    };
    for m in mentions {
        let open_new = clusters.len() < max_entities;
        let total: usize = clusters.iter().map(|c| c.len()).sum::<usize>() + open_new as usize;
        let mut pick = rng.gen_range(0..total);
        let mut chosen: Option<usize> = None;
        for (i, c) in clusters.iter().enumerate() {
            if pick < c.len() {
                chosen = Some(i);
                break;
            }
            pick -= c.len();
        }
        match chosen {
            Some(i) if !spans_cross(m, &clusters[i]) => clusters[i].push(m.clone()),
            Some(_) => {
                // Crossing conflict: fall back to any compatible cluster,
                // else open a new one, else drop the mention.
                if let Some(i) = (0..clusters.len()).find(|&i| !spans_cross(m, &clusters[i])) {
                    clusters[i].push(m.clone());
                } else if open_new {
                    clusters.push(vec![m.clone()]);
                }
            }
            None => clusters.push(vec![m.clone()]),
        }
    }
    clusters
}

pub fn generate(spec: &SynthSpec) -> Vec<Document> {
    assert!(spec.documents > 0 && spec.vocabulary > 0, "counts must be positive");
    assert!((0.0..=1.0).contains(&spec.crossing_prob));
    assert!((0.0..=1.0).contains(&spec.empty_node_prob));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut docs = Vec::with_capacity(spec.documents);
    for d in 0..spec.documents {
        let mut doc = Document {
            doc_id: format!("synth-{}", d + 1),
            ..Document::default()
        };
        let n_sentences = range_sample(&mut rng, spec.sentences_per_doc);
        for s in 0..n_sentences {
            doc.sentences.push(make_sentence(&mut rng, spec, d, s));
        }
        let max_entities = range_sample(&mut rng, spec.entities);
        if max_entities > 0 {
            let starts = doc.sentence_starts();
            let mut mentions: Vec<Mention> = Vec::new();
            for (si, sentence) in doc.sentences.iter().enumerate() {
                let n = sentence.tokens.len();
                for (a, b) in sample_spans(&mut rng, spec, n) {
                    let positions: Vec<usize> = (starts[si] + a..=starts[si] + b).collect();
                    let head = head_of_span(&doc, &positions);
                    mentions.push(Mention::new(positions, head));
                }
            }
            mentions.sort_by_key(|m| (m.first(), m.last()));
            let clusters = assign_clusters(&mut rng, &mentions, max_entities);
            doc.entities = clusters
                .into_iter()
                .enumerate()
                .map(|(i, ms)| Entity {
                    id: format!("e{}", i + 1),
                    mentions: ms,
                })
                .collect();
        }
        doc.normalize();
        docs.push(doc);
    }
    docs
}
