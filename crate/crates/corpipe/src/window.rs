//! Sliding context windows: one window per sentence, the sentence end held
//! a fixed right-context budget before the window end, left context filling
//! the rest of the position budget.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corefud::{Document, Mention};
use crate::union_find::UnionFind;

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("sentence {0} has {1} positions, more than the window size {2}")]
    SentenceTooLong(usize, usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct WindowConfig {
    pub window_size: usize,
    pub right_context: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window_size: 512,
            right_context: 50,
        }
    }
}

/// A window of document-global positions with its focus sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    /// Global position of the first token in the window.
    pub start: usize,
    /// One past the last token.
    pub end: usize,
    /// Focus sentence bounds (global), always inside [start, end).
    pub focus_start: usize,
    pub focus_end: usize,
    pub sentence_index: usize,
    /// Encoder position -> word-level token offset within the window. The
    /// compact encoder uses one piece per token, so this is the identity.
    pub subword_map: Vec<usize>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn left_context(&self) -> usize {
        self.focus_start - self.start
    }

    pub fn right_context(&self) -> usize {
        self.end - self.focus_end
    }

    pub fn contains_span(&self, m: &Mention) -> bool {
        m.first() >= self.start && m.last() < self.end
    }
}

/// One window per sentence. The right context is `cfg.right_context`
/// positions, enlarged when the left context cannot fill the budget; the
/// left context grows likewise near the document end.
pub fn build_windows(doc: &Document, cfg: &WindowConfig) -> Result<Vec<Window>, WindowError> {
    let starts = doc.sentence_starts();
    let total = doc.len();
    let mut windows = Vec::with_capacity(doc.sentences.len());
    for (si, sent) in doc.sentences.iter().enumerate() {
        let s_start = starts[si];
        let s_len = sent.tokens.len();
        let s_end = s_start + s_len;
        if s_len > cfg.window_size {
            return Err(WindowError::SentenceTooLong(si, s_len, cfg.window_size));
        }
        let budget = cfg.window_size - s_len;
        let before = s_start;
        let after = total - s_end;
        let mut right = cfg.right_context.min(budget).min(after);
        let mut left = (budget - right).min(before);
        // Spill unused budget to the other side.
        right = (budget - left).min(after);
        left = (budget - right).min(before);
        let start = s_start - left;
        let end = s_end + right;
        windows.push(Window {
            start,
            end,
            focus_start: s_start,
            focus_end: s_end,
            sentence_index: si,
            subword_map: (0..end - start).collect(),
        });
    }
    Ok(windows)
}

/// Per-window predicted link: the mention and its antecedent (`None` means
/// self, i.e. cluster-opening).
pub type PredictedLink = (Mention, Option<Mention>);

/// Merge per-window predictions into document-level clusters. Mentions are
/// deduplicated by span; when the same span carries different links in
/// different windows, the later window wins. Returns the partition as
/// groups of mentions ordered by document position.
pub fn stitch_predictions(per_window: &[Vec<PredictedLink>]) -> Vec<Vec<Mention>> {
    // span -> chosen link; later windows overwrite.
    let mut link_of: BTreeMap<Vec<usize>, (Mention, Option<Mention>)> = BTreeMap::new();
    for links in per_window {
        for (m, ante) in links {
            link_of.insert(m.positions.clone(), (m.clone(), ante.clone()));
        }
    }
    let mut mentions: Vec<Mention> = link_of.values().map(|(m, _)| m.clone()).collect();
    mentions.sort_by_key(|m| (m.first(), m.last()));
    let index: BTreeMap<Vec<usize>, usize> = mentions
        .iter()
        .enumerate()
        .map(|(i, m)| (m.positions.clone(), i))
        .collect();
    let mut uf = UnionFind::new(mentions.len());
    for (m, ante) in link_of.values() {
        if let Some(a) = ante {
            let (Some(&i), Some(&j)) = (index.get(&m.positions), index.get(&a.positions)) else {
                continue;
            };
            uf.union(i, j);
        }
    }
    uf.components()
        .into_iter()
        .map(|group| group.into_iter().map(|i| mentions[i].clone()).collect())
        .collect()
}
