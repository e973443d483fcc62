//! CorefUD evaluation: head-based partial mention matching, MUC, B³ and
//! CEAF-e, the CoNLL average, and singleton handling.
//!
//! A response mention may match a key mention only if it contains the key
//! mention's head token and lies entirely within the key span. The global
//! assignment is a maximum-cardinality injective matching under that
//! relation; this approximates the official scorer, whose internal
//! tie-breaking is not published.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::corefud::{Document, Entity, Mention};

/// First token (reading order) whose syntactic parent lies outside the span
/// or is the root; falls back to the first token.
pub fn head_of_span(doc: &Document, positions: &[usize]) -> usize {
    let set: BTreeSet<usize> = positions.iter().copied().collect();
    for &p in positions {
        match doc.parent_position(p) {
            None => return p,
            Some(parent) if !set.contains(&parent) => return p,
            Some(_) => {}
        }
    }
    positions[0]
}

/// Injective partial mapping from response mentions onto key mentions.
#[derive(Debug, Clone)]
pub struct MentionAlignment {
    /// Per response mention, the matched key mention index.
    pub response_to_key: Vec<Option<usize>>,
    pub unmatched_key: Vec<usize>,
    pub unmatched_response: Vec<usize>,
}

fn eligible(key: &Mention, response: &Mention) -> bool {
    let key_set: BTreeSet<usize> = key.positions.iter().copied().collect();
    response.positions.contains(&key.head)
        && response.positions.iter().all(|p| key_set.contains(p))
}

/// Maximum-cardinality matching under the head-containment eligibility
/// relation; ties prefer the smallest eligible key span, then reading order.
pub fn align_mentions(key: &[Mention], response: &[Mention]) -> MentionAlignment {
    // Candidate key mentions per response mention, preferred order.
    let mut candidates: Vec<Vec<usize>> = response
        .iter()
        .map(|r| {
            let mut c: Vec<usize> = (0..key.len()).filter(|&k| eligible(&key[k], r)).collect();
            c.sort_by_key(|&k| (key[k].positions.len(), key[k].first(), key[k].last()));
            c
        })
        .collect();
    // Kuhn's augmenting-path algorithm, response side in reading order.
    let mut order: Vec<usize> = (0..response.len()).collect();
    order.sort_by_key(|&r| (response[r].first(), response[r].last()));
    let mut key_owner: Vec<Option<usize>> = vec![None; key.len()];
    fn try_assign(
        r: usize,
        candidates: &mut [Vec<usize>],
        key_owner: &mut [Option<usize>],
        visited: &mut [bool],
    ) -> bool {
        let cands = candidates[r].clone();
        for k in cands {
            if visited[k] {
                continue;
            }
            visited[k] = true;
            match key_owner[k] {
                None => {
                    key_owner[k] = Some(r);
                    return true;
                }
                Some(prev) => {
                    if try_assign(prev, candidates, key_owner, visited) {
                        key_owner[k] = Some(r);
                        return true;
                    }
                }
            }
        }
        false
    }
    for &r in &order {
        let mut visited = vec![false; key.len()];
        try_assign(r, &mut candidates, &mut key_owner, &mut visited);
    }
    let mut response_to_key = vec![None; response.len()];
    for (k, owner) in key_owner.iter().enumerate() {
        if let Some(r) = owner {
            response_to_key[*r] = Some(k);
        }
    }
    let unmatched_key = (0..key.len())
        .filter(|k| key_owner[*k].is_none())
        .collect();
    let unmatched_response = (0..response.len())
        .filter(|r| response_to_key[*r].is_none())
        .collect();
    MentionAlignment {
        response_to_key,
        unmatched_key,
        unmatched_response,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn new(p_num: f64, p_den: f64, r_num: f64, r_den: f64) -> Prf {
        let precision = if p_den > 0.0 { 100.0 * p_num / p_den } else { 0.0 };
        let recall = if r_den > 0.0 { 100.0 * r_num / r_den } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoreReport {
    pub muc: Prf,
    pub b_cubed: Prf,
    pub ceaf_e: Prf,
    /// Arithmetic mean of the three F1 scores.
    pub conll: f64,
    pub with_singletons: bool,
    /// Set when the key side was empty after singleton filtering and the
    /// 0/0 scores were defined as 0.
    pub empty_key: bool,
}

// Partitions over an abstract mention universe; `usize` ids.
type Partition = Vec<BTreeSet<usize>>;

fn muc(key: &Partition, response: &Partition) -> (f64, f64, f64, f64) {
    let cluster_of = |part: &Partition| {
        let mut map: BTreeMap<usize, usize> = BTreeMap::new();
        for (ci, c) in part.iter().enumerate() {
            for &m in c {
                map.insert(m, ci);
            }
        }
        map
    };
    let half = |from: &Partition, to: &Partition| {
        let to_cluster = cluster_of(to);
        let mut num = 0.0;
        let mut den = 0.0;
        for c in from {
            den += (c.len() - 1) as f64;
            let mut parts: BTreeSet<Option<usize>> = BTreeSet::new();
            let mut missing = 0usize;
            for &m in c {
                match to_cluster.get(&m) {
                    Some(&ci) => {
                        parts.insert(Some(ci));
                    }
                    None => missing += 1,
                }
            }
            num += (c.len() - (parts.len() + missing)) as f64;
        }
        (num, den)
    };
    let (r_num, r_den) = half(key, response);
    let (p_num, p_den) = half(response, key);
    (p_num, p_den, r_num, r_den)
}

fn b_cubed(key: &Partition, response: &Partition) -> (f64, f64, f64, f64) {
    let half = |from: &Partition, to: &Partition| {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in from {
            den += c.len() as f64;
            for r in to {
                let inter = c.intersection(r).count() as f64;
                if inter > 0.0 {
                    num += inter * inter / c.len() as f64;
                }
            }
        }
        (num, den)
    };
    let (r_num, r_den) = half(key, response);
    let (p_num, p_den) = half(response, key);
    (p_num, p_den, r_num, r_den)
}

/// Maximum-weight assignment (Hungarian algorithm on the negated matrix).
/// `weights` is rows x cols; returns per-row column choice.
fn max_assignment(weights: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let m = weights[0].len();
    let dim = n.max(m);
    let big = 0.0; // padded cells carry zero weight
    let cost = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            -weights[i][j]
        } else {
            big
        }
    };
    // Standard O(dim^3) Hungarian with potentials, 1-based internals.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; dim + 1];
    let mut v = vec![0.0; dim + 1];
    let mut p = vec![0usize; dim + 1];
    let mut way = vec![0usize; dim + 1];
    for i in 1..=dim {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; dim + 1];
        let mut used = vec![false; dim + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=dim {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=dim {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![None; n];
    for j in 1..=dim {
        if p[j] != 0 && p[j] - 1 < n && j - 1 < m {
            result[p[j] - 1] = Some(j - 1);
        }
    }
    result
}

fn ceaf_e(key: &Partition, response: &Partition) -> (f64, f64, f64, f64) {
    if key.is_empty() || response.is_empty() {
        return (0.0, response.len() as f64, 0.0, key.len() as f64);
    }
    let phi = |k: &BTreeSet<usize>, r: &BTreeSet<usize>| {
        2.0 * k.intersection(r).count() as f64 / (k.len() + r.len()) as f64
    };
    let weights: Vec<Vec<f64>> = key
        .iter()
        .map(|k| response.iter().map(|r| phi(k, r)).collect())
        .collect();
    let assign = max_assignment(&weights);
    let total: f64 = assign
        .iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| weights[i][j]))
        .sum();
    (total, response.len() as f64, total, key.len() as f64)
}

/// Score a response against a key. Mentions are aligned by the partial
/// matching criterion; unmatched response mentions become placeholders
/// absent from the key side.
pub fn score(key: &[Entity], response: &[Entity], with_singletons: bool) -> ScoreReport {
    let filter = |entities: &[Entity]| -> Vec<Entity> {
        entities
            .iter()
            .filter(|e| with_singletons || e.mentions.len() > 1)
            .cloned()
            .collect()
    };
    let key_entities = filter(key);
    let response_entities = filter(response);
    let key_mentions: Vec<Mention> = key_entities
        .iter()
        .flat_map(|e| e.mentions.iter().cloned())
        .collect();
    let response_mentions: Vec<Mention> = response_entities
        .iter()
        .flat_map(|e| e.mentions.iter().cloned())
        .collect();
    let alignment = align_mentions(&key_mentions, &response_mentions);
    // Universe ids: key mention index, or key.len()+i for unmatched
    // response mention i.
    let key_partition: Partition = {
        let mut out = Vec::new();
        let mut next = 0usize;
        for e in &key_entities {
            let ids: BTreeSet<usize> = (next..next + e.mentions.len()).collect();
            next += e.mentions.len();
            out.push(ids);
        }
        out
    };
    let response_partition: Partition = {
        let mut out = Vec::new();
        let mut idx = 0usize;
        for e in &response_entities {
            let mut ids = BTreeSet::new();
            for _ in &e.mentions {
                let id = match alignment.response_to_key[idx] {
                    Some(k) => k,
                    None => key_mentions.len() + idx,
                };
                ids.insert(id);
                idx += 1;
            }
            out.push(ids);
        }
        out
    };
    let empty_key = key_partition.is_empty();
    let [m, b, c] = [
        muc(&key_partition, &response_partition),
        b_cubed(&key_partition, &response_partition),
        ceaf_e(&key_partition, &response_partition),
    ]
    .map(|(pn, pd, rn, rd)| Prf::new(pn, pd, rn, rd));
    let conll = (m.f1 + b.f1 + c.f1) / 3.0;
    ScoreReport {
        muc: m,
        b_cubed: b,
        ceaf_e: c,
        conll,
        with_singletons,
        empty_key,
    }
}

/// Unweighted mean of per-dataset CoNLL scores.
pub fn macro_average(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mention(a: usize, b: usize) -> Mention {
        Mention::new((a..=b).collect(), a)
    }

    fn entity(id: &str, mentions: Vec<Mention>) -> Entity {
        Entity {
            id: id.into(),
            mentions,
        }
    }

    #[test]
    fn identity_scores_hundred() {
        let key = vec![
            entity("e1", vec![mention(0, 1), mention(4, 4), mention(9, 10)]),
            entity("e2", vec![mention(2, 3), mention(6, 7)]),
        ];
        let report = score(&key, &key, true);
        for prf in [report.muc, report.b_cubed, report.ceaf_e] {
            assert!((prf.precision - 100.0).abs() < 1e-9);
            assert!((prf.recall - 100.0).abs() < 1e-9);
            assert!((prf.f1 - 100.0).abs() < 1e-9);
        }
        assert!((report.conll - 100.0).abs() < 1e-9);
    }

    #[test]
    fn classic_muc_split_chain() {
        // Key {A,B,C,D}; response {A,B} {C,D}.
        let key = vec![entity(
            "k",
            vec![mention(0, 0), mention(2, 2), mention(4, 4), mention(6, 6)],
        )];
        let response = vec![
            entity("r1", vec![mention(0, 0), mention(2, 2)]),
            entity("r2", vec![mention(4, 4), mention(6, 6)]),
        ];
        let report = score(&key, &response, true);
        assert!((report.muc.recall - 100.0 * 2.0 / 3.0).abs() < 1e-6);
        assert!((report.muc.precision - 100.0).abs() < 1e-6);
        // Hand-computed B³ and CEAF-e for the same fixture.
        assert!((report.b_cubed.recall - 50.0).abs() < 1e-6);
        assert!((report.b_cubed.precision - 100.0).abs() < 1e-6);
        assert!((report.b_cubed.f1 - 100.0 * 2.0 / 3.0).abs() < 1e-6);
        assert!((report.ceaf_e.recall - 100.0 * 2.0 / 3.0).abs() < 1e-6);
        assert!((report.ceaf_e.precision - 100.0 / 3.0).abs() < 1e-6);
        assert!((report.ceaf_e.f1 - 100.0 * 4.0 / 9.0).abs() < 1e-6);
        let expected_conll = (80.0 + 100.0 * 2.0 / 3.0 + 100.0 * 4.0 / 9.0) / 3.0;
        assert!((report.conll - expected_conll).abs() < 1e-9);
    }

    #[test]
    fn singleton_toggle_changes_scores() {
        let key = vec![
            entity("k1", vec![mention(0, 0), mention(2, 2)]),
            entity("k2", vec![mention(5, 5)]),
        ];
        let response_without = vec![entity("r1", vec![mention(0, 0), mention(2, 2)])];
        let with = score(&key, &response_without, true);
        let without = score(&key, &response_without, false);
        assert!(without.conll > with.conll);
        // Adding the correct singleton changes only the with-singletons score.
        let response_with = vec![
            entity("r1", vec![mention(0, 0), mention(2, 2)]),
            entity("r2", vec![mention(5, 5)]),
        ];
        let with2 = score(&key, &response_with, true);
        let without2 = score(&key, &response_with, false);
        assert!(with2.conll > with.conll);
        assert!((without2.conll - without.conll).abs() < 1e-9);
    }

    #[test]
    fn head_reduced_responses_fully_align() {
        let key = vec![mention(0, 3), mention(5, 8)];
        let response: Vec<Mention> = key
            .iter()
            .map(|m| Mention::new(vec![m.head], m.head))
            .collect();
        let a = align_mentions(&key, &response);
        assert_eq!(a.response_to_key, vec![Some(0), Some(1)]);
        assert!(a.unmatched_key.is_empty());
    }

    #[test]
    fn overextended_response_does_not_match() {
        let key = vec![mention(1, 3)];
        let response = vec![mention(1, 4)];
        let a = align_mentions(&key, &response);
        assert_eq!(a.response_to_key, vec![None]);
        assert_eq!(a.unmatched_key, vec![0]);
    }

    #[test]
    fn alignment_is_maximal() {
        // Two nested key mentions sharing token 2 as span content; two
        // response mentions competing for them.
        let key = vec![
            Mention::new(vec![1, 2, 3], 2),
            Mention::new(vec![2], 2),
        ];
        let response = vec![Mention::new(vec![2], 2), Mention::new(vec![2, 3], 2)];
        let a = align_mentions(&key, &response);
        assert!(a.unmatched_response.is_empty());
        assert!(a.unmatched_key.is_empty());
        // The smaller key span goes to the reading-order-first response.
        assert_eq!(a.response_to_key, vec![Some(1), Some(0)]);
    }

    #[test]
    fn merging_clusters_never_raises_muc_precision() {
        // All ways of splitting 4 mentions into two key clusters: merging
        // them in the response cannot raise precision.
        let mentions: Vec<Mention> = (0..4).map(|i| mention(2 * i, 2 * i)).collect();
        for split in 1..4usize {
            let key = vec![
                entity("k1", mentions[..split].to_vec()),
                entity("k2", mentions[split..].to_vec()),
            ];
            let split_response = key.clone();
            let merged_response = vec![entity("r", mentions.clone())];
            let split_score = score(&key, &split_response, true);
            let merged_score = score(&key, &merged_response, true);
            assert!(merged_score.muc.precision <= split_score.muc.precision + 1e-9);
        }
    }

    #[test]
    fn empty_key_after_filtering_is_zero_with_flag() {
        let key = vec![entity("k", vec![mention(0, 0)])];
        let response = vec![entity("r", vec![mention(0, 0), mention(2, 2)])];
        let report = score(&key, &response, false);
        assert!(report.empty_key);
        assert_eq!(report.conll, 0.0);
    }

    #[test]
    fn conll_is_mean_of_f1s() {
        let key = vec![
            entity("k1", vec![mention(0, 0), mention(2, 2)]),
            entity("k2", vec![mention(4, 4), mention(6, 6), mention(8, 8)]),
        ];
        let response = vec![
            entity("r1", vec![mention(0, 0), mention(4, 4)]),
            entity("r2", vec![mention(2, 2), mention(6, 6)]),
        ];
        let r = score(&key, &response, true);
        assert!((r.conll - (r.muc.f1 + r.b_cubed.f1 + r.ceaf_e.f1) / 3.0).abs() < 1e-9);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let n = rng.gen_range(1..=4);
            let m = rng.gen_range(1..=4);
            let w: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let assign = max_assignment(&w);
            let got: f64 = assign
                .iter()
                .enumerate()
                .filter_map(|(i, j)| j.map(|j| w[i][j]))
                .sum();
            // Brute force over all injective row->col maps.
            fn best(w: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
                if row == w.len() {
                    return 0.0;
                }
                let mut b = best(w, row + 1, used); // leave row unassigned
                for j in 0..w[0].len() {
                    if !used[j] {
                        used[j] = true;
                        b = b.max(w[row][j] + best(w, row + 1, used));
                        used[j] = false;
                    }
                }
                b
            }
            let want = best(&w, 0, &mut vec![false; m]);
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn head_of_span_definition() {
        let text = "\
1\ta\ta\t_\t_\t_\t7\t_\t_\t_
2\tb\tb\t_\t_\t_\t7\t_\t_\t_
3\tc\tc\t_\t_\t_\t2\t_\t_\t_
4\td\td\t_\t_\t_\t3\t_\t_\t_
5\te\te\t_\t_\t_\t4\t_\t_\t_
6\tf\tf\t_\t_\t_\t7\t_\t_\t_
7\tg\tg\t_\t_\t_\t0\t_\t_\t_
";
        let doc = crate::corefud::parse_document(text).unwrap();
        // Span {2,3} 1-based = positions {1,2}: token 3's parent is 2
        // (inside), token 2's parent is 7 (outside) -> head is token 2.
        assert_eq!(head_of_span(&doc, &[1, 2]), 1);
        // Single-token span.
        assert_eq!(head_of_span(&doc, &[4]), 4);
        // Root is always a head.
        assert_eq!(head_of_span(&doc, &[5, 6]), 6);
    }
}
