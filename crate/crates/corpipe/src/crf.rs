//! Linear-chain CRF over the tag vocabulary.
//!
//! Transitions are real-valued and learned, but only depth-compatible tag
//! pairs are admissible: masked transitions score `-inf` in every
//! computation. The partition function uses the forward algorithm in log
//! space; gradients come from forward–backward marginals; decoding is
//! validity-masked Viterbi with ties broken toward the lexicographically
//! smallest index sequence.

use ndarray::{Array1, Array2, ArrayView2};
use thiserror::Error;

use crate::codec::TagVocabulary;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("no valid tag path exists under the masks")]
    NoValidPath,
    #[error("gold transition {from} -> {to} at position {pos} violates the validity mask")]
    InvalidGoldPath { pos: usize, from: usize, to: usize },
    #[error("gold tag {tag} violates the {which} mask")]
    InvalidGoldBoundary { tag: usize, which: &'static str },
    #[error("emissions are empty")]
    EmptyInput,
}

/// Transition scores plus the boolean structure masks.
#[derive(Debug, Clone)]
pub struct CrfParams<F: Scalar> {
    /// Learned transition scores, entry (a, b) = score of a -> b.
    pub transitions: Array2<F>,
    pub start_mask: Vec<bool>,
    pub end_mask: Vec<bool>,
    pub validity_mask: Array2<bool>,
}

impl<F: Scalar> CrfParams<F> {
    /// Structure masks from the tag vocabulary, transitions zero-initialized.
    pub fn from_vocabulary(vocab: &TagVocabulary) -> Self {
        let v = vocab.len();
        let mut validity_mask = Array2::from_elem((v, v), false);
        for a in 0..v {
            for b in 0..v {
                validity_mask[(a, b)] = vocab.compatible(a, b);
            }
        }
        CrfParams {
            transitions: Array2::zeros((v, v)),
            start_mask: (0..v).map(|i| vocab.start_ok(i)).collect(),
            end_mask: (0..v).map(|i| vocab.end_ok(i)).collect(),
            validity_mask,
        }
    }

    /// All transitions valid, all tags admissible at both boundaries.
    pub fn unconstrained(v: usize) -> Self {
        CrfParams {
            transitions: Array2::zeros((v, v)),
            start_mask: vec![true; v],
            end_mask: vec![true; v],
            validity_mask: Array2::from_elem((v, v), true),
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start_mask.len()
    }

    /// Effective transition score with the mask applied.
    fn trans(&self, a: usize, b: usize) -> F {
        if self.validity_mask[(a, b)] {
            self.transitions[(a, b)]
        } else {
            F::neg_infinity()
        }
    }
}

fn forward_lattice<F: Scalar>(emissions: ArrayView2<F>, params: &CrfParams<F>) -> Array2<F> {
    let (t_len, v) = emissions.dim();
    let mut alpha = Array2::from_elem((t_len, v), F::neg_infinity());
    for b in 0..v {
        if params.start_mask[b] {
            alpha[(0, b)] = emissions[(0, b)];
        }
    }
    let mut acc = vec![F::neg_infinity(); v];
    for t in 1..t_len {
        for b in 0..v {
            for (a, slot) in acc.iter_mut().enumerate() {
                *slot = alpha[(t - 1, a)] + params.trans(a, b);
            }
            alpha[(t, b)] = log_sum_exp(&acc) + emissions[(t, b)];
        }
    }
    alpha
}

fn backward_lattice<F: Scalar>(emissions: ArrayView2<F>, params: &CrfParams<F>) -> Array2<F> {
    let (t_len, v) = emissions.dim();
    let mut beta = Array2::from_elem((t_len, v), F::neg_infinity());
    for a in 0..v {
        if params.end_mask[a] {
            beta[(t_len - 1, a)] = F::zero();
        }
    }
    let mut acc = vec![F::neg_infinity(); v];
    for t in (0..t_len - 1).rev() {
        for a in 0..v {
            for (b, slot) in acc.iter_mut().enumerate() {
                *slot = params.trans(a, b) + emissions[(t + 1, b)] + beta[(t + 1, b)];
            }
            beta[(t, a)] = log_sum_exp(&acc);
        }
    }
    beta
}

/// Log of the sum over all valid paths of `exp(score)`.
pub fn log_partition<F: Scalar>(
    emissions: ArrayView2<F>,
    params: &CrfParams<F>,
) -> Result<F, CrfError> {
    let (t_len, v) = emissions.dim();
    if t_len == 0 {
        return Err(CrfError::EmptyInput);
    }
    let alpha = forward_lattice(emissions, params);
    let finals: Vec<F> = (0..v)
        .map(|a| {
            if params.end_mask[a] {
                alpha[(t_len - 1, a)]
            } else {
                F::neg_infinity()
            }
        })
        .collect();
    let z = log_sum_exp(&finals);
    if !z.is_finite() {
        return Err(CrfError::NoValidPath);
    }
    Ok(z)
}

/// Score of a specific path; errors if the path violates any mask.
pub fn path_score<F: Scalar>(
    emissions: ArrayView2<F>,
    gold: &[usize],
    params: &CrfParams<F>,
) -> Result<F, CrfError> {
    assert_eq!(gold.len(), emissions.nrows());
    if gold.is_empty() {
        return Err(CrfError::EmptyInput);
    }
    if !params.start_mask[gold[0]] {
        return Err(CrfError::InvalidGoldBoundary {
            tag: gold[0],
            which: "start",
        });
    }
    if !params.end_mask[*gold.last().unwrap()] {
        return Err(CrfError::InvalidGoldBoundary {
            tag: *gold.last().unwrap(),
            which: "end",
        });
    }
    let mut score = emissions[(0, gold[0])];
    for t in 1..gold.len() {
        if !params.validity_mask[(gold[t - 1], gold[t])] {
            return Err(CrfError::InvalidGoldPath {
                pos: t,
                from: gold[t - 1],
                to: gold[t],
            });
        }
        score = score + params.transitions[(gold[t - 1], gold[t])] + emissions[(t, gold[t])];
    }
    Ok(score)
}

/// Negative log-likelihood of the gold path; always >= 0.
pub fn crf_nll<F: Scalar>(
    emissions: ArrayView2<F>,
    gold: &[usize],
    params: &CrfParams<F>,
) -> Result<F, CrfError> {
    Ok(log_partition(emissions, params)? - path_score(emissions, gold, params)?)
}

/// NLL together with its gradients with respect to emissions and transitions.
pub fn crf_nll_grad<F: Scalar>(
    emissions: ArrayView2<F>,
    gold: &[usize],
    params: &CrfParams<F>,
) -> Result<(F, Array2<F>, Array2<F>), CrfError> {
    let (t_len, v) = emissions.dim();
    let gold_score = path_score(emissions, gold, params)?;
    let alpha = forward_lattice(emissions, params);
    let beta = backward_lattice(emissions, params);
    let finals: Vec<F> = (0..v)
        .map(|a| {
            if params.end_mask[a] {
                alpha[(t_len - 1, a)]
            } else {
                F::neg_infinity()
            }
        })
        .collect();
    let z = log_sum_exp(&finals);
    if !z.is_finite() {
        return Err(CrfError::NoValidPath);
    }
    // Unary marginals minus the gold indicator.
    let mut d_emissions = Array2::zeros((t_len, v));
    for t in 0..t_len {
        for a in 0..v {
            let lp = alpha[(t, a)] + beta[(t, a)] - z;
            if lp.is_finite() {
                d_emissions[(t, a)] = lp.exp();
            }
        }
        d_emissions[(t, gold[t])] = d_emissions[(t, gold[t])] - F::one();
    }
    // Pairwise marginals minus gold transition counts.
    let mut d_transitions = Array2::zeros((v, v));
    for t in 1..t_len {
        for a in 0..v {
            if !alpha[(t - 1, a)].is_finite() {
                continue;
            }
            for b in 0..v {
                if !params.validity_mask[(a, b)] {
                    continue;
                }
                let lp = alpha[(t - 1, a)]
                    + params.transitions[(a, b)]
                    + emissions[(t, b)]
                    + beta[(t, b)]
                    - z;
                if lp.is_finite() {
                    d_transitions[(a, b)] = d_transitions[(a, b)] + lp.exp();
                }
            }
        }
        d_transitions[(gold[t - 1], gold[t])] =
            d_transitions[(gold[t - 1], gold[t])] - F::one();
    }
    Ok((z - gold_score, d_emissions, d_transitions))
}

/// Per-position marginal probabilities (used by diagnostics).
pub fn marginals<F: Scalar>(
    emissions: ArrayView2<F>,
    params: &CrfParams<F>,
) -> Result<Array2<F>, CrfError> {
    let (t_len, v) = emissions.dim();
    let z = log_partition(emissions, params)?;
    let alpha = forward_lattice(emissions, params);
    let beta = backward_lattice(emissions, params);
    let mut m = Array2::zeros((t_len, v));
    for t in 0..t_len {
        for a in 0..v {
            let lp = alpha[(t, a)] + beta[(t, a)] - z;
            if lp.is_finite() {
                m[(t, a)] = lp.exp();
            }
        }
    }
    Ok(m)
}

/// Argmax-scoring valid path. Ties break toward the lexicographically
/// smallest index sequence: the DP runs from the back and the front-to-back
/// reconstruction picks the smallest index achieving the optimum.
pub fn viterbi_decode<F: Scalar>(
    emissions: ArrayView2<F>,
    params: &CrfParams<F>,
) -> Result<Vec<usize>, CrfError> {
    let (t_len, v) = emissions.dim();
    if t_len == 0 {
        return Err(CrfError::EmptyInput);
    }
    // delta[t][a] = best score of a path over t..T starting with tag a.
    let mut delta = Array2::from_elem((t_len, v), F::neg_infinity());
    for a in 0..v {
        if params.end_mask[a] {
            delta[(t_len - 1, a)] = emissions[(t_len - 1, a)];
        }
    }
    for t in (0..t_len - 1).rev() {
        for a in 0..v {
            let mut best = F::neg_infinity();
            for b in 0..v {
                let s = params.trans(a, b) + delta[(t + 1, b)];
                if s > best {
                    best = s;
                }
            }
            delta[(t, a)] = emissions[(t, a)] + best;
        }
    }
    let start_scores: Array1<F> = (0..v)
        .map(|a| {
            if params.start_mask[a] {
                delta[(0, a)]
            } else {
                F::neg_infinity()
            }
        })
        .collect();
    let best = start_scores
        .iter()
        .cloned()
        .fold(F::neg_infinity(), F::max);
    if !best.is_finite() {
        return Err(CrfError::NoValidPath);
    }
    let mut path = Vec::with_capacity(t_len);
    let first = (0..v)
        .find(|&a| params.start_mask[a] && start_scores[a] == best)
        .unwrap();
    path.push(first);
    for t in 1..t_len {
        let prev = *path.last().unwrap();
        let mut best_next = F::neg_infinity();
        for b in 0..v {
            let s = params.trans(prev, b) + delta[(t, b)];
            if s > best_next {
                best_next = s;
            }
        }
        let next = (0..v)
            .find(|&b| params.trans(prev, b) + delta[(t, b)] == best_next)
            .expect("viterbi reconstruction");
        path.push(next);
    }
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode_mentions, TagVocabulary};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Brute-force enumeration over all tag paths; the independent oracle.
    pub fn brute_force<F: Scalar>(
        emissions: ArrayView2<F>,
        params: &CrfParams<F>,
    ) -> (F, Option<(F, Vec<usize>)>) {
        let (t_len, v) = emissions.dim();
        let mut scores: Vec<F> = Vec::new();
        let mut best: Option<(F, Vec<usize>)> = None;
        let total = v.pow(t_len as u32);
        'outer: for mut code in 0..total {
            let mut path = Vec::with_capacity(t_len);
            for _ in 0..t_len {
                path.push(code % v);
                code /= v;
            }
            if !params.start_mask[path[0]] || !params.end_mask[*path.last().unwrap()] {
                continue;
            }
            let mut s = emissions[(0, path[0])];
            for t in 1..t_len {
                if !params.validity_mask[(path[t - 1], path[t])] {
                    continue 'outer;
                }
                s = s + params.transitions[(path[t - 1], path[t])] + emissions[(t, path[t])];
            }
            scores.push(s);
            let better = match &best {
                None => true,
                Some((bs, bp)) => s > *bs || (s == *bs && path < *bp),
            };
            if better {
                best = Some((s, path));
            }
        }
        (log_sum_exp(&scores), best)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        t_len: usize,
        v: usize,
    ) -> (Array2<f64>, CrfParams<f64>) {
        let emissions = Array2::from_shape_fn((t_len, v), |_| rng.gen_range(-2.0..2.0));
        let mut params = CrfParams::unconstrained(v);
        params.transitions = Array2::from_shape_fn((v, v), |_| rng.gen_range(-1.0..1.0));
        (emissions, params)
    }

    #[test]
    fn single_position_single_tag() {
        let mut params = CrfParams::<f64>::unconstrained(2);
        params.start_mask = vec![true, false];
        params.end_mask = vec![true, false];
        let emissions = ndarray::array![[1.25, 7.0]];
        assert!((log_partition(emissions.view(), &params).unwrap() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn partition_matches_brute_force_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (e, p) = random_instance(&mut rng, 3, 4);
            let (z_bf, _) = brute_force(e.view(), &p);
            let z = log_partition(e.view(), &p).unwrap();
            assert!((z - z_bf).abs() < 1e-10, "{z} vs {z_bf}");
        }
    }

    #[test]
    fn partition_matches_brute_force_with_depth_masks() {
        let spans: std::collections::BTreeSet<_> = [(0usize, 2usize), (1, 3)].into_iter().collect();
        let tags = encode_mentions(4, &spans).unwrap();
        let vocab = TagVocabulary::build(vec![tags]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = vocab.len();
        for _ in 0..10 {
            let mut params = CrfParams::<f64>::from_vocabulary(&vocab);
            params.transitions = Array2::from_shape_fn((v, v), |_| rng.gen_range(-1.0..1.0));
            let e = Array2::from_shape_fn((4, v), |_| rng.gen_range(-2.0..2.0));
            let (z_bf, _) = brute_force(e.view(), &params);
            let z = log_partition(e.view(), &params).unwrap();
            assert!((z - z_bf).abs() < 1e-10);
        }
    }

    #[test]
    fn no_valid_path_is_an_error() {
        let mut params = CrfParams::<f64>::unconstrained(2);
        params.start_mask = vec![false, false];
        let e = ndarray::array![[0.0, 0.0]];
        assert!(matches!(
            log_partition(e.view(), &params),
            Err(CrfError::NoValidPath)
        ));
    }

    #[test]
    fn nll_zero_when_gold_is_only_path() {
        let mut params = CrfParams::<f64>::unconstrained(2);
        params.start_mask = vec![true, false];
        params.end_mask = vec![true, false];
        params.validity_mask = ndarray::array![[true, false], [false, false]];
        let e = ndarray::array![[0.3, 0.9], [-1.0, 2.0]];
        let nll = crf_nll(e.view(), &[0, 0], &params).unwrap();
        assert!(nll.abs() < 1e-12);
    }

    #[test]
    fn nll_matches_brute_force_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let (e, p) = random_instance(&mut rng, 4, 3);
            let gold = vec![
                rng.gen_range(0..3),
                rng.gen_range(0..3),
                rng.gen_range(0..3),
                rng.gen_range(0..3),
            ];
            let (z_bf, _) = brute_force(e.view(), &p);
            let gs = path_score(e.view(), &gold, &p).unwrap();
            let nll = crf_nll(e.view(), &gold, &p).unwrap();
            assert!((nll - (z_bf - gs)).abs() < 1e-10);
            assert!(nll >= -1e-12);
        }
    }

    #[test]
    fn nll_decreases_when_gold_emissions_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (mut e, p) = random_instance(&mut rng, 3, 3);
        let gold = vec![1, 0, 2];
        let before = crf_nll(e.view(), &gold, &p).unwrap();
        for (t, &g) in gold.iter().enumerate() {
            e[(t, g)] += 0.5;
        }
        let after = crf_nll(e.view(), &gold, &p).unwrap();
        assert!(after < before);
    }

    #[test]
    fn invalid_gold_names_first_violation() {
        let mut params = CrfParams::<f64>::unconstrained(2);
        params.validity_mask[(0, 1)] = false;
        let e = Array2::zeros((2, 2));
        match crf_nll(e.view(), &[0, 1], &params) {
            Err(CrfError::InvalidGoldPath { pos: 1, from: 0, to: 1 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn viterbi_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let (e, p) = random_instance(&mut rng, 4, 4);
            let (_, best) = brute_force(e.view(), &p);
            let path = viterbi_decode(e.view(), &p).unwrap();
            assert_eq!(path, best.unwrap().1);
        }
    }

    #[test]
    fn viterbi_prefers_all_empty_under_dominant_emissions() {
        let spans: std::collections::BTreeSet<_> = [(0usize, 1usize)].into_iter().collect();
        let tags = encode_mentions(2, &spans).unwrap();
        let vocab = TagVocabulary::build(vec![tags]);
        let params = CrfParams::<f64>::from_vocabulary(&vocab);
        let empty0 = vocab.index_of(&crate::codec::Tag::empty(0)).unwrap();
        let mut e = Array2::from_elem((3, vocab.len()), 0.0);
        for t in 0..3 {
            e[(t, empty0)] = 10.0;
        }
        let path = viterbi_decode(e.view(), &params).unwrap();
        assert_eq!(path, vec![empty0; 3]);
    }

    #[test]
    fn viterbi_never_ends_open_despite_push_pressure() {
        let spans: std::collections::BTreeSet<_> = [(0usize, 1usize)].into_iter().collect();
        let tags = encode_mentions(2, &spans).unwrap();
        let vocab = TagVocabulary::build(vec![tags]);
        let params = CrfParams::<f64>::from_vocabulary(&vocab);
        let push0 = vocab.index_of(&crate::codec::Tag::parse("0:PUSH").unwrap()).unwrap();
        let mut e = Array2::from_elem((3, vocab.len()), 0.0);
        for t in 0..3 {
            e[(t, push0)] = 10.0;
        }
        let path = viterbi_decode(e.view(), &params).unwrap();
        let last = vocab.tag(*path.last().unwrap());
        assert_eq!(last.depth_after(), 0);
        // The whole path is depth-consistent, so decode_tags cannot fail.
        let tag_path: Vec<_> = path.iter().map(|&i| vocab.tag(i).clone()).collect();
        crate::codec::decode_tags(&tag_path).unwrap();
    }

    #[test]
    fn path_distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (t_len, v) in [(3usize, 4usize), (5, 3), (4, 6)] {
            let (e, p) = random_instance(&mut rng, t_len, v);
            let z = log_partition(e.view(), &p).unwrap();
            let (z_bf, _) = brute_force(e.view(), &p);
            assert!((z - z_bf).abs() < 1e-9);
            // exp(score - z) over all valid paths sums to 1.
            let mut total = 0.0;
            let count = v.pow(t_len as u32);
            'outer: for mut code in 0..count {
                let mut path = Vec::new();
                for _ in 0..t_len {
                    path.push(code % v);
                    code /= v;
                }
                let mut s = e[(0, path[0])];
                for t in 1..t_len {
                    if !p.validity_mask[(path[t - 1], path[t])] {
                        continue 'outer;
                    }
                    s += p.transitions[(path[t - 1], path[t])] + e[(t, path[t])];
                }
                total += (s - z).exp();
            }
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (e, p) = random_instance(&mut rng, 4, 3);
        let gold = vec![0, 2, 1, 0];
        let (_, de, dt) = crf_nll_grad(e.view(), &gold, &p).unwrap();
        let h = 1e-5;
        for t in 0..4 {
            for a in 0..3 {
                let mut ep = e.clone();
                ep[(t, a)] += h;
                let mut em = e.clone();
                em[(t, a)] -= h;
                let fd = (crf_nll(ep.view(), &gold, &p).unwrap()
                    - crf_nll(em.view(), &gold, &p).unwrap())
                    / (2.0 * h);
                let rel = (de[(t, a)] - fd).abs() / fd.abs().max(de[(t, a)].abs()).max(1e-3);
                assert!(rel < 1e-4, "emission grad mismatch at ({t},{a})");
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let mut pp = p.clone();
                pp.transitions[(a, b)] += h;
                let mut pm = p.clone();
                pm.transitions[(a, b)] -= h;
                let fd = (crf_nll(e.view(), &gold, &pp).unwrap()
                    - crf_nll(e.view(), &gold, &pm).unwrap())
                    / (2.0 * h);
                let rel = (dt[(a, b)] - fd).abs() / fd.abs().max(dt[(a, b)].abs()).max(1e-3);
                assert!(rel < 1e-4, "transition grad mismatch at ({a},{b})");
            }
        }
    }
}
