//! Coreference linking: antecedent distributions over previous mentions via
//! masked dot-product attention, all-antecedent cross-entropy training, and
//! most-probable-antecedent decoding into clusters.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::{log_sum_exp, Scalar};
use crate::union_find::UnionFind;

#[derive(Debug, Error)]
pub enum LinkerError {
    #[error("mention representation has dimension {actual}, expected {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("gold antecedent set for mention {0} is empty")]
    EmptyTargets(usize),
    #[error("gold antecedent {j} of mention {i} is not a preceding mention")]
    BadTarget { i: usize, j: usize },
}

/// Two-layer head: hidden ReLU layer (in -> hidden, with bias) followed by a
/// bias-free linear layer (hidden -> out).
#[derive(Debug, Clone)]
pub struct Mlp<F: Scalar> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct MlpGrads<F: Scalar> {
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
}

impl<F: Scalar> Mlp<F> {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            w1: Array2::zeros((input, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, output)),
        }
    }

    pub fn grads_like(&self) -> MlpGrads<F> {
        MlpGrads {
            w1: Array2::zeros(self.w1.dim()),
            b1: Array1::zeros(self.b1.dim()),
            w2: Array2::zeros(self.w2.dim()),
        }
    }

    /// Returns the output and the pre-activation hidden layer (the backward
    /// cache).
    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
        let h_pre = x.dot(&self.w1) + &self.b1;
        let h = h_pre.mapv(|v| v.max(F::zero()));
        (h.dot(&self.w2), h_pre)
    }

    /// Backward pass; accumulates parameter gradients and returns the input
    /// gradient.
    pub fn backward(
        &self,
        x: ArrayView2<F>,
        h_pre: &Array2<F>,
        d_out: ArrayView2<F>,
        grads: &mut MlpGrads<F>,
    ) -> Array2<F> {
        let h = h_pre.mapv(|v| v.max(F::zero()));
        grads.w2 = &grads.w2 + &h.t().dot(&d_out);
        let dh = d_out.dot(&self.w2.t());
        let dh_pre = &dh * &h_pre.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
        grads.w1 = &grads.w1 + &x.t().dot(&dh_pre);
        grads.b1 = &grads.b1 + &dh_pre.sum_axis(Axis(0));
        dh_pre.dot(&self.w1.t())
    }
}

/// Q and K heads over mention representations of dimension 2D.
#[derive(Debug, Clone)]
pub struct LinkerParams<F: Scalar> {
    pub q: Mlp<F>,
    pub k: Mlp<F>,
    /// Scale logits by 1/sqrt(D); off by default.
    pub scale: bool,
}

impl<F: Scalar> LinkerParams<F> {
    /// Standard shape for encoder dimension `d`: 2D -> 4D -> D.
    pub fn zeros(d: usize) -> Self {
        LinkerParams {
            q: Mlp::zeros(2 * d, 4 * d, d),
            k: Mlp::zeros(2 * d, 4 * d, d),
            scale: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.q.w2.ncols()
    }
}

pub struct LinkerCache<F: Scalar> {
    q: Array2<F>,
    k: Array2<F>,
    qh: Array2<F>,
    kh: Array2<F>,
}

/// Entry (i, j) = Q(i)·K(j) for j <= i, `-inf` above the diagonal.
pub fn antecedent_logits<F: Scalar>(
    mentions: ArrayView2<F>,
    params: &LinkerParams<F>,
) -> Result<(Array2<F>, LinkerCache<F>), LinkerError> {
    if mentions.ncols() != params.q.w1.nrows() {
        return Err(LinkerError::DimensionMismatch {
            expected: params.q.w1.nrows(),
            actual: mentions.ncols(),
        });
    }
    let (q, qh) = params.q.forward(mentions);
    let (k, kh) = params.k.forward(mentions);
    let scale = if params.scale {
        F::one() / F::from_usize_(params.output_dim()).sqrt()
    } else {
        F::one()
    };
    let m = mentions.nrows();
    let mut logits = Array2::from_elem((m, m), F::neg_infinity());
    for i in 0..m {
        for j in 0..=i {
            logits[(i, j)] = q.row(i).dot(&k.row(j)) * scale;
        }
    }
    Ok((logits, LinkerCache { q, k, qh, kh }))
}

/// Gold antecedent sets: G(i) = previous same-entity mentions, or {i} when
/// none exist; `cap` keeps the most recent k.
pub fn gold_targets(clusters: &[usize], cap: Option<usize>) -> Vec<Vec<usize>> {
    let mut targets = Vec::with_capacity(clusters.len());
    for i in 0..clusters.len() {
        let mut g: Vec<usize> = (0..i).filter(|&j| clusters[j] == clusters[i]).collect();
        if g.is_empty() {
            g.push(i);
        } else if let Some(k) = cap {
            let keep = g.len().saturating_sub(k);
            g.drain(..keep);
        }
        targets.push(g);
    }
    targets
}

/// Interpretation of "predict all antecedents" as a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LossMode {
    /// Cross-entropy against the uniform distribution over G(i).
    #[default]
    UniformTarget,
    /// Negative log of the total probability mass on G(i).
    Marginal,
}

fn row_log_probs<F: Scalar>(logits: ArrayView2<F>, i: usize) -> Vec<F> {
    let row: Vec<F> = (0..=i).map(|j| logits[(i, j)]).collect();
    let z = log_sum_exp(&row);
    row.into_iter().map(|l| l - z).collect()
}

/// Mean over mentions of the antecedent cross-entropy.
pub fn antecedent_loss<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[Vec<usize>],
    mode: LossMode,
) -> Result<F, LinkerError> {
    Ok(antecedent_loss_grad(logits, targets, mode)?.0)
}

/// Loss plus gradient with respect to the logits (zero above the diagonal).
pub fn antecedent_loss_grad<F: Scalar>(
    logits: ArrayView2<F>,
    targets: &[Vec<usize>],
    mode: LossMode,
) -> Result<(F, Array2<F>), LinkerError> {
    let m = logits.nrows();
    assert_eq!(targets.len(), m);
    let mut loss = F::zero();
    let mut d_logits = Array2::zeros(logits.dim());
    let inv_m = F::one() / F::from_usize_(m);
    for (i, g) in targets.iter().enumerate() {
        if g.is_empty() {
            return Err(LinkerError::EmptyTargets(i));
        }
        if let Some(&j) = g.iter().find(|&&j| j > i) {
            return Err(LinkerError::BadTarget { i, j });
        }
        let log_p = row_log_probs(logits, i);
        match mode {
            LossMode::UniformTarget => {
                let inv_g = F::one() / F::from_usize_(g.len());
                for &j in g {
                    loss = loss - log_p[j] * inv_g * inv_m;
                }
                for j in 0..=i {
                    let u = if g.contains(&j) { inv_g } else { F::zero() };
                    d_logits[(i, j)] = (log_p[j].exp() - u) * inv_m;
                }
            }
            LossMode::Marginal => {
                let gold_mass: Vec<F> = g.iter().map(|&j| log_p[j]).collect();
                let log_total = log_sum_exp(&gold_mass);
                loss = loss - log_total * inv_m;
                for j in 0..=i {
                    let q = if g.contains(&j) {
                        (log_p[j] - log_total).exp()
                    } else {
                        F::zero()
                    };
                    d_logits[(i, j)] = (log_p[j].exp() - q) * inv_m;
                }
            }
        }
    }
    Ok((loss, d_logits))
}

/// Backpropagate logits gradients through the Q/K heads; returns the
/// gradient with respect to the mention representations.
pub fn linker_backward<F: Scalar>(
    mentions: ArrayView2<F>,
    params: &LinkerParams<F>,
    cache: &LinkerCache<F>,
    d_logits: ArrayView2<F>,
    q_grads: &mut MlpGrads<F>,
    k_grads: &mut MlpGrads<F>,
) -> Array2<F> {
    let scale = if params.scale {
        F::one() / F::from_usize_(params.output_dim()).sqrt()
    } else {
        F::one()
    };
    let m = mentions.nrows();
    let d = params.output_dim();
    let mut dq = Array2::zeros((m, d));
    let mut dk = Array2::zeros((m, d));
    for i in 0..m {
        for j in 0..=i {
            let g = d_logits[(i, j)] * scale;
            if g == F::zero() {
                continue;
            }
            for c in 0..d {
                dq[(i, c)] = dq[(i, c)] + g * cache.k[(j, c)];
                dk[(j, c)] = dk[(j, c)] + g * cache.q[(i, c)];
            }
        }
    }
    let dx_q = params.q.backward(mentions, &cache.qh, dq.view(), q_grads);
    let dx_k = params.k.backward(mentions, &cache.kh, dk.view(), k_grads);
    dx_q + dx_k
}

/// Most probable antecedent per mention; ties break toward the most recent
/// candidate (largest j).
pub fn decode_links<F: Scalar>(logits: ArrayView2<F>) -> Vec<usize> {
    let m = logits.nrows();
    (0..m)
        .map(|i| {
            // Scanning from the most recent candidate (self, j = i) downward
            // with a strict comparison implements the tie rule.
            let mut best = i;
            let mut best_score = logits[(i, i)];
            for j in (0..i).rev() {
                if logits[(i, j)] > best_score {
                    best_score = logits[(i, j)];
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Connected components of the antecedent link graph.
pub fn links_to_clusters(links: &[usize]) -> Vec<Vec<usize>> {
    let mut uf = UnionFind::new(links.len());
    for (i, &j) in links.iter().enumerate() {
        assert!(j <= i, "antecedent must not follow its mention");
        if j != i {
            uf.union(i, j);
        }
    }
    uf.components()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, d: usize) -> LinkerParams<f64> {
        let mut p = LinkerParams::zeros(d);
        for m in [&mut p.q, &mut p.k] {
            m.w1.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            m.b1.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
            m.w2.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        p
    }

    #[test]
    fn single_mention_is_forced_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&mut rng, 4);
        let x = Array2::from_shape_fn((1, 8), |_| rng.gen_range(-1.0..1.0));
        let (logits, _) = antecedent_logits(x.view(), &p).unwrap();
        let lp = row_log_probs(logits.view(), 0);
        assert!((lp[0].exp() - 1.0).abs() < 1e-12);
        let loss = antecedent_loss(logits.view(), &[vec![0]], LossMode::UniformTarget).unwrap();
        assert!(loss.abs() < 1e-12);
        assert_eq!(decode_links(logits.view()), vec![0]);
    }

    #[test]
    fn mask_zeroes_future_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&mut rng, 4);
        let x = Array2::from_shape_fn((5, 8), |_| rng.gen_range(-1.0..1.0));
        let (logits, _) = antecedent_logits(x.view(), &p).unwrap();
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_eq!(logits[(i, j)], f64::NEG_INFINITY);
            }
            let lp = row_log_probs(logits.view(), i);
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn equal_logits_give_log2_loss() {
        // M=2, G(2)={1} (0-based: G(1)={0}), both logits equal.
        let logits = array![[0.0, f64::NEG_INFINITY], [0.7, 0.7]];
        let loss = antecedent_loss(logits.view(), &[vec![0], vec![0]], LossMode::UniformTarget)
            .unwrap();
        // Mention 0 contributes 0, mention 1 contributes ln 2; mean over 2.
        assert!((loss - 2.0f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn capping_keeps_most_recent_antecedents() {
        // 4-mention chain of one entity.
        let full = gold_targets(&[0, 0, 0, 0], None);
        assert_eq!(full, vec![vec![0], vec![0], vec![0, 1], vec![0, 1, 2]]);
        let capped = gold_targets(&[0, 0, 0, 0], Some(1));
        assert_eq!(capped, vec![vec![0], vec![0], vec![1], vec![2]]);
        let two = gold_targets(&[0, 0, 0, 0], Some(2));
        assert_eq!(two, vec![vec![0], vec![0], vec![0, 1], vec![1, 2]]);
    }

    #[test]
    fn bias_free_heads_yield_uniform_rows_on_zero_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = random_params(&mut rng, 4);
        p.q.b1.fill(0.0);
        p.k.b1.fill(0.0);
        let x = Array2::zeros((3, 8));
        let (logits, _) = antecedent_logits(x.view(), &p).unwrap();
        for i in 0..3 {
            let lp = row_log_probs(logits.view(), i);
            for l in &lp {
                assert!((l.exp() - 1.0 / (i as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_links_decode_to_predecessor() {
        let m = 4;
        let mut logits = Array2::from_elem((m, m), f64::NEG_INFINITY);
        for i in 0..m {
            for j in 0..=i {
                logits[(i, j)] = if i > 0 && j == i - 1 { 5.0 } else { 0.0 };
            }
        }
        assert_eq!(decode_links(logits.view()), vec![0, 0, 1, 2]);
    }

    #[test]
    fn ties_break_toward_most_recent() {
        let logits = array![
            [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            [1.0, 1.0, f64::NEG_INFINITY],
            [2.0, 2.0, 1.0],
        ];
        // Row 1 ties between j=0 and self; self is the more recent. Row 2
        // ties between j=0 and j=1; j=1 wins.
        assert_eq!(decode_links(logits.view()), vec![0, 1, 1]);
    }

    #[test]
    fn links_cluster_by_union_find() {
        // links [self,1,2,self,4] in 1-based spec terms.
        let clusters = links_to_clusters(&[0, 0, 1, 3, 3]);
        assert_eq!(clusters, vec![vec![0, 1, 2], vec![3, 4]]);
        let singles = links_to_clusters(&[0, 1, 2]);
        assert_eq!(singles.len(), 3);
    }

    #[test]
    fn any_gold_antecedent_gives_same_partition() {
        // The footnote claim: picking an arbitrary gold antecedent per
        // mention always reconstructs the gold partition.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let m = rng.gen_range(1..=20);
            let clusters: Vec<usize> = (0..m).map(|_| rng.gen_range(0..5)).collect();
            let targets = gold_targets(&clusters, None);
            let gold_partition: Vec<Vec<usize>> = {
                let mut uf = UnionFind::new(m);
                for i in 0..m {
                    for j in 0..i {
                        if clusters[j] == clusters[i] {
                            uf.union(i, j);
                        }
                    }
                }
                uf.components()
            };
            for _ in 0..5 {
                let links: Vec<usize> = targets
                    .iter()
                    .map(|g| g[rng.gen_range(0..g.len())])
                    .collect();
                assert_eq!(links_to_clusters(&links), gold_partition);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [LossMode::UniformTarget, LossMode::Marginal] {
            let d = 3;
            let p = random_params(&mut rng, d);
            let x = Array2::from_shape_fn((4, 2 * d), |_| rng.gen_range(-1.0..1.0));
            let targets = gold_targets(&[0, 1, 0, 0], None);
            let loss_of = |p: &LinkerParams<f64>, x: &Array2<f64>| {
                let (logits, _) = antecedent_logits(x.view(), p).unwrap();
                antecedent_loss(logits.view(), &targets, mode).unwrap()
            };
            let (logits, cache) = antecedent_logits(x.view(), &p).unwrap();
            let (_, d_logits) = antecedent_loss_grad(logits.view(), &targets, mode).unwrap();
            let mut qg = p.q.grads_like();
            let mut kg = p.k.grads_like();
            let dx = linker_backward(x.view(), &p, &cache, d_logits.view(), &mut qg, &mut kg);
            let h = 1e-6;
            let check = |analytic: f64, fd: f64, what: &str| {
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-4, "{what}: {analytic} vs {fd}");
            };
            for idx in 0..x.len() {
                let (r, c) = (idx / x.ncols(), idx % x.ncols());
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let mut xm = x.clone();
                xm[(r, c)] -= h;
                check(dx[(r, c)], (loss_of(&p, &xp) - loss_of(&p, &xm)) / (2.0 * h), "dx");
            }
            for (pick, ga) in [(0usize, &qg), (1, &kg)] {
                for idx in 0..p.q.w1.len() {
                    let (r, c) = (idx / p.q.w1.ncols(), idx % p.q.w1.ncols());
                    let mut pp = p.clone();
                    let mut pm = p.clone();
                    let (tp, tm) = if pick == 0 {
                        (&mut pp.q.w1, &mut pm.q.w1)
                    } else {
                        (&mut pp.k.w1, &mut pm.k.w1)
                    };
                    tp[(r, c)] += h;
                    tm[(r, c)] -= h;
                    check(
                        ga.w1[(r, c)],
                        (loss_of(&pp, &x) - loss_of(&pm, &x)) / (2.0 * h),
                        "w1",
                    );
                }
            }
        }
    }
}
