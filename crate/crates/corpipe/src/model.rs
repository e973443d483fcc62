//! The joint network: shared token encoder feeding a mention-detection head
//! (hidden ReLU layer, tag logits, constrained CRF) and a coreference
//! linking head (masked dot-product attention over preceding mentions),
//! plus the combined loss, Adam optimizer, slanted triangular learning-rate
//! schedule, train/predict loops and a binary checkpoint format.
//!
//! Training uses teacher forcing: the linking head sees gold mentions.
//! Prediction decodes mentions with Viterbi first and links those.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    decode_tags, dedup_spans, encode_mentions, reduce_discontinuous, reduce_to_head, CodecError,
    Tag, TagVocabulary,
};
use crate::corefud::{
    restore_empty_nodes, surface_empty_nodes, CorefudError, Document, Entity, Mention,
    DEFAULT_EMPTY_MARKER,
};
use crate::crf::{crf_nll_grad, viterbi_decode, CrfError, CrfParams};
use crate::encoder::{
    encoder_backward, encoder_forward, init_matrix, EncoderConfig, EncoderParams,
};
use crate::linker::{
    antecedent_logits, antecedent_loss_grad, decode_links, gold_targets, linker_backward,
    LinkerError, LinkerParams, LossMode, Mlp, MlpGrads,
};
use crate::scalar::Scalar;
use crate::scorer::{head_of_span, score};
use crate::window::{build_windows, stitch_predictions, Window, WindowConfig, WindowError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Linker(#[from] LinkerError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Corefud(#[from] CorefudError),
    #[error("loss became non-finite at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("gold tag {0} missing from the tag vocabulary")]
    UnknownTag(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

// ---------------------------------------------------------------------------
// Token vocabulary

/// Word-form vocabulary with reserved entries for padding, unknown words
/// and unknown surfaced empty nodes; corpus-id tokens are plain entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    items: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const EMPTY: usize = 2;

    pub fn build(docs: &[Document]) -> Self {
        let mut items: Vec<String> = vec!["<pad>".into(), "<unk>".into(), "<empty>".into()];
        let mut index: BTreeMap<String, usize> =
            items.iter().cloned().zip(0..).collect();
        let add = |s: String, items: &mut Vec<String>, index: &mut BTreeMap<String, usize>| {
            if !index.contains_key(&s) {
                index.insert(s.clone(), items.len());
                items.push(s);
            }
        };
        for doc in docs {
            if !doc.corpus_id.is_empty() {
                add(format!("<corpus:{}>", doc.corpus_id), &mut items, &mut index);
            }
            for sent in &doc.sentences {
                for tok in &sent.tokens {
                    add(tok.surfaced_form.clone(), &mut items, &mut index);
                }
            }
        }
        Vocabulary { items, index }
    }

    pub fn from_items(items: Vec<String>) -> Self {
        let index = items.iter().cloned().zip(0..).collect();
        Vocabulary { items, index }
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Look a surfaced form up; out-of-vocabulary empty-node forms map to
    /// the reserved empty token rather than plain unknown.
    pub fn id_of(&self, surfaced_form: &str, empty_marker: char) -> usize {
        match self.index.get(surfaced_form) {
            Some(&i) => i,
            None if surfaced_form.starts_with(empty_marker) => Self::EMPTY,
            None => Self::UNK,
        }
    }

    pub fn corpus_token(&self, corpus_id: &str) -> usize {
        self.index
            .get(&format!("<corpus:{corpus_id}>"))
            .copied()
            .unwrap_or(Self::UNK)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub window: WindowConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub peak_lr: f64,
    /// Fraction of total steps spent warming up, in (0, 1).
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub w_detection: f64,
    pub w_linking: f64,
    /// Keep only the most recent k gold antecedents per mention.
    pub at_most_k_links: Option<usize>,
    pub loss_mode: LossMode,
    /// Scale antecedent logits by 1/sqrt(D).
    pub scale_attention: bool,
    /// Prepend a corpus-id token to every window.
    pub corpus_token: bool,
    /// Stop once the dev CoNLL score reaches this value.
    pub stop_at_dev: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            layers: 2,
            window: WindowConfig::default(),
            batch_size: 8,
            epochs: 10,
            batches_per_epoch: 100,
            // Tuned for fine-tuning a pretrained encoder; far too low for
            // the compact encoder trained from scratch (see `toy`).
            peak_lr: 2e-5,
            warmup: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            w_detection: 1.0,
            w_linking: 1.0,
            at_most_k_links: None,
            loss_mode: LossMode::UniformTarget,
            scale_attention: false,
            corpus_token: false,
            stop_at_dev: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Preset for overfitting small synthetic corpora from scratch.
    pub fn toy() -> Self {
        TrainConfig {
            peak_lr: 1e-3,
            epochs: 200,
            batches_per_epoch: 20,
            beta2: 0.99,
            ..TrainConfig::default()
        }
    }
}

/// Slanted triangular schedule: linear 0 -> peak over the first
/// ceil(warmup * total) steps, then linear peak -> 0.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    assert!(step <= total_steps);
    assert!(cfg.warmup > 0.0 && cfg.warmup < 1.0);
    let warm = ((cfg.warmup * total_steps as f64).ceil() as usize).max(1);
    if step <= warm {
        cfg.peak_lr * step as f64 / warm as f64
    } else {
        cfg.peak_lr * (total_steps - step) as f64 / (total_steps - warm) as f64
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Debug, Clone)]
pub struct ModelParams<F: Scalar> {
    pub encoder: EncoderParams<F>,
    /// Detection head D -> 4D -> V; the output layer is bias-free.
    pub detect: Mlp<F>,
    pub crf: CrfParams<F>,
    pub linker: LinkerParams<F>,
}

impl<F: Scalar> ModelParams<F> {
    pub fn init(cfg: &TrainConfig, token_vocab: &Vocabulary, tag_vocab: &TagVocabulary) -> Self {
        let d = cfg.dim;
        let v = tag_vocab.len();
        let encoder = EncoderParams::init(&EncoderConfig {
            vocab_size: token_vocab.len(),
            dim: d,
            layers: cfg.layers,
            seed: cfg.seed,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
        let detect = Mlp {
            w1: init_matrix(&mut rng, d, 4 * d),
            b1: Array1::zeros(4 * d),
            w2: init_matrix(&mut rng, 4 * d, v),
        };
        let crf = CrfParams::from_vocabulary(tag_vocab);
        let mut linker = LinkerParams::zeros(d);
        linker.q.w1 = init_matrix(&mut rng, 2 * d, 4 * d);
        linker.q.w2 = init_matrix(&mut rng, 4 * d, d);
        linker.k.w1 = init_matrix(&mut rng, 2 * d, 4 * d);
        linker.k.w2 = init_matrix(&mut rng, 4 * d, d);
        linker.scale = cfg.scale_attention;
        ModelParams {
            encoder,
            detect,
            crf,
            linker,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelGrads<F: Scalar> {
    pub encoder: EncoderParams<F>,
    pub detect: MlpGrads<F>,
    pub transitions: Array2<F>,
    pub q: MlpGrads<F>,
    pub k: MlpGrads<F>,
}

impl<F: Scalar> ModelGrads<F> {
    pub fn zeros_like(params: &ModelParams<F>) -> Self {
        ModelGrads {
            encoder: params.encoder.zeros_like(),
            detect: params.detect.grads_like(),
            transitions: Array2::zeros(params.crf.transitions.raw_dim()),
            q: params.linker.q.grads_like(),
            k: params.linker.k.grads_like(),
        }
    }
}

/// Visit every parameter tensor in a fixed order with a stable name.
/// Flattening, the optimizer and the checkpoint all share this order.
macro_rules! visit_tensors {
    ($p:expr, $f:expr) => {{
        let f = $f;
        f("embedding", $p.encoder.embedding.view().into_dyn());
        for (i, l) in $p.encoder.layers.iter().enumerate() {
            f(&format!("layer{i}.wq"), l.wq.view().into_dyn());
            f(&format!("layer{i}.wk"), l.wk.view().into_dyn());
            f(&format!("layer{i}.wv"), l.wv.view().into_dyn());
            f(&format!("layer{i}.wo"), l.wo.view().into_dyn());
            f(&format!("layer{i}.w1"), l.w1.view().into_dyn());
            f(&format!("layer{i}.b1"), l.b1.view().into_dyn());
            f(&format!("layer{i}.w2"), l.w2.view().into_dyn());
            f(&format!("layer{i}.b2"), l.b2.view().into_dyn());
        }
        f("detect.w1", $p.detect.w1.view().into_dyn());
        f("detect.b1", $p.detect.b1.view().into_dyn());
        f("detect.w2", $p.detect.w2.view().into_dyn());
        f("crf.transitions", $p.crf.transitions.view().into_dyn());
        f("linker.q.w1", $p.linker.q.w1.view().into_dyn());
        f("linker.q.b1", $p.linker.q.b1.view().into_dyn());
        f("linker.q.w2", $p.linker.q.w2.view().into_dyn());
        f("linker.k.w1", $p.linker.k.w1.view().into_dyn());
        f("linker.k.b1", $p.linker.k.b1.view().into_dyn());
        f("linker.k.w2", $p.linker.k.w2.view().into_dyn());
    }};
}

macro_rules! visit_tensors_mut {
    ($p:expr, $f:expr) => {{
        let mut f = $f;
        f(&mut $p.encoder.embedding.view_mut().into_dyn());
        for l in $p.encoder.layers.iter_mut() {
            f(&mut l.wq.view_mut().into_dyn());
            f(&mut l.wk.view_mut().into_dyn());
            f(&mut l.wv.view_mut().into_dyn());
            f(&mut l.wo.view_mut().into_dyn());
            f(&mut l.w1.view_mut().into_dyn());
            f(&mut l.b1.view_mut().into_dyn());
            f(&mut l.w2.view_mut().into_dyn());
            f(&mut l.b2.view_mut().into_dyn());
        }
        f(&mut $p.detect.w1.view_mut().into_dyn());
        f(&mut $p.detect.b1.view_mut().into_dyn());
        f(&mut $p.detect.w2.view_mut().into_dyn());
        f(&mut $p.crf.transitions.view_mut().into_dyn());
        f(&mut $p.linker.q.w1.view_mut().into_dyn());
        f(&mut $p.linker.q.b1.view_mut().into_dyn());
        f(&mut $p.linker.q.w2.view_mut().into_dyn());
        f(&mut $p.linker.k.w1.view_mut().into_dyn());
        f(&mut $p.linker.k.b1.view_mut().into_dyn());
        f(&mut $p.linker.k.w2.view_mut().into_dyn());
    }};
}

pub fn flatten_params<F: Scalar>(p: &ModelParams<F>) -> Vec<F> {
    let mut out = Vec::new();
    let cell = std::cell::RefCell::new(&mut out);
    visit_tensors!(p, |_name: &str, t: ndarray::ArrayViewD<F>| {
        cell.borrow_mut().extend(t.iter().cloned());
    });
    out
}

pub fn set_params_from_flat<F: Scalar>(p: &mut ModelParams<F>, flat: &[F]) {
    let mut cursor = 0usize;
    visit_tensors_mut!(p, |t: &mut ndarray::ArrayViewMutD<F>| {
        for x in t.iter_mut() {
            *x = flat[cursor];
            cursor += 1;
        }
    });
    assert_eq!(cursor, flat.len());
}

pub fn flatten_grads<F: Scalar>(g: &ModelGrads<F>) -> Vec<F> {
    let mut out = Vec::new();
    out.extend(g.encoder.embedding.iter().cloned());
    for l in &g.encoder.layers {
        out.extend(l.wq.iter().cloned());
        out.extend(l.wk.iter().cloned());
        out.extend(l.wv.iter().cloned());
        out.extend(l.wo.iter().cloned());
        out.extend(l.w1.iter().cloned());
        out.extend(l.b1.iter().cloned());
        out.extend(l.w2.iter().cloned());
        out.extend(l.b2.iter().cloned());
    }
    out.extend(g.detect.w1.iter().cloned());
    out.extend(g.detect.b1.iter().cloned());
    out.extend(g.detect.w2.iter().cloned());
    out.extend(g.transitions.iter().cloned());
    out.extend(g.q.w1.iter().cloned());
    out.extend(g.q.b1.iter().cloned());
    out.extend(g.q.w2.iter().cloned());
    out.extend(g.k.w1.iter().cloned());
    out.extend(g.k.b1.iter().cloned());
    out.extend(g.k.w2.iter().cloned());
    out
}

// ---------------------------------------------------------------------------
// Model bundle and training instances

#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub cfg: TrainConfig,
    pub token_vocab: Vocabulary,
    pub tag_vocab: TagVocabulary,
    pub params: ModelParams<F>,
}

impl<F: Scalar> Model<F> {
    /// Build vocabularies from the (raw, unsurfaced) training documents and
    /// initialize parameters.
    pub fn new(train_docs: &[Document], cfg: TrainConfig) -> Result<Self, ModelError> {
        let docs = surfaced_copies(train_docs)?;
        let token_vocab = Vocabulary::build(&docs);
        let mut tag_seqs = Vec::new();
        for doc in &docs {
            for tags in gold_sentence_tags(doc)? {
                tag_seqs.push(tags);
            }
        }
        let tag_vocab = TagVocabulary::build(tag_seqs);
        let params = ModelParams::init(&cfg, &token_vocab, &tag_vocab);
        Ok(Model {
            cfg,
            token_vocab,
            tag_vocab,
            params,
        })
    }
}

fn surfaced_copies(docs: &[Document]) -> Result<Vec<Document>, CorefudError> {
    docs.iter()
        .map(|d| {
            let mut d = d.clone();
            if d.empty_marker.is_none() {
                d = surface_empty_nodes(&d, DEFAULT_EMPTY_MARKER)?;
            }
            Ok(d)
        })
        .collect()
}

/// Per-sentence gold tag sequences; discontinuous mentions contribute the
/// continuous run around their head, duplicate spans collapse.
fn gold_sentence_tags(doc: &Document) -> Result<Vec<Vec<Tag>>, CodecError> {
    let starts = doc.sentence_starts();
    let mut out = Vec::with_capacity(doc.sentences.len());
    for (si, sent) in doc.sentences.iter().enumerate() {
        let end = starts[si] + sent.tokens.len();
        let spans = doc
            .entities
            .iter()
            .flat_map(|e| &e.mentions)
            .filter(|m| m.first() >= starts[si] && m.last() < end)
            .map(|m| {
                let m = if m.is_continuous() {
                    (*m).clone()
                } else {
                    reduce_discontinuous(m)
                };
                (m.first() - starts[si], m.last() - starts[si])
            });
        let (spans, _) = dedup_spans(spans);
        out.push(encode_mentions(sent.tokens.len(), &spans)?);
    }
    Ok(out)
}

/// One training example: a window with its token ids, segment layout, gold
/// tag path for the focus sentence and gold mentions for the linker.
#[derive(Debug, Clone)]
pub struct WindowInstance {
    pub window: Window,
    pub ids: Vec<usize>,
    /// Sentence segments as local (start, end) ranges; token positions
    /// only, excluding any prepended corpus token.
    pub segments: Vec<(usize, usize)>,
    pub focus_segment: usize,
    pub gold_tags: Vec<usize>,
    /// Gold mentions inside the window, document order.
    pub gold_mentions: Vec<Mention>,
    /// Cluster id per gold mention.
    pub gold_clusters: Vec<usize>,
    /// Offset of the first token row in the encoder input (1 when a corpus
    /// token is prepended).
    pub offset: usize,
}

fn window_ids(doc: &Document, w: &Window, vocab: &Vocabulary, cfg: &TrainConfig) -> Vec<usize> {
    let marker = doc.empty_marker.unwrap_or(DEFAULT_EMPTY_MARKER);
    let mut ids = Vec::with_capacity(w.len() + 1);
    if cfg.corpus_token {
        ids.push(vocab.corpus_token(&doc.corpus_id));
    }
    for pos in w.start..w.end {
        ids.push(vocab.id_of(&doc.token(pos).surfaced_form, marker));
    }
    ids
}

fn window_segments(doc: &Document, w: &Window) -> Vec<(usize, usize)> {
    let starts = doc.sentence_starts();
    let mut segs = Vec::new();
    for (si, sent) in doc.sentences.iter().enumerate() {
        let a = starts[si].max(w.start);
        let b = (starts[si] + sent.tokens.len()).min(w.end);
        if a < b {
            segs.push((a - w.start, b - w.start));
        }
    }
    segs
}

/// Build training instances for one surfaced document. Gold detection
/// targets cover the focus sentence; gold linking targets cover every
/// mention fully inside the window (teacher forcing).
pub fn prepare_instances<F: Scalar>(
    doc: &Document,
    model: &Model<F>,
) -> Result<Vec<WindowInstance>, ModelError> {
    let sentence_tags = gold_sentence_tags(doc)?;
    // Cluster id per mention, document-wide.
    let mut cluster_of: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for (ci, e) in doc.entities.iter().enumerate() {
        for m in &e.mentions {
            cluster_of.entry(m.positions.clone()).or_insert(ci);
        }
    }
    let mut all_mentions: Vec<Mention> = cluster_of.keys().cloned().map(|positions| {
        let head = head_of_span(doc, &positions);
        Mention { positions, head }
    }).collect();
    all_mentions.sort_by_key(|m| (m.first(), m.last()));
    let windows = build_windows(doc, &model.cfg.window)?;
    let mut instances = Vec::with_capacity(windows.len());
    for w in windows {
        let ids = window_ids(doc, &w, &model.token_vocab, &model.cfg);
        let segments = window_segments(doc, &w);
        let focus_segment = segments
            .iter()
            .position(|&(a, _)| a + w.start == w.focus_start.max(w.start))
            .expect("focus sentence must appear among segments");
        let gold_tags = sentence_tags[w.sentence_index]
            .iter()
            .map(|t| {
                model
                    .tag_vocab
                    .index_of(t)
                    .ok_or_else(|| ModelError::UnknownTag(t.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut gold_mentions = Vec::new();
        let mut gold_clusters = Vec::new();
        for m in &all_mentions {
            if w.contains_span(m) {
                gold_mentions.push(m.clone());
                gold_clusters.push(cluster_of[&m.positions]);
            }
        }
        instances.push(WindowInstance {
            offset: if model.cfg.corpus_token { 1 } else { 0 },
            window: w,
            ids,
            segments,
            focus_segment,
            gold_tags,
            gold_mentions,
            gold_clusters,
        });
    }
    Ok(instances)
}

// ---------------------------------------------------------------------------
// Loss and gradients

/// Mean over the batch of `w_det * detection NLL + w_link * linking loss`,
/// with gradients for every parameter. Both heads read the same encoder
/// output, so encoder gradients accumulate from both.
pub fn loss_and_grads<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[&WindowInstance],
    cfg: &TrainConfig,
) -> Result<(F, ModelGrads<F>), ModelError> {
    let mut grads = ModelGrads::zeros_like(params);
    let mut total = F::zero();
    let inv_b = <F as Scalar>::from_f64(1.0 / batch.len() as f64);
    let w_det = <F as Scalar>::from_f64(cfg.w_detection);
    let w_link = <F as Scalar>::from_f64(cfg.w_linking);
    for inst in batch {
        let (enc_out, enc_cache) = encoder_forward(&params.encoder, &inst.ids);
        let mut d_enc = Array2::<F>::zeros(enc_out.raw_dim());
        // Detection: focus sentence rows -> MLP -> tag logits -> CRF NLL.
        if cfg.w_detection != 0.0 {
            let (a, b) = inst.segments[inst.focus_segment];
            let x = enc_out.slice(s![inst.offset + a..inst.offset + b, ..]);
            let (emissions, h_pre) = params.detect.forward(x);
            let (nll, d_em, d_trans) =
                crf_nll_grad(emissions.view(), &inst.gold_tags, &params.crf)?;
            total = total + w_det * inv_b * nll;
            let scale = w_det * inv_b;
            let d_em = d_em.mapv(|g| g * scale);
            grads.transitions = &grads.transitions + &d_trans.mapv(|g| g * scale);
            let dx = params.detect.backward(x, &h_pre, d_em.view(), &mut grads.detect);
            let mut target = d_enc.slice_mut(s![inst.offset + a..inst.offset + b, ..]);
            target += &dx;
        }
        // Linking: gold mention representations -> antecedent loss.
        if cfg.w_linking != 0.0 && !inst.gold_mentions.is_empty() {
            let reprs = mention_reprs(
                &enc_out.view(),
                inst.window.start,
                inst.offset,
                &inst.gold_mentions,
            );
            let (logits, cache) = antecedent_logits(reprs.view(), &params.linker)?;
            let targets = gold_targets(&inst.gold_clusters, cfg.at_most_k_links);
            let (loss, d_logits) =
                antecedent_loss_grad(logits.view(), &targets, cfg.loss_mode)?;
            total = total + w_link * inv_b * loss;
            let scale = w_link * inv_b;
            let d_logits = d_logits.mapv(|g| g * scale);
            let dx = linker_backward(
                reprs.view(),
                &params.linker,
                &cache,
                d_logits.view(),
                &mut grads.q,
                &mut grads.k,
            );
            scatter_mention_grads(
                &mut d_enc,
                inst.window.start,
                inst.offset,
                &inst.gold_mentions,
                &dx,
            );
        }
        encoder_backward(&params.encoder, &enc_cache, d_enc.view(), &mut grads.encoder);
    }
    Ok((total, grads))
}

pub fn batch_loss<F: Scalar>(
    params: &ModelParams<F>,
    batch: &[&WindowInstance],
    cfg: &TrainConfig,
) -> Result<F, ModelError> {
    Ok(loss_and_grads(params, batch, cfg)?.0)
}

/// Concatenated first- and last-token encoder vectors, one row per mention.
/// `base` is `offset - window.start`, mapping global positions to rows.
fn mention_reprs<F: Scalar>(
    enc_out: &ArrayView2<F>,
    window_start: usize,
    offset: usize,
    mentions: &[Mention],
) -> Array2<F> {
    let d = enc_out.ncols();
    let mut reprs = Array2::zeros((mentions.len(), 2 * d));
    for (i, m) in mentions.iter().enumerate() {
        let first = offset + m.first() - window_start;
        let last = offset + m.last() - window_start;
        reprs
            .slice_mut(s![i, ..d])
            .assign(&enc_out.row(first));
        reprs
            .slice_mut(s![i, d..])
            .assign(&enc_out.row(last));
    }
    reprs
}

fn scatter_mention_grads<F: Scalar>(
    d_enc: &mut Array2<F>,
    window_start: usize,
    offset: usize,
    mentions: &[Mention],
    dx: &Array2<F>,
) {
    let d = d_enc.ncols();
    for (i, m) in mentions.iter().enumerate() {
        let first = offset + m.first() - window_start;
        let last = offset + m.last() - window_start;
        {
            let mut row = d_enc.row_mut(first);
            row += &dx.slice(s![i, ..d]);
        }
        let mut row = d_enc.row_mut(last);
        row += &dx.slice(s![i, d..]);
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// Plain Adam over the flattened parameter vector. The "lazy"
/// variant is an efficiency device for sparse embedding rows; dense
/// gradients make it equivalent, so it is not implemented.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<F: Scalar>(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let b1c = 1.0 - self.beta1.powi(self.t as i32);
        let b2c = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64().unwrap();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1c;
            let v_hat = self.v[i] / b2c;
            let delta = lr * m_hat / (v_hat.sqrt() + self.eps);
            params[i] = params[i] - <F as Scalar>::from_f64(delta);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Scalar> {
    pub final_params: ModelParams<F>,
    pub best_params: ModelParams<F>,
    pub best_epoch: usize,
    /// Dev CoNLL after each completed epoch.
    pub dev_scores: Vec<f64>,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Train in place; returns the final and best-dev parameter snapshots with
/// the per-epoch metric trace. Single-threaded and bitwise deterministic
/// given the config seed.
pub fn train<F: Scalar>(
    model: &mut Model<F>,
    train_docs: &[Document],
    dev_docs: &[Document],
) -> Result<TrainOutcome<F>, ModelError> {
    let cfg = model.cfg.clone();
    let surfaced = surfaced_copies(train_docs)?;
    let mut instances: Vec<WindowInstance> = Vec::new();
    for doc in &surfaced {
        instances.extend(prepare_instances(doc, model)?);
    }
    assert!(!instances.is_empty(), "no training windows");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a11_0002);
    let total_steps = cfg.epochs * cfg.batches_per_epoch;
    let mut flat = flatten_params(&model.params);
    let mut adam = Adam::new(flat.len(), cfg.beta1, cfg.beta2);
    let mut step = 0usize;
    let mut dev_scores = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<F>)> = None;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        for batch_idx in 0..cfg.batches_per_epoch {
            let batch: Vec<&WindowInstance> = (0..cfg.batch_size)
                .map(|_| &instances[rng.gen_range(0..instances.len())])
                .collect();
            let (loss, grads) = loss_and_grads(&model.params, &batch, &cfg)?;
            let loss_f = loss.to_f64().unwrap();
            if !loss_f.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            epoch_loss += loss_f;
            step += 1;
            let lr = lr_at(step, total_steps, &cfg);
            adam.step(&mut flat, &flatten_grads(&grads), lr);
            set_params_from_flat(&mut model.params, &flat);
        }
        epoch_losses.push(epoch_loss / cfg.batches_per_epoch as f64);
        let dev = evaluate(model, dev_docs)?;
        dev_scores.push(dev);
        let better = best.as_ref().map_or(true, |(b, _, _)| dev > *b);
        if better {
            best = Some((dev, epoch, model.params.clone()));
        }
        if cfg.stop_at_dev.is_some_and(|target| dev >= target) {
            break;
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_params: model.params.clone(),
        best_params,
        best_epoch,
        dev_scores,
        epoch_losses,
    })
}

/// Mean CoNLL score of predictions over `docs` (gold entities as key).
pub fn evaluate<F: Scalar>(model: &Model<F>, docs: &[Document]) -> Result<f64, ModelError> {
    if docs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for doc in docs {
        let predicted = predict(model, doc, false)?;
        total += score(&doc.entities, &predicted.entities, true).conll;
    }
    Ok(total / docs.len() as f64)
}

// ---------------------------------------------------------------------------
// Prediction

/// Full pipeline: surface empty nodes, window, encode, Viterbi-decode tags
/// per sentence segment, link mentions, stitch windows, optionally reduce
/// mentions to their heads, restore empty nodes.
pub fn predict<F: Scalar>(
    model: &Model<F>,
    doc: &Document,
    reduce_heads: bool,
) -> Result<Document, ModelError> {
    let mut work = doc.clone();
    work.entities.clear();
    if work.empty_marker.is_none() {
        work = surface_empty_nodes(&work, DEFAULT_EMPTY_MARKER)?;
    }
    if work.is_empty() {
        return Ok(restore_empty_nodes(&work)?);
    }
    let windows = build_windows(&work, &model.cfg.window)?;
    let mut per_window = Vec::with_capacity(windows.len());
    for w in windows {
        let ids = window_ids(&work, &w, &model.token_vocab, &model.cfg);
        let offset = if model.cfg.corpus_token { 1 } else { 0 };
        let (enc_out, _) = encoder_forward(&model.params.encoder, &ids);
        // Detect mentions in every sentence segment of the window; the
        // stitcher deduplicates across windows (later focus wins).
        let mut mentions: Vec<Mention> = Vec::new();
        for &(a, b) in &window_segments(&work, &w) {
            let x = enc_out.slice(s![offset + a..offset + b, ..]);
            let (emissions, _) = model.params.detect.forward(x);
            let path = viterbi_decode(emissions.view(), &model.params.crf)?;
            let tags: Vec<Tag> = path.iter().map(|&i| model.tag_vocab.tag(i).clone()).collect();
            let decoded = decode_tags(&tags)?;
            for (s0, e0) in decoded.spans {
                let positions: Vec<usize> = (w.start + a + s0..=w.start + a + e0).collect();
                let head = head_of_span(&work, &positions);
                mentions.push(Mention { positions, head });
            }
        }
        mentions.sort_by_key(|m| (m.first(), m.last()));
        mentions.dedup();
        let links: Vec<(Mention, Option<Mention>)> = if mentions.is_empty() {
            Vec::new()
        } else {
            let reprs = mention_reprs(&enc_out.view(), w.start, offset, &mentions);
            let (logits, _) = antecedent_logits(reprs.view(), &model.params.linker)?;
            decode_links(logits.view())
                .into_iter()
                .enumerate()
                .map(|(i, j)| {
                    let ante = (j != i).then(|| mentions[j].clone());
                    (mentions[i].clone(), ante)
                })
                .collect()
        };
        per_window.push(links);
    }
    let clusters = stitch_predictions(&per_window);
    let mut entities: Vec<Entity> = clusters
        .into_iter()
        .enumerate()
        .map(|(i, ms)| Entity {
            id: format!("e{}", i + 1),
            mentions: if reduce_heads {
                ms.iter().map(reduce_to_head).collect()
            } else {
                ms
            },
        })
        .collect();
    entities.sort_by_key(|e| e.mentions.first().map(|m| (m.first(), m.last())));
    for (i, e) in entities.iter_mut().enumerate() {
        e.id = format!("e{}", i + 1);
    }
    work.entities = entities;
    Ok(restore_empty_nodes(&work)?)
}

// ---------------------------------------------------------------------------
// Checkpoint

const CHECKPOINT_MAGIC: &[u8; 8] = b"CORPIPE\x01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: TrainConfig,
    token_vocab: Vec<String>,
    tag_vocab: Vec<String>,
    tensors: Vec<(String, Vec<usize>)>,
}

/// Layout (all integers little-endian): 8-byte magic with a version byte,
/// u64 JSON header length, JSON header (config, vocabularies, tensor names
/// and shapes in order), then each tensor's elements as little-endian f64
/// in row-major order.
pub fn save_checkpoint<F: Scalar>(model: &Model<F>, path: &Path) -> Result<(), ModelError> {
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    {
        let tensors_cell = std::cell::RefCell::new(&mut tensors);
        let data_cell = std::cell::RefCell::new(&mut data);
        visit_tensors!(&model.params, |name: &str, t: ndarray::ArrayViewD<F>| {
            tensors_cell
                .borrow_mut()
                .push((name.to_string(), t.shape().to_vec()));
            let mut buf = data_cell.borrow_mut();
            for x in t.iter() {
                buf.extend_from_slice(&x.to_f64().unwrap().to_le_bytes());
            }
        });
    }
    let header = CheckpointHeader {
        config: model.cfg.clone(),
        token_vocab: model.token_vocab.items().to_vec(),
        tag_vocab: model.tag_vocab.tags().iter().map(|t| t.to_string()).collect(),
        tensors,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&data)?;
    Ok(())
}

pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<Model<F>, ModelError> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("bad magic or version".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    let token_vocab = Vocabulary::from_items(header.token_vocab);
    let tags: Vec<Tag> = header
        .tag_vocab
        .iter()
        .map(|s| Tag::parse(s))
        .collect::<Result<_, _>>()?;
    let tag_vocab = TagVocabulary::build([tags]);
    let mut model = Model {
        params: ModelParams::init(&header.config, &token_vocab, &tag_vocab),
        cfg: header.config,
        token_vocab,
        tag_vocab,
    };
    let total: usize = header.tensors.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let mut data = vec![0u8; total * 8];
    file.read_exact(&mut data)?;
    let mut flat = Vec::with_capacity(total);
    for chunk in data.chunks_exact(8) {
        flat.push(<F as Scalar>::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
    }
    // Shape sanity check against the freshly initialized layout.
    let expected = flatten_params(&model.params).len();
    if expected != total {
        return Err(ModelError::BadCheckpoint(format!(
            "tensor payload holds {total} values, model needs {expected}"
        )));
    }
    set_params_from_flat(&mut model.params, &flat);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthSpec};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            dim: 8,
            layers: 2,
            epochs: 1,
            batches_per_epoch: 2,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(seed: u64) -> Vec<Document> {
        generate(&SynthSpec {
            documents: 3,
            sentences_per_doc: (2, 3),
            sentence_len: (4, 8),
            vocabulary: 30,
            max_depth: 2,
            crossing_prob: 0.0,
            empty_node_prob: 0.1,
            entities: (1, 3),
            seed,
        })
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            peak_lr: 1.0,
            warmup: 0.1,
            ..TrainConfig::default()
        };
        let total = 100;
        assert_eq!(lr_at(0, total, &cfg), 0.0);
        assert_eq!(lr_at(10, total, &cfg), 1.0); // warmup boundary
        assert_eq!(lr_at(total, total, &cfg), 0.0);
        let max = (0..=total)
            .map(|s| lr_at(s, total, &cfg))
            .fold(0.0f64, f64::max);
        assert_eq!(max, 1.0);
        // Piecewise linear: second differences vanish off the peak.
        for s in 1..total {
            if s == 10 {
                continue;
            }
            let d2 = lr_at(s + 1, total, &cfg) - 2.0 * lr_at(s, total, &cfg)
                + lr_at(s - 1, total, &cfg);
            assert!(d2.abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weights_zero_loss() {
        let docs = tiny_corpus(1);
        let cfg = TrainConfig {
            w_detection: 0.0,
            w_linking: 0.0,
            ..tiny_cfg()
        };
        let model = Model::<f64>::new(&docs, cfg).unwrap();
        let surfaced = surfaced_copies(&docs).unwrap();
        let insts = prepare_instances(&surfaced[0], &model).unwrap();
        let batch: Vec<&WindowInstance> = insts.iter().collect();
        let loss = batch_loss(&model.params, &batch, &model.cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn single_mention_window_loss_is_detection_only() {
        let text = "\
1\ta\ta\t_\t_\t_\t0\t_\t_\tEntity=(e1-h1
2\tb\tb\t_\t_\t_\t1\t_\t_\tEntity=e1)
3\tc\tc\t_\t_\t_\t1\t_\t_\t_
";
        let docs = vec![crate::corefud::parse_document(text).unwrap()];
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let surfaced = surfaced_copies(&docs).unwrap();
        let insts = prepare_instances(&surfaced[0], &model).unwrap();
        let inst = insts
            .into_iter()
            .find(|i| i.gold_mentions.len() == 1)
            .expect("the only window holds the single mention");
        let both = batch_loss(&model.params, &[&inst], &model.cfg).unwrap();
        let det_only = batch_loss(
            &model.params,
            &[&inst],
            &TrainConfig {
                w_linking: 0.0,
                ..model.cfg.clone()
            },
        )
        .unwrap();
        // With one mention, -log p(self) = -log 1 = 0.
        assert!((both - det_only).abs() < 1e-12);
    }

    #[test]
    fn link_cap_changes_only_linking_term() {
        let docs = tiny_corpus(3);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let surfaced = surfaced_copies(&docs).unwrap();
        let inst = surfaced
            .iter()
            .flat_map(|d| prepare_instances(d, &model).unwrap())
            .find(|i| {
                // Need a mention with at least two same-cluster predecessors.
                i.gold_clusters
                    .iter()
                    .enumerate()
                    .any(|(k, c)| i.gold_clusters[..k].iter().filter(|&&x| x == *c).count() >= 2)
            })
            .expect("corpus should contain a 3-mention chain window");
        let loss_of = |cap: Option<usize>, w_det: f64| {
            batch_loss(
                &model.params,
                &[&inst],
                &TrainConfig {
                    at_most_k_links: cap,
                    w_detection: w_det,
                    ..model.cfg.clone()
                },
            )
            .unwrap()
        };
        let det = loss_of(None, 1.0) - loss_of(None, 0.0);
        let det_capped = loss_of(Some(1), 1.0) - loss_of(Some(1), 0.0);
        assert!((det - det_capped).abs() < 1e-12);
        assert_ne!(loss_of(None, 0.0), loss_of(Some(1), 0.0));
    }

    #[test]
    fn both_heads_reach_the_encoder() {
        let docs = tiny_corpus(4);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let surfaced = surfaced_copies(&docs).unwrap();
        let inst = surfaced
            .iter()
            .flat_map(|d| prepare_instances(d, &model).unwrap())
            .find(|i| i.gold_mentions.len() >= 2)
            .unwrap();
        let encoder_grad_norm = |w_det: f64, w_link: f64| {
            let cfg = TrainConfig {
                w_detection: w_det,
                w_linking: w_link,
                ..model.cfg.clone()
            };
            let (_, g) = loss_and_grads(&model.params, &[&inst], &cfg).unwrap();
            let mut n = 0.0;
            n += g.encoder.embedding.iter().map(|x| x * x).sum::<f64>();
            for l in &g.encoder.layers {
                n += l.wq.iter().map(|x| x * x).sum::<f64>();
            }
            n
        };
        assert!(encoder_grad_norm(1.0, 0.0) > 0.0);
        assert!(encoder_grad_norm(0.0, 1.0) > 0.0);
    }

    /// Finite differences over every parameter of the full model.
    #[test]
    fn full_model_gradient_check() {
        let docs = generate(&SynthSpec {
            documents: 3,
            sentences_per_doc: (2, 3),
            sentence_len: (4, 8),
            vocabulary: 30,
            max_depth: 1,
            crossing_prob: 0.0,
            empty_node_prob: 0.1,
            entities: (1, 3),
            seed: 5,
        });
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        assert!(model.tag_vocab.len() <= 10, "keep V small for this check");
        let surfaced = surfaced_copies(&docs).unwrap();
        let insts = prepare_instances(&surfaced[0], &model).unwrap();
        let batch: Vec<&WindowInstance> = insts.iter().take(2).collect();
        let (_, grads) = loss_and_grads(&model.params, &batch, &model.cfg).unwrap();
        let flat_g = flatten_grads(&grads);
        let mut flat_p = flatten_params(&model.params);
        let mut params = model.params.clone();
        // Small enough to keep ReLU kinks out of the central-difference
        // window; cancellation noise stays orders below the tolerance.
        let eps = 1e-7;
        let mut worst = 0.0f64;
        for i in 0..flat_p.len() {
            let orig = flat_p[i];
            flat_p[i] = orig + eps;
            set_params_from_flat(&mut params, &flat_p);
            let hi = batch_loss(&params, &batch, &model.cfg).unwrap();
            flat_p[i] = orig - eps;
            set_params_from_flat(&mut params, &flat_p);
            let lo = batch_loss(&params, &batch, &model.cfg).unwrap();
            flat_p[i] = orig;
            let fd = (hi - lo) / (2.0 * eps);
            let rel = (flat_g[i] - fd).abs() / fd.abs().max(flat_g[i].abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "param {i}: fd {fd} vs analytic {}", flat_g[i]);
        }
        set_params_from_flat(&mut params, &flat_p);
        assert!(worst < 1e-4);
    }

    #[test]
    fn adam_matches_hand_computation() {
        for beta2 in [0.999, 0.99] {
            let mut adam = Adam::new(1, 0.9, beta2);
            let mut p = vec![1.0f64];
            let g1 = 0.5;
            let g2 = -0.25;
            let lr = 0.1;
            adam.step(&mut p, &[g1], lr);
            // Step 1 by hand.
            let m1 = 0.1 * g1;
            let v1 = (1.0 - beta2) * g1 * g1;
            let p1 = 1.0 - lr * (m1 / 0.1) / ((v1 / (1.0 - beta2)).sqrt() + 1e-8);
            assert!((p[0] - p1).abs() < 1e-12, "{} vs {p1}", p[0]);
            adam.step(&mut p, &[g2], lr);
            let m2 = 0.9 * m1 + 0.1 * g2;
            let v2 = beta2 * v1 + (1.0 - beta2) * g2 * g2;
            let m_hat = m2 / (1.0 - 0.9f64.powi(2));
            let v_hat = v2 / (1.0 - beta2.powi(2));
            let p2 = p1 - lr * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p[0] - p2).abs() < 1e-12, "{} vs {p2}", p[0]);
        }
    }

    #[test]
    fn training_reduces_loss_on_fixed_batch() {
        let docs = tiny_corpus(6);
        let mut model = Model::<f64>::new(
            &docs,
            TrainConfig {
                peak_lr: 1e-2,
                warmup: 0.05,
                ..tiny_cfg()
            },
        )
        .unwrap();
        let surfaced = surfaced_copies(&docs).unwrap();
        let insts: Vec<WindowInstance> = surfaced
            .iter()
            .flat_map(|d| prepare_instances(d, &model).unwrap())
            .collect();
        let batch: Vec<&WindowInstance> = insts.iter().collect();
        let before = batch_loss(&model.params, &batch, &model.cfg).unwrap();
        let mut flat = flatten_params(&model.params);
        let mut adam = Adam::new(flat.len(), 0.9, 0.99);
        for step in 1..=10 {
            let (_, grads) = loss_and_grads(&model.params, &batch, &model.cfg).unwrap();
            adam.step(&mut flat, &flatten_grads(&grads), lr_at(step, 20, &model.cfg));
            set_params_from_flat(&mut model.params, &flat);
        }
        let after = batch_loss(&model.params, &batch, &model.cfg).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn untrained_predict_is_well_formed() {
        let docs = tiny_corpus(7);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let out = predict(&model, &docs[0], false).unwrap();
        // Output serializes as valid CorefUD and every mention belongs to
        // exactly one entity.
        let text = crate::corefud::serialize_document(&out);
        crate::corefud::parse_document(&text).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for e in &out.entities {
            for m in &e.mentions {
                assert!(seen.insert(m.positions.clone()), "span in two entities");
            }
        }
    }

    #[test]
    fn empty_document_predicts_empty() {
        let docs = tiny_corpus(8);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let empty = Document::default();
        let out = predict(&model, &empty, false).unwrap();
        assert!(out.entities.is_empty());
        assert!(out.is_empty());
    }

    #[test]
    fn head_reduction_emits_single_token_mentions() {
        let docs = tiny_corpus(9);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let out = predict(&model, &docs[0], true).unwrap();
        for e in &out.entities {
            for m in &e.mentions {
                assert_eq!(m.positions.len(), 1);
            }
        }
    }

    #[test]
    fn best_dev_is_argmax_and_train_is_deterministic() {
        let docs = tiny_corpus(10);
        let cfg = TrainConfig {
            epochs: 3,
            batches_per_epoch: 3,
            peak_lr: 1e-3,
            ..tiny_cfg()
        };
        let run = || {
            let mut model = Model::<f64>::new(&docs, cfg.clone()).unwrap();
            train(&mut model, &docs, &docs).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.dev_scores, b.dev_scores);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let argmax = a
            .dev_scores
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        // First epoch achieving the maximum wins (strict improvement only).
        let first_max = a
            .dev_scores
            .iter()
            .position(|&s| s == a.dev_scores[argmax])
            .unwrap();
        assert_eq!(a.best_epoch, first_max);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let docs = tiny_corpus(11);
        let model = Model::<f64>::new(&docs, tiny_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model, &path).unwrap();
        let loaded: Model<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, model.cfg);
        assert_eq!(loaded.token_vocab, model.token_vocab);
        assert_eq!(
            flatten_params(&loaded.params),
            flatten_params(&model.params)
        );
        let a = predict(&model, &docs[1], false).unwrap();
        let b = predict(&loaded, &docs[1], false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupted_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT but long enough to read magic").unwrap();
        assert!(matches!(
            load_checkpoint::<f64>(&path),
            Err(ModelError::BadCheckpoint(_))
        ));
    }
}
