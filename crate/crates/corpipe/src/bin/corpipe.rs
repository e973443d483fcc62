//! Command-line front end: convert, tag-encode/decode, train, predict,
//! score, mix, synth and a selftest running the oracle suites.
//!
//! Config precedence is CLI flag > config file > built-in default; every
//! resolved configuration is echoed to a `.manifest.json` next to the
//! output for reproducibility.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use corpipe::codec::{decode_tags, dedup_spans, encode_mentions, Tag};
use corpipe::corefud::{
    parse_documents, serialize_document, surface_empty_nodes, Document, Entity, Mention,
    DEFAULT_EMPTY_MARKER,
};
use corpipe::model::{
    load_checkpoint, lr_at, predict, save_checkpoint, train, Model, TrainConfig,
};
use corpipe::sampling::{MixSpec, SampleStream};
use corpipe::scorer::{head_of_span, macro_average, score, ScoreReport};
use corpipe::synth::{generate, SynthSpec};
use corpipe::window::WindowConfig;

#[derive(Parser)]
#[command(name = "corpipe", version, about = "Coreference resolution toolkit for CorefUD data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, validate, normalize and re-serialize CorefUD files.
    Convert(ConvertArgs),
    /// Encode mention annotations as per-token tags, or decode them back.
    Tags(TagsArgs),
    /// Train a model on CorefUD files.
    Train(TrainArgs),
    /// Predict coreference for CorefUD files with a trained model.
    Predict(PredictArgs),
    /// Score a response file against a key file.
    Score(ScoreArgs),
    /// Draw a deterministic dataset mixing schedule.
    Mix(MixArgs),
    /// Generate a synthetic CorefUD corpus.
    Synth(SynthArgs),
    /// Run the built-in oracle suites (slow, exhaustive checks).
    Selftest,
}

#[derive(Args)]
struct ConvertArgs {
    /// Input CorefUD files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output file (single input) or directory.
    #[arg(short, long)]
    output: PathBuf,
    /// Surface empty nodes with this marker before writing.
    #[arg(long)]
    surface: bool,
    #[arg(long, default_value_t = DEFAULT_EMPTY_MARKER)]
    marker: char,
    /// Worker threads for multi-file conversion.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct TagsArgs {
    #[command(subcommand)]
    action: TagsAction,
}

#[derive(Subcommand)]
enum TagsAction {
    /// Replace Entity annotations with per-token Tag= attributes.
    /// Cluster identity and heads are not representable as tags; decode
    /// restores mention spans as singleton entities.
    Encode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Rebuild mention spans from Tag= attributes.
    Decode {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training CorefUD files.
    #[arg(long, required = true, num_args = 1..)]
    train: Vec<PathBuf>,
    /// Development CorefUD files (defaults to the training files).
    #[arg(long, num_args = 1..)]
    dev: Vec<PathBuf>,
    /// Checkpoint path for the final model; the best-dev snapshot goes to
    /// the same path with extension `.best.ckpt`.
    #[arg(short, long)]
    output: PathBuf,
    /// JSON file holding a TrainConfig; CLI flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Overfit small corpora from scratch (high LR, beta2 = 0.99).
    ToyOverfit,
}

/// Optional flags that override config-file and default values.
#[derive(Args)]
struct ConfigOverrides {
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    window_size: Option<usize>,
    /// Right-context budget per window (ablation axis: 0 / 50 / 100).
    #[arg(long)]
    right_context: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batches_per_epoch: Option<usize>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    w_detection: Option<f64>,
    #[arg(long)]
    w_linking: Option<f64>,
    /// Cap gold antecedents per mention (ablation: at most 1 link).
    #[arg(long)]
    at_most_k_links: Option<usize>,
    /// Scale antecedent logits by 1/sqrt(D).
    #[arg(long)]
    scale_attention: bool,
    /// Prepend a corpus-id token to every window.
    #[arg(long)]
    corpus_token: bool,
    #[arg(long)]
    stop_at_dev: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(dim, layers, batch_size, epochs, batches_per_epoch, peak_lr, warmup, beta2,
             w_detection, w_linking, seed);
        if let Some(v) = self.window_size {
            cfg.window.window_size = v;
        }
        if let Some(v) = self.right_context {
            cfg.window.right_context = v;
        }
        if let Some(v) = self.at_most_k_links {
            cfg.at_most_k_links = Some(v);
        }
        if let Some(v) = self.stop_at_dev {
            cfg.stop_at_dev = Some(v);
        }
        if self.scale_attention {
            cfg.scale_attention = true;
        }
        if self.corpus_token {
            cfg.corpus_token = true;
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output file (single input) or directory.
    #[arg(short, long)]
    output: PathBuf,
    /// Reduce predicted mentions to their syntactic heads.
    #[arg(long)]
    reduce_heads: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    key: PathBuf,
    #[arg(long)]
    response: PathBuf,
    /// Drop singleton entities before scoring.
    #[arg(long)]
    without_singletons: bool,
    /// Write the machine-readable report here (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    /// JSON file holding a MixSpec.
    #[arg(long)]
    spec: PathBuf,
    /// Number of draws.
    #[arg(short = 'n', long)]
    count: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    documents: usize,
    /// Sentences per document, inclusive range `lo..=hi`.
    #[arg(long, value_parser = parse_range, default_value = "3..=8")]
    sentences: (usize, usize),
    /// Tokens per sentence, inclusive range `lo..=hi`.
    #[arg(long, value_parser = parse_range, default_value = "6..=18")]
    sentence_len: (usize, usize),
    /// Entities per document, inclusive range `lo..=hi`.
    #[arg(long, value_parser = parse_range, default_value = "2..=6")]
    entities: (usize, usize),
    #[arg(long, default_value_t = 100)]
    vocabulary: usize,
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.1)]
    crossing_prob: f64,
    #[arg(long, default_value_t = 0.05)]
    empty_node_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once("..=").ok_or("expected `lo..=hi`")?;
    let lo: usize = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: usize = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if lo > hi {
        return Err("empty range".into());
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type AnyError = Box<dyn std::error::Error + Send + Sync>;

fn run(command: Command) -> Result<(), AnyError> {
    match command {
        Command::Convert(a) => convert(a),
        Command::Tags(a) => tags(a),
        Command::Train(a) => do_train(a),
        Command::Predict(a) => do_predict(a),
        Command::Score(a) => do_score(a),
        Command::Mix(a) => mix(a),
        Command::Synth(a) => synth(a),
        Command::Selftest => selftest(),
    }
}

fn read_docs(path: &Path) -> Result<Vec<Document>, AnyError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(parse_documents(&text).map_err(|e| format!("{}: {e}", path.display()))?)
}

fn write_docs(path: &Path, docs: &[Document]) -> Result<(), AnyError> {
    let text: String = docs.iter().map(serialize_document).collect();
    std::fs::write(path, text)?;
    Ok(())
}

/// Map one output path per input: a directory target keeps file names.
fn output_paths(inputs: &[PathBuf], output: &Path) -> Result<Vec<PathBuf>, AnyError> {
    if inputs.len() == 1 && !output.is_dir() {
        return Ok(vec![output.to_path_buf()]);
    }
    if !output.is_dir() {
        return Err(format!(
            "{} must be a directory when given several inputs",
            output.display()
        )
        .into());
    }
    Ok(inputs
        .iter()
        .map(|p| output.join(p.file_name().expect("input file name")))
        .collect())
}

fn with_jobs<T: Send, R: Send>(
    jobs: usize,
    items: Vec<T>,
    f: impl Fn(T) -> Result<R, AnyError> + Sync + Send,
) -> Result<Vec<R>, AnyError>
where
    T: Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()?;
    // Index-ordered collection keeps the output deterministic.
    pool.install(|| items.into_par_iter().map(f).collect())
}

fn write_manifest(output: &Path, manifest: &serde_json::Value) -> Result<(), AnyError> {
    let path = output.with_extension("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<(), AnyError> {
    let outputs = output_paths(&a.inputs, &a.output)?;
    let pairs: Vec<(PathBuf, PathBuf)> = a.inputs.into_iter().zip(outputs).collect();
    with_jobs(a.jobs, pairs, |(input, output)| {
        let mut docs = read_docs(&input)?;
        for d in &mut docs {
            if a.surface {
                *d = surface_empty_nodes(d, a.marker)?;
            }
            d.normalize();
        }
        write_docs(&output, &docs)
    })?;
    Ok(())
}

const TAG_ATTR: &str = "Tag=";

fn tags(a: TagsArgs) -> Result<(), AnyError> {
    match a.action {
        TagsAction::Encode { input, output } => {
            let mut docs = read_docs(&input)?;
            for doc in &mut docs {
                let starts = doc.sentence_starts();
                for (si, sent) in doc.sentences.iter_mut().enumerate() {
                    let spans = doc
                        .entities
                        .iter()
                        .flat_map(|e| &e.mentions)
                        .filter(|m| {
                            m.is_continuous()
                                && m.first() >= starts[si]
                                && m.last() < starts[si] + sent.tokens.len()
                        })
                        .map(|m| (m.first() - starts[si], m.last() - starts[si]));
                    let (spans, _) = dedup_spans(spans);
                    let tags = encode_mentions(sent.tokens.len(), &spans)?;
                    for (tok, tag) in sent.tokens.iter_mut().zip(tags) {
                        tok.misc_rest.push(format!("{TAG_ATTR}{tag}"));
                    }
                }
                doc.entities.clear();
            }
            write_docs(&output, &docs)
        }
        TagsAction::Decode { input, output } => {
            let mut docs = read_docs(&input)?;
            for doc in &mut docs {
                let starts = doc.sentence_starts();
                let mut mentions: Vec<Mention> = Vec::new();
                for (si, sent) in doc.sentences.iter_mut().enumerate() {
                    let mut tags = Vec::with_capacity(sent.tokens.len());
                    for tok in sent.tokens.iter_mut() {
                        let Some(i) = tok.misc_rest.iter().position(|m| m.starts_with(TAG_ATTR))
                        else {
                            return Err(format!(
                                "token {} in {} lacks a {TAG_ATTR} attribute",
                                tok.form, sent.sent_id
                            )
                            .into());
                        };
                        let attr = tok.misc_rest.remove(i);
                        tags.push(Tag::parse(&attr[TAG_ATTR.len()..])?);
                    }
                    for (s, e) in decode_tags(&tags)?.spans {
                        let positions: Vec<usize> = (starts[si] + s..=starts[si] + e).collect();
                        mentions.push(Mention {
                            head: 0, // fixed up below, after the borrow ends
                            positions,
                        });
                    }
                }
                for m in &mut mentions {
                    m.head = head_of_span(doc, &m.positions);
                }
                mentions.sort_by_key(|m| (m.first(), m.last()));
                doc.entities = mentions
                    .into_iter()
                    .enumerate()
                    .map(|(i, m)| Entity {
                        id: format!("e{}", i + 1),
                        mentions: vec![m],
                    })
                    .collect();
            }
            write_docs(&output, &docs)
        }
    }
}

fn resolve_config(
    config: Option<&Path>,
    preset: Option<Preset>,
    overrides: &ConfigOverrides,
) -> Result<TrainConfig, AnyError> {
    let mut cfg = match preset {
        Some(Preset::ToyOverfit) => TrainConfig::toy(),
        None => TrainConfig::default(),
    };
    if let Some(path) = config {
        cfg = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    }
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn do_train(a: TrainArgs) -> Result<(), AnyError> {
    let cfg = resolve_config(a.config.as_deref(), a.preset, &a.overrides)?;
    let mut train_docs = Vec::new();
    for p in &a.train {
        train_docs.extend(read_docs(p)?);
    }
    let dev_docs = if a.dev.is_empty() {
        train_docs.clone()
    } else {
        let mut docs = Vec::new();
        for p in &a.dev {
            docs.extend(read_docs(p)?);
        }
        docs
    };
    let mut model = Model::<f64>::new(&train_docs, cfg.clone())?;
    let outcome = train(&mut model, &train_docs, &dev_docs)?;
    save_checkpoint(&model, &a.output)?;
    let best_path = a.output.with_extension("best.ckpt");
    let best_model = Model {
        params: outcome.best_params.clone(),
        ..model.clone()
    };
    save_checkpoint(&best_model, &best_path)?;
    write_manifest(
        &a.output,
        &serde_json::json!({
            "command": "train",
            "config": cfg,
            "train": a.train,
            "dev": a.dev,
            "dev_scores": outcome.dev_scores,
            "epoch_losses": outcome.epoch_losses,
            "best_epoch": outcome.best_epoch,
            "best_checkpoint": best_path,
        }),
    )?;
    for (i, (loss, dev)) in outcome
        .epoch_losses
        .iter()
        .zip(&outcome.dev_scores)
        .enumerate()
    {
        println!("epoch {:>3}  loss {loss:>9.4}  dev CoNLL {dev:>6.2}", i + 1);
    }
    println!("best epoch {} -> {}", outcome.best_epoch + 1, best_path.display());
    Ok(())
}

fn do_predict(a: PredictArgs) -> Result<(), AnyError> {
    let model: Model<f64> = load_checkpoint(&a.model)?;
    let outputs = output_paths(&a.inputs, &a.output)?;
    let pairs: Vec<(PathBuf, PathBuf)> = a.inputs.iter().cloned().zip(outputs).collect();
    with_jobs(a.jobs, pairs, |(input, output)| {
        let docs = read_docs(&input)?;
        let predicted = docs
            .iter()
            .map(|d| predict(&model, d, a.reduce_heads))
            .collect::<Result<Vec<_>, _>>()?;
        write_docs(&output, &predicted)
    })?;
    write_manifest(
        &a.output,
        &serde_json::json!({
            "command": "predict",
            "model": a.model,
            "inputs": a.inputs,
            "reduce_heads": a.reduce_heads,
            "config": model.cfg,
        }),
    )?;
    Ok(())
}

fn do_score(a: ScoreArgs) -> Result<(), AnyError> {
    let key = read_docs(&a.key)?;
    let response = read_docs(&a.response)?;
    if key.len() != response.len() {
        return Err(format!(
            "key has {} documents, response has {}",
            key.len(),
            response.len()
        )
        .into());
    }
    let with_singletons = !a.without_singletons;
    let reports: Vec<(String, ScoreReport)> = key
        .iter()
        .zip(&response)
        .map(|(k, r)| {
            (
                k.doc_id.clone(),
                score(&k.entities, &r.entities, with_singletons),
            )
        })
        .collect();
    println!(
        "{:<20} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "document", "MUC-P", "MUC-R", "MUC-F", "B3-F", "CEAFe-F", "CoNLL", "single"
    );
    for (id, r) in &reports {
        println!(
            "{:<20} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7}",
            id,
            r.muc.precision,
            r.muc.recall,
            r.muc.f1,
            r.b_cubed.f1,
            r.ceaf_e.f1,
            r.conll,
            if r.with_singletons { "yes" } else { "no" }
        );
    }
    let avg = macro_average(&reports.iter().map(|(_, r)| r.conll).collect::<Vec<_>>());
    println!("{:<20} {:>55.2}", "macro average", avg);
    if let Some(path) = &a.report {
        let json = serde_json::json!({
            "documents": reports.iter().map(|(id, r)| serde_json::json!({
                "doc_id": id, "report": r,
            })).collect::<Vec<_>>(),
            "macro_average_conll": avg,
            "with_singletons": with_singletons,
        });
        std::fs::write(path, serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn mix(a: MixArgs) -> Result<(), AnyError> {
    let spec: MixSpec = serde_json::from_str(&std::fs::read_to_string(&a.spec)?)?;
    let kept: Vec<(String, usize)> = spec
        .datasets
        .iter()
        .filter(|(id, _)| !spec.exclude.contains(id))
        .cloned()
        .collect();
    let pool_sizes: Vec<usize> = kept.iter().map(|&(_, n)| n).collect();
    let stream = SampleStream::new(&spec, &pool_sizes)?;
    let mut out = String::new();
    for draw in stream.take(a.count) {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            kept[draw.dataset].0,
            draw.example,
            draw.corpus_id.as_deref().unwrap_or("-")
        ));
    }
    std::fs::write(&a.output, out)?;
    write_manifest(
        &a.output,
        &serde_json::json!({ "command": "mix", "spec": spec, "count": a.count }),
    )?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), AnyError> {
    let spec = SynthSpec {
        documents: a.documents,
        sentences_per_doc: a.sentences,
        sentence_len: a.sentence_len,
        entities: a.entities,
        vocabulary: a.vocabulary,
        max_depth: a.max_depth,
        crossing_prob: a.crossing_prob,
        empty_node_prob: a.empty_node_prob,
        seed: a.seed,
        ..SynthSpec::default()
    };
    let docs = generate(&spec);
    write_docs(&a.output, &docs)?;
    write_manifest(
        &a.output,
        &serde_json::json!({
            "command": "synth",
            "documents": a.documents,
            "vocabulary": a.vocabulary,
            "max_depth": a.max_depth,
            "crossing_prob": a.crossing_prob,
            "empty_node_prob": a.empty_node_prob,
            "seed": a.seed,
        }),
    )?;
    Ok(())
}

/// Brute-force oracle suites, mirroring the heaviest unit tests.
fn selftest() -> Result<(), AnyError> {
    use corpipe::crf::{log_partition, viterbi_decode, CrfParams};
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    // Codec fuzz: encode/decode identity over random span sets.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for round in 0..2_000 {
        let n = rng.gen_range(1..=30);
        let mut spans: BTreeSet<(usize, usize)> = BTreeSet::new();
        for _ in 0..rng.gen_range(0..8) {
            let s = rng.gen_range(0..n);
            let e = rng.gen_range(s..n.min(s + 6));
            spans.insert((s, e));
        }
        let tags = encode_mentions(n, &spans)?;
        let decoded = decode_tags(&tags)?;
        if decoded.spans != spans {
            return Err(format!("codec round-trip failed at round {round}").into());
        }
    }
    println!("selftest: codec round-trip ok (2000 rounds)");

    // CRF vs exhaustive enumeration.
    fn brute(emissions: &Array2<f64>, p: &CrfParams<f64>) -> (f64, Vec<usize>) {
        let (t, v) = emissions.dim();
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut z_terms = Vec::new();
        let mut path = vec![0usize; t];
        loop {
            let mut ok = p.start_mask[path[0]] && p.end_mask[path[t - 1]];
            let mut s = emissions[(0, path[0])];
            for i in 1..t {
                ok &= p.validity_mask[(path[i - 1], path[i])];
                s += p.transitions[(path[i - 1], path[i])] + emissions[(i, path[i])];
            }
            if ok {
                z_terms.push(s);
                if best.as_ref().map_or(true, |(b, bp)| s > *b || (s == *b && path < *bp)) {
                    best = Some((s, path.clone()));
                }
            }
            let mut i = 0;
            loop {
                path[i] += 1;
                if path[i] < v {
                    break;
                }
                path[i] = 0;
                i += 1;
                if i == t {
                    let z = {
                        let m = z_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        m + z_terms.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
                    };
                    let (_, bp) = best.expect("some valid path");
                    return (z, bp);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for round in 0..200 {
        let t = rng.gen_range(1..=5);
        let v = rng.gen_range(2..=6);
        let p = CrfParams::<f64> {
            transitions: Array2::from_shape_fn((v, v), |_| rng.gen_range(-1.0..1.0)),
            start_mask: vec![true; v],
            end_mask: vec![true; v],
            validity_mask: Array2::from_elem((v, v), true),
        };
        let e = Array2::from_shape_fn((t, v), |_| rng.gen_range(-2.0..2.0));
        let (z_bf, path_bf) = brute(&e, &p);
        let z = log_partition(e.view(), &p)?;
        let path = viterbi_decode(e.view(), &p)?;
        if (z - z_bf).abs() > 1e-9 || path != path_bf {
            return Err(format!("CRF oracle mismatch at round {round}").into());
        }
    }
    println!("selftest: CRF brute-force oracle ok (200 rounds)");

    // Learning-rate schedule sanity.
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, 100, &cfg), 0.0);
    assert_eq!(lr_at(100, 100, &cfg), 0.0);
    println!("selftest: schedule endpoints ok");
    let _ = WindowConfig::default();
    Ok(())
}
