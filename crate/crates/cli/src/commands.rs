use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use opsc_core::checkpoint::load_checkpoint;
use opsc_core::config::RunConfig;
use opsc_core::corpus::{dedup_normals, ingest_with, numericalize, stratified_split, write_raw_corpus, ClfExample, LabelType, SplitManifest, Vocab, NUM_CLASSES};
use opsc_core::disasm::{disassemble_with, load_opcode_table, DisasmOptions};
use opsc_core::metrics::{confusion, report, MetricsReport};
use opsc_core::model::{transfer_encoder, Model, ModelKind};
use opsc_core::pipeline::{finetune, prepare, pretrain_lm, Prepared};
use opsc_core::synth::{generate, motifs};
use opsc_core::trainer::{argmax, evaluate_clf, lr_find, predict_clf, ClfProbe, LmProbe, LrFinderResult, RunArtifacts, TrainState};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::prep_dir::{self, write_json};

pub const SYNTH_CORPUS: &str = "corpus.jsonl";
pub const MOTIFS_FILE: &str = "motifs.json";
pub const LR_CSV: &str = "lr_find.csv";
pub const LR_JSON: &str = "lr_find.json";
pub const SUMMARY_JSON: &str = "summary.json";

/// Everything a command needs besides its own arguments.
pub struct Context<'a> {
    pub config: RunConfig,
    pub out: PathBuf,
    pub stdout: &'a mut dyn Write,
}

impl Context<'_> {
    fn out_dir(&self) -> CliResult<&Path> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))?;
        self.config.echo_to(&self.out)?;
        Ok(&self.out)
    }

    fn print(&mut self, text: &str) -> CliResult<()> {
        self.stdout
            .write_all(text.as_bytes())
            .map_err(|e| CliError::io("<stdout>", e))
    }

    fn metadata(&self, command: &str) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("command".to_string(), command.to_string()),
            ("seed".to_string(), self.config.seed.to_string()),
        ])
    }
}

fn read_hex(file: Option<&Path>, hex: Option<&str>) -> CliResult<String> {
    match (file, hex) {
        (_, Some(h)) => Ok(h.to_string()),
        (Some(f), None) => std::fs::read_to_string(f).map_err(|e| CliError::io(f, e)),
        (None, None) => Err(CliError::Usage("give a bytecode file or --hex".into())),
    }
}

pub fn disasm(ctx: &mut Context, a: &DisasmArgs) -> CliResult<()> {
    let hex = read_hex(a.file.as_deref(), a.hex.as_deref())?;
    let opts = DisasmOptions {
        collapse_push: a.collapse_push || ctx.config.corpus.collapse_push,
    };
    let seq = disassemble_with(&hex, load_opcode_table(), opts)?;
    let text = if a.json {
        serde_json::to_string(&seq)? + "\n"
    } else {
        seq.tokens.join(" ") + "\n"
    };
    ctx.print(&text)
}

pub fn synth(ctx: &mut Context, a: &SynthArgs) -> CliResult<()> {
    let cfg = &mut ctx.config.synth;
    cfg.per_class = a.per_class.unwrap_or(cfg.per_class);
    cfg.mean_len = a.mean_len.unwrap_or(cfg.mean_len);
    cfg.len_jitter = a.len_jitter.unwrap_or(cfg.len_jitter);
    let (cfg, seed) = (*cfg, ctx.config.seed);
    let records = generate(&cfg, seed)?;
    let dir = ctx.out_dir()?.to_path_buf();
    write_raw_corpus(&dir.join(SYNTH_CORPUS), &records)?;
    let planted: BTreeMap<String, Vec<&str>> = LabelType::ALL
        .iter()
        .zip(motifs(&cfg, seed))
        .map(|(l, m)| (l.number().to_string(), m))
        .collect();
    write_json(&dir.join(MOTIFS_FILE), &planted)?;
    ctx.print(&format!("wrote {} records to {}\n", records.len(), dir.join(SYNTH_CORPUS).display()))
}

fn ingest_corpus(ctx: &Context, corpus: &Path, collapse_push: bool) -> CliResult<opsc_core::corpus::IngestReport> {
    let opts = DisasmOptions {
        collapse_push: collapse_push || ctx.config.corpus.collapse_push,
    };
    Ok(ingest_with(corpus, opts)?)
}

pub fn prep(ctx: &mut Context, a: &PrepArgs) -> CliResult<()> {
    ctx.config.corpus.collapse_push |= a.collapse_push;
    let report = ingest_corpus(ctx, &a.corpus, false)?;
    let prepared = prepare(report, &ctx.config.corpus, ctx.config.seed)?;
    let dir = ctx.out_dir()?.to_path_buf();
    let s = prep_dir::save(&prepared, &dir)?;
    ctx.print(&format!(
        "{} records ({} duplicate normals removed, {} composite skipped), vocab {}; train {:?} valid {:?} test {:?}\n",
        s.records, s.removed_duplicates, s.skipped_composite, s.vocab_size, s.train, s.valid, s.test
    ))
}

pub fn split(ctx: &mut Context, a: &SplitArgs) -> CliResult<()> {
    let report = ingest_corpus(ctx, &a.corpus, false)?;
    let records = dedup_normals(report.records);
    let split = stratified_split(&records, ctx.config.corpus.ratios, ctx.config.seed)?;
    let dir = ctx.out_dir()?.to_path_buf();
    SplitManifest::from_split(&split).save(&dir.join(prep_dir::SPLIT_FILE))?;
    ctx.print(&format!(
        "train {} valid {} test {}\n",
        split.train.len(),
        split.valid.len(),
        split.test.len()
    ))
}

#[derive(Serialize)]
struct LrSummary<'a> {
    suggestion: f64,
    diverged: bool,
    points: usize,
    result: &'a LrFinderResult,
}

fn load_lm(path: &Path, vocab: &Vocab) -> CliResult<Model<f32>> {
    Ok(load_checkpoint::<f32>(path, Some(ModelKind::Lm), Some(vocab))?.0)
}

pub fn lr_find_cmd(ctx: &mut Context, a: &LrFindArgs) -> CliResult<()> {
    let prepared = prep_dir::load(&a.prep)?;
    let cfg = ctx.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let result = match a.target {
        LrTarget::Lm => {
            if a.lm.is_some() {
                return Err(CliError::Usage("--lm only applies to --target clf".into()));
            }
            let mut lm = Model::<f32>::new_lm(cfg.model.with_vocab(prepared.vocab.len()), &prepared.vocab, &mut rng)?;
            let mut probe = LmProbe::new(&mut lm, &prepared.lm_train(), &cfg.lm, cfg.seed)?;
            lr_find(&mut probe, &cfg.lr_find)?
        }
        LrTarget::Clf => {
            let mut clf = match &a.lm {
                Some(path) => {
                    let lm = load_lm(path, &prepared.vocab)?;
                    transfer_encoder(&lm, &prepared.vocab, cfg.model.head_hidden, cfg.model.dropouts.head, &mut rng)?
                }
                None => {
                    let mut m = Model::<f32>::new_classifier(cfg.model.with_vocab(prepared.vocab.len()), &prepared.vocab, &mut rng)?;
                    m.freeze_encoder();
                    m
                }
            };
            let mut probe = ClfProbe::new(&mut clf, &prepared.clf_train(), &cfg.clf, cfg.seed)?;
            lr_find(&mut probe, &cfg.lr_find)?
        }
    };
    let dir = ctx.out_dir()?.to_path_buf();
    let csv_path = dir.join(LR_CSV);
    std::fs::write(&csv_path, result.to_csv()).map_err(|e| CliError::io(&csv_path, e))?;
    write_json(
        &dir.join(LR_JSON),
        &LrSummary {
            suggestion: result.suggestion,
            diverged: result.diverged,
            points: result.points.len(),
            result: &result,
        },
    )?;
    ctx.print(&format!("suggested lr {:.3e} ({} points)\n", result.suggestion, result.points.len()))
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
}

fn summarize<T>(state: &TrainState<T>) -> TrainSummary {
    TrainSummary {
        epochs: state.epoch,
        best_epoch: state.best_epoch,
        best_metric: state.best_metric,
    }
}

pub fn train_lm_cmd(ctx: &mut Context, a: &TrainLmArgs) -> CliResult<()> {
    let prepared = prep_dir::load(&a.prep)?;
    let dir = ctx.out_dir()?.to_path_buf();
    let mut artifacts = RunArtifacts::in_dir(&dir)?;
    artifacts.metadata = ctx.metadata("train-lm");
    let (_, state) = pretrain_lm(&prepared, &ctx.config, &artifacts)?;
    let s = summarize(&state);
    write_json(&dir.join(SUMMARY_JSON), &s)?;
    ctx.print(&format!(
        "trained {} epochs; best validation loss {:.4} at epoch {}\n",
        s.epochs,
        s.best_metric.unwrap_or(f64::NAN),
        s.best_epoch.unwrap_or(0)
    ))
}

pub fn train_clf_cmd(ctx: &mut Context, a: &TrainClfArgs) -> CliResult<()> {
    let prepared = prep_dir::load(&a.prep)?;
    let lm = match (&a.lm, a.random_encoder) {
        (Some(path), false) => Some(load_lm(path, &prepared.vocab)?),
        (None, true) => None,
        _ => return Err(CliError::Usage("give exactly one of --lm or --random-encoder".into())),
    };
    let dir = ctx.out_dir()?.to_path_buf();
    let mut artifacts = RunArtifacts::in_dir(&dir)?;
    artifacts.metadata = ctx.metadata("train-clf");
    artifacts
        .metadata
        .insert("encoder".into(), if lm.is_some() { "pretrained" } else { "random" }.into());
    let (_, state) = finetune(&prepared, lm.as_ref(), &ctx.config, &artifacts)?;
    let s = summarize(&state);
    write_json(&dir.join(SUMMARY_JSON), &s)?;
    ctx.print(&format!(
        "trained {} epochs; best validation F {:.4} at epoch {}\n",
        s.epochs,
        s.best_metric.unwrap_or(f64::NAN),
        s.best_epoch.unwrap_or(0)
    ))
}

fn split_examples(prepared: &Prepared, which: SplitName) -> Vec<ClfExample> {
    match which {
        SplitName::Train => prepared.clf_train(),
        SplitName::Valid => prepared.clf_valid(),
        SplitName::Test => prepared.clf_test(),
    }
}

/// One row of a predictions file.
#[derive(Debug, Deserialize)]
struct PredictionRow {
    actual: usize,
    predicted: usize,
    p1: Option<f64>,
    p2: Option<f64>,
    p3: Option<f64>,
    p4: Option<f64>,
}

fn report_from_predictions(path: &Path, beta: f64) -> CliResult<MetricsReport> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(csv_err)?;
    let (mut actual, mut predicted, mut probs) = (Vec::new(), Vec::new(), Vec::new());
    let mut with_probs = true;
    for row in reader.deserialize() {
        let row: PredictionRow = row.map_err(csv_err)?;
        actual.push(row.actual);
        predicted.push(row.predicted);
        match (row.p1, row.p2, row.p3, row.p4) {
            (Some(a), Some(b), Some(c), Some(d)) => probs.push([a, b, c, d]),
            _ => with_probs = false,
        }
    }
    let cm = confusion(&predicted, &actual)?;
    let scores: Option<(&[[f64; NUM_CLASSES]], &[usize])> = with_probs.then_some((&probs[..], &actual[..]));
    Ok(report(&cm, scores, beta)?)
}

pub fn eval(ctx: &mut Context, a: &EvalArgs) -> CliResult<()> {
    let beta = ctx.config.clf.beta;
    let rep = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), None) => {
            let prep = a
                .prep
                .as_ref()
                .ok_or_else(|| CliError::Usage("--checkpoint needs --prep".into()))?;
            let prepared = prep_dir::load(prep)?;
            let (model, _) = load_checkpoint::<f32>(ckpt, Some(ModelKind::Clf), Some(&prepared.vocab))?;
            let c = &ctx.config.clf;
            evaluate_clf(&model, &split_examples(&prepared, a.split), c.batch_size, c.max_len, c.truncate, beta)?.report
        }
        (None, Some(preds)) => report_from_predictions(preds, beta)?,
        _ => return Err(CliError::Usage("give exactly one of --checkpoint or --predictions".into())),
    };
    let dir = ctx.out_dir()?.to_path_buf();
    rep.write_to_dir(&dir)?;
    ctx.print(&rep.to_table())
}

/// Output of `predict`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// 1-based type number.
    pub predicted: u8,
    pub label: String,
    /// Softmax probabilities for Type-1..Type-4.
    pub probabilities: [f64; NUM_CLASSES],
    pub tokens: usize,
    pub unknown_tokens: usize,
}

pub fn predict(ctx: &mut Context, a: &PredictArgs) -> CliResult<()> {
    let vocab = Vocab::load(&a.vocab)?;
    let (model, _) = load_checkpoint::<f32>(&a.checkpoint, Some(ModelKind::Clf), Some(&vocab))?;
    let hex = read_hex(a.file.as_deref(), a.hex.as_deref())?;
    let opts = DisasmOptions {
        collapse_push: ctx.config.corpus.collapse_push,
    };
    let tokens = disassemble_with(&hex, load_opcode_table(), opts)?.tokens;
    if tokens.is_empty() {
        return Err(opsc_core::Error::InvalidData("bytecode is empty".into()).into());
    }
    let ids = numericalize(&tokens, &vocab);
    let unknown = ids.iter().filter(|&&i| i == opsc_core::corpus::UNK_ID).count();
    let c = &ctx.config.clf;
    let probs = predict_clf(&model, &[ClfExample { ids, label: 0 }], 1, c.max_len, c.truncate)?[0];
    let label = LabelType::from_index(argmax(&probs)).expect("argmax is a class index");
    let p = Prediction {
        predicted: label.number(),
        label: label.to_string(),
        probabilities: probs,
        tokens: tokens.len(),
        unknown_tokens: unknown,
    };
    ctx.print(&(serde_json::to_string(&p)? + "\n"))
}
