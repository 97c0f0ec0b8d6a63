//! Subcommand implementations. Each one reads what it needs from a
//! [`RunConfig`] and writes its artifacts under `output_dir`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use notecoder_core::cohort::{split_by_patient, LabelSpace, Split, SplitAssignment};
use notecoder_core::corpus::{chunk_note, encode, mean_oov_per_note, normalize_text, Note, TokenizedNote, Vocab};
use notecoder_core::encoder::{extend_positions, init_encoder, EncoderParams};
use notecoder_core::eval::{low_frequency_slice, EvalReport};
use notecoder_core::heads::{predict_note, predict_notes, train_classifier, Classifier, HeadKind, TrainOutcome};
use notecoder_core::numerics::derive_seed;
use notecoder_core::pretrain::{mlm_infill, pretrain, write_loss_curve, PretrainOutcome};
use notecoder_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, write_atomic, Checkpoint, ModelSpec};
use crate::config::{EncoderChoice, RunConfig};
use crate::data::{self, Cohort};
use crate::export::{export_attention, render_html, AttentionExport, LabelQuery};
use crate::synth::SynthWorld;

/// Label space saved next to a classifier checkpoint.
pub const LABELS_FILE: &str = "labels.csv";

pub fn vocab_hash(vocab: &Vocab) -> String {
    sha256_hex(&vocab.to_text())
}

pub fn label_space_hash(space: &LabelSpace) -> String {
    sha256_hex(&space.to_csv_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OovStat {
    pub vocab: String,
    pub vocab_size: usize,
    pub mean_oov_per_note: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabReport {
    pub notes: usize,
    pub distinct_tokens: usize,
    pub built: OovStat,
    pub comparison: Option<OovStat>,
}

fn oov_stat(name: String, notes: &[Vec<String>], vocab: &Vocab) -> Result<OovStat> {
    let tokenized: Vec<TokenizedNote> = notes.iter().map(|t| encode("", t, vocab)).collect();
    Ok(OovStat {
        vocab: name,
        vocab_size: vocab.len(),
        mean_oov_per_note: mean_oov_per_note(&tokenized)?,
    })
}

/// Counts tokens over the filtered labeled notes (plus the pretraining
/// notes, when configured) and keeps the `vocab_size` most frequent.
pub fn build_vocab(cfg: &RunConfig) -> Result<(Vocab, VocabReport)> {
    let notes = data::filter_notes(data::load_notes(cfg.require("notes", &cfg.notes)?)?, &cfg.excluded_categories);
    let mut counts = data::count_tokens(&notes);
    if let Some(p) = &cfg.pretrain_notes {
        counts.merge(&data::count_tokens(&data::filter_notes(data::load_notes(p)?, &cfg.excluded_categories)));
    }
    let vocab = Vocab::from_counts(&counts, cfg.vocab_size)?;
    let tokens: Vec<Vec<String>> = notes.iter().map(|n| normalize_text(&n.text)).collect();
    let vocab_path = cfg.vocab_path();
    let built = oov_stat(vocab_path.display().to_string(), &tokens, &vocab)?;
    let comparison = match &cfg.comparison_vocab {
        Some(p) => Some(oov_stat(p.display().to_string(), &tokens, &data::load_vocab(p)?)?),
        None => None,
    };
    let report = VocabReport {
        notes: notes.len(),
        distinct_tokens: counts.distinct(),
        built,
        comparison,
    };
    write_atomic(&vocab_path, vocab.to_text().as_bytes())?;
    write_json(&cfg.output_dir.join("vocab_report.json"), &report)?;
    Ok((vocab, report))
}

pub fn pretrain_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("pretrain")
}

pub fn model_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("model")
}

fn load_encoder_checkpoint(path: &Path, vocab: &Vocab) -> Result<EncoderParams<f32>> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_vocab(&vocab_hash(vocab))?;
    ckpt.encoder()
}

/// MLM + NSP pretraining on the pretraining notes; 10% of their patients
/// are held out for dev loss.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainOutcome> {
    let vocab = data::load_vocab(&cfg.vocab_path())?;
    let source = match &cfg.pretrain_notes {
        Some(p) => p.as_path(),
        None => cfg.require("notes", &cfg.notes)?,
    };
    let notes = data::filter_notes(data::load_notes(source)?, &cfg.excluded_categories);
    let patients: Vec<&str> = notes.iter().map(|n| n.patient_id.as_str()).collect();
    let split = split_by_patient(&patients, (0.9, 0.1, 0.0), derive_seed(cfg.seed, &[11]))?;
    let (dev, train): (Vec<&Note>, Vec<&Note>) =
        notes.iter().partition(|n| split.get(&n.patient_id) == Some(Split::Dev));
    let init = match &cfg.init_checkpoint {
        Some(p) => load_encoder_checkpoint(p, &vocab)?,
        None => init_encoder(&cfg.encoder_config(vocab.len())?, derive_seed(cfg.seed, &[12]))?,
    };
    let outcome = pretrain(
        &data::pretrain_docs(train, &vocab),
        &data::pretrain_docs(dev, &vocab),
        init,
        &cfg.pretrain_config(),
        cfg.seed,
    )?;
    let best_dev = outcome
        .curve
        .iter()
        .find(|r| r.step == outcome.best_step)
        .map(|r| r.dev_total());
    Checkpoint::from_encoder(&outcome.best, vocab_hash(&vocab))
        .with_progress(outcome.best_step, best_dev)
        .save(&pretrain_dir(cfg))?;
    let mut csv = Vec::new();
    write_loss_curve(&mut csv, &outcome.curve)?;
    write_atomic(&cfg.output_dir.join("pretrain_loss.csv"), &csv)?;
    Ok(outcome)
}

/// Initial classifier for `cfg.head`, with the encoder from
/// `init_checkpoint` or freshly initialized.
pub fn initial_classifier(cfg: &RunConfig, vocab: &Vocab, space: &LabelSpace) -> Result<Classifier<f32>> {
    let seed = derive_seed(cfg.seed, &[21]);
    match cfg.head {
        HeadKind::Cls | HeadKind::Xml => {
            let mut enc = match &cfg.init_checkpoint {
                Some(p) => load_encoder_checkpoint(p, vocab)?,
                None => init_encoder(&cfg.encoder_config(vocab.len())?, derive_seed(cfg.seed, &[12]))?,
            };
            if enc.config.max_len < cfg.max_len {
                log::info!("extending positions from {} to {}", enc.config.max_len, cfg.max_len);
                enc = extend_positions(&enc, cfg.max_len, derive_seed(cfg.seed, &[13]))?;
            }
            let (model, fallbacks) = Classifier::with_encoder(cfg.head, &enc, cfg.head_params.clone(), space, vocab, seed)?;
            if !fallbacks.is_empty() {
                log::warn!("{} labels fell back to random init: {}", fallbacks.len(), fallbacks.join(" "));
            }
            Ok(model)
        }
        HeadKind::Multihead => Classifier::multihead(vocab.len(), space.len(), cfg.head_params.clone(), seed),
        HeadKind::Logreg => Ok(Classifier::logreg(vocab.len(), space.len())),
    }
}

fn metrics_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("epoch,step,train_loss,dev_micro_auc,dev_macro_auc\n");
    for m in &outcome.metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            m.epoch, m.step, m.train_loss, m.dev_micro_auc, m.dev_macro_auc
        );
    }
    s
}

fn step_loss_csv(outcome: &TrainOutcome) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in outcome.step_losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l}", i + 1);
    }
    s
}

pub fn save_classifier(dir: &Path, model: &Classifier<f32>, vocab: &Vocab, space: &LabelSpace, step: u64, metric: Option<f64>) -> Result<()> {
    Checkpoint::from_classifier(model, vocab_hash(vocab), label_space_hash(space))
        .with_progress(step, metric)
        .save(dir)?;
    write_atomic(&dir.join(LABELS_FILE), space.to_csv_string().as_bytes())
}

/// Fine-tunes the configured head and keeps the best dev micro-AUC epoch.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let cohort = Cohort::from_config(cfg)?;
    let vocab = data::load_vocab(&cfg.vocab_path())?;
    let train = cohort.labeled(Split::Train, &vocab);
    let dev = cohort.labeled(Split::Dev, &vocab);
    log::info!(
        "{} train / {} dev notes, {} labels",
        train.len(),
        dev.len(),
        cohort.space.len()
    );
    let model = initial_classifier(cfg, &vocab, &cohort.space)?;
    let outcome = train_classifier(model, &train, &dev, &cfg.train_config(), cfg.seed)?;
    let best = outcome.best_metrics();
    save_classifier(
        &model_dir(cfg),
        &outcome.best,
        &vocab,
        &cohort.space,
        best.map_or(0, |m| m.step),
        best.map(|m| m.dev_micro_auc),
    )?;
    write_atomic(&cfg.output_dir.join("metrics.csv"), metrics_csv(&outcome).as_bytes())?;
    write_atomic(&cfg.output_dir.join("step_loss.csv"), step_loss_csv(&outcome).as_bytes())?;
    let mut splits = Vec::new();
    cohort.splits.write_csv(&mut splits)?;
    write_atomic(&cfg.output_dir.join("splits.csv"), &splits)?;
    Ok(outcome)
}

/// A classifier checkpoint with its label space, checked against `vocab`.
pub fn load_classifier(dir: &Path, vocab: &Vocab) -> Result<(Classifier<f32>, LabelSpace)> {
    let ckpt = Checkpoint::load(dir)?;
    ckpt.check_vocab(&vocab_hash(vocab))?;
    let space = LabelSpace::read_csv(fs::File::open(dir.join(LABELS_FILE))?)?;
    ckpt.check_label_space(&label_space_hash(&space))?;
    Ok((ckpt.classifier()?, space))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub notes: usize,
    pub low_frequency_max_count: u64,
    pub low_frequency_macro_auc: Option<f64>,
    pub report: EvalReport,
}

/// Chunked inference with max aggregation on one split.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, split: Split) -> Result<Evaluation> {
    let cohort = Cohort::from_config(cfg)?;
    let vocab = data::load_vocab(&cfg.vocab_path())?;
    let (model, space) = load_classifier(checkpoint, &vocab)?;
    if label_space_hash(&space) != label_space_hash(&cohort.space) {
        return Err(Error::LabelSpaceMismatch);
    }
    let notes = cohort.labeled(split, &vocab);
    let preds = predict_notes(&model, &notes, space.codes(), cfg.max_len)?;
    let report = EvalReport::build(&preds, cfg.bin_width, cfg.high_auc_threshold)?;
    let low = low_frequency_slice(&report, &space, cfg.low_frequency_max_count).ok();
    let dir = cfg.output_dir.join("eval");
    let name = split.as_str();
    let mut per_label = Vec::new();
    report.write_per_label_csv(&mut per_label)?;
    write_atomic(&dir.join(format!("{name}_per_label.csv")), &per_label)?;
    let mut hist = Vec::new();
    report.write_histogram_csv(&mut hist)?;
    write_atomic(&dir.join(format!("{name}_histogram.csv")), &hist)?;
    let eval = Evaluation {
        split,
        notes: notes.len(),
        low_frequency_max_count: cfg.low_frequency_max_count,
        low_frequency_macro_auc: low,
        report,
    };
    write_json(&dir.join(format!("{name}_report.json")), &eval)?;
    Ok(eval)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub code: String,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NotePrediction {
    pub note_id: String,
    /// Sorted by descending probability.
    pub labels: Vec<LabelScore>,
}

/// Scores every note of `input` (JSON lines) and writes JSON lines to `output`.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, input: &Path, output: &Path, top_k: Option<usize>) -> Result<Vec<NotePrediction>> {
    let vocab = data::load_vocab(&cfg.vocab_path())?;
    let (model, space) = load_classifier(checkpoint, &vocab)?;
    let notes = data::load_notes(input)?;
    let mut out = Vec::with_capacity(notes.len());
    let mut text = String::new();
    for n in &notes {
        let ids: Vec<usize> = normalize_text(&n.text).iter().map(|t| vocab.id(t)).collect();
        let probs = predict_note(&model, &ids, cfg.max_len)?;
        let mut labels: Vec<LabelScore> = space
            .codes()
            .iter()
            .zip(probs)
            .map(|(c, p)| LabelScore {
                code: c.clone(),
                probability: p,
            })
            .collect();
        labels.sort_by(|a, b| b.probability.total_cmp(&a.probability).then_with(|| a.code.cmp(&b.code)));
        if let Some(k) = top_k {
            labels.truncate(k);
        }
        let p = NotePrediction {
            note_id: n.note_id.clone(),
            labels,
        };
        text.push_str(&serde_json::to_string(&p)?);
        text.push('\n');
        out.push(p);
    }
    write_atomic(output, text.as_bytes())?;
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct ExportRequest {
    pub note_id: Option<String>,
    pub text: Option<String>,
    pub labels: Vec<String>,
    pub chunk: usize,
    /// Token positions to mask for the infill demo (encoder checkpoints).
    pub infill: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Infill {
    pub position: usize,
    pub original: String,
    pub predicted: String,
}

/// Writes `attention/<note>.json` and `.html`; for an encoder checkpoint
/// with infill positions also `attention/<note>_infill.json`.
pub fn cmd_export_attention(cfg: &RunConfig, checkpoint: &Path, req: &ExportRequest) -> Result<AttentionExport> {
    let vocab = data::load_vocab(&cfg.vocab_path())?;
    let (note_id, text) = match (&req.note_id, &req.text) {
        (_, Some(t)) => (req.note_id.clone().unwrap_or_else(|| "text".into()), t.clone()),
        (Some(id), None) => {
            let notes = data::load_notes(cfg.require("notes", &cfg.notes)?)?;
            let n = notes
                .into_iter()
                .find(|n| &n.note_id == id)
                .ok_or_else(|| Error::Empty(format!("note {id} not found")))?;
            (n.note_id, n.text)
        }
        (None, None) => return Err(Error::InvalidConfig("export needs a note id or text".into())),
    };
    let tokens = normalize_text(&text);
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_vocab(&vocab_hash(&vocab))?;
    let dir = cfg.output_dir.join("attention");
    let safe: String = note_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    let (encoder, classifier) = match &ckpt.manifest.model {
        ModelSpec::Encoder { .. } => (ckpt.encoder()?, None),
        ModelSpec::Classifier { .. } => {
            let (model, space) = load_classifier(checkpoint, &vocab)?;
            let enc = EncoderParams::backbone_from_store(model.encoder_config()?.clone(), model.store.clone())?;
            (enc, Some((model, space)))
        }
    };
    let max_len = encoder.config.max_len.min(cfg.max_len);
    let chunks = chunk_note(&encode(note_id.clone(), &tokens, &vocab), max_len)?;
    let chunk = chunks
        .get(req.chunk)
        .ok_or_else(|| Error::OutOfRange(format!("chunk {} of {}", req.chunk, chunks.len())))?;
    let query = match &classifier {
        Some((model, space)) if !req.labels.is_empty() => Some(LabelQuery {
            model,
            space,
            codes: &req.labels,
        }),
        None if !req.labels.is_empty() => {
            return Err(Error::InvalidConfig("label weights need a classifier checkpoint".into()))
        }
        _ => None,
    };
    let export = export_attention(&encoder, query, &vocab, chunk, req.chunk)?;
    write_json(&dir.join(format!("{safe}.json")), &export)?;
    write_atomic(&dir.join(format!("{safe}.html")), render_html(&export).as_bytes())?;
    if !req.infill.is_empty() {
        if classifier.is_some() {
            return Err(Error::InvalidConfig("infill needs an encoder checkpoint".into()));
        }
        let filled: Vec<Infill> = mlm_infill(&text, &encoder, &vocab, &req.infill)?
            .into_iter()
            .map(|(p, predicted)| Infill {
                position: p,
                original: tokens[p].clone(),
                predicted,
            })
            .collect();
        write_json(&dir.join(format!("{safe}_infill.json")), &filled)?;
    }
    Ok(export)
}

/// Generated files of `cmd_synth`, relative to the synth directory.
pub const SYNTH_FILES: [&str; 7] = [
    "notes.jsonl",
    "pretrain_notes.jsonl",
    "descriptions.csv",
    "chronic.txt",
    "splits.csv",
    "world.json",
    "config.json",
];

/// Planted-keyword and bigram corpora plus a ready-to-run config.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthWorld> {
    let seed = cfg.seed;
    let world = SynthWorld::new(cfg.synth.clone(), seed)?;
    let dir = cfg.output_dir.clone();
    let mut notes = Vec::new();
    let mut splits = SplitAssignment {
        seed,
        ..Default::default()
    };
    for (split, prefix, count, stream) in [
        (Split::Train, "tr", cfg.synth_train, 1),
        (Split::Dev, "dv", cfg.synth_dev, 2),
        (Split::Test, "te", cfg.synth_test, 3),
    ] {
        for n in world.planted_notes(count, prefix, derive_seed(seed, &[stream]))? {
            splits.assignments.insert(n.patient_id.clone(), split);
            notes.push(n);
        }
    }
    let bigram = world.bigram_notes(cfg.synth_pretrain, "pt", derive_seed(seed, &[4]));
    let mut buf = Vec::new();
    notecoder_core::corpus::write_notes(&mut buf, &notes)?;
    write_atomic(&dir.join("notes.jsonl"), &buf)?;
    buf.clear();
    notecoder_core::corpus::write_notes(&mut buf, &bigram)?;
    write_atomic(&dir.join("pretrain_notes.jsonl"), &buf)?;
    write_atomic(&dir.join("descriptions.csv"), world.descriptions_csv().as_bytes())?;
    write_atomic(&dir.join("chronic.txt"), world.chronic_list().as_bytes())?;
    buf.clear();
    splits.write_csv(&mut buf)?;
    write_atomic(&dir.join("splits.csv"), &buf)?;
    write_json(&dir.join("world.json"), &world)?;
    let run = RunConfig {
        notes: Some("notes.jsonl".into()),
        pretrain_notes: Some("pretrain_notes.jsonl".into()),
        descriptions: Some("descriptions.csv".into()),
        chronic: Some("chronic.txt".into()),
        splits: Some("splits.csv".into()),
        vocab: Some("run/vocab.txt".into()),
        output_dir: "run".into(),
        vocab_size: 1000,
        min_label_count: 1,
        encoder: EncoderChoice::Preset("desk".into()),
        lr: 1e-3,
        seed,
        synth: cfg.synth.clone(),
        ..RunConfig::default()
    };
    write_json(&dir.join("config.json"), &run)?;
    Ok(world)
}

/// Patient-level split of the filtered notes into `splits.csv`.
pub fn cmd_split(cfg: &RunConfig) -> Result<SplitAssignment> {
    let notes = data::filter_notes(data::load_notes(cfg.require("notes", &cfg.notes)?)?, &cfg.excluded_categories);
    let patients: Vec<&str> = notes.iter().map(|n| n.patient_id.as_str()).collect();
    let split = split_by_patient(&patients, cfg.split_ratios, cfg.seed)?;
    let mut buf = Vec::new();
    split.write_csv(&mut buf)?;
    write_atomic(&cfg.output_dir.join("splits.csv"), &buf)?;
    Ok(split)
}
