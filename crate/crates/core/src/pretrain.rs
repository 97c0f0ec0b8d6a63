//! Masked-LM + next-sentence pretraining.

use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, Chunk, Vocab, MASK, NUM_SPECIALS};
use crate::encoder::{encoder_graph, EncoderConfig, EncoderParams, Mode};
use crate::error::{Error, Result};
use crate::numerics::{
    accumulate, adamw_step, derive_seed, rng_from_seed, scale_grads, AdamWConfig, Binder, Graph, NodeId,
    OptimizerState, ParamGrads, Scalar, Schedule,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub select_prob: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.select_prob > 0.0 && self.select_prob < 1.0 || self.select_prob == 1.0) {
            return Err(Error::InvalidConfig(format!(
                "select_prob {} not in (0,1]",
                self.select_prob
            )));
        }
        let fracs = [self.mask_frac, self.random_frac, self.keep_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "masking fractions {fracs:?} must be in [0,1] and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedChunk {
    pub chunk: Chunk,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    pub positions: Vec<usize>,
}

/// Selects content positions with `select_prob` and corrupts them. Draws
/// again until at least one position is selected.
pub fn mask_tokens<R: Rng + ?Sized>(
    chunk: &Chunk,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<MaskedChunk> {
    policy.validate()?;
    let candidates = chunk.content_positions();
    if candidates.is_empty() {
        return Err(Error::NoMlmTargets);
    }
    if vocab_size <= NUM_SPECIALS {
        return Err(Error::InvalidConfig("vocabulary has no regular ids".into()));
    }
    let positions = loop {
        let picked: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < policy.select_prob)
            .collect();
        if !picked.is_empty() {
            break picked;
        }
    };
    let mut out = chunk.clone();
    let targets = positions.iter().map(|&p| chunk.ids[p]).collect();
    for &p in &positions {
        let u: f64 = rng.random();
        if u < policy.mask_frac {
            out.ids[p] = MASK;
        } else if u < policy.mask_frac + policy.random_frac {
            out.ids[p] = rng.random_range(NUM_SPECIALS..vocab_size);
        }
    }
    Ok(MaskedChunk {
        chunk: out,
        targets,
        positions,
    })
}

/// A note as a list of sentences of token ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainDoc {
    pub note_id: String,
    pub sentences: Vec<Vec<usize>>,
}

impl PretrainDoc {
    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NspPair {
    pub chunk: Chunk,
    pub is_next: bool,
    pub a_doc: usize,
    pub a_sentences: Range<usize>,
    pub b_doc: usize,
    pub b_sentences: Range<usize>,
}

fn pack_forward(sentences: &[Vec<usize>], start: usize, budget: usize) -> (Vec<usize>, Range<usize>) {
    let mut ids = Vec::new();
    let mut end = start;
    while end < sentences.len() && (ids.is_empty() || ids.len() + sentences[end].len() <= budget) {
        ids.extend_from_slice(&sentences[end]);
        end += 1;
    }
    (ids, start..end)
}

fn pack_backward(sentences: &[Vec<usize>], end: usize, budget: usize) -> (Vec<usize>, Range<usize>) {
    let mut start = end;
    let mut len = 0;
    while start > 0 && (len == 0 || len + sentences[start - 1].len() <= budget) {
        start -= 1;
        len += sentences[start].len();
    }
    (sentences[start..end].concat(), start..end)
}

/// Builds a two-segment pair from document `doc`. `force` pins the branch;
/// otherwise positives are drawn with probability 0.5.
///
/// Segment A is a run of whole sentences ending at a random cut. A positive
/// B is the run that follows the cut; a negative B starts at a random
/// sentence of another document. If the pair exceeds `max_len - 3` tokens
/// the longer segment loses tokens from its end.
pub fn make_nsp_pair<R: Rng + ?Sized>(
    docs: &[PretrainDoc],
    doc: usize,
    max_len: usize,
    force: Option<bool>,
    rng: &mut R,
) -> Result<NspPair> {
    let source = docs
        .get(doc)
        .ok_or_else(|| Error::OutOfRange(format!("document {doc} of {}", docs.len())))?;
    let s = &source.sentences;
    if s.len() < 2 || s.iter().any(Vec::is_empty) {
        return Err(Error::InvalidConfig(format!(
            "document {} needs at least two non-empty sentences",
            source.note_id
        )));
    }
    if max_len < 5 {
        return Err(Error::InvalidConfig(format!("max_len {max_len} too short for a pair")));
    }
    let budget = max_len - 3;
    let is_next = force.unwrap_or_else(|| rng.random_bool(0.5));
    let cut = rng.random_range(1..s.len());
    let (mut a, a_sentences) = pack_backward(s, cut, budget / 2);
    let (b_doc, (mut b, b_sentences)) = if is_next {
        (doc, pack_forward(s, cut, budget - a.len().min(budget - 1)))
    } else {
        let others: Vec<usize> = (0..docs.len())
            .filter(|&i| i != doc && docs[i].sentences.iter().any(|x| !x.is_empty()))
            .collect();
        if others.is_empty() {
            return Err(Error::InvalidConfig(
                "negative pairs need a second non-empty document".into(),
            ));
        }
        let other = others[rng.random_range(0..others.len())];
        let os = &docs[other].sentences;
        let start = rng.random_range(0..os.len());
        let start = (start..os.len())
            .chain(0..start)
            .find(|&i| !os[i].is_empty())
            .expect("document has a non-empty sentence");
        (other, pack_forward(os, start, budget - a.len().min(budget - 1)))
    };
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let chunk = Chunk::from_segments(&a, Some(&b), max_len, (source.note_id.clone(), cut))?;
    Ok(NspPair {
        chunk,
        is_next,
        a_doc: doc,
        a_sentences,
        b_doc,
        b_sentences,
    })
}

/// One pretraining example: a masked NSP pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainInstance {
    pub masked: MaskedChunk,
    pub is_next: bool,
}

pub fn make_instance<R: Rng + ?Sized>(
    docs: &[PretrainDoc],
    doc: usize,
    max_len: usize,
    policy: &MaskingPolicy,
    vocab_size: usize,
    rng: &mut R,
) -> Result<PretrainInstance> {
    let pair = make_nsp_pair(docs, doc, max_len, None, rng)?;
    let masked = mask_tokens(&pair.chunk, policy, vocab_size, rng)?;
    Ok(PretrainInstance {
        masked,
        is_next: pair.is_next,
    })
}

/// `P x V` logits for the hidden rows at `positions`; the output matrix is
/// the token embedding table.
pub fn mlm_logits_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    hidden: NodeId,
    positions: &[usize],
    eps: f64,
) -> Result<NodeId> {
    let rows = g.gather(hidden, positions)?;
    let w = b.get(g, "mlm.transform.weight");
    let bias = b.get(g, "mlm.transform.bias");
    let t = g.matmul(rows, w)?;
    let t = g.add_row(t, bias)?;
    let t = g.gelu(t);
    let gain = b.get(g, "mlm.ln.gain");
    let ln_bias = b.get(g, "mlm.ln.bias");
    let t = g.layer_norm(t, gain, ln_bias, F::lit(eps))?;
    let table = b.get(g, "embeddings.token");
    let logits = g.matmul_t(t, table)?;
    let out_bias = b.get(g, "mlm.bias");
    g.add_row(logits, out_bias)
}

/// `1 x 1` is-next logit from the pooled `[CLS]` state.
pub fn nsp_logit_graph<F: Scalar>(g: &mut Graph<F>, b: &mut Binder<F>, hidden: NodeId) -> Result<NodeId> {
    let cls = g.slice_rows(hidden, 0, 1)?;
    let w = b.get(g, "nsp.pooler.weight");
    let bias = b.get(g, "nsp.pooler.bias");
    let pooled = g.matmul(cls, w)?;
    let pooled = g.add_row(pooled, bias)?;
    let pooled = g.tanh(pooled);
    let cw = b.get(g, "nsp.classifier.weight");
    let cb = b.get(g, "nsp.classifier.bias");
    let logit = g.matmul(pooled, cw)?;
    g.add_row(logit, cb)
}

pub struct PretrainLoss {
    pub total: NodeId,
    pub mlm: NodeId,
    pub nsp: NodeId,
}

/// Records MLM cross-entropy + NSP binary cross-entropy for one instance.
pub fn pretrain_loss_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &EncoderConfig,
    inst: &PretrainInstance,
    mode: Mode,
    rng: &mut R,
) -> Result<PretrainLoss> {
    let enc = encoder_graph(g, b, cfg, &inst.masked.chunk, mode, false, rng)?;
    let logits = mlm_logits_graph(g, b, enc.hidden, &inst.masked.positions, cfg.layer_norm_eps)?;
    let all = vec![true; inst.masked.positions.len()];
    let mlm = g.masked_cross_entropy(logits, &inst.masked.targets, &all)?;
    let nsp_logit = nsp_logit_graph(g, b, enc.hidden)?;
    let target = if inst.is_next { F::one() } else { F::zero() };
    let nsp = g.bce_with_logits(nsp_logit, &[target])?;
    let total = g.add(mlm, nsp)?;
    Ok(PretrainLoss { total, mlm, nsp })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub adamw: AdamWConfig,
    pub masking: MaskingPolicy,
    /// Pairs drawn from each document per epoch.
    pub pairs_per_doc: usize,
    /// Optimizer steps between loss-curve rows.
    pub log_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            peak_lr: 1e-4,
            warmup_proportion: 0.1,
            adamw: AdamWConfig::default(),
            masking: MaskingPolicy::default(),
            pairs_per_doc: 1,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub mlm_loss: f64,
    pub nsp_loss: f64,
    pub dev_mlm_loss: f64,
    pub dev_nsp_loss: f64,
}

impl LossRecord {
    pub fn dev_total(&self) -> f64 {
        self.dev_mlm_loss + self.dev_nsp_loss
    }
}

pub fn write_loss_curve(w: impl Write, curve: &[LossRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in curve {
        out.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters at the logged step with the lowest dev loss.
    pub best: EncoderParams<f32>,
    pub best_step: u64,
    pub last: EncoderParams<f32>,
    pub curve: Vec<LossRecord>,
}

fn usable(docs: &[PretrainDoc]) -> Vec<usize> {
    (0..docs.len())
        .filter(|&i| docs[i].sentences.len() >= 2 && docs[i].sentences.iter().all(|s| !s.is_empty()))
        .collect()
}

fn build_instances(
    docs: &[PretrainDoc],
    picks: &[usize],
    max_len: usize,
    policy: &MaskingPolicy,
    vocab_size: usize,
    seed: u64,
) -> Result<Vec<PretrainInstance>> {
    picks
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut rng = rng_from_seed(derive_seed(seed, &[i as u64]));
            make_instance(docs, d, max_len, policy, vocab_size, &mut rng)
        })
        .collect()
}

/// Mean (mlm, nsp) losses in inference mode.
pub fn evaluate_pretrain(params: &EncoderParams<f32>, instances: &[PretrainInstance]) -> Result<(f64, f64)> {
    if instances.is_empty() {
        return Err(Error::Empty("evaluation instances".into()));
    }
    let losses: Vec<(f64, f64)> = instances
        .par_iter()
        .map(|inst| {
            let mut g = Graph::new();
            let mut b = Binder::new(&params.store);
            let mut rng = rng_from_seed(0);
            let l = pretrain_loss_graph(&mut g, &mut b, &params.config, inst, Mode::Infer, &mut rng)?;
            Ok((g.value(l.mlm).data()[0].as_f64(), g.value(l.nsp).data()[0].as_f64()))
        })
        .collect::<Result<_>>()?;
    let n = losses.len() as f64;
    Ok((
        losses.iter().map(|l| l.0).sum::<f64>() / n,
        losses.iter().map(|l| l.1).sum::<f64>() / n,
    ))
}

/// Summed gradients and mean losses over a batch. Per-example gradients are
/// computed in parallel and reduced in input order.
fn batch_grads(
    params: &EncoderParams<f32>,
    batch: &[(PretrainInstance, u64)],
) -> Result<(ParamGrads<f32>, f64, f64)> {
    let parts: Vec<(ParamGrads<f32>, f64, f64)> = batch
        .par_iter()
        .map(|(inst, dropout_seed)| {
            let mut g = Graph::new();
            let mut b = Binder::new(&params.store);
            let mut rng = rng_from_seed(*dropout_seed);
            let l = pretrain_loss_graph(&mut g, &mut b, &params.config, inst, Mode::Train, &mut rng)?;
            let grads = b.grads(g.backward(l.total)?);
            Ok((grads, g.value(l.mlm).data()[0].as_f64(), g.value(l.nsp).data()[0].as_f64()))
        })
        .collect::<Result<_>>()?;
    let mut acc = ParamGrads::new();
    let (mut mlm, mut nsp) = (0.0, 0.0);
    for (gr, m, n) in &parts {
        accumulate(&mut acc, gr);
        mlm += m;
        nsp += n;
    }
    let k = batch.len() as f64;
    scale_grads(&mut acc, (1.0 / k) as f32);
    Ok((acc, mlm / k, nsp / k))
}

/// Joint MLM + NSP training with AdamW and linear warmup/decay. Dev loss is
/// measured every `log_every` steps (and at steps 0 and last); the lowest
/// dev-loss parameters are returned as `best`.
pub fn pretrain(
    train: &[PretrainDoc],
    dev: &[PretrainDoc],
    init: EncoderParams<f32>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    let enc = init.config.clone();
    enc.validate()?;
    cfg.masking.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.pairs_per_doc == 0 || cfg.log_every == 0 {
        return Err(Error::InvalidConfig(
            "epochs, batch_size, pairs_per_doc and log_every must be positive".into(),
        ));
    }
    let train_docs = usable(train);
    if train_docs.is_empty() || train.len() < 2 {
        return Err(Error::EmptyCorpus);
    }
    let dev_docs = usable(dev);
    if dev_docs.is_empty() || dev.len() < 2 {
        return Err(Error::Empty("dev corpus".into()));
    }
    let dev_set = build_instances(dev, &dev_docs, enc.max_len, &cfg.masking, enc.vocab_size, derive_seed(seed, &[u64::MAX]))?;

    let per_epoch = train_docs.len() * cfg.pairs_per_doc;
    let steps_per_epoch = per_epoch.div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let schedule = Schedule::for_updates(cfg.peak_lr, total, cfg.warmup_proportion)?;
    let mut opt = OptimizerState::new(cfg.adamw);
    let mut params = init;
    let mut order_rng = rng_from_seed(derive_seed(seed, &[0]));

    let mut curve = Vec::new();
    let mut best = params.clone();
    let mut best_step = 0;
    let mut best_dev = f64::INFINITY;
    let mut since_log: (f64, f64, u64) = (0.0, 0.0, 0);
    let mut step = 0u64;

    let mut log = |step: u64, lr: f64, train: (f64, f64), params: &EncoderParams<f32>, curve: &mut Vec<LossRecord>| -> Result<()> {
        let (dm, dn) = evaluate_pretrain(params, &dev_set)?;
        let rec = LossRecord {
            step,
            lr,
            mlm_loss: train.0,
            nsp_loss: train.1,
            dev_mlm_loss: dm,
            dev_nsp_loss: dn,
        };
        if ![rec.mlm_loss, rec.nsp_loss, dm, dn].iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("pretraining loss at step {step}: {rec:?}")));
        }
        log::info!("pretrain step {step}: mlm {:.4} nsp {:.4} dev {:.4}/{:.4}", train.0, train.1, dm, dn);
        if rec.dev_total() < best_dev {
            best_dev = rec.dev_total();
            best = params.clone();
            best_step = step;
        }
        curve.push(rec);
        Ok(())
    };

    for epoch in 0..cfg.epochs {
        let mut picks: Vec<usize> = (0..cfg.pairs_per_doc).flat_map(|_| train_docs.iter().copied()).collect();
        picks.shuffle(&mut order_rng);
        let epoch_seed = derive_seed(seed, &[1, epoch as u64]);
        let instances = build_instances(train, &picks, enc.max_len, &cfg.masking, enc.vocab_size, epoch_seed)?;
        let tagged: Vec<(PretrainInstance, u64)> = instances
            .into_iter()
            .enumerate()
            .map(|(i, inst)| (inst, derive_seed(seed, &[2, epoch as u64, i as u64])))
            .collect();
        for batch in tagged.chunks(cfg.batch_size) {
            if step == 0 {
                let probe: Vec<PretrainInstance> = batch.iter().map(|(i, _)| i.clone()).collect();
                let first = evaluate_pretrain(&params, &probe)?;
                log(0, 0.0, first, &params, &mut curve)?;
            }
            let (grads, m, n) = batch_grads(&params, batch)?;
            if !(m.is_finite() && n.is_finite()) {
                return Err(Error::NonFinite(format!("training loss at step {}: mlm {m} nsp {n}", step + 1)));
            }
            let lr = schedule.lr_at(step + 1)?;
            adamw_step(&mut params.store, &grads, &mut opt, lr)?;
            step += 1;
            since_log.0 += m;
            since_log.1 += n;
            since_log.2 += 1;
            if step % cfg.log_every == 0 || step == total {
                let k = since_log.2 as f64;
                log(step, lr, (since_log.0 / k, since_log.1 / k), &params, &mut curve)?;
                since_log = (0.0, 0.0, 0);
            }
        }
    }
    Ok(PretrainOutcome {
        best,
        best_step,
        last: params,
        curve,
    })
}

/// Masks `positions` (indices into the normalized tokens of `text`) and
/// returns the most likely token at each one.
pub fn mlm_infill<F: Scalar>(
    text: &str,
    params: &EncoderParams<F>,
    vocab: &Vocab,
    positions: &[usize],
) -> Result<Vec<(usize, String)>> {
    let tokens = normalize_text(text);
    let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let mut chunk = Chunk::truncated(&ids, params.config.max_len, ("infill".into(), 0))?;
    let kept = ids.len().min(params.config.max_len - 2);
    for &p in positions {
        if p >= kept {
            return Err(Error::OutOfRange(format!("position {p} of {kept} tokens")));
        }
        chunk.ids[p + 1] = MASK;
    }
    if positions.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&params.store);
    let mut rng = rng_from_seed(0);
    let enc = encoder_graph(&mut g, &mut b, &params.config, &chunk, Mode::Infer, false, &mut rng)?;
    let rows: Vec<usize> = positions.iter().map(|p| p + 1).collect();
    let logits = mlm_logits_graph(&mut g, &mut b, enc.hidden, &rows, params.config.layer_norm_eps)?;
    let v = g.value(logits);
    positions
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let row = v.row(k);
            let best = (NUM_SPECIALS..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap_or(std::cmp::Ordering::Equal).then(b.cmp(&a)))
                .ok_or(Error::NoMlmTargets)?;
            Ok((p, vocab.token(best).unwrap_or("[UNK]").to_string()))
        })
        .collect()
}
