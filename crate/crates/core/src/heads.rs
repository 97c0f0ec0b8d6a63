//! Classification heads, baselines and the supervised training loop.
//!
//! Encoder heads:
//! * CLS: `y = sigmoid(W_out h_cls)`.
//! * Label attention: `a_j = softmax_i <h_i, l_j>`, `c_j = sum_i a_ij h_i`,
//!   `y_j = sigmoid(w_a . relu(W_b c_j))` with `W_b`, `w_a` shared by all labels.
//!
//! Baselines:
//! * Bidirectional GRU with `K` attention queries:
//!   `a_k = softmax_i <h_i, q_k>`, `c_k = sum_i a_ik h_i / sqrt(d_h)`,
//!   `y = sigmoid(W_a [c_0; ...; c_{K-1}])`.
//! * Bag-of-words logistic regression.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::LabelSpace;
use crate::corpus::{chunk_note, normalize_text, Chunk, TokenizedNote, Vocab};
use crate::encoder::{encode_infer, encoder_graph, param_shapes, EncoderConfig, EncoderParams, Mode, INIT_STD};
use crate::error::{Error, Result};
use crate::eval::{aggregate_chunks, macro_auc, micro_auc, PredictionSet};
use crate::numerics::{
    accumulate, adamw_step, derive_seed, fan_in_uniform, rng_from_seed, scale_grads, truncated_normal, AdamWConfig,
    Binder, Graph, NodeId, OptimizerState, ParamGrads, ParamStore, Scalar, Schedule, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Cls,
    Xml,
    Multihead,
    Logreg,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Cls => "cls",
            HeadKind::Xml => "xml",
            HeadKind::Multihead => "multihead",
            HeadKind::Logreg => "logreg",
        }
    }

    pub fn uses_encoder(self) -> bool {
        matches!(self, HeadKind::Cls | HeadKind::Xml)
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(HeadKind::Cls),
            "xml" => Ok(HeadKind::Xml),
            "multihead" => Ok(HeadKind::Multihead),
            "logreg" => Ok(HeadKind::Logreg),
            other => Err(Error::InvalidConfig(format!(
                "unknown head {other:?} (expected cls, xml, multihead or logreg)"
            ))),
        }
    }
}

/// How the label-attention vectors start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelInit {
    /// Mean last-layer encoder state over the description's tokens.
    Semantic,
    /// Mean token-embedding row over the description's tokens.
    InputEmbedding,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of `W_b`; the encoder hidden size when unset.
    pub attention_dim: Option<usize>,
    pub label_init: LabelInit,
    pub gru_hidden: usize,
    pub num_queries: usize,
    pub embedding_dim: usize,
    pub embedding_dropout: f64,
    /// Scale the baseline's attention logits instead of its context vectors.
    pub scale_logits: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            attention_dim: None,
            label_init: LabelInit::Semantic,
            gru_hidden: 512,
            num_queries: 200,
            embedding_dim: 300,
            embedding_dropout: 0.1,
            scale_logits: false,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.attention_dim == Some(0) || self.gru_hidden == 0 || self.num_queries == 0 || self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.embedding_dropout) {
            return Err(Error::InvalidConfig(format!(
                "embedding_dropout {} not in [0,1)",
                self.embedding_dropout
            )));
        }
        Ok(())
    }
}

/// A trained or trainable classifier. Encoder parameters (for the CLS and
/// label-attention heads) live unprefixed in `store`; head parameters are
/// prefixed with `head.`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<F> {
    pub kind: HeadKind,
    pub encoder: Option<EncoderConfig>,
    pub head: HeadConfig,
    pub num_labels: usize,
    pub vocab_size: usize,
    pub store: ParamStore<F>,
}

/// Plain label-attention head parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct XmlHeadParams<F> {
    /// `M x d`
    pub labels: Tensor<F>,
    /// `d_a x d`
    pub w_b: Tensor<F>,
    /// `1 x d_a`
    pub w_a: Tensor<F>,
}

impl<F: Scalar> XmlHeadParams<F> {
    pub fn into_store(self) -> ParamStore<F> {
        let mut s = ParamStore::new();
        s.insert("head.labels", self.labels);
        s.insert("head.w_b.weight", self.w_b);
        s.insert("head.w_a.weight", self.w_a);
        s
    }
}

/// `1 x M` logits from the `1 x d` `[CLS]` state.
pub fn cls_head_graph<F: Scalar>(g: &mut Graph<F>, b: &mut Binder<F>, h_cls: NodeId) -> Result<NodeId> {
    let w = b.get(g, "head.w_out.weight");
    g.matmul_t(h_cls, w)
}

/// `1 x M` logits and the `M x N` attention matrix. `mask[i]` marks the
/// positions that may receive attention.
pub fn xml_head_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    hidden: NodeId,
    mask: &[bool],
) -> Result<(NodeId, NodeId)> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("label attention over a fully masked sequence".into()));
    }
    let labels = b.get(g, "head.labels");
    let w_b = b.get(g, "head.w_b.weight");
    let w_a = b.get(g, "head.w_a.weight");
    let scores = g.matmul_t(labels, hidden)?;
    let attn = g.softmax_masked(scores, Some(mask))?;
    let ctx = g.matmul(attn, hidden)?;
    let z = g.matmul_t(ctx, w_b)?;
    let z = g.relu(z);
    let logits = g.matmul_t(z, w_a)?;
    let m = g.value(logits).rows();
    let logits = g.reshape(logits, &[1, m])?;
    Ok((logits, attn))
}

/// Probabilities `sigmoid(W_out h_cls)`.
pub fn cls_head_forward<F: Scalar>(h_cls: &[F], w_out: &Tensor<F>) -> Result<Vec<F>> {
    if w_out.shape().len() != 2 || w_out.cols() != h_cls.len() {
        return Err(Error::shape(format!(
            "W_out {:?} vs h_cls of {}",
            w_out.shape(),
            h_cls.len()
        )));
    }
    let mut store = ParamStore::new();
    store.insert("head.w_out.weight", w_out.clone());
    let mut g = Graph::new();
    let mut b = Binder::new(&store);
    let h = g.constant(Tensor::new(vec![1, h_cls.len()], h_cls.to_vec())?);
    let z = cls_head_graph(&mut g, &mut b, h)?;
    let p = g.sigmoid(z);
    Ok(g.value(p).data().to_vec())
}

/// Probabilities and `M x N` attention for hidden states `h` (`N x d`).
pub fn xml_head_forward<F: Scalar>(h: &Tensor<F>, mask: &[bool], params: &XmlHeadParams<F>) -> Result<(Vec<F>, Tensor<F>)> {
    let d = h.cols();
    if params.labels.cols() != d || params.w_b.cols() != d || params.w_a.cols() != params.w_b.rows() {
        return Err(Error::shape("label-attention parameter shapes"));
    }
    if mask.len() != h.rows() {
        return Err(Error::shape(format!("mask of {} for {} positions", mask.len(), h.rows())));
    }
    let store = params.clone().into_store();
    let mut g = Graph::new();
    let mut b = Binder::new(&store);
    let hid = g.constant(h.clone());
    let (logits, attn) = xml_head_graph(&mut g, &mut b, hid, mask)?;
    let p = g.sigmoid(logits);
    Ok((g.value(p).data().to_vec(), g.value(attn).clone()))
}

fn gru_names(dir: &str) -> [String; 4] {
    [
        format!("head.gru.{dir}.w_ih.weight"),
        format!("head.gru.{dir}.w_hh.weight"),
        format!("head.gru.{dir}.ih.bias"),
        format!("head.gru.{dir}.hh.bias"),
    ]
}

/// One GRU direction over the rows of `x`; returns `N x H` states in input
/// order. Gate columns are laid out `[r | z | n]` and
/// `h' = n + z * (h - n)` with `n = tanh(x W_in + b_in + r * (h W_hn + b_hn))`.
pub fn gru_graph<F: Scalar>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    dir: &str,
    x: NodeId,
    hidden: usize,
    reverse: bool,
) -> Result<NodeId> {
    let [w_ih, w_hh, b_ih, b_hh] = gru_names(dir);
    let w_ih = b.get(g, &w_ih);
    let w_hh = b.get(g, &w_hh);
    let b_ih = b.get(g, &b_ih);
    let b_hh = b.get(g, &b_hh);
    let n = g.value(x).rows();
    let gi = g.matmul(x, w_ih)?;
    let gi = g.add_row(gi, b_ih)?;
    let mut h = g.constant(Tensor::zeros(&[1, hidden]));
    let mut outs = vec![h; n];
    let steps: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in steps {
        let gi_t = g.slice_rows(gi, t, 1)?;
        let gh = g.matmul(h, w_hh)?;
        let gh = g.add_row(gh, b_hh)?;
        let i_rz = g.slice_cols(gi_t, 0, 2 * hidden)?;
        let h_rz = g.slice_cols(gh, 0, 2 * hidden)?;
        let rz = g.add(i_rz, h_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice_cols(rz, 0, hidden)?;
        let z = g.slice_cols(rz, hidden, hidden)?;
        let i_n = g.slice_cols(gi_t, 2 * hidden, hidden)?;
        let h_n = g.slice_cols(gh, 2 * hidden, hidden)?;
        let gated = g.mul(r, h_n)?;
        let cand = g.add(i_n, gated)?;
        let cand = g.tanh(cand);
        let diff = g.sub(h, cand)?;
        let keep = g.mul(z, diff)?;
        h = g.add(cand, keep)?;
        outs[t] = h;
    }
    g.concat_rows(&outs)
}

/// `1 x M` logits of the recurrent multi-query attention baseline.
pub fn multihead_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    cfg: &HeadConfig,
    ids: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(NodeId, NodeId)> {
    if ids.is_empty() {
        return Err(Error::Empty("token sequence".into()));
    }
    let hd = cfg.gru_hidden;
    let table = b.get(g, "head.embedding");
    let x = g.gather(table, ids)?;
    let x = g.dropout(x, cfg.embedding_dropout, rng, mode.training())?;
    let fwd = gru_graph(g, b, "fwd", x, hd, false)?;
    let bwd = gru_graph(g, b, "bwd", x, hd, true)?;
    let h = g.concat_cols(&[fwd, bwd])?;
    let q = b.get(g, "head.queries");
    let scale = F::lit(1.0 / (hd as f64).sqrt());
    let mut scores = g.matmul_t(q, h)?;
    if cfg.scale_logits {
        scores = g.scale(scores, scale);
    }
    let attn = g.softmax(scores);
    let mut ctx = g.matmul(attn, h)?;
    if !cfg.scale_logits {
        ctx = g.scale(ctx, scale);
    }
    let k = g.value(ctx).len();
    let flat = g.reshape(ctx, &[1, k])?;
    let w_a = b.get(g, "head.w_a.weight");
    Ok((g.matmul_t(flat, w_a)?, attn))
}

/// Inference-mode baseline probabilities for `ids` under `store`.
pub fn multihead_baseline_forward<F: Scalar>(ids: &[usize], store: &ParamStore<F>, cfg: &HeadConfig) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let mut b = Binder::new(store);
    let (logits, _) = multihead_graph(&mut g, &mut b, cfg, ids, Mode::Infer, &mut rng_from_seed(0))?;
    let p = g.sigmoid(logits);
    Ok(g.value(p).data().to_vec())
}

/// Token counts over `V` ids.
pub fn bag_of_words(ids: &[usize], vocab_size: usize) -> Vec<f64> {
    let mut x = vec![0.0; vocab_size];
    for &i in ids {
        if i < vocab_size {
            x[i] += 1.0;
        }
    }
    x
}

fn bow_logits<F: Scalar>(store: &ParamStore<F>, x: &[f64]) -> Result<Vec<f64>> {
    let w = store.expect("head.bow.weight")?;
    let bias = store.expect("head.bow.bias")?;
    let v = w.cols();
    if x.len() != v {
        return Err(Error::shape(format!("{} features for {v} weights", x.len())));
    }
    Ok((0..w.rows())
        .map(|j| {
            let row = w.row(j);
            let dot: f64 = x
                .iter()
                .zip(row)
                .filter(|(&xi, _)| xi != 0.0)
                .map(|(&xi, &wi)| xi * wi.as_f64())
                .sum();
            dot + bias.data()[j].as_f64()
        })
        .collect())
}

/// Head mask for label attention: content positions, or every attended
/// position when the chunk has no content.
pub fn label_attention_mask(chunk: &Chunk) -> Vec<bool> {
    let content = chunk.content_mask();
    if content.iter().any(|&c| c) {
        content
    } else {
        chunk.attention_mask()
    }
}

/// Mean of `rows` of `t` computed directly.
fn mean_rows<F: Scalar>(t: &Tensor<F>, rows: &[usize]) -> Vec<F> {
    let d = t.cols();
    let mut acc = vec![0.0f64; d];
    for &r in rows {
        for (a, &x) in acc.iter_mut().zip(t.row(r)) {
            *a += x.as_f64();
        }
    }
    acc.iter().map(|&a| F::lit(a / rows.len() as f64)).collect()
}

/// Initial label vectors from label descriptions. Labels whose description
/// has no in-vocabulary content fall back to random rows; their codes are
/// returned alongside.
pub fn semantic_label_init<F: Scalar>(
    space: &LabelSpace,
    encoder: &EncoderParams<F>,
    vocab: &Vocab,
    mode: LabelInit,
    seed: u64,
) -> Result<(Tensor<F>, Vec<String>)> {
    let d = encoder.config.hidden_size;
    let m = space.len();
    let rows: Vec<Option<Vec<F>>> = (0..m)
        .into_par_iter()
        .map(|j| -> Result<Option<Vec<F>>> {
            if mode == LabelInit::Random {
                return Ok(None);
            }
            let ids: Vec<usize> = normalize_text(space.description(j)).iter().map(|t| vocab.id(t)).collect();
            let chunk = Chunk::truncated(&ids, encoder.config.max_len, (space.codes()[j].clone(), 0))?;
            let positions = chunk.content_positions();
            if positions.is_empty() {
                return Ok(None);
            }
            Ok(Some(match mode {
                LabelInit::Semantic => {
                    let out = encode_infer(&chunk.trimmed(), encoder, false)?;
                    mean_rows(&out.hidden, &positions)
                }
                _ => {
                    let table = encoder.store.expect("embeddings.token")?;
                    let ids: Vec<usize> = positions.iter().map(|&p| chunk.ids[p]).collect();
                    mean_rows(table, &ids)
                }
            }))
        })
        .collect::<Result<_>>()?;
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::with_capacity(m * d);
    let mut fallbacks = Vec::new();
    for (j, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => data.extend(r),
            None => {
                if mode != LabelInit::Random {
                    log::warn!("label {} has no usable description; random init", space.codes()[j]);
                    fallbacks.push(space.codes()[j].clone());
                }
                data.extend(truncated_normal::<F, _>(&[d], INIT_STD, &mut rng).into_data());
            }
        }
    }
    Ok((Tensor::new(vec![m, d], data)?, fallbacks))
}

impl<F: Scalar> Classifier<F> {
    /// CLS or label-attention head on top of `encoder`. Pretraining-only
    /// tensors are dropped.
    pub fn with_encoder(
        kind: HeadKind,
        encoder: &EncoderParams<F>,
        head: HeadConfig,
        space: &LabelSpace,
        vocab: &Vocab,
        seed: u64,
    ) -> Result<(Self, Vec<String>)> {
        head.validate()?;
        if !kind.uses_encoder() {
            return Err(Error::InvalidConfig(format!("{} head does not use an encoder", kind.as_str())));
        }
        if vocab.len() != encoder.config.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocabulary of {} vs encoder vocab_size {}",
                vocab.len(),
                encoder.config.vocab_size
            )));
        }
        let d = encoder.config.hidden_size;
        let m = space.len();
        let mut store = ParamStore::new();
        for (name, t) in encoder.store.iter() {
            if !name.starts_with("mlm.") && !name.starts_with("nsp.") {
                store.insert(name, t.clone());
            }
        }
        let mut rng = rng_from_seed(derive_seed(seed, &[7]));
        let mut fallbacks = Vec::new();
        match kind {
            HeadKind::Cls => store.insert("head.w_out.weight", fan_in_uniform(&[m, d], d, &mut rng)),
            _ => {
                let da = head.attention_dim.unwrap_or(d);
                let (labels, fb) = semantic_label_init(space, encoder, vocab, head.label_init, derive_seed(seed, &[8]))?;
                fallbacks = fb;
                store.insert("head.labels", labels);
                store.insert("head.w_b.weight", fan_in_uniform(&[da, d], d, &mut rng));
                store.insert("head.w_a.weight", fan_in_uniform(&[1, da], da, &mut rng));
            }
        }
        Ok((
            Self {
                kind,
                encoder: Some(encoder.config.clone()),
                head,
                num_labels: m,
                vocab_size: vocab.len(),
                store,
            },
            fallbacks,
        ))
    }

    pub fn multihead(vocab_size: usize, num_labels: usize, head: HeadConfig, seed: u64) -> Result<Self> {
        head.validate()?;
        let (e, h, k) = (head.embedding_dim, head.gru_hidden, head.num_queries);
        let mut rng = rng_from_seed(seed);
        let mut store = ParamStore::new();
        store.insert("head.embedding", truncated_normal(&[vocab_size, e], 0.1, &mut rng));
        for dir in ["fwd", "bwd"] {
            let [w_ih, w_hh, b_ih, b_hh] = gru_names(dir);
            store.insert(w_ih, fan_in_uniform(&[e, 3 * h], h, &mut rng));
            store.insert(w_hh, fan_in_uniform(&[h, 3 * h], h, &mut rng));
            store.insert(b_ih, fan_in_uniform(&[3 * h], h, &mut rng));
            store.insert(b_hh, fan_in_uniform(&[3 * h], h, &mut rng));
        }
        store.insert("head.queries", fan_in_uniform(&[k, 2 * h], 2 * h, &mut rng));
        store.insert("head.w_a.weight", fan_in_uniform(&[num_labels, k * 2 * h], k * 2 * h, &mut rng));
        Ok(Self {
            kind: HeadKind::Multihead,
            encoder: None,
            head,
            num_labels,
            vocab_size,
            store,
        })
    }

    /// Zero-initialized bag-of-words logistic regression.
    pub fn logreg(vocab_size: usize, num_labels: usize) -> Self {
        let mut store = ParamStore::new();
        store.insert("head.bow.weight", Tensor::zeros(&[num_labels, vocab_size]));
        store.insert("head.bow.bias", Tensor::zeros(&[num_labels]));
        Self {
            kind: HeadKind::Logreg,
            encoder: None,
            head: HeadConfig::default(),
            num_labels,
            vocab_size,
            store,
        }
    }

    /// Every tensor name and shape this classifier must hold.
    pub fn expected_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let m = self.num_labels;
        let mut out = Vec::new();
        match self.kind {
            HeadKind::Cls | HeadKind::Xml => {
                let enc = self
                    .encoder
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("encoder head without encoder config".into()))?;
                enc.validate()?;
                out.extend(
                    param_shapes(enc)
                        .into_iter()
                        .filter(|(n, _)| !n.starts_with("mlm.") && !n.starts_with("nsp.")),
                );
                let d = enc.hidden_size;
                if self.kind == HeadKind::Cls {
                    out.push(("head.w_out.weight".into(), vec![m, d]));
                } else {
                    let da = self.head.attention_dim.unwrap_or(d);
                    out.push(("head.labels".into(), vec![m, d]));
                    out.push(("head.w_b.weight".into(), vec![da, d]));
                    out.push(("head.w_a.weight".into(), vec![1, da]));
                }
            }
            HeadKind::Multihead => {
                let (e, h, k) = (self.head.embedding_dim, self.head.gru_hidden, self.head.num_queries);
                out.push(("head.embedding".into(), vec![self.vocab_size, e]));
                for dir in ["fwd", "bwd"] {
                    let [w_ih, w_hh, b_ih, b_hh] = gru_names(dir);
                    out.push((w_ih, vec![e, 3 * h]));
                    out.push((w_hh, vec![h, 3 * h]));
                    out.push((b_ih, vec![3 * h]));
                    out.push((b_hh, vec![3 * h]));
                }
                out.push(("head.queries".into(), vec![k, 2 * h]));
                out.push(("head.w_a.weight".into(), vec![m, k * 2 * h]));
            }
            HeadKind::Logreg => {
                out.push(("head.bow.weight".into(), vec![m, self.vocab_size]));
                out.push(("head.bow.bias".into(), vec![m]));
            }
        }
        Ok(out)
    }

    /// Checks that `store` matches [`Self::expected_shapes`] exactly.
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        let expected = self.expected_shapes()?;
        if expected.len() != self.store.len() {
            return Err(Error::shape(format!(
                "{} tensors present, {} expected",
                self.store.len(),
                expected.len()
            )));
        }
        for (name, shape) in expected {
            let t = self.store.expect(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!("{name}: expected {shape:?}, found {:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Encoder view of the shared parameters (pretraining heads absent).
    pub fn encoder_config(&self) -> Result<&EncoderConfig> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{} head has no encoder", self.kind.as_str())))
    }

    pub fn cast<G: Scalar>(&self) -> Classifier<G> {
        Classifier {
            kind: self.kind,
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            num_labels: self.num_labels,
            vocab_size: self.vocab_size,
            store: self.store.cast(),
        }
    }
}

/// Graph handles for one chunk.
pub struct ChunkNodes {
    /// `1 x M`
    pub logits: NodeId,
    /// `M x N` label attention (label-attention head only).
    pub label_attention: Option<NodeId>,
}

/// Records the forward pass for one chunk. Trailing padding is dropped
/// first; it never influences attended positions.
pub fn classifier_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    model: &Classifier<F>,
    chunk: &Chunk,
    mode: Mode,
    rng: &mut R,
) -> Result<ChunkNodes> {
    let chunk = chunk.trimmed();
    match model.kind {
        HeadKind::Cls | HeadKind::Xml => {
            let cfg = model.encoder_config()?;
            let enc = encoder_graph(g, b, cfg, &chunk, mode, false, rng)?;
            if model.kind == HeadKind::Cls {
                let h = g.slice_rows(enc.hidden, 0, 1)?;
                Ok(ChunkNodes {
                    logits: cls_head_graph(g, b, h)?,
                    label_attention: None,
                })
            } else {
                let (logits, attn) = xml_head_graph(g, b, enc.hidden, &label_attention_mask(&chunk))?;
                Ok(ChunkNodes {
                    logits,
                    label_attention: Some(attn),
                })
            }
        }
        HeadKind::Multihead => {
            let (logits, _) = multihead_graph(g, b, &model.head, &chunk.content_ids(), mode, rng)?;
            Ok(ChunkNodes {
                logits,
                label_attention: None,
            })
        }
        HeadKind::Logreg => Err(Error::InvalidConfig(
            "logistic regression is not a graph model".into(),
        )),
    }
}

/// Label probabilities for one chunk in inference mode.
pub fn predict_chunk<F: Scalar>(model: &Classifier<F>, chunk: &Chunk) -> Result<Vec<f64>> {
    if model.kind == HeadKind::Logreg {
        let x = bag_of_words(&chunk.content_ids(), model.vocab_size);
        return Ok(bow_logits(&model.store, &x)?.into_iter().map(crate::numerics::sigmoid_scalar).collect());
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store);
    let nodes = classifier_graph(&mut g, &mut b, model, chunk, Mode::Infer, &mut rng_from_seed(0))?;
    let p = g.sigmoid(nodes.logits);
    Ok(g.value(p).data().iter().map(|x| x.as_f64()).collect())
}

/// `M x N_active` label-attention weights for a chunk.
pub fn label_attention<F: Scalar>(model: &Classifier<F>, chunk: &Chunk) -> Result<Tensor<F>> {
    if model.kind != HeadKind::Xml {
        return Err(Error::InvalidConfig(format!(
            "{} head has no label attention",
            model.kind.as_str()
        )));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(&model.store);
    let nodes = classifier_graph(&mut g, &mut b, model, chunk, Mode::Infer, &mut rng_from_seed(0))?;
    Ok(g.value(nodes.label_attention.expect("xml head")).clone())
}

/// A note's token ids and label vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledNote {
    pub note_id: String,
    pub token_ids: Vec<usize>,
    pub labels: Vec<u8>,
}

pub fn note_chunks(note: &LabeledNote, max_len: usize) -> Result<Vec<Chunk>> {
    chunk_note(
        &TokenizedNote {
            note_id: note.note_id.clone(),
            token_strings: Vec::new(),
            token_ids: note.token_ids.clone(),
            oov_count: 0,
        },
        max_len,
    )
}

/// Note-level probabilities: the per-label maximum over chunk predictions.
/// Logistic regression scores the whole note at once.
pub fn predict_note<F: Scalar>(model: &Classifier<F>, token_ids: &[usize], max_len: usize) -> Result<Vec<f64>> {
    if model.kind == HeadKind::Logreg {
        let x = bag_of_words(token_ids, model.vocab_size);
        return Ok(bow_logits(&model.store, &x)?.into_iter().map(crate::numerics::sigmoid_scalar).collect());
    }
    let note = LabeledNote {
        note_id: String::new(),
        token_ids: token_ids.to_vec(),
        labels: Vec::new(),
    };
    let scores = note_chunks(&note, max_len)?
        .iter()
        .map(|c| predict_chunk(model, c))
        .collect::<Result<Vec<_>>>()?;
    aggregate_chunks(&scores)
}

pub fn predict_notes<F: Scalar>(
    model: &Classifier<F>,
    notes: &[LabeledNote],
    codes: &[String],
    max_len: usize,
) -> Result<PredictionSet> {
    let scores = notes
        .par_iter()
        .map(|n| predict_note(model, &n.token_ids, max_len))
        .collect::<Result<Vec<_>>>()?;
    PredictionSet::new(
        codes.to_vec(),
        notes.iter().map(|n| n.note_id.clone()).collect(),
        scores,
        notes.iter().map(|n| n.labels.clone()).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub adamw: AdamWConfig,
    /// Chunk length used for training and evaluation.
    pub max_len: usize,
    /// Logistic regression: mini-batch gradient descent step and stopping
    /// tolerance on the epoch loss.
    pub logreg_lr: f64,
    pub logreg_tolerance: f64,
    pub logreg_max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            peak_lr: 2e-5,
            warmup_proportion: 0.1,
            adamw: AdamWConfig::default(),
            max_len: 128,
            logreg_lr: 0.1,
            logreg_tolerance: 1e-5,
            logreg_max_epochs: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.logreg_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if self.max_len < crate::corpus::MIN_CHUNK_LEN {
            return Err(Error::InvalidConfig(format!("max_len {} below 8", self.max_len)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub dev_micro_auc: f64,
    pub dev_macro_auc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest dev micro-AUC.
    pub best: Classifier<f32>,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
    /// Mean batch loss at every optimizer step.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    /// Metrics of the kept epoch, or the last recorded epoch when none was kept.
    pub fn best_metrics(&self) -> Option<&EpochMetrics> {
        self.metrics.iter().find(|m| m.epoch == self.best_epoch).or(self.metrics.last())
    }
}

fn dev_metrics(model: &Classifier<f32>, dev: &[LabeledNote], max_len: usize) -> Result<(f64, f64)> {
    let m = model.num_labels;
    let codes: Vec<String> = (0..m).map(|j| j.to_string()).collect();
    let preds = predict_notes(model, dev, &codes, max_len)?;
    let micro = micro_auc(&preds)?;
    let macro_ = macro_auc(&preds).map(|(v, _)| v).unwrap_or(f64::NAN);
    Ok((micro, macro_))
}

/// BCE over all labels of one chunk, as a graph.
pub fn chunk_loss_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    model: &Classifier<F>,
    chunk: &Chunk,
    labels: &[u8],
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let nodes = classifier_graph(g, b, model, chunk, mode, rng)?;
    let targets: Vec<F> = labels.iter().map(|&l| if l != 0 { F::one() } else { F::zero() }).collect();
    g.bce_with_logits(nodes.logits, &targets)
}

fn check_labels(notes: &[LabeledNote], m: usize) -> Result<()> {
    if let Some(n) = notes.iter().find(|n| n.labels.len() != m) {
        return Err(Error::LabelSpaceMismatch).map_err(|e| {
            log::error!("note {} has {} labels, model has {m}", n.note_id, n.labels.len());
            e
        });
    }
    Ok(())
}

/// Supervised training. Each chunk inherits its note's labels; dev notes
/// are scored by max-aggregating chunk predictions after every epoch.
pub fn train_classifier(
    model: Classifier<f32>,
    train: &[LabeledNote],
    dev: &[LabeledNote],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev set".into()));
    }
    check_labels(train, model.num_labels)?;
    check_labels(dev, model.num_labels)?;
    if model.kind == HeadKind::Logreg {
        return train_logreg(model, train, dev, cfg, seed);
    }
    let mut examples: Vec<(Chunk, &[u8])> = Vec::new();
    for n in train {
        for c in note_chunks(n, cfg.max_len)? {
            examples.push((c, &n.labels));
        }
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size) as u64;
    let schedule = Schedule::for_updates(cfg.peak_lr, steps_per_epoch * cfg.epochs as u64, cfg.warmup_proportion)?;
    let mut opt = OptimizerState::new(cfg.adamw);
    let mut model = model;
    let mut order_rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut metrics = Vec::new();
    let mut step_losses = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut best_auc = f64::NEG_INFINITY;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let parts: Vec<(ParamGrads<f32>, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let (chunk, labels) = &examples[i];
                    let mut rng = rng_from_seed(derive_seed(seed, &[1, epoch as u64, i as u64]));
                    let mut g = Graph::new();
                    let mut b = Binder::new(&model.store);
                    let loss = chunk_loss_graph(&mut g, &mut b, &model, chunk, labels, Mode::Train, &mut rng)?;
                    let value = g.value(loss).data()[0].as_f64();
                    Ok((b.grads(g.backward(loss)?), value))
                })
                .collect::<Result<_>>()?;
            let mut acc = ParamGrads::new();
            let mut loss = 0.0;
            for (gr, l) in &parts {
                accumulate(&mut acc, gr);
                loss += l;
            }
            loss /= batch.len() as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {}", step + 1)));
            }
            scale_grads(&mut acc, 1.0 / batch.len() as f32);
            step += 1;
            adamw_step(&mut model.store, &acc, &mut opt, schedule.lr_at(step)?)?;
            step_losses.push(loss);
            epoch_loss += loss;
        }
        let (micro, macro_) = dev_metrics(&model, dev, cfg.max_len)?;
        log::info!("epoch {epoch}: train loss {:.4} dev micro {micro:.4} macro {macro_:.4}", epoch_loss / steps_per_epoch as f64);
        metrics.push(EpochMetrics {
            epoch,
            step,
            train_loss: epoch_loss / steps_per_epoch as f64,
            dev_micro_auc: micro,
            dev_macro_auc: macro_,
        });
        if micro > best_auc {
            best_auc = micro;
            best = model.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        metrics,
        step_losses,
    })
}

/// Mean binary log-loss of the logistic regression over notes.
fn logreg_loss(model: &Classifier<f32>, feats: &[Vec<f64>], notes: &[LabeledNote]) -> Result<f64> {
    let mut total = 0.0;
    for (x, n) in feats.iter().zip(notes) {
        for (z, &t) in bow_logits(&model.store, x)?.iter().zip(&n.labels) {
            total += z.max(0.0) - z * t as f64 + (-z.abs()).exp().ln_1p();
        }
    }
    Ok(total / (feats.len() * model.num_labels) as f64)
}

/// Mini-batch gradient descent on bag-of-words counts until the epoch loss
/// improves by less than `logreg_tolerance`.
fn train_logreg(
    mut model: Classifier<f32>,
    train: &[LabeledNote],
    dev: &[LabeledNote],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let v = model.vocab_size;
    let m = model.num_labels;
    let feats: Vec<Vec<f64>> = train.iter().map(|n| bag_of_words(&n.token_ids, v)).collect();
    let mut w: Vec<f64> = model.store.expect("head.bow.weight")?.data().iter().map(|x| x.as_f64()).collect();
    let mut bias: Vec<f64> = model.store.expect("head.bow.bias")?.data().iter().map(|x| x.as_f64()).collect();
    let mut rng = rng_from_seed(seed);
    let mut prev = f64::INFINITY;
    let mut step_losses = Vec::new();
    let mut step = 0u64;
    let mut epochs_run = 0;
    for _ in 0..cfg.logreg_max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut gw = vec![0.0; m * v];
            let mut gb = vec![0.0; m];
            for &i in batch {
                let x = &feats[i];
                let nz: Vec<usize> = (0..v).filter(|&k| x[k] != 0.0).collect();
                for j in 0..m {
                    let z = bias[j] + nz.iter().map(|&k| x[k] * w[j * v + k]).sum::<f64>();
                    let r = crate::numerics::sigmoid_scalar(z) - train[i].labels[j] as f64;
                    gb[j] += r;
                    for &k in &nz {
                        gw[j * v + k] += r * x[k];
                    }
                }
            }
            let k = cfg.logreg_lr / batch.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= k * gi;
            }
            for (bi, gi) in bias.iter_mut().zip(&gb) {
                *bi -= k * gi;
            }
            step += 1;
        }
        epochs_run += 1;
        model.store.insert("head.bow.weight", Tensor::new(vec![m, v], w.iter().map(|&x| x as f32).collect())?);
        model.store.insert("head.bow.bias", Tensor::new(vec![m], bias.iter().map(|&x| x as f32).collect())?);
        let loss = logreg_loss(&model, &feats, train)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("logistic regression loss after epoch {epochs_run}")));
        }
        step_losses.push(loss);
        if (prev - loss).abs() < cfg.logreg_tolerance {
            break;
        }
        prev = loss;
    }
    let (micro, macro_) = dev_metrics(&model, dev, cfg.max_len)?;
    Ok(TrainOutcome {
        best: model,
        best_epoch: epochs_run,
        metrics: vec![EpochMetrics {
            epoch: epochs_run,
            step,
            train_loss: *step_losses.last().unwrap_or(&f64::NAN),
            dev_micro_auc: micro,
            dev_macro_auc: macro_,
        }],
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::numerics::grad_check_params;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cls_examples() {
        let p = cls_head_forward(&[1.0f64, 1.0], &Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        assert!(close(p[0], 0.880_797_077_977_882_3, 1e-12));
        let q = cls_head_forward(&[-1.0f64, -1.0], &Tensor::from_rows(&[vec![1.0, 1.0]])).unwrap();
        assert!(close(q[0], 1.0 - p[0], 1e-12));
        let z = cls_head_forward(&[3.0f64, -2.0], &Tensor::zeros(&[4, 2])).unwrap();
        assert!(z.iter().all(|&x| x == 0.5));
        assert!(cls_head_forward(&[1.0f64], &Tensor::zeros(&[1, 2])).is_err());
    }

    fn xml_params(labels: Vec<Vec<f64>>, d: usize) -> XmlHeadParams<f64> {
        XmlHeadParams {
            labels: Tensor::from_rows(&labels),
            w_b: Tensor::identity(d),
            w_a: Tensor::filled(&[1, d], 1.0),
        }
    }

    #[test]
    fn xml_examples() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let (_, a) = xml_head_forward(&h, &[true, true], &xml_params(vec![vec![1.0, 0.0]], 2)).unwrap();
        let e = std::f64::consts::E;
        assert!(close(a.at(0, 0), e / (e + 1.0), 1e-12));
        assert!(close(a.at(0, 1), 1.0 / (e + 1.0), 1e-12));

        let same = Tensor::from_rows(&vec![vec![0.3, -0.2]; 3]);
        let (_, a) = xml_head_forward(&same, &[true; 3], &xml_params(vec![vec![1.0, 2.0], vec![-1.0, 0.5]], 2)).unwrap();
        assert!(a.data().iter().all(|&x| close(x, 1.0 / 3.0, 1e-12)));

        let mut p = xml_params(vec![vec![1.0, 2.0]], 2);
        p.w_a = Tensor::zeros(&[1, 2]);
        let (y, _) = xml_head_forward(&h, &[true, true], &p).unwrap();
        assert_eq!(y, vec![0.5]);
        assert!(xml_head_forward(&h, &[false, false], &p).is_err());
    }

    #[test]
    fn xml_masked_positions_get_zero() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0]]);
        let (_, a) = xml_head_forward(&h, &[true, true, false], &xml_params(vec![vec![1.0, 0.0], vec![0.0, 3.0]], 2)).unwrap();
        for j in 0..2 {
            assert_eq!(a.at(j, 2), 0.0);
            assert!(close(a.row(j).iter().sum(), 1.0, 1e-12));
        }
    }

    #[test]
    fn xml_orthogonal_shift_invariance() {
        let h = Tensor::from_rows(&[vec![1.0, 0.5, 0.0], vec![-0.3, 0.2, 0.0], vec![0.4, -1.0, 0.0]]);
        let shifted = h.map(|x| x);
        let mut shifted = shifted;
        for r in 0..3 {
            shifted.data_mut()[r * 3 + 2] += 2.5;
        }
        let p = XmlHeadParams {
            labels: Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.5, -1.0, 0.0]]),
            w_b: Tensor::identity(3),
            w_a: Tensor::filled(&[1, 3], 1.0),
        };
        let (_, a) = xml_head_forward(&h, &[true; 3], &p).unwrap();
        let (_, b) = xml_head_forward(&shifted, &[true; 3], &p).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!(close(*x, *y, 1e-12));
        }
    }

    fn tiny_head() -> HeadConfig {
        HeadConfig {
            gru_hidden: 3,
            num_queries: 2,
            embedding_dim: 4,
            ..Default::default()
        }
    }

    #[test]
    fn multihead_examples() {
        let mut m: Classifier<f64> = Classifier::multihead(10, 3, tiny_head(), 1).unwrap();
        m.store.insert("head.w_a.weight", Tensor::zeros(&[3, 12]));
        let p = multihead_baseline_forward(&[5, 6, 7], &m.store, &m.head).unwrap();
        assert_eq!(p, vec![0.5; 3]);
        assert!(multihead_baseline_forward(&[], &m.store, &m.head).is_err());
    }

    #[test]
    fn multihead_identical_states() {
        let cfg = HeadConfig {
            gru_hidden: 2,
            num_queries: 1,
            embedding_dim: 2,
            ..Default::default()
        };
        let mut m: Classifier<f64> = Classifier::multihead(8, 1, cfg.clone(), 3).unwrap();
        for (name, t) in m.store.iter_mut() {
            if name.contains("gru") {
                *t = t.map(|_| 0.0);
            }
        }
        // z ~ 0 makes every state tanh(b_in) regardless of input
        for dir in ["fwd", "bwd"] {
            let b = m.store.get_mut(&format!("head.gru.{dir}.ih.bias")).unwrap();
            let d = b.data_mut();
            d[2] = -40.0;
            d[3] = -40.0;
            d[4] = 0.3;
            d[5] = -0.7;
        }
        m.store.insert("head.queries", Tensor::from_rows(&[vec![0.2, -0.4, 1.0, 0.5]]));
        m.store.insert("head.w_a.weight", Tensor::from_rows(&[vec![1.0, 2.0, -1.0, 0.5]]));
        let p = multihead_baseline_forward(&[5, 6], &m.store, &cfg).unwrap();
        let hv = [0.3f64.tanh(), (-0.7f64).tanh(), 0.3f64.tanh(), (-0.7f64).tanh()];
        let c: Vec<f64> = hv.iter().map(|x| x / 2f64.sqrt()).collect();
        let z = c[0] + 2.0 * c[1] - c[2] + 0.5 * c[3];
        assert!(close(p[0], crate::numerics::sigmoid_scalar(z), 1e-9), "{} vs {}", p[0], z);
    }

    #[test]
    fn multihead_hand_case_k1() {
        let cfg = HeadConfig {
            gru_hidden: 1,
            num_queries: 1,
            embedding_dim: 1,
            ..Default::default()
        };
        let mut m: Classifier<f64> = Classifier::multihead(7, 1, cfg.clone(), 2).unwrap();
        let set = |m: &mut Classifier<f64>, name: &str, v: Vec<f64>| {
            let shape = m.store.get(name).unwrap().shape().to_vec();
            m.store.insert(name, Tensor::new(shape, v).unwrap());
        };
        set(&mut m, "head.embedding", vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0, -2.0]);
        for dir in ["fwd", "bwd"] {
            set(&mut m, &format!("head.gru.{dir}.w_ih.weight"), vec![0.5, -0.3, 0.8]);
            set(&mut m, &format!("head.gru.{dir}.w_hh.weight"), vec![0.2, 0.4, -0.6]);
            set(&mut m, &format!("head.gru.{dir}.ih.bias"), vec![0.1, 0.0, -0.1]);
            set(&mut m, &format!("head.gru.{dir}.hh.bias"), vec![0.0, 0.2, 0.05]);
        }
        set(&mut m, "head.queries", vec![0.7, -1.1]);
        set(&mut m, "head.w_a.weight", vec![1.5, -0.5]);

        let sig = crate::numerics::sigmoid_scalar;
        let cell = |x: f64, h: f64| {
            let r = sig(0.5 * x + 0.1 + 0.2 * h);
            let z = sig(-0.3 * x + 0.4 * h + 0.2);
            let n = (0.8 * x - 0.1 + r * (-0.6 * h + 0.05)).tanh();
            n + z * (h - n)
        };
        let xs = [1.0, -2.0];
        let f0 = cell(xs[0], 0.0);
        let f1 = cell(xs[1], f0);
        let b1 = cell(xs[1], 0.0);
        let b0 = cell(xs[0], b1);
        let h = [[f0, b0], [f1, b1]];
        let s: Vec<f64> = h.iter().map(|r| 0.7 * r[0] - 1.1 * r[1]).collect();
        let mx = s[0].max(s[1]);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let a = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        let c = [
            (a[0] * h[0][0] + a[1] * h[1][0]) / 1.0,
            (a[0] * h[0][1] + a[1] * h[1][1]) / 1.0,
        ];
        let expect = sig(1.5 * c[0] - 0.5 * c[1]);
        let got = multihead_baseline_forward(&[5, 6], &m.store, &cfg).unwrap();
        assert!(close(got[0], expect, 1e-6), "{} vs {expect}", got[0]);
    }

    #[test]
    fn logreg_zero_and_permutation() {
        let m: Classifier<f32> = Classifier::logreg(12, 3);
        assert_eq!(predict_note(&m, &[5, 6, 7], 16).unwrap(), vec![0.5; 3]);
        let mut m = m;
        m.store.insert("head.bow.weight", Tensor::new(vec![3, 12], (0..36).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap());
        let a = predict_note(&m, &[5, 6, 7, 5, 9], 16).unwrap();
        let b = predict_note(&m, &[9, 5, 7, 6, 5], 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn logreg_learns_separable_feature() {
        let notes: Vec<LabeledNote> = (0..40)
            .map(|i| {
                let pos = i % 2 == 0;
                let mut ids = vec![6 + (i % 3), 9];
                if pos {
                    ids.push(5);
                }
                LabeledNote {
                    note_id: format!("n{i}"),
                    token_ids: ids,
                    labels: vec![pos as u8],
                }
            })
            .collect();
        let cfg = TrainConfig {
            batch_size: 8,
            logreg_lr: 0.5,
            ..Default::default()
        };
        let out = train_classifier(Classifier::logreg(12, 1), &notes, &notes, &cfg, 1).unwrap();
        let w = out.best.store.get("head.bow.weight").unwrap();
        assert!(w.data()[5] > 0.0);
        assert_eq!(out.metrics[0].dev_micro_auc, 1.0);
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            hidden_size: 8,
            num_layers: 1,
            num_attention_heads: 2,
            intermediate_size: 16,
            activation_function: "gelu".into(),
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            max_len: 12,
            vocab_size: 15,
            segment_types: 2,
            layer_norm_eps: 1e-12,
        }
    }

    fn tiny_vocab() -> Vocab {
        let words: Vec<String> = (0..10).map(|i| format!("w{}", (b'a' + i) as char)).collect();
        crate::corpus::build_vocab(words.iter(), 10).unwrap()
    }

    fn space() -> LabelSpace {
        let mut s = LabelSpace::new(vec!["A1".into(), "B2".into(), "C3".into()], vec![5, 4, 3]).unwrap();
        let descs = [("A1", "wa wb"), ("B2", "wc"), ("C3", "wa wb")];
        s.set_descriptions(&descs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect());
        s
    }

    #[test]
    fn semantic_init_matches_recomputed_mean() {
        let vocab = tiny_vocab();
        let enc: EncoderParams<f64> = init_encoder(&tiny_encoder(), 2).unwrap();
        let (l, fb) = semantic_label_init(&space(), &enc, &vocab, LabelInit::Semantic, 0).unwrap();
        assert!(fb.is_empty());
        assert_eq!(l.row(0), l.row(2));
        let ids: Vec<usize> = ["wc"].iter().map(|t| vocab.id(t)).collect();
        let chunk = Chunk::truncated(&ids, 12, ("x".into(), 0)).unwrap();
        let h = encode_infer(&chunk, &enc, false).unwrap().hidden;
        for (a, b) in l.row(1).iter().zip(h.row(1)) {
            assert!(close(*a, *b, 1e-12));
        }
        let (e, _) = semantic_label_init(&space(), &enc, &vocab, LabelInit::InputEmbedding, 0).unwrap();
        let table = enc.store.get("embeddings.token").unwrap();
        assert_eq!(e.row(1), table.row(vocab.id("wc")));

        let mut s = space();
        s.set_descriptions(&[("B2".to_string(), "zzz".to_string())].into_iter().collect());
        let (_, fb) = semantic_label_init(&s, &enc, &vocab, LabelInit::Semantic, 0).unwrap();
        assert_eq!(fb, vec!["B2".to_string()]);
    }

    #[test]
    fn classifier_validation_and_single_chunk_aggregation() {
        let vocab = tiny_vocab();
        let enc: EncoderParams<f32> = init_encoder(&tiny_encoder(), 2).unwrap();
        for kind in [HeadKind::Cls, HeadKind::Xml] {
            let (m, _) = Classifier::with_encoder(kind, &enc, HeadConfig::default(), &space(), &vocab, 1).unwrap();
            m.validate().unwrap();
            let ids = vec![5, 6, 7, 8];
            let chunk = Chunk::truncated(&ids, 12, ("n".into(), 0)).unwrap();
            assert_eq!(predict_note(&m, &ids, 12).unwrap(), predict_chunk(&m, &chunk).unwrap());
            let mut broken = m.clone();
            broken.store.remove("head.w_a.weight");
            broken.store.remove("head.w_out.weight");
            assert!(broken.validate().is_err());
        }
    }

    #[test]
    fn padding_does_not_change_predictions() {
        let vocab = tiny_vocab();
        let enc: EncoderParams<f32> = init_encoder(&tiny_encoder(), 2).unwrap();
        let (m, _) = Classifier::with_encoder(HeadKind::Xml, &enc, HeadConfig::default(), &space(), &vocab, 1).unwrap();
        let chunk = Chunk::truncated(&[5, 6, 7], 12, ("n".into(), 0)).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&m.store);
        let cfg = m.encoder_config().unwrap();
        let full = encoder_graph(&mut g, &mut b, cfg, &chunk, Mode::Infer, false, &mut rng_from_seed(0)).unwrap();
        let (logits, _) = xml_head_graph(&mut g, &mut b, full.hidden, &label_attention_mask(&chunk)).unwrap();
        let p = g.sigmoid(logits);
        let untrimmed: Vec<f64> = g.value(p).data().iter().map(|&x| x as f64).collect();
        let trimmed = predict_chunk(&m, &chunk).unwrap();
        for (a, b) in untrimmed.iter().zip(&trimmed) {
            assert!(close(*a, *b, 1e-6));
        }
    }

    fn scaled(store: &mut ParamStore<f64>, k: f64) {
        for (name, t) in store.iter_mut() {
            if !name.ends_with("gain") {
                *t = t.map(|x| x * k + 0.01);
            }
        }
    }

    #[test]
    fn xml_head_gradients() {
        let vocab = tiny_vocab();
        let mut cfg = tiny_encoder();
        cfg.max_len = 8;
        let enc: EncoderParams<f64> = init_encoder(&cfg, 5).unwrap();
        let (mut m, _) = Classifier::with_encoder(HeadKind::Xml, &enc, HeadConfig::default(), &space(), &vocab, 1).unwrap();
        scaled(&mut m.store, 25.0);
        let chunk = Chunk::truncated(&[5, 6, 7, 9], 8, ("n".into(), 0)).unwrap();
        let labels = [1u8, 0, 1];
        let r = grad_check_params(&m.store, 1e-4, Some(5), |g, b| {
            chunk_loss_graph(g, b, &m, &chunk, &labels, Mode::Infer, &mut rng_from_seed(0))
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn multihead_gradients() {
        for scale_logits in [false, true] {
            let cfg = HeadConfig {
                scale_logits,
                ..tiny_head()
            };
            let m: Classifier<f64> = Classifier::multihead(10, 2, cfg, 4).unwrap();
            let chunk = Chunk::truncated(&[5, 6, 7, 8], 8, ("n".into(), 0)).unwrap();
            let r = grad_check_params(&m.store, 1e-4, None, |g, b| {
                chunk_loss_graph(g, b, &m, &chunk, &[1, 0], Mode::Infer, &mut rng_from_seed(0))
            })
            .unwrap();
            assert!(r.max_rel_err < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn one_step_changes_head_and_is_deterministic() {
        let vocab = tiny_vocab();
        let enc: EncoderParams<f32> = init_encoder(&tiny_encoder(), 2).unwrap();
        let (m, _) = Classifier::with_encoder(HeadKind::Xml, &enc, HeadConfig::default(), &space(), &vocab, 1).unwrap();
        let notes: Vec<LabeledNote> = (0..4)
            .map(|i| LabeledNote {
                note_id: format!("n{i}"),
                token_ids: vec![5 + i, 6, 7 + i],
                labels: vec![(i % 2) as u8, 1 - (i % 2) as u8, 1],
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            peak_lr: 1e-3,
            max_len: 12,
            ..Default::default()
        };
        let a = train_classifier(m.clone(), &notes, &notes, &cfg, 3).unwrap();
        assert_eq!(a.step_losses.len(), 1);
        assert_ne!(a.best.store.get("head.labels"), m.store.get("head.labels"));
        let b = train_classifier(m, &notes, &notes, &cfg, 3).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.best.store, b.best.store);
    }
}
