//! Post-norm transformer encoder with learned absolute positions.
//!
//! Each block is: multi-head scaled dot-product self-attention, residual add
//! and layer norm, then a gelu feed-forward, residual add and layer norm.
//! Padding keys are excluded from every attention softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Chunk, NUM_SPECIALS};
use crate::error::{Error, Result};
use crate::numerics::{rng_from_seed, truncated_normal, Binder, Graph, NodeId, ParamStore, Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_activation")]
    pub activation_function: String,
    pub hidden_dropout: f64,
    pub attention_dropout: f64,
    pub max_len: usize,
    pub vocab_size: usize,
    #[serde(default = "default_segments")]
    pub segment_types: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
}

fn default_activation() -> String {
    "gelu".into()
}

fn default_segments() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-12
}

impl EncoderConfig {
    fn preset(d: usize, layers: usize, heads: usize, inter: usize, max_len: usize, vocab_size: usize) -> Self {
        Self {
            hidden_size: d,
            num_layers: layers,
            num_attention_heads: heads,
            intermediate_size: inter,
            activation_function: default_activation(),
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            max_len,
            vocab_size,
            segment_types: 2,
            layer_norm_eps: default_ln_eps(),
        }
    }

    /// 512 hidden, 8 layers, 8 heads, 2048 intermediate, 1024 positions.
    pub fn small(vocab_size: usize) -> Self {
        Self::preset(512, 8, 8, 2048, 1024, vocab_size)
    }

    /// 768 hidden, 12 layers, 12 heads, 3072 intermediate, 1024 positions.
    pub fn big(vocab_size: usize) -> Self {
        Self::preset(768, 12, 12, 3072, 1024, vocab_size)
    }

    /// Laptop-sized default: 64 hidden, 2 layers, 4 heads, 128 positions.
    pub fn desk(vocab_size: usize) -> Self {
        Self::preset(64, 2, 4, 256, 128, vocab_size)
    }

    pub fn by_name(name: &str, vocab_size: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small(vocab_size)),
            "big" => Ok(Self::big(vocab_size)),
            "desk" => Ok(Self::desk(vocab_size)),
            other => Err(Error::InvalidConfig(format!(
                "unknown encoder preset {other:?} (expected small, big or desk)"
            ))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_attention_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("hidden_size", self.hidden_size),
            ("num_attention_heads", self.num_attention_heads),
            ("intermediate_size", self.intermediate_size),
            ("segment_types", self.segment_types),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.num_attention_heads > 0 && self.hidden_size % self.num_attention_heads != 0 {
            problems.push(format!(
                "hidden_size {} not divisible by num_attention_heads {}",
                self.hidden_size, self.num_attention_heads
            ));
        }
        if self.max_len < 2 {
            problems.push(format!("max_len {} must be >= 2", self.max_len));
        }
        if self.vocab_size <= NUM_SPECIALS {
            problems.push(format!("vocab_size {} leaves no regular tokens", self.vocab_size));
        }
        for (name, p) in [
            ("hidden_dropout", self.hidden_dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                problems.push(format!("{name} {p} not in [0,1)"));
            }
        }
        if self.activation_function != "gelu" {
            problems.push(format!(
                "activation_function {:?} unsupported (gelu only)",
                self.activation_function
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            problems.push("layer_norm_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }
}

/// Encoder weights plus the pretraining heads, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F> {
    pub config: EncoderConfig,
    pub store: ParamStore<F>,
}

fn layer_key(l: usize, rest: &str) -> String {
    format!("layer{l}.{rest}")
}

/// Parameter names and shapes for `config`.
pub fn param_shapes(config: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.hidden_size;
    let i = config.intermediate_size;
    let v = config.vocab_size;
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d]),
        ("embeddings.position".to_string(), vec![config.max_len, d]),
        ("embeddings.segment".to_string(), vec![config.segment_types, d]),
        ("embeddings.ln.gain".to_string(), vec![d]),
        ("embeddings.ln.bias".to_string(), vec![d]),
    ];
    for l in 0..config.num_layers {
        for proj in ["query", "key", "value", "output"] {
            out.push((layer_key(l, &format!("attn.{proj}.weight")), vec![d, d]));
            out.push((layer_key(l, &format!("attn.{proj}.bias")), vec![d]));
        }
        out.push((layer_key(l, "attn.ln.gain"), vec![d]));
        out.push((layer_key(l, "attn.ln.bias"), vec![d]));
        out.push((layer_key(l, "ffn.inter.weight"), vec![d, i]));
        out.push((layer_key(l, "ffn.inter.bias"), vec![i]));
        out.push((layer_key(l, "ffn.output.weight"), vec![i, d]));
        out.push((layer_key(l, "ffn.output.bias"), vec![d]));
        out.push((layer_key(l, "ffn.ln.gain"), vec![d]));
        out.push((layer_key(l, "ffn.ln.bias"), vec![d]));
    }
    out.extend([
        ("mlm.transform.weight".to_string(), vec![d, d]),
        ("mlm.transform.bias".to_string(), vec![d]),
        ("mlm.ln.gain".to_string(), vec![d]),
        ("mlm.ln.bias".to_string(), vec![d]),
        ("mlm.bias".to_string(), vec![v]),
        ("nsp.pooler.weight".to_string(), vec![d, d]),
        ("nsp.pooler.bias".to_string(), vec![d]),
        ("nsp.classifier.weight".to_string(), vec![d, 1]),
        ("nsp.classifier.bias".to_string(), vec![1]),
    ]);
    out
}

/// Truncated-normal(0, 0.02) weights, zero biases, unit layer-norm gains.
pub fn init_encoder<F: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<F>> {
    config.validate()?;
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    for (name, shape) in param_shapes(config) {
        let t = if name.ends_with("gain") {
            Tensor::filled(&shape, F::one())
        } else if name.ends_with("bias") {
            Tensor::zeros(&shape)
        } else {
            truncated_normal(&shape, INIT_STD, &mut rng)
        };
        store.insert(name, t);
    }
    Ok(EncoderParams {
        config: config.clone(),
        store,
    })
}

impl<F: Scalar> EncoderParams<F> {
    /// Checks that `store` holds every tensor `config` needs.
    pub fn from_store(config: EncoderConfig, store: ParamStore<F>) -> Result<Self> {
        Self::checked(config, store, true)
    }

    /// Like [`EncoderParams::from_store`] but without the pretraining heads,
    /// which fine-tuned classifiers drop. Enough for [`encoder_forward`].
    pub fn backbone_from_store(config: EncoderConfig, store: ParamStore<F>) -> Result<Self> {
        Self::checked(config, store, false)
    }

    fn checked(config: EncoderConfig, store: ParamStore<F>, with_heads: bool) -> Result<Self> {
        config.validate()?;
        for (name, shape) in param_shapes(&config) {
            if !with_heads && (name.starts_with("mlm.") || name.starts_with("nsp.")) {
                continue;
            }
            let t = store.expect(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, store })
    }

    pub fn cast<G: Scalar>(&self) -> EncoderParams<G> {
        EncoderParams {
            config: self.config.clone(),
            store: self.store.cast(),
        }
    }
}

/// Grows the positional table to `new_max` rows. Existing rows are kept
/// bit-for-bit; new rows come from the initialization distribution.
pub fn extend_positions<F: Scalar>(params: &EncoderParams<F>, new_max: usize, seed: u64) -> Result<EncoderParams<F>> {
    let old = params.config.max_len;
    if new_max <= old {
        return Err(Error::InvalidConfig(format!(
            "new max_len {new_max} must exceed current {old}"
        )));
    }
    let d = params.config.hidden_size;
    let mut rng = rng_from_seed(seed);
    let fresh: Tensor<F> = truncated_normal(&[new_max - old, d], INIT_STD, &mut rng);
    let mut data = params.store.expect("embeddings.position")?.data().to_vec();
    data.extend_from_slice(fresh.data());
    let mut out = params.clone();
    out.config.max_len = new_max;
    out.store
        .insert("embeddings.position", Tensor::new(vec![new_max, d], data)?);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

impl Mode {
    pub fn training(self) -> bool {
        self == Mode::Train
    }
}

/// Graph handles produced by [`encoder_graph`].
pub struct EncoderNodes<F> {
    /// `N x d` last-layer states.
    pub hidden: NodeId,
    /// Per layer, per head `N x N` attention weights, when captured.
    pub attentions: Option<Vec<Vec<Tensor<F>>>>,
}

fn dense<F: Scalar>(g: &mut Graph<F>, b: &mut Binder<F>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let w = b.get(g, &format!("{prefix}.weight"));
    let bias = b.get(g, &format!("{prefix}.bias"));
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

fn norm<F: Scalar>(g: &mut Graph<F>, b: &mut Binder<F>, x: NodeId, prefix: &str, eps: f64) -> Result<NodeId> {
    let gain = b.get(g, &format!("{prefix}.gain"));
    let bias = b.get(g, &format!("{prefix}.bias"));
    g.layer_norm(x, gain, bias, F::lit(eps))
}

/// Token + position + segment embeddings, layer-normed, with dropout in
/// training mode.
pub fn embed_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    config: &EncoderConfig,
    chunk: &Chunk,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    let n = chunk.len();
    if n > config.max_len {
        return Err(Error::OutOfRange(format!(
            "chunk of {n} positions exceeds max_len {}",
            config.max_len
        )));
    }
    if n == 0 {
        return Err(Error::Empty("chunk".into()));
    }
    let positions: Vec<usize> = (0..n).collect();
    let segments: Vec<usize> = chunk.segments.iter().map(|&s| s as usize).collect();
    let tok_table = b.get(g, "embeddings.token");
    let pos_table = b.get(g, "embeddings.position");
    let seg_table = b.get(g, "embeddings.segment");
    let tok = g.gather(tok_table, &chunk.ids)?;
    let pos = g.gather(pos_table, &positions)?;
    let seg = g.gather(seg_table, &segments)?;
    let sum = g.add(tok, pos)?;
    let sum = g.add(sum, seg)?;
    let normed = norm(g, b, sum, "embeddings.ln", config.layer_norm_eps)?;
    g.dropout(normed, config.hidden_dropout, rng, mode.training())
}

/// Records the full encoder forward pass for `chunk` on `g`.
pub fn encoder_graph<F: Scalar, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    b: &mut Binder<F>,
    config: &EncoderConfig,
    chunk: &Chunk,
    mode: Mode,
    capture_attention: bool,
    rng: &mut R,
) -> Result<EncoderNodes<F>> {
    let mut x = embed_graph(g, b, config, chunk, mode, rng)?;
    let key_mask = chunk.attention_mask();
    let heads = config.num_attention_heads;
    let dh = config.head_dim();
    let scale = F::lit(1.0 / (dh as f64).sqrt());
    let eps = config.layer_norm_eps;
    let mut captured = capture_attention.then(Vec::new);

    for l in 0..config.num_layers {
        let q = dense(g, b, x, &layer_key(l, "attn.query"))?;
        let k = dense(g, b, x, &layer_key(l, "attn.key"))?;
        let v = dense(g, b, x, &layer_key(l, "attn.value"))?;
        let mut contexts = Vec::with_capacity(heads);
        let mut layer_maps = Vec::new();
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_masked(scores, Some(&key_mask))?;
            if captured.is_some() {
                layer_maps.push(g.value(probs).clone());
            }
            let probs = g.dropout(probs, config.attention_dropout, rng, mode.training())?;
            contexts.push(g.matmul(probs, vh)?);
        }
        if let Some(c) = captured.as_mut() {
            c.push(layer_maps);
        }
        let ctx = g.concat_cols(&contexts)?;
        let attn = dense(g, b, ctx, &layer_key(l, "attn.output"))?;
        let attn = g.dropout(attn, config.hidden_dropout, rng, mode.training())?;
        let res = g.add(x, attn)?;
        x = norm(g, b, res, &layer_key(l, "attn.ln"), eps)?;

        let inter = dense(g, b, x, &layer_key(l, "ffn.inter"))?;
        let inter = g.gelu(inter);
        let out = dense(g, b, inter, &layer_key(l, "ffn.output"))?;
        let out = g.dropout(out, config.hidden_dropout, rng, mode.training())?;
        let res = g.add(x, out)?;
        x = norm(g, b, res, &layer_key(l, "ffn.ln"), eps)?;
    }
    Ok(EncoderNodes {
        hidden: x,
        attentions: captured,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput<F> {
    pub hidden: Tensor<F>,
    pub attentions: Option<Vec<Vec<Tensor<F>>>>,
}

/// Embedding output alone, without any blocks.
pub fn embed<F: Scalar, R: Rng + ?Sized>(
    chunk: &Chunk,
    params: &EncoderParams<F>,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&params.store);
    let x = embed_graph(&mut g, &mut b, &params.config, chunk, mode, rng)?;
    Ok(g.value(x).clone())
}

pub fn encoder_forward<F: Scalar, R: Rng + ?Sized>(
    chunk: &Chunk,
    params: &EncoderParams<F>,
    mode: Mode,
    capture_attention: bool,
    rng: &mut R,
) -> Result<EncoderOutput<F>> {
    let mut g = Graph::new();
    let mut b = Binder::new(&params.store);
    let nodes = encoder_graph(&mut g, &mut b, &params.config, chunk, mode, capture_attention, rng)?;
    Ok(EncoderOutput {
        hidden: g.value(nodes.hidden).clone(),
        attentions: nodes.attentions,
    })
}

/// Inference-mode forward; needs no randomness.
pub fn encode_infer<F: Scalar>(chunk: &Chunk, params: &EncoderParams<F>, capture_attention: bool) -> Result<EncoderOutput<F>> {
    let mut unused = rng_from_seed(0);
    encoder_forward(chunk, params, Mode::Infer, capture_attention, &mut unused)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, PAD};

    fn tiny(layers: usize) -> EncoderConfig {
        EncoderConfig {
            hidden_size: 8,
            num_layers: layers,
            num_attention_heads: 2,
            intermediate_size: 16,
            activation_function: "gelu".into(),
            hidden_dropout: 0.1,
            attention_dropout: 0.1,
            max_len: 10,
            vocab_size: 20,
            segment_types: 2,
            layer_norm_eps: 1e-12,
        }
    }

    fn chunk(content: &[usize], max_len: usize) -> Chunk {
        Chunk::from_segments(content, None, max_len, ("c".into(), 0)).unwrap()
    }

    #[test]
    fn config_validation_lists_problems() {
        let mut c = tiny(1);
        c.hidden_size = 9;
        c.max_len = 1;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible"), "{msg}");
        assert!(msg.contains("max_len"), "{msg}");
        assert!(EncoderConfig::by_name("huge", 100).is_err());
        for name in ["small", "big", "desk"] {
            EncoderConfig::by_name(name, 20_005).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn config_json_uses_flat_keys() {
        let json = serde_json::to_value(EncoderConfig::small(20_005)).unwrap();
        assert_eq!(json["hidden_size"], 512);
        assert_eq!(json["num_layers"], 8);
        assert_eq!(json["num_attention_heads"], 8);
        assert_eq!(json["intermediate_size"], 2048);
        assert_eq!(json["activation_function"], "gelu");
        assert_eq!(json["max_len"], 1024);
        let back: EncoderConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, EncoderConfig::small(20_005));
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let c = tiny(2);
        let a: EncoderParams<f32> = init_encoder(&c, 5).unwrap();
        let b: EncoderParams<f32> = init_encoder(&c, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_encoder(&c, 6).unwrap());
        for (name, t) in a.store.iter() {
            if name.ends_with("gain") {
                assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
            }
        }
        EncoderParams::from_store(c.clone(), a.store.clone()).unwrap();
        let mut broken = a.store.clone();
        broken.remove("layer1.ffn.ln.gain");
        assert!(EncoderParams::from_store(c.clone(), broken).is_err());
        let mut backbone = a.store.clone();
        backbone.remove("mlm.bias");
        assert!(EncoderParams::from_store(c.clone(), backbone.clone()).is_err());
        EncoderParams::backbone_from_store(c, backbone).unwrap();
    }

    #[test]
    fn token_embedding_std() {
        let mut c = tiny(0);
        c.vocab_size = 200;
        c.hidden_size = 64;
        c.num_attention_heads = 4;
        let p: EncoderParams<f64> = init_encoder(&c, 11).unwrap();
        let t = p.store.get("embeddings.token").unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let std = (t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn embedding_properties() {
        let p: EncoderParams<f64> = init_encoder(&tiny(1), 1).unwrap();
        let mut rng = rng_from_seed(0);
        let e = embed(&chunk(&[7, 7, 9], 10), &p, Mode::Infer, &mut rng).unwrap();
        assert_ne!(e.row(1), e.row(2), "positions distinguish repeated tokens");
        let e2 = embed(&chunk(&[7, 8, 9], 10), &p, Mode::Infer, &mut rng).unwrap();
        for r in 0..10 {
            assert_eq!(e.row(r) == e2.row(r), r != 2, "row {r}");
        }
        let again = embed(&chunk(&[7, 7, 9], 10), &p, Mode::Infer, &mut rng).unwrap();
        assert_eq!(e, again);
        assert!(embed(&chunk(&[7; 10], 12), &p, Mode::Infer, &mut rng).is_err());
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let p: EncoderParams<f64> = init_encoder(&tiny(2), 3).unwrap();
        let ch = chunk(&[5, 6, 7, 8], 10);
        let out = encode_infer(&ch, &p, true).unwrap();
        assert_eq!(out.hidden.shape(), &[10, 8]);
        let maps = out.attentions.unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].len(), 2);
        let active = ch.active_len();
        for layer in &maps {
            for m in layer {
                for r in 0..10 {
                    let row = m.row(r);
                    let total: f64 = row.iter().sum();
                    assert!((total - 1.0).abs() < 1e-6);
                    assert!(row[active..].iter().all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn zero_layers_is_embedding() {
        let p: EncoderParams<f64> = init_encoder(&tiny(0), 3).unwrap();
        let ch = chunk(&[5, 6], 10);
        let mut rng = rng_from_seed(0);
        assert_eq!(encode_infer(&ch, &p, false).unwrap().hidden, embed(&ch, &p, Mode::Infer, &mut rng).unwrap());
    }

    #[test]
    fn pad_ids_do_not_leak() {
        let p: EncoderParams<f64> = init_encoder(&tiny(2), 8).unwrap();
        let ch = chunk(&[5, 6, 7], 10);
        let mut other = ch.clone();
        other.ids[8] = 11;
        assert_eq!(other.mask[8], 0);
        let a = encode_infer(&ch, &p, false).unwrap().hidden;
        let b = encode_infer(&other, &p, false).unwrap().hidden;
        for r in 0..ch.active_len() {
            assert_eq!(a.row(r), b.row(r));
        }
        assert_eq!(ch.ids[0], CLS);
        assert_eq!(ch.ids[9], PAD);
    }

    #[test]
    fn train_mode_uses_dropout_rng() {
        let p: EncoderParams<f32> = init_encoder(&tiny(1), 3).unwrap();
        let ch = chunk(&[5, 6, 7], 10);
        let run = |seed| {
            let mut rng = rng_from_seed(seed);
            encoder_forward(&ch, &p, Mode::Train, false, &mut rng).unwrap().hidden
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }

    #[test]
    fn extension_preserves_rows() {
        let p: EncoderParams<f32> = init_encoder(&tiny(1), 3).unwrap();
        let e = extend_positions(&p, 16, 9).unwrap();
        assert_eq!(e.config.max_len, 16);
        let old = p.store.get("embeddings.position").unwrap();
        let new = e.store.get("embeddings.position").unwrap();
        assert_eq!(&new.data()[..old.len()], old.data());
        assert_eq!(extend_positions(&p, 16, 9).unwrap(), e);
        assert!(extend_positions(&p, 10, 9).is_err());
        let ch = chunk(&[5, 6, 7], 10);
        let a = encode_infer(&ch, &p, false).unwrap().hidden;
        let b = encode_infer(&ch, &e, false).unwrap().hidden;
        assert_eq!(a, b);
        let long = chunk(&[5; 12], 16);
        assert!(encode_infer(&long, &p, false).is_err());
        assert!(encode_infer(&long, &e, false).is_ok());
    }
}
