//! Attention exports: per-label token weights and last-layer head matrices,
//! as JSON and as a self-contained HTML page.

use notecoder_core::cohort::LabelSpace;
use notecoder_core::corpus::{Chunk, Vocab};
use notecoder_core::encoder::{encode_infer, EncoderParams};
use notecoder_core::heads::{label_attention, label_attention_mask, predict_chunk, Classifier, HeadKind};
use notecoder_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWeights {
    pub code: String,
    pub description: String,
    pub probability: f64,
    /// One weight per entry of [`AttentionExport::tokens`].
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMatrix {
    pub layer: usize,
    pub head: usize,
    /// Row `i` is the distribution of query position `i` over keys.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub note_id: String,
    pub chunk_index: usize,
    /// Tokens the label attention may attend to, in chunk order.
    pub tokens: Vec<String>,
    /// Chunk positions of `tokens`.
    pub positions: Vec<usize>,
    pub labels: Vec<LabelWeights>,
    /// Every token of the chunk, including `[CLS]` and `[SEP]`.
    pub sequence: Vec<String>,
    pub heads: Vec<HeadMatrix>,
}

fn token_string(vocab: &Vocab, id: usize) -> String {
    vocab.token(id).unwrap_or("[UNK]").to_string()
}

/// Labels to explain through the label-attention head.
pub struct LabelQuery<'a> {
    pub model: &'a Classifier<f32>,
    pub space: &'a LabelSpace,
    pub codes: &'a [String],
}

/// Attention data for one chunk of a note.
pub fn export_attention(
    encoder: &EncoderParams<f32>,
    query: Option<LabelQuery>,
    vocab: &Vocab,
    chunk: &Chunk,
    chunk_index: usize,
) -> Result<AttentionExport> {
    let chunk = chunk.trimmed();
    let mask = label_attention_mask(&chunk);
    let positions: Vec<usize> = (0..chunk.len()).filter(|&i| mask[i]).collect();
    let tokens = positions.iter().map(|&i| token_string(vocab, chunk.ids[i])).collect();
    let mut labels = Vec::new();
    if let Some(q) = query {
        if q.model.kind != HeadKind::Xml {
            return Err(Error::InvalidConfig(format!(
                "{} head has no label attention",
                q.model.kind.as_str()
            )));
        }
        let idx: Vec<usize> = q
            .codes
            .iter()
            .map(|c| q.space.index_of(c).ok_or_else(|| Error::UnknownLabel(c.clone())))
            .collect::<Result<_>>()?;
        let attn = label_attention(q.model, &chunk)?;
        let probs = predict_chunk(q.model, &chunk)?;
        for j in idx {
            labels.push(LabelWeights {
                code: q.space.codes()[j].clone(),
                description: q.space.description(j).to_string(),
                probability: probs[j],
                weights: positions.iter().map(|&i| attn.at(j, i) as f64).collect(),
            });
        }
    }
    let out = encode_infer(&chunk, encoder, true)?;
    let layers = out.attentions.expect("attention was captured");
    let last = layers.len() - 1;
    let heads = layers[last]
        .iter()
        .enumerate()
        .map(|(h, t)| HeadMatrix {
            layer: last,
            head: h,
            matrix: (0..t.rows()).map(|r| t.row(r).iter().map(|&x| x as f64).collect()).collect(),
        })
        .collect();
    Ok(AttentionExport {
        note_id: chunk.origin.0.clone(),
        chunk_index,
        tokens,
        positions,
        labels,
        sequence: chunk.ids.iter().map(|&id| token_string(vocab, id)).collect(),
        heads,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn heat(alpha: f64) -> String {
    format!("rgba(200,30,30,{:.3})", alpha.clamp(0.0, 1.0))
}

/// Standalone page: highlighted tokens per label, then one grid per head.
pub fn render_html(export: &AttentionExport) -> String {
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n");
    h.push_str(&format!("<title>Attention for {}</title>\n", escape(&export.note_id)));
    h.push_str(
        "<style>body{font-family:sans-serif;margin:2em}span.t{padding:1px 2px;margin:1px;display:inline-block}\
         .grid{display:inline-block;margin:0 1em 1em 0;vertical-align:top}</style>\n</head><body>\n",
    );
    h.push_str(&format!(
        "<h1>Note {} (chunk {})</h1>\n",
        escape(&export.note_id),
        export.chunk_index
    ));
    for l in &export.labels {
        let max = l.weights.iter().cloned().fold(0.0, f64::max).max(1e-12);
        h.push_str(&format!(
            "<h2>{} {}</h2>\n<p>probability {:.4}</p>\n<p>",
            escape(&l.code),
            escape(&l.description),
            l.probability
        ));
        for (tok, w) in export.tokens.iter().zip(&l.weights) {
            h.push_str(&format!(
                "<span class=\"t\" style=\"background:{}\" title=\"{w:.6}\">{}</span>",
                heat(w / max),
                escape(tok)
            ));
        }
        h.push_str("</p>\n");
    }
    let n = export.sequence.len();
    let cell = (480 / n.max(1)).clamp(2, 16);
    h.push_str(&format!("<h2>Layer {} attention heads</h2>\n", export.heads.first().map_or(0, |m| m.layer)));
    for m in &export.heads {
        h.push_str(&format!(
            "<div class=\"grid\"><div>head {}</div><svg width=\"{}\" height=\"{}\">",
            m.head,
            n * cell,
            n * cell
        ));
        for (r, row) in m.matrix.iter().enumerate() {
            for (c, &w) in row.iter().enumerate() {
                h.push_str(&format!(
                    "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\"><title>{} \u{2192} {}: {w:.4}</title></rect>",
                    c * cell,
                    r * cell,
                    heat(w),
                    escape(&export.sequence[r]),
                    escape(&export.sequence[c])
                ));
            }
        }
        h.push_str("</svg></div>\n");
    }
    h.push_str("</body></html>\n");
    h
}
