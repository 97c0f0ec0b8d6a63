//! ROC-AUC (micro, macro, per label), chunk aggregation and AUC histograms.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::LabelSpace;
use crate::error::{Error, Result};

/// Elementwise maximum over chunk score vectors.
pub fn aggregate_chunks(chunk_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = chunk_scores
        .first()
        .ok_or_else(|| Error::Empty("chunk score list".into()))?;
    let mut out = first.clone();
    for s in &chunk_scores[1..] {
        if s.len() != out.len() {
            return Err(Error::shape("chunk score vectors differ in length"));
        }
        for (o, &x) in out.iter_mut().zip(s) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

/// Mann-Whitney AUC with midranks for ties:
/// `(sum of positive ranks - P(P+1)/2) / (P N)`.
pub fn auc_binary(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l != 0).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedAuc(format!("{p} positives, {n} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // ranks doubled so that midranks stay integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        let pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u64;
        rank_sum2 += mid2 * pos;
        i = j + 1;
    }
    let (p, n) = (p as u64, n as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Scores and targets per note, one column per label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub codes: Vec<String>,
    pub note_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub labels: Vec<Vec<u8>>,
}

impl PredictionSet {
    pub fn new(codes: Vec<String>, note_ids: Vec<String>, scores: Vec<Vec<f64>>, labels: Vec<Vec<u8>>) -> Result<Self> {
        let m = codes.len();
        if note_ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::shape("prediction set row counts differ"));
        }
        if scores.iter().any(|s| s.len() != m) || labels.iter().any(|l| l.len() != m) {
            return Err(Error::shape(format!("prediction vectors must have {m} entries")));
        }
        if scores.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::OutOfRange("scores must lie in [0,1]".into()));
        }
        Ok(Self {
            codes,
            note_ids,
            scores,
            labels,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.codes.len()
    }

    fn column(&self, j: usize) -> (Vec<f64>, Vec<u8>) {
        (
            self.scores.iter().map(|s| s[j]).collect(),
            self.labels.iter().map(|l| l[j]).collect(),
        )
    }
}

/// AUC over every (note, label) pair pooled together.
pub fn micro_auc(preds: &PredictionSet) -> Result<f64> {
    let scores: Vec<f64> = preds.scores.iter().flatten().copied().collect();
    let labels: Vec<u8> = preds.labels.iter().flatten().copied().collect();
    auc_binary(&scores, &labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelAuc {
    pub code: String,
    pub auc: f64,
    pub positive_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Excluded {
    pub code: String,
    pub reason: String,
}

/// Per-label AUCs for labels with both classes present, plus the rest.
pub fn per_label_auc(preds: &PredictionSet) -> (Vec<LabelAuc>, Vec<Excluded>) {
    let results: Vec<std::result::Result<LabelAuc, Excluded>> = (0..preds.num_labels())
        .into_par_iter()
        .map(|j| {
            let (s, l) = preds.column(j);
            let positives = l.iter().filter(|&&x| x != 0).count();
            let code = preds.codes[j].clone();
            match auc_binary(&s, &l) {
                Ok(auc) => Ok(LabelAuc {
                    code,
                    auc,
                    positive_count: positives,
                }),
                Err(e) => Err(Excluded {
                    code,
                    reason: e.to_string(),
                }),
            }
        })
        .collect();
    let mut included = Vec::new();
    let mut excluded = Vec::new();
    for r in results {
        match r {
            Ok(a) => included.push(a),
            Err(e) => excluded.push(e),
        }
    }
    (included, excluded)
}

fn mean_auc(rows: &[&LabelAuc]) -> f64 {
    rows.iter().map(|r| r.auc).sum::<f64>() / rows.len() as f64
}

/// Unweighted mean of per-label AUCs; single-class labels are excluded.
pub fn macro_auc(preds: &PredictionSet) -> Result<(f64, Vec<Excluded>)> {
    let (included, excluded) = per_label_auc(preds);
    if included.is_empty() {
        return Err(Error::UndefinedAuc("no label has both classes".into()));
    }
    Ok((mean_auc(&included.iter().collect::<Vec<_>>()), excluded))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucHistogram {
    pub bins: Vec<HistogramBin>,
    pub threshold: f64,
    /// Labels with AUC at or above `threshold`.
    pub high_count: usize,
}

pub const DEFAULT_HIGH_AUC: f64 = 0.98;

/// Right-closed bins `(lo, hi]` covering `[0, 1]`; the first bin also takes 0.
pub fn auc_histogram(aucs: &[f64], bin_width: f64, threshold: f64) -> Result<AucHistogram> {
    if !(bin_width > 0.0 && bin_width <= 1.0) {
        return Err(Error::InvalidConfig(format!("bin width {bin_width}")));
    }
    let nbins = (1.0 / bin_width - 1e-9).ceil() as usize;
    let mut bins: Vec<HistogramBin> = (0..nbins)
        .map(|k| HistogramBin {
            bin_low: k as f64 * bin_width,
            bin_high: ((k + 1) as f64 * bin_width).min(1.0),
            count: 0,
        })
        .collect();
    for &a in aucs {
        let k = ((a / bin_width - 1e-9).ceil() as isize - 1).clamp(0, nbins as isize - 1) as usize;
        bins[k].count += 1;
    }
    Ok(AucHistogram {
        bins,
        threshold,
        high_count: aucs.iter().filter(|&&a| a >= threshold).count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_auc: f64,
    pub macro_auc: f64,
    pub per_label: Vec<LabelAuc>,
    pub excluded_labels: Vec<Excluded>,
    pub histogram: AucHistogram,
}

impl EvalReport {
    pub fn build(preds: &PredictionSet, bin_width: f64, threshold: f64) -> Result<Self> {
        let micro = micro_auc(preds)?;
        let (per_label, excluded_labels) = per_label_auc(preds);
        if per_label.is_empty() {
            return Err(Error::UndefinedAuc("no label has both classes".into()));
        }
        let macro_auc = mean_auc(&per_label.iter().collect::<Vec<_>>());
        let aucs: Vec<f64> = per_label.iter().map(|r| r.auc).collect();
        Ok(Self {
            micro_auc: micro,
            macro_auc,
            per_label,
            excluded_labels,
            histogram: auc_histogram(&aucs, bin_width, threshold)?,
        })
    }

    pub fn write_json(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// `code,count,auc` per included label.
    pub fn write_per_label_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["code", "count", "auc"]).map_err(csv_err)?;
        for r in &self.per_label {
            out.write_record([r.code.clone(), r.positive_count.to_string(), r.auc.to_string()])
                .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_histogram_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for b in &self.histogram.bins {
            out.serialize(b).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Macro AUC restricted to labels with fewer than `max_train_count`
/// training positives.
pub fn low_frequency_slice(report: &EvalReport, space: &LabelSpace, max_train_count: u64) -> Result<f64> {
    let rows: Vec<&LabelAuc> = report
        .per_label
        .iter()
        .filter(|r| {
            space
                .index_of(&r.code)
                .is_some_and(|j| space.train_count(j) < max_train_count)
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Empty(format!("no labels with train count below {max_train_count}")));
    }
    Ok(mean_auc(&rows))
}
