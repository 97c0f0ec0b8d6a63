//! Label space, chronic-code imputation, label vectors and patient splits.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Read, Write};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Note;
use crate::error::{Error, Result};
use crate::numerics::rng_from_seed;

/// Ordered ICD codes with their descriptions, training frequencies and
/// chronic flags. A code's index is its position in `codes`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct LabelSpace {
    codes: Vec<String>,
    descriptions: Vec<String>,
    train_count: Vec<u64>,
    chronic: Vec<bool>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    code: String,
    description: String,
    train_count: u64,
    chronic: bool,
}

impl LabelSpace {
    pub fn new(codes: Vec<String>, train_count: Vec<u64>) -> Result<Self> {
        if codes.len() != train_count.len() {
            return Err(Error::shape("codes and counts differ in length"));
        }
        let index: HashMap<String, usize> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect();
        if index.len() != codes.len() {
            return Err(Error::Parse("duplicate code in label space".into()));
        }
        let n = codes.len();
        Ok(Self {
            codes,
            descriptions: vec![String::new(); n],
            train_count,
            chronic: vec![false; n],
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn description(&self, j: usize) -> &str {
        &self.descriptions[j]
    }

    pub fn train_count(&self, j: usize) -> u64 {
        self.train_count[j]
    }

    pub fn is_chronic(&self, j: usize) -> bool {
        self.chronic[j]
    }

    /// Attaches descriptions; codes without one keep an empty description.
    /// Returns the codes left without a description.
    pub fn set_descriptions(&mut self, map: &HashMap<String, String>) -> Vec<String> {
        let mut missing = Vec::new();
        for (j, code) in self.codes.iter().enumerate() {
            match map.get(code) {
                Some(d) => self.descriptions[j] = d.clone(),
                None => missing.push(code.clone()),
            }
        }
        missing
    }

    pub fn set_chronic(&mut self, chronic: &HashSet<String>) {
        for (j, code) in self.codes.iter().enumerate() {
            self.chronic[j] = chronic.contains(code);
        }
    }

    /// CSV with header `code,description,train_count,chronic`, in index order.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for j in 0..self.len() {
            wr.serialize(LabelRow {
                code: self.codes[j].clone(),
                description: self.descriptions[j].clone(),
                train_count: self.train_count[j],
                chronic: self.chronic[j],
            })
            .map_err(|e| Error::Parse(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut rows = Vec::new();
        for row in rd.deserialize::<LabelRow>() {
            rows.push(row.map_err(|e| Error::Parse(e.to_string()))?);
        }
        let mut space = Self::new(
            rows.iter().map(|r| r.code.clone()).collect(),
            rows.iter().map(|r| r.train_count).collect(),
        )?;
        for (j, r) in rows.into_iter().enumerate() {
            space.descriptions[j] = r.description;
            space.chronic[j] = r.chronic;
        }
        Ok(space)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8")
    }
}

/// Reads the `code,description` CSV.
pub fn read_descriptions(r: impl Read) -> Result<HashMap<String, String>> {
    #[derive(Deserialize)]
    struct Row {
        code: String,
        description: String,
    }
    let mut rd = csv::Reader::from_reader(r);
    let mut out = HashMap::new();
    for row in rd.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        out.insert(row.code, row.description);
    }
    Ok(out)
}

/// One code per line; blank lines ignored.
pub fn read_code_list(r: impl BufRead) -> Result<HashSet<String>> {
    let mut out = HashSet::new();
    for line in r.lines() {
        let line = line?;
        let code = line.trim();
        if !code.is_empty() {
            out.insert(code.to_string());
        }
    }
    Ok(out)
}

fn time_key(n: &Note) -> (&str, &str) {
    (n.timestamp.as_str(), n.note_id.as_str())
}

/// Propagates each chronic code seen in at least two distinct notes of the
/// patient to every note from its earliest occurrence onward (inclusive).
///
/// `patient_notes` must be ordered by `(timestamp, note_id)`.
pub fn impute_chronic(patient_notes: &[Note], chronic: &HashSet<String>) -> Result<Vec<Note>> {
    if patient_notes
        .windows(2)
        .any(|w| time_key(&w[0]) > time_key(&w[1]))
    {
        return Err(Error::NotTimeOrdered);
    }
    let mut first_seen: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, note) in patient_notes.iter().enumerate() {
        let distinct: BTreeSet<&str> = note
            .codes
            .iter()
            .map(String::as_str)
            .filter(|c| chronic.contains(*c))
            .collect();
        for code in distinct {
            first_seen.entry(code).or_insert((i, 0)).1 += 1;
        }
    }
    let mut out = patient_notes.to_vec();
    for (code, (earliest, seen)) in first_seen {
        if seen < 2 {
            continue;
        }
        for note in &mut out[earliest..] {
            if !note.codes.iter().any(|c| c == code) {
                note.codes.push(code.to_string());
            }
        }
    }
    Ok(out)
}

/// Applies [`impute_chronic`] to each patient of an arbitrary note list,
/// returning the notes in their original order.
pub fn impute_all(notes: &[Note], chronic: &HashSet<String>) -> Result<Vec<Note>> {
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, n) in notes.iter().enumerate() {
        by_patient.entry(n.patient_id.as_str()).or_default().push(i);
    }
    let groups: Vec<Vec<usize>> = by_patient
        .into_values()
        .map(|mut idx| {
            idx.sort_by(|&a, &b| time_key(&notes[a]).cmp(&time_key(&notes[b])));
            idx
        })
        .collect();
    let imputed: Vec<Result<Vec<(usize, Note)>>> = groups
        .par_iter()
        .map(|idx| {
            let ordered: Vec<Note> = idx.iter().map(|&i| notes[i].clone()).collect();
            Ok(idx.iter().copied().zip(impute_chronic(&ordered, chronic)?).collect())
        })
        .collect();
    let mut out = notes.to_vec();
    for group in imputed {
        for (i, n) in group? {
            out[i] = n;
        }
    }
    Ok(out)
}

/// How the label-frequency threshold compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// count > min_count
    #[default]
    Strict,
    /// count >= min_count
    Inclusive,
}

/// Codes occurring in more than `min_count` training notes, ordered by
/// descending count then code. A code repeated within one note counts once.
pub fn filter_labels<S: AsRef<str>>(train_codes: &[Vec<S>], min_count: u64) -> Result<LabelSpace> {
    filter_labels_with(train_codes, min_count, Threshold::Strict)
}

pub fn filter_labels_with<S: AsRef<str>>(
    train_codes: &[Vec<S>],
    min_count: u64,
    threshold: Threshold,
) -> Result<LabelSpace> {
    if min_count < 1 {
        return Err(Error::InvalidConfig("min_count must be >= 1".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for codes in train_codes {
        let distinct: BTreeSet<&str> = codes.iter().map(AsRef::as_ref).collect();
        for c in distinct {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let mut kept: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|&(_, n)| match threshold {
            Threshold::Strict => n > min_count,
            Threshold::Inclusive => n >= min_count,
        })
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    LabelSpace::new(
        kept.iter().map(|(c, _)| c.to_string()).collect(),
        kept.iter().map(|&(_, n)| n).collect(),
    )
}

/// Binary vector over `space`; codes outside the space are ignored.
pub fn label_vector<S: AsRef<str>>(codes: &[S], space: &LabelSpace) -> Vec<u8> {
    let mut y = vec![0u8; space.len()];
    for c in codes {
        if let Some(j) = space.index_of(c.as_ref()) {
            y[j] = 1;
        }
    }
    y
}

/// Mean number of distinct codes per note, counting only in-space codes
/// when `space` is given.
pub fn avg_codes_per_note<S: AsRef<str>>(code_sets: &[Vec<S>], space: Option<&LabelSpace>) -> Result<f64> {
    if code_sets.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total: usize = code_sets
        .iter()
        .map(|codes| {
            codes
                .iter()
                .map(AsRef::as_ref)
                .filter(|c| space.map_or(true, |s| s.index_of(c).is_some()))
                .collect::<BTreeSet<&str>>()
                .len()
        })
        .sum();
    Ok(total as f64 / code_sets.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub assignments: BTreeMap<String, Split>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn get(&self, patient: &str) -> Option<Split> {
        self.assignments.get(patient).copied()
    }

    pub fn count(&self, split: Split) -> usize {
        self.assignments.values().filter(|&&s| s == split).count()
    }

    /// CSV `patient_id,split` sorted by patient id.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["patient_id", "split"])
            .map_err(|e| Error::Parse(e.to_string()))?;
        for (p, s) in &self.assignments {
            wr.write_record([p.as_str(), s.as_str()])
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    /// The seed is not stored in the CSV and reads back as 0.
    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut assignments = BTreeMap::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            let (Some(p), Some(s)) = (rec.get(0), rec.get(1)) else {
                return Err(Error::Parse("split row needs patient_id,split".into()));
            };
            if assignments.insert(p.to_string(), s.parse()?).is_some() {
                return Err(Error::Parse(format!("patient {p} assigned twice")));
            }
        }
        Ok(Self {
            assignments,
            seed: 0,
        })
    }
}

/// Shuffles the distinct patients with `seed` and cuts the order at the
/// rounded cumulative ratios (train, dev, test).
pub fn split_by_patient<S: AsRef<str>>(
    patients: &[S],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|&r| !(0.0..=1.0).contains(&r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let distinct: BTreeSet<&str> = patients.iter().map(AsRef::as_ref).collect();
    let mut order: Vec<&str> = distinct.into_iter().collect();
    let mut rng = rng_from_seed(seed);
    order.shuffle(&mut rng);
    let n = order.len();
    let cut1 = ((a * n as f64).round() as usize).min(n);
    let cut2 = (((a + b) * n as f64).round() as usize).clamp(cut1, n);
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let s = if i < cut1 {
                Split::Train
            } else if i < cut2 {
                Split::Dev
            } else {
                Split::Test
            };
            (p.to_string(), s)
        })
        .collect();
    Ok(SplitAssignment { assignments, seed })
}

pub const PAPER_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);
