//! Reading notes and turning them into model inputs.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use notecoder_core::cohort::{
    filter_labels, impute_all, label_vector, read_code_list, read_descriptions, split_by_patient, LabelSpace, Split,
    SplitAssignment,
};
use notecoder_core::corpus::{
    normalize_text, normalize_text_with_breaks, note_filter, read_notes, sentence_split, Note, TokenCounts, Vocab,
};
use notecoder_core::heads::LabeledNote;
use notecoder_core::pretrain::PretrainDoc;
use notecoder_core::{Error, Result};

use crate::config::RunConfig;

pub fn load_notes(path: &Path) -> Result<Vec<Note>> {
    read_notes(BufReader::new(File::open(path)?))
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    Vocab::read_from(BufReader::new(File::open(path)?))
}

pub fn load_splits(path: &Path) -> Result<SplitAssignment> {
    SplitAssignment::read_csv(File::open(path)?)
}

/// Drops short and excluded-category notes.
pub fn filter_notes(notes: Vec<Note>, excluded: &[String]) -> Vec<Note> {
    let excluded: BTreeSet<String> = excluded.iter().cloned().collect();
    notes
        .into_iter()
        .filter(|n| note_filter(&n.text, &n.category, &excluded))
        .collect()
}

pub fn count_tokens<'a>(notes: impl IntoIterator<Item = &'a Note>) -> TokenCounts {
    let mut counts = TokenCounts::new();
    for n in notes {
        counts.add(normalize_text(&n.text));
    }
    counts
}

pub fn labeled_notes<'a>(notes: impl IntoIterator<Item = &'a Note>, vocab: &Vocab, space: &LabelSpace) -> Vec<LabeledNote> {
    notes
        .into_iter()
        .map(|n| LabeledNote {
            note_id: n.note_id.clone(),
            token_ids: normalize_text(&n.text).iter().map(|t| vocab.id(t)).collect(),
            labels: label_vector(&n.codes, space),
        })
        .collect()
}

pub fn pretrain_docs<'a>(notes: impl IntoIterator<Item = &'a Note>, vocab: &Vocab) -> Vec<PretrainDoc> {
    notes
        .into_iter()
        .map(|n| PretrainDoc {
            note_id: n.note_id.clone(),
            sentences: sentence_split(&normalize_text_with_breaks(&n.text))
                .into_iter()
                .map(|s| s.iter().map(|t| vocab.id(t)).collect())
                .collect(),
        })
        .collect()
}

/// Labeled corpus after filtering, chronic imputation and patient split.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub notes: Vec<Note>,
    pub splits: SplitAssignment,
    pub space: LabelSpace,
}

impl Cohort {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let notes = filter_notes(load_notes(cfg.require("notes", &cfg.notes)?)?, &cfg.excluded_categories);
        let chronic = match &cfg.chronic {
            Some(p) => read_code_list(BufReader::new(File::open(p)?))?,
            None => HashSet::new(),
        };
        let splits = match &cfg.splits {
            Some(p) => load_splits(p)?,
            None => {
                let patients: Vec<&str> = notes.iter().map(|n| n.patient_id.as_str()).collect();
                split_by_patient(&patients, cfg.split_ratios, cfg.seed)?
            }
        };
        let descriptions = match &cfg.descriptions {
            Some(p) => read_descriptions(File::open(p)?)?,
            None => Default::default(),
        };
        Self::build(notes, &chronic, splits, cfg.min_label_count, &descriptions)
    }

    pub fn build(
        notes: Vec<Note>,
        chronic: &HashSet<String>,
        splits: SplitAssignment,
        min_label_count: u64,
        descriptions: &std::collections::HashMap<String, String>,
    ) -> Result<Self> {
        if notes.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(n) = notes.iter().find(|n| splits.get(&n.patient_id).is_none()) {
            return Err(Error::Parse(format!("patient {} has no split assignment", n.patient_id)));
        }
        let notes = impute_all(&notes, chronic)?;
        let train_codes: Vec<Vec<String>> = notes
            .iter()
            .filter(|n| splits.get(&n.patient_id) == Some(Split::Train))
            .map(|n| n.codes.clone())
            .collect();
        let mut space = filter_labels(&train_codes, min_label_count)?;
        if space.is_empty() {
            return Err(Error::Empty(format!("no code occurs in more than {min_label_count} training notes")));
        }
        let missing = space.set_descriptions(descriptions);
        if !missing.is_empty() {
            log::warn!("{} labels have no description", missing.len());
        }
        space.set_chronic(chronic);
        Ok(Self { notes, splits, space })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Note> {
        self.notes
            .iter()
            .filter(move |n| self.splits.get(&n.patient_id) == Some(split))
    }

    pub fn labeled(&self, split: Split, vocab: &Vocab) -> Vec<LabeledNote> {
        labeled_notes(self.split(split), vocab, &self.space)
    }
}
