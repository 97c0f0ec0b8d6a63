//! Synthetic corpora: a bigram grammar for pretraining and a planted-keyword
//! multi-label task built on top of it.

use std::collections::{BTreeMap, HashSet};

use notecoder_core::cohort::impute_chronic;
use notecoder_core::corpus::Note;
use notecoder_core::numerics::{derive_seed, rng_from_seed};
use notecoder_core::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

const CONSONANTS: &[u8] = b"bdfghklmnprstv";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_labels: usize,
    /// Grammar words, not counting `.` and trigger words.
    pub num_filler: usize,
    /// Share of filler words whose successor is fixed.
    pub deterministic_fraction: f64,
    pub sentences_per_note: (usize, usize),
    pub words_per_sentence: (usize, usize),
    pub label_rate: (f64, f64),
    pub num_chronic: usize,
    pub max_notes_per_patient: usize,
    /// Probability that a pretraining sentence carries a random trigger phrase.
    pub bigram_trigger_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_labels: 20,
            num_filler: 174,
            deterministic_fraction: 0.5,
            sentences_per_note: (3, 9),
            words_per_sentence: (5, 12),
            label_rate: (0.05, 0.25),
            num_chronic: 2,
            max_notes_per_patient: 3,
            bigram_trigger_rate: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_labels == 0 || self.num_filler < 2 {
            return bad("synthetic corpus needs labels and at least two filler words");
        }
        if self.num_filler + self.num_labels > CONSONANTS.len().pow(2) * VOWELS.len().pow(2) {
            return bad("too many words for the syllable inventory");
        }
        if self.num_chronic > self.num_labels {
            return bad("more chronic codes than labels");
        }
        let (lo, hi) = self.label_rate;
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return bad("label_rate must satisfy 0 <= lo <= hi <= 1");
        }
        for (a, b) in [self.sentences_per_note, self.words_per_sentence] {
            if a == 0 || a > b {
                return bad("length ranges must be non-empty and positive");
            }
        }
        if self.max_notes_per_patient == 0 {
            return bad("max_notes_per_patient must be positive");
        }
        Ok(())
    }
}

/// Vocabulary, grammar and label inventory shared by every generated note.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub filler: Vec<String>,
    pub triggers: Vec<String>,
    pub codes: Vec<String>,
    pub descriptions: Vec<String>,
    pub rates: Vec<f64>,
    pub chronic: Vec<String>,
    /// Filler word (index into `filler`) that always follows each trigger.
    pub companions: Vec<usize>,
    /// Fixed successor (index into `filler`) for deterministic words.
    pub successor: Vec<Option<usize>>,
}

fn syllable(i: usize) -> String {
    let c = CONSONANTS[i / VOWELS.len()] as char;
    let v = VOWELS[i % VOWELS.len()] as char;
    format!("{c}{v}")
}

impl SynthWorld {
    pub fn new(config: SynthConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, &[0x5eed]));
        let n_syll = CONSONANTS.len() * VOWELS.len();
        let mut words: Vec<String> = (0..n_syll * n_syll)
            .map(|k| syllable(k / n_syll) + &syllable(k % n_syll))
            .collect();
        words.shuffle(&mut rng);
        let filler: Vec<String> = words[..config.num_filler].to_vec();
        let triggers: Vec<String> = words[config.num_filler..config.num_filler + config.num_labels]
            .iter()
            .map(|w| format!("x{w}"))
            .collect();
        let m = config.num_labels;
        let codes: Vec<String> = (0..m).map(|j| format!("S{:02}.{}", j / 10, j % 10)).collect();
        let mut pool: Vec<usize> = (0..config.num_filler).collect();
        pool.shuffle(&mut rng);
        let companions: Vec<usize> = (0..config.num_labels).map(|j| pool[j % pool.len()]).collect();
        let descriptions = triggers
            .iter()
            .zip(&companions)
            .map(|(t, &c)| format!("{t} {}", filler[c]))
            .collect();
        let (lo, hi) = config.label_rate;
        let rates = (0..m)
            .map(|j| if m == 1 { lo } else { lo + (hi - lo) * j as f64 / (m - 1) as f64 })
            .collect();
        let chronic = codes[m - config.num_chronic..].to_vec();
        let n_det = (config.num_filler as f64 * config.deterministic_fraction).round() as usize;
        let mut det: Vec<usize> = (0..config.num_filler).collect();
        det.shuffle(&mut rng);
        let det: HashSet<usize> = det[..n_det].iter().copied().collect();
        let successor = (0..config.num_filler)
            .map(|i| det.contains(&i).then(|| rng.random_range(0..config.num_filler)))
            .collect();
        Ok(Self {
            config,
            filler,
            triggers,
            codes,
            descriptions,
            rates,
            chronic,
            companions,
            successor,
        })
    }

    /// `(word, fixed successor)` for every deterministic grammar word.
    pub fn deterministic_pairs(&self) -> Vec<(String, String)> {
        self.successor
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|s| (self.filler[i].clone(), self.filler[s].clone())))
            .collect()
    }

    fn sentence<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let (lo, hi) = self.config.words_per_sentence;
        let len = rng.random_range(lo..=hi);
        let mut cur = rng.random_range(0..self.filler.len());
        let mut out = Vec::with_capacity(len + 1);
        for _ in 0..len {
            out.push(self.filler[cur].clone());
            cur = self.successor[cur].unwrap_or_else(|| rng.random_range(0..self.filler.len()));
        }
        out.push(".".into());
        out
    }

    fn sentences<R: Rng>(&self, rng: &mut R) -> Vec<Vec<String>> {
        let (lo, hi) = self.config.sentences_per_note;
        (0..rng.random_range(lo..=hi)).map(|_| self.sentence(rng)).collect()
    }

    /// Inserts trigger `j` and its companion at a random point of `sentence`
    /// that does not split an earlier phrase.
    fn plant<R: Rng>(&self, sentence: &mut Vec<String>, j: usize, rng: &mut R) {
        let free: Vec<usize> = (0..sentence.len())
            .filter(|&i| i == 0 || !self.triggers.contains(&sentence[i - 1]))
            .collect();
        let at = free[rng.random_range(0..free.len())];
        sentence.insert(at, self.filler[self.companions[j]].clone());
        sentence.insert(at, self.triggers[j].clone());
    }

    fn render(sentences: &[Vec<String>]) -> String {
        sentences
            .iter()
            .map(|s| {
                let (last, body) = s.split_last().expect("non-empty sentence");
                format!("{}{}", body.join(" "), last)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Grammar text with occasional trigger phrases and no labels.
    pub fn bigram_notes(&self, count: usize, prefix: &str, seed: u64) -> Vec<Note> {
        let mut rng = rng_from_seed(seed);
        (0..count)
            .map(|i| {
                let mut s = self.sentences(&mut rng);
                for sent in s.iter_mut() {
                    if rng.random_bool(self.config.bigram_trigger_rate) {
                        let j = rng.random_range(0..self.triggers.len());
                        self.plant(sent, j, &mut rng);
                    }
                }
                Note {
                    note_id: format!("{prefix}{i:06}"),
                    patient_id: format!("{prefix}p{i:06}"),
                    timestamp: format!("2020-01-01T00:00:{:02}", i % 60),
                    category: "progress".into(),
                    text: Self::render(&s),
                    codes: Vec::new(),
                }
            })
            .collect()
    }

    /// Labeled notes. Each label fires independently at its rate; chronic
    /// codes are then propagated within each patient, and only afterwards is
    /// every label's trigger phrase inserted into its notes.
    pub fn planted_notes(&self, count: usize, prefix: &str, seed: u64) -> Result<Vec<Note>> {
        let mut rng = rng_from_seed(seed);
        let chronic: HashSet<String> = self.chronic.iter().cloned().collect();
        let mut notes = Vec::with_capacity(count);
        let mut patient = 0;
        while notes.len() < count {
            let k = rng.random_range(1..=self.config.max_notes_per_patient).min(count - notes.len());
            let mut history: Vec<Note> = (0..k)
                .map(|t| {
                    let codes = self
                        .codes
                        .iter()
                        .zip(&self.rates)
                        .filter_map(|(c, &r)| rng.random_bool(r).then(|| c.clone()))
                        .collect();
                    Note {
                        note_id: format!("{prefix}{:06}", notes.len() + t),
                        patient_id: format!("{prefix}p{patient:05}"),
                        timestamp: format!("2021-{:02}-01T08:00:00", t + 1),
                        category: "progress".into(),
                        text: String::new(),
                        codes,
                    }
                })
                .collect();
            history = impute_chronic(&history, &chronic)?;
            for note in history.iter_mut() {
                let mut s = self.sentences(&mut rng);
                for code in &note.codes {
                    let j = self.codes.iter().position(|c| c == code).expect("known code");
                    let si = rng.random_range(0..s.len());
                    self.plant(&mut s[si], j, &mut rng);
                }
                note.text = Self::render(&s);
            }
            notes.extend(history);
            patient += 1;
        }
        Ok(notes)
    }

    pub fn descriptions_csv(&self) -> String {
        let mut out = String::from("code,description\n");
        for (c, d) in self.codes.iter().zip(&self.descriptions) {
            out.push_str(&format!("{c},{d}\n"));
        }
        out
    }

    pub fn chronic_list(&self) -> String {
        self.chronic.iter().map(|c| format!("{c}\n")).collect()
    }

    pub fn description_map(&self) -> BTreeMap<String, String> {
        self.codes.iter().cloned().zip(self.descriptions.iter().cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use notecoder_core::corpus::normalize_text;

    #[test]
    fn planted_triggers_present() {
        let w = SynthWorld::new(SynthConfig::default(), 1).unwrap();
        assert_eq!(w.filler.len() + w.triggers.len() + 1 + 5, 200);
        let notes = w.planted_notes(300, "t", 2).unwrap();
        assert_eq!(notes.len(), 300);
        for n in &notes {
            let toks = normalize_text(&n.text);
            assert!(n.text.chars().count() >= 50);
            for (j, c) in w.codes.iter().enumerate() {
                assert_eq!(n.codes.contains(c), toks.contains(&w.triggers[j]), "{}", n.note_id);
            }
            for (i, t) in toks.iter().enumerate() {
                if let Some(j) = w.triggers.iter().position(|x| x == t) {
                    assert_eq!(toks[i + 1], w.filler[w.companions[j]]);
                }
            }
        }
        assert_eq!(notes, w.planted_notes(300, "t", 2).unwrap());
    }

    #[test]
    fn label_rates_within_three_sigma() {
        let w = SynthWorld::new(SynthConfig::default(), 1).unwrap();
        let n = 4000;
        let notes = w.planted_notes(n, "r", 5).unwrap();
        for (j, c) in w.codes.iter().enumerate() {
            if w.chronic.contains(c) {
                continue;
            }
            let p = w.rates[j];
            let k = notes.iter().filter(|x| x.codes.contains(c)).count() as f64;
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((k - n as f64 * p).abs() <= 3.0 * sigma, "{c}: {k} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn grammar_is_followed() {
        let w = SynthWorld::new(SynthConfig::default(), 3).unwrap();
        let succ: BTreeMap<String, String> = w.deterministic_pairs().into_iter().collect();
        assert_eq!(succ.len(), 87);
        for note in w.bigram_notes(50, "b", 4) {
            for line in note.text.lines() {
                let raw = normalize_text(line);
                let toks: Vec<String> = raw
                    .iter()
                    .enumerate()
                    .filter(|&(i, t)| !t.starts_with('x') && (i == 0 || !raw[i - 1].starts_with('x')))
                    .map(|(_, t)| t.clone())
                    .collect();
                for pair in toks.windows(2) {
                    if let Some(next) = succ.get(&pair[0]) {
                        if pair[1] != "." {
                            assert_eq!(&pair[1], next);
                        }
                    }
                }
            }
        }
    }
}
