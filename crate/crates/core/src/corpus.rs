//! Text normalization, vocabulary construction, id encoding and chunking.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const NUM_SPECIALS: usize = 5;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Marker emitted by [`normalize_text_with_breaks`] for line breaks. Never
/// part of a vocabulary.
pub const NEWLINE: &str = "\n";

/// One clinical document as read from the notes JSON-lines file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub note_id: String,
    pub patient_id: String,
    /// ISO-8601; notes of one patient are ordered by comparing these strings.
    pub timestamp: String,
    pub category: String,
    pub text: String,
    pub codes: Vec<String>,
}

pub fn read_notes(reader: impl BufRead) -> Result<Vec<Note>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let note: Note = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("notes line {}: {e}", i + 1)))?;
        out.push(note);
    }
    Ok(out)
}

pub fn write_notes(mut w: impl Write, notes: &[Note]) -> Result<()> {
    for n in notes {
        serde_json::to_writer(&mut w, n)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn push_digits(word: &mut String, run: usize) {
    word.extend(std::iter::repeat('n').take(run.min(4)));
}

fn tokenize(raw: &str, keep_breaks: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut digits = 0usize;
    let flush = |word: &mut String, digits: &mut usize, out: &mut Vec<String>| {
        if *digits > 0 {
            push_digits(word, *digits);
            *digits = 0;
        }
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for ch in raw.chars() {
        if ch.is_ascii_digit() {
            digits += 1;
        } else if ch.is_alphanumeric() {
            if digits > 0 {
                push_digits(&mut word, digits);
                digits = 0;
            }
            word.extend(ch.to_lowercase());
        } else {
            flush(&mut word, &mut digits, &mut out);
            if ch == '\n' {
                if keep_breaks {
                    out.push(NEWLINE.to_string());
                }
            } else if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    flush(&mut word, &mut digits, &mut out);
    out
}

/// Lowercases, splits on whitespace, isolates every punctuation character as
/// its own token and rewrites each digit run as `n` repeated `min(len, 4)`.
pub fn normalize_text(raw: &str) -> Vec<String> {
    tokenize(raw, false)
}

/// [`normalize_text`] that additionally emits [`NEWLINE`] for line breaks.
pub fn normalize_text_with_breaks(raw: &str) -> Vec<String> {
    tokenize(raw, true)
}

/// Token frequencies; partial counts from disjoint corpus shards merge
/// with [`TokenCounts::merge`] in any order to the same result.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenCounts(HashMap<String, u64>);

impl TokenCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<S: AsRef<str>>(&mut self, tokens: impl IntoIterator<Item = S>) {
        for t in tokens {
            let t = t.as_ref();
            if t == NEWLINE {
                continue;
            }
            *self.0.entry(t.to_string()).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &TokenCounts) {
        for (k, v) in &other.0 {
            *self.0.entry(k.clone()).or_insert(0) += v;
        }
    }

    pub fn distinct(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
}

/// Specials plus the `budget` most frequent tokens of `tokens`; frequency
/// ties go to the lexicographically smaller token.
pub fn build_vocab<S: AsRef<str>>(tokens: impl IntoIterator<Item = S>, budget: usize) -> Result<Vocab> {
    let mut counts = TokenCounts::new();
    counts.add(tokens);
    Vocab::from_counts(&counts, budget)
}

impl Vocab {
    pub fn from_counts(counts: &TokenCounts, budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidConfig("vocabulary budget must be >= 1".into()));
        }
        let mut ranked: Vec<(&String, u64)> = counts
            .0
            .iter()
            .filter(|(t, _)| !SPECIAL_TOKENS.contains(&t.as_str()))
            .map(|(t, &c)| (t, c))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(budget);
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0u64; NUM_SPECIALS];
        for (t, c) in ranked {
            tokens.push(t.clone());
            freq.push(c);
        }
        Ok(Self::from_parts(tokens, freq))
    }

    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            tokens,
            index,
            counts,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts.get(id).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids that are not specials.
    pub fn regular_ids(&self) -> std::ops::Range<usize> {
        NUM_SPECIALS..self.len()
    }

    /// Serialized form: a header line, the specials one per line, then one
    /// `token<TAB>count` line per regular token in id order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(
            w,
            "#vocab specials={} tokens={}",
            NUM_SPECIALS,
            self.len() - NUM_SPECIALS
        )?;
        for s in &self.tokens[..NUM_SPECIALS] {
            writeln!(w, "{s}")?;
        }
        for (t, c) in self.tokens[NUM_SPECIALS..]
            .iter()
            .zip(&self.counts[NUM_SPECIALS..])
        {
            writeln!(w, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 tokens")
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty vocab file".into()))??;
        let field = |key: &str| -> Result<usize> {
            header
                .split_whitespace()
                .find_map(|f| f.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse(format!("vocab header missing {key}")))
        };
        if !header.starts_with("#vocab") || field("specials=")? != NUM_SPECIALS {
            return Err(Error::Parse(format!("bad vocab header {header:?}")));
        }
        let n = field("tokens=")?;
        let mut tokens = Vec::with_capacity(NUM_SPECIALS + n);
        let mut counts = Vec::with_capacity(NUM_SPECIALS + n);
        for expected in SPECIAL_TOKENS {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse("truncated vocab specials".into()))??;
            if line != expected {
                return Err(Error::Parse(format!("expected special {expected}, got {line:?}")));
            }
            tokens.push(line);
            counts.push(0);
        }
        for line in lines {
            let line = line?;
            let (t, c) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("vocab line {line:?}")))?;
            let c: u64 = c
                .parse()
                .map_err(|_| Error::Parse(format!("vocab count {c:?}")))?;
            tokens.push(t.to_string());
            counts.push(c);
        }
        if tokens.len() != NUM_SPECIALS + n {
            return Err(Error::Parse(format!(
                "vocab header says {n} tokens, found {}",
                tokens.len() - NUM_SPECIALS
            )));
        }
        let v = Self::from_parts(tokens, counts);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Parse("duplicate vocab token".into()));
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedNote {
    pub note_id: String,
    pub token_strings: Vec<String>,
    pub token_ids: Vec<usize>,
    pub oov_count: usize,
}

pub fn encode(note_id: impl Into<String>, tokens: &[String], vocab: &Vocab) -> TokenizedNote {
    let token_ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
    let oov_count = token_ids.iter().filter(|&&i| i == UNK).count();
    TokenizedNote {
        note_id: note_id.into(),
        token_strings: tokens.to_vec(),
        token_ids,
        oov_count,
    }
}

pub fn mean_oov_per_note(corpus: &[TokenizedNote]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(corpus.iter().map(|n| n.oov_count as f64).sum::<f64>() / corpus.len() as f64)
}

/// A fixed-length encoder window.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub segments: Vec<u8>,
    pub origin: (String, usize),
}

pub const MIN_CHUNK_LEN: usize = 8;

impl Chunk {
    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, padded to `max_len`.
    pub fn from_segments(
        a: &[usize],
        b: Option<&[usize]>,
        max_len: usize,
        origin: (String, usize),
    ) -> Result<Self> {
        let used = a.len() + 2 + b.map_or(0, |b| b.len() + 1);
        if used > max_len {
            return Err(Error::OutOfRange(format!("{used} tokens exceed max_len {max_len}")));
        }
        let mut ids = Vec::with_capacity(max_len);
        let mut segments = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend_from_slice(a);
        ids.push(SEP);
        segments.resize(ids.len(), 0);
        if let Some(b) = b {
            ids.extend_from_slice(b);
            ids.push(SEP);
            segments.resize(ids.len(), 1);
        }
        let mut mask = vec![1u8; ids.len()];
        ids.resize(max_len, PAD);
        mask.resize(max_len, 0);
        segments.resize(max_len, 0);
        Ok(Self {
            ids,
            mask,
            segments,
            origin,
        })
    }

    /// Single-segment chunk of the first `max_len - 2` ids.
    pub fn truncated(ids: &[usize], max_len: usize, origin: (String, usize)) -> Result<Self> {
        let n = ids.len().min(max_len.saturating_sub(2));
        Self::from_segments(&ids[..n], None, max_len, origin)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of positions with mask 1.
    pub fn active_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    /// The same chunk without trailing padding.
    pub fn trimmed(&self) -> Chunk {
        let n = self.active_len();
        Chunk {
            ids: self.ids[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
            segments: self.segments[..n].to_vec(),
            origin: self.origin.clone(),
        }
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }

    /// Unmasked positions holding non-special ids.
    pub fn content_mask(&self) -> Vec<bool> {
        self.ids
            .iter()
            .zip(&self.mask)
            .map(|(&id, &m)| m == 1 && id >= NUM_SPECIALS)
            .collect()
    }

    pub fn content_positions(&self) -> Vec<usize> {
        self.content_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    /// Ids of every segment in order, without `[CLS]`, `[SEP]` or padding.
    pub fn content_ids(&self) -> Vec<usize> {
        let active = self.active_len();
        self.ids[..active]
            .iter()
            .enumerate()
            .filter(|&(i, &id)| i != 0 && id != SEP)
            .map(|(_, &id)| id)
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.ids.len();
        if self.mask.len() != n || self.segments.len() != n {
            return Err(Error::shape("chunk field lengths differ"));
        }
        if self.ids.first() != Some(&CLS) {
            return Err(Error::Parse("chunk does not start with [CLS]".into()));
        }
        let active = self.active_len();
        if self.mask[active..].iter().any(|&m| m != 0) {
            return Err(Error::Parse("mask is not a prefix of ones".into()));
        }
        if self.ids[active..].iter().any(|&id| id != PAD) {
            return Err(Error::Parse("masked position holds a non-PAD id".into()));
        }
        if active < 2 || self.ids[active - 1] != SEP {
            return Err(Error::Parse("last segment not terminated by [SEP]".into()));
        }
        // every segment run ends with exactly one SEP
        for i in 1..active {
            let seg_ends = i + 1 == active || self.segments[i + 1] != self.segments[i];
            let is_sep = self.ids[i] == SEP;
            if seg_ends != is_sep {
                return Err(Error::Parse(format!("misplaced [SEP] at {i}")));
            }
        }
        Ok(())
    }
}

/// Splits a note into consecutive `max_len - 2` windows wrapped as
/// `[CLS] ... [SEP]`. An empty note still yields one chunk.
pub fn chunk_note(note: &TokenizedNote, max_len: usize) -> Result<Vec<Chunk>> {
    if max_len < MIN_CHUNK_LEN {
        return Err(Error::InvalidConfig(format!(
            "max_len {max_len} below {MIN_CHUNK_LEN}"
        )));
    }
    let window = max_len - 2;
    if note.token_ids.is_empty() {
        return Ok(vec![Chunk::from_segments(
            &[],
            None,
            max_len,
            (note.note_id.clone(), 0),
        )?]);
    }
    note.token_ids
        .chunks(window)
        .enumerate()
        .map(|(i, w)| Chunk::from_segments(w, None, max_len, (note.note_id.clone(), i)))
        .collect()
}

fn is_sentence_end(t: &str) -> bool {
    matches!(t, "." | "!" | "?")
}

/// Splits at `.`, `!`, `?` (kept on the preceding sentence) and at
/// [`NEWLINE`] markers (dropped). Empty sentences are dropped.
pub fn sentence_split<S: AsRef<str>>(tokens: &[S]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for t in tokens {
        let t = t.as_ref();
        if t == NEWLINE {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        cur.push(t.to_string());
        if is_sentence_end(t) {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Keeps notes of at least 50 characters whose category is not excluded.
pub fn note_filter(raw: &str, category: &str, excluded: &BTreeSet<String>) -> bool {
    raw.chars().count() >= MIN_NOTE_CHARS && !excluded.contains(category)
}

pub const MIN_NOTE_CHARS: usize = 50;
