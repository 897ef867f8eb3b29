//! Text pipeline: tokenization, dataset parsing, corpus filtering, dataset
//! splitting and masked-batch construction.
//!
//! Every operation here is a pure function of its inputs and an explicit
//! seed, so batches and splits are reproducible and safe to build in
//! parallel.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::TokenBatch;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    pub line: usize,
    pub message: String,
}

/// Every malformed line of a file, collected so nothing is silently dropped.
#[derive(Debug)]
pub struct ParseReport {
    pub file: String,
    pub issues: Vec<LineIssue>,
}

impl fmt::Display for ParseReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} malformed line(s)", self.file, self.issues.len())?;
        if let Some(first) = self.issues.first() {
            write!(f, " (line {}: {})", first.line, first.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ParseReport {}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("input error: {0}")]
    Input(String),
    #[error("parse error: {0}")]
    Parse(#[from] ParseReport),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ── Domain records ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentimentLabel {
    Positive,
    Negative,
    Neutral,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 3] = [
        SentimentLabel::Positive,
        SentimentLabel::Negative,
        SentimentLabel::Neutral,
    ];

    pub fn index(self) -> usize {
        match self {
            SentimentLabel::Positive => 0,
            SentimentLabel::Negative => 1,
            SentimentLabel::Neutral => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Positive => "positive",
            SentimentLabel::Negative => "negative",
            SentimentLabel::Neutral => "neutral",
        }
    }
}

impl std::str::FromStr for SentimentLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "positive" => Ok(SentimentLabel::Positive),
            "negative" => Ok(SentimentLabel::Negative),
            "neutral" => Ok(SentimentLabel::Neutral),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Annotator agreement level carried by each labeled sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Agreement {
    #[serde(rename = "50")]
    P50,
    #[serde(rename = "66")]
    P66,
    #[serde(rename = "75")]
    P75,
    #[serde(rename = "100")]
    P100,
}

impl Agreement {
    pub const ALL: [Agreement; 4] = [
        Agreement::P50,
        Agreement::P66,
        Agreement::P75,
        Agreement::P100,
    ];

    pub fn percent(self) -> u8 {
        match self {
            Agreement::P50 => 50,
            Agreement::P66 => 66,
            Agreement::P75 => 75,
            Agreement::P100 => 100,
        }
    }

    pub fn from_percent(p: u8) -> Option<Self> {
        match p {
            50 => Some(Agreement::P50),
            66 => Some(Agreement::P66),
            75 => Some(Agreement::P75),
            100 => Some(Agreement::P100),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub text: String,
    pub label: SentimentLabel,
    pub agreement: Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionExample {
    pub text: String,
    pub score: f64,
    /// Financial entity the score targets; carried through, unused by the model.
    pub target_entity: String,
}

/// A plain-text document: named, one sentence per line.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub name: String,
    pub sentences: Vec<String>,
}

// ── Tokenizer and vocabulary ─────────────────────────────────────────

/// Lowercase and split on whitespace and punctuation boundaries; each
/// punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                current.push(lc);
            }
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Ordered token-to-id map with the five fixed special tokens up front.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(content_tokens: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(content_tokens);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id for a token, falling back to [UNK].
    pub fn lookup(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Content tokens of an encoded sequence, specials stripped.
    pub fn decode_content(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != CLS_ID && id != SEP_ID)
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .cloned()
                    .unwrap_or_else(|| "[UNK]".into())
            })
            .collect()
    }
}

/// Build a vocabulary from the `size - 5` most frequent corpus tokens,
/// frequency ties broken lexicographically.
pub fn build_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    size: usize,
) -> Result<Vocabulary, DataError> {
    if size <= SPECIAL_TOKENS.len() {
        return Err(DataError::Input(format!(
            "vocabulary size {size} leaves no room beyond {} special tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut saw_any = false;
    for sentence in corpus {
        saw_any = true;
        for token in tokenize(sentence) {
            *counts.entry(token).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(DataError::Input("empty corpus".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic, and the sort is stable, so equal
    // counts keep lexicographic order.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(size - SPECIAL_TOKENS.len());
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

/// Encode one sentence: [CLS] first, [SEP] after the last content token,
/// content head-truncated to `max_len - 2`, padded with [PAD].
pub fn tokenize_encode(
    vocab: &Vocabulary,
    text: &str,
    max_len: usize,
) -> Result<(Vec<u32>, Vec<u8>), DataError> {
    if max_len < 3 {
        return Err(DataError::Input(format!("max_len {max_len} below 3")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    for token in tokenize(text).into_iter().take(max_len - 2) {
        ids.push(vocab.lookup(&token));
    }
    ids.push(SEP_ID);
    let real = ids.len();
    ids.resize(max_len, PAD_ID);
    let mut mask = vec![0u8; max_len];
    mask[..real].fill(1);
    Ok((ids, mask))
}

/// Batch-encode sentences, padding to the longest sequence in the batch
/// (capped at `max_len`).
pub fn encode_batch(
    vocab: &Vocabulary,
    texts: &[&str],
    max_len: usize,
) -> Result<TokenBatch, DataError> {
    if texts.is_empty() {
        return Err(DataError::Input("empty batch".into()));
    }
    if max_len < 3 {
        return Err(DataError::Input(format!("max_len {max_len} below 3")));
    }
    let longest = texts
        .iter()
        .map(|t| tokenize(t).len() + 2)
        .max()
        .unwrap_or(3);
    let seq = longest.clamp(3, max_len);
    let mut batch = TokenBatch::new(texts.len(), seq);
    for (row, text) in texts.iter().enumerate() {
        let (ids, mask) = tokenize_encode(vocab, text, seq)?;
        batch.token_ids[row * seq..(row + 1) * seq].copy_from_slice(&ids);
        batch.attention_mask[row * seq..(row + 1) * seq].copy_from_slice(&mask);
    }
    Ok(batch)
}

// ── Dataset parsing ──────────────────────────────────────────────────

fn agreement_from_name(name: &str) -> Option<Agreement> {
    if name.contains("AllAgree") {
        Some(Agreement::P100)
    } else if name.contains("75Agree") {
        Some(Agreement::P75)
    } else if name.contains("66Agree") {
        Some(Agreement::P66)
    } else if name.contains("50Agree") {
        Some(Agreement::P50)
    } else {
        None
    }
}

/// Parse a `sentence@label` file. The agreement level comes from the file
/// name (AllAgree/75Agree/66Agree/50Agree convention) and can be overridden
/// per line by a third `@agreement` field; files without a marker default to
/// full agreement. Malformed lines fail the parse with a complete report.
pub fn parse_phrasebank(path: &Path) -> Result<Vec<LabeledSentence>, DataError> {
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_default();
    let default_agreement = agreement_from_name(&file_name).unwrap_or(Agreement::P100);
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        match parse_phrasebank_line(line, default_agreement) {
            Ok(record) => records.push(record),
            Err(message) => issues.push(LineIssue {
                line: i + 1,
                message,
            }),
        }
    }
    if !issues.is_empty() {
        return Err(DataError::Parse(ParseReport {
            file: path.display().to_string(),
            issues,
        }));
    }
    Ok(records)
}

fn parse_phrasebank_line(
    line: &str,
    default_agreement: Agreement,
) -> Result<LabeledSentence, String> {
    let mut two = line.rsplitn(2, '@');
    let last = two.next().unwrap_or_default();
    let head = two
        .next()
        .ok_or_else(|| "missing '@' separator".to_string())?;
    // Plain "sentence@label"; any extra '@' belongs to the sentence.
    if let Ok(label) = last.parse::<SentimentLabel>() {
        return Ok(LabeledSentence {
            text: head.trim().to_string(),
            label,
            agreement: default_agreement,
        });
    }
    // Otherwise the trailing field must be a sidecar agreement column.
    let agreement = last
        .trim()
        .parse::<u8>()
        .ok()
        .and_then(Agreement::from_percent)
        .ok_or_else(|| format!("unknown label {:?}", last.trim()))?;
    let mut inner = head.rsplitn(2, '@');
    let label_field = inner.next().unwrap_or_default();
    let text = inner
        .next()
        .ok_or_else(|| "missing label field before agreement column".to_string())?;
    let label = label_field.parse::<SentimentLabel>()?;
    Ok(LabeledSentence {
        text: text.trim().to_string(),
        label,
        agreement,
    })
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FiqaRecord {
    text: String,
    score: f64,
    target: String,
}

/// Parse a FiQA-style JSON array of `{text, score, target}` objects and
/// validate the score bounds.
pub fn parse_fiqa(path: &Path) -> Result<Vec<RegressionExample>, DataError> {
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let raw: Vec<FiqaRecord> = serde_json::from_str(&content).map_err(|e| {
        DataError::Parse(ParseReport {
            file: path.display().to_string(),
            issues: vec![LineIssue {
                line: e.line(),
                message: e.to_string(),
            }],
        })
    })?;
    let mut records = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        if !r.score.is_finite() || !(-1.0..=1.0).contains(&r.score) {
            return Err(DataError::Validation(format!(
                "record {i}: score {} outside [-1, 1]",
                r.score
            )));
        }
        records.push(RegressionExample {
            text: r.text,
            score: r.score,
            target_entity: r.target,
        });
    }
    Ok(records)
}

/// Read a corpus directory: every regular file is a document, one sentence
/// per line. Files are ordered by name for determinism.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<Document>, DataError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut docs = Vec::with_capacity(paths.len());
    for path in paths {
        let content = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let sentences: Vec<String> = content
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        docs.push(Document {
            name: path
                .file_name()
                .map(|n| n.to_string_lossy().to_string())
                .unwrap_or_default(),
            sentences,
        });
    }
    Ok(docs)
}

/// One keyword per line; blank lines ignored.
pub fn read_keywords(path: &Path) -> Result<Vec<String>, DataError> {
    let content = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(content
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub kept: usize,
    pub total: usize,
}

/// Keep a document iff it contains at least one keyword as a whole token,
/// case-insensitively. "profitable" does not match keyword "profit".
pub fn filter_corpus(
    documents: &[Document],
    keywords: &[String],
) -> Result<(Vec<Document>, FilterStats), DataError> {
    if keywords.is_empty() {
        return Err(DataError::Input("keyword list is empty".into()));
    }
    let needles: Vec<String> = keywords.iter().map(|k| k.to_lowercase()).collect();
    let mut kept = Vec::new();
    for doc in documents {
        let hit = doc.sentences.iter().any(|s| {
            let tokens = tokenize(s);
            tokens.iter().any(|t| needles.iter().any(|n| n == t))
        });
        if hit {
            kept.push(doc.clone());
        }
    }
    let stats = FilterStats {
        kept: kept.len(),
        total: documents.len(),
    };
    Ok((kept, stats))
}

// ── Splits ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then floor(0.2 N) test, floor(0.2 remaining) validation,
/// rest train. The partition is disjoint and exhaustive.
pub fn split_dataset<T: Clone>(records: &[T], seed: u64) -> Result<Splits<T>, DataError> {
    if records.len() < 5 {
        return Err(DataError::Input(format!(
            "{} records, need at least 5",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_test = records.len() / 5;
    let n_val = (records.len() - n_test) / 5;
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(Splits {
        test: pick(&order[..n_test]),
        validation: pick(&order[n_test..n_test + n_val]),
        train: pick(&order[n_test + n_val..]),
    })
}

/// Label-stratified variant: the same 20%/20% arithmetic applied per class,
/// leftovers to train.
pub fn split_dataset_stratified(
    records: &[LabeledSentence],
    seed: u64,
) -> Result<Splits<LabeledSentence>, DataError> {
    if records.len() < 5 {
        return Err(DataError::Input(format!(
            "{} records, need at least 5",
            records.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for label in SentimentLabel::ALL {
        let mut class: Vec<LabeledSentence> = records
            .iter()
            .filter(|r| r.label == label)
            .cloned()
            .collect();
        class.shuffle(&mut rng);
        let n_test = class.len() / 5;
        let n_val = (class.len() - n_test) / 5;
        splits.test.extend_from_slice(&class[..n_test]);
        splits
            .validation
            .extend_from_slice(&class[n_test..n_test + n_val]);
        splits.train.extend_from_slice(&class[n_test + n_val..]);
    }
    Ok(splits)
}

/// K train/test pairs; fold sizes differ by at most one and every record is
/// in exactly one test fold.
pub fn kfold_split<T: Clone>(
    records: &[T],
    k: usize,
    seed: u64,
) -> Result<Vec<(Vec<T>, Vec<T>)>, DataError> {
    if k == 0 || k > records.len() {
        return Err(DataError::Input(format!(
            "k = {k} for {} records",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = records.len() / k;
    let extra = records.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        folds.push(&order[start..start + size]);
        start += size;
    }
    let mut out = Vec::with_capacity(k);
    for f in 0..k {
        let test: Vec<T> = folds[f].iter().map(|&i| records[i].clone()).collect();
        let train: Vec<T> = folds
            .iter()
            .enumerate()
            .filter(|&(g, _)| g != f)
            .flat_map(|(_, fold)| fold.iter().map(|&i| records[i].clone()))
            .collect();
        out.push((train, test));
    }
    Ok(out)
}

// ── Masked batches ───────────────────────────────────────────────────

/// Token batch plus masked-language-model bookkeeping, optionally with
/// next-sentence labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub tokens: TokenBatch,
    /// (row, position) pairs; never [CLS], [SEP] or [PAD].
    pub masked_positions: Vec<(usize, usize)>,
    /// Original token ids at the masked positions, in the same order.
    pub masked_targets: Vec<u32>,
    pub is_next: Option<Vec<bool>>,
}

fn mask_count(maskable: usize, rate: f64) -> usize {
    if maskable == 0 {
        0
    } else {
        ((maskable as f64 * rate).round() as usize).max(1)
    }
}

fn apply_masking(
    tokens: &mut TokenBatch,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<(usize, usize)>, Vec<u32>) {
    let seq = tokens.seq;
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for row in 0..tokens.batch {
        let slots: Vec<usize> = (0..seq)
            .filter(|&j| {
                let id = tokens.token_ids[row * seq + j];
                id != PAD_ID && id != CLS_ID && id != SEP_ID
            })
            .collect();
        let take = mask_count(slots.len(), rate);
        let mut chosen = slots;
        chosen.shuffle(rng);
        chosen.truncate(take);
        chosen.sort_unstable();
        for j in chosen {
            positions.push((row, j));
            targets.push(tokens.token_ids[row * seq + j]);
            tokens.token_ids[row * seq + j] = MASK_ID;
        }
    }
    (positions, targets)
}

/// Mask `max(1, round(rate * maskable))` content positions per sequence,
/// recording the originals as prediction targets.
pub fn make_mlm_batch(
    sentences: &[&str],
    vocab: &Vocabulary,
    max_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch, DataError> {
    if !(0.0..1.0).contains(&mask_rate) || mask_rate == 0.0 {
        return Err(DataError::Input(format!(
            "mask rate {mask_rate} outside (0, 1)"
        )));
    }
    let mut tokens = encode_batch(vocab, sentences, max_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (masked_positions, masked_targets) = apply_masking(&mut tokens, mask_rate, &mut rng);
    Ok(MaskedBatch {
        tokens,
        masked_positions,
        masked_targets,
        is_next: None,
    })
}

/// Build sentence pairs for next-sentence prediction: half true consecutive
/// pairs, half with a random second sentence from another document. Segment
/// ids flip after the first [SEP]; MLM masking is applied on top.
pub fn make_nsp_batch(
    documents: &[Document],
    vocab: &Vocabulary,
    num_pairs: usize,
    max_len: usize,
    mask_rate: f64,
    seed: u64,
) -> Result<MaskedBatch, DataError> {
    let usable: Vec<&Document> = documents
        .iter()
        .filter(|d| d.sentences.len() >= 2)
        .collect();
    if usable.len() < 2 {
        return Err(DataError::Input(format!(
            "need at least 2 documents with 2+ sentences, found {}",
            usable.len()
        )));
    }
    if num_pairs == 0 {
        return Err(DataError::Input("num_pairs must be positive".into()));
    }
    if max_len < 5 {
        return Err(DataError::Input(format!(
            "max_len {max_len} too short for a sentence pair"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pairs: Vec<(Vec<u32>, Vec<u32>, bool)> = Vec::with_capacity(num_pairs);
    let mut longest = 0usize;
    for _ in 0..num_pairs {
        let d = rng.gen_range(0..usable.len());
        let doc = usable[d];
        let j = rng.gen_range(0..doc.sentences.len() - 1);
        let first = &doc.sentences[j];
        let is_next = rng.gen_bool(0.5);
        let second = if is_next {
            doc.sentences[j + 1].clone()
        } else {
            let mut other = rng.gen_range(0..usable.len() - 1);
            if other >= d {
                other += 1;
            }
            let od = usable[other];
            od.sentences[rng.gen_range(0..od.sentences.len())].clone()
        };
        let mut a: Vec<u32> = tokenize(first).iter().map(|t| vocab.lookup(t)).collect();
        let mut b: Vec<u32> = tokenize(&second).iter().map(|t| vocab.lookup(t)).collect();
        // Trim the longer side first until the pair fits.
        while a.len() + b.len() + 3 > max_len {
            if a.len() >= b.len() {
                a.pop();
            } else {
                b.pop();
            }
        }
        longest = longest.max(a.len() + b.len() + 3);
        pairs.push((a, b, is_next));
    }

    let seq = longest.max(5);
    let mut tokens = TokenBatch::new(pairs.len(), seq);
    let mut labels = Vec::with_capacity(pairs.len());
    for (row, (a, b, is_next)) in pairs.iter().enumerate() {
        let base = row * seq;
        let mut pos = 0;
        tokens.token_ids[base] = CLS_ID;
        pos += 1;
        for &id in a {
            tokens.token_ids[base + pos] = id;
            pos += 1;
        }
        tokens.token_ids[base + pos] = SEP_ID;
        let first_sep = pos;
        pos += 1;
        for &id in b {
            tokens.token_ids[base + pos] = id;
            pos += 1;
        }
        tokens.token_ids[base + pos] = SEP_ID;
        pos += 1;
        tokens.attention_mask[base..base + pos].fill(1);
        for j in first_sep + 1..pos {
            tokens.segment_ids[base + j] = 1;
        }
        labels.push(*is_next);
    }

    let (masked_positions, masked_targets) = apply_masking(&mut tokens, mask_rate, &mut rng);
    Ok(MaskedBatch {
        tokens,
        masked_positions,
        masked_targets,
        is_next: Some(labels),
    })
}
