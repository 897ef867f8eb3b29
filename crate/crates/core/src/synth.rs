//! Deterministic synthetic financial-news grammar.
//!
//! The experiments need corpora whose difficulty is controlled: a masked
//! token must be predictable from context, the sentiment label must require
//! composing a polarity word with an optional negation (so a frozen random
//! encoder cannot solve it), and the regression score must be a smooth
//! function of the text. Everything here is a pure function of the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

use crate::data::{Agreement, Document, LabeledSentence, RegressionExample, SentimentLabel};

const SUBJECTS: [&str; 10] = [
    "company", "bank", "firm", "group", "insurer", "retailer", "miner", "airline", "startup",
    "supplier",
];
const POSITIVE_VERBS: [&str; 5] = ["lifted", "raised", "grew", "boosted", "beat"];
const NEGATIVE_VERBS: [&str; 5] = ["cut", "missed", "lost", "slashed", "trimmed"];
const NEUTRAL_VERBS: [&str; 5] = ["reported", "announced", "published", "reviewed", "held"];
const METRICS: [&str; 6] = [
    "profit", "revenue", "sales", "earnings", "guidance", "margins",
];
const TAILS: [&str; 5] = ["this quarter", "last year", "in march", "again", "overseas"];
const REGIONS: [&str; 4] = ["europe", "asia", "america", "africa"];

struct Pick {
    subject: usize,
    verb_kind: u8,
    verb: usize,
    metric: usize,
    negated: bool,
    intensified: bool,
    tail: Option<usize>,
}

fn render(p: &Pick) -> String {
    let verb = match p.verb_kind {
        0 => POSITIVE_VERBS[p.verb],
        1 => NEGATIVE_VERBS[p.verb],
        _ => NEUTRAL_VERBS[p.verb],
    };
    let mut s = format!("the {} ", SUBJECTS[p.subject]);
    if p.negated {
        s.push_str("did not ");
        s.push_str(verb);
    } else {
        s.push_str(verb);
    }
    if p.intensified {
        s.push_str(" sharply");
    }
    s.push(' ');
    s.push_str(METRICS[p.metric]);
    if let Some(t) = p.tail {
        s.push(' ');
        s.push_str(TAILS[t]);
    }
    s.push_str(" .");
    s
}

fn label_of(p: &Pick) -> SentimentLabel {
    match (p.verb_kind, p.negated) {
        (0, false) | (1, true) => SentimentLabel::Positive,
        (0, true) | (1, false) => SentimentLabel::Negative,
        _ => SentimentLabel::Neutral,
    }
}

fn draw(rng: &mut ChaCha8Rng) -> Pick {
    let shape = rng.gen::<f64>();
    let verb_kind = if shape < 0.45 {
        2
    } else if shape < 0.80 {
        0
    } else {
        1
    };
    // Negation only applies to polar verbs; that composition is the part a
    // frozen random encoder cannot pick up.
    let negated = verb_kind != 2 && rng.gen_bool(0.4);
    Pick {
        subject: rng.gen_range(0..SUBJECTS.len()),
        verb_kind,
        verb: rng.gen_range(0..5),
        metric: rng.gen_range(0..METRICS.len()),
        negated,
        intensified: verb_kind != 2 && rng.gen_bool(0.3),
        tail: if rng.gen_bool(0.6) {
            Some(rng.gen_range(0..TAILS.len()))
        } else {
            None
        },
    }
}

fn draw_agreement(rng: &mut ChaCha8Rng) -> Agreement {
    let r = rng.gen::<f64>();
    if r < 0.4 {
        Agreement::P100
    } else if r < 0.7 {
        Agreement::P75
    } else if r < 0.9 {
        Agreement::P66
    } else {
        Agreement::P50
    }
}

fn dataset_with(n: usize, seed: u64, allow_negation: bool) -> Vec<LabeledSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < n * 200 {
        attempts += 1;
        let mut p = draw(&mut rng);
        if !allow_negation {
            p.negated = false;
        }
        let text = render(&p);
        if !seen.insert(text.clone()) {
            continue;
        }
        out.push(LabeledSentence {
            text,
            label: label_of(&p),
            agreement: draw_agreement(&mut rng),
        });
    }
    assert!(
        out.len() == n,
        "grammar exhausted at {} of {n} unique sentences",
        out.len()
    );
    out
}

/// `n` unique labeled sentences. Roughly 45% neutral, the rest split
/// between positive and negative, 40% of polar sentences negated.
pub fn sentiment_dataset(n: usize, seed: u64) -> Vec<LabeledSentence> {
    dataset_with(n, seed, true)
}

/// Variant without negation: the label is a single lexical cue, learnable
/// in a handful of epochs. Useful when an experiment needs the clean rule
/// to saturate quickly.
pub fn sentiment_dataset_plain(n: usize, seed: u64) -> Vec<LabeledSentence> {
    dataset_with(n, seed, false)
}

/// Flip each label to a random different one with probability `noise`.
pub fn flip_labels(data: &mut [LabeledSentence], noise: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for r in data.iter_mut() {
        if rng.gen::<f64>() < noise {
            let mut replacement = r.label;
            while replacement == r.label {
                replacement = SentimentLabel::ALL[rng.gen_range(0..3)];
            }
            r.label = replacement;
        }
    }
}

fn factual_sentence(rng: &mut ChaCha8Rng) -> String {
    let subject = rng.gen_range(0..SUBJECTS.len());
    // Region is a deterministic function of the subject so a masked region
    // token is predictable from context.
    let region = REGIONS[subject % REGIONS.len()];
    match rng.gen_range(0..3) {
        0 => format!("the {} operates in {} .", SUBJECTS[subject], region),
        1 => format!("shares of the {} trade in {} .", SUBJECTS[subject], region),
        _ => format!("the {} is based in {} .", SUBJECTS[subject], region),
    }
}

/// Unlabeled sentence stream mixing sentiment-grammar sentences with
/// factual patterns whose blanks are predictable.
pub fn mlm_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                factual_sentence(&mut rng)
            } else {
                render(&draw(&mut rng))
            }
        })
        .collect()
}

/// Documents for next-sentence prediction and corpus filtering: each is a
/// run of sentences about a single subject, so consecutive sentences share
/// vocabulary while random cross-document pairs do not.
pub fn domain_documents(n_docs: usize, sentences_per_doc: usize, seed: u64) -> Vec<Document> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_docs)
        .map(|d| {
            let subject = d % SUBJECTS.len();
            let sentences = (0..sentences_per_doc)
                .map(|_| {
                    let mut p = draw(&mut rng);
                    p.subject = subject;
                    if rng.gen_bool(0.4) {
                        let region = REGIONS[subject % REGIONS.len()];
                        format!("the {} operates in {} .", SUBJECTS[subject], region)
                    } else {
                        render(&p)
                    }
                })
                .collect();
            Document {
                name: format!("doc_{d:04}.txt"),
                sentences,
            }
        })
        .collect()
}

fn score_of(p: &Pick) -> f64 {
    let base = match p.verb_kind {
        0 => 0.55 + 0.05 * p.verb as f64,
        1 => -0.55 - 0.05 * p.verb as f64,
        _ => 0.0,
    };
    let intensity = if p.intensified { 1.25 } else { 1.0 };
    let sign = if p.negated { -1.0 } else { 1.0 };
    let drift = (p.subject as f64 - 4.5) * 0.01;
    (base * intensity * sign + drift).clamp(-1.0, 1.0)
}

/// `n` unique (text, score) pairs; the score is a deterministic smooth
/// function of the rendered text.
pub fn regression_dataset(n: usize, seed: u64) -> Vec<RegressionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n && attempts < n * 200 {
        attempts += 1;
        let p = draw(&mut rng);
        let text = render(&p);
        if !seen.insert(text.clone()) {
            continue;
        }
        out.push(RegressionExample {
            score: score_of(&p),
            target_entity: SUBJECTS[p.subject].to_string(),
            text,
        });
    }
    assert!(
        out.len() == n,
        "grammar exhausted at {} of {n} unique examples",
        out.len()
    );
    out
}
