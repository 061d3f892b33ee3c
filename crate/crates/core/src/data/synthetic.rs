//! Seeded generator of two-speaker dialogs with planted cross-task rules.
//!
//! Rules:
//! - R1: a disagreement carries the opposite sentiment of the previous
//!   utterance (never emitted after a neutral one);
//! - R2: an agreement copies the previous utterance's sentiment;
//! - R3: the reply of the other speaker to a question is an answer.
//!
//! Agreements and disagreements only follow a speaker change and their
//! surface carries no sentiment word, so their sentiment is recoverable only
//! through context. Answers reuse the statement surface, so they are told
//! apart only by the preceding question. When a rule is switched off the
//! utterances it would govern get ordinary sentiment-bearing surfaces (R1,
//! R2) or are not forced to be answers (R3).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Dialog, LabelSpace, Utterance};
use crate::error::{Error, Result};

pub const SENTIMENTS: [&str; 3] = ["negative", "neutral", "positive"];
pub const ACTS: [&str; 5] = ["statement", "question", "answer", "agreement", "disagreement"];

const NEG: usize = 0;
const NEU: usize = 1;
const POS: usize = 2;

const STATEMENT: usize = 0;
const QUESTION: usize = 1;
const ANSWER: usize = 2;
const AGREEMENT: usize = 3;
const DISAGREEMENT: usize = 4;

const WORDS: [&[&str]; 3] = [
    &["terrible", "awful", "bad", "horrible", "boring", "sad"],
    &["okay", "average", "ordinary", "usual", "plain", "standard"],
    &["great", "wonderful", "good", "awesome", "fun", "lovely"],
];
const TOPICS: &[&str] = &[
    "movie", "weather", "game", "food", "trip", "music", "book", "phone", "show", "team",
];
const STATEMENTS: &[&str] = &[
    "the {t} is {w}",
    "i think the {t} was {w}",
    "that {t} seems {w}",
    "my {t} felt {w}",
];
const QUESTIONS: &[&str] = &[
    "is the {t} {w} ?",
    "was that {t} {w} ?",
    "do you find the {t} {w} ?",
];
const AGREEMENTS: &[&str] = &["i agree", "exactly right", "yes totally", "so true", "same here"];
const DISAGREEMENTS: &[&str] = &["i disagree", "no way", "not at all", "i doubt that", "hardly"];
const NOISE: &[&str] = &["well", "um", "so", "like", "you", "know", "anyway", "hmm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    pub disagreement_flips: bool,
    pub agreement_copies: bool,
    pub question_answer: bool,
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet {
            disagreement_flips: true,
            agreement_copies: true,
            question_answer: true,
        }
    }
}

impl RuleSet {
    pub fn is_empty(&self) -> bool {
        !(self.disagreement_flips || self.agreement_copies || self.question_answer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_train: usize,
    pub num_dev: usize,
    pub num_test: usize,
    pub seed: u64,
    pub rules: RuleSet,
    pub min_len: usize,
    pub max_len: usize,
    /// probability that the same speaker talks again
    pub repeat_prob: f64,
    /// maximum number of filler tokens added to an utterance
    pub max_noise: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_train: 500,
            num_dev: 100,
            num_test: 100,
            seed: 7,
            rules: RuleSet::default(),
            min_len: 4,
            max_len: 10,
            repeat_prob: 0.2,
            max_noise: 2,
        }
    }
}

fn pick<'a, R: Rng>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().expect("non-empty inventory")
}

fn weighted<R: Rng>(rng: &mut R, choices: &[(usize, f64)]) -> usize {
    let total: f64 = choices.iter().map(|c| c.1).sum();
    let mut x = rng.gen_range(0.0..total);
    for &(v, w) in choices {
        if x < w {
            return v;
        }
        x -= w;
    }
    choices[choices.len() - 1].0
}

fn fill(template: &str, topic: &str, word: &str) -> String {
    template.replace("{t}", topic).replace("{w}", word)
}

fn surface<R: Rng>(rng: &mut R, act: usize, sentiment: usize, context_only: bool, max_noise: usize) -> String {
    let topic = pick(rng, TOPICS);
    let word = pick(rng, WORDS[sentiment]);
    let base = match act {
        QUESTION => fill(pick(rng, QUESTIONS), topic, word),
        AGREEMENT | DISAGREEMENT => {
            let phrase = pick(rng, if act == AGREEMENT { AGREEMENTS } else { DISAGREEMENTS });
            if context_only {
                phrase.to_string()
            } else {
                format!("{phrase} the {topic} is {word}")
            }
        }
        _ => fill(pick(rng, STATEMENTS), topic, word),
    };
    let mut tokens: Vec<&str> = base.split(' ').collect();
    for _ in 0..rng.gen_range(0..=max_noise) {
        let at = rng.gen_range(0..=tokens.len());
        tokens.insert(at, pick(rng, NOISE));
    }
    tokens.join(" ")
}

fn dialog<R: Rng>(rng: &mut R, id: String, cfg: &SyntheticConfig) -> Dialog {
    let rules = cfg.rules;
    let n = rng.gen_range(cfg.min_len..=cfg.max_len);
    let mut speaker: u64 = rng.gen_range(1..=2);
    let mut utterances = Vec::with_capacity(n);
    let mut prev: Option<(u64, usize, usize)> = None;
    for _ in 0..n {
        if prev.is_some() && !rng.gen_bool(cfg.repeat_prob) {
            speaker = 3 - speaker;
        }
        let fresh_sentiment = |rng: &mut R| weighted(rng, &[(NEG, 0.4), (NEU, 0.2), (POS, 0.4)]);
        let (act, sentiment, context_only) = match prev {
            Some((ps, pa, _)) if ps != speaker && pa == QUESTION && rules.question_answer => {
                (ANSWER, fresh_sentiment(rng), false)
            }
            Some((ps, _, psent)) if ps != speaker => {
                let mut act = weighted(
                    rng,
                    &[(STATEMENT, 0.15), (QUESTION, 0.15), (AGREEMENT, 0.35), (DISAGREEMENT, 0.35)],
                );
                if act == DISAGREEMENT && psent == NEU {
                    act = AGREEMENT;
                }
                match act {
                    AGREEMENT if rules.agreement_copies => (act, psent, true),
                    DISAGREEMENT if rules.disagreement_flips => (act, 2 - psent, true),
                    _ => (act, fresh_sentiment(rng), false),
                }
            }
            _ => (weighted(rng, &[(STATEMENT, 0.6), (QUESTION, 0.4)]), fresh_sentiment(rng), false),
        };
        utterances.push(Utterance {
            speaker,
            text: surface(rng, act, sentiment, context_only, cfg.max_noise),
            sentiment: SENTIMENTS[sentiment].to_string(),
            act: ACTS[act].to_string(),
        });
        prev = Some((speaker, act, sentiment));
    }
    Dialog { id, utterances }
}

pub fn label_space() -> LabelSpace {
    LabelSpace {
        sentiment_labels: SENTIMENTS.iter().map(|s| s.to_string()).collect(),
        act_labels: ACTS.iter().map(|s| s.to_string()).collect(),
        speakers: vec![1, 2],
    }
}

/// Deterministic corpus for `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Corpus> {
    if cfg.rules.is_empty() {
        return Err(Error::Config("synthetic rule set is empty".into()));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::Config(format!(
            "bad dialog length range {}..={}",
            cfg.min_len, cfg.max_len
        )));
    }
    if !(0.0..=1.0).contains(&cfg.repeat_prob) {
        return Err(Error::Config(format!("repeat_prob {} outside [0, 1]", cfg.repeat_prob)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make = |prefix: &str, count: usize| -> Vec<Dialog> {
        (0..count).map(|i| dialog(&mut rng, format!("{prefix}-{i:04}"), cfg)).collect()
    };
    let train = make("train", cfg.num_train);
    let dev = make("dev", cfg.num_dev);
    let test = make("test", cfg.num_test);
    Corpus::new(train, dev, test, Some(label_space()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, Vocabulary};

    fn idx(labels: &[&str], l: &str) -> usize {
        labels.iter().position(|x| *x == l).unwrap()
    }

    #[test]
    fn seeded_and_bit_identical() {
        let cfg = SyntheticConfig { num_train: 30, num_dev: 5, num_test: 5, ..Default::default() };
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        let b = generate_synthetic(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn planted_rules_hold_everywhere() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let mut counts = [0usize; 5];
        for split in Split::ALL {
            for d in c.split(split) {
                assert!((4..=10).contains(&d.utterances.len()));
                for (t, u) in d.utterances.iter().enumerate() {
                    let act = idx(&ACTS, &u.act);
                    let s = idx(&SENTIMENTS, &u.sentiment);
                    counts[act] += 1;
                    if t == 0 {
                        assert!(act == STATEMENT || act == QUESTION);
                        continue;
                    }
                    let p = &d.utterances[t - 1];
                    let ps = idx(&SENTIMENTS, &p.sentiment);
                    let changed = p.speaker != u.speaker;
                    match act {
                        DISAGREEMENT => {
                            assert!(changed);
                            assert_ne!(ps, NEU);
                            assert_eq!(s, 2 - ps);
                        }
                        AGREEMENT => {
                            assert!(changed);
                            assert_eq!(s, ps);
                        }
                        _ => {}
                    }
                    if changed && p.act == "question" {
                        assert_eq!(act, ANSWER);
                    }
                    if act == ANSWER {
                        assert!(changed && p.act == "question");
                    }
                }
            }
        }
        assert!(counts.iter().all(|&c| c > 100), "{counts:?}");
    }

    #[test]
    fn disabled_rule_uses_surface_cues() {
        let rules = RuleSet { agreement_copies: false, ..Default::default() };
        let cfg = SyntheticConfig { num_train: 50, num_dev: 0, num_test: 0, rules, ..Default::default() };
        let c = generate_synthetic(&cfg).unwrap();
        let agreements: Vec<&Utterance> = c.train.iter().flat_map(|d| &d.utterances).filter(|u| u.act == "agreement").collect();
        assert!(!agreements.is_empty());
        for u in agreements {
            let s = idx(&SENTIMENTS, &u.sentiment);
            assert!(WORDS[s].iter().any(|w| u.text.split(' ').any(|t| t == *w)));
        }
        let none = RuleSet { disagreement_flips: false, agreement_copies: false, question_answer: false };
        assert!(generate_synthetic(&SyntheticConfig { rules: none, ..cfg }).is_err());
    }

    /// Multinomial logistic regression over per-utterance token counts,
    /// fitted by full-batch gradient descent.
    fn bow_sentiment_accuracy(c: &Corpus) -> (f64, f64) {
        let vocab = Vocabulary::build(c.train.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())));
        let feats = |split: Split| -> Vec<(Vec<usize>, usize)> {
            c.split(split)
                .iter()
                .flat_map(|d| &d.utterances)
                .map(|u| (vocab.encode(&u.text), idx(&SENTIMENTS, &u.sentiment)))
                .collect()
        };
        let train = feats(Split::Train);
        let dev = feats(Split::Dev);
        let (v, k) = (vocab.len(), 3);
        let mut w = vec![0.0; v * k];
        let mut b = vec![0.0; k];
        let probs = |w: &[f64], b: &[f64], x: &[usize]| -> Vec<f64> {
            let z: Vec<f64> = (0..k).map(|c| b[c] + x.iter().map(|&t| w[t * k + c]).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        for _ in 0..300 {
            let mut gw = vec![0.0; v * k];
            let mut gb = vec![0.0; k];
            for (x, y) in &train {
                let p = probs(&w, &b, x);
                for c in 0..k {
                    let g = p[c] - if c == *y { 1.0 } else { 0.0 };
                    gb[c] += g;
                    for &t in x {
                        gw[t * k + c] += g;
                    }
                }
            }
            let lr = 0.5 / train.len() as f64;
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= lr * 10.0 * gi;
            }
            for (bi, gi) in b.iter_mut().zip(&gb) {
                *bi -= lr * 10.0 * gi;
            }
        }
        let acc = |data: &[(Vec<usize>, usize)]| {
            let hits = data
                .iter()
                .filter(|(x, y)| {
                    let p = probs(&w, &b, x);
                    (0..k).max_by(|&a, &c| p[a].partial_cmp(&p[c]).unwrap()).unwrap() == *y
                })
                .count();
            hits as f64 / data.len() as f64
        };
        (acc(&train), acc(&dev))
    }

    #[test]
    fn bag_of_words_baseline_leaves_headroom() {
        let c = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let (train_acc, dev_acc) = bow_sentiment_accuracy(&c);
        // the baseline does learn the surface cues
        assert!(train_acc > 0.5, "train {train_acc}");
        eprintln!("bag-of-words sentiment accuracy: train {train_acc:.3}, dev {dev_acc:.3}");
        assert!(dev_acc <= 0.80, "dev {dev_acc}");
    }
}
