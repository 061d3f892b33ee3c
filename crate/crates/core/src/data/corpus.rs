use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use super::text::Vocabulary;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: u64,
    pub text: String,
    pub sentiment: String,
    pub act: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dialog {
    #[serde(deserialize_with = "string_or_number")]
    pub id: String,
    pub utterances: Vec<Utterance>,
}

fn string_or_number<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Id {
        S(String),
        N(serde_json::Number),
    }
    Ok(match Id::deserialize(d)? {
        Id::S(s) => s,
        Id::N(n) => n.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (train|dev|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered label sets of both tasks and the corpus speaker ids. Speaker ids
/// map to `1..=S` by their position in `speakers`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpace {
    pub sentiment_labels: Vec<String>,
    pub act_labels: Vec<String>,
    pub speakers: Vec<u64>,
}

impl LabelSpace {
    fn index(labels: &[String], kind: &'static str, label: &str, split: Split) -> Result<usize> {
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel {
                kind,
                label: label.to_string(),
                split: split.name().to_string(),
            })
    }

    pub fn sentiment(&self, label: &str, split: Split) -> Result<usize> {
        Self::index(&self.sentiment_labels, "sentiment", label, split)
    }

    pub fn act(&self, label: &str, split: Split) -> Result<usize> {
        Self::index(&self.act_labels, "act", label, split)
    }

    pub fn speaker(&self, raw: u64) -> Result<usize> {
        self.speakers
            .iter()
            .position(|&s| s == raw)
            .map(|i| i + 1)
            .ok_or(Error::Speaker {
                speaker: raw as usize,
                num_speakers: self.speakers.len(),
            })
    }

    pub fn label_index(&self, kind: &str, label: &str) -> Result<usize> {
        let labels = match kind {
            "sentiment" => &self.sentiment_labels,
            "act" => &self.act_labels,
            _ => return Err(Error::Config(format!("unknown task {kind:?}"))),
        };
        labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Config(format!("no {kind} label {label:?}; known: {labels:?}")))
    }

    fn validate(&self) -> Result<()> {
        for (kind, labels) in [("sentiment", &self.sentiment_labels), ("act", &self.act_labels)] {
            if labels.is_empty() {
                return Err(Error::Config(format!("empty {kind} label set")));
            }
            let unique: HashSet<&String> = labels.iter().collect();
            if unique.len() != labels.len() {
                return Err(Error::Config(format!("duplicate {kind} labels")));
            }
        }
        if self.speakers.is_empty() {
            return Err(Error::Config("empty speaker set".into()));
        }
        Ok(())
    }
}

/// Dialog with tokens, speakers and labels as indices.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedDialog {
    pub id: String,
    pub tokens: Vec<Vec<usize>>,
    pub speakers: Vec<usize>,
    pub sentiments: Vec<usize>,
    pub acts: Vec<usize>,
}

impl EncodedDialog {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(d: &Dialog, vocab: &Vocabulary, labels: &LabelSpace, split: Split) -> Result<Self> {
        if d.utterances.is_empty() {
            return Err(Error::EmptyDialog);
        }
        let mut out = EncodedDialog {
            id: d.id.clone(),
            tokens: Vec::with_capacity(d.utterances.len()),
            speakers: Vec::with_capacity(d.utterances.len()),
            sentiments: Vec::with_capacity(d.utterances.len()),
            acts: Vec::with_capacity(d.utterances.len()),
        };
        for u in &d.utterances {
            out.tokens.push(vocab.encode(&u.text));
            out.speakers.push(labels.speaker(u.speaker)?);
            out.sentiments.push(labels.sentiment(&u.sentiment, split)?);
            out.acts.push(labels.act(&u.act, split)?);
        }
        Ok(out)
    }
}

/// Train/dev/test dialogs plus their label space.
///
/// On disk: `train.jsonl`, `dev.jsonl`, `test.jsonl` with one dialog per
/// line, and an optional `manifest.json` holding the [`LabelSpace`]. Without
/// a manifest, label sets are taken from the train split in order of first
/// appearance and speakers from all splits in ascending order.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
    pub labels: LabelSpace,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Dialog] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Builds a corpus, inferring the label space when `labels` is `None`,
    /// and validates every record against it.
    pub fn new(train: Vec<Dialog>, dev: Vec<Dialog>, test: Vec<Dialog>, labels: Option<LabelSpace>) -> Result<Self> {
        let labels = match labels {
            Some(l) => l,
            None => {
                let mut sentiment_labels: Vec<String> = Vec::new();
                let mut act_labels: Vec<String> = Vec::new();
                for u in train.iter().flat_map(|d| &d.utterances) {
                    if !sentiment_labels.contains(&u.sentiment) {
                        sentiment_labels.push(u.sentiment.clone());
                    }
                    if !act_labels.contains(&u.act) {
                        act_labels.push(u.act.clone());
                    }
                }
                let speakers: BTreeSet<u64> = [&train, &dev, &test]
                    .iter()
                    .flat_map(|s| s.iter().flat_map(|d| d.utterances.iter().map(|u| u.speaker)))
                    .collect();
                LabelSpace {
                    sentiment_labels,
                    act_labels,
                    speakers: speakers.into_iter().collect(),
                }
            }
        };
        let corpus = Corpus { train, dev, test, labels };
        corpus.validate()?;
        Ok(corpus)
    }

    fn validate(&self) -> Result<()> {
        self.labels.validate()?;
        let mut ids = HashSet::new();
        for split in Split::ALL {
            for d in self.split(split) {
                if !ids.insert(d.id.as_str()) {
                    return Err(Error::Config(format!("dialog id {:?} appears twice", d.id)));
                }
                if d.utterances.is_empty() {
                    return Err(Error::EmptyDialog);
                }
                for u in &d.utterances {
                    self.labels.sentiment(&u.sentiment, split)?;
                    self.labels.act(&u.act, split)?;
                    self.labels.speaker(u.speaker)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join("manifest.json");
        let labels = if manifest.exists() {
            Some(serde_json::from_str(&fs::read_to_string(&manifest)?).map_err(|e| Error::Parse {
                path: manifest.display().to_string(),
                line: e.line(),
                msg: e.to_string(),
            })?)
        } else {
            None
        };
        let train = read_jsonl(&dir.join("train.jsonl"))?;
        let dev = read_jsonl(&dir.join("dev.jsonl"))?;
        let test_path = dir.join("test.jsonl");
        let test = if test_path.exists() { read_jsonl(&test_path)? } else { Vec::new() };
        if train.is_empty() {
            return Err(Error::Config(format!("empty train split in {}", dir.display())));
        }
        Corpus::new(train, dev, test, labels)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            let mut text = String::new();
            for d in self.split(split) {
                text.push_str(&serde_json::to_string(d)?);
                text.push('\n');
            }
            fs::write(dir.join(format!("{}.jsonl", split.name())), text)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.labels)? + "\n")?;
        Ok(())
    }

    pub fn encode(&self, split: Split, vocab: &Vocabulary) -> Result<Vec<EncodedDialog>> {
        self.split(split)
            .iter()
            .map(|d| EncodedDialog::encode(d, vocab, &self.labels, split))
            .collect()
    }

    /// Vocabulary over the train split.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.train.iter().flat_map(|d| d.utterances.iter().map(|u| u.text.as_str())))
    }
}

/// One dialog per non-blank line; errors carry the 1-based line number.
pub fn read_jsonl(path: &Path) -> Result<Vec<Dialog>> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: k + 1,
            msg,
        };
        let d: Dialog = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if d.utterances.is_empty() {
            return Err(err("dialog has no utterances".into()));
        }
        if let Some(i) = d.utterances.iter().position(|u| u.text.trim().is_empty()) {
            return Err(err(format!("utterance {i} has empty text")));
        }
        out.push(d);
    }
    Ok(out)
}
