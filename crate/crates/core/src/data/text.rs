use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
const PAD_TOKEN: &str = "<pad>";
const UNK_TOKEN: &str = "<unk>";

/// Lowercases, detaches every non-alphanumeric symbol into its own token and
/// splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() || c.is_whitespace() {
            spaced.push(c);
        } else {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

/// Token ↔ index map with `PAD = 0` and `UNK = 1` reserved.
/// Serialized as the list of non-reserved tokens in index order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        Vocabulary::from_tokens(words)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.words().to_vec()
    }
}

impl Vocabulary {
    /// Sorted token set, so the indices depend only on which tokens occur.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(set.into_iter().collect()).expect("reserved tokens never collide")
    }

    /// Rebuilds a vocabulary from its non-reserved tokens in index order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut all = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        all.extend(tokens.into_iter().filter(|t| t != PAD_TOKEN && t != UNK_TOKEN));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn get(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    /// Token indices of a text; an empty text becomes a single `UNK`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.get(t)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }
}

/// Reads whitespace-separated `token v_1 … v_dim` lines. A leading
/// `count dim` header line is skipped.
pub fn load_word_vectors(path: &Path, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let mut out = HashMap::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.display().to_string(),
        line,
        msg,
    };
    for (k, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if k == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        if fields.len() != dim + 1 {
            return Err(parse_err(
                k + 1,
                format!("expected token and {dim} values, found {} fields", fields.len()),
            ));
        }
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_err(k + 1, format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.insert(fields[0].to_string(), values);
    }
    Ok(out)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Initial `vocab × dim` embedding table. Rows come from `vectors` when the
/// token is present, otherwise from a uniform draw in `[-0.1, 0.1]` seeded by
/// `(seed, token)`. The padding row is zero.
pub fn embedding_table(
    vocab: &Vocabulary,
    vectors: Option<&HashMap<String, Vec<f64>>>,
    dim: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut data = vec![0.0; vocab.len() * dim];
    for i in 1..vocab.len() {
        let token = vocab.token(i);
        let row = &mut data[i * dim..(i + 1) * dim];
        match vectors.and_then(|v| v.get(token)) {
            Some(v) if v.len() == dim => row.copy_from_slice(v),
            Some(v) => {
                return Err(Error::Config(format!(
                    "vector for {token:?} has dimension {}, expected {dim}",
                    v.len()
                )))
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(token));
                for x in row {
                    *x = rng.gen_range(-0.1..=0.1);
                }
            }
        }
    }
    Tensor::matrix(vocab.len(), dim, data)
}
