//! Flat run configuration: model and training keys, read from a TOML file
//! and `KEY=VALUE` overrides. Variant-dependent defaults are filled in once
//! the variant is known.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use darer::data::LabelSpace;
use darer::model::{DecoderWiring, ModelConfig, Variant};
use darer::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub d_hidden: usize,
    pub d_word: usize,
    pub steps: usize,
    pub num_layers: usize,
    pub dropout: f64,
    pub gamma_s: f64,
    pub gamma_a: f64,
    pub max_dialog_len: usize,
    pub decoder_wiring: DecoderWiring,
    pub use_label_embeddings: bool,
    pub use_sat_layer: bool,
    pub use_dtr_layer: bool,
    pub share_ts_lstm: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// corpus directory, or "synthetic" for the default generated corpus
    pub data: String,
    /// optional text-format word vectors of dimension `d_word`
    pub word_vectors: String,
    /// sentiment label left out of metric averages ("" for none)
    pub ignore_sentiment: String,
    pub ignore_act: String,
}

/// Every accepted key; `T` and `batch` are aliases.
pub const KEYS: &[&str] = &[
    "variant",
    "d_hidden",
    "d_word",
    "steps",
    "num_layers",
    "dropout",
    "gamma_s",
    "gamma_a",
    "max_dialog_len",
    "decoder_wiring",
    "use_label_embeddings",
    "use_sat_layer",
    "use_dtr_layer",
    "share_ts_lstm",
    "lr",
    "batch_size",
    "epochs",
    "patience",
    "seed",
    "data",
    "word_vectors",
    "ignore_sentiment",
    "ignore_act",
];

const FLOAT_KEYS: &[&str] = &["dropout", "gamma_s", "gamma_a", "lr"];

fn canonical(key: &str) -> Result<&'static str> {
    let key = match key {
        "T" => "steps",
        "batch" => "batch_size",
        k => k,
    };
    match KEYS.iter().find(|k| **k == key) {
        Some(k) => Ok(k),
        None => bail!("unknown config key {key:?}; known keys: {}", KEYS.join(", ")),
    }
}

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let m = ModelConfig::for_variant(variant);
        let t = TrainConfig::default();
        RunConfig {
            variant,
            d_hidden: m.d_hidden,
            d_word: m.d_word,
            steps: m.steps,
            num_layers: m.num_layers,
            dropout: m.dropout,
            gamma_s: m.gamma_s,
            gamma_a: m.gamma_a,
            max_dialog_len: m.max_dialog_len,
            decoder_wiring: m.decoder_wiring,
            use_label_embeddings: m.use_label_embeddings,
            use_sat_layer: m.use_sat_layer,
            use_dtr_layer: m.use_dtr_layer,
            share_ts_lstm: m.share_ts_lstm,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: t.seed,
            data: "synthetic".into(),
            word_vectors: String::new(),
            ignore_sentiment: String::new(),
            ignore_act: String::new(),
        }
    }

    /// Resolves a config file (optional) and overrides, later entries winning.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        Self::resolve_over(None, file, overrides)
    }

    /// Like [`RunConfig::resolve`], but unset keys come from `base` instead of
    /// the variant defaults.
    pub fn resolve_over(base: Option<RunConfig>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut entries: BTreeMap<&'static str, toml::Value> = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
            for (k, v) in table {
                if v.is_table() || v.is_array() {
                    bail!("{}: key {k:?} must be a scalar (the config is flat)", path.display());
                }
                entries.insert(canonical(&k)?, v);
            }
        }
        for o in overrides {
            let Some((k, raw)) = o.split_once('=') else {
                bail!("override {o:?} is not KEY=VALUE");
            };
            entries.insert(canonical(k.trim())?, parse_value(raw.trim()));
        }
        let variant = match entries.get("variant") {
            Some(toml::Value::String(s)) => Some(Variant::parse(s)?),
            Some(v) => bail!("variant must be a string, got {v}"),
            None => None,
        };
        let base = match (base, variant) {
            (Some(b), _) => b,
            (None, v) => RunConfig::for_variant(v.unwrap_or(Variant::Reteformer)),
        };
        let mut table = match toml::Value::try_from(base)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        if let Some(v) = variant {
            entries.insert("variant", toml::Value::String(v.as_str().into()));
        }
        for (k, mut v) in entries {
            if FLOAT_KEYS.contains(&k) {
                if let toml::Value::Integer(i) = v {
                    v = toml::Value::Float(i as f64);
                }
            }
            table.insert(k.to_string(), v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration value")?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    /// Run configuration whose model keys are those of `m`.
    pub fn from_model(m: &ModelConfig) -> Self {
        RunConfig {
            d_hidden: m.d_hidden,
            d_word: m.d_word,
            steps: m.steps,
            num_layers: m.num_layers,
            dropout: m.dropout,
            gamma_s: m.gamma_s,
            gamma_a: m.gamma_a,
            max_dialog_len: m.max_dialog_len,
            decoder_wiring: m.decoder_wiring,
            use_label_embeddings: m.use_label_embeddings,
            use_sat_layer: m.use_sat_layer,
            use_dtr_layer: m.use_dtr_layer,
            share_ts_lstm: m.share_ts_lstm,
            ..RunConfig::for_variant(m.variant)
        }
    }

    pub fn model_config(&self, labels: &LabelSpace) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d_hidden: self.d_hidden,
            d_word: self.d_word,
            steps: self.steps,
            num_speakers: labels.speakers.len(),
            num_sentiments: labels.sentiment_labels.len(),
            num_acts: labels.act_labels.len(),
            dropout: self.dropout,
            gamma_s: self.gamma_s,
            gamma_a: self.gamma_a,
            max_dialog_len: self.max_dialog_len,
            decoder_wiring: self.decoder_wiring,
            num_layers: self.num_layers,
            use_label_embeddings: self.use_label_embeddings,
            use_sat_layer: self.use_sat_layer,
            use_dtr_layer: self.use_dtr_layer,
            share_ts_lstm: self.share_ts_lstm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            patience: self.patience,
        }
    }
}

/// A TOML scalar when the text parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !v.is_table() && !v.is_array())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
