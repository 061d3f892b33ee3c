//! DARER (RGCN reasoning layers) and DARER² (ReTeFormer reasoning layers).

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{build_drtg, build_satg, RelationalGraph, DRTG_RELATIONS};
use crate::layers::{
    superimpose, Ctx, Decoder, LabelEmbeddings, PositionCache, ReTeFormer, Rgcn, TaskLstm,
    UtteranceEncoder,
};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Rgcn,
    Reteformer,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgcn" | "darer" => Ok(Variant::Rgcn),
            "reteformer" | "darer2" => Ok(Variant::Reteformer),
            _ => Err(Error::Config(format!("unknown variant {s:?} (rgcn|reteformer)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Rgcn => "rgcn",
            Variant::Reteformer => "reteformer",
        }
    }
}

/// Which hidden stream feeds which decoder at initial estimation.
/// `Crossed` decodes sentiment from the act stream and acts from the
/// sentiment stream; reasoning steps always decode straight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderWiring {
    Crossed,
    Straight,
}

impl DecoderWiring {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crossed" => Ok(DecoderWiring::Crossed),
            "straight" => Ok(DecoderWiring::Straight),
            _ => Err(Error::Config(format!("unknown decoder_wiring {s:?} (crossed|straight)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderWiring::Crossed => "crossed",
            DecoderWiring::Straight => "straight",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// hidden size; label embeddings share it
    pub d_hidden: usize,
    pub d_word: usize,
    /// number of reasoning steps after initial estimation
    pub steps: usize,
    pub num_speakers: usize,
    pub num_sentiments: usize,
    pub num_acts: usize,
    pub dropout: f64,
    pub gamma_s: f64,
    pub gamma_a: f64,
    pub max_dialog_len: usize,
    pub decoder_wiring: DecoderWiring,
    /// stacked SAT / DTR layers per application site
    pub num_layers: usize,
    pub use_label_embeddings: bool,
    pub use_sat_layer: bool,
    pub use_dtr_layer: bool,
    /// reuse the initial-estimation BiLSTMs as the reasoning TS-LSTMs
    pub share_ts_lstm: bool,
}

impl ModelConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let (d, steps, gamma_s, gamma_a, dropout) = match variant {
            Variant::Rgcn => (128, 3, 3.0, 3.0, 0.2),
            Variant::Reteformer => (256, 5, 10.0, 1.0, 0.4),
        };
        ModelConfig {
            variant,
            d_hidden: d,
            d_word: 300,
            steps,
            num_speakers: 2,
            num_sentiments: 3,
            num_acts: 15,
            dropout,
            gamma_s,
            gamma_a,
            max_dialog_len: 128,
            decoder_wiring: DecoderWiring::Crossed,
            num_layers: 1,
            use_label_embeddings: true,
            use_sat_layer: true,
            use_dtr_layer: true,
            share_ts_lstm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_hidden", self.d_hidden),
            ("d_word", self.d_word),
            ("num_speakers", self.num_speakers),
            ("num_sentiments", self.num_sentiments),
            ("num_acts", self.num_acts),
            ("max_dialog_len", self.max_dialog_len),
            ("num_layers", self.num_layers),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{key} must be positive")));
            }
        }
        if self.d_hidden % 2 != 0 {
            return Err(Error::Config(format!("d_hidden must be even, got {}", self.d_hidden)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        for (key, g) in [("gamma_s", self.gamma_s), ("gamma_a", self.gamma_a)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("{key} must be finite and >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

/// Relation-specific graph transformation used at the SAT and DTR sites.
#[derive(Clone, Debug)]
pub enum GraphLayer {
    Rgcn(Rgcn),
    ReTeFormer(ReTeFormer),
}

impl GraphLayer {
    fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        name: &str,
        relations: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match cfg.variant {
            Variant::Rgcn => GraphLayer::Rgcn(Rgcn::new(store, name, cfg.d_hidden, relations, rng)?),
            Variant::Reteformer => GraphLayer::ReTeFormer(ReTeFormer::new(
                store,
                name,
                cfg.d_hidden,
                relations,
                cfg.max_dialog_len,
                rng,
            )?),
        })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        graph: &RelationalGraph,
        h: Var,
        cache: &mut PositionCache,
    ) -> Result<(Var, Option<Vec<Option<Var>>>)> {
        match self {
            GraphLayer::Rgcn(l) => Ok((l.forward(tape, ctx, graph, h)?, None)),
            GraphLayer::ReTeFormer(l) => {
                let (y, attn) = l.forward_with_attention(tape, ctx, graph, h, cache)?;
                Ok((y, Some(attn)))
            }
        }
    }
}

/// Label distributions of every step `t = 0..=T`, plus the DTR attention
/// weights of each reasoning step (first layer, ReTeFormer only).
#[derive(Clone, Debug)]
pub struct StepOutputs {
    pub p_s: Vec<Var>,
    pub p_a: Vec<Var>,
    /// `attention[t - 1][r - 1]` for reasoning step `t`, relation `r`
    pub attention: Vec<Vec<Option<Var>>>,
}

/// Hidden states and label distributions carried between steps.
#[derive(Clone, Copy, Debug)]
pub struct StepState {
    pub h_s: Var,
    pub h_a: Var,
    pub p_s: Var,
    pub p_a: Var,
}

#[derive(Default)]
struct GraphCache {
    satg: HashMap<Vec<usize>, Arc<RelationalGraph>>,
    drtg: HashMap<usize, Arc<RelationalGraph>>,
}

pub struct Darer {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: UtteranceEncoder,
    pub sat: Vec<GraphLayer>,
    pub init_s: TaskLstm,
    pub init_a: TaskLstm,
    pub dtr: Vec<GraphLayer>,
    pub ts_s: TaskLstm,
    pub ts_a: TaskLstm,
    pub labels_s: LabelEmbeddings,
    pub labels_a: LabelEmbeddings,
    pub dec_s: Decoder,
    pub dec_a: Decoder,
    graphs: Mutex<GraphCache>,
}

impl fmt::Debug for Darer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Darer")
            .field("config", &self.config)
            .field("num_params", &self.store.num_scalars())
            .finish()
    }
}

impl Darer {
    /// Builds a freshly initialized model. `word_embeddings` is the
    /// `vocab × d_word` initial embedding table. Parameter creation order is
    /// fixed, so equal seeds give equal models.
    pub fn new(config: ModelConfig, word_embeddings: Tensor, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, d_word) = word_embeddings.dims2();
        if d_word != config.d_word {
            return Err(Error::Config(format!(
                "word embeddings have dimension {d_word}, config d_word is {}",
                config.d_word
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_hidden;
        let encoder = UtteranceEncoder::new(&mut store, word_embeddings, d, &mut rng)?;
        let sat_relations = 2 * config.num_speakers * config.num_speakers;
        let mut sat = Vec::new();
        if config.use_sat_layer {
            for l in 0..config.num_layers {
                sat.push(GraphLayer::new(&mut store, &config, &format!("sat.{l}"), sat_relations, &mut rng)?);
            }
        }
        let init_s = TaskLstm::new(&mut store, "init_lstm.s", d, &mut rng)?;
        let init_a = TaskLstm::new(&mut store, "init_lstm.a", d, &mut rng)?;
        let mut dtr = Vec::new();
        if config.use_dtr_layer {
            for l in 0..config.num_layers {
                dtr.push(GraphLayer::new(&mut store, &config, &format!("dtr.{l}"), DRTG_RELATIONS, &mut rng)?);
            }
        }
        let (ts_s, ts_a) = if config.share_ts_lstm {
            (init_s.clone(), init_a.clone())
        } else {
            (
                TaskLstm::new(&mut store, "ts_lstm.s", d, &mut rng)?,
                TaskLstm::new(&mut store, "ts_lstm.a", d, &mut rng)?,
            )
        };
        let labels_s = LabelEmbeddings::new(&mut store, "label_embedding.s", config.num_sentiments, d, &mut rng)?;
        let labels_a = LabelEmbeddings::new(&mut store, "label_embedding.a", config.num_acts, d, &mut rng)?;
        let dec_s = Decoder::new(&mut store, "decoder.s", d, config.num_sentiments, &mut rng)?;
        let dec_a = Decoder::new(&mut store, "decoder.a", d, config.num_acts, &mut rng)?;
        Ok(Darer {
            config,
            store,
            encoder,
            sat,
            init_s,
            init_a,
            dtr,
            ts_s,
            ts_a,
            labels_s,
            labels_a,
            dec_s,
            dec_a,
            graphs: Mutex::new(GraphCache::default()),
        })
    }

    /// Speaker-aware temporal graph for a speaker sequence, memoized.
    pub fn satg(&self, speakers: &[usize]) -> Result<Arc<RelationalGraph>> {
        let mut cache = self.graphs.lock().expect("graph cache poisoned");
        if let Some(g) = cache.satg.get(speakers) {
            return Ok(g.clone());
        }
        let g = Arc::new(build_satg(speakers, self.config.num_speakers)?);
        cache.satg.insert(speakers.to_vec(), g.clone());
        Ok(g)
    }

    /// Dual-task reasoning graph for `n` utterances, memoized.
    pub fn drtg(&self, n: usize) -> Result<Arc<RelationalGraph>> {
        let mut cache = self.graphs.lock().expect("graph cache poisoned");
        if let Some(g) = cache.drtg.get(&n) {
            return Ok(g.clone());
        }
        let g = Arc::new(build_drtg(n)?);
        cache.drtg.insert(n, g.clone());
        Ok(g)
    }

    /// Context-, speaker- and temporal-sensitive utterance representations.
    pub fn dialog_understanding(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        tokens: &[Vec<usize>],
        speakers: &[usize],
    ) -> Result<Var> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::EmptyDialog);
        }
        if speakers.len() != n {
            return Err(Error::Contract(format!(
                "{n} utterances but {} speaker ids",
                speakers.len()
            )));
        }
        if n > self.config.max_dialog_len {
            return Err(Error::Config(format!(
                "dialog has {n} utterances, max_dialog_len is {}",
                self.config.max_dialog_len
            )));
        }
        let h = self.encoder.forward(tape, ctx, tokens)?;
        let mut h = ctx.dropout(tape, h)?;
        if !self.sat.is_empty() {
            let graph = self.satg(speakers)?;
            let mut cache = PositionCache::default();
            for layer in &self.sat {
                h = layer.forward(tape, ctx, &graph, h, &mut cache)?.0;
            }
        }
        Ok(h)
    }

    pub fn initial_estimation(&self, tape: &mut Tape, ctx: &mut Ctx, h: Var) -> Result<StepState> {
        let h_s = self.init_s.forward(tape, ctx, h)?;
        let h_a = self.init_a.forward(tape, ctx, h)?;
        let (src_s, src_a) = match self.config.decoder_wiring {
            DecoderWiring::Crossed => (h_a, h_s),
            DecoderWiring::Straight => (h_s, h_a),
        };
        let p_s = self.dec_s.forward(tape, ctx, src_s)?;
        let p_a = self.dec_a.forward(tape, ctx, src_a)?;
        Ok(StepState { h_s, h_a, p_s, p_a })
    }

    /// One recurrent dual-task reasoning step; returns the new state and the
    /// first DTR layer's attention weights when available.
    pub fn reasoning_step(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        prev: StepState,
        drtg: &RelationalGraph,
        cache: &mut PositionCache,
    ) -> Result<(StepState, Vec<Option<Var>>)> {
        let n = tape.value(prev.h_s).rows();
        let (h_s, h_a) = if self.config.use_label_embeddings {
            let e_s = self.labels_s.project(tape, ctx, prev.p_s)?;
            let e_a = self.labels_a.project(tape, ctx, prev.p_a)?;
            (
                superimpose(tape, prev.h_s, e_s, e_a)?,
                superimpose(tape, prev.h_a, e_s, e_a)?,
            )
        } else {
            (prev.h_s, prev.h_a)
        };
        let mut attention = Vec::new();
        let (bar_s, bar_a) = if self.dtr.is_empty() {
            (h_s, h_a)
        } else {
            let mut x = tape.concat_rows(&[h_s, h_a])?;
            for (l, layer) in self.dtr.iter().enumerate() {
                let (y, attn) = layer.forward(tape, ctx, drtg, x, cache)?;
                if l == 0 {
                    attention = attn.unwrap_or_default();
                }
                x = y;
            }
            (tape.slice_rows(x, 0, n)?, tape.slice_rows(x, n, n)?)
        };
        let h_s = self.ts_s.forward(tape, ctx, bar_s)?;
        let h_a = self.ts_a.forward(tape, ctx, bar_a)?;
        let p_s = self.dec_s.forward(tape, ctx, h_s)?;
        let p_a = self.dec_a.forward(tape, ctx, h_a)?;
        Ok((StepState { h_s, h_a, p_s, p_a }, attention))
    }

    /// Full forward pass recording the label distributions of every step.
    pub fn forward_dialog(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        tokens: &[Vec<usize>],
        speakers: &[usize],
    ) -> Result<StepOutputs> {
        self.forward_steps(tape, ctx, tokens, speakers, self.config.steps)
    }

    /// Forward pass with an explicit step count.
    pub fn forward_steps(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        tokens: &[Vec<usize>],
        speakers: &[usize],
        steps: usize,
    ) -> Result<StepOutputs> {
        let h = self.dialog_understanding(tape, ctx, tokens, speakers)?;
        let mut state = self.initial_estimation(tape, ctx, h)?;
        let mut out = StepOutputs {
            p_s: vec![state.p_s],
            p_a: vec![state.p_a],
            attention: Vec::new(),
        };
        if steps > 0 {
            let drtg = self.drtg(tokens.len())?;
            let mut cache = PositionCache::default();
            for _ in 0..steps {
                let (next, attn) = self.reasoning_step(tape, ctx, state, &drtg, &mut cache)?;
                out.p_s.push(next.p_s);
                out.p_a.push(next.p_a);
                out.attention.push(attn);
                state = next;
            }
        }
        Ok(out)
    }

    /// Evaluation-mode label distributions of every step as plain tensors.
    pub fn predict(&self, tokens: &[Vec<usize>], speakers: &[usize]) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval(&self.store);
        let out = self.forward_dialog(&mut tape, &mut ctx, tokens, speakers)?;
        Ok((
            out.p_s.iter().map(|&v| tape.value(v).clone()).collect(),
            out.p_a.iter().map(|&v| tape.value(v).clone()).collect(),
        ))
    }
}

/// Row-wise argmax; earliest index wins ties.
pub fn argmax_rows(p: &Tensor) -> Vec<usize> {
    (0..p.rows())
        .map(|i| {
            let row = p.row_slice(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}
