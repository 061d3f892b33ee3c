//! Finite-difference gradient checks over every trainable component, the
//! losses and the assembled models.
//!
//! Each case builds a small randomly initialized instance (at most 8 graph
//! nodes) and compares tape gradients against central differences for every
//! parameter, the layer input included. Layer outputs are reduced to a scalar
//! through a fixed random readout so that no gradient is trivially uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graphs::{build_drtg, build_satg, RelationalGraph};
use crate::layers::{Ctx, Decoder, LabelEmbeddings, PositionCache, ReTeFormer, Rgcn, TaskLstm, UtteranceEncoder};
use crate::model::{Darer, ModelConfig, StepOutputs, Variant};
use crate::tensor::{grad_check_params, ParamId, ParamStore, Tape, Tensor, Var};
use crate::training::{dialog_loss, estimate_loss, margin_loss};

/// Largest node count used by any case.
pub const MAX_NODES: usize = 8;

const D: usize = 4;
const D_WORD: usize = 3;
const VOCAB: usize = 7;
/// coordinates perturbed per parameter in the whole-model cases
const MODEL_COORDS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: String,
    pub seed: u64,
    pub nodes: usize,
    pub max_error: f64,
    /// parameter with the largest error
    pub worst: String,
    pub passed: bool,
}

/// Scalar readout `Σ x ⊙ C` for a random constant `C` of the same shape.
fn readout(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let c = tape.constant(Tensor::uniform(&shape, 1.0, rng));
    let y = tape.mul(x, c)?;
    Ok(tape.sum(y))
}

fn speakers(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(1..=2)).collect()
}

fn tokens(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(1..VOCAB)).collect())
        .collect()
}

struct Case {
    component: &'static str,
    nodes: usize,
    store: ParamStore,
    f: Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>,
    coords: Option<usize>,
}

fn input(store: &mut ParamStore, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<ParamId> {
    store.add("input", Tensor::uniform(&[rows, cols], 1.0, rng))
}

fn graph_case(
    component: &'static str,
    graph: RelationalGraph,
    reteformer: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Case> {
    let n = graph.num_nodes();
    let mut store = ParamStore::new();
    let x = input(&mut store, n, D, rng)?;
    let read_seed = rng.gen();
    let f: Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>> = if reteformer {
        let layer = ReTeFormer::new(&mut store, "layer", D, graph.num_relations(), MAX_NODES, rng)?;
        Box::new(move |tape, store| {
            let mut ctx = Ctx::eval(store);
            let h = ctx.param(tape, x);
            let y = layer.forward_with_attention(tape, &mut ctx, &graph, h, &mut PositionCache::default())?.0;
            readout(tape, y, &mut ChaCha8Rng::seed_from_u64(read_seed))
        })
    } else {
        let layer = Rgcn::new(&mut store, "layer", D, graph.num_relations(), rng)?;
        Box::new(move |tape, store| {
            let ctx = Ctx::eval(store);
            let h = ctx.param(tape, x);
            let y = layer.forward(tape, &ctx, &graph, h)?;
            readout(tape, y, &mut ChaCha8Rng::seed_from_u64(read_seed))
        })
    };
    Ok(Case { component, nodes: n, store, f, coords: None })
}

/// Random step distributions as softmaxed parameters, `T + 1` per task.
fn step_logits(store: &mut ParamStore, n: usize, k: usize, steps: usize, task: &str, rng: &mut ChaCha8Rng) -> Result<Vec<ParamId>> {
    (0..=steps)
        .map(|t| store.add(format!("logits.{task}.{t}"), Tensor::uniform(&[n, k], 2.0, rng)))
        .collect()
}

fn distributions(tape: &mut Tape, ctx: &Ctx, ids: &[ParamId]) -> Vec<Var> {
    ids.iter()
        .map(|&id| {
            let z = ctx.param(tape, id);
            tape.softmax(z)
        })
        .collect()
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let n = rng.gen_range(1..=MAX_NODES);
    let toks = tokens(n, &mut rng);
    let mut store = ParamStore::new();
    let emb = Tensor::uniform(&[VOCAB, D_WORD], 1.0, &mut rng);
    let encoder = UtteranceEncoder::new(&mut store, emb, D, &mut rng)?;
    let read_seed = rng.gen();
    out.push(Case {
        component: "encoder",
        nodes: n,
        store,
        f: Box::new(move |tape, store| {
            let ctx = Ctx::eval(store);
            let y = encoder.forward(tape, &ctx, &toks)?;
            readout(tape, y, &mut ChaCha8Rng::seed_from_u64(read_seed))
        }),
        coords: None,
    });

    let n = rng.gen_range(1..=MAX_NODES);
    let satg = build_satg(&speakers(n, &mut rng), 2)?;
    out.push(graph_case("rgcn.satg", satg.clone(), false, &mut rng)?);
    out.push(graph_case("reteformer.satg", satg, true, &mut rng)?);
    let n = rng.gen_range(1..=MAX_NODES / 2);
    let drtg = build_drtg(n)?;
    out.push(graph_case("rgcn.drtg", drtg.clone(), false, &mut rng)?);
    out.push(graph_case("reteformer.drtg", drtg, true, &mut rng)?);

    let n = rng.gen_range(1..=MAX_NODES);
    let k = rng.gen_range(2..=5);
    let mut store = ParamStore::new();
    let logits = store.add("logits", Tensor::uniform(&[n, k], 2.0, &mut rng))?;
    let labels = LabelEmbeddings::new(&mut store, "label_embedding", k, D, &mut rng)?;
    let read_seed = rng.gen();
    out.push(Case {
        component: "label_projection",
        nodes: n,
        store,
        f: Box::new(move |tape, store| {
            let ctx = Ctx::eval(store);
            let z = ctx.param(tape, logits);
            let p = tape.softmax(z);
            let e = labels.project(tape, &ctx, p)?;
            readout(tape, e, &mut ChaCha8Rng::seed_from_u64(read_seed))
        }),
        coords: None,
    });

    let n = rng.gen_range(1..=MAX_NODES);
    let mut store = ParamStore::new();
    let x = input(&mut store, n, D, &mut rng)?;
    let lstm = TaskLstm::new(&mut store, "ts_lstm", D, &mut rng)?;
    let read_seed = rng.gen();
    out.push(Case {
        component: "ts_lstm",
        nodes: n,
        store,
        f: Box::new(move |tape, store| {
            let ctx = Ctx::eval(store);
            let h = ctx.param(tape, x);
            let y = lstm.forward(tape, &ctx, h)?;
            readout(tape, y, &mut ChaCha8Rng::seed_from_u64(read_seed))
        }),
        coords: None,
    });

    let n = rng.gen_range(1..=MAX_NODES);
    let k = rng.gen_range(2..=5);
    let mut store = ParamStore::new();
    let x = input(&mut store, n, D, &mut rng)?;
    let decoder = Decoder::new(&mut store, "decoder", D, k, &mut rng)?;
    let read_seed = rng.gen();
    out.push(Case {
        component: "decoder",
        nodes: n,
        store,
        f: Box::new(move |tape, store| {
            let ctx = Ctx::eval(store);
            let h = ctx.param(tape, x);
            let p = decoder.forward(tape, &ctx, h)?;
            readout(tape, p, &mut ChaCha8Rng::seed_from_u64(read_seed))
        }),
        coords: None,
    });

    let n = rng.gen_range(1..=MAX_NODES);
    let steps = rng.gen_range(1..=3);
    let (ks, ka) = (3, rng.gen_range(2..=5));
    let gold_s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ks)).collect();
    let gold_a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ka)).collect();
    let (gamma_s, gamma_a) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
    let mut store = ParamStore::new();
    let ls = step_logits(&mut store, n, ks, steps, "s", &mut rng)?;
    let la = step_logits(&mut store, n, ka, steps, "a", &mut rng)?;
    for component in ["loss.estimate", "loss.margin", "loss.total"] {
        let (ls, la, gold_s, gold_a) = (ls.clone(), la.clone(), gold_s.clone(), gold_a.clone());
        out.push(Case {
            component,
            nodes: n,
            store: store.clone(),
            f: Box::new(move |tape, store| {
                let ctx = Ctx::eval(store);
                let p_s = distributions(tape, &ctx, &ls);
                let p_a = distributions(tape, &ctx, &la);
                match component {
                    "loss.estimate" => estimate_loss(tape, &p_s, &gold_s),
                    "loss.margin" => margin_loss(tape, &p_a, &gold_a),
                    _ => {
                        let out = StepOutputs { p_s, p_a, attention: Vec::new() };
                        Ok(dialog_loss(tape, &out, &gold_s, &gold_a, gamma_s, gamma_a)?.total)
                    }
                }
            }),
            coords: None,
        });
    }

    for (component, variant) in [("model.rgcn", Variant::Rgcn), ("model.reteformer", Variant::Reteformer)] {
        let n = rng.gen_range(1..=MAX_NODES / 2);
        let cfg = ModelConfig {
            d_hidden: D,
            d_word: D_WORD,
            steps: 2,
            num_acts: 4,
            max_dialog_len: MAX_NODES,
            dropout: 0.0,
            ..ModelConfig::for_variant(variant)
        };
        let emb = Tensor::uniform(&[VOCAB, D_WORD], 1.0, &mut rng);
        let model = Darer::new(cfg, emb, rng.gen())?;
        let toks = tokens(n, &mut rng);
        let spk = speakers(n, &mut rng);
        let gold_s: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let gold_a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let store = model.store.clone();
        out.push(Case {
            component,
            nodes: 2 * n,
            store,
            f: Box::new(move |tape, store| {
                let mut ctx = Ctx::eval(store);
                let out = model.forward_dialog(tape, &mut ctx, &toks, &spk)?;
                let c = &model.config;
                Ok(dialog_loss(tape, &out, &gold_s, &gold_a, c.gamma_s, c.gamma_a)?.total)
            }),
            coords: Some(MODEL_COORDS),
        });
    }
    Ok(out)
}

/// Runs every component check for one seed.
pub fn gradient_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<ComponentCheck>> {
    cases(seed)?
        .into_iter()
        .map(|case| {
            let report = grad_check_params(&case.store, h, tol, case.coords, &case.f)?;
            let (worst, max_error) = report
                .entries
                .iter()
                .fold(("".to_string(), 0.0f64), |(wn, we), (n, e)| if *e > we { (n.clone(), *e) } else { (wn, we) });
            Ok(ComponentCheck {
                component: case.component.to_string(),
                seed,
                nodes: case.nodes,
                max_error,
                worst,
                passed: report.passed(),
            })
        })
        .collect()
}
