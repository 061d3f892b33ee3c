//! Learnable building blocks. Each layer owns [`ParamId`]s into a shared
//! [`ParamStore`] and records its forward computation on a [`Tape`].

mod encoder;
mod labels;
mod lstm;
mod reteformer;
mod rgcn;

pub use encoder::UtteranceEncoder;
pub use labels::{superimpose, Decoder, LabelEmbeddings};
pub use lstm::{BiLstm, Lstm, TaskLstm};
pub use reteformer::{PositionCache, ReTeFormer, ScoreDecomposition, ScoreInputs};
pub use rgcn::Rgcn;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Per-forward state shared by all layers: the parameter values and, during
/// training, the dropout ratio and its random stream.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a> Ctx<'a> {
    /// Deterministic forward pass, dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Ctx {
            store,
            dropout: None,
        }
    }

    pub fn train(store: &'a ParamStore, dropout: f64, rng: ChaCha8Rng) -> Self {
        Ctx {
            store,
            dropout: (dropout > 0.0).then_some((dropout, rng)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn param(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(self.store, id)
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((p, rng)) => tape.dropout(x, *p, rng),
            None => Ok(x),
        }
    }
}

/// Glorot-uniform initialized `rows × cols` matrix.
pub(crate) fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(&[rows, cols], bound, rng)
}

/// Affine map `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier(d_out, d_in, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(tape, self.weight);
        let y = tape.matmul_bt(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(tape, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}
