use rand::Rng;

use super::{xavier, Ctx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Label embedding matrix `K × d` (one row per label).
#[derive(Clone, Debug)]
pub struct LabelEmbeddings {
    pub matrix: ParamId,
    num_labels: usize,
    d: usize,
}

impl LabelEmbeddings {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, num_labels: usize, d: usize, rng: &mut R) -> Result<Self> {
        let matrix = store.add(name.to_string(), xavier(num_labels, d, rng))?;
        Ok(LabelEmbeddings { matrix, num_labels, d })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    /// Label-aware utterance representations `E = P·M`. Every row of `p`
    /// must be a probability distribution over the labels.
    pub fn project(&self, tape: &mut Tape, ctx: &Ctx, p: Var) -> Result<Var> {
        let value = tape.value(p);
        let (n, k) = value.dims2();
        if k != self.num_labels {
            return Err(Error::shape("label projection", value.shape(), &[n, self.num_labels]));
        }
        for i in 0..n {
            let total: f64 = value.row_slice(i).iter().sum();
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "label distribution row {i} sums to {total}"
                )));
            }
        }
        let m = ctx.param(tape, self.matrix);
        let e = tape.matmul(p, m)?;
        debug_assert_eq!(tape.value(e).cols(), self.d);
        Ok(e)
    }
}

/// Task decoder producing a label distribution per utterance:
/// `softmax(h·Wᵀ + b)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub linear: Linear,
}

impl Decoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, num_labels: usize, rng: &mut R) -> Result<Self> {
        Ok(Decoder {
            linear: Linear::new(store, name, d, num_labels, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, h: Var) -> Result<Var> {
        let logits = self.linear.forward(tape, ctx, h)?;
        Ok(tape.softmax(logits))
    }
}

/// `h + e_s + e_a`, fusing both tasks' label information into a hidden state.
pub fn superimpose(tape: &mut Tape, h: Var, e_s: Var, e_a: Var) -> Result<Var> {
    let x = tape.add(h, e_s)?;
    tape.add(x, e_a)
}
