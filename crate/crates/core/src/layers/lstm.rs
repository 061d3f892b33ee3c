use rand::Rng;

use super::{Ctx, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Unidirectional LSTM cell, row-vector convention:
/// `z = x·W_ih + h·W_hh + b`, gates ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    d_in: usize,
    hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Lstm {
            w_ih: store.add(
                format!("{name}.w_ih"),
                Tensor::uniform(&[d_in, 4 * hidden], bound, rng),
            )?,
            w_hh: store.add(
                format!("{name}.w_hh"),
                Tensor::uniform(&[hidden, 4 * hidden], bound, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, 4 * hidden]))?,
            d_in,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Input projection `x·W_ih + b` for all rows at once.
    fn project(&self, tape: &mut Tape, ctx: &Ctx, x: Var) -> Result<Var> {
        let w = ctx.param(tape, self.w_ih);
        let b = ctx.param(tape, self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }

    /// Gate update from pre-activations that already include the input term.
    fn cell(
        &self,
        tape: &mut Tape,
        ctx: &Ctx,
        z_in: Var,
        state: Option<(Var, Var)>,
    ) -> Result<(Var, Var)> {
        let hsz = self.hidden;
        let z = match state {
            Some((h, _)) => {
                let w = ctx.param(tape, self.w_hh);
                let rec = tape.matmul(h, w)?;
                tape.add(z_in, rec)?
            }
            None => z_in,
        };
        let act = tape.sigmoid(z);
        let i = tape.slice_cols(act, 0, hsz)?;
        let f = tape.slice_cols(act, hsz, hsz)?;
        let o = tape.slice_cols(act, 3 * hsz, hsz)?;
        let g = tape.slice_cols(z, 2 * hsz, hsz)?;
        let g = tape.tanh(g);
        let ig = tape.mul(i, g)?;
        let c = match state {
            Some((_, c_prev)) => {
                let fc = tape.mul(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }

    /// One step from an explicit `(h, c)` state. `x` is `B × d_in`.
    pub fn step(&self, tape: &mut Tape, ctx: &Ctx, x: Var, state: (Var, Var)) -> Result<(Var, Var)> {
        if tape.value(x).cols() != self.d_in {
            return Err(Error::shape("lstm_step", tape.shape(x), &[self.d_in]));
        }
        let z = self.project(tape, ctx, x)?;
        self.cell(tape, ctx, z, Some(state))
    }

    /// Runs over a time-major batch: `x` holds `steps` blocks of `batch` rows.
    /// Returns the hidden state block of every step, starting from zeros.
    pub fn run(&self, tape: &mut Tape, ctx: &Ctx, x: Var, batch: usize) -> Result<Vec<Var>> {
        let rows = tape.value(x).rows();
        if rows == 0 || rows % batch != 0 {
            return Err(Error::shape("lstm_run", tape.shape(x), &[batch]));
        }
        let z = self.project(tape, ctx, x)?;
        let mut state = None;
        let mut out = Vec::with_capacity(rows / batch);
        for t in 0..rows / batch {
            let zt = tape.slice_rows(z, t * batch, batch)?;
            let (h, c) = self.cell(tape, ctx, zt, state)?;
            out.push(h);
            state = Some((h, c));
        }
        Ok(out)
    }
}

/// Forward and backward LSTMs over one sequence; outputs are concatenated per
/// position (`L × 2h`).
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::new(store, &format!("{name}.fwd"), d_in, hidden, rng)?,
            bwd: Lstm::new(store, &format!("{name}.bwd"), d_in, hidden, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, x: Var) -> Result<Var> {
        let len = tape.value(x).rows();
        if len == 0 {
            return Err(Error::EmptySequence("bilstm"));
        }
        let f = self.fwd.run(tape, ctx, x, 1)?;
        let rev: Vec<usize> = (0..len).rev().collect();
        let xr = tape.gather_rows(x, &rev)?;
        let b = self.bwd.run(tape, ctx, xr, 1)?;
        let f = tape.concat_rows(&f)?;
        let b = tape.concat_rows(&b)?;
        let b = tape.gather_rows(b, &rev)?;
        tape.concat_cols(&[f, b])
    }
}

/// Utterance-level BiLSTM with hidden width `d` per direction, projected back
/// to `d`. Used for the initial task encoders and the per-step TS-LSTMs.
#[derive(Clone, Debug)]
pub struct TaskLstm {
    pub rnn: BiLstm,
    pub proj: Linear,
}

impl TaskLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(TaskLstm {
            rnn: BiLstm::new(store, &format!("{name}.rnn"), d, d, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), 2 * d, d, true, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, x: Var) -> Result<Var> {
        let h = self.rnn.forward(tape, ctx, x)?;
        self.proj.forward(tape, ctx, h)
    }
}
