use rand::Rng;

use super::{BiLstm, Ctx};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Word-level BiLSTM followed by max-pooling over time, one vector per
/// utterance. Each direction has `d / 2` hidden units so the pooled
/// representation has width `d`.
#[derive(Clone, Debug)]
pub struct UtteranceEncoder {
    pub embedding: ParamId,
    pub rnn: BiLstm,
    d: usize,
}

impl UtteranceEncoder {
    /// `embeddings` is the initial `vocab × d_word` table.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        embeddings: Tensor,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d % 2 != 0 {
            return Err(Error::Config(format!("hidden size {d} must be even")));
        }
        let d_word = embeddings.cols();
        Ok(UtteranceEncoder {
            embedding: store.add("encoder.embedding", embeddings)?,
            rnn: BiLstm::new(store, "encoder.rnn", d_word, d / 2, rng)?,
            d,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Encodes `N` token-index sequences into an `N × d` matrix.
    ///
    /// All utterances advance in one time-major batch; shorter ones are padded
    /// with index 0 and their padded states are never read. The backward
    /// direction runs over each utterance's own reversed tokens.
    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, utterances: &[Vec<usize>]) -> Result<Var> {
        let n = utterances.len();
        if n == 0 {
            return Err(Error::EmptyDialog);
        }
        if utterances.iter().any(Vec::is_empty) {
            return Err(Error::EmptySequence("utterance"));
        }
        let max_len = utterances.iter().map(Vec::len).max().unwrap_or(0);
        let mut fwd_idx = Vec::with_capacity(max_len * n);
        let mut bwd_idx = Vec::with_capacity(max_len * n);
        for t in 0..max_len {
            for u in utterances {
                let l = u.len();
                fwd_idx.push(if t < l { u[t] } else { 0 });
                bwd_idx.push(if t < l { u[l - 1 - t] } else { 0 });
            }
        }
        let table = ctx.param(tape, self.embedding);
        let xf = tape.gather_rows(table, &fwd_idx)?;
        let xb = tape.gather_rows(table, &bwd_idx)?;
        let hf = self.rnn.fwd.run(tape, ctx, xf, n)?;
        let hb = self.rnn.bwd.run(tape, ctx, xb, n)?;
        let hf = tape.concat_rows(&hf)?;
        let hb = tape.concat_rows(&hb)?;

        let mut pooled = Vec::with_capacity(n);
        for (k, u) in utterances.iter().enumerate() {
            let l = u.len();
            let f_rows: Vec<usize> = (0..l).map(|p| p * n + k).collect();
            let b_rows: Vec<usize> = (0..l).map(|p| (l - 1 - p) * n + k).collect();
            let f = tape.gather_rows(hf, &f_rows)?;
            let b = tape.gather_rows(hb, &b_rows)?;
            let states = tape.concat_cols(&[f, b])?;
            pooled.push(tape.max_pool(states)?);
        }
        tape.concat_rows(&pooled)
    }
}
