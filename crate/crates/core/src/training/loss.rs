use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StepOutputs;
use crate::tensor::{Tape, Tensor, Var};

/// Clamp applied inside every log.
pub const LOG_EPS: f64 = 1e-12;

/// Summed negative log-likelihood of the gold labels under `p`.
pub fn nll(tape: &mut Tape, p: Var, gold: &[usize]) -> Result<Var> {
    let picked = tape.pick(p, gold)?;
    let logs = tape.log_clamp(picked, LOG_EPS);
    let s = tape.sum(logs);
    Ok(tape.scale(s, -1.0))
}

/// NLL summed over the intermediate steps `p[0..T]` (all but the last).
pub fn estimate_loss(tape: &mut Tape, p: &[Var], gold: &[usize]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &pt in &p[..p.len().saturating_sub(1)] {
        let l = nll(tape, pt, gold)?;
        acc = tape.add(acc, l)?;
    }
    Ok(acc)
}

/// Hinge on every step-to-step drop of the gold-label probability:
/// `Σ_t Σ_i max(0, p_i^{t-1}[y_i] − p_i^t[y_i])`.
pub fn margin_loss(tape: &mut Tape, p: &[Var], gold: &[usize]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for pair in p.windows(2) {
        let before = tape.pick(pair[0], gold)?;
        let after = tape.pick(pair[1], gold)?;
        let drop = tape.sub(before, after)?;
        let hinge = tape.relu(drop);
        let s = tape.sum(hinge);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

/// Loss terms of one forward pass, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub prediction_s: Var,
    pub prediction_a: Var,
    pub estimate_s: Var,
    pub estimate_a: Var,
    pub margin_s: Var,
    pub margin_a: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub prediction_s: f64,
    pub prediction_a: f64,
    pub estimate_s: f64,
    pub estimate_a: f64,
    pub margin_s: f64,
    pub margin_a: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read(tape: &Tape, v: &LossVars) -> Self {
        let get = |x: Var| tape.value(x).item();
        LossBreakdown {
            prediction_s: get(v.prediction_s),
            prediction_a: get(v.prediction_a),
            estimate_s: get(v.estimate_s),
            estimate_a: get(v.estimate_a),
            margin_s: get(v.margin_s),
            margin_a: get(v.margin_a),
            total: get(v.total),
        }
    }

    /// The total as recomputed from the parts.
    pub fn recompose(&self, gamma_s: f64, gamma_a: f64) -> f64 {
        self.prediction_s
            + self.prediction_a
            + self.estimate_s
            + self.estimate_a
            + gamma_s * self.margin_s
            + gamma_a * self.margin_a
    }

    /// Checks the total against its parts.
    pub fn check(&self, gamma_s: f64, gamma_a: f64) -> Result<()> {
        let want = self.recompose(gamma_s, gamma_a);
        if (self.total - want).abs() > 1e-9 * want.abs().max(1.0) {
            return Err(Error::Contract(format!(
                "loss total {} differs from its parts {want}",
                self.total
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.prediction_s += o.prediction_s;
        self.prediction_a += o.prediction_a;
        self.estimate_s += o.estimate_s;
        self.estimate_a += o.estimate_a;
        self.margin_s += o.margin_s;
        self.margin_a += o.margin_a;
        self.total += o.total;
    }

    pub fn scaled(&self, s: f64) -> Self {
        LossBreakdown {
            prediction_s: self.prediction_s * s,
            prediction_a: self.prediction_a * s,
            estimate_s: self.estimate_s * s,
            estimate_a: self.estimate_a * s,
            margin_s: self.margin_s * s,
            margin_a: self.margin_a * s,
            total: self.total * s,
        }
    }
}

/// Full objective of one dialog: final-step prediction losses, estimate
/// losses over the earlier steps and γ-weighted margin losses.
pub fn dialog_loss(
    tape: &mut Tape,
    out: &StepOutputs,
    gold_s: &[usize],
    gold_a: &[usize],
    gamma_s: f64,
    gamma_a: f64,
) -> Result<LossVars> {
    let last_s = *out.p_s.last().ok_or(Error::EmptySequence("step outputs"))?;
    let last_a = *out.p_a.last().ok_or(Error::EmptySequence("step outputs"))?;
    let prediction_s = nll(tape, last_s, gold_s)?;
    let prediction_a = nll(tape, last_a, gold_a)?;
    let estimate_s = estimate_loss(tape, &out.p_s, gold_s)?;
    let estimate_a = estimate_loss(tape, &out.p_a, gold_a)?;
    let margin_s = margin_loss(tape, &out.p_s, gold_s)?;
    let margin_a = margin_loss(tape, &out.p_a, gold_a)?;
    let mut total = tape.add(prediction_s, prediction_a)?;
    total = tape.add(total, estimate_s)?;
    total = tape.add(total, estimate_a)?;
    if gamma_s != 0.0 {
        let m = tape.scale(margin_s, gamma_s);
        total = tape.add(total, m)?;
    }
    if gamma_a != 0.0 {
        let m = tape.scale(margin_a, gamma_a);
        total = tape.add(total, m)?;
    }
    Ok(LossVars {
        prediction_s,
        prediction_a,
        estimate_s,
        estimate_a,
        margin_s,
        margin_a,
        total,
    })
}
