use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Per-input maximum relative error between analytic and central-difference
/// gradients, `|analytic - numeric| / max(1, |analytic|)`.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_error() <= self.tol
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Checks the gradient of scalar `f` with respect to each tensor in `inputs`.
pub fn grad_check<F>(inputs: &[Tensor], h: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut entries = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        let mut worst = 0.0f64;
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let plus = eval(&work, &f)?;
            work[k].data_mut()[i] = orig - h;
            let minus = eval(&work, &f)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
        entries.push((format!("input{k}"), worst));
    }
    Ok(GradCheckReport { entries, tol })
}

/// Checks the gradient of scalar `f` with respect to every parameter in
/// `store`. With `max_per_param`, only that many evenly strided coordinates of
/// each parameter are perturbed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    h: f64,
    tol: f64,
    max_per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?.to_param_grads(store);

    let mut work = store.clone();
    let mut entries = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).numel();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        let mut worst = 0.0f64;
        for i in (0..n).step_by(stride) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let mut t = Tape::new();
            let out = f(&mut t, &work)?;
            let plus = t.value(out).item();
            work.get_mut(id).data_mut()[i] = orig - h;
            let mut t = Tape::new();
            let out = f(&mut t, &work)?;
            let minus = t.value(out).item();
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads.get(id).data()[i], numeric));
        }
        entries.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport { entries, tol })
}
