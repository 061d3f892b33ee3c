use rand::Rng;

use super::{xavier, Ctx};
use crate::error::{Error, Result};
use crate::graphs::RelationalGraph;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Relational graph convolution:
/// `out_i = W_self·h_i + Σ_r Σ_{j ∈ N_i^r} W_r·h_j / |N_i^r|`.
///
/// No bias, so the layer is linear in its input.
#[derive(Clone, Debug)]
pub struct Rgcn {
    pub w_self: ParamId,
    pub w_rel: Vec<ParamId>,
    d: usize,
}

impl Rgcn {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        num_relations: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_self = store.add(format!("{name}.w_self"), xavier(d, d, rng))?;
        let w_rel = (1..=num_relations)
            .map(|r| store.add(format!("{name}.w_rel.{r}"), xavier(d, d, rng)))
            .collect::<Result<_>>()?;
        Ok(Rgcn { w_self, w_rel, d })
    }

    /// Mean-aggregation matrix of relation `r`: row `i` holds `1/|N_i^r|` at
    /// every in-neighbor `j`. `None` when the relation has no edges.
    pub fn aggregation(graph: &RelationalGraph, r: usize) -> Option<Tensor> {
        let n = graph.num_nodes();
        if graph.edge_count(r) == 0 {
            return None;
        }
        let mask = graph.incoming_mask(r);
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            let row = &mask[i * n..(i + 1) * n];
            let count = row.iter().filter(|b| **b).count();
            if count > 0 {
                let w = 1.0 / count as f64;
                for j in 0..n {
                    if row[j] {
                        data[i * n + j] = w;
                    }
                }
            }
        }
        Some(Tensor::matrix(n, n, data).expect("square"))
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &Ctx, graph: &RelationalGraph, h: Var) -> Result<Var> {
        let (m, d) = tape.value(h).dims2();
        if m != graph.num_nodes() || d != self.d {
            return Err(Error::shape(
                "rgcn",
                tape.shape(h),
                &[graph.num_nodes(), self.d],
            ));
        }
        if graph.num_relations() != self.w_rel.len() {
            return Err(Error::Config(format!(
                "graph has {} relations, layer expects {}",
                graph.num_relations(),
                self.w_rel.len()
            )));
        }
        let w = ctx.param(tape, self.w_self);
        let mut out = tape.matmul_bt(h, w)?;
        for (k, &pid) in self.w_rel.iter().enumerate() {
            let Some(agg) = Self::aggregation(graph, k + 1) else {
                continue;
            };
            let agg = tape.constant(agg);
            let w = ctx.param(tape, pid);
            let msg = tape.matmul_bt(h, w)?;
            let msg = tape.matmul(agg, msg)?;
            out = tape.add(out, msg)?;
        }
        Ok(out)
    }
}
