use rand::Rng;

use super::{xavier, Ctx, Linear};
use crate::error::{Error, Result};
use crate::graphs::RelationalGraph;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Per-relation attention head parameters.
#[derive(Clone, Debug)]
pub struct RelationHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub u_q: ParamId,
    pub u_k: ParamId,
}

/// Relational temporal transformer layer.
///
/// One attention head per relation. Content and position correlations use
/// separate projections and are summed before the relation's adjacency masks
/// the scores. Head outputs are summed, then pass through the usual
/// add & norm → feed-forward → add & norm sublayers.
#[derive(Clone, Debug)]
pub struct ReTeFormer {
    pub heads: Vec<RelationHead>,
    pub position_table: ParamId,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm1: (ParamId, ParamId),
    pub norm2: (ParamId, ParamId),
    d: usize,
    max_len: usize,
}

/// Position-term scores of every relation for one set of node positions.
/// They depend only on parameters and positions, so one cache serves every
/// reasoning step of a forward pass.
#[derive(Debug, Default)]
pub struct PositionCache {
    positions: Vec<usize>,
    scores: Vec<Option<Var>>,
}

/// Inputs of one sentiment-node → act-node correlation score after label
/// superimposition.
#[derive(Clone, Debug)]
pub struct ScoreInputs {
    /// hidden state of the query (sentiment) node before superimposition
    pub h_s: Vec<f64>,
    /// hidden state of the key (act) node before superimposition
    pub h_a: Vec<f64>,
    pub e_s_i: Vec<f64>,
    pub e_a_i: Vec<f64>,
    pub e_s_j: Vec<f64>,
    pub e_a_j: Vec<f64>,
    pub pos_i: usize,
    pub pos_j: usize,
}

/// A score computed directly and as its ten bilinear expansion terms:
/// semantics-semantics first, then the eight semantics/prediction cross
/// terms in expansion order, then the position term.
#[derive(Clone, Debug)]
pub struct ScoreDecomposition {
    pub direct: f64,
    pub terms: [f64; 10],
}

impl ScoreDecomposition {
    pub fn residual(&self) -> f64 {
        (self.direct - self.terms.iter().sum::<f64>()).abs()
    }
}

const LN_EPS: f64 = 1e-5;

impl ReTeFormer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        num_relations: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut heads = Vec::with_capacity(num_relations);
        for r in 1..=num_relations {
            let mut mk = |part: &str| store.add(format!("{name}.rel{r}.{part}"), xavier(d, d, rng));
            heads.push(RelationHead {
                w_q: mk("w_q")?,
                w_k: mk("w_k")?,
                w_v: mk("w_v")?,
                u_q: mk("u_q")?,
                u_k: mk("u_k")?,
            });
        }
        let position_table = store.add(
            format!("{name}.position"),
            Tensor::uniform(&[max_len, d], 0.1, rng),
        )?;
        let ff_in = Linear::new(store, &format!("{name}.ff_in"), d, 4 * d, true, rng)?;
        let ff_out = Linear::new(store, &format!("{name}.ff_out"), 4 * d, d, true, rng)?;
        let mut norm = |k: u8| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(format!("{name}.norm{k}.gamma"), Tensor::filled(&[1, d], 1.0))?,
                store.add(format!("{name}.norm{k}.beta"), Tensor::zeros(&[1, d]))?,
            ))
        };
        let norm1 = norm(1)?;
        let norm2 = norm(2)?;
        Ok(ReTeFormer {
            heads,
            position_table,
            ff_in,
            ff_out,
            norm1,
            norm2,
            d,
            max_len,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d as f64).sqrt()
    }

    fn check_positions(&self, positions: &[usize]) -> Result<()> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::Config(format!(
                "position {p} exceeds max_dialog_len {}",
                self.max_len
            )));
        }
        Ok(())
    }

    /// Position scores `(p_i U_Q)(p_j U_K)ᵀ / √d` for relation `r` (1-based),
    /// expanded to node order.
    fn position_scores(&self, tape: &mut Tape, ctx: &Ctx, positions: &[usize], r: usize) -> Result<Var> {
        self.check_positions(positions)?;
        let distinct = positions.iter().max().map_or(0, |m| m + 1);
        let head = &self.heads[r - 1];
        let table = ctx.param(tape, self.position_table);
        let idx: Vec<usize> = (0..distinct).collect();
        let p = tape.gather_rows(table, &idx)?;
        let uq = ctx.param(tape, head.u_q);
        let uk = ctx.param(tape, head.u_k);
        let qp = tape.matmul(p, uq)?;
        let kp = tape.matmul(p, uk)?;
        let (qp, kp) = if distinct == positions.len() && positions.iter().enumerate().all(|(i, &p)| i == p) {
            (qp, kp)
        } else {
            (tape.gather_rows(qp, positions)?, tape.gather_rows(kp, positions)?)
        };
        let s = tape.matmul_bt(qp, kp)?;
        Ok(tape.scale(s, self.scale()))
    }

    fn content_scores(&self, tape: &mut Tape, ctx: &Ctx, h: Var, r: usize) -> Result<Var> {
        let head = &self.heads[r - 1];
        let wq = ctx.param(tape, head.w_q);
        let wk = ctx.param(tape, head.w_k);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let s = tape.matmul_bt(q, k)?;
        Ok(tape.scale(s, self.scale()))
    }

    /// Unmasked correlation scores of relation `r` (1-based) for every node
    /// pair: content term plus position term.
    pub fn scores(&self, tape: &mut Tape, ctx: &Ctx, h: Var, positions: &[usize], r: usize) -> Result<Var> {
        self.check_input(tape, h, positions.len())?;
        let c = self.content_scores(tape, ctx, h, r)?;
        let p = self.position_scores(tape, ctx, positions, r)?;
        tape.add(c, p)
    }

    fn check_input(&self, tape: &Tape, h: Var, m: usize) -> Result<()> {
        if tape.value(h).dims2() != (m, self.d) {
            return Err(Error::shape("reteformer", tape.shape(h), &[m, self.d]));
        }
        Ok(())
    }

    /// Masked attention weights per relation, `None` for relations without
    /// edges. Dropout is applied to the weights during training.
    pub fn attention(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        graph: &RelationalGraph,
        h: Var,
        cache: &mut PositionCache,
    ) -> Result<Vec<Option<Var>>> {
        let positions = graph.node_position();
        self.check_input(tape, h, graph.num_nodes())?;
        if graph.num_relations() != self.heads.len() {
            return Err(Error::Config(format!(
                "graph has {} relations, layer expects {}",
                graph.num_relations(),
                self.heads.len()
            )));
        }
        if cache.positions != positions || cache.scores.len() != self.heads.len() {
            cache.positions = positions.to_vec();
            cache.scores = vec![None; self.heads.len()];
        }
        let mut out = Vec::with_capacity(self.heads.len());
        for r in 1..=self.heads.len() {
            if graph.edge_count(r) == 0 {
                out.push(None);
                continue;
            }
            let pos = match cache.scores[r - 1] {
                Some(v) => v,
                None => {
                    let v = self.position_scores(tape, ctx, positions, r)?;
                    cache.scores[r - 1] = Some(v);
                    v
                }
            };
            let content = self.content_scores(tape, ctx, h, r)?;
            let s = tape.add(content, pos)?;
            let a = tape.masked_softmax(s, &graph.incoming_mask(r))?;
            out.push(Some(a));
        }
        Ok(out)
    }

    /// Full layer forward; returns the output and the (pre-dropout) attention
    /// weights per relation.
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        graph: &RelationalGraph,
        h: Var,
        cache: &mut PositionCache,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let attn = self.attention(tape, ctx, graph, h, cache)?;
        let mut merged: Option<Var> = None;
        for (head, a) in self.heads.iter().zip(&attn) {
            let Some(a) = *a else { continue };
            let a = ctx.dropout(tape, a)?;
            let wv = ctx.param(tape, head.w_v);
            let v = tape.matmul(h, wv)?;
            let sub = tape.matmul(a, v)?;
            merged = Some(match merged {
                Some(m) => tape.add(m, sub)?,
                None => sub,
            });
        }
        let x = match merged {
            Some(m) => tape.add(h, m)?,
            None => h,
        };
        let (g1, b1) = (ctx.param(tape, self.norm1.0), ctx.param(tape, self.norm1.1));
        let x = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let f = self.ff_in.forward(tape, ctx, x)?;
        let f = tape.relu(f);
        let f = self.ff_out.forward(tape, ctx, f)?;
        let y = tape.add(x, f)?;
        let (g2, b2) = (ctx.param(tape, self.norm2.0), ctx.param(tape, self.norm2.1));
        let y = tape.layer_norm(y, g2, b2, LN_EPS)?;
        Ok((y, attn))
    }

    pub fn forward(&self, tape: &mut Tape, ctx: &mut Ctx, graph: &RelationalGraph, h: Var) -> Result<Var> {
        let mut cache = PositionCache::default();
        Ok(self.forward_with_attention(tape, ctx, graph, h, &mut cache)?.0)
    }

    /// Correlation score of relation `r` between a sentiment node `i` and an
    /// act node `j`, once through the layer's own scoring path on the
    /// superimposed states and once as the sum of its ten expansion terms.
    pub fn decompose_score(&self, store: &ParamStore, r: usize, x: &ScoreInputs) -> Result<ScoreDecomposition> {
        let d = self.d;
        for v in [&x.h_s, &x.h_a, &x.e_s_i, &x.e_a_i, &x.e_s_j, &x.e_a_j] {
            if v.len() != d {
                return Err(Error::shape("decompose_score", &[v.len()], &[d]));
            }
        }
        let sum3 = |a: &[f64], b: &[f64], c: &[f64]| -> Vec<f64> {
            a.iter().zip(b).zip(c).map(|((x, y), z)| x + y + z).collect()
        };
        let hi = sum3(&x.h_s, &x.e_s_i, &x.e_a_i);
        let hj = sum3(&x.h_a, &x.e_s_j, &x.e_a_j);

        let ctx = Ctx::eval(store);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, d, [hi, hj].concat())?);
        let s = self.scores(&mut tape, &ctx, h, &[x.pos_i, x.pos_j], r)?;
        let direct = tape.value(s).get(0, 1);

        let head = &self.heads[r - 1];
        let bilinear = store.get(head.w_q).matmul(&store.get(head.w_k).transpose())?;
        let form = |a: &[f64], b: &[f64]| -> f64 {
            let mut s = 0.0;
            for (p, ap) in a.iter().enumerate() {
                let row = bilinear.row_slice(p);
                s += ap * row.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
            }
            s * self.scale()
        };
        let table = store.get(self.position_table);
        let qp = Tensor::row(table.row_slice(x.pos_i).to_vec()).matmul(store.get(head.u_q))?;
        let kp = Tensor::row(table.row_slice(x.pos_j).to_vec()).matmul(store.get(head.u_k))?;
        let position: f64 = qp.data().iter().zip(kp.data()).map(|(a, b)| a * b).sum::<f64>() * self.scale();

        let lefts = [&x.h_s, &x.e_s_i, &x.e_a_i];
        let rights = [&x.h_a, &x.e_s_j, &x.e_a_j];
        let mut terms = [0.0; 10];
        for (a, l) in lefts.iter().enumerate() {
            for (b, r) in rights.iter().enumerate() {
                terms[a * 3 + b] = form(l, r);
            }
        }
        terms[9] = position;
        Ok(ScoreDecomposition { direct, terms })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::{build_drtg, build_satg};
    use crate::tensor::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(d: usize, rels: usize, seed: u64) -> (ParamStore, ReTeFormer, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layer = ReTeFormer::new(&mut store, "t", d, rels, 16, &mut rng).unwrap();
        // perturb norm parameters away from identity so they are exercised
        for id in [layer.norm1.0, layer.norm1.1, layer.norm2.0, layer.norm2.1] {
            let noise = Tensor::uniform(&[1, d], 0.3, &mut rng);
            for (v, n) in store.get_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        (store, layer, rng)
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
        (0..w.cols()).map(|c| (0..x.len()).map(|r| x[r] * w.get(r, c)).sum()).collect()
    }

    fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(k, v)| g[k] * (v - mean) / (var + LN_EPS).sqrt() + b[k])
            .collect()
    }

    /// Per-relation, per-edge loop oracle of the whole layer.
    fn oracle(store: &ParamStore, l: &ReTeFormer, g: &RelationalGraph, h: &Tensor) -> Tensor {
        let (m, d) = h.dims2();
        let sc = 1.0 / (d as f64).sqrt();
        let pos = g.node_position();
        let table = store.get(l.position_table);
        let mut out = Vec::new();
        for i in 0..m {
            let mut acc = vec![0.0; d];
            for (r0, head) in l.heads.iter().enumerate() {
                let r = r0 + 1;
                let nbrs: Vec<usize> = (0..m).filter(|&j| g.has_edge(r, j, i)).collect();
                if nbrs.is_empty() {
                    continue;
                }
                let qi = vecmat(h.row_slice(i), store.get(head.w_q));
                let pqi = vecmat(table.row_slice(pos[i]), store.get(head.u_q));
                let raw: Vec<f64> = nbrs
                    .iter()
                    .map(|&j| {
                        let kj = vecmat(h.row_slice(j), store.get(head.w_k));
                        let pkj = vecmat(table.row_slice(pos[j]), store.get(head.u_k));
                        sc * dot(&qi, &kj) + sc * dot(&pqi, &pkj)
                    })
                    .collect();
                let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = raw.iter().map(|s| (s - mx).exp()).sum();
                for (k, &j) in nbrs.iter().enumerate() {
                    let a = (raw[k] - mx).exp() / z;
                    let v = vecmat(h.row_slice(j), store.get(head.w_v));
                    for c in 0..d {
                        acc[c] += a * v[c];
                    }
                }
            }
            let x: Vec<f64> = h.row_slice(i).iter().zip(&acc).map(|(a, b)| a + b).collect();
            let x = layer_norm(&x, store.get(l.norm1.0).data(), store.get(l.norm1.1).data());
            let w1 = store.get(l.ff_in.weight).transpose();
            let b1 = store.get(l.ff_in.bias.unwrap()).data();
            let hid: Vec<f64> = vecmat(&x, &w1).iter().zip(b1).map(|(a, b)| (a + b).max(0.0)).collect();
            let w2 = store.get(l.ff_out.weight).transpose();
            let b2 = store.get(l.ff_out.bias.unwrap()).data();
            let f: Vec<f64> = vecmat(&hid, &w2).iter().zip(b2).map(|(a, b)| a + b).collect();
            let y: Vec<f64> = x.iter().zip(&f).map(|(a, b)| a + b).collect();
            out.extend(layer_norm(&y, store.get(l.norm2.0).data(), store.get(l.norm2.1).data()));
        }
        Tensor::matrix(m, d, out).unwrap()
    }

    fn run(store: &ParamStore, l: &ReTeFormer, g: &RelationalGraph, h: &Tensor) -> (Tensor, Vec<Option<Tensor>>) {
        let mut ctx = Ctx::eval(store);
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let mut cache = PositionCache::default();
        let (y, attn) = l.forward_with_attention(&mut tape, &mut ctx, g, hv, &mut cache).unwrap();
        (
            tape.value(y).clone(),
            attn.into_iter().map(|a| a.map(|a| tape.value(a).clone())).collect(),
        )
    }

    #[test]
    fn matches_oracle_on_small_graphs() {
        for seed in 0..10 {
            let (store, sat, mut rng) = setup(4, 8, seed);
            for n in 1..=5 {
                let speakers: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=2)).collect();
                let g = build_satg(&speakers, 2).unwrap();
                let h = Tensor::uniform(&[n, 4], 1.0, &mut rng);
                let (y, _) = run(&store, &sat, &g, &h);
                assert!(y.max_abs_diff(&oracle(&store, &sat, &g, &h)) < 1e-9);
            }
            let (store, dtr, mut rng) = setup(4, 12, seed + 50);
            for n in 1..=4 {
                let g = build_drtg(n).unwrap();
                let h = Tensor::uniform(&[2 * n, 4], 1.0, &mut rng);
                let (y, attn) = run(&store, &dtr, &g, &h);
                assert!(y.max_abs_diff(&oracle(&store, &dtr, &g, &h)) < 1e-9);
                for (r0, a) in attn.iter().enumerate() {
                    let Some(a) = a else { continue };
                    for i in 0..2 * n {
                        let total: f64 = a.row_slice(i).iter().sum();
                        if g.neighbor_count(r0 + 1, i) > 0 {
                            assert!((total - 1.0).abs() < 1e-9);
                        } else {
                            assert_eq!(total, 0.0);
                        }
                        for j in 0..2 * n {
                            if !g.has_edge(r0 + 1, j, i) {
                                assert_eq!(a.get(i, j), 0.0);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn permutation_consistent() {
        use rand::seq::SliceRandom;
        let (store, l, mut rng) = setup(4, 12, 11);
        for n in 1..=4 {
            let g = build_drtg(n).unwrap();
            let h = Tensor::uniform(&[2 * n, 4], 1.0, &mut rng);
            let mut perm: Vec<usize> = (0..2 * n).collect();
            perm.shuffle(&mut rng);
            let pg = g.permuted(&perm).unwrap();
            let mut ph = vec![0.0; 8 * n];
            for i in 0..2 * n {
                ph[perm[i] * 4..perm[i] * 4 + 4].copy_from_slice(h.row_slice(i));
            }
            let ph = Tensor::matrix(2 * n, 4, ph).unwrap();
            let (y, attn) = run(&store, &l, &g, &h);
            let (py, pattn) = run(&store, &l, &pg, &ph);
            for i in 0..2 * n {
                for c in 0..4 {
                    assert!((y.get(i, c) - py.get(perm[i], c)).abs() < 1e-12);
                }
            }
            for (a, pa) in attn.iter().zip(&pattn) {
                let (Some(a), Some(pa)) = (a, pa) else {
                    assert_eq!(a.is_some(), pa.is_some());
                    continue;
                };
                for i in 0..2 * n {
                    for j in 0..2 * n {
                        assert!((a.get(i, j) - pa.get(perm[i], perm[j])).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn isolated_node_uses_residual_path_only() {
        let (store, l, mut rng) = setup(4, 8, 1);
        let g = build_satg(&[1], 2).unwrap();
        let h = Tensor::uniform(&[1, 4], 1.0, &mut rng);
        let (y, attn) = run(&store, &l, &g, &h);
        assert!(attn.iter().all(Option::is_none));
        assert!(y.max_abs_diff(&oracle(&store, &l, &g, &h)) < 1e-12);
    }

    #[test]
    fn score_properties() {
        let (mut store, l, mut rng) = setup(4, 12, 2);
        let ctx = Ctx::eval(&store);
        let mut tape = Tape::new();
        let h1 = tape.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let h2 = tape.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
        // position term alone does not depend on H
        let p1 = l.position_scores(&mut tape, &ctx, &[0, 1, 2], 3).unwrap();
        let s1 = l.scores(&mut tape, &ctx, h1, &[0, 1, 2], 3).unwrap();
        let c1 = l.content_scores(&mut tape, &ctx, h1, 3).unwrap();
        let p2 = l.position_scores(&mut tape, &ctx, &[0, 1, 2], 3).unwrap();
        assert_eq!(tape.value(p1), tape.value(p2));
        let sum = tape.add(c1, p1).unwrap();
        assert!(tape.value(sum).max_abs_diff(tape.value(s1)) < 1e-12);
        let _ = h2;
        assert!(matches!(
            l.scores(&mut tape, &ctx, h1, &[0, 1, 16], 3),
            Err(Error::Config(_))
        ));

        let head = l.heads[2].clone();
        for id in [head.w_q, head.w_k, head.u_q, head.u_k] {
            *store.get_mut(id) = Tensor::zeros(&[4, 4]);
        }
        let ctx = Ctx::eval(&store);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::uniform(&[3, 4], 1.0, &mut rng));
        let s = l.scores(&mut tape, &ctx, h, &[0, 1, 2], 3).unwrap();
        assert!(tape.value(s).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scores_match_direct_recomputation() {
        for seed in 0..10 {
            let (store, l, mut rng) = setup(5, 12, seed);
            let h = Tensor::uniform(&[4, 5], 1.0, &mut rng);
            let positions = [0, 1, 0, 1];
            let r = 1 + (seed as usize % 12);
            let ctx = Ctx::eval(&store);
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let s = l.scores(&mut tape, &ctx, hv, &positions, r).unwrap();
            let head = &l.heads[r - 1];
            let table = store.get(l.position_table);
            let sc = 1.0 / 5f64.sqrt();
            for i in 0..4 {
                for j in 0..4 {
                    let q = vecmat(h.row_slice(i), store.get(head.w_q));
                    let k = vecmat(h.row_slice(j), store.get(head.w_k));
                    let pq = vecmat(table.row_slice(positions[i]), store.get(head.u_q));
                    let pk = vecmat(table.row_slice(positions[j]), store.get(head.u_k));
                    let want = sc * dot(&q, &k) + sc * dot(&pq, &pk);
                    assert!((tape.value(s).get(i, j) - want).abs() < 1e-12);
                }
            }
        }
    }

    fn random_inputs(d: usize, rng: &mut ChaCha8Rng) -> ScoreInputs {
        let mut v = || Tensor::uniform(&[d], 1.0, rng).into_data();
        ScoreInputs {
            h_s: v(),
            h_a: v(),
            e_s_i: v(),
            e_a_i: v(),
            e_s_j: v(),
            e_a_j: v(),
            pos_i: 2,
            pos_j: 5,
        }
    }

    #[test]
    fn decomposition_identity() {
        let (mut store, l, mut rng) = setup(6, 12, 7);
        for _ in 0..20 {
            let x = random_inputs(6, &mut rng);
            let dec = l.decompose_score(&store, 7, &x).unwrap();
            assert!(dec.residual() < 1e-8, "{dec:?}");
        }
        let mut x = random_inputs(6, &mut rng);
        for v in [&mut x.e_s_i, &mut x.e_a_i, &mut x.e_s_j, &mut x.e_a_j] {
            v.fill(0.0);
        }
        let dec = l.decompose_score(&store, 7, &x).unwrap();
        assert!(dec.terms[1..9].iter().all(|t| *t == 0.0));
        assert!((dec.terms[0] + dec.terms[9] - dec.direct).abs() < 1e-12);

        let x = random_inputs(6, &mut rng);
        let before = l.decompose_score(&store, 7, &x).unwrap();
        let head = l.heads[6].clone();
        *store.get_mut(head.u_q) = Tensor::zeros(&[6, 6]);
        let after = l.decompose_score(&store, 7, &x).unwrap();
        assert_eq!(after.terms[9], 0.0);
        assert!(before.terms[9].abs() > 0.0);
        assert_eq!(&before.terms[..9], &after.terms[..9]);
    }

    #[test]
    fn gradients() {
        let (store, l, mut rng) = setup(3, 12, 9);
        let g = build_drtg(2).unwrap();
        let h = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let report = grad_check_params(&store, 1e-5, 1e-4, None, |tape, s| {
            let mut ctx = Ctx::eval(s);
            let hv = tape.constant(h.clone());
            let y = l.forward(tape, &mut ctx, &g, hv)?;
            let w = tape.constant(Tensor::uniform(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
            let y = tape.mul(y, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
