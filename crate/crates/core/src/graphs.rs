//! Speaker-aware temporal graphs (SATG) over utterances and dual-task
//! reasoning temporal graphs (DRTG) over sentiment/act node pairs.
//!
//! Both graphs are complete directed graphs without self-loops whose edges are
//! partitioned into relation views. Relation ids are 1-based; view `r` is
//! stored at index `r - 1`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Temporal comparison used by SATG relations. `After` means the edge source
/// comes strictly later than the target; everything else is `NotAfter`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SatPos {
    After,
    NotAfter,
}

/// Temporal comparison used by DRTG relations (source position vs target
/// position).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DrtgPos {
    Before,
    Equal,
    After,
}

impl DrtgPos {
    fn of(src: usize, dst: usize) -> Self {
        match src.cmp(&dst) {
            std::cmp::Ordering::Less => DrtgPos::Before,
            std::cmp::Ordering::Equal => DrtgPos::Equal,
            std::cmp::Ordering::Greater => DrtgPos::After,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            DrtgPos::Before => "<",
            DrtgPos::Equal => "=",
            DrtgPos::After => ">",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Task {
    Sentiment,
    Act,
}

impl Task {
    fn letter(self) -> &'static str {
        match self {
            Task::Sentiment => "S",
            Task::Act => "A",
        }
    }
}

/// SATG relation id in `1..=2·S²` for an edge from a speaker-`speaker_i`
/// utterance to a speaker-`speaker_j` utterance. Speaker ids are 1-based.
pub fn relation_id_satg(
    speaker_i: usize,
    speaker_j: usize,
    pos: SatPos,
    num_speakers: usize,
) -> Result<usize> {
    for s in [speaker_i, speaker_j] {
        if s == 0 || s > num_speakers {
            return Err(Error::Speaker {
                speaker: s,
                num_speakers,
            });
        }
    }
    let pair = (speaker_i - 1) * num_speakers + (speaker_j - 1);
    let offset = match pos {
        SatPos::After => 0,
        SatPos::NotAfter => 1,
    };
    Ok(pair * 2 + offset + 1)
}

/// DRTG relation id in `1..=12`.
pub fn relation_id_drtg(task_i: Task, task_j: Task, pos: DrtgPos) -> usize {
    let t = |t: Task| match t {
        Task::Sentiment => 0,
        Task::Act => 1,
    };
    let p = match pos {
        DrtgPos::Before => 0,
        DrtgPos::Equal => 1,
        DrtgPos::After => 2,
    };
    (t(task_i) * 2 + t(task_j)) * 3 + p + 1
}

pub const DRTG_RELATIONS: usize = 12;

/// Relation-disentangled view of a complete directed graph.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RelationalGraph {
    num_nodes: usize,
    /// `adjacency[r][i * n + j]` is true iff edge `i → j` has relation `r + 1`.
    adjacency: Vec<Vec<bool>>,
    node_position: Vec<usize>,
    node_task: Vec<Option<Task>>,
    relation_names: Vec<String>,
}

impl RelationalGraph {
    fn empty(
        num_nodes: usize,
        num_relations: usize,
        node_position: Vec<usize>,
        node_task: Vec<Option<Task>>,
        relation_names: Vec<String>,
    ) -> Self {
        RelationalGraph {
            num_nodes,
            adjacency: vec![vec![false; num_nodes * num_nodes]; num_relations],
            node_position,
            node_task,
            relation_names,
        }
    }

    /// The same graph with node `i` relabeled `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("not a permutation of {n} nodes: {perm:?}")));
        }
        let mut out = self.clone();
        for (view, old) in out.adjacency.iter_mut().zip(&self.adjacency) {
            for i in 0..n {
                for j in 0..n {
                    view[perm[i] * n + perm[j]] = old[i * n + j];
                }
            }
        }
        for i in 0..n {
            out.node_position[perm[i]] = self.node_position[i];
            out.node_task[perm[i]] = self.node_task[i];
        }
        Ok(out)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_relations(&self) -> usize {
        self.adjacency.len()
    }

    /// Whether edge `i → j` belongs to relation `r` (1-based).
    pub fn has_edge(&self, r: usize, i: usize, j: usize) -> bool {
        self.adjacency[r - 1][i * self.num_nodes + j]
    }

    /// Row-major `N × N` adjacency of relation `r` (1-based).
    pub fn view(&self, r: usize) -> &[bool] {
        &self.adjacency[r - 1]
    }

    /// Attention mask of relation `r`: entry `(i, j)` is true iff `j → i` is
    /// an edge, so row `i` ranges over the in-neighbors of node `i`.
    pub fn incoming_mask(&self, r: usize) -> Vec<bool> {
        let n = self.num_nodes;
        let a = self.view(r);
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = a[j * n + i];
            }
        }
        mask
    }

    /// `|N_i^r|`: number of in-neighbors of node `i` under relation `r`.
    pub fn neighbor_count(&self, r: usize, i: usize) -> usize {
        let n = self.num_nodes;
        let a = self.view(r);
        (0..n).filter(|&j| a[j * n + i]).count()
    }

    pub fn edge_count(&self, r: usize) -> usize {
        self.view(r).iter().filter(|b| **b).count()
    }

    pub fn total_edges(&self) -> usize {
        (1..=self.num_relations()).map(|r| self.edge_count(r)).sum()
    }

    pub fn node_position(&self) -> &[usize] {
        &self.node_position
    }

    pub fn node_task(&self) -> &[Option<Task>] {
        &self.node_task
    }

    pub fn relation_name(&self, r: usize) -> &str {
        &self.relation_names[r - 1]
    }

    fn set(&mut self, r: usize, i: usize, j: usize) {
        let n = self.num_nodes;
        self.adjacency[r - 1][i * n + j] = true;
    }
}

/// Builds the SATG of a dialog from its 1-based speaker ids, one node per
/// utterance.
pub fn build_satg(speakers: &[usize], num_speakers: usize) -> Result<RelationalGraph> {
    if speakers.is_empty() {
        return Err(Error::EmptyDialog);
    }
    if let Some(&speaker) = speakers.iter().find(|&&s| s == 0 || s > num_speakers) {
        return Err(Error::Speaker {
            speaker,
            num_speakers,
        });
    }
    let n = speakers.len();
    let num_relations = 2 * num_speakers * num_speakers;
    let mut names = Vec::with_capacity(num_relations);
    for si in 1..=num_speakers {
        for sj in 1..=num_speakers {
            names.push(format!("sp{si}->sp{sj} >"));
            names.push(format!("sp{si}->sp{sj} <="));
        }
    }
    let mut g = RelationalGraph::empty(n, num_relations, (0..n).collect(), vec![None; n], names);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pos = if i > j { SatPos::After } else { SatPos::NotAfter };
            let r = relation_id_satg(speakers[i], speakers[j], pos, num_speakers)?;
            g.set(r, i, j);
        }
    }
    Ok(g)
}

/// Builds the DRTG for `n` utterances: nodes `0..n` are sentiment nodes,
/// `n..2n` the act nodes of the same utterances.
pub fn build_drtg(n: usize) -> Result<RelationalGraph> {
    if n == 0 {
        return Err(Error::EmptyDialog);
    }
    let mut names = Vec::with_capacity(DRTG_RELATIONS);
    for ti in [Task::Sentiment, Task::Act] {
        for tj in [Task::Sentiment, Task::Act] {
            for p in [DrtgPos::Before, DrtgPos::Equal, DrtgPos::After] {
                names.push(format!("{}->{} {}", ti.letter(), tj.letter(), p.symbol()));
            }
        }
    }
    let positions: Vec<usize> = (0..2 * n).map(|k| k % n).collect();
    let tasks: Vec<Option<Task>> = (0..2 * n)
        .map(|k| Some(if k < n { Task::Sentiment } else { Task::Act }))
        .collect();
    let mut g = RelationalGraph::empty(2 * n, DRTG_RELATIONS, positions, tasks, names);
    for i in 0..2 * n {
        for j in 0..2 * n {
            if i == j {
                continue;
            }
            let ti = g.node_task[i].expect("drtg nodes are tagged");
            let tj = g.node_task[j].expect("drtg nodes are tagged");
            let pos = DrtgPos::of(g.node_position[i], g.node_position[j]);
            g.set(relation_id_drtg(ti, tj, pos), i, j);
        }
    }
    Ok(g)
}
