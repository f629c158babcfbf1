//! Augmented variables with neighbor copies, the consensus projection, and a
//! lock-step message fabric over the vehicle graph.
//!
//! Agent `i` holds one local vector over `members(i) = {i} ∪ N_i` in
//! ascending vehicle order; the entry for `i` is its own block, the others are
//! its copies of the neighbors' blocks.

use std::collections::{BTreeSet, VecDeque};
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VehicleGraph {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl VehicleGraph {
    pub fn chain(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::new(n, &edges).expect("chain is always valid")
    }

    /// Undirected graph on `0..n`; must contain the chain and be connected.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::InvalidConfig(format!("bad edge ({a}, {b}) for {n} vehicles")));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        if (1..n).any(|i| !sets[i].contains(&(i - 1))) {
            return Err(Error::InvalidConfig("graph must contain every chain edge".into()));
        }
        Ok(Self {
            n,
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_edge(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].binary_search(&b).is_ok()
    }

    /// `{i} ∪ N_i`, ascending.
    pub fn members(&self, i: usize) -> Vec<usize> {
        let mut m = self.neighbors[i].clone();
        let pos = m.partition_point(|&x| x < i);
        m.insert(pos, i);
        m
    }

    pub fn diameter(&self) -> usize {
        (0..self.n)
            .map(|src| {
                let mut dist = vec![usize::MAX; self.n];
                dist[src] = 0;
                let mut q = VecDeque::from([src]);
                while let Some(a) = q.pop_front() {
                    for &b in &self.neighbors[a] {
                        if dist[b] == usize::MAX {
                            dist[b] = dist[a] + 1;
                            q.push_back(b);
                        }
                    }
                }
                dist.into_iter().max().unwrap_or(0)
            })
            .max()
            .unwrap_or(0)
    }
}

/// Fixed block layout of the augmented vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedLayout {
    pub graph: VehicleGraph,
    pub p: usize,
    pub members: Vec<Vec<usize>>,
}

impl AugmentedLayout {
    pub fn new(graph: VehicleGraph, p: usize) -> Self {
        let members = (0..graph.n()).map(|i| graph.members(i)).collect();
        Self { graph, p, members }
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn local_dim(&self, i: usize) -> usize {
        self.members[i].len() * self.p
    }

    /// `sum_i p (1 + |N_i|)`
    pub fn total_dim(&self) -> usize {
        (0..self.n()).map(|i| self.local_dim(i)).sum()
    }

    /// Position of vehicle `j` inside agent `i`'s local vector.
    pub fn slot(&self, i: usize, j: usize) -> Option<usize> {
        self.members[i].binary_search(&j).ok()
    }

    pub fn own_slot(&self, i: usize) -> usize {
        self.slot(i, i).unwrap()
    }
}

/// Per-agent local vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedVar {
    pub blocks: Vec<DVector<f64>>,
}

impl AugmentedVar {
    pub fn zeros(layout: &AugmentedLayout) -> Self {
        Self {
            blocks: (0..layout.n()).map(|i| DVector::zeros(layout.local_dim(i))).collect(),
        }
    }

    /// Consensus-consistent vector from stacked controls.
    pub fn from_controls(layout: &AugmentedLayout, u: &[f64]) -> Self {
        let p = layout.p;
        Self {
            blocks: layout
                .members
                .iter()
                .map(|m| {
                    DVector::from_iterator(
                        m.len() * p,
                        m.iter().flat_map(|&j| u[j * p..(j + 1) * p].iter().copied()),
                    )
                })
                .collect(),
        }
    }

    /// Stacked own blocks.
    pub fn own_controls(&self, layout: &AugmentedLayout) -> Vec<f64> {
        let p = layout.p;
        (0..layout.n())
            .flat_map(|i| {
                let s = layout.own_slot(i) * p;
                self.blocks[i].rows(s, p).iter().copied().collect::<Vec<_>>()
            })
            .collect()
    }

    pub fn check(&self, layout: &AugmentedLayout) -> Result<()> {
        if self.blocks.len() != layout.n() {
            return Err(Error::LayoutMismatch(format!(
                "{} agent blocks for {} agents",
                self.blocks.len(),
                layout.n()
            )));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.len() != layout.local_dim(i) {
                return Err(Error::LayoutMismatch(format!(
                    "agent {i} block has length {}, expected {}",
                    b.len(),
                    layout.local_dim(i)
                )));
            }
        }
        Ok(())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn unflatten(layout: &AugmentedLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.total_dim() {
            return Err(Error::LayoutMismatch(format!(
                "flat length {}, expected {}",
                flat.len(),
                layout.total_dim()
            )));
        }
        let mut off = 0;
        let blocks = (0..layout.n())
            .map(|i| {
                let d = layout.local_dim(i);
                let b = DVector::from_column_slice(&flat[off..off + d]);
                off += d;
                b
            })
            .collect();
        Ok(Self { blocks })
    }

    pub fn norm(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Average of vehicle `j`'s block over every holder, summed in ascending agent order.
fn block_average(layout: &AugmentedLayout, j: usize, held: impl Fn(usize) -> DVector<f64>) -> DVector<f64> {
    let holders = &layout.members[j];
    let mut acc = DVector::zeros(layout.p);
    for &k in holders {
        acc += held(k);
    }
    acc / holders.len() as f64
}

/// Orthogonal projection onto the consensus subspace.
pub fn project_consensus(v: &AugmentedVar, layout: &AugmentedLayout) -> Result<AugmentedVar> {
    v.check(layout)?;
    let p = layout.p;
    let avgs: Vec<DVector<f64>> = (0..layout.n())
        .map(|j| {
            block_average(layout, j, |k| {
                let s = layout.slot(k, j).unwrap();
                v.blocks[k].rows(s * p, p).into_owned()
            })
        })
        .collect();
    Ok(assemble(layout, &avgs))
}

fn assemble(layout: &AugmentedLayout, avgs: &[DVector<f64>]) -> AugmentedVar {
    let p = layout.p;
    AugmentedVar {
        blocks: layout
            .members
            .iter()
            .map(|m| DVector::from_iterator(m.len() * p, m.iter().flat_map(|&j| avgs[j].iter().copied())))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub from: usize,
    pub to: usize,
    pub payload: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceLine {
    round: usize,
    agent: usize,
    sent: Vec<(usize, usize)>,
}

/// Bulk-synchronous message passing restricted to graph edges.
#[derive(Debug, Clone)]
pub struct Fabric {
    graph: VehicleGraph,
    round: usize,
    observed: Vec<BTreeSet<usize>>,
    trace: Option<Vec<TraceLine>>,
}

impl Fabric {
    pub fn new(graph: VehicleGraph) -> Self {
        let n = graph.n();
        Self { graph, round: 0, observed: vec![BTreeSet::new(); n], trace: None }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn graph(&self) -> &VehicleGraph {
        &self.graph
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    /// Agents whose messages `i` has ever received.
    pub fn observed_by(&self, i: usize) -> &BTreeSet<usize> {
        &self.observed[i]
    }

    /// Deliver one round. Every agent must post exactly one message to each
    /// neighbor; inboxes come back sorted by sender.
    pub fn exchange_round(&mut self, outboxes: Vec<Vec<Message>>) -> Result<Vec<Vec<Message>>> {
        let n = self.graph.n();
        if outboxes.len() != n {
            return Err(Error::LayoutMismatch(format!("{} outboxes for {n} agents", outboxes.len())));
        }
        let round = self.round;
        let mut inboxes: Vec<Vec<Message>> = vec![Vec::new(); n];
        for (agent, outbox) in outboxes.into_iter().enumerate() {
            let mut posted = BTreeSet::new();
            let mut sent = Vec::with_capacity(outbox.len());
            for msg in outbox {
                if msg.from != agent || msg.to >= n || !self.graph.is_edge(agent, msg.to) {
                    return Err(Error::NotNeighbor { from: msg.from, to: msg.to });
                }
                posted.insert(msg.to);
                sent.push((msg.to, msg.payload.len()));
                inboxes[msg.to].push(msg);
            }
            if let Some(&to) = self.graph.neighbors(agent).iter().find(|j| !posted.contains(j)) {
                return Err(Error::MissingMessage { round, from: agent, to });
            }
            if let Some(t) = &mut self.trace {
                t.push(TraceLine { round, agent, sent });
            }
        }
        for (i, inbox) in inboxes.iter_mut().enumerate() {
            inbox.sort_by_key(|m| m.from);
            self.observed[i].extend(inbox.iter().map(|m| m.from));
        }
        self.round += 1;
        Ok(inboxes)
    }

    /// Consensus projection by two rounds: holders send their copies of `j`
    /// to `j`, then `j` returns the average.
    pub fn project(&mut self, v: &AugmentedVar, layout: &AugmentedLayout) -> Result<AugmentedVar> {
        v.check(layout)?;
        let p = layout.p;
        let n = layout.n();
        let gather = (0..n)
            .map(|k| {
                self.graph
                    .neighbors(k)
                    .iter()
                    .map(|&j| {
                        let s = layout.slot(k, j).unwrap();
                        Message { from: k, to: j, payload: v.blocks[k].rows(s * p, p).iter().copied().collect() }
                    })
                    .collect()
            })
            .collect();
        let inboxes = self.exchange_round(gather)?;
        let avgs: Vec<DVector<f64>> = (0..n)
            .map(|j| {
                block_average(layout, j, |k| {
                    if k == j {
                        let s = layout.own_slot(j);
                        v.blocks[j].rows(s * p, p).into_owned()
                    } else {
                        let m = inboxes[j].iter().find(|m| m.from == k).unwrap();
                        DVector::from_column_slice(&m.payload)
                    }
                })
            })
            .collect();
        let bcast = (0..n)
            .map(|j| {
                self.graph
                    .neighbors(j)
                    .iter()
                    .map(|&k| Message { from: j, to: k, payload: avgs[j].iter().copied().collect() })
                    .collect()
            })
            .collect();
        let inboxes = self.exchange_round(bcast)?;
        let blocks = (0..n)
            .map(|k| {
                let m = &layout.members[k];
                DVector::from_iterator(
                    m.len() * p,
                    m.iter().flat_map(|&j| {
                        if j == k {
                            avgs[k].iter().copied().collect::<Vec<_>>()
                        } else {
                            inboxes[k].iter().find(|msg| msg.from == j).unwrap().payload.clone()
                        }
                    }),
                )
            })
            .collect();
        Ok(AugmentedVar { blocks })
    }

    /// Logical AND of one flag per agent, flooded for `diameter` rounds.
    pub fn all_reduce_and(&mut self, flags: &[bool]) -> Result<Vec<bool>> {
        let mut cur = flags.to_vec();
        for _ in 0..self.graph.diameter() {
            let out = (0..cur.len())
                .map(|i| {
                    self.graph
                        .neighbors(i)
                        .iter()
                        .map(|&j| Message { from: i, to: j, payload: vec![if cur[i] { 1.0 } else { 0.0 }] })
                        .collect()
                })
                .collect();
            let inboxes = self.exchange_round(out)?;
            for (i, inbox) in inboxes.iter().enumerate() {
                cur[i] = cur[i] && inbox.iter().all(|m| m.payload[0] != 0.0);
            }
        }
        Ok(cur)
    }

    /// Recorded rounds as JSON lines: round, agent, (recipient, payload length) pairs.
    pub fn write_trace(&self, mut out: impl Write) -> Result<()> {
        for line in self.trace.iter().flatten() {
            serde_json::to_writer(&mut out, line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_average() {
        let layout = AugmentedLayout::new(VehicleGraph::chain(2), 1);
        let v = AugmentedVar {
            blocks: vec![DVector::from_vec(vec![4.0, 0.0]), DVector::from_vec(vec![2.0, 0.0])],
        };
        let out = project_consensus(&v, &layout).unwrap();
        assert_eq!(out.blocks[0][0], 3.0);
        assert_eq!(out.blocks[1][0], 3.0);
    }

    #[test]
    fn chain_neighbors() {
        let g = VehicleGraph::chain(3);
        assert_eq!(g.neighbors(1), &[0, 2]);
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.diameter(), 2);
    }

    #[test]
    fn graph_requires_chain() {
        assert!(VehicleGraph::new(3, &[(0, 1)]).is_err());
        assert!(VehicleGraph::new(3, &[(0, 1), (1, 2), (0, 2)]).is_ok());
    }

    #[test]
    fn missing_message_aborts_round() {
        let mut f = Fabric::new(VehicleGraph::chain(3));
        let out = vec![
            vec![Message { from: 0, to: 1, payload: vec![] }],
            vec![Message { from: 1, to: 0, payload: vec![] }],
            vec![Message { from: 2, to: 1, payload: vec![] }],
        ];
        assert!(matches!(
            f.exchange_round(out),
            Err(Error::MissingMessage { from: 1, to: 2, .. })
        ));
    }

    #[test]
    fn non_neighbor_refused() {
        let mut f = Fabric::new(VehicleGraph::chain(3));
        let out = vec![vec![Message { from: 0, to: 2, payload: vec![] }], vec![], vec![]];
        assert!(matches!(f.exchange_round(out), Err(Error::NotNeighbor { from: 0, to: 2 })));
    }

    #[test]
    fn flag_flood_reaches_everyone() {
        let mut f = Fabric::new(VehicleGraph::chain(5));
        let r = f.all_reduce_and(&[true, true, true, true, false]).unwrap();
        assert!(r.iter().all(|&b| !b));
        assert_eq!(f.rounds(), 4);
        let r = f.all_reduce_and(&[true; 5]).unwrap();
        assert!(r.iter().all(|&b| b));
    }
}
