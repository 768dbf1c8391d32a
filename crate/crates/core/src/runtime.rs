//! Deterministic round-synchronous message passing.
//!
//! Every program is activated once per round. In round `t` a program sees the
//! messages sent to it during round `t − 1` (sorted by sender id) and fills an
//! outbox. The first activation has an empty inbox, so a run that finishes at
//! activation `t` used `t − 1` communication rounds.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::graph::{count_components, diameter_of, GraphError, NodeId, SensorNetwork};

/// Logical size of a message: number of reals and ids carried.
pub trait Payload: Clone {
    fn logical_size(&self) -> usize;
}

impl Payload for Vec<f64> {
    fn logical_size(&self) -> usize {
        self.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope<M> {
    pub from: NodeId,
    pub round: usize,
    pub payload: M,
}

#[derive(Debug)]
pub struct Outbox<M> {
    msgs: Vec<(NodeId, M)>,
}

impl<M: Clone> Outbox<M> {
    fn new() -> Self {
        Outbox { msgs: Vec::new() }
    }

    pub fn send(&mut self, to: NodeId, msg: M) {
        self.msgs.push((to, msg));
    }

    pub fn broadcast(&mut self, to: &[NodeId], msg: M) {
        for &n in to {
            self.msgs.push((n, msg.clone()));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.msgs.is_empty()
    }

    pub fn drain(&mut self) -> std::vec::Drain<'_, (NodeId, M)> {
        self.msgs.drain(..)
    }
}

pub struct RoundContext<'a> {
    pub node: NodeId,
    /// activation number, starting at 1
    pub round: usize,
    pub neighbors: &'a [NodeId],
}

pub enum Step<T> {
    Continue,
    Done(T),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProgramError {
    #[error("node {node}: no value received from clique peer {peer}")]
    MissingNeighborValue { node: NodeId, peer: NodeId },
    #[error("node {node}: expected {expected} components, got {got}")]
    DimensionMismatch { node: NodeId, expected: usize, got: usize },
}

pub trait NodeProgram {
    type Msg: Payload;
    type Output;

    fn on_round(
        &mut self,
        ctx: &RoundContext<'_>,
        inbox: &[Envelope<Self::Msg>],
        out: &mut Outbox<Self::Msg>,
    ) -> Result<Step<Self::Output>, ProgramError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub rounds: usize,
    pub messages_sent: usize,
    pub messages_delivered: usize,
    pub payload: usize,
}

impl RunStats {
    pub fn add(&mut self, o: &RunStats) {
        self.rounds += o.rounds;
        self.messages_sent += o.messages_sent;
        self.messages_delivered += o.messages_delivered;
        self.payload += o.payload;
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("node {from} sent to non-neighbour {to} in round {round}")]
    IllegalSend { from: NodeId, to: NodeId, round: usize },
    #[error("no completion within {max_rounds} rounds")]
    MaxRoundsExceeded { max_rounds: usize, stats: RunStats },
    #[error("one program per node required: {programs} programs for {nodes} nodes")]
    ProgramCount { programs: usize, nodes: usize },
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Debug)]
pub struct RunOutcome<T> {
    /// aligned with `Topology::nodes`
    pub outputs: Vec<T>,
    pub stats: RunStats,
}

/// Communication graph seen by node programs, with its injected diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    ids: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    adj: Vec<Vec<usize>>,
    neighbor_ids: Vec<Vec<NodeId>>,
    diameter: usize,
    edges: usize,
}

impl Topology {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
    ) -> Result<Self, GraphError> {
        let ids: Vec<NodeId> = nodes.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let mut adj = vec![Vec::new(); ids.len()];
        for (a, b) in edges {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(GraphError::Invalid(format!("edge ({a},{b}) leaves the topology")));
            };
            if ia != ib {
                adj[ia].push(ib);
                adj[ib].push(ia);
            }
        }
        for l in adj.iter_mut() {
            l.sort_unstable();
            l.dedup();
        }
        if ids.is_empty() {
            return Err(GraphError::Invalid("empty topology".into()));
        }
        let components = count_components(&adj);
        if components > 1 {
            return Err(GraphError::Disconnected { components });
        }
        let diameter = diameter_of(&adj)?;
        let neighbor_ids = adj.iter().map(|l| l.iter().map(|&j| ids[j]).collect()).collect();
        let edges = adj.iter().map(Vec::len).sum::<usize>() / 2;
        Ok(Topology { ids, index, adj, neighbor_ids, diameter, edges })
    }

    pub fn from_network(net: &SensorNetwork) -> Result<Self, GraphError> {
        Topology::new(net.nodes().iter().copied(), net.edges())
    }

    /// Subgraph of `net` induced on `keep`.
    pub fn induced(net: &SensorNetwork, keep: &BTreeSet<NodeId>) -> Result<Self, GraphError> {
        let edges = net.edges().into_iter().filter(|(a, b)| keep.contains(a) && keep.contains(b));
        Topology::new(keep.iter().copied(), edges)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn neighbors(&self, i: usize) -> &[NodeId] {
        &self.neighbor_ids[i]
    }

    pub fn neighbor_indices(&self, i: usize) -> &[usize] {
        &self.adj[i]
    }

    pub fn diameter(&self) -> usize {
        self.diameter
    }

    pub fn edge_count(&self) -> usize {
        self.edges
    }

    pub fn are_neighbors(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index.get(&a), self.index.get(&b)) {
            (Some(&i), Some(&j)) => self.adj[i].binary_search(&j).is_ok(),
            _ => false,
        }
    }
}

/// Runs `programs` (one per node, in `topo.nodes()` order) until all of them
/// finish.
pub fn run<P: NodeProgram>(
    topo: &Topology,
    programs: &mut [P],
    max_rounds: usize,
) -> Result<RunOutcome<P::Output>, RunError> {
    let n = topo.len();
    if programs.len() != n {
        return Err(RunError::ProgramCount { programs: programs.len(), nodes: n });
    }
    let mut outputs: Vec<Option<P::Output>> = (0..n).map(|_| None).collect();
    let mut inboxes: Vec<Vec<Envelope<P::Msg>>> = (0..n).map(|_| Vec::new()).collect();
    let mut stats = RunStats::default();
    let mut outbox = Outbox::new();
    let mut activation = 0usize;
    let mut remaining = n;
    while remaining > 0 {
        activation += 1;
        if activation > max_rounds + 1 {
            stats.rounds = activation - 2;
            return Err(RunError::MaxRoundsExceeded { max_rounds, stats });
        }
        let mut next: Vec<Vec<Envelope<P::Msg>>> = (0..n).map(|_| Vec::new()).collect();
        for i in 0..n {
            let inbox = std::mem::take(&mut inboxes[i]);
            if outputs[i].is_some() {
                continue;
            }
            let ctx = RoundContext { node: topo.ids[i], round: activation, neighbors: &topo.neighbor_ids[i] };
            let step = programs[i].on_round(&ctx, &inbox, &mut outbox)?;
            for (to, payload) in outbox.drain() {
                let Some(j) = topo.index_of(to).filter(|&j| topo.adj[i].binary_search(&j).is_ok()) else {
                    return Err(RunError::IllegalSend { from: topo.ids[i], to, round: activation });
                };
                stats.messages_sent += 1;
                stats.payload += payload.logical_size();
                next[j].push(Envelope { from: topo.ids[i], round: activation, payload });
            }
            if let Step::Done(o) = step {
                outputs[i] = Some(o);
                remaining -= 1;
            }
        }
        // senders were visited in index order, which is id order
        for (i, inbox) in next.into_iter().enumerate() {
            stats.messages_delivered += inbox.len();
            inboxes[i] = inbox;
        }
    }
    stats.rounds = activation - 1;
    Ok(RunOutcome { outputs: outputs.into_iter().map(|o| o.expect("finished")).collect(), stats })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointMsg<X, Y> {
    pub first: Option<X>,
    pub second: Option<Y>,
}

impl<X: Payload, Y: Payload> Payload for JointMsg<X, Y> {
    fn logical_size(&self) -> usize {
        self.first.as_ref().map_or(0, Payload::logical_size) + self.second.as_ref().map_or(0, Payload::logical_size)
    }
}

/// Two programs sharing rounds; messages to the same neighbour are bundled.
pub struct Joint<A: NodeProgram, B: NodeProgram> {
    first: A,
    second: B,
    first_out: Option<A::Output>,
    second_out: Option<B::Output>,
}

impl<A: NodeProgram, B: NodeProgram> Joint<A, B> {
    pub fn new(first: A, second: B) -> Self {
        Joint { first, second, first_out: None, second_out: None }
    }
}

impl<A: NodeProgram, B: NodeProgram> NodeProgram for Joint<A, B> {
    type Msg = JointMsg<A::Msg, B::Msg>;
    type Output = (A::Output, B::Output);

    fn on_round(
        &mut self,
        ctx: &RoundContext<'_>,
        inbox: &[Envelope<Self::Msg>],
        out: &mut Outbox<Self::Msg>,
    ) -> Result<Step<Self::Output>, ProgramError> {
        let mut bundled: Vec<(NodeId, JointMsg<_, _>)> = Vec::new();
        fn slot<M>(bundled: &mut Vec<(NodeId, M)>, to: NodeId, empty: impl FnOnce() -> M) -> usize {
            match bundled.iter().position(|(t, _)| *t == to) {
                Some(p) => p,
                None => {
                    bundled.push((to, empty()));
                    bundled.len() - 1
                }
            }
        }
        let empty = || JointMsg { first: None, second: None };
        let mut pending_first = Vec::new();
        if self.first_out.is_none() {
            let sub: Vec<Envelope<A::Msg>> = inbox
                .iter()
                .filter_map(|e| e.payload.first.clone().map(|p| Envelope { from: e.from, round: e.round, payload: p }))
                .collect();
            let mut o = Outbox::new();
            if let Step::Done(v) = self.first.on_round(ctx, &sub, &mut o)? {
                self.first_out = Some(v);
            }
            pending_first.extend(o.drain());
        }
        let mut pending_second = Vec::new();
        if self.second_out.is_none() {
            let sub: Vec<Envelope<B::Msg>> = inbox
                .iter()
                .filter_map(|e| e.payload.second.clone().map(|p| Envelope { from: e.from, round: e.round, payload: p }))
                .collect();
            let mut o = Outbox::new();
            if let Step::Done(v) = self.second.on_round(ctx, &sub, &mut o)? {
                self.second_out = Some(v);
            }
            pending_second.extend(o.drain());
        }
        for (to, m) in pending_first {
            let s = slot(&mut bundled, to, empty);
            bundled[s].1.first = Some(m);
        }
        for (to, m) in pending_second {
            let s = slot(&mut bundled, to, empty);
            bundled[s].1.second = Some(m);
        }
        for (to, m) in bundled {
            out.send(to, m);
        }
        if self.first_out.is_some() && self.second_out.is_some() {
            let a = self.first_out.take().expect("first done");
            let b = self.second_out.take().expect("second done");
            return Ok(Step::Done((a, b)));
        }
        Ok(Step::Continue)
    }
}

pub const TRACE_FORMAT_HEADER: &str = "# baryloc-trace v1";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub round: usize,
    pub values: Vec<f64>,
}

/// Cumulative communication counters plus named per-round observables.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunTrace {
    pub rounds: usize,
    pub messages_sent: usize,
    pub messages_delivered: usize,
    pub payload: usize,
    pub columns: Vec<String>,
    pub snapshots: Vec<Snapshot>,
}

impl RunTrace {
    pub fn with_columns<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        RunTrace { columns: columns.into_iter().map(Into::into).collect(), ..Default::default() }
    }

    pub fn absorb(&mut self, stats: &RunStats) {
        self.rounds += stats.rounds;
        self.messages_sent += stats.messages_sent;
        self.messages_delivered += stats.messages_delivered;
        self.payload += stats.payload;
    }

    /// Records observables at the current round count.
    pub fn record(&mut self, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "observable count");
        if let Some(last) = self.snapshots.last() {
            assert!(last.round <= self.rounds, "round counter went backwards");
        }
        self.snapshots.push(Snapshot { round: self.rounds, values });
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{TRACE_FORMAT_HEADER}")?;
        write!(w, "round")?;
        for c in &self.columns {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
        for s in &self.snapshots {
            write!(w, "{}", s.round)?;
            for v in &s.values {
                if v.fract() == 0.0 && v.abs() < 1e15 {
                    write!(w, ",{v}")?;
                } else {
                    write!(w, ",{v:e}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "baryloc-run-trace v1",
            "rounds": self.rounds,
            "messages_sent": self.messages_sent,
            "messages_delivered": self.messages_delivered,
            "payload": self.payload,
            "snapshots": self.snapshots.len(),
        })
    }
}
