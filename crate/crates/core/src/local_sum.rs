//! Two-round local sum: node i obtains its row of Mᵀ(M x − B x_a) (or of
//! MᵀM x when anchor values are left out) using only clique neighbours.
//!
//! Round 1: every value holder broadcasts x. Round 2: each center computes
//! ξ = x_c − Σ a·x_ref per clique, keeps ξ and sends −a·ξ to each free
//! reference. The result is the center's ξ total plus the received terms,
//! added in ascending sender id.

use std::collections::{BTreeMap, HashMap};

use crate::graph::{NodeId, SensorNetwork, WeightedClique};
use crate::runtime::{Envelope, NodeProgram, Outbox, ProgramError, RoundContext, Step};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CliqueRow {
    pub index: usize,
    pub refs: [NodeId; 4],
    pub weights: [f64; 4],
}

/// The cliques a node centers, with their barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSumWeights {
    pub node: NodeId,
    pub rows: Vec<CliqueRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalSumMode {
    /// anchors hold no value; computes MᵀM x
    Product,
    /// anchors contribute their positions; computes Mᵀ(M x − B x_a)
    WithAnchors,
}

/// Shared description of one local-sum invocation.
#[derive(Debug, Clone)]
pub struct LocalSumSpec {
    pub anchors: [NodeId; 4],
    pub mode: LocalSumMode,
    pub dim: usize,
}

impl LocalSumSpec {
    fn is_anchor(&self, id: NodeId) -> bool {
        self.anchors.contains(&id)
    }
}

/// Per-node weights for the nodes `order`, keeping the same rows as
/// `assemble_linear_system` on `net`.
pub fn local_sum_weights(net: &SensorNetwork, cliques: &[WeightedClique], order: &[NodeId]) -> Vec<LocalSumWeights> {
    let mut by_center: HashMap<NodeId, Vec<CliqueRow>> = HashMap::new();
    for wc in cliques {
        let c = &wc.clique;
        if net.is_anchor(c.center) || !c.members().iter().all(|m| net.contains(*m)) {
            continue;
        }
        by_center.entry(c.center).or_default().push(CliqueRow {
            index: c.index,
            refs: c.refs,
            weights: wc.quad.weights,
        });
    }
    order.iter().map(|id| LocalSumWeights { node: *id, rows: by_center.remove(id).unwrap_or_default() }).collect()
}

/// Round-2 work of one node: its own ξ total and the terms owed to peers.
/// The center's own term and what it owes each free reference.
type CenterTerms = (Vec<f64>, BTreeMap<NodeId, Vec<f64>>);

pub(crate) fn center_terms<'v>(
    w: &LocalSumWeights,
    spec: &LocalSumSpec,
    own: Option<&'v [f64]>,
    lookup: impl Fn(NodeId) -> Option<&'v [f64]>,
) -> Result<CenterTerms, ProgramError> {
    let dim = spec.dim;
    let mut y = vec![0.0; dim];
    let mut owed: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
    if w.rows.is_empty() {
        return Ok((y, owed));
    }
    let own = own.ok_or(ProgramError::MissingNeighborValue { node: w.node, peer: w.node })?;
    if own.len() != dim {
        return Err(ProgramError::DimensionMismatch { node: w.node, expected: dim, got: own.len() });
    }
    let mut xi = vec![0.0; dim];
    for row in &w.rows {
        xi.copy_from_slice(own);
        for (r, a) in row.refs.iter().zip(row.weights) {
            if spec.mode == LocalSumMode::Product && spec.is_anchor(*r) {
                continue;
            }
            let x = lookup(*r).ok_or(ProgramError::MissingNeighborValue { node: w.node, peer: *r })?;
            if x.len() != dim {
                return Err(ProgramError::DimensionMismatch { node: *r, expected: dim, got: x.len() });
            }
            for (t, x) in xi.iter_mut().zip(x) {
                *t -= a * x;
            }
        }
        for (acc, t) in y.iter_mut().zip(&xi) {
            *acc += t;
        }
        for (r, a) in row.refs.iter().zip(row.weights) {
            if spec.is_anchor(*r) {
                continue;
            }
            let slot = owed.entry(*r).or_insert_with(|| vec![0.0; dim]);
            for (acc, t) in slot.iter_mut().zip(&xi) {
                *acc += -a * t;
            }
        }
    }
    Ok((y, owed))
}

pub struct LocalSumProgram<'a> {
    weights: &'a LocalSumWeights,
    spec: &'a LocalSumSpec,
    value: Option<Vec<f64>>,
    y: Vec<f64>,
}

impl<'a> LocalSumProgram<'a> {
    pub fn new(weights: &'a LocalSumWeights, spec: &'a LocalSumSpec, value: Option<Vec<f64>>) -> Self {
        LocalSumProgram { weights, spec, value, y: Vec::new() }
    }
}

impl NodeProgram for LocalSumProgram<'_> {
    type Msg = Vec<f64>;
    type Output = Vec<f64>;

    fn on_round(
        &mut self,
        ctx: &RoundContext<'_>,
        inbox: &[Envelope<Vec<f64>>],
        out: &mut Outbox<Vec<f64>>,
    ) -> Result<Step<Vec<f64>>, ProgramError> {
        match ctx.round {
            1 if ctx.neighbors.is_empty() => {
                let (y, _) = center_terms(self.weights, self.spec, self.value.as_deref(), |_| None)?;
                Ok(Step::Done(y))
            }
            1 => {
                if let Some(v) = &self.value {
                    out.broadcast(ctx.neighbors, v.clone());
                }
                Ok(Step::Continue)
            }
            2 => {
                let (y, owed) = center_terms(self.weights, self.spec, self.value.as_deref(), |id| {
                    inbox.iter().find(|e| e.from == id).map(|e| e.payload.as_slice())
                })?;
                for (to, term) in owed {
                    out.send(to, term);
                }
                self.y = y;
                Ok(Step::Continue)
            }
            _ => {
                let mut y = std::mem::take(&mut self.y);
                for e in inbox {
                    for (acc, t) in y.iter_mut().zip(&e.payload) {
                        *acc += t;
                    }
                }
                Ok(Step::Done(y))
            }
        }
    }
}

/// Counters of a closed-form local sum, matching what the simulation sends.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DirectCounts {
    pub messages: usize,
    pub payload: usize,
}

/// Same arithmetic as running [`LocalSumProgram`] everywhere; `ids` and
/// `neighbor_counts` follow the topology order.
pub fn direct_local_sum(
    ids: &[NodeId],
    neighbor_counts: &[usize],
    weights: &[LocalSumWeights],
    spec: &LocalSumSpec,
    values: &[Option<Vec<f64>>],
) -> Result<(Vec<Vec<f64>>, DirectCounts), ProgramError> {
    let dim = spec.dim;
    let n = ids.len();
    let top = ids.iter().map(|id| id.0 as usize + 1).max().unwrap_or(0);
    let mut index = vec![usize::MAX; top];
    for (i, id) in ids.iter().enumerate() {
        index[id.0 as usize] = i;
    }
    // a lone node receives nothing, not even its own broadcast
    let slot = |id: NodeId| index.get(id.0 as usize).copied().filter(|&j| j != usize::MAX && n > 1);
    let mut counts = DirectCounts::default();
    let mut ys = vec![vec![0.0; dim]; n];
    // terms owed to each receiver, flat, in ascending sender order
    let mut incoming: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut owed_at = vec![usize::MAX; n];
    let mut owed_to: Vec<usize> = Vec::new();
    let mut owed: Vec<f64> = Vec::new();
    let mut xi = vec![0.0; dim];
    for (i, w) in weights.iter().enumerate() {
        if let Some(v) = &values[i] {
            counts.messages += neighbor_counts[i];
            counts.payload += neighbor_counts[i] * v.len();
        }
        if w.rows.is_empty() {
            continue;
        }
        let own = values[i].as_deref().ok_or(ProgramError::MissingNeighborValue { node: w.node, peer: w.node })?;
        if own.len() != dim {
            return Err(ProgramError::DimensionMismatch { node: w.node, expected: dim, got: own.len() });
        }
        let y = &mut ys[i];
        for row in &w.rows {
            xi.copy_from_slice(own);
            for (r, a) in row.refs.iter().zip(row.weights) {
                if spec.mode == LocalSumMode::Product && spec.is_anchor(*r) {
                    continue;
                }
                let x = slot(*r)
                    .and_then(|j| values[j].as_deref())
                    .ok_or(ProgramError::MissingNeighborValue { node: w.node, peer: *r })?;
                if x.len() != dim {
                    return Err(ProgramError::DimensionMismatch { node: *r, expected: dim, got: x.len() });
                }
                for (t, x) in xi.iter_mut().zip(x) {
                    *t -= a * x;
                }
            }
            for (acc, t) in y.iter_mut().zip(&xi) {
                *acc += t;
            }
            for (r, a) in row.refs.iter().zip(row.weights) {
                if spec.is_anchor(*r) {
                    continue;
                }
                let j = slot(*r).ok_or(ProgramError::MissingNeighborValue { node: *r, peer: *r })?;
                if owed_at[j] == usize::MAX {
                    owed_at[j] = owed_to.len();
                    owed_to.push(j);
                    owed.resize(owed.len() + dim, 0.0);
                }
                let at = owed_at[j] * dim;
                for (acc, t) in owed[at..at + dim].iter_mut().zip(&xi) {
                    *acc += -a * t;
                }
            }
        }
        for (k, &j) in owed_to.iter().enumerate() {
            counts.messages += 1;
            counts.payload += dim;
            incoming[j].extend_from_slice(&owed[k * dim..(k + 1) * dim]);
            owed_at[j] = usize::MAX;
        }
        owed_to.clear();
        owed.clear();
    }
    if dim > 0 {
        for (y, terms) in ys.iter_mut().zip(&incoming) {
            for t in terms.chunks_exact(dim) {
                for (acc, x) in y.iter_mut().zip(t) {
                    *acc += x;
                }
            }
        }
    }
    Ok((ys, counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{barycentric_from_positions, Point3};
    use crate::graph::{Clique5, Configuration};
    use crate::runtime::{run, Topology};

    // free nodes 1 and 2, anchors 3..6; node 1 centers the clique {1,2,3,4,5}
    fn single_clique() -> (Configuration, SensorNetwork, Vec<WeightedClique>) {
        let pts = [
            Point3::new(3.0, 2.0, 4.0),
            Point3::new(9.0, 1.0, 2.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(10.0, 0.0, 1.0),
            Point3::new(1.0, 10.0, 0.0),
            Point3::new(2.0, 3.0, 10.0),
        ];
        let mut config = Configuration::new();
        for (i, p) in pts.iter().enumerate() {
            config.insert(NodeId(i as u32 + 1), *p);
        }
        let mut edges = Vec::new();
        for a in 1..=5 {
            for b in (a + 1)..=5 {
                edges.push((NodeId(a), NodeId(b)));
            }
        }
        edges.extend([2, 3, 4, 5].map(|a| (NodeId(a), NodeId(6))));
        let net = SensorNetwork::new((1..=6).map(NodeId), edges, [3, 4, 5, 6].map(NodeId)).unwrap();
        let refs = [2, 3, 4, 5].map(NodeId);
        let quad = barycentric_from_positions(pts[0], refs.map(|r| config.position(r))).unwrap();
        let cliques = vec![WeightedClique { clique: Clique5 { center: NodeId(1), refs, index: 0 }, quad }];
        (config, net, cliques)
    }

    fn both(
        topo: &Topology,
        weights: &[LocalSumWeights],
        spec: &LocalSumSpec,
        values: &[Option<Vec<f64>>],
    ) -> Vec<Vec<f64>> {
        let degrees: Vec<usize> = (0..topo.len()).map(|i| topo.neighbors(i).len()).collect();
        let (direct, _) = direct_local_sum(topo.nodes(), &degrees, weights, spec, values).unwrap();
        let mut progs: Vec<LocalSumProgram> =
            weights.iter().zip(values).map(|(w, v)| LocalSumProgram::new(w, spec, v.clone())).collect();
        let simulated = run(topo, &mut progs, 2).unwrap().outputs;
        assert_eq!(direct, simulated);
        direct
    }

    #[test]
    fn exact_positions_give_zero_residual() {
        let (config, net, cliques) = single_clique();
        let topo = Topology::from_network(&net).unwrap();
        let weights = local_sum_weights(&net, &cliques, topo.nodes());
        let spec = LocalSumSpec { anchors: net.anchors(), mode: LocalSumMode::WithAnchors, dim: 3 };
        let values: Vec<Option<Vec<f64>>> =
            topo.nodes().iter().map(|id| Some(config.position(*id).to_array().to_vec())).collect();
        for y in both(&topo, &weights, &spec, &values) {
            assert!(y.iter().all(|v| v.abs() < 1e-12), "{y:?}");
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let (_, net, cliques) = single_clique();
        let topo = Topology::from_network(&net).unwrap();
        let weights = local_sum_weights(&net, &cliques, topo.nodes());
        let spec = LocalSumSpec { anchors: net.anchors(), mode: LocalSumMode::Product, dim: 2 };
        let values: Vec<Option<Vec<f64>>> =
            topo.nodes().iter().map(|id| (!net.is_anchor(*id)).then(|| vec![0.0; 2])).collect();
        for y in both(&topo, &weights, &spec, &values) {
            assert_eq!(y, vec![0.0; 2]);
        }
    }

    #[test]
    fn product_row_matches_hand_computation() {
        let (_, net, cliques) = single_clique();
        let topo = Topology::from_network(&net).unwrap();
        let weights = local_sum_weights(&net, &cliques, topo.nodes());
        let spec = LocalSumSpec { anchors: net.anchors(), mode: LocalSumMode::Product, dim: 1 };
        let values: Vec<Option<Vec<f64>>> =
            topo.nodes().iter().map(|id| (!net.is_anchor(*id)).then(|| vec![f64::from(id.0)])).collect();
        let y = both(&topo, &weights, &spec, &values);
        // one row [1, −a] over (x1, x2) = (1, 2)
        let a = cliques[0].quad.weights[0];
        let xi = 1.0 - a * 2.0;
        assert_eq!(y[0], vec![xi]);
        assert_eq!(y[1], vec![-a * xi]);
        assert!(y[2..].iter().all(|v| v == &vec![0.0]));
    }

    #[test]
    fn missing_reference_value_is_reported() {
        let (_, net, cliques) = single_clique();
        let topo = Topology::from_network(&net).unwrap();
        let weights = local_sum_weights(&net, &cliques, topo.nodes());
        let spec = LocalSumSpec { anchors: net.anchors(), mode: LocalSumMode::WithAnchors, dim: 1 };
        let values: Vec<Option<Vec<f64>>> = topo.nodes().iter().map(|id| (id.0 != 4).then(|| vec![1.0])).collect();
        let degrees = vec![1; topo.len()];
        let err = direct_local_sum(topo.nodes(), &degrees, &weights, &spec, &values).unwrap_err();
        assert_eq!(err, ProgramError::MissingNeighborValue { node: NodeId(1), peer: NodeId(4) });
    }
}
