//! Sensor-network model: random geometric generation, anchors, order-5
//! clique discovery, pruning of scarcely connected nodes, diameters and the
//! sparse linear system M p_f = B p_a.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    barycentric_from_frame, cfc, max_pairwise_distance, signed_volume, BarycentricQuad, GeometryError, Point3,
    SquaredDistanceMatrix5, DEGENERACY_THRESHOLD,
};

pub const NETWORK_FORMAT_HEADER: &str = "baryloc-network v1";
pub const GENERATION_RETRIES: usize = 100;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("network generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },
    #[error("network is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = std::num::ParseIntError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(NodeId)
    }
}

/// Positions keyed by node id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Configuration {
    positions: BTreeMap<NodeId, Point3>,
}

impl Configuration {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: NodeId, p: Point3) {
        assert!(p.is_finite(), "position of node {id} is not finite");
        self.positions.insert(id, p);
    }

    pub fn get(&self, id: NodeId) -> Option<Point3> {
        self.positions.get(&id).copied()
    }

    /// Panics when the id is unknown.
    pub fn position(&self, id: NodeId) -> Point3 {
        match self.positions.get(&id) {
            Some(p) => *p,
            None => panic!("no position for node {id}"),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, Point3)> + '_ {
        self.positions.iter().map(|(k, v)| (*k, *v))
    }
}

impl FromIterator<(NodeId, Point3)> for Configuration {
    fn from_iter<T: IntoIterator<Item = (NodeId, Point3)>>(iter: T) -> Self {
        let mut c = Configuration::new();
        for (id, p) in iter {
            c.insert(id, p);
        }
        c
    }
}

/// Undirected connected graph with exactly four anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorNetwork {
    ids: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
    adj: Vec<Vec<usize>>,
    anchors: [NodeId; 4],
}

impl SensorNetwork {
    pub fn new(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        anchors: [NodeId; 4],
    ) -> Result<Self, GraphError> {
        let net = Self::unchecked(nodes, edges, anchors)?;
        let components = count_components(&net.adj);
        if components > 1 {
            return Err(GraphError::Disconnected { components });
        }
        Ok(net)
    }

    fn unchecked(
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId)>,
        anchors: [NodeId; 4],
    ) -> Result<Self, GraphError> {
        let set: BTreeSet<NodeId> = nodes.into_iter().collect();
        if set.contains(&NodeId(0)) {
            return Err(GraphError::Invalid("node ids start at 1".into()));
        }
        let ids: Vec<NodeId> = set.into_iter().collect();
        let index: HashMap<NodeId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        let distinct: BTreeSet<NodeId> = anchors.iter().copied().collect();
        if distinct.len() != 4 {
            return Err(GraphError::Invalid("anchors must be 4 distinct nodes".into()));
        }
        if let Some(a) = anchors.iter().find(|a| !index.contains_key(a)) {
            return Err(GraphError::Invalid(format!("anchor {a} is not a node")));
        }
        let mut adj = vec![Vec::new(); ids.len()];
        for (a, b) in edges {
            let (Some(&ia), Some(&ib)) = (index.get(&a), index.get(&b)) else {
                return Err(GraphError::Invalid(format!("edge ({a},{b}) has an unknown endpoint")));
            };
            if ia == ib {
                return Err(GraphError::Invalid(format!("self loop at {a}")));
            }
            adj[ia].push(ib);
            adj[ib].push(ia);
        }
        for list in adj.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        let mut anchors = anchors;
        anchors.sort();
        Ok(SensorNetwork { ids, index, adj, anchors })
    }

    pub fn n(&self) -> usize {
        self.ids.len()
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn anchors(&self) -> [NodeId; 4] {
        self.anchors
    }

    pub fn is_anchor(&self, id: NodeId) -> bool {
        self.anchors.contains(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    /// Free nodes in ascending id order.
    pub fn free(&self) -> Vec<NodeId> {
        self.ids.iter().copied().filter(|id| !self.is_anchor(*id)).collect()
    }

    pub fn index_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        let i = self.index[&id];
        self.adj[i].iter().map(move |&j| self.ids[j])
    }

    pub fn degree(&self, id: NodeId) -> usize {
        self.adj[self.index[&id]].len()
    }

    pub fn has_edge(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index.get(&a), self.index.get(&b)) {
            (Some(&ia), Some(&ib)) => self.adj[ia].binary_search(&ib).is_ok(),
            _ => false,
        }
    }

    /// Each undirected edge once, as (smaller, larger).
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (i, list) in self.adj.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((self.ids[i], self.ids[j]));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Index-based adjacency, sorted, aligned with `nodes()`.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adj
    }

    /// Subgraph induced on `keep`; anchors must survive.
    pub fn induced(&self, keep: &BTreeSet<NodeId>) -> Result<SensorNetwork, GraphError> {
        let edges = self.edges().into_iter().filter(|(a, b)| keep.contains(a) && keep.contains(b));
        SensorNetwork::new(keep.iter().copied().filter(|id| self.contains(*id)), edges, self.anchors)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorRule {
    /// four distinct nodes drawn uniformly at random
    #[default]
    Random,
    /// the nodes nearest to the corners (0,0,0), (s,0,0), (0,s,0), (0,0,s)
    Corners,
}

impl FromStr for AnchorRule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(AnchorRule::Random),
            "corners" => Ok(AnchorRule::Corners),
            other => Err(format!("unknown anchor rule `{other}` (expected random or corners)")),
        }
    }
}

impl fmt::Display for AnchorRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnchorRule::Random => "random",
            AnchorRule::Corners => "corners",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationParams {
    pub n: usize,
    pub box_side: f64,
    pub radius: f64,
    pub anchor_rule: AnchorRule,
    pub seed: u64,
}

fn anchors_generic(p: &[Point3; 4]) -> bool {
    let l = max_pairwise_distance(p);
    signed_volume(p[0], p[1], p[2], p[3]).abs() > DEGENERACY_THRESHOLD * l * l * l
}

/// Uniform positions in [0, box_side]³, edges when within `radius`, retried
/// until connected. Free nodes get ids 1..n−4 and anchors n−3..n.
pub fn generate_random_geometric(params: &GenerationParams) -> Result<(Configuration, SensorNetwork), GraphError> {
    let GenerationParams { n, box_side, radius, anchor_rule, seed } = *params;
    if n < 5 {
        return Err(GraphError::Invalid(format!("need at least 5 nodes, got {n}")));
    }
    if !(radius > 0.0) || !(box_side > 0.0) {
        return Err(GraphError::Invalid("radius and box_side must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r2 = radius * radius;
    for _ in 0..GENERATION_RETRIES {
        let pts: Vec<Point3> = (0..n)
            .map(|_| {
                Point3::new(rng.gen_range(0.0..=box_side), rng.gen_range(0.0..=box_side), rng.gen_range(0.0..=box_side))
            })
            .collect();
        let mut adj = vec![Vec::new(); n];
        for i in 0..n {
            for j in (i + 1)..n {
                if (pts[i] - pts[j]).norm_squared() <= r2 {
                    adj[i].push(j);
                    adj[j].push(i);
                }
            }
        }
        if count_components(&adj) != 1 {
            continue;
        }
        let Some(chosen) = choose_anchors(&pts, anchor_rule, box_side, &mut rng) else {
            continue;
        };

        // relabel: free nodes keep index order, anchors take the last ids
        let mut label = vec![NodeId(0); n];
        let mut next = 1u32;
        for (i, l) in label.iter_mut().enumerate() {
            if !chosen.contains(&i) {
                *l = NodeId(next);
                next += 1;
            }
        }
        for (k, &a) in chosen.iter().enumerate() {
            label[a] = NodeId((n - 4 + k + 1) as u32);
        }
        let config: Configuration = (0..n).map(|i| (label[i], pts[i])).collect();
        let edges = (0..n).flat_map(|i| {
            let label = &label;
            adj[i].iter().filter(move |&&j| i < j).map(move |&j| (label[i], label[j]))
        });
        let anchors = chosen.map(|a| label[a]);
        let net = SensorNetwork::new(label.iter().copied(), edges, anchors)?;
        return Ok((config, net));
    }
    Err(GraphError::GenerationFailed {
        attempts: GENERATION_RETRIES,
        reason: format!("no connected network with a generic anchor set for n={n}, radius={radius}"),
    })
}

fn choose_anchors(pts: &[Point3], rule: AnchorRule, box_side: f64, rng: &mut ChaCha8Rng) -> Option<[usize; 4]> {
    match rule {
        AnchorRule::Random => {
            for _ in 0..GENERATION_RETRIES {
                let idx = sample(rng, pts.len(), 4).into_vec();
                let chosen = [idx[0], idx[1], idx[2], idx[3]];
                if anchors_generic(&chosen.map(|i| pts[i])) {
                    return Some(chosen);
                }
            }
            None
        }
        AnchorRule::Corners => {
            let corners = [
                Point3::ZERO,
                Point3::new(box_side, 0.0, 0.0),
                Point3::new(0.0, box_side, 0.0),
                Point3::new(0.0, 0.0, box_side),
            ];
            let mut chosen = [usize::MAX; 4];
            for (k, c) in corners.iter().enumerate() {
                let best = (0..pts.len())
                    .filter(|i| !chosen.contains(i))
                    .min_by(|&a, &b| pts[a].distance(*c).total_cmp(&pts[b].distance(*c)))?;
                chosen[k] = best;
            }
            anchors_generic(&chosen.map(|i| pts[i])).then_some(chosen)
        }
    }
}

/// An order-5 clique centered at `center`; `refs` ascending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Clique5 {
    pub center: NodeId,
    pub refs: [NodeId; 4],
    /// position among the cliques of the same center
    pub index: usize,
}

impl Clique5 {
    pub fn members(&self) -> [NodeId; 5] {
        [self.center, self.refs[0], self.refs[1], self.refs[2], self.refs[3]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedClique {
    pub clique: Clique5,
    pub quad: BarycentricQuad,
}

/// Every (center, 4-subset of its neighbours) forming an order-5 clique.
/// Only the adjacency among a node's neighbours is consulted.
pub fn discover_cliques(net: &SensorNetwork) -> Vec<Clique5> {
    let adj = net.adjacency();
    let linked = |a: usize, b: usize| adj[a].binary_search(&b).is_ok();
    let mut out = Vec::new();
    for (i, nbrs) in adj.iter().enumerate() {
        // ids are sorted like indices, so index order is id order
        let mut index = 0;
        let m = nbrs.len();
        for a in 0..m {
            for b in (a + 1)..m {
                let (na, nb) = (nbrs[a], nbrs[b]);
                if !linked(na, nb) {
                    continue;
                }
                for c in (b + 1)..m {
                    let nc = nbrs[c];
                    if !linked(na, nc) || !linked(nb, nc) {
                        continue;
                    }
                    for &nd in &nbrs[(c + 1)..] {
                        if linked(na, nd) && linked(nb, nd) && linked(nc, nd) {
                            let ids = net.nodes();
                            out.push(Clique5 { center: ids[i], refs: [ids[na], ids[nb], ids[nc], ids[nd]], index });
                            index += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Drops free nodes that belong to no order-5 clique. One pass suffices.
pub fn prune_scarcely_connected(net: &SensorNetwork) -> Result<(SensorNetwork, BTreeSet<NodeId>), GraphError> {
    let mut member: BTreeSet<NodeId> = BTreeSet::new();
    for c in discover_cliques(net) {
        member.extend(c.members());
    }
    let removed: BTreeSet<NodeId> =
        net.nodes().iter().copied().filter(|id| !net.is_anchor(*id) && !member.contains(id)).collect();
    if removed.is_empty() {
        return Ok((net.clone(), removed));
    }
    let keep: BTreeSet<NodeId> = net.nodes().iter().copied().filter(|id| !removed.contains(id)).collect();
    Ok((net.induced(&keep)?, removed))
}

pub(crate) fn bfs_depths(adj: &[Vec<usize>], start: usize) -> Vec<usize> {
    let mut depth = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    depth[start] = 0;
    queue.push_back(start);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    depth
}

pub fn count_components(adj: &[Vec<usize>]) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut count = 0;
    for s in 0..adj.len() {
        if seen[s] {
            continue;
        }
        count += 1;
        let mut stack = vec![s];
        seen[s] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }
    count
}

/// Exact diameter of an index adjacency by BFS from every vertex.
pub fn diameter_of(adj: &[Vec<usize>]) -> Result<usize, GraphError> {
    let mut best = 0;
    for s in 0..adj.len() {
        let d = bfs_depths(adj, s);
        for &x in &d {
            if x == usize::MAX {
                return Err(GraphError::Disconnected { components: count_components(adj) });
            }
            best = best.max(x);
        }
    }
    Ok(best)
}

pub fn diameter(net: &SensorNetwork) -> Result<usize, GraphError> {
    diameter_of(net.adjacency())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rejection {
    /// reference tetrahedron thinner than the admission threshold
    LowQuality(f64),
    Geometry(GeometryError),
}

#[derive(Debug, Clone, Default)]
pub struct CliqueWeighing {
    pub admitted: Vec<WeightedClique>,
    pub rejected: Vec<(Clique5, Rejection)>,
}

/// Barycentric weights from the ten ranges of each clique (taken from the
/// ground-truth configuration). Cliques whose reference tetrahedron has
/// |V| < min_quality·L³ in the reconstructed frame are not admitted.
pub fn weigh_cliques(config: &Configuration, cliques: &[Clique5], min_quality: f64) -> CliqueWeighing {
    let mut out = CliqueWeighing::default();
    for c in cliques {
        let pts = c.members().map(|id| config.position(id));
        let result = SquaredDistanceMatrix5::from_points(&pts).and_then(|d| cfc(&d)).and_then(|frame| {
            let quality = frame.reference_shape_ratio();
            if quality < min_quality {
                return Ok(Err(quality));
            }
            barycentric_from_frame(&frame).map(Ok)
        });
        match result {
            Ok(Ok(quad)) => out.admitted.push(WeightedClique { clique: *c, quad }),
            Ok(Err(q)) => out.rejected.push((*c, Rejection::LowQuality(q))),
            Err(e) => out.rejected.push((*c, Rejection::Geometry(e))),
        }
    }
    out
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_rows(cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for r in rows {
            let mut r = r.clone();
            r.sort_by_key(|e| e.0);
            for (c, v) in r {
                assert!(c < cols);
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix { rows: rows.len(), cols, row_ptr, col_idx, values }
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let s = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[s.clone()].iter().copied().zip(self.values[s].iter().copied())
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| self.row(r).map(|(c, v)| v * x[c]).sum()).collect()
    }

    pub fn transpose_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * yr;
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in d.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] += v;
            }
        }
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowKey {
    pub center: NodeId,
    pub clique_index: usize,
}

/// M p_f = B p_a, one row per (free center, clique).
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub m: SparseMatrix,
    /// rows × 4, columns follow `anchors`
    pub b: Vec<[f64; 4]>,
    pub rows: Vec<RowKey>,
    /// column order of M
    pub free: Vec<NodeId>,
    pub anchors: [NodeId; 4],
}

impl LinearSystem {
    pub fn column_of(&self, id: NodeId) -> Option<usize> {
        self.free.binary_search(&id).ok()
    }

    /// M x_f − B x_a, evaluated per axis.
    pub fn residual(&self, config: &Configuration) -> Vec<Point3> {
        let xf: Vec<Point3> = self.free.iter().map(|id| config.position(*id)).collect();
        let xa = self.anchors.map(|id| config.position(id));
        (0..self.m.rows)
            .map(|r| {
                let mut acc = Point3::ZERO;
                for (c, v) in self.m.row(r) {
                    acc += v * xf[c];
                }
                for (k, a) in self.b[r].iter().enumerate() {
                    acc -= *a * xa[k];
                }
                acc
            })
            .collect()
    }
}

/// Rows for every weighted clique centered at a free node of `net` whose
/// members all belong to `net`.
pub fn assemble_linear_system(net: &SensorNetwork, cliques: &[WeightedClique]) -> LinearSystem {
    assemble_over(net.free(), net.anchors(), cliques)
}

/// Rows for every clique centered in `free` whose references are in `free`
/// or are anchors, with columns in ascending id order.
pub fn assemble_over(free: Vec<NodeId>, anchors: [NodeId; 4], cliques: &[WeightedClique]) -> LinearSystem {
    let mut free = free;
    free.sort_unstable();
    free.dedup();
    let col: HashMap<NodeId, usize> = free.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut rows = Vec::new();
    let mut b = Vec::new();
    let mut keys = Vec::new();
    for wc in cliques {
        let c = &wc.clique;
        if !col.contains_key(&c.center) || !c.refs.iter().all(|r| col.contains_key(r) || anchors.contains(r)) {
            continue;
        }
        let mut row = vec![(col[&c.center], 1.0)];
        let mut brow = [0.0; 4];
        for (r, a) in c.refs.iter().zip(wc.quad.weights) {
            match col.get(r) {
                Some(&j) => row.push((j, -a)),
                None => {
                    let k = anchors.iter().position(|x| x == r).expect("member is free or anchor");
                    brow[k] += a;
                }
            }
        }
        rows.push(row);
        b.push(brow);
        keys.push(RowKey { center: c.center, clique_index: c.index });
    }
    LinearSystem { m: SparseMatrix::from_rows(free.len(), &rows), b, rows: keys, free, anchors }
}

/// Text format: header line, `n`, `anchors`, one `node id x y z` per node
/// and one `edge a b` per edge.
pub fn write_network<W: Write>(mut w: W, net: &SensorNetwork, config: &Configuration) -> std::io::Result<()> {
    writeln!(w, "{NETWORK_FORMAT_HEADER}")?;
    writeln!(w, "n {}", net.n())?;
    let a = net.anchors();
    writeln!(w, "anchors {} {} {} {}", a[0], a[1], a[2], a[3])?;
    for id in net.nodes() {
        let p = config.position(*id);
        writeln!(w, "node {} {:?} {:?} {:?}", id, p.x, p.y, p.z)?;
    }
    for (x, y) in net.edges() {
        writeln!(w, "edge {x} {y}")?;
    }
    Ok(())
}

pub fn read_network<R: BufRead>(r: R) -> Result<(Configuration, SensorNetwork), GraphError> {
    let mut lines = r.lines().enumerate();
    let parse_err = |line: usize, message: String| GraphError::Parse { line: line + 1, message };
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == NETWORK_FORMAT_HEADER => {}
        Some((i, Ok(h))) => {
            return Err(parse_err(i, format!("expected header `{NETWORK_FORMAT_HEADER}`, found `{h}`")))
        }
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(parse_err(0, "empty network file".into())),
    }
    let mut declared_n = None;
    let mut anchors = None;
    let mut config = Configuration::new();
    let mut edges = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        let key = tok.next().unwrap_or_default();
        let rest: Vec<&str> = tok.collect();
        let ids = |want: usize| -> Result<Vec<NodeId>, GraphError> {
            if rest.len() != want {
                return Err(parse_err(i, format!("`{key}` expects {want} fields, found {}", rest.len())));
            }
            rest.iter()
                .map(|s| s.parse::<NodeId>().map_err(|e| parse_err(i, format!("bad node id `{s}`: {e}"))))
                .collect()
        };
        match key {
            "n" => {
                let v = rest.first().and_then(|s| s.parse::<usize>().ok());
                declared_n = Some(v.ok_or_else(|| parse_err(i, "`n` expects a count".into()))?);
            }
            "anchors" => {
                let v = ids(4)?;
                anchors = Some([v[0], v[1], v[2], v[3]]);
            }
            "node" => {
                if rest.len() != 4 {
                    return Err(parse_err(i, "`node` expects id x y z".into()));
                }
                let id: NodeId = rest[0].parse().map_err(|e| parse_err(i, format!("bad node id: {e}")))?;
                let mut c = [0.0; 3];
                for (k, s) in rest[1..].iter().enumerate() {
                    c[k] = s.parse::<f64>().map_err(|e| parse_err(i, format!("bad coordinate `{s}`: {e}")))?;
                    if !c[k].is_finite() {
                        return Err(parse_err(i, format!("coordinate `{s}` is not finite")));
                    }
                }
                if config.get(id).is_some() {
                    return Err(parse_err(i, format!("node {id} listed twice")));
                }
                config.insert(id, Point3::from_array(c));
            }
            "edge" => {
                let v = ids(2)?;
                edges.push((v[0], v[1]));
            }
            other => return Err(parse_err(i, format!("unknown record `{other}`"))),
        }
    }
    let anchors = anchors.ok_or_else(|| GraphError::Invalid("missing `anchors` record".into()))?;
    if let Some(n) = declared_n {
        if n != config.len() {
            return Err(GraphError::Invalid(format!("declared n={n} but {} nodes listed", config.len())));
        }
    }
    let net = SensorNetwork::new(config.iter().map(|(id, _)| id), edges, anchors)?;
    Ok((config, net))
}
