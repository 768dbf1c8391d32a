//! Distributed localizability verification.
//!
//! Each free node owns one row of an n_f-column iterate V. Every iteration
//! computes U = MᵀM V with a local sum, Rayleigh quotients λ_s with one
//! batched FKMS, and a new orthonormal V from U. Node i is unlocalizable iff
//! some column with λ_s ≈ 0 has a non-negligible entry in row i.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collective::{Backend, Collective, CollectiveError, CommLedger};
use crate::graph::{count_components, GraphError, NodeId, SensorNetwork, WeightedClique};
use crate::runtime::Topology;

pub use crate::local_sum::{
    local_sum_weights, CliqueRow, LocalSumMode, LocalSumProgram, LocalSumSpec, LocalSumWeights,
};

pub const VERDICT_FORMAT: &str = "baryloc-verdicts v1";
/// Stream offset separating verification draws from other per-node draws.
pub(crate) const VERIFY_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("Gram matrix singular after {restarts} restarts")]
    GramSingular { restarts: usize },
    #[error("localizable subgraph is disconnected ({components} components)")]
    SubgraphDisconnected { components: usize },
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orthonormalization {
    /// classical Gram–Schmidt with reorthogonalization, rank revealing
    #[default]
    GramSchmidt,
    /// Cholesky of O = UᵀU, restart on breakdown
    Cholesky,
}

impl FromStr for Orthonormalization {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gram-schmidt" => Ok(Orthonormalization::GramSchmidt),
            "cholesky" => Ok(Orthonormalization::Cholesky),
            o => Err(format!("unknown orthonormalization `{o}` (expected gram-schmidt or cholesky)")),
        }
    }
}

impl fmt::Display for Orthonormalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Orthonormalization::GramSchmidt => "gram-schmidt",
            Orthonormalization::Cholesky => "cholesky",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationParams {
    /// zero-eigenvalue threshold relative to max λ
    pub epsilon1: f64,
    /// component magnitude threshold
    pub epsilon2: f64,
    pub iter_max: usize,
    /// early exit when max |Δλ| < change_tol · max λ
    pub change_tol: f64,
    pub k: usize,
    /// round budget per KMC phase; the topology diameter when `None`
    pub delta: Option<usize>,
    pub seed: u64,
    pub orthonormalization: Orthonormalization,
    pub backend: Backend,
}

impl Default for VerificationParams {
    fn default() -> Self {
        VerificationParams {
            epsilon1: 1e-8,
            epsilon2: 1e-6,
            iter_max: 500,
            change_tol: 1e-12,
            k: 1,
            delta: None,
            seed: 0,
            orthonormalization: Orthonormalization::GramSchmidt,
            backend: Backend::Direct,
        }
    }
}

/// One free node's share of the iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifierState {
    pub node: NodeId,
    pub column: usize,
    pub v_row: Vec<f64>,
    pub u_row: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalizabilityVerdict {
    pub node: NodeId,
    pub localizable: bool,
    pub witness: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub verdicts: Vec<LocalizabilityVerdict>,
    /// Rayleigh quotients of the final iterate, by column
    pub lambdas: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_change: f64,
    pub restarts: usize,
    /// columns rebuilt because U was rank deficient there
    pub replaced_columns: usize,
    /// columns with λ below the threshold but no entry above ε₂ anywhere
    pub unsupported_small_eigenvalues: usize,
    pub delta: usize,
    pub ledger: CommLedger,
}

impl VerificationReport {
    pub fn n_f(&self) -> usize {
        self.verdicts.len()
    }

    pub fn localizable(&self) -> BTreeSet<NodeId> {
        self.verdicts.iter().filter(|v| v.localizable).map(|v| v.node).collect()
    }

    pub fn unlocalizable(&self) -> BTreeSet<NodeId> {
        self.verdicts.iter().filter(|v| !v.localizable).map(|v| v.node).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "format": VERDICT_FORMAT,
            "iterations": self.iterations,
            "converged": self.converged,
            "final_change": self.final_change,
            "restarts": self.restarts,
            "replaced_columns": self.replaced_columns,
            "unsupported_small_eigenvalues": self.unsupported_small_eigenvalues,
            "lambdas": self.lambdas,
            "verdicts": self.verdicts,
        })
    }
}

/// Node-local uniform draws on [−1, 1], one independent stream per node.
fn node_rng(seed: u64, id: NodeId) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(VERIFY_STREAM + id.0 as u64);
    rng
}

pub struct Verifier<'a> {
    coll: Collective<'a>,
    weights: Vec<LocalSumWeights>,
    spec: LocalSumSpec,
    /// aligned with the topology; relays have empty rows
    pub states: Vec<VerifierState>,
    holders: Vec<bool>,
    rngs: Vec<ChaCha8Rng>,
    n_f: usize,
    method: Orthonormalization,
    pub restarts: usize,
    pub replaced_columns: usize,
}

/// Relative size below which a projected column counts as dependent.
const DEFICIENCY_TOL: f64 = 1e-10;
const MAX_RESTARTS: usize = 3;
const MIN_RAYLEIGH_DENOMINATOR: f64 = 1e-300;

impl<'a> Verifier<'a> {
    pub fn new(
        topo: &'a Topology,
        net: &SensorNetwork,
        cliques: &[WeightedClique],
        params: &VerificationParams,
    ) -> Result<Self, VerificationError> {
        let delta = params.delta.unwrap_or(topo.diameter());
        let free = net.free();
        let n_f = free.len();
        let holders: Vec<bool> = topo.nodes().iter().map(|id| !net.is_anchor(*id)).collect();
        let coll = Collective::new(topo, params.backend, params.k, delta, holders.clone())?;
        let weights = local_sum_weights(net, cliques, topo.nodes());
        let spec = LocalSumSpec { anchors: net.anchors(), mode: LocalSumMode::Product, dim: n_f };
        let mut rngs: Vec<ChaCha8Rng> = topo.nodes().iter().map(|id| node_rng(params.seed, *id)).collect();
        let states = topo
            .nodes()
            .iter()
            .zip(&holders)
            .zip(rngs.iter_mut())
            .map(|((id, h), rng)| VerifierState {
                node: *id,
                column: if *h { free.binary_search(id).expect("free node") } else { usize::MAX },
                v_row: if *h { (0..n_f).map(|_| rng.gen_range(-1.0..=1.0)).collect() } else { Vec::new() },
                u_row: Vec::new(),
                lambdas: Vec::new(),
                iteration: 0,
            })
            .collect();
        Ok(Verifier {
            coll,
            weights,
            spec,
            states,
            holders,
            rngs,
            n_f,
            method: params.orthonormalization,
            restarts: 0,
            replaced_columns: 0,
        })
    }

    pub fn ledger(&self) -> &CommLedger {
        self.coll.ledger()
    }

    pub fn delta(&self) -> usize {
        self.coll.delta()
    }

    fn rows<F: Fn(&VerifierState) -> Vec<f64>>(&self, f: F) -> Vec<Vec<f64>> {
        self.states.iter().zip(&self.holders).map(|(s, h)| if *h { f(s) } else { Vec::new() }).collect()
    }

    /// U = MᵀM V and Rayleigh quotients; returns max |Δλ|.
    pub fn rayleigh_step(&mut self) -> Result<f64, VerificationError> {
        let n_f = self.n_f;
        let values: Vec<Option<Vec<f64>>> =
            self.states.iter().zip(&self.holders).map(|(s, h)| h.then(|| s.v_row.clone())).collect();
        let u = self.coll.local_sum(&self.weights, &self.spec, &values)?;
        for ((s, h), u) in self.states.iter_mut().zip(&self.holders).zip(u) {
            s.u_row = if *h { u } else { Vec::new() };
        }
        let quotient = self.rows(|s| {
            let mut r: Vec<f64> = s.v_row.iter().zip(&s.u_row).map(|(v, u)| v * u).collect();
            r.extend(s.v_row.iter().map(|v| v * v));
            r
        });
        let sums = self.coll.sum(&quotient, 2 * n_f)?;
        let previous = self.states.iter().find(|s| s.column != usize::MAX).map(|s| s.lambdas.clone());
        let mut lambdas = vec![0.0; n_f];
        let mut dead_columns = Vec::new();
        for s in 0..n_f {
            let den = sums[n_f + s];
            if den < MIN_RAYLEIGH_DENOMINATOR {
                dead_columns.push(s);
                lambdas[s] = previous.as_ref().and_then(|p| p.get(s).copied()).unwrap_or(0.0);
            } else {
                lambdas[s] = sums[s] / den;
            }
        }
        for s in dead_columns {
            for ((st, h), rng) in self.states.iter_mut().zip(&self.holders).zip(self.rngs.iter_mut()) {
                if *h {
                    st.v_row[s] = rng.gen_range(-1.0..=1.0);
                }
            }
        }
        let change = match &previous {
            Some(p) if p.len() == n_f => p.iter().zip(&lambdas).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            _ => f64::INFINITY,
        };
        for (s, h) in self.states.iter_mut().zip(&self.holders) {
            if *h {
                s.lambdas = lambdas.clone();
                s.iteration += 1;
            }
        }
        Ok(change)
    }

    /// Replaces V with an orthonormal basis built from U.
    pub fn orthonormalize(&mut self) -> Result<(), VerificationError> {
        match self.method {
            Orthonormalization::GramSchmidt => self.gram_schmidt(),
            Orthonormalization::Cholesky => self.cholesky(),
        }
    }

    /// One full iteration: local sum, Rayleigh quotients, orthonormalization.
    pub fn round(&mut self) -> Result<f64, VerificationError> {
        let change = self.rayleigh_step()?;
        self.orthonormalize()?;
        Ok(change)
    }

    /// Two projection passes of `w` against columns 0..j of `q`, then ‖w‖².
    fn project(&mut self, q: &[Vec<f64>], j: usize, w: &mut [f64]) -> Result<f64, VerificationError> {
        if j > 0 {
            for _ in 0..2 {
                let dots: Vec<Vec<f64>> = q
                    .iter()
                    .zip(w.iter())
                    .zip(&self.holders)
                    .map(|((row, wi), h)| if *h { row[..j].iter().map(|x| x * wi).collect() } else { Vec::new() })
                    .collect();
                let coef = self.coll.sum(&dots, j)?;
                for ((row, wi), h) in q.iter().zip(w.iter_mut()).zip(&self.holders) {
                    if *h {
                        let mut acc = 0.0;
                        for l in 0..j {
                            acc += coef[l] * row[l];
                        }
                        *wi -= acc;
                    }
                }
            }
        }
        let sq: Vec<f64> = w.iter().zip(&self.holders).map(|(x, h)| if *h { x * x } else { 0.0 }).collect();
        Ok(self.coll.sum_scalar(&sq)?)
    }

    fn gram_schmidt(&mut self) -> Result<(), VerificationError> {
        let n_f = self.n_f;
        let n = self.states.len();
        let norms = {
            let sq = self.rows(|s| s.u_row.iter().map(|x| x * x).collect());
            self.coll.sum(&sq, n_f)?
        };
        let mut q: Vec<Vec<f64>> = (0..n).map(|i| if self.holders[i] { vec![0.0; n_f] } else { Vec::new() }).collect();
        let mut w = vec![0.0; n];
        for j in 0..n_f {
            for i in 0..n {
                w[i] = if self.holders[i] { self.states[i].u_row[j] } else { 0.0 };
            }
            let mut reference = norms[j];
            let mut nrm2 = self.project(&q, j, &mut w)?;
            let mut attempt = 0;
            while !(nrm2 > DEFICIENCY_TOL * DEFICIENCY_TOL * reference && nrm2 > 0.0) {
                // U is rank deficient here: continue from the previous
                // iterate's column, then from fresh random draws
                self.replaced_columns += usize::from(attempt == 0);
                for i in 0..n {
                    if self.holders[i] {
                        w[i] = if attempt == 0 { self.states[i].v_row[j] } else { self.rngs[i].gen_range(-1.0..=1.0) };
                    }
                }
                let sq: Vec<f64> = w.iter().map(|x| x * x).collect();
                reference = self.coll.sum_scalar(&sq)?;
                nrm2 = self.project(&q, j, &mut w)?;
                attempt += 1;
                if attempt > 4 {
                    return Err(VerificationError::GramSingular { restarts: self.restarts });
                }
            }
            let inv = 1.0 / nrm2.sqrt();
            for i in 0..n {
                if self.holders[i] {
                    q[i][j] = w[i] * inv;
                }
            }
        }
        for (s, row) in self.states.iter_mut().zip(q) {
            if !row.is_empty() {
                s.v_row = row;
            }
        }
        Ok(())
    }

    fn cholesky(&mut self) -> Result<(), VerificationError> {
        let n_f = self.n_f;
        let outer = self.rows(|s| {
            let mut r = Vec::with_capacity(n_f * (n_f + 1) / 2);
            for a in 0..n_f {
                for b in a..n_f {
                    r.push(s.u_row[a] * s.u_row[b]);
                }
            }
            r
        });
        let packed = self.coll.sum(&outer, n_f * (n_f + 1) / 2)?;
        let mut o = vec![vec![0.0; n_f]; n_f];
        let mut p = 0;
        for a in 0..n_f {
            for b in a..n_f {
                o[a][b] = packed[p];
                o[b][a] = packed[p];
                p += 1;
            }
        }
        match cholesky_upper(&o) {
            Some(r) => {
                for s in self.states.iter_mut() {
                    if s.column == usize::MAX {
                        continue;
                    }
                    // v R = u, forward substitution on the row vector
                    let mut v = vec![0.0; n_f];
                    for t in 0..n_f {
                        let mut acc = s.u_row[t];
                        for a in 0..t {
                            acc -= v[a] * r[a][t];
                        }
                        v[t] = acc / r[t][t];
                    }
                    s.v_row = v;
                }
                Ok(())
            }
            None => {
                if self.restarts >= MAX_RESTARTS {
                    return Err(VerificationError::GramSingular { restarts: self.restarts });
                }
                self.restarts += 1;
                for ((s, h), rng) in self.states.iter_mut().zip(&self.holders).zip(self.rngs.iter_mut()) {
                    if *h {
                        s.v_row = (0..n_f).map(|_| rng.gen_range(-1.0..=1.0)).collect();
                        s.lambdas.clear();
                    }
                }
                Ok(())
            }
        }
    }

    /// FKMS-computed VᵀV, for checking orthonormality.
    pub fn gram_of_v(&mut self) -> Result<Vec<Vec<f64>>, VerificationError> {
        let n_f = self.n_f;
        let outer = self.rows(|s| {
            let mut r = Vec::with_capacity(n_f * n_f);
            for a in 0..n_f {
                for b in 0..n_f {
                    r.push(s.v_row[a] * s.v_row[b]);
                }
            }
            r
        });
        let flat = self.coll.sum(&outer, n_f * n_f)?;
        Ok(flat.chunks(n_f.max(1)).map(|c| c.to_vec()).collect())
    }

    pub fn verdicts(&self, epsilon1: f64, epsilon2: f64) -> (Vec<LocalizabilityVerdict>, usize) {
        let Some(any) = self.states.iter().find(|s| s.column != usize::MAX) else {
            return (Vec::new(), 0);
        };
        let lambdas = &any.lambdas;
        let max_l = lambdas.iter().copied().fold(0.0, f64::max);
        let small: Vec<usize> = (0..lambdas.len()).filter(|&s| lambdas[s] <= epsilon1 * max_l).collect();
        let mut supported = vec![false; lambdas.len()];
        let mut verdicts = Vec::new();
        for st in self.states.iter().filter(|s| s.column != usize::MAX) {
            let witness: Vec<usize> = small.iter().copied().filter(|&s| st.v_row[s].abs() > epsilon2).collect();
            for &s in &witness {
                supported[s] = true;
            }
            verdicts.push(LocalizabilityVerdict { node: st.node, localizable: witness.is_empty(), witness });
        }
        let unsupported = small.iter().filter(|&&s| !supported[s]).count();
        (verdicts, unsupported)
    }
}

/// Upper-triangular R with RᵀR = O, or `None` when a pivot falls below
/// 1e-12·trace(O)/n.
fn cholesky_upper(o: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = o.len();
    let trace: f64 = (0..n).map(|i| o[i][i]).sum();
    let tol = 1e-12 * trace / n.max(1) as f64;
    let mut r = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut d = o[j][j];
        for k in 0..j {
            d -= r[k][j] * r[k][j];
        }
        if !(d > tol) {
            return None;
        }
        let rjj = d.sqrt();
        r[j][j] = rjj;
        for c in (j + 1)..n {
            let mut s = o[j][c];
            for k in 0..j {
                s -= r[k][j] * r[k][c];
            }
            r[j][c] = s / rjj;
        }
    }
    Some(r)
}

/// Runs the orthogonal iteration on a pruned network (anchors relay) and
/// classifies every free node.
pub fn verify_localizability(
    net: &SensorNetwork,
    cliques: &[WeightedClique],
    params: &VerificationParams,
) -> Result<VerificationReport, VerificationError> {
    let topo = Topology::from_network(net)?;
    let mut ver = Verifier::new(&topo, net, cliques, params)?;
    let delta = ver.delta();
    if ver.n_f == 0 {
        return Ok(VerificationReport {
            verdicts: Vec::new(),
            lambdas: Vec::new(),
            iterations: 0,
            converged: true,
            final_change: 0.0,
            restarts: 0,
            replaced_columns: 0,
            unsupported_small_eigenvalues: 0,
            delta,
            ledger: ver.ledger().clone(),
        });
    }
    let mut iterations = 0;
    let mut converged = false;
    let mut change = f64::INFINITY;
    let iter_max = params.iter_max.max(1);
    for k in 0..iter_max {
        change = ver.rayleigh_step()?;
        iterations = k + 1;
        let max_l = ver
            .states
            .iter()
            .find(|s| s.column != usize::MAX)
            .map_or(0.0, |s| s.lambdas.iter().copied().fold(0.0, f64::max));
        if k >= 1 && change < params.change_tol * max_l {
            converged = true;
            break;
        }
        if k + 1 == iter_max {
            break;
        }
        ver.orthonormalize()?;
    }
    let (verdicts, unsupported) = ver.verdicts(params.epsilon1, params.epsilon2);
    let lambdas = ver.states.iter().find(|s| s.column != usize::MAX).map(|s| s.lambdas.clone()).unwrap_or_default();
    Ok(VerificationReport {
        verdicts,
        lambdas,
        iterations,
        converged,
        final_change: change,
        restarts: ver.restarts,
        replaced_columns: ver.replaced_columns,
        unsupported_small_eigenvalues: unsupported,
        delta,
        ledger: ver.ledger().clone(),
    })
}

/// The free nodes declared localizable, after checking that they induce a
/// connected subgraph.
pub fn localizable_subgraph(
    net: &SensorNetwork,
    report: &VerificationReport,
) -> Result<BTreeSet<NodeId>, VerificationError> {
    let keep = report.localizable();
    if keep.is_empty() {
        return Ok(keep);
    }
    let ids: Vec<NodeId> = keep.iter().copied().collect();
    let adj: Vec<Vec<usize>> = ids
        .iter()
        .map(|a| ids.iter().enumerate().filter(|(_, b)| net.has_edge(*a, **b)).map(|(j, _)| j).collect())
        .collect();
    let components = count_components(&adj);
    if components > 1 {
        return Err(VerificationError::SubgraphDisconnected { components });
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BarycentricQuad, Point3};
    use crate::graph::{
        assemble_linear_system, discover_cliques, generate_random_geometric, prune_scarcely_connected, weigh_cliques,
        AnchorRule, Clique5, Configuration, GenerationParams,
    };
    use crate::reference::{gram, kernel_localizability, spectral};

    fn small_net(seed: u64, n: usize, radius: f64) -> Option<(Configuration, SensorNetwork, Vec<WeightedClique>)> {
        let (config, net) = generate_random_geometric(&GenerationParams {
            n,
            box_side: 100.0,
            radius,
            anchor_rule: AnchorRule::Random,
            seed,
        })
        .ok()?;
        let (pruned, _) = prune_scarcely_connected(&net).ok()?;
        let w = weigh_cliques(&config, &discover_cliques(&pruned), 1e-2);
        Some((config, pruned, w.admitted))
    }

    /// Free nodes 1..=m each centered in one clique of the 4 anchors.
    fn anchored_star(m: u32) -> (SensorNetwork, Vec<WeightedClique>) {
        let anchors = [m + 1, m + 2, m + 3, m + 4].map(NodeId);
        let mut edges = Vec::new();
        for a in 0..4 {
            for b in (a + 1)..4 {
                edges.push((anchors[a], anchors[b]));
            }
        }
        let mut cliques = Vec::new();
        for i in 1..=m {
            for a in anchors {
                edges.push((NodeId(i), a));
            }
            cliques.push(WeightedClique {
                clique: Clique5 { center: NodeId(i), refs: anchors, index: 0 },
                quad: BarycentricQuad { weights: [0.1, 0.2, 0.3, 0.4] },
            });
        }
        let net = SensorNetwork::new((1..=m + 4).map(NodeId), edges, anchors).unwrap();
        (net, cliques)
    }

    #[test]
    fn identity_system_converges_at_once() {
        let (net, cliques) = anchored_star(3);
        let report = verify_localizability(&net, &cliques, &VerificationParams::default()).unwrap();
        for l in &report.lambdas {
            assert!((l - 1.0).abs() < 1e-12);
        }
        assert!(report.converged);
        assert!(report.iterations <= 3);
        assert!(report.verdicts.iter().all(|v| v.localizable));
    }

    #[test]
    fn iterate_stays_orthonormal() {
        for method in [Orthonormalization::GramSchmidt, Orthonormalization::Cholesky] {
            let (_, net, cliques) = (0..20).find_map(|s| small_net(s, 14, 60.0)).unwrap();
            let topo = Topology::from_network(&net).unwrap();
            let params = VerificationParams { orthonormalization: method, seed: 4, ..Default::default() };
            let mut ver = Verifier::new(&topo, &net, &cliques, &params).unwrap();
            for _ in 0..4 {
                match ver.round() {
                    Ok(_) => {}
                    Err(VerificationError::GramSingular { .. }) => break,
                    Err(e) => panic!("{e}"),
                }
                if ver.restarts > 0 {
                    continue;
                }
                let g = ver.gram_of_v().unwrap();
                for (a, row) in g.iter().enumerate() {
                    for (b, x) in row.iter().enumerate() {
                        let want = if a == b { 1.0 } else { 0.0 };
                        assert!((x - want).abs() < 1e-8, "{method}: ({a},{b}) = {x}");
                    }
                }
            }
        }
    }

    #[test]
    fn spectrum_and_verdicts_match_oracle() {
        let mut checked = 0;
        for seed in 0..40 {
            let Some((_, net, cliques)) = small_net(seed, 16, 55.0) else { continue };
            if net.free().len() > 20 || net.free().is_empty() {
                continue;
            }
            let sys = assemble_linear_system(&net, &cliques);
            let oracle = kernel_localizability(&sys.m);
            let params = VerificationParams { seed, ..Default::default() };
            let report = verify_localizability(&net, &cliques, &params).unwrap();
            for (v, want) in report.verdicts.iter().zip(&oracle) {
                assert_eq!(v.localizable, *want, "seed {seed} node {}", v.node);
            }
            if report.converged {
                let spec = spectral(&gram(&sys.m));
                let mut got = report.lambdas.clone();
                got.sort_by(f64::total_cmp);
                let top = spec.lambda_max();
                for (a, b) in got.iter().zip(&spec.values) {
                    assert!((a - b).abs() < 1e-6 * top, "seed {seed}: {a} vs {b}");
                }
            }
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn no_equations_means_nothing_is_localizable() {
        let (net, _) = anchored_star(3);
        let report = verify_localizability(&net, &[], &VerificationParams::default()).unwrap();
        assert!(report.lambdas.iter().all(|l| *l == 0.0));
        assert!(report.localizable().is_empty());
    }

    #[test]
    fn disconnected_localizable_set_is_reported() {
        // two free nodes far apart, each anchored on its own
        let ids: Vec<NodeId> = (1..=6).map(NodeId).collect();
        let anchors = [3, 4, 5, 6].map(NodeId);
        let mut edges = Vec::new();
        for a in 0..4 {
            for b in (a + 1)..4 {
                edges.push((anchors[a], anchors[b]));
            }
        }
        for i in [1, 2] {
            for a in anchors {
                edges.push((NodeId(i), a));
            }
        }
        let net = SensorNetwork::new(ids, edges, anchors).unwrap();
        let cliques: Vec<WeightedClique> = [1, 2]
            .map(|i| WeightedClique {
                clique: Clique5 { center: NodeId(i), refs: anchors, index: 0 },
                quad: BarycentricQuad { weights: [0.25; 4] },
            })
            .to_vec();
        let report = verify_localizability(&net, &cliques, &VerificationParams::default()).unwrap();
        assert_eq!(report.localizable().len(), 2);
        assert!(matches!(
            localizable_subgraph(&net, &report),
            Err(VerificationError::SubgraphDisconnected { components: 2 })
        ));
    }

    #[test]
    fn kernel_node_is_flagged() {
        // only node 1 gets an equation; free nodes 2 and 3 appear in none
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(10.0, 0.0, 0.0),
            Point3::new(0.0, 10.0, 0.0),
            Point3::new(0.0, 0.0, 10.0),
        ];
        let anchors = [4, 5, 6, 7].map(NodeId);
        let mut config = Configuration::new();
        for (a, p) in anchors.iter().zip(pts) {
            config.insert(*a, p);
        }
        config.insert(NodeId(1), Point3::new(2.0, 2.0, 2.0));
        config.insert(NodeId(2), Point3::new(3.0, 1.0, 2.0));
        config.insert(NodeId(3), Point3::new(1.0, 3.0, 1.0));
        let mut edges = Vec::new();
        let all: Vec<NodeId> = (1..=7).map(NodeId).collect();
        for a in 0..7 {
            for b in (a + 1)..7 {
                edges.push((all[a], all[b]));
            }
        }
        let net = SensorNetwork::new(all.clone(), edges, anchors).unwrap();
        let cliques: Vec<WeightedClique> = weigh_cliques(&config, &discover_cliques(&net), 0.0)
            .admitted
            .into_iter()
            .filter(|c| c.clique.center == NodeId(1) && c.clique.refs == anchors)
            .collect();
        let report = verify_localizability(&net, &cliques, &VerificationParams::default()).unwrap();
        assert_eq!(report.localizable(), BTreeSet::from([NodeId(1)]));
        assert_eq!(report.unlocalizable(), BTreeSet::from([NodeId(2), NodeId(3)]));
        for v in &report.verdicts {
            assert_eq!(v.witness.is_empty(), v.localizable);
        }
    }
}
