//! Distributed conjugate-gradient localization on the localizable subgraph,
//! plus Richardson and Jacobi under-relaxation baselines.
//!
//! Unknowns are the positions of the localizable free nodes V_z; the rows
//! are the cliques centered in V_z whose references are in V_z or are
//! anchors. Each CG iteration is one FKMS for vᵀq followed by a joint
//! operation that sums r₊ᵀr₊ and computes w = A r₊ in the same rounds, after
//! which q = w + βq. That is 2F rounds per iteration with F the FKMS bound
//! on G_z. The initial residual needs one local sum over V_z and the
//! referenced anchors, and a joint operation for r(0)ᵀr(0) and A r(0).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collective::{Backend, Collective, CollectiveError, CommLedger};
use crate::consensus::fkms_round_bound;
use crate::geometry::Point3;
use crate::graph::{assemble_over, Configuration, GraphError, LinearSystem, NodeId, SensorNetwork, WeightedClique};
use crate::local_sum::{local_sum_weights, LocalSumMode, LocalSumSpec, LocalSumWeights};
use crate::runtime::Topology;

pub(crate) const CG_STREAM: u64 = 2 << 40;
/// Error ratio above which a baseline counts as diverged.
pub const DIVERGENCE_RATIO: f64 = 1e6;

#[derive(Debug, Error)]
pub enum LocalizationError {
    #[error("localizable subgraph is disconnected ({components} components)")]
    SubgraphDisconnected { components: usize },
    #[error("node {0} is not a free node of the network")]
    NotFree(NodeId),
    #[error("no position for anchor {0}")]
    MissingAnchor(NodeId),
    #[error("expected {expected} initial estimates, got {got}")]
    InitialCount { expected: usize, got: usize },
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Graph(GraphError),
}

impl From<GraphError> for LocalizationError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::Disconnected { components } => LocalizationError::SubgraphDisconnected { components },
            e => LocalizationError::Graph(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationParams {
    pub k: usize,
    /// round budget per KMC phase on G_z; its diameter when `None`
    pub delta: Option<usize>,
    /// stop once r·r ≤ tol²·r(0)·r(0)
    pub tol: f64,
    /// 3n_z + 5 when `None`
    pub max_iter: Option<usize>,
    pub seed: u64,
    /// side of the deployment box the random initial estimates come from
    pub box_side: f64,
    pub backend: Backend,
    /// keep every iterate (small instances only)
    pub keep_history: bool,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        LocalizationParams {
            k: 1,
            delta: None,
            tol: 1e-14,
            max_iter: None,
            seed: 0,
            box_side: 100.0,
            backend: Backend::Direct,
            keep_history: false,
        }
    }
}

/// One node's CG variables. α and β are identical everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CgState {
    pub node: NodeId,
    pub p_hat: Point3,
    pub r: Point3,
    pub v: Point3,
    pub q: Point3,
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Converged,
    MaxIterExceeded,
    /// vᵀq stopped being positive before the residual test was met
    Breakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSnapshot {
    pub x: Vec<Point3>,
    pub r: Vec<Point3>,
    pub v: Vec<Point3>,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct LocalizationResult {
    pub nodes: Vec<NodeId>,
    pub initial: Vec<Point3>,
    pub estimates: Vec<Point3>,
    pub iterations: usize,
    pub termination: Termination,
    pub max_iter: usize,
    /// rounds of the iterations, initialization excluded
    pub rounds: usize,
    pub init_rounds: usize,
    /// iterations · 2δ_z(⌈n_z/K⌉+1)
    pub round_bound: usize,
    /// 3n_z · 2δ_z(⌈n_z/K⌉+1)
    pub theorem_bound: usize,
    pub delta_z: usize,
    /// ‖r(k)‖ per iteration
    pub residual_norms: Vec<f64>,
    /// ‖p̂(k) − p‖ / ‖p̂(0) − p‖, empty without ground truth
    pub error_ratio: Vec<f64>,
    pub history: Vec<CgSnapshot>,
    pub ledger: CommLedger,
    pub init_ledger: CommLedger,
}

impl LocalizationResult {
    pub fn n_z(&self) -> usize {
        self.nodes.len()
    }

    pub fn estimate(&self, id: NodeId) -> Option<Point3> {
        self.nodes.binary_search(&id).ok().map(|i| self.estimates[i])
    }

    /// ‖p̂ − p‖ / ‖p‖ over the localized nodes.
    pub fn relative_error(&self, truth: &Configuration) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (id, p) in self.nodes.iter().zip(&self.estimates) {
            let t = truth.position(*id);
            num += (*p - t).dot(*p - t);
            den += t.dot(t);
        }
        if den == 0.0 {
            num.sqrt()
        } else {
            (num / den).sqrt()
        }
    }
}

/// The reduced system on V_z and its two communication graphs.
#[derive(Debug, Clone)]
pub struct LocalizationProblem {
    nodes: Vec<NodeId>,
    anchors: [NodeId; 4],
    anchor_positions: [Point3; 4],
    cliques: Vec<WeightedClique>,
    gz: Option<Topology>,
    init: Option<Topology>,
    gz_weights: Vec<LocalSumWeights>,
    init_weights: Vec<LocalSumWeights>,
}

impl LocalizationProblem {
    /// `anchor_positions` only needs entries for the four anchors.
    pub fn new(
        net: &SensorNetwork,
        cliques: &[WeightedClique],
        localizable: &BTreeSet<NodeId>,
        anchor_positions: &Configuration,
    ) -> Result<Self, LocalizationError> {
        if let Some(id) = localizable.iter().find(|id| !net.contains(**id) || net.is_anchor(**id)) {
            return Err(LocalizationError::NotFree(*id));
        }
        let anchors = net.anchors();
        let mut positions = [Point3::ZERO; 4];
        for (slot, a) in positions.iter_mut().zip(anchors) {
            *slot = anchor_positions.get(a).ok_or(LocalizationError::MissingAnchor(a))?;
        }
        let kept: Vec<WeightedClique> = cliques
            .iter()
            .filter(|wc| {
                let c = &wc.clique;
                localizable.contains(&c.center) && c.refs.iter().all(|r| localizable.contains(r) || anchors.contains(r))
            })
            .cloned()
            .collect();
        let nodes: Vec<NodeId> = localizable.iter().copied().collect();
        if nodes.is_empty() {
            return Ok(LocalizationProblem {
                nodes,
                anchors,
                anchor_positions: positions,
                cliques: kept,
                gz: None,
                init: None,
                gz_weights: Vec::new(),
                init_weights: Vec::new(),
            });
        }
        let gz = Topology::induced(net, localizable)?;
        let mut init_set = localizable.clone();
        for wc in &kept {
            init_set.extend(wc.clique.refs.iter().filter(|r| anchors.contains(r)));
        }
        let init = Topology::induced(net, &init_set)?;
        let gz_weights = local_sum_weights(net, &kept, gz.nodes());
        let init_weights = local_sum_weights(net, &kept, init.nodes());
        Ok(LocalizationProblem {
            nodes,
            anchors,
            anchor_positions: positions,
            cliques: kept,
            gz: Some(gz),
            init: Some(init),
            gz_weights,
            init_weights,
        })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn n_z(&self) -> usize {
        self.nodes.len()
    }

    pub fn cliques(&self) -> &[WeightedClique] {
        &self.cliques
    }

    pub fn delta_z(&self) -> usize {
        self.gz.as_ref().map_or(0, Topology::diameter)
    }

    pub fn anchor_positions(&self) -> &[Point3; 4] {
        &self.anchor_positions
    }

    /// M̄_z p_z = B̄_z p_a, columns in `nodes()` order.
    pub fn system(&self) -> LinearSystem {
        assemble_over(self.nodes.clone(), self.anchors, &self.cliques)
    }

    /// Per-node uniform draws in the deployment box.
    pub fn random_initial(&self, seed: u64, box_side: f64) -> Vec<Point3> {
        self.nodes
            .iter()
            .map(|id| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(CG_STREAM + id.0 as u64);
                let mut c = [0.0; 3];
                for x in c.iter_mut() {
                    *x = rng.gen_range(0.0..=box_side);
                }
                Point3::from_array(c)
            })
            .collect()
    }

    /// A p and b = Mᵀ B p_a, evaluated centrally through the sparse rows.
    fn normal_parts(&self) -> (LinearSystem, Vec<Point3>) {
        let sys = self.system();
        let mut b = vec![Point3::ZERO; self.nodes.len()];
        for axis in 0..3 {
            let rhs: Vec<f64> = sys
                .b
                .iter()
                .map(|row| row.iter().zip(&self.anchor_positions).map(|(w, p)| w * p.to_array()[axis]).sum())
                .collect();
            for (bi, x) in b.iter_mut().zip(sys.m.transpose_mul_vec(&rhs)) {
                set_axis(bi, axis, x);
            }
        }
        (sys, b)
    }
}

fn set_axis(p: &mut Point3, axis: usize, x: f64) {
    let mut a = p.to_array();
    a[axis] = x;
    *p = Point3::from_array(a);
}

fn apply_normal(sys: &LinearSystem, x: &[Point3]) -> Vec<Point3> {
    let m = &sys.m;
    let mut out = vec![Point3::ZERO; m.cols];
    for r in 0..m.rows {
        let mut mx = Point3::ZERO;
        for (c, v) in m.row(r) {
            mx += x[c] * v;
        }
        for (c, v) in m.row(r) {
            out[c] += mx * v;
        }
    }
    out
}

fn stacked_distance(a: &[Point3], b: &[Point3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x - *y).dot(*x - *y)).sum::<f64>().sqrt()
}

fn ratio_to_start(x: &[Point3], truth: &[Point3], start: f64) -> f64 {
    let e = stacked_distance(x, truth);
    if start == 0.0 {
        e
    } else {
        e / start
    }
}

fn as_vec(p: Point3) -> Vec<f64> {
    p.to_array().to_vec()
}

fn to_point(v: &[f64]) -> Point3 {
    Point3::new(v[0], v[1], v[2])
}

/// Drives the distributed CG on one problem.
pub struct Localizer<'p> {
    problem: &'p LocalizationProblem,
    coll: Collective<'p>,
    init_coll: Collective<'p>,
    product: LocalSumSpec,
    with_anchors: LocalSumSpec,
    pub states: Vec<CgState>,
    /// current r·r and r(0)·r(0)
    pub rr: f64,
    pub rr0: f64,
}

impl<'p> Localizer<'p> {
    /// Returns `None` for an empty V_z.
    pub fn new(
        problem: &'p LocalizationProblem,
        params: &LocalizationParams,
    ) -> Result<Option<Self>, LocalizationError> {
        let (Some(gz), Some(init)) = (&problem.gz, &problem.init) else {
            return Ok(None);
        };
        let delta = params.delta.unwrap_or(gz.diameter());
        let coll = Collective::new(gz, params.backend, params.k, delta, vec![true; gz.len()])?;
        let init_coll = Collective::new(init, params.backend, params.k, init.diameter(), vec![true; init.len()])?;
        let spec = |mode| LocalSumSpec { anchors: problem.anchors, mode, dim: 3 };
        Ok(Some(Localizer {
            problem,
            coll,
            init_coll,
            product: spec(LocalSumMode::Product),
            with_anchors: spec(LocalSumMode::WithAnchors),
            states: Vec::new(),
            rr: 0.0,
            rr0: 0.0,
        }))
    }

    pub fn fkms_rounds(&self) -> usize {
        self.coll.fkms_rounds()
    }

    pub fn ledger(&self) -> &CommLedger {
        self.coll.ledger()
    }

    pub fn init_ledger(&self) -> &CommLedger {
        self.init_coll.ledger()
    }

    /// r(0) = −Mᵀ(M p̂(0) − B p_a), v(0) = r(0), q(0) = A v(0).
    pub fn cg_init(&mut self, initial: &[Point3]) -> Result<(), LocalizationError> {
        let p = self.problem;
        if initial.len() != p.nodes.len() {
            return Err(LocalizationError::InitialCount { expected: p.nodes.len(), got: initial.len() });
        }
        let init = p.init.as_ref().expect("non-empty problem");
        let gz = p.gz.as_ref().expect("non-empty problem");
        let values: Vec<Option<Vec<f64>>> = init
            .nodes()
            .iter()
            .map(|id| match p.nodes.binary_search(id) {
                Ok(i) => Some(as_vec(initial[i])),
                Err(_) => {
                    let k = p.anchors.iter().position(|a| a == id).expect("init graph holds V_z and anchors");
                    Some(as_vec(p.anchor_positions[k]))
                }
            })
            .collect();
        let ys = self.init_coll.local_sum(&p.init_weights, &self.with_anchors, &values)?;
        let gz_nodes = gz.nodes();
        let mut r = vec![Point3::ZERO; gz_nodes.len()];
        for (id, y) in init.nodes().iter().zip(&ys) {
            if let Ok(i) = gz_nodes.binary_search(id) {
                r[i] = -to_point(y);
            }
        }
        let (rr, w) = self.residual_pass(&r)?;
        // the joint pass belongs to initialization, not to the iterations
        self.init_coll.absorb(self.coll.ledger());
        self.coll = Collective::new(gz, self.coll.backend(), self.coll.k(), self.coll.delta(), vec![true; gz.len()])?;
        self.states = gz_nodes
            .iter()
            .enumerate()
            .map(|(i, id)| CgState {
                node: *id,
                p_hat: initial[i],
                r: r[i],
                v: r[i],
                q: w[i],
                alpha: 0.0,
                beta: 0.0,
                k: 0,
            })
            .collect();
        self.rr = rr;
        self.rr0 = rr;
        Ok(())
    }

    /// Joint FKMS of r·r and local sum of r.
    fn residual_pass(&mut self, r: &[Point3]) -> Result<(f64, Vec<Point3>), LocalizationError> {
        let dots: Vec<Vec<f64>> = r.iter().map(|x| vec![x.dot(*x)]).collect();
        let vals: Vec<Option<Vec<f64>>> = r.iter().map(|x| Some(as_vec(*x))).collect();
        let (sums, w) = self.coll.sum_with_local_sum(&dots, 1, &self.problem.gz_weights, &self.product, &vals)?;
        Ok((sums[0], w.iter().map(|y| to_point(y)).collect()))
    }

    /// One CG step. Returns `false` on breakdown (vᵀq not positive).
    pub fn cg_iteration(&mut self) -> Result<bool, LocalizationError> {
        let vq_terms: Vec<f64> = self.states.iter().map(|s| s.v.dot(s.q)).collect();
        let vq = self.coll.sum_scalar(&vq_terms)?;
        if !(vq > 0.0) || !vq.is_finite() {
            return Ok(false);
        }
        let alpha = self.rr / vq;
        let r: Vec<Point3> = self
            .states
            .iter_mut()
            .map(|s| {
                s.p_hat += alpha * s.v;
                s.r -= alpha * s.q;
                s.alpha = alpha;
                s.r
            })
            .collect();
        let (rr_next, w) = self.residual_pass(&r)?;
        let beta = rr_next / self.rr;
        for (s, w) in self.states.iter_mut().zip(w) {
            s.v = s.r + beta * s.v;
            s.q = w + beta * s.q;
            s.beta = beta;
            s.k += 1;
        }
        self.rr = rr_next;
        Ok(true)
    }

    fn snapshot(&self) -> CgSnapshot {
        let first = self.states.first();
        CgSnapshot {
            x: self.states.iter().map(|s| s.p_hat).collect(),
            r: self.states.iter().map(|s| s.r).collect(),
            v: self.states.iter().map(|s| s.v).collect(),
            alpha: first.map_or(0.0, |s| s.alpha),
            beta: first.map_or(0.0, |s| s.beta),
        }
    }
}

/// Random initial estimates in the box, then [`localize_from`].
pub fn localize(
    problem: &LocalizationProblem,
    params: &LocalizationParams,
    truth: Option<&Configuration>,
) -> Result<LocalizationResult, LocalizationError> {
    let initial = problem.random_initial(params.seed, params.box_side);
    localize_from(problem, params, &initial, truth)
}

/// Runs CG from the given estimates (in `problem.nodes()` order). `truth`
/// only feeds the error-ratio series.
pub fn localize_from(
    problem: &LocalizationProblem,
    params: &LocalizationParams,
    initial: &[Point3],
    truth: Option<&Configuration>,
) -> Result<LocalizationResult, LocalizationError> {
    let n_z = problem.n_z();
    let max_iter = params.max_iter.unwrap_or(3 * n_z + 5);
    let truth_z: Option<Vec<Point3>> = truth.map(|c| problem.nodes.iter().map(|id| c.position(*id)).collect());
    let Some(mut loc) = Localizer::new(problem, params)? else {
        return Ok(LocalizationResult {
            nodes: Vec::new(),
            initial: Vec::new(),
            estimates: Vec::new(),
            iterations: 0,
            termination: Termination::Converged,
            max_iter,
            rounds: 0,
            init_rounds: 0,
            round_bound: 0,
            theorem_bound: 0,
            delta_z: 0,
            residual_norms: Vec::new(),
            error_ratio: Vec::new(),
            history: Vec::new(),
            ledger: CommLedger::default(),
            init_ledger: CommLedger::default(),
        });
    };
    loc.cg_init(initial)?;
    let start = truth_z.as_ref().map(|t| stacked_distance(initial, t));
    let mut error_ratio = Vec::new();
    let record = |loc: &Localizer, ratio: &mut Vec<f64>| {
        if let (Some(t), Some(s)) = (&truth_z, start) {
            let x: Vec<Point3> = loc.states.iter().map(|s| s.p_hat).collect();
            ratio.push(ratio_to_start(&x, t, s));
        }
    };
    record(&loc, &mut error_ratio);
    let mut residual_norms = vec![loc.rr.sqrt()];
    let mut history = Vec::new();
    if params.keep_history {
        history.push(loc.snapshot());
    }
    let target = params.tol * params.tol * loc.rr0;
    let mut iterations = 0;
    let termination = loop {
        if loc.rr <= target || loc.rr == 0.0 {
            break Termination::Converged;
        }
        if iterations == max_iter {
            break Termination::MaxIterExceeded;
        }
        if !loc.cg_iteration()? {
            break Termination::Breakdown;
        }
        iterations += 1;
        record(&loc, &mut error_ratio);
        residual_norms.push(loc.rr.sqrt());
        if params.keep_history {
            history.push(loc.snapshot());
        }
    };
    let f = fkms_round_bound(loc.coll.delta(), n_z, params.k);
    Ok(LocalizationResult {
        nodes: problem.nodes.clone(),
        initial: initial.to_vec(),
        estimates: loc.states.iter().map(|s| s.p_hat).collect(),
        iterations,
        termination,
        max_iter,
        rounds: loc.ledger().rounds,
        init_rounds: loc.init_ledger().rounds,
        round_bound: iterations * 2 * f,
        theorem_bound: 3 * n_z * 2 * f,
        delta_z: loc.coll.delta(),
        residual_norms,
        error_ratio,
        history,
        ledger: loc.ledger().clone(),
        init_ledger: loc.init_ledger().clone(),
    })
}

/// Error-ratio series of a centralized baseline run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineSeries {
    pub parameter: f64,
    pub error_ratio: Vec<f64>,
    /// iteration at which the ratio first exceeded [`DIVERGENCE_RATIO`]
    pub diverged_at: Option<usize>,
    pub estimates: Vec<Point3>,
}

fn run_baseline(
    problem: &LocalizationProblem,
    initial: &[Point3],
    truth: &[Point3],
    iters: usize,
    parameter: f64,
    mut step: impl FnMut(&LinearSystem, &[Point3], &[Point3], &mut Vec<Point3>),
) -> BaselineSeries {
    let (sys, b) = problem.normal_parts();
    let start = stacked_distance(initial, truth);
    let mut x = initial.to_vec();
    let mut ratio = vec![ratio_to_start(&x, truth, start)];
    let mut diverged_at = None;
    for k in 1..=iters {
        step(&sys, &b, &apply_normal(&sys, &x), &mut x);
        let e = ratio_to_start(&x, truth, start);
        ratio.push(e);
        if !(e <= DIVERGENCE_RATIO) {
            diverged_at = Some(k);
            break;
        }
    }
    BaselineSeries { parameter, error_ratio: ratio, diverged_at, estimates: x }
}

/// p̂ ← p̂ + γ(b − A p̂).
pub fn richardson_baseline(
    problem: &LocalizationProblem,
    initial: &[Point3],
    truth: &[Point3],
    gamma: f64,
    iters: usize,
) -> BaselineSeries {
    run_baseline(problem, initial, truth, iters, gamma, |_, b, ax, x| {
        for ((xi, bi), ai) in x.iter_mut().zip(b).zip(ax) {
            *xi += gamma * (*bi - *ai);
        }
    })
}

/// p̂ ← (1−ω)p̂ + ωD⁻¹(b − (A−D)p̂) with D = diag(A).
pub fn jacobi_ur_baseline(
    problem: &LocalizationProblem,
    initial: &[Point3],
    truth: &[Point3],
    omega: f64,
    iters: usize,
) -> BaselineSeries {
    let mut diag: Option<Vec<f64>> = None;
    run_baseline(problem, initial, truth, iters, omega, |sys, b, ax, x| {
        let d = diag.get_or_insert_with(|| {
            let mut d = vec![0.0; sys.m.cols];
            for r in 0..sys.m.rows {
                for (c, v) in sys.m.row(r) {
                    d[c] += v * v;
                }
            }
            d
        });
        for (((xi, bi), ai), di) in x.iter_mut().zip(b).zip(ax).zip(d.iter()) {
            *xi += omega / di * (*bi - *ai);
        }
    })
}

/// Largest eigenvalue of A = M̄_zᵀM̄_z.
pub fn normal_lambda_max(problem: &LocalizationProblem) -> f64 {
    let sys = problem.system();
    crate::reference::eigenvalues(&crate::reference::gram(&sys.m)).last().copied().unwrap_or(0.0)
}
