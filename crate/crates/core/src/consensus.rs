//! Finite-time K-max consensus (KMC) and the K-max consensus sum (FKMS).
//!
//! FKMS repeats KMC phases of `delta` rounds. At the end of a phase every
//! node holds the same K largest remaining entries, adds their values to its
//! running sum in descending (value, id) order and retires its own entry if it
//! was among them. The run ends after the first phase whose entries are all
//! exhausted, so `ceil(m/K) + 1` phases for `m` value holders.

use std::cmp::Ordering;

use thiserror::Error;

use crate::graph::NodeId;
use crate::runtime::{
    run, Envelope, NodeProgram, Outbox, Payload, ProgramError, RoundContext, RunError, RunStats, Step, Topology,
};

/// A real value or the retired sentinel, which orders below every real.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Value {
    Exhausted,
    Finite(f64),
}

impl Value {
    pub fn finite(self) -> Option<f64> {
        match self {
            Value::Finite(v) => Some(v),
            Value::Exhausted => None,
        }
    }

    fn cmp_total(&self, o: &Value) -> Ordering {
        match (self, o) {
            (Value::Exhausted, Value::Exhausted) => Ordering::Equal,
            (Value::Exhausted, Value::Finite(_)) => Ordering::Less,
            (Value::Finite(_), Value::Exhausted) => Ordering::Greater,
            (Value::Finite(a), Value::Finite(b)) => a.total_cmp(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub id: NodeId,
    pub value: Value,
}

impl Entry {
    pub fn new(id: NodeId, value: f64) -> Self {
        assert!(value.is_finite(), "consensus values must be finite");
        Entry { id, value: Value::Finite(value) }
    }

    /// Descending (value, id): `Less` means `self` ranks first.
    fn rank(&self, o: &Entry) -> Ordering {
        o.value.cmp_total(&self.value).then(o.id.cmp(&self.id))
    }
}

/// At most K entries, sorted descending by (value, id), ids unique.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OmegaSet {
    entries: Vec<Entry>,
}

impl OmegaSet {
    pub fn empty() -> Self {
        OmegaSet::default()
    }

    pub fn single(e: Entry) -> Self {
        OmegaSet { entries: vec![e] }
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn all_exhausted(&self) -> bool {
        self.entries.iter().all(|e| e.value == Value::Exhausted)
    }
}

impl Payload for OmegaSet {
    fn logical_size(&self) -> usize {
        2 * self.entries.len()
    }
}

/// The K greatest entries of the union, one copy per id.
pub fn kmax_merge(sets: &[&OmegaSet], k: usize) -> OmegaSet {
    assert!(k >= 1, "K must be at least 1");
    let mut all: Vec<Entry> = sets.iter().flat_map(|s| s.entries.iter().copied()).collect();
    all.sort_by(Entry::rank);
    let mut out: Vec<Entry> = Vec::with_capacity(k.min(all.len()));
    for e in all {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|x| x.id == e.id) {
            out.push(e);
        }
    }
    OmegaSet { entries: out }
}

/// Rounds used by FKMS with `m` value holders: delta·(ceil(m/K) + 1).
pub fn fkms_round_bound(delta: usize, m: usize, k: usize) -> usize {
    delta * (m.div_ceil(k) + 1)
}

/// The FKMS result computed in closed form: sequential sum in global
/// descending (value, id) order, starting from 0.
pub fn retirement_order_sum(entries: &mut [(f64, NodeId)]) -> f64 {
    let mut keys: Vec<u128> =
        entries.iter().map(|(v, id)| (u128::from(order_key(*v)) << 32) | u128::from(id.0)).collect();
    keys.sort_unstable();
    let mut sum = 0.0;
    for k in keys.iter().rev() {
        sum += from_order_key((k >> 32) as u64);
    }
    sum
}

// monotone in f64::total_cmp, so integer order is value order
fn order_key(v: f64) -> u64 {
    let b = v.to_bits() as i64;
    ((b ^ (((b >> 63) as u64) >> 1) as i64) as u64) ^ (1 << 63)
}

fn from_order_key(k: u64) -> f64 {
    let b = (k ^ (1 << 63)) as i64;
    f64::from_bits((b ^ (((b >> 63) as u64) >> 1) as i64) as u64)
}

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("delta {delta} is below the topology diameter {diameter}")]
    DeltaTooSmall { delta: usize, diameter: usize },
    #[error("node {node}: expected {expected} components, got {got}")]
    DimensionMismatch { node: NodeId, expected: usize, got: usize },
    #[error("one value slot per node required")]
    SlotCount,
    #[error("nodes disagree on the consensus result")]
    Disagreement,
    #[error(transparent)]
    Run(#[from] RunError),
}

/// One KMC phase as a node program: exactly `delta` rounds.
pub struct KmcProgram {
    k: usize,
    delta: usize,
    omega: OmegaSet,
}

impl KmcProgram {
    pub fn new(local: Option<Entry>, k: usize, delta: usize) -> Self {
        KmcProgram { k, delta, omega: local.map(OmegaSet::single).unwrap_or_default() }
    }
}

impl NodeProgram for KmcProgram {
    type Msg = OmegaSet;
    type Output = OmegaSet;

    fn on_round(
        &mut self,
        ctx: &RoundContext<'_>,
        inbox: &[Envelope<OmegaSet>],
        out: &mut Outbox<OmegaSet>,
    ) -> Result<Step<OmegaSet>, ProgramError> {
        if ctx.round > 1 {
            let mut sets: Vec<&OmegaSet> = vec![&self.omega];
            sets.extend(inbox.iter().map(|e| &e.payload));
            self.omega = kmax_merge(&sets, self.k);
        }
        if ctx.round > self.delta {
            return Ok(Step::Done(self.omega.clone()));
        }
        out.broadcast(ctx.neighbors, self.omega.clone());
        Ok(Step::Continue)
    }
}

/// Per-component Ω sets, one message per neighbour per round.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBatch(pub Vec<OmegaSet>);

impl Payload for OmegaBatch {
    fn logical_size(&self) -> usize {
        self.0.iter().map(Payload::logical_size).sum()
    }
}

/// FKMS over a vector of components sharing the same phases. A node with
/// `None` relays without contributing.
pub struct FkmsProgram {
    id: NodeId,
    k: usize,
    delta: usize,
    x_tmp: Option<Vec<Value>>,
    sums: Vec<f64>,
    omega: Vec<OmegaSet>,
    step: usize,
    phases: usize,
}

impl FkmsProgram {
    pub fn new(id: NodeId, values: Option<Vec<f64>>, components: usize, k: usize, delta: usize) -> Self {
        assert!(k >= 1);
        let x_tmp = values.map(|v| {
            assert_eq!(v.len(), components, "component count");
            v.into_iter()
                .map(|x| {
                    assert!(x.is_finite(), "FKMS value must be finite");
                    Value::Finite(x)
                })
                .collect()
        });
        FkmsProgram {
            id,
            k,
            delta,
            x_tmp,
            sums: vec![0.0; components],
            omega: vec![OmegaSet::empty(); components],
            step: 0,
            phases: 0,
        }
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    fn start_phase(&mut self) {
        for (c, o) in self.omega.iter_mut().enumerate() {
            *o = match &self.x_tmp {
                Some(x) => OmegaSet::single(Entry { id: self.id, value: x[c] }),
                None => OmegaSet::empty(),
            };
        }
        self.step = 0;
        self.phases += 1;
    }

    /// Accumulates retired values; true once nothing is left anywhere.
    fn finish_phase(&mut self) -> bool {
        let mut done = true;
        for (c, o) in self.omega.iter().enumerate() {
            for e in o.entries() {
                if let Value::Finite(v) = e.value {
                    self.sums[c] += v;
                }
            }
            if let Some(x) = self.x_tmp.as_mut() {
                if o.contains(self.id) {
                    x[c] = Value::Exhausted;
                }
            }
            done &= o.all_exhausted();
        }
        done
    }
}

/// Sums held by a node when FKMS ends, with the rounds it took.
#[derive(Debug, Clone, PartialEq)]
pub struct FkmsOutcome {
    pub sums: Vec<f64>,
    pub rounds: usize,
}

impl NodeProgram for FkmsProgram {
    type Msg = OmegaBatch;
    type Output = FkmsOutcome;

    fn on_round(
        &mut self,
        ctx: &RoundContext<'_>,
        inbox: &[Envelope<OmegaBatch>],
        out: &mut Outbox<OmegaBatch>,
    ) -> Result<Step<FkmsOutcome>, ProgramError> {
        if ctx.round == 1 {
            self.start_phase();
        } else {
            for (c, own) in self.omega.iter_mut().enumerate() {
                let mut sets: Vec<&OmegaSet> = vec![own];
                for e in inbox {
                    if e.payload.0.len() != self.sums.len() {
                        return Err(ProgramError::DimensionMismatch {
                            node: self.id,
                            expected: self.sums.len(),
                            got: e.payload.0.len(),
                        });
                    }
                    sets.push(&e.payload.0[c]);
                }
                *own = kmax_merge(&sets, self.k);
            }
            self.step += 1;
        }
        loop {
            if self.step < self.delta {
                out.broadcast(ctx.neighbors, OmegaBatch(self.omega.clone()));
                return Ok(Step::Continue);
            }
            if self.finish_phase() {
                return Ok(Step::Done(FkmsOutcome { sums: self.sums.clone(), rounds: ctx.round - 1 }));
            }
            self.start_phase();
        }
    }
}

/// Runs one KMC phase on `topo`; `values` aligned with `topo.nodes()`.
pub fn run_kmc(
    topo: &Topology,
    values: &[Option<f64>],
    k: usize,
    delta: usize,
) -> Result<(Vec<OmegaSet>, RunStats), ConsensusError> {
    check_params(topo, values.len(), k, delta)?;
    let mut progs: Vec<KmcProgram> = topo
        .nodes()
        .iter()
        .zip(values)
        .map(|(id, v)| KmcProgram::new(v.map(|x| Entry::new(*id, x)), k, delta))
        .collect();
    let out = run(topo, &mut progs, delta)?;
    Ok((out.outputs, out.stats))
}

/// Runs FKMS on `topo`. `values[i]` is `None` for relays; every holder must
/// supply `components` values. Returns the common result.
pub fn run_fkms(
    topo: &Topology,
    values: &[Option<Vec<f64>>],
    components: usize,
    k: usize,
    delta: usize,
) -> Result<(Vec<f64>, RunStats), ConsensusError> {
    check_params(topo, values.len(), k, delta)?;
    for (id, v) in topo.nodes().iter().zip(values) {
        if let Some(v) = v {
            if v.len() != components {
                return Err(ConsensusError::DimensionMismatch { node: *id, expected: components, got: v.len() });
            }
        }
    }
    let holders = values.iter().filter(|v| v.is_some()).count();
    let mut progs: Vec<FkmsProgram> =
        topo.nodes().iter().zip(values).map(|(id, v)| FkmsProgram::new(*id, v.clone(), components, k, delta)).collect();
    let out = run(topo, &mut progs, fkms_round_bound(delta, holders, k))?;
    let first = agreed_sums(&out.outputs)?;
    Ok((first, out.stats))
}

/// The common result of all nodes, or `Disagreement` unless bitwise equal.
pub fn agreed_sums(outputs: &[FkmsOutcome]) -> Result<Vec<f64>, ConsensusError> {
    let first = &outputs[0].sums;
    let agree = outputs
        .iter()
        .all(|o| o.sums.len() == first.len() && o.sums.iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits()));
    if !agree {
        return Err(ConsensusError::Disagreement);
    }
    Ok(first.clone())
}

/// Closed-form counterpart of [`run_fkms`]: same sums, bit for bit.
pub fn direct_fkms(ids: &[NodeId], values: &[Option<Vec<f64>>], components: usize) -> Vec<f64> {
    let mut buf: Vec<(f64, NodeId)> = Vec::with_capacity(ids.len());
    (0..components)
        .map(|c| {
            buf.clear();
            buf.extend(ids.iter().zip(values).filter_map(|(id, v)| v.as_ref().map(|v| (v[c], *id))));
            retirement_order_sum(&mut buf)
        })
        .collect()
}

fn check_params(topo: &Topology, slots: usize, k: usize, delta: usize) -> Result<(), ConsensusError> {
    if k == 0 {
        return Err(ConsensusError::ZeroK);
    }
    if slots != topo.len() {
        return Err(ConsensusError::SlotCount);
    }
    if delta < topo.diameter() {
        return Err(ConsensusError::DeltaTooSmall { delta, diameter: topo.diameter() });
    }
    Ok(())
}
