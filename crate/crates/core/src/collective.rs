//! Network-wide operations used by the distributed algorithms: FKMS sums and
//! local sums over one topology, either simulated message by message or
//! evaluated in closed form with the same arithmetic and round accounting.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consensus::{agreed_sums, direct_fkms, fkms_round_bound, ConsensusError, FkmsProgram};
use crate::graph::bfs_depths;
use crate::local_sum::{direct_local_sum, LocalSumProgram, LocalSumSpec, LocalSumWeights};
use crate::runtime::{run, Joint, ProgramError, RunError, RunStats, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    /// every message goes through the round engine
    Simulated,
    /// closed-form evaluation with analytic round and message counts
    #[default]
    Direct,
}

impl FromStr for Backend {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulated" => Ok(Backend::Simulated),
            "direct" => Ok(Backend::Direct),
            o => Err(format!("unknown backend `{o}` (expected simulated or direct)")),
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Backend::Simulated => "simulated",
            Backend::Direct => "direct",
        })
    }
}

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Program(#[from] ProgramError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("expected one slot per node ({expected}), got {got}")]
    SlotCount { expected: usize, got: usize },
}

/// Communication spent so far.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CommLedger {
    pub rounds: usize,
    pub messages: usize,
    pub payload: usize,
    pub fkms_calls: usize,
    /// FKMS invocations that took more rounds than delta·(ceil(m/K)+1)
    pub fkms_violations: usize,
    pub fkms_max_rounds: usize,
    pub local_sum_calls: usize,
}

impl CommLedger {
    pub fn absorb(&mut self, o: &CommLedger) {
        self.rounds += o.rounds;
        self.messages += o.messages;
        self.payload += o.payload;
        self.fkms_calls += o.fkms_calls;
        self.fkms_violations += o.fkms_violations;
        self.fkms_max_rounds = self.fkms_max_rounds.max(o.fkms_max_rounds);
        self.local_sum_calls += o.local_sum_calls;
    }

    fn charge(&mut self, stats: &RunStats) {
        self.rounds += stats.rounds;
        self.messages += stats.messages_sent;
        self.payload += stats.payload;
    }
}

pub struct Collective<'t> {
    topo: &'t Topology,
    backend: Backend,
    k: usize,
    delta: usize,
    holders: Vec<bool>,
    holder_count: usize,
    /// Σ_i deg_i Σ_{s<δ} 2·min(K, holders within s hops of i)
    phase_payload: Option<usize>,
    ledger: CommLedger,
}

impl<'t> Collective<'t> {
    /// `holders[i]` marks nodes that contribute values to sums; the others
    /// only relay.
    pub fn new(
        topo: &'t Topology,
        backend: Backend,
        k: usize,
        delta: usize,
        holders: Vec<bool>,
    ) -> Result<Self, CollectiveError> {
        if k == 0 {
            return Err(ConsensusError::ZeroK.into());
        }
        if delta < topo.diameter() {
            return Err(ConsensusError::DeltaTooSmall { delta, diameter: topo.diameter() }.into());
        }
        if holders.len() != topo.len() {
            return Err(CollectiveError::SlotCount { expected: topo.len(), got: holders.len() });
        }
        let holder_count = holders.iter().filter(|h| **h).count();
        Ok(Collective {
            topo,
            backend,
            k,
            delta,
            holders,
            holder_count,
            phase_payload: None,
            ledger: CommLedger::default(),
        })
    }

    pub fn topology(&self) -> &Topology {
        self.topo
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn delta(&self) -> usize {
        self.delta
    }

    pub fn holder_count(&self) -> usize {
        self.holder_count
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn absorb(&mut self, o: &CommLedger) {
        self.ledger.absorb(o);
    }

    /// Rounds of one FKMS invocation on this topology.
    pub fn fkms_rounds(&self) -> usize {
        fkms_round_bound(self.delta, self.holder_count, self.k)
    }

    /// Rounds of one local sum on this topology.
    pub fn local_sum_rounds(&self) -> usize {
        if self.topo.len() > 1 {
            2
        } else {
            0
        }
    }

    fn check_slots(&self, got: usize) -> Result<(), CollectiveError> {
        if got != self.topo.len() {
            return Err(CollectiveError::SlotCount { expected: self.topo.len(), got });
        }
        Ok(())
    }

    fn holder_values(&self, values: &[Vec<f64>]) -> Vec<Option<Vec<f64>>> {
        values.iter().zip(&self.holders).map(|(v, h)| h.then(|| v.clone())).collect()
    }

    fn record_fkms(&mut self, rounds: usize) {
        self.ledger.fkms_calls += 1;
        self.ledger.fkms_max_rounds = self.ledger.fkms_max_rounds.max(rounds);
        if rounds > fkms_round_bound(self.delta, self.holder_count, self.k) {
            self.ledger.fkms_violations += 1;
        }
    }

    fn phase_payload(&mut self) -> usize {
        if let Some(p) = self.phase_payload {
            return p;
        }
        let n = self.topo.len();
        let adj: Vec<Vec<usize>> = (0..n).map(|i| self.topo.neighbor_indices(i).to_vec()).collect();
        let mut total = 0;
        for i in 0..n {
            let depth = bfs_depths(&adj, i);
            let mut within = vec![0usize; self.delta + 1];
            for (j, &d) in depth.iter().enumerate() {
                if self.holders[j] && d <= self.delta {
                    within[d] += 1;
                }
            }
            let mut ball = 0;
            for count in within.iter().take(self.delta) {
                ball += count;
                total += adj[i].len() * 2 * ball.min(self.k);
            }
        }
        self.phase_payload = Some(total);
        total
    }

    fn direct_fkms_stats(&mut self, components: usize) -> RunStats {
        let rounds = self.fkms_rounds();
        let phases = rounds.checked_div(self.delta).unwrap_or(0);
        let per_round_messages = 2 * self.topo.edge_count();
        RunStats {
            rounds,
            messages_sent: rounds * per_round_messages,
            messages_delivered: rounds * per_round_messages,
            payload: phases * self.phase_payload() * components,
        }
    }

    /// Component-wise network sum of the holders' vectors (length
    /// `components`; entries of relays are ignored).
    pub fn sum(&mut self, values: &[Vec<f64>], components: usize) -> Result<Vec<f64>, CollectiveError> {
        self.check_slots(values.len())?;
        let vals = self.holder_values(values);
        match self.backend {
            Backend::Simulated => {
                let mut progs: Vec<FkmsProgram> = self
                    .topo
                    .nodes()
                    .iter()
                    .zip(vals)
                    .map(|(id, v)| FkmsProgram::new(*id, v, components, self.k, self.delta))
                    .collect();
                let out = run(self.topo, &mut progs, self.fkms_rounds())?;
                let sums = agreed_sums(&out.outputs)?;
                self.record_fkms(out.outputs.iter().map(|o| o.rounds).max().unwrap_or(0));
                self.ledger.charge(&out.stats);
                Ok(sums)
            }
            Backend::Direct => {
                for (id, v) in self.topo.nodes().iter().zip(&vals) {
                    if let Some(v) = v {
                        if v.len() != components {
                            return Err(ConsensusError::DimensionMismatch {
                                node: *id,
                                expected: components,
                                got: v.len(),
                            }
                            .into());
                        }
                    }
                }
                let sums = direct_fkms(self.topo.nodes(), &vals, components);
                let stats = self.direct_fkms_stats(components);
                self.record_fkms(stats.rounds);
                self.ledger.charge(&stats);
                Ok(sums)
            }
        }
    }

    /// Scalar convenience over [`Collective::sum`].
    pub fn sum_scalar(&mut self, values: &[f64]) -> Result<f64, CollectiveError> {
        let v: Vec<Vec<f64>> = values.iter().map(|x| vec![*x]).collect();
        Ok(self.sum(&v, 1)?[0])
    }

    pub fn local_sum(
        &mut self,
        weights: &[LocalSumWeights],
        spec: &LocalSumSpec,
        values: &[Option<Vec<f64>>],
    ) -> Result<Vec<Vec<f64>>, CollectiveError> {
        self.check_slots(values.len())?;
        self.check_slots(weights.len())?;
        self.ledger.local_sum_calls += 1;
        match self.backend {
            Backend::Simulated => {
                let mut progs: Vec<LocalSumProgram> =
                    weights.iter().zip(values).map(|(w, v)| LocalSumProgram::new(w, spec, v.clone())).collect();
                let out = run(self.topo, &mut progs, 2)?;
                self.ledger.charge(&out.stats);
                Ok(out.outputs)
            }
            Backend::Direct => {
                let (ys, stats) = self.direct_local_sum(weights, spec, values)?;
                self.ledger.charge(&stats);
                Ok(ys)
            }
        }
    }

    fn direct_local_sum(
        &self,
        weights: &[LocalSumWeights],
        spec: &LocalSumSpec,
        values: &[Option<Vec<f64>>],
    ) -> Result<(Vec<Vec<f64>>, RunStats), CollectiveError> {
        let degrees: Vec<usize> = (0..self.topo.len()).map(|i| self.topo.neighbors(i).len()).collect();
        let (ys, counts) = direct_local_sum(self.topo.nodes(), &degrees, weights, spec, values)?;
        let stats = RunStats {
            rounds: self.local_sum_rounds(),
            messages_sent: counts.messages,
            messages_delivered: counts.messages,
            payload: counts.payload,
        };
        Ok((ys, stats))
    }

    /// A sum and a local sum sharing rounds: max(FKMS, 2) rounds in total,
    /// with messages to the same neighbour bundled.
    pub fn sum_with_local_sum(
        &mut self,
        sum_values: &[Vec<f64>],
        components: usize,
        weights: &[LocalSumWeights],
        spec: &LocalSumSpec,
        ls_values: &[Option<Vec<f64>>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), CollectiveError> {
        self.check_slots(sum_values.len())?;
        self.check_slots(ls_values.len())?;
        self.check_slots(weights.len())?;
        self.ledger.local_sum_calls += 1;
        let vals = self.holder_values(sum_values);
        match self.backend {
            Backend::Simulated => {
                let mut progs: Vec<_> = self
                    .topo
                    .nodes()
                    .iter()
                    .zip(vals)
                    .zip(weights.iter().zip(ls_values))
                    .map(|((id, v), (w, x))| {
                        Joint::new(
                            FkmsProgram::new(*id, v, components, self.k, self.delta),
                            LocalSumProgram::new(w, spec, x.clone()),
                        )
                    })
                    .collect();
                let budget = self.fkms_rounds().max(self.local_sum_rounds());
                let out = run(self.topo, &mut progs, budget)?;
                let (fk, ys): (Vec<_>, Vec<_>) = out.outputs.into_iter().unzip();
                let sums = agreed_sums(&fk)?;
                self.record_fkms(fk.iter().map(|o| o.rounds).max().unwrap_or(0));
                self.ledger.charge(&out.stats);
                Ok((sums, ys))
            }
            Backend::Direct => {
                let sums = direct_fkms(self.topo.nodes(), &vals, components);
                let fk = self.direct_fkms_stats(components);
                self.record_fkms(fk.rounds);
                let (ys, ls) = self.direct_local_sum(weights, spec, ls_values)?;
                // local-sum messages ride along with FKMS traffic when FKMS
                // is active in both of their rounds
                let bundled = fk.rounds >= ls.rounds;
                let messages = if bundled { fk.messages_sent } else { fk.messages_sent + ls.messages_sent };
                self.ledger.charge(&RunStats {
                    rounds: fk.rounds.max(ls.rounds),
                    messages_sent: messages,
                    messages_delivered: messages,
                    payload: fk.payload + ls.payload,
                });
                Ok((sums, ys))
            }
        }
    }
}
