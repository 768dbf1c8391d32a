#![allow(dead_code)]

use std::collections::BTreeSet;

use baryloc::graph::{
    discover_cliques, generate_random_geometric, prune_scarcely_connected, weigh_cliques, AnchorRule, GenerationParams,
};
use baryloc::localization::LocalizationProblem;
use baryloc::verification::{localizable_subgraph, verify_localizability, VerificationParams};
use baryloc::{Configuration, NodeId, SensorNetwork, WeightedClique};

pub const MIN_QUALITY: f64 = 1e-2;

/// A generated, pruned and weighed network.
pub struct Net {
    pub config: Configuration,
    pub net: SensorNetwork,
    pub cliques: Vec<WeightedClique>,
}

pub fn network(n: usize, radius: f64, seed: u64) -> Option<Net> {
    let (config, net) = generate_random_geometric(&GenerationParams {
        n,
        box_side: 100.0,
        radius,
        anchor_rule: AnchorRule::Random,
        seed,
    })
    .ok()?;
    let (net, _) = prune_scarcely_connected(&net).ok()?;
    let cliques = weigh_cliques(&config, &discover_cliques(&net), MIN_QUALITY).admitted;
    Some(Net { config, net, cliques })
}

/// A network with its verified localizable set, when that set is non-empty
/// and connected.
pub struct Instance {
    pub base: Net,
    pub localizable: BTreeSet<NodeId>,
    pub problem: LocalizationProblem,
}

pub fn instance(n: usize, radius: f64, seed: u64) -> Option<Instance> {
    let base = network(n, radius, seed)?;
    let report =
        verify_localizability(&base.net, &base.cliques, &VerificationParams { seed, ..Default::default() }).ok()?;
    let localizable = localizable_subgraph(&base.net, &report).ok()?;
    if localizable.is_empty() {
        return None;
    }
    let problem = LocalizationProblem::new(&base.net, &base.cliques, &localizable, &base.config).ok()?;
    Some(Instance { base, localizable, problem })
}
