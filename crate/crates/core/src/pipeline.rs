//! The full scenario run: prune, weigh cliques, verify, localize, compare
//! with the baselines, and write the artifacts.
//!
//! Artifacts (all with a format header): `network.txt`, `verdicts.json`,
//! `trace.csv`, `positions.csv`, `summary.json` and the `scenario.toml` that
//! produced them. Wall-clock times go to `timing.json` so that every other
//! artifact is identical across runs of the same scenario.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

use crate::consensus::fkms_round_bound;
use crate::geometry::Point3;
use crate::graph::{
    diameter, discover_cliques, generate_random_geometric, prune_scarcely_connected, weigh_cliques, write_network,
    Configuration, GraphError, NodeId, Rejection, SensorNetwork, WeightedClique,
};
use crate::localization::{
    jacobi_ur_baseline, localize, normal_lambda_max, richardson_baseline, BaselineSeries, LocalizationError,
    LocalizationProblem, LocalizationResult,
};
use crate::runtime::RunTrace;
use crate::scenario::Scenario;
use crate::verification::{localizable_subgraph, verify_localizability, VerificationError, VerificationReport};

pub const SUMMARY_FORMAT: &str = "baryloc-summary v1";
pub const TIMING_FORMAT: &str = "baryloc-timing v1";
pub const POSITIONS_HEADER: &str = "# baryloc-positions v1";
/// The scenario a run used, written next to its artifacts for replay.
pub const SCENARIO_FILE: &str = "scenario.toml";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("generation: {0}")]
    Generation(GraphError),
    #[error("pruning: {0}")]
    Pruning(GraphError),
    #[error("verification: {0}")]
    Verification(#[from] VerificationError),
    #[error("localization: {0}")]
    Localization(#[from] LocalizationError),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub generate: f64,
    pub prune_and_weigh: f64,
    pub verify: f64,
    pub localize: f64,
    pub baselines: f64,
}

pub struct PipelineRun {
    pub scenario: Scenario,
    pub config: Configuration,
    pub network: SensorNetwork,
    pub pruned: SensorNetwork,
    pub removed: BTreeSet<NodeId>,
    pub cliques_found: usize,
    pub cliques: Vec<WeightedClique>,
    pub rejected_quality: usize,
    pub rejected_geometry: usize,
    pub verification: VerificationReport,
    pub localizable: BTreeSet<NodeId>,
    pub problem: LocalizationProblem,
    pub localization: LocalizationResult,
    pub richardson: BaselineSeries,
    pub jacobi: BaselineSeries,
    pub timing: Timing,
}

/// Generates the scenario's network and runs the pipeline on it.
pub fn run_scenario(scenario: &Scenario) -> Result<PipelineRun, PipelineError> {
    let t = Instant::now();
    let (config, net) = generate_random_geometric(&scenario.generation()).map_err(PipelineError::Generation)?;
    let generate = t.elapsed().as_secs_f64();
    let mut run = run_on_network(scenario, config, net)?;
    run.timing.generate = generate;
    Ok(run)
}

/// A network after pruning and clique weighing.
pub struct Prepared {
    pub pruned: SensorNetwork,
    pub removed: BTreeSet<NodeId>,
    pub cliques_found: usize,
    pub cliques: Vec<WeightedClique>,
    pub rejected_quality: usize,
    pub rejected_geometry: usize,
}

/// Prunes scarcely connected nodes and weighs the remaining cliques.
pub fn prepare(
    scenario: &Scenario,
    config: &Configuration,
    network: &SensorNetwork,
) -> Result<Prepared, PipelineError> {
    let (pruned, removed) = prune_scarcely_connected(network).map_err(PipelineError::Pruning)?;
    let found = discover_cliques(&pruned);
    let weighing = weigh_cliques(config, &found, scenario.min_quality);
    let rejected_quality = weighing.rejected.iter().filter(|(_, r)| matches!(r, Rejection::LowQuality(_))).count();
    let rejected_geometry = weighing.rejected.len() - rejected_quality;
    Ok(Prepared {
        pruned,
        removed,
        cliques_found: found.len(),
        cliques: weighing.admitted,
        rejected_quality,
        rejected_geometry,
    })
}

/// Runs everything after generation on a given network.
pub fn run_on_network(
    scenario: &Scenario,
    config: Configuration,
    network: SensorNetwork,
) -> Result<PipelineRun, PipelineError> {
    let mut timing = Timing::default();
    let t = Instant::now();
    let Prepared { pruned, removed, cliques_found, cliques, rejected_quality, rejected_geometry } =
        prepare(scenario, &config, &network)?;
    timing.prune_and_weigh = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let verification = verify_localizability(&pruned, &cliques, &scenario.verification())?;
    let localizable = localizable_subgraph(&pruned, &verification)?;
    timing.verify = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let problem = LocalizationProblem::new(&pruned, &cliques, &localizable, &config)?;
    let localization = localize(&problem, &scenario.localization(), Some(&config))?;
    timing.localize = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let truth: Vec<Point3> = problem.nodes().iter().map(|id| config.position(*id)).collect();
    let iters = scenario.baseline_iters.unwrap_or(localization.iterations);
    let (richardson, jacobi) = if problem.n_z() == 0 {
        let empty =
            |p| BaselineSeries { parameter: p, error_ratio: Vec::new(), diverged_at: None, estimates: Vec::new() };
        (empty(scenario.gamma.unwrap_or(0.0)), empty(scenario.omega))
    } else {
        let gamma = scenario.gamma.unwrap_or_else(|| 1.0 / normal_lambda_max(&problem));
        (
            richardson_baseline(&problem, &localization.initial, &truth, gamma, iters),
            jacobi_ur_baseline(&problem, &localization.initial, &truth, scenario.omega, iters),
        )
    };
    timing.baselines = t.elapsed().as_secs_f64();

    Ok(PipelineRun {
        scenario: scenario.clone(),
        config,
        network,
        pruned,
        removed,
        cliques_found,
        cliques,
        rejected_quality,
        rejected_geometry,
        verification,
        localizable,
        problem,
        localization,
        richardson,
        jacobi,
        timing,
    })
}

fn ratio_at(series: &[f64], k: usize) -> Option<f64> {
    series.get(k).copied()
}

impl PipelineRun {
    /// Error-ratio trace: one row per CG iteration, at the round count
    /// reached after it. Baseline cells past a divergence stop are NaN.
    pub fn trace(&self) -> RunTrace {
        let loc = &self.localization;
        let mut trace = RunTrace::with_columns(["iteration", "cg", "ri", "ju"]);
        let per_iter = loc.rounds.checked_div(loc.iterations).unwrap_or(0);
        let rows = loc.error_ratio.len().max(self.richardson.error_ratio.len()).max(self.jacobi.error_ratio.len());
        for k in 0..rows {
            trace.rounds = loc.init_rounds + k * per_iter;
            trace.record(vec![
                k as f64,
                ratio_at(&loc.error_ratio, k).unwrap_or(f64::NAN),
                ratio_at(&self.richardson.error_ratio, k).unwrap_or(f64::NAN),
                ratio_at(&self.jacobi.error_ratio, k).unwrap_or(f64::NAN),
            ]);
        }
        trace.rounds = loc.init_rounds + loc.rounds;
        trace
    }

    pub fn summary(&self) -> serde_json::Value {
        let v = &self.verification;
        let l = &self.localization;
        let n_f = v.n_f();
        let unloc: Vec<NodeId> = v.unlocalizable().into_iter().collect();
        let at_cg = l.iterations;
        let baseline = |b: &BaselineSeries| {
            json!({
                "parameter": b.parameter,
                "iterations": b.error_ratio.len().saturating_sub(1),
                "final_error_ratio": b.error_ratio.last(),
                "error_ratio_at_cg_iterations": ratio_at(&b.error_ratio, at_cg),
                "diverged_at": b.diverged_at,
            })
        };
        json!({
            "format": SUMMARY_FORMAT,
            "scenario": self.scenario,
            "network": {
                "nodes": self.network.n(),
                "edges": self.network.edge_count(),
                "anchors": self.network.anchors(),
                "diameter": diameter(&self.network).ok(),
                "pruned_nodes": self.pruned.n(),
                "removed": self.removed,
                "cliques_found": self.cliques_found,
                "cliques_admitted": self.cliques.len(),
                "cliques_rejected_quality": self.rejected_quality,
                "cliques_rejected_geometry": self.rejected_geometry,
            },
            "verification": {
                "free_nodes": n_f,
                "localizable": n_f - unloc.len(),
                "unlocalizable": unloc.len(),
                "unlocalizable_nodes": unloc,
                "iterations": v.iterations,
                "converged": v.converged,
                "restarts": v.restarts,
                "replaced_columns": v.replaced_columns,
                "unsupported_small_eigenvalues": v.unsupported_small_eigenvalues,
                "delta": v.delta,
                "fkms_round_bound": fkms_round_bound(v.delta, n_f, self.scenario.k),
                "ledger": v.ledger,
            },
            "localization": localization_json(l, &self.config),
            "baselines": {
                "richardson": baseline(&self.richardson),
                "jacobi_under_relaxation": baseline(&self.jacobi),
            },
        })
    }

    pub fn timing_json(&self) -> serde_json::Value {
        let t = &self.timing;
        json!({
            "format": TIMING_FORMAT,
            "generate_s": t.generate,
            "prune_and_weigh_s": t.prune_and_weigh,
            "verify_s": t.verify,
            "localize_s": t.localize,
            "baselines_s": t.baselines,
            "total_s": t.generate + t.prune_and_weigh + t.verify + t.localize + t.baselines,
        })
    }

    pub fn write_positions<W: Write>(&self, w: W) -> std::io::Result<()> {
        write_positions(w, &self.localization, &self.config)
    }

    /// Writes every artifact into `dir` and returns their paths.
    pub fn write_artifacts(&self, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| PipelineError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        let mut put = |name: &str, f: &dyn Fn(&mut dyn Write) -> std::io::Result<()>| {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(io(&path))?;
            let mut w = BufWriter::new(file);
            f(&mut w).and_then(|_| w.flush()).map_err(io(&path))?;
            written.push(path);
            Ok::<(), PipelineError>(())
        };
        put("network.txt", &|w| {
            write_network(w, &self.network, &self.config).map_err(|e| std::io::Error::other(e.to_string()))
        })?;
        put("verdicts.json", &|w| json_to(w, &self.verification.to_json()))?;
        put("trace.csv", &|w| self.trace().write_csv(w))?;
        put("positions.csv", &|w| self.write_positions(w))?;
        put("summary.json", &|w| json_to(w, &self.summary()))?;
        put("timing.json", &|w| json_to(w, &self.timing_json()))?;
        put(SCENARIO_FILE, &|w| w.write_all(self.scenario.to_file_text().as_bytes()))?;
        Ok(written)
    }
}

/// Iterations, rounds, bounds and accuracy of one localization.
pub fn localization_json(l: &LocalizationResult, truth: &Configuration) -> serde_json::Value {
    json!({
        "n_z": l.n_z(),
        "delta_z": l.delta_z,
        "iterations": l.iterations,
        "iteration_cap": l.max_iter,
        "termination": l.termination,
        "rounds": l.rounds,
        "init_rounds": l.init_rounds,
        "round_bound": l.round_bound,
        "theorem_bound": l.theorem_bound,
        "relative_error": l.relative_error(truth),
        "final_error_ratio": l.error_ratio.last(),
        "final_residual": l.residual_norms.last(),
        "ledger": l.ledger,
        "init_ledger": l.init_ledger,
    })
}

/// Estimates next to the true positions, one row per localized node.
pub fn write_positions<W: Write>(mut w: W, loc: &LocalizationResult, truth: &Configuration) -> std::io::Result<()> {
    writeln!(w, "{POSITIONS_HEADER}")?;
    writeln!(w, "node,x,y,z,true_x,true_y,true_z,error")?;
    for (id, p) in loc.nodes.iter().zip(&loc.estimates) {
        let t = truth.position(*id);
        writeln!(w, "{id},{:e},{:e},{:e},{:e},{:e},{:e},{:e}", p.x, p.y, p.z, t.x, t.y, t.z, (*p - t).norm())?;
    }
    Ok(())
}

/// Writes `f`'s output to `path`, creating parent directories.
pub fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), PipelineError> {
    let io = |source| PipelineError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    f(&mut w).and_then(|_| w.flush()).map_err(io)
}

/// Pretty JSON followed by a newline.
pub fn json_to(w: &mut dyn Write, v: &serde_json::Value) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut *w, v)?;
    writeln!(w)
}
